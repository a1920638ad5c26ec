use ndarray::{ArrayD, Ix2, IxDyn};
use rand::seq::index::sample;

use super::layer::Mode;
use super::loss::batch_cosine_loss;
use super::network::{net_backward, net_forward, NetworkSpec, ParamGrads, ParamSet};
use crate::error::{Error, Result};
use crate::seed;

/// Analytic gradients of the mean cosine loss.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: ParamGrads,
    pub inputs: Vec<ArrayD<f64>>,
}

impl Gradients {
    pub fn scale(&mut self, factor: f64) {
        self.params.scale(factor);
        for g in &mut self.inputs {
            g.mapv_inplace(|v| v * factor);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Coordinates probed per tensor; larger tensors are subsampled.
    pub max_coords: usize,
    /// Fixes dropout masks so every evaluation sees the same network.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords: 24,
            seed: 0,
        }
    }
}

fn loss_at(net: &NetworkSpec, params: &ParamSet, inputs: &[ArrayD<f64>], targets: &ArrayD<f64>, seed_: u64) -> Result<f64> {
    let out = net_forward(net, params, inputs, Mode::Train, seed_)?;
    let (l, _) = batch_cosine_loss(view2(&out.output)?, view2(targets)?)?;
    Ok(l)
}

fn view2(x: &ArrayD<f64>) -> Result<ndarray::ArrayView2<'_, f64>> {
    x.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Shape(format!("expected a (batch, dim) array, got {:?}", x.shape())))
}

pub fn analytic_gradients(
    net: &NetworkSpec,
    params: &ParamSet,
    inputs: &[ArrayD<f64>],
    targets: &ArrayD<f64>,
    seed_: u64,
) -> Result<Gradients> {
    let out = net_forward(net, params, inputs, Mode::Train, seed_)?;
    let (_, g) = batch_cosine_loss(view2(&out.output)?, view2(targets)?)?;
    let (params, inputs) = net_backward(net, params, &out, &g.into_dyn())?;
    Ok(Gradients { params, inputs })
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn coords(len: usize, max: usize, seed_: u64) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        sample(&mut seed::rng(seed_), len, max).into_vec()
    }
}

/// Largest relative error between `analytic` and central differences, over
/// sampled coordinates of every parameter tensor and every input.
pub fn compare_with_finite_differences(
    net: &NetworkSpec,
    params: &ParamSet,
    inputs: &[ArrayD<f64>],
    targets: &ArrayD<f64>,
    analytic: &Gradients,
    opts: &GradCheckOptions,
) -> Result<f64> {
    let h = opts.h;
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for l in 0..params.layers.len() {
        for j in 0..params.layers[l].weights.len() {
            let len = params.layers[l].weights[j].len();
            for c in coords(len, opts.max_coords, seed::mix(opts.seed, (l * 16 + j) as u64)) {
                let idx = IxDyn(&unravel(c, params.layers[l].weights[j].shape()));
                let orig = params.layers[l].weights[j][&idx];
                probe.layers[l].weights[j][&idx] = orig + h;
                let up = loss_at(net, &probe, inputs, targets, opts.seed)?;
                probe.layers[l].weights[j][&idx] = orig - h;
                let down = loss_at(net, &probe, inputs, targets, opts.seed)?;
                probe.layers[l].weights[j][&idx] = orig;
                let a = analytic.params.layers[l][j][&idx];
                worst = worst.max(relative_error(a, (up - down) / (2.0 * h)));
            }
        }
    }
    let mut xs: Vec<ArrayD<f64>> = inputs.to_vec();
    for b in 0..xs.len() {
        for c in coords(xs[b].len(), opts.max_coords, seed::mix(opts.seed, 1 << 20 | b as u64)) {
            let idx = IxDyn(&unravel(c, xs[b].shape()));
            let orig = xs[b][&idx];
            xs[b][&idx] = orig + h;
            let up = loss_at(net, params, &xs, targets, opts.seed)?;
            xs[b][&idx] = orig - h;
            let down = loss_at(net, params, &xs, targets, opts.seed)?;
            xs[b][&idx] = orig;
            let a = analytic.inputs[b][&idx];
            worst = worst.max(relative_error(a, (up - down) / (2.0 * h)));
        }
    }
    Ok(worst)
}

fn unravel(mut c: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for (i, &d) in shape.iter().enumerate().rev() {
        idx[i] = c % d;
        c /= d;
    }
    idx
}

/// Maximum relative error of backprop against finite differences, run in
/// train mode with dropout masks frozen by `opts.seed`.
pub fn gradient_check(
    net: &NetworkSpec,
    params: &ParamSet,
    inputs: &[ArrayD<f64>],
    targets: &ArrayD<f64>,
    opts: &GradCheckOptions,
) -> Result<f64> {
    let analytic = analytic_gradients(net, params, inputs, targets, opts.seed)?;
    compare_with_finite_differences(net, params, inputs, targets, &analytic, opts)
}
