use ndarray::{s, Array1, Array2, Array3, ArrayD, Axis, Ix2, Ix3, IxDyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;

/// Per-sample activation shape. Batches add a leading axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Vector(usize),
    /// Channels × time steps; convolutions and pooling run along time.
    Series { channels: usize, steps: usize },
}

impl Shape {
    pub fn size(&self) -> usize {
        match *self {
            Shape::Vector(d) => d,
            Shape::Series { channels, steps } => channels * steps,
        }
    }

    pub fn with_batch(&self, batch: usize) -> Vec<usize> {
        match *self {
            Shape::Vector(d) => vec![batch, d],
            Shape::Series { channels, steps } => vec![batch, channels, steps],
        }
    }

    fn vector(self, what: &str) -> Result<usize> {
        match self {
            Shape::Vector(d) => Ok(d),
            other => Err(Error::Shape(format!("{what} needs a vector input, got {other:?}"))),
        }
    }

    fn series(self, what: &str) -> Result<(usize, usize)> {
        match self {
            Shape::Series { channels, steps } => Ok((channels, steps)),
            other => Err(Error::Shape(format!("{what} needs a series input, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding keeping the step count; for even widths the extra pad
    /// goes on the right.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    /// Non-overlapping windows; a trailing remainder is dropped.
    Window(usize),
    /// Adaptive windows `[floor(i*T/n), ceil((i+1)*T/n))` producing exactly
    /// `n` steps. With fewer than `n` input steps windows repeat.
    ToSteps(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Dense { units: usize },
    Conv1dTime { filters: usize, width: usize, padding: Padding },
    MaxPoolTime(Pool),
    Relu,
    Dropout { rate: f64 },
    BatchNorm { momentum: f64, eps: f64 },
    L2Norm,
    Flatten,
    Concat,
}

pub const L2_EPS: f64 = 1e-12;

impl LayerSpec {
    pub fn dense(units: usize) -> Self {
        LayerSpec::Dense { units }
    }

    pub fn conv(filters: usize, width: usize) -> Self {
        LayerSpec::Conv1dTime {
            filters,
            width,
            padding: Padding::Same,
        }
    }

    pub fn dropout(rate: f64) -> Self {
        LayerSpec::Dropout { rate }
    }

    pub fn batchnorm() -> Self {
        LayerSpec::BatchNorm {
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv1dTime { .. } => "conv1d_time",
            LayerSpec::MaxPoolTime(_) => "maxpool_time",
            LayerSpec::Relu => "relu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::L2Norm => "l2norm",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Concat => "concat",
        }
    }

    /// Output shape for the given input shapes; also validates attributes.
    pub fn output_shape(&self, inputs: &[Shape]) -> Result<Shape> {
        if !matches!(self, LayerSpec::Concat) && inputs.len() != 1 {
            return Err(Error::Shape(format!("{} takes one input, got {}", self.kind(), inputs.len())));
        }
        match *self {
            LayerSpec::Dense { units } => {
                inputs[0].vector("dense")?;
                positive(units, "dense units")?;
                Ok(Shape::Vector(units))
            }
            LayerSpec::Conv1dTime { filters, width, padding } => {
                let (_, steps) = inputs[0].series("conv1d_time")?;
                positive(filters, "conv filters")?;
                positive(width, "conv width")?;
                let out = conv_out_steps(steps, width, padding)?;
                Ok(Shape::Series { channels: filters, steps: out })
            }
            LayerSpec::MaxPoolTime(pool) => {
                let (channels, steps) = inputs[0].series("maxpool_time")?;
                Ok(Shape::Series {
                    channels,
                    steps: pool_out_steps(steps, pool)?,
                })
            }
            LayerSpec::L2Norm => {
                inputs[0].vector("l2norm")?;
                Ok(inputs[0])
            }
            LayerSpec::Relu => Ok(inputs[0]),
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::InvalidInput(format!("dropout rate {rate} outside [0, 1)")));
                }
                Ok(inputs[0])
            }
            LayerSpec::BatchNorm { momentum, eps } => {
                inputs[0].vector("batchnorm")?;
                if !(0.0..=1.0).contains(&momentum) || !(eps > 0.0) {
                    return Err(Error::InvalidInput("batchnorm needs momentum in [0,1] and eps > 0".into()));
                }
                Ok(inputs[0])
            }
            LayerSpec::Flatten => Ok(Shape::Vector(inputs[0].size())),
            LayerSpec::Concat => {
                if inputs.is_empty() {
                    return Err(Error::Shape("concat needs at least one input".into()));
                }
                let mut total = 0;
                for s in inputs {
                    total += s.vector("concat")?;
                }
                Ok(Shape::Vector(total))
            }
        }
    }

    /// Shapes of the trainable tensors for the given input shape.
    pub fn param_shapes(&self, input: Shape) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense { units } => vec![vec![units, input.size()], vec![units]],
            LayerSpec::Conv1dTime { filters, width, .. } => {
                let channels = match input {
                    Shape::Series { channels, .. } => channels,
                    Shape::Vector(_) => 0,
                };
                vec![vec![filters, channels, width], vec![filters]]
            }
            LayerSpec::BatchNorm { .. } => vec![vec![input.size()], vec![input.size()]],
            _ => vec![],
        }
    }
}

fn positive(v: usize, what: &str) -> Result<()> {
    if v == 0 {
        return Err(Error::InvalidInput(format!("{what} must be positive")));
    }
    Ok(())
}

fn pads(width: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Same => ((width - 1) / 2, width - 1 - (width - 1) / 2),
        Padding::Valid => (0, 0),
    }
}

fn conv_out_steps(steps: usize, width: usize, padding: Padding) -> Result<usize> {
    let (l, r) = pads(width, padding);
    let padded = steps + l + r;
    if padded < width {
        return Err(Error::Shape(format!("conv width {width} exceeds {steps} steps")));
    }
    Ok(padded - width + 1)
}

fn pool_out_steps(steps: usize, pool: Pool) -> Result<usize> {
    match pool {
        Pool::Window(size) => {
            positive(size, "pool size")?;
            if steps < size {
                return Err(Error::Shape(format!("pool size {size} exceeds {steps} steps")));
            }
            Ok(steps / size)
        }
        Pool::ToSteps(n) => {
            positive(n, "pool target")?;
            positive(steps, "pooled steps")?;
            Ok(n)
        }
    }
}

fn pool_window(o: usize, steps: usize, pool: Pool) -> (usize, usize) {
    match pool {
        Pool::Window(size) => (o * size, o * size + size),
        Pool::ToSteps(n) => (o * steps / n, ((o + 1) * steps).div_ceil(n)),
    }
}

/// Trainable tensors plus non-trainable state (batchnorm running mean and
/// variance).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Vec<ArrayD<f64>>,
    pub state: Vec<ArrayD<f64>>,
}

impl LayerParams {
    pub fn empty() -> Self {
        Self {
            weights: vec![],
            state: vec![],
        }
    }

    /// Glorot-uniform weights, zero biases, unit batchnorm gain.
    pub fn init(spec: &LayerSpec, input: Shape, seed_: u64) -> Self {
        let mut rng = seed::rng(seed_);
        let mut glorot = |shape: &[usize], fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-limit..limit))
        };
        match *spec {
            LayerSpec::Dense { units } => Self {
                weights: vec![
                    glorot(&[units, input.size()], input.size(), units),
                    ArrayD::zeros(IxDyn(&[units])),
                ],
                state: vec![],
            },
            LayerSpec::Conv1dTime { filters, width, .. } => {
                let shapes = spec.param_shapes(input);
                let channels = shapes[0][1];
                Self {
                    weights: vec![
                        glorot(&shapes[0], channels * width, filters * width),
                        ArrayD::zeros(IxDyn(&[filters])),
                    ],
                    state: vec![],
                }
            }
            LayerSpec::BatchNorm { .. } => {
                let d = input.size();
                Self {
                    weights: vec![ArrayD::ones(IxDyn(&[d])), ArrayD::zeros(IxDyn(&[d]))],
                    state: vec![ArrayD::zeros(IxDyn(&[d])), ArrayD::ones(IxDyn(&[d]))],
                }
            }
            _ => Self::empty(),
        }
    }
}

/// What a layer's backward pass needs from its forward pass.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Dense { input: Array2<f64> },
    Conv { input: Array3<f64> },
    Pool { input_dim: (usize, usize, usize), argmax: Array3<usize> },
    Relu { output: ArrayD<f64> },
    Dropout { mask: Option<ArrayD<f64>> },
    BatchNorm {
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
        /// Batch mean and biased variance (train mode only).
        batch_stats: Option<(Array1<f64>, Array1<f64>)>,
    },
    L2Norm { output: Array2<f64>, norms: Array1<f64> },
    Flatten { input_dim: Vec<usize> },
    Concat { widths: Vec<usize> },
}

fn as2(x: &ArrayD<f64>, what: &str) -> Result<Array2<f64>> {
    x.clone()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Shape(format!("{what} expects (batch, features), got {:?}", x.shape())))
}

fn as3(x: &ArrayD<f64>, what: &str) -> Result<Array3<f64>> {
    x.clone()
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::Shape(format!("{what} expects (batch, channels, steps), got {:?}", x.shape())))
}

fn check_finite(x: &ArrayD<f64>, what: &str) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} produced non-finite activations")));
    }
    Ok(())
}

fn weights<'a>(params: &'a LayerParams, n: usize, what: &str) -> Result<&'a [ArrayD<f64>]> {
    if params.weights.len() != n {
        return Err(Error::Shape(format!("{what} expects {n} parameter tensors, got {}", params.weights.len())));
    }
    Ok(&params.weights)
}

/// Runs one layer forward on a batch. Only `Concat` takes several inputs.
pub fn layer_forward(
    spec: &LayerSpec,
    params: &LayerParams,
    inputs: &[&ArrayD<f64>],
    mode: Mode,
    seed_: u64,
) -> Result<(ArrayD<f64>, LayerCache)> {
    if !matches!(spec, LayerSpec::Concat) && inputs.len() != 1 {
        return Err(Error::Shape(format!("{} takes one input, got {}", spec.kind(), inputs.len())));
    }
    for x in inputs {
        check_finite(x, "layer input")?;
    }
    let x = inputs[0];
    let (y, cache) = match *spec {
        LayerSpec::Dense { units } => {
            let w = weights(params, 2, "dense")?;
            let x2 = as2(x, "dense")?;
            let wm = w[0].view().into_dimensionality::<Ix2>().map_err(|e| Error::Shape(e.to_string()))?;
            if wm.dim() != (units, x2.ncols()) {
                return Err(Error::Shape(format!(
                    "dense weights {:?} do not fit input width {}",
                    wm.dim(),
                    x2.ncols()
                )));
            }
            let b = w[1].view().into_dimensionality::<ndarray::Ix1>().map_err(|e| Error::Shape(e.to_string()))?;
            let y = x2.dot(&wm.t()) + b;
            (y.into_dyn(), LayerCache::Dense { input: x2 })
        }
        LayerSpec::Conv1dTime { filters, width, padding } => {
            let w = weights(params, 2, "conv1d_time")?;
            let x3 = as3(x, "conv1d_time")?;
            let (batch, channels, steps) = x3.dim();
            if w[0].shape() != [filters, channels, width] {
                return Err(Error::Shape(format!(
                    "conv weights {:?} do not fit {channels} input channels",
                    w[0].shape()
                )));
            }
            let wmat = w[0]
                .view()
                .into_shape_with_order((filters, channels * width))
                .map_err(|e| Error::Shape(e.to_string()))?;
            let out_steps = conv_out_steps(steps, width, padding)?;
            let mut y = Array3::zeros((batch, filters, out_steps));
            for n in 0..batch {
                let cols = im2col(&x3, n, width, padding, out_steps);
                let mut yn = wmat.dot(&cols);
                for (f, mut row) in yn.axis_iter_mut(Axis(0)).enumerate() {
                    row += w[1][[f]];
                }
                y.slice_mut(s![n, .., ..]).assign(&yn);
            }
            (y.into_dyn(), LayerCache::Conv { input: x3 })
        }
        LayerSpec::MaxPoolTime(pool) => {
            let x3 = as3(x, "maxpool_time")?;
            let (batch, channels, steps) = x3.dim();
            let out_steps = pool_out_steps(steps, pool)?;
            let mut y = Array3::zeros((batch, channels, out_steps));
            let mut argmax = Array3::zeros((batch, channels, out_steps));
            for n in 0..batch {
                for c in 0..channels {
                    for o in 0..out_steps {
                        let (lo, hi) = pool_window(o, steps, pool);
                        let mut best = lo;
                        for t in lo + 1..hi {
                            if x3[[n, c, t]] > x3[[n, c, best]] {
                                best = t;
                            }
                        }
                        y[[n, c, o]] = x3[[n, c, best]];
                        argmax[[n, c, o]] = best;
                    }
                }
            }
            (
                y.into_dyn(),
                LayerCache::Pool {
                    input_dim: x3.dim(),
                    argmax,
                },
            )
        }
        LayerSpec::Relu => {
            let y = x.mapv(|v| v.max(0.0));
            (y.clone(), LayerCache::Relu { output: y })
        }
        LayerSpec::Dropout { rate } => {
            if mode == Mode::Eval || rate == 0.0 {
                (x.clone(), LayerCache::Dropout { mask: None })
            } else {
                let mut rng = seed::rng(seed_);
                let keep = 1.0 / (1.0 - rate);
                let mask = x.mapv(|_| if rng.random::<f64>() < rate { 0.0 } else { keep });
                (x * &mask, LayerCache::Dropout { mask: Some(mask) })
            }
        }
        LayerSpec::BatchNorm { eps, .. } => {
            let w = weights(params, 2, "batchnorm")?;
            let x2 = as2(x, "batchnorm")?;
            let d = x2.ncols();
            let gamma = w[0].view().into_dimensionality::<ndarray::Ix1>().map_err(|e| Error::Shape(e.to_string()))?;
            let beta = w[1].view().into_dimensionality::<ndarray::Ix1>().map_err(|e| Error::Shape(e.to_string()))?;
            if gamma.len() != d || params.state.len() != 2 {
                return Err(Error::Shape(format!("batchnorm parameters do not fit width {d}")));
            }
            let (mean, var, batch_stats) = match mode {
                Mode::Train => {
                    let n = x2.nrows() as f64;
                    let mean = x2.sum_axis(Axis(0)) / n;
                    let centered = &x2 - &mean;
                    let var = (&centered * &centered).sum_axis(Axis(0)) / n;
                    (mean.clone(), var.clone(), Some((mean, var)))
                }
                Mode::Eval => (
                    params.state[0].clone().into_dimensionality().map_err(|e| Error::Shape(e.to_string()))?,
                    params.state[1].clone().into_dimensionality().map_err(|e| Error::Shape(e.to_string()))?,
                    None,
                ),
            };
            let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
            let xhat = (&x2 - &mean) * &inv_std;
            let y = &xhat * &gamma + beta;
            (
                y.into_dyn(),
                LayerCache::BatchNorm {
                    xhat,
                    inv_std,
                    batch_stats,
                },
            )
        }
        LayerSpec::L2Norm => {
            let x2 = as2(x, "l2norm")?;
            let norms = x2.map_axis(Axis(1), |r| r.dot(&r).sqrt());
            let mut y = x2;
            for (mut row, &n) in y.axis_iter_mut(Axis(0)).zip(norms.iter()) {
                row /= n.max(L2_EPS);
            }
            (y.clone().into_dyn(), LayerCache::L2Norm { output: y, norms })
        }
        LayerSpec::Flatten => {
            let batch = x.shape()[0];
            let rest: usize = x.shape()[1..].iter().product();
            let y = x
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(&[batch, rest]))
                .map_err(|e| Error::Shape(e.to_string()))?;
            (
                y,
                LayerCache::Flatten {
                    input_dim: x.shape().to_vec(),
                },
            )
        }
        LayerSpec::Concat => {
            let parts: Vec<Array2<f64>> = inputs.iter().map(|x| as2(x, "concat")).collect::<Result<_>>()?;
            let batch = parts[0].nrows();
            if parts.iter().any(|p| p.nrows() != batch) {
                return Err(Error::Shape("concat inputs disagree on batch size".into()));
            }
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            let y = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
            (
                y.into_dyn(),
                LayerCache::Concat {
                    widths: parts.iter().map(|p| p.ncols()).collect(),
                },
            )
        }
    };
    check_finite(&y, spec.kind())?;
    Ok((y, cache))
}

fn im2col(x: &Array3<f64>, n: usize, width: usize, padding: Padding, out_steps: usize) -> Array2<f64> {
    let (_, channels, steps) = x.dim();
    let (left, _) = pads(width, padding);
    let mut cols = Array2::zeros((channels * width, out_steps));
    for c in 0..channels {
        for k in 0..width {
            let mut row = cols.row_mut(c * width + k);
            for (t, cell) in row.iter_mut().enumerate() {
                let src = t + k;
                if src >= left && src - left < steps {
                    *cell = x[[n, c, src - left]];
                }
            }
        }
    }
    cols
}

/// Backward pass: gradients with respect to each input and to each
/// trainable tensor of the layer.
pub fn layer_backward(
    spec: &LayerSpec,
    params: &LayerParams,
    cache: &LayerCache,
    grad_out: &ArrayD<f64>,
) -> Result<(Vec<ArrayD<f64>>, Vec<ArrayD<f64>>)> {
    let mismatch = || Error::Shape(format!("cache does not belong to a {} layer", spec.kind()));
    match (spec, cache) {
        (LayerSpec::Dense { .. }, LayerCache::Dense { input }) => {
            let g = as2(grad_out, "dense backward")?;
            let w = weights(params, 2, "dense")?;
            let wm = w[0].view().into_dimensionality::<Ix2>().map_err(|e| Error::Shape(e.to_string()))?;
            let dw = g.t().dot(input);
            let db = g.sum_axis(Axis(0));
            let dx = g.dot(&wm);
            Ok((vec![dx.into_dyn()], vec![dw.into_dyn(), db.into_dyn()]))
        }
        (LayerSpec::Conv1dTime { filters, width, padding }, LayerCache::Conv { input }) => {
            let g = as3(grad_out, "conv backward")?;
            let w = weights(params, 2, "conv1d_time")?;
            let (batch, channels, steps) = input.dim();
            let wmat = w[0]
                .view()
                .into_shape_with_order((*filters, channels * width))
                .map_err(|e| Error::Shape(e.to_string()))?;
            let out_steps = g.dim().2;
            let (left, _) = pads(*width, *padding);
            let mut dw = Array2::<f64>::zeros((*filters, channels * width));
            let mut db = Array1::<f64>::zeros(*filters);
            let mut dx = Array3::<f64>::zeros((batch, channels, steps));
            for n in 0..batch {
                let gn = g.slice(s![n, .., ..]);
                let cols = im2col(input, n, *width, *padding, out_steps);
                dw += &gn.dot(&cols.t());
                db += &gn.sum_axis(Axis(1));
                let dcols = wmat.t().dot(&gn);
                for c in 0..channels {
                    for k in 0..*width {
                        let row = dcols.row(c * width + k);
                        for (t, v) in row.iter().enumerate() {
                            let src = t + k;
                            if src >= left && src - left < steps {
                                dx[[n, c, src - left]] += v;
                            }
                        }
                    }
                }
            }
            let dw = dw
                .into_shape_with_order((*filters, channels, *width))
                .map_err(|e| Error::Shape(e.to_string()))?;
            Ok((vec![dx.into_dyn()], vec![dw.into_dyn(), db.into_dyn()]))
        }
        (LayerSpec::MaxPoolTime(_), LayerCache::Pool { input_dim, argmax }) => {
            let g = as3(grad_out, "pool backward")?;
            let mut dx = Array3::<f64>::zeros(*input_dim);
            for ((n, c, o), &t) in argmax.indexed_iter() {
                dx[[n, c, t]] += g[[n, c, o]];
            }
            Ok((vec![dx.into_dyn()], vec![]))
        }
        (LayerSpec::Relu, LayerCache::Relu { output }) => {
            let mut dx = grad_out.clone();
            dx.zip_mut_with(output, |d, &y| {
                if y <= 0.0 {
                    *d = 0.0;
                }
            });
            Ok((vec![dx], vec![]))
        }
        (LayerSpec::Dropout { .. }, LayerCache::Dropout { mask }) => {
            let dx = match mask {
                Some(m) => grad_out * m,
                None => grad_out.clone(),
            };
            Ok((vec![dx], vec![]))
        }
        (LayerSpec::BatchNorm { .. }, LayerCache::BatchNorm { xhat, inv_std, batch_stats }) => {
            let g = as2(grad_out, "batchnorm backward")?;
            let w = weights(params, 2, "batchnorm")?;
            let gamma = w[0].view().into_dimensionality::<ndarray::Ix1>().map_err(|e| Error::Shape(e.to_string()))?;
            let dgamma = (&g * xhat).sum_axis(Axis(0));
            let dbeta = g.sum_axis(Axis(0));
            let dxhat = &g * &gamma;
            let dx = if batch_stats.is_some() {
                let n = g.nrows() as f64;
                let sum_dxhat = dxhat.sum_axis(Axis(0));
                let sum_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(0));
                ((&dxhat * n - &sum_dxhat - xhat * &sum_dxhat_xhat) * inv_std) / n
            } else {
                &dxhat * inv_std
            };
            Ok((vec![dx.into_dyn()], vec![dgamma.into_dyn(), dbeta.into_dyn()]))
        }
        (LayerSpec::L2Norm, LayerCache::L2Norm { output, norms }) => {
            let g = as2(grad_out, "l2norm backward")?;
            let mut dx = g.clone();
            for ((mut row, y), &n) in dx.axis_iter_mut(Axis(0)).zip(output.axis_iter(Axis(0))).zip(norms.iter()) {
                if n > L2_EPS {
                    let proj = y.dot(&row);
                    row.scaled_add(-proj, &y);
                    row /= n;
                } else {
                    row /= L2_EPS;
                }
            }
            Ok((vec![dx.into_dyn()], vec![]))
        }
        (LayerSpec::Flatten, LayerCache::Flatten { input_dim }) => {
            let dx = grad_out
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(input_dim))
                .map_err(|e| Error::Shape(e.to_string()))?;
            Ok((vec![dx], vec![]))
        }
        (LayerSpec::Concat, LayerCache::Concat { widths }) => {
            let g = as2(grad_out, "concat backward")?;
            let mut start = 0;
            let mut out = Vec::with_capacity(widths.len());
            for w in widths {
                out.push(g.slice(s![.., start..start + w]).to_owned().into_dyn());
                start += w;
            }
            Ok((out, vec![]))
        }
        _ => Err(mismatch()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, arr3};

    fn fwd(spec: LayerSpec, params: &LayerParams, x: &ArrayD<f64>, mode: Mode) -> (ArrayD<f64>, LayerCache) {
        layer_forward(&spec, params, &[x], mode, 1).unwrap()
    }

    #[test]
    fn relu_forward_and_backward() {
        let x = arr2(&[[-1.0, 2.0]]).into_dyn();
        let (y, cache) = fwd(LayerSpec::Relu, &LayerParams::empty(), &x, Mode::Eval);
        assert_eq!(y, arr2(&[[0.0, 2.0]]).into_dyn());
        let (dx, _) = layer_backward(&LayerSpec::Relu, &LayerParams::empty(), &cache, &arr2(&[[1.0, 1.0]]).into_dyn()).unwrap();
        assert_eq!(dx[0], arr2(&[[0.0, 1.0]]).into_dyn());
    }

    #[test]
    fn valid_conv_is_correlation() {
        let spec = LayerSpec::Conv1dTime {
            filters: 1,
            width: 2,
            padding: Padding::Valid,
        };
        let params = LayerParams {
            weights: vec![arr3(&[[[1.0, 1.0]]]).into_dyn(), arr1(&[0.0]).into_dyn()],
            state: vec![],
        };
        let x = arr3(&[[[1.0, 2.0, 3.0]]]).into_dyn();
        let (y, _) = fwd(spec, &params, &x, Mode::Eval);
        assert_eq!(y, arr3(&[[[3.0, 5.0]]]).into_dyn());
    }

    #[test]
    fn same_conv_pads_right_for_even_width() {
        let spec = LayerSpec::conv(1, 4);
        let params = LayerParams {
            weights: vec![arr3(&[[[1.0, 10.0, 100.0, 1000.0]]]).into_dyn(), arr1(&[0.0]).into_dyn()],
            state: vec![],
        };
        let x = arr3(&[[[1.0, 2.0, 3.0]]]).into_dyn();
        let (y, _) = fwd(spec, &params, &x, Mode::Eval);
        // pad (1 left, 2 right): windows [0,1,2,3], [1,2,3,0], [2,3,0,0]
        assert_eq!(y, arr3(&[[[3210.0, 321.0, 32.0]]]).into_dyn());
    }

    #[test]
    fn maxpool_windows() {
        let x = arr3(&[[[1.0, 3.0, 2.0, 0.0, 5.0, 1.0, 0.0, 0.0]]]).into_dyn();
        let (y, _) = fwd(LayerSpec::MaxPoolTime(Pool::Window(4)), &LayerParams::empty(), &x, Mode::Eval);
        assert_eq!(y, arr3(&[[[3.0, 5.0]]]).into_dyn());
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 1, 11]), |d| d[2] as f64);
        let (y, _) = fwd(LayerSpec::MaxPoolTime(Pool::Window(4)), &LayerParams::empty(), &x, Mode::Eval);
        assert_eq!(y.shape(), [1, 1, 2]);
    }

    #[test]
    fn adaptive_pool_to_four() {
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 1, 5]), |d| [4.0, 1.0, 7.0, 2.0, 9.0][d[2]]);
        let (y, _) = fwd(LayerSpec::MaxPoolTime(Pool::ToSteps(4)), &LayerParams::empty(), &x, Mode::Eval);
        // windows [0,2) [1,3) [2,4) [3,5)
        assert_eq!(y, arr3(&[[[4.0, 7.0, 7.0, 9.0]]]).into_dyn());
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 1, 2]), |d| [1.0, 2.0][d[2]]);
        let (y, _) = fwd(LayerSpec::MaxPoolTime(Pool::ToSteps(4)), &LayerParams::empty(), &x, Mode::Eval);
        assert_eq!(y, arr3(&[[[1.0, 1.0, 2.0, 2.0]]]).into_dyn());
    }

    #[test]
    fn l2norm_three_four_five() {
        let x = arr2(&[[3.0, 4.0]]).into_dyn();
        let (y, _) = fwd(LayerSpec::L2Norm, &LayerParams::empty(), &x, Mode::Eval);
        assert!((y[[0, 0]] - 0.6).abs() < 1e-15 && (y[[0, 1]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_train_normalizes_batch() {
        let spec = LayerSpec::BatchNorm {
            momentum: 0.9,
            eps: 1e-12,
        };
        let params = LayerParams::init(&spec, Shape::Vector(1), 0);
        let x = arr2(&[[1.0], [3.0]]).into_dyn();
        let (y, cache) = fwd(spec, &params, &x, Mode::Train);
        assert!((y[[0, 0]] + 1.0).abs() < 1e-9 && (y[[1, 0]] - 1.0).abs() < 1e-9);
        match cache {
            LayerCache::BatchNorm {
                batch_stats: Some((m, v)),
                ..
            } => {
                assert_eq!(m[0], 2.0);
                assert_eq!(v[0], 1.0);
            }
            other => panic!("unexpected cache {other:?}"),
        }
        // eval mode uses running stats (0, 1)
        let (y, _) = fwd(spec, &params, &x, Mode::Eval);
        assert!((y[[1, 0]] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn dense_backward_is_outer_product() {
        let spec = LayerSpec::dense(1);
        let params = LayerParams {
            weights: vec![arr2(&[[0.5, -0.25]]).into_dyn(), arr1(&[0.1]).into_dyn()],
            state: vec![],
        };
        let x = arr2(&[[1.0, 2.0]]).into_dyn();
        let (y, cache) = fwd(spec, &params, &x, Mode::Eval);
        assert!((y[[0, 0]] - 0.1).abs() < 1e-15);
        let (dx, dp) = layer_backward(&spec, &params, &cache, &arr2(&[[1.0]]).into_dyn()).unwrap();
        assert_eq!(dp[0], arr2(&[[1.0, 2.0]]).into_dyn());
        assert_eq!(dp[1], arr1(&[1.0]).into_dyn());
        assert_eq!(dx[0], arr2(&[[0.5, -0.25]]).into_dyn());
    }

    #[test]
    fn dropout_train_and_eval() {
        let spec = LayerSpec::dropout(0.5);
        let x = ArrayD::from_elem(IxDyn(&[4, 50]), 1.0);
        let (y, _) = fwd(spec, &LayerParams::empty(), &x, Mode::Eval);
        assert_eq!(y, x);
        let (a, _) = fwd(spec, &LayerParams::empty(), &x, Mode::Train);
        let (b, _) = fwd(spec, &LayerParams::empty(), &x, Mode::Train);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| *v == 0.0 || *v == 2.0));
        let kept = a.iter().filter(|v| **v > 0.0).count();
        assert!(kept > 50 && kept < 150);
    }

    #[test]
    fn shape_errors() {
        let x = arr2(&[[1.0, 2.0]]).into_dyn();
        assert!(layer_forward(&LayerSpec::conv(2, 2), &LayerParams::empty(), &[&x], Mode::Eval, 0).is_err());
        let params = LayerParams::init(&LayerSpec::dense(3), Shape::Vector(5), 0);
        assert!(layer_forward(&LayerSpec::dense(3), &params, &[&x], Mode::Eval, 0).is_err());
        let nan = arr2(&[[f64::NAN]]).into_dyn();
        assert!(matches!(
            layer_forward(&LayerSpec::Relu, &LayerParams::empty(), &[&nan], Mode::Eval, 0),
            Err(Error::NonFinite(_))
        ));
        assert!(LayerSpec::dropout(1.0).output_shape(&[Shape::Vector(2)]).is_err());
        assert!(LayerSpec::MaxPoolTime(Pool::Window(4))
            .output_shape(&[Shape::Series { channels: 1, steps: 3 }])
            .is_err());
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let cache = LayerCache::Dropout { mask: None };
        let g = arr2(&[[1.0]]).into_dyn();
        assert!(layer_backward(&LayerSpec::Relu, &LayerParams::empty(), &cache, &g).is_err());
    }
}
