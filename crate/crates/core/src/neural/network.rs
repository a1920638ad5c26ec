use ndarray::ArrayD;

use super::layer::{layer_backward, layer_forward, LayerCache, LayerParams, LayerSpec, Mode, Shape};
use crate::error::{Error, Result};
use crate::seed;

/// One input branch: its per-sample input shape and a layer chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub name: String,
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Input(usize),
    Layer(usize),
}

/// Branches feeding a shared trunk. Layers are numbered globally: the
/// layers of branch 0, then branch 1 and so on, then the trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    branches: Vec<Branch>,
    layers: Vec<LayerSpec>,
    sources: Vec<Vec<Source>>,
    out_shapes: Vec<Shape>,
    trunk_start: usize,
    tap: Option<usize>,
}

impl NetworkSpec {
    pub fn sequential(input: Shape, layers: Vec<LayerSpec>) -> Result<Self> {
        Self::branched(
            vec![Branch {
                name: "input".into(),
                input,
                layers,
            }],
            vec![],
        )
    }

    /// With several branches the trunk must open with `Concat`.
    pub fn branched(branches: Vec<Branch>, trunk: Vec<LayerSpec>) -> Result<Self> {
        if branches.is_empty() {
            return Err(Error::InvalidInput("network needs at least one branch".into()));
        }
        if branches.len() > 1 && !matches!(trunk.first(), Some(LayerSpec::Concat)) {
            return Err(Error::InvalidInput("a multi-branch trunk must start with concat".into()));
        }
        let mut layers = Vec::new();
        let mut sources = Vec::new();
        let mut out_shapes: Vec<Shape> = Vec::new();
        let mut ends = Vec::new();
        for (b, branch) in branches.iter().enumerate() {
            let mut prev = (Source::Input(b), branch.input);
            for spec in &branch.layers {
                if matches!(spec, LayerSpec::Concat) {
                    return Err(Error::InvalidInput("concat is only allowed at the head of the trunk".into()));
                }
                let out = spec.output_shape(&[prev.1])?;
                sources.push(vec![prev.0]);
                layers.push(*spec);
                out_shapes.push(out);
                prev = (Source::Layer(layers.len() - 1), out);
            }
            ends.push(prev);
        }
        let trunk_start = layers.len();
        for (i, spec) in trunk.iter().enumerate() {
            let inputs: Vec<(Source, Shape)> = if i == 0 {
                ends.clone()
            } else {
                vec![(Source::Layer(layers.len() - 1), out_shapes[layers.len() - 1])]
            };
            if i > 0 && matches!(spec, LayerSpec::Concat) {
                return Err(Error::InvalidInput("concat is only allowed at the head of the trunk".into()));
            }
            let shapes: Vec<Shape> = inputs.iter().map(|p| p.1).collect();
            let out = spec.output_shape(&shapes)?;
            sources.push(inputs.iter().map(|p| p.0).collect());
            layers.push(*spec);
            out_shapes.push(out);
        }
        if layers.is_empty() {
            return Err(Error::InvalidInput("network has no layers".into()));
        }
        if branches.len() > 1 && trunk.is_empty() {
            return Err(Error::InvalidInput("multi-branch network needs a trunk".into()));
        }
        Ok(Self {
            branches,
            layers,
            sources,
            out_shapes,
            trunk_start,
            tap: None,
        })
    }

    /// Marks the layer whose output serves as the learned embedding.
    pub fn with_tap(mut self, layer: usize) -> Result<Self> {
        if layer >= self.layers.len() {
            return Err(Error::InvalidInput(format!(
                "tap layer {layer} out of range for {} layers",
                self.layers.len()
            )));
        }
        if !matches!(self.out_shapes[layer], Shape::Vector(_)) {
            return Err(Error::InvalidInput("embedding tap must produce a vector".into()));
        }
        self.tap = Some(layer);
        Ok(self)
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn trunk_start(&self) -> usize {
        self.trunk_start
    }

    pub fn tap(&self) -> Option<usize> {
        self.tap
    }

    pub fn output_shape(&self) -> Shape {
        *self.out_shapes.last().expect("non-empty")
    }

    pub fn layer_output_shape(&self, layer: usize) -> Shape {
        self.out_shapes[layer]
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.tap.map(|t| self.out_shapes[t].size())
    }

    fn input_shapes(&self, layer: usize) -> Vec<Shape> {
        self.sources[layer]
            .iter()
            .map(|s| match *s {
                Source::Input(b) => self.branches[b].input,
                Source::Layer(l) => self.out_shapes[l],
            })
            .collect()
    }
}

/// Parameters for every layer of a network, indexed like its layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
}

/// Gradients mirroring `ParamSet::layers[i].weights`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Vec<ArrayD<f64>>>,
}

impl ParamGrads {
    pub fn scale(&mut self, factor: f64) {
        for t in self.layers.iter_mut().flatten() {
            t.mapv_inplace(|v| v * factor);
        }
    }
}

impl ParamSet {
    pub fn init(net: &NetworkSpec, seed_: u64) -> Self {
        let layers = net
            .layers
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let input = net.input_shapes(i)[0];
                LayerParams::init(spec, input, seed::mix(seed_, i as u64))
            })
            .collect();
        Self { layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flat_map(|l| l.weights.iter()).map(|t| t.len()).sum()
    }

    /// Folds train-mode batch statistics into the batchnorm running
    /// averages: `running = m * running + (1 - m) * batch`.
    pub fn update_running_stats(&mut self, net: &NetworkSpec, out: &NetOutput) {
        for (i, (spec, cache)) in net.layers.iter().zip(&out.caches).enumerate() {
            if let (
                LayerSpec::BatchNorm { momentum, .. },
                LayerCache::BatchNorm {
                    batch_stats: Some((mean, var)),
                    ..
                },
            ) = (spec, cache)
            {
                let state = &mut self.layers[i].state;
                for (s, batch) in state.iter_mut().zip([mean, var]) {
                    s.zip_mut_with(&batch.view().into_dyn(), |r, &b| *r = momentum * *r + (1.0 - momentum) * b);
                }
            }
        }
    }

    pub fn zeros_like_grads(&self) -> ParamGrads {
        ParamGrads {
            layers: self
                .layers
                .iter()
                .map(|l| l.weights.iter().map(|w| ArrayD::zeros(w.raw_dim())).collect())
                .collect(),
        }
    }
}

pub struct NetOutput {
    pub output: ArrayD<f64>,
    /// Output of the tap layer, when the network has one.
    pub embedding: Option<ArrayD<f64>>,
    pub caches: Vec<LayerCache>,
}

/// Forward pass over a batch; one input array per branch.
pub fn net_forward(
    net: &NetworkSpec,
    params: &ParamSet,
    inputs: &[ArrayD<f64>],
    mode: Mode,
    seed_: u64,
) -> Result<NetOutput> {
    if inputs.len() != net.branches.len() {
        return Err(Error::Shape(format!(
            "network has {} branches, got {} inputs",
            net.branches.len(),
            inputs.len()
        )));
    }
    if params.layers.len() != net.layers.len() {
        return Err(Error::Shape("parameter set does not match network".into()));
    }
    let batch = inputs[0].shape().first().copied().unwrap_or(0);
    for (x, branch) in inputs.iter().zip(&net.branches) {
        if x.shape() != branch.input.with_batch(batch).as_slice() {
            return Err(Error::Shape(format!(
                "branch `{}` expects {:?} per sample, got batch shape {:?}",
                branch.name,
                branch.input,
                x.shape()
            )));
        }
    }
    let mut outs: Vec<ArrayD<f64>> = Vec::with_capacity(net.layers.len());
    let mut caches = Vec::with_capacity(net.layers.len());
    for (i, spec) in net.layers.iter().enumerate() {
        let xs: Vec<&ArrayD<f64>> = net.sources[i]
            .iter()
            .map(|s| match *s {
                Source::Input(b) => &inputs[b],
                Source::Layer(l) => &outs[l],
            })
            .collect();
        let (y, cache) = layer_forward(spec, &params.layers[i], &xs, mode, seed::mix(seed_, i as u64))
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("layer {i}: {m}")),
                other => other,
            })?;
        outs.push(y);
        caches.push(cache);
    }
    let embedding = net.tap.map(|t| outs[t].clone());
    let output = outs.pop().expect("non-empty");
    Ok(NetOutput {
        output,
        embedding,
        caches,
    })
}

/// Backpropagates `grad_out` through the cached forward pass. Returns the
/// parameter gradients and one input gradient per branch.
pub fn net_backward(
    net: &NetworkSpec,
    params: &ParamSet,
    out: &NetOutput,
    grad_out: &ArrayD<f64>,
) -> Result<(ParamGrads, Vec<ArrayD<f64>>)> {
    let n = net.layers.len();
    if out.caches.len() != n {
        return Err(Error::Shape("forward caches do not match network".into()));
    }
    if grad_out.shape() != out.output.shape() {
        return Err(Error::Shape(format!(
            "output gradient {:?} does not match output {:?}",
            grad_out.shape(),
            out.output.shape()
        )));
    }
    let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; n];
    grads[n - 1] = Some(grad_out.clone());
    let mut input_grads: Vec<Option<ArrayD<f64>>> = vec![None; net.branches.len()];
    let mut param_grads = vec![Vec::new(); n];
    for i in (0..n).rev() {
        let Some(g) = grads[i].take() else {
            param_grads[i] = params.layers[i].weights.iter().map(|w| ArrayD::zeros(w.raw_dim())).collect();
            continue;
        };
        let (dxs, dps) = layer_backward(&net.layers[i], &params.layers[i], &out.caches[i], &g)?;
        param_grads[i] = dps;
        for (src, dx) in net.sources[i].iter().zip(dxs) {
            let slot = match *src {
                Source::Input(b) => &mut input_grads[b],
                Source::Layer(l) => &mut grads[l],
            };
            match slot {
                Some(acc) => *acc += &dx,
                None => *slot = Some(dx),
            }
        }
    }
    let batch = grad_out.shape()[0];
    let input_grads = input_grads
        .into_iter()
        .zip(&net.branches)
        .map(|(g, b)| g.unwrap_or_else(|| ArrayD::zeros(ndarray::IxDyn(&b.input.with_batch(batch)))))
        .collect();
    Ok((ParamGrads { layers: param_grads }, input_grads))
}
