//! Architecture builders, the mapping-network training loop, embedding
//! extraction and factor prediction.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayD, ArrayView2, Axis, Ix2};
use rand::seq::SliceRandom;

use crate::audio::{sample_patch, Spectrogram};
use crate::container::{load_labeled, load_matrix, save_labeled, save_matrix, section, Section};
use crate::error::{Error, Result};
use crate::neural::{
    batch_cosine_loss, net_backward, net_forward, AdamConfig, AdamState, Branch, LayerSpec, Mode, NetworkSpec,
    ParamSet, Pool, Shape,
};
use crate::seed;

pub const ARTIST_HIDDEN: usize = 2048;
pub const TRACK_FILTERS: [usize; 4] = [256, 512, 1024, 1024];
pub const FUSION_HIDDEN: usize = 512;
pub const FUSION_DROPOUT: f64 = 0.7;
/// Time steps left by the final track-net pool.
pub const TRACK_POOLED_STEPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArtistNetOptions {
    pub hidden: usize,
    /// Zero disables dropout.
    pub dropout: f64,
}

impl Default for ArtistNetOptions {
    fn default() -> Self {
        Self {
            hidden: ARTIST_HIDDEN,
            dropout: 0.0,
        }
    }
}

/// Two relu hidden layers, a linear `k` head and l2 normalization. The
/// embedding tap is the second hidden layer.
pub fn build_artist_net(vocab_size: usize, k: usize) -> Result<NetworkSpec> {
    build_artist_net_with(vocab_size, k, &ArtistNetOptions::default())
}

pub fn build_artist_net_with(vocab_size: usize, k: usize, opts: &ArtistNetOptions) -> Result<NetworkSpec> {
    if vocab_size == 0 {
        return Err(Error::InvalidInput("artist net needs a non-empty vocabulary".into()));
    }
    let mut layers = Vec::new();
    let mut tap = 0;
    for _ in 0..2 {
        layers.push(LayerSpec::dense(opts.hidden));
        layers.push(LayerSpec::Relu);
        tap = layers.len() - 1;
        if opts.dropout > 0.0 {
            layers.push(LayerSpec::dropout(opts.dropout));
        }
    }
    layers.push(LayerSpec::dense(k));
    layers.push(LayerSpec::L2Norm);
    NetworkSpec::sequential(Shape::Vector(vocab_size), layers)?.with_tap(tap)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackNetOptions {
    pub width: usize,
    pub dropout: f64,
}

impl Default for TrackNetOptions {
    fn default() -> Self {
        Self {
            width: 4,
            dropout: 0.5,
        }
    }
}

/// Filter counts `ceil(scale * [256, 512, 1024, 1024])`.
pub fn track_filters(scale: f64) -> Result<[usize; 4]> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::InvalidInput(format!("channel scale {scale} outside (0, 1]")));
    }
    Ok(TRACK_FILTERS.map(|f| (scale * f as f64).ceil() as usize))
}

/// Four time convolutions over `bins` input channels, each followed by relu
/// and dropout; pool 4 after the first three, then pool down to 4 steps,
/// flatten (the embedding tap), a linear `k` head and l2 normalization.
pub fn build_track_net(bins: usize, frames: usize, k: usize, scale: f64) -> Result<NetworkSpec> {
    build_track_net_with(bins, frames, k, scale, &TrackNetOptions::default())
}

pub fn build_track_net_with(
    bins: usize,
    frames: usize,
    k: usize,
    scale: f64,
    opts: &TrackNetOptions,
) -> Result<NetworkSpec> {
    if bins == 0 || frames == 0 {
        return Err(Error::InvalidInput("track net needs at least one bin and frame".into()));
    }
    if frames < 64 {
        return Err(Error::InvalidInput(format!(
            "patch of {frames} frames is too short for the pooling pyramid (need 64)"
        )));
    }
    let filters = track_filters(scale)?;
    let mut layers = Vec::new();
    for (i, &f) in filters.iter().enumerate() {
        layers.push(LayerSpec::conv(f, opts.width));
        layers.push(LayerSpec::Relu);
        if opts.dropout > 0.0 {
            layers.push(LayerSpec::dropout(opts.dropout));
        }
        if i < 3 {
            layers.push(LayerSpec::MaxPoolTime(Pool::Window(4)));
        }
    }
    layers.push(LayerSpec::MaxPoolTime(Pool::ToSteps(TRACK_POOLED_STEPS)));
    layers.push(LayerSpec::Flatten);
    let tap = layers.len() - 1;
    layers.push(LayerSpec::dense(k));
    layers.push(LayerSpec::L2Norm);
    NetworkSpec::sequential(Shape::Series { channels: bins, steps: frames }, layers)?.with_tap(tap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionVariant {
    Lin,
    H1,
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionVariant::Lin => "lin",
            FusionVariant::H1 => "h1",
        })
    }
}

impl FromStr for FusionVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lin" => Ok(FusionVariant::Lin),
            "h1" => Ok(FusionVariant::H1),
            other => Err(Error::InvalidInput(format!("unknown fusion variant `{other}` (expected lin or h1)"))),
        }
    }
}

/// Two-branch late fusion of an artist embedding and a track embedding.
/// The embedding tap is the concatenation.
pub fn build_fusion_net(variant: FusionVariant, dim_a: usize, dim_t: usize, k: usize) -> Result<NetworkSpec> {
    if dim_a == 0 || dim_t == 0 {
        return Err(Error::InvalidInput("fusion branches need positive dimensions".into()));
    }
    let branch_layers = match variant {
        FusionVariant::Lin => vec![LayerSpec::L2Norm, LayerSpec::dropout(FUSION_DROPOUT)],
        FusionVariant::H1 => vec![
            LayerSpec::batchnorm(),
            LayerSpec::dropout(FUSION_DROPOUT),
            LayerSpec::dense(FUSION_HIDDEN),
            LayerSpec::Relu,
        ],
    };
    let branches = vec![
        Branch {
            name: "artist".into(),
            input: Shape::Vector(dim_a),
            layers: branch_layers.clone(),
        },
        Branch {
            name: "track".into(),
            input: Shape::Vector(dim_t),
            layers: branch_layers,
        },
    ];
    let net = NetworkSpec::branched(branches, vec![LayerSpec::Concat, LayerSpec::dense(k), LayerSpec::L2Norm])?;
    let tap = net.trunk_start();
    net.with_tap(tap)
}

/// Single-modality mapping from a precomputed embedding to factors, with the
/// same normalization and dropout as the linear fusion branch.
pub fn build_embedding_net(dim: usize, k: usize) -> Result<NetworkSpec> {
    if dim == 0 {
        return Err(Error::InvalidInput("embedding net needs a positive input dimension".into()));
    }
    NetworkSpec::sequential(
        Shape::Vector(dim),
        vec![
            LayerSpec::L2Norm,
            LayerSpec::dropout(FUSION_DROPOUT),
            LayerSpec::dense(k),
            LayerSpec::L2Norm,
        ],
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidInput("batch, patience and max_epochs must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::InvalidInput("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Supplies network inputs (one array per branch) for a set of rows.
pub trait FeatureSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `epoch` is `Some` during training, letting sources vary the sample
    /// per epoch, and `None` for evaluation.
    fn batch(&self, rows: &[usize], epoch: Option<usize>) -> Result<Vec<ArrayD<f64>>>;
}

/// Row-aligned dense feature matrices, one per branch.
pub struct DenseFeatures<'a> {
    branches: Vec<ArrayView2<'a, f64>>,
}

impl<'a> DenseFeatures<'a> {
    pub fn new(branches: Vec<ArrayView2<'a, f64>>) -> Result<Self> {
        let Some(first) = branches.first() else {
            return Err(Error::InvalidInput("no feature matrices".into()));
        };
        if branches.iter().any(|b| b.nrows() != first.nrows()) {
            return Err(Error::Shape("feature matrices disagree on row count".into()));
        }
        Ok(Self { branches })
    }

    pub fn single(m: ArrayView2<'a, f64>) -> Self {
        Self { branches: vec![m] }
    }
}

impl FeatureSource for DenseFeatures<'_> {
    fn len(&self) -> usize {
        self.branches[0].nrows()
    }

    fn batch(&self, rows: &[usize], _epoch: Option<usize>) -> Result<Vec<ArrayD<f64>>> {
        Ok(self.branches.iter().map(|b| b.select(Axis(0), rows).into_dyn()).collect())
    }
}

/// Fixed-length spectrogram patches. Training epochs draw fresh patch
/// offsets; evaluation always uses the same one.
pub struct PatchFeatures<'a> {
    tracks: &'a [Spectrogram],
    ids: &'a [String],
    length: usize,
    seed: u64,
}

impl<'a> PatchFeatures<'a> {
    pub fn new(tracks: &'a [Spectrogram], ids: &'a [String], length: usize, seed_: u64) -> Result<Self> {
        if tracks.len() != ids.len() {
            return Err(Error::Shape("spectrogram and id lists differ in length".into()));
        }
        if let Some(t) = tracks.first() {
            if tracks.iter().any(|s| s.bins() != t.bins()) {
                return Err(Error::Shape("spectrograms disagree on bin count".into()));
            }
        }
        Ok(Self {
            tracks,
            ids,
            length,
            seed: seed_,
        })
    }
}

impl FeatureSource for PatchFeatures<'_> {
    fn len(&self) -> usize {
        self.tracks.len()
    }

    fn batch(&self, rows: &[usize], epoch: Option<usize>) -> Result<Vec<ArrayD<f64>>> {
        let bins = self.tracks.first().map_or(0, |t| t.bins());
        let draw_seed = match epoch {
            Some(e) => seed::mix(self.seed, e as u64 + 1),
            None => self.seed,
        };
        let mut out = Array3::<f64>::zeros((rows.len(), bins, self.length));
        for (i, &r) in rows.iter().enumerate() {
            let p = sample_patch(&self.tracks[r], self.length, &self.ids[r], draw_seed)?;
            out.slice_mut(s![i, .., ..]).assign(&p.data.mapv(f64::from));
        }
        Ok(vec![out.into_dyn()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best epoch.
    pub params: ParamSet,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub steps: usize,
}

impl TrainOutcome {
    /// `epoch<TAB>train_loss<TAB>val_loss`, with `-` when there is no
    /// validation set.
    pub fn log_tsv(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tval_loss\n");
        for e in &self.log {
            let val = e.val_loss.map_or_else(|| "-".to_string(), |v| format!("{v:.9}"));
            s.push_str(&format!("{}\t{:.9}\t{}\n", e.epoch, e.train_loss, val));
        }
        s
    }
}

fn nonzero_target_rows(targets: ArrayView2<f64>) -> Vec<usize> {
    targets
        .axis_iter(Axis(0))
        .enumerate()
        .filter(|(_, r)| r.iter().any(|v| *v != 0.0))
        .map(|(i, _)| i)
        .collect()
}

fn to2(x: ArrayD<f64>) -> Result<Array2<f64>> {
    x.into_dimensionality::<Ix2>().map_err(|e| Error::Shape(e.to_string()))
}

/// Mean cosine loss in eval mode over rows with nonzero targets.
pub fn evaluate_loss(
    net: &NetworkSpec,
    params: &ParamSet,
    features: &dyn FeatureSource,
    targets: ArrayView2<f64>,
) -> Result<f64> {
    let rows = nonzero_target_rows(targets);
    if rows.is_empty() {
        return Err(Error::Degenerate("no rows with nonzero targets".into()));
    }
    let mut total = 0.0;
    for chunk in rows.chunks(256) {
        let out = net_forward(net, params, &features.batch(chunk, None)?, Mode::Eval, 0)?;
        let (l, _) = batch_cosine_loss(to2(out.output)?.view(), targets.select(Axis(0), chunk).view())?;
        total += l * chunk.len() as f64;
    }
    Ok(total / rows.len() as f64)
}

/// Fits `net` to map features onto factor targets under the cosine loss.
///
/// Rows whose target is all zero (items without training feedback) are
/// skipped. Selection uses the validation loss when a validation set is
/// given and the training loss otherwise.
pub fn train_mapping(
    net: &NetworkSpec,
    train: &dyn FeatureSource,
    targets: ArrayView2<f64>,
    val: Option<(&dyn FeatureSource, ArrayView2<f64>)>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let k = net.output_shape().size();
    if train.len() != targets.nrows() {
        return Err(Error::Shape(format!(
            "{} feature rows but {} target rows",
            train.len(),
            targets.nrows()
        )));
    }
    if targets.ncols() != k {
        return Err(Error::Shape(format!("targets have {} columns, network outputs {k}", targets.ncols())));
    }
    if let Some((vf, vt)) = &val {
        if vf.len() != vt.nrows() || vt.ncols() != k {
            return Err(Error::Shape("validation features and targets are misaligned".into()));
        }
    }
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training targets contain non-finite values".into()));
    }
    let mut rows = nonzero_target_rows(targets);
    if rows.is_empty() {
        return Err(Error::Degenerate("no training rows with nonzero targets".into()));
    }
    let val = val.filter(|(_, vt)| !nonzero_target_rows(*vt).is_empty());

    let mut params = ParamSet::init(net, seed::named(cfg.seed, "init"));
    let mut adam = AdamState::new(&params, cfg.adam);
    let mut rng = seed::rng(seed::named(cfg.seed, "shuffle"));
    let mut log = Vec::new();
    let mut best: Option<(f64, ParamSet, usize)> = None;
    let mut stale = 0;
    let mut steps = 0;
    for epoch in 1..=cfg.max_epochs {
        rows.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in rows.chunks(cfg.batch).enumerate() {
            let inputs = train.batch(chunk, Some(epoch))?;
            let diverged = |what: &str| Error::NonFinite(format!("{what} at epoch {epoch}, batch {b}"));
            let out = net_forward(net, &params, &inputs, Mode::Train, seed::mix(cfg.seed, steps as u64))
                .map_err(|e| match e {
                    Error::NonFinite(m) => diverged(&m),
                    other => other,
                })?;
            let (loss, grad) =
                batch_cosine_loss(to2(out.output.clone())?.view(), targets.select(Axis(0), chunk).view())?;
            if !loss.is_finite() {
                return Err(diverged("loss is not finite"));
            }
            let (grads, _) = net_backward(net, &params, &out, &grad.into_dyn())?;
            adam.step(&mut params, &grads)?;
            params.update_running_stats(net, &out);
            total += loss * chunk.len() as f64;
            steps += 1;
        }
        let train_loss = total / rows.len() as f64;
        let val_loss = match &val {
            Some((vf, vt)) => Some(evaluate_loss(net, &params, *vf, *vt)?),
            None => None,
        };
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        let score = val_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            best = Some((score, params.clone(), epoch));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (_, params, best_epoch) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params,
        log,
        best_epoch,
        steps,
    })
}

/// Eval-mode forward over all rows: the network output and, when the net
/// has a tap, the embedding.
pub fn predict(
    net: &NetworkSpec,
    params: &ParamSet,
    features: &dyn FeatureSource,
) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
    let n = features.len();
    let mut out = Array2::zeros((n, net.output_shape().size()));
    let mut emb = net.embedding_dim().map(|d| Array2::zeros((n, d)));
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(128) {
        let r = net_forward(net, params, &features.batch(chunk, None)?, Mode::Eval, 0)?;
        let range = chunk[0]..chunk[0] + chunk.len();
        out.slice_mut(s![range.clone(), ..]).assign(&to2(r.output)?);
        if let (Some(e), Some(x)) = (emb.as_mut(), r.embedding) {
            e.slice_mut(s![range, ..]).assign(&to2(x)?);
        }
    }
    Ok((out, emb))
}

/// Unit-norm factor predictions, one row per feature row.
pub fn predict_factors(net: &NetworkSpec, params: &ParamSet, features: &dyn FeatureSource) -> Result<Array2<f64>> {
    Ok(predict(net, params, features)?.0)
}

/// Penultimate activations keyed by item or artist id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    pub data: Array2<f64>,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<String>, data: Array2<f64>) -> Result<Self> {
        if ids.len() != data.nrows() {
            return Err(Error::Shape(format!("{} ids for {} rows", ids.len(), data.nrows())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding contains non-finite values".into()));
        }
        Ok(Self { ids, data })
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_labeled(path, "embedding", &self.ids, &self.data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (ids, data) = load_labeled(path, "embedding")?;
        Self::new(ids, data)
    }

    /// Rows reordered to follow `ids`.
    pub fn rows_for(&self, ids: &[String]) -> Result<Array2<f64>> {
        let index: std::collections::HashMap<&str, usize> =
            self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let rows = ids
            .iter()
            .map(|id| index.get(id.as_str()).copied().ok_or_else(|| Error::InvalidInput(format!("no embedding for `{id}`"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.data.select(Axis(0), &rows))
    }
}

pub fn extract_embeddings(
    net: &NetworkSpec,
    params: &ParamSet,
    features: &dyn FeatureSource,
    ids: Vec<String>,
) -> Result<EmbeddingSet> {
    if net.tap().is_none() {
        return Err(Error::InvalidInput("network has no embedding tap".into()));
    }
    let (_, emb) = predict(net, params, features)?;
    EmbeddingSet::new(ids, emb.expect("tap present"))
}

fn flatten2(t: &ArrayD<f64>) -> Array2<f64> {
    let rows = t.shape().first().copied().unwrap_or(1);
    let cols = t.len().checked_div(rows).unwrap_or(0);
    t.as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, cols))
        .expect("row-major reshape")
}

/// Writes every tensor as its own section, `l<i>.w<j>` for trainable tensors
/// and `l<i>.s<j>` for running statistics.
pub fn save_params(path: impl AsRef<Path>, params: &ParamSet) -> Result<()> {
    let mut sections = Vec::new();
    for (i, l) in params.layers.iter().enumerate() {
        for (j, w) in l.weights.iter().enumerate() {
            sections.push(Section::f64(format!("l{i}.w{j}"), flatten2(w)));
        }
        for (j, w) in l.state.iter().enumerate() {
            sections.push(Section::f64(format!("l{i}.s{j}"), flatten2(w)));
        }
    }
    save_matrix(path, &sections)
}

/// Loads parameters saved by `save_params`, checking them against `net`.
pub fn load_params(path: impl AsRef<Path>, net: &NetworkSpec) -> Result<ParamSet> {
    let sections = load_matrix(path.as_ref())?;
    let mut params = ParamSet::init(net, 0);
    let mut used = 0;
    for (i, l) in params.layers.iter_mut().enumerate() {
        for (kind, tensors) in [("w", &mut l.weights), ("s", &mut l.state)] {
            for (j, t) in tensors.iter_mut().enumerate() {
                let m = section(&sections, &format!("l{i}.{kind}{j}"))?;
                if m.len() != t.len() || m.nrows() != t.shape()[0] {
                    return Err(Error::Shape(format!(
                        "{}: tensor l{i}.{kind}{j} does not fit the network",
                        path.as_ref().display()
                    )));
                }
                *t = m.into_shape_with_order(t.raw_dim()).map_err(|e| Error::Shape(e.to_string()))?;
                used += 1;
            }
        }
    }
    if used != sections.len() {
        return Err(Error::Shape(format!(
            "{}: file has {} tensors, network expects {used}",
            path.as_ref().display(),
            sections.len()
        )));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::synth_spectrogram;
    use rand::Rng;

    #[test]
    fn artist_net_dimensions() {
        let net = build_artist_net(10000, 200).unwrap();
        assert_eq!(net.embedding_dim(), Some(2048));
        assert_eq!(net.output_shape(), Shape::Vector(200));
        let small = build_artist_net(5, 2).unwrap();
        let p = ParamSet::init(&small, 0);
        assert_eq!(p.layers[0].weights[0].shape(), [2048, 5]);
        assert_eq!(p.layers[2].weights[0].shape(), [2048, 2048]);
        assert_eq!(p.layers[4].weights[0].shape(), [2, 2048]);
        assert!(build_artist_net(0, 2).is_err());
        let dropped = build_artist_net_with(5, 2, &ArtistNetOptions { hidden: 8, dropout: 0.2 }).unwrap();
        assert_eq!(dropped.embedding_dim(), Some(8));
        assert!(matches!(dropped.layers()[dropped.tap().unwrap()], LayerSpec::Relu));
    }

    #[test]
    fn track_net_dimensions() {
        let net = build_track_net(96, 323, 200, 1.0).unwrap();
        assert_eq!(net.embedding_dim(), Some(4096));
        let net = build_track_net(96, 323, 200, 0.125).unwrap();
        assert_eq!(track_filters(0.125).unwrap(), [32, 64, 128, 128]);
        assert_eq!(net.embedding_dim(), Some(512));
        assert!(build_track_net(96, 64, 10, 0.125).is_ok());
        assert!(build_track_net(96, 63, 10, 0.125).is_err());
        assert!(build_track_net(96, 323, 10, 0.0).is_err());
        assert!(build_track_net(96, 323, 10, 1.5).is_err());
    }

    #[test]
    fn fusion_dimensions() {
        let lin = build_fusion_net(FusionVariant::Lin, 2048, 4096, 200).unwrap();
        assert_eq!(lin.embedding_dim(), Some(6144));
        assert_eq!(lin.output_shape(), Shape::Vector(200));
        let h1 = build_fusion_net(FusionVariant::H1, 7, 13, 5).unwrap();
        assert_eq!(h1.embedding_dim(), Some(1024));
        assert!("h2".parse::<FusionVariant>().is_err());
        assert_eq!("lin".parse::<FusionVariant>().unwrap(), FusionVariant::Lin);
    }

    fn unit_rows(n: usize, d: usize, seed_: u64) -> Array2<f64> {
        let mut rng = seed::rng(seed_);
        let mut m: Array2<f64> = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0));
        for mut r in m.axis_iter_mut(Axis(0)) {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        m
    }

    fn linear_net(d: usize) -> NetworkSpec {
        NetworkSpec::sequential(Shape::Vector(d), vec![LayerSpec::dense(d), LayerSpec::L2Norm]).unwrap()
    }

    #[test]
    fn two_steps_per_epoch_for_64_items() {
        let x = unit_rows(64, 4, 1);
        let net = linear_net(4);
        let cfg = TrainConfig {
            max_epochs: 1,
            ..TrainConfig::default()
        };
        let out = train_mapping(&net, &DenseFeatures::single(x.view()), x.view(), None, &cfg).unwrap();
        assert_eq!(out.steps, 2);
        assert_eq!(out.log.len(), 1);
    }

    #[test]
    fn learns_identity_and_is_deterministic() {
        let x = unit_rows(64, 4, 2);
        let net = linear_net(4);
        let cfg = TrainConfig {
            max_epochs: 200,
            patience: 200,
            adam: AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let f = DenseFeatures::single(x.view());
        let a = train_mapping(&net, &f, x.view(), None, &cfg).unwrap();
        let last = a.log.last().unwrap().train_loss;
        assert!(last <= -0.99, "{last}");
        let b = train_mapping(&net, &f, x.view(), None, &cfg).unwrap();
        assert_eq!(a.params, b.params);

        let pred = predict_factors(&net, &a.params, &f).unwrap();
        for (p, t) in pred.axis_iter(Axis(0)).zip(x.axis_iter(Axis(0))) {
            assert!((p.dot(&p).sqrt() - 1.0).abs() < 1e-6);
            assert!(p.dot(&t) >= 0.99);
        }
    }

    #[test]
    fn best_epoch_has_lowest_validation_loss() {
        let x = unit_rows(40, 6, 3);
        let t = unit_rows(40, 3, 4);
        let net = NetworkSpec::sequential(
            Shape::Vector(6),
            vec![LayerSpec::dense(16), LayerSpec::Relu, LayerSpec::dense(3), LayerSpec::L2Norm],
        )
        .unwrap();
        let (tr, va) = (x.slice(s![..30, ..]), x.slice(s![30.., ..]));
        let (ttr, tva) = (t.slice(s![..30, ..]), t.slice(s![30.., ..]));
        let cfg = TrainConfig {
            batch: 8,
            max_epochs: 30,
            patience: 4,
            ..TrainConfig::default()
        };
        let vf = DenseFeatures::single(va);
        let out = train_mapping(&net, &DenseFeatures::single(tr), ttr, Some((&vf, tva)), &cfg).unwrap();
        let final_val = evaluate_loss(&net, &out.params, &vf, tva).unwrap();
        for e in &out.log {
            assert!(final_val <= e.val_loss.unwrap() + 1e-12);
        }
        assert!(out.log_tsv().starts_with("epoch\ttrain_loss\tval_loss\n"));
    }

    #[test]
    fn misaligned_and_zero_targets() {
        let x = unit_rows(10, 4, 5);
        let net = linear_net(4);
        let cfg = TrainConfig::default();
        let f = DenseFeatures::single(x.view());
        assert!(train_mapping(&net, &f, x.slice(s![..9, ..]), None, &cfg).is_err());
        let zeros = Array2::zeros((10, 4));
        assert!(matches!(train_mapping(&net, &f, zeros.view(), None, &cfg), Err(Error::Degenerate(_))));
    }

    #[test]
    fn zero_input_still_unit_norm() {
        let net = build_artist_net_with(5, 3, &ArtistNetOptions { hidden: 8, dropout: 0.0 }).unwrap();
        let mut params = ParamSet::init(&net, 1);
        params.layers[4].weights[1].fill(0.3);
        let z = Array2::zeros((2, 5));
        let p = predict_factors(&net, &params, &DenseFeatures::single(z.view())).unwrap();
        for r in p.axis_iter(Axis(0)) {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batched_prediction_matches_single_rows() {
        let net = build_fusion_net(FusionVariant::H1, 6, 5, 4).unwrap();
        let params = ParamSet::init(&net, 3);
        let a = unit_rows(7, 6, 6);
        let b = unit_rows(7, 5, 7);
        let f = DenseFeatures::new(vec![a.view(), b.view()]).unwrap();
        let all = predict_factors(&net, &params, &f).unwrap();
        for i in 0..7 {
            let fi = DenseFeatures::new(vec![a.slice(s![i..i + 1, ..]), b.slice(s![i..i + 1, ..])]).unwrap();
            let one = predict_factors(&net, &params, &fi).unwrap();
            for (x, y) in one.row(0).iter().zip(all.row(i).iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn patch_source_varies_by_epoch_only() {
        let tracks: Vec<Spectrogram> = (0..3).map(|i| synth_spectrogram(4, 200, &[1.0, 0.5], 1.0, i)).collect();
        let ids: Vec<String> = (0..3).map(|i| format!("t{i}")).collect();
        let src = PatchFeatures::new(&tracks, &ids, 64, 9).unwrap();
        let e1 = src.batch(&[0, 1, 2], Some(1)).unwrap();
        let e2 = src.batch(&[0, 1, 2], Some(2)).unwrap();
        assert_eq!(e1[0].shape(), [3, 4, 64]);
        assert_ne!(e1, e2);
        assert_eq!(src.batch(&[1], None).unwrap(), src.batch(&[1], None).unwrap());
    }

    #[test]
    fn params_and_embeddings_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let net = build_fusion_net(FusionVariant::H1, 3, 2, 4).unwrap();
        let params = ParamSet::init(&net, 8);
        let p = dir.path().join("fusion.csmx");
        save_params(&p, &params).unwrap();
        assert_eq!(load_params(&p, &net).unwrap(), params);
        let other = build_fusion_net(FusionVariant::Lin, 3, 2, 4).unwrap();
        assert!(load_params(&p, &other).is_err());

        let e = EmbeddingSet::new(vec!["a".into(), "b".into()], unit_rows(2, 3, 1)).unwrap();
        let ep = dir.path().join("emb.csmx");
        e.save(&ep).unwrap();
        let back = EmbeddingSet::load(&ep).unwrap();
        assert_eq!(back, e);
        assert_eq!(back.rows_for(&["b".into()]).unwrap().row(0), e.data.row(1));
        assert!(back.rows_for(&["z".into()]).is_err());
    }
}
