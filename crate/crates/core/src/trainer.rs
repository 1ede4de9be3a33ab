//! A small ReLU MLP with hand-written backpropagation, trained jointly with
//! bias-free class prototypes on any composite loss.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::datasets::Blobs;
use crate::error::{Error, Result};
use crate::geometry::{normalize_rows, random_unit_rows};
use crate::losses::{composite, label_histogram, LossSpec, RegularizerSpec};
use crate::margins::{MarginReport, DEFAULT_THRESHOLDS};
use crate::matrix::{dot, norm, Matrix};
use crate::scalar::Scalar;
use crate::sphere_opt::{sgd_step, sphere_sgd_step, OptimConfig, SgdState};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpSpec {
    /// Input width, hidden widths, embedding width.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    /// Divide the embedding by its norm as the last layer.
    pub embed_normalize: bool,
    pub seed: u64,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self { layer_sizes: vec![2, 32, 32, 3], activation: Activation::Relu, embed_normalize: false, seed: 0 }
    }
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 {
            return Err(Error::InvalidSpec(format!(
                "layer_sizes needs input, at least one hidden layer and the embedding, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::InvalidSpec(format!("zero-width layer in {:?}", self.layer_sizes)));
        }
        if *self.layer_sizes.last().unwrap() < 2 {
            return Err(Error::InvalidSpec("embedding width must be >= 2".into()));
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn embed_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
}

/// Dense layer `y = W x + b` with `W` stored out x in.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub spec: MlpSpec,
    pub layers: Vec<Layer<T>>,
}

/// Gradients with the same layout as [`Mlp::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads<T> {
    pub layers: Vec<Layer<T>>,
}

/// He-initialized weights and zero biases.
pub fn build_mlp<T: Scalar>(spec: &MlpSpec) -> Result<Mlp<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layers = spec
        .layer_sizes
        .windows(2)
        .map(|p| {
            let (fan_in, fan_out) = (p[0], p[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| T::of(std * rng.sample::<f64, _>(StandardNormal))).collect();
            Layer { weight: Matrix::from_vec(fan_out, fan_in, data).unwrap(), bias: vec![T::zero(); fan_out] }
        })
        .collect();
    Ok(Mlp { spec: spec.clone(), layers })
}

/// Activations kept for the backward pass.
struct Tape<T> {
    /// Input to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<Matrix<T>>,
    /// Pre-normalization embedding.
    embed: Matrix<T>,
}

impl<T: Scalar> Mlp<T> {
    fn affine(layer: &Layer<T>, x: &Matrix<T>) -> Matrix<T> {
        let mut out = Matrix::zeros(x.rows(), layer.weight.rows());
        for i in 0..x.rows() {
            let xi = x.row(i);
            for (o, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = dot(layer.weight.row(o), xi) + layer.bias[o];
            }
        }
        out
    }

    fn forward_tape(&self, x: &Matrix<T>) -> Result<(Tape<T>, Matrix<T>)> {
        if x.cols() != self.spec.d_in() {
            return Err(Error::Shape(format!("inputs have {} columns, network expects {}", x.cols(), self.spec.d_in())));
        }
        let mut inputs = vec![x.clone()];
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            h = Self::affine(layer, &h);
            if l < last {
                h.as_mut_slice().iter_mut().for_each(|v| *v = v.max(T::zero()));
                inputs.push(h.clone());
            }
        }
        let z = if self.spec.embed_normalize { normalize_rows(&h)? } else { h.clone() };
        Ok((Tape { inputs, embed: h }, z))
    }

    /// Embeddings for a batch of inputs (normalized when the spec asks).
    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.forward_tape(x)?.1)
    }

    fn backward(&self, tape: &Tape<T>, grad_z: &Matrix<T>) -> MlpGrads<T> {
        let mut g = grad_z.clone();
        if self.spec.embed_normalize {
            for i in 0..g.rows() {
                let e = tape.embed.row(i);
                let n = norm(e);
                let u: Vec<T> = e.iter().map(|&x| x / n).collect();
                let gi = g.row_mut(i);
                let radial = dot(gi, &u);
                for (gv, &uv) in gi.iter_mut().zip(&u) {
                    *gv = (*gv - radial * uv) / n;
                }
            }
        }
        let mut grads: Vec<Layer<T>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &tape.inputs[l];
            let mut gw = Matrix::zeros(layer.weight.rows(), layer.weight.cols());
            let mut gb = vec![T::zero(); layer.bias.len()];
            for i in 0..g.rows() {
                let (gi, xi) = (g.row(i), input.row(i));
                for (o, &go) in gi.iter().enumerate() {
                    if go == T::zero() {
                        continue;
                    }
                    gb[o] += go;
                    for (w, &xv) in gw.row_mut(o).iter_mut().zip(xi) {
                        *w += go * xv;
                    }
                }
            }
            if l > 0 {
                let mut gin = Matrix::zeros(g.rows(), layer.weight.cols());
                for i in 0..g.rows() {
                    let gi = g.row(i);
                    let out = gin.row_mut(i);
                    for (o, &go) in gi.iter().enumerate() {
                        for (v, &w) in out.iter_mut().zip(layer.weight.row(o)) {
                            *v += go * w;
                        }
                    }
                    // ReLU mask from the stored activation
                    for (v, &a) in out.iter_mut().zip(input.row(i)) {
                        if a <= T::zero() {
                            *v = T::zero();
                        }
                    }
                }
                g = gin;
            }
            grads.push(Layer { weight: gw, bias: gb });
        }
        grads.reverse();
        MlpGrads { layers: grads }
    }

    /// Composite loss on a batch with gradients for the network and the
    /// prototypes.
    pub fn loss_and_grads(
        &self,
        protos: &Matrix<T>,
        x: &Matrix<T>,
        labels: &[usize],
        loss: Option<&LossSpec>,
        reg: &RegularizerSpec,
        class_counts: Option<&[usize]>,
    ) -> Result<(T, MlpGrads<T>, Matrix<T>)> {
        let (tape, z) = self.forward_tape(x)?;
        let out = composite(protos, &z, labels, loss, reg, class_counts)?;
        let grads = if out.grad_z.rows() == 0 {
            self.backward(&tape, &Matrix::zeros(z.rows(), z.cols()))
        } else {
            self.backward(&tape, &out.grad_z)
        };
        Ok((out.value, grads, out.grad_w))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// The learning-rate schedule advances once per epoch; `steps` is unused.
    pub optim: OptimConfig,
    pub loss: Option<LossSpec>,
    pub reg: RegularizerSpec,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            optim: OptimConfig { lr0: 0.05, t_max: 200, log_every: 0, ..OptimConfig::default() },
            loss: Some(LossSpec::softmax_ce()),
            reg: RegularizerSpec::none(),
            eval_every: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidSpec("epochs and batch_size must be >= 1".into()));
        }
        self.optim.validate()?;
        self.reg.validate()?;
        if let Some(l) = &self.loss {
            l.validate()?;
        } else if self.reg.mu_sm == 0.0 && self.reg.lambda_w == 0.0 {
            return Err(Error::InvalidSpec("no base loss and no regularizer: nothing to train".into()));
        }
        Ok(())
    }

    fn sphere_prototypes(&self) -> bool {
        self.loss.as_ref().is_some_and(|l| l.normalize_prototypes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSnapshot {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub report: MarginReport<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub snapshots: Vec<EvalSnapshot>,
    /// SHA-256 over the final prototypes and network parameters.
    pub digest: String,
}

impl RunRecord {
    pub fn last(&self) -> &EvalSnapshot {
        self.snapshots.last().expect("a run records at least its final epoch")
    }

    pub fn to_json(&self) -> Value {
        let snaps: Vec<Value> = self
            .snapshots
            .iter()
            .map(|s| {
                json!({
                    "epoch": s.epoch,
                    "train_loss": s.train_loss,
                    "test_accuracy": s.test_accuracy,
                    "margins": s.report.to_json(),
                })
            })
            .collect();
        json!({ "snapshots": snaps, "digest": self.digest })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if let Some(first) = self.snapshots.first() {
            let _ = writeln!(out, "epoch,train_loss,test_accuracy,{}", first.report.csv_header());
        }
        for s in &self.snapshots {
            let _ = writeln!(out, "{},{},{},{}", s.epoch, s.train_loss, s.test_accuracy, s.report.csv_row());
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Trained<T> {
    pub model: Mlp<T>,
    pub prototypes: Matrix<T>,
    pub record: RunRecord,
}

/// Unit-norm initial prototypes on a stream of the model seed distinct from
/// the weight draws.
pub fn init_prototypes<T: Scalar>(k: usize, d: usize, seed: u64) -> Matrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    random_unit_rows(k, d, &mut rng)
}

/// Mini-batch training. Hidden layers use SGD with momentum and weight decay;
/// prototypes take sphere steps when the loss normalizes them and Euclidean
/// steps otherwise. Batches are drawn from a shuffling stream seeded by
/// `cfg.optim.seed`.
pub fn train<T: Scalar>(model: Mlp<T>, train_set: &Blobs<T>, test_set: &Blobs<T>, cfg: &TrainConfig) -> Result<Trained<T>> {
    cfg.validate()?;
    let mut model = model;
    let k = train_set.k();
    let d = model.spec.embed_dim();
    if train_set.d_in() != model.spec.d_in() || test_set.d_in() != model.spec.d_in() {
        return Err(Error::Shape(format!(
            "data has {} input columns, network expects {}",
            train_set.d_in(),
            model.spec.d_in()
        )));
    }
    if test_set.k() != k {
        return Err(Error::Shape(format!("train has {k} classes, test has {}", test_set.k())));
    }
    let counts = label_histogram(&train_set.labels, k);
    let mut protos: Matrix<T> = init_prototypes(k, d, model.spec.seed);
    let sphere = cfg.sphere_prototypes();
    let mut proto_state = SgdState::new(k, d);
    let mut velocities: Vec<(Vec<T>, Vec<T>)> =
        model.layers.iter().map(|l| (vec![T::zero(); l.weight.as_slice().len()], vec![T::zero(); l.bias.len()])).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.optim.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut snapshots = Vec::new();
    let loss_name = cfg.loss.as_ref().map(|l| l.kind.name()).unwrap_or("regularizers only");
    let mut iteration = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = gather_rows(&train_set.inputs, chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let where_ = |what: String| Error::Divergence {
                step: iteration,
                detail: format!("epoch {epoch}, batch {b}, loss {loss_name}: {what}"),
            };
            let (value, grads, grad_w) = model
                .loss_and_grads(&protos, &x, &labels, cfg.loss.as_ref(), &cfg.reg, Some(&counts))
                .map_err(|e| if e.is_numeric() || matches!(e, Error::Degenerate { .. }) { where_(e.to_string()) } else { e })?;
            if !value.is_finite() || !grad_w.is_finite() {
                return Err(where_(format!("value {value}")));
            }
            epoch_loss += value.as_f64() * chunk.len() as f64;
            for ((layer, g), (vw, vb)) in model.layers.iter_mut().zip(&grads.layers).zip(&mut velocities) {
                sgd_step(layer.weight.as_mut_slice(), g.weight.as_slice(), vw, &cfg.optim, epoch);
                sgd_step(&mut layer.bias, &g.bias, vb, &cfg.optim, epoch);
            }
            if sphere {
                sphere_sgd_step(&mut protos, &grad_w, &mut proto_state, &cfg.optim, epoch)?;
            } else {
                let v = proto_state.velocity.as_mut_slice();
                sgd_step(protos.as_mut_slice(), grad_w.as_slice(), v, &cfg.optim, epoch);
            }
            iteration += 1;
        }
        let last = epoch + 1 == cfg.epochs;
        if last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) {
            let (test_accuracy, report) = evaluate(&model, test_set, &protos)?;
            snapshots.push(EvalSnapshot {
                epoch: epoch + 1,
                train_loss: epoch_loss / train_set.len() as f64,
                test_accuracy,
                report,
            });
        }
    }
    let digest = digest(&protos, &model);
    Ok(Trained { model, prototypes: protos, record: RunRecord { snapshots, digest } })
}

fn gather_rows<T: Scalar>(m: &Matrix<T>, idx: &[usize]) -> Matrix<T> {
    let mut out = Matrix::zeros(idx.len(), m.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

/// Accuracy of `argmax_j w_j . z` and the margin report on unit-normalized
/// prototypes and embeddings (magnitude ratio on the raw prototypes).
pub fn evaluate<T: Scalar>(model: &Mlp<T>, data: &Blobs<T>, protos: &Matrix<T>) -> Result<(f64, MarginReport<f64>)> {
    let z = model.forward(&data.inputs)?.to_f64();
    let w = protos.to_f64();
    let hits = (0..z.rows())
        .filter(|&i| {
            let zi = z.row(i);
            let mut best = (0, f64::NEG_INFINITY);
            for j in 0..w.rows() {
                let v = dot(w.row(j), zi);
                if v > best.1 {
                    best = (j, v);
                }
            }
            best.0 == data.labels[i]
        })
        .count();
    let report = MarginReport::compute(&w, &z, &data.labels, &DEFAULT_THRESHOLDS, true)?;
    Ok((hits as f64 / z.rows().max(1) as f64, report))
}

fn digest<T: Scalar>(protos: &Matrix<T>, model: &Mlp<T>) -> String {
    let mut h = Sha256::new();
    let mut feed = |xs: &[T]| {
        for x in xs {
            h.update(x.as_f64().to_le_bytes());
        }
    };
    feed(protos.as_slice());
    for l in &model.layers {
        feed(l.weight.as_slice());
        feed(&l.bias);
    }
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// One histogram bin: `[left, right)` and its count.
pub type Bin = (f64, f64, usize);

/// `bins` uniform bins over `[lo, hi]`; out-of-range values are clamped to
/// the edge bins.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<Bin> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = ((v - lo) / width).floor();
        counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
    }
    counts.iter().enumerate().map(|(b, &c)| (lo + b as f64 * width, lo + (b + 1) as f64 * width, c)).collect()
}

pub const HISTOGRAM_BINS: usize = 50;

/// Cosine similarities to the target and the other prototypes, and cosine
/// sample margins, each binned over its natural range.
#[derive(Clone, Debug, PartialEq)]
pub struct Histograms {
    pub target_similarity: Vec<Bin>,
    pub other_similarity: Vec<Bin>,
    pub sample_margin: Vec<Bin>,
}

impl Histograms {
    pub fn compute(w: &Matrix<f64>, z: &Matrix<f64>, labels: &[usize]) -> Result<Self> {
        let (wn, zn) = (normalize_rows(w)?, normalize_rows(z)?);
        let (mut target, mut other, mut margin) = (Vec::new(), Vec::new(), Vec::new());
        for (i, &y) in labels.iter().enumerate() {
            let mut best = f64::NEG_INFINITY;
            for j in 0..wn.rows() {
                let c = dot(wn.row(j), zn.row(i));
                if j == y {
                    target.push(c);
                } else {
                    other.push(c);
                    best = best.max(c);
                }
            }
            margin.push(dot(wn.row(y), zn.row(i)) - best);
        }
        Ok(Self {
            target_similarity: histogram(&target, -1.0, 1.0, HISTOGRAM_BINS),
            other_similarity: histogram(&other, -1.0, 1.0, HISTOGRAM_BINS),
            sample_margin: histogram(&margin, -2.0, 2.0, HISTOGRAM_BINS),
        })
    }

    pub fn bins_to_csv(bins: &[Bin]) -> String {
        let mut out = String::from("bin_left,bin_right,count\n");
        for (l, r, c) in bins {
            let _ = writeln!(out, "{l},{r},{c}");
        }
        out
    }
}
