//! Dense feedforward network ending in an ACOL head, its backpropagation,
//! and mini-batch SGD training on the supervised + GAR objective.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acol::{check_labels, parent_probabilities, supervised_grad, AcolHead};
use crate::error::{Error, Result};
use crate::eval::parent_accuracy;
use crate::gar::{gar_grad, gar_loss, ActivityMatrix, GarCoefficients, GarLoss};
use crate::numeric::{matmul, matmul_nt, matmul_tn, relu, Matrix};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "linear" => Some(Activation::Linear),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `fan_in x fan_out`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    fn affine(&self, x: &Matrix) -> Result<Matrix> {
        let mut pre = matmul(x, &self.weights)?;
        pre.add_row_vector(&self.bias)?;
        Ok(pre)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<DenseLayer>,
    pub head: AcolHead,
    pub seed: u64,
}

impl Model {
    /// Assembles a model from explicit layers, checking the chain of shapes
    /// and that the last layer is a linear map onto the head's `n` nodes.
    pub fn from_layers(layers: Vec<DenseLayer>, head: AcolHead, seed: u64) -> Result<Self> {
        let model = Self { layers, head, seed };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let last = self
            .layers
            .last()
            .ok_or_else(|| Error::Config("model has no layers".into()))?;
        for pair in self.layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::shape(
                    "layer chain",
                    pair[0].weights.shape(),
                    pair[1].weights.shape(),
                ));
            }
        }
        for layer in &self.layers {
            if layer.bias.len() != layer.fan_out() {
                return Err(Error::shape(
                    "layer bias",
                    layer.weights.shape(),
                    (1, layer.bias.len()),
                ));
            }
        }
        if last.fan_out() != self.head.n() {
            return Err(Error::Config(format!(
                "last layer has {} outputs but the head needs {}",
                last.fan_out(),
                self.head.n()
            )));
        }
        if last.activation != Activation::Linear {
            return Err(Error::Config("last layer must be linear".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    /// `[d, h_1, ..., n]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.fan_out()));
        sizes
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }

    /// `Z` for every row of `x`, evaluated in chunks.
    pub fn pre_softmax(&self, x: &Matrix) -> Result<Matrix> {
        const CHUNK: usize = 1024;
        if x.rows() <= CHUNK {
            return Ok(forward(self, x)?.z().clone());
        }
        let mut data = Vec::with_capacity(x.rows() * self.head.n());
        let idx: Vec<usize> = (0..x.rows()).collect();
        for chunk in idx.chunks(CHUNK) {
            let pass = forward(self, &x.select_rows(chunk))?;
            data.extend_from_slice(pass.z().data());
        }
        Matrix::from_vec(x.rows(), self.head.n(), data)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

/// Glorot-uniform weights and zero biases. Hidden layers use relu, the last
/// layer is linear and produces `Z`.
pub fn init_model(layer_sizes: &[usize], head: AcolHead, seed: u64) -> Result<Model> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config(
            "layer sizes need an input size and at least one output size".into(),
        ));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::Config("layer sizes must be positive".into()));
    }
    let out = *layer_sizes.last().unwrap();
    if out != head.n() {
        return Err(Error::Config(format!(
            "final layer size {out} does not match n_p*k = {}",
            head.n()
        )));
    }
    let mut rng = stream_rng(seed, Stream::Init);
    let last = layer_sizes.len() - 2;
    let layers = layer_sizes
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights = Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-s..=s));
            DenseLayer {
                weights,
                bias: vec![0.0; fan_out],
                activation: if i == last {
                    Activation::Linear
                } else {
                    Activation::Relu
                },
            }
        })
        .collect();
    Model::from_layers(layers, head, seed)
}

/// Per-layer inputs and pre-activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is what layer `l` consumed; `inputs[0]` is the batch.
    pub inputs: Vec<Matrix>,
    /// `pre[l] = inputs[l]·W_l + b_l`; the last one is `Z`.
    pub pre: Vec<Matrix>,
}

impl ForwardCache {
    pub fn z(&self) -> &Matrix {
        self.pre.last().expect("forward cache is never empty")
    }

    /// Post-activation outputs of every hidden layer.
    pub fn hidden(&self) -> &[Matrix] {
        &self.inputs[1..]
    }
}

pub fn forward(model: &Model, x: &Matrix) -> Result<ForwardCache> {
    if x.cols() != model.input_dim() {
        return Err(Error::shape(
            "forward",
            x.shape(),
            model.layers[0].weights.shape(),
        ));
    }
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut pre = Vec::with_capacity(model.layers.len());
    inputs.push(x.clone());
    for (l, layer) in model.layers.iter().enumerate() {
        let p = layer.affine(&inputs[l])?;
        if l + 1 < model.layers.len() {
            inputs.push(match layer.activation {
                Activation::Relu => relu(&p),
                Activation::Linear => p.clone(),
            });
        }
        pre.push(p);
    }
    Ok(ForwardCache { inputs, pre })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Backpropagates `dZ_total` (already containing any `1/m` normalization)
/// through every layer.
pub fn backward(model: &Model, cache: &ForwardCache, dz_total: &Matrix) -> Result<Vec<LayerGradient>> {
    let depth = model.layers.len();
    if cache.pre.len() != depth || cache.inputs.len() != depth {
        return Err(Error::Config(format!(
            "stale forward cache: {} layers cached, model has {depth}",
            cache.pre.len()
        )));
    }
    if dz_total.shape() != cache.z().shape() {
        return Err(Error::shape("backward", dz_total.shape(), cache.z().shape()));
    }
    for (l, layer) in model.layers.iter().enumerate() {
        if cache.pre[l].cols() != layer.fan_out() || cache.inputs[l].cols() != layer.fan_in() {
            return Err(Error::shape(
                "backward cache",
                cache.inputs[l].shape(),
                layer.weights.shape(),
            ));
        }
    }

    let mut grads = Vec::with_capacity(depth);
    let mut delta = dz_total.clone();
    for l in (0..depth).rev() {
        let layer = &model.layers[l];
        if layer.activation == Activation::Relu {
            for (d, &p) in delta.data_mut().iter_mut().zip(cache.pre[l].data()) {
                if p <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let weights = matmul_tn(&cache.inputs[l], &delta)?;
        let bias = delta.column_sums();
        grads.push(LayerGradient { weights, bias });
        if l > 0 {
            delta = matmul_nt(&delta, &layer.weights)?;
        }
    }
    grads.reverse();
    Ok(grads)
}

/// Batch value of the training objective, split into its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub supervised: f64,
    /// GAR terms with the Frobenius weight already divided by the batch size.
    pub gar: GarLoss,
}

impl BatchLoss {
    pub fn total(&self) -> f64 {
        self.supervised + self.gar.total
    }
}

/// The objective minimized on one batch: mean log loss of the pooled
/// prediction plus `c_α α(B) + c_β (1 - β(B)) + (c_F / m) ‖B‖²_F`.
pub fn batch_objective(
    model: &Model,
    x: &Matrix,
    labels: &[usize],
    gar: &GarCoefficients,
) -> Result<BatchLoss> {
    let cache = forward(model, x)?;
    let z = cache.z();
    let (supervised, _) = supervised_grad(z, labels, &model.head)?;
    let b = ActivityMatrix::rectify(z)?;
    Ok(BatchLoss {
        supervised,
        gar: gar_loss(&b, &gar.per_batch(x.rows())),
    })
}

/// [`batch_objective`] together with its gradient for every layer.
pub fn batch_gradient(
    model: &Model,
    x: &Matrix,
    labels: &[usize],
    gar: &GarCoefficients,
) -> Result<(BatchLoss, Vec<LayerGradient>, ForwardCache)> {
    let cache = forward(model, x)?;
    let z = cache.z();
    let (supervised, mut dz) = supervised_grad(z, labels, &model.head)?;
    let b = ActivityMatrix::rectify(z)?;
    let coeffs = gar.per_batch(x.rows());
    let loss = BatchLoss {
        supervised,
        gar: gar_loss(&b, &coeffs),
    };
    let g = gar_grad(&b, &coeffs);
    // ∂B/∂Z is the relu indicator, zero at Z = 0
    for ((d, &gv), &zv) in dz.data_mut().iter_mut().zip(g.grad.data()).zip(z.data()) {
        if zv > 0.0 {
            *d += gv;
        }
    }
    let grads = backward(model, &cache, &dz)?;
    Ok((loss, grads, cache))
}

/// SGD with classical momentum: `v ← μv − ηg`, `θ ← θ + v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<LayerGradient>,
}

impl Sgd {
    pub fn new(model: &Model, learning_rate: f64, momentum: f64) -> Self {
        let velocity = model
            .layers
            .iter()
            .map(|l| LayerGradient {
                weights: Matrix::zeros(l.fan_in(), l.fan_out()),
                bias: vec![0.0; l.fan_out()],
            })
            .collect();
        Self {
            learning_rate,
            momentum,
            velocity,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[LayerGradient]) {
        let (lr, mu) = (self.learning_rate, self.momentum);
        for ((layer, g), v) in model.layers.iter_mut().zip(grads).zip(&mut self.velocity) {
            let params = layer.weights.data_mut().iter_mut().chain(layer.bias.iter_mut());
            let grad = g.weights.data().iter().chain(&g.bias);
            let vel = v.weights.data_mut().iter_mut().chain(v.bias.iter_mut());
            for ((p, &gv), vv) in params.zip(grad).zip(vel) {
                *vv = mu * *vv - lr * gv;
                *p += *vv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub gar: GarCoefficients,
    pub seed: u64,
    pub validation_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 100,
            learning_rate: 0.01,
            momentum: 0.9,
            gar: GarCoefficients::default(),
            seed: 0,
            validation_size: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        self.gar.validate()
    }
}

/// Features and parent labels only; fine labels never reach training.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub features: &'a Matrix,
    /// 1-based parent labels.
    pub parents: &'a [usize],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub sup_loss: f64,
    pub affinity: f64,
    pub balance: f64,
    /// Batch mean of `‖B‖²_F / m`.
    pub frobenius: f64,
    pub train_parent_acc: f64,
    pub val_parent_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were returned; 0 when nothing ran.
    pub selected_epoch: usize,
}

pub const METRICS_HEADER: &str =
    "epoch,sup_loss,affinity,balance,frobenius,train_parent_acc,val_parent_acc";

impl TrainReport {
    /// Metrics CSV, one row per epoch. A missing validation accuracy is an
    /// empty field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.epochs {
            let val = r.val_parent_acc.map(|v| format!("{v:.10}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.10},{:.10},{:.10},{:.10},{:.10},{}\n",
                r.epoch, r.sup_loss, r.affinity, r.balance, r.frobenius, r.train_parent_acc, val
            ));
        }
        out
    }
}

/// Mini-batch training of the combined objective.
///
/// Each epoch shuffles the training portion, walks it in batches of
/// `batch_size` (a trailing batch smaller than two examples is skipped, as
/// GAR terms are batch statistics), and takes one optimizer step per batch.
/// When `validation_size > 0` that many examples are held out and the
/// returned parameters are the snapshot from the epoch with the best
/// validation parent accuracy (latest on ties, since parent accuracy
/// saturates long before the sub-clusters settle); otherwise the final epoch
/// is returned.
pub fn train(model: &Model, data: TrainingData<'_>, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    train_with_progress(model, data, cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with_progress(
    model: &Model,
    data: TrainingData<'_>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let m = data.features.rows();
    if m == 0 {
        return Err(Error::Config("empty dataset".into()));
    }
    if data.parents.len() != m {
        return Err(Error::Length {
            op: "train",
            left: m,
            right: data.parents.len(),
        });
    }
    check_labels(data.parents, model.head.n_parents())?;
    if data.features.cols() != model.input_dim() {
        return Err(Error::shape(
            "train",
            data.features.shape(),
            model.layers[0].weights.shape(),
        ));
    }
    if cfg.validation_size >= m {
        return Err(Error::Config(format!(
            "validation size {} must be smaller than the dataset ({m})",
            cfg.validation_size
        )));
    }
    let (mut train_idx, val_idx) =
        crate::data::split_indices(m, cfg.validation_size, &mut stream_rng(cfg.seed, Stream::Validation));
    if cfg.batch_size > train_idx.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} training examples",
            cfg.batch_size,
            train_idx.len()
        )));
    }
    let val_x = data.features.select_rows(&val_idx);
    let val_t: Vec<usize> = val_idx.iter().map(|&i| data.parents[i]).collect();

    let mut current = model.clone();
    let mut best = model.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut report = TrainReport::default();
    let mut opt = Sgd::new(&current, cfg.learning_rate, cfg.momentum);
    let mut shuffle_rng: ChaCha8Rng = stream_rng(cfg.seed, Stream::Shuffle);

    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut shuffle_rng);
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for batch in train_idx.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let x = data.features.select_rows(batch);
            let t: Vec<usize> = batch.iter().map(|&i| data.parents[i]).collect();
            let (loss, grads, cache) = batch_gradient(&current, &x, &t, &cfg.gar)?;
            let y = parent_probabilities(cache.z(), &current.head)?;
            correct += (0..y.rows()).filter(|&r| y.row_argmax(r) + 1 == t[r]).count();
            seen += batch.len();
            opt.step(&mut current, &grads);
            sums[0] += loss.supervised;
            sums[1] += loss.gar.affinity;
            sums[2] += loss.gar.balance;
            sums[3] += loss.gar.frobenius_sq / batch.len() as f64;
            batches += 1;
        }
        if !current.is_finite() {
            return Err(Error::Config(format!(
                "parameters diverged to non-finite values in epoch {epoch}; lower the learning rate"
            )));
        }
        let nb = batches.max(1) as f64;
        let val_parent_acc = if val_idx.is_empty() {
            None
        } else {
            let y = parent_probabilities(&current.pre_softmax(&val_x)?, &current.head)?;
            Some(parent_accuracy(&y, &val_t)?)
        };
        report.epochs.push(EpochRecord {
            epoch,
            sup_loss: sums[0] / nb,
            affinity: sums[1] / nb,
            balance: sums[2] / nb,
            frobenius: sums[3] / nb,
            train_parent_acc: correct as f64 / seen.max(1) as f64,
            val_parent_acc,
        });
        on_epoch(report.epochs.last().unwrap());
        let score = val_parent_acc.unwrap_or(f64::INFINITY);
        if score >= best_val {
            best_val = score;
            best = current.clone();
            report.selected_epoch = epoch;
        }
    }
    if cfg.epochs == 0 {
        return Ok((model.clone(), report));
    }
    Ok((best, report))
}
