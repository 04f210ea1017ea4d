//! Feed-forward networks with manual backpropagation, softmax
//! cross-entropy, and momentum SGD with polynomial learning-rate decay.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

/// Affine layer `y = act(x·W + b)` with `W` of shape `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = Matrix::from_fn(inputs, outputs, |_, _| rng.random_range(-limit..limit));
        Self {
            weights,
            bias: vec![0.0; outputs],
            activation,
        }
    }

    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            weights: Matrix::zeros(inputs, outputs),
            bias: vec![0.0; outputs],
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }
}

/// A chain of dense layers. The last layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Layer shape description used by checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl Mlp {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::shape(
                    "Mlp::from_layers",
                    format!("layer {} input = {}", i + 1, pair[0].outputs()),
                    pair[1].inputs(),
                ));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(Error::shape(
                    "Mlp::from_layers",
                    format!("layer {i} bias of {}", l.outputs()),
                    l.bias.len(),
                ));
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::None) {
            return Err(Error::Config("the last layer must be linear".into()));
        }
        Ok(Self { layers })
    }

    /// `sizes = [in, h1, ..., out]`: ReLU on every hidden layer, linear output.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n {
                    Activation::None
                } else {
                    Activation::Relu
                };
                Dense::init(sizes[i], sizes[i + 1], act, rng)
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn architecture(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| LayerSpec {
                inputs: l.inputs(),
                outputs: l.outputs(),
                activation: l.activation,
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// All parameters in layer order, each layer's weights (row-major) then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::shape(
                "set_flat_params",
                self.param_count(),
                params.len(),
            ));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.as_slice().len();
            l.weights
                .as_mut_slice()
                .copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    pub fn from_architecture(arch: &[LayerSpec], params: &[f64]) -> Result<Self> {
        let layers = arch
            .iter()
            .map(|s| Dense::zeros(s.inputs, s.outputs, s.activation))
            .collect();
        let mut net = Self::from_layers(layers)?;
        net.set_flat_params(params)?;
        Ok(net)
    }
}

/// Intermediates of a forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Post-activation output of each layer (ReLU masks read from these).
    outputs: Vec<Matrix>,
}

impl Cache {
    pub fn output(&self) -> &Matrix {
        self.outputs.last().expect("non-empty cache")
    }
}

/// Per-layer parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.inputs(), l.outputs()))
                .collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.outputs()]).collect(),
        }
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.weights.len() != other.weights.len() {
            return Err(Error::shape(
                "Gradients::accumulate",
                self.weights.len(),
                other.weights.len(),
            ));
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.axpy(1.0, b)?;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    /// Same layout as [`Mlp::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.bias) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }
}

pub fn forward(net: &Mlp, x: &Matrix) -> Result<(Matrix, Cache)> {
    if x.cols() != net.input_dim() {
        return Err(Error::shape(
            "forward",
            format!("{} input columns", net.input_dim()),
            x.cols(),
        ));
    }
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut outputs = Vec::with_capacity(net.layers.len());
    let mut h = x.clone();
    for layer in &net.layers {
        let mut z = h.matmul(&layer.weights)?;
        for i in 0..z.rows() {
            for (v, b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        if layer.activation == Activation::Relu {
            z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        inputs.push(h);
        h = z.clone();
        outputs.push(z);
    }
    Ok((h, Cache { inputs, outputs }))
}

/// Forward pass without keeping intermediates.
pub fn predict(net: &Mlp, x: &Matrix) -> Result<Matrix> {
    Ok(forward(net, x)?.0)
}

pub fn backward(net: &Mlp, cache: &Cache, grad_output: &Matrix) -> Result<(Gradients, Matrix)> {
    if cache.inputs.len() != net.layers.len() {
        return Err(Error::shape(
            "backward",
            format!("cache for {} layers", net.layers.len()),
            cache.inputs.len(),
        ));
    }
    if grad_output.shape() != cache.output().shape() {
        return Err(Error::shape(
            "backward",
            format!("{:?}", cache.output().shape()),
            format!("{:?}", grad_output.shape()),
        ));
    }
    let n = net.layers.len();
    let mut weights = Vec::with_capacity(n);
    let mut bias = Vec::with_capacity(n);
    let mut g = grad_output.clone();
    for (k, layer) in net.layers.iter().enumerate().rev() {
        if layer.activation == Activation::Relu {
            for (gv, &out) in g.as_mut_slice().iter_mut().zip(cache.outputs[k].as_slice()) {
                if out <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        weights.push(cache.inputs[k].t_matmul(&g)?);
        let mut db = vec![0.0; layer.outputs()];
        for i in 0..g.rows() {
            db.iter_mut().zip(g.row(i)).for_each(|(d, v)| *d += v);
        }
        bias.push(db);
        g = g.matmul_t(&layer.weights)?;
    }
    weights.reverse();
    bias.reverse();
    Ok((Gradients { weights, bias }, g))
}

/// Row-wise softmax, stabilised by max subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    p
}

/// Mean cross-entropy of `softmax(logits)` against `labels`, and its
/// gradient `(softmax − onehot) / n`.
pub fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (n, c) = logits.shape();
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_xent",
            format!("{n} labels"),
            labels.len(),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange {
            label,
            n_classes: c,
        });
    }
    if n == 0 {
        return Ok((0.0, Matrix::zeros(0, c)));
    }
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        let g = grad.row_mut(i);
        g[y] -= 1.0;
    }
    let inv = 1.0 / n as f64;
    grad.as_mut_slice().iter_mut().for_each(|v| *v *= inv);
    Ok((loss * inv, grad))
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            let row = m.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub eta0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            eta0: 0.01,
            alpha: 10.0,
            beta: 0.75,
            momentum: 0.9,
            batch_size: 32,
            epochs: 30,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::invalid(
                "eta0",
                format!("must be positive, got {}", self.eta0),
            ));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid("alpha/beta", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(
                "momentum",
                format!("must be in [0, 1), got {}", self.momentum),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        Ok(())
    }
}

/// Learning rate `eta0 / (1 + alpha·p)^beta` at training progress `p ∈ [0, 1]`.
pub fn lr_at(cfg: &SgdConfig, p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(
            "p",
            format!("training progress must be in [0, 1], got {p}"),
        ));
    }
    Ok(cfg.eta0 / (1.0 + cfg.alpha * p).powf(cfg.beta))
}

/// Heavy-ball momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity(Gradients);

impl Velocity {
    pub fn zeros_like(net: &Mlp) -> Self {
        Velocity(Gradients::zeros_like(net))
    }

    pub fn as_gradients(&self) -> &Gradients {
        &self.0
    }
}

/// `v ← momentum·v − lr·grad; param ← param + v`.
pub fn sgd_step(
    net: &mut Mlp,
    grads: &Gradients,
    velocity: &mut Velocity,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let v = &mut velocity.0;
    if grads.weights.len() != net.layers.len() || v.weights.len() != net.layers.len() {
        return Err(Error::shape(
            "sgd_step",
            net.layers.len(),
            grads.weights.len(),
        ));
    }
    for (k, layer) in net.layers.iter_mut().enumerate() {
        if grads.weights[k].shape() != layer.weights.shape()
            || grads.bias[k].len() != layer.bias.len()
        {
            return Err(Error::shape(
                "sgd_step",
                format!("{:?}", layer.weights.shape()),
                format!("{:?}", grads.weights[k].shape()),
            ));
        }
        let params = layer
            .weights
            .as_mut_slice()
            .iter_mut()
            .chain(layer.bias.iter_mut());
        let vel = v.weights[k]
            .as_mut_slice()
            .iter_mut()
            .chain(v.bias[k].iter_mut());
        let gs = grads.weights[k]
            .as_slice()
            .iter()
            .chain(grads.bias[k].iter());
        for ((p, vv), g) in params.zip(vel).zip(gs) {
            *vv = momentum * *vv - lr * g;
            *p += *vv;
        }
    }
    Ok(())
}

/// Mean training loss and accuracy after one supervised epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub accuracy: f64,
}

/// Plain supervised training with softmax cross-entropy, shuffled
/// mini-batches and the decayed momentum schedule.
pub fn fit_classifier(
    net: &mut Mlp,
    x: &Matrix,
    labels: &[usize],
    cfg: &SgdConfig,
) -> Result<Vec<FitEpoch>> {
    use rand::seq::SliceRandom;

    cfg.validate()?;
    if x.rows() == 0 {
        return Err(Error::Degenerate {
            op: "fit_classifier",
            reason: "no training rows".into(),
        });
    }
    if labels.len() != x.rows() {
        return Err(Error::shape("fit_classifier", x.rows(), labels.len()));
    }
    let mut rng = crate::rng::seeded(cfg.seed);
    let mut velocity = Velocity::zeros_like(net);
    let per_epoch = x.rows().div_ceil(cfg.batch_size);
    let total = (per_epoch * cfg.epochs) as f64;
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut step = 0usize;
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let epoch_lr = lr_at(cfg, step as f64 / total)?;
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (logits, cache) = forward(net, &xb)?;
            let (loss, grad) = softmax_xent(&logits, &yb)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: step % per_epoch,
                    class_loss: loss,
                    adapt_loss: 0.0,
                });
            }
            let (grads, _) = backward(net, &cache, &grad)?;
            sgd_step(
                net,
                &grads,
                &mut velocity,
                lr_at(cfg, step as f64 / total)?,
                cfg.momentum,
            )?;
            loss_sum += loss;
            step += 1;
        }
        let predicted = argmax_rows(&predict(net, x)?);
        let hits = predicted.iter().zip(labels).filter(|(p, t)| p == t).count();
        out.push(FitEpoch {
            epoch,
            loss: loss_sum / per_epoch as f64,
            lr: epoch_lr,
            accuracy: hits as f64 / labels.len() as f64,
        });
    }
    Ok(out)
}
