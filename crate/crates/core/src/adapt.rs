//! One domain-adaptive base learner: a shared extractor `g`, `d` parallel
//! substructures `s_i` on top of it, and a classifier `f` over the
//! concatenated substructure outputs. Training minimises
//!
//! ```text
//! xent(f([s_1(g(xs)); …; s_d(g(xs))]), ys) + λ · Σ_i D(s_i(g(xs)), s_i(g(xt)))
//! ```
//!
//! on balanced source/target mini-batches.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::discrepancy::{adaptation_loss, ClassLabels, DiscrepancyMethod};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{
    argmax_rows, backward, forward, lr_at, sgd_step, softmax, softmax_xent, Cache, Gradients, Mlp,
    SgdConfig, Velocity,
};
use crate::rng::{derive_seed, seeded, Rng};

/// Layer widths of a base learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Widths of the shared extractor's layers; the last is its output width.
    pub shared: Vec<usize>,
    /// Layer widths of each substructure, fed by the shared output.
    pub branches: Vec<Vec<usize>>,
    /// Hidden widths of the classifier between the concatenation and the logits.
    pub classifier_hidden: Vec<usize>,
}

impl Architecture {
    /// Two-layer shared extractor and four substructures of depth 2, 3, 1
    /// and 1 with output widths 8, 8, 4, 4.
    pub fn desk_scale(input_dim: usize) -> Self {
        Self {
            input_dim,
            shared: vec![32, 16],
            branches: vec![vec![16, 8], vec![16, 16, 8], vec![4], vec![4]],
            classifier_hidden: vec![],
        }
    }

    pub fn concat_width(&self) -> usize {
        self.branches.iter().filter_map(|b| b.last()).sum()
    }
}

/// Training hyper-parameters for one base learner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    /// Weight of the adaptation term.
    pub lambda_tradeoff: f64,
    /// Leading epochs trained on the classification term alone.
    pub warmup_epochs: usize,
    /// Recompute target pseudo-labels at the start of every post-warmup epoch.
    pub pseudo_refresh: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig::default(),
            lambda_tradeoff: 1.0,
            warmup_epochs: 3,
            pseudo_refresh: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if !(self.lambda_tradeoff >= 0.0 && self.lambda_tradeoff.is_finite()) {
            return Err(Error::invalid(
                "lambda",
                format!("must be non-negative, got {}", self.lambda_tradeoff),
            ));
        }
        if self.warmup_epochs > self.sgd.epochs {
            return Err(Error::invalid("warmup_epochs", "cannot exceed epochs"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseLearner {
    pub g: Mlp,
    pub substructures: Vec<Mlp>,
    pub f: Mlp,
    pub method: DiscrepancyMethod,
    pub n_classes: usize,
}

/// Substructure outputs for a batch.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub per_substructure: Vec<Matrix>,
    pub concat: Matrix,
}

struct FullForward {
    g_cache: Cache,
    sub_caches: Vec<Cache>,
    sub_outputs: Vec<Matrix>,
    concat: Matrix,
}

/// Gradients for every network of a learner.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerGrads {
    pub g: Gradients,
    pub substructures: Vec<Gradients>,
    pub f: Gradients,
}

impl LearnerGrads {
    /// Same layout as [`BaseLearner::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.g.flatten();
        self.substructures
            .iter()
            .for_each(|s| out.extend(s.flatten()));
        out.extend(self.f.flatten());
        out
    }
}

#[derive(Debug, Clone)]
struct LearnerVelocity {
    g: Velocity,
    substructures: Vec<Velocity>,
    f: Velocity,
}

/// Loss components and gradients of one objective evaluation.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: f64,
    pub class_loss: f64,
    /// Unweighted sum of the per-substructure discrepancies.
    pub adapt_loss: f64,
    pub grads: LearnerGrads,
}

impl BaseLearner {
    pub fn new(
        arch: &Architecture,
        n_classes: usize,
        method: DiscrepancyMethod,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        if arch.shared.is_empty()
            || arch.branches.is_empty()
            || arch.branches.iter().any(Vec::is_empty)
        {
            return Err(Error::Config(
                "shared extractor and every substructure need at least one layer".into(),
            ));
        }
        method.validate()?;
        let mut sizes = vec![arch.input_dim];
        sizes.extend(&arch.shared);
        let g = Mlp::new(&sizes, rng)?;
        let shared_out = g.output_dim();
        let substructures = arch
            .branches
            .iter()
            .map(|b| {
                let mut s = vec![shared_out];
                s.extend(b);
                Mlp::new(&s, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut fs = vec![arch.concat_width()];
        fs.extend(&arch.classifier_hidden);
        fs.push(n_classes);
        let f = Mlp::new(&fs, rng)?;
        Self::from_parts(g, substructures, f, method, n_classes)
    }

    pub fn from_parts(
        g: Mlp,
        substructures: Vec<Mlp>,
        f: Mlp,
        method: DiscrepancyMethod,
        n_classes: usize,
    ) -> Result<Self> {
        if substructures.is_empty() {
            return Err(Error::Config("need at least one substructure".into()));
        }
        if let Some(s) = substructures
            .iter()
            .find(|s| s.input_dim() != g.output_dim())
        {
            return Err(Error::shape(
                "BaseLearner",
                format!("substructure input {}", g.output_dim()),
                s.input_dim(),
            ));
        }
        let concat: usize = substructures.iter().map(Mlp::output_dim).sum();
        if f.input_dim() != concat {
            return Err(Error::shape(
                "BaseLearner",
                format!("classifier input {concat}"),
                f.input_dim(),
            ));
        }
        if f.output_dim() != n_classes {
            return Err(Error::shape(
                "BaseLearner",
                format!("{n_classes} logits"),
                f.output_dim(),
            ));
        }
        Ok(Self {
            g,
            substructures,
            f,
            method,
            n_classes,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.g.input_dim()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = self.g.flat_params();
        self.substructures
            .iter()
            .for_each(|s| out.extend(s.flat_params()));
        out.extend(self.f.flat_params());
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        let total = self.g.param_count()
            + self
                .substructures
                .iter()
                .map(Mlp::param_count)
                .sum::<usize>()
            + self.f.param_count();
        if params.len() != total {
            return Err(Error::shape(
                "BaseLearner::set_flat_params",
                total,
                params.len(),
            ));
        }
        let mut at = 0;
        let mut take = |net: &mut Mlp| {
            let n = net.param_count();
            let r = net.set_flat_params(&params[at..at + n]);
            at += n;
            r
        };
        take(&mut self.g)?;
        for s in &mut self.substructures {
            take(s)?;
        }
        take(&mut self.f)
    }

    fn forward_full(&self, x: &Matrix) -> Result<FullForward> {
        let (h, g_cache) = forward(&self.g, x)?;
        let mut sub_caches = Vec::with_capacity(self.substructures.len());
        let mut sub_outputs = Vec::with_capacity(self.substructures.len());
        for s in &self.substructures {
            let (out, cache) = forward(s, &h)?;
            sub_outputs.push(out);
            sub_caches.push(cache);
        }
        let concat = Matrix::hstack(&sub_outputs.iter().collect::<Vec<_>>())?;
        Ok(FullForward {
            g_cache,
            sub_caches,
            sub_outputs,
            concat,
        })
    }

    /// `s_i(g(x))` for every substructure, and their row-wise concatenation.
    pub fn extract(&self, x: &Matrix) -> Result<Extraction> {
        let full = self.forward_full(x)?;
        Ok(Extraction {
            per_substructure: full.sub_outputs,
            concat: full.concat,
        })
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let full = self.forward_full(x)?;
        Ok(forward(&self.f, &full.concat)?.0)
    }

    /// Softmax class probabilities; rows sum to one.
    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Backpropagates per-substructure output gradients to `g` and the `s_i`.
    fn backward_extractors(
        &self,
        full: &FullForward,
        sub_grads: &[Matrix],
        grads: &mut LearnerGrads,
    ) -> Result<()> {
        let mut dh: Option<Matrix> = None;
        for (k, s) in self.substructures.iter().enumerate() {
            let (gs, dhk) = backward(s, &full.sub_caches[k], &sub_grads[k])?;
            grads.substructures[k].accumulate(&gs)?;
            match dh.as_mut() {
                Some(acc) => acc.axpy(1.0, &dhk)?,
                None => dh = Some(dhk),
            }
        }
        let dh = dh.expect("at least one substructure");
        let (gg, _) = backward(&self.g, &full.g_cache, &dh)?;
        grads.g.accumulate(&gg)
    }

    fn zero_grads(&self) -> LearnerGrads {
        LearnerGrads {
            g: Gradients::zeros_like(&self.g),
            substructures: self
                .substructures
                .iter()
                .map(Gradients::zeros_like)
                .collect(),
            f: Gradients::zeros_like(&self.f),
        }
    }

    fn apply(
        &mut self,
        grads: &LearnerGrads,
        v: &mut LearnerVelocity,
        lr: f64,
        momentum: f64,
    ) -> Result<()> {
        sgd_step(&mut self.g, &grads.g, &mut v.g, lr, momentum)?;
        for ((s, gs), vs) in self
            .substructures
            .iter_mut()
            .zip(&grads.substructures)
            .zip(&mut v.substructures)
        {
            sgd_step(s, gs, vs, lr, momentum)?;
        }
        sgd_step(&mut self.f, &grads.f, &mut v.f, lr, momentum)
    }
}

/// Full objective on one balanced batch. With `lambda_tradeoff == 0` the
/// target batch is not touched and the total equals the class loss.
pub fn objective(
    bl: &BaseLearner,
    xs: &Matrix,
    ys: &[usize],
    xt: &Matrix,
    yt_pseudo: Option<&[usize]>,
    lambda_tradeoff: f64,
) -> Result<Objective> {
    let src = bl.forward_full(xs)?;
    let (logits, f_cache) = forward(&bl.f, &src.concat)?;
    let (class_loss, dlogits) = softmax_xent(&logits, ys)?;
    let (gf, dconcat) = backward(&bl.f, &f_cache, &dlogits)?;

    let mut grads = bl.zero_grads();
    grads.f = gf;

    let mut src_sub_grads = Vec::with_capacity(bl.substructures.len());
    let mut offset = 0;
    for out in &src.sub_outputs {
        src_sub_grads.push(dconcat.column_block(offset, out.cols()));
        offset += out.cols();
    }

    let mut adapt_loss = 0.0;
    if lambda_tradeoff != 0.0 {
        let tgt = bl.forward_full(xt)?;
        let labels = match yt_pseudo {
            Some(pseudo) => Some(ClassLabels {
                source: ys,
                target_pseudo: pseudo,
                n_classes: bl.n_classes,
            }),
            None if bl.method.needs_pseudo_labels() => {
                return Err(Error::Config(
                    "conditional MMD needs target pseudo-labels".into(),
                ))
            }
            None => None,
        };
        let mut tgt_sub_grads = Vec::with_capacity(bl.substructures.len());
        for (k, (rs, rt)) in src.sub_outputs.iter().zip(&tgt.sub_outputs).enumerate() {
            let d = adaptation_loss(rs, rt, labels, &bl.method)?;
            adapt_loss += d.value;
            src_sub_grads[k].axpy(lambda_tradeoff, &d.grad_source)?;
            tgt_sub_grads.push(d.grad_target.scale(lambda_tradeoff));
        }
        bl.backward_extractors(&tgt, &tgt_sub_grads, &mut grads)?;
    }
    bl.backward_extractors(&src, &src_sub_grads, &mut grads)?;

    Ok(Objective {
        total: class_loss + lambda_tradeoff * adapt_loss,
        class_loss,
        adapt_loss,
        grads,
    })
}

/// Source/target rows of one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub xs: Matrix,
    pub ys: Vec<usize>,
    pub xt: Matrix,
    pub source_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
}

/// Per-epoch shuffles of both domains, cut into equal-size batches.
/// A domain with fewer rows than an epoch demands wraps around its shuffle.
struct EpochSampler {
    source_perm: Vec<usize>,
    target_perm: Vec<usize>,
    batch_size: usize,
}

impl EpochSampler {
    fn new(n_source: usize, n_target: usize, batch_size: usize, rng: &mut Rng) -> Self {
        let mut source_perm: Vec<usize> = (0..n_source).collect();
        let mut target_perm: Vec<usize> = (0..n_target).collect();
        source_perm.shuffle(rng);
        target_perm.shuffle(rng);
        Self {
            source_perm,
            target_perm,
            batch_size,
        }
    }

    fn batches_per_epoch(n_source: usize, batch_size: usize) -> usize {
        n_source.div_ceil(batch_size).max(1)
    }

    fn indices(&self, batch: usize) -> (Vec<usize>, Vec<usize>) {
        let take = |perm: &[usize]| -> Vec<usize> {
            (0..self.batch_size)
                .map(|k| perm[(batch * self.batch_size + k) % perm.len()])
                .collect()
        };
        (take(&self.source_perm), take(&self.target_perm))
    }

    fn batch(&self, batch: usize, source: &LabeledSet, target: &LabeledSet) -> Result<Batch> {
        let (si, ti) = self.indices(batch);
        let labels = source.labels_or_err()?;
        if (batch + 1) * self.batch_size > self.target_perm.len()
            && batch * self.batch_size < self.target_perm.len()
        {
            log::debug!(
                "target domain ({} rows) wraps within a batch of {}",
                self.target_perm.len(),
                self.batch_size
            );
        }
        Ok(Batch {
            xs: source.features.select_rows(&si),
            ys: si.iter().map(|&i| labels[i]).collect(),
            xt: target.features.select_rows(&ti),
            source_indices: si,
            target_indices: ti,
        })
    }
}

/// Draws `batch_size` source and `batch_size` target rows from fresh shuffles.
pub fn sample_balanced_batch(
    source: &LabeledSet,
    target: &LabeledSet,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Batch> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Degenerate {
            op: "sample_balanced_batch",
            reason: "both domains need at least one row".into(),
        });
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be at least 1"));
    }
    EpochSampler::new(source.len(), target.len(), batch_size, rng).batch(0, source, target)
}

/// Current classifier's argmax for every target row (ties to the lower class).
pub fn refresh_pseudo_labels(bl: &BaseLearner, target: &Matrix) -> Result<Vec<usize>> {
    Ok(argmax_rows(&bl.logits(target)?))
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub class_loss: f64,
    pub adapt_loss: f64,
    pub lr: f64,
    pub source_acc: f64,
    /// Only when the target set carries labels; never used for training.
    pub target_acc: Option<f64>,
}

pub type History = Vec<EpochRecord>;

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

/// Trains a learner: `warmup_epochs` of classification only, then the full
/// objective. Target labels, when present, only feed the history.
pub fn train_base(
    mut bl: BaseLearner,
    source: &LabeledSet,
    target: &LabeledSet,
    cfg: &TrainConfig,
) -> Result<(BaseLearner, History)> {
    cfg.validate()?;
    let source_labels = source.labels_or_err()?.to_vec();
    if source.is_empty() || target.is_empty() {
        return Err(Error::Degenerate {
            op: "train_base",
            reason: "source and target need at least one row".into(),
        });
    }
    for set in [source, target] {
        if set.n_features() != bl.input_dim() {
            return Err(Error::shape(
                "train_base",
                format!("{} features", bl.input_dim()),
                set.n_features(),
            ));
        }
    }
    if let Some(&label) = source_labels.iter().find(|&&l| l >= bl.n_classes) {
        return Err(Error::LabelOutOfRange {
            label,
            n_classes: bl.n_classes,
        });
    }

    let sgd = &cfg.sgd;
    let mut rng = seeded(derive_seed(sgd.seed, "batches"));
    let mut velocity = LearnerVelocity {
        g: Velocity::zeros_like(&bl.g),
        substructures: bl.substructures.iter().map(Velocity::zeros_like).collect(),
        f: Velocity::zeros_like(&bl.f),
    };
    let per_epoch = EpochSampler::batches_per_epoch(source.len(), sgd.batch_size);
    let total_steps = (per_epoch * sgd.epochs) as f64;
    let mut step = 0usize;
    let mut history = Vec::with_capacity(sgd.epochs);
    let mut pseudo: Option<Vec<usize>> = None;

    for epoch in 0..sgd.epochs {
        let adapting = epoch >= cfg.warmup_epochs && cfg.lambda_tradeoff > 0.0;
        let lambda = if adapting { cfg.lambda_tradeoff } else { 0.0 };
        if adapting && bl.method.needs_pseudo_labels() && (cfg.pseudo_refresh || pseudo.is_none()) {
            pseudo = Some(refresh_pseudo_labels(&bl, &target.features)?);
        }

        let sampler = EpochSampler::new(source.len(), target.len(), sgd.batch_size, &mut rng);
        let epoch_lr = lr_at(sgd, step as f64 / total_steps)?;
        let (mut class_sum, mut adapt_sum) = (0.0, 0.0);
        for b in 0..per_epoch {
            let batch = sampler.batch(b, source, target)?;
            let batch_pseudo: Option<Vec<usize>> = pseudo
                .as_ref()
                .filter(|_| adapting)
                .map(|p| batch.target_indices.iter().map(|&i| p[i]).collect());
            let out = objective(
                &bl,
                &batch.xs,
                &batch.ys,
                &batch.xt,
                batch_pseudo.as_deref(),
                lambda,
            )
            .inspect_err(|e| {
                if *e == Error::NoOverlappingClass {
                    log::warn!("epoch {epoch}, batch {b}: no class present in both domains");
                }
            })?;
            if !out.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    class_loss: out.class_loss,
                    adapt_loss: out.adapt_loss,
                });
            }
            let lr = lr_at(sgd, step as f64 / total_steps)?;
            bl.apply(&out.grads, &mut velocity, lr, sgd.momentum)?;
            class_sum += out.class_loss;
            adapt_sum += out.adapt_loss;
            step += 1;
        }

        let source_acc = accuracy(&argmax_rows(&bl.logits(&source.features)?), &source_labels);
        let target_acc = match &target.labels {
            Some(l) => Some(accuracy(&argmax_rows(&bl.logits(&target.features)?), l)),
            None => None,
        };
        history.push(EpochRecord {
            epoch,
            class_loss: class_sum / per_epoch as f64,
            adapt_loss: adapt_sum / per_epoch as f64,
            lr: epoch_lr,
            source_acc,
            target_acc,
        });
    }
    Ok((bl, history))
}
