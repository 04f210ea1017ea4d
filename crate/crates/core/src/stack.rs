//! Stacked ensemble: three adapted base learners are trained on the train
//! split, their class probabilities on the validation split become the
//! inputs of a small meta network, and the meta network produces the final
//! prediction.

use serde::{Deserialize, Serialize};

use crate::adapt::{train_base, Architecture, BaseLearner, History, TrainConfig};
use crate::data::{split, Domain, LabeledSet, SplitPlan};
use crate::discrepancy::DiscrepancyMethod;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{argmax_rows, fit_classifier, predict, softmax, FitEpoch, Mlp, SgdConfig};
use crate::rng::{derive_seed, seeded};

pub const N_BASES: usize = 3;
pub const META_HIDDEN: usize = 64;

/// Anything that maps feature rows to class probabilities.
pub trait Classifier {
    fn predict_proba(&self, x: &Matrix) -> Result<Matrix>;
    fn n_classes(&self) -> usize;
}

impl Classifier for BaseLearner {
    fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        BaseLearner::predict_proba(self, x)
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackedModel {
    /// Fixed order: conditional MMD, low-rank, CORAL.
    pub bases: Vec<BaseLearner>,
    pub meta: Mlp,
}

impl Classifier for StackedModel {
    fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        Ok(predict_stack(self, x)?.0)
    }

    fn n_classes(&self) -> usize {
        self.meta.output_dim()
    }
}

/// Method and training settings of one base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseConfig {
    pub method: DiscrepancyMethod,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    /// `None` picks [`Architecture::desk_scale`] for the data's width.
    pub architecture: Option<Architecture>,
    pub bases: Vec<BaseConfig>,
    pub meta: SgdConfig,
    /// Domain whose labeled validation rows fit the meta network.
    pub validation_domain: Domain,
    /// Root seed; base and meta seeds are derived from it.
    pub seed: u64,
    pub parallel: bool,
}

impl Default for StackConfig {
    fn default() -> Self {
        let base = |method| BaseConfig {
            method,
            train: TrainConfig::default(),
        };
        Self {
            architecture: None,
            bases: vec![
                base(DiscrepancyMethod::cmmd()),
                base(DiscrepancyMethod::lowrank()),
                base(DiscrepancyMethod::Coral),
            ],
            meta: SgdConfig::default(),
            validation_domain: Domain::Source,
            seed: 0,
            parallel: true,
        }
    }
}

/// Splits of both domains used by one stacking run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackPlan {
    pub source: SplitPlan,
    pub target: SplitPlan,
}

impl StackPlan {
    pub fn new(
        source: &LabeledSet,
        target: &LabeledSet,
        fractions: [f64; 3],
        group_respecting: bool,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            source: split(
                source,
                fractions,
                group_respecting,
                derive_seed(seed, "split-source"),
            )?,
            target: split(
                target,
                fractions,
                group_respecting,
                derive_seed(seed, "split-target"),
            )?,
        })
    }

    /// Held-out target rows, with labels if the target carries them.
    pub fn target_test(&self, target: &LabeledSet) -> LabeledSet {
        target.subset(&self.target.test)
    }
}

/// Seed of base `i` under root seed `root`.
pub fn base_seed(root: u64, i: usize) -> u64 {
    derive_seed(root, &format!("base{i}"))
}

/// What happened during [`fit_stack`], for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct StackReport {
    pub base_histories: Vec<History>,
    pub meta_history: Vec<FitEpoch>,
    pub degenerate_plan: bool,
}

/// `[p₁ | p₂ | p₃]`, the bases' class probabilities side by side.
pub fn meta_features(bases: &[BaseLearner], x: &Matrix) -> Result<Matrix> {
    if bases.len() != N_BASES {
        return Err(Error::Config(format!(
            "stacking needs exactly {N_BASES} bases, got {}",
            bases.len()
        )));
    }
    let blocks = bases
        .iter()
        .map(|b| b.predict_proba(x))
        .collect::<Result<Vec<_>>>()?;
    Matrix::hstack(&blocks.iter().collect::<Vec<_>>())
}

/// Trains one base from scratch with its derived seed.
pub fn train_one_base(
    index: usize,
    cfg: &StackConfig,
    arch: &Architecture,
    n_classes: usize,
    source: &LabeledSet,
    target: &LabeledSet,
) -> Result<(BaseLearner, History)> {
    let bc = &cfg.bases[index];
    let seed = base_seed(cfg.seed, index);
    let run = || -> Result<(BaseLearner, History)> {
        let bl = BaseLearner::new(
            arch,
            n_classes,
            bc.method.clone(),
            &mut seeded(derive_seed(seed, "init")),
        )?;
        let mut train = bc.train;
        train.sgd.seed = seed;
        train_base(bl, source, target, &train)
    };
    run().map_err(|e| Error::BaseTraining {
        base: format!("{index} ({})", bc.method.tag()),
        source: Box::new(e),
    })
}

/// Steps: train the bases on the train splits (source labeled, target
/// unlabeled), build meta features on the validation split, fit the meta
/// network on them. Test rows are never touched.
pub fn fit_stack(
    source: &LabeledSet,
    target: &LabeledSet,
    plan: &StackPlan,
    cfg: &StackConfig,
) -> Result<(StackedModel, StackReport)> {
    if cfg.bases.len() != N_BASES {
        return Err(Error::Config(format!(
            "stacking needs exactly {N_BASES} bases, got {}",
            cfg.bases.len()
        )));
    }
    plan.source.validate_for(source)?;
    plan.target.validate_for(target)?;
    let n_classes = source.n_classes().max(2);
    let arch = cfg
        .architecture
        .clone()
        .unwrap_or_else(|| Architecture::desk_scale(source.n_features()));

    let source_train = source.subset(&plan.source.train);
    let target_train = target.subset(&plan.target.train);
    let (validation, degenerate_plan) = match cfg.validation_domain {
        Domain::Source => (
            source.subset(&plan.source.validation),
            plan.source.is_degenerate(),
        ),
        Domain::Target => (
            target.subset(&plan.target.validation),
            plan.target.is_degenerate(),
        ),
    };
    if validation.is_empty() {
        return Err(Error::Protocol("validation split is empty".into()));
    }
    let val_labels = validation
        .labels
        .as_deref()
        .ok_or_else(|| Error::Protocol("validation split carries no labels".into()))?;
    if degenerate_plan {
        log::warn!("validation split equals the train split; meta features will be optimistic");
    }

    let train = |i| train_one_base(i, cfg, &arch, n_classes, &source_train, &target_train);
    let results: Vec<Result<(BaseLearner, History)>> = if cfg.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..N_BASES).map(|i| s.spawn(move || train(i))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("base training thread panicked"))
                .collect()
        })
    } else {
        (0..N_BASES).map(train).collect()
    };
    let mut bases = Vec::with_capacity(N_BASES);
    let mut base_histories = Vec::with_capacity(N_BASES);
    for r in results {
        let (bl, h) = r?;
        bases.push(bl);
        base_histories.push(h);
    }

    let z = meta_features(&bases, &validation.features)?;
    let meta_seed = derive_seed(cfg.seed, "meta");
    let mut meta = Mlp::new(
        &[N_BASES * n_classes, META_HIDDEN, n_classes],
        &mut seeded(meta_seed),
    )?;
    let meta_cfg = SgdConfig {
        seed: meta_seed,
        ..cfg.meta
    };
    let meta_history = fit_classifier(&mut meta, &z, val_labels, &meta_cfg)?;

    Ok((
        StackedModel { bases, meta },
        StackReport {
            base_histories,
            meta_history,
            degenerate_plan,
        },
    ))
}

/// Meta softmax over the bases' probabilities, plus argmax labels.
pub fn predict_stack(m: &StackedModel, x: &Matrix) -> Result<(Matrix, Vec<usize>)> {
    let z = meta_features(&m.bases, x)?;
    let proba = softmax(&predict(&m.meta, &z)?);
    let labels = argmax_rows(&proba);
    Ok((proba, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl Evaluation {
    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

/// Accuracy and confusion counts against the set's labels.
pub fn evaluate<C: Classifier + ?Sized>(model: &C, set: &LabeledSet) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::Degenerate {
            op: "evaluate",
            reason: "empty set".into(),
        });
    }
    let truth = set.labels_or_err()?;
    let predicted = argmax_rows(&model.predict_proba(&set.features)?);
    confusion_from(truth, &predicted, model.n_classes())
}

pub fn confusion_from(
    truth: &[usize],
    predicted: &[usize],
    n_classes: usize,
) -> Result<Evaluation> {
    if truth.len() != predicted.len() {
        return Err(Error::shape("confusion", truth.len(), predicted.len()));
    }
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        let bad = if t >= n_classes { t } else { p };
        if bad >= n_classes {
            return Err(Error::LabelOutOfRange {
                label: bad,
                n_classes,
            });
        }
        confusion[t][p] += 1;
    }
    let hits: u64 = (0..n_classes).map(|i| confusion[i][i]).sum();
    let total: u64 = confusion.iter().flatten().sum();
    Ok(Evaluation {
        accuracy: if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        },
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Dense};

    fn tiny_base(seed: u64) -> BaseLearner {
        let arch = Architecture {
            input_dim: 2,
            shared: vec![4],
            branches: vec![vec![3], vec![2]],
            classifier_hidden: vec![],
        };
        BaseLearner::new(&arch, 3, DiscrepancyMethod::Coral, &mut seeded(seed)).unwrap()
    }

    #[test]
    fn meta_features_width_and_blocks() {
        let bases = vec![tiny_base(1), tiny_base(2), tiny_base(3)];
        let x = Matrix::from_fn(5, 2, |i, j| i as f64 * 0.3 - j as f64);
        let z = meta_features(&bases, &x).unwrap();
        assert_eq!(z.shape(), (5, 9));
        for (k, b) in bases.iter().enumerate() {
            assert_eq!(z.column_block(3 * k, 3), b.predict_proba(&x).unwrap());
        }
        assert!(matches!(
            meta_features(&bases[..2], &x),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn identical_bases_give_identical_blocks() {
        let b = tiny_base(4);
        let z = meta_features(&[b.clone(), b.clone(), b], &Matrix::zeros(2, 2)).unwrap();
        assert_eq!(z.column_block(0, 3), z.column_block(3, 3));
        assert_eq!(z.column_block(0, 3), z.column_block(6, 3));
    }

    #[test]
    fn zero_meta_is_uniform() {
        let meta = Mlp::from_layers(vec![
            Dense::zeros(9, META_HIDDEN, Activation::Relu),
            Dense::zeros(META_HIDDEN, 3, Activation::None),
        ])
        .unwrap();
        let m = StackedModel {
            bases: vec![tiny_base(1), tiny_base(2), tiny_base(3)],
            meta,
        };
        let (p, labels) = predict_stack(&m, &Matrix::from_fn(4, 2, |i, _| i as f64)).unwrap();
        assert!(p.as_slice().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(labels, vec![0; 4]);
    }

    #[test]
    fn confusion_counts() {
        let e = confusion_from(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert_eq!(e.confusion, vec![vec![2, 0], vec![0, 2]]);
        let e = confusion_from(&[0, 1, 0, 1], &[0, 0, 0, 0], 2).unwrap();
        assert_eq!(e.accuracy, 0.5);
        assert_eq!(e.total(), 4);
        assert!(confusion_from(&[0], &[5], 2).is_err());
    }
}
