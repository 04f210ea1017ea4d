//! Experiment configuration: a TOML file, overridden by command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use dastack_core::adapt::{Architecture, TrainConfig};
use dastack_core::data::{generate_shift_pair, load_csv, Generator, ShiftSpec};
use dastack_core::discrepancy::DiscrepancyMethod;
use dastack_core::lowrank::AlmConfig;
use dastack_core::nn::SgdConfig;
use dastack_core::rng::derive_seed;
use dastack_core::stack::{StackConfig, StackPlan};
use dastack_core::{Domain, LabeledSet};

use crate::CliError;

/// Method tags in base-slot order.
pub const BASE_TAGS: [&str; 3] = ["cmmd", "lowrank", "coral"];

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub split: SplitConfig,
    /// Applies to every base.
    pub train: TrainOverrides,
    /// Per-base overrides keyed by slot tag (`cmmd`, `lowrank`, `coral`).
    pub bases: BTreeMap<String, TrainOverrides>,
    pub meta: SgdOverrides,
    pub architecture: Option<Architecture>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// CSV files; when both are set the generator is not used.
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub generator: Option<Generator>,
    pub n_classes: Option<usize>,
    pub n_per_class: Option<usize>,
    pub rotation_deg: Option<f64>,
    pub translation: Option<Vec<f64>>,
    pub noise_sd: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub fractions: Option<[f64; 3]>,
    pub group_respecting: Option<bool>,
    pub validation_domain: Option<Domain>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdOverrides {
    pub eta0: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub momentum: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
}

impl SgdOverrides {
    fn apply(&self, cfg: &mut SgdConfig) {
        set(&mut cfg.eta0, self.eta0);
        set(&mut cfg.alpha, self.alpha);
        set(&mut cfg.beta, self.beta);
        set(&mut cfg.momentum, self.momentum);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.epochs, self.epochs);
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    /// Replaces the slot's discrepancy, e.g. `mmd` in the `cmmd` slot.
    pub method: Option<String>,
    pub lambda: Option<f64>,
    pub warmup_epochs: Option<usize>,
    pub pseudo_refresh: Option<bool>,
    pub alm: Option<AlmConfig>,
    pub eta0: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub momentum: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, method: &mut DiscrepancyMethod, cfg: &mut TrainConfig) -> Result<(), CliError> {
        if let Some(tag) = &self.method {
            *method = DiscrepancyMethod::from_tag(tag)?;
        }
        if let (Some(alm), DiscrepancyMethod::LowRank { alm: slot }) = (self.alm, &mut *method) {
            *slot = alm;
        }
        set(&mut cfg.lambda_tradeoff, self.lambda);
        set(&mut cfg.warmup_epochs, self.warmup_epochs);
        set(&mut cfg.pseudo_refresh, self.pseudo_refresh);
        SgdOverrides {
            eta0: self.eta0,
            alpha: self.alpha,
            beta: self.beta,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs: self.epochs,
        }
        .apply(&mut cfg.sgd);
        Ok(())
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Flags shared by `train`, `stack` and `ablate`; they win over the file.
#[derive(Debug, Clone, Default)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub lambda: Option<f64>,
}

/// Everything a run needs, fully resolved.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub source: LabeledSet,
    pub target: LabeledSet,
    pub plan: StackPlan,
    pub stack: StackConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.source, &mut cfg.data.target]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load_optional(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn shift_spec(&self, seed: u64) -> ShiftSpec {
        let d = &self.data;
        let mut spec = ShiftSpec {
            seed: derive_seed(seed, "data"),
            ..ShiftSpec::default()
        };
        set(&mut spec.generator, d.generator);
        set(&mut spec.n_classes, d.n_classes);
        set(&mut spec.n_per_class, d.n_per_class);
        set(&mut spec.rotation_deg, d.rotation_deg);
        set(&mut spec.translation, d.translation.clone());
        set(&mut spec.noise_sd, d.noise_sd);
        if spec.generator == Generator::Moons && d.n_classes.is_none() {
            spec.n_classes = 2;
        }
        spec
    }

    pub fn resolve(&self, flags: &FlagOverrides) -> Result<Experiment, CliError> {
        let seed = flags.seed.or(self.seed).unwrap_or(0);
        let out_dir = flags
            .out_dir
            .clone()
            .or_else(|| self.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("."));

        let (source, target) = match (&self.data.source, &self.data.target) {
            (Some(s), Some(t)) => (load_csv(s)?, load_csv(t)?),
            (None, None) => generate_shift_pair(&self.shift_spec(seed))?,
            _ => {
                return Err(CliError::Usage(
                    "data.source and data.target must be given together".into(),
                ))
            }
        };
        if source.labels.is_none() {
            return Err(CliError::Usage("source data must carry labels".into()));
        }

        let fractions = self.split.fractions.unwrap_or([0.6, 0.2, 0.2]);
        let group_respecting = self.split.group_respecting.unwrap_or(true);
        let plan = StackPlan::new(
            &source,
            &target,
            fractions,
            group_respecting,
            derive_seed(seed, "split"),
        )?;

        let mut stack = StackConfig {
            architecture: self.architecture.clone(),
            validation_domain: self.split.validation_domain.unwrap_or(Domain::Source),
            seed,
            ..StackConfig::default()
        };
        self.meta.apply(&mut stack.meta);
        for (slot, tag) in stack.bases.iter_mut().zip(BASE_TAGS) {
            self.train.apply(&mut slot.method, &mut slot.train)?;
            if let Some(o) = self.bases.get(tag) {
                o.apply(&mut slot.method, &mut slot.train)?;
            }
            set(&mut slot.train.sgd.epochs, flags.epochs);
            set(&mut slot.train.lambda_tradeoff, flags.lambda);
            if slot.train.warmup_epochs > slot.train.sgd.epochs {
                slot.train.warmup_epochs = slot.train.sgd.epochs;
            }
        }
        if let Some(key) = self.bases.keys().find(|k| !BASE_TAGS.contains(&k.as_str())) {
            return Err(CliError::Usage(format!(
                "unknown base `{key}`; expected one of {BASE_TAGS:?}"
            )));
        }
        set(&mut stack.meta.epochs, flags.epochs);

        Ok(Experiment {
            seed,
            out_dir,
            source,
            target,
            plan,
            stack,
        })
    }
}

/// Slot that a method tag trains in, which fixes its derived seed.
pub fn slot_for(tag: &str) -> Result<usize, CliError> {
    match tag {
        "cmmd" | "mmd" => Ok(0),
        "lowrank" => Ok(1),
        "coral" => Ok(2),
        other => Err(CliError::Usage(format!(
            "unknown method `{other}`; expected mmd, cmmd, lowrank or coral"
        ))),
    }
}

/// Row name used in metrics files.
pub fn display_name(method: &DiscrepancyMethod) -> &'static str {
    match method {
        DiscrepancyMethod::Mmd { .. } => "B_MMD",
        DiscrepancyMethod::Cmmd { .. } => "B_CMMD",
        DiscrepancyMethod::LowRank { .. } => "B_Lowrank",
        DiscrepancyMethod::Coral => "B_Coral",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beats_default() {
        let cfg: ExperimentConfig = toml::from_str(
            r#"
            seed = 3
            [data]
            n_per_class = 10
            [train]
            epochs = 4
            [bases.coral]
            lambda = 0.5
            "#,
        )
        .unwrap();
        let e = cfg.resolve(&FlagOverrides::default()).unwrap();
        assert_eq!(e.seed, 3);
        assert_eq!(e.stack.bases[2].train.sgd.epochs, 4);
        assert_eq!(e.stack.bases[2].train.lambda_tradeoff, 0.5);
        assert_eq!(e.stack.bases[0].train.lambda_tradeoff, 1.0);
        assert_eq!(e.source.len(), 40);

        let flags = FlagOverrides {
            seed: Some(9),
            lambda: Some(0.0),
            ..Default::default()
        };
        let e = cfg.resolve(&flags).unwrap();
        assert_eq!(e.seed, 9);
        assert!(e.stack.bases.iter().all(|b| b.train.lambda_tradeoff == 0.0));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("sed = 1").is_err());
        let cfg: ExperimentConfig = toml::from_str("[bases.foo]\nlambda = 1.0").unwrap();
        assert!(cfg.resolve(&FlagOverrides::default()).is_err());
    }

    #[test]
    fn method_slots() {
        assert_eq!(slot_for("mmd").unwrap(), 0);
        assert_eq!(slot_for("coral").unwrap(), 2);
        assert!(slot_for("svm").is_err());
    }
}
