//! JSON checkpoints for trained base learners and stacked models.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{BaseLearner, TrainConfig};
use crate::discrepancy::DiscrepancyMethod;
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Mlp, SgdConfig};
use crate::stack::{StackConfig, StackedModel};

pub const FORMAT_VERSION: u32 = 1;

/// Layer shapes plus parameters in layer order (weights row-major, then bias).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub architecture: Vec<LayerSpec>,
    pub params: Vec<f64>,
}

impl NetCheckpoint {
    pub fn from_net(net: &Mlp) -> Self {
        Self {
            architecture: net.architecture(),
            params: net.flat_params(),
        }
    }

    pub fn to_net(&self) -> Result<Mlp> {
        Mlp::from_architecture(&self.architecture, &self.params)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseCheckpoint {
    pub format_version: u32,
    pub method: DiscrepancyMethod,
    pub n_classes: usize,
    pub shared: NetCheckpoint,
    pub substructures: Vec<NetCheckpoint>,
    pub classifier: NetCheckpoint,
    pub train: TrainConfig,
    pub seed: u64,
}

impl BaseCheckpoint {
    pub fn new(bl: &BaseLearner, train: &TrainConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            method: bl.method.clone(),
            n_classes: bl.n_classes,
            shared: NetCheckpoint::from_net(&bl.g),
            substructures: bl
                .substructures
                .iter()
                .map(NetCheckpoint::from_net)
                .collect(),
            classifier: NetCheckpoint::from_net(&bl.f),
            train: *train,
            seed: train.sgd.seed,
        }
    }

    pub fn restore(&self) -> Result<BaseLearner> {
        check_version(self.format_version)?;
        let subs = self
            .substructures
            .iter()
            .map(NetCheckpoint::to_net)
            .collect::<Result<Vec<_>>>()?;
        BaseLearner::from_parts(
            self.shared.to_net()?,
            subs,
            self.classifier.to_net()?,
            self.method.clone(),
            self.n_classes,
        )
        .map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackCheckpoint {
    pub format_version: u32,
    pub bases: Vec<BaseCheckpoint>,
    pub meta: NetCheckpoint,
    pub meta_sgd: SgdConfig,
    pub config: StackConfig,
    pub seed: u64,
}

impl StackCheckpoint {
    /// Base training configs are echoed with the seeds each base actually used.
    pub fn new(model: &StackedModel, cfg: &StackConfig) -> Self {
        let bases = model
            .bases
            .iter()
            .zip(&cfg.bases)
            .enumerate()
            .map(|(i, (bl, bc))| {
                let mut train = bc.train;
                train.sgd.seed = crate::stack::base_seed(cfg.seed, i);
                BaseCheckpoint::new(bl, &train)
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            bases,
            meta: NetCheckpoint::from_net(&model.meta),
            meta_sgd: cfg.meta,
            config: cfg.clone(),
            seed: cfg.seed,
        }
    }

    pub fn restore(&self) -> Result<StackedModel> {
        check_version(self.format_version)?;
        Ok(StackedModel {
            bases: self
                .bases
                .iter()
                .map(BaseCheckpoint::restore)
                .collect::<Result<_>>()?,
            meta: self.meta.to_net()?,
        })
    }
}

fn check_version(v: u32) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format_version {v}, expected {FORMAT_VERSION}"
        )));
    }
    Ok(())
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn from_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn load<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    from_json(&text)
}
