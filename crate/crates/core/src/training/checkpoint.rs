use std::path::Path;

use super::{Optimizer, TrainingConfig};
use crate::error::{Error, Result};
use crate::features::FeatureKind;
use crate::models::Model;
use crate::numerics::Container;

/// Model parameters with the optimizer state and bookkeeping needed to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Optimizer,
    pub feature_kind: FeatureKind,
    /// Epoch at which these parameters were taken (0 = untrained).
    pub epoch: usize,
    pub valid_rmse: f64,
    pub training: TrainingConfig,
    /// Hash of the model architecture and feature kind; changes whenever the
    /// parameter layout would.
    pub fingerprint: String,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Architecture fingerprint of `model` fed with `kind` features.
pub fn fingerprint(model: &Model, kind: FeatureKind) -> Result<String> {
    let text = format!("{}|{}|{}", model.kind(), kind, model.config_json()?);
    Ok(format!("{:016x}", fnv1a(text.as_bytes())))
}

impl Checkpoint {
    pub fn new(model: Model, optimizer: Optimizer, kind: FeatureKind, training: TrainingConfig) -> Result<Self> {
        let fingerprint = fingerprint(&model, kind)?;
        Ok(Self {
            model,
            optimizer,
            feature_kind: kind,
            epoch: 0,
            valid_rmse: f64::NAN,
            training,
            fingerprint,
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = self.model.to_container()?;
        self.optimizer.write_to(&mut c, self.model.params())?;
        c.set_meta("feature_kind", self.feature_kind)?;
        c.set_meta("epoch", self.epoch)?;
        // NaN is not representable in JSON; an untrained checkpoint stores null
        c.set_meta("valid_rmse", self.valid_rmse.is_finite().then_some(self.valid_rmse))?;
        c.set_meta("training", &self.training)?;
        c.set_meta("fingerprint", &self.fingerprint)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let model = Model::from_container(c)?;
        let optimizer = Optimizer::read_from(c, model.params())?;
        let feature_kind: FeatureKind = c.meta("feature_kind")?;
        let fp: String = c.meta("fingerprint")?;
        if fp != fingerprint(&model, feature_kind)? {
            return Err(Error::Checkpoint("fingerprint does not match the stored architecture".into()));
        }
        let valid: Option<f64> = c.meta("valid_rmse")?;
        Ok(Self {
            model,
            optimizer,
            feature_kind,
            epoch: c.meta("epoch")?,
            valid_rmse: valid.unwrap_or(f64::NAN),
            training: c.meta("training")?,
            fingerprint: fp,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
