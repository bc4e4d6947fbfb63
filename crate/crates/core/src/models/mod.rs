//! The frame-synchronous BLSTM regressor and the location-sensitive attention
//! encoder-decoder.

mod attention;
mod blstm;

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureKind;
use crate::numerics::{BatchStats, Container, LstmParams, ParameterStore, Tape, Tensor, Var};

pub use attention::{
    AttentionConfig, AttentionModel, AttentionState, DecoderMode, InferenceOutput, LocationChannels,
    Memory, TeacherForcedOutput, TeacherForcedVars,
};
pub use blstm::{blstm_forward, BlstmConfig, BlstmModel};

/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

/// Forward-pass settings: batch-norm statistics source and dropout.
pub struct Ctx<'a> {
    /// Batch statistics (true) or running statistics (false).
    pub train: bool,
    /// Dropout is applied only when a generator is supplied in train mode.
    pub dropout: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    pub fn infer() -> Self {
        Self {
            train: false,
            dropout: None,
        }
    }

    pub fn train(dropout: Option<&'a mut ChaCha8Rng>) -> Self {
        Self { train: true, dropout }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Blstm,
    Attention,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Blstm => "blstm",
            Self::Attention => "attention",
        }
    }

    /// The estimator each input representation is paired with.
    pub fn for_features(kind: FeatureKind) -> Self {
        match kind {
            FeatureKind::Phn => Self::Attention,
            _ => Self::Blstm,
        }
    }

    pub fn check_pairing(self, kind: FeatureKind) -> Result<()> {
        if Self::for_features(kind) != self {
            return Err(Error::config(format!(
                "{kind} features cannot be used with the {} model (PHN pairs with attention; TPHN, MFCC and MFCC_TPHN with BLSTM)",
                self.name()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "blstm" => Ok(Self::Blstm),
            "attention" => Ok(Self::Attention),
            other => Err(Error::config(format!("unknown model kind {other:?} (expected blstm or attention)"))),
        }
    }
}

/// Either estimator with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Blstm(BlstmModel),
    Attention(AttentionModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Blstm(_) => ModelKind::Blstm,
            Self::Attention(_) => ModelKind::Attention,
        }
    }

    pub fn params(&self) -> &ParameterStore {
        match self {
            Self::Blstm(m) => &m.params,
            Self::Attention(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        match self {
            Self::Blstm(m) => &mut m.params,
            Self::Attention(m) => &mut m.params,
        }
    }

    pub fn config_json(&self) -> Result<serde_json::Value> {
        let v = match self {
            Self::Blstm(m) => serde_json::to_value(&m.config),
            Self::Attention(m) => serde_json::to_value(&m.config),
        };
        v.map_err(|e| Error::Checkpoint(e.to_string()))
    }

    /// Parameters under `param:` and buffers under `buffer:`, with the model
    /// kind and configuration in the metadata.
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.set_meta("model_kind", self.kind())?;
        c.set_meta("model_config", self.config_json()?)?;
        for (_, p) in self.params().iter() {
            c.push(format!("param:{}", p.name), p.value.clone());
        }
        for (name, t) in self.params().buffers() {
            c.push(format!("buffer:{name}"), t.clone());
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let kind: ModelKind = c.meta("model_kind")?;
        let config: serde_json::Value = c.meta("model_config")?;
        let bad = |e: serde_json::Error| Error::Checkpoint(format!("model config: {e}"));
        let mut model = match kind {
            ModelKind::Blstm => Self::Blstm(BlstmModel::new(serde_json::from_value(config).map_err(bad)?, 0)?),
            ModelKind::Attention => {
                Self::Attention(AttentionModel::new(serde_json::from_value(config).map_err(bad)?, 0)?)
            }
        };
        let store = model.params_mut();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.param(id).name.clone();
            let t = c
                .get(&format!("param:{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != store.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = t.clone();
        }
        let names: Vec<String> = store.buffers().map(|(n, _)| n.clone()).collect();
        if let Some(name) = names.iter().find(|n| c.get(&format!("buffer:{n}")).is_none()) {
            return Err(Error::Checkpoint(format!("checkpoint lacks buffer {name}")));
        }
        for (name, t) in &c.tensors {
            if let Some(b) = name.strip_prefix("buffer:") {
                store.set_buffer(b, t.clone());
            }
        }
        Ok(model)
    }
}

/// Inserts one LSTM direction under `prefix` (`.w_ih`, `.w_hh`, `.b`).
pub(crate) fn insert_lstm(
    store: &mut ParameterStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let p = LstmParams::random(input, hidden, rng);
    store.insert(format!("{prefix}.w_ih"), p.w_ih)?;
    store.insert(format!("{prefix}.w_hh"), p.w_hh)?;
    store.insert(format!("{prefix}.b"), p.bias)?;
    Ok(())
}

/// Inserts batch-norm scale/shift and running statistics under `prefix`.
pub(crate) fn insert_batch_norm(store: &mut ParameterStore, prefix: &str, channels: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Tensor::filled(&[channels], 1.0))?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]))?;
    store.set_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]));
    store.set_buffer(format!("{prefix}.running_var"), Tensor::filled(&[channels], 1.0));
    Ok(())
}

pub(crate) fn param(tape: &mut Tape, store: &ParameterStore, name: &str) -> Result<Var> {
    tape.param_by_name(store, name)
}

pub(crate) fn lstm_sequence(tape: &mut Tape, store: &ParameterStore, prefix: &str, x: Var, reverse: bool) -> Result<Var> {
    let wi = param(tape, store, &format!("{prefix}.w_ih"))?;
    let wh = param(tape, store, &format!("{prefix}.w_hh"))?;
    let b = param(tape, store, &format!("{prefix}.b"))?;
    tape.lstm_sequence(x, wi, wh, b, reverse)
}

pub(crate) fn blstm(tape: &mut Tape, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let f = lstm_sequence(tape, store, &format!("{prefix}.fwd"), x, false)?;
    let b = lstm_sequence(tape, store, &format!("{prefix}.bwd"), x, true)?;
    tape.concat_cols(&[f, b])
}

pub(crate) fn batch_norm(tape: &mut Tape, store: &ParameterStore, prefix: &str, x: Var, ctx: &Ctx<'_>) -> Result<Var> {
    let g = param(tape, store, &format!("{prefix}.gamma"))?;
    let b = param(tape, store, &format!("{prefix}.beta"))?;
    if ctx.train {
        return tape.batch_norm_train(x, g, b, prefix);
    }
    let buf = |s: &str| {
        store
            .buffer(&format!("{prefix}.{s}"))
            .ok_or_else(|| Error::config(format!("missing batch-norm buffer {prefix}.{s}")))
    };
    let (mean, var) = (buf("running_mean")?, buf("running_var")?);
    tape.batch_norm_infer(x, g, b, mean.data(), var.data())
}

/// Folds observed batch statistics into the running statistics, in order.
pub fn update_running_stats(store: &mut ParameterStore, stats: &[BatchStats], momentum: f64) -> Result<()> {
    for s in stats {
        for (key, obs) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let name = format!("{}.{key}", s.layer);
            let mut t = store
                .buffer(&name)
                .cloned()
                .ok_or_else(|| Error::config(format!("missing batch-norm buffer {name}")))?;
            for (r, o) in t.data_mut().iter_mut().zip(obs) {
                *r = (1.0 - momentum) * *r + momentum * o;
            }
            store.set_buffer(name, t);
        }
    }
    Ok(())
}

/// Inverted dropout with keep-probability `1 − p`; identity without a generator.
pub(crate) fn dropout(tape: &mut Tape, x: Var, p: f64, ctx: &mut Ctx<'_>) -> Result<Var> {
    use rand::Rng;
    let Some(rng) = ctx.dropout.as_deref_mut() else {
        return Ok(x);
    };
    if !ctx.train || p <= 0.0 {
        return Ok(x);
    }
    let n = tape.value(x).len();
    let keep = 1.0 - p;
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    tape.mul_const(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairing_rules() {
        assert!(ModelKind::Attention.check_pairing(FeatureKind::Phn).is_ok());
        assert!(ModelKind::Blstm.check_pairing(FeatureKind::Phn).is_err());
        assert!(ModelKind::Attention.check_pairing(FeatureKind::Tphn).is_err());
        for k in [FeatureKind::Tphn, FeatureKind::Mfcc, FeatureKind::MfccTphn] {
            assert!(ModelKind::Blstm.check_pairing(k).is_ok());
        }
        assert_eq!("BLSTM".parse::<ModelKind>().unwrap(), ModelKind::Blstm);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParameterStore::new();
        insert_batch_norm(&mut store, "bn", 2).unwrap();
        let stats = BatchStats {
            layer: "bn".into(),
            mean: vec![1.0, -1.0],
            var: vec![3.0, 1.0],
        };
        update_running_stats(&mut store, &[stats], 0.1).unwrap();
        assert_eq!(store.buffer("bn.running_mean").unwrap().data(), &[0.1, -0.1]);
        assert!((store.buffer("bn.running_var").unwrap().data()[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn container_roundtrip_restores_everything() {
        let cfg = BlstmConfig { input_dim: 5, hidden: 3, layers: 2 };
        let mut m = Model::Blstm(BlstmModel::new(cfg, 4).unwrap());
        m.params_mut().set_buffer("extra", Tensor::zeros(&[1]));
        let c = Container::from_bytes(&m.to_container().unwrap().to_bytes().unwrap()).unwrap();
        assert_eq!(Model::from_container(&c).unwrap(), m);
    }
}
