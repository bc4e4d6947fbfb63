use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{blstm, insert_lstm, param};
use crate::corpus::NUM_CHANNELS;
use crate::error::{Error, Result};
use crate::numerics::{ParameterStore, Tape, Tensor, Var};

/// Stacked bidirectional LSTM with a per-frame affine head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlstmConfig {
    pub input_dim: usize,
    /// Hidden units per direction.
    pub hidden: usize,
    pub layers: usize,
}

impl Default for BlstmConfig {
    fn default() -> Self {
        Self {
            input_dim: 40,
            hidden: 256,
            layers: 3,
        }
    }
}

impl BlstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::config("blstm dimensions must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlstmModel {
    pub config: BlstmConfig,
    pub params: ParameterStore,
}

impl BlstmModel {
    pub fn new(config: BlstmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        let h = config.hidden;
        for l in 0..config.layers {
            let input = if l == 0 { config.input_dim } else { 2 * h };
            for dir in ["fwd", "bwd"] {
                insert_lstm(&mut params, &format!("blstm.{l}.{dir}"), input, h, &mut rng)?;
            }
        }
        params.insert_uniform("head.w", &[NUM_CHANNELS, 2 * h], 2 * h, &mut rng)?;
        params.insert("head.b", Tensor::zeros(&[NUM_CHANNELS]))?;
        Ok(Self { config, params })
    }

    /// Records the forward pass of `x` (`T × input_dim`) and returns `T × 12`.
    pub fn forward_on(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let width = tape.value(x).cols();
        if width != self.config.input_dim {
            return Err(Error::dim(format!(
                "blstm expects {} input columns, got {width}",
                self.config.input_dim
            )));
        }
        let mut h = x;
        for l in 0..self.config.layers {
            h = blstm(tape, store, &format!("blstm.{l}"), h)?;
        }
        let w = param(tape, store, "head.w")?;
        let b = param(tape, store, "head.b")?;
        tape.linear(h, w, Some(b))
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        if features.rows() == 0 {
            return Err(Error::dim("blstm input has no frames"));
        }
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let y = self.forward_on(&mut tape, &self.params, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Frame-synchronous prediction, `T × D_in` → `T × 12`.
pub fn blstm_forward(features: &Tensor, model: &BlstmModel) -> Result<Tensor> {
    model.forward(features)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::numerics::{blstm_layer, BlstmLayerParams, LstmParams};

    fn tiny() -> BlstmModel {
        BlstmModel::new(
            BlstmConfig {
                input_dim: 3,
                hidden: 4,
                layers: 3,
            },
            11,
        )
        .unwrap()
    }

    fn input(t: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(t, 3, (0..t * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn lstm(store: &ParameterStore, prefix: &str) -> LstmParams {
        let v = |s: &str| store.get(&format!("{prefix}.{s}")).unwrap().value.clone();
        LstmParams {
            w_ih: v("w_ih"),
            w_hh: v("w_hh"),
            bias: v("b"),
        }
    }

    #[test]
    fn shape_and_width_check() {
        let m = tiny();
        assert_eq!(blstm_forward(&input(7, 1), &m).unwrap().shape(), &[7, 12]);
        assert_eq!(blstm_forward(&input(1, 1), &m).unwrap().shape(), &[1, 12]);
        assert!(blstm_forward(&Tensor::zeros(&[5, 4]), &m).is_err());
    }

    #[test]
    fn matches_layer_composition() {
        let m = tiny();
        let x = input(6, 2);
        let mut h = x.clone();
        for l in 0..3 {
            let p = BlstmLayerParams {
                forward: lstm(&m.params, &format!("blstm.{l}.fwd")),
                backward: lstm(&m.params, &format!("blstm.{l}.bwd")),
            };
            h = blstm_layer(&h, &p).unwrap();
        }
        let w = &m.params.get("head.w").unwrap().value;
        let rows: Vec<Vec<f64>> = h
            .iter_rows()
            .map(|r| crate::numerics::affine(r, w, &[0.0; 12]).unwrap())
            .collect();
        let expected = Tensor::from_rows(&rows).unwrap();
        assert!(blstm_forward(&x, &m).unwrap().max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn last_frame_reaches_first_output() {
        let m = tiny();
        let x = input(6, 3);
        let mut moved = x.clone();
        moved.set(5, 0, x.get(5, 0) + 0.5);
        let a = blstm_forward(&x, &m).unwrap();
        let b = blstm_forward(&moved, &m).unwrap();
        assert!((0..12).any(|c| (a.get(0, c) - b.get(0, c)).abs() > 1e-9));
    }

    #[test]
    fn deterministic_construction() {
        let cfg = tiny().config;
        assert_eq!(BlstmModel::new(cfg, 11).unwrap(), tiny());
        assert_ne!(BlstmModel::new(cfg, 12).unwrap(), tiny());
    }
}
