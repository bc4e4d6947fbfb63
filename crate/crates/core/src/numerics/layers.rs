//! Value-level entry points for the individual layers.
//!
//! Each function records the corresponding operation on a scratch [`Tape`],
//! so the values here are produced by exactly the code the models train with.

use rand::Rng;

use super::{tape::softmax_tensor, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl LstmCellState {
    pub fn zeros(h: usize) -> Self {
        Self {
            hidden: vec![0.0; h],
            cell: vec![0.0; h],
        }
    }
}

/// Weights of one LSTM direction. Gate order along the rows is `[i, f, g, o]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// `4H × I`
    pub w_ih: Tensor,
    /// `4H × H`
    pub w_hh: Tensor,
    /// `4H`
    pub bias: Tensor,
}

impl LstmParams {
    pub fn hidden(&self) -> usize {
        self.w_hh.cols()
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Tensor::zeros(&[4 * hidden, input]),
            w_hh: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    /// Uniform ±1/√fan_in weights with the forget-gate bias set to 1.
    pub fn random<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((input + hidden) as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-bound..=bound)).collect() };
        let w_ih = Tensor::matrix(4 * hidden, input, draw(4 * hidden * input)).expect("shape");
        let w_hh = Tensor::matrix(4 * hidden, hidden, draw(4 * hidden * hidden)).expect("shape");
        let mut bias = draw(4 * hidden);
        bias[hidden..2 * hidden].fill(1.0);
        Self {
            w_ih,
            w_hh,
            bias: Tensor::new(vec![4 * hidden], bias).expect("shape"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlstmLayerParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

/// `weights · x + bias`
pub fn affine(x: &[f64], weights: &Tensor, bias: &[f64]) -> Result<Vec<f64>> {
    if weights.shape().len() != 2 {
        return Err(Error::dim("affine weights must be a matrix"));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::row_vector(x.to_vec()));
    let w = tape.constant(weights.clone());
    let b = tape.constant(Tensor::row_vector(bias.to_vec()));
    let y = tape.linear(xv, w, Some(b))?;
    Ok(tape.value(y).data().to_vec())
}

pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    Ok(softmax_tensor(&Tensor::row_vector(scores.to_vec()))?.into_data())
}

pub fn lstm_cell_step(x: &[f64], state: &LstmCellState, params: &LstmParams) -> Result<LstmCellState> {
    let h = params.hidden();
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::row_vector(x.to_vec()));
    let hv = tape.constant(Tensor::row_vector(state.hidden.clone()));
    let cv = tape.constant(Tensor::row_vector(state.cell.clone()));
    let wi = tape.constant(params.w_ih.clone());
    let wh = tape.constant(params.w_hh.clone());
    let b = tape.constant(params.bias.clone());
    let out = tape.lstm_cell(xv, hv, cv, wi, wh, b)?;
    let data = tape.value(out).data();
    Ok(LstmCellState {
        hidden: data[..h].to_vec(),
        cell: data[h..].to_vec(),
    })
}

/// Bidirectional LSTM over a sequence; each output row is `[forward_t, backward_t]`.
pub fn blstm_layer(xs: &Tensor, params: &BlstmLayerParams) -> Result<Tensor> {
    if xs.rows() == 0 {
        return Err(Error::dim("blstm over an empty sequence"));
    }
    let mut tape = Tape::new();
    let x = tape.constant(xs.clone());
    let y = blstm_on_tape(&mut tape, x, params)?;
    Ok(tape.value(y).clone())
}

fn blstm_on_tape(tape: &mut Tape, x: super::Var, params: &BlstmLayerParams) -> Result<super::Var> {
    let run = |p: &LstmParams, reverse: bool, tape: &mut Tape| -> Result<super::Var> {
        let wi = tape.constant(p.w_ih.clone());
        let wh = tape.constant(p.w_hh.clone());
        let b = tape.constant(p.bias.clone());
        tape.lstm_sequence(x, wi, wh, b, reverse)
    };
    let f = run(&params.forward, false, tape)?;
    let b = run(&params.backward, true, tape)?;
    tape.concat_cols(&[f, b])
}

/// Same-padded stride-1 convolution. `kernel` is `C_out × K × C_in`.
pub fn conv1d(xs: &Tensor, kernel: &Tensor, bias: Option<&[f64]>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(xs.clone());
    let w = tape.constant(kernel.clone());
    let b = bias.map(|b| tape.constant(Tensor::row_vector(b.to_vec())));
    let y = tape.conv1d(x, w, b)?;
    Ok(tape.value(y).clone())
}

pub enum BatchNormMode<'a> {
    Train,
    Infer { mean: &'a [f64], var: &'a [f64] },
}

pub fn batchnorm1d(xs: &Tensor, gamma: &[f64], beta: &[f64], mode: BatchNormMode<'_>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(xs.clone());
    let g = tape.constant(Tensor::row_vector(gamma.to_vec()));
    let b = tape.constant(Tensor::row_vector(beta.to_vec()));
    let y = match mode {
        BatchNormMode::Train => tape.batch_norm_train(x, g, b, "bn")?,
        BatchNormMode::Infer { mean, var } => tape.batch_norm_infer(x, g, b, mean, var)?,
    };
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn affine_identity_and_bias() {
        let eye = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(affine(&[1.0, 2.0], &eye, &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        let zero = Tensor::zeros(&[1, 2]);
        assert_eq!(affine(&[7.0, -3.0], &zero, &[3.0]).unwrap(), vec![3.0]);
    }

    #[test]
    fn affine_three_by_two_by_hand() {
        let w = Tensor::from_rows(&[[0.5, -1.0], [2.0, 0.25], [-0.75, 1.5]]).unwrap();
        let y = affine(&[2.0, -4.0], &w, &[0.1, 0.2, 0.3]).unwrap();
        // 0.5*2 - 1*(-4) + 0.1 ; 2*2 + 0.25*(-4) + 0.2 ; -0.75*2 + 1.5*(-4) + 0.3
        let expected = [5.1, 3.2, -7.2];
        for (a, b) in y.iter().zip(expected) {
            assert!(close(*a, b, 1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn affine_shape_mismatch() {
        let w = Tensor::zeros(&[2, 3]);
        assert!(affine(&[1.0, 2.0], &w, &[0.0, 0.0]).is_err());
        assert!(affine(&[1.0, 2.0, 3.0], &w, &[0.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0, 0.0]).unwrap();
        assert!(s.iter().all(|v| close(*v, 1.0 / 3.0, 1e-15)));
        for c in [-50.0, 0.0, 13.7, 700.0] {
            assert_eq!(softmax(&[c, c]).unwrap(), vec![0.5, 0.5]);
        }
        let e = [1f64.exp(), 2f64.exp(), 3f64.exp()];
        let z: f64 = e.iter().sum();
        let s = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (a, b) in s.iter().zip(e) {
            assert!(close(*a, b / z, 1e-15));
        }
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn lstm_zero_params_zero_hidden() {
        let p = LstmParams::zeros(3, 4);
        let s = lstm_cell_step(&[1.0, -2.0, 0.5], &LstmCellState::zeros(4), &p).unwrap();
        assert!(s.hidden.iter().all(|h| *h == 0.0));
    }

    #[test]
    fn lstm_hidden_stays_in_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let mut p = LstmParams::random(3, 5, &mut rng);
            p.w_ih.data_mut().iter_mut().for_each(|w| *w *= 10.0);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let state = LstmCellState {
                hidden: (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                cell: (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            };
            let s = lstm_cell_step(&x, &state, &p).unwrap();
            assert!(s.hidden.iter().all(|h| h.abs() < 1.0));
        }
    }

    #[test]
    fn lstm_single_unit_by_hand() {
        // gates rows: i, f, g, o
        let p = LstmParams {
            w_ih: Tensor::matrix(4, 1, vec![0.5, -0.3, 0.8, 0.1]).unwrap(),
            w_hh: Tensor::matrix(4, 1, vec![0.2, 0.4, -0.6, 0.7]).unwrap(),
            bias: Tensor::new(vec![4], vec![0.1, 1.0, 0.0, -0.2]).unwrap(),
        };
        let (x, h0, c0) = (1.5, -0.4, 0.3);
        let i = sig(0.5 * x + 0.2 * h0 + 0.1);
        let f = sig(-0.3 * x + 0.4 * h0 + 1.0);
        let g = (0.8 * x - 0.6 * h0).tanh();
        let o = sig(0.1 * x + 0.7 * h0 - 0.2);
        let c = f * c0 + i * g;
        let h = o * c.tanh();
        let s = lstm_cell_step(&[x], &LstmCellState { hidden: vec![h0], cell: vec![c0] }, &p).unwrap();
        assert!(close(s.cell[0], c, 1e-14));
        assert!(close(s.hidden[0], h, 1e-14));
        assert!(lstm_cell_step(&[x, x], &LstmCellState::zeros(1), &p).is_err());
    }

    fn random_seq(rng: &mut ChaCha8Rng, t: usize, i: usize) -> Tensor {
        Tensor::matrix(t, i, (0..t * i).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Runs one direction step by step with `lstm_cell_step`.
    fn unroll(xs: &Tensor, p: &LstmParams) -> Vec<Vec<f64>> {
        let mut s = LstmCellState::zeros(p.hidden());
        xs.iter_rows()
            .map(|x| {
                s = lstm_cell_step(x, &s, p).unwrap();
                s.hidden.clone()
            })
            .collect()
    }

    fn reversed(xs: &Tensor) -> Tensor {
        let mut rows = xs.to_rows();
        rows.reverse();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn blstm_matches_two_unrolled_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = BlstmLayerParams {
            forward: LstmParams::random(2, 3, &mut rng),
            backward: LstmParams::random(2, 3, &mut rng),
        };
        let xs = random_seq(&mut rng, 5, 2);
        let out = blstm_layer(&xs, &params).unwrap();
        let fwd = unroll(&xs, &params.forward);
        let bwd = unroll(&reversed(&xs), &params.backward);
        for t in 0..5 {
            let row = out.row(t);
            for j in 0..3 {
                assert!(close(row[j], fwd[t][j], 1e-14));
                assert!(close(row[3 + j], bwd[4 - t][j], 1e-14));
            }
        }
    }

    #[test]
    fn blstm_shapes_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = BlstmLayerParams {
            forward: LstmParams::random(2, 4, &mut rng),
            backward: LstmParams::random(2, 4, &mut rng),
        };
        let out = blstm_layer(&random_seq(&mut rng, 1, 2), &params).unwrap();
        assert_eq!(out.shape(), &[1, 8]);
        assert!(blstm_layer(&Tensor::zeros(&[0, 2]), &params).is_err());
    }

    #[test]
    fn blstm_reversal_swaps_halves_with_tied_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = LstmParams::random(2, 3, &mut rng);
        let params = BlstmLayerParams {
            forward: p.clone(),
            backward: p,
        };
        // palindrome of length 3
        let a = [0.3, -0.7];
        let b = [0.9, 0.1];
        let pal = Tensor::from_rows(&[a, b, a]).unwrap();
        let out = blstm_layer(&pal, &params).unwrap();
        for t in 0..3 {
            for j in 0..3 {
                assert!(close(out.get(t, j), out.get(2 - t, 3 + j), 1e-14));
            }
        }
        // arbitrary sequence: reversing the input reverses time and swaps halves
        let xs = random_seq(&mut rng, 4, 2);
        let o1 = blstm_layer(&xs, &params).unwrap();
        let o2 = blstm_layer(&reversed(&xs), &params).unwrap();
        for t in 0..4 {
            for j in 0..3 {
                assert!(close(o1.get(t, j), o2.get(3 - t, 3 + j), 1e-14));
                assert!(close(o1.get(t, 3 + j), o2.get(3 - t, j), 1e-14));
            }
        }
    }

    #[test]
    fn conv1d_identity_and_averaging() {
        let xs = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let eye = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(conv1d(&xs, &eye, None).unwrap(), xs);

        let constant = Tensor::filled(&[6, 1], 2.0);
        let avg = Tensor::filled(&[1, 3, 1], 1.0 / 3.0);
        let y = conv1d(&constant, &avg, None).unwrap();
        for t in 1..5 {
            assert!(close(y.get(t, 0), 2.0, 1e-15));
        }
        // edges see one zero-padded tap
        assert!(close(y.get(0, 0), 4.0 / 3.0, 1e-15));
        assert!(close(y.get(5, 0), 4.0 / 3.0, 1e-15));
    }

    #[test]
    fn conv1d_even_kernel_rejected() {
        let xs = Tensor::zeros(&[4, 1]);
        let k = Tensor::zeros(&[1, 2, 1]);
        assert!(matches!(conv1d(&xs, &k, None), Err(Error::Config(_))));
    }

    #[test]
    fn batchnorm_examples() {
        let xs = Tensor::from_rows(&[[-1.0, 1.0], [1.0, -1.0]]).unwrap();
        let y = batchnorm1d(&xs, &[1.0, 1.0], &[0.0, 0.0], BatchNormMode::Train).unwrap();
        assert!(y.max_abs_diff(&xs) < 1e-5);

        let constant = Tensor::from_rows(&[[3.0], [3.0], [3.0]]).unwrap();
        let y = batchnorm1d(&constant, &[2.0], &[0.5], BatchNormMode::Train).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.5));

        // two frames [2, 6]: mean 4, biased var 4
        let two = Tensor::from_rows(&[[2.0], [6.0]]).unwrap();
        let y = batchnorm1d(&two, &[3.0], &[1.0], BatchNormMode::Train).unwrap();
        let s = (4.0f64 + 1e-5).sqrt();
        assert!(close(y.get(0, 0), 3.0 * (-2.0 / s) + 1.0, 1e-12));
        assert!(close(y.get(1, 0), 3.0 * (2.0 / s) + 1.0, 1e-12));

        let single = Tensor::from_rows(&[[1.0]]).unwrap();
        assert!(batchnorm1d(&single, &[1.0], &[0.0], BatchNormMode::Train).is_err());
        let y = batchnorm1d(
            &single,
            &[1.0],
            &[0.0],
            BatchNormMode::Infer {
                mean: &[0.5],
                var: &[0.25],
            },
        )
        .unwrap();
        assert!(close(y.get(0, 0), 0.5 / (0.25f64 + 1e-5).sqrt(), 1e-12));
    }
}
