//! Gradient-check cases shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use artic::features::{FeatureKind, FeatureMatrix, INVENTORY_SIZE};
use artic::models::{AttentionConfig, AttentionModel, BlstmConfig, BlstmModel, Ctx};
use artic::numerics::{grad_check, grad_check_values, GradCheckReport, Gradients, ParameterStore, Tape, Tensor, Var};
use artic::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn store(seed: u64, shapes: &[&[usize]]) -> ParameterStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParameterStore::new();
    for (i, shape) in shapes.iter().enumerate() {
        s.insert(format!("p{i}"), random_tensor(&mut rng, shape, 1.0)).unwrap();
    }
    s
}

/// Gradient check of `op` under a squared-error readout against a fixed target.
fn check_op(store: &ParameterStore, op: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> GradCheckReport {
    grad_check(store, EPS, |s| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = s.ids().map(|id| tape.param(s, id)).collect();
        let y = op(&mut tape, &vars)?;
        let n = tape.value(y).len();
        let target = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
        let l = tape.sse(y, target, vec![1.0; n])?;
        let g = tape.backward(&[(l, 1.0)], s.len());
        Ok((tape.scalar(l), g))
    })
    .unwrap()
}

/// Relative errors of every differentiable tape operation at one seed.
pub fn layer_checks(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    let mut out = Vec::new();
    let mut add = |name, err| out.push((name, err));
    add("matmul", check_op(&store(seed, &[&[3, 4], &[4, 2]]), |t, v| t.matmul(v[0], v[1])));
    add("linear", check_op(&store(seed, &[&[3, 4], &[5, 4], &[5]]), |t, v| t.linear(v[0], v[1], Some(v[2]))));
    add("add", check_op(&store(seed, &[&[3, 2], &[3, 2]]), |t, v| t.add(v[0], v[1])));
    add("add_row", check_op(&store(seed, &[&[3, 2], &[2]]), |t, v| t.add_row(v[0], v[1])));
    add("sub", check_op(&store(seed, &[&[3, 2], &[3, 2]]), |t, v| t.sub(v[0], v[1])));
    add("mul", check_op(&store(seed, &[&[3, 2], &[3, 2]]), |t, v| t.mul(v[0], v[1])));
    add(
        "mul_const",
        check_op(&store(seed, &[&[2, 3]]), |t, v| t.mul_const(v[0], vec![0.5, -2.0, 0.0, 1.5, 3.0, -1.0])),
    );
    add("scale", check_op(&store(seed, &[&[2, 3]]), |t, v| Ok(t.scale(v[0], -1.7))));
    add("tanh", check_op(&store(seed, &[&[2, 3]]), |t, v| Ok(t.tanh(v[0]))));
    add("sigmoid", check_op(&store(seed, &[&[2, 3]]), |t, v| Ok(t.sigmoid(v[0]))));
    add(
        "relu",
        check_op(&store(seed, &[&[2, 3]]), |t, v| {
            // shift away from the kink so finite differences stay on one side
            let shifted = t.mul_const(v[0], vec![1.0; 6])?;
            let c = t.constant(Tensor::row_vector(vec![0.0; 3]));
            let y = t.add_row(shifted, c)?;
            Ok(t.relu(y))
        }),
    );
    add("softmax", check_op(&store(seed, &[&[5, 1]]), |t, v| t.softmax(v[0])));
    add("concat_cols", check_op(&store(seed, &[&[3, 2], &[3, 1]]), |t, v| t.concat_cols(&[v[0], v[1]])));
    add("concat_rows", check_op(&store(seed, &[&[2, 3], &[1, 3]]), |t, v| t.concat_rows(&[v[0], v[1]])));
    add("slice_cols", check_op(&store(seed, &[&[3, 4]]), |t, v| t.slice_cols(v[0], 1, 2)));
    add("slice_rows", check_op(&store(seed, &[&[4, 3]]), |t, v| t.slice_rows(v[0], 1, 2)));
    add("transpose", check_op(&store(seed, &[&[2, 3]]), |t, v| Ok(t.transpose(v[0]))));
    add("sum", check_op(&store(seed, &[&[2, 3]]), |t, v| Ok(t.sum(v[0]))));
    add("conv1d", check_op(&store(seed, &[&[6, 3], &[4, 5, 3], &[4]]), |t, v| t.conv1d(v[0], v[1], Some(v[2]))));
    add(
        "batch_norm_train",
        check_op(&store(seed, &[&[6, 3], &[3], &[3]]), |t, v| t.batch_norm_train(v[0], v[1], v[2], "bn")),
    );
    add(
        "batch_norm_infer",
        check_op(&store(seed, &[&[6, 3], &[3], &[3]]), |t, v| {
            t.batch_norm_infer(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.7, 2.0])
        }),
    );
    for reverse in [false, true] {
        add(
            if reverse { "lstm_sequence_reverse" } else { "lstm_sequence" },
            check_op(&store(seed, &[&[5, 3], &[8, 3], &[8, 2], &[8]]), move |t, v| {
                t.lstm_sequence(v[0], v[1], v[2], v[3], reverse)
            }),
        );
    }
    add(
        "lstm_cell",
        check_op(&store(seed, &[&[1, 3], &[1, 2], &[1, 2], &[8, 3], &[8, 2], &[8]]), |t, v| {
            t.lstm_cell(v[0], v[1], v[2], v[3], v[4], v[5])
        }),
    );
    add(
        "bce_logits",
        check_op(&store(seed, &[&[4, 1]]), |t, v| {
            t.bce_logits(v[0], vec![0.0, 0.0, 0.0, 1.0], vec![1.0, 1.0, 0.0, 1.0], 5.0)
        }),
    );
    out
}

fn rmse_terms(tape: &mut Tape, y: Var, target: &Tensor) -> Result<(Var, f64)> {
    let n = target.len();
    let sse = tape.sse(y, target.data().to_vec(), vec![1.0; n])?;
    Ok((sse, n as f64))
}

pub fn tiny_blstm(seed: u64) -> BlstmModel {
    BlstmModel::new(
        BlstmConfig {
            input_dim: 5,
            hidden: 4,
            layers: 3,
        },
        seed,
    )
    .unwrap()
}

/// Masked-RMSE gradient check of the whole BLSTM regressor.
pub fn blstm_model_check(seed: u64) -> GradCheckReport {
    let model = tiny_blstm(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = random_tensor(&mut rng, &[7, 5], 1.0);
    let y_true = random_tensor(&mut rng, &[7, 12], 1.0);
    let run = |s: &ParameterStore, grads: bool| -> Result<(f64, Option<Gradients>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = model.forward_on(&mut tape, s, xv)?;
        let (sse, n) = rmse_terms(&mut tape, y, &y_true)?;
        let l = (tape.scalar(sse) / n).sqrt();
        let g = grads.then(|| tape.backward(&[(sse, 1.0 / (2.0 * l * n))], s.len()));
        Ok((l, g))
    };
    let grads = run(&model.params, true).unwrap().1.unwrap();
    grad_check_values(&model.params, EPS, &grads, |s| Ok(run(s, false)?.0)).unwrap()
}

pub fn random_phn(rng: &mut ChaCha8Rng, phonemes: usize) -> FeatureMatrix {
    let mut rows = Tensor::zeros(&[phonemes + 1, INVENTORY_SIZE]);
    rows.set(0, 0, 1.0);
    for r in 1..=phonemes {
        rows.set(r, rng.gen_range(1..INVENTORY_SIZE), 1.0);
    }
    FeatureMatrix::new(rows, FeatureKind::Phn).unwrap()
}

/// Gradient check of the attention objective (pre- and post-net RMSE plus
/// weighted stop cross-entropy) with batch-norm in training mode.
pub fn attention_model_check(seed: u64) -> GradCheckReport {
    let model = AttentionModel::new(AttentionConfig::tiny(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa77e);
    let phn = random_phn(&mut rng, 4);
    let y_true = random_tensor(&mut rng, &[6, 12], 1.0);
    let run = |s: &ParameterStore, grads: bool| -> Result<(f64, Option<Gradients>)> {
        let mut tape = Tape::new();
        let v = model.teacher_forced_on(&mut tape, s, phn.rows(), &y_true, &mut Ctx::train(None))?;
        let (pre, n) = rmse_terms(&mut tape, v.y_pre, &y_true)?;
        let (post, _) = rmse_terms(&mut tape, v.y_post, &y_true)?;
        let steps = v.alphas.len();
        let mut target = vec![0.0; steps];
        target[steps - 1] = 1.0;
        let stop = tape.bce_logits(v.stop_logits, target, vec![1.0; steps], 5.0)?;
        let lp = (tape.scalar(pre) / n).sqrt();
        let lq = (tape.scalar(post) / n).sqrt();
        let ls = tape.scalar(stop) / steps as f64;
        let g = grads.then(|| {
            tape.backward(
                &[(pre, 1.0 / (2.0 * lp * n)), (post, 1.0 / (2.0 * lq * n)), (stop, 1.0 / steps as f64)],
                s.len(),
            )
        });
        Ok((lp + lq + ls, g))
    };
    let grads = run(&model.params, true).unwrap().1.unwrap();
    grad_check_values(&model.params, EPS, &grads, |s| Ok(run(s, false)?.0)).unwrap()
}
