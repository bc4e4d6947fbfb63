use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_norm, blstm, dropout, insert_batch_norm, insert_lstm, param, Ctx};
use crate::corpus::NUM_CHANNELS;
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureMatrix, INVENTORY_SIZE};
use crate::numerics::{LstmCellState, ParameterStore, Tape, Tensor, Var};

/// Inputs to the location convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LocationChannels {
    /// Previous attention weights only.
    #[serde(rename = "prev")]
    Prev,
    /// Previous and cumulative attention weights.
    #[default]
    #[serde(rename = "prev+cum")]
    PrevCum,
}

impl LocationChannels {
    pub fn count(self) -> usize {
        match self {
            Self::Prev => 1,
            Self::PrevCum => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub embedding_dim: usize,
    pub encoder_convs: usize,
    pub encoder_kernel: usize,
    pub attention_dim: usize,
    pub location_filters: usize,
    pub location_kernel: usize,
    pub location_channels: LocationChannels,
    pub prenet_dim: usize,
    pub prenet_dropout: f64,
    pub decoder_dim: usize,
    pub decoder_layers: usize,
    pub postnet_channels: usize,
    pub postnet_layers: usize,
    pub postnet_kernel: usize,
    /// Frames emitted per decoder step.
    pub reduction: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 512,
            encoder_convs: 3,
            encoder_kernel: 5,
            attention_dim: 128,
            location_filters: 32,
            location_kernel: 31,
            location_channels: LocationChannels::PrevCum,
            prenet_dim: 256,
            prenet_dropout: 0.5,
            decoder_dim: 1024,
            decoder_layers: 2,
            postnet_channels: 512,
            postnet_layers: 5,
            postnet_kernel: 5,
            reduction: 1,
        }
    }
}

impl AttentionConfig {
    /// Small dimensions for tests and desk-scale experiments.
    pub fn tiny() -> Self {
        Self {
            embedding_dim: 8,
            encoder_convs: 3,
            encoder_kernel: 5,
            attention_dim: 8,
            location_filters: 4,
            location_kernel: 31,
            location_channels: LocationChannels::PrevCum,
            prenet_dim: 8,
            prenet_dropout: 0.5,
            decoder_dim: 16,
            decoder_layers: 2,
            postnet_channels: 8,
            postnet_layers: 5,
            postnet_kernel: 5,
            reduction: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embedding_dim", self.embedding_dim),
            ("encoder_kernel", self.encoder_kernel),
            ("attention_dim", self.attention_dim),
            ("location_filters", self.location_filters),
            ("location_kernel", self.location_kernel),
            ("prenet_dim", self.prenet_dim),
            ("decoder_dim", self.decoder_dim),
            ("decoder_layers", self.decoder_layers),
            ("postnet_channels", self.postnet_channels),
            ("postnet_layers", self.postnet_layers),
            ("postnet_kernel", self.postnet_kernel),
            ("reduction", self.reduction),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("attention.{name} must be positive")));
            }
        }
        if self.embedding_dim % 2 != 0 {
            return Err(Error::config("attention.embedding_dim must be even (split across BLSTM directions)"));
        }
        for (name, k) in [
            ("encoder_kernel", self.encoder_kernel),
            ("location_kernel", self.location_kernel),
            ("postnet_kernel", self.postnet_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::config(format!("attention.{name} must be odd")));
            }
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return Err(Error::config("attention.prenet_dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Encoder outputs and their projection into the attention space.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    /// `N × E`
    pub enc: Var,
    /// `N × A`, the `V e_n` term.
    pub keys: Var,
    pub tokens: usize,
}

/// Tape handles of a teacher-forced pass.
#[derive(Clone, Debug)]
pub struct TeacherForcedVars {
    /// `T × 12`
    pub y_pre: Var,
    /// `T × 12`
    pub y_post: Var,
    /// One logit per decoder step, `steps × 1`.
    pub stop_logits: Var,
    /// Attention weights per decoder step, each `N × 1`.
    pub alphas: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherForcedOutput {
    pub y_pre: Tensor,
    pub y_post: Tensor,
    /// Stop probability per decoder step.
    pub stops: Vec<f64>,
    /// `T × N`
    pub alphas: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceOutput {
    pub y_pre: Tensor,
    pub y_post: Tensor,
    pub stops: Vec<f64>,
    /// `T × N`
    pub alphas: Tensor,
}

/// Decoder recurrence carried between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState {
    pub alpha_prev: Vec<f64>,
    pub alpha_cum: Vec<f64>,
    /// One state per decoder LSTM layer; the last hidden vector is the query.
    pub lstm: Vec<LstmCellState>,
    /// Last frame emitted by the decoder.
    pub y_prev: Vec<f64>,
    pub context_prev: Vec<f64>,
}

impl AttentionState {
    /// Records `alpha` as the latest attention weights.
    pub fn with_attention(mut self, alpha: &[f64]) -> Result<Self> {
        if alpha.len() != self.alpha_prev.len() {
            return Err(Error::dim("attention weights do not match the token count"));
        }
        self.alpha_prev = alpha.to_vec();
        for (c, a) in self.alpha_cum.iter_mut().zip(alpha) {
            *c += a;
        }
        Ok(self)
    }

    fn query(&self) -> &[f64] {
        &self.lstm.last().expect("at least one decoder layer").hidden
    }
}

/// Source of the pre-net input at a decoder step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderMode {
    /// Ground-truth previous frame.
    Teacher,
    /// The decoder's own previous output.
    Free,
}

/// Location-sensitive attention encoder-decoder with a residual post-net.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionModel {
    pub config: AttentionConfig,
    pub params: ParameterStore,
}

fn one_hot_column(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, 1]);
    t.data_mut()[0] = 1.0;
    t
}

impl AttentionModel {
    pub fn new(config: AttentionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterStore::new();
        let e = c.embedding_dim;
        p.insert_uniform("encoder.embedding.w", &[e, INVENTORY_SIZE], 1, &mut rng)?;
        for i in 0..c.encoder_convs {
            p.insert_uniform(format!("encoder.conv.{i}.w"), &[e, c.encoder_kernel, e], c.encoder_kernel * e, &mut rng)?;
            insert_batch_norm(&mut p, &format!("encoder.bn.{i}"), e)?;
        }
        for dir in ["fwd", "bwd"] {
            insert_lstm(&mut p, &format!("encoder.blstm.{dir}"), e, e / 2, &mut rng)?;
        }

        let (a, kf, d) = (c.attention_dim, c.location_filters, c.decoder_dim);
        let ch = c.location_channels.count();
        p.insert_uniform("attention.query.w", &[a, d], d, &mut rng)?;
        p.insert_uniform("attention.memory.w", &[a, e], e, &mut rng)?;
        p.insert_uniform("attention.location.w", &[a, kf], kf, &mut rng)?;
        p.insert_uniform("attention.location.filter", &[kf, c.location_kernel, ch], c.location_kernel * ch, &mut rng)?;
        p.insert_uniform("attention.v", &[1, a], a, &mut rng)?;
        p.insert("attention.b", Tensor::zeros(&[a]))?;

        let pn = c.prenet_dim;
        p.insert_uniform("decoder.prenet.0.w", &[pn, NUM_CHANNELS], NUM_CHANNELS, &mut rng)?;
        // non-zero biases keep the zero start frame off the ReLU kink
        p.insert_uniform("decoder.prenet.0.b", &[pn], NUM_CHANNELS, &mut rng)?;
        p.insert_uniform("decoder.prenet.1.w", &[pn, pn], pn, &mut rng)?;
        p.insert_uniform("decoder.prenet.1.b", &[pn], pn, &mut rng)?;
        for l in 0..c.decoder_layers {
            let input = if l == 0 { pn + e } else { d };
            insert_lstm(&mut p, &format!("decoder.lstm.{l}"), input, d, &mut rng)?;
        }
        p.insert_uniform("decoder.out.w", &[NUM_CHANNELS * c.reduction, d + e], d + e, &mut rng)?;
        p.insert("decoder.out.b", Tensor::zeros(&[NUM_CHANNELS * c.reduction]))?;
        p.insert_uniform("decoder.stop.w", &[1, d + e], d + e, &mut rng)?;
        p.insert("decoder.stop.b", Tensor::zeros(&[1]))?;

        for i in 0..c.postnet_layers {
            let c_in = if i == 0 { NUM_CHANNELS } else { c.postnet_channels };
            let c_out = if i + 1 == c.postnet_layers { NUM_CHANNELS } else { c.postnet_channels };
            p.insert_uniform(format!("postnet.conv.{i}.w"), &[c_out, c.postnet_kernel, c_in], c.postnet_kernel * c_in, &mut rng)?;
            insert_batch_norm(&mut p, &format!("postnet.bn.{i}"), c_out)?;
        }
        Ok(Self { config, params: p })
    }

    fn check_phn(phn: &Tensor) -> Result<()> {
        if phn.rows() == 0 {
            return Err(Error::dim("phoneme sequence is empty"));
        }
        if phn.cols() != INVENTORY_SIZE {
            return Err(Error::dim(format!(
                "phoneme rows must have width {INVENTORY_SIZE}, got {}",
                phn.cols()
            )));
        }
        for (i, r) in phn.iter_rows().enumerate() {
            let ones = r.iter().filter(|v| **v == 1.0).count();
            if ones != 1 || r.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(Error::data(format!("phoneme row {i} is not one-hot")));
            }
        }
        Ok(())
    }

    /// Embedding, convolution stack and BLSTM over the token axis.
    pub fn encode_on(&self, tape: &mut Tape, store: &ParameterStore, phn: &Tensor, ctx: &mut Ctx<'_>) -> Result<Var> {
        Self::check_phn(phn)?;
        let x = tape.constant(phn.clone());
        let w = param(tape, store, "encoder.embedding.w")?;
        let mut h = tape.linear(x, w, None)?;
        for i in 0..self.config.encoder_convs {
            let k = param(tape, store, &format!("encoder.conv.{i}.w"))?;
            h = tape.conv1d(h, k, None)?;
            h = batch_norm(tape, store, &format!("encoder.bn.{i}"), h, ctx)?;
            h = tape.relu(h);
        }
        blstm(tape, store, "encoder.blstm", h)
    }

    pub fn memory_on(&self, tape: &mut Tape, store: &ParameterStore, enc: Var) -> Result<Memory> {
        let v = param(tape, store, "attention.memory.w")?;
        let keys = tape.linear(enc, v, None)?;
        Ok(Memory {
            enc,
            keys,
            tokens: tape.value(enc).rows(),
        })
    }

    /// Attention weights (`N × 1`) and context (`1 × E`) for one step.
    pub fn attend_on(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        mem: &Memory,
        query: Var,
        alpha_prev: Var,
        alpha_cum: Var,
    ) -> Result<(Var, Var)> {
        if tape.value(alpha_prev).len() != mem.tokens || tape.value(alpha_cum).len() != mem.tokens {
            return Err(Error::dim(format!(
                "attention state covers {} tokens, encoder produced {}",
                tape.value(alpha_prev).len(),
                mem.tokens
            )));
        }
        let loc_in = match self.config.location_channels {
            LocationChannels::Prev => alpha_prev,
            LocationChannels::PrevCum => tape.concat_cols(&[alpha_prev, alpha_cum])?,
        };
        let filter = param(tape, store, "attention.location.filter")?;
        let f = tape.conv1d(loc_in, filter, None)?;
        let u = param(tape, store, "attention.location.w")?;
        let uf = tape.linear(f, u, None)?;
        let w = param(tape, store, "attention.query.w")?;
        let b = param(tape, store, "attention.b")?;
        let wq = tape.linear(query, w, Some(b))?;
        let pre = tape.add(mem.keys, uf)?;
        let pre = tape.add_row(pre, wq)?;
        let act = tape.tanh(pre);
        let v = param(tape, store, "attention.v")?;
        let scores = tape.linear(act, v, None)?;
        let alpha = tape.softmax(scores)?;
        let at = tape.transpose(alpha);
        let g = tape.matmul(at, mem.enc)?;
        Ok((alpha, g))
    }

    /// One decoder step: pre-net, LSTM stack, frame and stop projections.
    /// `states` holds `(h, c)` per layer and is advanced in place.
    pub fn decode_on(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        prev_frame: Var,
        g: Var,
        states: &mut [(Var, Var)],
        ctx: &mut Ctx<'_>,
    ) -> Result<(Var, Var)> {
        let mut p = prev_frame;
        for i in 0..2 {
            let w = param(tape, store, &format!("decoder.prenet.{i}.w"))?;
            let b = param(tape, store, &format!("decoder.prenet.{i}.b"))?;
            p = tape.linear(p, w, Some(b))?;
            p = tape.relu(p);
            p = dropout(tape, p, self.config.prenet_dropout, ctx)?;
        }
        let mut x = tape.concat_cols(&[p, g])?;
        let d = self.config.decoder_dim;
        for (l, state) in states.iter_mut().enumerate() {
            let prefix = format!("decoder.lstm.{l}");
            let wi = param(tape, store, &format!("{prefix}.w_ih"))?;
            let wh = param(tape, store, &format!("{prefix}.w_hh"))?;
            let b = param(tape, store, &format!("{prefix}.b"))?;
            let hc = tape.lstm_cell(x, state.0, state.1, wi, wh, b)?;
            let h = tape.slice_cols(hc, 0, d)?;
            let c = tape.slice_cols(hc, d, d)?;
            *state = (h, c);
            x = h;
        }
        let dg = tape.concat_cols(&[x, g])?;
        let ow = param(tape, store, "decoder.out.w")?;
        let ob = param(tape, store, "decoder.out.b")?;
        let y = tape.linear(dg, ow, Some(ob))?;
        let sw = param(tape, store, "decoder.stop.w")?;
        let sb = param(tape, store, "decoder.stop.b")?;
        let stop = tape.linear(dg, sw, Some(sb))?;
        Ok((y, stop))
    }

    /// Residual refinement: returns `y + postnet(y)`.
    pub fn postnet_on(&self, tape: &mut Tape, store: &ParameterStore, y: Var, ctx: &mut Ctx<'_>) -> Result<Var> {
        let mut h = y;
        let n = self.config.postnet_layers;
        for i in 0..n {
            let k = param(tape, store, &format!("postnet.conv.{i}.w"))?;
            h = tape.conv1d(h, k, None)?;
            h = batch_norm(tape, store, &format!("postnet.bn.{i}"), h, ctx)?;
            if i + 1 < n {
                h = tape.tanh(h);
            }
        }
        tape.add(y, h)
    }

    fn initial_vars(&self, tape: &mut Tape, tokens: usize) -> (Var, Var, Vec<(Var, Var)>, Var) {
        let alpha = tape.constant(one_hot_column(tokens));
        let cum = tape.constant(one_hot_column(tokens));
        let d = self.config.decoder_dim;
        let states = (0..self.config.decoder_layers)
            .map(|_| {
                let h = tape.constant(Tensor::zeros(&[1, d]));
                let c = tape.constant(Tensor::zeros(&[1, d]));
                (h, c)
            })
            .collect();
        let frame = tape.constant(Tensor::zeros(&[1, NUM_CHANNELS]));
        (alpha, cum, states, frame)
    }

    /// Splits per-step outputs (`1 × 12r` each) into a `T × 12` node.
    fn stack_frames(&self, tape: &mut Tape, steps: &[Var], frames: usize) -> Result<Var> {
        let r = self.config.reduction;
        let mut rows = Vec::with_capacity(steps.len() * r);
        for &y in steps {
            if r == 1 {
                rows.push(y);
            } else {
                for k in 0..r {
                    rows.push(tape.slice_cols(y, k * NUM_CHANNELS, NUM_CHANNELS)?);
                }
            }
        }
        let all = tape.concat_rows(&rows)?;
        if rows.len() == frames {
            Ok(all)
        } else {
            tape.slice_rows(all, 0, frames)
        }
    }

    /// Teacher-forced pass over the whole target; the decoder input at step
    /// `s` is the last ground-truth frame of step `s − 1` (zeros at `s = 0`).
    pub fn teacher_forced_on(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        phn: &Tensor,
        y_true: &Tensor,
        ctx: &mut Ctx<'_>,
    ) -> Result<TeacherForcedVars> {
        let t_len = y_true.rows();
        if t_len == 0 || y_true.cols() != NUM_CHANNELS {
            return Err(Error::dim(format!("teacher trajectory must be T×{NUM_CHANNELS} with T ≥ 1")));
        }
        let enc = self.encode_on(tape, store, phn, ctx)?;
        let mem = self.memory_on(tape, store, enc)?;
        let (mut alpha, mut cum, mut states, mut frame) = self.initial_vars(tape, mem.tokens);
        let r = self.config.reduction;
        let steps = t_len.div_ceil(r);
        let (mut ys, mut stops, mut alphas) = (Vec::new(), Vec::new(), Vec::new());
        for s in 0..steps {
            let query = states.last().expect("decoder layers").0;
            let (a, g) = self.attend_on(tape, store, &mem, query, alpha, cum)?;
            cum = tape.add(cum, a)?;
            alpha = a;
            let (y, stop) = self.decode_on(tape, store, frame, g, &mut states, ctx)?;
            ys.push(y);
            stops.push(stop);
            alphas.push(a);
            let last = ((s + 1) * r - 1).min(t_len - 1);
            frame = tape.constant(Tensor::row_vector(y_true.row(last).to_vec()));
        }
        let y_pre = self.stack_frames(tape, &ys, t_len)?;
        let y_post = self.postnet_on(tape, store, y_pre, ctx)?;
        let stop_logits = tape.concat_rows(&stops)?;
        Ok(TeacherForcedVars {
            y_pre,
            y_post,
            stop_logits,
            alphas,
        })
    }

    /// `T × N` attention matrix, each step's weights repeated per emitted frame.
    fn alpha_matrix(&self, tape: &Tape, alphas: &[Var], frames: usize) -> Result<Tensor> {
        let r = self.config.reduction;
        let rows: Vec<&[f64]> = alphas
            .iter()
            .flat_map(|a| std::iter::repeat(tape.value(*a).data()).take(r))
            .take(frames)
            .collect();
        Tensor::from_rows(&rows)
    }

    fn phn_tensor(phn: &FeatureMatrix) -> Result<&Tensor> {
        if phn.kind() != FeatureKind::Phn {
            return Err(Error::config(format!("attention model takes PHN input, got {}", phn.kind())));
        }
        Ok(phn.rows())
    }

    /// Encoder outputs `N × E` in inference mode.
    pub fn encoder_forward(&self, phn: &FeatureMatrix) -> Result<Tensor> {
        let mut tape = Tape::new();
        let e = self.encode_on(&mut tape, &self.params, Self::phn_tensor(phn)?, &mut Ctx::infer())?;
        Ok(tape.value(e).clone())
    }

    /// Deterministic teacher-forced pass (running batch-norm statistics, no dropout).
    pub fn forward_teacher_forced(&self, phn: &FeatureMatrix, y_true: &Tensor) -> Result<TeacherForcedOutput> {
        let mut tape = Tape::new();
        let v = self.teacher_forced_on(&mut tape, &self.params, Self::phn_tensor(phn)?, y_true, &mut Ctx::infer())?;
        let frames = y_true.rows();
        Ok(TeacherForcedOutput {
            y_pre: tape.value(v.y_pre).clone(),
            y_post: tape.value(v.y_post).clone(),
            stops: tape.value(v.stop_logits).data().iter().map(|z| sigmoid(*z)).collect(),
            alphas: self.alpha_matrix(&tape, &v.alphas, frames)?,
        })
    }

    /// Greedy autoregressive generation. Stops after the first step whose stop
    /// probability exceeds `stop_threshold`, or at `max_frames`.
    pub fn infer(&self, phn: &FeatureMatrix, stop_threshold: f64, max_frames: usize) -> Result<InferenceOutput> {
        if max_frames == 0 {
            return Err(Error::config("max_frames must be at least 1"));
        }
        let store = &self.params;
        let mut ctx = Ctx::infer();
        let mut tape = Tape::new();
        let enc = self.encode_on(&mut tape, store, Self::phn_tensor(phn)?, &mut ctx)?;
        let mem = self.memory_on(&mut tape, store, enc)?;
        let (mut alpha, mut cum, mut states, mut frame) = self.initial_vars(&mut tape, mem.tokens);
        let r = self.config.reduction;
        let (mut ys, mut stops, mut alphas) = (Vec::new(), Vec::new(), Vec::new());
        loop {
            let query = states.last().expect("decoder layers").0;
            let (a, g) = self.attend_on(&mut tape, store, &mem, query, alpha, cum)?;
            cum = tape.add(cum, a)?;
            alpha = a;
            let (y, stop) = self.decode_on(&mut tape, store, frame, g, &mut states, &mut ctx)?;
            ys.push(y);
            alphas.push(a);
            let p = sigmoid(tape.scalar(stop));
            stops.push(p);
            frame = tape.slice_cols(y, (r - 1) * NUM_CHANNELS, NUM_CHANNELS)?;
            if p > stop_threshold || ys.len() * r >= max_frames {
                break;
            }
        }
        let frames = (ys.len() * r).min(max_frames);
        let y_pre = self.stack_frames(&mut tape, &ys, frames)?;
        let y_post = self.postnet_on(&mut tape, store, y_pre, &mut ctx)?;
        Ok(InferenceOutput {
            y_pre: tape.value(y_pre).clone(),
            y_post: tape.value(y_post).clone(),
            stops,
            alphas: self.alpha_matrix(&tape, &alphas, frames)?,
        })
    }

    /// Decoder state before the first step over `tokens` encoder outputs.
    pub fn initial_state(&self, tokens: usize) -> AttentionState {
        let mut alpha = vec![0.0; tokens];
        if tokens > 0 {
            alpha[0] = 1.0;
        }
        AttentionState {
            alpha_prev: alpha.clone(),
            alpha_cum: alpha,
            lstm: (0..self.config.decoder_layers)
                .map(|_| LstmCellState::zeros(self.config.decoder_dim))
                .collect(),
            y_prev: vec![0.0; NUM_CHANNELS],
            context_prev: vec![0.0; self.config.embedding_dim],
        }
    }

    /// Attention weights and context for the next step, given encoder outputs `N × E`.
    pub fn attention_step(&self, state: &AttentionState, enc: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        if enc.cols() != self.config.embedding_dim {
            return Err(Error::dim(format!(
                "encoder outputs have width {}, model expects {}",
                enc.cols(),
                self.config.embedding_dim
            )));
        }
        let mut tape = Tape::new();
        let e = tape.constant(enc.clone());
        let mem = self.memory_on(&mut tape, &self.params, e)?;
        let query = tape.constant(Tensor::row_vector(state.query().to_vec()));
        let ap = tape.constant(Tensor::column_vector(state.alpha_prev.clone()));
        let ac = tape.constant(Tensor::column_vector(state.alpha_cum.clone()));
        let (a, g) = self.attend_on(&mut tape, &self.params, &mem, query, ap, ac)?;
        Ok((tape.value(a).data().to_vec(), tape.value(g).data().to_vec()))
    }

    /// One decoder step without dropout. Returns the emitted frame(s)
    /// (`12 · reduction` values), the stop probability and the advanced state;
    /// attention fields of the state are left for [`AttentionState::with_attention`].
    pub fn decoder_step(
        &self,
        state: &AttentionState,
        g: &[f64],
        mode: DecoderMode,
        y_true_prev: Option<&[f64]>,
    ) -> Result<(Vec<f64>, f64, AttentionState)> {
        let prev = match (mode, y_true_prev) {
            (DecoderMode::Teacher, None) => {
                return Err(Error::config("teacher-forced decoder step needs the previous ground-truth frame"))
            }
            (DecoderMode::Teacher, Some(y)) => y,
            (DecoderMode::Free, _) => &state.y_prev,
        };
        if prev.len() != NUM_CHANNELS || g.len() != self.config.embedding_dim {
            return Err(Error::dim("decoder step inputs have the wrong width"));
        }
        let mut tape = Tape::new();
        let frame = tape.constant(Tensor::row_vector(prev.to_vec()));
        let gv = tape.constant(Tensor::row_vector(g.to_vec()));
        let mut states: Vec<(Var, Var)> = state
            .lstm
            .iter()
            .map(|s| {
                let h = tape.constant(Tensor::row_vector(s.hidden.clone()));
                let c = tape.constant(Tensor::row_vector(s.cell.clone()));
                (h, c)
            })
            .collect();
        let (y, stop) = self.decode_on(&mut tape, &self.params, frame, gv, &mut states, &mut Ctx::infer())?;
        let y = tape.value(y).data().to_vec();
        let mut next = state.clone();
        next.lstm = states
            .iter()
            .map(|(h, c)| LstmCellState {
                hidden: tape.value(*h).data().to_vec(),
                cell: tape.value(*c).data().to_vec(),
            })
            .collect();
        next.y_prev = y[y.len() - NUM_CHANNELS..].to_vec();
        next.context_prev = g.to_vec();
        Ok((y, sigmoid(tape.scalar(stop)), next))
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
