//! Deterministic gestural corpus generator.
//!
//! Each phoneme has an articulatory target, a time constant and a duration
//! distribution. Articulators track the piecewise-constant target sequence
//! through two identical first-order lags in cascade, which is a critically
//! damped second-order system. The cascade is integrated in closed form, so a
//! channel never leaves the range spanned by its targets.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{split_dataset, ArticulatoryTrajectory, Corpus, Interval, PhonemeAlignment, Utterance, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureMatrix, PhonemeInventory, ARPABET, MFCC_DIM};
use crate::numerics::Tensor;

/// Frame rate of generated trajectories.
pub const SYNTH_RATE_HZ: f64 = 100.0;
/// Width of the per-subject embedding mixed into the acoustic proxy.
pub const EMBEDDING_DIM: usize = 4;
/// Relative size of the subject-specific part of the proxy mixing matrix.
pub const MIXING_SPREAD: f64 = 0.15;
/// Longest generated sentence.
pub const MAX_SENTENCE_S: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GestureSpec {
    pub phoneme: String,
    pub target: [f64; NUM_CHANNELS],
    pub time_constant_s: f64,
    pub mean_duration_s: f64,
    /// Standard deviation of the duration; draws are clipped to ±2 std.
    pub duration_jitter_s: f64,
}

impl GestureSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.time_constant_s > 0.0) {
            return Err(Error::config(format!("{}: time constant must be positive", self.phoneme)));
        }
        if !(self.duration_jitter_s >= 0.0 && self.mean_duration_s - 2.0 * self.duration_jitter_s > 0.0) {
            return Err(Error::config(format!(
                "{}: durations must stay positive (mean {} s, jitter {} s)",
                self.phoneme, self.mean_duration_s, self.duration_jitter_s
            )));
        }
        if self.target.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(format!("{}: target must be finite", self.phoneme)));
        }
        Ok(())
    }
}

/// Gesture specs for the whole inventory, indexed like the inventory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GestureSet {
    specs: Vec<GestureSpec>,
}

impl GestureSet {
    /// Requires exactly one spec per inventory phoneme.
    pub fn new(specs: Vec<GestureSpec>) -> Result<Self> {
        let inv = PhonemeInventory;
        let mut slots: Vec<Option<GestureSpec>> = vec![None; ARPABET.len()];
        for s in specs {
            s.validate()?;
            let i = inv.index(&s.phoneme)? - 1;
            if slots[i].is_some() {
                return Err(Error::config(format!("duplicate gesture spec for {}", s.phoneme)));
            }
            slots[i] = Some(s);
        }
        let specs = slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| Error::config(format!("no gesture spec for {}", ARPABET[i]))))
            .collect::<Result<_>>()?;
        Ok(Self { specs })
    }

    /// Random targets (standard normal per channel), time constants in
    /// 20 to 40 ms, mean durations 60 to 140 ms with 10% jitter.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = ARPABET
            .iter()
            .map(|p| {
                let mut target = [0.0; NUM_CHANNELS];
                for v in &mut target {
                    *v = rng.sample(StandardNormal);
                }
                let mean = rng.gen_range(0.06..0.14);
                GestureSpec {
                    phoneme: p.to_string(),
                    target,
                    time_constant_s: rng.gen_range(0.02..0.04),
                    mean_duration_s: mean,
                    duration_jitter_s: 0.1 * mean,
                }
            })
            .collect();
        Self { specs }
    }

    pub fn get(&self, phoneme: &str) -> Result<&GestureSpec> {
        Ok(&self.specs[PhonemeInventory.index(phoneme)? - 1])
    }

    pub fn specs(&self) -> &[GestureSpec] {
        &self.specs
    }

    pub fn mean_duration_s(&self) -> f64 {
        self.specs.iter().map(|s| s.mean_duration_s).sum::<f64>() / self.specs.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub id: String,
    pub offset: [f64; NUM_CHANNELS],
    pub scale: [f64; NUM_CHANNELS],
    /// Multiplies every phoneme duration and time constant.
    pub duration_scale: f64,
    pub embedding: [f64; EMBEDDING_DIM],
    /// `13 × (12 + EMBEDDING_DIM)` map from articulation to the acoustic proxy.
    pub mixing: Tensor,
    pub noise_level: f64,
}

impl SubjectProfile {
    /// Unit scale, zero offset, unit speaking rate and a fixed mixing matrix.
    pub fn neutral(id: impl Into<String>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Self {
            id: id.into(),
            offset: [0.0; NUM_CHANNELS],
            scale: [1.0; NUM_CHANNELS],
            duration_scale: 1.0,
            embedding: [0.0; EMBEDDING_DIM],
            mixing: random_mixing(&mut rng),
            noise_level: 0.0,
        }
    }

    /// Random morphology and rate. The mixing matrix is `base` plus a
    /// subject-specific perturbation of relative size [`MIXING_SPREAD`].
    pub fn random<R: Rng>(id: impl Into<String>, noise_level: f64, base: &Tensor, rng: &mut R) -> Self {
        let mut offset = [0.0; NUM_CHANNELS];
        let mut scale = [0.0; NUM_CHANNELS];
        for c in 0..NUM_CHANNELS {
            offset[c] = rng.gen_range(-0.5..0.5);
            scale[c] = rng.gen_range(0.8..1.25);
        }
        let mut embedding = [0.0; EMBEDDING_DIM];
        for e in &mut embedding {
            *e = rng.sample(StandardNormal);
        }
        Self {
            id: id.into(),
            offset,
            scale,
            duration_scale: rng.gen_range(0.85..1.2),
            embedding,
            mixing: perturbed_mixing(base, rng),
            noise_level,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config(format!("subject {}: scales must be positive", self.id)));
        }
        if !(self.duration_scale > 0.0) {
            return Err(Error::config(format!("subject {}: duration scale must be positive", self.id)));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::config(format!("subject {}: noise level must be non-negative", self.id)));
        }
        if self.mixing.shape() != [MFCC_DIM, NUM_CHANNELS + EMBEDDING_DIM] {
            return Err(Error::dim(format!(
                "subject {}: mixing matrix must be {MFCC_DIM}×{}",
                self.id,
                NUM_CHANNELS + EMBEDDING_DIM
            )));
        }
        if rank(&self.mixing.to_rows()) < MFCC_DIM {
            return Err(Error::config(format!("subject {}: mixing matrix is rank deficient", self.id)));
        }
        Ok(())
    }

    fn apply(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(i, v)| self.offset[i % NUM_CHANNELS] + self.scale[i % NUM_CHANNELS] * v)
            .collect()
    }
}

/// Gaussian mixing matrix whose articulatory block has full column rank.
fn random_mixing<R: Rng>(rng: &mut R) -> Tensor {
    let cols = NUM_CHANNELS + EMBEDDING_DIM;
    loop {
        let rows: Vec<Vec<f64>> = (0..MFCC_DIM)
            .map(|_| {
                (0..cols)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) / (cols as f64).sqrt())
                    .collect()
            })
            .collect();
        let block: Vec<Vec<f64>> = rows.iter().map(|r| r[..NUM_CHANNELS].to_vec()).collect();
        if rank(&rows) == MFCC_DIM && rank(&block) == NUM_CHANNELS {
            return Tensor::from_rows(&rows).expect("rectangular rows");
        }
    }
}

/// Subject mixing matrix near a shared one: acoustics depend on articulation
/// the same way for everyone, up to speaker-specific detail.
fn perturbed_mixing<R: Rng>(base: &Tensor, rng: &mut R) -> Tensor {
    let scale = MIXING_SPREAD / ((NUM_CHANNELS + EMBEDDING_DIM) as f64).sqrt();
    loop {
        let rows: Vec<Vec<f64>> = base
            .iter_rows()
            .map(|r| r.iter().map(|v| v + scale * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let block: Vec<Vec<f64>> = rows.iter().map(|r| r[..NUM_CHANNELS].to_vec()).collect();
        if rank(&rows) == MFCC_DIM && rank(&block) == NUM_CHANNELS {
            return Tensor::from_rows(&rows).expect("rectangular rows");
        }
    }
}

/// Mixing matrix shared by all subjects of a corpus.
pub fn shared_mixing(seed: u64) -> Tensor {
    random_mixing(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Numerical rank by Gaussian elimination with partial pivoting.
fn rank(rows: &[Vec<f64>]) -> usize {
    let mut m = rows.to_vec();
    let n_cols = m.first().map_or(0, Vec::len);
    let mut r = 0;
    for c in 0..n_cols {
        if r == m.len() {
            break;
        }
        let pivot = (r..m.len())
            .max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs()))
            .unwrap();
        if m[pivot][c].abs() < 1e-9 {
            continue;
        }
        m.swap(r, pivot);
        for i in r + 1..m.len() {
            let f = m[i][c] / m[r][c];
            for j in c..n_cols {
                m[i][j] -= f * m[r][j];
            }
        }
        r += 1;
    }
    r
}

/// One stretch of constant target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub target: [f64; NUM_CHANNELS],
    pub time_constant_s: f64,
    pub duration_s: f64,
}

/// State of the two-lag cascade; `position` is the observed output.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Cascade {
    inner: [f64; NUM_CHANNELS],
    position: [f64; NUM_CHANNELS],
}

impl Cascade {
    fn at_rest(p: [f64; NUM_CHANNELS]) -> Self {
        Self { inner: p, position: p }
    }

    /// Exact solution after `h` seconds of tracking `u` with time constant `tau`.
    fn advance(&mut self, u: &[f64; NUM_CHANNELS], tau: f64, h: f64) {
        let decay = (-h / tau).exp();
        for c in 0..NUM_CHANNELS {
            let a = self.inner[c] - u[c];
            let b = self.position[c] - u[c];
            self.inner[c] = u[c] + a * decay;
            self.position[c] = u[c] + (b + a * h / tau) * decay;
        }
    }
}

/// Samples the critically damped response to a sequence of targets at
/// `rate_hz`, starting at rest in `initial`. Returns `n_frames` frames, frame
/// `k` at time `k / rate_hz`; the last segment is held past its end.
pub fn track_targets(
    segments: &[Segment],
    initial: [f64; NUM_CHANNELS],
    rate_hz: f64,
    n_frames: usize,
) -> Result<Vec<[f64; NUM_CHANNELS]>> {
    if segments.is_empty() {
        return Err(Error::data("no segments to track"));
    }
    if segments.iter().any(|s| !(s.time_constant_s > 0.0 && s.duration_s > 0.0)) {
        return Err(Error::config("segment time constants and durations must be positive"));
    }
    let mut state = Cascade::at_rest(initial);
    let mut out = Vec::with_capacity(n_frames);
    let mut seg = 0;
    let mut seg_end = segments[0].duration_s;
    let mut now = 0.0;
    for k in 0..n_frames {
        let t = k as f64 / rate_hz;
        // integrate piecewise up to t, crossing segment boundaries exactly
        while now < t {
            let s = &segments[seg];
            let last = seg + 1 == segments.len();
            let stop = if last { t } else { t.min(seg_end) };
            state.advance(&s.target, s.time_constant_s, stop - now);
            now = stop;
            if !last && now >= seg_end {
                seg += 1;
                seg_end += segments[seg].duration_s;
            }
        }
        out.push(state.position);
    }
    Ok(out)
}

/// Draws a duration per phoneme, scales it by the subject's speaking rate and
/// rounds to whole frames (at least one).
pub fn sample_frame_counts<R: Rng>(
    phonemes: &[&str],
    profile: &SubjectProfile,
    specs: &GestureSet,
    rng: &mut R,
) -> Result<Vec<usize>> {
    phonemes
        .iter()
        .map(|p| {
            let s = specs.get(p)?;
            let z: f64 = rng.sample::<f64, _>(StandardNormal).clamp(-2.0, 2.0);
            let d = (s.mean_duration_s + s.duration_jitter_s * z) * profile.duration_scale;
            Ok(((d * SYNTH_RATE_HZ).round() as usize).max(1))
        })
        .collect()
}

/// Builds the utterance for given phonemes and frame counts.
pub fn render_utterance(
    id: &str,
    phonemes: &[&str],
    frame_counts: &[usize],
    profile: &SubjectProfile,
    specs: &GestureSet,
) -> Result<Utterance> {
    let offsets = vec![[0.0; NUM_CHANNELS]; phonemes.len()];
    render_utterance_varied(id, phonemes, frame_counts, &offsets, profile, specs)
}

/// As [`render_utterance`], with each token's target shifted by its entry in
/// `target_offsets` (token-level articulatory variation).
pub fn render_utterance_varied(
    id: &str,
    phonemes: &[&str],
    frame_counts: &[usize],
    target_offsets: &[[f64; NUM_CHANNELS]],
    profile: &SubjectProfile,
    specs: &GestureSet,
) -> Result<Utterance> {
    if target_offsets.len() != phonemes.len() {
        return Err(Error::data("need one target offset per phoneme"));
    }
    if phonemes.is_empty() {
        return Err(Error::data("cannot synthesize an empty phoneme sequence"));
    }
    if phonemes.len() != frame_counts.len() || frame_counts.contains(&0) {
        return Err(Error::data("need one positive frame count per phoneme"));
    }
    profile.validate()?;
    let mut segments = Vec::with_capacity(phonemes.len());
    let mut intervals = Vec::with_capacity(phonemes.len());
    let mut start = 0usize;
    for ((p, &n), off) in phonemes.iter().zip(frame_counts).zip(target_offsets) {
        let s = specs.get(p)?;
        let mut target = s.target;
        for (t, o) in target.iter_mut().zip(off) {
            *t += o;
        }
        segments.push(Segment {
            target,
            time_constant_s: s.time_constant_s * profile.duration_scale,
            duration_s: n as f64 / SYNTH_RATE_HZ,
        });
        intervals.push(Interval::new(
            *p,
            start as f64 / SYNTH_RATE_HZ,
            (start + n) as f64 / SYNTH_RATE_HZ,
        ));
        start += n;
    }
    let raw = track_targets(&segments, segments[0].target, SYNTH_RATE_HZ, start)?;
    let data: Vec<f64> = raw.iter().flat_map(|f| profile.apply(f)).collect();
    let traj = ArticulatoryTrajectory::new(Tensor::matrix(start, NUM_CHANNELS, data)?, SYNTH_RATE_HZ)?;
    Utterance::new(id, profile.id.clone(), traj, PhonemeAlignment::new(intervals)?)
}

/// Samples durations from `seed` and renders the utterance.
pub fn synthesize_utterance(
    id: &str,
    phonemes: &[&str],
    profile: &SubjectProfile,
    specs: &GestureSet,
    seed: u64,
) -> Result<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = sample_frame_counts(phonemes, profile, specs, &mut rng)?;
    render_utterance(id, phonemes, &counts, profile, specs)
}

/// 13-dim stand-in for MFCCs: each frame is the subject's mixing matrix applied
/// to the trajectory frame joined with the subject embedding, plus Gaussian
/// noise. Not normalized.
pub fn acoustic_proxy(utterance: &Utterance, profile: &SubjectProfile, seed: u64) -> Result<FeatureMatrix> {
    let traj = &utterance.trajectory;
    if (traj.frame_rate_hz() - SYNTH_RATE_HZ).abs() > 1e-9 {
        return Err(Error::config(format!(
            "acoustic proxy needs {SYNTH_RATE_HZ} Hz trajectories, got {} Hz",
            traj.frame_rate_hz()
        )));
    }
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(traj.len() * MFCC_DIM);
    for frame in traj.frames().iter_rows() {
        for r in 0..MFCC_DIM {
            let w = profile.mixing.row(r);
            let clean: f64 = frame.iter().zip(w).map(|(x, m)| x * m).sum::<f64>()
                + profile.embedding.iter().zip(&w[NUM_CHANNELS..]).map(|(e, m)| e * m).sum::<f64>();
            let noise: f64 = rng.sample(StandardNormal);
            data.push(clean + profile.noise_level * noise);
        }
    }
    FeatureMatrix::new(Tensor::matrix(traj.len(), MFCC_DIM, data)?, FeatureKind::Mfcc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub utterances_per_subject: usize,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    pub noise_level: f64,
    /// Standard deviation of the per-token shift of each articulatory target.
    pub target_jitter: f64,
    pub seed: u64,
    /// Phonemes drawn for sentences; empty means the whole inventory.
    pub phonemes: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 10,
            utterances_per_subject: 50,
            min_phonemes: 6,
            max_phonemes: 16,
            noise_level: 0.05,
            target_jitter: 0.2,
            seed: 0,
            phonemes: Vec::new(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.utterances_per_subject == 0 {
            return Err(Error::config("n_subjects and utterances_per_subject must be positive"));
        }
        if self.min_phonemes == 0 || self.min_phonemes > self.max_phonemes {
            return Err(Error::config("need 1 <= min_phonemes <= max_phonemes"));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::config("noise_level must be non-negative"));
        }
        if !(self.target_jitter >= 0.0) {
            return Err(Error::config("target_jitter must be non-negative"));
        }
        for p in &self.phonemes {
            PhonemeInventory
                .index(p)
                .map_err(|_| Error::config(format!("synth.phonemes: unknown phoneme {p:?}")))?;
        }
        Ok(())
    }

    fn pool(&self) -> Vec<String> {
        if self.phonemes.is_empty() {
            ARPABET.iter().map(|s| s.to_string()).collect()
        } else {
            self.phonemes.iter().map(|p| crate::features::normalize(p)).collect()
        }
    }

    /// Expected sentence duration before the 4 s cap, averaged over subjects.
    pub fn expected_duration_s(&self, specs: &GestureSet, profiles: &[SubjectProfile]) -> Result<f64> {
        let pool = self.pool();
        let mut mean_dur = 0.0;
        for p in &pool {
            mean_dur += specs.get(p)?.mean_duration_s;
        }
        mean_dur /= pool.len() as f64;
        let mean_n = (self.min_phonemes + self.max_phonemes) as f64 / 2.0;
        let rate = profiles.iter().map(|p| p.duration_scale).sum::<f64>() / profiles.len() as f64;
        Ok(mean_n * mean_dur * rate)
    }
}

/// A generated corpus with everything needed to regenerate or extend it.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    /// Split 80/10/10 per subject.
    pub corpus: Corpus,
    pub specs: GestureSet,
    pub profiles: Vec<SubjectProfile>,
    /// Acoustic proxy per utterance id.
    pub proxies: BTreeMap<String, FeatureMatrix>,
}

impl SyntheticCorpus {
    pub fn profile(&self, subject: &str) -> Option<&SubjectProfile> {
        self.profiles.iter().find(|p| p.id == subject)
    }
}

/// Independent stream seed for `(master, a, b)`.
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    let mut z = master ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn subject_name(i: usize) -> String {
    format!("S{:02}", i + 1)
}

/// Generates `n_subjects × utterances_per_subject` utterances with shared
/// gesture specs and distinct subject profiles, then splits 80/10/10.
pub fn generate_corpus(config: &SynthConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let specs = GestureSet::random(derive_seed(config.seed, 0, 0));
    let mut prof_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1, 0));
    let base = shared_mixing(derive_seed(config.seed, 4, 0));
    let profiles: Vec<SubjectProfile> = (0..config.n_subjects)
        .map(|s| SubjectProfile::random(subject_name(s), config.noise_level, &base, &mut prof_rng))
        .collect();
    let pool = config.pool();
    let max_frames = (MAX_SENTENCE_S * SYNTH_RATE_HZ).round() as usize;

    let mut utterances = Vec::new();
    let mut proxies = BTreeMap::new();
    for (s, profile) in profiles.iter().enumerate() {
        for u in 0..config.utterances_per_subject {
            let seed = derive_seed(config.seed, 2 + s as u64, u as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(config.min_phonemes..=config.max_phonemes);
            let mut phonemes: Vec<&str> = (0..n).map(|_| pool[rng.gen_range(0..pool.len())].as_str()).collect();
            let mut counts = sample_frame_counts(&phonemes, profile, &specs, &mut rng)?;
            while counts.iter().sum::<usize>() > max_frames && phonemes.len() > 1 {
                phonemes.pop();
                counts.pop();
            }
            if counts.iter().sum::<usize>() > max_frames {
                return Err(Error::config("gesture durations exceed the 4 s sentence limit"));
            }
            let offsets: Vec<[f64; NUM_CHANNELS]> = phonemes
                .iter()
                .map(|_| std::array::from_fn(|_| config.target_jitter * rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let id = format!("{}_{:03}", profile.id, u + 1);
            let utt = render_utterance_varied(&id, &phonemes, &counts, &offsets, profile, &specs)?;
            proxies.insert(id, acoustic_proxy(&utt, profile, derive_seed(seed, 1, 1))?);
            utterances.push(utt);
        }
    }
    let corpus = Corpus::new(utterances);
    let corpus = if corpus.len() >= crate::corpus::MIN_SPLIT_UTTERANCES {
        split_dataset(&corpus, (0.8, 0.1, 0.1), derive_seed(config.seed, 3, 0))?
    } else {
        corpus
    };
    Ok(SyntheticCorpus {
        corpus,
        specs,
        profiles,
        proxies,
    })
}
