use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Corpus, Split};
use crate::error::{Error, Result};

/// Smallest corpus that can be split into three non-empty parts.
pub const MIN_SPLIT_UTTERANCES: usize = 10;

/// Assigns every utterance to train/validation/test, stratified by subject.
///
/// Each subject's utterances are shuffled with a generator derived from
/// `seed`, then the first `round(n·train)` go to training, the next
/// `round(n·validation)` to validation and the remainder to test.
pub fn split_dataset(corpus: &Corpus, ratios: (f64, f64, f64), seed: u64) -> Result<Corpus> {
    let (train, valid, test) = ratios;
    if [train, valid, test].iter().any(|r| !(0.0..=1.0).contains(r))
        || (train + valid + test - 1.0).abs() > 1e-9
    {
        return Err(Error::config(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    if corpus.len() < MIN_SPLIT_UTTERANCES {
        return Err(Error::data(format!(
            "need at least {MIN_SPLIT_UTTERANCES} utterances to split, got {}",
            corpus.len()
        )));
    }
    let mut out = corpus.clone();
    out.split.clear();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for subject in corpus.subjects() {
        let mut ids: Vec<&str> = corpus
            .utterances
            .iter()
            .filter(|u| u.subject == subject)
            .map(|u| u.id.as_str())
            .collect();
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let n = ids.len() as f64;
        let n_train = (n * train).round() as usize;
        let n_valid = ((n * valid).round() as usize).min(ids.len() - n_train);
        for (i, id) in ids.into_iter().enumerate() {
            let part = if i < n_train {
                Split::Train
            } else if i < n_train + n_valid {
                Split::Validation
            } else {
                Split::Test
            };
            if out.split.insert(id.to_string(), part).is_some() {
                return Err(Error::data(format!("duplicate utterance id {id}")));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ArticulatoryTrajectory, PhonemeAlignment, Utterance, NUM_CHANNELS};

    fn corpus(per_subject: &[usize]) -> Corpus {
        let traj = ArticulatoryTrajectory::from_channels(&vec![vec![0.0; 10]; NUM_CHANNELS], 100.0).unwrap();
        let al = PhonemeAlignment::from_durations(&["aa"], &[0.1]).unwrap();
        let mut utts = Vec::new();
        for (s, &n) in per_subject.iter().enumerate() {
            for i in 0..n {
                utts.push(Utterance::new(format!("s{s}_{i:03}"), format!("s{s}"), traj.clone(), al.clone()).unwrap());
            }
        }
        Corpus::new(utts)
    }

    fn counts(c: &Corpus) -> [usize; 3] {
        [Split::Train, Split::Validation, Split::Test].map(|p| c.part(p).count())
    }

    #[test]
    fn full_sized_subject() {
        let c = split_dataset(&corpus(&[460]), (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(counts(&c), [368, 46, 46]);
        c.check_split().unwrap();
    }

    #[test]
    fn ten_utterances() {
        let c = split_dataset(&corpus(&[10]), (0.8, 0.1, 0.1), 0).unwrap();
        assert_eq!(counts(&c), [8, 1, 1]);
    }

    #[test]
    fn stratified_per_subject() {
        let c = split_dataset(&corpus(&[50; 10]), (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!(counts(&c), [400, 50, 50]);
        for s in c.subjects() {
            assert_eq!(counts(&c.subject(&s)), [40, 5, 5]);
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let base = corpus(&[30, 30]);
        let a = split_dataset(&base, (0.8, 0.1, 0.1), 11).unwrap();
        let b = split_dataset(&base, (0.8, 0.1, 0.1), 11).unwrap();
        let c = split_dataset(&base, (0.8, 0.1, 0.1), 12).unwrap();
        assert_eq!(a.split, b.split);
        assert_ne!(a.split, c.split);
    }

    #[test]
    fn rejects_small_corpus_and_bad_ratios() {
        assert!(matches!(split_dataset(&corpus(&[9]), (0.8, 0.1, 0.1), 0), Err(Error::Data(_))));
        assert!(split_dataset(&corpus(&[20]), (0.8, 0.3, 0.1), 0).is_err());
        assert!(split_dataset(&corpus(&[20]), (1.2, -0.1, -0.1), 0).is_err());
    }
}
