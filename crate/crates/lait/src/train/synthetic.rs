//! Two-segment synthetic classification tasks.
//!
//! `copy_vs_shuffle` asks whether segment two repeats segment one in the
//! same order, which cannot be decided without comparing the segments
//! position by position. `shared_token` only asks whether the segments share
//! any id, which survives independent encoding much better.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RESERVED_IDS;
use crate::error::{LaitError, Result};
use crate::pipeline::{SegmentedExample, EOS_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    CopyVsShuffle,
    SharedToken,
}

impl std::str::FromStr for SyntheticKind {
    type Err = LaitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy_vs_shuffle" => Ok(Self::CopyVsShuffle),
            "shared_token" => Ok(Self::SharedToken),
            other => Err(LaitError::InvalidTask(format!("unknown synthetic task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub kind: SyntheticKind,
    /// Content tokens per segment; each segment also ends with EOS.
    pub seq_len: usize,
    /// Ids are drawn from `2..vocab`.
    pub vocab: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub labels: Vec<String>,
    pub train: Vec<SegmentedExample>,
    pub eval: Vec<SegmentedExample>,
}

impl SyntheticTaskSpec {
    pub fn labels(&self) -> Vec<String> {
        let l: [&str; 2] = match self.kind {
            SyntheticKind::CopyVsShuffle => ["same", "diff"],
            SyntheticKind::SharedToken => ["yes", "no"],
        };
        l.iter().map(|s| s.to_string()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return Err(LaitError::InvalidTask(format!(
                "seq_len {} admits no non-identity permutation",
                self.seq_len
            )));
        }
        let needed = match self.kind {
            SyntheticKind::CopyVsShuffle => self.seq_len,
            SyntheticKind::SharedToken => 2 * self.seq_len,
        };
        if self.vocab < RESERVED_IDS + needed {
            return Err(LaitError::InvalidTask(format!(
                "vocab {} too small for {needed} distinct ids",
                self.vocab
            )));
        }
        Ok(())
    }
}

fn distinct_ids(rng: &mut ChaCha8Rng, vocab: usize, n: usize) -> Vec<u32> {
    rand::seq::index::sample(rng, vocab - RESERVED_IDS, n)
        .into_iter()
        .map(|i| (i + RESERVED_IDS) as u32)
        .collect()
}

/// Uniform over the non-identity permutations of `0..n` (rejection sampling).
pub fn non_identity_permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let identity: Vec<usize> = (0..n).collect();
    loop {
        let mut p = identity.clone();
        p.shuffle(rng);
        if p != identity {
            return p;
        }
    }
}

fn with_eos(mut ids: Vec<u32>) -> Vec<u32> {
    ids.push(EOS_ID);
    ids
}

fn make_example(spec: &SyntheticTaskSpec, rng: &mut ChaCha8Rng, positive: bool) -> SegmentedExample {
    let labels = spec.labels();
    let (a, b) = match spec.kind {
        SyntheticKind::CopyVsShuffle => {
            let a = distinct_ids(rng, spec.vocab, spec.seq_len);
            let b = if positive {
                a.clone()
            } else {
                non_identity_permutation(rng, spec.seq_len)
                    .into_iter()
                    .map(|i| a[i])
                    .collect()
            };
            (a, b)
        }
        SyntheticKind::SharedToken => {
            let ids = distinct_ids(rng, spec.vocab, 2 * spec.seq_len);
            let (a, b) = ids.split_at(spec.seq_len);
            let mut b = b.to_vec();
            if positive {
                let src = rng.gen_range(0..spec.seq_len);
                let dst = rng.gen_range(0..spec.seq_len);
                b[dst] = a[src];
            }
            (a.to_vec(), b)
        }
    };
    SegmentedExample {
        segments: vec![with_eos(a), with_eos(b)],
        segment_texts: Vec::new(),
        task_id: format!("{:?}", spec.kind),
        label: Some(labels[if positive { 0 } else { 1 }].clone()),
    }
}

fn balanced(spec: &SyntheticTaskSpec, rng: &mut ChaCha8Rng, n: usize) -> Vec<SegmentedExample> {
    let mut flags: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
    flags.shuffle(rng);
    flags.into_iter().map(|pos| make_example(spec, rng, pos)).collect()
}

/// Deterministic in `spec.seed`. Exactly `n / 2` examples per class in each split.
pub fn gen_synthetic(spec: &SyntheticTaskSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = balanced(spec, &mut rng, spec.n_train);
    let eval = balanced(spec, &mut rng, spec.n_eval);
    Ok(SyntheticDataset {
        labels: spec.labels(),
        train,
        eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: SyntheticKind, seq_len: usize) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            kind,
            seq_len,
            vocab: 50,
            n_train: 64,
            n_eval: 32,
            seed: 9,
        }
    }

    #[test]
    fn swap_is_the_only_option_for_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(non_identity_permutation(&mut rng, 2), vec![1, 0]);
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        for kind in [SyntheticKind::CopyVsShuffle, SyntheticKind::SharedToken] {
            let a = gen_synthetic(&spec(kind, 6)).unwrap();
            assert_eq!(a, gen_synthetic(&spec(kind, 6)).unwrap());
            for split in [&a.train, &a.eval] {
                let pos = split
                    .iter()
                    .filter(|e| e.label.as_deref() == Some(a.labels[0].as_str()))
                    .count();
                assert_eq!(pos * 2, split.len());
            }
        }
    }

    #[test]
    fn labels_match_content() {
        let d = gen_synthetic(&spec(SyntheticKind::CopyVsShuffle, 5)).unwrap();
        for ex in &d.train {
            let same = ex.segments[0] == ex.segments[1];
            assert_eq!(same, ex.label.as_deref() == Some("same"));
            let mut x = ex.segments[0].clone();
            let mut y = ex.segments[1].clone();
            x.sort();
            y.sort();
            assert_eq!(x, y);
            assert_eq!(ex.segments[0].len(), 6);
        }
        let d = gen_synthetic(&spec(SyntheticKind::SharedToken, 5)).unwrap();
        for ex in &d.train {
            let a = &ex.segments[0][..5];
            let shared = ex.segments[1][..5].iter().any(|t| a.contains(t));
            assert_eq!(shared, ex.label.as_deref() == Some("yes"));
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(gen_synthetic(&spec(SyntheticKind::CopyVsShuffle, 1)).is_err());
        let mut s = spec(SyntheticKind::SharedToken, 30);
        assert!(gen_synthetic(&s).is_err());
        s.vocab = 70;
        assert!(gen_synthetic(&s).is_ok());
    }
}
