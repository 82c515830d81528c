//! Randomized invariant suite: dual-path equivalence, endpoint identities,
//! op-counter agreement, cache transparency and gradient checks.
//!
//! Each check draws its cases from a seeded generator, so a failing seed can
//! be replayed exactly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cache::RepCache;
use crate::config::{ModelConfig, PosScheme};
use crate::cost::attention_ops;
use crate::error::Result;
use crate::pipeline::{lait_encode, lait_encode_masked, segment_lengths, vanilla_encode, SegmentedExample, EOS_ID};
use crate::tensor::{Matrix, Scalar};
use crate::train::{finite_diff_check, DEFAULT_STEP, MIN_COORDINATES};
use crate::weights::ModelWeights;

pub const DUAL_PATH_TOL_F32: f64 = 1e-5;
pub const DUAL_PATH_TOL_F64: f64 = 1e-10;
pub const GRADIENT_TOL: f64 = 1e-4;
/// Noise added on top of the seeded init so gains, relative biases and the
/// head are exercised away from their initial constants.
pub const JITTER: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// A random small model: `L` in `layers`, `P` in `0..=L`, any position scheme.
pub fn random_config(rng: &mut ChaCha8Rng, layers: std::ops::RangeInclusive<usize>) -> ModelConfig {
    let l = rng.gen_range(layers);
    let p = rng.gen_range(0..=l);
    let (d_model, n_heads) = *[(8, 1), (8, 2), (12, 3), (16, 2), (16, 4)].choose(rng).unwrap();
    let pos_scheme = *[PosScheme::RelativeBucket, PosScheme::SinusoidalLocal, PosScheme::None]
        .choose(rng)
        .unwrap();
    ModelConfig {
        vocab_size: 64,
        pos_scheme,
        ..ModelConfig::tiny(l, p, d_model, n_heads, *[8, 16, 24].choose(rng).unwrap())
    }
}

/// `n` segments of length `1..=max_len`, each ending in EOS.
pub fn random_example(rng: &mut ChaCha8Rng, n: usize, max_len: usize, vocab: usize) -> SegmentedExample {
    let segments = (0..n)
        .map(|_| {
            let len = rng.gen_range(1..=max_len);
            let mut s: Vec<u32> = (0..len - 1).map(|_| rng.gen_range(2..vocab as u32)).collect();
            s.push(EOS_ID);
            s
        })
        .collect();
    SegmentedExample::from_segments(segments).expect("segments are non-empty")
}

pub fn random_weights<T: Scalar>(cfg: &ModelConfig, num_labels: usize, seed: u64) -> Result<ModelWeights<T>> {
    let mut w = ModelWeights::init(cfg, num_labels, seed)?;
    w.jitter(seed.wrapping_add(1), JITTER);
    Ok(w)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct DualPathStats {
    pub cases: usize,
    pub max_diff_f32: f64,
    pub max_diff_f64: f64,
}

/// Separate-then-concatenate versus single-pass masked encoding, in both
/// precisions, on `cases` random (config, example) pairs.
pub fn dual_path_stats(cases: usize, seed: u64) -> Result<DualPathStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = DualPathStats {
        cases,
        ..Default::default()
    };
    for _ in 0..cases {
        let cfg = random_config(&mut rng, 2..=6);
        let n = rng.gen_range(1..=4);
        let ex = random_example(&mut rng, n, 8, cfg.vocab_size);
        let w64 = random_weights::<f64>(&cfg, 2, rng.gen())?;
        let w32: ModelWeights<f32> = w64.cast();
        let d64 = lait_encode(&ex, &w64, None)?
            .reps
            .max_abs_diff(&lait_encode_masked(&ex, &w64)?.reps);
        let d32 = lait_encode(&ex, &w32, None)?
            .reps
            .max_abs_diff(&lait_encode_masked(&ex, &w32)?.reps);
        stats.max_diff_f64 = stats.max_diff_f64.max(d64);
        stats.max_diff_f32 = stats.max_diff_f32.max(d32);
    }
    Ok(stats)
}

/// Counts endpoint cases that are not bit-identical: `P = 0` against the
/// vanilla encoder, and `P = L` against each segment encoded alone.
pub fn endpoint_mismatches(cases: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let cfg = random_config(&mut rng, 1..=5);
        let n = rng.gen_range(1..=4);
        let ex = random_example(&mut rng, n, 8, cfg.vocab_size);
        let seed = rng.gen();
        let w0 = random_weights::<f32>(&cfg.with_parallel_layers(0), 2, seed)?;
        if lait_encode(&ex, &w0, None)?.reps != vanilla_encode(&ex, &w0)?.reps {
            bad += 1;
        }
        let wl = random_weights::<f32>(&cfg.with_parallel_layers(cfg.layers), 2, seed)?;
        let alone = ex
            .segments
            .iter()
            .map(|s| vanilla_encode(&SegmentedExample::from_segments(vec![s.clone()])?, &w0).map(|e| e.reps))
            .collect::<Result<Vec<_>>>()?;
        if lait_encode(&ex, &wl, None)?.reps != Matrix::vstack(&alone)? {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Instrumented attention pairs against the analytic op count. Returns the
/// number of disagreeing cases; segment count 1 and `P` in `{0, L}` occur.
pub fn counter_mismatches(cases: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for i in 0..cases {
        let l = rng.gen_range(1..=6);
        let p = match i % 4 {
            0 => 0,
            1 => l,
            _ => rng.gen_range(0..=l),
        };
        let n = if i % 5 == 0 { 1 } else { rng.gen_range(1..=5) };
        let cfg = ModelConfig {
            vocab_size: 32,
            ..ModelConfig::tiny(l, p, 4, 1, 4)
        };
        let ex = random_example(&mut rng, n, 12, cfg.vocab_size);
        let w = ModelWeights::<f32>::init(&cfg, 2, i as u64)?;
        let measured = lait_encode(&ex, &w, None)?.counter.attention_pairs;
        if measured != attention_ops(&segment_lengths(&ex), l, p)?.ops_total {
            bad += 1;
        }
    }
    Ok(bad)
}

/// A replay corpus drawing segments from a small pool so that segments repeat.
pub fn replay_corpus(examples: usize, pool_size: usize, vocab: usize, seed: u64) -> Vec<SegmentedExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<Vec<u32>> = (0..pool_size.max(1))
        .map(|_| random_example(&mut rng, 1, 12, vocab).segments.remove(0))
        .collect();
    (0..examples)
        .map(|_| {
            let n = rng.gen_range(1..=3);
            SegmentedExample::from_segments((0..n).map(|_| pool.choose(&mut rng).unwrap().clone()).collect())
                .expect("pool segments are non-empty")
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CacheReplayStats {
    pub examples: usize,
    pub mismatches: usize,
    pub hits: u64,
    pub evictions: u64,
}

/// Encodes a repeating corpus with and without a cache (unbounded and then
/// tightly budgeted) and counts examples whose outputs differ in any bit.
pub fn cache_replay(examples: usize, seed: u64) -> Result<CacheReplayStats> {
    let cfg = ModelConfig {
        vocab_size: 64,
        ..ModelConfig::tiny(4, 2, 16, 2, 16)
    };
    let w = random_weights::<f32>(&cfg, 2, seed)?;
    let data = replay_corpus(examples, examples / 5 + 1, cfg.vocab_size, seed);
    let unbounded = RepCache::new(usize::MAX);
    let tight = RepCache::new(8 * (16 + 12 * cfg.d_model * 4));
    let mut stats = CacheReplayStats {
        examples,
        ..Default::default()
    };
    for ex in &data {
        let plain = lait_encode(ex, &w, None)?.reps;
        for cache in [&unbounded, &tight] {
            if lait_encode(ex, &w, Some(cache))?.reps != plain {
                stats.mismatches += 1;
            }
        }
    }
    stats.hits = unbounded.stats().hits + tight.stats().hits;
    stats.evictions = tight.stats().evictions;
    Ok(stats)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradientStats {
    pub configs: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst: String,
    /// Parallel-layer counts covered, as `(P, L)`.
    pub depths: Vec<(usize, usize)>,
}

/// Finite differences against backprop in f64 on `configs` random tiny
/// models, cycling `P` through `0`, `L / 2` and `L`.
pub fn gradient_stats(configs: usize, seed: u64) -> Result<GradientStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
    let mut stats = GradientStats::default();
    for i in 0..configs {
        let mut cfg = random_config(&mut rng, 2..=4);
        cfg.parallel_layers = match i % 3 {
            0 => 0,
            1 => cfg.layers / 2,
            _ => cfg.layers,
        };
        let n = rng.gen_range(1..=3);
        let ex = random_example(&mut rng, n, 6, cfg.vocab_size).with_label(labels.choose(&mut rng).unwrap().clone());
        let w = random_weights::<f64>(&cfg, labels.len(), rng.gen())?;
        let r = finite_diff_check(&w, &ex, &labels, DEFAULT_STEP, MIN_COORDINATES, rng.gen())?;
        stats.configs += 1;
        stats.coordinates += r.coordinates;
        stats.depths.push((cfg.parallel_layers, cfg.layers));
        if r.max_rel_error >= stats.max_rel_error {
            stats.max_rel_error = r.max_rel_error;
            stats.worst = format!("config {i}: {}", r.worst);
        }
    }
    Ok(stats)
}

/// Case counts for [`run_suite`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SuiteSize {
    pub dual_path: usize,
    pub endpoints: usize,
    pub counter: usize,
    pub cache_replay: usize,
    pub gradient_configs: usize,
}

impl Default for SuiteSize {
    fn default() -> Self {
        Self {
            dual_path: 100,
            endpoints: 50,
            counter: 1000,
            cache_replay: 500,
            gradient_configs: 21,
        }
    }
}

pub fn run_suite(seed: u64, size: SuiteSize) -> Result<SuiteReport> {
    let mut checks = Vec::new();

    let d = dual_path_stats(size.dual_path, seed)?;
    checks.push(CheckResult {
        name: "dual-path equivalence".into(),
        passed: d.max_diff_f32 < DUAL_PATH_TOL_F32 && d.max_diff_f64 < DUAL_PATH_TOL_F64,
        cases: d.cases,
        detail: format!("max abs diff f32 {:.3e}, f64 {:.3e}", d.max_diff_f32, d.max_diff_f64),
    });

    let bad = endpoint_mismatches(size.endpoints, seed ^ 0x0e)?;
    checks.push(CheckResult {
        name: "endpoint identities".into(),
        passed: bad == 0,
        cases: size.endpoints,
        detail: format!("{bad} non-identical endpoint encodings"),
    });

    let bad = counter_mismatches(size.counter, seed ^ 0xc0)?;
    checks.push(CheckResult {
        name: "op-counter agreement".into(),
        passed: bad == 0,
        cases: size.counter,
        detail: format!("{bad} disagreeing cases"),
    });

    let c = cache_replay(size.cache_replay, seed ^ 0xca)?;
    checks.push(CheckResult {
        name: "cache transparency".into(),
        passed: c.mismatches == 0 && c.hits > 0,
        cases: c.examples,
        detail: format!(
            "{} mismatches, {} hits, {} evictions",
            c.mismatches, c.hits, c.evictions
        ),
    });

    let g = gradient_stats(size.gradient_configs, seed ^ 0x9d)?;
    checks.push(CheckResult {
        name: "gradient check".into(),
        passed: g.max_rel_error < GRADIENT_TOL,
        cases: g.configs,
        detail: format!(
            "max rel err {:.3e} over {} coordinates (worst {})",
            g.max_rel_error, g.coordinates, g.worst
        ),
    });

    Ok(SuiteReport { seed, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let size = SuiteSize {
            dual_path: 10,
            endpoints: 5,
            counter: 40,
            cache_replay: 30,
            gradient_configs: 3,
        };
        let r = run_suite(3, size).unwrap();
        for c in &r.checks {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn replay_corpus_repeats_segments() {
        let data = replay_corpus(50, 5, 64, 1);
        let mut distinct: Vec<&Vec<u32>> = data.iter().flat_map(|e| &e.segments).collect();
        distinct.sort();
        distinct.dedup();
        assert!(distinct.len() <= 5);
    }

    #[test]
    fn gradient_depths_cycle() {
        let g = gradient_stats(3, 11).unwrap();
        let ps: Vec<usize> = g.depths.iter().map(|&(p, _)| p).collect();
        assert_eq!(ps[0], 0);
        assert_eq!(ps[1], g.depths[1].1 / 2);
        assert_eq!(ps[2], g.depths[2].1);
    }
}
