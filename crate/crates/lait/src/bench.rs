//! Encoding workloads with and without the segment cache.
//!
//! Two workloads: the Cartesian product of two segment sets (every left
//! segment paired with every right segment), and a replay of a JSONL corpus
//! arriving one example at a time. Both report measured attention pairs next
//! to the analytic counts, plus wall-clock timing over repeated passes.

use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cache::{token_digest, CacheStats, RepCache};
use crate::config::{ModelConfig, RESERVED_IDS};
use crate::cost::{cached_dataset_totals, dataset_totals, LengthRecord};
use crate::error::{LaitError, Result};
use crate::pipeline::{lait_encode, segment_lengths, SegmentedExample, EOS_ID};
use crate::weights::ModelWeights;

/// `COUNTxLEN`, e.g. `17x16`: seventeen segments of sixteen tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SegmentSet {
    pub count: usize,
    pub len: usize,
}

impl FromStr for SegmentSet {
    type Err = LaitError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || LaitError::Config(format!("expected COUNTxLEN, got `{s}`"));
        let (c, l) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        let count: usize = c.trim().parse().map_err(|_| bad())?;
        let len: usize = l.trim().parse().map_err(|_| bad())?;
        if count == 0 || len == 0 {
            return Err(bad());
        }
        Ok(Self { count, len })
    }
}

impl std::fmt::Display for SegmentSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.count, self.len)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchOptions {
    /// Timed passes per mode; at least 5 for reported statistics.
    pub repetitions: usize,
    pub workers: usize,
    /// `None` means unbounded.
    pub cache_budget_bytes: Option<usize>,
    /// Also run the cached mode and compare.
    pub use_cache: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            repetitions: 5,
            workers: 1,
            cache_budget_bytes: None,
            use_cache: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Timing {
    pub median_ms: f64,
    pub std_ms: f64,
    pub samples_ms: Vec<f64>,
}

impl Timing {
    pub fn from_samples(samples_ms: Vec<f64>) -> Self {
        let mut s = samples_ms.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median_ms = match n {
            0 => 0.0,
            _ if n % 2 == 1 => s[n / 2],
            _ => 0.5 * (s[n / 2 - 1] + s[n / 2]),
        };
        let std_ms = if n < 2 {
            0.0
        } else {
            let mean = s.iter().sum::<f64>() / n as f64;
            (s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self {
            median_ms,
            std_ms,
            samples_ms,
        }
    }
}

/// Everything measured in one workload run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub workload: String,
    pub examples: usize,
    pub layers: usize,
    pub p: usize,
    pub workers: usize,
    pub uncached_ops: u64,
    pub analytic_uncached_ops: u64,
    pub cached_ops: Option<u64>,
    pub analytic_cached_ops: Option<u64>,
    /// Measured cached / uncached attention pairs.
    pub op_ratio: Option<f64>,
    pub ops_match_analytic: bool,
    /// Cached and uncached representations compared bit for bit.
    pub outputs_identical: Option<bool>,
    pub uncached_time: Timing,
    pub cached_time: Option<Timing>,
    pub speedup: Option<f64>,
    pub cache: Option<CacheStats>,
    pub hit_rate: Option<f64>,
}

/// Length record with hex token digests, as consumed by the cached cost model.
pub fn length_record(ex: &SegmentedExample) -> LengthRecord {
    LengthRecord::with_digests(
        segment_lengths(ex),
        ex.segments
            .iter()
            .map(|s| format!("{:016x}", token_digest(s)))
            .collect(),
    )
}

fn random_segment(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
    let mut s: Vec<u32> = (0..len - 1)
        .map(|_| rng.gen_range(RESERVED_IDS as u32..vocab as u32))
        .collect();
    s.push(EOS_ID);
    s
}

/// Every (left, right) pairing, left-major. Segment lengths include EOS.
pub fn cartesian_examples(left: SegmentSet, right: SegmentSet, vocab: usize, seed: u64) -> Vec<SegmentedExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lefts: Vec<Vec<u32>> = (0..left.count)
        .map(|_| random_segment(&mut rng, left.len, vocab))
        .collect();
    let rights: Vec<Vec<u32>> = (0..right.count)
        .map(|_| random_segment(&mut rng, right.len, vocab))
        .collect();
    lefts
        .iter()
        .flat_map(|l| {
            rights.iter().map(move |r| SegmentedExample {
                segments: vec![l.clone(), r.clone()],
                segment_texts: Vec::new(),
                task_id: "cartesian".into(),
                label: None,
            })
        })
        .collect()
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| LaitError::Config(format!("thread pool: {e}")))
}

/// One pass; returns total attention pairs. With `workers > 1` examples are
/// encoded concurrently against the shared cache.
fn encode_pass(
    data: &[SegmentedExample],
    weights: &ModelWeights<f32>,
    cache: Option<&RepCache<f32>>,
    pool: &rayon::ThreadPool,
) -> Result<u64> {
    if pool.current_num_threads() <= 1 {
        let mut ops = 0;
        for ex in data {
            ops += lait_encode(ex, weights, cache)?.counter.attention_pairs;
        }
        return Ok(ops);
    }
    pool.install(|| {
        data.par_iter()
            .map(|ex| lait_encode(ex, weights, cache).map(|e| e.counter.attention_pairs))
            .sum::<Result<u64>>()
    })
}

fn new_cache(opts: &BenchOptions) -> RepCache<f32> {
    RepCache::new(opts.cache_budget_bytes.unwrap_or(usize::MAX))
}

/// Runs `data` uncached and (optionally) cached, each `opts.repetitions`
/// times. Every cached pass starts from an empty cache, so its timing
/// includes the misses that fill it. Cached-mode output is then compared
/// with uncached output example by example.
pub fn run_workload(
    name: &str,
    data: &[SegmentedExample],
    weights: &ModelWeights<f32>,
    opts: &BenchOptions,
) -> Result<BenchReport> {
    if data.is_empty() {
        return Err(LaitError::Config("empty workload".into()));
    }
    let cfg = weights.config();
    let (layers, p) = (cfg.layers, cfg.parallel_layers);
    let reps = opts.repetitions.max(1);
    let pool = pool(opts.workers)?;
    let records: Vec<LengthRecord> = data.iter().map(length_record).collect();
    let analytic_uncached = dataset_totals(&records, layers, p)?.ops_total;

    let use_cache = opts.use_cache && p > 0;
    let analytic_cached = if use_cache {
        Some(cached_dataset_totals(&records, layers, p)?.ops_total)
    } else {
        None
    };
    // Modes alternate within each repetition so that background load hits
    // both of them alike.
    let (mut uncached_ops, mut cached_ops) = (0, 0);
    let mut stats = CacheStats::default();
    let (mut plain_ms, mut cached_ms) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
    for _ in 0..reps {
        let t = Instant::now();
        uncached_ops = encode_pass(data, weights, None, &pool)?;
        plain_ms.push(t.elapsed().as_secs_f64() * 1e3);
        if use_cache {
            let cache = new_cache(opts);
            let t = Instant::now();
            cached_ops = encode_pass(data, weights, Some(&cache), &pool)?;
            cached_ms.push(t.elapsed().as_secs_f64() * 1e3);
            stats = cache.stats();
        }
    }
    let mut report = BenchReport {
        workload: name.into(),
        examples: data.len(),
        layers,
        p,
        workers: pool.current_num_threads(),
        uncached_ops,
        analytic_uncached_ops: analytic_uncached,
        cached_ops: None,
        analytic_cached_ops: None,
        op_ratio: None,
        ops_match_analytic: uncached_ops == analytic_uncached,
        outputs_identical: None,
        uncached_time: Timing::from_samples(plain_ms),
        cached_time: None,
        speedup: None,
        cache: None,
        hit_rate: None,
    };
    let Some(analytic_cached) = analytic_cached else {
        return Ok(report);
    };
    let cached_time = Timing::from_samples(cached_ms);

    let cache = new_cache(opts);
    let mut identical = true;
    for ex in data {
        let plain = lait_encode(ex, weights, None)?;
        let reused = lait_encode(ex, weights, Some(&cache))?;
        identical &= plain.reps == reused.reps;
    }

    report.speedup = Some(report.uncached_time.median_ms / cached_time.median_ms.max(1e-9));
    report.cached_ops = Some(cached_ops);
    report.analytic_cached_ops = Some(analytic_cached);
    report.op_ratio = Some(cached_ops as f64 / uncached_ops as f64);
    report.ops_match_analytic &= cached_ops == analytic_cached;
    report.outputs_identical = Some(identical);
    report.cached_time = Some(cached_time);
    report.hit_rate = Some(stats.hit_rate());
    report.cache = Some(stats);
    Ok(report)
}

/// The `lait bench cartesian` workload on a freshly initialized model.
pub fn bench_cartesian(
    left: SegmentSet,
    right: SegmentSet,
    cfg: &ModelConfig,
    seed: u64,
    opts: &BenchOptions,
) -> Result<BenchReport> {
    let weights = ModelWeights::<f32>::init(cfg, 2, seed)?;
    let data = cartesian_examples(left, right, cfg.vocab_size, seed);
    run_workload(&format!("cartesian {left} x {right}"), &data, &weights, opts)
}

/// Sequential arrival of a corpus against a byte-budgeted cache.
pub fn bench_replay(
    data: &[SegmentedExample],
    weights: &ModelWeights<f32>,
    opts: &BenchOptions,
) -> Result<BenchReport> {
    run_workload("replay", data, weights, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_set_parsing() {
        assert_eq!(
            "17x16".parse::<SegmentSet>().unwrap(),
            SegmentSet { count: 17, len: 16 }
        );
        assert_eq!("100X31".parse::<SegmentSet>().unwrap().len, 31);
        for bad in ["17", "x16", "0x4", "3x0", "axb"] {
            assert!(bad.parse::<SegmentSet>().is_err(), "{bad}");
        }
    }

    #[test]
    fn timing_statistics() {
        let t = Timing::from_samples(vec![3.0, 1.0, 2.0, 10.0, 4.0]);
        assert_eq!(t.median_ms, 3.0);
        // mean 4, squared deviations 1+9+4+36+0 = 50, / 4
        assert!((t.std_ms - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(Timing::from_samples(vec![1.0, 2.0]).median_ms, 1.5);
    }

    #[test]
    fn cartesian_shape() {
        let data = cartesian_examples(SegmentSet { count: 3, len: 4 }, SegmentSet { count: 5, len: 6 }, 64, 1);
        assert_eq!(data.len(), 15);
        assert!(data.iter().all(|e| segment_lengths(e) == vec![4, 6]));
        assert_eq!(data[0].segments[0], data[4].segments[0]);
        assert_eq!(data[0].segments[1], data[5].segments[1]);
    }

    #[test]
    fn small_cartesian_counts_match_cost_model() {
        let cfg = ModelConfig::tiny(4, 3, 16, 2, 16);
        let opts = BenchOptions {
            repetitions: 1,
            ..BenchOptions::default()
        };
        let r = bench_cartesian(
            SegmentSet { count: 3, len: 5 },
            SegmentSet { count: 4, len: 7 },
            &cfg,
            2,
            &opts,
        )
        .unwrap();
        // uncached: 12 * (3*25 + 3*49 + 1*144) = 12 * 366
        assert_eq!(r.uncached_ops, 12 * 366);
        // cached: 3*(3*25 + 4*49) + 12*144
        assert_eq!(r.cached_ops, Some(3 * (3 * 25 + 4 * 49) + 12 * 144));
        assert!(r.ops_match_analytic);
        assert_eq!(r.outputs_identical, Some(true));
        assert_eq!(r.cache.as_ref().unwrap().misses, 7);
    }

    #[test]
    fn concurrent_workers_keep_outputs_identical() {
        let cfg = ModelConfig::tiny(3, 2, 16, 2, 16);
        let opts = BenchOptions {
            repetitions: 1,
            workers: 3,
            ..BenchOptions::default()
        };
        let r = bench_cartesian(
            SegmentSet { count: 2, len: 4 },
            SegmentSet { count: 5, len: 3 },
            &cfg,
            4,
            &opts,
        )
        .unwrap();
        assert_eq!(r.outputs_identical, Some(true));
        assert!(r.cached_ops.unwrap() >= r.analytic_cached_ops.unwrap());
    }
}
