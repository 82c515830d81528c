//! Analytic attention cost.
//!
//! For segment lengths `s_1..s_n`, `L` layers and `P` parallel layers:
//!
//! ```text
//! ops_parallel = P * sum(s_i^2)
//! ops_joint    = (L - P) * (sum s_i)^2
//! baseline     = L * (sum s_i)^2        (the same input with P = 0)
//! ```
//!
//! Dataset ratios are sums of per-example counts, never counts of average
//! lengths.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{LaitError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub ops_parallel: u64,
    pub ops_joint: u64,
    pub ops_total: u64,
    pub flops: u64,
    pub baseline_ops: u64,
    pub ratio: f64,
}

fn check_lengths(lengths: &[usize]) -> Result<()> {
    if lengths.is_empty() {
        return Err(LaitError::EmptySegment(0));
    }
    if let Some(i) = lengths.iter().position(|&l| l == 0) {
        return Err(LaitError::EmptySegment(i));
    }
    Ok(())
}

fn check_depth(layers: usize, p: usize) -> Result<()> {
    if p > layers {
        return Err(LaitError::Config(format!("P={p} exceeds L={layers}")));
    }
    Ok(())
}

fn sum_sq(lengths: &[usize]) -> u64 {
    lengths.iter().map(|&l| (l * l) as u64).sum()
}

fn total_sq(lengths: &[usize]) -> u64 {
    let m: u64 = lengths.iter().map(|&l| l as u64).sum();
    m * m
}

/// Attention operation counts for one input. `flops` is left at zero; see
/// [`CostReport::with_flops`].
pub fn attention_ops(lengths: &[usize], layers: usize, p: usize) -> Result<CostReport> {
    check_lengths(lengths)?;
    check_depth(layers, p)?;
    let ops_parallel = p as u64 * sum_sq(lengths);
    let ops_joint = (layers - p) as u64 * total_sq(lengths);
    let baseline_ops = layers as u64 * total_sq(lengths);
    let ops_total = ops_parallel + ops_joint;
    Ok(CostReport {
        ops_parallel,
        ops_joint,
        ops_total,
        flops: 0,
        baseline_ops,
        ratio: if baseline_ops == 0 {
            1.0
        } else {
            ops_total as f64 / baseline_ops as f64
        },
    })
}

impl CostReport {
    pub fn with_flops(mut self, cfg: &ModelConfig) -> Self {
        self.flops = ops_to_flops(self.ops_total, cfg);
        self
    }
}

/// Four multiply-adds' worth of FLOPs per head dimension per attended pair:
/// two for the query-key score, two for accumulating the value.
pub fn ops_to_flops(ops: u64, cfg: &ModelConfig) -> u64 {
    ops * 4 * cfg.n_heads as u64 * cfg.d_head as u64
}

/// Segment lengths of one example, how often it occurs, and optional
/// per-segment content digests for reuse accounting.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthRecord {
    pub lengths: Vec<usize>,
    #[serde(rename = "mult", default = "one")]
    pub multiplicity: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digests: Option<Vec<String>>,
}

fn one() -> u64 {
    1
}

impl LengthRecord {
    pub fn new(lengths: Vec<usize>) -> Self {
        Self {
            lengths,
            multiplicity: 1,
            digests: None,
        }
    }

    pub fn with_digests(lengths: Vec<usize>, digests: Vec<String>) -> Self {
        Self {
            lengths,
            multiplicity: 1,
            digests: Some(digests),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DatasetCost {
    pub ops_total: u64,
    pub baseline_ops: u64,
    pub ratio: f64,
}

fn ratio(ops: u64, baseline: u64) -> f64 {
    if baseline == 0 {
        1.0
    } else {
        ops as f64 / baseline as f64
    }
}

pub fn dataset_totals(records: &[LengthRecord], layers: usize, p: usize) -> Result<DatasetCost> {
    if records.is_empty() {
        return Err(LaitError::Config("no length records".into()));
    }
    let (mut ops, mut base) = (0u64, 0u64);
    for r in records {
        let c = attention_ops(&r.lengths, layers, p)?;
        ops += c.ops_total * r.multiplicity;
        base += c.baseline_ops * r.multiplicity;
    }
    Ok(DatasetCost {
        ops_total: ops,
        baseline_ops: base,
        ratio: ratio(ops, base),
    })
}

/// Dataset-level ratio of attention ops at `P` versus `P = 0`.
pub fn dataset_cost(records: &[LengthRecord], layers: usize, p: usize) -> Result<f64> {
    Ok(dataset_totals(records, layers, p)?.ratio)
}

/// Totals when layer-`P` segment representations are computed once per
/// unique digest and reused; joint layers still run for every occurrence.
pub fn cached_dataset_totals(records: &[LengthRecord], layers: usize, p: usize) -> Result<DatasetCost> {
    if records.is_empty() {
        return Err(LaitError::Config("no length records".into()));
    }
    check_depth(layers, p)?;
    let mut unique: HashMap<&str, usize> = HashMap::new();
    let (mut joint, mut base) = (0u64, 0u64);
    for (i, r) in records.iter().enumerate() {
        check_lengths(&r.lengths)?;
        let digests = r.digests.as_ref().ok_or(LaitError::MissingDigests(i))?;
        if digests.len() != r.lengths.len() {
            return Err(LaitError::MissingDigests(i));
        }
        for (d, &len) in digests.iter().zip(&r.lengths) {
            unique.entry(d.as_str()).or_insert(len);
        }
        joint += (layers - p) as u64 * total_sq(&r.lengths) * r.multiplicity;
        base += layers as u64 * total_sq(&r.lengths) * r.multiplicity;
    }
    let parallel: u64 = unique.values().map(|&l| p as u64 * (l * l) as u64).sum();
    let ops = parallel + joint;
    Ok(DatasetCost {
        ops_total: ops,
        baseline_ops: base,
        ratio: ratio(ops, base),
    })
}

pub fn cached_dataset_cost(records: &[LengthRecord], layers: usize, p: usize) -> Result<f64> {
    Ok(cached_dataset_totals(records, layers, p)?.ratio)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    #[serde(rename = "P")]
    pub p: usize,
    pub ops_total: u64,
    pub flops: u64,
    pub ratio_full: f64,
    pub ratio_cached: Option<f64>,
}

/// One row per `P` in `0..=L`. The cached ratio is present only when every
/// record carries digests.
pub fn sweep(records: &[LengthRecord], cfg: &ModelConfig) -> Result<Vec<SweepRow>> {
    let have_digests = records.iter().all(|r| r.digests.is_some());
    (0..=cfg.layers)
        .map(|p| {
            let full = dataset_totals(records, cfg.layers, p)?;
            let ratio_cached = if have_digests {
                Some(cached_dataset_cost(records, cfg.layers, p)?)
            } else {
                None
            };
            Ok(SweepRow {
                p,
                ops_total: full.ops_total,
                flops: ops_to_flops(full.ops_total, cfg),
                ratio_full: full.ratio,
                ratio_cached,
            })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_lengths_jsonl(reader: impl BufRead) -> Result<Vec<LengthRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LengthRecord = serde_json::from_str(&line).map_err(|e| LaitError::Input {
            line: i + 1,
            message: e.to_string(),
        })?;
        check_lengths(&rec.lengths).map_err(|e| LaitError::Input {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_halves() {
        assert_eq!(attention_ops(&[7, 3, 9], 12, 0).unwrap().ratio, 1.0);
        let r = attention_ops(&[10, 10], 12, 12).unwrap();
        assert_eq!(r.ratio, 0.5);
        assert!(attention_ops(&[1], 2, 3).is_err());
        assert!(attention_ops(&[1, 0], 2, 1).is_err());
    }

    #[test]
    fn mnli_like_case() {
        let r = attention_ops(&[16, 31], 12, 9).unwrap();
        assert_eq!(r.ops_parallel, 10953);
        assert_eq!(r.ops_joint, 6627);
        assert_eq!(r.ops_total, 17580);
        assert_eq!(r.baseline_ops, 26508);
        assert!((r.ratio - 0.6632).abs() < 5e-5);
    }

    #[test]
    fn flops_conversion() {
        let base = ModelConfig::default();
        assert_eq!(ops_to_flops(0, &base), 0);
        assert_eq!(ops_to_flops(1, &base), 3072);
        assert_eq!(ops_to_flops(17580, &base), 54_005_760);
        assert_eq!(
            attention_ops(&[16, 31], 12, 9).unwrap().with_flops(&base).flops,
            54_005_760
        );
    }

    #[test]
    fn dataset_examples() {
        let singles = vec![LengthRecord::new(vec![5]), LengthRecord::new(vec![9])];
        for p in 0..=4 {
            assert_eq!(dataset_cost(&singles, 4, p).unwrap(), 1.0);
        }
        let pair = vec![LengthRecord::new(vec![10, 10]), LengthRecord::new(vec![10, 10])];
        assert_eq!(dataset_cost(&pair, 12, 12).unwrap(), 0.5);
        let mixed = vec![LengthRecord::new(vec![4, 4]), LengthRecord::new(vec![2, 6])];
        assert_eq!(dataset_cost(&mixed, 4, 4).unwrap(), 0.5625);
        assert!(dataset_cost(&[], 4, 4).is_err());
    }

    fn cartesian(claims: usize, claim_len: usize, passages: usize, passage_len: usize) -> Vec<LengthRecord> {
        let mut out = Vec::new();
        for c in 0..claims {
            for p in 0..passages {
                out.push(LengthRecord::with_digests(
                    vec![claim_len, passage_len],
                    vec![format!("c{c}"), format!("p{p}")],
                ));
            }
        }
        out
    }

    #[test]
    fn cartesian_caching_hand_numbers() {
        let recs = cartesian(17, 16, 100, 31);
        let full = dataset_totals(&recs, 12, 9).unwrap();
        assert_eq!(full.ops_total, 29_886_000);
        let cached = cached_dataset_totals(&recs, 12, 9).unwrap();
        assert_eq!(cached.ops_total, 12_169_968);
        assert!((cached.ops_total as f64 / full.ops_total as f64 - 0.407).abs() < 5e-4);
    }

    #[test]
    fn unique_segments_match_uncached() {
        let recs = vec![
            LengthRecord::with_digests(vec![3, 4], vec!["a".into(), "b".into()]),
            LengthRecord::with_digests(vec![5, 2], vec!["c".into(), "d".into()]),
        ];
        for p in 0..=6 {
            assert_eq!(
                cached_dataset_totals(&recs, 6, p).unwrap().ops_total,
                dataset_totals(&recs, 6, p).unwrap().ops_total
            );
        }
        assert!(matches!(
            cached_dataset_cost(&[LengthRecord::new(vec![1, 2])], 2, 1),
            Err(LaitError::MissingDigests(0))
        ));
    }

    #[test]
    fn multiplicity_doubles_only_joint_cost() {
        let recs = cartesian(2, 4, 3, 6);
        let doubled: Vec<_> = recs
            .iter()
            .cloned()
            .map(|mut r| {
                r.multiplicity = 2;
                r
            })
            .collect();
        let (l, p) = (6, 4);
        let a = cached_dataset_totals(&recs, l, p).unwrap().ops_total;
        let b = cached_dataset_totals(&doubled, l, p).unwrap().ops_total;
        let joint: u64 = recs
            .iter()
            .map(|r| attention_ops(&r.lengths, l, p).unwrap().ops_joint)
            .sum();
        assert_eq!(b - a, joint);
    }

    #[test]
    fn sweep_csv_shape() {
        let recs = vec![LengthRecord::new(vec![16, 31])];
        let rows = sweep(&recs, &ModelConfig::default()).unwrap();
        assert_eq!(rows.len(), 13);
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("P,ops_total,flops,ratio_full,ratio_cached\n0,"));
        assert_eq!(text.lines().count(), 14);
    }

    #[test]
    fn lengths_jsonl() {
        let text = "{\"lengths\":[16,31],\"mult\":2,\"digests\":[\"a\",\"b\"]}\n{\"lengths\":[3]}\n";
        let recs = read_lengths_jsonl(text.as_bytes()).unwrap();
        assert_eq!(recs[0].multiplicity, 2);
        assert_eq!(recs[1].multiplicity, 1);
        assert!(recs[1].digests.is_none());
        match read_lengths_jsonl("{\"lengths\":[1]}\n{\"lengths\":[0]}\n".as_bytes()) {
            Err(LaitError::Input { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn total_strictly_decreases_in_p(lengths in proptest::collection::vec(1usize..60, 2..6), layers in 1usize..14) {
                let mut prev = attention_ops(&lengths, layers, 0).unwrap();
                prop_assert_eq!(prev.ratio, 1.0);
                for p in 1..=layers {
                    let cur = attention_ops(&lengths, layers, p).unwrap();
                    prop_assert!(cur.ops_total < prev.ops_total);
                    prop_assert_eq!(cur.ops_total, cur.ops_parallel + cur.ops_joint);
                    prop_assert!(cur.ratio > 0.0 && cur.ratio <= 1.0);
                    prev = cur;
                }
            }

            #[test]
            fn caching_never_costs_more(
                recs in proptest::collection::vec(
                    proptest::collection::vec((1usize..30, 0u8..6), 1..4), 1..12),
                layers in 1usize..8,
            ) {
                let records: Vec<LengthRecord> = recs.iter().map(|segs| {
                    // digest determines length so duplicates are consistent
                    LengthRecord::with_digests(
                        segs.iter().map(|&(_, d)| d as usize + 1).collect(),
                        segs.iter().map(|&(_, d)| format!("d{d}")).collect(),
                    )
                }).collect();
                let repeats = {
                    let mut seen = std::collections::HashSet::new();
                    records.iter().flat_map(|r| r.digests.clone().unwrap()).any(|d| !seen.insert(d))
                };
                for p in 0..=layers {
                    let full = dataset_cost(&records, layers, p).unwrap();
                    let cached = cached_dataset_cost(&records, layers, p).unwrap();
                    prop_assert!(cached <= full);
                    if p > 0 {
                        prop_assert_eq!(cached == full, !repeats);
                    }
                }
            }
        }
    }
}
