//! Claims x passages: every pairing encoded with and without the segment
//! cache, with measured attention pairs checked against the cost model.
//!
//! ```text
//! cargo run --release --example cartesian_cache -- 17x16 100x31
//! ```

use lait::bench::{bench_cartesian, BenchOptions, SegmentSet};
use lait::ModelConfig;

fn main() -> lait::Result<()> {
    let mut args = std::env::args().skip(1);
    let left: SegmentSet = args.next().as_deref().unwrap_or("17x16").parse()?;
    let right: SegmentSet = args.next().as_deref().unwrap_or("100x31").parse()?;
    let cfg = ModelConfig::tiny(12, 9, 32, 2, 64);
    let r = bench_cartesian(left, right, &cfg, 0, &BenchOptions::default())?;

    println!("{} pairings, L={} P={}", r.examples, r.layers, r.p);
    println!(
        "uncached: {} ops, median {:.1} ms",
        r.uncached_ops, r.uncached_time.median_ms
    );
    if let (Some(ops), Some(t)) = (r.cached_ops, &r.cached_time) {
        println!("cached:   {} ops, median {:.1} ms", ops, t.median_ms);
        println!(
            "op ratio {:.4}, speedup {:.2}x, counts match cost model: {}, outputs identical: {}",
            r.op_ratio.unwrap_or_default(),
            r.speedup.unwrap_or_default(),
            r.ops_match_analytic,
            r.outputs_identical.unwrap_or(false)
        );
    }
    Ok(())
}
