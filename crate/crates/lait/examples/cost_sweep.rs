//! Attention-op accounting: the worked 16 + 31 token example, then a sweep
//! over P for a small corpus with one repeated segment.

use lait::cost::{sweep, write_sweep_csv};
use lait::{attention_ops, LengthRecord, ModelConfig};

fn main() -> lait::Result<()> {
    let cfg = ModelConfig::default();
    let r = attention_ops(&[16, 31], 12, 9)?.with_flops(&cfg);
    println!(
        "L=12 P=9 lengths [16, 31]: parallel {} + joint {} = {} ops ({} FLOPs), {:.2}% of full attention",
        r.ops_parallel,
        r.ops_joint,
        r.ops_total,
        r.flops,
        100.0 * r.ratio
    );

    let record = |lengths: [usize; 2], digests: [&str; 2]| {
        LengthRecord::with_digests(lengths.to_vec(), digests.iter().map(|d| d.to_string()).collect())
    };
    let records = [
        record([16, 31], ["claim-a", "passage-1"]),
        record([16, 40], ["claim-a", "passage-2"]),
        record([12, 31], ["claim-b", "passage-1"]),
    ];
    write_sweep_csv(&sweep(&records, &cfg)?, std::io::stdout())
}
