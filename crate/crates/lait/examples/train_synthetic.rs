//! Trains the small synthetic model at one parallel-layer setting and prints
//! the learning curve.
//!
//! ```text
//! cargo run --release --example train_synthetic -- --p 0 --steps 3000
//! ```

use std::time::Instant;

use clap::Parser;
use lait::train::{train, SyntheticKind, SyntheticTaskSpec, TrainOptions};
use lait::{ModelConfig, PosScheme};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 0)]
    p: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value = "relative-bucket")]
    pos: PosScheme,
    #[arg(long, default_value = "copy_vs_shuffle")]
    task: SyntheticKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> lait::Result<()> {
    let args = Args::parse();
    let spec = SyntheticTaskSpec {
        kind: args.task,
        seq_len: 8,
        vocab: 50,
        n_train: 4096,
        n_eval: 1024,
        seed: args.seed,
    };
    let cfg = ModelConfig {
        vocab_size: 50,
        pos_scheme: args.pos,
        ..ModelConfig::tiny(args.layers, args.p, 32, 2, 64)
    };
    let mut opts = TrainOptions {
        steps: args.steps,
        batch_size: args.batch,
        seed: args.seed,
        ..TrainOptions::default()
    };
    opts.adam.lr = args.lr;
    let start = Instant::now();
    let (_, metrics) = train(&spec, &cfg, &opts)?;
    for c in &metrics.curve {
        println!("step {:>5}  loss {:.4}  eval {:.4}", c.step, c.loss, c.eval_accuracy);
    }
    println!(
        "P={} final {:.4} best {:.4} in {:.1}s",
        args.p,
        metrics.final_eval_accuracy,
        metrics.best_eval_accuracy,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
