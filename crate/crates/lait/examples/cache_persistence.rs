//! Fills a byte-budgeted cache from a repeating corpus, writes it to a
//! directory, and reloads it into a fresh process-level cache.

use lait::cache::RepCache;
use lait::verify::replay_corpus;
use lait::{lait_encode, ModelConfig, ModelWeights};

fn main() -> lait::Result<()> {
    let cfg = ModelConfig {
        vocab_size: 64,
        ..ModelConfig::tiny(4, 2, 16, 2, 32)
    };
    let weights = ModelWeights::<f32>::init(&cfg, 2, 1)?;
    let data = replay_corpus(200, 30, cfg.vocab_size, 5);

    let cache = RepCache::new(20 * 1024);
    for ex in &data {
        lait_encode(ex, &weights, Some(&cache))?;
    }
    let s = cache.stats();
    println!(
        "{} entries, {} resident bytes of {}, hit rate {:.3}, {} evictions",
        cache.len(),
        cache.resident_bytes(),
        cache.budget(),
        s.hit_rate(),
        s.evictions
    );

    let dir = tempfile::tempdir()?;
    let written = cache.save_dir(dir.path())?;
    let reloaded = RepCache::new(cache.budget());
    let read = reloaded.load_dir(dir.path())?;
    println!("wrote {written} entry files, reloaded {read}");

    let mut identical = true;
    for ex in &data {
        identical &= lait_encode(ex, &weights, Some(&reloaded))?.reps == lait_encode(ex, &weights, None)?.reps;
    }
    println!("reloaded cache reproduces uncached output: {identical}");
    Ok(())
}
