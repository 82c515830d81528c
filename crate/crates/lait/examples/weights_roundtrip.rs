//! Saves a model to the binary weights format, reloads it, and shows what a
//! damaged file reports.

use lait::{ModelConfig, ModelWeights};

fn main() -> lait::Result<()> {
    let cfg = ModelConfig::tiny(3, 1, 16, 2, 32);
    let w = ModelWeights::<f32>::init(&cfg, 3, 11)?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.laitw");
    w.save(&path)?;
    let back = ModelWeights::<f32>::load(&path)?;
    println!(
        "{} bytes, fingerprint {:016x}, reload identical: {}",
        std::fs::metadata(&path)?.len(),
        w.fingerprint(),
        back == w
    );

    let mut bytes = std::fs::read(&path)?;
    bytes[0] = b'X';
    println!("bad magic: {}", ModelWeights::<f32>::from_bytes(&bytes).unwrap_err());
    let bytes = std::fs::read(&path)?;
    println!(
        "truncated: {}",
        ModelWeights::<f32>::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err()
    );
    Ok(())
}
