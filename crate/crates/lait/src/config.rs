use serde::{Deserialize, Serialize};

use crate::error::{LaitError, Result};

/// Ids 0 (PAD) and 1 (EOS) are reserved by the tokenizer.
pub const RESERVED_IDS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosScheme {
    None,
    /// Sinusoidal encodings of per-segment positions added at embedding time.
    SinusoidalLocal,
    /// Learned per-head bias over bucketed relative offsets.
    RelativeBucket,
}

impl PosScheme {
    pub fn code(self) -> u32 {
        match self {
            PosScheme::None => 0,
            PosScheme::SinusoidalLocal => 1,
            PosScheme::RelativeBucket => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(PosScheme::None),
            1 => Some(PosScheme::SinusoidalLocal),
            2 => Some(PosScheme::RelativeBucket),
            _ => None,
        }
    }
}

impl std::str::FromStr for PosScheme {
    type Err = LaitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PosScheme::None),
            "sinusoidal-local" => Ok(PosScheme::SinusoidalLocal),
            "relative-bucket" => Ok(PosScheme::RelativeBucket),
            other => Err(LaitError::Config(format!("unknown position scheme `{other}`"))),
        }
    }
}

/// Encoder architecture. `layers` is the total depth and `parallel_layers`
/// the number of leading layers that see one segment at a time.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub parallel_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub pos_scheme: PosScheme,
    pub rel_buckets: usize,
    pub rel_max_distance: usize,
}

impl Default for ModelConfig {
    /// The base reference configuration: 12 layers of 768 wide, 12 heads of 64.
    fn default() -> Self {
        Self {
            layers: 12,
            parallel_layers: 0,
            d_model: 768,
            n_heads: 12,
            d_head: 64,
            d_ff: 3072,
            vocab_size: 32128,
            pos_scheme: PosScheme::RelativeBucket,
            rel_buckets: 32,
            rel_max_distance: 128,
        }
    }
}

impl ModelConfig {
    /// A small config with `d_head = d_model / n_heads`.
    pub fn tiny(layers: usize, parallel_layers: usize, d_model: usize, n_heads: usize, d_ff: usize) -> Self {
        Self {
            layers,
            parallel_layers,
            d_model,
            n_heads,
            d_head: d_model / n_heads.max(1),
            d_ff,
            vocab_size: 256,
            ..Self::default()
        }
    }

    pub fn with_parallel_layers(&self, p: usize) -> Self {
        Self {
            parallel_layers: p,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_head == 0 || self.n_heads * self.d_head != self.d_model {
            return Err(LaitError::Config(format!(
                "n_heads ({}) x d_head ({}) must equal d_model ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if self.parallel_layers > self.layers {
            return Err(LaitError::Config(format!(
                "parallel layers P={} exceed total layers L={}",
                self.parallel_layers, self.layers
            )));
        }
        if self.vocab_size <= RESERVED_IDS {
            return Err(LaitError::Config(format!(
                "vocab_size {} leaves no room beyond the {RESERVED_IDS} reserved ids",
                self.vocab_size
            )));
        }
        if self.d_ff == 0 {
            return Err(LaitError::Config("d_ff must be positive".into()));
        }
        if self.pos_scheme == PosScheme::RelativeBucket
            && (self.rel_buckets < 4 || !self.rel_buckets.is_multiple_of(2) || self.rel_max_distance <= self.rel_buckets / 4)
        {
            return Err(LaitError::Config(format!(
                "relative buckets {} / max distance {} are inconsistent",
                self.rel_buckets, self.rel_max_distance
            )));
        }
        Ok(())
    }

    /// Fields in the order they appear in the weights file header.
    pub fn header_fields(&self) -> [u32; 10] {
        [
            self.layers as u32,
            self.parallel_layers as u32,
            self.d_model as u32,
            self.n_heads as u32,
            self.d_head as u32,
            self.d_ff as u32,
            self.vocab_size as u32,
            self.pos_scheme.code(),
            self.rel_buckets as u32,
            self.rel_max_distance as u32,
        ]
    }

    pub fn from_header_fields(f: [u32; 10]) -> Result<Self> {
        let pos_scheme = PosScheme::from_code(f[7])
            .ok_or_else(|| LaitError::Config(format!("unknown position scheme code {}", f[7])))?;
        let cfg = Self {
            layers: f[0] as usize,
            parallel_layers: f[1] as usize,
            d_model: f[2] as usize,
            n_heads: f[3] as usize,
            d_head: f[4] as usize,
            d_ff: f[5] as usize,
            vocab_size: f[6] as usize,
            pos_scheme,
            rel_buckets: f[8] as usize,
            rel_max_distance: f[9] as usize,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_base_config() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.d_model, cfg.n_heads, cfg.d_head), (768, 12, 64));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::tiny(4, 5, 32, 2, 64);
        assert!(cfg.validate().is_err());
        cfg.parallel_layers = 2;
        cfg.validate().unwrap();
        cfg.d_head = 8;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny(2, 0, 8, 2, 8);
        cfg.vocab_size = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn header_fields_round_trip() {
        let cfg = ModelConfig::tiny(3, 1, 16, 4, 24);
        assert_eq!(ModelConfig::from_header_fields(cfg.header_fields()).unwrap(), cfg);
    }
}
