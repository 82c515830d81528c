//! Model parameters, seeded initialization and the `LAITW` weights file.
//!
//! File layout (all little-endian):
//!
//! ```text
//! "LAITW" | version u32 | 10 config u32s | label count u32 |
//! embedding | per layer: W_Q W_K W_V W_O W_1 W_2 norm1 norm2 [rel bias] |
//! head W | head b
//! ```
//!
//! Matrices are stored as row-major `f32`. The model fingerprint is FNV-1a 64
//! over every byte after the magic.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, PosScheme};
use crate::error::{FormatError, LaitError, Result};
use crate::io::fnv1a64;
use crate::tensor::{Matrix, Scalar};

pub const WEIGHTS_MAGIC: &[u8; 5] = b"LAITW";
pub const WEIGHTS_VERSION: u32 = 1;

/// Weights of one pre-norm encoder block. No bias vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T = f32> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub w1: Matrix<T>,
    pub w2: Matrix<T>,
    pub norm1: Vec<T>,
    pub norm2: Vec<T>,
    /// `rel_buckets x n_heads`, present only under the relative-bucket scheme.
    pub rel_bias: Option<Matrix<T>>,
}

/// Mean-pool followed by a linear map to label logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead<T = f32> {
    pub w: Matrix<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn num_labels(&self) -> usize {
        self.b.len()
    }
}

/// Every trainable tensor. Gradients share this layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T = f32> {
    pub embedding: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub head: ClassifierHead<T>,
}

/// Mutable view of one parameter tensor, labelled for diagnostics.
pub struct TensorMut<'a, T> {
    pub name: String,
    pub data: &'a mut [T],
}

impl<T: Scalar> Params<T> {
    /// All-zero parameters shaped for `cfg`.
    pub fn zeros(cfg: &ModelConfig, num_labels: usize) -> Self {
        let d = cfg.d_model;
        let layer = LayerWeights {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            w1: Matrix::zeros(d, cfg.d_ff),
            w2: Matrix::zeros(cfg.d_ff, d),
            norm1: vec![T::zero(); d],
            norm2: vec![T::zero(); d],
            rel_bias: (cfg.pos_scheme == PosScheme::RelativeBucket)
                .then(|| Matrix::zeros(cfg.rel_buckets, cfg.n_heads)),
        };
        Self {
            embedding: Matrix::zeros(cfg.vocab_size, d),
            layers: vec![layer; cfg.layers],
            head: ClassifierHead {
                w: Matrix::zeros(d, num_labels),
                b: vec![T::zero(); num_labels],
            },
        }
    }

    /// Parameter slices in file declaration order.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = vec![("embedding".into(), self.embedding.data())];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.wq"), l.wq.data()));
            out.push((format!("layer{i}.wk"), l.wk.data()));
            out.push((format!("layer{i}.wv"), l.wv.data()));
            out.push((format!("layer{i}.wo"), l.wo.data()));
            out.push((format!("layer{i}.w1"), l.w1.data()));
            out.push((format!("layer{i}.w2"), l.w2.data()));
            out.push((format!("layer{i}.norm1"), &l.norm1));
            out.push((format!("layer{i}.norm2"), &l.norm2));
            if let Some(t) = &l.rel_bias {
                out.push((format!("layer{i}.rel_bias"), t.data()));
            }
        }
        out.push(("head.w".into(), self.head.w.data()));
        out.push(("head.b".into(), &self.head.b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut out = vec![TensorMut {
            name: "embedding".into(),
            data: self.embedding.data_mut(),
        }];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let named = |n: &str, data| TensorMut {
                name: format!("layer{i}.{n}"),
                data,
            };
            out.push(named("wq", l.wq.data_mut()));
            out.push(named("wk", l.wk.data_mut()));
            out.push(named("wv", l.wv.data_mut()));
            out.push(named("wo", l.wo.data_mut()));
            out.push(named("w1", l.w1.data_mut()));
            out.push(named("w2", l.w2.data_mut()));
            out.push(named("norm1", &mut l.norm1));
            out.push(named("norm2", &mut l.norm2));
            if let Some(t) = &mut l.rel_bias {
                out.push(named("rel_bias", t.data_mut()));
            }
        }
        out.push(TensorMut {
            name: "head.w".into(),
            data: self.head.w.data_mut(),
        });
        out.push(TensorMut {
            name: "head.b".into(),
            data: &mut self.head.b,
        });
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn same_layout(&self, other: &Params<T>) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|((_, x), (_, y))| x.len() == y.len())
    }

    /// In-place `self += other`; layouts must match.
    pub fn accumulate(&mut self, other: &Params<T>) {
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(src) {
                *d += *s;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let vec_cast = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect::<Vec<U>>();
        Params {
            embedding: self.embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    w1: l.w1.cast(),
                    w2: l.w2.cast(),
                    norm1: vec_cast(&l.norm1),
                    norm2: vec_cast(&l.norm2),
                    rel_bias: l.rel_bias.as_ref().map(Matrix::cast),
                })
                .collect(),
            head: ClassifierHead {
                w: self.head.w.cast(),
                b: vec_cast(&self.head.b),
            },
        }
    }
}

/// Parameters plus their configuration and content fingerprint.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T = f32> {
    config: ModelConfig,
    params: Params<T>,
    fingerprint: u64,
}

fn glorot<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| T::from_f64(rng.gen_range(-limit..limit)))
}

impl<T: Scalar> ModelWeights<T> {
    /// Seeded init: Glorot-uniform projections, unit gains, uniform(-1, 1)
    /// embeddings, zero relative-bias table and zero head (so a fresh model
    /// predicts the uniform distribution).
    pub fn init(config: &ModelConfig, num_labels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let embedding = Matrix::from_fn(config.vocab_size, d, |_, _| T::from_f64(rng.gen_range(-1.0..1.0)));
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                wq: glorot(&mut rng, d, d),
                wk: glorot(&mut rng, d, d),
                wv: glorot(&mut rng, d, d),
                wo: glorot(&mut rng, d, d),
                w1: glorot(&mut rng, d, config.d_ff),
                w2: glorot(&mut rng, config.d_ff, d),
                norm1: vec![T::one(); d],
                norm2: vec![T::one(); d],
                rel_bias: (config.pos_scheme == PosScheme::RelativeBucket)
                    .then(|| Matrix::zeros(config.rel_buckets, config.n_heads)),
            })
            .collect();
        let head = ClassifierHead {
            w: Matrix::zeros(d, num_labels),
            b: vec![T::zero(); num_labels],
        };
        Self::from_params(
            config.clone(),
            Params {
                embedding,
                layers,
                head,
            },
        )
    }

    pub fn from_params(config: ModelConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        let expected = Params::<T>::zeros(&config, params.head.num_labels());
        if !expected.same_layout(&params) {
            return Err(LaitError::Config("parameter shapes do not match the config".into()));
        }
        let mut w = Self {
            config,
            params,
            fingerprint: 0,
        };
        w.refresh_fingerprint();
        Ok(w)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn head(&self) -> &ClassifierHead<T> {
        &self.params.head
    }

    pub fn num_labels(&self) -> usize {
        self.params.head.num_labels()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Mutates parameters in place; the fingerprint is recomputed afterwards.
    pub fn update<R>(&mut self, f: impl FnOnce(&mut Params<T>) -> R) -> R {
        let r = f(&mut self.params);
        self.refresh_fingerprint();
        r
    }

    /// Adds seeded uniform noise in `[-scale, scale]` to every parameter,
    /// including gains, relative biases and the head.
    pub fn jitter(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.update(|p| {
            for t in p.tensors_mut() {
                for v in t.data.iter_mut() {
                    *v += T::from_f64(rng.gen_range(-scale..=scale));
                }
            }
        });
    }

    /// Replaces the parallel-layer count, which is not part of the parameters.
    pub fn set_parallel_layers(&mut self, p: usize) -> Result<()> {
        let cfg = self.config.with_parallel_layers(p);
        cfg.validate()?;
        self.config = cfg;
        self.refresh_fingerprint();
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        let mut w = ModelWeights {
            config: self.config.clone(),
            params: self.params.cast(),
            fingerprint: 0,
        };
        w.refresh_fingerprint();
        w
    }

    fn refresh_fingerprint(&mut self) {
        let bytes = self.to_bytes();
        self.fingerprint = fingerprint_bytes(&bytes);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * self.params.num_params());
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        for f in self.config.header_fields() {
            out.extend_from_slice(&f.to_le_bytes());
        }
        out.extend_from_slice(&(self.num_labels() as u32).to_le_bytes());
        for (_, t) in self.params.tensors() {
            for v in t {
                out.extend_from_slice(&v.as_f32().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(WEIGHTS_MAGIC.len())?;
        if magic != WEIGHTS_MAGIC {
            return Err(FormatError::BadMagic {
                expected: "LAITW",
                found: magic.to_vec(),
            }
            .into());
        }
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(FormatError::Version {
                found: version,
                expected: WEIGHTS_VERSION,
            }
            .into());
        }
        let mut fields = [0u32; 10];
        for f in &mut fields {
            *f = r.u32()?;
        }
        let config = ModelConfig::from_header_fields(fields).map_err(|e| FormatError::InvalidHeader(e.to_string()))?;
        let num_labels = r.u32()? as usize;
        let expected_floats = param_count(&config, num_labels)
            .ok_or_else(|| FormatError::InvalidHeader("parameter count overflows".into()))?;
        let remaining = bytes.len() - r.pos;
        if remaining < expected_floats * 4 {
            return Err(FormatError::Truncated {
                offset: r.pos,
                needed: expected_floats * 4,
                available: remaining,
            }
            .into());
        }
        if remaining > expected_floats * 4 {
            return Err(FormatError::TrailingBytes(remaining - expected_floats * 4).into());
        }
        let mut params = Params::<T>::zeros(&config, num_labels);
        for t in params.tensors_mut() {
            for v in t.data.iter_mut() {
                *v = T::from_f32(r.f32()?);
            }
        }
        let mut w = Self {
            config,
            params,
            fingerprint: 0,
        };
        w.fingerprint = fingerprint_bytes(bytes);
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Number of scalars in a model of this shape, computed without allocating
/// so that a damaged header cannot request an absurd buffer.
fn param_count(cfg: &ModelConfig, num_labels: usize) -> Option<usize> {
    let d = cfg.d_model;
    let rel = if cfg.pos_scheme == PosScheme::RelativeBucket {
        cfg.rel_buckets.checked_mul(cfg.n_heads)?
    } else {
        0
    };
    let per_layer = d
        .checked_mul(d)?
        .checked_mul(4)?
        .checked_add(d.checked_mul(cfg.d_ff)?.checked_mul(2)?)?
        .checked_add(2 * d)?
        .checked_add(rel)?;
    per_layer
        .checked_mul(cfg.layers)?
        .checked_add(cfg.vocab_size.checked_mul(d)?)?
        .checked_add(d.checked_mul(num_labels)?)?
        .checked_add(num_labels)?
        .checked_mul(4)
        .map(|bytes| bytes / 4)
}

fn fingerprint_bytes(file: &[u8]) -> u64 {
    fnv1a64(&file[WEIGHTS_MAGIC.len()..])
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
