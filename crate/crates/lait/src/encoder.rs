//! Pre-norm transformer encoder blocks with masked multi-head attention.
//!
//! Positions are supplied by the caller. Under the relative-bucket scheme they
//! only enter through `k_position - q_position`, so the caller decides whether
//! a token sequence is numbered locally or globally.

use crate::config::{ModelConfig, PosScheme};
use crate::error::{LaitError, Result};
use crate::mask::AttentionMask;
use crate::tensor::{matmul, matmul_bt, relu, rms_inv, row_softmax_masked, Matrix, Scalar};
use crate::weights::{LayerWeights, ModelWeights};

/// Counts allowed query/key pairs processed by attention calls.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub attention_pairs: u64,
    pub layer_calls: u64,
}

impl OpCounter {
    pub fn merge(&mut self, other: OpCounter) {
        self.attention_pairs += other.attention_pairs;
        self.layer_calls += other.layer_calls;
    }
}

/// Bidirectional bucket for the offset `key - query`.
///
/// Half the buckets serve each direction. Within a direction, offsets below
/// a quarter of `num_buckets` get their own bucket; larger ones share
/// logarithmically sized buckets up to `max_distance`, beyond which they clip.
pub fn relative_bucket(offset: i64, num_buckets: usize, max_distance: usize) -> usize {
    let half = num_buckets / 2;
    let base = if offset > 0 { half } else { 0 };
    let n = offset.unsigned_abs() as usize;
    let max_exact = half / 2;
    if n < max_exact {
        return base + n;
    }
    let scaled =
        (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln() * (half - max_exact) as f64;
    base + (max_exact + scaled as usize).min(half - 1)
}

/// Bucket ids for every (query, key) pair, row-major.
pub fn bucket_grid(q_positions: &[i64], k_positions: &[i64], cfg: &ModelConfig) -> Vec<usize> {
    let mut out = Vec::with_capacity(q_positions.len() * k_positions.len());
    for &q in q_positions {
        for &k in k_positions {
            out.push(relative_bucket(k - q, cfg.rel_buckets, cfg.rel_max_distance));
        }
    }
    out
}

/// One bias matrix per head, `bias[h][i][j] = table[bucket(k_j - q_i)][h]`.
pub fn relative_position_bias<T: Scalar>(
    q_positions: &[i64],
    k_positions: &[i64],
    table: &Matrix<T>,
    cfg: &ModelConfig,
) -> Result<Vec<Matrix<T>>> {
    if table.shape() != (cfg.rel_buckets, cfg.n_heads) {
        return Err(LaitError::shape(
            "relative_position_bias",
            format!(
                "table {:?}, expected {:?}",
                table.shape(),
                (cfg.rel_buckets, cfg.n_heads)
            ),
        ));
    }
    let grid = bucket_grid(q_positions, k_positions, cfg);
    let (m, n) = (q_positions.len(), k_positions.len());
    Ok((0..cfg.n_heads)
        .map(|h| Matrix::from_fn(m, n, |i, j| table.get(grid[i * n + j], h)))
        .collect())
}

pub fn sinusoidal_encoding<T: Scalar>(position: usize, d_model: usize) -> Vec<T> {
    (0..d_model)
        .map(|i| {
            let freq = 10000f64.powf((2 * (i / 2)) as f64 / d_model as f64);
            let angle = position as f64 / freq;
            T::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() })
        })
        .collect()
}

/// Embeds one segment. Sinusoidal encodings, when enabled, use positions
/// local to the segment.
pub fn embed<T: Scalar>(tokens: &[u32], weights: &ModelWeights<T>) -> Result<Matrix<T>> {
    let cfg = weights.config();
    let table = &weights.params().embedding;
    let mut out = Matrix::zeros(tokens.len(), cfg.d_model);
    for (r, &t) in tokens.iter().enumerate() {
        let t = t as usize;
        if t >= cfg.vocab_size {
            return Err(LaitError::Range(format!(
                "token id {t} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        out.row_mut(r).copy_from_slice(table.row(t));
        if cfg.pos_scheme == PosScheme::SinusoidalLocal {
            for (v, p) in out.row_mut(r).iter_mut().zip(sinusoidal_encoding::<T>(r, cfg.d_model)) {
                *v += p;
            }
        }
    }
    Ok(out)
}

/// Intermediate values of one attention call, kept for backprop.
#[derive(Clone, Debug)]
pub struct AttentionTrace<T> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    /// Softmax weights per head.
    pub probs: Vec<Matrix<T>>,
    /// Head outputs concatenated, before the output projection.
    pub concat: Matrix<T>,
    pub buckets: Option<Vec<usize>>,
    pub out: Matrix<T>,
}

fn check_inputs<T: Scalar>(x: &Matrix<T>, mask: &AttentionMask, positions: &[i64], cfg: &ModelConfig) -> Result<()> {
    if x.rows() != mask.side() || x.rows() != positions.len() {
        return Err(LaitError::shape(
            "attention",
            format!(
                "{} tokens, mask side {}, {} positions",
                x.rows(),
                mask.side(),
                positions.len()
            ),
        ));
    }
    if x.cols() != cfg.d_model {
        return Err(LaitError::shape(
            "attention",
            format!("width {} for d_model {}", x.cols(), cfg.d_model),
        ));
    }
    Ok(())
}

pub fn attention_traced<T: Scalar>(
    x: &Matrix<T>,
    mask: &AttentionMask,
    positions: &[i64],
    lw: &LayerWeights<T>,
    cfg: &ModelConfig,
    counter: &mut OpCounter,
) -> Result<AttentionTrace<T>> {
    check_inputs(x, mask, positions, cfg)?;
    let q = matmul(x, &lw.wq)?;
    let k = matmul(x, &lw.wk)?;
    let v = matmul(x, &lw.wv)?;
    let m = x.rows();
    let dh = cfg.d_head;
    let scale = T::one() / T::from_f64((dh as f64).sqrt());
    let buckets = match (&lw.rel_bias, cfg.pos_scheme) {
        (Some(_), PosScheme::RelativeBucket) => Some(bucket_grid(positions, positions, cfg)),
        _ => None,
    };
    let mut concat = Matrix::zeros(m, cfg.d_model);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = q.slice_cols(h * dh, dh);
        let kh = k.slice_cols(h * dh, dh);
        let vh = v.slice_cols(h * dh, dh);
        let mut scores = matmul_bt(&qh, &kh)?;
        scores.scale(scale);
        if let (Some(grid), Some(table)) = (&buckets, &lw.rel_bias) {
            for (s, &b) in scores.data_mut().iter_mut().zip(grid) {
                *s += table.get(b, h);
            }
        }
        let p = row_softmax_masked(&scores, mask.allowed())?;
        concat.write_cols(h * dh, &matmul(&p, &vh)?);
        probs.push(p);
    }
    let out = matmul(&concat, &lw.wo)?;
    counter.attention_pairs += mask.allowed_pairs();
    Ok(AttentionTrace {
        q,
        k,
        v,
        probs,
        concat,
        buckets,
        out,
    })
}

/// Masked multi-head self-attention; adds the allowed pair count to `counter`.
pub fn multi_head_attention<T: Scalar>(
    x: &Matrix<T>,
    mask: &AttentionMask,
    positions: &[i64],
    lw: &LayerWeights<T>,
    cfg: &ModelConfig,
    counter: &mut OpCounter,
) -> Result<Matrix<T>> {
    Ok(attention_traced(x, mask, positions, lw, cfg, counter)?.out)
}

#[derive(Clone, Debug)]
pub struct LayerTrace<T> {
    pub x: Matrix<T>,
    pub inv1: Vec<T>,
    pub n1: Matrix<T>,
    pub attn: AttentionTrace<T>,
    pub y: Matrix<T>,
    pub inv2: Vec<T>,
    pub n2: Matrix<T>,
    pub hidden_pre: Matrix<T>,
    pub hidden: Matrix<T>,
}

fn apply_rms<T: Scalar>(x: &Matrix<T>, inv: &[T], gain: &[T]) -> Matrix<T> {
    let mut out = x.clone();
    for (r, &s) in inv.iter().enumerate() {
        for (v, g) in out.row_mut(r).iter_mut().zip(gain) {
            *v = *v * s * *g;
        }
    }
    out
}

/// `y = x + MHA(rms(x))`, `z = y + relu(rms(y) W1) W2`, with intermediates.
pub fn encoder_layer_traced<T: Scalar>(
    x: &Matrix<T>,
    mask: &AttentionMask,
    positions: &[i64],
    lw: &LayerWeights<T>,
    cfg: &ModelConfig,
    counter: &mut OpCounter,
) -> Result<(Matrix<T>, LayerTrace<T>)> {
    let inv1 = rms_inv(x);
    let n1 = apply_rms(x, &inv1, &lw.norm1);
    let attn = attention_traced(&n1, mask, positions, lw, cfg, counter)?;
    let mut y = x.clone();
    y.add_assign(&attn.out)?;
    let inv2 = rms_inv(&y);
    let n2 = apply_rms(&y, &inv2, &lw.norm2);
    let hidden_pre = matmul(&n2, &lw.w1)?;
    let hidden = relu(&hidden_pre);
    let mut z = y.clone();
    z.add_assign(&matmul(&hidden, &lw.w2)?)?;
    counter.layer_calls += 1;
    Ok((
        z,
        LayerTrace {
            x: x.clone(),
            inv1,
            n1,
            attn,
            y,
            inv2,
            n2,
            hidden_pre,
            hidden,
        },
    ))
}

pub fn encoder_layer<T: Scalar>(
    x: &Matrix<T>,
    mask: &AttentionMask,
    positions: &[i64],
    lw: &LayerWeights<T>,
    cfg: &ModelConfig,
    counter: &mut OpCounter,
) -> Result<Matrix<T>> {
    Ok(encoder_layer_traced(x, mask, positions, lw, cfg, counter)?.0)
}

fn check_range(from: usize, to: usize, layers: usize) -> Result<()> {
    if from > to || to > layers {
        return Err(LaitError::Range(format!("layers {from}..{to} of {layers}")));
    }
    Ok(())
}

/// Applies layers `[from, to)` with one mask and one position vector.
pub fn run_layers<T: Scalar>(
    x: &Matrix<T>,
    mask: &AttentionMask,
    positions: &[i64],
    weights: &ModelWeights<T>,
    from: usize,
    to: usize,
    counter: &mut OpCounter,
) -> Result<Matrix<T>> {
    let cfg = weights.config();
    check_range(from, to, cfg.layers)?;
    let mut h = x.clone();
    for lw in &weights.params().layers[from..to] {
        h = encoder_layer(&h, mask, positions, lw, cfg, counter)?;
    }
    Ok(h)
}

/// Like [`run_layers`] but keeps every layer's trace.
pub fn run_layers_traced<T: Scalar>(
    x: &Matrix<T>,
    mask: &AttentionMask,
    positions: &[i64],
    weights: &ModelWeights<T>,
    from: usize,
    to: usize,
    counter: &mut OpCounter,
) -> Result<(Matrix<T>, Vec<LayerTrace<T>>)> {
    let cfg = weights.config();
    check_range(from, to, cfg.layers)?;
    let mut h = x.clone();
    let mut traces = Vec::with_capacity(to - from);
    for lw in &weights.params().layers[from..to] {
        let (next, t) = encoder_layer_traced(&h, mask, positions, lw, cfg, counter)?;
        traces.push(t);
        h = next;
    }
    Ok((h, traces))
}
