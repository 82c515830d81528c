//! Reverse-mode gradients through the classifier head, the joint layers, the
//! concatenation and the per-segment parallel layers.

use crate::config::ModelConfig;
use crate::encoder::{embed, run_layers_traced, AttentionTrace, LayerTrace, OpCounter};
use crate::error::{LaitError, Result};
use crate::mask::AttentionMask;
use crate::pipeline::{global_positions, local_positions, SegmentedExample};
use crate::tensor::{dot, matmul, matmul_at, matmul_bt, Matrix, Scalar};
use crate::weights::{LayerWeights, ModelWeights, Params};

pub type Gradients<T> = Params<T>;

/// Everything the backward pass needs from one forward pass.
pub struct ForwardTrace<T> {
    pub segment_traces: Vec<Vec<LayerTrace<T>>>,
    pub joint_traces: Vec<LayerTrace<T>>,
    pub reps: Matrix<T>,
    pub pooled: Vec<T>,
    pub logits: Vec<T>,
}

pub fn forward_traced<T: Scalar>(ex: &SegmentedExample, weights: &ModelWeights<T>) -> Result<ForwardTrace<T>> {
    ex.validate()?;
    let cfg = weights.config();
    let p = cfg.parallel_layers;
    let mut counter = OpCounter::default();
    let mut parts = Vec::with_capacity(ex.segments.len());
    let mut segment_traces = Vec::with_capacity(ex.segments.len());
    for seg in &ex.segments {
        let x = embed(seg, weights)?;
        let (h, t) = run_layers_traced(
            &x,
            &AttentionMask::full(seg.len()),
            &local_positions(&[seg.len()]),
            weights,
            0,
            p,
            &mut counter,
        )?;
        parts.push(h);
        segment_traces.push(t);
    }
    let joined = Matrix::vstack(&parts)?;
    let m = joined.rows();
    let (reps, joint_traces) = run_layers_traced(
        &joined,
        &AttentionMask::full(m),
        &global_positions(m),
        weights,
        p,
        cfg.layers,
        &mut counter,
    )?;
    let head = weights.head();
    let pooled = reps.mean_rows();
    let wt = head.w.transpose();
    let logits = (0..head.num_labels())
        .map(|j| dot(&pooled, wt.row(j)) + head.b[j])
        .collect();
    Ok(ForwardTrace {
        segment_traces,
        joint_traces,
        reps,
        pooled,
        logits,
    })
}

/// Returns `(loss, d loss / d logits)` for softmax cross-entropy.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], target: usize) -> (T, Vec<T>) {
    let max = logits.iter().cloned().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: T = exps.iter().cloned().sum();
    let loss = z.ln() + max - logits[target];
    let mut grad: Vec<T> = exps.iter().map(|&e| e / z).collect();
    grad[target] -= T::one();
    (loss, grad)
}

fn rms_backward<T: Scalar>(x: &Matrix<T>, inv: &[T], gain: &[T], dn: &Matrix<T>, dgain: &mut [T]) -> Matrix<T> {
    let d = T::from_f64(x.cols() as f64);
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let (xr, dnr, s) = (x.row(r), dn.row(r), inv[r]);
        let mut proj = T::zero();
        for j in 0..x.cols() {
            dgain[j] += dnr[j] * xr[j] * s;
            proj += dnr[j] * gain[j] * xr[j];
        }
        let coeff = s * s * s * proj / d;
        for (j, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = s * dnr[j] * gain[j] - xr[j] * coeff;
        }
    }
    dx
}

fn accumulate<T: Scalar>(dst: &mut Matrix<T>, src: &Matrix<T>) {
    dst.add_assign(src).expect("gradient shapes mirror weights");
}

fn attention_backward<T: Scalar>(
    n1: &Matrix<T>,
    t: &AttentionTrace<T>,
    dout: &Matrix<T>,
    lw: &LayerWeights<T>,
    g: &mut LayerWeights<T>,
    cfg: &ModelConfig,
) -> Result<Matrix<T>> {
    let dh = cfg.d_head;
    let m = n1.rows();
    let scale = T::one() / T::from_f64((dh as f64).sqrt());
    accumulate(&mut g.wo, &matmul_at(&t.concat, dout)?);
    let dconcat = matmul_bt(dout, &lw.wo)?;
    let mut dq = Matrix::zeros(m, cfg.d_model);
    let mut dk = Matrix::zeros(m, cfg.d_model);
    let mut dv = Matrix::zeros(m, cfg.d_model);
    for (h, p) in t.probs.iter().enumerate() {
        let d_head_out = dconcat.slice_cols(h * dh, dh);
        let vh = t.v.slice_cols(h * dh, dh);
        let dp = matmul_bt(&d_head_out, &vh)?;
        dv.write_cols(h * dh, &matmul_at(p, &d_head_out)?);
        let mut ds = Matrix::zeros(m, m);
        for i in 0..m {
            let (pr, dpr) = (p.row(i), dp.row(i));
            let inner = dot(pr, dpr);
            for (j, s) in ds.row_mut(i).iter_mut().enumerate() {
                *s = pr[j] * (dpr[j] - inner);
            }
        }
        if let (Some(grid), Some(table)) = (&t.buckets, &mut g.rel_bias) {
            for (&b, &s) in grid.iter().zip(ds.data()) {
                let cur = table.get(b, h);
                table.set(b, h, cur + s);
            }
        }
        let mut dqh = matmul(&ds, &t.k.slice_cols(h * dh, dh))?;
        dqh.scale(scale);
        let mut dkh = matmul_at(&ds, &t.q.slice_cols(h * dh, dh))?;
        dkh.scale(scale);
        dq.write_cols(h * dh, &dqh);
        dk.write_cols(h * dh, &dkh);
    }
    accumulate(&mut g.wq, &matmul_at(n1, &dq)?);
    accumulate(&mut g.wk, &matmul_at(n1, &dk)?);
    accumulate(&mut g.wv, &matmul_at(n1, &dv)?);
    let mut dn1 = matmul_bt(&dq, &lw.wq)?;
    dn1.add_assign(&matmul_bt(&dk, &lw.wk)?)?;
    dn1.add_assign(&matmul_bt(&dv, &lw.wv)?)?;
    Ok(dn1)
}

/// Backward through one encoder block; accumulates into `g`, returns `dL/dx`.
pub fn layer_backward<T: Scalar>(
    t: &LayerTrace<T>,
    dz: &Matrix<T>,
    lw: &LayerWeights<T>,
    g: &mut LayerWeights<T>,
    cfg: &ModelConfig,
) -> Result<Matrix<T>> {
    accumulate(&mut g.w2, &matmul_at(&t.hidden, dz)?);
    let mut dpre = matmul_bt(dz, &lw.w2)?;
    for (d, &pre) in dpre.data_mut().iter_mut().zip(t.hidden_pre.data()) {
        if pre <= T::zero() {
            *d = T::zero();
        }
    }
    accumulate(&mut g.w1, &matmul_at(&t.n2, &dpre)?);
    let dn2 = matmul_bt(&dpre, &lw.w1)?;
    let mut dy = dz.clone();
    dy.add_assign(&rms_backward(&t.y, &t.inv2, &lw.norm2, &dn2, &mut g.norm2))?;
    let dn1 = attention_backward(&t.n1, &t.attn, &dy, lw, g, cfg)?;
    let mut dx = dy;
    dx.add_assign(&rms_backward(&t.x, &t.inv1, &lw.norm1, &dn1, &mut g.norm1))?;
    Ok(dx)
}

pub fn label_index(ex: &SegmentedExample, labels: &[String]) -> Result<usize> {
    let label = ex.label.as_deref().ok_or_else(|| LaitError::UnknownLabel {
        task: ex.task_id.clone(),
        label: "<none>".into(),
    })?;
    labels
        .iter()
        .position(|l| l == label)
        .ok_or_else(|| LaitError::UnknownLabel {
            task: ex.task_id.clone(),
            label: label.into(),
        })
}

/// Cross-entropy of the pooled classifier on one labelled example, and the
/// gradient with respect to every parameter.
pub fn loss_and_grads<T: Scalar>(
    weights: &ModelWeights<T>,
    ex: &SegmentedExample,
    labels: &[String],
) -> Result<(f64, Gradients<T>)> {
    let target = label_index(ex, labels)?;
    if labels.len() != weights.num_labels() {
        return Err(LaitError::Config(format!(
            "{} labels for a head with {} outputs",
            labels.len(),
            weights.num_labels()
        )));
    }
    let cfg = weights.config();
    let params = weights.params();
    let fwd = forward_traced(ex, weights)?;
    let (loss, dlogits) = softmax_cross_entropy(&fwd.logits, target);
    let mut grads = Params::zeros(cfg, weights.num_labels());

    let d = cfg.d_model;
    let mut dpooled = vec![T::zero(); d];
    for c in 0..d {
        let wrow = params.head.w.row(c);
        let grow = grads.head.w.row_mut(c);
        for (j, &dl) in dlogits.iter().enumerate() {
            grow[j] += fwd.pooled[c] * dl;
            dpooled[c] += wrow[j] * dl;
        }
    }
    for (b, &dl) in grads.head.b.iter_mut().zip(&dlogits) {
        *b += dl;
    }

    let m = fwd.reps.rows();
    let inv_m = T::one() / T::from_f64(m as f64);
    let mut dh = Matrix::from_fn(m, d, |_, c| dpooled[c] * inv_m);
    let p = cfg.parallel_layers;
    for (li, t) in fwd.joint_traces.iter().enumerate().rev() {
        let layer = p + li;
        dh = layer_backward(t, &dh, &params.layers[layer], &mut grads.layers[layer], cfg)?;
    }

    let mut start = 0;
    for (seg, traces) in ex.segments.iter().zip(&fwd.segment_traces) {
        let mut ds = dh.slice_rows(start, start + seg.len())?;
        start += seg.len();
        for (layer, t) in traces.iter().enumerate().rev() {
            ds = layer_backward(t, &ds, &params.layers[layer], &mut grads.layers[layer], cfg)?;
        }
        for (r, &tok) in seg.iter().enumerate() {
            for (g, &v) in grads.embedding.row_mut(tok as usize).iter_mut().zip(ds.row(r)) {
                *g += v;
            }
        }
    }
    Ok((loss.as_f64(), grads))
}

/// Loss only, through the same forward path.
pub fn loss<T: Scalar>(weights: &ModelWeights<T>, ex: &SegmentedExample, labels: &[String]) -> Result<f64> {
    let target = label_index(ex, labels)?;
    let fwd = forward_traced(ex, weights)?;
    Ok(softmax_cross_entropy(&fwd.logits, target).0.as_f64())
}
