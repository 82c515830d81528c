use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backprop::{loss, loss_and_grads};
use crate::error::Result;
use crate::pipeline::SegmentedExample;
use crate::weights::ModelWeights;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const MIN_COORDINATES: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub tensors_covered: usize,
    /// `tensor[index]` of the worst coordinate.
    pub worst: String,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients with central differences on a seeded sample
/// of at least `coordinates` entries spread over every parameter tensor.
/// Embedding coordinates are drawn from rows the example actually uses.
pub fn finite_diff_check(
    weights: &ModelWeights<f64>,
    ex: &SegmentedExample,
    labels: &[String],
    h: f64,
    coordinates: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grads(weights, ex, labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names_and_lens: Vec<(String, usize)> = weights
        .params()
        .tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.len()))
        .collect();
    let per_tensor = coordinates.div_ceil(names_and_lens.len()).max(1);
    let d = weights.config().d_model;
    let mut used_rows: Vec<usize> = ex.segments.iter().flatten().map(|&t| t as usize).collect();
    used_rows.sort_unstable();
    used_rows.dedup();

    let grad_tensors = grads.tensors();
    let mut probe = weights.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: 0,
        tensors_covered: 0,
        worst: String::new(),
    };
    for (ti, (name, len)) in names_and_lens.iter().enumerate() {
        let picks: Vec<usize> = if name == "embedding" {
            let pool = used_rows.len() * d;
            sample(&mut rng, pool, per_tensor.min(pool))
                .into_iter()
                .map(|i| used_rows[i / d] * d + i % d)
                .collect()
        } else {
            sample(&mut rng, *len, per_tensor.min(*len)).into_vec()
        };
        for idx in picks {
            let original = weights.params().tensors()[ti].1[idx];
            let mut eval_at = |v: f64| -> Result<f64> {
                probe.update(|p| p.tensors_mut()[ti].data[idx] = v);
                loss(&probe, ex, labels)
            };
            let plus = eval_at(original + h)?;
            let minus = eval_at(original - h)?;
            eval_at(original)?;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grad_tensors[ti].1[idx];
            let err = relative_error(analytic, numeric);
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = format!("{name}[{idx}]");
            }
            report.coordinates += 1;
        }
        report.tensors_covered += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::weights::Params;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn zero_weight_model_passes() {
        let cfg = ModelConfig::tiny(2, 1, 8, 2, 8);
        let w = ModelWeights::from_params(cfg.clone(), Params::<f64>::zeros(&cfg, 2)).unwrap();
        let ex = SegmentedExample::from_segments(vec![vec![3, 4, 1], vec![5, 1]])
            .unwrap()
            .with_label("x");
        let r = finite_diff_check(&w, &ex, &["x".into(), "y".into()], DEFAULT_STEP, 50, 1).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn tiny_model_passes() {
        let cfg = ModelConfig::tiny(3, 1, 16, 2, 16);
        let w = ModelWeights::<f64>::init(&cfg, 2, 5).unwrap();
        let ex = SegmentedExample::from_segments(vec![vec![3, 4, 9, 1], vec![5, 7, 1]])
            .unwrap()
            .with_label("y");
        let r = finite_diff_check(&w, &ex, &["x".into(), "y".into()], DEFAULT_STEP, MIN_COORDINATES, 2).unwrap();
        assert!(r.coordinates >= MIN_COORDINATES);
        assert_eq!(r.tensors_covered, w.params().tensors().len());
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
