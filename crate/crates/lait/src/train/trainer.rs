use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::backprop::{label_index, loss_and_grads};
use super::synthetic::{gen_synthetic, SyntheticTaskSpec};
use crate::config::ModelConfig;
use crate::error::{LaitError, Result};
use crate::pipeline::{classify, lait_encode, SegmentedExample};
use crate::tensor::Scalar;
use crate::weights::{ModelWeights, Params};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            eval_every: 250,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Checkpoint {
    pub step: usize,
    /// Mean training loss over the steps since the previous checkpoint.
    pub loss: f64,
    pub eval_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainMetrics {
    pub curve: Vec<Checkpoint>,
    pub final_eval_accuracy: f64,
    pub best_eval_accuracy: f64,
}

/// Fraction of examples whose argmax label matches.
pub fn evaluate<T: Scalar>(weights: &ModelWeights<T>, data: &[SegmentedExample], labels: &[String]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let correct = data
        .par_iter()
        .map(|ex| -> Result<usize> {
            let target = label_index(ex, labels)?;
            let enc = lait_encode(ex, weights, None)?;
            Ok(usize::from(classify(&enc.reps, weights.head())?.0 == target))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / data.len() as f64)
}

/// Adam over shuffled minibatches of a freshly initialized model. Every
/// random choice derives from `opts.seed` (weights) and `spec.seed` (data).
pub fn train(
    spec: &SyntheticTaskSpec,
    cfg: &ModelConfig,
    opts: &TrainOptions,
) -> Result<(ModelWeights<f32>, TrainMetrics)> {
    let data = gen_synthetic(spec)?;
    let mut cfg = cfg.clone();
    cfg.vocab_size = cfg.vocab_size.max(spec.vocab);
    let mut weights = ModelWeights::<f32>::init(&cfg, data.labels.len(), opts.seed)?;
    let mut state = AdamState::new(&weights);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x005e_ed0f_ba7c);
    let batch = opts.batch_size.max(1).min(data.train.len().max(1));
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut cursor = order.len();

    let mut curve = Vec::new();
    let mut window_loss = 0.0;
    let mut window_steps = 0usize;
    let inv = 1.0 / batch as f32;
    for step in 1..=opts.steps {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let results = idx
            .par_iter()
            .map(|&i| loss_and_grads(&weights, &data.train[i], &data.labels))
            .collect::<Result<Vec<_>>>()?;
        let mut grads = Params::<f32>::zeros(weights.config(), weights.num_labels());
        let mut batch_loss = 0.0;
        for (l, g) in &results {
            batch_loss += l;
            grads.accumulate(g);
        }
        batch_loss /= batch as f64;
        if !batch_loss.is_finite() {
            return Err(LaitError::Diverged { step, loss: batch_loss });
        }
        grads.scale(inv);
        adam_step(&mut weights, &grads, &mut state, &opts.adam);
        window_loss += batch_loss;
        window_steps += 1;
        if step % opts.eval_every.max(1) == 0 || step == opts.steps {
            curve.push(Checkpoint {
                step,
                loss: window_loss / window_steps as f64,
                eval_accuracy: evaluate(&weights, &data.eval, &data.labels)?,
            });
            window_loss = 0.0;
            window_steps = 0;
        }
    }
    let final_eval_accuracy = curve.last().map_or(0.0, |c| c.eval_accuracy);
    let best_eval_accuracy = curve.iter().map(|c| c.eval_accuracy).fold(0.0, f64::max);
    Ok((
        weights,
        TrainMetrics {
            curve,
            final_eval_accuracy,
            best_eval_accuracy,
        },
    ))
}
