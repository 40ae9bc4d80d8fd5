use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::StrategyError;
use crate::data::Patch;
use crate::nn::{cast_params, forward, loss_and_backward, softmax_t, InputBatch, LossTerm, Model};
use crate::rng::rng_for;

/// Diagonal Fisher information aligned with the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag {
    pub values: Vec<f32>,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherLabels {
    /// Labels drawn from the model's own predictive distribution.
    #[default]
    Sampled,
    /// The stored ground-truth labels.
    Empirical,
}

const CHUNK: usize = 16;

/// `F_j = (1/n) Σ_i (∂ log p(ŷ_i | x_i) / ∂θ_j)²` over `n_samples` patches
/// drawn without replacement (all patches when fewer). `slot` maps a patch to
/// its (head, output) pair.
pub fn compute_fisher(
    model: &Model,
    data: &[&Patch],
    slot: impl Fn(&Patch) -> (usize, usize) + Sync,
    n_samples: usize,
    labels: FisherLabels,
    seed: u64,
) -> Result<FisherDiag, StrategyError> {
    if n_samples == 0 {
        return Err(StrategyError::InvalidConfig("fisher n_samples must be at least 1".into()));
    }
    let n_params = model.params.len();
    if data.is_empty() {
        return Ok(FisherDiag {
            values: vec![0.0; n_params],
            sample_count: 0,
        });
    }
    let mut picks: Vec<usize> = if n_samples >= data.len() {
        (0..data.len()).collect()
    } else {
        index::sample(&mut rng_for(seed, "fisher-pick", 0), data.len(), n_samples).into_vec()
    };
    picks.sort_unstable();
    let params: Vec<f64> = cast_params(&model.params.values);
    let spec = &model.spec;

    let partials: Vec<Vec<f64>> = picks
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<Vec<f64>, StrategyError> {
            let mut acc = vec![0.0f64; n_params];
            for &i in chunk {
                let p = data[i];
                let (head, target) = slot(p);
                let batch = InputBatch::<f64>::from_images([&p.pixels])?;
                let label = match labels {
                    FisherLabels::Empirical => target,
                    FisherLabels::Sampled => {
                        let logits = &forward(&params, spec, &batch, &[head])?.logits[0];
                        let probs = softmax_t(logits, 1.0);
                        let dist = WeightedIndex::new(&probs).map_err(|e| {
                            StrategyError::InvalidConfig(format!("degenerate softmax: {e}"))
                        })?;
                        dist.sample(&mut rng_for(seed, "fisher-label", i as u64))
                    }
                };
                let term = LossTerm::cross_entropy(vec![label], vec![head]);
                let (_, g) = loss_and_backward(&params, spec, &batch, &[term])?;
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v * v;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_, _>>()?;

    let mut total = vec![0.0f64; n_params];
    for part in partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    let n = picks.len() as f64;
    Ok(FisherDiag {
        values: total.iter().map(|v| (v / n) as f32).collect(),
        sample_count: picks.len(),
    })
}
