//! Loss terms and the combined forward/reverse pass.

use std::sync::Arc;

use super::model::{backward_trunk, forward_trunk, head_backward, head_logits, InputBatch, Offsets};
use super::scalar::Scalar;
use super::spec::ModelSpec;
use super::NnError;

/// Temperature-scaled softmax with max subtraction.
pub fn softmax_t(logits: &[f64], temperature: f64) -> Vec<f64> {
    assert!(temperature > 0.0, "temperature must be positive");
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// KL(p ‖ q) for probability vectors.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

/// One snapshot of parameters and their diagonal Fisher for the EWC penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct EwcAnchor {
    pub theta: Arc<[f32]>,
    pub fisher: Arc<[f32]>,
}

/// `Σ_anchors (λ/2) Σ_j F_j (θ_j − θ*_j)²`.
pub fn ewc_penalty<S: Scalar>(params: &[S], anchors: &[EwcAnchor], lambda: f64) -> f64 {
    let mut total = 0.0;
    for a in anchors {
        let mut acc = 0.0;
        for ((p, t), f) in params.iter().zip(a.theta.iter()).zip(a.fisher.iter()) {
            let diff = p.to_f64() - f64::from(*t);
            acc += f64::from(*f) * diff * diff;
        }
        total += 0.5 * lambda * acc;
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossTerm {
    /// Mean softmax cross-entropy; `heads[b]` selects the head of sample b
    /// and `targets[b]` indexes that head's outputs.
    CrossEntropy {
        targets: Vec<usize>,
        heads: Vec<usize>,
        weight: f64,
    },
    /// `weight · T² · mean_b KL(softmax_T(teacher) ‖ softmax_T(student))`
    /// restricted to `outputs` of head `head`.
    Distillation {
        head: usize,
        outputs: Vec<usize>,
        teacher_logits: Vec<f32>,
        temperature: f64,
        weight: f64,
    },
    /// Quadratic pull towards stored anchors, weighted by Fisher values.
    EwcPenalty {
        anchors: Vec<EwcAnchor>,
        lambda: f64,
    },
    /// Cross-entropy over cosine similarities between L2-normalized features
    /// and unit prototypes (`K × d`, row-major), scaled by 1/τ.
    PrototypePpp {
        prototypes: Vec<f32>,
        targets: Vec<usize>,
        temperature: f64,
        weight: f64,
    },
}

impl LossTerm {
    pub fn cross_entropy(targets: Vec<usize>, heads: Vec<usize>) -> Self {
        LossTerm::CrossEntropy {
            targets,
            heads,
            weight: 1.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossTerm::CrossEntropy { .. } => "cross_entropy",
            LossTerm::Distillation { .. } => "distillation",
            LossTerm::EwcPenalty { .. } => "ewc_penalty",
            LossTerm::PrototypePpp { .. } => "prototype_ppp",
        }
    }
}

/// Features and per-sample logits of a batch.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub features: Vec<f32>,
    pub feature_dim: usize,
    pub logits: Vec<Vec<f64>>,
}

impl BatchOutput {
    pub fn feature_row(&self, b: usize) -> &[f32] {
        &self.features[b * self.feature_dim..(b + 1) * self.feature_dim]
    }
}

fn head_idx(spec: &ModelSpec, head_id: usize) -> Result<usize, NnError> {
    spec.head_index(head_id)
        .ok_or_else(|| NnError::ShapeMismatch(format!("unknown head {head_id}")))
}

/// Forward pass; `heads[b]` selects the head used for sample b's logits.
pub fn forward<S: Scalar>(
    params: &[S],
    spec: &ModelSpec,
    batch: &InputBatch<S>,
    heads: &[usize],
) -> Result<BatchOutput, NnError> {
    if heads.len() != batch.n {
        return Err(NnError::ShapeMismatch(format!(
            "{} head ids for {} samples",
            heads.len(),
            batch.n
        )));
    }
    let trunk = forward_trunk(params, spec, batch)?;
    let offsets = Offsets::new(spec);
    let d = spec.feature_dim;
    let mut logits = Vec::with_capacity(batch.n);
    for (b, &h) in heads.iter().enumerate() {
        let hi = head_idx(spec, h)?;
        logits.push(head_logits(params, &offsets, d, hi, &trunk.features[b * d..(b + 1) * d]));
    }
    Ok(BatchOutput {
        features: trunk.features.iter().map(|v| v.to_f64() as f32).collect(),
        feature_dim: d,
        logits,
    })
}

/// Features only (no heads).
pub fn extract_features<S: Scalar>(
    params: &[S],
    spec: &ModelSpec,
    batch: &InputBatch<S>,
) -> Result<Vec<f32>, NnError> {
    Ok(forward_trunk(params, spec, batch)?
        .features
        .iter()
        .map(|v| v.to_f64() as f32)
        .collect())
}

fn check_len(what: &str, got: usize, want: usize) -> Result<(), NnError> {
    if got == want {
        Ok(())
    } else {
        Err(NnError::ShapeMismatch(format!("{what}: got {got}, expected {want}")))
    }
}

/// Evaluates `Σ terms` (per-sample terms averaged over the batch) and its
/// gradient with respect to every parameter.
pub fn loss_and_backward<S: Scalar>(
    params: &[S],
    spec: &ModelSpec,
    batch: &InputBatch<S>,
    terms: &[LossTerm],
) -> Result<(f64, Vec<S>), NnError> {
    if terms.is_empty() {
        return Err(NnError::EmptyLossTerms);
    }
    let trunk = forward_trunk(params, spec, batch)?;
    let offsets = Offsets::new(spec);
    let d = spec.feature_dim;
    let n = batch.n;
    let inv_n = if n > 0 { 1.0 / n as f64 } else { 0.0 };
    let z = &trunk.features;
    let mut grads = vec![S::ZERO; params.len()];
    let mut dz = vec![S::ZERO; n * d];
    let mut loss = 0.0f64;
    let mut uses_trunk = false;

    for term in terms {
        match term {
            LossTerm::CrossEntropy {
                targets,
                heads,
                weight,
            } => {
                check_len("cross_entropy targets", targets.len(), n)?;
                check_len("cross_entropy heads", heads.len(), n)?;
                uses_trunk = true;
                for b in 0..n {
                    let hi = head_idx(spec, heads[b])?;
                    let zb = &z[b * d..(b + 1) * d];
                    let logits = head_logits(params, &offsets, d, hi, zb);
                    let t = targets[b];
                    if t >= logits.len() {
                        return Err(NnError::ShapeMismatch(format!(
                            "target {t} outside head {} with {} outputs",
                            heads[b],
                            logits.len()
                        )));
                    }
                    let logp = log_softmax(&logits);
                    loss -= weight * inv_n * logp[t];
                    let dl: Vec<f64> = logp
                        .iter()
                        .enumerate()
                        .map(|(j, lp)| weight * inv_n * (lp.exp() - f64::from(u8::from(j == t))))
                        .collect();
                    head_backward(params, &offsets, d, hi, zb, &dl, &mut grads, &mut dz[b * d..(b + 1) * d]);
                }
            }
            LossTerm::Distillation {
                head,
                outputs,
                teacher_logits,
                temperature,
                weight,
            } => {
                let k = outputs.len();
                check_len("distillation teacher logits", teacher_logits.len(), n * k)?;
                if *temperature <= 0.0 {
                    return Err(NnError::InvalidTerm("distillation temperature must be positive".into()));
                }
                if k == 0 || *weight == 0.0 {
                    continue;
                }
                uses_trunk = true;
                let hi = head_idx(spec, *head)?;
                let t = *temperature;
                for b in 0..n {
                    let zb = &z[b * d..(b + 1) * d];
                    let logits = head_logits(params, &offsets, d, hi, zb);
                    if let Some(&bad) = outputs.iter().find(|&&o| o >= logits.len()) {
                        return Err(NnError::ShapeMismatch(format!("distillation output {bad} outside head")));
                    }
                    let student: Vec<f64> = outputs.iter().map(|&o| logits[o]).collect();
                    let teacher: Vec<f64> = teacher_logits[b * k..(b + 1) * k]
                        .iter()
                        .map(|&v| f64::from(v))
                        .collect();
                    let p = softmax_t(&teacher, t);
                    let q = softmax_t(&student, t);
                    loss += weight * t * t * inv_n * kl_divergence(&p, &q);
                    let mut dl = vec![0.0; logits.len()];
                    for (i, &o) in outputs.iter().enumerate() {
                        dl[o] = weight * t * inv_n * (q[i] - p[i]);
                    }
                    head_backward(params, &offsets, d, hi, zb, &dl, &mut grads, &mut dz[b * d..(b + 1) * d]);
                }
            }
            LossTerm::EwcPenalty { anchors, lambda } => {
                for a in anchors {
                    check_len("ewc anchor", a.theta.len(), params.len())?;
                    check_len("ewc fisher", a.fisher.len(), params.len())?;
                }
                if *lambda == 0.0 {
                    continue;
                }
                loss += ewc_penalty(params, anchors, *lambda);
                for a in anchors {
                    for (j, g) in grads.iter_mut().enumerate() {
                        let diff = params[j].to_f64() - f64::from(a.theta[j]);
                        *g += S::from_f64(lambda * f64::from(a.fisher[j]) * diff);
                    }
                }
            }
            LossTerm::PrototypePpp {
                prototypes,
                targets,
                temperature,
                weight,
            } => {
                check_len("prototype targets", targets.len(), n)?;
                if prototypes.len() % d != 0 || prototypes.is_empty() {
                    return Err(NnError::ShapeMismatch("prototype matrix is not K x d".into()));
                }
                if *temperature <= 0.0 {
                    return Err(NnError::InvalidTerm("prototype temperature must be positive".into()));
                }
                uses_trunk = true;
                let kp = prototypes.len() / d;
                let tau = *temperature;
                for b in 0..n {
                    let t = targets[b];
                    if t >= kp {
                        return Err(NnError::ShapeMismatch(format!("prototype target {t} >= {kp}")));
                    }
                    let zb: Vec<f64> = z[b * d..(b + 1) * d].iter().map(|v| v.to_f64()).collect();
                    let norm = zb.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let u: Vec<f64> = zb.iter().map(|v| v / norm).collect();
                    let sims: Vec<f64> = (0..kp)
                        .map(|k| {
                            let p = &prototypes[k * d..(k + 1) * d];
                            u.iter().zip(p).map(|(a, &b)| a * f64::from(b)).sum::<f64>() / tau
                        })
                        .collect();
                    let logp = log_softmax(&sims);
                    loss -= weight * inv_n * logp[t];
                    // ∂/∂u = (1/τ) Σ_k (softmax_k − [k=t]) p_k
                    let mut gu = vec![0.0; d];
                    for k in 0..kp {
                        let coef = weight * inv_n * (logp[k].exp() - f64::from(u8::from(k == t))) / tau;
                        for (g, &p) in gu.iter_mut().zip(&prototypes[k * d..(k + 1) * d]) {
                            *g += coef * f64::from(p);
                        }
                    }
                    // ∂u/∂z = (I − u uᵀ) / ‖z‖
                    let ug: f64 = u.iter().zip(&gu).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        dz[b * d + i] += S::from_f64((gu[i] - u[i] * ug) / norm);
                    }
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(NnError::NonFiniteLoss(loss));
    }
    if uses_trunk {
        backward_trunk(params, spec, &trunk.cache, &dz, &mut grads);
    }
    Ok((loss, grads))
}

/// Index of the nearest mean by Euclidean distance; ties keep the lowest
/// class id. `means` pairs class ids with vectors.
pub fn nearest_mean_classify(feature: &[f32], means: &[(usize, Vec<f32>)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (class, m) in means {
        let dist: f64 = feature
            .iter()
            .zip(m)
            .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
            .sum();
        best = match best {
            Some((c, bd)) if bd < dist || (bd == dist && c < *class) => Some((c, bd)),
            _ => Some((*class, dist)),
        };
    }
    best.map(|(c, _)| c)
}
