//! Central finite-difference oracle for `loss_and_backward`.

use std::sync::Arc;

use histocl::nn::{
    init_model, loss_and_backward, ConvBlock, EwcAnchor, HeadSpec, InputBatch, LossTerm, ModelSpec,
};
use histocl::rng::rng_for;
use rand::Rng;

pub const EPS: f64 = 1e-3;
/// Step used to re-probe a coordinate whose ε-difference straddles a ReLU or
/// max-pool switch.
pub const KINK_EPS: f64 = 1e-6;
pub const FLOOR: f64 = 1e-2;

pub fn toy_spec(seed: u64) -> ModelSpec {
    ModelSpec::with_blocks(
        8,
        vec![ConvBlock::new(4, true), ConvBlock::new(4, false)],
        vec![
            HeadSpec { head_id: 0, n_outputs: 3 },
            HeadSpec { head_id: 1, n_outputs: 2 },
        ],
        seed,
    )
}

pub struct Fixture {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
    pub batch: InputBatch<f64>,
}

pub fn fixture(seed: u64) -> Fixture {
    let spec = toy_spec(seed);
    let mut rng = rng_for(seed, "gradcheck", 0);
    let mut params: Vec<f64> = init_model(&spec)
        .unwrap()
        .values
        .iter()
        .map(|&v| f64::from(v))
        .collect();
    for p in &mut params {
        *p += rng.gen_range(-0.05..0.05);
    }
    let n = 3;
    let data = (0..n * 3 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
    Fixture {
        spec,
        params,
        batch: InputBatch { n, side: 8, data },
    }
}

fn unit(rng: &mut impl Rng, d: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

/// One instance of every loss term for the fixture with the given seed.
pub fn all_terms(f: &Fixture, seed: u64) -> Vec<LossTerm> {
    let mut rng = rng_for(seed, "gradcheck-terms", 0);
    let n = f.batch.n;
    let len = f.params.len();
    let anchors = (0..2)
        .map(|_| EwcAnchor {
            theta: f
                .params
                .iter()
                .map(|&p| (p + rng.gen_range(-0.5..0.5)) as f32)
                .collect::<Vec<_>>()
                .into(),
            fisher: Arc::from(
                (0..len).map(|_| rng.gen_range(0.0..2.0) as f32).collect::<Vec<_>>(),
            ),
        })
        .collect();
    let d = f.spec.feature_dim;
    let prototypes = (0..3).flat_map(|_| unit(&mut rng, d)).collect();
    vec![
        LossTerm::CrossEntropy {
            targets: vec![2, 1, 0],
            heads: vec![0, 1, 0],
            weight: 1.0,
        },
        LossTerm::Distillation {
            head: 0,
            outputs: vec![0, 2],
            teacher_logits: (0..n * 2).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            temperature: 2.0,
            weight: 0.7,
        },
        LossTerm::EwcPenalty {
            anchors,
            lambda: 3.0,
        },
        LossTerm::PrototypePpp {
            prototypes,
            targets: vec![0, 2, 1],
            temperature: 0.5,
            weight: 1.0,
        },
    ]
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

pub struct GradReport {
    pub max_rel: f64,
    pub n_params: usize,
    pub kinks: usize,
}

fn central(f: &Fixture, terms: &[LossTerm], j: usize, eps: f64) -> f64 {
    let mut p = f.params.clone();
    p[j] = f.params[j] + eps;
    let (lp, _) = loss_and_backward(&p, &f.spec, &f.batch, terms).unwrap();
    p[j] = f.params[j] - eps;
    let (lm, _) = loss_and_backward(&p, &f.spec, &f.batch, terms).unwrap();
    (lp - lm) / (2.0 * eps)
}

/// Compares analytic and numeric gradients on every parameter.
pub fn check(f: &Fixture, terms: &[LossTerm]) -> GradReport {
    let (_, grads) = loss_and_backward(&f.params, &f.spec, &f.batch, terms).unwrap();
    let mut max_rel = 0.0f64;
    let mut kinks = 0;
    for (j, &g) in grads.iter().enumerate() {
        let mut e = rel_err(g, central(f, terms, j, EPS));
        if e > 1e-3 {
            let fine = rel_err(g, central(f, terms, j, KINK_EPS));
            if fine <= 1e-3 {
                kinks += 1;
            }
            e = e.min(fine);
        }
        max_rel = max_rel.max(e);
    }
    GradReport {
        max_rel,
        n_params: grads.len(),
        kinks,
    }
}

/// Largest relative error when every coordinate is probed with step `eps`.
pub fn max_rel_at(f: &Fixture, terms: &[LossTerm], eps: f64) -> f64 {
    let (_, grads) = loss_and_backward(&f.params, &f.spec, &f.batch, terms).unwrap();
    grads
        .iter()
        .enumerate()
        .map(|(j, &g)| rel_err(g, central(f, terms, j, eps)))
        .fold(0.0, f64::max)
}
