use std::f64::consts::PI;

use mfdiff_core::dataset::NormStats;
use mfdiff_core::sampler::ScoreFn;
use mfdiff_core::score_net::{ConditionInfo, Fidelity, FidelityMode, ScoreModelConfig};
use mfdiff_core::sde::SdeConfig;
use mfdiff_core::trainer::{train_loop, TrainConfig, TrainOutputs, TrainState, TrainingExample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SIDE: usize = 8;
const PIXELS: usize = SIDE * SIDE;
const NOISE_VAR: f64 = 0.01;

fn mu(x: f64) -> f64 {
    (2.0 * PI * x).sin()
}

/// Score of the perturbed toy law: y·1 with y ~ N(mu(x), NOISE_VAR), plus N(0, s2) per pixel.
fn analytic_score(z: &[f64], x: f64, s2: f64) -> Vec<f64> {
    let m = z.iter().sum::<f64>() / PIXELS as f64;
    let along = (m - mu(x)) / (s2 + PIXELS as f64 * NOISE_VAR);
    z.iter().map(|v| -(v - m) / s2 - along).collect()
}

fn toy_examples(n: usize, seed: u64) -> Vec<TrainingExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x: f64 = rng.random();
            let y = mu(x) + NOISE_VAR.sqrt() * rng.sample::<f64, _>(StandardNormal);
            TrainingExample {
                cond: ConditionInfo::new(vec![x], Fidelity::Continuous(1.0)),
                z0: vec![y; PIXELS],
            }
        })
        .collect()
}

/// σ²-weighted squared score error per pixel on a fixed held-out grid.
fn score_error<S: ScoreFn>(model: &S, sde: &SdeConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut total = 0.0;
    let mut n = 0;
    for i in 0..8 {
        let x = (i as f64 + 0.5) / 8.0;
        for t in [0.05, 0.2, 0.4, 0.6, 0.8, 1.0] {
            let s2 = sde.marginal_std(t).unwrap().powi(2);
            let y = mu(x) + NOISE_VAR.sqrt() * rng.sample::<f64, _>(StandardNormal);
            let z: Vec<f64> = (0..PIXELS).map(|_| y + s2.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
            let cond = [ConditionInfo::new(vec![x], Fidelity::Continuous(1.0))];
            let got = model.score(&z, &[t], &cond).unwrap();
            let want = analytic_score(&z, x, s2);
            total += s2 * got.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / PIXELS as f64;
            n += 1;
        }
    }
    total / n as f64
}

#[test]
fn training_moves_score_toward_the_analytic_score() {
    let sde = SdeConfig::default();
    let mut cfg = ScoreModelConfig::new(SIDE, 1, FidelityMode::Continuous).with_channels(vec![4, 8]);
    cfg.attention_resolutions = vec![4];
    cfg.groups = 2;
    let mut state = TrainState::new(cfg, sde, NormStats::identity(), 5).unwrap();
    let before = score_error(&state.model, &sde);

    let train = TrainConfig {
        learning_rate: 1e-3,
        total_steps: 800,
        checkpoint_every: 0,
        seed: 6,
        ..TrainConfig::default()
    };
    let outputs = TrainOutputs { checkpoint_dir: None, log_path: None, log_every: 1000 };
    train_loop(&toy_examples(1024, 7), &mut state, &train, &outputs).unwrap();
    let after = score_error(&state.model, &sde);
    assert!(after * 10.0 <= before, "score error {before:.4} -> {after:.4}");
}
