//! Reverse-SDE sampling with a Predictor–Corrector integrator.
//!
//! All chains of a call (ensemble members, slices) advance in lockstep so the
//! score network sees them as one batch. Each chain owns its random stream,
//! keyed by its sub-seed, and the network forward pass is batch-invariant, so
//! batched and one-at-a-time generation give identical results.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::NormStats;
use crate::error::{Error, Result};
use crate::field::SolutionField;
use crate::nn::Float;
use crate::score_net::{ConditionInfo, ScoreModel};
use crate::sde::SdeConfig;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Predictor steps from `T` down to `t_eps`.
    pub num_steps: usize,
    /// Langevin corrector steps after each predictor step.
    pub corrector_steps: usize,
    pub snr: f64,
    pub ensemble_k: usize,
    /// Apply the Tweedie correction `z + (v(t_eps) − v(0))·s(z, t_eps)` at the end.
    pub denoise: bool,
    /// Chains per score-network call.
    pub batch_size: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 2000,
            corrector_steps: 1,
            snr: 0.16,
            ensemble_k: 1,
            denoise: false,
            batch_size: 16,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("num_steps must be >= 1".into()));
        }
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return Err(Error::Config(format!("snr must be positive, got {}", self.snr)));
        }
        if self.ensemble_k == 0 {
            return Err(Error::Config("ensemble_k must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Anything that returns `∇_z log p_t(z | cond)` for a batch of fields.
pub trait ScoreFn: Sync {
    /// `(rows, cols)` of the fields this score acts on.
    fn shape(&self) -> (usize, usize);

    fn slice_conditioned(&self) -> bool {
        false
    }

    /// `z` holds `conds.len()` fields back to back.
    fn score(&self, z: &[f64], times: &[f64], conds: &[ConditionInfo]) -> Result<Vec<f64>>;
}

impl<F: Float> ScoreFn for ScoreModel<F> {
    fn shape(&self) -> (usize, usize) {
        self.config().input_resolution
    }

    fn slice_conditioned(&self) -> bool {
        self.config().slice_conditioning
    }

    fn score(&self, z: &[f64], times: &[f64], conds: &[ConditionInfo]) -> Result<Vec<f64>> {
        let zf: Vec<F> = z.iter().map(|&v| F::of(v)).collect();
        Ok(self.forward(&zf, times, conds)?.into_iter().map(F::f64).collect())
    }
}

/// Exact score of `z(t)` when `z(0) ~ N(mean, var0)` independently per entry:
/// `−(z − mean)/(var0 + v(t) − v(0))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianScore {
    pub sde: SdeConfig,
    pub mean: f64,
    pub var0: f64,
    pub rows: usize,
    pub cols: usize,
}

impl ScoreFn for GaussianScore {
    fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn score(&self, z: &[f64], times: &[f64], _conds: &[ConditionInfo]) -> Result<Vec<f64>> {
        let npix = self.rows * self.cols;
        Ok(z
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let var = self.var0 + self.sde.kernel_variance_unchecked(times[i / npix]);
                -(v - self.mean) / var
            })
            .collect())
    }
}

/// `num_steps + 1` times from `T` down to `t_eps`, spaced uniformly in
/// `log(sqrt(v(t) − v(0)))`.
pub fn time_grid(sde: &SdeConfig, num_steps: usize) -> Result<Vec<f64>> {
    if num_steps == 0 {
        return Err(Error::Config("num_steps must be >= 1".into()));
    }
    let hi = sde.marginal_std(sde.horizon)?.ln();
    let lo = sde.marginal_std(sde.t_eps)?.ln();
    let mut grid = Vec::with_capacity(num_steps + 1);
    grid.push(sde.horizon);
    for i in 1..num_steps {
        let ls = hi + (lo - hi) * i as f64 / num_steps as f64;
        grid.push(sde.time_for_marginal_std(ls.exp())?);
    }
    grid.push(sde.t_eps);
    Ok(grid)
}

/// `z(T) ~ N(0, v(T)·I)`.
pub fn init_state<R: Rng + ?Sized>(sde: &SdeConfig, rows: usize, cols: usize, rng: &mut R) -> SolutionField {
    let std = sde.variance_unchecked(sde.horizon).sqrt();
    SolutionField::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

/// Reverse-diffusion update `z += Δv·score + sqrt(Δv)·noise` with
/// `Δv = v(t_from) − v(t_to)`.
pub fn predictor_update(
    sde: &SdeConfig,
    z: &mut [f64],
    t_from: f64,
    t_to: f64,
    score: &[f64],
    noise: &[f64],
) -> Result<()> {
    if t_to > t_from {
        return Err(Error::Contract(format!(
            "predictor must move backward in time, got {t_from} -> {t_to}"
        )));
    }
    let dv = sde.variance(t_from)? - sde.variance(t_to)?;
    let sq = dv.sqrt();
    for ((zi, s), xi) in z.iter_mut().zip(score).zip(noise) {
        *zi += dv * s + sq * xi;
    }
    Ok(())
}

pub fn predictor_step<R: Rng + ?Sized>(
    sde: &SdeConfig,
    z: &mut [f64],
    t_from: f64,
    t_to: f64,
    score: &[f64],
    rng: &mut R,
) -> Result<()> {
    let noise: Vec<f64> = (0..z.len()).map(|_| rng.sample(StandardNormal)).collect();
    predictor_update(sde, z, t_from, t_to, score, &noise)
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Langevin step size `ε = 2·(snr·‖noise‖/‖score‖)²`, or 0 for a zero score.
pub fn langevin_step_size(snr: f64, noise: &[f64], score: &[f64]) -> f64 {
    let gs = norm2(score);
    if gs == 0.0 {
        return 0.0;
    }
    2.0 * (snr * norm2(noise) / gs).powi(2)
}

/// One Langevin step `z += ε·score + sqrt(2ε)·noise`, norms taken over the
/// whole field.
pub fn corrector_update(z: &mut [f64], score: &[f64], noise: &[f64], snr: f64) {
    let eps = langevin_step_size(snr, noise, score);
    if eps == 0.0 {
        return;
    }
    let sq = (2.0 * eps).sqrt();
    for ((zi, s), xi) in z.iter_mut().zip(score).zip(noise) {
        *zi += eps * s + sq * xi;
    }
}

pub fn corrector_step<R: Rng + ?Sized>(z: &mut [f64], score: &[f64], snr: f64, rng: &mut R) {
    let noise: Vec<f64> = (0..z.len()).map(|_| rng.sample(StandardNormal)).collect();
    corrector_update(z, score, &noise, snr);
}

struct Chain {
    z: Vec<f64>,
    rng: ChaCha8Rng,
    cond: ConditionInfo,
}

fn batched_scores<S: ScoreFn + ?Sized>(score: &S, chains: &[Chain], t: f64, batch: usize) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<Result<Vec<Vec<f64>>>> = chains
        .par_chunks(batch)
        .map(|chunk| {
            let npix = chunk[0].z.len();
            let z: Vec<f64> = chunk.iter().flat_map(|c| c.z.iter().copied()).collect();
            let conds: Vec<ConditionInfo> = chunk.iter().map(|c| c.cond.clone()).collect();
            let times = vec![t; chunk.len()];
            let s = score.score(&z, &times, &conds)?;
            Ok(s.chunks(npix).map(<[f64]>::to_vec).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(chains.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

fn check_finite(chains: &[Chain], step: usize, t: f64) -> Result<()> {
    let count: usize = chains.iter().map(|c| c.z.iter().filter(|v| !v.is_finite()).count()).sum();
    if count > 0 {
        return Err(Error::SamplingDivergence { step, t, count });
    }
    Ok(())
}

/// Runs one reverse-SDE chain per `(cond, seed)` pair in lockstep and
/// returns the de-standardized final states.
pub fn generate_batch<S: ScoreFn + ?Sized>(
    score: &S,
    sde: &SdeConfig,
    conds: &[ConditionInfo],
    seeds: &[u64],
    cfg: &SamplerConfig,
    norm: &NormStats,
) -> Result<Vec<SolutionField>> {
    cfg.validate()?;
    if conds.len() != seeds.len() {
        return Err(Error::Contract(format!("{} conditions for {} seeds", conds.len(), seeds.len())));
    }
    if conds.is_empty() {
        return Ok(Vec::new());
    }
    let (rows, cols) = score.shape();
    let grid = time_grid(sde, cfg.num_steps)?;
    let mut chains: Vec<Chain> = conds
        .iter()
        .zip(seeds)
        .map(|(cond, &s)| {
            let mut rng = seed::rng(s, seed::stream::SAMPLE);
            let z = init_state(sde, rows, cols, &mut rng).into_vec();
            Chain {
                z,
                rng,
                cond: cond.clone(),
            }
        })
        .collect();
    for (i, w) in grid.windows(2).enumerate() {
        let (t_from, t_to) = (w[0], w[1]);
        let scores = batched_scores(score, &chains, t_from, cfg.batch_size)?;
        for (c, s) in chains.iter_mut().zip(&scores) {
            predictor_step(sde, &mut c.z, t_from, t_to, s, &mut c.rng)?;
        }
        for _ in 0..cfg.corrector_steps {
            let scores = batched_scores(score, &chains, t_to, cfg.batch_size)?;
            for (c, s) in chains.iter_mut().zip(&scores) {
                corrector_step(&mut c.z, s, cfg.snr, &mut c.rng);
            }
        }
        check_finite(&chains, i + 1, t_to)?;
    }
    if cfg.denoise {
        let t = sde.t_eps;
        let var = sde.kernel_variance_unchecked(t);
        let scores = batched_scores(score, &chains, t, cfg.batch_size)?;
        for (c, s) in chains.iter_mut().zip(&scores) {
            c.z.iter_mut().zip(s).for_each(|(z, s)| *z += var * s);
        }
        check_finite(&chains, cfg.num_steps, t)?;
    }
    chains
        .into_iter()
        .map(|c| {
            let f = SolutionField::from_vec(rows, cols, c.z)?;
            Ok(norm.destandardize(&f))
        })
        .collect()
}

/// Sub-seed of ensemble member `j`; member 0 is what [`generate`] uses.
pub fn member_seed(seed: u64, j: usize) -> u64 {
    seed::sub_seed(seed::sub_seed(seed, seed::stream::ENSEMBLE), j as u64)
}

/// Sub-seed of the slice at normalized coordinate `tau`.
pub fn slice_seed(seed: u64, tau: f64) -> u64 {
    seed::sub_seed_f64(seed::sub_seed(seed, seed::stream::SLICE), tau)
}

/// One sample of the solution for `cond`.
pub fn generate<S: ScoreFn + ?Sized>(
    score: &S,
    sde: &SdeConfig,
    cond: &ConditionInfo,
    cfg: &SamplerConfig,
    seed: u64,
    norm: &NormStats,
) -> Result<SolutionField> {
    let mut out = generate_batch(score, sde, std::slice::from_ref(cond), &[member_seed(seed, 0)], cfg, norm)?;
    Ok(out.pop().expect("one chain"))
}

/// Elementwise mean of fields of equal shape.
pub fn mean_field(fields: &[SolutionField]) -> Result<SolutionField> {
    let first = fields
        .first()
        .ok_or_else(|| Error::Contract("cannot average zero fields".into()))?;
    let mut acc = SolutionField::zeros_3d(first.rows(), first.cols(), first.depth());
    for f in fields {
        f.check_same_shape(first, "ensemble member")?;
        acc.data_mut().iter_mut().zip(f.data()).for_each(|(a, v)| *a += v);
    }
    let k = fields.len() as f64;
    acc.data_mut().iter_mut().for_each(|a| *a /= k);
    Ok(acc)
}

/// Mean of `k` independent samples, members seeded by [`member_seed`].
pub fn generate_ensemble<S: ScoreFn + ?Sized>(
    score: &S,
    sde: &SdeConfig,
    cond: &ConditionInfo,
    cfg: &SamplerConfig,
    k: usize,
    seed: u64,
    norm: &NormStats,
) -> Result<SolutionField> {
    if k == 0 {
        return Err(Error::Config("ensemble size must be >= 1".into()));
    }
    let seeds: Vec<u64> = (0..k).map(|j| member_seed(seed, j)).collect();
    let conds = vec![cond.clone(); k];
    mean_field(&generate_batch(score, sde, &conds, &seeds, cfg, norm)?)
}

/// Ensemble predictions for several conditions, all chains batched together.
pub fn generate_ensembles<S: ScoreFn + ?Sized>(
    score: &S,
    sde: &SdeConfig,
    conds: &[ConditionInfo],
    cfg: &SamplerConfig,
    k: usize,
    seeds: &[u64],
    norm: &NormStats,
) -> Result<Vec<SolutionField>> {
    if k == 0 {
        return Err(Error::Config("ensemble size must be >= 1".into()));
    }
    if conds.len() != seeds.len() {
        return Err(Error::Contract(format!("{} conditions for {} seeds", conds.len(), seeds.len())));
    }
    let all_conds: Vec<ConditionInfo> = conds.iter().flat_map(|c| std::iter::repeat_n(c.clone(), k)).collect();
    let all_seeds: Vec<u64> = seeds.iter().flat_map(|&s| (0..k).map(move |j| member_seed(s, j))).collect();
    let fields = generate_batch(score, sde, &all_conds, &all_seeds, cfg, norm)?;
    fields.chunks(k).map(mean_field).collect()
}

/// One prediction per slice coordinate, stacked as the third dimension in
/// the order given. Each slice uses `cfg.ensemble_k` members and a sub-seed
/// keyed by its coordinate.
pub fn generate_slices<S: ScoreFn + ?Sized>(
    score: &S,
    sde: &SdeConfig,
    base: &ConditionInfo,
    taus: &[f64],
    cfg: &SamplerConfig,
    seed: u64,
    norm: &NormStats,
) -> Result<SolutionField> {
    if !score.slice_conditioned() {
        return Err(Error::Contract("model was built without slice conditioning".into()));
    }
    if taus.is_empty() {
        return Err(Error::Contract("no slice coordinates given".into()));
    }
    let conds: Vec<ConditionInfo> = taus
        .iter()
        .map(|&tau| ConditionInfo {
            tau: Some(tau),
            ..base.clone()
        })
        .collect();
    let seeds: Vec<u64> = taus.iter().map(|&tau| slice_seed(seed, tau)).collect();
    let slices = generate_ensembles(score, sde, &conds, cfg, cfg.ensemble_k, &seeds, norm)?;
    SolutionField::stack(&slices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score_net::{Fidelity, FidelityMode, ScoreModelConfig};
    use crate::nn::VisitParams;
    use rand::SeedableRng;

    struct ZeroScore(usize);

    impl ScoreFn for ZeroScore {
        fn shape(&self) -> (usize, usize) {
            (self.0, self.0)
        }
        fn score(&self, z: &[f64], _: &[f64], _: &[ConditionInfo]) -> Result<Vec<f64>> {
            Ok(vec![0.0; z.len()])
        }
    }

    fn dummy_cond() -> ConditionInfo {
        ConditionInfo::new(vec![0.0], Fidelity::Continuous(0.0))
    }

    fn moments(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn grid_is_decreasing_from_horizon_to_t_eps() {
        let sde = SdeConfig::default();
        let g = time_grid(&sde, 50).unwrap();
        assert_eq!(g.len(), 51);
        assert_eq!(g[0], 1.0);
        assert_eq!(*g.last().unwrap(), 1e-5);
        assert!(g.windows(2).all(|w| w[1] < w[0]));
        let ratios: Vec<f64> = g
            .windows(2)
            .map(|w| sde.marginal_std(w[0]).unwrap() / sde.marginal_std(w[1]).unwrap())
            .collect();
        for r in &ratios {
            assert!((r - ratios[0]).abs() < 1e-9 * ratios[0]);
        }
    }

    #[test]
    fn initial_state_statistics() {
        let sde = SdeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = init_state(&sde, 100, 1000, &mut rng);
        let (mean, var) = moments(z.data());
        assert!((var.sqrt() / 50.0 - 1.0).abs() < 0.01, "std {}", var.sqrt());
        assert!(mean.abs() < 4.0 * 50.0 / (1e5f64).sqrt());
        let mut again = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(init_state(&sde, 100, 1000, &mut again), z);
    }

    #[test]
    fn predictor_identities() {
        let sde = SdeConfig::default();
        let z0 = vec![1.0, -2.0, 3.0];
        let mut z = z0.clone();
        predictor_update(&sde, &mut z, 0.5, 0.5, &[4.0, 5.0, 6.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(z, z0);
        predictor_update(&sde, &mut z, 0.5, 0.2, &[0.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(z, z0);
        assert!(matches!(
            predictor_update(&sde, &mut z, 0.2, 0.5, &[0.0; 3], &[0.0; 3]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn corrector_identities() {
        let mut z = vec![1.0, 2.0];
        corrector_update(&mut z, &[0.0, 0.0], &[0.3, -0.1], 0.16);
        assert_eq!(z, vec![1.0, 2.0]);
        let (noise, score) = ([0.3, -0.4], [1.5, 2.0]);
        let e1 = langevin_step_size(0.16, &noise, &score);
        let e2 = langevin_step_size(0.32, &noise, &score);
        assert!((e2 / e1 - 4.0).abs() < 1e-12);
        assert!((e1 - 2.0 * (0.16f64 * 0.5 / 2.5).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn single_step_unrolls_to_init_plus_one_noise_term() {
        let sde = SdeConfig::default();
        let cfg = SamplerConfig {
            num_steps: 1,
            corrector_steps: 0,
            ..SamplerConfig::default()
        };
        let out = generate(&ZeroScore(4), &sde, &dummy_cond(), &cfg, 9, &NormStats::identity()).unwrap();
        let mut rng = seed::rng(member_seed(9, 0), seed::stream::SAMPLE);
        let init = init_state(&sde, 4, 4, &mut rng);
        let dv = sde.variance(1.0).unwrap() - sde.variance(1e-5).unwrap();
        for (k, v) in out.data().iter().enumerate() {
            let xi: f64 = rng.sample(StandardNormal);
            assert_eq!(*v, init.data()[k] + dv.sqrt() * xi);
        }
    }

    #[test]
    fn ensemble_contracts() {
        let sde = SdeConfig::default();
        let cfg = SamplerConfig {
            num_steps: 20,
            ..SamplerConfig::default()
        };
        let g = GaussianScore { sde, mean: 0.3, var0: 0.5, rows: 4, cols: 4 };
        let norm = NormStats::identity();
        let single = generate(&g, &sde, &dummy_cond(), &cfg, 5, &norm).unwrap();
        let k1 = generate_ensemble(&g, &sde, &dummy_cond(), &cfg, 1, 5, &norm).unwrap();
        assert_eq!(single, k1);

        let same = generate_batch(&g, &sde, &vec![dummy_cond(); 3], &[77; 3], &cfg, &norm).unwrap();
        let mean = mean_field(&same).unwrap();
        for (a, b) in mean.data().iter().zip(same[0].data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn batched_generation_matches_serial() {
        let cfg_model = ScoreModelConfig::new(16, 1, FidelityMode::Continuous).with_channels(vec![4, 4, 8]);
        let mut model = ScoreModel::<f32>::new(cfg_model, SdeConfig::default(), 1).unwrap();
        model.visit_params_mut("", &mut |name, p| {
            if name.starts_with("conv_out") {
                p.value.iter_mut().enumerate().for_each(|(i, v)| *v = ((i % 5) as f32 - 2.0) * 0.01);
            }
        });
        let sde = SdeConfig::default();
        let cfg = SamplerConfig {
            num_steps: 5,
            batch_size: 2,
            ..SamplerConfig::default()
        };
        let conds: Vec<ConditionInfo> = (0..3)
            .map(|i| ConditionInfo::new(vec![i as f64 * 0.3], Fidelity::Continuous(0.5)))
            .collect();
        let norm = NormStats { mean: 1.0, std: 2.0, ..NormStats::identity() };
        let batched = generate_ensembles(&model, &sde, &conds, &cfg, 2, &[1, 2, 3], &norm).unwrap();
        for (i, c) in conds.iter().enumerate() {
            let serial = generate_ensemble(&model, &sde, c, &cfg, 2, i as u64 + 1, &norm).unwrap();
            assert_eq!(serial, batched[i]);
        }
        let again = generate(&model, &sde, &conds[0], &cfg, 4, &norm).unwrap();
        assert_eq!(again, generate(&model, &sde, &conds[0], &cfg, 4, &norm).unwrap());
    }

    #[test]
    fn slice_generation_contracts() {
        let sde = SdeConfig::default();
        let mcfg = ScoreModelConfig::new(16, 1, FidelityMode::Continuous)
            .with_channels(vec![4, 4, 8])
            .with_slice_conditioning(true);
        let model = ScoreModel::<f32>::new(mcfg.clone(), sde, 2).unwrap();
        let cfg = SamplerConfig {
            num_steps: 3,
            ..SamplerConfig::default()
        };
        let norm = NormStats::identity();
        let base = ConditionInfo::new(vec![0.4], Fidelity::Continuous(1.0));
        let taus = [0.0, 0.5, 1.0];
        let out = generate_slices(&model, &sde, &base, &taus, &cfg, 11, &norm).unwrap();
        assert_eq!(out.shape(), (16, 16, 3));

        let permuted = generate_slices(&model, &sde, &base, &[1.0, 0.0, 0.5], &cfg, 11, &norm).unwrap();
        assert_eq!(permuted.slice(0).unwrap(), out.slice(2).unwrap());
        assert_eq!(permuted.slice(1).unwrap(), out.slice(0).unwrap());

        let one = generate_slices(&model, &sde, &base, &[0.5], &cfg, 11, &norm).unwrap();
        let direct = generate(&model, &sde, &base.clone().with_tau(0.5), &cfg, slice_seed(11, 0.5), &norm).unwrap();
        assert_eq!(one.slice(0).unwrap(), direct);

        let plain = ScoreModel::<f32>::new(mcfg.with_slice_conditioning(false), sde, 2).unwrap();
        assert!(matches!(
            generate_slices(&plain, &sde, &base, &taus, &cfg, 11, &norm),
            Err(Error::Contract(_))
        ));
    }

    struct NanScore;

    impl ScoreFn for NanScore {
        fn shape(&self) -> (usize, usize) {
            (2, 2)
        }
        fn score(&self, z: &[f64], _: &[f64], _: &[ConditionInfo]) -> Result<Vec<f64>> {
            Ok(vec![f64::NAN; z.len()])
        }
    }

    #[test]
    fn non_finite_states_are_reported() {
        let sde = SdeConfig::default();
        let err = generate(&NanScore, &sde, &dummy_cond(), &SamplerConfig::default(), 1, &NormStats::identity()).unwrap_err();
        assert!(matches!(err, Error::SamplingDivergence { step: 1, .. }), "{err}");
    }

    #[test]
    fn corrector_alone_preserves_gaussian_target() {
        // 10⁴ independent scalars held as one 100×100 field
        let sde = SdeConfig::default();
        let t = 0.5;
        let var = 0.2 + sde.kernel_variance_unchecked(t);
        let g = GaussianScore { sde, mean: 0.0, var0: 0.2, rows: 100, cols: 100 };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut z: Vec<f64> = (0..10_000).map(|_| var.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
        for _ in 0..1000 {
            let s = g.score(&z, &[t], &[dummy_cond()]).unwrap();
            corrector_step(&mut z, &s, 0.16, &mut rng);
        }
        let (_, v) = moments(&z);
        assert!((v / var - 1.0).abs() < 0.10, "variance ratio {}", v / var);
    }
}
