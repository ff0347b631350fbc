//! Denoising score-matching training with Adam, checkpointing and resume.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::NormStats;
use crate::error::{Error, Result};
use crate::nn::VisitParams;
use crate::score_net::{ConditionInfo, ScoreModel, ScoreModelConfig};
use crate::sde::SdeConfig;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// `w(t) = v(t) - v(0)`: equivalent to unit-variance noise prediction.
    #[default]
    Sigma2,
    Uniform,
}

impl LossWeighting {
    fn weight(self, sde: &SdeConfig, t: f64) -> f64 {
        match self {
            LossWeighting::Sigma2 => sde.kernel_variance_unchecked(t),
            LossWeighting::Uniform => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub loss_weighting: LossWeighting,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 16,
            total_steps: 30_000,
            loss_weighting: LossWeighting::Sigma2,
            seed: 0,
            checkpoint_every: 5_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adam moments, one vector per parameter block in visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(model: &ScoreModel<f32>) -> Self {
        let mut m = Vec::new();
        model.visit_params("", &mut |_, p| m.push(vec![0.0; p.len()]));
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            v: m.clone(),
            m,
        }
    }

    /// One Adam update using the gradients currently stored in `model`.
    /// `step` is the 1-based update count used for bias correction.
    fn apply(&mut self, model: &mut ScoreModel<f32>, lr: f64, step: u64) {
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(step as i32);
        let c2 = 1.0 - b2.powi(step as i32);
        let (b1, b2, eps) = (b1 as f32, b2 as f32, self.eps as f32);
        let step_size = (lr * c2.sqrt() / c1) as f32;
        let eps_hat = eps * c2.sqrt() as f32;
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params_mut("", &mut |_, p| {
            let (m, v) = (&mut ms[i], &mut vs[i]);
            for ((w, &g), (mj, vj)) in p
                .value
                .iter_mut()
                .zip(&p.grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mj = b1 * *mj + (1.0 - b1) * g;
                *vj = b2 * *vj + (1.0 - b2) * g * g;
                *w -= step_size * *mj / (vj.sqrt() + eps_hat);
            }
            i += 1;
        });
    }
}

/// Running loss statistics since the start of training.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossStats {
    pub count: u64,
    pub mean: f64,
    pub last: f64,
}

impl LossStats {
    fn push(&mut self, loss: f64) {
        self.count += 1;
        self.mean += (loss - self.mean) / self.count as f64;
        self.last = loss;
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ScoreModel<f32>,
    pub adam: AdamState,
    pub step: u64,
    pub norm: NormStats,
    pub loss: LossStats,
}

impl TrainState {
    pub fn new(model_cfg: ScoreModelConfig, sde: SdeConfig, norm: NormStats, seed: u64) -> Result<Self> {
        let model = ScoreModel::new(model_cfg, sde, seed::sub_seed(seed, seed::stream::INIT))?;
        let adam = AdamState::new(&model);
        Ok(Self {
            model,
            adam,
            step: 0,
            norm,
            loss: LossStats::default(),
        })
    }

    pub fn config_hash(&self) -> [u8; 32] {
        config_hash(self.model.config(), self.model.sde())
    }
}

/// One training example: a standardized field and its conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub cond: ConditionInfo,
    pub z0: Vec<f64>,
}

/// `t ~ Uniform[t_eps, T]`.
pub fn sample_training_time<R: Rng + ?Sized>(rng: &mut R, sde: &SdeConfig) -> f64 {
    rng.random_range(sde.t_eps..=sde.horizon)
}

/// Example indices for one minibatch, uniform over all examples.
pub fn sample_batch_indices<R: Rng + ?Sized>(rng: &mut R, n_examples: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n_examples)).collect()
}

/// Per-element weighted mean squared residual between predicted scores and
/// the kernel score `-ξ/std(t)`, averaged over the batch.
pub fn weighted_score_loss(
    sde: &SdeConfig,
    predicted: &[f64],
    noise: &[f64],
    times: &[f64],
    weighting: LossWeighting,
) -> f64 {
    let b = times.len();
    let npix = predicted.len() / b;
    let mut total = 0.0;
    for (i, &t) in times.iter().enumerate() {
        let std = sde.kernel_variance_unchecked(t).sqrt();
        let w = weighting.weight(sde, t);
        let range = i * npix..(i + 1) * npix;
        let sq: f64 = predicted[range.clone()]
            .iter()
            .zip(&noise[range])
            .map(|(s, xi)| {
                let r = s + xi / std;
                r * r
            })
            .sum();
        total += w * sq / npix as f64;
    }
    total / b as f64
}

fn check_batch_inputs(z0: &[&[f64]], times: &[f64], noise: &[f64]) -> Result<usize> {
    let b = z0.len();
    if b == 0 || times.len() != b {
        return Err(Error::Contract(format!(
            "{} fields with {} times",
            b,
            times.len()
        )));
    }
    let npix = z0[0].len();
    if z0.iter().any(|z| z.len() != npix) || noise.len() != b * npix {
        return Err(Error::Contract("inconsistent batch field sizes".into()));
    }
    Ok(npix)
}

fn perturbed_batch(sde: &SdeConfig, z0: &[&[f64]], times: &[f64], noise: &[f64]) -> Vec<f32> {
    let npix = z0[0].len();
    let mut zt = Vec::with_capacity(z0.len() * npix);
    for (i, (z, &t)) in z0.iter().zip(times).enumerate() {
        let std = sde.kernel_variance_unchecked(t).sqrt();
        let xi = &noise[i * npix..(i + 1) * npix];
        zt.extend(z.iter().zip(xi).map(|(a, e)| (a + std * e) as f32));
    }
    zt
}

/// Denoising score-matching loss for a batch with explicit time and noise
/// draws (noise is `B × npix`, one standard-normal array per element).
pub fn dsm_loss(
    model: &ScoreModel<f32>,
    z0: &[&[f64]],
    conds: &[ConditionInfo],
    times: &[f64],
    noise: &[f64],
    weighting: LossWeighting,
) -> Result<f64> {
    check_batch_inputs(z0, times, noise)?;
    let sde = *model.sde();
    let zt = perturbed_batch(&sde, z0, times, noise);
    let pred: Vec<f64> = model.forward(&zt, times, conds)?.iter().map(|&v| v as f64).collect();
    let loss = weighted_score_loss(&sde, &pred, noise, times, weighting);
    if !loss.is_finite() {
        return Err(Error::TrainingDivergence {
            step: 0,
            loss,
            param: None,
        });
    }
    Ok(loss)
}

/// Forward and backward pass; leaves `∂loss/∂θ` in the model's gradients.
fn loss_and_grad(
    model: &mut ScoreModel<f32>,
    z0: &[&[f64]],
    conds: &[ConditionInfo],
    times: &[f64],
    noise: &[f64],
    weighting: LossWeighting,
) -> Result<f64> {
    let npix = check_batch_inputs(z0, times, noise)?;
    let sde = *model.sde();
    let zt = perturbed_batch(&sde, z0, times, noise);
    model.zero_grad();
    let (out, cache) = model.forward_train(&zt, times, conds)?;
    let pred: Vec<f64> = out.iter().map(|&v| v as f64).collect();
    let loss = weighted_score_loss(&sde, &pred, noise, times, weighting);
    if !loss.is_finite() {
        return Ok(loss);
    }
    let b = times.len();
    let mut dout = vec![0.0f32; out.len()];
    for (i, &t) in times.iter().enumerate() {
        let std = sde.kernel_variance_unchecked(t).sqrt();
        let coef = 2.0 * weighting.weight(&sde, t) / (npix * b) as f64;
        let range = i * npix..(i + 1) * npix;
        for ((d, s), xi) in dout[range.clone()].iter_mut().zip(&pred[range.clone()]).zip(&noise[range]) {
            *d = (coef * (s + xi / std)) as f32;
        }
    }
    model.backward(&cache, &dout);
    Ok(loss)
}

fn first_non_finite(model: &ScoreModel<f32>, grads: bool) -> Option<String> {
    let mut bad = None;
    model.visit_params("", &mut |name, p| {
        let v = if grads { &p.grad } else { &p.value };
        if bad.is_none() && v.iter().any(|x| !x.is_finite()) {
            bad = Some(name.to_string());
        }
    });
    bad
}

/// One explicit batch: element `i` is `(z0[i], conds[i])` with time `times[i]`.
pub struct Batch<'a> {
    pub z0: Vec<&'a [f64]>,
    pub conds: Vec<ConditionInfo>,
    pub times: Vec<f64>,
    pub noise: Vec<f64>,
}

impl<'a> Batch<'a> {
    /// Draws a minibatch uniformly over `examples` together with its time and
    /// noise draws.
    pub fn draw<R: Rng + ?Sized>(
        rng: &mut R,
        examples: &'a [TrainingExample],
        batch_size: usize,
        sde: &SdeConfig,
    ) -> Self {
        let idx = sample_batch_indices(rng, examples.len(), batch_size);
        let times: Vec<f64> = idx.iter().map(|_| sample_training_time(rng, sde)).collect();
        let npix = examples[0].z0.len();
        let noise: Vec<f64> = (0..batch_size * npix).map(|_| rng.sample(StandardNormal)).collect();
        Self {
            z0: idx.iter().map(|&i| examples[i].z0.as_slice()).collect(),
            conds: idx.iter().map(|&i| examples[i].cond.clone()).collect(),
            times,
            noise,
        }
    }
}

/// One Adam step on `batch`; returns the pre-update loss.
pub fn train_step(state: &mut TrainState, batch: &Batch<'_>, cfg: &TrainConfig) -> Result<f64> {
    let step = state.step + 1;
    let loss = loss_and_grad(
        &mut state.model,
        &batch.z0,
        &batch.conds,
        &batch.times,
        &batch.noise,
        cfg.loss_weighting,
    )?;
    if !loss.is_finite() {
        return Err(Error::TrainingDivergence {
            step,
            loss,
            param: None,
        });
    }
    if let Some(name) = first_non_finite(&state.model, true) {
        return Err(Error::TrainingDivergence {
            step,
            loss,
            param: Some(format!("gradient of {name}")),
        });
    }
    state.adam.apply(&mut state.model, cfg.learning_rate, step);
    if let Some(name) = first_non_finite(&state.model, false) {
        return Err(Error::TrainingDivergence {
            step,
            loss,
            param: Some(name),
        });
    }
    state.step = step;
    state.loss.push(loss);
    Ok(loss)
}

pub fn check_examples(examples: &[TrainingExample], model_cfg: &ScoreModelConfig) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let r = model_cfg.resolution();
    for (i, ex) in examples.iter().enumerate() {
        if ex.z0.len() != r * r {
            return Err(Error::Config(format!(
                "example {i} has {} values but the model expects {r}x{r}",
                ex.z0.len()
            )));
        }
        model_cfg
            .check_condition(&ex.cond)
            .map_err(|e| Error::Config(format!("example {i}: {e}")))?;
    }
    Ok(())
}

/// Where `train_loop` writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint_dir: Option<PathBuf>,
    /// Training-log CSV with columns `step, loss, wall_time_s`.
    pub log_path: Option<PathBuf>,
    /// Log every this many steps (1 when 0).
    pub log_every: u64,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint_{step:08}.mfdf"))
}

/// Trains from `state.step` up to `cfg.total_steps`. The minibatch at step
/// `k` depends only on `(cfg.seed, k)`, so a resumed run replays the same
/// sequence. Returns the checkpoint files written.
pub fn train_loop(
    examples: &[TrainingExample],
    state: &mut TrainState,
    cfg: &TrainConfig,
    out: &TrainOutputs,
) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    check_examples(examples, state.model.config())?;
    let sde = *state.model.sde();
    let mut log = match &out.log_path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let exists = p.exists() && state.step > 0;
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(exists)
                .write(true)
                .truncate(!exists)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
            if !exists {
                w.write_record(["step", "loss", "wall_time_s"])?;
            }
            Some(w)
        }
        None => None,
    };
    if let Some(dir) = &out.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let log_every = out.log_every.max(1);
    let start = Instant::now();
    let mut written = Vec::new();
    while state.step < cfg.total_steps {
        let mut rng = seed::rng(seed::sub_seed(cfg.seed, seed::stream::TRAIN), state.step);
        let batch = Batch::draw(&mut rng, examples, cfg.batch_size, &sde);
        let loss = train_step(state, &batch, cfg)?;
        let step = state.step;
        if let Some(w) = &mut log {
            if step.is_multiple_of(log_every) || step == cfg.total_steps {
                let secs = start.elapsed().as_secs_f64();
                w.write_record([step.to_string(), format!("{loss:.6e}"), format!("{secs:.3}")])?;
                w.flush().map_err(|e| Error::io(out.log_path.as_ref().unwrap(), e))?;
                log::info!("step {step} loss {loss:.4e}");
            }
        }
        if let Some(dir) = &out.checkpoint_dir {
            let periodic = cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every);
            if periodic || step == cfg.total_steps {
                let path = checkpoint_path(dir, step);
                save_checkpoint(state, &path)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MFDF0001";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ScoreModelConfig,
    sde: SdeConfig,
    norm: NormStats,
    loss: LossStats,
}

/// SHA-256 over the canonical JSON of the model and SDE configurations.
pub fn config_hash(model: &ScoreModelConfig, sde: &SdeConfig) -> [u8; 32] {
    let json = serde_json::to_vec(&(model, sde)).expect("configs serialize");
    Sha256::digest(&json).into()
}

fn write_block(w: &mut impl Write, name: &str, data: &[f32]) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Layout: magic, 32-byte config hash, u32 header length, JSON header,
/// u64 step, u32 block count, then blocks of (u32 name length, name,
/// u64 value count, f32 values), all little-endian.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        model: state.model.config().clone(),
        sde: *state.model.sde(),
        norm: state.norm.clone(),
        loss: state.loss,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut blocks: Vec<(String, Vec<f32>)> = Vec::new();
    state.model.visit_params("", &mut |name, p| {
        blocks.push((format!("param/{name}"), p.value.clone()));
    });
    let mut names = Vec::new();
    state.model.visit_params("", &mut |name, _| names.push(name.to_string()));
    for (name, m) in names.iter().zip(&state.adam.m) {
        blocks.push((format!("adam_m/{name}"), m.clone()));
    }
    for (name, v) in names.iter().zip(&state.adam.v) {
        blocks.push((format!("adam_v/{name}"), v.clone()));
    }
    let freqs: Vec<f32> = state.model.rff_frequencies().iter().map(|&f| f as f32).collect();
    blocks.push(("buffer/rff_freqs".into(), freqs));

    let io = |e| Error::io(path, e);
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&state.config_hash()).map_err(io)?;
        w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        w.write_all(&state.step.to_le_bytes()).map_err(io)?;
        w.write_all(&(blocks.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, data) in &blocks {
            write_block(&mut w, name, data).map_err(io)?;
        }
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

struct ByteReader<'p, R> {
    inner: R,
    path: &'p Path,
}

impl<R: Read> ByteReader<'_, R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("{}: truncated while reading {what}", self.path.display())))?;
        Ok(buf)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint, verifying magic, config hash and block layout.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader {
        inner: BufReader::new(file),
        path,
    };
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let magic = r.bytes(8, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            std::str::from_utf8(CHECKPOINT_MAGIC).unwrap()
        )));
    }
    let stored_hash = r.bytes(32, "config hash")?;
    let header_len = r.u32("header length")? as usize;
    if header_len > 1 << 20 {
        return Err(bad(format!("implausible header length {header_len}")));
    }
    let header: CheckpointHeader = serde_json::from_slice(&r.bytes(header_len, "header")?)
        .map_err(|e| bad(format!("malformed header: {e}")))?;
    if config_hash(&header.model, &header.sde)[..] != stored_hash[..] {
        return Err(bad("config hash does not match the stored configuration".into()));
    }
    let step = r.u64("step")?;
    let nblocks = r.u32("block count")? as usize;
    let mut blocks = std::collections::HashMap::with_capacity(nblocks);
    for _ in 0..nblocks {
        let len = r.u32("block name length")? as usize;
        if len > 4096 {
            return Err(bad(format!("implausible block name length {len}")));
        }
        let name = String::from_utf8(r.bytes(len, "block name")?)
            .map_err(|_| bad("block name is not UTF-8".into()))?;
        let count = r.u64("block size")? as usize;
        if count > 1 << 32 {
            return Err(bad(format!("implausible size {count} for block {name}")));
        }
        let raw = r.bytes(4 * count, &name)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blocks.insert(name, data);
    }
    let mut extra = [0u8; 1];
    if r.inner.read(&mut extra).map_err(|e| Error::io(path, e))? != 0 {
        return Err(bad("trailing bytes after the last block".into()));
    }

    let mut model = ScoreModel::<f32>::new(header.model.clone(), header.sde, 0)?;
    let mut take = |key: String, len: usize| -> Result<Vec<f32>> {
        let v = blocks
            .remove(&key)
            .ok_or_else(|| bad(format!("missing block {key}")))?;
        if v.len() != len {
            return Err(bad(format!("block {key} has {} values, expected {len}", v.len())));
        }
        Ok(v)
    };
    let mut layout = Vec::new();
    model.visit_params("", &mut |name, p| layout.push((name.to_string(), p.len())));
    let mut values = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, len) in &layout {
        values.push(take(format!("param/{name}"), *len)?);
        m.push(take(format!("adam_m/{name}"), *len)?);
        v.push(take(format!("adam_v/{name}"), *len)?);
    }
    let freqs = take("buffer/rff_freqs".into(), header.model.rff_dim)?;
    let mut it = values.into_iter();
    model.visit_params_mut("", &mut |_, p| p.value = it.next().expect("layout"));
    model.set_rff_frequencies(freqs.into_iter().map(f64::from).collect())?;
    if let Some(name) = blocks.keys().next() {
        return Err(bad(format!("unexpected block {name}")));
    }
    let adam = AdamState {
        m,
        v,
        ..AdamState::new(&model)
    };
    Ok(TrainState {
        model,
        adam,
        step,
        norm: header.norm,
        loss: header.loss,
    })
}

/// Loads a checkpoint and refuses it unless it was written for exactly this
/// model and SDE configuration.
pub fn load_checkpoint_for(path: &Path, model: &ScoreModelConfig, sde: &SdeConfig) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    if state.config_hash() != config_hash(model, sde) {
        return Err(Error::Checkpoint(format!(
            "{}: checkpoint was written for a different model or SDE configuration",
            path.display()
        )));
    }
    Ok(state)
}
