//! Conditional U-Net score model `s_θ(z, t, x, m[, τ])`.
//!
//! PDE parameters `x`, fidelity `m` and the optional slice coordinate `τ` are
//! each embedded by a small MLP; SDE time `t` is embedded with frozen random
//! Fourier features. Every ResNet block projects each embedding to its channel
//! count, applies Swish, and adds the result to every spatial location of the
//! output of its first convolution.
//!
//! Backbone, for a `R × R` input with channel schedule `c_0 … c_{L-1}`
//! (resolution halves at each level, bottleneck at 4×4):
//!
//! ```text
//! conv_in(1 → c_0)
//! level l < L-1:  Res(·→c_l), Res(c_l→c_l), [attn], push skip, FIR-down
//! bottleneck:     Res(c_{L-2}→c_{L-1}), [attn], Res(c_{L-1}→c_{L-1})
//! level l < L-1:  FIR-up, concat skip, Res(c_{l+1}+c_l→c_l), Res(c_l→c_l), [attn]
//! GroupNorm → Swish → conv_out(c_0 → 1)
//! ```
//!
//! The network output is divided by the kernel std `sqrt(v(t) - v(0))`, so
//! the raw network predicts unit-scale noise while the model returns a score.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::attention::AttentionCache;
use crate::nn::layers::{
    fir_down, fir_down_backward, fir_up, fir_up_backward, swish, swish_backward, swish_slice,
    GroupNormStats, MlpCache,
};
use crate::nn::tensor::join;
use crate::nn::{Conv2d, Float, GroupNorm, Linear, Mat, Mlp, Param, SelfAttention, Tensor, VisitParams};
use crate::sde::SdeConfig;

/// How fidelity enters the model. Fixed per model instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FidelityMode {
    /// One-hot encoding over `levels` discrete fidelities.
    Discrete { levels: usize },
    /// Normalized scalar fidelity in `[0, 1]`.
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    /// Zero-based fidelity rank.
    Discrete(usize),
    Continuous(f64),
}

/// Conditioning for one generated field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionInfo {
    pub x: Vec<f64>,
    pub fidelity: Fidelity,
    /// Normalized slice coordinate, present only for slice-conditioned models.
    pub tau: Option<f64>,
}

impl ConditionInfo {
    pub fn new(x: Vec<f64>, fidelity: Fidelity) -> Self {
        Self {
            x,
            fidelity,
            tau: None,
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = Some(tau);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreModelConfig {
    /// `(d1, d2)`; both equal powers of two, at least 4.
    pub input_resolution: (usize, usize),
    /// Channels per resolution level, finest first.
    pub channel_schedule: Vec<usize>,
    /// Length of the PDE parameter vector `x`.
    pub param_dim: usize,
    /// Hidden width of the embedding MLPs.
    pub embed_width: usize,
    pub param_embed_dim: usize,
    pub fidelity_embed_dim: usize,
    pub tau_embed_dim: usize,
    /// Number of random Fourier frequencies; the time embedding has twice this length.
    pub rff_dim: usize,
    pub rff_scale: f64,
    /// Resolutions (side length) that get self-attention.
    pub attention_resolutions: Vec<usize>,
    pub groups: usize,
    pub fidelity_mode: FidelityMode,
    pub slice_conditioning: bool,
}

impl ScoreModelConfig {
    /// Default architecture for a square `resolution` grid.
    pub fn new(resolution: usize, param_dim: usize, fidelity_mode: FidelityMode) -> Self {
        let levels = Self::levels_for(resolution).unwrap_or(1);
        let channel_schedule = match resolution {
            64 => vec![16, 16, 32, 32, 64],
            128 => vec![16, 16, 32, 32, 64, 64],
            _ => [16, 16, 32, 32, 64, 64, 128, 128]
                .into_iter()
                .take(levels)
                .collect(),
        };
        Self {
            input_resolution: (resolution, resolution),
            channel_schedule,
            param_dim,
            embed_width: 10,
            param_embed_dim: 16,
            fidelity_embed_dim: 16,
            tau_embed_dim: 16,
            rff_dim: 64,
            rff_scale: 16.0,
            attention_resolutions: vec![16, 4],
            groups: 4,
            fidelity_mode,
            slice_conditioning: false,
        }
    }

    pub fn with_channels(mut self, channel_schedule: Vec<usize>) -> Self {
        self.channel_schedule = channel_schedule;
        self
    }

    pub fn with_slice_conditioning(mut self, on: bool) -> Self {
        self.slice_conditioning = on;
        self
    }

    fn levels_for(resolution: usize) -> Option<usize> {
        if resolution < 4 || !resolution.is_power_of_two() {
            return None;
        }
        Some((resolution / 4).trailing_zeros() as usize + 1)
    }

    pub fn resolution(&self) -> usize {
        self.input_resolution.0
    }

    pub fn levels(&self) -> usize {
        self.channel_schedule.len()
    }

    pub fn fidelity_input_dim(&self) -> usize {
        match self.fidelity_mode {
            FidelityMode::Discrete { levels } => levels,
            FidelityMode::Continuous => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d1, d2) = self.input_resolution;
        if d1 != d2 {
            return Err(Error::Config(format!(
                "non-square input {d1}x{d2} is not supported"
            )));
        }
        let levels = Self::levels_for(d1).ok_or_else(|| {
            Error::Config(format!("resolution {d1} must be a power of two >= 4"))
        })?;
        if self.channel_schedule.len() != levels {
            return Err(Error::Config(format!(
                "resolution {d1} has {levels} levels but channel schedule has {} entries",
                self.channel_schedule.len()
            )));
        }
        if levels < 2 {
            return Err(Error::Config("need at least one downsampling level".into()));
        }
        if self.groups == 0
            || self
                .channel_schedule
                .iter()
                .any(|&c| c == 0 || c % self.groups != 0)
        {
            return Err(Error::Config(format!(
                "channels {:?} must be positive multiples of groups={}",
                self.channel_schedule, self.groups
            )));
        }
        if self.param_dim == 0 || self.embed_width == 0 || self.rff_dim == 0 {
            return Err(Error::Config(
                "param_dim, embed_width and rff_dim must be positive".into(),
            ));
        }
        if self.param_embed_dim == 0 || self.fidelity_embed_dim == 0 || self.tau_embed_dim == 0 {
            return Err(Error::Config("embedding dims must be positive".into()));
        }
        if let FidelityMode::Discrete { levels: 0 } = self.fidelity_mode {
            return Err(Error::Config("discrete fidelity needs >= 1 level".into()));
        }
        if !(self.rff_scale.is_finite() && self.rff_scale > 0.0) {
            return Err(Error::Config("rff_scale must be positive".into()));
        }
        Ok(())
    }

    /// Validates a conditioning tuple against this configuration.
    pub fn check_condition(&self, cond: &ConditionInfo) -> Result<()> {
        if cond.x.len() != self.param_dim {
            return Err(Error::Contract(format!(
                "parameter vector has length {}, model expects {}",
                cond.x.len(),
                self.param_dim
            )));
        }
        if cond.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("non-finite PDE parameter".into()));
        }
        match (self.fidelity_mode, cond.fidelity) {
            (FidelityMode::Discrete { levels }, Fidelity::Discrete(i)) if i < levels => {}
            (FidelityMode::Discrete { levels }, Fidelity::Discrete(i)) => {
                return Err(Error::Contract(format!(
                    "fidelity index {i} out of range for {levels} levels"
                )))
            }
            (FidelityMode::Continuous, Fidelity::Continuous(m)) if (0.0..=1.0).contains(&m) => {}
            (FidelityMode::Continuous, Fidelity::Continuous(m)) => {
                return Err(Error::Contract(format!(
                    "continuous fidelity {m} outside [0, 1]"
                )))
            }
            (mode, f) => {
                return Err(Error::Contract(format!(
                    "fidelity {f:?} does not match model mode {mode:?}"
                )))
            }
        }
        match (self.slice_conditioning, cond.tau) {
            (true, Some(t)) if t.is_finite() => Ok(()),
            (true, _) => Err(Error::Contract(
                "slice-conditioned model needs a finite tau".into(),
            )),
            (false, Some(_)) => Err(Error::Contract(
                "tau given to a model without slice conditioning".into(),
            )),
            (false, None) => Ok(()),
        }
    }

    /// Network input vector for the fidelity embedding.
    pub fn fidelity_input(&self, fidelity: Fidelity) -> Vec<f64> {
        match (self.fidelity_mode, fidelity) {
            (FidelityMode::Discrete { levels }, Fidelity::Discrete(i)) => {
                let mut v = vec![0.0; levels];
                v[i] = 1.0;
                v
            }
            (_, Fidelity::Continuous(m)) => vec![m],
            (_, Fidelity::Discrete(i)) => vec![i as f64],
        }
    }
}

/// Embedding vectors for a batch, one row per sample.
#[derive(Debug, Clone)]
pub struct Embeddings<F> {
    pub params: Mat<F>,
    pub fidelity: Mat<F>,
    pub time: Mat<F>,
    pub tau: Option<Mat<F>>,
}

#[derive(Debug, Clone)]
struct EmbeddingGrads<F> {
    params: Mat<F>,
    fidelity: Mat<F>,
    tau: Option<Mat<F>>,
}

// ---------------------------------------------------------------------------
// ResNet block with conditioning injection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ResBlock<F> {
    pub cin: usize,
    pub cout: usize,
    pub norm1: GroupNorm<F>,
    pub conv1: Conv2d<F>,
    pub norm2: GroupNorm<F>,
    pub conv2: Conv2d<F>,
    pub skip: Option<Conv2d<F>>,
    pub proj_params: Linear<F>,
    pub proj_fidelity: Linear<F>,
    pub proj_time: Linear<F>,
    pub proj_tau: Option<Linear<F>>,
}

#[derive(Debug, Clone)]
pub struct ResBlockCache<F> {
    x: Tensor<F>,
    a1: Tensor<F>,
    st1: GroupNormStats,
    h: Tensor<F>,
    a2: Tensor<F>,
    st2: GroupNormStats,
    /// Pre-activation projections `W e + b` in order params, fidelity, time, tau.
    pre: Option<Vec<Mat<F>>>,
}

impl<F: Float> ResBlock<F> {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, cfg: &ScoreModelConfig, rng: &mut R) -> Self {
        Self {
            cin,
            cout,
            norm1: GroupNorm::new(cfg.groups, cin),
            conv1: Conv2d::new(cin, cout, 3, rng),
            norm2: GroupNorm::new(cfg.groups, cout),
            conv2: Conv2d::new(cout, cout, 3, rng),
            skip: (cin != cout).then(|| Conv2d::new(cin, cout, 1, rng)),
            proj_params: Linear::new(cfg.param_embed_dim, cout, rng),
            proj_fidelity: Linear::new(cfg.fidelity_embed_dim, cout, rng),
            proj_time: Linear::new(2 * cfg.rff_dim, cout, rng),
            proj_tau: cfg
                .slice_conditioning
                .then(|| Linear::new(cfg.tau_embed_dim, cout, rng)),
        }
    }

    /// Per-channel offsets `Σ_k σ(W_k e_k + b_k)` as an `N × C` matrix, plus
    /// the pre-activations.
    pub fn condition_offsets(&self, emb: &Embeddings<F>) -> (Mat<F>, Vec<Mat<F>>) {
        let mut pre = vec![
            self.proj_params.forward(&emb.params),
            self.proj_fidelity.forward(&emb.fidelity),
            self.proj_time.forward(&emb.time),
        ];
        if let (Some(p), Some(e)) = (&self.proj_tau, &emb.tau) {
            pre.push(p.forward(e));
        }
        let n = emb.params.rows;
        let mut offset = Mat::zeros(n, self.cout);
        for p in &pre {
            for (o, v) in offset.data.iter_mut().zip(&p.data) {
                *o = *o + swish(*v);
            }
        }
        (offset, pre)
    }

    /// Broadcast-adds per-channel offsets (`N × C`) over every spatial location.
    pub fn condition_inject(h: &mut Tensor<F>, offset: &Mat<F>) {
        for c in 0..h.c {
            for n in 0..h.n {
                let o = offset.data[n * offset.cols + c];
                h.image_mut(c, n).iter_mut().for_each(|v| *v = *v + o);
            }
        }
    }

    fn forward(&self, x: &Tensor<F>, emb: Option<&Embeddings<F>>) -> (Tensor<F>, ResBlockCache<F>) {
        let (a1, st1) = self.norm1.forward(x);
        let s1 = Tensor::from_vec(a1.c, a1.n, a1.h, a1.w, swish_slice(&a1.data));
        let mut h = self.conv1.forward(&s1);
        drop(s1);
        let pre = emb.map(|emb| {
            let (offset, pre) = self.condition_offsets(emb);
            Self::condition_inject(&mut h, &offset);
            pre
        });
        let (a2, st2) = self.norm2.forward(&h);
        let s2 = Tensor::from_vec(a2.c, a2.n, a2.h, a2.w, swish_slice(&a2.data));
        let mut y = self.conv2.forward(&s2);
        match &self.skip {
            Some(skip) => y.add_assign(&skip.forward(x)),
            None => y.add_assign(x),
        }
        (
            y,
            ResBlockCache {
                x: x.clone(),
                a1,
                st1,
                h,
                a2,
                st2,
                pre,
            },
        )
    }

    fn backward(
        &mut self,
        cache: &ResBlockCache<F>,
        dy: &Tensor<F>,
        emb: &Embeddings<F>,
        grads: &mut EmbeddingGrads<F>,
    ) -> Tensor<F> {
        let mut dx = match &mut self.skip {
            Some(skip) => skip.backward(&cache.x, dy),
            None => dy.clone(),
        };
        let a2 = &cache.a2;
        let s2 = Tensor::from_vec(a2.c, a2.n, a2.h, a2.w, swish_slice(&a2.data));
        let ds2 = self.conv2.backward(&s2, dy);
        drop(s2);
        let da2 = Tensor::from_vec(a2.c, a2.n, a2.h, a2.w, swish_backward(&a2.data, &ds2.data));
        let dh = self.norm2.backward(&cache.h, &cache.st2, &da2);

        if let Some(pre) = &cache.pre {
            let n = dh.n;
            let mut doffset = Mat::zeros(n, self.cout);
            for c in 0..self.cout {
                for s in 0..n {
                    doffset.data[s * self.cout + c] = dh.image(c, s).iter().copied().sum();
                }
            }
            let dpre: Vec<Mat<F>> = pre
                .iter()
                .map(|p| Mat::from_vec(n, self.cout, swish_backward(&p.data, &doffset.data)))
                .collect();
            grads
                .params
                .add_assign(&self.proj_params.backward(&emb.params, &dpre[0]));
            grads
                .fidelity
                .add_assign(&self.proj_fidelity.backward(&emb.fidelity, &dpre[1]));
            // the RFF time features are frozen, so their gradient is not needed
            self.proj_time.backward(&emb.time, &dpre[2]);
            if let (Some(proj), Some(e), Some(g)) = (&mut self.proj_tau, &emb.tau, &mut grads.tau) {
                g.add_assign(&proj.backward(e, &dpre[3]));
            }
        }

        let a1 = &cache.a1;
        let s1 = Tensor::from_vec(a1.c, a1.n, a1.h, a1.w, swish_slice(&a1.data));
        let ds1 = self.conv1.backward(&s1, &dh);
        drop(s1);
        let da1 = Tensor::from_vec(a1.c, a1.n, a1.h, a1.w, swish_backward(&a1.data, &ds1.data));
        dx.add_assign(&self.norm1.backward(&cache.x, &cache.st1, &da1));
        dx
    }
}

impl<F: Float> VisitParams<F> for ResBlock<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        if let Some(s) = &self.skip {
            s.visit_params(&join(prefix, "skip"), f);
        }
        self.proj_params.visit_params(&join(prefix, "cond_params"), f);
        self.proj_fidelity.visit_params(&join(prefix, "cond_fidelity"), f);
        self.proj_time.visit_params(&join(prefix, "cond_time"), f);
        if let Some(p) = &self.proj_tau {
            p.visit_params(&join(prefix, "cond_tau"), f);
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.norm1.visit_params_mut(&join(prefix, "norm1"), f);
        self.conv1.visit_params_mut(&join(prefix, "conv1"), f);
        self.norm2.visit_params_mut(&join(prefix, "norm2"), f);
        self.conv2.visit_params_mut(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.skip {
            s.visit_params_mut(&join(prefix, "skip"), f);
        }
        self.proj_params.visit_params_mut(&join(prefix, "cond_params"), f);
        self.proj_fidelity.visit_params_mut(&join(prefix, "cond_fidelity"), f);
        self.proj_time.visit_params_mut(&join(prefix, "cond_time"), f);
        if let Some(p) = &mut self.proj_tau {
            p.visit_params_mut(&join(prefix, "cond_tau"), f);
        }
    }
}

// ---------------------------------------------------------------------------
// U-Net
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Stage<F> {
    blocks: [ResBlock<F>; 2],
    attn: Option<SelfAttention<F>>,
}

#[derive(Debug, Clone)]
struct StageCache<F> {
    blocks: [Option<ResBlockCache<F>>; 2],
    attn: Option<AttentionCache<F>>,
}

impl<F: Float> Stage<F> {
    fn forward(
        &self,
        x: &Tensor<F>,
        emb: Option<&Embeddings<F>>,
        keep: bool,
    ) -> (Tensor<F>, Option<StageCache<F>>) {
        let (h, c0) = self.blocks[0].forward(x, emb);
        let (mut h, c1) = self.blocks[1].forward(&h, emb);
        let mut ca = None;
        if let Some(attn) = &self.attn {
            let (o, c) = attn.forward(&h);
            h = o;
            ca = Some(c);
        }
        let cache = keep.then_some(StageCache {
            blocks: [Some(c0), Some(c1)],
            attn: ca,
        });
        (h, cache)
    }

    fn backward(
        &mut self,
        cache: &StageCache<F>,
        dy: Tensor<F>,
        emb: &Embeddings<F>,
        grads: &mut EmbeddingGrads<F>,
    ) -> Tensor<F> {
        let mut d = dy;
        if let (Some(attn), Some(c)) = (&mut self.attn, &cache.attn) {
            d = attn.backward(c, &d);
        }
        let c1 = cache.blocks[1].as_ref().expect("stage cache");
        d = self.blocks[1].backward(c1, &d, emb, grads);
        let c0 = cache.blocks[0].as_ref().expect("stage cache");
        self.blocks[0].backward(c0, &d, emb, grads)
    }
}

/// The bottleneck: `Res → attention → Res`.
#[derive(Debug, Clone)]
struct Bottleneck<F> {
    first: ResBlock<F>,
    attn: Option<SelfAttention<F>>,
    second: ResBlock<F>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    z: Tensor<F>,
    emb: Embeddings<F>,
    emb_caches: (MlpCache<F>, MlpCache<F>, Option<MlpCache<F>>),
    down: Vec<StageCache<F>>,
    mid: (ResBlockCache<F>, Option<AttentionCache<F>>, ResBlockCache<F>),
    up: Vec<StageCache<F>>,
    /// Channels coming from below at each up stage, before the skip concat.
    up_split: Vec<usize>,
    final_h: Tensor<F>,
    final_a: Tensor<F>,
    final_stats: GroupNormStats,
    inv_std: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct ScoreModel<F> {
    config: ScoreModelConfig,
    sde: SdeConfig,
    rff_freqs: Vec<f64>,
    embed_params: Mlp<F>,
    embed_fidelity: Mlp<F>,
    embed_tau: Option<Mlp<F>>,
    conv_in: Conv2d<F>,
    down: Vec<Stage<F>>,
    mid: Bottleneck<F>,
    /// Expanding path in execution order (coarsest first).
    up: Vec<Stage<F>>,
    norm_out: GroupNorm<F>,
    conv_out: Conv2d<F>,
}

/// Parameter totals by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParameterCounts {
    pub total: usize,
    /// All convolution kernels.
    pub conv_kernels: usize,
    /// Convolution kernels excluding the single-channel input/output convolutions.
    pub hidden_conv_kernels: usize,
    /// Per-block conditioning projections.
    pub conditioning: usize,
    /// Embedding MLPs.
    pub embeddings: usize,
}

/// Exact learnable-parameter count for a configuration.
pub fn count_parameters(config: &ScoreModelConfig) -> Result<usize> {
    Ok(parameter_counts(config)?.total)
}

pub fn parameter_counts(config: &ScoreModelConfig) -> Result<ParameterCounts> {
    let model = ScoreModel::<f32>::new(config.clone(), SdeConfig::default(), 0)?;
    let mut c = ParameterCounts::default();
    model.visit_params("", &mut |name, p| {
        let n = p.len();
        c.total += n;
        if name.ends_with(".kernel") {
            c.conv_kernels += n;
            if !name.starts_with("conv_in") && !name.starts_with("conv_out") {
                c.hidden_conv_kernels += n;
            }
        }
        if name.contains(".cond_") {
            c.conditioning += n;
        }
        if name.starts_with("embed_") {
            c.embeddings += n;
        }
    });
    Ok(c)
}

impl<F: Float> ScoreModel<F> {
    /// Builds and initializes a model. Initialization is a pure function of
    /// `(config, seed)`.
    pub fn new(config: ScoreModelConfig, sde: SdeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        sde.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let rff_freqs: Vec<f64> = (0..config.rff_dim)
            // rounded to f32 so checkpoints store them exactly
            .map(|_| (config.rff_scale * rng.sample::<f64, _>(StandardNormal)) as f32 as f64)
            .collect();
        let embed_params = Mlp::new(config.param_dim, config.embed_width, config.param_embed_dim, rng);
        let embed_fidelity = Mlp::new(
            config.fidelity_input_dim(),
            config.embed_width,
            config.fidelity_embed_dim,
            rng,
        );
        let embed_tau = config
            .slice_conditioning
            .then(|| Mlp::new(1, config.embed_width, config.tau_embed_dim, rng));

        let ch = config.channel_schedule.clone();
        let levels = ch.len();
        let res = config.resolution();
        let attn_at = |level: usize| config.attention_resolutions.contains(&(res >> level));

        let conv_in = Conv2d::new(1, ch[0], 3, rng);
        let mut down = Vec::new();
        let mut prev = ch[0];
        for (l, &c) in ch.iter().enumerate().take(levels - 1) {
            down.push(Stage {
                blocks: [
                    ResBlock::new(prev, c, &config, rng),
                    ResBlock::new(c, c, &config, rng),
                ],
                attn: attn_at(l).then(|| SelfAttention::new(c, config.groups, rng)),
            });
            prev = c;
        }
        let cb = ch[levels - 1];
        let mid = Bottleneck {
            first: ResBlock::new(prev, cb, &config, rng),
            attn: attn_at(levels - 1).then(|| SelfAttention::new(cb, config.groups, rng)),
            second: ResBlock::new(cb, cb, &config, rng),
        };
        let mut up = Vec::new();
        let mut below = cb;
        for l in (0..levels - 1).rev() {
            let c = ch[l];
            up.push(Stage {
                blocks: [
                    ResBlock::new(below + c, c, &config, rng),
                    ResBlock::new(c, c, &config, rng),
                ],
                attn: attn_at(l).then(|| SelfAttention::new(c, config.groups, rng)),
            });
            below = c;
        }
        let norm_out = GroupNorm::new(config.groups, ch[0]);
        // zero-initialized so the initial score is exactly 0
        let conv_out = Conv2d::zeroed(ch[0], 1, 3);
        Ok(Self {
            config,
            sde,
            rff_freqs,
            embed_params,
            embed_fidelity,
            embed_tau,
            conv_in,
            down,
            mid,
            up,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &ScoreModelConfig {
        &self.config
    }

    pub fn sde(&self) -> &SdeConfig {
        &self.sde
    }

    pub fn rff_frequencies(&self) -> &[f64] {
        &self.rff_freqs
    }

    pub(crate) fn set_rff_frequencies(&mut self, freqs: Vec<f64>) -> Result<()> {
        if freqs.len() != self.config.rff_dim {
            return Err(Error::Checkpoint(format!(
                "expected {} Fourier frequencies, found {}",
                self.config.rff_dim,
                freqs.len()
            )));
        }
        self.rff_freqs = freqs;
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    fn check_batch(&self, z_len: usize, times: &[f64], conds: &[ConditionInfo]) -> Result<usize> {
        let r = self.config.resolution();
        let n = conds.len();
        if n == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        if z_len != n * r * r {
            return Err(Error::Contract(format!(
                "state has {z_len} values, expected {n} fields of {r}x{r}"
            )));
        }
        if times.len() != n {
            return Err(Error::Contract(format!(
                "{} times for a batch of {n}",
                times.len()
            )));
        }
        for &t in times {
            if !(t > 0.0 && t <= self.sde.horizon) {
                return Err(Error::Domain(format!(
                    "score model time {t} outside (0, {}]",
                    self.sde.horizon
                )));
            }
        }
        for c in conds {
            self.config.check_condition(c)?;
        }
        Ok(n)
    }

    /// `[PDE-parameter embedding]` for a single parameter vector.
    pub fn embed_params(&self, x: &[f64]) -> Result<Vec<F>> {
        if x.len() != self.config.param_dim {
            return Err(Error::Contract(format!(
                "parameter vector has length {}, model expects {}",
                x.len(),
                self.config.param_dim
            )));
        }
        let input = Mat::from_vec(1, x.len(), x.iter().map(|&v| F::of(v)).collect());
        Ok(self.embed_params.forward(&input).0.data)
    }

    /// Fidelity embedding; the representation must match the model's mode.
    pub fn embed_fidelity(&self, fidelity: Fidelity) -> Result<Vec<F>> {
        let probe = ConditionInfo {
            x: vec![0.0; self.config.param_dim],
            fidelity,
            tau: self.config.slice_conditioning.then_some(0.0),
        };
        self.config.check_condition(&probe)?;
        let v = self.config.fidelity_input(fidelity);
        let input = Mat::from_vec(1, v.len(), v.into_iter().map(F::of).collect());
        Ok(self.embed_fidelity.forward(&input).0.data)
    }

    /// Random Fourier features `[sin(2π f t), cos(2π f t)]`.
    pub fn embed_time(&self, t: f64) -> Vec<F> {
        let k = self.rff_freqs.len();
        let mut out = vec![F::zero(); 2 * k];
        for (i, f) in self.rff_freqs.iter().enumerate() {
            let arg = 2.0 * std::f64::consts::PI * f * t;
            out[i] = F::of(arg.sin());
            out[k + i] = F::of(arg.cos());
        }
        out
    }

    fn embeddings(
        &self,
        times: &[f64],
        conds: &[ConditionInfo],
    ) -> (Embeddings<F>, (MlpCache<F>, MlpCache<F>, Option<MlpCache<F>>)) {
        let n = conds.len();
        let xs: Vec<F> = conds.iter().flat_map(|c| c.x.iter().map(|&v| F::of(v))).collect();
        let (params, cp) = self
            .embed_params
            .forward(&Mat::from_vec(n, self.config.param_dim, xs));
        let fd = self.config.fidelity_input_dim();
        let fs: Vec<F> = conds
            .iter()
            .flat_map(|c| self.config.fidelity_input(c.fidelity).into_iter().map(F::of))
            .collect();
        let (fidelity, cf) = self.embed_fidelity.forward(&Mat::from_vec(n, fd, fs));
        let time_rows: Vec<F> = times.iter().flat_map(|&t| self.embed_time(t)).collect();
        let time = Mat::from_vec(n, 2 * self.config.rff_dim, time_rows);
        let (tau, ct) = match &self.embed_tau {
            Some(mlp) => {
                let ts: Vec<F> = conds.iter().map(|c| F::of(c.tau.unwrap_or(0.0))).collect();
                let (e, c) = mlp.forward(&Mat::from_vec(n, 1, ts));
                (Some(e), Some(c))
            }
            None => (None, None),
        };
        (
            Embeddings {
                params,
                fidelity,
                time,
                tau,
            },
            (cp, cf, ct),
        )
    }

    fn run(
        &self,
        z: &[F],
        times: &[f64],
        conds: &[ConditionInfo],
        inject: bool,
        keep: bool,
    ) -> Result<(Vec<F>, Option<ForwardCache<F>>)> {
        let n = self.check_batch(z.len(), times, conds)?;
        let r = self.config.resolution();
        let (emb, emb_caches) = self.embeddings(times, conds);
        let e = inject.then_some(&emb);

        let z = Tensor::from_vec(1, n, r, r, z.to_vec());
        let mut h = self.conv_in.forward(&z);
        let mut skips = Vec::with_capacity(self.down.len());
        let mut down_caches = Vec::new();
        for stage in &self.down {
            let (o, c) = stage.forward(&h, e, keep);
            down_caches.extend(c);
            h = fir_down(&o);
            skips.push(o);
        }
        let (o, mid0) = self.mid.first.forward(&h, e);
        h = o;
        let mut mid_attn = None;
        if let Some(attn) = &self.mid.attn {
            let (o, c) = attn.forward(&h);
            h = o;
            mid_attn = Some(c);
        }
        let (o, mid1) = self.mid.second.forward(&h, e);
        h = o;
        let mut up_caches = Vec::new();
        let mut up_split = Vec::new();
        for stage in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let upsampled = fir_up(&h);
            up_split.push(upsampled.c);
            let cat = upsampled.concat_channels(&skip);
            let (o, c) = stage.forward(&cat, e, keep);
            up_caches.extend(c);
            h = o;
        }
        let (a, stats) = self.norm_out.forward(&h);
        let s = Tensor::from_vec(a.c, a.n, a.h, a.w, swish_slice(&a.data));
        let mut out = self.conv_out.forward(&s).data;
        let hw = r * r;
        let inv_std: Vec<F> = times
            .iter()
            .map(|&t| F::of(1.0 / self.sde.kernel_variance_unchecked(t).sqrt()))
            .collect();
        for (i, chunk) in out.chunks_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v * inv_std[i]);
        }
        let cache = keep.then_some(ForwardCache {
            z,
            emb,
            emb_caches,
            down: down_caches,
            mid: (mid0, mid_attn, mid1),
            up: up_caches,
            up_split,
            final_h: h,
            final_a: a,
            final_stats: stats,
            inv_std,
        });
        Ok((out, cache))
    }

    /// Estimated score for a batch of `N` fields stored contiguously
    /// (`N × d1 × d2`), one time and one conditioning tuple per field.
    pub fn forward(&self, z: &[F], times: &[f64], conds: &[ConditionInfo]) -> Result<Vec<F>> {
        Ok(self.run(z, times, conds, true, false)?.0)
    }

    /// The backbone with every conditioning injection skipped.
    pub fn forward_unconditioned(&self, z: &[F], times: &[f64], conds: &[ConditionInfo]) -> Result<Vec<F>> {
        Ok(self.run(z, times, conds, false, false)?.0)
    }

    /// Forward pass that keeps activations for [`backward`](Self::backward).
    pub fn forward_train(
        &self,
        z: &[F],
        times: &[f64],
        conds: &[ConditionInfo],
    ) -> Result<(Vec<F>, ForwardCache<F>)> {
        let (out, cache) = self.run(z, times, conds, true, true)?;
        Ok((out, cache.expect("cache requested")))
    }

    /// Accumulates `∂L/∂θ` into the parameter gradients given `∂L/∂output`,
    /// and returns `∂L/∂z`.
    pub fn backward(&mut self, cache: &ForwardCache<F>, dout: &[F]) -> Vec<F> {
        let z = &cache.z;
        let (n, r) = (z.n, z.h);
        let hw = r * r;
        let mut dy = Tensor::from_vec(1, n, r, r, dout.to_vec());
        for (i, chunk) in dy.data.chunks_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v * cache.inv_std[i]);
        }
        let emb = &cache.emb;
        let mut grads = EmbeddingGrads {
            params: Mat::zeros(n, self.config.param_embed_dim),
            fidelity: Mat::zeros(n, self.config.fidelity_embed_dim),
            tau: emb.tau.as_ref().map(|t| Mat::zeros(t.rows, t.cols)),
        };

        let a = &cache.final_a;
        let s = Tensor::from_vec(a.c, a.n, a.h, a.w, swish_slice(&a.data));
        let ds = self.conv_out.backward(&s, &dy);
        let da = Tensor::from_vec(a.c, a.n, a.h, a.w, swish_backward(&a.data, &ds.data));
        let mut d = self
            .norm_out
            .backward(&cache.final_h, &cache.final_stats, &da);

        let mut dskips = Vec::with_capacity(self.up.len());
        for (i, stage) in self.up.iter_mut().enumerate().rev() {
            let dcat = stage.backward(&cache.up[i], d, emb, &mut grads);
            let (dup, dskip) = dcat.split_channels(cache.up_split[i]);
            dskips.push(dskip);
            d = fir_up_backward(&dup);
        }
        // dskips is now finest-first, matching the order of self.down

        let (mid0, mid_attn, mid1) = &cache.mid;
        d = self.mid.second.backward(mid1, &d, emb, &mut grads);
        if let (Some(attn), Some(c)) = (&mut self.mid.attn, mid_attn) {
            d = attn.backward(c, &d);
        }
        d = self.mid.first.backward(mid0, &d, emb, &mut grads);

        for (i, stage) in self.down.iter_mut().enumerate().rev() {
            let mut dstage = fir_down_backward(&d);
            dstage.add_assign(&dskips[i]);
            d = stage.backward(&cache.down[i], dstage, emb, &mut grads);
        }
        let dz = self.conv_in.backward(z, &d);

        let (cp, cf, ct) = &cache.emb_caches;
        self.embed_params.backward(cp, &grads.params);
        self.embed_fidelity.backward(cf, &grads.fidelity);
        if let (Some(mlp), Some(c), Some(g)) = (&mut self.embed_tau, ct, &grads.tau) {
            mlp.backward(c, g);
        }
        dz.data
    }

    /// Sets every conditioning projection (weights and biases) to zero.
    pub fn zero_conditioning_projections(&mut self) {
        self.visit_params_mut("", &mut |name, p| {
            if name.contains(".cond_") {
                p.value.iter_mut().for_each(|v| *v = F::zero());
            }
        });
    }

    /// Converts all parameters to another precision.
    pub fn cast<G: Float>(&self) -> ScoreModel<G> {
        let mut out = ScoreModel::<G>::new(self.config.clone(), self.sde, 0)
            .expect("config already validated");
        out.rff_freqs = self.rff_freqs.clone();
        let mut values = Vec::new();
        self.visit_params("", &mut |_, p| values.push(p.value.clone()));
        let mut it = values.into_iter();
        out.visit_params_mut("", &mut |_, p| {
            let v = it.next().expect("identical layouts");
            p.value = v.into_iter().map(|x| G::of(x.f64())).collect();
        });
        out
    }
}

impl<F: Float> VisitParams<F> for ScoreModel<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.embed_params.visit_params(&join(prefix, "embed_params"), f);
        self.embed_fidelity.visit_params(&join(prefix, "embed_fidelity"), f);
        if let Some(m) = &self.embed_tau {
            m.visit_params(&join(prefix, "embed_tau"), f);
        }
        self.conv_in.visit_params(&join(prefix, "conv_in"), f);
        for (i, s) in self.down.iter().enumerate() {
            let p = join(prefix, &format!("down{i}"));
            s.blocks[0].visit_params(&join(&p, "res0"), f);
            s.blocks[1].visit_params(&join(&p, "res1"), f);
            if let Some(a) = &s.attn {
                a.visit_params(&join(&p, "attn"), f);
            }
        }
        let p = join(prefix, "mid");
        self.mid.first.visit_params(&join(&p, "res0"), f);
        if let Some(a) = &self.mid.attn {
            a.visit_params(&join(&p, "attn"), f);
        }
        self.mid.second.visit_params(&join(&p, "res1"), f);
        let nup = self.up.len();
        for (i, s) in self.up.iter().enumerate() {
            let p = join(prefix, &format!("up{}", nup - 1 - i));
            s.blocks[0].visit_params(&join(&p, "res0"), f);
            s.blocks[1].visit_params(&join(&p, "res1"), f);
            if let Some(a) = &s.attn {
                a.visit_params(&join(&p, "attn"), f);
            }
        }
        self.norm_out.visit_params(&join(prefix, "norm_out"), f);
        self.conv_out.visit_params(&join(prefix, "conv_out"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.embed_params.visit_params_mut(&join(prefix, "embed_params"), f);
        self.embed_fidelity.visit_params_mut(&join(prefix, "embed_fidelity"), f);
        if let Some(m) = &mut self.embed_tau {
            m.visit_params_mut(&join(prefix, "embed_tau"), f);
        }
        self.conv_in.visit_params_mut(&join(prefix, "conv_in"), f);
        for (i, s) in self.down.iter_mut().enumerate() {
            let p = join(prefix, &format!("down{i}"));
            s.blocks[0].visit_params_mut(&join(&p, "res0"), f);
            s.blocks[1].visit_params_mut(&join(&p, "res1"), f);
            if let Some(a) = &mut s.attn {
                a.visit_params_mut(&join(&p, "attn"), f);
            }
        }
        let p = join(prefix, "mid");
        self.mid.first.visit_params_mut(&join(&p, "res0"), f);
        if let Some(a) = &mut self.mid.attn {
            a.visit_params_mut(&join(&p, "attn"), f);
        }
        self.mid.second.visit_params_mut(&join(&p, "res1"), f);
        let nup = self.up.len();
        for (i, s) in self.up.iter_mut().enumerate() {
            let p = join(prefix, &format!("up{}", nup - 1 - i));
            s.blocks[0].visit_params_mut(&join(&p, "res0"), f);
            s.blocks[1].visit_params_mut(&join(&p, "res1"), f);
            if let Some(a) = &mut s.attn {
                a.visit_params_mut(&join(&p, "attn"), f);
            }
        }
        self.norm_out.visit_params_mut(&join(prefix, "norm_out"), f);
        self.conv_out.visit_params_mut(&join(prefix, "conv_out"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ScoreModelConfig {
        ScoreModelConfig::new(16, 3, FidelityMode::Discrete { levels: 4 }).with_channels(vec![4, 4, 8])
    }

    fn cond(x0: f64, fid: usize) -> ConditionInfo {
        ConditionInfo::new(vec![x0, 0.3, -0.7], Fidelity::Discrete(fid))
    }

    fn field(n: usize, r: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * r * r).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    /// Replaces the zero-initialized output convolution with random weights.
    fn randomize_output<F: Float>(model: &mut ScoreModel<F>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.visit_params_mut("", &mut |name, p| {
            if name.starts_with("conv_out") {
                p.value
                    .iter_mut()
                    .for_each(|v| *v = F::of(rng.random_range(-0.2..0.2)));
            }
        });
    }

    fn model<F: Float>(cfg: ScoreModelConfig) -> ScoreModel<F> {
        let mut m = ScoreModel::new(cfg, SdeConfig::default(), 5).unwrap();
        randomize_output(&mut m, 6);
        m
    }

    fn cast_vec<F: Float>(v: &[f64]) -> Vec<F> {
        v.iter().map(|&x| F::of(x)).collect()
    }

    #[test]
    fn default_schedules() {
        let c64 = ScoreModelConfig::new(64, 2, FidelityMode::Continuous);
        assert_eq!(c64.channel_schedule, vec![16, 16, 32, 32, 64]);
        let c128 = ScoreModelConfig::new(128, 2, FidelityMode::Continuous);
        assert_eq!(c128.channel_schedule, vec![16, 16, 32, 32, 64, 64]);
        c64.validate().unwrap();
        c128.validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = small_config();
        c.input_resolution = (16, 8);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = small_config().with_channels(vec![4, 4]);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = small_config().with_channels(vec![4, 6, 8]);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = small_config();
        c.input_resolution = (24, 24);
        assert!(c.validate().is_err());
    }

    #[test]
    fn attention_placement() {
        let m = ScoreModel::<f32>::new(
            ScoreModelConfig::new(64, 2, FidelityMode::Continuous),
            SdeConfig::default(),
            0,
        )
        .unwrap();
        let mut attn = Vec::new();
        m.visit_params("", &mut |name, _| {
            if name.ends_with("attn.qkv.kernel") {
                attn.push(name.to_string());
            }
        });
        // 64 → 32 → 16 → 8 → 4: level 2 on both paths plus the bottleneck
        assert_eq!(attn, vec!["down2.attn.qkv.kernel", "mid.attn.qkv.kernel", "up2.attn.qkv.kernel"]);
    }

    #[test]
    fn output_shape_and_zero_initial_score() {
        let cfg = ScoreModelConfig::new(64, 2, FidelityMode::Discrete { levels: 4 });
        let m = ScoreModel::<f32>::new(cfg, SdeConfig::default(), 1).unwrap();
        let z = cast_vec::<f32>(&field(1, 64, 2));
        let c = ConditionInfo::new(vec![0.1, 0.2], Fidelity::Discrete(1));
        let out = m.forward(&z, &[0.5], &[c]).unwrap();
        assert_eq!(out.len(), 64 * 64);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic_and_batch_invariant() {
        let m = model::<f32>(small_config());
        let z = cast_vec::<f32>(&field(3, 16, 3));
        let t = [0.2, 0.5, 0.9];
        let conds = [cond(0.1, 0), cond(0.4, 1), cond(-0.2, 3)];
        let a = m.forward(&z, &t, &conds).unwrap();
        let b = m.forward(&z, &t, &conds).unwrap();
        assert_eq!(a, b);
        for i in 0..3 {
            let single = m
                .forward(&z[i * 256..(i + 1) * 256], &t[i..i + 1], &conds[i..i + 1])
                .unwrap();
            assert_eq!(single, a[i * 256..(i + 1) * 256]);
        }
    }

    #[test]
    fn construction_is_seed_deterministic() {
        let a = ScoreModel::<f32>::new(small_config(), SdeConfig::default(), 9).unwrap();
        let b = ScoreModel::<f32>::new(small_config(), SdeConfig::default(), 9).unwrap();
        let mut va = Vec::new();
        a.visit_params("", &mut |_, p| va.extend_from_slice(&p.value));
        let mut vb = Vec::new();
        b.visit_params("", &mut |_, p| vb.extend_from_slice(&p.value));
        assert_eq!(va, vb);
        assert_eq!(a.rff_frequencies(), b.rff_frequencies());
    }

    #[test]
    fn contract_errors() {
        let m = model::<f32>(small_config());
        let z = vec![0.0f32; 256];
        let bad_len = ConditionInfo::new(vec![0.0; 2], Fidelity::Discrete(0));
        assert!(matches!(m.forward(&z, &[0.5], &[bad_len]), Err(Error::Contract(_))));
        let bad_mode = ConditionInfo::new(vec![0.0; 3], Fidelity::Continuous(0.5));
        assert!(matches!(m.forward(&z, &[0.5], &[bad_mode]), Err(Error::Contract(_))));
        let bad_index = cond(0.0, 4);
        assert!(matches!(m.forward(&z, &[0.5], &[bad_index]), Err(Error::Contract(_))));
        assert!(matches!(m.forward(&z[..100], &[0.5], &[cond(0.0, 0)]), Err(Error::Contract(_))));
        let tau = cond(0.0, 0).with_tau(0.5);
        assert!(matches!(m.forward(&z, &[0.5], &[tau]), Err(Error::Contract(_))));
        assert!(matches!(m.embed_params(&[1.0]), Err(Error::Contract(_))));
        assert!(matches!(m.embed_fidelity(Fidelity::Continuous(0.2)), Err(Error::Contract(_))));
    }

    #[test]
    fn embeddings() {
        let m = model::<f64>(small_config());
        let e1 = m.embed_params(&[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(e1.len(), 16);
        assert_eq!(e1, m.embed_params(&[0.1, 0.2, 0.3]).unwrap());
        assert_eq!(m.embed_fidelity(Fidelity::Discrete(2)).unwrap().len(), 16);

        // the discrete embedding is the MLP applied to the one-hot vector
        let direct = m
            .embed_fidelity
            .forward(&Mat::from_vec(1, 4, vec![0.0, 0.0, 1.0, 0.0]))
            .0
            .data;
        assert_eq!(m.embed_fidelity(Fidelity::Discrete(2)).unwrap(), direct);

        let et = m.embed_time(0.0);
        assert_eq!(et.len(), 128);
        assert!(et[..64].iter().all(|&v| v == 0.0));
        assert!(et[64..].iter().all(|&v| v == 1.0));
        let et = m.embed_time(0.37);
        assert!(et.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(et, m.embed_time(0.37));

        let cont = model::<f64>(ScoreModelConfig::new(16, 3, FidelityMode::Continuous).with_channels(vec![4, 4, 8]));
        let a = cont.embed_fidelity(Fidelity::Continuous(0.0)).unwrap();
        let b = cont.embed_fidelity(Fidelity::Continuous(1.0)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_mlp_gives_zero_embedding() {
        let mut m = model::<f64>(small_config());
        m.embed_params
            .visit_params_mut("", &mut |_, p| p.value.iter_mut().for_each(|v| *v = 0.0));
        assert!(m.embed_params(&[1.0, -2.0, 3.0]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn injection_broadcasts_per_channel() {
        let m = model::<f64>(small_config());
        let block = &m.down[0].blocks[0];
        let (emb, _) = m.embeddings(&[0.4, 0.6], &[cond(0.1, 0), cond(0.2, 2)]);
        let (offset, _) = block.condition_offsets(&emb);
        let mut h = Tensor::<f64>::zeros(block.cout, 2, 5, 5);
        ResBlock::condition_inject(&mut h, &offset);
        for c in 0..block.cout {
            for n in 0..2 {
                let img = h.image(c, n);
                assert!(img.iter().all(|&v| v == img[0]));
                assert_eq!(img[0], offset.data[n * block.cout + c]);
            }
        }
    }

    #[test]
    fn zero_embeddings_leave_features_unchanged() {
        let mut m = model::<f64>(small_config());
        m.visit_params_mut("", &mut |name, p| {
            if name.contains(".cond_") && name.ends_with(".bias") {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
        });
        let block = &m.down[0].blocks[0];
        let emb = Embeddings {
            params: Mat::zeros(1, 16),
            fidelity: Mat::zeros(1, 16),
            time: Mat::zeros(1, 128),
            tau: None,
        };
        let (offset, _) = block.condition_offsets(&emb);
        let data = field(block.cout, 4, 8);
        let mut h = Tensor::from_vec(block.cout, 1, 4, 4, data.clone());
        ResBlock::condition_inject(&mut h, &offset);
        assert_eq!(h.data, data);
    }

    #[test]
    fn zeroed_projections_match_unconditioned_backbone() {
        let mut m = model::<f32>(small_config());
        m.zero_conditioning_projections();
        let z = cast_vec::<f32>(&field(2, 16, 4));
        let t = [0.3, 0.8];
        let conds = [cond(0.5, 1), cond(-0.5, 2)];
        let a = m.forward(&z, &t, &conds).unwrap();
        let b = m.forward_unconditioned(&z, &t, &conds).unwrap();
        assert_eq!(a, b);
    }

    fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn conditioning_changes_output() {
        let cfg = small_config().with_slice_conditioning(true);
        let m = model::<f32>(cfg);
        let z = cast_vec::<f32>(&field(1, 16, 5));
        let base = cond(0.2, 1).with_tau(0.25);
        let out = |c: ConditionInfo| m.forward(&z, &[0.5], &[c]).unwrap();
        let reference = out(base.clone());
        let mut cx = base.clone();
        cx.x[0] = 0.9;
        assert!(max_abs_diff(&reference, &out(cx)) > 0.0);
        let mut cm = base.clone();
        cm.fidelity = Fidelity::Discrete(3);
        assert!(max_abs_diff(&reference, &out(cm)) > 0.0);
        assert!(max_abs_diff(&reference, &out(base.clone().with_tau(0.75))) > 0.0);
        let other_t = m.forward(&z, &[0.6], &[base]).unwrap();
        assert!(max_abs_diff(&reference, &other_t) > 0.0);
    }

    #[test]
    fn doubling_channels_quadruples_kernel_parameters() {
        let a = parameter_counts(&small_config()).unwrap();
        let b = parameter_counts(&small_config().with_channels(vec![8, 8, 16])).unwrap();
        assert_eq!(b.hidden_conv_kernels, 4 * a.hidden_conv_kernels);
        let c64 = ScoreModelConfig::new(64, 2, FidelityMode::Discrete { levels: 4 });
        let n1 = count_parameters(&c64).unwrap();
        assert_eq!(n1, count_parameters(&c64).unwrap());
        assert!(n1 > 0);
        let m = ScoreModel::<f32>::new(c64, SdeConfig::default(), 3).unwrap();
        assert_eq!(m.num_parameters(), n1);
    }

    /// Compares `<∇L, d>` from the backward pass with a central difference of
    /// `L = mean(out²)` along random parameter and input directions.
    fn gradient_check<F: Float>(rel_step: f64, tol: f64) {
        let cfg = small_config().with_slice_conditioning(true);
        let mut m = model::<F>(cfg);
        let n = 2;
        let z: Vec<F> = cast_vec(&field(n, 16, 21));
        let t = [0.35, 0.7];
        let conds = [cond(0.3, 1).with_tau(0.2), cond(-0.4, 2).with_tau(0.9)];
        let loss = |m: &ScoreModel<F>, z: &[F]| -> f64 {
            let out = m.forward(z, &t, &conds).unwrap();
            out.iter().map(|v| v.f64() * v.f64()).sum::<f64>() / out.len() as f64
        };

        m.zero_grad();
        let (out, cache) = m.forward_train(&z, &t, &conds).unwrap();
        let scale = F::of(2.0 / out.len() as f64);
        let dout: Vec<F> = out.iter().map(|&v| v * scale).collect();
        let dz = m.backward(&cache, &dout);

        let mut grads = Vec::new();
        let mut values = Vec::new();
        m.visit_params("", &mut |_, p| {
            grads.extend(p.grad.iter().map(|g| g.f64()));
            values.extend(p.value.iter().map(|v| v.f64()));
        });
        let theta_norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let d: Vec<f64> = (0..values.len()).map(|_| rng.sample(StandardNormal)).collect();
            let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            let h = rel_step * theta_norm / dn;
            let shifted = |sign: f64| {
                let mut mm = m.clone();
                let mut i = 0;
                mm.visit_params_mut("", &mut |_, p| {
                    for v in p.value.iter_mut() {
                        *v = F::of(values[i] + sign * h * d[i]);
                        i += 1;
                    }
                });
                loss(&mm, &z)
            };
            let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
            let an: f64 = grads.iter().zip(&d).map(|(g, v)| g * v).sum();
            worst = worst.max((fd - an).abs() / an.abs().max(1e-12));
        }
        assert!(worst < tol, "parameter gradient relative error {worst}");

        let z_norm = z.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
        let mut worst: f64 = 0.0;
        for _ in 0..5 {
            let d: Vec<f64> = (0..z.len()).map(|_| rng.sample(StandardNormal)).collect();
            let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            let h = rel_step * z_norm / dn;
            let shift = |sign: f64| -> Vec<F> {
                z.iter().zip(&d).map(|(v, e)| F::of(v.f64() + sign * h * e)).collect()
            };
            let fd = (loss(&m, &shift(1.0)) - loss(&m, &shift(-1.0))) / (2.0 * h);
            let an: f64 = dz.iter().zip(&d).map(|(g, v)| g.f64() * v).sum();
            worst = worst.max((fd - an).abs() / an.abs().max(1e-12));
        }
        assert!(worst < tol, "input gradient relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences_f32() {
        gradient_check::<f32>(1e-3, 1e-2);
    }

    #[test]
    fn gradients_match_finite_differences_f64() {
        gradient_check::<f64>(1e-5, 1e-5);
    }
}
