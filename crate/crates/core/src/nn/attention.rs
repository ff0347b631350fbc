use rand::Rng;

use super::float::{gemm, Float, Op};
use super::layers::{Conv2d, GroupNorm, GroupNormStats};
use super::tensor::{join, Param, Tensor, VisitParams};

/// Single-head self-attention over spatial positions, with channels as the
/// feature dimension, added back onto the input.
///
/// `out = x + proj(v · softmax(qᵀk / √C)ᵀ)` with `q, k, v` from a 1×1
/// convolution of `GroupNorm(x)`.
#[derive(Debug, Clone)]
pub struct SelfAttention<F> {
    pub channels: usize,
    pub norm: GroupNorm<F>,
    pub qkv: Conv2d<F>,
    pub proj: Conv2d<F>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<F> {
    x: Tensor<F>,
    normed: Tensor<F>,
    stats: GroupNormStats,
    qkv: Tensor<F>,
    /// Per sample `HW × HW` attention weights, rows over queries.
    probs: Vec<Vec<F>>,
    mixed: Tensor<F>,
}

impl<F: Float> SelfAttention<F> {
    pub fn new<R: Rng + ?Sized>(channels: usize, groups: usize, rng: &mut R) -> Self {
        Self {
            channels,
            norm: GroupNorm::new(groups, channels),
            qkv: Conv2d::new(channels, 3 * channels, 1, rng),
            proj: Conv2d::new(channels, channels, 1, rng),
        }
    }

    fn sample_block(t: &Tensor<F>, c0: usize, c: usize, n: usize) -> Vec<F> {
        let hw = t.hw();
        let mut out = Vec::with_capacity(c * hw);
        for ch in c0..c0 + c {
            out.extend_from_slice(t.image(ch, n));
        }
        out
    }

    fn write_block(t: &mut Tensor<F>, c0: usize, c: usize, n: usize, block: &[F]) {
        let hw = t.hw();
        for ch in 0..c {
            t.image_mut(c0 + ch, n)
                .copy_from_slice(&block[ch * hw..(ch + 1) * hw]);
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> (Tensor<F>, AttentionCache<F>) {
        let c = self.channels;
        let hw = x.hw();
        let scale = F::of(1.0 / (c as f64).sqrt());
        let (normed, stats) = self.norm.forward(x);
        let qkv = self.qkv.forward(&normed);
        let mut mixed = Tensor::zeros(c, x.n, x.h, x.w);
        let mut probs = Vec::with_capacity(x.n);
        let mut scores = vec![F::zero(); hw * hw];
        let mut o = vec![F::zero(); c * hw];
        for n in 0..x.n {
            let q = Self::sample_block(&qkv, 0, c, n);
            let k = Self::sample_block(&qkv, c, c, n);
            let v = Self::sample_block(&qkv, 2 * c, c, n);
            // scores[i, j] = q[:, i] · k[:, j] / sqrt(C)
            gemm(Op::T, Op::N, hw, c, hw, scale, &q, &k, F::zero(), &mut scores);
            for row in scores.chunks_mut(hw) {
                let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
                let mut sum = F::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum = sum + *v;
                }
                let inv = F::one() / sum;
                row.iter_mut().for_each(|v| *v = *v * inv);
            }
            // o[C, HWq] = v[C, HWk] · Pᵀ
            gemm(Op::N, Op::T, c, hw, hw, F::one(), &v, &scores, F::zero(), &mut o);
            Self::write_block(&mut mixed, 0, c, n, &o);
            probs.push(scores.clone());
        }
        let mut out = self.proj.forward(&mixed);
        out.add_assign(x);
        (
            out,
            AttentionCache {
                x: x.clone(),
                normed,
                stats,
                qkv,
                probs,
                mixed,
            },
        )
    }

    pub fn backward(&mut self, cache: &AttentionCache<F>, dy: &Tensor<F>) -> Tensor<F> {
        let c = self.channels;
        let hw = dy.hw();
        let scale = F::of(1.0 / (c as f64).sqrt());
        let dmixed = self.proj.backward(&cache.mixed, dy);
        let mut dqkv = cache.qkv.zeros_like();
        let mut dp = vec![F::zero(); hw * hw];
        let mut dv = vec![F::zero(); c * hw];
        let mut dq = vec![F::zero(); c * hw];
        let mut dk = vec![F::zero(); c * hw];
        for n in 0..dy.n {
            let q = Self::sample_block(&cache.qkv, 0, c, n);
            let k = Self::sample_block(&cache.qkv, c, c, n);
            let v = Self::sample_block(&cache.qkv, 2 * c, c, n);
            let dout = Self::sample_block(&dmixed, 0, c, n);
            let p = &cache.probs[n];
            // dv = dO · P
            gemm(Op::N, Op::N, c, hw, hw, F::one(), &dout, p, F::zero(), &mut dv);
            // dP = dOᵀ · v
            gemm(Op::T, Op::N, hw, c, hw, F::one(), &dout, &v, F::zero(), &mut dp);
            // softmax backward, row-wise: dS = P ⊙ (dP - <dP, P>)
            for (drow, prow) in dp.chunks_mut(hw).zip(p.chunks(hw)) {
                let inner: F = drow.iter().zip(prow).map(|(a, b)| *a * *b).sum();
                for (d, pv) in drow.iter_mut().zip(prow) {
                    *d = *pv * (*d - inner) * scale;
                }
            }
            // S = qᵀk: dq = k · dSᵀ, dk = q · dS
            gemm(Op::N, Op::T, c, hw, hw, F::one(), &k, &dp, F::zero(), &mut dq);
            gemm(Op::N, Op::N, c, hw, hw, F::one(), &q, &dp, F::zero(), &mut dk);
            Self::write_block(&mut dqkv, 0, c, n, &dq);
            Self::write_block(&mut dqkv, c, c, n, &dk);
            Self::write_block(&mut dqkv, 2 * c, c, n, &dv);
        }
        let dnormed = self.qkv.backward(&cache.normed, &dqkv);
        let mut dx = self.norm.backward(&cache.x, &cache.stats, &dnormed);
        dx.add_assign(dy);
        dx
    }
}

impl<F: Float> VisitParams<F> for SelfAttention<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.qkv.visit_params(&join(prefix, "qkv"), f);
        self.proj.visit_params(&join(prefix, "proj"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
        self.qkv.visit_params_mut(&join(prefix, "qkv"), f);
        self.proj.visit_params_mut(&join(prefix, "proj"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_input_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut attn = SelfAttention::<f64>::new(4, 2, &mut rng);
        let data: Vec<f64> = (0..4 * 2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(4, 2, 3, 3, data);
        let dy_data: Vec<f64> = (0..x.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dy = Tensor::from_vec(4, 2, 3, 3, dy_data);
        let (_, cache) = attn.forward(&x);
        let dx = attn.backward(&cache, &dy);
        let f = |t: &Tensor<f64>| -> f64 {
            attn.forward(t).0.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for idx in [0, 5, 17, 33, 70] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - dx.data[idx]).abs() < 1e-6, "idx {idx}: {fd} vs {}", dx.data[idx]);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let attn = SelfAttention::<f64>::new(4, 4, &mut rng);
        let data: Vec<f64> = (0..4 * 16).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, cache) = attn.forward(&Tensor::from_vec(4, 1, 4, 4, data));
        for row in cache.probs[0].chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}
