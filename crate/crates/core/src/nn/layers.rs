//! Convolution, dense, normalization and resampling layers with hand-written
//! backward passes.
//!
//! Every layer follows the same convention: `forward` is pure in the
//! parameters, and `backward` takes the forward input (plus any cache the
//! forward produced), accumulates parameter gradients into `Param::grad`, and
//! returns the gradient with respect to the input.

use rand::Rng;

use super::float::{gemm, gemm_ld, Float, Op};
use super::tensor::{join, Mat, Param, Tensor, VisitParams};

/// Upper bound on im2col buffer size, in elements.
const MAX_COLS: usize = 1 << 22;

fn uniform_init<F: Float, R: Rng + ?Sized>(len: usize, fan_in: usize, rng: &mut R) -> Vec<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len)
        .map(|_| F::of(rng.random_range(-bound..bound)))
        .collect()
}

#[inline]
pub fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

#[inline]
pub fn swish<F: Float>(x: F) -> F {
    x * sigmoid(x)
}

/// d swish / dx.
#[inline]
pub fn swish_grad<F: Float>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

pub fn swish_slice<F: Float>(x: &[F]) -> Vec<F> {
    x.iter().map(|&v| swish(v)).collect()
}

/// `dx = dy * swish'(x)` elementwise.
pub fn swish_backward<F: Float>(x: &[F], dy: &[F]) -> Vec<F> {
    x.iter().zip(dy).map(|(&v, &g)| g * swish_grad(v)).collect()
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Square 2D convolution with stride 1 and zero "same" padding. Supports
/// 1×1 and odd kernel sizes.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub cin: usize,
    pub cout: usize,
    pub ksize: usize,
    /// `cout × (cin · ksize²)`, row-major.
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Float> Conv2d<F> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, ksize: usize, rng: &mut R) -> Self {
        assert!(ksize % 2 == 1, "odd kernel sizes only");
        let fan_in = cin * ksize * ksize;
        Self {
            cin,
            cout,
            ksize,
            weight: Param::new(uniform_init(cout * fan_in, fan_in, rng)),
            bias: Param::zeros(cout),
        }
    }

    pub fn zeroed(cin: usize, cout: usize, ksize: usize) -> Self {
        Self {
            cin,
            cout,
            ksize,
            weight: Param::zeros(cout * cin * ksize * ksize),
            bias: Param::zeros(cout),
        }
    }

    fn kdim(&self) -> usize {
        self.cin * self.ksize * self.ksize
    }

    /// Samples per im2col chunk so the column buffer stays bounded.
    fn chunk(&self, x: &Tensor<F>) -> usize {
        (MAX_COLS / (self.kdim() * x.hw()).max(1)).clamp(1, x.n)
    }

    fn im2col(&self, x: &Tensor<F>, n0: usize, ns: usize, cols: &mut [F]) {
        let (h, w, hw) = (x.h, x.w, x.hw());
        let pad = (self.ksize / 2) as isize;
        let p = ns * hw;
        for ci in 0..self.cin {
            for ky in 0..self.ksize {
                for kx in 0..self.ksize {
                    let r = (ci * self.ksize + ky) * self.ksize + kx;
                    let row = &mut cols[r * p..(r + 1) * p];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for s in 0..ns {
                        let img = x.image(ci, n0 + s);
                        for y in 0..h {
                            let out = &mut row[s * hw + y * w..s * hw + (y + 1) * w];
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                                out.iter_mut().for_each(|v| *v = F::zero());
                                continue;
                            }
                            let src = &img[sy as usize * w..(sy as usize + 1) * w];
                            out[..x_lo].iter_mut().for_each(|v| *v = F::zero());
                            out[x_hi..].iter_mut().for_each(|v| *v = F::zero());
                            let s_lo = (x_lo as isize + dx) as usize;
                            let s_hi = (x_hi as isize + dx) as usize;
                            out[x_lo..x_hi].copy_from_slice(&src[s_lo..s_hi]);
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[F], n0: usize, ns: usize, dx: &mut Tensor<F>) {
        let (h, w, hw) = (dx.h, dx.w, dx.hw());
        let pad = (self.ksize / 2) as isize;
        let p = ns * hw;
        for ci in 0..self.cin {
            for ky in 0..self.ksize {
                for kx in 0..self.ksize {
                    let r = (ci * self.ksize + ky) * self.ksize + kx;
                    let row = &cols[r * p..(r + 1) * p];
                    let dy = ky as isize - pad;
                    let ddx = kx as isize - pad;
                    let x_lo = (-ddx).max(0) as usize;
                    let x_hi = (w as isize - ddx).min(w as isize).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for s in 0..ns {
                        let img = dx.image_mut(ci, n0 + s);
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let src = &row[s * hw + y * w + x_lo..s * hw + y * w + x_hi];
                            let base = sy as usize * w;
                            let s_lo = (x_lo as isize + ddx) as usize;
                            for (d, g) in img[base + s_lo..base + s_lo + src.len()]
                                .iter_mut()
                                .zip(src)
                            {
                                *d = *d + *g;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let mut y = Tensor::zeros(self.cout, x.n, x.h, x.w);
        let plane = x.plane();
        let kdim = self.kdim();
        if self.ksize == 1 {
            gemm(Op::N, Op::N, self.cout, kdim, plane, F::one(), &self.weight.value, &x.data, F::zero(), &mut y.data);
        } else {
            let hw = x.hw();
            let chunk = self.chunk(x);
            let mut cols = vec![F::zero(); kdim * chunk * hw];
            let mut n0 = 0;
            while n0 < x.n {
                let ns = chunk.min(x.n - n0);
                let p = ns * hw;
                self.im2col(x, n0, ns, &mut cols[..kdim * p]);
                gemm_ld(
                    Op::N,
                    Op::N,
                    self.cout,
                    kdim,
                    p,
                    F::one(),
                    &self.weight.value,
                    kdim,
                    &cols[..kdim * p],
                    p,
                    F::zero(),
                    &mut y.data[n0 * hw..],
                    plane,
                );
                n0 += ns;
            }
        }
        for (co, b) in self.bias.value.iter().enumerate() {
            if *b != F::zero() {
                y.data[co * plane..(co + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v = *v + *b);
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
        assert_eq!(dy.c, self.cout);
        let plane = x.plane();
        let kdim = self.kdim();
        for (co, g) in self.bias.grad.iter_mut().enumerate() {
            *g = *g + dy.data[co * plane..(co + 1) * plane].iter().copied().sum();
        }
        let mut dx = x.zeros_like();
        if self.ksize == 1 {
            gemm(Op::N, Op::T, self.cout, plane, kdim, F::one(), &dy.data, &x.data, F::one(), &mut self.weight.grad);
            gemm(Op::T, Op::N, kdim, self.cout, plane, F::one(), &self.weight.value, &dy.data, F::zero(), &mut dx.data);
            return dx;
        }
        let hw = x.hw();
        let chunk = self.chunk(x);
        let mut cols = vec![F::zero(); kdim * chunk * hw];
        let mut n0 = 0;
        while n0 < x.n {
            let ns = chunk.min(x.n - n0);
            let p = ns * hw;
            self.im2col(x, n0, ns, &mut cols[..kdim * p]);
            // dW += dY_chunk · colsᵀ
            gemm_ld(
                Op::N,
                Op::T,
                self.cout,
                p,
                kdim,
                F::one(),
                &dy.data[n0 * hw..],
                plane,
                &cols[..kdim * p],
                p,
                F::one(),
                &mut self.weight.grad,
                kdim,
            );
            // dcols = Wᵀ · dY_chunk
            gemm_ld(
                Op::T,
                Op::N,
                kdim,
                self.cout,
                p,
                F::one(),
                &self.weight.value,
                kdim,
                &dy.data[n0 * hw..],
                plane,
                F::zero(),
                &mut cols[..kdim * p],
                p,
            );
            self.col2im_add(&cols[..kdim * p], n0, ns, &mut dx);
            n0 += ns;
        }
        dx
    }
}

impl<F: Float> VisitParams<F> for Conv2d<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "kernel"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "kernel"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub din: usize,
    pub dout: usize,
    /// `dout × din`, row-major.
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Float> Linear<F> {
    pub fn new<R: Rng + ?Sized>(din: usize, dout: usize, rng: &mut R) -> Self {
        Self {
            din,
            dout,
            weight: Param::new(uniform_init(din * dout, din, rng)),
            bias: Param::zeros(dout),
        }
    }

    pub fn forward(&self, x: &Mat<F>) -> Mat<F> {
        assert_eq!(x.cols, self.din, "linear input width");
        let mut y = Mat::zeros(x.rows, self.dout);
        gemm(Op::N, Op::T, x.rows, self.din, self.dout, F::one(), &x.data, &self.weight.value, F::zero(), &mut y.data);
        for r in 0..x.rows {
            for (v, b) in y.data[r * self.dout..(r + 1) * self.dout]
                .iter_mut()
                .zip(&self.bias.value)
            {
                *v = *v + *b;
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Mat<F>, dy: &Mat<F>) -> Mat<F> {
        gemm(Op::T, Op::N, self.dout, x.rows, self.din, F::one(), &dy.data, &x.data, F::one(), &mut self.weight.grad);
        for r in 0..dy.rows {
            for (g, d) in self.bias.grad.iter_mut().zip(dy.row(r)) {
                *g = *g + *d;
            }
        }
        let mut dx = Mat::zeros(x.rows, self.din);
        gemm(Op::N, Op::N, x.rows, self.dout, self.din, F::one(), &dy.data, &self.weight.value, F::zero(), &mut dx.data);
        dx
    }
}

impl<F: Float> VisitParams<F> for Linear<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// `Linear → Swish → Linear`.
#[derive(Debug, Clone)]
pub struct Mlp<F> {
    pub hidden: Linear<F>,
    pub out: Linear<F>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<F> {
    input: Mat<F>,
    pre: Mat<F>,
}

impl<F: Float> Mlp<F> {
    pub fn new<R: Rng + ?Sized>(din: usize, width: usize, dout: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(din, width, rng),
            out: Linear::new(width, dout, rng),
        }
    }

    pub fn forward(&self, x: &Mat<F>) -> (Mat<F>, MlpCache<F>) {
        let pre = self.hidden.forward(x);
        let act = Mat::from_vec(pre.rows, pre.cols, swish_slice(&pre.data));
        let y = self.out.forward(&act);
        (
            y,
            MlpCache {
                input: x.clone(),
                pre,
            },
        )
    }

    pub fn backward(&mut self, cache: &MlpCache<F>, dy: &Mat<F>) -> Mat<F> {
        let act = Mat::from_vec(cache.pre.rows, cache.pre.cols, swish_slice(&cache.pre.data));
        let dact = self.out.backward(&act, dy);
        let dpre = Mat::from_vec(dact.rows, dact.cols, swish_backward(&cache.pre.data, &dact.data));
        self.hidden.backward(&cache.input, &dpre)
    }
}

impl<F: Float> VisitParams<F> for Mlp<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.hidden.visit_params(&join(prefix, "hidden"), f);
        self.out.visit_params(&join(prefix, "out"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.hidden.visit_params_mut(&join(prefix, "hidden"), f);
        self.out.visit_params_mut(&join(prefix, "out"), f);
    }
}

// ---------------------------------------------------------------------------
// Group normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GroupNorm<F> {
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
    pub gamma: Param<F>,
    pub beta: Param<F>,
}

/// Per `(sample, group)` mean and reciprocal std, indexed `n * groups + g`.
#[derive(Debug, Clone)]
pub struct GroupNormStats {
    mean: Vec<f64>,
    rstd: Vec<f64>,
}

impl<F: Float> GroupNorm<F> {
    pub fn new(groups: usize, channels: usize) -> Self {
        assert!(
            groups > 0 && channels.is_multiple_of(groups),
            "{channels} channels not divisible into {groups} groups"
        );
        Self {
            groups,
            channels,
            eps: 1e-6,
            gamma: Param::new(vec![F::one(); channels]),
            beta: Param::zeros(channels),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> (Tensor<F>, GroupNormStats) {
        assert_eq!(x.c, self.channels, "group norm channels");
        let cpg = self.channels / self.groups;
        let count = (cpg * x.hw()) as f64;
        let mut stats = GroupNormStats {
            mean: vec![0.0; x.n * self.groups],
            rstd: vec![0.0; x.n * self.groups],
        };
        let mut y = x.zeros_like();
        for n in 0..x.n {
            for g in 0..self.groups {
                let chans = g * cpg..(g + 1) * cpg;
                let mut sum = 0.0;
                for c in chans.clone() {
                    sum += x.image(c, n).iter().map(|v| v.f64()).sum::<f64>();
                }
                let mean = sum / count;
                let mut ss = 0.0;
                for c in chans.clone() {
                    ss += x
                        .image(c, n)
                        .iter()
                        .map(|v| {
                            let d = v.f64() - mean;
                            d * d
                        })
                        .sum::<f64>();
                }
                let rstd = 1.0 / (ss / count + self.eps).sqrt();
                stats.mean[n * self.groups + g] = mean;
                stats.rstd[n * self.groups + g] = rstd;
                for c in chans {
                    let scale = self.gamma.value[c].f64() * rstd;
                    let shift = self.beta.value[c].f64() - mean * scale;
                    let (sc, sh) = (F::of(scale), F::of(shift));
                    for (o, v) in y.image_mut(c, n).iter_mut().zip(x.image(c, n)) {
                        *o = *v * sc + sh;
                    }
                }
            }
        }
        (y, stats)
    }

    pub fn backward(&mut self, x: &Tensor<F>, stats: &GroupNormStats, dy: &Tensor<F>) -> Tensor<F> {
        let cpg = self.channels / self.groups;
        let count = (cpg * x.hw()) as f64;
        let mut dx = x.zeros_like();
        for n in 0..x.n {
            for g in 0..self.groups {
                let mean = stats.mean[n * self.groups + g];
                let rstd = stats.rstd[n * self.groups + g];
                let chans = g * cpg..(g + 1) * cpg;
                // sums of dxhat and dxhat * xhat over the group
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for c in chans.clone() {
                    let gamma = self.gamma.value[c].f64();
                    let mut dgamma = 0.0;
                    let mut dbeta = 0.0;
                    for (v, d) in x.image(c, n).iter().zip(dy.image(c, n)) {
                        let xhat = (v.f64() - mean) * rstd;
                        let d = d.f64();
                        dgamma += d * xhat;
                        dbeta += d;
                        s1 += d * gamma;
                        s2 += d * gamma * xhat;
                    }
                    self.gamma.grad[c] = self.gamma.grad[c] + F::of(dgamma);
                    self.beta.grad[c] = self.beta.grad[c] + F::of(dbeta);
                }
                let m1 = s1 / count;
                let m2 = s2 / count;
                for c in chans {
                    let gamma = self.gamma.value[c].f64();
                    let xs = x.image(c, n);
                    let ds = dy.image(c, n);
                    for ((o, v), d) in dx.image_mut(c, n).iter_mut().zip(xs).zip(ds) {
                        let xhat = (v.f64() - mean) * rstd;
                        *o = F::of(rstd * (d.f64() * gamma - m1 - xhat * m2));
                    }
                }
            }
        }
        dx
    }
}

impl<F: Float> VisitParams<F> for GroupNorm<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

// ---------------------------------------------------------------------------
// FIR resampling
// ---------------------------------------------------------------------------

/// Normalized binomial taps `[1, 3, 3, 1] / 8`.
const FIR_TAPS: [f64; 4] = [0.125, 0.375, 0.375, 0.125];

/// 2× FIR downsampling: blur with the separable binomial filter, then keep
/// every second sample. Zero padding of one sample on each side.
pub fn fir_down<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    assert!(x.h.is_multiple_of(2) && x.w.is_multiple_of(2), "fir_down needs even sizes");
    let (ho, wo) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.c, x.n, ho, wo);
    let taps: [F; 4] = FIR_TAPS.map(F::of);
    for c in 0..x.c {
        for n in 0..x.n {
            let src = x.image(c, n);
            let dst = y.image_mut(c, n);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = F::zero();
                    for (i, ti) in taps.iter().enumerate() {
                        let sy = (2 * oy + i) as isize - 1;
                        if sy < 0 || sy >= x.h as isize {
                            continue;
                        }
                        let row = &src[sy as usize * x.w..(sy as usize + 1) * x.w];
                        for (j, tj) in taps.iter().enumerate() {
                            let sx = (2 * ox + j) as isize - 1;
                            if sx >= 0 && sx < x.w as isize {
                                acc = acc + *ti * *tj * row[sx as usize];
                            }
                        }
                    }
                    dst[oy * wo + ox] = acc;
                }
            }
        }
    }
    y
}

/// Adjoint of [`fir_down`].
pub fn fir_down_backward<F: Float>(dy: &Tensor<F>) -> Tensor<F> {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Tensor::zeros(dy.c, dy.n, h, w);
    let taps: [F; 4] = FIR_TAPS.map(F::of);
    for c in 0..dy.c {
        for n in 0..dy.n {
            let g = dy.image(c, n).to_vec();
            let dst = dx.image_mut(c, n);
            for oy in 0..dy.h {
                for ox in 0..dy.w {
                    let gv = g[oy * dy.w + ox];
                    for (i, ti) in taps.iter().enumerate() {
                        let sy = (2 * oy + i) as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for (j, tj) in taps.iter().enumerate() {
                            let sx = (2 * ox + j) as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                let d = &mut dst[sy as usize * w + sx as usize];
                                *d = *d + *ti * *tj * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 2× FIR upsampling: zero insertion followed by the binomial filter with
/// gain 4, so constants are reproduced away from the border.
pub fn fir_up<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    let (ho, wo) = (x.h * 2, x.w * 2);
    let mut y = Tensor::zeros(x.c, x.n, ho, wo);
    let taps: [F; 4] = FIR_TAPS.map(|t| F::of(2.0 * t));
    for c in 0..x.c {
        for n in 0..x.n {
            let src = x.image(c, n);
            let dst = y.image_mut(c, n);
            // out[Y] = sum_i g[i] u[Y + i - 2], u nonzero only at even indices.
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = F::zero();
                    for (i, ti) in taps.iter().enumerate() {
                        let uy = oy as isize + i as isize - 2;
                        if uy < 0 || uy % 2 != 0 || uy >= ho as isize {
                            continue;
                        }
                        let row = &src[(uy as usize / 2) * x.w..(uy as usize / 2 + 1) * x.w];
                        for (j, tj) in taps.iter().enumerate() {
                            let ux = ox as isize + j as isize - 2;
                            if ux >= 0 && ux % 2 == 0 && ux < wo as isize {
                                acc = acc + *ti * *tj * row[ux as usize / 2];
                            }
                        }
                    }
                    dst[oy * wo + ox] = acc;
                }
            }
        }
    }
    y
}

/// Adjoint of [`fir_up`].
pub fn fir_up_backward<F: Float>(dy: &Tensor<F>) -> Tensor<F> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.c, dy.n, h, w);
    let taps: [F; 4] = FIR_TAPS.map(|t| F::of(2.0 * t));
    for c in 0..dy.c {
        for n in 0..dy.n {
            let g = dy.image(c, n);
            let dst = dx.image_mut(c, n);
            for y in 0..h {
                for x in 0..w {
                    // u[2y] contributes to out[2y - i + 2] with weight g[i].
                    let mut acc = F::zero();
                    for (i, ti) in taps.iter().enumerate() {
                        let oy = 2 * y as isize - i as isize + 2;
                        if oy < 0 || oy >= dy.h as isize {
                            continue;
                        }
                        for (j, tj) in taps.iter().enumerate() {
                            let ox = 2 * x as isize - j as isize + 2;
                            if ox >= 0 && ox < dy.w as isize {
                                acc = acc + *ti * *tj * g[oy as usize * dy.w + ox as usize];
                            }
                        }
                    }
                    dst[y * w + x] = acc;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(c: usize, n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data = (0..c * n * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(c, n, h, w, data)
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv3x3_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::<f64>::new(3, 2, 3, &mut rng);
        let x = rand_tensor(3, 2, 5, 4, &mut rng);
        let y = conv.forward(&x);
        for co in 0..2 {
            for n in 0..2 {
                for oy in 0..5 {
                    for ox in 0..4 {
                        let mut acc = conv.bias.value[co];
                        for ci in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = oy as isize + ky as isize - 1;
                                    let sx = ox as isize + kx as isize - 1;
                                    if !(0..5).contains(&sy) || !(0..4).contains(&sx) {
                                        continue;
                                    }
                                    let wv = conv.weight.value[((co * 3 + ci) * 3 + ky) * 3 + kx];
                                    acc += wv * x.image(ci, n)[sy as usize * 4 + sx as usize];
                                }
                            }
                        }
                        assert!((y.image(co, n)[oy * 4 + ox] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv_lin(x), dy> == <x, dx> for the bias-free linear map.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in [1, 3] {
            let mut conv = Conv2d::<f64>::new(4, 3, k, &mut rng);
            let x = rand_tensor(4, 3, 6, 6, &mut rng);
            let dy = rand_tensor(3, 3, 6, 6, &mut rng);
            let y = conv.forward(&x);
            let dx = conv.backward(&x, &dy);
            assert!((dot(&y.data, &dy.data) - dot(&x.data, &dx.data)).abs() < 1e-10);
            // weight gradient: <y, dy> is linear in W, so <W, dW> reproduces it.
            assert!((dot(&y.data, &dy.data) - dot(&conv.weight.value, &conv.weight.grad)).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_chunking_does_not_change_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::<f32>::new(2, 2, 3, &mut rng);
        let data: Vec<f32> = (0..2 * 5 * 8 * 8).map(|i| ((i * 37) % 11) as f32 - 5.0).collect();
        let x = Tensor::from_vec(2, 5, 8, 8, data);
        let full = conv.forward(&x);
        for n in 0..5 {
            let single: Vec<f32> = (0..2).flat_map(|c| x.image(c, n).to_vec()).collect();
            let xs = Tensor::from_vec(2, 1, 8, 8, single);
            let ys = conv.forward(&xs);
            for c in 0..2 {
                assert_eq!(ys.image(c, 0), full.image(c, n));
            }
        }
    }

    #[test]
    fn fir_resampling_adjoints_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(2, 2, 8, 8, &mut rng);
        let dy = rand_tensor(2, 2, 4, 4, &mut rng);
        let lhs = dot(&fir_down(&x).data, &dy.data);
        let rhs = dot(&x.data, &fir_down_backward(&dy).data);
        assert!((lhs - rhs).abs() < 1e-12);

        let xs = rand_tensor(2, 2, 4, 4, &mut rng);
        let dys = rand_tensor(2, 2, 8, 8, &mut rng);
        let lhs = dot(&fir_up(&xs).data, &dys.data);
        let rhs = dot(&xs.data, &fir_up_backward(&dys).data);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn fir_preserves_constants_in_the_interior() {
        let x = Tensor::<f64>::from_vec(1, 1, 8, 8, vec![2.5; 64]);
        let d = fir_down(&x);
        for y in 1..3 {
            for xx in 1..3 {
                assert!((d.image(0, 0)[y * 4 + xx] - 2.5).abs() < 1e-12);
            }
        }
        let u = fir_up(&x);
        for y in 1..15 {
            for xx in 1..15 {
                assert!((u.image(0, 0)[y * 16 + xx] - 2.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn group_norm_normalizes_and_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut gn = GroupNorm::<f64>::new(2, 4);
        for v in gn.gamma.value.iter_mut() {
            *v = rng.random_range(0.5..1.5);
        }
        for v in gn.beta.value.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let x = rand_tensor(4, 2, 3, 3, &mut rng);
        let dy = rand_tensor(4, 2, 3, 3, &mut rng);
        let (_, stats) = gn.forward(&x);
        let dx = gn.backward(&x, &stats, &dy);
        let h = 1e-6;
        for idx in [0, 7, 20, 41, 71] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fp = dot(&gn.forward(&xp).0.data, &dy.data);
            let fm = dot(&gn.forward(&xm).0.data, &dy.data);
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - dx.data[idx]).abs() < 1e-6, "{fd} vs {}", dx.data[idx]);
        }

        let plain = GroupNorm::<f64>::new(2, 4);
        let (y, _) = plain.forward(&x);
        let group: Vec<f64> = (0..2).flat_map(|c| y.image(c, 1).to_vec()).collect();
        let mean = group.iter().sum::<f64>() / group.len() as f64;
        let var = group.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / group.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn swish_grad_matches_fd() {
        for &x in &[-3.0_f64, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (swish(x + h) - swish(x - h)) / (2.0 * h);
            assert!((fd - swish_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn mlp_with_zero_weights_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut mlp = Mlp::<f64>::new(3, 10, 16, &mut rng);
        mlp.visit_params_mut("", &mut |_, p| p.value.iter_mut().for_each(|v| *v = 0.0));
        let (y, _) = mlp.forward(&Mat::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.1, 9.0]));
        assert_eq!(y.data, vec![0.0; 32]);
    }
}
