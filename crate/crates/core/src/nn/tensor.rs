use super::float::Float;

/// Activation tensor in channel-major `C × N × H × W` layout.
///
/// Keeping channels outermost lets a convolution over the whole batch be a
/// single GEMM whose output lands directly in this layout, and makes
/// channel concatenation a plain append.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Float> Tensor<F> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![F::zero(); c * n * h * w],
        }
    }

    pub fn from_vec(c: usize, n: usize, h: usize, w: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), c * n * h * w, "tensor data length");
        Self { c, n, h, w, data }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.c, self.n, self.h, self.w)
    }

    #[inline]
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Length of one channel plane across the batch, `N·H·W`.
    #[inline]
    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.c, self.n, self.h, self.w) == (other.c, other.n, other.h, other.w)
    }

    /// Contiguous `H·W` block for channel `c` of sample `n`.
    #[inline]
    pub fn image(&self, c: usize, n: usize) -> &[F] {
        let hw = self.hw();
        let off = (c * self.n + n) * hw;
        &self.data[off..off + hw]
    }

    #[inline]
    pub fn image_mut(&mut self, c: usize, n: usize) -> &mut [F] {
        let hw = self.hw();
        let off = (c * self.n + n) * hw;
        &mut self.data[off..off + hw]
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    /// Channel concatenation `[self; other]`.
    pub fn concat_channels(&self, other: &Self) -> Self {
        assert_eq!((self.n, self.h, self.w), (other.n, other.h, other.w));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Self {
            c: self.c + other.c,
            n: self.n,
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// Inverse of [`concat_channels`](Self::concat_channels): splits after `c0` channels.
    pub fn split_channels(&self, c0: usize) -> (Self, Self) {
        assert!(c0 <= self.c);
        let cut = c0 * self.plane();
        (
            Self::from_vec(c0, self.n, self.h, self.w, self.data[..cut].to_vec()),
            Self::from_vec(self.c - c0, self.n, self.h, self.w, self.data[cut..].to_vec()),
        )
    }
}

/// Row-major matrix, used for per-sample vectors (`rows` = batch).
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Float> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }
}

/// A learnable parameter block with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: Vec<F>,
    pub grad: Vec<F>,
}

impl<F: Float> Param<F> {
    pub fn new(value: Vec<F>) -> Self {
        let grad = vec![F::zero(); value.len()];
        Self { value, grad }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![F::zero(); len])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }
}

/// Visitor over named parameter blocks, in a fixed deterministic order.
pub trait VisitParams<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
