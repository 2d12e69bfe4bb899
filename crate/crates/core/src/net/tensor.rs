//! Dense NCHW activation tensor.

use super::scalar::Scalar;

/// Batch of feature maps, laid out `[n][c][h][w]` contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor { n, c, h, w, data: vec![S::zero(); n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor payload does not match shape");
        Tensor { n, c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Contiguous `[c][h][w]` view of sample `i`.
    pub fn sample(&self, i: usize) -> &[S] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [S] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> S {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut S {
        &mut self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    /// Single-sample tensor borrowing nothing: copies sample `i` out.
    pub fn take_sample(&self, i: usize) -> Tensor<S> {
        Tensor::from_vec(1, self.c, self.h, self.w, self.sample(i).to_vec())
    }

    /// Elementwise `self += other`; shapes must match.
    pub fn add_assign_from(&mut self, other: &Tensor<S>) {
        assert_eq!(
            (self.n, self.c, self.h, self.w),
            (other.n, other.c, other.h, other.w),
            "tensor shape mismatch in add"
        );
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }
}
