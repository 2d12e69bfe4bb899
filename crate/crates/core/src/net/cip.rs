//! Central intensity pooling: per-channel mean of a small window centered on
//! the feature map, fed to the classifier head alongside the pooled deep
//! features so the head always sees the raw intensity around the voxel under
//! test.

use super::scalar::Scalar;
use super::tensor::Tensor;
use super::NetError;

/// Mean of the k x k window centered on an odd-sided map, one value per
/// `(sample, channel)`. This is the public op; it insists on a well-defined
/// center, so even-sided inputs and even kernels are rejected.
pub fn central_pool<S: Scalar>(x: &Tensor<S>, k: usize) -> Result<Tensor<S>, NetError> {
    if x.h % 2 == 0 || x.w % 2 == 0 {
        return Err(NetError::InvalidArgument(format!(
            "central pooling needs odd-sided input, got {}x{}",
            x.h, x.w
        )));
    }
    if k % 2 == 0 || k == 0 {
        return Err(NetError::InvalidArgument(format!("central pooling kernel must be odd, got {k}")));
    }
    if k > x.h || k > x.w {
        return Err(NetError::InvalidArgument(format!(
            "central pooling kernel {k} exceeds input {}x{}",
            x.h, x.w
        )));
    }
    let mut y = Tensor::zeros(x.n, x.c, 1, 1);
    for s in 0..x.n {
        for c in 0..x.c {
            y.data[s * x.c + c] = window_mean(x, s, c, k);
        }
    }
    Ok(y)
}

/// Window anchor: the floor-center cell `((h-1)/2, (w-1)/2)`. Equals the true
/// center for odd sides; even sides anchor on the upper-left of the middle.
fn window_bounds(h: usize, w: usize, k: usize) -> (usize, usize, usize, usize) {
    let half = (k - 1) / 2;
    let ay = (h - 1) / 2;
    let ax = (w - 1) / 2;
    (ay - half, ax - half, k, k)
}

fn window_mean<S: Scalar>(x: &Tensor<S>, s: usize, c: usize, k: usize) -> S {
    let (y0, x0, kh, kw) = window_bounds(x.h, x.w, k);
    let mut sum = S::zero();
    for dy in 0..kh {
        for dx in 0..kw {
            sum += x.at(s, c, y0 + dy, x0 + dx);
        }
    }
    sum / S::from_f64((k * k) as f64)
}

/// Returns whether a k x k centered window fits a `size`-sided map.
pub fn kernel_fits(size: usize, k: usize) -> bool {
    if k == 0 || k % 2 == 0 || size == 0 {
        return false;
    }
    let half = (k - 1) / 2;
    let anchor = (size - 1) / 2;
    anchor >= half && anchor + half < size
}

/// In-network tap: stacks one centered-window mean per configured kernel and
/// channel. Feature order is kernel-major: all channels for kernels[0], then
/// all channels for kernels[1], and so on.
#[derive(Debug, Clone)]
pub struct CipTap {
    pub kernels: Vec<usize>,
}

impl CipTap {
    pub fn new(kernels: Vec<usize>) -> Self {
        CipTap { kernels }
    }

    pub fn feature_len(&self, channels: usize) -> usize {
        channels * self.kernels.len()
    }

    /// `n x feature_len(x.c)` rows.
    pub fn forward<S: Scalar>(&self, x: &Tensor<S>) -> Vec<S> {
        let feat = self.feature_len(x.c);
        let mut out = vec![S::zero(); x.n * feat];
        for s in 0..x.n {
            for (ki, &k) in self.kernels.iter().enumerate() {
                debug_assert!(kernel_fits(x.h.min(x.w), k), "kernel validated at config time");
                for c in 0..x.c {
                    out[s * feat + ki * x.c + c] = window_mean(x, s, c, k);
                }
            }
        }
        out
    }

    /// Gradient of the features w.r.t. the tapped map: each window cell gets
    /// `1/k^2` of its feature's gradient.
    pub fn backward<S: Scalar>(&self, dfeat: &[S], n: usize, c: usize, h: usize, w: usize) -> Tensor<S> {
        let feat = self.feature_len(c);
        assert_eq!(dfeat.len(), n * feat, "cip grad shape");
        let mut dx = Tensor::zeros(n, c, h, w);
        for s in 0..n {
            for (ki, &k) in self.kernels.iter().enumerate() {
                let (y0, x0, kh, kw) = window_bounds(h, w, k);
                let inv = S::one() / S::from_f64((k * k) as f64);
                for ch in 0..c {
                    let g = dfeat[s * feat + ki * c + ch] * inv;
                    for dy in 0..kh {
                        for dxx in 0..kw {
                            *dx.at_mut(s, ch, y0 + dy, x0 + dxx) += g;
                        }
                    }
                }
            }
        }
        dx
    }
}
