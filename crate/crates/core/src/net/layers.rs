//! Primitive trainable layers.
//!
//! Every layer follows the same protocol: `forward(x, train)` returns the
//! output and, when `train` is set, keeps whatever it needs for one matching
//! `backward(dy)` call. Parameter gradients accumulate across backward calls
//! until `zero_grad`. Convolutions run one GEMM per sample, so an activation
//! for a given input never depends on what else shares the batch.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::scalar::Scalar;
use super::tensor::Tensor;

fn he_draws<S: Scalar>(rng: &mut ChaCha8Rng, count: usize, fan_in: usize) -> Vec<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..count)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            S::from_f64(z * std)
        })
        .collect()
}

/// 2-D convolution, stride 1, square kernel with symmetric zero padding.
///
/// Weight layout is `[out_c][in_c][ky][kx]`, which is exactly the row-major
/// `out_c x (in_c*k*k)` matrix the im2col product needs. Convolutions that
/// feed a batch norm are built without a bias.
pub struct Conv2d<S: Scalar> {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub pad: usize,
    pub weight: Vec<S>,
    pub bias: Option<Vec<S>>,
    pub dweight: Vec<S>,
    pub dbias: Option<Vec<S>>,
    cache: Option<Tensor<S>>,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(in_c: usize, out_c: usize, k: usize, pad: usize, with_bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_c * k * k;
        Conv2d {
            in_c,
            out_c,
            k,
            pad,
            weight: he_draws(rng, out_c * fan_in, fan_in),
            bias: with_bias.then(|| vec![S::zero(); out_c]),
            dweight: vec![S::zero(); out_c * fan_in],
            dbias: with_bias.then(|| vec![S::zero(); out_c]),
            cache: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h + 2 * self.pad - self.k + 1, w + 2 * self.pad - self.k + 1)
    }

    pub fn kernel_weight_count(&self) -> usize {
        self.weight.len()
    }

    /// Unrolls one `[c][h][w]` sample into the `(in_c*k*k) x (oh*ow)` patch
    /// matrix. Out-of-bounds taps read as zero.
    fn im2col(&self, x: &[S], h: usize, w: usize, oh: usize, ow: usize, col: &mut [S]) {
        let k = self.k;
        let pad = self.pad as isize;
        let plane = oh * ow;
        for c in 0..self.in_c {
            let xc = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((c * k + ky) * k + kx) * plane..][..plane];
                    for oy in 0..oh {
                        let sy = oy as isize + ky as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            for v in &mut row[oy * ow..(oy + 1) * ow] {
                                *v = S::zero();
                            }
                            continue;
                        }
                        let src = &xc[sy as usize * w..][..w];
                        for ox in 0..ow {
                            let sx = ox as isize + kx as isize - pad;
                            row[oy * ow + ox] = if sx < 0 || sx >= w as isize {
                                S::zero()
                            } else {
                                src[sx as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor<S>, train: bool) -> Tensor<S> {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_hw(x.h, x.w);
        let plane = oh * ow;
        let ick2 = self.in_c * self.k * self.k;
        let mut y = Tensor::zeros(x.n, self.out_c, oh, ow);
        let mut col = vec![S::zero(); ick2 * plane];
        for s in 0..x.n {
            let xs = x.sample(s);
            let ys = y.sample_mut(s);
            if self.k == 1 && self.pad == 0 {
                S::gemm(self.out_c, ick2, plane, S::one(), &self.weight, xs, S::zero(), ys);
            } else {
                self.im2col(xs, x.h, x.w, oh, ow, &mut col);
                S::gemm(self.out_c, ick2, plane, S::one(), &self.weight, &col, S::zero(), ys);
            }
            if let Some(b) = &self.bias {
                for (o, &bo) in b.iter().enumerate() {
                    for v in &mut ys[o * plane..(o + 1) * plane] {
                        *v += bo;
                    }
                }
            }
        }
        self.cache = train.then(|| x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<S>) -> Tensor<S> {
        let x = self.cache.take().expect("conv backward without train forward");
        let (oh, ow) = self.out_hw(x.h, x.w);
        assert_eq!((dy.n, dy.c, dy.h, dy.w), (x.n, self.out_c, oh, ow));
        let plane = oh * ow;
        let ick2 = self.in_c * self.k * self.k;
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut col = vec![S::zero(); ick2 * plane];
        let mut dcol = vec![S::zero(); ick2 * plane];
        for s in 0..x.n {
            let xs = x.sample(s);
            let dys = dy.sample(s);
            if self.k == 1 && self.pad == 0 {
                S::gemm_nt(self.out_c, plane, ick2, S::one(), dys, xs, S::one(), &mut self.dweight);
                S::gemm_tn(ick2, self.out_c, plane, S::one(), &self.weight, dys, S::zero(), dx.sample_mut(s));
            } else {
                self.im2col(xs, x.h, x.w, oh, ow, &mut col);
                S::gemm_nt(self.out_c, plane, ick2, S::one(), dys, &col, S::one(), &mut self.dweight);
                S::gemm_tn(ick2, self.out_c, plane, S::one(), &self.weight, dys, S::zero(), &mut dcol);
                self.col2im(&dcol, dx.sample_mut(s), x.h, x.w, oh, ow);
            }
            if let Some(db) = &mut self.dbias {
                for (o, dbo) in db.iter_mut().enumerate() {
                    for &v in &dys[o * plane..(o + 1) * plane] {
                        *dbo += v;
                    }
                }
            }
        }
        dx
    }

    /// Scatters a patch-matrix gradient back onto the input plane.
    fn col2im(&self, dcol: &[S], dx: &mut [S], h: usize, w: usize, oh: usize, ow: usize) {
        let k = self.k;
        let pad = self.pad as isize;
        let plane = oh * ow;
        for c in 0..self.in_c {
            let dxc = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &dcol[((c * k + ky) * k + kx) * plane..][..plane];
                    for oy in 0..oh {
                        let sy = oy as isize + ky as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst = &mut dxc[sy as usize * w..][..w];
                        for ox in 0..ow {
                            let sx = ox as isize + kx as isize - pad;
                            if sx >= 0 && sx < w as isize {
                                dst[sx as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.dweight.iter_mut().for_each(|v| *v = S::zero());
        if let Some(db) = &mut self.dbias {
            db.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [S], &mut [S])) {
        f(&mut self.weight, &mut self.dweight);
        if let (Some(b), Some(db)) = (&mut self.bias, &mut self.dbias) {
            f(b, db);
        }
    }
}

/// Per-channel batch normalization over `(n, h, w)`.
///
/// Training mode normalizes with biased batch statistics and folds them into
/// the running estimates with retain factor 0.9; eval mode applies the running
/// estimates elementwise, so eval outputs are independent of batch company.
pub struct BatchNorm2d<S: Scalar> {
    pub c: usize,
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
    pub dgamma: Vec<S>,
    pub dbeta: Vec<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub eps: f64,
    pub retain: f64,
    cache: Option<BnCache<S>>,
}

struct BnCache<S> {
    xhat: Vec<S>,
    inv_std: Vec<S>,
    n: usize,
    h: usize,
    w: usize,
}

impl<S: Scalar> BatchNorm2d<S> {
    pub fn new(c: usize) -> Self {
        BatchNorm2d {
            c,
            gamma: vec![S::one(); c],
            beta: vec![S::zero(); c],
            dgamma: vec![S::zero(); c],
            dbeta: vec![S::zero(); c],
            running_mean: vec![S::zero(); c],
            running_var: vec![S::one(); c],
            eps: 1e-5,
            retain: 0.9,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<S>, train: bool) -> Tensor<S> {
        assert_eq!(x.c, self.c, "batch norm channels");
        let plane = x.plane();
        let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
        if !train {
            for s in 0..x.n {
                for c in 0..x.c {
                    let scale = self.gamma[c] / (self.running_var[c] + S::from_f64(self.eps)).sqrt();
                    let shift = self.beta[c] - scale * self.running_mean[c];
                    let base = (s * x.c + c) * plane;
                    for i in 0..plane {
                        y.data[base + i] = x.data[base + i] * scale + shift;
                    }
                }
            }
            self.cache = None;
            return y;
        }

        let count = S::from_f64((x.n * plane) as f64);
        let mut xhat = vec![S::zero(); x.data.len()];
        let mut inv_std = vec![S::zero(); x.c];
        let retain = S::from_f64(self.retain);
        let blend = S::one() - retain;
        for c in 0..x.c {
            let mut sum = S::zero();
            for s in 0..x.n {
                let base = (s * x.c + c) * plane;
                for i in 0..plane {
                    sum += x.data[base + i];
                }
            }
            let mean = sum / count;
            let mut var_sum = S::zero();
            for s in 0..x.n {
                let base = (s * x.c + c) * plane;
                for i in 0..plane {
                    let d = x.data[base + i] - mean;
                    var_sum += d * d;
                }
            }
            let var = var_sum / count;
            let istd = S::one() / (var + S::from_f64(self.eps)).sqrt();
            inv_std[c] = istd;
            self.running_mean[c] = retain * self.running_mean[c] + blend * mean;
            self.running_var[c] = retain * self.running_var[c] + blend * var;
            for s in 0..x.n {
                let base = (s * x.c + c) * plane;
                for i in 0..plane {
                    let xh = (x.data[base + i] - mean) * istd;
                    xhat[base + i] = xh;
                    y.data[base + i] = self.gamma[c] * xh + self.beta[c];
                }
            }
        }
        self.cache = Some(BnCache { xhat, inv_std, n: x.n, h: x.h, w: x.w });
        y
    }

    pub fn backward(&mut self, dy: &Tensor<S>) -> Tensor<S> {
        let cache = self.cache.take().expect("batch norm backward without train forward");
        assert_eq!((dy.n, dy.c, dy.h, dy.w), (cache.n, self.c, cache.h, cache.w));
        let plane = cache.h * cache.w;
        let count = S::from_f64((cache.n * plane) as f64);
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
        for c in 0..self.c {
            let mut sum_dy = S::zero();
            let mut sum_dy_xhat = S::zero();
            for s in 0..dy.n {
                let base = (s * self.c + c) * plane;
                for i in 0..plane {
                    let d = dy.data[base + i];
                    sum_dy += d;
                    sum_dy_xhat += d * cache.xhat[base + i];
                }
            }
            self.dgamma[c] += sum_dy_xhat;
            self.dbeta[c] += sum_dy;
            let scale = self.gamma[c] * cache.inv_std[c] / count;
            for s in 0..dy.n {
                let base = (s * self.c + c) * plane;
                for i in 0..plane {
                    let d = dy.data[base + i];
                    dx.data[base + i] =
                        scale * (count * d - sum_dy - cache.xhat[base + i] * sum_dy_xhat);
                }
            }
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.dgamma.iter_mut().for_each(|v| *v = S::zero());
        self.dbeta.iter_mut().for_each(|v| *v = S::zero());
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [S], &mut [S])) {
        f(&mut self.gamma, &mut self.dgamma);
        f(&mut self.beta, &mut self.dbeta);
    }

    pub fn for_each_state(&mut self, f: &mut dyn FnMut(&mut [S])) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Per-channel parametric ReLU, slope initialized to 0.25.
pub struct PRelu<S: Scalar> {
    pub c: usize,
    pub alpha: Vec<S>,
    pub dalpha: Vec<S>,
    cache: Option<Tensor<S>>,
}

impl<S: Scalar> PRelu<S> {
    pub fn new(c: usize) -> Self {
        PRelu {
            c,
            alpha: vec![S::from_f64(0.25); c],
            dalpha: vec![S::zero(); c],
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<S>, train: bool) -> Tensor<S> {
        assert_eq!(x.c, self.c, "prelu channels");
        let plane = x.plane();
        let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
        for s in 0..x.n {
            for c in 0..x.c {
                let a = self.alpha[c];
                let base = (s * x.c + c) * plane;
                for i in 0..plane {
                    let v = x.data[base + i];
                    y.data[base + i] = if v > S::zero() { v } else { a * v };
                }
            }
        }
        self.cache = train.then(|| x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<S>) -> Tensor<S> {
        let x = self.cache.take().expect("prelu backward without train forward");
        assert_eq!((dy.n, dy.c, dy.h, dy.w), (x.n, x.c, x.h, x.w));
        let plane = x.plane();
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        for s in 0..x.n {
            for c in 0..x.c {
                let a = self.alpha[c];
                let mut da = S::zero();
                let base = (s * x.c + c) * plane;
                for i in 0..plane {
                    let v = x.data[base + i];
                    let d = dy.data[base + i];
                    if v > S::zero() {
                        dx.data[base + i] = d;
                    } else {
                        dx.data[base + i] = a * d;
                        da += d * v;
                    }
                }
                self.dalpha[c] += da;
            }
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.dalpha.iter_mut().for_each(|v| *v = S::zero());
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [S], &mut [S])) {
        f(&mut self.alpha, &mut self.dalpha);
    }
}

/// 2x2 max pooling with stride 2; a trailing odd row/column is dropped.
/// Ties take the first maximum in row-major window order.
pub struct MaxPool2 {
    cache: Option<PoolCache>,
}

struct PoolCache {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    argmax: Vec<usize>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        MaxPool2 { cache: None }
    }

    pub fn out_hw(h: usize, w: usize) -> (usize, usize) {
        (h / 2, w / 2)
    }

    pub fn forward<S: Scalar>(&mut self, x: &Tensor<S>, train: bool) -> Tensor<S> {
        let (oh, ow) = Self::out_hw(x.h, x.w);
        assert!(oh > 0 && ow > 0, "pool input too small");
        let mut y = Tensor::zeros(x.n, x.c, oh, ow);
        let mut argmax = vec![0usize; y.data.len()];
        for s in 0..x.n {
            for c in 0..x.c {
                let xbase = (s * x.c + c) * x.h * x.w;
                let ybase = (s * x.c + c) * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best_idx = xbase + (2 * oy) * x.w + 2 * ox;
                        let mut best = x.data[best_idx];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = xbase + (2 * oy + dy) * x.w + 2 * ox + dx;
                            if x.data[idx] > best {
                                best = x.data[idx];
                                best_idx = idx;
                            }
                        }
                        y.data[ybase + oy * ow + ox] = best;
                        argmax[ybase + oy * ow + ox] = best_idx;
                    }
                }
            }
        }
        self.cache = train.then_some(PoolCache { n: x.n, c: x.c, h: x.h, w: x.w, argmax });
        y
    }

    pub fn backward<S: Scalar>(&mut self, dy: &Tensor<S>) -> Tensor<S> {
        let cache = self.cache.take().expect("pool backward without train forward");
        let mut dx = Tensor::zeros(cache.n, cache.c, cache.h, cache.w);
        for (i, &src) in cache.argmax.iter().enumerate() {
            dx.data[src] += dy.data[i];
        }
        dx
    }
}

/// Mean over each channel plane; output is `(n, c, 1, 1)`.
pub struct GlobalAvgPool {
    cache: Option<(usize, usize, usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool { cache: None }
    }

    pub fn forward<S: Scalar>(&mut self, x: &Tensor<S>, train: bool) -> Tensor<S> {
        let plane = x.plane();
        let inv = S::one() / S::from_f64(plane as f64);
        let mut y = Tensor::zeros(x.n, x.c, 1, 1);
        for s in 0..x.n {
            for c in 0..x.c {
                let base = (s * x.c + c) * plane;
                let mut sum = S::zero();
                for i in 0..plane {
                    sum += x.data[base + i];
                }
                y.data[s * x.c + c] = sum * inv;
            }
        }
        self.cache = train.then_some((x.n, x.c, x.h, x.w));
        y
    }

    pub fn backward<S: Scalar>(&mut self, dy: &Tensor<S>) -> Tensor<S> {
        let (n, c, h, w) = self.cache.take().expect("gap backward without train forward");
        let inv = S::one() / S::from_f64((h * w) as f64);
        let mut dx = Tensor::zeros(n, c, h, w);
        for s in 0..n {
            for ch in 0..c {
                let g = dy.data[s * c + ch] * inv;
                let base = (s * c + ch) * h * w;
                for i in 0..h * w {
                    dx.data[base + i] = g;
                }
            }
        }
        dx
    }
}

/// Fully connected layer on row vectors. Sums are accumulated sequentially
/// per output element, so results do not depend on batch composition.
pub struct Linear<S: Scalar> {
    pub in_f: usize,
    pub out_f: usize,
    pub weight: Vec<S>,
    pub bias: Vec<S>,
    pub dweight: Vec<S>,
    pub dbias: Vec<S>,
    cache: Option<(Vec<S>, usize)>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(in_f: usize, out_f: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            in_f,
            out_f,
            weight: he_draws(rng, out_f * in_f, in_f),
            bias: vec![S::zero(); out_f],
            dweight: vec![S::zero(); out_f * in_f],
            dbias: vec![S::zero(); out_f],
            cache: None,
        }
    }

    /// `x` is `n x in_f` row-major; returns `n x out_f`.
    pub fn forward(&mut self, x: &[S], n: usize, train: bool) -> Vec<S> {
        assert_eq!(x.len(), n * self.in_f, "linear input shape");
        let mut y = vec![S::zero(); n * self.out_f];
        for s in 0..n {
            let xs = &x[s * self.in_f..(s + 1) * self.in_f];
            for o in 0..self.out_f {
                let wo = &self.weight[o * self.in_f..(o + 1) * self.in_f];
                let mut acc = self.bias[o];
                for (wi, xi) in wo.iter().zip(xs.iter()) {
                    acc += *wi * *xi;
                }
                y[s * self.out_f + o] = acc;
            }
        }
        self.cache = train.then(|| (x.to_vec(), n));
        y
    }

    pub fn backward(&mut self, dy: &[S]) -> Vec<S> {
        let (x, n) = self.cache.take().expect("linear backward without train forward");
        assert_eq!(dy.len(), n * self.out_f, "linear grad shape");
        let mut dx = vec![S::zero(); n * self.in_f];
        for s in 0..n {
            let xs = &x[s * self.in_f..(s + 1) * self.in_f];
            let dys = &dy[s * self.out_f..(s + 1) * self.out_f];
            for o in 0..self.out_f {
                let g = dys[o];
                self.dbias[o] += g;
                let wo = &self.weight[o * self.in_f..(o + 1) * self.in_f];
                let dwo = &mut self.dweight[o * self.in_f..(o + 1) * self.in_f];
                for i in 0..self.in_f {
                    dwo[i] += g * xs[i];
                    dx[s * self.in_f + i] += g * wo[i];
                }
            }
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.dweight.iter_mut().for_each(|v| *v = S::zero());
        self.dbias.iter_mut().for_each(|v| *v = S::zero());
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [S], &mut [S])) {
        f(&mut self.weight, &mut self.dweight);
        f(&mut self.bias, &mut self.dbias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(n: usize, c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data = (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(n, c, h, w, data)
    }

    /// Direct per-pixel convolution used as the oracle.
    fn conv_naive(x: &Tensor<f64>, w: &[f64], b: Option<&[f64]>, in_c: usize, out_c: usize, k: usize, pad: usize) -> Tensor<f64> {
        let oh = x.h + 2 * pad - k + 1;
        let ow = x.w + 2 * pad - k + 1;
        let mut y = Tensor::zeros(x.n, out_c, oh, ow);
        for s in 0..x.n {
            for o in 0..out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b[o]);
                        for c in 0..in_c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = oy as isize + ky as isize - pad as isize;
                                    let sx = ox as isize + kx as isize - pad as isize;
                                    if sy >= 0 && sy < x.h as isize && sx >= 0 && sx < x.w as isize {
                                        acc += w[((o * in_c + c) * k + ky) * k + kx]
                                            * x.at(s, c, sy as usize, sx as usize);
                                    }
                                }
                            }
                        }
                        *y.at_mut(s, o, oy, ox) = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut r = rng(11);
        for &(k, pad, with_bias) in &[(3usize, 1usize, true), (3, 1, false), (1, 0, true), (5, 2, false)] {
            let x = random_tensor(2, 3, 9, 8, &mut r);
            let mut conv = Conv2d::<f64>::new(3, 4, k, pad, with_bias, &mut r);
            let y = conv.forward(&x, false);
            let want = conv_naive(&x, &conv.weight, conv.bias.as_deref(), 3, 4, k, pad);
            assert_eq!((y.n, y.c, y.h, y.w), (want.n, want.c, want.h, want.w));
            for (a, b) in y.data.iter().zip(want.data.iter()) {
                assert!((a - b).abs() < 1e-10, "k={k} pad={pad}: {a} vs {b}");
            }
        }
    }

    /// Central-difference check of every conv gradient on a small layer.
    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut r = rng(12);
        let x = random_tensor(2, 2, 5, 5, &mut r);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, 1, true, &mut r);
        // Loss = sum of y * fixed random weights, so dL/dy is that weight field.
        let y0 = conv.forward(&x, true);
        let loss_w: Vec<f64> = (0..y0.data.len()).map(|_| r.random_range(-1.0..1.0)).collect();
        let dy = Tensor::from_vec(y0.n, y0.c, y0.h, y0.w, loss_w.clone());
        let dx = conv.backward(&dy);

        let loss = |conv: &mut Conv2d<f64>, x: &Tensor<f64>| -> f64 {
            let y = conv.forward(x, false);
            y.data.iter().zip(loss_w.iter()).map(|(a, b)| a * b).sum()
        };

        let h = 1e-6;
        for i in [0usize, 7, 23, conv.weight.len() - 1] {
            let keep = conv.weight[i];
            conv.weight[i] = keep + h;
            let up = loss(&mut conv, &x);
            conv.weight[i] = keep - h;
            let down = loss(&mut conv, &x);
            conv.weight[i] = keep;
            let num = (up - down) / (2.0 * h);
            assert!((conv.dweight[i] - num).abs() < 1e-6, "dW[{i}]: {} vs {num}", conv.dweight[i]);
        }
        for o in 0..3 {
            let keep = conv.bias.as_ref().unwrap()[o];
            conv.bias.as_mut().unwrap()[o] = keep + h;
            let up = loss(&mut conv, &x);
            conv.bias.as_mut().unwrap()[o] = keep - h;
            let down = loss(&mut conv, &x);
            conv.bias.as_mut().unwrap()[o] = keep;
            let num = (up - down) / (2.0 * h);
            assert!((conv.dbias.as_ref().unwrap()[o] - num).abs() < 1e-6);
        }
        let mut xp = x.clone();
        for i in [0usize, 13, 49] {
            let keep = xp.data[i];
            xp.data[i] = keep + h;
            let up = loss(&mut conv, &xp);
            xp.data[i] = keep - h;
            let down = loss(&mut conv, &xp);
            xp.data[i] = keep;
            let num = (up - down) / (2.0 * h);
            assert!((dx.data[i] - num).abs() < 1e-6, "dX[{i}]: {} vs {num}", dx.data[i]);
        }
    }

    #[test]
    fn batch_norm_train_normalizes_and_updates_running_stats() {
        let x = Tensor::from_vec(2, 1, 1, 2, vec![1.0f64, 3.0, 5.0, 7.0]);
        let mut bn = BatchNorm2d::<f64>::new(1);
        let y = bn.forward(&x, true);
        // mean 4, biased var 5.
        let istd = 1.0 / (5.0 + 1e-5_f64).sqrt();
        let want: Vec<f64> = [-3.0, -1.0, 1.0, 3.0].iter().map(|d| d * istd).collect();
        for (a, b) in y.data.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((bn.running_mean[0] - 0.4).abs() < 1e-12);
        assert!((bn.running_var[0] - (0.9 + 0.5)).abs() < 1e-12);

        // Eval mode applies the running stats elementwise.
        let y_eval = bn.forward(&x, false);
        let scale = 1.0 / (1.4 + 1e-5_f64).sqrt();
        for (a, &xi) in y_eval.data.iter().zip(x.data.iter()) {
            assert!((a - (xi - 0.4) * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let mut r = rng(13);
        let x = random_tensor(3, 2, 3, 3, &mut r);
        let loss_w: Vec<f64> = (0..x.data.len()).map(|_| r.random_range(-1.0..1.0)).collect();

        let loss = |bn: &mut BatchNorm2d<f64>, x: &Tensor<f64>| -> f64 {
            let rm = bn.running_mean.clone();
            let rv = bn.running_var.clone();
            let y = bn.forward(x, true);
            bn.cache = None;
            bn.running_mean = rm;
            bn.running_var = rv;
            y.data.iter().zip(loss_w.iter()).map(|(a, b)| a * b).sum()
        };

        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.gamma = vec![1.3, 0.7];
        bn.beta = vec![0.2, -0.4];
        let y = bn.forward(&x, true);
        assert_eq!(y.data.len(), x.data.len());
        let dy = Tensor::from_vec(x.n, x.c, x.h, x.w, loss_w.clone());
        let dx = bn.backward(&dy);

        let h = 1e-6;
        for c in 0..2 {
            let keep = bn.gamma[c];
            bn.gamma[c] = keep + h;
            let up = loss(&mut bn, &x);
            bn.gamma[c] = keep - h;
            let down = loss(&mut bn, &x);
            bn.gamma[c] = keep;
            let num = (up - down) / (2.0 * h);
            assert!((bn.dgamma[c] - num).abs() < 1e-5, "dgamma[{c}]");
            assert!((bn.dbeta[c] - loss_w.iter().zip(0..).filter(|&(_, i)| (i / 9) % 2 == c).map(|(v, _)| v).sum::<f64>()).abs() < 1e-9);
        }
        let mut xp = x.clone();
        for i in [0usize, 10, 35, 53] {
            let keep = xp.data[i];
            xp.data[i] = keep + h;
            let up = loss(&mut bn, &xp);
            xp.data[i] = keep - h;
            let down = loss(&mut bn, &xp);
            xp.data[i] = keep;
            let num = (up - down) / (2.0 * h);
            assert!((dx.data[i] - num).abs() < 1e-5, "dX[{i}]: {} vs {num}", dx.data[i]);
        }
    }

    #[test]
    fn prelu_forward_and_gradients() {
        let x = Tensor::from_vec(1, 2, 1, 2, vec![2.0f64, -4.0, -1.0, 3.0]);
        let mut act = PRelu::<f64>::new(2);
        act.alpha = vec![0.25, 0.5];
        let y = act.forward(&x, true);
        assert_eq!(y.data, vec![2.0, -1.0, -0.5, 3.0]);

        let dy = Tensor::from_vec(1, 2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let dx = act.backward(&dy);
        assert_eq!(dx.data, vec![1.0, 0.5, 1.5, 4.0]);
        // dalpha accumulates dy * x over the non-positive entries per channel.
        assert_eq!(act.dalpha, vec![2.0 * -4.0, 3.0 * -1.0]);
    }

    #[test]
    fn max_pool_matches_window_maximum_and_routes_gradient() {
        let x = Tensor::from_vec(
            1,
            1,
            5,
            5,
            vec![
                1.0f64, 2.0, 3.0, 4.0, 99.0,
                5.0, 0.5, 6.0, 1.5, 99.0,
                7.0, 8.0, 0.25, 0.75, 99.0,
                0.1, 9.0, 10.0, 0.2, 99.0,
                99.0, 99.0, 99.0, 99.0, 99.0,
            ],
        );
        let mut pool = MaxPool2::new();
        let y = pool.forward(&x, true);
        // Odd row/column 4 is dropped entirely.
        assert_eq!((y.h, y.w), (2, 2));
        assert_eq!(y.data, vec![5.0, 6.0, 9.0, 10.0]);

        let dy = Tensor::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let dx = pool.backward(&dy);
        assert_eq!(dx.at(0, 0, 1, 0), 1.0);
        assert_eq!(dx.at(0, 0, 1, 2), 2.0);
        assert_eq!(dx.at(0, 0, 3, 1), 3.0);
        assert_eq!(dx.at(0, 0, 3, 2), 4.0);
        assert_eq!(dx.data.iter().sum::<f64>(), 10.0);
    }

    #[test]
    fn max_pool_ties_take_first_in_window_order() {
        let x = Tensor::from_vec(1, 1, 2, 2, vec![5.0f64, 5.0, 5.0, 5.0]);
        let mut pool = MaxPool2::new();
        let y = pool.forward(&x, true);
        assert_eq!(y.data, vec![5.0]);
        let dx = pool.backward(&Tensor::from_vec(1, 1, 1, 1, vec![1.0]));
        assert_eq!(dx.data, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gap_averages_and_spreads_gradient() {
        let x = Tensor::from_vec(1, 2, 2, 2, vec![1.0f64, 2.0, 3.0, 6.0, 4.0, 4.0, 4.0, 4.0]);
        let mut gap = GlobalAvgPool::new();
        let y = gap.forward(&x, true);
        assert_eq!(y.data, vec![3.0, 4.0]);
        let dx = gap.backward(&Tensor::from_vec(1, 2, 1, 1, vec![8.0, 4.0]));
        assert_eq!(dx.data, vec![2.0, 2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn linear_matches_hand_product_and_finite_differences() {
        let mut r = rng(14);
        let mut lin = Linear::<f64>::new(3, 2, &mut r);
        lin.weight = vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0];
        lin.bias = vec![0.1, -0.2];
        let x = vec![1.0f64, -1.0, 2.0, 0.0, 3.0, -2.0];
        let y = lin.forward(&x, 2, true);
        for (got, want) in y.iter().zip([5.1, -1.7, 0.1, 1.3]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }

        let dy = vec![1.0f64, -2.0, 0.5, 1.5];
        let dx = lin.backward(&dy);

        let loss = |lin: &mut Linear<f64>, x: &[f64]| -> f64 {
            let y = lin.forward(x, 2, false);
            y.iter().zip(dy.iter()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..6 {
            let keep = lin.weight[i];
            lin.weight[i] = keep + h;
            let up = loss(&mut lin, &x);
            lin.weight[i] = keep - h;
            let down = loss(&mut lin, &x);
            lin.weight[i] = keep;
            assert!((lin.dweight[i] - (up - down) / (2.0 * h)).abs() < 1e-7);
        }
        let mut xp = x.clone();
        for i in 0..6 {
            let keep = xp[i];
            xp[i] = keep + h;
            let up = loss(&mut lin, &xp);
            xp[i] = keep - h;
            let down = loss(&mut lin, &xp);
            xp[i] = keep;
            assert!((dx[i] - (up - down) / (2.0 * h)).abs() < 1e-7);
        }
        assert_eq!(lin.dbias, vec![1.5, -0.5]);
    }

    #[test]
    fn conv_without_bias_has_no_bias_params() {
        let mut r = rng(15);
        let mut conv = Conv2d::<f32>::new(2, 2, 3, 1, false, &mut r);
        let mut slices = 0;
        conv.for_each_param(&mut |p, g| {
            assert_eq!(p.len(), g.len());
            slices += 1;
        });
        assert_eq!(slices, 1);
    }
}
