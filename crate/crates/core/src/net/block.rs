//! Composite blocks: the stem convolution pair and the bottleneck residual
//! unit the two branches are stacked from.

use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm2d, Conv2d, PRelu};
use super::scalar::Scalar;
use super::tensor::Tensor;

/// Two 3x3 conv + batch norm + PReLU stages; spatial size is preserved.
pub struct ConvBlock<S: Scalar> {
    pub conv1: Conv2d<S>,
    pub bn1: BatchNorm2d<S>,
    pub act1: PRelu<S>,
    pub conv2: Conv2d<S>,
    pub bn2: BatchNorm2d<S>,
    pub act2: PRelu<S>,
}

impl<S: Scalar> ConvBlock<S> {
    pub fn new(in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBlock {
            conv1: Conv2d::new(in_c, out_c, 3, 1, false, rng),
            bn1: BatchNorm2d::new(out_c),
            act1: PRelu::new(out_c),
            conv2: Conv2d::new(out_c, out_c, 3, 1, false, rng),
            bn2: BatchNorm2d::new(out_c),
            act2: PRelu::new(out_c),
        }
    }

    pub fn forward(&mut self, x: &Tensor<S>, train: bool) -> Tensor<S> {
        let y = self.conv1.forward(x, train);
        let y = self.bn1.forward(&y, train);
        let y = self.act1.forward(&y, train);
        let y = self.conv2.forward(&y, train);
        let y = self.bn2.forward(&y, train);
        self.act2.forward(&y, train)
    }

    pub fn backward(&mut self, dy: &Tensor<S>) -> Tensor<S> {
        let d = self.act2.backward(dy);
        let d = self.bn2.backward(&d);
        let d = self.conv2.backward(&d);
        let d = self.act1.backward(&d);
        let d = self.bn1.backward(&d);
        self.conv1.backward(&d)
    }

    pub fn zero_grad(&mut self) {
        self.conv1.zero_grad();
        self.bn1.zero_grad();
        self.act1.zero_grad();
        self.conv2.zero_grad();
        self.bn2.zero_grad();
        self.act2.zero_grad();
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [S], &mut [S])) {
        self.conv1.for_each_param(f);
        self.bn1.for_each_param(f);
        self.act1.for_each_param(f);
        self.conv2.for_each_param(f);
        self.bn2.for_each_param(f);
        self.act2.for_each_param(f);
    }

    pub fn for_each_state(&mut self, f: &mut dyn FnMut(&mut [S])) {
        self.bn1.for_each_state(f);
        self.bn2.for_each_state(f);
    }

    pub fn kernel_weight_count(&self) -> usize {
        self.conv1.kernel_weight_count() + self.conv2.kernel_weight_count()
    }
}

/// Residual bottleneck: 1x1 reduce, 3x3, 1x1 expand, each with batch norm,
/// PReLU between them and after the residual add. The shortcut is the
/// identity when channels already match, otherwise a biased 1x1 projection.
pub struct Bottleneck<S: Scalar> {
    pub conv1: Conv2d<S>,
    pub bn1: BatchNorm2d<S>,
    pub act1: PRelu<S>,
    pub conv2: Conv2d<S>,
    pub bn2: BatchNorm2d<S>,
    pub act2: PRelu<S>,
    pub conv3: Conv2d<S>,
    pub bn3: BatchNorm2d<S>,
    pub proj: Option<Conv2d<S>>,
    pub act_out: PRelu<S>,
}

impl<S: Scalar> Bottleneck<S> {
    pub fn new(in_c: usize, mid: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Bottleneck {
            conv1: Conv2d::new(in_c, mid, 1, 0, false, rng),
            bn1: BatchNorm2d::new(mid),
            act1: PRelu::new(mid),
            conv2: Conv2d::new(mid, mid, 3, 1, false, rng),
            bn2: BatchNorm2d::new(mid),
            act2: PRelu::new(mid),
            conv3: Conv2d::new(mid, out, 1, 0, false, rng),
            bn3: BatchNorm2d::new(out),
            proj: (in_c != out).then(|| Conv2d::new(in_c, out, 1, 0, true, rng)),
            act_out: PRelu::new(out),
        }
    }

    pub fn forward(&mut self, x: &Tensor<S>, train: bool) -> Tensor<S> {
        let f = self.conv1.forward(x, train);
        let f = self.bn1.forward(&f, train);
        let f = self.act1.forward(&f, train);
        let f = self.conv2.forward(&f, train);
        let f = self.bn2.forward(&f, train);
        let f = self.act2.forward(&f, train);
        let f = self.conv3.forward(&f, train);
        let mut sum = self.bn3.forward(&f, train);
        match &mut self.proj {
            Some(p) => sum.add_assign_from(&p.forward(x, train)),
            None => sum.add_assign_from(x),
        }
        self.act_out.forward(&sum, train)
    }

    pub fn backward(&mut self, dy: &Tensor<S>) -> Tensor<S> {
        let dsum = self.act_out.backward(dy);
        let d = self.bn3.backward(&dsum);
        let d = self.conv3.backward(&d);
        let d = self.act2.backward(&d);
        let d = self.bn2.backward(&d);
        let d = self.conv2.backward(&d);
        let d = self.act1.backward(&d);
        let d = self.bn1.backward(&d);
        let mut dx = self.conv1.backward(&d);
        match &mut self.proj {
            Some(p) => dx.add_assign_from(&p.backward(&dsum)),
            None => dx.add_assign_from(&dsum),
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.conv1.zero_grad();
        self.bn1.zero_grad();
        self.act1.zero_grad();
        self.conv2.zero_grad();
        self.bn2.zero_grad();
        self.act2.zero_grad();
        self.conv3.zero_grad();
        self.bn3.zero_grad();
        if let Some(p) = &mut self.proj {
            p.zero_grad();
        }
        self.act_out.zero_grad();
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [S], &mut [S])) {
        self.conv1.for_each_param(f);
        self.bn1.for_each_param(f);
        self.act1.for_each_param(f);
        self.conv2.for_each_param(f);
        self.bn2.for_each_param(f);
        self.act2.for_each_param(f);
        self.conv3.for_each_param(f);
        self.bn3.for_each_param(f);
        if let Some(p) = &mut self.proj {
            p.for_each_param(f);
        }
        self.act_out.for_each_param(f);
    }

    pub fn for_each_state(&mut self, f: &mut dyn FnMut(&mut [S])) {
        self.bn1.for_each_state(f);
        self.bn2.for_each_state(f);
        self.bn3.for_each_state(f);
    }

    /// Main-path kernel weights; the projection shortcut is not part of the
    /// per-branch convolution weight tally.
    pub fn kernel_weight_count(&self) -> usize {
        self.conv1.kernel_weight_count() + self.conv2.kernel_weight_count() + self.conv3.kernel_weight_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(n: usize, c: usize, h: usize, w: usize, r: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn conv_block_preserves_spatial_size() {
        let mut r = rng(20);
        let mut cb = ConvBlock::<f64>::new(3, 6, &mut r);
        let x = random_tensor(2, 3, 9, 9, &mut r);
        let y = cb.forward(&x, false);
        assert_eq!((y.n, y.c, y.h, y.w), (2, 6, 9, 9));
    }

    #[test]
    fn bottleneck_projects_only_on_channel_change() {
        let mut r = rng(21);
        let first = Bottleneck::<f64>::new(4, 2, 6, &mut r);
        assert!(first.proj.is_some());
        let later = Bottleneck::<f64>::new(6, 2, 6, &mut r);
        assert!(later.proj.is_none());
    }

    #[test]
    fn bottleneck_output_shape_and_identity_shortcut() {
        let mut r = rng(22);
        let mut blk = Bottleneck::<f64>::new(6, 2, 6, &mut r);
        let x = random_tensor(1, 6, 7, 7, &mut r);
        let y = blk.forward(&x, false);
        assert_eq!((y.n, y.c, y.h, y.w), (1, 6, 7, 7));

        // With the f-path silenced (conv3 weights zeroed, bn3 affine zeroed)
        // the block reduces to PReLU(x).
        blk.conv3.weight.iter_mut().for_each(|w| *w = 0.0);
        blk.bn3.gamma.iter_mut().for_each(|g| *g = 0.0);
        let y = blk.forward(&x, false);
        for (yv, xv) in y.data.iter().zip(x.data.iter()) {
            let want = if *xv > 0.0 { *xv } else { 0.25 * *xv };
            assert!((yv - want).abs() < 1e-12);
        }
    }

    fn snapshot_states(states: &mut Vec<Vec<f64>>, blk: &mut Bottleneck<f64>) {
        states.clear();
        blk.for_each_state(&mut |s| states.push(s.to_vec()));
    }

    fn restore_states(states: &[Vec<f64>], blk: &mut Bottleneck<f64>) {
        let mut i = 0;
        blk.for_each_state(&mut |s| {
            s.copy_from_slice(&states[i]);
            i += 1;
        });
    }

    /// Central differences through a whole bottleneck in train mode, hitting
    /// a parameter in every constituent layer including the projection.
    #[test]
    fn bottleneck_gradients_match_finite_differences() {
        let mut r = rng(23);
        let x = random_tensor(2, 3, 5, 5, &mut r);
        let mut blk = Bottleneck::<f64>::new(3, 2, 4, &mut r);
        let loss_w: Vec<f64> = (0..2 * 4 * 25).map(|_| r.random_range(-1.0..1.0)).collect();

        let mut saved = Vec::new();
        snapshot_states(&mut saved, &mut blk);

        let _ = blk.forward(&x, true);
        let dy = Tensor::from_vec(2, 4, 5, 5, loss_w.clone());
        blk.zero_grad();
        let dx = blk.backward(&dy);
        restore_states(&saved, &mut blk);

        let mut flat_grads = Vec::new();
        blk.for_each_param(&mut |_, g| flat_grads.extend_from_slice(g));

        // Train-mode loss that leaves the block exactly as it found it.
        fn eval_loss(blk: &mut Bottleneck<f64>, x: &Tensor<f64>, loss_w: &[f64], saved: &[Vec<f64>]) -> f64 {
            let y = blk.forward(x, true);
            restore_states(saved, blk);
            clear_caches(blk, x);
            y.data.iter().zip(loss_w.iter()).map(|(a, b)| a * b).sum()
        }

        let h = 1e-6;
        let total = flat_grads.len();
        // Probe a spread of parameters across the whole block.
        for pick in (0..12).map(|i| i * total / 12) {
            let analytic = flat_grads[pick];
            let orig = get_param(&mut blk, pick);
            set_param(&mut blk, pick, orig + h);
            let up = eval_loss(&mut blk, &x, &loss_w, &saved);
            set_param(&mut blk, pick, orig - h);
            let down = eval_loss(&mut blk, &x, &loss_w, &saved);
            set_param(&mut blk, pick, orig);
            let fd = (up - down) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!(
                (analytic - fd).abs() / denom < 1e-4,
                "param {pick}: analytic {analytic} vs numeric {fd}"
            );
        }

        // Input gradient at a few positions.
        let mut xp = x.clone();
        for i in [0usize, 31, 74] {
            let keep = xp.data[i];
            xp.data[i] = keep + h;
            let up = eval_loss(&mut blk, &xp, &loss_w, &saved);
            xp.data[i] = keep - h;
            let down = eval_loss(&mut blk, &xp, &loss_w, &saved);
            xp.data[i] = keep;
            let fd = (up - down) / (2.0 * h);
            assert!((dx.data[i] - fd).abs() < 1e-5, "dx[{i}]: {} vs {fd}", dx.data[i]);
        }
    }

    fn get_param(blk: &mut Bottleneck<f64>, pick: usize) -> f64 {
        let mut offset = 0;
        let mut value = f64::NAN;
        blk.for_each_param(&mut |p, _| {
            if pick >= offset && pick < offset + p.len() {
                value = p[pick - offset];
            }
            offset += p.len();
        });
        value
    }

    fn set_param(blk: &mut Bottleneck<f64>, pick: usize, value: f64) {
        let mut offset = 0;
        blk.for_each_param(&mut |p, _| {
            if pick >= offset && pick < offset + p.len() {
                p[pick - offset] = value;
            }
            offset += p.len();
        });
    }

    /// Forward in train mode leaves caches armed; run a throwaway backward to
    /// drop them so the next train forward starts clean.
    fn clear_caches(blk: &mut Bottleneck<f64>, x: &Tensor<f64>) {
        let zeros = Tensor::zeros(x.n, blk.act_out.c, x.h, x.w);
        let _ = blk.backward(&zeros);
    }

    #[test]
    fn param_traversal_is_stable_and_counts_match() {
        let mut r = rng(24);
        let mut blk = Bottleneck::<f64>::new(3, 2, 4, &mut r);
        let mut sizes = Vec::new();
        blk.for_each_param(&mut |p, _| sizes.push(p.len()));
        // conv1 w, bn1 g+b, act1, conv2 w, bn2 g+b, act2, conv3 w, bn3 g+b,
        // proj w+b, act_out.
        assert_eq!(
            sizes,
            vec![3 * 2, 2, 2, 2, 2 * 2 * 9, 2, 2, 2, 2 * 4, 4, 4, 3 * 4, 4, 4]
        );
        assert_eq!(blk.kernel_weight_count(), 6 + 36 + 8);
    }
}
