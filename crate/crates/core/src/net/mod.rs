//! Dual-branch residual classifier.
//!
//! Two structurally identical branches with independent weights digest a
//! multi-view patch stack and a multi-scale patch stack for the same voxel.
//! Each branch runs a two-conv stem, a 2x2 max pool, a first bottleneck
//! cluster, another pool, a second bottleneck cluster and global average
//! pooling. A configurable central-intensity tap contributes raw local
//! intensity statistics. One shared fully connected head turns the
//! concatenated features into nodule/background probabilities.

pub mod block;
pub mod cip;
pub mod layers;
pub mod scalar;
pub mod tensor;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::fnv1a64;
use block::{Bottleneck, ConvBlock};
use cip::{kernel_fits, CipTap};
use layers::{GlobalAvgPool, Linear, MaxPool2};
use scalar::Scalar;
use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NetError + '_ {
    move |source| NetError::Io { path: path.to_path_buf(), source }
}

/// Network depth selector. The depth names count the convolution layers of
/// one branch; they differ only in how often each bottleneck cluster repeats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u16", into = "u16")]
pub enum DepthVariant {
    D32,
    D83,
    D134,
}

impl DepthVariant {
    pub fn depth(self) -> u16 {
        match self {
            DepthVariant::D32 => 32,
            DepthVariant::D83 => 83,
            DepthVariant::D134 => 134,
        }
    }

    /// `(first cluster, second cluster)` bottleneck repeats.
    pub fn repeats(self) -> (usize, usize) {
        match self {
            DepthVariant::D32 => (4, 6),
            DepthVariant::D83 => (4, 23),
            DepthVariant::D134 => (8, 36),
        }
    }

    pub const ALL: [DepthVariant; 3] = [DepthVariant::D32, DepthVariant::D83, DepthVariant::D134];
}

impl TryFrom<u16> for DepthVariant {
    type Error = String;

    fn try_from(v: u16) -> Result<Self, String> {
        match v {
            32 => Ok(DepthVariant::D32),
            83 => Ok(DepthVariant::D83),
            134 => Ok(DepthVariant::D134),
            other => Err(format!("unsupported depth variant {other}, expected 32, 83 or 134")),
        }
    }
}

impl From<DepthVariant> for u16 {
    fn from(v: DepthVariant) -> u16 {
        v.depth()
    }
}

/// Downsampling operator between stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingMode {
    Max2x2,
}

/// Channel plan for one bottleneck cluster: both inner convolutions use
/// `mid` channels, the expanding 1x1 emits `out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterChannels {
    pub mid: usize,
    pub out: usize,
}

/// Channel widths after applying the reduced-profile divisor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaledChannels {
    pub cbc: usize,
    pub r1_mid: usize,
    pub r1_out: usize,
    pub r2_mid: usize,
    pub r2_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub depth_variant: DepthVariant,
    pub input_channels: usize,
    pub input_size: usize,
    pub conv_block_channels: usize,
    pub res_block1: ClusterChannels,
    pub res_block2: ClusterChannels,
    /// Divides every channel width; 1 is the full profile.
    pub reduced_divisor: usize,
    /// Which activation the central-intensity tap reads: 1 = network input,
    /// 2 = stem output, 3 = first cluster output, 4 = second cluster output.
    /// `None` disables the tap.
    pub cip_placement: Option<u8>,
    pub cip_kernels: Vec<usize>,
    pub pooling: PoolingMode,
    pub init_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            depth_variant: DepthVariant::D32,
            input_channels: 3,
            input_size: 35,
            conv_block_channels: 36,
            res_block1: ClusterChannels { mid: 128, out: 512 },
            res_block2: ClusterChannels { mid: 256, out: 1024 },
            reduced_divisor: 1,
            cip_placement: Some(1),
            cip_kernels: vec![1, 3],
            pooling: PoolingMode::Max2x2,
            init_seed: 7,
        }
    }
}

impl NetworkConfig {
    pub fn for_variant(variant: DepthVariant) -> Self {
        NetworkConfig { depth_variant: variant, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let fail = |msg: String| Err(NetError::Config(msg));
        if self.input_channels == 0 {
            return fail("input_channels must be positive".into());
        }
        if self.input_size < 5 || self.input_size % 2 == 0 {
            return fail(format!("input_size must be odd and at least 5, got {}", self.input_size));
        }
        if self.reduced_divisor == 0 {
            return fail("reduced_divisor must be positive".into());
        }
        for (name, c) in [
            ("conv_block_channels", self.conv_block_channels),
            ("res_block1.mid", self.res_block1.mid),
            ("res_block1.out", self.res_block1.out),
            ("res_block2.mid", self.res_block2.mid),
            ("res_block2.out", self.res_block2.out),
        ] {
            if c == 0 {
                return fail(format!("{name} must be positive"));
            }
            if c % self.reduced_divisor != 0 {
                return fail(format!(
                    "{name} = {c} is not divisible by reduced_divisor {}",
                    self.reduced_divisor
                ));
            }
        }
        let (s1, s2, s3) = self.stage_sizes();
        if s3 == 0 {
            return fail(format!("input_size {} leaves nothing after two pooling stages", self.input_size));
        }
        if let Some(p) = self.cip_placement {
            if !(1..=4).contains(&p) {
                return fail(format!("cip_placement must be 1..=4, got {p}"));
            }
            if self.cip_kernels.is_empty() {
                return fail("cip_kernels must not be empty when the tap is placed".into());
            }
            let size = match p {
                1 | 2 => s1,
                3 => s2,
                _ => s3,
            };
            for &k in &self.cip_kernels {
                if !kernel_fits(size, k) {
                    return fail(format!(
                        "cip kernel {k} must be odd and fit the {size}x{size} map at placement {p}"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Spatial sides of the three stage outputs: stem, first cluster,
    /// second cluster.
    pub fn stage_sizes(&self) -> (usize, usize, usize) {
        let s1 = self.input_size;
        let s2 = s1 / 2;
        let s3 = s2 / 2;
        (s1, s2, s3)
    }

    pub fn scaled(&self) -> ScaledChannels {
        let d = self.reduced_divisor;
        ScaledChannels {
            cbc: self.conv_block_channels / d,
            r1_mid: self.res_block1.mid / d,
            r1_out: self.res_block1.out / d,
            r2_mid: self.res_block2.mid / d,
            r2_out: self.res_block2.out / d,
        }
    }

    /// `(channels, side)` of the activation the intensity tap would read at
    /// placement `p`.
    pub fn tap_dims(&self, p: u8) -> (usize, usize) {
        let s = self.scaled();
        let (s1, s2, s3) = self.stage_sizes();
        match p {
            1 => (self.input_channels, s1),
            2 => (s.cbc, s1),
            3 => (s.r1_out, s2),
            _ => (s.r2_out, s3),
        }
    }

    pub fn stage_dims(&self) -> [(usize, usize, usize); 3] {
        let s = self.scaled();
        let (s1, s2, s3) = self.stage_sizes();
        [(s.cbc, s1, s1), (s.r1_out, s2, s2), (s.r2_out, s3, s3)]
    }

    /// Width of the shared head input: both branches' pooled features plus
    /// both branches' intensity features.
    pub fn feature_dim(&self) -> usize {
        let s = self.scaled();
        let mut dim = 2 * s.r2_out;
        if let Some(p) = self.cip_placement {
            dim += 2 * self.tap_dims(p).0 * self.cip_kernels.len();
        }
        dim
    }

    /// Every trainable parameter: conv kernels, projection kernels and
    /// biases, batch norm affine pairs, PReLU slopes and the head.
    pub fn param_count(&self) -> usize {
        2 * self.branch_param_count() + (self.feature_dim() + 1) * 2
    }

    fn branch_param_count(&self) -> usize {
        let s = self.scaled();
        let (r1, r2) = self.depth_variant.repeats();
        let stem = conv_params(self.input_channels, s.cbc, 3, false)
            + bn_act_params(s.cbc)
            + conv_params(s.cbc, s.cbc, 3, false)
            + bn_act_params(s.cbc);
        stem + cluster_param_count(s.cbc, s.r1_mid, s.r1_out, r1)
            + cluster_param_count(s.r1_out, s.r2_mid, s.r2_out, r2)
    }

    /// Main-path convolution kernel weights of a single branch. Projection
    /// shortcuts, biases, norm and activation parameters are excluded; this
    /// is the figure architecture summaries usually quote.
    pub fn branch_conv_weight_count(&self) -> usize {
        let s = self.scaled();
        let (r1, r2) = self.depth_variant.repeats();
        let kernels = |in_c: usize, mid: usize, out: usize| in_c * mid + 9 * mid * mid + mid * out;
        9 * self.input_channels * s.cbc
            + 9 * s.cbc * s.cbc
            + kernels(s.cbc, s.r1_mid, s.r1_out)
            + (r1 - 1) * kernels(s.r1_out, s.r1_mid, s.r1_out)
            + kernels(s.r1_out, s.r2_mid, s.r2_out)
            + (r2 - 1) * kernels(s.r2_out, s.r2_mid, s.r2_out)
    }

    /// Batch norm running statistics held outside the trainable parameters.
    pub fn state_count(&self) -> usize {
        let s = self.scaled();
        let (r1, r2) = self.depth_variant.repeats();
        let per_block1 = 4 * s.r1_mid + 2 * s.r1_out;
        let per_block2 = 4 * s.r2_mid + 2 * s.r2_out;
        2 * (4 * s.cbc + r1 * per_block1 + r2 * per_block2)
    }

    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("network config serializes");
        format!("{:016x}", fnv1a64(&canonical))
    }
}

fn conv_params(in_c: usize, out_c: usize, k: usize, bias: bool) -> usize {
    out_c * in_c * k * k + if bias { out_c } else { 0 }
}

/// Batch norm affine pair plus the PReLU that always follows it.
fn bn_act_params(c: usize) -> usize {
    2 * c + c
}

fn bottleneck_param_count(in_c: usize, mid: usize, out: usize) -> usize {
    conv_params(in_c, mid, 1, false)
        + bn_act_params(mid)
        + conv_params(mid, mid, 3, false)
        + bn_act_params(mid)
        + conv_params(mid, out, 1, false)
        + 2 * out
        + if in_c != out { conv_params(in_c, out, 1, true) } else { 0 }
        + out
}

fn cluster_param_count(in_c: usize, mid: usize, out: usize, repeats: usize) -> usize {
    bottleneck_param_count(in_c, mid, out) + (repeats - 1) * bottleneck_param_count(out, mid, out)
}

/// One of the two weight-independent halves of the network.
pub struct Branch<S: Scalar> {
    pub conv_block: ConvBlock<S>,
    pub pool1: MaxPool2,
    pub rb1: Vec<Bottleneck<S>>,
    pub pool2: MaxPool2,
    pub rb2: Vec<Bottleneck<S>>,
    pub gap: GlobalAvgPool,
    pub out_channels: usize,
    tap_shape: Option<(usize, usize, usize, usize)>,
}

impl<S: Scalar> Branch<S> {
    fn new(in_c: usize, s: &ScaledChannels, repeats: (usize, usize), rng: &mut ChaCha8Rng) -> Self {
        let mut rb1 = Vec::with_capacity(repeats.0);
        rb1.push(Bottleneck::new(s.cbc, s.r1_mid, s.r1_out, rng));
        for _ in 1..repeats.0 {
            rb1.push(Bottleneck::new(s.r1_out, s.r1_mid, s.r1_out, rng));
        }
        let mut rb2 = Vec::with_capacity(repeats.1);
        rb2.push(Bottleneck::new(s.r1_out, s.r2_mid, s.r2_out, rng));
        for _ in 1..repeats.1 {
            rb2.push(Bottleneck::new(s.r2_out, s.r2_mid, s.r2_out, rng));
        }
        Branch {
            conv_block: ConvBlock::new(in_c, s.cbc, rng),
            pool1: MaxPool2::new(),
            rb1,
            pool2: MaxPool2::new(),
            rb2,
            gap: GlobalAvgPool::new(),
            out_channels: s.r2_out,
            tap_shape: None,
        }
    }

    /// Returns `(pooled feature rows n x out_channels, intensity rows)`.
    fn forward(&mut self, x: &Tensor<S>, train: bool, cip: Option<(&CipTap, u8)>) -> (Vec<S>, Vec<S>) {
        let mut cip_rows = Vec::new();
        let mut tap_shape = None;
        if let Some((tap, 1)) = cip {
            cip_rows = tap.forward(x);
            tap_shape = Some((x.n, x.c, x.h, x.w));
        }
        let stem = self.conv_block.forward(x, train);
        if let Some((tap, 2)) = cip {
            cip_rows = tap.forward(&stem);
            tap_shape = Some((stem.n, stem.c, stem.h, stem.w));
        }
        let mut cur = self.pool1.forward(&stem, train);
        drop(stem);
        for blk in &mut self.rb1 {
            cur = blk.forward(&cur, train);
        }
        if let Some((tap, 3)) = cip {
            cip_rows = tap.forward(&cur);
            tap_shape = Some((cur.n, cur.c, cur.h, cur.w));
        }
        let mut cur = self.pool2.forward(&cur, train);
        for blk in &mut self.rb2 {
            cur = blk.forward(&cur, train);
        }
        if let Some((tap, 4)) = cip {
            cip_rows = tap.forward(&cur);
            tap_shape = Some((cur.n, cur.c, cur.h, cur.w));
        }
        let pooled = self.gap.forward(&cur, train);
        self.tap_shape = tap_shape;
        (pooled.data, cip_rows)
    }

    fn backward(&mut self, dgap_rows: &[S], dcip_rows: &[S], n: usize, cip: Option<(&CipTap, u8)>) -> Tensor<S> {
        let add_tap = |d: &mut Tensor<S>, tap: &CipTap, shape: Option<(usize, usize, usize, usize)>| {
            let (tn, tc, th, tw) = shape.expect("tap shape recorded during forward");
            d.add_assign_from(&tap.backward(dcip_rows, tn, tc, th, tw));
        };
        let dgap = Tensor::from_vec(n, self.out_channels, 1, 1, dgap_rows.to_vec());
        let mut d = self.gap.backward(&dgap);
        if let Some((tap, 4)) = cip {
            add_tap(&mut d, tap, self.tap_shape);
        }
        for blk in self.rb2.iter_mut().rev() {
            d = blk.backward(&d);
        }
        d = self.pool2.backward(&d);
        if let Some((tap, 3)) = cip {
            add_tap(&mut d, tap, self.tap_shape);
        }
        for blk in self.rb1.iter_mut().rev() {
            d = blk.backward(&d);
        }
        d = self.pool1.backward(&d);
        if let Some((tap, 2)) = cip {
            add_tap(&mut d, tap, self.tap_shape);
        }
        let mut dx = self.conv_block.backward(&d);
        if let Some((tap, 1)) = cip {
            add_tap(&mut dx, tap, self.tap_shape);
        }
        dx
    }

    fn zero_grad(&mut self) {
        self.conv_block.zero_grad();
        for blk in self.rb1.iter_mut().chain(self.rb2.iter_mut()) {
            blk.zero_grad();
        }
    }

    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [S], &mut [S])) {
        self.conv_block.for_each_param(f);
        for blk in self.rb1.iter_mut().chain(self.rb2.iter_mut()) {
            blk.for_each_param(f);
        }
    }

    fn for_each_state(&mut self, f: &mut dyn FnMut(&mut [S])) {
        self.conv_block.for_each_state(f);
        for blk in self.rb1.iter_mut().chain(self.rb2.iter_mut()) {
            blk.for_each_state(f);
        }
    }

    pub fn kernel_weight_count(&self) -> usize {
        self.conv_block.kernel_weight_count()
            + self.rb1.iter().map(Bottleneck::kernel_weight_count).sum::<usize>()
            + self.rb2.iter().map(Bottleneck::kernel_weight_count).sum::<usize>()
    }
}

pub struct DbResNet<S: Scalar> {
    pub config: NetworkConfig,
    pub branch_a: Branch<S>,
    pub branch_b: Branch<S>,
    pub cip: Option<CipTap>,
    pub head: Linear<S>,
    last_n: usize,
}

impl<S: Scalar> DbResNet<S> {
    /// Builds and initializes the network from one seeded parameter stream:
    /// first branch, second branch, head, in construction order.
    pub fn new(config: &NetworkConfig) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let s = config.scaled();
        let repeats = config.depth_variant.repeats();
        let branch_a = Branch::new(config.input_channels, &s, repeats, &mut rng);
        let branch_b = Branch::new(config.input_channels, &s, repeats, &mut rng);
        let head = Linear::new(config.feature_dim(), 2, &mut rng);
        Ok(DbResNet {
            cip: config.cip_placement.map(|_| CipTap::new(config.cip_kernels.clone())),
            config: config.clone(),
            branch_a,
            branch_b,
            head,
            last_n: 0,
        })
    }

    fn validate_input(&self, t: &Tensor<S>, which: &str) -> Result<(), NetError> {
        if t.n == 0 {
            return Err(NetError::InvalidArgument(format!("{which} batch is empty")));
        }
        let want = (self.config.input_channels, self.config.input_size);
        if t.c != want.0 || t.h != want.1 || t.w != want.1 {
            return Err(NetError::InvalidArgument(format!(
                "{which} input {}x{}x{} does not match configured {}x{}x{}",
                t.c, t.h, t.w, want.0, want.1, want.1
            )));
        }
        Ok(())
    }

    fn cip_spec(cip: &Option<CipTap>, placement: Option<u8>) -> Option<(&CipTap, u8)> {
        match (cip, placement) {
            (Some(tap), Some(p)) => Some((tap, p)),
            _ => None,
        }
    }

    /// Runs both branches and the head. Returns `(head input rows, class
    /// probability rows)`, each row-major with `n` rows. Head input layout
    /// per row: branch A pooled, branch A intensity, branch B pooled,
    /// branch B intensity.
    pub fn forward_features(&mut self, a: &Tensor<S>, b: &Tensor<S>, train: bool) -> Result<(Vec<S>, Vec<S>), NetError> {
        self.validate_input(a, "multi-view")?;
        self.validate_input(b, "multi-scale")?;
        if a.n != b.n {
            return Err(NetError::InvalidArgument(format!(
                "branch batches disagree: {} vs {}",
                a.n, b.n
            )));
        }
        let n = a.n;
        let spec = Self::cip_spec(&self.cip, self.config.cip_placement);
        let (gap_a, cip_a) = self.branch_a.forward(a, train, spec);
        let (gap_b, cip_b) = self.branch_b.forward(b, train, spec);
        let c = self.branch_a.out_channels;
        let cl = cip_a.len() / n;
        let fd = self.config.feature_dim();
        debug_assert_eq!(2 * c + 2 * cl, fd);
        let mut rows = vec![S::zero(); n * fd];
        for s in 0..n {
            let row = &mut rows[s * fd..(s + 1) * fd];
            row[..c].copy_from_slice(&gap_a[s * c..(s + 1) * c]);
            row[c..c + cl].copy_from_slice(&cip_a[s * cl..(s + 1) * cl]);
            row[c + cl..2 * c + cl].copy_from_slice(&gap_b[s * c..(s + 1) * c]);
            row[2 * c + cl..].copy_from_slice(&cip_b[s * cl..(s + 1) * cl]);
        }
        let logits = self.head.forward(&rows, n, train);
        let probs = softmax_rows(&logits, 2);
        self.last_n = n;
        Ok((rows, probs))
    }

    /// Class probabilities, `n x 2` row-major: `[background, nodule]`.
    pub fn forward(&mut self, a: &Tensor<S>, b: &Tensor<S>, train: bool) -> Result<Vec<S>, NetError> {
        Ok(self.forward_features(a, b, train)?.1)
    }

    /// Backpropagates a logit gradient from the most recent train-mode
    /// forward pass, accumulating parameter gradients.
    pub fn backward(&mut self, dlogits: &[S]) {
        let n = self.last_n;
        assert_eq!(dlogits.len(), n * 2, "logit gradient shape");
        let dfeat = self.head.backward(dlogits);
        let c = self.branch_a.out_channels;
        let fd = self.config.feature_dim();
        let cl = (fd - 2 * c) / 2;
        let mut dgap_a = vec![S::zero(); n * c];
        let mut dcip_a = vec![S::zero(); n * cl];
        let mut dgap_b = vec![S::zero(); n * c];
        let mut dcip_b = vec![S::zero(); n * cl];
        for s in 0..n {
            let row = &dfeat[s * fd..(s + 1) * fd];
            dgap_a[s * c..(s + 1) * c].copy_from_slice(&row[..c]);
            dcip_a[s * cl..(s + 1) * cl].copy_from_slice(&row[c..c + cl]);
            dgap_b[s * c..(s + 1) * c].copy_from_slice(&row[c + cl..2 * c + cl]);
            dcip_b[s * cl..(s + 1) * cl].copy_from_slice(&row[2 * c + cl..]);
        }
        let spec = Self::cip_spec(&self.cip, self.config.cip_placement);
        self.branch_a.backward(&dgap_a, &dcip_a, n, spec);
        self.branch_b.backward(&dgap_b, &dcip_b, n, spec);
    }

    pub fn zero_grad(&mut self) {
        self.branch_a.zero_grad();
        self.branch_b.zero_grad();
        self.head.zero_grad();
    }

    /// Visits every trainable parameter slice with its gradient slice, in a
    /// fixed traversal order (branch A, branch B, head). Checkpoints and the
    /// optimizer both rely on this order.
    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [S], &mut [S])) {
        self.branch_a.for_each_param(f);
        self.branch_b.for_each_param(f);
        self.head.for_each_param(f);
    }

    /// Visits batch norm running statistics in the same traversal order.
    pub fn for_each_state(&mut self, f: &mut dyn FnMut(&mut [S])) {
        self.branch_a.for_each_state(f);
        self.branch_b.for_each_state(f);
    }

    pub fn actual_param_count(&mut self) -> usize {
        let mut total = 0;
        self.for_each_param(&mut |p, _| total += p.len());
        total
    }

    pub fn actual_state_count(&mut self) -> usize {
        let mut total = 0;
        self.for_each_state(&mut |s| total += s.len());
        total
    }

    /// Runs a zero sample through one branch and reports the three stage
    /// output dims as `(channels, h, w)`.
    pub fn probe_stage_dims(&mut self) -> [(usize, usize, usize); 3] {
        let x = Tensor::zeros(1, self.config.input_channels, self.config.input_size, self.config.input_size);
        let stem = self.branch_a.conv_block.forward(&x, false);
        let stem_dims = (stem.c, stem.h, stem.w);
        let mut cur = self.branch_a.pool1.forward(&stem, false);
        for blk in &mut self.branch_a.rb1 {
            cur = blk.forward(&cur, false);
        }
        let r1_dims = (cur.c, cur.h, cur.w);
        let mut cur = self.branch_a.pool2.forward(&cur, false);
        for blk in &mut self.branch_a.rb2 {
            cur = blk.forward(&cur, false);
        }
        [stem_dims, r1_dims, (cur.c, cur.h, cur.w)]
    }
}

/// Row-wise softmax with the usual max-shift for stability.
pub fn softmax_rows<S: Scalar>(logits: &[S], classes: usize) -> Vec<S> {
    assert!(classes > 0 && logits.len() % classes == 0, "logit shape");
    let mut out = vec![S::zero(); logits.len()];
    for row in 0..logits.len() / classes {
        let src = &logits[row * classes..(row + 1) * classes];
        let mut m = src[0];
        for &v in &src[1..] {
            if v > m {
                m = v;
            }
        }
        let dst = &mut out[row * classes..(row + 1) * classes];
        let mut sum = S::zero();
        for (d, &v) in dst.iter_mut().zip(src.iter()) {
            *d = (v - m).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

pub const CHECKPOINT_FORMAT: &str = "dbres-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Sidecar metadata stored as JSON next to the raw little-endian payload.
/// The payload holds every trainable parameter in traversal order followed
/// by every batch norm running statistic.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_metric: Option<f64>,
    pub config: NetworkConfig,
    pub config_hash: String,
    pub param_count: usize,
    pub state_count: usize,
    pub payload: String,
}

fn checkpoint_payload_path(path: &Path) -> Result<(PathBuf, String), NetError> {
    let name = path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| NetError::Checkpoint(format!("bad checkpoint path {}", path.display())))?;
    let stem = name.strip_suffix(".json").ok_or_else(|| {
        NetError::Checkpoint(format!("checkpoint path must end in .json, got {name}"))
    })?;
    let raw = format!("{stem}.raw");
    Ok((path.with_file_name(&raw), raw))
}

pub fn save_checkpoint<S: Scalar>(
    net: &mut DbResNet<S>,
    epoch: usize,
    val_metric: Option<f64>,
    path: &Path,
) -> Result<CheckpointMeta, NetError> {
    let (raw_path, raw_name) = checkpoint_payload_path(path)?;
    let param_count = net.config.param_count();
    let state_count = net.config.state_count();
    let mut bytes = Vec::with_capacity((param_count + state_count) * S::BYTES);
    net.for_each_param(&mut |p, _| {
        for &v in p.iter() {
            v.write_le(&mut bytes);
        }
    });
    net.for_each_state(&mut |s| {
        for &v in s.iter() {
            v.write_le(&mut bytes);
        }
    });
    debug_assert_eq!(bytes.len(), (param_count + state_count) * S::BYTES);
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        dtype: S::DTYPE.into(),
        epoch,
        val_metric,
        config: net.config.clone(),
        config_hash: net.config.config_hash(),
        param_count,
        state_count,
        payload: raw_name,
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| NetError::Checkpoint(format!("serialize metadata: {e}")))?;
    std::fs::write(path, json + "\n").map_err(io_err(path))?;
    std::fs::write(&raw_path, &bytes).map_err(io_err(&raw_path))?;
    Ok(meta)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(DbResNet<S>, CheckpointMeta), NetError> {
    let json = std::fs::read_to_string(path).map_err(io_err(path))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&json).map_err(|e| NetError::Checkpoint(format!("parse metadata: {e}")))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(NetError::Checkpoint(format!("unexpected format {:?}", meta.format)));
    }
    if meta.version != CHECKPOINT_VERSION {
        return Err(NetError::Checkpoint(format!("unsupported version {}", meta.version)));
    }
    if meta.dtype != S::DTYPE {
        return Err(NetError::Checkpoint(format!(
            "dtype mismatch: checkpoint holds {}, caller expects {}",
            meta.dtype,
            S::DTYPE
        )));
    }
    meta.config.validate()?;
    if meta.config_hash != meta.config.config_hash() {
        return Err(NetError::Checkpoint("config hash does not match embedded config".into()));
    }
    let param_count = meta.config.param_count();
    let state_count = meta.config.state_count();
    if meta.param_count != param_count || meta.state_count != state_count {
        return Err(NetError::Checkpoint(format!(
            "declared counts {}/{} do not match config-derived {param_count}/{state_count}",
            meta.param_count, meta.state_count
        )));
    }
    let raw_path = path.with_file_name(&meta.payload);
    let bytes = std::fs::read(&raw_path).map_err(io_err(&raw_path))?;
    let want = (param_count + state_count) * S::BYTES;
    if bytes.len() != want {
        return Err(NetError::Checkpoint(format!(
            "payload holds {} bytes, expected {want}",
            bytes.len()
        )));
    }
    let mut net = DbResNet::<S>::new(&meta.config)?;
    let mut off = 0usize;
    net.for_each_param(&mut |p, _| {
        for v in p.iter_mut() {
            *v = S::read_le(&bytes[off..off + S::BYTES]);
            off += S::BYTES;
        }
    });
    net.for_each_state(&mut |s| {
        for v in s.iter_mut() {
            *v = S::read_le(&bytes[off..off + S::BYTES]);
            off += S::BYTES;
        }
    });
    Ok((net, meta))
}
