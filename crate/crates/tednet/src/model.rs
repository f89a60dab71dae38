//! The trellis encoder-decoder network: multi-scale encoding stages, the
//! triangular grid of decoding blocks, intermediate supervision heads, and
//! the up-sampling block, with a hand-written backward pass.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::io::{read_ted1, write_ted1};
use crate::tensor::{
    avgpool, concat_many, conv2d, conv2d_backward, deconv2d, deconv2d_backward, maxpool2,
    maxpool2_backward, relu, relu_backward, split_channels, upsample_nearest,
    upsample_nearest_backward, ConvSpec, Tensor4,
};
use crate::{Error, Result};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrellisConfig {
    /// Channel width of encoder stage 2; stages follow (c, c, 2c, 4c, 8c).
    pub base_channels: usize,
    /// Encoding blocks per stage; must sum to 9.
    pub blocks_per_stage: [usize; 5],
    /// Kernel sizes of the parallel branches inside an encoding block.
    pub branch_kernels: Vec<usize>,
    /// Number of max-pool abstraction levels in SAL.
    pub sal_levels: usize,
    /// Balance factor between SAL and SCL in the combinatorial loss.
    pub lambda: f64,
    /// The network regresses `output_scale` times the density; predictions
    /// are divided back down. Density values are ~1e-3 per pixel, far below
    /// the parameter jitter an adaptive optimizer induces at practical
    /// learning rates, so training against the raw scale cannot settle.
    pub output_scale: f64,
    /// Ablation: replace the trellis with a single decoding chain from E5.
    pub single_path: bool,
}

impl Default for TrellisConfig {
    fn default() -> Self {
        TrellisConfig {
            base_channels: 32,
            blocks_per_stage: [1, 2, 2, 2, 2],
            branch_kernels: vec![1, 3, 5, 7],
            sal_levels: 3,
            lambda: 1.0,
            output_scale: 100.0,
            single_path: false,
        }
    }
}

impl TrellisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks_per_stage.iter().sum::<usize>() != 9 {
            return Err(Error::Config(format!(
                "blocks_per_stage must sum to 9, got {:?}",
                self.blocks_per_stage
            )));
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be >= 1".into()));
        }
        if self.branch_kernels.is_empty() || self.branch_kernels.iter().any(|&k| k % 2 == 0) {
            return Err(Error::Config(format!(
                "branch kernels must be odd and nonempty, got {:?}",
                self.branch_kernels
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if !(self.output_scale > 0.0) {
            return Err(Error::Config("output_scale must be > 0".into()));
        }
        Ok(())
    }

    /// Output channels of the five encoding stages.
    pub fn stage_channels(&self) -> [usize; 5] {
        let c = self.base_channels;
        [c, c, 2 * c, 4 * c, 8 * c]
    }
}

/// One convolution (or transposed convolution) layer's parameters.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: Tensor4,
    pub b: Vec<f64>,
    pub spec: ConvSpec,
}

/// Per-layer gradients keyed by parameter path.
#[derive(Clone, Debug, Default)]
pub struct GradMap {
    pub entries: BTreeMap<String, (Tensor4, Vec<f64>)>,
}

impl GradMap {
    fn insert(&mut self, path: &str, gw: Tensor4, gb: Vec<f64>) {
        match self.entries.get_mut(path) {
            Some((w, b)) => {
                w.add_assign(&gw).expect("grad shape");
                for (a, g) in b.iter_mut().zip(&gb) {
                    *a += *g;
                }
            }
            None => {
                self.entries.insert(path.to_string(), (gw, gb));
            }
        }
    }

    /// Ordered element-wise sum with another gradient map.
    pub fn add(&mut self, other: &GradMap) -> Result<()> {
        for (k, (gw, gb)) in &other.entries {
            match self.entries.get_mut(k) {
                Some((w, b)) => {
                    w.add_assign(gw)?;
                    for (a, g) in b.iter_mut().zip(gb) {
                        *a += *g;
                    }
                }
                None => {
                    self.entries.insert(k.clone(), (gw.clone(), gb.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for (gw, gb) in self.entries.values_mut() {
            gw.scale(s);
            for b in gb.iter_mut() {
                *b *= s;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for (gw, gb) in self.entries.values() {
            m = m.max(gw.max_abs());
            for &b in gb {
                m = m.max(b.abs());
            }
        }
        m
    }
}

// ---------------------------------------------------------------------------
// conv + relu building blocks with caches for backward

#[derive(Clone, Debug)]
struct CCache {
    x: Tensor4,
    pre: Tensor4,
}

fn conv_relu_fwd(l: &Conv, x: &Tensor4) -> Result<(Tensor4, CCache)> {
    let pre = conv2d(x, &l.w, &l.b, &l.spec)?;
    let y = relu(&pre);
    Ok((
        y,
        CCache {
            x: x.clone(),
            pre,
        },
    ))
}

fn conv_relu_bwd(l: &Conv, cc: &CCache, gy: &Tensor4) -> Result<(Tensor4, Tensor4, Vec<f64>)> {
    let gpre = relu_backward(gy, &cc.pre)?;
    conv2d_backward(&cc.x, &l.w, &l.spec, &gpre)
}

fn deconv_relu_fwd(l: &Conv, x: &Tensor4) -> Result<(Tensor4, CCache)> {
    let pre = deconv2d(x, &l.w, &l.b, &l.spec)?;
    let y = relu(&pre);
    Ok((
        y,
        CCache {
            x: x.clone(),
            pre,
        },
    ))
}

fn deconv_relu_bwd(l: &Conv, cc: &CCache, gy: &Tensor4) -> Result<(Tensor4, Tensor4, Vec<f64>)> {
    let gpre = relu_backward(gy, &cc.pre)?;
    deconv2d_backward(&cc.x, &l.w, &l.spec, &gpre)
}

// ---------------------------------------------------------------------------
// encoding block

#[derive(Clone, Debug)]
struct EncBlock {
    branches: Vec<Conv>,
    fuse: Conv,
    branch_c: usize,
}

#[derive(Clone, Debug)]
struct EncBlockCache {
    branches: Vec<CCache>,
    fuse: CCache,
}

impl EncBlock {
    fn forward(&self, x: &Tensor4) -> Result<(Tensor4, EncBlockCache)> {
        let mut outs = Vec::with_capacity(self.branches.len());
        let mut caches = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let (y, cc) = conv_relu_fwd(b, x)?;
            outs.push(y);
            caches.push(cc);
        }
        let cat = concat_many(&outs.iter().collect::<Vec<_>>())?;
        let (y, fuse_cc) = conv_relu_fwd(&self.fuse, &cat)?;
        Ok((
            y,
            EncBlockCache {
                branches: caches,
                fuse: fuse_cc,
            },
        ))
    }

    fn backward(
        &self,
        cache: &EncBlockCache,
        gy: &Tensor4,
        path: &str,
        grads: &mut GradMap,
    ) -> Result<Tensor4> {
        let (g_cat, gw, gb) = conv_relu_bwd(&self.fuse, &cache.fuse, gy)?;
        grads.insert(&format!("{}.fuse", path), gw, gb);
        let sizes = vec![self.branch_c; self.branches.len()];
        let parts = split_channels(&g_cat, &sizes)?;
        let mut gx: Option<Tensor4> = None;
        for ((b, cc), g) in self.branches.iter().zip(&cache.branches).zip(&parts) {
            let (gxi, gw, gb) = conv_relu_bwd(b, cc, g)?;
            grads.insert(&format!("{}.k{}", path, b.spec.kernel.0), gw, gb);
            match &mut gx {
                Some(acc) => acc.add_assign(&gxi)?,
                None => gx = Some(gxi),
            }
        }
        Ok(gx.expect("at least one branch"))
    }
}

// ---------------------------------------------------------------------------
// decoding block

#[derive(Clone, Debug)]
struct DecCell {
    /// 1x1 conv on the left (skip) input; absent in single-path mode.
    f1: Option<Conv>,
    /// 3x3 transposed conv on the right input, halving its channels.
    f2: Conv,
    /// 1x1 fuse conv down to the left channel count.
    f3: Conv,
}

#[derive(Clone, Debug)]
struct DecCellCache {
    f1: Option<CCache>,
    f2: CCache,
    f3: CCache,
    left_c: usize,
}

impl DecCell {
    fn forward(
        &self,
        left: Option<&Tensor4>,
        right: &Tensor4,
        key: &str,
    ) -> Result<(Tensor4, DecCellCache)> {
        if let Some(left) = left {
            if right.c() != 2 * left.c() {
                return Err(Error::Shape(format!(
                    "decoding cell {}: right channels {} != 2 x left channels {}",
                    key,
                    right.c(),
                    left.c()
                )));
            }
        }
        let (a2, c2) = deconv_relu_fwd(&self.f2, right)?;
        match (&self.f1, left) {
            (Some(f1), Some(left)) => {
                let (a1, c1) = conv_relu_fwd(f1, left)?;
                let cat = concat_many(&[&a1, &a2])?;
                let (y, c3) = conv_relu_fwd(&self.f3, &cat)?;
                Ok((
                    y,
                    DecCellCache {
                        f1: Some(c1),
                        f2: c2,
                        f3: c3,
                        left_c: left.c(),
                    },
                ))
            }
            (None, None) => {
                let (y, c3) = conv_relu_fwd(&self.f3, &a2)?;
                Ok((
                    y,
                    DecCellCache {
                        f1: None,
                        f2: c2,
                        f3: c3,
                        left_c: 0,
                    },
                ))
            }
            _ => Err(Error::Config(format!(
                "decoding cell {}: left input presence does not match configuration",
                key
            ))),
        }
    }

    /// Returns (grad_left, grad_right).
    fn backward(
        &self,
        cache: &DecCellCache,
        gy: &Tensor4,
        path: &str,
        grads: &mut GradMap,
    ) -> Result<(Option<Tensor4>, Tensor4)> {
        let (g_cat, gw3, gb3) = conv_relu_bwd(&self.f3, &cache.f3, gy)?;
        grads.insert(&format!("{}.f3", path), gw3, gb3);
        match (&self.f1, &cache.f1) {
            (Some(f1), Some(c1)) => {
                let parts = split_channels(&g_cat, &[cache.left_c, cache.left_c])?;
                let (g_left, gw1, gb1) = conv_relu_bwd(f1, c1, &parts[0])?;
                grads.insert(&format!("{}.f1", path), gw1, gb1);
                let (g_right, gw2, gb2) = deconv_relu_bwd(&self.f2, &cache.f2, &parts[1])?;
                grads.insert(&format!("{}.f2", path), gw2, gb2);
                Ok((Some(g_left), g_right))
            }
            _ => {
                let (g_right, gw2, gb2) = deconv_relu_bwd(&self.f2, &cache.f2, &g_cat)?;
                grads.insert(&format!("{}.f2", path), gw2, gb2);
                Ok((None, g_right))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// the network

/// All four density-map outputs of one forward pass. Intermediate heads are
/// absent in single-path mode.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub z2d: Option<Tensor4>,
    pub z3d: Option<Tensor4>,
    pub z4d: Option<Tensor4>,
    /// Full-resolution density map; same spatial size as the input image.
    pub z: Tensor4,
}

/// Upstream gradients per supervised head; `None` means zero.
#[derive(Clone, Debug, Default)]
pub struct HeadGrads {
    pub g2d: Option<Tensor4>,
    pub g3d: Option<Tensor4>,
    pub g4d: Option<Tensor4>,
    pub g: Option<Tensor4>,
}

#[derive(Clone, Debug)]
struct EncoderCache {
    blocks: Vec<Vec<EncBlockCache>>,
    pool1_idx: Vec<usize>,
    pool1_shape: (usize, usize, usize, usize),
    pool2_idx: Vec<usize>,
    pool2_shape: (usize, usize, usize, usize),
}

/// Cached activations from one forward pass, consumed by `backward`.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    enc: EncoderCache,
    cells: Vec<DecCellCache>,
    head2: Option<CCache>,
    head3: Option<CCache>,
    head4: Option<CCache>,
    up1: CCache,
    up2: CCache,
    head_full: CCache,
}

/// The assembled network. Parameter paths are stable and ordered:
/// `enc.s{stage}.b{block}.{k<size>|fuse}`, `dec.{i}_{j}.{f1|f2|f3}`,
/// `up.{1|2}`, `head.{2d|3d|4d|full}`.
#[derive(Clone, Debug)]
pub struct TedNet {
    pub cfg: TrellisConfig,
    enc: Vec<Vec<EncBlock>>,
    cells: Vec<(String, DecCell)>,
    head2: Option<Conv>,
    head3: Option<Conv>,
    head4: Option<Conv>,
    up1: Conv,
    up2: Conv,
    head_full: Conv,
}

fn branch_out_channels(out_ch: usize, n_branches: usize) -> Result<usize> {
    if out_ch % n_branches == 0 {
        Ok(out_ch / n_branches)
    } else if out_ch < n_branches {
        // tiny test configs (c=2) cannot split evenly; one channel per branch
        Ok(1)
    } else {
        Err(Error::Config(format!(
            "encoding block out_ch {} not divisible by {} branches",
            out_ch, n_branches
        )))
    }
}

impl TedNet {
    /// Builds the network, drawing every conv through `init`.
    fn build(cfg: TrellisConfig, init: &mut dyn FnMut(ConvSpec, bool) -> Conv) -> Result<TedNet> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let stage_ch = cfg.stage_channels();
        let total_blocks: usize = cfg.blocks_per_stage.iter().sum();

        let mut enc = Vec::with_capacity(5);
        let mut in_ch = 3usize;
        let mut flat_idx = 0usize;
        for (s, &nblocks) in cfg.blocks_per_stage.iter().enumerate() {
            let out_ch = stage_ch[s];
            let mut stage = Vec::with_capacity(nblocks);
            for _ in 0..nblocks {
                // dilation 2 and 4 on the last two encoding blocks overall
                let dilation = if flat_idx == total_blocks - 2 {
                    2
                } else if flat_idx == total_blocks - 1 {
                    4
                } else {
                    1
                };
                let bc = branch_out_channels(out_ch, cfg.branch_kernels.len())?;
                let branches = cfg
                    .branch_kernels
                    .iter()
                    .map(|&k| {
                        let d = if k == 1 { 1 } else { dilation };
                        init(ConvSpec::same_dilated(k, d, in_ch, bc), false)
                    })
                    .collect::<Vec<_>>();
                let fuse = init(ConvSpec::same(1, bc * cfg.branch_kernels.len(), out_ch), false);
                stage.push(EncBlock {
                    branches,
                    fuse,
                    branch_c: bc,
                });
                in_ch = out_ch;
                flat_idx += 1;
            }
            enc.push(stage);
        }

        let mut cells = Vec::new();
        if cfg.single_path {
            // chain E5 -> ... -> Z_{4,4}, halving channels at each cell
            let mut ch = 8 * c;
            for key in ["2_4", "3_4", "4_4"] {
                let half = ch / 2;
                cells.push((
                    key.to_string(),
                    DecCell {
                        f1: None,
                        f2: init(ConvSpec::same(3, half, ch), true),
                        f3: init(ConvSpec::same(1, half, half), false),
                    },
                ));
                ch = half;
            }
        } else {
            // triangular trellis; cell (i,j) fuses left Z_{i-1,j-1} and right Z_{i-1,j}
            let seed_ch = [c, 2 * c, 4 * c, 8 * c];
            let mut grid_ch: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            for (j, &ch) in seed_ch.iter().enumerate() {
                grid_ch.insert((1, j + 1), ch);
            }
            for (i, j) in [(2, 2), (2, 3), (2, 4), (3, 3), (3, 4), (4, 4)] {
                let left = grid_ch[&(i - 1, j - 1)];
                let right = grid_ch[&(i - 1, j)];
                debug_assert_eq!(right, 2 * left);
                cells.push((
                    format!("{}_{}", i, j),
                    DecCell {
                        f1: Some(init(ConvSpec::same(1, left, left), false)),
                        f2: init(ConvSpec::same(3, left, right), true),
                        f3: init(ConvSpec::same(1, 2 * left, left), false),
                    },
                ));
                grid_ch.insert((i, j), left);
            }
        }

        let up_mid = (c / 2).max(1);
        let up_out = (c / 4).max(1);
        let up1 = init(ConvSpec::same(3, c, up_mid), false);
        let up2 = init(ConvSpec::same(3, up_mid, up_out), false);
        let (head2, head3, head4) = if cfg.single_path {
            (None, None, None)
        } else {
            (
                Some(init(ConvSpec::same(1, c, 1), false)),
                Some(init(ConvSpec::same(1, c, 1), false)),
                Some(init(ConvSpec::same(1, c, 1), false)),
            )
        };
        let head_full = init(ConvSpec::same(1, up_out, 1), false);

        Ok(TedNet {
            cfg,
            enc,
            cells,
            head2,
            head3,
            head4,
            up1,
            up2,
            head_full,
        })
    }

    /// Xavier-uniform initialization, fully determined by the seed.
    pub fn xavier_init(cfg: TrellisConfig, seed: u64) -> Result<TedNet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(cfg, &mut |spec, transposed| {
            let fan_in = spec.in_ch * spec.kernel.0 * spec.kernel.1;
            let fan_out = spec.out_ch * spec.kernel.0 * spec.kernel.1;
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let len = spec.out_ch * spec.in_ch * spec.kernel.0 * spec.kernel.1;
            let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-a..a)).collect();
            // a transposed conv produces spec.in_ch channels
            let bias_len = if transposed { spec.in_ch } else { spec.out_ch };
            // Small positive biases keep every ReLU in its active region at
            // initialization. With zero biases some seeds start with a head's
            // pre-activation entirely negative, which a ReLU turns into a
            // permanently dead (zero-gradient) output.
            Conv {
                w: Tensor4::from_vec(spec.out_ch, spec.in_ch, spec.kernel.0, spec.kernel.1, data)
                    .expect("weight shape"),
                b: vec![0.05; bias_len],
                spec,
            }
        })
    }

    /// All-zero parameters (used as a shell when loading checkpoints).
    pub fn zeros(cfg: TrellisConfig) -> Result<TedNet> {
        Self::build(cfg, &mut |spec, transposed| Conv {
            w: Tensor4::zeros(spec.out_ch, spec.in_ch, spec.kernel.0, spec.kernel.1)
                .expect("weight shape"),
            b: vec![0.0; if transposed { spec.in_ch } else { spec.out_ch }],
            spec,
        })
    }

    pub fn for_each_param<F: FnMut(&str, &Conv)>(&self, mut f: F) {
        for (s, stage) in self.enc.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                for br in &block.branches {
                    f(&format!("enc.s{}.b{}.k{}", s + 1, b, br.spec.kernel.0), br);
                }
                f(&format!("enc.s{}.b{}.fuse", s + 1, b), &block.fuse);
            }
        }
        for (key, cell) in &self.cells {
            if let Some(f1) = &cell.f1 {
                f(&format!("dec.{}.f1", key), f1);
            }
            f(&format!("dec.{}.f2", key), &cell.f2);
            f(&format!("dec.{}.f3", key), &cell.f3);
        }
        f("up.1", &self.up1);
        f("up.2", &self.up2);
        if let Some(h) = &self.head2 {
            f("head.2d", h);
        }
        if let Some(h) = &self.head3 {
            f("head.3d", h);
        }
        if let Some(h) = &self.head4 {
            f("head.4d", h);
        }
        f("head.full", &self.head_full);
    }

    pub fn for_each_param_mut<F: FnMut(&str, &mut Conv)>(&mut self, mut f: F) {
        for (s, stage) in self.enc.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                for br in &mut block.branches {
                    let name = format!("enc.s{}.b{}.k{}", s + 1, b, br.spec.kernel.0);
                    f(&name, br);
                }
                f(&format!("enc.s{}.b{}.fuse", s + 1, b), &mut block.fuse);
            }
        }
        for (key, cell) in &mut self.cells {
            if let Some(f1) = &mut cell.f1 {
                f(&format!("dec.{}.f1", key), f1);
            }
            f(&format!("dec.{}.f2", key), &mut cell.f2);
            f(&format!("dec.{}.f3", key), &mut cell.f3);
        }
        f("up.1", &mut self.up1);
        f("up.2", &mut self.up2);
        if let Some(h) = &mut self.head2 {
            f("head.2d", h);
        }
        if let Some(h) = &mut self.head3 {
            f("head.3d", h);
        }
        if let Some(h) = &mut self.head4 {
            f("head.4d", h);
        }
        f("head.full", &mut self.head_full);
    }

    /// (cell key, left channels, right channels) for every decoding cell,
    /// read back from the constructed layer specs. In single-path mode the
    /// left channel count is 0.
    pub fn cell_channels(&self) -> Vec<(String, usize, usize)> {
        self.cells
            .iter()
            .map(|(k, cell)| {
                let left = if cell.f1.is_some() {
                    cell.f2.spec.in_ch
                } else {
                    0
                };
                (k.clone(), left, cell.f2.spec.out_ch)
            })
            .collect()
    }

    /// Total number of learnable scalars (weights + biases).
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, conv| n += conv.w.len() + conv.b.len());
        n
    }

    /// Flattens all parameters in path order (for finite-difference checks).
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each_param(|_, conv| {
            out.extend_from_slice(conv.w.data());
            out.extend_from_slice(&conv.b);
        });
        out
    }

    pub fn set_params_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat param length {} != {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut pos = 0;
        self.for_each_param_mut(|_, conv| {
            let wl = conv.w.len();
            conv.w.data_mut().copy_from_slice(&flat[pos..pos + wl]);
            pos += wl;
            let bl = conv.b.len();
            conv.b.copy_from_slice(&flat[pos..pos + bl]);
            pos += bl;
        });
        Ok(())
    }

    /// Flattens a gradient map in the same order as `flatten_params`.
    pub fn flatten_grads(&self, grads: &GradMap) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each_param(|path, conv| match grads.entries.get(path) {
            Some((gw, gb)) => {
                out.extend_from_slice(gw.data());
                out.extend_from_slice(gb);
            }
            None => {
                out.extend(std::iter::repeat(0.0).take(conv.w.len() + conv.b.len()));
            }
        });
        out
    }

    fn encoder_stage_forward(
        &self,
        stage: usize,
        x: &Tensor4,
    ) -> Result<(Tensor4, Vec<EncBlockCache>)> {
        let mut cur = x.clone();
        let mut caches = Vec::new();
        for block in &self.enc[stage] {
            let (y, cc) = block.forward(&cur)?;
            cur = y;
            caches.push(cc);
        }
        Ok((cur, caches))
    }

    fn encoder_stage_backward(
        &self,
        stage: usize,
        caches: &[EncBlockCache],
        gy: &Tensor4,
        grads: &mut GradMap,
    ) -> Result<Tensor4> {
        let mut g = gy.clone();
        for (b, block) in self.enc[stage].iter().enumerate().rev() {
            g = block.backward(&caches[b], &g, &format!("enc.s{}.b{}", stage + 1, b), grads)?;
        }
        Ok(g)
    }

    /// Runs the five encoding stages. E2 is taken after the second pooling;
    /// E2..E5 sit at 1/4 input resolution with channels (c, 2c, 4c, 8c).
    fn encoder_forward(&self, image: &Tensor4) -> Result<([Tensor4; 4], EncoderCache)> {
        if image.c() != 3 {
            return Err(Error::Shape(format!(
                "encoder expects 3 input channels, got {}",
                image.c()
            )));
        }
        if image.h() % 4 != 0 || image.w() % 4 != 0 {
            return Err(Error::Shape(format!(
                "input {}x{} not divisible by 4",
                image.h(),
                image.w()
            )));
        }
        let (s1, c1) = self.encoder_stage_forward(0, image)?;
        let pool1_shape = s1.shape();
        let (p1, pool1_idx) = maxpool2(&s1)?;
        let (s2, c2) = self.encoder_stage_forward(1, &p1)?;
        let pool2_shape = s2.shape();
        let (e2, pool2_idx) = maxpool2(&s2)?;
        let (e3, c3) = self.encoder_stage_forward(2, &e2)?;
        let (e4, c4) = self.encoder_stage_forward(3, &e3)?;
        let (e5, c5) = self.encoder_stage_forward(4, &e4)?;
        Ok((
            [e2, e3, e4, e5],
            EncoderCache {
                blocks: vec![c1, c2, c3, c4, c5],
                pool1_idx,
                pool1_shape,
                pool2_idx,
                pool2_shape,
            },
        ))
    }

    fn encoder_backward(
        &self,
        cache: &EncoderCache,
        g_e: [Option<Tensor4>; 4],
        grads: &mut GradMap,
    ) -> Result<()> {
        let [g_e2, g_e3, g_e4, g_e5] = g_e;
        let mut g = match g_e5 {
            Some(g) => g,
            None => return Ok(()), // E5 always feeds the trellis
        };
        g = self.encoder_stage_backward(4, &cache.blocks[4], &g, grads)?;
        if let Some(x) = g_e4 {
            g.add_assign(&x)?;
        }
        g = self.encoder_stage_backward(3, &cache.blocks[3], &g, grads)?;
        if let Some(x) = g_e3 {
            g.add_assign(&x)?;
        }
        g = self.encoder_stage_backward(2, &cache.blocks[2], &g, grads)?;
        if let Some(x) = g_e2 {
            g.add_assign(&x)?;
        }
        g = maxpool2_backward(&g, &cache.pool2_idx, cache.pool2_shape)?;
        g = self.encoder_stage_backward(1, &cache.blocks[1], &g, grads)?;
        g = maxpool2_backward(&g, &cache.pool1_idx, cache.pool1_shape)?;
        let _g_image = self.encoder_stage_backward(0, &cache.blocks[0], &g, grads)?;
        Ok(())
    }

    /// Full forward pass: all supervised density maps plus the activation
    /// cache for `backward`.
    pub fn forward(&self, image: &Tensor4) -> Result<(ForwardOutputs, ForwardCache)> {
        let ([e2, e3, e4, e5], enc_cache) = self.encoder_forward(image)?;

        let mut grid: BTreeMap<&str, Tensor4> = BTreeMap::new();
        let mut cell_caches = Vec::with_capacity(self.cells.len());
        if self.cfg.single_path {
            let mut cur = e5;
            for (key, cell) in &self.cells {
                let (y, cc) = cell.forward(None, &cur, key)?;
                cell_caches.push(cc);
                cur = y;
            }
            grid.insert("4_4", cur);
        } else {
            let seeds: [(&str, &Tensor4); 4] =
                [("1_1", &e2), ("1_2", &e3), ("1_3", &e4), ("1_4", &e5)];
            for (k, v) in seeds {
                grid.insert(k, v.clone());
            }
            let edges: [(&str, &str, &str); 6] = [
                ("2_2", "1_1", "1_2"),
                ("2_3", "1_2", "1_3"),
                ("2_4", "1_3", "1_4"),
                ("3_3", "2_2", "2_3"),
                ("3_4", "2_3", "2_4"),
                ("4_4", "3_3", "3_4"),
            ];
            for (i, (key, lk, rk)) in edges.iter().enumerate() {
                let cell = &self.cells[i].1;
                let (y, cc) = cell.forward(Some(&grid[lk]), &grid[rk], key)?;
                cell_caches.push(cc);
                grid.insert(key, y);
            }
        }

        let head = |conv: &Option<Conv>, z: &Tensor4| -> Result<Option<(Tensor4, CCache)>> {
            match conv {
                Some(c) => Ok(Some(conv_relu_fwd(c, z)?)),
                None => Ok(None),
            }
        };
        let h2 = head(&self.head2, grid.get("2_2").unwrap_or(&grid["4_4"]))?;
        let h3 = head(&self.head3, grid.get("3_3").unwrap_or(&grid["4_4"]))?;
        let h4 = head(&self.head4, &grid["4_4"])?;

        let u1 = upsample_nearest(&grid["4_4"], 2)?;
        let (a1, up1_cc) = conv_relu_fwd(&self.up1, &u1)?;
        let u2 = upsample_nearest(&a1, 2)?;
        let (a2, up2_cc) = conv_relu_fwd(&self.up2, &u2)?;
        let (z, full_cc) = conv_relu_fwd(&self.head_full, &a2)?;

        let split = |o: Option<(Tensor4, CCache)>| match o {
            Some((t, c)) => (Some(t), Some(c)),
            None => (None, None),
        };
        let (z2d, head2_cc) = split(h2);
        let (z3d, head3_cc) = split(h3);
        let (z4d, head4_cc) = split(h4);

        Ok((
            ForwardOutputs {
                z2d,
                z3d,
                z4d,
                z,
            },
            ForwardCache {
                enc: enc_cache,
                cells: cell_caches,
                head2: head2_cc,
                head3: head3_cc,
                head4: head4_cc,
                up1: up1_cc,
                up2: up2_cc,
                head_full: full_cc,
            },
        ))
    }

    /// Chain-rule accumulation from the supervised heads back to every
    /// parameter. The gradient of a shared parameter is the ordered sum of
    /// the flows from each head.
    pub fn backward(&self, cache: &ForwardCache, head_grads: &HeadGrads) -> Result<GradMap> {
        let mut grads = GradMap::default();

        // up-sampling block + full-resolution head
        let g_z44_up = match &head_grads.g {
            Some(g) => {
                let (g_a2, gw, gb) = conv_relu_bwd(&self.head_full, &cache.head_full, g)?;
                grads.insert("head.full", gw, gb);
                let (g_u2, gw, gb) = conv_relu_bwd(&self.up2, &cache.up2, &g_a2)?;
                grads.insert("up.2", gw, gb);
                let g_a1 = upsample_nearest_backward(&g_u2, 2)?;
                let (g_u1, gw, gb) = conv_relu_bwd(&self.up1, &cache.up1, &g_a1)?;
                grads.insert("up.1", gw, gb);
                Some(upsample_nearest_backward(&g_u1, 2)?)
            }
            None => None,
        };

        let head_bwd = |conv: &Option<Conv>,
                        cc: &Option<CCache>,
                        g: &Option<Tensor4>,
                        path: &str,
                        grads: &mut GradMap|
         -> Result<Option<Tensor4>> {
            match (conv, cc, g) {
                (Some(conv), Some(cc), Some(g)) => {
                    let (gx, gw, gb) = conv_relu_bwd(conv, cc, g)?;
                    grads.insert(path, gw, gb);
                    Ok(Some(gx))
                }
                _ => Ok(None),
            }
        };

        let acc = |a: Option<Tensor4>, b: Option<Tensor4>| -> Result<Option<Tensor4>> {
            match (a, b) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b)?;
                    Ok(Some(a))
                }
                (Some(a), None) => Ok(Some(a)),
                (None, b) => Ok(b),
            }
        };

        if self.cfg.single_path {
            let mut g = acc(
                g_z44_up,
                head_bwd(&self.head4, &cache.head4, &head_grads.g4d, "head.4d", &mut grads)?,
            )?;
            for (i, (key, cell)) in self.cells.iter().enumerate().rev() {
                let cur = match g {
                    Some(cur) => cur,
                    None => return Ok(grads),
                };
                let (_, g_right) =
                    cell.backward(&cache.cells[i], &cur, &format!("dec.{}", key), &mut grads)?;
                g = Some(g_right);
            }
            self.encoder_backward(&cache.enc, [None, None, None, g], &mut grads)?;
            return Ok(grads);
        }

        // triangular trellis, reverse topological order
        let mut g_z: BTreeMap<&str, Option<Tensor4>> = BTreeMap::new();
        let g44 = acc(
            g_z44_up,
            head_bwd(&self.head4, &cache.head4, &head_grads.g4d, "head.4d", &mut grads)?,
        )?;
        g_z.insert("4_4", g44);
        g_z.insert(
            "3_3",
            head_bwd(&self.head3, &cache.head3, &head_grads.g3d, "head.3d", &mut grads)?,
        );
        g_z.insert(
            "2_2",
            head_bwd(&self.head2, &cache.head2, &head_grads.g2d, "head.2d", &mut grads)?,
        );

        let edges: [(&str, &str, &str); 6] = [
            ("2_2", "1_1", "1_2"),
            ("2_3", "1_2", "1_3"),
            ("2_4", "1_3", "1_4"),
            ("3_3", "2_2", "2_3"),
            ("3_4", "2_3", "2_4"),
            ("4_4", "3_3", "3_4"),
        ];
        for (i, (key, lk, rk)) in edges.iter().enumerate().rev() {
            let g_here = g_z.remove(key as &str).flatten();
            if let Some(g) = g_here {
                let (g_left, g_right) =
                    cell_backward_at(self, i, &g, &mut grads, &cache.cells[i])?;
                let cur_l = g_z.remove(lk as &str).flatten();
                let merged_l = acc(cur_l, g_left)?;
                g_z.insert(lk, merged_l);
                let cur_r = g_z.remove(rk as &str).flatten();
                let merged_r = acc(cur_r, Some(g_right))?;
                g_z.insert(rk, merged_r);
            }
        }

        let g_e = [
            g_z.remove("1_1").flatten(),
            g_z.remove("1_2").flatten(),
            g_z.remove("1_3").flatten(),
            g_z.remove("1_4").flatten(),
        ];
        if g_e.iter().any(|g| g.is_some()) {
            // encoder_backward starts from E5; materialize a zero if needed
            let mut g_e = g_e;
            if g_e[3].is_none() {
                let shape = cache.cells[2].f2.x.shape();
                g_e[3] = Some(Tensor4::zeros(shape.0, shape.1, shape.2, shape.3)?);
            }
            self.encoder_backward(&cache.enc, g_e, &mut grads)?;
        }
        Ok(grads)
    }

    // ------------------------------------------------------------------
    // checkpoint io

    fn config_header(&self) -> String {
        let bps = self
            .cfg
            .blocks_per_stage
            .iter()
            .map(|b| b.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let ks = self
            .cfg
            .branch_kernels
            .iter()
            .map(|k| k.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "base_channels={}\nblocks_per_stage={}\nkernels={}\nsal_levels={}\nlambda={}\noutput_scale={}\nsingle_path={}\n",
            self.cfg.base_channels,
            bps,
            ks,
            self.cfg.sal_levels,
            self.cfg.lambda,
            self.cfg.output_scale,
            self.cfg.single_path as u8
        )
    }

    fn parse_config_header(text: &str) -> Result<TrellisConfig> {
        let mut cfg = TrellisConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("bad checkpoint header line: {}", line)))?;
            let bad = |what: &str| Error::Data(format!("bad checkpoint {}: {}", what, v));
            match k {
                "base_channels" => cfg.base_channels = v.parse().map_err(|_| bad(k))?,
                "blocks_per_stage" => {
                    let parts: Vec<usize> = v
                        .split(',')
                        .map(|p| p.parse().map_err(|_| bad(k)))
                        .collect::<Result<_>>()?;
                    if parts.len() != 5 {
                        return Err(bad(k));
                    }
                    cfg.blocks_per_stage.copy_from_slice(&parts);
                }
                "kernels" => {
                    cfg.branch_kernels = v
                        .split(',')
                        .map(|p| p.parse().map_err(|_| bad(k)))
                        .collect::<Result<_>>()?;
                }
                "sal_levels" => cfg.sal_levels = v.parse().map_err(|_| bad(k))?,
                "lambda" => cfg.lambda = v.parse().map_err(|_| bad(k))?,
                "output_scale" => cfg.output_scale = v.parse().map_err(|_| bad(k))?,
                "single_path" => cfg.single_path = v != "0",
                _ => return Err(Error::Data(format!("unknown checkpoint key: {}", k))),
            }
        }
        Ok(cfg)
    }

    /// Writes the checkpoint: `TEDC` magic, u32 version, u32 header length,
    /// key=value header, u32 entry count, then per entry a u32 name length,
    /// the name, and a TED1 tensor blob. Biases are stored as 1x1x1xL.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(b"TEDC")?;
        f.write_all(&1u32.to_le_bytes())?;
        let header = self.config_header();
        f.write_all(&(header.len() as u32).to_le_bytes())?;
        f.write_all(header.as_bytes())?;
        let mut entries: Vec<(String, Tensor4)> = Vec::new();
        self.for_each_param(|p, conv| {
            entries.push((format!("{}.w", p), conv.w.clone()));
            let bias =
                Tensor4::from_vec(1, 1, 1, conv.b.len(), conv.b.clone()).expect("bias tensor");
            entries.push((format!("{}.b", p), bias));
        });
        f.write_all(&(entries.len() as u32).to_le_bytes())?;
        for (name, t) in entries {
            f.write_all(&(name.len() as u32).to_le_bytes())?;
            f.write_all(name.as_bytes())?;
            write_ted1(&mut f, &t)?;
        }
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<TedNet> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"TEDC" {
            return Err(Error::Data(format!("bad checkpoint magic {:?}", magic)));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != 1 {
            return Err(Error::Data(format!("unsupported checkpoint version {}", version)));
        }
        r.read_exact(&mut u32buf)?;
        let hlen = u32::from_le_bytes(u32buf) as usize;
        let mut header = vec![0u8; hlen];
        r.read_exact(&mut header)?;
        let cfg = Self::parse_config_header(
            std::str::from_utf8(&header).map_err(|_| Error::Data("non-utf8 header".into()))?,
        )?;
        r.read_exact(&mut u32buf)?;
        let count = u32::from_le_bytes(u32buf) as usize;
        let mut tensors: BTreeMap<String, Tensor4> = BTreeMap::new();
        for _ in 0..count {
            r.read_exact(&mut u32buf)?;
            let nlen = u32::from_le_bytes(u32buf) as usize;
            let mut name = vec![0u8; nlen];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Data("non-utf8 name".into()))?;
            tensors.insert(name, read_ted1(&mut r)?);
        }
        let mut model = Self::zeros(cfg)?;
        let mut missing = Vec::new();
        let mut used = 0usize;
        model.for_each_param_mut(|p, conv| {
            match tensors.get(&format!("{}.w", p)) {
                Some(t) if t.shape() == conv.w.shape() => {
                    conv.w = t.clone();
                    used += 1;
                }
                _ => missing.push(format!("{}.w", p)),
            }
            match tensors.get(&format!("{}.b", p)) {
                Some(t) if t.len() == conv.b.len() => {
                    conv.b.copy_from_slice(t.data());
                    used += 1;
                }
                _ => missing.push(format!("{}.b", p)),
            }
        });
        if !missing.is_empty() {
            return Err(Error::Data(format!(
                "checkpoint missing or mis-shaped params: {}",
                missing.join(", ")
            )));
        }
        if used != count {
            return Err(Error::Data(format!(
                "checkpoint has {} entries, model uses {}",
                count, used
            )));
        }
        Ok(model)
    }
}

fn cell_backward_at(
    net: &TedNet,
    idx: usize,
    g: &Tensor4,
    grads: &mut GradMap,
    cache: &DecCellCache,
) -> Result<(Option<Tensor4>, Tensor4)> {
    let (key, cell) = &net.cells[idx];
    cell.backward(cache, g, &format!("dec.{}", key), grads)
}

/// Down-samples a full-resolution ground-truth map to the 1/4-resolution
/// supervision target with average pooling.
pub fn quarter_target(y_full: &Tensor4) -> Result<Tensor4> {
    avgpool(y_full, 4)
}
