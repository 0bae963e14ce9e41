//! Forward-only hierarchical GraphScan-Mamba backbone.
//!
//! Each block applies three residual updates in order:
//!
//! ```text
//! X ← X + DWConv3(X)
//! X ← X + GSSM(LN(X))
//! X ← X + ConvFFN(BN(X))
//! ```
//!
//! with `GSSM(X) = Proj_out(LN(SSM(GraphScan(SiLU(DWConv3(Proj_in(X)))))))`.
//! All 3×3 convolutions clamp coordinates at the border (replicate padding),
//! the same convention GraphScan windows use.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::graphscan::{multi_head_route, window_size, ProjectionSet, TokenGrid};
use crate::selective_scan::{recurrent_scan, SsmCore};
use crate::tensor::{matmul_into, uniform_init, DenseArray, SeededRng};

const LN_EPS: f64 = 1e-6;
const BN_EPS: f64 = 1e-5;

fn default_d_state() -> usize {
    16
}
fn default_one() -> usize {
    1
}
fn default_qk_divisor() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_in_channels() -> usize {
    3
}

/// Stage widths, depths, MLP ratios and graph radii of one variant, plus
/// the GSSM hyperparameters that the variant table leaves implicit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub channels: [usize; 4],
    pub depths: [usize; 4],
    pub mlp_ratios: [usize; 4],
    pub radii: [usize; 4],
    /// SSM state size per channel.
    #[serde(default = "default_d_state")]
    pub d_state: usize,
    /// GSSM inner width as a multiple of the stage width.
    #[serde(default = "default_one")]
    pub expansion: usize,
    /// GraphScan query/key/value width is the inner width divided by this.
    #[serde(default = "default_qk_divisor")]
    pub routing_divisor: usize,
    #[serde(default = "default_one")]
    pub heads: usize,
    #[serde(default = "default_true")]
    pub relative_bias: bool,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

impl BackboneConfig {
    fn preset(channels: [usize; 4], depths: [usize; 4], mlp_ratios: [usize; 4]) -> Self {
        Self {
            channels,
            depths,
            mlp_ratios,
            radii: [1, 1, 2, 3],
            d_state: default_d_state(),
            expansion: 1,
            routing_divisor: default_qk_divisor(),
            heads: 1,
            relative_bias: true,
            in_channels: 3,
        }
    }

    pub fn tiny() -> Self {
        Self::preset([80, 160, 320, 512], [3, 4, 12, 5], [4, 4, 3, 3])
    }

    pub fn small() -> Self {
        Self::preset([96, 192, 384, 512], [4, 8, 20, 6], [4, 4, 3, 3])
    }

    pub fn base() -> Self {
        Self::preset([112, 224, 448, 640], [4, 8, 25, 8], [4, 4, 3, 4])
    }

    pub const VARIANTS: [&'static str; 3] = ["tiny", "small", "base"];

    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "tiny" | "t" => Some(Self::tiny()),
            "small" | "s" => Some(Self::small()),
            "base" | "b" => Some(Self::base()),
            _ => None,
        }
    }

    pub fn inner_width(&self, stage: usize) -> usize {
        self.channels[stage] * self.expansion
    }

    pub fn routing_width(&self, stage: usize) -> usize {
        self.inner_width(stage) / self.routing_divisor
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: usize, what: &str| {
            if v == 0 {
                Err(Error::Parameter(format!("{what} must be positive")))
            } else {
                Ok(())
            }
        };
        for s in 0..4 {
            positive(self.channels[s], "channel width")?;
            positive(self.mlp_ratios[s], "MLP ratio")?;
            let rw = self.routing_width(s);
            if rw == 0 || !self.inner_width(s).is_multiple_of(self.routing_divisor) {
                return Err(Error::Parameter(format!(
                    "stage {} inner width {} is not divisible by routing divisor {}",
                    s + 1,
                    self.inner_width(s),
                    self.routing_divisor
                )));
            }
            if !rw.is_multiple_of(self.heads) {
                return Err(Error::Parameter(format!(
                    "head count {} does not divide stage {} routing width {rw}",
                    self.heads,
                    s + 1
                )));
            }
        }
        positive(self.d_state, "d_state")?;
        positive(self.expansion, "expansion")?;
        positive(self.heads, "heads")?;
        positive(self.in_channels, "in_channels")?;
        positive(self.channels[0] / 2, "stem width")
    }

    /// Stage map shapes `(H, W, C)` for an input of `height × width`.
    pub fn stage_shapes(&self, height: usize, width: usize) -> Result<[(usize, usize, usize); 4]> {
        check_input_dims(height, width)?;
        let mut out = [(0, 0, 0); 4];
        for (s, o) in out.iter_mut().enumerate() {
            let f = 4 << s;
            *o = (height / f, width / f, self.channels[s]);
        }
        Ok(out)
    }
}

fn check_input_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || !height.is_multiple_of(32) || !width.is_multiple_of(32) {
        return Err(Error::Parameter(format!(
            "input extents must be positive multiples of 32, got {height} × {width}"
        )));
    }
    Ok(())
}

/// Pointwise (1×1) projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `C_in × C_out`
    pub weight: DenseArray,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn random(rng: &mut SeededRng, c_in: usize, c_out: usize) -> Result<Self> {
        let scale = 1.0 / (c_in as f64).sqrt();
        Ok(Self {
            weight: uniform_init(rng, &[c_in, c_out], scale)?,
            bias: rng.vector(c_out, scale),
        })
    }

    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            weight: DenseArray::zeros(&[c_in, c_out]),
            bias: vec![0.0; c_out],
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &TokenGrid) -> Result<TokenGrid> {
        let (c_in, c_out) = (self.weight.shape()[0], self.weight.shape()[1]);
        if x.channels() != c_in {
            return Err(dim_err("Linear", &[x.channels()], &[c_in]));
        }
        let len = x.len();
        let mut out = vec![0.0; len * c_out];
        matmul_into(x.data(), self.weight.data(), &mut out, len, c_in, c_out);
        for row in out.chunks_mut(c_out) {
            for (o, b) in row.iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        TokenGrid::new(DenseArray::new(vec![x.height(), x.width(), c_out], out)?)
    }
}

/// Depthwise 3×3 convolution, stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseConv {
    /// `C × 9`, row-major over the 3×3 window.
    pub kernel: DenseArray,
    pub bias: Vec<f64>,
}

impl DepthwiseConv {
    pub fn random(rng: &mut SeededRng, channels: usize) -> Result<Self> {
        let scale = 1.0 / 3.0;
        Ok(Self {
            kernel: uniform_init(rng, &[channels, 9], scale)?,
            bias: rng.vector(channels, scale),
        })
    }

    pub fn zeros(channels: usize) -> Self {
        Self {
            kernel: DenseArray::zeros(&[channels, 9]),
            bias: vec![0.0; channels],
        }
    }

    pub fn num_params(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }

    pub fn forward(&self, x: &TokenGrid) -> Result<TokenGrid> {
        let c = x.channels();
        if self.kernel.shape()[0] != c {
            return Err(dim_err("DepthwiseConv", &[c], self.kernel.shape()));
        }
        let (h, w) = (x.height() as isize, x.width() as isize);
        let k = self.kernel.data();
        let mut out = TokenGrid::zeros(x.height(), x.width(), c);
        let data = out.features_mut().data_mut();
        for row in 0..h {
            for col in 0..w {
                let o =
                    &mut data[((row * w + col) as usize) * c..((row * w + col) as usize + 1) * c];
                o.copy_from_slice(&self.bias);
                for (tap, (dr, dc)) in TAPS.iter().enumerate() {
                    let r = (row + dr).clamp(0, h - 1);
                    let cc = (col + dc).clamp(0, w - 1);
                    let src = x.token((r * w + cc) as usize);
                    for ch in 0..c {
                        o[ch] += k[ch * 9 + tap] * src[ch];
                    }
                }
            }
        }
        Ok(out)
    }
}

const TAPS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Dense 3×3 convolution with stride 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    /// `(9·C_in) × C_out`, tap-major.
    pub weight: DenseArray,
    pub bias: Vec<f64>,
    pub stride: usize,
}

impl Conv3x3 {
    pub fn random(rng: &mut SeededRng, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let scale = 1.0 / ((9 * c_in) as f64).sqrt();
        Ok(Self {
            weight: uniform_init(rng, &[9 * c_in, c_out], scale)?,
            bias: rng.vector(c_out, scale),
            stride,
        })
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &TokenGrid) -> Result<TokenGrid> {
        let c_in = x.channels();
        let c_out = self.out_channels();
        if self.weight.shape()[0] != 9 * c_in {
            return Err(dim_err("Conv3x3", &[9 * c_in], self.weight.shape()));
        }
        let (h, w) = (x.height(), x.width());
        let (oh, ow) = (h.div_ceil(self.stride), w.div_ceil(self.stride));
        // im2col then one matrix product
        let mut cols = vec![0.0; oh * ow * 9 * c_in];
        for orow in 0..oh {
            for ocol in 0..ow {
                let base = (orow * ow + ocol) * 9 * c_in;
                for (tap, (dr, dc)) in TAPS.iter().enumerate() {
                    let r = ((orow * self.stride) as isize + dr).clamp(0, h as isize - 1) as usize;
                    let c = ((ocol * self.stride) as isize + dc).clamp(0, w as isize - 1) as usize;
                    cols[base + tap * c_in..base + (tap + 1) * c_in]
                        .copy_from_slice(x.token(r * w + c));
                }
            }
        }
        let mut out = vec![0.0; oh * ow * c_out];
        matmul_into(
            &cols,
            self.weight.data(),
            &mut out,
            oh * ow,
            9 * c_in,
            c_out,
        );
        for row in out.chunks_mut(c_out) {
            for (o, b) in row.iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        TokenGrid::new(DenseArray::new(vec![oh, ow, c_out], out)?)
    }
}

/// Per-token normalization over channels.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }

    pub fn num_params(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    pub fn forward(&self, x: &TokenGrid) -> Result<TokenGrid> {
        let c = x.channels();
        if self.gamma.len() != c {
            return Err(dim_err("LayerNorm", &[c], &[self.gamma.len()]));
        }
        let mut out = x.clone();
        for row in out.features_mut().data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for ((v, g), b) in row.iter_mut().zip(&self.gamma).zip(&self.beta) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        Ok(out)
    }
}

/// Batch normalization in inference mode. Running statistics are buffers,
/// not parameters; no training exists here so they stay at zero mean and
/// unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn num_params(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    pub fn forward(&self, x: &TokenGrid) -> Result<TokenGrid> {
        let c = x.channels();
        if self.gamma.len() != c {
            return Err(dim_err("BatchNorm", &[c], &[self.gamma.len()]));
        }
        let scale: Vec<f64> = self
            .gamma
            .iter()
            .zip(&self.running_var)
            .map(|(g, v)| g / (v + BN_EPS).sqrt())
            .collect();
        let mut out = x.clone();
        for row in out.features_mut().data_mut().chunks_mut(c) {
            for ch in 0..c {
                row[ch] = (row[ch] - self.running_mean[ch]) * scale[ch] + self.beta[ch];
            }
        }
        Ok(out)
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

fn map_grid(mut x: TokenGrid, f: fn(f64) -> f64) -> TokenGrid {
    for v in x.features_mut().data_mut() {
        *v = f(*v);
    }
    x
}

fn add_into(x: &mut TokenGrid, y: &TokenGrid) {
    for (a, b) in x.features_mut().data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}

/// The GraphScan-SSM token mixer.
#[derive(Debug, Clone, PartialEq)]
pub struct GssmParams {
    pub proj_in: Linear,
    pub dwconv: DepthwiseConv,
    pub routing: ProjectionSet,
    pub ssm: SsmCore,
    pub norm: LayerNorm,
    pub proj_out: Linear,
}

impl GssmParams {
    pub fn num_params(&self) -> usize {
        self.proj_in.num_params()
            + self.dwconv.num_params()
            + self.routing.num_params()
            + self.ssm.num_params()
            + self.norm.num_params()
            + self.proj_out.num_params()
    }

    /// Runs the mixer; `route = false` skips GraphScan entirely.
    pub fn forward_with(&self, x: &TokenGrid, route: bool) -> Result<TokenGrid> {
        let local = map_grid(self.dwconv.forward(&self.proj_in.forward(x)?)?, silu);
        let routed = if route {
            multi_head_route(&local, &self.routing)?
        } else {
            local
        };
        let scanned = recurrent_scan(&self.ssm, &routed.sequence())?;
        let y = TokenGrid::from_sequence(routed.height(), routed.width(), scanned.outputs)?;
        self.proj_out.forward(&self.norm.forward(&y)?)
    }
}

pub fn gssm_forward(x: &TokenGrid, p: &BlockParams) -> Result<TokenGrid> {
    p.gssm.forward_with(x, true)
}

/// Pointwise → depthwise 3×3 → GELU → pointwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFfn {
    pub fc1: Linear,
    pub dwconv: DepthwiseConv,
    pub fc2: Linear,
}

impl ConvFfn {
    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.dwconv.num_params() + self.fc2.num_params()
    }

    pub fn forward(&self, x: &TokenGrid) -> Result<TokenGrid> {
        let hidden = map_grid(self.dwconv.forward(&self.fc1.forward(x)?)?, gelu);
        self.fc2.forward(&hidden)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub pos_conv: DepthwiseConv,
    pub norm1: LayerNorm,
    pub gssm: GssmParams,
    pub norm2: BatchNorm,
    pub ffn: ConvFfn,
}

impl BlockParams {
    /// Random block for stage width `channels`. GraphScan's `W_o` starts at
    /// zero, the bias table at zero.
    pub fn random(rng: &mut SeededRng, cfg: &BackboneConfig, stage: usize) -> Result<Self> {
        let c = cfg.channels[stage];
        let inner = cfg.inner_width(stage);
        let rw = cfg.routing_width(stage);
        let hidden = c * cfg.mlp_ratios[stage];
        Ok(Self {
            pos_conv: DepthwiseConv::random(rng, c)?,
            norm1: LayerNorm::new(c),
            gssm: GssmParams {
                proj_in: Linear::random(rng, c, inner)?,
                dwconv: DepthwiseConv::random(rng, inner)?,
                routing: ProjectionSet::random(rng, inner, rw, rw, cfg.radii[stage], cfg.heads)?,
                ssm: SsmCore::random(rng, inner, cfg.d_state)?,
                norm: LayerNorm::new(inner),
                proj_out: Linear::random(rng, inner, c)?,
            },
            norm2: BatchNorm::new(c),
            ffn: ConvFfn {
                fc1: Linear::random(rng, c, hidden)?,
                dwconv: DepthwiseConv::random(rng, hidden)?,
                fc2: Linear::random(rng, hidden, c)?,
            },
        })
    }

    pub fn channels(&self) -> usize {
        self.norm1.gamma.len()
    }

    pub fn num_params(&self, relative_bias: bool) -> usize {
        let bias = if relative_bias {
            0
        } else {
            self.gssm.routing.bias.table().len()
        };
        self.pos_conv.num_params()
            + self.norm1.num_params()
            + self.gssm.num_params()
            + self.norm2.num_params()
            + self.ffn.num_params()
            - bias
    }

    /// Zeroes every branch output so the block is the identity.
    pub fn zero_branches(&mut self) {
        let c = self.channels();
        self.pos_conv = DepthwiseConv::zeros(c);
        let inner = self.gssm.proj_out.weight.shape()[0];
        self.gssm.proj_out = Linear::zeros(inner, c);
        let hidden = self.ffn.fc2.weight.shape()[0];
        self.ffn.fc2 = Linear::zeros(hidden, c);
    }

    pub fn forward_with(&self, x: &TokenGrid, route: bool) -> Result<TokenGrid> {
        if x.channels() != self.channels() {
            return Err(dim_err(
                "block_forward",
                &[x.channels()],
                &[self.channels()],
            ));
        }
        let mut x = x.clone();
        let pos = self.pos_conv.forward(&x)?;
        add_into(&mut x, &pos);
        let mix = self.gssm.forward_with(&self.norm1.forward(&x)?, route)?;
        add_into(&mut x, &mix);
        let ffn = self.ffn.forward(&self.norm2.forward(&x)?)?;
        add_into(&mut x, &ffn);
        Ok(x)
    }
}

pub fn block_forward(x: &TokenGrid, p: &BlockParams) -> Result<TokenGrid> {
    p.forward_with(x, true)
}

/// Stride-2 convolution followed by batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Downsample {
    pub conv: Conv3x3,
    pub norm: BatchNorm,
}

impl Downsample {
    pub fn num_params(&self) -> usize {
        self.conv.num_params() + self.norm.num_params()
    }

    pub fn forward(&self, x: &TokenGrid) -> Result<TokenGrid> {
        self.norm.forward(&self.conv.forward(x)?)
    }
}

/// Two overlapping stride-2 convolutions reaching `C_1` at 1/4 resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Stem {
    pub conv1: Conv3x3,
    pub norm1: BatchNorm,
    pub conv2: Conv3x3,
    pub norm2: BatchNorm,
}

impl Stem {
    pub fn num_params(&self) -> usize {
        self.conv1.num_params()
            + self.norm1.num_params()
            + self.conv2.num_params()
            + self.norm2.num_params()
    }

    pub fn forward(&self, x: &TokenGrid) -> Result<TokenGrid> {
        let h = map_grid(self.norm1.forward(&self.conv1.forward(x)?)?, gelu);
        self.norm2.forward(&self.conv2.forward(&h)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub downsample: Option<Downsample>,
    pub blocks: Vec<BlockParams>,
}

/// An instantiated backbone with random weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub stem: Stem,
    pub stages: Vec<Stage>,
    pub final_norm: LayerNorm,
}

/// Per-stage feature maps and the globally pooled final feature.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneOutput {
    pub stages: Vec<TokenGrid>,
    pub pooled: Vec<f64>,
}

impl Backbone {
    pub fn random(cfg: &BackboneConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let c0 = cfg.channels[0] / 2;
        let stem = Stem {
            conv1: Conv3x3::random(rng, cfg.in_channels, c0, 2)?,
            norm1: BatchNorm::new(c0),
            conv2: Conv3x3::random(rng, c0, cfg.channels[0], 2)?,
            norm2: BatchNorm::new(cfg.channels[0]),
        };
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let downsample = if s == 0 {
                None
            } else {
                Some(Downsample {
                    conv: Conv3x3::random(rng, cfg.channels[s - 1], cfg.channels[s], 2)?,
                    norm: BatchNorm::new(cfg.channels[s]),
                })
            };
            let blocks = (0..cfg.depths[s])
                .map(|_| BlockParams::random(rng, cfg, s))
                .collect::<Result<_>>()?;
            stages.push(Stage { downsample, blocks });
        }
        let mut model = Self {
            cfg: cfg.clone(),
            stem,
            stages,
            final_norm: LayerNorm::new(cfg.channels[3]),
        };
        if !cfg.relative_bias {
            model.for_each_routing(|p| p.bias = crate::graphscan::RelativeBias::zeros(p.radius()));
        }
        Ok(model)
    }

    pub fn for_each_block(&mut self, mut f: impl FnMut(&mut BlockParams)) {
        for stage in &mut self.stages {
            for block in &mut stage.blocks {
                f(block);
            }
        }
    }

    pub fn for_each_routing(&mut self, mut f: impl FnMut(&mut ProjectionSet)) {
        self.for_each_block(|b| f(&mut b.gssm.routing));
    }

    /// Counts stored parameter tensors.
    pub fn num_params(&self) -> usize {
        let blocks: usize = self
            .stages
            .iter()
            .flat_map(|s| &s.blocks)
            .map(|b| b.num_params(self.cfg.relative_bias))
            .sum();
        let downs: usize = self
            .stages
            .iter()
            .filter_map(|s| s.downsample.as_ref())
            .map(Downsample::num_params)
            .sum();
        self.stem.num_params() + downs + blocks + self.final_norm.num_params()
    }

    pub fn forward_with(&self, img: &TokenGrid, route: bool) -> Result<BackboneOutput> {
        check_input_dims(img.height(), img.width())?;
        if img.channels() != self.cfg.in_channels {
            return Err(dim_err(
                "backbone_forward",
                &[img.channels()],
                &[self.cfg.in_channels],
            ));
        }
        let mut x = self.stem.forward(img)?;
        let mut maps = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(down) = &stage.downsample {
                x = down.forward(&x)?;
            }
            for block in &stage.blocks {
                x = block.forward_with(&x, route)?;
            }
            maps.push(x.clone());
        }
        let last = self.final_norm.forward(&x)?;
        let c = last.channels();
        let mut pooled = vec![0.0; c];
        for i in 0..last.len() {
            for (p, v) in pooled.iter_mut().zip(last.token(i)) {
                *p += v;
            }
        }
        for p in &mut pooled {
            *p /= last.len() as f64;
        }
        Ok(BackboneOutput {
            stages: maps,
            pooled,
        })
    }
}

pub fn backbone_forward(img: &TokenGrid, model: &Backbone) -> Result<BackboneOutput> {
    model.forward_with(img, true)
}

/// Analytic parameter and FLOP counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Complexity {
    pub params: u64,
    /// Multiply-accumulates at the requested resolution.
    pub flops: u64,
}

/// Counts parameters and multiply-accumulates at `resolution²` (224 for the
/// variant table) without evaluating any tensor.
///
/// Convolutions and projections cost one multiply-accumulate per weight per
/// output position. GraphScan adds `L·S·(d + d_v)` for the window
/// affinities and aggregation; the selective scan adds its parameter
/// generation plus `3·D·N_s` per token for discretization, update and
/// readout. Normalizations, activations and biases are not counted.
pub fn count_params_flops_at(cfg: &BackboneConfig, resolution: usize) -> Complexity {
    let mut params = 0usize;
    let mut flops = 0usize;
    let c0 = cfg.channels[0] / 2;
    let cin = cfg.in_channels;
    params += 9 * cin * c0 + c0 + 2 * c0;
    params += 9 * c0 * cfg.channels[0] + cfg.channels[0] + 2 * cfg.channels[0];
    let half = resolution.div_ceil(2);
    let quarter = half.div_ceil(2);
    flops += half * half * 9 * cin * c0;
    flops += quarter * quarter * 9 * c0 * cfg.channels[0];

    let mut side = quarter;
    for s in 0..4 {
        let c = cfg.channels[s];
        if s > 0 {
            side = side.div_ceil(2);
            let prev = cfg.channels[s - 1];
            params += 9 * prev * c + c + 2 * c;
            flops += side * side * 9 * prev * c;
        }
        let tokens = side * side;
        let inner = cfg.inner_width(s);
        let rw = cfg.routing_width(s);
        let n = cfg.d_state;
        let hidden = c * cfg.mlp_ratios[s];
        let slots = window_size(cfg.radii[s]);

        let mut bp = 0;
        let mut bf = 0;
        // positional depthwise branch
        bp += 10 * c;
        bf += tokens * 9 * c;
        // LN
        bp += 2 * c;
        // Proj_in, depthwise conv
        bp += c * inner + inner + 10 * inner;
        bf += tokens * (c * inner + 9 * inner);
        // GraphScan projections, bias table, window affinities + aggregation
        bp += 3 * inner * rw + rw * inner;
        if cfg.relative_bias {
            bp += slots;
        }
        bf += tokens * (3 * inner * rw + rw * inner) + tokens * slots * (rw + rw);
        // SSM: A, W_Δ + bias, W_b, W_c; scan
        bp += inner * n + inner * inner + inner + 2 * inner * n;
        bf += tokens * (inner * inner + 2 * inner * n) + tokens * inner * n * 3;
        // LN, Proj_out
        bp += 2 * inner + inner * c + c;
        bf += tokens * inner * c;
        // BN, ConvFFN
        bp += 2 * c;
        bp += c * hidden + hidden + 10 * hidden + hidden * c + c;
        bf += tokens * (2 * c * hidden + 9 * hidden);

        params += bp * cfg.depths[s];
        flops += bf * cfg.depths[s];
    }
    params += 2 * cfg.channels[3];
    Complexity {
        params: params as u64,
        flops: flops as u64,
    }
}

pub fn count_params_flops(cfg: &BackboneConfig) -> Complexity {
    count_params_flops_at(cfg, 224)
}
