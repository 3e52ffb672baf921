//! The vision-language grasp network: conv encoder, feature-pyramid merge,
//! token cross-attention, text-conditioned mask head, mask-gated pooling and
//! three per-pixel grasp heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grasp_maps::{decode_angle, GraspMaps, DEFAULT_MAX_WIDTH};

use super::graph::{ConvSpec, Graph, NodeId};
use super::tensor::{ModelParams, Tensor};

/// Total downsampling between the input image and the prediction grid.
pub const MAP_STRIDE: usize = 4;
/// RGB plus two normalized pixel-coordinate planes.
const INPUT_CHANNELS: usize = 5;

const CONV3_S2: ConvSpec = ConvSpec { kernel: 3, stride: 2, pad: 1 };
const CONV3: ConvSpec = ConvSpec { kernel: 3, stride: 1, pad: 1 };
const CONV1: ConvSpec = ConvSpec { kernel: 1, stride: 1, pad: 0 };

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub vocab_size: usize,
    /// Token embedding width `d`.
    pub embed_dim: usize,
    /// Fused feature width `C`.
    pub channels: usize,
    /// Widths of the first two encoder stages (the third has `channels`).
    pub stem_channels: [usize; 2],
    pub head_hidden: usize,
    /// Gripper width normalizer in input-image pixels.
    pub max_width: f64,
    pub cross_attention: bool,
    /// Gate features by the predicted mask before the grasp heads.
    #[serde(default = "default_true")]
    pub mask_pooling: bool,
    /// Sentence-to-pixel attention that locates the referred region and
    /// feeds each pixel's distance to it into the attention value path.
    #[serde(default)]
    pub spatial_grounding: bool,
    /// Follow the second and third stride-2 convs with a stride-1 3x3 conv.
    #[serde(default)]
    pub deep_blocks: bool,
}

fn default_true() -> bool {
    true
}

impl ArchConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 32,
            channels: 32,
            stem_channels: [16, 32],
            head_hidden: 16,
            max_width: DEFAULT_MAX_WIDTH,
            cross_attention: true,
            mask_pooling: true,
            spatial_grounding: true,
            deep_blocks: true,
        }
    }

    /// Width normalizer in prediction-grid pixels.
    pub fn max_width_map(&self) -> f64 {
        self.max_width / MAP_STRIDE as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.channels == 0 || self.head_hidden == 0 {
            return Err(Error::Config("architecture sizes must be positive".into()));
        }
        if self.stem_channels.contains(&0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.spatial_grounding && !self.cross_attention {
            return Err(Error::Config("spatial grounding needs cross-attention".into()));
        }
        if !(self.max_width > 0.0) {
            return Err(Error::Config("max_width must be positive".into()));
        }
        Ok(())
    }
}

/// Registry names of tensors that only the grasp branch uses.
pub fn is_grasp_head(name: &str) -> bool {
    name.starts_with("refine.") || name.starts_with("head_")
}

const HEADS: [(&str, usize); 3] = [("head_q", 1), ("head_theta", 2), ("head_w", 1)];

/// Seeded random initialization of every registry tensor.
pub fn init_params(arch: &ArchConfig, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::new();
    let (d, c, [c1, c2], hh) = (arch.embed_dim, arch.channels, arch.stem_channels, arch.head_hidden);
    let mut normal = |dims: Vec<usize>, std: f64| -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| dist.sample(&mut rng)).collect()).expect("consistent dims")
    };
    let mut conv = |p: &mut ModelParams, name: &str, cout: usize, cin: usize, k: usize, gain: f64, bias: f64| -> Result<()> {
        let std = gain * (2.0 / (cin * k * k) as f64).sqrt();
        p.insert(&format!("{name}.weight"), normal(vec![cout, cin, k, k], std))?;
        p.insert(&format!("{name}.bias"), Tensor::new(vec![cout], vec![bias; cout])?)?;
        Ok(())
    };
    conv(&mut p, "enc1", c1, INPUT_CHANNELS, 3, 1.0, 0.0)?;
    conv(&mut p, "enc2", c2, c1, 3, 1.0, 0.0)?;
    conv(&mut p, "enc3", c, c2, 3, 1.0, 0.0)?;
    if arch.deep_blocks {
        conv(&mut p, "enc2b", c2, c2, 3, 1.0, 0.0)?;
        conv(&mut p, "enc3b", c, c, 3, 1.0, 0.0)?;
    }
    conv(&mut p, "fpn.lateral", c, c2, 1, 1.0, 0.0)?;
    conv(&mut p, "fpn.merge", c, c, 3, 0.7, 0.0)?;
    conv(&mut p, "refine", c, c, 3, 1.0, 0.0)?;
    for (name, out) in HEADS {
        conv(&mut p, &format!("{name}.0"), hh, c, 1, 1.0, 0.0)?;
        conv(&mut p, &format!("{name}.1"), out, hh, 1, 0.3, 0.0)?;
    }
    p.insert("token_embed", normal(vec![arch.vocab_size, d], 1.0))?;
    p.insert("text_proj_z.weight", normal(vec![c, d], 1.0 / (d as f64).sqrt()))?;
    p.insert("text_proj_z.bias", Tensor::zeros(vec![c]))?;
    p.insert("mask.bias", Tensor::zeros(vec![1]))?;
    if arch.cross_attention {
        p.insert("cross_attn.wq", normal(vec![d, c], 1.0 / (c as f64).sqrt()))?;
        p.insert("cross_attn.wk", normal(vec![d, d], 1.0 / (d as f64).sqrt()))?;
        p.insert("cross_attn.wv", normal(vec![d, d], 1.0 / (d as f64).sqrt()))?;
        p.insert("cross_attn.wo", normal(vec![c, d], 0.5 / (d as f64).sqrt()))?;
    }
    if arch.spatial_grounding {
        p.insert("ground.wq", normal(vec![c, d], 1.0 / (d as f64).sqrt()))?;
        p.insert("ground.wk", normal(vec![c, c], 1.0 / (c as f64).sqrt()))?;
        p.insert("ground.dir", normal(vec![2, d], 1.0 / (d as f64).sqrt()))?;
        p.insert("ground.gamma", normal(vec![1, d], 1.0 / (d as f64).sqrt()))?;
        p.insert("ground.gamma_bias", Tensor::zeros(vec![1]))?;
        p.insert("ground.v", normal(vec![d, 1], 0.5))?;
    }
    // start the quality head low: most pixels carry no grasp
    if let Some(b) = p.get_mut("head_q.1.bias") {
        b.values.fill(-2.0);
    }
    Ok(p)
}

/// An RGB image, row-major `H x W x 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!("{height}x{width}x3 image needs {} values, got {}", height * width * 3, data.len())));
        }
        Ok(Self { height, width, data })
    }

    /// Channel-major network input with appended coordinate planes.
    fn to_input(&self) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let n = h * w;
        let mut v = vec![0.0; INPUT_CHANNELS * n];
        for i in 0..n {
            for ch in 0..3 {
                v[ch * n + i] = self.data[i * 3 + ch];
            }
            let (row, col) = (i / w, i % w);
            v[3 * n + i] = (col as f64 + 0.5) / w as f64 * 2.0 - 1.0;
            v[4 * n + i] = (row as f64 + 0.5) / h as f64 * 2.0 - 1.0;
        }
        v
    }
}

/// Normalized `(x, y)` coordinates of every grid cell as a `[2, N]` matrix,
/// matching the image coordinate planes at cell centers.
fn grid_coordinates(gh: usize, gw: usize) -> Vec<f64> {
    let n = gh * gw;
    let mut v = vec![0.0; 2 * n];
    for i in 0..n {
        v[i] = ((i % gw) as f64 + 0.5) / gw as f64 * 2.0 - 1.0;
        v[n + i] = ((i / gw) as f64 + 0.5) / gh as f64 * 2.0 - 1.0;
    }
    v
}

/// Sentence-to-pixel attention: appearance match plus a text-chosen
/// direction over coordinates selects a location; returns `gamma * |p - P|²`
/// per pixel (`[1, N]`), where `P` is the attention-weighted position.
fn spatial_grounding(
    g: &mut Graph,
    p: &ModelParams,
    vision: NodeId,
    sentence: NodeId,
    grid: (usize, usize),
    channels: usize,
) -> Result<(NodeId, NodeId)> {
    let n = grid.0 * grid.1;
    let coords = grid_coordinates(grid.0, grid.1);
    let sq: Vec<f64> = (0..n).map(|i| coords[i].powi(2) + coords[n + i].powi(2)).collect();
    let pos = g.input(vec![2, n], coords)?;
    let pos_sq = g.input(vec![1, n], sq)?;
    let ones = g.input(vec![1, n], vec![1.0; n])?;

    let wq = param(g, p, "ground.wq")?;
    let wk = param(g, p, "ground.wk")?;
    let query = g.matmul(wq, sentence, false, true)?; // [C, 1]
    let keys = g.matmul(wk, vision, false, false)?; // [C, N]
    let appearance = g.matmul(query, keys, true, false)?; // [1, N]
    let appearance = g.scale(appearance, 1.0 / (channels as f64).sqrt());
    let wdir = param(g, p, "ground.dir")?;
    let dir = g.matmul(wdir, sentence, false, true)?; // [2, 1]
    let extremity = g.matmul(dir, pos, true, false)?; // [1, N]
    let logits = g.add(appearance, extremity)?;
    let attn = g.softmax_rows(logits);

    let center = g.matmul(attn, pos, false, true)?; // [1, 2]
    let cross = g.matmul(center, pos, false, false)?; // [1, N]
    let cross = g.scale(cross, -2.0);
    let center_sq = g.matmul(center, center, false, true)?; // [1, 1]
    let center_sq = g.matmul(center_sq, ones, false, false)?; // [1, N]
    let dist = g.add(pos_sq, cross)?;
    let dist = g.add(dist, center_sq)?;

    let wg = param(g, p, "ground.gamma")?;
    let bg = param(g, p, "ground.gamma_bias")?;
    let gamma = g.matmul(wg, sentence, false, true)?; // [1, 1]
    let gamma = g.add_scalar(gamma, bg)?;
    Ok((g.matmul(gamma, dist, false, false)?, attn))
}

/// Which parts of the network a graph should contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    /// Build the grasp branch (refine conv and heads).
    pub heads: bool,
    /// Gate features by the predicted mask; otherwise the mask is taken as 1.
    pub pooling: bool,
}

impl ForwardMode {
    pub const FULL: Self = Self { heads: true, pooling: true };
    pub const MASK_ONLY: Self = Self { heads: false, pooling: true };
    pub const NO_POOLING: Self = Self { heads: true, pooling: false };
}

/// Node handles into a built forward graph.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub tokens: NodeId,
    pub sentence: NodeId,
    pub vision: NodeId,
    pub attention: Option<NodeId>,
    pub fused: NodeId,
    pub z: NodeId,
    pub mask_logits: NodeId,
    pub mask: NodeId,
    pub pooled: NodeId,
    pub quality: Option<NodeId>,
    pub angle: Option<NodeId>,
    pub width: Option<NodeId>,
    pub grid: (usize, usize),
}

fn param(g: &mut Graph, p: &ModelParams, name: &str) -> Result<NodeId> {
    let i = p
        .index_of(name)
        .ok_or_else(|| Error::Config(format!("parameter {name:?} missing from registry")))?;
    Ok(g.param(p, i))
}

fn conv(g: &mut Graph, p: &ModelParams, x: NodeId, name: &str, spec: ConvSpec) -> Result<NodeId> {
    let w = param(g, p, &format!("{name}.weight"))?;
    let b = param(g, p, &format!("{name}.bias"))?;
    g.conv2d(x, w, b, spec)
}

/// Token rows and their mean as graph nodes.
pub fn embed_text_nodes(g: &mut Graph, p: &ModelParams, tokens: &[usize]) -> Result<(NodeId, NodeId)> {
    if tokens.is_empty() {
        return Err(Error::Shape("expression has no tokens".into()));
    }
    let table = param(g, p, "token_embed")?;
    let rows = g.gather(table, tokens)?;
    let sentence = g.mean_rows(rows)?;
    Ok((rows, sentence))
}

/// Token matrix (`T x d`, row-major) and sentence vector.
pub fn embed_text(tokens: &[usize], p: &ModelParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let (rows, sentence) = embed_text_nodes(&mut g, p, tokens)?;
    Ok((g.value(rows).to_vec(), g.value(sentence).to_vec()))
}

/// Appends the full forward pass for one (image, expression) pair.
pub fn build_forward(
    g: &mut Graph,
    arch: &ArchConfig,
    p: &ModelParams,
    image: &Image,
    tokens: &[usize],
    mode: ForwardMode,
) -> Result<ForwardNodes> {
    let (h, w) = (image.height, image.width);
    if h == 0 || w == 0 || h % MAP_STRIDE != 0 || w % MAP_STRIDE != 0 {
        return Err(Error::Shape(format!("image {h}x{w} must have sides divisible by {MAP_STRIDE}")));
    }
    let grid = (h / MAP_STRIDE, w / MAP_STRIDE);
    let x = g.input(vec![INPUT_CHANNELS, h, w], image.to_input())?;
    let c1 = conv(g, p, x, "enc1", CONV3_S2)?;
    let c1 = g.silu(c1);
    let c2 = conv(g, p, c1, "enc2", CONV3_S2)?;
    let mut c2 = g.silu(c2);
    if arch.deep_blocks {
        let b = conv(g, p, c2, "enc2b", CONV3)?;
        c2 = g.silu(b);
    }
    let c3 = conv(g, p, c2, "enc3", CONV3_S2)?;
    let mut c3 = g.silu(c3);
    if arch.deep_blocks {
        let b = conv(g, p, c3, "enc3b", CONV3)?;
        c3 = g.silu(b);
    }
    let lateral = conv(g, p, c2, "fpn.lateral", CONV1)?;
    let top = g.upsample2(c3)?;
    let merged = g.add(lateral, top)?;
    let vision = conv(g, p, merged, "fpn.merge", CONV3)?;

    let (tok, sentence) = embed_text_nodes(g, p, tokens)?;
    let (fused_pre, attention) = if arch.cross_attention {
        let wq = param(g, p, "cross_attn.wq")?;
        let wk = param(g, p, "cross_attn.wk")?;
        let wv = param(g, p, "cross_attn.wv")?;
        let wo = param(g, p, "cross_attn.wo")?;
        let q = g.matmul(wq, vision, false, false)?; // [d, N]
        let k = g.matmul(wk, tok, false, true)?; // [d, T]
        let v = g.matmul(wv, tok, false, true)?; // [d, T]
        let scores = g.matmul(q, k, true, false)?; // [N, T]
        let scores = g.scale(scores, 1.0 / (arch.embed_dim as f64).sqrt());
        let attn = g.softmax_rows(scores);
        let mut ctx = g.matmul(v, attn, false, true)?; // [d, N]
        if arch.spatial_grounding {
            let (near, _) = spatial_grounding(g, p, vision, sentence, grid, arch.channels)?;
            let gv = param(g, p, "ground.v")?;
            let near = g.matmul(gv, near, false, false)?; // [d, N]
            ctx = g.add(ctx, near)?;
        }
        let out = g.matmul(wo, ctx, false, false)?; // [C, N]
        (g.add(vision, out)?, Some(attn))
    } else {
        (vision, None)
    };
    let fused = g.silu(fused_pre);

    let wz = param(g, p, "text_proj_z.weight")?;
    let bz = param(g, p, "text_proj_z.bias")?;
    let z = g.matmul(wz, sentence, false, true)?; // [C, 1]
    let z = g.add(z, bz)?;
    let dot = g.channel_dot(fused, z)?;
    let mb = param(g, p, "mask.bias")?;
    let mask_logits = g.add_scalar(dot, mb)?;
    let mask = g.sigmoid(mask_logits);
    let pooled = if mode.pooling { g.mul_mask(fused, mask)? } else { fused };

    let (mut quality, mut angle, mut width) = (None, None, None);
    if mode.heads {
        let r = conv(g, p, pooled, "refine", CONV3)?;
        let r = g.silu(r);
        for (name, _) in HEADS {
            let hid = conv(g, p, r, &format!("{name}.0"), CONV1)?;
            let hid = g.silu(hid);
            let out = conv(g, p, hid, &format!("{name}.1"), CONV1)?;
            match name {
                "head_q" => quality = Some(g.sigmoid(out)),
                "head_theta" => angle = Some(g.tanh(out)),
                _ => width = Some(g.sigmoid(out)),
            }
        }
    }
    Ok(ForwardNodes {
        tokens: tok,
        sentence,
        vision,
        attention,
        fused,
        z,
        mask_logits,
        mask,
        pooled,
        quality,
        angle,
        width,
        grid,
    })
}

/// Values of a complete forward pass. Feature maps are channel-major
/// (`C x H' x W'`); grids are row-major `H' x W'`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub mask: Vec<f64>,
    pub maps: GraspMaps,
    pub fused: Vec<f64>,
    pub pooled: Vec<f64>,
    pub sin2: Vec<f64>,
    pub cos2: Vec<f64>,
    /// Width head output in `(0, 1)` before denormalization.
    pub width_norm: Vec<f64>,
    /// Per-pixel attention over tokens (`N x T`), if cross-attention is on.
    pub attention: Option<Vec<f64>>,
    pub grid: (usize, usize),
    pub channels: usize,
}

impl ForwardOutput {
    pub fn from_graph(g: &Graph, arch: &ArchConfig, nodes: &ForwardNodes) -> Result<Self> {
        let (q, a, wn) = match (nodes.quality, nodes.angle, nodes.width) {
            (Some(q), Some(a), Some(w)) => (q, a, w),
            _ => return Err(Error::Graph("forward graph was built without grasp heads".into())),
        };
        let (gh, gw) = nodes.grid;
        let n = gh * gw;
        let av = g.value(a);
        let (sin2, cos2) = (av[..n].to_vec(), av[n..2 * n].to_vec());
        let width_norm = g.value(wn).to_vec();
        let mut maps = GraspMaps::zeros(gh as u32, gw as u32);
        maps.quality = g.value(q).to_vec();
        for i in 0..n {
            maps.angle[i] = decode_angle(sin2[i], cos2[i]).unwrap_or(0.0);
            maps.width[i] = width_norm[i] * arch.max_width_map();
        }
        Ok(Self {
            mask: g.value(nodes.mask).to_vec(),
            maps,
            fused: g.value(nodes.fused).to_vec(),
            pooled: g.value(nodes.pooled).to_vec(),
            sin2,
            cos2,
            width_norm,
            attention: nodes.attention.map(|a| g.value(a).to_vec()),
            grid: nodes.grid,
            channels: arch.channels,
        })
    }
}

impl ForwardMode {
    /// Full inference graph for an architecture.
    pub fn inference(arch: &ArchConfig) -> Self {
        Self {
            heads: true,
            pooling: arch.mask_pooling,
        }
    }
}

/// Inference: one forward pass.
pub fn forward(arch: &ArchConfig, p: &ModelParams, image: &Image, tokens: &[usize]) -> Result<ForwardOutput> {
    let mut g = Graph::new();
    let mode = ForwardMode::inference(arch);
    let nodes = build_forward(&mut g, arch, p, image, tokens, mode)?;
    ForwardOutput::from_graph(&g, arch, &nodes)
}

/// `M = sigmoid(f . z + bias)` per pixel, for a channel-major `f`.
pub fn mask_head(f: &[f64], channels: usize, z: &[f64], bias: f64) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    if channels == 0 || f.len() % channels != 0 {
        return Err(Error::Shape("feature length is not a multiple of the channel count".into()));
    }
    let fnode = g.input(vec![channels, f.len() / channels], f.to_vec())?;
    let znode = g.input(vec![z.len()], z.to_vec())?;
    let b = g.input(vec![1], vec![bias])?;
    let dot = g.channel_dot(fnode, znode)?;
    let logits = g.add_scalar(dot, b)?;
    let m = g.sigmoid(logits);
    Ok(g.value(m).to_vec())
}

/// `f ⊙ M` for a channel-major `f` and a mask over its spatial grid.
pub fn mask_pool(f: &[f64], channels: usize, m: &[f64]) -> Result<Vec<f64>> {
    if channels == 0 || f.len() != channels * m.len() {
        return Err(Error::Shape(format!("{} feature values do not match {channels} channels over {} mask pixels", f.len(), m.len())));
    }
    let mut out = f.to_vec();
    for plane in out.chunks_mut(m.len()) {
        plane.iter_mut().zip(m).for_each(|(v, m)| *v *= m);
    }
    Ok(out)
}
