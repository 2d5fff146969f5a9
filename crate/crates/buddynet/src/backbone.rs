//! The encoder block: patch embedding with a trainable positional table
//! (bilinearly resampled when crop sizes differ from the native grid),
//! pre-norm transformer layers, and generalized-mean pooling projected to
//! the embedding dimension. Master and assistant are two `BlockParams` of
//! identical shape.

use crate::autodiff::{Graph, TensorId};
use crate::crop::PixelStats;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Native input side; the positional table covers (image_side/patch_side)².
    pub image_side: usize,
    pub patch_side: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    /// Output embedding dimension D.
    pub out_dim: usize,
}

impl BackboneConfig {
    pub fn desk_default() -> Self {
        BackboneConfig {
            image_side: 16,
            patch_side: 8,
            channels: 1,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
            out_dim: 64,
        }
    }

    /// ViT-small geometry: 224px inputs, 16px patches, 512-dim embeddings.
    pub fn full_scale() -> Self {
        BackboneConfig {
            image_side: 224,
            patch_side: 16,
            channels: 3,
            embed_dim: 384,
            num_layers: 12,
            num_heads: 6,
            mlp_ratio: 4.0,
            out_dim: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 || self.image_side % self.patch_side != 0 {
            return Err(Error::Validation(format!(
                "image side {} not divisible by patch side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Validation(format!(
                "embed dim {} not divisible by head count {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::Validation("mlp ratio must be positive".into()));
        }
        if self.channels == 0 || self.embed_dim == 0 || self.out_dim == 0 {
            return Err(Error::Validation("zero-sized backbone dimension".into()));
        }
        Ok(())
    }

    pub fn native_grid(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn native_tokens(&self) -> usize {
        self.native_grid() * self.native_grid()
    }

    pub fn hidden_dim(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    /// Tokens produced by a square input of the given side.
    pub fn tokens_for_side(&self, side: usize) -> Result<usize> {
        if side == 0 || side % self.patch_side != 0 {
            return Err(Error::Validation(format!(
                "input side {side} not divisible by patch side {}",
                self.patch_side
            )));
        }
        let g = side / self.patch_side;
        Ok(g * g)
    }
}

/// A named parameter tensor (plain storage; inserted into a graph per step).
#[derive(Clone, Debug, PartialEq)]
pub struct PTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl PTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        PTensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        PTensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        PTensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.normal_scaled(0.0, std)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: PTensor,
    pub ln1_beta: PTensor,
    pub w_qkv: PTensor,
    pub b_qkv: PTensor,
    pub w_proj: PTensor,
    pub b_proj: PTensor,
    pub ln2_gamma: PTensor,
    pub ln2_beta: PTensor,
    pub w_fc1: PTensor,
    pub b_fc1: PTensor,
    pub w_fc2: PTensor,
    pub b_fc2: PTensor,
}

/// Angular-margin classification head: raw class weights plus the softplus /
/// sigmoid pre-images of the learnable scale s and margin m.
#[derive(Clone, Debug, PartialEq)]
pub struct ArcFaceParams {
    pub w: PTensor,
    pub s_raw: PTensor,
    pub m_raw: PTensor,
}

pub const GEM_P_MIN: f64 = 1e-3;
pub const GEM_P_INIT: f64 = 3.0;

/// All parameters of one block. Master and assistant instances are always
/// shape-congruent, which the per-epoch weight transfer relies on.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub cfg: BackboneConfig,
    pub num_classes: usize,
    pub patch_w: PTensor,
    pub patch_b: PTensor,
    pub pos: PTensor,
    pub layers: Vec<LayerParams>,
    pub gem_p: PTensor,
    pub fc_w: PTensor,
    pub fc_b: PTensor,
    pub head: ArcFaceParams,
    /// Per-channel corpus pixel statistics (not trained).
    pub pixel_mean: PTensor,
    pub pixel_std: PTensor,
}

fn softplus_inverse(y: f64) -> f64 {
    // ln(e^y - 1), stable for the y ~ 30 used here
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

impl BlockParams {
    pub fn init(cfg: &BackboneConfig, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if num_classes < 2 {
            return Err(Error::Validation("need at least 2 classes".into()));
        }
        let e = cfg.embed_dim;
        let patch_in = cfg.patch_side * cfg.patch_side * cfg.channels;
        let hidden = cfg.hidden_dim();
        let layers = (0..cfg.num_layers)
            .map(|_| LayerParams {
                ln1_gamma: PTensor::full(&[e], 1.0),
                ln1_beta: PTensor::zeros(&[e]),
                w_qkv: PTensor::xavier(&[e, 3 * e], e, 3 * e, rng),
                b_qkv: PTensor::zeros(&[3 * e]),
                w_proj: PTensor::xavier(&[e, e], e, e, rng),
                b_proj: PTensor::zeros(&[e]),
                ln2_gamma: PTensor::full(&[e], 1.0),
                ln2_beta: PTensor::zeros(&[e]),
                w_fc1: PTensor::xavier(&[e, hidden], e, hidden, rng),
                b_fc1: PTensor::zeros(&[hidden]),
                w_fc2: PTensor::xavier(&[hidden, e], hidden, e, rng),
                b_fc2: PTensor::zeros(&[e]),
            })
            .collect();
        let t = cfg.native_tokens();
        let mut pos = PTensor::zeros(&[t, e]);
        for v in &mut pos.data {
            *v = rng.normal_scaled(0.0, 0.02);
        }
        Ok(BlockParams {
            cfg: *cfg,
            num_classes,
            patch_w: PTensor::xavier(&[patch_in, e], patch_in, e, rng),
            patch_b: PTensor::zeros(&[e]),
            pos,
            layers,
            gem_p: PTensor::full(&[1], GEM_P_INIT),
            fc_w: PTensor::xavier(&[e, cfg.out_dim], e, cfg.out_dim, rng),
            fc_b: PTensor::zeros(&[cfg.out_dim]),
            head: ArcFaceParams {
                w: PTensor::xavier(&[cfg.out_dim, num_classes], cfg.out_dim, num_classes, rng),
                s_raw: PTensor::full(&[1], softplus_inverse(30.0)),
                m_raw: PTensor::full(&[1], (0.6f64 / 0.4).ln()), // sigmoid⁻¹(0.6) → m = 0.3 of 0.5 max
            },
            pixel_mean: PTensor::zeros(&[cfg.channels]),
            pixel_std: PTensor::full(&[cfg.channels], 1.0),
        })
    }

    pub fn set_pixel_stats(&mut self, stats: &PixelStats) {
        self.pixel_mean.data = stats.mean.clone();
        self.pixel_std.data = stats.std.clone();
    }

    pub fn pixel_stats(&self) -> PixelStats {
        PixelStats { mean: self.pixel_mean.data.clone(), std: self.pixel_std.data.clone() }
    }

    /// Every tensor with a stable name, in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &PTensor)> {
        let mut out: Vec<(String, &PTensor)> = vec![
            ("patch.w".into(), &self.patch_w),
            ("patch.b".into(), &self.patch_b),
            ("pos".into(), &self.pos),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1.g"), &l.ln1_gamma));
            out.push((format!("layer{i}.ln1.b"), &l.ln1_beta));
            out.push((format!("layer{i}.qkv.w"), &l.w_qkv));
            out.push((format!("layer{i}.qkv.b"), &l.b_qkv));
            out.push((format!("layer{i}.proj.w"), &l.w_proj));
            out.push((format!("layer{i}.proj.b"), &l.b_proj));
            out.push((format!("layer{i}.ln2.g"), &l.ln2_gamma));
            out.push((format!("layer{i}.ln2.b"), &l.ln2_beta));
            out.push((format!("layer{i}.mlp1.w"), &l.w_fc1));
            out.push((format!("layer{i}.mlp1.b"), &l.b_fc1));
            out.push((format!("layer{i}.mlp2.w"), &l.w_fc2));
            out.push((format!("layer{i}.mlp2.b"), &l.b_fc2));
        }
        out.push(("gem.p".into(), &self.gem_p));
        out.push(("fc.w".into(), &self.fc_w));
        out.push(("fc.b".into(), &self.fc_b));
        out.push(("head.w".into(), &self.head.w));
        out.push(("head.s".into(), &self.head.s_raw));
        out.push(("head.m".into(), &self.head.m_raw));
        out.push(("pixel.mean".into(), &self.pixel_mean));
        out.push(("pixel.std".into(), &self.pixel_std));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut PTensor)> {
        let mut out: Vec<(String, &mut PTensor)> = vec![
            ("patch.w".into(), &mut self.patch_w),
            ("patch.b".into(), &mut self.patch_b),
            ("pos".into(), &mut self.pos),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.ln1.g"), &mut l.ln1_gamma));
            out.push((format!("layer{i}.ln1.b"), &mut l.ln1_beta));
            out.push((format!("layer{i}.qkv.w"), &mut l.w_qkv));
            out.push((format!("layer{i}.qkv.b"), &mut l.b_qkv));
            out.push((format!("layer{i}.proj.w"), &mut l.w_proj));
            out.push((format!("layer{i}.proj.b"), &mut l.b_proj));
            out.push((format!("layer{i}.ln2.g"), &mut l.ln2_gamma));
            out.push((format!("layer{i}.ln2.b"), &mut l.ln2_beta));
            out.push((format!("layer{i}.mlp1.w"), &mut l.w_fc1));
            out.push((format!("layer{i}.mlp1.b"), &mut l.b_fc1));
            out.push((format!("layer{i}.mlp2.w"), &mut l.w_fc2));
            out.push((format!("layer{i}.mlp2.b"), &mut l.b_fc2));
        }
        out.push(("gem.p".into(), &mut self.gem_p));
        out.push(("fc.w".into(), &mut self.fc_w));
        out.push(("fc.b".into(), &mut self.fc_b));
        out.push(("head.w".into(), &mut self.head.w));
        out.push(("head.s".into(), &mut self.head.s_raw));
        out.push(("head.m".into(), &mut self.head.m_raw));
        out.push(("pixel.mean".into(), &mut self.pixel_mean));
        out.push(("pixel.std".into(), &mut self.pixel_std));
        out
    }

    /// Tensors updated by the optimizer (pixel statistics are frozen).
    pub fn is_trainable(name: &str) -> bool {
        !name.starts_with("pixel.")
    }

    /// Clamp invariant-bound parameters after an optimizer step.
    pub fn clamp_invariants(&mut self) {
        if self.gem_p.data[0] < GEM_P_MIN {
            self.gem_p.data[0] = GEM_P_MIN;
        }
    }
}

// ---------------------------------------------------------------------------
// graph-side forward
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub ln1_gamma: TensorId,
    pub ln1_beta: TensorId,
    pub w_qkv: TensorId,
    pub b_qkv: TensorId,
    pub w_proj: TensorId,
    pub b_proj: TensorId,
    pub ln2_gamma: TensorId,
    pub ln2_beta: TensorId,
    pub w_fc1: TensorId,
    pub b_fc1: TensorId,
    pub w_fc2: TensorId,
    pub b_fc2: TensorId,
}

/// One block's trainable tensors inserted as graph leaves; shared by every
/// crop forward in the same step so gradients pool correctly.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub cfg: BackboneConfig,
    pub num_classes: usize,
    pub patch_w: TensorId,
    pub patch_b: TensorId,
    pub pos: TensorId,
    pub layers: Vec<LayerVars>,
    pub gem_p: TensorId,
    pub fc_w: TensorId,
    pub fc_b: TensorId,
    pub head_w: TensorId,
    pub head_s_raw: TensorId,
    pub head_m_raw: TensorId,
    pixel_stats: PixelStats,
}

impl BlockVars {
    pub fn insert(g: &mut Graph, p: &BlockParams) -> Result<Self> {
        let leaf = |g: &mut Graph, t: &PTensor| g.leaf(t.data.clone(), &t.shape);
        let mut layers = Vec::with_capacity(p.layers.len());
        let patch_w = leaf(g, &p.patch_w)?;
        let patch_b = leaf(g, &p.patch_b)?;
        let pos = leaf(g, &p.pos)?;
        for l in &p.layers {
            layers.push(LayerVars {
                ln1_gamma: leaf(g, &l.ln1_gamma)?,
                ln1_beta: leaf(g, &l.ln1_beta)?,
                w_qkv: leaf(g, &l.w_qkv)?,
                b_qkv: leaf(g, &l.b_qkv)?,
                w_proj: leaf(g, &l.w_proj)?,
                b_proj: leaf(g, &l.b_proj)?,
                ln2_gamma: leaf(g, &l.ln2_gamma)?,
                ln2_beta: leaf(g, &l.ln2_beta)?,
                w_fc1: leaf(g, &l.w_fc1)?,
                b_fc1: leaf(g, &l.b_fc1)?,
                w_fc2: leaf(g, &l.w_fc2)?,
                b_fc2: leaf(g, &l.b_fc2)?,
            });
        }
        Ok(BlockVars {
            cfg: p.cfg,
            num_classes: p.num_classes,
            patch_w,
            patch_b,
            pos,
            layers,
            gem_p: leaf(g, &p.gem_p)?,
            fc_w: leaf(g, &p.fc_w)?,
            fc_b: leaf(g, &p.fc_b)?,
            head_w: leaf(g, &p.head.w)?,
            head_s_raw: leaf(g, &p.head.s_raw)?,
            head_m_raw: leaf(g, &p.head.m_raw)?,
            pixel_stats: p.pixel_stats(),
        })
    }

    /// (name, leaf id) pairs for trainable tensors, mirroring
    /// `BlockParams::named_tensors` order.
    pub fn named(&self) -> Vec<(String, TensorId)> {
        let mut out: Vec<(String, TensorId)> = vec![
            ("patch.w".into(), self.patch_w),
            ("patch.b".into(), self.patch_b),
            ("pos".into(), self.pos),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1.g"), l.ln1_gamma));
            out.push((format!("layer{i}.ln1.b"), l.ln1_beta));
            out.push((format!("layer{i}.qkv.w"), l.w_qkv));
            out.push((format!("layer{i}.qkv.b"), l.b_qkv));
            out.push((format!("layer{i}.proj.w"), l.w_proj));
            out.push((format!("layer{i}.proj.b"), l.b_proj));
            out.push((format!("layer{i}.ln2.g"), l.ln2_gamma));
            out.push((format!("layer{i}.ln2.b"), l.ln2_beta));
            out.push((format!("layer{i}.mlp1.w"), l.w_fc1));
            out.push((format!("layer{i}.mlp1.b"), l.b_fc1));
            out.push((format!("layer{i}.mlp2.w"), l.w_fc2));
            out.push((format!("layer{i}.mlp2.b"), l.b_fc2));
        }
        out.push(("gem.p".into(), self.gem_p));
        out.push(("fc.w".into(), self.fc_w));
        out.push(("fc.b".into(), self.fc_b));
        out.push(("head.w".into(), self.head_w));
        out.push(("head.s".into(), self.head_s_raw));
        out.push(("head.m".into(), self.head_m_raw));
        out
    }
}

/// Assemble a `BlockVars` from externally created leaves, paired by the
/// names `BlockVars::named` uses. Lets the finite-difference oracle own the
/// leaf tensors. Pixel statistics default to identity.
pub fn vars_from_ids(
    cfg: &BackboneConfig,
    num_classes: usize,
    names: &[String],
    ids: &[TensorId],
) -> BlockVars {
    let lookup: std::collections::HashMap<&str, TensorId> =
        names.iter().map(String::as_str).zip(ids.iter().copied()).collect();
    let at = |name: &str| lookup[name];
    let layers = (0..cfg.num_layers)
        .map(|i| LayerVars {
            ln1_gamma: at(&format!("layer{i}.ln1.g")),
            ln1_beta: at(&format!("layer{i}.ln1.b")),
            w_qkv: at(&format!("layer{i}.qkv.w")),
            b_qkv: at(&format!("layer{i}.qkv.b")),
            w_proj: at(&format!("layer{i}.proj.w")),
            b_proj: at(&format!("layer{i}.proj.b")),
            ln2_gamma: at(&format!("layer{i}.ln2.g")),
            ln2_beta: at(&format!("layer{i}.ln2.b")),
            w_fc1: at(&format!("layer{i}.mlp1.w")),
            b_fc1: at(&format!("layer{i}.mlp1.b")),
            w_fc2: at(&format!("layer{i}.mlp2.w")),
            b_fc2: at(&format!("layer{i}.mlp2.b")),
        })
        .collect();
    BlockVars {
        cfg: *cfg,
        num_classes,
        patch_w: at("patch.w"),
        patch_b: at("patch.b"),
        pos: at("pos"),
        layers,
        gem_p: at("gem.p"),
        fc_w: at("fc.w"),
        fc_b: at("fc.b"),
        head_w: at("head.w"),
        head_s_raw: at("head.s"),
        head_m_raw: at("head.m"),
        pixel_stats: PixelStats::identity(cfg.channels),
    }
}

/// Flatten square-input pixels into the patch matrix [T, patch²·C] and
/// project, add bias and the (resampled) positional table.
pub fn patch_embed(
    g: &mut Graph,
    pixels: &[f64],
    side: usize,
    vars: &BlockVars,
) -> Result<TensorId> {
    let cfg = &vars.cfg;
    let t = cfg.tokens_for_side(side)?;
    let grid = side / cfg.patch_side;
    let p = cfg.patch_side;
    let c = cfg.channels;
    if pixels.len() != side * side * c {
        return Err(Error::ShapeMismatch {
            op: "patch_embed",
            lhs: vec![side, side, c],
            rhs: vec![pixels.len()],
        });
    }
    let mut patches = Vec::with_capacity(t * p * p * c);
    for py in 0..grid {
        for px in 0..grid {
            for dy in 0..p {
                let y = py * p + dy;
                let row_base = (y * side + px * p) * c;
                patches.extend_from_slice(&pixels[row_base..row_base + p * c]);
            }
        }
    }
    let x = g.leaf(patches, &[t, p * p * c])?;
    let projected = g.matmul(x, vars.patch_w)?;
    let with_bias = g.add(projected, vars.patch_b)?;
    let native = cfg.native_grid();
    let pos = if grid == native {
        vars.pos
    } else {
        g.pos_interp(vars.pos, native, grid)?
    };
    g.add(with_bias, pos)
}

fn layer_norm(
    g: &mut Graph,
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
) -> Result<TensorId> {
    let t = g.shape(x)[0];
    let mu = g.mean(x, Some(1))?;
    let mu = g.reshape(mu, &[t, 1])?;
    let centered = g.sub(x, mu)?;
    let sq = g.mul(centered, centered)?;
    let var = g.mean(sq, Some(1))?;
    let var = g.reshape(var, &[t, 1])?;
    let var_eps = g.add_scalar(var, 1e-6)?;
    let denom = g.sqrt(var_eps)?;
    let normed = g.div(centered, denom)?;
    let scaled = g.mul(normed, gamma)?;
    g.add(scaled, beta)
}

fn attention(
    g: &mut Graph,
    x: TensorId,
    layer: &LayerVars,
    cfg: &BackboneConfig,
    attn_probe: Option<&mut Vec<TensorId>>,
) -> Result<TensorId> {
    let e = cfg.embed_dim;
    let heads = cfg.num_heads;
    let dh = e / heads;
    let qkv = g.matmul(x, layer.w_qkv)?;
    let qkv = g.add(qkv, layer.b_qkv)?;
    let mut head_outputs = Vec::with_capacity(heads);
    let mut probes = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.slice_cols(qkv, h * dh, dh)?;
        let k = g.slice_cols(qkv, e + h * dh, dh)?;
        let v = g.slice_cols(qkv, 2 * e + h * dh, dh)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.mul_scalar(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax(scores, 1, 1.0)?;
        probes.push(attn);
        head_outputs.push(g.matmul(attn, v)?);
    }
    if let Some(out) = attn_probe {
        out.extend(probes);
    }
    let merged = g.concat_cols(&head_outputs)?;
    let projected = g.matmul(merged, layer.w_proj)?;
    g.add(projected, layer.b_proj)
}

/// Pre-norm transformer stack; zero layers is the identity.
pub fn vit_forward(g: &mut Graph, tokens: TensorId, vars: &BlockVars) -> Result<TensorId> {
    vit_forward_traced(g, tokens, vars, None)
}

/// As `vit_forward`, optionally collecting each layer/head attention matrix.
pub fn vit_forward_traced(
    g: &mut Graph,
    tokens: TensorId,
    vars: &BlockVars,
    mut attn_probe: Option<&mut Vec<TensorId>>,
) -> Result<TensorId> {
    let mut x = tokens;
    for layer in &vars.layers {
        let normed = layer_norm(g, x, layer.ln1_gamma, layer.ln1_beta)?;
        let attended = attention(g, normed, layer, &vars.cfg, attn_probe.as_deref_mut())?;
        x = g.add(x, attended)?;
        let normed = layer_norm(g, x, layer.ln2_gamma, layer.ln2_beta)?;
        let h = g.matmul(normed, layer.w_fc1)?;
        let h = g.add(h, layer.b_fc1)?;
        let h = g.gelu(h)?;
        let h = g.matmul(h, layer.w_fc2)?;
        let h = g.add(h, layer.b_fc2)?;
        x = g.add(x, h)?;
    }
    Ok(x)
}

/// Generalized-mean pooling over tokens followed by the projection to D.
///
/// Features pass through softplus first, since x^p needs a positive base;
/// the pool is computed as c·(mean (s/c)^p)^{1/p} with c the detached
/// per-column max, which is algebraically identical to the raw formula for
/// any positive c and keeps powers in range for large p.
pub fn gem_pool(g: &mut Graph, features: TensorId, vars: &BlockVars) -> Result<TensorId> {
    let shape = g.shape(features).to_vec();
    let (t, e) = (shape[0], shape[1]);
    let s = g.softplus(features)?;
    let mut col_max = vec![f64::NEG_INFINITY; e];
    for row in g.data(s).chunks_exact(e) {
        for (m, &v) in col_max.iter_mut().zip(row) {
            if v > *m {
                *m = v;
            }
        }
    }
    let scale = g.leaf(col_max, &[1, e])?;
    let y = g.div(s, scale)?;
    let powed = g.pow(y, vars.gem_p)?;
    let pooled = g.mean(powed, Some(0))?;
    let pooled = g.reshape(pooled, &[1, e])?;
    let one = g.scalar(1.0);
    let inv_p = g.div(one, vars.gem_p)?;
    let root = g.pow(pooled, inv_p)?;
    let rescaled = g.mul(root, scale)?;
    let _ = t;
    let projected = g.matmul(rescaled, vars.fc_w)?;
    g.add(projected, vars.fc_b)
}

/// Full embedding path for one square crop: pixel normalization, patch
/// embedding, transformer, GEM pool. Output shape [1, D].
pub fn embed(
    g: &mut Graph,
    pixels: &[f64],
    side: usize,
    vars: &BlockVars,
) -> Result<TensorId> {
    let normed = vars.pixel_stats.normalize(pixels, vars.cfg.channels);
    let tokens = patch_embed(g, &normed, side, vars)?;
    let features = vit_forward(g, tokens, vars)?;
    gem_pool(g, features, vars)
}

/// Convenience wrapper: embed one crop through a throwaway graph.
pub fn embed_array(params: &BlockParams, pixels: &[f64], side: usize) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars = BlockVars::insert(&mut g, params)?;
    let out = embed(&mut g, pixels, side, &vars)?;
    Ok(g.data(out).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::rng::Rng;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            image_side: 8,
            patch_side: 4,
            channels: 1,
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            mlp_ratio: 2.0,
            out_dim: 8,
        }
    }

    fn rand_pixels(rng: &mut Rng, side: usize, c: usize) -> Vec<f64> {
        (0..side * side * c).map(|_| rng.uniform()).collect()
    }

    #[test]
    fn token_counts() {
        let cfg = BackboneConfig::full_scale();
        assert_eq!(cfg.tokens_for_side(224).unwrap(), 196);
        assert_eq!(cfg.tokens_for_side(96).unwrap(), 36);
        assert!(cfg.tokens_for_side(97).is_err());
        let desk = BackboneConfig::desk_default();
        assert_eq!(desk.tokens_for_side(16).unwrap(), 4);
        assert_eq!(desk.tokens_for_side(8).unwrap(), 1);
    }

    #[test]
    fn config_invariants_enforced() {
        let mut cfg = BackboneConfig::desk_default();
        cfg.image_side = 17;
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::desk_default();
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_image_tokens_equal_pos_plus_bias() {
        let cfg = tiny_cfg();
        let mut rng = Rng::from_seed(1);
        let params = BlockParams::init(&cfg, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let vars = BlockVars::insert(&mut g, &params).unwrap();
        let zeros = vec![0.0; 8 * 8];
        let tokens = patch_embed(&mut g, &zeros, 8, &vars).unwrap();
        let e = cfg.embed_dim;
        for (ti, row) in g.data(tokens).chunks_exact(e).enumerate() {
            for (ci, v) in row.iter().enumerate() {
                let want = params.patch_b.data[ci] + params.pos.data[ti * e + ci];
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_layers_is_identity() {
        let mut cfg = tiny_cfg();
        cfg.num_layers = 0;
        let mut rng = Rng::from_seed(2);
        let params = BlockParams::init(&cfg, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let vars = BlockVars::insert(&mut g, &params).unwrap();
        let px = rand_pixels(&mut rng, 8, 1);
        let tokens = patch_embed(&mut g, &px, 8, &vars).unwrap();
        let out = vit_forward(&mut g, tokens, &vars).unwrap();
        assert_eq!(g.data(tokens), g.data(out));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = tiny_cfg();
        let mut rng = Rng::from_seed(3);
        let params = BlockParams::init(&cfg, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let vars = BlockVars::insert(&mut g, &params).unwrap();
        let px = rand_pixels(&mut rng, 8, 1);
        let tokens = patch_embed(&mut g, &px, 8, &vars).unwrap();
        let mut probes = Vec::new();
        vit_forward_traced(&mut g, tokens, &vars, Some(&mut probes)).unwrap();
        assert_eq!(probes.len(), cfg.num_layers * cfg.num_heads);
        for attn in probes {
            let t = g.shape(attn)[0];
            for row in g.data(attn).chunks_exact(t) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
            }
        }
    }

    #[test]
    fn token_permutation_equivariance() {
        // permuting tokens together with their positional rows permutes outputs
        let cfg = tiny_cfg();
        let mut rng = Rng::from_seed(4);
        let params = BlockParams::init(&cfg, 2, &mut rng).unwrap();
        let e = cfg.embed_dim;
        let t = cfg.native_tokens();
        let perm = [2usize, 0, 3, 1];

        let run = |tok_rows: &[f64]| {
            let mut g = Graph::new();
            let vars = BlockVars::insert(&mut g, &params).unwrap();
            let tokens = g.leaf(tok_rows.to_vec(), &[t, e]).unwrap();
            let out = vit_forward(&mut g, tokens, &vars).unwrap();
            g.data(out).to_vec()
        };
        let rows: Vec<f64> = (0..t * e).map(|_| rng.range(-1.0, 1.0)).collect();
        let base = run(&rows);
        let permuted: Vec<f64> = perm
            .iter()
            .flat_map(|&src| rows[src * e..(src + 1) * e].to_vec())
            .collect();
        let out_perm = run(&permuted);
        for (dst, &src) in perm.iter().enumerate() {
            for ci in 0..e {
                let a = out_perm[dst * e + ci];
                let b = base[src * e + ci];
                assert!((a - b).abs() < 1e-9, "row {dst} col {ci}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gem_p1_is_mean_pool_before_projection() {
        let cfg = tiny_cfg();
        let mut rng = Rng::from_seed(5);
        let mut params = BlockParams::init(&cfg, 2, &mut rng).unwrap();
        params.gem_p.data[0] = 1.0;
        // identity projection to observe the raw pooled vector
        params.fc_w = PTensor::zeros(&[8, 8]);
        for i in 0..8 {
            params.fc_w.data[i * 8 + i] = 1.0;
        }
        params.fc_b = PTensor::zeros(&[8]);
        let mut g = Graph::new();
        let vars = BlockVars::insert(&mut g, &params).unwrap();
        let feats: Vec<f64> = (0..4 * 8).map(|_| rng.range(-1.0, 1.0)).collect();
        let f = g.leaf(feats.clone(), &[4, 8]).unwrap();
        let out = gem_pool(&mut g, f, &vars).unwrap();
        for ci in 0..8 {
            let mean: f64 = (0..4)
                .map(|ti| {
                    let x: f64 = feats[ti * 8 + ci];
                    x.max(0.0) + (-x.abs()).exp().ln_1p()
                })
                .sum::<f64>()
                / 4.0;
            assert!((g.data(out)[ci] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn gem_large_p_approaches_max_pool() {
        // two tokens with clearly distinct maxima: the p=64 pool must land
        // within 2% of per-column max pooling
        let cfg = tiny_cfg();
        let mut rng = Rng::from_seed(6);
        let mut params = BlockParams::init(&cfg, 2, &mut rng).unwrap();
        params.gem_p.data[0] = 64.0;
        params.fc_w = PTensor::zeros(&[8, 8]);
        for i in 0..8 {
            params.fc_w.data[i * 8 + i] = 1.0;
        }
        params.fc_b = PTensor::zeros(&[8]);
        let mut g = Graph::new();
        let vars = BlockVars::insert(&mut g, &params).unwrap();
        let mut feats = vec![0.0; 2 * 8];
        for ci in 0..8 {
            let hi = rng.range(1.0, 2.0);
            feats[ci] = hi;
            feats[8 + ci] = hi - rng.range(0.5, 0.9);
        }
        let f = g.leaf(feats.clone(), &[2, 8]).unwrap();
        let out = gem_pool(&mut g, f, &vars).unwrap();
        for ci in 0..8 {
            let maxv: f64 = (0..2)
                .map(|ti| {
                    let x: f64 = feats[ti * 8 + ci];
                    x.max(0.0) + (-x.abs()).exp().ln_1p()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            let got = g.data(out)[ci];
            assert!((got - maxv).abs() / maxv <= 0.02, "col {ci}: {got} vs max {maxv}");
        }
    }

    #[test]
    fn gem_constant_features_invariant_in_p() {
        let cfg = tiny_cfg();
        let mut rng = Rng::from_seed(7);
        for p in [0.5, 1.0, 3.0, 8.0] {
            let mut params = BlockParams::init(&cfg, 2, &mut rng).unwrap();
            params.gem_p.data[0] = p;
            params.fc_w = PTensor::zeros(&[8, 8]);
            for i in 0..8 {
                params.fc_w.data[i * 8 + i] = 1.0;
            }
            params.fc_b = PTensor::zeros(&[8]);
            let mut g = Graph::new();
            let vars = BlockVars::insert(&mut g, &params).unwrap();
            let f = g.leaf(vec![0.8; 4 * 8], &[4, 8]).unwrap();
            let out = gem_pool(&mut g, f, &vars).unwrap();
            let c: f64 = 0.8f64.max(0.0) + (-0.8f64.abs()).exp().ln_1p();
            for v in g.data(out) {
                assert!((v - c).abs() < 1e-12, "p={p}: {v} vs {c}");
            }
        }
    }

    #[test]
    fn gem_monotone_in_p() {
        let cfg = tiny_cfg();
        let mut rng = Rng::from_seed(8);
        let feats: Vec<f64> = (0..4 * 8).map(|_| rng.range(-1.0, 1.5)).collect();
        let mut prev: Option<Vec<f64>> = None;
        for p in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let mut params = BlockParams::init(&cfg, 2, &mut rng).unwrap();
            params.gem_p.data[0] = p;
            params.fc_w = PTensor::zeros(&[8, 8]);
            for i in 0..8 {
                params.fc_w.data[i * 8 + i] = 1.0;
            }
            params.fc_b = PTensor::zeros(&[8]);
            let mut g = Graph::new();
            let vars = BlockVars::insert(&mut g, &params).unwrap();
            let f = g.leaf(feats.clone(), &[4, 8]).unwrap();
            let out = gem_pool(&mut g, f, &vars).unwrap();
            let vals = g.data(out).to_vec();
            if let Some(prev) = &prev {
                for (a, b) in prev.iter().zip(&vals) {
                    assert!(b + 1e-12 >= *a, "pool not monotone in p: {a} -> {b}");
                }
            }
            prev = Some(vals);
        }
    }

    #[test]
    fn embed_deterministic_and_blocks_differ() {
        let cfg = tiny_cfg();
        let mut rng = Rng::from_seed(9);
        let master = BlockParams::init(&cfg, 2, &mut rng).unwrap();
        let assistant = BlockParams::init(&cfg, 2, &mut rng).unwrap();
        let px = rand_pixels(&mut rng, 8, 1);
        let a = embed_array(&master, &px, 8).unwrap();
        let b = embed_array(&master, &px, 8).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.len(), cfg.out_dim);
        let c = embed_array(&assistant, &px, 8).unwrap();
        let dist: f64 = a.iter().zip(&c).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        assert!(dist > 0.0);
    }

    #[test]
    fn embed_shape_contract_across_crop_sides() {
        let cfg = BackboneConfig::desk_default();
        let mut rng = Rng::from_seed(10);
        let params = BlockParams::init(&cfg, 4, &mut rng).unwrap();
        for side in [8usize, 16, 32] {
            let px = rand_pixels(&mut rng, side, 1);
            let v = embed_array(&params, &px, side).unwrap();
            assert_eq!(v.len(), cfg.out_dim);
        }
    }

    /// Full-size geometry: 224px and 96px inputs both embed to 512 dims,
    /// with the positional table resampled from the 14x14 native grid.
    #[test]
    fn full_scale_embedding_is_512_for_both_crop_sides() {
        let mut cfg = BackboneConfig::full_scale();
        assert_eq!(cfg.out_dim, 512);
        // one layer keeps this test quick; geometry is what matters here
        cfg.num_layers = 1;
        let mut rng = Rng::from_seed(20);
        let params = BlockParams::init(&cfg, 2, &mut rng).unwrap();
        for side in [224usize, 96] {
            let px = rand_pixels(&mut rng, side, 3);
            let v = embed_array(&params, &px, side).unwrap();
            assert_eq!(v.len(), 512, "side {side}");
            assert!(v.iter().all(|x| x.is_finite()));
        }
    }

    /// Gradient of the full embed() composition vs finite differences, on a
    /// reduced desk config (side 16, patch 8, 2 layers, dim 16).
    #[test]
    fn embed_composition_passes_grad_check() {
        let cfg = BackboneConfig {
            image_side: 16,
            patch_side: 8,
            channels: 1,
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
            out_dim: 16,
        };
        let mut rng = Rng::from_seed(11);
        let params = BlockParams::init(&cfg, 2, &mut rng).unwrap();
        let px = rand_pixels(&mut rng, 16, 1);
        let named = params.named_tensors();
        let trainable: Vec<(String, Vec<f64>, Vec<usize>)> = named
            .iter()
            .filter(|(name, _)| BlockParams::is_trainable(name))
            .map(|(name, t)| (name.clone(), t.data.clone(), t.shape.clone()))
            .collect();
        let leaves: Vec<(&[f64], &[usize])> =
            trainable.iter().map(|(_, d, s)| (d.as_slice(), s.as_slice())).collect();
        let px_copy = px.clone();
        let names: Vec<String> = trainable.iter().map(|(n, _, _)| n.clone()).collect();
        let f = move |g: &mut Graph, ids: &[TensorId]| {
            let vars = vars_from_ids(&cfg, 2, &names, ids);
            let out = embed(g, &px_copy, 16, &vars)?;
            let sq = g.mul(out, out)?;
            g.sum(sq, None)
        };
        let err = grad_check(&f, &leaves, 1e-5).unwrap();
        assert!(err < 1e-4, "embed grad error {err}");
    }

    #[test]
    fn named_tensor_orders_agree() {
        let cfg = tiny_cfg();
        let mut rng = Rng::from_seed(12);
        let params = BlockParams::init(&cfg, 3, &mut rng).unwrap();
        let mut g = Graph::new();
        let vars = BlockVars::insert(&mut g, &params).unwrap();
        let param_names: Vec<String> = params
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| BlockParams::is_trainable(n))
            .collect();
        let var_names: Vec<String> = vars.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(param_names, var_names);
    }
}
