//! Dual-head vision transformer.
//!
//! Images are cut into fixed-size patches, linearly embedded, prefixed with a
//! learned class token, summed with a learned position table, and run through
//! pre-norm encoder blocks (multi-head self-attention + MLP, both residual).
//! The final class-token representation feeds two linear heads: one producing
//! per-class logits, one producing a scalar saturation-value prediction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledInstance;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

fn d_image_size() -> usize {
    64
}
fn d_patch_size() -> usize {
    16
}
fn d_channels() -> usize {
    1
}
fn d_embed_dim() -> usize {
    64
}
fn d_depth() -> usize {
    4
}
fn d_heads() -> usize {
    4
}
fn d_mlp_ratio() -> usize {
    4
}
fn d_num_classes() -> usize {
    3
}

/// Architecture hyperparameters. Defaults are sized for CPU-scale runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    #[serde(default = "d_image_size")]
    pub image_size: usize,
    #[serde(default = "d_patch_size")]
    pub patch_size: usize,
    #[serde(default = "d_channels")]
    pub channels: usize,
    #[serde(default = "d_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "d_depth")]
    pub depth: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "d_num_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: d_image_size(),
            patch_size: d_patch_size(),
            channels: d_channels(),
            embed_dim: d_embed_dim(),
            depth: d_depth(),
            heads: d_heads(),
            mlp_ratio: d_mlp_ratio(),
            num_classes: d_num_classes(),
            dropout: 0.0,
        }
    }
}

impl ViTConfig {
    /// Collects every violated constraint, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            violations.push(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels == 0 {
            violations.push("channels must be positive".to_string());
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            violations.push(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.num_classes < 2 {
            violations.push(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.depth == 0 {
            violations.push("depth must be positive".to_string());
        }
        if self.mlp_ratio == 0 {
            violations.push("mlp_ratio must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            violations.push(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::config(violations.join("; ")))
        }
    }

    /// Number of image patches `k`.
    pub fn num_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    /// Flattened patch length fed to the embedding.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Closed-form learnable parameter count:
    ///
    /// ```text
    /// p = patch_size^2 * channels, k = (image_size/patch_size)^2, r = mlp_ratio
    /// count = (p*d + d) + d + (k+1)*d
    ///       + depth * (4d + 4(d^2 + d) + (d*r*d + r*d) + (r*d*d + d))
    ///       + 2d + (d*C + C) + (d + 1)
    /// ```
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let p = self.patch_dim();
        let k = self.num_patches();
        let r = self.mlp_ratio;
        let c = self.num_classes;
        let per_block = 4 * d + 4 * (d * d + d) + (d * r * d + r * d) + (r * d * d + d);
        (p * d + d) + d + (k + 1) * d + self.depth * per_block + 2 * d + (d * c + c) + (d + 1)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// [in, out]
    pub weight: Tensor,
    /// [out]
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: Norm,
    pub attn: Attention,
    pub ln2: Norm,
    pub mlp: Mlp,
}

/// All learnable weights plus the config they were built for.
#[derive(Debug, Clone)]
pub struct ViTParams {
    pub config: ViTConfig,
    pub patch_embed: Linear,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
    pub head_class: Linear,
    pub head_value: Linear,
}

fn trunc_normal(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let x = normal.sample(rng);
        if x.abs() <= 2.0 * INIT_STD {
            data.push(x);
        }
    }
    Tensor::new(shape, data).expect("shape matches")
}

fn linear_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Linear {
    Linear {
        weight: trunc_normal(rng, vec![fan_in, fan_out]),
        bias: Tensor::zeros(vec![fan_out]),
    }
}

fn norm_init(d: usize) -> Norm {
    Norm {
        gamma: Tensor::full(vec![d], 1.0),
        beta: Tensor::zeros(vec![d]),
    }
}

impl ViTParams {
    /// Deterministic initialization: truncated-normal (sigma 0.02, cut at
    /// 2 sigma) weights, class token, and position table; zero biases;
    /// identity layer-norm affines.
    pub fn init(config: &ViTConfig, seed: u64) -> Result<ViTParams> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let patch_embed = linear_init(&mut rng, config.patch_dim(), d);
        let cls_token = trunc_normal(&mut rng, vec![d]);
        let pos_embed = trunc_normal(&mut rng, vec![config.num_patches() + 1, d]);
        let blocks = (0..config.depth)
            .map(|_| Block {
                ln1: norm_init(d),
                attn: Attention {
                    q: linear_init(&mut rng, d, d),
                    k: linear_init(&mut rng, d, d),
                    v: linear_init(&mut rng, d, d),
                    out: linear_init(&mut rng, d, d),
                },
                ln2: norm_init(d),
                mlp: Mlp {
                    fc1: linear_init(&mut rng, d, config.mlp_ratio * d),
                    fc2: linear_init(&mut rng, config.mlp_ratio * d, d),
                },
            })
            .collect();
        let final_norm = norm_init(d);
        let head_class = linear_init(&mut rng, d, config.num_classes);
        let head_value = linear_init(&mut rng, d, 1);
        Ok(ViTParams {
            config: config.clone(),
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            final_norm,
            head_class,
            head_value,
        })
    }

    /// Tensors in the canonical checkpoint order and naming scheme
    /// (`block.0.attn.q.weight`, ...).
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_embed.weight".into(), &self.patch_embed.weight),
            ("patch_embed.bias".into(), &self.patch_embed.bias),
            ("cls_token".into(), &self.cls_token),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let pairs: [(&str, &Tensor); 16] = [
                ("ln1.gamma", &b.ln1.gamma),
                ("ln1.beta", &b.ln1.beta),
                ("attn.q.weight", &b.attn.q.weight),
                ("attn.q.bias", &b.attn.q.bias),
                ("attn.k.weight", &b.attn.k.weight),
                ("attn.k.bias", &b.attn.k.bias),
                ("attn.v.weight", &b.attn.v.weight),
                ("attn.v.bias", &b.attn.v.bias),
                ("attn.out.weight", &b.attn.out.weight),
                ("attn.out.bias", &b.attn.out.bias),
                ("ln2.gamma", &b.ln2.gamma),
                ("ln2.beta", &b.ln2.beta),
                ("mlp.fc1.weight", &b.mlp.fc1.weight),
                ("mlp.fc1.bias", &b.mlp.fc1.bias),
                ("mlp.fc2.weight", &b.mlp.fc2.weight),
                ("mlp.fc2.bias", &b.mlp.fc2.bias),
            ];
            for (suffix, t) in pairs {
                out.push((format!("block.{i}.{suffix}"), t));
            }
        }
        out.push(("final_norm.gamma".into(), &self.final_norm.gamma));
        out.push(("final_norm.beta".into(), &self.final_norm.beta));
        out.push(("head.class.weight".into(), &self.head_class.weight));
        out.push(("head.class.bias".into(), &self.head_class.bias));
        out.push(("head.value.weight".into(), &self.head_value.weight));
        out.push(("head.value.bias".into(), &self.head_value.bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("patch_embed.weight".into(), &mut self.patch_embed.weight),
            ("patch_embed.bias".into(), &mut self.patch_embed.bias),
            ("cls_token".into(), &mut self.cls_token),
            ("pos_embed".into(), &mut self.pos_embed),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let pairs: [(&str, &mut Tensor); 16] = [
                ("ln1.gamma", &mut b.ln1.gamma),
                ("ln1.beta", &mut b.ln1.beta),
                ("attn.q.weight", &mut b.attn.q.weight),
                ("attn.q.bias", &mut b.attn.q.bias),
                ("attn.k.weight", &mut b.attn.k.weight),
                ("attn.k.bias", &mut b.attn.k.bias),
                ("attn.v.weight", &mut b.attn.v.weight),
                ("attn.v.bias", &mut b.attn.v.bias),
                ("attn.out.weight", &mut b.attn.out.weight),
                ("attn.out.bias", &mut b.attn.out.bias),
                ("ln2.gamma", &mut b.ln2.gamma),
                ("ln2.beta", &mut b.ln2.beta),
                ("mlp.fc1.weight", &mut b.mlp.fc1.weight),
                ("mlp.fc1.bias", &mut b.mlp.fc1.bias),
                ("mlp.fc2.weight", &mut b.mlp.fc2.weight),
                ("mlp.fc2.bias", &mut b.mlp.fc2.bias),
            ];
            for (suffix, t) in pairs {
                out.push((format!("block.{i}.{suffix}"), t));
            }
        }
        out.push(("final_norm.gamma".into(), &mut self.final_norm.gamma));
        out.push(("final_norm.beta".into(), &mut self.final_norm.beta));
        out.push(("head.class.weight".into(), &mut self.head_class.weight));
        out.push(("head.class.bias".into(), &mut self.head_class.bias));
        out.push(("head.value.weight".into(), &mut self.head_value.weight));
        out.push(("head.value.bias".into(), &mut self.head_value.bias));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }
}

/// Cuts `[H, W, C]` into row-major patches; each patch flattens in
/// (row, column, channel) order. Fixed so embeddings are portable across
/// save/load.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("patchify expects [H,W,C], got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::dim(format!(
            "image {h}x{w} not divisible by patch size {patch_size}"
        )));
    }
    let (ph, pw) = (h / patch_size, w / patch_size);
    let pdim = patch_size * patch_size * c;
    let mut out = Vec::with_capacity(ph * pw * pdim);
    for pr in 0..ph {
        for pc in 0..pw {
            for i in 0..patch_size {
                for j in 0..patch_size {
                    for ch in 0..c {
                        out.push(image.at3(pr * patch_size + i, pc * patch_size + j, ch));
                    }
                }
            }
        }
    }
    Tensor::new(vec![ph * pw, pdim], out)
}

/// Inverse of [`patchify`]; exact round-trip.
pub fn unpatchify(patches: &Tensor, h: usize, w: usize, c: usize, patch_size: usize) -> Result<Tensor> {
    let (ph, pw) = (h / patch_size, w / patch_size);
    let pdim = patch_size * patch_size * c;
    if patches.shape() != [ph * pw, pdim] {
        return Err(Error::dim(format!(
            "unpatchify expects [{}, {pdim}], got {:?}",
            ph * pw,
            patches.shape()
        )));
    }
    let mut img = Tensor::zeros(vec![h, w, c]);
    let pd = patches.data();
    for pr in 0..ph {
        for pc in 0..pw {
            let base = (pr * pw + pc) * pdim;
            let mut idx = 0;
            for i in 0..patch_size {
                for j in 0..patch_size {
                    for ch in 0..c {
                        img.set3(pr * patch_size + i, pc * patch_size + j, ch, pd[base + idx]);
                        idx += 1;
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Parameter handles registered on a graph, aligned with
/// [`ViTParams::named_tensors`] order.
pub struct BoundParams {
    patch_embed: (Var, Var),
    cls_token: Var,
    pos_embed: Var,
    blocks: Vec<BoundBlock>,
    final_norm: (Var, Var),
    head_class: (Var, Var),
    head_value: (Var, Var),
    named: Vec<(String, Var)>,
}

struct BoundBlock {
    ln1: (Var, Var),
    q: (Var, Var),
    k: (Var, Var),
    v: (Var, Var),
    out: (Var, Var),
    ln2: (Var, Var),
    fc1: (Var, Var),
    fc2: (Var, Var),
}

impl BoundParams {
    pub fn named_vars(&self) -> &[(String, Var)] {
        &self.named
    }
}

/// Registers every parameter tensor as a trainable leaf.
pub fn bind(g: &mut Graph, p: &ViTParams) -> BoundParams {
    let mut named = Vec::new();
    let mut reg = |g: &mut Graph, name: String, t: &Tensor| -> Var {
        let v = g.param(t.clone());
        named.push((name, v));
        v
    };
    let patch_embed = (
        reg(g, "patch_embed.weight".into(), &p.patch_embed.weight),
        reg(g, "patch_embed.bias".into(), &p.patch_embed.bias),
    );
    let cls_token = reg(g, "cls_token".into(), &p.cls_token);
    let pos_embed = reg(g, "pos_embed".into(), &p.pos_embed);
    let blocks = p
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| BoundBlock {
            ln1: (
                reg(g, format!("block.{i}.ln1.gamma"), &b.ln1.gamma),
                reg(g, format!("block.{i}.ln1.beta"), &b.ln1.beta),
            ),
            q: (
                reg(g, format!("block.{i}.attn.q.weight"), &b.attn.q.weight),
                reg(g, format!("block.{i}.attn.q.bias"), &b.attn.q.bias),
            ),
            k: (
                reg(g, format!("block.{i}.attn.k.weight"), &b.attn.k.weight),
                reg(g, format!("block.{i}.attn.k.bias"), &b.attn.k.bias),
            ),
            v: (
                reg(g, format!("block.{i}.attn.v.weight"), &b.attn.v.weight),
                reg(g, format!("block.{i}.attn.v.bias"), &b.attn.v.bias),
            ),
            out: (
                reg(g, format!("block.{i}.attn.out.weight"), &b.attn.out.weight),
                reg(g, format!("block.{i}.attn.out.bias"), &b.attn.out.bias),
            ),
            ln2: (
                reg(g, format!("block.{i}.ln2.gamma"), &b.ln2.gamma),
                reg(g, format!("block.{i}.ln2.beta"), &b.ln2.beta),
            ),
            fc1: (
                reg(g, format!("block.{i}.mlp.fc1.weight"), &b.mlp.fc1.weight),
                reg(g, format!("block.{i}.mlp.fc1.bias"), &b.mlp.fc1.bias),
            ),
            fc2: (
                reg(g, format!("block.{i}.mlp.fc2.weight"), &b.mlp.fc2.weight),
                reg(g, format!("block.{i}.mlp.fc2.bias"), &b.mlp.fc2.bias),
            ),
        })
        .collect();
    let final_norm = (
        reg(g, "final_norm.gamma".into(), &p.final_norm.gamma),
        reg(g, "final_norm.beta".into(), &p.final_norm.beta),
    );
    let head_class = (
        reg(g, "head.class.weight".into(), &p.head_class.weight),
        reg(g, "head.class.bias".into(), &p.head_class.bias),
    );
    let head_value = (
        reg(g, "head.value.weight".into(), &p.head_value.weight),
        reg(g, "head.value.bias".into(), &p.head_value.bias),
    );
    BoundParams {
        patch_embed,
        cls_token,
        pos_embed,
        blocks,
        final_norm,
        head_class,
        head_value,
        named,
    }
}

fn linear_2d(g: &mut Graph, x: Var, wb: (Var, Var)) -> Result<Var> {
    let h = g.matmul(x, wb.0)?;
    g.add_bias(h, wb.1)
}

fn dropout_mask(
    g: &mut Graph,
    x: Var,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    use rand::Rng;
    let n = g.value(x).numel();
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < p {
                0.0
            } else {
                1.0 / keep
            }
        })
        .collect();
    let shape = g.value(x).shape().to_vec();
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, m)
}

/// Full forward pass on an existing graph. `batch` is `[B, H, W, C]`.
/// Returns the class-logit node `[B, C]` and the value node `[B]`.
/// Dropout is applied only when `train` is set and the config asks for it,
/// drawing the masks from `rng`.
pub fn forward_on_graph(
    g: &mut Graph,
    bp: &BoundParams,
    cfg: &ViTConfig,
    batch: &Tensor,
    train: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Var)> {
    let s = batch.shape();
    if s.len() != 4 || s[1] != cfg.image_size || s[2] != cfg.image_size || s[3] != cfg.channels {
        return Err(Error::dim(format!(
            "batch {s:?} does not match config image {}x{}x{}",
            cfg.image_size, cfg.image_size, cfg.channels
        )));
    }
    let b = s[0];
    let k = cfg.num_patches();
    let d = cfg.embed_dim;
    let pdim = cfg.patch_dim();
    let t = k + 1;
    let use_dropout = train && cfg.dropout > 0.0;
    if use_dropout && rng.is_none() {
        return Err(Error::contract(
            "training forward with dropout requires an rng".to_string(),
        ));
    }

    // patch extraction happens outside the tape; pixels take no gradient
    let mut tokens = Vec::with_capacity(b * k * pdim);
    for bi in 0..b {
        let img = image_of_batch(batch, bi);
        let patches = patchify(&img, cfg.patch_size)?;
        tokens.extend_from_slice(patches.data());
    }
    let tok = g.constant(Tensor::new(vec![b * k, pdim], tokens)?);

    let mut x = linear_2d(g, tok, bp.patch_embed)?; // [b*k, d]
    x = g.reshape(x, vec![b, k, d])?;
    x = g.prepend_token(bp.cls_token, x)?; // [b, t, d]
    let flat_pos = g.reshape(bp.pos_embed, vec![t * d])?;
    x = g.reshape(x, vec![b, t * d])?;
    x = g.add_bias(x, flat_pos)?;
    x = g.reshape(x, vec![b, t, d])?;
    if use_dropout {
        x = dropout_mask(g, x, cfg.dropout, rng.as_deref_mut().unwrap())?;
    }

    let dh = d / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for blk in &bp.blocks {
        // attention, pre-norm
        let h = g.layer_norm(x, blk.ln1.0, blk.ln1.1, LN_EPS)?;
        let h2 = g.reshape(h, vec![b * t, d])?;
        let to_heads = |g: &mut Graph, y: Var| -> Result<Var> {
            let y = g.reshape(y, vec![b, t, d])?;
            let y = g.split_heads(y, cfg.heads)?;
            g.reshape(y, vec![b * cfg.heads, t, dh])
        };
        let q0 = linear_2d(g, h2, blk.q)?;
        let k0 = linear_2d(g, h2, blk.k)?;
        let v0 = linear_2d(g, h2, blk.v)?;
        let (qh, kh, vh) = (to_heads(g, q0)?, to_heads(g, k0)?, to_heads(g, v0)?);
        let scores = g.bmm_nt(qh, kh)?; // [b*heads, t, t]
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores, 2)?;
        let ctx = g.bmm(attn, vh)?; // [b*heads, t, dh]
        let ctx = g.reshape(ctx, vec![b, cfg.heads, t, dh])?;
        let ctx = g.merge_heads(ctx)?; // [b, t, d]
        let ctx2 = g.reshape(ctx, vec![b * t, d])?;
        let mut proj = linear_2d(g, ctx2, blk.out)?;
        if use_dropout {
            proj = dropout_mask(g, proj, cfg.dropout, rng.as_deref_mut().unwrap())?;
        }
        let proj = g.reshape(proj, vec![b, t, d])?;
        x = g.add(x, proj)?;

        // mlp, pre-norm
        let h = g.layer_norm(x, blk.ln2.0, blk.ln2.1, LN_EPS)?;
        let h2 = g.reshape(h, vec![b * t, d])?;
        let m = linear_2d(g, h2, blk.fc1)?;
        let m = g.gelu(m);
        let mut m = linear_2d(g, m, blk.fc2)?;
        if use_dropout {
            m = dropout_mask(g, m, cfg.dropout, rng.as_deref_mut().unwrap())?;
        }
        let m = g.reshape(m, vec![b, t, d])?;
        x = g.add(x, m)?;
    }

    let x = g.layer_norm(x, bp.final_norm.0, bp.final_norm.1, LN_EPS)?;
    let cls = g.take_token(x, 0)?; // [b, d]
    let logits = linear_2d(g, cls, bp.head_class)?; // [b, C]
    let value = linear_2d(g, cls, bp.head_value)?; // [b, 1]
    let value = g.reshape(value, vec![b])?;
    Ok((logits, value))
}

fn image_of_batch(batch: &Tensor, index: usize) -> Tensor {
    let s = batch.shape();
    let (h, w, c) = (s[1], s[2], s[3]);
    let per = h * w * c;
    Tensor::new(
        vec![h, w, c],
        batch.data()[index * per..(index + 1) * per].to_vec(),
    )
    .expect("slice length matches")
}

/// Inference forward pass: builds a throwaway graph, no dropout.
pub fn forward(params: &ViTParams, batch: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let bp = bind(&mut g, params);
    let (logits, value) = forward_on_graph(&mut g, &bp, &params.config, batch, false, None)?;
    Ok((g.value(logits).clone(), g.value(value).clone()))
}

/// Row-wise argmax; ties break toward the lowest index.
pub fn predict_class(class_logits: &Tensor) -> Result<Vec<usize>> {
    let s = class_logits.shape();
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::dim(format!(
            "predict_class expects [B, C>=2], got {s:?}"
        )));
    }
    let c = s[1];
    Ok(class_logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Slice-to-instance aggregation: mean of per-slice logits then argmax
/// (ties toward the lowest index), and mean of per-slice values.
pub fn aggregate_slice_outputs(logits: &Tensor, values: &Tensor) -> Result<(usize, f64)> {
    let s = logits.shape();
    if s.len() != 2 || values.shape() != [s[0]] {
        return Err(Error::dim(format!(
            "aggregation expects logits [S,C] and values [S], got {s:?} and {:?}",
            values.shape()
        )));
    }
    let (n, c) = (s[0] as f64, s[1]);
    let mut mean_logits = vec![0.0; c];
    for row in logits.data().chunks(c) {
        for (m, v) in mean_logits.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mean_value = values.data().iter().map(|v| v / n).sum::<f64>();
    let class = predict_class(&Tensor::new(vec![1, c], mean_logits)?)?[0];
    Ok((class, mean_value))
}

/// Instance-level prediction over all slices of one instance.
pub fn predict_instance(params: &ViTParams, instance: &LabeledInstance) -> Result<(usize, f64)> {
    if instance.slices.is_empty() {
        return Err(Error::contract(format!(
            "instance {} has no slices",
            instance.instance_id
        )));
    }
    let batch = crate::data::stack_images(&instance.slices)?;
    let (logits, values) = forward(params, &batch)?;
    aggregate_slice_outputs(&logits, &values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
            dropout: 0.0,
        }
    }

    fn random_batch(b: usize, cfg: &ViTConfig, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * cfg.image_size * cfg.image_size * cfg.channels;
        Tensor::new(
            vec![b, cfg.image_size, cfg.image_size, cfg.channels],
            (0..n).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_config();
        let a = ViTParams::init(&cfg, 42).unwrap();
        let b = ViTParams::init(&cfg, 42).unwrap();
        for ((_, ta), (_, tb)) in a.named_tensors().iter().zip(b.named_tensors()) {
            assert_eq!(ta.data(), tb.data());
        }
        let c = ViTParams::init(&cfg, 43).unwrap();
        assert_ne!(
            a.patch_embed.weight.data(),
            c.patch_embed.weight.data()
        );
    }

    #[test]
    fn config_error_lists_all_violations() {
        let cfg = ViTConfig {
            embed_dim: 65,
            heads: 4,
            num_classes: 1,
            ..ViTConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("embed_dim 65"), "{err}");
        assert!(err.contains("num_classes"), "{err}");
    }

    #[test]
    fn param_count_matches_enumeration() {
        for cfg in [tiny_config(), ViTConfig::default()] {
            let p = ViTParams::init(&cfg, 7).unwrap();
            let enumerated: usize = p.named_tensors().iter().map(|(_, t)| t.numel()).sum();
            assert_eq!(enumerated, cfg.param_count());
        }
    }

    #[test]
    fn bound_names_match_tensor_names() {
        let p = ViTParams::init(&tiny_config(), 1).unwrap();
        let mut g = Graph::new();
        let bp = bind(&mut g, &p);
        let tensor_names: Vec<String> =
            p.named_tensors().into_iter().map(|(n, _)| n).collect();
        let var_names: Vec<String> =
            bp.named_vars().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(tensor_names, var_names);
    }

    #[test]
    fn patchify_shapes_and_constant() {
        let img = Tensor::full(vec![32, 32, 1], 0.25);
        let p = patchify(&img, 16).unwrap();
        assert_eq!(p.shape(), &[4, 256]);
        assert!(p.data().iter().all(|&v| v == 0.25));
        assert!(patchify(&img, 5).is_err());
    }

    #[test]
    fn patchify_round_trip_exact() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::new(
            vec![12, 8, 2],
            (0..12 * 8 * 2).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap();
        let p = patchify(&img, 4).unwrap();
        let back = unpatchify(&p, 12, 8, 2, 4).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn forward_shape_contract() {
        let cfg = tiny_config();
        let p = ViTParams::init(&cfg, 5).unwrap();
        let batch = random_batch(2, &cfg, 11);
        let (logits, values) = forward(&p, &batch).unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
        assert_eq!(values.shape(), &[2]);
        assert!(logits.all_finite() && values.all_finite());
    }

    #[test]
    fn forward_rejects_mismatched_batch() {
        let cfg = tiny_config();
        let p = ViTParams::init(&cfg, 5).unwrap();
        let bad = Tensor::zeros(vec![2, 16, 16, 1]);
        assert!(forward(&p, &bad).is_err());
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let cfg = tiny_config();
        let p = ViTParams::init(&cfg, 5).unwrap();
        let batch = random_batch(3, &cfg, 13);
        let per = cfg.image_size * cfg.image_size;
        let perm = [2usize, 0, 1];
        let mut permuted = Vec::new();
        for &i in &perm {
            permuted.extend_from_slice(&batch.data()[i * per..(i + 1) * per]);
        }
        let pbatch = Tensor::new(batch.shape().to_vec(), permuted).unwrap();
        let (l1, v1) = forward(&p, &batch).unwrap();
        let (l2, v2) = forward(&p, &pbatch).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(&l2.data()[j * 3..(j + 1) * 3], &l1.data()[i * 3..(i + 1) * 3]);
            assert_eq!(v2.data()[j], v1.data()[i]);
        }
    }

    #[test]
    fn zeroed_heads_output_bias() {
        let cfg = tiny_config();
        let mut p = ViTParams::init(&cfg, 5).unwrap();
        p.head_class.weight = Tensor::zeros(vec![cfg.embed_dim, 3]);
        p.head_class.bias = Tensor::from_vec(vec![0.1, -0.2, 0.3]);
        p.head_value.weight = Tensor::zeros(vec![cfg.embed_dim, 1]);
        p.head_value.bias = Tensor::from_vec(vec![0.7]);
        let (logits, values) = forward(&p, &random_batch(2, &cfg, 17)).unwrap();
        for row in logits.data().chunks(3) {
            assert_eq!(row, &[0.1, -0.2, 0.3]);
        }
        assert_eq!(values.data(), &[0.7, 0.7]);
    }

    #[test]
    fn predict_class_rules() {
        let t = Tensor::new(vec![3, 3], vec![0.1, 2.0, -1.0, 5.0, 5.0, 5.0, -1.0, -0.5, -0.4])
            .unwrap();
        assert_eq!(predict_class(&t).unwrap(), vec![1, 0, 2]);
        // shift invariance per row
        let shifted =
            Tensor::new(vec![1, 3], vec![0.1 + 10.0, 2.0 + 10.0, -1.0 + 10.0]).unwrap();
        assert_eq!(predict_class(&shifted).unwrap(), vec![1]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_config();
        let p = ViTParams::init(&cfg, 5).unwrap();
        let batch = random_batch(2, &cfg, 19);
        let (l1, v1) = forward(&p, &batch).unwrap();
        let (l2, v2) = forward(&p, &batch).unwrap();
        assert_eq!(l1.data(), l2.data());
        assert_eq!(v1.data(), v2.data());
    }
}
