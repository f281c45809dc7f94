//! Miniature pre-LN vision transformer.
//!
//! Weights are stored `[in, out]` so a linear layer is `x · W + b`.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::BackboneConfig;
use crate::params::{uniform, xavier_uniform, Binder, ParamError, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Real, Result, Tensor, TensorError};

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockParams>,
}

/// Output of one transformer block.
pub struct BlockOutput {
    pub out: Var,
    /// Attention probabilities, one `N×N` matrix per head.
    pub attention: Vec<Var>,
}

pub(crate) fn ones(n: usize) -> Tensor<f32> {
    Tensor::full(&[n], 1.0)
}

pub(crate) fn zeros(n: usize) -> Tensor<f32> {
    Tensor::zeros(&[n])
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Result<Self, ParamError> {
        let d = cfg.dim;
        let grp = ParamGroup::Backbone;
        let mut add = |name: String, t: Tensor<f32>, decay: bool| store.add(name, t, grp, decay);
        let patch_w = add("backbone.patch.w".into(), xavier_uniform(rng, cfg.patch_dim(), d), true)?;
        let patch_b = add("backbone.patch.b".into(), zeros(d), false)?;
        let cls = add("backbone.cls".into(), uniform(rng, &[d], 0.035), false)?;
        let pos = add("backbone.pos".into(), uniform(rng, &[cfg.tokens(), d], 0.035), false)?;
        let hidden = d * cfg.mlp_ratio;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let n = |s: &str| format!("backbone.blocks.{l}.{s}");
            blocks.push(BlockParams {
                ln1_g: add(n("ln1.g"), ones(d), false)?,
                ln1_b: add(n("ln1.b"), zeros(d), false)?,
                qkv_w: add(n("attn.qkv.w"), xavier_uniform(rng, d, 3 * d), true)?,
                qkv_b: add(n("attn.qkv.b"), zeros(3 * d), false)?,
                proj_w: add(n("attn.proj.w"), xavier_uniform(rng, d, d), true)?,
                proj_b: add(n("attn.proj.b"), zeros(d), false)?,
                ln2_g: add(n("ln2.g"), ones(d), false)?,
                ln2_b: add(n("ln2.b"), zeros(d), false)?,
                fc1_w: add(n("mlp.fc1.w"), xavier_uniform(rng, d, hidden), true)?,
                fc1_b: add(n("mlp.fc1.b"), zeros(hidden), false)?,
                fc2_w: add(n("mlp.fc2.w"), xavier_uniform(rng, hidden, d), true)?,
                fc2_b: add(n("mlp.fc2.b"), zeros(d), false)?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
        })
    }

    /// Flattens an `H×W×C` image into row-major patches, `P × (p·p·C)`,
    /// each patch in `(row, col, channel)` order.
    pub fn patchify<T: Real>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.cfg;
        let want = [c.image_size, c.image_size, c.channels];
        if image.shape() != want {
            return Err(TensorError::ShapeMismatch {
                op: "patch_embed",
                lhs: image.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        let (p, side, ch) = (c.patch_size, c.patches_per_side(), c.channels);
        let mut data = Vec::with_capacity(image.numel());
        for py in 0..side {
            for px in 0..side {
                for y in 0..p {
                    let row = (py * p + y) * c.image_size + px * p;
                    data.extend_from_slice(&image.data()[row * ch..(row + p) * ch]);
                }
            }
        }
        Tensor::new(vec![side * side, c.patch_dim()], data)
    }

    /// Patch projection, CLS prepended, positional embedding added: `N×D`.
    pub fn patch_embed<T: Real>(&self, g: &mut Graph<T>, p: &mut Binder<T>, image: &Tensor<T>) -> Result<Var> {
        let patches = g.constant(self.patchify(image)?)?;
        let w = p.param(g, self.patch_w)?;
        let b = p.param(g, self.patch_b)?;
        let tokens = g.linear(patches, w, Some(b))?;
        let cls = p.param(g, self.cls)?;
        let grid = g.concat_rows(&[cls, tokens])?;
        let pos = p.param(g, self.pos)?;
        g.add(grid, pos)
    }

    /// `x + MHSA(LN(x))`, then `+ MLP(LN(·))`.
    pub fn block<T: Real>(&self, g: &mut Graph<T>, p: &mut Binder<T>, layer: usize, x: Var) -> Result<BlockOutput> {
        let bp = &self.blocks[layer];
        let d = self.cfg.dim;
        if g.shape(x).len() != 2 || g.shape(x)[1] != d {
            return Err(TensorError::InvalidShape {
                op: "transformer_block",
                shape: g.shape(x).to_vec(),
                reason: format!("expected N×{d}"),
            });
        }
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let (g1, b1) = (p.param(g, bp.ln1_g)?, p.param(g, bp.ln1_b)?);
        let h = g.layer_norm_affine(x, g1, b1)?;
        let (wqkv, bqkv) = (p.param(g, bp.qkv_w)?, p.param(g, bp.qkv_b)?);
        let qkv = g.linear(h, wqkv, Some(bqkv))?;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut attention = Vec::with_capacity(self.cfg.heads);
        for head in 0..self.cfg.heads {
            let q = g.slice_cols(qkv, head * dh, dh)?;
            let k = g.slice_cols(qkv, d + head * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * d + head * dh, dh)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale)?;
            let probs = g.softmax(scores)?;
            attention.push(probs);
            heads.push(g.matmul(probs, v)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.concat(&heads)? };
        let (wo, bo) = (p.param(g, bp.proj_w)?, p.param(g, bp.proj_b)?);
        let attn = g.linear(merged, wo, Some(bo))?;
        let x = g.add(x, attn)?;

        let (g2, b2) = (p.param(g, bp.ln2_g)?, p.param(g, bp.ln2_b)?);
        let h = g.layer_norm_affine(x, g2, b2)?;
        let (w1, c1) = (p.param(g, bp.fc1_w)?, p.param(g, bp.fc1_b)?);
        let h = g.linear(h, w1, Some(c1))?;
        let h = g.gelu(h)?;
        let (w2, c2) = (p.param(g, bp.fc2_w)?, p.param(g, bp.fc2_b)?);
        let h = g.linear(h, w2, Some(c2))?;
        let out = g.add(x, h)?;
        Ok(BlockOutput { out, attention })
    }

    /// Plain forward pass through every block.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &mut Binder<T>, image: &Tensor<T>) -> Result<Var> {
        let mut x = self.patch_embed(g, p, image)?;
        for l in 0..self.cfg.layers {
            x = self.block(g, p, l, x)?.out;
        }
        Ok(x)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch_w, self.patch_b, self.cls, self.pos];
        for b in &self.blocks {
            ids.extend([
                b.ln1_g, b.ln1_b, b.qkv_w, b.qkv_b, b.proj_w, b.proj_b, b.ln2_g, b.ln2_b, b.fc1_w, b.fc1_b, b.fc2_w,
                b.fc2_b,
            ]);
        }
        ids
    }
}
