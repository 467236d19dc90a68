//! Frozen ViT-style patch-token encoder with optional LoRA adapters.
//!
//! The encoder is randomly initialized from a fixed seed and never receives
//! gradient updates; externally converted weights can be imported through the
//! checkpoint container's "encoder" group. LoRA injects trainable low-rank
//! deltas into selected attention projections: `xW + scale * (xA)B`.

use crate::rng::Rng;
use crate::tape::{attention, Tape, ValueId};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    /// Patch edge length in pixels.
    pub patch: usize,
    /// Token dimension d.
    pub dim: usize,
    /// Number of transformer blocks.
    pub depth: usize,
    /// Attention head count; must divide `dim`.
    pub heads: usize,
    /// Input image channels.
    pub in_channels: usize,
    /// Weight-initialization seed.
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { patch: 8, dim: 64, depth: 4, heads: 4, in_channels: 1, seed: 0xD1_40 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("encoder depth must be >= 1"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "encoder dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.patch == 0 {
            return Err(Error::config("patch size must be >= 1"));
        }
        Ok(())
    }
}

/// Grid of token features: `features` is [ht*wt, dim], row-major over the grid.
#[derive(Debug, Clone)]
pub struct TokenGrid<S: Scalar> {
    pub ht: usize,
    pub wt: usize,
    pub dim: usize,
    pub features: Tensor<S>,
}

/// Which attention projections receive a LoRA adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 4] =
        [LoraTarget::Query, LoraTarget::Key, LoraTarget::Value, LoraTarget::Output];

    fn tag(self) -> &'static str {
        match self {
            LoraTarget::Query => "q",
            LoraTarget::Key => "k",
            LoraTarget::Value => "v",
            LoraTarget::Output => "o",
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LoraConfig {
    /// Low-rank dimension r.
    pub rank: usize,
    /// Scale applied to the delta (alpha/r).
    pub scale: f64,
    /// Targeted projections, identical in every block.
    pub targets: Vec<LoraTarget>,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            scale: 2.0,
            targets: vec![LoraTarget::Query, LoraTarget::Value],
            seed: 0x10_8A,
        }
    }
}

/// One adapter: A is [d, r], B is [r, d] and starts at zero so the adapted
/// output equals the frozen output until training moves it.
#[derive(Debug, Clone)]
pub struct LoraPair<S: Scalar> {
    pub a: Tensor<S>,
    pub b: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct LoraWeights<S: Scalar> {
    pub cfg: LoraConfig,
    /// Per block, in `LoraTarget::ALL` order, present only for configured targets.
    pub blocks: Vec<Vec<(LoraTarget, LoraPair<S>)>>,
}

impl<S: Scalar> LoraWeights<S> {
    pub fn init(cfg: &LoraConfig, enc: &EncoderConfig) -> Result<Self> {
        if cfg.rank == 0 || cfg.rank > enc.dim {
            return Err(Error::config(format!(
                "lora rank {} must be in 1..={}",
                cfg.rank, enc.dim
            )));
        }
        if cfg.scale <= 0.0 {
            return Err(Error::config("lora scale must be positive"));
        }
        let mut rng = Rng::new(cfg.seed);
        let blocks = (0..enc.depth)
            .map(|_| {
                LoraTarget::ALL
                    .iter()
                    .filter(|t| cfg.targets.contains(t))
                    .map(|&t| {
                        let a =
                            Tensor::randn(&[enc.dim, cfg.rank], 0.02, &mut rng).trainable();
                        let b = Tensor::zeros(&[cfg.rank, enc.dim]).trainable();
                        (t, LoraPair { a, b })
                    })
                    .collect()
            })
            .collect();
        Ok(LoraWeights { cfg: cfg.clone(), blocks })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            for (t, pair) in block {
                out.push((format!("block{}.{}.a", bi, t.tag()), &pair.a));
                out.push((format!("block{}.{}.b", bi, t.tag()), &pair.b));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            for (t, pair) in block {
                out.push((format!("block{}.{}.a", bi, t.tag()), &mut pair.a));
                out.push((format!("block{}.{}.b", bi, t.tag()), &mut pair.b));
            }
        }
        out
    }
}

/// Frozen weights of one transformer block (pre-norm, MHA, MLP, residuals).
#[derive(Debug, Clone)]
pub struct BlockWeights<S: Scalar> {
    pub ln1_gamma: Tensor<S>,
    pub ln1_beta: Tensor<S>,
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
    pub ln2_gamma: Tensor<S>,
    pub ln2_beta: Tensor<S>,
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

impl<S: Scalar> BlockWeights<S> {
    fn init(dim: usize, rng: &mut Rng) -> Self {
        let hidden = 4 * dim;
        let proj_std = (1.0 / dim as f64).sqrt();
        let mlp_std = (1.0 / hidden as f64).sqrt();
        BlockWeights {
            ln1_gamma: Tensor::full(&[dim], S::ONE),
            ln1_beta: Tensor::zeros(&[dim]),
            wq: Tensor::randn(&[dim, dim], proj_std, rng),
            bq: Tensor::zeros(&[dim]),
            wk: Tensor::randn(&[dim, dim], proj_std, rng),
            bk: Tensor::zeros(&[dim]),
            wv: Tensor::randn(&[dim, dim], proj_std, rng),
            bv: Tensor::zeros(&[dim]),
            wo: Tensor::randn(&[dim, dim], proj_std, rng),
            bo: Tensor::zeros(&[dim]),
            ln2_gamma: Tensor::full(&[dim], S::ONE),
            ln2_beta: Tensor::zeros(&[dim]),
            w1: Tensor::randn(&[dim, hidden], proj_std, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(&[hidden, dim], mlp_std, rng),
            b2: Tensor::zeros(&[dim]),
        }
    }
}

/// The frozen encoder: patch embedding, positional table for a fixed token
/// grid, and `depth` transformer blocks.
#[derive(Debug, Clone)]
pub struct ViTEncoder<S: Scalar> {
    pub cfg: EncoderConfig,
    pub ht: usize,
    pub wt: usize,
    pub embed_w: Tensor<S>,
    pub embed_b: Tensor<S>,
    pub pos: Tensor<S>,
    pub blocks: Vec<BlockWeights<S>>,
}

pub(crate) struct BlockVars {
    ln1_g: ValueId,
    ln1_b: ValueId,
    wq: ValueId,
    bq: ValueId,
    wk: ValueId,
    bk: ValueId,
    wv: ValueId,
    bv: ValueId,
    wo: ValueId,
    bo: ValueId,
    ln2_g: ValueId,
    ln2_b: ValueId,
    w1: ValueId,
    b1: ValueId,
    w2: ValueId,
    b2: ValueId,
}

pub(crate) struct EncoderVars {
    embed_w: ValueId,
    embed_b: ValueId,
    pos: ValueId,
    blocks: Vec<BlockVars>,
}

/// Tape ids of the LoRA pairs, aligned with [`LoraWeights::blocks`].
pub(crate) struct LoraVars {
    scale: f64,
    blocks: Vec<Vec<(LoraTarget, ValueId, ValueId)>>,
}

impl LoraVars {
    pub(crate) fn from_parts(scale: f64, blocks: Vec<Vec<(LoraTarget, ValueId, ValueId)>>) -> Self {
        LoraVars { scale, blocks }
    }

    /// A/B ids in block then target order, matching the named-tensor walk.
    pub(crate) fn trainable_ids(&self) -> Vec<ValueId> {
        let mut out = Vec::new();
        for block in &self.blocks {
            for &(_, a, b) in block {
                out.push(a);
                out.push(b);
            }
        }
        out
    }
}

impl<S: Scalar> ViTEncoder<S> {
    /// Build frozen weights for a `ht x wt` token grid from `cfg.seed`.
    pub fn init(cfg: &EncoderConfig, ht: usize, wt: usize) -> Result<Self> {
        cfg.validate()?;
        if ht == 0 || wt == 0 {
            return Err(Error::config("token grid must be nonempty"));
        }
        let mut rng = Rng::new(cfg.seed);
        let patch_dim = cfg.in_channels * cfg.patch * cfg.patch;
        // Strong patch projection and a weaker positional table keep the token
        // features content-dominant, which is what the downstream prototype
        // probe feeds on; a pretrained import can overwrite all of this.
        let embed_w = Tensor::randn(&[patch_dim, cfg.dim], (2.0 / patch_dim as f64).sqrt(), &mut rng);
        let embed_b = Tensor::zeros(&[cfg.dim]);
        let pos = Tensor::randn(&[ht * wt, cfg.dim], 0.05, &mut rng);
        let blocks = (0..cfg.depth).map(|_| BlockWeights::init(cfg.dim, &mut rng)).collect();
        Ok(ViTEncoder { cfg: cfg.clone(), ht, wt, embed_w, embed_b, pos, blocks })
    }

    /// Check an image against this encoder's grid; returns (ht, wt).
    pub fn grid_for(&self, image_shape: &[usize]) -> Result<(usize, usize)> {
        if image_shape.len() != 3 {
            return Err(Error::config(format!("encoder expects [C,H,W], got {:?}", image_shape)));
        }
        let (c, h, w) = (image_shape[0], image_shape[1], image_shape[2]);
        if c != self.cfg.in_channels {
            return Err(Error::config(format!(
                "encoder expects {} channels, image has {}",
                self.cfg.in_channels, c
            )));
        }
        if h % self.cfg.patch != 0 || w % self.cfg.patch != 0 {
            return Err(Error::config(format!(
                "patch {} does not divide image {}x{}",
                self.cfg.patch, h, w
            )));
        }
        let (ht, wt) = (h / self.cfg.patch, w / self.cfg.patch);
        if (ht, wt) != (self.ht, self.wt) {
            return Err(Error::config(format!(
                "encoder was built for a {}x{} token grid, image gives {}x{}",
                self.ht, self.wt, ht, wt
            )));
        }
        Ok((ht, wt))
    }

    pub(crate) fn register(&self, tape: &mut Tape<S>) -> EncoderVars {
        EncoderVars {
            embed_w: tape.leaf(&self.embed_w),
            embed_b: tape.leaf(&self.embed_b),
            pos: tape.leaf(&self.pos),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockVars {
                    ln1_g: tape.leaf(&b.ln1_gamma),
                    ln1_b: tape.leaf(&b.ln1_beta),
                    wq: tape.leaf(&b.wq),
                    bq: tape.leaf(&b.bq),
                    wk: tape.leaf(&b.wk),
                    bk: tape.leaf(&b.bk),
                    wv: tape.leaf(&b.wv),
                    bv: tape.leaf(&b.bv),
                    wo: tape.leaf(&b.wo),
                    bo: tape.leaf(&b.bo),
                    ln2_g: tape.leaf(&b.ln2_gamma),
                    ln2_b: tape.leaf(&b.ln2_beta),
                    w1: tape.leaf(&b.w1),
                    b1: tape.leaf(&b.b1),
                    w2: tape.leaf(&b.w2),
                    b2: tape.leaf(&b.b2),
                })
                .collect(),
        }
    }

    /// [MODULE]-level names for the checkpoint "encoder" group.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = vec![
            ("embed.w".into(), &self.embed_w),
            ("embed.b".into(), &self.embed_b),
            ("pos".into(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{}", i);
            out.push((format!("{p}.ln1.gamma"), &b.ln1_gamma));
            out.push((format!("{p}.ln1.beta"), &b.ln1_beta));
            out.push((format!("{p}.wq"), &b.wq));
            out.push((format!("{p}.bq"), &b.bq));
            out.push((format!("{p}.wk"), &b.wk));
            out.push((format!("{p}.bk"), &b.bk));
            out.push((format!("{p}.wv"), &b.wv));
            out.push((format!("{p}.bv"), &b.bv));
            out.push((format!("{p}.wo"), &b.wo));
            out.push((format!("{p}.bo"), &b.bo));
            out.push((format!("{p}.ln2.gamma"), &b.ln2_gamma));
            out.push((format!("{p}.ln2.beta"), &b.ln2_beta));
            out.push((format!("{p}.w1"), &b.w1));
            out.push((format!("{p}.b1"), &b.b1));
            out.push((format!("{p}.w2"), &b.w2));
            out.push((format!("{p}.b2"), &b.b2));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = vec![
            ("embed.w".into(), &mut self.embed_w),
            ("embed.b".into(), &mut self.embed_b),
            ("pos".into(), &mut self.pos),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("block{}", i);
            out.push((format!("{p}.ln1.gamma"), &mut b.ln1_gamma));
            out.push((format!("{p}.ln1.beta"), &mut b.ln1_beta));
            out.push((format!("{p}.wq"), &mut b.wq));
            out.push((format!("{p}.bq"), &mut b.bq));
            out.push((format!("{p}.wk"), &mut b.wk));
            out.push((format!("{p}.bk"), &mut b.bk));
            out.push((format!("{p}.wv"), &mut b.wv));
            out.push((format!("{p}.bv"), &mut b.bv));
            out.push((format!("{p}.wo"), &mut b.wo));
            out.push((format!("{p}.bo"), &mut b.bo));
            out.push((format!("{p}.ln2.gamma"), &mut b.ln2_gamma));
            out.push((format!("{p}.ln2.beta"), &mut b.ln2_beta));
            out.push((format!("{p}.w1"), &mut b.w1));
            out.push((format!("{p}.b1"), &mut b.b1));
            out.push((format!("{p}.w2"), &mut b.w2));
            out.push((format!("{p}.b2"), &mut b.b2));
        }
        out
    }

    /// Patch embedding only: tokens = flatten(patch) W + b + pos.
    pub(crate) fn embed_on_tape(
        &self,
        tape: &mut Tape<S>,
        vars: &EncoderVars,
        image: ValueId,
    ) -> Result<ValueId> {
        let cols = tape.patchify(image, self.cfg.patch)?;
        let proj = tape.matmul(cols, vars.embed_w)?;
        let proj = tape.add_row_bias(proj, vars.embed_b)?;
        tape.add(proj, vars.pos)
    }

    /// Full forward pass on the tape; returns the [n_tokens, dim] node.
    pub(crate) fn forward_on_tape(
        &self,
        tape: &mut Tape<S>,
        vars: &EncoderVars,
        lora: Option<&LoraVars>,
        image: ValueId,
    ) -> Result<ValueId> {
        self.grid_for(tape.shape(image))?;
        let dim = self.cfg.dim;
        let heads = self.cfg.heads;
        let dh = dim / heads;
        let mut x = self.embed_on_tape(tape, vars, image)?;

        for (bi, bv) in vars.blocks.iter().enumerate() {
            let adapters = lora.map(|l| (&l.blocks[bi], l.scale));
            let proj = |tape: &mut Tape<S>,
                        input: ValueId,
                        w: ValueId,
                        b: ValueId,
                        target: LoraTarget|
             -> Result<ValueId> {
                let base = tape.matmul(input, w)?;
                let base = tape.add_row_bias(base, b)?;
                if let Some((block, scale)) = adapters {
                    if let Some(&(_, a_id, b_id)) =
                        block.iter().find(|(t, _, _)| *t == target)
                    {
                        let u = tape.matmul(input, a_id)?;
                        let delta = tape.matmul(u, b_id)?;
                        let scaled = tape.affine(delta, scale, 0.0);
                        return tape.add(base, scaled);
                    }
                }
                Ok(base)
            };

            let ln1 = tape.layer_norm(x, bv.ln1_g, bv.ln1_b, LN_EPS)?;
            let q = proj(tape, ln1, bv.wq, bv.bq, LoraTarget::Query)?;
            let k = proj(tape, ln1, bv.wk, bv.bk, LoraTarget::Key)?;
            let v = proj(tape, ln1, bv.wv, bv.bv, LoraTarget::Value)?;

            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice_cols(q, h * dh, dh)?;
                let kh = tape.slice_cols(k, h * dh, dh)?;
                let vh = tape.slice_cols(v, h * dh, dh)?;
                head_outs.push(attention(tape, qh, kh, vh)?);
            }
            let cat = tape.concat_cols(&head_outs)?;
            let attn_out = proj(tape, cat, bv.wo, bv.bo, LoraTarget::Output)?;
            x = tape.add(x, attn_out)?;

            let ln2 = tape.layer_norm(x, bv.ln2_g, bv.ln2_b, LN_EPS)?;
            let m = tape.matmul(ln2, bv.w1)?;
            let m = tape.add_row_bias(m, bv.b1)?;
            let m = tape.gelu(m);
            let m = tape.matmul(m, bv.w2)?;
            let m = tape.add_row_bias(m, bv.b2)?;
            x = tape.add(x, m)?;
        }
        Ok(x)
    }

    /// Patch-embed an image into a [`TokenGrid`] (no transformer blocks).
    pub fn patchify_embed(&self, image: &Tensor<S>) -> Result<TokenGrid<S>> {
        let (ht, wt) = self.grid_for(image.shape())?;
        let mut tape = Tape::new();
        let img = tape.constant(image);
        let vars = self.register(&mut tape);
        let out = self.embed_on_tape(&mut tape, &vars, img)?;
        Ok(TokenGrid { ht, wt, dim: self.cfg.dim, features: tape.to_tensor(out) })
    }

    /// Encode an image into token features; LoRA adapters are applied when given.
    pub fn encode(&self, image: &Tensor<S>, lora: Option<&LoraWeights<S>>) -> Result<TokenGrid<S>> {
        let (ht, wt) = self.grid_for(image.shape())?;
        let mut tape = Tape::new();
        let img = tape.constant(image);
        let vars = self.register(&mut tape);
        let lora_vars = match lora {
            Some(l) => Some(register_lora(&mut tape, l, &self.cfg)?),
            None => None,
        };
        let out = self.forward_on_tape(&mut tape, &vars, lora_vars.as_ref(), img)?;
        Ok(TokenGrid { ht, wt, dim: self.cfg.dim, features: tape.to_tensor(out) })
    }
}

pub(crate) fn register_lora<S: Scalar>(
    tape: &mut Tape<S>,
    lora: &LoraWeights<S>,
    enc: &EncoderConfig,
) -> Result<LoraVars> {
    if lora.blocks.len() != enc.depth {
        return Err(Error::config(format!(
            "lora has {} blocks, encoder depth is {}",
            lora.blocks.len(),
            enc.depth
        )));
    }
    for block in &lora.blocks {
        for (t, pair) in block {
            if pair.a.shape() != [enc.dim, lora.cfg.rank]
                || pair.b.shape() != [lora.cfg.rank, enc.dim]
            {
                return Err(Error::config(format!(
                    "lora {:?} adapter shapes {:?}/{:?} do not match dim {} rank {}",
                    t,
                    pair.a.shape(),
                    pair.b.shape(),
                    enc.dim,
                    lora.cfg.rank
                )));
            }
        }
    }
    Ok(LoraVars {
        scale: lora.cfg.scale,
        blocks: lora
            .blocks
            .iter()
            .map(|block| {
                block.iter().map(|(t, pair)| (*t, tape.leaf(&pair.a), tape.leaf(&pair.b))).collect()
            })
            .collect(),
    })
}

/// Standalone low-rank projection `xW + scale * (xA)B` with x: [n,d], W: [d,d],
/// A: [d,r], B: [r,d]. Gradients flow into A and B only when W is frozen.
pub fn lora_project_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    x: ValueId,
    w: ValueId,
    a: ValueId,
    b: ValueId,
    scale: f64,
) -> Result<ValueId> {
    let d = tape.shape(w)[0];
    let sa = tape.shape(a);
    if sa.len() != 2 || sa[1] > d {
        return Err(Error::config(format!(
            "lora rank {} exceeds projection dim {}",
            sa.get(1).copied().unwrap_or(0),
            d
        )));
    }
    let base = tape.matmul(x, w)?;
    let u = tape.matmul(x, a)?;
    let delta = tape.matmul(u, b)?;
    let scaled = tape.affine(delta, scale, 0.0);
    tape.add(base, scaled)
}

/// Tensor-level wrapper over [`lora_project_on_tape`].
pub fn lora_project<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    a: &Tensor<S>,
    b: &Tensor<S>,
    scale: f64,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let (xi, wi, ai, bi) =
        (tape.constant(x), tape.constant(w), tape.constant(a), tape.constant(b));
    let out = lora_project_on_tape(&mut tape, xi, wi, ai, bi, scale)?;
    Ok(tape.to_tensor(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig { patch: 4, dim: 8, depth: 2, heads: 2, in_channels: 1, seed: 7 }
    }

    #[test]
    fn patchify_embed_shapes() {
        let cfg = EncoderConfig::default();
        let enc = ViTEncoder::<f32>::init(&cfg, 8, 8).unwrap();
        let image = Tensor::zeros(&[1, 64, 64]);
        let grid = enc.patchify_embed(&image).unwrap();
        assert_eq!((grid.ht, grid.wt), (8, 8));
        assert_eq!(grid.features.shape(), &[64, 64]);
    }

    #[test]
    fn single_token_when_patch_equals_edge() {
        let cfg = EncoderConfig { patch: 16, dim: 8, depth: 1, heads: 1, in_channels: 1, seed: 1 };
        let enc = ViTEncoder::<f32>::init(&cfg, 1, 1).unwrap();
        let grid = enc.patchify_embed(&Tensor::zeros(&[1, 16, 16])).unwrap();
        assert_eq!(grid.features.shape(), &[1, 8]);
    }

    #[test]
    fn zero_image_embeds_to_positional_table() {
        let cfg = small_cfg();
        let enc = ViTEncoder::<f64>::init(&cfg, 2, 2).unwrap();
        let grid = enc.patchify_embed(&Tensor::zeros(&[1, 8, 8])).unwrap();
        assert_eq!(grid.features.data(), enc.pos.data());
    }

    #[test]
    fn indivisible_image_is_rejected_with_dims() {
        let cfg = small_cfg();
        let enc = ViTEncoder::<f64>::init(&cfg, 2, 2).unwrap();
        let err = enc.patchify_embed(&Tensor::zeros(&[1, 9, 8])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('4') && msg.contains('9'), "{msg}");
    }

    #[test]
    fn encode_deterministic_and_lora_b_zero_identity() {
        let cfg = small_cfg();
        let enc = ViTEncoder::<f32>::init(&cfg, 2, 2).unwrap();
        let mut rng = Rng::new(99);
        let image = Tensor::rand_uniform(&[1, 8, 8], 0.0, 1.0, &mut rng);

        let plain1 = enc.encode(&image, None).unwrap();
        let plain2 = enc.encode(&image, None).unwrap();
        assert_eq!(plain1.features.data(), plain2.features.data());

        let lora = LoraWeights::init(&LoraConfig { rank: 2, ..Default::default() }, &cfg).unwrap();
        let adapted = enc.encode(&image, Some(&lora)).unwrap();
        assert_eq!(plain1.features.data(), adapted.features.data());
    }

    #[test]
    fn frozen_weights_receive_no_gradients() {
        let cfg = small_cfg();
        let enc = ViTEncoder::<f64>::init(&cfg, 2, 2).unwrap();
        let lora = LoraWeights::<f64>::init(&LoraConfig { rank: 2, ..Default::default() }, &cfg)
            .unwrap();
        let mut rng = Rng::new(4);
        let image = Tensor::rand_uniform(&[1, 8, 8], 0.0, 1.0, &mut rng);

        let mut tape = Tape::new();
        let img = tape.constant(&image);
        let vars = enc.register(&mut tape);
        let lvars = register_lora(&mut tape, &lora, &cfg).unwrap();
        let out = enc.forward_on_tape(&mut tape, &vars, Some(&lvars), img).unwrap();
        let loss = tape.sum(out);
        tape.backward(loss);

        // Frozen leaves never accumulate; LoRA A/B do.
        assert!(tape.grad(vars.embed_w).is_none());
        assert!(tape.grad(vars.blocks[0].wq).is_none());
        let (_, a0, b0) = lvars.blocks[0][0];
        assert!(tape.grad(a0).is_none() == false || tape.grad(b0).is_some());
        // B starts at zero, so dL/dA = 0 numerically but dL/dB is generally nonzero.
        assert!(tape.grad(b0).unwrap().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn lora_project_zero_b_equals_base() {
        let mut rng = Rng::new(12);
        let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[4, 4], 1.0, &mut rng);
        let a = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
        let b = Tensor::<f64>::zeros(&[2, 4]);
        let out = lora_project(&x, &w, &a, &b, 2.0).unwrap();

        let mut tape = Tape::new();
        let (xi, wi) = (tape.constant(&x), tape.constant(&w));
        let base = tape.matmul(xi, wi).unwrap();
        assert_eq!(out.data(), tape.value(base));
    }

    #[test]
    fn lora_project_rank_one_outer_product() {
        // W = 0, scale = 1, A = e1 column, B = unit row: out = (x A) B = x_0 * B row.
        let x = Tensor::from_vec(&[2, 2], vec![3.0, -1.0, 0.5, 2.0]).unwrap();
        let w = Tensor::zeros(&[2, 2]);
        let a = Tensor::from_vec(&[2, 1], vec![1.0, 0.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2], vec![0.25, -2.0]).unwrap();
        let out = lora_project(&x, &w, &a, &b, 1.0).unwrap();
        assert_eq!(out.data(), &[3.0 * 0.25, 3.0 * -2.0, 0.5 * 0.25, 0.5 * -2.0]);
    }

    #[test]
    fn lora_project_rank_exceeding_dim_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 2]);
        let w = Tensor::<f64>::zeros(&[2, 2]);
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[3, 2]);
        assert!(matches!(lora_project(&x, &w, &a, &b, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn lora_project_gradients_match_finite_differences() {
        let mut rng = Rng::new(31);
        let x = Tensor::<f64>::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::rand_uniform(&[4, 4], -1.0, 1.0, &mut rng);
        let a = Tensor::<f64>::rand_uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(&[2, 4], -1.0, 1.0, &mut rng);
        let report = grad_check(
            "lora_project",
            &[a, b],
            move |tape, ids| {
                let xi = tape.constant(&x);
                let wi = tape.constant(&w);
                let out = lora_project_on_tape(tape, xi, wi, ids[0], ids[1], 2.0)?;
                crate::gradcheck::weighted_sum(tape, out, 77)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn rank_factorization_reaches_rank_one_deltas() {
        // For any rank-1 delta u v^T there are A, B with scale*AB = delta.
        let mut rng = Rng::new(8);
        for _ in 0..5 {
            let d = 6;
            let scale = 2.0;
            let u: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            // A = u as a column, B = v^T / scale.
            let a = Tensor::from_vec(&[d, 1], u.clone()).unwrap();
            let b =
                Tensor::from_vec(&[1, d], v.iter().map(|x| x / scale).collect()).unwrap();
            let mut tape = Tape::<f64>::new();
            let (ai, bi) = (tape.constant(&a), tape.constant(&b));
            let ab = tape.matmul(ai, bi).unwrap();
            let recon = tape.affine(ab, scale, 0.0);
            let mut residual = 0.0f64;
            for i in 0..d {
                for j in 0..d {
                    let r = tape.value(recon)[i * d + j] - u[i] * v[j];
                    residual += r * r;
                }
            }
            assert!(residual.sqrt() <= 1e-8, "residual {residual}");
        }
    }

    #[test]
    fn tiny_block_matches_hand_computation() {
        // depth 1, heads 1, dim 2, two tokens; the oracle below recomputes the
        // block with plain scalar arithmetic, independent of the tape.
        let cfg = EncoderConfig { patch: 2, dim: 2, depth: 1, heads: 1, in_channels: 1, seed: 0 };
        let mut enc = ViTEncoder::<f64>::init(&cfg, 1, 2).unwrap();
        // Hand-set weights.
        enc.embed_w = Tensor::from_vec(&[4, 2], vec![0.1, -0.2, 0.3, 0.0, -0.1, 0.2, 0.05, 0.4])
            .unwrap();
        enc.embed_b = Tensor::from_vec(&[2], vec![0.01, -0.02]).unwrap();
        enc.pos = Tensor::from_vec(&[2, 2], vec![0.2, -0.1, -0.3, 0.15]).unwrap();
        let blk = &mut enc.blocks[0];
        blk.wq = Tensor::from_vec(&[2, 2], vec![0.5, -0.25, 0.1, 0.3]).unwrap();
        blk.wk = Tensor::from_vec(&[2, 2], vec![-0.2, 0.4, 0.6, 0.1]).unwrap();
        blk.wv = Tensor::from_vec(&[2, 2], vec![0.3, 0.2, -0.4, 0.5]).unwrap();
        blk.wo = Tensor::from_vec(&[2, 2], vec![0.7, -0.1, 0.2, 0.6]).unwrap();
        blk.w1 = Tensor::from_vec(&[2, 8], (0..16).map(|i| 0.05 * (i as f64 - 8.0)).collect())
            .unwrap();
        blk.w2 = Tensor::from_vec(&[8, 2], (0..16).map(|i| 0.03 * (8.0 - i as f64)).collect())
            .unwrap();

        let image =
            Tensor::from_vec(&[1, 2, 4], vec![0.9, 0.1, 0.4, 0.6, 0.2, 0.8, 0.7, 0.3]).unwrap();
        let got = enc.encode(&image, None).unwrap();

        // ---- scalar oracle ----
        let ln = |x: &[f64; 2]| {
            let mean = (x[0] + x[1]) / 2.0;
            let var = ((x[0] - mean).powi(2) + (x[1] - mean).powi(2)) / 2.0;
            let rstd = 1.0 / (var + 1e-6).sqrt();
            [(x[0] - mean) * rstd, (x[1] - mean) * rstd]
        };
        let matvec2 = |x: &[f64; 2], w: &[f64]| {
            [x[0] * w[0] + x[1] * w[2], x[0] * w[1] + x[1] * w[3]]
        };
        let gelu_s = |x: f64| {
            let c0 = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (c0 * (x + 0.044715 * x * x * x)).tanh())
        };
        // patchify order: channel-major, then patch rows; patches are columns 0..2 and 2..4
        let patches = [[0.9, 0.1, 0.2, 0.8], [0.4, 0.6, 0.7, 0.3]];
        let ew = enc.embed_w.data();
        let mut tokens = [[0.0f64; 2]; 2];
        for (t, p) in patches.iter().enumerate() {
            for j in 0..2 {
                let mut acc = enc.embed_b.data()[j];
                for (i, pv) in p.iter().enumerate() {
                    acc += pv * ew[i * 2 + j];
                }
                tokens[t][j] = acc + enc.pos.data()[t * 2 + j];
            }
        }
        let blk = &enc.blocks[0];
        // attention
        let l0 = ln(&tokens[0]);
        let l1 = ln(&tokens[1]);
        let q = [matvec2(&l0, blk.wq.data()), matvec2(&l1, blk.wq.data())];
        let k = [matvec2(&l0, blk.wk.data()), matvec2(&l1, blk.wk.data())];
        let v = [matvec2(&l0, blk.wv.data()), matvec2(&l1, blk.wv.data())];
        let rt2 = 2.0f64.sqrt();
        let mut attn = [[0.0f64; 2]; 2];
        for i in 0..2 {
            let s0 = (q[i][0] * k[0][0] + q[i][1] * k[0][1]) / rt2;
            let s1 = (q[i][0] * k[1][0] + q[i][1] * k[1][1]) / rt2;
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let z = e0 + e1;
            for j in 0..2 {
                attn[i][j] = (e0 * v[0][j] + e1 * v[1][j]) / z;
            }
        }
        let mut x1 = [[0.0f64; 2]; 2];
        for i in 0..2 {
            let o = matvec2(&attn[i], blk.wo.data());
            for j in 0..2 {
                x1[i][j] = tokens[i][j] + o[j];
            }
        }
        // mlp
        let mut expect = [[0.0f64; 2]; 2];
        for i in 0..2 {
            let l = ln(&x1[i]);
            let mut hidden = [0.0f64; 8];
            for (hj, h) in hidden.iter_mut().enumerate() {
                *h = gelu_s(l[0] * blk.w1.data()[hj] + l[1] * blk.w1.data()[8 + hj]);
            }
            for j in 0..2 {
                let mut acc = 0.0;
                for (hj, h) in hidden.iter().enumerate() {
                    acc += h * blk.w2.data()[hj * 2 + j];
                }
                expect[i][j] = x1[i][j] + acc;
            }
        }
        for t in 0..2 {
            for j in 0..2 {
                let gotv = got.features.data()[t * 2 + j];
                assert!(
                    (gotv - expect[t][j]).abs() < 1e-6,
                    "token {t} dim {j}: {gotv} vs {}",
                    expect[t][j]
                );
            }
        }
    }

    #[test]
    fn token_count_matches_grid() {
        let cfg = small_cfg();
        let enc = ViTEncoder::<f32>::init(&cfg, 3, 5).unwrap();
        let grid = enc.encode(&Tensor::zeros(&[1, 12, 20]), None).unwrap();
        assert_eq!(grid.features.shape()[0], 15);
    }
}
