//! Compact UNet whose encoder stages are gated by the guide mask.
//!
//! Gating is a multiplicative residual `f * (1 + beta * G)` with beta a
//! trainable scalar per gated stage, initialized to zero so the guided model
//! starts exactly at the plain backbone.

use crate::rng::Rng;
use crate::synth::BinaryMask;
use crate::tape::{Tape, ValueId};
use crate::tensor::{Scalar, Tensor};
use crate::tokenbook::GuideMask;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of down/up levels.
    pub depth: usize,
    /// Encoder stages whose outputs are gated (indices into 0..depth).
    pub gate_stages: Vec<usize>,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { in_channels: 1, base_channels: 16, depth: 3, gate_stages: vec![0, 1, 2], seed: 0x5E_60 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::config("unet needs depth >= 1 and base_channels >= 1"));
        }
        if let Some(&s) = self.gate_stages.iter().find(|&&s| s >= self.depth) {
            return Err(Error::config(format!(
                "gate stage {} out of range for depth {}",
                s, self.depth
            )));
        }
        Ok(())
    }
}

/// One trainable scalar per gated stage, initialized to zero.
#[derive(Debug, Clone)]
pub struct GateParams<S: Scalar> {
    pub betas: Vec<Tensor<S>>,
}

impl<S: Scalar> GateParams<S> {
    pub fn init(cfg: &UNetConfig) -> Self {
        GateParams {
            betas: cfg.gate_stages.iter().map(|_| Tensor::zeros(&[1]).trainable()).collect(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        self.betas.iter().enumerate().map(|(i, b)| (format!("beta{}", i), b)).collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        self.betas.iter_mut().enumerate().map(|(i, b)| (format!("beta{}", i), b)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> ConvLayer<S> {
    fn init(ci: usize, co: usize, k: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (ci * k * k) as f64).sqrt();
        ConvLayer {
            w: Tensor::randn(&[co, ci, k, k], std, rng).trainable(),
            b: Tensor::zeros(&[co]).trainable(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DoubleConv<S: Scalar> {
    pub c1: ConvLayer<S>,
    pub c2: ConvLayer<S>,
}

impl<S: Scalar> DoubleConv<S> {
    fn init(ci: usize, co: usize, rng: &mut Rng) -> Self {
        DoubleConv { c1: ConvLayer::init(ci, co, 3, rng), c2: ConvLayer::init(co, co, 3, rng) }
    }
}

/// UNet parameters: encoder stages, bottleneck, decoder stages, 1x1 head.
#[derive(Debug, Clone)]
pub struct SegNet<S: Scalar> {
    pub cfg: UNetConfig,
    pub enc: Vec<DoubleConv<S>>,
    pub bottleneck: DoubleConv<S>,
    /// Deepest level first.
    pub dec: Vec<DoubleConv<S>>,
    pub head: ConvLayer<S>,
}

struct ConvVars {
    w: ValueId,
    b: ValueId,
}

struct DoubleConvVars {
    c1: ConvVars,
    c2: ConvVars,
}

pub(crate) struct SegNetVars {
    enc: Vec<DoubleConvVars>,
    bottleneck: DoubleConvVars,
    dec: Vec<DoubleConvVars>,
    head: ConvVars,
}

impl SegNetVars {
    /// Ids in named-tensor order: enc stages, bottleneck, dec stages, head.
    pub(crate) fn trainable_ids(&self) -> Vec<ValueId> {
        let mut out = Vec::new();
        let push_dc = |dc: &DoubleConvVars, out: &mut Vec<ValueId>| {
            out.extend([dc.c1.w, dc.c1.b, dc.c2.w, dc.c2.b]);
        };
        for dc in &self.enc {
            push_dc(dc, &mut out);
        }
        push_dc(&self.bottleneck, &mut out);
        for dc in &self.dec {
            push_dc(dc, &mut out);
        }
        out.extend([self.head.w, self.head.b]);
        out
    }
}

pub(crate) struct GateVars {
    pub betas: Vec<ValueId>,
}

impl<S: Scalar> SegNet<S> {
    pub fn init(cfg: &UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed);
        let b = cfg.base_channels;
        let mut enc = Vec::with_capacity(cfg.depth);
        let mut ci = cfg.in_channels;
        for level in 0..cfg.depth {
            let co = b << level;
            enc.push(DoubleConv::init(ci, co, &mut rng));
            ci = co;
        }
        let bottleneck = DoubleConv::init(ci, b << cfg.depth, &mut rng);
        let mut dec = Vec::with_capacity(cfg.depth);
        let mut cur = b << cfg.depth;
        for level in (0..cfg.depth).rev() {
            let skip = b << level;
            dec.push(DoubleConv::init(cur + skip, skip, &mut rng));
            cur = skip;
        }
        let head = ConvLayer::init(b, 1, 1, &mut rng);
        Ok(SegNet { cfg: cfg.clone(), enc, bottleneck, dec, head })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        fn push_dc<'a, S: Scalar>(
            prefix: &str,
            dc: &'a DoubleConv<S>,
            out: &mut Vec<(String, &'a Tensor<S>)>,
        ) {
            out.push((format!("{prefix}.c1.w"), &dc.c1.w));
            out.push((format!("{prefix}.c1.b"), &dc.c1.b));
            out.push((format!("{prefix}.c2.w"), &dc.c2.w));
            out.push((format!("{prefix}.c2.b"), &dc.c2.b));
        }
        let mut out = Vec::new();
        for (i, dc) in self.enc.iter().enumerate() {
            push_dc(&format!("enc{}", i), dc, &mut out);
        }
        push_dc("bottleneck", &self.bottleneck, &mut out);
        for (i, dc) in self.dec.iter().enumerate() {
            push_dc(&format!("dec{}", i), dc, &mut out);
        }
        out.push(("head.w".into(), &self.head.w));
        out.push(("head.b".into(), &self.head.b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = Vec::new();
        for (i, dc) in self.enc.iter_mut().enumerate() {
            out.push((format!("enc{}.c1.w", i), &mut dc.c1.w));
            out.push((format!("enc{}.c1.b", i), &mut dc.c1.b));
            out.push((format!("enc{}.c2.w", i), &mut dc.c2.w));
            out.push((format!("enc{}.c2.b", i), &mut dc.c2.b));
        }
        out.push(("bottleneck.c1.w".into(), &mut self.bottleneck.c1.w));
        out.push(("bottleneck.c1.b".into(), &mut self.bottleneck.c1.b));
        out.push(("bottleneck.c2.w".into(), &mut self.bottleneck.c2.w));
        out.push(("bottleneck.c2.b".into(), &mut self.bottleneck.c2.b));
        for (i, dc) in self.dec.iter_mut().enumerate() {
            out.push((format!("dec{}.c1.w", i), &mut dc.c1.w));
            out.push((format!("dec{}.c1.b", i), &mut dc.c1.b));
            out.push((format!("dec{}.c2.w", i), &mut dc.c2.w));
            out.push((format!("dec{}.c2.b", i), &mut dc.c2.b));
        }
        out.push(("head.w".into(), &mut self.head.w));
        out.push(("head.b".into(), &mut self.head.b));
        out
    }

    pub(crate) fn register(&self, tape: &mut Tape<S>) -> SegNetVars {
        let reg_dc = |tape: &mut Tape<S>, dc: &DoubleConv<S>| DoubleConvVars {
            c1: ConvVars { w: tape.leaf(&dc.c1.w), b: tape.leaf(&dc.c1.b) },
            c2: ConvVars { w: tape.leaf(&dc.c2.w), b: tape.leaf(&dc.c2.b) },
        };
        SegNetVars {
            enc: self.enc.iter().map(|dc| reg_dc(tape, dc)).collect(),
            bottleneck: reg_dc(tape, &self.bottleneck),
            dec: self.dec.iter().map(|dc| reg_dc(tape, dc)).collect(),
            head: ConvVars { w: tape.leaf(&self.head.w), b: tape.leaf(&self.head.b) },
        }
    }

    /// Rebuild vars from pre-registered ids, consumed in named-tensor order.
    pub(crate) fn register_from_ids(&self, next: &mut impl FnMut() -> ValueId) -> SegNetVars {
        let take_dc = |_dc: &DoubleConv<S>, next: &mut dyn FnMut() -> ValueId| DoubleConvVars {
            c1: ConvVars { w: next(), b: next() },
            c2: ConvVars { w: next(), b: next() },
        };
        SegNetVars {
            enc: self.enc.iter().map(|dc| take_dc(dc, next)).collect(),
            bottleneck: take_dc(&self.bottleneck, next),
            dec: self.dec.iter().map(|dc| take_dc(dc, next)).collect(),
            head: ConvVars { w: next(), b: next() },
        }
    }

    /// Gated UNet forward; `guide` is a [1,gh,gw] node at any resolution.
    pub(crate) fn forward_on_tape(
        &self,
        tape: &mut Tape<S>,
        vars: &SegNetVars,
        gates: Option<&GateVars>,
        image: ValueId,
        guide: Option<ValueId>,
    ) -> Result<ValueId> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.in_channels {
            return Err(Error::config(format!(
                "unet expects [{},H,W], got {:?}",
                self.cfg.in_channels, shape
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        let div = 1usize << self.cfg.depth;
        if h % div != 0 || w % div != 0 {
            return Err(Error::config(format!(
                "image {}x{} not divisible by 2^depth = {}",
                h, w, div
            )));
        }

        let dc = |tape: &mut Tape<S>, vars: &DoubleConvVars, x: ValueId| -> Result<ValueId> {
            let y = tape.conv2d(x, vars.c1.w, vars.c1.b, 1, 1)?;
            let y = tape.relu(y);
            let y = tape.conv2d(y, vars.c2.w, vars.c2.b, 1, 1)?;
            Ok(tape.relu(y))
        };

        let mut x = image;
        let mut skips: Vec<(ValueId, usize, usize)> = Vec::with_capacity(self.cfg.depth);
        let mut cur_h = h;
        let mut cur_w = w;
        for (level, ev) in vars.enc.iter().enumerate() {
            x = dc(tape, ev, x)?;
            if let (Some(gv), Some(guide_id)) = (gates, guide) {
                if let Some(pos) = self.cfg.gate_stages.iter().position(|&s| s == level) {
                    x = gate_on_tape(tape, x, guide_id, gv.betas[pos])?;
                }
            }
            skips.push((x, cur_h, cur_w));
            x = tape.maxpool2(x)?;
            cur_h /= 2;
            cur_w /= 2;
        }
        x = dc(tape, &vars.bottleneck, x)?;
        for (i, dv) in vars.dec.iter().enumerate() {
            let (skip, sh, sw) = skips[self.cfg.depth - 1 - i];
            x = tape.resize(x, sh, sw)?;
            x = tape.concat_ch(x, skip)?;
            x = dc(tape, dv, x)?;
        }
        tape.conv2d(x, vars.head.w, vars.head.b, 1, 0)
    }

    /// Tensor-level forward returning [1,H,W] logits.
    pub fn forward(
        &self,
        gates: &GateParams<S>,
        image: &Tensor<S>,
        guide: Option<&GuideMask<S>>,
    ) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let img = tape.constant(image);
        let vars = self.register(&mut tape);
        let gate_vars = GateVars { betas: gates.betas.iter().map(|b| tape.leaf(b)).collect() };
        let guide_id = match guide {
            Some(g) => {
                let flat = tape.constant(&g.values);
                Some(tape.reshape(flat, &[1, g.h, g.w])?)
            }
            None => None,
        };
        let logits = self.forward_on_tape(&mut tape, &vars, Some(&gate_vars), img, guide_id)?;
        Ok(tape.to_tensor(logits))
    }
}

/// features * (1 + beta * resize(guide)), broadcast over channels.
pub(crate) fn gate_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    features: ValueId,
    guide: ValueId,
    beta: ValueId,
) -> Result<ValueId> {
    let fs = tape.shape(features).to_vec();
    if fs.len() != 3 {
        return Err(Error::config(format!("gate expects features [C,h,w], got {:?}", fs)));
    }
    let (h, w) = (fs[1], fs[2]);
    let g = tape.resize(guide, h, w)?;
    let g2d = tape.reshape(g, &[h, w])?;
    let scaled = tape.scalar_mul(g2d, beta)?;
    let gate_map = tape.affine(scaled, 1.0, 1.0);
    tape.mul_channel_map(features, gate_map)
}

/// Tensor-level gate: `features * (1 + beta * resize(guide -> h x w))`.
pub fn gate<S: Scalar>(features: &Tensor<S>, guide: &GuideMask<S>, beta: S) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let f = tape.constant(features);
    let g = tape.constant(&guide.values);
    let g3 = tape.reshape(g, &[1, guide.h, guide.w])?;
    let b = tape.leaf_from(&[1], vec![beta], false);
    let out = gate_on_tape(&mut tape, f, g3, b)?;
    Ok(tape.to_tensor(out))
}

/// Sigmoid then threshold; ties resolve to foreground (>=).
pub fn predict<S: Scalar>(logits: &Tensor<S>, threshold: f64) -> Result<BinaryMask> {
    let shape = logits.shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::config(format!("predict expects [1,H,W] logits, got {:?}", shape)));
    }
    let (h, w) = (shape[1], shape[2]);
    let data = logits
        .data()
        .iter()
        .map(|&v| u8::from(crate::kernels::sigmoid(v).to_f64() >= threshold))
        .collect();
    BinaryMask::from_vec(h, w, data)
}
