//! The full pipeline bundle: frozen encoder -> TokenBook guide -> gated UNet,
//! with one canonical parameter ordering shared by the tape, the optimizer,
//! and the checkpoint container.

use rayon::prelude::*;

use crate::encoder::{register_lora, EncoderConfig, LoraConfig, LoraWeights, ViTEncoder};
use crate::loss::{total_loss_on_tape, LossConfig, LossNodes};
use crate::metrics::Predictor;
use crate::segnet::{GateParams, GateVars, SegNet, UNetConfig};
use crate::synth::{BinaryMask, SegSample};
use crate::tape::{Tape, ValueId};
use crate::tensor::{Scalar, Tensor};
use crate::tokenbook::{GuideMask, TokenBook, TokenBookConfig};
use crate::{Error, Result};

/// Training mode for the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Plain UNet, no guide at all.
    Baseline,
    /// Frozen encoder, trainable TokenBook + UNet + gates.
    GuidedFrozen,
    /// GuidedFrozen plus LoRA adapters on the encoder.
    GuidedLora,
}

impl TrainMode {
    pub fn uses_guide(self) -> bool {
        !matches!(self, TrainMode::Baseline)
    }

    pub fn uses_lora(self) -> bool {
        matches!(self, TrainMode::GuidedLora)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::GuidedFrozen => "guided-frozen",
            TrainMode::GuidedLora => "guided-lora",
        }
    }
}

/// Parameter group tags used by the optimizer and the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Encoder,
    Lora,
    TokenBook,
    SegNet,
    Gates,
}

impl ParamGroup {
    pub fn tag(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Lora => "lora",
            ParamGroup::TokenBook => "tokenbook",
            ParamGroup::SegNet => "segnet",
            ParamGroup::Gates => "gates",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "encoder" => Some(ParamGroup::Encoder),
            "lora" => Some(ParamGroup::Lora),
            "tokenbook" => Some(ParamGroup::TokenBook),
            "segnet" => Some(ParamGroup::SegNet),
            "gates" => Some(ParamGroup::Gates),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub mode: TrainMode,
    pub encoder: EncoderConfig,
    pub lora: Option<LoraConfig>,
    pub book: TokenBookConfig,
    pub unet: UNetConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if self.image_size % (1 << self.unet.depth) != 0 {
            return Err(Error::config(format!(
                "image size {} not divisible by 2^depth = {}",
                self.image_size,
                1 << self.unet.depth
            )));
        }
        if self.mode.uses_guide() {
            self.encoder.validate()?;
            if self.image_size % self.encoder.patch != 0 {
                return Err(Error::config(format!(
                    "patch {} does not divide image size {}",
                    self.encoder.patch, self.image_size
                )));
            }
        }
        if self.mode.uses_lora() && self.lora.is_none() {
            return Err(Error::config("guided-lora mode requires a lora config"));
        }
        Ok(())
    }
}

/// Parameter bundle for one training mode.
#[derive(Debug, Clone)]
pub struct GuidedModel<S: Scalar> {
    pub cfg: ModelConfig,
    pub encoder: Option<ViTEncoder<S>>,
    pub lora: Option<LoraWeights<S>>,
    pub book: Option<TokenBook<S>>,
    pub segnet: SegNet<S>,
    pub gates: GateParams<S>,
}

pub(crate) struct ModelVars {
    lora: Option<crate::encoder::LoraVars>,
    book: Option<crate::tokenbook::BookVars>,
    segnet: crate::segnet::SegNetVars,
    gates: GateVars,
    encoder: Option<crate::encoder::EncoderVars>,
    /// Tape ids of the trainable tensors, aligned with
    /// [`GuidedModel::trainable_params_mut`].
    pub trainable_ids: Vec<ValueId>,
}

impl<S: Scalar> GuidedModel<S> {
    /// Initialize all components. Trainable groups draw from `run_seed`
    /// sub-streams; the frozen encoder keeps its own fixed seed.
    pub fn init(cfg: &ModelConfig, run_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = crate::rng::Rng::new(run_seed);
        let mix = |tag: u64| root.split(tag).next_u64();

        let (encoder, book, lora) = if cfg.mode.uses_guide() {
            let grid = cfg.image_size / cfg.encoder.patch;
            let encoder = ViTEncoder::init(&cfg.encoder, grid, grid)?;
            let book_cfg = TokenBookConfig { seed: mix(1), ..cfg.book.clone() };
            let book = TokenBook::init(&book_cfg, cfg.encoder.dim)?;
            let lora = if cfg.mode.uses_lora() {
                let lc = LoraConfig { seed: mix(2), ..cfg.lora.clone().unwrap() };
                Some(LoraWeights::init(&lc, &cfg.encoder)?)
            } else {
                None
            };
            (Some(encoder), Some(book), lora)
        } else {
            (None, None, None)
        };
        let unet_cfg = UNetConfig { seed: mix(3), ..cfg.unet.clone() };
        let segnet = SegNet::init(&unet_cfg)?;
        let gates = GateParams::init(&unet_cfg);
        Ok(GuidedModel { cfg: cfg.clone(), encoder, lora, book, segnet, gates })
    }

    fn trainable_groups(&self) -> Vec<ParamGroup> {
        match self.cfg.mode {
            TrainMode::Baseline => vec![ParamGroup::SegNet],
            TrainMode::GuidedFrozen => {
                vec![ParamGroup::TokenBook, ParamGroup::SegNet, ParamGroup::Gates]
            }
            TrainMode::GuidedLora => vec![
                ParamGroup::Lora,
                ParamGroup::TokenBook,
                ParamGroup::SegNet,
                ParamGroup::Gates,
            ],
        }
    }

    /// Trainable tensors in canonical order: lora, tokenbook, segnet, gates.
    pub fn trainable_params_mut(&mut self) -> Vec<(ParamGroup, String, &mut Tensor<S>)> {
        let groups = self.trainable_groups();
        let mut out = Vec::new();
        if groups.contains(&ParamGroup::Lora) {
            if let Some(l) = self.lora.as_mut() {
                for (name, t) in l.named_tensors_mut() {
                    out.push((ParamGroup::Lora, name, t));
                }
            }
        }
        if groups.contains(&ParamGroup::TokenBook) {
            if let Some(b) = self.book.as_mut() {
                for (name, t) in b.named_tensors_mut() {
                    out.push((ParamGroup::TokenBook, name, t));
                }
            }
        }
        if groups.contains(&ParamGroup::SegNet) {
            for (name, t) in self.segnet.named_tensors_mut() {
                out.push((ParamGroup::SegNet, name, t));
            }
        }
        if groups.contains(&ParamGroup::Gates) {
            for (name, t) in self.gates.named_tensors_mut() {
                out.push((ParamGroup::Gates, name, t));
            }
        }
        out
    }

    /// Every group present in this model, frozen ones included, for checkpoints.
    pub fn all_groups(&self) -> Vec<(ParamGroup, bool, Vec<(String, Tensor<S>)>)> {
        let mut out = Vec::new();
        if let Some(e) = &self.encoder {
            let tensors = e.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
            out.push((ParamGroup::Encoder, true, tensors));
        }
        if let Some(l) = &self.lora {
            let tensors = l.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
            out.push((ParamGroup::Lora, false, tensors));
        }
        if let Some(b) = &self.book {
            let tensors = b.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
            out.push((ParamGroup::TokenBook, false, tensors));
        }
        out.push((
            ParamGroup::SegNet,
            false,
            self.segnet.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        ));
        out.push((
            ParamGroup::Gates,
            false,
            self.gates.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        ));
        out
    }

    /// Register every component on a tape; trainable ids land in canonical order.
    pub(crate) fn register(&self, tape: &mut Tape<S>) -> Result<ModelVars> {
        let mut trainable_ids = Vec::new();
        let lora = match (&self.lora, &self.encoder) {
            (Some(l), Some(e)) => {
                let vars = register_lora(tape, l, &e.cfg)?;
                trainable_ids.extend(vars.trainable_ids());
                Some(vars)
            }
            _ => None,
        };
        let book = self.book.as_ref().map(|b| {
            let vars = b.register(tape);
            trainable_ids.push(vars.prototypes);
            trainable_ids.push(vars.alphas);
            vars
        });
        let segnet = self.segnet.register(tape);
        trainable_ids.extend(segnet.trainable_ids());
        let gates = GateVars { betas: self.gates.betas.iter().map(|b| tape.leaf(b)).collect() };
        if self.cfg.mode.uses_guide() {
            trainable_ids.extend_from_slice(&gates.betas);
        }
        let encoder = self.encoder.as_ref().map(|e| e.register(tape));
        Ok(ModelVars { lora, book, segnet, gates, encoder, trainable_ids })
    }

    /// Forward to logits on the tape; also returns the guide node (image
    /// resolution) when the mode uses one.
    pub(crate) fn forward_on_tape(
        &self,
        tape: &mut Tape<S>,
        vars: &ModelVars,
        image: ValueId,
    ) -> Result<(ValueId, Option<ValueId>)> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 3 {
            return Err(Error::config(format!("pipeline expects [C,H,W], got {:?}", shape)));
        }
        let (h, w) = (shape[1], shape[2]);
        let guide = if self.cfg.mode.uses_guide() {
            let enc = self.encoder.as_ref().expect("guided model has an encoder");
            let evars = vars.encoder.as_ref().expect("registered encoder vars");
            let tokens = enc.forward_on_tape(tape, evars, vars.lora.as_ref(), image)?;
            let book = self.book.as_ref().expect("guided model has a tokenbook");
            let bvars = vars.book.as_ref().expect("registered book vars");
            Some(book.guide_on_tape(tape, bvars, tokens, enc.ht, enc.wt, h, w)?)
        } else {
            None
        };
        let gates = if guide.is_some() { Some(&vars.gates) } else { None };
        let logits = self.segnet.forward_on_tape(tape, &vars.segnet, gates, image, guide)?;
        Ok((logits, guide))
    }

    /// Composite loss graph for one sample.
    pub(crate) fn loss_on_tape(
        &self,
        tape: &mut Tape<S>,
        vars: &ModelVars,
        image: ValueId,
        gt: &BinaryMask,
        loss_cfg: &LossConfig,
    ) -> Result<LossNodes> {
        let (logits, guide) = self.forward_on_tape(tape, vars, image)?;
        total_loss_on_tape(tape, logits, guide, gt, loss_cfg)
    }

    /// Fresh-tape forward: logits plus the guide mask (if any).
    pub fn forward_logits(&self, image: &Tensor<S>) -> Result<(Tensor<S>, Option<GuideMask<S>>)> {
        let mut tape = Tape::new();
        let img = tape.constant(image);
        let vars = self.register(&mut tape)?;
        let (logits, guide) = self.forward_on_tape(&mut tape, &vars, img)?;
        let guide_mask = match guide {
            Some(g) => {
                let shape = tape.shape(g).to_vec();
                Some(GuideMask {
                    h: shape[1],
                    w: shape[2],
                    values: Tensor::from_vec(&[shape[1], shape[2]], tape.value(g).to_vec())?,
                })
            }
            None => None,
        };
        Ok((tape.to_tensor(logits), guide_mask))
    }
}

impl GuidedModel<f32> {
    /// Sigmoid probabilities of the positive class, flattened [H*W].
    fn prob_map(&self, image: &Tensor<f32>) -> Result<Vec<f32>> {
        let (logits, _) = self.forward_logits(image)?;
        Ok(logits.data().iter().map(|&v| crate::kernels::sigmoid(v)).collect())
    }

    /// Mean validation DSC at threshold 0.5, no TTA; parallel over samples.
    pub fn validation_dsc(&self, samples: &[SegSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::input("empty validation set"));
        }
        let dscs: Result<Vec<f64>> = samples
            .par_iter()
            .map(|s| {
                let pred = self.predict_mask(&s.image, false)?;
                Ok(crate::metrics::overlap_metrics(&pred, &s.mask)?.1)
            })
            .collect();
        Ok(dscs?.iter().sum::<f64>() / samples.len() as f64)
    }
}

impl Predictor for GuidedModel<f32> {
    fn predict_mask(&self, image: &Tensor<f32>, tta_flips: bool) -> Result<BinaryMask> {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let probs = if tta_flips {
            crate::metrics::tta_flip_average(image, |variant| self.prob_map(variant))?
        } else {
            self.prob_map(image)?
        };
        BinaryMask::from_vec(h, w, probs.iter().map(|&p| u8::from(p >= 0.5)).collect())
    }
}


/// Gradient-check every trainable parameter of a small end-to-end pipeline
/// (encoder+LoRA -> TokenBook -> gated UNet -> composite loss) on a 16x16
/// synthetic sample, in double precision.
pub fn full_pipeline_gradcheck() -> Result<crate::gradcheck::GradReport> {
    let cfg = ModelConfig {
        image_size: 16,
        mode: TrainMode::GuidedLora,
        encoder: EncoderConfig { patch: 8, dim: 16, depth: 2, heads: 2, in_channels: 1, seed: 5 },
        // Adapters on the value/output projections: the query direction of the
        // last block carries ~1e-7 gradients at any nearby point, which the
        // central-difference oracle cannot certify at eps = 1e-5 (pure
        // cancellation noise); the query path has its own dedicated rows.
        lora: Some(LoraConfig {
            rank: 2,
            targets: vec![
                crate::encoder::LoraTarget::Value,
                crate::encoder::LoraTarget::Output,
            ],
            ..Default::default()
        }),
        book: TokenBookConfig { k: 4, ..Default::default() },
        unet: UNetConfig { in_channels: 1, base_channels: 4, depth: 2, gate_stages: vec![0, 1], seed: 0 },
    };
    let mut model = GuidedModel::<f64>::init(&cfg, 12345)?;
    // Move every component to a generic point. The training init is a
    // degenerate one for a finite-difference oracle: LoRA B = 0 and the tiny
    // frozen weights leave several true gradients at ~1e-8 (cancellation-noise
    // territory for the oracle), and zero conv biases put every all-zero
    // receptive field exactly on the ReLU kink, where analytic subgradient and
    // central difference legitimately disagree.
    let mut rng = crate::rng::Rng::new(0xC0FFEE);
    for (group, _, t) in model.trainable_params_mut() {
        match group {
            ParamGroup::Gates => t.data_mut()[0] = 0.25,
            ParamGroup::Lora => {
                for v in t.data_mut() {
                    *v = rng.range(-0.5, 0.5);
                }
            }
            ParamGroup::TokenBook => {
                for v in t.data_mut() {
                    *v = rng.range(-0.8, 0.8);
                }
            }
            ParamGroup::SegNet => {
                for v in t.data_mut() {
                    *v = *v + rng.range(0.02, 0.2);
                }
            }
            ParamGroup::Encoder => {}
        }
    }
    let sample = crate::synth::generate_sample(
        9,
        &crate::synth::SynthConfig { size: 16, ..Default::default() },
    );
    let image: Tensor<f64> = sample.image.cast();
    let gt = sample.mask.clone();
    let loss_cfg = LossConfig::default();

    let params: Vec<Tensor<f64>> =
        model.trainable_params_mut().into_iter().map(|(_, _, t)| t.clone()).collect();
    let model_ref = &model;
    let image_ref = &image;
    let gt_ref = &gt;
    let loss_ref = &loss_cfg;
    crate::gradcheck::grad_check(
        "pipeline/16x16",
        &params,
        move |tape, ids| {
            // wire the pre-registered (possibly perturbed) leaves straight into
            // the model graph; ids follow the canonical trainable order
            let vars = model_ref.register_with_ids(tape, ids)?;
            let img = tape.constant(image_ref);
            let nodes = model_ref.loss_on_tape(tape, &vars, img, gt_ref, loss_ref)?;
            Ok(nodes.total)
        },
        1e-5,
    )
}

impl<S: Scalar> GuidedModel<S> {
    /// Like [`register`], but reuses pre-registered leaf ids for the trainable
    /// parameters (the gradcheck path). Ids must follow the canonical order.
    pub(crate) fn register_with_ids(
        &self,
        tape: &mut Tape<S>,
        ids: &[ValueId],
    ) -> Result<ModelVars> {
        let mut cursor = 0usize;
        let mut next = || -> ValueId {
            let id = ids[cursor];
            cursor += 1;
            id
        };
        let lora = match (&self.lora, &self.encoder) {
            (Some(l), Some(_)) => {
                let mut blocks = Vec::new();
                for block in &l.blocks {
                    let mut ids_block = Vec::new();
                    for (t, _) in block {
                        let a = next();
                        let b = next();
                        ids_block.push((*t, a, b));
                    }
                    blocks.push(ids_block);
                }
                Some(crate::encoder::LoraVars::from_parts(l.cfg.scale, blocks))
            }
            _ => None,
        };
        let book = self.book.as_ref().map(|_| crate::tokenbook::BookVars {
            prototypes: next(),
            alphas: next(),
        });
        let segnet = self.segnet.register_from_ids(&mut next);
        let gates = GateVars {
            betas: if self.cfg.mode.uses_guide() {
                self.gates.betas.iter().map(|_| next()).collect()
            } else {
                self.gates.betas.iter().map(|b| tape.leaf(b)).collect()
            },
        };
        let encoder = self.encoder.as_ref().map(|e| e.register(tape));
        let trainable_ids = ids.to_vec();
        Ok(ModelVars { lora, book, segnet, gates, encoder, trainable_ids })
    }
}
