//! TokenBook: learnable prototypes that turn token features into a spatial
//! guide mask.
//!
//! Each token position gets a score `s_i = sum_k alpha_k * sim(T_i, P_k)`;
//! the score grid is squashed by a temperature sigmoid and bilinearly resized
//! to the requested resolution, giving a guide with entries strictly in (0,1).

use crate::encoder::TokenGrid;
use crate::rng::Rng;
use crate::tape::{Tape, ValueId};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Similarity between a token and a prototype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SimKind {
    /// Cosine similarity with eps = 1e-8 in the norm denominator.
    Cosine,
    /// Plain dot product.
    Dot,
}

pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TokenBookConfig {
    /// Number of prototypes K.
    pub k: usize,
    pub sim: SimKind,
    /// Temperature of the sigmoid squashing; must be positive.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for TokenBookConfig {
    fn default() -> Self {
        TokenBookConfig { k: 16, sim: SimKind::Cosine, temperature: 1.0, seed: 0xB0_0C }
    }
}

/// Learnable prototype bank: prototypes P [K,d] and aggregation weights alpha [K].
#[derive(Debug, Clone)]
pub struct TokenBook<S: Scalar> {
    pub cfg: TokenBookConfig,
    pub prototypes: Tensor<S>,
    pub alphas: Tensor<S>,
}

/// Spatial guide: values are [h, w] with every entry strictly in (0, 1).
#[derive(Debug, Clone)]
pub struct GuideMask<S: Scalar> {
    pub h: usize,
    pub w: usize,
    pub values: Tensor<S>,
}

impl<S: Scalar> GuideMask<S> {
    pub fn from_tensor(values: Tensor<S>) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::config(format!("guide mask must be [H,W], got {:?}", values.shape())));
        }
        let (h, w) = (values.shape()[0], values.shape()[1]);
        let mask = GuideMask { h, w, values };
        mask.validate()?;
        Ok(mask)
    }

    /// Entries must lie strictly inside (0, 1).
    pub fn validate(&self) -> Result<()> {
        for (i, v) in self.values.data().iter().enumerate() {
            let x = v.to_f64();
            if !(x > 0.0 && x < 1.0) {
                return Err(Error::numerical(format!(
                    "guide mask entry {i} = {x} escapes the open interval (0,1)"
                )));
            }
        }
        Ok(())
    }
}

pub(crate) struct BookVars {
    pub prototypes: ValueId,
    pub alphas: ValueId,
}

impl<S: Scalar> TokenBook<S> {
    /// Prototypes ~ N(0, 1/sqrt(d)); alphas start at zero so the guide opens
    /// flat at 0.5 and its spatial structure is purely supervision-driven.
    pub fn init(cfg: &TokenBookConfig, dim: usize) -> Result<Self> {
        if cfg.k == 0 {
            return Err(Error::config("tokenbook needs K >= 1 prototypes"));
        }
        if cfg.temperature <= 0.0 {
            return Err(Error::config("tokenbook temperature must be positive"));
        }
        let mut rng = Rng::new(cfg.seed);
        let prototypes =
            Tensor::randn(&[cfg.k, dim], 1.0 / (dim as f64).sqrt(), &mut rng).trainable();
        let alphas = Tensor::zeros(&[cfg.k]).trainable();
        Ok(TokenBook { cfg: cfg.clone(), prototypes, alphas })
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub(crate) fn register(&self, tape: &mut Tape<S>) -> BookVars {
        BookVars { prototypes: tape.leaf(&self.prototypes), alphas: tape.leaf(&self.alphas) }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        vec![("prototypes".into(), &self.prototypes), ("alphas".into(), &self.alphas)]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        vec![("prototypes".into(), &mut self.prototypes), ("alphas".into(), &mut self.alphas)]
    }

    /// Per-token score node [n_tokens] on the tape.
    pub(crate) fn scores_on_tape(
        &self,
        tape: &mut Tape<S>,
        vars: &BookVars,
        tokens: ValueId,
    ) -> Result<ValueId> {
        let st = tape.shape(tokens);
        if st.len() != 2 || st[1] != self.dim() {
            return Err(Error::config(format!(
                "token dimension {:?} does not match prototype dimension {}",
                st,
                self.dim()
            )));
        }
        let sims = match self.cfg.sim {
            SimKind::Cosine => tape.cosine_sim(tokens, vars.prototypes, COSINE_EPS)?,
            SimKind::Dot => tape.matmul_tb(tokens, vars.prototypes)?,
        };
        tape.sim_aggregate(sims, vars.alphas)
    }

    /// Guide node [1, out_h, out_w] on the tape: sigmoid(scores / tau) at token
    /// resolution, then bilinear resize.
    pub(crate) fn guide_on_tape(
        &self,
        tape: &mut Tape<S>,
        vars: &BookVars,
        tokens: ValueId,
        ht: usize,
        wt: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<ValueId> {
        let scores = self.scores_on_tape(tape, vars, tokens)?;
        let scaled = tape.affine(scores, 1.0 / self.cfg.temperature, 0.0);
        let squashed = tape.sigmoid(scaled);
        let grid = tape.reshape(squashed, &[1, ht, wt])?;
        tape.resize(grid, out_h, out_w)
    }
}

/// Token-resolution score grid [ht, wt].
pub fn token_scores<S: Scalar>(tokens: &TokenGrid<S>, book: &TokenBook<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let t = tape.constant(&tokens.features);
    let vars = book.register(&mut tape);
    let scores = book.scores_on_tape(&mut tape, &vars, t)?;
    Tensor::from_vec(&[tokens.ht, tokens.wt], tape.value(scores).to_vec())
}

/// Full guide computation at the requested output resolution.
pub fn guide_mask<S: Scalar>(
    tokens: &TokenGrid<S>,
    book: &TokenBook<S>,
    out_h: usize,
    out_w: usize,
) -> Result<GuideMask<S>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::config(format!("guide target {}x{} has a zero dimension", out_h, out_w)));
    }
    let mut tape = Tape::new();
    let t = tape.constant(&tokens.features);
    let vars = book.register(&mut tape);
    let g = book.guide_on_tape(&mut tape, &vars, t, tokens.ht, tokens.wt, out_h, out_w)?;
    Ok(GuideMask {
        h: out_h,
        w: out_w,
        values: Tensor::from_vec(&[out_h, out_w], tape.value(g).to_vec())?,
    })
}
