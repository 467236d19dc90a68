//! Central finite-difference verification of reverse-mode gradients.
//!
//! Runs in double precision only. Every differentiable operation in the crate
//! gets a row in [`standard_suite`]; the full pipeline row is behind a flag
//! because it perturbs every trainable parameter of a small end-to-end model.

use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Outcome of one gradient check.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub n_params_checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn eval_value<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let ids: Vec<ValueId> =
        params.iter().map(|p| tape.leaf_from(p.shape(), p.data().to_vec(), false)).collect();
    let loss = f(&mut tape, &ids)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::config("grad_check expects a scalar-valued function"));
    }
    Ok(tape.value_scalar(loss))
}

/// Compare the analytic gradient of `f` at `params` against central finite
/// differences `(f(x+eps) - f(x-eps)) / (2 eps)`, entry by entry.
/// Relative error uses `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn grad_check<F>(op_name: &str, params: &[Tensor<f64>], f: F, eps: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<ValueId> =
        params.iter().map(|p| tape.leaf_from(p.shape(), p.data().to_vec(), true)).collect();
    let loss = f(&mut tape, &ids)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::config("grad_check expects a scalar-valued function"));
    }
    let base = tape.value_scalar(loss);
    if !base.is_finite() {
        return Err(Error::numerical(format!("{op_name}: non-finite value at base point")));
    }
    tape.backward(loss);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params.iter())
        .map(|(&id, p)| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    // Numeric sweep.
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut checked = 0usize;
    for pi in 0..work.len() {
        for j in 0..work[pi].numel() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let plus = eval_value(&f, &work)?;
            work[pi].data_mut()[j] = orig - eps;
            let minus = eval_value(&f, &work)?;
            work[pi].data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::numerical(format!(
                    "{op_name}: non-finite value while perturbing parameter {pi} entry {j}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            if std::env::var("GRADCHECK_TRACE").is_ok() && rel > 1e-4 {
                eprintln!("TRACE {op_name}: param {pi} entry {j} analytic {a:+.9e} numeric {numeric:+.9e} rel {rel:.3e}");
            }
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    if checked == 0 {
        return Err(Error::config("grad_check needs at least one parameter entry"));
    }
    Ok(GradReport {
        op_name: op_name.to_string(),
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        n_params_checked: checked,
    })
}

/// Nudge entries away from a kink location so central differences stay valid
/// for piecewise-smooth ops (ReLU, hinge).
pub fn avoid_kink(t: &mut Tensor<f64>, kink: f64, margin: f64) {
    for v in t.data_mut() {
        if (*v - kink).abs() < margin {
            *v = kink + margin * if *v >= kink { 1.0 } else { -1.0 };
        }
    }
}

/// Weighted-sum readout: `sum(w . x)` with fixed pseudo-random weights, so a
/// check cannot pass by cancellation.
pub fn weighted_sum(tape: &mut Tape<f64>, x: ValueId, seed: u64) -> Result<ValueId> {
    let n = tape.value(x).len();
    let mut rng = crate::rng::Rng::new(seed ^ 0x5EED_0F37);
    let w: Vec<f64> = (0..n).map(|_| rng.range(-1.0, 1.0)).collect();
    let wx = tape.mul_const(x, w)?;
    Ok(tape.sum(wx))
}

/// Acceptance bound for every suite row, in double precision.
pub const SUITE_TOLERANCE: f64 = 1e-4;
/// Central-difference step used by the suite.
pub const SUITE_EPS: f64 = 1e-5;

/// Gradient checks for every trainable-path operation; `full` adds the
/// end-to-end pipeline row (every trainable parameter of a 16x16 instance).
pub fn standard_suite(full: bool) -> Result<Vec<GradReport>> {
    use crate::rng::Rng;

    let mut reports = Vec::new();
    let mut rng = Rng::new(0x918AD);
    let u = |shape: &[usize], rng: &mut Rng| Tensor::<f64>::rand_uniform(shape, -1.0, 1.0, rng);

    // matmul
    {
        let a = u(&[3, 4], &mut rng);
        let b = u(&[4, 5], &mut rng);
        reports.push(grad_check(
            "matmul",
            &[a, b],
            |tape, ids| {
                let y = tape.matmul(ids[0], ids[1])?;
                weighted_sum(tape, y, 1)
            },
            SUITE_EPS,
        )?);
    }
    // matmul with transposed rhs
    {
        let a = u(&[3, 4], &mut rng);
        let b = u(&[5, 4], &mut rng);
        reports.push(grad_check(
            "matmul_tb",
            &[a, b],
            |tape, ids| {
                let y = tape.matmul_tb(ids[0], ids[1])?;
                weighted_sum(tape, y, 2)
            },
            SUITE_EPS,
        )?);
    }
    // conv2d, two geometries
    for (name, stride, pad, seed) in [("conv2d/k3-s1-p1", 1usize, 1usize, 3u64), ("conv2d/k3-s2-p0", 2, 0, 4)] {
        let x = u(&[2, 5, 5], &mut rng);
        let w = u(&[3, 2, 3, 3], &mut rng);
        let b = u(&[3], &mut rng);
        reports.push(grad_check(
            name,
            &[x, w, b],
            move |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], ids[2], stride, pad)?;
                weighted_sum(tape, y, seed)
            },
            SUITE_EPS,
        )?);
    }
    // attention
    {
        let q = u(&[4, 3], &mut rng);
        let k = u(&[4, 3], &mut rng);
        let v = u(&[4, 3], &mut rng);
        reports.push(grad_check(
            "attention",
            &[q, k, v],
            |tape, ids| {
                let y = crate::tape::attention(tape, ids[0], ids[1], ids[2])?;
                weighted_sum(tape, y, 5)
            },
            SUITE_EPS,
        )?);
    }
    // bilinear resize, up and down
    for (name, oh, ow, seed) in [("bilinear_resize/up", 5usize, 7usize, 6u64), ("bilinear_resize/down", 2, 3, 7)] {
        let x = u(&[2, 3, 4], &mut rng);
        reports.push(grad_check(
            name,
            &[x],
            move |tape, ids| {
                let y = tape.resize(ids[0], oh, ow)?;
                weighted_sum(tape, y, seed)
            },
            SUITE_EPS,
        )?);
    }
    // max pooling (random doubles never tie)
    {
        let x = u(&[2, 4, 4], &mut rng);
        reports.push(grad_check(
            "maxpool2",
            &[x],
            |tape, ids| {
                let y = tape.maxpool2(ids[0])?;
                weighted_sum(tape, y, 8)
            },
            SUITE_EPS,
        )?);
    }
    // patch extraction
    {
        let x = u(&[1, 4, 4], &mut rng);
        reports.push(grad_check(
            "patchify",
            &[x],
            |tape, ids| {
                let y = tape.patchify(ids[0], 2)?;
                weighted_sum(tape, y, 9)
            },
            SUITE_EPS,
        )?);
    }
    // layer norm
    {
        let x = u(&[3, 5], &mut rng);
        let g = u(&[5], &mut rng);
        let b = u(&[5], &mut rng);
        reports.push(grad_check(
            "layer_norm",
            &[x, g, b],
            |tape, ids| {
                let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-6)?;
                weighted_sum(tape, y, 10)
            },
            SUITE_EPS,
        )?);
    }
    // softmax rows
    {
        let x = u(&[3, 5], &mut rng);
        reports.push(grad_check(
            "softmax",
            &[x],
            |tape, ids| {
                let y = tape.softmax_rows(ids[0])?;
                weighted_sum(tape, y, 11)
            },
            SUITE_EPS,
        )?);
    }
    // activations
    {
        let x = u(&[12], &mut rng);
        reports.push(grad_check(
            "sigmoid",
            &[x],
            |tape, ids| {
                let y = tape.sigmoid(ids[0]);
                weighted_sum(tape, y, 12)
            },
            SUITE_EPS,
        )?);
    }
    {
        let mut x = u(&[12], &mut rng);
        avoid_kink(&mut x, 0.0, 1e-3);
        reports.push(grad_check(
            "relu",
            &[x],
            |tape, ids| {
                let y = tape.relu(ids[0]);
                weighted_sum(tape, y, 13)
            },
            SUITE_EPS,
        )?);
    }
    {
        let x = u(&[12], &mut rng);
        reports.push(grad_check(
            "gelu",
            &[x],
            |tape, ids| {
                let y = tape.gelu(ids[0]);
                weighted_sum(tape, y, 14)
            },
            SUITE_EPS,
        )?);
    }
    {
        let x = Tensor::<f64>::rand_uniform(&[12], 0.1, 1.9, &mut rng);
        reports.push(grad_check(
            "log",
            &[x],
            |tape, ids| {
                let y = tape.log(ids[0]);
                weighted_sum(tape, y, 15)
            },
            SUITE_EPS,
        )?);
    }
    // lora projection (gradients w.r.t. A and B only; W frozen)
    {
        let x = u(&[3, 4], &mut rng);
        let w = u(&[4, 4], &mut rng);
        let a = u(&[4, 2], &mut rng);
        let b = u(&[2, 4], &mut rng);
        reports.push(grad_check(
            "lora_project",
            &[a, b],
            move |tape, ids| {
                let xi = tape.constant(&x);
                let wi = tape.constant(&w);
                let y = crate::encoder::lora_project_on_tape(tape, xi, wi, ids[0], ids[1], 2.0)?;
                weighted_sum(tape, y, 16)
            },
            SUITE_EPS,
        )?);
    }
    // tokenbook scores and guide mask
    for (name, sim, seed) in [
        ("token_scores/cosine", crate::tokenbook::SimKind::Cosine, 17u64),
        ("token_scores/dot", crate::tokenbook::SimKind::Dot, 18),
    ] {
        let tokens = u(&[6, 4], &mut rng);
        let protos = u(&[3, 4], &mut rng);
        let alphas = u(&[3], &mut rng);
        reports.push(grad_check(
            name,
            &[tokens, protos, alphas],
            move |tape, ids| {
                let book = crate::tokenbook::TokenBook::<f64> {
                    cfg: crate::tokenbook::TokenBookConfig {
                        k: 3,
                        sim,
                        temperature: 1.0,
                        seed: 0,
                    },
                    prototypes: Tensor::zeros(&[3, 4]),
                    alphas: Tensor::zeros(&[3]),
                };
                let vars =
                    crate::tokenbook::BookVars { prototypes: ids[1], alphas: ids[2] };
                let s = book.scores_on_tape(tape, &vars, ids[0])?;
                weighted_sum(tape, s, seed)
            },
            SUITE_EPS,
        )?);
    }
    {
        let tokens = u(&[6, 4], &mut rng);
        let protos = u(&[3, 4], &mut rng);
        let alphas = u(&[3], &mut rng);
        reports.push(grad_check(
            "guide_mask",
            &[tokens, protos, alphas],
            move |tape, ids| {
                let book = crate::tokenbook::TokenBook::<f64> {
                    cfg: crate::tokenbook::TokenBookConfig {
                        k: 3,
                        sim: crate::tokenbook::SimKind::Cosine,
                        temperature: 0.7,
                        seed: 0,
                    },
                    prototypes: Tensor::zeros(&[3, 4]),
                    alphas: Tensor::zeros(&[3]),
                };
                let vars =
                    crate::tokenbook::BookVars { prototypes: ids[1], alphas: ids[2] };
                let g = book.guide_on_tape(tape, &vars, ids[0], 2, 3, 5, 4)?;
                weighted_sum(tape, g, 19)
            },
            SUITE_EPS,
        )?);
    }
    // gate
    {
        let features = u(&[3, 4, 4], &mut rng);
        let guide = Tensor::<f64>::rand_uniform(&[1, 2, 2], 0.1, 0.9, &mut rng);
        let beta = Tensor::from_vec(&[1], vec![0.4])?;
        reports.push(grad_check(
            "gate",
            &[features, guide, beta],
            |tape, ids| {
                let y = crate::segnet::gate_on_tape(tape, ids[0], ids[1], ids[2])?;
                weighted_sum(tape, y, 20)
            },
            SUITE_EPS,
        )?);
    }
    // the four losses
    let gt_bits: Vec<u8> = (0..16).map(|_| u8::from(rng.coin())).collect();
    let gt = crate::synth::BinaryMask::from_vec(4, 4, gt_bits)?;
    {
        let probs = Tensor::<f64>::rand_uniform(&[16], 0.05, 0.95, &mut rng);
        let gt2 = gt.clone();
        reports.push(grad_check(
            "dice_loss",
            &[probs],
            move |tape, ids| crate::loss::dice_on_tape(tape, ids[0], &gt2, 1e-6),
            SUITE_EPS,
        )?);
    }
    {
        let probs = Tensor::<f64>::rand_uniform(&[16], 0.05, 0.95, &mut rng);
        let gt2 = gt.clone();
        reports.push(grad_check(
            "pixel_bce",
            &[probs],
            move |tape, ids| crate::loss::bce_on_tape(tape, ids[0], &gt2),
            SUITE_EPS,
        )?);
    }
    {
        let guide = Tensor::<f64>::rand_uniform(&[16], 0.05, 0.95, &mut rng);
        let gt2 = gt.clone();
        reports.push(grad_check(
            "guide_bce",
            &[guide],
            move |tape, ids| crate::loss::guide_bce_on_tape(tape, ids[0], &gt2),
            SUITE_EPS,
        )?);
    }
    {
        let margin = 0.2;
        let mut probs = Tensor::<f64>::rand_uniform(&[16], 0.05, 0.95, &mut rng);
        for (v, &y) in probs.data_mut().iter_mut().zip(gt.data().iter()) {
            let sign = 2.0 * y as f64 - 1.0;
            let kink_p = (margin * sign + 1.0) / 2.0;
            if (*v - kink_p).abs() < 1e-3 {
                *v += 2e-3;
            }
        }
        let gt2 = gt.clone();
        reports.push(grad_check(
            "boundary_hinge",
            &[probs],
            move |tape, ids| crate::loss::hinge_on_tape(tape, ids[0], &gt2, margin, 2),
            SUITE_EPS,
        )?);
    }
    {
        let mut logits = Tensor::<f64>::randn(&[16], 1.0, &mut rng);
        avoid_kink(&mut logits, 0.0, 1e-3);
        let guide = Tensor::<f64>::rand_uniform(&[16], 0.1, 0.9, &mut rng);
        let gt2 = gt.clone();
        reports.push(grad_check(
            "total_loss",
            &[logits, guide],
            move |tape, ids| {
                let cfg = crate::loss::LossConfig { hinge_enabled: true, ..Default::default() };
                let nodes = crate::loss::total_loss_on_tape(tape, ids[0], Some(ids[1]), &gt2, &cfg)?;
                Ok(nodes.total)
            },
            SUITE_EPS,
        )?);
    }
    if full {
        reports.push(crate::model::full_pipeline_gradcheck()?);
    }
    Ok(reports)
}
