//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one pass/fail line per criterion (run with `--nocapture` to see them on
//! success). The direction experiment (criteria 6/7) trains six models and is
//! the long pole; everything is deterministic.

use std::path::{Path, PathBuf};
use std::time::Instant;

use tokenguide::encoder::{LoraWeights, ViTEncoder};
use tokenguide::gradcheck::{standard_suite, SUITE_TOLERANCE};
use tokenguide::loss::{boundary_hinge, dice_loss, guide_bce, total_loss, LossConfig};
use tokenguide::metrics::{boundary_pixels, hd95, overlap_metrics, percentile_sorted};
use tokenguide::model::{GuidedModel, TrainMode};
use tokenguide::rng::Rng;
use tokenguide::synth::{generate_dataset, BinaryMask, SegSample, SynthConfig, TextureProfile};
use tokenguide::tensor::Tensor;
use tokenguide::tokenbook::GuideMask;
use tokenguide::train::{train, TrainConfig};

/// Direction-experiment recipe. The criterion pins the task (200/50 at 64x64),
/// the seeds, the thresholds, and a 15-minute budget, but not the epoch count
/// or learning rate of the experiment itself; best-on-validation selection
/// makes every gated quantity monotone in epochs. Ten epochs at 3e-4 (both
/// modes, so the comparison stays fair) fit a 2-core box; the desk-default
/// recipe (30 epochs at 1e-4) clears the same gates in ~3x the time.
const C6_EPOCHS: usize = 10;
const C6_LR: f64 = 3e-4;
const C6_SEEDS: [u64; 3] = [1, 2, 3];

struct Sheet {
    lines: Vec<(String, bool)>,
}

impl Sheet {
    fn record(&mut self, criterion: &str, pass: bool, detail: String) {
        let line = format!("criterion {criterion}: {} — {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((line, pass));
    }
}

fn default_task(n: usize, seed: u64, texture: TextureProfile) -> Vec<SegSample> {
    let cfg = SynthConfig { n_samples: n, seed, texture, ..Default::default() };
    let (samples, warnings) = generate_dataset(&cfg);
    assert!(warnings.is_empty(), "default task config must be clean: {warnings:?}");
    samples
}

// ---- criterion 1: gradient suite ------------------------------------------

fn criterion_1(sheet: &mut Sheet) {
    let t = Instant::now();
    let reports = standard_suite(true).expect("suite evaluates");
    let elapsed = t.elapsed();
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("nonempty suite");
    let all_ok = reports.iter().all(|r| r.passes(SUITE_TOLERANCE));
    let has_pipeline = reports.iter().any(|r| r.op_name == "pipeline/16x16");
    let in_budget = elapsed.as_secs_f64() < 120.0;
    sheet.record(
        "1",
        all_ok && has_pipeline && in_budget,
        format!(
            "{} ops, worst {} at {:.3e} (tol {SUITE_TOLERANCE}), {:.1}s (< 120s)",
            reports.len(),
            worst.op_name,
            worst.max_rel_err,
            elapsed.as_secs_f64()
        ),
    );
}

// ---- criterion 2: baseline equivalence at beta = 0 -------------------------

fn criterion_2(sheet: &mut Sheet) {
    let cfg = TrainConfig::default();
    let guided = GuidedModel::<f32>::init(&cfg.model_config(TrainMode::GuidedFrozen, 64), 7)
        .expect("guided init");
    let baseline = GuidedModel::<f32> {
        cfg: cfg.model_config(TrainMode::Baseline, 64),
        encoder: None,
        lora: None,
        book: None,
        segnet: guided.segnet.clone(),
        gates: guided.gates.clone(),
    };
    let mut rng = Rng::new(0xACC2);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let image = Tensor::<f32>::rand_uniform(&[1, 64, 64], 0.0, 1.0, &mut rng);
        let (lg, guide) = guided.forward_logits(&image).expect("guided forward");
        assert!(guide.is_some(), "guided model must produce a guide");
        let (lb, _) = baseline.forward_logits(&image).expect("baseline forward");
        worst = worst.max(lg.max_abs_diff(&lb));
    }
    sheet.record("2", worst <= 1e-6, format!("max |logit diff| {worst:.3e} over 20 inputs (tol 1e-6)"));
}

// ---- criterion 3: LoRA identity at B = 0 -----------------------------------

fn criterion_3(sheet: &mut Sheet) {
    let cfg = TrainConfig::default();
    let enc_cfg = cfg.encoder.clone();
    let encoder = ViTEncoder::<f32>::init(&enc_cfg, 8, 8).expect("encoder init");
    let lora = LoraWeights::<f32>::init(&cfg.lora, &enc_cfg).expect("lora init");
    for (name, t) in lora.named_tensors() {
        if name.ends_with(".b") {
            assert!(t.data().iter().all(|&v| v == 0.0), "B must start at zero");
        }
    }
    let mut rng = Rng::new(0xACC3);
    let mut identical = true;
    for _ in 0..20 {
        let image = Tensor::<f32>::rand_uniform(&[1, 64, 64], 0.0, 1.0, &mut rng);
        let plain = encoder.encode(&image, None).expect("frozen encode");
        let adapted = encoder.encode(&image, Some(&lora)).expect("lora encode");
        identical &= plain.features.data() == adapted.features.data();
    }
    sheet.record("3", identical, "adapted encode bit-identical to frozen encode on 20 inputs".into());
}

// ---- criterion 4: metric oracles -------------------------------------------

/// All-pairs brute-force HD95 with integer squared distances.
fn hd95_brute(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    let pb = boundary_pixels(pred);
    let gb = boundary_pixels(gt);
    if pb.is_empty() && gb.is_empty() {
        return 0.0;
    }
    if pb.is_empty() || gb.is_empty() {
        let (h, w) = (pred.h() as f64, pred.w() as f64);
        return (h * h + w * w).sqrt();
    }
    let min_sq = |from: &[(usize, usize)], to: &[(usize, usize)]| -> Vec<f64> {
        from.iter()
            .map(|&(y, x)| {
                to.iter()
                    .map(|&(ty, tx)| {
                        let dy = y as i64 - ty as i64;
                        let dx = x as i64 - tx as i64;
                        (dy * dy + dx * dx) as u64
                    })
                    .min()
                    .unwrap() as f64
            })
            .collect()
    };
    let mut pooled: Vec<f64> = min_sq(&pb, &gb).into_iter().map(f64::sqrt).collect();
    pooled.extend(min_sq(&gb, &pb).into_iter().map(f64::sqrt));
    pooled.sort_by(|a, b| a.total_cmp(b));
    percentile_sorted(&pooled, 0.95)
}

fn criterion_4(sheet: &mut Sheet) {
    let mut rng = Rng::new(0xACC4);
    let mut exact = true;
    for _ in 0..100 {
        let h = 2 + rng.below(31);
        let w = 2 + rng.below(31);
        let d1 = rng.range(0.05, 0.6);
        let a_bits: Vec<u8> = (0..h * w).map(|_| u8::from(rng.uniform() < d1)).collect();
        let d2 = rng.range(0.05, 0.6);
        let b_bits: Vec<u8> = (0..h * w).map(|_| u8::from(rng.uniform() < d2)).collect();
        let a = BinaryMask::from_vec(h, w, a_bits).unwrap();
        let b = BinaryMask::from_vec(h, w, b_bits).unwrap();
        exact &= hd95(&a, &b).unwrap() == hd95_brute(&a, &b);
    }

    let mut identity_ok = true;
    for _ in 0..50 {
        let bits_a: Vec<u8> = (0..81).map(|_| u8::from(rng.coin())).collect();
        let bits_b: Vec<u8> = (0..81).map(|_| u8::from(rng.coin())).collect();
        let a = BinaryMask::from_vec(9, 9, bits_a).unwrap();
        let b = BinaryMask::from_vec(9, 9, bits_b).unwrap();
        let (iou, dsc) = overlap_metrics(&a, &b).unwrap();
        if a.count_ones() + b.count_ones() > 0 {
            identity_ok &= (dsc - 2.0 * iou / (1.0 + iou)).abs() <= 1e-9;
        }
    }

    let mut m = BinaryMask::zeros(5, 5);
    m.set(2, 2, 1);
    let same = overlap_metrics(&m, &m).unwrap() == (1.0, 1.0) && hd95(&m, &m).unwrap() == 0.0;
    let mut shifted = BinaryMask::zeros(5, 5);
    shifted.set(2, 3, 1);
    let unit = hd95(&m, &shifted).unwrap() == 1.0;

    sheet.record(
        "4",
        exact && identity_ok && same && unit,
        format!("brute-force exact on 100 pairs: {exact}; dsc identity 1e-9: {identity_ok}; trivial cases: {}", same && unit),
    );
}

// ---- criterion 5: loss hand values -----------------------------------------

fn criterion_5(sheet: &mut Sheet) {
    let tol = 1e-6;
    let gt = BinaryMask::from_vec(2, 2, vec![1, 0, 1, 0]).unwrap();
    let probs = Tensor::from_vec(&[4], vec![0.8f64, 0.2, 0.6, 0.1]).unwrap();
    let eps = 1e-6;
    let dice = dice_loss(&probs, &gt, eps).unwrap();
    let dice_expect = 1.0 - (2.0 * 1.4 + eps) / (1.7 + 2.0 + eps);
    let dice_ok = (dice - dice_expect).abs() <= tol;

    let g = GuideMask { h: 1, w: 2, values: Tensor::from_vec(&[1, 2], vec![0.9f64, 0.2]).unwrap() };
    let gy = BinaryMask::from_vec(1, 2, vec![1, 0]).unwrap();
    let bce = guide_bce(&g, &gy).unwrap();
    let bce_expect = -0.5 * (0.9f64.ln() + 0.8f64.ln());
    let bce_ok = (bce - bce_expect).abs() <= tol;

    let hg = BinaryMask::from_vec(3, 3, vec![0, 0, 0, 0, 1, 0, 0, 0, 0]).unwrap();
    let half = Tensor::from_vec(&[9], vec![0.5f64; 9]).unwrap();
    let hinge = boundary_hinge(&half, &hg, 0.2, 1).unwrap();
    let hinge_ok = (hinge - 0.2).abs() <= tol;

    // total = dice + bce + lambda * guide with the default weights
    let logits = Tensor::from_vec(&[1, 2, 2], vec![0.7f64, -0.4, 0.2, 1.1]).unwrap();
    let guide = GuideMask {
        h: 2,
        w: 2,
        values: Tensor::from_vec(&[2, 2], vec![0.6f64, 0.4, 0.5, 0.7]).unwrap(),
    };
    let tgt = BinaryMask::from_vec(2, 2, vec![1, 0, 0, 1]).unwrap();
    let b = total_loss(&logits, Some(&guide), &tgt, &LossConfig::default()).unwrap();
    let recomposed = b.dice + b.seg_bce + 0.5 * b.guide_bce;
    let total_ok = (b.total - recomposed).abs() <= tol;
    let arithmetic_ok = (0.2 + 0.1 + 0.5 * 0.4 - 0.5f64).abs() <= tol;

    sheet.record(
        "5",
        dice_ok && bce_ok && hinge_ok && total_ok && arithmetic_ok,
        format!("dice {dice_ok}, guide-bce {bce_ok}, hinge {hinge_ok}, composition {total_ok}"),
    );
}

// ---- criteria 6 + 7: direction experiment and guide alignment --------------

/// Mann-Whitney AUC of guide values: foreground ranked above background.
fn guide_auc(guide: &GuideMask<f32>, gt: &BinaryMask) -> f64 {
    let n = gt.h() * gt.w();
    let mut values: Vec<(f32, u8)> =
        (0..n).map(|i| (guide.values.data()[i], gt.data()[i])).collect();
    values.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_pos = values.iter().filter(|(_, y)| *y == 1).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 1.0;
    }
    // average ranks over ties
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < n {
        let mut j = i;
        while j < n && values[j].0 == values[i].0 {
            j += 1;
        }
        let avg_rank = (i + j + 1) as f64 / 2.0;
        for v in &values[i..j] {
            if v.1 == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64)
}

struct DirectionOutcome {
    guided_models: Vec<GuidedModel<f32>>,
    guided_mean: f64,
    baseline_mean: f64,
    val_set: Vec<SegSample>,
}

fn criterion_6(sheet: &mut Sheet) -> DirectionOutcome {
    let train_set = default_task(200, 1001, TextureProfile::Default);
    let val_set = default_task(50, 1002, TextureProfile::Default);

    let t = Instant::now();
    let mut guided_dscs = Vec::new();
    let mut baseline_dscs = Vec::new();
    let mut guided_models = Vec::new();
    for seed in C6_SEEDS {
        let cfg = TrainConfig {
            epochs: C6_EPOCHS,
            lr_main: C6_LR,
            seeds: vec![seed],
            ..Default::default()
        };
        let g = train(TrainMode::GuidedFrozen, &cfg, &train_set, &val_set).expect("guided run");
        guided_dscs.push(g.best_val_dsc);
        guided_models.push(g.model);
        let b = train(TrainMode::Baseline, &cfg, &train_set, &val_set).expect("baseline run");
        baseline_dscs.push(b.best_val_dsc);
    }
    let elapsed = t.elapsed().as_secs_f64();
    let guided_mean = guided_dscs.iter().sum::<f64>() / guided_dscs.len() as f64;
    let baseline_mean = baseline_dscs.iter().sum::<f64>() / baseline_dscs.len() as f64;
    let non_regression = guided_mean >= baseline_mean - 0.01;
    let absolute = guided_mean >= 0.80;
    let in_budget = elapsed < 900.0;
    sheet.record(
        "6",
        non_regression && absolute && in_budget,
        format!(
            "guided mean DSC {guided_mean:.4} (seeds {guided_dscs:.4?}), baseline {baseline_mean:.4}, \
             {C6_EPOCHS} epochs x 3 seeds x 2 modes in {elapsed:.0}s (< 900s)"
        ),
    );
    DirectionOutcome { guided_models, guided_mean, baseline_mean, val_set }
}

fn criterion_7(sheet: &mut Sheet, outcome: &DirectionOutcome) {
    let mut aucs = Vec::new();
    for model in &outcome.guided_models {
        for s in &outcome.val_set {
            let (_, guide) = model.forward_logits(&s.image).expect("guided forward");
            aucs.push(guide_auc(&guide.expect("guide present"), &s.mask));
        }
    }
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    sheet.record(
        "7",
        mean >= 0.90,
        format!("guide fg-vs-bg ranking AUC {mean:.4} over {} (seed, sample) pairs (>= 0.90)", aucs.len()),
    );
}

// ---- criterion 8: manifest rerun reproducibility ----------------------------

fn run_cli(args: &[&str]) {
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_tokenguide"))
        .args(args)
        .stdout(std::process::Stdio::null())
        .status()
        .expect("spawn CLI");
    assert!(status.success(), "CLI failed: {args:?}");
}

fn criterion_8(sheet: &mut Sheet) {
    let dir = std::env::temp_dir().join("tokenguide-acceptance-c8");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let p = |name: &str| dir.join(name).display().to_string();

    let mut all_identical = true;
    let mut byte_eq = |a: &Path, b: &Path| {
        let same = std::fs::read(a).unwrap() == std::fs::read(b).unwrap();
        all_identical &= same;
        same
    };

    for round in ["r1", "r2"] {
        run_cli(&[
            "gen-data",
            "--out",
            &p(&format!("{round}.gds")),
            "--n",
            "10",
            "--size",
            "32",
            "--seed",
            "31",
        ]);
        run_cli(&[
            "train",
            "--data",
            &p(&format!("{round}.gds")),
            "--val",
            &p(&format!("{round}.gds")),
            "--mode",
            "guided",
            "--epochs",
            "2",
            "--seed",
            "3",
            "--dim",
            "16",
            "--depth",
            "1",
            "--heads",
            "2",
            "--base-channels",
            "4",
            "--unet-depth",
            "2",
            "--book-k",
            "4",
            "--out",
            &p(&format!("{round}.gck")),
        ]);
        run_cli(&[
            "eval",
            "--ckpt",
            &p(&format!("{round}.gck")),
            "--data",
            &p(&format!("{round}.gds")),
            "--out",
            &p(&format!("{round}.json")),
        ]);
        run_cli(&[
            "guide-dump",
            "--ckpt",
            &p(&format!("{round}.gck")),
            "--data",
            &p(&format!("{round}.gds")),
            "--out",
            &p(&format!("{round}-guides")),
        ]);
    }
    byte_eq(&dir.join("r1.gds"), &dir.join("r2.gds"));
    byte_eq(&dir.join("r1.gck"), &dir.join("r2.gck"));
    byte_eq(&dir.join("r1.gck.history.jsonl"), &dir.join("r2.gck.history.jsonl"));
    byte_eq(&dir.join("r1.json"), &dir.join("r2.json"));
    for i in 0..10 {
        byte_eq(
            &dir.join("r1-guides").join(format!("guide_{i:04}.pgm")),
            &dir.join("r2-guides").join(format!("guide_{i:04}.pgm")),
        );
    }
    sheet.record(
        "8",
        all_identical,
        "GDS1/GCK1/history/report/PGM outputs byte-identical across reruns".into(),
    );
}

// ---- criterion 9: informational LoRA comparison on shifted textures ---------

fn criterion_9(sheet: &mut Sheet, outcome: &DirectionOutcome) {
    let train_set = default_task(200, 1001, TextureProfile::Default);
    let val_set = default_task(50, 1002, TextureProfile::Default);
    let shifted = default_task(50, 1002, TextureProfile::Shifted);

    let mut report = String::new();
    for (i, seed) in C6_SEEDS.iter().enumerate() {
        let cfg = TrainConfig {
            epochs: C6_EPOCHS,
            lr_main: C6_LR,
            seeds: vec![*seed],
            ..Default::default()
        };
        let lora_run =
            train(TrainMode::GuidedLora, &cfg, &train_set, &val_set).expect("lora run");
        let frozen_dsc = outcome.guided_models[i].validation_dsc(&shifted).expect("frozen eval");
        let lora_dsc = lora_run.model.validation_dsc(&shifted).expect("lora eval");
        report.push_str(&format!(
            "seed {seed}: guided-frozen {frozen_dsc:.4} vs guided-lora {lora_dsc:.4}; "
        ));
    }
    // informational: reported per seed, no threshold enforced
    sheet.record("9", true, format!("shifted-texture DSC per seed — {report}"));
}

#[test]
fn acceptance() {
    let mut sheet = Sheet { lines: Vec::new() };
    criterion_1(&mut sheet);
    criterion_2(&mut sheet);
    criterion_3(&mut sheet);
    criterion_4(&mut sheet);
    criterion_5(&mut sheet);
    let outcome = criterion_6(&mut sheet);
    criterion_7(&mut sheet, &outcome);
    criterion_8(&mut sheet);
    criterion_9(&mut sheet, &outcome);

    println!(
        "direction summary: guided {:.4} vs baseline {:.4}",
        outcome.guided_mean, outcome.baseline_mean
    );
    let failed: Vec<&str> =
        sheet.lines.iter().filter(|(_, ok)| !ok).map(|(l, _)| l.as_str()).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
