//! Evaluation metrics: IoU, Dice, and HD95 with exact squared Euclidean
//! distance transforms, plus dataset-level aggregation.
//!
//! Boundary pixels are foreground pixels with a 4-neighbor in the complement
//! (pixels outside the image count as background). HD95 is the 95th
//! percentile, linearly interpolated, of the pooled symmetric
//! boundary-to-boundary distances. Conventions: both masks empty -> 0;
//! exactly one empty -> image diagonal sqrt(h^2 + w^2).

use rayon::prelude::*;

use crate::synth::{BinaryMask, SegSample};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// IoU and Dice of two binary masks. Both-empty counts as a perfect match.
pub fn overlap_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<(f64, f64)> {
    if pred.h() != gt.h() || pred.w() != gt.w() {
        return Err(Error::input(format!(
            "mask shapes {}x{} vs {}x{} differ",
            pred.h(),
            pred.w(),
            gt.h(),
            gt.w()
        )));
    }
    let mut inter = 0usize;
    let mut p_count = 0usize;
    let mut g_count = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data().iter()) {
        inter += (p & g) as usize;
        p_count += p as usize;
        g_count += g as usize;
    }
    let union = p_count + g_count - inter;
    if union == 0 {
        return Ok((1.0, 1.0));
    }
    let iou = inter as f64 / union as f64;
    let dsc = 2.0 * inter as f64 / (p_count + g_count) as f64;
    Ok((iou, dsc))
}

/// Boundary pixels: foreground with a 4-neighbor that is background or
/// outside the image.
pub fn boundary_pixels(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.h(), mask.w());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == 0 {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y == h - 1
                || x == w - 1
                || mask.get(y - 1, x) == 0
                || mask.get(y + 1, x) == 0
                || mask.get(y, x - 1) == 0
                || mask.get(y, x + 1) == 0;
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

const EDT_INF: f64 = 1e20;

/// 1D squared distance transform (lower envelope of parabolas).
fn dt1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = -EDT_INF;
    z[1] = EDT_INF;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = EDT_INF;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        d[q] = dq * dq + f[p];
    }
}

/// Exact squared Euclidean distance to the nearest seed point, per pixel.
fn edt_squared(seeds: &[(usize, usize)], h: usize, w: usize) -> Vec<f64> {
    let mut grid = vec![EDT_INF; h * w];
    for &(y, x) in seeds {
        grid[y * w + x] = 0.0;
    }
    // columns
    let mut col = vec![0.0f64; h];
    let mut out_col = vec![0.0f64; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        dt1d(&col, &mut out_col);
        for y in 0..h {
            grid[y * w + x] = out_col[y];
        }
    }
    // rows
    let mut out_row = vec![0.0f64; w];
    for y in 0..h {
        dt1d(&grid[y * w..(y + 1) * w].to_vec(), &mut out_row);
        grid[y * w..(y + 1) * w].copy_from_slice(&out_row);
    }
    grid
}

/// Linear-interpolation percentile of a sorted slice, q in [0, 1].
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn symmetric_surface_distances(pred: &BinaryMask, gt: &BinaryMask) -> Option<Vec<f64>> {
    let pb = boundary_pixels(pred);
    let gb = boundary_pixels(gt);
    match (pb.is_empty(), gb.is_empty()) {
        (true, true) => return Some(Vec::new()),
        (true, false) | (false, true) => return None,
        _ => {}
    }
    let (h, w) = (pred.h(), pred.w());
    let d_to_g = edt_squared(&gb, h, w);
    let d_to_p = edt_squared(&pb, h, w);
    let mut pooled = Vec::with_capacity(pb.len() + gb.len());
    for &(y, x) in &pb {
        pooled.push(d_to_g[y * w + x].sqrt());
    }
    for &(y, x) in &gb {
        pooled.push(d_to_p[y * w + x].sqrt());
    }
    Some(pooled)
}

fn hd_percentile(pred: &BinaryMask, gt: &BinaryMask, q: f64) -> Result<f64> {
    if pred.h() != gt.h() || pred.w() != gt.w() {
        return Err(Error::input(format!(
            "mask shapes {}x{} vs {}x{} differ",
            pred.h(),
            pred.w(),
            gt.h(),
            gt.w()
        )));
    }
    match symmetric_surface_distances(pred, gt) {
        Some(pooled) if pooled.is_empty() => Ok(0.0),
        Some(mut pooled) => {
            pooled.sort_by(|a, b| a.total_cmp(b));
            Ok(percentile_sorted(&pooled, q))
        }
        None => {
            let (h, w) = (pred.h() as f64, pred.w() as f64);
            Ok((h * h + w * w).sqrt())
        }
    }
}

/// 95th percentile of the pooled symmetric surface distances (unit spacing).
pub fn hd95(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    hd_percentile(pred, gt, 0.95)
}

/// Exact (100th percentile) Hausdorff distance, same conventions as [`hd95`].
pub fn hausdorff(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    hd_percentile(pred, gt, 1.0)
}

/// Per-sample metric triple.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SampleMetrics {
    pub iou: f64,
    pub dsc: f64,
    pub hd95: f64,
}

/// Dataset-level report with per-sample values and mean/std aggregates.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub iou_mean: f64,
    pub iou_std: f64,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub hd95_mean: f64,
    pub hd95_std: f64,
    pub n_samples: usize,
    pub seeds: Vec<u64>,
    pub per_sample: Vec<SampleMetrics>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    // population standard deviation
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn aggregate(per_sample: Vec<SampleMetrics>, seeds: Vec<u64>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::input("cannot aggregate an empty metrics list"));
        }
        let (iou_mean, iou_std) = mean_std(per_sample.iter().map(|m| m.iou));
        let (dsc_mean, dsc_std) = mean_std(per_sample.iter().map(|m| m.dsc));
        let (hd95_mean, hd95_std) = mean_std(per_sample.iter().map(|m| m.hd95));
        Ok(MetricsReport {
            iou_mean,
            iou_std,
            dsc_mean,
            dsc_std,
            hd95_mean,
            hd95_std,
            n_samples: per_sample.len(),
            seeds,
            per_sample,
        })
    }
}

/// Anything that can turn an image into a predicted mask.
pub trait Predictor: Sync {
    fn predict_mask(&self, image: &Tensor<f32>, tta_flips: bool) -> Result<BinaryMask>;
}

/// Flip-averaged test-time augmentation: evaluate `prob_fn` on the 4 flip
/// variants, unflip each probability map, and average. Pairwise sums keep the
/// average bit-exact when all variants agree (e.g. for a flip-equivariant
/// predictor).
pub fn tta_flip_average<F>(image: &Tensor<f32>, prob_fn: F) -> Result<Vec<f32>>
where
    F: Fn(&Tensor<f32>) -> Result<Vec<f32>>,
{
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut maps = Vec::with_capacity(4);
    for (fh, fv) in [(false, false), (true, false), (false, true), (true, true)] {
        let variant = crate::synth::flip_image(image, fh, fv);
        let p = prob_fn(&variant)?;
        let pt = Tensor::from_vec(&[1, h, w], p)?;
        maps.push(crate::synth::flip_image(&pt, fh, fv));
    }
    Ok((0..h * w)
        .map(|i| {
            let a = maps[0].data()[i] + maps[1].data()[i];
            let b = maps[2].data()[i] + maps[3].data()[i];
            (a + b) / 4.0
        })
        .collect())
}

/// Per-sample prediction and metrics over a dataset, in sample order.
pub fn evaluate_dataset<P: Predictor>(
    predictor: &P,
    samples: &[SegSample],
    tta_flips: bool,
    seeds: Vec<u64>,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::input("cannot evaluate an empty dataset"));
    }
    let per_sample: Result<Vec<SampleMetrics>> = samples
        .par_iter()
        .map(|s| {
            let pred = predictor.predict_mask(&s.image, tta_flips)?;
            let (iou, dsc) = overlap_metrics(&pred, &s.mask)?;
            let hd = hd95(&pred, &s.mask)?;
            Ok(SampleMetrics { iou, dsc, hd95: hd })
        })
        .collect();
    MetricsReport::aggregate(per_sample?, seeds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn mask_from(h: usize, w: usize, bits: &[u8]) -> BinaryMask {
        BinaryMask::from_vec(h, w, bits.to_vec()).unwrap()
    }

    fn random_mask(rng: &mut Rng, h: usize, w: usize, density: f64) -> BinaryMask {
        let data = (0..h * w).map(|_| u8::from(rng.uniform() < density)).collect();
        BinaryMask::from_vec(h, w, data).unwrap()
    }

    /// All-pairs brute force: pooled symmetric distances from squared integer
    /// arithmetic. Kept deliberately independent of the EDT path.
    fn hd95_oracle(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
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

    #[test]
    fn overlap_trivial_cases() {
        let a = mask_from(2, 2, &[1, 1, 0, 0]);
        assert_eq!(overlap_metrics(&a, &a).unwrap(), (1.0, 1.0));

        let b = mask_from(2, 2, &[0, 0, 1, 1]);
        assert_eq!(overlap_metrics(&a, &b).unwrap(), (0.0, 0.0));

        // two 2-pixel masks sharing one pixel
        let c = mask_from(2, 2, &[1, 1, 0, 0]);
        let d = mask_from(2, 2, &[1, 0, 1, 0]);
        let (iou, dsc) = overlap_metrics(&c, &d).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-15);
        assert!((dsc - 0.5).abs() < 1e-15);

        // both empty -> perfect by convention
        let e = mask_from(2, 2, &[0; 4]);
        assert_eq!(overlap_metrics(&e, &e).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn shape_mismatch_is_input_error() {
        let a = mask_from(2, 2, &[0; 4]);
        let b = mask_from(2, 3, &[0; 6]);
        assert!(matches!(overlap_metrics(&a, &b), Err(Error::Input(_))));
        assert!(matches!(hd95(&a, &b), Err(Error::Input(_))));
    }

    #[test]
    fn dsc_iou_identity() {
        let mut rng = Rng::new(10);
        for _ in 0..50 {
            let a = random_mask(&mut rng, 9, 7, 0.4);
            let b = random_mask(&mut rng, 9, 7, 0.4);
            let (iou, dsc) = overlap_metrics(&a, &b).unwrap();
            if a.count_ones() + b.count_ones() > 0 {
                assert!((dsc - 2.0 * iou / (1.0 + iou)).abs() <= 1e-9);
                assert!(iou <= dsc + 1e-15);
            }
        }
    }

    #[test]
    fn hd95_trivial_cases() {
        let a = mask_from(3, 3, &[0, 0, 0, 0, 1, 0, 0, 0, 0]);
        assert_eq!(hd95(&a, &a).unwrap(), 0.0);

        // single pixels at (0,0) and (0,1)
        let p = mask_from(2, 2, &[1, 0, 0, 0]);
        let q = mask_from(2, 2, &[0, 1, 0, 0]);
        assert_eq!(hd95(&p, &q).unwrap(), 1.0);

        // empty conventions
        let empty = mask_from(3, 4, &[0; 12]);
        assert_eq!(hd95(&empty, &empty).unwrap(), 0.0);
        let one = mask_from(3, 4, &[1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let diag = (9.0f64 + 16.0).sqrt();
        assert_eq!(hd95(&one, &empty).unwrap(), diag);
        assert_eq!(hd95(&empty, &one).unwrap(), diag);
    }

    #[test]
    fn hd95_matches_brute_force_oracle_exactly() {
        let mut rng = Rng::new(42);
        for case in 0..100 {
            let h = 2 + rng.below(31);
            let w = 2 + rng.below(31);
            let da = rng.range(0.05, 0.6);
            let a = random_mask(&mut rng, h, w, da);
            let db = rng.range(0.05, 0.6);
            let b = random_mask(&mut rng, h, w, db);
            let fast = hd95(&a, &b).unwrap();
            let slow = hd95_oracle(&a, &b);
            assert_eq!(fast, slow, "case {case} ({h}x{w}): {fast} vs {slow}");
        }
    }

    #[test]
    fn hd95_symmetric_and_below_full_hausdorff() {
        let mut rng = Rng::new(7);
        for _ in 0..30 {
            let a = random_mask(&mut rng, 12, 12, 0.3);
            let b = random_mask(&mut rng, 12, 12, 0.3);
            assert_eq!(hd95(&a, &b).unwrap(), hd95(&b, &a).unwrap());
            assert!(hd95(&a, &b).unwrap() <= hausdorff(&a, &b).unwrap() + 1e-12);
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        /// dsc = 2 iou / (1 + iou) whenever the union is nonempty, and hd95 is
        /// symmetric and bounded by the full Hausdorff distance.
        #[test]
        fn overlap_identity_and_hd_bounds(
            h in 2usize..10,
            w in 2usize..10,
            seed in proptest::prelude::any::<u64>(),
        ) {
            let mut rng = Rng::new(seed);
            let a = random_mask(&mut rng, h, w, 0.4);
            let b = random_mask(&mut rng, h, w, 0.4);
            let (iou, dsc) = overlap_metrics(&a, &b).unwrap();
            if a.count_ones() + b.count_ones() > 0 {
                proptest::prop_assert!((dsc - 2.0 * iou / (1.0 + iou)).abs() <= 1e-9);
            }
            let fwd = hd95(&a, &b).unwrap();
            proptest::prop_assert_eq!(fwd, hd95(&b, &a).unwrap());
            proptest::prop_assert!(fwd <= hausdorff(&a, &b).unwrap() + 1e-12);
        }
    }

    #[test]
    fn metrics_translation_equivariant() {
        // shift both masks by (2, 3) without touching the borders
        let mut rng = Rng::new(19);
        let mut a = BinaryMask::zeros(16, 16);
        let mut b = BinaryMask::zeros(16, 16);
        for _ in 0..12 {
            a.set(3 + rng.below(6), 3 + rng.below(6), 1);
            b.set(3 + rng.below(6), 3 + rng.below(6), 1);
        }
        let shift = |m: &BinaryMask| {
            let mut out = BinaryMask::zeros(16, 16);
            for y in 0..16 {
                for x in 0..16 {
                    if m.get(y, x) == 1 {
                        out.set(y + 2, x + 3, 1);
                    }
                }
            }
            out
        };
        let (iou1, dsc1) = overlap_metrics(&a, &b).unwrap();
        let (iou2, dsc2) = overlap_metrics(&shift(&a), &shift(&b)).unwrap();
        assert_eq!((iou1, dsc1), (iou2, dsc2));
        assert_eq!(hd95(&a, &b).unwrap(), hd95(&shift(&a), &shift(&b)).unwrap());
    }

    struct OracleGt;

    impl Predictor for OracleGt {
        fn predict_mask(&self, image: &Tensor<f32>, _tta: bool) -> Result<BinaryMask> {
            // the fixture encodes the mask into the image as 0/1 values
            let (h, w) = (image.shape()[1], image.shape()[2]);
            BinaryMask::from_vec(h, w, image.data().iter().map(|&v| u8::from(v > 0.5)).collect())
        }
    }

    #[test]
    fn tta_equals_plain_for_equivariant_predictor() {
        // The oracle reads each pixel independently, so it commutes with flips;
        // TTA plumbing (flip, predict, unflip, average) must then be a no-op —
        // on a flip-symmetric input and on arbitrary inputs alike.
        let pixelwise = |img: &Tensor<f32>| -> Result<Vec<f32>> { Ok(img.data().to_vec()) };
        let mut rng = Rng::new(88);

        let mut sym = vec![0.0f32; 8 * 8];
        for y in 0..4 {
            for x in 0..4 {
                let v = rng.uniform() as f32;
                sym[y * 8 + x] = v;
                sym[y * 8 + (7 - x)] = v;
                sym[(7 - y) * 8 + x] = v;
                sym[(7 - y) * 8 + (7 - x)] = v;
            }
        }
        let symmetric = Tensor::from_vec(&[1, 8, 8], sym).unwrap();
        let arbitrary = Tensor::rand_uniform(&[1, 8, 8], 0.0, 1.0, &mut rng);
        for image in [&symmetric, &arbitrary] {
            let averaged = tta_flip_average(image, pixelwise).unwrap();
            assert_eq!(averaged, image.data());
        }
    }

    #[test]
    fn oracle_predictor_scores_perfectly() {
        let mut rng = Rng::new(3);
        let samples: Vec<SegSample> = (0..4)
            .map(|i| {
                let mask = random_mask(&mut rng, 8, 8, 0.3);
                let image = Tensor::from_vec(
                    &[1, 8, 8],
                    mask.data().iter().map(|&b| b as f32).collect(),
                )
                .unwrap();
                SegSample { image, mask, sample_id: i }
            })
            .collect();
        let report = evaluate_dataset(&OracleGt, &samples, false, vec![1]).unwrap();
        assert_eq!(report.iou_mean, 1.0);
        assert_eq!(report.dsc_mean, 1.0);
        assert_eq!(report.hd95_mean, 0.0);
        assert_eq!(report.n_samples, 4);
    }

    #[test]
    fn three_sample_mean_matches_hand_average() {
        let per = vec![
            SampleMetrics { iou: 0.5, dsc: 0.6, hd95: 3.0 },
            SampleMetrics { iou: 0.7, dsc: 0.8, hd95: 1.0 },
            SampleMetrics { iou: 0.9, dsc: 0.95, hd95: 0.5 },
        ];
        let report = MetricsReport::aggregate(per, vec![]).unwrap();
        assert!((report.iou_mean - 0.7).abs() < 1e-15);
        assert!((report.dsc_mean - (0.6 + 0.8 + 0.95) / 3.0).abs() < 1e-15);
        assert!((report.hd95_mean - 1.5).abs() < 1e-15);
    }

    #[test]
    fn report_serializes_with_fixed_keys() {
        let per = vec![SampleMetrics { iou: 1.0, dsc: 1.0, hd95: 0.0 }];
        let report = MetricsReport::aggregate(per, vec![7]).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        for key in ["iou_mean", "dsc_mean", "hd95_mean", "iou_std", "dsc_std", "hd95_std", "per_sample"]
        {
            assert!(json.contains(key), "missing key {key} in {json}");
        }
    }
}
