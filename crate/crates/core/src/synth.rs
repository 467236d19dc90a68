//! Procedural binary-segmentation samples and the GDS1 on-disk container.
//!
//! Each sample is a single connected, radially perturbed ellipse over a
//! textured background: the mask region is shifted by `contrast`, gaussian
//! noise is added, and the image is clipped to [0,1]. The mask stream is
//! split from the texture stream so the "shifted" texture profile reuses the
//! exact same shapes.

use std::io::{Read, Write};
use std::path::Path;

use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Binary [h, w] mask with entries in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(h: usize, w: usize) -> Self {
        BinaryMask { h, w, data: vec![0; h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::config(format!(
                "mask data length {} does not match {}x{}",
                data.len(),
                h,
                w
            )));
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(Error::config(format!("mask entry at {pos} is not binary")));
        }
        Ok(BinaryMask { h, w, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Ground-truth tensor in the training precision.
    pub fn to_tensor<S: crate::tensor::Scalar>(&self) -> Tensor<S> {
        Tensor::from_vec(&[self.h, self.w], self.data.iter().map(|&v| S::from_f64(v as f64)).collect())
            .expect("mask invariant")
    }

    pub fn flip_h(&self) -> Self {
        let mut out = BinaryMask::zeros(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                out.set(y, x, self.get(y, self.w - 1 - x));
            }
        }
        out
    }

    pub fn flip_v(&self) -> Self {
        let mut out = BinaryMask::zeros(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                out.set(y, x, self.get(self.h - 1 - y, x));
            }
        }
        out
    }

    /// True when the foreground forms one 4-connected component (or is empty).
    pub fn is_single_component(&self) -> bool {
        let total = self.count_ones();
        if total == 0 {
            return true;
        }
        let start = self.data.iter().position(|&v| v == 1).unwrap();
        let mut seen = vec![false; self.data.len()];
        let mut stack = vec![start];
        seen[start] = true;
        let mut count = 0usize;
        while let Some(idx) = stack.pop() {
            count += 1;
            let (y, x) = (idx / self.w, idx % self.w);
            let push = |ny: usize, nx: usize, stack: &mut Vec<usize>, seen: &mut Vec<bool>| {
                let nidx = ny * self.w + nx;
                if self.data[nidx] == 1 && !seen[nidx] {
                    seen[nidx] = true;
                    stack.push(nidx);
                }
            };
            if y > 0 {
                push(y - 1, x, &mut stack, &mut seen);
            }
            if y + 1 < self.h {
                push(y + 1, x, &mut stack, &mut seen);
            }
            if x > 0 {
                push(y, x - 1, &mut stack, &mut seen);
            }
            if x + 1 < self.w {
                push(y, x + 1, &mut stack, &mut seen);
            }
        }
        count == total
    }
}

/// Background texture statistics; `Shifted` is the held-out evaluation variant
/// with the same shapes but different texture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TextureProfile {
    Default,
    Shifted,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    /// Image edge length.
    pub size: usize,
    pub n_samples: usize,
    /// Target/background intensity gap in [0,1].
    pub contrast: f64,
    pub noise_sigma: f64,
    /// Number of radial harmonics perturbing the ellipse.
    pub blob_complexity: usize,
    /// Allowed mask area fraction range.
    pub area_frac: (f64, f64),
    pub texture: TextureProfile,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 64,
            n_samples: 200,
            contrast: 0.25,
            noise_sigma: 0.1,
            blob_complexity: 4,
            area_frac: (0.05, 0.35),
            texture: TextureProfile::Default,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Clamp out-of-range parameters, recording a warning per adjustment.
    pub fn sanitized(&self) -> (SynthConfig, Vec<String>) {
        let mut cfg = self.clone();
        let mut warnings = Vec::new();
        if cfg.size < 8 {
            warnings.push(format!("size {} raised to 8", cfg.size));
            cfg.size = 8;
        }
        if !(0.0..=1.0).contains(&cfg.contrast) {
            let c = cfg.contrast.clamp(0.0, 1.0);
            warnings.push(format!("contrast {} clamped to {}", cfg.contrast, c));
            cfg.contrast = c;
        }
        if cfg.noise_sigma < 0.0 {
            warnings.push(format!("noise_sigma {} clamped to 0", cfg.noise_sigma));
            cfg.noise_sigma = 0.0;
        }
        let (lo, hi) = cfg.area_frac;
        let lo2 = lo.clamp(0.005, 0.5);
        let hi2 = hi.clamp(lo2 + 1e-3, 0.5);
        if (lo2, hi2) != (lo, hi) {
            warnings.push(format!("area_frac ({lo}, {hi}) clamped to ({lo2}, {hi2})"));
            cfg.area_frac = (lo2, hi2);
        }
        (cfg, warnings)
    }
}

/// One training/evaluation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    /// [1, H, W] image with entries in [0, 1].
    pub image: Tensor<f32>,
    pub mask: BinaryMask,
    pub sample_id: u32,
}

/// Per-sample seed stream for a dataset.
pub fn sample_seed(dataset_seed: u64, index: usize) -> u64 {
    Rng::new(dataset_seed).split(index as u64).next_u64()
}

fn rasterize_blob(
    size: usize,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
    eps: &[f64],
    phases: &[f64],
) -> BinaryMask {
    let mut mask = BinaryMask::zeros(size, size);
    let (sin_t, cos_t) = theta.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let u = (dx * cos_t + dy * sin_t) / a;
            let v = (-dx * sin_t + dy * cos_t) / b;
            let rho = (u * u + v * v).sqrt();
            let phi = v.atan2(u);
            let mut r = 1.0;
            for (j, (&e, &p)) in eps.iter().zip(phases.iter()).enumerate() {
                r += e * ((j as f64 + 2.0) * phi + p).cos();
            }
            if rho <= r {
                mask.set(y, x, 1);
            }
        }
    }
    mask
}

fn generate_mask(rng: &mut Rng, cfg: &SynthConfig) -> BinaryMask {
    let size = cfg.size as f64;
    let (lo, hi) = cfg.area_frac;
    // aim inside the band so rasterization error cannot escape it
    let margin = 0.08 * (hi - lo);
    let target = rng.range(lo + margin, hi - margin);

    let mut eps: Vec<f64> = (0..cfg.blob_complexity)
        .map(|j| rng.range(0.0, 0.10 / ((j + 1) as f64).sqrt()))
        .collect();
    let phases: Vec<f64> = (0..cfg.blob_complexity).map(|_| rng.range(0.0, std::f64::consts::TAU)).collect();
    let aspect = rng.range(0.55, 1.0);
    let theta = rng.range(0.0, std::f64::consts::PI);
    let center_u = (rng.uniform(), rng.uniform());

    for attempt in 0..4 {
        let eps_sum: f64 = eps.iter().sum();
        let eps_sq: f64 = eps.iter().map(|e| e * e).sum();
        let mut a = (target * size * size / (std::f64::consts::PI * aspect * (1.0 + eps_sq / 2.0)))
            .sqrt();
        // keep the blob fully interior so clipping never breaks the contract
        let reach = |a: f64| a * (1.0 + eps_sum) * 1.02 + 1.0;
        let max_a = (size / 2.0 - 1.0) / ((1.0 + eps_sum) * 1.02);
        if a > max_a {
            a = max_a;
        }
        let lo_c = reach(a);
        let hi_c = size - reach(a);
        let cx = if lo_c < hi_c { lo_c + (hi_c - lo_c) * center_u.0 } else { size / 2.0 };
        let cy = if lo_c < hi_c { lo_c + (hi_c - lo_c) * center_u.1 } else { size / 2.0 };

        let mut scale = 1.0f64;
        for _ in 0..16 {
            let mask = rasterize_blob(cfg.size, cx, cy, a * scale, a * aspect * scale, theta, &eps, &phases);
            let frac = mask.count_ones() as f64 / (size * size);
            if frac >= lo && frac <= hi && mask.is_single_component() && frac > 0.0 {
                return mask;
            }
            if frac <= 0.0 {
                scale *= 1.5;
                continue;
            }
            if !mask.is_single_component() {
                break; // soften the harmonics and retry
            }
            let correction = (target / frac).sqrt().clamp(0.5, 2.0);
            if a * scale * correction > max_a {
                scale = max_a / a;
            } else {
                scale *= correction;
            }
        }
        let _ = attempt;
        for e in eps.iter_mut() {
            *e *= 0.5;
        }
    }
    // harmonics fully damped: a plain interior ellipse always satisfies the contract
    let a = (target * size * size / (std::f64::consts::PI * aspect)).sqrt();
    rasterize_blob(cfg.size, size / 2.0, size / 2.0, a, a * aspect, 0.0, &[], &[])
}

fn box_blur(field: &mut [f64], size: usize) {
    let mut tmp = vec![0.0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny >= 0 && ny < size as i64 && nx >= 0 && nx < size as i64 {
                        acc += field[ny as usize * size + nx as usize];
                        cnt += 1.0;
                    }
                }
            }
            tmp[y * size + x] = acc / cnt;
        }
    }
    field.copy_from_slice(&tmp);
}

fn generate_texture(rng: &mut Rng, cfg: &SynthConfig) -> Vec<f64> {
    let size = cfg.size;
    let (base, amp) = match cfg.texture {
        TextureProfile::Default => (0.45, 0.05),
        TextureProfile::Shifted => (0.55, 0.12),
    };
    let mut field: Vec<f64> = (0..size * size).map(|_| rng.normal()).collect();
    box_blur(&mut field, size);
    box_blur(&mut field, size);
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    let std = (field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / field.len() as f64)
        .sqrt()
        .max(1e-9);
    for v in field.iter_mut() {
        *v = base + (*v - mean) / std * amp;
    }
    if cfg.texture == TextureProfile::Shifted {
        // directional ripple on top of the smoothed noise
        let fx = rng.range(0.08, 0.16);
        let fy = rng.range(0.08, 0.16);
        let phase = rng.range(0.0, std::f64::consts::TAU);
        for y in 0..size {
            for x in 0..size {
                field[y * size + x] +=
                    0.06 * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + phase).sin();
            }
        }
    }
    field
}

/// Deterministic sample from (seed, cfg). The mask, texture, and noise draw
/// from split streams so texture profile changes never alter the shapes.
pub fn generate_sample(seed: u64, cfg: &SynthConfig) -> SegSample {
    let (cfg, _warnings) = cfg.sanitized();
    let root = Rng::new(seed ^ cfg.seed.rotate_left(17));
    let mut mask_rng = root.split(1);
    let mut tex_rng = root.split(2);
    let mut noise_rng = root.split(3);

    let mask = generate_mask(&mut mask_rng, &cfg);
    let texture = generate_texture(&mut tex_rng, &cfg);
    let n = cfg.size * cfg.size;
    let mut image = Vec::with_capacity(n);
    for i in 0..n {
        let v = texture[i]
            + cfg.contrast * mask.data()[i] as f64
            + cfg.noise_sigma * noise_rng.normal();
        image.push(v.clamp(0.0, 1.0) as f32);
    }
    SegSample {
        image: Tensor::from_vec(&[1, cfg.size, cfg.size], image).expect("length by construction"),
        mask,
        sample_id: 0,
    }
}

/// Generate `cfg.n_samples` samples with ids 0..n; returns clamp warnings.
pub fn generate_dataset(cfg: &SynthConfig) -> (Vec<SegSample>, Vec<String>) {
    let (clean, warnings) = cfg.sanitized();
    let samples = (0..clean.n_samples)
        .map(|i| {
            let mut s = generate_sample(sample_seed(clean.seed, i), &clean);
            s.sample_id = i as u32;
            s
        })
        .collect();
    (samples, warnings)
}

// ---- GDS1 container ------------------------------------------------------

const GDS1_MAGIC: &[u8; 4] = b"GDS1";
const GDS1_VERSION: u32 = 1;

/// Write samples as GDS1: magic, u32 LE {version, n, H, W}, then per sample
/// H*W f32 LE image values followed by H*W mask bytes.
pub fn write_dataset(samples: &[SegSample], path: &Path) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::input("refusing to write an empty dataset"));
    }
    let h = samples[0].mask.h();
    let w = samples[0].mask.w();
    for s in samples {
        if s.mask.h() != h || s.mask.w() != w || s.image.shape() != [1, h, w] {
            return Err(Error::input(format!(
                "sample {} has mixed resolution ({}x{} expected)",
                s.sample_id, h, w
            )));
        }
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(GDS1_MAGIC)?;
    out.write_all(&GDS1_VERSION.to_le_bytes())?;
    out.write_all(&(samples.len() as u32).to_le_bytes())?;
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    for s in samples {
        for v in s.image.data() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(s.mask.data())?;
    }
    out.flush()?;
    Ok(())
}

/// Read a GDS1 file; validates magic, version, sizes, and mask bytes.
pub fn read_dataset(path: &Path) -> Result<Vec<SegSample>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_dataset_bytes(&bytes)
}

pub fn read_dataset_bytes(bytes: &[u8]) -> Result<Vec<SegSample>> {
    if bytes.len() < 4 || &bytes[0..4] != GDS1_MAGIC {
        return Err(Error::format(0, "bad GDS1 magic"));
    }
    let u32_at = |off: usize| -> Result<u32> {
        let end = off + 4;
        if end > bytes.len() {
            return Err(Error::format(off as u64, "truncated header"));
        }
        Ok(u32::from_le_bytes(bytes[off..end].try_into().unwrap()))
    };
    let version = u32_at(4)?;
    if version != GDS1_VERSION {
        return Err(Error::format(4, format!("unsupported GDS1 version {version}")));
    }
    let n = u32_at(8)? as usize;
    let h = u32_at(12)? as usize;
    let w = u32_at(16)? as usize;
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::format(8, format!("degenerate dimensions n={n} h={h} w={w}")));
    }
    let per_sample = h * w * 4 + h * w;
    let expect = 20 + n * per_sample;
    if bytes.len() != expect {
        return Err(Error::format(
            bytes.len().min(expect) as u64,
            format!("file is {} bytes, expected {}", bytes.len(), expect),
        ));
    }
    let mut samples = Vec::with_capacity(n);
    let mut off = 20usize;
    for i in 0..n {
        let mut image = Vec::with_capacity(h * w);
        for _ in 0..h * w {
            image.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
            off += 4;
        }
        let mask_bytes = &bytes[off..off + h * w];
        if let Some(bad) = mask_bytes.iter().position(|&b| b > 1) {
            return Err(Error::format(
                (off + bad) as u64,
                format!("mask byte {} is not in {{0,1}}", mask_bytes[bad]),
            ));
        }
        off += h * w;
        samples.push(SegSample {
            image: Tensor::from_vec(&[1, h, w], image)?,
            mask: BinaryMask::from_vec(h, w, mask_bytes.to_vec())?,
            sample_id: i as u32,
        });
    }
    Ok(samples)
}

/// Horizontal/vertical flips of a [1,H,W] image (used by augmentation and TTA).
pub fn flip_image(image: &Tensor<f32>, flip_h: bool, flip_v: bool) -> Tensor<f32> {
    let shape = image.shape();
    let (h, w) = (shape[1], shape[2]);
    let src = image.data();
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let sy = if flip_v { h - 1 - y } else { y };
            let sx = if flip_h { w - 1 - x } else { x };
            out[y * w + x] = src[sy * w + sx];
        }
    }
    Tensor::from_vec(&[1, h, w], out).expect("same length")
}

pub fn flip_mask(mask: &BinaryMask, flip_h: bool, flip_v: bool) -> BinaryMask {
    let mut m = mask.clone();
    if flip_h {
        m = m.flip_h();
    }
    if flip_v {
        m = m.flip_v();
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_bit_deterministic() {
        let cfg = SynthConfig { size: 32, ..Default::default() };
        let a = generate_sample(123, &cfg);
        let b = generate_sample(123, &cfg);
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn image_entries_in_unit_interval() {
        let cfg = SynthConfig { size: 32, ..Default::default() };
        for s in 0..20 {
            let sample = generate_sample(s, &cfg);
            assert!(sample.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn area_fraction_and_connectivity_sweep() {
        let cfg = SynthConfig { size: 64, ..Default::default() };
        let (lo, hi) = cfg.area_frac;
        for seed in 0..1000u64 {
            let sample = generate_sample(seed, &cfg);
            let frac = sample.mask.count_ones() as f64 / (64.0 * 64.0);
            assert!(
                frac >= lo && frac <= hi,
                "seed {seed}: area fraction {frac} outside [{lo}, {hi}]"
            );
            assert!(sample.mask.is_single_component(), "seed {seed}: mask not connected");
        }
    }

    #[test]
    fn zero_contrast_means_no_systematic_gap() {
        // Pooled over 100 samples, the inside/outside intensity gap must be
        // explained by noise alone: |gap| <= 3 * sigma / sqrt(pooled area).
        let cfg = SynthConfig { size: 64, contrast: 0.0, ..Default::default() };
        let mut sum_in = 0.0f64;
        let mut n_in = 0.0f64;
        let mut sum_out = 0.0f64;
        let mut n_out = 0.0f64;
        for seed in 0..100u64 {
            let s = generate_sample(seed, &cfg);
            for (v, m) in s.image.data().iter().zip(s.mask.data().iter()) {
                if *m == 1 {
                    sum_in += *v as f64;
                    n_in += 1.0;
                } else {
                    sum_out += *v as f64;
                    n_out += 1.0;
                }
            }
        }
        let gap = (sum_in / n_in - sum_out / n_out).abs();
        let bound = 3.0 * cfg.noise_sigma / n_in.min(n_out).sqrt();
        assert!(gap <= bound, "gap {gap} exceeds noise bound {bound}");
    }

    #[test]
    fn shifted_profile_keeps_shapes() {
        let base = SynthConfig { size: 32, ..Default::default() };
        let shifted = SynthConfig { texture: TextureProfile::Shifted, ..base.clone() };
        for seed in 0..10 {
            let a = generate_sample(seed, &base);
            let b = generate_sample(seed, &shifted);
            assert_eq!(a.mask, b.mask, "seed {seed}: shifted profile changed the mask");
            assert_ne!(a.image.data(), b.image.data());
        }
    }

    #[test]
    fn gds1_roundtrip_bit_exact() {
        let cfg = SynthConfig { size: 16, n_samples: 5, ..Default::default() };
        let (samples, warnings) = generate_dataset(&cfg);
        assert!(warnings.is_empty());
        let dir = std::env::temp_dir().join("tokenguide-test-gds1");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.gds");
        write_dataset(&samples, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(samples, back);
    }

    #[test]
    fn gds1_bad_magic_reports_offset_zero() {
        let err = read_dataset_bytes(b"XXXXrest-of-file").unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn gds1_single_2x2_sample_is_40_bytes() {
        let sample = SegSample {
            image: Tensor::from_vec(&[1, 2, 2], vec![0.0, 0.25, 0.5, 1.0]).unwrap(),
            mask: BinaryMask::from_vec(2, 2, vec![0, 1, 1, 0]).unwrap(),
            sample_id: 0,
        };
        let dir = std::env::temp_dir().join("tokenguide-test-gds1");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tiny.gds");
        write_dataset(&[sample], &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 40);
    }

    #[test]
    fn gds1_truncation_detected() {
        let cfg = SynthConfig { size: 8, n_samples: 2, ..Default::default() };
        let (samples, _) = generate_dataset(&cfg);
        let dir = std::env::temp_dir().join("tokenguide-test-gds1");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.gds");
        write_dataset(&samples, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(read_dataset_bytes(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn gds1_nonbinary_mask_byte_rejected_with_offset() {
        let sample = SegSample {
            image: Tensor::from_vec(&[1, 2, 2], vec![0.0; 4]).unwrap(),
            mask: BinaryMask::from_vec(2, 2, vec![0, 0, 0, 0]).unwrap(),
            sample_id: 0,
        };
        let dir = std::env::temp_dir().join("tokenguide-test-gds1");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("badmask.gds");
        write_dataset(&[sample], &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mask_off = 20 + 16; // header + image floats
        bytes[mask_off + 2] = 7;
        match read_dataset_bytes(&bytes).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, (mask_off + 2) as u64),
            other => panic!("unexpected error {other}"),
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        /// read(write(s)) = s for arbitrary valid samples.
        #[test]
        fn gds1_roundtrip_holds_for_arbitrary_samples(
            h in 1usize..6,
            w in 1usize..6,
            n in 1usize..4,
            seed in proptest::prelude::any::<u64>(),
        ) {
            let mut rng = Rng::new(seed);
            let samples: Vec<SegSample> = (0..n)
                .map(|i| SegSample {
                    image: Tensor::rand_uniform(&[1, h, w], 0.0, 1.0, &mut rng),
                    mask: BinaryMask::from_vec(
                        h,
                        w,
                        (0..h * w).map(|_| u8::from(rng.coin())).collect(),
                    )
                    .unwrap(),
                    sample_id: i as u32,
                })
                .collect();
            let dir = std::env::temp_dir().join("tokenguide-test-gds1-prop");
            std::fs::create_dir_all(&dir).unwrap();
            let path = dir.join(format!("case-{seed}.gds"));
            write_dataset(&samples, &path).unwrap();
            let back = read_dataset(&path).unwrap();
            std::fs::remove_file(&path).ok();
            proptest::prop_assert_eq!(samples, back);
        }
    }

    #[test]
    fn flips_are_involutions() {
        let cfg = SynthConfig { size: 16, ..Default::default() };
        let s = generate_sample(5, &cfg);
        let twice = flip_image(&flip_image(&s.image, true, false), true, false);
        assert_eq!(s.image.data(), twice.data());
        let m_twice = flip_mask(&flip_mask(&s.mask, true, true), true, true);
        assert_eq!(s.mask, m_twice);
    }
}
