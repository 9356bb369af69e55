//! Seed-deterministic synthetic datasets plus a binary CIFAR loader.
//!
//! Every generator is a pure function of `(spec, index)`: repeated calls
//! return bit-identical samples, so train/val splits are just disjoint
//! index ranges and no dataset ever needs to be stored.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::path::Path;

use crate::numerics::Tensor;
use crate::rng;
use crate::{Error, Result};

/// Which synthetic family to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    SmoothField,
    LocalPattern,
    ShapesSeg,
    PointSet,
    Bimodal,
}

/// Full description of a dataset; generation depends only on this and an index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub noise: f64,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind, height: usize, width: usize, seed: u64) -> Self {
        DatasetSpec {
            kind,
            height,
            width,
            num_classes: 4,
            noise: 0.05,
            seed,
            train_size: 256,
            val_size: 64,
        }
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// Training examples occupy the low index range.
    pub fn train_indices(&self) -> Range<usize> {
        0..self.train_size
    }

    /// Validation examples follow, disjoint by construction.
    pub fn val_indices(&self) -> Range<usize> {
        self.train_size..self.train_size + self.val_size
    }
}

fn example_rng(spec: &DatasetSpec, tag: u64, idx: usize) -> rand_chacha::ChaCha8Rng {
    rng::stream(spec.seed, &[tag, idx as u64])
}

fn normalize(data: &mut [f64]) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / var.sqrt().max(1e-12);
    for v in data.iter_mut() {
        *v = (*v - mean) * inv;
    }
}

// ---------------------------------------------------------------------------
// Smooth field
// ---------------------------------------------------------------------------

/// One band-limited component of a smooth field: integer cycle counts across
/// the grid plus a phase, so the whole family lives in a known Fourier basis.
#[derive(Debug, Clone, Copy)]
pub struct Sinusoid {
    pub kx: usize,
    pub ky: usize,
    pub phase: f64,
    pub amp: f64,
}

/// Largest cycle count (inclusive) used along each axis.
pub const SMOOTH_MAX_CYCLES: usize = 2;

const SMOOTH_TAG: u64 = 0x534D_4F4F;

/// The sinusoid mixture behind `gen_smooth_field(spec, idx)`, exposed so
/// oracles can fit the exact generating basis.
pub fn smooth_field_components(spec: &DatasetSpec, idx: usize) -> Vec<Sinusoid> {
    let mut r = example_rng(spec, SMOOTH_TAG, idx);
    let count = r.gen_range(2..=4);
    (0..count)
        .map(|_| Sinusoid {
            kx: r.gen_range(0..=SMOOTH_MAX_CYCLES),
            ky: r.gen_range(0..=SMOOTH_MAX_CYCLES),
            phase: r.gen_range(0.0..std::f64::consts::TAU),
            amp: r.gen_range(0.5..1.5),
        })
        .collect()
}

fn render_field(spec: &DatasetSpec, idx: usize, components: &[Sinusoid]) -> Tensor<f64> {
    // Noise comes from a separate stream so the sinusoids are reproducible
    // independently of sigma.
    let mut noise_rng = example_rng(spec, SMOOTH_TAG ^ 0xFF, idx);
    let (h, w) = (spec.height, spec.width);
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64 / h as f64, c as f64 / w as f64);
            let mut v = 0.0;
            for s in components {
                v += s.amp
                    * (std::f64::consts::TAU * (s.kx as f64 * x + s.ky as f64 * y) + s.phase)
                        .sin();
            }
            let n: f64 = rand_distr::StandardNormal.sample_from(&mut noise_rng);
            data.push(v + spec.noise * n);
        }
    }
    normalize(&mut data);
    Tensor::new(vec![h * w, 1], data)
}

/// Sum of 2-4 random low-frequency 2-D sinusoids plus Gaussian noise,
/// normalized to zero mean and unit variance. Shape `[H*W, 1]`.
pub fn gen_smooth_field(spec: &DatasetSpec, idx: usize) -> Tensor<f64> {
    render_field(spec, idx, &smooth_field_components(spec, idx))
}

/// Noise-only variant (zero sinusoids); used to sanity-check the generator.
pub fn gen_noise_field(spec: &DatasetSpec, idx: usize) -> Tensor<f64> {
    render_field(spec, idx, &[])
}

// ---------------------------------------------------------------------------
// Local pattern
// ---------------------------------------------------------------------------

const PATTERN_TAG: u64 = 0x4C4F_4341;

/// Grid containing one localized oriented grating; the label is the grating's
/// orientation bucket (0/45/90/135 degrees), recoverable from local gradients
/// alone. Returns `([H*W, 1], label)`.
pub fn gen_local_pattern(spec: &DatasetSpec, idx: usize) -> (Tensor<f64>, usize) {
    let mut r = example_rng(spec, PATTERN_TAG, idx);
    let (h, w) = (spec.height, spec.width);
    let label = r.gen_range(0..4usize);
    let theta = label as f64 * std::f64::consts::FRAC_PI_4;
    let (dx, dy) = (theta.cos(), theta.sin());
    // patch covers roughly three quarters of the grid, placed at random
    let ph = (3 * h / 4).max(4);
    let pw = (3 * w / 4).max(4);
    let r0 = r.gen_range(0..=h - ph);
    let c0 = r.gen_range(0..=w - pw);
    let freq = std::f64::consts::TAU / 8.0; // 8-pixel stripe period
    let phase = r.gen_range(0.0..std::f64::consts::TAU);
    let mut data = Vec::with_capacity(h * w);
    for rr in 0..h {
        for cc in 0..w {
            let inside = rr >= r0 && rr < r0 + ph && cc >= c0 && cc < c0 + pw;
            let mut v = 0.0;
            if inside {
                v = (freq * (dx * cc as f64 + dy * rr as f64) + phase).sin();
            }
            let n: f64 = rand_distr::StandardNormal.sample_from(&mut r);
            data.push(v + spec.noise * n);
        }
    }
    (Tensor::new(vec![h * w, 1], data), label)
}

/// Handcrafted 3x3-gradient-histogram classifier used as a sanity oracle for
/// the local-pattern dataset: Sobel gradients, magnitude-weighted orientation
/// histogram over four pi/4 buckets, argmax.
pub fn gradient_histogram_classify(grid: &Tensor<f64>, h: usize, w: usize) -> usize {
    let d = grid.data();
    let at = |r: usize, c: usize| d[r * w + c];
    let mut hist = [0.0f64; 4];
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
            let mag = (gx * gx + gy * gy).sqrt();
            if mag < 1e-9 {
                continue;
            }
            // gradient of a grating points along the grating's angle
            let mut angle = gy.atan2(gx);
            if angle < 0.0 {
                angle += std::f64::consts::PI;
            }
            if angle >= std::f64::consts::PI {
                angle -= std::f64::consts::PI;
            }
            let bucket =
                ((angle / std::f64::consts::FRAC_PI_4).round() as usize) % 4;
            hist[bucket] += mag;
        }
    }
    hist.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap()
}

// ---------------------------------------------------------------------------
// Shapes segmentation
// ---------------------------------------------------------------------------

const SHAPES_TAG: u64 = 0x5348_4150;

pub const LABEL_BG: usize = 0;
pub const LABEL_RECT: usize = 1;
pub const LABEL_DISK: usize = 2;

/// A shape placed on the segmentation canvas; coordinates are pixel centers.
#[derive(Debug, Clone, Copy)]
pub enum Shape {
    /// Half-open pixel rectangle: rows `r0..r1`, cols `c0..c1`.
    Rect { r0: usize, r1: usize, c0: usize, c1: usize },
    Disk { cr: f64, cc: f64, radius: f64 },
}

impl Shape {
    pub fn label(&self) -> usize {
        match self {
            Shape::Rect { .. } => LABEL_RECT,
            Shape::Disk { .. } => LABEL_DISK,
        }
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        match *self {
            Shape::Rect { r0, r1, c0, c1 } => r >= r0 && r < r1 && c >= c0 && c < c1,
            Shape::Disk { cr, cc, radius } => {
                let (dr, dc) = (r as f64 - cr, c as f64 - cc);
                dr * dr + dc * dc <= radius * radius
            }
        }
    }

    /// Exact area in pixels for rectangles, continuous area for disks.
    pub fn analytic_area(&self) -> f64 {
        match *self {
            Shape::Rect { r0, r1, c0, c1 } => ((r1 - r0) * (c1 - c0)) as f64,
            Shape::Disk { radius, .. } => std::f64::consts::PI * radius * radius,
        }
    }

    /// Perimeter length, the width of the ambiguous rasterization ring.
    pub fn perimeter(&self) -> f64 {
        match *self {
            Shape::Rect { r0, r1, c0, c1 } => 2.0 * ((r1 - r0) + (c1 - c0)) as f64,
            Shape::Disk { radius, .. } => std::f64::consts::TAU * radius,
        }
    }
}

/// The shape list behind `gen_shapes_seg(spec, idx)`, in draw order
/// (later shapes occlude earlier ones). Exposed for geometry oracles.
pub fn shapes_for(spec: &DatasetSpec, idx: usize) -> Vec<Shape> {
    let mut r = example_rng(spec, SHAPES_TAG, idx);
    let (h, w) = (spec.height, spec.width);
    let count = r.gen_range(1..=2usize);
    (0..count)
        .map(|_| {
            if r.gen_bool(0.5) {
                let rh = r.gen_range(h / 4..=h / 2);
                let rw = r.gen_range(w / 4..=w / 2);
                let r0 = r.gen_range(0..=h - rh);
                let c0 = r.gen_range(0..=w - rw);
                Shape::Rect { r0, r1: r0 + rh, c0, c1: c0 + rw }
            } else {
                let lo = (h.min(w) as f64 / 6.0).max(2.0);
                let radius = r.gen_range(lo..(h.min(w) as f64 / 3.5).max(lo + 0.5));
                let cr = r.gen_range(radius..h as f64 - radius);
                let cc = r.gen_range(radius..w as f64 - radius);
                Shape::Disk { cr, cc, radius }
            }
        })
        .collect()
}

/// 1-3 random rectangles/disks on a background; per-pixel labels
/// {bg, rect, disk}. Returns `([H*W, 1], labels)`.
pub fn gen_shapes_seg(spec: &DatasetSpec, idx: usize) -> (Tensor<f64>, Vec<usize>) {
    let shapes = shapes_for(spec, idx);
    let mut noise_rng = example_rng(spec, SHAPES_TAG ^ 0xFF, idx);
    let (h, w) = (spec.height, spec.width);
    let mut data = Vec::with_capacity(h * w);
    let mut labels = Vec::with_capacity(h * w);
    // distinct intensities per class so the input carries the label signal
    let intensity = [0.0, 1.0, -1.0];
    for r in 0..h {
        for c in 0..w {
            let mut label = LABEL_BG;
            for s in &shapes {
                if s.contains(r, c) {
                    label = s.label();
                }
            }
            let n: f64 = rand_distr::StandardNormal.sample_from(&mut noise_rng);
            data.push(intensity[label] + spec.noise * n);
            labels.push(label);
        }
    }
    (Tensor::new(vec![h * w, 1], data), labels)
}

// ---------------------------------------------------------------------------
// Point set
// ---------------------------------------------------------------------------

const POINTS_TAG: u64 = 0x504F_494E;

/// Number of points per cloud.
pub const POINT_SET_SIZE: usize = 2048;

/// Samples 2048 points from one of up to four parametric 3-D surfaces
/// (sphere, torus, cylinder, cone), centers the cloud, and applies a random
/// per-example permutation. Returns `([2048, 3], label)`.
pub fn gen_point_set(spec: &DatasetSpec, idx: usize) -> (Tensor<f64>, usize) {
    let mut r = example_rng(spec, POINTS_TAG, idx);
    let classes = spec.num_classes.clamp(2, 4);
    let label = r.gen_range(0..classes);
    let n = POINT_SET_SIZE;
    let mut pts = Vec::with_capacity(n * 3);
    for _ in 0..n {
        let u = r.gen_range(0.0..std::f64::consts::TAU);
        let v = r.gen_range(0.0..std::f64::consts::TAU);
        let t = r.gen_range(-1.0..1.0f64);
        let (x, y, z) = match label {
            0 => {
                // sphere
                let phi = (t).acos();
                (phi.sin() * u.cos(), phi.sin() * u.sin(), phi.cos())
            }
            1 => {
                // torus R=1, r=0.35
                let w = 1.0 + 0.35 * v.cos();
                (w * u.cos(), w * u.sin(), 0.35 * v.sin())
            }
            2 => (u.cos(), u.sin(), t), // cylinder
            _ => {
                // cone
                let s = (t + 1.0) / 2.0;
                (s * u.cos(), s * u.sin(), 1.0 - s)
            }
        };
        let jitter = spec.noise;
        let (jx, jy, jz): (f64, f64, f64) = (
            rand_distr::StandardNormal.sample_from(&mut r),
            rand_distr::StandardNormal.sample_from(&mut r),
            rand_distr::StandardNormal.sample_from(&mut r),
        );
        pts.push(x + jitter * jx);
        pts.push(y + jitter * jy);
        pts.push(z + jitter * jz);
    }
    // center
    for axis in 0..3 {
        let mean = (0..n).map(|i| pts[i * 3 + axis]).sum::<f64>() / n as f64;
        for i in 0..n {
            pts[i * 3 + axis] -= mean;
        }
    }
    // random permutation of token order
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let mut out = Vec::with_capacity(n * 3);
    for &i in &order {
        out.extend_from_slice(&pts[i * 3..i * 3 + 3]);
    }
    (Tensor::new(vec![n, 3], out), label)
}

// ---------------------------------------------------------------------------
// Bimodal
// ---------------------------------------------------------------------------

const BIMODAL_TAG: u64 = 0x4249_4D4F;

/// Grid tokens per bimodal example (32x32).
pub const BIMODAL_GRID_TOKENS: usize = 1024;
/// Waveform tokens per bimodal example.
pub const BIMODAL_WAVE_TOKENS: usize = 256;

/// Per-class fundamental frequencies (cycles over the waveform window).
pub const BIMODAL_WAVE_FREQS: [f64; 4] = [4.0, 9.0, 17.0, 29.0];

/// A shared latent class drives both a 32x32 texture grid and a 256-sample
/// sinusoid-mixture waveform; either modality alone determines the class.
/// Returns `([1024, 1] grid, [256, 1] waveform, label)`.
pub fn gen_bimodal(spec: &DatasetSpec, idx: usize) -> (Tensor<f64>, Tensor<f64>, usize) {
    let mut r = example_rng(spec, BIMODAL_TAG, idx);
    let classes = spec.num_classes.clamp(2, 4);
    let label = r.gen_range(0..classes);
    // grid: checkerboard-like texture whose period encodes the class
    let period = (label + 2) as f64;
    let phase = r.gen_range(0.0..std::f64::consts::TAU);
    let side = 32;
    let mut grid = Vec::with_capacity(side * side);
    for rr in 0..side {
        for cc in 0..side {
            let v = (std::f64::consts::TAU * rr as f64 / period + phase).sin()
                * (std::f64::consts::TAU * cc as f64 / period + phase).cos();
            let n: f64 = rand_distr::StandardNormal.sample_from(&mut r);
            grid.push(v + spec.noise * n);
        }
    }
    // waveform: class fundamental plus a weak fixed harmonic
    let f0 = BIMODAL_WAVE_FREQS[label];
    let wphase = r.gen_range(0.0..std::f64::consts::TAU);
    let m = BIMODAL_WAVE_TOKENS;
    let mut wave = Vec::with_capacity(m);
    for i in 0..m {
        let t = i as f64 / m as f64;
        let v = (std::f64::consts::TAU * f0 * t + wphase).sin()
            + 0.3 * (std::f64::consts::TAU * 2.0 * f0 * t).sin();
        let n: f64 = rand_distr::StandardNormal.sample_from(&mut r);
        wave.push(v + spec.noise * n);
    }
    (
        Tensor::new(vec![BIMODAL_GRID_TOKENS, 1], grid),
        Tensor::new(vec![BIMODAL_WAVE_TOKENS, 1], wave),
        label,
    )
}

/// Waveform-only oracle: projects the waveform on each class fundamental
/// (quadrature pair) and returns the class with the most energy.
pub fn waveform_classify(wave: &Tensor<f64>, num_classes: usize) -> usize {
    let d = wave.data();
    let m = d.len() as f64;
    let mut best = (0usize, f64::NEG_INFINITY);
    for (k, &f) in BIMODAL_WAVE_FREQS.iter().take(num_classes.clamp(2, 4)).enumerate() {
        let (mut cs, mut sn) = (0.0, 0.0);
        for (i, &v) in d.iter().enumerate() {
            let ang = std::f64::consts::TAU * f * i as f64 / m;
            cs += v * ang.cos();
            sn += v * ang.sin();
        }
        let energy = cs * cs + sn * sn;
        if energy > best.1 {
            best = (k, energy);
        }
    }
    best.0
}

// ---------------------------------------------------------------------------
// CIFAR binary loader
// ---------------------------------------------------------------------------

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3 * 1024 pixel bytes
const CIFAR_PIXELS: usize = 1024;

/// Reads the standard binary record layout (1 label byte followed by 3072
/// channel-major pixel bytes per record). Returns per-record `[1024, 3]`
/// grids scaled to `[0, 1]` with channels interleaved per pixel, plus labels.
pub fn load_cifar_binary(path: &Path) -> Result<(Vec<Tensor<f64>>, Vec<usize>)> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        let up = (bytes.len() / CIFAR_RECORD + 1) * CIFAR_RECORD;
        return Err(Error::Format(format!(
            "{}: expected a multiple of {CIFAR_RECORD} bytes (e.g. {up}), got {}",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut grids = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for rec in 0..n {
        let base = rec * CIFAR_RECORD;
        let label = bytes[base] as usize;
        if label > 9 {
            return Err(Error::Format(format!(
                "{}: record {rec} has label {label}, expected 0-9",
                path.display()
            )));
        }
        let px = &bytes[base + 1..base + CIFAR_RECORD];
        let mut data = Vec::with_capacity(CIFAR_PIXELS * 3);
        for p in 0..CIFAR_PIXELS {
            for ch in 0..3 {
                data.push(px[ch * CIFAR_PIXELS + p] as f64 / 255.0);
            }
        }
        grids.push(Tensor::new(vec![CIFAR_PIXELS, 3], data));
        labels.push(label);
    }
    Ok((grids, labels))
}

// Helper so `StandardNormal.sample_from(rng)` reads naturally above.
trait SampleFrom {
    fn sample_from<R: Rng>(&self, rng: &mut R) -> f64;
}

impl SampleFrom for rand_distr::StandardNormal {
    fn sample_from<R: Rng>(&self, rng: &mut R) -> f64 {
        rand_distr::Distribution::sample(self, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: DatasetKind) -> DatasetSpec {
        DatasetSpec::new(kind, 32, 32, 2024)
    }

    #[test]
    fn generators_are_pure_in_spec_and_index() {
        let s = spec(DatasetKind::SmoothField);
        assert_eq!(gen_smooth_field(&s, 7).data(), gen_smooth_field(&s, 7).data());
        let s = spec(DatasetKind::LocalPattern);
        let (a, la) = gen_local_pattern(&s, 3);
        let (b, lb) = gen_local_pattern(&s, 3);
        assert_eq!(a.data(), b.data());
        assert_eq!(la, lb);
        let s = spec(DatasetKind::ShapesSeg);
        let (a, la) = gen_shapes_seg(&s, 11);
        let (b, lb) = gen_shapes_seg(&s, 11);
        assert_eq!(a.data(), b.data());
        assert_eq!(la, lb);
        let s = spec(DatasetKind::PointSet);
        assert_eq!(gen_point_set(&s, 1).0.data(), gen_point_set(&s, 1).0.data());
        let s = spec(DatasetKind::Bimodal);
        let (g1, w1, l1) = gen_bimodal(&s, 5);
        let (g2, w2, l2) = gen_bimodal(&s, 5);
        assert_eq!(g1.data(), g2.data());
        assert_eq!(w1.data(), w2.data());
        assert_eq!(l1, l2);
    }

    #[test]
    fn splits_are_disjoint() {
        let s = spec(DatasetKind::SmoothField);
        let train = s.train_indices();
        let val = s.val_indices();
        assert_eq!(train.end, val.start);
        assert!(!train.contains(&val.start));
    }

    #[test]
    fn smooth_field_is_normalized() {
        let s = spec(DatasetKind::SmoothField);
        for idx in 0..4 {
            let g = gen_smooth_field(&s, idx);
            let d = g.data();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn noise_only_field_has_no_structure() {
        // zero sinusoids: the sample is pure normalized noise, so projecting
        // on any low-frequency mode yields a tiny coefficient
        let mut s = spec(DatasetKind::SmoothField);
        s.noise = 1.0;
        let g = gen_noise_field(&s, 0);
        let d = g.data();
        let (h, w) = (32, 32);
        let mut coef = 0.0;
        for r in 0..h {
            for c in 0..w {
                coef += d[r * w + c]
                    * (std::f64::consts::TAU * (c as f64 / w as f64)).sin();
            }
        }
        coef /= (h * w) as f64;
        assert!(coef.abs() < 0.1, "pure noise correlated with a mode: {coef}");
    }

    #[test]
    fn smooth_field_masked_pixels_predictable_from_basis() {
        // sigma = 0: least squares on the known band-limited basis recovers
        // masked pixels almost exactly
        let mut s = spec(DatasetKind::SmoothField);
        s.noise = 0.0;
        let (h, w) = (s.height, s.width);
        let g = gen_smooth_field(&s, 2);
        let d = g.data();
        // basis: sin and cos of every (kx, ky) pair up to the cycle cap
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for kx in 0..=SMOOTH_MAX_CYCLES {
            for ky in 0..=SMOOTH_MAX_CYCLES {
                for trig in 0..2 {
                    let mut col = Vec::with_capacity(h * w);
                    for r in 0..h {
                        for c in 0..w {
                            let ang = std::f64::consts::TAU
                                * (kx as f64 * c as f64 / w as f64
                                    + ky as f64 * r as f64 / h as f64);
                            col.push(if trig == 0 { ang.sin() } else { ang.cos() });
                        }
                    }
                    basis.push(col);
                }
            }
        }
        // visible = even pixels, masked = odd pixels
        let vis: Vec<usize> = (0..h * w).filter(|i| i % 2 == 0).collect();
        let msk: Vec<usize> = (0..h * w).filter(|i| i % 2 == 1).collect();
        let k = basis.len();
        let a = nalgebra::DMatrix::from_fn(vis.len(), k, |i, j| basis[j][vis[i]]);
        let y = nalgebra::DVector::from_fn(vis.len(), |i, _| d[vis[i]]);
        let coeffs = nalgebra::SVD::new(a, true, true)
            .solve(&y, 1e-10)
            .expect("least squares solvable");
        let mut mse = 0.0;
        for &p in &msk {
            let pred: f64 = (0..k).map(|j| coeffs[j] * basis[j][p]).sum();
            mse += (pred - d[p]) * (pred - d[p]);
        }
        mse /= msk.len() as f64;
        assert!(mse < 1e-6, "least-squares oracle MSE {mse}");
    }

    #[test]
    fn local_pattern_gradient_oracle_beats_ninety_percent() {
        let mut s = spec(DatasetKind::LocalPattern);
        s.noise = 0.05;
        let mut correct = 0;
        let total = 100;
        for idx in 0..total {
            let (g, label) = gen_local_pattern(&s, idx);
            if gradient_histogram_classify(&g, s.height, s.width) == label {
                correct += 1;
            }
        }
        assert!(correct * 100 >= total * 90, "oracle accuracy {correct}/{total}");
    }

    #[test]
    fn local_pattern_labels_cover_four_orientations() {
        let s = spec(DatasetKind::LocalPattern);
        let mut seen = [false; 4];
        for idx in 0..64 {
            seen[gen_local_pattern(&s, idx).1] = true;
        }
        assert_eq!(seen, [true; 4]);
    }

    #[test]
    fn shapes_label_mass_matches_analytic_area() {
        let s = spec(DatasetKind::ShapesSeg);
        let mut checked = 0;
        for idx in 0..40 {
            let shapes = shapes_for(&s, idx);
            if shapes.len() != 1 {
                continue; // occlusion makes area additive only for single shapes
            }
            let (_, labels) = gen_shapes_seg(&s, idx);
            let shape = shapes[0];
            let mass = labels.iter().filter(|&&l| l == shape.label()).count() as f64;
            let tol = shape.perimeter() + 4.0;
            assert!(
                (mass - shape.analytic_area()).abs() <= tol,
                "idx {idx}: mass {mass} vs area {} (tol {tol})",
                shape.analytic_area()
            );
            checked += 1;
        }
        assert!(checked >= 5, "too few single-shape scenes to test");
    }

    #[test]
    fn shapes_labels_match_topmost_shape() {
        let s = spec(DatasetKind::ShapesSeg);
        let (_, labels) = gen_shapes_seg(&s, 9);
        let shapes = shapes_for(&s, 9);
        let (h, w) = (s.height, s.width);
        for r in 0..h {
            for c in 0..w {
                let mut expect = LABEL_BG;
                for sh in &shapes {
                    if sh.contains(r, c) {
                        expect = sh.label();
                    }
                }
                assert_eq!(labels[r * w + c], expect);
            }
        }
    }

    #[test]
    fn point_set_is_centered_and_permutation_preserves_label() {
        let s = spec(DatasetKind::PointSet);
        let (pts, label) = gen_point_set(&s, 4);
        assert_eq!(pts.shape(), &[POINT_SET_SIZE, 3]);
        let d = pts.data();
        for axis in 0..3 {
            let mean: f64 =
                (0..POINT_SET_SIZE).map(|i| d[i * 3 + axis]).sum::<f64>() / POINT_SET_SIZE as f64;
            assert!(mean.abs() < 1e-10, "axis {axis} centroid {mean}");
        }
        // a different index with the same label keeps the label independent of order
        assert!(label < 4);
    }

    #[test]
    fn bimodal_waveform_oracle_recovers_class() {
        let mut s = spec(DatasetKind::Bimodal);
        s.noise = 0.1;
        for idx in 0..40 {
            let (g, wav, label) = gen_bimodal(&s, idx);
            assert_eq!(g.shape(), &[BIMODAL_GRID_TOKENS, 1]);
            assert_eq!(wav.shape(), &[BIMODAL_WAVE_TOKENS, 1]);
            assert_eq!(
                waveform_classify(&wav, s.num_classes),
                label,
                "waveform oracle failed at idx {idx}"
            );
        }
        assert_eq!(BIMODAL_GRID_TOKENS + BIMODAL_WAVE_TOKENS, 1280);
    }

    #[test]
    fn cifar_loader_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        // two records with known labels and a recognizable pixel
        let mut bytes = vec![0u8; 2 * 3073];
        bytes[0] = 3; // label of record 0
        bytes[1] = 255; // R channel of pixel 0
        bytes[1 + 1024] = 128; // G channel of pixel 0
        bytes[3073] = 9;
        std::fs::write(&path, &bytes).unwrap();
        let (grids, labels) = load_cifar_binary(&path).unwrap();
        assert_eq!(grids.len(), 2);
        assert_eq!(labels, vec![3, 9]);
        assert_eq!(grids[0].shape(), &[1024, 3]);
        assert!((grids[0].data()[0] - 1.0).abs() < 1e-12);
        assert!((grids[0].data()[1] - 128.0 / 255.0).abs() < 1e-12);

        // truncated file
        std::fs::write(&path, &bytes[..100]).unwrap();
        let err = load_cifar_binary(&path).unwrap_err();
        assert!(err.to_string().contains("100"), "{err}");

        // invalid label
        bytes[0] = 12;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_cifar_binary(&path).unwrap_err();
        assert!(err.to_string().contains("12"), "{err}");
    }
}
