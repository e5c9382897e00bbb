//! Style characterizing inputs and label-preserving style augmentations.
//!
//! A style characterizing input (SCI) rearranges an image's patches so that
//! spatial class evidence is destroyed while colour and texture statistics
//! survive. The five augmentation families below restyle an image without
//! moving its content:
//!
//! 1. low-frequency Fourier amplitude swap with a procedural reference texture
//! 2. frost: blended structured brightness noise plus sparse bright flakes
//! 3. per-channel mean/std transfer towards a reference texture
//! 4. colour quantization (cartoon look)
//! 5. random hue rotation with contrast and brightness shift
//!
//! Style label 0 is the clean image, label `i ≥ 1` is family `i`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ImageShape, Images};
use crate::error::{Error, Result};
use crate::noise::{color_texture, value_noise};

pub const NUM_FAMILIES: usize = 5;
const REFERENCE_BANK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StyleLabel(pub usize);

impl StyleLabel {
    pub const CLEAN: StyleLabel = StyleLabel(0);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    /// Seed of the reference texture bank.
    pub seed: u64,
    /// Number of families in use (labels `1..=families`).
    pub families: usize,
    /// Half-width of the swapped low-frequency band; 0 disables the swap.
    pub fda_radius: usize,
    pub frost_strength: f64,
    pub adain_strength: f64,
    pub quant_levels: usize,
    pub contrast_range: (f64, f64),
    pub brightness_shift: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            seed: 7,
            families: NUM_FAMILIES,
            fda_radius: 1,
            frost_strength: 0.45,
            adain_strength: 0.5,
            quant_levels: 4,
            contrast_range: (0.7, 1.0),
            brightness_shift: 0.1,
        }
    }
}

impl AugmentParams {
    pub fn num_style_labels(&self) -> usize {
        self.families + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.families == 0 || self.families > NUM_FAMILIES {
            return Err(Error::Config(format!("augment.families must be in 1..={NUM_FAMILIES}")));
        }
        if self.quant_levels < 2 {
            return Err(Error::Config("augment.quant_levels must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.adain_strength) || !(0.0..=1.0).contains(&self.frost_strength) {
            return Err(Error::Config("augmentation strengths must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::Contract(format!("permutation has {} entries, grid has {n} patches", perm.len())));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Contract(format!("{perm:?} is not a permutation of 0..{n}")));
        }
    }
    Ok(())
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

/// Uniformly random permutation of `0..n`.
pub fn random_permutation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Rearranges the patch grid: output patch `j` is input patch `perm[j]`.
pub fn make_sci(image: &[f64], shape: ImageShape, patch_size: usize, perm: &[usize]) -> Result<Vec<f64>> {
    if image.len() != shape.len() {
        return Err(Error::shape("make_sci", format!("{} values for {shape:?}", image.len())));
    }
    if patch_size == 0 || !shape.height.is_multiple_of(patch_size) || !shape.width.is_multiple_of(patch_size) {
        return Err(Error::Config(format!("patch size {patch_size} does not tile {shape:?}")));
    }
    let (gh, gw) = (shape.height / patch_size, shape.width / patch_size);
    check_permutation(perm, gh * gw)?;
    let plane = shape.height * shape.width;
    let mut out = vec![0.0; image.len()];
    for (j, &src) in perm.iter().enumerate() {
        let (dy, dx) = (j / gw * patch_size, j % gw * patch_size);
        let (sy, sx) = (src / gw * patch_size, src % gw * patch_size);
        for c in 0..shape.channels {
            for y in 0..patch_size {
                let d = c * plane + (dy + y) * shape.width + dx;
                let s = c * plane + (sy + y) * shape.width + sx;
                out[d..d + patch_size].copy_from_slice(&image[s..s + patch_size]);
            }
        }
    }
    Ok(out)
}

/// Per-channel `(mean, std)`.
pub fn channel_stats(image: &[f64], shape: ImageShape) -> Vec<(f64, f64)> {
    let plane = shape.height * shape.width;
    image
        .chunks(plane)
        .map(|ch| {
            let mean = ch.iter().sum::<f64>() / plane as f64;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            (mean, var.sqrt())
        })
        .collect()
}

/// `(1 − α)·x + α·(σ_t·(x − μ)/σ + μ_t)` per channel, clamped to [0, 1].
pub fn transfer_channel_stats(image: &[f64], shape: ImageShape, target: &[(f64, f64)], strength: f64) -> Vec<f64> {
    let plane = shape.height * shape.width;
    let own = channel_stats(image, shape);
    let mut out = Vec::with_capacity(image.len());
    for (c, ch) in image.chunks(plane).enumerate() {
        let (mu, sd) = own[c];
        let (tmu, tsd) = target[c];
        for &v in ch {
            let z = if sd > 1e-12 { (v - mu) / sd } else { 0.0 };
            let styled = tsd * z + tmu;
            out.push(((1.0 - strength) * v + strength * styled).clamp(0.0, 1.0));
        }
    }
    out
}

/// Rounds every value to the nearest of `levels` evenly spaced levels.
pub fn quantize(image: &[f64], levels: usize) -> Vec<f64> {
    let k = (levels - 1) as f64;
    image.iter().map(|&v| (v.clamp(0.0, 1.0) * k).round() / k).collect()
}

fn fft2(buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let row = if inverse { planner.plan_fft_inverse(w) } else { planner.plan_fft_forward(w) };
    for r in buf.chunks_mut(w) {
        row.process(r);
    }
    let col_fft = if inverse { planner.plan_fft_inverse(h) } else { planner.plan_fft_forward(h) };
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
}

/// Replaces the Fourier amplitude of the lowest frequencies (|u|, |v| <
/// radius, with wrap-around) by that of `reference`, keeping the phase.
pub fn swap_low_frequency_amplitude(image: &[f64], reference: &[f64], shape: ImageShape, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return image.to_vec();
    }
    let (h, w) = (shape.height, shape.width);
    let plane = h * w;
    let in_band = |y: usize, x: usize| y.min(h - y) < radius && x.min(w - x) < radius;
    let mut out = Vec::with_capacity(image.len());
    for c in 0..shape.channels {
        let to_c = |s: &[f64]| s.iter().map(|&v| Complex::new(v, 0.0)).collect::<Vec<_>>();
        let mut fi = to_c(&image[c * plane..(c + 1) * plane]);
        let mut fr = to_c(&reference[c * plane..(c + 1) * plane]);
        fft2(&mut fi, h, w, false);
        fft2(&mut fr, h, w, false);
        for y in 0..h {
            for x in 0..w {
                if in_band(y, x) {
                    let i = y * w + x;
                    fi[i] = Complex::from_polar(fr[i].norm(), fi[i].arg());
                }
            }
        }
        fft2(&mut fi, h, w, true);
        out.extend(fi.iter().map(|z| (z.re / plane as f64).clamp(0.0, 1.0)));
    }
    out
}

fn frost<R: Rng + ?Sized>(image: &[f64], shape: ImageShape, strength: f64, rng: &mut R) -> Vec<f64> {
    let plane = shape.height * shape.width;
    let field = value_noise(rng, shape.width.max(shape.height), 8, 2);
    let flakes: Vec<bool> = (0..plane).map(|_| rng.gen::<f64>() < 0.03).collect();
    let mut out = image.to_vec();
    for c in 0..shape.channels {
        for i in 0..plane {
            let a = strength * field[i];
            let v = &mut out[c * plane + i];
            *v = (1.0 - a) * *v + a * 0.95;
            if flakes[i] {
                *v += 0.5;
            }
            *v = v.clamp(0.0, 1.0);
        }
    }
    out
}

fn color_shift<R: Rng + ?Sized>(image: &[f64], shape: ImageShape, params: &AugmentParams, rng: &mut R) -> Vec<f64> {
    let theta = rng.gen_range(std::f64::consts::FRAC_PI_2..1.5 * std::f64::consts::PI);
    let (lo, hi) = params.contrast_range;
    let contrast = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let shift = if params.brightness_shift > 0.0 {
        rng.gen_range(-params.brightness_shift..params.brightness_shift)
    } else {
        0.0
    };
    // rotation about the grey axis (1,1,1)/√3
    let (s, c) = theta.sin_cos();
    let k = 1.0 / 3.0;
    let r = (1.0 / 3.0f64).sqrt();
    let m = [
        [c + k * (1.0 - c), k * (1.0 - c) - r * s, k * (1.0 - c) + r * s],
        [k * (1.0 - c) + r * s, c + k * (1.0 - c), k * (1.0 - c) - r * s],
        [k * (1.0 - c) - r * s, k * (1.0 - c) + r * s, c + k * (1.0 - c)],
    ];
    let plane = shape.height * shape.width;
    let mut out = vec![0.0; image.len()];
    for i in 0..plane {
        let px = [image[i] - 0.5, image[plane + i] - 0.5, image[2 * plane + i] - 0.5];
        for ch in 0..3 {
            let v = m[ch][0] * px[0] + m[ch][1] * px[1] + m[ch][2] * px[2];
            out[ch * plane + i] = (contrast * v + 0.5 + shift).clamp(0.0, 1.0);
        }
    }
    out
}

/// Deterministic bank of procedural reference textures.
pub fn reference_bank(params: &AugmentParams, shape: ImageShape) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    (0..REFERENCE_BANK).map(|_| color_texture(&mut rng, shape.width)).collect()
}

/// Applies augmentation family `label` (1..=5) with per-call randomness from
/// `seed`. Shape and the [0, 1] range are preserved.
pub fn augment(image: &[f64], shape: ImageShape, label: StyleLabel, params: &AugmentParams, seed: u64) -> Result<Vec<f64>> {
    let bank = reference_bank(params, shape);
    augment_with_bank(image, shape, label, params, &bank, seed)
}

fn augment_with_bank(
    image: &[f64],
    shape: ImageShape,
    label: StyleLabel,
    params: &AugmentParams,
    bank: &[Vec<f64>],
    seed: u64,
) -> Result<Vec<f64>> {
    if image.len() != shape.len() {
        return Err(Error::shape("augment", format!("{} values for {shape:?}", image.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = rng.gen_range(0..bank.len());
    let out = match label.0 {
        1 => swap_low_frequency_amplitude(image, &bank[pick], shape, params.fda_radius),
        2 => frost(image, shape, params.frost_strength, &mut rng),
        3 => {
            let stats = channel_stats(&bank[pick], shape);
            transfer_channel_stats(image, shape, &stats, params.adain_strength)
        }
        4 => quantize(image, params.quant_levels),
        5 if shape.channels == 3 => color_shift(image, shape, params, &mut rng),
        other => return Err(Error::Index(format!("unknown augmentation family {other}"))),
    };
    Ok(out)
}

/// Every sample once clean (style label 0) and once per family (labels
/// `1..=families`), sample-major. Goal labels and latents are carried along.
pub fn build_style_dataset(dataset: &Dataset, params: &AugmentParams, seed: u64) -> Result<Dataset> {
    params.validate()?;
    let shape = dataset.images.shape();
    let bank = reference_bank(params, shape);
    let per = params.num_style_labels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Images::empty(shape);
    let mut style = Vec::with_capacity(dataset.len() * per);
    for i in 0..dataset.len() {
        let x = dataset.images.image(i);
        images.push(x)?;
        style.push(0);
        for f in 1..=params.families {
            let aug = augment_with_bank(x, shape, StyleLabel(f), params, &bank, rng.next_u64())?;
            images.push(&aug)?;
            style.push(f);
        }
    }
    let repeat = |v: &Vec<usize>| v.iter().flat_map(|&y| std::iter::repeat_n(y, per)).collect();
    Ok(Dataset {
        images,
        goal_labels: dataset.goal_labels.as_ref().map(repeat),
        latents: dataset.latents.as_ref().map(|v| v.iter().flat_map(|&l| std::iter::repeat_n(l, per)).collect()),
        style_labels: Some(style),
    })
}
