//! Synthetic shape/texture domains.
//!
//! The shape `S` is the causal factor and determines the label. The texture
//! `Z` is non-causal: it fills the background and is tied to the shape only
//! through a pairing map applied with probability `ρ` (the confounder). A
//! domain shift keeps the textures but changes the pairing.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ImageShape, Images, Latent};
use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const SHAPES: [&str; 5] = ["circle", "square", "triangle", "plus", "star"];
pub const TEXTURES: [&str; 5] = ["red", "green", "blue", "stripes", "checker"];

const FILL: [f64; 3] = [0.95, 0.95, 0.9];

/// Per-shape size factors giving every shape the area of a radius-1 shape
/// with area 2.2 (circle π, square 2.56, triangle 1.8, plus 2.2044, star
/// 1.3225), so pixel statistics carry no class information.
const AREA_SCALE: [f64; 5] = [0.836_8, 0.927_0, 1.105_5, 0.999_0, 1.289_8];

pub fn image_shape() -> ImageShape {
    ImageShape { channels: CHANNELS, height: IMAGE_SIZE, width: IMAGE_SIZE }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CausalGraphParams {
    pub num_classes: usize,
    pub num_textures: usize,
    /// Probability that a sample's texture is the one paired with its shape.
    pub confounder_strength: f64,
    pub noise_sigma: f64,
    /// `pairing[s]` is the texture canonically paired with shape `s`.
    pub pairing: Vec<usize>,
    pub seed: u64,
}

impl Default for CausalGraphParams {
    fn default() -> Self {
        CausalGraphParams {
            num_classes: 5,
            num_textures: 5,
            confounder_strength: 0.9,
            noise_sigma: 0.1,
            pairing: (0..5).collect(),
            seed: 0,
        }
    }
}

impl CausalGraphParams {
    /// Pairing `s ↦ (s + shift) mod num_textures`.
    pub fn with_cyclic_pairing(mut self, shift: usize) -> Self {
        self.pairing = (0..self.num_classes).map(|s| (s + shift) % self.num_textures).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > SHAPES.len() {
            return Err(Error::Config(format!("num_classes must be in 1..={}", SHAPES.len())));
        }
        if self.num_textures < 2 || self.num_textures > TEXTURES.len() {
            return Err(Error::Config(format!("num_textures must be in 2..={}", TEXTURES.len())));
        }
        if !(0.0..=1.0).contains(&self.confounder_strength) {
            return Err(Error::Config(format!("confounder_strength {} outside [0, 1]", self.confounder_strength)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma {} must be nonnegative", self.noise_sigma)));
        }
        if self.pairing.len() != self.num_classes || self.pairing.iter().any(|&t| t >= self.num_textures) {
            return Err(Error::Config(format!("pairing {:?} is not a map from classes to textures", self.pairing)));
        }
        Ok(())
    }
}

fn inside_polygon(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn star_polygon(cx: f64, cy: f64, r: f64) -> Vec<(f64, f64)> {
    (0..10)
        .map(|i| {
            let radius = if i % 2 == 0 { r } else { 0.45 * r };
            let a = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
            (cx + radius * a.cos(), cy + radius * a.sin())
        })
        .collect()
}

/// Whether the pixel centre `(px, py)` lies inside shape `s` of size `r`
/// centred at `(cx, cy)`.
pub fn shape_contains(s: usize, cx: f64, cy: f64, r: f64, px: f64, py: f64) -> bool {
    let (dx, dy) = (px - cx, py - cy);
    match s {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        2 => inside_polygon(px, py, &[(cx, cy - r), (cx + r, cy + 0.8 * r), (cx - r, cy + 0.8 * r)]),
        3 => {
            let arm = 0.33 * r;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
        _ => inside_polygon(px, py, &star_polygon(cx, cy, r)),
    }
}

/// Background colour of texture `z` at pixel `(x, y)`.
pub fn texture_color(z: usize, x: usize, y: usize) -> [f64; 3] {
    match z {
        0 => [0.75, 0.25, 0.2],
        1 => [0.2, 0.6, 0.3],
        2 => [0.25, 0.3, 0.75],
        3 => {
            if ((x + y) / 3).is_multiple_of(2) {
                [0.55, 0.45, 0.1]
            } else {
                [0.3, 0.1, 0.45]
            }
        }
        _ => {
            if (x / 4 + y / 4).is_multiple_of(2) {
                [0.1, 0.5, 0.55]
            } else {
                [0.5, 0.15, 0.4]
            }
        }
    }
}

/// Draws shape `s` over texture `z` with jittered position and size, plus
/// Gaussian pixel noise. Output is `[3 × 32 × 32]` in [0, 1].
pub fn render(s: usize, z: usize, sigma: f64, seed: u64) -> Result<Vec<f64>> {
    if s >= SHAPES.len() || z >= TEXTURES.len() {
        return Err(Error::Index(format!("render: shape {s}, texture {z}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = IMAGE_SIZE as f64 / 2.0;
    let cx = half + rng.gen_range(-3.0..3.0);
    let cy = half + rng.gen_range(-3.0..3.0);
    let r = rng.gen_range(9.0..12.0) * AREA_SCALE[s];
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut img = vec![0.0; CHANNELS * plane];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let color = if shape_contains(s, cx, cy, r, x as f64 + 0.5, y as f64 + 0.5) {
                FILL
            } else {
                texture_color(z, x, y)
            };
            for c in 0..CHANNELS {
                img[c * plane + y * IMAGE_SIZE + x] = color[c];
            }
        }
    }
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut img {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(img)
}

/// Draws `n` samples: `S` uniform over classes, `Z = pairing[S]` with
/// probability `ρ`, otherwise uniform over the remaining textures.
pub fn sample_domain(params: &CausalGraphParams, n: usize) -> Result<Dataset> {
    params.validate()?;
    if n == 0 {
        return Err(Error::Config("sample_domain needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut images = Images::empty(image_shape());
    let mut labels = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n);
    for _ in 0..n {
        let s = rng.gen_range(0..params.num_classes);
        let paired = params.pairing[s];
        let z = if rng.gen::<f64>() < params.confounder_strength {
            paired
        } else {
            let k = rng.gen_range(0..params.num_textures - 1);
            if k >= paired {
                k + 1
            } else {
                k
            }
        };
        let img = render(s, z, params.noise_sigma, rng.next_u64())?;
        images.push(&img)?;
        labels.push(s);
        latents.push(Latent { shape: s, texture: z });
    }
    Ok(Dataset { images, goal_labels: Some(labels), latents: Some(latents), style_labels: None })
}
