//! Seeded smooth value noise used for procedural textures.

use rand::Rng;

/// `size × size` field in roughly [0, 1]: bilinear interpolation of random
/// lattice values, summed over `octaves` with halving amplitude.
pub(crate) fn value_noise<R: Rng + ?Sized>(rng: &mut R, size: usize, cells: usize, octaves: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let mut amp = 1.0;
    let mut total = 0.0;
    let mut cells = cells.max(1);
    for _ in 0..octaves.max(1) {
        let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen::<f64>()).collect();
        let at = |x: usize, y: usize| lattice[y * (cells + 1) + x];
        for y in 0..size {
            let fy = y as f64 / size as f64 * cells as f64;
            let (y0, ty) = (fy.floor() as usize, fy.fract());
            for x in 0..size {
                let fx = x as f64 / size as f64 * cells as f64;
                let (x0, tx) = (fx.floor() as usize, fx.fract());
                let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
                let bottom = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
                out[y * size + x] += amp * (top * (1.0 - ty) + bottom * ty);
            }
        }
        total += amp;
        amp *= 0.5;
        cells *= 2;
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// A procedural RGB texture `[3 × size × size]`: three independent noise
/// fields mapped between two random colours.
pub(crate) fn color_texture<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Vec<f64> {
    let lo: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let hi: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let field = value_noise(rng, size, 4, 3);
    let mut out = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        out.extend(field.iter().map(|&t| lo[c] + (hi[c] - lo[c]) * t));
    }
    out
}
