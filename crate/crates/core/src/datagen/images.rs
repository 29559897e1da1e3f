//! Rotated, tinted digit images with a label-correlated colour class.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{f32_normal, DigitCorpus, GenConfig, NoiseMode, Simulator};
use crate::error::Result;

const LABEL: usize = 0;
const SRC: usize = 1;
const INTENSITY: usize = 2;
const U_T: usize = 3;
const BLUR: usize = 4;
const NOISE: usize = 5;

const BLUR_RADIUS: isize = 2;

#[derive(Clone, Debug)]
pub struct Images {
    pub size: usize,
    pub k: usize,
    pub rho: f64,
    pub sigma: f64,
    pub noise: NoiseMode,
    pub rotation_scale: f64,
    pub blur_sigma: f64,
    corpus: Option<Arc<DigitCorpus>>,
    glyphs: Vec<Vec<f64>>,
}

// segments: top, upper right, lower right, bottom, lower left, upper left, middle
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

fn seg_dist(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let s = (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + s * dx - px, a.1 + s * dy - py);
    (qx * qx + qy * qy).sqrt()
}

/// Seven-segment rendering of `digit` on a `size`×`size` grid, values in [0, 1].
pub fn glyph(digit: usize, size: usize) -> Vec<f64> {
    let s = size as f64;
    let (x0, x1) = (0.3 * s, 0.7 * s);
    let (y0, ym, y1) = (0.15 * s, 0.5 * s, 0.85 * s);
    let ends = [
        ((x0, y0), (x1, y0)),
        ((x1, y0), (x1, ym)),
        ((x1, ym), (x1, y1)),
        ((x0, y1), (x1, y1)),
        ((x0, ym), (x0, y1)),
        ((x0, y0), (x0, ym)),
        ((x0, ym), (x1, ym)),
    ];
    let half_width = (s / 14.0).max(0.5);
    let mut img = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
            let d = ends
                .iter()
                .zip(SEGMENTS[digit % 10])
                .filter(|(_, on)| *on)
                .map(|(&(a, b), _)| seg_dist(px, py, a, b))
                .fold(f64::INFINITY, f64::min);
            img[r * size + c] = (half_width + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    img
}

/// Class probabilities given a digit label: the label-matched class gets
/// `(1 - 1/K)ρ + 1/K`, the rest share the remainder evenly.
pub fn label_class_probs(label: usize, k: usize, rho: f64) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let p0 = 1.0 / k as f64;
    let hit = (1.0 - p0) * rho + p0;
    let mut p = vec![(1.0 - hit) / (k - 1) as f64; k];
    p[label % k] = hit;
    p
}

/// Fully saturated RGB of hue `class / k`.
pub fn hue_rgb(class: usize, k: usize) -> [f64; 3] {
    let h = 6.0 * class as f64 / k as f64;
    let sector = h.floor() as usize % 6;
    let f = h - h.floor();
    let (q, t) = (1.0 - f, f);
    match sector {
        0 => [1.0, t, 0.0],
        1 => [q, 1.0, 0.0],
        2 => [0.0, 1.0, t],
        3 => [0.0, q, 1.0],
        4 => [t, 0.0, 1.0],
        _ => [1.0, 0.0, q],
    }
}

fn sample_bilinear(img: &[f64], size: usize, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ax, ay) = (x - fx, y - fy);
    let at = |r: f64, c: f64| -> f64 {
        if r < 0.0 || c < 0.0 || r >= size as f64 || c >= size as f64 {
            0.0
        } else {
            img[r as usize * size + c as usize]
        }
    };
    (1.0 - ay) * ((1.0 - ax) * at(fy, fx) + ax * at(fy, fx + 1.0))
        + ay * ((1.0 - ax) * at(fy + 1.0, fx) + ax * at(fy + 1.0, fx + 1.0))
}

/// Counter-clockwise rotation about the image centre, bilinear, zero fill.
pub fn rotate(img: &[f64], size: usize, degrees: f64) -> Vec<f64> {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let c = (size as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        for col in 0..size {
            let (dx, dy) = (col as f64 - c, r as f64 - c);
            // inverse map; image rows grow downwards
            let sx = cos * dx - sin * dy + c;
            let sy = sin * dx + cos * dy + c;
            out[r * size + col] = sample_bilinear(img, size, sx, sy);
        }
    }
    out
}

/// Separable 5×5 Gaussian blur with zero padding.
pub fn blur(img: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let mut k: Vec<f64> = (-BLUR_RADIUS..=BLUR_RADIUS)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let pass = |src: &[f64], horizontal: bool| {
        let mut dst = vec![0.0; size * size];
        for r in 0..size as isize {
            for c in 0..size as isize {
                let mut acc = 0.0;
                for (j, w) in (-BLUR_RADIUS..=BLUR_RADIUS).zip(&k) {
                    let (rr, cc) = if horizontal { (r, c + j) } else { (r + j, c) };
                    if (0..size as isize).contains(&rr) && (0..size as isize).contains(&cc) {
                        acc += w * src[rr as usize * size + cc as usize];
                    }
                }
                dst[r as usize * size + c as usize] = acc;
            }
        }
        dst
    };
    pass(&pass(img, true), false)
}

fn resample(src: &[u8], rows: usize, cols: usize, size: usize) -> Vec<f64> {
    let as_f: Vec<f64> = src.iter().map(|&p| p as f64 / 255.0).collect();
    if rows == size && cols == size {
        return as_f;
    }
    // area average over the covered source block
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        let (r0, r1) = (r * rows / size, ((r + 1) * rows).div_ceil(size));
        for c in 0..size {
            let (c0, c1) = (c * cols / size, ((c + 1) * cols).div_ceil(size));
            let mut acc = 0.0;
            for rr in r0..r1 {
                for cc in c0..c1 {
                    acc += as_f[rr * cols + cc];
                }
            }
            out[r * size + c] = acc / ((r1 - r0) * (c1 - c0)) as f64;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Images {
    pub fn new(cfg: &GenConfig, corpus: Option<Arc<DigitCorpus>>) -> Result<Self> {
        let glyphs = (0..10).map(|d| glyph(d, cfg.image_size)).collect();
        Ok(Self {
            size: cfg.image_size,
            k: cfg.k0,
            rho: cfg.rho,
            sigma: cfg.sigma,
            noise: cfg.noise_mode,
            rotation_scale: cfg.rotation_scale,
            blur_sigma: cfg.blur_sigma,
            corpus,
            glyphs,
        })
    }

    fn pixels(&self) -> usize {
        self.size * self.size
    }

    fn base_image(&self, lat: &[f32]) -> Vec<f64> {
        let scale = lat[INTENSITY] as f64;
        let src = match &self.corpus {
            Some(c) => resample(c.image(lat[SRC] as usize), c.rows, c.cols, self.size),
            None => self.glyphs[lat[SRC] as usize].clone(),
        };
        src.into_iter().map(|v| v * scale).collect()
    }

    /// Treatment without the uniform jitter: `5·sigmoid((mean255 − 33)/11)`.
    pub fn treatment_shift(&self, lat: &[f32]) -> f64 {
        let img = self.base_image(lat);
        let mean255 = 255.0 * img.iter().sum::<f64>() / img.len() as f64;
        5.0 * sigmoid((mean255 - 33.0) / 11.0)
    }

    fn blur_width(&self, lat: &[f32]) -> f64 {
        (self.blur_sigma * (1.0 + lat[BLUR] as f64)).max(0.1 * self.blur_sigma)
    }
}

impl Simulator for Images {
    fn x_dim(&self) -> usize {
        self.pixels()
    }

    fn y_dim(&self) -> usize {
        3 * self.pixels()
    }

    fn y_channels(&self) -> usize {
        3
    }

    fn latent_dim(&self) -> usize {
        NOISE + 3 * self.pixels()
    }

    fn num_classes(&self) -> usize {
        self.k
    }

    fn treatment_range(&self) -> (f64, f64) {
        (0.0, 5.3)
    }

    fn draw_covariate_latents(&self, lat: &mut [f32], rng: &mut ChaCha8Rng) {
        match &self.corpus {
            Some(c) => {
                let i = rng.gen_range(0..c.len());
                lat[SRC] = i as f32;
                lat[LABEL] = c.labels[i] as f32;
                lat[INTENSITY] = 1.0;
            }
            None => {
                let d = rng.gen_range(0..10u8);
                lat[SRC] = d as f32;
                lat[LABEL] = d as f32;
                lat[INTENSITY] = rng.gen_range(0.4f32..1.0);
            }
        }
    }

    fn draw_outcome_latents(&self, lat: &mut [f32], rng: &mut ChaCha8Rng) {
        match self.noise {
            NoiseMode::Additive => {
                lat[BLUR] = 0.0;
                for v in &mut lat[NOISE..] {
                    *v = f32_normal(rng, self.sigma);
                }
            }
            NoiseMode::NonAdditive => {
                lat[BLUR] = f32_normal(rng, self.sigma);
                lat[NOISE..].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn class_prior(&self, lat: &[f32]) -> Vec<f64> {
        label_class_probs(lat[LABEL] as usize, self.k, self.rho)
    }

    fn draw_treatment(&self, lat: &mut [f32], rng: &mut ChaCha8Rng) -> f32 {
        let u = rng.gen_range(0.0f32..0.3);
        lat[U_T] = u;
        (u as f64 + self.treatment_shift(lat)) as f32
    }

    fn covariates(&self, lat: &[f32]) -> Result<Vec<f32>> {
        Ok(self.base_image(lat).into_iter().map(|v| v as f32).collect())
    }

    fn outcome(&self, lat: &[f32], u_z: u8, t: f64) -> Result<Vec<f32>> {
        let n = self.pixels();
        let mut rot = rotate(&self.base_image(lat), self.size, self.rotation_scale * t);
        if self.noise == NoiseMode::NonAdditive {
            rot = blur(&rot, self.size, self.blur_width(lat));
        }
        let rgb = hue_rgb(u_z as usize, self.k);
        let mut y = Vec::with_capacity(3 * n);
        for (ch, w) in rgb.iter().enumerate() {
            let eta = &lat[NOISE + ch * n..NOISE + (ch + 1) * n];
            y.extend(rot.iter().zip(eta).map(|(&p, &e)| (w * p + e as f64) as f32));
        }
        Ok(y)
    }

    fn neutralize_noise(&self, lat: &mut [f32]) {
        lat[BLUR] = 0.0;
        lat[NOISE..].iter_mut().for_each(|v| *v = 0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rho_extremes() {
        for label in 0..10 {
            assert!(label_class_probs(label, 6, 0.0).iter().all(|&p| (p - 1.0 / 6.0).abs() < 1e-15));
        }
        let p = label_class_probs(7, 6, 1.0);
        assert_eq!(p[1], 1.0);
        assert!(p.iter().enumerate().all(|(i, &v)| i == 1 || v == 0.0));
    }

    #[test]
    fn probs_sum_to_one() {
        for &rho in &[0.0, 0.3, 0.5, 0.9] {
            let s: f64 = label_class_probs(4, 6, rho).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn primary_hues() {
        assert_eq!(hue_rgb(0, 6), [1.0, 0.0, 0.0]);
        assert_eq!(hue_rgb(2, 6), [0.0, 1.0, 0.0]);
        assert_eq!(hue_rgb(4, 6), [0.0, 0.0, 1.0]);
        assert_eq!(hue_rgb(3, 6), [0.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let g = glyph(8, 14);
        assert_eq!(rotate(&g, 14, 0.0), g);
    }

    #[test]
    fn quarter_turn_moves_pixels() {
        let size = 5;
        let mut img = vec![0.0; 25];
        img[2] = 1.0; // top centre
        let r = rotate(&img, size, 90.0);
        // counter-clockwise: top centre goes to the left centre
        assert!((r[2 * 5] - 1.0).abs() < 1e-12, "{r:?}");
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blur_preserves_interior_mass() {
        let mut img = vec![0.0; 81];
        img[40] = 1.0;
        let b = blur(&img, 9, 1.0);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(b[40] < 1.0 && b[40] > b[41]);
    }

    #[test]
    fn glyphs_are_distinct() {
        let gs: Vec<_> = (0..10).map(|d| glyph(d, 14)).collect();
        for a in 0..10 {
            for b in a + 1..10 {
                assert_ne!(gs[a], gs[b], "{a} vs {b}");
            }
        }
        assert!(gs.iter().flatten().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn mean_33_gives_half_sigmoid() {
        assert_eq!(5.0 * sigmoid((33.0 - 33.0) / 11.0), 2.5);
    }

    #[test]
    fn area_resample_of_constant() {
        let src = vec![255u8; 28 * 28];
        let r = resample(&src, 28, 28, 14);
        assert!(r.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn rho_zero_classes_are_uniform() {
        use crate::datagen::{generate, GenConfig, NoiseMode};
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let cfg = GenConfig {
            rho: 0.0,
            n_train: 3000,
            n_val: 0,
            n_test: 0,
            ..GenConfig::images(NoiseMode::Additive, 9)
        };
        let ds = generate(&cfg).unwrap();
        let mut counts = vec![0.0; cfg.k0];
        ds.u_z.iter().for_each(|&z| counts[z as usize] += 1.0);
        let e = ds.len() as f64 / cfg.k0 as f64;
        let stat: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
        let p = 1.0 - ChiSquared::new((cfg.k0 - 1) as f64).unwrap().cdf(stat);
        assert!(p > 0.01, "chi-square {stat:.2}, p = {p:.4}, counts {counts:?}");
    }
}
