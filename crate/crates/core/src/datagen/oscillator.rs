//! Two coupled sinusoids with class-dependent gradual treatment offsets.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{f32_normal, NoiseMode, Simulator};
use crate::error::Result;

/// Time constant of the treatment ramp, in steps after treatment.
pub const T_P: f64 = 3.0;
const T_START: f64 = 20.0;
const N_X: usize = 20;
const N_Y: usize = 21;
const N_STEPS: usize = N_X + N_Y;

const PHI: usize = 0;
const ETA_X: usize = 1;
const ETA_Y: usize = ETA_X + 2 * N_X;
const PHASE_NOISE: usize = ETA_Y + 2 * N_Y;
const LATENT_DIM: usize = PHASE_NOISE + N_STEPS;

#[derive(Clone, Debug)]
pub struct Oscillator {
    pub sigma: f64,
    pub noise: NoiseMode,
}

/// Linear ramp from the treatment time, saturating at 1 after `T_P` steps.
pub fn ramp(tau: f64) -> f64 {
    ((tau - T_START).min(T_P) / T_P).max(0.0)
}

impl Oscillator {
    pub fn new(sigma: f64, noise: NoiseMode) -> Self {
        Self { sigma, noise }
    }

    fn phase(&self, lat: &[f32], step: usize) -> f64 {
        lat[PHI] as f64 + lat[PHASE_NOISE + step] as f64
    }

    /// Offsets `(Δ0, Δ1)` applied to the two channels at time `tau`.
    pub fn offsets(u_z: u8, t: f64, tau: f64) -> (f64, f64) {
        let d = ramp(tau) * t;
        match u_z {
            0 => (d, 0.0),
            1 => (0.0, d),
            _ => (d, d),
        }
    }
}

impl Simulator for Oscillator {
    fn x_dim(&self) -> usize {
        2 * N_X
    }

    fn y_dim(&self) -> usize {
        2 * N_Y
    }

    fn y_channels(&self) -> usize {
        2
    }

    fn latent_dim(&self) -> usize {
        LATENT_DIM
    }

    fn num_classes(&self) -> usize {
        3
    }

    fn treatment_range(&self) -> (f64, f64) {
        (0.2, 1.0)
    }

    fn draw_covariate_latents(&self, lat: &mut [f32], rng: &mut ChaCha8Rng) {
        let z: f64 = StandardNormal.sample(rng);
        lat[PHI] = z as f32;
        let additive = self.noise == NoiseMode::Additive;
        for v in &mut lat[ETA_X..ETA_Y] {
            *v = if additive { f32_normal(rng, self.sigma) } else { 0.0 };
        }
        for v in &mut lat[PHASE_NOISE..PHASE_NOISE + N_X] {
            *v = if additive { 0.0 } else { f32_normal(rng, self.sigma) };
        }
    }

    fn draw_outcome_latents(&self, lat: &mut [f32], rng: &mut ChaCha8Rng) {
        let additive = self.noise == NoiseMode::Additive;
        for v in &mut lat[ETA_Y..PHASE_NOISE] {
            *v = if additive { f32_normal(rng, self.sigma) } else { 0.0 };
        }
        for v in &mut lat[PHASE_NOISE + N_X..LATENT_DIM] {
            *v = if additive { 0.0 } else { f32_normal(rng, self.sigma) };
        }
    }

    fn class_prior(&self, _lat: &[f32]) -> Vec<f64> {
        vec![1.0 / 3.0; 3]
    }

    fn draw_treatment(&self, _lat: &mut [f32], rng: &mut ChaCha8Rng) -> f32 {
        rng.gen_range(0.2f32..1.0)
    }

    fn covariates(&self, lat: &[f32]) -> Result<Vec<f32>> {
        let mut x = vec![0.0f32; 2 * N_X];
        for i in 0..N_X {
            let tau = i as f64;
            let phi = self.phase(lat, i);
            x[i] = ((0.5 * tau + phi).sin() + lat[ETA_X + i] as f64) as f32;
            x[N_X + i] = ((0.5 * tau + 2.0 * phi).sin() + lat[ETA_X + N_X + i] as f64) as f32;
        }
        Ok(x)
    }

    fn outcome(&self, lat: &[f32], u_z: u8, t: f64) -> Result<Vec<f32>> {
        let mut y = vec![0.0f32; 2 * N_Y];
        for i in 0..N_Y {
            let step = N_X + i;
            let tau = step as f64;
            let phi = self.phase(lat, step);
            let (d0, d1) = Self::offsets(u_z, t, tau);
            y[i] = ((0.5 * tau + phi).sin() + d0 + lat[ETA_Y + i] as f64) as f32;
            y[N_Y + i] =
                ((0.5 * tau + 2.0 * phi).sin() + d1 + lat[ETA_Y + N_Y + i] as f64) as f32;
        }
        Ok(y)
    }

    fn neutralize_noise(&self, lat: &mut [f32]) {
        lat[ETA_X..].iter_mut().for_each(|v| *v = 0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{draw_unit, generate, unit_rng, GenConfig};

    fn clean_unit(seed: u64) -> (Oscillator, Vec<f32>) {
        let sim = Oscillator::new(0.0, NoiseMode::Additive);
        let u = draw_unit(&sim, &mut unit_rng(seed, 0));
        (sim, u.latents)
    }

    #[test]
    fn default_dataset_ranges() {
        let ds = generate(&GenConfig::oscillator(NoiseMode::Additive, 1)).unwrap();
        assert_eq!(ds.config.n_train, 128);
        assert!(ds.t.iter().all(|t| (0.2..=1.0).contains(t)));
        let mut counts = [0usize; 3];
        ds.u_z.iter().for_each(|&z| counts[z as usize] += 1);
        let e = ds.len() as f64 / 3.0;
        // chi-square with 2 dof: p > 0.01 iff statistic < 9.21
        let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(stat < 9.21, "{counts:?}");
    }

    #[test]
    fn class_one_leaves_channel_zero_untreated() {
        let (sim, lat) = clean_unit(3);
        let y = sim.outcome(&lat, 1, 0.7).unwrap();
        for i in 0..N_Y {
            let tau = (N_X + i) as f64;
            assert_eq!(y[i], (0.5 * tau + lat[PHI] as f64).sin() as f32);
        }
    }

    #[test]
    fn zero_treatment_gives_untreated_pair() {
        let (sim, lat) = clean_unit(4);
        for z in 0..3 {
            let y = sim.outcome(&lat, z, 0.0).unwrap();
            for i in 0..N_Y {
                let tau = (N_X + i) as f64;
                let phi = lat[PHI] as f64;
                assert_eq!(y[i], (0.5 * tau + phi).sin() as f32);
                assert_eq!(y[N_Y + i], (0.5 * tau + 2.0 * phi).sin() as f32);
            }
        }
    }

    #[test]
    fn doubling_treatment_doubles_offsets() {
        let (sim, lat) = clean_unit(5);
        let base = sim.outcome(&lat, 2, 0.0).unwrap();
        let a = sim.outcome(&lat, 2, 0.4).unwrap();
        let b = sim.outcome(&lat, 2, 0.8).unwrap();
        for i in 0..2 * N_Y {
            let (da, db) = ((a[i] - base[i]) as f64, (b[i] - base[i]) as f64);
            // f32 storage of values near 1 rounds at ~6e-8
            assert!((db - 2.0 * da).abs() < 1e-6, "{i}: {da} vs {db}");
        }
        for (tau, want) in [(20.0, 0.0), (21.0, 1.0 / 3.0), (23.0, 1.0), (40.0, 1.0)] {
            assert!((Oscillator::offsets(0, 0.6, tau).0 - 0.6 * want).abs() < 1e-15);
        }
    }

    #[test]
    fn ramp_saturates_three_steps_after_treatment() {
        assert_eq!(ramp(19.0), 0.0);
        assert_eq!(ramp(20.0), 0.0);
        assert_eq!(ramp(22.5), 2.5 / 3.0);
        assert_eq!(ramp(23.0), 1.0);
        assert_eq!(ramp(35.0), 1.0);
    }
}
