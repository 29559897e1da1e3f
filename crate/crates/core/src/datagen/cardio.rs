//! Fluid-challenge trajectories from the cardiovascular model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{f32_normal, NoiseMode, Simulator};
use crate::error::{Error, Result};
use crate::odesim::{cv_derivative, rk4_integrate, CvParams, CvState};

pub const T_TREAT: f64 = 20.0;
pub const T_SPAN: f64 = 40.0;
const N_X: usize = 20;
const N_Y: usize = 21;
const N_STEPS: usize = 41;

/// Observation scaling: arterial pressure in units of 100 mmHg, venous in
/// units of 10 mmHg.
pub const PA_SCALE: f64 = 0.01;
pub const PV_SCALE: f64 = 0.1;

// latent layout
const PA0: usize = 0;
const PV0: usize = 1;
const SV_FACTOR: usize = 2;
const ETA_X: usize = 3;
const ETA_Y: usize = ETA_X + 2 * N_X;
const U_ETA: usize = ETA_Y + 2 * N_Y;
const LATENT_DIM: usize = U_ETA + N_STEPS;

#[derive(Clone, Debug)]
pub struct Cardio {
    pub sigma: f64,
    pub noise: NoiseMode,
    pub params: CvParams,
    pub dt: f64,
}

/// Dose-shaping confounder evaluated on the scaled initial arterial pressure.
pub fn confounder(p_a0_scaled: f64) -> f64 {
    let g = |x: f64| {
        let v = (5.0 * x - 0.2).cos() * (5.0 - x).powi(2);
        0.02 * v * v
    };
    g(0.5 + (p_a0_scaled - 0.75) / 0.1)
}

/// Fluid input rate at time `t` for a unit in class `u_z` under dose `t_dose`.
/// `eta` perturbs the class amplitude (non-additive noise).
pub fn fluid_input(t: f64, u_z: u8, t_dose: f64, confound: f64, eta: f64) -> f64 {
    if t <= T_TREAT {
        return 0.0;
    }
    let shape = (-((t - T_TREAT - 5.0) / 5.0).powi(2)).exp();
    (1.0 + 2.0 * u_z as f64 + eta) * t_dose * 5.0 * confound * shape
}

impl Cardio {
    pub fn new(sigma: f64, noise: NoiseMode, params: CvParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            sigma,
            noise,
            params,
            dt: 0.01,
        })
    }

    fn initial_state(&self, lat: &[f32]) -> CvState {
        let eq = self
            .params
            .equilibrium(lat[PA0] as f64, lat[PV0] as f64);
        CvState {
            sv: eq.sv * lat[SV_FACTOR] as f64,
            ..eq
        }
    }

    /// Full noise-free-in-observation trajectory, sampled every second.
    pub fn trajectory(&self, lat: &[f32], u_z: u8, t_dose: f64) -> Result<Vec<CvState>> {
        let y0 = self.initial_state(lat);
        let confound = confounder(lat[PA0] as f64 * PA_SCALE);
        let eta = &lat[U_ETA..U_ETA + N_STEPS];
        rk4_integrate(
            |t, s| {
                // zero-order hold of the per-second input noise
                let k = (t.floor() as usize).min(N_STEPS - 1);
                let u = fluid_input(t, u_z, t_dose, confound, eta[k] as f64);
                cv_derivative(s, t, u, &self.params)
            },
            y0,
            0.0,
            T_SPAN,
            self.dt,
            1.0,
        )
    }
}

impl Simulator for Cardio {
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
        2
    }

    fn treatment_range(&self) -> (f64, f64) {
        (0.6, 1.0)
    }

    fn draw_covariate_latents(&self, lat: &mut [f32], rng: &mut ChaCha8Rng) {
        let p = &self.params;
        let mut around = |c: f64, w: f64| (c + w * (2.0 * rng.gen::<f64>() - 1.0)) as f32;
        lat[PA0] = around(p.p_a_init, p.p_a_spread);
        lat[PV0] = around(p.p_v_init, p.p_v_spread);
        lat[SV_FACTOR] = around(1.0, p.sv_spread);
        for v in &mut lat[ETA_X..ETA_Y] {
            *v = match self.noise {
                NoiseMode::Additive => f32_normal(rng, self.sigma),
                NoiseMode::NonAdditive => 0.0,
            };
        }
    }

    fn draw_outcome_latents(&self, lat: &mut [f32], rng: &mut ChaCha8Rng) {
        for i in ETA_Y..LATENT_DIM {
            let additive_slot = i < U_ETA;
            let active = additive_slot == (self.noise == NoiseMode::Additive);
            lat[i] = if active { f32_normal(rng, self.sigma) } else { 0.0 };
        }
    }

    fn class_prior(&self, _lat: &[f32]) -> Vec<f64> {
        vec![0.5, 0.5]
    }

    fn draw_treatment(&self, _lat: &mut [f32], rng: &mut ChaCha8Rng) -> f32 {
        rng.gen_range(0.6f32..1.0)
    }

    fn covariates(&self, lat: &[f32]) -> Result<Vec<f32>> {
        // No fluid reaches the system before the treatment time, so class
        // and dose are irrelevant here.
        let traj = self.trajectory(lat, 0, 0.0)?;
        let mut x = Vec::with_capacity(2 * N_X);
        for i in 0..N_X {
            x.push((traj[i].p_a * PA_SCALE + lat[ETA_X + i] as f64) as f32);
        }
        for i in 0..N_X {
            x.push((traj[i].p_v * PV_SCALE + lat[ETA_X + N_X + i] as f64) as f32);
        }
        Ok(x)
    }

    fn outcome(&self, lat: &[f32], u_z: u8, t: f64) -> Result<Vec<f32>> {
        let traj = self.trajectory(lat, u_z, t)?;
        let mut y = Vec::with_capacity(2 * N_Y);
        for i in 0..N_Y {
            y.push((traj[N_X + i].p_a * PA_SCALE + lat[ETA_Y + i] as f64) as f32);
        }
        for i in 0..N_Y {
            y.push((traj[N_X + i].p_v * PV_SCALE + lat[ETA_Y + N_Y + i] as f64) as f32);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: "observation",
                time: T_SPAN,
            });
        }
        Ok(y)
    }

    fn neutralize_noise(&self, lat: &mut [f32]) {
        lat[ETA_X..].iter_mut().for_each(|v| *v = 0.0);
    }
}
