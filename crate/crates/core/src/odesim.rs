//! Four-state cardiovascular model (stroke volume, arterial and venous
//! pressure, baroreflex tone) and a fixed-step RK4 integrator.
//!
//! Units: pressures in mmHg, volumes in mL, time in seconds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Versioned constants file; `CvParams::default()` must match it.
pub const CV_PARAMS_V1: &str = include_str!("../data/cv_params_v1.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvParams {
    /// Arterial compliance (mL/mmHg).
    pub c_a: f64,
    /// Venous compliance (mL/mmHg).
    pub c_v: f64,
    pub r_tpr_min: f64,
    pub r_tpr_max: f64,
    pub r_tpr_mod: f64,
    /// Heart-rate bounds (1/s).
    pub f_hr_min: f64,
    pub f_hr_max: f64,
    /// Baroreflex time constant (s).
    pub tau_baro: f64,
    pub k_width: f64,
    pub p_a_set: f64,
    pub sv_init: f64,
    pub p_a_init: f64,
    pub p_v_init: f64,
    pub s_init: f64,
    /// Half-widths of the uniform draws of initial arterial and venous
    /// pressure around `p_a_init` and `p_v_init`.
    pub p_a_spread: f64,
    pub p_v_spread: f64,
    /// Relative half-width of the stroke-volume perturbation.
    pub sv_spread: f64,
}

impl Default for CvParams {
    fn default() -> Self {
        // Baroreflex constants from the Zenker et al. (2007) regime; the
        // resistances are scaled down so resting stroke volume is large
        // next to a fluid challenge and the response stays graded.
        Self {
            c_a: 4.0,
            c_v: 111.0,
            r_tpr_min: 0.026,
            r_tpr_max: 0.107,
            r_tpr_mod: 0.005,
            f_hr_min: 2.0 / 3.0,
            f_hr_max: 3.0,
            tau_baro: 20.0,
            k_width: 0.1838,
            p_a_set: 70.0,
            sv_init: 50.0,
            p_a_init: 76.7,
            p_v_init: 5.0,
            s_init: 0.3,
            p_a_spread: 0.5,
            p_v_spread: 2.0,
            sv_spread: 0.1,
        }
    }
}

impl CvParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("c_a", self.c_a),
            ("c_v", self.c_v),
            ("r_tpr_min", self.r_tpr_min),
            ("r_tpr_max", self.r_tpr_max),
            ("r_tpr_mod", self.r_tpr_mod),
            ("f_hr_min", self.f_hr_min),
            ("f_hr_max", self.f_hr_max),
            ("tau_baro", self.tau_baro),
            ("k_width", self.k_width),
            ("p_a_set", self.p_a_set),
            ("sv_init", self.sv_init),
            ("p_a_init", self.p_a_init),
            ("p_v_init", self.p_v_init),
            ("s_init", self.s_init),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.f_hr_max <= self.f_hr_min {
            return Err(Error::Config("f_hr_max must exceed f_hr_min".into()));
        }
        if self.r_tpr_max <= self.r_tpr_min {
            return Err(Error::Config("r_tpr_max must exceed r_tpr_min".into()));
        }
        for (name, v) in [
            ("p_a_spread", self.p_a_spread),
            ("p_v_spread", self.p_v_spread),
            ("sv_spread", self.sv_spread),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.p_a_spread >= self.p_a_init || self.p_v_spread >= self.p_v_init || self.sv_spread >= 1.0 {
            return Err(Error::Config("initial-state spreads must keep the state positive".into()));
        }
        if self.s_init > 1.0 {
            return Err(Error::Config("s_init must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    #[inline]
    pub fn r_tpr(&self, s: f64) -> f64 {
        s * (self.r_tpr_max - self.r_tpr_min) + self.r_tpr_min + self.r_tpr_mod
    }

    #[inline]
    pub fn f_hr(&self, s: f64) -> f64 {
        s * (self.f_hr_max - self.f_hr_min) + self.f_hr_min
    }

    /// Baroreflex target tone for a given arterial pressure.
    #[inline]
    pub fn tone_target(&self, p_a: f64) -> f64 {
        1.0 - 1.0 / (1.0 + (-self.k_width * (p_a - self.p_a_set)).exp())
    }

    /// The resting state with the given pressures: tone at its target and
    /// stroke volume balancing cardiac output against peripheral outflow.
    pub fn equilibrium(&self, p_a: f64, p_v: f64) -> CvState {
        let s = self.tone_target(p_a);
        CvState {
            sv: (p_a - p_v) / (self.r_tpr(s) * self.f_hr(s)),
            p_a,
            p_v,
            s,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvState {
    pub sv: f64,
    pub p_a: f64,
    pub p_v: f64,
    pub s: f64,
}

impl CvState {
    pub fn initial(p: &CvParams) -> Self {
        Self {
            sv: p.sv_init,
            p_a: p.p_a_init,
            p_v: p.p_v_init,
            s: p.s_init,
        }
    }

    fn is_finite(&self) -> bool {
        self.sv.is_finite() && self.p_a.is_finite() && self.p_v.is_finite() && self.s.is_finite()
    }
}

/// A system `dy/dt = f(t, y)` over a fixed-size state.
pub trait OdeState: Copy {
    fn axpy(self, h: f64, d: Self) -> Self;
    fn all_finite(&self) -> bool;
    /// Hook applied after each accepted step.
    fn project(self) -> Self {
        self
    }
}

impl OdeState for CvState {
    fn axpy(self, h: f64, d: Self) -> Self {
        CvState {
            sv: self.sv + h * d.sv,
            p_a: self.p_a + h * d.p_a,
            p_v: self.p_v + h * d.p_v,
            s: self.s + h * d.s,
        }
    }

    fn all_finite(&self) -> bool {
        self.is_finite()
    }

    fn project(self) -> Self {
        CvState {
            s: self.s.clamp(0.0, 1.0),
            ..self
        }
    }
}

impl<const N: usize> OdeState for [f64; N] {
    fn axpy(self, h: f64, d: Self) -> Self {
        let mut out = self;
        for (o, v) in out.iter_mut().zip(d) {
            *o += h * v;
        }
        out
    }

    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// Right-hand side of the cardiovascular system at time `t`, with
/// `fluid_rate` the instantaneous external fluid input.
pub fn cv_derivative(state: &CvState, t: f64, fluid_rate: f64, p: &CvParams) -> Result<CvState> {
    if !state.is_finite() {
        return Err(Error::NonFinite { term: "state", time: t });
    }
    let r = p.r_tpr(state.s);
    let f = p.f_hr(state.s);
    let d_sv = fluid_rate;
    // Arterial inflow from the heart minus peripheral outflow.
    let d_pa = (state.sv * f - (state.p_a - state.p_v) / r) / p.c_a;
    let d_pv = (-p.c_a * d_pa + fluid_rate) / p.c_v;
    let d_s = (p.tone_target(state.p_a) - state.s) / p.tau_baro;
    for (term, v) in [("dSV/dt", d_sv), ("dPa/dt", d_pa), ("dPv/dt", d_pv), ("dS/dt", d_s)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term, time: t });
        }
    }
    Ok(CvState {
        sv: d_sv,
        p_a: d_pa,
        p_v: d_pv,
        s: d_s,
    })
}

/// Classical fourth-order Runge-Kutta with step `dt`, returning the state
/// every `sample_every` seconds from `t0` to `t1` inclusive.
pub fn rk4_integrate<S, F>(
    mut f: F,
    y0: S,
    t0: f64,
    t1: f64,
    dt: f64,
    sample_every: f64,
) -> Result<Vec<S>>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S>,
{
    if !(dt > 0.0 && sample_every > 0.0 && t1 >= t0) {
        return Err(Error::Config(format!(
            "invalid integration window [{t0}, {t1}] with dt {dt}, sampling {sample_every}"
        )));
    }
    let sub = (sample_every / dt).round();
    if (sub * dt - sample_every).abs() > 1e-9 * sample_every || sub < 1.0 {
        return Err(Error::Config(format!(
            "dt {dt} does not divide the sampling interval {sample_every}"
        )));
    }
    let span = (t1 - t0) / sample_every;
    let n_samples = span.round();
    if (n_samples - span).abs() > 1e-9 * span.max(1.0) {
        return Err(Error::Config(format!(
            "window length {} is not a multiple of the sampling interval {sample_every}",
            t1 - t0
        )));
    }
    let (sub, n_samples) = (sub as usize, n_samples as usize);
    let mut out = Vec::with_capacity(n_samples + 1);
    let mut y = y0;
    out.push(y);
    let mut step = 0usize;
    for _ in 0..n_samples {
        for _ in 0..sub {
            // times from the step count, so sample instants are hit exactly
            let t = t0 + step as f64 * dt;
            let t_mid = t0 + (step as f64 + 0.5) * dt;
            let t_end = t0 + (step + 1) as f64 * dt;
            let k1 = f(t, &y)?;
            let k2 = f(t_mid, &y.axpy(0.5 * dt, k1))?;
            let k3 = f(t_mid, &y.axpy(0.5 * dt, k2))?;
            let k4 = f(t_end, &y.axpy(dt, k3))?;
            y = y
                .axpy(dt / 6.0, k1)
                .axpy(dt / 3.0, k2)
                .axpy(dt / 3.0, k3)
                .axpy(dt / 6.0, k4)
                .project();
            step += 1;
            if !y.all_finite() {
                return Err(Error::NonFinite {
                    term: "state",
                    time: t0 + step as f64 * dt,
                });
            }
        }
        out.push(y);
    }
    Ok(out)
}
