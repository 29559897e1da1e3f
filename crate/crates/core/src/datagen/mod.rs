//! Seedable synthetic benchmarks with stored latents.
//!
//! Every stochastic draw of a unit is kept as a raw `f32` sequence, so the
//! outcome under any alternative treatment can be regenerated from exactly
//! the same background variables. Generation runs per unit on its own
//! ChaCha stream (`stream = unit index`), so results do not depend on the
//! order or parallelism of generation.

mod cardio;
pub mod idx;
mod images;
mod io;
mod oscillator;

use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cardio::{confounder, fluid_input, Cardio, PA_SCALE, PV_SCALE, T_TREAT};
pub use idx::DigitCorpus;
pub use images::{glyph, hue_rgb, label_class_probs, Images};
pub use oscillator::{ramp, Oscillator, T_P};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::odesim::CvParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Oscillator,
    Cardio,
    Images,
}

impl GeneratorKind {
    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::Oscillator => "oscillator",
            GeneratorKind::Cardio => "cardio",
            GeneratorKind::Images => "images",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Additive,
    NonAdditive,
}

impl NoiseMode {
    pub fn name(self) -> &'static str {
        match self {
            NoiseMode::Additive => "additive",
            NoiseMode::NonAdditive => "non_additive",
        }
    }
}

/// IDX files backing the image generator instead of procedural glyphs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusPaths {
    pub images: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub generator: GeneratorKind,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub sigma: f64,
    pub noise_mode: NoiseMode,
    pub k0: usize,
    #[serde(default)]
    pub rho: f64,
    pub seed: u64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    /// Degrees of rotation per unit of treatment.
    #[serde(default = "default_rotation_scale")]
    pub rotation_scale: f64,
    /// Base standard deviation (pixels) of the outcome blur.
    #[serde(default = "default_blur_sigma")]
    pub blur_sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<CorpusPaths>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv_params: Option<CvParams>,
}

fn default_image_size() -> usize {
    14
}

fn default_rotation_scale() -> f64 {
    10.0
}

fn default_blur_sigma() -> f64 {
    1.0
}

impl GenConfig {
    /// Harmonic-oscillator defaults: 128/128/1000 units, sigma 0.05.
    pub fn oscillator(noise_mode: NoiseMode, seed: u64) -> Self {
        Self {
            generator: GeneratorKind::Oscillator,
            n_train: 128,
            n_val: 128,
            n_test: 1000,
            sigma: 0.05,
            noise_mode,
            k0: 3,
            rho: 0.0,
            seed,
            image_size: default_image_size(),
            rotation_scale: default_rotation_scale(),
            blur_sigma: default_blur_sigma(),
            corpus: None,
            cv_params: None,
        }
    }

    /// Cardiovascular defaults: 500/250/1000 units, sigma 0.01.
    pub fn cardio(noise_mode: NoiseMode, seed: u64) -> Self {
        Self {
            generator: GeneratorKind::Cardio,
            n_train: 500,
            n_val: 250,
            n_test: 1000,
            sigma: 0.01,
            k0: 2,
            ..Self::oscillator(noise_mode, seed)
        }
    }

    /// Desk-scale image preset: 14x14 procedural glyphs, six colour classes.
    pub fn images(noise_mode: NoiseMode, seed: u64) -> Self {
        Self {
            generator: GeneratorKind::Images,
            n_train: 4000,
            n_val: 1000,
            n_test: 1000,
            sigma: match noise_mode {
                NoiseMode::Additive => 0.01,
                NoiseMode::NonAdditive => 0.05,
            },
            k0: 6,
            rho: 0.5,
            ..Self::oscillator(noise_mode, seed)
        }
    }

    pub fn n_total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.k0 == 0 {
            return Err(Error::Config("k0 must be at least 1".into()));
        }
        match self.generator {
            GeneratorKind::Oscillator if self.k0 != 3 => Err(Error::Config(format!(
                "the oscillator generator has exactly 3 latent classes, got k0 = {}",
                self.k0
            ))),
            GeneratorKind::Cardio if self.k0 != 2 => Err(Error::Config(format!(
                "the cardiovascular generator has exactly 2 latent classes, got k0 = {}",
                self.k0
            ))),
            GeneratorKind::Images if self.image_size < 8 => Err(Error::Config(format!(
                "image_size must be at least 8, got {}",
                self.image_size
            ))),
            GeneratorKind::Images if self.k0 > 255 => {
                Err(Error::Config("k0 must fit in a byte".into()))
            }
            _ => Ok(()),
        }
    }

    /// Instantiates the structural model described by this configuration.
    pub fn simulator(&self) -> Result<Arc<dyn Simulator>> {
        self.validate()?;
        Ok(match self.generator {
            GeneratorKind::Oscillator => Arc::new(Oscillator::new(self.sigma, self.noise_mode)),
            GeneratorKind::Cardio => Arc::new(Cardio::new(
                self.sigma,
                self.noise_mode,
                self.cv_params.clone().unwrap_or_default(),
            )?),
            GeneratorKind::Images => {
                let corpus = match &self.corpus {
                    Some(p) => Some(Arc::new(DigitCorpus::load(&p.images, &p.labels)?)),
                    None => None,
                };
                Arc::new(Images::new(self, corpus)?)
            }
        })
    }
}

/// A structural causal model over (X, T, Y) with categorical class `U_Z`.
///
/// Latents are split in two groups: covariate-side draws (which fix X) and
/// outcome-side draws (noise entering Y only). Resampling the latter at a
/// fixed covariate side samples `Y | X = x, T = t`.
pub trait Simulator: Send + Sync {
    fn x_dim(&self) -> usize;
    fn y_dim(&self) -> usize;
    /// Number of channels the outcome is flattened from (channel-major).
    fn y_channels(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn treatment_range(&self) -> (f64, f64);

    fn draw_covariate_latents(&self, lat: &mut [f32], rng: &mut ChaCha8Rng);
    fn draw_outcome_latents(&self, lat: &mut [f32], rng: &mut ChaCha8Rng);
    fn class_prior(&self, lat: &[f32]) -> Vec<f64>;
    /// Draws `T | X`; may record treatment-side draws in `lat`.
    fn draw_treatment(&self, lat: &mut [f32], rng: &mut ChaCha8Rng) -> f32;

    fn covariates(&self, lat: &[f32]) -> Result<Vec<f32>>;
    fn outcome(&self, lat: &[f32], u_z: u8, t: f64) -> Result<Vec<f32>>;
    /// Sets every noise draw to its neutral value (zero offset, base blur).
    fn neutralize_noise(&self, lat: &mut [f32]);

    fn outcome_without_noise(&self, lat: &[f32], u_z: u8, t: f64) -> Result<Vec<f32>> {
        let mut clean = lat.to_vec();
        self.neutralize_noise(&mut clean);
        self.outcome(&clean, u_z, t)
    }

    fn draw_class(&self, lat: &[f32], rng: &mut ChaCha8Rng) -> u8 {
        sample_categorical(&self.class_prior(lat), rng) as u8
    }
}

pub(crate) fn f32_normal(rng: &mut ChaCha8Rng, sigma: f64) -> f32 {
    let z: f64 = StandardNormal.sample(rng);
    (sigma * z) as f32
}

pub(crate) fn sample_categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // round-off: fall back to the last class with positive mass
    p.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Per-unit RNG stream derived from a master seed.
pub fn unit_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// One fully specified unit of a structural model.
#[derive(Clone, Debug, PartialEq)]
pub struct Unit {
    pub latents: Vec<f32>,
    pub u_z: u8,
    pub t: f32,
}

pub fn draw_unit(sim: &dyn Simulator, rng: &mut ChaCha8Rng) -> Unit {
    let mut latents = vec![0.0f32; sim.latent_dim()];
    sim.draw_covariate_latents(&mut latents, rng);
    let u_z = sim.draw_class(&latents, rng);
    let t = sim.draw_treatment(&mut latents, rng);
    sim.draw_outcome_latents(&mut latents, rng);
    Unit { latents, u_z, t }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Generated benchmark: covariates, treatments, outcomes, classes and the
/// latent draws needed to regenerate outcomes.
#[derive(Clone)]
pub struct Dataset {
    pub config: GenConfig,
    pub x_dim: usize,
    pub y_dim: usize,
    pub y_channels: usize,
    pub latent_dim: usize,
    pub x: Vec<f32>,
    pub t: Vec<f32>,
    pub y: Vec<f32>,
    pub u_z: Vec<u8>,
    pub latents: Option<Vec<f32>>,
    sim: Arc<dyn Simulator>,
}

impl std::fmt::Debug for Dataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dataset")
            .field("generator", &self.config.generator)
            .field("n", &self.len())
            .field("x_dim", &self.x_dim)
            .field("y_dim", &self.y_dim)
            .field("has_latents", &self.latents.is_some())
            .finish()
    }
}

/// Counterfactual evaluation tuple `(x, t, y, t', y')`.
#[derive(Clone, Debug, PartialEq)]
pub struct CfTuple {
    pub index: usize,
    pub x: Vec<f32>,
    pub t: f32,
    pub y: Vec<f32>,
    pub t_prime: f64,
    pub y_prime: Vec<f32>,
    pub u_z: u8,
}

pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    let sim = cfg.simulator()?;
    generate_with(cfg, sim)
}

pub fn generate_with(cfg: &GenConfig, sim: Arc<dyn Simulator>) -> Result<Dataset> {
    let n = cfg.n_total();
    let rows: Vec<(Unit, Vec<f32>, Vec<f32>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = unit_rng(cfg.seed, i);
            let unit = draw_unit(sim.as_ref(), &mut rng);
            let wrap = |e: Error| Error::Generation {
                index: i,
                reason: e.to_string(),
            };
            let x = sim.covariates(&unit.latents).map_err(wrap)?;
            let y = sim.outcome(&unit.latents, unit.u_z, unit.t as f64).map_err(wrap)?;
            Ok((unit, x, y))
        })
        .collect::<Result<_>>()?;
    let mut ds = Dataset {
        config: cfg.clone(),
        x_dim: sim.x_dim(),
        y_dim: sim.y_dim(),
        y_channels: sim.y_channels(),
        latent_dim: sim.latent_dim(),
        x: Vec::with_capacity(n * sim.x_dim()),
        t: Vec::with_capacity(n),
        y: Vec::with_capacity(n * sim.y_dim()),
        u_z: Vec::with_capacity(n),
        latents: Some(Vec::with_capacity(n * sim.latent_dim())),
        sim,
    };
    for (unit, x, y) in rows {
        ds.x.extend_from_slice(&x);
        ds.y.extend_from_slice(&y);
        ds.t.push(unit.t);
        ds.u_z.push(unit.u_z);
        ds.latents.as_mut().unwrap().extend_from_slice(&unit.latents);
    }
    Ok(ds)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn simulator(&self) -> &Arc<dyn Simulator> {
        &self.sim
    }

    pub fn split_of(&self, i: usize) -> Split {
        if i < self.config.n_train {
            Split::Train
        } else if i < self.config.n_train + self.config.n_val {
            Split::Val
        } else {
            Split::Test
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        let (a, b) = (self.config.n_train, self.config.n_train + self.config.n_val);
        match split {
            Split::Train => (0..a).collect(),
            Split::Val => (a..b).collect(),
            Split::Test => (b..self.len()).collect(),
        }
    }

    pub fn x_row(&self, i: usize) -> &[f32] {
        &self.x[i * self.x_dim..(i + 1) * self.x_dim]
    }

    pub fn y_row(&self, i: usize) -> &[f32] {
        &self.y[i * self.y_dim..(i + 1) * self.y_dim]
    }

    pub fn latent_row(&self, i: usize) -> Result<&[f32]> {
        let lat = self.latents.as_ref().ok_or(Error::MissingLatents)?;
        Ok(&lat[i * self.latent_dim..(i + 1) * self.latent_dim])
    }

    /// Model inputs `x ⊕ t` for the listed units.
    pub fn features(&self, idx: &[usize]) -> Matrix {
        let ts: Vec<f64> = idx.iter().map(|&i| self.t[i] as f64).collect();
        self.features_at(idx, &ts)
    }

    /// Model inputs `x ⊕ t'` with per-unit treatments `ts`.
    pub fn features_at(&self, idx: &[usize], ts: &[f64]) -> Matrix {
        assert_eq!(idx.len(), ts.len());
        let mut m = Matrix::zeros(idx.len(), self.x_dim + 1);
        for (r, (&i, &t)) in idx.iter().zip(ts).enumerate() {
            let row = m.row_mut(r);
            for (d, &s) in row.iter_mut().zip(self.x_row(i)) {
                *d = s as f64;
            }
            row[self.x_dim] = t;
        }
        m
    }

    pub fn targets(&self, idx: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(idx.len(), self.y_dim);
        for (r, &i) in idx.iter().enumerate() {
            for (d, &s) in m.row_mut(r).iter_mut().zip(self.y_row(i)) {
                *d = s as f64;
            }
        }
        m
    }

    /// Outcome of unit `i` under treatment `t`, from its stored latents.
    pub fn regenerate(&self, i: usize, t: f64) -> Result<Vec<f32>> {
        let lat = self.latent_row(i)?;
        self.sim.outcome(lat, self.u_z[i], t)
    }

    /// Counterfactual tuple for test unit `i` under `t_prime`.
    pub fn regen_counterfactual(&self, i: usize, t_prime: f64) -> Result<CfTuple> {
        if i >= self.len() || self.split_of(i) != Split::Test {
            return Err(Error::NotInTestSplit(i));
        }
        let y_prime = self.regenerate(i, t_prime)?;
        Ok(CfTuple {
            index: i,
            x: self.x_row(i).to_vec(),
            t: self.t[i],
            y: self.y_row(i).to_vec(),
            t_prime,
            y_prime,
            u_z: self.u_z[i],
        })
    }

    /// One counterfactual query per test unit, with `t'` drawn from the
    /// unit's own treatment-assignment mechanism `T | X = x`.
    pub fn counterfactual_queries(&self, seed: u64) -> Result<Vec<CfTuple>> {
        let test = self.indices(Split::Test);
        test.par_iter()
            .map(|&i| {
                let mut lat = self.latent_row(i)?.to_vec();
                let mut rng = unit_rng(seed ^ 0x00c0_ffee, i);
                let t_prime = self.sim.draw_treatment(&mut lat, &mut rng) as f64;
                self.regen_counterfactual(i, t_prime)
            })
            .collect()
    }

    /// Queries at fixed treatments for every test unit (e.g. PEHE).
    pub fn counterfactuals_at(&self, t_prime: f64) -> Result<Vec<CfTuple>> {
        self.indices(Split::Test)
            .par_iter()
            .map(|&i| self.regen_counterfactual(i, t_prime))
            .collect()
    }

    /// Drops the stored latents, as when a dataset is loaded without them.
    pub fn without_latents(mut self) -> Self {
        self.latents = None;
        self
    }
}

/// Stack of `(x, t)` inputs for a batch of tuples at their `t'`.
pub fn tuple_features(tuples: &[CfTuple], use_t_prime: bool) -> Matrix {
    let dx = tuples.first().map(|c| c.x.len()).unwrap_or(0);
    let mut m = Matrix::zeros(tuples.len(), dx + 1);
    for (r, c) in tuples.iter().enumerate() {
        let row = m.row_mut(r);
        for (d, &s) in row.iter_mut().zip(&c.x) {
            *d = s as f64;
        }
        row[dx] = if use_t_prime { c.t_prime } else { c.t as f64 };
    }
    m
}

pub use io::{load_dataset, save_dataset, DatasetManifest};

#[cfg(test)]
mod tests;
