//! One-dimensional Cahn-Hilliard model of the channel film.
//!
//! Finite-volume, explicit Euler. Cell `i` holds the ion fraction `x_i`;
//! face `j` sits between cells `j-1` and `j`. Face 0 is the electrolyte
//! interface and carries the imposed boundary flux, face N is blocked.
//!
//! ```text
//! μ_i  = g'(x_i) − κ·(x_{i−1} − 2x_i + x_{i+1}) / dx²      (mirror ends)
//! J_j  = −M·x̄_j(1 − x̄_j)·(μ_j − μ_{j−1}) / dx,   x̄_j = (x_{j−1} + x_j)/2
//! x_i ← x_i − dt·(J_{i+1} − J_i) / dx
//! ```
//!
//! Linearising about any state, `M·x(1−x)·g''(x) ≤ M·kT`, so the scheme is
//! stable for `dt ≤ 2 / (4Mκ/dx⁴ + 4M·kT/dx²)` ([`stable_dt`]).

use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::thermal_energy;
use crate::thermo::{self, FreeEnergyModel, MiscibilityGap, ThermoError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PhaseFieldError {
    #[error("cell {index}: composition {value} outside (0, 1)")]
    CompositionOutOfRange { index: usize, value: f64 },
    #[error("dt = {dt} exceeds the stability bound {bound}")]
    StabilityFailure { dt: f64, bound: f64 },
    #[error("invalid phase-field argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Thermo(#[from] ThermoError),
}

pub type Result<T> = std::result::Result<T, PhaseFieldError>;

/// Ion fraction on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldProfile {
    pub x: Vec<f64>,
    pub dx: f64,
    /// Mobility prefactor M.
    pub mobility: f64,
}

impl FieldProfile {
    pub fn uniform(n: usize, value: f64, dx: f64, mobility: f64) -> Self {
        Self { x: vec![value; n], dx, mobility }
    }

    /// `mean` plus seeded Gaussian noise, re-centred so the sample mean is
    /// exactly `mean` up to round-off.
    pub fn seeded_noise(n: usize, mean: f64, sigma: f64, seed: u64, dx: f64, mobility: f64) -> Result<Self> {
        if n == 0 {
            return Err(PhaseFieldError::InvalidArgument("grid must have at least one cell".into()));
        }
        let normal = Normal::new(0.0, sigma)
            .map_err(|e| PhaseFieldError::InvalidArgument(format!("noise sigma {sigma}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let shift = x.iter().sum::<f64>() / n as f64;
        for v in &mut x {
            *v += mean - shift;
        }
        let p = Self { x, dx, mobility };
        p.validate()?;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.is_empty() {
            return Err(PhaseFieldError::InvalidArgument("grid must have at least one cell".into()));
        }
        if !(self.dx > 0.0 && self.dx.is_finite()) {
            return Err(PhaseFieldError::InvalidArgument(format!("dx must be > 0, got {}", self.dx)));
        }
        if !(self.mobility > 0.0 && self.mobility.is_finite()) {
            return Err(PhaseFieldError::InvalidArgument(format!("mobility must be > 0, got {}", self.mobility)));
        }
        for (index, &value) in self.x.iter().enumerate() {
            if !(value > 0.0 && value < 1.0) {
                return Err(PhaseFieldError::CompositionOutOfRange { index, value });
            }
        }
        Ok(())
    }

    /// Σ x_i·dx.
    pub fn mass(&self) -> f64 {
        self.x.iter().sum::<f64>() * self.dx
    }

    pub fn mean(&self) -> f64 {
        self.x.iter().sum::<f64>() / self.x.len() as f64
    }

    pub fn position(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dx
    }
}

/// Largest explicit step guaranteed stable for this grid and model.
pub fn stable_dt(profile: &FieldProfile, model: &FreeEnergyModel, temperature: f64) -> f64 {
    let (m, dx) = (profile.mobility, profile.dx);
    let dx2 = dx * dx;
    2.0 / (4.0 * m * model.kappa / (dx2 * dx2) + 4.0 * m * thermal_energy(temperature) / dx2)
}

/// Cell chemical potentials, eV per ion.
pub fn chemical_potential_field(profile: &FieldProfile, model: &FreeEnergyModel, temperature: f64) -> Result<Vec<f64>> {
    profile.validate()?;
    let x = &profile.x;
    let n = x.len();
    let inv_dx2 = 1.0 / (profile.dx * profile.dx);
    let mut mu = Vec::with_capacity(n);
    for i in 0..n {
        let left = x[i.saturating_sub(1)];
        let right = x[(i + 1).min(n - 1)];
        let lap = (left - 2.0 * x[i] + right) * inv_dx2;
        mu.push(thermo::chemical_potential(model, x[i], temperature)? - model.kappa * lap);
    }
    Ok(mu)
}

/// One explicit step. `boundary_flux` is the ion inflow through the
/// electrolyte face in fraction·length per unit time.
pub fn step_ch(
    profile: &FieldProfile,
    model: &FreeEnergyModel,
    temperature: f64,
    dt: f64,
    boundary_flux: f64,
) -> Result<FieldProfile> {
    let bound = stable_dt(profile, model, temperature);
    if !(dt > 0.0 && dt <= bound) {
        return Err(PhaseFieldError::StabilityFailure { dt, bound });
    }
    let mu = chemical_potential_field(profile, model, temperature)?;
    let x = &profile.x;
    let n = x.len();
    let m = profile.mobility;
    let inv_dx = 1.0 / profile.dx;
    // flux[j] through face j, positive toward increasing index
    let mut flux = vec![0.0; n + 1];
    flux[0] = boundary_flux;
    for j in 1..n {
        let xm = 0.5 * (x[j - 1] + x[j]);
        flux[j] = -m * xm * (1.0 - xm) * (mu[j] - mu[j - 1]) * inv_dx;
    }
    let next: Vec<f64> = (0..n).map(|i| x[i] - dt * (flux[i + 1] - flux[i]) * inv_dx).collect();
    let out = FieldProfile { x: next, ..profile.clone() };
    if let Err(PhaseFieldError::CompositionOutOfRange { .. }) = out.validate() {
        return Err(PhaseFieldError::StabilityFailure { dt, bound });
    }
    Ok(out)
}

/// Σ [g(x_i) + (κ/2)·((x_{i+1} − x_i)/dx)²]·dx, eV.
pub fn total_free_energy(profile: &FieldProfile, model: &FreeEnergyModel, temperature: f64) -> Result<f64> {
    profile.validate()?;
    let x = &profile.x;
    let mut bulk = 0.0;
    for &v in x {
        bulk += thermo::free_energy_density(model, v, temperature)?;
    }
    let grad: f64 = x.windows(2).map(|w| ((w[1] - w[0]) / profile.dx).powi(2)).sum();
    Ok((bulk + 0.5 * model.kappa * grad) * profile.dx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub domain_count: usize,
    pub interface_count: usize,
    /// Mean composition of the ion-poor phase, if present.
    pub mean_alpha: Option<f64>,
    /// Mean composition of the ion-rich phase, if present.
    pub mean_beta: Option<f64>,
}

/// Classify cells by the nearer binodal branch. A domain's composition is
/// its core value, the cell farthest from the split (its plateau once
/// interfaces are resolved); phase means average those cores.
pub fn domain_statistics(profile: &FieldProfile, gap: &MiscibilityGap) -> DomainStats {
    let split = gap.midpoint();
    let x = &profile.x;
    if x.is_empty() {
        return DomainStats { domain_count: 0, interface_count: 0, mean_alpha: None, mean_beta: None };
    }
    let mut cores = Vec::new();
    let mut core = x[0];
    for w in x.windows(2) {
        if (w[0] > split) != (w[1] > split) {
            cores.push(core);
            core = w[1];
        } else if w[1] > split {
            core = core.max(w[1]);
        } else {
            core = core.min(w[1]);
        }
    }
    cores.push(core);
    let mean = |rich: bool| {
        let sel: Vec<f64> = cores.iter().copied().filter(|&c| (c > split) == rich).collect();
        (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
    };
    DomainStats {
        domain_count: cores.len(),
        interface_count: cores.len() - 1,
        mean_alpha: mean(false),
        mean_beta: mean(true),
    }
}

/// Snapshot as CSV: `cell_index,position,x`.
pub fn write_profile_csv<W: Write>(profile: &FieldProfile, mut out: W) -> io::Result<()> {
    writeln!(out, "cell_index,position,x")?;
    for (i, v) in profile.x.iter().enumerate() {
        writeln!(out, "{},{:e},{:e}", i, profile.position(i), v)?;
    }
    Ok(())
}

/// Declarative phase-field run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseFieldConfig {
    pub n_cells: usize,
    #[serde(default = "one")]
    pub dx: f64,
    /// Mobility; defaults to 1/kT.
    #[serde(default)]
    pub mobility: Option<f64>,
    pub temperature: f64,
    /// Ω in units of kT; 0 gives the ideal solution.
    pub omega_kt: f64,
    /// κ in units of kT·dx².
    pub kappa_kt: f64,
    pub mean: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    pub dt: f64,
    pub n_steps: u64,
    /// Steps between diagnostic rows.
    #[serde(default = "hundred")]
    pub diagnostics_every: u64,
    /// Steps between profile snapshots; 0 keeps only the first and last.
    #[serde(default)]
    pub snapshot_every: u64,
    #[serde(default)]
    pub boundary_flux: f64,
}

fn one() -> f64 {
    1.0
}

fn hundred() -> u64 {
    100
}

impl PhaseFieldConfig {
    pub fn model(&self) -> FreeEnergyModel {
        let kt = thermal_energy(self.temperature);
        let base = if self.omega_kt == 0.0 {
            FreeEnergyModel::ideal(0.0)
        } else {
            FreeEnergyModel::regular_in_kt(0.0, self.omega_kt, self.temperature)
        };
        base.with_kappa(self.kappa_kt * kt)
    }

    pub fn initial_profile(&self) -> Result<FieldProfile> {
        if !(self.temperature > 0.0) {
            return Err(PhaseFieldError::InvalidArgument(format!("temperature must be > 0, got {}", self.temperature)));
        }
        let m = self.mobility.unwrap_or(1.0 / thermal_energy(self.temperature));
        if self.noise_sigma > 0.0 {
            FieldProfile::seeded_noise(self.n_cells, self.mean, self.noise_sigma, self.seed, self.dx, m)
        } else {
            let p = FieldProfile::uniform(self.n_cells, self.mean, self.dx, m);
            p.validate()?;
            Ok(p)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub step: u64,
    pub t: f64,
    pub mass: f64,
    pub energy: f64,
    pub interface_count: usize,
}

/// Run a configured trajectory, reporting diagnostics and snapshots.
/// Snapshots are taken at step 0, every `snapshot_every` steps and at the end.
pub fn simulate(
    cfg: &PhaseFieldConfig,
    mut on_diagnostics: impl FnMut(&Diagnostics),
    mut on_snapshot: impl FnMut(u64, &FieldProfile) -> io::Result<()>,
) -> Result<FieldProfile> {
    let model = cfg.model();
    model.validate()?;
    let mut profile = cfg.initial_profile()?;
    let bound = stable_dt(&profile, &model, cfg.temperature);
    if !(cfg.dt > 0.0 && cfg.dt <= bound) {
        return Err(PhaseFieldError::StabilityFailure { dt: cfg.dt, bound });
    }
    // Classification threshold: gap midpoint when there is a gap, else 1/2.
    let gap = thermo::common_tangent(&model, cfg.temperature)?.unwrap_or(MiscibilityGap {
        x_alpha: 0.5,
        x_beta: 0.5,
        mu_plateau: 0.0,
        spinodal_lo: 0.5,
        spinodal_hi: 0.5,
    });
    let every = cfg.diagnostics_every.max(1);
    let snap = |e: io::Error| PhaseFieldError::InvalidArgument(format!("snapshot output: {e}"));
    let report = |step: u64, p: &FieldProfile| -> Result<Diagnostics> {
        Ok(Diagnostics {
            step,
            t: step as f64 * cfg.dt,
            mass: p.mass(),
            energy: total_free_energy(p, &model, cfg.temperature)?,
            interface_count: domain_statistics(p, &gap).interface_count,
        })
    };
    on_diagnostics(&report(0, &profile)?);
    on_snapshot(0, &profile).map_err(snap)?;
    for step in 1..=cfg.n_steps {
        profile = step_ch(&profile, &model, cfg.temperature, cfg.dt, cfg.boundary_flux)?;
        if step % every == 0 || step == cfg.n_steps {
            on_diagnostics(&report(step, &profile)?);
        }
        if step == cfg.n_steps || (cfg.snapshot_every > 0 && step % cfg.snapshot_every == 0) {
            on_snapshot(step, &profile).map_err(snap)?;
        }
    }
    Ok(profile)
}
