//! Free-energy and chemical-potential models of the electrode material.
//!
//! The regular-solution free energy per site is
//!
//! ```text
//! g(X) = μ₀·X + Ω·X(1−X) + kT·[X ln X + (1−X) ln(1−X)]
//! μ(X) = dg/dX = μ₀ + kT·ln(X/(1−X)) + Ω·(1−2X)
//! ```
//!
//! For Ω > 2kT the curve g(X) is non-convex and the material splits into
//! two phases whose compositions follow from the common tangent of g.
//! Lumped electrodes see the convexified chemical potential, which is flat
//! (the plateau) across the miscibility gap.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::thermal_energy;

/// Residual target of the common-tangent Newton polish, in units of kT.
const TANGENT_TOLERANCE: f64 = 1e-12;
const TANGENT_MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ThermoError {
    #[error("composition {0} outside the open interval (0, 1)")]
    CompositionOutOfRange(f64),
    #[error("temperature {0} K must be positive")]
    NonPositiveTemperature(f64),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("common tangent did not converge after {iterations} iterations (residual {residual:e} kT)")]
    ConvergenceFailure { iterations: usize, residual: f64 },
}

pub type Result<T> = std::result::Result<T, ThermoError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolutionKind {
    /// Ideal solid solution: monotone μ(X), always volatile.
    Ideal,
    /// Regular solution with interaction parameter Ω.
    Regular,
}

/// Thermodynamic description of an electrode material.
///
/// Energies are in eV per ion; `kappa` is in eV·(grid length)² and only
/// enters the phase-field gradient term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyModel {
    pub kind: SolutionKind,
    pub mu0: f64,
    pub omega: f64,
    pub kappa: f64,
}

impl FreeEnergyModel {
    pub fn ideal(mu0: f64) -> Self {
        Self { kind: SolutionKind::Ideal, mu0, omega: 0.0, kappa: 0.0 }
    }

    pub fn regular(mu0: f64, omega: f64) -> Self {
        Self { kind: SolutionKind::Regular, mu0, omega, kappa: 0.0 }
    }

    /// Regular solution with Ω expressed as a multiple of kT at `temperature`.
    pub fn regular_in_kt(mu0: f64, omega_over_kt: f64, temperature: f64) -> Self {
        Self::regular(mu0, omega_over_kt * thermal_energy(temperature))
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    /// Ω as seen by the formulas; ideal solutions ignore the stored value.
    pub fn effective_omega(&self) -> f64 {
        match self.kind {
            SolutionKind::Ideal => 0.0,
            SolutionKind::Regular => self.omega,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu0.is_finite() {
            return Err(ThermoError::InvalidModel(format!("mu0 must be finite, got {}", self.mu0)));
        }
        if self.kind == SolutionKind::Regular && !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(ThermoError::InvalidModel(format!("omega must be >= 0, got {}", self.omega)));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(ThermoError::InvalidModel(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        Ok(())
    }
}

/// Coexisting phase compositions and the plateau chemical potential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiscibilityGap {
    pub x_alpha: f64,
    pub x_beta: f64,
    pub mu_plateau: f64,
    pub spinodal_lo: f64,
    pub spinodal_hi: f64,
}

impl MiscibilityGap {
    pub fn contains(&self, x: f64) -> bool {
        x >= self.x_alpha && x <= self.x_beta
    }

    /// Composition separating the two branches when classifying cells.
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.x_alpha + self.x_beta)
    }
}

fn check_composition(x: f64) -> Result<()> {
    if x > 0.0 && x < 1.0 {
        Ok(())
    } else {
        Err(ThermoError::CompositionOutOfRange(x))
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(ThermoError::NonPositiveTemperature(temperature))
    }
}

#[inline]
fn mu_unchecked(model: &FreeEnergyModel, x: f64, kt: f64) -> f64 {
    model.mu0 + kt * (x / (1.0 - x)).ln() + model.effective_omega() * (1.0 - 2.0 * x)
}

#[inline]
fn g_unchecked(model: &FreeEnergyModel, x: f64, kt: f64) -> f64 {
    let y = 1.0 - x;
    model.mu0 * x + model.effective_omega() * x * y + kt * (x * x.ln() + y * y.ln())
}

#[inline]
fn dmu_unchecked(model: &FreeEnergyModel, x: f64, kt: f64) -> f64 {
    kt / (x * (1.0 - x)) - 2.0 * model.effective_omega()
}

/// Raw chemical potential μ(X), eV per ion.
pub fn chemical_potential(model: &FreeEnergyModel, x: f64, temperature: f64) -> Result<f64> {
    check_composition(x)?;
    check_temperature(temperature)?;
    Ok(mu_unchecked(model, x, thermal_energy(temperature)))
}

/// Free energy per site g(X), eV.
pub fn free_energy_density(model: &FreeEnergyModel, x: f64, temperature: f64) -> Result<f64> {
    check_composition(x)?;
    check_temperature(temperature)?;
    Ok(g_unchecked(model, x, thermal_energy(temperature)))
}

/// dμ/dX = d²g/dX², eV per ion per unit fraction.
pub fn chemical_potential_slope(model: &FreeEnergyModel, x: f64, temperature: f64) -> Result<f64> {
    check_composition(x)?;
    check_temperature(temperature)?;
    Ok(dmu_unchecked(model, x, thermal_energy(temperature)))
}

/// Roots of d²g/dX² = 0, i.e. X(1−X) = kT/(2Ω).
///
/// Returns `None` when Ω < 2kT; at the critical point both roots are 0.5.
pub fn spinodal(model: &FreeEnergyModel, temperature: f64) -> Result<Option<(f64, f64)>> {
    check_temperature(temperature)?;
    let omega = model.effective_omega();
    if omega <= 0.0 {
        return Ok(None);
    }
    let c = thermal_energy(temperature) / (2.0 * omega);
    let disc = 1.0 - 4.0 * c;
    if disc < 0.0 {
        return Ok(None);
    }
    let s = disc.sqrt();
    // X(1-X) = c; the small root is written in cancellation-free form.
    let hi = 0.5 * (1.0 + s);
    let lo = c / hi;
    Ok(Some((lo, hi)))
}

/// Solve μ(x) = target on a branch where μ is increasing, bracketed in
/// logit space by [u_lo, u_hi].
fn invert_branch(model: &FreeEnergyModel, kt: f64, target: f64, mut u_lo: f64, mut u_hi: f64) -> f64 {
    let logistic = |u: f64| 1.0 / (1.0 + (-u).exp());
    for _ in 0..200 {
        let mid = 0.5 * (u_lo + u_hi);
        if mid == u_lo || mid == u_hi {
            break;
        }
        let x = logistic(mid);
        // Saturated logistic values sit at the branch ends where μ → ∓∞.
        let below = x <= 0.0 || (x < 1.0 && mu_unchecked(model, x, kt) < target);
        if below {
            u_lo = mid;
        } else {
            u_hi = mid;
        }
    }
    logistic(0.5 * (u_lo + u_hi))
}

fn logit(x: f64) -> f64 {
    (x / (1.0 - x)).ln()
}

/// Common-tangent (binodal) construction.
///
/// A bracketing solve on the equal-area condition supplies the starting
/// pair, which a two-variable Newton iteration on
/// `μ(a) = μ(b)` and `g(b) − g(a) = μ(a)·(b − a)` then polishes.
pub fn common_tangent(model: &FreeEnergyModel, temperature: f64) -> Result<Option<MiscibilityGap>> {
    model.validate()?;
    let Some((sp_lo, sp_hi)) = spinodal(model, temperature)? else {
        return Ok(None);
    };
    if sp_hi - sp_lo <= 0.0 {
        return Ok(None);
    }
    let kt = thermal_energy(temperature);
    let mu_max = mu_unchecked(model, sp_lo, kt);
    let mu_min = mu_unchecked(model, sp_hi, kt);

    // Branch roots for a trial plateau level.
    let (u_min, u_max) = (-740.0, 740.0);
    let branches = |level: f64| {
        let a = invert_branch(model, kt, level, u_min, logit(sp_lo));
        let b = invert_branch(model, kt, level, logit(sp_hi), u_max);
        (a, b)
    };
    // Area between μ and the trial level; decreasing in the level.
    let area = |level: f64| {
        let (a, b) = branches(level);
        (g_unchecked(model, b, kt) - g_unchecked(model, a, kt) - level * (b - a)) / kt
    };

    let (mut lo, mut hi) = (mu_min, mu_max);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if area(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (mut a, mut b) = branches(0.5 * (lo + hi));

    let residuals = |a: f64, b: f64| {
        let mu_a = mu_unchecked(model, a, kt);
        let mu_b = mu_unchecked(model, b, kt);
        let r1 = (mu_a - mu_b) / kt;
        let r2 = (g_unchecked(model, b, kt) - g_unchecked(model, a, kt) - mu_a * (b - a)) / kt;
        (r1, r2)
    };

    let mut iterations = 0;
    let (mut r1, mut r2) = residuals(a, b);
    while r1.abs().max(r2.abs()) > TANGENT_TOLERANCE {
        if iterations == TANGENT_MAX_ITERATIONS {
            return Err(ThermoError::ConvergenceFailure { iterations, residual: r1.abs().max(r2.abs()) });
        }
        iterations += 1;
        let mu_a = mu_unchecked(model, a, kt);
        let mu_b = mu_unchecked(model, b, kt);
        let da = dmu_unchecked(model, a, kt) / kt;
        let db = dmu_unchecked(model, b, kt) / kt;
        // Jacobian of (r1, r2) with respect to (a, b).
        let j11 = da;
        let j12 = -db;
        let j21 = -da * (b - a);
        let j22 = (mu_b - mu_a) / kt;
        let det = j11 * j22 - j12 * j21;
        if det == 0.0 || !det.is_finite() {
            return Err(ThermoError::ConvergenceFailure { iterations, residual: r1.abs().max(r2.abs()) });
        }
        let step_a = (r1 * j22 - r2 * j12) / det;
        let step_b = (j11 * r2 - j21 * r1) / det;
        // Damp so the iterate stays inside its branch.
        let mut lambda = 1.0;
        loop {
            let na = a - lambda * step_a;
            let nb = b - lambda * step_b;
            if na > 0.0 && na < sp_lo && nb > sp_hi && nb < 1.0 {
                a = na;
                b = nb;
                break;
            }
            lambda *= 0.5;
            if lambda < 1e-12 {
                return Err(ThermoError::ConvergenceFailure { iterations, residual: r1.abs().max(r2.abs()) });
            }
        }
        (r1, r2) = residuals(a, b);
    }

    let mu_plateau = 0.5 * (mu_unchecked(model, a, kt) + mu_unchecked(model, b, kt));
    Ok(Some(MiscibilityGap { x_alpha: a, x_beta: b, mu_plateau, spinodal_lo: sp_lo, spinodal_hi: sp_hi }))
}

/// All miscibility gaps of the model, ordered by composition.
///
/// The free energies here have at most one; the list form lets callers
/// treat every gap uniformly.
pub fn miscibility_gaps(model: &FreeEnergyModel, temperature: f64) -> Result<Vec<MiscibilityGap>> {
    Ok(common_tangent(model, temperature)?.into_iter().collect())
}

/// Chemical potential with the miscibility gap replaced by its plateau.
pub fn convexified_mu(model: &FreeEnergyModel, gap: Option<&MiscibilityGap>, x: f64, temperature: f64) -> Result<f64> {
    let raw = chemical_potential(model, x, temperature)?;
    Ok(match gap {
        Some(gap) if gap.contains(x) => gap.mu_plateau,
        _ => raw,
    })
}

/// Convexified chemical potential and free energy at one temperature, with
/// the gaps resolved once.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumPotential {
    model: FreeEnergyModel,
    temperature: f64,
    kt: f64,
    gaps: Vec<MiscibilityGap>,
    smoothing: f64,
}

impl EquilibriumPotential {
    /// `smoothing` is the width ε of the blend applied just outside each
    /// plateau edge; 0 keeps exact corners.
    pub fn new(model: FreeEnergyModel, temperature: f64, smoothing: f64) -> Result<Self> {
        check_temperature(temperature)?;
        if !(smoothing >= 0.0 && smoothing.is_finite()) {
            return Err(ThermoError::InvalidModel(format!("smoothing must be >= 0, got {smoothing}")));
        }
        let gaps = miscibility_gaps(&model, temperature)?;
        Ok(Self { model, temperature, kt: thermal_energy(temperature), gaps, smoothing })
    }

    pub fn model(&self) -> &FreeEnergyModel {
        &self.model
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn gaps(&self) -> &[MiscibilityGap] {
        &self.gaps
    }

    pub fn gap(&self) -> Option<&MiscibilityGap> {
        self.gaps.first()
    }

    pub fn raw_mu(&self, x: f64) -> Result<f64> {
        check_composition(x)?;
        Ok(mu_unchecked(&self.model, x, self.kt))
    }

    /// Convexified μ, non-decreasing in x.
    pub fn mu(&self, x: f64) -> Result<f64> {
        check_composition(x)?;
        let raw = mu_unchecked(&self.model, x, self.kt);
        let eps = self.smoothing;
        for gap in &self.gaps {
            if gap.contains(x) {
                return Ok(gap.mu_plateau);
            }
            if eps > 0.0 {
                // Blend weight w runs from 1 (raw) at distance ε to 0 (plateau) at the edge.
                // Below the gap raw < plateau and w decreases, above it raw > plateau and w
                // increases, so w·raw + (1 − w)·plateau stays non-decreasing.
                let distance = if x < gap.x_alpha { gap.x_alpha - x } else { x - gap.x_beta };
                if distance < eps {
                    let s = distance / eps;
                    let w = s * s * (3.0 - 2.0 * s);
                    return Ok(w * raw + (1.0 - w) * gap.mu_plateau);
                }
            }
        }
        Ok(raw)
    }

    /// Convex hull of g: the common tangent replaces g inside each gap.
    pub fn free_energy(&self, x: f64) -> Result<f64> {
        check_composition(x)?;
        for gap in &self.gaps {
            if gap.contains(x) {
                let g_alpha = g_unchecked(&self.model, gap.x_alpha, self.kt);
                return Ok(g_alpha + gap.mu_plateau * (x - gap.x_alpha));
            }
        }
        Ok(g_unchecked(&self.model, x, self.kt))
    }
}
