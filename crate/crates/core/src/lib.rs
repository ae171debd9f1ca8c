//! Simulation and analysis toolkit for electrochemical random-access memory
//! (ECRAM) cells.
//!
//! A cell is modelled as two ion reservoirs (channel and gate) exchanging
//! ions through an Arrhenius-activated ionic resistance. Whether a
//! programmed state survives a short circuit is decided by the shape of
//! the electrode chemical potential: a monotone μ(X) relaxes every state to
//! a single equilibrium, while a plateau (miscibility gap) makes a whole
//! continuum of states stable.
//!
//! Modules:
//! - [`thermo`]: free-energy models, spinodal and common-tangent solvers.
//! - [`cell`]: lumped two-reservoir cell and its time integration.
//! - [`phasefield`]: 1-D Cahn-Hilliard model of the channel film.
//! - [`conductance`]: ion state to channel conductance, read emulation.
//! - [`protocol`]: experiment scripts and their executor.
//! - [`analysis`]: charge integrals, tangent lines, Arrhenius fits and
//!   switching metrics.
//! - [`config`] and [`scenarios`]: the declarative JSON run format and the
//!   shipped scenario configs.

pub mod analysis;
pub mod cell;
pub mod conductance;
pub mod config;
pub mod ode;
pub mod phasefield;
pub mod protocol;
pub mod scenarios;
pub mod thermo;

/// Boltzmann constant, eV/K.
pub const BOLTZMANN_EV: f64 = 8.617_333_262e-5;

/// Elementary charge, C.
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;

/// Thermal energy kT in eV.
#[inline]
pub fn thermal_energy(temperature: f64) -> f64 {
    BOLTZMANN_EV * temperature
}
