//! Lumped two-reservoir cell: channel and gate ion fractions coupled
//! through an ohmic, Arrhenius-activated ionic resistance.
//!
//! Governing equations (positive current carries ions into the channel):
//!
//! ```text
//! V_oc   = [μ_eq(x2) − μ_eq(x1)] / z
//! I_G    = (V_G + V_oc) / R(T)
//! dx1/dt =  I_G / (z·e·n1) − k_ox·(x1 − x_ambient)
//! dx2/dt = −I_G / (z·e·n2)
//! dq/dt  =  I_G + I_dl
//! ```
//!
//! The optional double-layer branch charges `v_dl` toward `V_G + V_oc`
//! through the same resistance: `I_dl = (V_G + V_oc − v_dl)/R`,
//! `dv_dl/dt = I_dl / C_dl`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ode::{self, OdeError, OdeOptions, OdeStats};
use crate::thermo::{EquilibriumPotential, FreeEnergyModel, ThermoError};
use crate::{BOLTZMANN_EV, ELEMENTARY_CHARGE};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CellError {
    #[error(transparent)]
    Thermo(#[from] ThermoError),
    #[error("invalid cell state: {0}")]
    InvalidState(String),
    #[error("invalid circuit parameters: {0}")]
    InvalidCircuit(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("integrator stalled at t = {t} s ({reason}); x1 = {x1}, x2 = {x2}")]
    StiffnessFailure { t: f64, x1: f64, x2: f64, reason: String },
}

pub type Result<T> = std::result::Result<T, CellError>;

/// Instantaneous state of the lumped cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    /// Channel ion fraction.
    pub x1: f64,
    /// Gate ion fraction.
    pub x2: f64,
    /// Channel site count.
    pub n1: f64,
    /// Gate site count.
    pub n2: f64,
    /// Kelvin.
    pub temperature: f64,
    /// Net charge passed into the channel, coulombs.
    pub q_accum: f64,
    /// Double-layer voltage, volts.
    pub v_dl: f64,
}

impl CellState {
    pub fn new(x1: f64, x2: f64, n1: f64, n2: f64, temperature: f64) -> Self {
        Self { x1, x2, n1, n2, temperature, q_accum: 0.0, v_dl: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.x1) || !open(self.x2) {
            return Err(CellError::InvalidState(format!(
                "ion fractions must lie in (0, 1), got x1 = {}, x2 = {}",
                self.x1, self.x2
            )));
        }
        if !(self.n1 > 0.0 && self.n1.is_finite() && self.n2 > 0.0 && self.n2.is_finite()) {
            return Err(CellError::InvalidState(format!(
                "site counts must be positive, got n1 = {}, n2 = {}",
                self.n1, self.n2
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(CellError::InvalidState(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !self.q_accum.is_finite() || !self.v_dl.is_finite() {
            return Err(CellError::InvalidState("charge and double-layer voltage must be finite".into()));
        }
        Ok(())
    }

    /// n1·x1 + n2·x2.
    pub fn total_ions(&self) -> f64 {
        self.n1 * self.x1 + self.n2 * self.x2
    }
}

fn default_z() -> f64 {
    2.0
}

fn default_x_ambient() -> f64 {
    0.05
}

/// Ionic circuit between gate and channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitParams {
    /// Ionic resistance at `t_ref`, ohms.
    pub r_ref: f64,
    /// Kelvin.
    pub t_ref: f64,
    /// Ionic activation energy, eV.
    pub ea_ion: f64,
    #[serde(default = "default_z")]
    pub z: f64,
    /// Double-layer capacitance, farads; 0 disables the branch.
    #[serde(default)]
    pub c_dl: f64,
    /// First-order oxidation leak rate, 1/s; 0 disables it.
    #[serde(default)]
    pub oxidation_rate: f64,
    #[serde(default = "default_x_ambient")]
    pub x_ambient: f64,
}

impl CircuitParams {
    pub fn new(r_ref: f64, t_ref: f64, ea_ion: f64) -> Self {
        Self { r_ref, t_ref, ea_ion, z: default_z(), c_dl: 0.0, oxidation_rate: 0.0, x_ambient: default_x_ambient() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CellError::InvalidCircuit(msg));
        if !(self.r_ref > 0.0 && self.r_ref.is_finite()) {
            return bad(format!("r_ref must be > 0, got {}", self.r_ref));
        }
        if !(self.t_ref > 0.0 && self.t_ref.is_finite()) {
            return bad(format!("t_ref must be > 0, got {}", self.t_ref));
        }
        if !(self.ea_ion >= 0.0 && self.ea_ion.is_finite()) {
            return bad(format!("ea_ion must be >= 0, got {}", self.ea_ion));
        }
        if !(self.z >= 1.0 && self.z.is_finite()) {
            return bad(format!("z must be >= 1, got {}", self.z));
        }
        if !(self.c_dl >= 0.0 && self.c_dl.is_finite()) {
            return bad(format!("c_dl must be >= 0, got {}", self.c_dl));
        }
        if !(self.oxidation_rate >= 0.0 && self.oxidation_rate.is_finite()) {
            return bad(format!("oxidation_rate must be >= 0, got {}", self.oxidation_rate));
        }
        if !(self.x_ambient > 0.0 && self.x_ambient < 1.0) {
            return bad(format!("x_ambient must lie in (0, 1), got {}", self.x_ambient));
        }
        Ok(())
    }
}

/// R(T) = r_ref · exp[(Ea/k)(1/T − 1/t_ref)].
pub fn ionic_resistance(circuit: &CircuitParams, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(ThermoError::NonPositiveTemperature(temperature).into());
    }
    if temperature == circuit.t_ref || circuit.ea_ion == 0.0 {
        return Ok(circuit.r_ref);
    }
    Ok(circuit.r_ref * (circuit.ea_ion / BOLTZMANN_EV * (1.0 / temperature - 1.0 / circuit.t_ref)).exp())
}

/// V_oc = [μ_eq(x2) − μ_eq(x1)] / z, volts.
pub fn open_circuit_voltage(state: &CellState, model: &FreeEnergyModel, z: f64) -> Result<f64> {
    let potential = EquilibriumPotential::new(*model, state.temperature, 0.0)?;
    Ok((potential.mu(state.x2)? - potential.mu(state.x1)?) / z)
}

/// Faradaic gate current I_G = (V_G + V_oc)/R(T), amperes.
pub fn gate_current(state: &CellState, circuit: &CircuitParams, model: &FreeEnergyModel, v_gate: f64) -> Result<f64> {
    let v_oc = open_circuit_voltage(state, model, circuit.z)?;
    Ok((v_gate + v_oc) / ionic_resistance(circuit, state.temperature)?)
}

/// One recorded point of a cell trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSample {
    /// Seconds since the start of the segment.
    pub t: f64,
    pub v_gate: f64,
    /// Total measured gate current (faradaic plus double layer), amperes.
    pub i_gate: f64,
    /// Faradaic part alone, amperes.
    pub i_ionic: f64,
    pub q: f64,
    pub x1: f64,
    pub x2: f64,
    pub temperature: f64,
}

/// Integrator settings for the cell ODE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellOptions {
    pub ode: OdeOptions,
    /// Plateau-edge smoothing width passed to the equilibrium potential.
    pub smoothing: f64,
}

impl Default for CellOptions {
    fn default() -> Self {
        Self { ode: OdeOptions::default(), smoothing: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EquilibrateOutcome {
    /// |I_G| dropped to the tolerance after the given time.
    Converged { elapsed: f64 },
    /// `max_time` ran out first.
    TimedOut { current: f64 },
}

/// Stateful driver for one cell trajectory.
///
/// Holds the resolved thermodynamics for the current temperature and the
/// integrator's step-size memory, so consecutive segments on one simulator
/// reproduce a single long segment exactly when boundaries coincide.
#[derive(Debug, Clone)]
pub struct CellSimulator {
    model: FreeEnergyModel,
    circuit: CircuitParams,
    options: CellOptions,
    potential: EquilibriumPotential,
    resistance: f64,
    h_hint: Option<f64>,
    stats: OdeStats,
}

impl CellSimulator {
    pub fn new(model: FreeEnergyModel, circuit: CircuitParams, temperature: f64) -> Result<Self> {
        Self::with_options(model, circuit, temperature, CellOptions::default())
    }

    pub fn with_options(
        model: FreeEnergyModel,
        circuit: CircuitParams,
        temperature: f64,
        options: CellOptions,
    ) -> Result<Self> {
        model.validate()?;
        circuit.validate()?;
        let potential = EquilibriumPotential::new(model, temperature, options.smoothing)?;
        let resistance = ionic_resistance(&circuit, temperature)?;
        Ok(Self { model, circuit, options, potential, resistance, h_hint: None, stats: OdeStats::default() })
    }

    pub fn model(&self) -> &FreeEnergyModel {
        &self.model
    }

    pub fn circuit(&self) -> &CircuitParams {
        &self.circuit
    }

    pub fn potential(&self) -> &EquilibriumPotential {
        &self.potential
    }

    pub fn stats(&self) -> OdeStats {
        self.stats
    }

    fn sync_temperature(&mut self, temperature: f64) -> Result<()> {
        if temperature != self.potential.temperature() {
            self.potential = EquilibriumPotential::new(self.model, temperature, self.options.smoothing)?;
            self.resistance = ionic_resistance(&self.circuit, temperature)?;
            self.h_hint = None;
        }
        Ok(())
    }

    fn charge_per_fraction(&self, state: &CellState) -> f64 {
        self.circuit.z * ELEMENTARY_CHARGE * state.n1
    }

    /// (I_G, I_dl) at the given composition and double-layer voltage.
    fn currents(&self, x1: f64, x2: f64, v_dl: f64, v_gate: f64) -> std::result::Result<(f64, f64), ThermoError> {
        let v_oc = (self.potential.mu(x2)? - self.potential.mu(x1)?) / self.circuit.z;
        let drive = v_gate + v_oc;
        let i_ionic = drive / self.resistance;
        let i_dl = if self.circuit.c_dl > 0.0 { (drive - v_dl) / self.resistance } else { 0.0 };
        Ok((i_ionic, i_dl))
    }

    pub fn sample(&self, state: &CellState, v_gate: f64, t: f64) -> Result<CellSample> {
        let (i_ionic, i_dl) = self.currents(state.x1, state.x2, state.v_dl, v_gate)?;
        Ok(CellSample {
            t,
            v_gate,
            i_gate: i_ionic + i_dl,
            i_ionic,
            q: state.q_accum,
            x1: state.x1,
            x2: state.x2,
            temperature: state.temperature,
        })
    }

    fn advance(&mut self, state: &CellState, v_gate: f64, dt: f64) -> Result<CellState> {
        let qx = self.charge_per_fraction(state);
        let ze = self.circuit.z * ELEMENTARY_CHARGE;
        let (n1, n2) = (state.n1, state.n2);
        let k_ox = self.circuit.oxidation_rate;
        let x_amb = self.circuit.x_ambient;
        let c_dl = self.circuit.c_dl;
        let this = &*self;
        let rhs = |_t: f64, y: &[f64; 4]| -> Option<[f64; 4]> {
            let (i_ionic, i_dl) = this.currents(y[0], y[1], y[3], v_gate).ok()?;
            let mut dx1 = i_ionic / (ze * n1);
            if k_ox > 0.0 {
                dx1 -= k_ox * (y[0] - x_amb);
            }
            let dx2 = -i_ionic / (ze * n2);
            let dq = (i_ionic + i_dl) / qx;
            let dv = if c_dl > 0.0 { i_dl / c_dl } else { 0.0 };
            Some([dx1, dx2, dq, dv])
        };
        let admissible = |y: &[f64; 4]| y[0] > 0.0 && y[0] < 1.0 && y[1] > 0.0 && y[1] < 1.0;
        let y0 = [state.x1, state.x2, state.q_accum / qx, state.v_dl];
        let mut hint = self.h_hint;
        let mut stats = self.stats;
        let opts = self.options.ode;
        let mut result = ode::integrate(rhs, admissible, 0.0, y0, dt, &opts, &mut hint, &mut stats);
        if result.is_err() {
            // Explicit pair stalled (depleted reservoir or sharp corner): redo the
            // interval with the L-stable scheme.
            hint = None;
            result = ode::integrate_stiff(rhs, admissible, 0.0, y0, dt, &opts, &mut hint, &mut stats);
        }
        self.h_hint = hint;
        self.stats = stats;
        let y = result.map_err(stiffness)?;
        Ok(CellState { x1: y[0], x2: y[1], q_accum: y[2] * qx, v_dl: y[3], ..*state })
    }

    /// Advance by `dt` and report the end-of-step sample.
    pub fn step(&mut self, state: &CellState, v_gate: f64, dt: f64) -> Result<(CellState, CellSample)> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(CellError::InvalidArgument(format!("dt must be > 0, got {dt}")));
        }
        state.validate()?;
        self.sync_temperature(state.temperature)?;
        let next = self.advance(state, v_gate, dt)?;
        let sample = self.sample(&next, v_gate, dt)?;
        Ok((next, sample))
    }

    /// Hold `v_gate` for `duration`, sampling every `sample_interval`
    /// (both endpoints included, the last interval possibly shorter).
    pub fn run_segment(
        &mut self,
        state: &CellState,
        v_gate: f64,
        duration: f64,
        sample_interval: f64,
    ) -> Result<(CellState, Vec<CellSample>)> {
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(CellError::InvalidArgument(format!("duration must be > 0, got {duration}")));
        }
        if !(sample_interval > 0.0 && sample_interval.is_finite()) {
            return Err(CellError::InvalidArgument(format!("sample_interval must be > 0, got {sample_interval}")));
        }
        state.validate()?;
        self.sync_temperature(state.temperature)?;
        let times = sample_times(duration, sample_interval);
        let mut samples = Vec::with_capacity(times.len());
        let mut current = *state;
        samples.push(self.sample(&current, v_gate, 0.0)?);
        for pair in times.windows(2) {
            current = self.advance(&current, v_gate, pair[1] - pair[0])?;
            samples.push(self.sample(&current, v_gate, pair[1])?);
        }
        Ok((current, samples))
    }

    /// Short-circuit the cell until |I_G| ≤ `current_tolerance` or
    /// `max_time` elapses.
    pub fn equilibrate(
        &mut self,
        state: &CellState,
        current_tolerance: f64,
        max_time: f64,
    ) -> Result<(CellState, EquilibrateOutcome)> {
        if !(current_tolerance > 0.0) {
            return Err(CellError::InvalidArgument(format!("tolerance must be > 0, got {current_tolerance}")));
        }
        if !(max_time > 0.0) {
            return Err(CellError::InvalidArgument(format!("max_time must be > 0, got {max_time}")));
        }
        state.validate()?;
        self.sync_temperature(state.temperature)?;
        let mut current = *state;
        let mut elapsed = 0.0;
        let mut chunk = 1.0f64;
        loop {
            let i = self.sample(&current, 0.0, elapsed)?.i_gate;
            if i.abs() <= current_tolerance {
                return Ok((current, EquilibrateOutcome::Converged { elapsed }));
            }
            if elapsed >= max_time {
                return Ok((current, EquilibrateOutcome::TimedOut { current: i }));
            }
            let dt = chunk.min(max_time - elapsed);
            current = self.advance(&current, 0.0, dt)?;
            elapsed += dt;
            chunk *= 2.0;
        }
    }
}

fn stiffness(err: OdeError<4>) -> CellError {
    let y = err.state();
    CellError::StiffnessFailure { t: err.time(), x1: y[0], x2: y[1], reason: err.to_string() }
}

/// Sample offsets 0, Δ, 2Δ, … and the segment end; ⌈duration/Δ⌉ + 1 points.
pub fn sample_times(duration: f64, interval: f64) -> Vec<f64> {
    let ratio = duration / interval;
    // Tolerate round-off when the duration is an exact multiple.
    let n = (ratio - 1e-9 * ratio.max(1.0)).ceil().max(1.0) as usize;
    let mut times: Vec<f64> = (0..n).map(|i| i as f64 * interval).collect();
    times.push(duration);
    times
}

/// One-shot [`CellSimulator::step`].
pub fn step(
    state: &CellState,
    model: &FreeEnergyModel,
    circuit: &CircuitParams,
    v_gate: f64,
    dt: f64,
) -> Result<(CellState, CellSample)> {
    CellSimulator::new(*model, *circuit, state.temperature)?.step(state, v_gate, dt)
}

/// One-shot [`CellSimulator::run_segment`].
pub fn run_segment(
    state: &CellState,
    model: &FreeEnergyModel,
    circuit: &CircuitParams,
    v_gate: f64,
    duration: f64,
    sample_interval: f64,
) -> Result<(CellState, Vec<CellSample>)> {
    CellSimulator::new(*model, *circuit, state.temperature)?.run_segment(state, v_gate, duration, sample_interval)
}

/// One-shot [`CellSimulator::equilibrate`].
pub fn equilibrate(
    state: &CellState,
    model: &FreeEnergyModel,
    circuit: &CircuitParams,
    current_tolerance: f64,
    max_time: f64,
) -> Result<(CellState, EquilibrateOutcome)> {
    CellSimulator::new(*model, *circuit, state.temperature)?.equilibrate(state, current_tolerance, max_time)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::thermal_energy;
    use crate::thermo::common_tangent;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const T: f64 = 473.15;

    fn regular() -> FreeEnergyModel {
        FreeEnergyModel::regular_in_kt(0.0, 3.0, T)
    }

    fn circuit() -> CircuitParams {
        CircuitParams::new(1e9, T, 0.0)
    }

    #[test]
    fn resistance_examples() {
        let c = CircuitParams::new(1e9, 473.15, 0.0);
        assert_eq!(ionic_resistance(&c, 300.0).unwrap(), 1e9);
        let c12 = CircuitParams::new(1e9, 473.15, 1.2);
        assert_eq!(ionic_resistance(&c12, 473.15).unwrap(), 1e9);
        // closed-form exponent (1.2/k)(1/358.15 − 1/473.15) = 9.4504
        let exponent = 1.2 / BOLTZMANN_EV * (1.0 / 358.15 - 1.0 / 473.15);
        assert!((exponent - 9.4504).abs() < 1e-3);
        let r = ionic_resistance(&c12, 358.15).unwrap();
        assert_relative_eq!(r, 1e9 * exponent.exp(), max_relative = 1e-12);
        assert!((r / 1e9 - 12_714.0).abs() < 10.0);
        let c11 = CircuitParams::new(1e9, 473.15, 1.1);
        assert!((ionic_resistance(&c11, 358.15).unwrap() / 1e9 - 5_784.0).abs() < 5.0);
        assert!(ionic_resistance(&c12, 0.0).is_err());
        assert!(ionic_resistance(&c12, 400.0).unwrap() > ionic_resistance(&c12, 410.0).unwrap());
    }

    #[test]
    fn open_circuit_voltage_examples() {
        let s = CellState::new(0.4, 0.4, 1.0, 1.0, T);
        assert_eq!(open_circuit_voltage(&s, &regular(), 2.0).unwrap(), 0.0);
        let s = CellState::new(0.3, 0.6, 1.0, 1.0, T);
        assert_eq!(open_circuit_voltage(&s, &regular(), 2.0).unwrap(), 0.0);
        let e = std::f64::consts::E;
        let s = CellState::new(1.0 / (1.0 + e), e / (1.0 + e), 1.0, 1.0, 300.0);
        let v = open_circuit_voltage(&s, &FreeEnergyModel::ideal(0.0), 2.0).unwrap();
        assert_relative_eq!(v, thermal_energy(300.0), max_relative = 1e-12);
        assert!((v - 0.025852).abs() < 1e-6);
    }

    #[test]
    fn gate_current_examples() {
        let ideal = FreeEnergyModel::ideal(0.0);
        let s = CellState::new(0.4, 0.4, 1.0, 1.0, T);
        assert_eq!(gate_current(&s, &circuit(), &ideal, 0.0).unwrap(), 0.0);
        let c = CircuitParams::new(2e9, T, 0.0);
        let s = CellState::new(0.3, 0.6, 1.0, 1.0, T);
        assert_relative_eq!(gate_current(&s, &c, &regular(), 2.0).unwrap(), 1e-9, max_relative = 1e-15);
        // μ(x2) − μ(x1) = 0.2 eV with an ideal model: pick x1 = 0.5, solve x2.
        let kt = thermal_energy(T);
        let x2 = 1.0 / (1.0 + (-0.2 / kt).exp());
        let s = CellState::new(0.5, x2, 1.0, 1.0, T);
        let i = gate_current(&s, &circuit(), &ideal, 0.0).unwrap();
        assert_relative_eq!(i, 1e-10, max_relative = 1e-9);
    }

    #[test]
    fn gate_current_sign_follows_potential_difference() {
        let ideal = FreeEnergyModel::ideal(0.0);
        let s = CellState::new(0.2, 0.7, 1e15, 1e15, T);
        assert!(gate_current(&s, &circuit(), &ideal, 0.0).unwrap() > 0.0);
        let s = CellState::new(0.7, 0.2, 1e15, 1e15, T);
        assert!(gate_current(&s, &circuit(), &ideal, 0.0).unwrap() < 0.0);
    }

    #[test]
    fn equilibrium_is_fixed_point() {
        let s = CellState::new(0.4, 0.4, 1e15, 1e15, T);
        let (next, sample) = step(&s, &FreeEnergyModel::ideal(0.0), &circuit(), 0.0, 100.0).unwrap();
        assert_eq!(next, s);
        assert_eq!(sample.i_gate, 0.0);
    }

    #[test]
    fn constant_current_accumulates_rectangle_charge() {
        // Plateau keeps V_oc = 0, so 1 V across 1 GΩ drives exactly 1 nA.
        let s = CellState::new(0.4, 0.5, 1e15, 1e17, T);
        let (next, sample) = step(&s, &regular(), &circuit(), 1.0, 100.0).unwrap();
        assert_relative_eq!(sample.i_gate, 1e-9, max_relative = 1e-12);
        assert_relative_eq!(next.q_accum, 100e-9, max_relative = 1e-9);
    }

    #[test]
    fn invalid_arguments() {
        let s = CellState::new(0.4, 0.5, 1e15, 1e17, T);
        assert!(matches!(step(&s, &regular(), &circuit(), 1.0, 0.0), Err(CellError::InvalidArgument(_))));
        let bad = CellState::new(1.0, 0.5, 1e15, 1e17, T);
        assert!(matches!(step(&bad, &regular(), &circuit(), 1.0, 1.0), Err(CellError::InvalidState(_))));
        let mut c = circuit();
        c.z = 0.5;
        assert!(matches!(step(&s, &regular(), &c, 1.0, 1.0), Err(CellError::InvalidCircuit(_))));
        assert!(run_segment(&s, &regular(), &circuit(), 0.0, 10.0, 0.0).is_err());
    }

    #[test]
    fn run_segment_fencepost() {
        let s = CellState::new(0.4, 0.5, 1e15, 1e17, T);
        let (_, samples) = run_segment(&s, &regular(), &circuit(), 0.5, 10.0, 1.0).unwrap();
        assert_eq!(samples.len(), 11);
        assert_eq!(samples[0].t, 0.0);
        assert_eq!(samples[10].t, 10.0);
        let (_, samples) = run_segment(&s, &regular(), &circuit(), 0.5, 10.5, 1.0).unwrap();
        assert_eq!(samples.len(), 12);
        assert_eq!(sample_times(0.3, 0.1).len(), 4);
    }

    #[test]
    fn current_reverses_when_drive_is_released() {
        let model = regular();
        let c = CircuitParams::new(2e7, T, 1.2);
        let mut sim = CellSimulator::new(model, c, T).unwrap();
        let s = CellState::new(0.24, 0.5, 5e15, 5e17, T);
        let (s, drive) = sim.run_segment(&s, -2.0, 3600.0, 60.0).unwrap();
        assert!(s.x1 < common_tangent(&model, T).unwrap().unwrap().x_alpha);
        let (_, hold) = sim.run_segment(&s, 0.0, 3600.0, 60.0).unwrap();
        assert!(drive.last().unwrap().i_gate < 0.0);
        assert!(hold[0].i_gate > 0.0);
        assert_eq!(hold[0].q, drive.last().unwrap().q);
    }

    #[test]
    fn split_segments_match_single_segment() {
        let model = FreeEnergyModel::ideal(0.0);
        let c = CircuitParams::new(2e7, T, 1.2);
        let s0 = CellState::new(0.2, 0.6, 5e15, 2e16, T);
        let mut a = CellSimulator::new(model, c, T).unwrap();
        let (whole, _) = a.run_segment(&s0, 0.0, 2e5, 1e3).unwrap();
        let mut b = CellSimulator::new(model, c, T).unwrap();
        let (half, _) = b.run_segment(&s0, 0.0, 1e5, 1e3).unwrap();
        let (split, _) = b.run_segment(&half, 0.0, 1e5, 1e3).unwrap();
        assert_relative_eq!(whole.x1, split.x1, max_relative = 1e-8);
        assert_relative_eq!(whole.x2, split.x2, max_relative = 1e-8);
        // Fresh simulators for each half still agree within the local error bound.
        let (half, _) = run_segment(&s0, &model, &c, 0.0, 1e5, 1e3).unwrap();
        let (split, _) = run_segment(&half, &model, &c, 0.0, 1e5, 1e3).unwrap();
        assert_relative_eq!(whole.x1, split.x1, max_relative = 1e-8);
        assert_relative_eq!(whole.x2, split.x2, max_relative = 1e-8);
    }

    #[test]
    fn equilibrate_ideal_reaches_weighted_mean() {
        let s = CellState::new(0.3, 0.5, 1e15, 1e15, T);
        let c = CircuitParams::new(1e7, T, 0.0);
        // initial |I_G| ≈ 1e-9 A; 1e-18 A is nine decades down
        let (out, outcome) = equilibrate(&s, &FreeEnergyModel::ideal(0.0), &c, 1e-18, 1e7).unwrap();
        assert!(matches!(outcome, EquilibrateOutcome::Converged { .. }), "{outcome:?}");
        assert!((out.x1 - 0.4).abs() < 1e-9 && (out.x2 - 0.4).abs() < 1e-9);
    }

    #[test]
    fn equilibrate_inside_gap_is_immediate() {
        let s = CellState::new(0.3, 0.6, 1e15, 1e15, T);
        let (out, outcome) = equilibrate(&s, &regular(), &circuit(), 1e-18, 1e5).unwrap();
        assert_eq!(outcome, EquilibrateOutcome::Converged { elapsed: 0.0 });
        assert_eq!(out, s);
    }

    #[test]
    fn equilibrate_outside_gap_relaxes_to_binodal() {
        let model = regular();
        let gap = common_tangent(&model, T).unwrap().unwrap();
        let s = CellState::new(0.02, 0.5, 1e15, 1e18, T);
        let c = CircuitParams::new(1e7, T, 0.0);
        let mut sim = CellSimulator::new(model, c, T).unwrap();
        let (out, outcome) = sim.equilibrate(&s, 1e-15, 1e9).unwrap();
        assert!(matches!(outcome, EquilibrateOutcome::Converged { .. }), "{outcome:?}");
        assert!((out.x1 - gap.x_alpha).abs() < 1e-6, "x1 = {}", out.x1);
        assert!((out.x2 - 0.5).abs() < 1e-4);
        // exit condition: μ_eq(x1) = μ_eq(x2) up to the current tolerance
        let pot = sim.potential();
        let dmu = pot.mu(out.x2).unwrap() - pot.mu(out.x1).unwrap();
        assert!(dmu.abs() / c.z / c.r_ref <= 1e-15);
        assert!(out.x1 < gap.x_alpha);
    }

    #[test]
    fn timed_out_equilibration_reports_current() {
        let s = CellState::new(0.1, 0.9, 1e15, 1e15, T);
        let c = CircuitParams::new(1e12, T, 0.0);
        let (_, outcome) = equilibrate(&s, &FreeEnergyModel::ideal(0.0), &c, 1e-30, 10.0).unwrap();
        assert!(matches!(outcome, EquilibrateOutcome::TimedOut { current } if current > 0.0));
    }

    #[test]
    fn double_layer_adds_transient_but_not_ions() {
        let model = regular();
        let mut c = CircuitParams::new(1e9, T, 0.0);
        c.c_dl = 1e-8; // τ = 10 s
        let s = CellState::new(0.4, 0.5, 1e15, 1e17, T);
        let mut sim = CellSimulator::new(model, c, T).unwrap();
        let (after, samples) = sim.run_segment(&s, 1.0, 100.0, 1.0).unwrap();
        // at switch-on the capacitor branch doubles the current
        assert_relative_eq!(samples[0].i_gate, 2e-9, max_relative = 1e-12);
        assert!((samples[100].i_gate - 1e-9).abs() < 1e-9 * 1e-4);
        assert_relative_eq!(after.v_dl, 1.0 - (-10.0f64).exp(), max_relative = 1e-7);
        // ions moved only by the faradaic part
        let dx = 100e-9 / (c.z * ELEMENTARY_CHARGE * s.n1);
        assert_relative_eq!(after.x1 - s.x1, dx, max_relative = 1e-8);
        // q includes the capacitive charge C·V
        assert_relative_eq!(after.q_accum, 100e-9 + 1e-8 * after.v_dl, max_relative = 1e-7);
        // released: the double layer discharges with reversed sign
        let (_, hold) = sim.run_segment(&after, 0.0, 10.0, 1.0).unwrap();
        assert!(hold[0].i_gate < 0.0);
    }

    #[test]
    fn oxidation_leak_pulls_toward_ambient() {
        let model = regular();
        let mut c = circuit();
        c.oxidation_rate = 1e-4;
        c.x_ambient = 0.2;
        let s = CellState::new(0.6, 0.5, 1e15, 1e18, T);
        let (after, _) = run_segment(&s, &model, &c, 0.0, 1e3, 100.0).unwrap();
        // inside the gap nothing counteracts the leak
        let expected = 0.2 + 0.4 * (-0.1f64).exp();
        assert_relative_eq!(after.x1, expected, max_relative = 1e-8);
        assert_eq!(after.q_accum, 0.0);
    }

    #[test]
    fn lyapunov_free_energy_decreases() {
        for model in [regular(), FreeEnergyModel::ideal(0.01)] {
            let c = CircuitParams::new(1e7, T, 0.0);
            let mut sim = CellSimulator::new(model, c, T).unwrap();
            let s = CellState::new(0.02, 0.8, 2e15, 3e15, T);
            let (_, samples) = sim.run_segment(&s, 0.0, 5e5, 500.0).unwrap();
            let pot = sim.potential().clone();
            let energy = |x1: f64, x2: f64| s.n1 * pot.free_energy(x1).unwrap() + s.n2 * pot.free_energy(x2).unwrap();
            for w in samples.windows(2) {
                let (e0, e1) = (energy(w[0].x1, w[0].x2), energy(w[1].x1, w[1].x2));
                assert!(e1 <= e0 + 1e-12 * e0.abs(), "{e0} -> {e1}");
            }
        }
    }

    #[test]
    fn drive_dynamics_rescale_with_resistance() {
        // On the plateau the current is V/R(T) exactly, so a run at a colder
        // temperature is a time-stretched copy of the hot run.
        let model = FreeEnergyModel::regular_in_kt(0.0, 3.0, 473.15);
        let c = CircuitParams::new(2e7, 473.15, 1.2);
        let hot = CellState::new(0.3, 0.5, 5e15, 5e17, 473.15);
        let cold = CellState { temperature: 423.15, ..hot };
        let ratio = ionic_resistance(&c, 423.15).unwrap() / ionic_resistance(&c, 473.15).unwrap();
        let (a, _) = run_segment(&hot, &model, &c, 2.0, 600.0, 600.0).unwrap();
        let (b, _) = run_segment(&cold, &model, &c, 2.0, 600.0 * ratio, 600.0 * ratio).unwrap();
        assert_relative_eq!(a.x1, b.x1, max_relative = 1e-6);
        assert_relative_eq!(a.x2, b.x2, max_relative = 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn conservation_and_charge_bookkeeping(
            x1 in 0.1f64..0.9,
            x2 in 0.1f64..0.9,
            n_ratio in 1.0f64..100.0,
            omega_kt in 0.0f64..4.0,
            v_gate in -0.3f64..0.3,
            seed_dt in 0.1f64..10.0,
        ) {
            let model = FreeEnergyModel::regular_in_kt(0.0, omega_kt, T);
            let n1 = 1e15;
            let n2 = n1 * n_ratio;
            let c = CircuitParams::new(1e9, T, 0.0);
            let mut sim = CellSimulator::new(model, c, T).unwrap();
            let s0 = CellState::new(x1, x2, n1, n2, T);
            let mut s = s0;
            for _ in 0..10_000 {
                match sim.step(&s, v_gate, seed_dt) {
                    Ok((next, _)) => s = next,
                    Err(e) => return Err(TestCaseError::fail(e.to_string())),
                }
            }
            let drift = (s.total_ions() - s0.total_ions()).abs() / (n1 + n2);
            prop_assert!(drift <= 1e-9, "drift {}", drift);
            let expected_q = c.z * ELEMENTARY_CHARGE * n1 * (s.x1 - s0.x1);
            if expected_q.abs() > 1e-12 * c.z * ELEMENTARY_CHARGE * n1 {
                prop_assert!((s.q_accum - expected_q).abs() <= 1e-6 * expected_q.abs());
            }
        }

        #[test]
        fn states_inside_gap_are_fixed_points(x1 in 0.08f64..0.92, x2 in 0.08f64..0.92) {
            let s = CellState::new(x1, x2, 1e15, 1e16, T);
            let (next, sample) = step(&s, &regular(), &circuit(), 0.0, 1e6).unwrap();
            prop_assert_eq!(next, s);
            prop_assert_eq!(sample.i_gate, 0.0);
        }

        #[test]
        fn ideal_cells_converge_to_weighted_mean(x1 in 0.05f64..0.95, x2 in 0.05f64..0.95, n_ratio in 0.5f64..5.0) {
            let n1 = 1e15;
            let s = CellState::new(x1, x2, n1, n1 * n_ratio, T);
            let c = CircuitParams::new(1e7, T, 0.0);
            let (out, _) = equilibrate(&s, &FreeEnergyModel::ideal(0.0), &c, 1e-18, 1e8).unwrap();
            let mean = s.total_ions() / (s.n1 + s.n2);
            prop_assert!((out.x1 - mean).abs() < 1e-8 && (out.x2 - mean).abs() < 1e-8);
        }
    }
}
