//! Experiment scripts and their executor.
//!
//! A protocol is a list of [`Step`]s run in order against one
//! [`CellSimulator`]. The executor concatenates segment samples into a
//! single [`RunRecord`] with a continuous clock and charge, and collects
//! emulated conductance reads in a separate list.
//!
//! Reads occupy time. The read window is split into one sub-step per
//! current sample; the gate sits at 0 V throughout (non-perturbative) or
//! follows the ±amplitude waveform (perturbative).

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cell::{CellError, CellOptions, CellSample, CellSimulator, CellState, CircuitParams};
use crate::conductance::{self, ConductanceError, ConductanceModel, ReadConfig};
use crate::thermo::FreeEnergyModel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("step {index}: {reason}")]
    InvalidStep { index: usize, reason: String },
    #[error("step {index}: {source}")]
    Simulation {
        index: usize,
        #[source]
        source: CellError,
    },
    #[error("step {index}: {source}")]
    Conductance {
        index: usize,
        #[source]
        source: ConductanceError,
    },
    #[error("invalid sampling: {0}")]
    InvalidSampling(String),
    #[error(transparent)]
    Setup(#[from] CellError),
}

impl ProtocolError {
    /// Index of the failing step, when the error is tied to one.
    pub fn step_index(&self) -> Option<usize> {
        match self {
            Self::InvalidStep { index, .. } | Self::Simulation { index, .. } | Self::Conductance { index, .. } => {
                Some(*index)
            }
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    SetTemperature {
        kelvin: f64,
    },
    Drive {
        v_gate: f64,
        duration: f64,
    },
    /// Gate shorted to the channel (0 V).
    Hold {
        duration: f64,
    },
    /// Conductance read; `config` overrides the sampling block's default.
    Read {
        #[serde(default)]
        config: Option<ReadConfig>,
    },
    /// `count` × (drive, optional 0 V rest, optional read).
    PulseTrain {
        count: u32,
        v_gate: f64,
        pulse_duration: f64,
        #[serde(default)]
        rest_duration: f64,
        #[serde(default = "default_true")]
        read_between: bool,
    },
    /// Start a new charge origin (q = 0).
    ResetCharge,
}

impl Step {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} must be > 0, got {v}"))
            }
        };
        let finite = |name: &str, v: f64| if v.is_finite() { Ok(()) } else { Err(format!("{name} must be finite")) };
        match *self {
            Step::SetTemperature { kelvin } => positive("kelvin", kelvin),
            Step::Drive { v_gate, duration } => {
                finite("v_gate", v_gate)?;
                positive("duration", duration)
            }
            Step::Hold { duration } => positive("duration", duration),
            Step::Read { config } => match config {
                Some(c) => c.validate().map_err(|e| e.to_string()),
                None => Ok(()),
            },
            Step::PulseTrain { count, v_gate, pulse_duration, rest_duration, .. } => {
                if count == 0 {
                    return Err("count must be >= 1".into());
                }
                finite("v_gate", v_gate)?;
                positive("pulse_duration", pulse_duration)?;
                if !(rest_duration >= 0.0 && rest_duration.is_finite()) {
                    return Err(format!("rest_duration must be >= 0, got {rest_duration}"));
                }
                Ok(())
            }
            Step::ResetCharge => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sampling {
    /// Seconds between recorded samples within a drive or hold.
    pub interval: f64,
    /// Default read settings.
    pub read: ReadConfig,
    /// Let the read bias drive ionic current.
    pub perturbative_reads: bool,
}

impl Default for Sampling {
    fn default() -> Self {
        Self { interval: 10.0, read: ReadConfig::default(), perturbative_reads: false }
    }
}

impl Sampling {
    pub fn validate(&self) -> Result<()> {
        if !(self.interval > 0.0 && self.interval.is_finite()) {
            return Err(ProtocolError::InvalidSampling(format!("interval must be > 0, got {}", self.interval)));
        }
        self.read.validate().map_err(|e| ProtocolError::InvalidSampling(e.to_string()))
    }
}

/// Everything needed to run one protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub name: Option<String>,
    pub steps: Vec<Step>,
    pub model: FreeEnergyModel,
    pub circuit: CircuitParams,
    pub conductance: ConductanceModel,
    pub initial: CellState,
    pub sampling: Sampling,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordSample {
    pub t: f64,
    pub v_gate: f64,
    pub i_gate: f64,
    pub q: f64,
    /// Noise-free channel conductance.
    pub g: f64,
    pub x1: f64,
    pub x2: f64,
    pub temperature: f64,
    /// Index of the protocol step that produced the sample.
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReadEvent {
    /// End of the read window.
    pub t: f64,
    /// Emulated (noisy) conductance.
    pub g: f64,
    /// Noise-free conductance at the end of the window.
    pub g_true: f64,
    pub q: f64,
    pub temperature: f64,
    pub step: usize,
    /// Voltage of the most recent nonzero drive before the read.
    pub last_drive: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub samples: Vec<RecordSample>,
    pub reads: Vec<ReadEvent>,
    pub final_state: CellState,
}

impl RunRecord {
    /// `(t, i_gate)` pairs, for [`crate::analysis::integrate_charge`].
    pub fn current_series(&self) -> Vec<(f64, f64)> {
        self.samples.iter().map(|s| (s.t, s.i_gate)).collect()
    }

    /// Samples produced by one protocol step.
    pub fn step_samples(&self, step: usize) -> impl Iterator<Item = &RecordSample> {
        self.samples.iter().filter(move |s| s.step == step)
    }

    /// `t_s,v_gate_V,i_gate_A,q_C,g_S,x1,x2,T_K`, shortest round-trip
    /// scientific notation.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "t_s,v_gate_V,i_gate_A,q_C,g_S,x1,x2,T_K")?;
        for s in &self.samples {
            writeln!(
                out,
                "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                s.t, s.v_gate, s.i_gate, s.q, s.g, s.x1, s.x2, s.temperature
            )?;
        }
        Ok(())
    }

    /// `t_s,g_S,g_true_S,q_C,T_K,step,last_drive_V`.
    pub fn write_reads_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "t_s,g_S,g_true_S,q_C,T_K,step,last_drive_V")?;
        for r in &self.reads {
            writeln!(
                out,
                "{:e},{:e},{:e},{:e},{:e},{},{:e}",
                r.t, r.g, r.g_true, r.q, r.temperature, r.step, r.last_drive
            )?;
        }
        Ok(())
    }
}

/// Per-read noise seed from the run seed.
pub fn read_seed(run_seed: u64, read_index: u64) -> u64 {
    // splitmix64 finaliser over the combined input
    let mut z = run_seed ^ read_index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Executor<'a> {
    sim: CellSimulator,
    exp: &'a Experiment,
    state: CellState,
    clock: f64,
    last_drive: f64,
    record: RunRecord,
}

impl Executor<'_> {
    fn push(&mut self, s: &CellSample, step: usize, skip_first: bool) -> Result<()> {
        let t = self.clock + s.t;
        if skip_first && self.record.samples.last().is_some_and(|last| t <= last.t) {
            return Ok(());
        }
        let g = conductance::conductance(s.x1, s.temperature, &self.exp.conductance)
            .map_err(|source| ProtocolError::Conductance { index: step, source })?;
        self.record.samples.push(RecordSample {
            t,
            v_gate: s.v_gate,
            i_gate: s.i_gate,
            q: s.q,
            g,
            x1: s.x1,
            x2: s.x2,
            temperature: s.temperature,
            step,
        });
        Ok(())
    }

    fn segment(&mut self, index: usize, v_gate: f64, duration: f64) -> Result<()> {
        let sim_err = |source| ProtocolError::Simulation { index, source };
        let (end, samples) =
            self.sim.run_segment(&self.state, v_gate, duration, self.exp.sampling.interval).map_err(sim_err)?;
        for s in &samples {
            self.push(s, index, true)?;
        }
        self.state = end;
        self.clock += duration;
        if v_gate != 0.0 {
            self.last_drive = v_gate;
        }
        Ok(())
    }

    fn read(&mut self, index: usize, config: Option<ReadConfig>) -> Result<()> {
        let mut cfg = config.unwrap_or(self.exp.sampling.read);
        cfg.seed = read_seed(self.exp.seed, self.record.reads.len() as u64);
        let cond_err = |source| ProtocolError::Conductance { index, source };
        cfg.validate().map_err(cond_err)?;
        let n = cfg.sample_count();
        let dt = cfg.window() / n as f64;
        let mut gs = Vec::with_capacity(n);
        let mut elapsed = 0.0;
        for k in 0..n {
            let bias = if self.exp.sampling.perturbative_reads { cfg.bias(k) } else { 0.0 };
            let (next, mut sample) =
                self.sim.step(&self.state, bias, dt).map_err(|source| ProtocolError::Simulation { index, source })?;
            elapsed += dt;
            sample.t = elapsed;
            self.push(&sample, index, false)?;
            self.state = next;
            gs.push(self.record.samples.last().map_or(0.0, |s| s.g));
        }
        self.clock += elapsed;
        let g = conductance::emulate_read_series(&gs, &cfg).map_err(cond_err)?;
        let last = self.record.samples.last().copied().expect("read pushed samples");
        self.record.reads.push(ReadEvent {
            t: last.t,
            g,
            g_true: last.g,
            q: last.q,
            temperature: last.temperature,
            step: index,
            last_drive: self.last_drive,
        });
        Ok(())
    }
}

/// Run the experiment's protocol from its initial state.
pub fn execute(exp: &Experiment) -> Result<RunRecord> {
    exp.sampling.validate()?;
    exp.initial.validate()?;
    for (index, step) in exp.steps.iter().enumerate() {
        step.validate().map_err(|reason| ProtocolError::InvalidStep { index, reason })?;
    }
    let sim = CellSimulator::with_options(exp.model, exp.circuit, exp.initial.temperature, CellOptions::default())?;
    let mut ex = Executor {
        sim,
        exp,
        state: exp.initial,
        clock: 0.0,
        last_drive: 0.0,
        record: RunRecord { samples: Vec::new(), reads: Vec::new(), final_state: exp.initial },
    };
    let first = ex.sim.sample(&ex.state, 0.0, 0.0)?;
    ex.push(&first, 0, false)?;
    for (index, step) in exp.steps.iter().enumerate() {
        match *step {
            Step::SetTemperature { kelvin } => ex.state.temperature = kelvin,
            Step::Drive { v_gate, duration } => ex.segment(index, v_gate, duration)?,
            Step::Hold { duration } => ex.segment(index, 0.0, duration)?,
            Step::Read { config } => ex.read(index, config)?,
            Step::PulseTrain { count, v_gate, pulse_duration, rest_duration, read_between } => {
                for _ in 0..count {
                    ex.segment(index, v_gate, pulse_duration)?;
                    if rest_duration > 0.0 {
                        ex.segment(index, 0.0, rest_duration)?;
                    }
                    if read_between {
                        ex.read(index, None)?;
                    }
                }
            }
            Step::ResetCharge => ex.state.q_accum = 0.0,
        }
    }
    ex.record.final_state = ex.state;
    Ok(ex.record)
}
