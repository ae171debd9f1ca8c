//! Channel conductance as a function of ion state and temperature, and
//! emulation of the alternating-polarity read.
//!
//! ```text
//! G = aspect · g_ref · exp[−(Ea_el/k)(1/T − 1/T_ref)] · (c0 + c1·x̄₁)
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::BOLTZMANN_EV;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConductanceError {
    #[error("composition {0} outside [0, 1]")]
    CompositionOutOfRange(f64),
    #[error("temperature must be > 0 K, got {0}")]
    NonPositiveTemperature(f64),
    #[error("invalid conductance model: {0}")]
    InvalidModel(String),
    #[error("invalid read configuration: {0}")]
    InvalidRead(String),
}

pub type Result<T> = std::result::Result<T, ConductanceError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConductanceModel {
    /// Siemens, per unit aspect ratio, at `t_ref_el`.
    pub g_ref: f64,
    pub t_ref_el: f64,
    /// Electronic activation energy, eV.
    pub ea_el: f64,
    pub c0: f64,
    pub c1: f64,
    /// Width over length.
    pub aspect: f64,
}

impl Default for ConductanceModel {
    /// 16:1 channel reading 100 μS at x̄₁ = 0.5 and 473.15 K, dropping
    /// tenfold at 313.15 K.
    fn default() -> Self {
        Self {
            g_ref: 6.25e-6,
            t_ref_el: 473.15,
            ea_el: activation_for_ratio(0.1, 473.15, 313.15),
            c0: 0.2,
            c1: 1.6,
            aspect: 16.0,
        }
    }
}

impl ConductanceModel {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ConductanceError::InvalidModel(msg));
        if !(self.g_ref > 0.0 && self.g_ref.is_finite()) {
            return bad(format!("g_ref must be > 0, got {}", self.g_ref));
        }
        if !(self.c1 > 0.0 && self.c1.is_finite()) {
            return bad(format!("c1 must be > 0, got {}", self.c1));
        }
        if !(self.c0 >= 0.0 && self.c0.is_finite()) {
            return bad(format!("c0 must be >= 0, got {}", self.c0));
        }
        if !(self.aspect > 0.0 && self.aspect.is_finite()) {
            return bad(format!("aspect must be > 0, got {}", self.aspect));
        }
        if !(self.t_ref_el > 0.0 && self.t_ref_el.is_finite()) {
            return bad(format!("t_ref_el must be > 0, got {}", self.t_ref_el));
        }
        if !self.ea_el.is_finite() {
            return bad(format!("ea_el must be finite, got {}", self.ea_el));
        }
        Ok(())
    }

    /// Temperature factor exp[−(Ea_el/k)(1/T − 1/T_ref)].
    pub fn thermal_factor(&self, temperature: f64) -> Result<f64> {
        if !(temperature > 0.0) {
            return Err(ConductanceError::NonPositiveTemperature(temperature));
        }
        Ok((-(self.ea_el / BOLTZMANN_EV) * (1.0 / temperature - 1.0 / self.t_ref_el)).exp())
    }
}

/// Conductance in siemens of a channel with mean ion fraction `x1`.
pub fn conductance(x1: f64, temperature: f64, model: &ConductanceModel) -> Result<f64> {
    if !(0.0..=1.0).contains(&x1) {
        return Err(ConductanceError::CompositionOutOfRange(x1));
    }
    let f = model.thermal_factor(temperature)?;
    Ok(model.aspect * model.g_ref * f * (model.c0 + model.c1 * x1))
}

/// Activation energy giving G(t_b)/G(t_a) = `ratio`.
pub fn activation_for_ratio(ratio: f64, t_a: f64, t_b: f64) -> f64 {
    -BOLTZMANN_EV * ratio.ln() / (1.0 / t_b - 1.0 / t_a)
}

/// Alternating ±`amplitude` read averaged over `n_cycles` full periods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReadConfig {
    /// Volts.
    pub amplitude: f64,
    /// Seconds spent at each polarity.
    pub half_period: f64,
    pub n_cycles: u32,
    /// Current samples taken during each half period.
    pub samples_per_half_period: u32,
    /// Relative standard deviation of each current sample.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ReadConfig {
    fn default() -> Self {
        Self {
            amplitude: 0.01,
            half_period: 30.0,
            n_cycles: 1,
            samples_per_half_period: 30,
            noise_sigma: 0.002,
            seed: 0,
        }
    }
}

impl ReadConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ConductanceError::InvalidRead(msg));
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return bad(format!("amplitude must be > 0, got {}", self.amplitude));
        }
        if !(self.half_period > 0.0 && self.half_period.is_finite()) {
            return bad(format!("half_period must be > 0, got {}", self.half_period));
        }
        if self.n_cycles == 0 {
            return bad("n_cycles must be >= 1".into());
        }
        if self.samples_per_half_period == 0 {
            return bad("samples_per_half_period must be >= 1".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        Ok(())
    }

    /// Length of the averaging window, seconds.
    pub fn window(&self) -> f64 {
        2.0 * self.half_period * f64::from(self.n_cycles)
    }

    pub fn sample_count(&self) -> usize {
        2 * self.n_cycles as usize * self.samples_per_half_period as usize
    }

    /// Standard deviation of one averaged read relative to G.
    pub fn relative_noise(&self) -> f64 {
        self.noise_sigma / (self.sample_count() as f64).sqrt()
    }

    /// Applied bias for sample `k`: positive first, alternating each half period.
    pub fn bias(&self, k: usize) -> f64 {
        if (k / self.samples_per_half_period as usize).is_multiple_of(2) {
            self.amplitude
        } else {
            -self.amplitude
        }
    }

    /// Sample times within the window: ends of equal sub-intervals.
    pub fn sample_offsets(&self) -> Vec<f64> {
        let n = self.sample_count();
        let dt = self.window() / n as f64;
        (1..=n).map(|k| k as f64 * dt).collect()
    }
}

/// Read of a static channel conductance `state_g`.
pub fn emulate_read(state_g: f64, cfg: &ReadConfig) -> Result<f64> {
    cfg.validate()?;
    if cfg.noise_sigma == 0.0 {
        return Ok(state_g);
    }
    emulate_read_series(&vec![state_g; cfg.sample_count()], cfg)
}

/// Read over a window where the true conductance varies sample by sample
/// (`gs.len()` must equal `cfg.sample_count()`).
pub fn emulate_read_series(gs: &[f64], cfg: &ReadConfig) -> Result<f64> {
    cfg.validate()?;
    if gs.len() != cfg.sample_count() {
        return Err(ConductanceError::InvalidRead(format!(
            "expected {} conductance samples, got {}",
            cfg.sample_count(),
            gs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sum = 0.0;
    for (k, &g) in gs.iter().enumerate() {
        let noise: f64 = StandardNormal.sample(&mut rng);
        let current = g * cfg.bias(k) * (1.0 + cfg.noise_sigma * noise);
        sum += current.abs();
    }
    Ok(sum / (gs.len() as f64 * cfg.amplitude))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn default_reads_100_us_at_mid_range() {
        let g = conductance(0.5, 473.15, &ConductanceModel::default()).unwrap();
        assert_relative_eq!(g, 1e-4, max_relative = 1e-12);
    }

    #[test]
    fn zero_offset_at_empty_channel() {
        let m = ConductanceModel { c0: 0.0, ..ConductanceModel::default() };
        assert_eq!(conductance(0.0, 400.0, &m).unwrap(), 0.0);
    }

    #[test]
    fn tenfold_drop_activation() {
        // exp(−(Ea/k)(1/313.15 − 1/473.15)) = 0.1
        let oracle = BOLTZMANN_EV * 10f64.ln() / (1.0 / 313.15 - 1.0 / 473.15);
        let ea = activation_for_ratio(0.1, 473.15, 313.15);
        assert_relative_eq!(ea, oracle, max_relative = 1e-14);
        assert!((ea - 0.184).abs() < 0.184 * 0.01);
        let m = ConductanceModel::default();
        let r = conductance(0.4, 313.15, &m).unwrap() / conductance(0.4, 473.15, &m).unwrap();
        assert_relative_eq!(r, 0.1, max_relative = 1e-12);
    }

    #[test]
    fn domain_errors() {
        let m = ConductanceModel::default();
        assert!(matches!(conductance(1.2, 300.0, &m), Err(ConductanceError::CompositionOutOfRange(_))));
        assert!(matches!(conductance(0.5, 0.0, &m), Err(ConductanceError::NonPositiveTemperature(_))));
        assert!(ConductanceModel { c1: 0.0, ..m }.validate().is_err());
        assert!(ConductanceModel { aspect: -1.0, ..m }.validate().is_err());
    }

    #[test]
    fn noiseless_read_is_exact() {
        let cfg = ReadConfig { noise_sigma: 0.0, ..ReadConfig::default() };
        assert_eq!(emulate_read(1e-4, &cfg).unwrap(), 1e-4);
    }

    #[test]
    fn read_window_length() {
        let cfg = ReadConfig { amplitude: 0.01, half_period: 30.0, n_cycles: 2, ..ReadConfig::default() };
        assert_eq!(cfg.window(), 120.0);
        assert_eq!(cfg.sample_count(), 120);
        let offs = cfg.sample_offsets();
        assert_eq!(offs[0], 1.0);
        assert_eq!(*offs.last().unwrap(), 120.0);
    }

    #[test]
    fn bias_alternates_per_half_period() {
        let cfg = ReadConfig { samples_per_half_period: 3, n_cycles: 2, ..ReadConfig::default() };
        let signs: Vec<f64> = (0..cfg.sample_count()).map(|k| cfg.bias(k).signum()).collect();
        assert_eq!(signs, [1.0, 1.0, 1.0, -1.0, -1.0, -1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn noisy_read_within_standard_error() {
        let cfg = ReadConfig { noise_sigma: 0.01, n_cycles: 2, seed: 7, ..ReadConfig::default() };
        let g = emulate_read(1e-4, &cfg).unwrap();
        let se = 0.01 / (cfg.sample_count() as f64).sqrt();
        assert!((g / 1e-4 - 1.0).abs() < 3.0 * se, "{g}");
    }

    #[test]
    fn read_scatter_matches_relative_noise() {
        let base = ReadConfig { noise_sigma: 0.01, ..ReadConfig::default() };
        let reads: Vec<f64> =
            (0..400).map(|s| emulate_read(1e-4, &ReadConfig { seed: s, ..base }).unwrap() / 1e-4).collect();
        let mean = reads.iter().sum::<f64>() / 400.0;
        let sd = (reads.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 399.0).sqrt();
        assert!((sd / base.relative_noise() - 1.0).abs() < 0.15, "{sd}");
    }

    #[test]
    fn noisy_read_deterministic_per_seed() {
        let cfg = ReadConfig { noise_sigma: 0.05, seed: 11, ..ReadConfig::default() };
        assert_eq!(emulate_read(2e-5, &cfg).unwrap(), emulate_read(2e-5, &cfg).unwrap());
        let other = ReadConfig { seed: 12, ..cfg };
        assert_ne!(emulate_read(2e-5, &cfg).unwrap(), emulate_read(2e-5, &other).unwrap());
    }

    #[test]
    fn bad_read_config_rejected() {
        let cfg = ReadConfig { amplitude: 0.0, ..ReadConfig::default() };
        assert!(matches!(emulate_read(1e-4, &cfg), Err(ConductanceError::InvalidRead(_))));
        let cfg = ReadConfig::default();
        assert!(emulate_read_series(&[1e-4; 3], &cfg).is_err());
    }

    #[test]
    fn read_config_rejects_unknown_keys() {
        let err = serde_json::from_str::<ReadConfig>(r#"{"amplitude": 0.01, "bogus": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"));
        let cfg: ReadConfig = serde_json::from_str(r#"{"n_cycles": 2}"#).unwrap();
        assert_eq!(cfg.n_cycles, 2);
        assert_eq!(cfg.amplitude, 0.01);
    }

    proptest! {
        #[test]
        fn strictly_increasing_in_x(a in 0.0f64..1.0, b in 0.0f64..1.0, t in 250.0f64..600.0) {
            prop_assume!(a < b);
            let m = ConductanceModel::default();
            prop_assert!(conductance(a, t, &m).unwrap() < conductance(b, t, &m).unwrap());
        }

        #[test]
        fn cross_temperature_map_is_proportional(xs in prop::collection::vec(0.0f64..1.0, 2..20)) {
            // zero-intercept line through (G(T_a), G(T_b)) pairs
            let m = ConductanceModel::default();
            let k = m.thermal_factor(313.15).unwrap() / m.thermal_factor(473.15).unwrap();
            for x in xs {
                let ga = conductance(x, 473.15, &m).unwrap();
                let gb = conductance(x, 313.15, &m).unwrap();
                prop_assert!((gb - k * ga).abs() <= 1e-12 * ga.max(1e-30));
            }
        }
    }
}
