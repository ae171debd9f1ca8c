//! Post-processing of run records: charge integration, trailing tangent
//! lines, Arrhenius fits, retention projection, G-Q collapse and switching
//! metrics.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{Experiment, ReadEvent, RecordSample, RunRecord, Step};
use crate::BOLTZMANN_EV;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("time not strictly increasing at index {index}")]
    NonMonotonicTime { index: usize },
    #[error("window of {window} s holds {found} samples, need at least 2")]
    WindowTooShort { window: f64, found: usize },
    #[error("current at index {index} is not positive ({value})")]
    NonPositiveCurrent { index: usize, value: f64 },
    #[error("temperature {0} K appears more than once")]
    DuplicateTemperature(f64),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Cumulative trapezoid integral, starting at zero.
pub fn integrate_charge(series: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(series.len());
    let mut q = 0.0;
    for (i, &(t, current)) in series.iter().enumerate() {
        if i > 0 {
            let (t0, i0) = series[i - 1];
            if !(t > t0) {
                return Err(AnalysisError::NonMonotonicTime { index: i });
            }
            q += 0.5 * (current + i0) * (t - t0);
        }
        out.push((t, q));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TangentLine {
    pub slope: f64,
    pub intercept: f64,
    pub fit_window: (f64, f64),
    pub rms_residual: f64,
}

impl TangentLine {
    pub fn at(&self, t: f64) -> f64 {
        self.intercept + self.slope * t
    }
}

struct LineFit {
    slope: f64,
    intercept: f64,
    r_squared: f64,
    rms: f64,
}

fn fit_line(points: &[(f64, f64)]) -> LineFit {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_res: f64 = points.iter().map(|&(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r_squared = if syy > 0.0 { (1.0 - ss_res / syy).clamp(0.0, 1.0) } else { 1.0 };
    LineFit { slope, intercept, r_squared, rms: (ss_res / n).sqrt() }
}

/// Least-squares line over samples with `t ≥ t_last − window`.
pub fn tangent_extrapolation(series: &[(f64, f64)], window: f64) -> Result<TangentLine> {
    if !(window > 0.0) {
        return Err(AnalysisError::InvalidArgument(format!("window must be > 0, got {window}")));
    }
    let Some(&(t_end, _)) = series.last() else {
        return Err(AnalysisError::WindowTooShort { window, found: 0 });
    };
    let start = t_end - window;
    let tail: Vec<(f64, f64)> = series.iter().copied().filter(|p| p.0 >= start).collect();
    if tail.len() < 2 {
        return Err(AnalysisError::WindowTooShort { window, found: tail.len() });
    }
    let fit = fit_line(&tail);
    Ok(TangentLine {
        slope: fit.slope,
        intercept: fit.intercept,
        fit_window: (tail[0].0, t_end),
        rms_residual: fit.rms,
    })
}

/// Time at which two tangent lines meet, if that lies after both fit
/// windows. Parallel or diverging lines never meet.
pub fn convergence_time(a: &TangentLine, b: &TangentLine) -> Option<f64> {
    let ds = a.slope - b.slope;
    if ds == 0.0 {
        return None;
    }
    let t = (b.intercept - a.intercept) / ds;
    let after = a.fit_window.1.max(b.fit_window.1);
    (t.is_finite() && t >= after).then_some(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrheniusFit {
    /// eV.
    pub ea: f64,
    pub ln_prefactor: f64,
    pub r_squared: f64,
    pub n_points: usize,
}

/// Least squares of ln I against 1/T.
pub fn arrhenius_fit(points: &[(f64, f64)]) -> Result<ArrheniusFit> {
    if points.len() < 2 {
        return Err(AnalysisError::InsufficientData(format!("need at least 2 points, got {}", points.len())));
    }
    for (index, &(t, i)) in points.iter().enumerate() {
        if !(t > 0.0 && t.is_finite()) {
            return Err(AnalysisError::InvalidArgument(format!("temperature at index {index} must be > 0, got {t}")));
        }
        if !(i > 0.0 && i.is_finite()) {
            return Err(AnalysisError::NonPositiveCurrent { index, value: i });
        }
        if points[..index].iter().any(|p| p.0 == t) {
            return Err(AnalysisError::DuplicateTemperature(t));
        }
    }
    let xy: Vec<(f64, f64)> = points.iter().map(|&(t, i)| (1.0 / t, i.ln())).collect();
    let fit = fit_line(&xy);
    Ok(ArrheniusFit {
        ea: -fit.slope * BOLTZMANN_EV,
        ln_prefactor: fit.intercept,
        r_squared: fit.r_squared,
        n_points: points.len(),
    })
}

/// t_ref · exp[(Ea/k)(1/T_target − 1/T_ref)].
pub fn retention_scale(t_ref: f64, temp_ref: f64, temp_target: f64, ea: f64) -> Result<f64> {
    for (name, v) in [("temp_ref", temp_ref), ("temp_target", temp_target)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(AnalysisError::InvalidArgument(format!("{name} must be > 0, got {v}")));
        }
    }
    if !(t_ref >= 0.0 && t_ref.is_finite()) {
        return Err(AnalysisError::InvalidArgument(format!("t_ref must be >= 0, got {t_ref}")));
    }
    if !ea.is_finite() {
        return Err(AnalysisError::InvalidArgument(format!("ea must be finite, got {ea}")));
    }
    Ok(t_ref * ((ea / BOLTZMANN_EV) * (1.0 / temp_target - 1.0 / temp_ref)).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GqCollapse {
    pub max_residual_fraction: f64,
    /// Monotone curve as (q, G) knots, ascending in q.
    pub curve: Vec<(f64, f64)>,
}

/// Pool-adjacent-violators, non-decreasing, weighted.
fn isotonic(values: &[f64], weights: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() > 1 {
            let (v2, w2, n2) = blocks[blocks.len() - 1];
            let (v1, w1, n1) = blocks[blocks.len() - 2];
            if v1 <= v2 {
                break;
            }
            blocks.pop();
            let w = w1 + w2;
            *blocks.last_mut().expect("two blocks") = ((v1 * w1 + v2 * w2) / w, w, n1 + n2);
        }
    }
    blocks.into_iter().flat_map(|(v, _, n)| std::iter::repeat_n(v, n)).collect()
}

/// Piecewise-linear through the knots, extended linearly past both ends.
fn interpolate(curve: &[(f64, f64)], q: f64) -> f64 {
    if curve.len() == 1 {
        return curve[0].1;
    }
    let idx = curve.partition_point(|p| p.0 < q).clamp(1, curve.len() - 1);
    let (q0, g0) = curve[idx - 1];
    let (q1, g1) = curve[idx];
    if q1 == q0 {
        return g1;
    }
    g0 + (g1 - g0) * (q - q0) / (q1 - q0)
}

/// Fit one monotone G(q) through all samples of all records and report
/// the largest vertical residual as a fraction of the G range.
///
/// Samples are pooled into `bins` equal-width q bins; bin centroids are
/// made monotone (direction from the q-G covariance) by isotonic
/// regression and joined linearly, with linear extension past the end
/// centroids.
pub fn gq_collapse(records: &[&[RecordSample]], bins: usize) -> Result<GqCollapse> {
    let mut pts: Vec<(f64, f64)> = records.iter().flat_map(|r| r.iter().map(|s| (s.q, s.g))).collect();
    if pts.len() < 2 || bins < 2 {
        return Err(AnalysisError::InsufficientData(format!("{} samples, {} bins", pts.len(), bins)));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (q_lo, q_hi) = (pts[0].0, pts[pts.len() - 1].0);
    let g_lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let g_hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    if !(q_hi > q_lo) || !(g_hi > g_lo) {
        return Err(AnalysisError::InsufficientData("q or G does not vary".into()));
    }
    let width = (q_hi - q_lo) / bins as f64;
    let mut sums = vec![(0.0, 0.0, 0usize); bins];
    for &(q, g) in &pts {
        let b = (((q - q_lo) / width) as usize).min(bins - 1);
        sums[b].0 += q;
        sums[b].1 += g;
        sums[b].2 += 1;
    }
    let centroids: Vec<(f64, f64, f64)> =
        sums.into_iter().filter(|s| s.2 > 0).map(|(sq, sg, n)| (sq / n as f64, sg / n as f64, n as f64)).collect();
    let fit = fit_line(&pts);
    let sign = if fit.slope < 0.0 { -1.0 } else { 1.0 };
    let values: Vec<f64> = centroids.iter().map(|c| sign * c.1).collect();
    let weights: Vec<f64> = centroids.iter().map(|c| c.2).collect();
    let fitted = isotonic(&values, &weights);
    let curve: Vec<(f64, f64)> = centroids.iter().zip(&fitted).map(|(c, &g)| (c.0, sign * g)).collect();
    let worst = pts.iter().map(|&(q, g)| (g - interpolate(&curve, q)).abs()).fold(0.0, f64::max);
    Ok(GqCollapse { max_residual_fraction: worst / (g_hi - g_lo), curve })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchingMetrics {
    pub n_distinct_states: usize,
    /// Smallest per-branch r² of G against pulse index.
    pub linearity_r2: Option<f64>,
    /// |mean ΔG potentiation| / |mean ΔG depression|.
    pub symmetry_ratio: Option<f64>,
}

/// Distinct levels: sort the reads and count those more than `resolution`
/// (absolute, siemens) above the last counted level.
pub fn count_distinct(values: &[f64], resolution: f64) -> usize {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut count = 0;
    let mut last = f64::NEG_INFINITY;
    for x in v {
        if x - last > resolution {
            count += 1;
            last = x;
        }
    }
    count
}

/// Staircase metrics over a read sequence. A read belongs to the
/// potentiation branch when the drive preceding it was positive, to the
/// depression branch when negative. Each maximal run of same-branch reads
/// is one branch segment; ΔG is taken between consecutive reads.
/// `relative_resolution` is the distinctness threshold as a fraction of G.
pub fn switching_metrics(reads: &[ReadEvent], relative_resolution: f64) -> Result<SwitchingMetrics> {
    if reads.len() < 2 {
        return Err(AnalysisError::InsufficientData(format!("{} reads", reads.len())));
    }
    let g: Vec<f64> = reads.iter().map(|r| r.g).collect();
    let mean_g = g.iter().sum::<f64>() / g.len() as f64;
    let n_distinct_states = count_distinct(&g, relative_resolution * mean_g);

    let branch = |r: &ReadEvent| r.last_drive.partial_cmp(&0.0).map(|o| o as i8).unwrap_or(0);
    let mut r2_min: Option<f64> = None;
    let mut start = 0;
    for end in 1..=reads.len() {
        if end == reads.len() || branch(&reads[end]) != branch(&reads[start]) {
            if branch(&reads[start]) != 0 && end - start >= 3 {
                let pts: Vec<(f64, f64)> = (start..end).map(|i| ((i - start) as f64, g[i])).collect();
                let r2 = fit_line(&pts).r_squared;
                r2_min = Some(r2_min.map_or(r2, |m: f64| m.min(r2)));
            }
            start = end;
        }
    }

    let (mut up, mut down) = (Vec::new(), Vec::new());
    for i in 1..reads.len() {
        match branch(&reads[i]) {
            1 => up.push(g[i] - g[i - 1]),
            -1 => down.push(g[i] - g[i - 1]),
            _ => {}
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let symmetry_ratio = (!up.is_empty() && !down.is_empty()).then(|| mean(&up).abs() / mean(&down).abs());
    Ok(SwitchingMetrics { n_distinct_states, linearity_r2: r2_min, symmetry_ratio })
}

/// Analyses a run configuration may request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnalysisRequest {
    /// Staircase metrics over all reads.
    Switching {
        #[serde(default = "three")]
        sigma_multiple: f64,
    },
    /// G-Q collapse over the whole record.
    GqCollapse {
        #[serde(default = "default_bins")]
        bins: usize,
    },
    /// Arrhenius fit of the final current of every drive step.
    Arrhenius,
    /// Trailing tangent of G and q at the end of every hold step.
    Tangents {
        #[serde(default = "default_window")]
        window: f64,
    },
    /// Total and final charge, and drive-versus-rebound split.
    Charge,
}

fn three() -> f64 {
    3.0
}

fn default_bins() -> usize {
    200
}

fn default_window() -> f64 {
    300.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoldTangents {
    pub step: usize,
    pub g: TangentLine,
    pub q: TangentLine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChargeSummary {
    pub q_final: f64,
    /// Most negative and most positive q reached.
    pub q_min: f64,
    pub q_max: f64,
    /// Trapezoid integral of the recorded current.
    pub q_trapezoid: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnalysisResult {
    Switching(SwitchingMetrics),
    GqCollapse { max_residual_fraction: f64, curve_points: usize },
    Arrhenius(ArrheniusFit),
    Tangents { holds: Vec<HoldTangents> },
    Charge(ChargeSummary),
}

/// Final (temperature, current) of each drive step.
pub fn drive_end_currents(exp: &Experiment, record: &RunRecord) -> Vec<(f64, f64)> {
    exp.steps
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s, Step::Drive { .. }))
        .filter_map(|(i, _)| record.step_samples(i).last().map(|s| (s.temperature, s.i_gate)))
        .collect()
}

pub fn run_analysis(exp: &Experiment, record: &RunRecord, request: &AnalysisRequest) -> Result<AnalysisResult> {
    match *request {
        AnalysisRequest::Switching { sigma_multiple } => {
            let resolution = sigma_multiple * exp.sampling.read.relative_noise();
            Ok(AnalysisResult::Switching(switching_metrics(&record.reads, resolution)?))
        }
        AnalysisRequest::GqCollapse { bins } => {
            let c = gq_collapse(&[&record.samples], bins)?;
            Ok(AnalysisResult::GqCollapse {
                max_residual_fraction: c.max_residual_fraction,
                curve_points: c.curve.len(),
            })
        }
        AnalysisRequest::Arrhenius => {
            let pts: Vec<(f64, f64)> = drive_end_currents(exp, record).into_iter().map(|(t, i)| (t, i.abs())).collect();
            Ok(AnalysisResult::Arrhenius(arrhenius_fit(&pts)?))
        }
        AnalysisRequest::Tangents { window } => {
            let mut holds = Vec::new();
            for (i, step) in exp.steps.iter().enumerate() {
                if !matches!(step, Step::Hold { .. }) {
                    continue;
                }
                let seg: Vec<&RecordSample> = record.step_samples(i).collect();
                let g: Vec<(f64, f64)> = seg.iter().map(|s| (s.t, s.g)).collect();
                let q: Vec<(f64, f64)> = seg.iter().map(|s| (s.t, s.q)).collect();
                holds.push(HoldTangents {
                    step: i,
                    g: tangent_extrapolation(&g, window)?,
                    q: tangent_extrapolation(&q, window)?,
                });
            }
            Ok(AnalysisResult::Tangents { holds })
        }
        AnalysisRequest::Charge => {
            let series = record.current_series();
            let trap = integrate_charge(&series)?;
            let q0 = record.samples.first().map_or(0.0, |s| s.q);
            let qs = record.samples.iter().map(|s| s.q);
            Ok(AnalysisResult::Charge(ChargeSummary {
                q_final: record.samples.last().map_or(0.0, |s| s.q),
                q_min: qs.clone().fold(f64::INFINITY, f64::min),
                q_max: qs.fold(f64::NEG_INFINITY, f64::max),
                q_trapezoid: q0 + trap.last().map_or(0.0, |p| p.1),
            }))
        }
    }
}

/// Curve as CSV: `q_C,g_S`.
pub fn write_curve_csv<W: Write>(curve: &[(f64, f64)], mut out: W) -> io::Result<()> {
    writeln!(out, "q_C,g_S")?;
    for &(q, g) in curve {
        writeln!(out, "{q:e},{g:e}")?;
    }
    Ok(())
}
