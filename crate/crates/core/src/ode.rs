//! Embedded Dormand–Prince 5(4) integrator for small fixed-size systems.
//!
//! Steps whose trial stages leave the admissible region (as judged by the
//! caller's `admissible` predicate or a failing right-hand side) are
//! rejected and retried with a smaller step; the state itself is never
//! clamped.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Absolute floor on the substep, seconds.
    pub h_min: f64,
    /// Upper bound on attempted substeps for one `integrate` call.
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self { rtol: 1e-10, atol: 1e-13, h_min: 1e-15, max_steps: 2_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OdeError<const N: usize> {
    #[error("substep fell below the floor {h:e} s at t = {t} s")]
    StepFloor { t: f64, h: f64, y: [f64; N] },
    #[error("exceeded {steps} substeps at t = {t} s")]
    TooManySteps { t: f64, steps: usize, y: [f64; N] },
}

impl<const N: usize> OdeError<N> {
    pub fn time(&self) -> f64 {
        match self {
            Self::StepFloor { t, .. } | Self::TooManySteps { t, .. } => *t,
        }
    }

    pub fn state(&self) -> [f64; N] {
        match self {
            Self::StepFloor { y, .. } | Self::TooManySteps { y, .. } => *y,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected: usize,
}

// Dormand–Prince tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Difference between the 5th- and 4th-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

#[inline]
fn combine<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (c, k) in terms {
            acc += c * k[i];
        }
        *o += h * acc;
    }
    out
}

/// Advance `y` from `t0` to `t1`.
///
/// `h_hint` carries the step-size controller state between calls; pass the
/// same variable to successive calls for continuity, or a fresh `None` for a
/// cold start.
#[allow(clippy::too_many_arguments)]
pub fn integrate<const N: usize, F, A>(
    mut rhs: F,
    admissible: A,
    t0: f64,
    y0: [f64; N],
    t1: f64,
    opts: &OdeOptions,
    h_hint: &mut Option<f64>,
    stats: &mut OdeStats,
) -> Result<[f64; N], OdeError<N>>
where
    F: FnMut(f64, &[f64; N]) -> Option<[f64; N]>,
    A: Fn(&[f64; N]) -> bool,
{
    let span = t1 - t0;
    if span <= 0.0 {
        return Ok(y0);
    }
    let mut t = t0;
    let mut y = y0;
    let Some(mut k1) = rhs(t, &y) else {
        return Err(OdeError::StepFloor { t, h: 0.0, y });
    };
    let mut h = h_hint.unwrap_or_else(|| initial_step(&y, &k1, span, opts)).min(span);
    let mut attempts = 0usize;
    let mut last_rejected = false;

    while t < t1 {
        if attempts >= opts.max_steps {
            return Err(OdeError::TooManySteps { t, steps: attempts, y });
        }
        attempts += 1;
        let floor = opts.h_min.max(4.0 * f64::EPSILON * t.abs());
        let remaining = t1 - t;
        let final_step = h >= remaining;
        let h_try = if final_step { remaining } else { h };
        if h_try < floor && !final_step {
            return Err(OdeError::StepFloor { t, h: h_try, y });
        }

        match dp_step(&mut rhs, &admissible, t, &y, &k1, h_try) {
            Some((y_new, k7, err_vec)) => {
                let err = error_norm(&y, &y_new, &err_vec, opts);
                if err <= 1.0 {
                    stats.accepted += 1;
                    t = if final_step { t1 } else { t + h_try };
                    y = y_new;
                    k1 = k7;
                    let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                    let factor = if last_rejected { factor.min(1.0) } else { factor };
                    // A truncated final step says nothing about the natural step size.
                    if !final_step {
                        h = h_try * factor;
                    } else {
                        h = h.max(h_try * factor);
                    }
                    last_rejected = false;
                } else {
                    stats.rejected += 1;
                    h = h_try * (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
                    last_rejected = true;
                }
            }
            None => {
                stats.rejected += 1;
                h = 0.25 * h_try;
                last_rejected = true;
            }
        }
        if h < floor && t < t1 && h < t1 - t {
            return Err(OdeError::StepFloor { t, h, y });
        }
    }
    *h_hint = Some(h);
    Ok(y)
}

type StepOut<const N: usize> = ([f64; N], [f64; N], [f64; N]);

fn dp_step<const N: usize, F, A>(
    rhs: &mut F,
    admissible: &A,
    t: f64,
    y: &[f64; N],
    k1: &[f64; N],
    h: f64,
) -> Option<StepOut<N>>
where
    F: FnMut(f64, &[f64; N]) -> Option<[f64; N]>,
    A: Fn(&[f64; N]) -> bool,
{
    let mut stage = |tc: f64, ys: [f64; N]| -> Option<[f64; N]> {
        if !admissible(&ys) {
            return None;
        }
        rhs(tc, &ys)
    };
    let k2 = stage(t + C2 * h, combine(y, h, &[(A21, k1)]))?;
    let k3 = stage(t + C3 * h, combine(y, h, &[(A31, k1), (A32, &k2)]))?;
    let k4 = stage(t + C4 * h, combine(y, h, &[(A41, k1), (A42, &k2), (A43, &k3)]))?;
    let k5 = stage(t + C5 * h, combine(y, h, &[(A51, k1), (A52, &k2), (A53, &k3), (A54, &k4)]))?;
    let k6 = stage(t + h, combine(y, h, &[(A61, k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]))?;
    let y_new = combine(y, h, &[(B1, k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
    let k7 = stage(t + h, y_new)?;
    let err = combine(&[0.0; N], h, &[(E1, k1), (E3, &k3), (E4, &k4), (E5, &k5), (E6, &k6), (E7, &k7)]);
    Some((y_new, k7, err))
}

fn error_norm<const N: usize>(y: &[f64; N], y_new: &[f64; N], err: &[f64; N], opts: &OdeOptions) -> f64 {
    let mut acc = 0.0;
    for i in 0..N {
        let scale = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
        let e = err[i] / scale;
        acc += e * e;
    }
    let norm = (acc / N as f64).sqrt();
    if norm.is_finite() {
        norm
    } else {
        f64::INFINITY
    }
}

fn initial_step<const N: usize>(y: &[f64; N], f: &[f64; N], span: f64, opts: &OdeOptions) -> f64 {
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for i in 0..N {
        let scale = opts.atol + opts.rtol * y[i].abs();
        d0 += (y[i] / scale).powi(2);
        d1 += (f[i] / scale).powi(2);
    }
    let (d0, d1) = ((d0 / N as f64).sqrt(), (d1 / N as f64).sqrt());
    let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 * span.max(1.0) } else { 0.01 * d0 / d1 };
    h.min(span).max(opts.h_min)
}

/// Linearly implicit Rosenbrock 2(3) pair (the L-stable scheme behind
/// MATLAB's `ode23s`) with a forward-difference Jacobian.
///
/// Slower than [`integrate`] on smooth problems but unconditionally stable,
/// so it takes over where the explicit pair stalls near depleted reservoirs.
/// Linear invariants of the right-hand side survive exactly: `c·f ≡ 0`
/// implies `c·J = 0`, hence `c·W⁻¹ = c`.
#[allow(clippy::too_many_arguments)]
pub fn integrate_stiff<const N: usize, F, A>(
    mut rhs: F,
    admissible: A,
    t0: f64,
    y0: [f64; N],
    t1: f64,
    opts: &OdeOptions,
    h_hint: &mut Option<f64>,
    stats: &mut OdeStats,
) -> Result<[f64; N], OdeError<N>>
where
    F: FnMut(f64, &[f64; N]) -> Option<[f64; N]>,
    A: Fn(&[f64; N]) -> bool,
{
    let d = 1.0 / (2.0 + std::f64::consts::SQRT_2);
    let e32 = 6.0 + std::f64::consts::SQRT_2;
    let span = t1 - t0;
    if span <= 0.0 {
        return Ok(y0);
    }
    let mut t = t0;
    let mut y = y0;
    let mut h = h_hint.unwrap_or(1e-6 * span.max(1.0)).min(span);
    let mut attempts = 0usize;
    // Third-order error estimate, second-order solution.
    let exponent = -1.0 / 3.0;

    while t < t1 {
        if attempts >= opts.max_steps {
            return Err(OdeError::TooManySteps { t, steps: attempts, y });
        }
        attempts += 1;
        let floor = opts.h_min.max(4.0 * f64::EPSILON * t.abs());
        let remaining = t1 - t;
        let final_step = h >= remaining;
        let h_try = if final_step { remaining } else { h };
        if h_try < floor && !final_step {
            return Err(OdeError::StepFloor { t, h: h_try, y });
        }
        let Some(f0) = rhs(t, &y) else {
            return Err(OdeError::StepFloor { t, h: h_try, y });
        };
        let Some(jac) = jacobian(&mut rhs, t, &y, &f0) else {
            return Err(OdeError::StepFloor { t, h: h_try, y });
        };
        let mut w = [[0.0; N]; N];
        for i in 0..N {
            for j in 0..N {
                w[i][j] = if i == j { 1.0 } else { 0.0 } - h_try * d * jac[i][j];
            }
        }
        let attempt = (|| {
            let lu = Lu::factor(w)?;
            let k1 = lu.solve(f0);
            let mid = combine(&y, h_try, &[(0.5, &k1)]);
            if !admissible(&mid) {
                return None;
            }
            let f1 = rhs(t + 0.5 * h_try, &mid)?;
            let mut v = [0.0; N];
            for i in 0..N {
                v[i] = f1[i] - k1[i];
            }
            let mut k2 = lu.solve(v);
            for i in 0..N {
                k2[i] += k1[i];
            }
            let y_new = combine(&y, h_try, &[(1.0, &k2)]);
            if !admissible(&y_new) {
                return None;
            }
            let f2 = rhs(t + h_try, &y_new)?;
            for i in 0..N {
                v[i] = f2[i] - e32 * (k2[i] - f1[i]) - 2.0 * (k1[i] - f0[i]);
            }
            let k3 = lu.solve(v);
            let mut err = [0.0; N];
            for i in 0..N {
                err[i] = h_try / 6.0 * (k1[i] - 2.0 * k2[i] + k3[i]);
            }
            Some((y_new, err))
        })();
        match attempt {
            Some((y_new, err_vec)) => {
                let err = error_norm(&y, &y_new, &err_vec, opts);
                if err <= 1.0 {
                    stats.accepted += 1;
                    t = if final_step { t1 } else { t + h_try };
                    y = y_new;
                    let factor = if err == 0.0 { 5.0 } else { (0.8 * err.powf(exponent)).clamp(0.2, 5.0) };
                    h = if final_step { h.max(h_try * factor) } else { h_try * factor };
                } else {
                    stats.rejected += 1;
                    h = h_try * (0.8 * err.powf(exponent)).clamp(0.1, 0.9);
                }
            }
            None => {
                stats.rejected += 1;
                h = 0.25 * h_try;
            }
        }
        if h < floor && t < t1 && h < t1 - t {
            return Err(OdeError::StepFloor { t, h, y });
        }
    }
    *h_hint = Some(h);
    Ok(y)
}

fn jacobian<const N: usize, F>(rhs: &mut F, t: f64, y: &[f64; N], f0: &[f64; N]) -> Option<[[f64; N]; N]>
where
    F: FnMut(f64, &[f64; N]) -> Option<[f64; N]>,
{
    let mut jac = [[0.0; N]; N];
    for j in 0..N {
        // Step toward the interior so the probe stays admissible for fractions.
        let mut delta = f64::EPSILON.sqrt() * y[j].abs().max(1e-300);
        if y[j] > 0.5 {
            delta = -delta;
        }
        if delta == 0.0 {
            delta = f64::EPSILON.sqrt();
        }
        let mut yp = *y;
        yp[j] += delta;
        let delta = yp[j] - y[j];
        let fp = rhs(t, &yp)?;
        for i in 0..N {
            jac[i][j] = (fp[i] - f0[i]) / delta;
        }
    }
    Some(jac)
}

/// Dense LU with partial pivoting for the small Rosenbrock systems.
struct Lu<const N: usize> {
    lu: [[f64; N]; N],
    perm: [usize; N],
}

impl<const N: usize> Lu<N> {
    fn factor(mut a: [[f64; N]; N]) -> Option<Self> {
        let mut perm = [0usize; N];
        for (i, p) in perm.iter_mut().enumerate() {
            *p = i;
        }
        for k in 0..N {
            let pivot = (k..N).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))?;
            if a[pivot][k] == 0.0 || !a[pivot][k].is_finite() {
                return None;
            }
            a.swap(k, pivot);
            perm.swap(k, pivot);
            for i in k + 1..N {
                let factor = a[i][k] / a[k][k];
                a[i][k] = factor;
                let pivot_row = a[k];
                for (aij, akj) in a[i][k + 1..].iter_mut().zip(&pivot_row[k + 1..]) {
                    *aij -= factor * akj;
                }
            }
        }
        Some(Self { lu: a, perm })
    }

    fn solve(&self, b: [f64; N]) -> [f64; N] {
        let mut x = [0.0; N];
        for i in 0..N {
            x[i] = b[self.perm[i]];
        }
        for i in 0..N {
            for j in 0..i {
                x[i] -= self.lu[i][j] * x[j];
            }
        }
        for i in (0..N).rev() {
            for j in i + 1..N {
                x[i] -= self.lu[i][j] * x[j];
            }
            x[i] /= self.lu[i][i];
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_is_accurate() {
        let opts = OdeOptions::default();
        let mut hint = None;
        let mut stats = OdeStats::default();
        let y =
            integrate(|_, y: &[f64; 1]| Some([-0.5 * y[0]]), |_| true, 0.0, [1.0], 10.0, &opts, &mut hint, &mut stats)
                .unwrap();
        assert!((y[0] - (-5.0f64).exp()).abs() < 1e-9);
        assert!(stats.accepted > 0);
    }

    #[test]
    fn harmonic_oscillator_conserves_energy_to_tolerance() {
        let opts = OdeOptions { rtol: 1e-12, atol: 1e-14, ..Default::default() };
        let mut hint = None;
        let mut stats = OdeStats::default();
        let y = integrate(
            |_, y: &[f64; 2]| Some([y[1], -y[0]]),
            |_| true,
            0.0,
            [1.0, 0.0],
            2.0 * std::f64::consts::PI,
            &opts,
            &mut hint,
            &mut stats,
        )
        .unwrap();
        assert!((y[0] - 1.0).abs() < 1e-9 && y[1].abs() < 1e-9);
    }

    #[test]
    fn linear_invariant_preserved() {
        // x' = -x + z, z' = x - z: x + z constant
        let opts = OdeOptions::default();
        let mut hint = None;
        let mut stats = OdeStats::default();
        let y = integrate(
            |_, y: &[f64; 2]| Some([-y[0] + y[1], y[0] - y[1]]),
            |_| true,
            0.0,
            [0.9, 0.1],
            50.0,
            &opts,
            &mut hint,
            &mut stats,
        )
        .unwrap();
        assert!((y[0] + y[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn inadmissible_region_shrinks_step_instead_of_clamping() {
        // y' = -1 from y=1 approaching the wall at 0; integrate to just before.
        let opts = OdeOptions::default();
        let mut hint = Some(10.0);
        let mut stats = OdeStats::default();
        let y =
            integrate(|_, _y: &[f64; 1]| Some([-1.0]), |y| y[0] > 0.0, 0.0, [1.0], 0.999, &opts, &mut hint, &mut stats)
                .unwrap();
        assert!((y[0] - 0.001).abs() < 1e-12);
    }

    #[test]
    fn stiff_solver_handles_fast_decay() {
        // λ = 1e6 over 10 s would need ~10⁷ explicit steps.
        let opts = OdeOptions { rtol: 1e-8, atol: 1e-12, ..Default::default() };
        let mut hint = None;
        let mut stats = OdeStats::default();
        let y = integrate_stiff(
            |_, y: &[f64; 2]| Some([-1e6 * (y[0] - y[1]), -y[1]]),
            |_| true,
            0.0,
            [1.0, 1.0],
            10.0,
            &opts,
            &mut hint,
            &mut stats,
        )
        .unwrap();
        // slow manifold y0 ≈ y1 = e^{-t}
        assert!((y[1] - (-10f64).exp()).abs() < 1e-9);
        assert!((y[0] - y[1]).abs() < 1e-9, "{}", y[0]);
        assert!(stats.accepted < 100_000);
    }

    #[test]
    fn stiff_solver_preserves_linear_invariant() {
        let opts = OdeOptions::default();
        let mut hint = None;
        let mut stats = OdeStats::default();
        let y = integrate_stiff(
            |_, y: &[f64; 2]| Some([-3.0 * y[0] + 2.0 * y[1], 1.5 * y[0] - y[1]]),
            |_| true,
            0.0,
            [0.9, 0.1],
            20.0,
            &opts,
            &mut hint,
            &mut stats,
        )
        .unwrap();
        // 0.5·y0 + y1 is conserved
        assert!((0.5 * y[0] + y[1] - 0.55).abs() < 1e-14);
    }

    #[test]
    fn step_floor_reported() {
        // Blows up at t = 1.
        let opts = OdeOptions { h_min: 1e-6, ..Default::default() };
        let mut hint = None;
        let mut stats = OdeStats::default();
        let err = integrate(
            |_, y: &[f64; 1]| Some([y[0] * y[0]]),
            |y| y[0].is_finite() && y[0] < 1e12,
            0.0,
            [1.0],
            2.0,
            &opts,
            &mut hint,
            &mut stats,
        )
        .unwrap_err();
        assert!(err.time() < 1.0 && err.time() > 0.99);
    }
}
