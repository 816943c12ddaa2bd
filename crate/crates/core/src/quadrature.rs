//! One-dimensional quadrature on finite intervals.
//!
//! Two rules are provided: a globally adaptive Gauss–Kronrod (7/15) scheme
//! and a composite fixed-order Gauss–Legendre rule. Both evaluate vector
//! valued integrands so that the real and imaginary parts of an oscillatory
//! transform share nodes.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("quadrature did not converge: error estimate {estimate:.3e} exceeds tolerance {tolerance:.3e} after {intervals} intervals")]
    NotConverged {
        estimate: f64,
        tolerance: f64,
        intervals: usize,
    },
    #[error("integrand returned a non-finite value at x = {x}")]
    NonFinite { x: f64 },
}

/// Which rule `QuadratureSpec` selects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureRule {
    #[default]
    Adaptive,
    FixedGaussLegendre,
}

/// Discretization of frequency integrals over `[0, omega_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureSpec {
    /// Upper frequency cutoff. `None` resolves to `40 * omega_c` of the bath.
    pub omega_max: Option<f64>,
    /// Nodes per panel for the fixed rule.
    pub n_points: usize,
    pub rule: QuadratureRule,
    /// Tolerance relative to the L1 norm of the integrand envelope.
    pub rel_tol: f64,
    /// Interval budget of the adaptive rule.
    pub max_intervals: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            omega_max: None,
            n_points: 64,
            rule: QuadratureRule::Adaptive,
            rel_tol: 1e-9,
            max_intervals: 200_000,
        }
    }
}

pub const DEFAULT_CUTOFF_MULTIPLE: f64 = 40.0;
pub const MIN_CUTOFF_MULTIPLE: f64 = 20.0;
pub const MIN_POINTS: usize = 64;

impl QuadratureSpec {
    pub fn fixed(n_points: usize) -> Self {
        QuadratureSpec {
            n_points,
            rule: QuadratureRule::FixedGaussLegendre,
            ..Default::default()
        }
    }

    pub fn resolved_omega_max(&self, omega_c: f64) -> f64 {
        self.omega_max
            .unwrap_or(DEFAULT_CUTOFF_MULTIPLE * omega_c)
    }

    /// Returns one message per violated invariant.
    pub fn violations(&self, omega_c: f64) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(w) = self.omega_max {
            if !(w >= MIN_CUTOFF_MULTIPLE * omega_c) {
                out.push(format!(
                    "omega_max = {w} must be at least {MIN_CUTOFF_MULTIPLE}·omega_c = {}",
                    MIN_CUTOFF_MULTIPLE * omega_c
                ));
            }
        }
        if self.n_points < MIN_POINTS {
            out.push(format!("n_points = {} must be at least {MIN_POINTS}", self.n_points));
        }
        if !(self.rel_tol > 0.0) {
            out.push(format!("rel_tol = {} must be positive", self.rel_tol));
        }
        if self.max_intervals == 0 {
            out.push("max_intervals must be positive".to_string());
        }
        out
    }
}

/// Result of an integration with its error estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate<const N: usize> {
    pub value: [f64; N],
    pub error: f64,
    pub intervals: usize,
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_225,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
// Gauss weights for the nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn kronrod15<const N: usize, F>(f: &F, a: f64, b: f64) -> Result<([f64; N], f64), QuadratureError>
where
    F: Fn(f64) -> [f64; N],
{
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut fv = [[0.0; N]; 15];
    let eval = |x: f64| -> Result<[f64; N], QuadratureError> {
        let v = f(x);
        if v.iter().all(|y| y.is_finite()) {
            Ok(v)
        } else {
            Err(QuadratureError::NonFinite { x })
        }
    };
    fv[7] = eval(center)?;
    for j in 0..7 {
        let dx = half * XGK[j];
        fv[j] = eval(center - dx)?;
        fv[14 - j] = eval(center + dx)?;
    }

    let mut err = 0.0f64;
    let mut value = [0.0; N];
    for c in 0..N {
        let mut resk = WGK[7] * fv[7][c];
        let mut resg = WG[3] * fv[7][c];
        let mut resabs = WGK[7] * fv[7][c].abs();
        for j in 0..7 {
            let s = fv[j][c] + fv[14 - j][c];
            resk += WGK[j] * s;
            resabs += WGK[j] * (fv[j][c].abs() + fv[14 - j][c].abs());
            if j % 2 == 1 {
                resg += WG[j / 2] * s;
            }
        }
        let mean = 0.5 * resk;
        let mut resasc = WGK[7] * (fv[7][c] - mean).abs();
        for j in 0..7 {
            resasc += WGK[j] * ((fv[j][c] - mean).abs() + (fv[14 - j][c] - mean).abs());
        }
        let resasc = resasc * half.abs();
        let resabs = resabs * half.abs();
        let mut e = ((resk - resg) * half).abs();
        if resasc != 0.0 && e != 0.0 {
            e = resasc * (200.0 * e / resasc).powf(1.5).min(1.0);
        }
        if resabs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
            e = e.max(50.0 * f64::EPSILON * resabs);
        }
        value[c] = resk * half;
        err = err.max(e);
    }
    Ok((value, err))
}

struct Panel<const N: usize> {
    a: f64,
    b: f64,
    value: [f64; N],
    error: f64,
    seq: usize,
}

impl<const N: usize> PartialEq for Panel<N> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<const N: usize> Eq for Panel<N> {}
impl<const N: usize> PartialOrd for Panel<N> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<const N: usize> Ord for Panel<N> {
    fn cmp(&self, other: &Self) -> Ordering {
        // Largest error first, older panel first on ties.
        self.error
            .total_cmp(&other.error)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Globally adaptive Gauss–Kronrod integration of `f` over `[a, b]`.
///
/// The interval is first split into `initial_panels` equal pieces (useful for
/// oscillatory integrands); the panel with the largest error estimate is then
/// bisected until the summed estimate drops below `abs_tol`.
pub fn integrate_adaptive<const N: usize, F>(
    f: F,
    a: f64,
    b: f64,
    initial_panels: usize,
    abs_tol: f64,
    max_intervals: usize,
) -> Result<Estimate<N>, QuadratureError>
where
    F: Fn(f64) -> [f64; N],
{
    let initial_panels = initial_panels.max(1);
    let mut heap = BinaryHeap::with_capacity(initial_panels * 2);
    let mut total_err = 0.0;
    let mut seq = 0;
    let width = (b - a) / initial_panels as f64;
    for i in 0..initial_panels {
        let lo = a + width * i as f64;
        let hi = if i + 1 == initial_panels { b } else { a + width * (i + 1) as f64 };
        let (value, error) = kronrod15(&f, lo, hi)?;
        total_err += error;
        heap.push(Panel { a: lo, b: hi, value, error, seq });
        seq += 1;
    }

    while total_err > abs_tol && heap.len() < max_intervals {
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            heap.push(worst);
            break;
        }
        let (lv, le) = kronrod15(&f, worst.a, mid)?;
        let (rv, re) = kronrod15(&f, mid, worst.b)?;
        total_err += le + re - worst.error;
        heap.push(Panel { a: worst.a, b: mid, value: lv, error: le, seq });
        heap.push(Panel { a: mid, b: worst.b, value: rv, error: re, seq: seq + 1 });
        seq += 2;
    }

    // Recompute the error sum from scratch to avoid drift from the running update.
    let mut panels = heap.into_vec();
    panels.sort_by(|p, q| p.a.total_cmp(&q.a));
    let intervals = panels.len();
    let error: f64 = panels.iter().map(|p| p.error).sum();
    let mut value = [0.0; N];
    for p in &panels {
        for c in 0..N {
            value[c] += p.value[c];
        }
    }
    if error > abs_tol {
        return Err(QuadratureError::NotConverged {
            estimate: error,
            tolerance: abs_tol,
            intervals,
        });
    }
    Ok(Estimate { value, error, intervals })
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` (Newton iteration on the
/// Legendre recurrence).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "Gauss–Legendre rule needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = nf * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Composite Gauss–Legendre rule with `panels` equal panels of `n_points`
/// nodes each. No error estimate beyond zero is reported.
pub fn integrate_fixed<const N: usize, F>(
    f: F,
    a: f64,
    b: f64,
    panels: usize,
    rule: &(Vec<f64>, Vec<f64>),
) -> Result<Estimate<N>, QuadratureError>
where
    F: Fn(f64) -> [f64; N],
{
    let panels = panels.max(1);
    let width = (b - a) / panels as f64;
    let (nodes, weights) = rule;
    let mut value = [0.0; N];
    for p in 0..panels {
        let lo = a + width * p as f64;
        let center = lo + 0.5 * width;
        let mut part = [0.0; N];
        for (x, w) in nodes.iter().zip(weights) {
            let xx = center + 0.5 * width * x;
            let v = f(xx);
            for c in 0..N {
                if !v[c].is_finite() {
                    return Err(QuadratureError::NonFinite { x: xx });
                }
                part[c] += w * v[c];
            }
        }
        for c in 0..N {
            value[c] += 0.5 * width * part[c];
        }
    }
    Ok(Estimate { value, error: 0.0, intervals: panels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let rule = gauss_legendre(5);
        let sum_w: f64 = rule.1.iter().sum();
        assert!((sum_w - 2.0).abs() < 1e-14);
        // x^8 is exact for n = 5 (degree <= 9)
        let est = integrate_fixed(|x| [x.powi(8)], -1.0, 1.0, 1, &rule).unwrap();
        assert!((est.value[0] - 2.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn gauss_legendre_64_nodes_are_symmetric_and_sorted() {
        let (x, w) = gauss_legendre(64);
        for i in 0..64 {
            assert!((x[i] + x[63 - i]).abs() < 1e-15);
            assert!((w[i] - w[63 - i]).abs() < 1e-15);
            if i > 0 {
                assert!(x[i] > x[i - 1]);
            }
        }
    }

    #[test]
    fn adaptive_handles_oscillation() {
        // ∫_0^40 e^{-w} cos(30 w) dw = (1 - e^{-40}(cos 1200 - 30 sin 1200)) / 901
        let exact = (1.0 - (-40.0f64).exp() * ((1200.0f64).cos() - 30.0 * (1200.0f64).sin())) / 901.0;
        let est = integrate_adaptive(|w| [(-w).exp() * (30.0 * w).cos()], 0.0, 40.0, 200, 1e-13, 10_000)
            .unwrap();
        assert!((est.value[0] - exact).abs() < 1e-12, "{} vs {}", est.value[0], exact);
    }

    #[test]
    fn adaptive_reports_non_convergence() {
        let err = integrate_adaptive(|x: f64| [x.sqrt().recip()], 0.0, 1.0, 1, 1e-14, 8).unwrap_err();
        assert!(matches!(err, QuadratureError::NotConverged { .. }));
    }

    #[test]
    fn spec_violations_are_listed() {
        let spec = QuadratureSpec { omega_max: Some(5.0), n_points: 8, ..Default::default() };
        assert_eq!(spec.violations(1.0).len(), 2);
        assert!(QuadratureSpec::default().violations(1.0).is_empty());
    }
}
