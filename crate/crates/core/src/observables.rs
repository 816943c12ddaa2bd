//! Observables of the reduced density matrix, trajectory output and
//! analytic oracles.

use std::f64::consts::{LN_2, PI};
use std::io::{self, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bath::{self, BathError, BathSpec, Beta};
use crate::deom::{Mat2, SystemSpec};
use crate::quadrature::{self, QuadratureSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObservableError {
    #[error("density matrix has eigenvalue {eigenvalue:e}, below the unphysicality threshold")]
    Unphysical { eigenvalue: f64 },
}

/// Eigenvalues below this are an error rather than integrator noise.
pub const UNPHYSICAL_EIGENVALUE: f64 = -1e-6;
const SILENT_CLIP: f64 = -1e-8;

/// `P = Tr σ_z ρ`.
pub fn population(rho: &Mat2) -> f64 {
    let p = rho[(0, 0)] - rho[(1, 1)];
    debug_assert!(p.im.abs() <= 1e-8 * (1.0 + p.re.abs()), "population has imaginary part {}", p.im);
    p.re
}

pub fn coherence(rho: &Mat2) -> f64 {
    rho[(0, 1)].norm()
}

/// Eigenvalues of the Hermitian part, ascending.
pub fn eigenvalues(rho: &Mat2) -> [f64; 2] {
    let a = rho[(0, 0)].re;
    let d = rho[(1, 1)].re;
    let b = 0.5 * (rho[(0, 1)] + rho[(1, 0)].conj());
    let mean = 0.5 * (a + d);
    let r = (0.25 * (a - d) * (a - d) + b.norm_sqr()).sqrt();
    [mean - r, mean + r]
}

/// `S = −Tr ρ ln ρ` with `0 ln 0 = 0`.
pub fn von_neumann_entropy(rho: &Mat2) -> Result<f64, ObservableError> {
    let mut s = 0.0;
    for mut lambda in eigenvalues(rho) {
        if lambda < UNPHYSICAL_EIGENVALUE {
            return Err(ObservableError::Unphysical { eigenvalue: lambda });
        }
        if lambda < 0.0 {
            if lambda < SILENT_CLIP {
                log::warn!("clipping eigenvalue {lambda:e} to zero");
            }
            lambda = 0.0;
        }
        if lambda > 0.0 {
            s -= lambda * lambda.ln();
        }
    }
    Ok(s.clamp(0.0, LN_2))
}

/// Time series recorded during a propagation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub population: Vec<f64>,
    pub entropy: Vec<f64>,
    pub coherence: Vec<f64>,
    pub n_active: Vec<usize>,
    /// Reduced density matrix at each recorded time.
    #[serde(skip)]
    pub states: Vec<Mat2>,
    pub max_tier: usize,
    pub config_hash: Option<String>,
}

impl Trajectory {
    pub fn push(&mut self, t: f64, rho: Mat2, n_active: usize) -> Result<(), ObservableError> {
        let entropy = von_neumann_entropy(&rho)?;
        self.times.push(t);
        self.population.push(population(&rho));
        self.entropy.push(entropy);
        self.coherence.push(coherence(&rho));
        self.n_active.push(n_active);
        self.states.push(rho);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn max_trace_deviation(&self) -> f64 {
        self.states.iter().map(|r| (r.trace() - 1.0).norm()).fold(0.0, f64::max)
    }

    pub fn max_hermiticity_residue(&self) -> f64 {
        self.states.iter().map(|r| crate::deom::max_abs(&(r - r.adjoint()))).fold(0.0, f64::max)
    }

    /// Linear interpolation of `P` at time `t` inside the recorded window.
    pub fn population_at(&self, t: f64) -> Option<f64> {
        let i = self.times.partition_point(|&x| x < t);
        if i == 0 {
            return (self.times.first() == Some(&t)).then(|| self.population[0]);
        }
        if i == self.times.len() {
            return None;
        }
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let w = (t - t0) / (t1 - t0);
        Some(self.population[i - 1] * (1.0 - w) + self.population[i] * w)
    }

    pub const CSV_HEADER: &'static str = "t,P,S_vN,coh_abs,n_active";

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for i in 0..self.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                sig12(self.times[i]),
                sig12(self.population[i]),
                sig12(self.entropy[i]),
                sig12(self.coherence[i]),
                self.n_active[i]
            )?;
        }
        Ok(())
    }
}

/// Twelve significant digits.
fn sig12(x: f64) -> String {
    format!("{x:.11e}")
}

/// Decoherence exponent `Γ(t) = 4 ∫₀^t (t − s) Re C(s) ds` of pure dephasing
/// under `Q = σ_z`, so that `|ρ₀₁(t)| = |ρ₀₁(0)| e^{−Γ(t)}`.
///
/// The time integral is a composite Gauss–Legendre rule over quadrature
/// values of the exact correlation function.
pub fn pure_dephasing_oracle(t: f64, spec: &BathSpec, quad: &QuadratureSpec) -> Result<f64, BathError> {
    if !(t >= 0.0) {
        return Err(BathError::InvalidSpec(format!("time {t} must be non-negative")));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let rule = quadrature::gauss_legendre(20);
    let panels = ((2.0 * spec.omega_c * t).ceil() as usize).max(4);
    let width = t / panels as f64;
    let mut nodes = Vec::with_capacity(panels * rule.0.len());
    let mut weights = Vec::with_capacity(nodes.capacity());
    for p in 0..panels {
        let center = (p as f64 + 0.5) * width;
        for (x, w) in rule.0.iter().zip(&rule.1) {
            nodes.push(center + 0.5 * width * x);
            weights.push(0.5 * width * w);
        }
    }
    let c = bath::bath_tcf(&nodes, spec, quad, crate::Execution::Sequential)?;
    let sum: f64 = nodes.iter().zip(&weights).zip(&c).map(|((s, w), c)| w * (t - s) * c.re).sum();
    Ok(4.0 * sum)
}

/// The same exponent from the spectral form
/// `Γ(t) = (4/π) ∫₀^∞ dω J_eff(ω) coth(βω/2) (1 − cos ωt)/ω²`.
pub fn pure_dephasing_spectral(t: f64, spec: &BathSpec, quad: &QuadratureSpec) -> Result<f64, BathError> {
    let omega_max = quad.resolved_omega_max(spec.omega_c);
    let f = |w: f64| {
        if w == 0.0 {
            return [0.0];
        }
        // (1 − cos ωt)/ω² without cancellation
        let h = (0.5 * w * t).sin() / w;
        [bath::bare_density(w, spec) * bath::cosine_weight(w, spec) * 2.0 * h * h]
    };
    let scale = spec.alpha * (1.0 + t * t);
    let est = quadrature::integrate_adaptive(
        f,
        0.0,
        omega_max,
        bath::oscillation_panels(omega_max, t),
        quad.rel_tol * 1e-2 * scale,
        quad.max_intervals,
    )
    .map_err(|source| BathError::Quadrature { t, source })?;
    Ok(4.0 / PI * est.value[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoltzmannStatus {
    Compared,
    /// No plateau over the final tenth of the run.
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoltzmannReport {
    pub status: BoltzmannStatus,
    /// Thermal populations of the lower and upper eigenstates of `H_S`.
    pub target: [f64; 2],
    pub observed: [f64; 2],
    pub relative_deviation: f64,
}

/// Slope threshold per unit time for plateau detection.
pub const PLATEAU_SLOPE: f64 = 1e-4;

/// Compare the final state, in the eigenbasis of `H_S`, with `e^{−βE}/Z`.
pub fn boltzmann_check(traj: &Trajectory, sys: &SystemSpec, beta: Beta) -> BoltzmannReport {
    let e = (sys.epsilon * sys.epsilon + sys.delta * sys.delta).sqrt();
    let target = match beta {
        Beta::Infinite => [1.0, 0.0],
        Beta::Finite(b) => {
            let w = (-2.0 * b * e).exp();
            [1.0 / (1.0 + w), w / (1.0 + w)]
        }
    };
    let mut report = BoltzmannReport {
        status: BoltzmannStatus::Inconclusive,
        target,
        observed: [f64::NAN; 2],
        relative_deviation: f64::NAN,
    };
    if traj.len() < 3 || !has_plateau(traj) {
        return report;
    }
    let rho = traj.states.last().expect("non-empty");
    // Lower eigenvector of ε σ_z + Δ σ_x.
    let v = if e == 0.0 {
        [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]
    } else {
        let theta = 0.5 * sys.delta.atan2(sys.epsilon);
        [Complex64::new(-theta.sin(), 0.0), Complex64::new(theta.cos(), 0.0)]
    };
    let lower = (v[0].conj() * (rho[(0, 0)] * v[0] + rho[(0, 1)] * v[1])
        + v[1].conj() * (rho[(1, 0)] * v[0] + rho[(1, 1)] * v[1]))
        .re;
    let observed = [lower, rho.trace().re - lower];
    report.status = BoltzmannStatus::Compared;
    report.observed = observed;
    report.relative_deviation = (observed[0] - target[0]).abs().max((observed[1] - target[1]).abs()) / target[0];
    report
}

fn has_plateau(traj: &Trajectory) -> bool {
    let n = traj.len();
    let start = n - (n / 10).max(2);
    let window = &traj.times[start..];
    let p = &traj.population[start..];
    window.windows(2).zip(p.windows(2)).all(|(t, p)| {
        let dt = t[1] - t[0];
        dt > 0.0 && ((p[1] - p[0]) / dt).abs() <= PLATEAU_SLOPE
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn diag(a: f64, b: f64) -> Mat2 {
        Mat2::new(Complex64::new(a, 0.0), Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0), Complex64::new(b, 0.0))
    }

    #[test]
    fn population_examples() {
        assert_eq!(population(&diag(1.0, 0.0)), 1.0);
        assert_eq!(population(&diag(0.5, 0.5)), 0.0);
        assert_eq!(population(&diag(0.75, 0.25)), 0.5);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(von_neumann_entropy(&diag(1.0, 0.0)).unwrap(), 0.0);
        assert_abs_diff_eq!(von_neumann_entropy(&diag(0.5, 0.5)).unwrap(), LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(von_neumann_entropy(&diag(0.9, 0.1)).unwrap(), 0.325_082_973_391_448, epsilon = 1e-12);
        let h = Complex64::new(0.5, 0.0);
        let plus = Mat2::new(h, h, h, h);
        assert_abs_diff_eq!(von_neumann_entropy(&plus).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn entropy_clips_noise_and_rejects_unphysical_states() {
        assert_eq!(von_neumann_entropy(&diag(1.0 + 1e-9, -1e-9)).unwrap(), 0.0);
        assert!(matches!(
            von_neumann_entropy(&diag(1.1, -0.1)),
            Err(ObservableError::Unphysical { .. })
        ));
    }

    #[test]
    fn csv_layout() {
        let mut tr = Trajectory::default();
        tr.push(0.0, diag(1.0, 0.0), 1).unwrap();
        tr.push(0.5, diag(0.75, 0.25), 3).unwrap();
        let mut out = Vec::new();
        tr.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,P,S_vN,coh_abs,n_active");
        assert_eq!(lines[2], "5.00000000000e-1,5.00000000000e-1,5.62335144619e-1,0.00000000000e0,3");
    }

    #[test]
    fn dephasing_exponent_forms_agree() {
        let q = QuadratureSpec::default();
        let spec = BathSpec::ohmic(0.1, 1.0, Beta::Infinite).unwrap();
        assert_eq!(pure_dephasing_oracle(0.0, &spec, &q).unwrap(), 0.0);
        let mut last = 0.0;
        for t in [0.5, 1.0, 2.5, 5.0, 10.0] {
            let a = pure_dephasing_oracle(t, &spec, &q).unwrap();
            let b = pure_dephasing_spectral(t, &spec, &q).unwrap();
            // α ln(1 + ω_c² t²) for the spin-1/2 Ohmic bath
            let exact = 0.1 * (1.0 + t * t).ln();
            assert!((a - b).abs() <= 1e-8 * b.abs(), "t={t}: {a} vs {b}");
            assert!((b - exact).abs() <= 1e-8 * exact);
            assert!(a >= last);
            last = a;
        }
    }

    #[test]
    fn boltzmann_targets() {
        let mut tr = Trajectory::default();
        for i in 0..50 {
            tr.push(i as f64, diag(0.5, 0.5), 1).unwrap();
        }
        let sys = SystemSpec::new(1.0, 1.0);
        let r = boltzmann_check(&tr, &SystemSpec::new(0.0, 1.0), Beta::Finite(0.0));
        assert_eq!(r.target, [0.5, 0.5]);
        assert_eq!(r.status, BoltzmannStatus::Compared);
        assert_abs_diff_eq!(r.relative_deviation, 0.0, epsilon = 1e-12);
        let r = boltzmann_check(&tr, &sys, Beta::Finite(1.0));
        let s2 = 2f64.sqrt();
        let z = s2.exp() + (-s2).exp();
        assert_abs_diff_eq!(r.target[0], s2.exp() / z, epsilon = 1e-12);
        assert_abs_diff_eq!(r.target[1], (-s2).exp() / z, epsilon = 1e-12);
    }

    #[test]
    fn boltzmann_is_inconclusive_without_plateau() {
        let mut tr = Trajectory::default();
        for i in 0..100 {
            let t = i as f64 * 0.1;
            let c = (2.0 * t).cos();
            tr.push(t, diag(0.5 + 0.5 * c, 0.5 - 0.5 * c), 1).unwrap();
        }
        let r = boltzmann_check(&tr, &SystemSpec::new(0.0, 1.0), Beta::Finite(1.0));
        assert_eq!(r.status, BoltzmannStatus::Inconclusive);
    }
}
