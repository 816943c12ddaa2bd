//! Spectral densities, spin-bath thermal statistics and the exact bath
//! time-correlation function.
//!
//! A bath of independent spins of quantum number `S` coupled linearly through
//! `ŝ_x` behaves, in the thermodynamic limit, like a harmonic bath whose
//! spectral density is the bare density multiplied by a thermal factor
//! `ζ(ω; β, S)`. For `S = 1/2` this factor is `tanh(βω/2)`.
//!
//! The correlation function is
//!
//! ```text
//! C(t) = (1/π) ∫₀^∞ dω J_eff(ω) [coth(βω/2) cos ωt − i sin ωt]
//! ```

use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::quadrature::{self, QuadratureError, QuadratureRule, QuadratureSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BathError {
    #[error("spectral density evaluated at negative frequency {omega}")]
    NegativeFrequency { omega: f64 },
    #[error("invalid bath specification: {0}")]
    InvalidSpec(String),
    #[error("correlation function at t = {t}: {source}")]
    Quadrature {
        t: f64,
        #[source]
        source: QuadratureError,
    },
}

/// Inverse temperature, with zero temperature as an exact sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Beta {
    Finite(f64),
    Infinite,
}

impl Beta {
    pub fn from_f64(beta: f64) -> Beta {
        if beta == f64::INFINITY {
            Beta::Infinite
        } else {
            Beta::Finite(beta)
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Beta::Finite(b) => b,
            Beta::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Beta::Infinite)
    }

    /// `βω` with the convention `∞·0 = 0`.
    pub fn times(self, omega: f64) -> f64 {
        match self {
            Beta::Finite(b) => b * omega,
            Beta::Infinite if omega == 0.0 => 0.0,
            Beta::Infinite => f64::INFINITY * omega.signum(),
        }
    }
}

impl fmt::Display for Beta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Beta::Finite(b) => write!(f, "{b}"),
            Beta::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Beta {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Beta::Finite(b) => s.serialize_f64(*b),
            Beta::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Beta {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct Visitor;
        impl de::Visitor<'_> for Visitor {
            type Value = Beta;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a positive number or \"inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Beta, E> {
                Ok(Beta::from_f64(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Beta, E> {
                Ok(Beta::Finite(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Beta, E> {
                Ok(Beta::Finite(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Beta, E> {
                match v {
                    "inf" | "infinity" | "Infinity" => Ok(Beta::Infinite),
                    other => other
                        .parse::<f64>()
                        .map(Beta::from_f64)
                        .map_err(|_| E::custom(format!("cannot parse beta from {other:?}"))),
                }
            }
        }
        d.deserialize_any(Visitor)
    }
}

/// Spin quantum number, stored as `2S` so that half-integers are exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Spin {
    two_s: u32,
}

impl Spin {
    pub const HALF: Spin = Spin { two_s: 1 };

    pub fn from_twice(two_s: u32) -> Option<Spin> {
        (two_s >= 1).then_some(Spin { two_s })
    }

    /// Accepts positive integers and half-integers.
    pub fn from_f64(s: f64) -> Option<Spin> {
        let twice = 2.0 * s;
        if s > 0.0 && twice.fract() == 0.0 && twice <= u32::MAX as f64 {
            Spin::from_twice(twice as u32)
        } else {
            None
        }
    }

    pub fn value(self) -> f64 {
        0.5 * self.two_s as f64
    }

    pub fn twice(self) -> u32 {
        self.two_s
    }

    pub fn levels(self) -> usize {
        self.two_s as usize + 1
    }

    pub fn is_integer(self) -> bool {
        self.two_s.is_multiple_of(2)
    }
}

impl Serialize for Spin {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for Spin {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Spin::from_f64(v).ok_or_else(|| de::Error::custom(format!("{v} is not a positive integer or half-integer")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralFamily {
    /// `J(ω) = (π/2) α ω e^{−ω/ω_c}`
    #[default]
    OhmicExponential,
}

/// Statistics of the environment particles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistics {
    /// Spin bath in the linear-response limit: `J_eff = J ζ(ω; β, S)`.
    #[default]
    Spin,
    /// Harmonic bath with the bare spectral density.
    Boson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BathSpec {
    pub family: SpectralFamily,
    pub alpha: f64,
    pub omega_c: f64,
    pub beta: Beta,
    pub spin_s: Spin,
    pub statistics: Statistics,
}

impl BathSpec {
    /// Ohmic spin-1/2 bath.
    pub fn ohmic(alpha: f64, omega_c: f64, beta: Beta) -> Result<BathSpec, BathError> {
        BathSpec {
            family: SpectralFamily::OhmicExponential,
            alpha,
            omega_c,
            beta,
            spin_s: Spin::HALF,
            statistics: Statistics::Spin,
        }
        .validated()
    }

    pub fn with_spin(mut self, spin: Spin) -> BathSpec {
        self.spin_s = spin;
        self
    }

    pub fn with_statistics(mut self, statistics: Statistics) -> BathSpec {
        self.statistics = statistics;
        self
    }

    pub fn with_beta(mut self, beta: Beta) -> Result<BathSpec, BathError> {
        self.beta = beta;
        self.validated()
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            out.push(format!("alpha = {} must be positive and finite", self.alpha));
        }
        if !(self.omega_c > 0.0 && self.omega_c.is_finite()) {
            out.push(format!("omega_c = {} must be positive and finite", self.omega_c));
        }
        if let Beta::Finite(b) = self.beta {
            if !(b > 0.0 && b.is_finite()) {
                out.push(format!("beta = {b} must be positive (use inf for zero temperature)"));
            }
        }
        out
    }

    pub fn validated(self) -> Result<BathSpec, BathError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(self)
        } else {
            Err(BathError::InvalidSpec(v.join("; ")))
        }
    }
}

/// First and second moments of `ŝ_z` for one bath spin in equilibrium.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpinMoments {
    pub mean_sz: f64,
    pub mean_sz2: f64,
}

/// `J(ω) = (π/2) α ω e^{−ω/ω_c}` for `ω ≥ 0`.
pub fn ohmic_j(omega: f64, spec: &BathSpec) -> Result<f64, BathError> {
    if omega < 0.0 {
        return Err(BathError::NegativeFrequency { omega });
    }
    Ok(bare_density(omega, spec))
}

pub(crate) fn bare_density(omega: f64, spec: &BathSpec) -> f64 {
    match spec.family {
        SpectralFamily::OhmicExponential => 0.5 * PI * spec.alpha * omega * (-omega / spec.omega_c).exp(),
    }
}

/// Moments of `ŝ_z` under the Boltzmann weights `e^{−βω m}`, `m = −S..S`.
///
/// `beta_omega` may be `±∞`; the sum is shifted by its largest exponent.
pub fn spin_z_moments(spin: Spin, beta_omega: f64) -> SpinMoments {
    let s = spin.value();
    if beta_omega == f64::INFINITY {
        return SpinMoments { mean_sz: -s, mean_sz2: s * s };
    }
    if beta_omega == f64::NEG_INFINITY {
        return SpinMoments { mean_sz: s, mean_sz2: s * s };
    }
    let shift = beta_omega.abs() * s;
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for j in 0..spin.levels() {
        let m = -s + j as f64;
        let w = (-beta_omega * m - shift).exp();
        z += w;
        m1 += m * w;
        m2 += m * m * w;
    }
    SpinMoments { mean_sz: m1 / z, mean_sz2: m2 / z }
}

/// Single-spin partition function in the closed form
/// `2 Σ_{k=0}^{[S]} cosh((k + {S}) x) − δ_S`, with `δ_S = 1` for integer `S`.
pub fn spin_partition_function(spin: Spin, beta_omega: f64) -> f64 {
    let frac = if spin.is_integer() { 0.0 } else { 0.5 };
    let mut z = 0.0;
    for k in 0..=spin.twice() / 2 {
        z += 2.0 * ((k as f64 + frac) * beta_omega).cosh();
    }
    if spin.is_integer() {
        z -= 1.0;
    }
    z
}

/// The ratio `R = (S(S+1) − ⟨s_z²⟩ − ⟨s_z⟩) / (S(S+1) − ⟨s_z²⟩)`.
fn moment_ratio(spin: Spin, beta_omega: f64) -> f64 {
    let s = spin.value();
    let casimir = s * (s + 1.0);
    let m = spin_z_moments(spin, beta_omega);
    let denom = casimir - m.mean_sz2;
    (denom - m.mean_sz) / denom
}

/// Thermal factor `ζ(ω; β, S)` relating the effective spectral density to the
/// bare one. `ζ(0) = 0` by continuity; a harmonic bath has `ζ ≡ 1` for
/// `ω > 0`.
pub fn zeta_factor(omega: f64, spec: &BathSpec) -> f64 {
    if omega == 0.0 {
        return 0.0;
    }
    match spec.statistics {
        Statistics::Boson => 1.0,
        Statistics::Spin => {
            let x = spec.beta.times(omega);
            let boltz = if x == f64::INFINITY { 1.0 } else { -(-x).exp_m1() };
            0.5 * boltz * moment_ratio(spec.spin_s, x)
        }
    }
}

/// `J_eff(ω) = J(ω) ζ(ω; β, S)` for `ω ≥ 0`.
pub fn effective_j(omega: f64, spec: &BathSpec) -> Result<f64, BathError> {
    Ok(ohmic_j(omega, spec)? * zeta_factor(omega, spec))
}

/// `ζ(ω) coth(βω/2)`, the weight of the cosine transform. Finite at `ω = 0`
/// for the spin bath; for the boson bath it diverges like `2/(βω)`.
pub(crate) fn cosine_weight(omega: f64, spec: &BathSpec) -> f64 {
    let x = spec.beta.times(omega);
    match spec.statistics {
        Statistics::Boson => {
            if x == f64::INFINITY {
                1.0
            } else {
                1.0 / (0.5 * x).tanh()
            }
        }
        Statistics::Spin => {
            let e = if x == f64::INFINITY { 0.0 } else { (-x).exp() };
            0.5 * (1.0 + e) * moment_ratio(spec.spin_s, x)
        }
    }
}

/// Integrands `[J_eff coth cos ωt, −J_eff sin ωt]` at frequency `ω > 0`.
fn tcf_integrand(omega: f64, t: f64, spec: &BathSpec) -> [f64; 2] {
    if omega <= 0.0 {
        // J·ζ·coth → 0 linearly for the spin bath; the boson limit (π α / β) is finite too.
        let j0 = match (spec.statistics, spec.beta) {
            (Statistics::Boson, Beta::Finite(b)) => PI * spec.alpha / b,
            _ => 0.0,
        };
        return [j0, 0.0];
    }
    let j = bare_density(omega, spec);
    let (s, c) = (omega * t).sin_cos();
    [j * cosine_weight(omega, spec) * c, -j * zeta_factor(omega, spec) * s]
}

/// L1 norms of the cosine and sine envelopes; these set the absolute
/// tolerance scale of the correlation-function quadrature.
fn envelope_norm(spec: &BathSpec, omega_max: f64) -> f64 {
    let est = quadrature::integrate_adaptive(
        |w| {
            let v = tcf_integrand(w, 0.0, spec);
            let j = if w > 0.0 { bare_density(w, spec) * zeta_factor(w, spec) } else { 0.0 };
            [v[0].abs(), j.abs()]
        },
        0.0,
        omega_max,
        16,
        1e-14 * spec.alpha * spec.omega_c * spec.omega_c,
        100_000,
    );
    let v = match est {
        Ok(e) => e.value,
        Err(_) => [spec.alpha * spec.omega_c * spec.omega_c; 2],
    };
    (v[0].max(v[1]) / PI).max(f64::MIN_POSITIVE)
}

/// Exact correlation function on a set of non-negative times.
///
/// Each time point is an independent quadrature; with
/// [`Execution::Parallel`] they are evaluated on the rayon pool. The result
/// does not depend on the execution mode.
pub fn bath_tcf(
    times: &[f64],
    spec: &BathSpec,
    quad: &QuadratureSpec,
    exec: Execution,
) -> Result<Vec<Complex64>, BathError> {
    spec.validated()?;
    let v = quad.violations(spec.omega_c);
    if !v.is_empty() {
        return Err(BathError::InvalidSpec(v.join("; ")));
    }
    if let Some(&t) = times.iter().find(|t| !(**t >= 0.0) || !t.is_finite()) {
        return Err(BathError::InvalidSpec(format!("time {t} must be finite and non-negative")));
    }
    let omega_max = quad.resolved_omega_max(spec.omega_c);
    let abs_tol = quad.rel_tol * envelope_norm(spec, omega_max);
    let rule = match quad.rule {
        QuadratureRule::FixedGaussLegendre => Some(quadrature::gauss_legendre(quad.n_points)),
        QuadratureRule::Adaptive => None,
    };
    let results = exec::map_range(exec, times.len(), |i| {
        tcf_at(times[i], spec, quad, omega_max, abs_tol, rule.as_ref())
    });
    results.into_iter().collect()
}

/// Panel count so that each panel spans at most about one period of `cos ωt`.
pub(crate) fn oscillation_panels(omega_max: f64, t: f64) -> usize {
    (omega_max * t / (2.0 * PI)).ceil() as usize + 8
}

fn tcf_at(
    t: f64,
    spec: &BathSpec,
    quad: &QuadratureSpec,
    omega_max: f64,
    abs_tol: f64,
    rule: Option<&(Vec<f64>, Vec<f64>)>,
) -> Result<Complex64, BathError> {
    let panels = oscillation_panels(omega_max, t);
    let f = |w: f64| tcf_integrand(w, t, spec);
    let est = match rule {
        None => quadrature::integrate_adaptive(f, 0.0, omega_max, panels, PI * abs_tol, quad.max_intervals),
        Some(rule) => quadrature::integrate_fixed(f, 0.0, omega_max, panels, rule),
    }
    .map_err(|source| BathError::Quadrature { t, source })?;
    Ok(Complex64::new(est.value[0] / PI, est.value[1] / PI))
}

/// Correlation function of a spin-1/2 bath from its fermionic form
///
/// ```text
/// C(t) = (1/π) ∫_{−∞}^{∞} dω e^{−iωt} J′(ω) / (1 + e^{−βω})
/// ```
///
/// with the bare density `J′` extended evenly to negative frequencies. It
/// shares no code path with [`bath_tcf`] beyond the bare density and serves
/// as its cross-check.
pub fn bath_tcf_fermionic(
    times: &[f64],
    spec: &BathSpec,
    quad: &QuadratureSpec,
    exec: Execution,
) -> Result<Vec<Complex64>, BathError> {
    spec.validated()?;
    if spec.spin_s != Spin::HALF || spec.statistics != Statistics::Spin {
        return Err(BathError::InvalidSpec("the fermionic form holds for a spin-1/2 bath only".into()));
    }
    let omega_max = quad.resolved_omega_max(spec.omega_c);
    let abs_tol = quad.rel_tol * envelope_norm(spec, omega_max);
    let fermi = |x: f64| if x == f64::INFINITY { 1.0 } else { 1.0 / (1.0 + (-x).exp()) };
    let results = exec::map_range(exec, times.len(), |i| {
        let t = times[i];
        // Fold ω < 0 onto ω > 0: e^{+iωt} J′(ω) / (1 + e^{βω}).
        let f = |w: f64| {
            let j = bare_density(w, spec);
            let x = spec.beta.times(w);
            let (pos, neg) = (fermi(x), 1.0 - fermi(x));
            let (s, c) = (w * t).sin_cos();
            [j * c * (pos + neg), j * s * (neg - pos)]
        };
        quadrature::integrate_adaptive(f, 0.0, omega_max, oscillation_panels(omega_max, t), PI * abs_tol, quad.max_intervals)
            .map(|e| Complex64::new(e.value[0] / PI, e.value[1] / PI))
            .map_err(|source| BathError::Quadrature { t, source })
    });
    results.into_iter().collect()
}
