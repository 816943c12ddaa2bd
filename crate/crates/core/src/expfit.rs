//! Time-domain Prony fitting of the bath correlation function.
//!
//! The real and imaginary parts of `C(t)` are fitted separately by sums of
//! decaying (possibly oscillating) exponentials and merged into one complex
//! series `C(t) ≈ Σ_k η_k e^{−γ_k t}` together with the conjugate-partner map
//! `k ↦ k̄`, `γ_k̄ = γ_k*`, that the dissipaton hierarchy needs.
//!
//! Each part is fitted in two stages: rates from a matrix pencil on the
//! Hankel matrix of the samples, then a variable-projection Levenberg–Marquardt
//! refinement of the rates with the linear amplitudes eliminated.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bath::{self, BathError, BathSpec};
use crate::exec::Execution;
use crate::quadrature::QuadratureSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("sample matrix has numerical rank {rank}, fewer than the {requested} requested terms")]
    RankDeficient { rank: usize, requested: usize },
    #[error("{terms} terms need at least {needed} samples, got {samples}")]
    TooFewSamples { terms: usize, needed: usize, samples: usize },
    #[error("invalid fit strategy: {0}")]
    InvalidStrategy(String),
    #[error("term {index} breaks conjugate closure: {detail}")]
    ConjugateClosure { index: usize, detail: String },
    #[error(transparent)]
    Bath(#[from] BathError),
}

/// Number of terms for each part and the sampling grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitStrategy {
    pub k_real: usize,
    pub k_imag: usize,
    pub plateau_time: f64,
    pub dt_sample: f64,
}

impl Default for FitStrategy {
    fn default() -> Self {
        FitStrategy { k_real: 5, k_imag: 5, plateau_time: 40.0, dt_sample: 0.01 }
    }
}

impl FitStrategy {
    pub fn new(k_real: usize, k_imag: usize) -> Self {
        FitStrategy { k_real, k_imag, ..Default::default() }
    }

    pub fn n_samples(&self) -> usize {
        if self.plateau_time == 0.0 {
            1
        } else {
            (self.plateau_time / self.dt_sample).round() as usize + 1
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.k_real < 1 {
            out.push("k_real must be at least 1".to_string());
        }
        if self.k_imag < 1 {
            out.push("k_imag must be at least 1".to_string());
        }
        if !(self.dt_sample > 0.0 && self.dt_sample.is_finite()) {
            out.push(format!("dt_sample = {} must be positive", self.dt_sample));
        }
        if !(self.plateau_time >= 0.0 && self.plateau_time.is_finite()) {
            out.push(format!("plateau_time = {} must be non-negative", self.plateau_time));
        } else if self.dt_sample > 0.0
            && self.plateau_time / self.dt_sample < 10.0 * (self.k_real + self.k_imag) as f64
        {
            out.push(format!(
                "plateau_time/dt_sample = {} must be at least 10·(k_real + k_imag) = {}",
                self.plateau_time / self.dt_sample,
                10 * (self.k_real + self.k_imag)
            ));
        }
        out
    }
}

/// One exponential `amplitude · e^{−rate t}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpTerm {
    pub amplitude: Complex64,
    pub rate: Complex64,
}

impl ExpTerm {
    pub fn new(amplitude: Complex64, rate: Complex64) -> Self {
        ExpTerm { amplitude, rate }
    }

    pub fn eval(&self, t: f64) -> Complex64 {
        self.amplitude * (-self.rate * t).exp()
    }
}

/// Uniform samples of the correlation function starting at `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TcfSamples {
    pub dt: f64,
    pub values: Vec<Complex64>,
}

impl TcfSamples {
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.values.len()).map(move |i| i as f64 * self.dt)
    }

    pub fn real_part(&self) -> Vec<f64> {
        self.values.iter().map(|c| c.re).collect()
    }

    pub fn imag_part(&self) -> Vec<f64> {
        self.values.iter().map(|c| c.im).collect()
    }
}

pub fn sample_tcf(
    spec: &BathSpec,
    strategy: &FitStrategy,
    quad: &QuadratureSpec,
    exec: Execution,
) -> Result<TcfSamples, FitError> {
    let v = strategy.violations();
    // A zero plateau is a single sample and is allowed for inspection.
    if strategy.plateau_time != 0.0 && !v.is_empty() {
        return Err(FitError::InvalidStrategy(v.join("; ")));
    }
    let n = strategy.n_samples();
    let times: Vec<f64> = (0..n).map(|i| i as f64 * strategy.dt_sample).collect();
    let values = bath::bath_tcf(&times, spec, quad, exec)?;
    Ok(TcfSamples { dt: strategy.dt_sample, values })
}

/// Real basis element of a real-valued exponential sum.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    /// `e^{−r t}`
    Real { r: f64 },
    /// `e^{−r t} cos ωt` and `e^{−r t} sin ωt`
    Pair { r: f64, w: f64 },
}

impl Mode {
    fn width(&self) -> usize {
        match self {
            Mode::Real { .. } => 1,
            Mode::Pair { .. } => 2,
        }
    }

    fn decay(&self) -> f64 {
        match *self {
            Mode::Real { r } | Mode::Pair { r, .. } => r,
        }
    }
}

/// Longest pencil window; bounds the SVD cost on long records.
const MAX_PENCIL_WINDOW: usize = 200;
/// Relative singular value threshold for the numerical rank.
const RANK_THRESHOLD: f64 = 1e-12;
const MAX_REFINE_ITERATIONS: usize = 200;
const GRADIENT_TOLERANCE: f64 = 1e-12;
/// Largest basis coefficient, relative to the largest sample, that a fit may
/// use while a better-conditioned admissible candidate exists.
const MAX_AMPLIFICATION: f64 = 20.0;

/// Right singular vectors of the Hankel matrix, shared by every term count.
struct Pencil {
    vectors: DMatrix<f64>,
    rank: usize,
}

impl Pencil {
    fn new(samples: &[f64]) -> Pencil {
        let n = samples.len();
        let window = (n / 3).clamp(1, MAX_PENCIL_WINDOW);
        let rows = n - window;
        let hankel = DMatrix::from_fn(rows, window + 1, |i, j| samples[i + j]);
        let svd = hankel.svd(false, true);
        let s = &svd.singular_values;
        let top = s.iter().copied().fold(0.0, f64::max);
        let rank = if top > 0.0 { s.iter().filter(|&&x| x > RANK_THRESHOLD * top).count() } else { 0 };
        let vectors = svd.v_t.expect("requested right singular vectors").transpose();
        Pencil { vectors, rank }
    }

    /// Rates of the `k` leading modes as roots `z` of the shift-invariance
    /// eigenproblem, mapped to modes with non-negative decay.
    fn modes(&self, k: usize, dt: f64) -> Vec<Mode> {
        let v = self.vectors.columns(0, k);
        let l = v.nrows() - 1;
        let v1 = v.rows(0, l).into_owned();
        let v2 = v.rows(1, l).into_owned();
        let shift = v1
            .svd(true, true)
            .solve(&v2, 1e-14)
            .expect("singular vectors were computed");
        let roots = shift.complex_eigenvalues();

        let mut modes = Vec::with_capacity(k);
        let mut used = 0;
        let mut sorted: Vec<Complex64> = roots.iter().copied().collect();
        sorted.sort_by(|a, b| b.im.total_cmp(&a.im).then(a.re.total_cmp(&b.re)));
        for z in sorted {
            // Growing modes are reflected into the unit disk.
            let z = if z.norm() > 1.0 { z / z.norm_sqr() } else { z };
            let r = decay_from_modulus(z.norm(), dt);
            let arg = z.im.atan2(z.re);
            if z.im > 1e-10 * z.norm() && used + 2 <= k {
                modes.push(Mode::Pair { r, w: arg / dt });
                used += 2;
            } else if z.im.abs() <= 1e-10 * z.norm() && used < k {
                modes.push(Mode::Real { r });
                used += 1;
            }
        }
        while used < k {
            // Leftover conjugate members that could not form a pair.
            let r = modes.last().map_or(1.0 / dt, Mode::decay);
            modes.push(Mode::Real { r: 2.0 * r + 1.0 });
            used += 1;
        }
        modes
    }
}

fn decay_from_modulus(modulus: f64, dt: f64) -> f64 {
    if modulus <= 0.0 {
        700.0 / dt
    } else {
        (-modulus.ln() / dt).clamp(0.0, 700.0 / dt)
    }
}

/// Least-squares problem for a fixed set of modes.
struct Projection {
    coeffs: DVector<f64>,
    residual: DVector<f64>,
    basis: DMatrix<f64>,
    cost: f64,
}

fn basis_matrix(modes: &[Mode], times: &[f64]) -> DMatrix<f64> {
    let width: usize = modes.iter().map(Mode::width).sum();
    let mut m = DMatrix::zeros(times.len(), width);
    for (i, &t) in times.iter().enumerate() {
        let mut col = 0;
        for mode in modes {
            match *mode {
                Mode::Real { r } => {
                    m[(i, col)] = (-r * t).exp();
                    col += 1;
                }
                Mode::Pair { r, w } => {
                    let e = (-r * t).exp();
                    let (s, c) = (w * t).sin_cos();
                    m[(i, col)] = e * c;
                    m[(i, col + 1)] = e * s;
                    col += 2;
                }
            }
        }
    }
    m
}

fn project(modes: &[Mode], times: &[f64], y: &DVector<f64>) -> Projection {
    let basis = basis_matrix(modes, times);
    let coeffs = basis
        .clone()
        .svd(true, true)
        .solve(y, 1e-15)
        .expect("singular vectors were computed");
    let residual = y - &basis * &coeffs;
    let cost = residual.norm_squared();
    Projection { coeffs, residual, basis, cost }
}

fn params_of(modes: &[Mode]) -> Vec<f64> {
    let mut p = Vec::new();
    for m in modes {
        match *m {
            Mode::Real { r } => p.push(r),
            Mode::Pair { r, w } => {
                p.push(r);
                p.push(w);
            }
        }
    }
    p
}

fn modes_with(template: &[Mode], p: &[f64]) -> Vec<Mode> {
    let mut i = 0;
    template
        .iter()
        .map(|m| match m {
            Mode::Real { .. } => {
                i += 1;
                Mode::Real { r: p[i - 1].abs() }
            }
            Mode::Pair { .. } => {
                i += 2;
                Mode::Pair { r: p[i - 2].abs(), w: p[i - 1].abs() }
            }
        })
        .collect()
}

/// Kaufman Jacobian of the projected residual: `−P⊥ (∂Φ/∂θ_j) c`.
fn jacobian(modes: &[Mode], times: &[f64], proj: &Projection) -> DMatrix<f64> {
    let n = times.len();
    let p = params_of(modes).len();
    let mut d = DMatrix::zeros(n, p);
    let mut col = 0;
    let mut par = 0;
    for mode in modes {
        match *mode {
            Mode::Real { r } => {
                let a = proj.coeffs[col];
                for (i, &t) in times.iter().enumerate() {
                    d[(i, par)] = -t * (-r * t).exp() * a;
                }
                col += 1;
                par += 1;
            }
            Mode::Pair { r, w } => {
                let (a, b) = (proj.coeffs[col], proj.coeffs[col + 1]);
                for (i, &t) in times.iter().enumerate() {
                    let e = (-r * t).exp();
                    let (s, c) = (w * t).sin_cos();
                    let f = a * c + b * s;
                    d[(i, par)] = -t * e * f;
                    d[(i, par + 1)] = t * e * (-a * s + b * c);
                }
                col += 2;
                par += 2;
            }
        }
    }
    // Project out the span of the basis.
    let q = proj.basis.clone().qr().q();
    let qtd = q.transpose() * &d;
    -(d - q * qtd)
}

/// Variable-projection Levenberg–Marquardt on the nonlinear rates.
///
/// Steps that push any linear coefficient above the amplification bound are
/// rejected, which keeps nearly coincident modes from cancelling each other.
fn refine(start: Vec<Mode>, times: &[f64], y: &DVector<f64>) -> (Vec<Mode>, Projection) {
    let mut modes = start;
    let mut proj = project(&modes, times, y);
    let scale = y.norm_squared().max(f64::MIN_POSITIVE);
    let limit = (MAX_AMPLIFICATION * y.amax()).max(proj.coeffs.amax());
    let mut lambda = 1e-3;
    for _ in 0..MAX_REFINE_ITERATIONS {
        let jac = jacobian(&modes, times, &proj);
        let grad = jac.transpose() * &proj.residual;
        if grad.amax() <= GRADIENT_TOLERANCE * scale {
            break;
        }
        let jtj = jac.transpose() * &jac;
        let params = DVector::from_vec(params_of(&modes));
        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-30 * scale);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&grad))) else {
                lambda *= 10.0;
                continue;
            };
            let trial_params = &params + &step;
            let trial_modes = modes_with(&modes, trial_params.as_slice());
            let trial = project(&trial_modes, times, y);
            if trial.cost.is_finite() && trial.cost < proj.cost && trial.coeffs.amax() <= limit {
                let rel_gain = (proj.cost - trial.cost) / proj.cost.max(f64::MIN_POSITIVE);
                modes = trial_modes;
                proj = trial;
                lambda = (lambda * 0.3).max(1e-12);
                improved = rel_gain > 1e-15;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (modes, proj)
}

fn terms_of(modes: &[Mode], coeffs: &DVector<f64>) -> Vec<ExpTerm> {
    let mut out = Vec::new();
    let mut col = 0;
    for mode in modes {
        match *mode {
            Mode::Real { r } => {
                out.push(ExpTerm::new(Complex64::new(coeffs[col], 0.0), Complex64::new(r, 0.0)));
                col += 1;
            }
            Mode::Pair { r, w } => {
                // a cos ωt + b sin ωt = c e^{−(r+iω)t} + c* e^{−(r−iω)t}, c = (a + ib)/2
                let c = Complex64::new(0.5 * coeffs[col], 0.5 * coeffs[col + 1]);
                let rate = Complex64::new(r, w);
                out.push(ExpTerm::new(c, rate));
                out.push(ExpTerm::new(c.conj(), rate.conj()));
                col += 2;
            }
        }
    }
    out
}

fn sort_modes(modes: &mut [Mode], coeffs: &mut DVector<f64>) {
    // Order by decay rate, keeping coefficient blocks attached.
    let mut blocks: Vec<(Mode, Vec<f64>)> = Vec::new();
    let mut col = 0;
    for m in modes.iter() {
        let w = m.width();
        blocks.push((*m, coeffs.rows(col, w).iter().copied().collect()));
        col += w;
    }
    blocks.sort_by(|a, b| a.0.decay().total_cmp(&b.0.decay()));
    let mut col = 0;
    for (slot, (m, c)) in modes.iter_mut().zip(blocks) {
        *slot = m;
        for v in c {
            coeffs[col] = v;
            col += 1;
        }
    }
}

/// Outcome of fitting one real-valued part.
#[derive(Debug, Clone, PartialEq)]
pub struct PartFit {
    /// Exponential terms with complex pairs expanded, so `Σ terms` is real.
    pub terms: Vec<ExpTerm>,
    pub rms: f64,
    pub max_abs: f64,
}

/// Fit `k` exponentials to real uniform samples.
///
/// Complex rates come in conjugate pairs, so the reconstruction is real, and
/// every rate has a non-negative real part. The `k`-term result is never
/// worse (in the least-squares sense) than the `k−1`-term one: each count is
/// seeded both from the pencil and from the previous optimum plus one extra
/// mode.
pub fn prony_fit(samples: &[f64], dt: f64, k: usize) -> Result<Vec<ExpTerm>, FitError> {
    Ok(prony_fit_report(samples, dt, k)?.terms)
}

/// Same as [`prony_fit`] with residual statistics.
pub fn prony_fit_report(samples: &[f64], dt: f64, k: usize) -> Result<PartFit, FitError> {
    let n = samples.len();
    if k == 0 {
        return Err(FitError::InvalidStrategy("at least one term is required".into()));
    }
    if n < 10 * k {
        return Err(FitError::TooFewSamples { terms: k, needed: 10 * k, samples: n });
    }
    let pencil = Pencil::new(samples);
    if pencil.rank < k {
        return Err(FitError::RankDeficient { rank: pencil.rank, requested: k });
    }
    let times: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
    let y = DVector::from_column_slice(samples);

    let scale = y.amax();
    let mut best: Option<(Vec<Mode>, Projection)> = None;
    for count in 1..=k {
        let start = pencil.modes(count, dt);
        let plain = project(&start, &times, &y);
        let mut candidates = vec![(start.clone(), plain), refine(start, &times, &y)];
        if let Some((prev, _)) = &best {
            let slowest = prev.iter().map(Mode::decay).fold(f64::INFINITY, f64::min);
            let mut seeded = prev.clone();
            seeded.push(Mode::Real { r: 0.5 * slowest.min(1.0 / times[n - 1]) });
            candidates.push(refine(seeded, &times, &y));
        }
        // Least squares alone tends to buy small residual gains with large
        // cancelling amplitudes, which the hierarchy pays for. Among the
        // candidates that do not raise the residual, keep the one with the
        // smallest worst-case error.
        let bound = best.as_ref().map_or(f64::INFINITY, |b| b.1.cost);
        let admissible = |c: &(Vec<Mode>, Projection)| c.1.cost <= bound && c.1.coeffs.amax() <= MAX_AMPLIFICATION * scale;
        let eligible = candidates.iter().any(admissible);
        best = candidates
            .into_iter()
            .filter(|c| c.1.cost.is_finite() && (!eligible || admissible(c)))
            .min_by(|a, b| {
                if eligible {
                    a.1.residual.amax().total_cmp(&b.1.residual.amax()).then(a.1.cost.total_cmp(&b.1.cost))
                } else {
                    a.1.cost.total_cmp(&b.1.cost)
                }
            });
    }
    let (mut modes, proj) = best.expect("k >= 1");
    let mut coeffs = proj.coeffs.clone();
    sort_modes(&mut modes, &mut coeffs);
    let max_abs = proj.residual.amax();
    Ok(PartFit {
        terms: terms_of(&modes, &coeffs),
        rms: (proj.cost / n as f64).sqrt(),
        max_abs,
    })
}

/// Evaluate `Σ amplitude e^{−rate t}` on the grid `t = i·dt`.
pub fn reconstruct(terms: &[ExpTerm], dt: f64, n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|i| {
            let t = i as f64 * dt;
            terms.iter().map(|x| x.eval(t)).sum()
        })
        .collect()
}

/// Complex exponential decomposition of `C(t)` with conjugate partners.
#[derive(Debug, Clone, PartialEq)]
pub struct ExponentialSeries {
    pub eta: Vec<Complex64>,
    pub gamma: Vec<Complex64>,
    /// `partner[k] = k̄` with `gamma[k̄] == gamma[k].conj()`.
    pub partner: Vec<usize>,
}

impl ExponentialSeries {
    pub fn empty() -> Self {
        ExponentialSeries { eta: Vec::new(), gamma: Vec::new(), partner: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    pub fn eval(&self, t: f64) -> Complex64 {
        self.eta.iter().zip(&self.gamma).map(|(e, g)| e * (-g * t).exp()).sum()
    }

    pub fn eta_sum(&self) -> Complex64 {
        self.eta.iter().sum()
    }

    /// Checks the partner involution, exact conjugate rates and decay.
    pub fn validate(&self) -> Result<(), FitError> {
        let k = self.len();
        if self.gamma.len() != k || self.partner.len() != k {
            return Err(FitError::ConjugateClosure { index: 0, detail: "length mismatch".into() });
        }
        for i in 0..k {
            let p = self.partner[i];
            if p >= k || self.partner[p] != i {
                return Err(FitError::ConjugateClosure { index: i, detail: "partner map is not an involution".into() });
            }
            if self.gamma[p] != self.gamma[i].conj() {
                return Err(FitError::ConjugateClosure { index: i, detail: "partner rate is not the exact conjugate".into() });
            }
            if !(self.gamma[i].re >= 0.0) {
                return Err(FitError::ConjugateClosure { index: i, detail: format!("rate {} grows", self.gamma[i]) });
            }
        }
        Ok(())
    }
}

const CLOSURE_TOLERANCE: f64 = 1e-8;

fn close_enough(a: Complex64, b: Complex64) -> bool {
    (a - b).norm() <= CLOSURE_TOLERANCE * a.norm().max(b.norm()).max(1.0)
}

/// Pairs terms of one real part. Unpartnered complex terms get their
/// conjugate appended (the part then reads `2 Re[a e^{−γt}]`).
fn close_part(terms: &[ExpTerm], offset: usize) -> Result<(Vec<ExpTerm>, Vec<usize>), FitError> {
    let mut out: Vec<ExpTerm> = terms.to_vec();
    let mut partner = vec![usize::MAX; terms.len()];
    for i in 0..terms.len() {
        if partner[i] != usize::MAX {
            continue;
        }
        let t = terms[i];
        if t.rate.im == 0.0 {
            if t.amplitude.im.abs() > CLOSURE_TOLERANCE * t.amplitude.norm().max(1.0) {
                return Err(FitError::ConjugateClosure {
                    index: offset + i,
                    detail: format!("real rate {} carries complex amplitude {}", t.rate.re, t.amplitude),
                });
            }
            out[i].amplitude = Complex64::new(t.amplitude.re, 0.0);
            partner[i] = i;
            continue;
        }
        let found = (i + 1..terms.len())
            .find(|&j| partner[j] == usize::MAX && close_enough(terms[j].rate, t.rate.conj()));
        match found {
            Some(j) => {
                if !close_enough(terms[j].amplitude, t.amplitude.conj()) {
                    return Err(FitError::ConjugateClosure {
                        index: offset + j,
                        detail: format!("amplitude {} is not the conjugate of {}", terms[j].amplitude, t.amplitude),
                    });
                }
                out[j] = ExpTerm::new(t.amplitude.conj(), t.rate.conj());
                partner[i] = j;
                partner[j] = i;
            }
            None => {
                let j = out.len();
                out.push(ExpTerm::new(t.amplitude.conj(), t.rate.conj()));
                partner.push(i);
                partner[i] = j;
            }
        }
    }
    Ok((out, partner))
}

/// Merge the fits of `Re C` and `Im C` into `C(t) = Σ η_k e^{−γ_k t}`.
pub fn assemble_series(re_fit: &[ExpTerm], im_fit: &[ExpTerm]) -> Result<ExponentialSeries, FitError> {
    let (re, re_partner) = close_part(re_fit, 0)?;
    let (im, im_partner) = close_part(im_fit, re.len())?;
    let offset = re.len();
    let mut series = ExponentialSeries::empty();
    for t in &re {
        series.eta.push(t.amplitude);
        series.gamma.push(t.rate);
    }
    for t in &im {
        series.eta.push(Complex64::i() * t.amplitude);
        series.gamma.push(t.rate);
    }
    series.partner.extend(re_partner);
    series.partner.extend(im_partner.into_iter().map(|p| p + offset));
    series.validate()?;
    Ok(series)
}

/// Residuals of a series against sampled values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub max_abs_error: f64,
    pub rms_error: f64,
    pub re_max_abs_error: f64,
    pub re_rms_error: f64,
    pub im_max_abs_error: f64,
    pub im_rms_error: f64,
    pub n_samples: usize,
}

pub fn fit_report(series: &ExponentialSeries, samples: &TcfSamples) -> FitReport {
    let n = samples.values.len();
    let (mut max_abs, mut sq, mut re_max, mut re_sq, mut im_max, mut im_sq) = (0.0f64, 0.0, 0.0f64, 0.0, 0.0f64, 0.0);
    for (t, c) in samples.times().zip(&samples.values) {
        let d = series.eval(t) - c;
        max_abs = max_abs.max(d.norm());
        sq += d.norm_sqr();
        re_max = re_max.max(d.re.abs());
        re_sq += d.re * d.re;
        im_max = im_max.max(d.im.abs());
        im_sq += d.im * d.im;
    }
    let nf = n.max(1) as f64;
    FitReport {
        max_abs_error: max_abs,
        rms_error: (sq / nf).sqrt(),
        re_max_abs_error: re_max,
        re_rms_error: (re_sq / nf).sqrt(),
        im_max_abs_error: im_max,
        im_rms_error: (im_sq / nf).sqrt(),
        n_samples: n,
    }
}

/// Sample the exact correlation function and fit both parts.
pub fn fit_bath(
    spec: &BathSpec,
    strategy: &FitStrategy,
    quad: &QuadratureSpec,
    exec: Execution,
) -> Result<(ExponentialSeries, FitReport, TcfSamples), FitError> {
    let v = strategy.violations();
    if !v.is_empty() {
        return Err(FitError::InvalidStrategy(v.join("; ")));
    }
    let samples = sample_tcf(spec, strategy, quad, exec)?;
    let re = samples.real_part();
    let im = samples.imag_part();
    let dt = samples.dt;
    let fit_re = || prony_fit(&re, dt, strategy.k_real);
    let fit_im = || prony_fit(&im, dt, strategy.k_imag);
    let (re_terms, im_terms) = join(exec, fit_re, fit_im);
    let series = assemble_series(&re_terms?, &im_terms?)?;
    let report = fit_report(&series, &samples);
    Ok((series, report, samples))
}

fn join<A, B, RA, RB>(exec: Execution, a: A, b: B) -> (RA, RB)
where
    A: FnOnce() -> RA + Send,
    B: FnOnce() -> RB + Send,
    RA: Send,
    RB: Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return rayon::join(a, b);
    }
    let _ = exec;
    (a(), b())
}

#[derive(Serialize, Deserialize)]
struct TermRecord {
    eta_re: f64,
    eta_im: f64,
    gamma_re: f64,
    gamma_im: f64,
}

#[derive(Serialize, Deserialize)]
struct SeriesRecord {
    terms: Vec<TermRecord>,
    partner: Vec<usize>,
}

impl Serialize for ExponentialSeries {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        SeriesRecord {
            terms: self
                .eta
                .iter()
                .zip(&self.gamma)
                .map(|(e, g)| TermRecord { eta_re: e.re, eta_im: e.im, gamma_re: g.re, gamma_im: g.im })
                .collect(),
            partner: self.partner.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ExponentialSeries {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = SeriesRecord::deserialize(d)?;
        let series = ExponentialSeries {
            eta: r.terms.iter().map(|t| Complex64::new(t.eta_re, t.eta_im)).collect(),
            gamma: r.terms.iter().map(|t| Complex64::new(t.gamma_re, t.gamma_im)).collect(),
            partner: r.partner,
        };
        series.validate().map_err(serde::de::Error::custom)?;
        Ok(series)
    }
}

/// Fit artifact: the series together with its residual statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitArtifact {
    #[serde(flatten)]
    pub series: ExponentialSeries,
    pub errors: FitReport,
}
