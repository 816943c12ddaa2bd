//! Dissipaton equation of motion for a two-level system with a single
//! dissipation mode.
//!
//! The hierarchy couples dissipaton density operators (DDOs) `ρ_n`, indexed by
//! occupation vectors `n = (n_1, …, n_K)`:
//!
//! ```text
//! ρ̇_n = −(i L_S + Σ_k n_k γ_k) ρ_n − i Σ_k [Q, ρ_{n_k^+}]
//!       − i Σ_k n_k (η′_k [Q, ρ_{n_k^−}] + i η″_k {Q, ρ_{n_k^−}})
//! ```
//!
//! Internally each DDO is stored rescaled, `ρ_n = Π_k √(n_k!) s_k^{n_k} ρ̃_n`,
//! which keeps the magnitudes of all tiers comparable so that one absolute
//! filter tolerance is meaningful across the hierarchy. With
//! [`DdoScaling::Unit`] every `s_k = 1` and only the factorials remain.
//!
//! Storage is an arena: keys are appended once and never move, neighbour
//! indices are resolved at insertion, and an active list selects the entries
//! that are propagated.

use std::collections::HashMap;

use nalgebra::Matrix2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::expfit::ExponentialSeries;
use crate::observables::{ObservableError, Trajectory};

pub type Mat2 = Matrix2<Complex64>;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };
const NONE: u32 = u32::MAX;

fn c(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

pub fn sigma_x() -> Mat2 {
    Mat2::new(c(0.0), c(1.0), c(1.0), c(0.0))
}

pub fn sigma_z() -> Mat2 {
    Mat2::new(c(1.0), c(0.0), c(0.0), c(-1.0))
}

/// `|0⟩⟨0|`, the state with `P = +1`.
pub fn spin_up() -> Mat2 {
    Mat2::new(c(1.0), c(0.0), c(0.0), c(0.0))
}

/// `|1⟩⟨1|`, the state with `P = −1`.
pub fn spin_down() -> Mat2 {
    Mat2::new(c(0.0), c(0.0), c(0.0), c(1.0))
}

/// Largest entry modulus.
pub fn max_abs(m: &Mat2) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn max_norm(m: &Mat2) -> f64 {
    m.iter().map(|z| z.re.abs().max(z.im.abs())).fold(0.0, f64::max)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeomError {
    #[error("hierarchy with {count} DDOs exceeds the cap of {cap}; lower the tier or enable filtering")]
    TooManyKeys { count: u128, cap: usize },
    #[error("invalid hierarchy parameters: {0}")]
    InvalidParams(String),
    #[error("non-finite DDO at key {key:?}, t = {t}")]
    NonFinite { key: Vec<u8>, t: f64 },
    #[error("reduced density matrix diverged (‖ρ‖ = {norm:e}) at t = {t}; raise the tier or lower dt")]
    Diverged { t: f64, norm: f64 },
    #[error("unphysical reduced density matrix at t = {t}: {source}")]
    Unphysical { t: f64, source: ObservableError },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Two-level system `H_S = ε σ_z + Δ σ_x` with coupling operator `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub epsilon: f64,
    pub delta: f64,
    pub q_op: Mat2,
    pub rho0: Mat2,
}

impl SystemSpec {
    /// `Q = σ_z`, `ρ(0) = |0⟩⟨0|`.
    pub fn new(epsilon: f64, delta: f64) -> Self {
        SystemSpec { epsilon, delta, q_op: sigma_z(), rho0: spin_up() }
    }

    pub fn with_rho0(mut self, rho0: Mat2) -> Self {
        self.rho0 = rho0;
        self
    }

    pub fn hamiltonian(&self) -> Mat2 {
        sigma_z() * c(self.epsilon) + sigma_x() * c(self.delta)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.epsilon.is_finite() || !self.delta.is_finite() {
            out.push("epsilon and delta must be finite".into());
        }
        if max_abs(&(self.q_op - self.q_op.adjoint())) > 1e-12 {
            out.push("q_op must be Hermitian".into());
        }
        let r = &self.rho0;
        if max_abs(&(r - r.adjoint())) > 1e-12 {
            out.push("rho0 must be Hermitian".into());
        }
        if (r.trace() - c(1.0)).norm() > 1e-12 {
            out.push(format!("rho0 must have unit trace, got {}", r.trace()));
        }
        if crate::observables::eigenvalues(r)[0] < -1e-12 {
            out.push("rho0 must be positive semidefinite".into());
        }
        out
    }
}

/// Symmetric and antisymmetric amplitude splits entering the hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct DeomCoefficients {
    pub gamma: Vec<Complex64>,
    pub partner: Vec<usize>,
    /// `η′_k = (η_k + η*_{k̄})/2`
    pub eta_prime: Vec<Complex64>,
    /// `η″_k = (η_k − η*_{k̄})/(2i)`
    pub eta_dprime: Vec<Complex64>,
    /// `(|η_k| + |η_{k̄}|)/2`, used for rescaling.
    pub magnitude: Vec<f64>,
}

impl DeomCoefficients {
    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }
}

pub fn deom_coefficients(series: &ExponentialSeries) -> DeomCoefficients {
    let k = series.len();
    let mut out = DeomCoefficients {
        gamma: series.gamma.clone(),
        partner: series.partner.clone(),
        eta_prime: Vec::with_capacity(k),
        eta_dprime: Vec::with_capacity(k),
        magnitude: Vec::with_capacity(k),
    };
    for i in 0..k {
        let eta = series.eta[i];
        let bar = series.eta[series.partner[i]].conj();
        out.eta_prime.push((eta + bar) * 0.5);
        out.eta_dprime.push((eta - bar) / (2.0 * I));
        out.magnitude.push(0.5 * (eta.norm() + bar.norm()));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DdoScaling {
    /// `s_k = 1`.
    Unit,
    /// `s_k = √((|η_k| + |η_{k̄}|)/2)`.
    #[default]
    Amplitude,
}

impl DdoScaling {
    pub fn factors(self, coeffs: &DeomCoefficients) -> Vec<f64> {
        coeffs
            .magnitude
            .iter()
            .map(|&m| match self {
                DdoScaling::Unit => 1.0,
                DdoScaling::Amplitude if m > 0.0 => m.sqrt(),
                DdoScaling::Amplitude => 1.0,
            })
            .collect()
    }
}

pub const DEFAULT_MAX_KEYS: usize = 2_000_000;
pub const DIVERGENCE_NORM: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchyParams {
    pub tier: usize,
    pub dt: f64,
    /// `None` or `0` disables filtering.
    pub filter_tol: Option<f64>,
    pub t_final: f64,
    /// Record every `stride` steps.
    pub stride: usize,
    pub max_keys: usize,
    pub scaling: DdoScaling,
    pub execution: Execution,
}

impl Default for HierarchyParams {
    fn default() -> Self {
        HierarchyParams {
            tier: 20,
            dt: 0.0025,
            filter_tol: Some(5e-7),
            t_final: 20.0,
            stride: 40,
            max_keys: DEFAULT_MAX_KEYS,
            scaling: DdoScaling::Amplitude,
            execution: Execution::Parallel,
        }
    }
}

impl HierarchyParams {
    pub fn filter(&self) -> Option<f64> {
        self.filter_tol.filter(|&t| t > 0.0)
    }

    pub fn n_steps(&self) -> u64 {
        (self.t_final / self.dt).round() as u64
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.tier < 1 || self.tier > u8::MAX as usize {
            out.push(format!("tier = {} must lie in 1..=255", self.tier));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            out.push(format!("dt = {} must be positive", self.dt));
        }
        if let Some(tol) = self.filter_tol {
            if !(tol >= 0.0) {
                out.push(format!("filter_tol = {tol} must be non-negative"));
            }
        }
        if !(self.t_final >= 0.0 && self.t_final.is_finite()) {
            out.push(format!("t_final = {} must be non-negative", self.t_final));
        }
        if self.stride < 1 {
            out.push("stride must be at least 1".into());
        }
        if self.max_keys < 1 {
            out.push("max_keys must be at least 1".into());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DdoKey {
    pub occupation: Vec<u8>,
}

impl DdoKey {
    pub fn root(k: usize) -> Self {
        DdoKey { occupation: vec![0; k] }
    }

    pub fn tier(&self) -> usize {
        tier_of(&self.occupation)
    }
}

fn tier_of(key: &[u8]) -> usize {
    key.iter().map(|&n| n as usize).sum()
}

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: u64, k: u64) -> u128 {
    let k = k.min(n - k.min(n));
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// All keys of `k_terms` modes up to `tier`, in graded lexicographic order.
pub fn build_index_set(k_terms: usize, tier: usize, cap: usize) -> Result<Vec<DdoKey>, DeomError> {
    let count = binomial((tier + k_terms) as u64, k_terms as u64);
    if count > cap as u128 {
        return Err(DeomError::TooManyKeys { count, cap });
    }
    if tier > u8::MAX as usize {
        return Err(DeomError::InvalidParams(format!("tier {tier} exceeds 255")));
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut cur = vec![0u8; k_terms];
    for t in 0..=tier {
        compositions(&mut cur, 0, t, &mut out);
    }
    Ok(out)
}

fn compositions(cur: &mut [u8], pos: usize, remaining: usize, out: &mut Vec<DdoKey>) {
    if pos + 1 >= cur.len() {
        if let Some(last) = cur.last_mut() {
            *last = remaining as u8;
        } else if remaining > 0 {
            return;
        }
        out.push(DdoKey { occupation: cur.to_vec() });
        return;
    }
    for v in (0..=remaining).rev() {
        cur[pos] = v as u8;
        compositions(cur, pos + 1, remaining - v, out);
    }
    cur[pos] = 0;
}

/// Hierarchy state: an arena of keys with neighbour tables and scaled values.
#[derive(Debug, Clone)]
pub struct DdoStore {
    k: usize,
    tier_cap: usize,
    max_keys: usize,
    scale: Vec<f64>,
    keys: Vec<u8>,
    lookup: HashMap<Vec<u8>, u32>,
    up: Vec<u32>,
    down: Vec<u32>,
    values: Vec<Mat2>,
    active: Vec<u32>,
    is_active: Vec<bool>,
}

impl DdoStore {
    /// Only the root, active, holding `rho0`.
    pub fn root_only(k: usize, tier_cap: usize, max_keys: usize, scale: Vec<f64>, rho0: Mat2) -> Self {
        assert_eq!(scale.len(), k);
        let mut s = DdoStore {
            k,
            tier_cap,
            max_keys,
            scale,
            keys: Vec::new(),
            lookup: HashMap::new(),
            up: Vec::new(),
            down: Vec::new(),
            values: Vec::new(),
            active: vec![0],
            is_active: Vec::new(),
        };
        s.insert(&vec![0; k]).expect("cap admits the root");
        s.is_active[0] = true;
        s.values[0] = rho0;
        s
    }

    /// The complete hierarchy, all entries active, higher tiers zero.
    pub fn full(k: usize, tier_cap: usize, max_keys: usize, scale: Vec<f64>, rho0: Mat2) -> Result<Self, DeomError> {
        let keys = build_index_set(k, tier_cap, max_keys)?;
        let mut s = DdoStore::root_only(k, tier_cap, max_keys, scale, rho0);
        s.keys.reserve(keys.len() * k);
        for key in keys.iter().skip(1) {
            let i = s.insert(&key.occupation)?;
            s.is_active[i as usize] = true;
        }
        s.active = (0..s.len() as u32).collect();
        Ok(s)
    }

    pub fn n_modes(&self) -> usize {
        self.k
    }

    pub fn tier_cap(&self) -> usize {
        self.tier_cap
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    /// Number of entries in the arena, active or not.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    pub fn active_indices(&self) -> &[u32] {
        &self.active
    }

    pub fn key(&self, i: usize) -> &[u8] {
        &self.keys[i * self.k..(i + 1) * self.k]
    }

    pub fn index_of(&self, key: &[u8]) -> Option<usize> {
        self.lookup.get(key).map(|&i| i as usize)
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.is_active[i]
    }

    /// `Π √(n_k!) s_k^{n_k}`.
    fn factor(&self, key: &[u8]) -> f64 {
        let mut f = 1.0;
        for (k, &n) in key.iter().enumerate() {
            for j in 1..=n as u32 {
                f *= (j as f64).sqrt() * self.scale[k];
            }
        }
        f
    }

    /// Physical (unscaled) DDO; zero for absent or inactive keys.
    pub fn get(&self, key: &[u8]) -> Mat2 {
        match self.index_of(key) {
            Some(i) if self.is_active[i] => self.values[i] * c(self.factor(key)),
            _ => Mat2::zeros(),
        }
    }

    pub fn get_scaled(&self, i: usize) -> Mat2 {
        self.values[i]
    }

    /// Store a physical DDO, creating and activating the key if needed.
    pub fn set(&mut self, key: &[u8], rho: Mat2) -> Result<(), DeomError> {
        let i = self.insert(key)? as usize;
        if !self.is_active[i] {
            self.is_active[i] = true;
            self.active.push(i as u32);
            self.active.sort_unstable();
        }
        self.values[i] = rho * c(1.0 / self.factor(key));
        Ok(())
    }

    pub fn root(&self) -> Mat2 {
        self.values[0]
    }

    pub fn max_active_tier(&self) -> usize {
        self.active.iter().map(|&i| tier_of(self.key(i as usize))).max().unwrap_or(0)
    }

    /// Arena index of `key`, appending and linking it when absent.
    fn insert(&mut self, key: &[u8]) -> Result<u32, DeomError> {
        debug_assert_eq!(key.len(), self.k);
        if let Some(&i) = self.lookup.get(key) {
            return Ok(i);
        }
        if tier_of(key) > self.tier_cap {
            return Err(DeomError::InvalidParams(format!("key {key:?} exceeds tier {}", self.tier_cap)));
        }
        if self.len() >= self.max_keys {
            return Err(DeomError::TooManyKeys { count: self.len() as u128 + 1, cap: self.max_keys });
        }
        let i = self.len() as u32;
        self.keys.extend_from_slice(key);
        self.lookup.insert(key.to_vec(), i);
        self.up.extend(std::iter::repeat_n(NONE, self.k));
        self.down.extend(std::iter::repeat_n(NONE, self.k));
        self.values.push(Mat2::zeros());
        self.is_active.push(false);
        let mut probe = key.to_vec();
        for k in 0..self.k {
            if key[k] < u8::MAX {
                probe[k] += 1;
                if let Some(&j) = self.lookup.get(&probe) {
                    self.up[i as usize * self.k + k] = j;
                    self.down[j as usize * self.k + k] = i;
                }
                probe[k] -= 1;
            }
            if key[k] > 0 {
                probe[k] -= 1;
                if let Some(&j) = self.lookup.get(&probe) {
                    self.down[i as usize * self.k + k] = j;
                    self.up[j as usize * self.k + k] = i;
                }
                probe[k] += 1;
            }
        }
        Ok(i)
    }

    fn up_neighbor(&mut self, i: usize, k: usize) -> Result<Option<u32>, DeomError> {
        let j = self.up[i * self.k + k];
        if j != NONE {
            return Ok(Some(j));
        }
        if tier_of(self.key(i)) >= self.tier_cap {
            return Ok(None);
        }
        let mut key = self.key(i).to_vec();
        key[k] += 1;
        self.insert(&key).map(Some)
    }

    fn down_neighbor(&mut self, i: usize, k: usize) -> Result<Option<u32>, DeomError> {
        let j = self.down[i * self.k + k];
        if j != NONE {
            return Ok(Some(j));
        }
        if self.key(i)[k] == 0 {
            return Ok(None);
        }
        let mut key = self.key(i).to_vec();
        key[k] -= 1;
        self.insert(&key).map(Some)
    }

    fn deactivate(&mut self, i: usize) {
        self.is_active[i] = false;
        self.values[i] = Mat2::zeros();
    }
}

/// Deactivate and zero every non-root entry whose scaled max-norm is below
/// `tol`. A non-positive `tol` leaves the store unchanged.
pub fn filter_prune(store: &mut DdoStore, tol: f64) {
    if !(tol > 0.0) {
        return;
    }
    let active = std::mem::take(&mut store.active);
    let mut kept = Vec::with_capacity(active.len());
    for i in active {
        if i == 0 || max_norm(&store.values[i as usize]) >= tol {
            kept.push(i);
        } else {
            store.deactivate(i as usize);
        }
    }
    store.active = kept;
}

/// Precomputed per-mode factors of the scaled equation of motion.
#[derive(Debug, Clone)]
struct Kernel {
    h: Mat2,
    q: Mat2,
    gamma: Vec<Complex64>,
    /// Up-neighbour factor `s_k` (times `√(n_k + 1)`).
    up: Vec<Complex64>,
    /// `(η″ − iη′)/s_k` and `(η″ + iη′)/s_k` (times `√n_k`).
    down_left: Vec<Complex64>,
    down_right: Vec<Complex64>,
    sqrt: Vec<f64>,
}

impl Kernel {
    fn new(sys: &SystemSpec, coeffs: &DeomCoefficients, scale: &[f64]) -> Self {
        let k = coeffs.len();
        let mut kern = Kernel {
            h: sys.hamiltonian(),
            q: sys.q_op,
            gamma: coeffs.gamma.clone(),
            up: Vec::with_capacity(k),
            down_left: Vec::with_capacity(k),
            down_right: Vec::with_capacity(k),
            sqrt: (0..=u8::MAX as usize + 1).map(|n| (n as f64).sqrt()).collect(),
        };
        for i in 0..k {
            let (ep, edp, s) = (coeffs.eta_prime[i], coeffs.eta_dprime[i], scale[i]);
            kern.up.push(c(s));
            kern.down_left.push((edp - I * ep) / s);
            kern.down_right.push((edp + I * ep) / s);
        }
        kern
    }

    fn rhs(&self, store: &DdoStore, src: &[Mat2], i: usize) -> Mat2 {
        let k_modes = store.k;
        let key = store.key(i);
        let rho = src[i];
        let mut damp = Complex64::new(0.0, 0.0);
        let mut upper = Mat2::zeros();
        let mut left = Mat2::zeros();
        let mut right = Mat2::zeros();
        let up = &store.up[i * k_modes..(i + 1) * k_modes];
        let down = &store.down[i * k_modes..(i + 1) * k_modes];
        for k in 0..k_modes {
            let n = key[k] as usize;
            let u = up[k];
            if u != NONE {
                upper += src[u as usize] * (self.up[k] * self.sqrt[n + 1]);
            }
            if n > 0 {
                damp += self.gamma[k] * n as f64;
                let d = down[k];
                if d != NONE {
                    let r = src[d as usize];
                    left += r * (self.down_left[k] * self.sqrt[n]);
                    right += r * (self.down_right[k] * self.sqrt[n]);
                }
            }
        }
        let q = &self.q;
        -(self.h * rho - rho * self.h) * I - rho * damp - (q * upper - upper * q) * I + q * left + right * q
    }
}

/// Time derivative of every arena entry (zero for inactive ones), in the
/// scaled representation of the store.
pub fn deom_rhs(store: &DdoStore, sys: &SystemSpec, coeffs: &DeomCoefficients, exec: Execution) -> Vec<Mat2> {
    let kernel = Kernel::new(sys, coeffs, &store.scale);
    let mut k = vec![Mat2::zeros(); store.n_active()];
    eval(&kernel, store, &store.values, &mut k, exec);
    let mut out = vec![Mat2::zeros(); store.len()];
    for (p, &i) in store.active.iter().enumerate() {
        out[i as usize] = k[p];
    }
    out
}

fn eval(kernel: &Kernel, store: &DdoStore, src: &[Mat2], out: &mut [Mat2], exec: Execution) {
    let active = &store.active;
    exec::for_each_indexed(exec, out, |p, o| *o = kernel.rhs(store, src, active[p] as usize));
}

/// Work buffers of the low-storage RK-4 scheme.
#[derive(Debug, Clone, Default)]
struct Rk4Buffers {
    stage: Vec<Mat2>,
    acc: Vec<Mat2>,
    k: Vec<Mat2>,
}

impl Rk4Buffers {
    fn step(&mut self, kernel: &Kernel, store: &mut DdoStore, dt: f64, exec: Execution) {
        let n = store.n_active();
        self.stage.resize(store.len(), Mat2::zeros());
        self.acc.resize(n, Mat2::zeros());
        self.k.resize(n, Mat2::zeros());
        let (h2, h3, h6, h) = (c(dt / 2.0), c(dt / 3.0), c(dt / 6.0), c(dt));

        eval(kernel, store, &store.values, &mut self.k, exec);
        for (p, &i) in store.active.iter().enumerate() {
            let (i, y) = (i as usize, store.values[i as usize]);
            self.acc[p] = y + self.k[p] * h6;
            self.stage[i] = y + self.k[p] * h2;
        }
        for (weight, advance) in [(h3, h2), (h3, h)] {
            eval(kernel, store, &self.stage, &mut self.k, exec);
            for (p, &i) in store.active.iter().enumerate() {
                let i = i as usize;
                self.acc[p] += self.k[p] * weight;
                self.stage[i] = store.values[i] + self.k[p] * advance;
            }
        }
        eval(kernel, store, &self.stage, &mut self.k, exec);
        for (p, &i) in store.active.iter().enumerate() {
            store.values[i as usize] = self.acc[p] + self.k[p] * h6;
        }
    }
}

/// One classical RK-4 step of all active entries.
pub fn rk4_step(
    store: &mut DdoStore,
    sys: &SystemSpec,
    coeffs: &DeomCoefficients,
    dt: f64,
    exec: Execution,
) -> Result<(), DeomError> {
    let kernel = Kernel::new(sys, coeffs, &store.scale);
    Rk4Buffers::default().step(&kernel, store, dt, exec);
    check_finite(store, f64::NAN)
}

fn check_finite(store: &DdoStore, t: f64) -> Result<(), DeomError> {
    for &i in &store.active {
        if !store.values[i as usize].iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(DeomError::NonFinite { key: store.key(i as usize).to_vec(), t });
        }
    }
    Ok(())
}

/// Stepper owning the hierarchy, its coefficients and work buffers.
#[derive(Debug, Clone)]
pub struct Propagator {
    sys: SystemSpec,
    series: ExponentialSeries,
    params: HierarchyParams,
    kernel: Kernel,
    store: DdoStore,
    buffers: Rk4Buffers,
    step: u64,
    max_tier: usize,
}

impl Propagator {
    pub fn new(sys: &SystemSpec, series: &ExponentialSeries, params: &HierarchyParams) -> Result<Self, DeomError> {
        let mut v = params.violations();
        v.extend(sys.violations());
        if let Err(e) = series.validate() {
            v.push(e.to_string());
        }
        if !series.is_empty() && max_abs(&(sys.q_op - sys.q_op.adjoint())) > 0.0 {
            v.push("q_op must be exactly Hermitian".into());
        }
        if !v.is_empty() {
            return Err(DeomError::InvalidParams(v.join("; ")));
        }
        let coeffs = deom_coefficients(series);
        let scale = params.scaling.factors(&coeffs);
        let k = series.len();
        let store = match params.filter() {
            None => DdoStore::full(k, params.tier, params.max_keys, scale, sys.rho0)?,
            Some(_) => DdoStore::root_only(k, params.tier, params.max_keys, scale, sys.rho0),
        };
        let mut p = Propagator::assemble(sys, series, params, &coeffs, store);
        if let Some(tol) = params.filter() {
            refresh_active(&mut p.store, &p.kernel, tol)?;
        }
        Ok(p)
    }

    fn assemble(
        sys: &SystemSpec,
        series: &ExponentialSeries,
        params: &HierarchyParams,
        coeffs: &DeomCoefficients,
        store: DdoStore,
    ) -> Self {
        Propagator {
            sys: sys.clone(),
            series: series.clone(),
            params: *params,
            kernel: Kernel::new(sys, coeffs, &store.scale),
            store,
            buffers: Rk4Buffers::default(),
            step: 0,
            max_tier: 0,
        }
    }

    pub fn system(&self) -> &SystemSpec {
        &self.sys
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.params.dt
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn store(&self) -> &DdoStore {
        &self.store
    }

    pub fn params(&self) -> &HierarchyParams {
        &self.params
    }

    pub fn rho(&self) -> Mat2 {
        self.store.root()
    }

    pub fn step(&mut self) -> Result<(), DeomError> {
        self.buffers.step(&self.kernel, &mut self.store, self.params.dt, self.params.execution);
        self.step += 1;
        let t = self.time();
        let root = self.store.root();
        let norm = max_norm(&root);
        if !norm.is_finite() {
            return Err(DeomError::NonFinite { key: self.store.key(0).to_vec(), t });
        }
        if norm > DIVERGENCE_NORM {
            return Err(DeomError::Diverged { t, norm });
        }
        if let Some(tol) = self.params.filter() {
            // Deactivated entries must not leak stale stage values.
            for i in refresh_active(&mut self.store, &self.kernel, tol)? {
                if let Some(s) = self.buffers.stage.get_mut(i as usize) {
                    *s = Mat2::zeros();
                }
            }
        }
        Ok(())
    }

    fn record(&mut self, traj: &mut Trajectory) -> Result<(), DeomError> {
        let t = self.time();
        check_finite(&self.store, t)?;
        self.max_tier = self.max_tier.max(self.store.max_active_tier());
        traj.max_tier = self.max_tier;
        traj.push(t, self.store.root(), self.store.n_active())
            .map_err(|source| DeomError::Unphysical { t, source })
    }

    /// Step to `params.t_final`, recording every `stride` steps and at the
    /// end.
    pub fn run(&mut self) -> Result<Trajectory, DeomError> {
        let mut traj = Trajectory::default();
        self.run_into(&mut traj)?;
        Ok(traj)
    }

    pub fn run_into(&mut self, traj: &mut Trajectory) -> Result<(), DeomError> {
        self.run_until(self.params.n_steps(), traj)
    }

    /// Step up to (and including) step number `last`.
    pub fn run_until(&mut self, last: u64, traj: &mut Trajectory) -> Result<(), DeomError> {
        let stride = self.params.stride as u64;
        if traj.is_empty() {
            self.record(traj)?;
        }
        while self.step < last {
            self.step()?;
            if self.step.is_multiple_of(stride) || self.step == last {
                self.record(traj)?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let s = &self.store;
        Checkpoint {
            version: Checkpoint::VERSION,
            params: self.params,
            series: self.series.clone(),
            step: self.step,
            n_modes: s.k,
            keys: s.keys.clone(),
            active: s.active.clone(),
            values: s.active.iter().map(|&i| pack(&s.values[i as usize])).collect(),
            max_tier: self.max_tier,
        }
    }

    pub fn resume(sys: &SystemSpec, cp: &Checkpoint) -> Result<Self, DeomError> {
        if cp.version != Checkpoint::VERSION {
            return Err(DeomError::Checkpoint(format!("unsupported version {}", cp.version)));
        }
        if cp.n_modes != cp.series.len()
            || !cp.keys.len().is_multiple_of(cp.n_modes.max(1))
            || cp.active.len() != cp.values.len()
        {
            return Err(DeomError::Checkpoint("inconsistent sizes".into()));
        }
        let mut v = cp.params.violations();
        v.extend(sys.violations());
        if let Err(e) = cp.series.validate() {
            v.push(e.to_string());
        }
        if !v.is_empty() {
            return Err(DeomError::InvalidParams(v.join("; ")));
        }
        let coeffs = deom_coefficients(&cp.series);
        let scale = cp.params.scaling.factors(&coeffs);
        let k = cp.n_modes;
        let mut s = DdoStore::root_only(k, cp.params.tier, cp.params.max_keys, scale, Mat2::zeros());
        s.is_active[0] = false;
        for key in cp.keys.chunks(k.max(1)).skip(1) {
            s.insert(key)?;
        }
        if k > 0 && s.len() * k != cp.keys.len() {
            return Err(DeomError::Checkpoint("duplicate keys".into()));
        }
        s.active = cp.active.clone();
        for (&i, v) in cp.active.iter().zip(&cp.values) {
            let i = i as usize;
            if i >= s.len() {
                return Err(DeomError::Checkpoint(format!("active index {i} out of range")));
            }
            s.is_active[i] = true;
            s.values[i] = unpack(v);
        }
        let mut p = Propagator::assemble(sys, &cp.series, &cp.params, &coeffs, s);
        p.step = cp.step;
        p.max_tier = cp.max_tier;
        Ok(p)
    }
}

/// Slowest relaxation rate assumed when estimating a DDO's steady size.
const MIN_DAMPING: f64 = 1e-3;

/// Rebuild the active list: the root, every entry at or above `tol`, and
/// every entry that a significant neighbour feeds strongly enough. The feed
/// estimate is the neighbour's source term divided by the entry's own
/// damping rate, its quasi-steady size. Entries that drop out are zeroed;
/// pruned entries re-enter through the same test.
fn refresh_active(store: &mut DdoStore, kernel: &Kernel, tol: f64) -> Result<Vec<u32>, DeomError> {
    let old = std::mem::take(&mut store.active);
    let q = max_abs(&kernel.q);
    let mut next = Vec::with_capacity(old.len() + 16);
    let mut key = vec![0u8; store.k];
    for &i in &old {
        let norm = max_norm(&store.values[i as usize]);
        if i != 0 && norm < tol {
            continue;
        }
        next.push(i);
        key.copy_from_slice(store.key(i as usize));
        let damping: f64 = key.iter().zip(&kernel.gamma).map(|(&n, g)| n as f64 * g.re).sum();
        let tier = tier_of(&key);
        for k in 0..store.k {
            let n = key[k] as usize;
            if tier < store.tier_cap {
                let coupling = q * (kernel.down_left[k].norm() + kernel.down_right[k].norm()) * kernel.sqrt[n + 1];
                let target = damping + kernel.gamma[k].re;
                if coupling * norm / target.max(MIN_DAMPING) >= tol {
                    if let Some(j) = store.up_neighbor(i as usize, k)? {
                        next.push(j);
                    }
                }
            }
            if n > 0 {
                let coupling = 2.0 * q * kernel.up[k].norm() * kernel.sqrt[n];
                let target = damping - kernel.gamma[k].re;
                if coupling * norm / target.max(MIN_DAMPING) >= tol {
                    if let Some(j) = store.down_neighbor(i as usize, k)? {
                        next.push(j);
                    }
                }
            }
        }
    }
    next.sort_unstable();
    next.dedup();
    for &i in &old {
        store.is_active[i as usize] = false;
    }
    for &i in &next {
        store.is_active[i as usize] = true;
    }
    let mut dropped = Vec::new();
    for &i in &old {
        if !store.is_active[i as usize] {
            store.values[i as usize] = Mat2::zeros();
            dropped.push(i);
        }
    }
    store.active = next;
    Ok(dropped)
}

fn pack(m: &Mat2) -> [f64; 8] {
    [m[(0, 0)].re, m[(0, 0)].im, m[(0, 1)].re, m[(0, 1)].im, m[(1, 0)].re, m[(1, 0)].im, m[(1, 1)].re, m[(1, 1)].im]
}

fn unpack(v: &[f64; 8]) -> Mat2 {
    Mat2::new(
        Complex64::new(v[0], v[1]),
        Complex64::new(v[2], v[3]),
        Complex64::new(v[4], v[5]),
        Complex64::new(v[6], v[7]),
    )
}

/// Resumable snapshot at a step boundary. Values are the scaled DDOs of the
/// active entries, row-major `[re, im]` pairs; `keys` is the flat arena key
/// table so that arena indices are reproduced exactly on resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub params: HierarchyParams,
    pub series: ExponentialSeries,
    pub step: u64,
    pub n_modes: usize,
    pub keys: Vec<u8>,
    pub active: Vec<u32>,
    pub values: Vec<[f64; 8]>,
    pub max_tier: usize,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;
}

/// Propagate from the factorized initial state to `params.t_final`.
pub fn propagate(sys: &SystemSpec, series: &ExponentialSeries, params: &HierarchyParams) -> Result<Trajectory, DeomError> {
    Propagator::new(sys, series, params)?.run()
}
