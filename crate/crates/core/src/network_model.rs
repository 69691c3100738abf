//! Network primitives, assumption certificates and routing-chain absorption
//! matrices.
//!
//! A network is described by a substochastic routing matrix `Q`, a drift
//! vector `μ` and a covariance `Σ`. The reflection matrix is `R = (I − Q)ᵀ`.
//!
//! The routing chain `W` lives on `{0, 1, …, d}`: from station `i` it moves to
//! `j` with probability `Q_ij` and is absorbed at `0` with the remaining mass
//! `Q_i0 = 1 − Σ_j Q_ij`. For a subset `S` of stations, `Λ(S)_ij` is the
//! probability that the chain started at `i` enters `S` before absorption and
//! does so at `j`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::stats::normal_cdf;

/// Relative tolerance for the Cholesky reconstruction check.
const CHOLESKY_TOL: f64 = 1e-12;
/// Relative tolerance below which a negative entry of `R⁻¹` still counts as nonnegative.
const M_MATRIX_TOL: f64 = 1e-12;
/// Neumann series terms below this max-entry are dropped.
const NEUMANN_TOL: f64 = 1e-14;
const NEUMANN_MAX_TERMS: usize = 1_000_000;

/// Default horizon for the contraction envelope fit.
pub const DEFAULT_N_MAX: usize = 50;
/// Default cap on the fitted envelope constant.
pub const DEFAULT_KAPPA_CAP: f64 = 1e6;

/// Model file layout: `{"d": int, "Q": [[...]], "mu": [...], "Sigma": [[...]]}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelFile {
    pub d: usize,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    #[serde(rename = "Sigma")]
    pub sigma: Vec<Vec<f64>>,
}

impl ModelFile {
    pub fn into_model(self) -> Result<NetworkModel> {
        let d = self.d;
        let q = rows_to_matrix(d, &self.q, "Q")?;
        let sigma = rows_to_matrix(d, &self.sigma, "Sigma")?;
        if self.mu.len() != d {
            return Err(Error::DimensionMismatch(format!("mu has length {} but d = {d}", self.mu.len())));
        }
        validate_model(q, DVector::from_vec(self.mu), sigma)
    }
}

impl From<&NetworkModel> for ModelFile {
    fn from(m: &NetworkModel) -> Self {
        ModelFile {
            d: m.d,
            q: matrix_to_rows(&m.q),
            mu: m.mu.iter().copied().collect(),
            sigma: matrix_to_rows(&m.sigma),
        }
    }
}

fn rows_to_matrix(d: usize, rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(Error::DimensionMismatch(format!("{name} must be {d}x{d}")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

/// A validated network: routing, drift, covariance and the derived
/// reflection matrix and Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub d: usize,
    pub q: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// `R = (I − Q)ᵀ`.
    pub r: DMatrix<f64>,
    /// Lower-triangular `C` with `CCᵀ = Σ`.
    pub chol: DMatrix<f64>,
}

impl NetworkModel {
    /// Marginal variances `σ_i² = Σ_ii`.
    pub fn variances(&self) -> Vec<f64> {
        (0..self.d).map(|i| self.sigma[(i, i)]).collect()
    }

    pub fn max_variance(&self) -> f64 {
        self.variances().into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Short content hash used to tag output files.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(&ModelFile::from(self)).unwrap_or_default();
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Checks the primitives and derives `R` and `C`.
pub fn validate_model(q: DMatrix<f64>, mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<NetworkModel> {
    let d = mu.len();
    if d == 0 {
        return Err(Error::DimensionMismatch("d must be positive".into()));
    }
    if q.shape() != (d, d) || sigma.shape() != (d, d) {
        return Err(Error::DimensionMismatch(format!(
            "Q is {:?}, Sigma is {:?}, mu has length {d}",
            q.shape(),
            sigma.shape()
        )));
    }
    if q.iter().chain(mu.iter()).chain(sigma.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("model entries must be finite".into()));
    }
    for i in 0..d {
        if q[(i, i)] != 0.0 {
            return Err(Error::NonSubstochastic(format!("Q[{i}][{i}] = {} is nonzero", q[(i, i)])));
        }
        let mut row_sum = 0.0;
        for j in 0..d {
            if q[(i, j)] < 0.0 {
                return Err(Error::NonSubstochastic(format!("Q[{i}][{j}] = {} < 0", q[(i, j)])));
            }
            row_sum += q[(i, j)];
        }
        if row_sum > 1.0 {
            return Err(Error::NonSubstochastic(format!("row {i} sums to {row_sum} > 1")));
        }
    }
    let sigma_max = sigma.amax();
    for i in 0..d {
        for j in 0..i {
            if (sigma[(i, j)] - sigma[(j, i)]).abs() > CHOLESKY_TOL * sigma_max {
                return Err(Error::NotPositiveDefinite(format!("Sigma is not symmetric at ({i},{j})")));
            }
        }
    }
    let chol =
        sigma.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))?.l();
    let recon = &chol * chol.transpose() - &sigma;
    if recon.amax() > CHOLESKY_TOL * sigma_max {
        return Err(Error::NotPositiveDefinite(format!("Cholesky reconstruction error {:e} too large", recon.amax())));
    }
    let r = (DMatrix::identity(d, d) - &q).transpose();
    Ok(NetworkModel { d, q, mu, sigma, r, chol })
}

/// Envelope `κ₀(1−β₀)ⁿ ≥ ‖𝟏ᵀQⁿ‖∞` fitted on `n ≤ n_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionFit {
    pub kappa0: f64,
    pub beta0: f64,
}

impl ContractionFit {
    pub fn b1(&self) -> f64 {
        self.kappa0 / self.beta0
    }
}

/// `‖𝟏ᵀQⁿ‖∞` for `n = 0..=n_max`.
pub fn column_sum_norms(q: &DMatrix<f64>, n_max: usize) -> Vec<f64> {
    let d = q.nrows();
    let mut v = DVector::from_element(d, 1.0).transpose();
    let mut out = Vec::with_capacity(n_max + 1);
    out.push(v.amax());
    for _ in 0..n_max {
        v = &v * q;
        out.push(v.amax());
    }
    out
}

/// Fits `(κ₀, β₀)` over the grid `β₀ ∈ {0.01, …, 0.99}`.
///
/// For each grid value `κ₀(β₀) = max_n ‖𝟏ᵀQⁿ‖∞ / (1−β₀)ⁿ`; among grid points
/// with `κ₀ ≤ kappa_cap` the one with the smallest `b₁ = κ₀/β₀` wins, ties
/// going to the larger `β₀`.
pub fn fit_contraction(model: &NetworkModel, n_max: usize) -> Result<ContractionFit> {
    fit_contraction_capped(model, n_max, DEFAULT_KAPPA_CAP)
}

pub fn fit_contraction_capped(model: &NetworkModel, n_max: usize, kappa_cap: f64) -> Result<ContractionFit> {
    if n_max < 2 {
        return Err(Error::InvalidArgument(format!("n_max = {n_max} must be at least 2")));
    }
    let norms = column_sum_norms(&model.q, n_max);
    let tail = norms[n_max];
    let mid = norms[n_max / 2];
    if tail > 0.0 {
        let rate = (tail / mid).powf(1.0 / (n_max - n_max / 2) as f64);
        if !(rate < 1.0 - 1e-9) {
            return Err(Error::NoContraction(format!(
                "||1^T Q^n|| does not decay: {mid:e} at n = {}, {tail:e} at n = {n_max}",
                n_max / 2
            )));
        }
    }

    let mut best: Option<ContractionFit> = None;
    for step in 1..=99 {
        let beta = step as f64 / 100.0;
        let kappa = envelope_constant(&norms, beta);
        if !(kappa <= kappa_cap) {
            continue;
        }
        let cand = ContractionFit { kappa0: kappa, beta0: beta };
        best = match best {
            None => Some(cand),
            Some(b) if cand.b1() <= b.b1() * (1.0 + 1e-12) => Some(cand),
            keep => keep,
        };
    }
    best.ok_or_else(|| Error::NoContraction(format!("no grid beta0 keeps kappa0 <= {kappa_cap:e}")))
}

/// Smallest float `κ` with `κ(1−β)ⁿ ≥ norms[n]` for every `n` in floating point.
fn envelope_constant(norms: &[f64], beta: f64) -> f64 {
    let decay = |n: usize| (1.0 - beta).powi(n as i32);
    let mut kappa = norms.iter().enumerate().map(|(n, &a)| a / decay(n)).fold(0.0, f64::max);
    while norms.iter().enumerate().any(|(n, &a)| kappa * decay(n) < a) {
        kappa = kappa.next_up();
    }
    kappa
}

/// Certified constants of assumptions A1–A3 and the derived quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCertificate {
    pub d: usize,
    pub kappa0: f64,
    pub beta0: f64,
    pub delta0: f64,
    pub b0: f64,
    /// `κ₀/β₀`.
    pub b1: f64,
    /// `δ₀β₀/(2κ₀)`.
    pub delta1: f64,
    /// `Φ(√b₀(δ₀ − b₁²))`.
    pub p0: f64,
    /// `min(min(β₀, 1/3)/3, d·p₀)`; nonpositive means no certified β exists.
    pub beta_max: f64,
    pub beta_feasible: bool,
    pub sigma_max2: f64,
    pub n_max: usize,
    /// How the β-range of the convergence theorem was parsed.
    pub beta_range_reading: String,
}

impl AssumptionCertificate {
    /// `μ⁺ = μ + δ₁𝟏`, the drift removed from the dominating driver.
    pub fn mu_plus(&self, model: &NetworkModel) -> DVector<f64> {
        model.mu.map(|m| m + self.delta1)
    }

    /// Whether `beta` lies in the certified open range `(0, beta_max]`.
    pub fn beta_in_range(&self, beta: f64) -> bool {
        beta > 0.0 && beta <= self.beta_max
    }
}

/// Fits the contraction envelope and certifies A1–A3.
pub fn certify(model: &NetworkModel, n_max: usize) -> Result<AssumptionCertificate> {
    let fit = fit_contraction(model, n_max)?;
    certify_with(model, fit, n_max)
}

/// Certifies A2–A3 for externally supplied contraction constants.
pub fn certify_with(model: &NetworkModel, fit: ContractionFit, n_max: usize) -> Result<AssumptionCertificate> {
    if !(fit.beta0 > 0.0 && fit.beta0 < 1.0 && fit.kappa0 > 0.0) {
        return Err(Error::InvalidArgument(format!("invalid contraction constants {fit:?}")));
    }
    let r_inv = reflection_inverse(&model.r)?;
    if !is_nonnegative(&r_inv) {
        return Err(Error::NotMMatrix);
    }
    let drift = &r_inv * &model.mu;
    let mut delta0 = f64::INFINITY;
    for (i, &v) in drift.iter().enumerate() {
        if v >= 0.0 {
            return Err(Error::Unstable { index: i, value: v });
        }
        delta0 = delta0.min(-v);
    }
    let variances = model.variances();
    let sigma_max2 = variances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sigma_min2 = variances.iter().copied().fold(f64::INFINITY, f64::min);
    let b0 = sigma_max2.max(1.0 / sigma_min2).max(1.0);
    let b1 = fit.kappa0 / fit.beta0;
    let delta1 = delta0 * fit.beta0 / (2.0 * fit.kappa0);
    let p0 = normal_cdf(b0.sqrt() * (delta0 - b1 * b1));
    let beta_max = (fit.beta0.min(1.0 / 3.0) / 3.0).min(model.d as f64 * p0);
    Ok(AssumptionCertificate {
        d: model.d,
        kappa0: fit.kappa0,
        beta0: fit.beta0,
        delta0,
        b0,
        b1,
        delta1,
        p0,
        beta_max,
        beta_feasible: beta_max > 0.0,
        sigma_max2,
        n_max,
        beta_range_reading: "beta < min(beta0, 1/3) / 3".into(),
    })
}

/// Inverse of `R`, or `Singular`.
pub fn reflection_inverse(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !r.is_square() {
        return Err(Error::DimensionMismatch(format!("R is {:?}", r.shape())));
    }
    let inv = r.clone().try_inverse().ok_or(Error::Singular)?;
    if inv.iter().any(|x| !x.is_finite()) {
        return Err(Error::Singular);
    }
    Ok(inv)
}

fn is_nonnegative(inv: &DMatrix<f64>) -> bool {
    let floor = -M_MATRIX_TOL * inv.amax();
    inv.iter().all(|&x| x >= floor)
}

/// `true` iff `R⁻¹` exists and is entrywise nonnegative (up to `10⁻¹²·‖R⁻¹‖max`).
pub fn check_m_matrix(r: &DMatrix<f64>) -> Result<bool> {
    reflection_inverse(r).map(|inv| is_nonnegative(&inv))
}

/// Subset of `{0, …, d−1}` stored as a bit mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SubsetMask {
    d: usize,
    bits: u64,
}

impl SubsetMask {
    pub fn new(d: usize, bits: u64) -> Result<Self> {
        if d == 0 || d > 64 {
            return Err(Error::InvalidArgument(format!("subset masks support 1 <= d <= 64, got {d}")));
        }
        let all = Self::all_bits(d);
        if bits & !all != 0 {
            return Err(Error::InvalidArgument(format!("mask {bits:#x} has bits beyond d = {d}")));
        }
        Ok(SubsetMask { d, bits })
    }

    pub fn from_indices(d: usize, members: &[usize]) -> Result<Self> {
        let mut bits = 0u64;
        for &i in members {
            if i >= d {
                return Err(Error::InvalidArgument(format!("index {i} out of range for d = {d}")));
            }
            bits |= 1 << i;
        }
        Self::new(d, bits)
    }

    pub fn full(d: usize) -> Self {
        SubsetMask { d, bits: Self::all_bits(d) }
    }

    fn all_bits(d: usize) -> u64 {
        if d == 64 {
            u64::MAX
        } else {
            (1u64 << d) - 1
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn contains(&self, i: usize) -> bool {
        i < self.d && self.bits >> i & 1 == 1
    }

    pub fn complement(&self) -> Self {
        SubsetMask { d: self.d, bits: !self.bits & Self::all_bits(self.d) }
    }

    pub fn members(&self) -> Vec<usize> {
        (0..self.d).filter(|&i| self.contains(i)).collect()
    }

    pub fn len(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn is_full(&self) -> bool {
        self.bits == Self::all_bits(self.d)
    }
}

/// Closed form of `Λ(S)`: identity on `S×S`, zero columns outside `S`, and
/// `Λ_{S̄S} = (I − Q_{S̄S̄})⁻¹ Q_{S̄S} = −(R_{SS̄} R_{S̄S̄}⁻¹)ᵀ` computed by the
/// Neumann series of the substochastic block.
pub fn lambda_matrix(model: &NetworkModel, s: SubsetMask) -> Result<DMatrix<f64>> {
    let d = model.d;
    if s.dim() != d {
        return Err(Error::DimensionMismatch(format!("subset over {} stations, model has {d}", s.dim())));
    }
    let inside = s.members();
    let outside = s.complement().members();
    let mut lambda = DMatrix::zeros(d, d);
    for &i in &inside {
        lambda[(i, i)] = 1.0;
    }
    if inside.is_empty() || outside.is_empty() {
        return Ok(lambda);
    }
    let q_oo = DMatrix::from_fn(outside.len(), outside.len(), |a, b| model.q[(outside[a], outside[b])]);
    let q_oi = DMatrix::from_fn(outside.len(), inside.len(), |a, b| model.q[(outside[a], inside[b])]);

    let mut term = q_oi.clone();
    let mut acc = q_oi;
    let mut converged = false;
    for _ in 0..NEUMANN_MAX_TERMS {
        term = &q_oo * &term;
        if term.iter().any(|x| !x.is_finite()) {
            break;
        }
        acc += &term;
        if term.amax() < NEUMANN_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SingularBlock(format!(
            "Neumann series for (I - Q_SbarSbar)^-1 did not converge on complement {outside:?}"
        )));
    }
    for (a, &i) in outside.iter().enumerate() {
        for (b, &j) in inside.iter().enumerate() {
            lambda[(i, j)] = acc[(a, b)];
        }
    }
    Ok(lambda)
}

/// Monte Carlo estimate of `Λ(S)` and its entrywise standard errors.
#[derive(Debug, Clone)]
pub struct LambdaEstimate {
    pub estimate: DMatrix<f64>,
    pub std_err: DMatrix<f64>,
    pub reps: usize,
}

const ORACLE_BLOCK: usize = 4096;

/// Estimates `Λ(S)` by simulating the routing chain directly.
///
/// Each starting station outside `S` runs `reps` chains; replication blocks
/// draw from streams derived from `(seed, start, block)`.
pub fn lambda_oracle(model: &NetworkModel, s: SubsetMask, reps: usize, seed: u64) -> Result<LambdaEstimate> {
    let d = model.d;
    if s.dim() != d {
        return Err(Error::DimensionMismatch(format!("subset over {} stations, model has {d}", s.dim())));
    }
    if reps == 0 {
        return Err(Error::InvalidArgument("reps must be positive".into()));
    }
    // Cumulative transition rows; mass beyond the last entry is absorption.
    // Negative entries are clamped so a corrupted Q still yields a proper law.
    let cumulative: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            let mut acc = 0.0;
            (0..d)
                .map(|j| {
                    acc += model.q[(i, j)].max(0.0);
                    acc
                })
                .collect()
        })
        .collect();

    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..d)
        .into_par_iter()
        .map(|start| {
            if s.contains(start) {
                let mut est = vec![0.0; d];
                est[start] = 1.0;
                return (est, vec![0.0; d]);
            }
            let blocks = reps.div_ceil(ORACLE_BLOCK);
            let counts = (0..blocks)
                .into_par_iter()
                .map(|block| {
                    let n = ORACLE_BLOCK.min(reps - block * ORACLE_BLOCK);
                    let mut rng = rng::stream(rng::derive_path(seed, &[start as u64, block as u64]));
                    let mut counts = vec![0usize; d];
                    for _ in 0..n {
                        if let Some(j) = run_chain(&cumulative, &s, start, &mut rng) {
                            counts[j] += 1;
                        }
                    }
                    counts
                })
                .reduce(
                    || vec![0usize; d],
                    |mut a, b| {
                        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                        a
                    },
                );
            let est: Vec<f64> = counts.iter().map(|&c| c as f64 / reps as f64).collect();
            let se = est.iter().map(|p| (p * (1.0 - p) / reps as f64).sqrt()).collect();
            (est, se)
        })
        .collect();

    let estimate = DMatrix::from_fn(d, d, |i, j| rows[i].0[j]);
    let std_err = DMatrix::from_fn(d, d, |i, j| rows[i].1[j]);
    Ok(LambdaEstimate { estimate, std_err, reps })
}

/// Runs the chain from `start ∉ S` until it enters `S` (returns the entry
/// station) or is absorbed (returns `None`).
fn run_chain<R: Rng>(cumulative: &[Vec<f64>], s: &SubsetMask, start: usize, rng: &mut R) -> Option<usize> {
    let mut state = start;
    loop {
        let u: f64 = rng.random();
        let row = &cumulative[state];
        let next = row.iter().position(|&c| u < c)?;
        if s.contains(next) {
            return Some(next);
        }
        state = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tandem() -> NetworkModel {
        validate_model(
            DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.0, 0.0]),
            DVector::from_vec(vec![-1.0, -1.0]),
            DMatrix::identity(2, 2),
        )
        .unwrap()
    }

    fn one_d(mu: f64) -> NetworkModel {
        validate_model(DMatrix::zeros(1, 1), DVector::from_vec(vec![mu]), DMatrix::identity(1, 1)).unwrap()
    }

    #[test]
    fn one_dimensional_identity_case() {
        let m = one_d(-1.0);
        assert_eq!(m.r[(0, 0)], 1.0);
        assert_eq!(m.chol[(0, 0)], 1.0);
    }

    #[test]
    fn tandem_reflection_matrix() {
        let m = tandem();
        assert_eq!(m.r, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -0.5, 1.0]));
    }

    #[test]
    fn rejects_bad_routing() {
        let sigma = DMatrix::identity(2, 2);
        let mu = DVector::from_vec(vec![-1.0, -1.0]);
        let heavy = DMatrix::from_row_slice(2, 2, &[0.0, 1.2, 0.0, 0.0]);
        assert!(matches!(validate_model(heavy, mu.clone(), sigma.clone()), Err(Error::NonSubstochastic(_))));
        let negative = DMatrix::from_row_slice(2, 2, &[0.0, -0.1, 0.0, 0.0]);
        assert!(matches!(validate_model(negative, mu.clone(), sigma.clone()), Err(Error::NonSubstochastic(_))));
        let diag = DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.0]);
        assert!(matches!(validate_model(diag, mu.clone(), sigma), Err(Error::NonSubstochastic(_))));
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            validate_model(DMatrix::zeros(2, 2), mu.clone(), indefinite),
            Err(Error::NotPositiveDefinite(_))
        ));
        assert!(matches!(
            validate_model(DMatrix::zeros(3, 3), mu, DMatrix::identity(3, 3)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn contraction_fit_examples() {
        let zero =
            validate_model(DMatrix::zeros(3, 3), DVector::from_element(3, -1.0), DMatrix::identity(3, 3)).unwrap();
        let fit = fit_contraction(&zero, DEFAULT_N_MAX).unwrap();
        assert_eq!(fit.kappa0, 1.0);
        assert_eq!(fit.beta0, 0.99);

        let fit = fit_contraction(&tandem(), DEFAULT_N_MAX).unwrap();
        assert_eq!(fit.kappa0, 1.0);
        assert_eq!(fit.beta0, 0.5);
        // envelope (1, 0.5, 0.25) dominates norms (1, 0.5, 0)
        let norms = column_sum_norms(&tandem().q, 2);
        assert_eq!(norms, vec![1.0, 0.5, 0.0]);

        let swap = validate_model(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            DVector::from_element(2, -1.0),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        assert!(matches!(fit_contraction(&swap, DEFAULT_N_MAX), Err(Error::NoContraction(_))));
        assert!(fit_contraction(&swap, 1).is_err());
    }

    #[test]
    fn certificate_one_dimensional() {
        let m = one_d(-1.0);
        let cert = certify_with(&m, ContractionFit { kappa0: 1.0, beta0: 0.5 }, DEFAULT_N_MAX).unwrap();
        assert_eq!(cert.delta0, 1.0);
        assert_eq!(cert.b1, 2.0);
        assert_eq!(cert.delta1, 0.25);
        assert_eq!(cert.b0, 1.0);
        assert_relative_eq!(cert.p0, 1.349_898_031_630_094_6e-3, max_relative = 1e-10);
        assert_relative_eq!(cert.beta_max, (1.0f64 / 9.0).min(cert.p0), max_relative = 1e-15);
        assert!(matches!(certify(&one_d(1.0), DEFAULT_N_MAX), Err(Error::Unstable { index: 0, .. })));
    }

    #[test]
    fn certificate_tandem_delta0() {
        let cert = certify(&tandem(), DEFAULT_N_MAX).unwrap();
        // R^-1 mu = (-1, -1.5)
        assert_relative_eq!(cert.delta0, 1.0, epsilon = 1e-15);
        assert_relative_eq!(cert.delta1, cert.delta0 * cert.beta0 / (2.0 * cert.kappa0));
    }

    #[test]
    fn m_matrix_examples() {
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -0.5, 1.0]);
        assert!(check_m_matrix(&r).unwrap());
        let inv = reflection_inverse(&r).unwrap();
        assert_relative_eq!(inv, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]), epsilon = 1e-15);
        assert!(check_m_matrix(&DMatrix::identity(3, 3)).unwrap());
        assert!(!check_m_matrix(&DMatrix::from_row_slice(2, 2, &[1.0, -2.0, -2.0, 1.0])).unwrap());
        assert!(matches!(check_m_matrix(&DMatrix::zeros(2, 2)), Err(Error::Singular)));
    }

    #[test]
    fn subset_mask_complements() {
        let s = SubsetMask::from_indices(5, &[0, 3]).unwrap();
        let c = s.complement();
        assert_eq!(c.members(), vec![1, 2, 4]);
        assert_eq!(s.bits() & c.bits(), 0);
        assert!(SubsetMask::full(5).is_full());
        assert!(SubsetMask::from_indices(3, &[3]).is_err());
        assert!(SubsetMask::full(64).is_full());
    }

    #[test]
    fn lambda_examples() {
        let m = tandem();
        assert_eq!(lambda_matrix(&m, SubsetMask::full(2)).unwrap(), DMatrix::identity(2, 2));
        let l = lambda_matrix(&m, SubsetMask::from_indices(2, &[1]).unwrap()).unwrap();
        assert_eq!(l[(0, 1)], 0.5);
        assert_eq!(l[(1, 1)], 1.0);
        assert_eq!(l[(0, 0)], 0.0);

        let zero =
            validate_model(DMatrix::zeros(4, 4), DVector::from_element(4, -1.0), DMatrix::identity(4, 4)).unwrap();
        let s = SubsetMask::from_indices(4, &[1, 2]).unwrap();
        let l = lambda_matrix(&zero, s).unwrap();
        for i in [0, 3] {
            for j in 0..4 {
                assert_eq!(l[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn lambda_matches_block_inverse_formula() {
        // three-station network with feedback; compare against -(R_SSb R_SbSb^-1)^T
        let q = DMatrix::from_row_slice(3, 3, &[0.0, 0.3, 0.2, 0.4, 0.0, 0.1, 0.25, 0.25, 0.0]);
        let m = validate_model(q, DVector::from_element(3, -1.0), DMatrix::identity(3, 3)).unwrap();
        let s = SubsetMask::from_indices(3, &[0]).unwrap();
        let l = lambda_matrix(&m, s).unwrap();
        let ins = [0usize];
        let out = [1usize, 2];
        let r_so = DMatrix::from_fn(1, 2, |a, b| m.r[(ins[a], out[b])]);
        let r_oo = DMatrix::from_fn(2, 2, |a, b| m.r[(out[a], out[b])]);
        let block = -(r_so * r_oo.try_inverse().unwrap()).transpose();
        for (a, &i) in out.iter().enumerate() {
            assert_relative_eq!(l[(i, 0)], block[(a, 0)], epsilon = 1e-13);
        }
    }

    #[test]
    fn oracle_examples() {
        let m = tandem();
        let full = lambda_oracle(&m, SubsetMask::full(2), 1000, 1).unwrap();
        assert_eq!(full.estimate, DMatrix::identity(2, 2));
        assert_eq!(full.std_err.amax(), 0.0);

        let s = SubsetMask::from_indices(2, &[1]).unwrap();
        let est = lambda_oracle(&m, s, 100_000, 7).unwrap();
        let exact = lambda_matrix(&m, s).unwrap();
        let diff = (est.estimate[(0, 1)] - exact[(0, 1)]).abs();
        assert!(diff <= 3.0 * est.std_err[(0, 1)], "diff {diff} se {}", est.std_err[(0, 1)]);

        let zero =
            validate_model(DMatrix::zeros(3, 3), DVector::from_element(3, -1.0), DMatrix::identity(3, 3)).unwrap();
        let est = lambda_oracle(&zero, SubsetMask::from_indices(3, &[2]).unwrap(), 1000, 3).unwrap();
        assert_eq!(est.estimate[(0, 2)], 0.0);
        assert_eq!(est.estimate[(1, 2)], 0.0);
    }

    #[test]
    fn oracle_is_reproducible() {
        let m = tandem();
        let s = SubsetMask::from_indices(2, &[1]).unwrap();
        let a = lambda_oracle(&m, s, 5000, 11).unwrap();
        let b = lambda_oracle(&m, s, 5000, 11).unwrap();
        assert_eq!(a.estimate, b.estimate);
    }
}
