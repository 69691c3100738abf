//! Closed-form rate machinery: the Lyapunov function `h(y; θ)`, its
//! derivatives, the parameter selection for the convergence bound, the
//! bounds themselves, the relaxation time, and a numerical checker of the
//! drift conditions behind the moment-generating-function estimate.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network_model::{AssumptionCertificate, NetworkModel};
use crate::rng;

/// Tolerance added to the drift and reflection inequalities.
pub const DRIFT_TOL: f64 = 1e-10;
/// Relative central difference step for the gradient cross-check.
pub const FD_STEP: f64 = 1e-6;
/// Relative tolerance of the gradient cross-check.
pub const FD_REL_TOL: f64 = 1e-5;
/// Points closer than this to the kink `θy_i = 1` skip the gradient cross-check.
const KINK_GUARD: f64 = 1e-3;

/// `g(y) = y²/2` on `[0, 1]`, `y − 1/2` above.
pub fn g_fn(y: f64) -> Result<f64> {
    if !(y >= 0.0) {
        return Err(Error::NegativeInput(y));
    }
    Ok(g_raw(y))
}

fn g_raw(y: f64) -> f64 {
    if y <= 1.0 {
        0.5 * y * y
    } else {
        y - 0.5
    }
}

/// `g′(y) = min(y, 1)` for `y ≥ 0`.
pub fn g_prime(y: f64) -> f64 {
    y.min(1.0)
}

/// `g″` with the left-limit convention `g″(1) = 1`.
pub fn g_second(y: f64) -> f64 {
    if y <= 1.0 {
        1.0
    } else {
        0.0
    }
}

fn check_point(y: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::DimensionMismatch("empty point".into()));
    }
    match y.iter().position(|v| !(*v >= 0.0)) {
        Some(i) => Err(Error::NegativeInput(y[i])),
        None => Ok(()),
    }
}

/// Soft-max weights `w_i ∝ exp(g(θy_i)/ε)` and the log-sum-exp value `h`.
fn softmax(y: &[f64], theta: f64, epsilon: f64) -> (f64, Vec<f64>) {
    let a: Vec<f64> = y.iter().map(|&v| g_raw(theta * v) / epsilon).collect();
    let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|ai| (ai - m).exp()).collect();
    let s: f64 = e.iter().sum();
    let h = epsilon * (m + s.ln());
    (h, e.into_iter().map(|ei| ei / s).collect())
}

/// `h(y; θ) = ε log Σ_i exp(g(θy_i)/ε)`, evaluated with a max shift.
pub fn lyapunov_h(y: &[f64], theta: f64, epsilon: f64) -> Result<f64> {
    check_point(y)?;
    check_positive(theta, "theta")?;
    check_positive(epsilon, "epsilon")?;
    Ok(softmax(y, theta, epsilon).0)
}

fn check_positive(v: f64, name: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} = {v} must be positive")))
    }
}

/// `Dh_i = w_i g′(θy_i) θ`.
pub fn gradient(y: &[f64], theta: f64, epsilon: f64) -> Result<DVector<f64>> {
    check_point(y)?;
    let (_, w) = softmax(y, theta, epsilon);
    Ok(DVector::from_iterator(y.len(), y.iter().zip(&w).map(|(&v, wi)| wi * g_prime(theta * v) * theta)))
}

/// `D²h = θ²[diag(w g″) + ε⁻¹(diag(w g′²) − (w g′)(w g′)ᵀ)]`.
pub fn hessian(y: &[f64], theta: f64, epsilon: f64) -> Result<DMatrix<f64>> {
    check_point(y)?;
    let d = y.len();
    let (_, w) = softmax(y, theta, epsilon);
    let gp: Vec<f64> = y.iter().map(|&v| g_prime(theta * v)).collect();
    let gs: Vec<f64> = y.iter().map(|&v| g_second(theta * v)).collect();
    let wg: Vec<f64> = (0..d).map(|i| w[i] * gp[i]).collect();
    let t2 = theta * theta;
    Ok(DMatrix::from_fn(d, d, |i, j| {
        let mut v = -wg[i] * wg[j] / epsilon;
        if i == j {
            v += w[i] * gs[i] + w[i] * gp[i] * gp[i] / epsilon;
        }
        t2 * v
    }))
}

/// Central difference of `h` along `e_j` with step `step`, computed from the
/// change of a single log-sum-exp term so that tiny weights keep full
/// relative precision. The divisor is the exactly represented distance
/// between the two perturbed points.
pub fn fd_partial(y: &[f64], j: usize, theta: f64, epsilon: f64, step: f64) -> f64 {
    let (up, down) = (y[j] + step, (y[j] - step).max(0.0));
    let a_plus = g_raw(theta * up) / epsilon;
    let a_minus = g_raw(theta * down) / epsilon;
    let rest: Vec<f64> =
        y.iter().enumerate().filter(|&(i, _)| i != j).map(|(_, &v)| g_raw(theta * v) / epsilon).collect();
    let m = rest.iter().copied().fold(a_plus.max(a_minus), f64::max);
    let s_rest: f64 = rest.iter().map(|b| (b - m).exp()).sum();
    let num = (a_minus - m).exp() * (a_plus - a_minus).exp_m1();
    let den = s_rest + (a_minus - m).exp();
    epsilon * (num / den).ln_1p() / (up - down)
}

/// Finite-difference step for coordinate value `v`: `10⁻⁶·max(1, v)`.
pub fn fd_step(v: f64) -> f64 {
    FD_STEP * v.max(1.0)
}

/// Upper bound on the moment-generating function of the geometric-trial
/// overshoot:
/// `1 + 2(1−p)⁻¹θ log(1+d) e^{θ log(1+d)^{2/3}} + θ d e^{−log(1+d)^{4/3}/(3b₀)}`.
pub fn phi_d_bound(theta: f64, d: usize, p: f64, b0: f64) -> f64 {
    let l = (1.0 + d as f64).ln();
    1.0 + 2.0 / (1.0 - p) * theta * l * (theta * l.powf(2.0 / 3.0)).exp()
        + theta * d as f64 * (-l.powf(4.0 / 3.0) / (3.0 * b0)).exp()
}

/// Constants of the convergence bound for one `(d, β)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundParameters {
    pub d: usize,
    pub beta: f64,
    /// `β²/(2d² log d)`.
    pub epsilon: f64,
    /// `(ε/(2ε+1))·δ₁/((1+d) max σ²)`.
    pub theta: f64,
    /// `θδ₁/(2(1+d))`.
    pub chi: f64,
    /// `min(p₀, β/d)`.
    pub p: f64,
    /// `δ₁β²/(2 max σ²)`.
    pub zeta0: f64,
    /// `δ₁²β²/(16 max σ²)`.
    pub zeta1: f64,
    pub phi_d: f64,
    /// `φ_d(θ) exp(χ + ε log d)`.
    pub select_theta_lhs: f64,
    /// `1/((1−p)(1+p))`.
    pub select_theta_rhs: f64,
    pub select_theta_pass: bool,
    /// `β/d ≤ p₀`.
    pub geo1_pass: bool,
    /// `β ≤ beta_max` of the certificate.
    pub beta_in_range: bool,
}

impl BoundParameters {
    pub fn flags_pass(&self) -> bool {
        self.select_theta_pass && self.geo1_pass
    }
}

/// Parameter selection for `d ≥ 3`, the range in which the argument runs.
pub fn select_parameters(cert: &AssumptionCertificate, d: usize, beta: f64) -> Result<BoundParameters> {
    if d < 3 {
        return Err(Error::DimensionTooSmall(d));
    }
    compute_parameters(cert, d, beta)
}

/// The same formulas without the `d ≥ 3` requirement; `d = 1` is rejected
/// because `log d` vanishes.
pub fn compute_parameters(cert: &AssumptionCertificate, d: usize, beta: f64) -> Result<BoundParameters> {
    if d < 2 {
        return Err(Error::DimensionTooSmall(d));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidArgument(format!("beta = {beta} must lie in (0, 1)")));
    }
    let df = d as f64;
    let log_d = df.ln();
    let s2 = cert.sigma_max2;
    let epsilon = beta * beta / (2.0 * df * df * log_d);
    let theta = epsilon / (2.0 * epsilon + 1.0) * cert.delta1 / ((1.0 + df) * s2);
    let chi = theta * cert.delta1 / (2.0 * (1.0 + df));
    let p = cert.p0.min(beta / df);
    let zeta0 = cert.delta1 * beta * beta / (2.0 * s2);
    let zeta1 = cert.delta1 * cert.delta1 * beta * beta / (16.0 * s2);
    let phi_d = phi_d_bound(theta, d, p, cert.b0);
    let select_theta_lhs = phi_d * (chi + epsilon * log_d).exp();
    let select_theta_rhs = 1.0 / ((1.0 - p) * (1.0 + p));
    Ok(BoundParameters {
        d,
        beta,
        epsilon,
        theta,
        chi,
        p,
        zeta0,
        zeta1,
        phi_d,
        select_theta_lhs,
        select_theta_rhs,
        select_theta_pass: select_theta_lhs <= select_theta_rhs,
        geo1_pass: beta / df <= cert.p0,
        beta_in_range: cert.beta_in_range(beta),
    })
}

fn norms(y: &[f64]) -> (f64, f64) {
    let l1 = y.iter().map(|v| v.abs()).sum();
    let linf = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (l1, linf)
}

/// Upper bound on `E[(1−β)^{𝒩(t;y)}]`:
/// `exp(ζ₀‖y‖∞/(d³ log d) + β/d²) · exp(−ζ₁t/(d⁴ log d)) / (1−β)`.
pub fn prop5_bound(params: &BoundParameters, y: &[f64], t: f64) -> f64 {
    let df = params.d as f64;
    let log_d = df.ln();
    let (_, linf) = norms(y);
    (params.zeta0 * linf / (df.powi(3) * log_d) + params.beta / (df * df)).exp()
        * (-params.zeta1 * t / (df.powi(4) * log_d)).exp()
        / (1.0 - params.beta)
}

/// The bracket `κ₀‖y‖₁ exp(ζ₀‖y‖∞/(d³ log d)) + √(κ₀b₀/(δ₀β₀))`.
fn theorem1_bracket(params: &BoundParameters, cert: &AssumptionCertificate, y: &[f64]) -> f64 {
    let df = params.d as f64;
    let (l1, linf) = norms(y);
    cert.kappa0 * l1 * (params.zeta0 * linf / (df.powi(3) * df.ln())).exp()
        + (cert.kappa0 * cert.b0 / (cert.delta0 * cert.beta0)).sqrt()
}

/// Wasserstein bound
/// `3d·exp(−ζ₁t/(d⁴ log d))·(κ₀‖y‖₁ exp(ζ₀‖y‖∞/(d³ log d)) + √(κ₀b₀/(δ₀β₀)))`.
pub fn theorem1_bound(params: &BoundParameters, cert: &AssumptionCertificate, y: &[f64], t: f64) -> Result<f64> {
    if params.d < 2 {
        return Err(Error::DimensionTooSmall(params.d));
    }
    let df = params.d as f64;
    Ok(3.0 * df * (-params.zeta1 * t / (df.powi(4) * df.ln())).exp() * theorem1_bracket(params, cert, y))
}

/// Smallest `t` with [`theorem1_bound`] `≤ 1/2`, zero if already there at `t = 0`.
pub fn relaxation_time(params: &BoundParameters, cert: &AssumptionCertificate, y: &[f64], d: usize) -> f64 {
    let df = d as f64;
    let at_zero = 3.0 * df * theorem1_bracket(params, cert, y);
    if at_zero <= 0.5 {
        return 0.0;
    }
    df.powi(4) * df.ln() / params.zeta1 * (2.0 * at_zero).ln()
}

/// `‖y‖₁·d·κ₀·(1−β₀)^N`.
pub fn lemma3_bound(norm1_y: f64, d: usize, kappa0: f64, beta0: f64, n: usize) -> f64 {
    norm1_y * d as f64 * kappa0 * (1.0 - beta0).powi(n as i32)
}

/// `√2·d·√(κ₀b₀/(δ₀β₀))`, the stationary `L²` bound on `‖Y(∞)‖₁` as used in
/// the convergence argument. Its second-moment step uses `σ²/δ₁`, whereas
/// the exponential law of mean `σ²/(2δ₁)` has second moment `σ⁴/(2δ₁²)`;
/// sampling always uses the exponential law.
pub fn stationary_l1_moment_bound(cert: &AssumptionCertificate, d: usize) -> f64 {
    2f64.sqrt() * d as f64 * (cert.kappa0 * cert.b0 / (cert.delta0 * cert.beta0)).sqrt()
}

/// Parameters, bound curve and relaxation time for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub params: BoundParameters,
    /// `(t, convergence bound, round-count bound)`.
    pub bound_curve: Vec<(f64, f64, f64)>,
    pub t_star: f64,
    pub notes: Vec<String>,
}

pub fn bound_report(
    cert: &AssumptionCertificate,
    d: usize,
    beta: f64,
    y: &[f64],
    t_grid: &[f64],
) -> Result<BoundReport> {
    let params = select_parameters(cert, d, beta)?;
    let bound_curve = t_grid
        .iter()
        .map(|&t| Ok((t, theorem1_bound(&params, cert, y, t)?, prop5_bound(&params, y, t))))
        .collect::<Result<Vec<_>>>()?;
    let mut notes = Vec::new();
    if !params.beta_in_range {
        notes.push(format!("beta = {beta} is outside the certified range (0, {:e}]", cert.beta_max));
    }
    if !params.geo1_pass {
        notes.push("geometric-trial condition beta/d <= p0 fails".into());
    }
    if !params.select_theta_pass {
        notes.push("theta selection inequality fails at this d".into());
    }
    Ok(BoundReport { t_star: relaxation_time(&params, cert, y, d), params, bound_curve, notes })
}

/// Per-point outcome of the drift check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftPoint {
    pub y: Vec<f64>,
    /// Generator expression `−δ₁𝟏ᵀDh + ½Tr(ΣD²h) + ½DhᵀΣDh`; `None` outside the region.
    pub drift: Option<f64>,
    /// `drift + χ`; the condition asks for `≤ 10⁻¹⁰`.
    pub margin: Option<f64>,
    /// Largest `Dh(y)ᵀe_i` over coordinates with `y_i = 0`.
    pub reflection: Option<f64>,
    /// Worst `|analytic − fd| / scale` over checked coordinates.
    pub gradient_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub theta: f64,
    pub epsilon: f64,
    pub chi: f64,
    pub region_min: f64,
    pub theta_admissible: bool,
    pub points_checked: usize,
    pub drift_violations: usize,
    pub reflection_violations: usize,
    pub gradient_violations: usize,
    /// Largest `drift + χ` seen.
    pub worst_margin: f64,
    pub worst_point: Vec<f64>,
    pub worst_gradient_error: f64,
    pub points: Vec<DriftPoint>,
}

impl DriftReport {
    pub fn passed(&self) -> bool {
        self.drift_violations == 0 && self.reflection_violations == 0 && self.gradient_violations == 0
    }
}

/// Largest `θ` the argument admits for `ε`.
pub fn admissible_theta(model: &NetworkModel, cert: &AssumptionCertificate, epsilon: f64) -> f64 {
    let d = model.d as f64;
    epsilon / (2.0 * epsilon + 1.0) * cert.delta1 / ((1.0 + d) * model.max_variance())
}

/// Evaluates the drift and reflection conditions at every point.
///
/// Points with `‖y‖∞ < region_min` only take part in the reflection and
/// gradient checks.
pub fn drift_condition_report(
    model: &NetworkModel,
    cert: &AssumptionCertificate,
    theta: f64,
    epsilon: f64,
    sample_points: &[Vec<f64>],
    region_min: f64,
) -> Result<DriftReport> {
    check_positive(theta, "theta")?;
    check_positive(epsilon, "epsilon")?;
    let d = model.d;
    for y in sample_points {
        check_point(y)?;
        if y.len() != d {
            return Err(Error::DimensionMismatch(format!("point has length {}, model has d = {d}", y.len())));
        }
    }
    let d_f = d as f64;
    let chi = theta * cert.delta1 / (2.0 * (1.0 + d_f));
    let sigma = &model.sigma;

    let points = sample_points
        .par_iter()
        .map(|y| -> Result<DriftPoint> {
            let dh = gradient(y, theta, epsilon)?;
            let (_, linf) = norms(y);
            let (drift, margin) = if linf >= region_min {
                let d2h = hessian(y, theta, epsilon)?;
                let trace = (sigma * &d2h).trace();
                let quad = (dh.transpose() * sigma * &dh)[(0, 0)];
                let drift = -cert.delta1 * dh.sum() + 0.5 * trace + 0.5 * quad;
                (Some(drift), Some(drift + chi))
            } else {
                (None, None)
            };
            let reflection = (0..d).filter(|&i| y[i] == 0.0).map(|i| dh[i]).reduce(f64::max);

            let scale = dh.amax();
            let mut gradient_error = 0.0f64;
            for j in 0..d {
                let step = fd_step(y[j]);
                if y[j] < 2.0 * step || (theta * y[j] - 1.0).abs() < KINK_GUARD {
                    continue;
                }
                let fd = fd_partial(y, j, theta, epsilon, step);
                let denom = dh[j].abs().max(1e-6 * scale);
                if denom > 0.0 {
                    gradient_error = gradient_error.max((dh[j] - fd).abs() / denom);
                }
            }
            Ok(DriftPoint { y: y.clone(), drift, margin, reflection, gradient_error })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut worst_margin = f64::NEG_INFINITY;
    let mut worst_point = Vec::new();
    let (mut drift_violations, mut reflection_violations, mut gradient_violations, mut checked) = (0, 0, 0, 0);
    let mut worst_gradient_error = 0.0f64;
    for p in &points {
        if let Some(m) = p.margin {
            checked += 1;
            if m > DRIFT_TOL {
                drift_violations += 1;
            }
            if m > worst_margin {
                worst_margin = m;
                worst_point = p.y.clone();
            }
        }
        if p.reflection.is_some_and(|r| r > DRIFT_TOL) {
            reflection_violations += 1;
        }
        if p.gradient_error > FD_REL_TOL {
            gradient_violations += 1;
        }
        worst_gradient_error = worst_gradient_error.max(p.gradient_error);
    }
    let limit = admissible_theta(model, cert, epsilon);
    Ok(DriftReport {
        theta,
        epsilon,
        chi,
        region_min,
        theta_admissible: theta <= limit * (1.0 + 1e-12),
        points_checked: checked,
        drift_violations,
        reflection_violations,
        gradient_violations,
        worst_margin,
        worst_point,
        worst_gradient_error,
        points,
    })
}

/// [`drift_condition_report`] that fails with `ConditionViolated` at the
/// worst point when any condition is violated.
pub fn check_drift_conditions(
    model: &NetworkModel,
    cert: &AssumptionCertificate,
    theta: f64,
    epsilon: f64,
    sample_points: &[Vec<f64>],
    region_min: f64,
) -> Result<DriftReport> {
    let report = drift_condition_report(model, cert, theta, epsilon, sample_points, region_min)?;
    if report.drift_violations > 0 {
        return Err(Error::ConditionViolated { point: report.worst_point, margin: report.worst_margin });
    }
    if let Some(p) = report.points.iter().find(|p| p.reflection.is_some_and(|r| r > DRIFT_TOL)) {
        return Err(Error::ConditionViolated { point: p.y.clone(), margin: p.reflection.unwrap_or_default() });
    }
    if let Some(p) = report.points.iter().find(|p| p.gradient_error > FD_REL_TOL) {
        return Err(Error::ConditionViolated { point: p.y.clone(), margin: p.gradient_error });
    }
    Ok(report)
}

/// Random points with `‖y‖∞` uniform in `[lo, hi]`; each other coordinate is
/// uniform below the maximum, and zero with probability 1/5 so the
/// reflection condition gets exercised.
pub fn sample_points(d: usize, n: usize, lo: f64, hi: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed);
    let norm = Uniform::new_inclusive(lo, hi).expect("lo <= hi");
    (0..n)
        .map(|_| {
            let top = norm.sample(&mut rng);
            let lead = rng.random_range(0..d);
            (0..d)
                .map(|i| {
                    if i == lead {
                        top
                    } else if rng.random_bool(0.2) {
                        0.0
                    } else {
                        rng.random_range(0.0..=top)
                    }
                })
                .collect()
        })
        .collect()
}
