//! Experiment drivers: model generators, the coupling study, the
//! relaxation-time scaling study and the invariant battery behind `verify`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::{self, BoundParameters};
use crate::error::{Error, Result};
use crate::hitting::{self, count_n, eta_sequence};
use crate::io::csv_num;
use crate::network_model::{
    certify, lambda_matrix, lambda_oracle, reflection_inverse, validate_model, AssumptionCertificate, NetworkModel,
    SubsetMask, DEFAULT_N_MAX,
};
use crate::rng;
use crate::sim::{self, coupled_pair_dominating, normal_increment, step_count};
use crate::skorokhod::{solution_residuals, solve_orthogonal, ReflectionStepper};
use crate::stats::{fit_line, mean_se};

/// Generator families with A1–A3 constants that do not depend on `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// `Q_{i,i+1} = q`.
    Tandem,
    /// `Q_{i,i+1 mod d} = q`.
    Ring,
    /// Random sparsity pattern, each row normalized to total weight `q`.
    Dense,
}

/// Model generator, written `family:key=value,…`, for example
/// `tandem:d=8,q=0.5` or `dense:d=6,density=0.4,q=0.6,seed=3`.
///
/// The drift is `μ = R(−δ𝟏)` so that `R⁻¹μ = −δ𝟏` for every `d`, and `Σ = σ²I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub family: Family,
    pub d: usize,
    pub q: f64,
    pub density: f64,
    pub seed: u64,
    pub delta: f64,
    pub sigma2: f64,
}

impl GeneratorSpec {
    pub fn new(family: Family, d: usize, q: f64) -> Self {
        GeneratorSpec { family, d, q, density: 0.5, seed: 0, delta: 2.0, sigma2: 1.0 }
    }

    pub fn with_dim(&self, d: usize) -> Self {
        GeneratorSpec { d, ..self.clone() }
    }

    pub fn build(&self) -> Result<NetworkModel> {
        let d = self.d;
        if d == 0 {
            return Err(Error::InvalidArgument("generator needs d >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.q) {
            return Err(Error::InvalidArgument(format!("q = {} must lie in [0, 1]", self.q)));
        }
        let mut q = DMatrix::zeros(d, d);
        match self.family {
            Family::Tandem => {
                for i in 0..d.saturating_sub(1) {
                    q[(i, i + 1)] = self.q;
                }
            }
            Family::Ring => {
                if d > 1 {
                    for i in 0..d {
                        q[(i, (i + 1) % d)] = self.q;
                    }
                }
            }
            Family::Dense => {
                let mut rng = rng::stream(rng::derive_seed(self.seed, d as u64));
                for i in 0..d {
                    let mut weights = Vec::new();
                    for j in (0..d).filter(|&j| j != i) {
                        if rng.random_bool(self.density.clamp(0.0, 1.0)) {
                            weights.push((j, rng.random_range(0.1..1.0)));
                        }
                    }
                    let total: f64 = weights.iter().map(|w| w.1).sum();
                    for (j, w) in weights {
                        q[(i, j)] = self.q * w / total;
                    }
                }
            }
        }
        drifted_model(q, self.delta, DMatrix::identity(d, d) * self.sigma2)
    }
}

/// Builds a model whose drift satisfies `R⁻¹μ = −δ𝟏`.
pub fn drifted_model(q: DMatrix<f64>, delta: f64, sigma: DMatrix<f64>) -> Result<NetworkModel> {
    let d = q.nrows();
    let r = (DMatrix::identity(d, d) - &q).transpose();
    let mu = r * DVector::from_element(d, -delta);
    validate_model(q, mu, sigma)
}

impl fmt::Display for GeneratorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.family {
            Family::Tandem => "tandem",
            Family::Ring => "ring",
            Family::Dense => "dense",
        };
        write!(f, "{name}:d={},q={},delta={},sigma2={}", self.d, self.q, self.delta, self.sigma2)?;
        if self.family == Family::Dense {
            write!(f, ",density={},seed={}", self.density, self.seed)?;
        }
        Ok(())
    }
}

impl FromStr for GeneratorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = s.split_once(':').unwrap_or((s, ""));
        let family = match name.trim() {
            "tandem" => Family::Tandem,
            "ring" => Family::Ring,
            "dense" => Family::Dense,
            other => return Err(Error::InvalidArgument(format!("unknown generator family {other:?}"))),
        };
        let mut spec = GeneratorSpec::new(family, 3, 0.5);
        for part in args.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("generator argument {part:?} is not key=value")))?;
            let bad = |_| Error::InvalidArgument(format!("cannot parse {key} = {value:?}"));
            match key.trim() {
                "d" => spec.d = value.trim().parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "q" => spec.q = value.trim().parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "density" => {
                    spec.density = value.trim().parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?
                }
                "seed" => spec.seed = value.trim().parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "delta" => {
                    spec.delta = value.trim().parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?
                }
                "sigma2" => {
                    spec.sigma2 = value.trim().parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?
                }
                other => return Err(Error::InvalidArgument(format!("unknown generator key {other:?}"))),
            }
        }
        Ok(spec)
    }
}

/// Random certified model for property tests: substochastic `Q` with row
/// sums up to 0.8, correlated `Σ`, and drift `R(−δ𝟏)` with `δ ∈ [0.5, 2]`.
pub fn random_model(d: usize, seed: u64) -> Result<NetworkModel> {
    let mut rng = rng::stream(seed);
    let mut q = DMatrix::zeros(d, d);
    for i in 0..d {
        let row_total = rng.random_range(0.0..0.8);
        let raw: Vec<f64> = (0..d).map(|j| if j == i { 0.0 } else { rng.random_range(0.0..1.0) }).collect();
        let s: f64 = raw.iter().sum();
        if s > 0.0 {
            for j in 0..d {
                q[(i, j)] = row_total * raw[j] / s;
            }
        }
    }
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.5..0.5));
    let sigma = &a * a.transpose() + DMatrix::identity(d, d) * rng.random_range(0.5..1.5);
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let delta = rng.random_range(0.5..2.0);
    drifted_model(q, delta, sigma)
}

/// Hex digest of a config serialized as JSON together with the code version.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(config)?);
    hasher.update(crate::CODE_VERSION.as_bytes());
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Settings of the coupling study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingConfig {
    pub dt: f64,
    pub horizon: f64,
    pub reps: usize,
    pub seed: u64,
    /// Start of the first copy; `None` starts it at the stationary draw itself.
    pub y0: Option<Vec<f64>>,
    /// Burn-in for the stationary draws; `None` uses the default.
    pub t_burn: Option<f64>,
    /// Spacing of the reported grid (rounded to a multiple of `dt`).
    pub report_dt: f64,
    pub beta: f64,
    pub batch: usize,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        CouplingConfig {
            dt: sim::DEFAULT_DT,
            horizon: 50.0,
            reps: 200,
            seed: 1,
            y0: None,
            t_burn: None,
            report_dt: 0.5,
            beta: 0.05,
            batch: 50,
        }
    }
}

/// Exponential fit `log mean ≈ a − rate·t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub rate: f64,
    pub rate_se: f64,
    pub ci95: (f64, f64),
    pub points: usize,
    pub t_from: f64,
    pub t_to: f64,
}

/// Mean `‖Y(t;y) − Y(t;Ŷ(∞))‖₁` with standard errors on the report grid.
/// This estimates an upper bound on the Wasserstein distance, not the
/// distance itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingCurve {
    pub t: Vec<f64>,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub reps_done: usize,
    pub fit: Option<DecayFit>,
    /// Convergence bound on the same grid, when defined for this `d`.
    pub bound: Option<Vec<f64>>,
    pub bound_params: Option<BoundParameters>,
    pub t_burn: f64,
    /// Stationary starts are burn-in approximations.
    pub approximate: bool,
    pub notes: Vec<String>,
    pub config_hash: String,
    pub code_version: String,
}

impl CouplingCurve {
    /// Largest `mean + 3·SE − bound` over the grid (nonpositive when the bound dominates).
    pub fn bound_excess(&self) -> Option<f64> {
        self.bound.as_ref().map(|b| {
            self.mean.iter().zip(&self.se).zip(b).map(|((m, s), bd)| m + 3.0 * s - bd).fold(f64::NEG_INFINITY, f64::max)
        })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# config_hash={} code_version={}", self.config_hash, self.code_version)?;
        writeln!(out, "t,mean_l1,se,bound")?;
        for k in 0..self.t.len() {
            let bound = self.bound.as_ref().map_or(String::new(), |b| csv_num(b[k]));
            writeln!(out, "{},{},{},{}", csv_num(self.t[k]), csv_num(self.mean[k]), csv_num(self.se[k]), bound)?;
        }
        Ok(())
    }
}

/// Least-squares fit of `log mean` against `t` on the later half of the
/// grid points whose mean is strictly positive.
pub fn fit_decay(t: &[f64], mean: &[f64]) -> Option<DecayFit> {
    let positive: Vec<(f64, f64)> = t.iter().zip(mean).filter(|(_, m)| **m > 0.0).map(|(a, b)| (*a, *b)).collect();
    let tail = &positive[positive.len() / 2..];
    if tail.len() < 3 {
        return None;
    }
    let xs: Vec<f64> = tail.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = tail.iter().map(|p| p.1.ln()).collect();
    let fit = fit_line(&xs, &ys)?;
    let (lo, hi) = fit.slope_ci(0.95);
    Some(DecayFit {
        rate: -fit.slope,
        rate_se: fit.slope_se,
        ci95: (-hi, -lo),
        points: fit.n,
        t_from: xs[0],
        t_to: xs[xs.len() - 1],
    })
}

/// Coupling study. Replications run in batches; `on_batch` sees the
/// aggregate after every batch so callers can flush partial results.
pub fn couple(
    model: &NetworkModel,
    cert: &AssumptionCertificate,
    config: &CouplingConfig,
    mut on_batch: impl FnMut(&CouplingCurve) -> Result<()>,
) -> Result<CouplingCurve> {
    let d = model.d;
    if config.reps == 0 {
        return Err(Error::InvalidArgument("reps must be at least 1".into()));
    }
    if config.horizon < config.dt {
        return Err(Error::InvalidArgument("horizon must be at least dt".into()));
    }
    if let Some(y0) = &config.y0 {
        if y0.len() != d {
            return Err(Error::DimensionMismatch(format!("y0 has length {}, model has d = {d}", y0.len())));
        }
    }
    let steps = step_count(config.horizon, config.dt)?;
    let stride = ((config.report_dt / config.dt).round() as usize).max(1);
    let report: Vec<usize> = (0..=steps).step_by(stride).collect();
    let t: Vec<f64> = report.iter().map(|&k| k as f64 * config.dt).collect();
    let t_burn = config.t_burn.unwrap_or_else(|| sim::default_burn_in(model, cert));
    let stepper = ReflectionStepper::new(&model.r)?;

    let mut sums = vec![0.0; report.len()];
    let mut sq = vec![0.0; report.len()];
    let mut done = 0usize;
    let batch = config.batch.max(1);

    let (bound, bound_params, mut notes) = coupling_bound(model, cert, config, &t);
    notes.push("mean_l1 is a coupling upper bound on the Wasserstein distance".into());
    notes.push(format!("stationary starts are approximate (burn-in {t_burn})"));
    let hash = config_hash(&(config, model.content_hash()))?;

    let mut curve = CouplingCurve {
        t: t.clone(),
        mean: vec![0.0; t.len()],
        se: vec![0.0; t.len()],
        reps_done: 0,
        fit: None,
        bound,
        bound_params,
        t_burn,
        approximate: true,
        notes,
        config_hash: hash,
        code_version: crate::CODE_VERSION.to_string(),
    };

    while done < config.reps {
        let n = batch.min(config.reps - done);
        let gaps = (done..done + n)
            .into_par_iter()
            .map(|rep| -> Result<Vec<f64>> {
                let rep_seed = rng::derive_path(config.seed, &[rep as u64]);
                let draw =
                    sim::sample_stationary_approx(model, cert, config.dt, rng::derive_seed(rep_seed, 1), Some(t_burn))?;
                let mut ya = config.y0.clone().unwrap_or_else(|| draw.state.clone());
                let mut yb = draw.state;
                let mut sa = stepper.clone();
                let mut sb = stepper.clone();
                let mut rng = rng::stream(rng::derive_seed(rep_seed, 2));
                let (mut la, mut lb, mut z, mut dx) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
                let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).abs()).sum::<f64>();
                let mut out = Vec::with_capacity(report.len());
                let mut next = 0;
                for k in 0..=steps {
                    if k > 0 {
                        normal_increment(model, config.dt, &mut rng, &mut z, &mut dx);
                        sa.step(&mut ya, &mut la, &dx, k)?;
                        sb.step(&mut yb, &mut lb, &dx, k)?;
                    }
                    if next < report.len() && report[next] == k {
                        out.push(l1(&ya, &yb));
                        next += 1;
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        for g in gaps {
            for (j, v) in g.into_iter().enumerate() {
                sums[j] += v;
                sq[j] += v * v;
            }
        }
        done += n;
        let nf = done as f64;
        for j in 0..t.len() {
            let m = sums[j] / nf;
            curve.mean[j] = m;
            curve.se[j] = if done > 1 { ((sq[j] / nf - m * m).max(0.0) * nf / (nf - 1.0) / nf).sqrt() } else { 0.0 };
        }
        curve.reps_done = done;
        curve.fit = fit_decay(&curve.t, &curve.mean);
        on_batch(&curve)?;
    }
    Ok(curve)
}

fn coupling_bound(
    model: &NetworkModel,
    cert: &AssumptionCertificate,
    config: &CouplingConfig,
    t: &[f64],
) -> (Option<Vec<f64>>, Option<BoundParameters>, Vec<String>) {
    let d = model.d;
    let y = config.y0.clone().unwrap_or_else(|| vec![0.0; d]);
    match bounds::compute_parameters(cert, d, config.beta) {
        Ok(params) => {
            let curve: Option<Vec<f64>> =
                t.iter().map(|&ti| bounds::theorem1_bound(&params, cert, &y, ti).ok()).collect();
            let mut notes = Vec::new();
            if d < 3 {
                notes.push(format!("convergence bound evaluated at d = {d}, below the range d >= 3 of the argument"));
            }
            (curve, Some(params), notes)
        }
        Err(e) => (None, None, vec![format!("convergence bound unavailable: {e}")]),
    }
}

/// One row of the scaling study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub d: usize,
    pub t_star: f64,
    /// `t*/(d⁴ (log d)²)`.
    pub ratio: f64,
    pub kappa0: f64,
    pub beta0: f64,
    pub delta0: f64,
    pub b0: f64,
    pub beta_in_range: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub generator: String,
    pub beta: f64,
    pub rows: Vec<ScalingRow>,
    /// Log-log slope of `t*` against `d`; `None` with fewer than two dimensions.
    pub slope: Option<f64>,
    pub slope_flag: Option<String>,
    pub config_hash: String,
    pub code_version: String,
}

impl ScalingReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# config_hash={} code_version={}", self.config_hash, self.code_version)?;
        writeln!(out, "d,t_star,ratio")?;
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.d, csv_num(r.t_star), csv_num(r.ratio))?;
        }
        Ok(())
    }
}

/// Relaxation time at fixed `β` across dimensions of one generator family.
pub fn scaling(spec: &GeneratorSpec, d_list: &[usize], beta: f64) -> Result<ScalingReport> {
    let mut rows = Vec::with_capacity(d_list.len());
    for &d in d_list {
        if d < 3 {
            return Err(Error::DimensionTooSmall(d));
        }
        let model = spec.with_dim(d).build()?;
        let cert = certify(&model, DEFAULT_N_MAX)?;
        let params = bounds::select_parameters(&cert, d, beta)?;
        let t_star = bounds::relaxation_time(&params, &cert, &vec![0.0; d], d);
        let df = d as f64;
        rows.push(ScalingRow {
            d,
            t_star,
            ratio: t_star / (df.powi(4) * df.ln().powi(2)),
            kappa0: cert.kappa0,
            beta0: cert.beta0,
            delta0: cert.delta0,
            b0: cert.b0,
            beta_in_range: params.beta_in_range,
        });
    }
    let positive: Vec<&ScalingRow> = rows.iter().filter(|r| r.t_star > 0.0).collect();
    let xs: Vec<f64> = positive.iter().map(|r| (r.d as f64).ln()).collect();
    let ys: Vec<f64> = positive.iter().map(|r| r.t_star.ln()).collect();
    let mut distinct = xs.clone();
    distinct.dedup();
    let slope = if distinct.len() >= 2 { fit_line(&xs, &ys).map(|f| f.slope) } else { None };
    let slope_flag = slope.is_none().then(|| "slope undefined: fewer than two dimensions with t* > 0".to_string());
    Ok(ScalingReport {
        generator: spec.to_string(),
        beta,
        rows,
        slope,
        slope_flag,
        config_hash: config_hash(&(spec, d_list, beta))?,
        code_version: crate::CODE_VERSION.to_string(),
    })
}

/// Worst excess of `𝟏ᵀ(Y(t;y) − Y(t;0))` over the pathwise bound
/// `‖y‖₁dκ₀(1−β₀)^{𝒩(t;y)} + 10⁻⁶·scale`, across `reps` coupled runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma3Check {
    pub runs: usize,
    /// `max (gap − bound − 10⁻⁶·scale)`; nonpositive means the bound held everywhere.
    pub worst_excess: f64,
    /// Smallest aggregate gap seen (should not drop below `−10⁻⁸`).
    pub min_gap: f64,
    pub max_rounds: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn lemma3_check(
    model: &NetworkModel,
    cert: &AssumptionCertificate,
    y0: &[f64],
    horizon: f64,
    dt: f64,
    reps: usize,
    seed: u64,
    eps_hit: Option<f64>,
) -> Result<Lemma3Check> {
    let d = model.d;
    let eps = eps_hit.unwrap_or_else(|| hitting::default_eps_hit(model, dt));
    let norm1: f64 = y0.iter().sum();
    let zero = vec![0.0; d];
    let results = (0..reps)
        .into_par_iter()
        .map(|rep| -> Result<(f64, f64, usize)> {
            let run = crate::sim::coupled_pair(model, y0, &zero, horizon, dt, rng::derive_path(seed, &[rep as u64]))?;
            let rec = eta_sequence(&run.sol_a, eps)?;
            let scale = run.sol_a.scale().max(run.sol_b.scale());
            let gaps = run.aggregate_gap();
            let mut worst = f64::NEG_INFINITY;
            let mut min_gap = f64::INFINITY;
            for (k, gap) in gaps.iter().enumerate() {
                let n = count_n(&rec, run.sol_a.time(k));
                let bound = bounds::lemma3_bound(norm1, d, cert.kappa0, cert.beta0, n);
                worst = worst.max(gap - bound - 1e-6 * scale);
                min_gap = min_gap.min(*gap);
            }
            Ok((worst, min_gap, rec.eta.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Lemma3Check {
        runs: reps,
        worst_excess: results.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max),
        min_gap: results.iter().map(|r| r.1).fold(f64::INFINITY, f64::min),
        max_rounds: results.iter().map(|r| r.2).max().unwrap_or(0),
    })
}

/// Sample mean of `(1−β)^{𝒩(t;y)}` next to the bound on its expectation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop5Row {
    pub t: f64,
    pub mean: f64,
    pub se: f64,
    pub bound: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn prop5_study(
    model: &NetworkModel,
    params: &BoundParameters,
    y0: &[f64],
    horizon: f64,
    dt: f64,
    reps: usize,
    seed: u64,
    report_times: &[f64],
) -> Result<Vec<Prop5Row>> {
    let eps = hitting::default_eps_hit(model, dt);
    let counts = (0..reps)
        .into_par_iter()
        .map(|rep| -> Result<Vec<usize>> {
            let sol = sim::simulate_rbm(model, y0, horizon, dt, rng::derive_path(seed, &[rep as u64]))?;
            let rec = eta_sequence(&sol, eps)?;
            Ok(report_times.iter().map(|&t| count_n(&rec, t)).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report_times
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let xs: Vec<f64> = counts.iter().map(|c| (1.0 - params.beta).powi(c[j] as i32)).collect();
            let (mean, se) = mean_se(&xs);
            Prop5Row { t, mean, se, bound: bounds::prop5_bound(params, y0, t) }
        })
        .collect())
}

/// Settings of the invariant battery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub seed: u64,
    pub dt: f64,
    pub horizon: f64,
    /// Paths for the solver, domination, monotonicity and pathwise checks.
    pub paths: usize,
    pub lambda_reps: usize,
    pub p0_reps: usize,
    pub drift_points: usize,
    pub beta: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 1,
            dt: sim::DEFAULT_DT,
            horizon: 10.0,
            paths: 100,
            lambda_reps: 100_000,
            p0_reps: 10_000,
            drift_points: 1000,
            beta: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Signed slack; negative means the check holds with room to spare.
    pub margin: f64,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, margin: f64, detail: String) -> Self {
        CheckResult { name: name.into(), passed: margin <= 0.0, margin, detail }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
    pub config_hash: String,
    pub code_version: String,
}

/// Λ closed form against simulation, `k` standard errors (floored at
/// `1/reps`) allowed per entry. Returns the worst normalized excess.
pub fn lambda_agreement(model: &NetworkModel, s: SubsetMask, reps: usize, seed: u64, k: f64) -> Result<f64> {
    let exact = lambda_matrix(model, s)?;
    let est = lambda_oracle(model, s, reps, seed)?;
    let floor = 1.0 / reps as f64;
    let mut worst = f64::NEG_INFINITY;
    for i in 0..model.d {
        for j in 0..model.d {
            let tol = k * est.std_err[(i, j)].max(floor);
            worst = worst.max((exact[(i, j)] - est.estimate[(i, j)]).abs() - tol);
        }
    }
    Ok(worst)
}

/// Runs the invariant battery on `model`. The certificate is taken as given,
/// so a model altered after certification is checked against stale constants.
pub fn verify(model: &NetworkModel, cert: &AssumptionCertificate, config: &VerifyConfig) -> Result<VerifyReport> {
    let d = model.d;
    let mut checks = Vec::new();
    let seed = |tag: u64| rng::derive_seed(config.seed, tag);

    // Λ(S) for every nonempty proper subset (a random selection above d = 6).
    let subsets: Vec<SubsetMask> = if d <= 6 {
        (1..(1u64 << d) - 1).map(|b| SubsetMask::new(d, b)).collect::<Result<_>>()?
    } else {
        let mut r = rng::stream(seed(0));
        let full = SubsetMask::full(d).bits();
        let mut picked = Vec::new();
        while picked.len() < 20 {
            let s = SubsetMask::new(d, r.random::<u64>() & full)?;
            if !s.is_empty() && !s.is_full() {
                picked.push(s);
            }
        }
        picked
    };
    if subsets.is_empty() {
        checks.push(CheckResult::new("lambda_oracle", -1.0, "no proper subsets for d = 1".into()));
    } else {
        let worst = subsets
            .iter()
            .enumerate()
            .map(|(n, &s)| lambda_agreement(model, s, config.lambda_reps, rng::derive_seed(seed(1), n as u64), 4.0))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        checks.push(CheckResult::new(
            "lambda_oracle",
            worst,
            format!("{} subsets, 4 standard errors per entry", subsets.len()),
        ));
    }

    let r_inv = reflection_inverse(&model.r)?;
    let paths = (0..config.paths)
        .into_par_iter()
        .map(|rep| -> Result<[f64; 4]> {
            let mut r = rng::stream(rng::derive_path(seed(2), &[rep as u64]));
            let hi: Vec<f64> = (0..d).map(|_| r.random_range(0.0..3.0)).collect();
            let lo: Vec<f64> = hi.iter().map(|v| v * r.random_range(0.0..1.0)).collect();
            let run = coupled_pair_dominating(model, cert, &hi, &lo, config.horizon, config.dt, r.random())?;
            let res = solution_residuals(&run.sol_a);
            let scale = res.scale;
            let identity = res.residual_identity - 1e-9 * scale;
            let comp = res.residual_complementarity - res.tol_comp;
            let plus = run.sol_plus_a.as_ref().expect("dominating path attached");
            let dom = sim::domination_gap(&r_inv, &run.sol_a, plus) - 1e-8 * scale.max(plus.scale());
            let mono = -run.min_ordering_gap() - 1e-8 * scale;
            Ok([identity, comp, dom, mono])
        })
        .collect::<Result<Vec<_>>>()?;
    let worst = |i: usize| paths.iter().map(|p| p[i]).fold(f64::NEG_INFINITY, f64::max);
    let n = config.paths;
    checks.push(CheckResult::new("solver_identity", worst(0), format!("{n} paths, tolerance 1e-9 * scale")));
    checks.push(CheckResult::new("solver_complementarity", worst(1), format!("{n} paths, tolerance tol_comp")));
    checks.push(CheckResult::new("domination", worst(2), format!("{n} paths, tolerance 1e-8 * scale")));
    checks.push(CheckResult::new("monotonicity", worst(3), format!("{n} ordered pairs, tolerance 1e-8 * scale")));

    // Identity reflection against the closed form.
    let path = sim::brownian_driver(model, config.horizon, config.dt, seed(3))?;
    let start = vec![0.5; d];
    let a = solve_orthogonal(&path, &start)?;
    let b = crate::skorokhod::solve_reflected(&path, &start, &DMatrix::identity(d, d))?;
    let sup = a.y.iter().zip(&b.y).fold(0.0f64, |m, (u, v)| m.max((u - v).abs()));
    checks.push(CheckResult::new("orthogonal_closed_form", sup - 1e-8, "sup-norm difference, tolerance 1e-8".into()));

    let l3 = lemma3_check(model, cert, &vec![5.0; d], config.horizon, config.dt, config.paths, seed(4), None)?;
    checks.push(CheckResult::new(
        "pathwise_aggregate_bound",
        l3.worst_excess,
        format!("{} runs from 5*1, up to {} rounds", l3.runs, l3.max_rounds),
    ));

    let p0 = hitting::estimate_p0(model, cert, config.p0_reps, config.dt, seed(5), None)?;
    checks.push(CheckResult::new(
        "p0_lower_bound",
        p0.analytic - (p0.estimate + 3.0 * p0.std_err),
        format!("estimate {:.4} (se {:.2e}), analytic {:.4e}", p0.estimate, p0.std_err, p0.analytic),
    ));

    if d >= 3 {
        let params = bounds::select_parameters(cert, d, config.beta)?;
        let lo = 1.0 / params.theta;
        let pts = bounds::sample_points(d, config.drift_points, lo, 100.0 * lo, seed(6));
        let report = bounds::drift_condition_report(model, cert, params.theta, params.epsilon, &pts, lo)?;
        checks.push(CheckResult {
            name: "drift_conditions".into(),
            passed: report.passed(),
            margin: report.worst_margin - bounds::DRIFT_TOL,
            detail: format!(
                "{} points with |y|_inf in [1/theta, 100/theta]; worst drift + chi {:.3e}, worst gradient error {:.2e}",
                report.points_checked, report.worst_margin, report.worst_gradient_error
            ),
        });
    } else {
        checks.push(CheckResult::new("drift_conditions", -1.0, format!("skipped: needs d >= 3, model has d = {d}")));
    }

    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport {
        checks,
        passed,
        config_hash: config_hash(&(config, model.content_hash()))?,
        code_version: crate::CODE_VERSION.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_parsing() {
        let s: GeneratorSpec = "tandem:d=8,q=0.5".parse().unwrap();
        assert_eq!((s.family, s.d, s.q), (Family::Tandem, 8, 0.5));
        let s: GeneratorSpec = "dense:d=4,density=0.3,q=0.6,seed=9".parse().unwrap();
        assert_eq!((s.family, s.seed), (Family::Dense, 9));
        assert_eq!(s.to_string().parse::<GeneratorSpec>().unwrap(), s);
        assert!("star:d=3".parse::<GeneratorSpec>().is_err());
        assert!("tandem:d=x".parse::<GeneratorSpec>().is_err());
        assert!("tandem:d".parse::<GeneratorSpec>().is_err());
    }

    #[test]
    fn tandem_constants_do_not_depend_on_d() {
        let spec: GeneratorSpec = "tandem:d=3,q=0.5".parse().unwrap();
        let base = certify(&spec.build().unwrap(), DEFAULT_N_MAX).unwrap();
        assert_eq!((base.kappa0, base.beta0), (1.0, 0.5));
        assert!((base.delta0 - 2.0).abs() < 1e-12);
        for d in [8, 16, 32, 64] {
            let c = certify(&spec.with_dim(d).build().unwrap(), DEFAULT_N_MAX).unwrap();
            assert_eq!((c.kappa0, c.beta0, c.b0), (base.kappa0, base.beta0, base.b0));
            assert!((c.delta0 - base.delta0).abs() < 1e-9);
        }
    }

    #[test]
    fn ring_and_dense_are_valid() {
        let ring = "ring:d=5,q=0.5".parse::<GeneratorSpec>().unwrap().build().unwrap();
        let c = certify(&ring, DEFAULT_N_MAX).unwrap();
        assert_eq!((c.kappa0, c.beta0), (1.0, 0.5));
        let dense = "dense:d=6,density=0.5,q=0.6,seed=2".parse::<GeneratorSpec>().unwrap().build().unwrap();
        for i in 0..6 {
            assert!(dense.q.row(i).sum() <= 0.6 + 1e-12);
        }
        assert!(certify(&dense, DEFAULT_N_MAX).is_ok());
    }

    #[test]
    fn random_models_certify() {
        for seed in 0..20 {
            let m = random_model(2 + (seed as usize % 5), seed).unwrap();
            assert!(certify(&m, DEFAULT_N_MAX).is_ok(), "seed {seed}");
        }
    }

    #[test]
    fn decay_fit_recovers_rate() {
        let t: Vec<f64> = (0..40).map(|k| k as f64 * 0.5).collect();
        let m: Vec<f64> = t.iter().map(|x| 3.0 * (-0.7 * x).exp()).collect();
        let fit = fit_decay(&t, &m).unwrap();
        assert!((fit.rate - 0.7).abs() < 1e-10);
        // trailing zeros are ignored
        let mut z = m.clone();
        z.extend([0.0; 10]);
        let mut tz = t.clone();
        tz.extend((40..50).map(|k| k as f64 * 0.5));
        assert!((fit_decay(&tz, &z).unwrap().rate - 0.7).abs() < 1e-10);
        assert!(fit_decay(&[0.0, 1.0], &[1.0, 0.5]).is_none());
    }

    #[test]
    fn scaling_flags_single_dimension() {
        let spec: GeneratorSpec = "tandem:d=3,q=0.5".parse().unwrap();
        let r = scaling(&spec, &[8], 0.05).unwrap();
        assert!(r.slope.is_none() && r.slope_flag.is_some());
        assert!(matches!(scaling(&spec, &[2, 8], 0.05), Err(Error::DimensionTooSmall(2))));
    }

    #[test]
    fn config_hash_is_stable() {
        let c = CouplingConfig::default();
        assert_eq!(config_hash(&c).unwrap(), config_hash(&c.clone()).unwrap());
        let mut other = c.clone();
        other.seed = 2;
        assert_ne!(config_hash(&c).unwrap(), config_hash(&other).unwrap());
    }
}
