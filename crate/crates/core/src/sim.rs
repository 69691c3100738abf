//! Brownian drivers, reflected and dominating paths, shared-driver couplings
//! and stationary draws.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bounds;
use crate::error::{Error, Result};
use crate::network_model::{reflection_inverse, AssumptionCertificate, NetworkModel};
use crate::rng;
use crate::skorokhod::{solve_orthogonal, solve_reflected, PathGrid, ReflectionStepper, SkorokhodSolution};

/// Default grid step.
pub const DEFAULT_DT: f64 = 1e-2;

/// Relaxation times beyond this are not used as burn-in.
const MAX_BURN_FROM_BOUND: f64 = 1e6;

/// Number of grid steps covering `horizon`. The small slack keeps
/// `horizon = n·dt` from rounding up to `n + 1`.
pub fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("dt = {dt} must be positive")));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidArgument(format!("horizon = {horizon} must be nonnegative")));
    }
    Ok((horizon / dt - 1e-9).ceil().max(0.0) as usize)
}

pub(crate) fn normal_increment<R: Rng>(model: &NetworkModel, dt: f64, rng: &mut R, z: &mut [f64], out: &mut [f64]) {
    let d = model.d;
    let sq = dt.sqrt();
    for zi in z.iter_mut() {
        *zi = StandardNormal.sample(rng);
    }
    for (i, o) in out.iter_mut().enumerate().take(d) {
        let acc: f64 = z[..=i].iter().enumerate().map(|(j, zj)| model.chol[(i, j)] * zj).sum();
        *o = model.mu[i] * dt + sq * acc;
    }
}

/// Increments `ΔX_k = μ·dt + √dt·C·Z_k` from the stream seeded by `seed`.
pub fn brownian_driver(model: &NetworkModel, horizon: f64, dt: f64, seed: u64) -> Result<PathGrid> {
    let steps = step_count(horizon, dt)?;
    let d = model.d;
    let mut rng = rng::stream(seed);
    let mut z = vec![0.0; d];
    let mut incs = vec![0.0; steps * d];
    for k in 0..steps {
        normal_increment(model, dt, &mut rng, &mut z, &mut incs[k * d..(k + 1) * d]);
    }
    PathGrid::new(dt, d, incs)
}

/// RBM path driven by [`brownian_driver`].
pub fn simulate_rbm(model: &NetworkModel, y0: &[f64], horizon: f64, dt: f64, seed: u64) -> Result<SkorokhodSolution> {
    let path = brownian_driver(model, horizon, dt, seed)?;
    solve_reflected(&path, y0, &model.r)
}

/// Driver of the dominating process: `ΔX − μ⁺dt` with `μ⁺ = μ + δ₁𝟏`.
pub fn dominating_driver(path: &PathGrid, model: &NetworkModel, cert: &AssumptionCertificate) -> Result<PathGrid> {
    if !(cert.delta1 > 0.0) {
        return Err(Error::Precondition(format!("dominating process needs delta1 > 0, got {}", cert.delta1)));
    }
    let d = path.d;
    let mu_plus = cert.mu_plus(model);
    let incs = path.increments.iter().enumerate().map(|(n, v)| v - mu_plus[n % d] * path.dt).collect();
    PathGrid::new(path.dt, d, incs)
}

/// `(Y, Y⁺)` on a common Brownian driver, both started at `y0`.
pub fn simulate_dominating(
    model: &NetworkModel,
    cert: &AssumptionCertificate,
    y0: &[f64],
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<(SkorokhodSolution, SkorokhodSolution)> {
    let path = brownian_driver(model, horizon, dt, seed)?;
    let plus = dominating_driver(&path, model, cert)?;
    Ok((solve_reflected(&path, y0, &model.r)?, solve_orthogonal(&plus, y0)?))
}

/// `max_k max_i (R⁻¹Y − R⁻¹Y⁺)_i` over the grid; nonpositive when `Y⁺` dominates.
pub fn domination_gap(r_inv: &DMatrix<f64>, sol: &SkorokhodSolution, plus: &SkorokhodSolution) -> f64 {
    let d = sol.d;
    let mut worst = f64::NEG_INFINITY;
    for k in 0..=sol.steps() {
        let diff = DVector::from_iterator(d, sol.y_at(k).iter().zip(plus.y_at(k)).map(|(a, b)| a - b));
        let gap = r_inv * diff;
        worst = worst.max(gap.max());
    }
    worst
}

/// Convenience wrapper computing `R⁻¹` from the model.
pub fn domination_gap_for(model: &NetworkModel, sol: &SkorokhodSolution, plus: &SkorokhodSolution) -> Result<f64> {
    Ok(domination_gap(&reflection_inverse(&model.r)?, sol, plus))
}

/// Independent exponential draws with means `σ_i²/(2δ₁)`, the stationary
/// law of the orthogonally reflected dominating process.
pub fn sample_stationary_upper(model: &NetworkModel, cert: &AssumptionCertificate, seed: u64) -> Result<Vec<f64>> {
    let mut rng = rng::stream(seed);
    draw_upper(model, cert, &mut rng)
}

fn draw_upper<R: Rng>(model: &NetworkModel, cert: &AssumptionCertificate, rng: &mut R) -> Result<Vec<f64>> {
    if !(cert.delta1 > 0.0) {
        return Err(Error::Precondition(format!("stationary upper law needs delta1 > 0, got {}", cert.delta1)));
    }
    model
        .variances()
        .into_iter()
        .map(|s2| {
            let rate = 2.0 * cert.delta1 / s2;
            Exp::new(rate)
                .map(|e| e.sample(rng))
                .map_err(|e| Error::InvalidArgument(format!("exponential rate {rate}: {e}")))
        })
        .collect()
}

/// Default burn-in: the relaxation time when finite and at most `10⁶`,
/// otherwise `50·d·max σ²/δ₁²`.
pub fn default_burn_in(model: &NetworkModel, cert: &AssumptionCertificate) -> f64 {
    let from_bound = if model.d >= 3 && cert.beta_feasible {
        bounds::select_parameters(cert, model.d, cert.beta_max)
            .ok()
            .map(|p| bounds::relaxation_time(&p, cert, &vec![0.0; model.d], model.d))
            .filter(|t| t.is_finite() && *t <= MAX_BURN_FROM_BOUND)
    } else {
        None
    };
    from_bound.unwrap_or_else(|| 50.0 * model.d as f64 * cert.sigma_max2 / (cert.delta1 * cert.delta1))
}

/// Approximate stationary draw. The `approximate` flag is always set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryDraw {
    pub state: Vec<f64>,
    pub t_burn: f64,
    pub approximate: bool,
}

/// Runs the RBM from a draw of the dominating stationary law for `t_burn`
/// (default [`default_burn_in`]) and returns the terminal state.
pub fn sample_stationary_approx(
    model: &NetworkModel,
    cert: &AssumptionCertificate,
    dt: f64,
    seed: u64,
    t_burn: Option<f64>,
) -> Result<StationaryDraw> {
    let t_burn = t_burn.unwrap_or_else(|| default_burn_in(model, cert));
    let mut init_rng = rng::stream(rng::derive_seed(seed, 0));
    let mut state = draw_upper(model, cert, &mut init_rng)?;
    let steps = step_count(t_burn, dt)?;
    if steps > 0 {
        let mut stepper = ReflectionStepper::new(&model.r)?;
        let mut rng = rng::stream(rng::derive_seed(seed, 1));
        let d = model.d;
        let (mut z, mut dx, mut l) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        for k in 0..steps {
            normal_increment(model, dt, &mut rng, &mut z, &mut dx);
            stepper.step(&mut state, &mut l, &dx, k + 1)?;
        }
    }
    Ok(StationaryDraw { state, t_burn, approximate: true })
}

/// Two reflected paths (and optionally their dominating paths) on one driver.
#[derive(Debug, Clone)]
pub struct CoupledRun {
    pub driver: PathGrid,
    pub sol_a: SkorokhodSolution,
    pub sol_b: SkorokhodSolution,
    pub sol_plus_a: Option<SkorokhodSolution>,
    pub sol_plus_b: Option<SkorokhodSolution>,
}

impl CoupledRun {
    /// `‖Y_a(t_k) − Y_b(t_k)‖₁` for every grid point.
    pub fn l1_gap(&self) -> Vec<f64> {
        (0..=self.sol_a.steps())
            .map(|k| self.sol_a.y_at(k).iter().zip(self.sol_b.y_at(k)).map(|(a, b)| (a - b).abs()).sum())
            .collect()
    }

    /// `𝟏ᵀ(Y_a(t_k) − Y_b(t_k))` for every grid point.
    pub fn aggregate_gap(&self) -> Vec<f64> {
        (0..=self.sol_a.steps())
            .map(|k| self.sol_a.y_at(k).iter().zip(self.sol_b.y_at(k)).map(|(a, b)| a - b).sum())
            .collect()
    }

    /// Most negative entry of `Y_a − Y_b` over the grid.
    pub fn min_ordering_gap(&self) -> f64 {
        self.sol_a.y.iter().zip(&self.sol_b.y).fold(f64::INFINITY, |m, (a, b)| m.min(a - b))
    }
}

pub fn coupled_pair(
    model: &NetworkModel,
    y0_a: &[f64],
    y0_b: &[f64],
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<CoupledRun> {
    let driver = brownian_driver(model, horizon, dt, seed)?;
    let sol_a = solve_reflected(&driver, y0_a, &model.r)?;
    let sol_b = solve_reflected(&driver, y0_b, &model.r)?;
    Ok(CoupledRun { driver, sol_a, sol_b, sol_plus_a: None, sol_plus_b: None })
}

/// [`coupled_pair`] with the dominating paths of both starts attached.
pub fn coupled_pair_dominating(
    model: &NetworkModel,
    cert: &AssumptionCertificate,
    y0_a: &[f64],
    y0_b: &[f64],
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<CoupledRun> {
    let mut run = coupled_pair(model, y0_a, y0_b, horizon, dt, seed)?;
    let plus = dominating_driver(&run.driver, model, cert)?;
    run.sol_plus_a = Some(solve_orthogonal(&plus, y0_a)?);
    run.sol_plus_b = Some(solve_orthogonal(&plus, y0_b)?);
    Ok(run)
}

/// Provenance written next to simulation outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model_hash: String,
    pub seed: u64,
    pub dt: f64,
    pub horizon: f64,
    pub code_version: String,
}

impl RunManifest {
    pub fn new(model: &NetworkModel, seed: u64, dt: f64, horizon: f64) -> Self {
        RunManifest {
            model_hash: model.content_hash(),
            seed,
            dt,
            horizon,
            code_version: crate::CODE_VERSION.to_string(),
        }
    }
}
