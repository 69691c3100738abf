//! Hitting-time statistics of simulated paths: `τ⁺`, the round times `η^k`,
//! the round counter `𝒩(t)`, zero-set traces and coupon probabilities.
//!
//! Exact zeros are invisible on a grid, so a coordinate counts as hitting
//! zero at `t_k` when `Y_i(t_k) ≤ ε_hit`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network_model::{AssumptionCertificate, NetworkModel};
use crate::rng;
use crate::sim::{normal_increment, step_count};
use crate::skorokhod::{ReflectionStepper, SkorokhodSolution};
use crate::stats::proportion_se;

/// A grid time, or a marker that the event did not happen within the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitTime {
    At(f64),
    Censored,
}

impl HitTime {
    pub fn time(self) -> Option<f64> {
        match self {
            HitTime::At(t) => Some(t),
            HitTime::Censored => None,
        }
    }
}

/// `ε_hit = 2√(dt · max σ²)`.
pub fn default_eps_hit(model: &NetworkModel, dt: f64) -> f64 {
    2.0 * (dt * model.max_variance()).sqrt()
}

/// First grid time with `Y⁺ ≤ threshold` componentwise.
pub fn tau_plus(sol_plus: &SkorokhodSolution, threshold: &[f64]) -> HitTime {
    (0..=sol_plus.steps())
        .find(|&k| sol_plus.y_at(k).iter().zip(threshold).all(|(y, b)| y <= b))
        .map_or(HitTime::Censored, |k| HitTime::At(sol_plus.time(k)))
}

/// One completed round: every coordinate has hit zero after `η^{k−1} + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaRound {
    pub k: usize,
    pub eta_k: f64,
    /// `η_i^k` per coordinate.
    pub eta_i: Vec<f64>,
    /// Coordinate attaining the maximum (smallest index on ties).
    pub last: usize,
}

/// Change points of `𝒞(t_k) = {i : Y_i(t_k) ≤ ε_hit}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroSetChange {
    pub step: usize,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HittingRecord {
    pub eps_hit: f64,
    pub horizon: f64,
    pub eta: Vec<EtaRound>,
    pub zero_sets: Vec<ZeroSetChange>,
}

impl HittingRecord {
    /// Sorted `η^k` values.
    pub fn eta_times(&self) -> Vec<f64> {
        self.eta.iter().map(|r| r.eta_k).collect()
    }

    /// Rounds as the JSON array `[{k, eta_k, eta_i}, …]`.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.eta)?)
    }
}

/// `𝒩(t) = #{k ≥ 1 : η^k ≤ t}`.
pub fn count_n(record: &HittingRecord, t: f64) -> usize {
    record.eta.partition_point(|r| r.eta_k <= t)
}

/// Extracts the round times `η^k` and the zero-set trace.
pub fn eta_sequence(sol: &SkorokhodSolution, eps_hit: f64) -> Result<HittingRecord> {
    if !(eps_hit > 0.0) {
        return Err(Error::InvalidArgument(format!("eps_hit = {eps_hit} must be positive")));
    }
    let d = sol.d;
    let steps = sol.steps();
    let mut hits: Vec<Vec<usize>> = vec![Vec::new(); d];
    let mut zero_sets = Vec::new();
    let mut prev: Option<Vec<usize>> = None;
    for k in 0..=steps {
        let row = sol.y_at(k);
        let members: Vec<usize> = (0..d).filter(|&i| row[i] <= eps_hit).collect();
        for &i in &members {
            hits[i].push(k);
        }
        if prev.as_ref() != Some(&members) {
            zero_sets.push(ZeroSetChange { step: k, members: members.clone() });
            prev = Some(members);
        }
    }

    let mut eta = Vec::new();
    let mut last_eta = 0.0f64;
    'rounds: loop {
        let bound = last_eta + 1.0;
        let mut eta_i = Vec::with_capacity(d);
        for coord_hits in &hits {
            let pos = coord_hits.partition_point(|&m| sol.time(m) <= bound);
            match coord_hits.get(pos) {
                Some(&m) => eta_i.push(sol.time(m)),
                None => break 'rounds,
            }
        }
        let (last, &eta_k) =
            eta_i.iter().enumerate().fold((0, &f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        eta.push(EtaRound { k: eta.len() + 1, eta_k, eta_i, last });
        last_eta = eta_k;
    }
    Ok(HittingRecord { eps_hit, horizon: sol.time(steps), eta, zero_sets })
}

/// `𝒩(t_k)` on every grid point for `ε_hit/2`, `ε_hit` and `2ε_hit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountSensitivity {
    pub eps_hit: f64,
    pub half: Vec<usize>,
    pub nominal: Vec<usize>,
    pub double: Vec<usize>,
}

pub fn count_sensitivity(sol: &SkorokhodSolution, eps_hit: f64) -> Result<CountSensitivity> {
    let counts = |eps: f64| -> Result<Vec<usize>> {
        let rec = eta_sequence(sol, eps)?;
        Ok((0..=sol.steps()).map(|k| count_n(&rec, sol.time(k))).collect())
    };
    Ok(CountSensitivity {
        eps_hit,
        half: counts(eps_hit / 2.0)?,
        nominal: counts(eps_hit)?,
        double: counts(2.0 * eps_hit)?,
    })
}

/// Empirical coupon probability and the analytic lower bound `p₀`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P0Estimate {
    pub estimate: f64,
    pub std_err: f64,
    /// Coordinate with the smallest hit frequency.
    pub coordinate: usize,
    pub per_coordinate: Vec<f64>,
    pub analytic: f64,
    pub reps: usize,
    pub dt: f64,
    pub eps_hit: f64,
}

impl P0Estimate {
    pub fn csv_header() -> &'static str {
        "model_hash,reps,estimate,se,analytic_bound"
    }

    pub fn csv_row(&self, model_hash: &str) -> String {
        format!("{model_hash},{},{:.9e},{:.9e},{:.9e}", self.reps, self.estimate, self.std_err, self.analytic)
    }
}

pub const MIN_P0_REPS: usize = 1000;

/// Frequency, over `reps` unit-time paths from `b₁𝟏`, of each coordinate
/// reaching `ε_hit`; the minimum over coordinates is reported.
pub fn estimate_p0(
    model: &NetworkModel,
    cert: &AssumptionCertificate,
    reps: usize,
    dt: f64,
    seed: u64,
    eps_hit: Option<f64>,
) -> Result<P0Estimate> {
    if reps < MIN_P0_REPS {
        return Err(Error::InvalidArgument(format!("estimate_p0 needs at least {MIN_P0_REPS} reps, got {reps}")));
    }
    let d = model.d;
    let eps = eps_hit.unwrap_or_else(|| default_eps_hit(model, dt));
    let steps = step_count(1.0, dt)?;
    let start = vec![cert.b1; d];
    let stepper = ReflectionStepper::new(&model.r)?;

    let counts = (0..reps)
        .into_par_iter()
        .map(|rep| -> Result<Vec<usize>> {
            let mut rng = rng::stream(rng::derive_path(seed, &[rep as u64]));
            let mut stepper = stepper.clone();
            let mut hit = vec![false; d];
            let mut y = start.clone();
            let (mut l, mut z, mut dx) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
            for k in 0..steps {
                normal_increment(model, dt, &mut rng, &mut z, &mut dx);
                stepper.step(&mut y, &mut l, &dx, k + 1)?;
                for i in 0..d {
                    hit[i] |= y[i] <= eps;
                }
                if hit.iter().all(|&h| h) {
                    break;
                }
            }
            Ok(hit.into_iter().map(usize::from).collect())
        })
        .try_reduce(
            || vec![0usize; d],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                Ok(a)
            },
        )?;

    let per_coordinate: Vec<f64> = counts.iter().map(|&c| c as f64 / reps as f64).collect();
    let coordinate = (0..d).min_by(|&a, &b| per_coordinate[a].total_cmp(&per_coordinate[b])).expect("d >= 1");
    Ok(P0Estimate {
        estimate: per_coordinate[coordinate],
        std_err: proportion_se(counts[coordinate], reps).1,
        coordinate,
        per_coordinate,
        analytic: cert.p0,
        reps,
        dt,
        eps_hit: eps,
    })
}

/// Outcome of the round structure: reach `{Y⁺ ≤ 𝟏}`, then watch one
/// coordinate for a unit of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub coordinate: usize,
    /// First successful round (1-based), if any.
    pub success_round: Option<usize>,
    pub rounds: usize,
    /// Time spent across all rounds; bounds `η_i¹` from above on success.
    pub cumulative_time: f64,
    /// `τ⁺` of each round measured from the round's start.
    pub tau_plus: Vec<HitTime>,
    /// Set when `max_rounds` passed without a success (not an error).
    pub max_rounds_exceeded: bool,
}

/// Caps the search for the compact set within one round.
pub const TAU_SEARCH_LIMIT: f64 = 1e4;

/// Runs geometric trials on `coordinate`, starting from `y0`.
///
/// Each round restarts the dominating process from the current state of
/// `Y`, runs until `Y⁺ ≤ 𝟏`, then checks whether `Y_coordinate` reaches
/// `ε_hit` within one time unit.
#[allow(clippy::too_many_arguments)]
pub fn geometric_trials(
    model: &NetworkModel,
    cert: &AssumptionCertificate,
    coordinate: usize,
    y0: &[f64],
    dt: f64,
    seed: u64,
    max_rounds: usize,
    eps_hit: Option<f64>,
) -> Result<TrialRecord> {
    let d = model.d;
    if coordinate >= d {
        return Err(Error::InvalidArgument(format!("coordinate {coordinate} out of range for d = {d}")));
    }
    if y0.len() != d {
        return Err(Error::DimensionMismatch(format!("y0 has length {}, model has d = {d}", y0.len())));
    }
    if !(cert.delta1 > 0.0) {
        return Err(Error::Precondition("geometric trials need delta1 > 0".into()));
    }
    let eps = eps_hit.unwrap_or_else(|| default_eps_hit(model, dt));
    let window = step_count(1.0, dt)?;
    let search = step_count(TAU_SEARCH_LIMIT, dt)?;
    let mu_plus = cert.mu_plus(model);
    let mut stepper = ReflectionStepper::new(&model.r)?;
    let mut rng = rng::stream(seed);

    let mut y = y0.to_vec();
    let (mut l, mut z, mut dx) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut total_steps = 0usize;
    let mut taus = Vec::new();
    let mut success_round = None;

    for round in 1..=max_rounds {
        let mut plus = y.clone();
        let mut reached = plus.iter().all(|&v| v <= 1.0);
        let mut tau_steps = 0usize;
        while !reached && tau_steps < search {
            normal_increment(model, dt, &mut rng, &mut z, &mut dx);
            stepper.step(&mut y, &mut l, &dx, total_steps + 1)?;
            for i in 0..d {
                plus[i] = (plus[i] + dx[i] - mu_plus[i] * dt).max(0.0);
            }
            tau_steps += 1;
            total_steps += 1;
            reached = plus.iter().all(|&v| v <= 1.0);
        }
        if !reached {
            taus.push(HitTime::Censored);
            return Ok(TrialRecord {
                coordinate,
                success_round: None,
                rounds: round,
                cumulative_time: total_steps as f64 * dt,
                tau_plus: taus,
                max_rounds_exceeded: false,
            });
        }
        taus.push(HitTime::At(tau_steps as f64 * dt));

        let mut success = false;
        for _ in 0..window {
            normal_increment(model, dt, &mut rng, &mut z, &mut dx);
            stepper.step(&mut y, &mut l, &dx, total_steps + 1)?;
            total_steps += 1;
            if y[coordinate] <= eps {
                success = true;
                break;
            }
        }
        if success {
            success_round = Some(round);
            break;
        }
    }
    let rounds = success_round.unwrap_or(max_rounds);
    Ok(TrialRecord {
        coordinate,
        success_round,
        rounds,
        cumulative_time: total_steps as f64 * dt,
        tau_plus: taus,
        max_rounds_exceeded: success_round.is_none(),
    })
}

/// Writes p₀ studies as CSV.
pub fn write_p0_csv<W: Write>(mut out: W, rows: &[(String, P0Estimate)]) -> Result<()> {
    writeln!(out, "{}", P0Estimate::csv_header())?;
    for (hash, est) in rows {
        writeln!(out, "{}", est.csv_row(hash))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skorokhod::{solve_orthogonal, PathGrid};

    fn path_solution(dt: f64, d: usize, y: Vec<f64>) -> SkorokhodSolution {
        // Build a solution whose Y is exactly `y` (rows of length d).
        let steps = y.len() / d - 1;
        let mut incs = Vec::with_capacity(steps * d);
        for k in 0..steps {
            for i in 0..d {
                incs.push(y[(k + 1) * d + i] - y[k * d + i]);
            }
        }
        let mut sol = solve_orthogonal(&PathGrid::new(dt, d, incs).unwrap(), &y[..d]).unwrap();
        sol.y = y;
        sol
    }

    #[test]
    fn tau_plus_examples() {
        let s = path_solution(0.5, 1, vec![0.5, 3.0]);
        assert_eq!(tau_plus(&s, &[1.0]), HitTime::At(0.0));
        let s = path_solution(0.5, 1, (0..8).map(|k| 3.0 - 0.5 * k as f64).collect());
        assert_eq!(tau_plus(&s, &[1.0]), HitTime::At(2.0));
        let s = path_solution(0.5, 2, vec![2.0; 10]);
        assert_eq!(tau_plus(&s, &[1.0, 1.0]), HitTime::Censored);
    }

    #[test]
    fn eta_follows_unit_separation() {
        // dips at t = 0.3, 1.8, 2.1 on a 0.1 grid, horizon 3
        let mut y = vec![1.0; 31];
        for k in [3, 18, 21] {
            y[k] = 0.0;
        }
        let s = path_solution(0.1, 1, y);
        let rec = eta_sequence(&s, 0.05).unwrap();
        // the first round must start after time 1, so the dip at 0.3 does not count
        assert_eq!(rec.eta_times().len(), 1);
        assert!((rec.eta[0].eta_k - 1.8).abs() < 1e-12);
        assert_eq!(count_n(&rec, 1.7), 0);
        assert_eq!(count_n(&rec, rec.eta[0].eta_k), 1);
        assert_eq!(count_n(&rec, 3.0), 1);
    }

    #[test]
    fn eta_rounds_and_counts() {
        let mut y = vec![1.0; 61];
        for k in [12, 15, 30, 41, 52] {
            y[k] = 0.0;
        }
        let s = path_solution(0.1, 1, y);
        let rec = eta_sequence(&s, 0.05).unwrap();
        let times = rec.eta_times();
        // 1.2, then first after 2.2 is 3.0, then first after 4.0 is 4.1, then after 5.1 is 5.2
        let expected = [1.2, 3.0, 4.1, 5.2];
        assert_eq!(times.len(), expected.len());
        for (a, b) in times.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        for w in times.windows(2) {
            assert!(w[1] >= w[0] + 1.0);
        }
        assert_eq!(count_n(&rec, 3.5), 2);
    }

    #[test]
    fn eta_empty_and_max_over_coordinates() {
        let s = path_solution(0.1, 1, vec![1.0; 50]);
        let rec = eta_sequence(&s, 0.4).unwrap();
        assert!(rec.eta.is_empty());
        assert_eq!(count_n(&rec, 100.0), 0);

        let mut y = vec![1.0; 2 * 40];
        y[2 * 20] = 0.0; // coordinate 0 hits at t = 2, coordinate 1 never
        let s = path_solution(0.1, 2, y);
        assert!(eta_sequence(&s, 0.05).unwrap().eta.is_empty());
        assert!(eta_sequence(&s, 0.0).is_err());
    }

    #[test]
    fn zero_set_trace_records_changes() {
        let y = vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let s = path_solution(0.1, 2, y);
        let rec = eta_sequence(&s, 0.01).unwrap();
        let steps: Vec<usize> = rec.zero_sets.iter().map(|z| z.step).collect();
        assert_eq!(steps, vec![0, 1, 2, 3]);
        assert_eq!(rec.zero_sets[0].members, vec![1]);
        assert_eq!(rec.zero_sets[1].members, vec![0, 1]);
        assert_eq!(rec.zero_sets[2].members, vec![0]);
        assert!(rec.zero_sets[3].members.is_empty());
    }

    #[test]
    fn eta_json_layout() {
        let mut y = vec![1.0; 31];
        y[15] = 0.0;
        let s = path_solution(0.1, 1, y);
        let json = eta_sequence(&s, 0.05).unwrap().to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v[0]["k"], 1);
        assert!(v[0]["eta_i"].is_array());
    }
}
