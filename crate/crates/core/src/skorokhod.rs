//! Discrete Skorokhod problem on a uniform grid.
//!
//! Given increments `ΔX` of a driving path and a start `y0 ≥ 0`, find `Y`
//! and a nondecreasing regulator `L` with `L(0) = 0`, `Y = y0 + X + RL ≥ 0`,
//! and `L_i` growing only while `Y_i = 0`. The orthogonal case `R = I` has the
//! running-minimum closed form; general M-matrix reflections are solved one
//! step at a time by projected Gauss–Seidel.

use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::network_model::check_m_matrix;

/// PGS stops once a full sweep moves `ΔL` by less than this times the scale.
const PGS_TOL: f64 = 1e-12;
/// Sweep cap per time step.
pub const PGS_MAX_SWEEPS: usize = 100_000;

/// Increments of a driving path on a uniform grid. `X(0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathGrid {
    pub dt: f64,
    pub d: usize,
    /// Row-major `K × d` increments.
    pub increments: Vec<f64>,
}

impl PathGrid {
    pub fn new(dt: f64, d: usize, increments: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt = {dt} must be positive")));
        }
        if d == 0 || !increments.len().is_multiple_of(d) {
            return Err(Error::DimensionMismatch(format!(
                "{} increments do not split into rows of length {d}",
                increments.len()
            )));
        }
        if increments.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("path increments must be finite".into()));
        }
        Ok(PathGrid { dt, d, increments })
    }

    /// Number of steps `K`.
    pub fn steps(&self) -> usize {
        self.increments.len() / self.d
    }

    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.d..(k + 1) * self.d]
    }

    /// Cumulative path `X(t_k)`, `(K+1) × d` row-major.
    pub fn cumulative(&self) -> Vec<f64> {
        let d = self.d;
        let mut x = vec![0.0; (self.steps() + 1) * d];
        for k in 0..self.steps() {
            for i in 0..d {
                x[(k + 1) * d + i] = x[k * d + i] + self.increments[k * d + i];
            }
        }
        x
    }
}

/// Reflected path, regulator and the data needed to re-check them.
#[derive(Debug, Clone, PartialEq)]
pub struct SkorokhodSolution {
    pub d: usize,
    pub dt: f64,
    pub y0: Vec<f64>,
    /// `(K+1) × d` row-major.
    pub y: Vec<f64>,
    /// `(K+1) × d` row-major, `L(0) = 0`.
    pub l: Vec<f64>,
    /// Cumulative driver `X(t_k)`, `(K+1) × d` row-major.
    pub x: Vec<f64>,
    pub reflection: DMatrix<f64>,
    pub residual_identity: f64,
    pub residual_complementarity: f64,
    pub min_y: f64,
}

impl SkorokhodSolution {
    pub fn steps(&self) -> usize {
        self.y.len() / self.d - 1
    }

    pub fn y_at(&self, k: usize) -> &[f64] {
        &self.y[k * self.d..(k + 1) * self.d]
    }

    pub fn l_at(&self, k: usize) -> &[f64] {
        &self.l[k * self.d..(k + 1) * self.d]
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// `1 + max|Y|`.
    pub fn scale(&self) -> f64 {
        1.0 + self.y.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Complementarity tolerance `10⁻⁸ · scale · K·dt`.
    pub fn tol_comp(&self) -> f64 {
        tol_comp(self.scale(), self.steps(), self.dt)
    }

    /// Writes `t, Y_1…Y_d, L_1…L_d` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.d;
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("Y_{i}")));
        header.extend((1..=d).map(|i| format!("L_{i}")));
        writeln!(out, "{}", header.join(","))?;
        for k in 0..=self.steps() {
            let mut row = vec![format!("{:.9e}", self.time(k))];
            row.extend(self.y_at(k).iter().map(|v| format!("{v:.9e}")));
            row.extend(self.l_at(k).iter().map(|v| format!("{v:.9e}")));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Little-endian dump: `d: u64, K: u64, dt: f64`, then `Y`, then `L`.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&(self.d as u64).to_le_bytes())?;
        out.write_all(&(self.steps() as u64).to_le_bytes())?;
        out.write_all(&self.dt.to_le_bytes())?;
        for v in self.y.iter().chain(&self.l) {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

/// `(d, K, dt, Y, L)` as stored by [`SkorokhodSolution::write_binary`].
pub type BinaryDump = (usize, usize, f64, Vec<f64>, Vec<f64>);

/// Reads back a dump written by [`SkorokhodSolution::write_binary`].
pub fn read_binary(bytes: &[u8]) -> Result<BinaryDump> {
    let word = |i: usize| -> Result<[u8; 8]> {
        bytes
            .get(8 * i..8 * i + 8)
            .map(|s| s.try_into().expect("slice of length 8"))
            .ok_or_else(|| Error::InvalidArgument("truncated solution dump".into()))
    };
    let d = u64::from_le_bytes(word(0)?) as usize;
    let k = u64::from_le_bytes(word(1)?) as usize;
    let dt = f64::from_le_bytes(word(2)?);
    let n = (k + 1) * d;
    if bytes.len() != 8 * (3 + 2 * n) {
        return Err(Error::InvalidArgument(format!("dump length {} does not match d = {d}, K = {k}", bytes.len())));
    }
    let mut values = (0..2 * n).map(|i| word(3 + i).map(f64::from_le_bytes));
    let y = values.by_ref().take(n).collect::<Result<Vec<_>>>()?;
    let l = values.collect::<Result<Vec<_>>>()?;
    Ok((d, k, dt, y, l))
}

/// Complementarity tolerance for a path of `steps` steps.
pub fn tol_comp(scale: f64, steps: usize, dt: f64) -> f64 {
    1e-8 * scale * steps as f64 * dt
}

fn check_start(y0: &[f64], d: usize) -> Result<()> {
    if y0.len() != d {
        return Err(Error::DimensionMismatch(format!("y0 has length {}, path has d = {d}", y0.len())));
    }
    for (index, &value) in y0.iter().enumerate() {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::NegativeStart { index, value });
        }
    }
    Ok(())
}

/// Orthogonal reflection by the running minimum, coordinate by coordinate.
pub fn solve_orthogonal(path: &PathGrid, y0: &[f64]) -> Result<SkorokhodSolution> {
    let d = path.d;
    check_start(y0, d)?;
    let x = path.cumulative();
    let steps = path.steps();
    let mut y = vec![0.0; (steps + 1) * d];
    let mut l = vec![0.0; (steps + 1) * d];
    for i in 0..d {
        let mut running_min = 0.0f64;
        for k in 0..=steps {
            let free = y0[i] + x[k * d + i];
            running_min = running_min.min(free);
            l[k * d + i] = -running_min;
            y[k * d + i] = free - running_min;
        }
    }
    Ok(finish(d, path.dt, y0.to_vec(), y, l, x, DMatrix::identity(d, d)))
}

/// One-step complementarity solver for a fixed reflection matrix.
///
/// Solves `ΔL ≥ 0`, `w = base + RΔL ≥ 0`, `wᵀΔL = 0` by projected
/// Gauss–Seidel started from `ΔL = 0`. For an M-matrix with unit diagonal the
/// iterates increase monotonically to the least solution.
#[derive(Debug, Clone)]
pub struct ReflectionStepper {
    d: usize,
    /// Column-major copy of `R` for cheap column updates.
    r: DMatrix<f64>,
    w: Vec<f64>,
    dl: Vec<f64>,
    /// Largest sweep count seen so far.
    pub max_sweeps: usize,
}

impl ReflectionStepper {
    pub fn new(r: &DMatrix<f64>) -> Result<Self> {
        if !check_m_matrix(r)? {
            return Err(Error::NotMMatrix);
        }
        let d = r.nrows();
        if (0..d).any(|i| !(r[(i, i)] > 0.0)) {
            return Err(Error::NotMMatrix);
        }
        Ok(ReflectionStepper { d, r: r.clone(), w: vec![0.0; d], dl: vec![0.0; d], max_sweeps: 0 })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Advances `y` in place by `dx`, adding the regulator increment to `l`.
    /// `step` is only used for error reporting.
    pub fn step(&mut self, y: &mut [f64], l: &mut [f64], dx: &[f64], step: usize) -> Result<()> {
        let d = self.d;
        let mut scale = 1.0f64;
        let mut all_nonneg = true;
        for i in 0..d {
            self.w[i] = y[i] + dx[i];
            self.dl[i] = 0.0;
            scale = scale.max(1.0 + y[i].abs()).max(1.0 + self.w[i].abs());
            all_nonneg &= self.w[i] >= 0.0;
        }
        if all_nonneg {
            y.copy_from_slice(&self.w);
            return Ok(());
        }

        let tol = PGS_TOL * scale;
        let mut sweeps = 0;
        loop {
            let mut change = 0.0f64;
            for i in 0..d {
                let next = (self.dl[i] - self.w[i] / self.r[(i, i)]).max(0.0);
                let delta = next - self.dl[i];
                if delta != 0.0 {
                    self.dl[i] = next;
                    let col = self.r.column(i);
                    for (wj, rj) in self.w.iter_mut().zip(col.iter()) {
                        *wj += rj * delta;
                    }
                    change = change.max(delta.abs());
                }
            }
            sweeps += 1;
            if change < tol {
                break;
            }
            if sweeps >= PGS_MAX_SWEEPS {
                let residual = self.w.iter().fold(0.0f64, |m, &v| m.max(-v));
                return Err(Error::NoConvergence { step, residual });
            }
        }
        self.max_sweeps = self.max_sweeps.max(sweeps);

        // Recompute Y from scratch so the identity residual does not carry
        // the drift of the incremental updates.
        for i in 0..d {
            let mut yi = y[i] + dx[i];
            for j in 0..d {
                yi += self.r[(i, j)] * self.dl[j];
            }
            y[i] = yi;
            l[i] += self.dl[i];
        }
        Ok(())
    }
}

/// General M-matrix reflection, one complementarity solve per step.
pub fn solve_reflected(path: &PathGrid, y0: &[f64], r: &DMatrix<f64>) -> Result<SkorokhodSolution> {
    let d = path.d;
    check_start(y0, d)?;
    if r.shape() != (d, d) {
        return Err(Error::DimensionMismatch(format!("R is {:?}, path has d = {d}", r.shape())));
    }
    let mut stepper = ReflectionStepper::new(r)?;
    let steps = path.steps();
    let mut y = vec![0.0; (steps + 1) * d];
    let mut l = vec![0.0; (steps + 1) * d];
    y[..d].copy_from_slice(y0);
    let mut cur_y = y0.to_vec();
    let mut cur_l = vec![0.0; d];
    for k in 0..steps {
        stepper.step(&mut cur_y, &mut cur_l, path.increment(k), k + 1)?;
        y[(k + 1) * d..(k + 2) * d].copy_from_slice(&cur_y);
        l[(k + 1) * d..(k + 2) * d].copy_from_slice(&cur_l);
    }
    Ok(finish(d, path.dt, y0.to_vec(), y, l, path.cumulative(), r.clone()))
}

fn finish(
    d: usize,
    dt: f64,
    y0: Vec<f64>,
    y: Vec<f64>,
    l: Vec<f64>,
    x: Vec<f64>,
    reflection: DMatrix<f64>,
) -> SkorokhodSolution {
    let mut sol = SkorokhodSolution {
        d,
        dt,
        y0,
        y,
        l,
        x,
        reflection,
        residual_identity: 0.0,
        residual_complementarity: 0.0,
        min_y: 0.0,
    };
    let diag = solution_residuals(&sol);
    sol.residual_identity = diag.residual_identity;
    sol.residual_complementarity = diag.residual_complementarity;
    sol.min_y = diag.min_y;
    sol
}

/// Residuals recomputed from the raw arrays.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Residuals {
    /// `max_k ‖Y − (y0 + X + RL)‖∞`.
    pub residual_identity: f64,
    /// `max_i Σ_k |Y_i(t_k)|·ΔL_i(t_k)`.
    pub residual_complementarity: f64,
    pub min_y: f64,
    /// Most negative regulator increment (0 when `L` is nondecreasing).
    pub min_dl: f64,
    pub scale: f64,
    pub tol_comp: f64,
}

pub fn solution_residuals(sol: &SkorokhodSolution) -> Residuals {
    let d = sol.d;
    let steps = sol.steps();
    let r = &sol.reflection;
    let mut identity = 0.0f64;
    let mut comp = vec![0.0f64; d];
    let mut min_y = f64::INFINITY;
    let mut min_dl = 0.0f64;
    for i in 0..d {
        min_dl = min_dl.min(-sol.l[i].abs());
    }
    for k in 0..=steps {
        let row = k * d;
        for i in 0..d {
            let mut rl = 0.0;
            for j in 0..d {
                rl += r[(i, j)] * sol.l[row + j];
            }
            let expected = sol.y0[i] + sol.x[row + i] + rl;
            identity = identity.max((sol.y[row + i] - expected).abs());
            min_y = min_y.min(sol.y[row + i]);
            if k > 0 {
                let dl = sol.l[row + i] - sol.l[row - d + i];
                min_dl = min_dl.min(dl);
                comp[i] += sol.y[row + i].abs() * dl.max(0.0);
            }
        }
    }
    let scale = sol.scale();
    Residuals {
        residual_identity: identity,
        residual_complementarity: comp.into_iter().fold(0.0, f64::max),
        min_y,
        min_dl,
        scale,
        tol_comp: tol_comp(scale, steps, sol.dt),
    }
}
