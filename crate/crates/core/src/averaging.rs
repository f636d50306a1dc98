//! Averaged drift, the averaged ODE and law-of-large-numbers diagnostics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fastchain;
use crate::model::Model;
use crate::rng::StreamId;
use crate::simulator::{self, SimSpec};

/// A piecewise-linear path on a strictly increasing time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    d: usize,
    grid: Vec<f64>,
    /// Row-major `(K + 1) x d`.
    values: Vec<f64>,
}

impl Path {
    pub fn new(grid: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Path> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "{} path values for {} grid nodes",
                values.len(),
                grid.len()
            )));
        }
        let d = values.first().map_or(0, Vec::len);
        if values.iter().any(|v| v.len() != d) || d == 0 {
            return Err(Error::Shape("path values must share a positive dimension".into()));
        }
        Path::from_flat(d, grid, values.concat())
    }

    pub fn from_flat(d: usize, grid: Vec<f64>, values: Vec<f64>) -> Result<Path> {
        if grid.len() < 2 {
            return Err(Error::InvalidArgument("a path needs at least two grid nodes".into()));
        }
        if values.len() != grid.len() * d {
            return Err(Error::Shape(format!(
                "{} values for {} nodes in dimension {d}",
                values.len(),
                grid.len()
            )));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) || !grid.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidArgument("path grid must be finite and strictly increasing".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("path values".into()));
        }
        Ok(Path { d, grid, values })
    }

    /// Straight line from `a` to `b` on `k` equal intervals of `[0, t_end]`.
    pub fn straight_line(a: &[f64], b: &[f64], t_end: f64, k: usize) -> Result<Path> {
        let grid = uniform_grid(t_end, k);
        let values = grid
            .iter()
            .flat_map(|t| {
                let s = t / t_end;
                a.iter().zip(b).map(move |(p, q)| p + s * (q - p))
            })
            .collect();
        Path::from_flat(a.len(), grid, values)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of intervals.
    pub fn intervals(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn t_end(&self) -> f64 {
        *self.grid.last().expect("non-empty grid")
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.values[k * self.d..(k + 1) * self.d]
    }

    pub fn start(&self) -> &[f64] {
        self.point(0)
    }

    pub fn end(&self) -> &[f64] {
        self.point(self.grid.len() - 1)
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.grid[k + 1] - self.grid[k]
    }

    /// Constant slope on interval `k`.
    pub fn slope(&self, k: usize) -> Vec<f64> {
        let dt = self.dt(k);
        self.point(k + 1)
            .iter()
            .zip(self.point(k))
            .map(|(b, a)| (b - a) / dt)
            .collect()
    }

    /// Midpoint of interval `k`.
    pub fn midpoint(&self, k: usize) -> Vec<f64> {
        self.point(k + 1)
            .iter()
            .zip(self.point(k))
            .map(|(b, a)| 0.5 * (a + b))
            .collect()
    }

    /// Linear interpolation, clamped to the grid.
    pub fn at(&self, t: f64) -> Vec<f64> {
        let k = interval_index(&self.grid, t);
        let s = ((t - self.grid[k]) / self.dt(k)).clamp(0.0, 1.0);
        self.point(k)
            .iter()
            .zip(self.point(k + 1))
            .map(|(a, b)| a + s * (b - a))
            .collect()
    }

    /// Max over grid nodes of the Euclidean distance. Both paths must share a grid.
    pub fn sup_distance(&self, other: &Path) -> Result<f64> {
        if self.grid != other.grid || self.d != other.d {
            return Err(Error::Shape("paths live on different grids".into()));
        }
        Ok((0..self.grid.len())
            .map(|k| dist(self.point(k), other.point(k)))
            .fold(0.0, f64::max))
    }
}

/// Interval `k` with `grid[k] <= t < grid[k + 1]`, clamped to the last interval.
pub(crate) fn interval_index(grid: &[f64], t: f64) -> usize {
    let last = grid.len() - 2;
    match grid.binary_search_by(|g| g.total_cmp(&t)) {
        Ok(k) => k.min(last),
        Err(0) => 0,
        Err(k) => (k - 1).min(last),
    }
}

/// `0, h, 2h, ...` up to `t_end`, with a final partial step when `h` does not
/// divide `t_end`.
pub fn time_grid(t_end: f64, h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidArgument(format!("horizon T must be positive, got {t_end}")));
    }
    let n = (t_end / h - 1e-9).ceil().max(1.0) as usize;
    let mut grid: Vec<f64> = (0..n).map(|k| k as f64 * h).collect();
    grid.push(t_end);
    Ok(grid)
}

pub fn uniform_grid(t_end: f64, k: usize) -> Vec<f64> {
    (0..=k).map(|i| t_end * i as f64 / k as f64).collect()
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `b_hat(x) = sum_y b(x, y) nu_y(x)`.
pub fn averaged_drift(model: &Model, x: &[f64]) -> Result<Vec<f64>> {
    let nu = fastchain::nu(model, x)?;
    Ok(mix_drift(model, x, &nu))
}

/// `sum_y w_y b(x, y)`.
pub(crate) fn mix_drift(model: &Model, x: &[f64], w: &[f64]) -> Vec<f64> {
    let d = model.d();
    let mut out = vec![0.0; d];
    let mut b = vec![0.0; d];
    for (y, &wy) in w.iter().enumerate() {
        model.b_into(x, y, &mut b);
        for k in 0..d {
            out[k] += wy * b[k];
        }
    }
    out
}

fn drift_checked(model: &Model, x: &[f64]) -> Result<Vec<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("averaged ODE state {x:?}")));
    }
    let nu = fastchain::nu_fast(model, x)?;
    Ok(mix_drift(model, x, &nu))
}

/// Default blow-up guard for [`solve_averaged_ode`].
pub const DEFAULT_BLOWUP_NORM: f64 = 1e8;

/// Classical RK4 for `xi' = b_hat(xi)` on [`time_grid`]`(t_end, h)`.
pub fn solve_averaged_ode(model: &Model, x0: &[f64], t_end: f64, h: f64) -> Result<Path> {
    solve_averaged_ode_guarded(model, x0, t_end, h, DEFAULT_BLOWUP_NORM)
}

/// [`solve_averaged_ode`] aborting once `|xi|` exceeds `max_norm`.
pub fn solve_averaged_ode_guarded(model: &Model, x0: &[f64], t_end: f64, h: f64, max_norm: f64) -> Result<Path> {
    if x0.len() != model.d() {
        return Err(Error::Shape(format!("x0 has length {}, expected {}", x0.len(), model.d())));
    }
    let grid = time_grid(t_end, h)?;
    let d = model.d();
    let mut values = Vec::with_capacity(grid.len() * d);
    let mut x = x0.to_vec();
    values.extend_from_slice(&x);
    for w in grid.windows(2) {
        x = rk4_step(|p| drift_checked(model, p), &x, w[1] - w[0])?;
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n <= max_norm) {
            return Err(Error::Numerical(format!(
                "averaged ODE left the ball of radius {max_norm} at t = {}",
                w[1]
            )));
        }
        values.extend_from_slice(&x);
    }
    Path::from_flat(d, grid, values)
}

pub(crate) fn rk4_step(f: impl Fn(&[f64]) -> Result<Vec<f64>>, x: &[f64], dt: f64) -> Result<Vec<f64>> {
    let shift = |k: &[f64], s: f64| -> Vec<f64> { x.iter().zip(k).map(|(a, b)| a + s * b).collect() };
    let k1 = f(x)?;
    let k2 = f(&shift(&k1, 0.5 * dt))?;
    let k3 = f(&shift(&k2, 0.5 * dt))?;
    let k4 = f(&shift(&k3, dt))?;
    Ok((0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// One row of the law-of-large-numbers table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlnRow {
    pub epsilon: f64,
    pub n: usize,
    pub mean_sup_dev: f64,
    pub q50: f64,
    pub q90: f64,
    pub stderr: f64,
}

/// For each `eps`, statistics of `sup_t |X^eps(t) - xi(t)|` over `n`
/// trajectories, measured on the simulation grid. Every `eps` reuses streams
/// `(seed, 1..=n)`.
pub fn lln_diagnostic(
    model: &Model,
    x0: &[f64],
    y0: usize,
    eps_list: &[f64],
    n: usize,
    seed: u64,
    h: f64,
    t_end: f64,
) -> Result<Vec<LlnRow>> {
    if n < 2 {
        return Err(Error::InvalidArgument("lln_diagnostic needs n >= 2".into()));
    }
    let reference = solve_averaged_ode(model, x0, t_end, h)?;
    eps_list
        .iter()
        .map(|&eps| {
            let spec = SimSpec::new(eps, x0.to_vec(), y0, t_end, h);
            let devs = simulator::batch_map(n as u64, seed, |stream: StreamId| {
                let traj = simulator::simulate(model, &spec, stream)?;
                traj.path.sup_distance(&reference)
            })?;
            Ok(summarize(eps, &devs))
        })
        .collect()
}

pub(crate) fn summarize(eps: f64, devs: &[f64]) -> LlnRow {
    let n = devs.len();
    let (mean, stderr) = mean_stderr(devs);
    let mut sorted = devs.to_vec();
    sorted.par_sort_by(|a, b| a.total_cmp(b));
    LlnRow {
        epsilon: eps,
        n,
        mean_sup_dev: mean,
        q50: quantile(&sorted, 0.5),
        q90: quantile(&sorted, 0.9),
        stderr,
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Linear-interpolation quantile of sorted data.
pub(crate) fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}
