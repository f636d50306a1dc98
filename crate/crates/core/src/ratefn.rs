//! The large-deviation local rate `L(x, beta)` and path rate `I(xi)`.
//!
//! `L(x, beta)` is the least cost of a triple `(pi, q, u)`: a law `pi` on the
//! fast states, thinned channel rates `q` with `pi` stationary for them, and
//! drift controls `u_i`, producing velocity
//! `beta = sum_i pi_i (b_i(x) + a_i(x) u_i)`. The cost is
//!
//! ```text
//! sum_i pi_i |u_i|^2 / 2  +  sum_(i,j) pi_i rho_ij l(q_ij / rho_ij),   l(v) = v log v - v + 1.
//! ```
//!
//! [`local_rate`] searches over `pi` on the affine set where the velocity
//! constraint is solvable, with the two inner problems in closed or dual form:
//! the drift part is a least-norm problem, and the cheapest rates making `pi`
//! stationary come from the concave dual
//! `sup_h sum pi_i rho_ij (1 - exp(h_j - h_i))`, attained at
//! `q_ij = rho_ij exp(h_j - h_i)`. [`local_rate_bruteforce`] instead
//! enumerates `q = rho exp(theta)` on a grid and is used as an independent check.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::{self, Path};
use crate::error::{Error, Result};
use crate::fastchain::{self, JumpGeometry};
use crate::linalg;
use crate::model::Model;
use crate::optim::{self, BfgsOptions};

/// `v log v - v + 1`, with `l(0) = 1`.
pub fn ell(v: f64) -> Result<f64> {
    if !(v >= 0.0) {
        return Err(Error::InvalidArgument(format!("l is defined on [0, inf), got {v}")));
    }
    Ok(ell_unchecked(v))
}

#[inline]
pub(crate) fn ell_unchecked(v: f64) -> f64 {
    if v == 0.0 {
        1.0
    } else {
        v * v.ln() - v + 1.0
    }
}

/// A candidate minimizer: `pi` over states, `q` per channel (model order),
/// `u` as `L x m` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlTriple {
    pub pi: Vec<f64>,
    pub q: Vec<f64>,
    pub u: Vec<f64>,
}

impl ControlTriple {
    pub fn u_of(&self, i: usize, m: usize) -> &[f64] {
        &self.u[i * m..(i + 1) * m]
    }

    /// `max_j |(pi Q(q))_j|`.
    pub fn stationarity_residual(&self, geometry: &JumpGeometry) -> Result<f64> {
        Ok(fastchain::controlled_generator(geometry, &self.q)?.balance_residual(&self.pi))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerQuadratic {
    /// `+inf` when infeasible.
    pub value: f64,
    /// `L x m`, zero when infeasible.
    pub u: Vec<f64>,
    pub feasible: bool,
}

/// Relative rank cutoff for the drift Gram matrix.
pub const RANK_TOL: f64 = 1e-10;

/// Cheapest drift controls for `pi` at `x`: minimizes
/// `sum pi_i |u_i|^2 / 2` subject to `sum pi_i a_i u_i = beta - sum pi_i b_i`.
pub fn inner_quadratic(model: &Model, x: &[f64], pi: &[f64], beta: &[f64]) -> InnerQuadratic {
    let (d, m, l) = (model.d(), model.m(), model.n_states());
    let mut b = vec![0.0; d];
    let mut a = vec![0.0; d * m];
    let mut gram = DMatrix::<f64>::zeros(d, d);
    let mut resid = DVector::from_column_slice(beta);
    let mut scale = 1.0 + beta.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut a_mats = Vec::with_capacity(l);
    for y in 0..l {
        model.b_into(x, y, &mut b);
        model.a_into(x, y, &mut a);
        let am = DMatrix::from_row_slice(d, m, &a);
        if pi[y] != 0.0 {
            gram += pi[y] * &am * am.transpose();
            for k in 0..d {
                resid[k] -= pi[y] * b[k];
            }
            scale += pi[y] * b.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        a_mats.push(am);
    }
    let (pinv, null) = linalg::psd_pinv(&gram, RANK_TOL);
    let outside = (&null * &resid).norm();
    if outside > 1e-9 * scale {
        return InnerQuadratic {
            value: f64::INFINITY,
            u: vec![0.0; l * m],
            feasible: false,
        };
    }
    let w = &pinv * &resid;
    let value = 0.5 * resid.dot(&w);
    let mut u = Vec::with_capacity(l * m);
    for am in &a_mats {
        u.extend((am.transpose() * &w).iter());
    }
    InnerQuadratic {
        value: value.max(0.0),
        u,
        feasible: true,
    }
}

/// `sum_(i,j) pi_i rho_ij l(q_ij / rho_ij)`.
pub fn jump_cost(geometry: &JumpGeometry, pi: &[f64], q: &[f64]) -> f64 {
    geometry
        .channels
        .iter()
        .zip(&geometry.rho)
        .zip(q)
        .map(|((&(i, _), &rho), &qij)| {
            if pi[i] == 0.0 {
                0.0
            } else {
                pi[i] * rho * ell_unchecked(qij / rho)
            }
        })
        .sum()
}

/// Least jump cost over rates `q` that make `pi` stationary, with the
/// minimizing rates. Channels leaving the support of `pi` into states outside
/// it are switched off; on the support the concave dual is maximized by a
/// damped Newton iteration.
pub fn min_jump_cost(geometry: &JumpGeometry, pi: &[f64]) -> (f64, Vec<f64>) {
    let l = geometry.n_states;
    let support: Vec<usize> = (0..l).filter(|&i| pi[i] > 0.0).collect();
    let mut pos = vec![usize::MAX; l];
    for (k, &i) in support.iter().enumerate() {
        pos[i] = k;
    }
    // channels into states outside the support stay off and cost pi_i rho_ij
    // through `jump_cost`; (channel index, local i, local j, pi_i rho_ij)
    let mut inner = Vec::new();
    for (c, (&(i, j), &rho)) in geometry.channels.iter().zip(&geometry.rho).enumerate() {
        if pi[i] == 0.0 {
            continue;
        }
        if pi[j] > 0.0 {
            inner.push((c, pos[i], pos[j], pi[i] * rho));
        }
    }

    let n = support.len();
    let mut h = vec![0.0; n];
    let dual = |h: &[f64]| -> f64 { inner.iter().map(|&(_, i, j, w)| w * (1.0 - (h[j] - h[i]).exp())).sum() };
    let mut val = dual(&h);
    if n > 1 {
        for _ in 0..200 {
            let mut grad = vec![0.0; n];
            let mut lap = DMatrix::<f64>::zeros(n, n);
            for &(_, i, j, w) in &inner {
                let f = w * (h[j] - h[i]).exp();
                grad[i] += f;
                grad[j] -= f;
                lap[(i, i)] += f;
                lap[(j, j)] += f;
                lap[(i, j)] -= f;
                lap[(j, i)] -= f;
            }
            let gnorm = grad.iter().map(|g| g.abs()).fold(0.0, f64::max);
            let total: f64 = inner.iter().map(|e| e.3).sum();
            if gnorm <= 1e-15 * total.max(1e-300) {
                break;
            }
            // pin h[0]; the dual is invariant under constant shifts
            let sub = lap.view((1, 1), (n - 1, n - 1)).into_owned();
            let rhs = DVector::from_column_slice(&grad[1..]);
            let step = solve_psd(sub, &rhs);
            let mut t = 1.0;
            let mut improved = false;
            for _ in 0..50 {
                let trial: Vec<f64> = std::iter::once(h[0])
                    .chain((1..n).map(|k| h[k] + t * step[k - 1]))
                    .collect();
                let tv = dual(&trial);
                if tv >= val {
                    improved = tv > val || t == 1.0;
                    h = trial;
                    val = tv;
                    break;
                }
                t *= 0.5;
            }
            if !improved {
                break;
            }
        }
    }

    let mut q: Vec<f64> = geometry.rho.clone();
    for (c, &(i, j)) in geometry.channels.iter().enumerate() {
        if pi[i] > 0.0 && pi[j] == 0.0 {
            q[c] = 0.0;
        }
    }
    for &(c, i, j, _) in &inner {
        q[c] = geometry.rho[c] * (h[j] - h[i]).exp();
    }
    (jump_cost(geometry, pi, &q), q)
}

/// Cholesky with growing diagonal shift for a positive semidefinite system.
fn solve_psd(mut a: DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let scale = a.diagonal().iter().cloned().fold(0.0, f64::max).max(1e-300);
    let mut shift = 0.0;
    loop {
        if let Some(ch) = a.clone().cholesky() {
            return ch.solve(rhs);
        }
        let next = if shift == 0.0 { 1e-14 * scale } else { shift * 10.0 };
        for k in 0..a.nrows() {
            a[(k, k)] += next - shift;
        }
        shift = next;
    }
}

/// Search settings for [`local_rate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalRateOptions {
    pub multistart: usize,
    pub seed: u64,
    pub max_iter: usize,
}

impl Default for LocalRateOptions {
    fn default() -> Self {
        LocalRateOptions {
            multistart: 8,
            seed: 0,
            max_iter: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerDiagnostics {
    pub iterations: usize,
    pub restarts: usize,
    pub grad_norm: f64,
    pub converged: bool,
    /// Dimension of the searched slice of laws `pi`.
    pub free_dims: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalRateResult {
    /// `+inf` when the velocity is unreachable.
    pub value: f64,
    pub argmin: Option<ControlTriple>,
    pub feasible: bool,
    pub diagnostics: OptimizerDiagnostics,
}

impl LocalRateResult {
    fn infeasible(free_dims: usize) -> Self {
        LocalRateResult {
            value: f64::INFINITY,
            argmin: None,
            feasible: false,
            diagnostics: OptimizerDiagnostics {
                iterations: 0,
                restarts: 0,
                grad_norm: f64::NAN,
                converged: true,
                free_dims,
            },
        }
    }
}

/// The affine set of laws compatible with `beta`: `pi = base + basis z`.
struct Slice {
    base: DVector<f64>,
    basis: DMatrix<f64>,
}

impl Slice {
    fn build(model: &Model, x: &[f64], beta: &[f64], anchor: &[f64]) -> Option<Slice> {
        let (d, m, l) = (model.d(), model.m(), model.n_states());
        let mut b = vec![0.0; d];
        let mut a = vec![0.0; d * m];
        let mut span = DMatrix::<f64>::zeros(d, d);
        let mut bmat = DMatrix::<f64>::zeros(d, l);
        for y in 0..l {
            model.b_into(x, y, &mut b);
            model.a_into(x, y, &mut a);
            let am = DMatrix::from_row_slice(d, m, &a);
            span += &am * am.transpose();
            bmat.set_column(y, &DVector::from_column_slice(&b));
        }
        // directions no drift control can reach must be matched by the law
        let (_, null) = linalg::psd_pinv(&span, RANK_TOL);
        let beta_v = DVector::from_column_slice(beta);
        let mut c = DMatrix::<f64>::zeros(d + 1, l);
        c.view_mut((0, 0), (d, l)).copy_from(&(&null * &bmat));
        c.row_mut(d).fill(1.0);
        let mut e = DVector::<f64>::zeros(d + 1);
        e.rows_mut(0, d).copy_from(&(&null * &beta_v));
        e[d] = 1.0;

        let svd = c.clone().svd(true, true);
        let cut = 1e-12 * svd.singular_values.max();
        let cpinv = svd.pseudo_inverse(cut).ok()?;
        let anchor_v = DVector::from_column_slice(anchor);
        let base = &anchor_v + &cpinv * (&e - &c * &anchor_v);
        let scale = 1.0 + beta_v.norm() + bmat.norm();
        if (&c * &base - &e).norm() > 1e-9 * scale {
            return None;
        }
        let basis = linalg::null_space(&c, 1e-12);
        Some(Slice { base, basis })
    }

    fn point(&self, z: &[f64]) -> Vec<f64> {
        let mut p = self.base.clone();
        if !z.is_empty() {
            p += &self.basis * DVector::from_column_slice(z);
        }
        p.iter().copied().collect()
    }

    fn coords(&self, pi: &[f64]) -> Vec<f64> {
        let diff = DVector::from_column_slice(pi) - &self.base;
        (self.basis.transpose() * diff).iter().copied().collect()
    }

    fn dims(&self) -> usize {
        self.basis.ncols()
    }

    /// Pushes the smallest entry of `pi(z)` up by ascent on a soft minimum.
    /// Returns a point with all entries positive, if one is found.
    fn interior_point(&self, z0: &[f64]) -> Option<Vec<f64>> {
        let mut z = z0.to_vec();
        let min_entry = |z: &[f64]| self.point(z).into_iter().fold(f64::INFINITY, f64::min);
        if min_entry(&z) > 0.0 {
            return Some(z);
        }
        if self.dims() == 0 {
            return None;
        }
        let tau = 200.0;
        let neg_softmin = |z: &[f64]| -> Option<f64> {
            let p = self.point(z);
            let lo = p.iter().cloned().fold(f64::INFINITY, f64::min);
            let s: f64 = p.iter().map(|v| (-tau * (v - lo)).exp()).sum();
            Some(-(lo - s.ln() / tau))
        };
        let res = optim::bfgs(neg_softmin, &z, BfgsOptions::default())?;
        z = res.x;
        (min_entry(&z) > 0.0).then_some(z)
    }
}

/// Cost of the law `pi` at velocity `beta`: drift part plus least jump part.
fn law_cost(model: &Model, geometry: &JumpGeometry, x: &[f64], pi: &[f64], beta: &[f64]) -> Option<f64> {
    if pi.iter().any(|&p| p < -1e-14) {
        return None;
    }
    let pi: Vec<f64> = pi.iter().map(|&p| p.max(0.0)).collect();
    let inner = inner_quadratic(model, x, &pi, beta);
    if !inner.feasible {
        return None;
    }
    Some(inner.value + min_jump_cost(geometry, &pi).0)
}

/// Assembles the full minimizing triple for a law `pi`.
fn triple_for(model: &Model, geometry: &JumpGeometry, x: &[f64], pi: &[f64], beta: &[f64]) -> Option<(f64, ControlTriple)> {
    let pi: Vec<f64> = pi.iter().map(|&p| p.max(0.0)).collect();
    let inner = inner_quadratic(model, x, &pi, beta);
    if !inner.feasible {
        return None;
    }
    let (jc, q) = min_jump_cost(geometry, &pi);
    Some((inner.value + jc, ControlTriple { pi, q, u: inner.u }))
}

/// `L(x, beta)`.
pub fn local_rate(model: &Model, x: &[f64], beta: &[f64], opts: &LocalRateOptions) -> Result<LocalRateResult> {
    if x.len() != model.d() || beta.len() != model.d() {
        return Err(Error::Shape("x and beta must have length d".into()));
    }
    if x.iter().chain(beta).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("local_rate arguments".into()));
    }
    let geometry = fastchain::jump_geometry(model, x);
    let nu = fastchain::nu_fast(model, x)?;
    let Some(slice) = Slice::build(model, x, beta, &nu) else {
        return Ok(LocalRateResult::infeasible(0));
    };
    let dims = slice.dims();
    let objective = |z: &[f64]| law_cost(model, &geometry, x, &slice.point(z), beta);

    // starts: the projection of nu, then laws of randomly tilted rates
    let mut starts = Vec::new();
    if let Some(z) = slice.interior_point(&vec![0.0; dims]) {
        starts.push(z);
    } else if dims == 0 && objective(&[]).is_some() {
        starts.push(Vec::new());
    }
    if dims > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for _ in 1..opts.multistart {
            let theta: Vec<f64> = geometry.rho.iter().map(|_| rng.random_range(-3.0..3.0)).collect();
            let q: Vec<f64> = geometry.rho.iter().zip(&theta).map(|(r, t)| r * t.exp()).collect();
            let Ok(gen) = fastchain::controlled_generator(&geometry, &q) else { continue };
            let Ok(p) = fastchain::stationary(&gen) else { continue };
            if let Some(z) = slice.interior_point(&slice.coords(&p)) {
                starts.push(z);
            }
        }
    }
    if starts.is_empty() {
        return Ok(LocalRateResult::infeasible(dims));
    }

    let bopts = BfgsOptions {
        max_iter: opts.max_iter,
        ..BfgsOptions::default()
    };
    let restarts = starts.len();
    let best = starts
        .iter()
        .filter_map(|z0| optim::bfgs(&objective, z0, bopts))
        .min_by(|a, b| a.value.total_cmp(&b.value));
    let Some(best) = best else {
        return Ok(LocalRateResult::infeasible(dims));
    };
    let pi = slice.point(&best.x);
    let Some((value, triple)) = triple_for(model, &geometry, x, &pi, beta) else {
        return Ok(LocalRateResult::infeasible(dims));
    };
    Ok(LocalRateResult {
        value,
        argmin: Some(triple),
        feasible: true,
        diagnostics: OptimizerDiagnostics {
            iterations: best.iterations,
            restarts,
            grad_norm: best.grad_norm,
            converged: best.converged,
            free_dims: dims,
        },
    })
}

/// Cost of the tilted rates `q = rho exp(theta)` with their stationary law;
/// `None` when the velocity is unreachable from that law.
pub fn theta_objective(model: &Model, x: &[f64], beta: &[f64], theta: &[f64]) -> Option<f64> {
    let geometry = fastchain::jump_geometry(model, x);
    theta_cost(model, &geometry, x, beta, theta)
}

fn theta_cost(model: &Model, geometry: &JumpGeometry, x: &[f64], beta: &[f64], theta: &[f64]) -> Option<f64> {
    let q: Vec<f64> = geometry.rho.iter().zip(theta).map(|(r, t)| r * t.exp()).collect();
    let gen = fastchain::controlled_generator(geometry, &q).ok()?;
    let pi = fastchain::stationary(&gen).ok()?;
    let inner = inner_quadratic(model, x, &pi, beta);
    inner.feasible.then(|| inner.value + jump_cost(geometry, &pi, &q))
}

/// Zooming grid over `theta in [-radius, radius]^|T|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub radius: f64,
    /// Upper bound on grid points evaluated per level.
    pub budget: usize,
    pub levels: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            radius: 4.0,
            budget: 120_000,
            levels: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BruteForceResult {
    /// Best value found; `+inf` if no grid point was feasible.
    pub value: f64,
    /// Spacing of the finest grid level.
    pub resolution: f64,
    pub theta: Vec<f64>,
    pub evaluations: usize,
}

/// Exhaustive oracle for `L(x, beta)`.
///
/// With non-degenerate noise every `theta` is feasible and the grid covers all
/// channels. When the reachable drift directions miss one dimension, the
/// velocity fixes one more degree of freedom: the last channel is then solved
/// for by a scan and bisection for each grid point of the others. Larger
/// defects are not supported.
pub fn local_rate_bruteforce(model: &Model, x: &[f64], beta: &[f64], spec: &GridSpec) -> Result<BruteForceResult> {
    let geometry = fastchain::jump_geometry(model, x);
    let nc = geometry.rho.len();
    let (d, m) = (model.d(), model.m());
    let mut span = DMatrix::<f64>::zeros(d, d);
    let mut a = vec![0.0; d * m];
    for y in 0..model.n_states() {
        model.a_into(x, y, &mut a);
        let am = DMatrix::from_row_slice(d, m, &a);
        span += &am * am.transpose();
    }
    let (_, null) = linalg::psd_pinv(&span, RANK_TOL);
    let eig = nalgebra::SymmetricEigen::new(null.clone());
    let defect: Vec<DVector<f64>> = (0..d)
        .filter(|&k| eig.eigenvalues[k] > 0.5)
        .map(|k| eig.eigenvectors.column(k).into_owned())
        .collect();
    if defect.len() > 1 {
        return Err(Error::InvalidArgument(format!(
            "brute-force oracle handles at most one unreachable drift direction, found {}",
            defect.len()
        )));
    }
    if nc == 0 {
        let inner = inner_quadratic(model, x, &[1.0], beta);
        return Ok(BruteForceResult {
            value: inner.value,
            resolution: 0.0,
            theta: Vec::new(),
            evaluations: 1,
        });
    }

    let eval: Box<dyn Fn(&[f64]) -> Option<(f64, Vec<f64>)> + Sync> = match defect.first() {
        None => Box::new(|th: &[f64]| theta_cost(model, &geometry, x, beta, th).map(|v| (v, th.to_vec()))),
        Some(n) => {
            let n = n.clone();
            let geometry = &geometry;
            let radius = spec.radius;
            Box::new(move |th: &[f64]| slack_solve(model, geometry, x, beta, &n, th, radius))
        }
    };
    let free = if defect.is_empty() { nc } else { nc - 1 };
    if free == 0 {
        let best = eval(&[]);
        return Ok(BruteForceResult {
            value: best.as_ref().map_or(f64::INFINITY, |b| b.0),
            resolution: 0.0,
            theta: best.map_or(Vec::new(), |b| b.1),
            evaluations: 1,
        });
    }

    let mut per_axis = (spec.budget as f64).powf(1.0 / free as f64).floor() as usize;
    per_axis = per_axis.clamp(5, 41);
    if per_axis % 2 == 0 {
        per_axis -= 1;
    }
    let mut center = vec![0.0; free];
    let mut half = spec.radius;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut evaluations = 0;
    let mut spacing = 2.0 * half / (per_axis - 1) as f64;
    for _ in 0..spec.levels {
        spacing = 2.0 * half / (per_axis - 1) as f64;
        let total = per_axis.pow(free as u32);
        let level_best = (0..total)
            .into_par_iter()
            .filter_map(|idx| {
                let mut rem = idx;
                let th: Vec<f64> = (0..free)
                    .map(|k| {
                        let i = rem % per_axis;
                        rem /= per_axis;
                        center[k] - half + i as f64 * spacing
                    })
                    .collect();
                eval(&th)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0));
        evaluations += total;
        if let Some(lb) = level_best {
            if best.as_ref().is_none_or(|b| lb.0 < b.0) {
                center = lb.1[..free].to_vec();
                best = Some(lb);
            }
        }
        half = 2.0 * spacing;
    }
    Ok(BruteForceResult {
        value: best.as_ref().map_or(f64::INFINITY, |b| b.0),
        resolution: spacing,
        theta: best.map_or(Vec::new(), |b| b.1),
        evaluations,
    })
}

/// Solves for the last channel's tilt so that the law's drift matches `beta`
/// along the unreachable direction `n`; keeps the cheapest root.
fn slack_solve(
    model: &Model,
    geometry: &JumpGeometry,
    x: &[f64],
    beta: &[f64],
    n: &DVector<f64>,
    free: &[f64],
    radius: f64,
) -> Option<(f64, Vec<f64>)> {
    let d = model.d();
    let beta_n: f64 = (0..d).map(|k| n[k] * beta[k]).sum();
    let gap = |s: f64| -> Option<f64> {
        let th: Vec<f64> = free.iter().copied().chain(std::iter::once(s)).collect();
        let q: Vec<f64> = geometry.rho.iter().zip(&th).map(|(r, t)| r * t.exp()).collect();
        let pi = fastchain::stationary(&fastchain::controlled_generator(geometry, &q).ok()?).ok()?;
        let drift = averaging::mix_drift(model, x, &pi);
        Some((0..d).map(|k| n[k] * drift[k]).sum::<f64>() - beta_n)
    };
    // the slack channel may need a wider range than the grid
    let span = 3.0 * radius;
    let scan = 64;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut prev: Option<(f64, f64)> = None;
    for k in 0..=scan {
        let s = -span + 2.0 * span * k as f64 / scan as f64;
        let Some(g) = gap(s) else {
            prev = None;
            continue;
        };
        if let Some((sp, gp)) = prev {
            if gp == 0.0 || gp.signum() != g.signum() {
                let (mut lo, mut hi, mut glo) = (sp, s, gp);
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    let gm = gap(mid)?;
                    if gm.signum() == glo.signum() && gm != 0.0 {
                        lo = mid;
                        glo = gm;
                    } else {
                        hi = mid;
                    }
                }
                let th: Vec<f64> = free.iter().copied().chain(std::iter::once(0.5 * (lo + hi))).collect();
                if let Some(v) = theta_cost(model, geometry, x, beta, &th) {
                    if best.as_ref().is_none_or(|b| v < b.0) {
                        best = Some((v, th));
                    }
                }
            }
        }
        prev = Some((s, g));
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapResult {
    pub alpha: f64,
    /// `v = 1 + sum_(i,j) pi_i q_ij`.
    pub v: f64,
    pub q: Vec<f64>,
    /// Cost of the scaled thinning control over the whole mark space.
    pub cost: f64,
    /// Jump cost of the scaled rates alone (the control set to 1 off the
    /// acceptance intervals); never above `cost`.
    pub reduced_cost: f64,
}

/// Uniform rescaling of a thinning control. The control `q / (v rho)` on each
/// interval and `1 / v` off them is scaled by the cost-optimal `alpha`
/// (closed form from the first-order condition); `alpha = v` recovers the
/// input, so the output cost never exceeds the input jump cost.
pub fn cap_rate_control(geometry: &JumpGeometry, pi: &[f64], q: &[f64]) -> CapResult {
    let v = 1.0 + geometry
        .channels
        .iter()
        .zip(q)
        .map(|(&(i, _), &qij)| pi[i] * qij)
        .sum::<f64>();
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&(i, _), &rho), &qij) in geometry.channels.iter().zip(&geometry.rho).zip(q) {
        let rbar = qij / v;
        let theta = geometry.zeta - rho;
        let ent = if rbar > 0.0 { rbar * (rbar / rho).ln() } else { 0.0 };
        num += pi[i] * (ent + theta / v * (1.0 / v).ln());
        den += pi[i] * (rbar + theta / v);
    }
    let alpha = if den > 0.0 { (-num / den).exp() } else { v };
    let cost = scaled_cost(geometry, pi, q, v, alpha);
    let capped: Vec<f64> = q.iter().map(|qij| alpha * qij / v).collect();
    let reduced_cost = jump_cost(geometry, pi, &capped);
    CapResult {
        alpha,
        v,
        q: capped,
        cost,
        reduced_cost,
    }
}

/// `sum pi_i [rho l(alpha q / (v rho)) + (zeta - rho) l(alpha / v)]`.
pub fn scaled_cost(geometry: &JumpGeometry, pi: &[f64], q: &[f64], v: f64, alpha: f64) -> f64 {
    geometry
        .channels
        .iter()
        .zip(&geometry.rho)
        .zip(q)
        .map(|((&(i, _), &rho), &qij)| {
            pi[i] * (rho * ell_unchecked(alpha * qij / (v * rho)) + (geometry.zeta - rho) * ell_unchecked(alpha / v))
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub t_mid: f64,
    pub slope: Vec<f64>,
    pub result: LocalRateResult,
    pub cumulative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRate {
    /// `+inf` if any interval is infeasible.
    pub value: f64,
    pub slices: Vec<SliceRecord>,
    /// First interval with an unreachable velocity.
    pub infeasible_interval: Option<usize>,
}

/// `I(xi) = sum_k L(xi(t_k mid), slope_k) dt_k`.
pub fn path_rate(model: &Model, path: &Path, opts: &LocalRateOptions) -> Result<PathRate> {
    if path.dim() != model.d() {
        return Err(Error::Shape("path dimension differs from d".into()));
    }
    let results: Vec<LocalRateResult> = (0..path.intervals())
        .into_par_iter()
        .map(|k| local_rate(model, &path.midpoint(k), &path.slope(k), opts))
        .collect::<Result<_>>()?;
    let mut cumulative = 0.0;
    let mut infeasible_interval = None;
    let mut slices = Vec::with_capacity(results.len());
    for (k, result) in results.into_iter().enumerate() {
        if result.feasible {
            cumulative += result.value * path.dt(k);
        } else if infeasible_interval.is_none() {
            infeasible_interval = Some(k);
        }
        slices.push(SliceRecord {
            t_mid: 0.5 * (path.grid()[k] + path.grid()[k + 1]),
            slope: path.slope(k),
            cumulative: if infeasible_interval.is_some() { f64::INFINITY } else { cumulative },
            result,
        });
    }
    Ok(PathRate {
        value: if infeasible_interval.is_some() { f64::INFINITY } else { cumulative },
        slices,
        infeasible_interval,
    })
}

/// Midpoint-convexity gap `(L(b1) + L(b2)) / 2 - L((b1 + b2) / 2)`; negative
/// values flag non-convexity in the velocity.
pub fn convexity_gap(model: &Model, x: &[f64], b1: &[f64], b2: &[f64], opts: &LocalRateOptions) -> Result<f64> {
    let mid: Vec<f64> = b1.iter().zip(b2).map(|(p, q)| 0.5 * (p + q)).collect();
    let l1 = local_rate(model, x, b1, opts)?.value;
    let l2 = local_rate(model, x, b2, opts)?.value;
    let lm = local_rate(model, x, &mid, opts)?.value;
    Ok(0.5 * (l1 + l2) - lm)
}
