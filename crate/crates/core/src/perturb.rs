//! Perturbation of a near-optimal triple into one whose closed loop has a
//! unique solution.
//!
//! Given a path `xi` with admissible controls `(pi, q, u)`, the construction
//! mixes the law toward the stationary law, `pi_d = (1 - d) pi + d nu(xi)`,
//! rescales `u_d = u pi / pi_d` so that `pi u` is preserved, integrates the
//! new path `xi_d`, and re-expresses the mixed rates
//! `beta = ((1 - d) pi q + d nu rho(xi)) / pi_d` as thinning factors
//! `phi = beta / rho(xi_d)`, constant on each acceptance interval. With
//! `d > 0` every law is bounded away from zero and every thinning factor lies
//! in `[m2, m3]`.
//!
//! Controls are piecewise constant on the path grid and the dynamics use the
//! implicit midpoint rule, matching the midpoint quadrature of the path rate.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::{self, Path};
use crate::error::{Error, Result};
use crate::fastchain::{self, JumpGeometry};
use crate::model::{validate_model, Model, ProbeSpec};
use crate::ratefn::{self, ControlTriple, LocalRateOptions};
use crate::simulator::FeedbackControls;

/// Controls tabulated per interval of a path grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlTable {
    pub grid: Vec<f64>,
    pub slices: Vec<ControlTriple>,
}

impl ControlTable {
    pub fn new(grid: Vec<f64>, slices: Vec<ControlTriple>) -> Result<Self> {
        if slices.len() + 1 != grid.len() {
            return Err(Error::Shape(format!(
                "{} control slices for {} grid intervals",
                slices.len(),
                grid.len().saturating_sub(1)
            )));
        }
        Ok(ControlTable { grid, slices })
    }

    fn check(&self, model: &Model, path: &Path) -> Result<()> {
        if self.grid != path.grid() {
            return Err(Error::Shape("control table and path use different grids".into()));
        }
        let (l, m, nc) = (model.n_states(), model.m(), model.n_channels());
        for s in &self.slices {
            if s.pi.len() != l || s.q.len() != nc || s.u.len() != l * m {
                return Err(Error::Shape("control slice dimensions do not match the model".into()));
            }
        }
        Ok(())
    }
}

/// The triple of the averaged dynamics along `path`: `pi = nu`, `q = rho` at
/// each interval midpoint, and the least drift control closing the gap
/// between `b_hat` and the path slope (zero on an exact averaged path, of the
/// size of the discretization error on a numerical one). Requires the noise to
/// reach that gap.
pub fn zero_cost_triple(model: &Model, path: &Path) -> Result<ControlTable> {
    let slices = (0..path.intervals())
        .map(|k| {
            let x = path.midpoint(k);
            let pi = fastchain::nu(model, &x)?;
            let q = fastchain::jump_geometry(model, &x).rho;
            let inner = ratefn::inner_quadratic(model, &x, &pi, &path.slope(k));
            if !inner.feasible {
                return Err(Error::InvalidArgument(format!(
                    "interval {k}: path slope is not reachable from the averaged law"
                )));
            }
            Ok(ControlTriple { pi, q, u: inner.u })
        })
        .collect::<Result<Vec<_>>>()?;
    ControlTable::new(path.grid().to_vec(), slices)
}

/// Minimizing triples of the local rate on every interval of `path`.
pub fn optimal_triple(model: &Model, path: &Path, opts: &LocalRateOptions) -> Result<ControlTable> {
    let rate = ratefn::path_rate(model, path, opts)?;
    if let Some(k) = rate.infeasible_interval {
        return Err(Error::InvalidArgument(format!("interval {k} has an unreachable velocity")));
    }
    let slices = rate
        .slices
        .into_iter()
        .map(|s| s.result.argmin.expect("feasible slices carry a minimizer"))
        .collect();
    ControlTable::new(path.grid().to_vec(), slices)
}

/// `sum_k dt_k sum_i pi_i (|u_i|^2 / 2 + sum_j rho_ij(x_k) l(q_ij / rho_ij(x_k)))`
/// with `x_k` the interval midpoints.
pub fn triple_cost(model: &Model, path: &Path, table: &ControlTable) -> Result<f64> {
    table.check(model, path)?;
    let m = model.m();
    Ok((0..path.intervals())
        .map(|k| {
            let s = &table.slices[k];
            let g = fastchain::jump_geometry(model, &path.midpoint(k));
            let quad: f64 = (0..model.n_states())
                .map(|i| 0.5 * s.pi[i] * s.u_of(i, m).iter().map(|v| v * v).sum::<f64>())
                .sum();
            (quad + ratefn::jump_cost(&g, &s.pi, &s.q)) * path.dt(k)
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipReport {
    /// `max_k |xi(t_k) - x0 - sum_{l<k} dt_l F_l|`, `F_l` the controlled drift
    /// at the midpoint of interval `l`.
    pub dynamics_residual: f64,
    /// `max_k |pi_k Q(q_k)|_inf`.
    pub stationarity_residual: f64,
    /// `max_k |sum pi_k - 1|` and negativity, folded together.
    pub simplex_residual: f64,
}

/// Controlled drift `sum_i pi_i (b_i(x) + a_i(x) u_i)`.
pub(crate) fn controlled_drift(model: &Model, x: &[f64], pi: &[f64], u: &[f64]) -> Vec<f64> {
    let (d, m) = (model.d(), model.m());
    let mut out = vec![0.0; d];
    let mut b = vec![0.0; d];
    let mut a = vec![0.0; d * m];
    for (i, &p) in pi.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        model.b_into(x, i, &mut b);
        model.a_into(x, i, &mut a);
        let ui = &u[i * m..(i + 1) * m];
        for k in 0..d {
            let au: f64 = a[k * m..(k + 1) * m].iter().zip(ui).map(|(p, q)| p * q).sum();
            out[k] += p * (b[k] + au);
        }
    }
    out
}

pub fn verify_membership(model: &Model, path: &Path, table: &ControlTable) -> Result<MembershipReport> {
    table.check(model, path)?;
    let d = model.d();
    let mut acc = path.start().to_vec();
    let mut dynamics: f64 = 0.0;
    let mut stationarity: f64 = 0.0;
    let mut simplex: f64 = 0.0;
    for k in 0..path.intervals() {
        let s = &table.slices[k];
        let x = path.midpoint(k);
        let f = controlled_drift(model, &x, &s.pi, &s.u);
        for i in 0..d {
            acc[i] += path.dt(k) * f[i];
        }
        dynamics = dynamics.max(averaging::dist(&acc, path.point(k + 1)));
        let g = fastchain::jump_geometry(model, &x);
        stationarity = stationarity.max(s.stationarity_residual(&g)?);
        let neg = s.pi.iter().cloned().fold(0.0, |a: f64, p| a.max(-p));
        simplex = simplex.max((s.pi.iter().sum::<f64>() - 1.0).abs()).max(neg);
    }
    Ok(MembershipReport {
        dynamics_residual: dynamics,
        stationarity_residual: stationarity,
        simplex_residual: simplex,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbOptions {
    /// Rescale the input rates uniformly first (never raises the cost).
    pub cap_rates: bool,
    /// Use this mixing weight instead of the computed one; no invariant is
    /// enforced in that case.
    pub delta_override: Option<f64>,
    /// Admissibility tolerance for the input triple.
    pub membership_tol: f64,
    /// Probe samples for the Lipschitz estimates.
    pub probe_samples: usize,
    pub max_halvings: usize,
}

impl Default for PerturbOptions {
    fn default() -> Self {
        PerturbOptions {
            cap_rates: true,
            delta_override: None,
            membership_tol: 1e-6,
            probe_samples: 2000,
            max_halvings: 60,
        }
    }
}

/// Constants entering the choice of the mixing weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbConstants {
    /// Cost bound `I_input + 1`.
    pub big_m: f64,
    /// `T + sqrt(2 T M)`.
    pub a_m: f64,
    /// `sup (|b_j| + |a_j|)` along the path.
    pub m0_growth: f64,
    pub d_lip: f64,
    pub kappa2: f64,
    pub r_low: f64,
    pub nu_low: f64,
    pub zeta: f64,
    /// `2 M0 a e^{d_lip a}`.
    pub k: f64,
    pub k1: f64,
    /// `sup max(pi_i q_ij / rho_ij, pi_i)` of the (capped) input.
    pub m0: f64,
    pub m1: f64,
    /// `min(gamma / K, gamma / 4 K1, gamma nu_low / 8 M)`, at most 1.
    pub delta_formula: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbResult {
    pub xi_star: Path,
    /// `pi*`, `u*` and the rates `q* = beta` per interval.
    pub controls: ControlTable,
    /// Thinning factors `phi* = beta / rho(xi*)`, `K x |T|`.
    pub phi_star: Vec<f64>,
    pub m2: f64,
    pub m3: f64,
    pub delta_star: f64,
    pub halvings: usize,
    pub constants: PerturbConstants,
    pub cost_input: f64,
    pub cost_star: f64,
    pub sup_deviation: f64,
    pub gamma: f64,
    pub invariants_hold: bool,
}

impl PerturbResult {
    pub fn phi_at(&self, k: usize, c: usize, n_channels: usize) -> f64 {
        self.phi_star[k * n_channels + c]
    }

    /// Feedback controls for the simulator.
    pub fn feedback(&self, model: &Model) -> Result<FeedbackControls> {
        let u = self.controls.slices.iter().flat_map(|s| s.u.iter().copied()).collect();
        FeedbackControls::with_auto_bound(model, self.controls.grid.clone(), u, self.phi_star.clone())
    }
}

/// Runs the construction with the largest mixing weight (from the computed
/// one, halving as needed) for which all output invariants verify.
pub fn perturb_triple(
    model: &Model,
    xi: &Path,
    table: &ControlTable,
    gamma: f64,
    opts: &PerturbOptions,
) -> Result<PerturbResult> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    let report = verify_membership(model, xi, table)?;
    if report.dynamics_residual > opts.membership_tol
        || report.stationarity_residual > opts.membership_tol
        || report.simplex_residual > opts.membership_tol
    {
        return Err(Error::InvalidArgument(format!(
            "input triple is not admissible: residuals {report:?}"
        )));
    }
    let cost_input = triple_cost(model, xi, table)?;

    let mids: Vec<Vec<f64>> = (0..xi.intervals()).map(|k| xi.midpoint(k)).collect();
    let geoms: Vec<JumpGeometry> = mids.iter().map(|x| fastchain::jump_geometry(model, x)).collect();
    let nus: Vec<Vec<f64>> = mids.iter().map(|x| fastchain::nu(model, x)).collect::<Result<_>>()?;

    let mut slices = table.slices.clone();
    if opts.cap_rates {
        for (s, g) in slices.iter_mut().zip(&geoms) {
            s.q = ratefn::cap_rate_control(g, &s.pi, &s.q).q;
        }
    }
    let capped = ControlTable::new(table.grid.clone(), slices)?;
    let constants = estimate_constants(model, xi, &capped, &geoms, &nus, cost_input, gamma, opts)?;

    if let Some(delta) = opts.delta_override {
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::InvalidArgument(format!("delta must lie in [0, 1], got {delta}")));
        }
        let mut out = construct(model, xi, &capped, &geoms, &nus, delta, gamma, cost_input, constants)?;
        out.invariants_hold = out.check(model);
        return Ok(out);
    }

    let mut delta = constants.delta_formula;
    for halvings in 0..=opts.max_halvings {
        let mut out = construct(model, xi, &capped, &geoms, &nus, delta, gamma, cost_input, constants.clone())?;
        out.halvings = halvings;
        if out.check(model) {
            out.invariants_hold = true;
            return Ok(out);
        }
        delta *= 0.5;
    }
    Err(Error::Numerical(format!(
        "no mixing weight down to {delta:e} satisfied the output invariants"
    )))
}

#[allow(clippy::too_many_arguments)]
fn estimate_constants(
    model: &Model,
    xi: &Path,
    capped: &ControlTable,
    geoms: &[JumpGeometry],
    nus: &[Vec<f64>],
    cost_input: f64,
    gamma: f64,
    opts: &PerturbOptions,
) -> Result<PerturbConstants> {
    let t_end = xi.t_end() - xi.grid()[0];
    let l = model.n_states();
    let big_m = cost_input + 1.0;
    let a_m = t_end + (2.0 * t_end * big_m).sqrt();

    let (d, m) = (model.d(), model.m());
    let mut b = vec![0.0; d];
    let mut a = vec![0.0; d * m];
    let mut m0_growth: f64 = 0.0;
    for k in 0..xi.grid().len() {
        for y in 0..l {
            model.b_into(xi.point(k), y, &mut b);
            model.a_into(xi.point(k), y, &mut a);
            m0_growth = m0_growth.max(crate::model::norm(&b) + crate::model::norm(&a));
        }
    }

    let probe = ProbeSpec::around((0..xi.grid().len()).map(|k| xi.point(k)), gamma, opts.probe_samples);
    let bounds = validate_model(model, &probe).bounds;
    let r_low = bounds.r_low();
    let zeta = model.zeta();
    let nu_low = nus
        .iter()
        .flat_map(|v| v.iter().copied())
        .fold(f64::INFINITY, f64::min)
        .min(bounds.nu_low.max(f64::MIN_POSITIVE));

    let k = 2.0 * m0_growth * a_m * (bounds.d_lip * a_m).exp();
    let e = std::f64::consts::E;
    let k1 = k * bounds.kappa2 * (t_end * l as f64 + (l as f64 * zeta * t_end * (1.0 + e) + e * big_m) / r_low);

    let mut m0: f64 = 0.0;
    for (s, g) in capped.slices.iter().zip(geoms) {
        for (c, &(i, _)) in g.channels.iter().enumerate() {
            m0 = m0.max(s.pi[i] * s.q[c] / g.rho[c]);
        }
        m0 = m0.max(s.pi.iter().cloned().fold(0.0, f64::max));
    }

    let candidates = [gamma / k, gamma / (4.0 * k1), gamma * nu_low / (8.0 * big_m)];
    let delta_formula = candidates
        .iter()
        .copied()
        .filter(|v| v.is_finite() && *v > 0.0)
        .fold(1.0, f64::min);
    if !delta_formula.is_finite() || delta_formula <= 0.0 {
        return Err(Error::Numerical("mixing weight is not a positive finite number".into()));
    }
    Ok(PerturbConstants {
        big_m,
        a_m,
        m0_growth,
        d_lip: bounds.d_lip,
        kappa2: bounds.kappa2,
        r_low,
        nu_low,
        zeta,
        k,
        k1,
        m0,
        m1: m0 + 1.0,
        delta_formula,
    })
}

#[allow(clippy::too_many_arguments)]
fn construct(
    model: &Model,
    xi: &Path,
    capped: &ControlTable,
    geoms: &[JumpGeometry],
    nus: &[Vec<f64>],
    delta: f64,
    gamma: f64,
    cost_input: f64,
    constants: PerturbConstants,
) -> Result<PerturbResult> {
    let (l, m) = (model.n_states(), model.m());
    let n_int = xi.intervals();

    let mixed: Vec<(Vec<f64>, Vec<f64>)> = (0..n_int)
        .map(|k| {
            let s = &capped.slices[k];
            let pi_d: Vec<f64> = (0..l).map(|i| (1.0 - delta) * s.pi[i] + delta * nus[k][i]).collect();
            let mut u_d = s.u.clone();
            for i in 0..l {
                if pi_d[i] > 0.0 && s.pi[i] != pi_d[i] {
                    let f = s.pi[i] / pi_d[i];
                    for v in &mut u_d[i * m..(i + 1) * m] {
                        *v *= f;
                    }
                }
            }
            (pi_d, u_d)
        })
        .collect();

    let xi_star = integrate_midpoint(model, xi.start(), xi.grid(), |k, x| {
        controlled_drift(model, x, &mixed[k].0, &mixed[k].1)
    })?;

    let nc = model.n_channels();
    let mut phi_star = Vec::with_capacity(n_int * nc);
    let mut slices = Vec::with_capacity(n_int);
    for k in 0..n_int {
        let s = &capped.slices[k];
        let (pi_d, u_d) = &mixed[k];
        let g = &geoms[k];
        let g_star = fastchain::jump_geometry(model, &xi_star.midpoint(k));
        let mut beta = vec![0.0; nc];
        for (c, &(i, _)) in g.channels.iter().enumerate() {
            beta[c] = if pi_d[i] > 0.0 {
                (1.0 - delta) * s.pi[i] / pi_d[i] * s.q[c] + delta * nus[k][i] * g.rho[c] / pi_d[i]
            } else {
                s.q[c]
            };
            phi_star.push(beta[c] / g_star.rho[c]);
        }
        slices.push(ControlTriple {
            pi: pi_d.clone(),
            q: beta,
            u: u_d.clone(),
        });
    }
    let controls = ControlTable::new(xi.grid().to_vec(), slices)?;
    let cost_star = triple_cost(model, &xi_star, &controls)?;
    let sup_deviation = xi.sup_distance(&xi_star)?;
    let m3 = (constants.m1 * constants.zeta / (delta * constants.r_low * constants.nu_low)).max(1.0);
    let m2 = (delta * constants.nu_low * constants.r_low / constants.zeta).min(1.0);
    Ok(PerturbResult {
        xi_star,
        controls,
        phi_star,
        m2,
        m3,
        delta_star: delta,
        halvings: 0,
        constants,
        cost_input,
        cost_star,
        sup_deviation,
        gamma,
        invariants_hold: false,
    })
}

impl PerturbResult {
    fn check(&self, _model: &Model) -> bool {
        let phi_ok = self.phi_star.iter().all(|&p| p >= self.m2 && p <= self.m3);
        self.m2 > 0.0
            && phi_ok
            && self.sup_deviation < self.gamma
            && self.cost_star <= self.cost_input + self.gamma
    }
}

/// Implicit midpoint on `grid`: `x_{k+1} = x_k + dt F_k((x_k + x_{k+1}) / 2)`,
/// solved by fixed-point iteration from an explicit predictor.
pub(crate) fn integrate_midpoint(
    model: &Model,
    x0: &[f64],
    grid: &[f64],
    f: impl Fn(usize, &[f64]) -> Vec<f64>,
) -> Result<Path> {
    integrate_midpoint_from(model, x0, grid, &f, |_, x, _| x.to_vec())
}

fn integrate_midpoint_from(
    model: &Model,
    x0: &[f64],
    grid: &[f64],
    f: &impl Fn(usize, &[f64]) -> Vec<f64>,
    guess: impl Fn(usize, &[f64], &[f64]) -> Vec<f64>,
) -> Result<Path> {
    let d = model.d();
    let mut values = Vec::with_capacity(grid.len() * d);
    values.extend_from_slice(x0);
    let mut x = x0.to_vec();
    for k in 0..grid.len() - 1 {
        let dt = grid[k + 1] - grid[k];
        let fx = f(k, &x);
        let predictor: Vec<f64> = x.iter().zip(&fx).map(|(a, b)| a + dt * b).collect();
        let mut next = guess(k, &predictor, &x);
        let mut converged = false;
        for _ in 0..200 {
            let mid: Vec<f64> = x.iter().zip(&next).map(|(a, b)| 0.5 * (a + b)).collect();
            let fm = f(k, &mid);
            let upd: Vec<f64> = x.iter().zip(&fm).map(|(a, b)| a + dt * b).collect();
            let change = averaging::dist(&upd, &next);
            next = upd;
            let scale = 1.0 + next.iter().map(|v| v.abs()).fold(0.0, f64::max);
            if change <= 1e-15 * scale {
                converged = true;
                break;
            }
        }
        if !converged || next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("implicit midpoint step {k} did not converge")));
        }
        x = next;
        values.extend_from_slice(&x);
    }
    Path::from_flat(d, grid.to_vec(), values)
}

/// Stationary law of the perturbed controls at interval `k` and slow state
/// `x`. The thinning factor acts on `[0, rho_ij(xi*)]` and is 1 beyond, so
/// the rate at `x` is `phi min(rho(x), rho(xi*)) + (rho(x) - rho(xi*))^+`.
pub fn stationary_map_rho(model: &Model, result: &PerturbResult, k: usize, x: &[f64]) -> Result<Vec<f64>> {
    if k >= result.controls.slices.len() {
        return Err(Error::InvalidArgument(format!("interval {k} out of range")));
    }
    let nc = model.n_channels();
    let anchor = fastchain::jump_geometry(model, &result.xi_star.midpoint(k));
    let here = fastchain::jump_geometry(model, x);
    let rates: Vec<f64> = (0..nc)
        .map(|c| {
            let phi = result.phi_at(k, c, nc);
            let (r, r0) = (here.rho[c], anchor.rho[c]);
            phi * r.min(r0) + (r - r0).max(0.0)
        })
        .collect();
    let gen = fastchain::controlled_generator(&here, &rates)?;
    if result.m2 <= 0.0 {
        return fastchain::stationary(&gen);
    }
    let pi = fastchain::stationary(&gen).expect("positive thinning keeps the chain irreducible");
    Ok(pi)
}

/// Number of spanning in-trees of the transition graph, summed over roots.
pub fn spanning_tree_count(model: &Model) -> f64 {
    let l = model.n_states();
    if l == 1 {
        return 1.0;
    }
    let mut lap = DMatrix::<f64>::zeros(l, l);
    for &(i, j) in model.channels() {
        lap[(i, i)] += 1.0;
        lap[(i, j)] -= 1.0;
    }
    (0..l)
        .map(|root| {
            let keep: Vec<usize> = (0..l).filter(|&v| v != root).collect();
            let sub = DMatrix::from_fn(l - 1, l - 1, |a, b| lap[(keep[a], keep[b])]);
            sub.determinant().round()
        })
        .sum()
}

/// Lower bound `c1^{-1}` on every entry of the stationary map, from the
/// matrix-tree theorem: with all rates in `[lo, hi]`, each law entry is at
/// least `(lo / hi)^(L-1) / N`, `N` the total number of rooted spanning trees.
pub fn stationary_floor(model: &Model, result: &PerturbResult) -> f64 {
    let lo = result.m2.min(1.0) * result.constants.r_low;
    let hi = result.m3.max(1.0) * model.zeta();
    (lo / hi).powi(model.n_states() as i32 - 1) / spanning_tree_count(model)
}

/// Largest sampled difference quotient of the stationary map at interval `k`
/// over `samples` points in the ball of radius `radius` around `xi*` there.
pub fn stationary_map_lipschitz(model: &Model, result: &PerturbResult, k: usize, radius: f64, samples: usize) -> Result<f64> {
    let center = result.xi_star.midpoint(k);
    let probe = ProbeSpec {
        lo: center.iter().map(|c| c - radius).collect(),
        hi: center.iter().map(|c| c + radius).collect(),
        samples,
        seed: 0x1ee7,
    };
    let pts = probe.points();
    let laws: Vec<Vec<f64>> = pts
        .iter()
        .map(|p| stationary_map_rho(model, result, k, p))
        .collect::<Result<_>>()?;
    let mut best: f64 = 0.0;
    for i in 0..pts.len() {
        for j in 0..i {
            let dx = averaging::dist(&pts[i], &pts[j]);
            if dx > 0.0 {
                best = best.max(averaging::dist(&laws[i], &laws[j]) / dx);
            }
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    /// Max deviation from `xi*` of the discrete closed loop solved from
    /// several initial guesses.
    pub discrete_max_dev: f64,
    /// Sup distance between the RK4 and Heun closed-loop solutions.
    pub integrator_gap: f64,
    /// Sup distance between the RK4 closed loop and `xi*` on the grid.
    pub continuous_vs_star: f64,
    pub substeps: usize,
    /// Closed-loop Lipschitz estimate used in the stability bound.
    pub lambda: f64,
    pub shift: f64,
    pub shifted_terminal_gap: f64,
    pub stability_bound: f64,
    pub tolerances: UniquenessTolerances,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniquenessTolerances {
    pub discrete: f64,
    pub integrators: f64,
    pub continuous: f64,
}

impl Default for UniquenessTolerances {
    fn default() -> Self {
        UniquenessTolerances {
            discrete: 1e-9,
            integrators: 1e-6,
            continuous: 1e-3,
        }
    }
}

/// Re-solves the closed loop `x' = sum_i rho_i(s, x) (b_i(x) + a_i(x) u*_i(s))`
/// from `xi*(0)`: as the implicit midpoint scheme from perturbed initial
/// guesses, and as a continuous ODE with RK4 and Heun on fine substeps. A
/// shifted start checks the stability bound `e^{Lambda T}` with a sampled
/// Lipschitz constant.
pub fn uniqueness_check(model: &Model, result: &PerturbResult, tol: UniquenessTolerances) -> Result<UniquenessReport> {
    let grid = result.controls.grid.clone();
    let m = model.m();
    let l = model.n_states();
    let rhs = |k: usize, x: &[f64]| -> Result<Vec<f64>> {
        let law = stationary_map_rho(model, result, k, x)?;
        let u = &result.controls.slices[k].u;
        debug_assert_eq!(u.len(), l * m);
        Ok(controlled_drift(model, x, &law, u))
    };
    let rhs_unwrap = |k: usize, x: &[f64]| rhs(k, x).expect("closed-loop law");

    // discrete closed loop from perturbed guesses
    let x0 = result.xi_star.start().to_vec();
    let offsets = [0.0, 1e-2, -1e-2, 5e-2];
    let discrete_max_dev = offsets
        .par_iter()
        .map(|&off| {
            let sol = integrate_midpoint_from(model, &x0, &grid, &rhs_unwrap, |_, pred, _| {
                pred.iter().map(|v| v + off).collect()
            })?;
            sol.sup_distance(&result.xi_star)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);

    let substeps = 64;
    let rk4 = integrate_continuous(&grid, &x0, substeps, &rhs, Scheme::Rk4)?;
    let heun = integrate_continuous(&grid, &x0, substeps, &rhs, Scheme::Heun)?;
    let integrator_gap = rk4.sup_distance(&heun)?;
    let continuous_vs_star = rk4.sup_distance(&result.xi_star)?;

    // stability under a shifted start
    let shift = 1e-3;
    let mut x_shift = x0.clone();
    x_shift[0] += shift;
    let shifted = integrate_continuous(&grid, &x_shift, substeps, &rhs, Scheme::Rk4)?;
    let shifted_terminal_gap = averaging::dist(shifted.end(), rk4.end());
    let lambda = closed_loop_lipschitz(model, result, &rhs)?;
    let t_span = grid[grid.len() - 1] - grid[0];
    let stability_bound = (lambda * t_span).exp() * shift;

    let passed = discrete_max_dev <= tol.discrete
        && integrator_gap <= tol.integrators
        && continuous_vs_star <= tol.continuous
        && shifted_terminal_gap <= stability_bound * (1.0 + 1e-9);
    Ok(UniquenessReport {
        discrete_max_dev,
        integrator_gap,
        continuous_vs_star,
        substeps,
        lambda,
        shift,
        shifted_terminal_gap,
        stability_bound,
        tolerances: tol,
        passed,
    })
}

#[derive(Clone, Copy)]
enum Scheme {
    Rk4,
    Heun,
}

fn integrate_continuous(
    grid: &[f64],
    x0: &[f64],
    substeps: usize,
    rhs: &impl Fn(usize, &[f64]) -> Result<Vec<f64>>,
    scheme: Scheme,
) -> Result<Path> {
    let d = x0.len();
    let mut x = x0.to_vec();
    let mut values = Vec::with_capacity(grid.len() * d);
    values.extend_from_slice(&x);
    for k in 0..grid.len() - 1 {
        let h = (grid[k + 1] - grid[k]) / substeps as f64;
        for _ in 0..substeps {
            x = match scheme {
                Scheme::Rk4 => averaging::rk4_step(|p| rhs(k, p), &x, h)?,
                Scheme::Heun => {
                    let k1 = rhs(k, &x)?;
                    let pred: Vec<f64> = x.iter().zip(&k1).map(|(a, b)| a + h * b).collect();
                    let k2 = rhs(k, &pred)?;
                    (0..d).map(|i| x[i] + 0.5 * h * (k1[i] + k2[i])).collect()
                }
            };
        }
        values.extend_from_slice(&x);
    }
    Path::from_flat(d, grid.to_vec(), values)
}

/// Sampled Lipschitz constant in `x` of the closed-loop drift near `xi*`.
fn closed_loop_lipschitz(
    model: &Model,
    result: &PerturbResult,
    rhs: &impl Fn(usize, &[f64]) -> Result<Vec<f64>>,
) -> Result<f64> {
    let d = model.d();
    let mut best: f64 = 0.0;
    let radius = 0.05;
    for k in 0..result.controls.slices.len() {
        let c = result.xi_star.midpoint(k);
        let fc = rhs(k, &c)?;
        for dir in 0..d {
            for s in [-1.0, -0.3, 0.3, 1.0] {
                let mut p = c.clone();
                p[dir] += s * radius;
                let fp = rhs(k, &p)?;
                best = best.max(averaging::dist(&fp, &fc) / (s * radius).abs());
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use approx::assert_abs_diff_eq;

    fn averaged_setup() -> (Model, Path, ControlTable) {
        let model = fixtures::reference_two_state();
        let path = averaging::solve_averaged_ode(&model, &[0.5], 1.0, 0.02).unwrap();
        let table = zero_cost_triple(&model, &path).unwrap();
        (model, path, table)
    }

    #[test]
    fn zero_cost_triple_is_admissible_and_free() {
        let (model, path, table) = averaged_setup();
        let r = verify_membership(&model, &path, &table).unwrap();
        assert!(r.dynamics_residual < 1e-12, "{r:?}");
        assert!(r.stationarity_residual < 1e-12, "{r:?}");
        // the drift control only absorbs the chord-vs-midpoint gap, O(h^2),
        // so the cost is O(h^4)
        let cost = triple_cost(&model, &path, &table).unwrap();
        assert!(cost < 1e-8, "{cost:e}");
        let fine = averaging::solve_averaged_ode(&model, &[0.5], 1.0, 0.01).unwrap();
        let fine_cost = triple_cost(&model, &fine, &zero_cost_triple(&model, &fine).unwrap()).unwrap();
        let ratio = cost / fine_cost;
        assert!((12.0..20.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn corrupted_law_is_detected() {
        let (model, path, mut table) = averaged_setup();
        let s = &mut table.slices[10];
        s.pi[0] += 0.1;
        let total: f64 = s.pi.iter().sum();
        s.pi.iter_mut().for_each(|p| *p /= total);
        let r = verify_membership(&model, &path, &table).unwrap();
        assert!(r.stationarity_residual > 1e-3, "{r:?}");
    }

    #[test]
    fn zero_weight_is_identity() {
        let (model, path, table) = averaged_setup();
        let opts = PerturbOptions {
            cap_rates: false,
            delta_override: Some(0.0),
            ..PerturbOptions::default()
        };
        let out = perturb_triple(&model, &path, &table, 0.1, &opts).unwrap();
        assert!(out.xi_star.sup_distance(&path).unwrap() < 1e-12);
        assert_eq!(out.controls.slices, table.slices);
        for k in 0..path.intervals() {
            let g = fastchain::jump_geometry(&model, &path.midpoint(k));
            for c in 0..2 {
                assert_abs_diff_eq!(out.phi_at(k, c, 2), table.slices[k].q[c] / g.rho[c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mixing_toward_uniform_law() {
        // pi = (1, 0), nu = (1/2, 1/2), delta = 0.2 gives (0.9, 0.1)
        let model = fixtures::degenerate_two_state();
        let path = Path::straight_line(&[0.0], &[1.0], 1.0, 4).unwrap();
        let slices = (0..4)
            .map(|_| ControlTriple {
                pi: vec![1.0, 0.0],
                q: vec![0.0, 1.0],
                u: vec![0.0, 0.0],
            })
            .collect();
        let table = ControlTable::new(path.grid().to_vec(), slices).unwrap();
        let opts = PerturbOptions {
            cap_rates: false,
            delta_override: Some(0.2),
            ..PerturbOptions::default()
        };
        let out = perturb_triple(&model, &path, &table, 0.5, &opts).unwrap();
        assert_abs_diff_eq!(out.controls.slices[0].pi[0], 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(out.controls.slices[0].pi[1], 0.1, epsilon = 1e-15);
        // the slope drops to 0.9 - 0.1
        assert_abs_diff_eq!(out.xi_star.end()[0], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn perturbation_of_averaged_triple_meets_bounds() {
        let (model, path, table) = averaged_setup();
        let out = perturb_triple(&model, &path, &table, 0.1, &PerturbOptions::default()).unwrap();
        assert!(out.invariants_hold);
        assert!(out.cost_star <= 0.1 + out.cost_input);
        // deviation bound from the construction constant K
        assert!(out.sup_deviation <= out.constants.k * out.delta_star, "{} vs {}", out.sup_deviation, out.constants.k * out.delta_star);
        let r = verify_membership(&model, &out.xi_star, &out.controls).unwrap();
        assert!(r.stationarity_residual < 1e-10 && r.dynamics_residual < 1e-8, "{r:?}");
    }

    #[test]
    fn rescaling_preserves_weighted_drift_control() {
        let (model, path, table) = averaged_setup();
        let out = perturb_triple(&model, &path, &table, 0.1, &PerturbOptions::default()).unwrap();
        for (a, b) in out.controls.slices.iter().zip(&table.slices) {
            for i in 0..2 {
                assert_abs_diff_eq!(a.pi[i] * a.u[i], b.pi[i] * b.u[i], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn stationary_map_along_path_is_mixed_law() {
        let (model, path, table) = averaged_setup();
        let out = perturb_triple(&model, &path, &table, 0.1, &PerturbOptions::default()).unwrap();
        let floor = stationary_floor(&model, &out);
        for k in [0, 17, 49] {
            let law = stationary_map_rho(&model, &out, k, &out.xi_star.midpoint(k)).unwrap();
            for i in 0..2 {
                assert_abs_diff_eq!(law[i], out.controls.slices[k].pi[i], epsilon = 1e-12);
                assert!(law[i] >= floor);
            }
            // two-state balance
            let x = [out.xi_star.midpoint(k)[0] + 0.3];
            let law = stationary_map_rho(&model, &out, k, &x).unwrap();
            let g = fastchain::jump_geometry(&model, &x);
            let a = fastchain::jump_geometry(&model, &out.xi_star.midpoint(k));
            let rate = |c: usize| out.phi_at(k, c, 2) * g.rho[c].min(a.rho[c]) + (g.rho[c] - a.rho[c]).max(0.0);
            assert_abs_diff_eq!(law[0], rate(1) / (rate(0) + rate(1)), epsilon = 1e-12);
        }
    }

    #[test]
    fn stationary_map_lipschitz_bound_holds_on_fresh_pairs() {
        let (model, path, table) = averaged_setup();
        let out = perturb_triple(&model, &path, &table, 0.1, &PerturbOptions::default()).unwrap();
        let c1 = stationary_map_lipschitz(&model, &out, 20, 0.2, 200).unwrap();
        let x = out.xi_star.midpoint(20)[0];
        for (p, q) in [(x - 0.1, x + 0.05), (x + 0.15, x + 0.151), (x - 0.19, x - 0.18)] {
            let a = stationary_map_rho(&model, &out, 20, &[p]).unwrap();
            let b = stationary_map_rho(&model, &out, 20, &[q]).unwrap();
            assert!(averaging::dist(&a, &b) <= 1.05 * c1 * (p - q).abs());
        }
    }

    #[test]
    fn tree_counts() {
        assert_eq!(spanning_tree_count(&fixtures::two_state_constant()), 2.0);
        // complete digraph on 3 vertices: 3 in-trees per root
        assert_eq!(spanning_tree_count(&fixtures::three_state_complete([1.0, 1.0, 1.0])), 9.0);
        assert_eq!(spanning_tree_count(&fixtures::three_state_cycle()), 3.0);
    }

    #[test]
    fn closed_loop_is_unique() {
        let (model, path, table) = averaged_setup();
        let out = perturb_triple(&model, &path, &table, 0.1, &PerturbOptions::default()).unwrap();
        let rep = uniqueness_check(&model, &out, UniquenessTolerances::default()).unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}
