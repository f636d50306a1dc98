//! Rare-event Monte Carlo against the variational side of the large
//! deviation principle.
//!
//! [`eps_sweep`] estimates `-eps log P(X^eps(T) in A)` for decreasing `eps`
//! and fits the slope of `-log p` against `1/eps`; [`ldp_compare`] computes
//! `I* = inf { I(xi) : xi(0) = x0, xi(T) in A }` over piecewise-linear paths.
//! [`tilted_convergence`] drives the prelimit process with feedback controls
//! and measures how closely it follows the target path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::{self, Path};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{self, BfgsOptions, NelderMeadOptions};
use crate::perturb::PerturbResult;
use crate::ratefn::{self, LocalRateOptions};
use crate::simulator::{self, FeedbackControls, SimSpec};

/// A set of terminal values `X(T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EventSpec {
    /// `|x - center| <= radius`; an infinite radius is the whole space.
    TerminalBall { center: Vec<f64>, radius: f64 },
    /// `normal . x >= threshold`.
    TerminalHalfspace { normal: Vec<f64>, threshold: f64 },
}

impl EventSpec {
    pub fn ball(center: Vec<f64>, radius: f64) -> Self {
        EventSpec::TerminalBall { center, radius }
    }

    pub fn halfspace(normal: Vec<f64>, threshold: f64) -> Self {
        EventSpec::TerminalHalfspace { normal, threshold }
    }

    pub fn dim(&self) -> usize {
        match self {
            EventSpec::TerminalBall { center, .. } => center.len(),
            EventSpec::TerminalHalfspace { normal, .. } => normal.len(),
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.dim() != d {
            return Err(Error::Shape(format!("event has dimension {}, model has {d}", self.dim())));
        }
        match self {
            EventSpec::TerminalBall { center, radius } => {
                if !(*radius > 0.0) || center.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument("ball radius must be positive".into()));
                }
            }
            EventSpec::TerminalHalfspace { normal, threshold } => {
                if !threshold.is_finite() || normal.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("halfspace parameters".into()));
                }
                if normal.iter().all(|v| *v == 0.0) {
                    return Err(Error::InvalidArgument("halfspace normal must be nonzero".into()));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            EventSpec::TerminalBall { center, radius } => averaging::dist(x, center) <= *radius,
            EventSpec::TerminalHalfspace { normal, threshold } => dot(normal, x) >= *threshold,
        }
    }

    /// Nearest point of the (closed) event.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        if self.contains(x) {
            return x.to_vec();
        }
        match self {
            EventSpec::TerminalBall { center, radius } => {
                let r = averaging::dist(x, center);
                center.iter().zip(x).map(|(c, v)| c + (v - c) * radius / r).collect()
            }
            EventSpec::TerminalHalfspace { normal, threshold } => {
                let t = (threshold - dot(normal, x)) / dot(normal, normal);
                x.iter().zip(normal).map(|(v, n)| v + t * n).collect()
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// One Monte Carlo estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub epsilon: f64,
    pub n: u64,
    pub hits: u64,
    pub p_hat: f64,
    pub stderr: f64,
    /// `-eps log p_hat`; `None` when no trajectory hit the event.
    pub neg_eps_log_p: Option<f64>,
    pub censored: bool,
}

/// Fraction of `n` trajectories (streams `(seed, 1..=n)`) ending in `event`.
pub fn mc_rare_event(model: &Model, spec: &SimSpec, event: &EventSpec, n: u64, seed: u64) -> Result<McEstimate> {
    if n < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 trajectories, got {n}")));
    }
    event.validate(model.d())?;
    let hits = simulator::batch_map(n, seed, |stream| {
        let traj = simulator::simulate(model, spec, stream)?;
        Ok(event.contains(traj.path.end()) as u64)
    })?
    .into_iter()
    .sum::<u64>();
    let p_hat = hits as f64 / n as f64;
    let censored = hits == 0;
    Ok(McEstimate {
        epsilon: spec.eps,
        n,
        hits,
        p_hat,
        stderr: (p_hat * (1.0 - p_hat) / n as f64).sqrt(),
        neg_eps_log_p: (!censored).then(|| -spec.eps * p_hat.ln()),
        censored,
    })
}

/// Least-squares line `-log p = slope / eps + intercept`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Uncensored rows used.
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<McEstimate>,
    /// `None` with fewer than two uncensored rows.
    pub fit: Option<SlopeFit>,
}

/// One [`mc_rare_event`] per `eps` (strictly decreasing), with `n_list[k]`
/// trajectories at `eps_list[k]`. Every row uses the same seed.
pub fn eps_sweep(
    model: &Model,
    base: &SimSpec,
    event: &EventSpec,
    eps_list: &[f64],
    n_list: &[u64],
    seed: u64,
) -> Result<SweepResult> {
    if eps_list.is_empty() || eps_list.len() != n_list.len() {
        return Err(Error::InvalidArgument("eps_list and n_list must be nonempty and of equal length".into()));
    }
    if eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument("eps_list must be strictly decreasing".into()));
    }
    let rows = eps_list
        .iter()
        .zip(n_list)
        .map(|(&eps, &n)| {
            let spec = SimSpec { eps, ..base.clone() };
            mc_rare_event(model, &spec, event, n, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let fit = fit_slope(&rows);
    Ok(SweepResult { rows, fit })
}

pub fn fit_slope(rows: &[McEstimate]) -> Option<SlopeFit> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| !r.censored)
        .map(|r| (1.0 / r.epsilon, -r.p_hat.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    Some(SlopeFit {
        slope,
        intercept: my - slope * mx,
        points: pts.len(),
    })
}

/// Settings of the path transcription in [`ldp_compare`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    /// Interior nodes of the piecewise-linear path.
    pub k_nodes: usize,
    /// Quadrature intervals per segment. With 1 the rate is the midpoint
    /// collocation of the node sequence, the same discretization `path_rate`
    /// applies to any tabulated path.
    pub substeps: usize,
    /// Random starts besides the two deterministic ones.
    pub random_starts: usize,
    pub seed: u64,
    /// Repeat with twice the nodes, warm-started.
    pub refine: bool,
    pub local: LocalRateOptions,
    pub max_evals: usize,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            k_nodes: 8,
            substeps: 1,
            random_starts: 2,
            seed: 0,
            refine: true,
            local: LocalRateOptions {
                multistart: 2,
                ..LocalRateOptions::default()
            },
            max_evals: 3000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareDiagnostics {
    pub k_nodes: usize,
    pub starts: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Best value with `2 k_nodes` nodes.
    pub refined_i_star: Option<f64>,
    /// `(I* - refined) / I*`.
    pub refinement_gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    #[serde(rename = "I_star")]
    pub i_star: f64,
    pub slope_fit: Option<f64>,
    /// `|slope - I*| / I*`.
    pub relative_gap: Option<f64>,
    pub path: Path,
    pub diagnostics: CompareDiagnostics,
}

struct Transcription<'a> {
    model: &'a Model,
    x0: &'a [f64],
    t_end: f64,
    event: &'a EventSpec,
    k_nodes: usize,
    substeps: usize,
    local: LocalRateOptions,
}

impl Transcription<'_> {
    /// Decision vector: interior nodes then a free endpoint projected onto the
    /// event.
    fn path(&self, z: &[f64]) -> Result<Path> {
        let d = self.model.d();
        let segments = self.k_nodes + 1;
        let mut nodes: Vec<Vec<f64>> = Vec::with_capacity(segments + 1);
        nodes.push(self.x0.to_vec());
        for k in 0..self.k_nodes {
            nodes.push(z[k * d..(k + 1) * d].to_vec());
        }
        nodes.push(self.event.project(&z[self.k_nodes * d..]));
        let n = segments * self.substeps;
        let grid = averaging::uniform_grid(self.t_end, n);
        let values = (0..=n)
            .map(|i| {
                let (s, r) = (i / self.substeps, i % self.substeps);
                if s == segments {
                    return nodes[segments].clone();
                }
                let w = r as f64 / self.substeps as f64;
                nodes[s].iter().zip(&nodes[s + 1]).map(|(a, b)| a + w * (b - a)).collect()
            })
            .collect();
        Path::new(grid, values)
    }

    fn cost(&self, z: &[f64]) -> Option<f64> {
        if z.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let path = self.path(z).ok()?;
        let value = ratefn::path_rate(self.model, &path, &self.local).ok()?.value;
        value.is_finite().then_some(value)
    }

    /// Samples `path` at this transcription's node times.
    fn encode(&self, path: &Path, endpoint: &[f64]) -> Vec<f64> {
        let segments = self.k_nodes + 1;
        let mut z = Vec::with_capacity((self.k_nodes + 1) * self.model.d());
        for k in 1..=self.k_nodes {
            z.extend(path.at(self.t_end * k as f64 / segments as f64));
        }
        z.extend_from_slice(endpoint);
        z
    }

    fn minimize(&self, starts: &[Vec<f64>], max_evals: usize) -> Option<(Vec<f64>, f64, usize, bool)> {
        let nm = NelderMeadOptions {
            max_evals,
            f_tol: 1e-13,
            initial_step: 0.05,
        };
        let polish = BfgsOptions {
            max_iter: 100,
            grad_tol: 1e-8,
            f_tol: 1e-14,
            fd_step: 1e-6,
        };
        let runs: Vec<(Vec<f64>, f64, usize, bool)> = starts
            .par_iter()
            .filter_map(|z0| {
                let f = |z: &[f64]| self.cost(z);
                f(z0)?;
                let coarse = optim::nelder_mead(f, z0, nm)?;
                let fine = optim::bfgs(f, &coarse.x, polish)?;
                let evals = coarse.iterations + fine.iterations;
                let best = if fine.value <= coarse.value { fine } else { coarse };
                Some((best.x, best.value, evals, best.converged))
            })
            .collect();
        let evaluations = runs.iter().map(|r| r.2).sum();
        runs.into_iter()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(x, v, _, c)| (x, v, evaluations, c))
    }
}

/// `I*` by direct transcription: the path is piecewise linear through
/// `k_nodes` interior nodes at uniform times, its endpoint is projected onto
/// the event, and the node values are searched with Nelder-Mead followed by a
/// BFGS polish from several starts (the averaged path, the straight line to
/// the nearest event point, and random bends of it).
pub fn ldp_compare(
    model: &Model,
    x0: &[f64],
    t_end: f64,
    event: &EventSpec,
    sweep: Option<&SweepResult>,
    opts: &CompareOptions,
) -> Result<CompareReport> {
    event.validate(model.d())?;
    if x0.len() != model.d() {
        return Err(Error::Shape("x0 dimension differs from d".into()));
    }
    if opts.k_nodes == 0 || opts.substeps == 0 {
        return Err(Error::InvalidArgument("k_nodes and substeps must be positive".into()));
    }
    let d = model.d();
    let averaged = averaging::solve_averaged_ode(model, x0, t_end, t_end / 200.0)?;
    let target = event.project(averaged.end());
    let straight = Path::straight_line(x0, &target, t_end, 1)?;

    let tr = Transcription {
        model,
        x0,
        t_end,
        event,
        k_nodes: opts.k_nodes,
        substeps: opts.substeps,
        local: opts.local,
    };
    let mut starts = vec![tr.encode(&averaged, averaged.end()), tr.encode(&straight, &target)];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let scale = 0.1 * (1.0 + averaging::dist(x0, &target));
    for _ in 0..opts.random_starts {
        let mut z = tr.encode(&straight, &target);
        for v in z.iter_mut().take(opts.k_nodes * d) {
            *v += scale * (rng.random::<f64>() - 0.5);
        }
        starts.push(z);
    }
    let (z, i_star, mut evaluations, converged) = tr
        .minimize(&starts, opts.max_evals)
        .ok_or_else(|| Error::Numerical("no feasible start for the transcription".into()))?;
    let path = tr.path(&z)?;

    let (refined_i_star, refinement_gain) = if opts.refine {
        let fine = Transcription {
            k_nodes: 2 * opts.k_nodes + 1,
            ..tr
        };
        let warm = fine.encode(&path, path.end());
        match fine.minimize(&[warm], opts.max_evals) {
            Some((_, v, e, _)) => {
                evaluations += e;
                let gain = if i_star > 0.0 { (i_star - v) / i_star } else { 0.0 };
                (Some(v), Some(gain))
            }
            None => (None, None),
        }
    } else {
        (None, None)
    };

    let slope_fit = sweep.and_then(|s| s.fit.as_ref()).map(|f| f.slope);
    let relative_gap = slope_fit.filter(|_| i_star > 0.0).map(|s| (s - i_star).abs() / i_star);
    Ok(CompareReport {
        i_star,
        slope_fit,
        relative_gap,
        path,
        diagnostics: CompareDiagnostics {
            k_nodes: opts.k_nodes,
            starts: starts.len(),
            evaluations,
            converged,
            refined_i_star,
            refinement_gain,
        },
    })
}

/// One row of the tilted-convergence table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltRow {
    pub epsilon: f64,
    pub n: u64,
    pub mean_sup_dev: f64,
    pub stderr_sup_dev: f64,
    pub mean_cost: f64,
    pub stderr_cost: f64,
    pub deterministic_cost: f64,
}

/// Controlled ensembles following `target` under `controls`, one row per
/// `eps`. Deviations are measured on the simulation grid against the
/// piecewise-linear interpolant of `target`.
#[allow(clippy::too_many_arguments)]
pub fn tilted_ensemble(
    model: &Model,
    controls: &FeedbackControls,
    target: &Path,
    deterministic_cost: f64,
    y0: usize,
    eps_list: &[f64],
    n: u64,
    seed: u64,
    h: f64,
) -> Result<Vec<TiltRow>> {
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 trajectories".into()));
    }
    let t_end = target.t_end();
    let grid = averaging::time_grid(t_end, h)?;
    let reference = Path::new(grid.clone(), grid.iter().map(|&t| target.at(t)).collect())?;
    eps_list
        .iter()
        .map(|&eps| {
            let spec = SimSpec::new(eps, target.start().to_vec(), y0, t_end, h);
            let stats = simulator::batch_simulate(model, &spec, n, seed, Some(controls), Some(&reference))?;
            let (mean_sup_dev, stderr_sup_dev) = stats.mean_sup_dev().expect("reference given");
            let (mean_cost, stderr_cost) = stats.mean_cost();
            Ok(TiltRow {
                epsilon: eps,
                n,
                mean_sup_dev,
                stderr_sup_dev,
                mean_cost,
                stderr_cost,
                deterministic_cost,
            })
        })
        .collect()
}

/// [`tilted_ensemble`] with the feedback controls and path of a perturbation.
pub fn tilted_convergence(
    model: &Model,
    result: &PerturbResult,
    y0: usize,
    eps_list: &[f64],
    n: u64,
    seed: u64,
    h: f64,
) -> Result<Vec<TiltRow>> {
    let controls = result.feedback(model)?;
    tilted_ensemble(model, &controls, &result.xi_star, result.cost_star, y0, eps_list, n, seed, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use approx::assert_abs_diff_eq;

    #[test]
    fn event_membership_and_projection() {
        let ball = EventSpec::ball(vec![1.0, 0.0], 0.5);
        assert!(ball.contains(&[1.2, 0.3]));
        let p = ball.project(&[3.0, 0.0]);
        assert_abs_diff_eq!(p[0], 1.5, epsilon = 1e-15);
        let half = EventSpec::halfspace(vec![0.0, 2.0], 1.0);
        assert!(!half.contains(&[5.0, 0.4]));
        assert_eq!(half.project(&[5.0, 0.4]), vec![5.0, 0.5]);
        assert!(EventSpec::halfspace(vec![0.0], 1.0).validate(1).is_err());
        assert!(EventSpec::ball(vec![0.0], 0.0).validate(1).is_err());
    }

    #[test]
    fn whole_space_is_certain() {
        let model = fixtures::gaussian();
        let spec = SimSpec::new(0.1, vec![0.0], 0, 1.0, 1.0);
        let est = mc_rare_event(&model, &spec, &EventSpec::ball(vec![0.0], f64::INFINITY), 200, 3).unwrap();
        assert_eq!(est.p_hat, 1.0);
        assert_eq!(est.stderr, 0.0);
        assert_eq!(est.neg_eps_log_p, Some(0.0));
    }

    #[test]
    fn impossible_event_is_censored() {
        let model = fixtures::single_state(0.0, 0.0, 0.0);
        let spec = SimSpec::new(0.1, vec![0.0], 0, 1.0, 0.5);
        let est = mc_rare_event(&model, &spec, &EventSpec::halfspace(vec![1.0], 1.0), 100, 3).unwrap();
        assert!(est.censored && est.neg_eps_log_p.is_none());
    }

    #[test]
    fn deterministic_model_always_hits() {
        // x' = 1 from 0 reaches 1 at T = 1
        let model = fixtures::single_state(0.0, 1.0, 0.0);
        let base = SimSpec::new(0.1, vec![0.0], 0, 1.0, 0.1);
        let sweep = eps_sweep(&model, &base, &EventSpec::ball(vec![1.0], 0.01), &[0.1, 0.05], &[100, 100], 9).unwrap();
        assert!(sweep.rows.iter().all(|r| r.p_hat == 1.0));
        assert!(eps_sweep(&model, &base, &EventSpec::ball(vec![1.0], 0.01), &[0.05, 0.1], &[100, 100], 9).is_err());
    }

    #[test]
    fn slope_fit_on_exact_line() {
        let rows: Vec<McEstimate> = [0.1, 0.05, 0.025]
            .iter()
            .map(|&e| {
                let p = (-(0.7 / e) - 1.5f64).exp();
                McEstimate {
                    epsilon: e,
                    n: 1,
                    hits: 1,
                    p_hat: p,
                    stderr: 0.0,
                    neg_eps_log_p: Some(-e * p.ln()),
                    censored: false,
                }
            })
            .collect();
        let fit = fit_slope(&rows).unwrap();
        assert_abs_diff_eq!(fit.slope, 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.intercept, 1.5, epsilon = 1e-11);
    }

    #[test]
    fn gaussian_geodesic_is_straight() {
        let model = fixtures::gaussian();
        let opts = CompareOptions {
            refine: false,
            random_starts: 0,
            ..CompareOptions::default()
        };
        let rep = ldp_compare(&model, &[0.0], 1.0, &EventSpec::halfspace(vec![1.0], 1.0), None, &opts).unwrap();
        assert_abs_diff_eq!(rep.i_star, 0.5, epsilon = 1e-6);
        for (k, &t) in rep.path.grid().iter().enumerate() {
            assert_abs_diff_eq!(rep.path.point(k)[0], t, epsilon = 1e-3);
        }
    }

    #[test]
    fn averaged_endpoint_costs_nothing() {
        let model = fixtures::reference_two_state();
        let avg = averaging::solve_averaged_ode(&model, &[0.5], 1.0, 0.005).unwrap();
        let event = EventSpec::ball(avg.end().to_vec(), 0.05);
        let opts = CompareOptions {
            refine: false,
            random_starts: 0,
            ..CompareOptions::default()
        };
        let rep = ldp_compare(&model, &[0.5], 1.0, &event, None, &opts).unwrap();
        assert!(rep.i_star <= 1e-5, "{}", rep.i_star);
    }

    #[test]
    fn identity_tilt_matches_lln_table() {
        let model = fixtures::reference_two_state();
        let h = 0.01;
        let avg = averaging::solve_averaged_ode(&model, &[0.5], 1.0, h).unwrap();
        let id = FeedbackControls::identity(&model, 1.0);
        let tilt = tilted_ensemble(&model, &id, &avg, 0.0, 0, &[0.1, 0.03], 20, 4, h).unwrap();
        let lln = averaging::lln_diagnostic(&model, &[0.5], 0, &[0.1, 0.03], 20, 4, h, 1.0).unwrap();
        for (a, b) in tilt.iter().zip(&lln) {
            assert_eq!(a.mean_sup_dev, b.mean_sup_dev);
            assert_eq!(a.mean_cost, 0.0);
        }
    }
}
