//! Simulation of the coupled pair by Poisson thinning.
//!
//! In fast state `i` candidate events arrive at rate `zeta phi_max n_i / eps`,
//! where `n_i` is the number of channels leaving `i`. A candidate picks one of
//! those channels uniformly, draws a mark `z ~ U[0, zeta]` and is accepted iff
//! `z <= c_i(X) r_ij(X)` (and, for controlled runs, with the additional
//! probability `phi_ij / phi_max`). Between candidates `X` follows
//! Euler-Maruyama with substeps ending at grid nodes and candidate times.
//!
//! Every candidate consumes exactly four uniforms from the jump stream
//! (waiting time, channel, mark, control mark), so an uncontrolled run and a
//! run under the identity control see identical randomness.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::{self, interval_index, Path};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ratefn::ell_unchecked;
use crate::rng::StreamId;

/// Parameters of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub eps: f64,
    pub x0: Vec<f64>,
    /// 0-based.
    pub y0: usize,
    pub t_end: f64,
    /// Maximal Euler substep; `X` is recorded on [`averaging::time_grid`].
    pub h: f64,
}

impl SimSpec {
    pub fn new(eps: f64, x0: Vec<f64>, y0: usize, t_end: f64, h: f64) -> Self {
        SimSpec { eps, x0, y0, t_end, h }
    }

    fn check(&self, model: &Model) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("eps must be positive, got {}", self.eps)));
        }
        if self.x0.len() != model.d() {
            return Err(Error::Shape(format!("x0 has length {}, expected {}", self.x0.len(), model.d())));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("x0".into()));
        }
        if self.y0 >= model.n_states() {
            return Err(Error::InvalidArgument(format!("y0 = {} out of range", self.y0)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub time: f64,
    pub from: usize,
    pub to: usize,
}

/// Running costs of a controlled run: `psi = 1/2 int |u|^2` and
/// `phi = sum_j int rho_Yj(X) l(phi_Yj)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub psi: f64,
    pub phi: f64,
}

impl CostRecord {
    pub fn total(&self) -> f64 {
        self.psi + self.phi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub path: Path,
    pub y0: usize,
    pub jumps: Vec<Jump>,
    pub cost: Option<CostRecord>,
    pub stream: StreamId,
    /// Candidates proposed and accepted per channel.
    pub candidates: Vec<u64>,
    pub accepted: Vec<u64>,
}

impl Trajectory {
    /// Fast state at time `t` (right-continuous).
    pub fn state_at(&self, t: f64) -> usize {
        let n = self.jumps.partition_point(|j| j.time <= t);
        if n == 0 {
            self.y0
        } else {
            self.jumps[n - 1].to
        }
    }

    pub fn terminal_state(&self) -> usize {
        self.jumps.last().map_or(self.y0, |j| j.to)
    }
}

/// Piecewise-constant feedback controls on a time grid: on `[t_k, t_{k+1})`
/// the drift control in fast state `i` is `u[k][i]` and the thinning factor on
/// channel `c` is `phi[k][c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackControls {
    grid: Vec<f64>,
    m: usize,
    n_states: usize,
    n_channels: usize,
    /// `K x L x m`
    u: Vec<f64>,
    /// `K x |T|`
    phi: Vec<f64>,
    phi_max: f64,
    zero_drift: bool,
}

impl FeedbackControls {
    pub fn new(model: &Model, grid: Vec<f64>, u: Vec<f64>, phi: Vec<f64>, phi_max: f64) -> Result<Self> {
        if grid.len() < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("control grid must be strictly increasing".into()));
        }
        let k = grid.len() - 1;
        let (l, m, nc) = (model.n_states(), model.m(), model.n_channels());
        if u.len() != k * l * m || phi.len() != k * nc {
            return Err(Error::Shape(format!(
                "controls need {} drift and {} thinning entries, got {} and {}",
                k * l * m,
                k * nc,
                u.len(),
                phi.len()
            )));
        }
        if u.iter().chain(&phi).any(|v| !v.is_finite()) || phi.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("controls must be finite with phi >= 0".into()));
        }
        if !(phi_max >= 1.0 && phi_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("phi_max must be finite and >= 1, got {phi_max}")));
        }
        let zero_drift = u.iter().all(|&v| v == 0.0);
        Ok(FeedbackControls {
            grid,
            m,
            n_states: l,
            n_channels: nc,
            u,
            phi,
            phi_max,
            zero_drift,
        })
    }

    /// `u = 0`, `phi = 1` on `[0, t_end]`.
    pub fn identity(model: &Model, t_end: f64) -> Self {
        FeedbackControls::new(
            model,
            vec![0.0, t_end],
            vec![0.0; model.n_states() * model.m()],
            vec![1.0; model.n_channels()],
            1.0,
        )
        .expect("identity controls are valid")
    }

    /// Uses `phi_max = max(1, max phi)`.
    pub fn with_auto_bound(model: &Model, grid: Vec<f64>, u: Vec<f64>, phi: Vec<f64>) -> Result<Self> {
        let bound = phi.iter().cloned().fold(1.0, f64::max);
        FeedbackControls::new(model, grid, u, phi, bound)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn phi_max(&self) -> f64 {
        self.phi_max
    }

    pub fn u_at(&self, k: usize, i: usize) -> &[f64] {
        let off = (k * self.n_states + i) * self.m;
        &self.u[off..off + self.m]
    }

    pub fn phi_at(&self, k: usize, c: usize) -> f64 {
        self.phi[k * self.n_channels + c]
    }

    fn slot(&self, t: f64) -> usize {
        interval_index(&self.grid, t)
    }
}

/// Uncontrolled run on streams `stream`.
pub fn simulate(model: &Model, spec: &SimSpec, stream: StreamId) -> Result<Trajectory> {
    run(model, spec, None, stream)
}

/// Run under feedback controls.
pub fn simulate_controlled(
    model: &Model,
    spec: &SimSpec,
    controls: &FeedbackControls,
    stream: StreamId,
) -> Result<Trajectory> {
    if controls.n_states != model.n_states() || controls.n_channels != model.n_channels() || controls.m != model.m() {
        return Err(Error::Shape("controls do not match the model".into()));
    }
    run(model, spec, Some(controls), stream)
}

fn run(model: &Model, spec: &SimSpec, controls: Option<&FeedbackControls>, stream: StreamId) -> Result<Trajectory> {
    spec.check(model)?;
    let grid = averaging::time_grid(spec.t_end, spec.h)?;
    let (d, m) = (model.d(), model.m());
    let zeta = model.zeta();
    let phi_max = controls.map_or(1.0, |c| c.phi_max);
    let sqrt_eps = spec.eps.sqrt();
    let nc = model.n_channels();

    let mut jump_rng = stream.jump_rng();
    let mut diff_rng = stream.diffusion_rng();

    let mut values = Vec::with_capacity(grid.len() * d);
    values.extend_from_slice(&spec.x0);
    let mut x = spec.x0.clone();
    let mut y = spec.y0;
    let mut t = 0.0;
    let mut jumps = Vec::new();
    let mut candidates = vec![0u64; nc];
    let mut accepted = vec![0u64; nc];
    let mut cost = CostRecord { psi: 0.0, phi: 0.0 };

    let mut b = vec![0.0; d];
    let mut a = vec![0.0; d * m];
    let mut dw = vec![0.0; m];

    let next_candidate = |rng: &mut rand_chacha::ChaCha8Rng, t: f64, y: usize| -> f64 {
        let n_out = model.out_channels(y).len();
        let u: f64 = rng.random();
        if n_out == 0 {
            return f64::INFINITY;
        }
        let rate = zeta * phi_max * n_out as f64 / spec.eps;
        t - (1.0 - u).ln() / rate
    };
    let mut t_cand = next_candidate(&mut jump_rng, t, y);
    let mut node = 1;

    while node < grid.len() {
        let t_node = grid[node];
        let t_stop = t_node.min(t_cand);
        let dt = t_stop - t;
        if dt > 0.0 {
            model.b_into(&x, y, &mut b);
            model.a_into(&x, y, &mut a);
            for w in dw.iter_mut() {
                let z: f64 = diff_rng.sample(StandardNormal);
                *w = z * dt.sqrt();
            }
            let slot = controls.map(|c| (c, c.slot(t)));
            let drift_u = slot.and_then(|(c, k)| if c.zero_drift { None } else { Some(c.u_at(k, y)) });
            // running costs use the state at the left end of the substep
            if let Some((c, k)) = slot {
                let u = c.u_at(k, y);
                cost.psi += 0.5 * u.iter().map(|v| v * v).sum::<f64>() * dt;
                for &ch in model.out_channels(y) {
                    let phi = c.phi_at(k, ch);
                    if phi != 1.0 {
                        cost.phi += model.rho_at(&x, ch) * ell_unchecked(phi) * dt;
                    }
                }
            }
            for i in 0..d {
                let row = &a[i * m..(i + 1) * m];
                let mut inc = b[i] * dt;
                if let Some(u) = drift_u {
                    inc += row.iter().zip(u).map(|(p, q)| p * q).sum::<f64>() * dt;
                }
                inc += sqrt_eps * row.iter().zip(&dw).map(|(p, q)| p * q).sum::<f64>();
                x[i] += inc;
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("slow state at t = {t_stop}")));
            }
        }
        t = t_stop;
        if t_cand <= t_node {
            let out = model.out_channels(y);
            let pick: f64 = jump_rng.random();
            let z: f64 = jump_rng.random::<f64>() * zeta;
            let mark: f64 = jump_rng.random();
            let ch = out[((pick * out.len() as f64) as usize).min(out.len() - 1)];
            candidates[ch] += 1;
            let in_set = z <= model.rho_at(&x, ch);
            let thinned = match controls {
                None => true,
                Some(c) => {
                    let phi = c.phi_at(c.slot(t), ch);
                    if phi > c.phi_max {
                        let (from, to) = model.channels()[ch];
                        return Err(Error::ControlBound {
                            from: from + 1,
                            to: to + 1,
                            time: t,
                            value: phi,
                            max: c.phi_max,
                        });
                    }
                    mark * c.phi_max <= phi
                }
            };
            if in_set && thinned {
                let to = model.channels()[ch].1;
                debug_assert!(model.channel_index(y, to).is_some());
                jumps.push(Jump { time: t, from: y, to });
                accepted[ch] += 1;
                y = to;
            }
            t_cand = next_candidate(&mut jump_rng, t, y);
        } else {
            values.extend_from_slice(&x);
            node += 1;
        }
    }

    Ok(Trajectory {
        path: Path::from_flat(d, grid, values)?,
        y0: spec.y0,
        jumps,
        cost: controls.map(|_| cost),
        stream,
        candidates,
        accepted,
    })
}

/// Per-trajectory summary in an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub index: u64,
    pub terminal_x: Vec<f64>,
    /// Sup distance to the reference path on the grid.
    pub sup_dev: Option<f64>,
    pub n_jumps: usize,
    pub cost_psi: f64,
    pub cost_phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub rows: Vec<TrajectorySummary>,
}

impl EnsembleStats {
    /// `None` when the ensemble ran without a reference path.
    pub fn mean_sup_dev(&self) -> Option<(f64, f64)> {
        let v: Option<Vec<f64>> = self.rows.iter().map(|r| r.sup_dev).collect();
        v.map(|v| averaging::mean_stderr(&v))
    }

    pub fn mean_cost(&self) -> (f64, f64) {
        let v: Vec<f64> = self.rows.iter().map(|r| r.cost_psi + r.cost_phi).collect();
        averaging::mean_stderr(&v)
    }
}

/// Evaluates `f` on streams `(seed, 1..=n)` in parallel; results come back in
/// stream order regardless of scheduling. The first failing index wins.
pub fn batch_map<T, F>(n: u64, seed: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(StreamId) -> Result<T> + Sync,
{
    (1..=n)
        .into_par_iter()
        .map(|s| {
            f(StreamId::new(seed, s)).map_err(|e| Error::Trajectory {
                index: s,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Runs `n` trajectories and summarizes each.
pub fn batch_simulate(
    model: &Model,
    spec: &SimSpec,
    n: u64,
    seed: u64,
    controls: Option<&FeedbackControls>,
    reference: Option<&Path>,
) -> Result<EnsembleStats> {
    if n == 0 {
        return Err(Error::InvalidArgument("ensemble size must be at least 1".into()));
    }
    let rows = batch_map(n, seed, |stream| {
        let traj = match controls {
            Some(c) => simulate_controlled(model, spec, c, stream)?,
            None => simulate(model, spec, stream)?,
        };
        let sup_dev = match reference {
            Some(r) => Some(traj.path.sup_distance(r)?),
            None => None,
        };
        let cost = traj.cost.unwrap_or(CostRecord { psi: 0.0, phi: 0.0 });
        Ok(TrajectorySummary {
            index: stream.stream,
            terminal_x: traj.path.end().to_vec(),
            sup_dev,
            n_jumps: traj.jumps.len(),
            cost_psi: cost.psi,
            cost_phi: cost.phi,
        })
    })?;
    Ok(EnsembleStats { rows })
}

/// Fraction of `[0, t]` spent in each fast state.
pub fn occupation_measure(traj: &Trajectory, n_states: usize, t: f64) -> Result<Vec<f64>> {
    let t_end = traj.path.t_end();
    if !(t > 0.0 && t <= t_end) {
        return Err(Error::InvalidArgument(format!("t = {t} outside (0, {t_end}]")));
    }
    let mut occ = vec![0.0; n_states];
    let mut last = 0.0;
    let mut y = traj.y0;
    for j in traj.jumps.iter().take_while(|j| j.time <= t) {
        occ[y] += j.time - last;
        last = j.time;
        y = j.to;
    }
    occ[y] += t - last;
    let total: f64 = occ.iter().sum();
    Ok(occ.into_iter().map(|v| v / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn single_state_without_noise_is_euler() {
        let model = fixtures::single_state(-1.0, 0.0, 0.0);
        let spec = SimSpec::new(0.1, vec![1.0], 0, 1.0, 0.1);
        let traj = simulate(&model, &spec, StreamId::new(3, 1)).unwrap();
        assert!(traj.jumps.is_empty());
        let mut x = 1.0;
        for k in 0..=10 {
            assert!((traj.path.point(k)[0] - x).abs() < 1e-15);
            x *= 0.9;
        }
    }

    #[test]
    fn identical_streams_give_identical_runs() {
        let model = fixtures::reference_two_state();
        let spec = SimSpec::new(0.05, vec![0.2], 1, 1.0, 0.01);
        let a = simulate(&model, &spec, StreamId::new(9, 4)).unwrap();
        let b = simulate(&model, &spec, StreamId::new(9, 4)).unwrap();
        assert_eq!(a, b);
        let c = simulate(&model, &spec, StreamId::new(9, 5)).unwrap();
        assert_ne!(a.jumps, c.jumps);
    }

    #[test]
    fn identity_control_reproduces_plain_run() {
        let model = fixtures::reference_two_state();
        let spec = SimSpec::new(0.05, vec![0.2], 0, 1.0, 0.01);
        let s = StreamId::new(11, 2);
        let plain = simulate(&model, &spec, s).unwrap();
        let ctrl = simulate_controlled(&model, &spec, &FeedbackControls::identity(&model, 1.0), s).unwrap();
        assert_eq!(plain.path, ctrl.path);
        assert_eq!(plain.jumps, ctrl.jumps);
        assert_eq!(ctrl.cost, Some(CostRecord { psi: 0.0, phi: 0.0 }));
    }

    #[test]
    fn jumps_alternate_consistently() {
        let model = fixtures::three_state_complete([1.0, 2.0, 3.0]);
        let spec = SimSpec::new(0.01, vec![0.0], 2, 1.0, 0.05);
        let traj = simulate(&model, &spec, StreamId::new(1, 1)).unwrap();
        let mut prev = 2;
        let mut t = 0.0;
        for j in &traj.jumps {
            assert_eq!(j.from, prev);
            assert!(j.time > t && j.time <= 1.0);
            assert!(model.channel_index(j.from, j.to).is_some());
            prev = j.to;
            t = j.time;
        }
        assert_eq!(traj.candidates.iter().sum::<u64>() >= traj.accepted.iter().sum::<u64>(), true);
    }

    #[test]
    fn occupation_without_jumps_is_indicator() {
        let model = fixtures::two_state_constant();
        let spec = SimSpec::new(1e6, vec![0.0], 1, 1e-6, 1e-7);
        let traj = simulate(&model, &spec, StreamId::new(0, 1)).unwrap();
        assert!(traj.jumps.is_empty());
        assert_eq!(occupation_measure(&traj, 2, 1e-6).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn occupation_sums_to_one() {
        let model = fixtures::frozen_two_state([2.0, 1.0]);
        let spec = SimSpec::new(0.01, vec![0.0], 0, 1.0, 0.1);
        let traj = simulate(&model, &spec, StreamId::new(5, 5)).unwrap();
        let occ = occupation_measure(&traj, 2, 0.7).unwrap();
        assert!((occ.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(occupation_measure(&traj, 2, 1.5).is_err());
    }

    #[test]
    fn controls_above_bound_abort() {
        let model = fixtures::frozen_two_state([1.0, 1.0]);
        let mut c = FeedbackControls::identity(&model, 1.0);
        c.phi = vec![2.0, 2.0];
        let spec = SimSpec::new(0.01, vec![0.0], 0, 1.0, 0.1);
        let err = simulate_controlled(&model, &spec, &c, StreamId::new(1, 1)).unwrap_err();
        assert!(matches!(err, Error::ControlBound { .. }), "{err}");
    }

    #[test]
    fn batch_is_ordered_and_extends() {
        let model = fixtures::reference_two_state();
        let spec = SimSpec::new(0.1, vec![0.0], 0, 0.5, 0.05);
        let small = batch_simulate(&model, &spec, 5, 77, None, None).unwrap();
        let large = batch_simulate(&model, &spec, 10, 77, None, None).unwrap();
        assert_eq!(&large.rows[..5], &small.rows[..]);
        let single = simulate(&model, &spec, StreamId::new(77, 1)).unwrap();
        assert_eq!(small.rows[0].terminal_x, single.path.end());
    }

    #[test]
    fn phi_cost_is_zero_under_identity_and_positive_otherwise() {
        let model = fixtures::frozen_two_state([1.0, 1.0]);
        let spec = SimSpec::new(0.01, vec![0.0], 0, 1.0, 0.1);
        let c = FeedbackControls::with_auto_bound(&model, vec![0.0, 1.0], vec![0.0; 2], vec![2.0, 2.0]).unwrap();
        let traj = simulate_controlled(&model, &spec, &c, StreamId::new(1, 1)).unwrap();
        // rho = 1 on the active channel at every time: cost = l(2) T
        let want = 2.0 * 2f64.ln() - 1.0;
        assert!((traj.cost.unwrap().phi - want).abs() < 1e-12);
    }
}
