//! The fast chain at a frozen slow state: thinning intervals, generators,
//! stationary laws and irreducibility.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::Model;

/// Dense `L x L` generator, row-major. Off-diagonals are non-negative and
/// rows sum to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateMatrix {
    n: usize,
    q: Vec<f64>,
}

impl RateMatrix {
    /// Builds a generator from off-diagonal rates on the given channels.
    pub fn from_channels(n: usize, channels: &[(usize, usize)], rates: &[f64]) -> Result<Self> {
        if channels.len() != rates.len() {
            return Err(Error::Shape(format!(
                "{} rates for {} channels",
                rates.len(),
                channels.len()
            )));
        }
        let mut q = vec![0.0; n * n];
        for (&(i, j), &v) in channels.iter().zip(rates) {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "rate on channel ({},{}) must be finite and non-negative, got {v}",
                    i + 1,
                    j + 1
                )));
            }
            q[i * n + j] = v;
        }
        for i in 0..n {
            let out: f64 = (0..n).filter(|&j| j != i).map(|j| q[i * n + j]).sum();
            q[i * n + i] = -out;
        }
        Ok(RateMatrix { n, q })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.q[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.q
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.q)
    }

    /// `max_j |(pi Q)_j|`.
    pub fn balance_residual(&self, pi: &[f64]) -> f64 {
        let n = self.n;
        (0..n)
            .map(|j| (0..n).map(|i| pi[i] * self.q[i * n + j]).sum::<f64>().abs())
            .fold(0.0, f64::max)
    }

    /// Communicating classes of the graph of positive off-diagonal rates.
    pub fn communicating_classes(&self) -> Vec<Vec<usize>> {
        let n = self.n;
        let adj: Vec<bool> = (0..n * n).map(|k| k / n != k % n && self.q[k] > 0.0).collect();
        linalg::strongly_connected_classes(&adj, n)
    }
}

/// Thinning intervals `E_ij(x) = [0, rho_ij]` inside `[0, zeta]` for every
/// allowed channel, in the model's channel order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpGeometry {
    pub n_states: usize,
    pub channels: Vec<(usize, usize)>,
    pub rho: Vec<f64>,
    pub zeta: f64,
}

impl JumpGeometry {
    pub fn rho_of(&self, i: usize, j: usize) -> Option<f64> {
        self.channels
            .iter()
            .position(|&c| c == (i, j))
            .map(|k| self.rho[k])
    }
}

/// Interval lengths `rho_ij = c_i(x) r_ij(x)` at `x`. `x` must be finite.
pub fn jump_geometry(model: &Model, x: &[f64]) -> JumpGeometry {
    let rho = (0..model.n_channels()).map(|k| model.rho_at(x, k)).collect();
    JumpGeometry {
        n_states: model.n_states(),
        channels: model.channels().to_vec(),
        rho,
        zeta: model.zeta(),
    }
}

/// Generator of the fast chain at frozen `x`.
pub fn generator(model: &Model, x: &[f64]) -> RateMatrix {
    let g = jump_geometry(model, x);
    RateMatrix::from_channels(g.n_states, &g.channels, &g.rho).expect("rho is non-negative")
}

/// Generator with thinned rates `q_ij` (the integral of a thinning control
/// over `E_ij`). `q = rho` recovers [`generator`].
pub fn controlled_generator(geometry: &JumpGeometry, q: &[f64]) -> Result<RateMatrix> {
    RateMatrix::from_channels(geometry.n_states, &geometry.channels, q)
}

/// Unique stationary law of an irreducible generator.
pub fn stationary(q: &RateMatrix) -> Result<Vec<f64>> {
    let n = q.size();
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let classes = q.communicating_classes();
    if classes.len() > 1 {
        return Err(Error::Reducible { classes });
    }
    let m = q.to_dmatrix();
    let mut pi = linalg::stationary_lu(&m)
        .ok_or_else(|| Error::Numerical("singular stationary system".into()))?;
    // one round of refinement tightens the balance residual to rounding level
    let mut a = m.transpose();
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut resid = -(&a * &pi);
    resid[n - 1] += 1.0;
    if let Some(corr) = a.lu().solve(&resid) {
        pi += corr;
    }
    let s: f64 = pi.iter().sum();
    Ok(pi.iter().map(|v| v / s).collect())
}

/// Embedded jump kernel `r(x, y, y')`, row-major.
fn embedded_kernel(model: &Model, x: &[f64]) -> DMatrix<f64> {
    let l = model.n_states();
    DMatrix::from_fn(l, l, |i, j| model.r_at(x, i, j))
}

/// `(1/L) sum_{n=1}^{L} r^n`.
fn averaged_powers(r: &DMatrix<f64>) -> DMatrix<f64> {
    let l = r.nrows();
    let mut acc = DMatrix::zeros(l, l);
    let mut pow = r.clone();
    for _ in 0..l {
        acc += &pow;
        pow = &pow * r;
    }
    acc / l as f64
}

/// Stationary law through the embedded chain: the invariant law of the
/// averaged kernel, reweighted by the mean holding times `1 / c_y`.
pub fn nu_embedded(model: &Model, x: &[f64]) -> Result<Vec<f64>> {
    let l = model.n_states();
    if l == 1 {
        return Ok(vec![1.0]);
    }
    let p = averaged_powers(&embedded_kernel(model, x));
    let gen = p - DMatrix::identity(l, l);
    let pi = linalg::stationary_lu(&gen)
        .ok_or_else(|| Error::Numerical("singular embedded-chain system".into()))?;
    let w: Vec<f64> = (0..l).map(|y| pi[y] / model.c_at(x, y)).collect();
    let s: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / s).collect())
}

/// Total-variation tolerance between the two stationary-law routes.
pub const NU_ROUTE_TOL: f64 = 1e-10;

/// Stationary law `nu(x)` of the fast chain, computed from the generator and
/// cross-checked against the embedded-chain route.
pub fn nu(model: &Model, x: &[f64]) -> Result<Vec<f64>> {
    let direct = stationary(&generator(model, x))?;
    let embedded = nu_embedded(model, x)?;
    let tv = 0.5 * direct.iter().zip(&embedded).map(|(a, b)| (a - b).abs()).sum::<f64>();
    if !(tv <= NU_ROUTE_TOL) {
        return Err(Error::Consistency(format!(
            "stationary routes disagree at x = {x:?}: TV distance {tv:e}"
        )));
    }
    Ok(direct)
}

/// Same as [`nu`] without the second route; for hot loops on models already
/// checked once.
pub(crate) fn nu_fast(model: &Model, x: &[f64]) -> Result<Vec<f64>> {
    stationary(&generator(model, x))
}

/// `alpha_x = min_{y,z} sum_{n=1}^{L} r^n_{yz}(x)`; positive iff the embedded
/// chain is irreducible at `x`.
pub fn irreducibility_alpha(model: &Model, x: &[f64]) -> f64 {
    let l = model.n_states();
    if l == 1 {
        return 1.0;
    }
    let acc = averaged_powers(&embedded_kernel(model, x)) * l as f64;
    acc.iter().cloned().fold(f64::INFINITY, f64::min)
}
