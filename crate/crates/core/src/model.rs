//! Problem instances: dimensions, allowed fast transitions, and the coefficient
//! family supplying drift `b`, diffusion `a`, jump intensity `c` and transition
//! kernel `r`.
//!
//! The built-in family is `affine-switching`:
//!
//! ```text
//! b(x,y)    = B_y x + beta_y
//! a(x,y)    = A_y
//! c(x,y)    = c0_y + c1_y tanh(w_y . x)
//! r(x,y,y') = r0_{yy'} + r1_{yy'} tanh(v . x)
//! ```
//!
//! `tanh` keeps `c` and `r` bounded and Lipschitz with computable constants, so
//! all standing assumptions can be enforced when the model is built.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fastchain;

const STOCHASTIC_TOL: f64 = 1e-12;

/// The JSON model document. Indices in `T_set` are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub m: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub family: Family,
    pub params: AffineParams,
    #[serde(rename = "T_set", default, skip_serializing_if = "Option::is_none")]
    pub t_set: Option<Vec<[usize; 2]>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "affine-switching")]
    AffineSwitching,
}

/// Raw parameter arrays of the affine-switching family, as they appear in the
/// config. Optional arrays default to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineParams {
    /// `L x d x d`
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b_mat: Option<Vec<Vec<Vec<f64>>>>,
    /// `L x d`
    pub beta: Vec<Vec<f64>>,
    /// `L x d x m`
    #[serde(rename = "A")]
    pub a_mat: Vec<Vec<Vec<f64>>>,
    pub c0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c1: Option<Vec<f64>>,
    /// `L x d`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<Vec<f64>>>,
    /// `L x L`
    pub r0: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r1: Option<Vec<Vec<f64>>>,
    /// `d`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<Vec<f64>>,
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model config serializes")
    }
}

/// Validated, flattened parameters of the affine-switching family.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineSwitching {
    d: usize,
    m: usize,
    l: usize,
    b_mat: Vec<f64>,
    beta: Vec<f64>,
    a_mat: Vec<f64>,
    c0: Vec<f64>,
    c1: Vec<f64>,
    w: Vec<f64>,
    r0: Vec<f64>,
    r1: Vec<f64>,
    v: Vec<f64>,
}

impl AffineSwitching {
    fn tanh_w(&self, x: &[f64], y: usize) -> f64 {
        let w = &self.w[y * self.d..(y + 1) * self.d];
        dot(w, x).tanh()
    }

    fn c(&self, x: &[f64], y: usize) -> f64 {
        if self.c1[y] == 0.0 {
            self.c0[y]
        } else {
            self.c0[y] + self.c1[y] * self.tanh_w(x, y)
        }
    }

    fn r(&self, x: &[f64], y: usize, z: usize) -> f64 {
        let k = y * self.l + z;
        if self.r1[k] == 0.0 {
            self.r0[k]
        } else {
            self.r0[k] + self.r1[k] * dot(&self.v, x).tanh()
        }
    }

    fn b_into(&self, x: &[f64], y: usize, out: &mut [f64]) {
        let d = self.d;
        let bm = &self.b_mat[y * d * d..(y + 1) * d * d];
        for i in 0..d {
            out[i] = self.beta[y * d + i] + dot(&bm[i * d..(i + 1) * d], x);
        }
    }

    fn a_into(&self, y: usize, out: &mut [f64]) {
        let n = self.d * self.m;
        out.copy_from_slice(&self.a_mat[y * n..(y + 1) * n]);
    }

    fn c_range(&self, y: usize) -> (f64, f64) {
        let modulated = self.w[y * self.d..(y + 1) * self.d].iter().any(|&v| v != 0.0);
        let spread = if modulated { self.c1[y].abs() } else { 0.0 };
        (self.c0[y] - spread, self.c0[y] + spread)
    }

    fn r_lower(&self, y: usize, z: usize) -> f64 {
        let k = y * self.l + z;
        let modulated = self.v.iter().any(|&v| v != 0.0);
        if modulated {
            self.r0[k] - self.r1[k].abs()
        } else {
            self.r0[k]
        }
    }
}

/// Extension point for user-supplied coefficients. Implementations are trusted
/// once [`validate_model`] passes on them.
pub trait CoefficientFn: Send + Sync + fmt::Debug {
    fn b_into(&self, x: &[f64], y: usize, out: &mut [f64]);
    /// Row-major `d x m`.
    fn a_into(&self, x: &[f64], y: usize, out: &mut [f64]);
    fn c(&self, x: &[f64], y: usize) -> f64;
    fn r(&self, x: &[f64], y: usize, z: usize) -> f64;
    /// A global upper bound on `c`; sets the thinning domain `[0, c_upper + 1]`.
    fn c_upper(&self) -> f64;
}

#[derive(Debug, Clone)]
pub enum CoefficientSpec {
    AffineSwitching(AffineSwitching),
    Custom(Arc<dyn CoefficientFn>),
}

/// An immutable problem instance. Cheap to clone and safe to share.
#[derive(Debug, Clone)]
pub struct Model {
    d: usize,
    m: usize,
    l: usize,
    channels: Vec<(usize, usize)>,
    out_channels: Vec<Vec<usize>>,
    channel_of: Vec<Option<usize>>,
    coeff: CoefficientSpec,
    config: Option<ModelConfig>,
    c_sup: f64,
    zeta: f64,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        match (&self.config, &other.config) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        }
    }
}

impl Model {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of fast states.
    pub fn n_states(&self) -> usize {
        self.l
    }

    /// Allowed transitions `(i, j)`, 0-based, in lexicographic order. Channel
    /// vectors throughout the crate are indexed in this order.
    pub fn channels(&self) -> &[(usize, usize)] {
        &self.channels
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// Channel indices leaving state `i`.
    pub fn out_channels(&self, i: usize) -> &[usize] {
        &self.out_channels[i]
    }

    pub fn channel_index(&self, i: usize, j: usize) -> Option<usize> {
        self.channel_of[i * self.l + j]
    }

    /// Upper bound of the jump intensity used for the thinning domain.
    pub fn c_sup(&self) -> f64 {
        self.c_sup
    }

    /// Length of the thinning domain `[0, zeta]`, `zeta = sup c + 1`.
    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn config(&self) -> Option<&ModelConfig> {
        self.config.as_ref()
    }

    pub fn coefficients(&self) -> &CoefficientSpec {
        &self.coeff
    }

    /// Wraps user-supplied coefficients. No constraint is checked here; run
    /// [`validate_model`] before trusting the instance.
    pub fn from_custom(
        d: usize,
        m: usize,
        l: usize,
        t_set: &[(usize, usize)],
        coeff: Arc<dyn CoefficientFn>,
    ) -> Result<Model> {
        if d == 0 || m == 0 || l == 0 {
            return Err(Error::Shape("d, m and L must be positive".into()));
        }
        let c_sup = coeff.c_upper();
        if !(c_sup.is_finite() && c_sup > 0.0) {
            return Err(Error::Constraint(format!(
                "c positivity violated: declared upper bound {c_sup}"
            )));
        }
        let channels = normalize_t_set(l, t_set)?;
        Ok(Model::assemble(d, m, l, channels, CoefficientSpec::Custom(coeff), None, c_sup))
    }

    fn assemble(
        d: usize,
        m: usize,
        l: usize,
        channels: Vec<(usize, usize)>,
        coeff: CoefficientSpec,
        config: Option<ModelConfig>,
        c_sup: f64,
    ) -> Model {
        let mut out_channels = vec![Vec::new(); l];
        let mut channel_of = vec![None; l * l];
        for (k, &(i, j)) in channels.iter().enumerate() {
            out_channels[i].push(k);
            channel_of[i * l + j] = Some(k);
        }
        Model {
            d,
            m,
            l,
            channels,
            out_channels,
            channel_of,
            coeff,
            config,
            c_sup,
            zeta: c_sup + 1.0,
        }
    }

    // Unchecked evaluators for hot loops; callers guarantee finite `x` and
    // in-range indices.

    #[inline]
    pub(crate) fn b_into(&self, x: &[f64], y: usize, out: &mut [f64]) {
        match &self.coeff {
            CoefficientSpec::AffineSwitching(p) => p.b_into(x, y, out),
            CoefficientSpec::Custom(f) => f.b_into(x, y, out),
        }
    }

    #[inline]
    pub(crate) fn a_into(&self, x: &[f64], y: usize, out: &mut [f64]) {
        match &self.coeff {
            CoefficientSpec::AffineSwitching(p) => p.a_into(y, out),
            CoefficientSpec::Custom(f) => f.a_into(x, y, out),
        }
    }

    #[inline]
    pub(crate) fn c_at(&self, x: &[f64], y: usize) -> f64 {
        match &self.coeff {
            CoefficientSpec::AffineSwitching(p) => p.c(x, y),
            CoefficientSpec::Custom(f) => f.c(x, y),
        }
    }

    #[inline]
    pub(crate) fn r_at(&self, x: &[f64], y: usize, z: usize) -> f64 {
        if y == z || self.channel_of[y * self.l + z].is_none() {
            return 0.0;
        }
        match &self.coeff {
            CoefficientSpec::AffineSwitching(p) => p.r(x, y, z),
            CoefficientSpec::Custom(f) => f.r(x, y, z),
        }
    }

    /// `c_i(x) r_ij(x)` for channel `k = (i, j)`.
    #[inline]
    pub(crate) fn rho_at(&self, x: &[f64], k: usize) -> f64 {
        let (i, j) = self.channels[k];
        self.c_at(x, i) * self.r_at(x, i, j)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::Shape(format!("x has length {}, expected d = {}", x.len(), self.d)));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("slow state {x:?}")));
        }
        Ok(())
    }

    fn check_state(&self, y: usize) -> Result<()> {
        if y >= self.l {
            return Err(Error::InvalidArgument(format!(
                "fast state {y} out of range (0-based, L = {})",
                self.l
            )));
        }
        Ok(())
    }

    pub fn eval_b(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        self.check_point(x)?;
        self.check_state(y)?;
        let mut out = vec![0.0; self.d];
        self.b_into(x, y, &mut out);
        Ok(out)
    }

    /// Row-major `d x m`.
    pub fn eval_a(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        self.check_point(x)?;
        self.check_state(y)?;
        let mut out = vec![0.0; self.d * self.m];
        self.a_into(x, y, &mut out);
        Ok(out)
    }

    pub fn eval_c(&self, x: &[f64], y: usize) -> Result<f64> {
        self.check_point(x)?;
        self.check_state(y)?;
        Ok(self.c_at(x, y))
    }

    /// Zero off the allowed transitions and on the diagonal.
    pub fn eval_r(&self, x: &[f64], y: usize, z: usize) -> Result<f64> {
        self.check_point(x)?;
        self.check_state(y)?;
        self.check_state(z)?;
        Ok(self.r_at(x, y, z))
    }

    /// Analytic global bounds when the family provides them:
    /// `(inf c, sup c, inf r on T_set)`.
    fn analytic_bounds(&self) -> Option<(f64, f64, f64)> {
        match &self.coeff {
            CoefficientSpec::AffineSwitching(p) => {
                let mut lo = f64::INFINITY;
                let mut hi: f64 = 0.0;
                for y in 0..self.l {
                    let (a, b) = p.c_range(y);
                    lo = lo.min(a);
                    hi = hi.max(b);
                }
                let k3 = self
                    .channels
                    .iter()
                    .map(|&(i, j)| p.r_lower(i, j))
                    .fold(f64::INFINITY, f64::min);
                Some((lo, hi, k3))
            }
            CoefficientSpec::Custom(_) => None,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize_t_set(l: usize, t_set: &[(usize, usize)]) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::with_capacity(t_set.len());
    for &(i, j) in t_set {
        if i >= l || j >= l {
            return Err(Error::Shape(format!("T_set entry ({i},{j}) out of range for L = {l}")));
        }
        if i == j {
            return Err(Error::Constraint(format!("T_set contains the diagonal pair ({i},{i})")));
        }
        out.push((i, j));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn shape(cond: bool, what: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Shape(what()))
    }
}

fn flatten3(name: &str, v: &[Vec<Vec<f64>>], l: usize, r: usize, c: usize) -> Result<Vec<f64>> {
    shape(v.len() == l, || format!("{name} has {} blocks, expected L = {l}", v.len()))?;
    let mut out = Vec::with_capacity(l * r * c);
    for (y, block) in v.iter().enumerate() {
        shape(block.len() == r, || format!("{name}[{y}] has {} rows, expected {r}", block.len()))?;
        for (i, row) in block.iter().enumerate() {
            shape(row.len() == c, || format!("{name}[{y}][{i}] has {} entries, expected {c}", row.len()))?;
            out.extend_from_slice(row);
        }
    }
    Ok(out)
}

fn flatten2(name: &str, v: &[Vec<f64>], r: usize, c: usize) -> Result<Vec<f64>> {
    shape(v.len() == r, || format!("{name} has {} rows, expected {r}", v.len()))?;
    let mut out = Vec::with_capacity(r * c);
    for (i, row) in v.iter().enumerate() {
        shape(row.len() == c, || format!("{name}[{i}] has {} entries, expected {c}", row.len()))?;
        out.extend_from_slice(row);
    }
    Ok(out)
}

/// Builds a model from its config, enforcing every family constraint.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    let (d, m, l) = (config.d, config.m, config.l);
    if d == 0 || m == 0 || l == 0 {
        return Err(Error::Shape("d, m and L must be positive".into()));
    }
    let p = &config.params;
    let b_mat = match &p.b_mat {
        Some(b) => flatten3("B", b, l, d, d)?,
        None => vec![0.0; l * d * d],
    };
    let beta = flatten2("beta", &p.beta, l, d)?;
    let a_mat = flatten3("A", &p.a_mat, l, d, m)?;
    shape(p.c0.len() == l, || format!("c0 has {} entries, expected L = {l}", p.c0.len()))?;
    let c0 = p.c0.clone();
    let c1 = match &p.c1 {
        Some(c) => {
            shape(c.len() == l, || format!("c1 has {} entries, expected L = {l}", c.len()))?;
            c.clone()
        }
        None => vec![0.0; l],
    };
    let w = match &p.w {
        Some(w) => flatten2("w", w, l, d)?,
        None => vec![0.0; l * d],
    };
    let r0 = flatten2("r0", &p.r0, l, l)?;
    let r1 = match &p.r1 {
        Some(r) => flatten2("r1", r, l, l)?,
        None => vec![0.0; l * l],
    };
    let v = match &p.v {
        Some(v) => {
            shape(v.len() == d, || format!("v has {} entries, expected d = {d}", v.len()))?;
            v.clone()
        }
        None => vec![0.0; d],
    };

    let all = [&b_mat, &beta, &a_mat, &c0, &c1, &w, &r0, &r1, &v];
    if all.iter().any(|arr| arr.iter().any(|x| !x.is_finite())) {
        return Err(Error::Constraint("all parameters must be finite".into()));
    }

    for y in 0..l {
        if c0[y] - c1[y].abs() <= 0.0 {
            return Err(Error::Constraint(format!(
                "c positivity violated for state {}: c0 - |c1| = {}",
                y + 1,
                c0[y] - c1[y].abs()
            )));
        }
        let s0: f64 = r0[y * l..(y + 1) * l].iter().sum();
        let s1: f64 = r1[y * l..(y + 1) * l].iter().sum();
        // a lone state has no transitions, so its row is identically zero
        let target = if l == 1 { 0.0 } else { 1.0 };
        if (s0 - target).abs() > STOCHASTIC_TOL || s1.abs() > STOCHASTIC_TOL {
            return Err(Error::Constraint(format!(
                "row-stochasticity violated for state {}: sum r0 = {s0}, sum r1 = {s1}",
                y + 1
            )));
        }
        if r0[y * l + y] != 0.0 || r1[y * l + y] != 0.0 {
            return Err(Error::Constraint(format!(
                "row-stochasticity violated for state {}: r(y,y) must be 0",
                y + 1
            )));
        }
    }

    let channels = match &config.t_set {
        Some(t) => {
            let mut pairs = Vec::with_capacity(t.len());
            for &[i, j] in t {
                if i == 0 || j == 0 {
                    return Err(Error::Shape(format!("T_set entry [{i},{j}] is not 1-based")));
                }
                pairs.push((i - 1, j - 1));
            }
            normalize_t_set(l, &pairs)?
        }
        None => {
            let mut pairs = Vec::new();
            for i in 0..l {
                for j in 0..l {
                    if i != j && r0[i * l + j] > 0.0 {
                        pairs.push((i, j));
                    }
                }
            }
            pairs
        }
    };
    let in_t = |i: usize, j: usize| channels.binary_search(&(i, j)).is_ok();
    let modulated = v.iter().any(|&x| x != 0.0);
    for i in 0..l {
        for j in 0..l {
            let k = i * l + j;
            if in_t(i, j) {
                let lower = if modulated { r0[k] - r1[k].abs() } else { r0[k] };
                if lower <= 0.0 {
                    return Err(Error::Constraint(format!(
                        "transition lower bound violated on ({},{}): r0 - |r1| = {lower}",
                        i + 1,
                        j + 1
                    )));
                }
            } else if i != j && (r0[k] != 0.0 || r1[k] != 0.0) {
                return Err(Error::Constraint(format!(
                    "r is nonzero on ({},{}) which is not in T_set",
                    i + 1,
                    j + 1
                )));
            }
        }
    }

    let family = AffineSwitching {
        d,
        m,
        l,
        b_mat,
        beta,
        a_mat,
        c0,
        c1,
        w,
        r0,
        r1,
        v,
    };
    let c_sup = (0..l).map(|y| family.c_range(y).1).fold(0.0, f64::max);
    Ok(Model::assemble(
        d,
        m,
        l,
        channels,
        CoefficientSpec::AffineSwitching(family),
        Some(config.clone()),
        c_sup,
    ))
}

/// Compact box and sample budget for numerical constant estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
}

impl ProbeSpec {
    pub fn cube(d: usize, half_width: f64, samples: usize) -> Self {
        ProbeSpec {
            lo: vec![-half_width; d],
            hi: vec![half_width; d],
            samples,
            seed: 0x5eed,
        }
    }

    /// Bounding box of `points` inflated by `margin` on every side.
    pub fn around<'a>(points: impl IntoIterator<Item = &'a [f64]>, margin: f64, samples: usize) -> Self {
        let mut lo: Vec<f64> = Vec::new();
        let mut hi: Vec<f64> = Vec::new();
        for p in points {
            if lo.is_empty() {
                lo = p.to_vec();
                hi = p.to_vec();
            }
            for (k, &v) in p.iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        for k in 0..lo.len() {
            lo[k] -= margin;
            hi[k] += margin;
        }
        ProbeSpec {
            lo,
            hi,
            samples,
            seed: 0x5eed,
        }
    }

    pub(crate) fn points(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut pts = Vec::with_capacity(self.samples + 1);
        pts.push(self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect());
        for _ in 0..self.samples {
            pts.push(
                self.lo
                    .iter()
                    .zip(&self.hi)
                    .map(|(&a, &b)| if b > a { rng.random_range(a..b) } else { a })
                    .collect(),
            );
        }
        pts
    }
}

/// Bounds and constants of the standing assumptions. Lipschitz-type entries
/// (`kappa1`, `kappa2`, `d_lip`) and `alpha` are sampled estimates on a probe
/// box, not certificates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBounds {
    pub varsigma_bar: f64,
    pub zeta: f64,
    pub varsigma_low: f64,
    pub kappa1: f64,
    /// Lipschitz estimate of `x -> c_i(x) r_ij(x)`, i.e. of the jump sets.
    pub kappa2: f64,
    pub kappa3: f64,
    pub d_lip: f64,
    pub alpha: f64,
    /// Smallest stationary probability seen over the probe points.
    pub nu_low: f64,
}

impl ModelBounds {
    /// Lower bound of the jump-set lengths on `T_set`.
    pub fn r_low(&self) -> f64 {
        self.varsigma_low * self.kappa3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub bounds: ModelBounds,
    pub checks: Vec<AssumptionCheck>,
    pub probe: ProbeSpec,
    pub lipschitz_constants_are_estimates: bool,
}

impl ValidationReport {
    pub fn failures(&self) -> impl Iterator<Item = &AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Checks the standing assumptions on a probe box and estimates the model
/// constants. Failures are reported, never raised.
pub fn validate_model(model: &Model, probe: &ProbeSpec) -> ValidationReport {
    let l = model.n_states();
    let (d, m) = (model.d(), model.m());
    let mut pts = probe.points();
    pts.retain(|p| p.len() == d);
    if pts.is_empty() {
        pts.push(vec![0.0; d]);
    }

    let mut finite = true;
    let mut stoch_err: f64 = 0.0;
    let mut diag_err: f64 = 0.0;
    let mut c_lo = f64::INFINITY;
    let mut c_hi: f64 = 0.0;
    let mut r_lo = f64::INFINITY;
    let mut alpha = f64::INFINITY;
    let mut kappa1: f64 = 0.0;
    let mut nu_low = f64::INFINITY;
    let mut b = vec![0.0; d];
    let mut a = vec![0.0; d * m];

    for x in &pts {
        for y in 0..l {
            let c = model.c_at(x, y);
            model.b_into(x, y, &mut b);
            model.a_into(x, y, &mut a);
            finite &= c.is_finite() && b.iter().chain(&a).all(|v| v.is_finite());
            c_lo = c_lo.min(c);
            c_hi = c_hi.max(c);
            let growth = (norm(&b) + norm(&a)) / (1.0 + norm(x));
            kappa1 = kappa1.max(growth);
            let mut row = 0.0;
            for z in 0..l {
                let r = model.r_at(x, y, z);
                finite &= r.is_finite();
                row += r;
                if model.channel_index(y, z).is_some() {
                    r_lo = r_lo.min(r);
                }
            }
            stoch_err = stoch_err.max((row - 1.0).abs());
            diag_err = diag_err.max(model.r_at(x, y, y).abs());
        }
        alpha = alpha.min(fastchain::irreducibility_alpha(model, x));
        match fastchain::stationary(&fastchain::generator(model, x)) {
            Ok(nu) => nu_low = nu_low.min(nu.iter().cloned().fold(f64::INFINITY, f64::min)),
            Err(_) => nu_low = 0.0,
        }
    }
    if l == 1 {
        // a single state has no transitions; every row condition is vacuous
        stoch_err = 0.0;
        r_lo = 1.0;
        alpha = 1.0;
    }

    let (varsigma_low, varsigma_bar, kappa3) = match model.analytic_bounds() {
        Some((lo, hi, k3)) => (lo, hi, if model.n_channels() == 0 { 1.0 } else { k3 }),
        None => (c_lo, c_hi.max(model.c_sup()), r_lo),
    };

    let (d_lip, kappa2) = lipschitz_estimates(model, &pts, probe);

    let irreducible = adjacency_irreducible(model);
    let mut checks = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| {
        checks.push(AssumptionCheck {
            name: name.to_string(),
            passed,
            detail,
        })
    };
    push("coefficients finite", finite, "all sampled coefficient values finite".into());
    push(
        "r row-stochastic",
        stoch_err <= 1e-12 && diag_err == 0.0,
        format!("max |sum_y' r - 1| = {stoch_err:e}, max |r(x,y,y)| = {diag_err:e}"),
    );
    push(
        "c bounded and positive",
        varsigma_low > 0.0 && varsigma_bar.is_finite() && c_hi <= model.c_sup() * (1.0 + 1e-12),
        format!("inf c = {varsigma_low}, sup c = {varsigma_bar}, declared bound {}", model.c_sup()),
    );
    push("kappa3 positive", kappa3 > 0.0, format!("kappa3 = {kappa3}"));
    push(
        "adjacency irreducible",
        irreducible,
        if irreducible {
            "T_set is strongly connected".into()
        } else {
            "adjacency not irreducible".into()
        },
    );
    push("alpha positive", alpha > 0.0, format!("alpha (probe minimum) = {alpha}"));

    let passed = checks.iter().all(|c| c.passed);
    ValidationReport {
        passed,
        bounds: ModelBounds {
            varsigma_bar,
            zeta: varsigma_bar + 1.0,
            varsigma_low,
            kappa1,
            kappa2,
            kappa3,
            d_lip,
            alpha,
            nu_low: if nu_low.is_finite() { nu_low } else { 0.0 },
        },
        checks,
        probe: probe.clone(),
        lipschitz_constants_are_estimates: true,
    }
}

/// Max sampled difference quotients: `(d_lip, kappa2)`.
fn lipschitz_estimates(model: &Model, pts: &[Vec<f64>], probe: &ProbeSpec) -> (f64, f64) {
    let d = model.d();
    let l = model.n_states();
    let diam = probe
        .lo
        .iter()
        .zip(&probe.hi)
        .map(|(a, b)| (b - a).powi(2))
        .sum::<f64>()
        .sqrt()
        .max(1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed ^ 0x9e37_79b9);

    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for w in pts.windows(2) {
        pairs.push((w[0].clone(), w[1].clone()));
    }
    for p in pts {
        let dir: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = norm(&dir).max(1e-12);
        let step = 1e-4 * diam;
        let q: Vec<f64> = p.iter().zip(&dir).map(|(a, u)| a + step * u / n).collect();
        pairs.push((p.clone(), q));
    }

    let m = model.m();
    let (mut b1, mut b2) = (vec![0.0; d], vec![0.0; d]);
    let (mut a1, mut a2) = (vec![0.0; d * m], vec![0.0; d * m]);
    let mut d_lip: f64 = 0.0;
    let mut kappa2: f64 = 0.0;
    for (x, xp) in &pairs {
        let dx = x.iter().zip(xp).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dx == 0.0 {
            continue;
        }
        for y in 0..l {
            model.b_into(x, y, &mut b1);
            model.b_into(xp, y, &mut b2);
            model.a_into(x, y, &mut a1);
            model.a_into(xp, y, &mut a2);
            let base = (model.c_at(x, y) - model.c_at(xp, y)).abs() + diff_norm(&a1, &a2) + diff_norm(&b1, &b2);
            let r_max = (0..l)
                .map(|z| (model.r_at(x, y, z) - model.r_at(xp, y, z)).abs())
                .fold(0.0, f64::max);
            d_lip = d_lip.max((base + r_max) / dx);
        }
        for k in 0..model.n_channels() {
            kappa2 = kappa2.max((model.rho_at(x, k) - model.rho_at(xp, k)).abs() / dx);
        }
    }
    (d_lip, kappa2)
}

fn adjacency_irreducible(model: &Model) -> bool {
    let l = model.n_states();
    let mut adj = vec![false; l * l];
    for &(i, j) in model.channels() {
        adj[i * l + j] = true;
    }
    crate::linalg::strongly_connected_classes(&adj, l).len() == 1
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}
