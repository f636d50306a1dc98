//! Ready-made instances used by tests, benchmarks and the examples in the
//! README. All have `d = m = 1` unless noted.

use rand::Rng;

use crate::model::{build_model, AffineParams, Family, Model, ModelConfig};

fn config(
    l: usize,
    b_mat: Option<Vec<f64>>,
    beta: Vec<f64>,
    a: Vec<f64>,
    c0: Vec<f64>,
    r0: Vec<Vec<f64>>,
) -> ModelConfig {
    ModelConfig {
        d: 1,
        m: 1,
        l,
        family: Family::AffineSwitching,
        params: AffineParams {
            b_mat: b_mat.map(|b| b.into_iter().map(|v| vec![vec![v]]).collect()),
            beta: beta.into_iter().map(|v| vec![v]).collect(),
            a_mat: a.into_iter().map(|v| vec![vec![v]]).collect(),
            c0,
            c1: None,
            w: None,
            r0,
            r1: None,
            v: None,
        },
        t_set: None,
    }
}

fn swap() -> Vec<Vec<f64>> {
    vec![vec![0.0, 1.0], vec![1.0, 0.0]]
}

/// Two states, `b = (1, -1)`, `a = 0`, `c = (1, 1)`, `r` the swap.
pub fn two_state_constant_config() -> ModelConfig {
    config(2, None, vec![1.0, -1.0], vec![0.0, 0.0], vec![1.0, 1.0], swap())
}

pub fn two_state_constant() -> Model {
    build_model(&two_state_constant_config()).expect("valid fixture")
}

/// [`two_state_constant`] with intensities `c`.
pub fn two_state_rates(c: [f64; 2]) -> Model {
    let mut cfg = two_state_constant_config();
    cfg.params.c0 = c.to_vec();
    build_model(&cfg).expect("valid fixture")
}

/// Degenerate diffusion (`a = 0`) with `b = (1, -1)`, `c = 1` and the swap
/// kernel: velocities in `(-1, 1)` are produced by the fast chain alone.
pub fn degenerate_two_state() -> Model {
    two_state_constant()
}

/// Frozen slow variable (`b = a = 0`) with two states and intensities `c`.
pub fn frozen_two_state(c: [f64; 2]) -> Model {
    let cfg = config(2, None, vec![0.0, 0.0], vec![0.0, 0.0], c.to_vec(), swap());
    build_model(&cfg).expect("valid fixture")
}

/// Three states on the complete graph, `r = 1/2` off the diagonal.
pub fn three_state_complete(c: [f64; 3]) -> Model {
    let r0 = (0..3)
        .map(|i| (0..3).map(|j| if i == j { 0.0 } else { 0.5 }).collect())
        .collect();
    build_model(&config(3, None, vec![0.0; 3], vec![0.0; 3], c.to_vec(), r0)).expect("valid fixture")
}

/// Three states on the directed cycle `1 -> 2 -> 3 -> 1`, `c = 1`.
pub fn three_state_cycle() -> Model {
    let r0 = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]];
    build_model(&config(3, None, vec![0.0; 3], vec![0.0; 3], vec![1.0; 3], r0)).expect("valid fixture")
}

/// Builds, but state 1 is transient: `1 -> 2`, `2 <-> 3`.
pub fn reducible_three_state() -> Model {
    let r0 = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]];
    build_model(&config(3, None, vec![0.0; 3], vec![0.0; 3], vec![1.0; 3], r0)).expect("valid fixture")
}

/// One fast state with `b(x) = b_coef x + beta` and `a = a`.
pub fn single_state(b_coef: f64, beta: f64, a: f64) -> Model {
    let cfg = config(1, Some(vec![b_coef]), vec![beta], vec![a], vec![1.0], vec![vec![0.0]]);
    build_model(&cfg).expect("valid fixture")
}

/// `dX = sqrt(eps) dW`.
pub fn gaussian() -> Model {
    single_state(0.0, 0.0, 1.0)
}

/// Two states with state-dependent drift, non-degenerate noise and
/// `x`-modulated intensities.
pub fn reference_two_state_config() -> ModelConfig {
    let mut cfg = config(
        2,
        Some(vec![-1.0, -0.5]),
        vec![1.0, -1.0],
        vec![0.5, 0.8],
        vec![2.0, 1.0],
        swap(),
    );
    cfg.params.c1 = Some(vec![0.5, 0.3]);
    cfg.params.w = Some(vec![vec![1.0], vec![-1.0]]);
    cfg
}

pub fn reference_two_state() -> Model {
    build_model(&reference_two_state_config()).expect("valid fixture")
}

/// A random valid affine-switching config with `l` states in dimension
/// `d x m`. The transition graph always contains the cycle `1 -> ... -> l`,
/// so it is irreducible; further edges are added with probability 1/2.
pub fn random_affine_config<R: Rng>(rng: &mut R, l: usize, d: usize, m: usize) -> ModelConfig {
    let mut normal = || rng.random_range(-1.0..1.0);
    let b_mat: Vec<Vec<Vec<f64>>> = (0..l)
        .map(|_| {
            (0..d)
                .map(|i| (0..d).map(|j| if i == j { -1.0 + 0.3 * normal() } else { 0.2 * normal() }).collect())
                .collect()
        })
        .collect();
    let beta = (0..l).map(|_| (0..d).map(|_| 2.0 * normal()).collect()).collect();
    let a_mat = (0..l)
        .map(|_| (0..d).map(|_| (0..m).map(|_| normal()).collect()).collect())
        .collect();
    let w: Vec<Vec<f64>> = (0..l).map(|_| (0..d).map(|_| normal()).collect()).collect();
    let v: Vec<f64> = (0..d).map(|_| normal()).collect();
    let mut c0 = Vec::with_capacity(l);
    let mut c1 = Vec::with_capacity(l);
    for _ in 0..l {
        let base = 1.75 + 1.25 * normal();
        c0.push(base);
        c1.push(0.5 * base * normal());
    }

    let mut r0 = vec![vec![0.0; l]; l];
    let mut r1 = vec![vec![0.0; l]; l];
    if l > 1 {
        for i in 0..l {
            let mut weights = vec![0.0; l];
            for (j, wt) in weights.iter_mut().enumerate() {
                let on_cycle = j == (i + 1) % l;
                if j != i && (on_cycle || normal() > 0.0) {
                    *wt = 0.2 + (normal() + 1.0);
                }
            }
            let total: f64 = weights.iter().sum();
            for j in 0..l {
                r0[i][j] = weights[j] / total;
            }
            // zero-sum modulation, small enough to keep r0 - |r1| > 0
            let s: Vec<f64> = (0..l).map(|_| normal()).collect();
            let mean: f64 = (0..l).map(|j| r0[i][j] * s[j]).sum();
            for j in 0..l {
                r1[i][j] = 0.2 * r0[i][j] * (s[j] - mean);
            }
        }
    }

    ModelConfig {
        d,
        m,
        l,
        family: Family::AffineSwitching,
        params: AffineParams {
            b_mat: Some(b_mat),
            beta,
            a_mat,
            c0,
            c1: Some(c1),
            w: Some(w),
            r0,
            r1: Some(r1),
            v: Some(v),
        },
        t_set: None,
    }
}

pub fn random_affine_model<R: Rng>(rng: &mut R, l: usize, d: usize, m: usize) -> Model {
    build_model(&random_affine_config(rng, l, d, m)).expect("random fixture satisfies constraints")
}
