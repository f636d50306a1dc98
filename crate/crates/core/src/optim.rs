//! Derivative-free and quasi-Newton minimizers for small, possibly partially
//! infeasible problems. Objectives return `None` outside their domain; that
//! sentinel is the only representation of infinity the searches see.

/// Outcome of a minimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

/// Central differences with step `h (1 + |x_k|)`, falling back to a one-sided
/// difference when one neighbour is infeasible. `None` if both are.
pub fn fd_gradient(f: &impl Fn(&[f64]) -> Option<f64>, x: &[f64], fx: f64, h: f64) -> Option<Vec<f64>> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for k in 0..x.len() {
        let step = h * (1.0 + x[k].abs());
        probe[k] = x[k] + step;
        let fp = f(&probe);
        probe[k] = x[k] - step;
        let fm = f(&probe);
        probe[k] = x[k];
        g[k] = match (fp, fm) {
            (Some(p), Some(m)) => (p - m) / (2.0 * step),
            (Some(p), None) => (p - fx) / step,
            (None, Some(m)) => (fx - m) / step,
            (None, None) => return None,
        };
    }
    Some(g)
}

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Stop when an accepted step improves the value by less than this.
    pub f_tol: f64,
    pub fd_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 200,
            grad_tol: 1e-9,
            f_tol: 1e-15,
            fd_step: 1e-6,
        }
    }
}

/// BFGS with finite-difference gradients and a backtracking Armijo search.
/// `x0` must be feasible.
pub fn bfgs(f: impl Fn(&[f64]) -> Option<f64>, x0: &[f64], opts: BfgsOptions) -> Option<Minimum> {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x)?;
    if n == 0 {
        return Some(Minimum {
            x,
            value: fx,
            iterations: 0,
            grad_norm: 0.0,
            converged: true,
        });
    }
    let mut g = fd_gradient(&f, &x, fx, opts.fd_step)?;
    let mut hinv = identity(n);
    let mut iterations = 0;
    let mut converged = false;
    let mut stalls = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let gn = norm(&g);
        if gn <= opts.grad_tol * (1.0 + fx.abs()) {
            converged = true;
            break;
        }
        let mut dir: Vec<f64> = mat_vec(&hinv, &g).iter().map(|v| -v).collect();
        let mut slope = dot(&dir, &g);
        if slope >= 0.0 {
            // lost descent; restart from steepest descent
            hinv = identity(n);
            dir = g.iter().map(|v| -v).collect();
            slope = -gn * gn;
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
            if let Some(ft) = f(&trial) {
                if ft <= fx + 1e-4 * t * slope {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            if hinv == identity(n) {
                break;
            }
            hinv = identity(n);
            continue;
        };
        let Some(gnew) = fd_gradient(&f, &xn, fnew, opts.fd_step) else {
            x = xn;
            fx = fnew;
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-14 * norm(&s) * norm(&y) {
            bfgs_update(&mut hinv, &s, &y, sy);
        }
        let improvement = fx - fnew;
        x = xn;
        fx = fnew;
        g = gnew;
        if improvement <= opts.f_tol * (1.0 + fx.abs()) {
            stalls += 1;
            if stalls >= 3 {
                converged = true;
                break;
            }
        } else {
            stalls = 0;
        }
    }
    Some(Minimum {
        grad_norm: norm(&g),
        x,
        value: fx,
        iterations,
        converged,
    })
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy = mat_vec(h, y);
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += (1.0 + rho * yhy) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Stop once the simplex value spread drops below this.
    pub f_tol: f64,
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            max_evals: 4000,
            f_tol: 1e-12,
            initial_step: 0.1,
        }
    }
}

/// Nelder-Mead with standard coefficients. Infeasible points rank last.
pub fn nelder_mead(f: impl Fn(&[f64]) -> Option<f64>, x0: &[f64], opts: NelderMeadOptions) -> Option<Minimum> {
    let n = x0.len();
    let eval = |x: &[f64]| f(x).unwrap_or(f64::INFINITY);
    let f0 = f(x0)?;
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(x0.to_vec(), f0)];
    for k in 0..n {
        let mut p = x0.to_vec();
        p[k] += opts.initial_step * (1.0 + x0[k].abs());
        let v = eval(&p);
        simplex.push((p, v));
    }
    let mut evals = n + 1;
    let mut iterations = 0;
    let mut converged = false;
    while evals < opts.max_evals {
        iterations += 1;
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[n].1);
        if worst.is_finite() && (worst - best).abs() <= opts.f_tol * (1.0 + best.abs()) {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|k| simplex[..n].iter().map(|p| p.0[k]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };
        let xr = along(-1.0);
        let fr = eval(&xr);
        evals += 1;
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = eval(&xe);
            evals += 1;
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let xc = along(-0.5);
                let fc = eval(&xc);
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = eval(&xc);
                (xc, fc)
            };
            evals += 1;
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for p in simplex.iter_mut().skip(1) {
                    for k in 0..n {
                        p.0[k] = x_best[k] + 0.5 * (p.0[k] - x_best[k]);
                    }
                    p.1 = eval(&p.0);
                }
                evals += n;
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    Some(Minimum {
        x,
        value,
        iterations,
        grad_norm: f64::NAN,
        converged,
    })
}

/// Golden-section search for a unimodal function on `[a, b]`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Option<f64> {
        Some((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2))
    }

    #[test]
    fn bfgs_finds_rosenbrock_minimum() {
        let m = bfgs(rosenbrock, &[-1.2, 1.0], BfgsOptions::default()).unwrap();
        assert!((m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] - 1.0).abs() < 1e-4, "{m:?}");
    }

    #[test]
    fn bfgs_respects_infeasible_region() {
        // minimum of (x-2)^2 restricted to x < 1 approaches the boundary
        let f = |x: &[f64]| if x[0] < 1.0 { Some((x[0] - 2.0).powi(2)) } else { None };
        let m = bfgs(f, &[0.0], BfgsOptions::default()).unwrap();
        assert!(m.x[0] < 1.0 && m.x[0] > 0.99, "{m:?}");
    }

    #[test]
    fn nelder_mead_quadratic() {
        let f = |x: &[f64]| Some((x[0] - 0.3).powi(2) + 2.0 * (x[1] + 0.7).powi(2));
        let m = nelder_mead(f, &[0.0, 0.0], NelderMeadOptions::default()).unwrap();
        assert!((m.x[0] - 0.3).abs() < 1e-5 && (m.x[1] + 0.7).abs() < 1e-5, "{m:?}");
    }

    #[test]
    fn golden_section_on_shifted_parabola() {
        let (x, fx) = golden_section(|t| (t - 1.25).powi(2) + 3.0, 0.0, 4.0, 1e-10);
        // the value is flat to rounding within sqrt(eps) of the minimizer
        assert!((x - 1.25).abs() < 1e-7);
        assert!((fx - 3.0).abs() < 1e-15);
    }

    #[test]
    fn fd_gradient_one_sided_at_edge() {
        let f = |x: &[f64]| if x[0] >= 0.0 { Some(x[0] * x[0] + x[0]) } else { None };
        let g = fd_gradient(&f, &[0.0], 0.0, 1e-7).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-6);
    }
}
