//! Dense nonlinear algebraic solvers for the cycle pressure systems: a
//! Powell hybrid root finder (dogleg trust region over a Broyden-updated
//! finite-difference Jacobian), a bound-projected Levenberg-Marquardt
//! least-squares solver, and the weighted RMS norm used for integrator
//! error control. Small systems only; everything is dense.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Unknown count above which [`solve_auto`] switches from the Powell hybrid
/// to bounded least squares.
pub const POWELL_MAX_DIM: usize = 10;

#[derive(Debug, Clone)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::contract("bound vectors differ in length"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| l >= u) {
            return Err(Error::contract("each lower bound must be below its upper bound"));
        }
        Ok(Bounds { lower, upper })
    }

    fn project(&self, x: &mut [f64]) {
        for ((v, &l), &u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(l, u);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .all(|((v, &l), &u)| (l..=u).contains(v))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_evals: usize,
    /// Typical variable magnitude, floors the finite-difference step.
    pub fd_scale: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-10, max_evals: 500, fd_scale: 1e5 }
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub x: Vec<f64>,
    /// Infinity norm of the residual at `x`.
    pub residual_norm: f64,
    pub evaluations: usize,
    /// For root solves: the residual criterion held. For least squares the
    /// gradient stationarity criterion also counts.
    pub converged: bool,
    pub method: &'static str,
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct EvalCounter<'a, F> {
    f: &'a mut F,
    count: usize,
    budget: usize,
}

impl<'a, F> EvalCounter<'a, F>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    fn eval(&mut self, x: &DVector<f64>, m: usize) -> Result<Option<DVector<f64>>> {
        if self.count >= self.budget {
            return Ok(None);
        }
        self.count += 1;
        let mut r = vec![0.0; m];
        (self.f)(x.as_slice(), &mut r)?;
        Ok(Some(DVector::from_vec(r)))
    }
}

/// One-sided difference Jacobian with per-column steps scaled to the
/// variable. Probes flip to the backward direction rather than leave the
/// feasible box.
fn fd_jacobian<F>(
    ev: &mut EvalCounter<'_, F>,
    x: &DVector<f64>,
    r0: &DVector<f64>,
    fd_scale: f64,
    bounds: Option<&Bounds>,
) -> Result<Option<DMatrix<f64>>>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let n = x.len();
    let m = r0.len();
    let mut j = DMatrix::zeros(m, n);
    let sqrt_eps = f64::EPSILON.sqrt();
    for c in 0..n {
        let mut h = sqrt_eps * x[c].abs().max(fd_scale);
        if let Some(b) = bounds {
            if x[c] + h > b.upper[c] {
                h = -h;
            }
        }
        let mut xp = x.clone();
        xp[c] += h;
        let rp = match ev.eval(&xp, m)? {
            Some(r) => r,
            None => return Ok(None),
        };
        for row in 0..m {
            j[(row, c)] = (rp[row] - r0[row]) / h;
        }
    }
    Ok(Some(j))
}

/// Powell hybrid method for square systems: dogleg steps on a trust region,
/// Broyden rank-one Jacobian updates on accepted steps, finite-difference
/// refresh after two consecutive rejections or a failed linear solve.
pub fn powell_hybrid<F>(
    mut f: F,
    guess: &[f64],
    opts: &SolverOptions,
) -> Result<SolveReport>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let n = guess.len();
    if n == 0 {
        return Err(Error::contract("empty unknown vector"));
    }
    let mut ev = EvalCounter { f: &mut f, count: 0, budget: opts.max_evals };
    let mut x = DVector::from_column_slice(guess);
    let mut r = ev
        .eval(&x, n)?
        .ok_or_else(|| Error::Solve("evaluation budget smaller than one call".into()))?;
    let mut rnorm = inf_norm(&r);
    let mut best = (x.clone(), rnorm);
    if rnorm <= opts.tol {
        return Ok(SolveReport {
            x: x.as_slice().to_vec(),
            residual_norm: rnorm,
            evaluations: ev.count,
            converged: true,
            method: "powell",
        });
    }

    let mut jac = match fd_jacobian(&mut ev, &x, &r, opts.fd_scale, None)? {
        Some(j) => j,
        None => {
            return Ok(SolveReport {
                x: best.0.as_slice().to_vec(),
                residual_norm: best.1,
                evaluations: ev.count,
                converged: false,
                method: "powell",
            })
        }
    };
    let mut fresh_jacobian = true;
    let mut delta = (0.1 * x.norm()).max(1.0);
    let mut rejections = 0usize;

    loop {
        // Newton and Cauchy ingredients for the dogleg path.
        let grad = jac.transpose() * &r;
        let gnorm = grad.norm();
        let newton = jac.clone().lu().solve(&(-&r));
        let step = match (&newton, gnorm > 0.0) {
            (Some(pn), _) if pn.norm() <= delta => pn.clone(),
            (maybe_pn, true) => {
                let jg = &jac * &grad;
                let jg2 = jg.norm_squared();
                if jg2 == 0.0 {
                    // Gradient direction is in the Jacobian null space.
                    match refresh_or_fail(&mut ev, &x, &r, opts, &mut jac, &mut fresh_jacobian)? {
                        Refresh::Refreshed => continue,
                        Refresh::Exhausted => break,
                        Refresh::Singular => {
                            return Err(Error::Solve(
                                "singular model after jacobian refresh".into(),
                            ))
                        }
                    }
                }
                let alpha = grad.norm_squared() / jg2;
                let cauchy = -&grad * alpha;
                let cnorm = cauchy.norm();
                if cnorm >= delta {
                    -&grad * (delta / gnorm)
                } else if let Some(pn) = maybe_pn {
                    // Walk from the Cauchy point toward the Newton point
                    // until the trust boundary.
                    let d = pn - &cauchy;
                    let a = d.norm_squared();
                    let b = 2.0 * cauchy.dot(&d);
                    let c = cnorm * cnorm - delta * delta;
                    let tau = (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a);
                    &cauchy + d * tau.clamp(0.0, 1.0)
                } else {
                    cauchy
                }
            }
            _ => {
                match refresh_or_fail(&mut ev, &x, &r, opts, &mut jac, &mut fresh_jacobian)? {
                    Refresh::Refreshed => continue,
                    Refresh::Exhausted => break,
                    Refresh::Singular => {
                        return Err(Error::Solve(
                            "singular model after jacobian refresh".into(),
                        ))
                    }
                }
            }
        };

        let xt = &x + &step;
        let rt = match ev.eval(&xt, n)? {
            Some(v) => v,
            None => break,
        };
        let pred = r.norm_squared() - (&r + &jac * &step).norm_squared();
        let actual = r.norm_squared() - rt.norm_squared();
        let rho = if pred > 0.0 { actual / pred } else { -1.0 };

        if rho > 1e-4 {
            // Broyden update before moving on.
            let dr = &rt - &r;
            let denom = step.norm_squared();
            if denom > 0.0 {
                let corr = (dr - &jac * &step) * (step.transpose() / denom);
                jac += corr;
                fresh_jacobian = false;
            }
            x = xt;
            r = rt;
            rnorm = inf_norm(&r);
            if rnorm < best.1 {
                best = (x.clone(), rnorm);
            }
            rejections = 0;
            if rho > 0.75 && step.norm() > 0.8 * delta {
                delta *= 2.0;
            }
            if rnorm <= opts.tol {
                return Ok(SolveReport {
                    x: x.as_slice().to_vec(),
                    residual_norm: rnorm,
                    evaluations: ev.count,
                    converged: true,
                    method: "powell",
                });
            }
        } else {
            delta *= 0.25;
            rejections += 1;
            if rejections >= 2 {
                rejections = 0;
                match refresh_or_fail(&mut ev, &x, &r, opts, &mut jac, &mut fresh_jacobian)? {
                    Refresh::Refreshed => {}
                    Refresh::Exhausted => break,
                    Refresh::Singular => break,
                }
            }
        }
        if delta < 1e-14 * (1.0 + x.norm()) {
            break;
        }
    }

    Ok(SolveReport {
        x: best.0.as_slice().to_vec(),
        residual_norm: best.1,
        evaluations: ev.count,
        converged: best.1 <= opts.tol,
        method: "powell",
    })
}

enum Refresh {
    Refreshed,
    Exhausted,
    /// The model stayed rank-deficient after a fresh finite-difference
    /// Jacobian; the caller decides whether that is fatal.
    Singular,
}

fn refresh_or_fail<F>(
    ev: &mut EvalCounter<'_, F>,
    x: &DVector<f64>,
    r: &DVector<f64>,
    opts: &SolverOptions,
    jac: &mut DMatrix<f64>,
    fresh: &mut bool,
) -> Result<Refresh>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    if *fresh {
        return Ok(Refresh::Singular);
    }
    match fd_jacobian(ev, x, r, opts.fd_scale, None)? {
        Some(j) => {
            *jac = j;
            *fresh = true;
            Ok(Refresh::Refreshed)
        }
        None => Ok(Refresh::Exhausted),
    }
}

/// Levenberg-Marquardt with multiplicative damping and bound projection of
/// every trial iterate. Accepts rectangular systems (m residuals over n
/// unknowns, m >= n).
pub fn bounded_least_squares<F>(
    mut f: F,
    guess: &[f64],
    m: usize,
    bounds: Option<&Bounds>,
    opts: &SolverOptions,
) -> Result<SolveReport>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let n = guess.len();
    if n == 0 || m < n {
        return Err(Error::contract("least squares needs m >= n >= 1"));
    }
    if let Some(b) = bounds {
        if b.lower.len() != n {
            return Err(Error::contract("bound length differs from unknown count"));
        }
    }
    let mut ev = EvalCounter { f: &mut f, count: 0, budget: opts.max_evals };
    let mut x = DVector::from_column_slice(guess);
    if let Some(b) = bounds {
        b.project(x.as_mut_slice());
    }
    let mut r = ev
        .eval(&x, m)?
        .ok_or_else(|| Error::Solve("evaluation budget smaller than one call".into()))?;
    let mut rnorm = inf_norm(&r);
    let report = |x: &DVector<f64>, rnorm: f64, evals: usize, converged: bool| SolveReport {
        x: x.as_slice().to_vec(),
        residual_norm: rnorm,
        evaluations: evals,
        converged,
        method: "lm",
    };
    if rnorm <= opts.tol {
        return Ok(report(&x, rnorm, ev.count, true));
    }

    let mut lambda = 1e-3;
    let mut jac = match fd_jacobian(&mut ev, &x, &r, opts.fd_scale, bounds)? {
        Some(j) => j,
        None => return Ok(report(&x, rnorm, ev.count, false)),
    };

    loop {
        let grad = jac.transpose() * &r;
        if inf_norm(&grad) <= opts.tol {
            return Ok(report(&x, rnorm, ev.count, true));
        }
        let jtj = jac.transpose() * &jac;
        let mut damped = jtj.clone();
        for i in 0..n {
            let d = jtj[(i, i)].max(1e-12);
            damped[(i, i)] += lambda * d;
        }
        let step = match damped.cholesky() {
            Some(ch) => ch.solve(&(-&grad)),
            None => {
                lambda = (lambda * 10.0).min(1e12);
                if lambda >= 1e12 {
                    return Ok(report(&x, rnorm, ev.count, false));
                }
                continue;
            }
        };
        let mut xt = &x + &step;
        if let Some(b) = bounds {
            b.project(xt.as_mut_slice());
        }
        let taken = &xt - &x;
        let rt = match ev.eval(&xt, m)? {
            Some(v) => v,
            None => return Ok(report(&x, rnorm, ev.count, false)),
        };
        if rt.norm_squared() < r.norm_squared() {
            x = xt;
            r = rt;
            rnorm = inf_norm(&r);
            lambda = (lambda * 0.1).max(1e-12);
            if rnorm <= opts.tol || taken.norm() <= opts.tol {
                return Ok(report(&x, rnorm, ev.count, true));
            }
            jac = match fd_jacobian(&mut ev, &x, &r, opts.fd_scale, bounds)? {
                Some(j) => j,
                None => return Ok(report(&x, rnorm, ev.count, false)),
            };
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                return Ok(report(&x, rnorm, ev.count, false));
            }
        }
    }
}

/// Size-based dispatch used by the system steppers: Powell hybrid for small
/// pressure systems, bounded least squares above [`POWELL_MAX_DIM`] unknowns
/// or whenever bounds must be honored strictly.
pub fn solve_auto<F>(
    f: F,
    guess: &[f64],
    bounds: Option<&Bounds>,
    opts: &SolverOptions,
) -> Result<SolveReport>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let n = guess.len();
    if n > POWELL_MAX_DIM {
        bounded_least_squares(f, guess, n, bounds, opts)
    } else {
        powell_hybrid(f, guess, opts)
    }
}

/// Error norm weighted per component by rtol |y_ref| + atol.
pub fn wrms_norm(v: &[f64], y_ref: &[f64], atol: f64, rtol: f64) -> f64 {
    debug_assert_eq!(v.len(), y_ref.len());
    debug_assert!(atol > 0.0 && rtol > 0.0);
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    let sum: f64 = v
        .iter()
        .zip(y_ref)
        .map(|(vi, yi)| {
            let w = rtol * yi.abs() + atol;
            let s = vi / w;
            s * s
        })
        .sum();
    (sum / n as f64).sqrt()
}
