//! Variable-order, variable-step BDF integration of index-1 DAE systems
//! F(t, y, dy/dt) = 0.
//!
//! History is kept as raw past solutions at their own times and the BDF
//! derivative is built from Lagrange differentiation weights, so nonuniform
//! steps are handled exactly rather than through step-doubling tricks. Two
//! Jacobian policies share the engine: IDA-mode keeps the factored Newton
//! matrix until the order changes, the step drifts by more than a factor of
//! 1.3, or Newton degrades; DASSL-mode reassembles whenever the step or
//! order differs from the values at assembly. Output handling differs too:
//! IDA-mode interpolates dense output at requested times, DASSL-mode
//! records internal steps gated by a minimum spacing.

use nalgebra::{DMatrix, DVector, LU};

use crate::error::{Error, Result};
use crate::nonlinear::wrms_norm;

pub const MAX_ORDER: usize = 5;
const MAX_NEWTON_ITERS: usize = 4;
const NEWTON_ACCEPT: f64 = 0.33;
const SAFETY: f64 = 0.9;
const GROWTH_MIN: f64 = 0.2;
const GROWTH_MAX: f64 = 2.5;
/// IDA-mode keeps a factored matrix while h stays within this factor of the
/// step it was assembled at.
const IDA_H_DRIFT: f64 = 1.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DaeMode {
    Ida,
    Dassl,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DaeConfig {
    pub mode: DaeMode,
    pub tol: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub h_max: f64,
    /// DASSL-mode records a point only after this much time has elapsed
    /// since the previous record.
    pub dassl_min_output_dt: f64,
    /// DASSL-mode aborts one integrate call after this many internal steps.
    pub dassl_max_steps: usize,
}

impl Default for DaeConfig {
    fn default() -> Self {
        DaeConfig {
            mode: DaeMode::Ida,
            tol: 1e-6,
            h_init: 1e-3,
            h_min: 1e-10,
            h_max: 10.0,
            dassl_min_output_dt: 0.0,
            dassl_max_steps: 100_000,
        }
    }
}

/// Residual problem with a consistent initial condition.
pub struct DaeProblem<F> {
    pub residual: F,
    pub t0: f64,
    pub y0: Vec<f64>,
    pub ydot0: Vec<f64>,
}

/// Wraps an explicit right-hand side f as the residual dy/dt - f(t, y) and
/// derives the consistent initial derivative by evaluating f once.
pub fn problem_from_rhs<G>(
    mut rhs: G,
    t0: f64,
    y0: Vec<f64>,
) -> Result<DaeProblem<impl FnMut(f64, &[f64], &[f64], &mut [f64]) -> Result<()>>>
where
    G: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let n = y0.len();
    let mut ydot0 = vec![0.0; n];
    rhs(t0, &y0, &mut ydot0)?;
    let mut scratch = vec![0.0; n];
    let residual = move |t: f64, y: &[f64], ydot: &[f64], out: &mut [f64]| {
        rhs(t, y, &mut scratch)?;
        for i in 0..out.len() {
            out[i] = ydot[i] - scratch[i];
        }
        Ok(())
    };
    Ok(DaeProblem { residual, t0, y0, ydot0 })
}

/// Derivative weights of the Lagrange interpolant through `nodes`, taken at
/// `at`. Exact for polynomials up to degree nodes.len() - 1.
fn lagrange_deriv_weights(nodes: &[f64], at: f64) -> Vec<f64> {
    let n = nodes.len();
    let mut w = vec![0.0; n];
    for j in 0..n {
        let mut denom = 1.0;
        for m in 0..n {
            if m != j {
                denom *= nodes[j] - nodes[m];
            }
        }
        let mut acc = 0.0;
        for i in 0..n {
            if i == j {
                continue;
            }
            let mut prod = 1.0;
            for m in 0..n {
                if m != j && m != i {
                    prod *= at - nodes[m];
                }
            }
            acc += prod;
        }
        w[j] = acc / denom;
    }
    w
}

/// Value weights of the Lagrange interpolant through `nodes` at `at`.
fn lagrange_value_weights(nodes: &[f64], at: f64) -> Vec<f64> {
    let n = nodes.len();
    let mut w = vec![1.0; n];
    for j in 0..n {
        for m in 0..n {
            if m != j {
                w[j] *= (at - nodes[m]) / (nodes[j] - nodes[m]);
            }
        }
    }
    w
}

/// Uniform-grid BDF derivative coefficients: dy/dt at the newest point is
/// (1/h) sum alpha_i y_{n-i}.
pub fn bdf_coefficients(k: usize) -> Result<Vec<f64>> {
    if !(1..=MAX_ORDER).contains(&k) {
        return Err(Error::contract(format!("bdf order {k} outside 1..=5")));
    }
    let nodes: Vec<f64> = (0..=k).map(|i| -(i as f64)).collect();
    Ok(lagrange_deriv_weights(&nodes, 0.0))
}

/// Step growth factor from a local error estimate at order k, before step
/// bounds are applied.
pub fn step_growth(est: f64, k: usize) -> f64 {
    let raw = if est > 0.0 {
        SAFETY * est.powf(-1.0 / (k + 1) as f64)
    } else {
        GROWTH_MAX
    };
    raw.clamp(GROWTH_MIN, GROWTH_MAX)
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct StepDiag {
    pub t: f64,
    pub h: f64,
    pub order: usize,
    pub newton_iters: usize,
    pub jacobian_age: usize,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Recorded output points (mode-dependent policy).
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Every accepted internal step with its solution.
    pub internal: Vec<(StepDiag, Vec<f64>)>,
    pub rejected_steps: usize,
    pub newton_failures: usize,
    pub jacobian_assemblies: usize,
    /// Metadata of a hard failure; the fields above hold the partial run.
    pub failure: Option<String>,
}

impl Trajectory {
    fn new() -> Self {
        Trajectory {
            times: Vec::new(),
            states: Vec::new(),
            internal: Vec::new(),
            rejected_steps: 0,
            newton_failures: 0,
            jacobian_assemblies: 0,
            failure: None,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let n = self.internal.first().map_or(0, |(_, y)| y.len());
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("y{i}")));
        header.extend(
            ["h_used", "order", "newton_iters", "jacobian_age"].map(str::to_string),
        );
        w.write_record(&header)?;
        for (d, y) in &self.internal {
            let mut row = vec![format!("{:.10e}", d.t)];
            row.extend(y.iter().map(|v| format!("{v:.10e}")));
            row.push(format!("{:.6e}", d.h));
            row.push(d.order.to_string());
            row.push(d.newton_iters.to_string());
            row.push(d.jacobian_age.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Cubic Hermite interpolation between two nodes with known derivatives.
fn hermite(
    t: f64,
    t0: f64,
    y0: &[f64],
    yd0: &[f64],
    t1: f64,
    y1: &[f64],
    yd1: &[f64],
) -> Vec<f64> {
    let h = t1 - t0;
    let s = ((t - t0) / h).clamp(0.0, 1.0);
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    (0..y0.len())
        .map(|i| h00 * y0[i] + h * h10 * yd0[i] + h01 * y1[i] + h * h11 * yd1[i])
        .collect()
}

struct Engine<'a, F> {
    residual: &'a mut F,
    cfg: &'a DaeConfig,
    n: usize,
    /// Newest first.
    hist_t: Vec<f64>,
    hist_y: Vec<Vec<f64>>,
    /// BDF derivative at the newest accepted point.
    ydot: Vec<f64>,
    k: usize,
    h: f64,
    steps_at_order: usize,
    lu: Option<LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    jac_h: f64,
    jac_k: usize,
    jac_age: usize,
    newton_failed: bool,
    traj: Trajectory,
}

struct StepOutcome {
    t_prev: f64,
    y_prev: Vec<f64>,
    ydot_prev: Vec<f64>,
}

impl<'a, F> Engine<'a, F>
where
    F: FnMut(f64, &[f64], &[f64], &mut [f64]) -> Result<()>,
{
    fn new(problem: &'a mut DaeProblem<F>, cfg: &'a DaeConfig) -> Result<Self> {
        let n = problem.y0.len();
        if n == 0 || problem.ydot0.len() != n {
            return Err(Error::contract("state and derivative lengths differ or are empty"));
        }
        if cfg.h_min > cfg.h_max || cfg.tol <= 0.0 {
            return Err(Error::contract("invalid integrator configuration"));
        }
        let mut r = vec![0.0; n];
        (problem.residual)(problem.t0, &problem.y0, &problem.ydot0, &mut r)?;
        let consistency = wrms_norm(&r, &problem.y0, cfg.tol, cfg.tol);
        if consistency > 1.0 {
            return Err(Error::contract(format!(
                "initial condition is inconsistent: residual wrms {consistency:.3e}"
            )));
        }
        Ok(Engine {
            residual: &mut problem.residual,
            cfg,
            n,
            hist_t: vec![problem.t0],
            hist_y: vec![problem.y0.clone()],
            ydot: problem.ydot0.clone(),
            k: 1,
            h: cfg.h_init.clamp(cfg.h_min, cfg.h_max),
            steps_at_order: 0,
            lu: None,
            jac_h: 0.0,
            jac_k: 0,
            jac_age: 0,
            newton_failed: false,
            traj: Trajectory::new(),
        })
    }

    fn t(&self) -> f64 {
        self.hist_t[0]
    }

    fn y(&self) -> &[f64] {
        &self.hist_y[0]
    }

    /// Extrapolates the newest `points` history entries to `at`.
    fn predict(&self, points: usize, at: f64) -> Vec<f64> {
        let p = points.min(self.hist_t.len());
        let w = lagrange_value_weights(&self.hist_t[..p], at);
        let mut out = vec![0.0; self.n];
        for (wj, yj) in w.iter().zip(&self.hist_y[..p]) {
            for (o, v) in out.iter_mut().zip(yj) {
                *o += wj * v;
            }
        }
        out
    }

    fn assemble_jacobian(
        &mut self,
        t_next: f64,
        y: &[f64],
        c0: f64,
        beta: &[f64],
        g0: &[f64],
    ) -> Result<bool> {
        let mut m = DMatrix::zeros(self.n, self.n);
        let sqrt_eps = f64::EPSILON.sqrt();
        let mut yp = y.to_vec();
        let mut ydp = vec![0.0; self.n];
        let mut g = vec![0.0; self.n];
        for c in 0..self.n {
            let del = sqrt_eps * yp[c].abs().max(100.0 * self.cfg.tol);
            let saved = yp[c];
            yp[c] += del;
            for i in 0..self.n {
                ydp[i] = c0 * yp[i] + beta[i];
            }
            (self.residual)(t_next, &yp, &ydp, &mut g)?;
            for r in 0..self.n {
                m[(r, c)] = (g[r] - g0[r]) / del;
            }
            yp[c] = saved;
        }
        let lu = m.lu();
        if lu.determinant().abs() == 0.0 {
            return Ok(false);
        }
        self.lu = Some(lu);
        self.jac_h = self.h;
        self.jac_k = self.k;
        self.jac_age = 0;
        self.traj.jacobian_assemblies += 1;
        Ok(true)
    }

    fn jacobian_current(&self) -> bool {
        if self.lu.is_none() || self.newton_failed {
            return false;
        }
        match self.cfg.mode {
            DaeMode::Dassl => self.jac_h == self.h && self.jac_k == self.k,
            DaeMode::Ida => {
                let ratio = self.h / self.jac_h;
                self.jac_k == self.k && (1.0 / IDA_H_DRIFT..=IDA_H_DRIFT).contains(&ratio)
            }
        }
    }

    /// One Newton solve of F(t, y, c0 y + beta) = 0 from the predictor.
    /// Returns the solution and iteration count, or None on non-convergence.
    fn newton(
        &mut self,
        t_next: f64,
        y_pred: &[f64],
        c0: f64,
        beta: &[f64],
    ) -> Result<Option<(Vec<f64>, usize)>> {
        let mut y = y_pred.to_vec();
        let mut yd = vec![0.0; self.n];
        let mut g = vec![0.0; self.n];
        for i in 0..self.n {
            yd[i] = c0 * y[i] + beta[i];
        }
        (self.residual)(t_next, &y, &yd, &mut g)?;
        let g0_scale = 1.0 + g.iter().fold(0.0f64, |m, v| m.max(v.abs()));

        if !self.jacobian_current() {
            if !self.assemble_jacobian(t_next, &y, c0, beta, &g)? {
                return Ok(None);
            }
            self.newton_failed = false;
        }

        for iter in 1..=MAX_NEWTON_ITERS {
            let rhs = DVector::from_iterator(self.n, g.iter().map(|v| -v));
            let delta = match self.lu.as_ref().and_then(|lu| lu.solve(&rhs)) {
                Some(d) => d,
                None => return Ok(None),
            };
            for i in 0..self.n {
                y[i] += delta[i];
            }
            if !y.iter().all(|v| v.is_finite()) {
                return Ok(None);
            }
            let update = wrms_norm(delta.as_slice(), y_pred, self.cfg.tol, self.cfg.tol);
            if update < NEWTON_ACCEPT {
                return Ok(Some((y, iter)));
            }
            for i in 0..self.n {
                yd[i] = c0 * y[i] + beta[i];
            }
            (self.residual)(t_next, &y, &yd, &mut g)?;
            let gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if gnorm <= 1e-14 * g0_scale {
                return Ok(Some((y, iter)));
            }
        }
        Ok(None)
    }

    /// Attempts steps (rejecting and shrinking as needed) until one is
    /// accepted, then commits it. Returns the pre-step node for dense
    /// output. A hard failure is recorded in the trajectory and returned as
    /// None.
    fn advance(&mut self, t_limit: Option<f64>) -> Result<Option<StepOutcome>> {
        loop {
            let mut t_next = self.t() + self.h;
            if let Some(limit) = t_limit {
                let remaining = limit - self.t();
                if remaining <= 0.0 {
                    return Err(Error::contract("advance called past the time limit"));
                }
                if self.h >= remaining {
                    // Land on the limit exactly.
                    self.h = remaining;
                    t_next = limit;
                } else if self.h > 0.5 * remaining {
                    // Avoid a sliver step next time.
                    self.h = 0.5 * remaining;
                    t_next = self.t() + self.h;
                }
            }
            let k = self.k.min(self.hist_t.len());
            let nodes: Vec<f64> =
                std::iter::once(t_next).chain(self.hist_t[..k].iter().copied()).collect();
            let c = lagrange_deriv_weights(&nodes, t_next);
            let c0 = c[0];
            let mut beta = vec![0.0; self.n];
            for (cj, yj) in c[1..].iter().zip(&self.hist_y[..k]) {
                for (b, v) in beta.iter_mut().zip(yj) {
                    *b += cj * v;
                }
            }
            let y_pred = self.predict(k + 1, t_next);

            let solved = match self.newton(t_next, &y_pred, c0, &beta) {
                Ok(s) => s,
                Err(e) => {
                    self.traj.failure = Some(format!("residual evaluation failed: {e}"));
                    return Ok(None);
                }
            };
            let (y_new, iters) = match solved {
                Some(v) => v,
                None => {
                    self.traj.newton_failures += 1;
                    if !self.newton_failed && self.lu.is_some() && self.jac_age > 0 {
                        // Retry once with a fresh matrix at the same step.
                        self.newton_failed = true;
                        continue;
                    }
                    self.newton_failed = true;
                    if !self.shrink_after_rejection() {
                        return Ok(None);
                    }
                    continue;
                }
            };
            self.newton_failed = false;

            let diff: Vec<f64> =
                y_new.iter().zip(&y_pred).map(|(a, b)| a - b).collect();
            let est =
                wrms_norm(&diff, &y_pred, self.cfg.tol, self.cfg.tol) / (k + 1) as f64;
            if est > 1.0 {
                self.traj.rejected_steps += 1;
                if !self.shrink_after_rejection() {
                    return Ok(None);
                }
                continue;
            }

            // Commit.
            let outcome = StepOutcome {
                t_prev: self.t(),
                y_prev: self.y().to_vec(),
                ydot_prev: self.ydot.clone(),
            };
            let mut ydot_new = vec![0.0; self.n];
            for i in 0..self.n {
                ydot_new[i] = c0 * y_new[i] + beta[i];
            }
            self.hist_t.insert(0, t_next);
            self.hist_y.insert(0, y_new.clone());
            let keep = MAX_ORDER + 2;
            self.hist_t.truncate(keep);
            self.hist_y.truncate(keep);
            self.ydot = ydot_new;
            self.jac_age += 1;
            self.steps_at_order += 1;
            self.traj.internal.push((
                StepDiag { t: t_next, h: self.h, order: k, newton_iters: iters, jacobian_age: self.jac_age },
                y_new,
            ));
            self.adapt(est, k);
            return Ok(Some(outcome));
        }
    }

    fn shrink_after_rejection(&mut self) -> bool {
        self.h *= 0.5;
        self.steps_at_order = 0;
        if self.h < self.cfg.h_min {
            self.traj.failure = Some(format!(
                "step size {:.3e} fell below h_min {:.3e} at t = {:.6}",
                self.h,
                self.cfg.h_min,
                self.t()
            ));
            return false;
        }
        true
    }

    /// Step and order control after an accepted step at order k.
    fn adapt(&mut self, est_k: f64, k: usize) {
        let mut next_k = k;
        let mut growth = step_growth(est_k, k);
        if self.steps_at_order > k + 1 {
            let t_now = self.t();
            let y_now = self.hist_y[0].clone();
            let consider = |kk: usize, growth: &mut f64, next_k: &mut usize| {
                if kk == 0 || kk > MAX_ORDER || kk + 1 >= self.hist_t.len() {
                    return;
                }
                // Error proxy at order kk: corrector minus the degree-kk
                // extrapolation of the prior history.
                let w = lagrange_value_weights(&self.hist_t[1..kk + 2], t_now);
                let mut pred = vec![0.0; self.n];
                for (wj, yj) in w.iter().zip(&self.hist_y[1..kk + 2]) {
                    for (p, v) in pred.iter_mut().zip(yj) {
                        *p += wj * v;
                    }
                }
                let diff: Vec<f64> =
                    y_now.iter().zip(&pred).map(|(a, b)| a - b).collect();
                let est =
                    wrms_norm(&diff, &pred, self.cfg.tol, self.cfg.tol) / (kk + 1) as f64;
                let g = step_growth(est, kk);
                if g > 1.05 * *growth {
                    *growth = g;
                    *next_k = kk;
                }
            };
            consider(k - 1, &mut growth, &mut next_k);
            consider(k + 1, &mut growth, &mut next_k);
            if next_k != k {
                self.steps_at_order = 0;
            }
        }
        self.k = next_k;
        self.h = (self.h * growth).clamp(self.cfg.h_min, self.cfg.h_max);
    }

    fn into_trajectory(self) -> Trajectory {
        self.traj
    }
}

/// Dense-output integration: internal steps run freely and every requested
/// time is answered by Hermite interpolation over the covering step.
pub fn integrate_ida<F>(
    problem: &mut DaeProblem<F>,
    t_eval: &[f64],
    cfg: &DaeConfig,
) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64], &[f64], &mut [f64]) -> Result<()>,
{
    if t_eval.is_empty() {
        return Err(Error::contract("no evaluation times requested"));
    }
    if t_eval.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract("evaluation times must strictly increase"));
    }
    if t_eval[0] < problem.t0 {
        return Err(Error::contract("evaluation times precede the initial time"));
    }
    let t_end = *t_eval.last().unwrap();
    let mut engine = Engine::new(problem, cfg)?;
    let mut idx = 0;
    while idx < t_eval.len() && t_eval[idx] <= engine.t() {
        engine.traj.times.push(t_eval[idx]);
        engine.traj.states.push(engine.y().to_vec());
        idx += 1;
    }
    while idx < t_eval.len() {
        let out = match engine.advance(Some(t_end))? {
            Some(o) => o,
            None => break,
        };
        while idx < t_eval.len() && t_eval[idx] <= engine.t() {
            let y = hermite(
                t_eval[idx],
                out.t_prev,
                &out.y_prev,
                &out.ydot_prev,
                engine.t(),
                engine.y(),
                &engine.ydot,
            );
            engine.traj.times.push(t_eval[idx]);
            engine.traj.states.push(y);
            idx += 1;
        }
    }
    Ok(engine.into_trajectory())
}

/// Step-gated integration to `t_end`: records the initial point, then each
/// accepted internal step that lands at least `dassl_min_output_dt` after
/// the previous record, and always the final point.
pub fn integrate_dassl<F>(
    problem: &mut DaeProblem<F>,
    t_end: f64,
    cfg: &DaeConfig,
) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64], &[f64], &mut [f64]) -> Result<()>,
{
    if t_end <= problem.t0 {
        return Err(Error::contract("t_end must exceed the initial time"));
    }
    let mut engine = Engine::new(problem, cfg)?;
    engine.traj.times.push(engine.t());
    engine.traj.states.push(engine.y().to_vec());
    let mut last_record = engine.t();
    let mut steps = 0usize;
    while engine.t() < t_end {
        if steps >= cfg.dassl_max_steps {
            engine.traj.failure =
                Some(format!("exceeded {} internal steps", cfg.dassl_max_steps));
            break;
        }
        match engine.advance(Some(t_end))? {
            Some(_) => {}
            None => break,
        }
        steps += 1;
        let t = engine.t();
        if t >= t_end || t - last_record >= cfg.dassl_min_output_dt {
            engine.traj.times.push(t);
            engine.traj.states.push(engine.y().to_vec());
            last_record = t;
        }
    }
    Ok(engine.into_trajectory())
}
