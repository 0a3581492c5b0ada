//! Unconstrained minimization: limited-memory BFGS with a strong-Wolfe line
//! search, a central-difference gradient checker, and a quadratic-penalty
//! driver for equality constraints.

use std::collections::VecDeque;

use crate::error::{M3Error, Result};

/// Function value and gradient at a point.
pub trait Objective {
    /// Returns f(x) and writes the gradient into `grad` (same length as `x`).
    fn evaluate(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

impl<F> Objective for F
where
    F: Fn(&[f64], &mut [f64]) -> f64,
{
    fn evaluate(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self(x, grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Stop when the relative decrease of f in one iteration falls below
    /// this. Zero disables the test.
    pub f_rel_tol: f64,
    /// Scale of the first trial step.
    pub initial_step: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 1000,
            grad_tol: 1e-6,
            c1: 1e-4,
            c2: 0.9,
            f_rel_tol: 0.0,
            initial_step: 1.0,
            max_line_search: 40,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(M3Error::InvalidParameter(format!(
                "line search constants need 0 < c1 < c2 < 1, got c1={} c2={}",
                self.c1, self.c2
            )));
        }
        if self.memory == 0 {
            return Err(M3Error::InvalidParameter("L-BFGS memory must be at least 1".into()));
        }
        if !(self.initial_step > 0.0) {
            return Err(M3Error::InvalidParameter("initial step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbfgsStatus {
    Converged,
    FunctionTolerance,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iters: usize,
    pub evaluations: usize,
    pub status: LbfgsStatus,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Counted<'a, O: ?Sized> {
    f: &'a O,
    evals: usize,
}

impl<O: Objective + ?Sized> Counted<'_, O> {
    fn eval(&mut self, x: &[f64], g: &mut [f64]) -> f64 {
        self.evals += 1;
        let v = self.f.evaluate(x, g);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    }
}

/// Minimizes `f` from `x0`. Accepted iterates never raise f by more than
/// `1e-12 |f|`. `LineSearchFailed` means no trial point along the search
/// direction (or along steepest descent) lowered f.
pub fn lbfgs_minimize<O: Objective + ?Sized>(f: &O, x0: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsResult> {
    cfg.validate()?;
    let n = x0.len();
    let mut obj = Counted { f, evals: 0 };
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = obj.eval(&x, &mut g);
    if !fx.is_finite() {
        return Err(M3Error::InvalidParameter("objective is not finite at the start point".into()));
    }
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut iters = 0;
    let mut gnorm = norm(&g);
    let mut d = vec![0.0; n];
    let mut alpha_buf = vec![0.0; cfg.memory];

    let status = loop {
        if gnorm <= cfg.grad_tol {
            break LbfgsStatus::Converged;
        }
        if iters >= cfg.max_iters {
            break LbfgsStatus::MaxIterations;
        }

        // two-loop recursion
        d.iter_mut().zip(&g).for_each(|(di, gi)| *di = -gi);
        for (k, (s, y, rho)) in pairs.iter().enumerate().rev() {
            let a = rho * dot(s, &d);
            alpha_buf[k] = a;
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= a * yi);
        }
        if let Some((s, y, _)) = pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|di| *di *= gamma);
        }
        for (k, (s, y, rho)) in pairs.iter().enumerate() {
            let b = rho * dot(y, &d);
            let a = alpha_buf[k];
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (a - b) * si);
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            pairs.clear();
            d.iter_mut().zip(&g).for_each(|(di, gi)| *di = -gi);
            slope = -gnorm * gnorm;
        }
        let step0 = if pairs.is_empty() {
            cfg.initial_step * (1.0 / norm(&d)).min(1.0)
        } else {
            cfg.initial_step
        };

        let ls = strong_wolfe(&mut obj, &x, fx, slope, &d, step0, cfg);
        let (step, f_new, g_new) = match ls {
            LineSearch::Wolfe { step, f, g } | LineSearch::Decrease { step, f, g } => (step, f, g),
            // a stale curvature pair can point where f is flat to rounding;
            // retry once from steepest descent before giving up
            LineSearch::Failed if !pairs.is_empty() => {
                pairs.clear();
                continue;
            }
            LineSearch::Failed => break LbfgsStatus::LineSearchFailed,
        };

        let s: Vec<f64> = d.iter().map(|di| step * di).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm(&s) * norm(&y) {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back((s.clone(), y, 1.0 / sy));
        }
        x.iter_mut().zip(&s).for_each(|(xi, si)| *xi += si);
        let f_old = fx;
        fx = f_new;
        g = g_new;
        gnorm = norm(&g);
        iters += 1;

        if cfg.f_rel_tol > 0.0 && (f_old - fx).abs() <= cfg.f_rel_tol * f_old.abs().max(fx.abs()).max(1.0) {
            if gnorm <= cfg.grad_tol {
                break LbfgsStatus::Converged;
            }
            break LbfgsStatus::FunctionTolerance;
        }
    };

    Ok(LbfgsResult {
        x,
        f: fx,
        grad_norm: gnorm,
        iters,
        evaluations: obj.evals,
        status,
    })
}

/// Relative size of f differences treated as rounding noise in the line
/// search.
const APPROX_WOLFE_REL: f64 = 1e-12;

enum LineSearch {
    Wolfe { step: f64, f: f64, g: Vec<f64> },
    /// Sufficient decrease without the curvature condition; returned when the
    /// search budget ran out. The step is still taken.
    Decrease { step: f64, f: f64, g: Vec<f64> },
    Failed,
}

struct Trial {
    step: f64,
    f: f64,
    slope: f64,
    g: Vec<f64>,
}

fn strong_wolfe<O: Objective + ?Sized>(
    obj: &mut Counted<'_, O>,
    x: &[f64],
    f0: f64,
    slope0: f64,
    d: &[f64],
    step0: f64,
    cfg: &LbfgsConfig,
) -> LineSearch {
    let n = x.len();
    let mut xt = vec![0.0; n];
    let mut eval = |step: f64, obj: &mut Counted<'_, O>| -> Trial {
        xt.iter_mut()
            .zip(x.iter().zip(d))
            .for_each(|(t, (xi, di))| *t = xi + step * di);
        let mut g = vec![0.0; n];
        let f = obj.eval(&xt, &mut g);
        let slope = if f.is_finite() { dot(&g, d) } else { f64::NAN };
        Trial { step, f, slope, g }
    };
    // Near a minimum f changes by less than its rounding error, so the
    // Armijo test alone stalls. Also accept the approximate Wolfe condition:
    // no increase of f beyond rounding and a slope test that implies
    // sufficient decrease for a quadratic model.
    let f_slack = APPROX_WOLFE_REL * f0.abs();
    let armijo = |t: &Trial| {
        t.f <= f0 + cfg.c1 * t.step * slope0 || (t.f <= f0 + f_slack && t.slope <= (2.0 * cfg.c1 - 1.0) * slope0)
    };
    let curvature = |t: &Trial| t.slope.abs() <= -cfg.c2 * slope0;
    // `t` is no better than `u`; differences inside the slack are rounding
    // noise and the slope signs decide instead
    let no_better = |t: &Trial, u: &Trial| t.f >= u.f && t.f - u.f > f_slack;

    let mut prev = Trial {
        step: 0.0,
        f: f0,
        slope: slope0,
        g: Vec::new(),
    };
    let mut step = step0;
    let mut budget = cfg.max_line_search;
    let mut first = true;
    let (mut lo, mut hi) = loop {
        if budget == 0 {
            return LineSearch::Failed;
        }
        budget -= 1;
        let t = eval(step, obj);
        if !armijo(&t) || (!first && no_better(&t, &prev)) {
            break (prev, t);
        }
        if curvature(&t) {
            return LineSearch::Wolfe {
                step: t.step,
                f: t.f,
                g: t.g,
            };
        }
        if t.slope >= 0.0 {
            break (t, prev);
        }
        first = false;
        step = t.step * 2.0;
        prev = t;
    };

    // zoom: `lo` satisfies sufficient decrease and has the lowest value seen
    while budget > 0 {
        budget -= 1;
        let (a, b) = (lo.step, hi.step);
        let width = (b - a).abs();
        if width <= 1e-16 * a.abs().max(b.abs()).max(1e-300) {
            break;
        }
        let mut cand = cubic_min(&lo, &hi);
        let (left, right) = (a.min(b), a.max(b));
        let margin = 0.1 * width;
        if !cand.is_finite() || cand < left + margin || cand > right - margin {
            cand = 0.5 * (a + b);
        }
        let t = eval(cand, obj);
        if !armijo(&t) || no_better(&t, &lo) {
            hi = t;
        } else {
            if curvature(&t) {
                return LineSearch::Wolfe {
                    step: t.step,
                    f: t.f,
                    g: t.g,
                };
            }
            if t.slope * (hi.step - lo.step) >= 0.0 {
                hi = lo;
            }
            lo = t;
        }
    }
    if lo.step > 0.0 && lo.f < f0 {
        LineSearch::Decrease {
            step: lo.step,
            f: lo.f,
            g: lo.g,
        }
    } else {
        LineSearch::Failed
    }
}

fn cubic_min(p: &Trial, q: &Trial) -> f64 {
    if !(p.f.is_finite() && q.f.is_finite() && p.slope.is_finite() && q.slope.is_finite()) {
        return f64::NAN;
    }
    let d1 = p.slope + q.slope - 3.0 * (p.f - q.f) / (p.step - q.step);
    let disc = d1 * d1 - p.slope * q.slope;
    if disc < 0.0 {
        return f64::NAN;
    }
    let d2 = (q.step - p.step).signum() * disc.sqrt();
    q.step - (q.step - p.step) * (q.slope + d2 - d1) / (q.slope - p.slope + 2.0 * d2)
}

/// Largest per-coordinate discrepancy between the analytic gradient and a
/// central difference with step `h`, relative to `max(1, |analytic|)`.
pub fn grad_check<O: Objective + ?Sized>(f: &O, x: &[f64], h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(M3Error::InvalidParameter("finite-difference step must be positive".into()));
    }
    let n = x.len();
    let mut g = vec![0.0; n];
    f.evaluate(x, &mut g);
    let mut scratch = vec![0.0; n];
    let mut xp = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        xp[i] = x[i] + h;
        let fp = f.evaluate(&xp, &mut scratch);
        xp[i] = x[i] - h;
        let fm = f.evaluate(&xp, &mut scratch);
        xp[i] = x[i];
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max((fd - g[i]).abs() / g[i].abs().max(1.0));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltySchedule {
    pub init: f64,
    pub growth: f64,
    pub cap: f64,
    pub max_rounds: usize,
    pub feas_tol: f64,
}

impl Default for PenaltySchedule {
    fn default() -> Self {
        Self {
            init: 1.0,
            growth: 10.0,
            cap: 1e8,
            max_rounds: 8,
            feas_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PenaltyResult {
    pub x: Vec<f64>,
    /// Penalty weights after the last round (carry these into a warm restart).
    pub penalties: Vec<f64>,
    pub rounds: usize,
    pub feasible: bool,
    pub max_residual: f64,
    /// Max-norm residual after each round.
    pub residual_history: Vec<f64>,
    /// Inner solves that ended in a line-search failure after one restart.
    pub line_search_failures: usize,
}

/// Quadratic-penalty loop. Each round minimizes `build(penalties)` from the
/// previous solution, then multiplies the weight of every constraint whose
/// residual exceeds `feas_tol` by `growth` (capped at `cap`).
///
/// `penalties` holds one weight per constraint; pass `None` to start all of
/// them at `schedule.init`.
pub fn penalty_loop<B, O, R>(
    build: B,
    residuals: R,
    x0: &[f64],
    penalties: Option<Vec<f64>>,
    schedule: &PenaltySchedule,
    lbfgs: &LbfgsConfig,
) -> Result<PenaltyResult>
where
    B: Fn(&[f64]) -> O,
    O: Objective,
    R: Fn(&[f64]) -> Vec<f64>,
{
    if !(schedule.growth > 1.0) {
        return Err(M3Error::InvalidParameter("penalty growth must exceed 1".into()));
    }
    if schedule.max_rounds == 0 {
        return Err(M3Error::InvalidParameter("penalty loop needs at least one round".into()));
    }
    let m = residuals(x0).len();
    let mut penalties = penalties.unwrap_or_else(|| vec![schedule.init; m]);
    if penalties.len() != m {
        return Err(M3Error::Dimension {
            expected: m,
            got: penalties.len(),
        });
    }
    let mut x = x0.to_vec();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut history = Vec::new();
    let mut failures = 0;
    let mut rounds = 0;
    while rounds < schedule.max_rounds {
        rounds += 1;
        let objective = build(&penalties);
        let mut cfg = *lbfgs;
        let mut res = lbfgs_minimize(&objective, &x, &cfg)?;
        if res.status == LbfgsStatus::LineSearchFailed {
            cfg.initial_step *= 0.5;
            res = lbfgs_minimize(&objective, &res.x, &cfg)?;
            if res.status == LbfgsStatus::LineSearchFailed {
                failures += 1;
            }
        }
        x = res.x;
        let r = residuals(&x);
        let worst = r.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        history.push(worst);
        if best.as_ref().map_or(true, |(b, _)| worst <= *b) {
            best = Some((worst, x.clone()));
        }
        if worst <= schedule.feas_tol {
            break;
        }
        for (p, ri) in penalties.iter_mut().zip(&r) {
            if ri.abs() > schedule.feas_tol {
                *p = (*p * schedule.growth).min(schedule.cap);
            }
        }
    }
    let (max_residual, x) = best.expect("at least one round ran");
    Ok(PenaltyResult {
        x,
        penalties,
        rounds,
        feasible: max_residual <= schedule.feas_tol,
        max_residual,
        residual_history: history,
        line_search_failures: failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn shifted_quadratic_in_few_iterations() {
        let a = [3.0, -1.0, 0.5, 7.0];
        let f = |x: &[f64], g: &mut [f64]| {
            let mut v = 0.0;
            for i in 0..x.len() {
                g[i] = 2.0 * (x[i] - a[i]);
                v += (x[i] - a[i]).powi(2);
            }
            v
        };
        let r = lbfgs_minimize(&f, &[0.0; 4], &LbfgsConfig::default()).unwrap();
        assert!(r.iters <= 3, "{} iterations", r.iters);
        for i in 0..4 {
            assert!((r.x[i] - a[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn rosenbrock_from_classic_start() {
        let cfg = LbfgsConfig {
            grad_tol: 1e-10,
            ..Default::default()
        };
        let r = lbfgs_minimize(&rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{:?}", r);
    }

    #[test]
    fn iterates_never_increase_f() {
        // run one iteration at a time through max_iters
        let mut x = vec![-1.2, 1.0];
        let mut last = f64::INFINITY;
        let mut g = [0.0; 2];
        for k in 1..60 {
            let cfg = LbfgsConfig {
                max_iters: k,
                ..Default::default()
            };
            let r = lbfgs_minimize(&rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
            assert!(r.f <= last + APPROX_WOLFE_REL * last.abs() + 1e-15);
            last = r.f;
            x = r.x;
        }
        assert!(rosenbrock(&x, &mut g) < 1e-6);
    }

    #[test]
    fn bad_constants_rejected() {
        let cfg = LbfgsConfig {
            c1: 0.9,
            c2: 0.1,
            ..Default::default()
        };
        assert!(lbfgs_minimize(&rosenbrock, &[0.0, 0.0], &cfg).is_err());
        let cfg = LbfgsConfig {
            memory: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn deterministic_iterates() {
        let cfg = LbfgsConfig::default();
        let a = lbfgs_minimize(&rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        let b = lbfgs_minimize(&rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.evaluations, b.evaluations);
    }

    #[test]
    fn grad_check_quadratic_and_negative_control() {
        let good = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * x[0] + x[1];
            g[1] = x[0] + 6.0 * x[1];
            x[0] * x[0] + x[0] * x[1] + 3.0 * x[1] * x[1]
        };
        assert!(grad_check(&good, &[0.7, -1.3], 1e-5).unwrap() < 1e-9);
        let bad = |x: &[f64], g: &mut [f64]| {
            let v = good(x, g);
            g[1] *= 2.0;
            v
        };
        assert!(grad_check(&bad, &[0.7, -1.3], 1e-5).unwrap() > 0.4);
        assert!(grad_check(&good, &[0.0, 0.0], 0.0).is_err());
    }

    fn equality_penalty(lambda: f64) -> impl Fn(&[f64], &mut [f64]) -> f64 {
        move |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * x[0] + 2.0 * lambda * (x[0] - 1.0);
            x[0] * x[0] + lambda * (x[0] - 1.0).powi(2)
        }
    }

    #[test]
    fn penalty_loop_closed_form_rounds() {
        let schedule = PenaltySchedule::default();
        let r = penalty_loop(
            |p: &[f64]| equality_penalty(p[0]),
            |x: &[f64]| vec![x[0] - 1.0],
            &[0.0],
            None,
            &schedule,
            &LbfgsConfig {
                grad_tol: 1e-12,
                ..Default::default()
            },
        )
        .unwrap();
        // round r solves to x = lambda / (1 + lambda), residual 1 / (1 + lambda)
        for (k, res) in r.residual_history.iter().enumerate() {
            let lambda = 10f64.powi(k as i32);
            assert!((res - 1.0 / (1.0 + lambda)).abs() < 1e-9, "round {k}: {res}");
        }
        assert!(r.feasible);
        assert!((r.x[0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn feasible_start_needs_one_round() {
        let r = penalty_loop(
            |p: &[f64]| {
                let l = p[0];
                move |x: &[f64], g: &mut [f64]| {
                    g[0] = 2.0 * (x[0] - 1.0) + 2.0 * l * (x[0] - 1.0);
                    (x[0] - 1.0).powi(2) + l * (x[0] - 1.0).powi(2)
                }
            },
            |x: &[f64]| vec![x[0] - 1.0],
            &[1.0],
            None,
            &PenaltySchedule::default(),
            &LbfgsConfig::default(),
        )
        .unwrap();
        assert_eq!(r.rounds, 1);
        assert_eq!(r.penalties, vec![1.0]);
    }

    #[test]
    fn penalty_growth_must_exceed_one() {
        let s = PenaltySchedule {
            growth: 1.0,
            ..Default::default()
        };
        assert!(penalty_loop(
            |p: &[f64]| equality_penalty(p[0]),
            |x: &[f64]| vec![x[0] - 1.0],
            &[0.0],
            None,
            &s,
            &LbfgsConfig::default()
        )
        .is_err());
    }
}
