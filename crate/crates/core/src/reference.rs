//! Embedded Runge-Kutta oracles (Dormand-Prince 5(4), Bogacki-Shampine 3(2))
//! on the same hybrid system and event handling as the Taylor integrator,
//! the relative-error metric, and a tolerance-sweep benchmark.

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::hybrid::{evaluate_point, EvalCounters, HybridError, HybridSystem, LoopSolver, TopologyMatrices};
use crate::integrator::{apply_events, integrate, IntegrateError, RunStats, SimulationRun};
use crate::scalar::{norm_inf, Real};
use crate::taylor::TaylorError;
use crate::waveform::{output_grid, Recorder, Waveform};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("signal {0} missing from the reference waveform")]
    UnknownSignal(String),
    #[error("no sample of the simulated waveform lies inside the reference span")]
    NoOverlap,
}

/// Mean over signals of the mean over samples of
/// `|y_sim - y_ref| / max(|y_ref|, abs_tol)`, with the reference linearly
/// interpolated onto the simulated time grid. Samples outside the reference
/// span are skipped.
pub fn relative_error<T: Real>(sim: &Waveform<T>, reference: &Waveform<T>, abs_tol: T) -> Result<T, MetricError> {
    let mut total = T::zero();
    let mut signals = 0usize;
    for (k, name) in sim.names.iter().enumerate() {
        let rk = reference.names.iter().position(|n| n == name).ok_or_else(|| MetricError::UnknownSignal(name.clone()))?;
        let mut sum = T::zero();
        let mut n = 0usize;
        for (i, &t) in sim.time.iter().enumerate() {
            if let Some(r) = reference.interpolate(rk, t) {
                sum += (sim.columns[k][i] - r).abs() / r.abs().max(abs_tol);
                n += 1;
            }
        }
        if n == 0 {
            return Err(MetricError::NoOverlap);
        }
        total += sum / T::from_usize_lossy(n);
        signals += 1;
    }
    if signals == 0 {
        return Ok(T::zero());
    }
    Ok(total / T::from_usize_lossy(signals))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Taylor,
    Dp45,
    Bs23,
}

impl Solver {
    pub fn name(&self) -> &'static str {
        match self {
            Solver::Taylor => "taylor",
            Solver::Dp45 => "dp45",
            Solver::Bs23 => "bs23",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "taylor" | "flexible" => Some(Solver::Taylor),
            "dp45" | "rk45" | "ode45" => Some(Solver::Dp45),
            "bs23" | "rk23" | "ode23" => Some(Solver::Bs23),
            _ => None,
        }
    }

    pub fn run<T: Real>(&self, run: &SimulationRun<T>) -> Result<(Waveform<T>, RunStats), IntegrateError> {
        match self {
            Solver::Taylor => integrate(run),
            Solver::Dp45 => rk45_dp(run),
            Solver::Bs23 => rk23_bs(run),
        }
    }
}

struct Tableau {
    name: &'static str,
    order: usize,
    c: &'static [f64],
    /// Stage coefficients; the last row doubles as the solution weights.
    a: &'static [&'static [f64]],
    /// `b - b_hat`, one entry per stage including the FSAL stage.
    e: &'static [f64],
}

const DP45: Tableau = Tableau {
    name: "dp45",
    order: 5,
    c: &[0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0],
    a: &[
        &[],
        &[1.0 / 5.0],
        &[3.0 / 40.0, 9.0 / 40.0],
        &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
        &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
        &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
        &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ],
    e: &[71.0 / 57600.0, 0.0, -71.0 / 16695.0, 71.0 / 1920.0, -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0],
};

const BS23: Tableau = Tableau {
    name: "bs23",
    order: 3,
    c: &[0.0, 1.0 / 2.0, 3.0 / 4.0, 1.0],
    a: &[&[], &[1.0 / 2.0], &[0.0, 3.0 / 4.0], &[2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0]],
    e: &[-5.0 / 72.0, 1.0 / 12.0, 1.0 / 9.0, -1.0 / 8.0],
};

/// Dense-output weights for the Dormand-Prince pair.
const DP_DENSE: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// Continuous extension of one accepted step.
struct Dense<T> {
    t0: T,
    h: T,
    y0: Vec<T>,
    y1: Vec<T>,
    k_first: Vec<T>,
    k_last: Vec<T>,
    /// Fifth-order correction term for Dormand-Prince, absent for Hermite.
    r5: Option<Vec<T>>,
}

impl<T: Real> Dense<T> {
    fn eval(&self, t: T) -> Vec<T> {
        let th = (t - self.t0) / self.h;
        let one = T::one();
        let th1 = one - th;
        (0..self.y0.len())
            .map(|i| {
                let dy = self.y1[i] - self.y0[i];
                let bspl = self.h * self.k_first[i] - dy;
                match &self.r5 {
                    Some(r5) => {
                        let r4 = dy - self.h * self.k_last[i] - bspl;
                        self.y0[i] + th * (dy + th1 * (bspl + th * (r4 + th1 * r5[i])))
                    }
                    None => {
                        // cubic Hermite through both end values and slopes
                        let r4 = dy - self.h * self.k_last[i] - bspl;
                        self.y0[i] + th * (dy + th1 * (bspl + th * r4))
                    }
                }
            })
            .collect()
    }
}

struct Rhs<'a, T: Real> {
    sys: &'a HybridSystem<T>,
    solver: LoopSolver<T>,
    last_y: Option<Vec<T>>,
    counters: EvalCounters,
}

impl<'a, T: Real> Rhs<'a, T> {
    fn eval(&mut self, mats: &TopologyMatrices<T>, t: T, segment_start: T, x: &[T]) -> Result<Vec<T>, HybridError> {
        let n1 = self.sys.n_pwl();
        let (x1, x_nl) = x.split_at(n1);
        let u1 = self.sys.sources().values(t, segment_start);
        let p = evaluate_point(self.sys, mats, &mut self.solver, t, x1, x_nl, u1, self.last_y.as_deref(), &mut self.counters)?;
        // pure PWL systems never touch f; count each right-hand side instead
        if x_nl.is_empty() {
            self.counters.f += 1;
        }
        self.last_y = Some(p.y);
        let mut dx = p.dx1;
        dx.extend_from_slice(&p.dx_nl);
        Ok(dx)
    }
}

fn error_norm<T: Real>(e: &[T], y0: &[T], y1: &[T], rtol: T, atol: T) -> T {
    if e.is_empty() {
        return T::zero();
    }
    let mut s = T::zero();
    for i in 0..e.len() {
        let sc = atol + rtol * y0[i].abs().max(y1[i].abs());
        let r = e[i] / sc;
        s += r * r;
    }
    (s / T::from_usize_lossy(e.len())).sqrt()
}

fn embedded_rk<T: Real>(run: &SimulationRun<T>, tab: &Tableau) -> Result<(Waveform<T>, RunStats), IntegrateError> {
    run.validate()?;
    let started = Instant::now();
    let sys = &run.system;
    let ctrl = &run.controller;
    let (rtol, atol) = (ctrl.rel_tol, ctrl.abs_tol);
    let mut stats = RunStats::new(tab.name);
    let t_end = run.t_end;
    let lit = T::lit;
    let stages = tab.c.len();
    let expo = T::one() / T::from_usize_lossy(tab.order);
    let (safe, fac_min, fac_max, beta) = (lit(0.9), lit(0.2), lit(10.0), lit(0.04));
    let dp_dense = tab.order == 5;

    let mut state = run.initial.clone();
    let mut cursor = 0usize;
    let x_init = state.stacked();
    apply_events(sys, &run.schedule, &mut cursor, state.t, &mut state.topology, &state.x1, &state.x_nl, &x_init, &mut stats)?;
    let hyb = |t: T| move |e: HybridError| IntegrateError::Hybrid { t: t.to_f64_lossy(), source: e };
    let mut mats = sys.matrices(state.topology).map_err(hyb(state.t))?;
    let mut recorder = Recorder::new(sys, run.signals.clone(), output_grid(state.t, t_end, run.output_period));
    let mut rhs = Rhs { sys, solver: LoopSolver::new(sys.loop_options()), last_y: None, counters: EvalCounters::default() };

    let mut t = state.t;
    let mut x = state.stacked();
    recorder.sample_until(t, t, &mats, |_| x.clone()).map_err(hyb(t))?;
    let mut k1 = rhs.eval(&mats, t, t, &x).map_err(hyb(t))?;

    // starting step from the local derivative scale
    let sc: Vec<T> = x.iter().map(|v| atol + rtol * v.abs()).collect();
    let dn = |v: &[T]| -> T {
        if v.is_empty() {
            return T::zero();
        }
        let s: T = v.iter().zip(&sc).map(|(a, s)| (*a / *s) * (*a / *s)).fold(T::zero(), |acc, z| acc + z);
        (s / T::from_usize_lossy(v.len())).sqrt()
    };
    let (nx, nf) = (dn(&x), dn(&k1));
    let mut h = if nx < lit(1e-5) || nf < lit(1e-5) { lit(1e-6) } else { lit(0.01) * nx / nf };
    h = h.min(ctrl.h_max).min(t_end - t);
    let mut fac_old = lit(1e-4);

    let mut ks: Vec<Vec<T>> = vec![Vec::new(); stages];
    while t < t_end {
        let te = run.schedule.events().get(cursor).map_or(t_end, |e| e.time.min(t_end));
        let h_cap = te - t;
        let mut hit_boundary = false;
        if h >= h_cap {
            h = h_cap;
            hit_boundary = true;
        }
        if h < ctrl.h_min && !hit_boundary {
            return Err(IntegrateError::Step {
                t: t.to_f64_lossy(),
                state_norm: norm_inf(&x).to_f64_lossy(),
                source: TaylorError::StepUnderflow { h: h.to_f64_lossy(), h_min: ctrl.h_min.to_f64_lossy() },
            });
        }

        ks[0] = k1.clone();
        let f_before = rhs.counters.f;
        let mut y1 = Vec::new();
        for s in 1..stages {
            let mut xs = x.clone();
            for (j, &a) in tab.a[s].iter().enumerate() {
                if a != 0.0 {
                    let a = lit(a) * h;
                    for (v, k) in xs.iter_mut().zip(&ks[j]) {
                        *v += a * *k;
                    }
                }
            }
            let ts = if s == stages - 1 { t + h } else { t + lit(tab.c[s]) * h };
            if s == stages - 1 {
                y1 = xs.clone();
            }
            ks[s] = rhs.eval(&mats, ts, t, &xs).map_err(hyb(ts))?;
        }
        let mut err_vec = vec![T::zero(); x.len()];
        for (s, &e) in tab.e.iter().enumerate() {
            if e != 0.0 {
                let e = lit(e) * h;
                for (v, k) in err_vec.iter_mut().zip(&ks[s]) {
                    *v += e * *k;
                }
            }
        }
        let err = error_norm(&err_vec, &x, &y1, rtol, atol);
        let fac11 = if err > T::zero() { err.powf(expo - beta * lit(0.75)) } else { T::zero() };

        if !err.is_finite() || err > T::one() {
            stats.rejected_steps += 1;
            stats.rejected_f_evals += rhs.counters.f - f_before;
            let shrink = if err.is_finite() { (fac11 / safe).min(T::one() / fac_min) } else { T::one() / fac_min };
            h /= shrink.max(T::one());
            continue;
        }

        let t_new = if hit_boundary { te } else { t + h };
        let r5 = dp_dense.then(|| {
            (0..x.len())
                .map(|i| h * DP_DENSE.iter().zip(&ks).fold(T::zero(), |acc, (&d, k)| acc + lit(d) * k[i]))
                .collect::<Vec<T>>()
        });
        let dense = Dense { t0: t, h, y0: x.clone(), y1: y1.clone(), k_first: ks[0].clone(), k_last: ks[stages - 1].clone(), r5 };
        recorder
            .sample_until(t_new, t, &mats, |tau| if tau >= t_new { y1.clone() } else { dense.eval(tau) })
            .map_err(hyb(t_new))?;
        stats.accepted_steps += 1;
        stats.record_order(tab.order);
        stats.step_f_evals.push(rhs.counters.f - f_before);

        let mut fac = fac11 / fac_old.powf(beta);
        fac = (fac / safe).max(T::one() / fac_max).min(T::one() / fac_min);
        let h_next = (h / fac).min(ctrl.h_max);
        fac_old = err.max(lit(1e-4));

        t = t_new;
        x = y1;
        k1 = ks[stages - 1].clone();
        if hit_boundary {
            if t >= t_end {
                break;
            }
            let n1 = sys.n_pwl();
            let (x1, x_nl) = x.split_at(n1);
            let before = state.topology;
            let switched = apply_events(sys, &run.schedule, &mut cursor, t, &mut state.topology, x1, x_nl, &x, &mut stats)?;
            if switched && state.topology != before {
                mats = sys.matrices(state.topology).map_err(hyb(t))?;
                rhs.solver.reset();
                recorder.reset_loop();
            }
            // the derivative is re-evaluated in the new topology and on the new source segment
            let f_before = rhs.counters.f;
            k1 = rhs.eval(&mats, t, t, &x).map_err(hyb(t))?;
            if let Some(last) = stats.step_f_evals.last_mut() {
                *last += rhs.counters.f - f_before;
            }
            h = h_next.max(h);
        } else {
            h = h_next;
        }
    }

    stats.finalize(&rhs.counters, started);
    Ok((recorder.finish(), stats))
}

/// Embedded pair selector for single fixed steps on a plain ODE.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pair {
    Dp45,
    Bs23,
}

impl Pair {
    fn tableau(&self) -> &'static Tableau {
        match self {
            Pair::Dp45 => &DP45,
            Pair::Bs23 => &BS23,
        }
    }

    /// One step of size `h` for `x' = f(t, x)`; returns the propagated
    /// solution and the embedded error estimate.
    pub fn step<T: Real>(&self, mut f: impl FnMut(T, &[T]) -> Vec<T>, t: T, x: &[T], h: T) -> (Vec<T>, Vec<T>) {
        let tab = self.tableau();
        let stages = tab.c.len();
        let mut ks: Vec<Vec<T>> = Vec::with_capacity(stages);
        ks.push(f(t, x));
        let mut y = x.to_vec();
        for s in 1..stages {
            let mut xs = x.to_vec();
            for (j, &a) in tab.a[s].iter().enumerate() {
                let a = T::lit(a) * h;
                for (v, k) in xs.iter_mut().zip(&ks[j]) {
                    *v += a * *k;
                }
            }
            if s == stages - 1 {
                y = xs.clone();
            }
            ks.push(f(t + T::lit(tab.c[s]) * h, &xs));
        }
        let mut err = vec![T::zero(); x.len()];
        for (s, &e) in tab.e.iter().enumerate() {
            let e = T::lit(e) * h;
            for (v, k) in err.iter_mut().zip(&ks[s]) {
                *v += e * *k;
            }
        }
        (y, err)
    }
}

/// Dormand-Prince 5(4) with FSAL, PI step control and fifth-order dense output.
pub fn rk45_dp<T: Real>(run: &SimulationRun<T>) -> Result<(Waveform<T>, RunStats), IntegrateError> {
    embedded_rk(run, &DP45)
}

/// Bogacki-Shampine 3(2) with FSAL and cubic Hermite dense output.
pub fn rk23_bs<T: Real>(run: &SimulationRun<T>) -> Result<(Waveform<T>, RunStats), IntegrateError> {
    embedded_rk(run, &BS23)
}

/// One cell of a tolerance sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub solver: String,
    pub rel_tol: f64,
    pub steps: usize,
    pub f_evals: usize,
    pub avg_order: f64,
    pub wall_ms: f64,
    pub err_rel: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.rows).expect("bench rows serialize")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("solver,rel_tol,steps,f_evals,avg_order,wall_ms,err_rel\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:e},{},{},{},{},{:e}\n",
                r.solver, r.rel_tol, r.steps, r.f_evals, r.avg_order, r.wall_ms, r.err_rel
            ));
        }
        s
    }

    pub fn rows_for(&self, solver: &str) -> Vec<&BenchRow> {
        self.rows.iter().filter(|r| r.solver == solver).collect()
    }
}

/// Reference trajectory: Dormand-Prince at `rel_tol = 1e-10`.
pub fn reference_waveform<T: Real>(run: &SimulationRun<T>) -> Result<Waveform<T>, IntegrateError> {
    let mut r = run.clone();
    r.controller.rel_tol = T::lit(1e-10);
    r.controller.abs_tol = r.controller.abs_tol.min(T::lit(1e-10));
    rk45_dp(&r).map(|(w, _)| w)
}

/// Runs every solver at every tolerance and scores it against `reference`
/// (computed when absent). Solver failures are recorded per cell.
pub fn bench<T: Real>(
    run: &SimulationRun<T>,
    tolerances: &[T],
    solvers: &[Solver],
    reference: Option<&Waveform<T>>,
) -> Result<BenchReport, IntegrateError> {
    let owned;
    let reference = match reference {
        Some(r) => r,
        None => {
            owned = reference_waveform(run)?;
            &owned
        }
    };
    let abs_tol = run.controller.abs_tol;
    let mut rows = Vec::new();
    for &solver in solvers {
        for &tol in tolerances {
            let mut r = run.clone();
            r.controller.rel_tol = tol;
            let row = match solver.run(&r) {
                Ok((w, st)) => {
                    let err = relative_error(&w, reference, abs_tol).map(|e| e.to_f64_lossy()).unwrap_or(f64::NAN);
                    BenchRow {
                        solver: solver.name().to_string(),
                        rel_tol: tol.to_f64_lossy(),
                        steps: st.accepted_steps,
                        f_evals: st.f_evals,
                        avg_order: st.average_order,
                        wall_ms: st.wall_ms,
                        err_rel: err,
                        failure: None,
                    }
                }
                Err(e) => BenchRow {
                    solver: solver.name().to_string(),
                    rel_tol: tol.to_f64_lossy(),
                    steps: 0,
                    f_evals: 0,
                    avg_order: 0.0,
                    wall_ms: 0.0,
                    err_rel: f64::NAN,
                    failure: Some(e.to_string()),
                },
            };
            rows.push(row);
        }
    }
    Ok(BenchReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(t: &[f64], v: &[f64]) -> Waveform<f64> {
        let mut w = Waveform::new(vec!["y".into()]);
        for (a, b) in t.iter().zip(v) {
            w.push(*a, &[*b]);
        }
        w
    }

    #[test]
    fn metric_examples() {
        let r = wave(&[0.0, 1.0], &[1.0, 1.0]);
        assert_eq!(relative_error(&r, &r, 1e-6).unwrap(), 0.0);
        let s = wave(&[0.0, 1.0], &[1.1, 0.9]);
        assert!((relative_error(&s, &r, 1e-6).unwrap() - 0.1).abs() < 1e-15);
        let z = wave(&[0.0, 1.0], &[0.0, 0.0]);
        let s = wave(&[0.0, 1.0], &[1e-7, -1e-7]);
        assert!((relative_error(&s, &z, 1e-6).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn metric_normalizes_by_reference_only() {
        let a = wave(&[0.0, 1.0], &[1.0, 1.0]);
        let b = wave(&[0.0, 1.0], &[2.0, 2.0]);
        assert_eq!(relative_error(&b, &a, 1e-6).unwrap(), 1.0);
        assert_eq!(relative_error(&a, &b, 1e-6).unwrap(), 0.5);
    }

    #[test]
    fn metric_errors() {
        let a = wave(&[0.0, 1.0], &[1.0, 1.0]);
        let mut other = Waveform::new(vec!["z".into()]);
        other.push(0.0, &[1.0]);
        assert!(matches!(relative_error(&other, &a, 1e-6), Err(MetricError::UnknownSignal(_))));
        let late = wave(&[2.0, 3.0], &[1.0, 1.0]);
        assert_eq!(relative_error(&late, &a, 1e-6), Err(MetricError::NoOverlap));
    }

    #[test]
    fn single_step_decay() {
        let (y, _) = Pair::Dp45.step(|_, x: &[f64]| vec![-x[0]], 0.0, &[1.0], 0.1);
        assert!((y[0] - 0.904837).abs() < 1e-6);
        assert!((y[0] - (-0.1f64).exp()).abs() < 1e-9);
        // third order: local error near h^4 / 24
        let (y, _) = Pair::Bs23.step(|_, x: &[f64]| vec![-x[0]], 0.0, &[1.0], 0.1);
        assert!((y[0] - (-0.1f64).exp()).abs() < 1e-5);
    }

    #[test]
    fn solver_names_round_trip() {
        for s in [Solver::Taylor, Solver::Dp45, Solver::Bs23] {
            assert_eq!(Solver::parse(s.name()), Some(s));
        }
        assert_eq!(Solver::parse("euler"), None);
    }
}
