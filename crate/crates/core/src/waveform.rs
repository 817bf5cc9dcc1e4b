//! Recorded signals on a uniform output grid, shared by every solver.

use crate::hybrid::{EvalCounters, HybridError, HybridSystem, LoopSolver, TopologyMatrices};
use crate::scalar::Real;

/// A recordable quantity of a hybrid system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signal {
    /// Index into the stacked `[x1, x_nl]` state.
    State(usize),
    /// Nonlinear-block output `y`.
    Output(usize),
    /// Nonlinear-block input `u`.
    Sensor(usize),
    /// Network probe row.
    Probe(usize),
}

impl Signal {
    pub fn needs_loop(&self) -> bool {
        !matches!(self, Signal::State(_))
    }
}

/// Looks a signal up by name among states, block outputs and probes.
pub fn resolve_signal<T: Real>(sys: &HybridSystem<T>, name: &str) -> Option<Signal> {
    if let Some(i) = sys.state_names().iter().position(|n| n == name) {
        return Some(Signal::State(i));
    }
    if let Some(i) = sys.blocks().output_names().iter().position(|n| n == name) {
        return Some(Signal::Output(i));
    }
    if let Some(i) = sys.network().probe_names().iter().position(|n| n == name) {
        return Some(Signal::Probe(i));
    }
    name.strip_prefix("sensor")
        .and_then(|k| k.parse::<usize>().ok())
        .filter(|&k| k < sys.blocks().n_inputs())
        .map(Signal::Sensor)
}

/// Time grid plus named columns of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<T> {
    pub names: Vec<String>,
    pub time: Vec<T>,
    pub columns: Vec<Vec<T>>,
}

impl<T: Real> Waveform<T> {
    pub fn new(names: Vec<String>) -> Self {
        let columns = vec![Vec::new(); names.len()];
        Self { names, time: Vec::new(), columns }
    }

    pub fn push(&mut self, t: T, values: &[T]) {
        assert_eq!(values.len(), self.columns.len(), "sample width mismatch");
        self.time.push(t);
        for (c, &v) in self.columns.iter_mut().zip(values) {
            c.push(v);
        }
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<&[T]> {
        self.names.iter().position(|n| n == name).map(|k| self.columns[k].as_slice())
    }

    pub fn last(&self, name: &str) -> Option<T> {
        self.column(name).and_then(|c| c.last().copied())
    }

    /// Linear interpolation of column `k` at `t`; `None` outside the span.
    pub fn interpolate(&self, k: usize, t: T) -> Option<T> {
        let (first, last) = (*self.time.first()?, *self.time.last()?);
        if t < first || t > last {
            return None;
        }
        let j = self.time.partition_point(|&s| s < t);
        let col = &self.columns[k];
        if j < self.time.len() && self.time[j] == t {
            return Some(col[j]);
        }
        let (t0, t1) = (self.time[j - 1], self.time[j]);
        let w = (t - t0) / (t1 - t0);
        Some(col[j - 1] + w * (col[j] - col[j - 1]))
    }

    /// Times strictly increasing and columns of equal length.
    pub fn is_well_formed(&self) -> bool {
        self.time.windows(2).all(|w| w[0] < w[1]) && self.columns.iter().all(|c| c.len() == self.time.len())
    }
}

/// Uniform output grid `t_start + k * period`, closed by `t_end`.
pub fn output_grid<T: Real>(t_start: T, t_end: T, period: T) -> Vec<T> {
    let mut grid = Vec::new();
    let mut k = 0usize;
    let tiny = (t_end - t_start).abs() * T::lit(1e-12);
    loop {
        let t = t_start + T::from_usize_lossy(k) * period;
        if t > t_end - tiny {
            break;
        }
        grid.push(t);
        k += 1;
    }
    grid.push(t_end);
    grid
}

/// Samples the recorded signals at grid times as a solver advances.
pub struct Recorder<'a, T: Real> {
    sys: &'a HybridSystem<T>,
    signals: Vec<Signal>,
    grid: Vec<T>,
    next: usize,
    needs_loop: bool,
    solver: LoopSolver<T>,
    waveform: Waveform<T>,
}

impl<'a, T: Real> Recorder<'a, T> {
    pub fn new(sys: &'a HybridSystem<T>, signals: Vec<(String, Signal)>, grid: Vec<T>) -> Self {
        let needs_loop = signals.iter().any(|(_, s)| s.needs_loop());
        let (names, signals): (Vec<String>, Vec<Signal>) = signals.into_iter().unzip();
        Self {
            sys,
            signals,
            grid,
            next: 0,
            needs_loop,
            solver: LoopSolver::new(sys.loop_options()),
            waveform: Waveform::new(names),
        }
    }

    /// Next grid time still to be recorded.
    pub fn pending(&self) -> Option<T> {
        self.grid.get(self.next).copied()
    }

    /// Records every pending grid time `tau <= t_hi`, with the state supplied
    /// by `interp(tau)` and sources taken on the segment starting at `segment_start`.
    pub fn sample_until(
        &mut self,
        t_hi: T,
        segment_start: T,
        mats: &TopologyMatrices<T>,
        mut interp: impl FnMut(T) -> Vec<T>,
    ) -> Result<(), HybridError> {
        while let Some(tau) = self.pending() {
            if tau > t_hi {
                break;
            }
            let x = interp(tau);
            self.record(tau, segment_start, mats, &x)?;
            self.next += 1;
        }
        Ok(())
    }

    fn record(&mut self, tau: T, segment_start: T, mats: &TopologyMatrices<T>, x: &[T]) -> Result<(), HybridError> {
        let n1 = self.sys.n_pwl();
        let (x1, x_nl) = x.split_at(n1);
        let (mut y, mut u, mut p) = (Vec::new(), Vec::new(), Vec::new());
        if self.needs_loop {
            let u1 = self.sys.sources().values(tau, segment_start);
            let mut scratch = EvalCounters::default();
            let (yy, uu) = self.solver.solve(self.sys.blocks(), mats, x_nl, x1, &u1, None, &mut scratch)?;
            p = mats.probes(x1, &u1, &yy);
            y = yy;
            u = uu;
        }
        let row: Vec<T> = self
            .signals
            .iter()
            .map(|s| match *s {
                Signal::State(i) => x[i],
                Signal::Output(i) => y[i],
                Signal::Sensor(i) => u[i],
                Signal::Probe(i) => p[i],
            })
            .collect();
        self.waveform.push(tau, &row);
        Ok(())
    }

    /// Drops the cached loop Jacobian after a topology change.
    pub fn reset_loop(&mut self) {
        self.solver.reset();
    }

    pub fn finish(self) -> Waveform<T> {
        self.waveform
    }
}
