//! Independent source waveforms with analytic derivatives, and gate-event
//! schedules (including regular-sampled PWM).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SourceError {
    #[error("source {index} evaluated exactly at its step time {time}")]
    EventBoundary { index: usize, time: f64 },
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("duty {duty} outside [0, 1] at t = {time}")]
    DutyOutOfRange { time: f64, duty: f64 },
    #[error("carrier frequency must be positive, got {0}")]
    InvalidCarrier(f64),
    #[error("span {span:e} s is shorter than one carrier period {period:e} s; schedule is empty")]
    SpanShorterThanPeriod { span: f64, period: f64 },
    #[error("event at t = {time} lies outside [{start}, {end}]")]
    OutOfSpan { time: f64, start: f64, end: f64 },
}

/// One extra sinusoidal component at `multiple` times the fundamental frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct Harmonic<T> {
    pub multiple: T,
    pub amplitude: T,
    #[serde(default = "zero")]
    pub phase: T,
}

fn zero<T: Real>() -> T {
    T::zero()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[serde(bound(deserialize = "T: Real + Deserialize<'de>"))]
pub enum SourceWaveform<T> {
    Dc {
        value: T,
    },
    Sine {
        amplitude: T,
        frequency: T,
        #[serde(default = "zero")]
        phase: T,
        #[serde(default = "zero")]
        offset: T,
        #[serde(default)]
        harmonics: Vec<Harmonic<T>>,
    },
    Step {
        before: T,
        after: T,
        at: T,
    },
}

impl<T: Real> SourceWaveform<T> {
    pub fn dc(value: T) -> Self {
        Self::Dc { value }
    }

    pub fn sine(amplitude: T, frequency: T, phase: T) -> Self {
        Self::Sine { amplitude, frequency, phase, offset: T::zero(), harmonics: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), SourceError> {
        match self {
            Self::Sine { frequency, harmonics, .. } => {
                if !(*frequency > T::zero()) {
                    return Err(SourceError::InvalidWaveform(format!("sine frequency must be > 0, got {frequency}")));
                }
                if harmonics.iter().any(|h| !(h.multiple > T::zero())) {
                    return Err(SourceError::InvalidWaveform("harmonic multiple must be > 0".into()));
                }
                Ok(())
            }
            Self::Step { at, .. } if !at.is_finite() => {
                Err(SourceError::InvalidWaveform("step time must be finite".into()))
            }
            _ => Ok(()),
        }
    }

    /// Time of the discontinuity, for step sources.
    pub fn step_time(&self) -> Option<T> {
        match self {
            Self::Step { at, .. } => Some(*at),
            _ => None,
        }
    }

    /// Normalized derivatives `u^(k)(t) / k!`, `k = 0..=order`. Step sources
    /// take their value on the integration segment starting at `segment_start`.
    pub fn coefficients(&self, t: T, segment_start: T, order: usize) -> Vec<T> {
        let mut out = vec![T::zero(); order + 1];
        match self {
            Self::Dc { value } => out[0] = *value,
            Self::Step { before, after, at } => out[0] = if segment_start >= *at { *after } else { *before },
            Self::Sine { amplitude, frequency, phase, offset, harmonics } => {
                let two_pi = T::lit(std::f64::consts::TAU);
                let w = two_pi * *frequency;
                add_sine(&mut out, *amplitude, w, w * t + *phase);
                for h in harmonics {
                    let wh = w * h.multiple;
                    add_sine(&mut out, h.amplitude, wh, wh * t + h.phase);
                }
                out[0] += *offset;
            }
        }
        out
    }
}

// k-th derivative of a sin(w t + p) is a w^k sin(w t + p + k pi/2)
fn add_sine<T: Real>(out: &mut [T], a: T, w: T, arg: T) {
    let (s, c) = arg.sin_cos();
    let cycle = [s, c, -s, -c];
    let mut scale = a;
    for (k, o) in out.iter_mut().enumerate() {
        if k > 0 {
            scale = scale * w / T::from_usize_lossy(k);
        }
        *o += scale * cycle[k % 4];
    }
}

/// The ordered collection of independent sources `u_1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceBank<T> {
    sources: Vec<SourceWaveform<T>>,
}

impl<T> Default for SourceBank<T> {
    fn default() -> Self {
        Self { sources: Vec::new() }
    }
}

impl<T: Real> SourceBank<T> {
    pub fn new(sources: Vec<SourceWaveform<T>>) -> Result<Self, SourceError> {
        for s in &sources {
            s.validate()?;
        }
        Ok(Self { sources })
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn waveforms(&self) -> &[SourceWaveform<T>] {
        &self.sources
    }

    /// Coefficient lists indexed `[k][source]`, valid on the segment that
    /// starts at `segment_start`.
    pub fn coefficients(&self, t: T, segment_start: T, order: usize) -> Vec<Vec<T>> {
        let per_source: Vec<Vec<T>> = self.sources.iter().map(|s| s.coefficients(t, segment_start, order)).collect();
        (0..=order).map(|k| per_source.iter().map(|c| c[k]).collect()).collect()
    }

    pub fn values(&self, t: T, segment_start: T) -> Vec<T> {
        self.sources.iter().map(|s| s.coefficients(t, segment_start, 0)[0]).collect()
    }

    /// Normalized derivatives at `t`, refusing to evaluate on a step edge.
    pub fn u1_derivatives(&self, t: T, order: usize) -> Result<Vec<Vec<T>>, SourceError> {
        for (index, s) in self.sources.iter().enumerate() {
            if s.step_time() == Some(t) {
                return Err(SourceError::EventBoundary { index, time: t.to_f64_lossy() });
            }
        }
        Ok(self.coefficients(t, t, order))
    }

    /// Step times strictly inside `(start, end)`.
    pub fn step_times(&self, start: T, end: T) -> Vec<T> {
        self.sources.iter().filter_map(|s| s.step_time()).filter(|&t| t > start && t < end).collect()
    }
}

/// A merged set of simultaneous gate changes. A pure time marker (both masks
/// zero) forces the integrator to stop, e.g. at a step-source edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduledEvent<T> {
    pub time: T,
    pub on: u64,
    pub off: u64,
}

impl<T: Real> ScheduledEvent<T> {
    pub fn marker(time: T) -> Self {
        Self { time, on: 0, off: 0 }
    }

    /// New switch bitmask after this event.
    pub fn apply(&self, switches: u64) -> u64 {
        (switches | self.on) & !self.off
    }
}

/// Time-ordered, duplicate-free event list.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSchedule<T> {
    events: Vec<ScheduledEvent<T>>,
}

impl<T> Default for EventSchedule<T> {
    fn default() -> Self {
        Self { events: Vec::new() }
    }
}

impl<T: Real> EventSchedule<T> {
    /// Sorts and merges; for conflicting masks at one instant the later entry wins.
    pub fn new(mut events: Vec<ScheduledEvent<T>>) -> Self {
        events.sort_by(|a, b| a.time.partial_cmp(&b.time).expect("event time is NaN"));
        let mut merged: Vec<ScheduledEvent<T>> = Vec::with_capacity(events.len());
        for e in events {
            match merged.last_mut() {
                Some(last) if last.time == e.time => {
                    last.on = (last.on & !e.off) | e.on;
                    last.off = (last.off & !e.on) | e.off;
                }
                _ => merged.push(e),
            }
        }
        Self { events: merged }
    }

    pub fn empty() -> Self {
        Self { events: Vec::new() }
    }

    pub fn events(&self) -> &[ScheduledEvent<T>] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn merged_with(&self, other: &EventSchedule<T>) -> Self {
        let mut all = self.events.clone();
        all.extend_from_slice(&other.events);
        Self::new(all)
    }

    pub fn with_markers(&self, times: &[T]) -> Self {
        let mut all = self.events.clone();
        all.extend(times.iter().map(|&t| ScheduledEvent::marker(t)));
        Self::new(all)
    }

    pub fn check_span(&self, start: T, end: T) -> Result<(), SourceError> {
        for e in &self.events {
            if e.time < start || e.time > end {
                return Err(SourceError::OutOfSpan {
                    time: e.time.to_f64_lossy(),
                    start: start.to_f64_lossy(),
                    end: end.to_f64_lossy(),
                });
            }
        }
        Ok(())
    }

    /// Index of the first event with time strictly greater than `t`.
    pub fn next_after(&self, t: T) -> usize {
        self.events.partition_point(|e| e.time <= t)
    }
}

/// Duty-cycle generator for one switch pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[serde(bound(deserialize = "T: Real + Deserialize<'de>"))]
pub enum Modulator<T> {
    Constant {
        duty: T,
    },
    Sine {
        offset: T,
        amplitude: T,
        frequency: T,
        #[serde(default = "zero")]
        phase: T,
    },
    /// Open-loop volts-per-hertz: electrical frequency ramps linearly to
    /// `rated_frequency` over `ramp_time`, modulation index follows it from
    /// `boost` to `rated_index`; `phase` shifts this leg (e.g. -2pi/3).
    VoltsPerHertz {
        rated_frequency: T,
        rated_index: T,
        ramp_time: T,
        #[serde(default = "zero")]
        boost: T,
        #[serde(default = "zero")]
        phase: T,
    },
}

impl<T: Real> Modulator<T> {
    pub fn duty(&self, t: T) -> T {
        let half = T::lit(0.5);
        let two_pi = T::lit(std::f64::consts::TAU);
        match self {
            Self::Constant { duty } => *duty,
            Self::Sine { offset, amplitude, frequency, phase } => {
                *offset + *amplitude * (two_pi * *frequency * t + *phase).sin()
            }
            Self::VoltsPerHertz { rated_frequency, rated_index, ramp_time, boost, phase } => {
                let (freq, angle) = if t < *ramp_time && *ramp_time > T::zero() {
                    let f = *rated_frequency * t / *ramp_time;
                    (f, two_pi * half * f * t)
                } else {
                    let ramp_angle = two_pi * half * *rated_frequency * *ramp_time;
                    (*rated_frequency, ramp_angle + two_pi * *rated_frequency * (t - *ramp_time))
                };
                let m = *boost + (*rated_index - *boost) * freq / *rated_frequency;
                half + half * m * (angle + *phase).sin()
            }
        }
    }
}

/// One half-bridge: `high` conducts for the duty fraction of each period,
/// `low` (if present) is its complement with zero dead time.
#[derive(Debug, Clone, PartialEq)]
pub struct PwmLeg<T> {
    pub high: usize,
    pub low: Option<usize>,
    pub modulator: Modulator<T>,
}

/// Regular-sampled PWM: duty sampled once at each period start; the high
/// switch closes at the period start and opens at `start + duty * T`.
/// Only state changes are emitted, except the initial gate state at `t_start`.
pub fn pwm_schedule<T: Real>(carrier_freq: T, legs: &[PwmLeg<T>], t_start: T, t_end: T) -> Result<EventSchedule<T>, SourceError> {
    if !(carrier_freq > T::zero()) {
        return Err(SourceError::InvalidCarrier(carrier_freq.to_f64_lossy()));
    }
    let period = T::one() / carrier_freq;
    if t_end - t_start < period {
        return Err(SourceError::SpanShorterThanPeriod {
            span: (t_end - t_start).to_f64_lossy(),
            period: period.to_f64_lossy(),
        });
    }
    let mut events = Vec::new();
    for leg in legs {
        let on_mask = 1u64 << leg.high;
        let low_mask = leg.low.map_or(0, |l| 1u64 << l);
        let mut current: Option<bool> = None;
        let mut emit = |time: T, high_on: bool, current: &mut Option<bool>| {
            if *current != Some(high_on) {
                let (on, off) = if high_on { (on_mask, low_mask) } else { (low_mask, on_mask) };
                events.push(ScheduledEvent { time, on, off });
                *current = Some(high_on);
            }
        };
        let mut k = 0usize;
        loop {
            let tk = t_start + T::from_usize_lossy(k) * period;
            if tk >= t_end {
                break;
            }
            let d = leg.modulator.duty(tk);
            if !(d >= T::zero() && d <= T::one()) {
                return Err(SourceError::DutyOutOfRange { time: tk.to_f64_lossy(), duty: d.to_f64_lossy() });
            }
            emit(tk, d > T::zero(), &mut current);
            if d > T::zero() && d < T::one() {
                let t_off = tk + d * period;
                if t_off < t_end {
                    emit(t_off, false, &mut current);
                }
            }
            k += 1;
        }
    }
    Ok(EventSchedule::new(events))
}
