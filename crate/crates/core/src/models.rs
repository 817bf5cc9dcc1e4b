//! Nonlinear component models: single-diode PV array, battery with
//! polarization and exponential zone, stationary-frame induction motor, and
//! the Clarke transform that connects the motor to three-phase nodes.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::hybrid::{ModelError, NonlinearBlock};
use crate::scalar::Real;

pub const ELECTRON_CHARGE: f64 = 1.602176634e-19;
pub const BOLTZMANN: f64 = 1.380649e-23;

/// Largest exponent passed to `exp` in the diode term.
pub const EXP_CLAMP: f64 = 500.0;

fn domain(block: &str, message: String) -> ModelError {
    ModelError::Domain { block: block.to_string(), message }
}

fn params(block: &str, message: &str) -> ModelError {
    ModelError::Params { block: block.to_string(), message: message.to_string() }
}

/// Amplitude-invariant Clarke transform.
pub fn clarke<T: Real>(abc: [T; 3]) -> (T, T) {
    let [a, b, c] = abc;
    let three = T::lit(3.0);
    ((a + a - b - c) / three, (b - c) / three.sqrt())
}

/// Inverse of [`clarke`] onto a zero-sum triple.
pub fn inverse_clarke<T: Real>(alpha: T, beta: T) -> [T; 3] {
    let half = T::lit(0.5);
    let k = T::lit(3.0).sqrt() * half;
    [alpha, -half * alpha + k * beta, -half * alpha - k * beta]
}

/// What the PV block drives into the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PvOutput {
    /// The internal controlled current `I_m`; the netlist carries the
    /// series and shunt resistances.
    #[default]
    SourceCurrent,
    /// Terminal current `(R_sh I_m - V/N_s) / (R_s + R_sh)`, which depends on
    /// the terminal voltage and therefore closes an algebraic loop.
    TerminalCurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PvParams<T> {
    pub n_s: T,
    pub s_0: T,
    pub t_ref: T,
    pub r_s: T,
    pub r_sh: T,
    pub i_s0: T,
    pub i_sc0: T,
    pub e_g: T,
    pub a: T,
    pub c_t: T,
    /// Light-to-temperature coupling; carried for completeness, unused.
    pub k_s: T,
    pub t_d: T,
    pub q_e: T,
    pub k_b: T,
    pub output: PvOutput,
}

impl<T: Real> PvParams<T> {
    /// A 36-cell, 5 A module.
    pub fn module_36() -> Self {
        Self {
            n_s: T::lit(36.0),
            s_0: T::lit(1000.0),
            t_ref: T::lit(298.15),
            r_s: T::lit(0.005),
            r_sh: T::lit(10.0),
            i_s0: T::lit(1e-9),
            i_sc0: T::lit(5.0),
            e_g: T::lit(1.12),
            a: T::lit(1.3),
            c_t: T::lit(0.003),
            k_s: T::zero(),
            t_d: T::lit(1e-5),
            q_e: T::lit(ELECTRON_CHARGE),
            k_b: T::lit(BOLTZMANN),
            output: PvOutput::SourceCurrent,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let pos = |v: T| v > T::zero() && v.is_finite();
        if !(pos(self.t_d) && pos(self.r_s) && pos(self.r_sh) && self.n_s >= T::one()) {
            return Err(params("pv", "require t_d, R_s, R_sh > 0 and N_s >= 1"));
        }
        if !(pos(self.s_0) && pos(self.t_ref) && pos(self.a) && pos(self.q_e) && pos(self.k_b)) {
            return Err(params("pv", "require S_0, T_ref, A, q, k > 0"));
        }
        Ok(())
    }

    /// Per-cell diode-node voltage from the source current and terminal voltage.
    pub fn diode_voltage(&self, i_m: T, v: T) -> T {
        let rsum = self.r_s + self.r_sh;
        self.r_s * self.r_sh / rsum * i_m + v * self.r_sh / (self.n_s * rsum)
    }

    /// `dI_m/dt` and whether the diode exponent hit the clamp.
    pub fn rate(&self, i_m: T, s: T, t: T, v: T) -> Result<(T, bool), ModelError> {
        if !(t > T::zero()) {
            return Err(domain("pv", format!("cell temperature {t} K must be positive")));
        }
        let vd = self.diode_voltage(i_m, v);
        let ak = self.a * self.k_b;
        let thermal = (self.q_e * self.e_g / ak) * (T::one() / self.t_ref - T::one() / t);
        let mut arg = self.q_e * vd / (ak * t);
        let clamp = T::lit(EXP_CLAMP);
        let saturated = arg > clamp;
        if saturated {
            arg = clamp;
        }
        let photo = self.i_sc0 * (s / self.s_0) + self.c_t * (t - self.t_ref);
        let diode = self.i_s0 * (t / self.t_ref).powi(3) * thermal.exp() * (arg.exp() - T::one());
        Ok(((photo - diode - i_m) / self.t_d, saturated))
    }

    pub fn terminal_current(&self, i_m: T, v: T) -> T {
        (self.r_sh * i_m - v / self.n_s) / (self.r_s + self.r_sh)
    }
}

/// PV array block. Inputs `(S, T, V)`, state `I_m`, one output.
#[derive(Debug)]
pub struct PvBlock<T> {
    name: String,
    pub params: PvParams<T>,
    saturations: AtomicUsize,
}

impl<T: Real> PvBlock<T> {
    pub fn new(name: &str, params: PvParams<T>) -> Result<Self, ModelError> {
        params.validate()?;
        Ok(Self { name: name.to_string(), params, saturations: AtomicUsize::new(0) })
    }

    /// Number of evaluations whose diode exponent was clamped.
    pub fn saturation_count(&self) -> usize {
        self.saturations.load(Ordering::Relaxed)
    }
}

impl<T: Real> NonlinearBlock<T> for PvBlock<T> {
    fn name(&self) -> &str {
        &self.name
    }
    fn n_states(&self) -> usize {
        1
    }
    fn n_inputs(&self) -> usize {
        3
    }
    fn n_outputs(&self) -> usize {
        1
    }

    fn f(&self, x: &[T], u: &[T], dx: &mut [T]) -> Result<(), ModelError> {
        let (rate, saturated) = self.params.rate(x[0], u[0], u[1], u[2])?;
        if saturated {
            self.saturations.fetch_add(1, Ordering::Relaxed);
        }
        dx[0] = rate;
        Ok(())
    }

    fn g(&self, x: &[T], u: &[T], y: &mut [T]) -> Result<(), ModelError> {
        y[0] = match self.params.output {
            PvOutput::SourceCurrent => x[0],
            PvOutput::TerminalCurrent => self.params.terminal_current(x[0], u[2]),
        };
        Ok(())
    }

    fn depends_on_input(&self) -> bool {
        self.params.output == PvOutput::TerminalCurrent
    }

    fn state_names(&self) -> Vec<String> {
        vec![format!("{}.i_m", self.name)]
    }

    fn output_names(&self) -> Vec<String> {
        vec![format!("{}.i_out", self.name)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterSign {
    /// `di*/dt = (i_out - i*) / T`.
    #[default]
    Stable,
    /// `di*/dt = (i* - i_out) / T`.
    Verbatim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryParams<T> {
    pub e_0: T,
    pub k: T,
    /// Capacity in Ah.
    pub q: T,
    pub a: T,
    pub b: T,
    pub t_lp: T,
    /// Converts `i_out` (A) into `dc/dt` (Ah/s); 1/3600 for c in Ah.
    pub capacity_rate: T,
    pub filter: FilterSign,
}

impl<T: Real> BatteryParams<T> {
    /// A 12 V, 10 Ah lead-acid style cell string.
    pub fn lead_acid_12v() -> Self {
        Self {
            e_0: T::lit(12.6),
            k: T::lit(0.01),
            q: T::lit(10.0),
            a: T::lit(0.6),
            b: T::lit(3.0),
            t_lp: T::lit(0.03),
            capacity_rate: T::lit(1.0 / 3600.0),
            filter: FilterSign::Stable,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.q > T::zero() && self.t_lp > T::zero()) {
            return Err(params("battery", "require Q > 0 and T > 0"));
        }
        Ok(())
    }

    fn common(&self, c: T) -> T {
        self.e_0 - self.k * self.q / (self.q - c) * c + self.a * (-self.b * c).exp()
    }

    /// Discharge branch.
    pub fn f1(&self, c: T, i_star: T) -> T {
        self.common(c) - self.k * self.q / (self.q - c) * i_star
    }

    /// Charge branch.
    pub fn f2(&self, c: T, i_star: T) -> T {
        self.common(c) - self.k * self.q / (T::lit(0.1) * self.q + c) * i_star
    }

    pub fn check_capacity(&self, c: T) -> Result<(), ModelError> {
        if !(c >= T::zero() && c <= T::lit(0.95) * self.q) {
            return Err(domain("battery", format!("extracted capacity {c} Ah outside [0, 0.95 Q]")));
        }
        Ok(())
    }

    pub fn voltage(&self, c: T, i_star: T) -> Result<T, ModelError> {
        self.check_capacity(c)?;
        Ok(if i_star < T::zero() { self.f2(c, i_star) } else { self.f1(c, i_star) })
    }

    /// `(dc/dt, di*/dt)`.
    pub fn rates(&self, c: T, i_star: T, i_out: T) -> Result<(T, T), ModelError> {
        self.check_capacity(c)?;
        let di = match self.filter {
            FilterSign::Stable => (i_out - i_star) / self.t_lp,
            FilterSign::Verbatim => (i_star - i_out) / self.t_lp,
        };
        Ok((i_out * self.capacity_rate, di))
    }
}

/// Battery block. Input discharge current `i_out`, states `(c, i*)`, output `E`.
#[derive(Debug, Clone)]
pub struct BatteryBlock<T> {
    name: String,
    pub params: BatteryParams<T>,
}

impl<T: Real> BatteryBlock<T> {
    pub fn new(name: &str, params: BatteryParams<T>) -> Result<Self, ModelError> {
        params.validate()?;
        Ok(Self { name: name.to_string(), params })
    }
}

impl<T: Real> NonlinearBlock<T> for BatteryBlock<T> {
    fn name(&self) -> &str {
        &self.name
    }
    fn n_states(&self) -> usize {
        2
    }
    fn n_inputs(&self) -> usize {
        1
    }
    fn n_outputs(&self) -> usize {
        1
    }

    fn f(&self, x: &[T], u: &[T], dx: &mut [T]) -> Result<(), ModelError> {
        let (dc, di) = self.params.rates(x[0], x[1], u[0])?;
        dx[0] = dc;
        dx[1] = di;
        Ok(())
    }

    fn g(&self, x: &[T], _u: &[T], y: &mut [T]) -> Result<(), ModelError> {
        y[0] = self.params.voltage(x[0], x[1])?;
        Ok(())
    }

    fn depends_on_input(&self) -> bool {
        false
    }

    fn state_names(&self) -> Vec<String> {
        vec![format!("{}.c", self.name), format!("{}.i_star", self.name)]
    }

    fn output_names(&self) -> Vec<String> {
        vec![format!("{}.e", self.name)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotorParams<T> {
    pub r_s: T,
    pub r_r: T,
    pub l_m: T,
    pub l_s: T,
    pub l_r: T,
    pub p_0: T,
    pub j: T,
    pub t_l: T,
    /// `+1` accelerates the rotor under positive electromagnetic torque;
    /// `-1` reproduces the printed sign.
    pub torque_sign: T,
}

impl<T: Real> MotorParams<T> {
    /// A small 4-pole machine.
    pub fn small_4pole() -> Self {
        Self {
            r_s: T::lit(0.5),
            r_r: T::lit(0.4),
            l_m: T::lit(0.1),
            l_s: T::lit(0.104),
            l_r: T::lit(0.104),
            p_0: T::lit(2.0),
            j: T::lit(0.01),
            t_l: T::zero(),
            torque_sign: T::one(),
        }
    }

    pub fn t_r(&self) -> T {
        self.l_r / self.r_r
    }

    pub fn sigma(&self) -> T {
        (self.l_s * self.l_r - self.l_m * self.l_m) / (self.l_s * self.l_r)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let all_pos = [self.r_s, self.r_r, self.l_m, self.l_s, self.l_r, self.j, self.p_0].iter().all(|&v| v > T::zero());
        if !all_pos {
            return Err(params("motor", "resistances, inductances, J and p_0 must be positive"));
        }
        let s = self.sigma();
        if !(s > T::zero() && s < T::one()) {
            return Err(params("motor", "leakage coefficient must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Derivatives of `[i_sd, i_sq, psi_rd, psi_rq, omega_2]`.
    pub fn rates(&self, x: &[T], u_sd: T, u_sq: T) -> [T; 5] {
        let [i_sd, i_sq, psi_rd, psi_rq, w] = [x[0], x[1], x[2], x[3], x[4]];
        let (lm, ls, lr) = (self.l_m, self.l_s, self.l_r);
        let tr = self.t_r();
        let sigma = self.sigma();
        let k_flux = lm / (sigma * ls * lr * tr);
        let k_speed = lm / (sigma * ls * lr);
        let k_damp = (self.r_s * lr * lr + self.r_r * ls * ls) / (sigma * ls * lr * lr);
        let k_in = T::one() / (sigma * ls);
        let k_torque = self.p_0 * self.p_0 * lm / (self.j * lr);
        [
            k_flux * psi_rd + k_speed * w * psi_rq - k_damp * i_sd + k_in * u_sd,
            k_flux * psi_rq - k_speed * w * psi_rd - k_damp * i_sq + k_in * u_sq,
            -psi_rd / tr - w * psi_rq + lm / tr * i_sd,
            -psi_rq / tr + w * psi_rd + lm / tr * i_sq,
            self.torque_sign * k_torque * (i_sq * psi_rd - i_sd * psi_rq) - self.p_0 / self.j * self.t_l,
        ]
    }
}

/// Induction motor on three phase-voltage sensors `(v_a, v_b, v_c)`,
/// returning phase currents `(i_a, i_b, i_c)`.
#[derive(Debug, Clone)]
pub struct MotorBlock<T> {
    name: String,
    pub params: MotorParams<T>,
}

impl<T: Real> MotorBlock<T> {
    pub fn new(name: &str, params: MotorParams<T>) -> Result<Self, ModelError> {
        params.validate()?;
        Ok(Self { name: name.to_string(), params })
    }
}

impl<T: Real> NonlinearBlock<T> for MotorBlock<T> {
    fn name(&self) -> &str {
        &self.name
    }
    fn n_states(&self) -> usize {
        5
    }
    fn n_inputs(&self) -> usize {
        3
    }
    fn n_outputs(&self) -> usize {
        3
    }

    fn f(&self, x: &[T], u: &[T], dx: &mut [T]) -> Result<(), ModelError> {
        let (u_sd, u_sq) = clarke([u[0], u[1], u[2]]);
        dx.copy_from_slice(&self.params.rates(x, u_sd, u_sq));
        Ok(())
    }

    fn g(&self, x: &[T], _u: &[T], y: &mut [T]) -> Result<(), ModelError> {
        y.copy_from_slice(&inverse_clarke(x[0], x[1]));
        Ok(())
    }

    fn depends_on_input(&self) -> bool {
        false
    }

    fn state_names(&self) -> Vec<String> {
        ["i_sd", "i_sq", "psi_rd", "psi_rq", "omega"].iter().map(|s| format!("{}.{s}", self.name)).collect()
    }

    fn output_names(&self) -> Vec<String> {
        ["i_a", "i_b", "i_c"].iter().map(|s| format!("{}.{s}", self.name)).collect()
    }
}

/// Autonomous scalar ODE `x' = f(x)` with output `y = x`, for test problems.
#[derive(Debug, Clone)]
pub struct ScalarOde<T> {
    name: String,
    rhs: fn(T) -> T,
}

impl<T: Real> ScalarOde<T> {
    pub fn new(name: &str, rhs: fn(T) -> T) -> Self {
        Self { name: name.to_string(), rhs }
    }
}

impl<T: Real> NonlinearBlock<T> for ScalarOde<T> {
    fn name(&self) -> &str {
        &self.name
    }
    fn n_states(&self) -> usize {
        1
    }
    fn n_inputs(&self) -> usize {
        0
    }
    fn n_outputs(&self) -> usize {
        1
    }

    fn f(&self, x: &[T], _u: &[T], dx: &mut [T]) -> Result<(), ModelError> {
        dx[0] = (self.rhs)(x[0]);
        Ok(())
    }

    fn g(&self, x: &[T], _u: &[T], y: &mut [T]) -> Result<(), ModelError> {
        y[0] = x[0];
        Ok(())
    }

    fn depends_on_input(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clarke_examples() {
        let (a, b) = clarke([1.0f64, -0.5, -0.5]);
        assert!((a - 1.0).abs() < 1e-15 && b.abs() < 1e-15);
        assert_eq!(clarke([0.0f64; 3]), (0.0, 0.0));
        let abc = [0.3f64, -1.1, 0.8];
        let (al, be) = clarke(abc);
        for (x, y) in inverse_clarke(al, be).iter().zip(abc) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn pv_equilibria() {
        let p = PvParams::<f64>::module_36();
        // v_d = 0 needs V = -N_s R_s I_m
        let v = -p.n_s * p.r_s * p.i_sc0;
        let (r, _) = p.rate(p.i_sc0, p.s_0, p.t_ref, v).unwrap();
        assert!(r.abs() < 1e-9, "{r}");
        let (r, _) = p.rate(0.0, 0.0, p.t_ref, 0.0).unwrap();
        assert_eq!(r, 0.0);
        assert!(p.rate(1.0, 1000.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn pv_clamps_exponent() {
        let p = PvParams::<f64>::module_36();
        let blk = PvBlock::new("pv", p).unwrap();
        let mut dx = [0.0];
        blk.f(&[0.0], &[1000.0, 298.15, 1e4], &mut dx).unwrap();
        assert!(dx[0].is_finite());
        assert_eq!(blk.saturation_count(), 1);
    }

    #[test]
    fn battery_examples() {
        let mut p = BatteryParams::<f64>::lead_acid_12v();
        assert_eq!(p.voltage(0.0, 0.0).unwrap(), p.e_0 + p.a);
        p.q = 10.0;
        p.k = 0.01;
        assert!((p.voltage(0.0, 1.0).unwrap() - (p.e_0 + p.a - 0.01)).abs() < 1e-14);
        assert!(p.voltage(9.6, 0.0).is_err());
        assert!(p.voltage(-0.1, 0.0).is_err());
        let (_, di) = p.rates(1.0, 0.0, 2.0).unwrap();
        assert!(di > 0.0);
    }

    #[test]
    fn motor_equilibrium_and_torque() {
        let p = MotorParams::<f64>::small_4pole();
        assert_eq!(p.rates(&[0.0; 5], 0.0, 0.0), [0.0; 5]);
        let d = p.rates(&[0.0, 1.0, 1.0, 0.0, 0.0], 0.0, 0.0);
        assert!((d[4] - p.p_0 * p.p_0 * p.l_m / (p.j * p.l_r)).abs() < 1e-12);
        let mut bad = p.clone();
        bad.l_m = 0.2;
        assert!(bad.validate().is_err());
    }
}
