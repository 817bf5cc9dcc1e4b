//! JSON scenario files: schema, defaults, validation and assembly into a
//! runnable simulation.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use flexsim::circuit::{CircuitNetwork, ElementKind, Netlist, Quantity};
use flexsim::hybrid::{BlockStack, HybridState, HybridSystem, NonlinearBlock};
use flexsim::integrator::SimulationRun;
use flexsim::models::{BatteryBlock, BatteryParams, MotorBlock, MotorParams, PvBlock, PvParams};
use flexsim::reference::Solver;
use flexsim::sources::{pwm_schedule, EventSchedule, Modulator, PwmLeg, ScheduledEvent, SourceBank, SourceWaveform};
use flexsim::taylor::StepController;
use flexsim::waveform::{resolve_signal, Signal};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid value at {path}: {message}")]
    Invalid { path: String, message: String },
    #[error("{path}: unresolved reference {name:?}")]
    Dangling { path: String, name: String },
    #[error("unknown model kind {0:?}")]
    UnknownModel(String),
    #[error("unsupported schema_version {0}, expected {SCHEMA_VERSION}")]
    Version(u32),
    #[error("assembly failed: {0}")]
    Build(String),
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { path: path.into(), message: message.into() }
}

fn dangling(path: impl Into<String>, name: &str) -> ScenarioError {
    ScenarioError::Dangling { path: path.into(), name: name.to_string() }
}

fn default_r_on() -> f64 {
    1e-3
}
fn default_r_off() -> f64 {
    1e6
}
fn default_q_min() -> usize {
    2
}
fn default_q_max() -> usize {
    5
}
fn default_safety() -> f64 {
    0.8
}
fn default_rel_tol() -> f64 {
    1e-6
}
fn default_abs_tol() -> f64 {
    1e-8
}
fn default_solver() -> String {
    "taylor".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub name: String,
    #[serde(flatten)]
    pub waveform: SourceWaveform<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ElementSpec {
    Resistor { name: String, a: String, b: String, value: f64 },
    Capacitor { name: String, a: String, b: String, value: f64, #[serde(default)] v0: f64 },
    Inductor { name: String, a: String, b: String, value: f64, #[serde(default)] i0: f64 },
    Vsource { name: String, a: String, b: String, source: String },
    Isource { name: String, a: String, b: String, source: String },
    Switch {
        name: String,
        a: String,
        b: String,
        #[serde(default = "default_r_on")]
        r_on: f64,
        #[serde(default = "default_r_off")]
        r_off: f64,
        #[serde(default)]
        closed: bool,
    },
    /// Controlled voltage source driven by a block output.
    Vport { name: String, a: String, b: String, output: String },
    /// Controlled current source driven by a block output.
    Iport { name: String, a: String, b: String, output: String },
}

impl ElementSpec {
    pub fn name(&self) -> &str {
        match self {
            ElementSpec::Resistor { name, .. }
            | ElementSpec::Capacitor { name, .. }
            | ElementSpec::Inductor { name, .. }
            | ElementSpec::Vsource { name, .. }
            | ElementSpec::Isource { name, .. }
            | ElementSpec::Switch { name, .. }
            | ElementSpec::Vport { name, .. }
            | ElementSpec::Iport { name, .. } => name,
        }
    }
}

/// A linear quantity read from the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum QuantitySpec {
    /// `v(pos) - v(neg)`.
    Voltage([String; 2]),
    /// Current through an element from its `a` to its `b` terminal.
    Current(String),
    /// Current a source or port pushes out of its `a` terminal.
    Delivered(String),
    Source(String),
    Output(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub name: String,
    pub model: String,
    /// Overrides on top of the model's preset parameters.
    #[serde(default)]
    pub params: serde_json::Map<String, Value>,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    pub inputs: Vec<QuantitySpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub name: String,
    #[serde(flatten)]
    pub quantity: QuantitySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LegSpec {
    pub high: String,
    #[serde(default)]
    pub low: Option<String>,
    pub modulator: Modulator<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PwmSpec {
    pub carrier: f64,
    pub legs: Vec<LegSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSpec {
    pub time: f64,
    #[serde(default)]
    pub on: Vec<String>,
    #[serde(default)]
    pub off: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_solver")]
    pub solver: String,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "default_abs_tol")]
    pub abs_tol: f64,
    #[serde(default = "default_q_min")]
    pub q_min: usize,
    #[serde(default = "default_q_max")]
    pub q_max: usize,
    #[serde(default = "default_safety")]
    pub safety: f64,
    #[serde(default)]
    pub h_max: Option<f64>,
    #[serde(default)]
    pub forced_order: Option<usize>,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            solver: default_solver(),
            rel_tol: default_rel_tol(),
            abs_tol: default_abs_tol(),
            q_min: default_q_min(),
            q_max: default_q_max(),
            safety: default_safety(),
            h_max: None,
            forced_order: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub sources: Vec<SourceSpec>,
    pub elements: Vec<ElementSpec>,
    #[serde(default)]
    pub blocks: Vec<BlockSpec>,
    #[serde(default)]
    pub probes: Vec<ProbeSpec>,
    #[serde(default)]
    pub pwm: Option<PwmSpec>,
    #[serde(default)]
    pub gates: Vec<GateSpec>,
    #[serde(default)]
    pub solver: SolverSpec,
    pub t_span: [f64; 2],
    pub output_period: f64,
    /// Signals to record; all states when empty.
    #[serde(default)]
    pub record: Vec<String>,
}

/// Reads, parses and validates a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    parse_scenario(&text)
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let sc: Scenario = serde_path_to_error::deserialize(de).map_err(|e| ScenarioError::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    if sc.schema_version != SCHEMA_VERSION {
        return Err(ScenarioError::Version(sc.schema_version));
    }
    sc.build()?;
    Ok(sc)
}

/// Parameter preset as JSON, with the user's overrides merged in.
fn merged_params<P: Serialize + for<'de> Deserialize<'de>>(
    preset: P,
    overrides: &serde_json::Map<String, Value>,
    path: &str,
) -> Result<P, ScenarioError> {
    let mut base = serde_json::to_value(preset).expect("preset serializes");
    let obj = base.as_object_mut().expect("preset is an object");
    for (k, v) in overrides {
        if !obj.contains_key(k) {
            return Err(invalid(format!("{path}.{k}"), "unknown parameter"));
        }
        obj.insert(k.clone(), v.clone());
    }
    serde_json::from_value(base).map_err(|e| invalid(path, e.to_string()))
}

fn make_block(spec: &BlockSpec, path: &str) -> Result<Arc<dyn NonlinearBlock<f64>>, ScenarioError> {
    let params_path = format!("{path}.params");
    let model_err = |e: flexsim::hybrid::ModelError| invalid(params_path.clone(), e.to_string());
    Ok(match spec.model.as_str() {
        "pv" => Arc::new(PvBlock::new(&spec.name, merged_params(PvParams::module_36(), &spec.params, &params_path)?).map_err(model_err)?),
        "battery" => Arc::new(
            BatteryBlock::new(&spec.name, merged_params(BatteryParams::lead_acid_12v(), &spec.params, &params_path)?)
                .map_err(model_err)?,
        ),
        "motor" => Arc::new(
            MotorBlock::new(&spec.name, merged_params(MotorParams::small_4pole(), &spec.params, &params_path)?).map_err(model_err)?,
        ),
        other => return Err(ScenarioError::UnknownModel(other.to_string())),
    })
}

/// A scenario assembled into core objects.
pub struct Assembled {
    pub run: SimulationRun<f64>,
    pub solver: Solver,
    pub switch_names: Vec<String>,
}

impl std::fmt::Debug for Assembled {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Assembled")
            .field("states", &self.run.system.state_names())
            .field("switches", &self.switch_names)
            .field("solver", &self.solver)
            .finish()
    }
}

impl Scenario {
    pub fn n_switches(&self) -> usize {
        self.elements.iter().filter(|e| matches!(e, ElementSpec::Switch { .. })).count()
    }

    /// Checks every bound and reference and assembles the simulation.
    pub fn build(&self) -> Result<Assembled, ScenarioError> {
        let [t0, t1] = self.t_span;
        if !(t0.is_finite() && t1.is_finite() && t1 > t0) {
            return Err(invalid("t_span", "require finite t_span[0] < t_span[1]"));
        }
        if !(self.output_period > 0.0 && self.output_period.is_finite()) {
            return Err(invalid("output_period", "must be positive"));
        }
        let solver = Solver::parse(&self.solver.solver).ok_or_else(|| invalid("solver.solver", format!("unknown solver {:?}", self.solver.solver)))?;

        let source_ix: HashMap<&str, usize> = self.sources.iter().enumerate().map(|(i, s)| (s.name.as_str(), i)).collect();
        for (i, s) in self.sources.iter().enumerate() {
            s.waveform.validate().map_err(|e| invalid(format!("sources[{i}]"), e.to_string()))?;
        }
        let bank = SourceBank::new(self.sources.iter().map(|s| s.waveform.clone()).collect())
            .map_err(|e| invalid("sources", e.to_string()))?;

        let mut blocks = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let path = format!("blocks[{i}]");
            let blk = make_block(b, &path)?;
            if b.inputs.len() != blk.n_inputs() {
                return Err(invalid(format!("{path}.inputs"), format!("model {} takes {} inputs, got {}", b.model, blk.n_inputs(), b.inputs.len())));
            }
            if let Some(x0) = &b.x0 {
                if x0.len() != blk.n_states() {
                    return Err(invalid(format!("{path}.x0"), format!("expected {} values", blk.n_states())));
                }
            }
            blocks.push(blk);
        }
        let stack = BlockStack::new(blocks);
        let output_names = stack.output_names();

        let mut net = Netlist::<f64>::new(self.sources.len(), output_names.len());
        let mut port_uses = vec![0usize; output_names.len()];
        let mut initial_key = 0u64;
        let mut switch_bits: HashMap<&str, usize> = HashMap::new();
        for (i, e) in self.elements.iter().enumerate() {
            let path = format!("elements[{i}]");
            if self.elements[..i].iter().any(|o| o.name() == e.name()) {
                return Err(invalid(format!("{path}.name"), format!("duplicate element name {:?}", e.name())));
            }
            let src = |s: &str| source_ix.get(s).copied().ok_or_else(|| dangling(format!("{path}.source"), s));
            let mut out = |s: &str| {
                let k = output_names.iter().position(|n| n == s).ok_or_else(|| dangling(format!("{path}.output"), s))?;
                port_uses[k] += 1;
                Ok::<usize, ScenarioError>(k)
            };
            let (name, a, b, kind) = match e {
                ElementSpec::Resistor { name, a, b, value } => (name, a, b, ElementKind::Resistor { r: *value }),
                ElementSpec::Capacitor { name, a, b, value, v0 } => (name, a, b, ElementKind::Capacitor { c: *value, v0: *v0 }),
                ElementSpec::Inductor { name, a, b, value, i0 } => (name, a, b, ElementKind::Inductor { l: *value, i0: *i0 }),
                ElementSpec::Vsource { name, a, b, source } => (name, a, b, ElementKind::VSource { source: src(source)? }),
                ElementSpec::Isource { name, a, b, source } => (name, a, b, ElementKind::ISource { source: src(source)? }),
                ElementSpec::Switch { name, a, b, r_on, r_off, closed } => {
                    let bit = switch_bits.len();
                    switch_bits.insert(name, bit);
                    if *closed {
                        initial_key |= 1 << bit;
                    }
                    (name, a, b, ElementKind::Switch { r_on: *r_on, r_off: *r_off })
                }
                ElementSpec::Vport { name, a, b, output } => (name, a, b, ElementKind::VPort { output: out(output)? }),
                ElementSpec::Iport { name, a, b, output } => (name, a, b, ElementKind::IPort { output: out(output)? }),
            };
            net.add(name, a, b, kind);
        }
        for (k, &n) in port_uses.iter().enumerate() {
            if n != 1 {
                return Err(invalid("elements", format!("block output {} drives {n} ports, expected exactly one", output_names[k])));
            }
        }

        let quantity = |net: &Netlist<f64>, q: &QuantitySpec, path: &str| -> Result<Quantity, ScenarioError> {
            let elem = |n: &str| net.element_index(n).ok_or_else(|| dangling(path, n));
            Ok(match q {
                QuantitySpec::Voltage([p, n]) => Quantity::Voltage {
                    pos: net.node_id(p).ok_or_else(|| dangling(path, p))?,
                    neg: net.node_id(n).ok_or_else(|| dangling(path, n))?,
                },
                QuantitySpec::Current(e) => Quantity::Current { element: elem(e)? },
                QuantitySpec::Delivered(e) => Quantity::Delivered { element: elem(e)? },
                QuantitySpec::Source(s) => Quantity::Source { source: source_ix.get(s.as_str()).copied().ok_or_else(|| dangling(path, s))? },
                QuantitySpec::Output(s) => {
                    Quantity::Output { output: output_names.iter().position(|n| n == s).ok_or_else(|| dangling(path, s))? }
                }
            })
        };
        for (i, b) in self.blocks.iter().enumerate() {
            for (j, q) in b.inputs.iter().enumerate() {
                let q = quantity(&net, q, &format!("blocks[{i}].inputs[{j}]"))?;
                net.sensor(q);
            }
        }
        for (i, p) in self.probes.iter().enumerate() {
            let q = quantity(&net, &p.quantity, &format!("probes[{i}]"))?;
            net.probe(&p.name, q);
        }

        let network = CircuitNetwork::new(net).map_err(|e| invalid("elements", e.to_string()))?;
        let switch_names = network.netlist().switch_names();
        let system = HybridSystem::new(Arc::new(network), stack, bank).map_err(|e| ScenarioError::Build(e.to_string()))?;

        let mut events = Vec::new();
        for (i, g) in self.gates.iter().enumerate() {
            let mask = |names: &[String], field: &str| -> Result<u64, ScenarioError> {
                names.iter().enumerate().try_fold(0u64, |m, (j, n)| {
                    switch_bits.get(n.as_str()).map(|&b| m | (1 << b)).ok_or_else(|| dangling(format!("gates[{i}].{field}[{j}]"), n))
                })
            };
            events.push(ScheduledEvent { time: g.time, on: mask(&g.on, "on")?, off: mask(&g.off, "off")? });
        }
        let mut schedule = EventSchedule::new(events);
        if let Some(pwm) = &self.pwm {
            let mut legs = Vec::new();
            for (i, leg) in pwm.legs.iter().enumerate() {
                let path = format!("pwm.legs[{i}]");
                if let Modulator::Constant { duty } = leg.modulator {
                    if !(0.0..=1.0).contains(&duty) {
                        return Err(invalid(format!("{path}.modulator.duty"), format!("duty {duty} outside [0, 1]")));
                    }
                }
                let high = *switch_bits.get(leg.high.as_str()).ok_or_else(|| dangling(format!("{path}.high"), &leg.high))?;
                let low = match &leg.low {
                    Some(l) => Some(*switch_bits.get(l.as_str()).ok_or_else(|| dangling(format!("{path}.low"), l))?),
                    None => None,
                };
                legs.push(PwmLeg { high, low, modulator: leg.modulator.clone() });
            }
            let pwm_events = pwm_schedule(pwm.carrier, &legs, t0, t1).map_err(|e| invalid("pwm", e.to_string()))?;
            schedule = schedule.merged_with(&pwm_events);
        }

        let x_nl: Vec<f64> = self
            .blocks
            .iter()
            .zip(system.blocks().blocks())
            .flat_map(|(spec, blk)| spec.x0.clone().unwrap_or_else(|| vec![0.0; blk.n_states()]))
            .collect();
        let initial = HybridState::new(&system, t0, system.network().initial_state(), x_nl, initial_key)
            .map_err(|e| ScenarioError::Build(e.to_string()))?;

        let s = &self.solver;
        let mut controller = StepController::new(s.rel_tol, s.abs_tol).with_orders(s.q_min, s.q_max);
        controller.safety = s.safety;
        if let Some(h) = s.h_max {
            controller.h_max = h;
        }
        controller.forced_order = s.forced_order;
        controller.validate().map_err(|e| invalid("solver", e.to_string()))?;

        let names: Vec<String> = if self.record.is_empty() { system.state_names() } else { self.record.clone() };
        let mut signals: Vec<(String, Signal)> = Vec::new();
        for (i, n) in names.iter().enumerate() {
            let sig = resolve_signal(&system, n).ok_or_else(|| dangling(format!("record[{i}]"), n))?;
            signals.push((n.clone(), sig));
        }

        let run = SimulationRun::new(system, schedule, controller, initial, t1, self.output_period, signals)
            .map_err(|e| ScenarioError::Build(e.to_string()))?;
        Ok(Assembled { run, solver, switch_names })
    }
}
