//! Netlist compilation into per-topology state-space matrices.
//!
//! Modified nodal analysis with capacitors treated as voltage sources equal to
//! their state and inductors as current sources equal to theirs. Solving
//! `G z = E w` for the node voltages and branch currents `z` in terms of
//! `w = [x1; u1; y]` yields every matrix row as a linear functional of `z`.
//! Switches are two-valued resistors, so the state vector never changes shape.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::hybrid::{PwlNetwork, TopologyError, TopologyMatrices};
use crate::linalg::{Lu, Matrix};
use crate::scalar::Real;

pub type NodeId = usize;

/// The reference node.
pub const GROUND: NodeId = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompileError {
    #[error("singular nodal matrix: {0} is floating")]
    Singular(String),
    #[error("element {element}: {message}")]
    BadElement { element: String, message: String },
    #[error("node {0} is not connected to ground")]
    Unreachable(String),
    #[error("switch state {key:#b} has bits beyond the {count} switches")]
    KeyWidth { key: u64, count: usize },
    #[error("at most 64 switches are supported, found {0}")]
    TooManySwitches(usize),
    #[error("invalid reference: {0}")]
    Reference(String),
}

impl From<CompileError> for TopologyError {
    fn from(e: CompileError) -> Self {
        let key = match &e {
            CompileError::KeyWidth { key, .. } => *key,
            _ => 0,
        };
        TopologyError { key, message: e.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ElementKind<T> {
    Resistor { r: T },
    Capacitor { c: T, v0: T },
    Inductor { l: T, i0: T },
    /// `v(a) - v(b) = u1[source]`.
    VSource { source: usize },
    /// Injects `u1[source]` into node `a`, drawing it from node `b`.
    ISource { source: usize },
    /// Resistor taking `r_on` when its bit is set, `r_off` otherwise.
    Switch { r_on: T, r_off: T },
    /// `v(a) - v(b) = y[output]`.
    VPort { output: usize },
    /// Injects `y[output]` into node `a`, drawing it from node `b`.
    IPort { output: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Element<T> {
    pub name: String,
    pub a: NodeId,
    pub b: NodeId,
    pub kind: ElementKind<T>,
}

/// A measurable linear quantity: feeds a nonlinear-block input or a probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    Voltage { pos: NodeId, neg: NodeId },
    /// Current through element `element`, from its `a` terminal to its `b` terminal.
    Current { element: usize },
    /// Current leaving terminal `a` of a source or port into the network,
    /// i.e. the negated [`Quantity::Current`].
    Delivered { element: usize },
    /// An independent source value.
    Source { source: usize },
    /// A nonlinear-block output value.
    Output { output: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Netlist<T> {
    node_names: Vec<String>,
    elements: Vec<Element<T>>,
    sensors: Vec<Quantity>,
    probes: Vec<(String, Quantity)>,
    n_sources: usize,
    n_outputs: usize,
}

impl<T: Real> Netlist<T> {
    /// Empty netlist for `n_sources` independent sources and `n_outputs`
    /// nonlinear-block outputs.
    pub fn new(n_sources: usize, n_outputs: usize) -> Self {
        Self {
            node_names: vec!["0".to_string()],
            elements: Vec::new(),
            sensors: Vec::new(),
            probes: Vec::new(),
            n_sources,
            n_outputs,
        }
    }

    /// Returns the id for `name`, creating the node on first use. `0`, `gnd`
    /// and `ground` all name the reference node.
    pub fn node(&mut self, name: &str) -> NodeId {
        if matches!(name, "0" | "gnd" | "GND" | "ground") {
            return GROUND;
        }
        if let Some(i) = self.node_names.iter().position(|n| n == name) {
            return i;
        }
        self.node_names.push(name.to_string());
        self.node_names.len() - 1
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        if matches!(name, "0" | "gnd" | "GND" | "ground") {
            return Some(GROUND);
        }
        self.node_names.iter().position(|n| n == name)
    }

    pub fn node_name(&self, id: NodeId) -> &str {
        &self.node_names[id]
    }

    pub fn n_nodes(&self) -> usize {
        self.node_names.len() - 1
    }

    /// Adds an element between named nodes; returns its index.
    pub fn add(&mut self, name: &str, a: &str, b: &str, kind: ElementKind<T>) -> usize {
        let (a, b) = (self.node(a), self.node(b));
        self.elements.push(Element { name: name.to_string(), a, b, kind });
        self.elements.len() - 1
    }

    pub fn element_index(&self, name: &str) -> Option<usize> {
        self.elements.iter().position(|e| e.name == name)
    }

    pub fn elements(&self) -> &[Element<T>] {
        &self.elements
    }

    /// Appends a nonlinear-block input; sensors are numbered in call order.
    pub fn sensor(&mut self, q: Quantity) -> usize {
        self.sensors.push(q);
        self.sensors.len() - 1
    }

    pub fn sensors(&self) -> &[Quantity] {
        &self.sensors
    }

    pub fn probe(&mut self, name: &str, q: Quantity) {
        self.probes.push((name.to_string(), q));
    }

    pub fn probes(&self) -> &[(String, Quantity)] {
        &self.probes
    }

    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn n_switches(&self) -> usize {
        self.elements.iter().filter(|e| matches!(e.kind, ElementKind::Switch { .. })).count()
    }

    /// Element indices of switches in bitmask order.
    pub fn switch_elements(&self) -> Vec<usize> {
        (0..self.elements.len()).filter(|&k| matches!(self.elements[k].kind, ElementKind::Switch { .. })).collect()
    }

    pub fn switch_names(&self) -> Vec<String> {
        self.switch_elements().into_iter().map(|k| self.elements[k].name.clone()).collect()
    }

    /// Element indices of reactive elements in state order.
    pub fn state_elements(&self) -> Vec<usize> {
        (0..self.elements.len())
            .filter(|&k| matches!(self.elements[k].kind, ElementKind::Capacitor { .. } | ElementKind::Inductor { .. }))
            .collect()
    }

    pub fn state_names(&self) -> Vec<String> {
        self.state_elements()
            .into_iter()
            .map(|k| {
                let e = &self.elements[k];
                match e.kind {
                    ElementKind::Capacitor { .. } => format!("v({})", e.name),
                    _ => format!("i({})", e.name),
                }
            })
            .collect()
    }

    pub fn initial_state(&self) -> Vec<T> {
        self.state_elements()
            .into_iter()
            .map(|k| match self.elements[k].kind {
                ElementKind::Capacitor { v0, .. } => v0,
                ElementKind::Inductor { i0, .. } => i0,
                _ => unreachable!(),
            })
            .collect()
    }

    /// Checks element values, references, switch count and connectivity.
    pub fn validate(&self) -> Result<(), CompileError> {
        let bad = |e: &Element<T>, m: &str| CompileError::BadElement { element: e.name.clone(), message: m.to_string() };
        let positive = |v: T| v > T::zero() && v.is_finite();
        for e in &self.elements {
            if e.a == e.b {
                return Err(bad(e, "both terminals on the same node"));
            }
            match e.kind {
                ElementKind::Resistor { r } if !positive(r) => return Err(bad(e, "resistance must be positive")),
                ElementKind::Capacitor { c, v0 } if !positive(c) || !v0.is_finite() => {
                    return Err(bad(e, "capacitance must be positive"))
                }
                ElementKind::Inductor { l, i0 } if !positive(l) || !i0.is_finite() => {
                    return Err(bad(e, "inductance must be positive"))
                }
                ElementKind::Switch { r_on, r_off } if !positive(r_on) || !positive(r_off) => {
                    return Err(bad(e, "switch resistances must be positive"))
                }
                ElementKind::VSource { source } | ElementKind::ISource { source } if source >= self.n_sources => {
                    return Err(bad(e, "source index out of range"))
                }
                ElementKind::VPort { output } | ElementKind::IPort { output } if output >= self.n_outputs => {
                    return Err(bad(e, "output index out of range"))
                }
                _ => {}
            }
        }
        let n_sw = self.n_switches();
        if n_sw > 64 {
            return Err(CompileError::TooManySwitches(n_sw));
        }
        for out in 0..self.n_outputs {
            let drivers = self
                .elements
                .iter()
                .filter(|e| matches!(e.kind, ElementKind::VPort { output } | ElementKind::IPort { output } if output == out))
                .count();
            if drivers > 1 {
                return Err(CompileError::Reference(format!("output {out} drives {drivers} ports")));
            }
        }
        for q in self.sensors.iter().chain(self.probes.iter().map(|(_, q)| q)) {
            self.check_quantity(q)?;
        }
        self.check_connectivity()
    }

    fn check_quantity(&self, q: &Quantity) -> Result<(), CompileError> {
        let ok = match *q {
            Quantity::Voltage { pos, neg } => pos < self.node_names.len() && neg < self.node_names.len(),
            Quantity::Current { element } | Quantity::Delivered { element } => element < self.elements.len(),
            Quantity::Source { source } => source < self.n_sources,
            Quantity::Output { output } => output < self.n_outputs,
        };
        if ok {
            Ok(())
        } else {
            Err(CompileError::Reference(format!("{q:?}")))
        }
    }

    fn check_connectivity(&self) -> Result<(), CompileError> {
        let n = self.node_names.len();
        let mut adj = vec![Vec::new(); n];
        for e in &self.elements {
            adj[e.a].push(e.b);
            adj[e.b].push(e.a);
        }
        let mut seen = vec![false; n];
        seen[GROUND] = true;
        let mut queue = VecDeque::from([GROUND]);
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(k) => Err(CompileError::Unreachable(self.node_names[k].clone())),
            None => Ok(()),
        }
    }
}

/// Linear functional over `z` (node voltages then branch currents) plus
/// direct `w` terms.
struct Functional<T> {
    z: Vec<(usize, T)>,
    w: Vec<(usize, T)>,
}

/// Builds the matrices for one switch state.
pub fn compile<T: Real>(netlist: &Netlist<T>, switch_state: u64) -> Result<TopologyMatrices<T>, CompileError> {
    netlist.validate()?;
    let n_sw = netlist.n_switches();
    if n_sw < 64 && switch_state >> n_sw != 0 {
        return Err(CompileError::KeyWidth { key: switch_state, count: n_sw });
    }
    let n_nodes = netlist.n_nodes();
    let states = netlist.state_elements();
    let n1 = states.len();
    let (l1, m) = (netlist.n_sources, netlist.n_outputs);
    let state_col: HashMap<usize, usize> = states.iter().enumerate().map(|(k, &e)| (e, k)).collect();

    // branch-current unknowns for voltage-defined elements
    let mut branch_of: HashMap<usize, usize> = HashMap::new();
    for (k, e) in netlist.elements.iter().enumerate() {
        if matches!(e.kind, ElementKind::Capacitor { .. } | ElementKind::VSource { .. } | ElementKind::VPort { .. }) {
            branch_of.insert(k, n_nodes + branch_of.len());
        }
    }
    let size = n_nodes + branch_of.len();
    let n_w = n1 + l1 + m;
    let mut g = Matrix::zeros(size, size);
    let mut e_mat = Matrix::zeros(size, n_w);
    // node 0 is ground; node k maps to row k - 1
    let row = |node: NodeId| node.checked_sub(1);

    let mut switch_bit = 0usize;
    for (k, el) in netlist.elements.iter().enumerate() {
        let conductance = match el.kind {
            ElementKind::Resistor { r } => Some(T::one() / r),
            ElementKind::Switch { r_on, r_off } => {
                let closed = (switch_state >> switch_bit) & 1 == 1;
                switch_bit += 1;
                Some(T::one() / if closed { r_on } else { r_off })
            }
            _ => None,
        };
        if let Some(gc) = conductance {
            let (ra, rb) = (row(el.a), row(el.b));
            if let Some(i) = ra {
                g[(i, i)] += gc;
            }
            if let Some(j) = rb {
                g[(j, j)] += gc;
            }
            if let (Some(i), Some(j)) = (ra, rb) {
                g[(i, j)] -= gc;
                g[(j, i)] -= gc;
            }
            continue;
        }
        let w_col = match el.kind {
            ElementKind::Capacitor { .. } | ElementKind::Inductor { .. } => state_col[&k],
            ElementKind::VSource { source } | ElementKind::ISource { source } => n1 + source,
            ElementKind::VPort { output } | ElementKind::IPort { output } => n1 + l1 + output,
            _ => unreachable!(),
        };
        match el.kind {
            ElementKind::Capacitor { .. } | ElementKind::VSource { .. } | ElementKind::VPort { .. } => {
                let br = branch_of[&k];
                if let Some(i) = row(el.a) {
                    g[(i, br)] += T::one();
                    g[(br, i)] += T::one();
                }
                if let Some(j) = row(el.b) {
                    g[(j, br)] -= T::one();
                    g[(br, j)] -= T::one();
                }
                e_mat[(br, w_col)] = T::one();
            }
            ElementKind::Inductor { .. } => {
                // current flows a -> b through the inductor
                if let Some(i) = row(el.a) {
                    e_mat[(i, w_col)] -= T::one();
                }
                if let Some(j) = row(el.b) {
                    e_mat[(j, w_col)] += T::one();
                }
            }
            ElementKind::ISource { .. } | ElementKind::IPort { .. } => {
                if let Some(i) = row(el.a) {
                    e_mat[(i, w_col)] += T::one();
                }
                if let Some(j) = row(el.b) {
                    e_mat[(j, w_col)] -= T::one();
                }
            }
            _ => unreachable!(),
        }
    }

    let lu = Lu::factor(&g).map_err(|s| {
        let what = if s.column < n_nodes {
            format!("node {}", netlist.node_names[s.column + 1])
        } else {
            let k = branch_of.iter().find(|(_, &b)| b == s.column).map(|(&k, _)| k).unwrap_or(0);
            format!("branch of {}", netlist.elements[k].name)
        };
        CompileError::Singular(what)
    })?;
    let sol = lu.solve_matrix(&e_mat);

    let voltage = |pos: NodeId, neg: NodeId| {
        let mut z = Vec::new();
        if let Some(i) = row(pos) {
            z.push((i, T::one()));
        }
        if let Some(j) = row(neg) {
            z.push((j, -T::one()));
        }
        z
    };
    let current_through = |k: usize| -> Functional<T> {
        let el = &netlist.elements[k];
        let scaled = |s: T| Functional { z: voltage(el.a, el.b).into_iter().map(|(i, c)| (i, c * s)).collect(), w: vec![] };
        match el.kind {
            ElementKind::Resistor { r } => scaled(T::one() / r),
            ElementKind::Switch { r_on, r_off } => {
                let bit = netlist.switch_elements().iter().position(|&s| s == k).expect("switch listed");
                let closed = (switch_state >> bit) & 1 == 1;
                scaled(T::one() / if closed { r_on } else { r_off })
            }
            ElementKind::Capacitor { .. } | ElementKind::VSource { .. } | ElementKind::VPort { .. } => {
                Functional { z: vec![(branch_of[&k], T::one())], w: vec![] }
            }
            ElementKind::Inductor { .. } => Functional { z: vec![], w: vec![(state_col[&k], T::one())] },
            ElementKind::ISource { source } => Functional { z: vec![], w: vec![(n1 + source, -T::one())] },
            ElementKind::IPort { output } => Functional { z: vec![], w: vec![(n1 + l1 + output, -T::one())] },
        }
    };
    let quantity = |q: &Quantity| -> Functional<T> {
        match *q {
            Quantity::Voltage { pos, neg } => Functional { z: voltage(pos, neg), w: vec![] },
            Quantity::Current { element } => current_through(element),
            Quantity::Delivered { element } => {
                let f = current_through(element);
                Functional {
                    z: f.z.into_iter().map(|(i, c)| (i, -c)).collect(),
                    w: f.w.into_iter().map(|(i, c)| (i, -c)).collect(),
                }
            }
            Quantity::Source { source } => Functional { z: vec![], w: vec![(n1 + source, T::one())] },
            Quantity::Output { output } => Functional { z: vec![], w: vec![(n1 + l1 + output, T::one())] },
        }
    };
    let eval = |f: &Functional<T>| -> Vec<T> {
        let mut out = vec![T::zero(); n_w];
        for &(zi, c) in &f.z {
            for (o, v) in out.iter_mut().zip(sol.row(zi)) {
                *o += c * *v;
            }
        }
        for &(wi, c) in &f.w {
            out[wi] += c;
        }
        out
    };

    let mut dyn_rows = Vec::with_capacity(n1);
    for &k in &states {
        let el = &netlist.elements[k];
        let r = match el.kind {
            ElementKind::Capacitor { c, .. } => {
                eval(&Functional { z: vec![(branch_of[&k], T::one() / c)], w: vec![] })
            }
            ElementKind::Inductor { l, .. } => {
                eval(&Functional { z: voltage(el.a, el.b).into_iter().map(|(i, v)| (i, v / l)).collect(), w: vec![] })
            }
            _ => unreachable!(),
        };
        dyn_rows.push(r);
    }
    let sensor_rows: Vec<Vec<T>> = netlist.sensors.iter().map(|q| eval(&quantity(q))).collect();
    let probe_rows: Vec<Vec<T>> = netlist.probes.iter().map(|(_, q)| eval(&quantity(q))).collect();

    let split = |rows: &[Vec<T>]| {
        let r = rows.len();
        (
            Matrix::from_fn(r, n1, |i, j| rows[i][j]),
            Matrix::from_fn(r, l1, |i, j| rows[i][n1 + j]),
            Matrix::from_fn(r, m, |i, j| rows[i][n1 + l1 + j]),
        )
    };
    let (a, b1, b2) = split(&dyn_rows);
    let (c, d1, d2) = split(&sensor_rows);
    let (px, pu, py) = split(&probe_rows);
    Ok(TopologyMatrices { a, b1, b2, c, d1, d2, px, pu, py })
}

/// Compiled netlist with a per-bitmask matrix cache.
#[derive(Debug)]
pub struct CircuitNetwork<T> {
    netlist: Netlist<T>,
    cache: Mutex<HashMap<u64, Arc<TopologyMatrices<T>>>>,
}

impl<T: Real> CircuitNetwork<T> {
    /// Validates the netlist and compiles the all-open topology eagerly.
    pub fn new(netlist: Netlist<T>) -> Result<Self, CompileError> {
        let net = Self { netlist, cache: Mutex::new(HashMap::new()) };
        net.topology(0)?;
        Ok(net)
    }

    pub fn netlist(&self) -> &Netlist<T> {
        &self.netlist
    }

    /// Compile on miss, cached value on hit.
    pub fn topology(&self, key: u64) -> Result<Arc<TopologyMatrices<T>>, CompileError> {
        if let Some(m) = self.cache.lock().expect("topology cache poisoned").get(&key) {
            return Ok(m.clone());
        }
        let mats = Arc::new(compile(&self.netlist, key)?);
        let mut cache = self.cache.lock().expect("topology cache poisoned");
        Ok(cache.entry(key).or_insert(mats).clone())
    }

    pub fn cached_topologies(&self) -> usize {
        self.cache.lock().expect("topology cache poisoned").len()
    }
}

impl<T: Real> PwlNetwork<T> for CircuitNetwork<T> {
    fn n_states(&self) -> usize {
        self.netlist.state_elements().len()
    }

    fn n_switches(&self) -> usize {
        self.netlist.n_switches()
    }

    fn matrices(&self, key: u64) -> Result<Arc<TopologyMatrices<T>>, TopologyError> {
        self.topology(key).map_err(|e| TopologyError { key, message: e.to_string() })
    }

    fn state_names(&self) -> Vec<String> {
        self.netlist.state_names()
    }

    fn probe_names(&self) -> Vec<String> {
        self.netlist.probes.iter().map(|(n, _)| n.clone()).collect()
    }

    fn initial_state(&self) -> Vec<T> {
        self.netlist.initial_state()
    }
}
