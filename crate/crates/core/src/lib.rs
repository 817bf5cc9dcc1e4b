#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::type_complexity, clippy::needless_range_loop)]

pub mod circuit;
pub mod diffops;
pub mod hybrid;
pub mod integrator;
pub mod linalg;
pub mod models;
pub mod reference;
pub mod scalar;
pub mod sources;
pub mod taylor;
pub mod waveform;

pub use scalar::Real;

pub type Matrix = linalg::Matrix<f64>;
pub type TaylorCoefficients = taylor::TaylorCoefficients<f64>;
pub type StepController = taylor::StepController<f64>;
pub type StencilBank = diffops::StencilBank<f64>;
pub type HybridSystem = hybrid::HybridSystem<f64>;
pub type HybridState = hybrid::HybridState<f64>;
pub type Netlist = circuit::Netlist<f64>;
pub type SimulationRun = integrator::SimulationRun<f64>;
pub type Waveform = waveform::Waveform<f64>;
