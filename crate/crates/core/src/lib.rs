pub mod corpus;
pub mod solidity_prep;
pub mod evm;
pub mod embedding;
pub mod cfg;
pub mod model;
pub mod synthetic;
pub mod train_eval;
pub mod pipeline;

pub type ModelF32 = model::Model<f32>;
pub type ModelF64 = model::Model<f64>;
pub type GraphTensorsF32 = cfg::GraphTensors<f32>;
pub type GraphTensorsF64 = cfg::GraphTensors<f64>;
pub type ModelInputF32 = model::ModelInput<f32>;
pub type ModelInputF64 = model::ModelInput<f64>;
pub type ExampleF32 = train_eval::Example<f32>;
pub type ExampleF64 = train_eval::Example<f64>;
