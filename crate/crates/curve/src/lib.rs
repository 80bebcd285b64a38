pub mod encoder;
pub mod error;
pub mod fdcheck;
pub mod intervention;
pub mod nn;
pub mod rng;
pub mod checkpoint;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod objectives;
pub mod reasoner;
pub mod scene;
pub mod structure;
pub mod train;
pub mod tensor;
