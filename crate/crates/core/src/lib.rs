pub mod cli;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod nets;
pub mod objective;
pub mod rng;
pub mod trainer;
