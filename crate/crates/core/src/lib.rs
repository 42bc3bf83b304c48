pub mod ablation;
pub mod cli;
pub mod config;
pub mod data;
pub mod dual;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod net;
pub mod pipeline;
pub mod prob;
pub mod synth;
pub mod teachers;
