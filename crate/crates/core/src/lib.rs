pub mod graph;
pub mod linalg;
pub mod probability;
pub mod rng;
pub mod state_space;
pub mod qp;
pub mod mpc;
pub mod sim;
pub mod config;
pub mod trace;
pub mod svg;
