pub mod classify;
pub mod convergence;
pub mod registry;
pub mod dialogue;
pub mod speech;
pub mod analysis;
pub mod config;
pub mod session;
pub mod experiment;
