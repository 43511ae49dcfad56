//! Simulation of Rowhammer attacks against stack-resident and spilled
//! register variables.

pub mod attacker;
pub mod config;
pub mod dram;
pub mod gadgetscan;
pub mod memwalk;
pub mod osmodel;
pub mod report;
pub mod rng;
pub mod scenario;
pub mod victims;
