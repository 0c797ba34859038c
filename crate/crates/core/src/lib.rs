//! Reach-control navigation over a box partition with unknown dynamics.

pub mod cli;
pub mod dynamics;
pub mod geometry;
pub mod graph;
pub mod lincon;
pub mod planner;
pub mod reach;
pub mod sysid;
