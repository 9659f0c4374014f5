//! Deterministic discrete-event simulator of an MPC-controlled ball-and-beam
//! whose controller runs as a migratable dataflow actor on one of four compute
//! tiers (plant-side device, radio edge, regional data centre, public cloud).

pub mod control;
pub mod des;
pub mod net;
mod optional;
pub mod plant;
pub mod qp;
pub mod runtime;
pub mod scenarios;
pub mod stats;
