//! Three-phase four-wire low-voltage feeder toolkit.
//!
//! The crate models radial LV feeders with an explicit neutral conductor,
//! solves the network state with a one-shot linearisation and a nonlinear
//! fixed-point reference, dispatches PV/battery/flexible-load fleets through
//! a centralised robust OPF or through communication-free local rules, and
//! compares both against uncontrolled operation over multi-day horizons.
//!
//! Heavy batch work (day-parallel simulations, scenario sweeps, tap
//! enumeration) runs on rayon when the default `parallel` feature is
//! enabled and falls back to plain sequential iteration otherwise.

pub mod control;
pub mod devices;
pub mod dro;
pub mod grid;
pub mod lp;
pub mod opf;
pub mod parallel;
pub mod powerflow;
pub mod sim;

pub use grid::{Conductor, FeederModel, TopologyMatrices};
pub use powerflow::{NodalInjection, PowerFlowResult};
