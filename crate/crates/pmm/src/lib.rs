//! Behavioral model of the on-chip control system of a superconducting
//! quantum annealing processor.
//!
//! The processor stores its problem definition in inductively coupled
//! two-stage flux DACs (a programmable magnetic memory). Programming pulses
//! are steered to individual DAC stages by a binary tree of single-flux-
//! quantum demultiplexer gates, and the stored flux biases rf-SQUID qubits
//! and tunable couplers. This crate models each layer well enough to close
//! the loop from an Ising problem definition, through quantization,
//! pulse compilation, routing, and calibration, down to an exact
//! state-vector simulation of the programmed anneal:
//!
//! - [`topology`]: unit-cell grids of qubits and couplers and the DAC
//!   inventory that programs them.
//! - [`flux_dac`]: the two-stage (COARSE/FINE) flux DAC, its storage
//!   capacity, transformer attenuation, and reset behavior.
//! - [`demux`]: the pulse-routing tree, its operating margins, and the
//!   statistics of routing errors.
//! - [`noise`]: dissipation the DAC circuitry reflects into a qubit, as an
//!   equivalent resistance and a flux noise density.
//! - [`device`]: rf-SQUID potential, degeneracy-point measurement, gain
//!   elements, and the coupler susceptibility curve.
//! - [`annealer`]: Ising objectives, brute-force ground truth, exact
//!   small-system anneal simulation, and problem quantization.
//! - [`controller`]: pulse-program compilation, execution against the
//!   routing and DAC models, and closed-loop calibration.
//! - [`kvfile`]: the plain-text key=value format used for parameter,
//!   calibration, and config files.

pub mod annealer;
pub mod controller;
pub mod demux;
pub mod device;
pub mod flux_dac;
pub mod kvfile;
pub mod noise;
pub mod topology;

/// Magnetic flux quantum, in webers.
pub const PHI_0_WB: f64 = 2.067833848e-15;

/// Boltzmann constant, in joules per kelvin.
pub const K_B_J_PER_K: f64 = 1.380649e-23;
