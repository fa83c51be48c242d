//! Core library for a desk-scale simulator of cavity-enhanced photon-pair
//! distribution links: comb-structured two-photon sources, fiber and
//! wavelength-conversion channels, seeded TCSPC Monte Carlo, coincidence
//! analysis, and 16-basis polarization tomography.
//!
//! Layering, bottom up:
//!
//! * [`qstate`] - two-qubit states and entanglement metrics
//! * [`source`] - analytic comb correlation model
//! * [`channel`] - fiber, converter, and memory closed forms
//! * [`scenario`] - full link configuration shared by simulation and CLI
//! * [`sim`] - timestamp-level Monte Carlo and histogramming
//! * [`analysis`] - g2(0), comb fitting, linewidth and bandwidth extraction
//! * [`tomo`] - projectors, linear inversion, maximum-likelihood fit
//!
//! Everything is deterministic given a seed; parallel simulation derives one
//! RNG stream per time slice so results do not depend on thread count.

pub mod analysis;
pub mod channel;
pub mod qstate;
pub mod scenario;
pub mod sim;
pub mod source;
pub mod tomo;

/// Speed of light in vacuum, m/s.
pub const C_LIGHT_M_PER_S: f64 = 299_792_458.0;
