//! Binary-interaction kinetic models with Riccati-based feedback control.
//!
//! The crate covers the full pipeline: semilinearized pair dynamics for a few
//! alignment/consensus models, discrete-time Riccati synthesis of the binary
//! feedback law, dataset generation, feedforward/recurrent network surrogates
//! of the controller, Monte Carlo particle schemes driven by either controller,
//! a 1-d mean-field solver, and diagnostics for comparing the lot.

pub mod dataio;
pub mod diagnostics;
pub mod kinetic;
pub mod meanfield;
pub mod models;
pub mod neural;
pub mod riccati;
pub mod rng;
pub mod sdre;
