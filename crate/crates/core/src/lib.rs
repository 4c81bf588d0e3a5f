//! Multi-scale self-supervised representation learning in a single Poincaré
//! ball.
//!
//! Image views at several scales, from tissue crops down to single masked
//! nuclei, share one encoder whose outputs are mapped into the ball and
//! softly assigned to learnable prototypes on its boundary via the Busemann
//! function. Views related by spatial inclusion are trained to agree on
//! their assignments.

pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod container;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod prototypes;
pub mod synth;
pub mod training;
pub mod views;

pub use error::{Error, Result};
