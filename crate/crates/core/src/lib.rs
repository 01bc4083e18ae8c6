//! Single-pixel compressive imaging through a stochastic particle modulator.
//!
//! The pipeline runs scene synthesis ([`scene`]), random particle masks
//! ([`slm`]), single-detector acquisition ([`measurement`]), total-variation
//! reconstruction ([`tv`]) and Fourier-domain resolution metrology
//! ([`resolution`]). [`experiment`] wires the stages into reproducible sweeps.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod grid;
pub mod measurement;
pub mod operator;
pub mod pgm;
pub mod resolution;
pub mod rng;
pub mod scene;
pub mod slm;
pub mod tv;

pub use error::{Error, Result};
pub use grid::Grid;
pub use measurement::{MeasurementRecord, MeasurementSet, NoiseModel};
pub use resolution::{CutoffEstimate, EffectiveResolution, QualityMetrics, RadialSpectrum};
pub use scene::Scene;
pub use slm::{ParticlePlacement, ParticleShape, ParticleSpec, SamplingMask, SlmFrame};
pub use tv::{ReconResult, TvConfig, TvVariant};
