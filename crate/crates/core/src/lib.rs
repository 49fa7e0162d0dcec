//! Hyperspectral image sharpening by ADMM with a scene-adapted
//! Gaussian-mixture denoiser, plus the diagnostics that justify it.

pub mod config;
pub mod cube;
pub mod degradation;
pub mod denoiser;
pub mod error;
pub mod fft;
pub mod gmm;
pub mod image;
pub mod metrics;
pub mod scalar;
pub mod sharpen;
pub mod sim;

pub use config::KeyValues;
pub use cube::HSCube;
pub use degradation::{BlurKernel, DegradationModel, SubsampleMask};
pub use denoiser::{DenoiserReport, FixedWeightPlan};
pub use error::{Error, Result};
pub use gmm::{EmOptions, EmReport, GmmModel, Responsibilities};
pub use image::{BandImage, PatchGeometry, PatchPartition, PatchSet};
pub use metrics::{evaluate, MetricReport, SRE_SENTINEL_DB};
pub use scalar::{real, Scalar};
pub use sharpen::{
    IterationRecord, ObjectiveValue, SharpenOutput, SharpeningProblem, SolverParams, SolverState,
    SubspaceBasis,
};
pub use sim::{degrade, generate_scene, Degraded, SceneSpec, SimulationConfig, SnrTarget};

/// Default working precision for the CLI and convenience aliases.
pub type Real = f64;
pub type BandImage64 = BandImage<Real>;
pub type GmmModel64 = GmmModel<Real>;
