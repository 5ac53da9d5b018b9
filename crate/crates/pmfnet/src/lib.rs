//! Progressive multi-scale fusion network for RGB-D salient object
//! detection: two VGG19 streams, mask-guided cross-modal aggregation and
//! refinement, deep-supervised training, and the standard saliency metric
//! suite.

pub mod backbone;
pub mod error;
pub mod fusion;
pub mod mgfa;
pub mod mgrm;
pub mod nn;

pub use error::{PmfError, Result};

/// CPU backends used across the crate.
pub mod backend {
    pub type Cpu = burn::backend::NdArray<f32>;
    pub type CpuAutodiff = burn::backend::Autodiff<Cpu>;
}

#[cfg(test)]
pub(crate) mod testing {
    pub type TestBackend = crate::backend::Cpu;
    pub type TestAutodiffBackend = crate::backend::CpuAutodiff;
}
