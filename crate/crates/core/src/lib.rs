//! Zero-shot, text-driven video editing on a frozen latent diffusion model.
//!
//! A clip is encoded, inverted with deterministic DDIM, and denoised towards a
//! prompt while
//!
//! - per-frame depth features are injected into the UNet ([`depth`]),
//! - self-attention looks up keys and values in the first frame
//!   ([`attention::AttentionMode::Faa`]), and
//! - at every step the depth-guided latent is pulled towards the depth-free one
//!   by a cosine-loss gradient step ([`optimizer`]).
//!
//! [`pipeline::Editor`] runs the whole chain; [`metrics`] scores the result;
//! [`dataset`] builds caption/prompt manifests; [`ablation`] runs the depth ×
//! attention grid. Everything runs on [`backend::ToyBackend`], a small seeded
//! network suite, so results are reproducible to the bit.
//!
//! ```
//! use eve_core::{EditConfig, Editor, StubDepth, ToyBackend};
//! use eve_core::synthetic::Fixture;
//!
//! let backend = ToyBackend::default();
//! let editor = Editor { backend: &backend, depth: &StubDepth };
//! let cfg = EditConfig { prompt: "a glass lantern".into(), frames: 2, steps: 3, resolution: 32, ..Default::default() };
//! let result = editor.edit_frames(&Fixture::PulsingDisc.clip(2, 32), &cfg)?;
//! assert_eq!(result.frames.len(), 2);
//! # Ok::<(), eve_core::Error>(())
//! ```
//!
//! The guide in `book/` walks through each piece; its snippets are compiled as
//! doctests of this crate.

pub mod ablation;
pub mod attention;
pub mod backend;
pub mod dataset;
pub mod ddim;
pub mod depth;
pub mod error;
pub mod latent;
pub mod metrics;
pub mod nn;
pub mod optimizer;
pub mod pipeline;
pub mod predictor;
pub mod schedule;
pub mod synthetic;
pub mod text;
pub mod unet;
pub mod video;

pub use attention::AttentionMode;
pub use backend::{Backend, ToyBackend};
pub use depth::{DepthEstimator, StubDepth};
pub use error::{Error, Result};
pub use latent::{Latent, LatentState};
pub use metrics::MetricsReport;
pub use optimizer::OptimizerConfig;
pub use pipeline::{EditConfig, EditResult, Editor};
pub use schedule::{BetaSchedule, NoiseSchedule};

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
mod readme {}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/ddim.md")]
    mod ddim {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/depth.md")]
    mod depth {}
    #[doc = include_str!("../../../book/src/optimization.md")]
    mod optimization {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/dataset.md")]
    mod dataset {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
