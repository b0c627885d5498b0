//! Test-time augmentation ensembles for black-box document transcription.
//!
//! The crate covers the whole pipeline around an opaque transcriber:
//!
//! - [`augment`]: label-preserving image distortions and their parameter grids.
//! - [`transcriber`]: the remote model client, a correlated noisy-channel
//!   simulator with the same interface, and the JSONL response cache.
//! - [`consensus`]: Needleman–Wunsch alignment and progressive vote fusion.
//! - [`metrics`]: CER, field accuracy, error correlation and calibration.
//! - [`selection`]: ensemble selection strategies and the k-fold harness.
//! - [`theory`]: Monte-Carlo checks of correlated majority voting.
//!
//! Data-parallel loops go through [`par`], which is backed by rayon when the
//! `parallel` feature is on and by plain iterators otherwise. Every parallel
//! reduction collects in input order before summing, so results are
//! bit-identical for any thread count.

pub mod augment;
pub mod consensus;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod par;
pub mod report;
pub mod rng;
pub mod selection;
pub mod synth;
pub mod text;
pub mod theory;
pub mod transcriber;

pub use augment::{AugmentationGrid, AugmentationSpec, Category};
pub use consensus::{nw_align, progressive_consensus, Alignment, ConsensusResult, SampleSet};
pub use model::{Dataset, DocumentImage, FieldName, FieldSet, Record};
pub use text::normalize_text;
