//! Self-supervised novel-view synthesis and restoration for underwater scenes.
//!
//! The pipeline renders a target view patch-by-patch from a handful of posed
//! source images and, at the same time, splits what it sees into the three
//! physical components of an underwater image: the restored scene radiance,
//! the direct transmission map, and the backscatter transmission map, with a
//! global background-light estimate provided by a small variational
//! encoder/decoder.  Composing the components reproduces the captured image,
//! which is the only supervision signal the trainer needs.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`] — a small reverse-mode tape over `f64` tensors; every
//!   trainable path in the crate is expressed through it.
//! * [`geometry`] — cameras, rays, epipolar projection, depth sampling.
//! * [`dataset`] — COLMAP text I/O, scene loading, the synthetic water
//!   degradation model and the procedural toy scene generator.
//! * [`formation`] — the image formation model tying components to pixels.
//! * [`backbone`] — the convolutional feature extractor for source views.
//! * [`renderer`] — the transformer that aggregates epipolar features along
//!   rays and decodes patches of scene components.
//! * [`lightnet`] — the variational background-light estimator.
//! * [`losses`] — the self-supervised objective.
//! * [`trainer`] — batching, Adam, checkpoints, the train/finetune loops.
//! * [`eval`] — image metrics, full-frame rendering and report generation.

pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod container;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod formation;
pub mod geometry;
pub mod lightnet;
pub mod losses;
pub mod nn;
pub mod renderer;
pub mod trainer;

pub use error::UwError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, UwError>;
