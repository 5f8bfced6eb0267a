//! EMG intent classification with meta-learned fast adaptation.
//!
//! This crate implements the full pipeline for three-class hand-intent
//! inferral (relax / open / close) from 8-channel surface EMG:
//!
//! * [`dataio`] — recording files, the clip / rescale / window preprocessing
//!   chain, and the windowed-sample representation fed to the classifier.
//! * [`synth`] — a deterministic synthetic multi-subject, multi-session
//!   corpus generator with controllable subject signatures and session drift.
//! * [`tasks`] — support/query task construction from recordings and the
//!   session- and subject-adaptation scenario splits.
//! * [`nn`] — the 3-layer fully connected classifier with exact analytic
//!   gradients, Hessian-vector products, and a finite-difference oracle.
//! * [`meta`] — meta-training with second-order gradients through the
//!   unrolled inner loop, fine-tuning, and the conventional/no-pretraining
//!   baselines.
//! * [`harness`] — experiment driver: method evaluation over scenario
//!   splits, ablations, and result tables.
//!
//! All numeric state is `f64` and every stochastic choice flows from named,
//! explicitly derived seed streams ([`seeds`]), so training runs and corpus
//! generation are bit-reproducible, including under parallel execution.

pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod harness;
pub mod meta;
pub mod nn;
pub mod seeds;
pub mod synth;
pub mod tasks;

pub use error::{Error, Result};
