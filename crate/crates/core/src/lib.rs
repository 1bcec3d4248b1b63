//! Supervised contrastive representation learning for respiratory sound
//! classification.
//!
//! The pipeline runs manifest ingestion → waveform preprocessing and log-mel
//! extraction → SpecAugment views → a CNN encoder with classifier and
//! projection heads → cross-entropy / supervised-contrastive objectives →
//! training with linear probing → challenge metrics (Se, Sp, Sc, HS).

pub mod augment;
pub mod config;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod exec;
pub mod losses;
pub mod manifest;
pub mod nn;
pub mod optim;
pub mod rundir;
pub mod synthgen;
pub mod train;

pub use error::{Error, Result};
