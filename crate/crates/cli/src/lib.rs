//! File formats, configuration, experiment orchestration and the
//! command-line front end for the sifted-GAN augmentation pipeline.

pub mod artifacts;
pub mod config;
pub mod experiment;
pub mod formats;
pub mod settings;

pub use siftgan_core as core;
