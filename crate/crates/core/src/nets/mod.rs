//! Conditional generator, conditional discriminator, the classifier and
//! their losses.
//!
//! Labels enter both GAN networks as one-hot codes: concatenated to the noise
//! vector for the generator, broadcast to extra input planes for the
//! discriminator.

mod classifier;
mod discriminator;
mod generator;
mod loss;

pub use classifier::{Classifier, ClassifierConfig};
pub use discriminator::{CondDiscriminator, DiscriminatorConfig};
pub use generator::{CondGenerator, GeneratorConfig};
pub use loss::{ce_soft, ce_soft_value, d_loss, d_loss_value, g_loss, g_loss_value, GLossMode};

use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tensor};
use crate::Rng;

pub(crate) fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= k) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes: k }),
        None => Ok(()),
    }
}

/// Row-major `N×k` one-hot matrix.
pub(crate) fn one_hot_rows(labels: &[usize], k: usize) -> Result<Vec<f64>> {
    check_labels(labels, k)?;
    let mut out = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        out[i * k + l] = 1.0;
    }
    Ok(out)
}

pub(crate) fn normal_param(name: &str, shape: &[usize], std: f64, rng: &mut Rng) -> Parameter {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    let values = (0..n).map(|_| dist.sample(rng)).collect();
    Parameter::new(name, Tensor::new(shape, values).expect("shape matches"))
}

pub(crate) fn const_param(name: &str, shape: &[usize], value: f64) -> Parameter {
    Parameter::new(name, Tensor::full(shape, value))
}

pub(crate) fn find<'a>(params: &'a [Parameter], name: &str) -> &'a Parameter {
    params
        .iter()
        .find(|p| p.name() == name)
        .unwrap_or_else(|| panic!("network defines parameter {name}"))
}

/// Loads named value records into a parameter list; every parameter must be
/// present with the right length.
pub fn load_params<'a>(params: &mut [Parameter], mut lookup: impl FnMut(&str) -> Option<&'a [f64]>) -> Result<()> {
    for p in params.iter_mut() {
        let values = lookup(p.name()).ok_or_else(|| Error::MissingParam(p.name().into()))?;
        p.load(values)?;
    }
    Ok(())
}
