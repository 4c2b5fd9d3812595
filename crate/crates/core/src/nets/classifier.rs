use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{const_param, find, normal_param};
use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tape, Tensor, Var};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierConfig {
    pub num_classes: usize,
    /// `C×H×W`; `H` and `W` must be multiples of 4.
    pub in_shape: [usize; 3],
    pub channels1: usize,
    pub channels2: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            in_shape: [1, 16, 16],
            channels1: 8,
            channels2: 16,
        }
    }
}

/// Two 3×3 conv blocks with 2×2 average pooling (the feature extractor),
/// then a dense softmax head (the separately trainable output layer).
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    config: ClassifierConfig,
    feature_params: Vec<Parameter>,
    head_params: Vec<Parameter>,
}

impl Classifier {
    pub fn new(config: ClassifierConfig, rng: &mut Rng) -> Result<Self> {
        let [c, h, w] = config.in_shape;
        if config.num_classes == 0 || c == 0 || h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("invalid classifier config {config:?}")));
        }
        let (c1, c2) = (config.channels1, config.channels2);
        let he = |fan_in: usize| libm::sqrt(2.0 / fan_in as f64);
        let flat = c2 * (h / 4) * (w / 4);
        let feature_params = vec![
            normal_param("c.conv1.weight", &[c1, c, 3, 3], he(c * 9), rng),
            const_param("c.conv1.bias", &[c1], 0.0),
            normal_param("c.conv2.weight", &[c2, c1, 3, 3], he(c1 * 9), rng),
            const_param("c.conv2.bias", &[c2], 0.0),
        ];
        let head_params = vec![
            normal_param(
                "c.head.weight",
                &[flat, config.num_classes],
                libm::sqrt(1.0 / flat as f64),
                rng,
            ),
            const_param("c.head.bias", &[config.num_classes], 0.0),
        ];
        Ok(Self {
            config,
            feature_params,
            head_params,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn feature_params(&self) -> &[Parameter] {
        &self.feature_params
    }

    pub fn feature_params_mut(&mut self) -> &mut [Parameter] {
        &mut self.feature_params
    }

    pub fn head_params(&self) -> &[Parameter] {
        &self.head_params
    }

    pub fn head_params_mut(&mut self) -> &mut [Parameter] {
        &mut self.head_params
    }

    /// Feature parameters followed by head parameters.
    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.feature_params.iter().chain(&self.head_params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.feature_params.iter_mut().chain(self.head_params.iter_mut())
    }

    /// Records the `N×k` class-probability matrix.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let [c, h, w] = self.config.in_shape;
        let s = tape.shape(x);
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::ShapeMismatch {
                op: "classifier input",
                left: s.to_vec(),
                right: vec![c, h, w],
            });
        }
        let n = s[0];
        let f = |name: &str| find(&self.feature_params, name);
        let (w1, b1) = (tape.param(f("c.conv1.weight")), tape.param(f("c.conv1.bias")));
        let y = tape.conv2d(x, w1, Some(b1), 1, 1)?;
        let y = tape.relu(y);
        let y = tape.avg_pool2d(y, 2)?;
        let (w2, b2) = (tape.param(f("c.conv2.weight")), tape.param(f("c.conv2.bias")));
        let y = tape.conv2d(y, w2, Some(b2), 1, 1)?;
        let y = tape.relu(y);
        let y = tape.avg_pool2d(y, 2)?;
        let y = tape.reshape(y, &[n, self.config.channels2 * (h / 4) * (w / 4)])?;
        let hw = tape.param(find(&self.head_params, "c.head.weight"));
        let hb = tape.param(find(&self.head_params, "c.head.bias"));
        let y = tape.matmul(y, hw)?;
        let y = tape.add_bias(y, hb)?;
        tape.softmax(y)
    }

    /// Probability rows without recording gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        tape.set_params_trainable(false);
        let xv = tape.constant(x);
        let out = self.forward(&mut tape, xv)?;
        Ok(tape.value(out).to_vec())
    }
}
