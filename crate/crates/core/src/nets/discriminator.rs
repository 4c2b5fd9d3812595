use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{check_labels, const_param, find, normal_param};
use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tape, Tensor, Var};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorConfig {
    pub num_classes: usize,
    /// `C×H×W`; `H` and `W` must be multiples of 4.
    pub in_shape: [usize; 3],
    pub channels1: usize,
    pub channels2: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            in_shape: [1, 16, 16],
            channels1: 8,
            channels2: 16,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.in_shape;
        if self.num_classes == 0
            || c == 0
            || h == 0
            || w == 0
            || h % 4 != 0
            || w % 4 != 0
            || self.channels1 == 0
            || self.channels2 == 0
            || self.leaky_slope.is_nan()
            || self.leaky_slope < 0.0
        {
            return Err(Error::Config(format!("invalid discriminator config {self:?}")));
        }
        Ok(())
    }
}

/// `[x ; onehot(y) planes] → (Conv↓2, LeakyReLU) ×2 → dense → sigmoid`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondDiscriminator {
    config: DiscriminatorConfig,
    params: Vec<Parameter>,
}

impl CondDiscriminator {
    pub fn new(config: DiscriminatorConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let [c, h, w] = config.in_shape;
        let k = config.num_classes;
        let (d1, d2) = (config.channels1, config.channels2);
        let params = vec![
            normal_param("d.conv1.weight", &[d1, c + k, 4, 4], 0.02, rng),
            const_param("d.conv1.bias", &[d1], 0.0),
            normal_param("d.conv2.weight", &[d2, d1, 4, 4], 0.02, rng),
            const_param("d.conv2.bias", &[d2], 0.0),
            normal_param("d.fc.weight", &[d2 * (h / 4) * (w / 4), 1], 0.02, rng),
            const_param("d.fc.bias", &[1], 0.0),
        ];
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Records `D(x | y)`; the result has shape `[N]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, labels: &[usize]) -> Result<Var> {
        let cfg = &self.config;
        let [c, h, w] = cfg.in_shape;
        let n = labels.len();
        if tape.shape(x) != [n, c, h, w] {
            return Err(Error::ShapeMismatch {
                op: "discriminator input",
                left: tape.shape(x).to_vec(),
                right: vec![n, c, h, w],
            });
        }
        check_labels(labels, cfg.num_classes)?;
        let k = cfg.num_classes;
        let mut planes = vec![0.0; n * k * h * w];
        for (i, &l) in labels.iter().enumerate() {
            let start = (i * k + l) * h * w;
            planes[start..start + h * w].iter_mut().for_each(|v| *v = 1.0);
        }
        let p = |name: &str| find(&self.params, name);
        let centered = tape.scale(x, 2.0);
        let centered = tape.add_scalar(centered, -1.0);
        let code = tape.constant_from(&[n, k, h, w], planes)?;
        let input = tape.concat(centered, code)?;

        let (w1, b1) = (tape.param(p("d.conv1.weight")), tape.param(p("d.conv1.bias")));
        let y = tape.conv2d(input, w1, Some(b1), 2, 1)?;
        let y = tape.leaky_relu(y, cfg.leaky_slope);
        let (w2, b2) = (tape.param(p("d.conv2.weight")), tape.param(p("d.conv2.bias")));
        let y = tape.conv2d(y, w2, Some(b2), 2, 1)?;
        let y = tape.leaky_relu(y, cfg.leaky_slope);
        let y = tape.reshape(y, &[n, cfg.channels2 * (h / 4) * (w / 4)])?;
        let (fw, fb) = (tape.param(p("d.fc.weight")), tape.param(p("d.fc.bias")));
        let y = tape.matmul(y, fw)?;
        let y = tape.add_bias(y, fb)?;
        let y = tape.reshape(y, &[n])?;
        Ok(tape.sigmoid(y))
    }

    /// Probabilities without recording gradients.
    pub fn probabilities(&self, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        tape.set_params_trainable(false);
        let xv = tape.constant(x);
        let out = self.forward(&mut tape, xv, labels)?;
        Ok(tape.value(out).to_vec())
    }
}
