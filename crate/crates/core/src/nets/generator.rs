use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{check_labels, const_param, find, normal_param, one_hot_rows};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, Parameter, RunningStats, Tape, Tensor, Var};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub noise_dim: usize,
    pub num_classes: usize,
    /// `C×H×W`; `H` and `W` must be multiples of 4.
    pub out_shape: [usize; 3],
    /// Channels after the dense projection (at `H/4×W/4`).
    pub base_channels: usize,
    /// Channels after the first upsampling (at `H/2×W/2`).
    pub mid_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            noise_dim: 32,
            num_classes: 4,
            out_shape: [1, 16, 16],
            base_channels: 16,
            mid_channels: 8,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.out_shape;
        if self.noise_dim == 0
            || self.num_classes == 0
            || c == 0
            || h == 0
            || w == 0
            || h % 4 != 0
            || w % 4 != 0
            || self.base_channels == 0
            || self.mid_channels == 0
        {
            return Err(Error::Config(format!("invalid generator config {self:?}")));
        }
        Ok(())
    }
}

/// `[z ; onehot(y)] → dense → reshape → (BN, ReLU, ConvT↑2) ×2 → tanh`,
/// rescaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondGenerator {
    config: GeneratorConfig,
    params: Vec<Parameter>,
    bn: [RunningStats; 2],
}

const BN_NAMES: [&str; 2] = ["g.bn1", "g.bn2"];

impl CondGenerator {
    pub fn new(config: GeneratorConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let [c, h, w] = config.out_shape;
        let (c1, c2) = (config.base_channels, config.mid_channels);
        let proj = c1 * (h / 4) * (w / 4);
        let params = alloc::vec![
            normal_param("g.fc.weight", &[config.noise_dim + config.num_classes, proj], 0.02, rng),
            const_param("g.fc.bias", &[proj], 0.0),
            const_param("g.bn1.gamma", &[c1], 1.0),
            const_param("g.bn1.beta", &[c1], 0.0),
            normal_param("g.up1.weight", &[c1, c2, 4, 4], 0.02, rng),
            const_param("g.up1.bias", &[c2], 0.0),
            const_param("g.bn2.gamma", &[c2], 1.0),
            const_param("g.bn2.beta", &[c2], 0.0),
            normal_param("g.up2.weight", &[c2, c, 4, 4], 0.02, rng),
            const_param("g.up2.bias", &[c], 0.0),
        ];
        Ok(Self {
            config,
            params,
            bn: [RunningStats::new(c1), RunningStats::new(c2)],
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats; 2] {
        &self.bn
    }

    /// Running statistics as named value records, for serialization.
    pub fn buffers(&self) -> Vec<(String, Vec<f64>)> {
        BN_NAMES
            .iter()
            .zip(&self.bn)
            .flat_map(|(name, s)| {
                [
                    (format!("{name}.running_mean"), s.mean.clone()),
                    (format!("{name}.running_var"), s.var.clone()),
                ]
            })
            .collect()
    }

    pub fn load_buffers<'a>(&mut self, mut lookup: impl FnMut(&str) -> Option<&'a [f64]>) -> Result<()> {
        for (name, stats) in BN_NAMES.iter().zip(self.bn.iter_mut()) {
            for (suffix, dst) in [("running_mean", &mut stats.mean), ("running_var", &mut stats.var)] {
                let key = format!("{name}.{suffix}");
                let src = lookup(&key).ok_or_else(|| Error::MissingParam(key.clone()))?;
                if src.len() != dst.len() {
                    return Err(Error::ParamMismatch {
                        name: key,
                        expected: dst.len(),
                        actual: src.len(),
                    });
                }
                dst.copy_from_slice(src);
            }
        }
        Ok(())
    }

    /// Records `G(z | y)` on the tape. Train mode uses (and updates) batch
    /// statistics.
    pub fn forward(&mut self, tape: &mut Tape, z: Var, labels: &[usize], mode: BatchNormMode) -> Result<Var> {
        forward_with(&self.config, &self.params, &mut self.bn, tape, z, labels, mode)
    }

    /// Generates a batch without recording gradients.
    pub fn generate(&mut self, z: &Tensor, labels: &[usize], mode: BatchNormMode) -> Result<Tensor> {
        generate_with(&self.config, &self.params, &mut self.bn, z, labels, mode)
    }

    /// Like [`generate`](Self::generate) but leaves the running statistics
    /// untouched, so a frozen network stays frozen.
    pub fn sample(&self, z: &Tensor, labels: &[usize], mode: BatchNormMode) -> Result<Tensor> {
        let mut bn = self.bn.clone();
        generate_with(&self.config, &self.params, &mut bn, z, labels, mode)
    }
}

fn generate_with(
    cfg: &GeneratorConfig,
    params: &[Parameter],
    bn: &mut [RunningStats; 2],
    z: &Tensor,
    labels: &[usize],
    mode: BatchNormMode,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    tape.set_params_trainable(false);
    let zv = tape.constant(z);
    let out = forward_with(cfg, params, bn, &mut tape, zv, labels, mode)?;
    Ok(tape.tensor(out))
}

fn forward_with(
    cfg: &GeneratorConfig,
    params: &[Parameter],
    bn: &mut [RunningStats; 2],
    tape: &mut Tape,
    z: Var,
    labels: &[usize],
    mode: BatchNormMode,
) -> Result<Var> {
    let cfg = *cfg;
    let n = labels.len();
    if tape.shape(z) != [n, cfg.noise_dim] {
        return Err(Error::ShapeMismatch {
            op: "generator input",
            left: tape.shape(z).to_vec(),
            right: alloc::vec![n, cfg.noise_dim],
        });
    }
    check_labels(labels, cfg.num_classes)?;
    let [c, h, w] = cfg.out_shape;
    let p = |name: &str| find(params, name);
    let code = tape.constant_from(&[n, cfg.num_classes], one_hot_rows(labels, cfg.num_classes)?)?;
    let input = tape.concat(z, code)?;

    let fc_w = tape.param(p("g.fc.weight"));
    let fc_b = tape.param(p("g.fc.bias"));
    let x = tape.matmul(input, fc_w)?;
    let x = tape.add_bias(x, fc_b)?;
    let x = tape.reshape(x, &[n, cfg.base_channels, h / 4, w / 4])?;
    let (g1, b1) = (tape.param(p("g.bn1.gamma")), tape.param(p("g.bn1.beta")));
    let up1_w = tape.param(p("g.up1.weight"));
    let up1_b = tape.param(p("g.up1.bias"));
    let (g2, b2) = (tape.param(p("g.bn2.gamma")), tape.param(p("g.bn2.beta")));
    let up2_w = tape.param(p("g.up2.weight"));
    let up2_b = tape.param(p("g.up2.bias"));

    let [bn1, bn2] = bn;
    let x = tape.batchnorm(x, g1, b1, bn1, mode)?;
    let x = tape.relu(x);
    let x = tape.conv2d_transpose(x, up1_w, Some(up1_b), 2, 1)?;
    let x = tape.batchnorm(x, g2, b2, bn2, mode)?;
    let x = tape.relu(x);
    let x = tape.conv2d_transpose(x, up2_w, Some(up2_b), 2, 1)?;
    debug_assert_eq!(tape.shape(x), [n, c, h, w]);
    let x = tape.tanh(x);
    let x = tape.scale(x, 0.5);
    Ok(tape.add_scalar(x, 0.5))
}
