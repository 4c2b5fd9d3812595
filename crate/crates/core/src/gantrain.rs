//! Adversarial training, the generator learning-rate schedule and the
//! Online-Output snapshot stream.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::nets::{
    d_loss, g_loss, load_params, CondDiscriminator, CondGenerator, DiscriminatorConfig, GLossMode, GeneratorConfig,
};
use crate::tensor::{adam_step, checksum, AdamState, BatchNormMode, Parameter, Tape, Tensor};
use crate::{derive_seed, seeded_rng, Rng};

/// Record name under which [`ModelSnapshot::to_records`] stores the
/// generator loss.
pub const G_LOSS_RECORD: &str = "meta.g_loss";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_iterations: usize,
    /// First iteration at which snapshots are emitted.
    pub warmup_iterations: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    /// The generator learning rate doubles once at each of these iterations.
    pub lr_double_points: Vec<usize>,
    pub snapshot_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Warmup at 40% of `total_iterations`, generator doublings at 40% and
    /// 65%, and a discriminator rate four times the initial generator rate.
    pub fn scaled(total_iterations: usize, seed: u64) -> Self {
        let at = |pct: usize| total_iterations * pct / 100;
        Self {
            batch_size: 32,
            total_iterations,
            warmup_iterations: at(40).max(1),
            lr_g: 2e-4,
            lr_d: 8e-4,
            lr_double_points: vec![at(40), at(65)],
            snapshot_every: (total_iterations / 100).max(1),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let problem = if self.batch_size < 2 {
            Some("batch_size must be at least 2")
        } else if self.warmup_iterations == 0 || self.warmup_iterations >= self.total_iterations {
            Some("warmup_iterations must lie in [1, total_iterations)")
        } else if self.snapshot_every == 0 {
            Some("snapshot_every must be positive")
        } else if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            Some("learning rates must be positive")
        } else {
            None
        };
        match problem {
            Some(p) => Err(Error::Config(format!("train config: {p}"))),
            None => Ok(()),
        }
    }

    /// Iterations at which snapshots are emitted.
    pub fn snapshot_iterations(&self) -> impl Iterator<Item = usize> {
        (self.warmup_iterations..self.total_iterations).step_by(self.snapshot_every.max(1))
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::scaled(5000, 0)
    }
}

/// `(lr_g, lr_d)` in effect at `iteration`.
pub fn lr_schedule(iteration: usize, config: &TrainConfig) -> (f64, f64) {
    let doublings = config.lr_double_points.iter().filter(|&&p| iteration >= p).count();
    (config.lr_g * libm::pow(2.0, doublings as f64), config.lr_d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub iteration: usize,
    pub d_loss: f64,
    pub g_loss: f64,
}

/// Stacks samples into an `N×C×H×W` tensor plus their labels.
pub fn stack(samples: &[LabeledImage]) -> Result<(Tensor, Vec<usize>)> {
    let first = samples.first().ok_or(Error::EmptyBatch)?;
    let shape = first.image.shape();
    let mut values = Vec::with_capacity(samples.len() * shape.iter().product::<usize>());
    for s in samples {
        if s.image.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "stack",
                left: shape.to_vec(),
                right: s.image.shape().to_vec(),
            });
        }
        values.extend_from_slice(s.image.values());
    }
    let labels = samples.iter().map(|s| s.label).collect();
    Ok((
        Tensor::new(&[samples.len(), shape[0], shape[1], shape[2]], values)?,
        labels,
    ))
}

pub(crate) fn normal_noise(n: usize, dim: usize, rng: &mut Rng) -> Tensor {
    let values = (0..n * dim).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(&[n, dim], values).expect("shape matches")
}

/// Frozen copy of both networks at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub iteration: usize,
    pub generator: CondGenerator,
    pub discriminator: CondDiscriminator,
    /// Generator loss of the training step that completed at `iteration`.
    pub g_loss: f64,
}

impl ModelSnapshot {
    pub fn gen_params(&self) -> &[Parameter] {
        self.generator.params()
    }

    pub fn disc_params(&self) -> &[Parameter] {
        self.discriminator.params()
    }

    /// Named value records: generator parameters and batch-norm buffers,
    /// discriminator parameters, then the loss under [`G_LOSS_RECORD`].
    pub fn to_records(&self) -> Vec<(String, Vec<f64>)> {
        let params = self.gen_params().iter().chain(self.disc_params());
        let mut out: Vec<(String, Vec<f64>)> = params.map(|p| (p.name().into(), p.values().to_vec())).collect();
        out.extend(self.generator.buffers());
        out.push((G_LOSS_RECORD.into(), vec![self.g_loss]));
        out
    }

    /// Rebuilds a snapshot from records for networks of the given shapes.
    pub fn from_records(
        iteration: usize,
        records: &[(String, Vec<f64>)],
        g_config: GeneratorConfig,
        d_config: DiscriminatorConfig,
    ) -> Result<Self> {
        let lookup = |name: &str| records.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice());
        let mut rng = seeded_rng(0);
        let mut generator = CondGenerator::new(g_config, &mut rng)?;
        let mut discriminator = CondDiscriminator::new(d_config, &mut rng)?;
        load_params(generator.params_mut(), lookup)?;
        generator.load_buffers(lookup)?;
        load_params(discriminator.params_mut(), lookup)?;
        let g_loss = match lookup(G_LOSS_RECORD) {
            Some([v]) => *v,
            Some(other) => {
                return Err(Error::ParamMismatch {
                    name: G_LOSS_RECORD.into(),
                    expected: 1,
                    actual: other.len(),
                })
            }
            None => return Err(Error::MissingParam(G_LOSS_RECORD.into())),
        };
        Ok(Self {
            iteration,
            generator,
            discriminator,
            g_loss,
        })
    }

    /// FNV-1a over the generator parameter bits.
    pub fn gen_checksum(&self) -> u64 {
        checksum(self.gen_params())
    }
}

/// Owns both networks, their optimizers and the cycling training data.
#[derive(Debug, Clone)]
pub struct GanTrainer {
    config: TrainConfig,
    generator: CondGenerator,
    discriminator: CondDiscriminator,
    adam_g: AdamState,
    adam_d: AdamState,
    rng: Rng,
    data: Vec<LabeledImage>,
    order: Vec<usize>,
    cursor: usize,
    iteration: usize,
    history: Vec<StepLosses>,
}

impl GanTrainer {
    /// Networks are initialized from streams derived from `config.seed`.
    pub fn new(
        config: TrainConfig,
        g_config: GeneratorConfig,
        d_config: DiscriminatorConfig,
        data: Vec<LabeledImage>,
    ) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyPool("gan training data"));
        }
        if g_config.num_classes != d_config.num_classes || g_config.out_shape != d_config.in_shape {
            return Err(Error::Config(format!(
                "generator ({g_config:?}) and discriminator ({d_config:?}) disagree"
            )));
        }
        if let Some(s) = data.iter().find(|s| s.image.shape() != d_config.in_shape) {
            return Err(Error::ShapeMismatch {
                op: "gan training data",
                left: s.image.shape().to_vec(),
                right: d_config.in_shape.to_vec(),
            });
        }
        crate::nets::check_labels(&data.iter().map(|s| s.label).collect::<Vec<_>>(), g_config.num_classes)?;
        let generator = CondGenerator::new(g_config, &mut seeded_rng(derive_seed(config.seed, 1)))?;
        let discriminator = CondDiscriminator::new(d_config, &mut seeded_rng(derive_seed(config.seed, 2)))?;
        let rng = seeded_rng(derive_seed(config.seed, 3));
        Ok(Self {
            adam_g: AdamState::new(config.lr_g)?,
            adam_d: AdamState::new(config.lr_d)?,
            order: (0..data.len()).collect(),
            cursor: data.len(),
            config,
            generator,
            discriminator,
            rng,
            data,
            iteration: 0,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &CondGenerator {
        &self.generator
    }

    pub fn discriminator(&self) -> &CondDiscriminator {
        &self.discriminator
    }

    /// Number of completed training steps.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn history(&self) -> &[StepLosses] {
        &self.history
    }

    /// Next batch from the shuffled training data; reshuffles at each epoch
    /// boundary.
    fn next_batch(&mut self) -> Vec<LabeledImage> {
        let n = self.config.batch_size;
        let mut batch = Vec::with_capacity(n);
        while batch.len() < n {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.data[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        batch
    }

    /// One discriminator update on `real` plus an equal number of fakes,
    /// then one generator update with the non-saturating loss.
    pub fn train_step(&mut self, real: &[LabeledImage]) -> Result<StepLosses> {
        let (x_real, real_labels) = stack(real)?;
        let n = real.len();
        let k = self.generator.config().num_classes;
        let nz = self.generator.config().noise_dim;
        let (lr_g, lr_d) = lr_schedule(self.iteration, &self.config);
        self.adam_g.learning_rate = lr_g;
        self.adam_d.learning_rate = lr_d;

        let fake_labels: Vec<usize> = (0..n).map(|_| self.rng.random_range(0..k)).collect();
        let z = normal_noise(n, nz, &mut self.rng);
        let fake = self.generator.generate(&z, &fake_labels, BatchNormMode::Train)?;
        let mut tape = Tape::new();
        let xr = tape.constant(&x_real);
        let xf = tape.constant(&fake);
        let pr = self.discriminator.forward(&mut tape, xr, &real_labels)?;
        let pf = self.discriminator.forward(&mut tape, xf, &fake_labels)?;
        let dl = d_loss(&mut tape, pr, pf)?;
        let d_value = tape.value(dl)[0];
        tape.backward(dl)?.accumulate_into(self.discriminator.params_mut());
        adam_step(self.discriminator.params_mut(), &mut self.adam_d)?;

        let z = normal_noise(n, nz, &mut self.rng);
        let mut tape = Tape::new();
        let zv = tape.constant(&z);
        let fake = self
            .generator
            .forward(&mut tape, zv, &fake_labels, BatchNormMode::Train)?;
        tape.set_params_trainable(false);
        let pf = self.discriminator.forward(&mut tape, fake, &fake_labels)?;
        let gl = g_loss(&mut tape, pf, GLossMode::NonSaturating)?;
        let g_value = tape.value(gl)[0];
        tape.backward(gl)?.accumulate_into(self.generator.params_mut());
        adam_step(self.generator.params_mut(), &mut self.adam_g)?;

        self.iteration += 1;
        let losses = StepLosses {
            iteration: self.iteration,
            d_loss: d_value,
            g_loss: g_value,
        };
        self.history.push(losses);
        Ok(losses)
    }

    /// Draws the next batch from the training data and trains on it.
    pub fn step(&mut self) -> Result<StepLosses> {
        let batch = self.next_batch();
        self.train_step(&batch)
    }

    /// Copies the current networks, without gradient buffers.
    pub fn snapshot(&self) -> ModelSnapshot {
        let mut generator = self.generator.clone();
        let mut discriminator = self.discriminator.clone();
        let params = generator.params_mut().iter_mut().chain(discriminator.params_mut());
        params.for_each(|p| p.tensor_mut().clear_grad());
        ModelSnapshot {
            iteration: self.iteration,
            generator,
            discriminator,
            g_loss: self.history.last().map_or(f64::NAN, |h| h.g_loss),
        }
    }

    /// Trains to `total_iterations`, yielding a snapshot at every emission
    /// point on the way.
    pub fn online_output(&mut self) -> OnlineOutput<'_> {
        let pending = self
            .config
            .snapshot_iterations()
            .filter(|&j| j >= self.iteration.max(1))
            .collect();
        OnlineOutput {
            trainer: self,
            pending,
            next: 0,
            failed: false,
        }
    }
}

/// Iterator over [`ModelSnapshot`]s; training advances lazily as snapshots
/// are pulled and runs on to `total_iterations` after the last one.
#[derive(Debug)]
pub struct OnlineOutput<'a> {
    trainer: &'a mut GanTrainer,
    pending: Vec<usize>,
    next: usize,
    failed: bool,
}

impl OnlineOutput<'_> {
    fn advance_to(&mut self, target: usize) -> Result<()> {
        while self.trainer.iteration < target {
            self.trainer.step()?;
        }
        Ok(())
    }
}

impl Iterator for OnlineOutput<'_> {
    type Item = Result<ModelSnapshot>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let target = match self.pending.get(self.next) {
            Some(&j) => j,
            None => {
                let total = self.trainer.config.total_iterations;
                if let Err(e) = self.advance_to(total) {
                    self.failed = true;
                    return Some(Err(e));
                }
                return None;
            }
        };
        self.next += 1;
        match self.advance_to(target) {
            Ok(()) => Some(Ok(self.trainer.snapshot())),
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}
