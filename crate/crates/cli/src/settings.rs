//! Every tunable of the pipeline, with defaults, read from a [`ConfigMap`].

use siftgan_core::augment::OpSet;
use siftgan_core::clstrain::ClsTrainConfig;
use siftgan_core::data::{CompositionNote, MixedBatchSpec};
use siftgan_core::gantrain::TrainConfig;
use siftgan_core::nets::{ClassifierConfig, DiscriminatorConfig, GeneratorConfig};
use siftgan_core::sifter::{LossMode, SiftConfig};

use crate::config::{ConfigError, ConfigMap};

/// Toy dataset generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataSettings {
    pub num_classes: usize,
    /// Samples per class before the 50/50 split.
    pub per_class: usize,
    pub shape: [usize; 3],
}

/// Classifier training, shared by every regime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClsSettings {
    pub batch_size: usize,
    /// Passes over the original training set in each phase.
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub lsr_epsilon: f64,
    pub lr_head_phase1: f64,
    pub lr_features_phase2: f64,
    pub lr_head_phase2: f64,
    pub channels1: usize,
    pub channels2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub data: DataSettings,
    /// The seed field is replaced per run.
    pub gan: TrainConfig,
    pub generator_noise_dim: usize,
    pub generator_base_channels: usize,
    pub generator_mid_channels: usize,
    pub disc_channels1: usize,
    pub disc_channels2: usize,
    /// The seed and class count are replaced per run.
    pub sift: SiftConfig,
    pub cls: ClsSettings,
    /// Transforms used by a `transf` regime that names none.
    pub transf_op_set: OpSet,
}

impl Default for Settings {
    fn default() -> Self {
        let data = DataSettings {
            num_classes: 4,
            per_class: 100,
            shape: [1, 16, 16],
        };
        Self {
            data,
            gan: TrainConfig::scaled(5000, 0),
            generator_noise_dim: 32,
            generator_base_channels: 16,
            generator_mid_channels: 8,
            disc_channels1: 8,
            disc_channels2: 16,
            sift: SiftConfig::default(),
            cls: ClsSettings {
                batch_size: 64,
                epochs_phase1: 20,
                epochs_phase2: 20,
                lsr_epsilon: 0.8,
                lr_head_phase1: 1e-2,
                lr_features_phase2: 1e-3,
                lr_head_phase2: 1e-2,
                channels1: 8,
                channels2: 16,
            },
            transf_op_set: OpSet::FlipRotation,
        }
    }
}

/// Keys understood by [`Settings::from_config`].
pub const SETTINGS_KEYS: &[&str] = &[
    "data.classes",
    "data.per_class",
    "data.channels",
    "data.height",
    "data.width",
    "gan.total_iterations",
    "gan.warmup_iterations",
    "gan.batch_size",
    "gan.lr_g",
    "gan.lr_d",
    "gan.lr_double_points",
    "gan.snapshot_every",
    "gan.noise_dim",
    "gan.generator_base_channels",
    "gan.generator_mid_channels",
    "gan.disc_channels1",
    "gan.disc_channels2",
    "sift.tau",
    "sift.rho",
    "sift.batch_size",
    "sift.target_set_size",
    "sift.loss_mode",
    "cls.batch_size",
    "cls.epochs_phase1",
    "cls.epochs_phase2",
    "cls.lsr_epsilon",
    "cls.lr_head_phase1",
    "cls.lr_features_phase2",
    "cls.lr_head_phase2",
    "cls.channels1",
    "cls.channels2",
    "transf.op_set",
];

impl Settings {
    /// Defaults overridden by whatever `map` sets. Setting
    /// `gan.total_iterations` rescales the warmup, doubling points and
    /// snapshot spacing unless those are set too.
    pub fn from_config(map: &ConfigMap) -> Result<Self, ConfigError> {
        let mut s = Settings::default();
        let d = &mut s.data;
        map.apply("data.classes", &mut d.num_classes)?;
        map.apply("data.per_class", &mut d.per_class)?;
        map.apply("data.channels", &mut d.shape[0])?;
        map.apply("data.height", &mut d.shape[1])?;
        map.apply("data.width", &mut d.shape[2])?;

        if let Some(total) = map.get("gan.total_iterations")? {
            s.gan = TrainConfig {
                lr_g: s.gan.lr_g,
                lr_d: s.gan.lr_d,
                batch_size: s.gan.batch_size,
                ..TrainConfig::scaled(total, 0)
            };
        }
        let g = &mut s.gan;
        map.apply("gan.warmup_iterations", &mut g.warmup_iterations)?;
        map.apply("gan.batch_size", &mut g.batch_size)?;
        map.apply("gan.lr_g", &mut g.lr_g)?;
        map.apply("gan.lr_d", &mut g.lr_d)?;
        if let Some(points) = map.get_list("gan.lr_double_points")? {
            g.lr_double_points = points;
        }
        map.apply("gan.snapshot_every", &mut g.snapshot_every)?;
        map.apply("gan.noise_dim", &mut s.generator_noise_dim)?;
        map.apply("gan.generator_base_channels", &mut s.generator_base_channels)?;
        map.apply("gan.generator_mid_channels", &mut s.generator_mid_channels)?;
        map.apply("gan.disc_channels1", &mut s.disc_channels1)?;
        map.apply("gan.disc_channels2", &mut s.disc_channels2)?;

        let f = &mut s.sift;
        map.apply("sift.tau", &mut f.tau)?;
        map.apply("sift.rho", &mut f.rho)?;
        map.apply("sift.batch_size", &mut f.batch_size)?;
        map.apply("sift.target_set_size", &mut f.target_set_size)?;
        if let Some(mode) = map.get_with("sift.loss_mode", |v| {
            LossMode::parse(v).ok_or("expected `saturating` or `non_saturating`")
        })? {
            f.loss_mode = mode;
        }

        let c = &mut s.cls;
        map.apply("cls.batch_size", &mut c.batch_size)?;
        map.apply("cls.epochs_phase1", &mut c.epochs_phase1)?;
        map.apply("cls.epochs_phase2", &mut c.epochs_phase2)?;
        map.apply("cls.lsr_epsilon", &mut c.lsr_epsilon)?;
        map.apply("cls.lr_head_phase1", &mut c.lr_head_phase1)?;
        map.apply("cls.lr_features_phase2", &mut c.lr_features_phase2)?;
        map.apply("cls.lr_head_phase2", &mut c.lr_head_phase2)?;
        map.apply("cls.channels1", &mut c.channels1)?;
        map.apply("cls.channels2", &mut c.channels2)?;
        if let Some(op_set) = map.get_with("transf.op_set", parse_op_set)? {
            s.transf_op_set = op_set;
        }
        s.sift.num_classes = s.data.num_classes;
        Ok(s)
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            noise_dim: self.generator_noise_dim,
            num_classes: self.data.num_classes,
            out_shape: self.data.shape,
            base_channels: self.generator_base_channels,
            mid_channels: self.generator_mid_channels,
        }
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            num_classes: self.data.num_classes,
            in_shape: self.data.shape,
            channels1: self.disc_channels1,
            channels2: self.disc_channels2,
            ..DiscriminatorConfig::default()
        }
    }

    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig {
            num_classes: self.data.num_classes,
            in_shape: self.data.shape,
            channels1: self.cls.channels1,
            channels2: self.cls.channels2,
        }
    }

    pub fn gan_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.gan.clone()
        }
    }

    pub fn sift_config(&self, seed: u64) -> SiftConfig {
        SiftConfig {
            seed,
            num_classes: self.data.num_classes,
            ..self.sift
        }
    }

    /// Batch composition for `ratio_orig:ratio_aug`, with the note logged
    /// when the ratio does not divide the batch.
    pub fn batch_spec(
        &self,
        ratio_orig: usize,
        ratio_aug: usize,
    ) -> siftgan_core::error::Result<(MixedBatchSpec, Option<CompositionNote>)> {
        MixedBatchSpec::nearest(self.cls.batch_size, ratio_orig, ratio_aug, self.cls.lsr_epsilon)
    }

    pub fn cls_config(&self, batch: MixedBatchSpec, train_len: usize, seed: u64) -> ClsTrainConfig {
        ClsTrainConfig {
            lr_head_phase1: self.cls.lr_head_phase1,
            lr_features_phase2: self.cls.lr_features_phase2,
            lr_head_phase2: self.cls.lr_head_phase2,
            ..ClsTrainConfig::for_epochs(
                self.cls.epochs_phase1,
                self.cls.epochs_phase2,
                train_len,
                batch,
                self.classifier(),
                seed,
            )
        }
    }
}

pub fn parse_op_set(v: &str) -> Result<OpSet, String> {
    OpSet::parse(v).ok_or_else(|| format!("unknown op set `{v}` (flip, rotation, flip-rotation, enhancement, noise)"))
}
