//! Two-stage sifting of the snapshot stream: whole generators are accepted
//! or rejected by their loss on a probe batch, then each sample of an
//! accepted batch is kept only if its discriminator re-scores it above a
//! probability threshold.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use crate::augment::Image;
use crate::data::{LabeledImage, Origin};
use crate::error::{Error, Result};
use crate::gantrain::{normal_noise, stack, ModelSnapshot};
use crate::nets::g_loss_value;
use crate::tensor::BatchNormMode;
use crate::{derive_seed, seeded_rng};

pub use crate::nets::GLossMode as LossMode;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiftConfig {
    /// Loss threshold: a model is accepted iff its probe loss is below it.
    /// `f64::NEG_INFINITY` rejects everything.
    pub tau: f64,
    /// Probability threshold: a sample is kept iff `D(s) > rho`.
    pub rho: f64,
    /// Probe batch size.
    pub batch_size: usize,
    pub num_classes: usize,
    pub target_set_size: usize,
    pub loss_mode: LossMode,
    /// Each snapshot draws its probe noise from a stream derived from this
    /// seed and the snapshot iteration.
    pub seed: u64,
}

impl Default for SiftConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            rho: 0.9,
            batch_size: 64,
            num_classes: 4,
            target_set_size: 1000,
            loss_mode: LossMode::NonSaturating,
            seed: 0,
        }
    }
}

impl SiftConfig {
    pub fn validate(&self) -> Result<()> {
        let problem = if !(0.0..1.0).contains(&self.rho) {
            Some(format!("rho must lie in [0, 1), got {}", self.rho))
        } else if self.tau.is_nan() {
            Some("tau must not be NaN".into())
        } else if self.batch_size < 2 {
            Some(format!("batch_size must be at least 2, got {}", self.batch_size))
        } else if self.num_classes == 0 {
            Some("num_classes must be positive".into())
        } else if self.target_set_size == 0 {
            Some("target_set_size must be positive".into())
        } else {
            None
        };
        match problem {
            Some(p) => Err(Error::Config(format!("sift config: {p}"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiftedSample {
    pub image: Image,
    pub label: usize,
    /// The discriminator probability that admitted the sample.
    pub disc_prob: f64,
    pub source_iteration: usize,
}

impl SiftedSample {
    pub fn to_labeled(&self) -> LabeledImage {
        LabeledImage::new(self.image.clone(), self.label, Origin::Gan)
    }
}

/// Outcome of the model-level test on one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelVerdict {
    pub iteration: usize,
    pub loss: f64,
    /// Discriminator output for every probe sample, in batch order.
    pub probe_probs: Vec<f64>,
    pub labels: Vec<usize>,
    pub accepted: bool,
    /// The probe batch, present iff the model was accepted.
    pub batch: Option<Vec<LabeledImage>>,
}

/// Outcome of the sample-level test on one generated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleVerdict {
    pub prob: f64,
    pub sample: Option<SiftedSample>,
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq)]
pub enum AuditEntry {
    Model {
        iteration: usize,
        loss: f64,
        probe_probs: Vec<f64>,
        accepted: bool,
    },
    Sample {
        iteration: usize,
        index: usize,
        label: usize,
        prob: f64,
        accepted: bool,
    },
}

fn verdict(accepted: bool) -> &'static str {
    if accepted {
        "accept"
    } else {
        "reject"
    }
}

/// Reals are printed in shortest round-trip form, so the log can be parsed
/// back without loss.
impl fmt::Display for AuditEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AuditEntry::Model {
                iteration,
                loss,
                probe_probs,
                accepted,
            } => {
                write!(f, "model j={iteration} loss={loss:?} {} probs=", verdict(*accepted))?;
                for (i, p) in probe_probs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{p:?}")?;
                }
                Ok(())
            }
            AuditEntry::Sample {
                iteration,
                index,
                label,
                prob,
                accepted,
            } => write!(
                f,
                "sample j={iteration} idx={index} label={label} p={prob:?} {}",
                verdict(*accepted)
            ),
        }
    }
}

/// Probe test on one snapshot: `n` noise vectors with labels cycling over
/// the classes, generated with batch statistics, scored by the snapshot's
/// discriminator; accepted iff the loss is below `tau`.
pub fn sift_model(snapshot: &ModelSnapshot, config: &SiftConfig) -> Result<ModelVerdict> {
    config.validate()?;
    let gcfg = snapshot.generator.config();
    if gcfg.num_classes != config.num_classes {
        return Err(Error::Config(format!(
            "sift config has {} classes, snapshot generator has {}",
            config.num_classes, gcfg.num_classes
        )));
    }
    let n = config.batch_size;
    let mut rng = seeded_rng(derive_seed(config.seed, snapshot.iteration as u64));
    let labels: Vec<usize> = (0..n).map(|i| i % config.num_classes).collect();
    let z = normal_noise(n, gcfg.noise_dim, &mut rng);
    let images = snapshot.generator.sample(&z, &labels, BatchNormMode::Train)?;
    let probe_probs = snapshot.discriminator.probabilities(&images, &labels)?;
    let loss = g_loss_value(&probe_probs, config.loss_mode)?;
    let accepted = loss < config.tau;
    let batch = if accepted {
        let [c, h, w] = gcfg.out_shape;
        let per = c * h * w;
        let out = images
            .values()
            .chunks_exact(per)
            .zip(&labels)
            .map(|(v, &y)| Ok(LabeledImage::new(Image::new(c, h, w, v.to_vec())?, y, Origin::Gan)))
            .collect::<Result<Vec<_>>>()?;
        Some(out)
    } else {
        None
    };
    Ok(ModelVerdict {
        iteration: snapshot.iteration,
        loss,
        probe_probs,
        labels,
        accepted,
        batch,
    })
}

/// Re-scores one sample with the snapshot's discriminator; kept iff the
/// probability is strictly above `rho`.
pub fn sift_sample(sample: &LabeledImage, snapshot: &ModelSnapshot, config: &SiftConfig) -> Result<SampleVerdict> {
    let (x, labels) = stack(core::slice::from_ref(sample))?;
    let prob = snapshot.discriminator.probabilities(&x, &labels)?[0];
    let sample = (prob > config.rho).then(|| SiftedSample {
        image: sample.image.clone(),
        label: sample.label,
        disc_prob: prob,
        source_iteration: snapshot.iteration,
    });
    Ok(SampleVerdict { prob, sample })
}

/// Both stages on one snapshot. Independent of every other snapshot, so
/// distinct snapshots may be processed on different threads.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotReport {
    pub model: ModelVerdict,
    /// One verdict per probe sample when the model was accepted.
    pub samples: Vec<SampleVerdict>,
}

pub fn sift_snapshot(snapshot: &ModelSnapshot, config: &SiftConfig) -> Result<SnapshotReport> {
    let mut model = sift_model(snapshot, config)?;
    let samples = match model.batch.take() {
        Some(batch) => {
            let verdicts = batch
                .iter()
                .map(|s| sift_sample(s, snapshot, config))
                .collect::<Result<Vec<_>>>()?;
            model.batch = Some(batch);
            verdicts
        }
        None => Vec::new(),
    };
    Ok(SnapshotReport { model, samples })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SiftStats {
    pub models_accepted: usize,
    pub models_rejected: usize,
    pub samples_accepted: usize,
    pub samples_rejected: usize,
    pub per_class: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiftOutcome {
    /// Ordered by source iteration, then by position in the probe batch.
    pub samples: Vec<SiftedSample>,
    pub audit: Vec<AuditEntry>,
    pub stats: SiftStats,
    /// How many samples short of `target_set_size` the stream ended, if it
    /// did.
    pub shortfall: Option<usize>,
}

/// Folds snapshot reports, in stream order, into the sifted set.
#[derive(Debug, Clone)]
pub struct SiftCollector {
    config: SiftConfig,
    outcome: SiftOutcome,
}

impl SiftCollector {
    pub fn new(config: SiftConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            outcome: SiftOutcome {
                samples: Vec::new(),
                audit: Vec::new(),
                stats: SiftStats {
                    per_class: alloc::vec![0; config.num_classes],
                    ..SiftStats::default()
                },
                shortfall: None,
            },
            config,
        })
    }

    pub fn is_full(&self) -> bool {
        self.outcome.samples.len() >= self.config.target_set_size
    }

    pub fn collected(&self) -> usize {
        self.outcome.samples.len()
    }

    /// Adds one report; samples beyond the target are neither logged nor
    /// kept. Returns whether the target has been reached.
    pub fn push(&mut self, report: SnapshotReport) -> bool {
        if self.is_full() {
            return true;
        }
        let SnapshotReport { model, samples } = report;
        let out = &mut self.outcome;
        out.audit.push(AuditEntry::Model {
            iteration: model.iteration,
            loss: model.loss,
            probe_probs: model.probe_probs.clone(),
            accepted: model.accepted,
        });
        if model.accepted {
            out.stats.models_accepted += 1;
        } else {
            out.stats.models_rejected += 1;
        }
        for (index, v) in samples.into_iter().enumerate() {
            if out.samples.len() >= self.config.target_set_size {
                break;
            }
            out.audit.push(AuditEntry::Sample {
                iteration: model.iteration,
                index,
                label: model.labels[index],
                prob: v.prob,
                accepted: v.sample.is_some(),
            });
            match v.sample {
                Some(s) => {
                    out.stats.samples_accepted += 1;
                    out.stats.per_class[s.label] += 1;
                    out.samples.push(s);
                }
                None => out.stats.samples_rejected += 1,
            }
        }
        self.is_full()
    }

    pub fn finish(mut self) -> SiftOutcome {
        let missing = self.config.target_set_size.saturating_sub(self.outcome.samples.len());
        self.outcome.shortfall = (missing > 0).then_some(missing);
        self.outcome
    }
}

/// Consumes snapshots in order until the target set size is reached or the
/// stream ends.
pub fn run_pipeline<I>(stream: I, config: &SiftConfig) -> Result<SiftOutcome>
where
    I: IntoIterator<Item = Result<ModelSnapshot>>,
{
    let mut collector = SiftCollector::new(*config)?;
    for snapshot in stream {
        if collector.push(sift_snapshot(&snapshot?, config)?) {
            break;
        }
    }
    Ok(collector.finish())
}
