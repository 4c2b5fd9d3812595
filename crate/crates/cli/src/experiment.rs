//! Seeded runs of the baseline, transform and sifted-GAN regimes, their
//! aggregation into mean and standard deviation per (regime, ratio), and
//! the CSV reports.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::mpsc;
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use siftgan_core::augment::OpSet;
use siftgan_core::clstrain::{evaluate, train_augmented};
use siftgan_core::data::{check_transf_ratio, gen_toy_dataset, split_half, transform_pool, LabeledImage};
use siftgan_core::gantrain::{GanTrainer, ModelSnapshot};
use siftgan_core::sifter::{sift_snapshot, AuditEntry, SiftCollector, SiftOutcome};
use siftgan_core::{derive_seed, seeded_rng};

use crate::config::ConfigMap;
use crate::settings::{parse_op_set, Settings};

/// Stream indices for the per-run seeds derived from a run seed.
pub mod streams {
    pub const DATASET: u64 = 100;
    pub const SPLIT: u64 = 101;
    pub const GAN: u64 = 102;
    pub const SIFT: u64 = 103;
    pub const TRANSFORM: u64 = 104;
    pub const CLASSIFIER: u64 = 105;
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    Spec(String),

    #[error("cannot aggregate an empty group of records")]
    EmptyGroup,

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Where the augmented share of each batch comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Regime {
    Baseline,
    Transf(OpSet),
    SifGan,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Baseline => f.write_str("baseline"),
            Regime::Transf(op) => write!(f, "transf:{}", op.name()),
            Regime::SifGan => f.write_str("sifgan"),
        }
    }
}

impl Regime {
    /// Parses `baseline`, `sifgan`, `transf` (with `default_op_set`) or
    /// `transf:<op set>`.
    pub fn parse(s: &str, default_op_set: OpSet) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "baseline" => Ok(Regime::Baseline),
            None if s == "sifgan" => Ok(Regime::SifGan),
            None if s == "transf" => Ok(Regime::Transf(default_op_set)),
            Some(("transf", op)) => parse_op_set(op).map(Regime::Transf),
            _ => Err(format!("unknown regime `{s}` (baseline, transf[:<op set>], sifgan)")),
        }
    }
}

/// `orig:aug` parts of a classifier batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ratio {
    pub orig: usize,
    pub aug: usize,
}

impl Ratio {
    pub const BASELINE: Ratio = Ratio { orig: 1, aug: 0 };

    pub fn new(orig: usize, aug: usize) -> Self {
        Self { orig, aug }
    }
}

/// Ascending augmented share `aug / orig`.
impl Ord for Ratio {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.aug * other.orig)
            .cmp(&(other.aug * self.orig))
            .then(self.orig.cmp(&other.orig))
    }
}

impl PartialOrd for Ratio {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.orig, self.aug)
    }
}

impl FromStr for Ratio {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parsed = s
            .split_once(':')
            .and_then(|(o, a)| Some(Ratio::new(o.trim().parse().ok()?, a.trim().parse().ok()?)));
        match parsed {
            Some(r) if r.orig > 0 => Ok(r),
            _ => Err(format!("expected a ratio like `1:3`, got `{s}`")),
        }
    }
}

/// One regime at one ratio, repeated over `seeds`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub regime: Regime,
    pub ratio: Ratio,
    pub seeds: Vec<u64>,
    pub settings: Settings,
}

impl ExperimentSpec {
    /// `runs` seeds counting up from `base_seed`.
    pub fn new(regime: Regime, ratio: Ratio, base_seed: u64, runs: usize, settings: Settings) -> Self {
        Self {
            regime,
            ratio,
            seeds: (0..runs as u64).map(|i| base_seed + i).collect(),
            settings,
        }
    }

    pub fn runs(&self) -> usize {
        self.seeds.len()
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Spec(format!("{} at {}: {m}", self.regime, self.ratio)));
        if self.seeds.is_empty() {
            return bad("at least one run is required".into());
        }
        match self.regime {
            Regime::Baseline if self.ratio.aug != 0 => return bad("the baseline takes no augmented samples".into()),
            Regime::Transf(_) | Regime::SifGan if self.ratio.aug == 0 => {
                return bad("an augmented regime needs a non-zero augmented part".into())
            }
            Regime::Transf(op) => {
                if let Err(e) = check_transf_ratio(op, self.ratio.orig, self.ratio.aug) {
                    return bad(e.to_string());
                }
            }
            _ => {}
        }
        if let Err(e) = self.settings.batch_spec(self.ratio.orig, self.ratio.aug) {
            return bad(e.to_string());
        }
        let s = &self.settings;
        let checks = [
            s.gan_config(0).validate(),
            s.sift_config(0).validate(),
            s.generator().validate(),
            s.discriminator().validate(),
        ];
        if let Some(Err(e)) = checks.into_iter().find(Result::is_err) {
            return bad(e.to_string());
        }
        Ok(())
    }
}

/// Keys read by [`plan_from_config`].
pub const EXPERIMENT_KEYS: &[&str] = &[
    "experiment.regimes",
    "experiment.ratios",
    "experiment.runs",
    "experiment.seed",
    "experiment.workers",
];

/// The baseline at 1:0 and every other configured regime at every
/// configured ratio, each over `experiment.runs` seeds counting up from
/// `experiment.seed`.
pub fn plan_from_config(map: &ConfigMap, settings: &Settings) -> Result<Vec<ExperimentSpec>, ExperimentError> {
    let spec_err = |e: crate::config::ConfigError| ExperimentError::Spec(e.to_string());
    let runs = map.get("experiment.runs").map_err(spec_err)?.unwrap_or(5);
    let seed = map.get("experiment.seed").map_err(spec_err)?.unwrap_or(0);
    let ratios: Vec<Ratio> = map.get_list("experiment.ratios").map_err(spec_err)?.unwrap_or_default();
    let op = settings.transf_op_set;
    let regimes = map
        .raw("experiment.regimes")
        .unwrap_or("baseline")
        .split(',')
        .map(|r| Regime::parse(r.trim(), op).map_err(ExperimentError::Spec))
        .collect::<Result<Vec<_>, _>>()?;
    let mut specs = Vec::new();
    for regime in regimes {
        let points = match regime {
            Regime::Baseline => vec![Ratio::BASELINE],
            _ if ratios.is_empty() => return Err(ExperimentError::Spec(format!("{regime} needs at least one ratio"))),
            _ => ratios.clone(),
        };
        for ratio in points {
            specs.push(ExperimentSpec::new(regime, ratio, seed, runs, settings.clone()));
        }
    }
    Ok(specs)
}

/// Sifting counts for one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiftSummary {
    pub models_accepted: usize,
    pub models_rejected: usize,
    pub samples_accepted: usize,
    pub samples_rejected: usize,
    pub shortfall: Option<usize>,
}

impl From<&SiftOutcome> for SiftSummary {
    fn from(o: &SiftOutcome) -> Self {
        Self {
            models_accepted: o.stats.models_accepted,
            models_rejected: o.stats.models_rejected,
            samples_accepted: o.stats.samples_accepted,
            samples_rejected: o.stats.samples_rejected,
            shortfall: o.shortfall,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub regime: Regime,
    pub ratio: Ratio,
    pub run: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub wall_time: Duration,
    /// Absent outside the sifted-GAN regime.
    pub sift: Option<SiftSummary>,
    pub aug_pool_size: usize,
    /// Set when the ratio did not divide the batch.
    pub composition_note: Option<String>,
    pub aug_with_replacement: bool,
}

/// Pipeline stage named in run diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Gan,
    Sift,
    Augment,
    Classifier,
    Evaluate,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Data => "data",
            Stage::Gan => "train-gan",
            Stage::Sift => "sift",
            Stage::Augment => "augment",
            Stage::Classifier => "train-cls",
            Stage::Evaluate => "evaluate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunFailure {
    pub regime: Regime,
    pub ratio: Ratio,
    pub run: usize,
    pub seed: u64,
    pub stage: Stage,
    pub message: String,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} run {} (seed {}) failed in {}: {}",
            self.regime, self.ratio, self.run, self.seed, self.stage, self.message
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    /// Ordered by regime, ratio, then run index.
    pub records: Vec<MetricsRecord>,
    pub failures: Vec<RunFailure>,
    /// Sifting decisions per run seed, for runs that sifted.
    pub audits: BTreeMap<u64, Vec<AuditEntry>>,
}

type StageResult<T> = Result<T, (Stage, String)>;

fn at<T, E: fmt::Display>(stage: Stage, r: Result<T, E>) -> StageResult<T> {
    r.map_err(|e| (stage, e.to_string()))
}

/// Runs every spec. Runs sharing a seed and settings share the dataset,
/// the transform pools and the sifted set.
pub fn run_plan(specs: &[ExperimentSpec], workers: usize) -> Result<ExperimentOutput, ExperimentError> {
    for spec in specs {
        spec.validate()?;
    }
    let mut groups: Vec<SeedGroup> = Vec::new();
    for (spec_index, spec) in specs.iter().enumerate() {
        for (run, &seed) in spec.seeds.iter().enumerate() {
            let job = Job { spec_index, run };
            match groups
                .iter_mut()
                .find(|g| g.seed == seed && g.settings == &spec.settings)
            {
                Some(g) => g.jobs.push(job),
                None => groups.push(SeedGroup {
                    seed,
                    settings: &spec.settings,
                    jobs: vec![job],
                }),
            }
        }
    }

    let queue = Mutex::new(groups.into_iter());
    let results = Mutex::new(Vec::new());
    let workers = workers.max(1);
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let next = queue.lock().expect("queue lock").next();
                let Some(group) = next else { break };
                let out = group.run(specs);
                results.lock().expect("results lock").push(out);
            });
        }
    });

    let mut output = ExperimentOutput::default();
    for part in results.into_inner().expect("results lock") {
        output.records.extend(part.records);
        output.failures.extend(part.failures);
        output.audits.extend(part.audits);
    }
    output.records.sort_by_key(|r| (r.regime, r.ratio, r.run));
    output.failures.sort_by_key(|f| (f.regime, f.ratio, f.run));
    Ok(output)
}

/// One spec on one worker per available core.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput, ExperimentError> {
    run_plan(std::slice::from_ref(spec), default_workers())
}

pub fn default_workers() -> usize {
    thread::available_parallelism().map_or(1, usize::from)
}

struct Job {
    spec_index: usize,
    run: usize,
}

struct SeedGroup<'a> {
    seed: u64,
    settings: &'a Settings,
    jobs: Vec<Job>,
}

/// Per-seed artifacts, built on first use.
struct Workbench<'a> {
    seed: u64,
    settings: &'a Settings,
    split: Option<StageResult<(Vec<LabeledImage>, Vec<LabeledImage>)>>,
    pools: BTreeMap<OpSet, StageResult<Vec<LabeledImage>>>,
    sifted: Option<StageResult<(Vec<LabeledImage>, SiftOutcome)>>,
}

impl Workbench<'_> {
    fn split(&mut self) -> StageResult<&(Vec<LabeledImage>, Vec<LabeledImage>)> {
        let (seed, d) = (self.seed, self.settings.data);
        let split = self.split.get_or_insert_with(|| {
            let all = at(
                Stage::Data,
                gen_toy_dataset(d.per_class, d.num_classes, d.shape, derive_seed(seed, streams::DATASET)),
            )?;
            at(Stage::Data, split_half(&all, derive_seed(seed, streams::SPLIT)))
        });
        split.as_ref().map_err(Clone::clone)
    }

    fn transf_pool(&mut self, op_set: OpSet) -> StageResult<&[LabeledImage]> {
        if !self.pools.contains_key(&op_set) {
            let pool = self.split().map(|(train, _)| train.clone()).and_then(|train| {
                let mut rng = seeded_rng(derive_seed(self.seed, streams::TRANSFORM));
                at(Stage::Augment, transform_pool(&train, op_set, &mut rng))
            });
            self.pools.insert(op_set, pool);
        }
        self.pools[&op_set].as_deref().map_err(Clone::clone)
    }

    fn sifted(&mut self) -> StageResult<&(Vec<LabeledImage>, SiftOutcome)> {
        if self.sifted.is_none() {
            let result = self.split().map(|(train, _)| train.clone()).and_then(|train| {
                let outcome = sift_stream(self.settings, self.seed, train)?;
                let pool: Vec<LabeledImage> = outcome.samples.iter().map(|s| s.to_labeled()).collect();
                Ok((pool, outcome))
            });
            self.sifted = Some(result);
        }
        self.sifted.as_ref().expect("just set").as_ref().map_err(Clone::clone)
    }
}

/// Trains the GAN on one thread and sifts its snapshots on this one,
/// stopping the trainer once the target set size is reached.
pub fn sift_stream(settings: &Settings, seed: u64, train: Vec<LabeledImage>) -> StageResult<SiftOutcome> {
    let sift_cfg = settings.sift_config(derive_seed(seed, streams::SIFT));
    let mut trainer = at(
        Stage::Gan,
        GanTrainer::new(
            settings.gan_config(derive_seed(seed, streams::GAN)),
            settings.generator(),
            settings.discriminator(),
            train,
        ),
    )?;
    let mut collector = at(Stage::Sift, SiftCollector::new(sift_cfg))?;
    let (tx, rx) = mpsc::sync_channel::<siftgan_core::error::Result<ModelSnapshot>>(2);
    thread::scope(|scope| {
        scope.spawn(move || {
            for snapshot in trainer.online_output() {
                let failed = snapshot.is_err();
                if tx.send(snapshot).is_err() || failed {
                    break;
                }
            }
        });
        for snapshot in rx {
            let snapshot = at(Stage::Gan, snapshot)?;
            let report = at(Stage::Sift, sift_snapshot(&snapshot, &sift_cfg))?;
            if collector.push(report) {
                break;
            }
        }
        Ok(())
    })?;
    Ok(collector.finish())
}

struct GroupOutput {
    records: Vec<MetricsRecord>,
    failures: Vec<RunFailure>,
    audits: BTreeMap<u64, Vec<AuditEntry>>,
}

impl SeedGroup<'_> {
    fn run(self, specs: &[ExperimentSpec]) -> GroupOutput {
        let mut bench = Workbench {
            seed: self.seed,
            settings: self.settings,
            split: None,
            pools: BTreeMap::new(),
            sifted: None,
        };
        let mut out = GroupOutput {
            records: Vec::new(),
            failures: Vec::new(),
            audits: BTreeMap::new(),
        };
        for job in &self.jobs {
            let spec = &specs[job.spec_index];
            let started = Instant::now();
            match run_one(&mut bench, spec) {
                Ok(mut record) => {
                    record.run = job.run;
                    record.wall_time = started.elapsed();
                    out.records.push(record);
                }
                Err((stage, message)) => out.failures.push(RunFailure {
                    regime: spec.regime,
                    ratio: spec.ratio,
                    run: job.run,
                    seed: self.seed,
                    stage,
                    message,
                }),
            }
        }
        if let Some(Ok((_, outcome))) = bench.sifted {
            out.audits.insert(self.seed, outcome.audit);
        }
        out
    }
}

fn run_one(bench: &mut Workbench<'_>, spec: &ExperimentSpec) -> StageResult<MetricsRecord> {
    let settings = bench.settings;
    let seed = bench.seed;
    let (pool, sift): (Vec<LabeledImage>, Option<SiftSummary>) = match spec.regime {
        Regime::Baseline => (Vec::new(), None),
        Regime::Transf(op) => (bench.transf_pool(op)?.to_vec(), None),
        Regime::SifGan => {
            let (pool, outcome) = bench.sifted()?;
            if pool.is_empty() {
                return Err((Stage::Sift, "the sifted set is empty".into()));
            }
            (pool.clone(), Some(SiftSummary::from(outcome)))
        }
    };
    let (train, test) = bench.split()?;
    let (batch, note) = at(Stage::Classifier, settings.batch_spec(spec.ratio.orig, spec.ratio.aug))?;
    let cfg = settings.cls_config(batch, train.len(), derive_seed(seed, streams::CLASSIFIER));
    let trained = at(Stage::Classifier, train_augmented(train, &pool, &cfg))?;
    let accuracy = at(Stage::Evaluate, evaluate(&trained.classifier, test))?;
    Ok(MetricsRecord {
        regime: spec.regime,
        ratio: spec.ratio,
        run: 0,
        seed,
        accuracy,
        wall_time: Duration::ZERO,
        sift,
        aug_pool_size: pool.len(),
        composition_note: note.map(|n| n.to_string()),
        aug_with_replacement: trained.aug_with_replacement,
    })
}

/// Mean and sample standard deviation of one (regime, ratio) group.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub regime: Regime,
    pub ratio: Ratio,
    pub mean: f64,
    /// Absent for a single run.
    pub std: Option<f64>,
    pub runs: usize,
}

/// Mean and `n − 1` standard deviation. Values are summed in sorted order,
/// so the result does not depend on their order.
pub fn mean_std(values: &[f64]) -> Result<(f64, Option<f64>), ExperimentError> {
    if values.is_empty() {
        return Err(ExperimentError::EmptyGroup);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let std = (sorted.len() > 1).then(|| {
        let mut dev: Vec<f64> = sorted.iter().map(|v| (v - mean) * (v - mean)).collect();
        dev.sort_by(f64::total_cmp);
        (dev.iter().sum::<f64>() / (n - 1.0)).sqrt()
    });
    Ok((mean, std))
}

/// One aggregate per (regime, ratio), in regime then ratio order.
pub fn aggregate(records: &[MetricsRecord]) -> Result<Vec<Aggregate>, ExperimentError> {
    if records.is_empty() {
        return Err(ExperimentError::EmptyGroup);
    }
    let mut groups: BTreeMap<(Regime, Ratio), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry((r.regime, r.ratio)).or_default().push(r.accuracy);
    }
    groups
        .into_iter()
        .map(|((regime, ratio), accs)| {
            let (mean, std) = mean_std(&accs)?;
            Ok(Aggregate {
                regime,
                ratio,
                mean,
                std,
                runs: accs.len(),
            })
        })
        .collect()
}

fn sorted(aggregates: &[Aggregate]) -> Vec<&Aggregate> {
    let mut rows: Vec<&Aggregate> = aggregates.iter().collect();
    rows.sort_by_key(|a| (a.regime, a.ratio));
    rows
}

/// `regime,ratio,mean_acc,std_acc,runs`; an absent deviation is an empty
/// field.
pub fn results_csv(aggregates: &[Aggregate]) -> String {
    let mut out = String::from("regime,ratio,mean_acc,std_acc,runs\n");
    for a in sorted(aggregates) {
        let std = a.std.map(|s| format!("{s:.4}")).unwrap_or_default();
        out.push_str(&format!("{},{},{:.4},{},{}\n", a.regime, a.ratio, a.mean, std, a.runs));
    }
    out
}

/// `regime,ratio,mean_acc`, one line per measured point.
pub fn curve_csv(aggregates: &[Aggregate]) -> String {
    let mut out = String::from("regime,ratio,mean_acc\n");
    for a in sorted(aggregates) {
        out.push_str(&format!("{},{},{:.4}\n", a.regime, a.ratio, a.mean));
    }
    out
}

/// Per-run details. The wall time column is the only nondeterministic one.
pub fn runs_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(
        "regime,ratio,run,seed,accuracy,aug_pool,models_accepted,models_rejected,samples_accepted,samples_rejected,shortfall,with_replacement,wall_time_s\n",
    );
    for r in records {
        let sift = match &r.sift {
            Some(s) => format!(
                "{},{},{},{},{}",
                s.models_accepted,
                s.models_rejected,
                s.samples_accepted,
                s.samples_rejected,
                s.shortfall.unwrap_or(0)
            ),
            None => ",,,,".into(),
        };
        out.push_str(&format!(
            "{},{},{},{},{:.4},{},{},{},{:.3}\n",
            r.regime,
            r.ratio,
            r.run,
            r.seed,
            r.accuracy,
            r.aug_pool_size,
            sift,
            r.aug_with_replacement,
            r.wall_time.as_secs_f64()
        ));
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<(), ExperimentError> {
    let io = |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(text.as_bytes()).map_err(io)?;
    f.flush().map_err(io)
}

pub fn emit_csv(aggregates: &[Aggregate], path: &Path) -> Result<(), ExperimentError> {
    write_text(path, &results_csv(aggregates))
}

pub fn emit_curve(aggregates: &[Aggregate], path: &Path) -> Result<(), ExperimentError> {
    write_text(path, &curve_csv(aggregates))
}

pub fn emit_runs(records: &[MetricsRecord], path: &Path) -> Result<(), ExperimentError> {
    write_text(path, &runs_csv(records))
}

/// One decision per line.
pub fn audit_text(audit: &[AuditEntry]) -> String {
    let mut out = String::new();
    for entry in audit {
        out.push_str(&entry.to_string());
        out.push('\n');
    }
    out
}

pub fn emit_audit(audit: &[AuditEntry], path: &Path) -> Result<(), ExperimentError> {
    write_text(path, &audit_text(audit))
}
