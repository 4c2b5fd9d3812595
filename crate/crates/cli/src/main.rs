use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use siftgan::artifacts::{classifier_file, classifier_from_file, snapshot_file, snapshot_from_file};
use siftgan::config::ConfigMap;
use siftgan::experiment::{
    aggregate, default_workers, emit_audit, emit_csv, emit_curve, emit_runs, plan_from_config, run_plan, streams,
    ExperimentSpec, Ratio, Regime, EXPERIMENT_KEYS,
};
use siftgan::formats::{load_dataset, load_snapshot, save_dataset, save_snapshot, Dataset};
use siftgan::settings::{Settings, SETTINGS_KEYS};
use siftgan_core::clstrain::{evaluate, train_augmented};
use siftgan_core::data::{gen_toy_dataset, split_half, transform_pool, LabeledImage};
use siftgan_core::gantrain::GanTrainer;
use siftgan_core::sifter::{sift_snapshot, SiftCollector};
use siftgan_core::{derive_seed, seeded_rng};

#[derive(Parser)]
#[command(name = "siftgan", version, about = "Sifted-GAN data augmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy dataset and write train.sgds and test.sgds.
    GenData(Common),
    /// Train the conditional GAN on train.sgds and write its snapshots.
    TrainGan(Common),
    /// Sift the stored snapshots into sifted.sgds and audit.log.
    Sift(Common),
    /// Expand train.sgds with the transform suite.
    Augment(Common),
    /// Train a classifier for one regime and ratio.
    TrainCls(Common),
    /// Score classifier.sgsn on test.sgds.
    Evaluate(Common),
    /// Run whole regimes over seeded runs and write the CSV reports.
    Experiment(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Plain-text `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding every artifact of the pipeline.
    #[arg(long, default_value = "siftgan-out")]
    out: PathBuf,
    /// baseline, transf[:<op set>] or sifgan; a comma list for `experiment`.
    #[arg(long)]
    regime: Option<String>,
    /// Such as 1:3; a comma list for `experiment`.
    #[arg(long)]
    ratio: Option<String>,
    #[arg(long)]
    runs: Option<usize>,
}

struct Session {
    map: ConfigMap,
    settings: Settings,
    seed: u64,
    out: PathBuf,
}

impl Session {
    fn new(common: Common) -> Result<Self> {
        let mut map = match &common.config {
            Some(p) => ConfigMap::load(p)?,
            None => ConfigMap::default(),
        };
        if let Some(seed) = common.seed {
            map.set("experiment.seed", seed, "--seed");
        }
        if let Some(regime) = &common.regime {
            map.set("experiment.regimes", regime, "--regime");
        }
        if let Some(ratio) = &common.ratio {
            map.set("experiment.ratios", ratio, "--ratio");
        }
        if let Some(runs) = common.runs {
            map.set("experiment.runs", runs, "--runs");
        }
        let known: Vec<&str> = SETTINGS_KEYS.iter().chain(EXPERIMENT_KEYS).copied().collect();
        map.check_known(&known)?;
        let settings = Settings::from_config(&map)?;
        let seed = map.get("experiment.seed")?.unwrap_or(0);
        fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
        Ok(Self {
            map,
            settings,
            seed,
            out: common.out,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn regimes(&self) -> Result<Vec<Regime>> {
        let op = self.settings.transf_op_set;
        let list = self.map.raw("experiment.regimes").unwrap_or("baseline");
        list.split(',')
            .map(|r| Regime::parse(r.trim(), op).map_err(anyhow::Error::msg))
            .collect()
    }

    fn ratios(&self) -> Result<Vec<Ratio>> {
        Ok(self.map.get_list("experiment.ratios")?.unwrap_or_default())
    }

    /// The single regime and ratio a stage command works on.
    fn single(&self) -> Result<(Regime, Ratio)> {
        let regimes = self.regimes()?;
        let ratios = self.ratios()?;
        let [regime] = regimes[..] else {
            bail!("expected one regime, got {}", regimes.len());
        };
        let ratio = match (regime, &ratios[..]) {
            (Regime::Baseline, []) => Ratio::BASELINE,
            (_, [r]) => *r,
            (_, []) => bail!("--ratio is required for {regime}"),
            _ => bail!("expected one ratio, got {}", ratios.len()),
        };
        Ok((regime, ratio))
    }
}

fn main() {
    let cli = Cli::parse();
    let (stage, common) = match cli.command {
        Command::GenData(c) => ("gen-data", c),
        Command::TrainGan(c) => ("train-gan", c),
        Command::Sift(c) => ("sift", c),
        Command::Augment(c) => ("augment", c),
        Command::TrainCls(c) => ("train-cls", c),
        Command::Evaluate(c) => ("evaluate", c),
        Command::Experiment(c) => ("experiment", c),
    };
    let result = Session::new(common).and_then(|ctx| match stage {
        "gen-data" => gen_data(&ctx),
        "train-gan" => train_gan(&ctx),
        "sift" => sift(&ctx),
        "augment" => augment(&ctx),
        "train-cls" => train_cls(&ctx),
        "evaluate" => evaluate_cmd(&ctx),
        _ => experiment(&ctx),
    });
    if let Err(e) = result {
        eprintln!("{stage}: error: {e:#}");
        std::process::exit(1);
    }
}

fn load(path: &Path) -> Result<Dataset> {
    Ok(load_dataset(path)?)
}

fn gen_data(ctx: &Session) -> Result<()> {
    let d = ctx.settings.data;
    let all = gen_toy_dataset(
        d.per_class,
        d.num_classes,
        d.shape,
        derive_seed(ctx.seed, streams::DATASET),
    )?;
    let (train, test) = split_half(&all, derive_seed(ctx.seed, streams::SPLIT))?;
    for (name, samples) in [("train.sgds", train), ("test.sgds", test)] {
        let n = samples.len();
        save_dataset(&ctx.path(name), &Dataset::new(d.num_classes, samples)?)?;
        println!("wrote {} ({n} samples)", ctx.path(name).display());
    }
    Ok(())
}

fn train_gan(ctx: &Session) -> Result<()> {
    let train = load(&ctx.path("train.sgds"))?;
    let s = &ctx.settings;
    let dir = ctx.path("snapshots");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut trainer = GanTrainer::new(
        s.gan_config(derive_seed(ctx.seed, streams::GAN)),
        s.generator(),
        s.discriminator(),
        train.samples,
    )?;
    let mut count = 0;
    for snapshot in trainer.online_output() {
        let snapshot = snapshot?;
        save_snapshot(
            &dir.join(format!("j{:08}.sgsn", snapshot.iteration)),
            &snapshot_file(&snapshot),
        )?;
        count += 1;
    }
    let mut log = String::from("iteration,d_loss,g_loss\n");
    for h in trainer.history() {
        log.push_str(&format!("{},{:?},{:?}\n", h.iteration, h.d_loss, h.g_loss));
    }
    let log_path = ctx.path("gan_losses.csv");
    fs::write(&log_path, log).with_context(|| format!("writing {}", log_path.display()))?;
    println!("wrote {count} snapshots to {}", dir.display());
    Ok(())
}

fn sift(ctx: &Session) -> Result<()> {
    let s = &ctx.settings;
    let dir = ctx.path("snapshots");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "sgsn"));
    paths.sort();
    let cfg = s.sift_config(derive_seed(ctx.seed, streams::SIFT));
    let mut collector = SiftCollector::new(cfg)?;
    for path in &paths {
        let snapshot = snapshot_from_file(&load_snapshot(path)?, s.generator(), s.discriminator())
            .with_context(|| format!("loading {}", path.display()))?;
        if collector.push(sift_snapshot(&snapshot, &cfg)?) {
            break;
        }
    }
    let outcome = collector.finish();
    let samples: Vec<LabeledImage> = outcome.samples.iter().map(|x| x.to_labeled()).collect();
    let ds = Dataset {
        samples,
        ..Dataset::empty(s.data.num_classes, s.data.shape)
    };
    save_dataset(&ctx.path("sifted.sgds"), &ds)?;
    emit_audit(&outcome.audit, &ctx.path("audit.log"))?;
    let st = &outcome.stats;
    println!(
        "models accepted {} rejected {}; samples accepted {} rejected {}; per class {:?}",
        st.models_accepted, st.models_rejected, st.samples_accepted, st.samples_rejected, st.per_class
    );
    if let Some(missing) = outcome.shortfall {
        println!("snapshot stream ended {missing} samples short of the target set size");
    }
    Ok(())
}

fn augment(ctx: &Session) -> Result<()> {
    let op_set = match ctx.map.raw("experiment.regimes") {
        Some(_) => match ctx.regimes()?[..] {
            [Regime::Transf(op)] => op,
            _ => bail!("augment takes a single transf regime"),
        },
        None => ctx.settings.transf_op_set,
    };
    let train = load(&ctx.path("train.sgds"))?;
    let mut rng = seeded_rng(derive_seed(ctx.seed, streams::TRANSFORM));
    let pool = transform_pool(&train.samples, op_set, &mut rng)?;
    let path = ctx.path(&format!("transf-{}.sgds", op_set.name()));
    let n = pool.len();
    save_dataset(
        &path,
        &Dataset {
            samples: pool,
            ..Dataset::empty(train.num_classes, train.shape)
        },
    )?;
    println!("wrote {} ({n} samples)", path.display());
    Ok(())
}

fn train_cls(ctx: &Session) -> Result<()> {
    let (regime, ratio) = ctx.single()?;
    ExperimentSpec::new(regime, ratio, ctx.seed, 1, ctx.settings.clone()).validate()?;
    let train = load(&ctx.path("train.sgds"))?;
    let pool = match regime {
        Regime::Baseline => Vec::new(),
        Regime::Transf(op) => load(&ctx.path(&format!("transf-{}.sgds", op.name())))?.samples,
        Regime::SifGan => load(&ctx.path("sifted.sgds"))?.samples,
    };
    let (batch, note) = ctx.settings.batch_spec(ratio.orig, ratio.aug)?;
    if let Some(note) = note {
        println!("{note}");
    }
    let cfg = ctx
        .settings
        .cls_config(batch, train.samples.len(), derive_seed(ctx.seed, streams::CLASSIFIER));
    let run = train_augmented(&train.samples, &pool, &cfg)?;
    if run.aug_with_replacement {
        println!("the augmented pool was sampled with replacement");
    }
    let mut log = String::from("phase,iteration,loss\n");
    for l in &run.losses {
        log.push_str(&format!("{},{},{:?}\n", l.phase, l.iteration, l.loss));
    }
    let log_path = ctx.path("cls_losses.csv");
    fs::write(&log_path, log).with_context(|| format!("writing {}", log_path.display()))?;
    save_snapshot(&ctx.path("classifier.sgsn"), &classifier_file(&run.classifier))?;
    println!(
        "trained {regime} at {ratio}; wrote {}",
        ctx.path("classifier.sgsn").display()
    );
    Ok(())
}

fn evaluate_cmd(ctx: &Session) -> Result<()> {
    let classifier = classifier_from_file(&load_snapshot(&ctx.path("classifier.sgsn"))?, ctx.settings.classifier())?;
    let test = load(&ctx.path("test.sgds"))?;
    let acc = evaluate(&classifier, &test.samples)?;
    println!("accuracy {acc:.4}");
    Ok(())
}

fn experiment(ctx: &Session) -> Result<()> {
    let workers = ctx.map.get("experiment.workers")?.unwrap_or_else(default_workers);
    let specs = plan_from_config(&ctx.map, &ctx.settings)?;
    let output = run_plan(&specs, workers)?;
    for f in &output.failures {
        eprintln!("{f}");
    }
    if output.records.is_empty() {
        bail!("every run failed");
    }
    let aggregates = aggregate(&output.records)?;
    emit_csv(&aggregates, &ctx.path("results.csv"))?;
    emit_curve(&aggregates, &ctx.path("curve.csv"))?;
    emit_runs(&output.records, &ctx.path("runs.csv"))?;
    for (seed, audit) in &output.audits {
        emit_audit(audit, &ctx.path(&format!("audit-seed{seed}.log")))?;
    }
    print!("{}", siftgan::experiment::results_csv(&aggregates));
    if !output.failures.is_empty() {
        bail!("{} run(s) failed", output.failures.len());
    }
    Ok(())
}
