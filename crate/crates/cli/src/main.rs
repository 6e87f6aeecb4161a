use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use riformer::analysis::{self, DEFAULT_BINS};
use riformer::bench::{self, BenchReport};
use riformer::checkpoint::{self, Metadata};
use riformer::config::{ExperimentConfig, Overrides};
use riformer::data::{DataSource, Dataset, DatasetSpec, SyntheticSpec};
use riformer::model::{Model, ModelSpec};
use riformer::reparam::{self, random_probes};
use riformer::tensor::Tensor;
use riformer::train::{write_log_csv, TrainConfig, Trainer};

#[derive(Parser, Debug)]
#[command(name = "riformer", version, about = "Train, distill, fuse and profile token-mixer-free vision backbones")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON experiment config with `model`, `data`, `train`, `imitation` and `bench` blocks.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of training epochs in the config.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides the batch size in the config.
    #[arg(long)]
    batch: Option<usize>,
    /// Output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from scratch with the configured recipe.
    Train(TrainArgs),
    /// Train a student against a frozen teacher checkpoint.
    Distill(TrainArgs),
    /// Convert an affine train-form checkpoint into its deploy form.
    Fuse {
        /// Train-form checkpoint.
        #[arg(long = "in")]
        input: PathBuf,
        /// Destination for the deploy-form checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check that a deploy checkpoint computes the same function as its source.
    Verify {
        /// Train-form checkpoint.
        #[arg(long)]
        train: PathBuf,
        /// Deploy-form checkpoint.
        #[arg(long)]
        deploy: PathBuf,
        /// Number of random probe inputs.
        #[arg(long, default_value_t = 100)]
        probes: usize,
        /// Maximum absolute difference allowed.
        #[arg(long, default_value_t = 1e-5)]
        tol: f32,
        /// Seed for the probe inputs.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure inference throughput.
    Bench(BenchArgs),
    /// Measure per-component latency with cumulative component sets.
    Breakdown(BenchArgs),
    /// Effective receptive field of a checkpoint as a CSV grid.
    Erf(ProbeArgs),
    /// Histogram of one stage's output activations.
    Featdist {
        #[command(flatten)]
        probe: ProbeArgs,
        /// Stage index, 0 to 3.
        #[arg(long)]
        stage: usize,
        /// Number of bins.
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        /// Report per-stage 1-Wasserstein distances to this checkpoint.
        #[arg(long)]
        against: Option<PathBuf>,
    },
    /// Write the learned affine coefficients of each block as CSV.
    DumpAffine {
        /// Affine train-form checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// CSV destination, stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a checkpoint's manifest as JSON.
    InspectCkpt {
        /// Checkpoint to inspect.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Write a synthetic dataset as 3073-byte CIFAR-10 style records.
    GenData(GenDataArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Teacher checkpoint; overrides `teacher` in the config.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Per-epoch CSV log; defaults to the output path with a `.csv` extension.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoints to time; repeatable.
    #[arg(long)]
    ckpt: Vec<PathBuf>,
    /// Fuse affine train-form models before timing.
    #[arg(long)]
    deploy: bool,
    /// Input resolution.
    #[arg(long)]
    resolution: Option<usize>,
    /// Untimed runs before measuring.
    #[arg(long)]
    warmup: Option<usize>,
    /// Timed runs per repeat.
    #[arg(long)]
    runs: Option<usize>,
    /// Number of repeats, odd.
    #[arg(long)]
    repeats: Option<usize>,
    /// Write raw timings as JSON here.
    #[arg(long)]
    raw: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    /// Model checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of probe images, taken from the config's validation set or
    /// drawn at random without a config.
    #[arg(long, default_value_t = 32)]
    images: usize,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Number of classes.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Images per class.
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    /// Image side length.
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    /// Pixel noise standard deviation.
    #[arg(long, default_value_t = 0.2)]
    noise: f32,
    /// Distractor grating contrast.
    #[arg(long, default_value_t = 0.5)]
    distractor: f32,
}

#[derive(Debug)]
struct ValidationFailure(String);

impl std::fmt::Display for ValidationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationFailure {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match bench::threads_from_env().and_then(bench::configure_threads) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<ValidationFailure>().is_some() {
        return 2;
    }
    match e.downcast_ref::<riformer::Error>() {
        Some(
            riformer::Error::Config(_)
            | riformer::Error::InvalidSpec(_)
            | riformer::Error::InvalidArgument(_)
            | riformer::Error::ModelState(_),
        ) => 2,
        _ => 3,
    }
}

fn load_config(common: &Common) -> Result<Option<ExperimentConfig>> {
    let Some(path) = &common.config else { return Ok(None) };
    let mut cfg = ExperimentConfig::load(path)?;
    for notice in cfg.apply(&Overrides { seed: common.seed, epochs: common.epochs, batch: common.batch }) {
        log::info!("{notice}");
    }
    Ok(Some(cfg))
}

fn require_config(common: &Common) -> Result<ExperimentConfig> {
    load_config(common)?.ok_or_else(|| anyhow!(riformer::Error::Config("--config is required".into())))
}

fn require_out(common: &Common) -> Result<&Path> {
    common.out.as_deref().ok_or_else(|| anyhow!(riformer::Error::Config("--out is required".into())))
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(checkpoint::load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?.0)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a, false),
        Command::Distill(a) => train(a, true),
        Command::Fuse { input, out } => {
            let (model, mut meta) = checkpoint::load_checkpoint(&input)?;
            let deployed = reparam::switch_to_deploy(&model)?;
            meta.extra.insert("fused_from".into(), input.display().to_string());
            checkpoint::save_checkpoint(&deployed, &meta, &out)?;
            log::info!("{} parameters -> {}", model.param_count(), deployed.param_count());
            Ok(())
        }
        Command::Verify { train, deploy, probes, tol, seed, out } => {
            let (t, d) = (load_model(&train)?, load_model(&deploy)?);
            let report = reparam::verify_equivalence(&t, &d, probes, tol, seed)?;
            let json = serde_json::to_string_pretty(&report)?;
            println!("{json}");
            if let Some(p) = out {
                std::fs::write(p, &json)?;
            }
            if !report.pass {
                bail!(ValidationFailure(format!("max abs diff {:e} exceeds tolerance {:e}", report.max_abs_diff, tol)));
            }
            Ok(())
        }
        Command::Bench(a) => bench_cmd(a, false),
        Command::Breakdown(a) => bench_cmd(a, true),
        Command::Erf(a) => {
            let model = load_model(&a.ckpt)?;
            let images = probe_images(&a, &model)?;
            let map = analysis::erf_map(&model, &images, 16)?;
            match &a.common.out {
                Some(p) => map.write_csv(p)?,
                None => print!("{}", map.to_csv()),
            }
            log::info!("{} of {} cells above 0.01", map.count_above(0.01), map.values.len());
            Ok(())
        }
        Command::Featdist { probe, stage, bins, against } => {
            let model = load_model(&probe.ckpt)?;
            let images = probe_images(&probe, &model)?;
            let hist = analysis::feature_histogram(&model, &images, stage, bins)?;
            match &probe.common.out {
                Some(p) => hist.write_csv(p)?,
                None => print!("{}", hist.to_csv()),
            }
            if let Some(other) = against {
                let d = analysis::stage_distances(&model, &load_model(&other)?, &images, bins)?;
                eprintln!("{}", serde_json::json!({ "wasserstein1_per_stage": d }));
            }
            Ok(())
        }
        Command::DumpAffine { ckpt, out } => {
            let rows = analysis::dump_affine_coefficients(&load_model(&ckpt)?)?;
            match out {
                Some(p) => analysis::write_affine_csv(&p, &rows)?,
                None => {
                    println!("stage,block,channel,s,t");
                    for r in rows {
                        println!("{},{},{},{},{}", r.stage, r.block, r.channel, r.s, r.t);
                    }
                }
            }
            Ok(())
        }
        Command::InspectCkpt { ckpt } => {
            let manifest = checkpoint::inspect_checkpoint(&ckpt)?;
            println!("{}", serde_json::to_string_pretty(&manifest)?);
            Ok(())
        }
        Command::GenData(a) => gen_data(a),
    }
}

fn train(a: TrainArgs, distill: bool) -> Result<()> {
    let cfg = require_config(&a.common)?;
    let out = require_out(&a.common)?;
    let tc: TrainConfig = cfg.train_config()?;
    let data = cfg.data()?;
    let train_set = data.train.load()?;
    let val_set = data.val.as_ref().map(DatasetSpec::load).transpose()?;
    let teacher = match (distill, a.teacher.as_ref().or(cfg.teacher.as_ref())) {
        (true, Some(p)) => Some(load_model(p)?),
        (true, None) => bail!(riformer::Error::Config("distill needs --teacher or `teacher` in the config".into())),
        (false, Some(_)) if a.teacher.is_some() => bail!(riformer::Error::Config("--teacher is only used by distill".into())),
        (false, _) => None,
    };
    let student = Model::build(&cfg.model, tc.seed)?;
    let outcome = Trainer::new(&tc).run(student, teacher.as_ref(), &train_set, val_set.as_ref())?;
    let meta = Metadata {
        seed: Some(tc.seed),
        recipe: Some(tc.recipe.clone()),
        epoch: Some(tc.epochs),
        ..Default::default()
    };
    checkpoint::save_checkpoint(&outcome.model, &meta, out)?;
    let log_path = a.log.unwrap_or_else(|| out.with_extension("csv"));
    write_log_csv(&log_path, &outcome.log)?;
    if let Some(last) = outcome.log.last().and_then(|r| r.val_top1) {
        log::info!("final val top-1 {last:.4}");
    }
    Ok(())
}

fn bench_cmd(a: BenchArgs, breakdown: bool) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let mut protocol = cfg.as_ref().and_then(|c| c.bench.clone()).unwrap_or_default();
    if let Some(b) = a.common.batch {
        protocol.batch_size = b;
    }
    if let Some(r) = a.resolution {
        protocol.resolution = r;
    }
    if let Some(w) = a.warmup {
        protocol.warmup_runs = w;
    }
    if let Some(n) = a.runs {
        protocol.timed_runs = n;
    }
    if let Some(r) = a.repeats {
        protocol.repeats = r;
    }
    protocol.validate()?;

    let mut models: Vec<(String, Model)> = Vec::new();
    for p in &a.ckpt {
        let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string());
        models.push((id, load_model(p)?));
    }
    if let Some(c) = &cfg {
        let spec: ModelSpec = c.model.clone();
        models.push((format!("config-{}", spec.mixer.kind), Model::build(&spec, a.common.seed.unwrap_or(0))?));
    }
    if models.is_empty() {
        bail!(riformer::Error::Config("give at least one --ckpt or a --config with a model".into()));
    }
    if a.deploy {
        for (id, m) in &mut models {
            if m.is_deployed() {
                continue;
            }
            match reparam::switch_to_deploy(m) {
                Ok(d) => {
                    *m = d;
                    id.push_str("-deploy");
                }
                Err(e) => log::info!("{id} timed in train form: {e}"),
            }
        }
    }

    let mut rows: Vec<(String, BenchReport)> = Vec::new();
    let mut details = Vec::new();
    if breakdown {
        for (id, m) in &models {
            let table = bench::latency_breakdown(m, id, &protocol)?;
            for r in &table {
                println!(
                    "{id} {:<6} delta {:>9.4} ms  std {:>7.4}{}",
                    r.component,
                    r.delta_ms,
                    r.delta_std_ms,
                    if r.negative { "  (negative: below noise)" } else { "" }
                );
                rows.push((r.component.clone(), r.cumulative.clone()));
            }
            details.push(serde_json::to_value(&table)?);
        }
    } else {
        let refs: Vec<(&str, &Model)> = models.iter().map(|(id, m)| (id.as_str(), m)).collect();
        for report in bench::compare_throughput(&refs, &protocol)? {
            println!(
                "{}: {:.2} images/s, median {:.4} ms/batch, {} threads",
                report.model, report.images_per_s, report.median_ms, report.thread_count
            );
            details.push(serde_json::to_value(&report)?);
            rows.push(("full".into(), report));
        }
    }
    if let Some(out) = &a.common.out {
        let refs: Vec<(String, &BenchReport)> = rows.iter().map(|(c, r)| (c.clone(), r)).collect();
        bench::write_csv(out, &refs)?;
    }
    if let Some(raw) = &a.raw {
        std::fs::write(raw, serde_json::to_string_pretty(&details)?)?;
    }
    Ok(())
}

fn probe_images(a: &ProbeArgs, model: &Model) -> Result<Tensor> {
    if a.images == 0 {
        bail!(riformer::Error::InvalidArgument("--images must be >= 1".into()));
    }
    match load_config(&a.common)? {
        Some(cfg) => {
            let data = cfg.data()?;
            let ds: Dataset = data.val.as_ref().unwrap_or(&data.train).load()?;
            let n = a.images.min(ds.len());
            Ok(ds.images(&(0..n).collect::<Vec<_>>())?)
        }
        None => Ok(random_probes(model.spec(), a.images, a.common.seed.unwrap_or(0))),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let out = require_out(&a.common)?;
    let spec = match load_config(&a.common)? {
        Some(cfg) => cfg.data()?.train.clone(),
        None => DatasetSpec {
            source: DataSource::Synthetic(SyntheticSpec {
                seed: a.common.seed.unwrap_or(0),
                num_classes: a.classes,
                samples_per_class: a.per_class,
                resolution: a.resolution,
                noise: a.noise,
                distractor: a.distractor,
            }),
            normalization: None,
        },
    };
    let ds = spec.load()?;
    ds.write_records(out)?;
    log::info!("wrote {} records of {} bytes to {}", ds.len(), 1 + 3 * ds.resolution * ds.resolution, out.display());
    Ok(())
}
