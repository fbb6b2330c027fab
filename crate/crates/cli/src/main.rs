//! `glitchsim`: data generation, training, campaigns, searches, analysis
//! and defence evaluation driven by one TOML config.
//!
//! Exit status: 0 on success, 1 on usage or validation errors (bad flags,
//! bad config, missing inputs, existing outputs), 2 when execution fails.

mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use glitchsim_core::analysis::{bit_flip_stats, class_histogram, top_k_table, write_top_k_csv};
use glitchsim_core::campaign::{self, read_jsonl, run_config, run_inputs, ProtocolInput, Target};
use glitchsim_core::dataset::{generate, Dataset, Split};
use glitchsim_core::defense::{evaluate_defense, Attack, DefenseReport};
use glitchsim_core::model::{ModelParams, NUM_CLASSES};
use glitchsim_core::search::{search_with, SearchContext, SearchReport, SearchSpace};
use glitchsim_core::trace::{compile_trace, MicroOpTrace};
use glitchsim_core::train::{accuracy, train};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "glitchsim", version, about = "Voltage-glitch campaign simulator")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `protocol.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `paths.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic readout dataset (train.csv, test.csv).
    GenData(Common),
    /// Train the classifier (model.mlp).
    Train(Common),
    /// Run one glitch campaign (campaign.jsonl).
    Run(Common),
    /// Search the glitch parameter space (search.csv, search.json).
    Search(Common),
    /// Bit-flip, class and top-k statistics from a log and report.
    Analyze(Common),
    /// Evaluate defence policies against one attack (defense.csv, defense.json).
    Defend(Common),
}

/// Failure class, mapped to the exit status.
enum Failure {
    Usage(anyhow::Error),
    Exec(anyhow::Error),
}

trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn exec(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
    fn exec(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Exec(e.into()))
    }
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn new(common: &Common) -> anyhow::Result<Self> {
        let cfg = RunConfig::load(&common.config)?;
        let seed = common
            .seed
            .or(cfg.protocol.seed)
            .context("a seed is required: pass --seed or set protocol.seed")?;
        let out = common
            .out
            .clone()
            .or_else(|| cfg.paths.out_dir.clone())
            .context("an output directory is required: pass --out or set paths.out_dir")?;
        if let Some(jobs) = common.jobs {
            if jobs == 0 {
                bail!("--jobs must be >= 1");
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build_global()
                .context("configuring worker pool")?;
        }
        Ok(Ctx { cfg, seed, out })
    }

    /// Fails if any output already exists, then creates the directory.
    fn claim(&self, names: &[String]) -> anyhow::Result<()> {
        for n in names {
            let p = self.out.join(n);
            if p.exists() {
                bail!("output {} already exists; outputs are write-once", p.display());
            }
        }
        std::fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))
    }

    fn create(&self, name: &str) -> anyhow::Result<BufWriter<File>> {
        let p = self.out.join(name);
        let f = File::create_new(&p).with_context(|| format!("creating {}", p.display()))?;
        Ok(BufWriter::new(f))
    }

    fn write_with(
        &self,
        name: &str,
        f: impl FnOnce(&mut BufWriter<File>) -> anyhow::Result<()>,
    ) -> anyhow::Result<()> {
        let mut w = self.create(name)?;
        f(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> anyhow::Result<()> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        })
    }

    fn dataset(&self, split: Split) -> anyhow::Result<Dataset> {
        let dir = self.cfg.input("dataset", &self.cfg.paths.dataset)?;
        let file = dir.join(match split {
            Split::Train => "train.csv",
            Split::Test => "test.csv",
        });
        let f = File::open(&file).with_context(|| format!("opening {}", file.display()))?;
        Dataset::read_csv(BufReader::new(f), split).with_context(|| format!("reading {}", file.display()))
    }

    fn model(&self) -> anyhow::Result<ModelParams> {
        let p = self.cfg.input("weights", &self.cfg.paths.weights)?;
        let f = File::open(&p)?;
        ModelParams::read_mlpv1(BufReader::new(f)).with_context(|| format!("reading {}", p.display()))
    }

    fn trace(&self, params: &ModelParams) -> anyhow::Result<MicroOpTrace> {
        Ok(compile_trace(params.dims(), &self.cfg.trace.cost_model())?)
    }

    /// One input per protocol class, drawn by seed from the configured split.
    fn protocol_inputs(&self) -> anyhow::Result<Vec<ProtocolInput>> {
        let ds = self.dataset(self.cfg.protocol.split)?;
        let picks = ds.one_per_class(self.seed)?;
        let inputs = ProtocolInput::from_samples(picks);
        Ok(match &self.cfg.protocol.classes {
            None => inputs,
            Some(classes) => inputs
                .into_iter()
                .filter(|i| classes.contains(&i.true_class))
                .collect(),
        })
    }

    fn campaign(
        &self,
        target: &Target<'_>,
        inputs: &[ProtocolInput],
        glitch: &glitchsim_core::fault::GlitchConfig,
    ) -> glitchsim_core::Result<campaign::ConfigResult> {
        let reps = self.cfg.protocol.reps;
        if self.cfg.protocol.classes.is_none() {
            run_config(target, inputs, reps, glitch, self.seed)
        } else {
            run_inputs(target, inputs, reps, glitch, self.seed)
        }
    }
}

fn gen_data(ctx: &Ctx) -> Result<(), Failure> {
    ctx.claim(&["train.csv".into(), "test.csv".into()]).usage()?;
    let ds = generate(&ctx.cfg.data, ctx.seed).exec()?;
    for (name, split) in [("train.csv", Split::Train), ("test.csv", Split::Test)] {
        ctx.write_with(name, |w| Ok(ds.subset(split).write_csv(w)?)).exec()?;
    }
    log::info!("wrote {} samples to {}", ds.samples.len(), ctx.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    seed: u64,
    h1: usize,
    h2: usize,
    train_accuracy: f64,
    test_accuracy: f64,
}

fn train_cmd(ctx: &Ctx) -> Result<(), Failure> {
    let mut ds = ctx.dataset(Split::Train).usage()?;
    let test = ctx.dataset(Split::Test).usage()?;
    ds.samples.extend(test.samples);
    ctx.claim(&["model.mlp".into(), "train_summary.json".into()]).usage()?;
    let params = train(&ds, &ctx.cfg.train, ctx.seed).exec()?;
    let summary = TrainSummary {
        seed: ctx.seed,
        h1: ctx.cfg.train.h1,
        h2: ctx.cfg.train.h2,
        train_accuracy: accuracy(&params, &ds, Split::Train).exec()?,
        test_accuracy: accuracy(&params, &ds, Split::Test).exec()?,
    };
    ctx.write_with("model.mlp", |w| Ok(params.write_mlpv1(w)?)).exec()?;
    ctx.write_json("train_summary.json", &summary).exec()?;
    println!(
        "train accuracy {:.4}, test accuracy {:.4}",
        summary.train_accuracy, summary.test_accuracy
    );
    Ok(())
}

fn run_cmd(ctx: &Ctx) -> Result<(), Failure> {
    let glitch = ctx.cfg.glitch.context("run needs a [glitch] section").usage()?;
    let params = ctx.model().usage()?;
    let trace = ctx.trace(&params).usage()?;
    let profile = ctx.cfg.profile().usage()?;
    let inputs = ctx.protocol_inputs().usage()?;
    ctx.claim(&["campaign.jsonl".into()]).usage()?;
    let target = Target::new(&params, &trace, &profile);
    let result = ctx.campaign(&target, &inputs, &glitch).exec()?;
    ctx.write_with("campaign.jsonl", |w| Ok(result.write_jsonl(w)?)).exec()?;
    let s = result.summary();
    println!(
        "{glitch}: {} trials, {} faults, {} resets",
        s.n_trials, s.fault_count, s.reset_count
    );
    Ok(())
}

fn layer_label(cfg: &RunConfig) -> String {
    cfg.search
        .layer
        .map_or_else(|| "all".to_string(), |l| l.name().to_string())
}

fn search_cmd(ctx: &Ctx) -> Result<(), Failure> {
    if ctx.cfg.protocol.classes.is_some() {
        return Err(Failure::Usage(anyhow!(
            "search uses the full one-input-per-class protocol; remove protocol.classes"
        )));
    }
    let params = ctx.model().usage()?;
    let trace = ctx.trace(&params).usage()?;
    let profile = ctx.cfg.profile().usage()?;
    let inputs = campaign::protocol_order(&ctx.protocol_inputs().usage()?).usage()?;
    let s = &ctx.cfg.search;
    let mut space = s.space.unwrap_or_else(|| SearchSpace::full(&trace));
    if let Some(layer) = s.layer {
        space.external_offset = SearchSpace::layer(&trace, layer).usage()?.external_offset;
    }
    space.validate().usage()?;
    ctx.claim(&["search.csv".into(), "search.json".into()]).usage()?;

    let sctx = SearchContext {
        target: Target::new(&params, &trace, &profile),
        inputs: &inputs,
        reps: ctx.cfg.protocol.reps,
        campaign_seed: ctx.seed,
    };
    let report = search_with(&space, &s.objective, s.budget, s.strategy, &s.adaptive, &sctx, ctx.seed).exec()?;
    ctx.write_with("search.csv", |w| Ok(report.write_csv(w)?)).exec()?;
    ctx.write_json("search.json", &report).exec()?;
    if let Some(best) = report.best() {
        println!(
            "best of {}: {} score {:.4} faults {} resets {}",
            report.evaluated.len(),
            best.glitch,
            best.score,
            best.fault_count,
            best.reset_count
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct AnalysisSummary {
    bit_flips: glitchsim_core::analysis::BitFlipStats,
    chi_square: Option<glitchsim_core::analysis::ChiSquareTest>,
    /// Most frequent predicted classes per true class.
    modes: Vec<(usize, Vec<usize>)>,
}

fn analyze_cmd(ctx: &Ctx) -> Result<(), Failure> {
    let log_path = ctx.cfg.input("log", &ctx.cfg.paths.log).usage()?;
    let log = read_jsonl(BufReader::new(File::open(&log_path).usage()?))
        .with_context(|| format!("reading {}", log_path.display()))
        .usage()?;
    let report: Option<SearchReport> = match &ctx.cfg.paths.report {
        None => None,
        Some(_) => {
            let p = ctx.cfg.input("report", &ctx.cfg.paths.report).usage()?;
            let f = File::open(&p).usage()?;
            Some(
                serde_json::from_reader(BufReader::new(f))
                    .with_context(|| format!("reading {}", p.display()))
                    .usage()?,
            )
        }
    };
    let classes: Vec<usize> = (0..NUM_CLASSES)
        .filter(|&c| log.iter().any(|r| r.true_class as usize == c))
        .collect();
    let topk_name = format!("topk_{}.csv", layer_label(&ctx.cfg));
    let mut names = vec!["bitflips.csv".to_string(), "analysis.json".to_string()];
    names.extend(classes.iter().map(|c| format!("histogram_{c}.csv")));
    if report.is_some() {
        names.push(topk_name.clone());
    }
    ctx.claim(&names).usage()?;

    let stats = bit_flip_stats(&log).usage()?;
    ctx.write_with("bitflips.csv", |w| Ok(stats.write_csv(w)?)).exec()?;
    let mut modes = Vec::new();
    for &c in &classes {
        let h = class_histogram(&log, Some(c));
        ctx.write_with(&format!("histogram_{c}.csv"), |w| Ok(h.write_csv(w)?))
            .exec()?;
        modes.push((c, h.modes().into_iter().take(3).collect()));
    }
    if let Some(report) = &report {
        let rows = top_k_table(report, ctx.cfg.analysis.top_k).usage()?;
        ctx.write_with(&topk_name, |w| Ok(write_top_k_csv(&rows, w)?)).exec()?;
    }
    let summary = AnalysisSummary {
        chi_square: stats.uniformity(),
        bit_flips: stats,
        modes,
    };
    ctx.write_json("analysis.json", &summary).exec()?;
    if let Some(mean) = summary.bit_flips.mean_hamming {
        println!(
            "{} trials, {} resets, mean Hamming distance {mean:.4}",
            summary.bit_flips.n_trials, summary.bit_flips.n_reset
        );
    } else {
        println!("{} trials, all reset", summary.bit_flips.n_trials);
    }
    Ok(())
}

fn defend_cmd(ctx: &Ctx) -> Result<(), Failure> {
    let glitch = ctx.cfg.glitch.context("defend needs a [glitch] section").usage()?;
    if ctx.cfg.defense.is_empty() {
        return Err(Failure::Usage(anyhow!("defend needs at least one [[defense]] policy")));
    }
    let params = ctx.model().usage()?;
    let trace = ctx.trace(&params).usage()?;
    let profile = ctx.cfg.profile().usage()?;
    let inputs = ctx.protocol_inputs().usage()?;
    let inputs = if ctx.cfg.protocol.classes.is_none() {
        campaign::protocol_order(&inputs).usage()?
    } else {
        inputs
    };
    ctx.claim(&["defense.csv".into(), "defense.json".into()]).usage()?;
    let attack = Attack {
        target: Target::new(&params, &trace, &profile),
        glitch: &glitch,
    };
    let reports: Vec<DefenseReport> = ctx
        .cfg
        .defense
        .iter()
        .map(|p| evaluate_defense(p, &attack, &inputs, ctx.cfg.protocol.reps, ctx.seed))
        .collect::<Result<_, _>>()
        .exec()?;
    ctx.write_with("defense.csv", |w| Ok(DefenseReport::write_csv(&reports, w)?))
        .exec()?;
    ctx.write_json("defense.json", &reports).exec()?;
    for r in &reports {
        println!(
            "{}: fault rate {:.4} -> {:.4}, flagged {:.4}, overhead {:.3}",
            r.policy, r.baseline_fault_rate, r.defended_fault_rate, r.flagged_rate, r.overhead_factor
        );
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let (common, f): (&Common, fn(&Ctx) -> Result<(), Failure>) = match &cli.command {
        Command::GenData(c) => (c, gen_data),
        Command::Train(c) => (c, train_cmd),
        Command::Run(c) => (c, run_cmd),
        Command::Search(c) => (c, search_cmd),
        Command::Analyze(c) => (c, analyze_cmd),
        Command::Defend(c) => (c, defend_cmd),
    };
    let ctx = Ctx::new(common).usage()?;
    f(&ctx)
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_logging(cli.verbose);
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Exec(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
