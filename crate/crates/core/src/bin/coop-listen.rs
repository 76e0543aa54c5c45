use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use coop_listen::error::{Result, StageExt};
use coop_listen::pipeline::{run_experiment, CellArtifacts, ExperimentConfig, Run, Tables};
use coop_listen::separation::Method;

/// Cooperative source separation and binaural remixing for distributed microphone arrays.
#[derive(Parser)]
#[command(name = "coop-listen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage and write all artifacts and tables.
    Run(ConfigArgs),
    /// Render the scene into `<out>/render`.
    Render(ConfigArgs),
    /// Separate the rendered mixture for every (method, array) cell.
    Separate(OutArgs),
    /// Estimate listener statistics from the separated signals.
    Estimate(OutArgs),
    /// Design the binaural filters from stored statistics.
    Design(OutArgs),
    /// Score stored filters and write the tables and manifest.
    Evaluate(OutArgs),
}

#[derive(Args)]
struct OutArgs {
    /// Output directory of a rendered run.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene description (JSON); the built-in desk scene by default.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated: baseline, iva, ideal.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Comma-separated array configuration names.
    #[arg(long, value_delimiter = ',')]
    arrays: Option<Vec<String>>,
    #[arg(long)]
    delay_ms: Option<f64>,
    #[arg(long)]
    filter_ms: Option<f64>,
    /// Length of the clip used for separation and statistics.
    #[arg(long)]
    estimation_s: Option<f64>,
    /// Length of the held-out clip used for scoring.
    #[arg(long)]
    eval_s: Option<f64>,
    #[arg(long)]
    iva_iterations: Option<usize>,
    /// Comma-separated per-source gains for a listening remix.
    #[arg(long, value_delimiter = ',')]
    remix_gains: Option<Vec<f64>>,
}

impl ConfigArgs {
    fn resolve(self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident <- $arg:expr),* $(,)?) => {
                $(if let Some(v) = $arg { cfg.$field = v; })*
            };
        }
        set!(
            methods <- self.methods,
            array_configs <- self.arrays,
            delay_ms <- self.delay_ms,
            filter_ms <- self.filter_ms,
            estimation_clip_s <- self.estimation_s,
            eval_clip_s <- self.eval_s,
            output_dir <- self.out,
        );
        if self.scene.is_some() {
            cfg.scene = self.scene;
        }
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if let Some(g) = self.remix_gains {
            cfg.remix_gains = Some(g);
        }
        if let Some(it) = self.iva_iterations {
            cfg.iva.max_iterations = it;
        }
        Ok(cfg)
    }
}

fn print_summary(tables: &Tables) {
    println!("{:<10} {:<10} {:>6} {:>14} {:>14}", "method", "array", "n", "sep dSNR", "enh dSNR");
    for e in &tables.enhancement_summary {
        let sep = tables
            .separation_summary
            .iter()
            .find(|s| s.method == e.method && s.array_config == e.array_config)
            .map_or(f64::NAN, |s| s.improvement.median);
        println!(
            "{:<10} {:<10} {:>6} {:>11.2} dB {:>11.2} dB",
            e.method, e.array_config, e.improvement.count, sep, e.improvement.median
        );
    }
}

fn timed<T>(label: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t0 = Instant::now();
    let out = f()?;
    eprintln!("{label}: {:.1} s", t0.elapsed().as_secs_f64());
    Ok(out)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let report = timed("run", || run_experiment(&cfg))?;
            print_summary(&report.tables);
        }
        Command::Render(args) => {
            let cfg = args.resolve()?;
            timed("render", || Run::render(&cfg).stage("render"))?;
        }
        Command::Separate(o) => {
            let run = Run::open(&o.out)?;
            timed("separate", || run.for_each_cell(|m, a| run.separate_cell(m, a).map(drop)).stage("separate"))?;
        }
        Command::Estimate(o) => {
            let run = Run::open(&o.out)?;
            timed("estimate", || {
                run.for_each_cell(|m, a| run.estimate_cell(m, a, &run.load_estimates(m, a)?).map(drop))
                    .stage("estimate")
            })?;
        }
        Command::Design(o) => {
            let run = Run::open(&o.out)?;
            timed("design", || {
                run.for_each_cell(|m, a| run.design_cell(m, a, &run.load_stats(m, a)?).map(drop))
                    .stage("design")
            })?;
        }
        Command::Evaluate(o) => {
            let run = Run::open(&o.out)?;
            let report = timed("evaluate", || {
                let cells: Vec<CellArtifacts> = run.for_each_cell(|m, a| run.load_cell(m, a))?;
                run.finish(cells, BTreeMap::new()).stage("evaluate")
            })?;
            print_summary(&report.tables);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
