use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use das_core::baselines::StrategyKind;
use das_core::data::{generate, read_dataset, write_dataset, Dataset, Split, SynthSpec};
use das_core::gradsuite::run_suite;
use das_core::inspect::inspect;
use das_core::sampler::SampleMode;
use das_core::train::{load_checkpoint, run_compare, run_training, RunConfig, THREADS_ENV};
use das_core::Error;

#[derive(Parser)]
#[command(name = "das", version, about = "Attention-guided frame subsampling: data, training and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file
    Generate(GenerateArgs),
    /// Train one strategy per configured seed and write checkpoints plus metrics.csv
    Train(RunArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Train and evaluate every strategy and write comparison.csv
    Compare(RunArgs),
    /// Dump a checkpoint's sampling matrices as JSON lines
    Inspect(InspectArgs),
    /// Run the finite-difference gradient suite
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// JSON dataset spec; omitted keys take their defaults
    /// (600 items, 5 classes, 12..=16 frames of 1x16x16, 3 signal frames, noise 0.25)
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output dataset file
    #[arg(long)]
    out: PathBuf,
    /// Override the spec's seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config; keys must match the config fields exactly
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

/// Flags that override config values. Defaults shown are the config defaults.
#[derive(Args)]
struct Overrides {
    /// Strategy: full, random, uniform, dps or das [config default: das]
    #[arg(long)]
    strategy: Option<StrategyKind>,
    /// Fraction of T_max frames kept [config default: 0.5]
    #[arg(long)]
    sample_ratio: Option<f64>,
    /// Adam learning rate [config default: 0.0001]
    #[arg(long)]
    lr: Option<f64>,
    /// Mini-batch size [config default: 16]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Epoch budget [config default: 200]
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Epochs without validation-loss improvement before stopping [config default: 10]
    #[arg(long)]
    patience: Option<usize>,
    /// Base temperature [config default: 1.0]
    #[arg(long)]
    tau0: Option<f64>,
    /// Attention heads [config default: 4]
    #[arg(long)]
    heads: Option<usize>,
    /// Comma-separated seeds [config default: 0,1,2]
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Dataset file [config default: data/synth.dasdata]
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory [config default: runs]
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Evaluate without Gumbel noise [config default: false]
    #[arg(long)]
    deterministic_eval: bool,
    /// Record elapsed milliseconds in metrics rows [config default: false]
    #[arg(long)]
    record_wall_time: bool,
}

impl Overrides {
    fn apply(self, cfg: &mut RunConfig) {
        if let Some(v) = self.strategy {
            cfg.strategy = v;
        }
        if let Some(v) = self.sample_ratio {
            cfg.sample_ratio = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.tau0 {
            cfg.tau0 = v;
        }
        if let Some(v) = self.heads {
            cfg.heads = v;
        }
        if let Some(v) = self.seeds {
            cfg.seeds = v;
        }
        if let Some(v) = self.dataset {
            cfg.dataset = v;
        }
        if let Some(v) = self.output_dir {
            cfg.output_dir = v;
        }
        cfg.deterministic_eval |= self.deterministic_eval;
        cfg.record_wall_time |= self.record_wall_time;
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file
    #[arg(long)]
    data: PathBuf,
    /// Evaluate without Gumbel noise [default: false]
    #[arg(long)]
    deterministic: bool,
    /// Split to evaluate
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file
    #[arg(long)]
    data: PathBuf,
    /// Output JSON-lines file
    #[arg(long)]
    out: PathBuf,
    /// Split to dump
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Dump without Gumbel noise [default: false]
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Seed for the random evaluation points
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split {other:?} (expected train, val or test)")),
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn runtime(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }

    /// Config and spec problems are the caller's to fix; anything else is a runtime fault.
    fn config(path: &Path, e: Error) -> Self {
        match e {
            Error::Json(_) | Error::Invalid(_) => Failure::Usage(format!("{}: {e}", path.display())),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load_config(args: RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&args.config).map_err(|e| Failure::config(&args.config, e))?;
    args.overrides.apply(&mut cfg);
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    read_dataset(path).map_err(Failure::runtime)
}

fn cmd_generate(args: GenerateArgs) -> Result<(), Failure> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<SynthSpec>(&text)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let ds = generate(&spec).map_err(Failure::runtime)?;
    write_dataset(&ds, &args.out).map_err(Failure::runtime)?;
    println!(
        "wrote {} items ({} train / {} val / {} test) to {}",
        ds.items.len(),
        ds.split_indices(Split::Train).len(),
        ds.split_indices(Split::Val).len(),
        ds.split_indices(Split::Test).len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: RunArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let ds = load_dataset(&cfg.dataset)?;
    let outcomes = run_training(&cfg, &ds).map_err(Failure::runtime)?;
    println!("seed,best_epoch,epochs_run,test_balanced_accuracy,test_macro_auc,test_signal_hit_rate");
    for o in &outcomes {
        println!(
            "{},{},{},{:.6},{:.6},{:.6}",
            o.seed, o.best_epoch, o.epochs_run, o.test.balanced_accuracy, o.test.macro_auc, o.test.signal_hit_rate
        );
    }
    println!("metrics: {}", cfg.output_dir.join("metrics.csv").display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let ckpt = load_checkpoint(&args.checkpoint).map_err(Failure::runtime)?;
    let ds = load_dataset(&args.data)?;
    let mode = SampleMode::Eval {
        deterministic: args.deterministic,
    };
    let (_, s) = ckpt.evaluate(&ds, args.split, mode).map_err(Failure::runtime)?;
    println!("strategy,seed,split,loss,balanced_accuracy,macro_auc,signal_hit_rate");
    println!(
        "{},{},{},{:.6},{:.6},{:.6},{:.6}",
        ckpt.model.spec.strategy,
        ckpt.seed,
        args.split.as_str(),
        s.loss,
        s.balanced_accuracy,
        s.macro_auc,
        s.signal_hit_rate
    );
    Ok(())
}

fn cmd_compare(args: RunArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let ds = load_dataset(&cfg.dataset)?;
    let cmp = run_compare(&cfg, &ds).map_err(Failure::runtime)?;
    for line in cmp.header_lines() {
        println!("{line}");
    }
    print!("{}", cmp.table());
    println!("comparison: {}", cfg.output_dir.join("comparison.csv").display());
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<(), Failure> {
    let ckpt = load_checkpoint(&args.checkpoint).map_err(Failure::runtime)?;
    let ds = load_dataset(&args.data)?;
    let mode = SampleMode::Eval {
        deterministic: args.deterministic,
    };
    let report = inspect(&ckpt, &ds, args.split, mode, &args.out).map_err(Failure::runtime)?;
    println!(
        "{} items, {} slots each: {} duplicate slots ({:.1}%), {} items with duplicates, signal hit rate {:.4}",
        report.items,
        report.slots_per_item,
        report.duplicate_slots,
        100.0 * report.duplicate_fraction(),
        report.items_with_duplicates,
        report.signal_hit_rate
    );
    println!("dump: {}", args.out.display());
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<(), Failure> {
    let results = run_suite(args.seed).map_err(Failure::runtime)?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut failed = 0;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<width$}  {:.3e}  (< {:.0e})  {verdict}", r.name, r.max_rel_error, r.tolerance);
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} gradient checks failed")));
    }
    println!("all {} checks passed", results.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Ok(v) = std::env::var(THREADS_ENV) {
        log::debug!("{THREADS_ENV}={v}");
    }
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::GradCheck(a) => cmd_grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
