//! Command-line front end of the compression pipeline.
//!
//! Every subcommand reads a [`PipelineConfig`] (defaults, then `--config`,
//! then flags) and works inside its output directory, so stages can run as
//! separate invocations. Exit codes: 0 success, 2 configuration error,
//! 3 stage failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lccnn::nncore::{top1_accuracy, Architecture};
use lccnn::par::Parallelism;
use lccnn::pipeline::{
    decompose_model, load_checkpoint, load_datasets, load_decompositions, model_programs, resume_run, run_pipeline,
    run_sweep, save_checkpoint, save_decompositions, share_model, stage_checkpoint, train_baseline, train_pruned,
    Checkpoint, CompressionReport, DeployedModel, LccAlgorithm, PipelineConfig, SqnrPolicy, Stage,
};
use lccnn::Error;

#[derive(Parser)]
#[command(name = "lccnn", version, about = "Shift-add compression of neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Train the unregularized baseline.
    Train,
    /// Train with the group-lasso penalty and remove pruned groups.
    Prune,
    /// Cluster columns and retrain with tied weights.
    Share {
        /// Checkpoint to start from (default: pruned, else baseline).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Decompose every layer into shift-add programs.
    Decompose {
        /// Checkpoint to decompose (default: the latest stage).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Top-1 accuracy of a checkpoint on the test set.
    Evaluate {
        /// Checkpoint to evaluate (default: the latest stage).
        #[arg(long)]
        from: Option<PathBuf>,
        /// Run the adder programs in `lcc/` instead of float products.
        #[arg(long)]
        lcc: bool,
    },
    /// Rebuild the report from the artifacts in the output directory.
    Report,
    /// One independent run per first-layer lambda.
    Sweep,
    /// All enabled stages end to end.
    Pipeline,
}

/// Flags that override the configuration file.
#[derive(Args, Default)]
struct Overrides {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for checkpoints, decompositions and reports.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Seed of initialization, batching and clustering.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// MNIST directory; the LCC_DATA_DIR variable is used when unset.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Use only the first N training images.
    #[arg(long, global = true)]
    train_limit: Option<usize>,
    /// Use only the first N test images.
    #[arg(long, global = true)]
    test_limit: Option<usize>,
    /// Hidden layer widths of the MLP, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Training epochs of the baseline and the pruned model.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Group-lasso weight per layer, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,
    /// First-layer lambdas of a sweep, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    sweep: Option<Vec<f64>>,
    /// Skip weight sharing.
    #[arg(long, global = true)]
    no_share: bool,
    /// Retraining epochs with tied weights.
    #[arg(long, global = true)]
    share_epochs: Option<usize>,
    /// Skip the shift-add decomposition.
    #[arg(long, global = true)]
    no_lcc: bool,
    /// Decomposition algorithm: fp or fs.
    #[arg(long, global = true, value_parser = parse_algorithm)]
    algorithm: Option<LccAlgorithm>,
    /// FP: terms per row.
    #[arg(long, global = true)]
    terms: Option<usize>,
    /// Columns per decomposed slice (default: log2 of the row count).
    #[arg(long, global = true)]
    slice_width: Option<usize>,
    /// `match-baseline`, `db=<dB>` or `factors=<count>`.
    #[arg(long, global = true, value_parser = parse_policy)]
    sqnr_policy: Option<SqnrPolicy>,
    /// Fractional bits of the fixed-point baseline.
    #[arg(long, global = true)]
    frac_bits: Option<u32>,
    /// Integer bits of the fixed-point baseline.
    #[arg(long, global = true)]
    int_bits: Option<u32>,
    /// Run single-threaded.
    #[arg(long, global = true)]
    sequential: bool,
}

fn parse_algorithm(s: &str) -> Result<LccAlgorithm, String> {
    match s {
        "fp" => Ok(LccAlgorithm::Fp),
        "fs" => Ok(LccAlgorithm::Fs),
        _ => Err(format!("expected fp or fs, got {s}")),
    }
}

fn parse_policy(s: &str) -> Result<SqnrPolicy, String> {
    if s == "match-baseline" {
        return Ok(SqnrPolicy::MatchBaseline);
    }
    match s.split_once('=') {
        Some(("db", v)) => v.parse().map(SqnrPolicy::FixedDb).map_err(|e| format!("{e}")),
        Some(("factors", v)) => v.parse().map(SqnrPolicy::FixedFactors).map_err(|e| format!("{e}")),
        _ => Err(format!("expected match-baseline, db=<dB> or factors=<count>, got {s}")),
    }
}

impl Overrides {
    fn apply(&self, cfg: &mut PipelineConfig) -> Result<(), Error> {
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value.clone() {
                    $field = v;
                }
            };
        }
        set!(cfg.output_dir, self.output_dir);
        set!(cfg.seed, self.seed);
        if self.data_dir.is_some() {
            cfg.data.root = self.data_dir.clone();
        }
        if self.train_limit.is_some() {
            cfg.data.train_limit = self.train_limit;
        }
        if self.test_limit.is_some() {
            cfg.data.test_limit = self.test_limit;
        }
        if let Some(h) = &self.hidden {
            match &mut cfg.model {
                Architecture::Mlp { hidden } | Architecture::Conv { hidden, .. } => *hidden = h.clone(),
            }
        }
        set!(cfg.train.epochs, self.epochs);
        set!(cfg.train.batch_size, self.batch_size);
        set!(cfg.train.lr, self.lr);
        set!(cfg.prune.lambdas, self.lambda);
        set!(cfg.sweep.lambdas, self.sweep);
        if self.no_share {
            cfg.share.enabled = false;
        }
        set!(cfg.share.epochs, self.share_epochs);
        if self.no_lcc {
            cfg.lcc.enabled = false;
        }
        set!(cfg.lcc.algorithm, self.algorithm);
        set!(cfg.lcc.terms, self.terms);
        if self.slice_width.is_some() {
            cfg.lcc.slice_width = self.slice_width;
        }
        set!(cfg.lcc.policy, self.sqnr_policy);
        set!(cfg.baseline.frac_bits, self.frac_bits);
        set!(cfg.baseline.int_bits, self.int_bits);
        if self.sequential {
            cfg.parallelism = Parallelism::Sequential;
        }
        cfg.baseline.validate()?;
        cfg.validate()
    }
}

fn load_config(o: &Overrides) -> Result<PipelineConfig, Error> {
    let mut cfg = match &o.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    o.apply(&mut cfg)?;
    Ok(cfg)
}

/// The checkpoint of the latest stage present in `dir`.
fn latest_checkpoint(dir: &Path) -> Result<PathBuf, Error> {
    ["shared.ckpt", "pruned.ckpt", "baseline.ckpt"]
        .iter()
        .map(|f| dir.join(f))
        .find(|p| p.exists())
        .ok_or_else(|| Error::Config(format!("no checkpoint in {}", dir.display())))
}

/// Remove artifacts of later stages that a new checkpoint makes stale.
fn invalidate(dir: &Path, names: &[&str]) -> Result<(), Error> {
    for n in names {
        let p = dir.join(n);
        if p.is_dir() {
            std::fs::remove_dir_all(&p)?;
        } else if p.exists() {
            std::fs::remove_file(&p)?;
        }
    }
    Ok(())
}

fn save(ckpt: &Checkpoint, dir: &Path, name: &str) -> Result<PathBuf, Error> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    save_checkpoint(ckpt, &path)?;
    Ok(path)
}

fn print_report(r: &CompressionReport) {
    for s in &r.stages {
        let ratio = if s.ratio.infinite { "inf".into() } else { format!("{:.2}", s.ratio.value) };
        let top1 = s.top1.map_or("-".into(), |a| format!("{:.2}%", 100.0 * a));
        println!("{:<9} {:>10} additions  ratio {:>7}  top-1 {}", s.stage.name(), s.adds, ratio, top1);
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(&cli.overrides)?;
    let out = &cfg.output_dir;
    match &cli.command {
        Command::Train => {
            let data = load_datasets(&cfg.data).map_err(|e| e.in_stage("data"))?;
            let m = train_baseline(&cfg, &data.train).map_err(|e| e.in_stage("train"))?;
            let path = save(&stage_checkpoint(Stage::Baseline, &cfg, &m, None), out, "baseline.ckpt")?;
            println!("baseline top-1 {:.2}% -> {}", 100.0 * top1_accuracy(&m, &data.test)?, path.display());
        }
        Command::Prune => {
            if !cfg.prune.is_active() {
                return Err(Error::Config("prune needs a positive lambda (--lambda)".into()));
            }
            let data = load_datasets(&cfg.data).map_err(|e| e.in_stage("data"))?;
            let m = train_pruned(&cfg, &data.train).map_err(|e| e.in_stage("prune"))?;
            invalidate(out, &["shared.ckpt", "lcc"])?;
            let path = save(&stage_checkpoint(Stage::Pruned, &cfg, &m, None), out, "pruned.ckpt")?;
            let kept = m.layers[0].gathered_width();
            println!(
                "pruned top-1 {:.2}%, first layer keeps {kept} of {} inputs -> {}",
                100.0 * top1_accuracy(&m, &data.test)?,
                m.input_dim(),
                path.display()
            );
        }
        Command::Share { from } => {
            let src = match from {
                Some(p) => p.clone(),
                None => ["pruned.ckpt", "baseline.ckpt"]
                    .iter()
                    .map(|f| out.join(f))
                    .find(|p| p.exists())
                    .ok_or_else(|| Error::Config(format!("no pruned or baseline checkpoint in {}", out.display())))?,
            };
            let mut m = load_checkpoint(&src)?.model;
            let data = load_datasets(&cfg.data).map_err(|e| e.in_stage("data"))?;
            let cm = share_model(&cfg, &mut m, &data.train).map_err(|e| e.in_stage("share"))?;
            invalidate(out, &["lcc"])?;
            let path = save(&stage_checkpoint(Stage::Shared, &cfg, &m, Some(&cm)), out, "shared.ckpt")?;
            for l in &cm.layers {
                println!("layer {}: {} clusters", l.layer, l.clusters.len());
            }
            println!("shared top-1 {:.2}% -> {}", 100.0 * top1_accuracy(&m, &data.test)?, path.display());
        }
        Command::Decompose { from } => {
            let src = match from {
                Some(p) => p.clone(),
                None => latest_checkpoint(out)?,
            };
            let m = load_checkpoint(&src)?.model;
            let decs = decompose_model(&cfg, &m).map_err(|e| e.in_stage("decompose"))?;
            let dir = out.join("lcc");
            invalidate(out, &["lcc"])?;
            save_decompositions(&dir, &decs)?;
            for (d, p) in decs.iter().zip(model_programs(&m, &decs)?) {
                let adds: u64 = p.iter().flatten().map(|p| p.additions()).sum();
                println!("layer {}: {adds} additions, converged {}", d.layer, d.converged());
            }
            println!("decompositions of {} -> {}", src.display(), dir.display());
        }
        Command::Evaluate { from, lcc } => {
            let src = match from {
                Some(p) => p.clone(),
                None => latest_checkpoint(out)?,
            };
            let m = load_checkpoint(&src)?.model;
            let data = load_datasets(&cfg.data).map_err(|e| e.in_stage("data"))?;
            let acc = if *lcc {
                let decs = load_decompositions(&out.join("lcc"), &m)?;
                let deployed = DeployedModel::new(&m, &model_programs(&m, &decs)?)?;
                deployed.accuracy(&data.test, cfg.parallelism)
            } else {
                top1_accuracy(&m, &data.test)
            }
            .map_err(|e| e.in_stage("evaluate"))?;
            println!("{}{}: top-1 {:.2}%", src.display(), if *lcc { " (adder programs)" } else { "" }, 100.0 * acc);
        }
        Command::Report => {
            let data = load_datasets(&cfg.data).map_err(|e| e.in_stage("data"))?;
            let run = resume_run(&cfg, &data)?;
            print_report(&run.report);
            println!("report -> {}", out.join("report.{json,csv}").display());
        }
        Command::Sweep => {
            for (lam, r) in run_sweep(&cfg)? {
                println!("lambda {lam}:");
                print_report(&r);
            }
            println!("reports -> {}", out.display());
        }
        Command::Pipeline => {
            let run = run_pipeline(&cfg)?;
            print_report(&run.report);
            println!("artifacts -> {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                _ => 3,
            })
        }
    }
}
