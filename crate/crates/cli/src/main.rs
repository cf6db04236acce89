//! `cfp`: train, prune, evaluate and inspect LeNet-5 models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cfp_core::corr::{corr_matrix, flatten_filters, rank_layer};
use cfp_core::cost::cost_report;
use cfp_core::pipeline::run::{BASELINE_FILE, CONFIG_FILE, LOG_FILE};
use cfp_core::pipeline::{
    read_logs, read_summary, save_network, train_baseline, write_report, Checkpoint, DatasetKind, Pipeline, PruneConfig,
};
use cfp_core::train::error_rate;
use cfp_core::{CfpError, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(name = "cfp", version, about = "Correlation-driven filter pruning for LeNet-5")]
struct Cli {
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline network into <run-dir>/baseline.ckpt.
    Train(RunArgs),
    /// Run (or resume) the full pruning pipeline in a run directory.
    Prune {
        #[command(flatten)]
        run: RunArgs,
        /// Start from this checkpoint instead of training or reusing a baseline.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Test error and cost table of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Only matters for synthetic data.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Batch size for the runtime-memory figure.
        #[arg(long, default_value_t = 1)]
        batch: u64,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Re-emit the report files of a finished run from its logs.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Dump per-layer filter correlation matrices as CSV.
    InspectCorr {
        checkpoint: PathBuf,
        /// Network layer index; every conv layer when omitted.
        #[arg(long)]
        layer: Option<usize>,
        /// Directory for `corr-layer<N>.csv` files; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Most-correlated pairs to list per layer.
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML file with configuration keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    overrides: Overrides,
}

/// One flag per configuration key.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long, value_parser = ["mnist", "synthetic"])]
    dataset: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    val_size: Option<usize>,
    #[arg(long)]
    synth_train: Option<usize>,
    #[arg(long)]
    synth_test: Option<usize>,
    /// conv1,conv2,hidden widths.
    #[arg(long, value_delimiter = ',')]
    lenet: Option<Vec<usize>>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    train_epochs: Option<f64>,
    #[arg(long)]
    train_lr: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    pairs_per_episode: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    quotas: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    min_filters: Option<Vec<usize>>,
    #[arg(long)]
    opt_epochs: Option<f64>,
    #[arg(long)]
    opt_max_steps: Option<usize>,
    #[arg(long)]
    opt_lr: Option<f64>,
    #[arg(long)]
    target_rho: Option<f64>,
    #[arg(long)]
    finetune_epochs: Option<f64>,
    #[arg(long)]
    finetune_lr: Option<f64>,
    #[arg(long)]
    final_finetune_epochs: Option<f64>,
    #[arg(long)]
    max_episodes: Option<usize>,
}

macro_rules! apply {
    ($cfg:ident, $o:ident, $($field:ident),*) => {
        $(if let Some(v) = $o.$field { $cfg.$field = v; })*
    };
}

impl Overrides {
    fn apply(self, cfg: &mut PruneConfig) -> Result<()> {
        if let Some(d) = self.dataset {
            cfg.dataset = if d == "synthetic" {
                DatasetKind::Synthetic
            } else {
                DatasetKind::Mnist
            };
        }
        if let Some(l) = self.lenet {
            cfg.lenet = l
                .try_into()
                .map_err(|_| CfpError::Config("--lenet takes three comma-separated widths".into()))?;
        }
        if self.train_limit.is_some() {
            cfg.train_limit = self.train_limit;
        }
        if self.opt_max_steps.is_some() {
            cfg.opt_max_steps = self.opt_max_steps;
        }
        if self.quotas.is_some() {
            cfg.quotas = self.quotas;
        }
        if self.min_filters.is_some() {
            cfg.min_filters = self.min_filters;
        }
        apply!(
            cfg,
            self,
            data_dir,
            val_size,
            synth_train,
            synth_test,
            batch_size,
            momentum,
            train_epochs,
            train_lr,
            epsilon,
            lambda,
            pairs_per_episode,
            opt_epochs,
            opt_lr,
            target_rho,
            finetune_epochs,
            finetune_lr,
            final_finetune_epochs,
            max_episodes
        );
        Ok(())
    }
}

fn build_config(path: Option<&Path>, seed: u64, overrides: Overrides) -> Result<PruneConfig> {
    let mut cfg = match path {
        Some(p) => PruneConfig::load(p)?,
        None => PruneConfig::default(),
    };
    cfg.seed = seed;
    overrides.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(args: RunArgs) -> Result<()> {
    let cfg = build_config(args.config.as_deref(), args.seed, args.overrides)?;
    std::fs::create_dir_all(&args.run_dir).map_err(|e| CfpError::io(&args.run_dir, e))?;
    let data = cfg.load_splits()?;
    let start = std::time::Instant::now();
    let net = train_baseline(&cfg, &data)?;
    info!("trained in {:.1}s", start.elapsed().as_secs_f64());
    let path = args.run_dir.join(BASELINE_FILE);
    save_network(&net, &path)?;
    let cfg_path = args.run_dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| CfpError::io(&cfg_path, e))?;
    println!("baseline: {}", path.display());
    println!("validation error {:.2}%", error_rate(&net, &data.val)?);
    println!("test error {:.2}%", error_rate(&net, &data.test)?);
    Ok(())
}

fn prune_cmd(args: RunArgs, baseline: Option<PathBuf>) -> Result<()> {
    let cfg = build_config(args.config.as_deref(), args.seed, args.overrides)?;
    let baseline = baseline.map(|p| Checkpoint::load(&p)).transpose()?.map(|c| c.network);
    let result = Pipeline::open(cfg, &args.run_dir, baseline)?.run()?;
    let text = std::fs::read_to_string(args.run_dir.join("summary.txt"))
        .map_err(|e| CfpError::io(args.run_dir.join("summary.txt"), e))?;
    print!("{text}");
    info!("final filters {:?}", result.network.filter_counts());
    Ok(())
}

fn eval_cmd(checkpoint: &Path, config: Option<&Path>, seed: u64, batch: u64, overrides: Overrides) -> Result<()> {
    let cfg = build_config(config, seed, overrides)?;
    let net = Checkpoint::load(checkpoint)?.network;
    let data = cfg.load_splits()?;
    println!("filters {:?}", net.filter_counts());
    println!(
        "test error {:.2}% on {} images",
        error_rate(&net, &data.test)?,
        data.test.len()
    );
    print!("{}", cost_report(&net, batch)?.to_text());
    Ok(())
}

fn report_cmd(run_dir: &Path) -> Result<()> {
    let logs = read_logs(&run_dir.join(LOG_FILE))?;
    let summary = read_summary(run_dir)?;
    write_report(run_dir, &logs, &summary)?;
    let text = std::fs::read_to_string(run_dir.join("summary.txt")).map_err(|e| CfpError::io(run_dir, e))?;
    print!("{text}");
    Ok(())
}

fn inspect_cmd(checkpoint: &Path, layer: Option<usize>, out: Option<&Path>, top: usize) -> Result<()> {
    let net = Checkpoint::load(checkpoint)?.network;
    let layers = match layer {
        Some(l) => vec![l],
        None => net.conv_indices(),
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| CfpError::io(dir, e))?;
    }
    for l in layers {
        let m = corr_matrix(&flatten_filters(&net, l)?)?;
        let mut csv = String::new();
        for i in 0..m.n {
            let row: Vec<String> = (0..m.n).map(|j| m.get(i, j).to_string()).collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        match out {
            Some(dir) => {
                let path = dir.join(format!("corr-layer{l}.csv"));
                std::fs::write(&path, csv).map_err(|e| CfpError::io(&path, e))?;
                println!("layer {l}: {} filters -> {}", m.n, path.display());
            }
            None => print!("# layer {l}\n{csv}"),
        }
        let (ranked, _) = rank_layer(&net, l)?;
        for p in ranked.iter().take(top) {
            println!("layer {l} pair ({}, {}) rho {:.6}", p.a, p.b, p.rho);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .init();
    let result = match cli.command {
        Command::Train(args) => train_cmd(args),
        Command::Prune { run, baseline } => prune_cmd(run, baseline),
        Command::Eval {
            checkpoint,
            config,
            seed,
            batch,
            overrides,
        } => eval_cmd(&checkpoint, config.as_deref(), seed, batch, overrides),
        Command::Report { run_dir } => report_cmd(&run_dir),
        Command::InspectCorr {
            checkpoint,
            layer,
            out,
            top,
        } => inspect_cmd(&checkpoint, layer, out.as_deref(), top),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
