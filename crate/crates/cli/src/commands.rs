use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use hpmixer::cycle::{train_split_acf, DEFAULT_LAG_MIN, DEFAULT_MAX_LAG};
use hpmixer::data::{write_csv, Split, SplitKind};
use hpmixer::model::{load_checkpoint, save_checkpoint, AblationFlag, HpMixer, HORIZONS};
use hpmixer::trainer::{
    decompose, eval_protocol, evaluate, random_search, residual_bands, resolve_config, run_ablation, train,
    write_ablation_csv, write_metrics_csv, write_summary_csv, write_trial_log, MetricRow, TrainRun, PROTOCOL_SEEDS,
};
use hpmixer::{Error, Result};
use log::info;

use crate::run_config::{DataSource, RunConfigFile};

#[derive(Debug, Parser)]
#[command(name = "hpmixer", version, about = "Train, evaluate and inspect hierarchical patching mixer forecasters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// CSV path or registered dataset name (ETTh1, ETTh2, ETTm1, ETTm2, Weather, ECL, Traffic)
    #[arg(long)]
    pub data: String,
    /// Split convention: ett_hourly, ett_minute or other
    #[arg(long)]
    pub split_kind: Option<SplitKind>,
    /// Keep only the first rows of the file
    #[arg(long)]
    pub max_rows: Option<usize>,
}

impl DataArgs {
    fn source(&self) -> Result<DataSource> {
        DataSource::from_arg(&self.data, self.split_kind, self.max_rows)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Autocorrelation of the train split and the selected cycle length
    Acf {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = DEFAULT_MAX_LAG)]
        max_lag: usize,
        #[arg(long, default_value_t = DEFAULT_LAG_MIN)]
        lag_min: usize,
        /// CSV with columns lag, acf and one per channel
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write an untrained checkpoint
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Zero the residual branch output so only the cycle forecast remains
        #[arg(long)]
        zero_residual: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and evaluate it on the test split
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "hpmixer-run")]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint on one split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Must match the checkpoint's horizon
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Train the base config once per ablation flag
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated flags, or `all`; the full model when omitted
        #[arg(long, value_delimiter = ',')]
        flags: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "ablation.csv")]
        out: PathBuf,
    },
    /// Random search over the hyperparameter space
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "hpmixer-search")]
        out_dir: PathBuf,
    },
    /// Split one lookback window into cycle and residual parts
    Decompose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        window_index: usize,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Multi-seed evaluation over horizons with seed-averaged summary
    Protocol {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = HORIZONS)]
        horizons: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = PROTOCOL_SEEDS)]
        seeds: Vec<u64>,
        #[arg(long, default_value = "hpmixer-protocol")]
        out_dir: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Acf {
            data,
            max_lag,
            lag_min,
            out,
        } => cmd_acf(&data, max_lag, lag_min, out.as_deref()),
        Command::Init {
            config,
            seed,
            zero_residual,
            out,
        } => cmd_init(&config, seed, zero_residual, &out),
        Command::Train { config, seed, out_dir } => cmd_train(&config, seed, &out_dir),
        Command::Eval {
            checkpoint,
            data,
            horizon,
            split,
            batch_size,
        } => cmd_eval(&checkpoint, &data, horizon, split, batch_size),
        Command::Ablate {
            config,
            flags,
            seed,
            out,
        } => cmd_ablate(&config, &flags, seed, &out),
        Command::Search {
            config,
            trials,
            seed,
            out_dir,
        } => cmd_search(&config, trials, seed, &out_dir),
        Command::Decompose {
            checkpoint,
            data,
            window_index,
            split,
            out,
        } => cmd_decompose(&checkpoint, &data, window_index, split, &out),
        Command::Protocol {
            config,
            horizons,
            seeds,
            out_dir,
        } => cmd_protocol(&config, &horizons, &seeds, &out_dir),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfigFile> {
    let mut cfg = RunConfigFile::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn cmd_acf(data: &DataArgs, max_lag: usize, lag_min: usize, out: Option<&Path>) -> Result<()> {
    let src = data.source()?;
    let profile = train_split_acf(&src.series, src.kind, max_lag, lag_min)?;
    if let Some(out) = out {
        let mut w = csv::Writer::from_path(out)?;
        let mut header = vec!["lag".to_string(), "acf".to_string()];
        header.extend(src.series.columns.iter().cloned());
        w.write_record(&header)?;
        for (i, lag) in profile.lags.iter().enumerate() {
            let mut row = vec![lag.to_string(), profile.acf[i].to_string()];
            row.extend(profile.per_channel.iter().map(|c| c[i].to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    match profile.peak_lag {
        Some(w) => println!("W={w}"),
        None => println!("W=none"),
    }
    Ok(())
}

fn cmd_init(config: &Path, seed: Option<u64>, zero_residual: bool, out: &Path) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let bundle = cfg.source()?.bundle(cfg.model.lookback, cfg.model.horizon)?;
    let resolved = resolve_config(&cfg.model, &bundle)?;
    let (model, mut store) = HpMixer::init::<f32>(resolved, cfg.train.seed)?;
    if zero_residual {
        model.zero_residual_branch(&mut store);
    }
    save_checkpoint(out, &model, &store)?;
    println!("{}", out.display());
    Ok(())
}

fn write_history(path: &Path, run: &TrainRun) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_mse", "val_mae"])?;
    for e in &run.history {
        w.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.val_mse.to_string(),
            e.val_mae.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_train(config: &Path, seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let src = cfg.source()?;
    let bundle = src.bundle(cfg.model.lookback, cfg.model.horizon)?;
    let run = train(&cfg.model, &cfg.train, &bundle)?;
    fs::create_dir_all(out_dir)?;
    let row = MetricRow {
        dataset: src.name.clone(),
        horizon: cfg.model.horizon,
        seed: cfg.train.seed,
        mse: run.test.mse,
        mae: run.test.mae,
    };
    write_metrics_csv(&out_dir.join("metrics.csv"), &[row])?;
    write_history(&out_dir.join("history.csv"), &run)?;
    save_checkpoint(&out_dir.join("checkpoint.hpmx"), &run.model, &run.store)?;
    let resolved = RunConfigFile {
        model: run.model.config.clone(),
        ..cfg.clone()
    };
    fs::write(out_dir.join("config.json"), resolved.to_pretty_json() + "\n")?;
    info!("best epoch {} of {}", run.best_epoch + 1, run.history.len());
    println!("dataset,horizon,seed,mse,mae");
    println!("{},{},{},{},{}", src.name, cfg.model.horizon, cfg.train.seed, run.test.mse, run.test.mae);
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &DataArgs, horizon: Option<usize>, split: Split, batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::Usage("batch size must be positive".into()));
    }
    let (model, store) = load_checkpoint::<f32>(checkpoint)?;
    let c = &model.config;
    if let Some(h) = horizon.filter(|&h| h != c.horizon) {
        return Err(Error::Usage(format!("checkpoint forecasts H={}, requested H={h}", c.horizon)));
    }
    let src = data.source()?;
    let bundle = src.bundle(c.lookback, c.horizon)?;
    if bundle.channels() != c.channels {
        return Err(Error::Data(format!(
            "checkpoint expects {} channels, {} has {}",
            c.channels,
            src.name,
            bundle.channels()
        )));
    }
    let m = evaluate(&model, &store, &bundle, split, batch_size)?;
    println!("dataset,split,horizon,mse,mae");
    println!("{},{split},{},{},{}", src.name, c.horizon, m.mse, m.mae);
    Ok(())
}

fn parse_flags(flags: &[String]) -> Result<Vec<AblationFlag>> {
    if flags.iter().any(|f| f == "all") {
        return Ok(AblationFlag::ALL.to_vec());
    }
    flags.iter().filter(|f| !f.is_empty()).map(|f| f.parse()).collect()
}

fn cmd_ablate(config: &Path, flags: &[String], seed: Option<u64>, out: &Path) -> Result<()> {
    let flags = parse_flags(flags)?;
    let cfg = load_config(config, seed)?;
    let src = cfg.source()?;
    let bundle = src.bundle(cfg.model.lookback, cfg.model.horizon)?;
    let rows = run_ablation(&bundle, &cfg.model, &cfg.train, &flags)?;
    write_ablation_csv(out, &src.name, &rows)?;
    for r in &rows {
        println!("{}: mse {} mae {}", r.variant, r.test.mse, r.test.mae);
    }
    Ok(())
}

fn cmd_search(config: &Path, trials: usize, seed: u64, out_dir: &Path) -> Result<()> {
    let cfg = load_config(config, None)?;
    let bundle = cfg.source()?.bundle(cfg.model.lookback, cfg.model.horizon)?;
    let result = random_search(&bundle, &cfg.model, &cfg.train, trials, seed)?;
    fs::create_dir_all(out_dir)?;
    write_trial_log(&out_dir.join("trials.csv"), &result)?;
    let best = result.best_trial();
    let mut best_cfg = cfg.clone();
    best_cfg.model = best.config.clone();
    best_cfg.train.lr = best.lr;
    fs::write(out_dir.join("best_config.json"), best_cfg.to_pretty_json() + "\n")?;
    println!(
        "best trial {}: val_mse {}",
        best.index,
        best.val_mse.map_or("diverged".into(), |v| v.to_string())
    );
    Ok(())
}

fn cmd_decompose(checkpoint: &Path, data: &DataArgs, window_index: usize, split: Split, out: &Path) -> Result<()> {
    let (model, store) = load_checkpoint::<f32>(checkpoint)?;
    let src = data.source()?;
    let bundle = src.bundle(model.config.lookback, model.config.horizon)?;
    let d = decompose(&model, &store, &bundle, split, window_index)?;
    fs::create_dir_all(out)?;
    let cols = &bundle.columns;
    write_csv(&out.join("original.csv"), cols, &d.original, d.t_start)?;
    write_csv(&out.join("cycle.csv"), cols, &d.cycle, d.t_start)?;
    write_csv(&out.join("residual.csv"), cols, &d.residual, d.t_start)?;
    for (name, band) in residual_bands(&model, &store, &bundle, split, window_index)? {
        write_csv(&out.join(format!("band_{name}.csv")), cols, &band, d.t_start)?;
    }
    println!("window {window_index} of {split} starts at t={}", d.t_start);
    Ok(())
}

fn cmd_protocol(config: &Path, horizons: &[usize], seeds: &[u64], out_dir: &Path) -> Result<()> {
    let cfg = load_config(config, None)?;
    let src = cfg.source()?;
    let report = eval_protocol(&src.name, &src.series, src.kind, &cfg.model, &cfg.train, horizons, seeds)?;
    fs::create_dir_all(out_dir)?;
    write_metrics_csv(&out_dir.join("metrics.csv"), &report.rows)?;
    write_summary_csv(&out_dir.join("summary.csv"), &report.summary)?;
    for r in &report.summary {
        let f = |v: Option<f64>| v.map_or("absent".to_string(), |x| format!("{x:.4}"));
        println!("{} H={}: mse {} mae {} ({} seeds)", r.dataset, r.horizon, f(r.mse), f(r.mae), r.seeds);
    }
    Ok(())
}
