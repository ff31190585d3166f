//! The `minconv` command-line front end.
//!
//! Four commands: `analyze` (operator similarity tables and sweeps),
//! `train`, `eval`, and `mulcount` (instrumented multiplication audit).
//! Every command is deterministic under a fixed `--seed`.

use crate::approx::ConvMode;
use crate::checkpoint;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::nn::{build_network_spec, Network};
use crate::simlab::{self, DistributionSpec, OperatorKind};
use crate::train::{self, LrSchedule, OptimizerKind, TrainConfig, Trainer};
use clap::{Args, Parser, Subcommand};
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "MINCONV_DATA_DIR";

#[derive(Parser, Debug)]
#[command(name = "minconv", version, about = "Multiplication-free convolutional networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Operator similarity analysis (correlation table and L sweeps)
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// Train a network and write checkpoints plus a metrics CSV
    Train(TrainArgs),
    /// Report top-1 accuracy of a checkpoint
    Eval(EvalArgs),
    /// Count multiplications and smin operations per conv layer
    Mulcount(MulcountArgs),
}

#[derive(Subcommand, Debug)]
pub enum AnalyzeCommand {
    /// Correlation of min-selector/addition/max-selector with |x*w| over the
    /// six reference operand distributions
    Corr {
        #[arg(long, default_value_t = simlab::DEFAULT_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Relative error L(k) with both operands ~ N(k, v)
    SweepK {
        /// Operand variance
        #[arg(long, default_value_t = 1.0)]
        v: f64,
        #[arg(long, default_value_t = 0.0)]
        k_min: f64,
        #[arg(long, default_value_t = 2.0)]
        k_max: f64,
        #[arg(long, default_value_t = 0.05)]
        k_step: f64,
        #[arg(long, default_value_t = simlab::DEFAULT_SAMPLES)]
        samples: usize,
        /// Break-point neighborhood removed around |x*w| = 0
        #[arg(long, default_value_t = simlab::SWEEP_EPSILON)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Relative error L(v) with x ~ N(0,1) fixed and w ~ N(k, v)
    SweepV {
        /// Mean of the w distribution
        #[arg(long, default_value_t = 0.0)]
        k: f64,
        #[arg(long, default_value_t = 0.05)]
        v_min: f64,
        #[arg(long, default_value_t = 3.0)]
        v_max: f64,
        #[arg(long, default_value_t = 0.05)]
        v_step: f64,
        #[arg(long, default_value_t = simlab::DEFAULT_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = simlab::SWEEP_EPSILON)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
}

#[derive(Args, Debug, Default, Clone)]
pub struct TrainArgs {
    /// Config file with `key=value` lines; explicit flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// lenet or mini-cifar
    #[arg(long)]
    pub net: Option<String>,
    /// mnist or cifar10
    #[arg(long)]
    pub dataset: Option<String>,
    /// Per-conv modes: comma list of exact|approx, or all-exact / all-approx
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// sgd or adam
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Running-mean momentum
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Warm-start checkpoint: parameters are copied and running statistics
    /// recalibrated on the training data
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Train on the first N examples of a seeded shuffle
    #[arg(long)]
    pub subset: Option<usize>,
    /// Stop once the test split reaches this top-1 accuracy
    #[arg(long)]
    pub target_top1: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub dataset: String,
    /// train or test
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Override the checkpoint's conv modes (transfer semantics)
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct MulcountArgs {
    #[arg(long)]
    pub net: String,
    /// mnist (1x28x28) or cifar10 (3x32x32) input geometry
    #[arg(long, default_value = "mnist")]
    pub dataset: String,
    #[arg(long, default_value = "all-exact")]
    pub mode: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses argv-style arguments and runs the selected command.
pub fn run_from<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Usage(e.to_string()))?;
    execute(cli)
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze { what } => match what {
            AnalyzeCommand::Corr { samples, seed, out_dir } => cmd_corr(samples, seed, &out_dir),
            AnalyzeCommand::SweepK { v, k_min, k_max, k_step, samples, epsilon, seed, out_dir } => {
                cmd_sweep_k(v, k_min, k_max, k_step, samples, epsilon, seed, &out_dir)
            }
            AnalyzeCommand::SweepV { k, v_min, v_max, v_step, samples, epsilon, seed, out_dir } => {
                cmd_sweep_v(k, v_min, v_max, v_step, samples, epsilon, seed, &out_dir)
            }
        },
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Mulcount(args) => cmd_mulcount(args),
    }
}

/// The six operand-distribution rows of the correlation table, as
/// `(label_x, label_w, dx, dw)`. The normal rows with scale 10 have
/// variance 100: the table labels carry the scale parameter whose square is
/// the variance.
pub fn corr_table_rows() -> Vec<(String, String, DistributionSpec, DistributionSpec)> {
    let n1 = DistributionSpec::Normal { mean: 0.0, variance: 1.0 };
    let n10 = DistributionSpec::Normal { mean: 0.0, variance: 100.0 };
    let u1 = DistributionSpec::Uniform { a: 0.0, b: 1.0 };
    let u10 = DistributionSpec::Uniform { a: 0.0, b: 10.0 };
    vec![
        ("N(0;1)".into(), "N(0;1)".into(), n1, n1),
        ("N(0;1)".into(), "N(0;10)".into(), n1, n10),
        ("N(0;10)".into(), "N(0;1)".into(), n10, n1),
        ("U(0;1)".into(), "U(0;1)".into(), u1, u1),
        ("U(0;10)".into(), "U(0;1)".into(), u10, u1),
        ("U(0;1)".into(), "U(0;10)".into(), u1, u10),
    ]
}

/// Computes the full 6x3 correlation grid; rows in table order.
pub fn corr_table(samples: usize, seed: u64) -> Result<Vec<CorrRow>> {
    let mut rows = Vec::with_capacity(18);
    for (label_x, label_w, dx, dw) in corr_table_rows() {
        for op in OperatorKind::CANDIDATES {
            let rho = simlab::correlation(op, dx, dw, samples, seed)?;
            rows.push(CorrRow {
                x_dist: label_x.clone(),
                w_dist: label_w.clone(),
                operator: op.name().to_string(),
                rho,
            });
        }
    }
    Ok(rows)
}

/// One row of the correlation CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrRow {
    pub x_dist: String,
    pub w_dist: String,
    pub operator: String,
    pub rho: f64,
}

pub fn corr_csv(rows: &[CorrRow]) -> String {
    let mut out = String::from("x_dist,w_dist,operator,rho\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:.12e}\n", r.x_dist, r.w_dist, r.operator, r.rho));
    }
    out
}

pub fn read_corr_csv(text: &str) -> Result<Vec<CorrRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("x_dist,w_dist,operator,rho") => {}
        other => return Err(Error::Format(format!("bad correlation CSV header {other:?}"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Format(format!("line {}: expected 4 fields", i + 2)));
        }
        let rho = fields[3]
            .parse::<f64>()
            .map_err(|_| Error::Format(format!("line {}: bad rho", i + 2)))?;
        rows.push(CorrRow {
            x_dist: fields[0].into(),
            w_dist: fields[1].into(),
            operator: fields[2].into(),
            rho,
        });
    }
    Ok(rows)
}

fn cmd_corr(samples: usize, seed: u64, out_dir: &Path) -> Result<()> {
    let rows = corr_table(samples, seed)?;
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join("correlation.csv");
    fs::write(&path, corr_csv(&rows))?;
    println!("x_dist        w_dist        {:>13} {:>13} {:>13}", "min_selector", "addition", "max_selector");
    for chunk in rows.chunks(3) {
        println!(
            "{:<13} {:<13} {:>13.4} {:>13.4} {:>13.4}",
            chunk[0].x_dist, chunk[0].w_dist, chunk[0].rho, chunk[1].rho, chunk[2].rho
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep_k(
    v: f64,
    k_min: f64,
    k_max: f64,
    k_step: f64,
    samples: usize,
    epsilon: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<()> {
    let grid = simlab::grid(k_min, k_max, k_step);
    let sweep = simlab::sweep_l_over_k(v, &grid, samples, epsilon, seed)?;
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join(format!("sweep_k_v{v}.csv"));
    fs::write(&path, sweep.to_csv())?;
    println!("L(k) with x,w ~ N(k, {v}): argmin k = {} (L = {:.6})", sweep.argmin_param, sweep.argmin_objective);
    println!("wrote {}", path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep_v(
    k: f64,
    v_min: f64,
    v_max: f64,
    v_step: f64,
    samples: usize,
    epsilon: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<()> {
    if v_min <= 0.0 {
        return Err(Error::Usage(format!("variance grid must start above 0, got {v_min}")));
    }
    let grid = simlab::grid(v_min, v_max, v_step);
    let sweep = simlab::sweep_l_over_v(k, &grid, samples, epsilon, seed)?;
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join(format!("sweep_v_k{k}.csv"));
    fs::write(&path, sweep.to_csv())?;
    println!(
        "L(v) with x ~ N(0,1), w ~ N({k}, v): argmin v = {} (L = {:.6}, E|w| = {:.4})",
        sweep.argmin_param,
        sweep.argmin_objective,
        sweep.mean_abs_w_at_argmin.unwrap_or(f64::NAN)
    );
    println!("wrote {}", path.display());
    Ok(())
}

/// Resolves the data directory: flag, `MINCONV_DATA_DIR`, then `./data`.
pub fn resolve_data_dir(flag: Option<&Path>) -> PathBuf {
    if let Some(d) = flag {
        return d.to_path_buf();
    }
    if let Ok(d) = std::env::var(DATA_DIR_ENV) {
        return PathBuf::from(d);
    }
    PathBuf::from("data")
}

/// Loads the named dataset (train, test) from the layout
/// `<data_dir>/mnist/*` or `<data_dir>/cifar-10-batches-bin/*`.
pub fn load_dataset(name: &str, data_dir: &Path) -> Result<(Dataset<f32>, Dataset<f32>)> {
    match name {
        "mnist" => data::load_mnist(&data_dir.join("mnist")),
        "cifar10" | "cifar-10" => data::load_cifar10(&data_dir.join("cifar-10-batches-bin")),
        other => Err(Error::Usage(format!("unknown dataset '{other}' (mnist, cifar10)"))),
    }
}

pub fn dataset_input_shape(name: &str) -> Result<(usize, usize, usize)> {
    match name {
        "mnist" => Ok((1, 28, 28)),
        "cifar10" | "cifar-10" => Ok((3, 32, 32)),
        other => Err(Error::Usage(format!("unknown dataset '{other}' (mnist, cifar10)"))),
    }
}

/// Parses a per-conv mode list: `exact,approx,...` or the shorthands
/// `all-exact` / `all-approx`.
pub fn parse_modes(s: &str, n_convs: usize) -> Result<Vec<ConvMode>> {
    match s {
        "all-exact" => Ok(vec![ConvMode::Exact; n_convs]),
        "all-approx" => Ok(vec![ConvMode::MinApprox; n_convs]),
        list => {
            let modes: Result<Vec<ConvMode>> = list
                .split(',')
                .map(|tok| match tok.trim() {
                    "exact" => Ok(ConvMode::Exact),
                    "approx" | "min-approx" => Ok(ConvMode::MinApprox),
                    other => Err(Error::Usage(format!(
                        "unknown mode '{other}' (exact, approx, all-exact, all-approx)"
                    ))),
                })
                .collect();
            let modes = modes?;
            if modes.len() != n_convs {
                return Err(Error::Usage(format!(
                    "mode list has {} entries but the network has {n_convs} conv layers",
                    modes.len()
                )));
            }
            Ok(modes)
        }
    }
}

/// Reads a `key=value` config file ('#' starts a comment).
pub fn read_config_file(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn merge_config(args: &mut TrainArgs, cfg: &HashMap<String, String>) -> Result<()> {
    fn fill<T: std::str::FromStr>(slot: &mut Option<T>, key: &str, value: &str) -> Result<()> {
        if slot.is_none() {
            let parsed = value
                .parse::<T>()
                .map_err(|_| Error::Usage(format!("config: bad value for {key}: {value}")))?;
            *slot = Some(parsed);
        }
        Ok(())
    }
    for (key, value) in cfg {
        match key.as_str() {
            "net" => fill(&mut args.net, key, value)?,
            "dataset" => fill(&mut args.dataset, key, value)?,
            "mode" => fill(&mut args.mode, key, value)?,
            "optimizer" => fill(&mut args.optimizer, key, value)?,
            "epochs" => fill(&mut args.epochs, key, value)?,
            "batch-size" => fill(&mut args.batch_size, key, value)?,
            "lr" => fill(&mut args.lr, key, value)?,
            "momentum" => fill(&mut args.momentum, key, value)?,
            "gamma" => fill(&mut args.gamma, key, value)?,
            "seed" => fill(&mut args.seed, key, value)?,
            "subset" => fill(&mut args.subset, key, value)?,
            "target-top1" => fill(&mut args.target_top1, key, value)?,
            "init" => fill(&mut args.init, key, value)?,
            "data-dir" => fill(&mut args.data_dir, key, value)?,
            "out-dir" => fill(&mut args.out_dir, key, value)?,
            other => return Err(Error::Usage(format!("config: unknown key '{other}'"))),
        }
    }
    Ok(())
}

/// Fully resolved training invocation.
pub struct TrainPlan {
    pub net_name: String,
    pub dataset: String,
    pub modes: Vec<ConvMode>,
    pub cfg: TrainConfig,
    pub init: Option<PathBuf>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub subset: Option<usize>,
    pub target_top1: Option<f64>,
}

/// Applies config-file defaults and fills in the documented defaults.
pub fn resolve_train_args(mut args: TrainArgs) -> Result<TrainPlan> {
    if let Some(cfg_path) = &args.config {
        let cfg = read_config_file(cfg_path)?;
        merge_config(&mut args, &cfg)?;
    }
    let net_name = args.net.ok_or_else(|| Error::Usage("--net is required".into()))?;
    let dataset = args.dataset.ok_or_else(|| Error::Usage("--dataset is required".into()))?;
    let input = dataset_input_shape(&dataset)?;
    let probe = build_network_spec(&net_name, input, &probe_modes(&net_name)?)?;
    let modes = parse_modes(args.mode.as_deref().unwrap_or("all-exact"), probe.conv_count())?;

    let lr = args.lr.unwrap_or(0.01);
    let momentum = args.momentum.unwrap_or(0.9);
    let optimizer = match args.optimizer.as_deref().unwrap_or("sgd") {
        "sgd" => OptimizerKind::Sgd { lr, momentum },
        "adam" => OptimizerKind::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
        other => return Err(Error::Usage(format!("unknown optimizer '{other}' (sgd, adam)"))),
    };
    let cfg = TrainConfig {
        batch_size: args.batch_size.unwrap_or(64),
        epochs: args.epochs.unwrap_or(5),
        optimizer,
        schedule: LrSchedule::StepDecay { factor: 0.1 },
        gamma: args.gamma.unwrap_or(0.99),
        seed: args.seed.unwrap_or(0),
    };
    Ok(TrainPlan {
        net_name,
        dataset,
        modes,
        cfg,
        init: args.init,
        data_dir: resolve_data_dir(args.data_dir.as_deref()),
        out_dir: args.out_dir.unwrap_or_else(|| PathBuf::from("out")),
        subset: args.subset,
        target_top1: args.target_top1,
    })
}

fn probe_modes(net_name: &str) -> Result<Vec<ConvMode>> {
    match net_name {
        "lenet" => Ok(vec![ConvMode::Exact; 2]),
        "mini-cifar" | "mini_cifar" => Ok(vec![ConvMode::Exact; 6]),
        other => Err(Error::Usage(format!("unknown network '{other}' (lenet, mini-cifar)"))),
    }
}

/// Runs a resolved training plan; returns the final test accuracy.
pub fn run_train_plan(plan: &TrainPlan) -> Result<f64> {
    let (train_full, test) = load_dataset(&plan.dataset, &plan.data_dir)?;
    let train_ds = match plan.subset {
        Some(n) => train_full.subset(n, plan.cfg.seed),
        None => train_full,
    };
    let input = dataset_input_shape(&plan.dataset)?;
    let spec = build_network_spec(&plan.net_name, input, &plan.modes)?;
    let mut net = Network::<f32>::build(spec, plan.cfg.seed, plan.cfg.gamma as f32)?;

    if let Some(init) = &plan.init {
        let ckpt = checkpoint::load(init)?;
        ckpt.install_into(&mut net, true)?;
        train::calibrate(&mut net, &train_ds, plan.cfg.batch_size)?;
        println!(
            "warm start from {} (epoch {}), statistics recalibrated on {} examples",
            init.display(),
            ckpt.epoch,
            train_ds.len()
        );
    }

    fs::create_dir_all(&plan.out_dir)?;
    let mut metrics = String::from(train::METRICS_HEADER);
    metrics.push('\n');
    let mut trainer = Trainer::new(net, plan.cfg.clone());
    let mut final_test = 0.0;
    for epoch in 0..plan.cfg.epochs {
        let m = trainer.train_epoch(&train_ds)?;
        let test_acc = train::evaluate(&mut trainer.net, &test, 256)?;
        final_test = test_acc;
        metrics.push_str(&train::metrics_row(epoch + 1, "train", Some(m.avg_loss), m.train_accuracy));
        metrics.push('\n');
        metrics.push_str(&train::metrics_row(epoch + 1, "test", None, test_acc));
        metrics.push('\n');
        println!(
            "epoch {:>3}: loss {:.4}  train top1 {:.4}  test top1 {:.4}  lr {:.2e}",
            epoch + 1,
            m.avg_loss,
            m.train_accuracy,
            test_acc,
            trainer.cfg.optimizer.base_lr()
                * trainer.cfg.schedule.multiplier(epoch, plan.cfg.epochs)
        );
        checkpoint::save(
            &plan.out_dir.join(format!("epoch_{:03}.ckpt", epoch + 1)),
            &trainer.net,
            epoch + 1,
            Some(&trainer.optimizer),
        )?;
        if let Some(target) = plan.target_top1 {
            if test_acc >= target {
                println!("target top1 {target} reached, stopping early");
                break;
            }
        }
    }
    checkpoint::save(&plan.out_dir.join("final.ckpt"), &trainer.net, trainer.epoch, Some(&trainer.optimizer))?;
    fs::write(plan.out_dir.join("metrics.csv"), &metrics)?;
    fs::write(plan.out_dir.join("network.cfg"), trainer.net.spec.describe())?;
    Ok(final_test)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let plan = resolve_train_args(args)?;
    let final_test = run_train_plan(&plan)?;
    println!("final test top1 {final_test:.4}; artifacts in {}", plan.out_dir.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let top1 = run_eval(&args)?;
    println!("top1 {} = {top1:.4}", args.split);
    Ok(())
}

/// Evaluates a checkpoint; returns top-1 accuracy on the requested split.
pub fn run_eval(args: &EvalArgs) -> Result<f64> {
    let ckpt = checkpoint::load(&args.ckpt)?;
    let data_dir = resolve_data_dir(args.data_dir.as_deref());
    let (train_ds, test_ds) = load_dataset(&args.dataset, &data_dir)?;
    let input = dataset_input_shape(&args.dataset)?;

    let modes = match &args.mode {
        Some(s) => parse_modes(s, ckpt.modes.len())?,
        None => ckpt.modes.clone(),
    };
    let spec = build_network_spec(&ckpt.name, input, &modes)?;
    let mut net = Network::<f32>::build(spec, 0, 0.99)?;
    ckpt.install_into(&mut net, false)?;

    let ds = match args.split.as_str() {
        "train" => &train_ds,
        "test" => &test_ds,
        other => return Err(Error::Usage(format!("unknown split '{other}' (train, test)"))),
    };
    train::evaluate(&mut net, ds, args.batch_size)
}

fn cmd_mulcount(args: MulcountArgs) -> Result<()> {
    let report = run_mulcount(&args)?;
    println!("{:<8} {:>6} {:>16} {:>14} {:>16}", "layer", "mode", "inner_muls", "smin_ops", "residual_muls");
    let mut totals = (0u64, 0u64, 0u64);
    for r in &report {
        println!(
            "conv@{:<3} {:>6} {:>16} {:>14} {:>16}",
            r.layer_index,
            r.mode.name(),
            r.counter.inner_muls,
            r.counter.smin_ops,
            r.counter.scalar_muls
        );
        totals.0 += r.counter.inner_muls;
        totals.1 += r.counter.smin_ops;
        totals.2 += r.counter.scalar_muls;
    }
    println!("{:<8} {:>6} {:>16} {:>14} {:>16}", "total", "", totals.0, totals.1, totals.2);
    Ok(())
}

/// Runs the instrumented audit on one random image; per-conv-layer counts.
pub fn run_mulcount(args: &MulcountArgs) -> Result<Vec<crate::nn::LayerOpReport>> {
    use rand::{Rng, SeedableRng};
    let input = dataset_input_shape(&args.dataset)?;
    let probe = probe_modes(&args.net)?;
    let modes = parse_modes(&args.mode, probe.len())?;
    let spec = build_network_spec(&args.net, input, &modes)?;
    let net = Network::<f32>::build(spec, args.seed, 0.99)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
    let n = input.0 * input.1 * input.2;
    let image = crate::tensor::Tensor::new(
        vec![input.0, input.1, input.2],
        (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    )?;
    net.count_conv_ops(&image)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_grammar() {
        assert_eq!(parse_modes("all-exact", 2).unwrap(), vec![ConvMode::Exact; 2]);
        assert_eq!(parse_modes("all-approx", 6).unwrap(), vec![ConvMode::MinApprox; 6]);
        assert_eq!(
            parse_modes("exact,approx", 2).unwrap(),
            vec![ConvMode::Exact, ConvMode::MinApprox]
        );
        assert!(parse_modes("exact", 2).is_err());
        assert!(parse_modes("bogus", 1).is_err());
    }

    #[test]
    fn corr_csv_round_trip() {
        let rows = vec![
            CorrRow { x_dist: "N(0;1)".into(), w_dist: "N(0;1)".into(), operator: "min_selector".into(), rho: 0.9082 },
            CorrRow { x_dist: "U(0;1)".into(), w_dist: "U(0;10)".into(), operator: "addition".into(), rho: 0.7169 },
        ];
        let parsed = read_corr_csv(&corr_csv(&rows)).unwrap();
        assert_eq!(parsed.len(), rows.len());
        for (a, b) in parsed.iter().zip(&rows) {
            assert_eq!(a.x_dist, b.x_dist);
            assert_eq!(a.operator, b.operator);
            assert!((a.rho - b.rho).abs() < 1e-12);
        }
    }

    #[test]
    fn config_file_fills_unset_flags_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "net=lenet\ndataset=mnist\nepochs=7\nlr=0.5 # comment\n").unwrap();
        let args = TrainArgs {
            config: Some(path),
            lr: Some(0.125), // flag wins over config
            ..TrainArgs::default()
        };
        let plan = resolve_train_args(args).unwrap();
        assert_eq!(plan.net_name, "lenet");
        assert_eq!(plan.cfg.epochs, 7);
        assert_eq!(plan.cfg.optimizer, OptimizerKind::Sgd { lr: 0.125, momentum: 0.9 });
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cfg");
        std::fs::write(&path, "nonsense=1\n").unwrap();
        let args = TrainArgs { config: Some(path.clone()), ..TrainArgs::default() };
        assert!(matches!(resolve_train_args(args), Err(Error::Usage(_))));
        std::fs::write(&path, "no equals sign\n").unwrap();
        assert!(read_config_file(&path).is_err());
    }

    #[test]
    fn usage_errors_for_bad_arguments() {
        assert!(matches!(run_from(["minconv", "analyze", "corr", "--samples", "x"]), Err(Error::Usage(_))));
        assert!(matches!(
            run_from(["minconv", "train", "--net", "bogus", "--dataset", "mnist"]),
            Err(Error::Usage(_))
        ));
        assert!(dataset_input_shape("imagenet").is_err());
    }

    #[test]
    fn mulcount_runs_without_data() {
        let report = run_mulcount(&MulcountArgs {
            net: "lenet".into(),
            dataset: "mnist".into(),
            mode: "all-approx".into(),
            seed: 1,
        })
        .unwrap();
        assert_eq!(report.len(), 2);
        assert!(report.iter().all(|r| r.counter.inner_muls == 0));
        assert!(report.iter().all(|r| r.counter.scalar_muls == r.out_elements));
    }
}
