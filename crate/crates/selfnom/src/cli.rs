//! Experiment driver: dataset generation, training, evaluation sweeps and PF
//! simulation, each a pure function of (config file, seed, input files).
//!
//! Every command writes fixed-name outputs under `--out` plus a
//! `config_echo.json` recording the parsed config and effective seed, so a
//! sweep directory is self-describing. Reruns with identical inputs produce
//! byte-identical outputs regardless of `--workers`; for that reason the
//! `wall_time_ms` metrics column is recorded as 0.

use crate::channel::{
    build_dataset, read_dataset, write_dataset, ArrayGeometry, ChannelModelConfig, Dataset,
    DatasetSidecar,
};
use crate::micronet::{read_checkpoint, write_checkpoint, CheckpointMeta, Mode, Network};
use crate::mimo::{self, ChannelVector};
use crate::pfsim::{log_utility, run_pf, ChannelSource, PfPolicy, PfRunConfig};
use crate::policy::InputMode;
use crate::scheduling::{opportunistic_schedule, pf_schedule, random_schedule};
use crate::training::{
    decide_set, train_from, TrainConfig, TrainMethod, TrainScheduler, TrainerState,
};
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum CliError {
    /// exit code 2
    Config(String),
    /// exit code 3
    MissingInput(String),
    /// exit code 4
    Numerical(String),
    /// exit code 1
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::MissingInput(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m)
            | CliError::MissingInput(m)
            | CliError::Numerical(m)
            | CliError::Other(m) => m,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "selfnom", about = "Self-nomination CSI feedback experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// JSON config file for this command
    #[arg(long)]
    pub config: PathBuf,
    /// master seed; overrides any seed inside the config
    #[arg(long)]
    pub seed: u64,
    /// output directory (created if absent)
    #[arg(long)]
    pub out: PathBuf,
    /// worker threads (0 = library default); never changes results
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a channel dataset (dataset.snch + dataset.json)
    GenData(CommonArgs),
    /// Train a self-nomination network (checkpoint.snck + metrics.csv)
    Train(CommonArgs),
    /// Evaluate policies over the test split (sweep.csv)
    Eval(CommonArgs),
    /// Time-slotted PF simulation (pf_report.csv + pf_summary.csv)
    PfSim(CommonArgs),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub pool_size: usize,
    pub num_sets: usize,
    pub users_per_set: usize,
    pub geometry: ArrayGeometry,
    pub model: ChannelModelConfig,
    /// optional explicit split; default 6:1 train:test
    #[serde(default)]
    pub num_train: Option<usize>,
    #[serde(default)]
    pub num_test: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCmdConfig {
    /// path to dataset.snch (sidecar JSON expected next to it)
    pub dataset: String,
    /// optional checkpoint to continue from
    #[serde(default)]
    pub resume: Option<String>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EvalMethod {
    SelfNomination,
    AllFb,
    RandomFb { prob: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPoint {
    pub sweep_var: f64,
    pub method: EvalMethod,
    #[serde(default)]
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub dataset: String,
    pub m_max: usize,
    pub total_power: f64,
    pub sigma2: f64,
    pub scheduler: TrainScheduler,
    pub points: Vec<EvalPoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PfSimConfig {
    pub epsilons: Vec<f64>,
    pub ts: Vec<usize>,
    pub policies: Vec<PfPolicy>,
    pub layouts: usize,
    pub m_max: usize,
    pub total_ues: usize,
    pub total_power: f64,
    pub sigma2: f64,
    pub geometry: ArrayGeometry,
    pub model: ChannelModelConfig,
    #[serde(default)]
    pub checkpoint: Option<String>,
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::MissingInput(format!("config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
}

fn write_echo<T: Serialize>(args: &CommonArgs, command: &str, config: &T) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Echo<'a, T> {
        command: &'a str,
        seed: u64,
        config: &'a T,
    }
    let echo = Echo {
        command,
        seed: args.seed,
        config,
    };
    let text = serde_json::to_string_pretty(&echo)
        .map_err(|e| CliError::Other(format!("echo serialization: {e}")))?;
    std::fs::write(args.out.join("config_echo.json"), text)
        .map_err(|e| CliError::Other(format!("writing config_echo.json: {e}")))
}

fn ensure_out(args: &CommonArgs) -> Result<(), CliError> {
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Other(format!("creating {}: {e}", args.out.display())))
}

fn load_dataset(path: &str) -> Result<Dataset, CliError> {
    let p = Path::new(path);
    let sidecar_path = p.with_extension("json");
    let split = match std::fs::read_to_string(&sidecar_path) {
        Ok(text) => {
            let sc: DatasetSidecar = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("sidecar {}: {e}", sidecar_path.display())))?;
            Some((sc.num_train, sc.num_test))
        }
        Err(_) => None,
    };
    read_dataset(p, split).map_err(|e| CliError::MissingInput(format!("dataset {path}: {e}")))
}

fn load_checkpoint(path: &str) -> Result<(Network, CheckpointMeta), CliError> {
    read_checkpoint(Path::new(path))
        .map_err(|e| CliError::MissingInput(format!("checkpoint {path}: {e}")))
}

pub fn cmd_gen_data(args: &CommonArgs) -> Result<(), CliError> {
    let config: GenDataConfig = read_config(&args.config)?;
    ensure_out(args)?;
    write_echo(args, "gen-data", &config)?;
    let split = match (config.num_train, config.num_test) {
        (Some(tr), Some(te)) => Some((tr, te)),
        (None, None) => None,
        _ => {
            return Err(CliError::Config(
                "num_train and num_test must be given together".into(),
            ))
        }
    };
    let ds = build_dataset(
        config.pool_size,
        config.num_sets,
        config.users_per_set,
        &config.geometry,
        &config.model,
        args.seed,
        split,
    )
    .map_err(|e| CliError::Config(format!("{e}")))?;
    let out_path = args.out.join("dataset.snch");
    write_dataset(&out_path, &ds).map_err(|e| CliError::Other(format!("{e}")))?;
    let sidecar = DatasetSidecar {
        geometry: config.geometry.clone(),
        config: config.model.clone(),
        seed: args.seed,
        num_train: ds.num_train,
        num_test: ds.num_test,
    };
    let text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| CliError::Other(format!("sidecar serialization: {e}")))?;
    std::fs::write(args.out.join("dataset.json"), text)
        .map_err(|e| CliError::Other(format!("writing sidecar: {e}")))?;
    Ok(())
}

fn metrics_csv(state: &TrainerState) -> String {
    let mut s = String::from("epoch,batch,rate_term,mean_feedback_count,lambda,wall_time_ms\n");
    for row in &state.metrics {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            row.epoch, row.batch, row.rate_term, row.mean_feedback_count, row.lambda,
            row.wall_time_ms
        );
    }
    s
}

pub fn cmd_train(args: &CommonArgs) -> Result<(), CliError> {
    let mut config: TrainCmdConfig = read_config(&args.config)?;
    config.train.seed = args.seed;
    ensure_out(args)?;
    write_echo(args, "train", &config)?;
    let dataset = load_dataset(&config.dataset)?;
    let resume = match &config.resume {
        Some(path) => {
            let (net, meta) = load_checkpoint(path)?;
            Some((net, meta.lambda))
        }
        None => None,
    };
    let state = train_from(&config.train, &dataset, resume)
        .map_err(|e| CliError::Config(format!("{e}")))?;
    if state.total_samples > 0
        && state.rank_deficient_samples as f64 > 0.01 * state.total_samples as f64
    {
        return Err(CliError::Numerical(format!(
            "rank-deficient schedules in {} of {} samples",
            state.rank_deficient_samples, state.total_samples
        )));
    }
    let meta = CheckpointMeta {
        input_mode: match config.train.input_mode {
            InputMode::FullCsi => 0,
            InputMode::Cqi => 1,
        },
        pf_aware: config.train.pf_training,
        method: match config.train.method {
            TrainMethod::DirectOpt => 0,
            TrainMethod::PolicyGradient => 1,
        },
        feature_scale: state.feature_scale,
        n_antennas: dataset.n as u32,
        gamma: config.train.gamma,
        lambda: state.lambda,
    };
    write_checkpoint(&args.out.join("checkpoint.snck"), &state.net, &meta)
        .map_err(|e| CliError::Other(format!("{e}")))?;
    std::fs::write(args.out.join("metrics.csv"), metrics_csv(&state))
        .map_err(|e| CliError::Other(format!("writing metrics.csv: {e}")))?;
    Ok(())
}

fn method_label(method: &EvalMethod) -> String {
    match method {
        EvalMethod::SelfNomination => "self_nomination".into(),
        EvalMethod::AllFb => "all_fb".into(),
        EvalMethod::RandomFb { prob } => format!("random_fb({prob})"),
    }
}

/// Per-point test-split means used by the sweep CSV.
pub struct EvalSummary {
    pub sum_rate_mean: f64,
    pub feedback_count_mean: f64,
    pub condition_number_mean: f64,
}

pub fn evaluate_point(
    config: &EvalConfig,
    point: &EvalPoint,
    dataset: &Dataset,
    seed: u64,
    point_idx: usize,
) -> Result<EvalSummary, CliError> {
    let checkpoint = match (&point.method, &point.checkpoint) {
        (EvalMethod::SelfNomination, Some(path)) => Some(load_checkpoint(path)?),
        (EvalMethod::SelfNomination, None) => {
            return Err(CliError::MissingInput(format!(
                "eval point {point_idx}: self_nomination needs a checkpoint"
            )))
        }
        _ => None,
    };
    let mut net_meta = checkpoint.map(|(mut n, m)| {
        n.set_mode(Mode::Eval);
        (n, m)
    });
    let mut sum_rate = 0.0;
    let mut fb_count = 0usize;
    let mut cond_sum = 0.0;
    let mut cond_n = 0usize;
    let test_sets: Vec<Vec<u32>> = dataset.test_sets().to_vec();
    for (si, set) in test_sets.iter().enumerate() {
        let channels = dataset.set_channels(set);
        let mut rng = crate::channel::stream_rng(
            seed,
            crate::channel::domain::EVAL,
            ((point_idx as u64) << 32) | si as u64,
        );
        let actions: Vec<bool> = match &point.method {
            EvalMethod::AllFb => vec![true; channels.len()],
            EvalMethod::RandomFb { prob } => {
                (0..channels.len()).map(|_| rng.gen::<f64>() < *prob).collect()
            }
            EvalMethod::SelfNomination => {
                let (net, meta) = net_meta.as_mut().unwrap();
                let input_mode = if meta.input_mode == 0 {
                    InputMode::FullCsi
                } else {
                    InputMode::Cqi
                };
                let weights: Vec<f64> = vec![1.0; channels.len()];
                let decisions = decide_set(
                    net,
                    input_mode,
                    meta.feature_scale,
                    meta.gamma,
                    &channels,
                    meta.pf_aware.then_some(weights.as_slice()),
                    if meta.method == 1 { Some(&mut rng) } else { None },
                )
                .map_err(|e| CliError::Other(format!("{e}")))?;
                decisions.iter().map(|d| d.feed_back).collect()
            }
        };
        fb_count += actions.iter().filter(|&&a| a).count();
        let fed: Vec<&ChannelVector> = channels
            .iter()
            .zip(&actions)
            .filter(|(_, &a)| a)
            .map(|(c, _)| *c)
            .collect();
        let schedule = match config.scheduler {
            TrainScheduler::Random => {
                let ids: Vec<usize> = fed.iter().map(|c| c.ue_id).collect();
                random_schedule(&ids, config.m_max, &mut rng)
            }
            TrainScheduler::Opportunistic => opportunistic_schedule(&fed, config.m_max),
            TrainScheduler::Pf => {
                // sum-rate sweeps carry no running averages; unit weights
                // reduce the PF scheduler to greedy sum-rate selection
                let unit = vec![1.0; fed.len()];
                pf_schedule(&fed, config.m_max, &unit, config.total_power, config.sigma2)
            }
        };
        if !schedule.selected.is_empty() {
            let rows: Vec<Vec<num_complex::Complex64>> = schedule
                .selected
                .iter()
                .map(|&id| {
                    channels
                        .iter()
                        .find(|c| c.ue_id == id)
                        .expect("scheduled id not in set")
                        .entries
                        .clone()
                })
                .collect();
            match mimo::zf_precoder(&rows, config.total_power) {
                Ok(f) => {
                    sum_rate += mimo::compute_rates(&rows, &f, config.sigma2, &vec![1.0; rows.len()])
                        .weighted_sum_rate;
                }
                Err(_) => {}
            }
            let cond = mimo::condition_number(&rows);
            if cond.is_finite() {
                cond_sum += cond;
                cond_n += 1;
            }
        }
    }
    let sets = test_sets.len().max(1) as f64;
    Ok(EvalSummary {
        sum_rate_mean: sum_rate / sets,
        feedback_count_mean: fb_count as f64 / sets,
        condition_number_mean: if cond_n > 0 { cond_sum / cond_n as f64 } else { f64::NAN },
    })
}

pub fn cmd_eval(args: &CommonArgs) -> Result<(), CliError> {
    let config: EvalConfig = read_config(&args.config)?;
    ensure_out(args)?;
    write_echo(args, "eval", &config)?;
    let dataset = load_dataset(&config.dataset)?;
    let mut csv =
        String::from("sweep_var,method,sum_rate_mean,feedback_count_mean,condition_number_mean\n");
    for (pi, point) in config.points.iter().enumerate() {
        let summary = evaluate_point(&config, point, &dataset, args.seed, pi)?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            point.sweep_var,
            method_label(&point.method),
            summary.sum_rate_mean,
            summary.feedback_count_mean,
            summary.condition_number_mean
        );
    }
    std::fs::write(args.out.join("sweep.csv"), csv)
        .map_err(|e| CliError::Other(format!("writing sweep.csv: {e}")))?;
    Ok(())
}

pub fn cmd_pf_sim(args: &CommonArgs) -> Result<(), CliError> {
    let config: PfSimConfig = read_config(&args.config)?;
    ensure_out(args)?;
    write_echo(args, "pf-sim", &config)?;
    let checkpoint = match &config.checkpoint {
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };
    let source = ChannelSource::clustered(
        config.geometry.clone(),
        config.model.clone(),
        config.layouts,
        config.total_ues,
        args.seed,
    );
    let mut report_csv = String::from("layout_id,ue_id,mean_rate\n");
    let mut summary_csv =
        String::from("policy,epsilon,T,log_utility,mean_feedback_count\n");
    for policy in &config.policies {
        for &epsilon in &config.epsilons {
            for &t in &config.ts {
                let run_config = PfRunConfig {
                    t,
                    epsilon,
                    layouts: config.layouts,
                    policy: *policy,
                    m_max: config.m_max,
                    total_ues: config.total_ues,
                    total_power: config.total_power,
                    sigma2: config.sigma2,
                    seed: args.seed,
                };
                let report = run_pf(
                    &run_config,
                    &source,
                    checkpoint.as_ref().map(|(n, m)| (n, m)),
                )
                .map_err(|e| match e {
                    crate::pfsim::PfError::CheckpointMismatch(m) => CliError::Config(m),
                    other => CliError::Other(format!("{other}")),
                })?;
                for layout in &report.layouts {
                    for (ue, &rate) in layout.mean_rates.iter().enumerate() {
                        let _ = writeln!(report_csv, "{},{},{}", layout.layout_id, ue, rate);
                    }
                }
                let utility = log_utility(&report);
                let mean_fb = report
                    .layouts
                    .iter()
                    .map(|l| l.mean_feedback_count)
                    .sum::<f64>()
                    / report.layouts.len() as f64;
                let _ = writeln!(
                    summary_csv,
                    "{},{},{},{},{}",
                    report.policy, epsilon, t, utility.value, mean_fb
                );
            }
        }
    }
    std::fs::write(args.out.join("pf_report.csv"), report_csv)
        .map_err(|e| CliError::Other(format!("writing pf_report.csv: {e}")))?;
    std::fs::write(args.out.join("pf_summary.csv"), summary_csv)
        .map_err(|e| CliError::Other(format!("writing pf_summary.csv: {e}")))?;
    Ok(())
}

fn configure_workers(workers: usize) {
    if workers > 0 {
        // ignore failure: the global pool can only be built once per process
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let args = match &cli.command {
        Command::GenData(a) | Command::Train(a) | Command::Eval(a) | Command::PfSim(a) => a,
    };
    configure_workers(args.workers);
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::PfSim(a) => cmd_pf_sim(a),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
