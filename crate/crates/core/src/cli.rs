//! `cormpo` command line: one subcommand per pipeline stage.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TwinKind};
use crate::dataset::{Dataset, DatasetMeta};
use crate::error::{invalid, Error, Result};
use crate::eval::{
    drop_percent, drop_table, evaluate_runs, report_table, verify_bounds, write_report_csv, DropRow, EvalEnv,
    EvalReport, SynthOracle, TwinEnv,
};
use crate::guardian::{guardian_fit, DensityModel};
use crate::policy::Policy;
use crate::reward::RewardConfig;
use crate::rl::{train_policy, write_log_jsonl, AlgoKind, DynamicsEnsemble, OrlConfig, PolicyModel, TrainExtras};
use crate::rng::derive_seed;
use crate::synth::{inject_noise, ScriptedExpert, SynthEnv};
use crate::twin::{train_forecaster, twin_eval, AnyTwin, MlpForecaster, TwinModel};

#[derive(Debug, Parser)]
#[command(name = "cormpo", version, about = "Density-regularized model-based offline RL for MCS weaning")]
pub struct Cli {
    /// JSON run configuration; flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed of the section the subcommand uses.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with the scripted expert.
    GenData(GenData),
    /// Perturb next-states of a dataset with Gaussian noise.
    InjectNoise(InjectNoise),
    /// Train the transformer twin or the MLP baseline.
    TrainTwin(TrainTwin),
    /// Forecast accuracy and calibration of a twin on a test dataset.
    EvalTwin(EvalTwin),
    /// Fit the kNN-KDE density guardian and its OOD threshold.
    FitGuardian(FitGuardian),
    /// Train a BC, MBPO, MOPO or CORMPO policy.
    TrainPolicy(TrainPolicy),
    /// Evaluate policies in the twin (or the simulator).
    Evaluate(Evaluate),
    /// Check the value bounds on random tabular MDPs.
    VerifyBounds(VerifyBounds),
    /// Tabulate evaluation files.
    Report(Report),
    /// Serve the what-if HTTP API.
    Serve(Serve),
}

#[derive(Debug, clap::Args)]
pub struct GenData {
    /// Number of trajectories.
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long, default_value_t = 6)]
    pub horizon: usize,
    #[arg(long, default_value = "dataset.jsonl")]
    pub name: String,
}

#[derive(Debug, clap::Args)]
pub struct InjectNoise {
    #[arg(long)]
    pub data: PathBuf,
    /// Noise standard deviation in z-units.
    #[arg(long, default_value_t = 0.2)]
    pub sigma: f64,
    /// Share of transitions perturbed.
    #[arg(long, default_value_t = 0.8)]
    pub fraction: f64,
    #[arg(long, default_value = "noisy.jsonl")]
    pub name: String,
}

#[derive(Debug, clap::Args)]
pub struct TrainTwin {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = TwinKind::Transformer)]
    pub kind: TwinKind,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value = "twin.ctwn")]
    pub name: String,
}

#[derive(Debug, clap::Args)]
pub struct EvalTwin {
    #[arg(long)]
    pub twin: PathBuf,
    /// Test dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// MC-dropout samples per transition for CRPS.
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    #[arg(long, default_value = "twin_eval.json")]
    pub name: String,
}

#[derive(Debug, clap::Args)]
pub struct FitGuardian {
    #[arg(long)]
    pub data: PathBuf,
    /// Validation percentile of log-density used as the threshold.
    #[arg(long, default_value_t = 20.0)]
    pub percentile: f64,
    #[arg(long, default_value_t = 1.0)]
    pub bandwidth: f64,
    /// Neighbours per query.
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    #[arg(long, default_value = "guardian.ckde")]
    pub name: String,
}

#[derive(Debug, clap::Args)]
pub struct TrainPolicy {
    #[arg(long, value_parser = parse_algo)]
    pub algo: AlgoKind,
    #[arg(long)]
    pub data: PathBuf,
    /// Density guardian checkpoint; required for CORMPO.
    #[arg(long)]
    pub guardian: Option<PathBuf>,
    /// Reuse a trained dynamics ensemble.
    #[arg(long)]
    pub ensemble: Option<PathBuf>,
    /// Also write the dynamics ensemble.
    #[arg(long)]
    pub save_ensemble: bool,
    /// Single-core preset for networks, epochs and rollouts.
    #[arg(long)]
    pub desk: bool,
    /// CORMPO density-penalty weight.
    #[arg(long, default_value_t = 0.08)]
    pub lambda: f64,
    /// ACP shaping weight (CORMPO).
    #[arg(long, default_value_t = 0.0)]
    pub lambda1: f64,
    /// WS shaping weight (CORMPO).
    #[arg(long, default_value_t = 0.0)]
    pub lambda2: f64,
    #[arg(long, default_value_t = 3e-4)]
    pub actor_lr: f64,
    #[arg(long, default_value_t = 3e-4)]
    pub critic_lr: f64,
    #[arg(long, default_value_t = 3e-4)]
    pub alpha_lr: f64,
    #[arg(long, default_value_t = 0.99)]
    pub gamma: f64,
    /// Target-network update coefficient.
    #[arg(long, default_value_t = 0.005)]
    pub tau: f64,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    pub target_entropy: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub dynamics_lr: f64,
    #[arg(long, default_value_t = 7)]
    pub ensemble_size: usize,
    #[arg(long, default_value_t = 0.2)]
    pub holdout_ratio: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1000)]
    pub steps_per_epoch: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5)]
    pub rollout_horizon: usize,
    #[arg(long, default_value_t = 10000)]
    pub rollout_batch: usize,
    #[arg(long, default_value_t = 1000)]
    pub rollout_freq: usize,
    #[arg(long, default_value_t = 0.05)]
    pub real_ratio: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_mopo: f64,
}

#[derive(Debug, clap::Args)]
pub struct Evaluate {
    /// One policy checkpoint, or one per evaluation seed.
    #[arg(long, num_args = 1.., required = true)]
    pub policy: Vec<PathBuf>,
    /// Twin checkpoint used as the environment.
    #[arg(long, required_unless_present = "oracle")]
    pub twin: Option<PathBuf>,
    /// Evaluate in the synthetic simulator instead of a twin.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, default_value_t = 1000)]
    pub episodes: usize,
    #[arg(long, default_value_t = 6)]
    pub horizon: usize,
    /// Number of evaluation seeds (ignored with one policy per seed).
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    /// Turn off MC-dropout sampling in the twin.
    #[arg(long)]
    pub deterministic: bool,
    /// Row label; defaults to the policy's algorithm.
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Debug, clap::Args)]
pub struct VerifyBounds {
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
}

#[derive(Debug, clap::Args)]
pub struct Report {
    /// Evaluation files of the main setting.
    #[arg(long, num_args = 1.., required = true)]
    pub eval: Vec<PathBuf>,
    /// Evaluation files of the noiseless setting, matched by label, for the drop table.
    #[arg(long, num_args = 1..)]
    pub clean: Vec<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct Serve {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Twin checkpoint (required).
    #[arg(long)]
    pub twin: PathBuf,
    #[arg(long)]
    pub guardian: Option<PathBuf>,
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Minutes before an idle session is dropped.
    #[arg(long, default_value_t = 30)]
    pub idle_minutes: u64,
}

fn parse_algo(s: &str) -> std::result::Result<AlgoKind, String> {
    s.parse::<AlgoKind>().map_err(|e| e.to_string())
}

/// Evaluation output file: a labelled report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFile {
    pub label: String,
    pub report: EvalReport,
}

/// Exit status for an error: 1 for invalid input, 2 for runtime failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidInput(_) | Error::Json(_) => 1,
        _ => 2,
    }
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("CORMPO_LOG", "info"))
        .format_timestamp(None)
        .try_init();
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match execute(&cli, &matches) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn explicit(m: &ArgMatches, id: &str) -> bool {
    matches!(m.value_source(id), Some(ValueSource::CommandLine))
}

fn output(dir: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    Ok(dir.join(name))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn execute(cli: &Cli, matches: &ArgMatches) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(invalid("--threads must be positive"));
        }
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("thread pool already initialized");
        }
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let (_, sub) = matches.subcommand().ok_or_else(|| invalid("missing subcommand"))?;
    match &cli.command {
        Command::GenData(a) => {
            if explicit(sub, "n") || cli.config.is_none() {
                cfg.generator.n_trajectories = a.n;
            }
            if explicit(sub, "horizon") {
                cfg.generator.horizon = a.horizon;
            }
            if let Some(s) = cli.seed {
                cfg.generator.seed = s;
            }
            cfg.validate()?;
            let ds = SynthEnv::new(cfg.generator.clone()).generate_dataset(&ScriptedExpert)?;
            let path = output(&cli.out, &a.name)?;
            ds.write_with_meta(&path, &DatasetMeta::describe(&ds, cfg.generator.clone(), None)?)?;
            log::info!("wrote {} transitions to {}", ds.len(), path.display());
        }
        Command::InjectNoise(a) => {
            if explicit(sub, "sigma") || cli.config.is_none() {
                cfg.noise.sigma = a.sigma;
            }
            if explicit(sub, "fraction") || cli.config.is_none() {
                cfg.noise.fraction = a.fraction;
            }
            if let Some(s) = cli.seed {
                cfg.noise.seed = s;
            }
            cfg.validate()?;
            let ds = Dataset::read_jsonl(&a.data)?;
            let generator = Dataset::read_meta(&a.data).map(|m| m.generator).unwrap_or_else(|_| cfg.generator.clone());
            let noisy = inject_noise(&ds, &cfg.noise)?;
            let path = output(&cli.out, &a.name)?;
            noisy.write_with_meta(&path, &DatasetMeta::describe(&noisy, generator, Some(cfg.noise))?)?;
            log::info!("wrote {} transitions to {}", noisy.len(), path.display());
        }
        Command::TrainTwin(a) => {
            let t = &mut cfg.twin;
            if explicit(sub, "kind") || cli.config.is_none() {
                t.kind = a.kind;
            }
            for (id, v, field) in [
                ("epochs", a.epochs, &mut t.train.max_epochs),
                ("batch_size", a.batch_size, &mut t.train.batch_size),
                ("patience", a.patience, &mut t.train.patience),
            ] {
                if explicit(sub, id) || cli.config.is_none() {
                    *field = v;
                }
            }
            if explicit(sub, "lr") || cli.config.is_none() {
                t.train.lr = a.lr;
            }
            if let Some(s) = cli.seed {
                t.train.seed = s;
            }
            cfg.validate()?;
            let ds = Dataset::read_jsonl(&a.data)?;
            let init_seed = derive_seed(cfg.twin.train.seed, 1);
            let mut twin = match cfg.twin.kind {
                TwinKind::Transformer => AnyTwin::Transformer(TwinModel::new(cfg.twin.transformer, init_seed)?),
                TwinKind::Mlp => AnyTwin::Mlp(MlpForecaster::new(cfg.twin.mlp.clone(), init_seed)?),
            };
            let log = train_forecaster(&mut twin, &ds, &cfg.twin.train)?;
            let path = output(&cli.out, &a.name)?;
            twin.save(&path)?;
            write_json(&output(&cli.out, &format!("{}.log.json", a.name))?, &log)?;
            log::info!("{} twin: best holdout MSE {:.5}, saved to {}", twin.kind(), log.best_holdout_mse(), path.display());
        }
        Command::EvalTwin(a) => {
            let twin = AnyTwin::load(&a.twin)?;
            let ds = Dataset::read_jsonl(&a.data)?;
            let report = twin_eval(&twin, &ds, a.samples, cli.seed.unwrap_or(0))?;
            write_json(&output(&cli.out, &a.name)?, &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::FitGuardian(a) => {
            let g = &mut cfg.guardian;
            if explicit(sub, "percentile") || cli.config.is_none() {
                g.percentile = a.percentile;
            }
            if explicit(sub, "bandwidth") || cli.config.is_none() {
                g.bandwidth = a.bandwidth;
            }
            if explicit(sub, "k") || cli.config.is_none() {
                g.k = a.k;
            }
            if let Some(s) = cli.seed {
                g.split_seed = s;
            }
            cfg.validate()?;
            let ds = Dataset::read_jsonl(&a.data)?;
            let (model, summary) = guardian_fit(&ds, &cfg.guardian)?;
            let path = output(&cli.out, &a.name)?;
            model.save(&path)?;
            write_json(&output(&cli.out, &format!("{}.fit.json", a.name))?, &summary)?;
            println!("tau = {}", summary.tau);
            println!("validation OOD fraction = {}", summary.validation_ood_fraction);
        }
        Command::TrainPolicy(a) => train_policy_cmd(cli, sub, a, cfg)?,
        Command::Evaluate(a) => evaluate_cmd(cli, sub, a, cfg)?,
        Command::VerifyBounds(a) => {
            if a.instances == 0 {
                return Err(invalid("--instances must be positive"));
            }
            let report = verify_bounds(a.instances, cli.seed.unwrap_or(0))?;
            write_json(&output(&cli.out, "bounds.json")?, &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if report.violations > 0 {
                log::warn!("{} bound violations", report.violations);
            }
        }
        Command::Report(a) => {
            let read = |p: &PathBuf| -> Result<EvalFile> { Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?) };
            let main: Vec<EvalFile> = a.eval.iter().map(read).collect::<Result<_>>()?;
            let rows: Vec<(String, EvalReport)> = main.iter().map(|f| (f.label.clone(), f.report.clone())).collect();
            print!("{}", report_table(&rows));
            write_report_csv(&rows, &output(&cli.out, "report.csv")?)?;
            if !a.clean.is_empty() {
                let clean: Vec<EvalFile> = a.clean.iter().map(read).collect::<Result<_>>()?;
                let mut drops = Vec::new();
                for c in &clean {
                    let n = main
                        .iter()
                        .find(|f| f.label == c.label)
                        .ok_or_else(|| invalid(format!("no noisy evaluation labelled {}", c.label)))?;
                    drops.push(DropRow {
                        algo: c.label.clone(),
                        clean: c.report.reward.mean,
                        noisy: n.report.reward.mean,
                        drop_percent: drop_percent(c.report.reward.mean, n.report.reward.mean)?,
                    });
                }
                drops.sort_by(|x, y| x.algo.cmp(&y.algo));
                print!("{}", drop_table(&drops));
                write_json(&output(&cli.out, "drops.json")?, &drops)?;
            }
        }
        Command::Serve(a) => {
            let opts = crate::service::ServeOptions {
                host: a.host.clone(),
                port: a.port,
                twin: a.twin.clone(),
                guardian: a.guardian.clone(),
                policy: a.policy.clone(),
                idle: std::time::Duration::from_secs(a.idle_minutes * 60),
                generator: cfg.generator.clone(),
            };
            crate::service::serve_blocking(opts)?;
        }
    }
    Ok(())
}

fn train_policy_cmd(cli: &Cli, sub: &ArgMatches, a: &TrainPolicy, mut cfg: RunConfig) -> Result<()> {
    if a.desk {
        cfg.orl = OrlConfig { seed: cfg.orl.seed, ..OrlConfig::desk() };
    }
    let no_file = cli.config.is_none() && !a.desk;
    let o = &mut cfg.orl;
    let floats: [(&str, f64, &mut f64); 10] = [
        ("actor_lr", a.actor_lr, &mut o.actor_lr),
        ("critic_lr", a.critic_lr, &mut o.critic_lr),
        ("alpha_lr", a.alpha_lr, &mut o.alpha_lr),
        ("gamma", a.gamma, &mut o.gamma),
        ("tau", a.tau, &mut o.tau),
        ("target_entropy", a.target_entropy, &mut o.target_entropy),
        ("dynamics_lr", a.dynamics_lr, &mut o.dynamics_lr),
        ("holdout_ratio", a.holdout_ratio, &mut o.holdout_ratio),
        ("real_ratio", a.real_ratio, &mut o.real_ratio),
        ("lambda_mopo", a.lambda_mopo, &mut o.lambda_mopo),
    ];
    for (id, v, field) in floats {
        if explicit(sub, id) || no_file {
            *field = v;
        }
    }
    let ints: [(&str, usize, &mut usize); 7] = [
        ("ensemble_size", a.ensemble_size, &mut o.ensemble_size),
        ("epochs", a.epochs, &mut o.epochs),
        ("steps_per_epoch", a.steps_per_epoch, &mut o.steps_per_epoch),
        ("batch_size", a.batch_size, &mut o.batch_size),
        ("rollout_horizon", a.rollout_horizon, &mut o.rollout_horizon),
        ("rollout_batch", a.rollout_batch, &mut o.rollout_batch),
        ("rollout_freq", a.rollout_freq, &mut o.rollout_freq),
    ];
    for (id, v, field) in ints {
        if explicit(sub, id) || no_file {
            *field = v;
        }
    }
    o.n_elites = o.n_elites.min(o.ensemble_size);
    let r = &mut cfg.reward;
    for (id, v, field) in
        [("lambda", a.lambda, &mut r.lambda), ("lambda1", a.lambda1, &mut r.lambda1), ("lambda2", a.lambda2, &mut r.lambda2)]
    {
        if explicit(sub, id) || cli.config.is_none() {
            *field = v;
        }
    }
    if let Some(s) = cli.seed {
        cfg.orl.seed = s;
    }
    cfg.validate()?;
    let ds = Dataset::read_jsonl(&a.data)?;
    let guardian = a.guardian.as_deref().map(DensityModel::load).transpose()?;
    if a.algo == AlgoKind::Cormpo && guardian.is_none() {
        return Err(invalid("--algo cormpo needs --guardian"));
    }
    let ensemble = a.ensemble.as_deref().map(DynamicsEnsemble::load).transpose()?;
    let reward_cfg = match a.algo {
        AlgoKind::Cormpo => RewardConfig { lambda1: cfg.reward.lambda1, lambda2: cfg.reward.lambda2, ..Default::default() },
        _ => RewardConfig::default(),
    };
    let extras = TrainExtras { guardian: guardian.as_ref(), lambda: cfg.reward.lambda, ensemble: ensemble.as_ref() };
    let out = train_policy(a.algo, &ds, &cfg.orl, &reward_cfg, extras)?;
    let name = a.algo.name();
    let path = output(&cli.out, &format!("policy_{name}.cpol"))?;
    out.policy.save(&path)?;
    write_log_jsonl(&out.log, &output(&cli.out, &format!("train_{name}.jsonl"))?)?;
    if a.save_ensemble {
        if let Some(e) = &out.ensemble {
            e.save(&output(&cli.out, "ensemble.cens")?)?;
        }
    }
    log::info!("saved {name} policy to {}", path.display());
    Ok(())
}

fn evaluate_cmd(cli: &Cli, sub: &ArgMatches, a: &Evaluate, mut cfg: RunConfig) -> Result<()> {
    let e = &mut cfg.eval;
    if explicit(sub, "episodes") || cli.config.is_none() {
        e.n_episodes = a.episodes;
    }
    if explicit(sub, "horizon") || cli.config.is_none() {
        e.horizon = a.horizon;
    }
    if explicit(sub, "seeds") || cli.config.is_none() {
        e.seeds = (0..a.seeds as u64).collect();
    }
    if let Some(s) = cli.seed {
        e.seeds = (0..e.seeds.len() as u64).map(|i| s + i).collect();
    }
    if a.deterministic {
        e.stochastic = false;
    }
    cfg.validate()?;
    let policies: Vec<PolicyModel> = a.policy.iter().map(|p| PolicyModel::load(p)).collect::<Result<_>>()?;
    let seeds: Vec<u64> = if policies.len() > 1 {
        (0..policies.len() as u64).map(|i| cfg.eval.seeds.first().copied().unwrap_or(0) + i).collect()
    } else {
        cfg.eval.seeds.clone()
    };
    let runs: Vec<(u64, &dyn Policy)> = seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, &policies[i.min(policies.len() - 1)] as &dyn Policy))
        .collect();
    let twin = a.twin.as_deref().map(AnyTwin::load).transpose()?;
    let init = SynthEnv::new(cfg.generator.clone());
    let env: Box<dyn EvalEnv + '_> = match (&twin, a.oracle) {
        (_, true) => Box::new(SynthOracle(init)),
        (Some(t), false) => Box::new(TwinEnv { model: t, init, stochastic: cfg.eval.stochastic }),
        (None, false) => return Err(invalid("--twin is required unless --oracle is given")),
    };
    let report = evaluate_runs(&runs, env.as_ref(), cfg.eval.n_episodes, cfg.eval.horizon)?;
    let label = a.label.clone().unwrap_or_else(|| policies[0].algo.name().to_string());
    let path = output(&cli.out, &format!("eval_{label}.json"))?;
    write_json(&path, &EvalFile { label: label.clone(), report: report.clone() })?;
    print!("{}", report_table(&[(label, report)]));
    Ok(())
}
