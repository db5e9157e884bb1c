//! The `kfc` command line: collect data, fit a Koopman model, precompute
//! symmetry sidecars, measure shift fidelity and train an offline agent.

pub mod config;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use kfc_core::envs::{
    collect, fidelity_eval, AnyEnv, CartpoleEnv, Env, ExpertPolicyConfig, SyntheticBilinearEnv,
    CARTPOLE_NAME, SYNTHETIC_NAME,
};
use kfc_core::koopman::{self, fit_linear, CodecKind};
use kfc_core::offline_rl::{
    evaluate_policy, train_agent, CategoricalPolicy, PolicyCheckpoint, DEFAULT_MAX_STEPS,
};
use kfc_core::symmetry::reference::reference_check;
use kfc_core::symmetry::{precompute_sidecar, Sidecar};
use kfc_core::{AugmentMode, Dataset, Error, KoopmanForwardModel};
use serde::Serialize;

use config::{set, FileConfig};

/// Added to the training seed to seed evaluation rollouts, so that they do
/// not share streams with training.
pub const EVAL_SEED_OFFSET: u64 = 1_000_003;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 2 usage or missing input, 3 invalid data, 4 internal failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 3,
            CliError::Core(e) => match e {
                Error::Io(io) if io.kind() == io::ErrorKind::NotFound => 2,
                Error::Config(_) => 2,
                Error::Io(_) | Error::TupleIo { .. } | Error::NonFiniteLoss { .. } => 4,
                _ => 3,
            },
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

#[derive(Debug, Parser)]
#[command(name = "kfc", version, about = "Koopman symmetry augmentation for offline RL")]
pub struct Cli {
    /// TOML file with [collect], [koopman], [augment], [cql] and [eval] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out the expert (cartpole) or random actions (synthetic) into a dataset file.
    Collect(CollectArgs),
    /// Fit a bilinear Koopman model to a dataset.
    TrainKoopman(TrainKoopmanArgs),
    /// Precompute per-tuple symmetry generators into a sidecar file.
    Symmetries(SymmetriesArgs),
    /// Measure shift size and dynamics error of an augmentation mode.
    EvalSym(EvalSymArgs),
    /// Train a discrete CQL agent on (augmented) offline data.
    TrainAgent(TrainAgentArgs),
    /// Check the published cartpole matrices against their closed forms.
    CartpolePaperCheck(PaperCheckArgs),
}

#[derive(Debug, Args)]
pub struct CollectArgs {
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub state_dim: Option<usize>,
    #[arg(long)]
    pub action_dim: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CodecArg {
    Identity,
    Mlp,
}

#[derive(Debug, Args)]
pub struct TrainKoopmanArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub codec: Option<CodecArg>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Train report path; defaults to `<out>.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SidecarModeArg {
    Kfc,
    Kfcpp,
}

#[derive(Debug, Args)]
pub struct SymmetriesArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub mode: SidecarModeArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep complete records of an existing file written with the same settings.
    #[arg(long)]
    pub resume: bool,
}

fn parse_mode(s: &str) -> Result<AugmentMode, String> {
    s.parse::<AugmentMode>().map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct EvalSymArgs {
    /// Required by every mode except none and gaussian.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Defaults to the environment recorded in the dataset.
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<AugmentMode>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Summary path; defaults to `<out>.summary.json`.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainAgentArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub aug: Option<AugmentMode>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Training log path; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PaperCheckArgs {
    #[arg(long, default_value_t = 1e-9)]
    pub tolerance: f64,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(io::Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Missing inputs are usage errors that name the path.
fn existing(path: &Path) -> Result<&Path, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!("{} does not exist", path.display())))
    }
}

fn load_model(path: &Path) -> Result<KoopmanForwardModel, CliError> {
    Ok(KoopmanForwardModel::load(existing(path)?)?)
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    Ok(Dataset::load(existing(path)?)?)
}

fn write_matrix(out: &mut dyn Write, m: &kfc_core::DMatrix<f64>) -> io::Result<()> {
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|x| format!("{x:>10.5}")).collect();
        writeln!(out, "  {}", cells.join(" "))?;
    }
    Ok(())
}

/// Run one parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Collect(a) => cmd_collect(a, file, out),
        Command::TrainKoopman(a) => cmd_train_koopman(a, file, out),
        Command::Symmetries(a) => cmd_symmetries(a, file, out),
        Command::EvalSym(a) => cmd_eval_sym(a, file, out),
        Command::TrainAgent(a) => cmd_train_agent(a, file, out),
        Command::CartpolePaperCheck(a) => cmd_paper_check(a, out),
    }
}

fn cmd_collect(a: CollectArgs, file: FileConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = file.collect;
    set(&mut cfg.env, a.env);
    set(&mut cfg.episodes, a.episodes);
    set(&mut cfg.steps, a.steps);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.state_dim, a.state_dim);
    set(&mut cfg.action_dim, a.action_dim);
    let echo = serde_json::to_value(&cfg).map_err(io::Error::from)?;

    let (mut ds, survival) = match cfg.env.as_str() {
        CARTPOLE_NAME => {
            let (ds, stats) = collect(
                &CartpoleEnv::default(),
                &ExpertPolicyConfig::default(),
                cfg.episodes,
                cfg.steps,
                cfg.seed,
            );
            (ds, Some(stats))
        }
        SYNTHETIC_NAME => {
            let env = SyntheticBilinearEnv::random(cfg.state_dim, cfg.action_dim, cfg.seed)?;
            (env.collect(cfg.episodes, cfg.steps), None)
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown environment {other:?}, expected {CARTPOLE_NAME} or {SYNTHETIC_NAME}"
            )))
        }
    };
    ds.run_config = Some(echo);
    ds.save(&a.out)?;
    writeln!(out, "transitions: {}", ds.len())?;
    if let Some(s) = survival {
        writeln!(out, "mean episode survival: {:.4}", s.mean_survival)?;
        writeln!(out, "mean pole upright fraction: {:.4}", s.mean_upright)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct KoopmanRunReport {
    solver: &'static str,
    config: kfc_core::KoopmanTrainConfig,
    /// Root mean square one-step prediction error on the whole dataset.
    prediction_rmse: f64,
    train: Option<kfc_core::TrainReport>,
}

fn prediction_rmse(model: &KoopmanForwardModel, ds: &Dataset) -> Result<f64, CliError> {
    let mut sq = 0.0;
    for i in 0..ds.len() {
        let p = model.predict_next(ds.state(i), ds.action(i))?;
        sq += p
            .iter()
            .zip(ds.next_state(i))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
    }
    Ok((sq / (ds.len() * ds.state_dim).max(1) as f64).sqrt())
}

fn cmd_train_koopman(a: TrainKoopmanArgs, file: FileConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = file.koopman;
    set(&mut cfg.latent_dim, a.latent_dim);
    set(&mut cfg.epochs, a.epochs);
    set(&mut cfg.hidden_dims, a.hidden);
    set(&mut cfg.seed, a.seed);
    if let Some(c) = a.codec {
        cfg.codec = match c {
            CodecArg::Identity => CodecKind::Identity,
            CodecArg::Mlp => CodecKind::Mlp,
        };
    }
    cfg.validate()?;
    let ds = load_dataset(&a.dataset)?;
    let (model, train) = match cfg.codec {
        CodecKind::Identity => {
            let mut m = fit_linear(&ds)?;
            m.config = Some(cfg.clone());
            (m, None)
        }
        CodecKind::Mlp => {
            let (m, r) = koopman::train(&ds, &cfg)?;
            (m, Some(r))
        }
    };
    model.save(&a.out)?;
    let report = KoopmanRunReport {
        solver: if train.is_some() { "adam" } else { "least_squares" },
        config: cfg,
        prediction_rmse: prediction_rmse(&model, &ds)?,
        train,
    };
    write_json(&a.report.unwrap_or_else(|| with_suffix(&a.out, ".report.json")), &report)?;
    writeln!(out, "latent dim: {}", model.latent_dim)?;
    writeln!(out, "one-step prediction rmse: {:.6e}", report.prediction_rmse)?;
    if let Some(t) = &report.train {
        writeln!(out, "final train loss: {:.6e}", t.train_losses.last().copied().unwrap_or(f64::NAN))?;
        writeln!(out, "final val loss: {:.6e}", t.val_losses.last().copied().unwrap_or(f64::NAN))?;
    }
    if model.latent_dim <= 8 && model.action_dim == 1 {
        for act in [-1.0, 1.0] {
            writeln!(out, "K(a={act:+}):")?;
            write_matrix(out, &model.k_of_a(&[act]))?;
        }
    }
    Ok(())
}

fn cmd_symmetries(a: SymmetriesArgs, file: FileConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = file.augment;
    cfg.mode = match a.mode {
        SidecarModeArg::Kfc => AugmentMode::Kfc,
        SidecarModeArg::Kfcpp => AugmentMode::Kfcpp,
    };
    let model = load_model(&a.model)?;
    let ds = load_dataset(&a.dataset)?;
    let s = precompute_sidecar(&model, &ds, &cfg, &a.out, a.resume)?;
    writeln!(out, "records: {}", s.count)?;
    writeln!(out, "fallbacks: {}", s.fallbacks)?;
    if s.resumed_from > 0 {
        writeln!(out, "resumed from record {}", s.resumed_from)?;
    }
    let [p50, p90, p99] = s.residual_percentiles;
    writeln!(out, "residual p50 {p50:.3e} p90 {p90:.3e} p99 {p99:.3e}")?;
    Ok(())
}

#[derive(Serialize)]
struct EvalSymSummary<'a> {
    env: String,
    seed: u64,
    samples: usize,
    config: &'a kfc_core::AugmentConfig,
    mode: &'a kfc_core::envs::FidelitySummary,
    matched_gaussian: &'a kfc_core::envs::FidelitySummary,
    matched_std: f64,
    matched_relative_gap: f64,
}

fn env_for(name: Option<String>, ds: &Dataset) -> Result<AnyEnv, CliError> {
    Ok(match name {
        Some(n) => AnyEnv::by_name(&n, ds.state_dim, ds.action_dim, ds.seed)?,
        None => AnyEnv::for_dataset(ds)?,
    })
}

fn cmd_eval_sym(a: EvalSymArgs, file: FileConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = file.augment;
    set(&mut cfg.mode, a.mode);
    let mut eval = file.eval;
    set(&mut eval.samples, a.samples);
    set(&mut eval.seed, a.seed);
    let ds = load_dataset(&a.dataset)?;
    let env = env_for(a.env, &ds)?;
    let model = a.model.as_deref().map(load_model).transpose()?;
    if cfg.mode.needs_model() && model.is_none() {
        return Err(CliError::Usage(format!("mode {} needs --model", cfg.mode)));
    }
    let sidecar = a.sidecar.as_deref().map(|p| Sidecar::load(existing(p)?).map_err(CliError::from)).transpose()?;
    let report = fidelity_eval(&env, model.as_ref(), &ds, &cfg, eval.samples, eval.seed, sidecar.as_ref())?;

    let mut w = BufWriter::new(File::create(&a.out)?);
    report.write_csv(&mut w)?;
    w.flush()?;
    let summary = EvalSymSummary {
        env: env.name().to_string(),
        seed: eval.seed,
        samples: report.rows.len(),
        config: &cfg,
        mode: &report.summary,
        matched_gaussian: &report.matched.summary,
        matched_std: report.matched.std,
        matched_relative_gap: report.matched.relative_gap,
    };
    write_json(&a.summary.unwrap_or_else(|| with_suffix(&a.out, ".summary.json")), &summary)?;
    let (m, g) = (&report.summary, &report.matched.summary);
    writeln!(out, "samples: {}", report.rows.len())?;
    writeln!(out, "{}: mean dS {:.4e} mean dE {:.4e} (pos {:.4e}, vel {:.4e}) fallbacks {}",
        m.mode, m.mean_delta_s, m.mean_delta_e, m.mean_delta_e_pos, m.mean_delta_e_vel, m.fallbacks)?;
    writeln!(out, "matched gaussian (std {:.4e}): mean dS {:.4e} mean dE {:.4e}",
        report.matched.std, g.mean_delta_s, g.mean_delta_e)?;
    Ok(())
}

#[derive(Serialize)]
struct LogHeader<'a> {
    dataset_transitions: usize,
    cql_config: &'a kfc_core::offline_rl::CqlConfig,
    augment_config: &'a kfc_core::AugmentConfig,
}

fn cmd_train_agent(a: TrainAgentArgs, file: FileConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let mut aug = file.augment;
    set(&mut aug.mode, a.aug);
    let mut cql = file.cql;
    set(&mut cql.train_steps, a.steps);
    if let Some(s) = a.seed {
        cql.seed = s;
        aug.seed = s;
    }
    let mut eval = file.eval;
    set(&mut eval.episodes, a.eval_episodes);

    let ds = load_dataset(&a.dataset)?;
    let model = a.model.as_deref().map(load_model).transpose()?;
    if aug.mode.needs_model() && model.is_none() {
        return Err(CliError::Usage(format!("augmentation {} needs --model", aug.mode)));
    }
    let sidecar = a.sidecar.as_deref().map(|p| Sidecar::load(existing(p)?).map_err(CliError::from)).transpose()?;
    let (learner, log) = train_agent(&ds, model.as_ref(), &aug, &cql, sidecar.as_ref())?;

    PolicyCheckpoint::from_learner(&learner, &cql, &aug).save(&a.out)?;
    let log_path = a.log.unwrap_or_else(|| with_suffix(&a.out, ".log.jsonl"));
    let mut w = BufWriter::new(File::create(&log_path)?);
    let header = LogHeader {
        dataset_transitions: ds.len(),
        cql_config: &cql,
        augment_config: &aug,
    };
    serde_json::to_writer(&mut w, &header).map_err(io::Error::from)?;
    w.write_all(b"\n")?;
    log.write_jsonl(&mut w)?;
    w.flush()?;

    if let Some(last) = log.records.last() {
        writeln!(out, "steps: {} q loss {:.4e} cql gap {:.4} alpha_tilde {:.4}",
            last.step, last.q_loss, last.cql_gap, last.alpha_tilde)?;
    }
    let st = log.augment;
    writeln!(out, "augmented tuples: {} koopman {} gaussian {} fallbacks {}",
        st.tuples, st.koopman, st.gaussian, st.fallbacks)?;
    if eval.episodes > 0 {
        let env = AnyEnv::for_dataset(&ds)?;
        let policy = CategoricalPolicy::from_learner(&learner);
        let r = evaluate_policy(&env, &policy, eval.episodes, cql.seed + EVAL_SEED_OFFSET, DEFAULT_MAX_STEPS)?;
        writeln!(out, "evaluation return over {} episodes: {:.2} +/- {:.2}",
            eval.episodes, r.mean_return, r.std_return)?;
    }
    Ok(())
}

fn cmd_paper_check(a: PaperCheckArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.tolerance.is_nan() || a.tolerance < 0.0 {
        return Err(CliError::Usage("tolerance must be nonnegative".into()));
    }
    let items = reference_check(a.tolerance)?;
    let mut failed = 0;
    for it in &items {
        let tag = if it.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!it.passed());
        writeln!(out, "{tag} {} (error {:.3e}, tolerance {:.1e})", it.name, it.error, it.tolerance)?;
    }
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} of {} checks failed", items.len())));
    }
    Ok(())
}
