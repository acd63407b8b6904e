use std::path::{Path, PathBuf};

use clap::Args;
use rlep_core::trainer::ResumeState;
use rlep_core::{
    checkpoint_path, compare_runs, generate_taskset, load_resume, state_path, train, CollectOptions, ExperiencePool,
    FamilyParams, Policy, RunComparison, RunLog, Split, Stream, Streams, TaskFamily, TaskSet, TrainConfig,
    TrainOptions, Vocab,
};

use crate::manifest::RunManifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] rlep_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Validation(String),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Io { .. } => "io",
            CliError::Validation(_) => "validation",
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Args, Clone, Debug)]
pub struct GenTasksArgs {
    /// modadd, copy or reverse.
    #[arg(long)]
    pub family: String,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub vocab_size: u32,
    /// ModAdd modulus.
    #[arg(long, default_value_t = 10)]
    pub modulus: u32,
    /// Copy/Reverse payload length.
    #[arg(long, default_value_t = 3)]
    pub payload_len: usize,
    /// train or eval.
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug)]
pub struct TrainArgs {
    /// Flat TOML config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training taskset (train split).
    #[arg(long)]
    pub tasks: PathBuf,
    /// Held-out taskset (eval split).
    #[arg(long)]
    pub eval_tasks: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Policy checkpoint to continue from; the run log in --out is cut back
    /// to that step.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct TrainRlepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long)]
    pub eval_tasks: PathBuf,
    /// Experience pool written by `collect`.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Start from this checkpoint instead of the uniform policy.
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
    /// Seed checkpoint used to score replays when `replay_logprob = "collection"`.
    #[arg(long)]
    pub collection_checkpoint: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct CollectArgs {
    /// Seed policy checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub candidates: usize,
    #[arg(long, default_value_t = 0.7)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.95)]
    pub top_p: f64,
    #[arg(long, default_value_t = 2)]
    pub min_paths: usize,
    #[arg(long, default_value_t = 16)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Clone, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub baseline_log: PathBuf,
    #[arg(long)]
    pub rlep_log: PathBuf,
    /// Summary CSV path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "eval_pass1")]
    pub metric: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub log_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub steps: u64,
    pub final_pass1: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollectSummary {
    pub retained: usize,
    pub total: usize,
    pub records: usize,
    pub warnings: Vec<String>,
}

impl CollectSummary {
    pub fn coverage(&self) -> f64 {
        self.retained as f64 / self.total as f64
    }
}

pub const RUN_LOG: &str = "run_log.csv";
pub const GROUP_LOG: &str = "group_sizes.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

fn manifest_beside(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match std::fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(CliError::io(path, e)),
        _ => Ok(()),
    }
}

pub fn gen_tasks(args: &GenTasksArgs) -> Result<PathBuf> {
    if args.count == 0 {
        return Err(CliError::Validation("--count must be >= 1".into()));
    }
    let family: TaskFamily = args.family.parse()?;
    let split: Split = args.split.parse()?;
    let vocab = Vocab::new(args.vocab_size)?;
    let params = FamilyParams { modulus: args.modulus, payload_len: args.payload_len };
    let set = generate_taskset(family, params, args.count, args.seed, vocab, split)?;
    ensure_parent(&args.out)?;
    set.save(&args.out)?;
    let manifest_path = manifest_beside(&args.out);
    let dir = args.out.parent().unwrap_or(Path::new("."));
    let mut manifest = RunManifest::new("gen-tasks", None, args.seed, dir);
    manifest.artifact("taskset", &args.out);
    manifest.write(&manifest_path)?;
    Ok(args.out.clone())
}

fn load_config(path: Option<&Path>, defaults: TrainConfig, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            TrainConfig::from_toml_str_with(&text, defaults)?
        }
        None => defaults,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_task_splits(cfg: &TrainConfig, tasks: &Path, eval_tasks: &Path) -> Result<(TaskSet, TaskSet)> {
    let train_set = TaskSet::load(tasks)?;
    let eval_set = TaskSet::load(eval_tasks)?;
    if train_set.split != Split::Train {
        return Err(CliError::Validation(format!("{} is not a train split", tasks.display())));
    }
    if eval_set.split != Split::Eval {
        return Err(CliError::Validation(format!("{} is not an eval split", eval_tasks.display())));
    }
    if let Some(t) = train_set.tasks.iter().find(|t| eval_set.get(&t.id).is_some()) {
        return Err(CliError::Validation(format!("task id {} appears in both splits", t.id)));
    }
    for set in [&train_set, &eval_set] {
        if set.vocab.size() != cfg.vocab_size {
            return Err(CliError::Validation(format!(
                "vocab_size: config has {} but tasks use {}",
                cfg.vocab_size,
                set.vocab.size()
            )));
        }
    }
    Ok((train_set, eval_set))
}

struct RunPaths {
    out: PathBuf,
    log: PathBuf,
    checkpoints: PathBuf,
    config: PathBuf,
    manifest: PathBuf,
}

impl RunPaths {
    fn new(out: &Path) -> Result<Self> {
        let paths = Self {
            out: out.to_path_buf(),
            log: out.join(RUN_LOG),
            checkpoints: out.join(CHECKPOINT_DIR),
            config: out.join("config.toml"),
            manifest: out.join("manifest.json"),
        };
        ensure_dir(&paths.checkpoints)?;
        Ok(paths)
    }
}

fn finish_run(
    command: &str,
    cfg: &TrainConfig,
    config_path: Option<&Path>,
    paths: &RunPaths,
    outcome: &rlep_core::TrainOutcome<f64>,
    extra: &[(&str, &Path)],
    warnings: Vec<String>,
) -> Result<TrainSummary> {
    std::fs::write(&paths.config, cfg.to_toml_string()).map_err(|e| CliError::io(&paths.config, e))?;
    let final_checkpoint = checkpoint_path(&paths.checkpoints, cfg.total_steps);
    let mut manifest = RunManifest::new(command, config_path, cfg.seed, &paths.out);
    manifest.artifact("config", &paths.config);
    manifest.artifact("run_log", &paths.log);
    manifest.artifact("final_checkpoint", &final_checkpoint);
    manifest.artifact("final_state", &state_path(&final_checkpoint));
    for &(name, path) in extra {
        manifest.artifact(name, path);
    }
    manifest.write(&paths.manifest)?;
    if let Some(missing) = manifest.missing_artifacts().first() {
        return Err(CliError::Validation(format!("artifact {} was not written", missing.display())));
    }
    Ok(TrainSummary {
        out_dir: paths.out.clone(),
        log_path: paths.log.clone(),
        final_checkpoint,
        steps: outcome.log.records.last().map_or(0, |r| r.step),
        final_pass1: outcome.log.records.iter().rev().find_map(|r| r.eval_pass1),
        warnings,
    })
}

/// Vanilla GRPO+ run (no replay); its final checkpoint seeds collection.
pub fn train_baseline(args: &TrainArgs) -> Result<TrainSummary> {
    let defaults = TrainConfig { m: 0, ..TrainConfig::default() };
    let cfg = load_config(args.config.as_deref(), defaults, args.seed)?;
    if cfg.m != 0 {
        return Err(CliError::Validation(format!("M: train-baseline runs without replay, config sets M = {}", cfg.m)));
    }
    let (train_set, eval_set) = load_task_splits(&cfg, &args.tasks, &args.eval_tasks)?;
    let paths = RunPaths::new(&args.out)?;
    let init = Policy::zeros(cfg.vocab()?, cfg.context_len)?;

    let resume = match &args.resume {
        Some(ckpt) => {
            let mut state: ResumeState<f64> = load_resume(ckpt)?;
            let mut log = RunLog::load(&paths.log)?;
            log.truncate_to_step(state.step);
            if log.len() as u64 != state.step {
                return Err(CliError::Validation(format!(
                    "run log in {} has {} rows up to step {}",
                    paths.out.display(),
                    log.len(),
                    state.step
                )));
            }
            log.save(&paths.log)?;
            state.log = log;
            Some(state)
        }
        None => {
            remove_if_exists(&paths.log)?;
            None
        }
    };

    let opts = TrainOptions {
        eval_tasks: Some(&eval_set),
        checkpoint_dir: Some(&paths.checkpoints),
        log_path: Some(&paths.log),
        resume,
        ..Default::default()
    };
    let outcome = train(&cfg, &train_set, init, opts)?;
    finish_run("train-baseline", &cfg, args.config.as_deref(), &paths, &outcome, &[], Vec::new())
}

/// Replay training: `G` fresh rollouts plus `M` pool successes per question.
pub fn train_rlep(args: &TrainRlepArgs) -> Result<TrainSummary> {
    let cfg = load_config(args.config.as_deref(), TrainConfig::default(), args.seed)?;
    let mut warnings = Vec::new();
    if cfg.m > 0 && args.pool.is_none() {
        return Err(CliError::Validation(format!("M = {} requires --pool", cfg.m)));
    }
    if cfg.m == 0 && args.pool.is_some() {
        warnings.push("M = 0: the supplied pool is ignored and this run is the plain baseline".to_string());
    }
    let (train_set, eval_set) = load_task_splits(&cfg, &args.tasks, &args.eval_tasks)?;
    let pool = match &args.pool {
        Some(p) => Some(ExperiencePool::load(p, &train_set)?),
        None => None,
    };
    if let Some(pool) = &pool {
        if pool.num_questions() < train_set.len() && cfg.m > 0 {
            warnings.push(format!(
                "pool covers {}/{} training questions; uncovered questions use replay_missing_policy = {}",
                pool.num_questions(),
                train_set.len(),
                cfg.replay_missing_policy
            ));
        }
    }
    let collection_params = match &args.collection_checkpoint {
        Some(p) => Some(Policy::load(p)?),
        None => None,
    };
    let init = match &args.warm_start {
        Some(p) => Policy::load(p)?,
        None => Policy::zeros(cfg.vocab()?, cfg.context_len)?,
    };

    let paths = RunPaths::new(&args.out)?;
    let group_log = paths.out.join(GROUP_LOG);
    remove_if_exists(&paths.log)?;
    remove_if_exists(&group_log)?;
    let opts = TrainOptions {
        eval_tasks: Some(&eval_set),
        pool: pool.as_ref(),
        collection_params: collection_params.as_ref(),
        checkpoint_dir: Some(&paths.checkpoints),
        log_path: Some(&paths.log),
        group_log_path: Some(&group_log),
        resume: None,
    };
    let outcome = train(&cfg, &train_set, init, opts)?;
    let mut extra: Vec<(&str, &Path)> = vec![("group_sizes", &group_log)];
    if let Some(p) = &args.pool {
        extra.push(("pool", p));
    }
    finish_run("train-rlep", &cfg, args.config.as_deref(), &paths, &outcome, &extra, warnings)
}

/// Step recorded in a checkpoint's trainer-state sidecar, if there is one.
fn checkpoint_step(ckpt: &Path) -> u64 {
    load_resume::<f64>(ckpt).map(|s| s.step).unwrap_or(0)
}

pub fn collect(args: &CollectArgs) -> Result<CollectSummary> {
    if args.min_paths > args.candidates {
        return Err(CliError::Validation(format!(
            "--min-paths ({}) exceeds --candidates ({})",
            args.min_paths, args.candidates
        )));
    }
    let params = Policy::load(&args.checkpoint)?;
    let tasks = TaskSet::load(&args.tasks)?;
    if tasks.vocab != params.vocab() {
        return Err(CliError::Validation(format!(
            "checkpoint vocab {} differs from taskset vocab {}",
            params.vocab().size(),
            tasks.vocab.size()
        )));
    }
    let label = args.checkpoint.file_name().map_or_else(|| "checkpoint".into(), |n| n.to_string_lossy().into_owned());
    let opts = CollectOptions {
        candidates_per_question: args.candidates,
        temperature: args.temperature,
        top_p: args.top_p,
        min_paths: args.min_paths,
        max_len: args.max_len,
        source_checkpoint: label,
        collection_step: checkpoint_step(&args.checkpoint),
    };
    let pool = rlep_core::collect(&params, &tasks, &opts, &mut Streams::new(args.seed).rng(Stream::Collection, 0))?;
    pool.check_integrity(&tasks, args.min_paths)?;
    ensure_parent(&args.out)?;
    pool.save(&args.out)?;

    let mut manifest = RunManifest::new("collect", None, args.seed, args.out.parent().unwrap_or(Path::new(".")));
    manifest.artifact("checkpoint", &args.checkpoint);
    manifest.artifact("tasks", &args.tasks);
    manifest.artifact("pool", &args.out);
    manifest.write(&manifest_beside(&args.out))?;

    let mut warnings = Vec::new();
    if pool.is_empty() {
        warnings.push(format!("no question reached {} distinct verified responses; the pool is empty", args.min_paths));
    }
    Ok(CollectSummary { retained: pool.num_questions(), total: tasks.len(), records: pool.num_records(), warnings })
}

pub fn report(args: &ReportArgs) -> Result<RunComparison> {
    let baseline = RunLog::load(&args.baseline_log)?;
    let rlep = RunLog::load(&args.rlep_log)?;
    let summary = compare_runs(&baseline, &rlep, &args.metric)?;
    ensure_parent(&args.out)?;
    let file = std::fs::File::create(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    summary.write_csv(file)?;
    Ok(summary)
}
