//! Training loops: vanilla GRPO+ (no replay) and replay training.
//!
//! Each rollout samples `prompts_per_rollout` questions, draws `G` fresh
//! responses per question from the frozen behavior policy, optionally appends
//! `M` replayed successes, standardizes rewards over the mixed group, and then
//! takes `prompts_per_rollout / mini_batch_prompts` optimizer steps on
//! shuffled mini-batches of groups. With `M = 0` the replay path is never
//! touched, so the two variants share every random draw.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::grpo::{surrogate_objective, ClipConfig, Group, Trajectory, TrajectorySource, DEFAULT_DEGENERACY_EPS};
use crate::optim::{Optimizer, OptimizerKind};
use crate::policy::{expect_line, header_value, PolicyParams, SparseGrad, Vocab};
use crate::pool::{sample_replay, ExperiencePool};
use crate::rng::{fork_seeds, Stream, Streams};
use crate::runlog::{append_records, RunLog, RunRecord};
use crate::scalar::Scalar;
use crate::tasks::{shape_overlong, verify, Task, TaskSet};

/// What to do with a question that has no pool records when `M > 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ReplayMissingPolicy {
    /// Train that question on its fresh rollouts only (`G' = G`).
    #[default]
    SkipReplay,
    Error,
}

/// Which policy scores replayed responses as the behavior log-prob.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ReplayLogprobSource {
    /// The current rollout's frozen behavior policy.
    #[default]
    Behavior,
    /// The seed policy the pool was collected from.
    Collection,
}

macro_rules! text_enum {
    ($ty:ty, $what:literal, $($variant:path => $name:literal),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(Error::Config(format!(concat!("unknown ", $what, " {:?}"), s))),
                }
            }
        }
    };
}

text_enum!(ReplayMissingPolicy, "replay_missing_policy",
    ReplayMissingPolicy::SkipReplay => "skip_replay", ReplayMissingPolicy::Error => "error");
text_enum!(ReplayLogprobSource, "replay_logprob",
    ReplayLogprobSource::Behavior => "behavior", ReplayLogprobSource::Collection => "collection");

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Fresh rollouts per question.
    pub g: usize,
    /// Replayed successes per question.
    pub m: usize,
    pub prompts_per_rollout: usize,
    pub mini_batch_prompts: usize,
    /// Optimizer updates in the whole run.
    pub total_steps: u64,
    pub max_response_len: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub clip: ClipConfig<f64>,
    pub degeneracy_eps: f64,
    pub seed: u64,
    pub replay_missing_policy: ReplayMissingPolicy,
    pub replay_logprob: ReplayLogprobSource,
    pub vocab_size: u32,
    pub context_len: usize,
    pub eval_every: u64,
    pub eval_samples: usize,
    pub eval_temperature: f64,
    pub eval_top_p: f64,
    /// Checkpoint cadence in updates; must be a multiple of the updates per
    /// rollout. 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            g: 8,
            m: 2,
            prompts_per_rollout: 64,
            mini_batch_prompts: 8,
            total_steps: 400,
            max_response_len: 16,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Adam,
            clip: ClipConfig::default(),
            degeneracy_eps: DEFAULT_DEGENERACY_EPS,
            seed: 0,
            replay_missing_policy: ReplayMissingPolicy::SkipReplay,
            replay_logprob: ReplayLogprobSource::Behavior,
            vocab_size: 16,
            context_len: 2,
            eval_every: 10,
            eval_samples: 32,
            eval_temperature: 1.0,
            eval_top_p: 1.0,
            checkpoint_every: 80,
        }
    }
}

/// Flat key-value form of [`TrainConfig`] as it appears in config files.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(rename = "G")]
    g: Option<usize>,
    #[serde(rename = "M")]
    m: Option<usize>,
    prompts_per_rollout: Option<usize>,
    mini_batch_prompts: Option<usize>,
    updates_per_rollout: Option<usize>,
    total_steps: Option<u64>,
    max_response_len: Option<usize>,
    learning_rate: Option<f64>,
    optimizer: Option<String>,
    eps_low: Option<f64>,
    eps_high: Option<f64>,
    aggregation: Option<String>,
    degeneracy_eps: Option<f64>,
    seed: Option<u64>,
    replay_missing_policy: Option<String>,
    replay_logprob: Option<String>,
    vocab_size: Option<u32>,
    context_len: Option<usize>,
    eval_every: Option<u64>,
    eval_samples: Option<usize>,
    eval_temperature: Option<f64>,
    eval_top_p: Option<f64>,
    checkpoint_every: Option<u64>,
}

impl TrainConfig {
    pub fn updates_per_rollout(&self) -> usize {
        self.prompts_per_rollout / self.mini_batch_prompts.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config(format!("{key}: {msg}")));
        if self.g < 2 {
            return bad("G", format!("must be >= 2, got {}", self.g));
        }
        if self.prompts_per_rollout == 0 {
            return bad("prompts_per_rollout", "must be >= 1".into());
        }
        if self.mini_batch_prompts == 0 || !self.prompts_per_rollout.is_multiple_of(self.mini_batch_prompts) {
            return bad(
                "mini_batch_prompts",
                format!("must divide prompts_per_rollout ({}), got {}", self.prompts_per_rollout, self.mini_batch_prompts),
            );
        }
        if self.total_steps == 0 {
            return bad("total_steps", "must be >= 1".into());
        }
        if self.max_response_len == 0 {
            return bad("max_response_len", "must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("must be finite and >= 0, got {}", self.learning_rate));
        }
        if let Err(Error::Config(msg)) = self.clip.validate() {
            return Err(Error::Config(msg));
        }
        if !(self.degeneracy_eps >= 0.0) {
            return bad("degeneracy_eps", "must be >= 0".into());
        }
        if Vocab::new(self.vocab_size).is_err() {
            return bad("vocab_size", format!("must be >= 2, got {}", self.vocab_size));
        }
        if self.context_len == 0 {
            return bad("context_len", "must be >= 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be >= 1".into());
        }
        if self.eval_samples == 0 {
            return bad("eval_samples", "must be >= 1".into());
        }
        if !(self.eval_temperature > 0.0) {
            return bad("eval_temperature", "must be > 0".into());
        }
        if !(self.eval_top_p > 0.0 && self.eval_top_p <= 1.0) {
            return bad("eval_top_p", "must be in (0, 1]".into());
        }
        if !self.checkpoint_every.is_multiple_of(self.updates_per_rollout() as u64) {
            return bad(
                "checkpoint_every",
                format!("must be a multiple of the updates per rollout ({})", self.updates_per_rollout()),
            );
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.vocab_size)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            n_samples: self.eval_samples,
            temperature: self.eval_temperature,
            top_p: self.eval_top_p,
            max_len: self.max_response_len,
        }
    }

    /// Parses a flat TOML config. Missing keys take defaults, unknown keys
    /// are errors.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_str_with(text, TrainConfig::default())
    }

    /// Like [`TrainConfig::from_toml_str`] with caller-chosen defaults.
    pub fn from_toml_str_with(text: &str, d: TrainConfig) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(format!("config: {}", e.message())))?;
        let cfg = TrainConfig {
            g: file.g.unwrap_or(d.g),
            m: file.m.unwrap_or(d.m),
            prompts_per_rollout: file.prompts_per_rollout.unwrap_or(d.prompts_per_rollout),
            mini_batch_prompts: file.mini_batch_prompts.unwrap_or(d.mini_batch_prompts),
            total_steps: file.total_steps.unwrap_or(d.total_steps),
            max_response_len: file.max_response_len.unwrap_or(d.max_response_len),
            learning_rate: file.learning_rate.unwrap_or(d.learning_rate),
            optimizer: file.optimizer.as_deref().map(str::parse).transpose()?.unwrap_or(d.optimizer),
            clip: ClipConfig {
                eps_low: file.eps_low.unwrap_or(d.clip.eps_low),
                eps_high: file.eps_high.unwrap_or(d.clip.eps_high),
                aggregation: file.aggregation.as_deref().map(str::parse).transpose()?.unwrap_or(d.clip.aggregation),
            },
            degeneracy_eps: file.degeneracy_eps.unwrap_or(d.degeneracy_eps),
            seed: file.seed.unwrap_or(d.seed),
            replay_missing_policy: file.replay_missing_policy.as_deref().map(str::parse).transpose()?.unwrap_or(d.replay_missing_policy),
            replay_logprob: file.replay_logprob.as_deref().map(str::parse).transpose()?.unwrap_or(d.replay_logprob),
            vocab_size: file.vocab_size.unwrap_or(d.vocab_size),
            context_len: file.context_len.unwrap_or(d.context_len),
            eval_every: file.eval_every.unwrap_or(d.eval_every),
            eval_samples: file.eval_samples.unwrap_or(d.eval_samples),
            eval_temperature: file.eval_temperature.unwrap_or(d.eval_temperature),
            eval_top_p: file.eval_top_p.unwrap_or(d.eval_top_p),
            checkpoint_every: file.checkpoint_every.unwrap_or(d.checkpoint_every),
        };
        if let Some(upr) = file.updates_per_rollout {
            if upr != cfg.updates_per_rollout() {
                return Err(Error::Config(format!(
                    "updates_per_rollout: {upr} disagrees with prompts_per_rollout / mini_batch_prompts = {}",
                    cfg.updates_per_rollout()
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every field as flat TOML; parses back to an equal config.
    pub fn to_toml_string(&self) -> String {
        let file = ConfigFile {
            g: Some(self.g),
            m: Some(self.m),
            prompts_per_rollout: Some(self.prompts_per_rollout),
            mini_batch_prompts: Some(self.mini_batch_prompts),
            updates_per_rollout: Some(self.updates_per_rollout()),
            total_steps: Some(self.total_steps),
            max_response_len: Some(self.max_response_len),
            learning_rate: Some(self.learning_rate),
            optimizer: Some(self.optimizer.to_string()),
            eps_low: Some(self.clip.eps_low),
            eps_high: Some(self.clip.eps_high),
            aggregation: Some(self.clip.aggregation.to_string()),
            degeneracy_eps: Some(self.degeneracy_eps),
            seed: Some(self.seed),
            replay_missing_policy: Some(self.replay_missing_policy.to_string()),
            replay_logprob: Some(self.replay_logprob.to_string()),
            vocab_size: Some(self.vocab_size),
            context_len: Some(self.context_len),
            eval_every: Some(self.eval_every),
            eval_samples: Some(self.eval_samples),
            eval_temperature: Some(self.eval_temperature),
            eval_top_p: Some(self.eval_top_p),
            checkpoint_every: Some(self.checkpoint_every),
        };
        toml::to_string(&file).expect("flat config serializes")
    }
}

/// Statistics of one optimizer update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    /// Mean surrogate objective over the mini-batch groups, before the step.
    pub objective: f64,
    pub clip_fraction: f64,
    pub train_reward_mean: f64,
    pub groups: usize,
    pub replayed_tokens: usize,
    pub total_tokens: usize,
}

/// Samples `G` fresh responses per task from `params` at temperature 1,
/// top-p 1, and scores them.
pub fn rollout_phase<T: Scalar, R: Rng + ?Sized>(
    params: &PolicyParams<T>,
    tasks: &[&Task],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<Vec<Trajectory<T>>>> {
    let seeds = fork_seeds(rng, tasks.len());
    tasks
        .par_iter()
        .zip(seeds)
        .map(|(task, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..cfg.g)
                .map(|_| {
                    let s = params.sample(&task.prompt, cfg.max_response_len, T::one(), T::one(), &mut rng)?;
                    let reward = shape_overlong(verify(task, &s.tokens), s.truncated);
                    Ok(Trajectory { source: TrajectorySource::Fresh, tokens: s.tokens, old_logprob: s.per_token_logprob, reward })
                })
                .collect()
        })
        .collect()
}

/// Appends `M` replayed successes to each question's fresh rollouts and
/// standardizes advantages over the combined group.
pub fn assemble_groups<T: Scalar, R: Rng + ?Sized>(
    fresh: Vec<Vec<Trajectory<T>>>,
    tasks: &[&Task],
    pool: Option<&ExperiencePool>,
    params_old: &PolicyParams<T>,
    collection_params: Option<&PolicyParams<T>>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<Group<T>>> {
    let eps = T::lit(cfg.degeneracy_eps);
    let scorer = match cfg.replay_logprob {
        ReplayLogprobSource::Behavior => params_old,
        ReplayLogprobSource::Collection if cfg.m == 0 => params_old,
        ReplayLogprobSource::Collection => collection_params
            .ok_or_else(|| Error::Config("replay_logprob = collection needs the collection checkpoint".into()))?,
    };
    let mut groups = Vec::with_capacity(tasks.len());
    for (mut trajectories, task) in fresh.into_iter().zip(tasks) {
        if cfg.m > 0 {
            let pool = pool.ok_or_else(|| Error::Config("M > 0 requires an experience pool".into()))?;
            match sample_replay(pool, &task.id, cfg.m, rng) {
                Ok(records) => {
                    for rec in records {
                        trajectories.push(Trajectory {
                            source: TrajectorySource::Replayed,
                            old_logprob: scorer.logprob(&task.prompt, &rec.response_tokens)?,
                            tokens: rec.response_tokens.clone(),
                            reward: T::one(),
                        });
                    }
                }
                Err(Error::MissingQuestion(_)) if cfg.replay_missing_policy == ReplayMissingPolicy::SkipReplay => {}
                Err(e) => return Err(e),
            }
        }
        groups.push(Group::new(task.id.clone(), task.prompt.clone(), trajectories, eps)?);
    }
    Ok(groups)
}

/// Runs up to `max_updates` optimizer steps over shuffled mini-batches of
/// `groups`, with importance ratios against the frozen `params_old`.
/// `on_update` sees the params right after each step.
pub fn update_phase<T: Scalar, R: Rng + ?Sized>(
    params: &mut PolicyParams<T>,
    optimizer: &mut Optimizer<T>,
    groups: &[Group<T>],
    cfg: &TrainConfig,
    max_updates: usize,
    batch_rng: &mut R,
    on_update: &mut dyn FnMut(&PolicyParams<T>, UpdateStats) -> Result<()>,
) -> Result<()> {
    let clip: ClipConfig<T> = cfg.clip.cast();
    let lr = T::lit(cfg.learning_rate);
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(batch_rng);
    for chunk in order.chunks(cfg.mini_batch_prompts.max(1)).take(max_updates) {
        let mut batch = chunk.to_vec();
        batch.sort_unstable();
        let results = batch
            .par_iter()
            .map(|&gi| surrogate_objective(params, &groups[gi], &clip))
            .collect::<Result<Vec<_>>>()?;

        let n = T::from_usize(batch.len()).unwrap();
        let mut grad = SparseGrad::new(params.vocab().size() as usize);
        let mut objective = T::zero();
        let (mut clipped, mut tokens, mut replayed_tokens) = (0, 0, 0);
        let (mut reward_sum, mut fresh_count) = (T::zero(), 0usize);
        for (&gi, res) in batch.iter().zip(&results) {
            if !res.grad.is_finite() || !res.objective.is_finite() {
                return Err(Error::NonFinite(describe_group(&groups[gi])));
            }
            grad.add_scaled(&res.grad, T::one() / n);
            objective = objective + res.objective / n;
            clipped += res.clipped_tokens;
            tokens += res.total_tokens;
            for t in &groups[gi].trajectories {
                match t.source {
                    TrajectorySource::Fresh => {
                        reward_sum = reward_sum + t.reward;
                        fresh_count += 1;
                    }
                    TrajectorySource::Replayed => replayed_tokens += t.tokens.len(),
                }
            }
        }
        optimizer.step(params, &grad, lr);
        on_update(
            params,
            UpdateStats {
                objective: objective.as_f64(),
                clip_fraction: clipped as f64 / tokens.max(1) as f64,
                train_reward_mean: if fresh_count == 0 { 0.0 } else { reward_sum.as_f64() / fresh_count as f64 },
                groups: batch.len(),
                replayed_tokens,
                total_tokens: tokens,
            },
        )?;
    }
    Ok(())
}

fn describe_group<T: Scalar>(g: &Group<T>) -> String {
    let rewards: Vec<String> = g.trajectories.iter().map(|t| t.reward.to_string()).collect();
    let adv: Vec<String> = g.advantages.iter().map(|a| a.to_string()).collect();
    let lens: Vec<String> = g.trajectories.iter().map(|t| t.tokens.len().to_string()).collect();
    format!(
        "question {} (G'={}, replayed={}): rewards [{}] advantages [{}] lengths [{}]",
        g.question_id,
        g.size(),
        g.replayed_count(),
        rewards.join(","),
        adv.join(","),
        lens.join(",")
    )
}

/// Where a run writes its artifacts. All optional.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a, T> {
    pub eval_tasks: Option<&'a TaskSet>,
    pub pool: Option<&'a ExperiencePool>,
    /// Policy that scores replayed responses when `replay_logprob = collection`.
    pub collection_params: Option<&'a PolicyParams<T>>,
    pub checkpoint_dir: Option<&'a Path>,
    /// CSV run log, appended one row per update.
    pub log_path: Option<&'a Path>,
    /// CSV of per-question group sizes, one row per question per rollout.
    pub group_log_path: Option<&'a Path>,
    pub resume: Option<ResumeState<T>>,
}

/// Everything needed to continue a run at a rollout boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct ResumeState<T> {
    pub params: PolicyParams<T>,
    pub optimizer: Optimizer<T>,
    pub step: u64,
    pub log: RunLog,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome<T> {
    pub params: PolicyParams<T>,
    pub optimizer: Optimizer<T>,
    pub log: RunLog,
    /// Checkpoint files written, in order.
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("policy_step{step:06}.txt"))
}

/// Optimizer/step sidecar of a policy checkpoint.
pub fn state_path(policy_checkpoint: &Path) -> PathBuf {
    let name = policy_checkpoint.file_name().and_then(|n| n.to_str()).unwrap_or("policy");
    policy_checkpoint.with_file_name(name.replacen("policy_", "state_", 1))
}

fn write_state<T: Scalar>(path: &Path, step: u64, optimizer: &Optimizer<T>, width: usize) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    (|| {
        writeln!(w, "rlep-trainer-state v1")?;
        writeln!(w, "step {step}")?;
        optimizer.write_to(&mut w, width)?;
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

/// Loads a policy checkpoint and its sidecar for resuming. The run log is
/// left empty; callers supply it.
pub fn load_resume<T: Scalar>(policy_checkpoint: &Path) -> Result<ResumeState<T>> {
    let params = PolicyParams::load(policy_checkpoint)?;
    let path = state_path(policy_checkpoint);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut reader = BufReader::new(file);
    let mut head = String::new();
    for _ in 0..2 {
        reader.read_line(&mut head).map_err(|e| Error::io(&path, e))?;
    }
    let mut lines = head.lines().map(|l| Ok(l.to_string()));
    expect_line(&mut lines, "rlep-trainer-state v1", "trainer state")?;
    let step = header_value(&mut lines, "step", "trainer state")? as u64;
    let optimizer = Optimizer::read_from(reader, params.vocab().size() as usize)?;
    Ok(ResumeState { params, optimizer, step, log: RunLog::default() })
}

/// Picks the rollout's questions, sorted by task index.
fn choose_questions<R: Rng + ?Sized>(n_tasks: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut picked: Vec<usize> = if k <= n_tasks {
        index::sample(rng, n_tasks, k).into_vec()
    } else {
        (0..k).map(|_| rng.gen_range(0..n_tasks)).collect()
    };
    picked.sort_unstable();
    picked
}

/// Full training run. `M = 0` is the vanilla baseline; `M > 0` replays
/// pool successes in every group.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    tasks: &TaskSet,
    init_params: PolicyParams<T>,
    opts: TrainOptions<'_, T>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("training taskset is empty".into()));
    }
    if init_params.vocab() != tasks.vocab || init_params.vocab().size() != cfg.vocab_size || init_params.context_len() != cfg.context_len {
        return Err(Error::Config(format!(
            "policy geometry (vocab {}, context_len {}) does not match config/tasks (vocab {}/{}, context_len {})",
            init_params.vocab().size(),
            init_params.context_len(),
            cfg.vocab_size,
            tasks.vocab.size(),
            cfg.context_len
        )));
    }
    if cfg.m > 0 && opts.pool.is_none() {
        return Err(Error::Config("M > 0 requires an experience pool".into()));
    }

    let streams = Streams::new(cfg.seed);
    let upr = cfg.updates_per_rollout() as u64;
    let width = init_params.vocab().size() as usize;
    let (mut params, mut optimizer, mut step, mut log) = match opts.resume {
        Some(r) => {
            if r.step % upr != 0 && r.step != cfg.total_steps {
                return Err(Error::Config(format!("cannot resume at step {}: not a rollout boundary", r.step)));
            }
            if r.params.vocab() != init_params.vocab() || r.params.context_len() != init_params.context_len() {
                return Err(Error::Config("resume checkpoint geometry differs from config".into()));
            }
            if r.optimizer.kind() != cfg.optimizer {
                return Err(Error::Config("resume optimizer state does not match config".into()));
            }
            (r.params, r.optimizer, r.step, r.log)
        }
        None => {
            let n = init_params.logits().len();
            (init_params, Optimizer::new(cfg.optimizer, n), 0, RunLog::default())
        }
    };
    let eval_opts = cfg.eval_options();
    let mut checkpoints = Vec::new();

    while step < cfg.total_steps {
        let rollout = step / upr;
        let params_old = params.clone();
        let mut sampling_rng = streams.rng(Stream::Sampling, rollout);
        let picked = choose_questions(tasks.len(), cfg.prompts_per_rollout, &mut sampling_rng);
        let chosen: Vec<&Task> = picked.iter().map(|&i| &tasks.tasks[i]).collect();

        let fresh = rollout_phase(&params_old, &chosen, cfg, &mut sampling_rng)?;
        let groups = assemble_groups(
            fresh,
            &chosen,
            opts.pool,
            &params_old,
            opts.collection_params,
            cfg,
            &mut streams.rng(Stream::Replay, rollout),
        )?;
        if let Some(path) = opts.group_log_path {
            write_group_sizes(path, rollout, &groups)?;
        }

        let max_updates = (cfg.total_steps - step).min(upr) as usize;
        let mut on_update = |p: &PolicyParams<T>, stats: UpdateStats| -> Result<()> {
            step += 1;
            let report = match opts.eval_tasks {
                Some(eval_tasks) if step % cfg.eval_every == 0 || step == cfg.total_steps => {
                    Some(evaluate(p, eval_tasks, &eval_opts, step, &mut streams.rng(Stream::Eval, step))?)
                }
                _ => None,
            };
            let record = RunRecord {
                step,
                objective: stats.objective,
                clip_fraction: stats.clip_fraction,
                train_reward_mean: stats.train_reward_mean,
                eval_pass1: report.map(|r| r.pass1),
                eval_maj_n: report.map(|r| r.maj_n),
            };
            if let Some(path) = opts.log_path {
                append_records(path, std::slice::from_ref(&record))?;
            }
            log.push(record);
            Ok(())
        };
        update_phase(
            &mut params,
            &mut optimizer,
            &groups,
            cfg,
            max_updates,
            &mut streams.rng(Stream::Batching, rollout),
            &mut on_update,
        )?;

        let due = cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
        if let Some(dir) = opts.checkpoint_dir {
            if due || step == cfg.total_steps {
                let path = checkpoint_path(dir, step);
                params.save(&path)?;
                write_state(&state_path(&path), step, &optimizer, width)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(TrainOutcome { params, optimizer, log, checkpoints })
}

fn write_group_sizes<T: Scalar>(path: &Path, rollout: u64, groups: &[Group<T>]) -> Result<()> {
    let fresh = !path.exists();
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    (|| {
        if fresh {
            writeln!(w, "rollout,question_id,group_size,replayed")?;
        }
        for g in groups {
            writeln!(w, "{rollout},{},{},{}", g.question_id, g.size(), g.replayed_count())?;
        }
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}
