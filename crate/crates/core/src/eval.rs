//! Accuracy metrics and run comparisons.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, TokenId};
use crate::rng::fork_seeds;
use crate::runlog::RunLog;
use crate::scalar::Scalar;
use crate::tasks::{is_correct, Task, TaskSet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub n_samples: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub max_len: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { n_samples: 32, temperature: 1.0, top_p: 1.0, max_len: 16 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    /// Greedy accuracy.
    pub pass1: f64,
    /// Mean sampled accuracy.
    pub avg_n: f64,
    /// Majority-vote accuracy.
    pub maj_n: f64,
    pub n: usize,
    pub step: u64,
}

/// Cuts a response after its first END.
pub fn canonicalize(response: &[TokenId], end: TokenId) -> &[TokenId] {
    match response.iter().position(|&t| t == end) {
        Some(i) => &response[..=i],
        None => response,
    }
}

/// Most frequent canonical response; ties go to the lexicographically
/// smallest token sequence.
pub fn majority_answer(responses: &[Vec<TokenId>], end: TokenId) -> Option<Vec<TokenId>> {
    let mut counts: BTreeMap<&[TokenId], usize> = BTreeMap::new();
    for r in responses {
        *counts.entry(canonicalize(r, end)).or_default() += 1;
    }
    // BTreeMap iterates in lexicographic order, so the first maximum wins.
    let mut best: Option<(&[TokenId], usize)> = None;
    for (ans, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((ans, c));
        }
    }
    best.map(|(a, _)| a.to_vec())
}

/// Per-task `(greedy correct, sampled correct count, majority correct)`.
fn evaluate_task<T: Scalar>(
    params: &PolicyParams<T>,
    task: &Task,
    opts: &EvalOptions,
    seed: u64,
) -> Result<(bool, usize, bool)> {
    let end = params.vocab().end();
    let greedy = is_correct(task, &params.greedy(&task.prompt, opts.max_len)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(opts.n_samples);
    for _ in 0..opts.n_samples {
        let s = params.sample(&task.prompt, opts.max_len, T::lit(opts.temperature), T::lit(opts.top_p), &mut rng)?;
        samples.push(s.tokens);
    }
    let correct = samples.iter().filter(|s| is_correct(task, s)).count();
    let majority = majority_answer(&samples, end).is_some_and(|a| is_correct(task, &a));
    Ok((greedy, correct, majority))
}

pub fn evaluate<T: Scalar, R: Rng + ?Sized>(
    params: &PolicyParams<T>,
    tasks: &TaskSet,
    opts: &EvalOptions,
    step: u64,
    rng: &mut R,
) -> Result<EvalReport> {
    if tasks.is_empty() || opts.n_samples == 0 {
        return Err(Error::Config("evaluation needs at least one task and one sample".into()));
    }
    let seeds = fork_seeds(rng, tasks.len());
    let per_task: Vec<(bool, usize, bool)> = tasks
        .tasks
        .par_iter()
        .zip(seeds)
        .map(|(task, seed)| evaluate_task(params, task, opts, seed))
        .collect::<Result<_>>()?;
    let n_tasks = per_task.len() as f64;
    Ok(EvalReport {
        pass1: per_task.iter().filter(|t| t.0).count() as f64 / n_tasks,
        avg_n: per_task.iter().map(|t| t.1 as f64 / opts.n_samples as f64).sum::<f64>() / n_tasks,
        maj_n: per_task.iter().filter(|t| t.2).count() as f64 / n_tasks,
        n: opts.n_samples,
        step,
    })
}

/// First step whose `metric` reaches `threshold`. Returns the first
/// crossing even if the metric later falls back below.
pub fn steps_to_threshold(log: &RunLog, metric: &str, threshold: f64) -> Result<Option<u64>> {
    Ok(log.series(metric)?.into_iter().find(|&(_, v)| v >= threshold).map(|(s, _)| s))
}

fn peak(log: &RunLog, metric: &str) -> Result<Option<f64>> {
    Ok(log.series(metric)?.into_iter().map(|(_, v)| v).reduce(f64::max))
}

fn last(log: &RunLog, metric: &str) -> Result<Option<f64>> {
    Ok(log.series(metric)?.last().map(|&(_, v)| v))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub metric: String,
    pub baseline_peak: f64,
    pub baseline_steps_to_peak: u64,
    pub baseline_final: f64,
    pub rlep_peak: f64,
    /// First step where the replay run reaches the baseline's peak.
    pub rlep_steps_to_baseline_peak: Option<u64>,
    pub rlep_final: f64,
    /// `baseline_steps_to_peak / rlep_steps_to_baseline_peak`.
    pub speedup: Option<f64>,
}

pub fn compare_runs(baseline: &RunLog, rlep: &RunLog, metric: &str) -> Result<RunComparison> {
    let missing = |which: &str| Error::Schema(format!("{which} log has no values in column {metric}"));
    let baseline_peak = peak(baseline, metric)?.ok_or_else(|| missing("baseline"))?;
    let baseline_steps_to_peak = steps_to_threshold(baseline, metric, baseline_peak)?.expect("peak is reached");
    let rlep_peak = peak(rlep, metric)?.ok_or_else(|| missing("rlep"))?;
    let rlep_steps = steps_to_threshold(rlep, metric, baseline_peak)?;
    Ok(RunComparison {
        metric: metric.to_string(),
        baseline_peak,
        baseline_steps_to_peak,
        baseline_final: last(baseline, metric)?.ok_or_else(|| missing("baseline"))?,
        rlep_peak,
        rlep_steps_to_baseline_peak: rlep_steps,
        rlep_final: last(rlep, metric)?.ok_or_else(|| missing("rlep"))?,
        speedup: rlep_steps.map(|s| baseline_steps_to_peak as f64 / s as f64),
    })
}

impl RunComparison {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(w);
        writer.serialize(self).and_then(|_| writer.flush().map_err(Into::into)).map_err(|e| Error::Schema(e.to_string()))
    }

    /// Plain-text table for terminals.
    pub fn table(&self) -> String {
        let opt = |v: Option<u64>| v.map_or("never".to_string(), |s| s.to_string());
        let speed = self.speedup.map_or("n/a".to_string(), |s| format!("{s:.2}x"));
        format!(
            "metric: {}\n\
             {:<10} {:>8} {:>8} {:>22}\n\
             {:<10} {:>8.4} {:>8.4} {:>22}\n\
             {:<10} {:>8.4} {:>8.4} {:>22}\n\
             speedup to baseline peak: {}\n",
            self.metric,
            "run", "peak", "final", "steps to baseline peak",
            "baseline", self.baseline_peak, self.baseline_final, self.baseline_steps_to_peak,
            "rlep", self.rlep_peak, self.rlep_final, opt(self.rlep_steps_to_baseline_peak),
            speed,
        )
    }
}
