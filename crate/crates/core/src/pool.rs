//! Experience collection and the replay pool of verified successes.
//!
//! Pool file: one record per line, tab separated, no header (an empty pool is
//! an empty file):
//!
//! ```text
//! <question_id>\t<response tokens, space separated>\t<reward>\t<source_checkpoint>\t<collection_step>
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, TokenId};
use crate::rng::fork_seeds;
use crate::scalar::Scalar;
use crate::tasks::{is_correct, join_tokens, parse_tokens, TaskSet};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExperienceRecord {
    pub question_id: String,
    pub response_tokens: Vec<TokenId>,
    /// Always 1: only verified successes are stored.
    pub reward: u8,
    pub source_checkpoint: String,
    pub collection_step: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExperiencePool {
    by_question: BTreeMap<String, Vec<ExperienceRecord>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollectOptions {
    pub candidates_per_question: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub min_paths: usize,
    pub max_len: usize,
    pub source_checkpoint: String,
    pub collection_step: u64,
}

impl Default for CollectOptions {
    fn default() -> Self {
        Self {
            candidates_per_question: 64,
            temperature: 0.7,
            top_p: 0.95,
            min_paths: 2,
            max_len: 16,
            source_checkpoint: String::new(),
            collection_step: 0,
        }
    }
}

impl CollectOptions {
    pub fn validate(&self) -> Result<()> {
        if self.min_paths == 0 {
            return Err(Error::Config("min_paths must be >= 1".into()));
        }
        if self.candidates_per_question < self.min_paths {
            return Err(Error::Config(format!(
                "candidates ({}) must be >= min_paths ({})",
                self.candidates_per_question, self.min_paths
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be >= 1".into()));
        }
        if self.source_checkpoint.contains(['\t', '\n']) {
            return Err(Error::Config("source_checkpoint label may not contain tabs or newlines".into()));
        }
        Ok(())
    }
}

/// Samples candidates for every task, keeps verified-correct distinct
/// responses, and retains questions with at least `min_paths` of them.
pub fn collect<T: Scalar, R: Rng + ?Sized>(
    seed_params: &PolicyParams<T>,
    taskset: &TaskSet,
    opts: &CollectOptions,
    rng: &mut R,
) -> Result<ExperiencePool> {
    opts.validate()?;
    if taskset.is_empty() {
        return Err(Error::Config("cannot collect from an empty taskset".into()));
    }
    let seeds = fork_seeds(rng, taskset.len());
    let temperature = T::lit(opts.temperature);
    let top_p = T::lit(opts.top_p);
    let per_question: Vec<Vec<ExperienceRecord>> = taskset
        .tasks
        .par_iter()
        .zip(seeds)
        .map(|(task, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut seen = HashSet::new();
            let mut kept = Vec::new();
            for _ in 0..opts.candidates_per_question {
                let s = seed_params.sample(&task.prompt, opts.max_len, temperature, top_p, &mut rng)?;
                if is_correct(task, &s.tokens) && seen.insert(s.tokens.clone()) {
                    kept.push(ExperienceRecord {
                        question_id: task.id.clone(),
                        response_tokens: s.tokens,
                        reward: 1,
                        source_checkpoint: opts.source_checkpoint.clone(),
                        collection_step: opts.collection_step,
                    });
                }
            }
            Ok(kept)
        })
        .collect::<Result<_>>()?;

    let mut pool = ExperiencePool::default();
    for (task, records) in taskset.tasks.iter().zip(per_question) {
        if records.len() >= opts.min_paths {
            pool.by_question.entry(task.id.clone()).or_default().extend(records);
        }
    }
    Ok(pool)
}

/// Draws `m` records for one question: without replacement when the
/// question holds at least `m`, with replacement otherwise.
pub fn sample_replay<'a, R: Rng + ?Sized>(
    pool: &'a ExperiencePool,
    question_id: &str,
    m: usize,
    rng: &mut R,
) -> Result<Vec<&'a ExperienceRecord>> {
    let records = pool.records(question_id).ok_or_else(|| Error::MissingQuestion(question_id.to_string()))?;
    if m == 0 {
        return Ok(Vec::new());
    }
    if records.len() >= m {
        Ok(index::sample(rng, records.len(), m).into_iter().map(|i| &records[i]).collect())
    } else {
        Ok((0..m).map(|_| &records[rng.gen_range(0..records.len())]).collect())
    }
}

impl ExperiencePool {
    pub fn records(&self, question_id: &str) -> Option<&[ExperienceRecord]> {
        self.by_question.get(question_id).map(Vec::as_slice)
    }

    pub fn contains(&self, question_id: &str) -> bool {
        self.by_question.contains_key(question_id)
    }

    pub fn questions(&self) -> impl Iterator<Item = &str> {
        self.by_question.keys().map(String::as_str)
    }

    pub fn num_questions(&self) -> usize {
        self.by_question.len()
    }

    pub fn num_records(&self) -> usize {
        self.by_question.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_question.is_empty()
    }

    /// Adds a record; used by tests and tools that assemble pools by hand.
    /// Exact duplicates are dropped.
    pub fn insert(&mut self, record: ExperienceRecord) {
        let list = self.by_question.entry(record.question_id.clone()).or_default();
        if !list.iter().any(|r| r.response_tokens == record.response_tokens) {
            list.push(record);
        }
    }

    /// Keeps only the listed questions.
    pub fn retain_questions(&mut self, keep: impl Fn(&str) -> bool) {
        self.by_question.retain(|q, _| keep(q));
    }

    /// Every record has reward 1, verifies against its task, and no question
    /// holds duplicate responses or fewer than `min_paths` records.
    pub fn check_integrity(&self, taskset: &TaskSet, min_paths: usize) -> Result<()> {
        for (qid, records) in &self.by_question {
            let task = taskset
                .get(qid)
                .ok_or_else(|| Error::Integrity(format!("question {qid} is not in the taskset")))?;
            if records.len() < min_paths {
                return Err(Error::Integrity(format!("question {qid} has {} records, below min_paths {min_paths}", records.len())));
            }
            let mut seen = HashSet::new();
            for r in records {
                if r.reward != 1 {
                    return Err(Error::Integrity(format!("question {qid}: stored reward {} is not 1", r.reward)));
                }
                if !is_correct(task, &r.response_tokens) {
                    return Err(Error::Integrity(format!(
                        "question {qid}: response [{}] does not verify",
                        join_tokens(&r.response_tokens)
                    )));
                }
                if !seen.insert(&r.response_tokens) {
                    return Err(Error::Integrity(format!("question {qid}: duplicate response")));
                }
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in self.by_question.values().flatten() {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                r.question_id,
                join_tokens(&r.response_tokens),
                r.reward,
                r.source_checkpoint,
                r.collection_step
            )?;
        }
        Ok(())
    }

    /// Parses records without checking them against tasks.
    pub fn read_unverified<R: BufRead>(r: R) -> Result<Self> {
        let mut by_question: BTreeMap<String, Vec<ExperienceRecord>> = BTreeMap::new();
        for (i, line) in r.lines().enumerate() {
            let line_no = i + 1;
            let corrupt = |msg: String| Error::CorruptPool { line: line_no, msg };
            let line = line.map_err(|e| corrupt(e.to_string()))?;
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(corrupt(format!("expected 5 tab-separated fields, found {}", cols.len())));
            }
            if cols[0].is_empty() {
                return Err(corrupt("empty question id".into()));
            }
            let response_tokens = parse_tokens(cols[1]).map_err(|e| corrupt(format!("response tokens: {e}")))?;
            if response_tokens.is_empty() {
                return Err(corrupt("empty response".into()));
            }
            let reward = cols[2].parse().map_err(|e| corrupt(format!("reward: {e}")))?;
            let collection_step = cols[4].parse().map_err(|e| corrupt(format!("collection_step: {e}")))?;
            by_question.entry(cols[0].to_string()).or_default().push(ExperienceRecord {
                question_id: cols[0].to_string(),
                response_tokens,
                reward,
                source_checkpoint: cols[3].to_string(),
                collection_step,
            });
        }
        Ok(Self { by_question })
    }

    /// Parses and re-verifies every record against `taskset`.
    pub fn read_from<R: BufRead>(r: R, taskset: &TaskSet) -> Result<Self> {
        let pool = Self::read_unverified(r)?;
        pool.check_integrity(taskset, 1)?;
        Ok(pool)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, taskset: &TaskSet) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file), taskset)
    }
}
