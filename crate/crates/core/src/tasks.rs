//! Synthetic tasks with exact, rule-based verification.
//!
//! Reserved ids, counted from the top of the vocab: END is `V-1`, then the
//! ModAdd, Copy and Reverse operator tokens at `V-2`, `V-3`, `V-4`. Operands
//! and payload symbols use ids `0 .. V-4`.
//!
//! Prompts: ModAdd is the triple `[ADD, a, b]` with answer `[(a+b) mod p, END]`;
//! Copy is `[COPY, x1..xk]` with answer `[x1..xk, END]`; Reverse is
//! `[REVERSE, x1..xk]` with answer `[xk..x1, END]`.
//!
//! Taskset file format, one record per line after a header line:
//!
//! ```text
//! # rlep-tasks v1 split=<train|eval> vocab_size=<V>
//! <id>\t<family>\t<prompt tokens, space separated>\t<answer tokens, space separated>
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::policy::{TokenId, Vocab};
use crate::scalar::Scalar;

pub const RESERVED_IDS: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskFamily {
    ModAdd,
    Copy,
    Reverse,
}

impl TaskFamily {
    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::ModAdd => "modadd",
            TaskFamily::Copy => "copy",
            TaskFamily::Reverse => "reverse",
        }
    }

    /// Operator token that opens every prompt of this family.
    pub fn operator(self, vocab: Vocab) -> TokenId {
        let end = vocab.end();
        match self {
            TaskFamily::ModAdd => end - 1,
            TaskFamily::Copy => end - 2,
            TaskFamily::Reverse => end - 3,
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "modadd" => Ok(TaskFamily::ModAdd),
            "copy" => Ok(TaskFamily::Copy),
            "reverse" => Ok(TaskFamily::Reverse),
            _ => Err(Error::Config(format!("unknown task family {s:?} (expected modadd, copy, reverse)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            _ => Err(Error::Config(format!("unknown split {s:?} (expected train or eval)"))),
        }
    }
}

/// Family-specific generation knobs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FamilyParams {
    pub modulus: u32,
    pub payload_len: usize,
}

impl Default for FamilyParams {
    fn default() -> Self {
        Self { modulus: 10, payload_len: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Task {
    pub id: String,
    pub family: TaskFamily,
    pub prompt: Vec<TokenId>,
    /// Canonical response, END-terminated.
    pub answer: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSet {
    pub split: Split,
    pub vocab: Vocab,
    pub tasks: Vec<Task>,
}

pub fn generate_taskset(
    family: TaskFamily,
    params: FamilyParams,
    count: usize,
    seed: u64,
    vocab: Vocab,
    split: Split,
) -> Result<TaskSet> {
    if count == 0 {
        return Err(Error::Config("count must be >= 1".into()));
    }
    if vocab.size() <= RESERVED_IDS {
        return Err(Error::Config(format!(
            "vocab size {} leaves no room for symbols after {RESERVED_IDS} reserved ids",
            vocab.size()
        )));
    }
    let symbols = vocab.size() - RESERVED_IDS;
    match family {
        TaskFamily::ModAdd if params.modulus < 2 || params.modulus > symbols => {
            return Err(Error::Config(format!(
                "modulus {} must be in 2..={symbols} for vocab size {}",
                params.modulus,
                vocab.size()
            )));
        }
        TaskFamily::Copy | TaskFamily::Reverse if params.payload_len == 0 => {
            return Err(Error::Config("payload_len must be >= 1".into()));
        }
        _ => {}
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let op = family.operator(vocab);
    let end = vocab.end();
    let tasks = (0..count)
        .map(|i| {
            let (prompt, answer) = match family {
                TaskFamily::ModAdd => {
                    let a = rng.gen_range(0..params.modulus);
                    let b = rng.gen_range(0..params.modulus);
                    (vec![op, a, b], vec![(a + b) % params.modulus, end])
                }
                TaskFamily::Copy | TaskFamily::Reverse => {
                    let payload: Vec<TokenId> = (0..params.payload_len).map(|_| rng.gen_range(0..symbols)).collect();
                    let mut answer = payload.clone();
                    if family == TaskFamily::Reverse {
                        answer.reverse();
                    }
                    answer.push(end);
                    let mut prompt = vec![op];
                    prompt.extend(payload);
                    (prompt, answer)
                }
            };
            Task { id: format!("{}-{}-{i:05}", split.name(), family.name()), family, prompt, answer }
        })
        .collect();
    Ok(TaskSet { split, vocab, tasks })
}

/// True iff `response`, cut at its first END, equals the task's answer.
/// Responses without END never verify.
pub fn is_correct(task: &Task, response: &[TokenId]) -> bool {
    let Some(&end) = task.answer.last() else { return false };
    match response.iter().position(|&t| t == end) {
        Some(i) => response[..=i] == task.answer[..],
        None => false,
    }
}

/// Binary verifiable reward.
pub fn verify<T: Scalar>(task: &Task, response: &[TokenId]) -> T {
    if is_correct(task, response) {
        T::one()
    } else {
        T::zero()
    }
}

/// Reward adjustment for responses that hit the length limit. Identity for
/// now: truncated responses already score 0 and no length penalty is applied.
pub fn shape_overlong<T: Scalar>(reward: T, _truncated: bool) -> T {
    reward
}

impl TaskSet {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for t in &self.tasks {
            if !seen.insert(t.id.as_str()) {
                return Err(Error::Config(format!("duplicate task id {}", t.id)));
            }
            for &tok in t.prompt.iter().chain(&t.answer) {
                self.vocab.check(tok)?;
            }
            if t.answer.last() != Some(&self.vocab.end()) || t.answer[..t.answer.len() - 1].contains(&self.vocab.end()) {
                return Err(Error::Config(format!("task {} answer must end with exactly one END", t.id)));
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# rlep-tasks v1 split={} vocab_size={}", self.split.name(), self.vocab.size())?;
        for t in &self.tasks {
            writeln!(w, "{}\t{}\t{}\t{}", t.id, t.family, join_tokens(&t.prompt), join_tokens(&t.answer))?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = match lines.next() {
            Some(Ok(h)) => h,
            Some(Err(e)) => return Err(Error::parse("taskset", e)),
            None => return Err(Error::parse("taskset", "empty file")),
        };
        let mut split = None;
        let mut vocab = None;
        let mut fields = header.split_ascii_whitespace();
        if fields.next() != Some("#") || fields.next() != Some("rlep-tasks") || fields.next() != Some("v1") {
            return Err(Error::parse("taskset", format!("bad header {header:?}")));
        }
        for kv in fields {
            match kv.split_once('=') {
                Some(("split", v)) => split = Some(v.parse::<Split>()?),
                Some(("vocab_size", v)) => {
                    vocab = Some(Vocab::new(v.parse().map_err(|e| Error::parse("taskset header", e))?)?)
                }
                _ => return Err(Error::parse("taskset", format!("unknown header field {kv:?}"))),
            }
        }
        let (Some(split), Some(vocab)) = (split, vocab) else {
            return Err(Error::parse("taskset", "header must carry split and vocab_size"));
        };
        let mut tasks = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::parse("taskset", e))?;
            if line.is_empty() {
                continue;
            }
            let lineno = i + 2;
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::parse("taskset", format!("line {lineno}: expected 4 tab-separated fields")));
            }
            tasks.push(Task {
                id: cols[0].to_string(),
                family: cols[1].parse()?,
                prompt: parse_tokens(cols[2]).map_err(|e| Error::parse("taskset", format!("line {lineno}: {e}")))?,
                answer: parse_tokens(cols[3]).map_err(|e| Error::parse("taskset", format!("line {lineno}: {e}")))?,
            });
        }
        let set = TaskSet { split, vocab, tasks };
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

pub(crate) fn join_tokens(tokens: &[TokenId]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

pub(crate) fn parse_tokens(s: &str) -> std::result::Result<Vec<TokenId>, std::num::ParseIntError> {
    s.split_ascii_whitespace().map(str::parse).collect()
}
