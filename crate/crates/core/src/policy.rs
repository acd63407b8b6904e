//! Fixed-order n-gram softmax policy.
//!
//! The next-token distribution is `softmax(logits[row])`, where `row` encodes
//! the last `context_len` symbols of `prompt ++ response`. Each symbol is tagged
//! with its side (prompt or response), so the same token id reads differently
//! depending on where it sits. A dedicated pad symbol fills missing history.
//!
//! Symbol alphabet (size `2 * V + 1`): pad is `0`, prompt token `t` is `1 + t`,
//! response token `t` is `1 + V + t`. A window `s_1 .. s_c` (oldest first) maps
//! to row `sum_j s_j * A^(c - j)`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type TokenId = u32;

const MAX_LOGITS: usize = 1 << 26;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Vocab {
    size: u32,
}

impl Vocab {
    pub fn new(size: u32) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidParams(format!("vocab size must be >= 2, got {size}")));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    /// END is always the last id.
    pub fn end(&self) -> TokenId {
        self.size - 1
    }

    pub fn contains(&self, token: TokenId) -> bool {
        token < self.size
    }

    pub fn check(&self, token: TokenId) -> Result<()> {
        if self.contains(token) {
            Ok(())
        } else {
            Err(Error::InvalidToken { token, vocab: self.size })
        }
    }
}

/// Output of [`PolicyParams::sample`].
#[derive(Clone, Debug, PartialEq)]
pub struct SampledSequence<T> {
    pub tokens: Vec<TokenId>,
    /// Log-probability of each emitted token under the untempered, untruncated
    /// policy, in nats.
    pub per_token_logprob: Vec<T>,
    /// Hit `max_len` without emitting END.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams<T> {
    vocab: Vocab,
    context_len: usize,
    rows: usize,
    logits: Vec<T>,
}

impl<T: Scalar> PolicyParams<T> {
    /// All-zero logits, i.e. the uniform policy.
    pub fn zeros(vocab: Vocab, context_len: usize) -> Result<Self> {
        let rows = row_count(vocab, context_len)?;
        Ok(Self { vocab, context_len, rows, logits: vec![T::zero(); rows * vocab.size as usize] })
    }

    pub fn from_logits(vocab: Vocab, context_len: usize, logits: Vec<T>) -> Result<Self> {
        let rows = row_count(vocab, context_len)?;
        if logits.len() != rows * vocab.size as usize {
            return Err(Error::InvalidParams(format!(
                "expected {} logits, got {}",
                rows * vocab.size as usize,
                logits.len()
            )));
        }
        if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
            return Err(Error::InvalidParams(format!("non-finite logit at index {i}")));
        }
        Ok(Self { vocab, context_len, rows, logits })
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn num_rows(&self) -> usize {
        self.rows
    }

    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [T] {
        &mut self.logits
    }

    pub fn row(&self, row: usize) -> &[T] {
        let v = self.vocab.size as usize;
        &self.logits[row * v..(row + 1) * v]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [T] {
        let v = self.vocab.size as usize;
        &mut self.logits[row * v..(row + 1) * v]
    }

    fn alphabet(&self) -> usize {
        2 * self.vocab.size as usize + 1
    }

    fn push_symbol(&self, row: usize, symbol: usize) -> usize {
        (row * self.alphabet() + symbol) % self.rows
    }

    fn prompt_row(&self, prompt: &[TokenId]) -> Result<usize> {
        let mut row = 0;
        for &t in prompt {
            self.vocab.check(t)?;
            row = self.push_symbol(row, 1 + t as usize);
        }
        Ok(row)
    }

    fn push_response(&self, row: usize, token: TokenId) -> usize {
        self.push_symbol(row, 1 + self.vocab.size as usize + token as usize)
    }

    /// Row index for the context `prompt ++ response_prefix`.
    pub fn context_row(&self, prompt: &[TokenId], response_prefix: &[TokenId]) -> Result<usize> {
        let mut row = self.prompt_row(prompt)?;
        for &t in response_prefix {
            self.vocab.check(t)?;
            row = self.push_response(row, t);
        }
        Ok(row)
    }

    /// Row visited before emitting each response token.
    pub fn context_rows(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<usize>> {
        let mut row = self.prompt_row(prompt)?;
        let mut rows = Vec::with_capacity(response.len());
        for &t in response {
            self.vocab.check(t)?;
            rows.push(row);
            row = self.push_response(row, t);
        }
        Ok(rows)
    }

    fn checked_row(&self, row: usize) -> Result<&[T]> {
        let logits = self.row(row);
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidParams(format!("non-finite logits in row {row}")));
        }
        Ok(logits)
    }

    /// Temperature-1 softmax of one row.
    pub fn softmax_row(&self, row: usize) -> Vec<T> {
        softmax(self.row(row), T::one())
    }

    /// Exact log-softmax of one row.
    pub fn log_softmax_row(&self, row: usize) -> Vec<T> {
        log_softmax(self.row(row))
    }

    /// Decoding distribution at a row: tempered softmax followed by nucleus
    /// truncation at `top_p`.
    pub fn dist_at_row(&self, row: usize, temperature: T, top_p: T) -> Result<Vec<T>> {
        if !(temperature > T::zero()) || !temperature.is_finite() {
            return Err(Error::InvalidParams(format!("temperature must be positive, got {temperature}")));
        }
        if !(top_p > T::zero() && top_p <= T::one()) {
            return Err(Error::InvalidParams(format!("top_p must be in (0, 1], got {top_p}")));
        }
        let probs = softmax(self.checked_row(row)?, temperature);
        Ok(nucleus(probs, top_p))
    }

    pub fn next_token_dist(
        &self,
        prompt: &[TokenId],
        response_prefix: &[TokenId],
        temperature: T,
        top_p: T,
    ) -> Result<Vec<T>> {
        let row = self.context_row(prompt, response_prefix)?;
        self.dist_at_row(row, temperature, top_p)
    }

    /// Autoregressive sampling until END or `max_len` tokens.
    ///
    /// Recorded log-probs are those of the untempered, untruncated policy.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        prompt: &[TokenId],
        max_len: usize,
        temperature: T,
        top_p: T,
        rng: &mut R,
    ) -> Result<SampledSequence<T>> {
        if max_len == 0 {
            return Err(Error::InvalidParams("max_len must be >= 1".into()));
        }
        let end = self.vocab.end();
        let plain = temperature == T::one() && top_p >= T::one();
        let mut row = self.prompt_row(prompt)?;
        let mut tokens = Vec::new();
        let mut per_token_logprob = Vec::new();
        while tokens.len() < max_len {
            let dist = if plain {
                softmax(self.checked_row(row)?, T::one())
            } else {
                self.dist_at_row(row, temperature, top_p)?
            };
            let token = draw(&dist, rng.gen::<f64>());
            per_token_logprob.push(log_softmax_at(self.row(row), token as usize));
            tokens.push(token);
            if token == end {
                return Ok(SampledSequence { tokens, per_token_logprob, truncated: false });
            }
            row = self.push_response(row, token);
        }
        Ok(SampledSequence { tokens, per_token_logprob, truncated: true })
    }

    /// Greedy decoding on the temperature-1 distribution; ties go to the
    /// lowest token id.
    pub fn greedy(&self, prompt: &[TokenId], max_len: usize) -> Result<Vec<TokenId>> {
        let end = self.vocab.end();
        let mut row = self.prompt_row(prompt)?;
        let mut tokens = Vec::new();
        while tokens.len() < max_len {
            let logits = self.checked_row(row)?;
            let mut best = 0;
            for (i, l) in logits.iter().enumerate() {
                if *l > logits[best] {
                    best = i;
                }
            }
            let token = best as TokenId;
            tokens.push(token);
            if token == end {
                break;
            }
            row = self.push_response(row, token);
        }
        Ok(tokens)
    }

    /// Per-token `log pi(o_t | prompt, o_<t)` in nats.
    pub fn logprob(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<T>> {
        let rows = self.context_rows(prompt, response)?;
        Ok(rows
            .iter()
            .zip(response)
            .map(|(&row, &t)| log_softmax_at(self.row(row), t as usize))
            .collect())
    }

    /// Gradient of `sum_t log pi(o_t | ...)` with respect to the logits: for
    /// each visited row, `onehot(emitted) - softmax(row)`.
    pub fn grad_logprob(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<SparseGrad<T>> {
        let rows = self.context_rows(prompt, response)?;
        let mut grad = SparseGrad::new(self.vocab.size as usize);
        for (&row, &t) in rows.iter().zip(response) {
            grad.add_logprob_grad(row, t as usize, &self.softmax_row(row), T::one());
        }
        Ok(grad)
    }

    /// Adds `scale * grad` to the logits.
    pub fn apply(&mut self, grad: &SparseGrad<T>, scale: T) {
        for (row, g) in grad.iter() {
            for (l, &gi) in self.row_mut(row).iter_mut().zip(g) {
                *l = *l + scale * gi;
            }
        }
    }

    /// Writes the tensor file.
    ///
    /// ```text
    /// rlep-policy v1
    /// vocab_size <V>
    /// context_len <c>
    /// rows <R>
    /// <R lines of V space-separated values>
    /// ```
    ///
    /// Values are printed as the shortest decimal that parses back to the same
    /// `f64`, so files round-trip bit-exactly.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "rlep-policy v1")?;
        writeln!(w, "vocab_size {}", self.vocab.size)?;
        writeln!(w, "context_len {}", self.context_len)?;
        writeln!(w, "rows {}", self.rows)?;
        write_matrix(&mut w, &self.logits, self.vocab.size as usize)
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        expect_line(&mut lines, "rlep-policy v1", "policy")?;
        let vocab = Vocab::new(header_value(&mut lines, "vocab_size", "policy")? as u32)?;
        let context_len = header_value(&mut lines, "context_len", "policy")?;
        let rows = header_value(&mut lines, "rows", "policy")?;
        let expected = row_count(vocab, context_len)?;
        if rows != expected {
            return Err(Error::parse("policy", format!("rows {rows} but geometry implies {expected}")));
        }
        let logits = read_matrix(&mut lines, rows, vocab.size as usize, "policy")?;
        Self::from_logits(vocab, context_len, logits)
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

fn row_count(vocab: Vocab, context_len: usize) -> Result<usize> {
    if context_len == 0 {
        return Err(Error::InvalidParams("context_len must be >= 1".into()));
    }
    let alphabet = 2 * vocab.size as usize + 1;
    let mut rows: usize = 1;
    for _ in 0..context_len {
        rows = rows
            .checked_mul(alphabet)
            .filter(|r| r.saturating_mul(vocab.size as usize) <= MAX_LOGITS)
            .ok_or_else(|| {
                Error::InvalidParams(format!(
                    "vocab {} with context_len {context_len} exceeds the table size limit",
                    vocab.size
                ))
            })?;
    }
    Ok(rows)
}

pub(crate) fn softmax<T: Scalar>(logits: &[T], temperature: T) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let z: T = out.iter().copied().sum();
    for p in &mut out {
        *p = *p / z;
    }
    out
}

pub(crate) fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln();
    logits.iter().map(|&l| l - max - lse).collect()
}

fn log_softmax_at<T: Scalar>(logits: &[T], index: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln();
    logits[index] - max - lse
}

/// Keeps the smallest descending-probability prefix whose mass reaches
/// `top_p`, then renormalizes. Equal probabilities are ordered by token id.
fn nucleus<T: Scalar>(probs: Vec<T>, top_p: T) -> Vec<T> {
    if top_p >= T::one() {
        return probs;
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let mut kept = vec![T::zero(); probs.len()];
    let mut mass = T::zero();
    for &i in &order {
        kept[i] = probs[i];
        mass = mass + probs[i];
        if mass >= top_p {
            break;
        }
    }
    for p in &mut kept {
        *p = *p / mass;
    }
    kept
}

/// Inverse-CDF draw; falls back to the last token with non-zero mass.
fn draw<T: Scalar>(dist: &[T], u: f64) -> TokenId {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in dist.iter().enumerate() {
        let p = p.as_f64();
        if p > 0.0 {
            last = i;
            acc += p;
            if u < acc {
                return i as TokenId;
            }
        }
    }
    last as TokenId
}

/// Gradient over policy logits that only stores visited rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGrad<T> {
    width: usize,
    rows: BTreeMap<usize, Vec<T>>,
}

impl<T: Scalar> SparseGrad<T> {
    pub fn new(width: usize) -> Self {
        Self { width, rows: BTreeMap::new() }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [T] {
        let width = self.width;
        self.rows.entry(row).or_insert_with(|| vec![T::zero(); width])
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.rows.get(&row).map_or(T::zero(), |r| r[col])
    }

    /// Rows in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.rows.iter().map(|(&r, v)| (r, v.as_slice()))
    }

    pub fn visited_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.keys().copied()
    }

    /// Adds `scale * (onehot(token) - probs)` to `row`.
    pub fn add_logprob_grad(&mut self, row: usize, token: usize, probs: &[T], scale: T) {
        let g = self.row_mut(row);
        for (gi, &p) in g.iter_mut().zip(probs) {
            *gi = *gi - scale * p;
        }
        g[token] = g[token] + scale;
    }

    pub fn add_scaled(&mut self, other: &SparseGrad<T>, scale: T) {
        for (row, g) in other.iter() {
            for (a, &b) in self.row_mut(row).iter_mut().zip(g) {
                *a = *a + scale * b;
            }
        }
    }

    pub fn scale(&mut self, k: T) {
        for g in self.rows.values_mut() {
            for x in g {
                *x = *x * k;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rows.values().flatten().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.rows.values().flatten().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    /// Dense copy with `num_rows * width` entries.
    pub fn to_dense(&self, num_rows: usize) -> Vec<T> {
        let mut out = vec![T::zero(); num_rows * self.width];
        for (row, g) in self.iter() {
            out[row * self.width..(row + 1) * self.width].copy_from_slice(g);
        }
        out
    }
}

pub(crate) fn write_matrix<W: Write, T: Scalar>(w: &mut W, values: &[T], width: usize) -> std::io::Result<()> {
    for chunk in values.chunks(width) {
        let line: Vec<String> = chunk.iter().map(|x| format!("{:?}", x.as_f64())).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

pub(crate) fn read_matrix<I, T>(lines: &mut I, rows: usize, width: usize, what: &str) -> Result<Vec<T>>
where
    I: Iterator<Item = std::io::Result<String>>,
    T: Scalar,
{
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(what, format!("missing row {r}")))?
            .map_err(|e| Error::parse(what, e))?;
        let before = out.len();
        for field in line.split_ascii_whitespace() {
            let x: f64 = field.parse().map_err(|e| Error::parse(what, format!("row {r}: {e}")))?;
            out.push(T::from_f64(x).ok_or_else(|| Error::parse(what, format!("row {r}: {x} out of range")))?);
        }
        if out.len() - before != width {
            return Err(Error::parse(what, format!("row {r} has {} values, expected {width}", out.len() - before)));
        }
    }
    Ok(out)
}

pub(crate) fn expect_line<I>(lines: &mut I, expected: &str, what: &str) -> Result<()>
where
    I: Iterator<Item = std::io::Result<String>>,
{
    match lines.next() {
        Some(Ok(l)) if l.trim_end() == expected => Ok(()),
        Some(Ok(l)) => Err(Error::parse(what, format!("expected {expected:?}, found {l:?}"))),
        Some(Err(e)) => Err(Error::parse(what, e)),
        None => Err(Error::parse(what, "empty file")),
    }
}

pub(crate) fn header_value<I>(lines: &mut I, key: &str, what: &str) -> Result<usize>
where
    I: Iterator<Item = std::io::Result<String>>,
{
    let line = lines
        .next()
        .ok_or_else(|| Error::parse(what, format!("missing {key}")))?
        .map_err(|e| Error::parse(what, e))?;
    let mut parts = line.split_ascii_whitespace();
    match (parts.next(), parts.next(), parts.next()) {
        (Some(k), Some(v), None) if k == key => v.parse().map_err(|e| Error::parse(what, format!("{key}: {e}"))),
        _ => Err(Error::parse(what, format!("expected `{key} <value>`, found {line:?}"))),
    }
}
