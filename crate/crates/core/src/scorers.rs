//! Corpus quality metrics (WER, BLEU, chrF) and latency metrics (AL, DAL).
//!
//! Corpus statistics are integer sums, so per-sentence work can be spread
//! over an [`Exec`] and merged in any order with identical results.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use crate::parallel::Exec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("{refs} references but {hyps} hypotheses")]
    LengthMismatch { refs: usize, hyps: usize },
    #[error("reference {index} is empty")]
    EmptyReference { index: usize },
    #[error("no hypothesis tokens in corpus")]
    EmptyCorpus,
    #[error("invalid delay sequence: {0}")]
    InvalidDelays(String),
}

fn check_lengths<R, H>(refs: &[R], hyps: &[H]) -> Result<(), ScoreError> {
    if refs.len() != hyps.len() {
        return Err(ScoreError::LengthMismatch { refs: refs.len(), hyps: hyps.len() });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq)]
enum ReportValue {
    Num(f64),
    Text(String),
}

/// Ordered key/value report. Numbers print with three decimals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreReport {
    entries: Vec<(String, ReportValue)>,
}

impl ScoreReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &str, value: f64) -> &mut Self {
        self.entries.push((key.to_string(), ReportValue::Num(value)));
        self
    }

    pub fn push_label(&mut self, key: &str, value: &str) -> &mut Self {
        self.entries.push((key.to_string(), ReportValue::Text(value.to_string())));
        self
    }

    pub fn extend(&mut self, other: &ScoreReport) -> &mut Self {
        self.entries.extend(other.entries.iter().cloned());
        self
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.iter().find_map(|(k, v)| match v {
            ReportValue::Num(x) if k == key => Some(*x),
            _ => None,
        })
    }

    pub fn label(&self, key: &str) -> Option<&str> {
        self.entries.iter().find_map(|(k, v)| match v {
            ReportValue::Text(s) if k == key => Some(s.as_str()),
            _ => None,
        })
    }

    fn pairs(&self) -> impl Iterator<Item = String> + '_ {
        self.entries.iter().map(|(k, v)| match v {
            ReportValue::Num(x) => format!("{k}={x:.3}"),
            ReportValue::Text(s) => format!("{k}={s}"),
        })
    }

    /// One `key=value` per line.
    pub fn to_flat(&self) -> String {
        self.pairs().map(|p| p + "\n").collect()
    }

    /// All pairs on a single space-separated line.
    pub fn to_record(&self) -> String {
        self.pairs().collect::<Vec<_>>().join(" ")
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_flat())
    }
}

// ---------------------------------------------------------------------------
// WER

/// Edit counts from one alignment (or summed over a corpus).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: u64,
    pub insertions: u64,
    pub deletions: u64,
    pub ref_words: u64,
}

impl EditCounts {
    pub fn edits(&self) -> u64 {
        self.substitutions + self.insertions + self.deletions
    }

    fn merge(self, o: EditCounts) -> EditCounts {
        EditCounts {
            substitutions: self.substitutions + o.substitutions,
            insertions: self.insertions + o.insertions,
            deletions: self.deletions + o.deletions,
            ref_words: self.ref_words + o.ref_words,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WerReport {
    pub substitutions: u64,
    pub insertions: u64,
    pub deletions: u64,
    pub ref_words: u64,
    pub wer: f64,
}

impl WerReport {
    pub fn report(&self) -> ScoreReport {
        let mut r = ScoreReport::new();
        r.push("wer", self.wer);
        r
    }
}

/// Levenshtein alignment with unit costs. The backtrace prefers the
/// diagonal (match or substitution), then insertion, then deletion.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let width = m + 1;
    let mut cost = vec![0u32; (n + 1) * width];
    for (j, c) in cost[..width].iter_mut().enumerate() {
        *c = j as u32;
    }
    for i in 1..=n {
        cost[i * width] = i as u32;
        for j in 1..=m {
            let sub = cost[(i - 1) * width + j - 1] + u32::from(reference[i - 1] != hypothesis[j - 1]);
            let ins = cost[i * width + j - 1] + 1;
            let del = cost[(i - 1) * width + j] + 1;
            cost[i * width + j] = sub.min(ins).min(del);
        }
    }
    let mut counts = EditCounts { ref_words: n as u64, ..Default::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * width + j];
        if i > 0 && j > 0 {
            let differs = reference[i - 1] != hypothesis[j - 1];
            if here == cost[(i - 1) * width + j - 1] + u32::from(differs) {
                counts.substitutions += u64::from(differs);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && here == cost[i * width + j - 1] + 1 {
            counts.insertions += 1;
            j -= 1;
        } else {
            counts.deletions += 1;
            i -= 1;
        }
    }
    counts
}

pub fn wer<S: AsRef<str> + Sync>(refs: &[S], hyps: &[S]) -> Result<WerReport, ScoreError> {
    wer_with(refs, hyps, Exec::default())
}

pub fn wer_with<R, H>(refs: &[R], hyps: &[H], exec: Exec) -> Result<WerReport, ScoreError>
where
    R: AsRef<str> + Sync,
    H: AsRef<str> + Sync,
{
    check_lengths(refs, hyps)?;
    if let Some(index) = refs.iter().position(|r| r.as_ref().split_whitespace().next().is_none()) {
        return Err(ScoreError::EmptyReference { index });
    }
    let total = exec
        .map_range(refs.len(), |i| {
            let r: Vec<&str> = refs[i].as_ref().split_whitespace().collect();
            let h: Vec<&str> = hyps[i].as_ref().split_whitespace().collect();
            align(&r, &h)
        })
        .into_iter()
        .fold(EditCounts::default(), EditCounts::merge);
    Ok(WerReport {
        substitutions: total.substitutions,
        insertions: total.insertions,
        deletions: total.deletions,
        ref_words: total.ref_words,
        wer: total.edits() as f64 / total.ref_words as f64,
    })
}

// ---------------------------------------------------------------------------
// BLEU

pub const BLEU_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum BleuTokenizer {
    #[default]
    Word13a,
    Char,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Smoothing {
    None,
    /// The k-th zero precision becomes 1 / (2^k · hypothesis n-gram count).
    #[default]
    ExpFloor,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuOptions {
    pub tokenizer: BleuTokenizer,
    pub smoothing: Smoothing,
}

impl BleuOptions {
    /// Character tokenization for targets written without spaces.
    pub fn for_language(lang: &str) -> Self {
        let tokenizer = match lang {
            "zh" | "ja" => BleuTokenizer::Char,
            _ => BleuTokenizer::Word13a,
        };
        Self { tokenizer, ..Self::default() }
    }
}

/// Sufficient statistics of corpus BLEU.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [u64; BLEU_ORDER],
    pub totals: [u64; BLEU_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    fn merge(mut self, o: BleuStats) -> BleuStats {
        for n in 0..BLEU_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// 0 to 100.
    pub bleu: f64,
    /// Fractions in [0, 1], after smoothing.
    pub precisions: [f64; BLEU_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: u64,
    pub ref_len: u64,
    pub stats: BleuStats,
}

impl BleuReport {
    pub fn report(&self) -> ScoreReport {
        let mut r = ScoreReport::new();
        r.push("bleu", self.bleu).push("bp", self.brevity_penalty);
        for (n, p) in self.precisions.iter().enumerate() {
            r.push(&format!("p{}", n + 1), 100.0 * p);
        }
        r
    }
}

fn tok13a_rules() -> &'static [(Regex, &'static str); 4] {
    static RULES: OnceLock<[(Regex, &'static str); 4]> = OnceLock::new();
    RULES.get_or_init(|| {
        [
            (Regex::new(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])").unwrap(), " ${1} "),
            (Regex::new(r"([^0-9])([\.,])").unwrap(), "${1} ${2} "),
            (Regex::new(r"([\.,])([^0-9])").unwrap(), " ${1} ${2}"),
            (Regex::new(r"([0-9])(-)").unwrap(), "${1} ${2} "),
        ]
    })
}

/// The mteval-v13a tokenization used by standard corpus BLEU.
pub fn tokenize_13a(line: &str) -> Vec<String> {
    let mut s = line.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if s.contains('&') {
        s = s.replace("&quot;", "\"").replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">");
    }
    let mut s = format!(" {s} ");
    for (re, rep) in tok13a_rules() {
        s = re.replace_all(&s, *rep).into_owned();
    }
    s.split_whitespace().map(str::to_string).collect()
}

pub fn tokenize(line: &str, tokenizer: BleuTokenizer) -> Vec<String> {
    match tokenizer {
        BleuTokenizer::Word13a => tokenize_13a(line),
        BleuTokenizer::Char => line.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and hypothesis total for one n-gram order.
fn clipped<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize) -> (u64, u64) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matches = h.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum();
    (matches, hyp.len().saturating_sub(n - 1) as u64)
}

pub fn bleu_sentence_stats(reference: &str, hypothesis: &str, tokenizer: BleuTokenizer) -> BleuStats {
    let r = tokenize(reference, tokenizer);
    let h = tokenize(hypothesis, tokenizer);
    let mut s = BleuStats { hyp_len: h.len() as u64, ref_len: r.len() as u64, ..Default::default() };
    for n in 1..=BLEU_ORDER {
        let (m, t) = clipped(&h, &r, n);
        s.matches[n - 1] = m;
        s.totals[n - 1] = t;
    }
    s
}

/// Score accumulated statistics.
pub fn bleu_from_stats(stats: &BleuStats, smoothing: Smoothing) -> Result<BleuReport, ScoreError> {
    if stats.hyp_len == 0 {
        return Err(ScoreError::EmptyCorpus);
    }
    let mut precisions = [0.0; BLEU_ORDER];
    let mut zeros = 0;
    for (n, p) in precisions.iter_mut().enumerate() {
        let total = stats.totals[n];
        if total == 0 {
            continue;
        }
        *p = if stats.matches[n] > 0 {
            stats.matches[n] as f64 / total as f64
        } else if smoothing == Smoothing::ExpFloor {
            zeros += 1;
            1.0 / (2f64.powi(zeros) * total as f64)
        } else {
            0.0
        };
    }
    let brevity_penalty =
        if stats.hyp_len < stats.ref_len { (1.0 - stats.ref_len as f64 / stats.hyp_len as f64).exp() } else { 1.0 };
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / BLEU_ORDER as f64;
        100.0 * brevity_penalty * mean_log.exp()
    };
    Ok(BleuReport { bleu, precisions, brevity_penalty, hyp_len: stats.hyp_len, ref_len: stats.ref_len, stats: *stats })
}

pub fn bleu<S: AsRef<str> + Sync>(refs: &[S], hyps: &[S], opts: BleuOptions) -> Result<BleuReport, ScoreError> {
    bleu_with(refs, hyps, opts, Exec::default())
}

pub fn bleu_with<R, H>(refs: &[R], hyps: &[H], opts: BleuOptions, exec: Exec) -> Result<BleuReport, ScoreError>
where
    R: AsRef<str> + Sync,
    H: AsRef<str> + Sync,
{
    check_lengths(refs, hyps)?;
    let stats = exec
        .map_range(refs.len(), |i| bleu_sentence_stats(refs[i].as_ref(), hyps[i].as_ref(), opts.tokenizer))
        .into_iter()
        .fold(BleuStats::default(), BleuStats::merge);
    bleu_from_stats(&stats, opts.smoothing)
}

// ---------------------------------------------------------------------------
// chrF

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChrfOptions {
    pub order: usize,
    pub beta: f64,
}

impl Default for ChrfOptions {
    fn default() -> Self {
        Self { order: 6, beta: 2.0 }
    }
}

/// Per-order character n-gram statistics: (hypothesis, reference, matched).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChrfStats {
    pub orders: Vec<[u64; 3]>,
}

impl ChrfStats {
    fn merge(mut self, o: ChrfStats) -> ChrfStats {
        if self.orders.len() < o.orders.len() {
            self.orders.resize(o.orders.len(), [0; 3]);
        }
        for (a, b) in self.orders.iter_mut().zip(&o.orders) {
            for k in 0..3 {
                a[k] += b[k];
            }
        }
        self
    }
}

pub fn chrf_sentence_stats(reference: &str, hypothesis: &str, order: usize) -> ChrfStats {
    let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    let h: Vec<char> = hypothesis.chars().filter(|c| !c.is_whitespace()).collect();
    let orders = (1..=order)
        .map(|n| {
            let (matched, hyp_total) = clipped(&h, &r, n);
            [hyp_total, r.len().saturating_sub(n - 1) as u64, matched]
        })
        .collect();
    ChrfStats { orders }
}

/// 0 to 100. Orders without reference n-grams are left out of the average.
pub fn chrf_from_stats(stats: &ChrfStats, beta: f64) -> f64 {
    let b2 = beta * beta;
    let scores: Vec<f64> = stats
        .orders
        .iter()
        .filter(|o| o[1] > 0)
        .map(|&[hyp, reference, matched]| {
            let p = if hyp > 0 { matched as f64 / hyp as f64 } else { 0.0 };
            let r = matched as f64 / reference as f64;
            let denom = b2 * p + r;
            if denom > 0.0 {
                (1.0 + b2) * p * r / denom
            } else {
                0.0
            }
        })
        .collect();
    if scores.is_empty() {
        return 0.0;
    }
    100.0 * scores.iter().sum::<f64>() / scores.len() as f64
}

pub fn chrf<S: AsRef<str> + Sync>(refs: &[S], hyps: &[S]) -> Result<f64, ScoreError> {
    chrf_with(refs, hyps, ChrfOptions::default(), Exec::default())
}

pub fn chrf_with<R, H>(refs: &[R], hyps: &[H], opts: ChrfOptions, exec: Exec) -> Result<f64, ScoreError>
where
    R: AsRef<str> + Sync,
    H: AsRef<str> + Sync,
{
    check_lengths(refs, hyps)?;
    let stats = exec
        .map_range(refs.len(), |i| chrf_sentence_stats(refs[i].as_ref(), hyps[i].as_ref(), opts.order))
        .into_iter()
        .fold(ChrfStats::default(), ChrfStats::merge);
    Ok(chrf_from_stats(&stats, opts.beta))
}

// ---------------------------------------------------------------------------
// Latency

/// Per-token delays in source units (tokens, segments or milliseconds) with
/// the total source length in the same unit.
#[derive(Debug, Clone, PartialEq)]
pub struct DelaySequence {
    delays: Vec<f64>,
    src_len: f64,
}

impl DelaySequence {
    /// Requires finite, non-decreasing delays with `1 <= d_i <= src_len`.
    pub fn new(delays: Vec<f64>, src_len: f64) -> Result<Self, ScoreError> {
        if !(src_len.is_finite() && src_len > 0.0) {
            return Err(ScoreError::InvalidDelays(format!("source length {src_len}")));
        }
        for (i, &d) in delays.iter().enumerate() {
            if !(d.is_finite() && (1.0..=src_len).contains(&d)) {
                return Err(ScoreError::InvalidDelays(format!("d_{} = {d} outside [1, {src_len}]", i + 1)));
            }
            if i > 0 && d < delays[i - 1] {
                return Err(ScoreError::InvalidDelays(format!("d_{} = {d} decreases", i + 1)));
            }
        }
        Ok(Self { delays, src_len })
    }

    pub fn from_counts(delays: &[usize], src_len: usize) -> Result<Self, ScoreError> {
        Self::new(delays.iter().map(|&d| d as f64).collect(), src_len as f64)
    }

    pub fn delays(&self) -> &[f64] {
        &self.delays
    }

    pub fn src_len(&self) -> f64 {
        self.src_len
    }

    pub fn tgt_len(&self) -> usize {
        self.delays.len()
    }

    /// (i-1)/γ for zero-based `i`, written to stay exact on integer inputs.
    fn ideal(&self, i: usize) -> f64 {
        i as f64 * self.src_len / self.delays.len() as f64
    }
}

/// Average lagging. An empty target scores 0.
pub fn average_lagging(d: &DelaySequence) -> f64 {
    if d.delays.is_empty() {
        return 0.0;
    }
    let tau = d.delays.iter().position(|&x| x >= d.src_len).map_or(d.delays.len(), |i| i + 1);
    let sum: f64 = (0..tau).map(|i| d.delays[i] - d.ideal(i)).sum();
    sum / tau as f64
}

/// Differentiable average lagging. An empty target scores 0.
pub fn differentiable_average_lagging(d: &DelaySequence) -> f64 {
    if d.delays.is_empty() {
        return 0.0;
    }
    let step = d.src_len / d.delays.len() as f64;
    let mut prev = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for (i, &x) in d.delays.iter().enumerate() {
        let adjusted = if i == 0 { x } else { x.max(prev + step) };
        sum += adjusted - d.ideal(i);
        prev = adjusted;
    }
    sum / d.delays.len() as f64
}
