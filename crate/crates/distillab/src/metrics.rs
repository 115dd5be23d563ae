//! Evaluation and diagnosis math: ROUGE variants, novelty, copied spans,
//! leading bias, attention-position histograms, length statistics, and
//! paired bootstrap intervals. Word-level, lowercase, no stemming.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::corpus::{tokenize, SEP_TOKEN};
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RougeMode {
    /// Full-length F1 over clipped n-gram (or LCS) overlap.
    F1,
    /// Candidate truncated to the reference's word count, then recall.
    LimitedRecall,
}

fn ngram_counts(words: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if words.len() >= n {
        for gram in words.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// ROUGE-N over word sequences. Empty overlap or empty inputs score 0.
pub fn rouge_n(candidate: &[String], reference: &[String], n: usize, mode: RougeMode) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid_argument("rouge_n requires n >= 1"));
    }
    let candidate = match mode {
        RougeMode::F1 => candidate,
        RougeMode::LimitedRecall => &candidate[..candidate.len().min(reference.len())],
    };
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let matched: usize = cand
        .iter()
        .map(|(gram, &c)| c.min(refs.get(gram).copied().unwrap_or(0)))
        .sum();
    let n_cand: usize = cand.values().sum();
    let n_ref: usize = refs.values().sum();
    let recall = if n_ref == 0 { 0.0 } else { matched as f64 / n_ref as f64 };
    match mode {
        RougeMode::LimitedRecall => Ok(recall),
        RougeMode::F1 => {
            let precision = if n_cand == 0 { 0.0 } else { matched as f64 / n_cand as f64 };
            Ok(f1(precision, recall))
        }
    }
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L: longest-common-subsequence precision/recall.
pub fn rouge_l(candidate: &[String], reference: &[String], mode: RougeMode) -> Result<f64> {
    let candidate = match mode {
        RougeMode::F1 => candidate,
        RougeMode::LimitedRecall => &candidate[..candidate.len().min(reference.len())],
    };
    let lcs = lcs_len(candidate, reference) as f64;
    let recall = if reference.is_empty() { 0.0 } else { lcs / reference.len() as f64 };
    match mode {
        RougeMode::LimitedRecall => Ok(recall),
        RougeMode::F1 => {
            let precision = if candidate.is_empty() { 0.0 } else { lcs / candidate.len() as f64 };
            Ok(f1(precision, recall))
        }
    }
}

/// Fraction of summary n-grams absent from the document's n-gram set.
/// Counts positional occurrences by default; `distinct` counts each
/// distinct n-gram once.
pub fn novel_ngram_ratio(
    summary: &[String],
    document: &[String],
    n: usize,
    distinct: bool,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid_argument("novel_ngram_ratio requires n >= 1"));
    }
    if summary.len() < n {
        return Err(Error::invalid_argument(format!(
            "summary has {} words, fewer than n = {n}",
            summary.len()
        )));
    }
    let doc = ngram_counts(document, n);
    if distinct {
        let grams: std::collections::HashSet<&[String]> = summary.windows(n).collect();
        let novel = grams.iter().filter(|g| !doc.contains_key(**g)).count();
        Ok(novel as f64 / grams.len() as f64)
    } else {
        let total = summary.len() - n + 1;
        let novel = summary.windows(n).filter(|g| !doc.contains_key(*g)).count();
        Ok(novel as f64 / total as f64)
    }
}

/// Greedy left-to-right longest-match alignment of the summary against
/// the document; summary tokens inside matched fragments of at least
/// `min_span` words count as copied.
pub fn copied_span_fraction(summary: &[String], document: &[String], min_span: usize) -> Result<f64> {
    if summary.is_empty() {
        return Err(Error::invalid_argument("copied_span_fraction requires a non-empty summary"));
    }
    if min_span == 0 {
        return Err(Error::invalid_argument("min_span must be at least 1"));
    }
    let mut copied = 0usize;
    let mut i = 0usize;
    while i < summary.len() {
        let mut best = 0usize;
        for j in 0..document.len() {
            let mut l = 0usize;
            while i + l < summary.len() && j + l < document.len() && summary[i + l] == document[j + l]
            {
                l += 1;
            }
            best = best.max(l);
        }
        if best == 0 {
            i += 1;
        } else {
            if best >= min_span {
                copied += best;
            }
            i += best;
        }
    }
    Ok(copied as f64 / summary.len() as f64)
}

/// Splits on the explicit separator token when present, else on periods;
/// each sentence is tokenized and empties are dropped.
pub fn split_sentences(text: &str) -> Vec<Vec<String>> {
    let pieces: Vec<&str> = if text.contains(SEP_TOKEN) {
        text.split(SEP_TOKEN).collect()
    } else {
        text.split('.').collect()
    };
    pieces
        .into_iter()
        .map(tokenize)
        .filter(|words| !words.is_empty())
        .collect()
}

/// Fraction of summary sentences whose best-matching document sentence
/// (by R1 F1 + R2 F1, ties earliest) sits among the leading
/// ceil(f * num_doc_sentences) sentences.
pub fn leading_bias_fraction(summary: &str, document: &str, f: f64) -> Result<f64> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::invalid_argument(format!("leading fraction must be in (0, 1], got {f}")));
    }
    let doc_sentences = split_sentences(document);
    if doc_sentences.is_empty() {
        return Err(Error::invalid_argument("document has no sentences"));
    }
    let summary_sentences = split_sentences(summary);
    if summary_sentences.is_empty() {
        return Err(Error::invalid_argument("summary has no sentences"));
    }
    let front = (f * doc_sentences.len() as f64).ceil() as usize;
    let mut hits = 0usize;
    for sent in &summary_sentences {
        let mut best_idx = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (idx, doc_sent) in doc_sentences.iter().enumerate() {
            let score = rouge_n(sent, doc_sent, 1, RougeMode::F1)?
                + rouge_n(sent, doc_sent, 2, RougeMode::F1)?;
            if score > best_score {
                best_score = score;
                best_idx = idx;
            }
        }
        if best_idx < front {
            hits += 1;
        }
    }
    Ok(hits as f64 / summary_sentences.len() as f64)
}

/// Position histogram of evident cross-attention weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionHistogram {
    /// Mean per-document bin proportions; None when no weight anywhere
    /// clears the threshold (histogram undefined).
    pub bin_proportions: Option<Vec<f64>>,
    /// Evident weights over all weights, across every document.
    pub evident_rate: f64,
    pub docs_with_evident: usize,
    pub total_docs: usize,
}

/// Bins source positions of evident weights (strictly above `threshold`,
/// the "greater than 0.15" convention). Position j of src_len normalizes
/// to (j+1)/src_len in (0, 1]; bin k covers ((k-1)/bins, k/bins].
pub fn evident_attention_histogram(
    traces: &[Vec<Vec<f64>>],
    threshold: f64,
    bins: usize,
) -> Result<AttentionHistogram> {
    if traces.is_empty() {
        return Err(Error::invalid_argument("no traces supplied"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid_argument(format!("threshold must be in (0, 1), got {threshold}")));
    }
    if bins == 0 {
        return Err(Error::invalid_argument("bins must be at least 1"));
    }
    let mut mean_bins = vec![0.0; bins];
    let mut docs_with_evident = 0usize;
    let mut evident_total = 0usize;
    let mut weight_total = 0usize;
    for (d, trace) in traces.iter().enumerate() {
        let src_len = match trace.first() {
            Some(row) => row.len(),
            None => return Err(Error::invalid_argument(format!("document {d} has an empty trace"))),
        };
        if src_len == 0 || trace.iter().any(|row| row.len() != src_len) {
            return Err(Error::invalid_argument(format!("document {d} has ragged trace rows")));
        }
        let mut doc_bins = vec![0usize; bins];
        let mut doc_evident = 0usize;
        for row in trace {
            weight_total += src_len;
            for (j, &w) in row.iter().enumerate() {
                if w > threshold {
                    let pos = (j + 1) as f64 / src_len as f64;
                    let bin = ((pos * bins as f64).ceil() as usize).clamp(1, bins) - 1;
                    doc_bins[bin] += 1;
                    doc_evident += 1;
                }
            }
        }
        if doc_evident > 0 {
            docs_with_evident += 1;
            evident_total += doc_evident;
            for (acc, &c) in mean_bins.iter_mut().zip(&doc_bins) {
                *acc += c as f64 / doc_evident as f64;
            }
        }
    }
    let bin_proportions = if docs_with_evident > 0 {
        Some(mean_bins.iter().map(|v| v / docs_with_evident as f64).collect())
    } else {
        None
    };
    Ok(AttentionHistogram {
        bin_proportions,
        evident_rate: if weight_total == 0 { 0.0 } else { evident_total as f64 / weight_total as f64 },
        docs_with_evident,
        total_docs: traces.len(),
    })
}

pub fn histogram_csv(h: &AttentionHistogram) -> String {
    let mut out = String::from("bin_low,bin_high,proportion\n");
    if let Some(props) = &h.bin_proportions {
        let b = props.len() as f64;
        for (k, p) in props.iter().enumerate() {
            out.push_str(&format!("{:.4},{:.4},{p}\n", k as f64 / b, (k + 1) as f64 / b));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean: f64,
    pub median: f64,
}

pub fn summary_length_stats(summaries: &[Vec<String>]) -> Result<LengthStats> {
    if summaries.is_empty() {
        return Err(Error::invalid_argument("no summaries supplied"));
    }
    let mut lengths: Vec<usize> = summaries.iter().map(Vec::len).collect();
    lengths.sort_unstable();
    let n = lengths.len();
    let mean = lengths.iter().sum::<usize>() as f64 / n as f64;
    let median = if n % 2 == 1 {
        lengths[n / 2] as f64
    } else {
        (lengths[n / 2 - 1] + lengths[n / 2]) as f64 / 2.0
    };
    Ok(LengthStats { mean, median })
}

/// Paired bootstrap over per-document score differences (a minus b).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub mean_diff: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub resamples: usize,
}

/// 95% percentile interval from `resamples` paired resamples.
pub fn paired_bootstrap(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<BootstrapResult> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::invalid_argument(format!(
            "paired bootstrap needs equal non-empty score lists, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if resamples == 0 {
        return Err(Error::invalid_argument("resamples must be at least 1"));
    }
    let n = a.len();
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean_diff = diffs.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut resampled = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut acc = 0.0;
        for _ in 0..n {
            acc += diffs[rng.gen_range(0..n)];
        }
        resampled.push(acc / n as f64);
    }
    resampled.sort_by(|x, y| x.partial_cmp(y).expect("finite scores"));
    let pick = |q: f64| {
        let idx = ((resamples as f64 * q).ceil() as usize).clamp(1, resamples) - 1;
        resampled[idx]
    };
    Ok(BootstrapResult { mean_diff, ci_low: pick(0.025), ci_high: pick(0.975), resamples })
}

/// One evaluated system's corpus-level numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemMetrics {
    pub rouge_mode: RougeMode,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub mean_length: f64,
    pub median_length: f64,
    /// Mean novel n-gram ratio for n = 1..=4; documents whose summary is
    /// shorter than n are skipped for that n.
    pub novel_ngram: [f64; 4],
    pub copied_span_fraction: f64,
    pub leading_bias_fraction: f64,
}

/// Raw texts for one document: system output, gold reference, source.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRow {
    pub candidate: String,
    pub reference: String,
    pub document: String,
}

pub fn evaluate_system(
    rows: &[EvalRow],
    mode: RougeMode,
    leading_f: f64,
    min_span: usize,
) -> Result<SystemMetrics> {
    if rows.is_empty() {
        return Err(Error::invalid_argument("no rows to evaluate"));
    }
    let mut r1 = 0.0;
    let mut r2 = 0.0;
    let mut rl = 0.0;
    let mut copied = 0.0;
    let mut leading = 0.0;
    let mut novel_sum = [0.0; 4];
    let mut novel_count = [0usize; 4];
    let mut lengths = Vec::with_capacity(rows.len());
    for row in rows {
        let cand = tokenize(&row.candidate);
        let refw = tokenize(&row.reference);
        let doc = tokenize(&row.document);
        r1 += rouge_n(&cand, &refw, 1, mode)?;
        r2 += rouge_n(&cand, &refw, 2, mode)?;
        rl += rouge_l(&cand, &refw, mode)?;
        copied += copied_span_fraction(&cand, &doc, min_span)?;
        leading += leading_bias_fraction(&row.candidate, &row.document, leading_f)?;
        for (n0, (sum, count)) in novel_sum.iter_mut().zip(&mut novel_count).enumerate() {
            if cand.len() > n0 {
                *sum += novel_ngram_ratio(&cand, &doc, n0 + 1, false)?;
                *count += 1;
            }
        }
        lengths.push(cand);
    }
    let stats = summary_length_stats(&lengths)?;
    let n = rows.len() as f64;
    let mut novel_ngram = [0.0; 4];
    for i in 0..4 {
        if novel_count[i] > 0 {
            novel_ngram[i] = novel_sum[i] / novel_count[i] as f64;
        }
    }
    Ok(SystemMetrics {
        rouge_mode: mode,
        rouge1: r1 / n,
        rouge2: r2 / n,
        rouge_l: rl / n,
        mean_length: stats.mean,
        median_length: stats.median,
        novel_ngram,
        copied_span_fraction: copied / n,
        leading_bias_fraction: leading / n,
    })
}

/// Per-system metrics plus an optional attention histogram, serialized
/// as the run's report JSON.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub systems: IndexMap<String, SystemMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention: Option<AttentionHistogram>,
}

impl MetricsReport {
    /// One row per system, plot-ready.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "system,rouge1,rouge2,rouge_l,mean_length,novel1,novel2,novel3,novel4,copied_span,leading_bias\n",
        );
        for (name, m) in &self.systems {
            out.push_str(&format!(
                "{name},{},{},{},{},{},{},{},{},{},{}\n",
                m.rouge1,
                m.rouge2,
                m.rouge_l,
                m.mean_length,
                m.novel_ngram[0],
                m.novel_ngram[1],
                m.novel_ngram[2],
                m.novel_ngram[3],
                m.copied_span_fraction,
                m.leading_bias_fraction
            ));
        }
        out
    }
}
