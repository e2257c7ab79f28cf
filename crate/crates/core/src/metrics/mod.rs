//! Automatic evaluation metrics and the evaluation report.
//!
//! Sentences are token lists. Corpus-level BLEU and NIST aggregate n-gram
//! statistics over all samples; ROUGE-L and METEOR average per-sample
//! scores, each taking the best reference.

mod report;

pub use report::{validate_report_json, EvalReport, TextMetrics, REPORT_KEYS};

use std::collections::HashMap;

use crate::data::oracle_label;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Sentence = Vec<String>;

fn ngram_counts(s: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if n == 0 || s.len() < n {
        return m;
    }
    for g in s.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

fn check_corpus(hyps: &[Sentence], refs: &[Vec<Sentence>]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::data("empty evaluation corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::data(format!("{} hypotheses for {} reference sets", hyps.len(), refs.len())));
    }
    if let Some(i) = refs.iter().position(Vec::is_empty) {
        return Err(Error::data(format!("sample {i} has no reference")));
    }
    Ok(())
}

/// Corpus statistics behind BLEU.
#[derive(Clone, Debug, PartialEq)]
pub struct BleuStats {
    /// Clipped matches per order (index 0 is unigrams).
    pub clipped: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// Per-order clipped n-gram counts (clip = max count in any single
/// reference), hypothesis length and closest reference length (ties go to
/// the shorter reference).
pub fn bleu_stats(hyps: &[Sentence], refs: &[Vec<Sentence>], max_n: usize) -> Result<BleuStats> {
    check_corpus(hyps, refs)?;
    let mut st = BleuStats {
        clipped: vec![0; max_n],
        totals: vec![0; max_n],
        hyp_len: 0,
        ref_len: 0,
    };
    for (h, rs) in hyps.iter().zip(refs) {
        st.hyp_len += h.len();
        st.ref_len += rs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(h.len()), l))
            .expect("non-empty references");
        for n in 1..=max_n {
            let hc = ngram_counts(h, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in rs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &hc {
                st.clipped[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                st.totals[n - 1] += c;
            }
        }
    }
    Ok(st)
}

/// Corpus BLEU with uniform weights over orders `1..=max_n`, no smoothing.
pub fn bleu(hyps: &[Sentence], refs: &[Vec<Sentence>], max_n: usize) -> Result<f64> {
    if max_n == 0 {
        return Err(Error::Config("BLEU order must be at least 1".into()));
    }
    let st = bleu_stats(hyps, refs, max_n)?;
    if st.hyp_len == 0 || st.clipped.iter().zip(&st.totals).any(|(&c, &t)| c == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = st
        .clipped
        .iter()
        .zip(&st.totals)
        .map(|(&c, &t)| (c as f64 / t as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let (c, r) = (st.hyp_len as f64, st.ref_len as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * log_p.exp())
}

/// Doddington information weights from reference-corpus counts:
/// `info(w1..wn) = log2(count(w1..wn-1) / count(w1..wn))`, where the empty
/// prefix counts every reference word.
pub fn nist_info(refs: &[Vec<Sentence>], max_n: usize) -> HashMap<Vec<String>, f64> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    let mut words = 0usize;
    for r in refs.iter().flatten() {
        words += r.len();
        for n in 1..=max_n {
            for (g, c) in ngram_counts(r, n) {
                *counts.entry(g).or_insert(0) += c;
            }
        }
    }
    counts
        .iter()
        .map(|(g, &c)| {
            let prefix = if g.len() == 1 { words } else { counts[&g[..g.len() - 1]] };
            (g.to_vec(), (prefix as f64 / c as f64).log2())
        })
        .collect()
}

/// Brevity factor `exp(β·ln²(min(ratio, 1)))` with β chosen so a 2/3
/// length ratio yields 0.5.
pub fn nist_brevity(ratio: f64) -> f64 {
    if ratio >= 1.0 {
        return 1.0;
    }
    if ratio <= 0.0 {
        return 0.0;
    }
    let beta = 0.5f64.ln() / 1.5f64.ln().powi(2);
    (beta * ratio.ln().powi(2)).exp()
}

/// Corpus NIST: for each order, information-weighted clipped matches
/// divided by the number of hypothesis n-grams; orders summed, times the
/// brevity factor against the mean reference length per sample.
pub fn nist(hyps: &[Sentence], refs: &[Vec<Sentence>], max_n: usize) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let info = nist_info(refs, max_n);
    let mut num = vec![0.0; max_n];
    let mut den = vec![0usize; max_n];
    let mut sys_len = 0usize;
    let mut ref_len = 0.0;
    for (h, rs) in hyps.iter().zip(refs) {
        sys_len += h.len();
        ref_len += rs.iter().map(Vec::len).sum::<usize>() as f64 / rs.len() as f64;
        for n in 1..=max_n {
            let hc = ngram_counts(h, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in rs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            // sorted for a deterministic summation order
            let mut items: Vec<(&[String], usize)> = hc.into_iter().collect();
            items.sort();
            for (g, c) in items {
                den[n - 1] += c;
                let m = c.min(max_ref.get(g).copied().unwrap_or(0));
                if m > 0 {
                    num[n - 1] += m as f64 * info[g];
                }
            }
        }
    }
    let score: f64 = num.iter().zip(&den).filter(|(_, &d)| d > 0).map(|(&a, &d)| a / d as f64).sum();
    if ref_len == 0.0 {
        return Ok(0.0);
    }
    Ok(score * nist_brevity(sys_len as f64 / ref_len))
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// Sentence ROUGE-L F1, best reference.
pub fn rouge_l_sentence(hyp: &[String], refs: &[Sentence]) -> f64 {
    if hyp.is_empty() {
        log::debug!("ROUGE-L of an empty hypothesis is 0");
        return 0.0;
    }
    refs.iter()
        .map(|r| {
            let l = lcs_len(hyp, r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / hyp.len() as f64;
            let rc = l as f64 / r.len() as f64;
            2.0 * p * rc / (p + rc)
        })
        .fold(0.0, f64::max)
}

pub fn rouge_l(hyps: &[Sentence], refs: &[Vec<Sentence>]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    Ok(hyps.iter().zip(refs).map(|(h, r)| rouge_l_sentence(h, r)).sum::<f64>() / hyps.len() as f64)
}

const ALIGN_BUDGET: usize = 200_000;

/// Exact-match alignment with the maximum number of matches and, among
/// those, the fewest chunks (runs contiguous in both strings). Returns
/// `(matches, chunks)`. Search is exhaustive with pruning; pathological
/// repetitive inputs beyond the node budget keep the best alignment found.
pub fn meteor_alignment(hyp: &[String], r: &[String]) -> (usize, usize) {
    let mut hc: HashMap<&str, usize> = HashMap::new();
    for w in hyp {
        *hc.entry(w).or_insert(0) += 1;
    }
    let mut rc: HashMap<&str, usize> = HashMap::new();
    for w in r {
        *rc.entry(w).or_insert(0) += 1;
    }
    let m: usize = hc.iter().map(|(w, &c)| c.min(rc.get(w).copied().unwrap_or(0))).sum();
    if m == 0 {
        return (0, 0);
    }
    // remaining matchable tokens of each hyp suffix (upper bound on matches)
    let mut suffix = vec![0usize; hyp.len() + 1];
    for i in (0..hyp.len()).rev() {
        suffix[i] = suffix[i + 1] + usize::from(rc.contains_key(hyp[i].as_str()));
    }
    struct Search<'a> {
        h: &'a [String],
        r: &'a [String],
        used: Vec<bool>,
        target: usize,
        suffix: Vec<usize>,
        best: usize,
        nodes: usize,
    }
    impl Search<'_> {
        fn go(&mut self, i: usize, prev: Option<usize>, matched: usize, chunks: usize) {
            self.nodes += 1;
            if chunks >= self.best || (self.nodes > ALIGN_BUDGET && self.best != usize::MAX) {
                return;
            }
            if matched == self.target {
                self.best = chunks;
                return;
            }
            if i == self.h.len() || matched + self.suffix[i] < self.target {
                return;
            }
            let w = &self.h[i];
            if let Some(j) = prev {
                if j + 1 < self.r.len() && !self.used[j + 1] && &self.r[j + 1] == w {
                    self.used[j + 1] = true;
                    self.go(i + 1, Some(j + 1), matched + 1, chunks);
                    self.used[j + 1] = false;
                }
            }
            for j in 0..self.r.len() {
                if self.used[j] || &self.r[j] != w || prev.is_some_and(|p| j == p + 1) {
                    continue;
                }
                self.used[j] = true;
                self.go(i + 1, Some(j), matched + 1, chunks + 1);
                self.used[j] = false;
            }
            self.go(i + 1, None, matched, chunks);
        }
    }
    let mut s = Search {
        h: hyp,
        r,
        used: vec![false; r.len()],
        target: m,
        suffix,
        best: usize::MAX,
        nodes: 0,
    };
    s.go(0, None, 0, 0);
    if s.nodes > ALIGN_BUDGET {
        log::debug!("METEOR alignment search truncated at {ALIGN_BUDGET} nodes");
    }
    (m, s.best)
}

/// METEOR from matches and chunks: `Fmean = 10PR/(R+9P)`, penalty
/// `0.5·(chunks/matches)³`.
pub fn meteor_from_alignment(matches: usize, chunks: usize, hyp_len: usize, ref_len: usize) -> f64 {
    if matches == 0 {
        return 0.0;
    }
    let p = matches as f64 / hyp_len as f64;
    let r = matches as f64 / ref_len as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
    fmean * (1.0 - penalty)
}

/// Exact-match METEOR (no stemming or synonyms), best reference.
pub fn meteor_sentence(hyp: &[String], refs: &[Sentence]) -> f64 {
    refs.iter()
        .map(|r| {
            let (m, c) = meteor_alignment(hyp, r);
            meteor_from_alignment(m, c, hyp.len(), r.len())
        })
        .fold(0.0, f64::max)
}

pub fn meteor(hyps: &[Sentence], refs: &[Vec<Sentence>]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    Ok(hyps.iter().zip(refs).map(|(h, r)| meteor_sentence(h, r)).sum::<f64>() / hyps.len() as f64)
}

/// Distinct n-grams over all hypotheses divided by total n-grams.
pub fn dist_n(hyps: &[Sentence], n: usize) -> f64 {
    let mut all: HashMap<&[String], usize> = HashMap::new();
    let mut total = 0usize;
    for h in hyps {
        for (g, c) in ngram_counts(h, n) {
            *all.entry(g).or_insert(0) += c;
            total += c;
        }
    }
    if total == 0 {
        log::debug!("no {n}-grams in the hypotheses; Dist-{n} is 0");
        return 0.0;
    }
    all.len() as f64 / total as f64
}

/// Natural-log entropy of the empirical n-gram distribution.
pub fn entropy_n(hyps: &[Sentence], n: usize) -> f64 {
    let mut all: HashMap<&[String], usize> = HashMap::new();
    let mut total = 0usize;
    for h in hyps {
        for (g, c) in ngram_counts(h, n) {
            *all.entry(g).or_insert(0) += c;
            total += c;
        }
    }
    if total == 0 {
        log::debug!("no {n}-grams in the hypotheses; entropy is 0");
        return 0.0;
    }
    let mut counts: Vec<usize> = all.into_values().collect();
    counts.sort_unstable();
    let t = total as f64;
    -counts
        .iter()
        .map(|&c| {
            let p = c as f64 / t;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Fraction of responses whose oracle-detected label equals the requested
/// one.
pub fn label_controllability(generated: &[Sentence], gold: &[usize]) -> Result<f64> {
    if generated.len() != gold.len() {
        return Err(Error::data(format!("{} responses for {} labels", generated.len(), gold.len())));
    }
    if generated.is_empty() {
        return Err(Error::data("no responses to classify"));
    }
    let hits = generated.iter().zip(gold).filter(|(g, &l)| oracle_label(g) == l).count();
    Ok(hits as f64 / generated.len() as f64)
}

fn mean_pool(ids: &[usize], table: &Tensor<f32>) -> Result<Vec<f64>> {
    let d = table.last_dim();
    let mut v = vec![0.0; d];
    for &i in ids {
        if i >= table.rows() {
            return Err(Error::Index {
                what: "embedding row",
                index: i,
                size: table.rows(),
            });
        }
        for (a, &x) in v.iter_mut().zip(table.row(i)) {
            *a += x as f64;
        }
    }
    if !ids.is_empty() {
        v.iter_mut().for_each(|x| *x /= ids.len() as f64);
    }
    Ok(v)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean over samples of the best cosine between the mean-pooled response
/// embedding and each used persona sentence. Samples without a used
/// sentence are skipped; returns `(mean, skipped)` with `None` when every
/// sample was skipped.
pub fn persona_similarity(
    generated: &[Vec<usize>],
    used_persona: &[Vec<Vec<usize>>],
    table: &Tensor<f32>,
) -> Result<(Option<f64>, usize)> {
    if generated.len() != used_persona.len() {
        return Err(Error::data(format!(
            "{} responses for {} persona sets",
            generated.len(),
            used_persona.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut skipped = 0usize;
    for (g, ps) in generated.iter().zip(used_persona) {
        if ps.is_empty() {
            skipped += 1;
            continue;
        }
        let gv = mean_pool(g, table)?;
        let mut best = f64::NEG_INFINITY;
        for p in ps {
            best = best.max(cosine(&gv, &mean_pool(p, table)?));
        }
        sum += best;
        n += 1;
    }
    Ok(((n > 0).then(|| sum / n as f64), skipped))
}
