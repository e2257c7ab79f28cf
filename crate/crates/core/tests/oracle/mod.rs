//! Brute-force reference implementations of the evaluation metrics.
//! Deliberately naive: linear scans instead of hash maps, exhaustive
//! subsequence and alignment enumeration.

#![allow(dead_code)]

pub type Sent = Vec<String>;

pub fn words(s: &str) -> Sent {
    s.split_whitespace().map(str::to_string).collect()
}

#[derive(serde::Deserialize)]
pub struct FixtureRow {
    pub hyp: String,
    pub refs: Vec<String>,
}

pub fn fixture() -> (Vec<Sent>, Vec<Vec<Sent>>) {
    let rows: Vec<FixtureRow> = serde_json::from_str(include_str!("../fixtures/metrics_fixture.json")).unwrap();
    rows.into_iter()
        .map(|r| (words(&r.hyp), r.refs.iter().map(|x| words(x)).collect()))
        .unzip()
}

fn grams(s: &[String], n: usize) -> Vec<Vec<String>> {
    if s.len() < n {
        return vec![];
    }
    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

pub fn bleu(hyps: &[Sent], refs: &[Vec<Sent>], max_n: usize) -> f64 {
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (mut m, mut t) = (0usize, 0usize);
        for (h, rs) in hyps.iter().zip(refs) {
            let hg = grams(h, n);
            t += hg.len();
            for g in distinct(&hg) {
                let best = rs.iter().map(|r| count(&grams(r, n), &g)).max().unwrap();
                m += count(&hg, &g).min(best);
            }
        }
        if m == 0 || t == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let mut r = 0usize;
    for (h, rs) in hyps.iter().zip(refs) {
        let mut best = rs[0].len();
        for x in rs {
            let (d, bd) = (x.len().abs_diff(h.len()), best.abs_diff(h.len()));
            if d < bd || (d == bd && x.len() < best) {
                best = x.len();
            }
        }
        r += best;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_sum / max_n as f64).exp()
}

pub fn nist(hyps: &[Sent], refs: &[Vec<Sent>], max_n: usize) -> f64 {
    let all_refs: Vec<&Sent> = refs.iter().flatten().collect();
    let total_words: usize = all_refs.iter().map(|r| r.len()).sum();
    let corpus_count = |g: &[String]| -> usize { all_refs.iter().map(|r| count(&grams(r, g.len()), g)).sum() };
    let mut score = 0.0;
    for n in 1..=max_n {
        let mut num = 0.0;
        let mut den = 0usize;
        for (h, rs) in hyps.iter().zip(refs) {
            let hg = grams(h, n);
            den += hg.len();
            for g in distinct(&hg) {
                let best = rs.iter().map(|r| count(&grams(r, n), &g)).max().unwrap();
                let m = count(&hg, &g).min(best);
                if m > 0 {
                    let prefix = if n == 1 { total_words } else { corpus_count(&g[..n - 1]) };
                    num += m as f64 * (prefix as f64 / corpus_count(&g) as f64).log2();
                }
            }
        }
        if den > 0 {
            score += num / den as f64;
        }
    }
    let sys: usize = hyps.iter().map(Vec::len).sum();
    let reflen: f64 = refs
        .iter()
        .map(|rs| rs.iter().map(Vec::len).sum::<usize>() as f64 / rs.len() as f64)
        .sum();
    let ratio = sys as f64 / reflen;
    let bp = if ratio >= 1.0 {
        1.0
    } else {
        let beta = 0.5f64.ln() / 1.5f64.ln().powi(2);
        (beta * ratio.ln().powi(2)).exp()
    };
    score * bp
}

fn is_subsequence(sub: &[&String], s: &[String]) -> bool {
    let mut it = s.iter();
    sub.iter().all(|w| it.any(|x| x == *w))
}

/// LCS by enumerating every subsequence of `a`.
pub fn lcs(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

pub fn rouge_l(hyps: &[Sent], refs: &[Vec<Sent>]) -> f64 {
    let mut total = 0.0;
    for (h, rs) in hyps.iter().zip(refs) {
        let mut best: f64 = 0.0;
        for r in rs {
            let l = lcs(h, r) as f64;
            if l > 0.0 {
                let (p, rc) = (l / h.len() as f64, l / r.len() as f64);
                best = best.max(2.0 * p * rc / (p + rc));
            }
        }
        total += best;
    }
    total / hyps.len() as f64
}

fn chunks_of(pairs: &[(usize, usize)]) -> usize {
    let mut p = pairs.to_vec();
    p.sort();
    let mut c = 0;
    for i in 0..p.len() {
        if i == 0 || p[i].0 != p[i - 1].0 + 1 || p[i].1 != p[i - 1].1 + 1 {
            c += 1;
        }
    }
    c
}

/// Every one-to-one exact-match alignment; keeps (max matches, then min
/// chunks).
fn enumerate(h: &[String], r: &[String], i: usize, used: &mut Vec<bool>, pairs: &mut Vec<(usize, usize)>, best: &mut (usize, usize)) {
    if i == h.len() {
        let cand = (pairs.len(), chunks_of(pairs));
        if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1) {
            *best = cand;
        }
        return;
    }
    for j in 0..r.len() {
        if !used[j] && r[j] == h[i] {
            used[j] = true;
            pairs.push((i, j));
            enumerate(h, r, i + 1, used, pairs, best);
            pairs.pop();
            used[j] = false;
        }
    }
    enumerate(h, r, i + 1, used, pairs, best);
}

pub fn meteor_sentence(h: &[String], rs: &[Sent]) -> f64 {
    let mut best_score: f64 = 0.0;
    for r in rs {
        let mut best = (0, usize::MAX);
        enumerate(h, r, 0, &mut vec![false; r.len()], &mut Vec::new(), &mut best);
        let (m, c) = best;
        if m == 0 {
            continue;
        }
        let p = m as f64 / h.len() as f64;
        let rc = m as f64 / r.len() as f64;
        let fmean = 10.0 * p * rc / (rc + 9.0 * p);
        best_score = best_score.max(fmean * (1.0 - 0.5 * (c as f64 / m as f64).powi(3)));
    }
    best_score
}

pub fn meteor(hyps: &[Sent], refs: &[Vec<Sent>]) -> f64 {
    hyps.iter().zip(refs).map(|(h, r)| meteor_sentence(h, r)).sum::<f64>() / hyps.len() as f64
}

pub fn dist(hyps: &[Sent], n: usize) -> f64 {
    let all: Vec<Vec<String>> = hyps.iter().flat_map(|h| grams(h, n)).collect();
    if all.is_empty() {
        return 0.0;
    }
    distinct(&all).len() as f64 / all.len() as f64
}

pub fn entropy(hyps: &[Sent], n: usize) -> f64 {
    let all: Vec<Vec<String>> = hyps.iter().flat_map(|h| grams(h, n)).collect();
    let t = all.len() as f64;
    distinct(&all)
        .iter()
        .map(|g| {
            let p = count(&all, g) as f64 / t;
            -p * p.ln()
        })
        .sum()
}
