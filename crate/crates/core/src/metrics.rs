//! Caption metrics: BLEU-4, ROUGE-L and CIDEr-D over token lists.

use std::collections::BTreeMap;

use crate::{Error, Result};

const MAX_N: usize = 4;
const ROUGE_BETA: f64 = 1.2;
const CIDER_SIGMA: f64 = 6.0;

/// N-gram counts of one sentence for n = 1..=4.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramStats<T: Ord> {
    pub counts: BTreeMap<Vec<T>, usize>,
    pub length: usize,
}

impl<T: Ord + Clone> NGramStats<T> {
    pub fn new(tokens: &[T]) -> Self {
        let mut counts = BTreeMap::new();
        for n in 1..=MAX_N {
            for w in tokens.windows(n) {
                *counts.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        Self { counts, length: tokens.len() }
    }

    fn order(&self, n: usize) -> impl Iterator<Item = (&Vec<T>, &usize)> {
        self.counts.iter().filter(move |(g, _)| g.len() == n)
    }
}

/// Sentence BLEU-4 without smoothing, brevity penalty against the closest
/// reference length (shorter wins ties).
pub fn bleu4<T: Ord + Clone>(candidate: &[T], references: &[Vec<T>]) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let cand = NGramStats::new(candidate);
    let refs: Vec<NGramStats<T>> = references.iter().map(|r| NGramStats::new(r)).collect();
    let mut log_sum = 0.0;
    for n in 1..=MAX_N {
        let total = candidate.len().saturating_sub(n - 1);
        if total == 0 {
            return 0.0;
        }
        let clipped: usize = cand
            .order(n)
            .map(|(g, &c)| {
                let max_ref = refs.iter().map(|r| r.counts.get(g).copied().unwrap_or(0)).max();
                c.min(max_ref.unwrap_or(0))
            })
            .sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let c = candidate.len() as f64;
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| ((len as i64 - candidate.len() as i64).abs(), len))
        .unwrap() as f64;
    let bp = (1.0 - r / c).min(0.0).exp();
    bp * (log_sum / MAX_N as f64).exp()
}

fn lcs<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// LCS F-measure with beta 1.2, best over references.
pub fn rouge_l<T: Eq>(candidate: &[T], references: &[Vec<T>]) -> f64 {
    let b2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .map(|r| {
            let l = lcs(candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let rec = l / r.len() as f64;
            let prec = l / candidate.len() as f64;
            (1.0 + b2) * rec * prec / (rec + b2 * prec)
        })
        .fold(0.0, f64::max)
}

/// Document frequencies of n-grams over a reference corpus, one document per
/// image (the union of its references).
#[derive(Debug, Clone)]
pub struct CiderIdf<T: Ord> {
    df: BTreeMap<Vec<T>, usize>,
    log_docs: f64,
}

impl<T: Ord + Clone> CiderIdf<T> {
    pub fn new(corpus: &[Vec<Vec<T>>]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Invalid("CIDEr-D needs a nonempty reference corpus".into()));
        }
        let mut df = BTreeMap::new();
        for refs in corpus {
            let mut seen: Vec<Vec<T>> = Vec::new();
            for r in refs {
                for g in NGramStats::new(r).counts.into_keys() {
                    if !seen.contains(&g) {
                        seen.push(g);
                    }
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        Ok(Self { df, log_docs: (corpus.len() as f64).ln() })
    }

    fn weight(&self, gram: &[T]) -> f64 {
        let df = self.df.get(gram).copied().unwrap_or(0).max(1) as f64;
        self.log_docs - df.ln()
    }

    fn vectors(&self, tokens: &[T]) -> ([BTreeMap<Vec<T>, f64>; MAX_N], [f64; MAX_N]) {
        let stats = NGramStats::new(tokens);
        let mut vecs: [BTreeMap<Vec<T>, f64>; MAX_N] = Default::default();
        let mut norms = [0.0; MAX_N];
        for (g, &c) in &stats.counts {
            let v = c as f64 * self.weight(g);
            norms[g.len() - 1] += v * v;
            vecs[g.len() - 1].insert(g.clone(), v);
        }
        (vecs, norms.map(f64::sqrt))
    }
}

/// CIDEr-D: clipped tf-idf cosine per n-gram order with a gaussian length
/// penalty, averaged over references and orders, times 10.
pub fn cider_d<T: Ord + Clone>(candidate: &[T], references: &[Vec<T>], idf: &CiderIdf<T>) -> f64 {
    if references.is_empty() {
        return 0.0;
    }
    let (cv, cn) = idf.vectors(candidate);
    let mut score = [0.0; MAX_N];
    for r in references {
        let (rv, rn) = idf.vectors(r);
        let delta = candidate.len() as f64 - r.len() as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        for n in 0..MAX_N {
            let mut dot = 0.0;
            for (g, &v) in &cv[n] {
                if let Some(&w) = rv[n].get(g) {
                    dot += v.min(w) * w;
                }
            }
            if cn[n] != 0.0 && rn[n] != 0.0 {
                score[n] += dot / (cn[n] * rn[n]) * penalty;
            }
        }
    }
    let per_order: f64 = score.iter().map(|s| s / references.len() as f64).sum();
    10.0 * per_order / MAX_N as f64
}

/// Corpus scores as the mean of per-sentence values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusScores {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

pub fn corpus_scores<T: Ord + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<CorpusScores> {
    if candidates.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} candidates for {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    let idf = CiderIdf::new(references)?;
    let n = candidates.len() as f64;
    let mut out = CorpusScores { bleu4: 0.0, rouge_l: 0.0, cider_d: 0.0 };
    for (c, r) in candidates.iter().zip(references) {
        out.bleu4 += bleu4(c, r) / n;
        out.rouge_l += rouge_l(c, r) / n;
        out.cider_d += cider_d(c, r, &idf) / n;
    }
    Ok(out)
}
