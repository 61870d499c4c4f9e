//! Overlap and diversity metrics: ROUGE-1/2/L, sentence BLEU, M-Distinct-n,
//! and the top-k evaluation report they roll up into.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::TokenSeq;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("reference must be non-empty")]
    EmptyReference,
    #[error("reference too short for {n}-grams (len {len})")]
    ReferenceTooShort { n: usize, len: usize },
    #[error("n must be >= 1")]
    BadN,
    #[error("response sets must be non-empty")]
    EmptyResponseSets,
    #[error("every post needs the same number of responses: {0}")]
    RaggedResponseSets(String),
    #[error("generations and golds cover different posts: {0}")]
    MismatchedPosts(String),
    #[error("k must be one of 1, 3, 5; got {0}")]
    BadK(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrfScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrfScore {
    fn from_counts(overlap: f64, cand_total: f64, ref_total: f64) -> PrfScore {
        let precision = if cand_total > 0.0 { overlap / cand_total } else { 0.0 };
        let recall = if ref_total > 0.0 { overlap / ref_total } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        PrfScore { precision, recall, f1 }
    }

    pub const ZERO: PrfScore = PrfScore { precision: 0.0, recall: 0.0, f1: 0.0 };
}

/// Longest common subsequence length; O(|a|·|b|) dynamic program.
pub fn lcs_length(a: &[u32], b: &[u32]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &TokenSeq, reference: &TokenSeq) -> Result<PrfScore, MetricError> {
    rouge_l_ids(candidate.ids(), reference.ids())
}

/// Internal variant over raw ids so callers can score unwrapped buffers.
pub(crate) fn rouge_l_ids(candidate: &[u32], reference: &[u32]) -> Result<PrfScore, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    if candidate.is_empty() {
        return Ok(PrfScore::ZERO);
    }
    let lcs = lcs_length(candidate, reference) as f64;
    Ok(PrfScore::from_counts(lcs, candidate.len() as f64, reference.len() as f64))
}

fn ngram_counts(ids: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts = HashMap::new();
    if ids.len() >= n {
        for w in ids.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped multiset n-gram overlap.
pub fn rouge_n(candidate: &TokenSeq, reference: &TokenSeq, n: usize) -> Result<PrfScore, MetricError> {
    if n == 0 {
        return Err(MetricError::BadN);
    }
    let r = reference.ids();
    if r.len() < n {
        return Err(MetricError::ReferenceTooShort { n, len: r.len() });
    }
    let c = candidate.ids();
    let cand_total = c.len().saturating_sub(n - 1);
    let ref_total = r.len() - (n - 1);
    if cand_total == 0 {
        return Ok(PrfScore::ZERO);
    }
    let cand_counts = ngram_counts(c, n);
    let ref_counts = ngram_counts(r, n);
    let overlap: usize = cand_counts
        .iter()
        .map(|(gram, &cnt)| cnt.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    Ok(PrfScore::from_counts(overlap as f64, cand_total as f64, ref_total as f64))
}

/// Sentence BLEU: max n = 4, uniform weights, add-one smoothing on the n >= 2
/// precisions only, brevity penalty against the closest-length reference
/// (length ties resolved toward the shorter reference).
pub fn bleu(candidate: &TokenSeq, references: &[TokenSeq]) -> Result<f64, MetricError> {
    bleu_ids(candidate.ids(), &references.iter().map(|r| r.ids()).collect::<Vec<_>>())
}

pub(crate) fn bleu_ids(candidate: &[u32], references: &[&[u32]]) -> Result<f64, MetricError> {
    if references.is_empty() || references.iter().any(|r| r.is_empty()) {
        return Err(MetricError::EmptyReference);
    }
    let c_len = candidate.len();
    if c_len == 0 {
        return Ok(0.0);
    }
    let max_n = 4usize;
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand_total = c_len.saturating_sub(n - 1);
        let cand_counts = ngram_counts(candidate, n);
        // Per n-gram, clip against the best count over all references.
        let mut matched = 0usize;
        for (gram, &cnt) in &cand_counts {
            let best = references
                .iter()
                .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            matched += cnt.min(best);
        }
        let (num, den) = if n == 1 {
            (matched as f64, cand_total as f64)
        } else {
            (matched as f64 + 1.0, cand_total as f64 + 1.0)
        };
        if num == 0.0 || den == 0.0 {
            return Ok(0.0); // unsmoothed unigram precision of zero
        }
        log_sum += (num / den).ln() / max_n as f64;
    }
    // Closest reference length; ties go to the shorter.
    let r_len = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&rl| (rl.abs_diff(c_len), rl))
        .expect("non-empty references");
    let bp = if c_len >= r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok((bp * log_sum.exp()).clamp(0.0, 1.0))
}

/// Pooled distinct/total n-gram ratio per post, averaged over posts. Posts
/// whose pooled responses yield zero n-grams contribute 0.
pub fn m_distinct_n(response_sets: &[Vec<TokenSeq>], n: usize) -> Result<f64, MetricError> {
    if n == 0 {
        return Err(MetricError::BadN);
    }
    if response_sets.is_empty() {
        return Err(MetricError::EmptyResponseSets);
    }
    let m = response_sets[0].len();
    if m == 0 {
        return Err(MetricError::RaggedResponseSets("a post has zero responses".into()));
    }
    if let Some(bad) = response_sets.iter().find(|s| s.len() != m) {
        return Err(MetricError::RaggedResponseSets(format!(
            "expected {m} responses per post, found {}",
            bad.len()
        )));
    }
    let mut total_score = 0.0;
    for set in response_sets {
        let mut seen: HashMap<&[u32], usize> = HashMap::new();
        let mut total = 0usize;
        for resp in set {
            let ids = resp.ids();
            if ids.len() >= n {
                for w in ids.windows(n) {
                    *seen.entry(w).or_insert(0) += 1;
                    total += 1;
                }
            }
        }
        if total > 0 {
            total_score += seen.len() as f64 / total as f64;
        }
    }
    Ok(total_score / response_sets.len() as f64)
}

/// Per-k aggregate row of the evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub bleu: f64,
    /// Diversity is only defined for k >= 3 generations.
    pub m_distinct_1: Option<f64>,
    pub m_distinct_2: Option<f64>,
}

/// Scores k generations per post against that post's golds: overlap metrics
/// take the max over golds, are averaged over the k generations, then over
/// posts; M-Distinct pools the k generations (k >= 3 only).
pub fn evaluate_top_k(
    generations: &BTreeMap<u64, Vec<TokenSeq>>,
    golds: &BTreeMap<u64, Vec<TokenSeq>>,
    k: usize,
) -> Result<MetricReport, MetricError> {
    if !matches!(k, 1 | 3 | 5) {
        return Err(MetricError::BadK(k));
    }
    if generations.is_empty() {
        return Err(MetricError::EmptyResponseSets);
    }
    if generations.len() != golds.len()
        || generations.keys().any(|id| !golds.contains_key(id))
    {
        let g: Vec<_> = generations.keys().take(5).collect();
        let h: Vec<_> = golds.keys().take(5).collect();
        return Err(MetricError::MismatchedPosts(format!(
            "generation posts {g:?}.. vs gold posts {h:?}.."
        )));
    }
    let mut sums = [0.0f64; 4]; // rouge1, rouge2, rougeL, bleu
    let mut pooled: Vec<Vec<TokenSeq>> = Vec::with_capacity(generations.len());
    for (post_id, gens) in generations {
        let gold = &golds[post_id];
        if gens.len() != k {
            return Err(MetricError::RaggedResponseSets(format!(
                "post {post_id} has {} generations, expected {k}",
                gens.len()
            )));
        }
        if gold.is_empty() {
            return Err(MetricError::EmptyReference);
        }
        let mut post_scores = [0.0f64; 4];
        for gen in gens {
            let mut best = [0.0f64; 4];
            for g in gold {
                best[0] = best[0].max(rouge_n(gen, g, 1)?.f1);
                best[1] = best[1].max(rouge_n(gen, g, 2)?.f1);
                best[2] = best[2].max(rouge_l(gen, g)?.f1);
                best[3] = best[3].max(bleu(gen, std::slice::from_ref(g))?);
            }
            for i in 0..4 {
                post_scores[i] += best[i];
            }
        }
        for i in 0..4 {
            sums[i] += post_scores[i] / k as f64;
        }
        pooled.push(gens.clone());
    }
    let n_posts = generations.len() as f64;
    let (md1, md2) = if k >= 3 {
        (Some(m_distinct_n(&pooled, 1)?), Some(m_distinct_n(&pooled, 2)?))
    } else {
        (None, None)
    };
    Ok(MetricReport {
        k,
        rouge1: sums[0] / n_posts,
        rouge2: sums[1] / n_posts,
        rouge_l: sums[2] / n_posts,
        bleu: sums[3] / n_posts,
        m_distinct_1: md1,
        m_distinct_2: md2,
    })
}
