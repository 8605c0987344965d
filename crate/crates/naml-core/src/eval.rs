//! Per-impression ranking metrics: AUC, MRR, nDCG@5, nDCG@10, averaged
//! with equal weight over impressions.

use std::collections::HashMap;

use serde::Serialize;

use crate::data::Impression;
use crate::model::{ModelDims, ParamStore};
use crate::news_encoder::{encode_news_vector, EncodeOptions};
use crate::text::{unknown_news, TokenizedNews};
use crate::trainer::score;
use crate::user_encoder::encode_user_vector;

/// Scores and binary labels for one impression's candidate list.
#[derive(Debug, Clone)]
pub struct ImpressionScores {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ImpressionScores {
    /// Metrics need at least one positive and one negative; anything else
    /// is excluded from averages and counted.
    pub fn usable(&self) -> bool {
        let pos = self.labels.iter().filter(|&&l| l != 0).count();
        pos >= 1 && pos < self.labels.len()
    }

    /// Candidate indices sorted by score descending; ties keep input order.
    fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| {
            self.scores[b]
                .partial_cmp(&self.scores[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        order
    }
}

/// Pairwise AUC: fraction of (positive, negative) pairs ranked correctly,
/// ties counting one half.
pub fn auc(imp: &ImpressionScores) -> f64 {
    let mut correct = 0.0;
    let mut total = 0.0;
    for (i, &li) in imp.labels.iter().enumerate() {
        if li == 0 {
            continue;
        }
        for (j, &lj) in imp.labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            total += 1.0;
            if imp.scores[i] > imp.scores[j] {
                correct += 1.0;
            } else if imp.scores[i] == imp.scores[j] {
                correct += 0.5;
            }
        }
    }
    correct / total
}

/// Mean reciprocal rank over all positives (1-based ranks, ties broken by
/// input order). With `first_only` the reciprocal rank of the best-ranked
/// positive is used instead of the mean.
pub fn mrr(imp: &ImpressionScores, first_only: bool) -> f64 {
    let order = imp.ranking();
    let mut rrs = Vec::new();
    for (rank0, &idx) in order.iter().enumerate() {
        if imp.labels[idx] != 0 {
            rrs.push(1.0 / (rank0 + 1) as f64);
            if first_only {
                break;
            }
        }
    }
    rrs.iter().sum::<f64>() / rrs.len() as f64
}

/// Binary-gain nDCG@k with discount 1/log2(rank + 1).
pub fn ndcg_at(imp: &ImpressionScores, k: usize) -> f64 {
    assert!(k >= 1);
    let order = imp.ranking();
    let discount = |rank0: usize| 1.0 / ((rank0 + 2) as f64).log2();
    let dcg: f64 = order
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &idx)| imp.labels[idx] != 0)
        .map(|(rank0, _)| discount(rank0))
        .sum();
    let n_pos = imp.labels.iter().filter(|&&l| l != 0).count();
    let idcg: f64 = (0..n_pos.min(k)).map(discount).sum();
    dcg / idcg
}

/// Averaged metrics plus bookkeeping about excluded impressions.
#[derive(Debug, Clone, Serialize)]
pub struct RankingMetrics {
    pub auc: f64,
    pub mrr: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub n_impressions_used: usize,
    pub n_impressions_skipped: usize,
}

/// Equal-weight average over usable impressions.
pub fn aggregate<I>(impressions: I, mrr_first_only: bool) -> RankingMetrics
where
    I: IntoIterator<Item = ImpressionScores>,
{
    let mut sums = [0.0; 4];
    let mut used = 0;
    let mut skipped = 0;
    for imp in impressions {
        if !imp.usable() {
            skipped += 1;
            continue;
        }
        sums[0] += auc(&imp);
        sums[1] += mrr(&imp, mrr_first_only);
        sums[2] += ndcg_at(&imp, 5);
        sums[3] += ndcg_at(&imp, 10);
        used += 1;
    }
    let denom = used.max(1) as f64;
    RankingMetrics {
        auc: sums[0] / denom,
        mrr: sums[1] / denom,
        ndcg5: sums[2] / denom,
        ndcg10: sums[3] / denom,
        n_impressions_used: used,
        n_impressions_skipped: skipped,
    }
}

/// Per-impression metric record for the optional JSON report.
#[derive(Debug, Clone, Serialize)]
pub struct ImpressionMetrics {
    pub impression_id: String,
    pub auc: f64,
    pub mrr: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

pub struct EvaluateOutput {
    pub metrics: RankingMetrics,
    pub per_impression: Vec<ImpressionMetrics>,
    /// News ids referenced by impressions but missing from the news store.
    pub n_unknown_news: usize,
}

/// Score every impression with a frozen model. News vectors are computed
/// once per distinct news id; unknown ids fall back to the UNK/UNKNOWN
/// encoding and are tallied.
pub fn evaluate_model(
    params: &ParamStore,
    dims: &ModelDims,
    news: &HashMap<String, TokenizedNews>,
    impressions: &[Impression],
    opts: &EncodeOptions,
    m_max: usize,
    p_max: usize,
    n_max: usize,
    mrr_first_only: bool,
) -> Result<EvaluateOutput, crate::error::TensorError> {
    let opts = opts.eval();
    let mut cache: HashMap<String, Vec<f64>> = HashMap::new();
    let mut n_unknown = 0usize;
    let mut vector_of = |id: &str, n_unknown: &mut usize| -> Result<Vec<f64>, crate::error::TensorError> {
        if let Some(v) = cache.get(id) {
            return Ok(v.clone());
        }
        let tokenized;
        let item = match news.get(id) {
            Some(n) => n,
            None => {
                *n_unknown += 1;
                tokenized = unknown_news(id, m_max, p_max);
                &tokenized
            }
        };
        let v = encode_news_vector(params, dims, item, &opts)?.r;
        cache.insert(id.to_string(), v.clone());
        Ok(v)
    };

    let mut scored = Vec::with_capacity(impressions.len());
    let mut per_impression = Vec::new();
    for imp in impressions {
        let recent = recent_history(&imp.history, n_max);
        let history: Vec<Vec<f64>> = recent
            .iter()
            .map(|id| vector_of(id, &mut n_unknown))
            .collect::<Result<_, _>>()?;
        let (u, _) = encode_user_vector(params, dims, &history, opts.news_attention)?;
        let mut scores = Vec::with_capacity(imp.candidates.len());
        let mut labels = Vec::with_capacity(imp.candidates.len());
        for c in &imp.candidates {
            let r = vector_of(&c.news_id, &mut n_unknown)?;
            scores.push(score(&u, &r)?);
            labels.push(c.clicked);
        }
        let s = ImpressionScores { scores, labels };
        if s.usable() {
            per_impression.push(ImpressionMetrics {
                impression_id: imp.impression_id.clone(),
                auc: auc(&s),
                mrr: mrr(&s, mrr_first_only),
                ndcg5: ndcg_at(&s, 5),
                ndcg10: ndcg_at(&s, 10),
            });
        }
        scored.push(s);
    }
    let metrics = aggregate(scored, mrr_first_only);
    Ok(EvaluateOutput { metrics, per_impression, n_unknown_news: n_unknown })
}

/// Most recent `n_max` entries of a history list (history is ordered
/// oldest to newest).
pub fn recent_history(history: &[String], n_max: usize) -> &[String] {
    if history.len() > n_max {
        &history[history.len() - n_max..]
    } else {
        history
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn imp(scores: &[f64], labels: &[u8]) -> ImpressionScores {
        ImpressionScores { scores: scores.to_vec(), labels: labels.to_vec() }
    }

    #[test]
    fn auc_basic() {
        assert_eq!(auc(&imp(&[0.9, 0.1], &[1, 0])), 1.0);
        assert_eq!(auc(&imp(&[0.5, 0.5, 0.5], &[1, 0, 0])), 0.5);
        assert_eq!(auc(&imp(&[0.1, 0.9], &[1, 0])), 0.0);
    }

    #[test]
    fn mrr_basic() {
        assert_eq!(mrr(&imp(&[0.9, 0.1], &[1, 0]), false), 1.0);
        // positive ranked second of three
        assert_eq!(mrr(&imp(&[0.5, 0.9, 0.2], &[1, 0, 0]), false), 0.5);
        // two positives at ranks 1 and 3
        let m = mrr(&imp(&[0.9, 0.5, 0.4], &[1, 0, 1]), false);
        assert!((m - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
        // first-only variant
        let m2 = mrr(&imp(&[0.9, 0.5, 0.4], &[1, 0, 1]), true);
        assert_eq!(m2, 1.0);
    }

    #[test]
    fn ndcg_basic() {
        assert_eq!(ndcg_at(&imp(&[0.9, 0.1, 0.2, 0.3, 0.4], &[1, 0, 0, 0, 0]), 5), 1.0);
        let v = ndcg_at(&imp(&[0.5, 0.9, 0.2, 0.3, 0.4], &[1, 0, 0, 0, 0]), 5);
        assert!((v - 1.0 / 3.0_f64.log2()).abs() < 1e-12);
        // perfect ranking with k >= n
        assert_eq!(ndcg_at(&imp(&[0.9, 0.8, 0.1], &[1, 1, 0]), 10), 1.0);
    }

    #[test]
    fn ndcg_monotone_in_k() {
        let s = imp(&[0.1, 0.9, 0.3, 0.8, 0.2, 0.7], &[1, 0, 1, 0, 1, 0]);
        assert!(ndcg_at(&s, 10) >= ndcg_at(&s, 5));
    }

    #[test]
    fn tie_rank_broken_by_input_order() {
        let s = imp(&[0.5, 0.5], &[0, 1]);
        // positive at input index 1 ranks second under stable tie-breaking
        assert_eq!(mrr(&s, false), 0.5);
    }

    #[test]
    fn aggregate_skips_single_class() {
        let metrics = aggregate(
            vec![
                imp(&[0.9, 0.1], &[1, 0]),
                imp(&[0.9, 0.1], &[1, 1]), // no negative: skipped
                imp(&[0.9, 0.1], &[0, 0]), // no positive: skipped
            ],
            false,
        );
        assert_eq!(metrics.n_impressions_used, 1);
        assert_eq!(metrics.n_impressions_skipped, 2);
        assert_eq!(metrics.auc, 1.0);
    }

    #[test]
    fn recent_history_truncates_from_front() {
        let h: Vec<String> = (0..5).map(|i| format!("n{i}")).collect();
        assert_eq!(recent_history(&h, 3), &h[2..]);
        assert_eq!(recent_history(&h, 10), &h[..]);
    }
}
