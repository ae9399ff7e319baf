//! Ranking metrics: filtered MRR / hit rate for KG completion, and MAP,
//! precision and recall at cutoffs for recommendation.

use std::collections::HashSet;

use serde_json::{json, Value};

use crate::data::{FilterIndex, InteractionStore, Triple};
use crate::error::Result;

/// Scores every entity as the tail of `(head, relation, ?)`.
pub trait TailScorer {
    fn n_entities(&self) -> usize;
    fn score_tails(&self, head: usize, relation: usize) -> Result<Vec<f64>>;
}

/// Scores every item for a user.
pub trait ItemScorer {
    fn n_items(&self) -> usize;
    fn score_items(&self, user: usize) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KgMetrics {
    pub mrr: f64,
    pub hr1: f64,
    pub hr3: f64,
    pub hr10: f64,
    /// Number of ranked queries (two per test triple).
    pub queries: usize,
}

impl KgMetrics {
    pub fn to_json(&self) -> Value {
        json!({ "mrr": self.mrr, "hr@1": self.hr1, "hr@3": self.hr3, "hr@10": self.hr10, "queries": self.queries })
    }
}

/// Filtered rank of `target`: one plus the number of unfiltered candidates
/// scoring at least as high. Ties count against the target.
pub fn filtered_rank(scores: &[f64], target: usize, filtered: Option<&HashSet<usize>>) -> usize {
    let s = scores[target];
    if s.is_nan() {
        return scores.len();
    }
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(e, &v)| e != target && v >= s && !filtered.is_some_and(|f| f.contains(&e)))
        .count()
}

/// Ranks the tail of every triple and, through the reciprocal relation, its
/// head, filtering other known-true answers.
pub fn kg_rank_metrics(
    scorer: &dyn TailScorer,
    triples: &[Triple],
    filter: &FilterIndex,
    n_base_relations: usize,
) -> Result<KgMetrics> {
    let mut m = KgMetrics::default();
    for t in triples {
        for q in [*t, t.reciprocal(n_base_relations)] {
            let scores = scorer.score_tails(q.head, q.relation)?;
            let rank = filtered_rank(&scores, q.tail, filter.tails(q.head, q.relation));
            m.mrr += 1.0 / rank as f64;
            m.hr1 += f64::from(rank <= 1);
            m.hr3 += f64::from(rank <= 3);
            m.hr10 += f64::from(rank <= 10);
            m.queries += 1;
        }
    }
    if m.queries > 0 {
        let n = m.queries as f64;
        m.mrr /= n;
        m.hr1 /= n;
        m.hr3 /= n;
        m.hr10 /= n;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RecMetrics {
    pub map: f64,
    pub p5: f64,
    pub p10: f64,
    pub r5: f64,
    pub r10: f64,
    /// Users with at least one held-out item.
    pub users: usize,
}

impl RecMetrics {
    pub fn to_json(&self) -> Value {
        json!({ "map": self.map, "p@5": self.p5, "p@10": self.p10, "r@5": self.r5, "r@10": self.r10, "users": self.users })
    }
}

/// Which held-out split to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Valid,
    Test,
}

/// Average precision, P@k and R@k of one ranked list against `relevant`.
pub fn ranking_stats(ranked: &[usize], relevant: &HashSet<usize>) -> (f64, [f64; 2], [f64; 2]) {
    let mut hits = 0usize;
    let mut ap = 0.0;
    let mut at = [0usize; 2];
    for (pos, item) in ranked.iter().enumerate() {
        if relevant.contains(item) {
            hits += 1;
            ap += hits as f64 / (pos + 1) as f64;
        }
        if pos + 1 == 5 {
            at[0] = hits;
        }
        if pos + 1 == 10 {
            at[1] = hits;
        }
    }
    if ranked.len() < 5 {
        at[0] = hits;
    }
    if ranked.len() < 10 {
        at[1] = hits;
    }
    let r = relevant.len() as f64;
    (
        ap / r,
        [at[0] as f64 / 5.0, at[1] as f64 / 10.0],
        [at[0] as f64 / r, at[1] as f64 / r],
    )
}

/// For each user, ranks every item outside their training set (ties by item
/// id) and scores the ranking against the held-out split.
pub fn rec_rank_metrics(scorer: &dyn ItemScorer, data: &InteractionStore, split: Split) -> Result<RecMetrics> {
    let held = match split {
        Split::Valid => &data.valid,
        Split::Test => &data.test,
    };
    let mut m = RecMetrics::default();
    for (u, items) in held.iter().enumerate() {
        if items.is_empty() {
            continue;
        }
        let scores = scorer.score_items(u)?;
        let mut ranked: Vec<usize> = (0..scores.len()).filter(|&i| !data.in_train(u, i)).collect();
        ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let relevant: HashSet<usize> = items.iter().copied().collect();
        let (ap, p, r) = ranking_stats(&ranked, &relevant);
        m.map += ap;
        m.p5 += p[0];
        m.p10 += p[1];
        m.r5 += r[0];
        m.r10 += r[1];
        m.users += 1;
    }
    if m.users > 0 {
        let n = m.users as f64;
        m.map /= n;
        m.p5 /= n;
        m.p10 /= n;
        m.r5 /= n;
        m.r10 /= n;
    }
    Ok(m)
}

/// Expected filtered MRR of a uniformly random scorer over `n` candidates.
pub fn random_mrr(n: usize) -> f64 {
    (1..=n).map(|i| 1.0 / i as f64).sum::<f64>() / n as f64
}
