//! Candidate ranking and top-k accuracy.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MentionRecord};
use crate::interaction::Pairs;
use crate::model::Model;
use crate::numerics::Real;
use crate::Error;

/// Cut-offs reported by default.
pub const REPORT_KS: [usize; 5] = [1, 3, 5, 10, 20];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub entity_id: String,
    pub score: f64,
    pub s_v: f64,
    pub s_t: f64,
    pub s_c: f64,
}

/// Descending score, ties broken by ascending entity id.
pub fn rank_order(a: &RankedCandidate, b: &RankedCandidate) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.entity_id.cmp(&b.entity_id))
}

pub fn sort_candidates(c: &mut [RankedCandidate]) {
    c.sort_by(rank_order);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionRanking {
    pub mention_id: String,
    pub gold: Option<String>,
    /// 1-based; `None` when the gold is missing or not among the candidates.
    pub gold_rank: Option<usize>,
    pub candidates: Vec<RankedCandidate>,
}

impl MentionRanking {
    pub fn new(mention_id: String, gold: Option<String>, mut candidates: Vec<RankedCandidate>) -> Self {
        sort_candidates(&mut candidates);
        let gold_rank = gold
            .as_ref()
            .and_then(|g| candidates.iter().position(|c| &c.entity_id == g))
            .map(|p| p + 1);
        MentionRanking {
            mention_id,
            gold,
            gold_rank,
            candidates,
        }
    }
}

/// Fraction of rankings whose gold sits in the top `k`; misses include
/// mentions without a usable gold. Empty input gives 0.
pub fn hit_at_k(rankings: &[MentionRanking], k: usize) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    let hits = rankings
        .iter()
        .filter(|r| r.gold_rank.is_some_and(|g| g <= k))
        .count();
    hits as f64 / rankings.len() as f64
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub mentions: usize,
    pub pairs_scored: usize,
    /// Mentions whose gold entity is flagged missing from the KB.
    pub null_gold: usize,
    /// Mentions whose gold is in the KB but not among their candidates.
    pub gold_not_in_candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub split: String,
    pub hit_at: BTreeMap<usize, f64>,
    pub counts: ReportCounts,
    pub mentions: Vec<MentionRanking>,
}

impl RankingReport {
    pub fn from_rankings(split: impl Into<String>, ks: &[usize], mentions: Vec<MentionRanking>) -> Self {
        let mut counts = ReportCounts {
            mentions: mentions.len(),
            ..ReportCounts::default()
        };
        for m in &mentions {
            counts.pairs_scored += m.candidates.len();
            match (&m.gold, m.gold_rank) {
                (None, _) => counts.null_gold += 1,
                (Some(_), None) => counts.gold_not_in_candidates += 1,
                _ => {}
            }
        }
        if counts.null_gold + counts.gold_not_in_candidates > 0 {
            log::warn!(
                "{} mention(s) have no gold among their candidates and count as misses",
                counts.null_gold + counts.gold_not_in_candidates
            );
        }
        let hit_at = ks.iter().map(|&k| (k, hit_at_k(&mentions, k))).collect();
        RankingReport {
            split: split.into(),
            hit_at,
            counts,
            mentions,
        }
    }

    pub fn hit(&self, k: usize) -> f64 {
        self.hit_at.get(&k).copied().unwrap_or_else(|| hit_at_k(&self.mentions, k))
    }
}

/// Scores `(mention, kb index)` pairs in chunks of at most `budget`.
fn score_flat<T: Real>(
    model: &Model<T>,
    ds: &Dataset,
    flat: &[(usize, usize)],
    budget: usize,
) -> Result<Vec<RankedCandidate>, Error> {
    let mut out = Vec::with_capacity(flat.len());
    for chunk in flat.chunks(budget.max(1)) {
        let mut m_slot: HashMap<usize, usize> = HashMap::new();
        let mut e_slot: HashMap<usize, usize> = HashMap::new();
        let mut m_feats = Vec::new();
        let mut e_feats = Vec::new();
        let mut pairs = Pairs::default();
        for &(mi, ei) in chunk {
            let a = *m_slot.entry(mi).or_insert_with(|| {
                m_feats.push(&ds.mentions[mi].features);
                m_feats.len() - 1
            });
            let b = *e_slot.entry(ei).or_insert_with(|| {
                e_feats.push(&ds.kb.get(ei).features);
                e_feats.len() - 1
            });
            pairs.push(a, b);
        }
        let s = model.score(&m_feats, &e_feats, &pairs)?;
        for (p, &(_, ei)) in chunk.iter().enumerate() {
            out.push(RankedCandidate {
                entity_id: ds.kb.get(ei).id.clone(),
                score: s.s[p],
                s_v: s.s_v[p],
                s_t: s.s_t[p],
                s_c: s.s_c[p],
            });
        }
    }
    Ok(out)
}

fn check<T: Real>(model: &Model<T>, ds: &Dataset) -> Result<(), Error> {
    model.check_dims(ds.dims)
}

/// Every candidate of one mention, ranked.
pub fn rank<T: Real>(model: &Model<T>, ds: &Dataset, mention: &MentionRecord) -> Result<MentionRanking, Error> {
    check(model, ds)?;
    let mi = ds
        .mentions
        .iter()
        .position(|m| m.id == mention.id)
        .ok_or_else(|| Error::Validation(format!("mention {:?} is not in split {}", mention.id, ds.split)))?;
    let flat: Vec<(usize, usize)> = ds.candidate_indices(mention).into_iter().map(|e| (mi, e)).collect();
    if flat.is_empty() {
        return Err(Error::Validation(format!("mention {:?} has no candidates", mention.id)));
    }
    let scored = score_flat(model, ds, &flat, model.config.eval_pair_budget)?;
    Ok(MentionRanking::new(mention.id.clone(), mention.gold.clone(), scored))
}

/// Ranks every mention of `ds` against its candidates.
pub fn rank_dataset<T: Real>(model: &Model<T>, ds: &Dataset) -> Result<Vec<MentionRanking>, Error> {
    check(model, ds)?;
    let mut flat = Vec::new();
    let mut bounds = Vec::with_capacity(ds.len());
    for (mi, m) in ds.mentions.iter().enumerate() {
        let start = flat.len();
        flat.extend(ds.candidate_indices(m).into_iter().map(|e| (mi, e)));
        bounds.push(start..flat.len());
    }
    let scored = score_flat(model, ds, &flat, model.config.eval_pair_budget)?;
    Ok(ds
        .mentions
        .iter()
        .zip(bounds)
        .map(|(m, r)| MentionRanking::new(m.id.clone(), m.gold.clone(), scored[r].to_vec()))
        .collect())
}

pub fn evaluate<T: Real>(model: &Model<T>, ds: &Dataset, ks: &[usize]) -> Result<RankingReport, Error> {
    Ok(RankingReport::from_rankings(ds.split.clone(), ks, rank_dataset(model, ds)?))
}
