//! Filtered link prediction at every entity position.
//!
//! A query blanks one entity position of a fact; every original entity is
//! scored in that position, other entities known to complete the pattern
//! (in any split) are removed, and the gold entity is ranked with ties
//! counted against it.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::Scorer;
use crate::error::Result;
use crate::model::{HkgDataset, HyperFact, Split, SplitSelector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionKind {
    Subject,
    Object,
    Value,
}

impl PositionKind {
    pub fn of(position: usize) -> Self {
        match position {
            0 => PositionKind::Subject,
            1 => PositionKind::Object,
            _ => PositionKind::Value,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PositionKind::Subject => "subject",
            PositionKind::Object => "object",
            PositionKind::Value => "value",
        }
    }
}

/// A fact with one entity position blanked.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatternKey {
    pub relation: u32,
    pub subject: Option<u32>,
    pub object: Option<u32>,
    /// Attribute of the blanked qualifier value.
    pub hole_attribute: Option<u32>,
    /// Remaining qualifiers, sorted.
    pub qualifiers: Vec<(u32, u32)>,
}

impl PatternKey {
    pub fn of(fact: &HyperFact, position: usize) -> Self {
        let mut qualifiers: Vec<(u32, u32)> = fact.qualifiers().iter().map(|q| (q.attribute.0, q.value.0)).collect();
        let hole_attribute = if position >= 2 {
            Some(qualifiers.remove(position - 2).0)
        } else {
            None
        };
        qualifiers.sort_unstable();
        Self {
            relation: fact.relation.0,
            subject: (position != 0).then_some(fact.subject.0),
            object: (position != 1).then_some(fact.object.0),
            hole_attribute,
            qualifiers,
        }
    }
}

/// Known completions of every pattern over all splits.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    map: HashMap<PatternKey, HashSet<u32>>,
}

impl FilterIndex {
    pub fn build(ds: &HkgDataset) -> Self {
        let mut map: HashMap<PatternKey, HashSet<u32>> = HashMap::new();
        for fact in ds.all_facts() {
            for p in 0..fact.num_positions() {
                let e = fact.entity_at(p).expect("position in range").0;
                map.entry(PatternKey::of(fact, p)).or_default().insert(e);
            }
        }
        Self { map }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, key: &PatternKey) -> Option<&HashSet<u32>> {
        self.map.get(key)
    }

    pub fn answers(&self, fact: &HyperFact, position: usize) -> Option<&HashSet<u32>> {
        self.map.get(&PatternKey::of(fact, position))
    }

    /// Total number of (pattern, entity) entries.
    pub fn num_entries(&self) -> usize {
        self.map.values().map(HashSet::len).sum()
    }
}

/// Pessimistic filtered rank of `gold`: one plus the number of unfiltered
/// other candidates scoring at least as high.
pub fn filtered_rank(scores: &[f64], gold: u32, filter: Option<&HashSet<u32>>) -> usize {
    let g = scores[gold as usize];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(e, s)| {
            e as u32 != gold && !filter.is_some_and(|f| f.contains(&(e as u32))) && !(*s < g)
        })
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRank {
    pub fact: usize,
    pub position: usize,
    pub kind: PositionKind,
    pub arity: usize,
    pub gold: u32,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub mrr: f64,
    pub hits_at_1: f64,
    pub hits_at_3: f64,
    pub hits_at_10: f64,
}

impl Metrics {
    pub fn from_ranks(ranks: impl IntoIterator<Item = usize>) -> Self {
        let (mut n, mut rr, mut h1, mut h3, mut h10) = (0usize, 0.0, 0usize, 0usize, 0usize);
        for r in ranks {
            n += 1;
            rr += 1.0 / r as f64;
            h1 += usize::from(r <= 1);
            h3 += usize::from(r <= 3);
            h10 += usize::from(r <= 10);
        }
        let div = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
        Self {
            count: n,
            mrr: div(rr),
            hits_at_1: div(h1 as f64),
            hits_at_3: div(h3 as f64),
            hits_at_10: div(h10 as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub split: String,
    pub overall: Metrics,
    pub by_position: BTreeMap<String, Metrics>,
    /// Keyed by the number of entity positions of the fact.
    pub by_arity: BTreeMap<usize, Metrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub queries: Vec<QueryRank>,
}

impl RankReport {
    pub fn from_queries(split: &str, queries: Vec<QueryRank>) -> Self {
        let mut by_kind: BTreeMap<PositionKind, Vec<usize>> = BTreeMap::new();
        let mut by_arity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for q in &queries {
            by_kind.entry(q.kind).or_default().push(q.rank);
            by_arity.entry(q.arity).or_default().push(q.rank);
        }
        Self {
            split: split.to_owned(),
            overall: Metrics::from_ranks(queries.iter().map(|q| q.rank)),
            by_position: by_kind
                .into_iter()
                .map(|(k, r)| (k.name().to_owned(), Metrics::from_ranks(r)))
                .collect(),
            by_arity: by_arity.into_iter().map(|(a, r)| (a, Metrics::from_ranks(r))).collect(),
            queries,
        }
    }

    /// `fact,position,kind,arity,gold,rank` rows.
    pub fn ranks_csv(&self) -> String {
        let mut out = String::from("fact,position,kind,arity,gold,rank\n");
        for q in &self.queries {
            let _ = writeln!(out, "{},{},{},{},{},{}", q.fact, q.position, q.kind.name(), q.arity, q.gold, q.rank);
        }
        out
    }
}

/// Ranks every position of every fact in `facts`.
pub fn evaluate_facts(scorer: &Scorer, facts: &[HyperFact], index: &FilterIndex, split: &str) -> Result<RankReport> {
    let jobs: Vec<(usize, usize)> = facts
        .iter()
        .enumerate()
        .flat_map(|(k, f)| (0..f.num_positions()).map(move |p| (k, p)))
        .collect();
    let queries = jobs
        .par_iter()
        .map(|&(k, p)| {
            let fact = &facts[k];
            let scores = scorer.score_batch(fact, p)?;
            let gold = fact.entity_at(p).expect("position in range").0;
            Ok(QueryRank {
                fact: k,
                position: p,
                kind: PositionKind::of(p),
                arity: fact.num_positions(),
                gold,
                rank: filtered_rank(&scores, gold, index.answers(fact, p)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankReport::from_queries(split, queries))
}

pub fn evaluate_split(scorer: &Scorer, ds: &HkgDataset, split: Split, index: &FilterIndex) -> Result<RankReport> {
    let facts: Vec<HyperFact> = ds.facts(SplitSelector::Only(split)).into_iter().cloned().collect();
    evaluate_facts(scorer, &facts, index, split.name())
}
