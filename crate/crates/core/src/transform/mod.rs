//! HKG → KG transformations.
//!
//! The equivalent transformation introduces one mediator entity `b_k` per
//! qualifier-bearing fact `k` and emits
//!
//! ```text
//! (s, r, o)  (b_k, r#sub, s)  (b_k, r#obj, o)  (b_k, a_i, v_i) for every qualifier
//! ```
//!
//! Plain triple facts are kept as a single `(s, r, o)` edge. The lossy
//! variants (plain star, two clique expansions and the equivalent transform
//! without the `(s, r, o)` motif edge) exist for comparison. Output order is
//! deterministic: facts in canonical dataset order, edges of a fact in
//! emission order, repeated edges dropped on first occurrence.

mod io;
mod recover;
mod stats;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{MEDIATOR_PREFIX, RESERVED_RELATION_CHAR};
use crate::model::{HkgDataset, HyperFact, RelationId, Split, SplitSelector, Vocab};

pub use io::{read_kg, sidecar_path, write_kg};
pub use recover::{recover, recover_with_provenance, Recovered};
pub use stats::{verify_stats, StatTerm, TransformStats};

pub const SUB_SUFFIX: &str = "#sub";
pub const OBJ_SUFFIX: &str = "#obj";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Equivalent,
    Plain,
    CliquePlain,
    CliqueSemantic,
    NoDistinction,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Equivalent,
        Variant::Plain,
        Variant::CliquePlain,
        Variant::CliqueSemantic,
        Variant::NoDistinction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Equivalent => "equivalent",
            Variant::Plain => "plain",
            Variant::CliquePlain => "clique-plain",
            Variant::CliqueSemantic => "clique-semantic",
            Variant::NoDistinction => "no-distinction",
        }
    }

    /// Star-based variants introduce mediators; clique-based ones do not.
    pub fn uses_mediators(self) -> bool {
        matches!(self, Variant::Equivalent | Variant::Plain | Variant::NoDistinction)
    }

    /// Variants that extend the relation vocabulary with `r#sub` / `r#obj`.
    pub fn extends_relations(self) -> bool {
        matches!(self, Variant::Equivalent | Variant::NoDistinction)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown transformation variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Edge of the transformed KG over extended entity / relation ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: u32,
    pub relation: u32,
    pub tail: u32,
}

impl Triple {
    pub fn new(head: u32, relation: u32, tail: u32) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

/// A transformed KG plus the bookkeeping needed to map mediators back to
/// facts. Extended entity ids `0..n_e` are the original entities, followed by
/// one mediator per qualifier-bearing fact. Extended relation ids `0..n_r` are
/// the original relations, followed by `r#sub`, `r#obj` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformedKg {
    pub variant: Variant,
    pub selector: SplitSelector,
    pub entities: Vocab,
    pub relations: Vocab,
    pub num_original_entities: usize,
    pub num_original_relations: usize,
    pub triples: Vec<Triple>,
    /// Source fact index of mediator `m` (extended id `num_original_entities + m`).
    pub mediator_of: Vec<usize>,
    /// Primary relation of the fact represented by mediator `m`.
    pub psi: Vec<RelationId>,
    /// `(fact index, edge)` for every qualifier-free fact.
    pub standalone: Vec<(usize, Triple)>,
    /// `r -> (r#sub, r#obj)` extended relation ids.
    pub sub_obj: BTreeMap<RelationId, (u32, u32)>,
    /// Number of selected facts contributed by each split, in fact order.
    /// Empty when unknown.
    pub split_sizes: Vec<(Split, usize)>,
}

impl TransformedKg {
    pub fn num_mediators(&self) -> usize {
        self.mediator_of.len()
    }

    pub fn is_mediator(&self, ext_entity: u32) -> bool {
        ext_entity as usize >= self.num_original_entities
    }

    pub fn mediator_id(&self, mediator_index: usize) -> u32 {
        (self.num_original_entities + mediator_index) as u32
    }
}

pub fn mediator_label(fact_index: usize) -> String {
    format!("{MEDIATOR_PREFIX}{fact_index}")
}

fn check_reserved(ds: &HkgDataset) -> Result<()> {
    if let Some(label) = ds
        .relations()
        .labels()
        .iter()
        .find(|l| l.contains(RESERVED_RELATION_CHAR))
    {
        return Err(Error::Validation(format!(
            "relation {label:?} collides with the reserved '{RESERVED_RELATION_CHAR}' suffix namespace"
        )));
    }
    if let Some(label) = ds
        .entities()
        .labels()
        .iter()
        .find(|l| l.starts_with(MEDIATOR_PREFIX))
    {
        return Err(Error::Validation(format!(
            "entity {label:?} collides with the mediator namespace"
        )));
    }
    Ok(())
}

/// Edges emitted for one fact. `mediator` is the extended id of the fact's
/// mediator when the variant uses one and the fact has qualifiers.
fn emit_fact(
    variant: Variant,
    fact: &HyperFact,
    mediator: Option<u32>,
    sub_obj: &BTreeMap<RelationId, (u32, u32)>,
) -> Vec<Triple> {
    let (s, r, o) = (fact.subject.0, fact.relation.0, fact.object.0);
    if fact.is_triple() {
        return vec![Triple::new(s, r, o)];
    }
    let quals = fact.qualifiers();
    match variant {
        Variant::Equivalent | Variant::NoDistinction => {
            let b = mediator.expect("star variants assign a mediator to qualifier facts");
            let (sub, obj) = sub_obj[&fact.relation];
            let mut out = Vec::with_capacity(quals.len() + 3);
            if variant == Variant::Equivalent {
                out.push(Triple::new(s, r, o));
            }
            out.push(Triple::new(b, sub, s));
            out.push(Triple::new(b, obj, o));
            out.extend(quals.iter().map(|q| Triple::new(b, q.attribute.0, q.value.0)));
            out
        }
        Variant::Plain => {
            let b = mediator.expect("star variants assign a mediator to qualifier facts");
            fact.entities().map(|e| Triple::new(b, r, e.0)).collect()
        }
        Variant::CliquePlain | Variant::CliqueSemantic => {
            let members: Vec<u32> = fact.entities().map(|e| e.0).collect();
            // label of position p: primary relation for s/o, attribute for a value
            let label = |p: usize| if p < 2 { r } else { quals[p - 2].attribute.0 };
            let mut out = Vec::with_capacity(members.len() * (members.len() - 1) / 2);
            for i in 0..members.len() {
                for j in i + 1..members.len() {
                    let rel = match variant {
                        Variant::CliquePlain => r,
                        _ => label(j),
                    };
                    out.push(Triple::new(members[i], rel, members[j]));
                }
            }
            out
        }
    }
}

/// Runs `variant` over the selected facts of `ds`.
pub fn transform(ds: &HkgDataset, selector: SplitSelector, variant: Variant) -> Result<TransformedKg> {
    check_reserved(ds)?;
    let facts = ds.facts(selector);
    let n_e = ds.entities().len();
    let n_r = ds.relations().len();
    let split_sizes = match selector {
        SplitSelector::Only(split) => vec![(split, facts.len())],
        SplitSelector::All => {
            let mut seen = HashSet::new();
            Split::ALL
                .iter()
                .map(|&s| (s, ds.split(s).iter().filter(|f| seen.insert(*f)).count()))
                .collect()
        }
    };

    let mut entities = ds.entities().clone();
    let mut relations = ds.relations().clone();

    let mut sub_obj = BTreeMap::new();
    if variant.extends_relations() {
        let primary: BTreeSet<RelationId> = facts.iter().map(|f| f.relation).collect();
        for r in primary {
            let base = ds.relation_label(r);
            let sub = relations.intern(&format!("{base}{SUB_SUFFIX}"));
            let obj = relations.intern(&format!("{base}{OBJ_SUFFIX}"));
            sub_obj.insert(r, (sub, obj));
        }
    }

    let mut mediator_of = Vec::new();
    let mut psi = Vec::new();
    let mut mediators: Vec<Option<u32>> = vec![None; facts.len()];
    if variant.uses_mediators() {
        for (k, fact) in facts.iter().enumerate() {
            if !fact.is_triple() {
                let id = entities.intern(&mediator_label(k));
                debug_assert_eq!(id as usize, n_e + mediator_of.len());
                mediators[k] = Some(id);
                mediator_of.push(k);
                psi.push(fact.relation);
            }
        }
    }

    let per_fact: Vec<Vec<Triple>> = facts
        .par_iter()
        .enumerate()
        .map(|(k, fact)| emit_fact(variant, fact, mediators[k], &sub_obj))
        .collect();

    let mut seen = HashSet::new();
    let mut triples = Vec::new();
    let mut standalone = Vec::new();
    for (k, edges) in per_fact.into_iter().enumerate() {
        if facts[k].is_triple() {
            standalone.push((k, edges[0]));
        }
        for t in edges {
            if seen.insert(t) {
                triples.push(t);
            }
        }
    }

    Ok(TransformedKg {
        variant,
        selector,
        entities,
        relations,
        num_original_entities: n_e,
        num_original_relations: n_r,
        triples,
        mediator_of,
        psi,
        standalone,
        sub_obj,
        split_sizes,
    })
}

/// The equivalent transformation.
pub fn transform_equivalent(ds: &HkgDataset, selector: SplitSelector) -> Result<TransformedKg> {
    transform(ds, selector, Variant::Equivalent)
}

/// One of the lossy comparison variants.
pub fn transform_variant(ds: &HkgDataset, selector: SplitSelector, variant: Variant) -> Result<TransformedKg> {
    transform(ds, selector, variant)
}
