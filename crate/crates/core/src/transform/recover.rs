use std::collections::{HashMap, HashSet};

use super::{TransformedKg, Triple, Variant, OBJ_SUFFIX, SUB_SUFFIX};
use crate::error::{Error, Result};
use crate::model::{EntityId, HyperFact, Qualifier, RelationId};

/// Facts recovered from an equivalent-transformed KG, in the original id
/// space of the KG's first `num_original_*` vocabulary entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recovered {
    pub facts: Vec<HyperFact>,
}

enum BaseRole {
    Sub,
    Obj,
}

fn split_extended(label: &str) -> Option<(&str, BaseRole)> {
    if let Some(base) = label.strip_suffix(SUB_SUFFIX) {
        Some((base, BaseRole::Sub))
    } else {
        label.strip_suffix(OBJ_SUFFIX).map(|base| (base, BaseRole::Obj))
    }
}

/// Recovers facts from the KG alone. A triple that is the `(s, r, o)` motif
/// edge of some mediator is treated as motif-only, so a qualifier-free fact
/// sharing its primary triple with a qualifier fact is not reproduced.
pub fn recover(kg: &TransformedKg) -> Result<Recovered> {
    recover_impl(kg, false)
}

/// Recovers facts using the standalone-triple provenance stored alongside
/// the KG, which resolves the motif/standalone ambiguity. Output follows the
/// original fact order.
pub fn recover_with_provenance(kg: &TransformedKg) -> Result<Recovered> {
    recover_impl(kg, true)
}

fn recover_impl(kg: &TransformedKg, use_provenance: bool) -> Result<Recovered> {
    if kg.variant != Variant::Equivalent {
        return Err(Error::Structure(format!(
            "recovery is only defined for the equivalent transformation, got {}",
            kg.variant
        )));
    }
    let n_e = kg.num_original_entities as u32;
    let n_r = kg.num_original_relations as u32;
    let triple_set: HashSet<Triple> = kg.triples.iter().copied().collect();

    // Mediator neighbourhoods; each mediator only ever appears as a head.
    let mut neighbourhood: HashMap<u32, Vec<(u32, u32)>> = HashMap::new();
    let mut plain_edges = Vec::new();
    for t in &kg.triples {
        if t.tail >= n_e {
            return Err(Error::Structure(format!(
                "mediator {} appears as the tail of an edge",
                kg.entities.label(t.tail).unwrap_or("?")
            )));
        }
        if t.head >= n_e {
            neighbourhood.entry(t.head).or_default().push((t.relation, t.tail));
        } else {
            if t.relation >= n_r {
                return Err(Error::Structure(format!(
                    "extended relation {} used between original entities",
                    kg.relations.label(t.relation).unwrap_or("?")
                )));
            }
            plain_edges.push(*t);
        }
    }

    let mut ordered: Vec<(usize, HyperFact)> = Vec::new();
    let mut motif_edges = HashSet::new();
    for m in 0..kg.num_mediators() {
        let b = kg.mediator_id(m);
        let b_label = kg.entities.label(b).unwrap_or("?");
        let edges = neighbourhood.remove(&b).unwrap_or_default();
        let mut sub: Option<(&str, u32)> = None;
        let mut obj: Option<(&str, u32)> = None;
        let mut qualifiers = Vec::new();
        for (rel, tail) in edges {
            let label = kg.relations.label(rel).unwrap_or("");
            match (rel >= n_r).then(|| split_extended(label)).flatten() {
                Some((base, BaseRole::Sub)) => {
                    if sub.replace((base, tail)).is_some() {
                        return Err(Error::Structure(format!("mediator {b_label} has several {SUB_SUFFIX} edges")));
                    }
                }
                Some((base, BaseRole::Obj)) => {
                    if obj.replace((base, tail)).is_some() {
                        return Err(Error::Structure(format!("mediator {b_label} has several {OBJ_SUFFIX} edges")));
                    }
                }
                None if rel < n_r => qualifiers.push(Qualifier::new(RelationId(rel), EntityId(tail))),
                None => {
                    return Err(Error::Structure(format!(
                        "mediator {b_label} has an edge with unknown extended relation {label:?}"
                    )))
                }
            }
        }
        let (sub_base, s) =
            sub.ok_or_else(|| Error::Structure(format!("mediator {b_label} lacks a {SUB_SUFFIX} edge")))?;
        let (obj_base, o) =
            obj.ok_or_else(|| Error::Structure(format!("mediator {b_label} lacks a {OBJ_SUFFIX} edge")))?;
        if sub_base != obj_base {
            return Err(Error::Structure(format!(
                "mediator {b_label} links {sub_base:?} and {obj_base:?} as subject/object relations"
            )));
        }
        let r = kg
            .relations
            .get(sub_base)
            .filter(|&r| r < n_r)
            .ok_or_else(|| Error::Structure(format!("base relation {sub_base:?} is not an original relation")))?;
        let motif = Triple::new(s, r, o);
        if !triple_set.contains(&motif) {
            return Err(Error::Structure(format!(
                "mediator {b_label}: motif triple ({}, {sub_base}, {}) is missing",
                kg.entities.label(s).unwrap_or("?"),
                kg.entities.label(o).unwrap_or("?")
            )));
        }
        motif_edges.insert(motif);
        ordered.push((
            kg.mediator_of[m],
            HyperFact::new(EntityId(s), RelationId(r), EntityId(o), qualifiers),
        ));
    }
    if let Some(b) = neighbourhood.keys().min() {
        return Err(Error::Structure(format!(
            "entity {} is outside the mediator range",
            kg.entities.label(*b).unwrap_or("?")
        )));
    }

    if use_provenance {
        let recorded: HashSet<Triple> = kg.standalone.iter().map(|(_, t)| *t).collect();
        for (k, t) in &kg.standalone {
            ordered.push((*k, HyperFact::triple(EntityId(t.head), RelationId(t.relation), EntityId(t.tail))));
        }
        // Edges that are neither motifs nor recorded would be silently lost.
        if let Some(t) = plain_edges
            .iter()
            .find(|t| !motif_edges.contains(*t) && !recorded.contains(*t))
        {
            return Err(Error::Structure(format!(
                "edge ({}, {}, {}) is neither a motif nor a recorded standalone fact",
                t.head, t.relation, t.tail
            )));
        }
        ordered.sort_by_key(|(k, _)| *k);
    } else {
        let next = kg.mediator_of.len();
        ordered.extend(
            plain_edges
                .iter()
                .filter(|t| !motif_edges.contains(*t))
                .enumerate()
                .map(|(i, t)| {
                    (
                        next + i,
                        HyperFact::triple(EntityId(t.head), RelationId(t.relation), EntityId(t.tail)),
                    )
                }),
        );
    }
    Ok(Recovered {
        facts: ordered.into_iter().map(|(_, f)| f).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{DatasetBuilder, LabeledFact};
    use crate::model::{Split, SplitSelector};
    use crate::transform::{transform_equivalent, transform_variant};

    fn dataset(facts: &[LabeledFact]) -> crate::model::HkgDataset {
        let mut b = DatasetBuilder::new();
        for f in facts {
            b.push(Split::Train, f).unwrap();
        }
        b.build().unwrap()
    }

    #[test]
    fn recovers_turing_fact() {
        let ds = dataset(&[LabeledFact::new(
            "AlanTuring",
            "educatedAt",
            "Cambridge",
            &[("degree", "Bachelor")],
        )]);
        let kg = transform_equivalent(&ds, SplitSelector::All).unwrap();
        assert_eq!(recover(&kg).unwrap().facts, ds.split(Split::Train).to_vec());
    }

    #[test]
    fn single_triple_recovers_to_triple_fact() {
        let ds = dataset(&[LabeledFact::new("s", "r", "o", &[])]);
        let kg = transform_equivalent(&ds, SplitSelector::All).unwrap();
        assert_eq!(recover(&kg).unwrap().facts, ds.split(Split::Train).to_vec());
    }

    #[test]
    fn shared_primary_triple_needs_provenance() {
        let ds = dataset(&[
            LabeledFact::new("s", "r", "o", &[]),
            LabeledFact::new("s", "r", "o", &[("a", "v")]),
        ]);
        let kg = transform_equivalent(&ds, SplitSelector::All).unwrap();
        assert_eq!(recover(&kg).unwrap().facts.len(), 1);
        assert_eq!(recover_with_provenance(&kg).unwrap().facts, ds.split(Split::Train).to_vec());
    }

    #[test]
    fn missing_motif_is_a_structure_error() {
        let ds = dataset(&[LabeledFact::new("s", "r", "o", &[("a", "v")])]);
        let mut kg = transform_equivalent(&ds, SplitSelector::All).unwrap();
        let n = kg.num_original_entities as u32;
        kg.triples.retain(|t| t.head >= n);
        assert!(matches!(recover(&kg), Err(Error::Structure(_))));
    }

    #[test]
    fn duplicate_sub_edge_is_a_structure_error() {
        let ds = dataset(&[LabeledFact::new("s", "r", "o", &[("a", "v")])]);
        let mut kg = transform_equivalent(&ds, SplitSelector::All).unwrap();
        let sub = kg.sub_obj[&RelationId(0)].0;
        let b = kg.mediator_id(0);
        kg.triples.push(Triple::new(b, sub, 2));
        assert!(matches!(recover(&kg), Err(Error::Structure(_))));
    }

    #[test]
    fn missing_obj_edge_is_a_structure_error() {
        let ds = dataset(&[LabeledFact::new("s", "r", "o", &[("a", "v")])]);
        let mut kg = transform_equivalent(&ds, SplitSelector::All).unwrap();
        let obj = kg.sub_obj[&RelationId(0)].1;
        kg.triples.retain(|t| t.relation != obj);
        assert!(matches!(recover(&kg), Err(Error::Structure(_))));
    }

    #[test]
    fn lossy_variants_are_not_recoverable() {
        let ds = dataset(&[LabeledFact::new("s", "r", "o", &[("a", "v")])]);
        let kg = transform_variant(&ds, SplitSelector::All, Variant::Plain).unwrap();
        assert!(recover(&kg).is_err());
    }

    #[test]
    fn self_loops_and_repeated_participants() {
        let ds = dataset(&[
            LabeledFact::new("x", "r", "x", &[("a", "x"), ("r", "y")]),
            LabeledFact::new("y", "a", "x", &[("r", "y")]),
        ]);
        let kg = transform_equivalent(&ds, SplitSelector::All).unwrap();
        assert_eq!(recover_with_provenance(&kg).unwrap().facts, ds.split(Split::Train).to_vec());
        assert_eq!(recover(&kg).unwrap().facts, ds.split(Split::Train).to_vec());
    }
}
