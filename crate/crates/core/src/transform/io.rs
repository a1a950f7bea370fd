//! Transformed KG files: `head<TAB>relation<TAB>tail` lines plus a JSON
//! sidecar (`<file>.meta.json`) with the mediator bookkeeping.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{TransformedKg, Triple, Variant, OBJ_SUFFIX, SUB_SUFFIX};
use crate::error::{Error, Result};
use crate::ingest::{MEDIATOR_PREFIX, RESERVED_RELATION_CHAR};
use crate::model::{RelationId, Split, SplitSelector, Vocab};

const SIDECAR_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct MediatorRecord {
    label: String,
    fact: usize,
    psi: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct StandaloneRecord {
    fact: usize,
    triple: [String; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    variant: Variant,
    selector: SplitSelector,
    original_entities: Vec<String>,
    extended_relations: Vec<String>,
    num_original_relations: usize,
    mediators: Vec<MediatorRecord>,
    standalone: Vec<StandaloneRecord>,
    #[serde(default)]
    split_sizes: Vec<(Split, usize)>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn label(v: &Vocab, id: u32) -> &str {
    v.label(id).unwrap_or("?")
}

/// Writes the triple file and its sidecar; returns both paths.
pub fn write_kg(kg: &TransformedKg, path: &Path) -> Result<(PathBuf, PathBuf)> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = String::new();
    for t in &kg.triples {
        text.push_str(label(&kg.entities, t.head));
        text.push('\t');
        text.push_str(label(&kg.relations, t.relation));
        text.push('\t');
        text.push_str(label(&kg.entities, t.tail));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;

    let sidecar = Sidecar {
        version: SIDECAR_VERSION,
        variant: kg.variant,
        selector: kg.selector,
        original_entities: kg.entities.labels()[..kg.num_original_entities].to_vec(),
        extended_relations: kg.relations.labels().to_vec(),
        num_original_relations: kg.num_original_relations,
        mediators: (0..kg.num_mediators())
            .map(|m| MediatorRecord {
                label: label(&kg.entities, kg.mediator_id(m)).to_owned(),
                fact: kg.mediator_of[m],
                psi: label(&kg.relations, kg.psi[m].0).to_owned(),
            })
            .collect(),
        standalone: kg
            .standalone
            .iter()
            .map(|(k, t)| StandaloneRecord {
                fact: *k,
                triple: [
                    label(&kg.entities, t.head).to_owned(),
                    label(&kg.relations, t.relation).to_owned(),
                    label(&kg.entities, t.tail).to_owned(),
                ],
            })
            .collect(),
        split_sizes: kg.split_sizes.clone(),
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar)?;
    fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
    Ok((path.to_path_buf(), side))
}

fn read_triples(path: &Path) -> Result<Vec<[String; 3]>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let display = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::format(&display, i + 1, "expected head<TAB>relation<TAB>tail"));
        }
        out.push([fields[0].to_owned(), fields[1].to_owned(), fields[2].to_owned()]);
    }
    Ok(out)
}

/// Reads a transformed KG. Without a sidecar the KG is assumed to be an
/// equivalent transformation: mediators are recognised by their label prefix
/// and standalone provenance is unavailable.
pub fn read_kg(path: &Path) -> Result<TransformedKg> {
    let rows = read_triples(path)?;
    let side = sidecar_path(path);
    if side.is_file() {
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text)?;
        from_sidecar(rows, sidecar)
    } else {
        from_labels_only(rows)
    }
}

fn lookup(v: &Vocab, label: &str, what: &str) -> Result<u32> {
    v.get(label)
        .ok_or_else(|| Error::Structure(format!("unknown {what} label {label:?}")))
}

fn from_sidecar(rows: Vec<[String; 3]>, sc: Sidecar) -> Result<TransformedKg> {
    if sc.version != SIDECAR_VERSION {
        return Err(Error::Structure(format!("unsupported sidecar version {}", sc.version)));
    }
    let num_original_entities = sc.original_entities.len();
    let mut entities = Vocab::from_labels(sc.original_entities)?;
    let relations = Vocab::from_labels(sc.extended_relations)?;
    let mut mediator_of = Vec::with_capacity(sc.mediators.len());
    let mut psi = Vec::with_capacity(sc.mediators.len());
    for m in &sc.mediators {
        if entities.get(&m.label).is_some() {
            return Err(Error::Structure(format!("duplicate mediator {:?}", m.label)));
        }
        entities.intern(&m.label);
        mediator_of.push(m.fact);
        psi.push(RelationId(lookup(&relations, &m.psi, "relation")?));
    }
    let triples = rows
        .iter()
        .map(|[h, r, t]| {
            Ok(Triple::new(
                lookup(&entities, h, "entity")?,
                lookup(&relations, r, "relation")?,
                lookup(&entities, t, "entity")?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let standalone = sc
        .standalone
        .iter()
        .map(|s| {
            let [h, r, t] = &s.triple;
            Ok((
                s.fact,
                Triple::new(
                    lookup(&entities, h, "entity")?,
                    lookup(&relations, r, "relation")?,
                    lookup(&entities, t, "entity")?,
                ),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let sub_obj = sub_obj_map(&relations, sc.num_original_relations);
    Ok(TransformedKg {
        variant: sc.variant,
        selector: sc.selector,
        entities,
        relations,
        num_original_entities,
        num_original_relations: sc.num_original_relations,
        triples,
        mediator_of,
        psi,
        standalone,
        sub_obj,
        split_sizes: sc.split_sizes,
    })
}

fn sub_obj_map(relations: &Vocab, n_r: usize) -> BTreeMap<RelationId, (u32, u32)> {
    let mut out = BTreeMap::new();
    for (id, l) in relations.labels().iter().enumerate().skip(n_r) {
        if let Some(base) = l.strip_suffix(SUB_SUFFIX) {
            if let (Some(r), Some(obj)) = (relations.get(base), relations.get(&format!("{base}{OBJ_SUFFIX}"))) {
                out.insert(RelationId(r), (id as u32, obj));
            }
        }
    }
    out
}

fn from_labels_only(rows: Vec<[String; 3]>) -> Result<TransformedKg> {
    let is_med = |l: &str| l.starts_with(MEDIATOR_PREFIX);
    let is_ext = |l: &str| l.contains(RESERVED_RELATION_CHAR);

    let mut entities = Vocab::new();
    let mut relations = Vocab::new();
    for [h, r, t] in &rows {
        for e in [h, t] {
            if !is_med(e) {
                entities.intern(e);
            }
        }
        if !is_ext(r) {
            relations.intern(r);
        }
    }
    let num_original_entities = entities.len();
    let num_original_relations = relations.len();

    let mut mediators: Vec<(usize, String)> = Vec::new();
    for [h, r, t] in &rows {
        for e in [h, t] {
            if is_med(e) && entities.get(e).is_none() {
                entities.intern(e);
                let k = e[MEDIATOR_PREFIX.len()..]
                    .parse::<usize>()
                    .map_err(|_| Error::Structure(format!("malformed mediator label {e:?}")))?;
                mediators.push((k, e.clone()));
            }
        }
        if is_ext(r) {
            relations.intern(r);
        }
    }
    // psi comes from each mediator's #sub edge
    let mut psi_of: BTreeMap<&str, RelationId> = BTreeMap::new();
    for [h, r, _] in &rows {
        if let Some(base) = r.strip_suffix(SUB_SUFFIX) {
            if let Some(id) = relations.get(base) {
                psi_of.insert(h.as_str(), RelationId(id));
            }
        }
    }
    let mut mediator_of = Vec::new();
    let mut psi = Vec::new();
    for (k, label) in &mediators {
        mediator_of.push(*k);
        psi.push(
            *psi_of
                .get(label.as_str())
                .ok_or_else(|| Error::Structure(format!("mediator {label:?} lacks a {SUB_SUFFIX} edge")))?,
        );
    }
    let triples = rows
        .iter()
        .map(|[h, r, t]| {
            Triple::new(
                entities.get(h).expect("interned"),
                relations.get(r).expect("interned"),
                entities.get(t).expect("interned"),
            )
        })
        .collect();
    let sub_obj = sub_obj_map(&relations, num_original_relations);
    Ok(TransformedKg {
        variant: Variant::Equivalent,
        selector: SplitSelector::All,
        entities,
        relations,
        num_original_entities,
        num_original_relations,
        triples,
        mediator_of,
        psi,
        standalone: Vec::new(),
        sub_obj,
        split_sizes: Vec::new(),
    })
}
