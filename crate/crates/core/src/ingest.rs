//! Readers for the raw benchmark layouts and the canonical interchange format.
//!
//! JF17K and FB-AUTO share one raw layout: `relation e_s e_o e_1 .. e_n`.
//! The n-ary relation is split into a primary relation `<rel>_so` and one
//! attribute `<rel>_<i>` per extra position. WikiPeople records already name
//! their subject and object roles (`P.._h` / `P.._t`), whose common stem
//! becomes the primary relation.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{EntityId, HkgDataset, HyperFact, Qualifier, RelationId, Split, Vocab};

/// Suffix marker reserved for extended relations built by the transformation.
pub const RESERVED_RELATION_CHAR: char = '#';
/// Prefix reserved for mediator entities.
pub const MEDIATOR_PREFIX: &str = "_med:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFormat {
    Jf17k,
    WikiPeople,
    FbAuto,
    Canonical,
}

impl std::str::FromStr for SourceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jf17k" => Ok(SourceFormat::Jf17k),
            "wikipeople" => Ok(SourceFormat::WikiPeople),
            "fbauto" | "fb-auto" => Ok(SourceFormat::FbAuto),
            "canonical" => Ok(SourceFormat::Canonical),
            other => Err(Error::Config(format!("unknown format {other:?}"))),
        }
    }
}

impl SourceFormat {
    fn file_candidates(self, split: Split) -> Vec<String> {
        let name = split.name();
        match self {
            SourceFormat::WikiPeople => vec![
                format!("n-ary_{name}.json"),
                format!("{name}.json"),
                format!("{name}.txt"),
            ],
            _ => vec![format!("{name}.txt")],
        }
    }
}

/// A fact still expressed with string labels, qualifiers in source order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledFact {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub qualifiers: Vec<(String, String)>,
}

impl LabeledFact {
    pub fn new(subject: &str, relation: &str, object: &str, qualifiers: &[(&str, &str)]) -> Self {
        Self {
            subject: subject.to_owned(),
            relation: relation.to_owned(),
            object: object.to_owned(),
            qualifiers: qualifiers
                .iter()
                .map(|(a, v)| ((*a).to_owned(), (*v).to_owned()))
                .collect(),
        }
    }

    /// Tab-separated canonical line: `s r o a1 v1 a2 v2 ...`.
    pub fn to_canonical_line(&self) -> String {
        let mut fields = vec![self.subject.as_str(), self.relation.as_str(), self.object.as_str()];
        for (a, v) in &self.qualifiers {
            fields.push(a);
            fields.push(v);
        }
        fields.join("\t")
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let relations = std::iter::once(&self.relation).chain(self.qualifiers.iter().map(|(a, _)| a));
        let entities = [&self.subject, &self.object]
            .into_iter()
            .chain(self.qualifiers.iter().map(|(_, v)| v));
        for label in relations.clone().chain(entities.clone()) {
            if label.is_empty() {
                return Err("empty label".into());
            }
            if label.contains(['\t', '\n', '\r']) {
                return Err(format!("label {label:?} contains a tab or newline"));
            }
        }
        if let Some(r) = relations.into_iter().find(|r| r.contains(RESERVED_RELATION_CHAR)) {
            return Err(format!(
                "relation {r:?} uses the reserved character '{RESERVED_RELATION_CHAR}'"
            ));
        }
        if let Some(e) = entities.into_iter().find(|e| e.starts_with(MEDIATOR_PREFIX)) {
            return Err(format!("entity {e:?} uses the reserved prefix {MEDIATOR_PREFIX:?}"));
        }
        Ok(())
    }
}

/// Tuple notation: `(s, r, o, (a1, v1), (a2, v2))`.
impl std::fmt::Display for LabeledFact {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}", self.subject, self.relation, self.object)?;
        for (a, v) in &self.qualifiers {
            write!(f, ", ({a}, {v})")?;
        }
        f.write_str(")")
    }
}

/// Parses one JF17K / FB-AUTO record. Fields are split on any whitespace run.
pub fn parse_jf17k_record(line: &str) -> std::result::Result<LabeledFact, String> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() < 3 {
        return Err(format!(
            "expected a relation and at least two entities, found {} token(s)",
            tokens.len()
        ));
    }
    let raw = tokens[0];
    let qualifiers = tokens[3..]
        .iter()
        .enumerate()
        .map(|(i, v)| (format!("{raw}_{}", i + 1), (*v).to_owned()))
        .collect();
    Ok(LabeledFact {
        subject: tokens[1].to_owned(),
        relation: format!("{raw}_so"),
        object: tokens[2].to_owned(),
        qualifiers,
    })
}

/// Parses one WikiPeople record given as `(role, value)` pairs. A role may
/// repeat; every value becomes its own qualifier.
pub fn parse_wikipeople_record<'a, I>(pairs: I) -> std::result::Result<LabeledFact, String>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut head: Option<(&str, &str)> = None;
    let mut tail: Option<(&str, &str)> = None;
    let mut qualifiers = Vec::new();
    for (role, value) in pairs {
        if role.is_empty() || value.is_empty() {
            return Err("empty role or value".into());
        }
        if let Some(stem) = role.strip_suffix("_h") {
            if head.replace((stem, value)).is_some() {
                return Err("more than one subject (`_h`) role".into());
            }
        } else if let Some(stem) = role.strip_suffix("_t") {
            if tail.replace((stem, value)).is_some() {
                return Err("more than one object (`_t`) role".into());
            }
        } else {
            qualifiers.push((role.to_owned(), value.to_owned()));
        }
    }
    let (h_stem, subject) = head.ok_or("missing subject (`_h`) role")?;
    let (t_stem, object) = tail.ok_or("missing object (`_t`) role")?;
    if h_stem != t_stem {
        return Err(format!("subject role stem {h_stem:?} differs from object stem {t_stem:?}"));
    }
    Ok(LabeledFact {
        subject: subject.to_owned(),
        relation: h_stem.to_owned(),
        object: object.to_owned(),
        qualifiers,
    })
}

/// Parses a WikiPeople JSON line such as
/// `{"P3919_h": "Q337913", "P3919_t": "Q1210343", "P2868": ["Q864380"], "N": 3}`.
/// The `N` arity field is ignored; list values expand into one qualifier each.
pub fn parse_wikipeople_json(line: &str) -> std::result::Result<LabeledFact, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let map = value.as_object().ok_or("record is not a JSON object")?;
    let mut pairs: Vec<(&str, &str)> = Vec::new();
    for (role, v) in map {
        if role == "N" {
            continue;
        }
        match v {
            Value::String(s) => pairs.push((role, s)),
            Value::Array(items) => {
                for item in items {
                    let s = item
                        .as_str()
                        .ok_or_else(|| format!("role {role:?} has a non-string value"))?;
                    pairs.push((role, s));
                }
            }
            _ => return Err(format!("role {role:?} has a non-string value")),
        }
    }
    parse_wikipeople_record(pairs)
}

/// Parses a canonical interchange line `s<TAB>r<TAB>o<TAB>a1<TAB>v1...`.
pub fn parse_canonical_line(line: &str) -> std::result::Result<LabeledFact, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() < 3 {
        return Err(format!("expected at least 3 tab-separated fields, found {}", fields.len()));
    }
    if !(fields.len() - 3).is_multiple_of(2) {
        return Err(format!(
            "qualifier fields must come in attribute/value pairs, found {} trailing field(s)",
            fields.len() - 3
        ));
    }
    let qualifiers = fields[3..]
        .chunks(2)
        .map(|c| (c[0].to_owned(), c[1].to_owned()))
        .collect();
    Ok(LabeledFact {
        subject: fields[0].to_owned(),
        relation: fields[1].to_owned(),
        object: fields[2].to_owned(),
        qualifiers,
    })
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Reject facts in valid/test that mention entities unseen in train.
    pub strict: bool,
    /// Downgrade malformed lines to counted warnings.
    pub skip_malformed: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct IngestReport {
    pub files: Vec<String>,
    pub skipped: Vec<String>,
    pub duplicates_dropped: usize,
}

/// Incrementally interns labelled facts, assigning ids by first occurrence.
#[derive(Debug, Default)]
pub struct DatasetBuilder {
    entities: Vocab,
    relations: Vocab,
    splits: [Vec<HyperFact>; 3],
}

impl DatasetBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, split: Split, fact: &LabeledFact) -> Result<()> {
        fact.validate().map_err(Error::Validation)?;
        let s = EntityId(self.entities.intern(&fact.subject));
        let r = RelationId(self.relations.intern(&fact.relation));
        let o = EntityId(self.entities.intern(&fact.object));
        let quals: Vec<Qualifier> = fact
            .qualifiers
            .iter()
            .map(|(a, v)| {
                let a = RelationId(self.relations.intern(a));
                Qualifier::new(a, EntityId(self.entities.intern(v)))
            })
            .collect();
        self.splits[split_slot(split)].push(HyperFact::new(s, r, o, quals));
        Ok(())
    }

    pub fn build(self) -> Result<HkgDataset> {
        let [train, valid, test] = self.splits;
        HkgDataset::new(self.entities, self.relations, train, valid, test)
    }
}

fn split_slot(split: Split) -> usize {
    match split {
        Split::Train => 0,
        Split::Valid => 1,
        Split::Test => 2,
    }
}

fn resolve_split_file(dir: &Path, format: SourceFormat, split: Split) -> Result<PathBuf> {
    let candidates = format.file_candidates(split);
    for name in &candidates {
        let path = dir.join(name);
        if path.is_file() {
            return Ok(path);
        }
    }
    Err(Error::io(
        dir.join(&candidates[0]),
        std::io::Error::new(std::io::ErrorKind::NotFound, "split file not found"),
    ))
}

fn parse_line(format: SourceFormat, line: &str) -> std::result::Result<LabeledFact, String> {
    match format {
        SourceFormat::Jf17k | SourceFormat::FbAuto => parse_jf17k_record(line),
        SourceFormat::WikiPeople => parse_wikipeople_json(line),
        SourceFormat::Canonical => parse_canonical_line(line),
    }
}

type ParsedFile = (String, Vec<(usize, LabeledFact)>, Vec<String>);

fn parse_file(path: &Path, format: SourceFormat, skip_malformed: bool) -> Result<ParsedFile> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut facts = Vec::new();
    let mut skipped = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(format, line).and_then(|f| f.validate().map(|_| f)) {
            Ok(fact) => facts.push((i + 1, fact)),
            Err(msg) if skip_malformed => skipped.push(format!("{display}:{}: {msg}", i + 1)),
            Err(msg) => return Err(Error::format(display, i + 1, msg)),
        }
    }
    Ok((display, facts, skipped))
}

/// Loads the train/valid/test files of `dir`. Files are parsed in parallel;
/// vocabularies are then built sequentially over train, valid and test.
pub fn load_dataset(
    dir: &Path,
    format: SourceFormat,
    options: &IngestOptions,
) -> Result<(HkgDataset, IngestReport)> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let paths = Split::ALL
        .iter()
        .map(|&s| resolve_split_file(dir, format, s))
        .collect::<Result<Vec<_>>>()?;
    let parsed = paths
        .par_iter()
        .map(|p| parse_file(p, format, options.skip_malformed))
        .collect::<Result<Vec<_>>>()?;

    let mut report = IngestReport::default();
    let mut builder = DatasetBuilder::new();
    let mut raw_count = 0;
    for (split, (display, facts, skipped)) in Split::ALL.into_iter().zip(parsed) {
        if split == Split::Train && facts.is_empty() {
            return Err(Error::Validation(format!("{display}: training split is empty")));
        }
        let known_entities = builder.entities.len();
        for (line, fact) in &facts {
            builder
                .push(split, fact)
                .map_err(|e| Error::format(display.clone(), *line, e.to_string()))?;
            if options.strict && split != Split::Train && builder.entities.len() > known_entities {
                return Err(Error::format(
                    display.clone(),
                    *line,
                    "entity not seen in the training split (strict mode)",
                ));
            }
        }
        raw_count += facts.len();
        for w in &skipped {
            log::warn!("skipped malformed line: {w}");
        }
        report.skipped.extend(skipped);
        report.files.push(display);
    }
    let ds = builder.build()?;
    let kept: usize = Split::ALL.iter().map(|&s| ds.split(s).len()).sum();
    report.duplicates_dropped = raw_count - kept;
    if report.duplicates_dropped > 0 {
        log::warn!("dropped {} duplicate fact(s) within splits", report.duplicates_dropped);
    }
    Ok((ds, report))
}

/// Label form of a fact, qualifiers in canonical order.
pub fn labeled(ds: &HkgDataset, fact: &HyperFact) -> LabeledFact {
    LabeledFact {
        subject: ds.entity_label(fact.subject).to_owned(),
        relation: ds.relation_label(fact.relation).to_owned(),
        object: ds.entity_label(fact.object).to_owned(),
        qualifiers: fact
            .qualifiers()
            .iter()
            .map(|q| {
                (
                    ds.relation_label(q.attribute).to_owned(),
                    ds.entity_label(q.value).to_owned(),
                )
            })
            .collect(),
    }
}

/// Writes `train.txt`, `valid.txt` and `test.txt` in canonical format.
pub fn write_canonical(ds: &HkgDataset, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for split in Split::ALL {
        let path = dir.join(format!("{}.txt", split.name()));
        let mut text = String::new();
        for fact in ds.split(split) {
            text.push_str(&labeled(ds, fact).to_canonical_line());
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
