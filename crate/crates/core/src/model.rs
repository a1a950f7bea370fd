//! In-memory representation of hyper-relational knowledge graphs.
//!
//! A fact is a primary triple `(s, r, o)` plus a set of attribute-value
//! qualifiers. Labels are interned into dense ids; entity and relation ids
//! live in separate namespaces and every downstream module works on ids only.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Bijective label table. Ids are contiguous from zero in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    labels: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_labels<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::new();
        for label in labels {
            let label = label.into();
            if vocab.get(&label).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary label {label:?}")));
            }
            vocab.intern(&label);
        }
        Ok(vocab)
    }

    /// Returns the id of `label`, assigning the next free id on first sight.
    pub fn intern(&mut self, label: &str) -> u32 {
        if let Some(&id) = self.index.get(label) {
            return id;
        }
        let id = self.labels.len() as u32;
        self.labels.push(label.to_owned());
        self.index.insert(label.to_owned(), id);
        id
    }

    pub fn get(&self, label: &str) -> Option<u32> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: u32) -> Option<&str> {
        self.labels.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Qualifier {
    pub attribute: RelationId,
    pub value: EntityId,
}

impl Qualifier {
    pub fn new(attribute: RelationId, value: EntityId) -> Self {
        Self { attribute, value }
    }
}

/// One hyper-relational fact. Constructed facts are always canonical:
/// qualifiers sorted by `(attribute, value)` with duplicates removed.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HyperFact {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
    qualifiers: Vec<Qualifier>,
}

impl HyperFact {
    pub fn new(
        subject: EntityId,
        relation: RelationId,
        object: EntityId,
        qualifiers: impl IntoIterator<Item = Qualifier>,
    ) -> Self {
        let mut qualifiers: Vec<Qualifier> = qualifiers.into_iter().collect();
        qualifiers.sort_unstable();
        qualifiers.dedup();
        Self {
            subject,
            relation,
            object,
            qualifiers,
        }
    }

    pub fn triple(subject: EntityId, relation: RelationId, object: EntityId) -> Self {
        Self::new(subject, relation, object, [])
    }

    pub fn qualifiers(&self) -> &[Qualifier] {
        &self.qualifiers
    }

    /// Qualifier count `n`; zero for a plain triple fact.
    pub fn arity(&self) -> usize {
        self.qualifiers.len()
    }

    pub fn is_triple(&self) -> bool {
        self.qualifiers.is_empty()
    }

    /// Number of entity positions: subject, object and one per value.
    pub fn num_positions(&self) -> usize {
        self.qualifiers.len() + 2
    }

    /// Entity at position `p`: 0 = subject, 1 = object, `2 + i` = value `i`.
    pub fn entity_at(&self, position: usize) -> Option<EntityId> {
        match position {
            0 => Some(self.subject),
            1 => Some(self.object),
            p => self.qualifiers.get(p - 2).map(|q| q.value),
        }
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        [self.subject, self.object]
            .into_iter()
            .chain(self.qualifiers.iter().map(|q| q.value))
    }

    /// Primary relation followed by the attributes in qualifier order.
    pub fn relations(&self) -> impl Iterator<Item = RelationId> + '_ {
        std::iter::once(self.relation).chain(self.qualifiers.iter().map(|q| q.attribute))
    }

    /// Copy of the fact with position `p` replaced, qualifiers left in place
    /// (the result may be non-canonical). Used for scoring corruptions.
    pub fn with_entity_at(&self, position: usize, entity: EntityId) -> HyperFact {
        let mut out = self.clone();
        match position {
            0 => out.subject = entity,
            1 => out.object = entity,
            p => out.qualifiers[p - 2].value = entity,
        }
        out
    }

    /// Re-sorts and de-duplicates the qualifier list.
    pub fn canonicalized(mut self) -> HyperFact {
        self.qualifiers.sort_unstable();
        self.qualifiers.dedup();
        self
    }
}

/// Canonicalises a fact after checking every id against the vocabularies.
pub fn canonicalize(fact: HyperFact, entities: &Vocab, relations: &Vocab) -> Result<HyperFact> {
    for e in fact.entities() {
        if e.index() >= entities.len() {
            return Err(Error::Vocabulary {
                kind: "entity",
                id: e.index(),
            });
        }
    }
    for r in fact.relations() {
        if r.index() >= relations.len() {
            return Err(Error::Vocabulary {
                kind: "relation",
                id: r.index(),
            });
        }
    }
    Ok(fact.canonicalized())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Which facts an operation looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSelector {
    All,
    Only(Split),
}

impl std::str::FromStr for SplitSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            Ok(SplitSelector::All)
        } else {
            s.parse().map(SplitSelector::Only)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HkgDataset {
    entities: Vocab,
    relations: Vocab,
    train: Vec<HyperFact>,
    valid: Vec<HyperFact>,
    test: Vec<HyperFact>,
}

impl HkgDataset {
    /// Builds a dataset, canonicalising every fact and dropping repeated
    /// canonical facts within a split (first occurrence wins).
    pub fn new(
        entities: Vocab,
        relations: Vocab,
        train: Vec<HyperFact>,
        valid: Vec<HyperFact>,
        test: Vec<HyperFact>,
    ) -> Result<Self> {
        let clean = |facts: Vec<HyperFact>| -> Result<Vec<HyperFact>> {
            let mut seen = HashSet::with_capacity(facts.len());
            let mut out = Vec::with_capacity(facts.len());
            for fact in facts {
                let fact = canonicalize(fact, &entities, &relations)?;
                if seen.insert(fact.clone()) {
                    out.push(fact);
                }
            }
            Ok(out)
        };
        let train = clean(train)?;
        let valid = clean(valid)?;
        let test = clean(test)?;
        Ok(Self {
            entities,
            relations,
            train,
            valid,
            test,
        })
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn split(&self, split: Split) -> &[HyperFact] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Facts of the selection in canonical dataset order (train, valid, test).
    /// With [`SplitSelector::All`] a fact repeated across splits appears once.
    pub fn facts(&self, selector: SplitSelector) -> Vec<&HyperFact> {
        match selector {
            SplitSelector::Only(split) => self.split(split).iter().collect(),
            SplitSelector::All => {
                let mut seen = HashSet::new();
                Split::ALL
                    .iter()
                    .flat_map(|&s| self.split(s).iter())
                    .filter(|f| seen.insert(*f))
                    .collect()
            }
        }
    }

    pub fn all_facts(&self) -> impl Iterator<Item = &HyperFact> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    /// Relations used as the primary relation of some fact, ascending.
    pub fn primary_relations(&self) -> BTreeSet<RelationId> {
        self.all_facts().map(|f| f.relation).collect()
    }

    /// Maximum qualifier count over all splits (`n_a`).
    pub fn max_qualifiers(&self) -> usize {
        self.all_facts().map(HyperFact::arity).max().unwrap_or(0)
    }

    pub fn entity_label(&self, id: EntityId) -> &str {
        self.entities.label(id.0).unwrap_or("<unknown>")
    }

    pub fn relation_label(&self, id: RelationId) -> &str {
        self.relations.label(id.0).unwrap_or("<unknown>")
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats::compute(self, None)
    }

    /// SHA-256 over both label tables; identifies the id assignment.
    pub fn vocab_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (tag, vocab) in [(b'E', &self.entities), (b'R', &self.relations)] {
            for label in vocab.labels() {
                hasher.update([tag]);
                hasher.update((label.len() as u64).to_le_bytes());
                hasher.update(label.as_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_e: usize,
    pub n_r: usize,
    pub n_r_pri: usize,
    pub n_r_qua: usize,
    pub n_a: usize,
    /// Facts without qualifiers.
    pub n_pri: usize,
    /// Facts with at least one qualifier.
    pub n_qua: usize,
    pub n: usize,
}

impl DatasetStats {
    /// Counts over the union of splits, or over one split when `split` is set.
    /// `n_e` and `n_r` are always the full vocabulary sizes.
    pub fn compute(ds: &HkgDataset, split: Option<Split>) -> Self {
        let facts: Vec<&HyperFact> = match split {
            Some(s) => ds.split(s).iter().collect(),
            None => ds.all_facts().collect(),
        };
        Self::from_facts(ds.entities().len(), ds.relations().len(), facts)
    }

    pub fn from_facts<'a>(
        n_e: usize,
        n_r: usize,
        facts: impl IntoIterator<Item = &'a HyperFact>,
    ) -> Self {
        let mut primary = HashSet::new();
        let mut attributes = HashSet::new();
        let (mut n_pri, mut n_qua, mut n_a) = (0, 0, 0);
        for fact in facts {
            primary.insert(fact.relation);
            attributes.extend(fact.qualifiers().iter().map(|q| q.attribute));
            if fact.is_triple() {
                n_pri += 1;
            } else {
                n_qua += 1;
            }
            n_a = n_a.max(fact.arity());
        }
        Self {
            n_e,
            n_r,
            n_r_pri: primary.len(),
            n_r_qua: attributes.len(),
            n_a,
            n_pri,
            n_qua,
            n: n_pri + n_qua,
        }
    }
}
