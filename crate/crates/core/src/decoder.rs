//! Scoring of hyper-relational facts from encoder outputs.
//!
//! `mdistmult`: `r_hat = pool(h_r, h_a1, .., h_an)` and the score is the
//! multilinear product `sum_j r_hat[j] * h_s[j] * h_o[j] * prod_i h_vi[j]`.
//! `hype`: each entity row is first circularly convolved with the filters of
//! its position; the products of all filters are summed.
//!
//! Factors are always multiplied in the order `r_hat, s, o, v_1, ..`, so the
//! tape kernels, [`Scorer::score`] and [`Scorer::score_batch`] agree bit for bit.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{uniform, Encoded, Mode};
use crate::error::{Error, Result};
use crate::model::{EntityId, HyperFact};
use crate::numeric::{dropout_mask, ParamId, ParamStore, Pooling, ProductQueries, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderFlavor {
    MDistMult,
    HypE,
}

impl std::str::FromStr for DecoderFlavor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mdistmult" => Ok(DecoderFlavor::MDistMult),
            "hype" => Ok(DecoderFlavor::HypE),
            other => Err(Error::Config(format!("unknown decoder flavor {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub flavor: DecoderFlavor,
    pub relation_pooling: Pooling,
    /// hype: filter length and filters per position.
    pub filter_len: usize,
    pub num_filters: usize,
    /// hype: number of positions with their own filters.
    pub max_positions: usize,
    pub dropout: f64,
    pub batch_norm: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            flavor: DecoderFlavor::MDistMult,
            relation_pooling: Pooling::Mean,
            filter_len: 3,
            num_filters: 1,
            max_positions: 8,
            dropout: 0.0,
            batch_norm: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("decoder dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.flavor == DecoderFlavor::HypE {
            if self.filter_len == 0 || self.filter_len > dim {
                return Err(Error::Config(format!(
                    "filter length must be in 1..={dim}, got {}",
                    self.filter_len
                )));
            }
            if self.num_filters == 0 || self.max_positions < 2 {
                return Err(Error::Config("hype needs at least one filter and two positions".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderParams {
    pub filters: Option<ParamId>,
    pub norm: Option<(ParamId, ParamId)>,
}

pub fn init_params(cfg: &DecoderConfig, dim: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<DecoderParams> {
    cfg.validate(dim)?;
    let filters = match cfg.flavor {
        DecoderFlavor::MDistMult => None,
        DecoderFlavor::HypE => {
            // identity-like start: unit tap plus small noise
            let shape = [cfg.max_positions, cfg.num_filters, cfg.filter_len];
            let mut t = uniform(1, shape.iter().product(), 0.1, rng).into_data();
            for chunk in t.chunks_mut(cfg.filter_len) {
                chunk[0] += 1.0;
            }
            Some(store.add("decoder.filters", Tensor::new(shape.to_vec(), t)?)?)
        }
    };
    let norm = if cfg.batch_norm {
        Some((
            store.add("decoder.norm_gamma", Tensor::filled(&[dim], 1.0))?,
            store.add("decoder.norm_beta", Tensor::zeros(&[dim]))?,
        ))
    } else {
        None
    };
    Ok(DecoderParams { filters, norm })
}

/// Relation and entity id lists of a fact in scoring order.
pub fn fact_query(fact: &HyperFact) -> (Vec<u32>, Vec<u32>) {
    let rels = fact.relations().map(|r| r.0).collect();
    let ents = fact.entities().map(|e| e.0).collect();
    (rels, ents)
}

#[allow(clippy::too_many_arguments)]
/// Entity matrix seen by the decoder: the original-entity rows of the
/// encoder output, optionally normalised, with dropout in train mode.
pub fn decoder_entities(
    tape: &mut Tape,
    cfg: &DecoderConfig,
    params: &DecoderParams,
    vars: &[Var],
    encoded: &Encoded,
    num_original_entities: usize,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let rows = Arc::new((0..num_original_entities as u32).collect::<Vec<_>>());
    let mut x = if tape.value(encoded.entities).rows() == num_original_entities {
        encoded.entities
    } else {
        tape.gather_rows(encoded.entities, rows)?
    };
    if let Some((g, b)) = params.norm {
        x = tape.batch_norm(x, vars[g.0], vars[b.0])?;
    }
    if mode == Mode::Train && cfg.dropout > 0.0 {
        if let Some(rng) = rng {
            let mask = dropout_mask(tape.value(x).len(), cfg.dropout, rng);
            x = tape.mask_mul(x, mask)?;
        }
    }
    Ok(x)
}

/// Records scores of all queries on the tape.
pub fn score_queries(
    tape: &mut Tape,
    cfg: &DecoderConfig,
    params: &DecoderParams,
    vars: &[Var],
    entities: Var,
    relations: Var,
    queries: Arc<ProductQueries>,
) -> Result<Var> {
    match (cfg.flavor, params.filters) {
        (DecoderFlavor::HypE, Some(f)) => tape.positional_multilinear(entities, relations, vars[f.0], queries),
        _ => tape.multilinear(entities, relations, queries),
    }
}

/// Tape-free scorer over fixed embeddings.
#[derive(Debug, Clone)]
pub struct Scorer {
    pub entities: Tensor,
    pub relations: Tensor,
    pub filters: Option<Tensor>,
    pub pooling: Pooling,
}

impl Scorer {
    pub fn num_entities(&self) -> usize {
        self.entities.rows()
    }

    fn check(&self, fact: &HyperFact) -> Result<()> {
        if fact.entities().any(|e| e.index() >= self.entities.rows())
            || fact.relations().any(|r| r.index() >= self.relations.rows())
        {
            return Err(Error::Validation("fact id outside the embedding tables".into()));
        }
        if let Some(f) = &self.filters {
            if fact.num_positions() > f.shape()[0] {
                return Err(Error::Config(format!(
                    "fact with {} positions exceeds the {} configured positional filters",
                    fact.num_positions(),
                    f.shape()[0]
                )));
            }
        }
        Ok(())
    }

    fn pooled(&self, fact: &HyperFact) -> Vec<f64> {
        let d = self.entities.cols();
        let mut acc = vec![0.0; d];
        let mut n = 0usize;
        for r in fact.relations() {
            for (a, v) in acc.iter_mut().zip(self.relations.row(r.index())) {
                *a += v;
            }
            n += 1;
        }
        if self.pooling == Pooling::Mean {
            let w = 1.0 / n as f64;
            if w != 1.0 {
                acc.iter_mut().for_each(|a| *a *= w);
            }
        }
        acc
    }

    fn conv(&self, entity: usize, position: usize, filter: usize, out: &mut [f64]) {
        let f = self.filters.as_ref().expect("hype filters");
        let (nf, len) = (f.shape()[1], f.shape()[2]);
        let off = (position * nf + filter) * len;
        let taps = &f.data()[off..off + len];
        let h = self.entities.row(entity);
        let d = h.len();
        for j in 0..d {
            let mut acc = 0.0;
            for (t, w) in taps.iter().enumerate() {
                acc += w * h[(j + t) % d];
            }
            out[j] = acc;
        }
    }

    /// Score with `entities[p]` standing at position `p`.
    fn score_ids(&self, rhat: &[f64], ents: &[usize]) -> f64 {
        match &self.filters {
            None => {
                let mut acc = rhat.to_vec();
                for &e in ents {
                    for (a, v) in acc.iter_mut().zip(self.entities.row(e)) {
                        *a *= v;
                    }
                }
                acc.iter().sum()
            }
            Some(f) => {
                let d = rhat.len();
                let mut conv = vec![0.0; d];
                let mut total = 0.0;
                for k in 0..f.shape()[1] {
                    let mut acc = rhat.to_vec();
                    for (p, &e) in ents.iter().enumerate() {
                        self.conv(e, p, k, &mut conv);
                        for (a, c) in acc.iter_mut().zip(&conv) {
                            *a *= c;
                        }
                    }
                    total += acc.iter().sum::<f64>();
                }
                total
            }
        }
    }

    pub fn score(&self, fact: &HyperFact) -> Result<f64> {
        self.check(fact)?;
        let rhat = self.pooled(fact);
        let ents: Vec<usize> = fact.entities().map(EntityId::index).collect();
        Ok(self.score_ids(&rhat, &ents))
    }

    /// Scores of `fact` with position `position` replaced by every entity.
    pub fn score_batch(&self, fact: &HyperFact, position: usize) -> Result<Vec<f64>> {
        if position >= fact.num_positions() {
            return Err(Error::Validation(format!(
                "hole position {position} out of range for a fact with {} positions",
                fact.num_positions()
            )));
        }
        self.check(fact)?;
        let rhat = self.pooled(fact);
        let ents: Vec<usize> = fact.entities().map(EntityId::index).collect();
        Ok((0..self.num_entities())
            .into_par_iter()
            .map(|cand| {
                let mut filled = ents.clone();
                filled[position] = cand;
                self.score_ids(&rhat, &filled)
            })
            .collect())
    }
}
