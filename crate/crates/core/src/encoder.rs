//! Message passing over a transformed KG.
//!
//! Layer-0 vectors: original entities own a full-width embedding; a mediator
//! `b` starts from `[shared(psi(b)); independent(b)]`, where the shared part
//! (width `floor(alpha * d)`) is one row per primary relation.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dropout_mask, Composition, EdgeMessages, ParamId, ParamStore, Tape, Tensor, Var};
use crate::transform::TransformedKg;

/// Embedding initialisation range.
pub const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderFlavor {
    CompGcn,
    Rgcn,
    /// No message passing: layer-0 vectors are the output.
    None,
}

impl std::str::FromStr for EncoderFlavor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compgcn" => Ok(EncoderFlavor::CompGcn),
            "rgcn" => Ok(EncoderFlavor::Rgcn),
            "none" => Ok(EncoderFlavor::None),
            other => Err(Error::Config(format!("unknown encoder flavor {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Sum,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "sum" => Ok(Aggregation::Sum),
            other => Err(Error::Config(format!("unknown aggregation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" | "none" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub flavor: EncoderFlavor,
    pub layers: usize,
    pub dim: usize,
    pub share_ratio: f64,
    pub composition: Composition,
    pub dropout: f64,
    pub aggregation: Aggregation,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            flavor: EncoderFlavor::CompGcn,
            layers: 1,
            dim: 200,
            share_ratio: 0.5,
            composition: Composition::Rotate,
            dropout: 0.1,
            aggregation: Aggregation::Mean,
            activation: Activation::Tanh,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("encoder dim must be positive".into()));
        }
        if self.flavor != EncoderFlavor::None && !(1..=4).contains(&self.layers) {
            return Err(Error::Config(format!("encoder layers must be in 1..=4, got {}", self.layers)));
        }
        if !(0.0..=1.0).contains(&self.share_ratio) {
            return Err(Error::Config(format!("share ratio must be in [0, 1], got {}", self.share_ratio)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("encoder dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.flavor == EncoderFlavor::CompGcn && self.composition == Composition::Rotate && !self.dim.is_multiple_of(2) {
            return Err(Error::Config(format!("rotate composition needs an even dim, got {}", self.dim)));
        }
        Ok(())
    }

    /// Width of the shared part of mediator embeddings.
    pub fn shared_width(&self) -> usize {
        (self.share_ratio * self.dim as f64).floor() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Edge lists of one relation direction for the rgcn flavor: the distinct
/// targets and the edges re-indexed onto them.
#[derive(Debug, Clone)]
struct RelationBlock {
    targets: Arc<Vec<u32>>,
    edges: Arc<EdgeMessages>,
}

/// Static graph structure derived from a transformed KG.
#[derive(Debug, Clone)]
pub struct EncoderGraph {
    pub num_entities: usize,
    pub num_original_entities: usize,
    pub num_relations: usize,
    pub num_original_relations: usize,
    /// Row of the shared mediator table for each mediator.
    mediator_shared_row: Arc<Vec<u32>>,
    num_shared_rows: usize,
    forward: Arc<EdgeMessages>,
    inverse: Arc<EdgeMessages>,
    self_loops: Arc<EdgeMessages>,
    /// Forward blocks for relations `0..n`, then inverse blocks.
    blocks: Vec<RelationBlock>,
}

impl EncoderGraph {
    pub fn new(kg: &TransformedKg, aggregation: Aggregation) -> Self {
        let n = kg.entities.len();
        let n_rel = kg.relations.len();

        let mut shared_rows: BTreeMap<u32, u32> = BTreeMap::new();
        for p in &kg.psi {
            let next = shared_rows.len() as u32;
            shared_rows.entry(p.0).or_insert(next);
        }
        let mediator_shared_row = kg.psi.iter().map(|p| shared_rows[&p.0]).collect();

        let mut in_degree = vec![0usize; n];
        for t in &kg.triples {
            in_degree[t.tail as usize] += 1;
            in_degree[t.head as usize] += 1;
        }
        let w = |target: u32| match aggregation {
            Aggregation::Mean => 1.0 / in_degree[target as usize] as f64,
            Aggregation::Sum => 1.0,
        };
        let forward = EdgeMessages::new(n, kg.triples.iter().map(|t| (t.head, t.relation, t.tail, w(t.tail))));
        let inverse = EdgeMessages::new(n, kg.triples.iter().map(|t| (t.tail, t.relation, t.head, w(t.head))));
        let loop_rel = n_rel as u32;
        let self_loops = EdgeMessages::new(n, (0..n as u32).map(|e| (e, loop_rel, e, 1.0)));

        let mut blocks = Vec::with_capacity(2 * n_rel);
        for inverse_dir in [false, true] {
            for r in 0..n_rel as u32 {
                let edges: Vec<(u32, u32)> = kg
                    .triples
                    .iter()
                    .filter(|t| t.relation == r)
                    .map(|t| if inverse_dir { (t.tail, t.head) } else { (t.head, t.tail) })
                    .collect();
                blocks.push(relation_block(&edges, aggregation));
            }
        }

        Self {
            num_entities: n,
            num_original_entities: kg.num_original_entities,
            num_relations: n_rel,
            num_original_relations: kg.num_original_relations,
            mediator_shared_row: Arc::new(mediator_shared_row),
            num_shared_rows: shared_rows.len(),
            forward: Arc::new(forward),
            inverse: Arc::new(inverse),
            self_loops: Arc::new(self_loops),
            blocks,
        }
    }

    pub fn num_mediators(&self) -> usize {
        self.num_entities - self.num_original_entities
    }

    pub fn num_shared_rows(&self) -> usize {
        self.num_shared_rows
    }
}

fn relation_block(edges: &[(u32, u32)], aggregation: Aggregation) -> RelationBlock {
    let mut local: BTreeMap<u32, u32> = BTreeMap::new();
    let mut count: BTreeMap<u32, usize> = BTreeMap::new();
    for &(_, t) in edges {
        *count.entry(t).or_default() += 1;
    }
    for &t in count.keys() {
        let next = local.len() as u32;
        local.insert(t, next);
    }
    let msgs = EdgeMessages::new(
        local.len(),
        edges.iter().map(|&(u, t)| {
            let w = match aggregation {
                Aggregation::Mean => 1.0 / count[&t] as f64,
                Aggregation::Sum => 1.0,
            };
            (u, 0, local[&t], w)
        }),
    );
    RelationBlock {
        targets: Arc::new(local.keys().copied().collect()),
        edges: Arc::new(msgs),
    }
}

/// Parameter ids of the encoder inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderParams {
    pub entity: ParamId,
    pub shared: ParamId,
    pub independent: ParamId,
    /// Relation rows followed by the self-loop row (compgcn).
    pub relation: ParamId,
    pub layers: Vec<LayerParams>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerParams {
    CompGcn {
        w_in: ParamId,
        w_out: ParamId,
        w_self: ParamId,
        w_rel: ParamId,
    },
    Rgcn {
        /// One per relation direction, in the order of the graph's blocks.
        w_rel: Vec<ParamId>,
        w_self: ParamId,
    },
}

pub(crate) fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

fn glorot(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (d_in + d_out) as f64).sqrt();
    uniform(d_in, d_out, bound, rng)
}

/// Registers encoder parameters in `store`, in a fixed order.
pub fn init_params(
    cfg: &EncoderConfig,
    graph: &EncoderGraph,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<EncoderParams> {
    cfg.validate()?;
    let d = cfg.dim;
    let sw = cfg.shared_width();
    let entity = store.add("encoder.entity", uniform(graph.num_original_entities, d, INIT_RANGE, rng))?;
    let shared = store.add("encoder.mediator_shared", uniform(graph.num_shared_rows, sw, INIT_RANGE, rng))?;
    let independent = store.add(
        "encoder.mediator_independent",
        uniform(graph.num_mediators(), d - sw, INIT_RANGE, rng),
    )?;
    let mut rel = uniform(graph.num_relations, d, INIT_RANGE, rng).into_data();
    if cfg.flavor == EncoderFlavor::CompGcn {
        rel.extend(cfg.composition.identity_row(d));
    }
    let rows = rel.len() / d;
    let relation = store.add("encoder.relation", Tensor::matrix(rows, d, rel)?)?;

    let mut layers = Vec::new();
    let n_layers = if cfg.flavor == EncoderFlavor::None { 0 } else { cfg.layers };
    for l in 0..n_layers {
        let name = |part: &str| format!("encoder.layer{l}.{part}");
        layers.push(match cfg.flavor {
            EncoderFlavor::CompGcn => LayerParams::CompGcn {
                w_in: store.add(&name("w_in"), glorot(d, d, rng))?,
                w_out: store.add(&name("w_out"), glorot(d, d, rng))?,
                w_self: store.add(&name("w_self"), glorot(d, d, rng))?,
                w_rel: store.add(&name("w_rel"), glorot(d, d, rng))?,
            },
            EncoderFlavor::Rgcn => {
                let mut w_rel = Vec::with_capacity(graph.blocks.len());
                for b in 0..graph.blocks.len() {
                    w_rel.push(store.add(&name(&format!("w_r{b}")), glorot(d, d, rng))?);
                }
                LayerParams::Rgcn {
                    w_rel,
                    w_self: store.add(&name("w_self"), glorot(d, d, rng))?,
                }
            }
            EncoderFlavor::None => unreachable!(),
        });
    }
    Ok(EncoderParams {
        entity,
        shared,
        independent,
        relation,
        layers,
    })
}

/// Encoder output: every extended entity row and every relation row.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub entities: Var,
    pub relations: Var,
}

/// Layer-0 entity matrix `[E_orig; [shared(psi(b)); independent(b)]]`.
pub fn initial_entities(tape: &mut Tape, graph: &EncoderGraph, params: &EncoderParams, vars: &[Var]) -> Result<Var> {
    let shared = tape.gather_rows(vars[params.shared.0], graph.mediator_shared_row.clone())?;
    let mediators = tape.concat_cols(shared, vars[params.independent.0])?;
    tape.concat_rows(vars[params.entity.0], mediators)
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Tanh => tape.tanh(x),
        Activation::Relu => tape.relu(x),
        Activation::Identity => x,
    }
}

/// Runs the encoder. `vars[i]` is the tape variable of parameter `i`.
/// `rng` feeds dropout and is only used in train mode.
pub fn encode(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    graph: &EncoderGraph,
    params: &EncoderParams,
    vars: &[Var],
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Encoded> {
    let h0 = initial_entities(tape, graph, params, vars)?;
    encode_from(tape, cfg, graph, params, vars, h0, mode, rng)
}

/// Runs the message-passing layers from a given layer-0 entity matrix.
#[allow(clippy::too_many_arguments)]
pub fn encode_from(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    graph: &EncoderGraph,
    params: &EncoderParams,
    vars: &[Var],
    h0: Var,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Encoded> {
    let mut h = h0;
    let mut r = vars[params.relation.0];
    let mut rng = rng;
    for layer in &params.layers {
        let m = match layer {
            LayerParams::CompGcn {
                w_in,
                w_out,
                w_self,
                w_rel,
            } => {
                let comp = cfg.composition;
                let a_in = tape.edge_aggregate(h, r, graph.forward.clone(), comp)?;
                let a_out = tape.edge_aggregate(h, r, graph.inverse.clone(), comp)?;
                let a_self = tape.edge_aggregate(h, r, graph.self_loops.clone(), comp)?;
                let m_in = tape.matmul(a_in, vars[w_in.0])?;
                let m_out = tape.matmul(a_out, vars[w_out.0])?;
                let m_self = tape.matmul(a_self, vars[w_self.0])?;
                let sum = tape.add(m_in, m_out)?;
                let m = tape.add(sum, m_self)?;
                r = tape.matmul(r, vars[w_rel.0])?;
                m
            }
            LayerParams::Rgcn { w_rel, w_self } => {
                let mut m = tape.matmul(h, vars[w_self.0])?;
                for (block, w) in graph.blocks.iter().zip(w_rel) {
                    if block.edges.is_empty() {
                        continue;
                    }
                    let agg = tape.edge_aggregate(h, r, block.edges.clone(), Composition::Identity)?;
                    let msg = tape.matmul(agg, vars[w.0])?;
                    let full = tape.scatter_rows(msg, block.targets.clone(), graph.num_entities)?;
                    m = tape.add(m, full)?;
                }
                m
            }
        };
        h = activate(tape, m, cfg.activation);
        if mode == Mode::Train && cfg.dropout > 0.0 {
            if let Some(rng) = rng.as_deref_mut() {
                let mask = dropout_mask(tape.value(h).len(), cfg.dropout, rng);
                h = tape.mask_mul(h, mask)?;
            }
        }
    }
    Ok(Encoded {
        entities: h,
        relations: r,
    })
}

/// Sets rgcn weights so that encoding is the identity: relation weights
/// zero, self weight identity. Activation must be disabled separately.
pub fn set_identity_mode(params: &EncoderParams, store: &mut ParamStore) -> Result<()> {
    for layer in &params.layers {
        let LayerParams::Rgcn { w_rel, w_self } = layer else {
            return Err(Error::Config("identity mode applies to the rgcn flavor".into()));
        };
        for w in w_rel {
            store.get_mut(*w).data_mut().fill(0.0);
        }
        let d = store.get(*w_self).rows();
        *store.get_mut(*w_self) = Tensor::identity(d);
    }
    Ok(())
}
