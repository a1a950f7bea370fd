//! Check routines used both by the focused test files and by the
//! acceptance harness.

use std::collections::HashMap;

use hkgx_core::decoder::{DecoderConfig, Scorer};
use hkgx_core::encoder::{
    encode, encode_from, init_params, initial_entities, set_identity_mode, Activation, Aggregation, EncoderConfig,
    EncoderFlavor, EncoderGraph, EncoderParams, Mode,
};
use hkgx_core::evaluator::{evaluate_facts, evaluate_split, FilterIndex};
use hkgx_core::ingest::{labeled, DatasetBuilder, LabeledFact};
use hkgx_core::model::{EntityId, HkgDataset, HyperFact, Qualifier, RelationId, Split, SplitSelector};
use hkgx_core::numeric::{Composition, ParamId, ParamStore, Pooling, Tape, Tensor};
use hkgx_core::trainer::{train, Model, TrainConfig};
use hkgx_core::transform::{transform, TransformedKg, Variant};

use super::{random_tensor, relative_error, rng, toy_dataset, weighted_sum, FD_STEP};

/// Largest deviation of an identity-mode rgcn encoding from its input, over
/// both aggregations, for the equivalent transform of `selector`.
pub fn identity_mode_deviation(ds: &HkgDataset, selector: SplitSelector, dim: usize, seed: u64) -> f64 {
    let kg = transform(ds, selector, Variant::Equivalent).unwrap();
    let mut worst = 0.0f64;
    for aggregation in [Aggregation::Mean, Aggregation::Sum] {
        let cfg = EncoderConfig {
            flavor: EncoderFlavor::Rgcn,
            layers: 2,
            dim,
            dropout: 0.0,
            activation: Activation::Identity,
            aggregation,
            ..Default::default()
        };
        let graph = EncoderGraph::new(&kg, aggregation);
        let mut store = ParamStore::new();
        let params = init_params(&cfg, &graph, &mut store, &mut rng(seed)).unwrap();
        set_identity_mode(&params, &mut store).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<_> = store.iter().map(|(_, t)| tape.constant(t.clone())).collect();
        let h0 = initial_entities(&mut tape, &graph, &params, &vars).unwrap();
        let out = encode(&mut tape, &cfg, &graph, &params, &vars, Mode::Eval, None).unwrap();
        worst = worst
            .max(tape.value(out.entities).max_abs_diff(tape.value(h0)))
            .max(tape.value(out.relations).max_abs_diff(store.get(params.relation)));
    }
    worst
}

/// Shared-table row of every mediator, assigned in order of first
/// appearance of its primary relation.
pub fn shared_rows(kg: &TransformedKg) -> Vec<usize> {
    let mut rows: HashMap<u32, usize> = HashMap::new();
    kg.psi
        .iter()
        .map(|p| {
            let next = rows.len();
            *rows.entry(p.0).or_insert(next)
        })
        .collect()
}

pub struct SharingSetup {
    pub kg: TransformedKg,
    pub cfg: EncoderConfig,
    pub graph: EncoderGraph,
    pub store: ParamStore,
    pub params: EncoderParams,
}

pub fn sharing_setup(ratio: f64, seed: u64) -> SharingSetup {
    let ds = toy_dataset();
    let kg = transform(&ds, SplitSelector::All, Variant::Equivalent).unwrap();
    let cfg = EncoderConfig {
        dim: 6,
        share_ratio: ratio,
        dropout: 0.0,
        composition: Composition::Multiply,
        ..Default::default()
    };
    let graph = EncoderGraph::new(&kg, cfg.aggregation);
    let mut store = ParamStore::new();
    let params = init_params(&cfg, &graph, &mut store, &mut rng(seed)).unwrap();
    SharingSetup {
        kg,
        cfg,
        graph,
        store,
        params,
    }
}

fn untied_loss(s: &SharingSetup, h0: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<_> = s.store.iter().map(|(_, t)| tape.constant(t.clone())).collect();
    let h = tape.constant(h0.clone());
    let out = encode_from(&mut tape, &s.cfg, &s.graph, &s.params, &vars, h, Mode::Eval, None).unwrap();
    let loss = weighted_sum(&mut tape, out.entities, 7);
    tape.value(loss).item()
}

/// Layer-0 matrix and analytic gradients of the shared and independent
/// mediator tables.
pub fn table_gradients(s: &SharingSetup) -> (Tensor, Tensor, Tensor) {
    let mut tape = Tape::new();
    let vars: Vec<_> = s.store.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let h0 = initial_entities(&mut tape, &s.graph, &s.params, &vars).unwrap();
    let h0_value = tape.value(h0).clone();
    let out = encode_from(&mut tape, &s.cfg, &s.graph, &s.params, &vars, h0, Mode::Eval, None).unwrap();
    let loss = weighted_sum(&mut tape, out.entities, 7);
    let grads = tape.backward(loss).unwrap();
    let g = |id: ParamId| grads.get(vars[id.0]).cloned().unwrap_or_else(|| Tensor::zeros(s.store.get(id).shape()));
    (h0_value, g(s.params.shared), g(s.params.independent))
}

/// Central differences of the loss with respect to every untied mediator
/// entry of the layer-0 matrix, one row per mediator.
pub fn untied_fd(s: &SharingSetup, h0: &Tensor) -> Tensor {
    let n0 = s.graph.num_original_entities;
    let d = s.cfg.dim;
    let mut out = Tensor::zeros(&[s.graph.num_mediators(), d]);
    for m in 0..s.graph.num_mediators() {
        for j in 0..d {
            let mut plus = h0.clone();
            plus.row_mut(n0 + m)[j] += FD_STEP;
            let mut minus = h0.clone();
            minus.row_mut(n0 + m)[j] -= FD_STEP;
            out.row_mut(m)[j] = (untied_loss(s, &plus) - untied_loss(s, &minus)) / (2.0 * FD_STEP);
        }
    }
    out
}

pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(&x, &y)| relative_error(x, y)).fold(0.0, f64::max)
}

pub struct SharingOutcome {
    /// Mediators with equal primary relation have equal layer-0 rows.
    pub rows_tied: bool,
    /// Some pair of mediators shares a primary relation.
    pub has_shared_pairs: bool,
    /// Shared-table gradient against the summed untied oracle.
    pub tied_error: f64,
}

pub fn full_sharing_check() -> SharingOutcome {
    let s = sharing_setup(1.0, 3);
    let rows = shared_rows(&s.kg);
    let (h0, g_shared, _) = table_gradients(&s);
    let n0 = s.graph.num_original_entities;
    let mut rows_tied = true;
    let mut has_shared_pairs = false;
    for a in 0..rows.len() {
        for b in a + 1..rows.len() {
            if rows[a] == rows[b] {
                has_shared_pairs = true;
                rows_tied &= h0.row(n0 + a) == h0.row(n0 + b);
            }
        }
    }
    let fd = untied_fd(&s, &h0);
    let mut summed = Tensor::zeros(g_shared.shape());
    for (m, &row) in rows.iter().enumerate() {
        for j in 0..s.cfg.dim {
            summed.row_mut(row)[j] += fd.row(m)[j];
        }
    }
    SharingOutcome {
        rows_tied,
        has_shared_pairs,
        tied_error: max_relative_error(&g_shared, &summed),
    }
}

pub struct NoSharingOutcome {
    pub shared_scalars: usize,
    pub rows_distinct: bool,
    pub untied_error: f64,
}

pub fn no_sharing_check() -> NoSharingOutcome {
    let s = sharing_setup(0.0, 4);
    let (h0, _, g_ind) = table_gradients(&s);
    let fd = untied_fd(&s, &h0);
    let n0 = s.graph.num_original_entities;
    let m = s.graph.num_mediators();
    let rows_distinct = (0..m).all(|a| (a + 1..m).all(|b| h0.row(n0 + a) != h0.row(n0 + b)));
    NoSharingOutcome {
        shared_scalars: s.store.get(s.params.shared).len(),
        rows_distinct,
        untied_error: max_relative_error(&g_ind, &fd),
    }
}

pub type RawKey = (u32, u32, u32, Vec<(u32, u32)>);

/// Qualifiers sorted without deduplication, so a candidate that repeats a
/// pair never matches a stored fact.
pub fn raw_key(f: &HyperFact) -> RawKey {
    let mut q: Vec<(u32, u32)> = f.qualifiers().iter().map(|q| (q.attribute.0, q.value.0)).collect();
    q.sort();
    (f.subject.0, f.relation.0, f.object.0, q)
}

/// Key of `f` with position `p` holding `e`.
pub fn fill(f: &HyperFact, p: usize, e: u32) -> RawKey {
    let mut k = raw_key(f);
    match p {
        0 => k.0 = e,
        1 => k.2 = e,
        _ => {
            let mut q: Vec<(u32, u32)> = f.qualifiers().iter().map(|q| (q.attribute.0, q.value.0)).collect();
            q[p - 2].1 = e;
            q.sort();
            k.3 = q;
        }
    }
    k
}

pub fn gold_of(f: &HyperFact, p: usize) -> u32 {
    match p {
        0 => f.subject.0,
        1 => f.object.0,
        _ => f.qualifiers()[p - 2].value.0,
    }
}

/// `(fact, position, rank)` per query, from scalar scores and a full scan of
/// the fact list for every candidate.
pub fn oracle_ranks(sc: &Scorer, ds: &HkgDataset, split: Split) -> Vec<(usize, usize, usize)> {
    let all: Vec<&HyperFact> = ds.all_facts().collect();
    let mut out = Vec::new();
    for (k, f) in ds.split(split).iter().enumerate() {
        for p in 0..2 + f.qualifiers().len() {
            let gold = gold_of(f, p);
            let score = |e: u32| {
                let key = fill(f, p, e);
                let quals: Vec<Qualifier> = key.3.iter().map(|&(a, v)| Qualifier::new(RelationId(a), EntityId(v))).collect();
                sc.score(&HyperFact::new(EntityId(key.0), f.relation, EntityId(key.2), quals)).unwrap()
            };
            let g = score(gold);
            let mut rank = 1;
            for e in (0..sc.num_entities() as u32).filter(|&e| e != gold) {
                let key = fill(f, p, e);
                let known = all.iter().any(|t| raw_key(t) == key);
                if !known && score(e) >= g {
                    rank += 1;
                }
            }
            out.push((k, p, rank));
        }
    }
    out
}

/// Twenty facts of the toy data: 14 train, 3 valid, 3 test.
pub fn ranking_corpus() -> HkgDataset {
    let toy = toy_dataset();
    let mut b = DatasetBuilder::new();
    for (split, n) in [(Split::Train, 14), (Split::Valid, 3), (Split::Test, 3)] {
        for f in toy.split(split).iter().take(n) {
            b.push(split, &labeled(&toy, f)).unwrap();
        }
    }
    b.build().unwrap()
}

pub fn random_scorer(ds: &HkgDataset, seed: u64) -> Scorer {
    let mut r = rng(seed);
    Scorer {
        entities: random_tensor(&[ds.entities().len(), 5], &mut r),
        relations: random_tensor(&[ds.relations().len(), 5], &mut r),
        filters: None,
        pooling: Pooling::Mean,
    }
}

/// Mismatching queries between the evaluator and the oracle, and whether the
/// query count equals the sum of position counts, over every split.
pub fn ranking_agreement(ds: &HkgDataset, seeds: std::ops::Range<u64>) -> (usize, usize, bool) {
    let index = FilterIndex::build(ds);
    let mut mismatches = 0;
    let mut total = 0;
    let mut coverage = true;
    for seed in seeds {
        let sc = random_scorer(ds, seed);
        for split in Split::ALL {
            let report = evaluate_split(&sc, ds, split, &index).unwrap();
            let got: Vec<(usize, usize, usize)> = report.queries.iter().map(|q| (q.fact, q.position, q.rank)).collect();
            let want = oracle_ranks(&sc, ds, split);
            total += want.len();
            mismatches += got.len().abs_diff(want.len()) + got.iter().zip(&want).filter(|(a, b)| a != b).count();
            let expected: usize = ds.split(split).iter().map(|f| f.qualifiers().len() + 2).sum();
            coverage &= report.queries.len() == expected;
        }
    }
    (mismatches, total, coverage)
}

pub fn ten_facts() -> HkgDataset {
    let text = include_str!("../../../../data/toy/train.txt");
    let mut b = DatasetBuilder::new();
    for line in text.lines().take(10) {
        let f: Vec<&str> = line.split('\t').collect();
        let quals: Vec<(&str, &str)> = f[3..].chunks(2).map(|c| (c[0], c[1])).collect();
        b.push(Split::Train, &LabeledFact::new(f[0], f[1], f[2], &quals)).unwrap();
    }
    b.build().unwrap()
}

pub struct OverfitOutcome {
    pub first_loss: f64,
    pub last_loss: f64,
    pub steps: u64,
    pub queries: usize,
    pub rank_one: usize,
}

pub fn overfit_ten_facts() -> OverfitOutcome {
    let ds = ten_facts();
    let enc = EncoderConfig {
        dim: 32,
        dropout: 0.0,
        composition: Composition::Rotate,
        ..Default::default()
    };
    let cfg = TrainConfig {
        batch_size: 10,
        learning_rate: 0.01,
        epochs: 500,
        max_steps: Some(500),
        seed: 5,
        ..Default::default()
    };
    let out = train(&ds, enc, DecoderConfig::default(), cfg).unwrap();
    let model = Model::from_checkpoint(&ds, &out.checkpoint).unwrap();
    let report = evaluate_facts(&model.scorer().unwrap(), ds.split(Split::Train), &FilterIndex::build(&ds), "train").unwrap();
    OverfitOutcome {
        first_loss: out.first_loss,
        last_loss: out.last_loss,
        steps: out.steps,
        queries: report.queries.len(),
        rank_one: report.queries.iter().filter(|q| q.rank == 1).count(),
    }
}

pub fn small_run(seed: u64) -> (EncoderConfig, DecoderConfig, TrainConfig) {
    let enc = EncoderConfig {
        dim: 8,
        composition: Composition::Rotate,
        dropout: 0.1,
        ..Default::default()
    };
    let cfg = TrainConfig {
        batch_size: 16,
        learning_rate: 0.01,
        negatives: 4,
        epochs: 6,
        eval_every: 2,
        seed,
        ..Default::default()
    };
    (enc, DecoderConfig::default(), cfg)
}

/// Checkpoint bytes and serialized test report of a short toy run.
pub fn seeded_run(seed: u64) -> (Vec<u8>, String) {
    let ds = toy_dataset();
    let (enc, dec, cfg) = small_run(seed);
    let out = train(&ds, enc, dec, cfg).unwrap();
    let model = Model::from_checkpoint(&ds, &out.checkpoint).unwrap();
    let report = evaluate_split(&model.scorer().unwrap(), &ds, Split::Test, &FilterIndex::build(&ds)).unwrap();
    (out.checkpoint.to_bytes().unwrap(), serde_json::to_string(&report).unwrap())
}
