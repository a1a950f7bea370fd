//! Finite-difference checks of every tape primitive and of the full
//! encode, score, loss composition.

use std::sync::Arc;

use hkgx_core::decoder::{self, DecoderConfig, DecoderFlavor};
use hkgx_core::encoder::{Activation, Aggregation, EncoderConfig, EncoderFlavor, Mode};
use hkgx_core::ingest::LabeledFact;
use hkgx_core::model::{HkgDataset, Split};
use hkgx_core::numeric::{Composition, EdgeMessages, Pooling, ProductQueries, RngStreams, Tape, Tensor, Var};
use hkgx_core::trainer::{build_batch, Model};
use hkgx_core::transform::Variant;

use super::{fd_max_error, random_tensor, rng, train_only, weighted_sum};

pub const POINTS: u64 = 10;

type Build = Box<dyn Fn(&mut Tape, &[Var], u64) -> Var>;

fn worst(shapes: &[&[usize]], build: &Build) -> f64 {
    let mut worst = 0.0f64;
    for point in 0..POINTS {
        let mut r = rng(1000 + point);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(s, &mut r)).collect();
        worst = worst.max(fd_max_error(&inputs, |t, v| build(t, v, point)));
    }
    worst
}

fn queries(pooling: Pooling) -> Arc<ProductQueries> {
    let mut q = ProductQueries::new(pooling);
    q.push(&[0], &[1, 2]);
    q.push(&[1, 2], &[0, 3, 3]);
    q.push(&[2, 0, 0], &[4, 1, 2, 0]);
    Arc::new(q)
}

fn reduced(f: impl Fn(&mut Tape, &[Var]) -> Var + 'static) -> Build {
    Box::new(move |t, v, p| {
        let y = f(t, v);
        weighted_sum(t, y, p)
    })
}

/// `(name, input shapes, graph)` for every primitive.
fn primitive_cases() -> Vec<(String, Vec<Vec<usize>>, Build)> {
    let mut cases: Vec<(String, Vec<Vec<usize>>, Build)> = vec![
        ("add".into(), vec![vec![3, 4], vec![3, 4]], reduced(|t, v| t.add(v[0], v[1]).unwrap())),
        ("sub".into(), vec![vec![3, 4], vec![3, 4]], reduced(|t, v| t.sub(v[0], v[1]).unwrap())),
        ("mul".into(), vec![vec![3, 4], vec![3, 4]], reduced(|t, v| t.mul(v[0], v[1]).unwrap())),
        ("scale".into(), vec![vec![5]], reduced(|t, v| t.scale(v[0], -1.7))),
        ("tanh".into(), vec![vec![3, 4]], reduced(|t, v| t.tanh(v[0]))),
        ("relu".into(), vec![vec![3, 4]], reduced(|t, v| t.relu(v[0]))),
        (
            "mask_mul".into(),
            vec![vec![2, 5]],
            Box::new(|t, v, p| {
                let mask = (0..10).map(|i| if (i + p) % 3 == 0 { 0.0 } else { 1.25 }).collect();
                let y = t.mask_mul(v[0], mask).unwrap();
                weighted_sum(t, y, p)
            }),
        ),
        (
            "sum_all".into(),
            vec![vec![4]],
            Box::new(|t, v, _| {
                let s = t.tanh(v[0]);
                t.sum_all(s)
            }),
        ),
        ("matmul".into(), vec![vec![3, 4], vec![4, 2]], reduced(|t, v| t.matmul(v[0], v[1]).unwrap())),
        (
            "gather_rows".into(),
            vec![vec![4, 3]],
            reduced(|t, v| t.gather_rows(v[0], Arc::new(vec![2, 0, 2, 3])).unwrap()),
        ),
        (
            "scatter_rows".into(),
            vec![vec![3, 2]],
            reduced(|t, v| t.scatter_rows(v[0], Arc::new(vec![1, 3, 1]), 5).unwrap()),
        ),
        ("concat_rows".into(), vec![vec![2, 3], vec![1, 3]], reduced(|t, v| t.concat_rows(v[0], v[1]).unwrap())),
        ("concat_cols".into(), vec![vec![2, 3], vec![2, 1]], reduced(|t, v| t.concat_cols(v[0], v[1]).unwrap())),
        (
            "batch_norm".into(),
            vec![vec![5, 3], vec![3], vec![3]],
            reduced(|t, v| t.batch_norm(v[0], v[1], v[2]).unwrap()),
        ),
        (
            "softmax_xent".into(),
            vec![vec![7]],
            Box::new(|t, v, _| t.softmax_xent(v[0], Arc::new(vec![(0, 3), (3, 1), (4, 3)])).unwrap()),
        ),
    ];
    for comp in [Composition::Rotate, Composition::Subtract, Composition::Multiply, Composition::Identity] {
        cases.push((
            format!("compose {comp:?}"),
            vec![vec![3, 6], vec![3, 6]],
            reduced(move |t, v| t.compose(v[0], v[1], comp).unwrap()),
        ));
        cases.push((
            format!("edge_aggregate {comp:?}"),
            vec![vec![4, 6], vec![3, 6]],
            reduced(move |t, v| {
                let edges = EdgeMessages::new(
                    4,
                    [(0, 1, 2, 0.5), (3, 0, 2, 0.5), (1, 2, 0, 1.0), (2, 2, 1, 0.25), (2, 1, 1, 2.0)],
                );
                t.edge_aggregate(v[0], v[1], Arc::new(edges), comp).unwrap()
            }),
        ));
    }
    for pooling in [Pooling::Mean, Pooling::Sum] {
        cases.push((
            format!("multilinear {pooling:?}"),
            vec![vec![5, 4], vec![3, 4]],
            reduced(move |t, v| t.multilinear(v[0], v[1], queries(pooling)).unwrap()),
        ));
        cases.push((
            format!("positional_multilinear {pooling:?}"),
            vec![vec![5, 4], vec![3, 4], vec![4, 2, 3]],
            reduced(move |t, v| t.positional_multilinear(v[0], v[1], v[2], queries(pooling)).unwrap()),
        ));
    }
    cases
}

/// Worst relative error of each primitive over [`POINTS`] random points.
pub fn primitive_errors() -> Vec<(String, f64)> {
    primitive_cases()
        .into_iter()
        .map(|(name, shapes, build)| {
            let shapes: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
            let err = worst(&shapes, &build);
            (name, err)
        })
        .collect()
}

/// Seven original entities and three qualifier facts: ten graph nodes.
pub fn ten_node_dataset() -> HkgDataset {
    train_only(&[
        LabeledFact::new("a", "r", "b", &[("q", "c")]),
        LabeledFact::new("b", "r", "d", &[("q", "e"), ("p", "a")]),
        LabeledFact::new("c", "p", "f", &[("r", "g")]),
        LabeledFact::new("g", "q", "a", &[]),
        LabeledFact::new("e", "r", "e", &[]),
    ])
}

fn composite_error(enc: EncoderConfig, dec: DecoderConfig, seed: u64) -> f64 {
    let ds = ten_node_dataset();
    let streams = RngStreams::new(seed);
    let model = Model::new(&ds, Variant::Equivalent, enc, dec, &streams).unwrap();
    assert_eq!(model.graph.num_entities, 10);
    let facts: Vec<_> = ds.split(Split::Train).iter().collect();
    let (q, groups) = build_batch(&facts, 2, 7, dec.relation_pooling, &mut rng(seed)).unwrap();
    let q = Arc::new(q);
    let groups = Arc::new(groups);
    let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    fd_max_error(&inputs, |tape, vars| {
        let mut drop = streams.stream_at("dropout", 1);
        let (e, r) = model.forward(tape, vars, Mode::Train, Some(&mut drop)).unwrap();
        let s = decoder::score_queries(tape, &model.decoder, &model.decoder_params, vars, e, r, q.clone()).unwrap();
        tape.softmax_xent(s, groups.clone()).unwrap()
    })
}

/// Worst relative error of the full pipeline gradient, per configuration.
pub fn composite_errors() -> Vec<(String, f64)> {
    let base = EncoderConfig {
        dim: 4,
        layers: 2,
        dropout: 0.2,
        ..Default::default()
    };
    let configs = [
        ("compgcn rotate", base, DecoderConfig::default()),
        (
            "compgcn subtract sum",
            EncoderConfig { composition: Composition::Subtract, aggregation: Aggregation::Sum, ..base },
            DecoderConfig::default(),
        ),
        (
            "compgcn multiply full sharing",
            EncoderConfig { composition: Composition::Multiply, share_ratio: 1.0, ..base },
            DecoderConfig { relation_pooling: Pooling::Sum, ..Default::default() },
        ),
        (
            "rgcn relu batch norm",
            EncoderConfig { flavor: EncoderFlavor::Rgcn, activation: Activation::Relu, ..base },
            DecoderConfig { batch_norm: true, dropout: 0.1, ..Default::default() },
        ),
        (
            "compgcn no sharing hype",
            EncoderConfig { share_ratio: 0.0, ..base },
            DecoderConfig { flavor: DecoderFlavor::HypE, ..Default::default() },
        ),
    ];
    configs
        .iter()
        .enumerate()
        .map(|(i, (name, enc, dec))| {
            let err = (0..POINTS)
                .map(|p| composite_error(*enc, *dec, 100 * i as u64 + p))
                .fold(0.0, f64::max);
            (name.to_string(), err)
        })
        .collect()
}
