//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod checks;
pub mod gradcheck;

use std::collections::BTreeSet;

use hkgx_core::ingest::{DatasetBuilder, LabeledFact};
use hkgx_core::model::{HkgDataset, HyperFact, Split};
use hkgx_core::numeric::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Magnitude floor of the relative-error denominator, so gradients that are
/// zero analytically do not divide finite-difference noise by zero.
pub const FD_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of the scalar produced by `build`, over every input entry.
pub fn fd_max_error(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |ins: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Reduces any tensor to a scalar through a fixed random weighting.
pub fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let w = random_tensor(tape.value(v).shape(), &mut rng(seed ^ 0xabcd));
    let c = tape.constant(w);
    let m = tape.mul(v, c).unwrap();
    tape.sum_all(m)
}

pub fn dataset(split_facts: &[(Split, LabeledFact)]) -> HkgDataset {
    let mut b = DatasetBuilder::new();
    for (s, f) in split_facts {
        b.push(*s, f).unwrap();
    }
    b.build().unwrap()
}

pub fn train_only(facts: &[LabeledFact]) -> HkgDataset {
    let mut b = DatasetBuilder::new();
    for f in facts {
        b.push(Split::Train, f).unwrap();
    }
    b.build().unwrap()
}

/// Random HKG with self loops, repeated participants and relations used both
/// as primary relations and as qualifier attributes.
pub fn random_hkg(seed: u64, max_facts: usize, max_qualifiers: usize) -> HkgDataset {
    let mut r = rng(seed);
    let n_ent = r.gen_range(2..40);
    let n_rel = r.gen_range(1..8);
    let n_facts = r.gen_range(1..=max_facts);
    let mut b = DatasetBuilder::new();
    for _ in 0..n_facts {
        let s = r.gen_range(0..n_ent);
        let o = if r.gen_bool(0.1) { s } else { r.gen_range(0..n_ent) };
        let rel = r.gen_range(0..n_rel);
        let nq = r.gen_range(0..=max_qualifiers);
        let quals: Vec<(String, String)> = (0..nq)
            .map(|_| {
                let v = if r.gen_bool(0.15) { s } else { r.gen_range(0..n_ent) };
                (format!("r{}", r.gen_range(0..n_rel)), format!("e{v}"))
            })
            .collect();
        let q: Vec<(&str, &str)> = quals.iter().map(|(a, v)| (a.as_str(), v.as_str())).collect();
        let split = match r.gen_range(0..10) {
            0 => Split::Valid,
            1 => Split::Test,
            _ => Split::Train,
        };
        b.push(split, &LabeledFact::new(&format!("e{s}"), &format!("r{rel}"), &format!("e{o}"), &q))
            .unwrap();
    }
    b.build().unwrap()
}

pub fn fact_set<'a>(facts: impl IntoIterator<Item = &'a HyperFact>) -> BTreeSet<HyperFact> {
    facts.into_iter().cloned().collect()
}

pub fn toy_dataset() -> HkgDataset {
    let mut b = DatasetBuilder::new();
    for (split, text) in [
        (Split::Train, include_str!("../../../../data/toy/train.txt")),
        (Split::Valid, include_str!("../../../../data/toy/valid.txt")),
        (Split::Test, include_str!("../../../../data/toy/test.txt")),
    ] {
        for line in text.lines() {
            let f: Vec<&str> = line.split('\t').collect();
            let quals: Vec<(&str, &str)> = f[3..].chunks(2).map(|c| (c[0], c[1])).collect();
            b.push(split, &LabeledFact::new(f[0], f[1], f[2], &quals)).unwrap();
        }
    }
    b.build().unwrap()
}
