//! Mini-batch training with negative sampling and a softmax cross-entropy
//! objective over each positive fact and its corruptions.

mod checkpoint;

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{init_description, Checkpoint, CheckpointHeader, OptimizerHeader, ParamSpec, FORMAT_VERSION, MAGIC};

use crate::decoder::{self, DecoderConfig, DecoderParams, Scorer};
use crate::encoder::{self, EncoderConfig, EncoderGraph, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_split, FilterIndex, RankReport};
use crate::model::{EntityId, HkgDataset, HyperFact, Split, SplitSelector};
use crate::numeric::{log_sum_exp, Adam, AdamConfig, ParamStore, Pooling, ProductQueries, RngStreams, Tape, Tensor, Var};
use crate::transform::{transform, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Corruptions per entity position.
    pub negatives: usize,
    pub epochs: usize,
    /// Optional cap on optimizer steps.
    pub max_steps: Option<u64>,
    /// Validation interval in epochs.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 1e-3,
            negatives: 10,
            epochs: 100,
            max_steps: None,
            eval_every: 5,
            patience: 5,
            seed: 0,
            variant: Variant::Equivalent,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch_size, epochs, eval_every and patience must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Encoder, decoder and their parameters over the transformed training graph.
#[derive(Debug, Clone)]
pub struct Model {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub graph: EncoderGraph,
    pub params: ParamStore,
    pub encoder_params: EncoderParams,
    pub decoder_params: DecoderParams,
}

impl Model {
    /// Transforms the training split with `variant` and initialises all
    /// parameters from the `init` stream.
    pub fn new(ds: &HkgDataset, variant: Variant, enc: EncoderConfig, dec: DecoderConfig, streams: &RngStreams) -> Result<Self> {
        enc.validate()?;
        dec.validate(enc.dim)?;
        let kg = transform(ds, SplitSelector::Only(Split::Train), variant)?;
        let graph = EncoderGraph::new(&kg, enc.aggregation);
        let mut params = ParamStore::new();
        let mut rng = streams.stream("init");
        let encoder_params = encoder::init_params(&enc, &graph, &mut params, &mut rng)?;
        let decoder_params = decoder::init_params(&dec, enc.dim, &mut params, &mut rng)?;
        Ok(Self {
            encoder: enc,
            decoder: dec,
            graph,
            params,
            encoder_params,
            decoder_params,
        })
    }

    pub fn leaves(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .ids()
            .map(|id| {
                let t = self.params.get(id).clone();
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }

    /// Decoder-side entity matrix and relation matrix.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], mode: Mode, mut rng: Option<&mut ChaCha8Rng>) -> Result<(Var, Var)> {
        let enc = encoder::encode(
            tape,
            &self.encoder,
            &self.graph,
            &self.encoder_params,
            vars,
            mode,
            rng.as_deref_mut(),
        )?;
        let ents = decoder::decoder_entities(
            tape,
            &self.decoder,
            &self.decoder_params,
            vars,
            &enc,
            self.graph.num_original_entities,
            mode,
            rng,
        )?;
        Ok((ents, enc.relations))
    }

    /// Eval-mode embeddings for tape-free scoring.
    pub fn scorer(&self) -> Result<Scorer> {
        let mut tape = Tape::new();
        let vars = self.leaves(&mut tape, false);
        let (ents, rels) = self.forward(&mut tape, &vars, Mode::Eval, None)?;
        Ok(Scorer {
            entities: tape.value(ents).clone(),
            relations: tape.value(rels).clone(),
            filters: self.decoder_params.filters.map(|f| self.params.get(f).clone()),
            pooling: self.decoder.relation_pooling,
        })
    }

    /// Rebuilds a model from a checkpoint and the dataset it was trained on.
    pub fn from_checkpoint(ds: &HkgDataset, ckpt: &Checkpoint) -> Result<Self> {
        let h = &ckpt.header;
        if h.vocab_hash != ds.vocab_digest() {
            return Err(Error::Checkpoint(format!(
                "vocabulary hash mismatch: checkpoint {} vs dataset {}",
                h.vocab_hash,
                ds.vocab_digest()
            )));
        }
        let mut model = Model::new(ds, h.train.variant, h.encoder, h.decoder, &RngStreams::new(h.train.seed))?;
        let layout: Vec<ParamSpec> = param_specs(&model.params);
        if layout != h.params {
            return Err(Error::Checkpoint("parameter layout differs from the rebuilt model".into()));
        }
        model.params = ckpt.params.clone();
        Ok(model)
    }
}

fn param_specs(store: &ParamStore) -> Vec<ParamSpec> {
    store
        .iter()
        .map(|(name, t)| ParamSpec {
            name: name.to_owned(),
            shape: t.shape().to_vec(),
        })
        .collect()
}

/// `k` corruptions per entity position, each drawn uniformly from the
/// original entities other than the true one.
pub fn sample_negatives(fact: &HyperFact, k: usize, num_entities: usize, rng: &mut impl Rng) -> Result<Vec<HyperFact>> {
    if num_entities < 2 {
        return Err(Error::Validation("negative sampling needs at least two entities".into()));
    }
    let mut out = Vec::with_capacity(k * fact.num_positions());
    for p in 0..fact.num_positions() {
        let truth = fact.entity_at(p).expect("position in range").0;
        for _ in 0..k {
            let mut e = rng.gen_range(0..num_entities as u32 - 1);
            if e >= truth {
                e += 1;
            }
            out.push(fact.with_entity_at(p, EntityId(e)));
        }
    }
    Ok(out)
}

/// `-log(e^pos / (e^pos + sum e^neg))`, computed stably.
pub fn fact_loss(positive: f64, negatives: &[f64]) -> f64 {
    if negatives.is_empty() {
        log::warn!("loss over an empty negative set is 0");
        return 0.0;
    }
    let m = negatives.iter().copied().fold(positive, f64::max);
    if m == positive {
        // keeps precision when the positive dominates
        return negatives.iter().map(|n| (n - positive).exp()).sum::<f64>().ln_1p();
    }
    let mut all = Vec::with_capacity(negatives.len() + 1);
    all.push(positive);
    all.extend_from_slice(negatives);
    log_sum_exp(&all) - positive
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub step: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_mrr: Option<f64>,
    pub wall_seconds: f64,
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("step,epoch,train_loss,valid_mrr,wall_seconds\n");
    for r in rows {
        let mrr = r.valid_mrr.map(|m| m.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{:.3}\n", r.step, r.epoch, r.train_loss, mrr, r.wall_seconds));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<CurveRow>,
    /// Loss of the first batch and of the last batch.
    pub first_loss: f64,
    pub last_loss: f64,
    pub steps: u64,
}

/// Builds the corrupted-query batch for `facts`; returns the queries and one
/// `(start, len)` group per fact with the positive first.
pub fn build_batch(
    facts: &[&HyperFact],
    k: usize,
    num_entities: usize,
    pooling: Pooling,
    rng: &mut impl Rng,
) -> Result<(ProductQueries, Vec<(usize, usize)>)> {
    let mut queries = ProductQueries::new(pooling);
    let mut groups = Vec::with_capacity(facts.len());
    for fact in facts {
        let start = queries.len();
        let negs = sample_negatives(fact, k, num_entities, rng)?;
        for f in std::iter::once(*fact).chain(negs.iter()) {
            let (rels, ents) = decoder::fact_query(f);
            queries.push(&rels, &ents);
        }
        groups.push((start, queries.len() - start));
    }
    Ok((queries, groups))
}

/// One optimizer step on `facts`; returns the summed batch loss.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    facts: &[&HyperFact],
    negatives: usize,
    step: u64,
    streams: &RngStreams,
) -> Result<f64> {
    let mut neg_rng = streams.stream_at("negatives", step);
    let mut drop_rng = streams.stream_at("dropout", step);
    let (queries, groups) = build_batch(
        facts,
        negatives,
        model.graph.num_original_entities,
        model.decoder.relation_pooling,
        &mut neg_rng,
    )?;

    let mut tape = Tape::new();
    let vars = model.leaves(&mut tape, true);
    let (ents, rels) = model.forward(&mut tape, &vars, Mode::Train, Some(&mut drop_rng))?;
    let scores = decoder::score_queries(
        &mut tape,
        &model.decoder,
        &model.decoder_params,
        &vars,
        ents,
        rels,
        Arc::new(queries),
    )?;
    let loss = tape.softmax_xent(scores, Arc::new(groups))?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value} at step {step}")));
    }
    let mut grads = tape.backward(loss)?;
    let per_param: Vec<Option<Tensor>> = vars.iter().map(|v| grads.take(*v)).collect();
    adam.step(&mut model.params, &per_param)
        .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
    Ok(value)
}

fn snapshot(model: &Model, adam: &Adam, cfg: &TrainConfig, vocab_hash: &str, step: u64, epoch: usize, best: Option<f64>) -> Checkpoint {
    Checkpoint {
        header: CheckpointHeader {
            format_version: FORMAT_VERSION,
            encoder: model.encoder,
            decoder: model.decoder,
            train: *cfg,
            vocab_hash: vocab_hash.to_owned(),
            params: param_specs(&model.params),
            step,
            epoch,
            best_valid_mrr: best,
            optimizer: OptimizerHeader {
                config: adam.config,
                step: adam.step_count(),
            },
            init: init_description(),
        },
        params: model.params.clone(),
        first_moments: adam.first_moments().to_vec(),
        second_moments: adam.second_moments().to_vec(),
    }
}

/// Validation report of the current parameters.
pub fn validate(model: &Model, ds: &HkgDataset, index: &FilterIndex) -> Result<RankReport> {
    evaluate_split(&model.scorer()?, ds, Split::Valid, index)
}

/// Trains and returns the checkpoint with the best validation MRR (or the
/// final state when there is no validation split).
pub fn train(ds: &HkgDataset, enc: EncoderConfig, dec: DecoderConfig, cfg: TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_facts = ds.split(Split::Train);
    if train_facts.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let streams = RngStreams::new(cfg.seed);
    let mut model = Model::new(ds, cfg.variant, enc, dec, &streams)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.learning_rate,
            ..Default::default()
        },
        &model.params,
    );
    let vocab_hash = ds.vocab_digest();
    let has_valid = !ds.split(Split::Valid).is_empty();
    let index = if has_valid { FilterIndex::build(ds) } else { FilterIndex::default() };
    log::info!(
        "train facts={} params={} entities={} mediators={}",
        train_facts.len(),
        model.params.num_scalars(),
        model.graph.num_original_entities,
        model.graph.num_mediators()
    );

    let start = Instant::now();
    let mut curve = Vec::new();
    let mut step = 0u64;
    let mut first_loss = None;
    let mut last_loss = 0.0;
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut bad_evals = 0usize;
    let mut order: Vec<usize> = (0..train_facts.len()).collect();
    let step_cap = cfg.max_steps.unwrap_or(u64::MAX);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut streams.stream_at("shuffle", epoch as u64));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            if step >= step_cap {
                break;
            }
            step += 1;
            let batch: Vec<&HyperFact> = chunk.iter().map(|&i| &train_facts[i]).collect();
            let loss = train_step(&mut model, &mut adam, &batch, cfg.negatives, step, &streams)?;
            first_loss.get_or_insert(loss);
            last_loss = loss;
            epoch_loss += loss;
        }
        let done = step >= step_cap || epoch == cfg.epochs;
        let mut valid_mrr = None;
        if has_valid && (epoch % cfg.eval_every == 0 || done) {
            let mrr = validate(&model, ds, &index)?.overall.mrr;
            valid_mrr = Some(mrr);
            log::info!("epoch={epoch} step={step} valid_mrr={mrr:.4}");
            if best.as_ref().is_none_or(|(b, _)| mrr > *b) {
                best = Some((mrr, snapshot(&model, &adam, &cfg, &vocab_hash, step, epoch, Some(mrr))));
                bad_evals = 0;
            } else {
                bad_evals += 1;
            }
        }
        curve.push(CurveRow {
            step,
            epoch,
            train_loss: epoch_loss / train_facts.len() as f64,
            valid_mrr,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        log::debug!("epoch={epoch} step={step} train_loss={}", epoch_loss / train_facts.len() as f64);
        if done {
            break;
        }
        if bad_evals >= cfg.patience {
            log::info!("early stop epoch={epoch} step={step}");
            break;
        }
    }
    let last_epoch = curve.last().map_or(0, |r| r.epoch);
    let checkpoint = match best {
        Some((_, ckpt)) => ckpt,
        None => snapshot(&model, &adam, &cfg, &vocab_hash, step, last_epoch, None),
    };
    Ok(TrainOutcome {
        checkpoint,
        curve,
        first_loss: first_loss.unwrap_or(0.0),
        last_loss,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Qualifier, RelationId};
    use rand::SeedableRng;

    #[test]
    fn negative_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = HyperFact::triple(EntityId(0), RelationId(0), EntityId(1));
        let negs = sample_negatives(&t, 2, 5, &mut rng).unwrap();
        assert_eq!(negs.len(), 4);
        assert!(negs.iter().all(|n| *n != t));
        let q = HyperFact::new(
            EntityId(0),
            RelationId(0),
            EntityId(1),
            vec![Qualifier::new(RelationId(1), EntityId(2)), Qualifier::new(RelationId(2), EntityId(3))],
        );
        assert_eq!(sample_negatives(&q, 1, 5, &mut rng).unwrap().len(), 4);
    }

    #[test]
    fn loss_examples() {
        assert!((fact_loss(0.0, &[0.0]) - 2f64.ln()).abs() < 1e-12);
        assert!((fact_loss(1.5, &[1.5; 7]) - 8f64.ln()).abs() < 1e-12);
        assert!(fact_loss(10.0, &[-10.0]) < 1e-8);
        assert_eq!(fact_loss(3.0, &[]), 0.0);
    }
}
