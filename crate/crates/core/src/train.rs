//! Minibatch Adam training for both task heads, with validation-based early
//! stopping and best-parameter tracking.

use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{RunConfig, Task};
use crate::data::{with_reciprocals, InteractionStore, Triple, TripleStore};
use crate::embedding::SwitchSpec;
use crate::error::{contract, Error, Result};
use crate::gating::GateVariant;
use crate::kg::{sample_negatives, KgModel, KgScorer};
use crate::manifolds::{ComponentSpace, SpaceKind};
use crate::metrics::{kg_rank_metrics, rec_rank_metrics, KgMetrics, RecMetrics, Split};
use crate::numerics::{Adam, Backend, ParamStore, Tape};
use crate::product::Signature;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss per training example.
    pub loss: f64,
    /// Validation MRR (kg) or MAP (rec), when evaluated.
    pub valid: Option<f64>,
}

impl EpochRecord {
    pub fn to_json(&self) -> Value {
        json!({ "epoch": self.epoch, "loss": self.loss, "valid": self.valid })
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid: Option<f64>,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

/// Tracks the best validation score and when to stop.
struct EarlyStop {
    patience: usize,
    best: Option<f64>,
    best_store: Option<ParamStore>,
    best_epoch: usize,
    since: usize,
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_store: None,
            best_epoch: 0,
            since: 0,
        }
    }

    /// Records a validation score; returns true when training should stop.
    fn observe(&mut self, epoch: usize, score: f64, store: &ParamStore) -> bool {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.best_store = Some(store.clone());
            self.best_epoch = epoch;
            self.since = 0;
            false
        } else {
            self.since += 1;
            self.patience > 0 && self.since >= self.patience
        }
    }
}

fn streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let init = ChaCha8Rng::seed_from_u64(seed);
    let mut train = ChaCha8Rng::seed_from_u64(seed);
    train.set_stream(1);
    (init, train)
}

fn step(tape: &mut Tape, loss: <Tape as Backend>::V, store: &mut ParamStore, adam: &Adam, lr: f64) -> Result<f64> {
    let value = tape.value(&loss)[0];
    if !value.is_finite() {
        return Err(Error::Numeric {
            op: tape.failure().unwrap_or("loss"),
        });
    }
    let grads = tape.backward(loss)?.param_grads();
    adam.step(store, &grads, lr)?;
    Ok(value)
}

/// Trained KG model with its parameters and log.
pub struct KgRun {
    pub model: KgModel,
    pub store: ParamStore,
    pub log: TrainLog,
}

/// Trains a KG model on `data.train` plus reciprocals. Validation MRR on
/// `data.valid` drives early stopping when the split is non-empty.
pub fn train_kg(cfg: &RunConfig, data: &TripleStore, seed: u64) -> Result<KgRun> {
    if cfg.task != Task::Kg {
        return Err(contract("train_kg needs task = kg"));
    }
    let (mut init_rng, mut rng) = streams(seed);
    let mut store = ParamStore::new();
    let model = KgModel::new(&mut store, cfg.switch_spec(), data.n_entities(), data.n_relations(), &mut init_rng)?;
    let known = data.train_index();
    let filter = data.filter_index();
    let mut triples = with_reciprocals(&data.train, data.n_relations());
    let adam = Adam::default();
    let mut log = TrainLog::default();
    let mut stop = EarlyStop::new(cfg.patience);
    let mut tape = Tape::new().with_finite_checks(true);
    for epoch in 1..=cfg.epochs {
        triples.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in triples.chunks(cfg.batch_size) {
            let batch: Vec<(Triple, Vec<Triple>)> = chunk
                .iter()
                .map(|&t| (t, sample_negatives(t, cfg.n_neg, data.n_entities(), &known, &mut rng)))
                .collect();
            tape.clear();
            let (loss, _) = model.loss(&mut tape, &store, &batch, cfg.w_aux, &mut rng)?;
            total += step(&mut tape, loss, &mut store, &adam, cfg.lr)?;
        }
        let mut rec = EpochRecord {
            epoch,
            loss: total / triples.len().max(1) as f64,
            valid: None,
        };
        let mut halt = false;
        if !data.valid.is_empty() && epoch % cfg.eval_every == 0 {
            let m = kg_rank_metrics(&KgScorer { model: &model, store: &store }, &data.valid, &filter, data.n_relations())?;
            rec.valid = Some(m.mrr);
            halt = stop.observe(epoch, m.mrr, &store);
        }
        info!("epoch {epoch}: loss {:.6} valid {:?}", rec.loss, rec.valid);
        log.epochs.push(rec);
        if halt {
            log.stopped_early = true;
            break;
        }
    }
    if let Some(best) = stop.best_store.take() {
        store = best;
    }
    log.best_epoch = stop.best_epoch;
    log.best_valid = stop.best;
    Ok(KgRun { model, store, log })
}

/// Filtered KG metrics of a trained model on `triples`.
pub fn eval_kg(model: &KgModel, store: &ParamStore, data: &TripleStore, triples: &[Triple]) -> Result<KgMetrics> {
    kg_rank_metrics(&KgScorer { model, store }, triples, &data.filter_index(), data.n_relations())
}

pub struct RecRun {
    pub model: crate::rec::RecModel,
    pub store: ParamStore,
    pub log: TrainLog,
}

fn sample_item<R: Rng + ?Sized>(data: &InteractionStore, user: usize, rng: &mut R) -> Option<usize> {
    if data.train_set(user).len() >= data.n_items {
        return None;
    }
    loop {
        let j = rng.random_range(0..data.n_items);
        if !data.in_train(user, j) {
            return Some(j);
        }
    }
}

/// Trains a recommendation model with one sampled negative per positive
/// pair per epoch. Validation MAP drives early stopping.
pub fn train_rec(cfg: &RunConfig, data: &InteractionStore, seed: u64) -> Result<RecRun> {
    if cfg.task != Task::Rec {
        return Err(contract("train_rec needs task = rec"));
    }
    let (mut init_rng, mut rng) = streams(seed);
    let mut store = ParamStore::new();
    let model = crate::rec::RecModel::new(&mut store, cfg.switch_spec(), data.n_users, data.n_items, &mut init_rng)?;
    let mut pairs = data.train_pairs();
    let adam = Adam::default();
    let mut log = TrainLog::default();
    let mut stop = EarlyStop::new(cfg.patience);
    let has_valid = data.valid.iter().any(|v| !v.is_empty());
    let mut tape = Tape::new().with_finite_checks(true);
    for epoch in 1..=cfg.epochs {
        pairs.shuffle(&mut rng);
        let triples: Vec<(usize, usize, usize)> = pairs
            .iter()
            .filter_map(|&(u, i)| sample_item(data, u, &mut rng).map(|j| (u, i, j)))
            .collect();
        let mut total = 0.0;
        for chunk in triples.chunks(cfg.batch_size) {
            tape.clear();
            let (loss, _) = model.loss(&mut tape, &store, chunk, cfg.margin, cfg.reg, cfg.w_aux, &mut rng)?;
            total += step(&mut tape, loss, &mut store, &adam, cfg.lr)?;
        }
        let mut rec = EpochRecord {
            epoch,
            loss: total / triples.len().max(1) as f64,
            valid: None,
        };
        let mut halt = false;
        if has_valid && epoch % cfg.eval_every == 0 {
            let m = rec_rank_metrics(&model.evaluator(&store)?, data, Split::Valid)?;
            rec.valid = Some(m.map);
            halt = stop.observe(epoch, m.map, &store);
        }
        info!("epoch {epoch}: loss {:.6} valid {:?}", rec.loss, rec.valid);
        log.epochs.push(rec);
        if halt {
            log.stopped_early = true;
            break;
        }
    }
    if let Some(best) = stop.best_store.take() {
        store = best;
    }
    log.best_epoch = stop.best_epoch;
    log.best_valid = stop.best;
    Ok(RecRun { model, store, log })
}

pub fn eval_rec(model: &crate::rec::RecModel, store: &ParamStore, data: &InteractionStore, split: Split) -> Result<RecMetrics> {
    rec_rank_metrics(&model.evaluator(store)?, data, split)
}

/// One row of a timing sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub n: usize,
    pub k: usize,
    /// Seconds per scored (query, candidate) pair.
    pub secs_per_example: f64,
    /// Component-score evaluations per scored pair.
    pub evals_per_example: f64,
}

impl TimingRow {
    pub fn to_json(&self) -> Value {
        json!({ "n": self.n, "k": self.k, "secs_per_example": self.secs_per_example, "evals_per_example": self.evals_per_example })
    }
}

/// Measures noise-free KG scoring time for randomly initialized models with
/// signature `(P^dim)^N`, for each `N` in `ns` at fixed `k`. Each query is
/// gated once and then scores `candidates` tails; the reported time is per
/// scored tail and is the best of `repeats` rounds, each round timing every
/// `N` in turn.
pub fn time_sweep(ns: &[usize], k: usize, dim: usize, queries: usize, candidates: usize, repeats: usize, seed: u64) -> Result<Vec<TimingRow>> {
    let mut models = Vec::with_capacity(ns.len());
    for &n in ns {
        let comps = (0..n)
            .map(|_| ComponentSpace::with_default_curvature(SpaceKind::Poincare, dim))
            .collect::<Result<Vec<_>>>()?;
        let spec = SwitchSpec::new(Signature::new(comps)?, k, GateVariant::MatrixConv2d);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = KgModel::new(&mut store, spec, candidates, 1, &mut rng)?;
        models.push((model, store));
    }
    // Rounds visit every N in turn so that machine noise hits all sizes alike;
    // the fastest round per N is kept.
    let mut best = vec![f64::INFINITY; ns.len()];
    let mut evals = vec![0; ns.len()];
    for _ in 0..repeats.max(1) {
        for (i, (model, store)) in models.iter().enumerate() {
            model.reset_counter();
            let start = Instant::now();
            let mut sink = 0.0;
            for q in 0..queries {
                let scores = model.score_all_tails(store, q % candidates, q % 2)?;
                sink += scores[q % candidates];
            }
            let secs = start.elapsed().as_secs_f64();
            std::hint::black_box(sink);
            best[i] = best[i].min(secs);
            evals[i] = model.component_evals();
        }
    }
    let pairs = (queries * candidates) as f64;
    Ok(ns
        .iter()
        .enumerate()
        .map(|(i, &n)| TimingRow {
            n,
            k,
            secs_per_example: best[i] / pairs,
            evals_per_example: evals[i] as f64 / pairs,
        })
        .collect())
}
