//! Knowledge-graph completion in switch spaces.
//!
//! For every component space `i` the query point is
//!
//! ```text
//! Q_i(h, r) = Rot(exp0(e_h) ⊕ exp0(α_r), γ_r) ⊕ exp0(β_r)
//! s_i(h, r, t) = -d_c(Q_i, exp0(e_t))^2 + b_h + b_t
//! ```
//!
//! with relation-specific curvature `c`. Component scores of the active
//! spaces are combined by [`switch_score`]. The Euclidean case is RotE, the
//! Poincaré case RotH.

use std::collections::HashSet;

use log::warn;
use rand::Rng;

use crate::data::{FilterIndex, Triple};
use crate::embedding::{normal_vec, to_manifold, Curvatures, OpCounter, SwitchSpec};
use crate::error::{contract, Result};
use crate::gating::{
    importance_loss, noisy_topk_gates, switch_score, GateDecision, GateInputShape, GateVariant,
    GatingNetwork,
};
use crate::manifolds::ops::{mobius_add, sq_dist};
use crate::metrics::TailScorer;
use crate::numerics::{Backend, Bind, Eval, ParamId, ParamStore};

/// Parameter handles of a KG model. Relation ids include reciprocals.
#[derive(Debug, Clone)]
pub struct KgModel {
    pub spec: SwitchSpec,
    pub n_entities: usize,
    pub n_relations: usize,
    entity: ParamId,
    alpha: ParamId,
    beta: ParamId,
    gamma: ParamId,
    bias_head: ParamId,
    bias_tail: ParamId,
    curv: Curvatures,
    gate: Option<GatingNetwork>,
    counter: OpCounter,
}

/// Gate decision and per-space query points for one `(h, r)`, reused for
/// every candidate tail.
#[derive(Debug, Clone)]
pub struct KgQuery<V> {
    pub decision: GateDecision,
    /// Gate values of the active spaces, differentiable.
    gates: V,
    gate_vector: Option<V>,
    parts: Vec<(usize, V, V)>,
    bias_head: V,
}

impl<V> KgQuery<V> {
    /// Full length-N gate vector on the tape, when a gate is used.
    pub fn gate_vector(&self) -> Option<&V> {
        self.gate_vector.as_ref()
    }
}

fn gate_shape(spec: &SwitchSpec) -> Result<GateInputShape> {
    let sig = &spec.signature;
    match spec.gate {
        GateVariant::MatrixConv2d => {
            let b = sig.uniform_dim().ok_or_else(|| {
                contract("matrix gate input needs equal component dimensions")
            })?;
            Ok(GateInputShape::Matrix {
                rows: 3 * sig.len(),
                cols: b,
            })
        }
        _ => Ok(GateInputShape::Flat(3 * sig.total_dim())),
    }
}

impl KgModel {
    /// Registers freshly initialized parameters. `n_base_relations` excludes
    /// reciprocals; the model allocates twice as many relations.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        spec: SwitchSpec,
        n_entities: usize,
        n_base_relations: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let sig = &spec.signature;
        if let Some(c) = sig.components().iter().find(|c| c.dim % 2 != 0) {
            return Err(contract(format!(
                "rotation needs even component dimensions, got {}{}",
                c.kind, c.dim
            )));
        }
        let d = sig.total_dim();
        let nr = 2 * n_base_relations;
        let std = spec.embed_std;
        let entity = store.insert("kg.entity", vec![n_entities, d], normal_vec(rng, n_entities * d, std), true)?;
        let alpha = store.insert("kg.rel.alpha", vec![nr, d], normal_vec(rng, nr * d, std), true)?;
        let beta = store.insert("kg.rel.beta", vec![nr, d], normal_vec(rng, nr * d, std), true)?;
        let angles = (0..nr * d)
            .map(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
            .collect();
        let gamma = store.insert("kg.rel.gamma", vec![nr, d], angles, true)?;
        let bias_head = store.insert("kg.bias_head", vec![n_entities, 1], vec![0.0; n_entities], true)?;
        let bias_tail = store.insert("kg.bias_tail", vec![n_entities, 1], vec![0.0; n_entities], true)?;
        let curv = Curvatures::new(store, "kg.curv", sig, nr, spec.trainable_curvature)?;
        let gate = if spec.gated() {
            Some(GatingNetwork::new(
                store,
                "kg.gate",
                spec.gate,
                gate_shape(&spec)?,
                sig.len(),
                spec.noise,
                spec.gate_std,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            spec,
            n_entities,
            n_relations: nr,
            entity,
            alpha,
            beta,
            gamma,
            bias_head,
            bias_tail,
            curv,
            gate,
            counter: OpCounter::default(),
        })
    }

    /// Binds to parameters already present in `store` (for example a loaded
    /// checkpoint), checking their shapes against `spec`.
    pub fn attach(store: &ParamStore, spec: SwitchSpec) -> Result<Self> {
        spec.validate()?;
        let entity = store.expect_id("kg.entity")?;
        let ent = store.get(entity);
        let d = spec.signature.total_dim();
        if ent.shape.len() != 2 || ent.shape[1] != d {
            return Err(contract(format!(
                "checkpoint entity table has shape {:?}, signature `{}` needs [_, {d}]",
                ent.shape, spec.signature
            )));
        }
        let n_entities = ent.shape[0];
        let alpha = store.expect_id("kg.rel.alpha")?;
        let n_relations = store.get(alpha).shape[0];
        let gate = if spec.gated() {
            let g = GatingNetwork::attach(store, "kg.gate", spec.gate, gate_shape(&spec)?, spec.signature.len())?;
            Some(g)
        } else {
            None
        };
        Ok(Self {
            n_entities,
            n_relations,
            entity,
            alpha,
            beta: store.expect_id("kg.rel.beta")?,
            gamma: store.expect_id("kg.rel.gamma")?,
            bias_head: store.expect_id("kg.bias_head")?,
            bias_tail: store.expect_id("kg.bias_tail")?,
            curv: Curvatures::attach(store, "kg.curv", &spec.signature)?,
            gate,
            spec,
            counter: OpCounter::default(),
        })
    }

    /// Component-score evaluations since the last reset.
    pub fn component_evals(&self) -> u64 {
        self.counter.get()
    }

    pub fn reset_counter(&self) {
        self.counter.reset()
    }

    pub fn gate(&self) -> Option<&GatingNetwork> {
        self.gate.as_ref()
    }

    pub fn curvature(&self, store: &ParamStore, comp: usize, relation: usize) -> f64 {
        self.curv.value(store, comp, relation)
    }

    /// Gates the pair `(h, r)` and builds the query point of every active
    /// space. Noise is drawn only when `noise` is given.
    pub fn query<B: Bind, R: Rng + ?Sized>(
        &self,
        b: &mut B,
        store: &ParamStore,
        h: usize,
        r: usize,
        noise: Option<&mut R>,
    ) -> Result<KgQuery<B::V>> {
        if h >= self.n_entities || r >= self.n_relations {
            return Err(contract(format!(
                "triple ids ({h}, {r}) out of range ({} entities, {} relations)",
                self.n_entities, self.n_relations
            )));
        }
        let sig = &self.spec.signature;
        let n = sig.len();
        let eh = b.bind_row(store, self.entity, h);
        let a = b.bind_row(store, self.alpha, r);
        let be = b.bind_row(store, self.beta, r);
        let g = b.bind_row(store, self.gamma, r);
        let (decision, gates, gate_vector) = match &self.gate {
            Some(net) => {
                let x = b.concat(&[eh.clone(), a.clone(), be.clone()]);
                let noise = if self.spec.noise { noise } else { None };
                let out = noisy_topk_gates(b, net, store, &x, self.spec.k, noise)?;
                let active = b.gather(&out.gates, &out.decision.active);
                (out.decision, active, Some(out.gates))
            }
            None => {
                let w = vec![1.0 / n as f64; n];
                let d = GateDecision {
                    clean_logits: vec![0.0; n],
                    noisy_logits: vec![0.0; n],
                    active: (0..n).collect(),
                    gates: w.clone(),
                };
                (d, b.constant(w), None)
            }
        };
        let mut parts = Vec::with_capacity(decision.active.len());
        for &i in &decision.active {
            let range = sig.range(i);
            let c = self.curv.get(b, store, i, r);
            let slice = |b: &mut B, v: &B::V| b.slice(v, range.start, range.len());
            let (ehi, ai, bi, gi) = (slice(b, &eh), slice(b, &a), slice(b, &be), slice(b, &g));
            let q = transform(b, &ehi, &ai, &bi, &gi, &c)?;
            parts.push((i, q, c));
        }
        Ok(KgQuery {
            decision,
            gates,
            gate_vector,
            parts,
            bias_head: b.bind_row(store, self.bias_head, h),
        })
    }

    /// Per-space scores of tail `t` against a query, active spaces only.
    pub fn component_scores<B: Bind>(
        &self,
        b: &mut B,
        store: &ParamStore,
        q: &KgQuery<B::V>,
        t: usize,
    ) -> Result<Vec<B::V>> {
        if t >= self.n_entities {
            return Err(contract(format!("tail {t} out of range")));
        }
        let ranges: Vec<_> = q.parts.iter().map(|(i, _, _)| self.spec.signature.range(*i)).collect();
        let slices = b.bind_row_slices(store, self.entity, t, &ranges);
        let bt = b.bind_row(store, self.bias_tail, t);
        let bias = b.add(&q.bias_head, &bt);
        let mut out = Vec::with_capacity(q.parts.len());
        for ((_, qi, c), ti) in q.parts.iter().zip(&slices) {
            self.counter.bump();
            let y = to_manifold(b, ti, c)?;
            let d2 = sq_dist(b, qi, &y, c)?;
            out.push(b.sub(&bias, &d2));
        }
        Ok(out)
    }

    /// Switch score of tail `t` against a query.
    pub fn score_tail<B: Bind>(&self, b: &mut B, store: &ParamStore, q: &KgQuery<B::V>, t: usize) -> Result<B::V> {
        let scores = self.component_scores(b, store, q, t)?;
        let s = if scores.len() == 1 {
            scores[0].clone()
        } else {
            b.concat(&scores)
        };
        switch_score(b, &s, &q.gates, self.spec.mode)
    }

    /// Noise-free score of one triple with its gate decision.
    pub fn swise_score(&self, store: &ParamStore, t: Triple) -> Result<(f64, GateDecision)> {
        let mut b = Eval;
        let q = self.query(&mut b, store, t.head, t.relation, None::<&mut rand::rngs::ThreadRng>)?;
        let s = self.score_tail(&mut b, store, &q, t.tail)?;
        Ok((s[0], q.decision))
    }

    /// Score of a single component space, whether or not the gate selects it.
    pub fn component_score(&self, store: &ParamStore, t: Triple, comp: usize) -> Result<f64> {
        let mut b = Eval;
        let sig = &self.spec.signature;
        let range = sig.range(comp);
        let row = |id: ParamId, r: usize| store.get(id).row(r)[range.clone()].to_vec();
        let c = self.curv.get(&mut b, store, comp, t.relation);
        let q = transform(
            &mut b,
            &row(self.entity, t.head),
            &row(self.alpha, t.relation),
            &row(self.beta, t.relation),
            &row(self.gamma, t.relation),
            &c,
        )?;
        let y = to_manifold(&mut b, &row(self.entity, t.tail), &c)?;
        let d2 = sq_dist(&mut b, &q, &y, &c)?[0];
        Ok(-d2 + store.get(self.bias_head).data[t.head] + store.get(self.bias_tail).data[t.tail])
    }

    /// Noise-free scores of every entity as the tail of `(h, r, ?)`.
    pub fn score_all_tails(&self, store: &ParamStore, h: usize, r: usize) -> Result<Vec<f64>> {
        let mut b = Eval;
        let q = self.query(&mut b, store, h, r, None::<&mut rand::rngs::ThreadRng>)?;
        (0..self.n_entities)
            .map(|t| Ok(self.score_tail(&mut b, store, &q, t)?[0]))
            .collect()
    }

    /// Batch loss: `sum log(1 + exp(-Y s))` over each positive and its
    /// negatives, plus the load-balancing term. Every group shares one gate
    /// decision for `(h, r)`.
    pub fn loss<B: Bind, R: Rng + ?Sized>(
        &self,
        b: &mut B,
        store: &ParamStore,
        batch: &[(Triple, Vec<Triple>)],
        w_aux: f64,
        rng: &mut R,
    ) -> Result<(B::V, Vec<GateDecision>)> {
        if batch.is_empty() {
            return Err(contract("empty KG batch"));
        }
        let mut terms = Vec::with_capacity(batch.len());
        let mut gate_vecs = Vec::new();
        let mut decisions = Vec::with_capacity(batch.len());
        for (pos, negs) in batch {
            let q = self.query(b, store, pos.head, pos.relation, Some(&mut *rng))?;
            let mut scores = Vec::with_capacity(1 + negs.len());
            let mut signs = Vec::with_capacity(1 + negs.len());
            scores.push(self.score_tail(b, store, &q, pos.tail)?);
            signs.push(-1.0);
            for n in negs {
                if n.head != pos.head || n.relation != pos.relation {
                    return Err(contract("negatives must corrupt only the tail"));
                }
                scores.push(self.score_tail(b, store, &q, n.tail)?);
                signs.push(1.0);
            }
            let s = b.concat(&scores);
            let y = b.constant(signs);
            let z = b.mul(&s, &y);
            let l = b.softplus(&z);
            terms.push(b.sum(&l));
            if let Some(g) = &q.gate_vector {
                gate_vecs.push(g.clone());
            }
            decisions.push(q.decision);
        }
        let mut total = b.add_all(&terms);
        if w_aux > 0.0 && !gate_vecs.is_empty() {
            let aux = importance_loss(b, &gate_vecs, w_aux)?;
            total = b.add(&total, &aux);
        }
        Ok((total, decisions))
    }
}

/// `Rot(exp0(e) ⊕ exp0(α), γ) ⊕ exp0(β)` on one component slice.
pub fn transform<B: Bind>(b: &mut B, e: &B::V, alpha: &B::V, beta: &B::V, gamma: &B::V, c: &B::V) -> Result<B::V> {
    let x = to_manifold(b, e, c)?;
    let ta = to_manifold(b, alpha, c)?;
    let y = mobius_add(b, &x, &ta, c)?;
    let y = rotate(b, &y, gamma)?;
    let tb = to_manifold(b, beta, c)?;
    mobius_add(b, &y, &tb, c)
}

/// Block-diagonal Givens rotation: pair `(x_2j, x_2j+1)` turns by `γ_2j`.
pub fn rotate<B: Backend>(b: &mut B, x: &B::V, gamma: &B::V) -> Result<B::V> {
    let n = b.len(x);
    if n % 2 != 0 || b.len(gamma) != n {
        return Err(contract(format!(
            "rotation needs an even dimension and a matching angle vector, got {n} and {}",
            b.len(gamma)
        )));
    }
    let angle_idx: Vec<usize> = (0..n).map(|i| i & !1).collect();
    let swap_idx: Vec<usize> = (0..n).map(|i| i ^ 1).collect();
    let signs: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
    let theta = b.gather(gamma, &angle_idx);
    let cos = b.cos(&theta);
    let sin = b.sin(&theta);
    let swapped = b.gather(x, &swap_idx);
    let signs = b.constant(signs);
    let swapped = b.mul(&swapped, &signs);
    let a = b.mul(&cos, x);
    let s = b.mul(&sin, &swapped);
    Ok(b.add(&a, &s))
}

/// Plain-slice [`rotate`].
pub fn rotate_plain(x: &[f64], gamma: &[f64]) -> Result<Vec<f64>> {
    rotate(&mut Eval, &x.to_vec(), &gamma.to_vec())
}

/// Binary cross-entropy term `log(1 + exp(-y s))`.
pub fn kg_example_loss(score: f64, label: f64) -> f64 {
    crate::numerics::softplus(-label * score)
}

/// Up to `n_neg` tail corruptions of `t` that are not in `known`, drawn
/// uniformly with replacement. Returns fewer (with a warning) when too few
/// entities remain.
pub fn sample_negatives<R: Rng + ?Sized>(
    t: Triple,
    n_neg: usize,
    n_entities: usize,
    known: &FilterIndex,
    rng: &mut R,
) -> Vec<Triple> {
    if n_neg == 0 {
        return Vec::new();
    }
    let empty = HashSet::new();
    let taken = known.tails(t.head, t.relation).unwrap_or(&empty);
    let blocked = taken.len() + usize::from(!taken.contains(&t.tail));
    if blocked >= n_entities {
        warn!("no corruption of ({}, {}, {}) is unknown; skipping negatives", t.head, t.relation, t.tail);
        return Vec::new();
    }
    let mut out = Vec::with_capacity(n_neg);
    let max_draws = 1000 * n_neg;
    let mut draws = 0;
    while out.len() < n_neg && draws < max_draws {
        draws += 1;
        let e = rng.random_range(0..n_entities);
        if e != t.tail && !taken.contains(&e) {
            out.push(Triple::new(t.head, t.relation, e));
        }
    }
    if out.len() < n_neg {
        warn!("only {} of {n_neg} negatives found for ({}, {}, {})", out.len(), t.head, t.relation, t.tail);
    }
    out
}

/// Borrowed model plus parameters, usable by the ranking metrics.
pub struct KgScorer<'a> {
    pub model: &'a KgModel,
    pub store: &'a ParamStore,
}

impl TailScorer for KgScorer<'_> {
    fn n_entities(&self) -> usize {
        self.model.n_entities
    }

    fn score_tails(&self, head: usize, relation: usize) -> Result<Vec<f64>> {
        self.model.score_all_tails(self.store, head, relation)
    }
}
