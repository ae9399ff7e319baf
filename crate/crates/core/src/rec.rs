//! Metric-learning recommendation in switch spaces.
//!
//! Users and items live in the tangent space of each component. The
//! component preference is `s_k(u, i) = -d_c(exp0(u_k), exp0(v_k))^2` and the
//! active components are combined by [`switch_score`]. A single `E` space is
//! collaborative metric learning, a single `P` space its hyperbolic variant.

use rand::Rng;

use crate::embedding::{normal_vec, to_manifold, Curvatures, OpCounter, SwitchSpec};
use crate::error::{contract, Result};
use crate::gating::{
    importance_loss, noisy_topk_gates, switch_score, top_k, GateDecision, GateInputShape,
    GateVariant, GatingNetwork, ScoreMode,
};
use crate::manifolds::{self, ops::sq_dist};
use crate::metrics::ItemScorer;
use crate::numerics::{masked_softmax, Bind, Eval, ParamId, ParamStore};

pub const DEFAULT_MARGIN: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct RecModel {
    pub spec: SwitchSpec,
    pub n_users: usize,
    pub n_items: usize,
    user: ParamId,
    item: ParamId,
    curv: Curvatures,
    gate: Option<GatingNetwork>,
    counter: OpCounter,
}

/// Score of one `(user, item)` pair with its gate outcome.
#[derive(Debug, Clone)]
pub struct PairScore<V> {
    pub score: V,
    pub decision: GateDecision,
    pub gate_vector: Option<V>,
}

fn gate_shape(spec: &SwitchSpec) -> GateInputShape {
    GateInputShape::Flat(2 * spec.signature.total_dim())
}

impl RecModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        spec: SwitchSpec,
        n_users: usize,
        n_items: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        if spec.gated() && spec.gate == GateVariant::MatrixConv2d {
            return Err(contract("the recommendation gate takes a flat input"));
        }
        let d = spec.signature.total_dim();
        let std = spec.embed_std;
        let user = store.insert("rec.user", vec![n_users, d], normal_vec(rng, n_users * d, std), true)?;
        let item = store.insert("rec.item", vec![n_items, d], normal_vec(rng, n_items * d, std), true)?;
        let curv = Curvatures::new(store, "rec.curv", &spec.signature, 1, spec.trainable_curvature)?;
        let gate = if spec.gated() {
            Some(GatingNetwork::new(
                store,
                "rec.gate",
                spec.gate,
                gate_shape(&spec),
                spec.n(),
                spec.noise,
                spec.gate_std,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            spec,
            n_users,
            n_items,
            user,
            item,
            curv,
            gate,
            counter: OpCounter::default(),
        })
    }

    pub fn attach(store: &ParamStore, spec: SwitchSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.signature.total_dim();
        let user = store.expect_id("rec.user")?;
        let item = store.expect_id("rec.item")?;
        for id in [user, item] {
            let p = store.get(id);
            if p.shape.len() != 2 || p.shape[1] != d {
                return Err(contract(format!(
                    "checkpoint `{}` has shape {:?}, signature `{}` needs [_, {d}]",
                    p.name, p.shape, spec.signature
                )));
            }
        }
        let gate = if spec.gated() {
            Some(GatingNetwork::attach(store, "rec.gate", spec.gate, gate_shape(&spec), spec.n())?)
        } else {
            None
        };
        Ok(Self {
            n_users: store.get(user).shape[0],
            n_items: store.get(item).shape[0],
            user,
            item,
            curv: Curvatures::attach(store, "rec.curv", &spec.signature)?,
            gate,
            spec,
            counter: OpCounter::default(),
        })
    }

    pub fn component_evals(&self) -> u64 {
        self.counter.get()
    }

    pub fn reset_counter(&self) {
        self.counter.reset()
    }

    pub fn gate(&self) -> Option<&GatingNetwork> {
        self.gate.as_ref()
    }

    /// `-d^2` between user `u` and item `i` in component `k`.
    pub fn component_score<B: Bind>(&self, b: &mut B, store: &ParamStore, u: &B::V, v: &B::V, k: usize) -> Result<B::V> {
        self.counter.bump();
        let range = self.spec.signature.range(k);
        let c = self.curv.get(b, store, k, 0);
        let uk = b.slice(u, range.start, range.len());
        let vk = b.slice(v, range.start, range.len());
        let x = to_manifold(b, &uk, &c)?;
        let y = to_manifold(b, &vk, &c)?;
        let d2 = sq_dist(b, &x, &y, &c)?;
        Ok(b.neg(&d2))
    }

    /// Gated switch score of `(u, i)`; gate noise only when `noise` is given.
    pub fn pair_score<B: Bind, R: Rng + ?Sized>(
        &self,
        b: &mut B,
        store: &ParamStore,
        u: usize,
        i: usize,
        noise: Option<&mut R>,
    ) -> Result<PairScore<B::V>> {
        if u >= self.n_users || i >= self.n_items {
            return Err(contract(format!("pair ({u}, {i}) out of range")));
        }
        let n = self.spec.n();
        let uv = b.bind_row(store, self.user, u);
        let vv = b.bind_row(store, self.item, i);
        let (decision, gates, gate_vector) = match &self.gate {
            Some(net) => {
                let x = b.concat(&[uv.clone(), vv.clone()]);
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
        let mut scores = Vec::with_capacity(decision.active.len());
        for &k in &decision.active {
            scores.push(self.component_score(b, store, &uv, &vv, k)?);
        }
        let s = if scores.len() == 1 {
            scores.pop().unwrap()
        } else {
            b.concat(&scores)
        };
        let score = switch_score(b, &s, &gates, self.spec.mode)?;
        Ok(PairScore {
            score,
            decision,
            gate_vector,
        })
    }

    /// Noise-free switch score of `(u, i)` with its gate decision.
    pub fn rec_switch_score(&self, store: &ParamStore, u: usize, i: usize) -> Result<(f64, GateDecision)> {
        let p = self.pair_score(&mut Eval, store, u, i, None::<&mut rand::rngs::ThreadRng>)?;
        Ok((p.score[0], p.decision))
    }

    /// Batch loss over `(user, positive, negative)` triples:
    /// `sum max(0, m - s(u,i) + s(u,j))`, plus `reg` times the squared norms
    /// of the embeddings involved, plus the load-balancing term.
    pub fn loss<B: Bind, R: Rng + ?Sized>(
        &self,
        b: &mut B,
        store: &ParamStore,
        batch: &[(usize, usize, usize)],
        margin: f64,
        reg: f64,
        w_aux: f64,
        rng: &mut R,
    ) -> Result<(B::V, Vec<GateDecision>)> {
        if batch.is_empty() {
            return Err(contract("empty recommendation batch"));
        }
        let mut terms = Vec::with_capacity(batch.len());
        let mut gate_vecs = Vec::new();
        let mut decisions = Vec::with_capacity(2 * batch.len());
        for &(u, i, j) in batch {
            let pos = self.pair_score(b, store, u, i, Some(&mut *rng))?;
            let neg = self.pair_score(b, store, u, j, Some(&mut *rng))?;
            let gap = b.sub(&neg.score, &pos.score);
            let h = b.shift(&gap, margin);
            let mut t = b.relu(&h);
            if reg > 0.0 {
                let rows = [
                    b.bind_row(store, self.user, u),
                    b.bind_row(store, self.item, i),
                    b.bind_row(store, self.item, j),
                ];
                let all = b.concat(&rows);
                let sq = b.sq_norm(&all);
                let r = b.scale(&sq, reg);
                t = b.add(&t, &r);
            }
            terms.push(t);
            for p in [pos, neg] {
                if let Some(g) = p.gate_vector {
                    gate_vecs.push(g);
                }
                decisions.push(p.decision);
            }
        }
        let mut total = b.add_all(&terms);
        if w_aux > 0.0 && !gate_vecs.is_empty() {
            let aux = importance_loss(b, &gate_vecs, w_aux)?;
            total = b.add(&total, &aux);
        }
        Ok((total, decisions))
    }

    /// Precomputes everything needed to rank items quickly.
    pub fn evaluator<'a>(&'a self, store: &'a ParamStore) -> Result<RecEvaluator<'a>> {
        RecEvaluator::new(self, store)
    }
}

/// `max(0, m - s_pos + s_neg)`.
pub fn hinge_loss(s_pos: f64, s_neg: f64, margin: f64) -> f64 {
    (margin - s_pos + s_neg).max(0.0)
}

/// Noise-free scorer over all items with embeddings already mapped onto
/// their component spaces and, for the linear gate, the gate logits split
/// into a user half and an item half.
pub struct RecEvaluator<'a> {
    model: &'a RecModel,
    store: &'a ParamStore,
    curvatures: Vec<f64>,
    users: Vec<Vec<f64>>,
    items: Vec<Vec<f64>>,
    user_logits: Option<Vec<f64>>,
    item_logits: Option<Vec<f64>>,
}

fn map_table(table: &[f64], rows: usize, sig: &crate::product::Signature, curv: &[f64]) -> Result<Vec<Vec<f64>>> {
    let d = sig.total_dim();
    let mut out = Vec::with_capacity(sig.len());
    for (k, &c) in curv.iter().enumerate() {
        let range = sig.range(k);
        let mut m = Vec::with_capacity(rows * range.len());
        let cv = vec![c];
        for r in 0..rows {
            let v = table[r * d + range.start..r * d + range.end].to_vec();
            m.extend(to_manifold(&mut Eval, &v, &cv)?);
        }
        out.push(m);
    }
    Ok(out)
}

impl<'a> RecEvaluator<'a> {
    fn new(model: &'a RecModel, store: &'a ParamStore) -> Result<Self> {
        let sig = &model.spec.signature;
        let n = sig.len();
        let curvatures: Vec<f64> = (0..n).map(|k| model.curv.value(store, k, 0)).collect();
        let user = &store.get(model.user).data;
        let item = &store.get(model.item).data;
        let users = map_table(user, model.n_users, sig, &curvatures)?;
        let items = map_table(item, model.n_items, sig, &curvatures)?;
        let (user_logits, item_logits) = match &model.gate {
            Some(net) if net.variant() == GateVariant::FlatLinear => {
                let d = sig.total_dim();
                let w = &store.by_name("rec.gate.f1.weight").expect("gate weight").data;
                let bias = &store.by_name("rec.gate.f1.bias").expect("gate bias").data;
                let half = |table: &[f64], rows: usize, offset: usize, with_bias: bool| {
                    let mut out = Vec::with_capacity(rows * n);
                    for r in 0..rows {
                        let x = &table[r * d..(r + 1) * d];
                        for g in 0..n {
                            let wrow = &w[g * 2 * d + offset..g * 2 * d + offset + d];
                            let dot: f64 = wrow.iter().zip(x).map(|(a, b)| a * b).sum();
                            out.push(dot + if with_bias { bias[g] } else { 0.0 });
                        }
                    }
                    out
                };
                (
                    Some(half(user, model.n_users, 0, false)),
                    Some(half(item, model.n_items, d, true)),
                )
            }
            _ => (None, None),
        };
        Ok(Self {
            model,
            store,
            curvatures,
            users,
            items,
            user_logits,
            item_logits,
        })
    }

    fn mapped<'b>(&'b self, table: &'b [Vec<f64>], k: usize, row: usize) -> &'b [f64] {
        let dim = self.model.spec.signature.component(k).dim;
        &table[k][row * dim..(row + 1) * dim]
    }

    /// Noise-free score of `(u, i)`.
    pub fn score(&self, u: usize, i: usize) -> Result<f64> {
        let m = self.model;
        let n = m.spec.n();
        let gates = match (&m.gate, &self.user_logits, &self.item_logits) {
            (None, ..) => vec![1.0 / n as f64; n],
            (Some(_), Some(ul), Some(il)) => {
                let logits: Vec<f64> = (0..n).map(|g| ul[u * n + g] + il[i * n + g]).collect();
                let active = top_k(&logits, m.spec.k)?;
                masked_softmax(&logits, Some(&active))
            }
            _ => return Ok(m.rec_switch_score(self.store, u, i)?.0),
        };
        let mut s = Vec::with_capacity(n);
        let mut g = Vec::with_capacity(n);
        for k in 0..n {
            if gates[k] > 0.0 {
                let d2 = manifolds::sq_dist_fast(
                    self.mapped(&self.users, k, u),
                    self.mapped(&self.items, k, i),
                    self.curvatures[k],
                )?;
                s.push(-d2);
                g.push(gates[k]);
            }
        }
        if s.len() == 1 && m.spec.mode != ScoreMode::Sum {
            return Ok(s[0]);
        }
        let mut b = Eval;
        Ok(switch_score(&mut b, &s, &g, m.spec.mode)?[0])
    }
}

impl ItemScorer for RecEvaluator<'_> {
    fn n_items(&self) -> usize {
        self.model.n_items
    }

    fn score_items(&self, user: usize) -> Result<Vec<f64>> {
        (0..self.model.n_items).map(|i| self.score(user, i)).collect()
    }
}
