//! Pieces shared by the task heads: tangent-space embedding tables, learned
//! curvatures, and the per-model gating setup.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, Result};
use crate::gating::{GateVariant, ScoreMode};
use crate::manifolds::ops::{exp_map0, fit_to_chart};
use crate::manifolds::{curvature_from_raw, SpaceKind};
use crate::numerics::{Bind, ParamId, ParamStore};
use crate::product::Signature;

/// Tangent vectors are kept this far inside the spherical chart before
/// `exp_0`, so training never reaches the wrap-around singularity.
pub const CHART_MARGIN: f64 = 1e-3;

/// Model-independent switch settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchSpec {
    pub signature: Signature,
    pub k: usize,
    pub gate: GateVariant,
    pub mode: ScoreMode,
    /// Draw gate noise during training.
    pub noise: bool,
    pub trainable_curvature: bool,
    pub embed_std: f64,
    pub gate_std: f64,
}

impl SwitchSpec {
    pub fn new(signature: Signature, k: usize, gate: GateVariant) -> Self {
        Self {
            signature,
            k,
            gate,
            mode: ScoreMode::SWITCH,
            noise: true,
            trainable_curvature: false,
            embed_std: 0.05,
            gate_std: 0.01,
        }
    }

    pub fn n(&self) -> usize {
        self.signature.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.k == 0 || self.k > n {
            return Err(contract(format!("K = {} must lie in 1..={n}", self.k)));
        }
        if self.mode == ScoreMode::Sum && self.k != n {
            return Err(contract("sum scoring mode requires K = N"));
        }
        Ok(())
    }

    /// Whether a gating network is needed at all. Plain product spaces and
    /// single-space models always use every component with weight 1/N.
    pub fn gated(&self) -> bool {
        self.mode != ScoreMode::Sum && self.n() > 1
    }
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("finite positive std");
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Learned curvature per non-flat component, one value per row (relation for
/// the KG head, a single row for the recommendation head).
#[derive(Debug, Clone)]
pub struct Curvatures {
    kinds: Vec<SpaceKind>,
    raw: Vec<Option<ParamId>>,
}

impl Curvatures {
    pub fn new(store: &mut ParamStore, prefix: &str, sig: &Signature, rows: usize, trainable: bool) -> Result<Self> {
        let mut raw = Vec::with_capacity(sig.len());
        for (i, comp) in sig.components().iter().enumerate() {
            if comp.is_flat() {
                raw.push(None);
                continue;
            }
            let id = store.insert(
                &format!("{prefix}.{i}"),
                vec![rows, 1],
                vec![comp.raw_curvature(); rows],
                trainable,
            )?;
            raw.push(Some(id));
        }
        Ok(Self {
            kinds: sig.components().iter().map(|c| c.kind).collect(),
            raw,
        })
    }

    pub fn attach(store: &ParamStore, prefix: &str, sig: &Signature) -> Result<Self> {
        let raw = sig
            .components()
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if c.is_flat() {
                    Ok(None)
                } else {
                    store.expect_id(&format!("{prefix}.{i}")).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kinds: sig.components().iter().map(|c| c.kind).collect(),
            raw,
        })
    }

    /// Curvature of component `comp` for `row` as a length-1 value.
    pub fn get<B: Bind>(&self, b: &mut B, store: &ParamStore, comp: usize, row: usize) -> B::V {
        match self.raw[comp] {
            None => b.scalar(0.0),
            Some(id) => {
                let raw = b.bind_row(store, id, row);
                let abs = b.softplus(&raw);
                b.scale(&abs, self.kinds[comp].sign())
            }
        }
    }

    pub fn value(&self, store: &ParamStore, comp: usize, row: usize) -> f64 {
        match self.raw[comp] {
            None => 0.0,
            Some(id) => curvature_from_raw(self.kinds[comp], store.get(id).row(row)[0]),
        }
    }
}

/// Maps a tangent vector at the origin onto its component space.
pub fn to_manifold<B: Bind>(b: &mut B, v: &B::V, c: &B::V) -> Result<B::V> {
    let v = fit_to_chart(b, v, c, CHART_MARGIN);
    exp_map0(b, &v, c)
}

/// Counts component-score evaluations, for checking that inactive spaces are
/// skipped.
#[derive(Debug, Default)]
pub struct OpCounter(AtomicU64);

impl OpCounter {
    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

impl Clone for OpCounter {
    fn clone(&self) -> Self {
        Self(AtomicU64::new(self.get()))
    }
}
