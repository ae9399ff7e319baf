//! Sparse top-K gating over component spaces.
//!
//! A gating network maps the embeddings taking part in an example to `N`
//! logits, one per component space. During training a learned amount of
//! Gaussian noise is added,
//!
//! ```text
//! f(x) = f1(x) + randn() * softplus(f2(x))
//! ```
//!
//! then all but the `K` largest logits are masked to `-inf` and a softmax
//! produces the gates. Only spaces with a nonzero gate are scored; their
//! scores are combined with [`switch_score`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{contract, Result};
use crate::numerics::{masked_softmax, Backend, Bind, ParamId, ParamStore};

/// Convolution kernel size used by the convolutional gate heads.
pub const CONV_KERNEL: usize = 5;
/// Convolution stride used by the convolutional gate heads.
pub const CONV_STRIDE: usize = 3;
/// Output channels of the convolutional gate heads.
pub const CONV_CHANNELS: usize = 4;
/// Default weight of the load-balancing loss.
pub const DEFAULT_W_AUX: f64 = 0.01;

/// Architecture of the gating network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateVariant {
    /// Linear layer over the flat concatenated input.
    FlatLinear,
    /// 1-D convolution over the flat input, then a linear layer.
    FlatConv1d,
    /// 2-D convolution over the stacked component matrix, then a linear layer.
    MatrixConv2d,
}

impl GateVariant {
    pub fn name(self) -> &'static str {
        match self {
            GateVariant::FlatLinear => "flat-linear",
            GateVariant::FlatConv1d => "flat-conv1d",
            GateVariant::MatrixConv2d => "matrix-conv2d",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "flat-linear" => Some(GateVariant::FlatLinear),
            "flat-conv1d" => Some(GateVariant::FlatConv1d),
            "matrix-conv2d" => Some(GateVariant::MatrixConv2d),
            _ => None,
        }
    }
}

/// Shape of the gate input: a flat vector or a row-major matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateInputShape {
    Flat(usize),
    Matrix { rows: usize, cols: usize },
}

impl GateInputShape {
    pub fn len(self) -> usize {
        match self {
            GateInputShape::Flat(n) => n,
            GateInputShape::Matrix { rows, cols } => rows * cols,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
struct Conv {
    /// `(CONV_KERNEL^d) x CONV_CHANNELS`, row-major.
    weight: ParamId,
    bias: ParamId,
    /// im2col gather indices, `positions x patch` row-major.
    patches: Vec<usize>,
    positions: usize,
    patch: usize,
}

#[derive(Debug, Clone)]
struct Head {
    conv: Option<Conv>,
    /// `N x features`.
    weight: ParamId,
    bias: ParamId,
    features: usize,
}

/// The two gate heads `f1` (clean logits) and `f2` (noise scale).
#[derive(Debug, Clone)]
pub struct GatingNetwork {
    variant: GateVariant,
    input: GateInputShape,
    n_spaces: usize,
    clean: Head,
    noise: Option<Head>,
}

fn conv_positions(len: usize) -> Option<usize> {
    (len >= CONV_KERNEL).then(|| (len - CONV_KERNEL) / CONV_STRIDE + 1)
}

impl GatingNetwork {
    /// Registers the gate parameters under `prefix` in `store`. Weights are
    /// drawn from `normal(0, init_std^2)`, biases start at zero.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        variant: GateVariant,
        input: GateInputShape,
        n_spaces: usize,
        with_noise: bool,
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n_spaces == 0 {
            return Err(contract("gating network needs at least one space"));
        }
        match (variant, input) {
            (GateVariant::MatrixConv2d, GateInputShape::Flat(_)) => {
                return Err(contract("matrix-conv2d gate needs a matrix input"))
            }
            (GateVariant::FlatLinear | GateVariant::FlatConv1d, GateInputShape::Matrix { .. }) => {
                return Err(contract(format!("{} gate needs a flat input", variant.name())))
            }
            _ => {}
        }
        let clean = Self::head(store, &format!("{prefix}.f1"), variant, input, n_spaces, init_std, rng)?;
        let noise = if with_noise {
            Some(Self::head(store, &format!("{prefix}.f2"), variant, input, n_spaces, init_std, rng)?)
        } else {
            None
        };
        Ok(Self {
            variant,
            input,
            n_spaces,
            clean,
            noise,
        })
    }

    /// Looks up the parameters of a network previously registered under `prefix`.
    pub fn attach(
        store: &ParamStore,
        prefix: &str,
        variant: GateVariant,
        input: GateInputShape,
        n_spaces: usize,
    ) -> Result<Self> {
        let clean = Self::attach_head(store, &format!("{prefix}.f1"), variant, input, n_spaces)?;
        let noise = if store.id(&format!("{prefix}.f2.weight")).is_some() {
            Some(Self::attach_head(store, &format!("{prefix}.f2"), variant, input, n_spaces)?)
        } else {
            None
        };
        Ok(Self {
            variant,
            input,
            n_spaces,
            clean,
            noise,
        })
    }

    fn conv_layout(variant: GateVariant, input: GateInputShape) -> Result<Option<(Vec<usize>, usize, usize)>> {
        match (variant, input) {
            (GateVariant::FlatLinear, _) => Ok(None),
            (GateVariant::FlatConv1d, GateInputShape::Flat(len)) => {
                let pos = conv_positions(len).ok_or_else(|| {
                    contract(format!("gate input of length {len} is shorter than the kernel"))
                })?;
                let mut idx = Vec::with_capacity(pos * CONV_KERNEL);
                for p in 0..pos {
                    idx.extend(p * CONV_STRIDE..p * CONV_STRIDE + CONV_KERNEL);
                }
                Ok(Some((idx, pos, CONV_KERNEL)))
            }
            (GateVariant::MatrixConv2d, GateInputShape::Matrix { rows, cols }) => {
                let (pr, pc) = match (conv_positions(rows), conv_positions(cols)) {
                    (Some(a), Some(b)) => (a, b),
                    _ => {
                        return Err(contract(format!(
                            "gate input {rows}x{cols} is smaller than the {CONV_KERNEL}x{CONV_KERNEL} kernel"
                        )))
                    }
                };
                let patch = CONV_KERNEL * CONV_KERNEL;
                let mut idx = Vec::with_capacity(pr * pc * patch);
                for i in 0..pr {
                    for j in 0..pc {
                        for di in 0..CONV_KERNEL {
                            for dj in 0..CONV_KERNEL {
                                idx.push((i * CONV_STRIDE + di) * cols + j * CONV_STRIDE + dj);
                            }
                        }
                    }
                }
                Ok(Some((idx, pr * pc, patch)))
            }
            _ => Err(contract("gate variant does not match its input shape")),
        }
    }

    fn head<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        variant: GateVariant,
        input: GateInputShape,
        n: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Head> {
        let normal = Normal::new(0.0, std).map_err(|e| contract(e.to_string()))?;
        let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| normal.sample(rng)).collect() };
        let (conv, features) = match Self::conv_layout(variant, input)? {
            None => (None, input.len()),
            Some((patches, positions, patch)) => {
                let weight = store.insert(
                    &format!("{prefix}.conv.weight"),
                    vec![patch, CONV_CHANNELS],
                    draw(patch * CONV_CHANNELS),
                    true,
                )?;
                let bias = store.insert(
                    &format!("{prefix}.conv.bias"),
                    vec![CONV_CHANNELS],
                    vec![0.0; CONV_CHANNELS],
                    true,
                )?;
                (
                    Some(Conv {
                        weight,
                        bias,
                        patches,
                        positions,
                        patch,
                    }),
                    positions * CONV_CHANNELS,
                )
            }
        };
        let weight = store.insert(
            &format!("{prefix}.weight"),
            vec![n, features],
            draw(n * features),
            true,
        )?;
        let bias = store.insert(&format!("{prefix}.bias"), vec![n], vec![0.0; n], true)?;
        Ok(Head {
            conv,
            weight,
            bias,
            features,
        })
    }

    fn attach_head(
        store: &ParamStore,
        prefix: &str,
        variant: GateVariant,
        input: GateInputShape,
        n: usize,
    ) -> Result<Head> {
        let (conv, features) = match Self::conv_layout(variant, input)? {
            None => (None, input.len()),
            Some((patches, positions, patch)) => (
                Some(Conv {
                    weight: store.expect_id(&format!("{prefix}.conv.weight"))?,
                    bias: store.expect_id(&format!("{prefix}.conv.bias"))?,
                    patches,
                    positions,
                    patch,
                }),
                positions * CONV_CHANNELS,
            ),
        };
        let weight = store.expect_id(&format!("{prefix}.weight"))?;
        if store.get(weight).data.len() != n * features {
            return Err(contract(format!(
                "gate weight `{prefix}.weight` has shape {:?}, expected [{n}, {features}]",
                store.get(weight).shape
            )));
        }
        Ok(Head {
            conv,
            weight,
            bias: store.expect_id(&format!("{prefix}.bias"))?,
            features,
        })
    }

    pub fn variant(&self) -> GateVariant {
        self.variant
    }

    pub fn input_shape(&self) -> GateInputShape {
        self.input
    }

    pub fn n_spaces(&self) -> usize {
        self.n_spaces
    }

    pub fn has_noise(&self) -> bool {
        self.noise.is_some()
    }

    fn apply_head<B: Bind>(b: &mut B, store: &ParamStore, head: &Head, x: &B::V) -> B::V {
        let features = match &head.conv {
            None => x.clone(),
            Some(conv) => {
                let cols = b.gather(x, &conv.patches);
                let w = b.bind(store, conv.weight);
                let maps = b.matmul(&cols, &w, conv.positions, conv.patch, CONV_CHANNELS);
                let bias = b.bind(store, conv.bias);
                let tiled_idx: Vec<usize> = (0..conv.positions * CONV_CHANNELS)
                    .map(|i| i % CONV_CHANNELS)
                    .collect();
                let tiled = b.gather(&bias, &tiled_idx);
                b.add(&maps, &tiled)
            }
        };
        let w = b.bind(store, head.weight);
        let y = b.matvec(&w, &features, self_rows(store, head), head.features);
        let bias = b.bind(store, head.bias);
        b.add(&y, &bias)
    }

    /// Clean logits `f1(x)`.
    pub fn clean_logits<B: Bind>(&self, b: &mut B, store: &ParamStore, x: &B::V) -> Result<B::V> {
        self.check_input(b.len(x))?;
        Ok(Self::apply_head(b, store, &self.clean, x))
    }

    /// Noise scale `softplus(f2(x))`, if the network has a noise head.
    pub fn noise_scale<B: Bind>(&self, b: &mut B, store: &ParamStore, x: &B::V) -> Result<Option<B::V>> {
        self.check_input(b.len(x))?;
        Ok(self.noise.as_ref().map(|h| {
            let raw = Self::apply_head(b, store, h, x);
            b.softplus(&raw)
        }))
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input.len() {
            return Err(contract(format!(
                "gate input has length {len}, network expects {}",
                self.input.len()
            )));
        }
        Ok(())
    }
}

fn self_rows(store: &ParamStore, head: &Head) -> usize {
    store.get(head.weight).shape[0]
}

/// Per-example gate outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub clean_logits: Vec<f64>,
    pub noisy_logits: Vec<f64>,
    /// Indices of the active spaces, ascending.
    pub active: Vec<usize>,
    /// Length-N gates; zero exactly outside `active`.
    pub gates: Vec<f64>,
}

impl GateDecision {
    /// Decision for fixed logits (no noise): top-K then masked softmax.
    pub fn from_logits(logits: &[f64], k: usize) -> Result<Self> {
        let active = top_k(logits, k)?;
        let gates = masked_softmax(logits, Some(&active));
        Ok(Self {
            clean_logits: logits.to_vec(),
            noisy_logits: logits.to_vec(),
            active,
            gates,
        })
    }

    /// One-line JSON record of the active set and gate values.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "active": self.active, "gates": self.gates })
    }
}

/// Gate decision plus the differentiable length-N gate vector.
#[derive(Debug, Clone)]
pub struct GateOutput<V> {
    pub decision: GateDecision,
    pub gates: V,
}

/// Indices of the `k` largest values, ascending. Ties at the cut go to the
/// lowest index.
pub fn top_k(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return Err(contract(format!(
            "K = {k} must lie in 1..={} (number of spaces)",
            values.len()
        )));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut active = order[..k].to_vec();
    active.sort_unstable();
    Ok(active)
}

/// Computes noisy top-K gates for one example. Noise is drawn only when
/// `noise_rng` is given and the network has a noise head.
pub fn noisy_topk_gates<B: Bind, R: Rng + ?Sized>(
    b: &mut B,
    net: &GatingNetwork,
    store: &ParamStore,
    x: &B::V,
    k: usize,
    noise_rng: Option<&mut R>,
) -> Result<GateOutput<B::V>> {
    if k == 0 || k > net.n_spaces {
        return Err(contract(format!(
            "K = {k} must lie in 1..={}",
            net.n_spaces
        )));
    }
    let clean = net.clean_logits(b, store, x)?;
    let logits = match noise_rng {
        Some(rng) if net.has_noise() => {
            let scale = net.noise_scale(b, store, x)?.unwrap();
            let eps: Vec<f64> = (0..net.n_spaces)
                .map(|_| StandardNormal.sample(rng))
                .collect();
            let eps = b.constant(eps);
            let noise = b.mul(&eps, &scale);
            b.add(&clean, &noise)
        }
        _ => clean.clone(),
    };
    let active = top_k(b.value(&logits), k)?;
    let gates = b.softmax(&logits, Some(&active));
    Ok(GateOutput {
        decision: GateDecision {
            clean_logits: b.value(&clean).to_vec(),
            noisy_logits: b.value(&logits).to_vec(),
            active,
            gates: b.value(&gates).to_vec(),
        },
        gates,
    })
}

/// Flat gate input: the participating entities' embedding rows, entity-major
/// and component-minor (each row already stores its components contiguously).
pub fn build_gate_input_flat<B: Backend>(b: &mut B, rows: &[B::V]) -> B::V {
    if rows.len() == 1 {
        return rows[0].clone();
    }
    b.concat(rows)
}

/// Matrix gate input: every component slice of every row becomes one matrix
/// row, giving `(rows * N) x dim`. Requires equal component dimensions.
pub fn build_gate_input_matrix<B: Backend>(
    b: &mut B,
    rows: &[B::V],
    dims: &[usize],
) -> Result<(B::V, GateInputShape)> {
    let dim = dims[0];
    if dims.iter().any(|&d| d != dim) {
        return Err(contract(
            "matrix gate input needs equal component dimensions",
        ));
    }
    let x = build_gate_input_flat(b, rows);
    Ok((
        x,
        GateInputShape::Matrix {
            rows: rows.len() * dims.len(),
            cols: dim,
        },
    ))
}

/// How component scores are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// `log sum_i g_i exp(s_i)` over the active spaces; without gate weights
    /// when `weighted` is false.
    Lse { weighted: bool },
    /// `sum_i s_i`, the plain product-space combination (requires K = N).
    Sum,
}

impl ScoreMode {
    pub const SWITCH: ScoreMode = ScoreMode::Lse { weighted: true };
}

/// Combines the scores of the active spaces. `scores` and `gates` hold the
/// active entries only, in the same order.
pub fn switch_score<B: Backend>(
    b: &mut B,
    scores: &B::V,
    gates: &B::V,
    mode: ScoreMode,
) -> Result<B::V> {
    match mode {
        ScoreMode::Sum => Ok(b.sum(scores)),
        ScoreMode::Lse { weighted } => {
            if weighted && b.value(gates).iter().all(|&g| g == 0.0) {
                return Err(contract("switch score with all gates zero"));
            }
            let shift = b.value(scores).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let shifted = b.shift(scores, -shift);
            let mut terms = b.exp(&shifted);
            if weighted {
                terms = b.mul(&terms, gates);
            }
            let total = b.sum(&terms);
            let log = b.log(&total);
            Ok(b.shift(&log, shift))
        }
    }
}

/// [`switch_score`] on plain length-N vectors whose inactive entries are 0.
pub fn switch_score_dense(scores: &[f64], gates: &[f64], mode: ScoreMode) -> Result<f64> {
    if scores.len() != gates.len() {
        return Err(contract("scores and gates differ in length"));
    }
    let mut b = crate::numerics::Eval;
    let (s, g) = match mode {
        ScoreMode::Sum => (scores.to_vec(), gates.to_vec()),
        ScoreMode::Lse { .. } => {
            let active: Vec<usize> = (0..gates.len()).filter(|&i| gates[i] > 0.0).collect();
            if active.is_empty() {
                return Err(contract("switch score with all gates zero"));
            }
            (
                active.iter().map(|&i| scores[i]).collect(),
                active.iter().map(|&i| gates[i]).collect(),
            )
        }
    };
    Ok(switch_score(&mut b, &s, &g, mode)?[0])
}

/// Load-balancing loss `w_aux * CV(importance)^2`, where importance is the
/// per-space sum of gates over the batch.
pub fn importance_loss<B: Backend>(b: &mut B, gates: &[B::V], w_aux: f64) -> Result<B::V> {
    if gates.is_empty() {
        return Err(contract("importance loss over an empty batch"));
    }
    let importance = b.add_all(gates);
    let n = b.len(&importance) as f64;
    let total = b.sum(&importance);
    let mean = b.scale(&total, 1.0 / n);
    if b.value(&mean)[0] <= 0.0 {
        return Err(contract("importance loss with zero mean importance"));
    }
    let centered = b.sub(&importance, &mean);
    let ss = b.sq_norm(&centered);
    let var = b.scale(&ss, 1.0 / n);
    let mean_sq = b.square(&mean);
    let cv2 = b.div(&var, &mean_sq);
    Ok(b.scale(&cv2, w_aux))
}

/// Counts of active sets over all `C(N, K)` combinations.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSetHistogram {
    counts: BTreeMap<Vec<usize>, u64>,
}

impl ActiveSetHistogram {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        if k == 0 || k > n {
            return Err(contract(format!("K = {k} must lie in 1..={n}")));
        }
        let mut counts = BTreeMap::new();
        let mut combo: Vec<usize> = (0..k).collect();
        loop {
            counts.insert(combo.clone(), 0);
            // Advance to the next combination in lexicographic order.
            let mut i = k;
            while i > 0 && combo[i - 1] == n - k + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            combo[i - 1] += 1;
            for j in i..k {
                combo[j] = combo[j - 1] + 1;
            }
        }
        Ok(Self { counts })
    }

    pub fn record(&mut self, active: &[usize]) -> Result<()> {
        match self.counts.get_mut(active) {
            Some(c) => {
                *c += 1;
                Ok(())
            }
            None => Err(contract(format!("active set {active:?} is not a valid combination"))),
        }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<usize>, &u64)> {
        self.counts.iter()
    }

    /// `active_set,count` rows; sets are written as indices joined by `|`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("active_set,count\n");
        for (set, count) in &self.counts {
            let label: Vec<String> = set.iter().map(|i| i.to_string()).collect();
            out.push_str(&format!("{},{}\n", label.join("|"), count));
        }
        out
    }
}
