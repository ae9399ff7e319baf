//! Acceptance suite. Runs every criterion in sequence and prints one
//! `PASS`/`FAIL` line each; exits non-zero if any fails.
//!
//! `cargo test -p switch-core --test acceptance -- 3 7` runs a subset.
//! Criterion 8 needs MovieLens 100K: `ML100K_DIR` or `data/ml-100k` under
//! the workspace root.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use switch_core::config::{RunConfig, Task};
use switch_core::data::{load_movielens, split_interactions, Triple, TripleStore};
use switch_core::embedding::{to_manifold, SwitchSpec};
use switch_core::error::Result;
use switch_core::gating::{
    importance_loss, noisy_topk_gates, switch_score, switch_score_dense, GateDecision, GateInputShape, GateVariant,
    GatingNetwork, ScoreMode,
};
use switch_core::kg::{rotate, transform, KgModel};
use switch_core::manifolds::{self, ops, ComponentSpace, SpaceKind};
use switch_core::metrics::{random_mrr, Split};
use switch_core::numerics::{grad_check, project, Backend, GradCheck, ParamId, ParamStore, Tape, Var};
use switch_core::product::{product_sq_dist, Signature};
use switch_core::rec::RecModel;
use switch_core::train::{eval_kg, eval_rec, time_sweep, train_kg, train_rec};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

type Criterion = (usize, &'static str, Duration, fn() -> Outcome);

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 9] = [
        (1, "gyrovector identities", Duration::from_secs(5), c1_identities),
        (2, "flat limit", Duration::from_secs(1), c2_flat_limit),
        (3, "gradient oracle", Duration::from_secs(60), c3_gradients),
        (4, "product-space equivalence", Duration::from_secs(5), c4_product_equivalence),
        (5, "gate contract", Duration::from_secs(10), c5_gate_contract),
        (6, "constant cost in N", Duration::from_secs(120), c6_constant_cost),
        (7, "synthetic tree KG", Duration::from_secs(300), c7_tree_kg),
        (8, "MovieLens 100K", Duration::from_secs(45 * 60), c8_movielens),
        (9, "determinism and checkpoints", Duration::from_secs(120), c9_determinism),
    ];
    let mut failed = 0;
    for (id, name, budget, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let out = run();
        let took = start.elapsed();
        let in_time = took <= budget;
        let pass = out.pass && in_time;
        if !pass {
            failed += 1;
        }
        let budget_note = if in_time { String::new() } else { format!(" [over budget {:.0?}]", budget) };
        println!(
            "{} criterion {id} ({name}): {} ({:.2?}){budget_note}",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- sampling

const CURVATURES: [f64; 4] = [-1.0, -0.5, 0.5, 1.0];

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn scaled(v: &[f64], k: f64) -> Vec<f64> {
    v.iter().map(|x| x * k).collect()
}

/// Uniform direction, radius uniform in `[0, r_max / sqrt|c|)`.
fn point(rng: &mut ChaCha8Rng, d: usize, c: f64, r_max: f64) -> Vec<f64> {
    let dir = normal(rng, d);
    let scale = if c == 0.0 { 1.0 } else { c.abs().sqrt() };
    let r = rng.random_range(0.0..r_max) / scale;
    scaled(&dir, r / norm(&dir))
}

/// Tangent vector at `x` with `sqrt|c| * lambda_x * |v| / 2` below `t_max`.
fn tangent(rng: &mut ChaCha8Rng, x: &[f64], c: f64, t_max: f64) -> Vec<f64> {
    let lambda = 2.0 / (1.0 + c * norm(x).powi(2));
    let dir = normal(rng, x.len());
    let t = rng.random_range(0.0..t_max);
    scaled(&dir, 2.0 * t / (c.abs().sqrt() * lambda * norm(&dir)))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- 1

fn c1_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_id = 0.0f64;
    let mut worst_metric = 0.0f64;
    let mut worst_trip = 0.0f64;
    let mut errors = 0;
    for &c in &CURVATURES {
        for _ in 0..1000 {
            let d = rng.random_range(2..=10);
            let x = point(&mut rng, d, c, 0.9);
            let y = point(&mut rng, d, c, 0.9);
            let z = point(&mut rng, d, c, 0.9);
            let zero = vec![0.0; d];
            let neg_x = scaled(&x, -1.0);
            let run = || -> Result<(f64, f64, f64)> {
                let id = max_abs_diff(&manifolds::mobius_add(&x, &zero, c)?, &x)
                    .max(max_abs_diff(&manifolds::mobius_add(&zero, &x, c)?, &x))
                    .max(norm(&manifolds::mobius_add(&neg_x, &x, c)?))
                    .max(norm(&manifolds::mobius_add(&x, &neg_x, c)?));

                let (dxy, dyx) = (manifolds::dist(&x, &y, c)?, manifolds::dist(&y, &x, c)?);
                let (dyz, dxz) = (manifolds::dist(&y, &z, c)?, manifolds::dist(&x, &z, c)?);
                let mut metric = (dxy - dyx).abs().max(manifolds::dist(&x, &x, c)?);
                if dxy < 0.0 || dxz < 0.0 {
                    metric = f64::INFINITY;
                }
                metric = metric.max(dxz - dxy - dyz);

                let mut rng = ChaCha8Rng::seed_from_u64(d as u64 ^ x[0].to_bits());
                let t_max = if c > 0.0 { 1.2 } else { 2.0 };
                let v = tangent(&mut rng, &x, c, t_max);
                let v0 = tangent(&mut rng, &zero, c, t_max);
                let trip = max_abs_diff(&manifolds::log_map(&x, &manifolds::exp_map(&x, &v, c)?, c)?, &v)
                    .max(max_abs_diff(&manifolds::exp_map(&x, &manifolds::log_map(&x, &y, c)?, c)?, &y))
                    .max(max_abs_diff(&manifolds::log_map0(&manifolds::exp_map0(&v0, c)?, c)?, &v0))
                    .max(max_abs_diff(&manifolds::exp_map0(&manifolds::log_map0(&y, c)?, c)?, &y));
                Ok((id, metric, trip))
            };
            match run() {
                Ok((a, b, t)) => {
                    worst_id = worst_id.max(a);
                    worst_metric = worst_metric.max(b);
                    worst_trip = worst_trip.max(t);
                }
                Err(_) => errors += 1,
            }
        }
    }
    let pass = errors == 0 && worst_id <= 1e-10 && worst_metric <= 1e-9 && worst_trip <= 1e-9;
    Outcome::new(
        pass,
        format!(
            "4000 cases, identity err {worst_id:.1e}, metric err {worst_metric:.1e}, round-trip err {worst_trip:.1e}, {errors} domain errors"
        ),
    )
}

// ---------------------------------------------------------------- 2

fn c2_flat_limit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut worst_near = 0.0f64;
    for i in 0..1000 {
        let d = rng.random_range(1..=10);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        let flat = 2.0 * norm(&x.iter().zip(&y).map(|(a, b)| a - b).collect::<Vec<_>>());
        match (manifolds::dist(&x, &y, sign * 1e-8), manifolds::dist(&x, &y, sign * 2e-7)) {
            (Ok(a), Ok(b)) => {
                worst = worst.max((a - flat).abs());
                worst_near = worst_near.max((b - flat).abs());
            }
            _ => worst = f64::INFINITY,
        }
    }
    Outcome::new(
        worst < 1e-5 && worst_near < 1e-5,
        format!("max |d - 2|x-y|| = {worst:.1e} at |c| = 1e-8, {worst_near:.1e} at |c| = 2e-7"),
    )
}

// ---------------------------------------------------------------- 3

const SEEDS: u64 = 100;
const FD_EPS: f64 = 1e-6;
const FD_TOL: f64 = 1e-4;

/// Curvature drawn from a hyperbolic, spherical or flat regime by seed.
fn regime(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    match seed % 3 {
        0 => -rng.random_range(0.2..1.5),
        1 => rng.random_range(0.2..1.5),
        _ => 0.0,
    }
}

/// Curvature as a variable when curved, as a constant when flat (the flat
/// branch is a separate formula).
fn curv(t: &mut Tape, v: &[Var], i: usize, c: f64) -> Var {
    if c == 0.0 {
        t.constant(vec![0.0])
    } else {
        v[i]
    }
}

struct OpReport {
    worst: f64,
    fails: usize,
    inconclusive: usize,
}

impl OpReport {
    fn new() -> Self {
        Self { worst: 0.0, fails: 0, inconclusive: 0 }
    }

    fn record(&mut self, r: GradCheck) {
        match r {
            GradCheck::Measured(e) => {
                self.worst = self.worst.max(e);
                if e >= FD_TOL {
                    self.fails += 1;
                }
            }
            GradCheck::Inconclusive => self.inconclusive += 1,
        }
    }

    fn ok(&self) -> bool {
        self.fails == 0 && self.inconclusive == 0
    }
}

/// Runs `check(seed, rng)` for every seed of one op.
fn per_seed(name: &str, report: &mut BTreeMap<String, OpReport>, mut check: impl FnMut(u64, &mut ChaCha8Rng) -> GradCheck) {
    let mut r = OpReport::new();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
        r.record(check(seed, &mut rng));
    }
    report.insert(name.to_string(), r);
}

/// Finite-difference check of a loss against stored parameters, on up to
/// `coords` coordinates with non-zero analytic gradient.
fn param_check<F>(store: &mut ParamStore, f: F, coords: usize, rng: &mut ChaCha8Rng) -> GradCheck
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Option<f64> {
        let mut t = Tape::new().with_finite_checks(true);
        let out = f(&mut t, store).ok()?;
        let v = t.value(&out)[0];
        (v.is_finite() && t.failure().is_none()).then_some(v)
    };
    let mut t = Tape::new().with_finite_checks(true);
    let Ok(out) = f(&mut t, store) else {
        return GradCheck::Inconclusive;
    };
    let f0 = t.value(&out)[0];
    let Ok(adj) = t.backward(out) else {
        return GradCheck::Inconclusive;
    };
    let grads = adj.param_grads();
    let mut candidates: Vec<(ParamId, usize, f64)> = Vec::new();
    for (id, _) in grads.iter() {
        for (j, g) in grads.dense(store, *id).into_iter().enumerate() {
            if g != 0.0 {
                candidates.push((*id, j, g));
            }
        }
    }
    if candidates.is_empty() {
        return GradCheck::Inconclusive;
    }
    let picked: Vec<_> = candidates.choose_multiple(rng, coords).copied().collect();
    let mut worst = 0.0f64;
    let mut measured = 0;
    for (id, j, a) in picked {
        let x = store.get(id).data[j];
        store.get_mut(id).data[j] = x + FD_EPS;
        let fp = eval(store);
        store.get_mut(id).data[j] = x - FD_EPS;
        let fm = eval(store);
        store.get_mut(id).data[j] = x;
        let (Some(fp), Some(fm)) = (fp, fm) else { continue };
        let numeric = (fp - fm) / (2.0 * FD_EPS);
        if ((fp - f0) - (f0 - fm)).abs() / FD_EPS > 1e-2 * numeric.abs().max(1.0) {
            continue;
        }
        measured += 1;
        worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
    }
    if measured == 0 {
        GradCheck::Inconclusive
    } else {
        GradCheck::Measured(worst)
    }
}

fn geometry_checks(report: &mut BTreeMap<String, OpReport>) {
    type Op = fn(&mut Tape, &[Var], f64) -> Result<Var>;
    // (name, number of point-like inputs, op). Inputs are x, y (or v), then c.
    let ops: [(&str, usize, Op); 8] = [
        ("mobius_add", 2, |t, v, c| {
            let k = curv(t, v, 2, c);
            ops::mobius_add(t, &v[0], &v[1], &k)
        }),
        ("dist", 2, |t, v, c| {
            let k = curv(t, v, 2, c);
            ops::dist(t, &v[0], &v[1], &k)
        }),
        ("sq_dist", 2, |t, v, c| {
            let k = curv(t, v, 2, c);
            ops::sq_dist(t, &v[0], &v[1], &k)
        }),
        ("conformal_factor", 1, |t, v, c| {
            let k = curv(t, v, 1, c);
            ops::conformal_factor(t, &v[0], &k)
        }),
        ("exp_map", 2, |t, v, c| {
            let k = curv(t, v, 2, c);
            ops::exp_map(t, &v[0], &v[1], &k)
        }),
        ("log_map", 2, |t, v, c| {
            let k = curv(t, v, 2, c);
            ops::log_map(t, &v[0], &v[1], &k)
        }),
        ("exp_map0", 1, |t, v, c| {
            let k = curv(t, v, 1, c);
            ops::exp_map0(t, &v[0], &k)
        }),
        ("log_map0", 1, |t, v, c| {
            let k = curv(t, v, 1, c);
            ops::log_map0(t, &v[0], &k)
        }),
    ];
    for (name, arity, op) in ops {
        per_seed(name, report, |seed, rng| {
            let c = regime(rng, seed);
            let d = rng.random_range(2..=6);
            let w = normal(rng, d);
            let tangent_second = name == "exp_map";
            let mut sample_rng = ChaCha8Rng::seed_from_u64(rng.random());
            grad_check(
                |t, v| {
                    let out = op(t, v, c)?;
                    Ok(if t.len(&out) == 1 { out } else { project(t, &out, &w) })
                },
                || {
                    let r = &mut sample_rng;
                    let cc = if c == 0.0 { 1.0 } else { c };
                    let x = point(r, d, cc, 0.8);
                    let mut inputs = vec![if name == "exp_map0" { tangent(r, &vec![0.0; d], cc, 1.0) } else { x.clone() }];
                    if arity == 2 {
                        inputs.push(if tangent_second { tangent(r, &x, cc, 1.0) } else { point(r, d, cc, 0.8) });
                    }
                    inputs.push(vec![c]);
                    inputs
                },
                FD_EPS,
            )
        });
    }

    per_seed("product_sq_dist", report, |seed, rng| {
        let n = rng.random_range(2..=4);
        let dims: Vec<usize> = (0..n).map(|_| rng.random_range(2..=4)).collect();
        let cs: Vec<f64> = (0..n).map(|i| regime(rng, seed + i as u64)).collect();
        let total: usize = dims.iter().sum();
        let mut sample_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let (dims2, cs2) = (dims.clone(), cs.clone());
        grad_check(
            move |t, v| {
                let mut parts = Vec::new();
                let mut off = 0;
                for (i, (&d, &c)) in dims2.iter().zip(&cs2).enumerate() {
                    let x = t.slice(&v[0], off, d);
                    let y = t.slice(&v[1], off, d);
                    let c = if c == 0.0 { t.constant(vec![0.0]) } else { t.slice(&v[2], i, 1) };
                    parts.push(ops::sq_dist(t, &x, &y, &c)?);
                    off += d;
                }
                Ok(t.add_all(&parts))
            },
            || {
                let mut x = Vec::with_capacity(total);
                let mut y = Vec::with_capacity(total);
                for (&d, &c) in dims.iter().zip(&cs) {
                    let cc = if c == 0.0 { 1.0 } else { c };
                    x.extend(point(&mut sample_rng, d, cc, 0.8));
                    y.extend(point(&mut sample_rng, d, cc, 0.8));
                }
                vec![x, y, cs.clone()]
            },
            FD_EPS,
        )
    });

    per_seed("rotate", report, |_, rng| {
        let d = 2 * rng.random_range(1..=4);
        let w = normal(rng, d);
        let mut sample_rng = ChaCha8Rng::seed_from_u64(rng.random());
        grad_check(
            |t, v| {
                let r = rotate(t, &v[0], &v[1])?;
                Ok(project(t, &r, &w))
            },
            || vec![normal(&mut sample_rng, d), normal(&mut sample_rng, d)],
            FD_EPS,
        )
    });

    per_seed("to_manifold", report, |seed, rng| {
        let c = regime(rng, seed);
        let d = rng.random_range(2..=6);
        let w = normal(rng, d);
        let mut sample_rng = ChaCha8Rng::seed_from_u64(rng.random());
        grad_check(
            |t, v| {
                let k = curv(t, v, 1, c);
                let y = to_manifold(t, &v[0], &k)?;
                Ok(project(t, &y, &w))
            },
            || vec![scaled(&normal(&mut sample_rng, d), 0.3), vec![c]],
            FD_EPS,
        )
    });

    per_seed("kg_transform", report, |seed, rng| {
        let c = regime(rng, seed);
        let d = 2 * rng.random_range(1..=3);
        let w = normal(rng, d);
        let mut sample_rng = ChaCha8Rng::seed_from_u64(rng.random());
        grad_check(
            |t, v| {
                let k = curv(t, v, 4, c);
                let q = transform(t, &v[0], &v[1], &v[2], &v[3], &k)?;
                Ok(project(t, &q, &w))
            },
            || {
                let r = &mut sample_rng;
                vec![
                    scaled(&normal(r, d), 0.3),
                    scaled(&normal(r, d), 0.3),
                    scaled(&normal(r, d), 0.3),
                    normal(r, d),
                    vec![c],
                ]
            },
            FD_EPS,
        )
    });
}

fn gating_checks(report: &mut BTreeMap<String, OpReport>) {
    for (variant, input) in [
        (GateVariant::FlatLinear, GateInputShape::Flat(12)),
        (GateVariant::FlatConv1d, GateInputShape::Flat(20)),
        (GateVariant::MatrixConv2d, GateInputShape::Matrix { rows: 6, cols: 8 }),
    ] {
        per_seed(&format!("noisy_topk_gates/{}", variant.name()), report, |seed, rng| {
            let n = rng.random_range(3..=6);
            let k = rng.random_range(1..=n);
            let mut store = ParamStore::new();
            let net = GatingNetwork::new(&mut store, "g", variant, input, n, true, 0.5, rng).unwrap();
            let w = normal(rng, n);
            let mut sample_rng = ChaCha8Rng::seed_from_u64(rng.random());
            grad_check(
                |t, v| {
                    let mut noise = ChaCha8Rng::seed_from_u64(seed);
                    let out = noisy_topk_gates(t, &net, &store, &v[0], k, Some(&mut noise))?;
                    Ok(project(t, &out.gates, &w))
                },
                || vec![normal(&mut sample_rng, input.len())],
                FD_EPS,
            )
        });
        // K >= 2: with a single active space the gate is the constant 1.
        per_seed(&format!("gate_params/{}", variant.name()), report, |seed, rng| {
            let n = rng.random_range(3..=6);
            let k = rng.random_range(2..=n);
            let mut store = ParamStore::new();
            let net = GatingNetwork::new(&mut store, "g", variant, input, n, true, 0.5, rng).unwrap();
            let w = normal(rng, n);
            let x = normal(rng, input.len());
            param_check(
                &mut store,
                |t, s| {
                    let mut noise = ChaCha8Rng::seed_from_u64(seed);
                    let xv = t.constant(x.clone());
                    let out = noisy_topk_gates(t, &net, s, &xv, k, Some(&mut noise))?;
                    Ok(project(t, &out.gates, &w))
                },
                16,
                rng,
            )
        });
    }

    for weighted in [true, false] {
        per_seed(&format!("switch_score/lse weighted={weighted}"), report, |_, rng| {
            let k = rng.random_range(1..=5);
            let mut sample_rng = ChaCha8Rng::seed_from_u64(rng.random());
            grad_check(
                |t, v| {
                    let g = t.softmax(&v[1], None);
                    switch_score(t, &v[0], &g, ScoreMode::Lse { weighted })
                },
                || vec![scaled(&normal(&mut sample_rng, k), 3.0), normal(&mut sample_rng, k)],
                FD_EPS,
            )
        });
    }
    per_seed("switch_score/sum", report, |_, rng| {
        let k = rng.random_range(1..=5);
        let mut sample_rng = ChaCha8Rng::seed_from_u64(rng.random());
        grad_check(
            |t, v| {
                let g = t.constant(vec![1.0; k]);
                switch_score(t, &v[0], &g, ScoreMode::Sum)
            },
            || vec![normal(&mut sample_rng, k)],
            FD_EPS,
        )
    });

    per_seed("importance_loss", report, |_, rng| {
        let n = rng.random_range(2..=6);
        let batch = rng.random_range(2..=6);
        let mut sample_rng = ChaCha8Rng::seed_from_u64(rng.random());
        grad_check(
            |t, v| {
                let gates: Vec<Var> = v.iter().map(|x| t.softmax(x, None)).collect();
                importance_loss(t, &gates, 0.1)
            },
            || (0..batch).map(|_| normal(&mut sample_rng, n)).collect(),
            FD_EPS,
        )
    });
}

fn model_checks(report: &mut BTreeMap<String, OpReport>) {
    per_seed("kg_loss/params", report, |seed, rng| {
        let mut spec = SwitchSpec::new(Signature::parse("P6,D6,E6").unwrap(), 2, GateVariant::MatrixConv2d);
        spec.trainable_curvature = true;
        spec.embed_std = 0.3;
        spec.gate_std = 0.3;
        let mut store = ParamStore::new();
        let model = KgModel::new(&mut store, spec, 8, 2, rng).unwrap();
        let batch: Vec<(Triple, Vec<Triple>)> = (0..2)
            .map(|_| {
                let (h, r) = (rng.random_range(0..8), rng.random_range(0..4));
                let pos = Triple::new(h, r, rng.random_range(0..8));
                let negs = (0..3).map(|_| Triple::new(h, r, rng.random_range(0..8))).collect();
                (pos, negs)
            })
            .collect();
        param_check(
            &mut store,
            |t, s| {
                let mut noise = ChaCha8Rng::seed_from_u64(seed);
                Ok(model.loss(t, s, &batch, 0.1, &mut noise)?.0)
            },
            24,
            rng,
        )
    });
    per_seed("rec_loss/params", report, |seed, rng| {
        let mut spec = SwitchSpec::new(Signature::parse("P4,D4,E4").unwrap(), 2, GateVariant::FlatLinear);
        spec.trainable_curvature = true;
        spec.embed_std = 0.3;
        spec.gate_std = 0.3;
        let mut store = ParamStore::new();
        let model = RecModel::new(&mut store, spec, 5, 9, rng).unwrap();
        let batch: Vec<(usize, usize, usize)> = (0..3)
            .map(|_| (rng.random_range(0..5), rng.random_range(0..9), rng.random_range(0..9)))
            .collect();
        param_check(
            &mut store,
            |t, s| {
                let mut noise = ChaCha8Rng::seed_from_u64(seed);
                Ok(model.loss(t, s, &batch, 2.0, 0.05, 0.1, &mut noise)?.0)
            },
            24,
            rng,
        )
    });
}

fn c3_gradients() -> Outcome {
    let mut report = BTreeMap::new();
    geometry_checks(&mut report);
    gating_checks(&mut report);
    model_checks(&mut report);
    let bad: Vec<String> = report
        .iter()
        .filter(|(_, r)| !r.ok())
        .map(|(n, r)| format!("{n} ({} over tol, {} inconclusive, worst {:.1e})", r.fails, r.inconclusive, r.worst))
        .collect();
    let worst = report.values().map(|r| r.worst).fold(0.0, f64::max);
    if bad.is_empty() {
        Outcome::new(true, format!("{} ops x {SEEDS} seeds, worst relative error {worst:.1e}", report.len()))
    } else {
        Outcome::new(false, format!("failing ops: {}", bad.join("; ")))
    }
}

// ---------------------------------------------------------------- 4

fn random_signature(rng: &mut ChaCha8Rng) -> Signature {
    let n = rng.random_range(1..=5);
    let comps = (0..n)
        .map(|_| {
            let d = rng.random_range(1..=8);
            match rng.random_range(0..3) {
                0 => ComponentSpace::new(SpaceKind::Euclidean, d, 0.0),
                1 => ComponentSpace::new(SpaceKind::Poincare, d, -rng.random_range(0.1..2.0)),
                _ => ComponentSpace::new(SpaceKind::Sphere, d, rng.random_range(0.1..2.0)),
            }
            .unwrap()
        })
        .collect();
    Signature::new(comps).unwrap()
}

fn product_point(rng: &mut ChaCha8Rng, sig: &Signature) -> Vec<f64> {
    sig.components()
        .iter()
        .flat_map(|c| {
            let k = if c.curvature() == 0.0 { 1.0 } else { c.curvature() };
            point(rng, c.dim, k, 0.9)
        })
        .collect()
}

fn c4_product_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut kinds = HashSet::new();
    for _ in 0..1000 {
        let sig = random_signature(&mut rng);
        let (xr, yr) = (product_point(&mut rng, &sig), product_point(&mut rng, &sig));
        let x = sig.split_point(&xr).unwrap();
        let y = sig.split_point(&yr).unwrap();
        let reference = product_sq_dist(&x, &y).unwrap();
        let scores: Vec<f64> = x
            .parts()
            .iter()
            .zip(y.parts())
            .map(|(a, b)| manifolds::sq_dist(a.coords(), b.coords(), a.space().curvature()).unwrap())
            .collect();
        let n = sig.len();
        let gates = vec![1.0 / n as f64; n];
        let s = switch_score_dense(&scores, &gates, ScoreMode::Sum).unwrap();
        worst = worst.max((s - reference).abs());
        kinds.insert(sig.components().iter().map(|c| c.kind.letter()).collect::<String>());
    }
    Outcome::new(
        worst <= 1e-9,
        format!("1000 points over {} distinct signatures, max diff {worst:.1e}", kinds.len()),
    )
}

// ---------------------------------------------------------------- 5

fn zero_gate_weights(store: &mut ParamStore, prefix: &str) {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix) && p.name.ends_with("weight"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        store.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Tracks which component slices of which rows an active space touched.
#[derive(Default)]
struct Touched(HashSet<(ParamId, usize, usize)>);

impl Touched {
    fn mark(&mut self, id: ParamId, row: usize, comps: &[usize]) {
        for &c in comps {
            self.0.insert((id, row, c));
        }
    }
}

/// Counts nonzero gradient entries on (row, component) slices not in `touched`
/// for the listed per-component tables, and on curvature rows of inactive spaces.
fn stray_gradient(
    grads: &switch_core::numerics::Gradients,
    store: &ParamStore,
    sig: &Signature,
    tables: &[ParamId],
    touched: &Touched,
) -> (usize, usize) {
    let mut stray = 0;
    let mut active_nonzero = 0;
    for &id in tables {
        let g = grads.dense(store, id);
        let p = store.get(id);
        for row in 0..p.rows() {
            for comp in 0..sig.len() {
                let r = sig.range(comp);
                let nonzero = g[row * p.row_len() + r.start..row * p.row_len() + r.end].iter().any(|&x| x != 0.0);
                if touched.0.contains(&(id, row, comp)) {
                    active_nonzero += usize::from(nonzero);
                } else if nonzero {
                    stray += 1;
                }
            }
        }
    }
    (stray, active_nonzero)
}

fn curvature_stray(grads: &switch_core::numerics::Gradients, store: &ParamStore, prefix: &str, n: usize, touched: &HashSet<(usize, usize)>) -> usize {
    let mut stray = 0;
    for comp in 0..n {
        // Flat spaces carry no curvature parameter.
        let Some(id) = store.id(&format!("{prefix}.{comp}")) else { continue };
        let g = grads.dense(store, id);
        for (row, &x) in g.iter().enumerate() {
            if x != 0.0 && !touched.contains(&(comp, row)) {
                stray += 1;
            }
        }
    }
    stray
}

fn c5_gate_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut problems = Vec::new();

    // Exactly min(K, N) positive gates summing to one.
    let mut bad_gates = 0;
    for trial in 0..3000 {
        let variant = [GateVariant::FlatLinear, GateVariant::FlatConv1d, GateVariant::MatrixConv2d][trial % 3];
        let input = match variant {
            GateVariant::MatrixConv2d => GateInputShape::Matrix { rows: 9, cols: 6 },
            _ => GateInputShape::Flat(16),
        };
        let n = rng.random_range(1..=8);
        let k = rng.random_range(1..=n);
        let mut store = ParamStore::new();
        let net = GatingNetwork::new(&mut store, "g", variant, input, n, true, 1.0, &mut rng).unwrap();
        let x = normal(&mut rng, input.len());
        let mut b = switch_core::numerics::Eval;
        let noise = if trial % 2 == 0 { Some(&mut rng) } else { None };
        let out = noisy_topk_gates(&mut b, &net, &store, &x, k, noise).unwrap();
        let g = &out.decision.gates;
        let positive = g.iter().filter(|&&v| v > 0.0).count();
        let sum: f64 = g.iter().sum();
        if positive != k.min(n) || (sum - 1.0).abs() > 1e-9 || out.gates != *g {
            bad_gates += 1;
        }
    }
    if bad_gates > 0 {
        problems.push(format!("{bad_gates} gate vectors break the contract"));
    }

    let d = GateDecision::from_logits(&[3.0, 2.0, -1.0, 0.5], 2).unwrap();
    let example_err = (d.gates[0] - 0.731_058_6).abs().max((d.gates[1] - 0.268_941_4).abs());
    if example_err > 1e-6 || d.gates[2] != 0.0 || d.gates[3] != 0.0 {
        problems.push(format!("softmax([3, 2]) example off by {example_err:.1e}"));
    }

    // Zero gradient to inactive spaces, KG head. Pass A keeps random gate
    // weights and checks the component-exclusive curvature rows; pass B zeroes
    // the gate weights so the gate path carries no gradient and checks every
    // per-component slice.
    let mut kg_batches = 0;
    let mut kg_stray = 0;
    let mut kg_active = 0;
    for pass in 0..2 {
        for _ in 0..50 {
            let mut spec = SwitchSpec::new(Signature::parse("P6,D6,E6,P6,E6").unwrap(), 2, GateVariant::MatrixConv2d);
            spec.trainable_curvature = true;
            spec.embed_std = 0.3;
            spec.gate_std = 0.5;
            let mut store = ParamStore::new();
            let model = KgModel::new(&mut store, spec.clone(), 12, 2, &mut rng).unwrap();
            if pass == 1 {
                zero_gate_weights(&mut store, "kg.gate");
            }
            let batch: Vec<(Triple, Vec<Triple>)> = (0..4)
                .map(|_| {
                    let (h, r) = (rng.random_range(0..12), rng.random_range(0..4));
                    let pos = Triple::new(h, r, rng.random_range(0..12));
                    (pos, (0..5).map(|_| Triple::new(h, r, rng.random_range(0..12))).collect())
                })
                .collect();
            let mut t = Tape::new();
            let (loss, decisions) = model.loss(&mut t, &store, &batch, 0.1, &mut rng).unwrap();
            let grads = t.backward(loss).unwrap().param_grads();
            let mut curv_touched = HashSet::new();
            let mut touched = Touched::default();
            let id = |n: &str| store.expect_id(n).unwrap();
            for ((pos, negs), dec) in batch.iter().zip(&decisions) {
                for &c in &dec.active {
                    curv_touched.insert((c, pos.relation));
                }
                touched.mark(id("kg.entity"), pos.head, &dec.active);
                for tail in std::iter::once(pos.tail).chain(negs.iter().map(|n| n.tail)) {
                    touched.mark(id("kg.entity"), tail, &dec.active);
                }
                for table in ["kg.rel.alpha", "kg.rel.beta", "kg.rel.gamma"] {
                    touched.mark(id(table), pos.relation, &dec.active);
                }
            }
            kg_stray += curvature_stray(&grads, &store, "kg.curv", spec.n(), &curv_touched);
            if pass == 1 {
                let tables = [id("kg.entity"), id("kg.rel.alpha"), id("kg.rel.beta"), id("kg.rel.gamma")];
                let (stray, active) = stray_gradient(&grads, &store, &spec.signature, &tables, &touched);
                kg_stray += stray;
                kg_active += active;
            }
            kg_batches += 1;
        }
    }

    // Same for the recommendation head, gate weights zeroed. The L2 term acts
    // on whole rows by design, so it is switched off here.
    let mut rec_stray = 0;
    let mut rec_active = 0;
    for _ in 0..100 {
        let mut spec = SwitchSpec::new(Signature::parse("E4,P4,D4,E4,P4").unwrap(), 2, GateVariant::FlatLinear);
        spec.trainable_curvature = true;
        spec.embed_std = 0.3;
        spec.gate_std = 0.5;
        let mut store = ParamStore::new();
        let model = RecModel::new(&mut store, spec.clone(), 6, 10, &mut rng).unwrap();
        zero_gate_weights(&mut store, "rec.gate");
        let batch: Vec<(usize, usize, usize)> = (0..4)
            .map(|_| (rng.random_range(0..6), rng.random_range(0..10), rng.random_range(0..10)))
            .collect();
        let mut t = Tape::new();
        let (loss, decisions) = model.loss(&mut t, &store, &batch, 5.0, 0.0, 0.1, &mut rng).unwrap();
        let grads = t.backward(loss).unwrap().param_grads();
        let (user, item) = (store.expect_id("rec.user").unwrap(), store.expect_id("rec.item").unwrap());
        let mut touched = Touched::default();
        let mut curv_touched = HashSet::new();
        for (&(u, i, j), pair) in batch.iter().zip(decisions.chunks(2)) {
            for (dec, it) in pair.iter().zip([i, j]) {
                touched.mark(user, u, &dec.active);
                touched.mark(item, it, &dec.active);
                for &c in &dec.active {
                    curv_touched.insert((c, 0));
                }
            }
        }
        let (stray, active) = stray_gradient(&grads, &store, &spec.signature, &[user, item], &touched);
        rec_stray += stray + curvature_stray(&grads, &store, "rec.curv", spec.n(), &curv_touched);
        rec_active += active;
    }

    if kg_stray > 0 || rec_stray > 0 {
        problems.push(format!("non-zero gradient on inactive spaces: kg {kg_stray}, rec {rec_stray}"));
    }
    if kg_active == 0 || rec_active == 0 {
        problems.push("active spaces received no gradient".into());
    }
    let summary = format!(
        "3000 gate vectors, softmax example err {example_err:.1e}, {kg_batches} kg + 100 rec batches with zero inactive gradient"
    );
    if problems.is_empty() {
        Outcome::new(true, summary)
    } else {
        Outcome::new(false, problems.join("; "))
    }
}

// ---------------------------------------------------------------- 6

fn c6_constant_cost() -> Outcome {
    let rows = match time_sweep(&[5, 10, 20], 2, 32, 4, 2000, 30, 6) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("sweep failed: {e}")),
    };
    let t5 = rows[0].secs_per_example;
    let t20 = rows[2].secs_per_example;
    let growth = t20 / t5 - 1.0;
    let evals_ok = rows.iter().all(|r| r.evals_per_example == 2.0);
    let per: Vec<String> = rows.iter().map(|r| format!("N={} {:.0} ns", r.n, r.secs_per_example * 1e9)).collect();
    Outcome::new(
        growth < 0.2 && evals_ok,
        format!("{}; growth N=5 -> 20 {:+.1}%, {} component evals per example", per.join(", "), growth * 100.0, rows[2].evals_per_example),
    )
}

// ---------------------------------------------------------------- 7

/// Balanced binary tree on 63 nodes, edges `child child_of parent`.
fn tree_store() -> TripleStore {
    let edges: Vec<Triple> = (1..63).map(|i| Triple::new(i, 0, (i - 1) / 2)).collect();
    TripleStore::from_triples(63, 1, edges, vec![], vec![])
}

fn c7_tree_kg() -> Outcome {
    let data = tree_store();
    let mut cfg = RunConfig::defaults(Task::Kg, Signature::parse("P16,P16,E16").unwrap());
    cfg.k = 1;
    cfg.epochs = 200;
    cfg.batch_size = 16;
    cfg.lr = 0.01;
    let run = match train_kg(&cfg, &data, 7) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("training failed: {e}")),
    };
    let m = eval_kg(&run.model, &run.store, &data, &data.train).unwrap();
    let oracle = random_mrr(63);
    Outcome::new(
        m.mrr >= 0.4,
        format!("filtered MRR {:.3} (hits@1 {:.3}, hits@10 {:.3}) vs random {oracle:.3}", m.mrr, m.hr1, m.hr10),
    )
}

// ---------------------------------------------------------------- 8

fn ml100k_path() -> Option<PathBuf> {
    let candidates = [
        std::env::var_os("ML100K_DIR").map(PathBuf::from),
        Some(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/ml-100k")),
    ];
    candidates.into_iter().flatten().find(|p| p.join("u.data").exists() || p.is_file())
}

fn rec_cfg(signature: &str, k: usize, mode: ScoreMode) -> RunConfig {
    let mut cfg = RunConfig::defaults(Task::Rec, Signature::parse(signature).unwrap());
    cfg.k = k;
    cfg.score_mode = mode;
    cfg.lr = 0.001;
    cfg.epochs = 60;
    cfg.eval_every = 3;
    cfg
}

fn c8_movielens() -> Outcome {
    let Some(path) = ml100k_path() else {
        return Outcome::new(false, "MovieLens 100K not found (set ML100K_DIR)");
    };
    let raw = load_movielens(&path).unwrap();
    let data = split_interactions(&raw, &mut ChaCha8Rng::seed_from_u64(100));
    let map_of = |cfg: &RunConfig, seed: u64| -> Result<f64> {
        let run = train_rec(cfg, &data, seed)?;
        Ok(eval_rec(&run.model, &run.store, &data, Split::Test)?.map)
    };
    let cml = match map_of(&rec_cfg("E100", 1, ScoreMode::SWITCH), 1) {
        Ok(m) => m,
        Err(e) => return Outcome::new(false, format!("CML run failed: {e}")),
    };
    let mut switch = Vec::new();
    let mut product = Vec::new();
    for seed in 1..=3 {
        match (
            map_of(&rec_cfg("E20,E20,E20,E20,E20", 4, ScoreMode::SWITCH), seed),
            map_of(&rec_cfg("E20,E20,E20,E20,E20", 5, ScoreMode::Sum), seed),
        ) {
            (Ok(s), Ok(p)) => {
                switch.push(s);
                product.push(p);
            }
            (Err(e), _) | (_, Err(e)) => return Outcome::new(false, format!("seed {seed} failed: {e}")),
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ms, mp) = (mean(&switch), mean(&product));
    Outcome::new(
        (0.15..=0.24).contains(&cml) && ms >= mp,
        format!("CML E100 MAP {cml:.4}; switch (E20)^5 K=4 MAP {ms:.4} vs product {mp:.4} (3 seeds)"),
    )
}

// ---------------------------------------------------------------- 9

fn c9_determinism() -> Outcome {
    let tree = tree_store();
    let mut kg = RunConfig::defaults(Task::Kg, Signature::parse("P8,D8,E8").unwrap());
    kg.k = 2;
    kg.epochs = 5;
    kg.batch_size = 16;
    kg.n_neg = 10;
    let a = train_kg(&kg, &tree, 11).unwrap();
    let b = train_kg(&kg, &tree, 11).unwrap();
    let bits = |l: Vec<f64>| l.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    let kg_same = bits(a.log.losses()) == bits(b.log.losses()) && a.store.same_values(&b.store);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kg.ckpt");
    a.store.save(&path).unwrap();
    let loaded = ParamStore::load(&path).unwrap();
    let model = KgModel::attach(&loaded, kg.switch_spec()).unwrap();
    let before = eval_kg(&a.model, &a.store, &tree, &tree.train).unwrap();
    let after = eval_kg(&model, &loaded, &tree, &tree.train).unwrap();
    let kg_ckpt = before == after;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pairs: Vec<(String, String)> = (0..40)
        .flat_map(|u| (0..8).map(move |j| (format!("u{u}"), format!("i{}", (u * 7 + j * 3) % 60))))
        .collect();
    let raw = switch_core::data::Interactions::from_pairs(pairs.iter().map(|(u, i)| (u.as_str(), i.as_str())));
    let data = split_interactions(&raw, &mut rng);
    let mut rc = RunConfig::defaults(Task::Rec, Signature::parse("E4,P4,D4").unwrap());
    rc.k = 2;
    rc.epochs = 5;
    rc.batch_size = 32;
    let ra = train_rec(&rc, &data, 3).unwrap();
    let rb = train_rec(&rc, &data, 3).unwrap();
    let rec_same = bits(ra.log.losses()) == bits(rb.log.losses());
    let rpath = dir.path().join("rec.ckpt");
    ra.store.save(&rpath).unwrap();
    let rloaded = ParamStore::load(&rpath).unwrap();
    let rmodel = RecModel::attach(&rloaded, rc.switch_spec()).unwrap();
    let rec_ckpt =
        eval_rec(&ra.model, &ra.store, &data, Split::Test).unwrap() == eval_rec(&rmodel, &rloaded, &data, Split::Test).unwrap();

    Outcome::new(
        kg_same && kg_ckpt && rec_same && rec_ckpt,
        format!(
            "loss trajectories identical: kg {kg_same}, rec {rec_same}; checkpoint metrics identical: kg {kg_ckpt}, rec {rec_ckpt}"
        ),
    )
}
