//! Run configuration in a flat `key = value` text format. Lines starting with
//! `#` are comments. Every key is also accepted as a command-line flag.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::embedding::SwitchSpec;
use crate::error::{contract, Error, Result};
use crate::gating::{GateVariant, ScoreMode, DEFAULT_W_AUX};
use crate::product::Signature;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Kg,
    Rec,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Kg => "kg",
            Task::Rec => "rec",
        }
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kg" => Ok(Task::Kg),
            "rec" => Ok(Task::Rec),
            _ => Err(contract(format!("unknown task `{s}` (expected kg or rec)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub signature: Signature,
    pub k: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub n_neg: usize,
    pub margin: f64,
    pub reg: f64,
    pub w_aux: f64,
    pub gate: GateVariant,
    /// `lse` (switch) or `sum` (plain product space).
    pub score_mode: ScoreMode,
    pub noise: bool,
    pub trainable_curvature: bool,
    pub seed: u64,
    /// Extra seeds to average over; empty means just `seed`.
    pub seeds: Vec<u64>,
    pub patience: usize,
    /// Validate every this many epochs.
    pub eval_every: usize,
    pub embed_std: f64,
    pub gate_std: f64,
    pub data: PathBuf,
    pub output: PathBuf,
}

pub const KEYS: &[&str] = &[
    "task",
    "signature",
    "k",
    "lr",
    "epochs",
    "batch_size",
    "n_neg",
    "margin",
    "reg",
    "w_aux",
    "gate",
    "score_mode",
    "gate_weighting",
    "noise",
    "trainable_curvature",
    "seed",
    "seeds",
    "patience",
    "eval_every",
    "embed_std",
    "gate_std",
    "data",
    "output",
];

impl RunConfig {
    /// Defaults for `task`: K = N, learning rate 0.01, batch 512 (kg) or
    /// 1024 (rec), 50 negatives, margin 0.5.
    pub fn defaults(task: Task, signature: Signature) -> Self {
        let k = signature.len();
        Self {
            task,
            k,
            signature,
            lr: 0.01,
            epochs: 100,
            batch_size: if task == Task::Kg { 512 } else { 1024 },
            n_neg: 50,
            margin: 0.5,
            reg: 0.01,
            w_aux: DEFAULT_W_AUX,
            gate: if task == Task::Kg {
                GateVariant::MatrixConv2d
            } else {
                GateVariant::FlatLinear
            },
            score_mode: ScoreMode::SWITCH,
            noise: true,
            trainable_curvature: task == Task::Kg,
            seed: 0,
            seeds: Vec::new(),
            patience: 10,
            eval_every: 1,
            embed_std: 0.05,
            gate_std: 0.01,
            data: PathBuf::new(),
            output: PathBuf::from("run"),
        }
    }

    /// Builds a config from `key=value` pairs applied over the task defaults.
    /// `task` and `signature` are required.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let task: Task = get("task").ok_or_else(|| contract("config is missing `task`"))?.parse()?;
        let sig = Signature::parse(get("signature").ok_or_else(|| contract("config is missing `signature`"))?)?;
        let mut cfg = Self::defaults(task, sig);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                path: PathBuf::from("<config>"),
                line: i + 1,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| contract(format!("`{key}`: cannot parse `{v}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(contract(format!("`{key}`: expected true or false, got `{v}`"))),
            }
        }
        match key {
            "task" => self.task = value.parse()?,
            "signature" => self.signature = Signature::parse(value)?,
            "k" => self.k = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "n_neg" => self.n_neg = num(key, value)?,
            "margin" => self.margin = num(key, value)?,
            "reg" => self.reg = num(key, value)?,
            "w_aux" => self.w_aux = num(key, value)?,
            "gate" => {
                self.gate = GateVariant::parse(value)
                    .ok_or_else(|| contract(format!("unknown gate variant `{value}`")))?
            }
            "score_mode" => {
                let weighted = matches!(self.score_mode, ScoreMode::Lse { weighted: true });
                self.score_mode = match value {
                    "lse" => ScoreMode::Lse { weighted },
                    "sum" => ScoreMode::Sum,
                    _ => return Err(contract(format!("unknown score mode `{value}` (lse or sum)"))),
                }
            }
            "gate_weighting" => {
                let on = flag(key, value)?;
                if let ScoreMode::Lse { weighted } = &mut self.score_mode {
                    *weighted = on;
                }
            }
            "noise" => self.noise = flag(key, value)?,
            "trainable_curvature" => self.trainable_curvature = flag(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            "patience" => self.patience = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "embed_std" => self.embed_std = num(key, value)?,
            "gate_std" => self.gate_std = num(key, value)?,
            "data" => self.data = PathBuf::from(value),
            "output" => self.output = PathBuf::from(value),
            _ => return Err(contract(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.signature.len();
        if self.k == 0 || self.k > n {
            return Err(contract(format!("k = {} must lie in 1..={n}", self.k)));
        }
        if self.score_mode == ScoreMode::Sum && self.k != n {
            return Err(contract("score_mode = sum requires k = N"));
        }
        for (name, v) in [("lr", self.lr), ("margin", self.margin), ("embed_std", self.embed_std), ("gate_std", self.gate_std)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(contract(format!("`{name}` must be positive, got {v}")));
            }
        }
        for (name, v) in [("reg", self.reg), ("w_aux", self.w_aux)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(contract(format!("`{name}` must be non-negative, got {v}")));
            }
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(contract("batch_size and eval_every must be positive"));
        }
        Ok(())
    }

    /// Seeds to run: `seeds` if given, otherwise just `seed`.
    pub fn run_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn switch_spec(&self) -> SwitchSpec {
        SwitchSpec {
            signature: self.signature.clone().with_trainable_curvature(self.trainable_curvature),
            k: self.k,
            gate: self.gate,
            mode: self.score_mode,
            noise: self.noise,
            trainable_curvature: self.trainable_curvature,
            embed_std: self.embed_std,
            gate_std: self.gate_std,
        }
    }

    pub fn to_pairs(&self) -> BTreeMap<&'static str, String> {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let (mode, weighting) = match self.score_mode {
            ScoreMode::Lse { weighted } => ("lse", weighted),
            ScoreMode::Sum => ("sum", true),
        };
        let mut m = BTreeMap::new();
        m.insert("task", self.task.name().to_string());
        m.insert("signature", self.signature.to_string());
        m.insert("k", self.k.to_string());
        m.insert("lr", self.lr.to_string());
        m.insert("epochs", self.epochs.to_string());
        m.insert("batch_size", self.batch_size.to_string());
        m.insert("n_neg", self.n_neg.to_string());
        m.insert("margin", self.margin.to_string());
        m.insert("reg", self.reg.to_string());
        m.insert("w_aux", self.w_aux.to_string());
        m.insert("gate", self.gate.name().to_string());
        m.insert("score_mode", mode.to_string());
        m.insert("gate_weighting", weighting.to_string());
        m.insert("noise", self.noise.to_string());
        m.insert("trainable_curvature", self.trainable_curvature.to_string());
        m.insert("seed", self.seed.to_string());
        m.insert("seeds", seeds.join(","));
        m.insert("patience", self.patience.to_string());
        m.insert("eval_every", self.eval_every.to_string());
        m.insert("embed_std", self.embed_std.to_string());
        m.insert("gate_std", self.gate_std.to_string());
        m.insert("data", self.data.display().to_string());
        m.insert("output", self.output.display().to_string());
        m
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for key in KEYS {
            writeln!(f, "{key} = {}", self.to_pairs()[key])?;
        }
        Ok(())
    }
}
