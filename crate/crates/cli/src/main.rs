//! `switch-spaces`: train and evaluate switch-space models.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use switch_core::config::{RunConfig, Task, KEYS};
use switch_core::data::{load_kg, load_movielens, split_interactions, InteractionStore, TripleStore};
use switch_core::gating::ActiveSetHistogram;
use switch_core::kg::KgModel;
use switch_core::metrics::Split;
use switch_core::numerics::ParamStore;
use switch_core::rec::RecModel;
use switch_core::train::{eval_kg, eval_rec, time_sweep, train_kg, train_rec};
use switch_core::{Error, Result};

#[derive(Parser)]
#[command(name = "switch-spaces", version, about = "Train and evaluate switch-space embedding models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, log and metrics to `output`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate on the validation split instead of the test split.
        #[arg(long)]
        valid: bool,
        /// Write the active-set histogram (CSV) here, and per-example gate
        /// records next to it with a `.jsonl` extension.
        #[arg(long = "log-gates")]
        log_gates: Option<PathBuf>,
        /// Comma-separated N values for a scoring-time sweep at fixed k.
        #[arg(long = "time-sweep", value_delimiter = ',')]
        time_sweep: Vec<usize>,
        /// Component dimension used by the time sweep.
        #[arg(long = "sweep-dim", default_value_t = 32)]
        sweep_dim: usize,
        /// Write metrics JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A config file plus per-key overrides.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any key: `--set lr=0.005`. May be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    signature: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long = "batch_size", alias = "batch-size")]
    batch_size: Option<String>,
    #[arg(long = "n_neg", alias = "n-neg")]
    n_neg: Option<String>,
    #[arg(long)]
    margin: Option<String>,
    #[arg(long)]
    reg: Option<String>,
    #[arg(long = "w_aux", alias = "w-aux")]
    w_aux: Option<String>,
    #[arg(long)]
    gate: Option<String>,
    #[arg(long = "score_mode", alias = "score-mode")]
    score_mode: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    output: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                    path: path.clone(),
                    line: i + 1,
                    message: format!("expected `key = value`, got {line:?}"),
                })?;
                pairs.push((k.trim().into(), v.trim().into()));
            }
        }
        let named = [
            ("task", &self.task),
            ("signature", &self.signature),
            ("k", &self.k),
            ("lr", &self.lr),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("n_neg", &self.n_neg),
            ("margin", &self.margin),
            ("reg", &self.reg),
            ("w_aux", &self.w_aux),
            ("gate", &self.gate),
            ("score_mode", &self.score_mode),
            ("seed", &self.seed),
            ("seeds", &self.seeds),
            ("patience", &self.patience),
            ("data", &self.data),
            ("output", &self.output),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                pairs.push((k.into(), v.clone()));
            }
        }
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Contract(format!("--set expects KEY=VALUE, got `{s}`")))?;
            if !KEYS.contains(&k.trim()) {
                return Err(Error::Contract(format!("unknown config key `{}`", k.trim())));
            }
            pairs.push((k.trim().into(), v.trim().into()));
        }
        RunConfig::from_pairs(&pairs)
    }
}

enum Dataset {
    Kg(TripleStore),
    Rec(InteractionStore),
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.task {
        Task::Kg => Ok(Dataset::Kg(load_kg(&cfg.data)?)),
        Task::Rec => {
            let raw = load_movielens(&cfg.data)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            Ok(Dataset::Rec(split_interactions(&raw, &mut rng)))
        }
    }
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v).expect("serializable") + "\n")?;
    Ok(())
}

fn mean_of(runs: &[Value], key: &str) -> Value {
    let xs: Vec<f64> = runs.iter().filter_map(|r| r[key].as_f64()).collect();
    if xs.is_empty() {
        return Value::Null;
    }
    json!(xs.iter().sum::<f64>() / xs.len() as f64)
}

fn cmd_train(cfg: &RunConfig) -> Result<Value> {
    let data = load_data(cfg)?;
    fs::create_dir_all(&cfg.output)?;
    fs::write(cfg.output.join("config.txt"), cfg.to_string())?;
    let seeds = cfg.run_seeds();
    let mut runs = Vec::new();
    let mut log = fs::File::create(cfg.output.join("train_log.jsonl"))?;
    for &seed in &seeds {
        info!("training seed {seed}");
        let ckpt = if seeds.len() == 1 {
            cfg.output.join("model.ckpt")
        } else {
            cfg.output.join(format!("model-seed{seed}.ckpt"))
        };
        let (metrics, train_log) = match &data {
            Dataset::Kg(d) => {
                let run = train_kg(cfg, d, seed)?;
                run.store.save(&ckpt)?;
                (eval_kg(&run.model, &run.store, d, &d.test)?.to_json(), run.log)
            }
            Dataset::Rec(d) => {
                let run = train_rec(cfg, d, seed)?;
                run.store.save(&ckpt)?;
                (eval_rec(&run.model, &run.store, d, Split::Test)?.to_json(), run.log)
            }
        };
        for e in &train_log.epochs {
            let mut rec = e.to_json();
            rec["seed"] = json!(seed);
            writeln!(log, "{rec}")?;
        }
        runs.push(json!({
            "seed": seed,
            "checkpoint": ckpt.display().to_string(),
            "best_epoch": train_log.best_epoch,
            "stopped_early": train_log.stopped_early,
            "test": metrics,
        }));
    }
    let tests: Vec<Value> = runs.iter().map(|r| r["test"].clone()).collect();
    let keys: Vec<String> = tests[0].as_object().map(|o| o.keys().cloned().collect()).unwrap_or_default();
    let mean: serde_json::Map<String, Value> = keys.iter().map(|k| (k.clone(), mean_of(&tests, k))).collect();
    let out = json!({ "task": cfg.task.name(), "signature": cfg.signature.to_string(), "k": cfg.k, "runs": runs, "mean": mean });
    write_json(&cfg.output.join("metrics.json"), &out)?;
    Ok(out)
}

fn log_gates(path: &Path, cfg: &RunConfig, decisions: impl Iterator<Item = Result<Vec<usize>>>, records: Vec<Value>) -> Result<Value> {
    let mut hist = ActiveSetHistogram::new(cfg.signature.len(), cfg.k)?;
    for active in decisions {
        hist.record(&active?)?;
    }
    fs::write(path, hist.to_csv())?;
    let mut lines = String::new();
    for r in records {
        lines.push_str(&r.to_string());
        lines.push('\n');
    }
    fs::write(path.with_extension("jsonl"), lines)?;
    Ok(json!({ "histogram": path.display().to_string(), "combinations": hist.len(), "examples": hist.total() }))
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, valid: bool, gates: Option<&Path>, sweep: &[usize], sweep_dim: usize) -> Result<Value> {
    let store = ParamStore::load(checkpoint)?;
    let data = load_data(cfg)?;
    let mut out = json!({ "task": cfg.task.name(), "signature": cfg.signature.to_string(), "k": cfg.k });
    match &data {
        Dataset::Kg(d) => {
            let model = KgModel::attach(&store, cfg.switch_spec())?;
            if model.n_entities != d.n_entities() || model.n_relations != 2 * d.n_relations() {
                return Err(Error::Contract(format!(
                    "checkpoint has {} entities and {} relations, dataset needs {} and {}",
                    model.n_entities,
                    model.n_relations,
                    d.n_entities(),
                    2 * d.n_relations()
                )));
            }
            let triples = if valid { &d.valid } else { &d.test };
            out["metrics"] = eval_kg(&model, &store, d, triples)?.to_json();
            if let Some(path) = gates {
                let mut records = Vec::new();
                let mut actives = Vec::new();
                for t in triples {
                    let (_, dec) = model.swise_score(&store, *t)?;
                    let mut r = dec.to_json();
                    r["triple"] = json!([t.head, t.relation, t.tail]);
                    records.push(r);
                    actives.push(Ok(dec.active));
                }
                out["gates"] = log_gates(path, cfg, actives.into_iter(), records)?;
            }
        }
        Dataset::Rec(d) => {
            let model = RecModel::attach(&store, cfg.switch_spec())?;
            if model.n_users != d.n_users || model.n_items != d.n_items {
                return Err(Error::Contract(format!(
                    "checkpoint has {} users and {} items, dataset needs {} and {}",
                    model.n_users, model.n_items, d.n_users, d.n_items
                )));
            }
            let split = if valid { Split::Valid } else { Split::Test };
            out["metrics"] = eval_rec(&model, &store, d, split)?.to_json();
            if let Some(path) = gates {
                let held = if valid { &d.valid } else { &d.test };
                let mut records = Vec::new();
                let mut actives = Vec::new();
                for (u, items) in held.iter().enumerate() {
                    for &i in items {
                        let (_, dec) = model.rec_switch_score(&store, u, i)?;
                        let mut r = dec.to_json();
                        r["pair"] = json!([u, i]);
                        records.push(r);
                        actives.push(Ok(dec.active));
                    }
                }
                out["gates"] = log_gates(path, cfg, actives.into_iter(), records)?;
            }
        }
    }
    if !sweep.is_empty() {
        let rows = time_sweep(sweep, cfg.k, sweep_dim, 20, 500, 3, cfg.seed)?;
        out["time_sweep"] = Value::Array(rows.iter().map(|r| r.to_json()).collect());
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg } => {
            let cfg = cfg.resolve()?;
            let out = cmd_train(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
        }
        Command::Eval {
            cfg,
            checkpoint,
            valid,
            log_gates,
            time_sweep,
            sweep_dim,
            out,
        } => {
            let cfg = cfg.resolve()?;
            let v = cmd_eval(&cfg, &checkpoint, valid, log_gates.as_deref(), &time_sweep, sweep_dim)?;
            match out {
                Some(p) => write_json(&p, &v)?,
                None => println!("{}", serde_json::to_string_pretty(&v).expect("serializable")),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
