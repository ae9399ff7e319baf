//! Datasets: knowledge-graph triples with a filtering index, and binarized
//! user-item interactions with a per-user 70/10/20 split.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// A `(head, relation, tail)` triple of dense ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }

    /// `(t, r + n_relations, h)`: the same fact read backwards.
    pub fn reciprocal(self, n_relations: usize) -> Self {
        Self::new(self.tail, self.relation + n_relations, self.head)
    }
}

/// Each triple followed by its reciprocal, doubling the relation vocabulary.
pub fn with_reciprocals(triples: &[Triple], n_relations: usize) -> Vec<Triple> {
    triples
        .iter()
        .flat_map(|&t| [t, t.reciprocal(n_relations)])
        .collect()
}

/// String-to-id dictionary with ids assigned in first-seen order.
#[derive(Debug, Clone, Default)]
pub struct Vocab {
    names: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Train/valid/test triples over shared entity and relation dictionaries.
#[derive(Debug, Clone, Default)]
pub struct TripleStore {
    pub entities: Vocab,
    pub relations: Vocab,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
}

impl TripleStore {
    /// Builds a store from the contents of the three split files.
    pub fn from_texts(train: &str, valid: &str, test: &str) -> Result<Self> {
        let mut s = Self::default();
        s.train = s.parse(train, Path::new("train.txt"))?;
        s.valid = s.parse(valid, Path::new("valid.txt"))?;
        s.test = s.parse(test, Path::new("test.txt"))?;
        Ok(s)
    }

    /// Builds a store directly from id triples (entities and relations are
    /// named by their ids).
    pub fn from_triples(
        n_entities: usize,
        n_relations: usize,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Self {
        let mut s = Self::default();
        for e in 0..n_entities {
            s.entities.intern(&e.to_string());
        }
        for r in 0..n_relations {
            s.relations.intern(&r.to_string());
        }
        s.train = train;
        s.valid = valid;
        s.test = test;
        s
    }

    fn parse(&mut self, text: &str, path: &Path) -> Result<Vec<Triple>> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected `head\\trelation\\ttail`, got {line:?}"),
                });
            }
            let h = self.entities.intern(fields[0]);
            let r = self.relations.intern(fields[1]);
            let t = self.entities.intern(fields[2]);
            out.push(Triple::new(h, r, t));
        }
        Ok(out)
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    /// Number of relations before reciprocals are added.
    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    /// Filter index over all splits, reciprocals included.
    pub fn filter_index(&self) -> FilterIndex {
        let mut f = FilterIndex::default();
        for t in self.train.iter().chain(&self.valid).chain(&self.test) {
            f.insert(*t);
            f.insert(t.reciprocal(self.n_relations()));
        }
        f
    }

    /// Filter index over the training split only, reciprocals included.
    pub fn train_index(&self) -> FilterIndex {
        let mut f = FilterIndex::default();
        for t in &self.train {
            f.insert(*t);
            f.insert(t.reciprocal(self.n_relations()));
        }
        f
    }
}

/// Reads `train.txt`, `valid.txt` and `test.txt` from `dir`.
pub fn load_kg(dir: impl AsRef<Path>) -> Result<TripleStore> {
    let dir = dir.as_ref();
    let read = |name: &str| -> Result<(String, PathBuf)> {
        let p = dir.join(name);
        Ok((fs::read_to_string(&p)?, p))
    };
    let mut s = TripleStore::default();
    let (text, p) = read("train.txt")?;
    s.train = s.parse(&text, &p)?;
    let (text, p) = read("valid.txt")?;
    s.valid = s.parse(&text, &p)?;
    let (text, p) = read("test.txt")?;
    s.test = s.parse(&text, &p)?;
    Ok(s)
}

/// Known-true tails per `(head, relation)`.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    tails: HashMap<(usize, usize), HashSet<usize>>,
}

impl FilterIndex {
    pub fn insert(&mut self, t: Triple) {
        self.tails.entry((t.head, t.relation)).or_default().insert(t.tail);
    }

    pub fn contains(&self, t: Triple) -> bool {
        self.tails
            .get(&(t.head, t.relation))
            .is_some_and(|s| s.contains(&t.tail))
    }

    pub fn tails(&self, head: usize, relation: usize) -> Option<&HashSet<usize>> {
        self.tails.get(&(head, relation))
    }
}

/// Binarized interactions: every observed `(user, item)` pair counts once.
#[derive(Debug, Clone, Default)]
pub struct Interactions {
    pub users: Vocab,
    pub items: Vocab,
    /// Per-user items in first-seen order, without duplicates.
    pub by_user: Vec<Vec<usize>>,
}

impl Interactions {
    pub fn n_events(&self) -> usize {
        self.by_user.iter().map(Vec::len).sum()
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut s = Self::default();
        let mut seen = HashSet::new();
        for (u, i) in pairs {
            let uid = s.users.intern(u);
            let iid = s.items.intern(i);
            if uid == s.by_user.len() {
                s.by_user.push(Vec::new());
            }
            if seen.insert((uid, iid)) {
                s.by_user[uid].push(iid);
            }
        }
        s
    }
}

/// Parses MovieLens ratings, either `user\titem\trating\tts` (100K) or
/// `user::item::rating::ts` (1M). Ratings are binarized.
pub fn parse_movielens(text: &str, path: &Path) -> Result<Interactions> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = if line.contains("::") {
            line.split("::").collect()
        } else {
            line.split('\t').collect()
        };
        if fields.len() < 3 || fields[0].trim().is_empty() || fields[1].trim().is_empty() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected `user item rating timestamp`, got {line:?}"),
            });
        }
        if fields[2].trim().parse::<f64>().is_err() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("rating `{}` is not a number", fields[2]),
            });
        }
        pairs.push((fields[0].trim(), fields[1].trim()));
    }
    Ok(Interactions::from_pairs(pairs))
}

/// Loads `path`, or `path/u.data` / `path/ratings.dat` when given a directory.
pub fn load_movielens(path: impl AsRef<Path>) -> Result<Interactions> {
    let mut p = path.as_ref().to_path_buf();
    if p.is_dir() {
        p = ["u.data", "ratings.dat"]
            .iter()
            .map(|f| p.join(f))
            .find(|f| f.exists())
            .ok_or_else(|| Error::Format {
                path: p.clone(),
                line: 0,
                message: "directory holds neither u.data nor ratings.dat".into(),
            })?;
    }
    let text = fs::read_to_string(&p)?;
    parse_movielens(&text, &p)
}

/// Per-user train/validation/test partition.
#[derive(Debug, Clone)]
pub struct InteractionStore {
    pub n_users: usize,
    pub n_items: usize,
    pub train: Vec<Vec<usize>>,
    pub valid: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
    train_sets: Vec<HashSet<usize>>,
}

impl InteractionStore {
    pub fn in_train(&self, user: usize, item: usize) -> bool {
        self.train_sets[user].contains(&item)
    }

    pub fn train_set(&self, user: usize) -> &HashSet<usize> {
        &self.train_sets[user]
    }

    /// `(user, item)` training pairs, user-major.
    pub fn train_pairs(&self) -> Vec<(usize, usize)> {
        self.train
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
            .collect()
    }

    pub fn from_parts(
        n_items: usize,
        train: Vec<Vec<usize>>,
        valid: Vec<Vec<usize>>,
        test: Vec<Vec<usize>>,
    ) -> Self {
        let train_sets = train.iter().map(|v| v.iter().copied().collect()).collect();
        Self {
            n_users: train.len(),
            n_items,
            train,
            valid,
            test,
            train_sets,
        }
    }
}

/// Shuffles each user's items, then takes `floor(0.2 n)` for test,
/// `floor(0.1 n)` for validation and the remainder for training.
pub fn split_interactions<R: Rng + ?Sized>(data: &Interactions, rng: &mut R) -> InteractionStore {
    let mut train = Vec::with_capacity(data.by_user.len());
    let mut valid = Vec::with_capacity(data.by_user.len());
    let mut test = Vec::with_capacity(data.by_user.len());
    for items in &data.by_user {
        let mut items = items.clone();
        items.shuffle(rng);
        let n = items.len();
        let n_test = n * 2 / 10;
        let n_valid = n / 10;
        let te = items.split_off(n - n_test);
        let va = items.split_off(n - n_test - n_valid);
        train.push(items);
        valid.push(va);
        test.push(te);
    }
    InteractionStore::from_parts(data.items.len(), train, valid, test)
}
