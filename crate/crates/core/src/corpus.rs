//! Interaction logs, k-core filtering, sequence construction, leave-one-out
//! splits, embedding tables and the synthetic planted-cluster corpus.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const INTERACTIONS_HEADER: &str = "user_id\titem_id\ttimestamp";
pub const ITEM_MAP_HEADER: &str = "item_id\trow";
pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const ITEM_MAP_FILE: &str = "item_map.tsv";

/// Identifier order: integers numerically, then everything else lexically.
pub fn compare_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

/// Timestamp-ordered interaction records (stable with respect to input order).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InteractionLog {
    records: Vec<Interaction>,
}

impl InteractionLog {
    /// Drops repeated `(user, item, timestamp)` triples and sorts stably by time.
    pub fn new(records: Vec<Interaction>) -> Self {
        let mut seen = HashSet::with_capacity(records.len());
        let mut records: Vec<Interaction> = records
            .into_iter()
            .filter(|r| seen.insert(r.clone()))
            .collect();
        records.sort_by_key(|r| r.timestamp);
        InteractionLog { records }
    }

    pub fn records(&self) -> &[Interaction] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn user_degrees(&self) -> HashMap<&str, usize> {
        let mut out = HashMap::new();
        for r in &self.records {
            *out.entry(r.user.as_str()).or_insert(0) += 1;
        }
        out
    }

    pub fn item_degrees(&self) -> HashMap<&str, usize> {
        let mut out = HashMap::new();
        for r in &self.records {
            *out.entry(r.item.as_str()).or_insert(0) += 1;
        }
        out
    }
}

pub fn load_interactions(path: impl AsRef<Path>) -> Result<InteractionLog> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text, path)
}

pub fn parse_interactions(text: &str, path: &Path) -> Result<InteractionLog> {
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            None => return Ok(InteractionLog::default()),
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((_, l)) => break l.trim_end_matches('\r'),
        }
    };
    if header != INTERACTIONS_HEADER {
        return Err(Error::format(
            path,
            format!("expected header `{INTERACTIONS_HEADER}`, found `{header}`"),
        ));
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", fields.len())));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(parse_err("empty user or item id".into()));
        }
        let timestamp = fields[2]
            .trim()
            .parse::<i64>()
            .map_err(|_| parse_err(format!("non-numeric timestamp `{}`", fields[2])))?;
        records.push(Interaction {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            timestamp,
        });
    }
    Ok(InteractionLog::new(records))
}

pub fn write_interactions(path: impl AsRef<Path>, log: &InteractionLog) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(log.len() * 24);
    out.push_str(INTERACTIONS_HEADER);
    out.push('\n');
    for r in log.records() {
        let _ = writeln!(out, "{}\t{}\t{}", r.user, r.item, r.timestamp);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Iteratively removes users and items with fewer than `k` interactions
/// until every survivor has at least `k`.
pub fn k_core_filter(log: &InteractionLog, k: usize) -> InteractionLog {
    let records = log.records();
    let mut user_ids: HashMap<&str, usize> = HashMap::new();
    let mut item_ids: HashMap<&str, usize> = HashMap::new();
    let mut user_of = Vec::with_capacity(records.len());
    let mut item_of = Vec::with_capacity(records.len());
    for r in records {
        let nu = user_ids.len();
        user_of.push(*user_ids.entry(r.user.as_str()).or_insert(nu));
        let ni = item_ids.len();
        item_of.push(*item_ids.entry(r.item.as_str()).or_insert(ni));
    }
    let n_users = user_ids.len();
    // nodes: users first, then items
    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); n_users + item_ids.len()];
    for (r, (&u, &i)) in user_of.iter().zip(&item_of).enumerate() {
        incident[u].push(r);
        incident[n_users + i].push(r);
    }
    let mut degree: Vec<usize> = incident.iter().map(Vec::len).collect();
    let mut alive = vec![true; records.len()];
    let mut removed = vec![false; degree.len()];
    let mut queue: VecDeque<usize> = (0..degree.len()).filter(|&n| degree[n] < k).collect();
    while let Some(node) = queue.pop_front() {
        if removed[node] {
            continue;
        }
        removed[node] = true;
        for &r in &incident[node] {
            if !alive[r] {
                continue;
            }
            alive[r] = false;
            let other = if node < n_users {
                n_users + item_of[r]
            } else {
                user_of[r]
            };
            degree[other] -= 1;
            if degree[other] < k && !removed[other] {
                queue.push_back(other);
            }
        }
    }
    InteractionLog {
        records: records
            .iter()
            .zip(&alive)
            .filter(|(_, &a)| a)
            .map(|(r, _)| r.clone())
            .collect(),
    }
}

/// Dense item indices in ascending item-id order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Catalog {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Catalog {
    pub fn new(mut ids: Vec<String>) -> Self {
        ids.sort_by(|a, b| compare_ids(a, b));
        ids.dedup();
        let index = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Catalog { ids, index }
    }

    pub fn from_log(log: &InteractionLog) -> Self {
        Catalog::new(log.records().iter().map(|r| r.item.clone()).collect())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

/// One user's chronological item indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserItems {
    pub user: String,
    pub items: Vec<usize>,
}

/// Groups the log per user (ascending user id), keeps chronological order
/// and retains the most recent `max_len + 2` items.
pub fn build_sequences(log: &InteractionLog, catalog: &Catalog, max_len: usize) -> Result<Vec<UserItems>> {
    let mut per_user: HashMap<&str, Vec<usize>> = HashMap::new();
    for r in log.records() {
        let item = catalog
            .index(&r.item)
            .ok_or_else(|| Error::UnknownItem(r.item.clone()))?;
        per_user.entry(r.user.as_str()).or_default().push(item);
    }
    let mut users: Vec<UserItems> = per_user
        .into_iter()
        .map(|(user, mut items)| {
            let keep = max_len + 2;
            if items.len() > keep {
                items.drain(..items.len() - keep);
            }
            UserItems {
                user: user.to_string(),
                items,
            }
        })
        .collect();
    users.sort_by(|a, b| compare_ids(&a.user, &b.user));
    Ok(users)
}

/// A history (oldest first, at most `max_len` items) and its next item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user: String,
    pub history: Vec<usize>,
    pub target: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitDataset {
    pub train: Vec<UserSequence>,
    pub validation: Vec<UserSequence>,
    pub test: Vec<UserSequence>,
    pub excluded_users: Vec<String>,
}

fn recent(items: &[usize], max_len: usize) -> Vec<usize> {
    items[items.len().saturating_sub(max_len)..].to_vec()
}

/// Last item → test, second to last → validation, every earlier
/// (prefix, next item) pair → training. Users with fewer than 3 items are
/// excluded with a warning.
pub fn split_leave_one_out(sequences: &[UserItems], max_len: usize) -> SplitDataset {
    let mut split = SplitDataset::default();
    for seq in sequences {
        let n = seq.items.len();
        if n < 3 {
            warn!("user {} has {n} interactions; excluded from the split", seq.user);
            split.excluded_users.push(seq.user.clone());
            continue;
        }
        let make = |end: usize| UserSequence {
            user: seq.user.clone(),
            history: recent(&seq.items[..end], max_len),
            target: seq.items[end],
        };
        split.test.push(make(n - 1));
        split.validation.push(make(n - 2));
        for j in 1..n - 2 {
            split.train.push(make(j));
        }
    }
    split
}

/// Item embeddings in file row order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    ids: Vec<String>,
    vectors: Matrix,
}

impl EmbeddingTable {
    pub fn new(ids: Vec<String>, vectors: Matrix) -> Result<Self> {
        if ids.len() != vectors.rows() {
            return Err(Error::Config(format!(
                "{} ids for {} embedding rows",
                ids.len(),
                vectors.rows()
            )));
        }
        if !vectors.is_finite() {
            return Err(Error::Config("embeddings must be finite".into()));
        }
        Ok(EmbeddingTable { ids, vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    /// Rows reordered to match `catalog`; a catalog item without an embedding is an error.
    pub fn aligned(&self, catalog: &Catalog) -> Result<Matrix> {
        let rows: HashMap<&str, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let mut out = Matrix::zeros(catalog.len(), self.dim());
        for (i, id) in catalog.ids().iter().enumerate() {
            let row = rows
                .get(id.as_str())
                .ok_or_else(|| Error::UnknownItem(id.clone()))?;
            out.row_mut(i).copy_from_slice(self.vectors.row(*row));
        }
        Ok(out)
    }
}

/// Reads `n d` + `n` rows of floats, and the `item_id\trow` map.
pub fn load_embeddings(vectors_path: impl AsRef<Path>, map_path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let vectors_path = vectors_path.as_ref();
    let map_path = map_path.as_ref();
    let text = fs::read_to_string(vectors_path).map_err(|e| Error::io(vectors_path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format(vectors_path, "missing `n d` header"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(vectors_path, format!("bad header `{header}`")))?;
    let [n, d] = dims[..] else {
        return Err(Error::format(vectors_path, format!("bad header `{header}`")));
    };
    let mut data = Vec::with_capacity(n * d);
    let mut rows = 0;
    for (i, line) in lines {
        let values: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                path: vectors_path.to_path_buf(),
                line: i + 1,
                message: "non-numeric embedding value".into(),
            })?;
        if values.len() != d {
            return Err(Error::Parse {
                path: vectors_path.to_path_buf(),
                line: i + 1,
                message: format!("expected {d} values, found {}", values.len()),
            });
        }
        data.extend(values);
        rows += 1;
    }
    if rows != n {
        return Err(Error::format(
            vectors_path,
            format!("header declares {n} rows, found {rows}"),
        ));
    }

    let map_text = fs::read_to_string(map_path).map_err(|e| Error::io(map_path, e))?;
    let mut map_lines = map_text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match map_lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == ITEM_MAP_HEADER => {}
        Some((_, h)) => {
            return Err(Error::format(
                map_path,
                format!("expected header `{ITEM_MAP_HEADER}`, found `{h}`"),
            ))
        }
        None => return Err(Error::format(map_path, "missing header")),
    }
    let mut ids: Vec<Option<String>> = vec![None; n];
    for (i, line) in map_lines {
        let parse_err = |message: String| Error::Parse {
            path: map_path.to_path_buf(),
            line: i + 1,
            message,
        };
        let line = line.trim_end_matches('\r');
        let (id, row) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `item_id<TAB>row`".into()))?;
        let row: usize = row
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad row index `{row}`")))?;
        if row >= n {
            return Err(parse_err(format!("row {row} out of range for {n} rows")));
        }
        if ids[row].replace(id.to_string()).is_some() {
            return Err(parse_err(format!("row {row} mapped twice")));
        }
    }
    let ids = ids
        .into_iter()
        .enumerate()
        .map(|(row, id)| id.ok_or_else(|| Error::format(map_path, format!("row {row} has no item id"))))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingTable::new(ids, Matrix::from_vec(n, d, data))
}

pub fn write_embeddings(
    table: &EmbeddingTable,
    vectors_path: impl AsRef<Path>,
    map_path: impl AsRef<Path>,
) -> Result<()> {
    let vectors_path = vectors_path.as_ref();
    let map_path = map_path.as_ref();
    let mut out = format!("{} {}\n", table.len(), table.dim());
    for i in 0..table.len() {
        let row: Vec<String> = table.vectors.row(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    fs::write(vectors_path, out).map_err(|e| Error::io(vectors_path, e))?;
    let mut map = format!("{ITEM_MAP_HEADER}\n");
    for (i, id) in table.ids.iter().enumerate() {
        let _ = writeln!(map, "{id}\t{i}");
    }
    fs::write(map_path, map).map_err(|e| Error::io(map_path, e))
}

/// An interaction log plus embeddings, as stored in a data directory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub log: InteractionLog,
    pub embeddings: EmbeddingTable,
}

impl Corpus {
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(Corpus {
            log: load_interactions(dir.join(INTERACTIONS_FILE))?,
            embeddings: load_embeddings(dir.join(EMBEDDINGS_FILE), dir.join(ITEM_MAP_FILE))?,
        })
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_interactions(dir.join(INTERACTIONS_FILE), &self.log)?;
        write_embeddings(
            &self.embeddings,
            dir.join(EMBEDDINGS_FILE),
            dir.join(ITEM_MAP_FILE),
        )
    }
}

/// Filtered log, catalog, aligned embeddings and split, ready for training.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub catalog: Catalog,
    pub embeddings: Matrix,
    pub split: SplitDataset,
}

pub fn prepare(corpus: &Corpus, k_core: usize, max_len: usize) -> Result<PreparedData> {
    let filtered = k_core_filter(&corpus.log, k_core);
    let catalog = Catalog::from_log(&filtered);
    let embeddings = corpus.embeddings.aligned(&catalog)?;
    let sequences = build_sequences(&filtered, &catalog, max_len)?;
    let split = split_leave_one_out(&sequences, max_len);
    Ok(PreparedData {
        catalog,
        embeddings,
        split,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    pub dim: usize,
    pub min_interactions: usize,
    pub max_interactions: usize,
    /// Probability that an interaction stays in the user's preferred cluster.
    pub within_cluster: f64,
    /// Radius of the ring on which a cluster's items lie.
    pub ring_radius: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 500,
            items: 200,
            clusters: 4,
            dim: 32,
            min_interactions: 5,
            max_interactions: 12,
            within_cluster: 0.8,
            ring_radius: 1.0,
            noise: 0.05,
            seed: 0,
        }
    }
}

/// Planted-cluster corpus with ground truth.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    /// Cluster of each item, indexed like `corpus.embeddings`.
    pub item_cluster: Vec<usize>,
    /// Preferred cluster of each user, indexed by user number.
    pub user_cluster: Vec<usize>,
}

/// Item `i` belongs to cluster `i % clusters` and sits on a ring around the
/// cluster centre. Each user prefers one cluster; with probability
/// `within_cluster` the next interaction advances one or two ring steps
/// inside that cluster, otherwise it is a uniformly drawn item of another
/// cluster.
pub fn synth_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    if config.clusters == 0 || config.clusters > config.items {
        return Err(Error::Config("need 1 <= clusters <= items".into()));
    }
    if config.min_interactions == 0 || config.min_interactions > config.max_interactions {
        return Err(Error::Config("bad interaction count range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.dim;
    let centers: Vec<Matrix> = (0..config.clusters)
        .map(|_| Matrix::random_normal(1, d, 1.0, &mut rng))
        .collect();
    // two orthonormal-ish directions per cluster for the ring
    let planes: Vec<(Vec<f64>, Vec<f64>)> = (0..config.clusters)
        .map(|_| {
            let a = unit(Matrix::random_normal(1, d, 1.0, &mut rng).into_vec());
            let b = Matrix::random_normal(1, d, 1.0, &mut rng).into_vec();
            let proj: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let b = unit(b.iter().zip(&a).map(|(y, x)| y - proj * x).collect());
            (a, b)
        })
        .collect();

    let members: Vec<Vec<usize>> = (0..config.clusters)
        .map(|c| (c..config.items).step_by(config.clusters).collect())
        .collect();
    let item_cluster: Vec<usize> = (0..config.items).map(|i| i % config.clusters).collect();

    let mut vectors = Matrix::zeros(config.items, d);
    for (c, items) in members.iter().enumerate() {
        let m = items.len() as f64;
        for (pos, &item) in items.iter().enumerate() {
            let angle = std::f64::consts::TAU * pos as f64 / m;
            let (u, w) = &planes[c];
            for j in 0..d {
                let noise: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * config.noise;
                vectors.set(
                    item,
                    j,
                    centers[c].data()[j]
                        + config.ring_radius * (angle.cos() * u[j] + angle.sin() * w[j])
                        + noise,
                );
            }
        }
    }

    let mut records = Vec::new();
    let mut user_cluster = Vec::with_capacity(config.users);
    for u in 0..config.users {
        let c = rng.gen_range(0..config.clusters);
        user_cluster.push(c);
        let len = rng.gen_range(config.min_interactions..=config.max_interactions);
        let mut pos = rng.gen_range(0..members[c].len());
        let mut t: i64 = 1_600_000_000 + rng.gen_range(0..86_400);
        for step in 0..len {
            let item = if step == 0 || rng.gen::<f64>() < config.within_cluster {
                if step > 0 {
                    pos = (pos + rng.gen_range(1..=2)) % members[c].len();
                }
                members[c][pos]
            } else {
                let others: Vec<usize> = (0..config.clusters).filter(|&o| o != c).collect();
                match others.choose(&mut rng) {
                    Some(&o) => *members[o].choose(&mut rng).expect("non-empty cluster"),
                    None => members[c][pos],
                }
            };
            records.push(Interaction {
                user: u.to_string(),
                item: item.to_string(),
                timestamp: t,
            });
            t += rng.gen_range(1..3_600);
        }
    }

    let ids = (0..config.items).map(|i| i.to_string()).collect();
    Ok(SynthCorpus {
        corpus: Corpus {
            log: InteractionLog::new(records),
            embeddings: EmbeddingTable::new(ids, vectors)?,
        },
        item_cluster,
        user_cluster,
    })
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}
