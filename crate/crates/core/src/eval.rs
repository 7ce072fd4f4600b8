//! Full-ranking Recall@K / NDCG@K and metric reports.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::UserSequence;
use crate::decode::{constrained_beam_search, PrefixTrie, RankedList};
use crate::error::{Error, Result};
use crate::quantizer::CodeSequence;
use crate::seqmodel::{tokenize_history, Recommender};

/// 1 if `target` is among the first `k` items.
pub fn recall_at_k(ranked: &[usize], target: usize, k: usize) -> f64 {
    match ranked.iter().take(k).position(|&i| i == target) {
        Some(_) => 1.0,
        None => 0.0,
    }
}

/// `1 / log2(rank + 1)` for a 1-based rank within the first `k`, else 0.
pub fn ndcg_at_k(ranked: &[usize], target: usize, k: usize) -> f64 {
    match ranked.iter().take(k).position(|&i| i == target) {
        Some(p) => 1.0 / ((p + 2) as f64).log2(),
        None => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricName {
    Recall,
    Ndcg,
}

impl MetricName {
    pub fn label(self) -> &'static str {
        match self {
            MetricName::Recall => "Recall",
            MetricName::Ndcg => "NDCG",
        }
    }

    fn compute(self, ranked: &[usize], target: usize, k: usize) -> f64 {
        match self {
            MetricName::Recall => recall_at_k(ranked, target, k),
            MetricName::Ndcg => ndcg_at_k(ranked, target, k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub name: MetricName,
    pub k: usize,
    pub value: f64,
    pub n_users: usize,
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: Vec<MetricRecord>,
}

impl MetricsReport {
    /// Averages each metric over users, given one ranking per example.
    pub fn from_rankings(rankings: &[(Vec<usize>, usize)], ks: &[usize]) -> Result<Self> {
        if rankings.is_empty() {
            return Err(Error::EmptySplit("evaluation"));
        }
        let n = rankings.len();
        let mut metrics = Vec::new();
        for name in [MetricName::Recall, MetricName::Ndcg] {
            for &k in ks {
                let total: f64 = rankings
                    .iter()
                    .map(|(ranked, target)| name.compute(ranked, *target, k))
                    .sum();
                metrics.push(MetricRecord {
                    name,
                    k,
                    value: total / n as f64,
                    n_users: n,
                    seed: 0,
                    config_digest: String::new(),
                });
            }
        }
        Ok(MetricsReport { metrics })
    }

    pub fn with_metadata(mut self, seed: u64, config_digest: &str) -> Self {
        for m in &mut self.metrics {
            m.seed = seed;
            m.config_digest = config_digest.to_string();
        }
        self
    }

    pub fn get(&self, name: MetricName, k: usize) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.name == name && m.k == k)
            .map(|m| m.value)
    }

    /// One JSON record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for m in &self.metrics {
            out.push_str(&serde_json::to_string(m).expect("metric records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let metrics = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    path: "<metrics>".into(),
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(MetricsReport { metrics })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<12} {:>10} {:>8}\n", "metric", "value", "users");
        for m in &self.metrics {
            let _ = writeln!(
                out,
                "{:<12} {:>10.4} {:>8}",
                format!("{}@{}", m.name.label(), m.k),
                m.value,
                m.n_users
            );
        }
        out
    }
}

/// Beam-decodes every example and averages Recall/NDCG over users.
pub fn evaluate(
    model: &Recommender,
    id_map: &[CodeSequence],
    examples: &[UserSequence],
    ks: &[usize],
    beam: usize,
) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    let max_k = ks.iter().copied().max().unwrap_or(0);
    if beam < max_k {
        warn!("beam size {beam} is below K = {max_k}; recall is bounded by the returned list length");
    }
    let trie = PrefixTrie::build(id_map, model.vocab())?;
    let rankings = examples
        .iter()
        .map(|ex| {
            let ranked = rank_items(model, id_map, &trie, &ex.history, beam)?;
            Ok((ranked.items(), ex.target))
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_rankings(&rankings, ks)
}

pub fn rank_items(
    model: &Recommender,
    id_map: &[CodeSequence],
    trie: &PrefixTrie,
    history: &[usize],
    beam: usize,
) -> Result<RankedList> {
    let tokens = tokenize_history(history, id_map, model.vocab(), model.config().max_items)?;
    constrained_beam_search(model, &tokens, trie, beam)
}
