//! Prefix-trie constrained beam search over valid semantic IDs.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::quantizer::CodeSequence;
use crate::seqmodel::{Recommender, TokenizedSequence, VocabLayout};

#[derive(Debug, Clone, Default)]
struct Node {
    children: BTreeMap<usize, usize>,
    /// Smallest item index reachable below this node.
    min_item: usize,
    item: Option<usize>,
}

/// Trie over the full token sequences of every item.
#[derive(Debug, Clone)]
pub struct PrefixTrie {
    nodes: Vec<Node>,
    depth: usize,
    items: usize,
}

pub const ROOT: usize = 0;

impl PrefixTrie {
    /// `id_map[i]` is the semantic ID of item `i`.
    pub fn build(id_map: &[CodeSequence], vocab: &VocabLayout) -> Result<Self> {
        let mut nodes = vec![Node {
            min_item: usize::MAX,
            ..Node::default()
        }];
        for (item, seq) in id_map.iter().enumerate() {
            let tokens = vocab.item_tokens(seq)?;
            let mut at = ROOT;
            nodes[at].min_item = nodes[at].min_item.min(item);
            for &tok in &tokens {
                let next = match nodes[at].children.get(&tok) {
                    Some(&n) => n,
                    None => {
                        nodes.push(Node {
                            min_item: item,
                            ..Node::default()
                        });
                        let n = nodes.len() - 1;
                        nodes[at].children.insert(tok, n);
                        n
                    }
                };
                at = next;
                nodes[at].min_item = nodes[at].min_item.min(item);
            }
            if let Some(first) = nodes[at].item.replace(item) {
                return Err(Error::DuplicateSequence {
                    first: format!("#{first}"),
                    second: format!("#{item}"),
                });
            }
        }
        Ok(PrefixTrie {
            nodes,
            depth: vocab.item_len(),
            items: id_map.len(),
        })
    }

    pub fn num_items(&self) -> usize {
        self.items
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Tokens per complete path.
    pub fn depth(&self) -> usize {
        self.depth
    }

    /// `(token, child)` pairs in ascending token order.
    pub fn children(&self, node: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.nodes[node].children.iter().map(|(&t, &c)| (t, c))
    }

    pub fn walk(&self, tokens: &[usize]) -> Option<usize> {
        tokens
            .iter()
            .try_fold(ROOT, |at, t| self.nodes[at].children.get(t).copied())
    }

    pub fn item_at(&self, node: usize) -> Option<usize> {
        self.nodes[node].item
    }

    pub fn min_item(&self, node: usize) -> usize {
        self.nodes[node].min_item
    }

    /// Item whose full token sequence is exactly `tokens`.
    pub fn lookup(&self, tokens: &[usize]) -> Option<usize> {
        self.walk(tokens).and_then(|n| self.item_at(n))
    }

    pub fn contains(&self, tokens: &[usize]) -> bool {
        self.lookup(tokens).is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ranked {
    pub item: usize,
    pub score: f64,
}

/// Items by descending score, ties by ascending item index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankedList {
    entries: Vec<Ranked>,
}

/// Descending score, then ascending key.
pub fn rank_order(a_score: f64, a_key: usize, b_score: f64, b_key: usize) -> Ordering {
    b_score.total_cmp(&a_score).then(a_key.cmp(&b_key))
}

impl RankedList {
    pub fn from_scores(mut entries: Vec<Ranked>) -> Self {
        entries.sort_by(|a, b| rank_order(a.score, a.item, b.score, b.item));
        entries.dedup_by_key(|e| e.item);
        RankedList { entries }
    }

    pub fn entries(&self) -> &[Ranked] {
        &self.entries
    }

    pub fn items(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.item).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// 1-based rank of `item`, if present.
    pub fn rank_of(&self, item: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.item == item).map(|p| p + 1)
    }
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<usize>,
    score: f64,
    node: usize,
}

/// Beam search whose expansions are restricted to trie continuations.
///
/// Scores are summed full-vocabulary log-softmax values. Hypotheses are kept
/// by descending score with ties broken by the smallest item reachable from
/// the hypothesis, so the completed list is tie-broken by item index.
pub fn constrained_beam_search(
    model: &Recommender,
    history: &TokenizedSequence,
    trie: &PrefixTrie,
    beam: usize,
) -> Result<RankedList> {
    if beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    if trie.num_items() == 0 {
        return Ok(RankedList::default());
    }
    let mut session = model.session(history)?;
    let mut beams = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        node: ROOT,
    }];
    for _ in 0..trie.depth() {
        let mut candidates = Vec::new();
        for hyp in &beams {
            let log_probs = session.next_log_probs(&hyp.tokens);
            for (tok, child) in trie.children(hyp.node) {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                candidates.push(Hypothesis {
                    tokens,
                    score: hyp.score + log_probs[tok],
                    node: child,
                });
            }
        }
        candidates.sort_by(|a, b| {
            rank_order(a.score, trie.min_item(a.node), b.score, trie.min_item(b.node))
        });
        candidates.truncate(beam);
        beams = candidates;
    }
    let entries = beams
        .into_iter()
        .map(|h| Ranked {
            item: trie
                .item_at(h.node)
                .expect("complete paths end at item leaves"),
            score: h.score,
        })
        .collect();
    Ok(RankedList::from_scores(entries))
}
