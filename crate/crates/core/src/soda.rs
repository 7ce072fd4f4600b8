//! Distribution-level alignment between user histories and target items.
//!
//! Both sides are mapped to per-layer soft codeword distributions by the
//! tokenizer. Pairs are scored by the negated symmetric KL divergence,
//! averaged over codebook layers, and the history is pushed (BPR style) to
//! score its own target higher than the averaged distribution of the other
//! histories in the batch.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{check_dim, Error, Result};
use crate::quantizer::{quantize_hard, quantize_soft, CodebookSet, Tokenizer};
use crate::tensor::{softplus, Matrix};

pub use crate::quantizer::DistributionalRepresentation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SodaConfig {
    /// Weight of the alignment loss in the recommender objective.
    pub lambda: f64,
    /// Scale applied to the score difference inside the log-sigmoid.
    pub beta: f64,
    /// Soft-assignment temperature.
    pub tau: f64,
    /// Probability floor applied before the KL terms.
    pub epsilon: f64,
}

impl Default for SodaConfig {
    fn default() -> Self {
        SodaConfig {
            lambda: 1e-3,
            beta: 100.0,
            tau: 0.1,
            epsilon: 1e-10,
        }
    }
}

impl SodaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config("beta must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-6) {
            return Err(Error::Config("epsilon must lie in (0, 1e-6]".into()));
        }
        Ok(())
    }
}

/// Soft distribution of a target item: encode, hard chain, soft rows.
pub fn target_distribution(
    tokenizer: &Tokenizer,
    embedding: &[f64],
    tau: f64,
) -> Result<DistributionalRepresentation> {
    let latent = tokenizer.encode(embedding)?;
    history_distribution(&latent, &tokenizer.codebooks(), tau)
}

/// Soft distribution of a projected history embedding (already in code space).
pub fn history_distribution(
    projected: &[f64],
    books: &CodebookSet,
    tau: f64,
) -> Result<DistributionalRepresentation> {
    let (_, trace) = quantize_hard(projected, books)?;
    quantize_soft(&trace, books, tau)
}

/// Layer-wise mean over every batch member except `self_index`.
pub fn aggregate_negative(
    batch: &[DistributionalRepresentation],
    self_index: usize,
) -> Result<DistributionalRepresentation> {
    if batch.len() < 2 {
        return Err(Error::Degenerate(
            "negatives need a batch of at least two".into(),
        ));
    }
    if self_index >= batch.len() {
        return Err(Error::Config(format!(
            "self index {self_index} outside batch of {}",
            batch.len()
        )));
    }
    let (layers, k) = batch[0].matrix().shape();
    let mut acc = Matrix::zeros(layers, k);
    for (i, h) in batch.iter().enumerate() {
        check_dim("distribution layers", layers, h.num_layers())?;
        check_dim("distribution width", k, h.codebook_size())?;
        if i != self_index {
            acc.add_assign(h.matrix());
        }
    }
    Ok(DistributionalRepresentation::from_matrix_unchecked(
        acc.scaled(1.0 / (batch.len() - 1) as f64),
    ))
}

fn floored(row: &[f64], eps: f64) -> Vec<f64> {
    let clamped: Vec<f64> = row.iter().map(|p| p.max(eps)).collect();
    let total: f64 = clamped.iter().sum();
    clamped.into_iter().map(|p| p / total).collect()
}

/// `−(KL(a‖b) + KL(b‖a)) / 2` for one pair of probability rows, after flooring.
pub fn symmetric_kl_score(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let a = floored(a, eps);
    let b = floored(b, eps);
    let total: f64 = a
        .iter()
        .zip(&b)
        .map(|(p, q)| (p - q) * (p.ln() - q.ln()))
        .sum();
    -0.5 * total
}

/// Mean over codebook layers of the per-layer symmetric score.
pub fn distribution_score(
    a: &DistributionalRepresentation,
    b: &DistributionalRepresentation,
    eps: f64,
) -> Result<f64> {
    check_dim("distribution layers", a.num_layers(), b.num_layers())?;
    check_dim("distribution width", a.codebook_size(), b.codebook_size())?;
    let layers = a.num_layers();
    let total: f64 = (0..layers)
        .map(|l| symmetric_kl_score(a.row(l), b.row(l), eps))
        .sum();
    Ok(total / layers as f64)
}

/// `−ln σ(β (s⁺ − s⁻))`
pub fn bpr_loss(score_pos: f64, score_neg: f64, beta: f64) -> f64 {
    softplus(-beta * (score_pos - score_neg))
}

/// `−ln σ(β s⁺)`
pub fn pointwise_loss(score_pos: f64, beta: f64) -> f64 {
    softplus(-beta * score_pos)
}

pub fn soda_loss(
    h_plus: &DistributionalRepresentation,
    h_minus: &DistributionalRepresentation,
    h_target: &DistributionalRepresentation,
    config: &SodaConfig,
) -> Result<f64> {
    let pos = distribution_score(h_plus, h_target, config.epsilon)?;
    let neg = distribution_score(h_minus, h_target, config.epsilon)?;
    Ok(bpr_loss(pos, neg, config.beta))
}

pub fn pointwise_variant(
    h_plus: &DistributionalRepresentation,
    h_target: &DistributionalRepresentation,
    config: &SodaConfig,
) -> Result<f64> {
    let pos = distribution_score(h_plus, h_target, config.epsilon)?;
    Ok(pointwise_loss(pos, config.beta))
}

pub fn combined_loss(rec: f64, soda: f64, lambda: f64) -> f64 {
    rec + lambda * soda
}

/// Alignment objective variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Positive versus aggregated in-batch negative.
    Contrastive,
    /// Positive term only.
    Pointwise,
}

/// Row-wise scores (`B × 1`) between two stacks of per-layer `B × K` distributions.
pub fn score_graph(tape: &mut Tape, a: &[Var], b: &[Var], eps: f64) -> Var {
    assert_eq!(a.len(), b.len(), "layer count mismatch");
    let mut total: Option<Var> = None;
    for (&pa, &pb) in a.iter().zip(b) {
        let fa = tape.clamp_min(pa, eps);
        let fa = tape.row_normalize(fa);
        let fb = tape.clamp_min(pb, eps);
        let fb = tape.row_normalize(fb);
        let diff = tape.sub(fa, fb);
        let la = tape.log(fa);
        let lb = tape.log(fb);
        let ldiff = tape.sub(la, lb);
        let prod = tape.mul(diff, ldiff);
        let layer = tape.sum_rows(prod);
        total = Some(match total {
            Some(t) => tape.add(t, layer),
            None => layer,
        });
    }
    let total = total.expect("at least one layer");
    tape.scale(total, -0.5 / a.len() as f64)
}

/// Per-layer in-batch negatives: row `i` is the mean of all other rows.
pub fn negatives_graph(tape: &mut Tape, history: &[Var]) -> Vec<Var> {
    let b = tape.value(history[0]).rows();
    assert!(b >= 2, "negatives need a batch of at least two");
    let w = 1.0 / (b - 1) as f64;
    let mut mix = Matrix::filled(b, b, w);
    for i in 0..b {
        mix.set(i, i, 0.0);
    }
    let mix = tape.constant(mix);
    history.iter().map(|&h| tape.matmul(mix, h)).collect()
}

/// Summed (not averaged) alignment loss over a batch.
///
/// `history` and `targets` hold one `B × K` matrix per codebook layer.
pub fn batch_loss_graph(
    tape: &mut Tape,
    history: &[Var],
    targets: &[Var],
    objective: Objective,
    config: &SodaConfig,
) -> Var {
    let pos = score_graph(tape, history, targets, config.epsilon);
    let margin = match objective {
        Objective::Contrastive => {
            let negatives = negatives_graph(tape, history);
            let neg = score_graph(tape, &negatives, targets, config.epsilon);
            tape.sub(pos, neg)
        }
        Objective::Pointwise => pos,
    };
    let scaled = tape.scale(margin, config.beta);
    let ls = tape.log_sigmoid(scaled);
    let total = tape.sum_all(ls);
    tape.scale(total, -1.0)
}

/// Stacks the `l`-th rows of several distributions into per-layer matrices.
pub fn stack_layers(items: &[&DistributionalRepresentation]) -> Vec<Matrix> {
    let layers = items[0].num_layers();
    let k = items[0].codebook_size();
    (0..layers)
        .map(|l| {
            let mut m = Matrix::zeros(items.len(), k);
            for (i, h) in items.iter().enumerate() {
                m.row_mut(i).copy_from_slice(h.row(l));
            }
            m
        })
        .collect()
}
