//! Tokenizer pretraining, alternating recommender/tokenizer training,
//! ablation variants, run reports and run directories.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{GradAccumulator, ParamStore, Tape, Var};
use crate::checkpoint::{
    read_params_into, read_semantic_ids, round_to_f32, write_codebooks, write_params,
    write_semantic_ids,
};
use crate::corpus::{prepare, Catalog, Corpus, PreparedData, UserSequence};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::optim::Adam;
use crate::quantizer::{
    assign_semantic_ids, quantize_hard, quantize_soft, CodeSequence, CodebookSet,
    DistributionalRepresentation, Tokenizer, TokenizerConfig, TokenizerNet,
};
use crate::seqmodel::{tokenize_history, ModelConfig, Recommender, TokenizedSequence, VocabLayout};
use crate::soda::{batch_loss_graph, stack_layers, Objective, SodaConfig};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub recommender_lr: f64,
    pub tokenizer_lr: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            recommender_lr: 1e-3,
            tokenizer_lr: 1e-3,
            batch_size: 64,
            pretrain_epochs: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub recommender_epochs: usize,
    pub tokenizer_epochs: usize,
    pub cycles: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            recommender_epochs: 5,
            tokenizer_epochs: 1,
            cycles: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub max_len: usize,
    pub k_core: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            max_len: 20,
            k_core: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub beam: usize,
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            beam: 30,
            ks: vec![10, 20],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Master seed; component seeds are derived from it.
    pub seed: u64,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub soda: SodaConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Copy with component seeds derived from `seed`, the sequence capacity
    /// taken from `data.max_len`, and the input width from `input_dim`.
    pub fn resolved(&self, input_dim: usize) -> TrainConfig {
        let mut out = self.clone();
        out.tokenizer.seed = self.seed;
        out.tokenizer.input_dim = input_dim;
        out.model.seed = self.seed.wrapping_add(1);
        out.model.max_items = self.data.max_len;
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.model.validate()?;
        self.soda.validate()?;
        let o = &self.optimizer;
        if !(o.recommender_lr > 0.0 && o.tokenizer_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if o.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.data.max_len == 0 || self.data.k_core == 0 {
            return Err(Error::Config("max_len and k_core must be positive".into()));
        }
        if self.eval.beam == 0 || self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("evaluation needs beam >= 1 and positive Ks".into()));
        }
        Ok(())
    }

    /// Short hex digest of the serialized configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// Positive alignment term only.
    NoNeg,
    /// Alignment weight fixed at zero.
    NoLoss,
    /// Tokenizer frozen after pretraining; no ID refresh.
    NoAlter,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoNeg, Ablation::NoLoss, Ablation::NoAlter];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoNeg => "no-neg",
            Ablation::NoLoss => "no-loss",
            Ablation::NoAlter => "no-alter",
        }
    }

    pub fn objective(self) -> Option<Objective> {
        match self {
            Ablation::Full | Ablation::NoAlter => Some(Objective::Contrastive),
            Ablation::NoNeg => Some(Objective::Pointwise),
            Ablation::NoLoss => None,
        }
    }

    pub fn alternates(self) -> bool {
        self != Ablation::NoAlter
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "full" => Ok(Ablation::Full),
            "no-neg" => Ok(Ablation::NoNeg),
            "no-loss" => Ok(Ablation::NoLoss),
            "no-alter" => Ok(Ablation::NoAlter),
            other => Err(Error::Config(format!("unknown ablation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Recommender,
    Tokenizer,
}

/// Epoch means; fields that do not apply to the phase are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub cycle: usize,
    pub epoch: usize,
    pub token_loss: Option<f64>,
    pub reconstruction: Option<f64>,
    pub rec_loss: Option<f64>,
    pub soda_loss: Option<f64>,
    pub combined: Option<f64>,
}

/// One recommender update; losses are batch means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub cycle: usize,
    pub epoch: usize,
    pub step: usize,
    pub batch: usize,
    pub rec_loss: f64,
    pub soda_loss: f64,
    /// `λ · soda_loss`, the amount added to the objective.
    pub soda_contribution: f64,
    pub combined: f64,
}

/// Checksums of the parameters that must stay fixed during a phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeCheck {
    pub cycle: usize,
    pub phase: Phase,
    pub before: String,
    pub after: String,
}

impl FreezeCheck {
    pub fn holds(&self) -> bool {
        self.before == self.after
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub ablation: Ablation,
    pub seed: u64,
    pub config_digest: String,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
    pub freeze_checks: Vec<FreezeCheck>,
    pub id_refreshes: usize,
    /// Items whose semantic ID differs between pretraining and the end of training.
    pub ids_changed: usize,
    pub validation: MetricsReport,
    pub test: MetricsReport,
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &RunReport) -> bool {
        let strip = |r: &RunReport| RunReport {
            wall_clock_secs: 0.0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad run report: {e}")))
    }

    /// Loss curves and metric tables as plain text.
    pub fn render(&self) -> String {
        let mut out = format!(
            "run: ablation={} seed={} config={} wall_clock={:.1}s\n\n",
            self.ablation, self.seed, self.config_digest, self.wall_clock_secs
        );
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.5}"));
        let _ = writeln!(
            out,
            "{:<12} {:>5} {:>5} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "phase", "cycle", "epoch", "L_token", "recon", "L_rec", "L_SODA", "combined"
        );
        for e in &self.epochs {
            let phase = match e.phase {
                Phase::Pretrain => "pretrain",
                Phase::Recommender => "recommender",
                Phase::Tokenizer => "tokenizer",
            };
            let _ = writeln!(
                out,
                "{:<12} {:>5} {:>5} {:>10} {:>10} {:>10} {:>10} {:>10}",
                phase,
                e.cycle,
                e.epoch,
                cell(e.token_loss),
                cell(e.reconstruction),
                cell(e.rec_loss),
                cell(e.soda_loss),
                cell(e.combined)
            );
        }
        out.push_str("\nvalidation\n");
        out.push_str(&self.validation.table());
        out.push_str("\ntest\n");
        out.push_str(&self.test.table());
        out
    }
}

/// One training pair with its history already tokenized.
#[derive(Debug, Clone, PartialEq)]
pub struct RecExample {
    pub history: TokenizedSequence,
    pub target_tokens: Vec<usize>,
    pub target_item: usize,
}

pub fn make_examples(
    sequences: &[UserSequence],
    id_map: &[CodeSequence],
    vocab: &VocabLayout,
    max_items: usize,
) -> Result<Vec<RecExample>> {
    sequences
        .iter()
        .map(|s| {
            let seq = id_map
                .get(s.target)
                .ok_or_else(|| Error::UnknownItem(format!("#{}", s.target)))?;
            Ok(RecExample {
                history: tokenize_history(&s.history, id_map, vocab, max_items)?,
                target_tokens: vocab.item_tokens(seq)?,
                target_item: s.target,
            })
        })
        .collect()
}

/// Soft distributions of every item under the current tokenizer.
pub fn target_distributions(
    tokenizer: &Tokenizer,
    embeddings: &Matrix,
    tau: f64,
) -> Result<Vec<DistributionalRepresentation>> {
    let latents = tokenizer.encode_batch(embeddings)?;
    let books = tokenizer.codebooks();
    (0..latents.rows())
        .map(|i| {
            let (_, trace) = quantize_hard(latents.row(i), &books)?;
            quantize_soft(&trace, &books, tau)
        })
        .collect()
}

/// Alignment inputs for a recommender step; the codebooks act as constants.
#[derive(Debug, Clone, Copy)]
pub struct SodaBatch<'a> {
    pub books: &'a CodebookSet,
    /// Indexed by item.
    pub targets: &'a [DistributionalRepresentation],
    pub objective: Objective,
    pub config: SodaConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub rec_loss: f64,
    pub soda_loss: f64,
    pub soda_contribution: f64,
    pub combined: f64,
}

/// Value and gradient (w.r.t. the stacked history embeddings) of the summed
/// alignment loss of a batch.
pub fn soda_batch_gradient(history: &Matrix, items: &[usize], soda: &SodaBatch) -> (f64, Matrix) {
    let empty = ParamStore::new();
    let mut tape = Tape::new(&empty);
    let h = tape.input(history.clone());
    let books: Vec<Var> = soda
        .books
        .layers()
        .iter()
        .map(|m| tape.constant(m.clone()))
        .collect();
    let hist = TokenizerNet::soft_quantize_graph(&mut tape, h, &books, soda.config.tau);
    let targets: Vec<&DistributionalRepresentation> = items.iter().map(|&i| &soda.targets[i]).collect();
    let targets: Vec<Var> = stack_layers(&targets)
        .into_iter()
        .map(|m| tape.constant(m))
        .collect();
    let loss = batch_loss_graph(&mut tape, &hist, &targets, soda.objective, &soda.config);
    let value = tape.scalar(loss);
    let grad = tape
        .backward(loss)
        .wrt(h)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(history.rows(), history.cols()));
    (value, grad)
}

/// One Adam update of the recommender on `rec + λ · soda` averaged over the batch.
///
/// With `soda == None` the alignment term is absent and logged as exactly zero.
pub fn recommender_step(
    model: &mut Recommender,
    adam: &mut Adam,
    batch: &[&RecExample],
    soda: Option<&SodaBatch>,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let soda = soda.filter(|s| b >= 2 || s.objective == Objective::Pointwise);
    let n_params = model.params().len();
    let (net, params) = model.parts_mut();
    let mut grads = GradAccumulator::new(n_params);
    let losses;
    {
        let mut tapes = Vec::with_capacity(b);
        let mut rec_vars = Vec::with_capacity(b);
        let mut h_vars = Vec::with_capacity(b);
        for ex in batch {
            let tokens = ex.history.valid_tokens();
            if tokens.is_empty() {
                return Err(Error::Degenerate("training history has no valid tokens".into()));
            }
            let mut tape = Tape::new(params);
            let enc = net.encode_graph(&mut tape, &tokens, Some(&mut *rng));
            let mem = net.memory(&mut tape, enc);
            rec_vars.push(net.rec_loss_graph(&mut tape, &mem, &ex.target_tokens, Some(&mut *rng)));
            if soda.is_some() {
                let pooled = net.pool_graph(&mut tape, enc);
                h_vars.push(net.project_graph(&mut tape, pooled));
            }
            tapes.push(tape);
        }
        let rec_sum: f64 = tapes.iter().zip(&rec_vars).map(|(t, &v)| t.scalar(v)).sum();
        let rec_loss = rec_sum / b as f64;
        let (soda_loss, lambda, soda_grad) = match soda {
            Some(s) => {
                let rows: Vec<Vec<f64>> = tapes
                    .iter()
                    .zip(&h_vars)
                    .map(|(t, &h)| t.value(h).data().to_vec())
                    .collect();
                let items: Vec<usize> = batch.iter().map(|e| e.target_item).collect();
                let (sum, grad) = soda_batch_gradient(&Matrix::from_rows(&rows), &items, s);
                (sum / b as f64, s.config.lambda, Some(grad))
            }
            None => (0.0, 0.0, None),
        };
        let soda_contribution = lambda * soda_loss;
        let combined = rec_loss + soda_contribution;
        if !combined.is_finite() || !soda_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "recommender loss (rec {rec_loss}, soda {soda_loss})"
            )));
        }
        for (i, tape) in tapes.iter().enumerate() {
            let mut seeds = vec![(rec_vars[i], Matrix::filled(1, 1, 1.0 / b as f64))];
            if let Some(g) = &soda_grad {
                let row = g.row(i).iter().map(|v| v * lambda / b as f64).collect();
                seeds.push((h_vars[i], Matrix::row_vector(row)));
            }
            grads.add(tape.backward_from(&seeds));
        }
        losses = StepLosses {
            rec_loss,
            soda_loss,
            soda_contribution,
            combined,
        };
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("recommender gradient".into()));
    }
    adam.step(params, &grads.into_vec(), 1.0);
    Ok(losses)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenizerLosses {
    pub total: f64,
    pub reconstruction: f64,
}

/// One Adam update of every tokenizer parameter on a batch of item embeddings.
pub fn tokenizer_step(tokenizer: &mut Tokenizer, adam: &mut Adam, batch: &Matrix) -> Result<TokenizerLosses> {
    let (net, params) = tokenizer.parts_mut();
    let (grads, losses) = {
        let mut tape = Tape::new(params);
        let terms = net.loss_graph(&mut tape, batch);
        let losses = TokenizerLosses {
            total: tape.scalar(terms.total),
            reconstruction: tape.scalar(terms.reconstruction),
        };
        if !losses.total.is_finite() {
            return Err(Error::NonFinite(format!("tokenizer loss {}", losses.total)));
        }
        (tape.backward(terms.total).into_params(), losses)
    };
    adam.step(params, &grads, 1.0);
    Ok(losses)
}

/// Shuffled index batches; a trailing singleton joins the previous batch.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() == 1) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

fn gather(m: &Matrix, rows: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(rows.len(), m.cols());
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.row(r));
    }
    out
}

fn tokenizer_epoch(
    tokenizer: &mut Tokenizer,
    adam: &mut Adam,
    embeddings: &Matrix,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TokenizerLosses> {
    let batches = shuffled_batches(embeddings.rows(), batch_size, rng);
    let (mut total, mut recon) = (0.0, 0.0);
    for rows in &batches {
        let l = tokenizer_step(tokenizer, adam, &gather(embeddings, rows))?;
        total += l.total;
        recon += l.reconstruction;
    }
    let n = batches.len() as f64;
    Ok(TokenizerLosses {
        total: total / n,
        reconstruction: recon / n,
    })
}

/// K-means codebook initialization followed by `epochs` of mini-batch Adam
/// on the tokenizer loss. Returns one log entry per epoch.
pub fn pretrain_tokenizer(
    tokenizer: &mut Tokenizer,
    embeddings: &Matrix,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    tokenizer.init_codebooks_from(embeddings)?;
    let mut adam = Adam::new(tokenizer.params(), lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logs = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let l = tokenizer_epoch(tokenizer, &mut adam, embeddings, batch_size, &mut rng)?;
        debug!("pretrain epoch {epoch}: loss {:.6} recon {:.6}", l.total, l.reconstruction);
        logs.push(EpochLog {
            phase: Phase::Pretrain,
            cycle: 0,
            epoch,
            token_loss: Some(l.total),
            reconstruction: Some(l.reconstruction),
            rec_loss: None,
            soda_loss: None,
            combined: None,
        });
    }
    Ok(logs)
}

/// Result of alternating training.
#[derive(Debug, Clone)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
    pub freeze_checks: Vec<FreezeCheck>,
    pub id_refreshes: usize,
    pub initial_ids: Vec<CodeSequence>,
    pub final_ids: Vec<CodeSequence>,
}

/// Cycles of recommender epochs (tokenizer frozen) and tokenizer epochs
/// (recommender frozen), refreshing semantic IDs after each tokenizer phase.
/// The last cycle ends after its recommender phase so the returned
/// recommender is trained on the returned IDs.
pub fn train_alternating(
    tokenizer: &mut Tokenizer,
    recommender: &mut Recommender,
    data: &PreparedData,
    config: &TrainConfig,
    ablation: Ablation,
) -> Result<TrainLog> {
    if data.split.train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let vocab = *recommender.vocab();
    let max_items = recommender.config().max_items;
    let batch_size = config.optimizer.batch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut rec_adam = Adam::new(recommender.params(), config.optimizer.recommender_lr);
    let mut tok_adam = Adam::new(tokenizer.params(), config.optimizer.tokenizer_lr);
    let soda_config = match ablation {
        Ablation::NoLoss => SodaConfig {
            lambda: 0.0,
            ..config.soda
        },
        _ => config.soda,
    };

    let initial_ids = assign_semantic_ids(tokenizer, &data.embeddings)?;
    let mut ids = initial_ids.clone();
    let mut log = TrainLog {
        epochs: Vec::new(),
        steps: Vec::new(),
        freeze_checks: Vec::new(),
        id_refreshes: 0,
        initial_ids,
        final_ids: Vec::new(),
    };
    let cycles = config.schedule.cycles.max(1);
    for cycle in 0..cycles {
        // recommender phase
        let examples = make_examples(&data.split.train, &ids, &vocab, max_items)?;
        let books = tokenizer.codebooks();
        let targets = match ablation.objective() {
            Some(_) => target_distributions(tokenizer, &data.embeddings, soda_config.tau)?,
            None => Vec::new(),
        };
        let soda = ablation.objective().map(|objective| SodaBatch {
            books: &books,
            targets: &targets,
            objective,
            config: soda_config,
        });
        let frozen_before = tokenizer.params().checksum();
        for epoch in 0..config.schedule.recommender_epochs {
            let batches = shuffled_batches(examples.len(), batch_size, &mut rng);
            let (mut rec, mut sl, mut comb) = (0.0, 0.0, 0.0);
            for (step, rows) in batches.iter().enumerate() {
                let batch: Vec<&RecExample> = rows.iter().map(|&i| &examples[i]).collect();
                let l = recommender_step(recommender, &mut rec_adam, &batch, soda.as_ref(), &mut rng)?;
                rec += l.rec_loss;
                sl += l.soda_loss;
                comb += l.combined;
                log.steps.push(StepLog {
                    cycle,
                    epoch,
                    step,
                    batch: rows.len(),
                    rec_loss: l.rec_loss,
                    soda_loss: l.soda_loss,
                    soda_contribution: l.soda_contribution,
                    combined: l.combined,
                });
            }
            let n = batches.len() as f64;
            info!(
                "cycle {cycle} recommender epoch {epoch}: rec {:.5} soda {:.5} combined {:.5}",
                rec / n,
                sl / n,
                comb / n
            );
            log.epochs.push(EpochLog {
                phase: Phase::Recommender,
                cycle,
                epoch,
                token_loss: None,
                reconstruction: None,
                rec_loss: Some(rec / n),
                soda_loss: Some(sl / n),
                combined: Some(comb / n),
            });
        }
        log.freeze_checks.push(FreezeCheck {
            cycle,
            phase: Phase::Recommender,
            before: frozen_before,
            after: tokenizer.params().checksum(),
        });

        if !ablation.alternates() || cycle + 1 == cycles {
            continue;
        }
        // tokenizer phase
        let frozen_before = recommender.params().checksum();
        for epoch in 0..config.schedule.tokenizer_epochs {
            let l = tokenizer_epoch(tokenizer, &mut tok_adam, &data.embeddings, batch_size, &mut rng)?;
            info!("cycle {cycle} tokenizer epoch {epoch}: loss {:.5}", l.total);
            log.epochs.push(EpochLog {
                phase: Phase::Tokenizer,
                cycle,
                epoch,
                token_loss: Some(l.total),
                reconstruction: Some(l.reconstruction),
                rec_loss: None,
                soda_loss: None,
                combined: None,
            });
        }
        log.freeze_checks.push(FreezeCheck {
            cycle,
            phase: Phase::Tokenizer,
            before: frozen_before,
            after: recommender.params().checksum(),
        });
        ids = assign_semantic_ids(tokenizer, &data.embeddings)?;
        log.id_refreshes += 1;
    }
    log.final_ids = ids;
    Ok(log)
}

/// Trained models and the IDs the recommender was trained on.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub config: TrainConfig,
    pub tokenizer: Tokenizer,
    pub recommender: Recommender,
    pub catalog: Catalog,
    pub ids: Vec<CodeSequence>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub artifacts: Artifacts,
    pub report: RunReport,
}

pub fn build_models(config: &TrainConfig) -> Result<(Tokenizer, Recommender)> {
    let tokenizer = Tokenizer::new(config.tokenizer.clone())?;
    let vocab = VocabLayout::new(
        config.tokenizer.layers,
        config.tokenizer.codebook_size,
        config.model.disambiguation_capacity,
    );
    let recommender = Recommender::new(config.model.clone(), vocab, config.tokenizer.code_dim)?;
    Ok((tokenizer, recommender))
}

/// Pretrains the tokenizer on prepared data (the `tokenize` stage).
pub fn tokenize_stage(config: &TrainConfig, data: &PreparedData) -> Result<(Tokenizer, Vec<EpochLog>)> {
    let config = config.resolved(data.embeddings.cols());
    config.validate()?;
    let mut tokenizer = Tokenizer::new(config.tokenizer.clone())?;
    let logs = pretrain_tokenizer(
        &mut tokenizer,
        &data.embeddings,
        config.optimizer.pretrain_epochs,
        config.optimizer.batch_size,
        config.optimizer.tokenizer_lr,
        config.seed.wrapping_add(3),
    )?;
    Ok((tokenizer, logs))
}

/// Full run: prepare, pretrain, alternate, round to checkpoint precision,
/// evaluate on validation and test.
pub fn run(config: &TrainConfig, corpus: &Corpus, ablation: Ablation) -> Result<RunOutput> {
    let start = Instant::now();
    let data = prepare(corpus, config.data.k_core, config.data.max_len)?;
    run_prepared(config, &data, ablation, start)
}

pub fn run_prepared(config: &TrainConfig, data: &PreparedData, ablation: Ablation, start: Instant) -> Result<RunOutput> {
    let config = config.resolved(data.embeddings.cols());
    config.validate()?;
    let (mut tokenizer, pre_logs) = tokenize_stage(&config, data)?;
    let (_, mut recommender) = build_models(&config)?;
    let log = train_alternating(&mut tokenizer, &mut recommender, data, &config, ablation)?;
    round_to_f32(tokenizer.params_mut());
    round_to_f32(recommender.params_mut());
    let digest = config.digest();
    let validation = evaluate(&recommender, &log.final_ids, &data.split.validation, &config.eval.ks, config.eval.beam)?
        .with_metadata(config.seed, &digest);
    let test = evaluate(&recommender, &log.final_ids, &data.split.test, &config.eval.ks, config.eval.beam)?
        .with_metadata(config.seed, &digest);
    let ids_changed = log
        .initial_ids
        .iter()
        .zip(&log.final_ids)
        .filter(|(a, b)| a != b)
        .count();
    let mut epochs = pre_logs;
    epochs.extend(log.epochs);
    let report = RunReport {
        ablation,
        seed: config.seed,
        config_digest: digest,
        epochs,
        steps: log.steps,
        freeze_checks: log.freeze_checks,
        id_refreshes: log.id_refreshes,
        ids_changed,
        validation,
        test,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutput {
        artifacts: Artifacts {
            config,
            tokenizer,
            recommender,
            catalog: data.catalog.clone(),
            ids: log.final_ids,
        },
        report,
    })
}

pub const CONFIG_FILE: &str = "config.toml";
pub const TOKENIZER_FILE: &str = "tokenizer.ckpt";
pub const CODEBOOK_FILE: &str = "codebooks.bin";
pub const RECOMMENDER_FILE: &str = "recommender.ckpt";
pub const SEMANTIC_ID_FILE: &str = "semantic_ids.tsv";
pub const REPORT_FILE: &str = "report.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const VALIDATION_METRICS_FILE: &str = "metrics_validation.jsonl";
pub const TEST_METRICS_FILE: &str = "metrics_test.jsonl";

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the tokenizer checkpoint, codebooks and semantic-ID table.
pub fn write_tokenizer_artifacts(
    dir: &Path,
    config: &TrainConfig,
    tokenizer: &Tokenizer,
    catalog: &Catalog,
    ids: &[CodeSequence],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join(CONFIG_FILE), &config.to_toml())?;
    write_params(dir.join(TOKENIZER_FILE), tokenizer.params())?;
    write_codebooks(dir.join(CODEBOOK_FILE), &tokenizer.codebooks())?;
    write_semantic_ids(dir.join(SEMANTIC_ID_FILE), catalog.ids(), ids)
}

pub fn write_run(dir: impl AsRef<Path>, output: &RunOutput) -> Result<()> {
    let dir = dir.as_ref();
    let a = &output.artifacts;
    write_tokenizer_artifacts(dir, &a.config, &a.tokenizer, &a.catalog, &a.ids)?;
    write_params(dir.join(RECOMMENDER_FILE), a.recommender.params())?;
    write_text(&dir.join(REPORT_FILE), &output.report.to_json())?;
    output.report.validation.write(dir.join(VALIDATION_METRICS_FILE))?;
    output.report.test.write(dir.join(TEST_METRICS_FILE))?;
    let mut lines = String::new();
    for s in &output.report.steps {
        lines.push_str(&serde_json::to_string(s).expect("step logs serialize"));
        lines.push('\n');
    }
    write_text(&dir.join(TRAIN_LOG_FILE), &lines)
}

/// Semantic IDs from a run directory, reordered to `catalog`.
pub fn load_ids(dir: &Path, catalog: &Catalog) -> Result<Vec<CodeSequence>> {
    let rows = read_semantic_ids(dir.join(SEMANTIC_ID_FILE))?;
    let mut ids: Vec<Option<CodeSequence>> = vec![None; catalog.len()];
    for (item, seq) in rows {
        if let Some(i) = catalog.index(&item) {
            ids[i] = Some(seq);
        }
    }
    ids.into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| Error::UnknownItem(catalog.id(i).to_string())))
        .collect()
}

/// Rebuilds the trained models of a run directory.
pub fn load_run(dir: impl AsRef<Path>, catalog: &Catalog) -> Result<Artifacts> {
    let dir = dir.as_ref();
    let config = TrainConfig::load(dir.join(CONFIG_FILE))?;
    let (mut tokenizer, mut recommender) = build_models(&config)?;
    read_params_into(dir.join(TOKENIZER_FILE), tokenizer.params_mut())?;
    read_params_into(dir.join(RECOMMENDER_FILE), recommender.params_mut())?;
    let ids = load_ids(dir, catalog)?;
    Ok(Artifacts {
        config,
        tokenizer,
        recommender,
        catalog: catalog.clone(),
        ids,
    })
}
