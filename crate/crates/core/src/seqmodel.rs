//! Encoder–decoder transformer over the semantic-ID vocabulary.
//!
//! The encoder reads the concatenated semantic IDs of a user's history; the
//! decoder generates the `L + 1` tokens of the next item. The mean-pooled
//! encoder states, projected by a small MLP, live in the tokenizer's code
//! space and feed the distribution alignment loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{check_dim, Error, Result};
use crate::nn::{dropout, Attention, FeedForward, KeyValue, LayerNorm, Linear, Mlp};
use crate::quantizer::CodeSequence;
use crate::tensor::{log_softmax, Matrix};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: usize = 3;

/// Global token ids: specials, then one block of `K` ids per codebook layer,
/// then the disambiguation block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub layers: usize,
    pub codebook_size: usize,
    pub disambiguation_capacity: usize,
}

impl VocabLayout {
    pub fn new(layers: usize, codebook_size: usize, disambiguation_capacity: usize) -> Self {
        VocabLayout {
            layers,
            codebook_size,
            disambiguation_capacity,
        }
    }

    pub fn size(&self) -> usize {
        SPECIALS + self.layers * self.codebook_size + self.disambiguation_capacity
    }

    /// Tokens per item.
    pub fn item_len(&self) -> usize {
        self.layers + 1
    }

    pub fn code_token(&self, layer: usize, code: usize) -> usize {
        debug_assert!(layer < self.layers && code < self.codebook_size);
        SPECIALS + layer * self.codebook_size + code
    }

    pub fn disambiguation_token(&self, t: usize) -> usize {
        debug_assert!(t < self.disambiguation_capacity);
        SPECIALS + self.layers * self.codebook_size + t
    }

    pub fn item_tokens(&self, seq: &CodeSequence) -> Result<Vec<usize>> {
        check_dim("code sequence", self.layers, seq.codes.len())?;
        let mut out = Vec::with_capacity(self.item_len());
        for (l, &c) in seq.codes.iter().enumerate() {
            if c >= self.codebook_size {
                return Err(Error::CodeOutOfRange {
                    layer: l,
                    index: c,
                    k: self.codebook_size,
                });
            }
            out.push(self.code_token(l, c));
        }
        if seq.disambiguation >= self.disambiguation_capacity {
            return Err(Error::Config(format!(
                "disambiguation token {} exceeds capacity {}",
                seq.disambiguation, self.disambiguation_capacity
            )));
        }
        out.push(self.disambiguation_token(seq.disambiguation));
        Ok(out)
    }
}

/// Fixed-capacity token buffer with a validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSequence {
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenizedSequence {
    pub fn valid_tokens(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect()
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Concatenates the semantic IDs of `items` (item indices, oldest first),
/// keeping the most recent `max_items`, then pads to `max_items × (L + 1)`.
pub fn tokenize_history(
    items: &[usize],
    id_map: &[CodeSequence],
    vocab: &VocabLayout,
    max_items: usize,
) -> Result<TokenizedSequence> {
    let capacity = max_items * vocab.item_len();
    let start = items.len().saturating_sub(max_items);
    let mut tokens = Vec::with_capacity(capacity);
    for &item in &items[start..] {
        let seq = id_map
            .get(item)
            .ok_or_else(|| Error::UnknownItem(format!("#{item}")))?;
        tokens.extend(vocab.item_tokens(seq)?);
    }
    let valid = tokens.len();
    tokens.resize(capacity, PAD);
    let mask = (0..capacity).map(|i| i < valid).collect();
    Ok(TokenizedSequence { tokens, mask })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    /// History capacity in items.
    pub max_items: usize,
    /// Size of the disambiguation token block.
    pub disambiguation_capacity: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ff_dim: 256,
            dropout: 0.0,
            max_items: 20,
            disambiguation_capacity: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if self.max_items == 0 || self.disambiguation_capacity == 0 {
            return Err(Error::Config("capacities must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    attn_norm: LayerNorm,
    attn: Attention,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    self_norm: LayerNorm,
    self_attn: Attention,
    cross_norm: LayerNorm,
    cross_attn: Attention,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

/// Parameter layout of a [`Recommender`].
#[derive(Debug, Clone)]
pub struct RecommenderNet {
    config: ModelConfig,
    vocab: VocabLayout,
    code_dim: usize,
    token_embedding: ParamId,
    encoder_positions: ParamId,
    decoder_positions: ParamId,
    encoder: Vec<EncoderBlock>,
    encoder_norm: LayerNorm,
    decoder: Vec<DecoderBlock>,
    decoder_norm: LayerNorm,
    lm_head: Linear,
    projection: Mlp,
}

/// Cross-attention keys and values of one encoded history, per decoder block.
#[derive(Debug, Clone)]
pub struct Memory(Vec<KeyValue>);

type DynRng<'a> = Option<&'a mut ChaCha8Rng>;

impl RecommenderNet {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &VocabLayout {
        &self.vocab
    }

    pub fn code_dim(&self) -> usize {
        self.code_dim
    }

    pub fn lm_head(&self) -> &Linear {
        &self.lm_head
    }

    pub fn projection(&self) -> &Mlp {
        &self.projection
    }

    /// Contextual states (`T × d_model`) of the non-empty token list `tokens`.
    pub fn encode_graph(&self, tape: &mut Tape, tokens: &[usize], mut rng: DynRng) -> Var {
        assert!(!tokens.is_empty(), "cannot encode an empty history");
        let p = self.config.dropout;
        let emb = tape.param(self.token_embedding);
        let pos_table = tape.param(self.encoder_positions);
        let tok = tape.gather_rows(emb, tokens);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = tape.gather_rows(pos_table, &positions);
        let mut x = tape.add(tok, pos);
        for block in &self.encoder {
            let h = block.attn_norm.forward(tape, x);
            let kv = block.attn.key_value(tape, h);
            let a = block.attn.forward(tape, h, kv, false);
            let a = dropout(tape, a, p, rng.as_deref_mut());
            x = tape.add(x, a);
            let h = block.ff_norm.forward(tape, x);
            let f = block.ff.forward(tape, h);
            let f = dropout(tape, f, p, rng.as_deref_mut());
            x = tape.add(x, f);
        }
        self.encoder_norm.forward(tape, x)
    }

    pub fn memory(&self, tape: &mut Tape, encoded: Var) -> Memory {
        Memory(
            self.decoder
                .iter()
                .map(|b| b.cross_attn.key_value(tape, encoded))
                .collect(),
        )
    }

    /// Vocabulary logits for every position of the decoder input `inputs`.
    pub fn decode_graph(
        &self,
        tape: &mut Tape,
        memory: &Memory,
        inputs: &[usize],
        mut rng: DynRng,
    ) -> Var {
        let p = self.config.dropout;
        let emb = tape.param(self.token_embedding);
        let pos_table = tape.param(self.decoder_positions);
        let tok = tape.gather_rows(emb, inputs);
        let positions: Vec<usize> = (0..inputs.len()).collect();
        let pos = tape.gather_rows(pos_table, &positions);
        let mut x = tape.add(tok, pos);
        for (block, kv) in self.decoder.iter().zip(&memory.0) {
            let h = block.self_norm.forward(tape, x);
            let self_kv = block.self_attn.key_value(tape, h);
            let a = block.self_attn.forward(tape, h, self_kv, true);
            let a = dropout(tape, a, p, rng.as_deref_mut());
            x = tape.add(x, a);
            let h = block.cross_norm.forward(tape, x);
            let c = block.cross_attn.forward(tape, h, *kv, false);
            let c = dropout(tape, c, p, rng.as_deref_mut());
            x = tape.add(x, c);
            let h = block.ff_norm.forward(tape, x);
            let f = block.ff.forward(tape, h);
            let f = dropout(tape, f, p, rng.as_deref_mut());
            x = tape.add(x, f);
        }
        let x = self.decoder_norm.forward(tape, x);
        self.lm_head.forward(tape, x)
    }

    /// Summed negative log-likelihood of `targets` under teacher forcing.
    pub fn rec_loss_graph(&self, tape: &mut Tape, memory: &Memory, targets: &[usize], rng: DynRng) -> Var {
        let inputs = decoder_inputs(targets);
        let logits = self.decode_graph(tape, memory, &inputs, rng);
        tape.cross_entropy(logits, targets)
    }

    pub fn pool_graph(&self, tape: &mut Tape, encoded: Var) -> Var {
        tape.mean_rows(encoded)
    }

    pub fn project_graph(&self, tape: &mut Tape, pooled: Var) -> Var {
        self.projection.forward(tape, pooled)
    }
}

/// `[BOS, y_1, …, y_{n-1}]` for targets `[y_1, …, y_n]`.
pub fn decoder_inputs(targets: &[usize]) -> Vec<usize> {
    std::iter::once(BOS)
        .chain(targets[..targets.len().saturating_sub(1)].iter().copied())
        .collect()
}

#[derive(Debug, Clone)]
pub struct Recommender {
    net: RecommenderNet,
    params: ParamStore,
}

impl Recommender {
    pub fn new(config: ModelConfig, vocab: VocabLayout, code_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let d = config.d_model;
        let emb_std = 1.0 / (d as f64).sqrt();
        let token_embedding = params.add(
            "rec.token_embedding",
            Matrix::random_normal(vocab.size(), d, emb_std, &mut rng),
        );
        let encoder_positions = params.add(
            "rec.encoder_positions",
            Matrix::random_normal(config.max_items * vocab.item_len(), d, emb_std, &mut rng),
        );
        let decoder_positions = params.add(
            "rec.decoder_positions",
            Matrix::random_normal(vocab.item_len(), d, emb_std, &mut rng),
        );
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                let name = format!("rec.encoder.{i}");
                EncoderBlock {
                    attn_norm: LayerNorm::new(&mut params, &format!("{name}.attn_norm"), d),
                    attn: Attention::new(&mut params, &format!("{name}.attn"), d, config.heads, &mut rng),
                    ff_norm: LayerNorm::new(&mut params, &format!("{name}.ff_norm"), d),
                    ff: FeedForward::new(&mut params, &format!("{name}.ff"), d, config.ff_dim, &mut rng),
                }
            })
            .collect();
        let encoder_norm = LayerNorm::new(&mut params, "rec.encoder_norm", d);
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                let name = format!("rec.decoder.{i}");
                DecoderBlock {
                    self_norm: LayerNorm::new(&mut params, &format!("{name}.self_norm"), d),
                    self_attn: Attention::new(&mut params, &format!("{name}.self_attn"), d, config.heads, &mut rng),
                    cross_norm: LayerNorm::new(&mut params, &format!("{name}.cross_norm"), d),
                    cross_attn: Attention::new(&mut params, &format!("{name}.cross_attn"), d, config.heads, &mut rng),
                    ff_norm: LayerNorm::new(&mut params, &format!("{name}.ff_norm"), d),
                    ff: FeedForward::new(&mut params, &format!("{name}.ff"), d, config.ff_dim, &mut rng),
                }
            })
            .collect();
        let decoder_norm = LayerNorm::new(&mut params, "rec.decoder_norm", d);
        let lm_head = Linear::new(&mut params, "rec.lm_head", d, vocab.size(), false, &mut rng);
        let projection = Mlp::new(&mut params, "rec.projection", &[d, d, code_dim], &mut rng);
        Ok(Recommender {
            net: RecommenderNet {
                config,
                vocab,
                code_dim,
                token_embedding,
                encoder_positions,
                decoder_positions,
                encoder,
                encoder_norm,
                decoder,
                decoder_norm,
                lm_head,
                projection,
            },
            params,
        })
    }

    pub fn net(&self) -> &RecommenderNet {
        &self.net
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn vocab(&self) -> &VocabLayout {
        &self.net.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parts_mut(&mut self) -> (&RecommenderNet, &mut ParamStore) {
        (&self.net, &mut self.params)
    }

    /// Encoder states at the valid positions of `history`; `0 × d_model` when
    /// the history is empty.
    pub fn encode_history(&self, history: &TokenizedSequence) -> Matrix {
        let tokens = history.valid_tokens();
        if tokens.is_empty() {
            return Matrix::zeros(0, self.net.config.d_model);
        }
        let mut tape = Tape::new(&self.params);
        let enc = self.net.encode_graph(&mut tape, &tokens, None);
        tape.value(enc).clone()
    }

    fn check_history(history: &TokenizedSequence) -> Result<Vec<usize>> {
        let tokens = history.valid_tokens();
        if tokens.is_empty() {
            return Err(Error::Degenerate("history has no valid tokens".into()));
        }
        Ok(tokens)
    }

    /// `−Σ log P(y_l | X, y_<l)` over all target tokens.
    pub fn rec_loss(&self, history: &TokenizedSequence, targets: &[usize]) -> Result<f64> {
        if targets.is_empty() {
            return Err(Error::Degenerate("empty target sequence".into()));
        }
        let tokens = Self::check_history(history)?;
        let mut tape = Tape::new(&self.params);
        let enc = self.net.encode_graph(&mut tape, &tokens, None);
        let mem = self.net.memory(&mut tape, enc);
        let loss = self.net.rec_loss_graph(&mut tape, &mem, targets, None);
        Ok(tape.scalar(loss))
    }

    /// Mean of the encoder states at masked-in rows.
    pub fn pool_history(reps: &Matrix, mask: &[bool]) -> Result<Vec<f64>> {
        check_dim("pooling mask", reps.rows(), mask.len())?;
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Degenerate("cannot pool an all-padding history".into()));
        }
        let mut out = vec![0.0; reps.cols()];
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for (o, v) in out.iter_mut().zip(reps.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= count as f64);
        Ok(out)
    }

    pub fn project_to_codespace(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        check_dim("pooled representation", self.net.config.d_model, pooled.len())?;
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(Matrix::row_vector(pooled.to_vec()));
        let r = self.net.project_graph(&mut tape, x);
        Ok(tape.value(r).clone().into_vec())
    }

    /// Projected history embedding `MLP(AvgPool(E(X)))`.
    pub fn history_embedding(&self, history: &TokenizedSequence) -> Result<Vec<f64>> {
        let tokens = Self::check_history(history)?;
        let mut tape = Tape::new(&self.params);
        let enc = self.net.encode_graph(&mut tape, &tokens, None);
        let pooled = self.net.pool_graph(&mut tape, enc);
        let r = self.net.project_graph(&mut tape, pooled);
        Ok(tape.value(r).clone().into_vec())
    }

    pub fn next_token_logits(&self, history: &TokenizedSequence, prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.len() > self.net.vocab.item_len() {
            return Err(Error::Config(format!(
                "prefix of length {} exceeds item length {}",
                prefix.len(),
                self.net.vocab.item_len()
            )));
        }
        let mut session = self.session(history)?;
        Ok(session.next_logits(prefix))
    }

    /// Encodes `history` once for repeated decoding steps.
    pub fn session(&self, history: &TokenizedSequence) -> Result<DecodingSession<'_>> {
        let tokens = Self::check_history(history)?;
        let mut tape = Tape::new(&self.params);
        let enc = self.net.encode_graph(&mut tape, &tokens, None);
        let memory = self.net.memory(&mut tape, enc);
        Ok(DecodingSession {
            net: &self.net,
            tape,
            memory,
        })
    }
}

/// Inference state holding the encoded history.
pub struct DecodingSession<'a> {
    net: &'a RecommenderNet,
    tape: Tape<'a>,
    memory: Memory,
}

impl DecodingSession<'_> {
    pub fn next_logits(&mut self, prefix: &[usize]) -> Vec<f64> {
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(prefix);
        let logits = self.net.decode_graph(&mut self.tape, &self.memory, &inputs, None);
        let m = self.tape.value(logits);
        m.row(m.rows() - 1).to_vec()
    }

    pub fn next_log_probs(&mut self, prefix: &[usize]) -> Vec<f64> {
        log_softmax(&self.next_logits(prefix))
    }

    /// Sum of per-step log-probabilities of `tokens`, accumulated in order.
    pub fn sequence_log_prob(&mut self, tokens: &[usize]) -> f64 {
        let mut score = 0.0;
        for t in 0..tokens.len() {
            score += self.next_log_probs(&tokens[..t])[tokens[t]];
        }
        score
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Recommender {
        let cfg = ModelConfig {
            d_model: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ff_dim: 16,
            max_items: 4,
            disambiguation_capacity: 3,
            seed: 11,
            ..ModelConfig::default()
        };
        Recommender::new(cfg, VocabLayout::new(2, 3, 3), 4).unwrap()
    }

    fn ids() -> Vec<CodeSequence> {
        vec![
            CodeSequence {
                codes: vec![0, 1],
                disambiguation: 0,
            },
            CodeSequence {
                codes: vec![2, 2],
                disambiguation: 1,
            },
        ]
    }

    #[test]
    fn vocab_ids_are_injective() {
        let v = VocabLayout::new(3, 4, 5);
        let mut all: Vec<usize> = (0..3)
            .flat_map(|l| (0..4).map(move |k| (l, k)))
            .map(|(l, k)| v.code_token(l, k))
            .chain((0..5).map(|t| v.disambiguation_token(t)))
            .collect();
        all.extend([PAD, BOS, EOS]);
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
        assert_eq!(v.size(), n);
    }

    #[test]
    fn tokenize_shapes_and_order() {
        let v = VocabLayout::new(2, 3, 3);
        let empty = tokenize_history(&[], &ids(), &v, 4).unwrap();
        assert_eq!(empty.valid_len(), 0);
        assert!(empty.tokens.iter().all(|&t| t == PAD));
        let one = tokenize_history(&[0], &ids(), &v, 4).unwrap();
        assert_eq!(one.valid_len(), 3);
        let two = tokenize_history(&[0, 1], &ids(), &v, 4).unwrap();
        let toks = two.valid_tokens();
        assert_eq!(&toks[..3], &v.item_tokens(&ids()[0]).unwrap()[..]);
        assert_eq!(&toks[3..], &v.item_tokens(&ids()[1]).unwrap()[..]);
        assert!(matches!(
            tokenize_history(&[5], &ids(), &v, 4),
            Err(Error::UnknownItem(_))
        ));
    }

    #[test]
    fn pooling_contract() {
        let reps = Matrix::from_rows(&[vec![0.0, 2.0], vec![2.0, 0.0], vec![9.0, 9.0]]);
        assert_eq!(
            Recommender::pool_history(&reps, &[true, true, false]).unwrap(),
            vec![1.0, 1.0]
        );
        assert!(Recommender::pool_history(&reps, &[false; 3]).is_err());
    }

    #[test]
    fn encode_output_shape() {
        let rec = tiny();
        let v = *rec.vocab();
        let x = tokenize_history(&[0, 1], &ids(), &v, 4).unwrap();
        let enc = rec.encode_history(&x);
        assert_eq!(enc.shape(), (6, 8));
        assert_eq!(enc, rec.encode_history(&x));
    }

    #[test]
    fn logits_agree_with_loss() {
        let rec = tiny();
        let v = *rec.vocab();
        let x = tokenize_history(&[1, 0], &ids(), &v, 4).unwrap();
        let y = v.item_tokens(&ids()[1]).unwrap();
        let loss = rec.rec_loss(&x, &y).unwrap();
        let mut total = 0.0;
        for t in 0..y.len() {
            let logits = rec.next_token_logits(&x, &y[..t]).unwrap();
            total += log_softmax(&logits)[y[t]];
        }
        assert!((total + loss).abs() < 1e-9);
        assert!(rec.next_token_logits(&x, &[3, 3, 3, 3]).is_err());
    }
}
