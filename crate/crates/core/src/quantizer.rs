//! Residual-quantization item tokenizer.
//!
//! An item embedding is mapped by an MLP encoder into the code space,
//! quantized layer by layer against `L` codebooks of `K` codewords (each layer
//! quantizes the residual left by the previous one), and reconstructed by an
//! MLP decoder from the sum of the chosen codewords.
//!
//! Codes are 0-based indices into each codebook.

use std::collections::HashMap;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{check_dim, Error, Result};
use crate::kmeans::{kmeans, nearest};
use crate::nn::Mlp;
use crate::tensor::{squared_distance, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    /// Number of codebook layers `L`.
    pub layers: usize,
    /// Codewords per layer `K`.
    pub codebook_size: usize,
    pub code_dim: usize,
    /// Input embedding width; overwritten from the embedding table when training.
    pub input_dim: usize,
    /// Commitment weight.
    pub alpha: f64,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub kmeans_iterations: usize,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            layers: 3,
            codebook_size: 16,
            code_dim: 32,
            input_dim: 32,
            alpha: 0.25,
            encoder_hidden: vec![64],
            decoder_hidden: vec![64],
            kmeans_iterations: 100,
            seed: 0,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("tokenizer needs at least one layer".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook size must be at least 2".into()));
        }
        if self.code_dim == 0 || self.input_dim == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be non-negative".into()));
        }
        Ok(())
    }
}

/// `L` codebooks of `K` codewords each, stored as `K × d_code` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSet {
    layers: Vec<Matrix>,
}

impl CodebookSet {
    pub fn new(layers: Vec<Matrix>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Config("codebook set needs at least one layer".into()))?;
        let shape = first.shape();
        if shape.0 < 2 {
            return Err(Error::Config("codebook size must be at least 2".into()));
        }
        for layer in &layers {
            check_dim("codebook size", shape.0, layer.rows())?;
            check_dim("codeword dimension", shape.1, layer.cols())?;
            if !layer.is_finite() {
                return Err(Error::Config("codewords must be finite".into()));
            }
        }
        Ok(CodebookSet { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn code_dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn layer(&self, l: usize) -> &Matrix {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn codeword(&self, l: usize, k: usize) -> &[f64] {
        self.layers[l].row(k)
    }
}

/// Residuals `v_1..v_L` and hard codes of one quantization pass.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationTrace {
    pub residuals: Vec<Vec<f64>>,
    pub codes: Vec<usize>,
}

impl QuantizationTrace {
    /// Residual remaining after the last layer.
    pub fn final_residual(&self, books: &CodebookSet) -> Vec<f64> {
        let l = self.codes.len() - 1;
        self.residuals[l]
            .iter()
            .zip(books.codeword(l, self.codes[l]))
            .map(|(v, e)| v - e)
            .collect()
    }
}

/// Semantic ID of one item: `L` codes plus a disambiguation token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CodeSequence {
    pub codes: Vec<usize>,
    pub disambiguation: usize,
}

/// An `L × K` row-stochastic matrix of per-layer soft codeword assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionalRepresentation(Matrix);

impl DistributionalRepresentation {
    /// Wraps a matrix whose rows are probability vectors.
    pub fn new(probs: Matrix) -> Result<Self> {
        for l in 0..probs.rows() {
            let row = probs.row(l);
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!("row {l} is not a probability vector")));
            }
        }
        Ok(DistributionalRepresentation(probs))
    }

    pub(crate) fn from_matrix_unchecked(probs: Matrix) -> Self {
        DistributionalRepresentation(probs)
    }

    pub fn num_layers(&self) -> usize {
        self.0.rows()
    }

    pub fn codebook_size(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, l: usize) -> &[f64] {
        self.0.row(l)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn argmax(&self, l: usize) -> usize {
        let row = self.row(l);
        let mut best = 0;
        for (k, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = k;
            }
        }
        best
    }
}

/// Hard residual quantization: per layer the nearest codeword (lowest index
/// on ties), then subtract it.
pub fn quantize_hard(latent: &[f64], books: &CodebookSet) -> Result<(Vec<usize>, QuantizationTrace)> {
    check_dim("latent vector", books.code_dim(), latent.len())?;
    let mut residual = latent.to_vec();
    let mut residuals = Vec::with_capacity(books.num_layers());
    let mut codes = Vec::with_capacity(books.num_layers());
    for l in 0..books.num_layers() {
        let (c, _) = nearest(&residual, books.layer(l));
        let next: Vec<f64> = residual
            .iter()
            .zip(books.codeword(l, c))
            .map(|(v, e)| v - e)
            .collect();
        residuals.push(std::mem::replace(&mut residual, next));
        codes.push(c);
    }
    Ok((codes.clone(), QuantizationTrace { residuals, codes }))
}

/// Temperature softmax of negative squared distances along the hard residual chain.
pub fn quantize_soft(
    trace: &QuantizationTrace,
    books: &CodebookSet,
    tau: f64,
) -> Result<DistributionalRepresentation> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    check_dim("trace layers", books.num_layers(), trace.residuals.len())?;
    let k = books.codebook_size();
    let mut probs = Matrix::zeros(books.num_layers(), k);
    for (l, v) in trace.residuals.iter().enumerate() {
        check_dim("residual", books.code_dim(), v.len())?;
        let logits: Vec<f64> = (0..k)
            .map(|j| -squared_distance(v, books.codeword(l, j)) / tau)
            .collect();
        probs
            .row_mut(l)
            .copy_from_slice(&crate::tensor::softmax(&logits));
    }
    Ok(DistributionalRepresentation(probs))
}

/// Outcome of k-means codebook initialization.
#[derive(Debug, Clone)]
pub struct CodebookInit {
    pub books: CodebookSet,
    pub duplicate_centroids: Vec<usize>,
}

/// Layer-wise k-means over latent samples: layer 1 clusters the samples,
/// layer `l > 1` clusters the residuals after hard assignment through layers `< l`.
pub fn init_codebooks(latents: &Matrix, config: &TokenizerConfig) -> Result<CodebookInit> {
    let k = config.codebook_size;
    if latents.rows() < k {
        return Err(Error::Init(format!(
            "{} samples cannot seed {k} codewords",
            latents.rows()
        )));
    }
    check_dim("latent samples", config.code_dim, latents.cols())?;
    let mut residuals = latents.clone();
    let mut layers = Vec::with_capacity(config.layers);
    let mut duplicates = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let km = kmeans(
            &residuals,
            k,
            config.seed.wrapping_add(l as u64),
            config.kmeans_iterations,
        );
        if km.duplicate_centroids > 0 {
            warn!(
                "codebook layer {}: {} duplicate centroids (degenerate samples)",
                l + 1,
                km.duplicate_centroids
            );
        }
        for i in 0..residuals.rows() {
            let (c, _) = nearest(residuals.row(i), &km.centroids);
            let centroid = km.centroids.row(c).to_vec();
            for (r, e) in residuals.row_mut(i).iter_mut().zip(&centroid) {
                *r -= e;
            }
        }
        duplicates.push(km.duplicate_centroids);
        layers.push(km.centroids);
    }
    Ok(CodebookInit {
        books: CodebookSet::new(layers)?,
        duplicate_centroids: duplicates,
    })
}

/// Tape nodes of one tokenizer-loss evaluation (each already averaged over the batch).
#[derive(Debug, Clone, Copy)]
pub struct TokenizerLossTerms {
    pub total: Var,
    pub reconstruction: Var,
    pub codebook: Var,
    pub commitment: Var,
}

/// Parameter layout of a [`Tokenizer`], separate from the values so graphs
/// can be built against any compatible [`ParamStore`].
#[derive(Debug, Clone)]
pub struct TokenizerNet {
    config: TokenizerConfig,
    encoder: Mlp,
    decoder: Mlp,
    codebooks: Vec<ParamId>,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    net: TokenizerNet,
    params: ParamStore,
}

impl TokenizerNet {
    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn codebook_params(&self) -> &[ParamId] {
        &self.codebooks
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.encoder.params()
    }

    pub fn decoder_params(&self) -> Vec<ParamId> {
        self.decoder.params()
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn encode_graph(&self, tape: &mut Tape, batch: Var) -> Var {
        self.encoder.forward(tape, batch)
    }

    /// Per-layer codes of every row of `residual`, read from detached values
    /// so replayed tapes choose the same codewords.
    fn hard_codes(tape: &Tape, residual_sg: Var, codebook_sg: Var) -> Vec<usize> {
        let v = tape.value(residual_sg);
        let c = tape.value(codebook_sg);
        (0..v.rows()).map(|i| nearest(v.row(i), c).0).collect()
    }

    /// Batch-mean tokenizer loss with stop-gradients:
    /// `‖z̃ − z‖² + Σ_l ‖sg(v_l) − e_l‖² + α‖v_l − sg(e_l)‖²`.
    ///
    /// The decoder input is the straight-through sum `r + sg(Σ e − r)`, the
    /// residual chain subtracts detached codewords, so codewords receive
    /// gradient only from the codebook term and the encoder only from
    /// reconstruction and commitment.
    pub fn loss_graph(&self, tape: &mut Tape, batch: &Matrix) -> TokenizerLossTerms {
        let n = batch.rows() as f64;
        let x = tape.constant(batch.clone());
        let r = self.encoder.forward(tape, x);
        let mut v = r;
        let mut quantized: Option<Var> = None;
        let mut codebook_terms = Vec::with_capacity(self.codebooks.len());
        let mut commit_terms = Vec::with_capacity(self.codebooks.len());
        for &book in &self.codebooks {
            let c = tape.param(book);
            let c_sg = tape.detach(c);
            let v_sg = tape.detach(v);
            let codes = Self::hard_codes(tape, v_sg, c_sg);
            let e = tape.gather_rows(c, &codes);
            let e_sg = tape.gather_rows(c_sg, &codes);
            let d1 = tape.sub(v_sg, e);
            let d1 = tape.mul(d1, d1);
            codebook_terms.push(tape.sum_all(d1));
            let d2 = tape.sub(v, e_sg);
            let d2 = tape.mul(d2, d2);
            commit_terms.push(tape.sum_all(d2));
            v = tape.sub(v, e_sg);
            quantized = Some(match quantized {
                Some(q) => tape.add(q, e_sg),
                None => e_sg,
            });
        }
        let q = quantized.expect("at least one layer");
        let offset = tape.sub(q, r);
        let offset = tape.detach(offset);
        let decoder_input = tape.add(r, offset);
        let recon = self.decoder.forward(tape, decoder_input);
        let diff = tape.sub(recon, x);
        let sq = tape.mul(diff, diff);
        let recon_sum = tape.sum_all(sq);

        let sum_terms = |tape: &mut Tape, terms: &[Var]| {
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = tape.add(acc, t);
            }
            acc
        };
        let cb = sum_terms(tape, &codebook_terms);
        let cm = sum_terms(tape, &commit_terms);
        let reconstruction = tape.scale(recon_sum, 1.0 / n);
        let codebook = tape.scale(cb, 1.0 / n);
        let commitment = tape.scale(cm, 1.0 / n);
        let weighted = tape.scale(commitment, self.config.alpha);
        let partial = tape.add(reconstruction, codebook);
        let total = tape.add(partial, weighted);
        TokenizerLossTerms {
            total,
            reconstruction,
            codebook,
            commitment,
        }
    }

    /// Soft assignments of each row of `latent` along its hard residual chain,
    /// one `rows × K` probability matrix per layer. `codebooks` may be
    /// parameters or constants.
    pub fn soft_quantize_graph(
        tape: &mut Tape,
        latent: Var,
        codebooks: &[Var],
        tau: f64,
    ) -> Vec<Var> {
        let mut v = latent;
        let mut rows = Vec::with_capacity(codebooks.len());
        for &c in codebooks {
            let d = tape.sq_dist(v, c);
            let logits = tape.scale(d, -1.0 / tau);
            rows.push(tape.softmax_rows(logits));
            let v_sg = tape.detach(v);
            let c_sg = tape.detach(c);
            let codes = Self::hard_codes(tape, v_sg, c_sg);
            let e_sg = tape.gather_rows(c_sg, &codes);
            v = tape.sub(v, e_sg);
        }
        rows
    }
}

impl Tokenizer {
    pub fn new(config: TokenizerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let enc_widths: Vec<usize> = std::iter::once(config.input_dim)
            .chain(config.encoder_hidden.iter().copied())
            .chain(std::iter::once(config.code_dim))
            .collect();
        let dec_widths: Vec<usize> = std::iter::once(config.code_dim)
            .chain(config.decoder_hidden.iter().copied())
            .chain(std::iter::once(config.input_dim))
            .collect();
        let encoder = Mlp::new(&mut params, "tokenizer.encoder", &enc_widths, &mut rng);
        let decoder = Mlp::new(&mut params, "tokenizer.decoder", &dec_widths, &mut rng);
        let codebooks = (0..config.layers)
            .map(|l| {
                params.add(
                    format!("tokenizer.codebook.{l}"),
                    Matrix::random_normal(config.codebook_size, config.code_dim, 0.1, &mut rng),
                )
            })
            .collect();
        Ok(Tokenizer {
            net: TokenizerNet {
                config,
                encoder,
                decoder,
                codebooks,
            },
            params,
        })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.net.config
    }

    pub fn net(&self) -> &TokenizerNet {
        &self.net
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Split borrow for training loops.
    pub fn parts_mut(&mut self) -> (&TokenizerNet, &mut ParamStore) {
        (&self.net, &mut self.params)
    }

    pub fn codebooks(&self) -> CodebookSet {
        CodebookSet {
            layers: self
                .net
                .codebooks
                .iter()
                .map(|&id| self.params.get(id).clone())
                .collect(),
        }
    }

    pub fn set_codebooks(&mut self, books: &CodebookSet) -> Result<()> {
        check_dim("codebook layers", self.net.codebooks.len(), books.num_layers())?;
        check_dim("codebook size", self.config().codebook_size, books.codebook_size())?;
        check_dim("codeword dimension", self.config().code_dim, books.code_dim())?;
        for (&id, layer) in self.net.codebooks.iter().zip(books.layers()) {
            *self.params.get_mut(id) = layer.clone();
        }
        Ok(())
    }

    pub fn encode(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim("item embedding", self.config().input_dim, z.len())?;
        Ok(self.encode_batch(&Matrix::row_vector(z.to_vec()))?.into_vec())
    }

    pub fn encode_batch(&self, batch: &Matrix) -> Result<Matrix> {
        check_dim("item embedding", self.config().input_dim, batch.cols())?;
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(batch.clone());
        let r = self.net.encoder.forward(&mut tape, x);
        Ok(tape.value(r).clone())
    }

    /// Decoder applied to the sum of the selected codewords.
    pub fn decode(&self, codes: &[usize]) -> Result<Vec<f64>> {
        let books = self.codebooks();
        check_dim("code sequence", books.num_layers(), codes.len())?;
        let mut sum = vec![0.0; books.code_dim()];
        for (l, &c) in codes.iter().enumerate() {
            if c >= books.codebook_size() {
                return Err(Error::CodeOutOfRange {
                    layer: l,
                    index: c,
                    k: books.codebook_size(),
                });
            }
            for (s, e) in sum.iter_mut().zip(books.codeword(l, c)) {
                *s += e;
            }
        }
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(Matrix::row_vector(sum));
        let out = self.net.decoder.forward(&mut tape, x);
        Ok(tape.value(out).clone().into_vec())
    }

    /// Hard codes and residual trace of one item embedding.
    pub fn quantize(&self, z: &[f64]) -> Result<(Vec<usize>, QuantizationTrace)> {
        quantize_hard(&self.encode(z)?, &self.codebooks())
    }

    pub fn tokenizer_loss(&self, z: &[f64]) -> Result<f64> {
        check_dim("item embedding", self.config().input_dim, z.len())?;
        Ok(self.batch_loss(&Matrix::row_vector(z.to_vec())))
    }

    /// Batch-mean tokenizer loss value.
    pub fn batch_loss(&self, batch: &Matrix) -> f64 {
        let mut tape = Tape::new(&self.params);
        let terms = self.net.loss_graph(&mut tape, batch);
        tape.scalar(terms.total)
    }

    /// Mean squared reconstruction error `‖z̃ − z‖²` over the rows of `batch`.
    pub fn reconstruction_error(&self, batch: &Matrix) -> f64 {
        let mut tape = Tape::new(&self.params);
        let terms = self.net.loss_graph(&mut tape, batch);
        tape.scalar(terms.reconstruction)
    }

    /// Encodes `embeddings` with the current encoder and replaces the
    /// codebooks by layer-wise k-means centroids.
    pub fn init_codebooks_from(&mut self, embeddings: &Matrix) -> Result<CodebookInit> {
        let latents = self.encode_batch(embeddings)?;
        let init = init_codebooks(&latents, self.config())?;
        self.set_codebooks(&init.books)?;
        Ok(init)
    }
}

/// Assigns every item (rows of `embeddings`, in ascending item-id order) its
/// codes plus the smallest disambiguation token that keeps the full sequence unique.
pub fn assign_semantic_ids(tokenizer: &Tokenizer, embeddings: &Matrix) -> Result<Vec<CodeSequence>> {
    let latents = tokenizer.encode_batch(embeddings)?;
    let books = tokenizer.codebooks();
    let mut seen: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut out = Vec::with_capacity(latents.rows());
    for i in 0..latents.rows() {
        let (codes, _) = quantize_hard(latents.row(i), &books)?;
        let slot = seen.entry(codes.clone()).or_insert(0);
        out.push(CodeSequence {
            codes,
            disambiguation: *slot,
        });
        *slot += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn books_2d() -> CodebookSet {
        CodebookSet::new(vec![
            Matrix::from_rows(&[
                vec![0.0, 0.0],
                vec![1.0, 0.0],
                vec![5.0, 5.0],
                vec![-2.0, 1.0],
            ]),
            Matrix::from_rows(&[
                vec![0.1, 0.0],
                vec![0.0, 0.1],
                vec![-0.1, 0.0],
                vec![0.0, -0.1],
            ]),
        ])
        .unwrap()
    }

    #[test]
    fn exact_match_gives_zero_residual() {
        let books = books_2d();
        let (codes, trace) = quantize_hard(&[5.0, 5.0], &books).unwrap();
        assert_eq!(codes[0], 2);
        assert_eq!(trace.residuals[1], vec![0.0, 0.0]);
    }

    #[test]
    fn ties_pick_the_lowest_index() {
        let books = books_2d();
        let (codes, _) = quantize_hard(&[0.5, 0.0], &books).unwrap();
        assert_eq!(codes[0], 0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        assert!(matches!(
            quantize_hard(&[1.0], &books_2d()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn soft_rows_worked_example() {
        let books = CodebookSet::new(vec![Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]])])
            .unwrap();
        let (_, trace) = quantize_hard(&[0.0, 0.0], &books).unwrap();
        let p = quantize_soft(&trace, &books, 1.0).unwrap();
        // e^0 / (e^0 + e^-1) and e^-1 / (e^0 + e^-1)
        assert!((p.row(0)[0] - 0.7311).abs() < 1e-4);
        assert!((p.row(0)[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn equidistant_codewords_give_uniform_row() {
        let books = CodebookSet::new(vec![Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![-1.0, 0.0],
            vec![0.0, -1.0],
        ])])
        .unwrap();
        let (_, trace) = quantize_hard(&[0.0, 0.0], &books).unwrap();
        let p = quantize_soft(&trace, &books, 0.3).unwrap();
        for &v in p.row(0) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_temperature_is_one_hot() {
        let books = books_2d();
        let (codes, trace) = quantize_hard(&[0.9, 0.2], &books).unwrap();
        let p = quantize_soft(&trace, &books, 1e-6).unwrap();
        for (l, &c) in codes.iter().enumerate() {
            assert!((p.row(l)[c] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn non_positive_tau_is_rejected() {
        let books = books_2d();
        let (_, trace) = quantize_hard(&[0.9, 0.2], &books).unwrap();
        assert!(quantize_soft(&trace, &books, 0.0).is_err());
        assert!(quantize_soft(&trace, &books, -1.0).is_err());
    }

    #[test]
    fn too_few_samples_fail_initialization() {
        let cfg = TokenizerConfig {
            layers: 1,
            codebook_size: 4,
            code_dim: 2,
            ..TokenizerConfig::default()
        };
        let samples = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert!(matches!(init_codebooks(&samples, &cfg), Err(Error::Init(_))));
    }

    #[test]
    fn identical_samples_initialize_with_duplicates() {
        let cfg = TokenizerConfig {
            layers: 1,
            codebook_size: 2,
            code_dim: 2,
            ..TokenizerConfig::default()
        };
        let samples = Matrix::from_rows(&vec![vec![3.0, 3.0]; 5]);
        let init = init_codebooks(&samples, &cfg).unwrap();
        assert_eq!(init.duplicate_centroids, vec![1]);
    }

    fn small_tokenizer() -> Tokenizer {
        Tokenizer::new(TokenizerConfig {
            layers: 2,
            codebook_size: 4,
            code_dim: 3,
            input_dim: 5,
            encoder_hidden: vec![6],
            decoder_hidden: vec![6],
            seed: 3,
            ..TokenizerConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn encode_shape_and_determinism() {
        let tok = small_tokenizer();
        let z = [0.1, -0.4, 0.3, 0.9, -1.0];
        let a = tok.encode(&z).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, tok.encode(&z).unwrap());
        assert!(tok.encode(&z[..4]).is_err());
    }

    #[test]
    fn zero_encoder_maps_to_zero() {
        let mut tok = small_tokenizer();
        for id in tok.net().encoder_params() {
            let m = tok.params_mut().get_mut(id);
            m.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(tok.encode(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_decoder_returns_codeword_sum() {
        let mut tok = Tokenizer::new(TokenizerConfig {
            layers: 2,
            codebook_size: 3,
            code_dim: 2,
            input_dim: 2,
            decoder_hidden: vec![],
            ..TokenizerConfig::default()
        })
        .unwrap();
        let layer = &tok.net().decoder().layers()[0].clone();
        *tok.params_mut().get_mut(layer.weight) = Matrix::identity(2);
        *tok.params_mut().get_mut(layer.bias.unwrap()) = Matrix::zeros(1, 2);
        let books = tok.codebooks();
        let out = tok.decode(&[1, 2]).unwrap();
        let expected: Vec<f64> = books
            .codeword(0, 1)
            .iter()
            .zip(books.codeword(1, 2))
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(out, expected);
        assert_eq!(out, tok.decode(&[1, 2]).unwrap());
        assert!(matches!(
            tok.decode(&[3, 0]),
            Err(Error::CodeOutOfRange { .. })
        ));
    }

    #[test]
    fn duplicate_codes_get_consecutive_tokens() {
        let mut tok = small_tokenizer();
        // a zero encoder sends every item to the same codes
        for id in tok.net().encoder_params() {
            tok.params_mut()
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let table = Matrix::from_rows(&[vec![1.0; 5], vec![2.0; 5], vec![3.0; 5]]);
        let ids = assign_semantic_ids(&tok, &table).unwrap();
        assert_eq!(
            ids.iter().map(|s| s.disambiguation).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }
}
