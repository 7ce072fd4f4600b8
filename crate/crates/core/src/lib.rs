//! Semantic-ID generative recommendation with distribution-level alignment.
//!
//! A residual-quantization tokenizer maps item embeddings to short code
//! sequences, and an encoder–decoder transformer generates the codes of the
//! next item. An auxiliary loss pulls the soft code distribution of the
//! recommender's history representation towards that of the target item.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod autograd;
pub mod checkpoint;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kmeans;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod quantizer;
pub mod seqmodel;
pub mod soda;
pub mod tensor;

pub use error::{Error, Result};
