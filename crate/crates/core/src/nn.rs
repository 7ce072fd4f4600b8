//! Parameterized layers that emit tape operations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Matrix;

fn init_weight<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    Matrix::random_normal(rows, cols, std, rng)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_weight(inputs, outputs, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Matrix::zeros(1, outputs)));
        Linear { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Feed-forward stack with GELU between consecutive linear maps.
///
/// `widths` lists every layer width including input and output, so
/// `[d_in, d_out]` is a single affine map with no nonlinearity.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.gelu(h);
            }
            h = layer.forward(tape, h);
        }
        h
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, width, 1.0)),
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, width)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct Attention {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    heads: usize,
}

/// Projected keys and values of an attended sequence.
#[derive(Debug, Clone, Copy)]
pub struct KeyValue {
    pub keys: Var,
    pub values: Var,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Attention {
            query: Linear::new(store, &format!("{name}.q"), width, width, false, rng),
            key: Linear::new(store, &format!("{name}.k"), width, width, false, rng),
            value: Linear::new(store, &format!("{name}.v"), width, width, false, rng),
            output: Linear::new(store, &format!("{name}.o"), width, width, false, rng),
            heads,
        }
    }

    pub fn key_value(&self, tape: &mut Tape, source: Var) -> KeyValue {
        KeyValue {
            keys: self.key.forward(tape, source),
            values: self.value.forward(tape, source),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, kv: KeyValue, causal: bool) -> Var {
        let q = self.query.forward(tape, x);
        let width = tape.value(q).cols();
        let head_dim = width / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * head_dim;
            let qh = tape.slice_cols(q, start, head_dim);
            let kh = tape.slice_cols(kv.keys, start, head_dim);
            let vh = tape.slice_cols(kv.values, start, head_dim);
            let scores = tape.matmul_bt(qh, kh);
            let scores = tape.scale(scores, scale);
            let weights = if causal {
                tape.causal_softmax_rows(scores)
            } else {
                tape.softmax_rows(scores)
            };
            outputs.push(tape.matmul(weights, vh));
        }
        let merged = if outputs.len() == 1 {
            outputs[0]
        } else {
            tape.concat_cols(&outputs)
        };
        self.output.forward(tape, merged)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), width, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, width, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.up.forward(tape, x);
        let h = tape.gelu(h);
        self.down.forward(tape, h)
    }
}

/// Inverted dropout; identity when `rng` is `None` or `rate` is zero.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    let Some(rng) = rng else { return x };
    if rate <= 0.0 {
        return x;
    }
    let (rows, cols) = tape.value(x).shape();
    let keep = 1.0 - rate;
    let mask = (0..rows * cols)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = tape.constant(Matrix::from_vec(rows, cols, mask));
    tape.mul(x, mask)
}
