//! Recurrent and attention building blocks.
//!
//! Parameters are plain tensors; every forward helper binds them into a
//! `Graph` and works on `Var` handles, so the same structs serve training
//! (with gradients) and inference.

use crate::tensor::{Graph, Result, Rng, Tensor, TensorError, Var};

/// Bias added to positions with attention mask 0 before the softmax. Large
/// enough that the exponential underflows to exactly zero weight.
const MASK_BIAS: f64 = -1e30;

/// Single LSTM cell. Gate order in the stacked `[4h]` pre-activation is
/// input, forget, cell-candidate, output.
#[derive(Debug, Clone)]
pub struct LstmCellParams {
    pub w_input: Tensor,  // [4h, d_in]
    pub w_hidden: Tensor, // [4h, h]
    pub bias: Tensor,     // [4h]
    pub hidden: usize,
    pub input: usize,
}

impl LstmCellParams {
    /// Xavier weights, zero biases, forget-gate bias offset +1.
    pub fn init(input: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let w_input = Tensor::xavier(4 * hidden, input, rng)?;
        let w_hidden = Tensor::xavier(4 * hidden, hidden, rng)?;
        let mut bias = Tensor::zeros(vec![4 * hidden]);
        for i in hidden..2 * hidden {
            bias.data_mut()[i] = 1.0;
        }
        Ok(LstmCellParams {
            w_input,
            w_hidden,
            bias,
            hidden,
            input,
        })
    }

    pub fn zeroed(input: usize, hidden: usize) -> Self {
        LstmCellParams {
            w_input: Tensor::zeros(vec![4 * hidden, input]),
            w_hidden: Tensor::zeros(vec![4 * hidden, hidden]),
            bias: Tensor::zeros(vec![4 * hidden]),
            hidden,
            input,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> LstmCellVars {
        LstmCellVars {
            w_input: g.leaf(&self.w_input),
            w_hidden: g.leaf(&self.w_hidden),
            bias: g.leaf(&self.bias),
            hidden: self.hidden,
            input: self.input,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w_input"), &self.w_input);
        f(format!("{prefix}.w_hidden"), &self.w_hidden);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w_input"), &mut self.w_input);
        f(format!("{prefix}.w_hidden"), &mut self.w_hidden);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Clone, Copy)]
pub struct LstmCellVars {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
    pub hidden: usize,
    pub input: usize,
}

impl LstmCellVars {
    pub fn grads(&self, g: &Graph) -> Vec<(String, Vec<f64>)> {
        vec![
            ("w_input".into(), g.grad(self.w_input).to_vec()),
            ("w_hidden".into(), g.grad(self.w_hidden).to_vec()),
            ("bias".into(), g.grad(self.bias).to_vec()),
        ]
    }
}

/// One LSTM step: `c = f⊙c_prev + i⊙g`, `h = o⊙tanh(c)`.
pub fn lstm_cell_step(
    g: &mut Graph,
    p: &LstmCellVars,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let h = p.hidden;
    if g.value(x).len() != p.input {
        return Err(TensorError::shape("lstm_cell_step", g.shape(x), &[p.input]));
    }
    if g.value(h_prev).len() != h || g.value(c_prev).len() != h {
        return Err(TensorError::shape("lstm_cell_step", g.shape(h_prev), &[h]));
    }
    let x_col = g.reshape(x, vec![p.input, 1])?;
    let h_col = g.reshape(h_prev, vec![h, 1])?;
    let from_x = g.matmul(p.w_input, x_col)?;
    let from_h = g.matmul(p.w_hidden, h_col)?;
    let from_x = g.reshape(from_x, vec![4 * h])?;
    let from_h = g.reshape(from_h, vec![4 * h])?;
    let s = g.add(from_x, from_h)?;
    let pre = g.add(s, p.bias)?;

    let gi = g.slice(pre, 0, h)?;
    let gf = g.slice(pre, h, h)?;
    let gc = g.slice(pre, 2 * h, h)?;
    let go = g.slice(pre, 3 * h, h)?;
    let i = g.sigmoid(gi);
    let f = g.sigmoid(gf);
    let cand = g.tanh(gc);
    let o = g.sigmoid(go);

    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let c_act = g.tanh(c);
    let h_out = g.mul(o, c_act)?;
    Ok((h_out, c))
}

/// Stack of LSTM cells; layer ℓ consumes layer ℓ−1's hidden sequence.
#[derive(Debug, Clone)]
pub struct StackedLstmParams {
    pub layers: Vec<LstmCellParams>,
}

impl StackedLstmParams {
    pub fn init(input: usize, hidden: usize, num_layers: usize, rng: &mut Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let d_in = if l == 0 { input } else { hidden };
            layers.push(LstmCellParams::init(d_in, hidden, rng)?);
        }
        Ok(StackedLstmParams { layers })
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<LstmCellVars> {
        self.layers.iter().map(|l| l.bind(g)).collect()
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.layer{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.layer{i}"), f);
        }
    }
}

/// Per-layer recurrent state.
pub struct StackedState {
    pub states: Vec<(Var, Var)>, // (h, c) per layer
}

impl StackedState {
    pub fn zeros(g: &mut Graph, layers: &[LstmCellVars]) -> Self {
        let states = layers
            .iter()
            .map(|l| {
                let z = Tensor::zeros(vec![l.hidden]);
                (g.constant(&z), g.constant(&z))
            })
            .collect();
        StackedState { states }
    }
}

/// One stacked step; returns the top-layer hidden state.
pub fn stacked_lstm_step(
    g: &mut Graph,
    layers: &[LstmCellVars],
    x: Var,
    state: &mut StackedState,
) -> Result<Var> {
    let mut inp = x;
    for (l, cell) in layers.iter().enumerate() {
        let (h_prev, c_prev) = state.states[l];
        let (h, c) = lstm_cell_step(g, cell, inp, h_prev, c_prev)?;
        state.states[l] = (h, c);
        inp = h;
    }
    Ok(inp)
}

/// Run a stacked LSTM over a full input sequence from zero states.
/// Returns the top-layer hidden vector per step and the final state.
pub fn stacked_lstm_forward(
    g: &mut Graph,
    layers: &[LstmCellVars],
    inputs: &[Var],
) -> Result<(Vec<Var>, StackedState)> {
    if inputs.is_empty() {
        return Err(TensorError::contract("stacked_lstm_forward", "empty input sequence"));
    }
    let mut state = StackedState::zeros(g, layers);
    let mut outputs = Vec::with_capacity(inputs.len());
    for &x in inputs {
        outputs.push(stacked_lstm_step(g, layers, x, &mut state)?);
    }
    Ok((outputs, state))
}

/// Fully connected layer `Wx + b`.
#[derive(Debug, Clone)]
pub struct DenseParams {
    pub weight: Tensor, // [out, in]
    pub bias: Tensor,   // [out]
    pub output: usize,
    pub input: usize,
}

impl DenseParams {
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Result<Self> {
        Ok(DenseParams {
            weight: Tensor::xavier(output, input, rng)?,
            bias: Tensor::zeros(vec![output]),
            output,
            input,
        })
    }

    pub fn bind(&self, g: &mut Graph) -> DenseVars {
        DenseVars {
            weight: g.leaf(&self.weight),
            bias: g.leaf(&self.bias),
            output: self.output,
            input: self.input,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Clone, Copy)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
    pub output: usize,
    pub input: usize,
}

pub fn dense_forward(g: &mut Graph, p: &DenseVars, x: Var) -> Result<Var> {
    if g.value(x).len() != p.input {
        return Err(TensorError::shape("dense_forward", g.shape(x), &[p.input]));
    }
    let x_col = g.reshape(x, vec![p.input, 1])?;
    let wx = g.matmul(p.weight, x_col)?;
    let wx = g.reshape(wx, vec![p.output])?;
    g.add(wx, p.bias)
}

/// Frozen embedding table. Rows enter the graph as constants, so no gradient
/// ever reaches the table.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: Tensor, // [V, dim]
    pub dim: usize,
}

impl Embedding {
    pub fn new(table: Tensor) -> Result<Self> {
        match table.shape() {
            [_, d] => {
                let dim = *d;
                Ok(Embedding { table, dim })
            }
            s => Err(TensorError::contract("embedding", format!("expected 2-D table, got {s:?}"))),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn row(&self, id: usize) -> Result<&[f64]> {
        if id >= self.vocab_size() {
            return Err(TensorError::contract(
                "embedding_lookup",
                format!("token id {id} outside table of {} rows", self.vocab_size()),
            ));
        }
        Ok(&self.table.data()[id * self.dim..(id + 1) * self.dim])
    }

    pub fn lookup(&self, g: &mut Graph, ids: &[usize]) -> Result<Vec<Var>> {
        ids.iter()
            .map(|&id| {
                let row = self.row(id)?.to_vec();
                Ok(g.constant(&Tensor::vector(row)))
            })
            .collect()
    }
}

/// Bilinear (Luong "general") attention: `score_j = qᵀ W_a m_j`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_score: Tensor, // [h, d_mem]
    pub query_dim: usize,
    pub memory_dim: usize,
}

impl AttentionParams {
    pub fn init(query_dim: usize, memory_dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(AttentionParams {
            w_score: Tensor::xavier(query_dim, memory_dim, rng)?,
            query_dim,
            memory_dim,
        })
    }

    pub fn bind(&self, g: &mut Graph) -> AttentionVars {
        AttentionVars {
            w_score: g.leaf(&self.w_score),
            query_dim: self.query_dim,
            memory_dim: self.memory_dim,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w_score"), &self.w_score);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w_score"), &mut self.w_score);
    }
}

#[derive(Clone, Copy)]
pub struct AttentionVars {
    pub w_score: Var,
    pub query_dim: usize,
    pub memory_dim: usize,
}

/// Softmax-weighted context over `memory` (`[n, d_mem]`). Masked positions
/// receive exactly zero weight.
pub fn attention_context(
    g: &mut Graph,
    p: &AttentionVars,
    query: Var,
    memory: Var,
    memory_mask: &[f64],
) -> Result<(Var, Var)> {
    let mem_shape = g.shape(memory).to_vec();
    if mem_shape.len() != 2 || mem_shape[1] != p.memory_dim {
        return Err(TensorError::shape("attention_context", &mem_shape, &[memory_mask.len(), p.memory_dim]));
    }
    let n = mem_shape[0];
    if memory_mask.len() != n {
        return Err(TensorError::contract(
            "attention_context",
            format!("{n} memory rows vs {} mask entries", memory_mask.len()),
        ));
    }
    if memory_mask.iter().all(|m| *m == 0.0) {
        return Err(TensorError::contract("attention_context", "fully masked memory"));
    }
    if g.value(query).len() != p.query_dim {
        return Err(TensorError::shape("attention_context", g.shape(query), &[p.query_dim]));
    }

    let q_row = g.reshape(query, vec![1, p.query_dim])?;
    let q_proj = g.matmul(q_row, p.w_score)?; // [1, d_mem]
    let q_col = g.reshape(q_proj, vec![p.memory_dim, 1])?;
    let scores = g.matmul(memory, q_col)?; // [n, 1]
    let scores = g.reshape(scores, vec![n])?;
    let bias: Vec<f64> = memory_mask
        .iter()
        .map(|m| if *m == 0.0 { MASK_BIAS } else { 0.0 })
        .collect();
    let bias = g.constant(&Tensor::vector(bias));
    let masked = g.add(scores, bias)?;
    let weights = g.softmax(masked);
    let w_row = g.reshape(weights, vec![1, n])?;
    let context = g.matmul(w_row, memory)?; // [1, d_mem]
    let context = g.reshape(context, vec![p.memory_dim])?;
    Ok((context, weights))
}
