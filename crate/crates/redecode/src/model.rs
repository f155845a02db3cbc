//! The iterative re-decoding architecture.
//!
//! A sampling encoder estimates a Gaussian posterior over a latent code, a
//! sentence encoder produces the attention memory for the first decoder, and
//! a chain of decoders each re-generates the paraphrase while attending over
//! the previous decoder's softmax vectors. Training minimizes the mean
//! per-decoder cross entropy plus the KL term; an optional multi-sample loss
//! penalizes pairwise cosine similarity between final decoder states of
//! three latent draws.

use crate::corpus::{Batch, Vocabulary, EOS, SOS, UNK};
use crate::layers::{
    attention_context, dense_forward, stacked_lstm_forward, stacked_lstm_step, AttentionParams,
    AttentionVars, DenseParams, DenseVars, Embedding, LstmCellParams, LstmCellVars, StackedLstmParams,
    StackedState,
};
use crate::tensor::{argmax, Graph, Result, Rng, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Decoder 1 attends over the sentence encoder's per-step hidden states.
    Memory,
    /// Decoder 1 is conditioned on the sentence encoder's final state.
    FinalState,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub hidden_units: usize,
    pub latent_dim: usize,
    pub num_decoders: usize,
    pub max_len: usize,
    pub attention_mode: AttentionMode,
    pub multisample_enabled: bool,
    pub multisample_weight: f64,
    /// Average the cross entropy over all three latent samples instead of
    /// computing it on sample 1 only.
    pub multisample_ce_all: bool,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 300,
            hidden_units: 600,
            latent_dim: 1100,
            num_decoders: 2,
            max_len: 15,
            attention_mode: AttentionMode::Memory,
            multisample_enabled: false,
            multisample_weight: 1.0,
            multisample_ce_all: false,
            vocab_size: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embedding_dim", self.embedding_dim),
            ("hidden_units", self.hidden_units),
            ("latent_dim", self.latent_dim),
            ("num_decoders", self.num_decoders),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TensorError::contract("model_config", format!("{name} must be positive")));
            }
        }
        if self.multisample_weight < 0.0 {
            return Err(TensorError::contract("model_config", "multisample_weight must be >= 0"));
        }
        Ok(())
    }

    /// Attention memory width for decoder `i` (0-based).
    pub fn memory_dim(&self, decoder_index: usize) -> usize {
        if decoder_index == 0 {
            self.hidden_units
        } else {
            self.vocab_size
        }
    }

    fn num_samples(&self) -> usize {
        if self.multisample_enabled {
            3
        } else {
            1
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub lstm: StackedLstmParams,
    pub projection: DenseParams,
    pub attention: Option<AttentionParams>,
}

/// All parameter collections of the model. The embedding table is frozen and
/// is not part of the trainable set.
#[derive(Debug, Clone)]
pub struct ReDecodeModel {
    pub config: ModelConfig,
    pub embedding: Embedding,
    pub sampling_encoder: LstmCellParams,
    pub f_mu: DenseParams,
    pub f_log_var: DenseParams,
    pub sentence_encoder: StackedLstmParams,
    pub decoders: Vec<DecoderParams>,
}

impl ReDecodeModel {
    pub fn init(config: ModelConfig, embedding: Embedding, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if embedding.vocab_size() != config.vocab_size || embedding.dim != config.embedding_dim {
            return Err(TensorError::contract(
                "model_init",
                format!(
                    "embedding table {:?} does not match vocab {} x dim {}",
                    embedding.table.shape(),
                    config.vocab_size,
                    config.embedding_dim
                ),
            ));
        }
        let h = config.hidden_units;
        let sampling_encoder = LstmCellParams::init(config.embedding_dim, h, rng)?;
        let f_mu = DenseParams::init(h, config.latent_dim, rng)?;
        let f_log_var = DenseParams::init(h, config.latent_dim, rng)?;
        let sentence_encoder = StackedLstmParams::init(config.embedding_dim, h, 2, rng)?;
        let dec_input = config.embedding_dim + config.latent_dim;
        let mut decoders = Vec::with_capacity(config.num_decoders);
        for i in 0..config.num_decoders {
            let d_mem = config.memory_dim(i);
            let attention = if i == 0 && config.attention_mode == AttentionMode::FinalState {
                None
            } else {
                Some(AttentionParams::init(h, d_mem, rng)?)
            };
            decoders.push(DecoderParams {
                lstm: StackedLstmParams::init(dec_input, h, 2, rng)?,
                projection: DenseParams::init(h + d_mem, config.vocab_size, rng)?,
                attention,
            });
        }
        Ok(ReDecodeModel {
            config,
            embedding,
            sampling_encoder,
            f_mu,
            f_log_var,
            sentence_encoder,
            decoders,
        })
    }

    /// Visit every trainable parameter in canonical order.
    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        self.sampling_encoder.visit("sampling_encoder", f);
        self.f_mu.visit("f_mu", f);
        self.f_log_var.visit("f_log_var", f);
        self.sentence_encoder.visit("sentence_encoder", f);
        for (i, d) in self.decoders.iter().enumerate() {
            d.lstm.visit(&format!("decoder{i}.lstm"), f);
            d.projection.visit(&format!("decoder{i}.projection"), f);
            if let Some(a) = &d.attention {
                a.visit(&format!("decoder{i}.attention"), f);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.sampling_encoder.visit_mut("sampling_encoder", f);
        self.f_mu.visit_mut("f_mu", f);
        self.f_log_var.visit_mut("f_log_var", f);
        self.sentence_encoder.visit_mut("sentence_encoder", f);
        for (i, d) in self.decoders.iter_mut().enumerate() {
            d.lstm.visit_mut(&format!("decoder{i}.lstm"), f);
            d.projection.visit_mut(&format!("decoder{i}.projection"), f);
            if let Some(a) = &mut d.attention {
                a.visit_mut(&format!("decoder{i}.attention"), f);
            }
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _| names.push(n));
        names
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    pub fn bind(&self, g: &mut Graph) -> ModelVars {
        ModelVars {
            sampling_encoder: self.sampling_encoder.bind(g),
            f_mu: self.f_mu.bind(g),
            f_log_var: self.f_log_var.bind(g),
            sentence_encoder: self.sentence_encoder.bind(g),
            decoders: self
                .decoders
                .iter()
                .map(|d| DecoderVars {
                    lstm: d.lstm.bind(g),
                    projection: d.projection.bind(g),
                    attention: d.attention.as_ref().map(|a| a.bind(g)),
                })
                .collect(),
        }
    }
}

pub struct DecoderVars {
    pub lstm: Vec<LstmCellVars>,
    pub projection: DenseVars,
    pub attention: Option<AttentionVars>,
}

/// Graph handles for all bound parameters, in the same canonical order as
/// `ReDecodeModel::visit`.
pub struct ModelVars {
    pub sampling_encoder: LstmCellVars,
    pub f_mu: DenseVars,
    pub f_log_var: DenseVars,
    pub sentence_encoder: Vec<LstmCellVars>,
    pub decoders: Vec<DecoderVars>,
}

impl ModelVars {
    /// Mutable handles in the same canonical order as `vars`, so a caller
    /// can substitute a single bound parameter (gradient checking).
    pub fn vars_mut(&mut self) -> Vec<&mut Var> {
        fn cell<'a>(c: &'a mut LstmCellVars, out: &mut Vec<&'a mut Var>) {
            out.push(&mut c.w_input);
            out.push(&mut c.w_hidden);
            out.push(&mut c.bias);
        }
        fn dense<'a>(d: &'a mut DenseVars, out: &mut Vec<&'a mut Var>) {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        let mut out: Vec<&mut Var> = Vec::new();
        cell(&mut self.sampling_encoder, &mut out);
        dense(&mut self.f_mu, &mut out);
        dense(&mut self.f_log_var, &mut out);
        for c in &mut self.sentence_encoder {
            cell(c, &mut out);
        }
        for d in &mut self.decoders {
            for c in &mut d.lstm {
                cell(c, &mut out);
            }
            dense(&mut d.projection, &mut out);
            if let Some(a) = &mut d.attention {
                out.push(&mut a.w_score);
            }
        }
        out
    }

    pub fn vars(&self) -> Vec<Var> {
        let cell = |c: &LstmCellVars| vec![c.w_input, c.w_hidden, c.bias];
        let dense = |d: &DenseVars| vec![d.weight, d.bias];
        let mut out = Vec::new();
        out.extend(cell(&self.sampling_encoder));
        out.extend(dense(&self.f_mu));
        out.extend(dense(&self.f_log_var));
        for c in &self.sentence_encoder {
            out.extend(cell(c));
        }
        for d in &self.decoders {
            for c in &d.lstm {
                out.extend(cell(c));
            }
            out.extend(dense(&d.projection));
            if let Some(a) = &d.attention {
                out.push(a.w_score);
            }
        }
        out
    }
}

/// Latent draw: `z = mu + exp(0.5 * log_var) ⊙ epsilon`.
pub struct LatentSample {
    pub mu: Var,
    pub log_var: Var,
    pub epsilon: Var,
    pub z: Var,
}

/// One decoder's pass: predicted tokens, softmax rows, attention rows and the
/// top-layer hidden state at the last step.
pub struct DecodeTrace {
    pub token_ids: Vec<usize>,
    pub softmax_seq: Var,
    pub attention_weights: Var,
    pub final_state: Var,
}

/// Trace detached from the graph, for inspection and reporting.
#[derive(Debug, Clone)]
pub struct OwnedTrace {
    pub token_ids: Vec<usize>,
    pub softmax_seq: Tensor,
    pub attention_weights: Tensor,
    pub final_state: Tensor,
}

impl DecodeTrace {
    pub fn to_owned(&self, g: &Graph) -> OwnedTrace {
        OwnedTrace {
            token_ids: self.token_ids.clone(),
            softmax_seq: g.to_tensor(self.softmax_seq),
            attention_weights: g.to_tensor(self.attention_weights),
            final_state: g.to_tensor(self.final_state),
        }
    }
}

pub enum DecodeMode<'a> {
    /// Consume the given input tokens (already shifted: SOS first).
    TeacherForced { inputs: &'a [usize] },
    /// Feed the argmax token forward; halt at EOS or `max_len` steps.
    FreeRunning,
}

/// Run the sampling encoder over the original sentence and project its final
/// hidden state to `(mu, log_var)`.
pub fn encode_sampling(
    g: &mut Graph,
    model: &ReDecodeModel,
    vars: &ModelVars,
    original: &[usize],
) -> Result<(Var, Var)> {
    if original.is_empty() {
        return Err(TensorError::contract("encode_sampling", "empty input sequence"));
    }
    if original.len() > model.config.max_len + 1 {
        return Err(TensorError::contract(
            "encode_sampling",
            format!("sequence length {} exceeds max_len {}", original.len(), model.config.max_len),
        ));
    }
    let embs = model.embedding.lookup(g, original)?;
    let h0 = Tensor::zeros(vec![model.config.hidden_units]);
    let mut h = g.constant(&h0);
    let mut c = g.constant(&h0);
    for x in embs {
        let (h2, c2) = crate::layers::lstm_cell_step(g, &vars.sampling_encoder, x, h, c)?;
        h = h2;
        c = c2;
    }
    let mu = dense_forward(g, &vars.f_mu, h)?;
    let log_var = dense_forward(g, &vars.f_log_var, h)?;
    Ok((mu, log_var))
}

/// Reparameterized draw. Gradient flows to `mu` and `log_var`, not `epsilon`.
pub fn sample_latent(g: &mut Graph, mu: Var, log_var: Var, epsilon: &[f64]) -> Result<LatentSample> {
    if g.value(mu).len() != epsilon.len() || g.value(log_var).len() != epsilon.len() {
        return Err(TensorError::shape("sample_latent", g.shape(mu), &[epsilon.len()]));
    }
    let eps = g.constant(&Tensor::vector(epsilon.to_vec()));
    let half = g.affine(log_var, 0.5, 0.0);
    let sigma = g.exp(half);
    let noise = g.mul(sigma, eps)?;
    let z = g.add(mu, noise)?;
    Ok(LatentSample {
        mu,
        log_var,
        epsilon: eps,
        z,
    })
}

/// Sentence-encoder memory: one top-layer hidden vector per input position,
/// with a pad mask (all-ones when the caller passes content tokens only),
/// plus the final top-layer state.
pub fn encode_sentence(
    g: &mut Graph,
    model: &ReDecodeModel,
    vars: &ModelVars,
    original: &[usize],
) -> Result<(Var, Vec<f64>, Var)> {
    if original.is_empty() {
        return Err(TensorError::contract("encode_sentence", "empty input sequence"));
    }
    let embs = model.embedding.lookup(g, original)?;
    let (outputs, state) = stacked_lstm_forward(g, &vars.sentence_encoder, &embs)?;
    let memory = g.stack_rows(&outputs)?;
    let mask: Vec<f64> = original
        .iter()
        .map(|&id| if id == crate::corpus::PAD { 0.0 } else { 1.0 })
        .collect();
    let final_h = state.states.last().unwrap().0;
    Ok((memory, mask, final_h))
}

/// KL divergence of `N(mu, diag(exp(log_var)))` from `N(0, I)`:
/// `0.5 * Σ (mu² + exp(log_var) − 1 − log_var)`.
pub fn kl_gaussian(g: &mut Graph, mu: Var, log_var: Var) -> Result<Var> {
    let sq = g.mul(mu, mu)?;
    let var = g.exp(log_var);
    let s = g.add(sq, var)?;
    let s = g.sub(s, log_var)?;
    let s = g.affine(s, 1.0, -1.0);
    let total = g.sum(s, None)?;
    Ok(g.affine(total, 0.5, 0.0))
}

/// One decoder pass over its memory. Per step the input is
/// `[embedding(token); z]`, the query is the top LSTM state, and the softmax
/// over the vocabulary is computed from `[query; context]`.
pub fn decode_sequence(
    g: &mut Graph,
    model: &ReDecodeModel,
    dvars: &DecoderVars,
    z: Var,
    memory: Var,
    memory_mask: &[f64],
    mode: DecodeMode,
) -> Result<DecodeTrace> {
    let cfg = &model.config;
    let mem_shape = g.shape(memory).to_vec();
    let expected_mem = match &dvars.attention {
        Some(a) => a.memory_dim,
        None => cfg.hidden_units,
    };
    if mem_shape.len() != 2 || mem_shape[1] != expected_mem {
        return Err(TensorError::contract(
            "decode_sequence",
            format!("memory shape {mem_shape:?} does not match decoder memory dim {expected_mem}"),
        ));
    }
    if dvars.projection.input != cfg.hidden_units + expected_mem {
        return Err(TensorError::contract(
            "decode_sequence",
            format!(
                "projection input {} does not match hidden {} + memory {}",
                dvars.projection.input, cfg.hidden_units, expected_mem
            ),
        ));
    }
    if let DecodeMode::TeacherForced { inputs } = &mode {
        if inputs.is_empty() || inputs.len() > cfg.max_len + 1 {
            return Err(TensorError::contract(
                "decode_sequence",
                format!("teacher input length {} outside 1..={}", inputs.len(), cfg.max_len + 1),
            ));
        }
    }

    let mut state = StackedState::zeros(g, &dvars.lstm);
    let mut softmax_rows = Vec::new();
    let mut attn_rows = Vec::new();
    let mut token_ids = Vec::new();
    let mut final_state = None;
    let mut next_input = SOS;
    let steps = match &mode {
        DecodeMode::TeacherForced { inputs } => inputs.len(),
        DecodeMode::FreeRunning => cfg.max_len,
    };

    for t in 0..steps {
        let tok = match &mode {
            DecodeMode::TeacherForced { inputs } => inputs[t],
            DecodeMode::FreeRunning => next_input,
        };
        let emb = model.embedding.lookup(g, &[tok])?[0];
        let x = g.concat(&[emb, z])?;
        let h_top = stacked_lstm_step(g, &dvars.lstm, x, &mut state)?;
        let (context, weights) = match &dvars.attention {
            Some(att) => attention_context(g, att, h_top, memory, memory_mask)?,
            None => {
                let ctx = g.reshape(memory, vec![cfg.hidden_units])?;
                let w = g.constant(&Tensor::vector(vec![1.0]));
                (ctx, w)
            }
        };
        let proj_in = g.concat(&[h_top, context])?;
        let logits = dense_forward(g, &dvars.projection, proj_in)?;
        let probs = g.softmax(logits);
        let predicted = argmax(g.value(probs));
        softmax_rows.push(probs);
        attn_rows.push(weights);
        token_ids.push(predicted);
        final_state = Some(h_top);
        if let DecodeMode::FreeRunning = mode {
            if predicted == EOS {
                break;
            }
            next_input = predicted;
        }
    }

    Ok(DecodeTrace {
        token_ids,
        softmax_seq: g.stack_rows(&softmax_rows)?,
        attention_weights: g.stack_rows(&attn_rows)?,
        final_state: final_state.expect("at least one decode step"),
    })
}

/// Run the full decoder chain. Decoder 1 uses the given memory; decoder i>1
/// attends over decoder i−1's complete softmax sequence.
fn decode_chain(
    g: &mut Graph,
    model: &ReDecodeModel,
    vars: &ModelVars,
    z: Var,
    memory: Var,
    memory_mask: &[f64],
    teacher_inputs: Option<&[usize]>,
) -> Result<Vec<DecodeTrace>> {
    let mut traces: Vec<DecodeTrace> = Vec::with_capacity(model.decoders.len());
    for dvars in &vars.decoders {
        let (mem, mask) = match traces.last() {
            None => (memory, memory_mask.to_vec()),
            Some(prev) => {
                let n = g.shape(prev.softmax_seq)[0];
                (prev.softmax_seq, vec![1.0; n])
            }
        };
        let mode = match teacher_inputs {
            Some(inputs) => DecodeMode::TeacherForced { inputs },
            None => DecodeMode::FreeRunning,
        };
        traces.push(decode_sequence(g, model, dvars, z, mem, &mask, mode)?);
    }
    Ok(traces)
}

/// Pre-drawn noise for one batch, so a forward pass is a deterministic
/// function of the parameters (gradient checks, resumable training).
#[derive(Debug, Clone)]
pub struct NoisePlan {
    pub per_pair: Vec<PairNoise>,
}

#[derive(Debug, Clone)]
pub struct PairNoise {
    /// One epsilon per latent sample (1, or 3 with the multi-sample loss).
    pub epsilons: Vec<Vec<f64>>,
    /// Uniform draws gating word dropout per teacher-input position.
    pub dropout: Vec<f64>,
}

impl NoisePlan {
    pub fn draw(rng: &mut Rng, batch: &Batch, config: &ModelConfig) -> Self {
        let per_pair = batch
            .pairs
            .iter()
            .map(|p| PairNoise {
                epsilons: (0..config.num_samples())
                    .map(|_| rng.normal_vec(config.latent_dim))
                    .collect(),
                dropout: (0..p.paraphrase_len + 1).map(|_| rng.gen_f64()).collect(),
            })
            .collect();
        NoisePlan { per_pair }
    }

    /// All-zero epsilons and no dropout, for deterministic checks.
    pub fn zeros(batch: &Batch, config: &ModelConfig) -> Self {
        let per_pair = batch
            .pairs
            .iter()
            .map(|p| PairNoise {
                epsilons: vec![vec![0.0; config.latent_dim]; config.num_samples()],
                dropout: vec![1.0; p.paraphrase_len + 1],
            })
            .collect();
        NoisePlan { per_pair }
    }
}

pub struct ForwardOutput {
    pub loss: Var,
    pub per_decoder_ce: Vec<f64>,
    pub kl: f64,
    pub multisample: f64,
    /// Sample-1 traces, one inner vec per pair.
    pub traces: Vec<Vec<DecodeTrace>>,
}

/// Teacher-forced training pass over a batch:
/// `mean over decoders of CE + kl_weight * KL (+ weight * multi-sample)`,
/// averaged over the batch.
pub fn forward_train(
    g: &mut Graph,
    model: &ReDecodeModel,
    vars: &ModelVars,
    batch: &Batch,
    rng: &mut Rng,
    kl_weight: f64,
    word_dropout_prob: f64,
) -> Result<ForwardOutput> {
    let plan = NoisePlan::draw(rng, batch, &model.config);
    forward_train_with_noise(g, model, vars, batch, &plan, kl_weight, word_dropout_prob)
}

pub fn forward_train_with_noise(
    g: &mut Graph,
    model: &ReDecodeModel,
    vars: &ModelVars,
    batch: &Batch,
    plan: &NoisePlan,
    kl_weight: f64,
    word_dropout_prob: f64,
) -> Result<ForwardOutput> {
    let cfg = &model.config;
    if batch.pairs.is_empty() {
        return Err(TensorError::contract("forward_train", "empty batch"));
    }
    if plan.per_pair.len() != batch.pairs.len() {
        return Err(TensorError::contract("forward_train", "noise plan does not match batch"));
    }
    if !(0.0..=1.0).contains(&kl_weight) {
        return Err(TensorError::contract("forward_train", format!("kl_weight {kl_weight} outside [0,1]")));
    }

    let mut pair_losses = Vec::with_capacity(batch.pairs.len());
    let mut ce_sums = vec![0.0; cfg.num_decoders];
    let mut kl_sum = 0.0;
    let mut ms_sum = 0.0;
    let mut all_traces = Vec::with_capacity(batch.pairs.len());

    for (pair, noise) in batch.pairs.iter().zip(&plan.per_pair) {
        let original = pair.original_content();
        let targets = pair.target_with_eos();

        let (mu, log_var) = encode_sampling(g, model, vars, original)?;
        let kl = kl_gaussian(g, mu, log_var)?;
        kl_sum += g.scalar_value(kl);

        let (memory, memory_mask) = match cfg.attention_mode {
            AttentionMode::Memory => {
                let (mem, mask, _) = encode_sentence(g, model, vars, original)?;
                (mem, mask)
            }
            AttentionMode::FinalState => {
                let (_, _, final_h) = encode_sentence(g, model, vars, original)?;
                let mem = g.reshape(final_h, vec![1, cfg.hidden_units])?;
                (mem, vec![1.0])
            }
        };

        // teacher inputs: SOS then the target shifted right, with word dropout
        let mut inputs = Vec::with_capacity(targets.len());
        inputs.push(SOS);
        inputs.extend_from_slice(&targets[..targets.len() - 1]);
        if word_dropout_prob > 0.0 {
            for (t, tok) in inputs.iter_mut().enumerate().skip(1) {
                if noise.dropout[t] < word_dropout_prob {
                    *tok = UNK;
                }
            }
        }

        let mut sample_traces = Vec::with_capacity(noise.epsilons.len());
        for eps in &noise.epsilons {
            let latent = sample_latent(g, mu, log_var, eps)?;
            sample_traces.push(decode_chain(g, model, vars, latent.z, memory, &memory_mask, Some(&inputs))?);
        }

        // cross entropy per decoder
        let ce_samples: &[usize] = if cfg.multisample_ce_all {
            &[0, 1, 2][..noise.epsilons.len()]
        } else {
            &[0]
        };
        let mask = vec![1.0; targets.len()];
        let mut ce_vars = Vec::new();
        for d in 0..cfg.num_decoders {
            let mut per_sample = Vec::new();
            for &s in ce_samples {
                let (ce, _) = g.cross_entropy_masked(sample_traces[s][d].softmax_seq, targets, &mask)?;
                per_sample.push(ce);
            }
            let stacked = g.concat(&per_sample)?;
            let ce = g.mean(stacked, None)?;
            ce_sums[d] += g.scalar_value(ce);
            ce_vars.push(ce);
        }
        let ce_stack = g.concat(&ce_vars)?;
        let mean_ce = g.mean(ce_stack, None)?;
        let kl_term = g.affine(kl, kl_weight, 0.0);
        let mut pair_loss = g.add(mean_ce, kl_term)?;

        if cfg.multisample_enabled {
            let finals: Vec<Var> = sample_traces
                .iter()
                .map(|chain| chain.last().unwrap().final_state)
                .collect();
            let mut terms = Vec::new();
            for i in 0..finals.len() {
                for j in i + 1..finals.len() {
                    terms.push(g.cosine_similarity(finals[i], finals[j])?);
                }
            }
            let stacked = g.concat(&terms)?;
            let ms = g.sum(stacked, None)?;
            ms_sum += g.scalar_value(ms);
            let weighted = g.affine(ms, cfg.multisample_weight, 0.0);
            pair_loss = g.add(pair_loss, weighted)?;
        }

        pair_losses.push(pair_loss);
        all_traces.push(sample_traces.swap_remove(0));
    }

    let n = batch.pairs.len() as f64;
    let stacked = g.concat(&pair_losses)?;
    let loss = g.mean(stacked, None)?;
    Ok(ForwardOutput {
        loss,
        per_decoder_ce: ce_sums.iter().map(|s| s / n).collect(),
        kl: kl_sum / n,
        multisample: ms_sum / n,
        traces: all_traces,
    })
}

/// The Eq.-5-style diversity loss on its own: three latent draws, full
/// decoder chains, sum of pairwise cosine similarities of the last decoder's
/// final states. Range [−3, 3].
pub fn loss_multisample(
    g: &mut Graph,
    model: &ReDecodeModel,
    vars: &ModelVars,
    original: &[usize],
    teacher_inputs: &[usize],
    epsilons: &[Vec<f64>; 3],
) -> Result<Var> {
    if !model.config.multisample_enabled {
        return Err(TensorError::contract(
            "loss_multisample",
            "multisample_enabled is off in this configuration",
        ));
    }
    let (mu, log_var) = encode_sampling(g, model, vars, original)?;
    let (memory, mask) = match model.config.attention_mode {
        AttentionMode::Memory => {
            let (mem, mask, _) = encode_sentence(g, model, vars, original)?;
            (mem, mask)
        }
        AttentionMode::FinalState => {
            let (_, _, final_h) = encode_sentence(g, model, vars, original)?;
            let mem = g.reshape(final_h, vec![1, model.config.hidden_units])?;
            (mem, vec![1.0])
        }
    };
    let mut finals = Vec::with_capacity(3);
    for eps in epsilons {
        let latent = sample_latent(g, mu, log_var, eps)?;
        let chain = decode_chain(g, model, vars, latent.z, memory, &mask, Some(teacher_inputs))?;
        finals.push(chain.last().unwrap().final_state);
    }
    let mut terms = Vec::new();
    for i in 0..3 {
        for j in i + 1..3 {
            terms.push(g.cosine_similarity(finals[i], finals[j])?);
        }
    }
    let stacked = g.concat(&terms)?;
    g.sum(stacked, None)
}

/// Greedy generation: decoder 1 free-runs against the input-sentence memory,
/// each later decoder free-runs against the previous decoder's complete
/// softmax sequence. Returns one trace per decoder.
pub fn generate(model: &ReDecodeModel, original: &[usize], rng: &mut Rng) -> Result<Vec<OwnedTrace>> {
    if original.is_empty() {
        return Err(TensorError::contract("generate", "empty input"));
    }
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let (mu, log_var) = encode_sampling(&mut g, model, &vars, original)?;
    let eps = rng.normal_vec(model.config.latent_dim);
    let latent = sample_latent(&mut g, mu, log_var, &eps)?;
    let (memory, mask) = match model.config.attention_mode {
        AttentionMode::Memory => {
            let (mem, mask, _) = encode_sentence(&mut g, model, &vars, original)?;
            (mem, mask)
        }
        AttentionMode::FinalState => {
            let (_, _, final_h) = encode_sentence(&mut g, model, &vars, original)?;
            let mem = g.reshape(final_h, vec![1, model.config.hidden_units])?;
            (mem, vec![1.0])
        }
    };
    let traces = decode_chain(&mut g, model, &vars, latent.z, memory, &mask, None)?;
    Ok(traces.iter().map(|t| t.to_owned(&g)).collect())
}

/// `generate` plus detokenized text per decoder.
pub fn generate_strings(
    model: &ReDecodeModel,
    vocab: &Vocabulary,
    original: &[usize],
    rng: &mut Rng,
) -> Result<Vec<(OwnedTrace, String)>> {
    let traces = generate(model, original, rng)?;
    Ok(traces
        .into_iter()
        .map(|t| {
            let text = vocab.detokenize(&t.token_ids).join(" ");
            (t, text)
        })
        .collect())
}
