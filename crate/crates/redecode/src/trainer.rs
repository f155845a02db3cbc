//! Training loop, Adam optimizer, KL annealing and checkpointing.
//!
//! Training is deterministic for a given seed: batch order is derived from
//! `(seed, epoch)` and the per-step noise stream from `(seed, step)`, so a
//! run resumed from a checkpoint replays the exact remaining steps without
//! serializing any RNG state.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use crate::corpus::{make_batches, Vocabulary};
use crate::layers::Embedding;
use crate::model::{forward_train, AttentionMode, ForwardOutput, ModelConfig, ReDecodeModel};
use crate::tensor::{Graph, Rng, Tensor, TensorError};

const MAGIC: &[u8; 4] = b"RDEC";
const FORMAT_VERSION: u16 = 1;
/// Substream tag base for per-step noise draws.
const NOISE_TAG: u64 = 0x5245_4445_0000_0000;

#[derive(Debug, thiserror::Error)]
pub enum TrainerError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("checkpoint {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("non-finite loss at step {step} (batch {batch} of epoch {epoch})")]
    NonFinite { step: u64, epoch: u64, batch: u64 },
    #[error("trainer: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
}

pub type Result<T> = std::result::Result<T, TrainerError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TrainerError + '_ {
    move |source| TrainerError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub kl_anneal_steps: u64,
    pub word_dropout: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 5.0,
            kl_anneal_steps: 2000,
            word_dropout: 0.0,
            batch_size: 32,
            epochs: 1,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(TrainerError::Contract("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainerError::Contract("betas must lie in [0, 1)".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(TrainerError::Contract("clip_norm must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.word_dropout) {
            return Err(TrainerError::Contract("word_dropout must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainerError::Contract("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warm-up of the KL weight: `min(1, step / kl_anneal_steps)`.
/// `kl_anneal_steps == 0` disables annealing (weight is always 1).
pub fn kl_anneal_weight(step: u64, kl_anneal_steps: u64) -> f64 {
    if kl_anneal_steps == 0 {
        1.0
    } else {
        (step as f64 / kl_anneal_steps as f64).min(1.0)
    }
}

/// First and second moment estimates, one per trainable tensor, in the
/// model's canonical parameter order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(model: &ReDecodeModel) -> Self {
        let mut m = Vec::new();
        model.visit(&mut |_, t| m.push(Tensor::zeros(t.shape().to_vec())));
        AdamState { v: m.clone(), m, step: 0 }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// One Adam update with bias correction. `grads` must align with the
/// model's canonical parameter order. Increments `state.step`.
pub fn adam_step(
    model: &mut ReDecodeModel,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != state.m.len() {
        return Err(TrainerError::Contract(format!(
            "got {} gradient tensors for {} parameters",
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let mut idx = 0;
    let mut status = Ok(());
    model.visit_mut(&mut |name, param| {
        if status.is_err() {
            return;
        }
        let grad = &grads[idx];
        if grad.shape() != param.shape() {
            status = Err(TrainerError::Contract(format!(
                "gradient shape {:?} does not match parameter {name} {:?}",
                grad.shape(),
                param.shape()
            )));
            return;
        }
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        for (i, p) in param.data_mut().iter_mut().enumerate() {
            let g = grad.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        idx += 1;
    });
    status
}

#[derive(Debug, Clone)]
pub struct StepStats {
    pub step: u64,
    pub epoch: u64,
    pub per_decoder_ce: Vec<f64>,
    pub kl: f64,
    pub kl_weight: f64,
    pub multisample: f64,
    pub total: f64,
    pub grad_norm: f64,
}

impl StepStats {
    /// Tab-separated log line: step, per-decoder CE, KL, its weight,
    /// multi-sample term, total, gradient norm.
    pub fn log_line(&self) -> String {
        let ces: Vec<String> = self.per_decoder_ce.iter().map(|c| format!("{c:.6}")).collect();
        format!(
            "{}\t{}\t{:.6}\t{:.4}\t{:.6}\t{:.6}\t{:.4}",
            self.step,
            ces.join("\t"),
            self.kl,
            self.kl_weight,
            self.multisample,
            self.total,
            self.grad_norm
        )
    }
}

/// One optimizer step on one batch. Reads noise from the `(seed, step)`
/// substream so the update is a pure function of (params, state, data).
pub fn train_step(
    model: &mut ReDecodeModel,
    state: &mut AdamState,
    batch: &crate::corpus::Batch,
    cfg: &TrainConfig,
    epoch: u64,
    batch_index: u64,
) -> Result<StepStats> {
    let step = state.step;
    let kl_weight = kl_anneal_weight(step, cfg.kl_anneal_steps);
    let mut noise_rng = Rng::substream(cfg.seed, NOISE_TAG ^ step);

    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let out: ForwardOutput =
        forward_train(&mut g, model, &vars, batch, &mut noise_rng, kl_weight, cfg.word_dropout)?;
    let total = g.scalar_value(out.loss);
    if !total.is_finite() {
        return Err(TrainerError::NonFinite { step, epoch, batch: batch_index });
    }
    g.backward(out.loss)?;

    let mut grads: Vec<Tensor> = vars
        .vars()
        .iter()
        .map(|&v| Tensor::new(g.shape(v).to_vec(), g.grad(v).to_vec()).unwrap())
        .collect();
    let grad_norm = clip_gradients(&mut grads, cfg.clip_norm);
    adam_step(model, &grads, state, cfg)?;

    Ok(StepStats {
        step: state.step,
        epoch,
        per_decoder_ce: out.per_decoder_ce,
        kl: out.kl,
        kl_weight,
        multisample: out.multisample,
        total,
        grad_norm,
    })
}

/// Run (or resume) training over the pair corpus until `cfg.epochs` epochs
/// have elapsed. The completed-step counter lives in `state.step`; a resumed
/// run continues mid-epoch from exactly where it left off.
pub fn train(
    model: &mut ReDecodeModel,
    state: &mut AdamState,
    vocab: &Vocabulary,
    pairs: &[(Vec<String>, Vec<String>)],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepStats),
) -> Result<()> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(TrainerError::Contract("training corpus is empty".into()));
    }
    let first = make_batches(pairs, vocab, cfg.batch_size, cfg.seed, 0)?;
    let batches_per_epoch = first.len() as u64;
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut cached: (u64, Vec<crate::corpus::Batch>) = (0, first);

    while state.step < total_steps {
        let epoch = state.step / batches_per_epoch;
        let batch_index = state.step % batches_per_epoch;
        if cached.0 != epoch {
            cached = (epoch, make_batches(pairs, vocab, cfg.batch_size, cfg.seed, epoch)?);
        }
        let batch = cached.1[batch_index as usize].clone();
        let stats = train_step(model, state, &batch, cfg, epoch, batch_index)?;
        on_step(&stats);
    }
    Ok(())
}

// --- checkpoint format ------------------------------------------------------
//
// magic "RDEC" | version u16 | config block | parameter block |
// optimizer block | step u64, all little endian. The config block is a
// length-prefixed list of key/value strings; each parameter record is
// {name, rank u8, dims u64*, data f64*}. The frozen embedding table is
// stored as a parameter record named "embedding.table" with no optimizer
// record.

fn write_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    write_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn write_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(TrainerError::Format { path: self.path.to_path_buf(), msg: msg.into() })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return self.fail(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        match std::str::from_utf8(self.take(n)?) {
            Ok(s) => Ok(s.to_string()),
            Err(_) => self.fail("invalid utf-8 in string field"),
        }
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = self.u64()? as usize;
            if d > 1 << 24 {
                return self.fail(format!("implausible dimension {d}"));
            }
            dims.push(d);
        }
        let numel: usize = dims.iter().product();
        let raw = self.take(numel * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        match Tensor::new(dims, data) {
            Ok(t) => Ok(t),
            Err(e) => self.fail(e.to_string()),
        }
    }
}

fn config_entries(config: &ModelConfig) -> Vec<(String, String)> {
    vec![
        ("embedding_dim".into(), config.embedding_dim.to_string()),
        ("hidden_units".into(), config.hidden_units.to_string()),
        ("latent_dim".into(), config.latent_dim.to_string()),
        ("num_decoders".into(), config.num_decoders.to_string()),
        ("max_len".into(), config.max_len.to_string()),
        (
            "attention_mode".into(),
            match config.attention_mode {
                AttentionMode::Memory => "memory".into(),
                AttentionMode::FinalState => "final_state".into(),
            },
        ),
        ("multisample_enabled".into(), config.multisample_enabled.to_string()),
        ("multisample_weight".into(), config.multisample_weight.to_string()),
        ("multisample_ce_all".into(), config.multisample_ce_all.to_string()),
        ("vocab_size".into(), config.vocab_size.to_string()),
    ]
}

fn config_from_entries(map: &HashMap<String, String>, path: &Path) -> Result<ModelConfig> {
    let get = |key: &str| -> Result<&String> {
        map.get(key).ok_or_else(|| TrainerError::Format {
            path: path.to_path_buf(),
            msg: format!("missing config key {key}"),
        })
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?.parse().map_err(|_| TrainerError::Format {
            path: path.to_path_buf(),
            msg: format!("config key {key} is not an integer"),
        })
    };
    let parse_bool = |key: &str| -> Result<bool> {
        get(key)?.parse().map_err(|_| TrainerError::Format {
            path: path.to_path_buf(),
            msg: format!("config key {key} is not a bool"),
        })
    };
    let attention_mode = match get("attention_mode")?.as_str() {
        "memory" => AttentionMode::Memory,
        "final_state" => AttentionMode::FinalState,
        other => {
            return Err(TrainerError::Format {
                path: path.to_path_buf(),
                msg: format!("unknown attention_mode {other}"),
            })
        }
    };
    Ok(ModelConfig {
        embedding_dim: parse_usize("embedding_dim")?,
        hidden_units: parse_usize("hidden_units")?,
        latent_dim: parse_usize("latent_dim")?,
        num_decoders: parse_usize("num_decoders")?,
        max_len: parse_usize("max_len")?,
        attention_mode,
        multisample_enabled: parse_bool("multisample_enabled")?,
        multisample_weight: get("multisample_weight")?.parse().map_err(|_| TrainerError::Format {
            path: path.to_path_buf(),
            msg: "config key multisample_weight is not a number".into(),
        })?,
        multisample_ce_all: parse_bool("multisample_ce_all")?,
        vocab_size: parse_usize("vocab_size")?,
    })
}

pub fn save_checkpoint(path: &Path, model: &ReDecodeModel, state: &AdamState) -> Result<()> {
    save_checkpoint_with(path, model, state, &[])
}

/// Save with additional config entries (for example the vocabulary), which
/// come back from `load_checkpoint` in its extras map.
pub fn save_checkpoint_with(
    path: &Path,
    model: &ReDecodeModel,
    state: &AdamState,
    extra: &[(String, String)],
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());

    let mut entries = config_entries(&model.config);
    for (k, v) in extra {
        if entries.iter().any(|(ek, _)| ek == k) {
            return Err(TrainerError::Contract(format!("extra config key {k} collides with a model key")));
        }
        entries.push((k.clone(), v.clone()));
    }
    write_u32(&mut buf, entries.len() as u32);
    for (k, v) in &entries {
        write_str(&mut buf, k);
        write_str(&mut buf, v);
    }

    let mut params: Vec<(String, Tensor)> = Vec::new();
    model.visit(&mut |name, t| params.push((name, t.clone())));
    write_u32(&mut buf, (params.len() + 1) as u32);
    write_str(&mut buf, "embedding.table");
    write_tensor(&mut buf, &model.embedding.table);
    for (name, t) in &params {
        write_str(&mut buf, name);
        write_tensor(&mut buf, t);
    }

    write_u32(&mut buf, params.len() as u32);
    for (i, (name, _)) in params.iter().enumerate() {
        write_str(&mut buf, name);
        write_tensor(&mut buf, &state.m[i]);
        write_tensor(&mut buf, &state.v[i]);
    }
    buf.extend_from_slice(&state.step.to_le_bytes());

    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&buf).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

/// Load a checkpoint. The third element holds any extra config entries
/// written by `save_checkpoint_with`.
pub fn load_checkpoint(path: &Path) -> Result<(ReDecodeModel, AdamState, HashMap<String, String>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };

    if r.take(4)? != MAGIC {
        return r.fail("bad magic, not a checkpoint file");
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return r.fail(format!("unsupported format version {version}"));
    }

    let n_cfg = r.u32()?;
    let mut map = HashMap::new();
    for _ in 0..n_cfg {
        let k = r.string()?;
        let v = r.string()?;
        map.insert(k, v);
    }
    let config = config_from_entries(&map, path)?;
    for (key, _) in config_entries(&config) {
        map.remove(&key);
    }
    let extras = map;

    let n_params = r.u32()?;
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    for _ in 0..n_params {
        let name = r.string()?;
        let t = r.tensor()?;
        tensors.insert(name, t);
    }

    let n_opt = r.u32()?;
    let mut opt: HashMap<String, (Tensor, Tensor)> = HashMap::new();
    for _ in 0..n_opt {
        let name = r.string()?;
        let m = r.tensor()?;
        let v = r.tensor()?;
        opt.insert(name, (m, v));
    }
    let step = r.u64()?;

    let table = match tensors.remove("embedding.table") {
        Some(t) => t,
        None => return r.fail("missing parameter embedding.table"),
    };
    let embedding = Embedding::new(table).map_err(TrainerError::Tensor)?;
    let mut init_rng = Rng::new(0);
    let mut model = ReDecodeModel::init(config, embedding, &mut init_rng)?;

    let mut state = AdamState::new(&model);
    state.step = step;
    let mut idx = 0;
    let mut status: Result<()> = Ok(());
    model.visit_mut(&mut |name, param| {
        if status.is_err() {
            return;
        }
        match tensors.remove(&name) {
            None => {
                status = Err(TrainerError::Format {
                    path: path.to_path_buf(),
                    msg: format!("missing parameter {name}"),
                });
            }
            Some(t) if t.shape() != param.shape() => {
                status = Err(TrainerError::Format {
                    path: path.to_path_buf(),
                    msg: format!("parameter {name} has shape {:?}, expected {:?}", t.shape(), param.shape()),
                });
            }
            Some(t) => {
                *param = t;
                if let Some((m, v)) = opt.remove(&name) {
                    if m.shape() != param.shape() || v.shape() != param.shape() {
                        status = Err(TrainerError::Format {
                            path: path.to_path_buf(),
                            msg: format!("optimizer state for {name} has wrong shape"),
                        });
                    } else {
                        state.m[idx] = m;
                        state.v[idx] = v;
                    }
                }
            }
        }
        idx += 1;
    });
    status?;
    if !tensors.is_empty() {
        let mut extra: Vec<&String> = tensors.keys().collect();
        extra.sort();
        return Err(TrainerError::Format {
            path: path.to_path_buf(),
            msg: format!("unknown parameters in checkpoint: {extra:?}"),
        });
    }
    Ok((model, state, extras))
}
