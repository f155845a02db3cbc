//! Command-line plumbing: flat key=value run configs, the model variants,
//! and the train / generate / eval / attn-dump commands.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::corpus::{
    load_caption_groups, load_embeddings, load_pairs_tsv, preprocess_sentence, CorpusError,
    Vocabulary, PAD,
};
use crate::layers::Embedding;
use crate::metrics::{self, MetricsError};
use crate::model::{generate, AttentionMode, ModelConfig, ReDecodeModel};
use crate::tensor::{Rng, Tensor, TensorError};
use crate::trainer::{
    load_checkpoint, save_checkpoint_with, train, AdamState, TrainConfig, TrainerError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_MODEL: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Model(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Model(_) => EXIT_MODEL,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> Self {
        CliError::Model(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Model(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Model(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// The model variants: each fully determines the decoder count, the
/// first decoder's conditioning, and the multi-sample loss flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    VaeS,
    VaeVar,
    VaeIterdec2,
    VaeIterdec3,
    VaeItervar,
}

pub const VARIANT_NAMES: [&str; 5] =
    ["vae-s", "vae-var", "vae-iterdec2", "vae-iterdec3", "vae-itervar"];

impl Variant {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "vae-s" => Ok(Variant::VaeS),
            "vae-var" => Ok(Variant::VaeVar),
            "vae-iterdec2" => Ok(Variant::VaeIterdec2),
            "vae-iterdec3" => Ok(Variant::VaeIterdec3),
            "vae-itervar" => Ok(Variant::VaeItervar),
            other => Err(CliError::Usage(format!(
                "unknown variant {other:?}; valid variants: {}",
                VARIANT_NAMES.join(", ")
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::VaeS => "vae-s",
            Variant::VaeVar => "vae-var",
            Variant::VaeIterdec2 => "vae-iterdec2",
            Variant::VaeIterdec3 => "vae-iterdec3",
            Variant::VaeItervar => "vae-itervar",
        }
    }

    pub fn num_decoders(&self) -> usize {
        match self {
            Variant::VaeS | Variant::VaeVar => 1,
            Variant::VaeIterdec2 | Variant::VaeItervar => 2,
            Variant::VaeIterdec3 => 3,
        }
    }

    pub fn attention_mode(&self) -> AttentionMode {
        match self {
            Variant::VaeS => AttentionMode::FinalState,
            _ => AttentionMode::Memory,
        }
    }

    pub fn multisample(&self) -> bool {
        matches!(self, Variant::VaeVar | Variant::VaeItervar)
    }
}

/// Everything a run needs, read from a flat key=value file
/// (`#` starts a comment line).
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub variant: Variant,
    pub data: Option<PathBuf>,
    pub captions: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub embedding_dim: usize,
    pub hidden_units: usize,
    pub latent_dim: usize,
    pub max_len: usize,
    pub min_frequency: usize,
    pub multisample_weight: f64,
    pub multisample_ce_all: bool,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<RunConfig> {
        let mut map: HashMap<&str, &str> = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    map.insert(k.trim(), v.trim());
                }
                None => {
                    return Err(CliError::Usage(format!(
                        "config line {}: expected key=value, got {line:?}",
                        lineno + 1
                    )))
                }
            }
        }

        let variant = match map.remove("variant") {
            Some(name) => Variant::parse(name)?,
            None => return Err(CliError::Usage("config is missing required key: variant".into())),
        };
        let mut cfg = RunConfig {
            variant,
            data: None,
            captions: None,
            embeddings: None,
            embedding_dim: 300,
            hidden_units: 600,
            latent_dim: 1100,
            max_len: 15,
            min_frequency: 1,
            multisample_weight: 1.0,
            multisample_ce_all: false,
            train: TrainConfig::default(),
        };
        let parse_num = |key: &str, v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| CliError::Usage(format!("config key {key}: {v:?} is not a number")))
        };
        let parse_int = |key: &str, v: &str| -> Result<u64> {
            v.parse()
                .map_err(|_| CliError::Usage(format!("config key {key}: {v:?} is not an integer")))
        };
        let parse_bool = |key: &str, v: &str| -> Result<bool> {
            v.parse()
                .map_err(|_| CliError::Usage(format!("config key {key}: {v:?} is not a bool")))
        };
        let rel = |v: &str| -> PathBuf {
            let p = PathBuf::from(v);
            if p.is_absolute() { p } else { base.join(p) }
        };
        for (key, value) in map {
            match key {
                "data" => cfg.data = Some(rel(value)),
                "captions" => cfg.captions = Some(rel(value)),
                "embeddings" => cfg.embeddings = Some(rel(value)),
                "embedding_dim" => cfg.embedding_dim = parse_int(key, value)? as usize,
                "hidden_units" => cfg.hidden_units = parse_int(key, value)? as usize,
                "latent_dim" => cfg.latent_dim = parse_int(key, value)? as usize,
                "max_len" => cfg.max_len = parse_int(key, value)? as usize,
                "min_frequency" => cfg.min_frequency = parse_int(key, value)? as usize,
                "multisample_weight" => cfg.multisample_weight = parse_num(key, value)?,
                "multisample_ce_all" => cfg.multisample_ce_all = parse_bool(key, value)?,
                "learning_rate" => cfg.train.learning_rate = parse_num(key, value)?,
                "clip_norm" => cfg.train.clip_norm = parse_num(key, value)?,
                "kl_anneal_steps" => cfg.train.kl_anneal_steps = parse_int(key, value)?,
                "word_dropout" => cfg.train.word_dropout = parse_num(key, value)?,
                "batch_size" => cfg.train.batch_size = parse_int(key, value)? as usize,
                "epochs" => cfg.train.epochs = parse_int(key, value)?,
                "seed" => cfg.train.seed = parse_int(key, value)?,
                other => {
                    return Err(CliError::Usage(format!("unknown config key: {other}")));
                }
            }
        }
        if let Some(seed) = seed_override()? {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            embedding_dim: self.embedding_dim,
            hidden_units: self.hidden_units,
            latent_dim: self.latent_dim,
            num_decoders: self.variant.num_decoders(),
            max_len: self.max_len,
            attention_mode: self.variant.attention_mode(),
            multisample_enabled: self.variant.multisample(),
            multisample_weight: self.multisample_weight,
            multisample_ce_all: self.multisample_ce_all,
            vocab_size,
        }
    }
}

/// `REDECODE_SEED`, when set, overrides the configured seed everywhere.
pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var("REDECODE_SEED") {
        Ok(v) => v
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("REDECODE_SEED={v:?} is not an integer"))),
        Err(_) => Ok(None),
    }
}

/// Write a file via a temp sibling and atomic rename; readers never observe
/// a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mk_err = |e: std::io::Error| CliError::Data(format!("cannot write {}: {e}", path.display()));
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(mk_err)?;
    f.write_all(bytes).map_err(mk_err)?;
    f.sync_all().map_err(mk_err)?;
    fs::rename(&tmp, path).map_err(mk_err)?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Raw sentence pairs to preprocessed token pairs, dropping any pair where
/// either side is empty after cleaning or exceeds the length limit.
pub fn preprocess_pairs(raw: &[(String, String)]) -> Vec<(Vec<String>, Vec<String>)> {
    raw.iter()
        .filter_map(|(a, b)| {
            let a = preprocess_sentence(a, true)?;
            let b = preprocess_sentence(b, true)?;
            Some((a, b))
        })
        .collect()
}

fn load_training_pairs(cfg: &RunConfig) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let raw = match (&cfg.data, &cfg.captions) {
        (Some(path), None) => load_pairs_tsv(path)?,
        (None, Some(path)) => {
            let mut rng = Rng::substream(cfg.train.seed, 0xCAF0);
            load_caption_groups(path, &mut rng)?
        }
        (Some(_), Some(_)) => {
            return Err(CliError::Usage("config sets both data and captions; pick one".into()))
        }
        (None, None) => {
            return Err(CliError::Usage("config needs a data or captions path".into()))
        }
    };
    let pairs = preprocess_pairs(&raw);
    if pairs.is_empty() {
        return Err(CliError::Data("no usable pairs after preprocessing".into()));
    }
    Ok(pairs)
}

fn build_embedding(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Embedding> {
    let mut rng = Rng::substream(cfg.train.seed, 0xE0BED);
    let table = match &cfg.embeddings {
        Some(path) => {
            let (table, coverage) = load_embeddings(path, vocab, cfg.embedding_dim, &mut rng)?;
            eprintln!("embeddings: {} hits, {} misses", coverage.hits, coverage.misses);
            table
        }
        None => {
            let mut table = Tensor::xavier(vocab.size(), cfg.embedding_dim, &mut rng)?;
            let dim = cfg.embedding_dim;
            table.data_mut()[PAD * dim..(PAD + 1) * dim].iter_mut().for_each(|v| *v = 0.0);
            table
        }
    };
    Ok(Embedding::new(table)?)
}

fn ensure_dirs(out: &Path) -> Result<()> {
    for sub in ["checkpoints", "logs", "reports", "attn"] {
        fs::create_dir_all(out.join(sub))
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out.join(sub).display())))?;
    }
    Ok(())
}

const VOCAB_KEY: &str = "vocab";

fn load_model(ckpt: &Path) -> Result<(ReDecodeModel, AdamState, Vocabulary)> {
    let (model, state, extras) = load_checkpoint(ckpt)?;
    let tokens = extras
        .get(VOCAB_KEY)
        .ok_or_else(|| CliError::Model(format!("checkpoint {} has no vocabulary", ckpt.display())))?;
    let vocab = Vocabulary::from_tokens(tokens.split(' ').map(str::to_string).collect())
        .map_err(|e| CliError::Model(e.to_string()))?;
    if vocab.size() != model.config.vocab_size {
        return Err(CliError::Model(format!(
            "checkpoint vocabulary has {} tokens but the model expects {}",
            vocab.size(),
            model.config.vocab_size
        )));
    }
    Ok((model, state, vocab))
}

/// Train a model from a run config; writes `checkpoints/final.rdec` and a
/// per-step log under the output directory and prints the final
/// per-decoder CE and KL.
pub fn cmd_train(config_path: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    ensure_dirs(out)?;
    let pairs = load_training_pairs(&cfg)?;
    let vocab = Vocabulary::build(&pairs, cfg.min_frequency)?;
    let embedding = build_embedding(&cfg, &vocab)?;
    let mut rng = Rng::substream(cfg.train.seed, 0x11117);
    let mut model = ReDecodeModel::init(cfg.model_config(vocab.size()), embedding, &mut rng)?;
    let mut state = AdamState::new(&model);

    let mut log = String::new();
    let mut last = None;
    train(&mut model, &mut state, &vocab, &pairs, &cfg.train, |stats| {
        log.push_str(&stats.log_line());
        log.push('\n');
        last = Some(stats.clone());
    })?;
    write_atomic(&out.join("logs").join("train.log"), log.as_bytes())?;

    let vocab_entry = (VOCAB_KEY.to_string(), vocab.tokens().join(" "));
    save_checkpoint_with(&out.join("checkpoints").join("final.rdec"), &model, &state, &[vocab_entry])?;

    if let Some(stats) = last {
        let ces: Vec<String> = stats.per_decoder_ce.iter().map(|c| format!("{c:.4}")).collect();
        println!("final step {}: ce [{}] kl {:.4}", stats.step, ces.join(", "), stats.kl);
    }
    Ok(())
}

fn encode_input(vocab: &Vocabulary, sentence: &str, what: &str) -> Result<Vec<usize>> {
    let tokens = preprocess_sentence(sentence, true)
        .ok_or_else(|| CliError::Data(format!("{what}: empty or over-long after preprocessing: {sentence:?}")))?;
    Ok(vocab.encode(&tokens))
}

/// Generate paraphrases for each input line, one `decoder<TAB>text` line
/// per decoder; output goes to the returned string (printed by the binary).
pub fn cmd_generate(ckpt: &Path, input: &Path, seed: u64) -> Result<String> {
    let (model, _, vocab) = load_model(ckpt)?;
    let seed = seed_override()?.unwrap_or(seed);
    let lines = read_lines(input)?;
    let mut out = String::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ids = encode_input(&vocab, line, &format!("input line {}", i + 1))?;
        let mut rng = Rng::substream(seed, i as u64);
        let traces = generate(&model, &ids, &mut rng)?;
        for (d, trace) in traces.iter().enumerate() {
            let text = vocab.detokenize(&trace.token_ids).join(" ");
            out.push_str(&format!("{}\t{}\n", d + 1, text));
        }
    }
    Ok(out)
}

/// Generate for every pair's original sentence and score each decoder's
/// outputs against the references and against the next decoder. Writes
/// `reports/report.txt` and `reports/report.csv`; returns the table.
pub fn cmd_eval(ckpt: &Path, pairs_path: &Path, out: &Path, seed: u64) -> Result<String> {
    let (model, _, vocab) = load_model(ckpt)?;
    let seed = seed_override()?.unwrap_or(seed);
    ensure_dirs(out)?;
    let pairs = preprocess_pairs(&load_pairs_tsv(pairs_path)?);
    if pairs.is_empty() {
        return Err(CliError::Data("no usable pairs after preprocessing".into()));
    }
    let mut outputs: Vec<Vec<Vec<String>>> = vec![Vec::new(); model.config.num_decoders];
    let mut references = Vec::new();
    for (i, (original, paraphrase)) in pairs.iter().enumerate() {
        let ids = vocab.encode(original);
        let mut rng = Rng::substream(seed, i as u64);
        let traces = generate(&model, &ids, &mut rng)?;
        for (d, trace) in traces.iter().enumerate() {
            outputs[d].push(vocab.detokenize(&trace.token_ids));
        }
        references.push(paraphrase.clone());
    }
    let report = metrics::evaluate_corpus(&outputs, &references)?;
    let mut all = report.vs_reference.clone();
    all.extend(report.between_decoders.iter().cloned());
    let table = format!(
        "== decoders vs reference ==\n{}\n== decoder vs next decoder ==\n{}",
        metrics::render_table(&report.vs_reference),
        metrics::render_table(&report.between_decoders)
    );
    write_atomic(&out.join("reports").join("report.txt"), table.as_bytes())?;
    write_atomic(&out.join("reports").join("report.csv"), metrics::render_csv(&all).as_bytes())?;
    Ok(table)
}

/// Greedily generate from one sentence and dump each decoder's attention
/// matrix as CSV into the output directory (`decoder1.csv`, ...). Rows are
/// generated tokens; columns are the attended memory: the input tokens for
/// decoder 1 (or its final-state summary), the previous decoder's emitted
/// tokens for later decoders.
pub fn cmd_attn_dump(ckpt: &Path, sentence: &str, out: &Path, seed: u64) -> Result<()> {
    let (model, _, vocab) = load_model(ckpt)?;
    let seed = seed_override()?.unwrap_or(seed);
    fs::create_dir_all(out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out.display())))?;
    let ids = encode_input(&vocab, sentence, "sentence")?;
    let mut rng = Rng::substream(seed, 0);
    let traces = generate(&model, &ids, &mut rng)?;

    let mut prev_tokens: Vec<String> = ids.iter().map(|&id| vocab.token(id).to_string()).collect();
    if model.config.attention_mode == AttentionMode::FinalState {
        prev_tokens = vec!["final_state".to_string()];
    }
    for (d, trace) in traces.iter().enumerate() {
        let weights = &trace.attention_weights;
        let (rows, cols) = (weights.shape()[0], weights.shape()[1]);
        if cols != prev_tokens.len() {
            return Err(CliError::Model(format!(
                "decoder {} attention has {} columns for {} memory labels",
                d + 1,
                cols,
                prev_tokens.len()
            )));
        }
        let mut csv = String::new();
        csv.push_str(&format!(",{}\n", prev_tokens.join(",")));
        for r in 0..rows {
            let label = vocab.token(trace.token_ids[r]);
            let row: Vec<String> =
                (0..cols).map(|c| format!("{:.6}", weights.data()[r * cols + c])).collect();
            csv.push_str(&format!("{label},{}\n", row.join(",")));
        }
        write_atomic(&out.join(format!("decoder{}.csv", d + 1)), csv.as_bytes())?;
        // the next decoder attends over this decoder's emitted tokens
        prev_tokens = trace.token_ids.iter().map(|&id| vocab.token(id).to_string()).collect();
    }
    Ok(())
}
