//! Dataset ingestion, preprocessing, vocabulary and batching.
//!
//! Sentences are lowercased, stripped of punctuation and whitespace-split;
//! pairs where either side exceeds 15 content tokens are rejected. Stored
//! sequences are 16 ids long: up to 15 content tokens, one EOS, PAD suffix.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::tensor::{Rng, Tensor};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;

/// Maximum content tokens per sentence.
pub const MAX_CONTENT_LEN: usize = 15;
/// Stored sequence length: content + EOS, PAD-extended.
pub const STORED_LEN: usize = MAX_CONTENT_LEN + 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// Lowercase, strip punctuation, whitespace-split. Returns `None` when the
/// result is empty or longer than 15 tokens.
pub fn preprocess_sentence(raw: &str, lowercase: bool) -> Option<Vec<String>> {
    let cleaned: String = raw.chars().filter(|c| !is_punctuation(*c)).collect();
    let cleaned = if lowercase {
        cleaned.to_lowercase()
    } else {
        cleaned
    };
    let tokens: Vec<String> = cleaned.split_whitespace().map(str::to_owned).collect();
    if tokens.is_empty() || tokens.len() > MAX_CONTENT_LEN {
        None
    } else {
        Some(tokens)
    }
}

/// Token table with fixed special ids PAD=0, UNK=1, SOS=2, EOS=3.
/// Non-special ids are assigned by descending frequency, ties lexicographic.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    pub min_frequency: usize,
}

impl Vocabulary {
    pub fn build(pairs: &[(Vec<String>, Vec<String>)], min_frequency: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(CorpusError::Contract("cannot build vocabulary from empty corpus".into()));
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for (a, b) in pairs {
            for tok in a.iter().chain(b) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|(_, n)| *n >= min_frequency.max(1))
            .collect();
        entries.sort_by(|(ta, na), (tb, nb)| nb.cmp(na).then_with(|| ta.cmp(tb)));

        let mut id_to_token: Vec<String> =
            ["<pad>", "<unk>", "<sos>", "<eos>"].iter().map(|s| s.to_string()).collect();
        id_to_token.extend(entries.iter().map(|(t, _)| t.to_string()));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
            min_frequency,
        })
    }

    /// Rebuild a vocabulary from its full id-ordered token list, as stored
    /// in checkpoints.
    pub fn from_tokens(id_to_token: Vec<String>) -> Result<Self> {
        let specials = ["<pad>", "<unk>", "<sos>", "<eos>"];
        if id_to_token.len() < specials.len()
            || id_to_token[..specials.len()].iter().map(String::as_str).ne(specials)
        {
            return Err(CorpusError::Contract(
                "token list must start with <pad> <unk> <sos> <eos>".into(),
            ));
        }
        let token_to_id: HashMap<String, usize> =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if token_to_id.len() != id_to_token.len() {
            return Err(CorpusError::Contract("duplicate token in vocabulary list".into()));
        }
        Ok(Vocabulary { token_to_id, id_to_token, min_frequency: 1 })
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn encode_token(&self, token: &str) -> usize {
        *self.token_to_id.get(token).unwrap_or(&UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.encode_token(t)).collect()
    }

    /// Content tokens only: specials are dropped, reading stops at EOS/PAD.
    pub fn detokenize(&self, ids: &[usize]) -> Vec<String> {
        let mut out = Vec::new();
        for &id in ids {
            if id == EOS || id == PAD {
                break;
            }
            if id != SOS {
                out.push(self.id_to_token[id].clone());
            }
        }
        out
    }
}

/// One preprocessed training pair, PAD-extended to `STORED_LEN`.
#[derive(Debug, Clone, PartialEq)]
pub struct SentencePair {
    pub original: Vec<usize>,
    pub paraphrase: Vec<usize>,
    pub original_len: usize,
    pub paraphrase_len: usize,
}

impl SentencePair {
    pub fn encode(vocab: &Vocabulary, original: &[String], paraphrase: &[String]) -> Result<Self> {
        if original.is_empty()
            || paraphrase.is_empty()
            || original.len() > MAX_CONTENT_LEN
            || paraphrase.len() > MAX_CONTENT_LEN
        {
            return Err(CorpusError::Contract(format!(
                "content lengths must be 1..={MAX_CONTENT_LEN}, got {} and {}",
                original.len(),
                paraphrase.len()
            )));
        }
        let pack = |tokens: &[String]| {
            let mut ids = vocab.encode(tokens);
            ids.push(EOS);
            ids.resize(STORED_LEN, PAD);
            ids
        };
        Ok(SentencePair {
            original: pack(original),
            paraphrase: pack(paraphrase),
            original_len: original.len(),
            paraphrase_len: paraphrase.len(),
        })
    }

    /// Content tokens of the original, no EOS/PAD.
    pub fn original_content(&self) -> &[usize] {
        &self.original[..self.original_len]
    }

    /// Target sequence for the decoder: paraphrase content plus EOS.
    pub fn target_with_eos(&self) -> &[usize] {
        &self.paraphrase[..self.paraphrase_len + 1]
    }

    /// 1.0 at content+EOS positions of the target, 0.0 at PAD.
    pub fn target_mask(&self) -> Vec<f64> {
        (0..STORED_LEN)
            .map(|i| if i <= self.paraphrase_len { 1.0 } else { 0.0 })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub pairs: Vec<SentencePair>,
}

/// Embedding-file coverage counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub hits: usize,
    pub misses: usize,
}

/// Load pretrained embeddings (`token v1 … vD` per line) into a `[V, dim]`
/// table aligned with `vocab`. PAD row is zero; vocabulary misses and the
/// UNK/SOS/EOS rows get seeded Xavier-style rows and are counted as misses.
pub fn load_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut Rng,
) -> Result<(Tensor, CoverageReport)> {
    let text = read_file(path)?;
    let mut rows: HashMap<String, Vec<f64>> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(' ');
        let token = fields.next().unwrap_or("").to_string();
        let values: std::result::Result<Vec<f64>, _> = fields.map(str::parse::<f64>).collect();
        let values = values.map_err(|e| CorpusError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: format!("bad number: {e}"),
        })?;
        if values.len() != dim {
            return Err(CorpusError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected {dim} values, got {}", values.len()),
            });
        }
        rows.insert(token, values);
    }

    let v = vocab.size();
    let mut table = Tensor::zeros(vec![v, dim]);
    let bound = (6.0 / (1 + dim) as f64).sqrt();
    let mut hits = 0;
    let mut misses = 0;
    for id in 0..v {
        if id == PAD {
            continue; // stays zero
        }
        let dst = id * dim;
        if id != UNK && id != SOS && id != EOS {
            if let Some(row) = rows.get(vocab.token(id)) {
                table.data_mut()[dst..dst + dim].copy_from_slice(row);
                hits += 1;
                continue;
            }
        }
        for j in 0..dim {
            table.data_mut()[dst + j] = rng.uniform(-bound, bound);
        }
        misses += 1;
    }
    Ok((table, CoverageReport { hits, misses }))
}

/// Tab-separated pair file. 2 columns keep every row; 3 columns keep only
/// label "1" rows.
pub fn load_pairs_tsv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = read_file(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.as_slice() {
            [a, b] => out.push((a.to_string(), b.to_string())),
            [a, b, label] => {
                if *label == "1" {
                    out.push((a.to_string(), b.to_string()));
                }
            }
            other => {
                return Err(CorpusError::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("expected 2 or 3 tab-separated columns, got {}", other.len()),
                });
            }
        }
    }
    Ok(out)
}

/// Caption-group file: one image per line, captions tab-separated. Per image
/// with at least 4 captions, 4 are chosen at random (seeded) and split into
/// two disjoint input-paraphrase pairs. Images with fewer are skipped.
pub fn load_caption_groups(path: &Path, rng: &mut Rng) -> Result<Vec<(String, String)>> {
    let text = read_file(path)?;
    if text.trim().is_empty() {
        return Err(CorpusError::Contract(format!(
            "caption-group file {} is empty",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let captions: Vec<&str> = line.split('\t').filter(|c| !c.is_empty()).collect();
        if captions.len() < 4 {
            continue;
        }
        let mut idx: Vec<usize> = (0..captions.len()).collect();
        rng.shuffle(&mut idx);
        let chosen = &idx[..4];
        out.push((captions[chosen[0]].to_string(), captions[chosen[1]].to_string()));
        out.push((captions[chosen[2]].to_string(), captions[chosen[3]].to_string()));
    }
    Ok(out)
}

/// Deterministically shuffled batches for one epoch. Encoding maps OOV to
/// UNK, appends EOS and pads to `STORED_LEN`.
pub fn make_batches(
    pairs: &[(Vec<String>, Vec<String>)],
    vocab: &Vocabulary,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if pairs.is_empty() {
        return Err(CorpusError::Contract("cannot batch an empty pair list".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = Rng::substream(seed, 0x10000 + epoch);
    rng.shuffle(&mut order);

    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size.max(1)) {
        let mut encoded = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let (a, b) = &pairs[i];
            encoded.push(SentencePair::encode(vocab, a, b)?);
        }
        batches.push(Batch { pairs: encoded });
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn preprocess_strips_punctuation_and_lowercases() {
        let got = preprocess_sentence("Is time travel a possibility?", true).unwrap();
        assert_eq!(got, toks("is time travel a possibility"));
    }

    #[test]
    fn preprocess_rejects_long_and_empty() {
        let long = (0..16).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        assert!(preprocess_sentence(&long, true).is_none());
        assert!(preprocess_sentence("", true).is_none());
        assert!(preprocess_sentence("?!...", true).is_none());
    }

    #[test]
    fn preprocess_handles_unicode_punctuation() {
        let got = preprocess_sentence("“hello” — world…", true).unwrap();
        assert_eq!(got, toks("hello world"));
    }

    #[test]
    fn vocab_frequency_order_and_threshold() {
        let pairs = vec![(toks("a b"), toks("a c"))];
        let v = Vocabulary::build(&pairs, 1).unwrap();
        assert_eq!(v.encode_token("a"), 4); // smallest non-special id
        assert_eq!(v.size(), 7);
        assert_eq!(v.token(PAD), "<pad>");

        let v2 = Vocabulary::build(&pairs, 2).unwrap();
        assert_eq!(v2.size(), 5);
        assert_eq!(v2.encode_token("b"), UNK);
        assert_eq!(v2.encode_token("c"), UNK);
        assert_eq!(v2.encode_token("a"), 4);
    }

    #[test]
    fn vocab_build_deterministic() {
        let pairs = vec![
            (toks("z q r"), toks("m n o")),
            (toks("r r z"), toks("n q m")),
        ];
        let a = Vocabulary::build(&pairs, 1).unwrap();
        let b = Vocabulary::build(&pairs, 1).unwrap();
        for t in ["z", "q", "r", "m", "n", "o"] {
            assert_eq!(a.encode_token(t), b.encode_token(t));
        }
    }

    #[test]
    fn vocab_empty_corpus_errors() {
        assert!(Vocabulary::build(&[], 1).is_err());
    }

    #[test]
    fn roundtrip_encode_detokenize() {
        let pairs = vec![(toks("the cat sat"), toks("a cat was sitting"))];
        let v = Vocabulary::build(&pairs, 1).unwrap();
        let sp = SentencePair::encode(&v, &toks("the cat sat"), &toks("a cat was sitting")).unwrap();
        assert_eq!(v.detokenize(&sp.original), toks("the cat sat"));
        assert_eq!(v.detokenize(&sp.paraphrase), toks("a cat was sitting"));
    }

    #[test]
    fn sentence_pair_invariants() {
        let pairs = vec![(toks("a b c"), toks("d e"))];
        let v = Vocabulary::build(&pairs, 1).unwrap();
        let sp = SentencePair::encode(&v, &toks("a b c"), &toks("d e")).unwrap();
        assert_eq!(sp.original.len(), STORED_LEN);
        assert_eq!(sp.original[3], EOS);
        assert!(sp.original[4..].iter().all(|&id| id == PAD));
        assert_eq!(sp.original.iter().filter(|&&id| id == EOS).count(), 1);
        assert_eq!(sp.target_with_eos(), &[sp.paraphrase[0], sp.paraphrase[1], EOS]);
        let mask = sp.target_mask();
        assert_eq!(mask.iter().filter(|&&m| m == 1.0).count(), 3);
        assert!(mask[3..].iter().all(|&m| m == 0.0));
    }

    #[test]
    fn tsv_label_filter() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pairs.tsv");
        let mut f = std::fs::File::create(&p).unwrap();
        writeln!(f, "q1\tq2\t1").unwrap();
        writeln!(f, "q3\tq4\t0").unwrap();
        writeln!(f, "q5\tq6").unwrap();
        drop(f);
        let rows = load_pairs_tsv(&p).unwrap();
        assert_eq!(rows, vec![("q1".into(), "q2".into()), ("q5".into(), "q6".into())]);
    }

    #[test]
    fn tsv_bad_column_count_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pairs.tsv");
        std::fs::write(&p, "a\tb\n1\t2\t3\t4\n").unwrap();
        let err = load_pairs_tsv(&p).unwrap_err().to_string();
        assert!(err.contains(":2"), "{err}");
    }

    #[test]
    fn caption_groups_pairing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("caps.tsv");
        std::fs::write(&p, "c1\tc2\tc3\tc4\tc5\nonly\ttwo\tcaps\n").unwrap();
        let mut rng = Rng::new(13);
        let pairs = load_caption_groups(&p, &mut rng).unwrap();
        // first image yields 2 pairs over 4 distinct captions; second skipped
        assert_eq!(pairs.len(), 2);
        let mut used: Vec<&str> = Vec::new();
        for (a, b) in &pairs {
            used.push(a);
            used.push(b);
        }
        used.sort_unstable();
        used.dedup();
        assert_eq!(used.len(), 4);

        let mut rng2 = Rng::new(13);
        let pairs2 = load_caption_groups(&p, &mut rng2).unwrap();
        assert_eq!(pairs, pairs2);
    }

    #[test]
    fn caption_groups_empty_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("caps.tsv");
        std::fs::write(&p, "").unwrap();
        assert!(load_caption_groups(&p, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn embeddings_parse_hits_and_misses() {
        let pairs = vec![(toks("the cat"), toks("a cat"))];
        let v = Vocabulary::build(&pairs, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.txt");
        std::fs::write(&p, "the 0.1 0.2 0.3\n").unwrap();
        let mut rng = Rng::new(4);
        let (table, report) = load_embeddings(&p, &v, 3, &mut rng).unwrap();
        let the_id = v.encode_token("the");
        assert_eq!(&table.data()[the_id * 3..the_id * 3 + 3], &[0.1, 0.2, 0.3]);
        assert!(table.data()[..3].iter().all(|x| *x == 0.0)); // PAD row zero
        assert_eq!(report.hits, 1);
        // cat, a, and the UNK/SOS/EOS rows are misses, seeded-random
        assert_eq!(report.misses, v.size() - 2);
        let cat_id = v.encode_token("cat");
        assert!(table.data()[cat_id * 3..cat_id * 3 + 3].iter().any(|x| *x != 0.0));
    }

    #[test]
    fn embeddings_dimension_mismatch_errors() {
        let pairs = vec![(toks("a"), toks("b"))];
        let v = Vocabulary::build(&pairs, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.txt");
        std::fs::write(&p, "a 0.1 0.2\n").unwrap();
        assert!(load_embeddings(&p, &v, 300, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn batch_sizes_and_shuffle_determinism() {
        let pairs: Vec<(Vec<String>, Vec<String>)> = (0..100)
            .map(|i| (toks(&format!("w{i} x")), toks(&format!("y w{i}"))))
            .collect();
        let v = Vocabulary::build(&pairs, 1).unwrap();
        let batches = make_batches(&pairs, &v, 32, 7, 0).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.pairs.len()).collect();
        assert_eq!(sizes, vec![32, 32, 32, 4]);

        let again = make_batches(&pairs, &v, 32, 7, 0).unwrap();
        assert_eq!(batches[0].pairs, again[0].pairs);

        let epoch1 = make_batches(&pairs, &v, 32, 7, 1).unwrap();
        assert_ne!(batches[0].pairs, epoch1[0].pairs);
    }
}
