//! Evaluation measures: BLEU, METEOR and TER, plus a corpus harness that
//! scores decoder outputs against references and against each other.
//!
//! These are self-contained re-implementations. Absolute values can differ
//! slightly from external scoring tools (BLEU smoothing variants, METEOR
//! versions); the definitions used here are documented on each function.

use std::collections::{HashMap, HashSet};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("metrics: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(MetricsError::Contract(msg.into()))
}

// --- BLEU -------------------------------------------------------------------

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU: geometric mean of modified n-gram precisions for n = 1..4
/// with uniform weights, times the brevity penalty. Counts are clipped
/// against the single reference and pooled over the corpus. With
/// `smoothing`, higher-order precisions get add-one smoothing so short
/// sentences don't zero the score; without it any zero precision gives 0.
pub fn bleu_corpus_opts(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
    smoothing: bool,
) -> Result<f64> {
    if candidates.is_empty() {
        return contract("bleu: empty corpus");
    }
    if candidates.len() != references.len() {
        return contract(format!(
            "bleu: {} candidates vs {} references",
            candidates.len(),
            references.len()
        ));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, reference) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += reference.len();
        for n in 1..=4 {
            let rc = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(cand, n) {
                matches[n - 1] += count.min(*rc.get(gram).unwrap_or(&0));
            }
            totals[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (mut num, mut den) = (matches[n - 1] as f64, totals[n - 1] as f64);
        if smoothing && n >= 2 {
            num += 1.0;
            den += 1.0;
        }
        if num == 0.0 || den == 0.0 {
            return Ok(0.0);
        }
        log_sum += (num / den).ln();
    }
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * (log_sum / 4.0).exp())
}

pub fn bleu_corpus(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    bleu_corpus_opts(candidates, references, true)
}

pub fn bleu_sentence(candidate: &[String], reference: &[String]) -> Result<f64> {
    bleu_corpus(
        std::slice::from_ref(&candidate.to_vec()),
        std::slice::from_ref(&reference.to_vec()),
    )
}

// --- Porter stemmer ---------------------------------------------------------

fn is_cons(b: &[u8], i: usize) -> bool {
    match b[i] {
        b'a' | b'e' | b'i' | b'o' | b'u' => false,
        b'y' => i == 0 || !is_cons(b, i - 1),
        _ => true,
    }
}

/// Number of VC sequences in the form `[C](VC)^m[V]`.
fn measure(b: &[u8]) -> usize {
    let mut m = 0;
    let mut prev_vowel = false;
    for i in 0..b.len() {
        let vowel = !is_cons(b, i);
        if prev_vowel && !vowel {
            m += 1;
        }
        prev_vowel = vowel;
    }
    m
}

fn has_vowel(b: &[u8]) -> bool {
    (0..b.len()).any(|i| !is_cons(b, i))
}

fn ends_double_cons(b: &[u8]) -> bool {
    let n = b.len();
    n >= 2 && b[n - 1] == b[n - 2] && is_cons(b, n - 1)
}

/// consonant-vowel-consonant ending where the final consonant is not w, x
/// or y.
fn ends_cvc(b: &[u8]) -> bool {
    let n = b.len();
    n >= 3
        && is_cons(b, n - 3)
        && !is_cons(b, n - 2)
        && is_cons(b, n - 1)
        && !matches!(b[n - 1], b'w' | b'x' | b'y')
}

fn ends_with(b: &[u8], suffix: &str) -> bool {
    b.ends_with(suffix.as_bytes())
}

fn replace_if(b: &mut Vec<u8>, suffix: &str, replacement: &str, min_measure: usize) -> bool {
    if !ends_with(b, suffix) {
        return false;
    }
    let stem = b.len() - suffix.len();
    if measure(&b[..stem]) > min_measure {
        b.truncate(stem);
        b.extend_from_slice(replacement.as_bytes());
    }
    // the suffix matched, so the step is done even if the condition failed
    true
}

/// Classic Porter stemming. Words shorter than three letters or containing
/// anything outside a-z are returned unchanged.
pub fn porter_stem(word: &str) -> String {
    if word.len() <= 2 || !word.bytes().all(|c| c.is_ascii_lowercase()) {
        return word.to_string();
    }
    let mut b: Vec<u8> = word.bytes().collect();

    // step 1a
    if ends_with(&b, "sses") || ends_with(&b, "ies") {
        b.truncate(b.len() - 2);
    } else if !ends_with(&b, "ss") && ends_with(&b, "s") {
        b.truncate(b.len() - 1);
    }

    // step 1b
    if ends_with(&b, "eed") {
        if measure(&b[..b.len() - 3]) > 0 {
            b.truncate(b.len() - 1);
        }
    } else {
        let stripped = if ends_with(&b, "ed") && has_vowel(&b[..b.len() - 2]) {
            b.truncate(b.len() - 2);
            true
        } else if ends_with(&b, "ing") && has_vowel(&b[..b.len() - 3]) {
            b.truncate(b.len() - 3);
            true
        } else {
            false
        };
        if stripped {
            if ends_with(&b, "at") || ends_with(&b, "bl") || ends_with(&b, "iz") {
                b.push(b'e');
            } else if ends_double_cons(&b) && !matches!(b[b.len() - 1], b'l' | b's' | b'z') {
                b.truncate(b.len() - 1);
            } else if measure(&b) == 1 && ends_cvc(&b) {
                b.push(b'e');
            }
        }
    }

    // step 1c
    if ends_with(&b, "y") && has_vowel(&b[..b.len() - 1]) {
        let n = b.len();
        b[n - 1] = b'i';
    }

    // step 2 (longest suffix first; the first match ends the step)
    const STEP2: &[(&str, &str)] = &[
        ("ization", "ize"),
        ("ational", "ate"),
        ("iveness", "ive"),
        ("fulness", "ful"),
        ("ousness", "ous"),
        ("tional", "tion"),
        ("biliti", "ble"),
        ("entli", "ent"),
        ("ousli", "ous"),
        ("ation", "ate"),
        ("alism", "al"),
        ("aliti", "al"),
        ("iviti", "ive"),
        ("enci", "ence"),
        ("anci", "ance"),
        ("izer", "ize"),
        ("abli", "able"),
        ("alli", "al"),
        ("ator", "ate"),
        ("eli", "e"),
    ];
    for (suffix, replacement) in STEP2 {
        if replace_if(&mut b, suffix, replacement, 0) {
            break;
        }
    }

    // step 3
    const STEP3: &[(&str, &str)] = &[
        ("icate", "ic"),
        ("ative", ""),
        ("alize", "al"),
        ("iciti", "ic"),
        ("ical", "ic"),
        ("ness", ""),
        ("ful", ""),
    ];
    for (suffix, replacement) in STEP3 {
        if replace_if(&mut b, suffix, replacement, 0) {
            break;
        }
    }

    // step 4
    const STEP4: &[&str] = &[
        "ement", "ance", "ence", "able", "ible", "ment", "ant", "ent", "ion", "ism", "ate", "iti",
        "ous", "ive", "ize", "al", "er", "ic", "ou",
    ];
    for suffix in STEP4 {
        if ends_with(&b, suffix) {
            let stem = b.len() - suffix.len();
            let ok = measure(&b[..stem]) > 1
                && (*suffix != "ion" || matches!(b[stem.wrapping_sub(1)], b's' | b't'));
            if ok {
                b.truncate(stem);
            }
            break;
        }
    }

    // step 5a
    if ends_with(&b, "e") {
        let stem = &b[..b.len() - 1];
        let m = measure(stem);
        if m > 1 || (m == 1 && !ends_cvc(stem)) {
            b.truncate(b.len() - 1);
        }
    }
    // step 5b
    if measure(&b) > 1 && ends_double_cons(&b) && b[b.len() - 1] == b'l' {
        b.truncate(b.len() - 1);
    }

    String::from_utf8(b).unwrap()
}

// --- METEOR -----------------------------------------------------------------

/// Optional synonym stage lookup. Empty by default; entries are symmetric.
#[derive(Debug, Default, Clone)]
pub struct SynonymTable {
    map: HashMap<String, HashSet<String>>,
}

impl SynonymTable {
    pub fn add(&mut self, a: &str, b: &str) {
        self.map.entry(a.to_string()).or_default().insert(b.to_string());
        self.map.entry(b.to_string()).or_default().insert(a.to_string());
    }

    pub fn are_synonyms(&self, a: &str, b: &str) -> bool {
        self.map.get(a).is_some_and(|s| s.contains(b))
    }
}

fn meteor_compatible(c: &str, r: &str, synonyms: &SynonymTable) -> bool {
    c == r || porter_stem(c) == porter_stem(r) || synonyms.are_synonyms(c, r)
}

/// Kuhn's augmenting-path maximum bipartite matching.
fn max_matching(adj: &[Vec<usize>], n_right: usize) -> usize {
    fn try_augment(
        u: usize,
        adj: &[Vec<usize>],
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                if owner[v].is_none() || try_augment(owner[v].unwrap(), adj, seen, owner) {
                    owner[v] = Some(u);
                    return true;
                }
            }
        }
        false
    }
    let mut owner = vec![None; n_right];
    let mut size = 0;
    for u in 0..adj.len() {
        let mut seen = vec![false; n_right];
        if try_augment(u, adj, &mut seen, &mut owner) {
            size += 1;
        }
    }
    size
}

/// Fewest chunks over all alignments of exactly `m` matched pairs, where a
/// chunk is a maximal run of candidate positions mapped to consecutive
/// reference positions. Dynamic program over (candidate prefix, set of used
/// reference positions, last used reference position).
fn min_chunks(adj: &[Vec<usize>], n_cand: usize, m: usize) -> usize {
    // state key: (mask of used reference positions, last reference + 1)
    let mut layer: HashMap<(u32, u32), u32> = HashMap::new();
    layer.insert((0, 0), 0);
    for i in 0..n_cand {
        let mut next: HashMap<(u32, u32), u32> = HashMap::new();
        let push = |key: (u32, u32), chunks: u32, out: &mut HashMap<(u32, u32), u32>| {
            let e = out.entry(key).or_insert(u32::MAX);
            *e = (*e).min(chunks);
        };
        for (&(mask, last), &chunks) in &layer {
            // skip candidate i
            push((mask, 0), chunks, &mut next);
            for &r in &adj[i] {
                if mask & (1 << r) == 0 {
                    let contiguous = last > 0 && r as u32 == last;
                    let inc = if contiguous { 0 } else { 1 };
                    push((mask | (1 << r), r as u32 + 1), chunks + inc, &mut next);
                }
            }
        }
        layer = next;
        // conservative fallback for pathological duplicate-heavy inputs
        if layer.len() > 400_000 {
            return m;
        }
    }
    layer
        .iter()
        .filter(|((mask, _), _)| mask.count_ones() as usize == m)
        .map(|(_, &c)| c as usize)
        .min()
        .unwrap_or(m)
}

/// METEOR with the classic constants: unigram alignment over exact, stem and
/// synonym stages, maximizing matches then minimizing chunks;
/// `P = m/|cand|`, `R = m/|ref|`, `F = 10PR/(R + 9P)`,
/// `penalty = 0.5 (chunks/m)^3`, `score = F (1 - penalty)`. Zero matches
/// score 0. Reported on [0, 1].
pub fn meteor_score_with(candidate: &[String], reference: &[String], synonyms: &SynonymTable) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let adj: Vec<Vec<usize>> = candidate
        .iter()
        .map(|c| {
            reference
                .iter()
                .enumerate()
                .filter(|(_, r)| meteor_compatible(c, r, synonyms))
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    let m = max_matching(&adj, reference.len());
    if m == 0 {
        return 0.0;
    }
    let chunks = min_chunks(&adj, candidate.len(), m);
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

pub fn meteor_score(candidate: &[String], reference: &[String]) -> f64 {
    meteor_score_with(candidate, reference, &SynonymTable::default())
}

// --- TER --------------------------------------------------------------------

/// Word-level Levenshtein distance.
pub fn levenshtein(a: &[String], b: &[String]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn apply_shift(tokens: &[String], start: usize, len: usize, dest: usize) -> Vec<String> {
    let mut rest: Vec<String> = Vec::with_capacity(tokens.len());
    rest.extend_from_slice(&tokens[..start]);
    rest.extend_from_slice(&tokens[start + len..]);
    let mut out = Vec::with_capacity(tokens.len());
    out.extend_from_slice(&rest[..dest]);
    out.extend_from_slice(&tokens[start..start + len]);
    out.extend_from_slice(&rest[dest..]);
    out
}

/// Edit distance achievable with unlimited free block shifts: shifts cannot
/// change the token multiset, so at most the multiset overlap can ever be
/// matched. Admissible lower bound for the shift search.
fn multiset_edit_bound(a: &[String], b: &[String]) -> usize {
    let mut counts: HashMap<&String, isize> = HashMap::new();
    for t in a {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0;
    for t in b {
        let c = counts.entry(t).or_insert(0);
        if *c > 0 {
            *c -= 1;
            overlap += 1;
        }
    }
    a.len().max(b.len()) - overlap
}

/// Node budget for the shift search; past it the best total found so far is
/// reported, which is an upper bound on the true minimum.
const TER_SEARCH_CAP: usize = 100_000;

/// Edit + shift counts behind `ter_score`: minimum over block-shift
/// sequences of (number of shifts + remaining word-level edit distance).
/// Breadth-first over shifted orderings, pruned with the multiset bound.
pub fn ter_edits(candidate: &[String], reference: &[String]) -> usize {
    let mut best = levenshtein(candidate, reference);
    let bound = multiset_edit_bound(candidate, reference);
    if best <= bound {
        return best;
    }
    let mut visited: HashSet<Vec<String>> = HashSet::new();
    visited.insert(candidate.to_vec());
    let mut layer = vec![candidate.to_vec()];
    let mut depth = 0usize;
    while !layer.is_empty() && depth + 1 + bound < best && visited.len() < TER_SEARCH_CAP {
        let mut next = Vec::new();
        for current in &layer {
            let n = current.len();
            for start in 0..n {
                for len in 1..=n - start {
                    for dest in 0..=n - len {
                        if dest == start {
                            continue;
                        }
                        let shifted = apply_shift(current, start, len, dest);
                        if visited.insert(shifted.clone()) {
                            best = best.min(depth + 1 + levenshtein(&shifted, reference));
                            next.push(shifted);
                        }
                    }
                }
            }
            if visited.len() >= TER_SEARCH_CAP {
                break;
            }
        }
        layer = next;
        depth += 1;
    }
    best
}

/// Translation edit rate: `(insertions + deletions + substitutions +
/// shifts) / |ref|`, on [0, ∞), lower is better.
pub fn ter_score(candidate: &[String], reference: &[String]) -> Result<f64> {
    if reference.is_empty() {
        return contract("ter: empty reference");
    }
    Ok(ter_edits(candidate, reference) as f64 / reference.len() as f64)
}

// --- corpus harness ---------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceScores {
    pub meteor: f64,
    pub bleu: f64,
    pub ter: f64,
}

#[derive(Debug, Clone)]
pub struct ScoreReport {
    pub system: String,
    pub meteor: f64,
    pub bleu: f64,
    pub ter: f64,
    pub per_sentence: Vec<SentenceScores>,
}

/// Score one system. Corpus BLEU as defined above; METEOR averaged over
/// sentences; TER as total edits over total reference length. All reported
/// as percentages. An empty reference contributes its candidate length to
/// the TER numerator and nothing to the denominator.
pub fn score_system(
    system: &str,
    candidates: &[Vec<String>],
    references: &[Vec<String>],
) -> Result<ScoreReport> {
    if candidates.is_empty() {
        return contract("score_system: empty corpus");
    }
    if candidates.len() != references.len() {
        return contract(format!(
            "score_system: {} candidates vs {} references",
            candidates.len(),
            references.len()
        ));
    }
    let bleu = bleu_corpus(candidates, references)?;
    let mut meteor_sum = 0.0;
    let mut edits = 0usize;
    let mut ref_len = 0usize;
    let mut per_sentence = Vec::with_capacity(candidates.len());
    for (cand, reference) in candidates.iter().zip(references) {
        let meteor = 100.0 * meteor_score(cand, reference);
        let sent_edits = if reference.is_empty() { cand.len() } else { ter_edits(cand, reference) };
        let sent_ter = 100.0 * sent_edits as f64 / reference.len().max(1) as f64;
        meteor_sum += meteor;
        edits += sent_edits;
        ref_len += reference.len();
        per_sentence.push(SentenceScores {
            meteor,
            bleu: bleu_sentence(cand, reference)?,
            ter: sent_ter,
        });
    }
    Ok(ScoreReport {
        system: system.to_string(),
        meteor: meteor_sum / candidates.len() as f64,
        bleu,
        ter: 100.0 * edits as f64 / ref_len.max(1) as f64,
        per_sentence,
    })
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// One entry per decoder, scored against the references.
    pub vs_reference: Vec<ScoreReport>,
    /// Decoder i scored against decoder i+1 (consecutive outputs compared).
    pub between_decoders: Vec<ScoreReport>,
}

/// Score every decoder's outputs against the references, and each decoder
/// against the next one in the chain.
pub fn evaluate_corpus(
    decoder_outputs: &[Vec<Vec<String>>],
    references: &[Vec<String>],
) -> Result<EvalReport> {
    if decoder_outputs.is_empty() {
        return contract("evaluate_corpus: no decoder outputs");
    }
    for (i, outputs) in decoder_outputs.iter().enumerate() {
        if outputs.len() != references.len() {
            return contract(format!(
                "evaluate_corpus: decoder {} produced {} outputs for {} references",
                i + 1,
                outputs.len(),
                references.len()
            ));
        }
    }
    let mut vs_reference = Vec::new();
    for (i, outputs) in decoder_outputs.iter().enumerate() {
        vs_reference.push(score_system(&format!("decoder{}", i + 1), outputs, references)?);
    }
    let mut between_decoders = Vec::new();
    for i in 0..decoder_outputs.len().saturating_sub(1) {
        between_decoders.push(score_system(
            &format!("decoder{}_vs_decoder{}", i + 1, i + 2),
            &decoder_outputs[i],
            &decoder_outputs[i + 1],
        )?);
    }
    Ok(EvalReport { vs_reference, between_decoders })
}

/// Human-readable table with METEOR, BLEU and TER columns.
pub fn render_table(reports: &[ScoreReport]) -> String {
    let width = reports.iter().map(|r| r.system.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:width$}  {:>8}  {:>8}  {:>8}\n", "system", "METEOR", "BLEU", "TER");
    for r in reports {
        out.push_str(&format!(
            "{:width$}  {:>8.2}  {:>8.2}  {:>8.2}\n",
            r.system, r.meteor, r.bleu, r.ter
        ));
    }
    out
}

/// Machine-readable report with the fixed header `system,meteor,bleu,ter`.
pub fn render_csv(reports: &[ScoreReport]) -> String {
    let mut out = String::from("system,meteor,bleu,ter\n");
    for r in reports {
        out.push_str(&format!("{},{:.4},{:.4},{:.4}\n", r.system, r.meteor, r.bleu, r.ter));
    }
    out
}
