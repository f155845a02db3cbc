//! Acceptance gate: every criterion below prints one `PASS: ...` line when
//! it holds and fails the test otherwise.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use redecode::cli;
use redecode::corpus::{make_batches, Batch, SentencePair, Vocabulary, EOS, PAD, SOS, STORED_LEN};
use redecode::layers::Embedding;
use redecode::metrics;
use redecode::model::{
    self, forward_train_with_noise, generate, AttentionMode, ModelConfig, NoisePlan, ReDecodeModel,
};
use redecode::tensor::{finite_diff_check, Graph, Rng, Tensor};
use redecode::trainer::{
    load_checkpoint, save_checkpoint_with, train_step, AdamState, TrainConfig,
};

fn pass(name: &str, detail: impl std::fmt::Display) {
    println!("PASS: {name} ({detail})");
}

fn pack(ids: &[usize]) -> Vec<usize> {
    let mut v = ids.to_vec();
    v.push(EOS);
    v.resize(STORED_LEN, PAD);
    v
}

fn pair(orig: &[usize], para: &[usize]) -> SentencePair {
    SentencePair {
        original: pack(orig),
        paraphrase: pack(para),
        original_len: orig.len(),
        paraphrase_len: para.len(),
    }
}

fn grad_check_config(multisample: bool) -> ModelConfig {
    ModelConfig {
        embedding_dim: 8,
        hidden_units: 12,
        latent_dim: 16,
        num_decoders: 2,
        max_len: 6,
        attention_mode: AttentionMode::Memory,
        multisample_enabled: multisample,
        multisample_weight: 0.5,
        multisample_ce_all: false,
        vocab_size: 20,
    }
}

fn model_from(cfg: ModelConfig, seed: u64) -> ReDecodeModel {
    let mut rng = Rng::new(seed);
    let table = Tensor::xavier(cfg.vocab_size, cfg.embedding_dim, &mut rng).unwrap();
    ReDecodeModel::init(cfg, Embedding::new(table).unwrap(), &mut rng).unwrap()
}

/// Gradient correctness: full training loss passes the finite-difference
/// check on every parameter tensor, three seeds, multisample both off and
/// on, under 60 seconds.
#[test]
fn gradient_correctness() {
    let start = Instant::now();
    let batch = Batch {
        pairs: vec![pair(&[4, 7, 9], &[9, 4]), pair(&[11, 5], &[5, 11, 6])],
    };
    let mut worst: f64 = 0.0;
    for seed in 0..3u64 {
        let multisample = seed == 1;
        let model = model_from(grad_check_config(multisample), seed);
        let mut noise_rng = Rng::substream(seed, 77);
        let plan = NoisePlan::draw(&mut noise_rng, &batch, &model.config);
        let n_params = {
            let mut g = Graph::new();
            model.bind(&mut g).vars().len()
        };
        let mut tensors = Vec::new();
        model.visit(&mut |name, t| tensors.push((name, t.clone())));
        assert_eq!(tensors.len(), n_params);

        let errs: Vec<(String, f64)> = (0..n_params)
            .into_par_iter()
            .map(|i| {
                let err = finite_diff_check(
                    &|g: &mut Graph, v| {
                        let mut vars = model.bind(g);
                        *vars.vars_mut()[i] = v;
                        let out = forward_train_with_noise(g, &model, &vars, &batch, &plan, 0.7, 0.0)?;
                        Ok(out.loss)
                    },
                    &tensors[i].1,
                    1e-5,
                )
                .unwrap();
                (tensors[i].0.clone(), err)
            })
            .collect();
        for (name, err) in errs {
            assert!(err <= 1e-3, "seed {seed} param {name}: gradient error {err}");
            worst = worst.max(err);
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "gradient check took {elapsed:?}");
    pass(
        "gradient correctness",
        format!("max rel err {worst:.2e} over 3 seeds in {elapsed:.1?}"),
    );
}

fn overfit_pairs() -> Vec<(Vec<String>, Vec<String>)> {
    let raw: [(&str, &str); 32] = [
        ("the cat is small", "the cat is tiny"),
        ("the dog is big", "the dog is large"),
        ("the bird is small", "the bird is tiny"),
        ("the fish is big", "the fish is large"),
        ("the sun is bright", "the sun looks bright"),
        ("the moon is pale", "the moon looks pale"),
        ("the car is red", "the car looks red"),
        ("the house is white", "the house looks white"),
        ("the tea is hot", "the tea feels hot"),
        ("the coffee is cold", "the coffee feels cold"),
        ("the wind is strong", "the wind feels strong"),
        ("the road is long", "the road looks long"),
        ("he likes old books", "he enjoys old books"),
        ("she likes new books", "she enjoys new books"),
        ("they like old songs", "they enjoy old songs"),
        ("we like new songs", "we enjoy new songs"),
        ("the cat can swim", "the cat swims well"),
        ("the dog can swim", "the dog swims well"),
        ("the bird can fly", "the bird flies well"),
        ("the train is fast", "the train is quick"),
        ("the horse is fast", "the horse is quick"),
        ("rain falls at night", "rain comes at night"),
        ("snow falls in winter", "snow comes in winter"),
        ("he shuts the door", "he closes the door"),
        ("she shuts the window", "she closes the window"),
        ("the man shuts the gate", "the man closes the gate"),
        ("the boy is small", "the boy is tiny"),
        ("the girl is fast", "the girl is quick"),
        ("the tea is cold", "the tea feels cold"),
        ("the coffee is hot", "the coffee feels hot"),
        ("the moon is bright", "the moon looks bright"),
        ("the sun is pale", "the sun looks pale"),
    ];
    raw.iter()
        .map(|(a, b)| {
            (
                a.split(' ').map(str::to_string).collect(),
                b.split(' ').map(str::to_string).collect(),
            )
        })
        .collect()
}

fn overfit_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        embedding_dim: 16,
        hidden_units: 32,
        latent_dim: 32,
        num_decoders: 2,
        max_len: 15,
        attention_mode: AttentionMode::Memory,
        multisample_enabled: false,
        multisample_weight: 1.0,
        multisample_ce_all: false,
        vocab_size,
    }
}

/// Overfit reproduction on 32 hand-written pairs, plus the evaluation
/// report machinery on the resulting model.
#[test]
fn overfit_and_report_machinery() {
    let start = Instant::now();
    let pairs = overfit_pairs();
    let vocab = Vocabulary::build(&pairs, 1).unwrap();
    assert!(
        (40..=80).contains(&vocab.size()),
        "overfit vocabulary size {} strayed from the intended scale",
        vocab.size()
    );

    let mut rng = Rng::new(7);
    let table = Tensor::xavier(vocab.size(), 16, &mut rng).unwrap();
    let mut model =
        ReDecodeModel::init(overfit_config(vocab.size()), Embedding::new(table).unwrap(), &mut rng)
            .unwrap();
    let mut state = AdamState::new(&model);
    let cfg = TrainConfig {
        learning_rate: 5e-3,
        kl_anneal_steps: 2000,
        batch_size: 8,
        seed: 7,
        ..TrainConfig::default()
    };
    let batches_per_epoch = 4;
    let mut mean_ce = f64::INFINITY;
    let mut cached_epoch = u64::MAX;
    let mut batches = Vec::new();
    while state.step < 2000 {
        let epoch = state.step / batches_per_epoch;
        if epoch != cached_epoch {
            batches = make_batches(&pairs, &vocab, cfg.batch_size, cfg.seed, epoch).unwrap();
            cached_epoch = epoch;
        }
        let idx = (state.step % batches_per_epoch) as usize;
        let batch = batches[idx].clone();
        let stats = train_step(&mut model, &mut state, &batch, &cfg, epoch, idx as u64).unwrap();
        mean_ce = stats.per_decoder_ce.iter().sum::<f64>() / stats.per_decoder_ce.len() as f64;
        if mean_ce < 0.02 {
            break;
        }
    }
    assert!(state.step <= 2000);
    assert!(mean_ce < 0.2, "final mean CE {mean_ce} after {} steps", state.step);

    // greedy generation from the last decoder reproduces the targets
    let mut total_tokens = 0usize;
    let mut matched = 0usize;
    let mut outputs = Vec::new();
    let mut references = Vec::new();
    for (i, (orig, para)) in pairs.iter().enumerate() {
        let ids = vocab.encode(orig);
        let mut gen_rng = Rng::substream(99, i as u64);
        let traces = generate(&model, &ids, &mut gen_rng).unwrap();
        let out_tokens = vocab.detokenize(&traces.last().unwrap().token_ids);
        for (t, tok) in para.iter().enumerate() {
            total_tokens += 1;
            if out_tokens.get(t) == Some(tok) {
                matched += 1;
            }
        }
        outputs.push(out_tokens);
        references.push(para.clone());
    }
    let token_acc = matched as f64 / total_tokens as f64;
    assert!(token_acc >= 0.9, "target token reproduction {token_acc:.3}");
    let bleu = metrics::bleu_corpus(&outputs, &references).unwrap();
    assert!(bleu >= 90.0, "overfit BLEU {bleu:.2}");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 600, "overfit run took {elapsed:?}");
    pass(
        "overfit reproduction",
        format!(
            "CE {mean_ce:.3}, token acc {:.1}%, BLEU {bleu:.1} in {} steps, {elapsed:.1?}",
            100.0 * token_acc,
            state.step
        ),
    );

    // cmd_eval on the overfit model emits both comparison blocks with all
    // three metrics populated
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("overfit.rdec");
    let vocab_entry = ("vocab".to_string(), vocab.tokens().join(" "));
    save_checkpoint_with(&ckpt, &model, &state, &[vocab_entry]).unwrap();
    let pairs_path = dir.path().join("pairs.tsv");
    let tsv: String = pairs
        .iter()
        .map(|(a, b)| format!("{}\t{}\n", a.join(" "), b.join(" ")))
        .collect();
    std::fs::write(&pairs_path, tsv).unwrap();
    let out_dir = dir.path().join("out");
    let table = cli::cmd_eval(&ckpt, &pairs_path, &out_dir, 99).unwrap();
    assert!(table.contains("decoders vs reference"));
    assert!(table.contains("decoder vs next decoder"));
    assert!(table.contains("decoder1") && table.contains("decoder2"));
    assert!(table.contains("decoder1_vs_decoder2"));
    let csv = std::fs::read_to_string(out_dir.join("reports").join("report.csv")).unwrap();
    assert!(csv.starts_with("system,meteor,bleu,ter\n"));
    let mut seen = 0;
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 4, "csv line {line:?}");
        for f in &fields[1..] {
            f.parse::<f64>().unwrap();
        }
        seen += 1;
    }
    assert_eq!(seen, 3, "two reference blocks plus one decoder-vs-decoder row");
    pass("evaluation report machinery", "both comparison blocks populated");
}

// independent plain-f64 single-decoder VAE, coded without the graph library

struct RefLstm {
    w_input: Vec<f64>,
    w_hidden: Vec<f64>,
    bias: Vec<f64>,
    hidden: usize,
    input: usize,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matvec(w: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for i in 0..rows {
        for p in 0..cols {
            let v = w[i * cols + p];
            if v != 0.0 {
                out[i] += v * x[p];
            }
        }
    }
    out
}

impl RefLstm {
    fn step(&self, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hid = self.hidden;
        let from_x = matvec(&self.w_input, x, 4 * hid, self.input);
        let from_h = matvec(&self.w_hidden, h, 4 * hid, hid);
        let pre: Vec<f64> = (0..4 * hid).map(|i| (from_x[i] + from_h[i]) + self.bias[i]).collect();
        let mut h_out = vec![0.0; hid];
        let mut c_out = vec![0.0; hid];
        for j in 0..hid {
            let i_g = sigmoid(pre[j]);
            let f_g = sigmoid(pre[hid + j]);
            let cand = pre[2 * hid + j].tanh();
            let o_g = sigmoid(pre[3 * hid + j]);
            c_out[j] = f_g * c[j] + i_g * cand;
            h_out[j] = o_g * c_out[j].tanh();
        }
        (h_out, c_out)
    }
}

fn ref_lstm(params: &HashMap<String, Tensor>, prefix: &str) -> RefLstm {
    let w_input = params[&format!("{prefix}.w_input")].clone();
    let shape = w_input.shape().to_vec();
    RefLstm {
        hidden: shape[0] / 4,
        input: shape[1],
        w_input: w_input.data().to_vec(),
        w_hidden: params[&format!("{prefix}.w_hidden")].data().to_vec(),
        bias: params[&format!("{prefix}.bias")].data().to_vec(),
    }
}

fn ref_dense(params: &HashMap<String, Tensor>, prefix: &str, x: &[f64]) -> Vec<f64> {
    let w = &params[&format!("{prefix}.weight")];
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let wx = matvec(w.data(), x, rows, cols);
    let b = params[&format!("{prefix}.bias")].data();
    (0..rows).map(|i| wx[i] + b[i]).collect()
}

fn ref_softmax(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; x.len()];
    let mut z = 0.0;
    for (j, v) in x.iter().enumerate() {
        let e = (v - mx).exp();
        out[j] = e;
        z += e;
    }
    for v in &mut out {
        *v /= z;
    }
    out
}

/// Reference loss for one pair under the single-decoder model:
/// reconstruction cross entropy plus weighted KL.
fn reference_vae_loss(
    model: &ReDecodeModel,
    original: &[usize],
    targets: &[usize],
    epsilon: &[f64],
    kl_weight: f64,
) -> f64 {
    let mut params: HashMap<String, Tensor> = HashMap::new();
    model.visit(&mut |name, t| {
        params.insert(name, t.clone());
    });
    let hid = model.config.hidden_units;
    let emb = |id: usize| {
        let d = model.config.embedding_dim;
        model.embedding.table.data()[id * d..(id + 1) * d].to_vec()
    };

    // sampling encoder -> mu, log_var
    let enc = ref_lstm(&params, "sampling_encoder");
    let mut h = vec![0.0; hid];
    let mut c = vec![0.0; hid];
    for &id in original {
        let (h2, c2) = enc.step(&emb(id), &h, &c);
        h = h2;
        c = c2;
    }
    let mu = ref_dense(&params, "f_mu", &h);
    let log_var = ref_dense(&params, "f_log_var", &h);

    let kl = 0.5
        * mu.iter()
            .zip(&log_var)
            .map(|(m, lv)| (m * m + lv.exp() - lv) - 1.0)
            .sum::<f64>();

    let z: Vec<f64> = mu
        .iter()
        .zip(&log_var)
        .zip(epsilon)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();

    // two-layer sentence encoder; the memory is the top layer's sequence
    let s0 = ref_lstm(&params, "sentence_encoder.layer0");
    let s1 = ref_lstm(&params, "sentence_encoder.layer1");
    let mut st = [(vec![0.0; hid], vec![0.0; hid]), (vec![0.0; hid], vec![0.0; hid])];
    let mut memory: Vec<Vec<f64>> = Vec::new();
    for &id in original {
        let (h0, c0) = s0.step(&emb(id), &st[0].0, &st[0].1);
        st[0] = (h0.clone(), c0);
        let (h1, c1) = s1.step(&h0, &st[1].0, &st[1].1);
        st[1] = (h1.clone(), c1);
        memory.push(h1);
    }

    // decoder: teacher forced, attention over memory
    let d0 = ref_lstm(&params, "decoder0.lstm.layer0");
    let d1 = ref_lstm(&params, "decoder0.lstm.layer1");
    let w_score = &params["decoder0.attention.w_score"];
    let mut dst = [(vec![0.0; hid], vec![0.0; hid]), (vec![0.0; hid], vec![0.0; hid])];
    let mut inputs = vec![SOS];
    inputs.extend_from_slice(&targets[..targets.len() - 1]);
    let mut ce = 0.0;
    for (t, &tok) in inputs.iter().enumerate() {
        let mut x = emb(tok);
        x.extend_from_slice(&z);
        let (h0, c0) = d0.step(&x, &dst[0].0, &dst[0].1);
        dst[0] = (h0.clone(), c0);
        let (h1, c1) = d1.step(&h0, &dst[1].0, &dst[1].1);
        dst[1] = (h1.clone(), c1);

        // general bilinear attention: score_j = m_j . (q^T W)
        let (qd, md) = (w_score.shape()[0], w_score.shape()[1]);
        let mut q_proj = vec![0.0; md];
        for p in 0..qd {
            let v = h1[p];
            if v != 0.0 {
                for j in 0..md {
                    q_proj[j] += v * w_score.data()[p * md + j];
                }
            }
        }
        let scores: Vec<f64> = memory
            .iter()
            .map(|m| {
                let mut s = 0.0;
                for j in 0..md {
                    if m[j] != 0.0 {
                        s += m[j] * q_proj[j];
                    }
                }
                s + 0.0
            })
            .collect();
        let weights = ref_softmax(&scores);
        let mut context = vec![0.0; md];
        for (w, m) in weights.iter().zip(&memory) {
            if *w != 0.0 {
                for j in 0..md {
                    context[j] += w * m[j];
                }
            }
        }

        let mut proj_in = h1.clone();
        proj_in.extend_from_slice(&context);
        let logits = ref_dense(&params, "decoder0.projection", &proj_in);
        let probs = ref_softmax(&logits);
        ce -= probs[targets[t]].max(1e-12).ln();
    }
    ce /= inputs.len() as f64;
    ce + kl_weight * kl
}

/// Loss-reduction identity: with one decoder the training loss equals the
/// independently coded VAE loss to 1e-12.
#[test]
fn single_decoder_identity() {
    let cfg = ModelConfig {
        embedding_dim: 6,
        hidden_units: 7,
        latent_dim: 5,
        num_decoders: 1,
        max_len: 8,
        attention_mode: AttentionMode::Memory,
        multisample_enabled: false,
        multisample_weight: 1.0,
        multisample_ce_all: false,
        vocab_size: 13,
    };
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let model = model_from(cfg.clone(), 100 + seed);
        let p = pair(&[4, 8, 11, 5], &[5, 4, 9]);
        let batch = Batch { pairs: vec![p.clone()] };
        let mut rng = Rng::new(seed);
        let eps: Vec<f64> = (0..cfg.latent_dim).map(|_| rng.normal()).collect();
        let plan = NoisePlan {
            per_pair: vec![model::PairNoise {
                epsilons: vec![eps.clone()],
                dropout: vec![1.0; p.paraphrase_len + 1],
            }],
        };
        let kl_weight = 0.3;
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let out = forward_train_with_noise(&mut g, &model, &vars, &batch, &plan, kl_weight, 0.0).unwrap();
        let got = g.scalar_value(out.loss);
        let want =
            reference_vae_loss(&model, p.original_content(), p.target_with_eos(), &eps, kl_weight);
        let diff = (got - want).abs();
        assert!(diff <= 1e-12, "seed {seed}: {got} vs {want} (diff {diff:.2e})");
        worst = worst.max(diff);
    }
    pass("single-decoder identity", format!("max |diff| {worst:.2e} over 5 seeds"));
}

/// KL properties: non-negative on 10^4 random inputs, zero at the prior,
/// hand value 0.5 at (mu=[1], log_var=[0]).
#[test]
fn kl_properties() {
    let mut g = Graph::new();
    let mut rng = Rng::new(31);
    for _ in 0..10_000 {
        let d = 1 + rng.gen_index(8);
        let mu = g.leaf(&Tensor::vector((0..d).map(|_| rng.uniform(-4.0, 4.0)).collect()));
        let lv = g.leaf(&Tensor::vector((0..d).map(|_| rng.uniform(-4.0, 4.0)).collect()));
        let kl = model::kl_gaussian(&mut g, mu, lv).unwrap();
        assert!(g.scalar_value(kl) >= 0.0);
    }
    let zero = g.leaf(&Tensor::vector(vec![0.0, 0.0, 0.0]));
    let kl = model::kl_gaussian(&mut g, zero, zero).unwrap();
    assert_eq!(g.scalar_value(kl), 0.0);
    let mu = g.leaf(&Tensor::vector(vec![1.0]));
    let lv = g.leaf(&Tensor::vector(vec![0.0]));
    let kl = model::kl_gaussian(&mut g, mu, lv).unwrap();
    assert!((g.scalar_value(kl) - 0.5).abs() <= 1e-12);
    pass("KL properties", "10^4 random inputs non-negative, hand cases exact");
}

/// Metric oracles: hand-computed BLEU / METEOR / TER cases at 1e-6.
#[test]
fn metric_oracles() {
    let toks = |s: &str| -> Vec<String> {
        if s.is_empty() {
            Vec::new()
        } else {
            s.split(' ').map(str::to_string).collect()
        }
    };
    let close = |got: f64, want: f64, what: &str| {
        assert!((got - want).abs() < 1e-6, "{what}: {got} vs {want}");
    };

    // BLEU
    close(
        metrics::bleu_corpus(&[toks("the cat sat")], &[toks("the cat sat down")]).unwrap(),
        100.0 * (1.0f64 - 4.0 / 3.0).exp(),
        "bleu hand case",
    );
    close(
        metrics::bleu_corpus(&[toks("a b c d e")], &[toks("a b c d e")]).unwrap(),
        100.0,
        "bleu identity",
    );
    close(metrics::bleu_corpus(&[toks("p q r")], &[toks("x y z")]).unwrap(), 0.0, "bleu disjoint");
    close(
        metrics::bleu_corpus(&[toks("a a a")], &[toks("a")]).unwrap(),
        100.0 * (1.0f64 / 18.0).powf(0.25),
        "bleu clipping",
    );

    // METEOR
    let five = toks("a b c d e");
    close(metrics::meteor_score(&five, &five), 1.0 - 0.5 * (0.2f64).powi(3), "meteor identity");
    close(metrics::meteor_score(&toks("a b"), &toks("x y")), 0.0, "meteor zero");
    close(metrics::meteor_score(&toks("exercising"), &toks("exercise")), 0.5, "meteor stem stage");
    close(
        metrics::meteor_score(&toks("the cat sat"), &toks("the cat sat down")),
        (10.0 / 13.0) * (53.0 / 54.0),
        "meteor partial",
    );
    close(metrics::meteor_score(&toks("b a"), &toks("a b")), 0.5, "meteor swap penalty");

    // TER
    close(metrics::ter_score(&toks("a b c"), &toks("a b c")).unwrap(), 0.0, "ter identity");
    close(metrics::ter_score(&toks("a c"), &toks("a b c")).unwrap(), 1.0 / 3.0, "ter deletion");
    close(metrics::ter_score(&toks("b a"), &toks("a b")).unwrap(), 0.5, "ter shift");
    close(metrics::ter_score(&toks("a x c"), &toks("a b c")).unwrap(), 1.0 / 3.0, "ter substitution");
    close(metrics::ter_score(&toks("d a b c"), &toks("a b c d")).unwrap(), 0.25, "ter long shift");
    pass("metric oracles", "14 hand-computed cases within 1e-6");
}

fn lev_bytes(a: &[u8], b: &[u8]) -> usize {
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

fn byte_shift(s: &[u8], start: usize, len: usize, dest: usize) -> Vec<u8> {
    let mut rest = Vec::with_capacity(s.len());
    rest.extend_from_slice(&s[..start]);
    rest.extend_from_slice(&s[start + len..]);
    let mut out = Vec::with_capacity(s.len());
    out.extend_from_slice(&rest[..dest]);
    out.extend_from_slice(&s[start..start + len]);
    out.extend_from_slice(&rest[dest..]);
    out
}

/// Exhaustive minimum of (shifts to reach an ordering) + edit distance,
/// over every ordering of the candidate's multiset.
fn ter_oracle_orderings(cand: &[u8]) -> Vec<(Vec<u8>, usize)> {
    use std::collections::VecDeque;
    let mut dist: HashMap<Vec<u8>, usize> = HashMap::new();
    let mut queue = VecDeque::new();
    dist.insert(cand.to_vec(), 0);
    queue.push_back(cand.to_vec());
    while let Some(cur) = queue.pop_front() {
        let d = dist[&cur];
        let n = cur.len();
        for start in 0..n {
            for len in 1..=n - start {
                for dest in 0..=n - len {
                    if dest == start {
                        continue;
                    }
                    let next = byte_shift(&cur, start, len, dest);
                    dist.entry(next.clone()).or_insert_with(|| {
                        queue.push_back(next);
                        d + 1
                    });
                }
            }
        }
    }
    dist.into_iter().collect()
}

fn byte_strings(alphabet: &[u8], len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .iter()
            .flat_map(|s| {
                alphabet.iter().map(move |&c| {
                    let mut t = s.clone();
                    t.push(c);
                    t
                })
            })
            .collect();
    }
    out
}

/// True when `cand|ref` is lexicographically minimal over all relabelings
/// of the 3-symbol alphabet. TER depends only on the equality pattern, so
/// one representative per relabeling class suffices.
fn is_canonical(cand: &[u8], reference: &[u8]) -> bool {
    let perms: [[u8; 3]; 6] =
        [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let key = |p: &[u8; 3]| -> Vec<u8> {
        cand.iter()
            .map(|&c| p[c as usize])
            .chain(std::iter::once(255))
            .chain(reference.iter().map(|&c| p[c as usize]))
            .collect()
    };
    let id = key(&perms[0]);
    perms[1..].iter().all(|p| key(p) >= id)
}

/// TER equals the exhaustive-search minimum on all pairs of up to 6 tokens
/// over a 3-token alphabet.
#[test]
fn ter_equals_bruteforce_minimum() {
    let alphabet = [0u8, 1, 2];
    let words = ["aa", "bb", "cc"];
    let mut cands = Vec::new();
    for len in 1..=6 {
        cands.extend(byte_strings(&alphabet, len));
    }
    let refs = cands.clone();

    let checked: usize = cands
        .par_iter()
        .map(|cand| {
            let orderings = ter_oracle_orderings(cand);
            let cand_tokens: Vec<String> =
                cand.iter().map(|&c| words[c as usize].to_string()).collect();
            let mut n = 0;
            for reference in &refs {
                if !is_canonical(cand, reference) {
                    continue;
                }
                let oracle = orderings
                    .iter()
                    .map(|(ord, d)| d + lev_bytes(ord, reference))
                    .min()
                    .unwrap();
                let ref_tokens: Vec<String> =
                    reference.iter().map(|&c| words[c as usize].to_string()).collect();
                let got = metrics::ter_edits(&cand_tokens, &ref_tokens);
                assert_eq!(
                    got, oracle,
                    "cand {cand_tokens:?} ref {ref_tokens:?}: got {got}, oracle {oracle}"
                );
                n += 1;
            }
            n
        })
        .sum();
    assert!(checked > 150_000, "only {checked} canonical pairs checked");
    pass("TER brute-force equality", format!("{checked} canonical pairs up to length 6"));
}

/// MultiSample bounds: within [-3, 3] on 100 random model states and
/// exactly 3 when the three samples share epsilon.
#[test]
fn multisample_bounds() {
    let mut cfg = grad_check_config(true);
    cfg.hidden_units = 8;
    for seed in 0..100u64 {
        let model = model_from(cfg.clone(), 1000 + seed);
        let mut rng = Rng::new(seed);
        let eps = [
            rng.normal_vec(cfg.latent_dim),
            rng.normal_vec(cfg.latent_dim),
            rng.normal_vec(cfg.latent_dim),
        ];
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let ms =
            model::loss_multisample(&mut g, &model, &vars, &[4, 9, 6], &[SOS, 6, 4, EOS], &eps)
                .unwrap();
        let val = g.scalar_value(ms);
        assert!((-3.0..=3.0).contains(&val), "seed {seed}: {val}");

        let shared = [eps[0].clone(), eps[0].clone(), eps[0].clone()];
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let ms =
            model::loss_multisample(&mut g, &model, &vars, &[4, 9, 6], &[SOS, 6, 4, EOS], &shared)
                .unwrap();
        assert!((g.scalar_value(ms) - 3.0).abs() < 1e-9, "seed {seed}");
    }
    pass("multisample bounds", "100 random states in [-3,3]; shared epsilon gives 3");
}

/// Determinism and persistence: fixed-seed training is bit-identical and a
/// checkpoint round trip preserves forward outputs bit-exactly.
#[test]
fn determinism_and_persistence() {
    let cfg = grad_check_config(false);
    let batch = Batch {
        pairs: vec![pair(&[4, 7, 9], &[9, 4]), pair(&[11, 5], &[5, 11, 6])],
    };
    let tcfg = TrainConfig { seed: 5, ..TrainConfig::default() };

    let run = || {
        let mut model = model_from(cfg.clone(), 55);
        let mut state = AdamState::new(&model);
        let mut totals = Vec::new();
        for i in 0..10 {
            totals.push(train_step(&mut model, &mut state, &batch, &tcfg, 0, i).unwrap().total);
        }
        let mut flat = Vec::new();
        model.visit(&mut |_, t| flat.extend_from_slice(t.data()));
        (model, state, totals, flat)
    };
    let (model_a, state_a, totals_a, flat_a) = run();
    let (_, _, totals_b, flat_b) = run();
    assert_eq!(totals_a, totals_b, "training losses diverged across identical runs");
    assert_eq!(flat_a, flat_b, "parameters diverged across identical runs");

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.rdec");
    save_checkpoint_with(&ckpt, &model_a, &state_a, &[]).unwrap();
    let (model_c, _, _) = load_checkpoint(&ckpt).unwrap();

    let plan = NoisePlan::zeros(&batch, &cfg);
    let forward = |m: &ReDecodeModel| {
        let mut g = Graph::new();
        let vars = m.bind(&mut g);
        let out = forward_train_with_noise(&mut g, m, &vars, &batch, &plan, 1.0, 0.0).unwrap();
        g.scalar_value(out.loss)
    };
    let before = forward(&model_a);
    let after = forward(&model_c);
    assert_eq!(before.to_bits(), after.to_bits(), "forward output changed across round trip");
    pass("determinism and persistence", "bit-identical training and round trip");
}
