//! Acceptance checks, one test per criterion. Every test prints a single
//! `criterion N: PASS|FAIL (...)` line and then asserts. Tests hold a shared
//! lock so the timed runs do not compete for the CPU.

use std::collections::HashMap;
use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use mathmoe_core::corpus::{build_vocabulary, CorpusRecord};
use mathmoe_core::corruption::{mlm_record, shuffle_formulas, shuffle_sentences, MaskAction, Objective};
use mathmoe_core::metrics::{bleu4, generation_metrics, rouge2, rouge_l, token_accuracy, BLEU_EPSILON, DEFAULT_ANSWER_MARKERS};
use mathmoe_core::model::{Decoding, Model, ModelConfig};
use mathmoe_core::moe::{load_balance_loss, route, z_loss, LoadStats, MoeConfig, MoeLayer};
use mathmoe_core::nn::{normal, FeedForward, Graph, ParamStore};
use mathmoe_core::refinement::{
    compose_stage_query, refine, render_exemplar, IdentityClient, IndexSource, InstructionSet, LlmClient, LlmRequest,
    RecordingClient, RefineConfig, StepStatus, PART_SEPARATOR,
};
use mathmoe_core::retrieval::{
    contrastive_train, positive_pair_cosine, Composition, ContrastiveConfig, Embedder, EmbeddingIndex,
};
use mathmoe_core::synthetic::{arithmetic_corpus, finetune_mixture};
use mathmoe_core::text::{MathText, Tokenizer, Vocabulary};
use mathmoe_core::training::{
    build_batch, check_gradients, datasets_from_records, finetune, predict_label, predict_sequence, prepare_model,
    pretrain, unify_finetune_data, FinetuneConfig, OptimizerConfig, PretrainConfig, TaskFormat,
};
use mathmoe_core::training::pretrain::corpus_dispatch;
use mathmoe_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: usize, pass: bool, detail: String) {
    println!("criterion {n}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn small_config(vocab_size: usize, dropout: f64) -> ModelConfig {
    ModelConfig {
        d_model: 32,
        d_ff: 64,
        heads: 2,
        encoder_layers: 2,
        u_decoder_layers: 1,
        g_decoder_layers: 1,
        vocab_size,
        max_len: 64,
        dropout,
        moe: MoeConfig::default(),
        num_labels: 0,
        num_tasks: 0,
    }
}

fn texts_of(records: &[CorpusRecord], tk: &Tokenizer, vocab: &Vocabulary) -> Vec<MathText> {
    records.iter().map(|r| r.to_text(tk, vocab).unwrap()).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

#[test]
fn criterion_01_full_model_gradient_check() {
    let _lock = serial();
    let records = arithmetic_corpus(2, 5);
    let tk = Tokenizer::default();
    let vocab = build_vocabulary(&records, &tk).unwrap();
    let texts = texts_of(&records, &tk, &vocab);
    let config = ModelConfig {
        d_model: 8,
        d_ff: 8,
        max_len: 32,
        ..small_config(vocab.len(), 0.1)
    };
    let model = Model::new(config, 1).unwrap();
    let refs: Vec<&MathText> = texts.iter().collect();
    let batch = build_batch(&model, &refs, &vocab, 0.15, true, 3).unwrap();
    let mut objectives: Vec<Objective> = batch.masked.iter().map(|r| r.objective).collect();
    if !batch.masked.is_empty() {
        objectives.push(Objective::Dae);
    }
    objectives.extend(batch.logic.iter().chain(&batch.checking).map(|r| r.objective));
    let all_six = Objective::ALL.iter().all(|o| objectives.contains(o));

    let start = Instant::now();
    let report = check_gradients(&model, &batch, 9, usize::MAX, 1).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let every_scalar = report.checked == model.store.num_scalars();
    verdict(
        1,
        all_six && every_scalar && report.max_relative_error < 1e-4 && secs < 30.0,
        format!(
            "all six objectives {all_six}, {} scalars checked, max rel err {:.3e}, {secs:.1}s",
            report.checked, report.max_relative_error
        ),
    );
}

/// Brute-force top-k: repeatedly the largest remaining value, lowest index on ties.
fn oracle_top_k(p: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; p.len()];
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..p.len() {
            if !taken[i] && best.map_or(true, |b| p[i] > p[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

#[test]
fn criterion_02_routing_invariants() {
    let _lock = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let calls = 100_000;
    let (mut sum_bad, mut topk_bad, mut eta0_bad, mut jitter_bad, mut tied) = (0, 0, 0, 0, 0);
    for call in 0..calls {
        let experts = [2usize, 4, 8][rng.gen_range(0..3)];
        let k = rng.gen_range(1..=experts);
        let d = rng.gen_range(2..=8);
        // A quarter of the calls use small integer values so exact ties occur.
        let discrete = call % 4 == 0;
        let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            if discrete {
                (0..n).map(|_| rng.gen_range(-1i32..=1) as f64).collect()
            } else {
                gaussian(rng, n)
            }
        };
        let h = draw(d, &mut rng);
        let router = Tensor::new(vec![experts, d], draw(experts * d, &mut rng)).unwrap();
        let prompt = rng.gen_bool(0.5).then(|| draw(d, &mut rng));
        let eta = rng.gen_range(0.0..0.5);
        let seed = rng.gen();

        let dec = route(&h, &router, k, prompt.as_deref(), Some((eta, seed))).unwrap();
        if (dec.probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            sum_bad += 1;
        }
        let expected = oracle_top_k(&dec.probs, k);
        let gates: Vec<f64> = expected.iter().map(|&i| dec.probs[i]).collect();
        if dec.selected != expected || dec.gates != gates {
            topk_bad += 1;
        }
        if k < experts && dec.probs.iter().filter(|&&p| p == dec.probs[expected[k - 1]]).count() > 1 {
            tied += 1;
        }
        for (l, p) in dec.logits.iter().zip(&dec.perturbed) {
            if (p - l).abs() > eta * l.abs() * (1.0 + 1e-12) + f64::EPSILON * l.abs() {
                jitter_bad += 1;
            }
        }

        let zero = route(&h, &router, k, prompt.as_deref(), Some((0.0, seed))).unwrap();
        let plain = route(&h, &router, k, prompt.as_deref(), None).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&zero.probs) != bits(&plain.probs)
            || bits(&zero.perturbed) != bits(&plain.logits)
            || bits(&zero.logits) != bits(&plain.logits)
            || zero.selected != plain.selected
        {
            eta0_bad += 1;
        }
    }
    verdict(
        2,
        sum_bad + topk_bad + eta0_bad + jitter_bad == 0 && tied > 0,
        format!(
            "{calls} calls: sum violations {sum_bad}, top-k mismatches {topk_bad} ({tied} boundary ties), \
             eta=0 differences {eta0_bad}, jitter bound violations {jitter_bad}"
        ),
    );
}

#[test]
fn criterion_03_auxiliary_loss_extremes() {
    let _lock = serial();
    let (alpha, beta) = (1e-3, 1e-4);
    let mut failures = Vec::new();
    for k in [2usize, 4, 8] {
        let uniform = LoadStats {
            dispatch_fraction: vec![1.0 / k as f64; k],
            mean_prob: vec![1.0 / k as f64; k],
            tokens: 64,
        };
        let mut one_hot = vec![0.0; k];
        one_hot[0] = 1.0;
        let collapse = LoadStats {
            dispatch_fraction: one_hot.clone(),
            mean_prob: one_hot,
            tokens: 64,
        };
        let u = load_balance_loss(&uniform, alpha);
        let c = load_balance_loss(&collapse, alpha);
        if u != alpha {
            failures.push(format!("uniform K={k}: {u}"));
        }
        if c != alpha * k as f64 {
            failures.push(format!("collapse K={k}: {c}"));
        }
    }
    let z = z_loss(&Tensor::from_rows(&[&[0.0, 0.0]]), beta);
    let z_expected = beta * std::f64::consts::LN_2 * std::f64::consts::LN_2;
    if (z - z_expected).abs() > 1e-12 {
        failures.push(format!("z-loss {z} vs {z_expected}"));
    }
    verdict(
        3,
        failures.is_empty(),
        format!("K in {{2,4,8}}, z-loss {z:.6e}, failures {failures:?}"),
    );
}

fn oracle_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// `fc2(gelu(fc1(h)))` with `W` stored `[in, out]`, written out by hand.
fn oracle_ffn(store: &ParamStore, ffn: &FeedForward, h: &[f64]) -> Vec<f64> {
    let (w1, b1) = (store.value(ffn.fc1.w), store.value(ffn.fc1.b));
    let (w2, b2) = (store.value(ffn.fc2.w), store.value(ffn.fc2.b));
    let hidden: Vec<f64> = (0..w1.cols())
        .map(|c| oracle_gelu(b1.data()[c] + (0..h.len()).map(|i| h[i] * w1.get(i, c)).sum::<f64>()))
        .collect();
    (0..w2.cols())
        .map(|o| b2.data()[o] + (0..hidden.len()).map(|c| hidden[c] * w2.get(c, o)).sum::<f64>())
        .collect()
}

fn oracle_probs(router: &Tensor, h: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = (0..router.rows())
        .map(|j| (0..h.len()).map(|i| h[i] * router.get(j, i)).sum())
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[test]
fn criterion_04_sparse_layer_equivalence() {
    let _lock = serial();
    let (d, d_ff, k, n) = (6, 10, 4, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let config = MoeConfig {
        experts: k,
        top_k: k,
        ..MoeConfig::default()
    };
    let dense = MoeLayer::new(&mut store, "moe", d, d_ff, config, &mut rng);
    // Decorrelate the experts so the weighted sum is a real test.
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set(id, normal(&shape, 0.5, &mut rng));
    }
    let h = Tensor::new(vec![n, d], gaussian(&mut rng, n * d)).unwrap();
    let mut sparse = dense.clone();
    sparse.config.top_k = 1;

    let run = |layer: &MoeLayer| {
        let mut g = Graph::inference(&store);
        let x = g.tape.constant(h.clone());
        let out = layer.forward(&mut g, x, None).unwrap();
        (g.value(out.out).clone(), out.expert_macs)
    };
    let (dense_out, dense_macs) = run(&dense);
    let (sparse_out, sparse_macs) = run(&sparse);

    let router = store.value(dense.router);
    let (mut dense_err, mut sparse_err) = (0.0f64, 0.0f64);
    for t in 0..n {
        let row = h.row_slice(t);
        let p = oracle_probs(router, row);
        let ys: Vec<Vec<f64>> = dense.experts.iter().map(|e| oracle_ffn(&store, e, row)).collect();
        let best = oracle_top_k(&p, 1)[0];
        for o in 0..d {
            let weighted: f64 = (0..k).map(|e| p[e] * ys[e][o]).sum();
            dense_err = dense_err.max((dense_out.get(t, o) - weighted).abs());
            sparse_err = sparse_err.max((sparse_out.get(t, o) - p[best] * ys[best][o]).abs());
        }
    }
    let ffn_macs = (2 * d * d_ff) as u64;

    // Same count through the full encoder: one feed-forward block per token per layer.
    let model = Model::new(small_config(20, 0.0), 4).unwrap();
    let ids = [2usize, 9, 10, 11, 3, 12, 13];
    let mut g = Graph::inference(&model.store);
    let enc = model.encode(&mut g, &ids, None).unwrap();
    let model_ffn = (2 * model.config.d_model * model.config.d_ff) as u64;
    let per_layer_ok = enc.layers.iter().all(|l| l.expert_macs == ids.len() as u64 * model_ffn);

    let pass = dense_err <= 1e-12
        && sparse_err <= 1e-12
        && sparse_macs == n as u64 * ffn_macs
        && dense_macs == (n * k) as u64 * ffn_macs
        && per_layer_ok;
    verdict(
        4,
        pass,
        format!(
            "dense err {dense_err:.2e}, top-1 err {sparse_err:.2e}, k=1 MACs/token {} (one block {ffn_macs}), \
             k=K MACs/token {}, encoder layers match {per_layer_ok}",
            sparse_macs / n as u64,
            dense_macs / n as u64
        ),
    );
}

fn run_pretraining(texts: &[MathText], vocab: &Vocabulary) -> (Model, Vec<u8>, f64, f64, f64) {
    let mut model = Model::new(small_config(vocab.len(), 0.0), 1).unwrap();
    let steps = 2000;
    let config = PretrainConfig {
        steps,
        sc_warmup: steps / 10,
        optimizer: OptimizerConfig {
            lr: 1e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let start = Instant::now();
    let log = pretrain(&mut model, texts, vocab, &config, |_| Ok(())).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let curve = serde_json::to_vec(&log).unwrap();
    let (first, last) = (log[0].multitask(), log.last().unwrap().multitask());
    (model, curve, first, last, secs)
}

#[test]
fn criterion_05_pretraining_run() {
    let _lock = serial();
    let records = arithmetic_corpus(2000, 7);
    let tk = Tokenizer::default();
    let vocab = build_vocabulary(&records, &tk).unwrap();
    let texts = texts_of(&records, &tk, &vocab);

    let (model, curve, first, last, secs) = run_pretraining(&texts, &vocab);
    let dispatch = corpus_dispatch(&model, &texts[..200], None).unwrap();
    let max_dispatch = dispatch.iter().flatten().copied().fold(0.0, f64::max);
    let (_, rerun, _, _, _) = run_pretraining(&texts, &vocab);
    let identical = curve == rerun;

    verdict(
        5,
        vocab.len() <= 128 && last < 0.5 * first && max_dispatch < 0.6 && secs <= 600.0 && identical,
        format!(
            "vocab {}, L_MT {first:.3} -> {last:.3}, max dispatch {max_dispatch:.3}, {secs:.0}s, \
             rerun byte-identical {identical}",
            vocab.len()
        ),
    );
}

/// Chi-square statistic and p-value of a 2 × C contingency table; columns
/// empty in both rows are dropped.
fn chi_square(a: &[f64], b: &[f64]) -> (f64, f64) {
    let cols: Vec<(f64, f64)> = a.iter().zip(b).filter(|(x, y)| **x + **y > 0.0).map(|(x, y)| (*x, *y)).collect();
    let (ta, tb): (f64, f64) = (cols.iter().map(|c| c.0).sum(), cols.iter().map(|c| c.1).sum());
    let total = ta + tb;
    let mut stat = 0.0;
    for &(x, y) in &cols {
        let col = x + y;
        let (ea, eb) = (ta * col / total, tb * col / total);
        stat += (x - ea).powi(2) / ea + (y - eb).powi(2) / eb;
    }
    let df = (cols.len() - 1) as f64;
    (stat, ChiSquared::new(df).unwrap().sf(stat))
}

#[test]
fn criterion_06_unified_finetuning() {
    let _lock = serial();
    let train = finetune_mixture(200, 3);
    let dev = finetune_mixture(60, 99);
    let tk = Tokenizer::default();
    let all: Vec<CorpusRecord> = train.iter().chain(&dev).cloned().collect();
    let vocab = build_vocabulary(&all, &tk).unwrap();
    let data = datasets_from_records(&train, &tk, &vocab).unwrap();
    let dev_data = datasets_from_records(&dev, &tk, &vocab).unwrap();
    let tasks = unify_finetune_data(&data).unwrap();

    let mut model = Model::new(small_config(vocab.len(), 0.0), 1).unwrap();
    prepare_model(&mut model, &tasks, 2);
    let config = FinetuneConfig {
        steps: 4500,
        batch_size: 8,
        optimizer: OptimizerConfig {
            lr: 1e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    finetune(&mut model, &tasks, &data, &config, |_| Ok(())).unwrap();

    let k = model.config.moe.experts;
    let columns = model.config.encoder_layers * k;
    let (mut with_prompt, mut without) = (vec![0.0; columns], vec![0.0; columns]);
    let mut scores = Vec::new();
    let mut pass = true;
    for (spec, d) in tasks.tasks.iter().zip(&dev_data) {
        assert_eq!(spec.name, d.name);
        let mut score = 0.0;
        for ex in &d.examples {
            score += match spec.format {
                TaskFormat::Classification => {
                    f64::from(u8::from(predict_label(&model, &tasks, spec, &ex.input).unwrap() == ex.labels[0]))
                }
                TaskFormat::Generation => {
                    let out = predict_sequence(&model, spec, &ex.input, 12, Decoding::Greedy).unwrap();
                    token_accuracy(&out, &ex.target)
                }
            };
            for (task, counts) in [(Some(spec.prompt), &mut with_prompt), (None, &mut without)] {
                for (l, decisions) in model.routing_table(&ex.input, task).unwrap().iter().enumerate() {
                    for dec in decisions {
                        counts[l * k + dec.selected[0]] += 1.0;
                    }
                }
            }
        }
        score /= d.examples.len() as f64;
        pass &= match spec.format {
            TaskFormat::Classification => score >= 0.95,
            TaskFormat::Generation => score >= 0.99,
        };
        scores.push(format!("{} {score:.4}", spec.name));
    }
    let (stat, p) = chi_square(&with_prompt, &without);
    verdict(
        6,
        pass && p < 0.01,
        format!("{}, routing chi-square {stat:.1} p {p:.3e}", scores.join(", ")),
    );
}

const WORDS: [&str; 12] = [
    "we", "know", "that", "then", "value", "number", "so", "hence", "add", "both", "sides", "gives",
];
const SYMBOLS: [&str; 8] = ["x", "y", "1", "2", "3", "+", "-", "="];

fn random_words(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<String> {
    (0..rng.gen_range(lo..=hi)).map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string()).collect()
}

fn random_formula(rng: &mut ChaCha8Rng) -> String {
    let body: Vec<&str> = (0..rng.gen_range(1..=5)).map(|_| SYMBOLS[rng.gen_range(0..SYMBOLS.len())]).collect();
    format!("${}$", body.join(" "))
}

/// Random problem whose solution has 6–12 sentences, the first two with a formula.
fn random_problem(rng: &mut ChaCha8Rng) -> (String, String) {
    let statement = random_words(rng, 3, 8).join(" ") + " .";
    let sentences: Vec<String> = (0..rng.gen_range(6..=12))
        .map(|i| {
            let mut words = random_words(rng, 3, 8);
            if i < 2 || rng.gen_bool(0.3) {
                let at = rng.gen_range(0..=words.len());
                words.insert(at, random_formula(rng));
            }
            words.join(" ") + " ."
        })
        .collect();
    (statement, sentences.join(" "))
}

fn sorted<T: Ord>(mut v: Vec<T>) -> Vec<T> {
    v.sort();
    v
}

#[test]
fn criterion_07_corruption_statistics() {
    let _lock = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tk = Tokenizer::default();
    let raw: Vec<(String, String)> = (0..1000).map(|_| random_problem(&mut rng)).collect();
    let mut vocab = Vocabulary::new();
    for (s, a) in &raw {
        vocab.observe(&tk, s).unwrap();
        vocab.observe(&tk, a).unwrap();
    }
    let texts: Vec<MathText> = raw.iter().map(|(s, a)| tk.tokenize_problem(s, a, &vocab).unwrap()).collect();

    let (mut masked, mut tokens) = (0usize, 0usize);
    let mut actions: HashMap<MaskAction, usize> = HashMap::new();
    let mut relative_position = 0.0;
    for i in 0..10_000 {
        let text = &texts[i % texts.len()];
        let rec = mlm_record(text, 0.15, &vocab, i as u64).unwrap();
        masked += rec.masked_positions.len();
        tokens += text.len();
        for a in &rec.actions {
            *actions.entry(*a).or_default() += 1;
        }
        let last = (text.len() - 1) as f64;
        relative_position += rec.masked_positions.iter().map(|&p| p as f64 / last).sum::<f64>();
    }
    let fraction = masked as f64 / tokens as f64;
    let share = |a: MaskAction| actions.get(&a).copied().unwrap_or(0) as f64 / masked as f64;
    let (m, r, k) = (share(MaskAction::Mask), share(MaskAction::Random), share(MaskAction::Keep));
    let mean_position = relative_position / masked as f64;

    let mut multiset_bad = 0;
    for (i, text) in texts.iter().enumerate() {
        let ssr = shuffle_sentences(text, i as u64).unwrap();
        let sfr = shuffle_formulas(text, i as u64).unwrap();
        let spans = |t: &MathText, spans: &[(usize, usize)]| -> Vec<Vec<usize>> {
            sorted(spans.iter().map(|&(s, e)| t.tokens[s..e].iter().map(|t| t.id).collect()).collect())
        };
        let ok = sorted(ssr.corrupted.ids()) == sorted(text.ids())
            && sorted(sfr.corrupted.ids()) == sorted(text.ids())
            && spans(&ssr.corrupted, &ssr.corrupted.sentence_spans) == spans(text, &text.sentence_spans)
            && spans(&sfr.corrupted, &sfr.corrupted.solution_formulas())
                == spans(text, &text.solution_formulas())
            && ssr.corrupted.statement_ids() == text.statement_ids();
        if !ok {
            multiset_bad += 1;
        }
    }
    let pass = (fraction - 0.15).abs() <= 0.01
        && (m - 0.8).abs() <= 0.02
        && (r - 0.1).abs() <= 0.02
        && (k - 0.1).abs() <= 0.02
        && mean_position > 0.5
        && multiset_bad == 0;
    verdict(
        7,
        pass,
        format!(
            "masked fraction {fraction:.4}, actions {m:.4}/{r:.4}/{k:.4}, mean relative position {mean_position:.3}, \
             SSR/SFR multiset violations {multiset_bad} of {}",
            texts.len()
        ),
    );
}

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Ids sorted by descending cosine, lower id first on ties.
fn oracle_ranking(keys: &[Vec<f64>], query: &[f64]) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = keys.iter().enumerate().map(|(i, k)| (i, oracle_cosine(query, k))).collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.into_iter().map(|(i, _)| i).collect()
}

#[test]
fn criterion_08_retrieval() {
    let _lock = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut ranking_bad, mut self_bad) = (0, 0);
    for pool_no in 0..1000 {
        let dim = rng.gen_range(2..=10);
        let size = rng.gen_range(1..=40);
        let with_duplicates = pool_no % 3 == 0;
        let mut problems: Vec<Vec<f64>> = Vec::new();
        let mut solutions: Vec<Vec<f64>> = Vec::new();
        for i in 0..size {
            if with_duplicates && i > 0 && rng.gen_bool(0.3) {
                let j = rng.gen_range(0..i);
                problems.push(problems[j].clone());
                solutions.push(solutions[j].clone());
            } else {
                problems.push(gaussian(&mut rng, dim));
                solutions.push(gaussian(&mut rng, dim));
            }
        }
        let mut index = EmbeddingIndex::new(dim);
        for (i, (p, s)) in problems.iter().zip(&solutions).enumerate() {
            index.push(format!("p{i}"), format!("s{i}"), p.clone(), s.clone()).unwrap();
        }
        for composition in [Composition::Statement, Composition::StatementDraft, Composition::Draft] {
            let keys: Vec<Vec<f64>> = match composition {
                Composition::Statement => problems.clone(),
                Composition::Draft => solutions.clone(),
                Composition::StatementDraft => problems
                    .iter()
                    .zip(&solutions)
                    .map(|(p, s)| [unit(p), unit(s)].concat())
                    .collect(),
            };
            let query = gaussian(&mut rng, keys[0].len());
            let expected = oracle_ranking(&keys, &query);
            let b = rng.gen_range(1..=size);
            let got: Vec<usize> = index.search(composition, &query, size).unwrap().iter().map(|h| h.id).collect();
            let top: Vec<usize> = index.search(composition, &query, b).unwrap().iter().map(|h| h.id).collect();
            if got != expected || top != expected[..b] {
                ranking_bad += 1;
            }
        }
        if !with_duplicates {
            let j = rng.gen_range(0..size);
            let hit = &index.search(Composition::Statement, &problems[j], 1).unwrap()[0];
            if hit.id != j {
                self_bad += 1;
            }
        }
    }

    // Duplicate texts through the model: every statement finds itself first.
    let records = arithmetic_corpus(600, 5);
    let tk = Tokenizer::default();
    let vocab = build_vocabulary(&records, &tk).unwrap();
    let dropout = 0.1;
    let mut model = Model::new(small_config(vocab.len(), dropout), 1).unwrap();
    {
        let embedder = Embedder::new(&model, &vocab);
        let index = EmbeddingIndex::build(&embedder, &records[..60]).unwrap();
        for r in &records[..60] {
            let q = embedder.embed(&r.statement).unwrap();
            let hit = &index.search(Composition::Statement, &q, 1).unwrap()[0];
            if hit.problem != r.statement || (hit.score - 1.0).abs() > 1e-9 {
                self_bad += 1;
            }
        }
    }

    let statements: Vec<MathText> = records.iter().map(|r| tk.tokenize(&r.statement, &vocab).unwrap()).collect();
    let (train, held_out) = statements.split_at(500);
    let before = positive_pair_cosine(&model, held_out, dropout, 11).unwrap();
    let config = ContrastiveConfig {
        steps: 500,
        batch_size: 16,
        dropout,
        optimizer: OptimizerConfig {
            lr: 1e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    contrastive_train(&mut model, train, &config).unwrap();
    let after = positive_pair_cosine(&model, held_out, dropout, 11).unwrap();

    verdict(
        8,
        ranking_bad == 0 && self_bad == 0 && after - before >= 0.05,
        format!(
            "1000 pools: ranking mismatches {ranking_bad}, self-retrieval misses {self_bad}, \
             held-out positive cosine {before:.4} -> {after:.4}"
        ),
    );
}

/// Replies with a fixed script indexed by the overall step.
struct ScriptedClient {
    script: Vec<String>,
}

impl LlmClient for ScriptedClient {
    fn complete(&self, request: &LlmRequest) -> mathmoe_core::Result<String> {
        Ok(self.script[request.iter_step - 1].clone())
    }
}

#[test]
fn criterion_09_refinement_trace() {
    let _lock = serial();
    let records = arithmetic_corpus(40, 9);
    let tk = Tokenizer::default();
    let vocab = build_vocabulary(&records, &tk).unwrap();
    let model = Model::new(
        ModelConfig {
            d_model: 16,
            d_ff: 16,
            ..small_config(vocab.len(), 0.0)
        },
        9,
    )
    .unwrap();
    let pool = &records[..20];
    let source = IndexSource {
        index: &EmbeddingIndex::build(&Embedder::new(&model, &vocab), pool).unwrap(),
        embedder: Embedder::new(&model, &vocab),
    };
    let config = RefineConfig::default();
    assert_eq!((config.iterations, config.exemplars), (3, 8));
    let question = records[30].statement.clone();
    let initial = "first we add the two numbers . so the answer is $5$ .".to_string();
    let script: Vec<String> = records[31..40].iter().map(|r| r.solution.clone()).collect();
    let client = RecordingClient::new(ScriptedClient { script });
    let transcript = refine("q30", &question, &initial, &source, &client, &config).unwrap();
    let requests = client.requests();

    let mut problems = Vec::new();
    if requests.len() != 9 || transcript.steps.len() != 9 {
        problems.push(format!("{} calls, {} steps", requests.len(), transcript.steps.len()));
    }
    let expected_compositions = [Composition::Statement, Composition::StatementDraft, Composition::Draft];
    let mut draft = initial.clone();
    let set = InstructionSet::english();
    for (i, (step, request)) in transcript.steps.iter().zip(&requests).enumerate() {
        if step.query_composition != expected_compositions[i / 3] {
            problems.push(format!("step {i} composition {:?}", step.query_composition));
        }
        if step.draft != draft || request.draft != draft || step.status != StepStatus::Ok {
            problems.push(format!("step {i} does not chain"));
        }
        let query = compose_stage_query(step.stage, &question, &step.draft).unwrap();
        let hits = source.index.retrieve(&source.embedder, &query, 8).unwrap();
        let ids: Vec<usize> = hits.iter().map(|h| h.id).collect();
        let mut parts = vec![question.clone(), step.draft.clone()];
        parts.extend(ids.iter().map(|&id| {
            let e = &source.index.entries[id];
            render_exemplar(&set, &e.problem, &e.solution)
        }));
        parts.push(set.for_stage(step.stage).unwrap().to_string());
        let actual: Vec<&str> = request.prompt.split(PART_SEPARATOR).collect();
        if step.exemplar_ids != ids || ids.len() != 8 || actual != parts {
            problems.push(format!("step {i} prompt layout"));
        }
        draft = step.response.clone().unwrap_or_default();
    }
    if transcript.final_solution != draft {
        problems.push("final solution is not the last response".into());
    }

    let identity = RecordingClient::new(IdentityClient);
    let fixed = refine("q30", &question, &initial, &source, &identity, &config).unwrap();
    let fixed_point = fixed.final_solution == initial
        && identity.requests().len() == 9
        && fixed.steps.iter().all(|s| s.response.as_deref() == Some(initial.as_str()));
    if !fixed_point {
        problems.push("identity client moved the draft".into());
    }
    verdict(
        9,
        problems.is_empty(),
        format!("{} calls, identity fixed point {fixed_point}, problems {problems:?}", requests.len()),
    );
}

fn oracle_ngrams(s: &[u8], n: usize) -> Vec<(Vec<u8>, usize)> {
    let mut out: Vec<(Vec<u8>, usize)> = Vec::new();
    if s.len() >= n {
        for i in 0..=s.len() - n {
            let g = s[i..i + n].to_vec();
            match out.iter_mut().find(|(h, _)| *h == g) {
                Some((_, c)) => *c += 1,
                None => out.push((g, 1)),
            }
        }
    }
    out
}

fn oracle_overlap(h: &[u8], r: &[u8], n: usize) -> usize {
    let rc = oracle_ngrams(r, n);
    oracle_ngrams(h, n)
        .iter()
        .map(|(g, c)| (*c).min(rc.iter().find(|(x, _)| x == g).map_or(0, |x| x.1)))
        .sum()
}

fn oracle_bleu(h: &[u8], r: &[u8]) -> f64 {
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut product = 1.0;
    for n in 1..=4 {
        let total = (h.len() + 1).saturating_sub(n);
        let matched = oracle_overlap(h, r, n);
        let p = if matched == 0 {
            BLEU_EPSILON / total.max(1) as f64
        } else {
            matched as f64 / total as f64
        };
        product *= p.powf(0.25);
    }
    let bp = if h.len() > r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / h.len() as f64).exp()
    };
    bp * product
}

fn oracle_f1(overlap: usize, h: usize, r: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / h as f64;
    let rec = overlap as f64 / r as f64;
    2.0 * p * rec / (p + rec)
}

fn oracle_lcs(a: &[u8], b: &[u8], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    if let Some(&v) = memo.get(&(a.len(), b.len())) {
        return v;
    }
    let v = if a[a.len() - 1] == b[b.len() - 1] {
        1 + oracle_lcs(&a[..a.len() - 1], &b[..b.len() - 1], memo)
    } else {
        oracle_lcs(&a[..a.len() - 1], b, memo).max(oracle_lcs(a, &b[..b.len() - 1], memo))
    };
    memo.insert((a.len(), b.len()), v);
    v
}

#[test]
fn criterion_10_metrics() {
    let _lock = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let h: Vec<u8> = (0..rng.gen_range(1..=20)).map(|_| rng.gen_range(0..5)).collect();
        let r: Vec<u8> = (0..rng.gen_range(1..=20)).map(|_| rng.gen_range(0..5)).collect();
        let lcs = oracle_lcs(&h, &r, &mut HashMap::new());
        let pairs = [
            (bleu4(&h, &r), oracle_bleu(&h, &r)),
            (
                rouge2(&h, &r),
                oracle_f1(oracle_overlap(&h, &r, 2), h.len().saturating_sub(1), r.len().saturating_sub(1)),
            ),
            (rouge_l(&h, &r), oracle_f1(lcs, h.len(), r.len())),
        ];
        for (got, want) in pairs {
            worst = worst.max((got - want).abs());
        }
    }
    let mut identity_ok = true;
    for _ in 0..100 {
        let a: Vec<u8> = (0..rng.gen_range(4..=20)).map(|_| rng.gen_range(0..5)).collect();
        identity_ok &= bleu4(&a, &a) == 1.0 && rouge2(&a, &a) == 1.0 && rouge_l(&a, &a) == 1.0;
    }
    let text = "first we add the two numbers . so the answer is $7$ .".to_string();
    let corpus = generation_metrics(&[(text.clone(), text)], &Tokenizer::default(), &DEFAULT_ANSWER_MARKERS);
    identity_ok &= corpus.values().all(|&v| v == 1.0);
    verdict(
        10,
        worst <= 1e-9 && identity_ok,
        format!("max deviation from oracles {worst:.2e} on 100 pairs, identity exact {identity_ok}"),
    );
}

