//! Small generated corpora for smoke runs and training checks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::CorpusRecord;

const STATEMENTS: [&str; 3] = ["compute ${e}$ .", "find the value of ${e}$ .", "what is ${e}$ ?"];

/// Single-digit arithmetic word problems. Every solution has three
/// sentences and two formulas.
pub fn arithmetic_corpus(n: usize, seed: u64) -> Vec<CorpusRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let a: i64 = rng.gen_range(0..10);
            let b: i64 = rng.gen_range(0..10);
            let (sym, verb, c) = match rng.gen_range(0..3) {
                0 => ("+", "add", a + b),
                1 => ("-", "subtract", a - b),
                _ => ("\\times", "multiply", a * b),
            };
            let e = format!("{a} {sym} {b}");
            let template = STATEMENTS[rng.gen_range(0..STATEMENTS.len())];
            let statement = template.replace("{e}", &e);
            let solution = format!("first we {verb} the two numbers . this gives ${e} = {c}$ . so the answer is ${c}$ .");
            CorpusRecord {
                answer: Some(c.to_string()),
                ..CorpusRecord::new(statement, solution)
            }
        })
        .collect()
}

const TOPIC_WORDS: [(&str, [&str; 4]); 2] = [
    ("algebra", ["equation", "unknown", "variable", "solve"]),
    ("geometry", ["triangle", "circle", "angle", "area"]),
];

const LEVEL_WORDS: [(&str, [&str; 4]); 2] = [
    ("easy", ["simple", "basic", "quick", "small"]),
    ("hard", ["tricky", "advanced", "long", "challenging"]),
];

const FILLER: [&str; 8] = ["the", "a", "of", "problem", "given", "value", "find", "number"];

fn labelled(task: &str, words: &[(&str, [&str; 4]); 2], n: usize, rng: &mut ChaCha8Rng) -> Vec<CorpusRecord> {
    (0..n)
        .map(|i| {
            let (label, cues) = words[i % 2];
            let mut tokens: Vec<String> = (0..rng.gen_range(3..6))
                .map(|_| FILLER[rng.gen_range(0..FILLER.len())].to_string())
                .collect();
            let at = rng.gen_range(0..=tokens.len());
            tokens.insert(at, cues[rng.gen_range(0..cues.len())].to_string());
            let x: u32 = rng.gen_range(0..10);
            CorpusRecord {
                labels: Some(vec![label.to_string()]),
                task: Some(task.to_string()),
                ..CorpusRecord::new(format!("{} ${x}$ .", tokens.join(" ")), "")
            }
        })
        .collect()
}

/// Two classification tasks (`topic`, `level`) whose label is decided by a
/// single cue word, and a `copy` generation task whose target repeats the
/// statement. Records are interleaved by task.
pub fn finetune_mixture(per_task: usize, seed: u64) -> Vec<CorpusRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = labelled("topic", &TOPIC_WORDS, per_task, &mut rng);
    out.extend(labelled("level", &LEVEL_WORDS, per_task, &mut rng));
    out.extend(copy_task(per_task, &mut rng));
    out
}

const COPY_WORDS: [&str; 10] = ["red", "blue", "green", "cat", "dog", "sun", "moon", "tree", "rock", "fish"];

fn copy_task(n: usize, rng: &mut ChaCha8Rng) -> Vec<CorpusRecord> {
    (0..n)
        .map(|_| {
            let len = rng.gen_range(3..7);
            let words: Vec<&str> = (0..len).map(|_| *COPY_WORDS.choose(rng).expect("non-empty")).collect();
            let s = words.join(" ");
            CorpusRecord {
                task: Some("copy".to_string()),
                ..CorpusRecord::new(s.clone(), s)
            }
        })
        .collect()
}
