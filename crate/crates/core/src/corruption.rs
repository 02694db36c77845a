//! Training pairs for the six pre-training objectives.
//!
//! Every corruption is a pure function of its inputs and a 64-bit seed.
//! Independent random decisions use separate ChaCha streams of the same seed,
//! so e.g. changing the mask rate never changes which action a position gets.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::text::{spans_from_labels, MathText, Token, TokenKind, Vocabulary, MASK};

const STREAM_POSITIONS: u64 = 0;
const STREAM_ACTIONS: u64 = 1;
const STREAM_SENTENCES: u64 = 2;
const STREAM_FORMULAS: u64 = 3;

const PERMUTATION_ATTEMPTS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Objective {
    Mlm,
    Dae,
    Ssr,
    Sfr,
    Usc,
    Gsc,
}

impl Objective {
    pub const ALL: [Objective; 6] = [
        Objective::Mlm,
        Objective::Dae,
        Objective::Ssr,
        Objective::Sfr,
        Objective::Usc,
        Objective::Gsc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Mlm => "MLM",
            Objective::Dae => "DAE",
            Objective::Ssr => "SSR",
            Objective::Sfr => "SFR",
            Objective::Usc => "USC",
            Objective::Gsc => "GSC",
        }
    }

    /// Objectives trained through the U-decoder.
    pub fn uses_u_decoder(self) -> bool {
        matches!(self, Objective::Mlm | Objective::Usc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub corrupted: MathText,
    pub original: MathText,
    /// Sorted positions chosen for masking (empty for SSR/SFR).
    pub masked_positions: Vec<usize>,
    /// Action taken at each masked position (MLM/DAE only).
    pub actions: Vec<MaskAction>,
    pub objective: Objective,
    pub rng_seed: u64,
    /// For SSR/SFR: slot `j` of the corrupted text holds original segment `slot_mapping[j]`.
    pub slot_mapping: Vec<usize>,
    /// Set when every permutation attempt came out as the identity.
    pub identity: bool,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn mask_count(rate: f64, n: usize) -> usize {
    // Guard against 0.15 * 20 = 3.0000000000000004 rounding up to 4.
    ((rate * n as f64) - 1e-9).ceil().max(1.0) as usize
}

/// Weighted sampling without replacement over the whole text.
pub fn sample_mask_positions(text: &MathText, rate: f64, seed: u64) -> Result<Vec<usize>> {
    sample_mask_positions_in(text, 0..text.len(), rate, seed)
}

/// Draws `⌈rate·|region|⌉` distinct non-special positions of `region`, each
/// draw proportional to `i + 1` with `i` the offset inside the region.
pub fn sample_mask_positions_in(text: &MathText, region: Range<usize>, rate: f64, seed: u64) -> Result<Vec<usize>> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(CoreError::Config(format!("mask rate {rate} must lie in (0, 1)")));
    }
    let region = region.start.min(text.len())..region.end.min(text.len());
    let mut pool: Vec<(usize, f64)> = region
        .clone()
        .filter(|&i| text.tokens[i].kind != TokenKind::Special)
        .map(|i| (i, (i - region.start + 1) as f64))
        .collect();
    if pool.is_empty() {
        return Err(CoreError::EmptySelection);
    }
    let k = mask_count(rate, region.len()).min(pool.len());
    let mut r = rng(seed, STREAM_POSITIONS);
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = pool.iter().map(|&(_, w)| w).sum();
        let mut u = r.gen::<f64>() * total;
        let mut pick = pool.len() - 1;
        for (j, &(_, w)) in pool.iter().enumerate() {
            if u < w {
                pick = j;
                break;
            }
            u -= w;
        }
        chosen.push(pool.remove(pick).0);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

fn replace_token(text: &mut MathText, pos: usize, id: usize, vocab: &Vocabulary) {
    // The slot keeps its kind so formula spans stay all-symbol.
    let kind = text.tokens[pos].kind;
    text.tokens[pos] = Token {
        surface: vocab.surface(id).to_string(),
        kind,
        id,
    };
}

/// Applies the 80/10/10 mask / random / keep actions at `positions`.
pub fn apply_mlm_corruption(text: &MathText, positions: &[usize], vocab: &Vocabulary, seed: u64) -> Result<CorruptionRecord> {
    if let Some(&bad) = positions.iter().find(|&&p| p >= text.len()) {
        return Err(CoreError::InvalidText(format!("mask position {bad} out of range")));
    }
    let mut r = rng(seed, STREAM_ACTIONS);
    let mut corrupted = text.clone();
    let ordinary = vocab.ordinary_ids();
    let mut actions = Vec::with_capacity(positions.len());
    for &p in positions {
        let u: f64 = r.gen();
        let action = if u < 0.8 {
            MaskAction::Mask
        } else if u < 0.9 {
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        match action {
            MaskAction::Mask => replace_token(&mut corrupted, p, MASK, vocab),
            MaskAction::Random if !ordinary.is_empty() => {
                let id = r.gen_range(ordinary.clone());
                replace_token(&mut corrupted, p, id, vocab);
            }
            _ => {}
        }
        actions.push(action);
    }
    Ok(CorruptionRecord {
        corrupted,
        original: text.clone(),
        masked_positions: positions.to_vec(),
        actions,
        objective: Objective::Mlm,
        rng_seed: seed,
        slot_mapping: Vec::new(),
        identity: false,
    })
}

/// Position sampling plus MLM actions over the whole text.
pub fn mlm_record(text: &MathText, rate: f64, vocab: &Vocabulary, seed: u64) -> Result<CorruptionRecord> {
    let positions = sample_mask_positions(text, rate, seed)?;
    apply_mlm_corruption(text, &positions, vocab, seed)
}

/// The denoising pair reuses the masked input with the whole original as target.
pub fn dae_record(mlm: &CorruptionRecord) -> CorruptionRecord {
    CorruptionRecord {
        objective: Objective::Dae,
        ..mlm.clone()
    }
}

fn non_identity_permutation(n: usize, r: &mut ChaCha8Rng) -> (Vec<usize>, bool) {
    let mut perm: Vec<usize> = (0..n).collect();
    for _ in 0..PERMUTATION_ATTEMPTS {
        perm.shuffle(r);
        if perm.iter().enumerate().any(|(i, &p)| i != p) {
            return (perm, false);
        }
    }
    ((0..n).collect(), true)
}

fn formula_labels(text: &MathText) -> Vec<Option<usize>> {
    let mut labels = vec![None; text.len()];
    for (f, &(s, e)) in text.formula_spans.iter().enumerate() {
        for l in &mut labels[s..e] {
            *l = Some(f);
        }
    }
    labels
}

/// Permutes the solution's sentences; the statement is untouched.
pub fn shuffle_sentences(text: &MathText, seed: u64) -> Result<CorruptionRecord> {
    let spans = &text.sentence_spans;
    if spans.len() < 2 {
        return Err(CoreError::NotCorruptible(format!(
            "{} sentence(s) in the solution",
            spans.len()
        )));
    }
    let (perm, identity) = non_identity_permutation(spans.len(), &mut rng(seed, STREAM_SENTENCES));
    let labels = formula_labels(text);
    let mut tokens = text.tokens[..text.statement_len].to_vec();
    let mut new_labels = labels[..text.statement_len].to_vec();
    let mut sentence_spans = Vec::with_capacity(spans.len());
    for &j in &perm {
        let (s, e) = spans[j];
        let start = tokens.len();
        tokens.extend_from_slice(&text.tokens[s..e]);
        new_labels.extend_from_slice(&labels[s..e]);
        sentence_spans.push((start, tokens.len()));
    }
    let corrupted = MathText {
        tokens,
        formula_spans: spans_from_labels(&new_labels),
        sentence_spans,
        statement_len: text.statement_len,
    };
    Ok(CorruptionRecord {
        corrupted,
        original: text.clone(),
        masked_positions: Vec::new(),
        actions: Vec::new(),
        objective: Objective::Ssr,
        rng_seed: seed,
        slot_mapping: perm,
        identity,
    })
}

/// Permutes whole formulas across the solution's formula slots; the text
/// around them keeps its order.
pub fn shuffle_formulas(text: &MathText, seed: u64) -> Result<CorruptionRecord> {
    let slots = text.solution_formulas();
    if slots.len() < 2 {
        return Err(CoreError::NotCorruptible(format!(
            "{} formula(s) in the solution",
            slots.len()
        )));
    }
    let (perm, identity) = non_identity_permutation(slots.len(), &mut rng(seed, STREAM_FORMULAS));
    let labels = formula_labels(text);
    let mut tokens = Vec::with_capacity(text.len());
    let mut new_labels = Vec::with_capacity(text.len());
    let mut i = 0;
    let mut slot = 0;
    while i < text.len() {
        if slot < slots.len() && slots[slot].0 == i {
            let (s, e) = slots[perm[slot]];
            tokens.extend_from_slice(&text.tokens[s..e]);
            new_labels.extend_from_slice(&labels[s..e]);
            i = slots[slot].1;
            slot += 1;
        } else {
            tokens.push(text.tokens[i].clone());
            new_labels.push(labels[i]);
            i += 1;
        }
    }
    let corrupted = MathText {
        tokens,
        formula_spans: spans_from_labels(&new_labels),
        sentence_spans: Vec::new(),
        statement_len: text.statement_len,
    }
    .segment_sentences();
    Ok(CorruptionRecord {
        corrupted,
        original: text.clone(),
        masked_positions: Vec::new(),
        actions: Vec::new(),
        objective: Objective::Sfr,
        rng_seed: seed,
        slot_mapping: perm,
        identity,
    })
}

/// Mask-filling predictions from each decoder, used to build the
/// solution-checking pairs.
pub trait SolutionFiller {
    /// U-decoder predictions (one id per position) for the masked text.
    fn fill_u(&self, masked: &MathText, positions: &[usize]) -> Result<Vec<usize>>;
    /// G-decoder predictions, filled left to right.
    fn fill_g(&self, masked: &MathText, positions: &[usize]) -> Result<Vec<usize>>;
}

/// Masks solution tokens as in MLM and lets each decoder fill them in.
///
/// Returns `(for_u, for_g)`: the U-decoder learns to correct the G-decoder's
/// fills and vice versa.
pub fn prepare_solution_checking(
    text: &MathText,
    filler: &dyn SolutionFiller,
    vocab: &Vocabulary,
    rate: f64,
    seed: u64,
) -> Result<(CorruptionRecord, CorruptionRecord)> {
    let positions = sample_mask_positions_in(text, text.solution_range(), rate, seed)?;
    let masked = apply_mlm_corruption(text, &positions, vocab, seed)?;
    let fills_u = filler.fill_u(&masked.corrupted, &positions)?;
    let fills_g = filler.fill_g(&masked.corrupted, &positions)?;
    if fills_u.len() != positions.len() || fills_g.len() != positions.len() {
        return Err(CoreError::LengthMismatch(format!(
            "{} positions, fills {} / {}",
            positions.len(),
            fills_u.len(),
            fills_g.len()
        )));
    }
    let fill = |ids: &[usize]| {
        let mut t = masked.corrupted.clone();
        for (&p, &id) in positions.iter().zip(ids) {
            replace_token(&mut t, p, id, vocab);
        }
        t
    };
    let by_u = fill(&fills_u);
    let by_g = fill(&fills_g);
    let record = |corrupted: MathText, objective| CorruptionRecord {
        corrupted,
        original: text.clone(),
        masked_positions: positions.clone(),
        actions: Vec::new(),
        objective,
        rng_seed: seed,
        slot_mapping: Vec::new(),
        identity: false,
    };
    Ok((record(by_g, Objective::Usc), record(by_u, Objective::Gsc)))
}
