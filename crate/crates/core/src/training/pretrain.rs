//! Multi-task continual pre-training.
//!
//! Each step samples a batch, sends one half to masked-token prediction
//! (MLM and DAE share the encoder pass, solution checking is added once
//! enabled) and the other half to logic recovery (SSR and SFR), then takes one
//! optimizer step on the sum of all objective losses plus the routing
//! auxiliaries.

use std::collections::BTreeMap;

use mathmoe_tensor::{relative_error, GradCheckReport, Var, FD_STEP};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, OptimizerConfig};
use crate::corruption::{
    mlm_record, prepare_solution_checking, shuffle_formulas, shuffle_sentences, CorruptionRecord, Objective,
};
use crate::error::{CoreError, Result};
use crate::model::{encoder_ids, encoder_position, Model};
use crate::nn::Graph;
use crate::text::{MathText, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub solution_checking: bool,
    /// Steps before the solution-checking objectives switch on.
    pub sc_warmup: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_size: 8,
            mask_rate: 0.15,
            solution_checking: true,
            sc_warmup: 200,
            seed: 0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// One pre-training batch after corruption.
#[derive(Clone, Debug)]
pub struct PretrainBatch {
    /// MLM records of the masked half; DAE reuses the same corrupted input.
    pub masked: Vec<CorruptionRecord>,
    /// SSR and SFR records of the logic half.
    pub logic: Vec<CorruptionRecord>,
    /// USC and GSC records built from the masked half.
    pub checking: Vec<CorruptionRecord>,
    pub sc_enabled: bool,
}

/// Per-step losses as written to the metrics log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    #[serde(rename = "L_MLM")]
    pub mlm: f64,
    #[serde(rename = "L_DAE")]
    pub dae: f64,
    #[serde(rename = "L_SSR")]
    pub ssr: f64,
    #[serde(rename = "L_SFR")]
    pub sfr: f64,
    #[serde(rename = "L_USC")]
    pub usc: f64,
    #[serde(rename = "L_GSC")]
    pub gsc: f64,
    #[serde(rename = "L_U")]
    pub load_balance: f64,
    #[serde(rename = "L_Z")]
    pub z_loss: f64,
    pub total: f64,
}

impl StepMetrics {
    /// Sum of the six objective losses, without the auxiliaries.
    pub fn multitask(&self) -> f64 {
        self.mlm + self.dae + self.ssr + self.sfr + self.usc + self.gsc
    }

    pub fn component_sum(&self) -> f64 {
        self.multitask() + self.load_balance + self.z_loss
    }

    fn set(&mut self, o: Objective, v: f64) {
        match o {
            Objective::Mlm => self.mlm = v,
            Objective::Dae => self.dae = v,
            Objective::Ssr => self.ssr = v,
            Objective::Sfr => self.sfr = v,
            Objective::Usc => self.usc = v,
            Objective::Gsc => self.gsc = v,
        }
    }
}

pub struct MultitaskLoss {
    pub total: Var,
    pub components: BTreeMap<Objective, Var>,
    pub load_balance: Var,
    pub z_loss: Var,
    pub metrics: StepMetrics,
    pub encoder_passes: usize,
}

fn skippable(e: &CoreError) -> bool {
    matches!(e, CoreError::NotCorruptible(_) | CoreError::EmptySelection)
}

/// Corrupts `texts` into one batch. The first half (rounded up) after a seeded
/// shuffle goes to masked-token prediction, the rest to logic recovery.
/// Texts that cannot be corrupted for an objective are skipped for it.
pub fn build_batch(
    model: &Model,
    texts: &[&MathText],
    vocab: &Vocabulary,
    mask_rate: f64,
    sc_enabled: bool,
    seed: u64,
) -> Result<PretrainBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..texts.len()).collect();
    order.shuffle(&mut rng);
    let half = texts.len().div_ceil(2);
    let mut batch = PretrainBatch {
        masked: Vec::new(),
        logic: Vec::new(),
        checking: Vec::new(),
        sc_enabled,
    };
    for (slot, &i) in order.iter().enumerate() {
        let text = texts[i];
        let s: u64 = rng.gen();
        let keep = |r: Result<CorruptionRecord>| -> Result<Option<CorruptionRecord>> {
            match r {
                Ok(r) => Ok(Some(r)),
                Err(e) if skippable(&e) => Ok(None),
                Err(e) => Err(e),
            }
        };
        if slot < half {
            batch.masked.extend(keep(mlm_record(text, mask_rate, vocab, s))?);
            if sc_enabled {
                match prepare_solution_checking(text, model, vocab, mask_rate, s ^ 0x5c) {
                    Ok((u, g)) => batch.checking.extend([u, g]),
                    Err(e) if skippable(&e) => {}
                    Err(e) => return Err(e),
                }
            }
        } else {
            batch.logic.extend(keep(shuffle_sentences(text, s))?);
            batch.logic.extend(keep(shuffle_formulas(text, s ^ 0xf0))?);
        }
    }
    Ok(batch)
}

struct Accumulator {
    terms: BTreeMap<Objective, Vec<Var>>,
    aux_lb: Vec<Var>,
    aux_z: Vec<Var>,
}

impl Accumulator {
    fn push(&mut self, o: Objective, v: Var) {
        self.terms.entry(o).or_default().push(v);
    }
}

fn mean_of(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.tape.add(acc, v)?;
    }
    Ok(g.tape.scale(acc, 1.0 / vars.len() as f64)?)
}

fn u_token_loss(model: &Model, g: &mut Graph, text: &MathText, reps: Var, positions: &[usize], targets: &[usize]) -> Result<Var> {
    let hidden = model.u_decode(g, reps)?;
    let rows: Vec<usize> = positions
        .iter()
        .map(|&p| encoder_position(p, text.statement_len, false))
        .collect();
    let logits = model.mlm_logits(g, hidden, &rows)?;
    Ok(g.tape.cross_entropy(logits, targets, usize::MAX)?)
}

/// Builds the combined objective for `batch` on graph `g`.
///
/// Each objective's loss is the mean over the records that carry it; the
/// auxiliaries are summed over MoE layers and averaged over encoder passes.
pub fn multitask_loss(model: &Model, g: &mut Graph, batch: &PretrainBatch) -> Result<MultitaskLoss> {
    if batch.masked.is_empty() && batch.logic.is_empty() {
        return Err(CoreError::Composition("batch has neither masked nor logic records".into()));
    }
    if !batch.sc_enabled && !batch.checking.is_empty() {
        return Err(CoreError::Composition("solution-checking records in a batch with SC disabled".into()));
    }
    let mut acc = Accumulator {
        terms: BTreeMap::new(),
        aux_lb: Vec::new(),
        aux_z: Vec::new(),
    };
    let encode = |g: &mut Graph, text: &MathText, acc: &mut Accumulator| -> Result<Var> {
        let enc = model.encode(g, &encoder_ids(text), None)?;
        acc.aux_lb.push(enc.load_balance);
        acc.aux_z.push(enc.z_loss);
        Ok(enc.reps)
    };

    for r in &batch.masked {
        if r.objective != Objective::Mlm {
            return Err(CoreError::Composition(format!("{} record in the masked half", r.objective.name())));
        }
        let reps = encode(g, &r.corrupted, &mut acc)?;
        let original = r.original.ids();
        let targets: Vec<usize> = r.masked_positions.iter().map(|&p| original[p]).collect();
        let mlm = u_token_loss(model, g, &r.corrupted, reps, &r.masked_positions, &targets)?;
        acc.push(Objective::Mlm, mlm);
        // DAE reconstructs the whole original text from the same input.
        let l = model.g_loss(g, reps, &original)?;
        acc.push(Objective::Dae, l);
    }
    for r in &batch.logic {
        if !matches!(r.objective, Objective::Ssr | Objective::Sfr) {
            return Err(CoreError::Composition(format!("{} record in the logic half", r.objective.name())));
        }
        let reps = encode(g, &r.corrupted, &mut acc)?;
        let l = model.g_loss(g, reps, &r.original.solution_ids())?;
        acc.push(r.objective, l);
    }
    for r in &batch.checking {
        let reps = encode(g, &r.corrupted, &mut acc)?;
        let l = match r.objective {
            Objective::Usc => {
                let positions: Vec<usize> = r.original.solution_range().collect();
                let targets = r.original.solution_ids();
                u_token_loss(model, g, &r.corrupted, reps, &positions, &targets)?
            }
            Objective::Gsc => model.g_loss(g, reps, &r.original.solution_ids())?,
            other => {
                return Err(CoreError::Composition(format!("{} record among solution-checking records", other.name())));
            }
        };
        acc.push(r.objective, l);
    }

    let mut metrics = StepMetrics::default();
    let mut components = BTreeMap::new();
    let mut total: Option<Var> = None;
    for (o, vars) in &acc.terms {
        let m = mean_of(g, vars)?;
        metrics.set(*o, g.value(m).item());
        components.insert(*o, m);
        total = Some(match total {
            Some(t) => g.tape.add(t, m)?,
            None => m,
        });
    }
    let load_balance = mean_of(g, &acc.aux_lb)?;
    let z_loss = mean_of(g, &acc.aux_z)?;
    metrics.load_balance = g.value(load_balance).item();
    metrics.z_loss = g.value(z_loss).item();
    let t = total.expect("at least one objective term");
    let t = g.tape.add(t, load_balance)?;
    let total = g.tape.add(t, z_loss)?;
    metrics.total = g.value(total).item();
    Ok(MultitaskLoss {
        total,
        components,
        load_balance,
        z_loss,
        metrics,
        encoder_passes: acc.aux_lb.len(),
    })
}

/// Runs `config.steps` optimizer steps over `texts`, calling `on_step` after
/// each. Deterministic for a fixed seed.
pub fn pretrain(
    model: &mut Model,
    texts: &[MathText],
    vocab: &Vocabulary,
    config: &PretrainConfig,
    mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<Vec<StepMetrics>> {
    if texts.is_empty() {
        return Err(CoreError::Config("pre-training corpus is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(CoreError::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(&model.store, config.optimizer.clone(), config.steps)?;
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let picks: Vec<&MathText> = (0..config.batch_size)
            .map(|_| &texts[rng.gen_range(0..texts.len())])
            .collect();
        let batch_seed: u64 = rng.gen();
        let graph_seed: u64 = rng.gen();
        let sc = config.solution_checking && step >= config.sc_warmup;
        let batch = build_batch(model, &picks, vocab, config.mask_rate, sc, batch_seed)?;
        let (mut metrics, grads) = {
            let mut g = Graph::training(&model.store, graph_seed, model.config.dropout);
            let loss = multitask_loss(model, &mut g, &batch)?;
            if !loss.metrics.total.is_finite() {
                return Err(non_finite(step, &loss.metrics, &picks));
            }
            let m = loss.metrics.clone();
            (m, g.backward(loss.total)?)
        };
        metrics.step = step;
        if !grads.is_finite() {
            return Err(non_finite(step, &metrics, &picks));
        }
        opt.step(&mut model.store, &grads)?;
        on_step(&metrics)?;
        log.push(metrics);
    }
    Ok(log)
}

fn non_finite(step: usize, metrics: &StepMetrics, texts: &[&MathText]) -> CoreError {
    let dump = serde_json::json!({
        "step": step,
        "losses": metrics,
        "texts": texts.iter().map(|t| t.detokenize()).collect::<Vec<_>>(),
    });
    CoreError::NonFinite(dump.to_string())
}

/// Per-layer dispatch fractions over `texts` in inference mode.
pub fn corpus_dispatch(model: &Model, texts: &[MathText], task: Option<usize>) -> Result<Vec<Vec<f64>>> {
    let k = model.config.moe.experts;
    let mut counts = vec![vec![0usize; k]; model.config.encoder_layers];
    let mut tokens = 0usize;
    for text in texts {
        for (l, decisions) in model.routing_table(text, task)?.iter().enumerate() {
            for d in decisions {
                for &e in &d.selected {
                    counts[l][e] += 1;
                }
            }
            if l == 0 {
                tokens += decisions.len();
            }
        }
    }
    Ok(counts
        .into_iter()
        .map(|c| c.into_iter().map(|n| n as f64 / tokens.max(1) as f64).collect())
        .collect())
}

/// Finite-difference check of the full pre-training objective with respect
/// to model parameters. At most `per_param` entries of each parameter tensor
/// are probed, chosen with `seed`; dropout and jitter draws are frozen by
/// reusing `graph_seed` for every evaluation.
pub fn check_gradients(model: &Model, batch: &PretrainBatch, graph_seed: u64, per_param: usize, seed: u64) -> Result<GradCheckReport> {
    let eval = |m: &Model| -> Result<f64> {
        let mut g = Graph::training(&m.store, graph_seed, m.config.dropout);
        let loss = multitask_loss(m, &mut g, batch)?;
        Ok(loss.metrics.total)
    };
    let grads = {
        let mut g = Graph::training(&model.store, graph_seed, model.config.dropout);
        let loss = multitask_loss(model, &mut g, batch)?;
        g.backward(loss.total)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let n = model.store.value(id).numel();
        if n == 0 {
            continue;
        }
        let mut entries: Vec<usize> = (0..n).collect();
        entries.shuffle(&mut rng);
        entries.truncate(per_param);
        for e in entries {
            let x0 = model.store.value(id).data()[e];
            probe.store.value_mut(id).data_mut()[e] = x0 + FD_STEP;
            let plus = eval(&probe)?;
            probe.store.value_mut(id).data_mut()[e] = x0 - FD_STEP;
            let minus = eval(&probe)?;
            probe.store.value_mut(id).data_mut()[e] = x0;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[e]);
            let rel = relative_error(analytic, numeric);
            let abs = (analytic - numeric).abs();
            report.max_absolute_error = report.max_absolute_error.max(abs);
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(rel);
                report.worst = Some((id.index(), e));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
