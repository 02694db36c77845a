//! Unified multi-task fine-tuning with task prompts.
//!
//! Classification tasks share one multi-label head over the union of their
//! labels (namespaced `task/label`); generation tasks are sequence-to-sequence
//! pairs for the G-decoder. Every task owns one row of the prompt table.

use std::collections::{BTreeMap, HashSet};

use mathmoe_tensor::{Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, OptimizerConfig};
use crate::corpus::CorpusRecord;
use crate::error::{CoreError, Result};
use crate::model::{encoder_ids, Decoding, Model};
use crate::nn::Graph;
use crate::text::{MathText, Tokenizer, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFormat {
    Classification,
    Generation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneExample {
    pub input: MathText,
    /// Gold labels (classification).
    pub labels: Vec<String>,
    /// Target ids (generation).
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub name: String,
    pub format: TaskFormat,
    /// Declared label set; empty for generation.
    pub labels: Vec<String>,
    pub examples: Vec<FinetuneExample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub format: TaskFormat,
    /// Row of the prompt table.
    pub prompt: usize,
    /// This task's labels occupy `label_offset..label_offset + label_count`
    /// of the union dictionary.
    pub label_offset: usize,
    pub label_count: usize,
}

impl TaskSpec {
    pub fn label_range(&self) -> std::ops::Range<usize> {
        self.label_offset..self.label_offset + self.label_count
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnifiedTasks {
    pub tasks: Vec<TaskSpec>,
    /// Union label dictionary, entries `task/label`.
    pub labels: Vec<String>,
}

impl UnifiedTasks {
    pub fn task(&self, name: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CoreError::UnknownTask(name.to_string()))
    }

    pub fn label_index(&self, task: &TaskSpec, label: &str) -> Option<usize> {
        let key = format!("{}/{}", task.name, label);
        task.label_range().find(|&i| self.labels[i] == key)
    }

    /// The bare label name of union entry `index`.
    pub fn label_name(&self, index: usize) -> &str {
        let full = &self.labels[index];
        full.split_once('/').map_or(full.as_str(), |(_, l)| l)
    }
}

/// Builds the task table and union label dictionary.
pub fn unify_finetune_data(datasets: &[TaskDataset]) -> Result<UnifiedTasks> {
    let mut seen = HashSet::new();
    let mut out = UnifiedTasks::default();
    for (i, d) in datasets.iter().enumerate() {
        if !seen.insert(d.name.as_str()) {
            return Err(CoreError::Config(format!("duplicate task name {:?}", d.name)));
        }
        if d.name.contains('/') {
            return Err(CoreError::Config(format!("task name {:?} must not contain '/'", d.name)));
        }
        let offset = out.labels.len();
        if d.format == TaskFormat::Classification {
            if d.labels.is_empty() {
                return Err(CoreError::Config(format!("classification task {:?} declares no labels", d.name)));
            }
            let mut own = HashSet::new();
            for l in &d.labels {
                if !own.insert(l) {
                    return Err(CoreError::Config(format!("task {:?} repeats label {l:?}", d.name)));
                }
                out.labels.push(format!("{}/{}", d.name, l));
            }
            for ex in &d.examples {
                if let Some(bad) = ex.labels.iter().find(|l| !own.contains(l)) {
                    return Err(CoreError::Config(format!("task {:?} uses undeclared label {bad:?}", d.name)));
                }
            }
        }
        out.tasks.push(TaskSpec {
            name: d.name.clone(),
            format: d.format,
            prompt: i,
            label_offset: offset,
            label_count: out.labels.len() - offset,
        });
    }
    Ok(out)
}

/// Groups corpus records by their `task` field (default `"default"`).
/// Tasks whose records carry labels are classification tasks over the full
/// text; the others generate the solution from the statement.
pub fn datasets_from_records(records: &[CorpusRecord], tokenizer: &Tokenizer, vocab: &Vocabulary) -> Result<Vec<TaskDataset>> {
    let mut order: Vec<String> = Vec::new();
    let mut grouped: BTreeMap<String, Vec<&CorpusRecord>> = BTreeMap::new();
    for r in records {
        let name = r.task.clone().unwrap_or_else(|| "default".to_string());
        if !grouped.contains_key(&name) {
            order.push(name.clone());
        }
        grouped.entry(name).or_default().push(r);
    }
    let mut out = Vec::new();
    for name in order {
        let recs = &grouped[&name];
        let labelled = recs.iter().filter(|r| r.labels.is_some()).count();
        if labelled != 0 && labelled != recs.len() {
            return Err(CoreError::Config(format!("task {name:?} mixes labelled and unlabelled records")));
        }
        let format = if labelled > 0 { TaskFormat::Classification } else { TaskFormat::Generation };
        let mut labels: Vec<String> = Vec::new();
        let mut examples = Vec::with_capacity(recs.len());
        for r in recs {
            let ex = match format {
                TaskFormat::Classification => {
                    let gold = r.labels.clone().unwrap_or_default();
                    for l in &gold {
                        if !labels.contains(l) {
                            labels.push(l.clone());
                        }
                    }
                    FinetuneExample {
                        input: r.to_text(tokenizer, vocab)?,
                        labels: gold,
                        target: Vec::new(),
                    }
                }
                TaskFormat::Generation => FinetuneExample {
                    input: tokenizer.tokenize_problem(&r.statement, "", vocab)?,
                    labels: Vec::new(),
                    target: if r.solution.trim().is_empty() {
                        Vec::new()
                    } else {
                        tokenizer.tokenize(&r.solution, vocab)?.ids()
                    },
                },
            };
            examples.push(ex);
        }
        out.push(TaskDataset {
            name,
            format,
            labels,
            examples,
        });
    }
    Ok(out)
}

/// One epoch of `(task, batch number)` pairs. Tasks are interleaved by
/// smooth weighted round-robin with weight equal to their batch count, so
/// every task appears in every epoch in proportion to its size.
pub fn round_robin_schedule(sizes: &[usize], batch_size: usize) -> Vec<(usize, usize)> {
    let weights: Vec<i64> = sizes.iter().map(|&n| n.div_ceil(batch_size.max(1)) as i64).collect();
    let total: i64 = weights.iter().sum();
    let mut current = vec![0i64; sizes.len()];
    let mut issued = vec![0usize; sizes.len()];
    let mut out = Vec::with_capacity(total as usize);
    for _ in 0..total {
        for (c, w) in current.iter_mut().zip(&weights) {
            *c += w;
        }
        let pick = (0..sizes.len())
            .filter(|&i| weights[i] > 0)
            .max_by(|&a, &b| current[a].cmp(&current[b]).then(b.cmp(&a)))
            .expect("some task has batches");
        current[pick] -= total;
        out.push((pick, issued[pick]));
        issued[pick] += 1;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    /// Keep the prompt table fixed at its initial values.
    pub freeze_prompts: bool,
    /// Add the routing auxiliaries to every task loss.
    pub aux_losses: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 1000,
            batch_size: 8,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            freeze_prompts: false,
            aux_losses: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneStep {
    pub step: usize,
    pub task: String,
    pub loss: f64,
}

fn check_heads(model: &Model, tasks: &UnifiedTasks) -> Result<()> {
    if model.config.num_tasks != tasks.tasks.len() || model.config.num_labels != tasks.labels.len() {
        return Err(CoreError::Config(format!(
            "model has {} prompts and {} labels, the task table needs {} and {}",
            model.config.num_tasks,
            model.config.num_labels,
            tasks.tasks.len(),
            tasks.labels.len()
        )));
    }
    Ok(())
}

/// Mean loss of one homogeneous batch.
pub fn task_loss(model: &Model, g: &mut Graph, tasks: &UnifiedTasks, task: &TaskSpec, examples: &[&FinetuneExample], aux: bool) -> Result<Var> {
    if examples.is_empty() {
        return Err(CoreError::Composition(format!("empty batch for task {:?}", task.name)));
    }
    let mut terms = Vec::with_capacity(examples.len());
    for ex in examples {
        let enc = model.encode(g, &encoder_ids(&ex.input), Some(task.prompt))?;
        let l = match task.format {
            TaskFormat::Classification => {
                let hidden = model.u_decode(g, enc.reps)?;
                let scores = model.classify(g, hidden)?;
                let mut targets = vec![0.0; tasks.labels.len()];
                for l in &ex.labels {
                    let i = tasks
                        .label_index(task, l)
                        .ok_or_else(|| CoreError::Config(format!("unknown label {l:?} for task {:?}", task.name)))?;
                    targets[i] = 1.0;
                }
                let mask: Vec<bool> = (0..tasks.labels.len()).map(|i| task.label_range().contains(&i)).collect();
                g.tape.bce_with_logits(scores, &targets, &mask)?
            }
            TaskFormat::Generation => model.g_loss(g, enc.reps, &ex.target)?,
        };
        let l = if aux {
            let a = g.tape.add(l, enc.load_balance)?;
            g.tape.add(a, enc.z_loss)?
        } else {
            l
        };
        terms.push(l);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.tape.add(acc, t)?;
    }
    Ok(g.tape.scale(acc, 1.0 / terms.len() as f64)?)
}

/// Fine-tunes on the task mixture for `config.steps` batches.
pub fn finetune(
    model: &mut Model,
    tasks: &UnifiedTasks,
    datasets: &[TaskDataset],
    config: &FinetuneConfig,
    mut on_step: impl FnMut(&FinetuneStep) -> Result<()>,
) -> Result<Vec<FinetuneStep>> {
    check_heads(model, tasks)?;
    if datasets.len() != tasks.tasks.len() {
        return Err(CoreError::Config("dataset list does not match the task table".into()));
    }
    if datasets.iter().all(|d| d.examples.is_empty()) {
        return Err(CoreError::Config("no fine-tuning examples".into()));
    }
    let sizes: Vec<usize> = datasets.iter().map(|d| d.examples.len()).collect();
    let schedule = round_robin_schedule(&sizes, config.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(&model.store, config.optimizer.clone(), config.steps)?;
    let prompts = model.prompt_table();
    let mut log = Vec::with_capacity(config.steps);
    let mut step = 0;
    while step < config.steps {
        let orders: Vec<Vec<usize>> = sizes
            .iter()
            .map(|&n| {
                let mut o: Vec<usize> = (0..n).collect();
                o.shuffle(&mut rng);
                o
            })
            .collect();
        for &(t, b) in &schedule {
            if step >= config.steps {
                break;
            }
            let spec = &tasks.tasks[t];
            let idx = &orders[t][b * config.batch_size..((b + 1) * config.batch_size).min(sizes[t])];
            let examples: Vec<&FinetuneExample> = idx.iter().map(|&i| &datasets[t].examples[i]).collect();
            let graph_seed: u64 = rng.gen();
            let (loss, grads) = {
                let mut g = Graph::training(&model.store, graph_seed, model.config.dropout);
                let l = task_loss(model, &mut g, tasks, spec, &examples, config.aux_losses)?;
                let v = g.value(l).item();
                if !v.is_finite() {
                    return Err(CoreError::NonFinite(format!("fine-tuning loss at step {step} on task {:?}", spec.name)));
                }
                (v, g.backward(l)?)
            };
            let freeze = config.freeze_prompts;
            opt.step_filtered(&mut model.store, &grads, |id| !(freeze && id == prompts))?;
            let entry = FinetuneStep {
                step,
                task: spec.name.clone(),
                loss,
            };
            on_step(&entry)?;
            log.push(entry);
            step += 1;
        }
    }
    Ok(log)
}

/// Per-label scores of `input` restricted to the task's labels.
pub fn label_scores(model: &Model, tasks: &UnifiedTasks, task: &TaskSpec, input: &MathText) -> Result<Vec<f64>> {
    check_heads(model, tasks)?;
    let mut g = Graph::inference(&model.store);
    let enc = model.encode(&mut g, &encoder_ids(input), Some(task.prompt))?;
    let hidden = model.u_decode(&mut g, enc.reps)?;
    let scores = model.classify(&mut g, hidden)?;
    Ok(g.value(scores).data()[task.label_range()].to_vec())
}

/// Highest-scoring label of the task's subset.
pub fn predict_label(model: &Model, tasks: &UnifiedTasks, task: &TaskSpec, input: &MathText) -> Result<String> {
    if task.format != TaskFormat::Classification {
        return Err(CoreError::Config(format!("task {:?} is not a classification task", task.name)));
    }
    let scores = label_scores(model, tasks, task, input)?;
    let best = scores
        .iter()
        .enumerate()
        .fold(0, |b, (i, s)| if *s > scores[b] { i } else { b });
    Ok(tasks.label_name(task.label_offset + best).to_string())
}

/// Greedy or beam generation for a generation task.
pub fn predict_sequence(model: &Model, task: &TaskSpec, input: &MathText, max_new: usize, decoding: Decoding) -> Result<Vec<usize>> {
    model.generate(&encoder_ids(input), Some(task.prompt), max_new, decoding)
}

/// Sets the model's prompt table and classifier head to fit `tasks`.
pub fn prepare_model(model: &mut Model, tasks: &UnifiedTasks, seed: u64) {
    model.reset_task_heads(tasks.tasks.len(), tasks.labels.len(), seed);
}

pub fn prompt_snapshot(model: &Model) -> Tensor {
    model.store.value(model.prompt_table()).clone()
}
