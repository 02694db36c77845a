//! Dense exemplar retrieval.
//!
//! Texts are embedded as the L2-normalised `[CLS]` state of the U-decoder's
//! last layer. The index keeps a problem vector and a solution vector per
//! entry; a query is scored against whichever side its composition uses,
//! and the `statement+draft` composition concatenates both unit vectors on
//! each side before normalising again.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusRecord;
use crate::error::{CoreError, Result};
use crate::model::{encoder_ids, Model};
use crate::nn::{Graph, ParamGroup};
use crate::text::{MathText, Tokenizer, Vocabulary};
use crate::training::{AdamW, OptimizerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Composition {
    #[serde(rename = "statement")]
    Statement,
    #[serde(rename = "statement+draft")]
    StatementDraft,
    #[serde(rename = "draft")]
    Draft,
}

impl Composition {
    pub fn name(self) -> &'static str {
        match self {
            Composition::Statement => "statement",
            Composition::StatementDraft => "statement+draft",
            Composition::Draft => "draft",
        }
    }
}

/// Raw query text; which parts are required depends on the composition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub composition: Composition,
    pub statement: Option<String>,
    pub draft: Option<String>,
}

impl Query {
    pub fn statement(q: impl Into<String>) -> Self {
        Query {
            composition: Composition::Statement,
            statement: Some(q.into()),
            draft: None,
        }
    }
}

pub fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in v {
        *x /= n;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn concat_unit(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    normalize(&mut v);
    v
}

/// Embeds texts with a frozen model.
pub struct Embedder<'m> {
    pub model: &'m Model,
    pub tokenizer: Tokenizer,
    pub vocab: &'m Vocabulary,
}

impl<'m> Embedder<'m> {
    pub fn new(model: &'m Model, vocab: &'m Vocabulary) -> Self {
        Embedder {
            model,
            tokenizer: Tokenizer::default(),
            vocab,
        }
    }

    pub fn embed_text(&self, text: &MathText) -> Result<Vec<f64>> {
        let mut g = Graph::inference(&self.model.store);
        let enc = self.model.encode(&mut g, &truncated_ids(text, self.model.config.max_len), None)?;
        let hidden = self.model.u_decode(&mut g, enc.reps)?;
        let cls = self.model.cls_state(&mut g, hidden)?;
        let mut v = g.value(cls).data().to_vec();
        normalize(&mut v);
        Ok(v)
    }

    pub fn embed(&self, raw: &str) -> Result<Vec<f64>> {
        let text = self.tokenizer.tokenize(raw, self.vocab)?;
        self.embed_text(&text)
    }

    /// Query vector for `query`, laid out to match [`EmbeddingIndex::key`].
    pub fn embed_query(&self, query: &Query) -> Result<Vec<f64>> {
        let need = |part: &Option<String>, what: &str| {
            part.as_deref()
                .filter(|s| !s.trim().is_empty())
                .ok_or_else(|| CoreError::Config(format!("{} query needs a {what}", query.composition.name())))
                .map(str::to_string)
        };
        Ok(match query.composition {
            Composition::Statement => self.embed(&need(&query.statement, "statement")?)?,
            Composition::Draft => self.embed(&need(&query.draft, "draft")?)?,
            Composition::StatementDraft => {
                let s = self.embed(&need(&query.statement, "statement")?)?;
                let d = self.embed(&need(&query.draft, "draft")?)?;
                concat_unit(&s, &d)
            }
        })
    }
}

/// Encoder ids cut to fit `max_len`, keeping the leading tokens.
pub fn truncated_ids(text: &MathText, max_len: usize) -> Vec<usize> {
    let mut ids = encoder_ids(text);
    ids.truncate(max_len);
    ids
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: usize,
    pub problem: String,
    pub solution: String,
    pub problem_vec: Vec<f64>,
    pub solution_vec: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: usize,
    pub score: f64,
    pub problem: String,
    pub solution: String,
}

/// In-memory pool of exemplars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    pub dim: usize,
    pub entries: Vec<IndexEntry>,
}

impl EmbeddingIndex {
    pub fn new(dim: usize) -> Self {
        EmbeddingIndex { dim, entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds an entry; both vectors are normalised on insertion.
    pub fn push(&mut self, problem: String, solution: String, mut problem_vec: Vec<f64>, mut solution_vec: Vec<f64>) -> Result<usize> {
        if problem_vec.len() != self.dim || solution_vec.len() != self.dim {
            return Err(CoreError::LengthMismatch(format!(
                "index dimension {}, vectors {} and {}",
                self.dim,
                problem_vec.len(),
                solution_vec.len()
            )));
        }
        normalize(&mut problem_vec);
        normalize(&mut solution_vec);
        let id = self.entries.len();
        self.entries.push(IndexEntry {
            id,
            problem,
            solution,
            problem_vec,
            solution_vec,
        });
        Ok(id)
    }

    /// Embeds each record's statement and solution.
    pub fn build(embedder: &Embedder, records: &[CorpusRecord]) -> Result<Self> {
        let mut index = EmbeddingIndex::new(embedder.model.config.d_model);
        for r in records {
            let p = embedder.embed(&r.statement)?;
            let s = if r.solution.trim().is_empty() { p.clone() } else { embedder.embed(&r.solution)? };
            index.push(r.statement.clone(), r.solution.clone(), p, s)?;
        }
        Ok(index)
    }

    /// Unit key of `entry` for the given composition.
    pub fn key(&self, entry: &IndexEntry, composition: Composition) -> Vec<f64> {
        match composition {
            Composition::Statement => entry.problem_vec.clone(),
            Composition::Draft => entry.solution_vec.clone(),
            Composition::StatementDraft => concat_unit(&entry.problem_vec, &entry.solution_vec),
        }
    }

    /// Top-`b` entries by cosine, descending, ties in insertion order.
    /// `b` larger than the pool is bounded with a warning.
    pub fn search(&self, composition: Composition, query: &[f64], b: usize) -> Result<Vec<Hit>> {
        if self.entries.is_empty() {
            return Err(CoreError::Config("retrieval index is empty".into()));
        }
        let want = if composition == Composition::StatementDraft { 2 * self.dim } else { self.dim };
        if query.len() != want {
            return Err(CoreError::LengthMismatch(format!("query has {} dims, expected {want}", query.len())));
        }
        let b = if b > self.entries.len() {
            log::warn!("requested {b} exemplars from a pool of {}", self.entries.len());
            self.entries.len()
        } else {
            b
        };
        let mut q = query.to_vec();
        normalize(&mut q);
        let mut scored: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i, dot(&q, &self.key(e, composition))))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        Ok(scored
            .into_iter()
            .take(b)
            .map(|(i, score)| {
                let e = &self.entries[i];
                Hit {
                    id: e.id,
                    score,
                    problem: e.problem.clone(),
                    solution: e.solution.clone(),
                }
            })
            .collect())
    }

    pub fn retrieve(&self, embedder: &Embedder, query: &Query, b: usize) -> Result<Vec<Hit>> {
        let v = embedder.embed_query(query)?;
        self.search(query.composition, &v, b)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let index: EmbeddingIndex = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        for e in &index.entries {
            for v in [&e.problem_vec, &e.solution_vec] {
                let n = dot(v, v).sqrt();
                if v.len() != index.dim || (n - 1.0).abs() > 1e-9 {
                    return Err(CoreError::Config(format!("index entry {} is not a unit vector of width {}", e.id, index.dim)));
                }
            }
        }
        Ok(index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub temperature: f64,
    /// Dropout used to form the two views of each text.
    pub dropout: f64,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            steps: 500,
            batch_size: 16,
            temperature: 0.05,
            dropout: 0.1,
            seed: 0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// In-batch InfoNCE: row `i` of `z1` should match row `i` of `z2`. Both
/// inputs must already be unit rows.
pub fn info_nce(g: &mut Graph, z1: mathmoe_tensor::Var, z2: mathmoe_tensor::Var, temperature: f64) -> Result<mathmoe_tensor::Var> {
    let n = g.value(z1).rows();
    if n < 2 {
        return Err(CoreError::NoNegatives);
    }
    let sim = g.tape.matmul_nt(z1, z2)?;
    let logits = g.tape.scale(sim, 1.0 / temperature)?;
    let targets: Vec<usize> = (0..n).collect();
    Ok(g.tape.cross_entropy(logits, &targets, usize::MAX)?)
}

fn views(model: &Model, g: &mut Graph, texts: &[&MathText]) -> Result<(mathmoe_tensor::Var, mathmoe_tensor::Var)> {
    let mut rows = [Vec::new(), Vec::new()];
    for view in &mut rows {
        for t in texts {
            let enc = model.encode(g, &truncated_ids(t, model.config.max_len), None)?;
            let hidden = model.u_decode(g, enc.reps)?;
            view.push(model.cls_state(g, hidden)?);
        }
    }
    let z1 = g.tape.concat_rows(&rows[0])?;
    let z2 = g.tape.concat_rows(&rows[1])?;
    Ok((g.tape.l2_normalize_rows(z1)?, g.tape.l2_normalize_rows(z2)?))
}

/// SimCSE-style training: two dropout views per text are positives, the
/// other texts of the batch negatives. Only encoder and U-decoder parameters
/// change. Returns the loss per step.
pub fn contrastive_train(model: &mut Model, texts: &[MathText], config: &ContrastiveConfig) -> Result<Vec<f64>> {
    if config.batch_size < 2 || texts.len() < 2 {
        return Err(CoreError::NoNegatives);
    }
    if config.dropout <= 0.0 {
        return Err(CoreError::Config("contrastive training needs dropout > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(&model.store, config.optimizer.clone(), config.steps)?;
    let groups: Vec<ParamGroup> = model.store.iter().map(|(_, p)| p.group).collect();
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        if order.len() < config.batch_size {
            let mut fresh: Vec<usize> = (0..texts.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let picked: Vec<usize> = order.drain(..config.batch_size.min(texts.len())).collect();
        let batch: Vec<&MathText> = picked.iter().map(|&i| &texts[i]).collect();
        let seed: u64 = rng.gen();
        let (loss, grads) = {
            let mut g = Graph::training(&model.store, seed, config.dropout);
            let (z1, z2) = views(model, &mut g, &batch)?;
            let l = info_nce(&mut g, z1, z2, config.temperature)?;
            (g.value(l).item(), g.backward(l)?)
        };
        if !loss.is_finite() {
            return Err(CoreError::NonFinite("contrastive loss".into()));
        }
        opt.step_filtered(&mut model.store, &grads, |id| groups[id.index()] != ParamGroup::GDecoder)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Mean cosine between two dropout views of each text.
pub fn positive_pair_cosine(model: &Model, texts: &[MathText], dropout: f64, seed: u64) -> Result<f64> {
    if texts.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::training(&model.store, seed, dropout);
    let refs: Vec<&MathText> = texts.iter().collect();
    let (z1, z2) = views(model, &mut g, &refs)?;
    let (a, b) = (g.value(z1), g.value(z2));
    let total: f64 = (0..texts.len()).map(|i| dot(a.row_slice(i), b.row_slice(i))).sum();
    Ok(total / texts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(vectors: &[[f64; 2]]) -> EmbeddingIndex {
        let mut ix = EmbeddingIndex::new(2);
        for (i, v) in vectors.iter().enumerate() {
            ix.push(format!("q{i}"), format!("a{i}"), v.to_vec(), v.to_vec()).unwrap();
        }
        ix
    }

    #[test]
    fn ties_keep_insertion_order_and_b_is_bounded() {
        let ix = index(&[[1.0, 0.0], [0.0, 1.0], [2.0, 0.0]]);
        let hits = ix.search(Composition::Statement, &[1.0, 0.0], 10).unwrap();
        let ids: Vec<usize> = hits.iter().map(|h| h.id).collect();
        assert_eq!(ids, [0, 2, 1]);
    }

    #[test]
    fn statement_draft_uses_both_halves() {
        let ix = index(&[[1.0, 0.0], [0.0, 1.0]]);
        let hits = ix.search(Composition::StatementDraft, &[0.0, 1.0, 0.0, 1.0], 1).unwrap();
        assert_eq!(hits[0].id, 1);
        assert!((hits[0].score - 1.0).abs() < 1e-12);
        assert!(ix.search(Composition::StatementDraft, &[0.0, 1.0], 1).is_err());
    }
}
