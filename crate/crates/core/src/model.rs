//! Shared MoE encoder with a bidirectional U-decoder (MLM and classifier
//! heads) and an autoregressive G-decoder (LM head).
//!
//! Encoder input layout: `[CLS] (prompt) statement [SEP] solution`. The task
//! prompt, when present, sits right after `[CLS]` and is also added to the
//! router input of every MoE layer. The G-decoder shares the encoder's token
//! embedding and has its own position embedding.

use mathmoe_tensor::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corruption::SolutionFiller;
use crate::error::{CoreError, Result};
use crate::moe::{LoadStats, MoeConfig, MoeLayer, RoutingDecision};
use crate::nn::{normal, Attention, FeedForward, Graph, LayerNorm, Linear, ParamGroup, ParamId, ParamStore};
use crate::text::{MathText, TokenKind, Vocabulary, BOS, CLS, EOS, NUM_SPECIAL, SEP};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub u_decoder_layers: usize,
    pub g_decoder_layers: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub moe: MoeConfig,
    /// Width of the union multi-label classifier head.
    pub num_labels: usize,
    /// Rows of the task-prompt table.
    pub num_tasks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_ff: 128,
            heads: 4,
            encoder_layers: 4,
            u_decoder_layers: 1,
            g_decoder_layers: 1,
            vocab_size: 512,
            max_len: 128,
            dropout: 0.1,
            moe: MoeConfig::default(),
            num_labels: 0,
            num_tasks: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CoreError::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return err(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.encoder_layers <= self.u_decoder_layers.max(self.g_decoder_layers) {
            return err("the encoder must be deeper than both decoders".into());
        }
        if self.u_decoder_layers == 0 || self.g_decoder_layers == 0 {
            return err("each decoder needs at least one layer".into());
        }
        if self.vocab_size <= NUM_SPECIAL {
            return err(format!("vocab_size {} leaves no room beyond the special tokens", self.vocab_size));
        }
        if self.max_len < 4 {
            return err("max_len must be at least 4".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        self.moe.validate()
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    moe: MoeLayer,
}

#[derive(Clone, Debug)]
struct ULayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct GLayer {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct Layout {
    tok_emb: ParamId,
    pos_emb: ParamId,
    prompts: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_ln: LayerNorm,
    u_layers: Vec<ULayer>,
    u_ln: LayerNorm,
    mlm_head: Linear,
    cls_head: Linear,
    g_pos_emb: ParamId,
    g_layers: Vec<GLayer>,
    g_ln: LayerNorm,
    lm_head: Linear,
}

/// Parameters and architecture of the whole network.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    layout: Layout,
}

/// Routing side-outputs of one encoder MoE layer.
#[derive(Clone, Debug)]
pub struct LayerRouting {
    pub decisions: Vec<RoutingDecision>,
    pub stats: LoadStats,
    /// Jittered router logits, `n × K`.
    pub logits: Var,
    pub expert_macs: u64,
}

pub struct Encoded {
    /// `n × d_model` final encoder states.
    pub reps: Var,
    pub layers: Vec<LayerRouting>,
    /// Load-balance loss summed over layers.
    pub load_balance: Var,
    /// Router z-loss summed over layers.
    pub z_loss: Var,
    pub prompt: bool,
}

/// `[CLS] statement [SEP] solution`.
pub fn encoder_ids(text: &MathText) -> Vec<usize> {
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(CLS);
    ids.extend(text.tokens[..text.statement_len].iter().map(|t| t.id));
    ids.push(SEP);
    ids.extend(text.tokens[text.statement_len..].iter().map(|t| t.id));
    ids
}

/// Encoder position of text token `i`.
pub fn encoder_position(i: usize, statement_len: usize, prompt: bool) -> usize {
    1 + usize::from(prompt) + i + usize::from(i >= statement_len)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decoding {
    Greedy,
    Beam(usize),
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (d, f, h) = (config.d_model, config.d_ff, config.heads);
        let e = ParamGroup::Encoder;
        let tok_emb = s.add("enc.tok_emb", e, normal(&[config.vocab_size, d], 1.0, &mut rng));
        let pos_emb = s.add("enc.pos_emb", e, normal(&[config.max_len, d], 0.5, &mut rng));
        let prompts = s.add("enc.prompts", e, normal(&[config.num_tasks, d], 1.0, &mut rng));
        let encoder = (0..config.encoder_layers)
            .map(|l| {
                let n = format!("enc.{l}");
                EncoderLayer {
                    ln1: LayerNorm::new(&mut s, &format!("{n}.ln1"), e, d),
                    attn: Attention::new(&mut s, &format!("{n}.attn"), e, d, h, &mut rng),
                    ln2: LayerNorm::new(&mut s, &format!("{n}.ln2"), e, d),
                    moe: MoeLayer::new(&mut s, &format!("{n}.moe"), d, f, config.moe, &mut rng),
                }
            })
            .collect();
        let enc_ln = LayerNorm::new(&mut s, "enc.ln_f", e, d);

        let u = ParamGroup::UDecoder;
        let u_layers = (0..config.u_decoder_layers)
            .map(|l| {
                let n = format!("u.{l}");
                ULayer {
                    ln1: LayerNorm::new(&mut s, &format!("{n}.ln1"), u, d),
                    attn: Attention::new(&mut s, &format!("{n}.attn"), u, d, h, &mut rng),
                    ln2: LayerNorm::new(&mut s, &format!("{n}.ln2"), u, d),
                    ffn: FeedForward::new(&mut s, &format!("{n}.ffn"), u, d, f, &mut rng),
                }
            })
            .collect();
        let u_ln = LayerNorm::new(&mut s, "u.ln_f", u, d);
        let mlm_head = Linear::new(&mut s, "u.mlm", u, d, config.vocab_size, &mut rng);
        let cls_head = Linear::new(&mut s, "u.cls", u, d, config.num_labels, &mut rng);

        let gg = ParamGroup::GDecoder;
        let g_pos_emb = s.add("g.pos_emb", gg, normal(&[config.max_len, d], 0.5, &mut rng));
        let g_layers = (0..config.g_decoder_layers)
            .map(|l| {
                let n = format!("g.{l}");
                GLayer {
                    ln1: LayerNorm::new(&mut s, &format!("{n}.ln1"), gg, d),
                    self_attn: Attention::new(&mut s, &format!("{n}.self"), gg, d, h, &mut rng),
                    ln2: LayerNorm::new(&mut s, &format!("{n}.ln2"), gg, d),
                    cross_attn: Attention::new(&mut s, &format!("{n}.cross"), gg, d, h, &mut rng),
                    ln3: LayerNorm::new(&mut s, &format!("{n}.ln3"), gg, d),
                    ffn: FeedForward::new(&mut s, &format!("{n}.ffn"), gg, d, f, &mut rng),
                }
            })
            .collect();
        let g_ln = LayerNorm::new(&mut s, "g.ln_f", gg, d);
        let lm_head = Linear::new(&mut s, "g.lm", gg, d, config.vocab_size, &mut rng);

        Ok(Model {
            config,
            store: s,
            layout: Layout {
                tok_emb,
                pos_emb,
                prompts,
                encoder,
                enc_ln,
                u_layers,
                u_ln,
                mlm_head,
                cls_head,
                g_pos_emb,
                g_layers,
                g_ln,
                lm_head,
            },
        })
    }

    /// Re-initialises the task-prompt table and the classifier head for a new
    /// task mixture.
    pub fn reset_task_heads(&mut self, num_tasks: usize, num_labels: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.d_model;
        self.config.num_tasks = num_tasks;
        self.config.num_labels = num_labels;
        let l = &self.layout;
        self.store.set(l.prompts, normal(&[num_tasks, d], 1.0, &mut rng));
        self.store.set(l.cls_head.w, normal(&[d, num_labels], 1.0 / (d as f64).sqrt(), &mut rng));
        self.store.set(l.cls_head.b, Tensor::zeros(&[num_labels]));
    }

    pub fn prompt_table(&self) -> ParamId {
        self.layout.prompts
    }

    pub fn router(&self, layer: usize) -> ParamId {
        self.layout.encoder[layer].moe.router
    }

    pub fn moe_layer(&self, layer: usize) -> &MoeLayer {
        &self.layout.encoder[layer].moe
    }

    /// Encodes already-laid-out ids (see [`encoder_ids`]).
    pub fn encode(&self, g: &mut Graph, ids: &[usize], task: Option<usize>) -> Result<Encoded> {
        let l = &self.layout;
        let n = ids.len() + usize::from(task.is_some());
        if n > self.config.max_len {
            return Err(CoreError::Overlength {
                len: n,
                max: self.config.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(CoreError::Config(format!("token id {bad} outside the vocabulary")));
        }
        let tok = g.param(l.tok_emb);
        let mut x = g.tape.embedding(tok, ids)?;
        let prompt = match task {
            Some(t) => {
                if t >= self.config.num_tasks {
                    return Err(CoreError::UnknownTask(t.to_string()));
                }
                let table = g.param(l.prompts);
                let p = g.tape.gather_rows(table, &[t])?;
                let head = g.tape.slice_rows(x, 0, 1)?;
                let rest = g.tape.slice_rows(x, 1, ids.len())?;
                x = g.tape.concat_rows(&[head, p, rest])?;
                Some(p)
            }
            None => None,
        };
        let pos = g.param(l.pos_emb);
        let positions: Vec<usize> = (0..n).collect();
        let pe = g.tape.gather_rows(pos, &positions)?;
        x = g.tape.add(x, pe)?;
        x = g.dropout(x)?;

        let mut layers = Vec::with_capacity(l.encoder.len());
        let mut lb: Option<Var> = None;
        let mut zl: Option<Var> = None;
        for layer in &l.encoder {
            let a = layer.ln1.forward(g, x)?;
            let a = layer.attn.forward(g, a, a, false)?;
            let a = g.dropout(a)?;
            x = g.tape.add(x, a)?;
            let m = layer.ln2.forward(g, x)?;
            let out = layer.moe.forward(g, m, prompt)?;
            let y = g.dropout(out.out)?;
            x = g.tape.add(x, y)?;
            lb = Some(match lb {
                Some(acc) => g.tape.add(acc, out.load_balance)?,
                None => out.load_balance,
            });
            zl = Some(match zl {
                Some(acc) => g.tape.add(acc, out.z_loss)?,
                None => out.z_loss,
            });
            layers.push(LayerRouting {
                decisions: out.decisions,
                stats: out.stats,
                logits: out.logits,
                expert_macs: out.expert_macs,
            });
        }
        let reps = l.enc_ln.forward(g, x)?;
        Ok(Encoded {
            reps,
            layers,
            load_balance: lb.expect("at least one encoder layer"),
            z_loss: zl.expect("at least one encoder layer"),
            prompt: prompt.is_some(),
        })
    }

    /// Bidirectional U-decoder over encoder states; returns its final hidden states.
    pub fn u_decode(&self, g: &mut Graph, reps: Var) -> Result<Var> {
        let l = &self.layout;
        let mut x = reps;
        for layer in &l.u_layers {
            let a = layer.ln1.forward(g, x)?;
            let a = layer.attn.forward(g, a, a, false)?;
            let a = g.dropout(a)?;
            x = g.tape.add(x, a)?;
            let f = layer.ln2.forward(g, x)?;
            let f = layer.ffn.forward(g, f)?;
            let f = g.dropout(f)?;
            x = g.tape.add(x, f)?;
        }
        l.u_ln.forward(g, x)
    }

    /// Vocabulary logits at the given U-decoder rows.
    pub fn mlm_logits(&self, g: &mut Graph, hidden: Var, rows: &[usize]) -> Result<Var> {
        let picked = g.tape.gather_rows(hidden, rows)?;
        self.layout.mlm_head.forward(g, picked)
    }

    /// Union-label scores from the `[CLS]` row, `1 × num_labels`.
    pub fn classify(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        if self.config.num_labels == 0 {
            return Err(CoreError::Config("the model has no classification labels".into()));
        }
        let cls = g.tape.slice_rows(hidden, 0, 1)?;
        self.layout.cls_head.forward(g, cls)
    }

    /// The `[CLS]` row of the U-decoder, `1 × d_model`.
    pub fn cls_state(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        Ok(g.tape.slice_rows(hidden, 0, 1)?)
    }

    /// Causal G-decoder over `inputs` attending to `reps`; returns
    /// `inputs.len() × vocab` next-token logits.
    pub fn g_decode(&self, g: &mut Graph, reps: Var, inputs: &[usize]) -> Result<Var> {
        let l = &self.layout;
        if inputs.is_empty() {
            return Err(CoreError::Config("the G-decoder needs at least the BOS token".into()));
        }
        if inputs.len() > self.config.max_len {
            return Err(CoreError::Overlength {
                len: inputs.len(),
                max: self.config.max_len,
            });
        }
        let tok = g.param(l.tok_emb);
        let x = g.tape.embedding(tok, inputs)?;
        let pos = g.param(l.g_pos_emb);
        let positions: Vec<usize> = (0..inputs.len()).collect();
        let pe = g.tape.gather_rows(pos, &positions)?;
        let mut x = g.tape.add(x, pe)?;
        x = g.dropout(x)?;
        for layer in &l.g_layers {
            let a = layer.ln1.forward(g, x)?;
            let a = layer.self_attn.forward(g, a, a, true)?;
            let a = g.dropout(a)?;
            x = g.tape.add(x, a)?;
            let c = layer.ln2.forward(g, x)?;
            let c = layer.cross_attn.forward(g, c, reps, false)?;
            let c = g.dropout(c)?;
            x = g.tape.add(x, c)?;
            let f = layer.ln3.forward(g, x)?;
            let f = layer.ffn.forward(g, f)?;
            let f = g.dropout(f)?;
            x = g.tape.add(x, f)?;
        }
        let x = l.g_ln.forward(g, x)?;
        l.lm_head.forward(g, x)
    }

    /// Teacher-forced mean NLL of `target` followed by `[EOS]`.
    pub fn g_loss(&self, g: &mut Graph, reps: Var, target: &[usize]) -> Result<Var> {
        let mut inputs = Vec::with_capacity(target.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(target);
        let mut labels = target.to_vec();
        labels.push(EOS);
        let logits = self.g_decode(g, reps, &inputs)?;
        Ok(g.tape.cross_entropy(logits, &labels, usize::MAX)?)
    }

    /// Final encoder states for `ids` in inference mode.
    pub fn encode_frozen(&self, ids: &[usize], task: Option<usize>) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let enc = self.encode(&mut g, ids, task)?;
        Ok(g.value(enc.reps).clone())
    }

    fn next_logits(&self, reps: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::inference(&self.store);
        let r = g.tape.constant(reps.clone());
        let logits = self.g_decode(&mut g, r, prefix)?;
        let last = g.value(logits).rows() - 1;
        Ok(g.value(logits).row_slice(last).to_vec())
    }

    /// Autoregressive decoding from the encoded `ids` until `[EOS]` or
    /// `max_new` tokens. Special tokens other than `[EOS]` are never produced.
    pub fn generate(&self, ids: &[usize], task: Option<usize>, max_new: usize, strategy: Decoding) -> Result<Vec<usize>> {
        if max_new == 0 {
            return Ok(Vec::new());
        }
        let max_new = max_new.min(self.config.max_len - 1);
        let reps = self.encode_frozen(ids, task)?;
        match strategy {
            Decoding::Greedy => {
                let mut prefix = vec![BOS];
                for _ in 0..max_new {
                    let logits = self.next_logits(&reps, &prefix)?;
                    let next = argmax_allowed(&logits, true);
                    if next == EOS {
                        break;
                    }
                    prefix.push(next);
                }
                Ok(prefix[1..].to_vec())
            }
            Decoding::Beam(width) => self.beam_search(&reps, max_new, width.max(1)),
        }
    }

    fn beam_search(&self, reps: &Tensor, max_new: usize, width: usize) -> Result<Vec<usize>> {
        struct Hyp {
            tokens: Vec<usize>,
            score: f64,
            done: bool,
        }
        let mut beams = vec![Hyp {
            tokens: vec![BOS],
            score: 0.0,
            done: false,
        }];
        for _ in 0..max_new {
            if beams.iter().all(|h| h.done) {
                break;
            }
            let mut next = Vec::new();
            for h in beams {
                if h.done {
                    next.push(h);
                    continue;
                }
                let logits = self.next_logits(reps, &h.tokens)?;
                let lse = log_sum_exp(&logits);
                let mut cands: Vec<usize> = (0..logits.len()).filter(|&i| allowed(i, true)).collect();
                cands.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
                for &c in cands.iter().take(width) {
                    let mut tokens = h.tokens.clone();
                    let done = c == EOS;
                    if !done {
                        tokens.push(c);
                    }
                    next.push(Hyp {
                        tokens,
                        score: h.score + logits[c] - lse,
                        done,
                    });
                }
            }
            next.sort_by(|a, b| b.score.total_cmp(&a.score));
            next.truncate(width);
            beams = next;
        }
        let norm = |h: &Hyp| h.score / h.tokens.len().max(1) as f64;
        let best = beams
            .iter()
            .max_by(|a, b| norm(a).total_cmp(&norm(b)))
            .expect("beam is never empty");
        Ok(best.tokens[1..].to_vec())
    }

    /// Per-token top-1 experts of every encoder layer for one text.
    pub fn routing_table(&self, text: &MathText, task: Option<usize>) -> Result<Vec<Vec<RoutingDecision>>> {
        let mut g = Graph::inference(&self.store);
        let enc = self.encode(&mut g, &encoder_ids(text), task)?;
        let positions: Vec<usize> = (0..text.len())
            .map(|i| encoder_position(i, text.statement_len, task.is_some()))
            .collect();
        Ok(enc
            .layers
            .into_iter()
            .map(|l| positions.iter().map(|&p| l.decisions[p].clone()).collect())
            .collect())
    }
}

fn allowed(id: usize, allow_eos: bool) -> bool {
    id >= NUM_SPECIAL || (allow_eos && id == EOS)
}

fn argmax_allowed(logits: &[f64], allow_eos: bool) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in logits.iter().enumerate() {
        if allowed(i, allow_eos) && (best == usize::MAX || v > logits[best]) {
            best = i;
        }
    }
    best
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl SolutionFiller for Model {
    fn fill_u(&self, masked: &MathText, positions: &[usize]) -> Result<Vec<usize>> {
        let mut g = Graph::inference(&self.store);
        let enc = self.encode(&mut g, &encoder_ids(masked), None)?;
        let hidden = self.u_decode(&mut g, enc.reps)?;
        let rows: Vec<usize> = positions
            .iter()
            .map(|&p| encoder_position(p, masked.statement_len, false))
            .collect();
        let logits = self.mlm_logits(&mut g, hidden, &rows)?;
        let t = g.value(logits);
        Ok((0..rows.len()).map(|r| argmax_allowed(t.row_slice(r), false)).collect())
    }

    fn fill_g(&self, masked: &MathText, positions: &[usize]) -> Result<Vec<usize>> {
        let reps = self.encode_frozen(&encoder_ids(masked), None)?;
        let mut seq: Vec<usize> = masked.ids();
        let mut fills = Vec::with_capacity(positions.len());
        for &p in positions {
            let mut prefix = Vec::with_capacity(p + 1);
            prefix.push(BOS);
            prefix.extend_from_slice(&seq[..p]);
            let logits = self.next_logits(&reps, &prefix)?;
            let id = argmax_allowed(&logits, false);
            seq[p] = id;
            fills.push(id);
        }
        Ok(fills)
    }
}

/// One row of the token-level routing report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRow {
    pub token: String,
    pub kind: TokenKind,
    pub layer: usize,
    pub expert: usize,
    pub gate: f64,
    /// The runner-up probability is within the tie tolerance of the winner.
    pub tie: bool,
}

pub const ROUTING_TIE_TOLERANCE: f64 = 1e-6;

/// One row per (text token, encoder layer), in text order then layer order.
pub fn routing_report(model: &Model, texts: &[MathText], task: Option<usize>) -> Result<Vec<RoutingRow>> {
    let mut rows = Vec::new();
    for text in texts {
        let table = model.routing_table(text, task)?;
        for (i, token) in text.tokens.iter().enumerate() {
            for (layer, decisions) in table.iter().enumerate() {
                let d = &decisions[i];
                let mut sorted = d.probs.clone();
                sorted.sort_by(|a, b| b.total_cmp(a));
                let tie = sorted.len() > 1 && sorted[0] - sorted[1] <= ROUTING_TIE_TOLERANCE;
                rows.push(RoutingRow {
                    token: token.surface.clone(),
                    kind: token.kind,
                    layer,
                    expert: d.selected[0],
                    gate: d.gates[0],
                    tie,
                });
            }
        }
    }
    Ok(rows)
}

/// Token text for display, e.g. in reports and generated outputs.
pub fn render_ids(ids: &[usize], vocab: &Vocabulary) -> String {
    MathText::from_ids(ids, vocab, ids.len()).detokenize()
}
