//! Mixture-of-experts feed-forward layer.
//!
//! A linear router scores the `K` experts for each token, optionally after
//! adding a task prompt to the token representation and scaling the logits by
//! multiplicative jitter. Only the top-`k` experts run on a token, and their
//! outputs are combined weighted by the (unrenormalised) routing
//! probabilities.

use mathmoe_tensor::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{jitter_factors, normal, FeedForward, Graph, ParamGroup, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoeConfig {
    /// Number of experts `K`.
    pub experts: usize,
    /// Experts activated per token `k`.
    pub top_k: usize,
    /// Jitter noise degree `η`; logits are scaled by `Uniform[1-η, 1+η]`.
    pub jitter: f64,
    /// Load-balance coefficient `α`.
    pub load_balance: f64,
    /// Router z-loss coefficient `β`.
    pub z_loss: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            experts: 4,
            top_k: 1,
            jitter: 0.01,
            load_balance: 1e-3,
            z_loss: 1e-4,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 || self.top_k == 0 || self.top_k > self.experts {
            return Err(CoreError::Config(format!(
                "need 1 <= k ({}) <= K ({})",
                self.top_k, self.experts
            )));
        }
        if !(self.jitter >= 0.0 && self.jitter < 1.0) {
            return Err(CoreError::Config(format!("jitter {} must lie in [0, 1)", self.jitter)));
        }
        Ok(())
    }
}

/// Router of one token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    /// Router logits before jitter.
    pub logits: Vec<f64>,
    /// Logits fed to the softmax (equal to `logits` without jitter).
    pub perturbed: Vec<f64>,
    pub probs: Vec<f64>,
    /// The `k` most probable experts, most probable first; ties go to the
    /// lower index.
    pub selected: Vec<usize>,
    /// `probs` at `selected`.
    pub gates: Vec<f64>,
}

/// Per-expert load over a batch of tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadStats {
    /// Fraction of tokens dispatched to each expert; sums to `k`.
    pub dispatch_fraction: Vec<f64>,
    /// Mean routing probability per expert; sums to 1.
    pub mean_prob: Vec<f64>,
    pub tokens: usize,
}

impl LoadStats {
    pub fn from_decisions(decisions: &[RoutingDecision], experts: usize) -> Self {
        let n = decisions.len().max(1) as f64;
        let mut counts = vec![0.0; experts];
        let mut probs = vec![0.0; experts];
        for d in decisions {
            for &s in &d.selected {
                counts[s] += 1.0;
            }
            for (p, q) in probs.iter_mut().zip(&d.probs) {
                *p += q;
            }
        }
        LoadStats {
            dispatch_fraction: counts.into_iter().map(|c| c / n).collect(),
            mean_prob: probs.into_iter().map(|p| p / n).collect(),
            tokens: decisions.len(),
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Indices of the `k` largest values, largest first, lowest index on ties.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn decide(logits: Vec<f64>, perturbed: Vec<f64>, top_k_count: usize) -> RoutingDecision {
    let probs = softmax(&perturbed);
    let selected = top_k(&probs, top_k_count);
    let gates = selected.iter().map(|&i| probs[i]).collect();
    RoutingDecision {
        logits,
        perturbed,
        probs,
        selected,
        gates,
    }
}

/// Routes one token representation `h` with router matrix `router` (`K × d`).
///
/// `jitter` is `(η, seed)`; with `η = 0` no noise is drawn at all.
pub fn route(
    h: &[f64],
    router: &Tensor,
    top_k_count: usize,
    prompt: Option<&[f64]>,
    jitter: Option<(f64, u64)>,
) -> Result<RoutingDecision> {
    let (k, d) = (router.rows(), router.cols());
    if h.len() != d || prompt.is_some_and(|p| p.len() != d) {
        return Err(CoreError::LengthMismatch(format!(
            "router width {d}, token width {}",
            h.len()
        )));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite("token representation".into()));
    }
    let input: Vec<f64> = match prompt {
        Some(p) => h.iter().zip(p).map(|(a, b)| a + b).collect(),
        None => h.to_vec(),
    };
    let logits: Vec<f64> = (0..k)
        .map(|j| {
            let mut acc = 0.0;
            for (x, w) in input.iter().zip(router.row_slice(j)) {
                acc += x * w;
            }
            acc
        })
        .collect();
    let perturbed = match jitter {
        Some((eta, seed)) if eta > 0.0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = jitter_factors(&mut rng, 1, k, eta);
            logits.iter().zip(f.data()).map(|(l, e)| l * e).collect()
        }
        _ => logits.clone(),
    };
    Ok(decide(logits, perturbed, top_k_count.min(k)))
}

/// `α · K · Σ_i f_i · P_i` on plain numbers.
pub fn load_balance_loss(stats: &LoadStats, alpha: f64) -> f64 {
    let k = stats.dispatch_fraction.len() as f64;
    let dot: f64 = stats
        .dispatch_fraction
        .iter()
        .zip(&stats.mean_prob)
        .map(|(f, p)| f * p)
        .sum();
    alpha * (k * dot)
}

/// `β · mean_j (logsumexp(logits_j))²` on plain numbers.
pub fn z_loss(logits: &Tensor, beta: f64) -> f64 {
    let cols = logits.cols();
    let rows = logits.rows();
    let total: f64 = logits
        .data()
        .chunks(cols)
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse * lse
        })
        .sum();
    beta * total / rows as f64
}

/// Router matrix and expert blocks of one encoder layer.
#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub router: ParamId,
    pub experts: Vec<FeedForward>,
    pub config: MoeConfig,
}

/// Standard deviation of the per-expert perturbation added to the copied
/// feed-forward weights.
pub const EXPERT_PERTURBATION: f64 = 1e-3;

impl MoeLayer {
    /// Builds a layer whose experts all start as copies of one feed-forward
    /// block plus small independent Gaussian noise.
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, config: MoeConfig, rng: &mut ChaCha8Rng) -> Self {
        let group = ParamGroup::Encoder;
        // Same layout and scale as FeedForward::new, but not registered.
        let base_values = [
            normal(&[d, d_ff], 1.0 / (d as f64).sqrt(), rng),
            Tensor::zeros(&[d_ff]),
            normal(&[d_ff, d], 1.0 / (d_ff as f64).sqrt(), rng),
            Tensor::zeros(&[d]),
        ];
        let mut experts = Vec::with_capacity(config.experts);
        for e in 0..config.experts {
            let ffn = FeedForward::new(store, &format!("{name}.expert{e}"), group, d, d_ff, rng);
            for (id, base_value) in ffn.param_ids().iter().zip(&base_values) {
                let noise = normal(base_value.shape(), EXPERT_PERTURBATION, rng);
                let data = base_value.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
                store.set(*id, Tensor::new(base_value.shape().to_vec(), data).expect("same shape"));
            }
            experts.push(ffn);
        }
        let router = store.add(format!("{name}.router"), group, normal(&[config.experts, d], 0.1, rng));
        MoeLayer { router, experts, config }
    }

    /// Runs the layer on `h` (`n × d`). `prompt` (`1 × d`) is added to the
    /// router input only.
    pub fn forward(&self, g: &mut Graph, h: Var, prompt: Option<Var>) -> Result<MoeOutput> {
        let n = g.value(h).rows();
        let k = self.config.experts;
        let router_in = match prompt {
            Some(p) => g.tape.add_bias(h, p)?,
            None => h,
        };
        let w = g.param(self.router);
        let raw = g.tape.matmul_nt(router_in, w)?;
        let logits = match g.jitter(n, k, self.config.jitter) {
            Some(f) => g.tape.mul_const(raw, &f)?,
            None => raw,
        };
        let probs = g.tape.softmax(logits, 1)?;
        let decisions: Vec<RoutingDecision> = (0..n)
            .map(|t| {
                let raw_row = g.value(raw).row_slice(t).to_vec();
                let pert_row = g.value(logits).row_slice(t).to_vec();
                let prob_row = g.value(probs).row_slice(t).to_vec();
                let selected = top_k(&prob_row, self.config.top_k);
                let gates = selected.iter().map(|&i| prob_row[i]).collect();
                RoutingDecision {
                    logits: raw_row,
                    perturbed: pert_row,
                    probs: prob_row,
                    selected,
                    gates,
                }
            })
            .collect();
        if decisions.iter().any(|d| d.probs.iter().any(|p| !p.is_finite())) {
            return Err(CoreError::NonFinite("routing probabilities".into()));
        }

        let macs_before = g.tape.macs();
        let mut out: Option<Var> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let tokens: Vec<usize> = (0..n).filter(|&t| decisions[t].selected.contains(&e)).collect();
            if tokens.is_empty() {
                continue;
            }
            let all = tokens.len() == n;
            let x = if all { h } else { g.tape.gather_rows(h, &tokens)? };
            let y = expert.forward(g, x)?;
            let coords: Vec<(usize, usize)> = tokens.iter().map(|&t| (t, e)).collect();
            let gate = g.tape.gather(probs, &coords)?;
            let y = g.tape.scale_rows(y, gate)?;
            let y = if all { y } else { g.tape.scatter_rows(y, &tokens, n)? };
            out = Some(match out {
                Some(acc) => g.tape.add(acc, y)?,
                None => y,
            });
        }
        let expert_macs = g.tape.macs() - macs_before;
        let out = out.expect("every token selects at least one expert");

        let stats = LoadStats::from_decisions(&decisions, k);
        let mean_prob = g.tape.mean_rows(probs)?;
        let f = Tensor::row(&stats.dispatch_fraction);
        let weighted = g.tape.mul_const(mean_prob, &f)?;
        let dot = g.tape.sum(weighted)?;
        let load_balance = g.tape.scale(dot, self.config.load_balance * k as f64)?;
        let lse = g.tape.logsumexp_rows(logits)?;
        let sq = g.tape.square(lse)?;
        let msq = g.tape.mean(sq)?;
        let z = g.tape.scale(msq, self.config.z_loss)?;

        Ok(MoeOutput {
            out,
            logits,
            probs,
            decisions,
            stats,
            load_balance,
            z_loss: z,
            expert_macs,
        })
    }
}

pub struct MoeOutput {
    pub out: Var,
    /// Logits fed to the softmax (after jitter), `n × K`.
    pub logits: Var,
    pub probs: Var,
    pub decisions: Vec<RoutingDecision>,
    pub stats: LoadStats,
    pub load_balance: Var,
    pub z_loss: Var,
    /// Multiply-adds spent inside the experts.
    pub expert_macs: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_two_experts() {
        let w = Tensor::identity(2);
        let d = route(&[2.0, 0.0], &w, 1, None, None).unwrap();
        assert!((d.probs[0] - 0.880_797_08).abs() < 1e-6);
        assert!((d.probs[1] - 0.119_202_92).abs() < 1e-6);
        assert_eq!(d.selected, vec![0]);
        assert_eq!(d.gates, vec![d.probs[0]]);
    }

    #[test]
    fn single_expert_always_selected() {
        let w = Tensor::from_rows(&[&[0.3, -2.0, 1.0]]);
        let d = route(&[5.0, 1.0, -3.0], &w, 1, None, Some((0.5, 9))).unwrap();
        assert_eq!(d.probs, vec![1.0]);
        assert_eq!(d.selected, vec![0]);
    }

    #[test]
    fn zero_eta_is_bit_identical() {
        let w = Tensor::from_rows(&[&[0.3, -2.0], &[1.0, 0.7], &[-0.2, 0.1]]);
        let a = route(&[0.4, 1.1], &w, 2, None, None).unwrap();
        let b = route(&[0.4, 1.1], &w, 2, None, Some((0.0, 77))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(top_k(&[0.25, 0.5, 0.25, 0.5], 3), vec![1, 3, 0]);
    }

    #[test]
    fn load_balance_extremes() {
        let uniform = LoadStats {
            dispatch_fraction: vec![0.25; 4],
            mean_prob: vec![0.25; 4],
            tokens: 8,
        };
        assert_eq!(load_balance_loss(&uniform, 1e-3), 1e-3);
        let skew = LoadStats {
            dispatch_fraction: vec![0.75, 0.25],
            mean_prob: vec![0.6, 0.4],
            tokens: 4,
        };
        assert!((load_balance_loss(&skew, 1.0) - 1.1).abs() < 1e-15);
    }

    #[test]
    fn z_loss_closed_forms() {
        let z = z_loss(&Tensor::row(&[0.0, 0.0]), 1e-4);
        assert!((z - 1e-4 * 2f64.ln().powi(2)).abs() < 1e-16);
        assert!((z_loss(&Tensor::row(&[3.0]), 1.0) - 9.0).abs() < 1e-12);
        assert!(z_loss(&Tensor::row(&[5.0, 5.0]), 1.0) > z_loss(&Tensor::row(&[0.0, 0.0]), 1.0));
    }
}
