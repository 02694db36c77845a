//! The JSON run configuration shared by all subcommands.
//!
//! Every section and key is optional; missing values take the defaults
//! below. Unknown keys are rejected so typos do not pass silently.
//!
//! ```json
//! {
//!   "model":       { "d_model": 64, "d_ff": 128, "heads": 4, "encoder_layers": 4,
//!                    "u_decoder_layers": 1, "g_decoder_layers": 1, "max_len": 128,
//!                    "dropout": 0.1,
//!                    "moe": { "experts": 4, "top_k": 1, "jitter": 0.01,
//!                             "load_balance": 0.001, "z_loss": 0.0001 } },
//!   "pretrain":    { "steps": 2000, "batch_size": 8, "mask_rate": 0.15,
//!                    "solution_checking": true, "sc_warmup": 200, "optimizer": { ... } },
//!   "finetune":    { "steps": 1000, "batch_size": 8, "freeze_prompts": false,
//!                    "aux_losses": true, "optimizer": { ... } },
//!   "contrastive": { "steps": 500, "batch_size": 16, "temperature": 0.05, "dropout": 0.1 },
//!   "refine":      { "iterations": 3, "exemplars": 8, "max_prompt_chars": 16000,
//!                    "instructions": { "language": "English", "stages": ["..", "..", ".."] } },
//!   "http":        { "endpoint": "http://127.0.0.1:8080/v1/completions", "model": null,
//!                    "max_tokens": 512, "timeout_secs": 60,
//!                    "response_pointer": "/choices/0/text",
//!                    "retry": { "max_attempts": 3, "base_delay_ms": 500, "factor": 2.0 } },
//!   "eval":        { "max_new_tokens": 64, "beam": 1, "answer_markers": ["答案", "ANSWER"] }
//! }
//! ```
//!
//! `optimizer` is `{ "lr", "beta1", "beta2", "eps", "weight_decay",
//! "warmup_fraction", "linear_decay", "clip_norm" }`. The `--seed` flag
//! overrides every seed in the file.

use std::path::Path;

use anyhow::Context;
use mathmoe_core::metrics::DEFAULT_ANSWER_MARKERS;
use mathmoe_core::model::ModelConfig;
use mathmoe_core::refinement::{HttpClientConfig, RefineConfig};
use mathmoe_core::retrieval::ContrastiveConfig;
use mathmoe_core::training::{FinetuneConfig, PretrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub contrastive: ContrastiveConfig,
    pub refine: RefineConfig,
    pub http: HttpClientConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_new_tokens: usize,
    /// Beam width; 1 decodes greedily.
    pub beam: usize,
    pub answer_markers: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_new_tokens: 64,
            beam: 1,
            answer_markers: DEFAULT_ANSWER_MARKERS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>, seed: u64) -> anyhow::Result<Self> {
        let mut config: RunConfig = match path {
            Some(p) => {
                let raw = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&raw).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        config.pretrain.seed = seed;
        config.finetune.seed = seed;
        config.contrastive.seed = seed;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_sections_keep_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"model": {"d_model": 16, "moe": {"experts": 8}}}"#).unwrap();
        assert_eq!(c.model.d_model, 16);
        assert_eq!(c.model.moe.experts, 8);
        assert_eq!(c.model.moe.top_k, 1);
        assert_eq!(c.pretrain.batch_size, 8);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"modle": {}}"#).is_err());
    }
}
