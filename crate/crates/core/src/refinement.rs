//! Three-stage iterative refinement of a drafted solution by an external
//! language model.
//!
//! Stage 1 retrieves exemplars by the problem statement, stage 2 by statement
//! and draft, stage 3 by the draft alone. Each stage runs `T` steps; every
//! step re-retrieves exemplars, builds the prompt `[q; draft; exemplars;
//! instruction]`, and feeds the model's answer forward as the next draft.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::retrieval::{Composition, Embedder, EmbeddingIndex, Hit, Query};

pub const STAGES: u8 = 3;
pub const PART_SEPARATOR: &str = "\n\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Language {
    English,
    Chinese,
}

/// Stage instructions plus the labels used to render exemplars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionSet {
    pub language: Language,
    pub stages: [String; 3],
}

impl InstructionSet {
    pub fn english() -> Self {
        InstructionSet {
            language: Language::English,
            stages: [
                "According to similar problems above, choose the correct idea to solve this problem and fix mistakes in the reference solution.".into(),
                "According to similar problems above, correct the reasoning errors and logical errors in the reference solution, determine the reasoning logic of this question and get the correct solution.".into(),
                "According to similar problems above, correct the calculation errors and transcription errors in the reference solution, determine the final answer and get the correct solution.".into(),
            ],
        }
    }

    pub fn chinese() -> Self {
        InstructionSet {
            language: Language::Chinese,
            stages: [
                "根据上文中相似的题目，选取正确的解题思路，修改本题参考解答中的错误。".into(),
                "根据上文中相似的题目，修改本题的参考解答中的推理错误和逻辑错误，确定本题的答题逻辑，得到正确解答。".into(),
                "根据上文中相似的题目，修改本题的参考解答中的计算错误和抄写错误，确定本题的正确答案，得到正确解答。".into(),
            ],
        }
    }

    pub fn for_stage(&self, stage: u8) -> Result<&str> {
        match stage {
            1..=STAGES => Ok(&self.stages[stage as usize - 1]),
            _ => Err(CoreError::InvalidStage(stage)),
        }
    }

    fn labels(&self) -> (&'static str, &'static str) {
        match self.language {
            Language::English => ("Question: ", "Analysis: "),
            Language::Chinese => ("问题：", "解析："),
        }
    }
}

impl Default for InstructionSet {
    fn default() -> Self {
        InstructionSet::english()
    }
}

/// Renders one exemplar block.
pub fn render_exemplar(instructions: &InstructionSet, problem: &str, solution: &str) -> String {
    let (q, a) = instructions.labels();
    format!("{q}{problem}\n{a}{solution}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuiltPrompt {
    pub text: String,
    /// Exemplars kept, in rank order.
    pub exemplar_ids: Vec<usize>,
    /// Lowest-ranked exemplars removed to respect the length limit.
    pub dropped: usize,
}

/// `q`, the draft, the exemplar blocks and the instruction joined by
/// [`PART_SEPARATOR`]. When the result exceeds `max_chars`, exemplars are
/// dropped from the lowest rank upward; the other parts are never cut.
pub fn build_prompt(
    question: &str,
    draft: &str,
    exemplars: &[Hit],
    instruction: &str,
    instructions: &InstructionSet,
    max_chars: usize,
) -> Result<BuiltPrompt> {
    if question.trim().is_empty() {
        return Err(CoreError::EmptyText);
    }
    let blocks: Vec<String> = exemplars
        .iter()
        .map(|h| render_exemplar(instructions, &h.problem, &h.solution))
        .collect();
    let assemble = |n: usize| {
        let mut parts: Vec<&str> = vec![question, draft];
        parts.extend(blocks[..n].iter().map(String::as_str));
        parts.push(instruction);
        parts.join(PART_SEPARATOR)
    };
    let mut keep = blocks.len();
    let mut text = assemble(keep);
    while text.chars().count() > max_chars && keep > 0 {
        keep -= 1;
        text = assemble(keep);
    }
    let len = text.chars().count();
    if len > max_chars {
        return Err(CoreError::Overlength { len, max: max_chars });
    }
    Ok(BuiltPrompt {
        text,
        exemplar_ids: exemplars[..keep].iter().map(|h| h.id).collect(),
        dropped: blocks.len() - keep,
    })
}

/// Retrieval composition used in each stage.
pub fn stage_composition(stage: u8) -> Result<Composition> {
    match stage {
        1 => Ok(Composition::Statement),
        2 => Ok(Composition::StatementDraft),
        3 => Ok(Composition::Draft),
        _ => Err(CoreError::InvalidStage(stage)),
    }
}

pub fn compose_stage_query(stage: u8, question: &str, draft: &str) -> Result<Query> {
    let composition = stage_composition(stage)?;
    let statement = (composition != Composition::Draft).then(|| question.to_string());
    let draft = (composition != Composition::Statement).then(|| draft.to_string());
    Ok(Query {
        composition,
        statement,
        draft,
    })
}

/// Where refinement gets its exemplars from.
pub trait ExemplarSource {
    fn exemplars(&self, query: &Query, b: usize) -> Result<Vec<Hit>>;
}

pub struct IndexSource<'a> {
    pub index: &'a EmbeddingIndex,
    pub embedder: Embedder<'a>,
}

impl ExemplarSource for IndexSource<'_> {
    fn exemplars(&self, query: &Query, b: usize) -> Result<Vec<Hit>> {
        if b == 0 {
            return Ok(Vec::new());
        }
        self.index.retrieve(&self.embedder, query, b)
    }
}

/// Everything a client sees for one call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub prompt: String,
    /// The draft embedded in the prompt.
    pub draft: String,
    pub stage: u8,
    pub step: usize,
    pub iter_step: usize,
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<String>;
}

/// Returns the draft unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityClient;

impl LlmClient for IdentityClient {
    fn complete(&self, request: &LlmRequest) -> Result<String> {
        Ok(request.draft.clone())
    }
}

/// Answers from a fixed prompt → response table.
#[derive(Clone, Debug, Default)]
pub struct TableClient {
    pub table: HashMap<String, String>,
}

impl LlmClient for TableClient {
    fn complete(&self, request: &LlmRequest) -> Result<String> {
        self.table
            .get(&request.prompt)
            .cloned()
            .ok_or_else(|| CoreError::Client("no scripted response for prompt".into()))
    }
}

/// Wraps a client and keeps every request it forwards.
pub struct RecordingClient<C> {
    pub inner: C,
    requests: Mutex<Vec<LlmRequest>>,
}

impl<C: LlmClient> RecordingClient<C> {
    pub fn new(inner: C) -> Self {
        RecordingClient {
            inner,
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<LlmRequest> {
        self.requests.lock().expect("request log poisoned").clone()
    }
}

impl<C: LlmClient> LlmClient for RecordingClient<C> {
    fn complete(&self, request: &LlmRequest) -> Result<String> {
        self.requests.lock().expect("request log poisoned").push(request.clone());
        self.inner.complete(request)
    }
}

/// Exponential backoff: attempt `i` (from 0) waits `base_delay_ms · factor^i`
/// before the next try.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub base_delay_ms: u64,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 500,
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: usize) -> Duration {
        Duration::from_millis((self.base_delay_ms as f64 * self.factor.powi(attempt as i32)) as u64)
    }
}

/// Sends one JSON body and returns the parsed JSON reply.
pub trait Transport: Send + Sync {
    fn post(&self, url: &str, body: &serde_json::Value, timeout: Duration) -> std::result::Result<serde_json::Value, String>;
}

pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post(&self, url: &str, body: &serde_json::Value, timeout: Duration) -> std::result::Result<serde_json::Value, String> {
        let response = ureq::post(url)
            .timeout(timeout)
            .send_json(body.clone())
            .map_err(|e| e.to_string())?;
        response.into_json().map_err(|e| e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpClientConfig {
    pub endpoint: String,
    /// Sent as `"model"` when present.
    pub model: Option<String>,
    pub max_tokens: usize,
    pub timeout_secs: u64,
    /// JSON pointer to the response text.
    pub response_pointer: String,
    pub retry: RetryPolicy,
}

impl Default for HttpClientConfig {
    fn default() -> Self {
        HttpClientConfig {
            endpoint: "http://127.0.0.1:8080/v1/completions".into(),
            model: None,
            max_tokens: 512,
            timeout_secs: 60,
            response_pointer: "/choices/0/text".into(),
            retry: RetryPolicy::default(),
        }
    }
}

/// Generic JSON completion endpoint, temperature pinned to 0.
pub struct HttpJsonClient<T: Transport = UreqTransport> {
    pub config: HttpClientConfig,
    transport: T,
    attempts: AtomicUsize,
    sleep: fn(Duration),
}

impl HttpJsonClient<UreqTransport> {
    pub fn new(config: HttpClientConfig) -> Self {
        HttpJsonClient::with_transport(config, UreqTransport)
    }
}

impl<T: Transport> HttpJsonClient<T> {
    pub fn with_transport(config: HttpClientConfig, transport: T) -> Self {
        HttpJsonClient {
            config,
            transport,
            attempts: AtomicUsize::new(0),
            sleep: std::thread::sleep,
        }
    }

    /// Replaces the backoff sleep, e.g. with a no-op in tests.
    pub fn with_sleep(mut self, sleep: fn(Duration)) -> Self {
        self.sleep = sleep;
        self
    }

    /// Total transport attempts so far.
    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::SeqCst)
    }

    pub fn payload(&self, prompt: &str) -> serde_json::Value {
        let mut body = serde_json::json!({
            "prompt": prompt,
            "max_tokens": self.config.max_tokens,
            "temperature": 0,
        });
        if let Some(m) = &self.config.model {
            body["model"] = serde_json::Value::String(m.clone());
        }
        body
    }
}

impl<T: Transport> LlmClient for HttpJsonClient<T> {
    fn complete(&self, request: &LlmRequest) -> Result<String> {
        let body = self.payload(&request.prompt);
        let timeout = Duration::from_secs(self.config.timeout_secs);
        let tries = self.config.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..tries {
            self.attempts.fetch_add(1, Ordering::SeqCst);
            match self.transport.post(&self.config.endpoint, &body, timeout) {
                Ok(reply) => {
                    return reply
                        .pointer(&self.config.response_pointer)
                        .and_then(|v| v.as_str())
                        .map(str::to_string)
                        .ok_or_else(|| {
                            CoreError::Client(format!("malformed response: nothing at {}", self.config.response_pointer))
                        });
                }
                Err(e) => {
                    log::warn!("LLM call attempt {} of {tries} failed: {e}", attempt + 1);
                    last = e;
                    if attempt + 1 < tries {
                        (self.sleep)(self.config.retry.delay(attempt));
                    }
                }
            }
        }
        Err(CoreError::Client(format!("transport failed after {tries} attempts: {last}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Steps per stage.
    pub iterations: usize,
    /// Exemplars retrieved per step.
    pub exemplars: usize,
    pub max_prompt_chars: usize,
    pub instructions: InstructionSet,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            iterations: 3,
            exemplars: 8,
            max_prompt_chars: 16_000,
            instructions: InstructionSet::english(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptStep {
    pub stage: u8,
    pub step: usize,
    pub iter_step: usize,
    pub query_composition: Composition,
    pub exemplar_ids: Vec<usize>,
    pub exemplars_dropped: usize,
    pub prompt: String,
    /// Draft going into this step.
    pub draft: String,
    pub response: Option<String>,
    pub status: StepStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineStatus {
    Complete,
    /// Every step of at least one stage failed.
    Partial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub problem_id: String,
    pub steps: Vec<TranscriptStep>,
    pub final_solution: String,
    pub status: RefineStatus,
}

/// Runs all three stages. A failed client call (or empty reply) keeps the
/// current draft and marks the step failed; the pipeline continues.
pub fn refine(
    problem_id: &str,
    question: &str,
    initial_draft: &str,
    source: &dyn ExemplarSource,
    client: &dyn LlmClient,
    config: &RefineConfig,
) -> Result<Transcript> {
    if question.trim().is_empty() || initial_draft.trim().is_empty() {
        return Err(CoreError::EmptyText);
    }
    if config.iterations == 0 {
        return Err(CoreError::Config("refinement needs at least one step per stage".into()));
    }
    let mut current = initial_draft.to_string();
    let mut steps = Vec::with_capacity(STAGES as usize * config.iterations);
    let mut partial = false;
    for stage in 1..=STAGES {
        let instruction = config.instructions.for_stage(stage)?;
        let mut stage_ok = false;
        for step in 1..=config.iterations {
            let iter_step = (stage as usize - 1) * config.iterations + step;
            let query = compose_stage_query(stage, question, &current)?;
            let hits = source.exemplars(&query, config.exemplars)?;
            let built = build_prompt(
                question,
                &current,
                &hits,
                instruction,
                &config.instructions,
                config.max_prompt_chars,
            )?;
            let request = LlmRequest {
                prompt: built.text.clone(),
                draft: current.clone(),
                stage,
                step,
                iter_step,
            };
            let outcome = client.complete(&request).and_then(|r| {
                if r.trim().is_empty() {
                    Err(CoreError::Client("empty response".into()))
                } else {
                    Ok(r)
                }
            });
            let (response, status, error) = match outcome {
                Ok(r) => {
                    stage_ok = true;
                    (Some(r), StepStatus::Ok, None)
                }
                Err(e) => {
                    log::warn!("refinement step {iter_step} of {problem_id} failed: {e}");
                    (None, StepStatus::Failed, Some(e.to_string()))
                }
            };
            steps.push(TranscriptStep {
                stage,
                step,
                iter_step,
                query_composition: query.composition,
                exemplar_ids: built.exemplar_ids,
                exemplars_dropped: built.dropped,
                prompt: built.text,
                draft: current.clone(),
                response: response.clone(),
                status,
                error,
            });
            if let Some(r) = response {
                current = r;
            }
        }
        partial |= !stage_ok;
    }
    Ok(Transcript {
        problem_id: problem_id.to_string(),
        steps,
        final_solution: current,
        status: if partial { RefineStatus::Partial } else { RefineStatus::Complete },
    })
}
