//! Domain types shared by every stage: seed contexts, candidate records and
//! their lifecycle, verifier diagnostics, and per-stage configuration.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("illegal transition: event {event} from stage {from}")]
    IllegalTransition { from: Stage, event: StageEvent },
}

/// The three strata seed files are grouped into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Foundational,
    Applied,
    Abstract,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Foundational, Domain::Applied, Domain::Abstract];

    pub fn label(self) -> &'static str {
        match self {
            Domain::Foundational => "Foundational",
            Domain::Applied => "Applied",
            Domain::Abstract => "Abstract",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Domain {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "foundational" => Ok(Domain::Foundational),
            "applied" => Ok(Domain::Applied),
            "abstract" => Ok(Domain::Abstract),
            other => Err(ModelError::InvalidInput(format!("unknown domain {other:?}"))),
        }
    }
}

/// A library source file whose full text conditions discovery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedContext {
    pub seed_id: String,
    pub path: String,
    pub domain: Domain,
    pub topic: String,
    pub content: String,
}

impl SeedContext {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.seed_id.trim().is_empty() {
            return Err(ModelError::InvalidInput("seed_id is empty".into()));
        }
        if self.content.is_empty() {
            return Err(ModelError::InvalidInput(format!("seed {} has empty content", self.seed_id)));
        }
        Ok(())
    }
}

/// Lifecycle stage of a candidate. Rejections are persisted states so the
/// funnel can count them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Raw,
    Judged,
    Compilable,
    Proved,
    RejectedJudge,
    RejectedFormalize,
    Unproved,
    Trivial,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Raw,
        Stage::Judged,
        Stage::Compilable,
        Stage::Proved,
        Stage::RejectedJudge,
        Stage::RejectedFormalize,
        Stage::Unproved,
        Stage::Trivial,
    ];

    pub fn is_terminal(self) -> bool {
        !matches!(self, Stage::Raw | Stage::Judged | Stage::Compilable)
    }

    /// Whether a candidate in this stage has passed the judge.
    pub fn passed_judge(self) -> bool {
        !matches!(self, Stage::Raw | Stage::RejectedJudge)
    }

    /// Whether a candidate in this stage has a type-checked statement.
    pub fn passed_formalize(self) -> bool {
        matches!(self, Stage::Compilable | Stage::Proved | Stage::Unproved | Stage::Trivial)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::Judged => "judged",
            Stage::Compilable => "compilable",
            Stage::Proved => "proved",
            Stage::RejectedJudge => "rejected_judge",
            Stage::RejectedFormalize => "rejected_formalize",
            Stage::Unproved => "unproved",
            Stage::Trivial => "trivial",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageEvent {
    JudgeAccept,
    JudgeReject,
    CompileOk,
    CompileFail,
    ProofOk,
    ProofFail,
    TrivialHit,
}

impl StageEvent {
    pub const ALL: [StageEvent; 7] = [
        StageEvent::JudgeAccept,
        StageEvent::JudgeReject,
        StageEvent::CompileOk,
        StageEvent::CompileFail,
        StageEvent::ProofOk,
        StageEvent::ProofFail,
        StageEvent::TrivialHit,
    ];
}

impl fmt::Display for StageEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// The lifecycle graph. `None` marks an illegal edge.
pub fn next_stage(from: Stage, event: StageEvent) -> Option<Stage> {
    use Stage::*;
    use StageEvent::*;
    match (from, event) {
        (Raw, JudgeAccept) => Some(Judged),
        (Raw, JudgeReject) => Some(RejectedJudge),
        (Judged, CompileOk) => Some(Compilable),
        (Judged, CompileFail) => Some(RejectedFormalize),
        (Compilable, TrivialHit) => Some(Trivial),
        (Compilable, ProofOk) => Some(Proved),
        (Compilable, ProofFail) => Some(Unproved),
        _ => None,
    }
}

/// Whether `to` can be reached from `from` by exactly one legal event.
pub fn is_legal_step(from: Stage, to: Stage) -> bool {
    StageEvent::ALL.iter().any(|&e| next_stage(from, e) == Some(to))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Wrong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
    Info,
}

impl FromStr for Severity {
    type Err = ModelError;

    /// Exact match on the verifier's severity strings; anything else is an error.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "error" => Ok(Severity::Error),
            "warning" => Ok(Severity::Warning),
            "info" => Ok(Severity::Info),
            other => Err(ModelError::InvalidInput(format!("unknown diagnostic severity {other:?}"))),
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Error => "error",
            Severity::Warning => "warning",
            Severity::Info => "info",
        })
    }
}

/// One verifier message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub col: Option<u32>,
}

impl Diagnostic {
    pub fn new(severity: Severity, message: impl Into<String>) -> Self {
        Diagnostic { severity, message: message.into(), line: None, col: None }
    }

    pub fn error(message: impl Into<String>) -> Self {
        Self::new(Severity::Error, message)
    }

    pub fn warning(message: impl Into<String>) -> Self {
        Self::new(Severity::Warning, message)
    }

    pub fn at(mut self, line: u32, col: u32) -> Self {
        self.line = Some(line);
        self.col = Some(col);
        self
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub code: String,
    pub diagnostics: Vec<Diagnostic>,
}

/// Append-only record of failed attempts, replayed into repair prompts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn push(&mut self, code: impl Into<String>, diagnostics: Vec<Diagnostic>) {
        self.entries.push(TranscriptEntry { code: code.into(), diagnostics });
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Lifecycle record of one lemma.
///
/// `statement` is the working declaration text (ending in `sorry`); `proof`
/// holds the verified self-contained file once the candidate is proved.
/// Fields not known to this version are kept in `extra` and written back
/// unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub candidate_id: String,
    pub seed_id: String,
    pub domain: Domain,
    #[serde(default)]
    pub topic: String,
    pub preamble: String,
    pub statement: String,
    #[serde(default)]
    pub proof: Option<String>,
    pub stage: Stage,
    #[serde(default)]
    pub formalize_trials: u32,
    #[serde(default)]
    pub prove_trials: u32,
    #[serde(default)]
    pub verdict: Option<Verdict>,
    #[serde(default)]
    pub transcript: Transcript,
    #[serde(default)]
    pub proof_transcript: Transcript,
    #[serde(default)]
    pub flags: Vec<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Candidate {
    pub fn new_raw(
        seed: &SeedContext,
        preamble: &str,
        statement: &str,
        now: DateTime<Utc>,
    ) -> Result<Candidate, ModelError> {
        let candidate_id = candidate_id(&seed.seed_id, preamble, statement)?;
        Ok(Candidate {
            candidate_id,
            seed_id: seed.seed_id.clone(),
            domain: seed.domain,
            topic: seed.topic.clone(),
            preamble: preamble.to_string(),
            statement: statement.to_string(),
            proof: None,
            stage: Stage::Raw,
            formalize_trials: 0,
            prove_trials: 0,
            verdict: None,
            transcript: Transcript::default(),
            proof_transcript: Transcript::default(),
            flags: Vec::new(),
            created_at: now,
            updated_at: now,
            extra: Default::default(),
        })
    }

    /// Applies one lifecycle event, producing a new record.
    pub fn advance(&self, event: StageEvent) -> Result<Candidate, ModelError> {
        let to = next_stage(self.stage, event).ok_or(ModelError::IllegalTransition { from: self.stage, event })?;
        let mut next = self.clone();
        next.stage = to;
        match event {
            StageEvent::JudgeAccept => next.verdict = Some(Verdict::Correct),
            StageEvent::JudgeReject => next.verdict = Some(Verdict::Wrong),
            _ => {}
        }
        Ok(next)
    }

    pub fn flag(&mut self, flag: &str) {
        if !self.flags.iter().any(|f| f == flag) {
            self.flags.push(flag.to_string());
        }
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }
}

fn canonicalize(text: &str) -> String {
    let unified = text.replace("\r\n", "\n").replace('\r', "\n");
    let mut out = String::with_capacity(unified.len());
    for (i, line) in unified.split('\n').enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(line.trim_end());
    }
    out
}

/// Content-derived identity: 128-bit prefix of SHA-256 over the canonicalized
/// (seed, preamble, statement) triple. Canonicalization normalizes line
/// endings and strips trailing whitespace per line, nothing more.
pub fn candidate_id(seed_id: &str, preamble: &str, statement: &str) -> Result<String, ModelError> {
    if statement.trim().is_empty() {
        return Err(ModelError::InvalidInput("statement is empty".into()));
    }
    let mut hasher = Sha256::new();
    for part in [seed_id, preamble, statement] {
        let canon = canonicalize(part);
        hasher.update((canon.len() as u64).to_le_bytes());
        hasher.update(canon.as_bytes());
    }
    let digest = hasher.finalize();
    Ok(hex::encode(&digest[..16]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Discovery,
    Judge,
    Formalize,
    Prove,
}

impl StageKind {
    pub const ALL: [StageKind; 4] = [StageKind::Discovery, StageKind::Judge, StageKind::Formalize, StageKind::Prove];

    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::Discovery => "discovery",
            StageKind::Judge => "judge",
            StageKind::Formalize => "formalize",
            StageKind::Prove => "prove",
        }
    }

    /// Queue a worker of this stage consumes from. Discovery reads seeds.
    pub fn input_stage(self) -> Option<Stage> {
        match self {
            StageKind::Discovery => None,
            StageKind::Judge => Some(Stage::Raw),
            StageKind::Formalize => Some(Stage::Judged),
            StageKind::Prove => Some(Stage::Compilable),
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReasoningEffort {
    None,
    Low,
    Medium,
    High,
}

impl ReasoningEffort {
    pub fn as_str(self) -> &'static str {
        match self {
            ReasoningEffort::None => "none",
            ReasoningEffort::Low => "low",
            ReasoningEffort::Medium => "medium",
            ReasoningEffort::High => "high",
        }
    }
}

pub const DISCOVERY_MARKER: &str = "brainstormed mathlib lemmas";
pub const FORMALIZE_MARKER: &str = "error-free code";
pub const PROVE_MARKER: &str = "### Complete Lean 4 Proof";
pub const DEFAULT_MAX_COMPLETION_TOKENS: u32 = 50_000;
pub const DEFAULT_T_REPAIR: u32 = 10;
pub const DEFAULT_K_REPAIRS: u32 = 2;

/// Sampling and environment settings for one model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub temperature: f64,
    pub top_p: f64,
    #[serde(default)]
    pub reasoning_effort: Option<ReasoningEffort>,
    #[serde(default)]
    pub injection_preamble: Vec<String>,
}

impl ModelProfile {
    /// Exploratory sampling; also the provider defaults used for frontier models.
    pub fn frontier() -> Self {
        ModelProfile { temperature: 1.0, top_p: 1.0, reasoning_effort: None, injection_preamble: vec![] }
    }

    pub fn frontier_reasoning_low() -> Self {
        ModelProfile { reasoning_effort: Some(ReasoningEffort::Low), ..Self::frontier() }
    }

    pub fn open_weight() -> Self {
        ModelProfile { temperature: 0.6, top_p: 0.95, reasoning_effort: None, injection_preamble: vec![] }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "frontier" => Some(Self::frontier()),
            "frontier-reasoning-low" => Some(Self::frontier_reasoning_low()),
            "open-weight" => Some(Self::open_weight()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: StageKind,
    pub model: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_completion_tokens: u32,
    #[serde(default)]
    pub reasoning_effort: Option<ReasoningEffort>,
    #[serde(default)]
    pub marker: String,
    pub trial_budget: u32,
    pub concurrency: usize,
    #[serde(default)]
    pub injection_preamble: Vec<String>,
}

impl StageConfig {
    pub fn default_for(stage: StageKind, model: &str) -> Self {
        let (marker, trial_budget, concurrency) = match stage {
            StageKind::Discovery => (DISCOVERY_MARKER, 1, 64),
            StageKind::Judge => ("", 1, 100),
            StageKind::Formalize => (FORMALIZE_MARKER, DEFAULT_T_REPAIR, 30),
            StageKind::Prove => (PROVE_MARKER, DEFAULT_K_REPAIRS, 30),
        };
        let profile = ModelProfile::frontier();
        StageConfig {
            stage,
            model: model.to_string(),
            temperature: profile.temperature,
            top_p: profile.top_p,
            max_completion_tokens: DEFAULT_MAX_COMPLETION_TOKENS,
            reasoning_effort: None,
            marker: marker.to_string(),
            trial_budget,
            concurrency,
            injection_preamble: Vec::new(),
        }
    }

    pub fn with_profile(mut self, profile: &ModelProfile) -> Self {
        self.temperature = profile.temperature;
        self.top_p = profile.top_p;
        self.reasoning_effort = profile.reasoning_effort;
        self.injection_preamble = profile.injection_preamble.clone();
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidInput(format!("{} stage: {msg}", self.stage)));
        if self.model.trim().is_empty() {
            return bad("model is empty".into());
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be >= 0", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p {} must be in (0, 1]", self.top_p));
        }
        if self.max_completion_tokens == 0 {
            return bad("max_completion_tokens must be positive".into());
        }
        if self.concurrency == 0 {
            return bad("concurrency must be positive".into());
        }
        match self.stage {
            StageKind::Judge if !self.marker.is_empty() => {
                bad("judge uses the last-line rule and takes no marker".into())
            }
            StageKind::Discovery | StageKind::Formalize | StageKind::Prove if self.marker.trim().is_empty() => {
                bad("marker is empty".into())
            }
            _ => Ok(()),
        }
    }
}
