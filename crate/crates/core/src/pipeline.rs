//! The four stage agents and the end-to-end runner. Each stage pulls from
//! the store, works on one candidate at a time and acks the new record.

use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bench::{self, FunnelCounts};
use crate::extract::{self, ExtractionRules, ParsedVerdict, SplitCandidate};
use crate::lean::{self, LeanChecker, LeanError};
use crate::llm::{stage_request, CallContext, ChatBackend, LlmError};
use crate::model::{
    Candidate, Diagnostic, ModelError, SeedContext, Stage, StageConfig, StageEvent, StageKind, Transcript,
};
use crate::store::{Lease, Store, StoreError, DEFAULT_LEASE_S};
use crate::syntax;
use crate::util::JsonlLog;

pub const FLAG_VERDICT_UNPARSEABLE: &str = "verdict_unparseable";
pub const FLAG_JUDGE_CALL_FAILED: &str = "judge_call_failed";
pub const FLAG_DUPLICATE_DECLARATION: &str = "duplicate_declaration";
pub const FLAG_BUDGET_EXHAUSTED: &str = "repair_budget_exhausted";
pub const FLAG_TRIVIALITY_NOT_CHECKABLE: &str = "triviality_not_checkable";

pub const PLACEHOLDERS: [&str; 5] = ["LEAN_FILE", "LEAN_STATEMENT", "HISTORY", "LEMMA_WITH_SORRY", "MARKER"];

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("backend outage: {0}")]
    Outage(String),
    #[error("cancelled")]
    Cancelled,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("template: {0}")]
    Template(String),
}

/// One value per LLM-backed stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSet<T> {
    pub discovery: T,
    pub judge: T,
    pub formalize: T,
    pub prove: T,
}

impl<T> StageSet<T> {
    pub fn from_fn(mut f: impl FnMut(StageKind) -> T) -> Self {
        StageSet {
            discovery: f(StageKind::Discovery),
            judge: f(StageKind::Judge),
            formalize: f(StageKind::Formalize),
            prove: f(StageKind::Prove),
        }
    }

    pub fn get(&self, kind: StageKind) -> &T {
        match kind {
            StageKind::Discovery => &self.discovery,
            StageKind::Judge => &self.judge,
            StageKind::Formalize => &self.formalize,
            StageKind::Prove => &self.prove,
        }
    }

    pub fn get_mut(&mut self, kind: StageKind) -> &mut T {
        match kind {
            StageKind::Discovery => &mut self.discovery,
            StageKind::Judge => &mut self.judge,
            StageKind::Formalize => &mut self.formalize,
            StageKind::Prove => &mut self.prove,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub stage: StageKind,
    pub body: String,
}

impl PromptTemplate {
    pub fn builtin(stage: StageKind) -> Self {
        let body = match stage {
            StageKind::Discovery => include_str!("../prompts/discovery.txt"),
            StageKind::Judge => include_str!("../prompts/judge.txt"),
            StageKind::Formalize => include_str!("../prompts/formalize.txt"),
            StageKind::Prove => include_str!("../prompts/prove.txt"),
        };
        PromptTemplate { stage, body: body.to_string() }
    }

    pub fn file_name(stage: StageKind) -> String {
        format!("{}.txt", stage.as_str())
    }

    pub fn required(stage: StageKind) -> &'static [&'static str] {
        match stage {
            StageKind::Discovery => &["LEAN_FILE", "MARKER"],
            StageKind::Judge => &["LEAN_STATEMENT"],
            StageKind::Formalize => &["HISTORY", "MARKER"],
            StageKind::Prove => &["LEMMA_WITH_SORRY", "HISTORY", "MARKER"],
        }
    }

    /// Placeholder names used by the body, in order of appearance.
    pub fn placeholders(&self) -> Vec<&'static str> {
        scan_placeholders(&self.body).into_iter().map(|(_, name)| name).collect()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let used = self.placeholders();
        let required = Self::required(self.stage);
        if let Some(extra) = used.iter().find(|p| !required.contains(p)) {
            return Err(PipelineError::Template(format!("{} template uses {{{extra}}}", self.stage)));
        }
        if let Some(missing) = required.iter().find(|p| !used.contains(p)) {
            return Err(PipelineError::Template(format!("{} template lacks {{{missing}}}", self.stage)));
        }
        Ok(())
    }

    /// Single-pass substitution: inserted values are never re-scanned, so a
    /// value containing `{HISTORY}` stays literal.
    pub fn render(&self, vars: &[(&str, &str)]) -> Result<String, PipelineError> {
        let mut out = String::with_capacity(self.body.len() + vars.iter().map(|(_, v)| v.len()).sum::<usize>());
        let mut last = 0;
        for (at, name) in scan_placeholders(&self.body) {
            let value = vars
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| PipelineError::Template(format!("no value for {{{name}}}")))?;
            out.push_str(&self.body[last..at]);
            out.push_str(value);
            last = at + name.len() + 2;
        }
        out.push_str(&self.body[last..]);
        Ok(out)
    }
}

fn scan_placeholders(body: &str) -> Vec<(usize, &'static str)> {
    let mut found = Vec::new();
    for (at, _) in body.match_indices('{') {
        let rest = &body[at + 1..];
        if let Some(name) = PLACEHOLDERS.iter().find(|p| rest.starts_with(*p) && rest[p.len()..].starts_with('}')) {
            found.push((at, *name));
        }
    }
    found
}

/// Prompt bodies for all stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompts(pub StageSet<PromptTemplate>);

impl Default for Prompts {
    fn default() -> Self {
        Prompts(StageSet::from_fn(PromptTemplate::builtin))
    }
}

impl Prompts {
    /// Built-in templates, overridden by `<stage>.txt` files found in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Prompts, PipelineError> {
        let mut prompts = Prompts::default();
        for kind in StageKind::ALL {
            let path = dir.join(PromptTemplate::file_name(kind));
            if path.exists() {
                let body = std::fs::read_to_string(&path)
                    .map_err(|e| PipelineError::Template(format!("{}: {e}", path.display())))?;
                let t = PromptTemplate { stage: kind, body };
                t.validate()?;
                *prompts.0.get_mut(kind) = t;
            }
        }
        Ok(prompts)
    }

    pub fn get(&self, kind: StageKind) -> &PromptTemplate {
        self.0.get(kind)
    }
}

fn render_diagnostic(d: &Diagnostic) -> String {
    match (d.line, d.col) {
        (Some(l), Some(c)) => format!("{l}:{c}: {}: {}", d.severity, d.message),
        (Some(l), None) => format!("{l}: {}: {}", d.severity, d.message),
        _ => format!("{}: {}", d.severity, d.message),
    }
}

/// Failed attempts in order, each as its code followed by its diagnostics.
/// Appending an entry only appends text.
pub fn render_history(t: &Transcript) -> String {
    let mut out = String::new();
    for (n, e) in t.entries().iter().enumerate() {
        out.push_str(&format!("--- attempt {n} code ---\n"));
        out.push_str(e.code.trim_end_matches('\n'));
        out.push_str("\n--- errors ---\n");
        if e.diagnostics.is_empty() {
            out.push_str("(none)\n");
        }
        for d in &e.diagnostics {
            out.push_str(&render_diagnostic(d));
            out.push('\n');
        }
    }
    out
}

/// Preamble plus declaration as one snippet.
pub fn lean_snippet(preamble: &str, statement: &str) -> String {
    let p = preamble.trim_end();
    if p.is_empty() {
        statement.trim_end().to_string()
    } else {
        format!("{p}\n\n{}", statement.trim_end())
    }
}

/// Appends lines of `extra` not already in `base`.
pub fn merge_preamble(base: &str, extra: &str) -> String {
    let mut lines: Vec<&str> = base.lines().filter(|l| !l.trim().is_empty()).collect();
    for l in extra.lines().filter(|l| !l.trim().is_empty()) {
        if !lines.contains(&l) {
            lines.push(l);
        }
    }
    lines.join("\n")
}

/// Pulls the single declaration out of a repair or proof response. On
/// failure returns the text seen (possibly empty) and a message for the
/// history.
pub fn extract_single(content: &str, marker: &str) -> Result<SplitCandidate, (String, String)> {
    let stripped = extract::strip_reasoning_markup(content);
    let code = extract::extract_after_marker(&stripped.text, &ExtractionRules::new(marker))
        .map_err(|_| (String::new(), format!("extraction: marker missing (\"{marker}\")")))?;
    let split = extract::split_candidates(&code);
    match <[SplitCandidate; 1]>::try_from(split.pairs) {
        Ok([one]) => Ok(one),
        Err(pairs) => Err((code, format!("expected exactly one lemma or theorem declaration, found {}", pairs.len()))),
    }
}

/// An LLM-backed stage: settings, client and prompt.
#[derive(Clone)]
pub struct Agent {
    pub cfg: StageConfig,
    pub backend: Arc<dyn ChatBackend>,
    pub template: PromptTemplate,
}

/// Shared per-run services.
#[derive(Clone)]
pub struct RunContext {
    pub checker: LeanChecker,
    pub cancel: Arc<AtomicBool>,
    pub log: Option<Arc<JsonlLog>>,
}

impl RunContext {
    pub fn new(checker: LeanChecker) -> Self {
        RunContext { checker, cancel: Arc::new(AtomicBool::new(false)), log: None }
    }

    fn event(&self, stage: &str, key: &str, event: &str, detail: serde_json::Value) {
        if let Some(log) = &self.log {
            log.write(&json!({
                "ts": chrono::Utc::now().to_rfc3339(),
                "stage": stage,
                "key": key,
                "event": event,
                "detail": detail,
            }));
        }
    }

    fn check_cancel(&self) -> Result<(), PipelineError> {
        if self.cancel.load(Ordering::SeqCst) {
            Err(PipelineError::Cancelled)
        } else {
            Ok(())
        }
    }

    /// One completion. Outages abort the item; other failures come back as
    /// an inner error that costs the caller a trial.
    fn call(
        &self,
        agent: &Agent,
        prompt: &str,
        key: &str,
        alias: Option<&str>,
        attempt: u32,
    ) -> Result<Result<String, LlmError>, PipelineError> {
        self.check_cancel()?;
        let req = stage_request(&agent.cfg, prompt);
        let ctx =
            CallContext { stage: agent.cfg.stage, key: key.to_string(), alias: alias.map(str::to_string), attempt };
        match agent.backend.complete(&req, &ctx) {
            Ok(r) => Ok(Ok(r.content)),
            Err(e) if e.is_outage() => Err(PipelineError::Outage(e.to_string())),
            Err(e) => {
                self.event(
                    agent.cfg.stage.as_str(),
                    key,
                    "llm_failure",
                    json!({"attempt": attempt, "error": e.to_string()}),
                );
                Ok(Err(e))
            }
        }
    }

    fn verify(&self, result: lean::VerificationResult) -> Result<lean::VerificationResult, PipelineError> {
        if result.is_transport_failure() {
            let msg = result.diagnostics.first().map(|d| d.message.clone()).unwrap_or_default();
            return Err(PipelineError::Outage(msg));
        }
        Ok(result)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProveOutcome {
    Solved { repairs: u32, proof: String, transcript: Transcript },
    Failed { transcript: Transcript },
}

impl ProveOutcome {
    pub fn transcript(&self) -> &Transcript {
        match self {
            ProveOutcome::Solved { transcript, .. } | ProveOutcome::Failed { transcript } => transcript,
        }
    }
}

/// Generate-verify-repair over attempts `0..=trial_budget`. The accepted
/// declaration must keep the target's header and proposition.
pub fn prove_loop(
    agent: &Agent,
    run: &RunContext,
    preamble: &str,
    statement: &str,
    key: &str,
) -> Result<ProveOutcome, PipelineError> {
    let cfg = &agent.cfg;
    let alias = syntax::declaration_name(statement);
    let target = syntax::signature(statement);
    let lemma = lean::build_file(preamble, statement, &[]).unwrap_or_else(|_| lean_snippet(preamble, statement));
    let mut transcript = Transcript::default();
    for attempt in 0..=cfg.trial_budget {
        let history = render_history(&transcript);
        let prompt =
            agent.template.render(&[("LEMMA_WITH_SORRY", &lemma), ("HISTORY", &history), ("MARKER", &cfg.marker)])?;
        let content = match run.call(agent, &prompt, key, alias.as_deref(), attempt)? {
            Ok(c) => c,
            Err(e) => {
                transcript.push(String::new(), vec![Diagnostic::error(format!("no usable response: {e}"))]);
                continue;
            }
        };
        let pair = match extract_single(&content, &cfg.marker) {
            Ok(p) => p,
            Err((code, msg)) => {
                transcript.push(code, vec![Diagnostic::error(msg)]);
                continue;
            }
        };
        if syntax::signature(&pair.statement) != target {
            transcript.push(
                pair.statement.clone(),
                vec![Diagnostic::error(
                    "the declaration does not match the target statement; only the proof may change",
                )],
            );
            continue;
        }
        let file =
            match lean::build_file(&merge_preamble(preamble, &pair.preamble), &pair.statement, &cfg.injection_preamble)
            {
                Ok(f) => f,
                Err(e) => {
                    transcript.push(pair.statement.clone(), vec![Diagnostic::error(e.to_string())]);
                    continue;
                }
            };
        let (result, ok) = {
            let (r, ok) = run.checker.check_proof(&file);
            (run.verify(r)?, ok)
        };
        if ok {
            run.event(cfg.stage.as_str(), key, "proof_accepted", json!({"attempt": attempt}));
            return Ok(ProveOutcome::Solved { repairs: attempt, proof: file, transcript });
        }
        transcript.push(file, result.diagnostics);
    }
    Ok(ProveOutcome::Failed { transcript })
}

/// `aesop` triviality, honoring the prover's injection lines.
pub fn is_trivial(
    agent: &Agent,
    run: &RunContext,
    preamble: &str,
    statement: &str,
) -> Result<Result<bool, LeanError>, PipelineError> {
    match run.checker.triviality_result(preamble, statement, &agent.cfg.injection_preamble) {
        Ok((r, ok)) => {
            run.verify(r)?;
            Ok(Ok(ok))
        }
        Err(e) => Ok(Err(e)),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub processed: usize,
    pub stale_acks: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub funnel: Vec<FunnelCounts>,
    pub seeds_processed: usize,
    pub discovery_failures: usize,
    pub processed: Vec<(StageKind, usize)>,
    pub stale_acks: usize,
    pub outage: Option<String>,
    pub interrupted: bool,
}

impl RunSummary {
    pub fn completed(&self) -> bool {
        self.outage.is_none() && !self.interrupted
    }
}

pub struct Pipeline {
    pub store: Arc<Store>,
    pub agents: StageSet<Agent>,
    pub run: RunContext,
    pub lease_s: u64,
    outage: Mutex<Option<String>>,
    discovery_failures: AtomicUsize,
}

impl Pipeline {
    pub fn new(store: Arc<Store>, agents: StageSet<Agent>, run: RunContext) -> Self {
        Pipeline {
            store,
            agents,
            run,
            lease_s: DEFAULT_LEASE_S,
            outage: Mutex::new(None),
            discovery_failures: AtomicUsize::new(0),
        }
    }

    pub fn outage(&self) -> Option<String> {
        self.outage.lock().unwrap().clone()
    }

    fn abort(&self, reason: String) {
        self.run.event("run", "", "shutdown", json!({"reason": reason}));
        self.outage.lock().unwrap().get_or_insert(reason);
        self.run.cancel.store(true, Ordering::SeqCst);
    }

    /// Brainstorms candidates for one seed without touching the store.
    pub fn discover(&self, seed: &SeedContext) -> Result<Vec<Candidate>, PipelineError> {
        seed.validate()?;
        let agent = &self.agents.discovery;
        let prompt = agent.template.render(&[("LEAN_FILE", &seed.content), ("MARKER", &agent.cfg.marker)])?;
        let fail = |why: String| {
            self.discovery_failures.fetch_add(1, Ordering::SeqCst);
            self.run.event("discovery", &seed.seed_id, "discovery_failure", json!({"reason": why}));
            Ok(Vec::new())
        };
        let content = match self.run.call(agent, &prompt, &seed.seed_id, None, 0)? {
            Ok(c) => c,
            Err(e) => return fail(e.to_string()),
        };
        let stripped = extract::strip_reasoning_markup(&content);
        let snippet = match extract::extract_after_marker(&stripped.text, &ExtractionRules::new(&agent.cfg.marker)) {
            Ok(s) => s,
            Err(e) => return fail(e.to_string()),
        };
        let split = extract::split_candidates(&snippet);
        if split.pairs.is_empty() {
            return fail("no lemma or theorem declarations after the marker".into());
        }
        if split.variable_lines > 0 || split.discarded_lines > 0 {
            self.run.event(
                "discovery",
                &seed.seed_id,
                "split",
                json!({"variable_lines": split.variable_lines, "discarded_lines": split.discarded_lines}),
            );
        }
        let now = chrono::Utc::now();
        let mut out: Vec<Candidate> = Vec::new();
        for pair in split.pairs {
            let c = Candidate::new_raw(seed, &pair.preamble, &pair.statement, now)?;
            if !out.iter().any(|o| o.candidate_id == c.candidate_id) {
                out.push(c);
            }
        }
        Ok(out)
    }

    /// Discovery for one seed: stores the candidates, then marks the seed.
    pub fn run_discovery(&self, seed: &SeedContext) -> Result<Vec<Candidate>, PipelineError> {
        let found = self.discover(seed)?;
        let mut stored = 0;
        for c in &found {
            if self.store.enqueue(Stage::Raw, c)? {
                stored += 1;
            }
        }
        self.store.mark_seed_done(&seed.seed_id)?;
        self.run.event("discovery", &seed.seed_id, "seed_done", json!({"candidates": found.len(), "stored": stored}));
        Ok(found)
    }

    pub fn run_judge(&self, c: &Candidate) -> Result<Candidate, PipelineError> {
        let agent = &self.agents.judge;
        let snippet = lean_snippet(&c.preamble, &c.statement);
        let prompt = agent.template.render(&[("LEAN_STATEMENT", &snippet), ("MARKER", &agent.cfg.marker)])?;
        let alias = syntax::declaration_name(&c.statement);
        let parsed = match self.run.call(agent, &prompt, &c.candidate_id, alias.as_deref(), 0)? {
            Ok(content) => Some(extract::parse_verdict(&extract::strip_reasoning_markup(&content).text)),
            Err(_) => None,
        };
        let mut next = match parsed {
            Some(ParsedVerdict::Correct) => c.advance(StageEvent::JudgeAccept)?,
            Some(ParsedVerdict::Wrong) => c.advance(StageEvent::JudgeReject)?,
            Some(ParsedVerdict::Unparseable) => {
                let mut n = c.advance(StageEvent::JudgeReject)?;
                n.flag(FLAG_VERDICT_UNPARSEABLE);
                n
            }
            None => {
                let mut n = c.advance(StageEvent::JudgeReject)?;
                n.flag(FLAG_JUDGE_CALL_FAILED);
                n
            }
        };
        next.updated_at = chrono::Utc::now();
        Ok(next)
    }

    /// Check-then-repair with at most `trial_budget` LLM calls.
    pub fn run_formalize(&self, c: &Candidate) -> Result<Candidate, PipelineError> {
        let agent = &self.agents.formalize;
        let cfg = &agent.cfg;
        let alias = syntax::declaration_name(&c.statement);
        let mut preamble = c.preamble.clone();
        let mut statement = c.statement.clone();
        let mut transcript = Transcript::default();
        let mut trials = 0u32;
        let mut needs_check = true;
        let finish = |event: StageEvent,
                      preamble: String,
                      statement: String,
                      transcript: Transcript,
                      trials: u32,
                      flag: Option<&str>| {
            let mut n = c.advance(event)?;
            n.preamble = preamble;
            n.statement = statement;
            n.transcript = transcript;
            n.formalize_trials = trials;
            if let Some(f) = flag {
                n.flag(f);
            }
            n.updated_at = chrono::Utc::now();
            Ok::<_, PipelineError>(n)
        };
        loop {
            if needs_check {
                match lean::build_file(&preamble, &statement, &cfg.injection_preamble) {
                    Ok(code) => {
                        let (r, ok) = self.run.checker.check_statement(&code);
                        let r = self.run.verify(r)?;
                        if ok {
                            return finish(StageEvent::CompileOk, preamble, statement, transcript, trials, None);
                        }
                        let dup = r.has_duplicate_declaration();
                        transcript.push(code, r.diagnostics);
                        if dup {
                            return finish(
                                StageEvent::CompileFail,
                                preamble,
                                statement,
                                transcript,
                                trials,
                                Some(FLAG_DUPLICATE_DECLARATION),
                            );
                        }
                    }
                    Err(e) => transcript.push(statement.clone(), vec![Diagnostic::error(e.to_string())]),
                }
            }
            if trials >= cfg.trial_budget {
                return finish(
                    StageEvent::CompileFail,
                    preamble,
                    statement,
                    transcript,
                    trials,
                    Some(FLAG_BUDGET_EXHAUSTED),
                );
            }
            trials += 1;
            let history = render_history(&transcript);
            let prompt = agent.template.render(&[("HISTORY", &history), ("MARKER", &cfg.marker)])?;
            match self.run.call(agent, &prompt, &c.candidate_id, alias.as_deref(), trials)? {
                Err(e) => {
                    transcript.push(String::new(), vec![Diagnostic::error(format!("no usable response: {e}"))]);
                    needs_check = false;
                }
                Ok(content) => match extract_single(&content, &cfg.marker) {
                    Ok(pair) => {
                        preamble = merge_preamble(&preamble, &pair.preamble);
                        statement = pair.statement;
                        needs_check = true;
                    }
                    Err((code, msg)) => {
                        transcript.push(code, vec![Diagnostic::error(msg)]);
                        needs_check = false;
                    }
                },
            }
        }
    }

    pub fn run_prove(&self, c: &Candidate) -> Result<Candidate, PipelineError> {
        let agent = &self.agents.prove;
        let mut base = c.clone();
        match is_trivial(agent, &self.run, &c.preamble, &c.statement)? {
            Ok(true) => {
                let mut n = c.advance(StageEvent::TrivialHit)?;
                n.updated_at = chrono::Utc::now();
                return Ok(n);
            }
            Ok(false) => {}
            Err(e) => {
                self.run.event("prove", &c.candidate_id, "triviality_not_checkable", json!({"error": e.to_string()}));
                base.flag(FLAG_TRIVIALITY_NOT_CHECKABLE);
            }
        }
        let mut n = match prove_loop(agent, &self.run, &c.preamble, &c.statement, &c.candidate_id)? {
            ProveOutcome::Solved { repairs, proof, transcript } => {
                let mut n = base.advance(StageEvent::ProofOk)?;
                n.proof = Some(proof);
                n.prove_trials = repairs;
                n.proof_transcript = transcript;
                n
            }
            ProveOutcome::Failed { transcript } => {
                let mut n = base.advance(StageEvent::ProofFail)?;
                n.prove_trials = transcript.len() as u32;
                n.proof_transcript = transcript;
                n
            }
        };
        n.updated_at = chrono::Utc::now();
        Ok(n)
    }

    fn process(&self, kind: StageKind, c: &Candidate) -> Result<Candidate, PipelineError> {
        match kind {
            StageKind::Judge => self.run_judge(c),
            StageKind::Formalize => self.run_formalize(c),
            StageKind::Prove => self.run_prove(c),
            StageKind::Discovery => unreachable!("discovery is seed-driven"),
        }
    }

    /// Drains one stage queue with a worker pool of the configured size.
    pub fn run_stage(&self, kind: StageKind) -> Result<StageReport, PipelineError> {
        let stage = kind.input_stage().expect("queue-driven stage");
        let workers = self.agents.get(kind).cfg.concurrency.min(self.store.pending(stage)?).max(1);
        let processed = AtomicUsize::new(0);
        let stale = AtomicUsize::new(0);
        let fatal: Mutex<Option<PipelineError>> = Mutex::new(None);
        std::thread::scope(|s| {
            for w in 0..workers {
                let (processed, stale, fatal) = (&processed, &stale, &fatal);
                s.spawn(move || {
                    let worker = format!("{kind}-{w}");
                    let fail = |e: PipelineError| {
                        self.run.cancel.store(true, Ordering::SeqCst);
                        fatal.lock().unwrap().get_or_insert(e);
                    };
                    while !self.run.cancel.load(Ordering::SeqCst) {
                        let lease = match self.store.lease(stage, &worker, self.lease_s) {
                            Ok(Some(l)) => l,
                            Ok(None) => break,
                            Err(e) => return fail(e.into()),
                        };
                        match self.process(kind, &lease.candidate) {
                            Ok(next) => match self.store.ack(&lease, &next) {
                                Ok(()) => {
                                    processed.fetch_add(1, Ordering::SeqCst);
                                    self.run.event(
                                        kind.as_str(),
                                        lease.candidate_id(),
                                        "ack",
                                        json!({"stage": next.stage}),
                                    );
                                }
                                Err(StoreError::StaleLease { .. }) => {
                                    stale.fetch_add(1, Ordering::SeqCst);
                                    self.run.event(kind.as_str(), lease.candidate_id(), "stale_ack", json!({}));
                                }
                                Err(e) => return fail(e.into()),
                            },
                            Err(e) => {
                                self.give_back(&lease);
                                match e {
                                    PipelineError::Outage(msg) => {
                                        self.abort(msg);
                                        return;
                                    }
                                    PipelineError::Cancelled => return,
                                    other => return fail(other),
                                }
                            }
                        }
                    }
                });
            }
        });
        if let Some(e) = fatal.into_inner().unwrap() {
            return Err(e);
        }
        Ok(StageReport { processed: processed.into_inner(), stale_acks: stale.into_inner() })
    }

    fn give_back(&self, lease: &Lease) {
        if let Err(e) = self.store.release(lease) {
            self.run.event("run", lease.candidate_id(), "release_failed", json!({"error": e.to_string()}));
        }
    }

    /// Discovery over seeds not yet marked done.
    pub fn run_discovery_all(&self, seeds: &[SeedContext]) -> Result<usize, PipelineError> {
        let todo: Vec<&SeedContext> = seeds.iter().filter(|s| !self.store.seed_done(&s.seed_id)).collect();
        let next = AtomicUsize::new(0);
        let done = AtomicUsize::new(0);
        let fatal: Mutex<Option<PipelineError>> = Mutex::new(None);
        let workers = self.agents.discovery.cfg.concurrency.min(todo.len()).max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| {
                    while !self.run.cancel.load(Ordering::SeqCst) {
                        let Some(seed) = todo.get(next.fetch_add(1, Ordering::SeqCst)) else { break };
                        match self.run_discovery(seed) {
                            Ok(_) => {
                                done.fetch_add(1, Ordering::SeqCst);
                            }
                            Err(PipelineError::Outage(msg)) => return self.abort(msg),
                            Err(PipelineError::Cancelled) => return,
                            Err(PipelineError::Model(e)) => {
                                self.discovery_failures.fetch_add(1, Ordering::SeqCst);
                                self.run.event(
                                    "discovery",
                                    &seed.seed_id,
                                    "invalid_seed",
                                    json!({"error": e.to_string()}),
                                );
                            }
                            Err(e) => {
                                self.run.cancel.store(true, Ordering::SeqCst);
                                fatal.lock().unwrap().get_or_insert(e);
                                return;
                            }
                        }
                    }
                });
            }
        });
        if let Some(e) = fatal.into_inner().unwrap() {
            return Err(e);
        }
        Ok(done.into_inner())
    }

    /// All four stages in order. Outages and cancellation stop the run with
    /// queues intact; rerunning resumes.
    pub fn run_all(&self, seeds: &[SeedContext]) -> Result<RunSummary, PipelineError> {
        self.store.reclaim_orphans()?;
        let mut summary = RunSummary { seeds_processed: self.run_discovery_all(seeds)?, ..Default::default() };
        for kind in [StageKind::Judge, StageKind::Formalize, StageKind::Prove] {
            if self.run.cancel.load(Ordering::SeqCst) {
                break;
            }
            let r = self.run_stage(kind)?;
            summary.processed.push((kind, r.processed));
            summary.stale_acks += r.stale_acks;
        }
        self.finish_summary(summary)
    }

    pub fn finish_summary(&self, mut summary: RunSummary) -> Result<RunSummary, PipelineError> {
        summary.discovery_failures = self.discovery_failures.load(Ordering::SeqCst);
        summary.outage = self.outage();
        summary.interrupted = summary.outage.is_none() && self.run.cancel.load(Ordering::SeqCst);
        summary.funnel = bench::funnel_counts(self.store.layout())?;
        Ok(summary)
    }
}
