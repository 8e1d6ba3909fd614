//! Kernel verification: self-contained file construction, the verifier
//! wire adapters, acceptance rules and the `aesop` triviality check.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::model::{Diagnostic, Severity};
use crate::syntax;
use crate::util::{JsonlLog, Semaphore};

pub const DEFAULT_TIMEOUT_S: u64 = 6000;
pub const DEFAULT_IMPORT: &str = "import Mathlib";
pub const DUPLICATE_DECLARATION: &str = "has already been declared";
pub const PROOF_CONTAINS_SORRY: &str = "proof contains sorry";
pub const VERIFIER_TIMEOUT: &str = "verifier timeout";
pub const TRANSPORT_FAILURE: &str = "verifier transport failure";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LeanError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("not checkable: {0}")]
    NotCheckable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationRequest {
    pub code: String,
    pub timeout_s: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub diagnostics: Vec<Diagnostic>,
    pub elapsed_s: f64,
    pub server_ok: bool,
}

impl VerificationResult {
    pub fn ok(diagnostics: Vec<Diagnostic>) -> Self {
        VerificationResult { diagnostics, elapsed_s: 0.0, server_ok: true }
    }

    /// A failed round-trip, carried as a synthetic error so callers always
    /// get feedback.
    pub fn failure(message: impl Into<String>, elapsed_s: f64) -> Self {
        VerificationResult { diagnostics: vec![Diagnostic::error(message)], elapsed_s, server_ok: false }
    }

    pub fn has_errors(&self) -> bool {
        self.diagnostics.iter().any(Diagnostic::is_error)
    }

    /// The server could not be reached or answered with an HTTP error, as
    /// opposed to a timeout or a decoded verdict.
    pub fn is_transport_failure(&self) -> bool {
        !self.server_ok && self.diagnostics.iter().any(|d| d.message.starts_with(TRANSPORT_FAILURE))
    }

    pub fn has_duplicate_declaration(&self) -> bool {
        self.diagnostics.iter().any(|d| d.message.contains(DUPLICATE_DECLARATION))
    }
}

/// Assembles a self-contained file: imports (preamble first, then injected
/// ones not already present), injected non-import lines, preamble non-import
/// lines, a blank line, then the declaration. With no import at all the
/// default `import Mathlib` leads.
pub fn build_file(preamble: &str, declaration: &str, injection: &[String]) -> Result<String, LeanError> {
    if declaration.trim().is_empty() {
        return Err(LeanError::InvalidInput("declaration is empty".into()));
    }
    let headers = syntax::count_declarations(declaration);
    if headers != 1 {
        return Err(LeanError::InvalidInput(format!(
            "expected exactly one lemma or theorem declaration, found {headers}"
        )));
    }
    let preamble_lines = preamble.lines().map(str::trim_end).filter(|l| !l.trim().is_empty());
    let injected = injection.iter().map(|l| l.trim_end()).filter(|l| !l.trim().is_empty());

    let mut imports: Vec<&str> = Vec::new();
    let mut others: Vec<&str> = Vec::new();
    for line in preamble_lines
        .clone()
        .filter(|l| syntax::is_import_line(l))
        .chain(injected.clone().filter(|l| syntax::is_import_line(l)))
    {
        if !imports.contains(&line) {
            imports.push(line);
        }
    }
    for line in
        injected.filter(|l| !syntax::is_import_line(l)).chain(preamble_lines.filter(|l| !syntax::is_import_line(l)))
    {
        if !others.contains(&line) {
            others.push(line);
        }
    }
    if imports.is_empty() {
        imports.push(DEFAULT_IMPORT);
    }
    let mut file = imports.join("\n");
    if !others.is_empty() {
        file.push('\n');
        file.push_str(&others.join("\n"));
    }
    file.push_str("\n\n");
    file.push_str(declaration.trim_end());
    Ok(file)
}

/// True iff the round-trip succeeded, nothing is error-severity and no
/// message reports a duplicate declaration.
pub fn statement_accepted(r: &VerificationResult, _code: &str) -> bool {
    r.server_ok && !r.has_errors() && !r.has_duplicate_declaration()
}

/// True iff the round-trip succeeded, nothing is error-severity, no
/// diagnostic reports a remaining `sorry`, and the code has no `sorry` token.
pub fn proof_accepted(r: &VerificationResult, code: &str) -> bool {
    r.server_ok
        && !r.has_errors()
        && !r.diagnostics.iter().any(|d| d.message.contains("sorry"))
        && !syntax::contains_sorry(code)
}

pub trait Verifier: Send + Sync {
    fn check(&self, req: &VerificationRequest) -> VerificationResult;
}

/// Request/response shape spoken by a verifier server.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireSchema {
    /// `{"code","timeout"}` → `{"diagnostics":[{"severity","message","line","col"}]}`
    #[default]
    Simple,
    /// Kimina Lean server `/verify`: `{"codes":[{"custom_id","proof"}],"timeout"}`
    /// → `{"results":[{"error","response":{"messages":[{"severity","pos","data"}]}}]}`
    Kimina,
}

impl WireSchema {
    pub fn encode(self, req: &VerificationRequest) -> Value {
        match self {
            WireSchema::Simple => json!({ "code": req.code, "timeout": req.timeout_s }),
            WireSchema::Kimina => json!({
                "codes": [{ "custom_id": "0", "proof": req.code }],
                "timeout": req.timeout_s,
            }),
        }
    }

    /// Decodes a response body. Unknown severities are errors, not coerced.
    pub fn decode(self, body: &Value) -> Result<VerificationResult, String> {
        match self {
            WireSchema::Simple => decode_simple(body),
            WireSchema::Kimina => decode_kimina(body),
        }
    }
}

fn severity(v: Option<&Value>) -> Result<Severity, String> {
    let s = v.and_then(Value::as_str).ok_or("diagnostic without severity")?;
    s.parse::<Severity>().map_err(|e| e.to_string())
}

fn position(v: Option<&Value>) -> Option<u32> {
    v.and_then(Value::as_u64).and_then(|n| u32::try_from(n).ok())
}

fn decode_simple(body: &Value) -> Result<VerificationResult, String> {
    let list = body.get("diagnostics").and_then(Value::as_array).ok_or("missing diagnostics array")?;
    let diagnostics = list
        .iter()
        .map(|d| {
            Ok(Diagnostic {
                severity: severity(d.get("severity"))?,
                message: d.get("message").and_then(Value::as_str).ok_or("diagnostic without message")?.to_string(),
                line: position(d.get("line")),
                col: position(d.get("col")),
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    Ok(VerificationResult::ok(diagnostics))
}

fn decode_kimina(body: &Value) -> Result<VerificationResult, String> {
    let result = body.get("results").and_then(Value::as_array).and_then(|r| r.first()).ok_or("missing results[0]")?;
    if let Some(err) = result.get("error").and_then(Value::as_str) {
        let msg = if err.to_ascii_lowercase().contains("timed out") || err.to_ascii_lowercase().contains("timeout") {
            VERIFIER_TIMEOUT.to_string()
        } else {
            format!("verifier error: {err}")
        };
        return Ok(VerificationResult::failure(msg, 0.0));
    }
    let messages = match result.pointer("/response/messages") {
        Some(Value::Array(m)) => m.as_slice(),
        None | Some(Value::Null) => &[],
        Some(_) => return Err("response.messages is not an array".into()),
    };
    let diagnostics = messages
        .iter()
        .map(|m| {
            Ok(Diagnostic {
                severity: severity(m.get("severity"))?,
                message: m.get("data").and_then(Value::as_str).ok_or("message without data")?.to_string(),
                line: position(m.pointer("/pos/line")),
                col: position(m.pointer("/pos/column")),
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    Ok(VerificationResult::ok(diagnostics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeanServerConfig {
    pub url: String,
    #[serde(default = "default_timeout")]
    pub timeout_s: u64,
    #[serde(default)]
    pub schema: WireSchema,
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent: usize,
    #[serde(default = "default_toolchain")]
    pub toolchain: String,
}

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_S
}

fn default_max_concurrent() -> usize {
    100
}

fn default_toolchain() -> String {
    "v4.25.0-rc2".into()
}

/// Stateless HTTP verifier: every call posts one complete file.
pub struct HttpVerifier {
    agent: ureq::Agent,
    url: String,
    schema: WireSchema,
    limiter: Semaphore,
    retry_delays: Vec<Duration>,
    log: Option<Arc<JsonlLog>>,
}

impl HttpVerifier {
    pub fn new(cfg: &LeanServerConfig) -> Self {
        let config = ureq::Agent::config_builder().http_status_as_error(false).build();
        HttpVerifier {
            agent: ureq::Agent::new_with_config(config),
            url: cfg.url.clone(),
            schema: cfg.schema,
            limiter: Semaphore::new(cfg.max_concurrent),
            retry_delays: vec![Duration::from_secs(2), Duration::from_secs(4)],
            log: None,
        }
    }

    /// Waits before each retry of a transport failure; the default is 2s then 4s.
    pub fn with_retry_delays(mut self, delays: Vec<Duration>) -> Self {
        self.retry_delays = delays;
        self
    }

    pub fn with_log(mut self, log: Arc<JsonlLog>) -> Self {
        self.log = Some(log);
        self
    }
}

impl Verifier for HttpVerifier {
    /// Transport failures are retried before being reported.
    fn check(&self, req: &VerificationRequest) -> VerificationResult {
        let mut result = self.check_once(req);
        for wait in &self.retry_delays {
            if !result.is_transport_failure() {
                break;
            }
            std::thread::sleep(*wait);
            result = self.check_once(req);
        }
        result
    }
}

impl HttpVerifier {
    fn check_once(&self, req: &VerificationRequest) -> VerificationResult {
        let started = Instant::now();
        let body = self.schema.encode(req);
        let sent = {
            let _permit = self.limiter.acquire();
            self.agent
                .post(&self.url)
                .config()
                .timeout_global(Some(Duration::from_secs(req.timeout_s)))
                .build()
                .header("Content-Type", "application/json")
                .send(body.to_string())
        };
        let elapsed = || started.elapsed().as_secs_f64();
        let result = match sent {
            Err(ureq::Error::Timeout(_)) => VerificationResult::failure(VERIFIER_TIMEOUT, elapsed()),
            Err(e) => VerificationResult::failure(format!("{TRANSPORT_FAILURE}: {e}"), elapsed()),
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                match resp.body_mut().read_to_string() {
                    Err(ureq::Error::Timeout(_)) => VerificationResult::failure(VERIFIER_TIMEOUT, elapsed()),
                    Err(e) => VerificationResult::failure(format!("{TRANSPORT_FAILURE}: {e}"), elapsed()),
                    Ok(_) if !(200..300).contains(&status) => {
                        VerificationResult::failure(format!("{TRANSPORT_FAILURE}: HTTP {status}"), elapsed())
                    }
                    Ok(text) => match serde_json::from_str::<Value>(&text)
                        .map_err(|e| e.to_string())
                        .and_then(|v| self.schema.decode(&v))
                    {
                        Ok(mut r) => {
                            r.elapsed_s = elapsed();
                            r
                        }
                        Err(e) => VerificationResult::failure(format!("verifier protocol error: {e}"), elapsed()),
                    },
                }
            }
        };
        if let Some(log) = &self.log {
            log.write(&json!({
                "ts": chrono::Utc::now().to_rfc3339(),
                "url": self.url,
                "code_sha256": code_hash(&req.code),
                "server_ok": result.server_ok,
                "diagnostics": result.diagnostics,
                "elapsed_s": result.elapsed_s,
            }));
        }
        result
    }
}

pub fn code_hash(code: &str) -> String {
    hex::encode(Sha256::digest(code.as_bytes()))
}

/// One scripted verifier response. Matches when `code_sha256` (if set)
/// equals the hash of the code, every `contains` substring occurs and no
/// `excludes` substring does.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excludes: Vec<String>,
    #[serde(default)]
    pub diagnostics: Vec<Diagnostic>,
    #[serde(default = "yes")]
    pub server_ok: bool,
}

fn yes() -> bool {
    true
}

impl Default for VerifierRule {
    fn default() -> Self {
        VerifierRule {
            code_sha256: None,
            contains: Vec::new(),
            excludes: Vec::new(),
            diagnostics: Vec::new(),
            server_ok: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierScript {
    #[serde(default)]
    pub rules: Vec<VerifierRule>,
    #[serde(default)]
    pub default_diagnostics: Vec<Diagnostic>,
    /// When no rule matches, code holding a `sorry` token also gets Lean's
    /// "declaration uses 'sorry'" warning.
    #[serde(default = "yes")]
    pub sorry_warning: bool,
}

impl Default for VerifierScript {
    fn default() -> Self {
        VerifierScript { rules: Vec::new(), default_diagnostics: Vec::new(), sorry_warning: true }
    }
}

impl VerifierScript {
    pub fn load(path: &Path) -> Result<VerifierScript, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

/// Deterministic verifier answering from a [`VerifierScript`]; a pure
/// function of the submitted code.
pub struct ScriptedVerifier {
    script: VerifierScript,
    calls: AtomicUsize,
    seen: Mutex<Vec<String>>,
}

impl ScriptedVerifier {
    pub fn new(script: VerifierScript) -> Self {
        ScriptedVerifier { script, calls: AtomicUsize::new(0), seen: Mutex::new(Vec::new()) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn checked_codes(&self) -> Vec<String> {
        self.seen.lock().unwrap().clone()
    }

    fn respond(&self, code: &str) -> VerificationResult {
        let hash = code_hash(code);
        let rule = self.script.rules.iter().find(|r| {
            r.code_sha256.as_ref().is_none_or(|h| h.eq_ignore_ascii_case(&hash))
                && r.contains.iter().all(|s| code.contains(s.as_str()))
                && !r.excludes.iter().any(|s| code.contains(s.as_str()))
        });
        match rule {
            Some(r) if !r.server_ok => VerificationResult {
                diagnostics: if r.diagnostics.is_empty() {
                    vec![Diagnostic::error(TRANSPORT_FAILURE)]
                } else {
                    r.diagnostics.clone()
                },
                elapsed_s: 0.0,
                server_ok: false,
            },
            Some(r) => VerificationResult::ok(r.diagnostics.clone()),
            None => {
                let mut diagnostics = self.script.default_diagnostics.clone();
                if self.script.sorry_warning && syntax::contains_sorry(code) {
                    diagnostics.push(Diagnostic::warning("declaration uses 'sorry'"));
                }
                VerificationResult::ok(diagnostics)
            }
        }
    }
}

impl Verifier for ScriptedVerifier {
    fn check(&self, req: &VerificationRequest) -> VerificationResult {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.seen.lock().unwrap().push(req.code.clone());
        self.respond(&req.code)
    }
}

/// Replaces the trailing `:= by sorry` / `:= sorry` with `:= by aesop`.
pub fn aesop_rewrite(statement: &str) -> Result<String, LeanError> {
    let positions = syntax::sorry_positions(statement);
    if positions.len() != 1 {
        return Err(LeanError::NotCheckable(format!("expected one sorry placeholder, found {}", positions.len())));
    }
    let at = positions[0];
    let masked = syntax::mask_comments_and_strings(statement);
    if !masked[at + "sorry".len()..].trim().is_empty() {
        return Err(LeanError::NotCheckable("sorry is not the final proof term".into()));
    }
    let mut before = statement[..at].trim_end();
    if let Some(b) = before.strip_suffix("by") {
        if b.ends_with(char::is_whitespace) || b.ends_with(":=") {
            before = b.trim_end();
        }
    }
    let head = before
        .strip_suffix(":=")
        .ok_or_else(|| LeanError::NotCheckable("proof placeholder is not `:= sorry` or `:= by sorry`".into()))?;
    Ok(format!("{} := by aesop", head.trim_end()))
}

/// Verifier handle with the configured timeout and acceptance helpers.
#[derive(Clone)]
pub struct LeanChecker {
    verifier: Arc<dyn Verifier>,
    timeout_s: u64,
}

impl LeanChecker {
    pub fn new(verifier: Arc<dyn Verifier>, timeout_s: u64) -> Self {
        LeanChecker { verifier, timeout_s }
    }

    pub fn check(&self, code: &str) -> VerificationResult {
        self.verifier.check(&VerificationRequest { code: code.to_string(), timeout_s: self.timeout_s })
    }

    /// Verifies a `sorry`-bearing statement file.
    pub fn check_statement(&self, code: &str) -> (VerificationResult, bool) {
        let r = self.check(code);
        let ok = statement_accepted(&r, code);
        (r, ok)
    }

    /// Verifies a proof file; a `sorry` token is rejected without a server call.
    pub fn check_proof(&self, code: &str) -> (VerificationResult, bool) {
        if syntax::contains_sorry(code) {
            return (VerificationResult::ok(vec![Diagnostic::error(PROOF_CONTAINS_SORRY)]), false);
        }
        let r = self.check(code);
        let ok = proof_accepted(&r, code);
        (r, ok)
    }

    /// Whether `aesop` closes the statement outright.
    pub fn triviality_check(&self, preamble: &str, statement: &str, injection: &[String]) -> Result<bool, LeanError> {
        self.triviality_result(preamble, statement, injection).map(|(_, ok)| ok)
    }

    /// [`Self::triviality_check`] together with the verifier's answer.
    pub fn triviality_result(
        &self,
        preamble: &str,
        statement: &str,
        injection: &[String],
    ) -> Result<(VerificationResult, bool), LeanError> {
        let rewritten = aesop_rewrite(statement)?;
        let mut inject = injection.to_vec();
        inject.push("import Aesop".to_string());
        let file = build_file(preamble, &rewritten, &inject)?;
        Ok(self.check_proof(&file))
    }
}
