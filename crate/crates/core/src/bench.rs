//! Benchmark export, funnel statistics, Success@t and union rates, the
//! audit sampler and per-model evaluation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::lean::{self, LeanChecker};
use crate::model::{Domain, Stage};
use crate::pipeline::{prove_loop, Agent, PipelineError, ProveOutcome, RunContext};
use crate::store::{ArtifactLayout, StoreError};
use crate::util::write_atomic;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const AUDIT_PRNG: &str = "chacha8";
pub const DENOMINATOR_NOTE: &str = "denominators exclude instances flagged trivial";

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("input error: {0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchInstance {
    pub id: String,
    pub seed_id: String,
    pub domain: Domain,
    #[serde(default)]
    pub topic: String,
    pub context: String,
    pub statement: String,
    #[serde(default)]
    pub trivial: bool,
}

impl BenchInstance {
    pub fn code(&self) -> String {
        format!("{}\n\n{}", self.context.trim_end(), self.statement.trim_end())
    }
}

pub fn load_bench(path: &Path) -> Result<Vec<BenchInstance>, BenchError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| BenchError::Input(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExportReport {
    pub written: usize,
    pub skipped: Vec<(String, String)>,
}

/// Writes every candidate that passed formalization (trivial ones flagged)
/// as one JSON line, after re-verifying it. The exported context is the
/// full header of the verified file, so context plus statement stands alone.
pub fn export_bench(
    layout: &ArtifactLayout,
    checker: &LeanChecker,
    injection: &[String],
    out: &Path,
) -> Result<ExportReport, BenchError> {
    let mut candidates = Vec::new();
    for stage in Stage::ALL.into_iter().filter(|s| s.passed_formalize()) {
        candidates.extend(layout.list(stage)?);
    }
    candidates.sort_by(|a, b| a.candidate_id.cmp(&b.candidate_id));
    let mut report = ExportReport::default();
    let mut lines = String::new();
    for c in candidates {
        let file = match lean::build_file(&c.preamble, &c.statement, injection) {
            Ok(f) => f,
            Err(e) => {
                report.skipped.push((c.candidate_id, e.to_string()));
                continue;
            }
        };
        let (r, ok) = checker.check_statement(&file);
        if !ok {
            let why = r
                .diagnostics
                .iter()
                .find(|d| d.is_error() || d.message.contains(lean::DUPLICATE_DECLARATION))
                .map_or_else(|| "re-verification failed".to_string(), |d| d.message.clone());
            report.skipped.push((c.candidate_id, why));
            continue;
        }
        let statement = c.statement.trim_end().to_string();
        let context = file.strip_suffix(&statement).unwrap_or(&file).trim_end().to_string();
        let inst = BenchInstance {
            id: c.candidate_id,
            seed_id: c.seed_id,
            domain: c.domain,
            topic: c.topic,
            context,
            statement,
            trivial: c.stage == Stage::Trivial,
        };
        lines.push_str(&serde_json::to_string(&inst).expect("instance serializes"));
        lines.push('\n');
        report.written += 1;
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    write_atomic(out, lines.as_bytes()).map_err(io_err(out))?;
    Ok(report)
}

/// Raw stage counts of one domain.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelCounts {
    pub domain: String,
    pub proposed: u64,
    pub correct: u64,
    pub compilable: u64,
    pub trivial: u64,
    #[serde(default)]
    pub proved: u64,
    #[serde(default)]
    pub unproved: u64,
    #[serde(default)]
    pub pending: u64,
}

impl FunnelCounts {
    /// The stage partition of a completed run: every count splits exactly
    /// into its successors.
    pub fn partition_holds(&self) -> bool {
        self.pending == 0
            && self.compilable == self.trivial + self.proved + self.unproved
            && self.correct <= self.proposed
            && self.compilable <= self.correct
    }
}

/// Counts per domain from the artifact directories, in domain order.
pub fn funnel_counts(layout: &ArtifactLayout) -> Result<Vec<FunnelCounts>, StoreError> {
    let mut by: BTreeMap<Domain, FunnelCounts> = Domain::ALL
        .iter()
        .map(|d| (*d, FunnelCounts { domain: d.label().to_string(), ..Default::default() }))
        .collect();
    for stage in Stage::ALL {
        for c in layout.list(stage)? {
            let f = by.get_mut(&c.domain).expect("all domains present");
            f.proposed += 1;
            if stage.passed_judge() {
                f.correct += 1;
            }
            if stage.passed_formalize() {
                f.compilable += 1;
            }
            match stage {
                Stage::Trivial => f.trivial += 1,
                Stage::Proved => f.proved += 1,
                Stage::Unproved => f.unproved += 1,
                Stage::Raw | Stage::Judged | Stage::Compilable => f.pending += 1,
                _ => {}
            }
        }
    }
    Ok(Domain::ALL.iter().map(|d| by.remove(d).unwrap()).collect())
}

/// `100 * num / den`, absent for a zero denominator.
pub fn percent(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Integer percent, halves rounded up, computed exactly.
pub fn percent_int(num: u64, den: u64) -> Option<u64> {
    (den > 0).then(|| (200 * num + den) / (2 * den))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelRow {
    pub domain: String,
    pub proposed: u64,
    pub correct: u64,
    pub correct_pct: Option<f64>,
    pub compilable: u64,
    pub compilable_pct: Option<f64>,
    pub trivial_pct: Option<f64>,
}

/// Pass rates relative to the preceding stage, one decimal place.
pub fn funnel_stats(counts: &[FunnelCounts]) -> Vec<FunnelRow> {
    counts
        .iter()
        .map(|c| FunnelRow {
            domain: c.domain.clone(),
            proposed: c.proposed,
            correct: c.correct,
            correct_pct: percent(c.correct, c.proposed).map(round1),
            compilable: c.compilable,
            compilable_pct: percent(c.compilable, c.correct).map(round1),
            trivial_pct: percent(c.trivial, c.compilable).map(round1),
        })
        .collect()
}

fn fmt_pct1(p: Option<f64>) -> String {
    p.map_or_else(|| "n/a".to_string(), |v| format!("{v:.1}%"))
}

pub fn render_funnel_table(rows: &[FunnelRow]) -> String {
    let mut out =
        format!("{:<14} {:>9} {:>16} {:>16} {:>8}\n", "Domain", "Proposed", "Correct", "Compilable", "Trivial");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<14} {:>9} {:>16} {:>16} {:>8}",
            r.domain,
            r.proposed,
            format!("{} ({})", r.correct, fmt_pct1(r.correct_pct)),
            format!("{} ({})", r.compilable, fmt_pct1(r.compilable_pct)),
            fmt_pct1(r.trivial_pct)
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    SolvedAt { t: u32 },
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub instance_id: String,
    pub model: String,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proof: Option<String>,
}

impl EvalRecord {
    pub fn solved_within(&self, t: u32) -> bool {
        matches!(self.outcome, Outcome::SolvedAt { t: s } if s <= t)
    }
}

pub fn load_records(path: &Path) -> Result<Vec<EvalRecord>, BenchError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| BenchError::Input(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

/// A domain, or all domains together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Domain(Domain),
    Total,
}

impl Scope {
    pub fn all() -> [Scope; 4] {
        [
            Scope::Domain(Domain::Foundational),
            Scope::Domain(Domain::Applied),
            Scope::Domain(Domain::Abstract),
            Scope::Total,
        ]
    }

    pub fn label(self) -> &'static str {
        match self {
            Scope::Domain(d) => d.label(),
            Scope::Total => "Total",
        }
    }

    fn covers(self, d: Domain) -> bool {
        self == Scope::Total || self == Scope::Domain(d)
    }
}

/// Solved count over the scope's non-trivial instance count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub solved: u64,
    pub total: u64,
}

impl Rate {
    pub fn pct(self) -> Option<f64> {
        percent(self.solved, self.total)
    }
}

/// Non-trivial instances by id, after checking every record refers to one
/// of them (records for trivial instances are ignored) and no
/// (model, instance) pair repeats.
fn index<'a>(
    records: &'a [EvalRecord],
    instances: &'a [BenchInstance],
) -> Result<(HashMap<&'a str, Domain>, Vec<&'a EvalRecord>), BenchError> {
    let mut domains = HashMap::new();
    let mut trivial = HashSet::new();
    for i in instances {
        if i.trivial {
            trivial.insert(i.id.as_str());
        } else if domains.insert(i.id.as_str(), i.domain).is_some() {
            return Err(BenchError::Input(format!("duplicate instance {}", i.id)));
        }
    }
    let mut seen = HashSet::new();
    let mut kept = Vec::new();
    for r in records {
        if !seen.insert((r.model.as_str(), r.instance_id.as_str())) {
            return Err(BenchError::Input(format!("duplicate record for ({}, {})", r.model, r.instance_id)));
        }
        if trivial.contains(r.instance_id.as_str()) {
            continue;
        }
        if !domains.contains_key(r.instance_id.as_str()) {
            return Err(BenchError::Input(format!("record for unknown instance {}", r.instance_id)));
        }
        kept.push(r);
    }
    Ok((domains, kept))
}

fn scope_totals(domains: &HashMap<&str, Domain>) -> BTreeMap<Scope, u64> {
    let mut totals: BTreeMap<Scope, u64> = Scope::all().into_iter().map(|s| (s, 0)).collect();
    for d in domains.values() {
        for s in Scope::all().into_iter().filter(|s| s.covers(*d)) {
            *totals.get_mut(&s).unwrap() += 1;
        }
    }
    totals
}

/// Success@t per (model, scope): instances solved within `t` repair turns
/// over the scope's non-trivial instances. Unevaluated instances count as
/// unsolved.
pub fn success_at(
    records: &[EvalRecord],
    instances: &[BenchInstance],
    t: u32,
) -> Result<BTreeMap<(String, Scope), Rate>, BenchError> {
    let (domains, kept) = index(records, instances)?;
    let totals = scope_totals(&domains);
    let mut out = BTreeMap::new();
    let models: std::collections::BTreeSet<&str> = kept.iter().map(|r| r.model.as_str()).collect();
    for m in &models {
        for (s, total) in &totals {
            out.insert((m.to_string(), *s), Rate { solved: 0, total: *total });
        }
    }
    for r in kept.iter().filter(|r| r.solved_within(t)) {
        let d = domains[r.instance_id.as_str()];
        for s in Scope::all().into_iter().filter(|s| s.covers(d)) {
            out.get_mut(&(r.model.clone(), s)).unwrap().solved += 1;
        }
    }
    Ok(out)
}

/// Instances solved within `t` by at least one model, per scope.
pub fn union_rate(
    records: &[EvalRecord],
    instances: &[BenchInstance],
    t: u32,
) -> Result<BTreeMap<Scope, Rate>, BenchError> {
    let (domains, kept) = index(records, instances)?;
    let solved: HashSet<&str> = kept.iter().filter(|r| r.solved_within(t)).map(|r| r.instance_id.as_str()).collect();
    let mut out: BTreeMap<Scope, Rate> =
        scope_totals(&domains).into_iter().map(|(s, total)| (s, Rate { solved: 0, total })).collect();
    for id in solved {
        let d = domains[id];
        for s in Scope::all().into_iter().filter(|s| s.covers(d)) {
            out.get_mut(&s).unwrap().solved += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub model: String,
    pub scope: Scope,
    pub total: u64,
    /// Solved counts for t = 0..=k_repairs.
    pub solved_at: Vec<u64>,
    pub success_at: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub k_repairs: u32,
    pub note: String,
    pub models: Vec<String>,
    pub cells: Vec<ReportCell>,
    pub union: Vec<ReportCell>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub funnel: Vec<FunnelRow>,
}

pub const UNION_LABEL: &str = "Union (All Models)";

pub fn build_report(
    records: &[EvalRecord],
    instances: &[BenchInstance],
    k_repairs: u32,
    funnel: Vec<FunnelRow>,
) -> Result<EvalReport, BenchError> {
    let per_t: Vec<_> = (0..=k_repairs).map(|t| success_at(records, instances, t)).collect::<Result<_, _>>()?;
    let union_t: Vec<_> = (0..=k_repairs).map(|t| union_rate(records, instances, t)).collect::<Result<_, _>>()?;
    let mut models: Vec<String> = records.iter().map(|r| r.model.clone()).collect();
    models.sort();
    models.dedup();
    let mut cells = Vec::new();
    for m in &models {
        for s in Scope::all() {
            let key = (m.clone(), s);
            let Some(first) = per_t[0].get(&key) else { continue };
            cells.push(ReportCell {
                model: m.clone(),
                scope: s,
                total: first.total,
                solved_at: per_t.iter().map(|tab| tab[&key].solved).collect(),
                success_at: per_t.iter().map(|tab| tab[&key].pct()).collect(),
            });
        }
    }
    let union = Scope::all()
        .into_iter()
        .map(|s| ReportCell {
            model: UNION_LABEL.to_string(),
            scope: s,
            total: union_t[0][&s].total,
            solved_at: union_t.iter().map(|tab| tab[&s].solved).collect(),
            success_at: union_t.iter().map(|tab| tab[&s].pct()).collect(),
        })
        .collect();
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        k_repairs,
        note: DENOMINATOR_NOTE.into(),
        models,
        cells,
        union,
        funnel,
    })
}

fn fmt_pct2(p: Option<f64>) -> String {
    p.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"))
}

/// Plain-text tables: Success@k per model and scope (plus the union row),
/// then one Success@0..k table per scope.
pub fn render_report_text(r: &EvalReport) -> String {
    let k = r.k_repairs as usize;
    let cell = |cells: &[ReportCell], m: &str, s: Scope| cells.iter().find(|c| c.model == m && c.scope == s).cloned();
    let mut out = format!("Success@{k} (%)  [{}]\n", r.note);
    let _ =
        writeln!(out, "{:<22} {:>13} {:>13} {:>13} {:>13}", "Model", "Foundational", "Applied", "Abstract", "Total");
    let mut row = |label: &str, cells: &[ReportCell]| {
        let vals: Vec<String> = Scope::all()
            .into_iter()
            .map(|s| cell(cells, label, s).map_or_else(|| "n/a".into(), |c| fmt_pct2(c.success_at[k])))
            .collect();
        let _ = writeln!(out, "{:<22} {:>13} {:>13} {:>13} {:>13}", label, vals[0], vals[1], vals[2], vals[3]);
    };
    for m in &r.models {
        row(m, &r.cells);
    }
    row(UNION_LABEL, &r.union);
    for s in Scope::all() {
        let _ = writeln!(out, "\n{} (n = {})", s.label(), r.union.iter().find(|c| c.scope == s).map_or(0, |c| c.total));
        let header: Vec<String> = (0..=k).map(|t| format!("Success@{t}")).collect();
        let _ = writeln!(out, "{:<22} {}", "Model", header.iter().map(|h| format!("{h:>10}")).collect::<String>());
        for c in r.cells.iter().chain(&r.union).filter(|c| c.scope == s) {
            let vals: String = c.success_at.iter().map(|p| format!("{:>10}", fmt_pct2(*p))).collect();
            let _ = writeln!(out, "{:<22} {vals}", c.model);
        }
    }
    if !r.funnel.is_empty() {
        out.push('\n');
        out.push_str(&render_funnel_table(&r.funnel));
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Grouped bar chart of Success@0..k per model for one scope.
pub fn render_svg(r: &EvalReport, scope: Scope) -> String {
    const COLORS: [&str; 4] = ["#9ecae1", "#4292c6", "#08519c", "#08306b"];
    let cells: Vec<&ReportCell> = r.cells.iter().filter(|c| c.scope == scope).collect();
    let k = r.k_repairs as usize + 1;
    let (bar, gap, left, top, plot_h) = (14.0, 22.0, 50.0, 40.0, 240.0);
    let group = bar * k as f64 + gap;
    let width = left + group * cells.len().max(1) as f64 + 20.0;
    let height = top + plot_h + 90.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ =
        writeln!(s, "<text x=\"{left}\" y=\"20\" font-size=\"14\">{} Success@t (%)</text>", xml_escape(scope.label()));
    for tick in (0..=100).step_by(25) {
        let y = top + plot_h * (1.0 - tick as f64 / 100.0);
        let _ =
            writeln!(s, "<line x1=\"{left}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>", width - 10.0);
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{tick}</text>", left - 6.0, y + 4.0);
    }
    for (i, c) in cells.iter().enumerate() {
        let x0 = left + gap / 2.0 + group * i as f64;
        for (t, p) in c.success_at.iter().enumerate() {
            let v = p.unwrap_or(0.0);
            let h = plot_h * v / 100.0;
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{bar}\" height=\"{h:.1}\" fill=\"{}\"><title>{} Success@{t}: {}</title></rect>",
                x0 + bar * t as f64,
                top + plot_h - h,
                COLORS[t % COLORS.len()],
                xml_escape(&c.model),
                fmt_pct2(*p)
            );
        }
        let cx = x0 + bar * k as f64 / 2.0;
        let _ = writeln!(
            s,
            "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"end\" transform=\"rotate(-35 {cx:.1} {:.1})\">{}</text>",
            top + plot_h + 14.0,
            top + plot_h + 14.0,
            xml_escape(&c.model)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditScope {
    /// Instances no evaluated model solved.
    Unproved,
    All,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub seed_id: String,
    pub eligible: usize,
    pub requested: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSample {
    pub prng: String,
    pub prng_seed: u64,
    pub per_seed: usize,
    pub scope: AuditScope,
    pub instances: Vec<BenchInstance>,
    pub shortfalls: Vec<Shortfall>,
}

/// Uniform draw of up to `per_seed` non-trivial instances per seed context.
/// Seeds are visited in sorted order from one ChaCha8 stream, so the sample
/// depends only on the inputs and `prng_seed`.
pub fn audit_sample(
    instances: &[BenchInstance],
    solved: &HashSet<String>,
    per_seed: usize,
    scope: AuditScope,
    prng_seed: u64,
) -> Result<AuditSample, BenchError> {
    if per_seed == 0 {
        return Err(BenchError::Input("per_seed must be at least 1".into()));
    }
    let mut by_seed: BTreeMap<&str, Vec<&BenchInstance>> = BTreeMap::new();
    for i in instances {
        if i.trivial || (scope == AuditScope::Unproved && solved.contains(&i.id)) {
            continue;
        }
        by_seed.entry(i.seed_id.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(prng_seed);
    let mut picked = Vec::new();
    let mut shortfalls = Vec::new();
    for (seed, mut pool) in by_seed {
        pool.sort_by(|a, b| a.id.cmp(&b.id));
        if pool.len() < per_seed {
            shortfalls.push(Shortfall { seed_id: seed.to_string(), eligible: pool.len(), requested: per_seed });
        }
        let n = pool.len().min(per_seed);
        let mut idx = rand::seq::index::sample(&mut rng, pool.len(), n).into_vec();
        idx.sort_unstable();
        picked.extend(idx.into_iter().map(|i| pool[i].clone()));
    }
    Ok(AuditSample { prng: AUDIT_PRNG.into(), prng_seed, per_seed, scope, instances: picked, shortfalls })
}

/// Human audit verdict for one sampled instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditLabel {
    pub instance_id: String,
    pub human_proved: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TallyRow {
    pub domain: String,
    pub sampled: u64,
    pub human_proved: u64,
    pub rate_pct: Option<u64>,
}

/// Per-domain and total audit tallies. Unlabeled samples count as sampled
/// but not proved.
pub fn audit_tally(sample: &[BenchInstance], labels: &[AuditLabel]) -> Vec<TallyRow> {
    let proved: HashSet<&str> = labels.iter().filter(|l| l.human_proved).map(|l| l.instance_id.as_str()).collect();
    let mut rows: Vec<TallyRow> = Scope::all()
        .into_iter()
        .map(|s| {
            let members: Vec<&BenchInstance> = sample.iter().filter(|i| s.covers(i.domain)).collect();
            let n = members.len() as u64;
            let p = members.iter().filter(|i| proved.contains(i.id.as_str())).count() as u64;
            TallyRow { domain: s.label().into(), sampled: n, human_proved: p, rate_pct: None }
        })
        .collect();
    for r in &mut rows {
        r.rate_pct = percent_int(r.human_proved, r.sampled);
    }
    rows
}

pub fn render_tally(rows: &[TallyRow]) -> String {
    let mut out = format!("{:<14} {:>8} {:>13} {:>6}\n", "Domain", "Sampled", "Human-proved", "Rate");
    for r in rows {
        let rate = r.rate_pct.map_or_else(|| "n/a".to_string(), |p| format!("{p}%"));
        let _ = writeln!(out, "{:<14} {:>8} {:>13} {:>6}", r.domain, r.sampled, r.human_proved, rate);
    }
    out
}

fn record_path(dir: &Path, model: &str, instance_id: &str) -> PathBuf {
    let safe: String =
        model.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect();
    let tag = hex::encode(&Sha256::digest(model.as_bytes())[..4]);
    dir.join(format!("{safe}-{tag}")).join(format!("{instance_id}.json"))
}

/// Runs the prover loop of `agent` on every non-trivial instance, keeping
/// one record file per instance under `records_dir` so an interrupted
/// evaluation resumes where it stopped. Records come back in instance order.
pub fn evaluate_model(
    instances: &[BenchInstance],
    model: &str,
    agent: &Agent,
    run: &RunContext,
    records_dir: &Path,
) -> Result<Vec<EvalRecord>, BenchError> {
    let todo: Vec<&BenchInstance> = instances.iter().filter(|i| !i.trivial).collect();
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<BenchError>> = Mutex::new(None);
    let workers = agent.cfg.concurrency.min(todo.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| {
                let stop = |e: BenchError| {
                    run.cancel.store(true, Ordering::SeqCst);
                    failure.lock().unwrap().get_or_insert(e);
                };
                while !run.cancel.load(Ordering::SeqCst) {
                    let Some(inst) = todo.get(next.fetch_add(1, Ordering::SeqCst)) else { break };
                    let path = record_path(records_dir, model, &inst.id);
                    if path.exists() {
                        continue;
                    }
                    let outcome = match prove_loop(agent, run, &inst.context, &inst.statement, &inst.id) {
                        Ok(o) => o,
                        Err(e) => return stop(e.into()),
                    };
                    let rec = match outcome {
                        ProveOutcome::Solved { repairs, proof, .. } => EvalRecord {
                            instance_id: inst.id.clone(),
                            model: model.into(),
                            outcome: Outcome::SolvedAt { t: repairs },
                            proof: Some(proof),
                        },
                        ProveOutcome::Failed { .. } => {
                            EvalRecord { instance_id: inst.id.clone(), model: model.into(), outcome: Outcome::Failed, proof: None }
                        }
                    };
                    let write = path
                        .parent()
                        .map_or(Ok(()), std::fs::create_dir_all)
                        .and_then(|_| write_atomic(&path, serde_json::to_string(&rec).expect("record serializes").as_bytes()));
                    if let Err(e) = write {
                        return stop(BenchError::Io { path, source: e });
                    }
                    if let Some(log) = &run.log {
                        log.write(&json!({"ts": chrono::Utc::now().to_rfc3339(), "stage": "eval", "model": model, "key": inst.id, "outcome": rec.outcome}));
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let mut out = Vec::new();
    for inst in todo {
        let path = record_path(records_dir, model, &inst.id);
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        out.push(serde_json::from_str(&text).map_err(|e| BenchError::Input(format!("{}: {e}", path.display())))?);
    }
    Ok(out)
}
