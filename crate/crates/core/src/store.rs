//! File-backed stage queues. Every candidate is one JSON file living in the
//! directory of its current stage; the non-terminal directories double as
//! pending queues, with leases kept beside them under `.queue/`.
//!
//! Mutations go through a process-wide lock plus an advisory lock on
//! `.store.lock`, and every file change is a single rename, so a crash at any
//! point leaves each candidate in exactly one directory. [`Store::open`]
//! finishes half-done moves and removes temp files.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{is_legal_step, Candidate, Stage};

pub const RUN_META_FILE: &str = "run_meta.json";
pub const LOCK_FILE: &str = ".store.lock";
pub const QUEUE_DIR: &str = ".queue";
pub const LOGS_DIR: &str = "logs";
/// Twice the default verifier timeout.
pub const DEFAULT_LEASE_S: u64 = 12_000;
const TMP_PREFIX: &str = ".tmp-";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("stale lease for {candidate_id}")]
    StaleLease { candidate_id: String },
    #[error("illegal transition {from} -> {to}")]
    IllegalTransition { from: Stage, to: Stage },
    #[error("corrupt record {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("simulated crash")]
    Crashed,
}

type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// Fixed directory names under the artifact root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactLayout {
    pub root: PathBuf,
}

impl ArtifactLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ArtifactLayout { root: root.into() }
    }

    pub fn dir_name(stage: Stage) -> &'static str {
        match stage {
            Stage::Raw => "MathlibLemma",
            Stage::Judged => "MathlibLemmaCorrect",
            Stage::Compilable => "MathlibLemmaCompilable",
            Stage::Proved => "MathlibLemmaProved",
            Stage::RejectedJudge => "rejected_judge",
            Stage::RejectedFormalize => "rejected_formalize",
            Stage::Unproved => "unproved",
            Stage::Trivial => "trivial",
        }
    }

    pub fn stage_for_dir(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|&s| Self::dir_name(s) == name)
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(Self::dir_name(stage))
    }

    pub fn candidate_path(&self, stage: Stage, id: &str) -> PathBuf {
        self.stage_dir(stage).join(format!("{id}.json"))
    }

    pub fn queue_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(QUEUE_DIR).join(stage.as_str())
    }

    pub fn lease_path(&self, stage: Stage, id: &str) -> PathBuf {
        self.queue_dir(stage).join(format!("{id}.lease"))
    }

    pub fn seeds_dir(&self) -> PathBuf {
        self.root.join(QUEUE_DIR).join("seeds")
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.root.join(LOGS_DIR)
    }

    pub fn run_meta_path(&self) -> PathBuf {
        self.root.join(RUN_META_FILE)
    }

    /// Candidate ids stored in a stage directory, sorted.
    pub fn ids(&self, stage: Stage) -> Result<Vec<String>> {
        let dir = self.stage_dir(stage);
        let mut ids = Vec::new();
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(ids),
            Err(e) => return Err(io_err(&dir)(e)),
        };
        for entry in entries {
            let name = entry.map_err(io_err(&dir))?.file_name();
            let Some(name) = name.to_str() else { continue };
            if name.starts_with('.') {
                continue;
            }
            if let Some(id) = name.strip_suffix(".json") {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn read(&self, stage: Stage, id: &str) -> Result<Candidate> {
        read_candidate(&self.candidate_path(stage, id))
    }

    /// All candidates in a stage directory, sorted by id.
    pub fn list(&self, stage: Stage) -> Result<Vec<Candidate>> {
        self.ids(stage)?.iter().map(|id| self.read(stage, id)).collect()
    }

    /// Stages whose directory holds `id`. Exactly one when the store is
    /// consistent.
    pub fn locate(&self, id: &str) -> Vec<Stage> {
        Stage::ALL.into_iter().filter(|&s| self.candidate_path(s, id).exists()).collect()
    }
}

fn read_candidate(path: &Path) -> Result<Candidate> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| StoreError::Corrupt { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn candidate_json(c: &Candidate) -> String {
    let mut s = serde_json::to_string_pretty(c).expect("candidate serializes");
    s.push('\n');
    s
}

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }
}

/// Test clock advanced by hand.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        ManualClock(AtomicU64::new(start_ms))
    }

    pub fn advance_ms(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// Crash injection: the store performs `n` mutating filesystem operations,
/// dies before the next one and refuses all work afterwards.
#[derive(Debug)]
pub struct FaultPlan {
    remaining: AtomicI64,
    crashed: AtomicBool,
}

impl FaultPlan {
    pub fn crash_after(n: u64) -> Self {
        FaultPlan { remaining: AtomicI64::new(n as i64), crashed: AtomicBool::new(false) }
    }

    pub fn never() -> Self {
        FaultPlan { remaining: AtomicI64::new(i64::MAX), crashed: AtomicBool::new(false) }
    }

    pub fn crashed(&self) -> bool {
        self.crashed.load(Ordering::SeqCst)
    }

    fn step(&self) -> Result<()> {
        if self.crashed() || self.remaining.fetch_sub(1, Ordering::SeqCst) <= 0 {
            self.crashed.store(true, Ordering::SeqCst);
            return Err(StoreError::Crashed);
        }
        Ok(())
    }
}

/// Persisted claim on a pending candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaseRecord {
    pub worker_id: String,
    pub run_id: String,
    pub pid: u32,
    pub token: String,
    pub expiry_ms: u64,
    pub attempts_delivered: u32,
}

#[derive(Debug, Clone)]
pub struct Lease {
    pub stage: Stage,
    pub candidate: Candidate,
    pub record: LeaseRecord,
}

impl Lease {
    pub fn candidate_id(&self) -> &str {
        &self.candidate.candidate_id
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecoveryReport {
    pub moves_completed: usize,
    pub temp_files_removed: usize,
    pub dangling_leases_removed: usize,
}

/// Metadata identifying the run that owns a workdir.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub toolchain: String,
    pub prng: String,
    pub prng_seed: u64,
    pub t_repair: u32,
    pub k_repairs: u32,
    pub started_at: chrono::DateTime<chrono::Utc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub previous_config_hashes: Vec<String>,
}

fn live_runs() -> &'static Mutex<HashSet<String>> {
    static LIVE: OnceLock<Mutex<HashSet<String>>> = OnceLock::new();
    LIVE.get_or_init(|| Mutex::new(HashSet::new()))
}

fn pid_alive(pid: u32) -> bool {
    if cfg!(target_os = "linux") {
        Path::new(&format!("/proc/{pid}")).exists()
    } else {
        true
    }
}

pub struct Store {
    layout: ArtifactLayout,
    clock: Arc<dyn Clock>,
    faults: Arc<FaultPlan>,
    run_id: String,
    lock: Mutex<File>,
    tokens: AtomicU64,
    recovery: RecoveryReport,
}

impl Drop for Store {
    fn drop(&mut self) {
        live_runs().lock().unwrap().remove(&self.run_id);
    }
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Store> {
        Store::open_with(root, Arc::new(SystemClock), Arc::new(FaultPlan::never()))
    }

    /// Opens (creating the layout if needed) and runs crash recovery.
    pub fn open_with(root: impl Into<PathBuf>, clock: Arc<dyn Clock>, faults: Arc<FaultPlan>) -> Result<Store> {
        let layout = ArtifactLayout::new(root);
        for stage in Stage::ALL {
            let d = layout.stage_dir(stage);
            fs::create_dir_all(&d).map_err(io_err(&d))?;
            if !stage.is_terminal() {
                let q = layout.queue_dir(stage);
                fs::create_dir_all(&q).map_err(io_err(&q))?;
            }
        }
        let seeds = layout.seeds_dir();
        fs::create_dir_all(&seeds).map_err(io_err(&seeds))?;
        let lock_path = layout.root.join(LOCK_FILE);
        let lock =
            OpenOptions::new().create(true).truncate(false).write(true).open(&lock_path).map_err(io_err(&lock_path))?;
        let run_id = format!("{:016x}", rand::random::<u64>());
        live_runs().lock().unwrap().insert(run_id.clone());
        let mut store = Store {
            layout,
            clock,
            faults,
            run_id,
            lock: Mutex::new(lock),
            tokens: AtomicU64::new(0),
            recovery: RecoveryReport::default(),
        };
        store.recovery = store.recover()?;
        Ok(store)
    }

    pub fn layout(&self) -> &ArtifactLayout {
        &self.layout
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn recovery_report(&self) -> &RecoveryReport {
        &self.recovery
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    fn locked<T>(&self, f: impl FnOnce() -> Result<T>) -> Result<T> {
        if self.faults.crashed() {
            return Err(StoreError::Crashed);
        }
        let file = self.lock.lock().unwrap();
        let lock_path = self.layout.root.join(LOCK_FILE);
        file.lock().map_err(io_err(&lock_path))?;
        let out = f();
        let _ = file.unlock();
        out
    }

    fn write_file(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new("."));
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
        let tmp = dir.join(format!("{TMP_PREFIX}{name}-{}", self.run_id));
        self.faults.step()?;
        {
            let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(bytes).map_err(io_err(&tmp))?;
            f.sync_all().map_err(io_err(&tmp))?;
        }
        self.rename(&tmp, path)
    }

    fn rename(&self, from: &Path, to: &Path) -> Result<()> {
        self.faults.step()?;
        fs::rename(from, to).map_err(io_err(from))
    }

    fn remove(&self, path: &Path) -> Result<()> {
        self.faults.step()?;
        match fs::remove_file(path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(io_err(path)(e)),
        }
    }

    fn recover(&self) -> Result<RecoveryReport> {
        self.locked(|| {
            let mut report = RecoveryReport::default();
            let mut dirs: Vec<PathBuf> = Stage::ALL.iter().map(|&s| self.layout.stage_dir(s)).collect();
            dirs.extend(Stage::ALL.iter().filter(|s| !s.is_terminal()).map(|&s| self.layout.queue_dir(s)));
            dirs.push(self.layout.seeds_dir());
            dirs.push(self.layout.root.clone());
            for dir in &dirs {
                for entry in fs::read_dir(dir).map_err(io_err(dir))? {
                    let entry = entry.map_err(io_err(dir))?;
                    if entry.file_name().to_str().is_some_and(|n| n.starts_with(TMP_PREFIX)) {
                        self.remove(&entry.path())?;
                        report.temp_files_removed += 1;
                    }
                }
            }
            // A candidate whose recorded stage differs from its directory was
            // rewritten by an ack that died before the move.
            for dir_stage in Stage::ALL {
                for id in self.layout.ids(dir_stage)? {
                    let path = self.layout.candidate_path(dir_stage, &id);
                    let c = read_candidate(&path)?;
                    if c.stage != dir_stage {
                        let dest = self.layout.candidate_path(c.stage, &id);
                        if dest.exists() {
                            self.remove(&path)?;
                        } else {
                            self.rename(&path, &dest)?;
                        }
                        report.moves_completed += 1;
                    }
                }
            }
            for stage in Stage::ALL.into_iter().filter(|s| !s.is_terminal()) {
                let q = self.layout.queue_dir(stage);
                for entry in fs::read_dir(&q).map_err(io_err(&q))? {
                    let entry = entry.map_err(io_err(&q))?;
                    let name = entry.file_name();
                    let Some(id) = name.to_str().and_then(|n| n.strip_suffix(".lease")) else { continue };
                    if !self.layout.candidate_path(stage, id).exists() {
                        self.remove(&entry.path())?;
                        report.dangling_leases_removed += 1;
                    }
                }
            }
            Ok(report)
        })
    }

    /// Stores `c` as pending work of `stage`. Returns false when the id
    /// already exists anywhere in the store.
    pub fn enqueue(&self, stage: Stage, c: &Candidate) -> Result<bool> {
        if c.stage != stage {
            return Err(StoreError::Contract(format!(
                "candidate {} is {} but was enqueued as {}",
                c.candidate_id, c.stage, stage
            )));
        }
        if c.candidate_id.is_empty() || c.candidate_id.contains(['/', '\\']) || c.candidate_id.starts_with('.') {
            return Err(StoreError::Contract(format!("invalid candidate id {:?}", c.candidate_id)));
        }
        self.locked(|| {
            if !self.layout.locate(&c.candidate_id).is_empty() {
                return Ok(false);
            }
            self.write_file(&self.layout.candidate_path(stage, &c.candidate_id), candidate_json(c).as_bytes())?;
            Ok(true)
        })
    }

    fn read_lease(&self, stage: Stage, id: &str) -> Result<Option<LeaseRecord>> {
        let path = self.layout.lease_path(stage, id);
        match fs::read_to_string(&path) {
            Ok(text) => {
                serde_json::from_str(&text).map(Some).map_err(|e| StoreError::Corrupt { path, reason: e.to_string() })
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    fn write_lease(&self, stage: Stage, id: &str, rec: &LeaseRecord) -> Result<()> {
        let bytes = serde_json::to_vec(rec).expect("lease serializes");
        self.write_file(&self.layout.lease_path(stage, id), &bytes)
    }

    /// Claims the first deliverable item of `stage` (sorted by id) for
    /// `lease_s` seconds. Items with expired leases are redelivered.
    pub fn lease(&self, stage: Stage, worker_id: &str, lease_s: u64) -> Result<Option<Lease>> {
        if stage.is_terminal() {
            return Err(StoreError::Contract(format!("{stage} has no queue")));
        }
        self.locked(|| {
            let now = self.clock.now_ms();
            for id in self.layout.ids(stage)? {
                let prior = self.read_lease(stage, &id)?;
                if prior.as_ref().is_some_and(|l| l.expiry_ms > now) {
                    continue;
                }
                let candidate = self.layout.read(stage, &id)?;
                let record = LeaseRecord {
                    worker_id: worker_id.to_string(),
                    run_id: self.run_id.clone(),
                    pid: std::process::id(),
                    token: format!("{}-{}", self.run_id, self.tokens.fetch_add(1, Ordering::SeqCst)),
                    expiry_ms: now.saturating_add(lease_s.saturating_mul(1000)),
                    attempts_delivered: prior.map_or(0, |l| l.attempts_delivered) + 1,
                };
                self.write_lease(stage, &id, &record)?;
                return Ok(Some(Lease { stage, candidate, record }));
            }
            Ok(None)
        })
    }

    fn check_live(&self, lease: &Lease) -> Result<()> {
        let id = lease.candidate_id();
        let live = self.read_lease(lease.stage, id)?;
        match live {
            Some(l) if l.token == lease.record.token && l.expiry_ms > self.clock.now_ms() => Ok(()),
            _ => Err(StoreError::StaleLease { candidate_id: id.to_string() }),
        }
    }

    /// Commits the processed record: rewrites it in place, moves it to the
    /// directory of its new stage and drops the lease.
    pub fn ack(&self, lease: &Lease, result: &Candidate) -> Result<()> {
        let id = lease.candidate_id();
        if result.candidate_id != id {
            return Err(StoreError::Contract(format!("ack of {} with record {}", id, result.candidate_id)));
        }
        if !is_legal_step(lease.stage, result.stage) {
            return Err(StoreError::IllegalTransition { from: lease.stage, to: result.stage });
        }
        self.locked(|| {
            self.check_live(lease)?;
            let src = self.layout.candidate_path(lease.stage, id);
            self.write_file(&src, candidate_json(result).as_bytes())?;
            self.rename(&src, &self.layout.candidate_path(result.stage, id))?;
            self.remove(&self.layout.lease_path(lease.stage, id))
        })
    }

    /// Gives the item back for immediate redelivery.
    pub fn release(&self, lease: &Lease) -> Result<()> {
        self.locked(|| {
            self.check_live(lease)?;
            let mut rec = lease.record.clone();
            rec.expiry_ms = 0;
            self.write_lease(lease.stage, lease.candidate_id(), &rec)
        })
    }

    /// Expires leases held by runs that no longer exist: other processes
    /// that died, or earlier store handles of this process that were dropped.
    pub fn reclaim_orphans(&self) -> Result<usize> {
        let me = std::process::id();
        self.locked(|| {
            let live = live_runs().lock().unwrap().clone();
            let mut n = 0;
            for stage in Stage::ALL.into_iter().filter(|s| !s.is_terminal()) {
                for id in self.layout.ids(stage)? {
                    let Some(mut rec) = self.read_lease(stage, &id)? else { continue };
                    if rec.expiry_ms == 0 {
                        continue;
                    }
                    let dead = if rec.pid == me { !live.contains(&rec.run_id) } else { !pid_alive(rec.pid) };
                    if dead {
                        rec.expiry_ms = 0;
                        self.write_lease(stage, &id, &rec)?;
                        n += 1;
                    }
                }
            }
            Ok(n)
        })
    }

    /// Items in a stage directory, leased or not.
    pub fn pending(&self, stage: Stage) -> Result<usize> {
        Ok(self.layout.ids(stage)?.len())
    }

    fn seed_marker(&self, seed_id: &str) -> PathBuf {
        let h = hex::encode(&Sha256::digest(seed_id.as_bytes())[..8]);
        self.layout.seeds_dir().join(format!("{h}.done"))
    }

    pub fn seed_done(&self, seed_id: &str) -> bool {
        self.seed_marker(seed_id).exists()
    }

    pub fn mark_seed_done(&self, seed_id: &str) -> Result<()> {
        self.locked(|| self.write_file(&self.seed_marker(seed_id), seed_id.as_bytes()))
    }

    /// Records run metadata. The first start time is kept; a changed
    /// configuration hash is recorded and the old one remembered.
    pub fn write_run_meta(&self, meta: &RunMeta) -> Result<RunMeta> {
        self.locked(|| {
            let path = self.layout.run_meta_path();
            let mut out = meta.clone();
            if let Ok(text) = fs::read_to_string(&path) {
                if let Ok(prev) = serde_json::from_str::<RunMeta>(&text) {
                    out.started_at = prev.started_at;
                    out.previous_config_hashes = prev.previous_config_hashes.clone();
                    if prev.config_hash != meta.config_hash {
                        out.previous_config_hashes.push(prev.config_hash.clone());
                    }
                    if prev == out {
                        return Ok(out);
                    }
                }
            }
            let mut text = serde_json::to_string_pretty(&out).expect("meta serializes");
            text.push('\n');
            self.write_file(&path, text.as_bytes())?;
            Ok(out)
        })
    }
}
