//! Sessions, training runs and the background executor.
//!
//! All mutable state sits behind one mutex and every change is journaled
//! before it becomes visible. Training happens on dedicated worker threads
//! fed through a queue; request handlers only enqueue and read snapshots.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tokio::sync::broadcast;
use wordsmith_core::amp::{play, IterationRecord, PolicyCheckpoint, WarmStart};
use wordsmith_core::motion::{MotionClip, RootPose, Skeleton};
use wordsmith_core::prompts::{parse_command, DecisionSource, LlmClient, PromptDecision, PromptError, PromptSession};

use crate::config::Config;
use crate::events::{self, Event, Throttle};
use crate::journal::{Entry, Journal, JournalError};
use crate::pipeline::{execute, reward_csv, ArtifactKind, FailureKind, Observer, PipelineOutput, Stage, StageFailure};
use crate::registry::{Registry, RegistryError};

pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const RUN_DIR: &str = "runs";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("session {session} already has an active run {run}")]
    Busy { session: String, run: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("prompt {0:?} has no motion mapping")]
    Unmappable(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("{0}")]
    Io(String),
    #[error("service is shutting down")]
    Closed,
}

/// Per-session changes to the service configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionOverrides {
    pub seed: Option<u64>,
    /// Environment steps per run.
    pub budget: Option<u64>,
    pub envs: Option<usize>,
}

impl SessionOverrides {
    pub fn apply(&self, cfg: &mut Config) {
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(b) = self.budget {
            cfg.train.total_steps = b;
        }
        if let Some(e) = self.envs {
            cfg.train.envs = e;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmStartRef {
    pub prompt: String,
    pub checkpoint_id: String,
}

/// Paths are relative to the data directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub human_clip: Option<String>,
    pub robot_clip: Option<String>,
    pub rewards: Option<String>,
    pub checkpoint: Option<String>,
    pub best_checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub id: String,
    pub session: String,
    pub command: String,
    pub prompt: String,
    /// Ordinal of the prompt record in the session history.
    pub ordinal: u64,
    pub closest_prompt_in_history: Option<String>,
    pub decision_source: DecisionSource,
    pub stage: Stage,
    pub warm_start: Option<WarmStartRef>,
    /// What training made of `warm_start`; set once training ends.
    pub warm_start_status: Option<WarmStart>,
    pub seed: u64,
    pub budget: u64,
    pub iterations: usize,
    pub steps: u64,
    pub last_reward: Option<f64>,
    pub best_reward: Option<f64>,
    pub artifacts: RunArtifacts,
    pub error: Option<StageFailure>,
    pub created_at: u64,
    pub finished_at: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct Session {
    pub id: String,
    pub state: PromptSession,
    pub active_run: Option<String>,
    pub runs: Vec<String>,
    pub overrides: SessionOverrides,
    pub created_at: u64,
}

/// One command and what became of it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Turn {
    pub ordinal: u64,
    pub command: String,
    pub prompt: String,
    pub closest_prompt_in_history: Option<String>,
    pub warm_start: Option<WarmStartRef>,
    pub run_id: String,
    pub stage: Stage,
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionView {
    pub id: String,
    pub current_prompt: Option<String>,
    pub motion_history: Vec<String>,
    pub active_run: Option<String>,
    pub overrides: SessionOverrides,
    pub turns: Vec<Turn>,
    pub created_at: u64,
}

/// Reply to a submitted command.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Submission {
    pub run_id: String,
    pub prompt: String,
    pub closest_prompt_in_history: Option<String>,
    pub motion_history: Vec<String>,
    pub source: DecisionSource,
    pub warm_start: Option<WarmStartRef>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointChoice {
    Best,
    #[default]
    Final,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutSource {
    #[default]
    Policy,
    Reference,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn numbered(prefix: char, n: u64) -> String {
    format!("{prefix}{n}")
}

fn number_of(id: &str) -> u64 {
    id.get(1..).and_then(|s| s.parse().ok()).unwrap_or(0)
}

struct State {
    sessions: BTreeMap<String, Session>,
    runs: BTreeMap<String, TrainRun>,
    registry: Registry,
    journal: Journal,
    next_session: u64,
    next_run: u64,
    /// Iteration records of runs still training.
    live: HashMap<String, Vec<IterationRecord>>,
}

impl State {
    fn apply(&mut self, entry: Entry) {
        match entry {
            Entry::SessionCreated { session, tau, overrides, at } => {
                self.next_session = self.next_session.max(number_of(&session) + 1);
                self.sessions.insert(
                    session.clone(),
                    Session {
                        id: session,
                        state: PromptSession::new(tau),
                        active_run: None,
                        runs: Vec::new(),
                        overrides,
                        created_at: at,
                    },
                );
            }
            Entry::Decision { session, run, state, .. } => {
                self.next_run = self.next_run.max(number_of(&run) + 1);
                if let Some(s) = self.sessions.get_mut(&session) {
                    s.state = state;
                    s.runs.push(run);
                }
            }
            Entry::Run { run } => {
                self.next_run = self.next_run.max(number_of(&run.id) + 1);
                if let Some(s) = self.sessions.get_mut(&run.session) {
                    if run.stage.is_terminal() {
                        if s.active_run.as_deref() == Some(run.id.as_str()) {
                            s.active_run = None;
                        }
                    } else {
                        s.active_run = Some(run.id.clone());
                    }
                }
                self.runs.insert(run.id.clone(), run);
            }
            Entry::CheckpointRegistered { prompt, id, session, ordinal, .. } => {
                if let Err(e) = self.registry.bind(&prompt, &id) {
                    log::warn!("journal names {prompt:?} -> {id}: {e}");
                }
                if let Some(s) = self.sessions.get_mut(&session) {
                    s.state.history.set_checkpoint(ordinal, id);
                }
            }
        }
    }

    fn journal(&mut self, entry: Entry) -> Result<(), JournalError> {
        self.journal.append(&entry)?;
        Ok(())
    }

    fn session(&self, id: &str) -> Result<&Session, ServiceError> {
        self.sessions.get(id).ok_or_else(|| ServiceError::NotFound(format!("session {id}")))
    }

    fn run(&self, id: &str) -> Result<&TrainRun, ServiceError> {
        self.runs.get(id).ok_or_else(|| ServiceError::NotFound(format!("run {id}")))
    }

    fn view(&self, s: &Session) -> SessionView {
        let turns = s
            .runs
            .iter()
            .filter_map(|r| self.runs.get(r))
            .map(|r| Turn {
                ordinal: r.ordinal,
                command: r.command.clone(),
                prompt: r.prompt.clone(),
                closest_prompt_in_history: r.closest_prompt_in_history.clone(),
                warm_start: r.warm_start.clone(),
                run_id: r.id.clone(),
                stage: r.stage,
                checkpoint: r.artifacts.checkpoint.clone(),
            })
            .collect();
        SessionView {
            id: s.id.clone(),
            current_prompt: s.state.current.clone(),
            motion_history: s.state.history.prompts(),
            active_run: s.active_run.clone(),
            overrides: s.overrides,
            turns,
            created_at: s.created_at,
        }
    }
}

struct Inner {
    config: Config,
    llm: LlmClient,
    state: Mutex<State>,
    changed: Condvar,
    events: broadcast::Sender<Event>,
    shutdown: AtomicBool,
}

impl Inner {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn publish(&self, event: Event) {
        // No subscribers is fine.
        let _ = self.events.send(event);
    }

    fn run_dir(&self, run: &str) -> PathBuf {
        self.config.server.data_dir.join(RUN_DIR).join(run)
    }

    fn rel(&self, run: &str, kind: ArtifactKind) -> String {
        format!("{RUN_DIR}/{run}/{}", kind.file_name())
    }

    fn config_for(&self, session: &Session) -> Config {
        let mut cfg = self.config.clone();
        session.overrides.apply(&mut cfg);
        cfg
    }

    /// Moves a run forward and records the new snapshot.
    fn update_run(&self, st: &mut State, id: &str, f: impl FnOnce(&mut TrainRun)) -> Option<TrainRun> {
        let run = st.runs.get_mut(id)?;
        let before = run.stage;
        f(run);
        debug_assert!(before == run.stage || before.can_advance_to(run.stage), "{before} -> {}", run.stage);
        let snapshot = run.clone();
        if snapshot.stage.is_terminal() {
            if let Some(s) = st.sessions.get_mut(&snapshot.session) {
                if s.active_run.as_deref() == Some(id) {
                    s.active_run = None;
                }
            }
        }
        if let Err(e) = st.journal(Entry::Run { run: snapshot.clone() }) {
            log::error!("journal write failed: {e}");
        }
        self.changed.notify_all();
        Some(snapshot)
    }

    fn set_stage(&self, id: &str, stage: Stage) {
        let mut st = self.lock();
        let Some(run) = st.runs.get(id) else { return };
        if run.stage == stage || !run.stage.can_advance_to(stage) {
            return;
        }
        self.update_run(&mut st, id, |r| r.stage = stage);
        drop(st);
        self.publish(Event::new(events::STAGE, Some(id), json!({ "stage": stage })));
    }

    fn write_reference(&self, id: &str, human: &MotionClip, robot: &MotionClip) -> Result<(), String> {
        let dir = self.run_dir(id);
        std::fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        for (kind, clip) in [(ArtifactKind::HumanClip, human), (ArtifactKind::RobotClip, robot)] {
            clip.write(&dir.join(kind.file_name())).map_err(|e| e.to_string())?;
        }
        let mut st = self.lock();
        self.update_run(&mut st, id, |r| {
            r.artifacts.human_clip = Some(self.rel(id, ArtifactKind::HumanClip));
            r.artifacts.robot_clip = Some(self.rel(id, ArtifactKind::RobotClip));
        });
        Ok(())
    }

    fn write_rewards(&self, id: &str, history: &[IterationRecord]) -> Result<String, String> {
        let dir = self.run_dir(id);
        std::fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        let path = dir.join(ArtifactKind::Rewards.file_name());
        std::fs::write(&path, reward_csv(history)).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(self.rel(id, ArtifactKind::Rewards))
    }

    fn finish_ok(&self, id: &str, out: PipelineOutput, warm_error: Option<String>) -> Result<(), StageFailure> {
        let fail = |e: String| StageFailure::new(Stage::Training, FailureKind::Io, e);
        let o = &out.outcome;
        let rewards = self.write_rewards(id, &o.history).map_err(fail)?;
        let mut st = self.lock();
        let (prompt, session, ordinal) = {
            let r = st.run(id).map_err(|e| fail(e.to_string()))?;
            (r.prompt.clone(), r.session.clone(), r.ordinal)
        };
        let final_id =
            st.registry.register(&prompt, &o.final_checkpoint.to_bytes()).map_err(|e| fail(e.to_string()))?;
        let best_id = st.registry.store(&o.best.to_bytes()).map_err(|e| fail(e.to_string()))?;
        if let Some(s) = st.sessions.get_mut(&session) {
            s.state.history.set_checkpoint(ordinal, final_id.clone());
        }
        let entry = Entry::CheckpointRegistered { prompt, id: final_id.clone(), run: id.into(), session, ordinal };
        st.journal(entry).map_err(|e| fail(e.to_string()))?;
        st.live.remove(id);
        let status = match warm_error {
            Some(e) => WarmStart::Rejected(e),
            None => o.warm_start.clone(),
        };
        let run = self.update_run(&mut st, id, |r| {
            r.stage = Stage::Done;
            r.warm_start_status = Some(status);
            r.iterations = o.history.len();
            r.steps = o.history.last().map_or(0, |h| h.step);
            r.last_reward = o.history.last().map(|h| h.mean_reward);
            r.best_reward = o.history.iter().map(|h| h.mean_reward).reduce(f64::max);
            r.artifacts.rewards = Some(rewards);
            r.artifacts.checkpoint = Some(final_id);
            r.artifacts.best_checkpoint = Some(best_id);
            r.finished_at = Some(now());
        });
        drop(st);
        self.publish(Event::new(events::STAGE, Some(id), json!({ "stage": Stage::Done })));
        self.publish(Event::new(events::RUN_COMPLETED, Some(id), json!({ "run": run })));
        Ok(())
    }

    fn finish_failed(&self, id: &str, failure: StageFailure) {
        log::warn!("run {id}: {failure}");
        let history = self.lock().live.remove(id).unwrap_or_default();
        let rewards = if history.is_empty() { None } else { self.write_rewards(id, &history).ok() };
        let mut st = self.lock();
        let run = self.update_run(&mut st, id, |r| {
            r.stage = Stage::Failed;
            r.error = Some(failure);
            if rewards.is_some() {
                r.artifacts.rewards = rewards;
            }
            r.finished_at = Some(now());
        });
        drop(st);
        self.publish(Event::new(events::STAGE, Some(id), json!({ "stage": Stage::Failed })));
        self.publish(Event::new(events::RUN_COMPLETED, Some(id), json!({ "run": run })));
    }

    fn run_job(&self, id: &str) {
        let prepared = {
            let st = self.lock();
            st.runs.get(id).and_then(|r| {
                let s = st.sessions.get(&r.session)?;
                let warm = r.warm_start.as_ref().map(|w| st.registry.load(&w.checkpoint_id).map_err(|e| e.to_string()));
                Some((r.prompt.clone(), self.config_for(s), warm))
            })
        };
        let Some((prompt, cfg, warm)) = prepared else {
            log::error!("run {id} vanished before it started");
            return;
        };
        if self.shutdown.load(Ordering::SeqCst) {
            self.finish_failed(id, StageFailure::new(Stage::Generating, FailureKind::Cancelled, "service shut down"));
            return;
        }
        let (warm, warm_error) = match warm {
            None => (None, None),
            Some(Ok(c)) => (Some(c), None),
            Some(Err(e)) => {
                log::warn!("run {id}: warm start unavailable ({e}); training from scratch");
                (None, Some(e))
            }
        };
        let interval = Duration::from_secs_f64(self.config.server.reward_event_interval);
        let mut observer = RunObserver { inner: self, id, throttle: Throttle::new(interval) };
        let result = execute(&prompt, &cfg, warm.as_ref(), &mut observer);
        match result.and_then(|out| self.finish_ok(id, out, warm_error)) {
            Ok(()) => log::info!("run {id} done"),
            Err(f) => self.finish_failed(id, f),
        }
    }
}

struct RunObserver<'a> {
    inner: &'a Inner,
    id: &'a str,
    throttle: Throttle,
}

impl Observer for RunObserver<'_> {
    fn stage(&mut self, stage: Stage) {
        self.inner.set_stage(self.id, stage);
    }

    fn reference(&mut self, human: &MotionClip, robot: &MotionClip) {
        if let Err(e) = self.inner.write_reference(self.id, human, robot) {
            log::warn!("run {}: could not store reference clips: {e}", self.id);
        }
    }

    fn iteration(&mut self, r: &IterationRecord) -> bool {
        let mut st = self.inner.lock();
        st.live.entry(self.id.to_string()).or_default().push(*r);
        if let Some(run) = st.runs.get_mut(self.id) {
            run.iterations = r.iteration + 1;
            run.steps = r.step;
            run.last_reward = Some(r.mean_reward);
            run.best_reward = Some(run.best_reward.map_or(r.mean_reward, |b| b.max(r.mean_reward)));
        }
        drop(st);
        if self.throttle.ready(Instant::now()) {
            let payload = json!({
                "iteration": r.iteration,
                "step": r.step,
                "mean_reward": r.mean_reward,
                "mean_ep_len": r.mean_ep_len,
                "disc_loss": r.disc_loss,
            });
            self.inner.publish(Event::new(events::REWARD, Some(self.id), payload));
        }
        !self.inner.shutdown.load(Ordering::SeqCst)
    }
}

/// Handle to a running service. Dropping the last handle cancels training
/// in flight; [`Service::close`] also waits for the workers.
pub struct Service {
    inner: Arc<Inner>,
    jobs: Mutex<Option<mpsc::Sender<String>>>,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

impl Service {
    /// Opens `config.server.data_dir`, replays its journal and starts the
    /// training workers. Runs that were in flight when the journal stopped
    /// are marked failed.
    pub fn open(config: Config, llm: LlmClient) -> Result<Arc<Self>, ServiceError> {
        config.validate().map_err(|e| ServiceError::Invalid(e.to_string()))?;
        let data = config.server.data_dir.clone();
        std::fs::create_dir_all(&data).map_err(|e| ServiceError::Io(format!("{}: {e}", data.display())))?;
        let registry = Registry::open(&data.join(CHECKPOINT_DIR))?;
        let (journal, entries) = Journal::open(&data.join(JOURNAL_FILE))?;
        let mut state = State {
            sessions: BTreeMap::new(),
            runs: BTreeMap::new(),
            registry,
            journal,
            next_session: 1,
            next_run: 1,
            live: HashMap::new(),
        };
        let replayed = entries.len();
        for e in entries {
            state.apply(e);
        }
        let interrupted: Vec<String> =
            state.runs.values().filter(|r| !r.stage.is_terminal()).map(|r| r.id.clone()).collect();
        for id in &interrupted {
            let run = state.runs.get_mut(id).expect("listed above");
            run.error = Some(StageFailure::new(run.stage, FailureKind::Interrupted, "service stopped during the run"));
            run.stage = Stage::Failed;
            run.finished_at = Some(now());
            let snapshot = run.clone();
            if let Some(s) = state.sessions.get_mut(&snapshot.session) {
                s.active_run = None;
            }
            state.journal(Entry::Run { run: snapshot })?;
        }
        if replayed > 0 {
            log::info!(
                "replayed {replayed} journal entries: {} sessions, {} runs ({} interrupted)",
                state.sessions.len(),
                state.runs.len(),
                interrupted.len()
            );
        }

        let (events, _) = broadcast::channel(1024);
        let inner = Arc::new(Inner {
            config,
            llm,
            state: Mutex::new(state),
            changed: Condvar::new(),
            events,
            shutdown: AtomicBool::new(false),
        });
        let (tx, rx) = mpsc::channel::<String>();
        let rx = Arc::new(Mutex::new(rx));
        let workers = (0..inner.config.server.max_concurrent_runs)
            .map(|k| {
                let inner = inner.clone();
                let rx = rx.clone();
                std::thread::Builder::new()
                    .name(format!("trainer-{k}"))
                    .spawn(move || loop {
                        let job = rx.lock().unwrap_or_else(|p| p.into_inner()).recv();
                        match job {
                            Ok(id) => inner.run_job(&id),
                            Err(_) => break,
                        }
                    })
                    .expect("spawn training worker")
            })
            .collect();
        Ok(Arc::new(Self { inner, jobs: Mutex::new(Some(tx)), workers: Mutex::new(workers) }))
    }

    pub fn config(&self) -> &Config {
        &self.inner.config
    }

    pub fn data_dir(&self) -> &Path {
        &self.inner.config.server.data_dir
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Event> {
        self.inner.events.subscribe()
    }

    pub fn create_session(&self, overrides: SessionOverrides) -> Result<SessionView, ServiceError> {
        let mut cfg = self.inner.config.clone();
        overrides.apply(&mut cfg);
        cfg.validate().map_err(|e| ServiceError::Invalid(e.to_string()))?;
        let mut st = self.inner.lock();
        let id = numbered('s', st.next_session);
        let entry = Entry::SessionCreated { session: id.clone(), tau: cfg.server.tau, overrides, at: now() };
        st.journal(entry.clone())?;
        st.apply(entry);
        let view = st.view(st.session(&id)?);
        drop(st);
        self.inner.publish(Event::new(events::SESSION_CREATED, None, json!({ "session": view })));
        Ok(view)
    }

    pub fn sessions(&self) -> Vec<SessionView> {
        let st = self.inner.lock();
        st.sessions.values().map(|s| st.view(s)).collect()
    }

    pub fn session(&self, id: &str) -> Result<SessionView, ServiceError> {
        let st = self.inner.lock();
        Ok(st.view(st.session(id)?))
    }

    /// Prompt protocol session state, for inspection.
    pub fn prompt_state(&self, id: &str) -> Result<PromptSession, ServiceError> {
        Ok(self.inner.lock().session(id)?.state.clone())
    }

    /// Decides the prompt for `text`, picks the warm start and queues
    /// training. Blocks for the external prompt model when one is
    /// configured, so call it off the async runtime.
    pub fn submit_command(&self, session: &str, text: &str) -> Result<Submission, ServiceError> {
        if self.inner.shutdown.load(Ordering::SeqCst) {
            return Err(ServiceError::Closed);
        }
        // Reserve the session so that concurrent submissions see it busy
        // while the prompt decision is made outside the lock.
        let (run_id, mut protocol, cfg) = {
            let mut st = self.inner.lock();
            let s = st.session(session)?;
            if let Some(active) = &s.active_run {
                return Err(ServiceError::Busy { session: session.into(), run: active.clone() });
            }
            let protocol = s.state.clone();
            let cfg = self.inner.config_for(s);
            let run_id = numbered('r', st.next_run);
            st.next_run += 1;
            st.sessions.get_mut(session).expect("checked").active_run = Some(run_id.clone());
            (run_id, protocol, cfg)
        };
        let release = |inner: &Inner| {
            let mut st = inner.lock();
            if let Some(s) = st.sessions.get_mut(session) {
                if s.active_run.as_deref() == Some(run_id.as_str()) {
                    s.active_run = None;
                }
            }
        };

        let decided =
            if self.inner.llm.enabled() { protocol.submit_llm(text, &self.inner.llm) } else { protocol.submit(text) };
        let decision: PromptDecision = match decided {
            Ok(d) => d,
            Err(e) => {
                release(&self.inner);
                return Err(e.into());
            }
        };
        if parse_command(&decision.prompt).is_err() {
            release(&self.inner);
            return Err(ServiceError::Unmappable(decision.prompt));
        }

        let mut st = self.inner.lock();
        let warm_start = decision.closest_prompt_in_history.as_ref().and_then(|c| {
            st.registry.lookup(c).map(|id| WarmStartRef { prompt: c.clone(), checkpoint_id: id.to_string() })
        });
        let run = TrainRun {
            id: run_id.clone(),
            session: session.into(),
            command: text.into(),
            prompt: decision.prompt.clone(),
            ordinal: decision.ordinal(),
            closest_prompt_in_history: decision.closest_prompt_in_history.clone(),
            decision_source: decision.source.clone(),
            stage: Stage::Generating,
            warm_start: warm_start.clone(),
            warm_start_status: None,
            seed: cfg.train.seed,
            budget: cfg.train.total_steps,
            iterations: 0,
            steps: 0,
            last_reward: None,
            best_reward: None,
            artifacts: RunArtifacts::default(),
            error: None,
            created_at: now(),
            finished_at: None,
        };
        let decision_entry = Entry::Decision {
            session: session.into(),
            run: run_id.clone(),
            command: text.into(),
            decision: decision.clone(),
            state: protocol.clone(),
        };
        let journaled = st.journal(decision_entry).and_then(|_| st.journal(Entry::Run { run: run.clone() }));
        if let Err(e) = journaled {
            drop(st);
            release(&self.inner);
            return Err(e.into());
        }
        let s = st.sessions.get_mut(session).expect("reserved above");
        s.state = protocol;
        s.runs.push(run_id.clone());
        st.runs.insert(run_id.clone(), run.clone());
        drop(st);
        self.inner.changed.notify_all();
        self.inner.publish(Event::new(events::RUN_CREATED, Some(&run_id), json!({ "run": run })));

        let queued = self.jobs.lock().unwrap_or_else(|p| p.into_inner()).as_ref().map(|tx| tx.send(run_id.clone()));
        if !matches!(queued, Some(Ok(()))) {
            self.inner.finish_failed(
                &run_id,
                StageFailure::new(Stage::Generating, FailureKind::Cancelled, "service shut down"),
            );
            return Err(ServiceError::Closed);
        }
        Ok(Submission {
            run_id,
            prompt: decision.prompt,
            closest_prompt_in_history: decision.closest_prompt_in_history,
            motion_history: decision.motion_history.prompts(),
            source: decision.source,
            warm_start,
        })
    }

    pub fn run(&self, id: &str) -> Result<TrainRun, ServiceError> {
        Ok(self.inner.lock().run(id)?.clone())
    }

    pub fn runs(&self) -> Vec<TrainRun> {
        self.inner.lock().runs.values().cloned().collect()
    }

    /// Blocks until run `id` reaches `done` or `failed`.
    pub fn wait(&self, id: &str, timeout: Duration) -> Result<TrainRun, ServiceError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.inner.lock();
        loop {
            let run = st.run(id)?;
            if run.stage.is_terminal() {
                return Ok(run.clone());
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(ServiceError::Invalid(format!("run {id} still {} after {timeout:?}", run.stage)));
            }
            st = self.inner.changed.wait_timeout(st, left).unwrap_or_else(|p| p.into_inner()).0;
        }
    }

    /// Reward history as CSV; partial while the run trains.
    pub fn rewards_csv(&self, id: &str) -> Result<Vec<u8>, ServiceError> {
        let st = self.inner.lock();
        let run = st.run(id)?;
        if let Some(live) = st.live.get(id) {
            return Ok(reward_csv(live));
        }
        match &run.artifacts.rewards {
            Some(rel) => {
                let path = self.data_dir().join(rel);
                std::fs::read(&path).map_err(|e| ServiceError::Io(format!("{}: {e}", path.display())))
            }
            None => Ok(reward_csv(&[])),
        }
    }

    pub fn checkpoints(&self) -> Result<serde_json::Value, ServiceError> {
        let st = self.inner.lock();
        Ok(json!({ "mappings": st.registry.mappings(), "stored": st.registry.ids()? }))
    }

    pub fn checkpoint_bytes(&self, id: &str) -> Result<Vec<u8>, ServiceError> {
        Ok(self.inner.lock().registry.fetch(id)?)
    }

    pub fn load_checkpoint(&self, id: &str) -> Result<PolicyCheckpoint, ServiceError> {
        Ok(self.inner.lock().registry.load(id)?)
    }

    /// JSON lines for playback: a header, then one line per frame with the
    /// pose and world-space FK samples (link segments and effectors).
    pub fn rollout(
        &self,
        id: &str,
        checkpoint: CheckpointChoice,
        source: RolloutSource,
        steps: Option<usize>,
    ) -> Result<Vec<String>, ServiceError> {
        let (run, cfg) = {
            let st = self.inner.lock();
            let run = st.run(id)?.clone();
            let cfg = self.inner.config_for(st.session(&run.session)?);
            (run, cfg)
        };
        let clip_rel = run
            .artifacts
            .robot_clip
            .clone()
            .ok_or_else(|| ServiceError::NotFound(format!("reference clip of run {id}")))?;
        let clip = MotionClip::read(&self.data_dir().join(clip_rel)).map_err(|e| ServiceError::Io(e.to_string()))?;
        let limit = self.inner.config.server.max_rollout_steps;
        if steps.is_some_and(|n| n > limit) {
            return Err(ServiceError::Invalid(format!("steps must be at most {limit}")));
        }
        let (header, poses, dt) = match source {
            RolloutSource::Reference => {
                let poses: Vec<(RootPose, Vec<f64>)> = clip.frames.iter().map(|f| (f.root, f.q.clone())).collect();
                let n = steps.map_or(poses.len(), |s| s.min(poses.len()));
                (json!({ "source": source }), poses[..n].to_vec(), clip.dt)
            }
            RolloutSource::Policy => {
                let ckpt_id = match checkpoint {
                    CheckpointChoice::Final => run.artifacts.checkpoint.clone(),
                    CheckpointChoice::Best => run.artifacts.best_checkpoint.clone(),
                }
                .ok_or_else(|| {
                    ServiceError::NotFound(format!("{checkpoint:?} checkpoint of run {id}").to_lowercase())
                })?;
                let ckpt = self.load_checkpoint(&ckpt_id)?;
                let dt = cfg.train.sim.dt;
                let n = steps.unwrap_or_else(|| (clip.duration() / dt).round() as usize);
                let states = play(&ckpt, &clip, &cfg.train, n).map_err(|e| ServiceError::Invalid(e.to_string()))?;
                let poses = states.into_iter().map(|s| (s.root, s.q)).collect();
                (json!({ "source": source, "checkpoint": checkpoint, "checkpoint_id": ckpt_id }), poses, dt)
            }
        };
        rollout_lines(id, header, &clip.skeleton, &poses, dt)
    }

    /// Stops accepting work, cancels training in flight and waits for the
    /// workers to exit.
    pub fn close(&self) {
        self.inner.shutdown.store(true, Ordering::SeqCst);
        self.jobs.lock().unwrap_or_else(|p| p.into_inner()).take();
        let workers = std::mem::take(&mut *self.workers.lock().unwrap_or_else(|p| p.into_inner()));
        for w in workers {
            let _ = w.join();
        }
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.inner.shutdown.store(true, Ordering::SeqCst);
        self.jobs.lock().unwrap_or_else(|p| p.into_inner()).take();
    }
}

fn rollout_lines(
    run: &str,
    mut header: serde_json::Value,
    skeleton: &Skeleton,
    poses: &[(RootPose, Vec<f64>)],
    dt: f64,
) -> Result<Vec<String>, ServiceError> {
    header["type"] = json!("header");
    header["run_id"] = json!(run);
    header["dt"] = json!(dt);
    header["frames"] = json!(poses.len());
    header["effector_names"] = json!(skeleton.end_effectors.iter().map(|e| e.name.clone()).collect::<Vec<_>>());
    header["skeleton"] = serde_json::to_value(skeleton).map_err(|e| ServiceError::Io(e.to_string()))?;
    let mut lines = vec![header.to_string()];
    for (i, (root, q)) in poses.iter().enumerate() {
        let fk = skeleton.fk(root, q).map_err(|e| ServiceError::Invalid(e.to_string()))?;
        let links: Vec<[f64; 4]> =
            fk.link_start.iter().zip(&fk.link_end).map(|(a, b)| [a[0], a[1], b[0], b[1]]).collect();
        let frame = json!({
            "type": "frame",
            "index": i,
            "t": i as f64 * dt,
            "root": root.to_array(),
            "q": q,
            "links": links,
            "effectors": fk.effectors,
        });
        lines.push(frame.to_string());
    }
    Ok(lines)
}
