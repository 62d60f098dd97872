//! Prompt → reference motion → robot clip → policy, with stage reporting,
//! and the blocking CLI variant that writes a self-describing run directory.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wordsmith_core::amp::{
    check_warm_start, train, write_reward_csv, AmpError, IterationRecord, PolicyCheckpoint, TrainOutcome, WarmStart,
};
use wordsmith_core::checkpoint::content_id;
use wordsmith_core::motion::{generate_motion, MotionClip, MotionProgram, Skeleton};
use wordsmith_core::prompts::{parse_command, PromptSession};
use wordsmith_core::retarget::{retarget_clip, RetargetReport};

use crate::config::Config;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Pipeline stages in the only order a run may take them. `Failed` can
/// follow any stage before `Done`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generating,
    Retargeting,
    Training,
    Done,
    Failed,
}

impl Stage {
    pub fn is_terminal(self) -> bool {
        matches!(self, Stage::Done | Stage::Failed)
    }

    /// Whether a run in `self` may move to `next`.
    pub fn can_advance_to(self, next: Stage) -> bool {
        if self.is_terminal() {
            return false;
        }
        next == Stage::Failed || next > self
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generating => "generating",
            Stage::Retargeting => "retargeting",
            Stage::Training => "training",
            Stage::Done => "done",
            Stage::Failed => "failed",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// The command or prompt has no motion mapping.
    Invalid,
    WarmStartRejected,
    Cancelled,
    /// The service stopped while the run was in flight.
    Interrupted,
    Io,
    Internal,
}

/// Why a run stopped, and where.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub kind: FailureKind,
    pub cause: String,
}

impl StageFailure {
    pub fn new(stage: Stage, kind: FailureKind, cause: impl Into<String>) -> Self {
        Self { stage, kind, cause: cause.into() }
    }
}

impl fmt::Display for StageFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.cause)
    }
}

impl std::error::Error for StageFailure {}

/// Hooks called from inside [`execute`].
pub trait Observer {
    fn stage(&mut self, _stage: Stage) {}
    /// Called once the robot reference exists, before training.
    fn reference(&mut self, _human: &MotionClip, _robot: &MotionClip) {}
    /// Returning `false` cancels training.
    fn iteration(&mut self, _record: &IterationRecord) -> bool {
        true
    }
}

/// Observer that ignores everything.
pub struct Quiet;

impl Observer for Quiet {}

pub struct PipelineOutput {
    pub program: MotionProgram,
    pub human: MotionClip,
    pub robot: MotionClip,
    pub retarget: RetargetReport,
    pub outcome: TrainOutcome,
}

/// Maps a declarative prompt to its motion program. Prompts render from
/// command specs, so parsing them back recovers verb and modifiers.
pub fn program_for(prompt: &str, cfg: &Config) -> Result<MotionProgram, StageFailure> {
    let spec =
        parse_command(prompt).map_err(|e| StageFailure::new(Stage::Generating, FailureKind::Invalid, e.to_string()))?;
    Ok(spec.to_program(cfg.motion.duration))
}

/// Reference clip on the robot for `prompt`, without training.
pub fn reference_for(prompt: &str, cfg: &Config) -> Result<(MotionClip, MotionClip, RetargetReport), StageFailure> {
    let program = program_for(prompt, cfg)?;
    let human = generate_motion(&program, &Skeleton::human9(), cfg.motion.dt)
        .map_err(|e| StageFailure::new(Stage::Generating, FailureKind::Invalid, e.to_string()))?;
    let (robot, report) = retarget_clip(&human, &Skeleton::robot_d(), &cfg.retarget)
        .map_err(|e| StageFailure::new(Stage::Retargeting, FailureKind::Internal, e.to_string()))?;
    Ok((human, robot, report))
}

/// Runs every stage for `prompt`. A warm-start checkpoint that does not fit
/// is reported in `outcome.warm_start` and training starts from scratch.
pub fn execute(
    prompt: &str,
    cfg: &Config,
    warm: Option<&PolicyCheckpoint>,
    observer: &mut dyn Observer,
) -> Result<PipelineOutput, StageFailure> {
    observer.stage(Stage::Generating);
    let program = program_for(prompt, cfg)?;
    let human = generate_motion(&program, &Skeleton::human9(), cfg.motion.dt)
        .map_err(|e| StageFailure::new(Stage::Generating, FailureKind::Invalid, e.to_string()))?;

    observer.stage(Stage::Retargeting);
    let (robot, retarget) = retarget_clip(&human, &Skeleton::robot_d(), &cfg.retarget)
        .map_err(|e| StageFailure::new(Stage::Retargeting, FailureKind::Internal, e.to_string()))?;

    observer.reference(&human, &robot);

    observer.stage(Stage::Training);
    let outcome = train(&robot, &cfg.train, prompt, warm, &mut |r| observer.iteration(r)).map_err(|e| {
        let kind = match e {
            AmpError::Cancelled => FailureKind::Cancelled,
            AmpError::WarmStartRejected(_) => FailureKind::WarmStartRejected,
            AmpError::Config(_) | AmpError::Reference(_) => FailureKind::Invalid,
            _ => FailureKind::Internal,
        };
        StageFailure::new(Stage::Training, kind, e.to_string())
    })?;
    Ok(PipelineOutput { program, human, robot, retarget, outcome })
}

pub fn reward_csv(history: &[IterationRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    write_reward_csv(&mut out, history).expect("writing to memory");
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    HumanClip,
    RobotClip,
    Checkpoint,
    Rewards,
}

impl ArtifactKind {
    pub fn file_name(self) -> &'static str {
        match self {
            ArtifactKind::HumanClip => "reference_human.json",
            ArtifactKind::RobotClip => "reference_robot.json",
            ArtifactKind::Checkpoint => "policy.wsck",
            ArtifactKind::Rewards => "rewards.csv",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: ArtifactKind,
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmSource {
    /// As given on the command line.
    pub path: String,
    pub checkpoint_id: String,
}

/// Everything needed to inspect a run directory or execute the run again.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: u32,
    pub version: String,
    pub command: String,
    pub prompt: String,
    pub config: Config,
    pub warm_from: Option<WarmSource>,
    pub warm_start: WarmStart,
    pub artifacts: Vec<Artifact>,
    pub total_steps: u64,
    pub iterations: usize,
    pub final_reward: Option<f64>,
    pub best_reward: Option<f64>,
    pub retarget_error: f64,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self, RunError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| RunError::Manifest(format!("{}: {e}", path.display())))?;
        if m.format != MANIFEST_VERSION {
            return Err(RunError::Manifest(format!("unsupported manifest format {}", m.format)));
        }
        Ok(m)
    }

    pub fn artifact(&self, kind: ArtifactKind) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.kind == kind)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Stage(#[from] StageFailure),
    #[error("{0}")]
    Io(String),
    #[error("manifest: {0}")]
    Manifest(String),
}

impl RunError {
    pub fn is_warm_start_rejected(&self) -> bool {
        matches!(self, RunError::Stage(f) if f.kind == FailureKind::WarmStartRejected)
    }
}

/// Loads a warm-start checkpoint from a `.wsck` file or from a run
/// directory holding a manifest.
pub fn load_warm_source(path: &Path) -> Result<(PathBuf, PolicyCheckpoint, String), RunError> {
    let file = if path.is_dir() {
        let m = RunManifest::read(path)?;
        let a = m
            .artifact(ArtifactKind::Checkpoint)
            .ok_or_else(|| RunError::Manifest(format!("{} lists no checkpoint", path.display())))?;
        path.join(&a.path)
    } else {
        path.to_path_buf()
    };
    let bytes = std::fs::read(&file).map_err(|e| RunError::Io(format!("{}: {e}", file.display())))?;
    let ckpt = PolicyCheckpoint::from_bytes(&bytes).map_err(|e| {
        StageFailure::new(Stage::Training, FailureKind::WarmStartRejected, format!("{}: {e}", file.display()))
    })?;
    Ok((file, ckpt, content_id(&bytes)))
}

fn write_artifact(dir: &Path, kind: ArtifactKind, bytes: &[u8]) -> Result<Artifact, RunError> {
    let path = dir.join(kind.file_name());
    std::fs::write(&path, bytes).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
    Ok(Artifact { kind, path: kind.file_name().into(), sha256: content_id(bytes), bytes: bytes.len() as u64 })
}

/// Blocking pipeline for the CLI: decides the prompt for `command` in a
/// fresh session, runs all stages and writes clips, final checkpoint,
/// reward CSV and `manifest.json` into `out`.
///
/// An explicit warm start must fit the robot and network shapes; a misfit
/// fails with [`FailureKind::WarmStartRejected`] instead of falling back.
pub fn run_pipeline_sync(
    command: &str,
    cfg: &Config,
    out: &Path,
    warm_from: Option<&Path>,
    observer: &mut dyn Observer,
) -> Result<RunManifest, RunError> {
    let decision = PromptSession::new(cfg.server.tau)
        .submit(command)
        .map_err(|e| StageFailure::new(Stage::Generating, FailureKind::Invalid, e.to_string()))?;
    let warm = match warm_from {
        None => None,
        Some(p) => {
            let (_, ckpt, id) = load_warm_source(p)?;
            check_warm_start(&ckpt, &Skeleton::robot_d(), &cfg.train)
                .map_err(|e| StageFailure::new(Stage::Training, FailureKind::WarmStartRejected, e.to_string()))?;
            Some((WarmSource { path: p.display().to_string(), checkpoint_id: id }, ckpt))
        }
    };
    let result = execute(&decision.prompt, cfg, warm.as_ref().map(|w| &w.1), observer)?;

    std::fs::create_dir_all(out).map_err(|e| RunError::Io(format!("{}: {e}", out.display())))?;
    let json = |c: &MotionClip| c.to_json().map_err(|e| RunError::Io(e.to_string()));
    let o = &result.outcome;
    let artifacts = vec![
        write_artifact(out, ArtifactKind::HumanClip, json(&result.human)?.as_bytes())?,
        write_artifact(out, ArtifactKind::RobotClip, json(&result.robot)?.as_bytes())?,
        write_artifact(out, ArtifactKind::Checkpoint, &o.final_checkpoint.to_bytes())?,
        write_artifact(out, ArtifactKind::Rewards, &reward_csv(&o.history))?,
    ];
    let manifest = RunManifest {
        format: MANIFEST_VERSION,
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        prompt: decision.prompt,
        config: cfg.clone(),
        warm_from: warm.map(|w| w.0),
        warm_start: o.warm_start.clone(),
        artifacts,
        total_steps: o.final_checkpoint.total_steps,
        iterations: o.history.len(),
        final_reward: o.history.last().map(|r| r.mean_reward),
        best_reward: o.history.iter().map(|r| r.mean_reward).reduce(f64::max),
        retarget_error: result.retarget.mean_tracking_error,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| RunError::Manifest(e.to_string()))?;
    let path = out.join(MANIFEST_FILE);
    std::fs::write(&path, text + "\n").map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub original: String,
    pub replayed: String,
    pub identical: bool,
}

/// Re-executes the run described by `dir/manifest.json` into `out` and
/// compares reward CSV digests.
pub fn replay(dir: &Path, out: &Path, observer: &mut dyn Observer) -> Result<ReplayReport, RunError> {
    let m = RunManifest::read(dir)?;
    let original = m
        .artifact(ArtifactKind::Rewards)
        .ok_or_else(|| RunError::Manifest("manifest lists no reward CSV".into()))?
        .sha256
        .clone();
    let warm = match &m.warm_from {
        None => None,
        Some(w) => {
            let p = PathBuf::from(&w.path);
            let (_, _, id) = load_warm_source(&p)?;
            if id != w.checkpoint_id {
                return Err(RunError::Manifest(format!(
                    "warm-start source {} changed since the run (id {id}, expected {})",
                    w.path, w.checkpoint_id
                )));
            }
            Some(p)
        }
    };
    let cfg = m.config.clone().resolved().map_err(|e| RunError::Manifest(e.to_string()))?;
    let again = run_pipeline_sync(&m.command, &cfg, out, warm.as_deref(), observer)?;
    let replayed = again.artifact(ArtifactKind::Rewards).expect("run writes rewards").sha256.clone();
    Ok(ReplayReport { identical: original == replayed, original, replayed })
}
