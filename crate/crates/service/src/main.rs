use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wordsmith::config::Config;
use wordsmith::pipeline::{self, Observer, RunError, Stage, StageFailure};
use wordsmith::Service;
use wordsmith_core::amp::IterationRecord;
use wordsmith_core::motion::{build_corpus, CorpusConfig, MotionClip, Skeleton, Verb};
use wordsmith_core::prompts::{LlmClient, LlmConfig, PromptSession};
use wordsmith_core::retarget::retarget_clip;
use wordsmith_core::vqvae::{clip_windows, train_vqvae};

/// Exit status for I/O, configuration and other unclassified errors.
const EXIT_ERROR: u8 = 1;
/// Usage errors; clap uses the same code for malformed arguments.
const EXIT_USAGE: u8 = 2;
const EXIT_WARM_START_REJECTED: u8 = 3;
const EXIT_STAGE_FAILED: u8 = 4;
const EXIT_REPLAY_MISMATCH: u8 = 5;

#[derive(Parser)]
#[command(name = "wordsmith", version, about = "Language commands to planar robot control policies")]
struct Cli {
    /// TOML settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    seed: Option<u64>,
    /// Environment steps to train for.
    #[arg(long)]
    budget: Option<u64>,
    /// Parallel simulated environments.
    #[arg(long)]
    envs: Option<usize>,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut Config) {
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

#[derive(Subcommand)]
enum Cmd {
    /// Run the whole pipeline for one command and write a run directory.
    Run {
        /// Natural-language command, e.g. "walk forward".
        command: String,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Initialize from a checkpoint file or an earlier run directory.
        #[arg(long)]
        warm_from: Option<PathBuf>,
    },
    /// Generate a reference motion for a command (or read a human clip) and
    /// retarget it onto the robot.
    Retarget {
        command: Option<String>,
        /// Human clip JSON to retarget instead of generating one.
        #[arg(long, conflicts_with = "command")]
        input: Option<PathBuf>,
        #[arg(long, default_value = "robot_clip.json")]
        out: PathBuf,
    },
    /// Train the motion VQ-VAE on the synthetic corpus.
    TrainVqvae {
        #[arg(long)]
        seed: Option<u64>,
        /// Optimizer steps.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value = "vqvae")]
        out: PathBuf,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Execute a run again from its manifest and compare reward CSVs.
    Replay {
        run_dir: PathBuf,
        /// Defaults to `<run_dir>-replay`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Progress;

impl Observer for Progress {
    fn stage(&mut self, stage: Stage) {
        eprintln!("stage {stage}");
    }

    fn iteration(&mut self, r: &IterationRecord) -> bool {
        eprintln!("iter {:>4} step {:>9} reward {:.4} ep_len {:.1}", r.iteration, r.step, r.mean_reward, r.mean_ep_len);
        true
    }
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn run_error(e: RunError) -> ExitCode {
    match &e {
        RunError::Stage(f) if e.is_warm_start_rejected() => {
            fail(EXIT_WARM_START_REJECTED, format!("warm start rejected in stage {}: {}", f.stage, f.cause))
        }
        RunError::Stage(StageFailure { stage, cause, .. }) => {
            fail(EXIT_STAGE_FAILED, format!("stage {stage} failed: {cause}"))
        }
        _ => fail(EXIT_ERROR, e),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = match Config::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_ERROR, e),
    };
    match cli.command {
        Cmd::Run { command, train, out, warm_from } => {
            train.apply(&mut cfg);
            if let Err(e) = cfg.validate() {
                return fail(EXIT_USAGE, e);
            }
            match pipeline::run_pipeline_sync(&command, &cfg, &out, warm_from.as_deref(), &mut Progress) {
                Ok(m) => {
                    println!("prompt: {}", m.prompt);
                    println!("steps: {}  final reward: {:.4}", m.total_steps, m.final_reward.unwrap_or(f64::NAN));
                    println!("manifest: {}", out.join(pipeline::MANIFEST_FILE).display());
                    ExitCode::SUCCESS
                }
                Err(e) => run_error(e),
            }
        }
        Cmd::Retarget { command, input, out } => retarget(&cfg, command.as_deref(), input.as_deref(), &out),
        Cmd::TrainVqvae { seed, budget, out } => {
            if let Some(s) = seed {
                cfg.vqvae.seed = s;
            }
            if let Some(b) = budget {
                cfg.vqvae.steps = b;
            }
            vqvae(&cfg, &out)
        }
        Cmd::Serve { bind, data_dir } => {
            if let Some(b) = bind {
                cfg.server.bind = b;
            }
            if let Some(d) = data_dir {
                cfg.server.data_dir = d;
            }
            serve(cfg)
        }
        Cmd::Replay { run_dir, out } => {
            let out = out.unwrap_or_else(|| {
                let mut p = run_dir.clone().into_os_string();
                p.push("-replay");
                p.into()
            });
            match pipeline::replay(&run_dir, &out, &mut Progress) {
                Ok(r) if r.identical => {
                    println!("reward CSV reproduced ({})", r.replayed);
                    ExitCode::SUCCESS
                }
                Ok(r) => fail(EXIT_REPLAY_MISMATCH, format!("reward CSV differs: {} vs {}", r.original, r.replayed)),
                Err(e) => run_error(e),
            }
        }
    }
}

fn retarget(cfg: &Config, command: Option<&str>, input: Option<&Path>, out: &Path) -> ExitCode {
    let human = match (command, input) {
        (_, Some(p)) => match MotionClip::read(p) {
            Ok(c) => c,
            Err(e) => return fail(EXIT_ERROR, format!("{}: {e}", p.display())),
        },
        (Some(c), None) => {
            let decision = match PromptSession::new(cfg.server.tau).submit(c) {
                Ok(d) => d,
                Err(e) => return fail(EXIT_USAGE, e),
            };
            println!("prompt: {}", decision.prompt);
            match pipeline::reference_for(&decision.prompt, cfg) {
                Ok((human, _, _)) => human,
                Err(f) => return fail(EXIT_STAGE_FAILED, f),
            }
        }
        (None, None) => return fail(EXIT_USAGE, "give a command or --input"),
    };
    match retarget_clip(&human, &Skeleton::robot_d(), &cfg.retarget) {
        Ok((clip, report)) => {
            if let Err(e) = clip.write(out) {
                return fail(EXIT_ERROR, e);
            }
            println!(
                "{} frames, mean tracking error {:.4} m, max {:.4} m, {} unconverged",
                clip.len(),
                report.mean_tracking_error,
                report.max_tracking_error,
                report.unconverged_frames
            );
            println!("wrote {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(EXIT_STAGE_FAILED, format!("stage retargeting failed: {e}")),
    }
}

fn vqvae(cfg: &Config, out: &Path) -> ExitCode {
    let corpus = |seeds: Vec<u64>| {
        let c = CorpusConfig { verbs: Verb::ALL.to_vec(), seeds, ..CorpusConfig::default() };
        build_corpus(&c).map(|v| v.into_iter().map(|l| l.clip).collect::<Vec<_>>())
    };
    let (train, heldout) = match (corpus(vec![0, 1, 2, 3]), corpus(vec![10, 11])) {
        (Ok(t), Ok(h)) => (t, h),
        (Err(e), _) | (_, Err(e)) => return fail(EXIT_ERROR, e),
    };
    let (model, history) = match train_vqvae(&train, &heldout, &cfg.vqvae) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_STAGE_FAILED, e),
    };
    if let Err(e) = std::fs::create_dir_all(out) {
        return fail(EXIT_ERROR, format!("{}: {e}", out.display()));
    }
    if let Err(e) = model.write(&out.join("vqvae.wsck")) {
        return fail(EXIT_ERROR, e);
    }
    let text = serde_json::to_string_pretty(&history).expect("history serializes");
    if let Err(e) = std::fs::write(out.join("history.json"), text) {
        return fail(EXIT_ERROR, e);
    }
    let windows: Vec<_> = heldout.iter().flat_map(|c| clip_windows(c, cfg.vqvae.window, cfg.vqvae.window)).collect();
    let used = model.code_usage(&windows).map(|h| h.iter().filter(|n| **n > 0).count()).unwrap_or(0);
    let last = history.records.last().map_or(f64::NAN, |r| r.heldout_re);
    println!(
        "held-out reconstruction {last:.4} (baseline {:.4}), {used}/{} codes used",
        history.baseline_re,
        model.codebook.len()
    );
    println!("wrote {}", out.display());
    ExitCode::SUCCESS
}

fn serve(cfg: Config) -> ExitCode {
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => return fail(EXIT_ERROR, e),
    };
    let bind = cfg.server.bind.clone();
    let llm = LlmClient::new(LlmConfig {
        transcript_path: Some(cfg.server.data_dir.join("llm_transcript.jsonl")),
        ..LlmConfig::from_env()
    });
    rt.block_on(async move {
        let listener = match tokio::net::TcpListener::bind(&bind).await {
            Ok(l) => l,
            Err(e) => return fail(EXIT_ERROR, format!("cannot listen on {bind}: {e}")),
        };
        let svc = match Service::open(cfg, llm) {
            Ok(s) => s,
            Err(e) => return fail(EXIT_ERROR, e),
        };
        let addr = listener.local_addr().map(|a| a.to_string()).unwrap_or(bind);
        println!("listening on http://{addr}");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        match wordsmith::http::serve(svc, listener, shutdown).await {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(EXIT_ERROR, e),
        }
    })
}
