mod common;

use std::sync::{Arc, Barrier};
use std::time::Duration;

use wordsmith::events::{self, Event};
use wordsmith::pipeline::{FailureKind, Stage};
use wordsmith::service::{CheckpointChoice, RolloutSource, Service, ServiceError, SessionOverrides, TrainRun};
use wordsmith_core::amp::WarmStart;
use wordsmith_core::motion::{RootPose, Skeleton};
use wordsmith_core::prompts::{LlmClient, LlmConfig, PromptError};

const WAIT: Duration = Duration::from_secs(300);

fn open(dir: &std::path::Path) -> Arc<Service> {
    Service::open(common::tiny(dir), LlmClient::new(LlmConfig::default())).unwrap()
}

fn train(svc: &Service, session: &str, text: &str) -> TrainRun {
    let sub = svc.submit_command(session, text).unwrap();
    let run = svc.wait(&sub.run_id, WAIT).unwrap();
    assert_eq!(run.stage, Stage::Done, "{:?}", run.error);
    run
}

#[test]
fn kick_then_slow_down_warm_starts_from_kick() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path());
    let s = svc.create_session(SessionOverrides::default()).unwrap().id;

    let kick = svc.submit_command(&s, "Kick").unwrap();
    assert_eq!(kick.prompt, "A person is kicking.");
    assert_eq!(kick.warm_start, None);
    let kick_run = svc.wait(&kick.run_id, WAIT).unwrap();
    assert_eq!(kick_run.stage, Stage::Done, "{:?}", kick_run.error);
    assert_eq!(kick_run.warm_start_status, Some(WarmStart::None));
    let kick_id = kick_run.artifacts.checkpoint.clone().unwrap();

    let slow = svc.submit_command(&s, "Slow down").unwrap();
    assert_eq!(slow.closest_prompt_in_history.as_deref(), Some("A person is kicking."));
    let warm = slow.warm_start.clone().unwrap();
    assert_eq!(warm.checkpoint_id, kick_id);
    let slow_run = svc.wait(&slow.run_id, WAIT).unwrap();
    assert_eq!(slow_run.stage, Stage::Done);
    assert_eq!(slow_run.warm_start_status, Some(WarmStart::Loaded));

    // Both prompts are registered and recorded in the history.
    let state = svc.prompt_state(&s).unwrap();
    let records = state.history.records();
    assert_eq!(records[0].checkpoint.as_deref(), Some(kick_id.as_str()));
    assert_eq!(records[1].checkpoint, slow_run.artifacts.checkpoint);
    let listed = svc.checkpoints().unwrap();
    assert_eq!(listed["mappings"].as_array().unwrap().len(), 2);
    svc.close();
}

#[test]
fn wave_warm_starts_from_raise_hand_and_unrelated_motion_does_not() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path());
    let s = svc.create_session(SessionOverrides::default()).unwrap().id;
    train(&svc, &s, "Walk forward");
    let raise = train(&svc, &s, "Stand still and raise your right hand up");
    let wave = svc.submit_command(&s, "Wave to a friend").unwrap();
    let w = wave.warm_start.unwrap();
    assert_eq!(w.prompt, "A person is standing still and raising the right hand.");
    assert_eq!(Some(w.checkpoint_id), raise.artifacts.checkpoint);
    svc.wait(&wave.run_id, WAIT).unwrap();

    let celebrate = svc.submit_command(&s, "celebrate").unwrap();
    assert_eq!(celebrate.closest_prompt_in_history, None);
    assert_eq!(celebrate.warm_start, None);
    svc.wait(&celebrate.run_id, WAIT).unwrap();

    // A new session has an empty history, so nothing is closest even though
    // the registry holds the prompt.
    let other = svc.create_session(SessionOverrides::default()).unwrap().id;
    let again = svc.submit_command(&other, "walk forward").unwrap();
    assert_eq!(again.closest_prompt_in_history, None);
    assert_eq!(again.warm_start, None);
    svc.close();
}

#[test]
fn closest_prompt_without_a_checkpoint_starts_from_scratch() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path());
    let long = SessionOverrides { budget: Some(1 << 40), ..Default::default() };
    let s = svc.create_session(long).unwrap().id;
    let kick = svc.submit_command(&s, "Kick").unwrap();
    // Cancel the run mid-training by shutting down.
    while svc.run(&kick.run_id).unwrap().iterations == 0 {
        std::thread::sleep(Duration::from_millis(20));
    }
    svc.close();
    let run = svc.run(&kick.run_id).unwrap();
    assert_eq!(run.stage, Stage::Failed);
    assert_eq!(run.error.unwrap().kind, FailureKind::Cancelled);
    assert!(matches!(svc.submit_command(&s, "Slow down"), Err(ServiceError::Closed)));
    drop(svc);

    let svc = open(dir.path());
    let slow = svc.submit_command(&s, "Slow down").unwrap();
    assert_eq!(slow.closest_prompt_in_history.as_deref(), Some("A person is kicking."));
    assert_eq!(slow.warm_start, None);
    svc.close();
}

#[test]
fn concurrent_submissions_leave_one_active_run() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path());
    let s = svc.create_session(SessionOverrides { budget: Some(1 << 40), ..Default::default() }).unwrap().id;
    let barrier = Arc::new(Barrier::new(4));
    let handles: Vec<_> = (0..4)
        .map(|k| {
            let (svc, s, barrier) = (svc.clone(), s.clone(), barrier.clone());
            std::thread::spawn(move || {
                barrier.wait();
                svc.submit_command(&s, ["walk", "kick", "wave", "hop"][k])
            })
        })
        .collect();
    let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    let ok = results.iter().filter(|r| r.is_ok()).count();
    assert_eq!(ok, 1, "{results:?}");
    for r in &results {
        if let Err(e) = r {
            assert!(matches!(e, ServiceError::Busy { .. }), "{e}");
        }
    }
    assert_eq!(svc.prompt_state(&s).unwrap().history.len(), 1);
    svc.close();
}

#[test]
fn unknown_verb_is_reported_and_leaves_the_session_idle() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path());
    let s = svc.create_session(SessionOverrides::default()).unwrap().id;
    match svc.submit_command(&s, "do a backflip") {
        Err(ServiceError::Prompt(PromptError::UnknownVerb { vocabulary, .. })) => {
            assert!(vocabulary.iter().any(|v| v == "kick"))
        }
        other => panic!("{other:?}"),
    }
    let view = svc.session(&s).unwrap();
    assert!(view.motion_history.is_empty());
    assert_eq!(view.active_run, None);
    assert!(matches!(svc.submit_command("s999", "walk"), Err(ServiceError::NotFound(_))));
    svc.close();
}

#[test]
fn restart_restores_sessions_runs_and_mappings() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path());
    let s = svc.create_session(SessionOverrides { seed: Some(3), ..Default::default() }).unwrap().id;
    train(&svc, &s, "walk forward");
    train(&svc, &s, "walk fast");
    let sessions = svc.sessions();
    let runs = svc.runs();
    let checkpoints = svc.checkpoints().unwrap();
    let protocol = svc.prompt_state(&s).unwrap();
    let rewards = svc.rewards_csv(&runs[0].id).unwrap();
    svc.close();
    drop(svc);

    let svc = open(dir.path());
    assert_eq!(svc.sessions(), sessions);
    assert_eq!(svc.runs(), runs);
    assert_eq!(svc.checkpoints().unwrap(), checkpoints);
    assert_eq!(svc.prompt_state(&s).unwrap(), protocol);
    assert_eq!(svc.rewards_csv(&runs[0].id).unwrap(), rewards);
    // Ids continue after the replayed ones.
    let next = svc.create_session(SessionOverrides::default()).unwrap();
    assert_eq!(next.id, "s2");
    let sub = svc.submit_command(&s, "slow down").unwrap();
    assert_eq!(sub.run_id, "r3");
    let warm = sub.warm_start.unwrap().checkpoint_id;
    assert!(runs.iter().any(|r| r.artifacts.checkpoint.as_deref() == Some(warm.as_str())));
    svc.close();
}

#[test]
fn runs_in_flight_at_restart_are_marked_failed() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path());
    let s = svc.create_session(SessionOverrides::default()).unwrap().id;
    let done = train(&svc, &s, "hop");
    svc.close();
    drop(svc);

    // Journal a later snapshot that never reached a terminal stage, as a
    // crash during training would leave it.
    let journal = dir.path().join("journal.jsonl");
    let mut stuck = done.clone();
    stuck.id = "r2".into();
    stuck.stage = Stage::Training;
    let line = serde_json::to_string(&wordsmith::journal::Entry::Run { run: stuck }).unwrap();
    let mut text = std::fs::read_to_string(&journal).unwrap();
    text.push_str(&line);
    text.push('\n');
    // Plus half an entry from the interrupted write.
    text.push_str(r#"{"type":"run","run":{"id":"r"#);
    std::fs::write(&journal, text).unwrap();

    let svc = open(dir.path());
    let r = svc.run("r2").unwrap();
    assert_eq!(r.stage, Stage::Failed);
    let err = r.error.unwrap();
    assert_eq!(err.kind, FailureKind::Interrupted);
    assert_eq!(err.stage, Stage::Training);
    assert_eq!(svc.session(&s).unwrap().active_run, None);
    assert_eq!(svc.run(&done.id).unwrap(), done);
    svc.close();
    drop(svc);
    // The failure itself was journaled and the torn tail dropped.
    let entries = wordsmith::journal::read_entries(&journal).unwrap();
    assert!(matches!(entries.last(), Some(wordsmith::journal::Entry::Run { run }) if run.stage == Stage::Failed));
}

#[test]
fn events_follow_the_stage_order_and_rewards_are_throttled() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny(dir.path());
    cfg.train.total_steps = 128 * 60;
    let svc = Service::open(cfg, LlmClient::new(LlmConfig::default())).unwrap();
    let mut rx = svc.subscribe();
    let s = svc.create_session(SessionOverrides::default()).unwrap().id;
    let started = std::time::Instant::now();
    let sub = svc.submit_command(&s, "walk forward").unwrap();
    let mut seen: Vec<Event> = Vec::new();
    loop {
        let e = rx.blocking_recv().unwrap();
        let done = e.kind == events::RUN_COMPLETED;
        seen.push(e);
        if done {
            break;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert_eq!(seen[0].kind, events::SESSION_CREATED);
    assert_eq!(seen[1].kind, events::RUN_CREATED);
    let stages: Vec<Stage> = seen
        .iter()
        .filter(|e| e.kind == events::STAGE)
        .map(|e| serde_json::from_value(e.payload["stage"].clone()).unwrap())
        .collect();
    assert_eq!(stages, vec![Stage::Retargeting, Stage::Training, Stage::Done]);
    let rewards = seen.iter().filter(|e| e.kind == events::REWARD).count();
    assert!(rewards >= 1);
    assert!((rewards as f64) <= elapsed / 0.2 + 1.0, "{rewards} reward events in {elapsed:.2}s");
    assert!(seen.iter().all(|e| e.kind == events::SESSION_CREATED || e.run_id.as_deref() == Some(&sub.run_id)));
    let last = seen.last().unwrap();
    assert_eq!(last.payload["run"]["stage"], "done");
    svc.close();
}

#[test]
fn rollouts_carry_poses_and_matching_fk_samples() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path());
    let s = svc.create_session(SessionOverrides::default()).unwrap().id;
    let run = train(&svc, &s, "stand still");
    let robot = Skeleton::robot_d();
    for (choice, source) in [
        (CheckpointChoice::Best, RolloutSource::Policy),
        (CheckpointChoice::Final, RolloutSource::Policy),
        (CheckpointChoice::Final, RolloutSource::Reference),
    ] {
        let lines = svc.rollout(&run.id, choice, source, None).unwrap();
        let header: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
        assert_eq!(header["type"], "header");
        assert_eq!(header["frames"].as_u64().unwrap() as usize, lines.len() - 1);
        let sk: Skeleton = serde_json::from_value(header["skeleton"].clone()).unwrap();
        assert_eq!(sk, robot);
        assert!(lines.len() > 2);
        for line in &lines[1..] {
            let f: serde_json::Value = serde_json::from_str(line).unwrap();
            let root: [f64; 3] = serde_json::from_value(f["root"].clone()).unwrap();
            let q: Vec<f64> = serde_json::from_value(f["q"].clone()).unwrap();
            let fk = robot.fk(&RootPose::new(root[0], root[1], root[2]), &q).unwrap();
            let eff: Vec<[f64; 2]> = serde_json::from_value(f["effectors"].clone()).unwrap();
            assert_eq!(eff, fk.effectors);
        }
    }
    let steps = svc.rollout(&run.id, CheckpointChoice::Best, RolloutSource::Policy, Some(10)).unwrap();
    assert!(steps.len() <= 12);
    assert!(matches!(
        svc.rollout(&run.id, CheckpointChoice::Best, RolloutSource::Policy, Some(1 << 30)),
        Err(ServiceError::Invalid(_))
    ));
    assert!(matches!(
        svc.rollout("r99", CheckpointChoice::Best, RolloutSource::Policy, None),
        Err(ServiceError::NotFound(_))
    ));

    let csv = String::from_utf8(svc.rewards_csv(&run.id).unwrap()).unwrap();
    assert_eq!(csv.lines().count(), run.iterations + 1);
    assert!(csv.starts_with("step,mean_reward"));
    svc.close();
}
