use proptest::prelude::*;
use wordsmith_core::amp::TrainConfig;
use wordsmith_core::motion::*;
use wordsmith_core::sim::{build_observation, disc_features, disc_layout, ObsLayout, Simulator};

#[test]
fn reference_descriptor_has_69_entries() {
    let l = ObsLayout::reference_3d();
    let sizes: Vec<usize> = l.slices.iter().map(|s| s.len).collect();
    assert_eq!(sizes, vec![1, 6, 3, 3, 22, 22, 12]);
    assert_eq!(l.total(), 69);
}

#[test]
fn planar_layouts_follow_the_robot_skeleton() {
    let sk = Skeleton::robot_d();
    assert_eq!(sk.joint_count(), 10);
    let obs = ObsLayout::planar(&sk);
    let disc = disc_layout(&sk);
    assert_eq!(obs.total(), 6 + 2 * sk.joint_count() + 2 * sk.end_effectors.len());
    assert_eq!(obs.total(), 34);
    assert_eq!(disc.total(), 32);
    for l in [&obs, &disc] {
        let mut next = 0;
        for s in &l.slices {
            assert_eq!(s.start, next, "{}", s.name);
            next += s.len;
        }
    }
    assert_eq!(obs.range("joint_positions").unwrap().len(), sk.joint_count());
    assert_eq!(obs.range("end_effector_positions").unwrap().len(), 2 * sk.end_effectors.len());

    // Vectors built from a state fill their layouts exactly.
    let sim = Simulator::new(sk.clone(), TrainConfig::default().sim).unwrap();
    let s = sim.rest_state();
    let o = build_observation::<rand::rngs::ThreadRng>(&s, &sk, None);
    assert_eq!(o.len(), obs.total());
    assert_eq!(o[obs.range("joint_positions").unwrap()], s.q[..]);
    assert_eq!(o[obs.range("root_height").unwrap()][0], s.root.y);
    let f = disc_features(&sk, &s.root, s.root_vel, &s.q, &s.qd);
    assert_eq!(f.len(), disc.total());
}

#[test]
fn human_and_robot_share_effector_names() {
    let h = Skeleton::human9();
    let r = Skeleton::robot_d();
    for e in &r.end_effectors {
        assert!(h.effector_index(&e.name).is_some(), "{}", e.name);
    }
    assert_ne!(h.hash(), r.hash());
    assert_eq!(r.hash(), Skeleton::robot_d().hash());
}

#[test]
fn every_verb_generates_a_valid_clip() {
    let sk = Skeleton::human9();
    for verb in Verb::ALL {
        for speed in verb.speed_levels() {
            let p = MotionProgram::new(verb, speed, 2.0);
            let clip = generate_motion(&p, &sk, 1.0 / 30.0).unwrap();
            clip.validate().unwrap();
            assert_eq!(clip.len(), 60, "{}", p.label());
            for f in &clip.frames {
                for (q, l) in f.q.iter().zip(&sk.links) {
                    assert!(*q >= l.limits[0] - 1e-12 && *q <= l.limits[1] + 1e-12);
                }
            }
            assert_eq!(generate_motion(&p, &sk, 1.0 / 30.0).unwrap(), clip);
        }
    }
}

#[test]
fn clip_json_round_trips() {
    let clip = generate_motion(&MotionProgram::new(Verb::Wave, 1.0, 1.0), &Skeleton::human9(), 0.05).unwrap();
    let back = MotionClip::from_json(&clip.to_json().unwrap()).unwrap();
    assert_eq!(back, clip);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wave.json");
    clip.write(&path).unwrap();
    assert_eq!(MotionClip::read(&path).unwrap(), clip);
}

#[test]
fn resampling_keeps_duration_and_endpoints() {
    let clip = generate_motion(&MotionProgram::new(Verb::Walk, 1.0, 2.0), &Skeleton::human9(), 0.05).unwrap();
    let fine = clip.resample(0.01).unwrap();
    assert!((fine.duration() - clip.duration()).abs() < 1e-9);
    assert_eq!(fine.frames[0], clip.frames[0]);
    let last = fine.frames.last().unwrap();
    for (a, b) in last.q.iter().zip(&clip.frames.last().unwrap().q) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn corpus_is_labelled_and_deterministic() {
    let cfg = CorpusConfig::default();
    let a = build_corpus(&cfg).unwrap();
    assert_eq!(a.len(), cfg.verbs.len() * cfg.speeds.len() * cfg.seeds.len());
    assert_eq!(a, build_corpus(&cfg).unwrap());
    for c in &a {
        assert!(!c.command.is_empty());
        assert_eq!(c.clip.skeleton, Skeleton::human9());
    }
}

proptest! {
    #[test]
    fn fk_is_rigid_under_root_motion(x in -5.0f64..5.0, y in -5.0f64..5.0, th in -3.0f64..3.0, s in 0.0f64..1.0) {
        let sk = Skeleton::robot_d();
        let q: Vec<f64> = sk.links.iter().map(|l| l.limits[0] + s * (l.limits[1] - l.limits[0])).collect();
        let local = sk.fk(&RootPose::default(), &q).unwrap();
        let root = RootPose::new(x, y, th);
        let world = sk.fk(&root, &q).unwrap();
        for (a, b) in local.effectors.iter().zip(&world.effectors) {
            let back = to_root_frame(&root, *b);
            prop_assert!((back[0] - a[0]).abs() < 1e-9 && (back[1] - a[1]).abs() < 1e-9);
        }
        for (i, l) in sk.links.iter().enumerate() {
            let d = (world.link_end[i][0] - world.link_start[i][0]).hypot(world.link_end[i][1] - world.link_start[i][1]);
            prop_assert!((d - l.length).abs() < 1e-12);
        }
    }

    #[test]
    fn wrap_angle_lands_in_range(a in -100.0f64..100.0) {
        let w = wrap_angle(a);
        prop_assert!(w > -std::f64::consts::PI - 1e-12 && w <= std::f64::consts::PI + 1e-12);
        prop_assert!(((a - w) / std::f64::consts::TAU - ((a - w) / std::f64::consts::TAU).round()).abs() < 1e-9);
    }
}
