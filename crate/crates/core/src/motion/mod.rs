//! Skeletons, motion clips, forward kinematics, and the procedural motion
//! generator that stands in for a learned text-to-motion model.

mod clip;
mod program;
mod skeleton;

use std::f64::consts::{PI, TAU};

use thiserror::Error;

pub use clip::{slerp_angle, Frame, MotionClip, RootPose, CLIP_FORMAT_VERSION};
pub use program::{
    build_corpus, generate_motion, vocabulary, write_corpus, CorpusConfig, Heading, LabeledClip, MotionProgram, Side,
    Verb,
};
pub(crate) use skeleton::hex_digest;
pub use skeleton::{
    rotate, to_root_frame, BaseLink, ContactPoint, EndEffector, FkResult, Link, LinkPoint, Rod, Skeleton,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MotionError {
    #[error("expected {expected} joint angles, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("invalid motion program: {0}")]
    InvalidProgram(String),
    #[error("unknown verb {verb:?}; vocabulary: {}", vocabulary.join(", "))]
    UnknownVerb { verb: String, vocabulary: Vec<String> },
    #[error("corpus config: {0}")]
    Config(String),
    #[error("clip i/o: {0}")]
    Io(String),
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    if r <= -PI {
        r += TAU;
    }
    r
}
