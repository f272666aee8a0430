//! Synthetic articulated scenes with analytic ground truth: capsule
//! assemblies driven by scripted hinges, rendered by exact ray casting.

mod dataset;
mod oracle;
mod script;

pub use dataset::{Dataset, FrameObservation, GT_POINTS};
pub use oracle::{FeatureMap, FramePose, Hit, OracleFrame, FLOW_OFFSETS};
pub use script::{Capsule, Hinge, SceneScript, VideoScript};

/// Names accepted by [`SceneScript::fixture`].
pub const FIXTURES: [&str; 3] = ["pendulum", "quadruped", "rigid-sphere"];
