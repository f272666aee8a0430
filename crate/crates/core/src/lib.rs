//! Recovers an animatable implicit 3D model (canonical SDF, color, canonical
//! embedding and neural blend-skinning deformation) from multi-view image
//! sequences of an articulated object by differentiable volume rendering.

pub mod canonical;
pub mod config;
pub mod embed;
pub mod error;
pub mod fit;
pub mod geom;
pub mod gradcheck;
pub mod mesh;
pub mod model;
pub mod nnet;
pub mod objective;
pub mod render;
pub mod synth;
pub mod warp;

pub use config::{Ablations, FitConfig, LossWeights, RootInit};
pub use error::{Error, Result};
pub use fit::{eval_reconstruction, fit, iteration_budget, EvalReport, FitState};
pub use geom::{Aabb, Camera, Rigid, Se3, Vec3};
pub use mesh::TriMesh;
pub use model::Model;
pub use render::Image;
pub use synth::{Dataset, SceneScript};
