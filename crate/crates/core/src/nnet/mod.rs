//! Coordinate-network machinery: positional encoding, small MLPs with
//! reverse-mode gradients, the parameter store and Adam.

mod checkpoint;
mod codes;
mod encoding;
mod mlp;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use codes::{LatentCodes, ENV_CODE_DIM, POSE_CODE_DIM};
pub use encoding::{
    encoded_width, positional_encode, positional_encode_backward, positional_encode_into,
};
pub use mlp::{Activation, Init, Mlp, MlpSpec, MlpTape};
pub use params::{Adam, Grads, Group, ParamId, ParamStore, Tensor};
