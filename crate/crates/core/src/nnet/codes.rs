use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{Group, ParamId, ParamStore};
use crate::error::Result;

pub const ENV_CODE_DIM: usize = 64;
pub const POSE_CODE_DIM: usize = 128;

/// Per-video environment codes, per-frame root/body pose codes and the rest
/// body pose code.
#[derive(Clone, Debug)]
pub struct LatentCodes {
    pub env: ParamId,
    pub root: ParamId,
    pub body: ParamId,
    pub rest: ParamId,
    pub num_videos: usize,
    pub num_frames: usize,
}

impl LatentCodes {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        num_videos: usize,
        num_frames: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<LatentCodes> {
        let normal = Normal::new(0.0, std).unwrap();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(rng)).collect() };
        let env = store.add(
            &format!("{prefix}.env"),
            &[num_videos, ENV_CODE_DIM],
            Group::Code,
            draw(num_videos * ENV_CODE_DIM),
        )?;
        let root = store.add(
            &format!("{prefix}.root"),
            &[num_frames, POSE_CODE_DIM],
            Group::Code,
            draw(num_frames * POSE_CODE_DIM),
        )?;
        let body = store.add(
            &format!("{prefix}.body"),
            &[num_frames, POSE_CODE_DIM],
            Group::Code,
            draw(num_frames * POSE_CODE_DIM),
        )?;
        let rest = store.add(
            &format!("{prefix}.rest"),
            &[POSE_CODE_DIM],
            Group::Code,
            draw(POSE_CODE_DIM),
        )?;
        Ok(LatentCodes {
            env,
            root,
            body,
            rest,
            num_videos,
            num_frames,
        })
    }

    pub fn attach(store: &ParamStore, prefix: &str) -> Result<LatentCodes> {
        let env = store.require(&format!("{prefix}.env"))?;
        let root = store.require(&format!("{prefix}.root"))?;
        let body = store.require(&format!("{prefix}.body"))?;
        let rest = store.require(&format!("{prefix}.rest"))?;
        Ok(LatentCodes {
            num_videos: store.tensor(env).shape[0],
            num_frames: store.tensor(root).shape[0],
            env,
            root,
            body,
            rest,
        })
    }

    pub fn env_code<'a>(&self, store: &'a ParamStore, video: usize) -> &'a [f64] {
        &store.get(self.env)[video * ENV_CODE_DIM..(video + 1) * ENV_CODE_DIM]
    }

    pub fn root_code<'a>(&self, store: &'a ParamStore, frame: usize) -> &'a [f64] {
        &store.get(self.root)[frame * POSE_CODE_DIM..(frame + 1) * POSE_CODE_DIM]
    }

    pub fn body_code<'a>(&self, store: &'a ParamStore, frame: usize) -> &'a [f64] {
        &store.get(self.body)[frame * POSE_CODE_DIM..(frame + 1) * POSE_CODE_DIM]
    }

    pub fn rest_code<'a>(&self, store: &'a ParamStore) -> &'a [f64] {
        store.get(self.rest)
    }
}
