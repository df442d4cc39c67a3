#![allow(dead_code)]

use framesonic::checkpoint::Preprocess;
use framesonic::config::RunConfig;
use framesonic::model::{Arch, Model, TrainClip};
use framesonic::params::ParamStore;
use framesonic::pipeline;
use framesonic::scalar::Scalar;
use framesonic::vision::render;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A configuration small enough for exhaustive checks: 16x16 frames,
/// two-dimensional latents, one backbone layer.
pub fn tiny_config() -> RunConfig {
    RunConfig {
        frame_height: 16,
        frame_width: 16,
        patch: 8,
        hop: 1,
        agg_width: 4,
        agg_heads: 1,
        c_v: 4,
        depth: 1,
        d_model: 8,
        heads: 2,
        head_blocks: 1,
        head_width: 8,
        fit_clips: 8,
        clip_frames: 6,
        batch: 2,
        ..RunConfig::default()
    }
}

pub fn setup<T: Scalar>(cfg: &RunConfig) -> (Preprocess, Arch, ParamStore<T>) {
    let pre = pipeline::preprocess(cfg).unwrap();
    let (arch, params) = Arch::init::<T>(&cfg.model(), pre.pca.dim()).unwrap();
    (pre, arch, params)
}

/// Adds uniform noise to every parameter, so zero-initialized gates and
/// output layers stop hiding whole subnetworks.
pub fn perturb<T: Scalar>(store: &mut ParamStore<T>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        for v in t.as_mut_slice() {
            *v += T::of(rng.random_range(-scale..scale));
        }
    }
}

pub fn model<T: Scalar>(arch: &Arch, params: ParamStore<T>, pre: &Preprocess) -> Model<T> {
    Model {
        arch: arch.clone(),
        params,
        stats: pre.stats.clone(),
        pca: pre.pca.clone(),
    }
}

/// Training clips drawn from the configured scene family.
pub fn clips(cfg: &RunConfig, pre: &Preprocess, count: usize, frames: usize, seed: u64) -> Vec<TrainClip> {
    let fam = cfg.family();
    let toy = cfg.toy();
    (0..count)
        .map(|k| {
            let r = render(&fam.sample(seed * 1000 + k as u64, frames), &toy).unwrap();
            pre.train_clip(&r, cfg.patch).unwrap()
        })
        .collect()
}

/// Bitwise fingerprint of a parameter store.
pub fn fingerprint<T: Scalar>(store: &ParamStore<T>) -> Vec<u64> {
    store.flatten().iter().map(|v| v.as_f64().to_bits()).collect()
}
