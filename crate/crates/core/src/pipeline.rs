//! End-to-end wiring from a [`RunConfig`] to trained models.

use crate::checkpoint::{CheckpointMeta, Preprocess};
use crate::config::RunConfig;
use crate::dataset::{fit_preprocess, FamilySource};
use crate::error::{Error, Result};
use crate::model::{Arch, Model};
use crate::scalar::Scalar;
use crate::train::{train, Objective, StepLog, TrainState};

pub fn preprocess(cfg: &RunConfig) -> Result<Preprocess> {
    fit_preprocess(
        &cfg.family(),
        &cfg.toy(),
        cfg.fit_clips,
        cfg.clip_frames,
        cfg.data_seed,
        cfg.patch,
        cfg.pca_cev,
    )
}

/// Fresh Stage-1 state.
pub fn init_state<T: Scalar>(cfg: &RunConfig, pre: &Preprocess) -> Result<(Arch, TrainState<T>)> {
    let (arch, params) = Arch::init::<T>(&cfg.model(), pre.pca.dim())?;
    Ok((arch, TrainState::fresh(params, &cfg.optim(1))))
}

pub fn source(cfg: &RunConfig, pre: &Preprocess, stage: u8) -> FamilySource {
    FamilySource {
        family: cfg.family(),
        toy: cfg.toy(),
        pre: pre.clone(),
        frames: cfg.clip_frames,
        patch: cfg.patch,
        seed: cfg.data_seed ^ (0x5EED_0000 + u64::from(stage)),
    }
}

pub fn meta(cfg: &RunConfig) -> CheckpointMeta {
    CheckpointMeta {
        model_hash: cfg.model_hash(),
        config_hash: cfg.hash(),
        config_text: cfg.to_text(),
    }
}

/// Trains `state` through its stage's iteration budget.
pub fn run_stage<T: Scalar>(
    cfg: &RunConfig,
    arch: &Arch,
    state: &mut TrainState<T>,
    pre: &Preprocess,
    on_step: impl FnMut(&StepLog, &TrainState<T>) -> Result<()>,
) -> Result<()> {
    let (objective, total) = match state.stage {
        1 => (Objective::Stage1(cfg.stage1()), cfg.s1_iters),
        2 => (Objective::Stage2(cfg.stage2()), cfg.s2_iters),
        s => return Err(Error::Invalid(format!("unknown stage {s}"))),
    };
    let mut src = source(cfg, pre, state.stage);
    train(arch, state, &mut src, &objective, &cfg.optim(state.stage), total, &cfg.rope(), on_step)
}

/// Stage-2 start from a finished Stage-1 state.
pub fn begin_stage2<T: Scalar>(cfg: &RunConfig, stage1: &TrainState<T>) -> Result<TrainState<T>> {
    if stage1.stage != 1 {
        return Err(Error::Config("consistency tuning must start from a Stage-1 checkpoint".into()));
    }
    Ok(TrainState::from_stage1(stage1, &cfg.optim(2)))
}

/// The sampling model (EMA weights) of a state.
pub fn sampling_model<T: Scalar>(arch: &Arch, state: &TrainState<T>, pre: &Preprocess) -> Model<T> {
    Model {
        arch: arch.clone(),
        params: state.ema.clone(),
        stats: pre.stats.clone(),
        pca: pre.pca.clone(),
    }
}
