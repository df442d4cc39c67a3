//! Evaluation procedures against the toy oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::checkpoint::Preprocess;
use crate::diffusion::{cm_sample_from, heun_sample, standard_normal};
use crate::error::{Error, Result};
use crate::head::HeadDenoiser;
use crate::metrics::{conditional_match, event_lag, pan_energies, ConditionalMatch};
use crate::model::{Model, TrainClip};
use crate::rope::RopeConfig;
use crate::sampler::{generate_batch, SamplerConfig, SamplerMode};
use crate::scalar::Scalar;
use crate::tensor::Mat;
use crate::toy::ToyProcess;
use crate::train::derive_seed;
use crate::vision::{render, RenderedClip, SceneFamily, SceneSpec};

/// A rendered clip together with its model inputs.
pub struct EvalClip {
    pub rendered: RenderedClip,
    pub input: TrainClip,
}

pub fn eval_clips(specs: &[SceneSpec], toy: &ToyProcess, pre: &Preprocess, patch: usize) -> Result<Vec<EvalClip>> {
    specs
        .iter()
        .map(|s| {
            let rendered = render(s, toy)?;
            let input = pre.train_clip(&rendered, patch)?;
            Ok(EvalClip { rendered, input })
        })
        .collect()
}

/// `count` scenes from `family`, seeded independently of training.
pub fn test_scenes(family: &SceneFamily, count: usize, frames: usize, seed: u64) -> Vec<SceneSpec> {
    (0..count).map(|k| family.sample(derive_seed(seed ^ 0x7E57, k as u64), frames)).collect()
}

/// Teacher-forced conditions of every frame, `(clips * n) x z_dim`, without
/// vision dropout.
pub fn teacher_forced_z<T: Scalar>(model: &Model<T>, clips: &[&TrainClip], rope: &RopeConfig) -> Result<Mat<T>> {
    let owned: Vec<TrainClip> = clips.iter().map(|c| (*c).clone()).collect();
    let mut g = Graph::new(&model.params);
    let z = model.arch.conditions(&mut g, &owned, &vec![false; owned.len()], rope, &mut None)?;
    Ok(g.value(z).clone())
}

/// Head samples for one batch of conditions under `mode`.
pub fn head_samples<T: Scalar>(model: &Model<T>, z: Mat<T>, mode: &SamplerMode, rng: &mut ChaCha8Rng) -> Result<Mat<T>> {
    let rows = z.rows();
    let c_x = model.arch.c_x();
    let mut den = HeadDenoiser::new(&model.arch.head, &model.params, z);
    match mode {
        SamplerMode::Diffusion { steps } => {
            let noise = standard_normal(rows, c_x, rng);
            heun_sample(&mut den, &noise, *steps)
        }
        SamplerMode::Ect { schedule } => {
            let noises: Vec<Mat<T>> = (0..=schedule.len()).map(|_| standard_normal(rows, c_x, rng)).collect();
            cm_sample_from(&mut den, schedule, &noises)
        }
    }
}

/// Picks `count` `(clip, frame)` contexts, alternating frames with and
/// without events.
pub fn pick_contexts(clips: &[EvalClip], count: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut guard = 0;
    while out.len() < count && guard < 1_000_000 {
        guard += 1;
        let c = rng.random_range(0..clips.len());
        let ev = &clips[c].rendered.track.events;
        let i = rng.random_range(1..ev.len());
        let want_event = out.len() % 2 == 0;
        if ev[i].iter().any(|&e| e) == want_event {
            out.push((c, i));
        }
    }
    out
}

/// Conditional oracle match at fixed contexts: `samples` head draws per
/// context against the closed-form law, in standardized units.
pub fn oracle_match<T: Scalar>(
    model: &Model<T>,
    toy: &ToyProcess,
    clips: &[EvalClip],
    contexts: &[(usize, usize)],
    samples: usize,
    mode: &SamplerMode,
    rope: &RopeConfig,
    seed: u64,
) -> Result<ConditionalMatch> {
    if contexts.is_empty() {
        return Err(Error::Invalid("no contexts to evaluate".into()));
    }
    let n = clips[0].input.len();
    let mut used: Vec<usize> = contexts.iter().map(|c| c.0).collect();
    used.sort_unstable();
    used.dedup();
    let refs: Vec<&TrainClip> = used.iter().map(|&c| &clips[c].input).collect();
    let z_all = teacher_forced_z(model, &refs, rope)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stats = &model.stats;
    let mut sample_sets = Vec::with_capacity(contexts.len());
    let mut means = Vec::with_capacity(contexts.len());
    // Batches of contexts keep the head calls large but bounded.
    for chunk in contexts.chunks(8) {
        let mut idx = Vec::with_capacity(chunk.len() * samples);
        for &(c, i) in chunk {
            let slot = used.binary_search(&c).expect("context clip is in the batch");
            idx.extend(std::iter::repeat(slot * n + i).take(samples));
        }
        let x = head_samples(model, z_all.select_rows(&idx), mode, &mut rng)?.cast::<f64>();
        for (k, &(c, i)) in chunk.iter().enumerate() {
            sample_sets.push(x.slice_rows(k * samples, (k + 1) * samples));
            let clip = &clips[c];
            let prev_std = clip.input.latents.row(i - 1).to_vec();
            let fired = &clip.rendered.track.events[i];
            let (mean, _) = toy.standardized_conditional(&prev_std, fired, &clip.rendered.track.emitter_list(), stats);
            means.push(mean);
        }
    }
    conditional_match(&sample_sets, &means, toy.sigma_n / stats.scale)
}

/// Online generation for every clip (one seed each); raw latents.
pub fn generate_raw<T: Scalar>(model: &Model<T>, clips: &[EvalClip], cfg: &SamplerConfig, batch: usize) -> Result<Vec<Mat<f64>>> {
    let mut out = Vec::with_capacity(clips.len());
    for (b, chunk) in clips.chunks(batch.max(1)).enumerate() {
        let feats: Vec<Vec<Mat<f64>>> = chunk.iter().map(|c| c.input.features.clone()).collect();
        let seeds: Vec<u64> = (0..chunk.len()).map(|k| derive_seed(cfg.seed, (b * batch + k) as u64)).collect();
        for lat in generate_batch(model, &feats, cfg, &seeds)? {
            out.push(destandardize(&lat.cast::<f64>(), model));
        }
    }
    Ok(out)
}

pub fn destandardize<T: Scalar>(std: &Mat<f64>, model: &Model<T>) -> Mat<f64> {
    let mut out = std.clone();
    for i in 0..std.rows() {
        out.row_mut(i).copy_from_slice(&model.stats.destandardize(std.row(i)));
    }
    out
}

/// One row per clip: the flattened standardized sequence.
pub fn clip_features<T: Scalar>(raws: &[Mat<f64>], model: &Model<T>) -> Result<Mat<f64>> {
    let rows: Vec<Vec<f64>> = raws
        .iter()
        .map(|r| (0..r.rows()).flat_map(|i| model.stats.standardize(r.row(i))).collect())
        .collect();
    Mat::from_rows(&rows)
}

/// Mean oracle negative log density per frame.
pub fn oracle_nll(raws: &[Mat<f64>], clips: &[EvalClip], toy: &ToyProcess) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    for (x, c) in raws.iter().zip(clips) {
        let em = c.rendered.track.emitter_list();
        let mut prev = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            acc += toy.oracle_nll(x.row(i), &prev, &c.rendered.track.events[i], &em);
            prev = x.row(i).to_vec();
            count += 1;
        }
    }
    acc / count.max(1) as f64
}

pub fn lag_of(raws: &[Mat<f64>], clips: &[EvalClip], toy: &ToyProcess, max_lag: usize) -> Result<i64> {
    let pairs: Vec<_> = raws.iter().zip(clips).map(|(r, c)| (r, &c.rendered.track)).collect();
    event_lag(&pairs, toy, max_lag)
}

/// Pan asymmetry per pan position among single-emitter clips:
/// `(position, A_generated, A_oracle)`.
pub fn pan_table(raws: &[Mat<f64>], clips: &[EvalClip], toy: &ToyProcess) -> Vec<(f64, f64, f64)> {
    let mut out = Vec::new();
    for p in crate::vision::PAN_GRID {
        let (mut gl, mut gr, mut ol, mut or) = (0.0, 0.0, 0.0, 0.0);
        for (r, c) in raws.iter().zip(clips) {
            let t = &c.rendered.track;
            if t.positions.len() == 1 && t.positions[0] == p {
                let (a, b) = pan_energies(r, t, toy);
                let (oa, ob) = pan_energies(&c.rendered.latents, t, toy);
                gl += a;
                gr += b;
                ol += oa;
                or += ob;
            }
        }
        if ol + or > 0.0 {
            out.push((p, crate::metrics::pan_asymmetry(gl, gr), crate::metrics::pan_asymmetry(ol, or)));
        }
    }
    out
}
