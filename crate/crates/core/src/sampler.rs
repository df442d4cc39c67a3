//! Frame-level online generation: per frame, encode the new video frame,
//! advance the conditional and null streams, guide, then sample the next
//! latent with the head.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::KvCache;
use crate::codec::{Codec, DecoderState, Waveform};
use crate::diffusion::{cm_noise_draws, cm_sample_from, heun_sample, standard_normal, validate_cm_schedule, Denoiser};
use crate::error::{Error, Result};
use crate::head::{GuidedDenoiser, HeadDenoiser};
use crate::model::Model;
use crate::rope::RopeConfig;
use crate::scalar::Scalar;
use crate::tensor::Mat;
use crate::train::derive_seed;
use crate::vision::{condition_features, extract_grid, Frame};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SamplerMode {
    /// Heun integration over `steps` intervals.
    Diffusion { steps: usize },
    /// Consistency sampling; `schedule` lists the intermediate levels.
    Ect { schedule: Vec<f64> },
}

impl SamplerMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            SamplerMode::Diffusion { steps } if *steps == 0 => {
                Err(Error::Config("the Heun sampler needs at least one step".into()))
            }
            SamplerMode::Diffusion { .. } => Ok(()),
            SamplerMode::Ect { schedule } => validate_cm_schedule(schedule),
        }
    }

    /// Head evaluations per token on a single guidance path.
    pub fn nfe(&self) -> usize {
        match self {
            SamplerMode::Diffusion { steps } => 2 * steps - 1,
            SamplerMode::Ect { schedule } => 1 + schedule.len(),
        }
    }

    /// Standard few-step schedules.
    pub fn ect_with_nfe(nfe: usize) -> Result<Self> {
        let schedule = match nfe {
            1 => vec![],
            2 => vec![2.5],
            4 => vec![5.0, 1.1, 0.08],
            n => return Err(Error::Config(format!("no default consistency schedule for NFE {n}"))),
        };
        Ok(SamplerMode::Ect { schedule })
    }
}

/// Which backbone outputs the guidance combination applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceScope {
    /// Only the vision-position output; the audio-position half of `z`
    /// comes from the conditional stream.
    Vision,
    /// Both halves of `z`.
    Both,
}

impl std::str::FromStr for GuidanceScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vision" => Ok(GuidanceScope::Vision),
            "both" => Ok(GuidanceScope::Both),
            o => Err(Error::Config(format!("unknown guidance scope {o:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Guidance {
    /// Single conditional stream.
    Off,
    /// Guidance on backbone outputs: `omega * cond + (1 - omega) * null`.
    Latent { omega: f64, scope: GuidanceScope },
    /// Guidance inside the head's denoiser; doubles the head evaluations.
    Head { omega: f64 },
}

impl Guidance {
    pub fn omega(&self) -> Option<f64> {
        match *self {
            Guidance::Off => None,
            Guidance::Latent { omega, .. } | Guidance::Head { omega } => Some(omega),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub guidance: Guidance,
    pub mode: SamplerMode,
    pub rope: RopeConfig,
    pub streaming_decode: bool,
    pub shared_noise: bool,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(n_train: usize) -> Self {
        Self {
            guidance: Guidance::Latent {
                omega: 3.0,
                scope: GuidanceScope::Vision,
            },
            mode: SamplerMode::Diffusion { steps: 30 },
            rope: RopeConfig::plain(n_train),
            streaming_decode: false,
            shared_noise: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mode.validate()?;
        if let Some(w) = self.guidance.omega() {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("guidance scale {w} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Head evaluations per token, counting both guidance paths.
    pub fn nfe(&self) -> usize {
        let base = self.mode.nfe();
        match self.guidance {
            Guidance::Head { .. } => 2 * base,
            _ => base,
        }
    }
}

/// The conditioning produced for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition<T> {
    /// Guided `z_i` used by the default path.
    pub z: Vec<T>,
    /// Backbone output at the audio position (conditional stream).
    pub audio_cond: Vec<T>,
    /// Backbone output at the audio position (null stream), if present.
    pub audio_null: Option<Vec<T>>,
    pub vision_cond: Vec<T>,
    pub vision_null: Option<Vec<T>>,
}

fn combine<T: Scalar>(cond: &[T], null: &[T], omega: f64) -> Vec<T> {
    let (w, w1) = (T::of(omega), T::of(1.0 - omega));
    cond.iter().zip(null).map(|(&c, &n)| w * c + w1 * n).collect()
}

/// The two head conditionings of head-level guidance:
/// `[audio, vision_cond]` and `[audio, vision_null]`.
pub fn head_cfg_ablation<T: Scalar>(guidance: &Guidance, c: &Condition<T>) -> Result<(Vec<T>, Vec<T>)> {
    if !matches!(guidance, Guidance::Head { .. }) {
        return Err(Error::Config("head-level guidance is not enabled".into()));
    }
    let null = c
        .vision_null
        .as_ref()
        .ok_or_else(|| Error::Invalid("the condition has no null stream".into()))?;
    let cond = [c.audio_cond.as_slice(), c.vision_cond.as_slice()].concat();
    let uncond = [c.audio_cond.as_slice(), null.as_slice()].concat();
    Ok((cond, uncond))
}

/// Noise rows for one token: every draw the sampler will consume, in order.
fn token_noise<T: Scalar>(cfg: &SamplerConfig, c_x: usize, seed: u64) -> Vec<Mat<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = match &cfg.mode {
        SamplerMode::Diffusion { .. } => 1,
        SamplerMode::Ect { schedule } => cm_noise_draws(schedule, cfg.shared_noise),
    };
    (0..draws).map(|_| standard_normal(1, c_x, &mut rng)).collect()
}

/// Samples one latent per condition, row `r` using noise seeded by
/// `seeds[r]`. Returns the latents and the per-token NFE.
pub fn sample_tokens<T: Scalar>(
    model: &Model<T>,
    cfg: &SamplerConfig,
    conds: &[&Condition<T>],
    seeds: &[u64],
) -> Result<(Mat<T>, usize)> {
    let c_x = model.arch.c_x();
    let rows = conds.len();
    let per_row: Vec<Vec<Mat<T>>> = seeds.iter().map(|&s| token_noise(cfg, c_x, s)).collect();
    let draws = per_row.first().map_or(0, Vec::len);
    let noises: Vec<Mat<T>> = (0..draws)
        .map(|d| {
            let parts: Vec<&Mat<T>> = per_row.iter().map(|r| &r[d]).collect();
            Mat::vcat(&parts)
        })
        .collect::<Result<_>>()?;
    let stack = |zs: Vec<Vec<T>>| Mat::from_vec(rows, model.arch.z_dim(), zs.concat());
    let head = &model.arch.head;
    let run = |den: &mut dyn Denoiser<T>| -> Result<Mat<T>> {
        match &cfg.mode {
            SamplerMode::Diffusion { steps } => heun_sample(&mut DynDen(den), &noises[0], *steps),
            SamplerMode::Ect { schedule } => cm_sample_from(&mut DynDen(den), schedule, &noises),
        }
    };
    match cfg.guidance {
        Guidance::Head { omega } => {
            let pairs = conds
                .iter()
                .map(|c| head_cfg_ablation(&cfg.guidance, c))
                .collect::<Result<Vec<_>>>()?;
            let (zc, zu): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let mut den = GuidedDenoiser {
                cond: HeadDenoiser::new(head, &model.params, stack(zc)?),
                uncond: HeadDenoiser::new(head, &model.params, stack(zu)?),
                omega,
            };
            let x = run(&mut den)?;
            Ok((x, den.nfe()))
        }
        _ => {
            let mut den = HeadDenoiser::new(head, &model.params, stack(conds.iter().map(|c| c.z.clone()).collect())?);
            let x = run(&mut den)?;
            Ok((x, den.nfe()))
        }
    }
}

struct DynDen<'a, T>(&'a mut dyn Denoiser<T>);

impl<T: Scalar> Denoiser<T> for DynDen<'_, T> {
    fn denoise(&mut self, x: &Mat<T>, t: &[f64]) -> Result<Mat<T>> {
        self.0.denoise(x, t)
    }

    fn nfe(&self) -> usize {
        self.0.nfe()
    }
}

/// Per-frame record for manifests and latency measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub nfe: usize,
    /// Feeding `x_{i-1}` through sampling `x_i`, vision encoding included.
    #[serde(skip)]
    pub token_secs: f64,
    /// Incremental waveform decode of `x_i` (zero without streaming).
    #[serde(skip)]
    pub decode_secs: f64,
}

pub struct Generation<T> {
    /// Standardized latents, one row per frame.
    pub latents: Mat<T>,
    pub waveform: Waveform<T>,
    pub records: Vec<FrameRecord>,
}

/// One online generation stream with its own caches and decoder state.
pub struct GenerationSession<'m, T: Scalar> {
    model: &'m Model<T>,
    cfg: SamplerConfig,
    codec: Codec,
    cond: KvCache<T>,
    null: Option<KvCache<T>>,
    prev_x: Option<Vec<T>>,
    prev_grid: Option<Mat<f64>>,
    decoder: DecoderState,
    latents: Vec<Vec<T>>,
    chunks: Vec<Vec<T>>,
    records: Vec<FrameRecord>,
}

impl<'m, T: Scalar> GenerationSession<'m, T> {
    pub fn new(model: &'m Model<T>, cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        cfg.rope.validate(model.arch.backbone.cfg.head_dim())?;
        let codec = Codec::new(model.arch.cfg.codec.clone())?;
        let bb = &model.arch.backbone;
        Ok(Self {
            cond: bb.new_cache(),
            null: (cfg.guidance != Guidance::Off).then(|| bb.new_cache()),
            decoder: codec.decoder_state(),
            codec,
            model,
            cfg,
            prev_x: None,
            prev_grid: None,
            latents: Vec::new(),
            chunks: Vec::new(),
            records: Vec::new(),
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    /// Frames generated so far.
    pub fn frames(&self) -> usize {
        self.latents.len()
    }

    /// Positions held by each cache (equal for both streams).
    pub fn cache_lengths(&self) -> (usize, Option<usize>) {
        (self.cond.len(), self.null.as_ref().map(KvCache::len))
    }

    /// Rejects runs that would exceed the positional budget.
    pub fn check_budget(&self, extra_frames: usize) -> Result<()> {
        self.cfg.rope.check_positions(2 * (self.frames() + extra_frames))
    }

    /// Conditioned features of `frame` given the previous one.
    pub fn encode_frame(&mut self, frame: &Frame) -> Result<Mat<f64>> {
        let grid = self.model.pca.project_grid(&extract_grid(frame, self.model.arch.cfg.patch)?);
        let feat = condition_features(&grid, self.prev_grid.as_ref().unwrap_or(&grid))?;
        self.prev_grid = Some(grid);
        Ok(feat)
    }

    /// Advances both streams by the previous latent (or BOS) and the
    /// vision token of the current frame.
    pub fn condition(&mut self, features: &Mat<f64>) -> Result<Condition<T>> {
        let store = &self.model.params;
        let bb = &self.model.arch.backbone;
        let rope = &self.cfg.rope;
        let audio_tok = match &self.prev_x {
            None => bb.bos_row(store),
            Some(x) => bb.embed_audio_row(store, x),
        };
        let v = self.model.arch.aggregator.encode(store, std::slice::from_ref(features));
        let vis_tok = bb.embed_vision_row(store, v.row(0));
        let audio_cond = bb.forward_step(store, &audio_tok, &mut self.cond, rope)?;
        let vision_cond = bb.forward_step(store, &vis_tok, &mut self.cond, rope)?;
        let (audio_null, vision_null) = match self.null.as_mut() {
            Some(cache) => {
                let null_tok = bb.embed_vision_row(store, &bb.null_row(store));
                let a = bb.forward_step(store, &audio_tok, cache, rope)?;
                let n = bb.forward_step(store, &null_tok, cache, rope)?;
                (Some(a), Some(n))
            }
            None => (None, None),
        };
        let z = match (self.cfg.guidance, &audio_null, &vision_null) {
            (Guidance::Latent { omega, scope }, Some(an), Some(vn)) => {
                let a = match scope {
                    GuidanceScope::Vision => audio_cond.clone(),
                    GuidanceScope::Both => combine(&audio_cond, an, omega),
                };
                [a, combine(&vision_cond, vn, omega)].concat()
            }
            _ => [audio_cond.as_slice(), vision_cond.as_slice()].concat(),
        };
        Ok(Condition {
            z,
            audio_cond,
            audio_null,
            vision_cond,
            vision_null,
        })
    }

    /// Seed of the noise used for the next frame.
    pub fn frame_seed(&self) -> u64 {
        derive_seed(self.cfg.seed, self.frames() as u64)
    }

    /// Stores a sampled latent; decodes it when streaming. Returns the
    /// decode time in seconds.
    pub fn commit(&mut self, x: Vec<T>) -> Result<f64> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite latent at frame {}", self.frames() + 1)));
        }
        let mut secs = 0.0;
        if self.cfg.streaming_decode {
            let start = Instant::now();
            let (chunk, state) = self.codec.decode_incremental(&x, &self.model.stats, self.decoder)?;
            secs = start.elapsed().as_secs_f64();
            self.decoder = state;
            self.chunks.push(chunk);
        }
        self.prev_x = Some(x.clone());
        self.latents.push(x);
        Ok(secs)
    }

    /// Generates the latent for conditioned features of the next frame.
    pub fn step_features(&mut self, features: &Mat<f64>) -> Result<&FrameRecord> {
        let start = Instant::now();
        self.step_inner(start, features.clone())
    }

    /// Generates the latent for the next video frame.
    pub fn step(&mut self, frame: &Frame) -> Result<&FrameRecord> {
        let start = Instant::now();
        let feat = self.encode_frame(frame)?;
        self.step_inner(start, feat)
    }

    fn step_inner(&mut self, start: Instant, feat: Mat<f64>) -> Result<&FrameRecord> {
        let c = self.condition(&feat)?;
        let seed = self.frame_seed();
        let (x, nfe) = sample_tokens(self.model, &self.cfg, &[&c], &[seed])?;
        let token_secs = start.elapsed().as_secs_f64();
        let decode_secs = self.commit(x.into_vec())?;
        self.records.push(FrameRecord {
            frame: self.frames() - 1,
            nfe,
            token_secs,
            decode_secs,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    /// Continues the session over further frames with caches intact.
    pub fn continue_generation(&mut self, frames: &[Frame]) -> Result<()> {
        self.check_budget(frames.len())?;
        for f in frames {
            self.step(f)?;
        }
        Ok(())
    }

    pub fn latents(&self) -> Result<Mat<T>> {
        Mat::from_rows(&self.latents)
    }

    pub fn finish(self) -> Result<Generation<T>> {
        let latents = Mat::from_rows(&self.latents)?;
        let waveform = if self.cfg.streaming_decode {
            let (ch, hop) = (self.codec.config().channels, self.codec.config().hop);
            let n = self.chunks.len();
            let mut samples = Mat::zeros(ch, n * hop);
            for (f, chunk) in self.chunks.iter().enumerate() {
                for c in 0..ch {
                    samples.row_mut(c)[f * hop..(f + 1) * hop].copy_from_slice(&chunk[c * hop..(c + 1) * hop]);
                }
            }
            Waveform {
                sample_rate: self.codec.config().sample_rate,
                samples,
            }
        } else {
            let seq = crate::codec::AudioLatentSeq {
                latents: latents.clone(),
                frame_rate: self.codec.config().frame_rate(),
            };
            self.codec.decode(&seq, &self.model.stats)?
        };
        Ok(Generation {
            latents,
            waveform,
            records: self.records,
        })
    }
}

/// Online generation over a whole clip.
pub fn generate<T: Scalar>(model: &Model<T>, frames: &[Frame], cfg: &SamplerConfig) -> Result<Generation<T>> {
    let mut s = GenerationSession::new(model, cfg.clone())?;
    s.continue_generation(frames)?;
    s.finish()
}

/// Runs independent sessions in lockstep, batching the head across clips.
/// Clip `k` uses `cfg.seed` replaced by `seeds[k]`. Returns standardized
/// latents per clip.
pub fn generate_batch<T: Scalar>(
    model: &Model<T>,
    clips: &[Vec<Mat<f64>>],
    cfg: &SamplerConfig,
    seeds: &[u64],
) -> Result<Vec<Mat<T>>> {
    if clips.len() != seeds.len() {
        return Err(Error::Shape("one seed per clip is required".into()));
    }
    let n = clips.first().map_or(0, Vec::len);
    if clips.iter().any(|c| c.len() != n) {
        return Err(Error::Shape("batched clips must have equal length".into()));
    }
    let mut sessions = seeds
        .iter()
        .map(|&seed| {
            GenerationSession::new(
                model,
                SamplerConfig {
                    seed,
                    streaming_decode: false,
                    ..cfg.clone()
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(s) = sessions.first() {
        s.check_budget(n)?;
    }
    for i in 0..n {
        let conds = sessions
            .iter_mut()
            .zip(clips)
            .map(|(s, c)| s.condition(&c[i]))
            .collect::<Result<Vec<_>>>()?;
        let frame_seeds: Vec<u64> = sessions.iter().map(GenerationSession::frame_seed).collect();
        let refs: Vec<&Condition<T>> = conds.iter().collect();
        let (x, _) = sample_tokens(model, cfg, &refs, &frame_seeds)?;
        for (r, s) in sessions.iter_mut().enumerate() {
            s.commit(x.row(r).to_vec())?;
        }
    }
    sessions.iter().map(GenerationSession::latents).collect()
}
