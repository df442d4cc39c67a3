//! Run configuration: line-based `key = value` text with `#` comments.
//! Every key is listed in [`RunConfig`]; unknown keys are rejected.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::codec::CodecConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rope::{RopeConfig, RopeMode};
use crate::sampler::{Guidance, GuidanceScope, SamplerConfig, SamplerMode};
use crate::toy::ToyProcess;
use crate::train::{EctMapCfg, EctPreset, NoiseSampler, OptimConfig, Stage1Cfg, Stage2Cfg};
use crate::vision::SceneFamily;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Frames and codec.
    pub frame_height: usize,
    pub frame_width: usize,
    pub patch: usize,
    pub pca_cev: f64,
    pub channels: usize,
    pub hop: usize,
    pub sample_rate: usize,
    pub sigma_data: f64,
    // Network.
    pub agg_width: usize,
    pub agg_heads: usize,
    pub c_v: usize,
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub head_blocks: usize,
    pub head_width: usize,
    pub init_seed: u64,
    // Toy process and scenes.
    pub beta: f64,
    pub sigma_n: f64,
    pub amplitude: f64,
    pub max_emitters: usize,
    pub periodic_share: f64,
    /// Frames per training clip; also the positional training window.
    pub clip_frames: usize,
    /// Clips rendered to fit the PCA and latent statistics.
    pub fit_clips: usize,
    pub data_seed: u64,
    // Optimization (shared by both stages).
    pub batch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub lr_warmup: u64,
    pub lr_decay_frac: f64,
    pub ema_rate: f64,
    pub train_seed: u64,
    pub t_draws: usize,
    pub checkpoint_every: u64,
    // Stage 1.
    pub s1_iters: u64,
    pub s1_lr: f64,
    pub s1_p_mean: f64,
    pub s1_p_std: f64,
    pub s1_dropout: f64,
    pub s1_cfg_dropout: f64,
    // Stage 2.
    pub s2_iters: u64,
    pub s2_lr: f64,
    pub s2_p_mean: f64,
    pub s2_p_std: f64,
    pub s2_dropout: f64,
    pub s2_cfg_dropout: f64,
    pub ect_preset: EctPreset,
    pub huber_nu: f64,
    pub head_only: bool,
    pub teacher_rate: f64,
    // Sampling.
    pub omega: f64,
    /// `latent`, `head` or `off`.
    pub guidance: String,
    pub guidance_scope: GuidanceScope,
    /// `diffusion` or `ect`.
    pub sampler: String,
    pub heun_steps: usize,
    pub cm_schedule: Vec<f64>,
    pub shared_noise: bool,
    pub streaming_decode: bool,
    pub sample_seed: u64,
    // Positions.
    pub rope_mode: RopeMode,
    pub rope_base: f64,
    /// Frames the sampler must support; 0 means `clip_frames`.
    pub n_target: usize,
    /// Sliding attention window in positions; 0 disables it.
    pub swa_window: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let toy = ToyProcess::default();
        let fam = SceneFamily::default();
        let o = OptimConfig::default();
        let s1 = Stage1Cfg::default();
        let s2 = Stage2Cfg::new(EctPreset::Cf, 1);
        Self {
            frame_height: m.frame_height,
            frame_width: m.frame_width,
            patch: m.patch,
            pca_cev: m.pca_cev,
            channels: m.codec.channels,
            hop: m.codec.hop,
            sample_rate: m.codec.sample_rate,
            sigma_data: m.sigma_data,
            agg_width: m.agg_width,
            agg_heads: m.agg_heads,
            c_v: m.c_v,
            depth: m.depth,
            d_model: m.d_model,
            heads: m.heads,
            head_blocks: m.head_blocks,
            head_width: m.head_width,
            init_seed: m.init_seed,
            beta: toy.beta,
            sigma_n: toy.sigma_n,
            amplitude: toy.amplitude,
            max_emitters: fam.max_emitters,
            periodic_share: fam.periodic_share,
            clip_frames: 24,
            fit_clips: 256,
            data_seed: 1,
            batch: o.batch,
            adam_beta1: o.beta1,
            adam_beta2: o.beta2,
            weight_decay: o.weight_decay,
            grad_clip: o.grad_clip,
            lr_warmup: o.lr_warmup,
            lr_decay_frac: o.lr_decay_frac,
            ema_rate: o.ema_rate,
            train_seed: o.seed,
            t_draws: s1.t_draws,
            checkpoint_every: 1000,
            s1_iters: 20_000,
            s1_lr: o.lr,
            s1_p_mean: s1.noise.p_mean,
            s1_p_std: s1.noise.p_std,
            s1_dropout: s1.dropout,
            s1_cfg_dropout: s1.cfg_dropout,
            s2_iters: 1000,
            s2_lr: 5e-5,
            s2_p_mean: s2.noise.p_mean,
            s2_p_std: s2.noise.p_std,
            s2_dropout: 0.0,
            s2_cfg_dropout: s2.cfg_dropout,
            ect_preset: EctPreset::Cf,
            huber_nu: s2.nu,
            head_only: false,
            teacher_rate: 0.0,
            omega: 3.0,
            guidance: "latent".into(),
            guidance_scope: GuidanceScope::Vision,
            sampler: "diffusion".into(),
            heun_steps: 30,
            cm_schedule: vec![5.0, 1.1, 0.08],
            shared_noise: false,
            streaming_decode: true,
            sample_seed: 0,
            rope_mode: RopeMode::None,
            rope_base: 10_000.0,
            n_target: 0,
            swa_window: 0,
        }
    }
}

fn parse_scalar(v: &str) -> Value {
    if v == "true" || v == "false" {
        return Value::Bool(v == "true");
    }
    if let Ok(i) = v.parse::<i64>() {
        return Value::from(i);
    }
    if let Ok(f) = v.parse::<f64>() {
        return Value::from(f);
    }
    Value::String(v.to_string())
}

fn parse_value(v: &str) -> Value {
    let v = v.trim();
    if let Some(inner) = v.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
        let items: Vec<Value> = inner.split(',').map(str::trim).filter(|s| !s.is_empty()).map(parse_scalar).collect();
        return Value::Array(items);
    }
    parse_scalar(v)
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. Lists use `[a, b]`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut obj = match serde_json::to_value(Self::default())? {
            Value::Object(m) => m,
            _ => unreachable!("a struct serializes to an object"),
        };
        let mut seen = Map::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let k = k.trim();
            if !obj.contains_key(k) {
                return Err(Error::Config(format!("line {}: unknown key {k:?}", no + 1)));
            }
            if seen.insert(k.to_string(), Value::Null).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", no + 1)));
            }
            obj.insert(k.to_string(), parse_value(v));
        }
        let cfg: Self = serde_json::from_value(Value::Object(obj)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every key in canonical form; parsing the output gives `self` back.
    pub fn to_text(&self) -> String {
        let Ok(Value::Object(m)) = serde_json::to_value(self) else {
            unreachable!("a struct serializes to an object")
        };
        let mut s = String::new();
        for (k, v) in m {
            let v = match v {
                Value::String(s) => s,
                Value::Array(items) => format!(
                    "[{}]",
                    items.iter().map(Value::to_string).collect::<Vec<_>>().join(", ")
                ),
                other => other.to_string(),
            };
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.clip_frames < 2 {
            return bad("clip_frames must be at least 2");
        }
        if self.batch == 0 || self.t_draws == 0 {
            return bad("batch and t_draws must be positive");
        }
        if !(self.s1_p_std > 0.0 && self.s2_p_std > 0.0) {
            return bad("noise P_std must be positive");
        }
        if !(0.0..=1.0).contains(&self.ema_rate) || !(0.0..=1.0).contains(&self.teacher_rate) {
            return bad("EMA rates must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.s1_dropout) || !(0.0..1.0).contains(&self.s2_dropout) {
            return bad("dropout rates must lie in [0, 1)");
        }
        if self.max_emitters == 0 {
            return bad("max_emitters must be positive");
        }
        if self.n_target != 0 && self.n_target < self.clip_frames {
            return bad("n_target may not be below clip_frames");
        }
        self.toy().validate()?;
        self.model().validate()?;
        self.sampler_config()?.validate()?;
        self.rope().validate(self.d_model / self.heads.max(1))?;
        Ok(())
    }

    /// 16 hex digits of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        short_hash(self.to_text().as_bytes())
    }

    /// Hash of the architecture-defining keys; checkpoints only load into
    /// configs with the same model hash.
    pub fn model_hash(&self) -> String {
        let m = serde_json::to_string(&self.model()).expect("model config serializes");
        short_hash(m.as_bytes())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            codec: CodecConfig {
                channels: self.channels,
                hop: self.hop,
                sample_rate: self.sample_rate,
            },
            frame_height: self.frame_height,
            frame_width: self.frame_width,
            patch: self.patch,
            pca_cev: self.pca_cev,
            agg_width: self.agg_width,
            agg_heads: self.agg_heads,
            c_v: self.c_v,
            depth: self.depth,
            d_model: self.d_model,
            heads: self.heads,
            head_blocks: self.head_blocks,
            head_width: self.head_width,
            sigma_data: self.sigma_data,
            init_seed: self.init_seed,
        }
    }

    pub fn toy(&self) -> ToyProcess {
        ToyProcess {
            beta: self.beta,
            sigma_n: self.sigma_n,
            amplitude: self.amplitude,
            hop: self.hop,
        }
    }

    pub fn family(&self) -> SceneFamily {
        SceneFamily {
            height: self.frame_height,
            width: self.frame_width,
            max_emitters: self.max_emitters,
            periodic_share: self.periodic_share,
            ..SceneFamily::default()
        }
    }

    pub fn optim(&self, stage: u8) -> OptimConfig {
        OptimConfig {
            batch: self.batch,
            lr: if stage == 1 { self.s1_lr } else { self.s2_lr },
            lr_warmup: self.lr_warmup,
            lr_decay_frac: self.lr_decay_frac,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            ema_rate: self.ema_rate,
            teacher_rate: self.teacher_rate,
            seed: self.train_seed ^ u64::from(stage),
        }
    }

    pub fn stage1(&self) -> Stage1Cfg {
        Stage1Cfg {
            noise: NoiseSampler {
                p_mean: self.s1_p_mean,
                p_std: self.s1_p_std,
            },
            t_draws: self.t_draws,
            cfg_dropout: self.s1_cfg_dropout,
            dropout: self.s1_dropout,
        }
    }

    pub fn stage2(&self) -> Stage2Cfg {
        Stage2Cfg {
            noise: NoiseSampler {
                p_mean: self.s2_p_mean,
                p_std: self.s2_p_std,
            },
            t_draws: self.t_draws,
            cfg_dropout: self.s2_cfg_dropout,
            dropout: self.s2_dropout,
            nu: self.huber_nu,
            map: EctMapCfg::preset(self.ect_preset, self.s2_iters),
            head_only: self.head_only,
        }
    }

    pub fn rope(&self) -> RopeConfig {
        RopeConfig {
            base: self.rope_base,
            mode: self.rope_mode,
            n_train: self.clip_frames,
            n_target: if self.n_target == 0 { self.clip_frames } else { self.n_target },
            swa_window: (self.swa_window > 0).then_some(self.swa_window),
        }
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        let guidance = match self.guidance.as_str() {
            "latent" => Guidance::Latent {
                omega: self.omega,
                scope: self.guidance_scope,
            },
            "head" => Guidance::Head { omega: self.omega },
            "off" => Guidance::Off,
            o => return Err(Error::Config(format!("unknown guidance {o:?}"))),
        };
        let mode = match self.sampler.as_str() {
            "diffusion" => SamplerMode::Diffusion { steps: self.heun_steps },
            "ect" => SamplerMode::Ect {
                schedule: self.cm_schedule.clone(),
            },
            o => return Err(Error::Config(format!("unknown sampler {o:?}"))),
        };
        Ok(SamplerConfig {
            guidance,
            mode,
            rope: self.rope(),
            streaming_decode: self.streaming_decode,
            shared_noise: self.shared_noise,
            seed: self.sample_seed,
        })
    }
}

pub fn short_hash(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
