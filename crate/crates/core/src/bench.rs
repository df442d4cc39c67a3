//! Per-frame latency measurement: warm-up clips and each clip's first
//! frame are excluded, statistics are taken over per-clip means.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::sampler::{GenerationSession, SamplerConfig};
use crate::scalar::Scalar;
use crate::vision::Frame;

pub const WARMUP_CLIPS: usize = 3;

/// Timing of one frame in seconds. `waveform` covers the token region plus
/// the incremental decode, so it is never smaller than `token`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub token: f64,
    pub waveform: f64,
}

/// Something that can generate a clip frame by frame under timing.
pub trait ClipRunner {
    fn clips(&self) -> usize;
    /// Runs clip `k` from a fresh state, timing every frame.
    fn run_clip(&mut self, k: usize) -> Result<Vec<FrameTiming>>;
}

/// Real sessions over pre-rendered clips, with streaming decode on.
pub struct SessionRunner<'m, T: Scalar> {
    pub model: &'m Model<T>,
    pub cfg: SamplerConfig,
    pub clips: Vec<Vec<Frame>>,
}

impl<T: Scalar> ClipRunner for SessionRunner<'_, T> {
    fn clips(&self) -> usize {
        self.clips.len()
    }

    fn run_clip(&mut self, k: usize) -> Result<Vec<FrameTiming>> {
        let cfg = SamplerConfig {
            streaming_decode: true,
            ..self.cfg.clone()
        };
        let mut s = GenerationSession::new(self.model, cfg)?;
        s.check_budget(self.clips[k].len())?;
        let mut out = Vec::with_capacity(self.clips[k].len());
        for f in &self.clips[k] {
            let r = s.step(f)?;
            out.push(FrameTiming {
                token: r.token_secs,
                waveform: r.token_secs + r.decode_secs,
            });
        }
        Ok(out)
    }
}

/// Spins for a fixed time per frame; the decode adds `decode` more.
pub struct BusyWaitRunner {
    pub clips: usize,
    pub frames: usize,
    pub token: Duration,
    pub decode: Duration,
}

fn spin(d: Duration) -> f64 {
    let start = Instant::now();
    while start.elapsed() < d {
        std::hint::spin_loop();
    }
    start.elapsed().as_secs_f64()
}

impl ClipRunner for BusyWaitRunner {
    fn clips(&self) -> usize {
        self.clips
    }

    fn run_clip(&mut self, _k: usize) -> Result<Vec<FrameTiming>> {
        Ok((0..self.frames)
            .map(|_| {
                let token = spin(self.token);
                let decode = spin(self.decode);
                FrameTiming {
                    token,
                    waveform: token + decode,
                }
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean_ms: f64,
    pub std_ms: f64,
}

impl MeanStd {
    fn of(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean_ms: mean,
            std_ms: var.sqrt(),
        }
    }

    /// Half-width of a normal 95% interval for the mean.
    pub fn ci95(&self, n: usize) -> f64 {
        1.96 * self.std_ms / (n as f64).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipLatency {
    pub token_ms: f64,
    pub waveform_ms: f64,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub token_level: MeanStd,
    pub waveform_level: MeanStd,
    pub per_clip: Vec<ClipLatency>,
    pub nfe: usize,
    pub config_hash: String,
    pub warmup_clips: usize,
    /// All timed frames of measured clips, first frames included, for CSV.
    #[serde(skip)]
    pub frames_ms: Vec<Vec<FrameTiming>>,
}

impl LatencyReport {
    /// `clip,frame,token_ms,waveform_ms,excluded` rows for every measured clip.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("clip,frame,token_ms,waveform_ms,excluded\n");
        for (c, frames) in self.frames_ms.iter().enumerate() {
            for (i, f) in frames.iter().enumerate() {
                s.push_str(&format!("{c},{},{:.6},{:.6},{}\n", i + 1, f.token, f.waveform, i == 0));
            }
        }
        s
    }
}

/// Smallest observable step of the monotonic clock.
pub fn clock_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..20 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

pub fn measure(runner: &mut dyn ClipRunner, nfe: usize, config_hash: &str) -> Result<LatencyReport> {
    let n = runner.clips();
    if n < WARMUP_CLIPS + 1 {
        return Err(Error::Config(format!(
            "latency measurement needs at least {} clips ({WARMUP_CLIPS} warm-up), got {n}",
            WARMUP_CLIPS + 1
        )));
    }
    if clock_resolution() > Duration::from_micros(100) {
        log::warn!("monotonic clock is coarser than 0.1 ms");
    }
    for k in 0..WARMUP_CLIPS {
        runner.run_clip(k)?;
    }
    let mut per_clip = Vec::new();
    let mut frames_ms = Vec::new();
    for k in WARMUP_CLIPS..n {
        let t: Vec<FrameTiming> = runner
            .run_clip(k)?
            .into_iter()
            .map(|f| FrameTiming {
                token: f.token * 1e3,
                waveform: f.waveform * 1e3,
            })
            .collect();
        if t.len() < 2 {
            return Err(Error::Data(format!("clip {k} has no frames after the first")));
        }
        let rest = &t[1..];
        per_clip.push(ClipLatency {
            token_ms: rest.iter().map(|f| f.token).sum::<f64>() / rest.len() as f64,
            waveform_ms: rest.iter().map(|f| f.waveform).sum::<f64>() / rest.len() as f64,
            frames: rest.len(),
        });
        frames_ms.push(t);
    }
    let tok: Vec<f64> = per_clip.iter().map(|c| c.token_ms).collect();
    let wav: Vec<f64> = per_clip.iter().map(|c| c.waveform_ms).collect();
    Ok(LatencyReport {
        token_level: MeanStd::of(&tok),
        waveform_level: MeanStd::of(&wav),
        per_clip,
        nfe,
        config_hash: config_hash.to_string(),
        warmup_clips: WARMUP_CLIPS,
        frames_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn busy_wait_recovered() {
        let mut r = BusyWaitRunner {
            clips: 6,
            frames: 5,
            token: Duration::from_millis(2),
            decode: Duration::from_micros(500),
        };
        let rep = measure(&mut r, 1, "x").unwrap();
        assert_eq!(rep.per_clip.len(), 3);
        assert!(rep.per_clip.iter().all(|c| c.frames == 4));
        // Preemption can only lengthen a busy wait.
        let m = rep.token_level.mean_ms;
        assert!((1.99..6.0).contains(&m), "{rep:?}");
        assert!(rep.per_clip.iter().all(|c| c.waveform_ms >= c.token_ms));
        assert_eq!(rep.to_csv().lines().count(), 1 + 3 * 5);
    }

    #[test]
    fn too_few_clips_rejected() {
        let mut r = BusyWaitRunner {
            clips: 3,
            frames: 3,
            token: Duration::ZERO,
            decode: Duration::ZERO,
        };
        assert!(matches!(measure(&mut r, 1, ""), Err(Error::Config(_))));
    }
}
