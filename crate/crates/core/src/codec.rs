//! Exactly invertible frame codec: an orthonormal DCT-II over each hop of
//! each channel, channel coefficient blocks concatenated, then a global
//! standardization.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;

pub const SIGMA_DATA: f64 = 0.5;
const WAV_MAGIC: &[u8; 8] = b"FRWAV1\0\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub channels: usize,
    pub hop: usize,
    pub sample_rate: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            channels: 2,
            hop: 16,
            sample_rate: 480,
        }
    }
}

impl CodecConfig {
    pub fn latent_dim(&self) -> usize {
        self.channels * self.hop
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }
}

/// `channels x T` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform<T> {
    pub sample_rate: usize,
    pub samples: Mat<T>,
}

impl<T: Scalar> Waveform<T> {
    pub fn channels(&self) -> usize {
        self.samples.rows()
    }

    pub fn len(&self) -> usize {
        self.samples.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.cols() == 0
    }
}

/// `n x c_x` frame latents.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioLatentSeq<T> {
    pub latents: Mat<T>,
    pub frame_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecStats {
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl CodecStats {
    /// Zero mean, unit scale: standardization is the identity.
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: 1.0,
        }
    }

    pub fn standardize<T: Scalar>(&self, raw: &[T]) -> Vec<T> {
        raw.iter()
            .zip(&self.mean)
            .map(|(&x, &m)| T::of((x.as_f64() - m) / self.scale))
            .collect()
    }

    pub fn destandardize<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        x.iter()
            .zip(&self.mean)
            .map(|(&v, &m)| T::of(v.as_f64() * self.scale + m))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Codec {
    cfg: CodecConfig,
    /// `hop x hop`, row `k` is the k-th orthonormal cosine basis vector.
    basis: Vec<f64>,
}

impl Codec {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        if cfg.channels == 0 || cfg.hop == 0 || cfg.sample_rate == 0 {
            return Err(Error::Config(format!("degenerate codec config {cfg:?}")));
        }
        let n = cfg.hop;
        let mut basis = vec![0.0; n * n];
        for k in 0..n {
            let a = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            for t in 0..n {
                basis[k * n + t] = a * (std::f64::consts::PI * (t as f64 + 0.5) * k as f64 / n as f64).cos();
            }
        }
        Ok(Self { cfg, basis })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim()
    }

    /// The waveform frame whose unstandardized latent is `e_index`.
    pub fn basis_frame(&self, index: usize) -> Vec<f64> {
        let hop = self.cfg.hop;
        let (ch, k) = (index / hop, index % hop);
        let mut out = vec![0.0; self.cfg.channels * hop];
        out[ch * hop..(ch + 1) * hop].copy_from_slice(&self.basis[k * hop..(k + 1) * hop]);
        out
    }

    fn check_waveform<T: Scalar>(&self, w: &Waveform<T>) -> Result<usize> {
        if w.channels() != self.cfg.channels {
            return Err(Error::Shape(format!(
                "waveform has {} channels, codec expects {}",
                w.channels(),
                self.cfg.channels
            )));
        }
        let len = w.len();
        if len % self.cfg.hop != 0 {
            return Err(Error::FrameBoundary {
                len,
                hop: self.cfg.hop,
                boundary: len / self.cfg.hop * self.cfg.hop,
            });
        }
        if !w.samples.all_finite() {
            return Err(Error::Data("waveform contains non-finite samples".into()));
        }
        Ok(len / self.cfg.hop)
    }

    /// Unstandardized transform of a single frame (`channels x hop` samples
    /// given channel-major).
    pub fn analyze_frame<T: Scalar>(&self, frame: &[T]) -> Vec<T> {
        let hop = self.cfg.hop;
        let mut out = vec![T::zero(); self.latent_dim()];
        for ch in 0..self.cfg.channels {
            let x = &frame[ch * hop..(ch + 1) * hop];
            for k in 0..hop {
                let row = &self.basis[k * hop..(k + 1) * hop];
                let s: f64 = row.iter().zip(x).map(|(&b, &v)| b * v.as_f64()).sum();
                out[ch * hop + k] = T::of(s);
            }
        }
        out
    }

    /// Inverse of [`Codec::analyze_frame`].
    pub fn synthesize_frame<T: Scalar>(&self, coeffs: &[T]) -> Vec<T> {
        let hop = self.cfg.hop;
        let mut out = vec![T::zero(); self.latent_dim()];
        for ch in 0..self.cfg.channels {
            let c = &coeffs[ch * hop..(ch + 1) * hop];
            for t in 0..hop {
                let mut s = 0.0;
                for k in 0..hop {
                    s += self.basis[k * hop + t] * c[k].as_f64();
                }
                out[ch * hop + t] = T::of(s);
            }
        }
        out
    }

    pub fn raw_latents<T: Scalar>(&self, w: &Waveform<T>) -> Result<Mat<T>> {
        let n = self.check_waveform(w)?;
        let hop = self.cfg.hop;
        let mut out = Mat::zeros(n, self.latent_dim());
        let mut frame = vec![T::zero(); self.latent_dim()];
        for i in 0..n {
            for ch in 0..self.cfg.channels {
                frame[ch * hop..(ch + 1) * hop].copy_from_slice(&w.samples.row(ch)[i * hop..(i + 1) * hop]);
            }
            out.row_mut(i).copy_from_slice(&self.analyze_frame(&frame));
        }
        Ok(out)
    }

    pub fn waveform_from_raw<T: Scalar>(&self, raw: &Mat<T>) -> Result<Waveform<T>> {
        self.check_latents(raw)?;
        let hop = self.cfg.hop;
        let mut samples = Mat::zeros(self.cfg.channels, raw.rows() * hop);
        for i in 0..raw.rows() {
            let frame = self.synthesize_frame(raw.row(i));
            for ch in 0..self.cfg.channels {
                samples.row_mut(ch)[i * hop..(i + 1) * hop].copy_from_slice(&frame[ch * hop..(ch + 1) * hop]);
            }
        }
        Ok(Waveform {
            sample_rate: self.cfg.sample_rate,
            samples,
        })
    }

    fn check_latents<T: Scalar>(&self, l: &Mat<T>) -> Result<()> {
        if l.cols() != self.latent_dim() {
            return Err(Error::Shape(format!(
                "latents have {} dims, codec expects {}",
                l.cols(),
                self.latent_dim()
            )));
        }
        if !l.all_finite() {
            return Err(Error::Data("latents contain non-finite values".into()));
        }
        Ok(())
    }

    fn check_stats(&self, stats: &CodecStats) -> Result<()> {
        if stats.mean.len() != self.latent_dim() || !(stats.scale > 0.0) {
            return Err(Error::Data("codec stats do not match the codec".into()));
        }
        Ok(())
    }

    pub fn encode<T: Scalar>(&self, w: &Waveform<T>, stats: &CodecStats) -> Result<AudioLatentSeq<T>> {
        self.check_stats(stats)?;
        let raw = self.raw_latents(w)?;
        let mut latents = Mat::zeros(raw.rows(), raw.cols());
        for i in 0..raw.rows() {
            latents.row_mut(i).copy_from_slice(&stats.standardize(raw.row(i)));
        }
        Ok(AudioLatentSeq {
            latents,
            frame_rate: self.cfg.frame_rate(),
        })
    }

    pub fn decode<T: Scalar>(&self, l: &AudioLatentSeq<T>, stats: &CodecStats) -> Result<Waveform<T>> {
        self.check_stats(stats)?;
        self.check_latents(&l.latents)?;
        let mut raw = Mat::zeros(l.latents.rows(), l.latents.cols());
        for i in 0..raw.rows() {
            raw.row_mut(i).copy_from_slice(&stats.destandardize(l.latents.row(i)));
        }
        self.waveform_from_raw(&raw)
    }

    /// Decodes one frame, returning `channels x hop` samples channel-major.
    /// Concatenating the outputs reproduces [`Codec::decode`] bit for bit.
    pub fn decode_incremental<T: Scalar>(
        &self,
        x: &[T],
        stats: &CodecStats,
        state: DecoderState,
    ) -> Result<(Vec<T>, DecoderState)> {
        if state.channels != self.cfg.channels || state.hop != self.cfg.hop || x.len() != self.latent_dim() {
            return Err(Error::Shape("decoder state does not match codec or frame".into()));
        }
        self.check_stats(stats)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("latent frame contains non-finite values".into()));
        }
        let frame = self.synthesize_frame(&stats.destandardize(x));
        Ok((
            frame,
            DecoderState {
                frames: state.frames + 1,
                ..state
            },
        ))
    }

    pub fn decoder_state(&self) -> DecoderState {
        DecoderState {
            channels: self.cfg.channels,
            hop: self.cfg.hop,
            frames: 0,
        }
    }

    /// Mean per latent dimension and a global scale giving std `SIGMA_DATA`.
    pub fn fit_stats<T: Scalar>(&self, corpus: &[Waveform<T>]) -> Result<CodecStats> {
        let raws = corpus.iter().map(|w| self.raw_latents(w)).collect::<Result<Vec<_>>>()?;
        fit_stats_raw(&raws.iter().collect::<Vec<_>>())
    }
}

/// Statistics from already-transformed raw latent matrices.
pub fn fit_stats_raw<T: Scalar>(raws: &[&Mat<T>]) -> Result<CodecStats> {
    let dim = raws.first().map(|m| m.cols()).unwrap_or(0);
    let frames: usize = raws.iter().map(|m| m.rows()).sum();
    if frames == 0 || dim == 0 {
        return Err(Error::Data("cannot fit codec stats on an empty corpus".into()));
    }
    let mut mean = vec![0.0; dim];
    for m in raws {
        for r in 0..m.rows() {
            for (a, &v) in mean.iter_mut().zip(m.row(r)) {
                *a += v.as_f64();
            }
        }
    }
    mean.iter_mut().for_each(|a| *a /= frames as f64);
    let mut ss = 0.0;
    for m in raws {
        for r in 0..m.rows() {
            for (&mu, &v) in mean.iter().zip(m.row(r)) {
                ss += (v.as_f64() - mu).powi(2);
            }
        }
    }
    let std = (ss / (frames * dim) as f64).sqrt();
    if !(std > 0.0) {
        return Err(Error::Data("corpus latents have zero variance".into()));
    }
    Ok(CodecStats {
        mean,
        scale: std / SIGMA_DATA,
    })
}

/// Decoder progress. The transform is frame-local, so the state only
/// records the codec shape and the number of frames emitted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderState {
    pub channels: usize,
    pub hop: usize,
    pub frames: usize,
}

pub fn write_waveform(path: &Path, w: &Waveform<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + w.samples.len() * 4);
    buf.extend_from_slice(WAV_MAGIC);
    buf.extend_from_slice(&(w.channels() as u32).to_le_bytes());
    buf.extend_from_slice(&(w.sample_rate as u32).to_le_bytes());
    for t in 0..w.len() {
        for ch in 0..w.channels() {
            buf.extend_from_slice(&w.samples.get(ch, t).to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_waveform(path: &Path) -> Result<Waveform<f32>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 16 || &buf[..8] != WAV_MAGIC {
        return Err(Error::Data(format!("{} is not a waveform file", path.display())));
    }
    let channels = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let sample_rate = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
    let body = &buf[16..];
    if channels == 0 || body.len() % (4 * channels) != 0 {
        return Err(Error::Data(format!("{} has a truncated body", path.display())));
    }
    let len = body.len() / (4 * channels);
    let mut samples = Mat::zeros(channels, len);
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        samples.set(i % channels, i / channels, f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(Waveform { sample_rate, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn codec() -> Codec {
        Codec::new(CodecConfig::default()).unwrap()
    }

    #[test]
    fn zero_waveform_encodes_to_zero() {
        let c = codec();
        let w = Waveform::<f64> {
            sample_rate: 480,
            samples: Mat::zeros(2, 64),
        };
        let l = c.encode(&w, &CodecStats::identity(32)).unwrap();
        assert!(l.latents.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unaligned_length_reports_boundary() {
        let w = Waveform::<f32> {
            sample_rate: 480,
            samples: Mat::zeros(2, 40),
        };
        match codec().encode(&w, &CodecStats::identity(32)) {
            Err(Error::FrameBoundary { len: 40, hop: 16, boundary: 32 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn basis_frames_are_orthonormal() {
        let c = codec();
        for i in 0..32 {
            for j in 0..32 {
                let d: f64 = c.basis_frame(i).iter().zip(c.basis_frame(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_latents_decode_to_mean() {
        let c = codec();
        let stats = CodecStats {
            mean: (0..32).map(|i| i as f64 * 0.1).collect(),
            scale: 2.0,
        };
        let l = AudioLatentSeq {
            latents: Mat::<f64>::zeros(3, 32),
            frame_rate: 30.0,
        };
        let w = c.decode(&l, &stats).unwrap();
        let mean_frame = c.synthesize_frame(&stats.mean);
        for i in 0..3 {
            for t in 0..16 {
                assert!((w.samples.get(1, i * 16 + t) - mean_frame[16 + t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn waveform_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w = Waveform {
            sample_rate: 480,
            samples: Mat::from_fn(2, 32, |r, c| (r as f32 - 0.5) * c as f32),
        };
        let p = dir.path().join("a.frwav");
        write_waveform(&p, &w).unwrap();
        assert_eq!(read_waveform(&p).unwrap(), w);
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 16 + 2 * 32 * 4);
    }

    proptest! {
        #[test]
        fn frame_changes_never_reach_earlier_latents(
            vals in prop::collection::vec(-1.0f64..1.0, 2 * 16 * 6),
            j in 0usize..6, delta in 0.1f64..2.0,
        ) {
            let c = codec();
            let w = Waveform { sample_rate: 480, samples: Mat::from_vec(2, 96, vals).unwrap() };
            let mut w2 = w.clone();
            for ch in 0..2 {
                for t in j * 16..96 {
                    let v = w2.samples.get(ch, t);
                    w2.samples.set(ch, t, v + delta);
                }
            }
            let a = c.raw_latents(&w).unwrap();
            let b = c.raw_latents(&w2).unwrap();
            for i in 0..j {
                prop_assert_eq!(a.row(i), b.row(i));
            }
        }

        #[test]
        fn encode_decode_round_trip(vals in prop::collection::vec(-5.0f64..5.0, 2 * 16 * 4), scale in 0.1f64..4.0) {
            let c = codec();
            let stats = CodecStats { mean: (0..32).map(|i| (i as f64).sin()).collect(), scale };
            let w = Waveform { sample_rate: 480, samples: Mat::from_vec(2, 64, vals).unwrap() };
            let l = c.encode(&w, &stats).unwrap();
            let back = c.decode(&l, &stats).unwrap();
            prop_assert!(back.samples.max_abs_diff(&w.samples) <= 1e-6);
            let again = c.encode(&back, &stats).unwrap();
            prop_assert!(again.latents.max_abs_diff(&l.latents) <= 1e-6);
        }
    }
}
