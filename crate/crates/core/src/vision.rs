//! Synthetic scenes with known events, per-frame patch statistics, PCA,
//! temporal differencing and the learnable per-frame aggregator.

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnMask, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{init_mat, Init, Linear};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Mat;
use crate::toy::{ToyProcess, NUM_PATTERNS};

/// Channels of a grid cell: RGB mean, RGB std, four quadrant luminances,
/// horizontal and vertical gradient magnitude.
pub const GRID_CHANNELS: usize = 12;

const PALETTE: [[f32; 3]; NUM_PATTERNS] = [
    [1.0, 0.25, 0.2],
    [0.2, 1.0, 0.3],
    [0.25, 0.35, 1.0],
    [1.0, 0.9, 0.2],
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Firing {
    Rate { p: f64 },
    Periodic { period: usize, phase: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Emitter {
    pub pattern: usize,
    pub position: f64,
    pub firing: Firing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_frames: usize,
    pub emitters: Vec<Emitter>,
    pub height: usize,
    pub width: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.emitters.is_empty() {
            return Err(Error::Invalid("a scene needs at least one emitter".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Invalid("scene resolution below 8x8".into()));
        }
        for e in &self.emitters {
            if e.pattern >= NUM_PATTERNS || !(0.0..=1.0).contains(&e.position) {
                return Err(Error::Invalid(format!("bad emitter {e:?}")));
            }
            match e.firing {
                Firing::Rate { p } if !(0.0..=1.0).contains(&p) => {
                    return Err(Error::Invalid(format!("firing rate {p} outside [0, 1]")))
                }
                Firing::Periodic { period: 0, .. } => return Err(Error::Invalid("zero firing period".into())),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn emitter_list(&self) -> Vec<(usize, f64)> {
        self.emitters.iter().map(|e| (e.pattern, e.position)).collect()
    }
}

/// Which emitters fire in which frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventTrack {
    /// `events[i][k]`: emitter `k` flashes in frame `i` (0-based).
    pub events: Vec<Vec<bool>>,
    pub positions: Vec<f64>,
    pub patterns: Vec<usize>,
}

impl EventTrack {
    pub fn emitter_list(&self) -> Vec<(usize, f64)> {
        self.patterns.iter().copied().zip(self.positions.iter().copied()).collect()
    }

    pub fn count(&self) -> usize {
        self.events.iter().flatten().filter(|&&e| e).count()
    }
}

/// RGB frame with values in [0, 1], row-major, 3 channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn black(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, x, self.pixel(y, self.width - 1 - x));
            }
        }
        out
    }
}

pub struct RenderedClip {
    pub frames: Vec<Frame>,
    pub track: EventTrack,
    /// Raw (unstandardized) oracle latents, one row per frame.
    pub latents: Mat<f64>,
}

fn salted(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

/// Event indicators for a scene; deterministic in the seed.
pub fn event_track(spec: &SceneSpec) -> EventTrack {
    let mut rng = salted(spec.seed, 1);
    let events = (0..spec.n_frames)
        .map(|i| {
            spec.emitters
                .iter()
                .map(|e| match e.firing {
                    Firing::Rate { p } => rng.random::<f64>() < p,
                    Firing::Periodic { period, phase } => i % period == phase % period,
                })
                .collect()
        })
        .collect();
    EventTrack {
        events,
        positions: spec.emitters.iter().map(|e| e.position).collect(),
        patterns: spec.emitters.iter().map(|e| e.pattern).collect(),
    }
}

/// Square emitter footprint: `(top, left, size)`.
fn footprint(e: &Emitter, height: usize, width: usize) -> (usize, usize, usize) {
    let size = (width / 5).max(2);
    let band = height / NUM_PATTERNS;
    let top = e.pattern * band + band.saturating_sub(size) / 2;
    let left = (e.position * (width - size) as f64).round() as usize;
    (top.min(height - size), left, size)
}

pub fn draw_frame(spec: &SceneSpec, fired: &[bool]) -> Frame {
    let mut f = Frame::black(spec.height, spec.width);
    for (e, &on) in spec.emitters.iter().zip(fired) {
        if !on {
            continue;
        }
        let (top, left, size) = footprint(e, spec.height, spec.width);
        for y in top..top + size {
            for x in left..left + size {
                let old = f.pixel(y, x);
                let c = PALETTE[e.pattern];
                f.set_pixel(y, x, [(old[0] + c[0]).min(1.0), (old[1] + c[1]).min(1.0), (old[2] + c[2]).min(1.0)]);
            }
        }
    }
    f
}

/// Frames, event ground truth and oracle latents of a scene.
pub fn render(spec: &SceneSpec, toy: &ToyProcess) -> Result<RenderedClip> {
    spec.validate()?;
    let track = event_track(spec);
    let frames = track.events.iter().map(|fired| draw_frame(spec, fired)).collect();
    let latents = toy.rollout(&track.events, &spec.emitter_list(), &mut salted(spec.seed, 2));
    Ok(RenderedClip { frames, track, latents })
}

/// Distribution over training scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFamily {
    pub height: usize,
    pub width: usize,
    pub max_emitters: usize,
    pub rate_min: f64,
    pub rate_max: f64,
    pub period_min: usize,
    pub period_max: usize,
    /// Probability that an emitter fires periodically rather than at random.
    pub periodic_share: f64,
}

impl Default for SceneFamily {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            max_emitters: 2,
            rate_min: 0.1,
            rate_max: 0.25,
            period_min: 4,
            period_max: 8,
            periodic_share: 0.5,
        }
    }
}

pub const PAN_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

impl SceneFamily {
    pub fn sample(&self, seed: u64, n_frames: usize) -> SceneSpec {
        let mut rng = salted(seed, 3);
        let count = rng.random_range(1..=self.max_emitters.clamp(1, NUM_PATTERNS));
        let mut pats: Vec<usize> = (0..NUM_PATTERNS).collect();
        for i in 0..count {
            let j = rng.random_range(i..NUM_PATTERNS);
            pats.swap(i, j);
        }
        let emitters = pats[..count]
            .iter()
            .map(|&pattern| {
                let position = PAN_GRID[rng.random_range(0..PAN_GRID.len())];
                let firing = if rng.random::<f64>() < self.periodic_share {
                    let period = rng.random_range(self.period_min..=self.period_max);
                    Firing::Periodic {
                        period,
                        phase: rng.random_range(0..period),
                    }
                } else {
                    Firing::Rate {
                        p: rng.random_range(self.rate_min..=self.rate_max),
                    }
                };
                Emitter {
                    pattern,
                    position,
                    firing,
                }
            })
            .collect();
        SceneSpec {
            seed,
            n_frames,
            emitters,
            height: self.height,
            width: self.width,
        }
    }

    /// A scene with a single emitter firing every `period` frames.
    pub fn periodic(&self, seed: u64, n_frames: usize, period: usize, pattern: usize, position: f64) -> SceneSpec {
        SceneSpec {
            seed,
            n_frames,
            emitters: vec![Emitter {
                pattern,
                position,
                firing: Firing::Periodic { period, phase: 0 },
            }],
            height: self.height,
            width: self.width,
        }
    }
}

/// Per-patch statistics, one row per cell in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFeatures {
    pub rows: usize,
    pub cols: usize,
    pub cells: Mat<f64>,
}

fn luma(p: [f32; 3]) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

pub fn extract_grid(frame: &Frame, patch: usize) -> Result<GridFeatures> {
    if patch < 2 || frame.height % patch != 0 || frame.width % patch != 0 {
        return Err(Error::Shape(format!(
            "{}x{} frame is not divisible into {patch}x{patch} patches",
            frame.height, frame.width
        )));
    }
    let (gr, gc) = (frame.height / patch, frame.width / patch);
    let mut cells = Mat::zeros(gr * gc, GRID_CHANNELS);
    let half = patch / 2;
    let n = (patch * patch) as f64;
    for by in 0..gr {
        for bx in 0..gc {
            let mut sum = [0.0f64; 3];
            let mut sq = [0.0f64; 3];
            let mut quad = [0.0f64; 4];
            let (mut gx, mut gy) = (0.0, 0.0);
            for y in 0..patch {
                for x in 0..patch {
                    let p = frame.pixel(by * patch + y, bx * patch + x);
                    for c in 0..3 {
                        sum[c] += p[c] as f64;
                        sq[c] += (p[c] as f64).powi(2);
                    }
                    let l = luma(p);
                    quad[(y / half) * 2 + x / half] += l;
                    if x + 1 < patch {
                        gx += (luma(frame.pixel(by * patch + y, bx * patch + x + 1)) - l).abs();
                    }
                    if y + 1 < patch {
                        gy += (luma(frame.pixel(by * patch + y + 1, bx * patch + x)) - l).abs();
                    }
                }
            }
            let row = cells.row_mut(by * gc + bx);
            for c in 0..3 {
                let m = sum[c] / n;
                row[c] = m;
                row[3 + c] = (sq[c] / n - m * m).max(0.0).sqrt();
            }
            for q in 0..4 {
                row[6 + q] = quad[q] / (n / 4.0);
            }
            let pairs = (patch * (patch - 1)) as f64;
            row[10] = gx / pairs;
            row[11] = gy / pairs;
        }
    }
    Ok(GridFeatures {
        rows: gr,
        cols: gc,
        cells,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaProjector {
    pub mean: Vec<f64>,
    /// `c_g x c_p`, orthonormal columns.
    pub basis: Vec<Vec<f64>>,
    /// Explained-variance ratio of every principal direction, descending.
    pub explained: Vec<f64>,
    pub cev: f64,
}

impl PcaProjector {
    pub fn dim(&self) -> usize {
        self.basis.first().map_or(0, Vec::len)
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let c = self.dim();
        let mut out = vec![0.0; c];
        for (i, (&xi, &m)) in x.iter().zip(&self.mean).enumerate() {
            let d = xi - m;
            for (o, &b) in out.iter_mut().zip(&self.basis[i]) {
                *o += d * b;
            }
        }
        out
    }

    pub fn lift(&self, y: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.basis)
            .map(|(&m, row)| m + row.iter().zip(y).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    pub fn project_grid(&self, g: &GridFeatures) -> Mat<f64> {
        let mut out = Mat::zeros(g.cells.rows(), self.dim());
        for r in 0..g.cells.rows() {
            out.row_mut(r).copy_from_slice(&self.project(g.cells.row(r)));
        }
        out
    }
}

/// Principal directions of `samples` (one per row) keeping the smallest
/// number of components whose explained variance reaches `target_cev`.
pub fn fit_pca(samples: &Mat<f64>, target_cev: f64) -> Result<PcaProjector> {
    let (n, d) = samples.shape();
    if !(target_cev > 0.0 && target_cev <= 1.0) {
        return Err(Error::Config(format!("cev {target_cev} outside (0, 1]")));
    }
    if n < d.max(2) {
        return Err(Error::Data(format!("{n} samples are too few for a {d}-dim PCA")));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(samples.row(r)) {
            *m += v / n as f64;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in 0..n {
        let row = samples.row(r);
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in i..d {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = vals.iter().sum();
    let explained: Vec<f64> = if total > 0.0 {
        vals.iter().map(|v| v / total).collect()
    } else {
        vec![0.0; d]
    };
    let mut keep = 0;
    let mut acc = 0.0;
    let rank = vals.iter().filter(|&&v| v > 1e-12 * total.max(1e-300)).count();
    if total <= 0.0 {
        warn!("degenerate grid covariance; keeping a single direction");
        keep = 1;
    } else {
        for &e in &explained {
            keep += 1;
            acc += e;
            if acc >= target_cev - 1e-12 {
                break;
            }
        }
        if keep > rank {
            warn!("grid covariance has rank {rank}; keeping {rank} directions");
            keep = rank.max(1);
        }
    }
    let basis = (0..d)
        .map(|i| order[..keep].iter().map(|&c| eig.eigenvectors[(i, c)]).collect())
        .collect();
    Ok(PcaProjector {
        mean,
        basis,
        explained,
        cev: target_cev,
    })
}

/// Channel concatenation of the projected grid and its difference from the
/// previous frame's projected grid.
pub fn condition_features(cur: &Mat<f64>, prev: &Mat<f64>) -> Result<Mat<f64>> {
    if cur.shape() != prev.shape() {
        return Err(Error::Shape("projected grids come from different projectors".into()));
    }
    let diff = cur.zip_map(prev, |a, b| a - b);
    Mat::hcat(&[cur, &diff])
}

/// Conditioned features for every frame of a clip; frame 0 pairs with
/// itself so its difference channels are zero.
pub fn clip_features(frames: &[Frame], patch: usize, pca: &PcaProjector) -> Result<Vec<Mat<f64>>> {
    let mut out = Vec::with_capacity(frames.len());
    let mut prev: Option<Mat<f64>> = None;
    for f in frames {
        let g = pca.project_grid(&extract_grid(f, patch)?);
        let p = prev.as_ref().unwrap_or(&g);
        out.push(condition_features(&g, p)?);
        prev = Some(g);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Conditioned feature channels, `2 c_p`.
    pub in_channels: usize,
    pub width: usize,
    pub heads: usize,
    pub out_dim: usize,
}

/// Projection, 2x2 patch-merging downsampler, an aggregation token and one
/// bidirectional transformer layer over the tokens of a single frame.
#[derive(Clone, Debug)]
pub struct Aggregator {
    pub cfg: AggregatorConfig,
    proj: Linear,
    down: Linear,
    agg_token: ParamId,
    pos: ParamId,
    norm1: ParamId,
    qkv: Linear,
    attn_out: Linear,
    norm2: ParamId,
    fc1: Linear,
    fc2: Linear,
    out: Linear,
}

impl Aggregator {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: AggregatorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.grid_rows % 2 != 0 || cfg.grid_cols % 2 != 0 || cfg.width % cfg.heads != 0 {
            return Err(Error::Config(format!("aggregator shape {cfg:?} is not valid")));
        }
        let w = cfg.width;
        let tokens = cfg.grid_rows * cfg.grid_cols / 4 + 1;
        Ok(Self {
            proj: Linear::new(store, "agg.proj", cfg.in_channels, w, true, Init::Xavier, rng)?,
            down: Linear::new(store, "agg.down", 4 * w, w, true, Init::Xavier, rng)?,
            agg_token: store.add("agg.token", init_mat(1, w, Init::FanIn(0.5), rng))?,
            pos: store.add("agg.pos", init_mat(tokens, w, Init::FanIn(0.5), rng))?,
            norm1: store.add("agg.norm1", Mat::filled(1, w, T::one()))?,
            qkv: Linear::new(store, "agg.qkv", w, 3 * w, false, Init::Xavier, rng)?,
            attn_out: Linear::new(store, "agg.attn_out", w, w, false, Init::Xavier, rng)?,
            norm2: store.add("agg.norm2", Mat::filled(1, w, T::one()))?,
            fc1: Linear::new(store, "agg.fc1", w, 2 * w, true, Init::Xavier, rng)?,
            fc2: Linear::new(store, "agg.fc2", 2 * w, w, true, Init::Xavier, rng)?,
            out: Linear::new(store, "agg.out", w, cfg.out_dim, true, Init::Xavier, rng)?,
            cfg,
        })
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.cfg.grid_rows * self.cfg.grid_cols / 4 + 1
    }

    /// `features`: `frames * cells x in_channels`, frames stacked.
    /// Returns `frames x out_dim`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, features: Var, frames: usize) -> Var {
        let (gr, gc) = (self.cfg.grid_rows, self.cfg.grid_cols);
        let cells = gr * gc;
        let h = self.proj.forward(g, features);
        // 2x2 merge: four gathers, one per position inside the block.
        let (dr, dc) = (gr / 2, gc / 2);
        let mut quads = Vec::with_capacity(4);
        for (oy, ox) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let mut idx = Vec::with_capacity(frames * dr * dc);
            for f in 0..frames {
                for y in 0..dr {
                    for x in 0..dc {
                        idx.push((0u32, (f * cells + (2 * y + oy) * gc + 2 * x + ox) as u32));
                    }
                }
            }
            quads.push(g.gather_rows(&[h], idx));
        }
        let merged = g.concat_cols(&quads);
        let down = self.down.forward(g, merged);
        let per = dr * dc;
        let agg = g.param(self.agg_token);
        let mut idx = Vec::with_capacity(frames * (per + 1));
        for f in 0..frames {
            idx.push((1u32, 0u32));
            for t in 0..per {
                idx.push((0u32, (f * per + t) as u32));
            }
        }
        let tokens = g.gather_rows(&[down, agg], idx);
        let pos = g.param(self.pos);
        let pos_idx = (0..frames * (per + 1)).map(|r| (0u32, (r % (per + 1)) as u32)).collect();
        let pos_rows = g.gather_rows(&[pos], pos_idx);
        let x = g.add(tokens, pos_rows);
        let y = self.encode_tokens(g, x, per + 1);
        let first = g.gather_rows(&[y], (0..frames).map(|f| (0u32, (f * (per + 1)) as u32)).collect());
        self.out.forward(g, first)
    }

    /// The bidirectional layer over blocks of `tokens` rows.
    pub fn encode_tokens<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, tokens: usize) -> Var {
        let w = self.cfg.width;
        let n1 = g.param(self.norm1);
        let h = g.rms_norm(x, n1, T::of(1e-6));
        let qkv = self.qkv.forward(g, h);
        let q = g.slice_cols(qkv, 0, w);
        let k = g.slice_cols(qkv, w, w);
        let v = g.slice_cols(qkv, 2 * w, w);
        let a = g.attention(q, k, v, self.cfg.heads, AttnMask::Blocks { size: tokens });
        let a = self.attn_out.forward(g, a);
        let x = g.add(x, a);
        let n2 = g.param(self.norm2);
        let h = g.rms_norm(x, n2, T::of(1e-6));
        let h = self.fc1.forward(g, h);
        let h = g.silu(h);
        let h = self.fc2.forward(g, h);
        g.add(x, h)
    }

    /// Vision tokens for a sequence of conditioned feature grids.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, features: &[Mat<f64>]) -> Mat<T> {
        let refs: Vec<&Mat<f64>> = features.iter().collect();
        let stacked = Mat::vcat(&refs).expect("feature grids share a shape").cast::<T>();
        let mut g = Graph::new(store);
        let x = g.input(stacked);
        let v = self.forward(&mut g, x, features.len());
        g.value(v).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn scene(seed: u64, firing: Firing) -> SceneSpec {
        SceneSpec {
            seed,
            n_frames: 40,
            emitters: vec![Emitter {
                pattern: 1,
                position: 0.25,
                firing,
            }],
            height: 32,
            width: 32,
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let toy = ToyProcess::default();
        let s = SceneFamily::default().sample(11, 30);
        let a = render(&s, &toy).unwrap();
        let b = render(&s, &toy).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.latents, b.latents);
    }

    #[test]
    fn silent_emitter_gives_dark_frames() {
        let r = render(&scene(1, Firing::Rate { p: 0.0 }), &ToyProcess::default()).unwrap();
        assert!(r.frames.iter().all(|f| f.data.iter().all(|&v| v == 0.0)));
        assert_eq!(r.track.count(), 0);
    }

    #[test]
    fn zero_emitters_rejected() {
        let mut s = scene(1, Firing::Rate { p: 0.5 });
        s.emitters.clear();
        assert!(render(&s, &ToyProcess::default()).is_err());
    }

    #[test]
    fn periodic_events_recur_at_the_period() {
        let t = event_track(&scene(2, Firing::Periodic { period: 7, phase: 3 }));
        let on: Vec<usize> = (0..40).filter(|&i| t.events[i][0]).collect();
        assert!(on.windows(2).all(|w| w[1] - w[0] == 7));
        assert_eq!(on[0], 3);
    }

    #[test]
    fn constant_gray_patch_statistics() {
        let mut f = Frame::black(16, 16);
        f.data.iter_mut().for_each(|v| *v = 0.4);
        let g = extract_grid(&f, 8).unwrap();
        for r in 0..4 {
            let row = g.cells.row(r);
            for c in 0..3 {
                assert!((row[c] - 0.4).abs() < 1e-6);
                assert!(row[3 + c].abs() < 1e-6);
            }
            assert!(row[10].abs() < 1e-12 && row[11].abs() < 1e-12);
        }
    }

    #[test]
    fn mirrored_frame_gives_mirrored_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut f = Frame::black(16, 32);
        f.data.iter_mut().for_each(|v| *v = rng.random());
        let a = extract_grid(&f, 8).unwrap();
        let b = extract_grid(&f.mirrored(), 8).unwrap();
        for y in 0..a.rows {
            for x in 0..a.cols {
                let ra = a.cells.row(y * a.cols + x);
                let rb = b.cells.row(y * a.cols + a.cols - 1 - x);
                // Left and right quadrants trade places under the mirror.
                let perm = [0, 1, 2, 3, 4, 5, 7, 6, 9, 8, 10, 11];
                for c in 0..GRID_CHANNELS {
                    assert!((ra[c] - rb[perm[c]]).abs() < 1e-9, "cell {y},{x} ch {c}");
                }
            }
        }
    }

    #[test]
    fn patch_edit_stays_local() {
        let mut f = Frame::black(32, 32);
        let a = extract_grid(&f, 8).unwrap();
        f.set_pixel(27, 26, [1.0, 0.5, 0.0]);
        let b = extract_grid(&f, 8).unwrap();
        for cell in 0..16 {
            let same = a.cells.row(cell) == b.cells.row(cell);
            assert_eq!(same, cell != 15, "cell {cell}");
        }
    }

    #[test]
    fn isotropic_data_keeps_half_the_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Mat::from_fn(200_000, 12, |_, _| StandardNormal.sample(&mut rng));
        let p = fit_pca(&x, 0.5).unwrap();
        assert_eq!(p.dim(), 6);
    }

    #[test]
    fn rank_one_data_keeps_one_component() {
        let dir: Vec<f64> = (0..12).map(|i| (i as f64 + 1.0).sqrt()).collect();
        let x = Mat::from_fn(50, 12, |r, c| (r as f64 - 20.0) * dir[c]);
        for cev in [0.1, 0.7, 1.0] {
            assert_eq!(fit_pca(&x, cev).unwrap().dim(), 1);
        }
    }

    #[test]
    fn pca_basis_orthonormal_and_reconstruction_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let scales: Vec<f64> = (0..12).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let x = Mat::from_fn(4000, 12, |_, c| scales[c] * { let g: f64 = StandardNormal.sample(&mut rng); g } + c as f64);
        let p = fit_pca(&x, 0.7).unwrap();
        for a in 0..p.dim() {
            for b in 0..p.dim() {
                let d: f64 = (0..12).map(|i| p.basis[i][a] * p.basis[i][b]).sum();
                assert!((d - if a == b { 1.0 } else { 0.0 }).abs() < 1e-5);
            }
        }
        assert!(p.explained.windows(2).all(|w| w[0] >= w[1]));
        let (mut err, mut tot) = (0.0, 0.0);
        for r in 0..x.rows() {
            let back = p.lift(&p.project(x.row(r)));
            for c in 0..12 {
                err += (x.get(r, c) - back[c]).powi(2);
                tot += (x.get(r, c) - p.mean[c]).powi(2);
            }
        }
        assert!(err / tot <= 1.0 - 0.7 + 0.05, "{}", err / tot);
    }

    #[test]
    fn first_frame_and_static_scene_have_zero_difference() {
        let f = Frame::black(32, 32);
        let frames = vec![f.clone(), f.clone(), f];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Mat::from_fn(100, 12, |_, _| rng.random::<f64>());
        let pca = fit_pca(&x, 0.7).unwrap();
        let feats = clip_features(&frames, 8, &pca).unwrap();
        let c = pca.dim();
        for m in &feats {
            for r in 0..m.rows() {
                assert!(m.row(r)[c..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn single_flash_difference_flips_sign() {
        let s = scene(0, Firing::Periodic { period: 100, phase: 2 });
        let toy = ToyProcess::default();
        let r = render(&s, &toy).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Mat::from_fn(100, 12, |_, _| rng.random::<f64>());
        let pca = fit_pca(&x, 0.9).unwrap();
        let feats = clip_features(&r.frames[..5], 8, &pca).unwrap();
        let c = pca.dim();
        let touched: Vec<usize> = (0..16).filter(|&cell| feats[2].row(cell)[c..].iter().any(|&v| v != 0.0)).collect();
        assert!(!touched.is_empty());
        for cell in 0..16 {
            for ch in c..2 * c {
                let (a, b) = (feats[2].get(cell, ch), feats[3].get(cell, ch));
                assert_eq!(a, -b);
                if !touched.contains(&cell) {
                    assert_eq!(a, 0.0);
                }
            }
        }
    }

    fn aggregator() -> (ParamStore<f64>, Aggregator) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let cfg = AggregatorConfig {
            grid_rows: 4,
            grid_cols: 4,
            in_channels: 6,
            width: 16,
            heads: 2,
            out_dim: 8,
        };
        let a = Aggregator::new(&mut store, cfg, &mut rng).unwrap();
        (store, a)
    }

    #[test]
    fn token_permutation_with_positions_is_invisible() {
        let (store, agg) = aggregator();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Mat::from_fn(5, 16, |_, _| rng.random_range(-1.0..1.0));
        let perm = [0usize, 3, 1, 4, 2];
        let px = x.select_rows(&perm);
        let run = |m: Mat<f64>| {
            let mut g = Graph::new(&store);
            let v = g.input(m);
            let y = agg.encode_tokens(&mut g, v, 5);
            g.value(y).row(0).to_vec()
        };
        let (a, b) = (run(x), run(px));
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-5);
        }
    }

    #[test]
    fn vision_token_ignores_later_frames() {
        let (store, agg) = aggregator();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let feats: Vec<Mat<f64>> = (0..4).map(|_| Mat::from_fn(16, 6, |_, _| rng.random())).collect();
        let a = agg.encode(&store, &feats);
        let mut f2 = feats.clone();
        f2[3] = Mat::from_fn(16, 6, |_, _| rng.random());
        let b = agg.encode(&store, &f2);
        for i in 0..3 {
            assert_eq!(a.row(i), b.row(i));
        }
    }
}
