//! Per-token conditional denoiser: residual MLP blocks modulated by the
//! noise embedding plus the projected backbone condition (adaptive layer
//! norm with zero-initialized modulation and output), wrapped in EDM
//! preconditioning. A one-layer map of the same noise features gives the
//! loss uncertainty `u(t)`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::diffusion::{precondition, Denoiser, Precond};
use crate::error::{Error, Result};
use crate::nn::{maybe_dropout, Dropout, Init, Linear};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// Fourier frequencies of the noise embedding (64 features).
pub const FOURIER_FREQS: usize = 32;
const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub blocks: usize,
    pub width: usize,
    pub c_x: usize,
    pub z_dim: usize,
    pub sigma_data: f64,
}

#[derive(Clone, Debug)]
struct Block {
    ada: Linear,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct DiffusionHead {
    pub cfg: HeadConfig,
    in_proj: Linear,
    t1: Linear,
    t2: Linear,
    z_proj: Linear,
    blocks: Vec<Block>,
    final_ada: Linear,
    out: Linear,
    uncertainty: Linear,
}

/// Log-spaced frequencies in [0.5, 8] applied to `c_noise`.
pub fn fourier_features(c_noise: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * FOURIER_FREQS);
    for j in 0..FOURIER_FREQS {
        let f = 0.5 * 16f64.powf(j as f64 / (FOURIER_FREQS - 1) as f64);
        out.push((f * c_noise).cos());
    }
    for j in 0..FOURIER_FREQS {
        let f = 0.5 * 16f64.powf(j as f64 / (FOURIER_FREQS - 1) as f64);
        out.push((f * c_noise).sin());
    }
    out
}

pub struct HeadOutput {
    /// Denoised estimate `D`, `rows x c_x`.
    pub denoised: Var,
    /// `u(t)` per row, `rows x 1`.
    pub uncertainty: Var,
}

impl DiffusionHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: HeadConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.blocks == 0 || cfg.width == 0 || !(cfg.sigma_data > 0.0) {
            return Err(Error::Config(format!("bad head config {cfg:?}")));
        }
        let w = cfg.width;
        let nf = 2 * FOURIER_FREQS;
        let blocks = (0..cfg.blocks)
            .map(|b| {
                Ok(Block {
                    ada: Linear::new(store, &format!("head.{b}.ada"), w, 3 * w, true, Init::Zero, rng)?,
                    fc1: Linear::new(store, &format!("head.{b}.fc1"), w, w, true, Init::Xavier, rng)?,
                    fc2: Linear::new(store, &format!("head.{b}.fc2"), w, w, true, Init::Xavier, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            in_proj: Linear::new(store, "head.in", cfg.c_x, w, true, Init::Xavier, rng)?,
            t1: Linear::new(store, "head.t1", nf, w, true, Init::Xavier, rng)?,
            t2: Linear::new(store, "head.t2", w, w, true, Init::Xavier, rng)?,
            z_proj: Linear::new(store, "head.z", cfg.z_dim, w, true, Init::Xavier, rng)?,
            blocks,
            final_ada: Linear::new(store, "head.final_ada", w, 2 * w, true, Init::Zero, rng)?,
            out: Linear::new(store, "head.out", w, cfg.c_x, true, Init::Zero, rng)?,
            uncertainty: Linear::new(store, "head.u", nf, 1, true, Init::Zero, rng)?,
            cfg,
        })
    }

    pub fn preconditioners(&self, ts: &[f64]) -> Result<Vec<Precond>> {
        ts.iter()
            .map(|&t| {
                if !(t > 0.0) {
                    return Err(Error::Invalid(format!("the head is only evaluated at t > 0, got {t}")));
                }
                precondition(t, self.cfg.sigma_data)
            })
            .collect()
    }

    fn noise_features<T: Scalar>(pre: &[Precond]) -> Mat<T> {
        let rows: Vec<Vec<T>> = pre
            .iter()
            .map(|p| fourier_features(p.c_noise).into_iter().map(T::of).collect())
            .collect();
        Mat::from_rows(&rows).unwrap()
    }

    /// `x_t`: `rows x c_x`, `z`: `rows x z_dim`, `ts[r] > 0`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x_t: Var,
        ts: &[f64],
        z: Var,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<HeadOutput> {
        let rows = g.value(x_t).rows();
        if ts.len() != rows || g.value(z).rows() != rows {
            return Err(Error::Shape(format!("{rows} head inputs with {} levels", ts.len())));
        }
        let pre = self.preconditioners(ts)?;
        let w = self.cfg.width;
        let feats = g.input(Self::noise_features::<T>(&pre));

        let x_in = g.scale_rows(x_t, pre.iter().map(|p| T::of(p.c_in)).collect());
        let mut h = self.in_proj.forward(g, x_in);
        let temb = self.t1.forward(g, feats);
        let temb = g.silu(temb);
        let temb = self.t2.forward(g, temb);
        let zc = self.z_proj.forward(g, z);
        let c = g.add(temb, zc);
        let c = g.silu(c);

        let eps = T::of(LN_EPS);
        for b in &self.blocks {
            let m = b.ada.forward(g, c);
            let shift = g.slice_cols(m, 0, w);
            let scale = g.slice_cols(m, w, w);
            let gate = g.slice_cols(m, 2 * w, w);
            let n = g.layer_norm(h, eps);
            let scale1 = g.add_scalar(scale, T::one());
            let n = g.mul(n, scale1);
            let n = g.add(n, shift);
            let y = b.fc1.forward(g, n);
            let y = g.silu(y);
            let y = maybe_dropout(g, y, dropout);
            let y = b.fc2.forward(g, y);
            let y = g.mul(y, gate);
            h = g.add(h, y);
        }
        let m = self.final_ada.forward(g, c);
        let shift = g.slice_cols(m, 0, w);
        let scale = g.slice_cols(m, w, w);
        let n = g.layer_norm(h, eps);
        let scale1 = g.add_scalar(scale, T::one());
        let n = g.mul(n, scale1);
        let n = g.add(n, shift);
        let nn = self.out.forward(g, n);

        let skip = g.scale_rows(x_t, pre.iter().map(|p| T::of(p.c_skip)).collect());
        let outp = g.scale_rows(nn, pre.iter().map(|p| T::of(p.c_out)).collect());
        let denoised = g.add(skip, outp);
        let uncertainty = self.uncertainty.forward(g, feats);
        Ok(HeadOutput { denoised, uncertainty })
    }

    /// `u(t)` without a graph.
    pub fn uncertainty_at<T: Scalar>(&self, store: &ParamStore<T>, t: f64) -> Result<f64> {
        let p = precondition(t, self.cfg.sigma_data)?;
        let f: Vec<T> = fourier_features(p.c_noise).into_iter().map(T::of).collect();
        Ok(self.uncertainty.apply_row(store, &f)[0].as_f64())
    }

    pub fn denoise<T: Scalar>(&self, store: &ParamStore<T>, x_t: &Mat<T>, ts: &[f64], z: &Mat<T>) -> Result<Mat<T>> {
        if !x_t.all_finite() {
            return Err(Error::Numerical("non-finite input to the denoiser".into()));
        }
        let mut g = Graph::new(store);
        let xv = g.input(x_t.clone());
        let zv = g.input(z.clone());
        let out = self.forward(&mut g, xv, ts, zv, &mut None)?;
        Ok(g.value(out.denoised).clone())
    }
}

/// The head bound to fixed conditions, counting evaluations.
pub struct HeadDenoiser<'a, T: Scalar> {
    pub head: &'a DiffusionHead,
    pub store: &'a ParamStore<T>,
    pub z: Mat<T>,
    calls: usize,
}

impl<'a, T: Scalar> HeadDenoiser<'a, T> {
    pub fn new(head: &'a DiffusionHead, store: &'a ParamStore<T>, z: Mat<T>) -> Self {
        Self { head, store, z, calls: 0 }
    }
}

impl<T: Scalar> Denoiser<T> for HeadDenoiser<'_, T> {
    fn denoise(&mut self, x: &Mat<T>, t: &[f64]) -> Result<Mat<T>> {
        self.calls += 1;
        self.head.denoise(self.store, x, t, &self.z)
    }

    fn nfe(&self) -> usize {
        self.calls
    }
}

/// Head-level guidance: `D = omega * D(z_cond) + (1 - omega) * D(z_uncond)`,
/// two evaluations per step.
pub struct GuidedDenoiser<D> {
    pub cond: D,
    pub uncond: D,
    pub omega: f64,
}

impl<T: Scalar, D: Denoiser<T>> Denoiser<T> for GuidedDenoiser<D> {
    fn denoise(&mut self, x: &Mat<T>, t: &[f64]) -> Result<Mat<T>> {
        let c = self.cond.denoise(x, t)?;
        let u = self.uncond.denoise(x, t)?;
        let w = T::of(self.omega);
        let w1 = T::of(1.0 - self.omega);
        Ok(c.zip_map(&u, |a, b| w * a + w1 * b))
    }

    fn nfe(&self) -> usize {
        self.cond.nfe() + self.uncond.nfe()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn head<T: Scalar>(seed: u64) -> (ParamStore<T>, DiffusionHead) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = HeadConfig {
            blocks: 2,
            width: 16,
            c_x: 6,
            z_dim: 8,
            sigma_data: 0.5,
        };
        let h = DiffusionHead::new(&mut store, cfg, &mut rng).unwrap();
        (store, h)
    }

    fn perturb(store: &mut ParamStore<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in store.tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
    }

    #[test]
    fn zero_output_layer_gives_skip_only() {
        let (store, h) = head::<f64>(1);
        let x = Mat::from_fn(3, 6, |r, c| r as f64 - c as f64 * 0.3);
        let z = Mat::from_fn(3, 8, |r, c| (r + c) as f64 * 0.1);
        let ts = [0.1, 0.5, 20.0];
        let d = h.denoise(&store, &x, &ts, &z).unwrap();
        for (r, &t) in ts.iter().enumerate() {
            let cs = precondition(t, 0.5).unwrap().c_skip;
            for c in 0..6 {
                assert!((d.get(r, c) - cs * x.get(r, c)).abs() < 1e-12);
            }
        }
        assert_eq!(h.uncertainty_at(&store, 1.3).unwrap(), 0.0);
    }

    #[test]
    fn tiny_noise_returns_input() {
        let (mut store, h) = head::<f64>(2);
        perturb(&mut store, 3);
        let x = Mat::from_fn(1, 6, |_, c| c as f64 + 1.0);
        let z = Mat::from_fn(1, 8, |_, c| c as f64 * 0.1);
        let t = 1e-8;
        let d = h.denoise(&store, &x, &[t], &z).unwrap();
        let zero_t = h.denoise(&store, &x, &[t], &z).unwrap();
        let x_norm = x.sq_norm().sqrt();
        let diff = d.zip_map(&x, |a, b| a - b).sq_norm().sqrt();
        let c_out = precondition(t, 0.5).unwrap().c_out;
        // NN output magnitude bounded by recovering it from D.
        let nn = zero_t.zip_map(&x, |a, b| (a - precondition(t, 0.5).unwrap().c_skip * b) / c_out);
        assert!(diff <= 1e-6 * x_norm + c_out * nn.sq_norm().sqrt() + 1e-15);
    }

    #[test]
    fn single_and_double_precision_agree() {
        let (mut s64, h) = head::<f64>(4);
        perturb(&mut s64, 5);
        let s32: ParamStore<f32> = s64.cast();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Mat::<f64>::from_fn(5, 6, |_, _| rng.random_range(-1.0..1.0));
        let z = Mat::<f64>::from_fn(5, 8, |_, _| rng.random_range(-1.0..1.0));
        let ts = [0.01, 0.3, 1.0, 5.0, 80.0];
        let a = h.denoise(&s64, &x, &ts, &z).unwrap();
        let b = h.denoise(&s32, &x.cast(), &ts, &z.cast()).unwrap().cast::<f64>();
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((u - v).abs() <= 1e-4 * u.abs().max(1.0), "{u} vs {v}");
        }
    }

    #[test]
    fn uncertainty_is_continuous() {
        let (mut store, h) = head::<f64>(7);
        perturb(&mut store, 8);
        let mut t: f64 = 0.01;
        while t <= 80.0 {
            let a = h.uncertainty_at(&store, t).unwrap();
            let b = h.uncertainty_at(&store, t + 1e-6).unwrap();
            assert!((a - b).abs() <= 1e-4);
            t *= 1.05;
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let (store, h) = head::<f64>(9);
        let x = Mat::filled(1, 6, f64::NAN);
        assert!(h.denoise(&store, &x, &[1.0], &Mat::zeros(1, 8)).is_err());
    }
}
