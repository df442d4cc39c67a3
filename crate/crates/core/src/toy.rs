//! Linear-Gaussian audio process driven by visual events. Its conditional
//! law is known in closed form, which makes it the oracle for every
//! statistical check.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Number of distinct event patterns (and emitter colours).
pub const NUM_PATTERNS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyProcess {
    pub beta: f64,
    pub sigma_n: f64,
    /// Euclidean norm of every base pattern `h_k`.
    pub amplitude: f64,
    pub hop: usize,
}

impl Default for ToyProcess {
    fn default() -> Self {
        Self {
            beta: 0.9,
            sigma_n: 0.1,
            amplitude: 1.0,
            hop: 16,
        }
    }
}

impl ToyProcess {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.abs() < 1.0) {
            return Err(Error::Config(format!("toy beta {} is not stationary", self.beta)));
        }
        if !(self.sigma_n >= 0.0) || !(self.amplitude >= 0.0) || self.hop == 0 {
            return Err(Error::Config("toy process parameters out of range".into()));
        }
        Ok(())
    }

    /// Two channel halves, so the latent width is `2 * hop`.
    pub fn latent_dim(&self) -> usize {
        2 * self.hop
    }

    /// Base pattern `h_k`, a fixed pseudo-random direction scaled to
    /// `amplitude`.
    pub fn base_pattern(&self, k: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9 ^ k as u64);
        let v: Vec<f64> = (0..self.hop).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x * self.amplitude / n).collect()
    }

    /// `g_k(p) = [(1 - p) h_k, p h_k]`: left half carries weight `1 - p`.
    pub fn pattern(&self, k: usize, pan: f64) -> Vec<f64> {
        let h = self.base_pattern(k);
        let mut out = Vec::with_capacity(2 * self.hop);
        out.extend(h.iter().map(|v| (1.0 - pan) * v));
        out.extend(h.iter().map(|v| pan * v));
        out
    }

    /// Sum of the patterns of the emitters firing this frame.
    pub fn event_drive(&self, fired: &[bool], emitters: &[(usize, f64)]) -> Vec<f64> {
        let mut out = vec![0.0; self.latent_dim()];
        for (&f, &(k, p)) in fired.iter().zip(emitters) {
            if f {
                for (o, g) in out.iter_mut().zip(self.pattern(k, p)) {
                    *o += g;
                }
            }
        }
        out
    }

    /// Conditional mean `beta * prev + sum_k e_k g_k(p_k)` in raw space.
    pub fn conditional_mean(&self, prev: &[f64], fired: &[bool], emitters: &[(usize, f64)]) -> Vec<f64> {
        let drive = self.event_drive(fired, emitters);
        prev.iter().zip(drive).map(|(&x, d)| self.beta * x + d).collect()
    }

    pub fn oracle_sample(
        &self,
        prev: &[f64],
        fired: &[bool],
        emitters: &[(usize, f64)],
        rng: &mut ChaCha8Rng,
    ) -> Vec<f64> {
        self.conditional_mean(prev, fired, emitters)
            .into_iter()
            .map(|m| {
                let g: f64 = StandardNormal.sample(rng);
                m + self.sigma_n * g
            })
            .collect()
    }

    /// Negative log density of `x` under the conditional Gaussian.
    pub fn oracle_nll(&self, x: &[f64], prev: &[f64], fired: &[bool], emitters: &[(usize, f64)]) -> f64 {
        let mean = self.conditional_mean(prev, fired, emitters);
        let var = self.sigma_n * self.sigma_n;
        let sq: f64 = x.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum();
        0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI * var).ln() + sq / (2.0 * var)
    }

    /// Rolls the process forward from `x_0 = 0`; row `i` of `events` says
    /// which emitters fire in frame `i + 1`.
    pub fn rollout(&self, events: &[Vec<bool>], emitters: &[(usize, f64)], rng: &mut ChaCha8Rng) -> Mat<f64> {
        let mut out = Mat::zeros(events.len(), self.latent_dim());
        let mut prev = vec![0.0; self.latent_dim()];
        for (i, fired) in events.iter().enumerate() {
            prev = self.oracle_sample(&prev, fired, emitters, rng);
            out.row_mut(i).copy_from_slice(&prev);
        }
        out
    }

    /// Affine map of the conditional law into standardized latent space:
    /// returns (mean, std) of `x_i` given a standardized `prev`.
    pub fn standardized_conditional(
        &self,
        prev_std: &[f64],
        fired: &[bool],
        emitters: &[(usize, f64)],
        stats: &crate::codec::CodecStats,
    ) -> (Vec<f64>, f64) {
        let prev_raw = stats.destandardize(prev_std);
        let mean_raw = self.conditional_mean(&prev_raw, fired, emitters);
        (stats.standardize(&mean_raw), self.sigma_n / stats.scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_quiet_step_is_pure_decay() {
        let toy = ToyProcess {
            sigma_n: 0.0,
            ..ToyProcess::default()
        };
        let prev: Vec<f64> = (0..32).map(|i| i as f64 * 0.1 - 1.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = toy.oracle_sample(&prev, &[false], &[(0, 0.5)], &mut rng);
        for (a, b) in x.iter().zip(&prev) {
            assert_eq!(*a, 0.9 * b);
        }
    }

    #[test]
    fn nll_at_mode_is_the_normalizer() {
        let toy = ToyProcess::default();
        let prev = vec![0.3; 32];
        let em = [(1, 0.25)];
        let mode = toy.conditional_mean(&prev, &[true], &em);
        let want = 16.0 * (2.0 * std::f64::consts::PI * 0.01f64).ln();
        assert!((toy.oracle_nll(&mode, &prev, &[true], &em) - want).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_mean_matches() {
        let toy = ToyProcess::default();
        let prev: Vec<f64> = (0..32).map(|i| (i as f64).cos()).collect();
        let em = [(2, 0.75), (0, 0.0)];
        let fired = [true, false];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let mut acc = vec![0.0; 32];
        for _ in 0..n {
            for (a, v) in acc.iter_mut().zip(toy.oracle_sample(&prev, &fired, &em, &mut rng)) {
                *a += v / n as f64;
            }
        }
        let mean = toy.conditional_mean(&prev, &fired, &em);
        for (a, m) in acc.iter().zip(mean) {
            assert!((a - m).abs() <= 3.0 * 0.1 / 100.0, "{a} vs {m}");
        }
    }

    #[test]
    fn hard_left_pan_has_silent_right_half() {
        let toy = ToyProcess::default();
        let g = toy.pattern(3, 0.0);
        assert!(g[16..].iter().all(|&v| v == 0.0));
        let norm: f64 = g[..16].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}
