//! EDM preconditioning, noise-level schedules and the two head samplers.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;

pub const T_MAX: f64 = 80.0;
pub const RHO: f64 = 7.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    /// `ln(t) / 4`; infinite at `t = 0`, where the network is never run.
    pub c_noise: f64,
}

pub fn precondition(t: f64, sigma_data: f64) -> Result<Precond> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Invalid(format!("noise level {t} must be finite and non-negative")));
    }
    let s2 = sigma_data * sigma_data;
    let r = t * t + s2;
    Ok(Precond {
        c_skip: s2 / r,
        c_out: t * sigma_data / r.sqrt(),
        c_in: 1.0 / r.sqrt(),
        c_noise: 0.25 * t.ln(),
    })
}

/// `lambda(t) = (t^2 + sigma^2) / (t sigma)^2`.
pub fn edm_weight(t: f64, sigma_data: f64) -> f64 {
    (t * t + sigma_data * sigma_data) / (t * sigma_data).powi(2)
}

/// Karras schedule with `steps` intervals: `steps + 1` strictly decreasing
/// levels from `t_max` to exactly `t_min`.
pub fn karras_schedule(steps: usize, t_max: f64, t_min: f64, rho: f64) -> Result<Vec<f64>> {
    if steps < 1 {
        return Err(Error::Invalid("a schedule needs at least one step".into()));
    }
    let (a, b) = (t_max.powf(1.0 / rho), t_min.powf(1.0 / rho));
    let mut out: Vec<f64> = (0..=steps)
        .map(|j| (a + j as f64 / steps as f64 * (b - a)).powf(rho))
        .collect();
    out[0] = t_max;
    out[steps] = t_min;
    Ok(out)
}

/// Batched denoiser: row `r` of `x` is at noise level `t[r]`.
pub trait Denoiser<T: Scalar> {
    fn denoise(&mut self, x: &Mat<T>, t: &[f64]) -> Result<Mat<T>>;
    /// Per-token network evaluations performed so far.
    fn nfe(&self) -> usize;
}

pub fn standard_normal<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat<T> {
    Mat::from_fn(rows, cols, |_, _| T::of(StandardNormal.sample(rng)))
}

/// Deterministic Heun integration of the probability-flow ODE from
/// `t_max * noise` down to 0 over `steps` intervals. The last interval
/// (into 0) is a single Euler step, so `2 * steps - 1` evaluations.
pub fn heun_sample<T: Scalar, D: Denoiser<T>>(den: &mut D, noise: &Mat<T>, steps: usize) -> Result<Mat<T>> {
    let ts = karras_schedule(steps, T_MAX, 0.0, RHO)?;
    let rows = noise.rows();
    let mut x = noise.map(|v| v * T::of(ts[0]));
    for j in 0..steps {
        let (tc, tn) = (ts[j], ts[j + 1]);
        let d0 = den.denoise(&x, &vec![tc; rows])?;
        let slope = x.zip_map(&d0, |xv, dv| (xv - dv) / T::of(tc));
        let mut x_euler = x.clone();
        x_euler.axpy(T::of(tn - tc), &slope);
        if tn > 0.0 {
            let d1 = den.denoise(&x_euler, &vec![tn; rows])?;
            let slope2 = x_euler.zip_map(&d1, |xv, dv| (xv - dv) / T::of(tn));
            let avg = slope.zip_map(&slope2, |a, b| (a + b) * T::of(0.5));
            x.axpy(T::of(tn - tc), &avg);
        } else {
            x = x_euler;
        }
    }
    Ok(x)
}

pub fn validate_cm_schedule(ts: &[f64]) -> Result<()> {
    let mut prev = T_MAX;
    for &t in ts {
        if !(t > 0.0 && t < prev) {
            return Err(Error::Invalid(format!(
                "consistency schedule {ts:?} must be strictly decreasing in (0, {T_MAX})"
            )));
        }
        prev = t;
    }
    Ok(())
}

/// Number of standard-normal draws a consistency run consumes.
pub fn cm_noise_draws(intermediate: &[f64], shared_noise: bool) -> usize {
    if shared_noise {
        1
    } else {
        1 + intermediate.len()
    }
}

/// Multistep consistency sampling: one jump from `t_max`, then for every
/// intermediate level re-noise and jump again. `shared_noise` reuses the
/// initial draw instead of fresh noise at each level.
pub fn cm_sample<T: Scalar, D: Denoiser<T>>(
    den: &mut D,
    intermediate: &[f64],
    rows: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
    shared_noise: bool,
) -> Result<Mat<T>> {
    validate_cm_schedule(intermediate)?;
    let noises: Vec<Mat<T>> = (0..cm_noise_draws(intermediate, shared_noise))
        .map(|_| standard_normal(rows, cols, rng))
        .collect();
    cm_sample_from(den, intermediate, &noises)
}

/// [`cm_sample`] with pre-drawn noise; a single matrix means shared noise.
pub fn cm_sample_from<T: Scalar, D: Denoiser<T>>(den: &mut D, intermediate: &[f64], noises: &[Mat<T>]) -> Result<Mat<T>> {
    validate_cm_schedule(intermediate)?;
    if noises.len() != 1 && noises.len() != 1 + intermediate.len() {
        return Err(Error::Shape(format!(
            "{} noise draws for {} consistency levels",
            noises.len(),
            1 + intermediate.len()
        )));
    }
    let rows = noises[0].rows();
    let x_init = noises[0].map(|v| v * T::of(T_MAX));
    let mut x = den.denoise(&x_init, &vec![T_MAX; rows])?;
    for (j, &t) in intermediate.iter().enumerate() {
        let eps = noises.get(j + 1).unwrap_or(&noises[0]);
        x.axpy(T::of(t), eps);
        x = den.denoise(&x, &vec![t; rows])?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Exact denoiser for data concentrated at a single point.
    struct PointMass {
        mu: Vec<f64>,
        calls: usize,
    }

    impl Denoiser<f64> for PointMass {
        fn denoise(&mut self, x: &Mat<f64>, _t: &[f64]) -> Result<Mat<f64>> {
            self.calls += 1;
            Ok(Mat::from_fn(x.rows(), x.cols(), |_, c| self.mu[c]))
        }
        fn nfe(&self) -> usize {
            self.calls
        }
    }

    #[test]
    fn precondition_at_zero_and_sigma() {
        let p = precondition(0.0, 0.5).unwrap();
        assert_eq!((p.c_skip, p.c_out, p.c_in), (1.0, 0.0, 2.0));
        assert_eq!(precondition(0.5, 0.5).unwrap().c_skip, 0.5);
        assert!(precondition(-1e-9, 0.5).is_err());
    }

    #[test]
    fn edm_weight_at_sigma_data() {
        assert!((edm_weight(0.5, 0.5) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_endpoints_and_second_level() {
        let s = karras_schedule(29, 80.0, 0.0, 7.0).unwrap();
        assert_eq!(s[0], 80.0);
        assert_eq!(s[29], 0.0);
        // (80^(1/7) * 28/29)^7 evaluated as 80 * (28/29)^7.
        let oracle = 80.0 * (28.0f64 / 29.0).powi(7);
        assert!((s[1] - oracle).abs() < 1e-9);
        assert!((s[1] - 62.57).abs() < 0.01, "{}", s[1]);
        assert!(s.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn heun_converges_to_point_mass() {
        let mu: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let mut den = PointMass { mu: mu.clone(), calls: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = standard_normal(3, 8, &mut rng);
        let x = heun_sample(&mut den, &noise, 30).unwrap();
        assert_eq!(den.nfe(), 59);
        let norm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
        for r in 0..3 {
            let err: f64 = x.row(r).iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(err <= 1e-3 * norm);
        }
    }

    #[test]
    fn cm_nfe_and_schedule_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (sched, nfe) in [(vec![], 1), (vec![2.5], 2), (vec![5.0, 1.1, 0.08], 4)] {
            let mut den = PointMass { mu: vec![0.0; 4], calls: 0 };
            cm_sample(&mut den, &sched, 2, 4, &mut rng, false).unwrap();
            assert_eq!(den.nfe(), nfe);
        }
        let mut den = PointMass { mu: vec![0.0; 4], calls: 0 };
        assert!(cm_sample(&mut den, &[1.0, 2.0], 1, 4, &mut rng, false).is_err());
        assert!(cm_sample(&mut den, &[80.0], 1, 4, &mut rng, false).is_err());
    }

    #[test]
    fn heun_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = standard_normal::<f64>(2, 3, &mut rng);
        let run = || {
            let mut den = PointMass { mu: vec![0.1, 0.2, 0.3], calls: 0 };
            heun_sample(&mut den, &noise, 5).unwrap()
        };
        assert_eq!(run(), run());
    }
}
