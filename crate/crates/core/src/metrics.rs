//! Sample-based metrics on raw latent features, plus probes comparing
//! generated audio against the analytic toy process.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::toy::ToyProcess;
use crate::vision::EventTrack;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of pairwise Euclidean distances over the pooled set.
pub fn median_bandwidth(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    let pooled: Vec<&[f64]> = (0..a.rows()).map(|r| a.row(r)).chain((0..b.rows()).map(|r| b.row(r))).collect();
    let mut d = Vec::with_capacity(pooled.len() * pooled.len() / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

struct Kernel {
    k: Vec<f64>,
    n: usize,
}

impl Kernel {
    fn new(a: &Mat<f64>, b: &Mat<f64>, h: f64) -> Self {
        let rows: Vec<&[f64]> = (0..a.rows()).map(|r| a.row(r)).chain((0..b.rows()).map(|r| b.row(r))).collect();
        let n = rows.len();
        let inv = 1.0 / (2.0 * h * h);
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            k[i * n + i] = 1.0;
            for j in i + 1..n {
                let v = (-sq_dist(rows[i], rows[j]) * inv).exp();
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        Self { k, n }
    }

    /// Unbiased statistic for the split given by `idx[..m]` / `idx[m..]`.
    fn mmd2(&self, idx: &[usize], m: usize) -> f64 {
        let (xa, xb) = idx.split_at(m);
        let within = |s: &[usize]| {
            let mut acc = 0.0;
            for (p, &i) in s.iter().enumerate() {
                for &j in &s[p + 1..] {
                    acc += self.k[i * self.n + j];
                }
            }
            2.0 * acc / (s.len() * (s.len() - 1)) as f64
        };
        let mut cross = 0.0;
        for &i in xa {
            for &j in xb {
                cross += self.k[i * self.n + j];
            }
        }
        within(xa) + within(xb) - 2.0 * cross / (xa.len() * xb.len()) as f64
    }
}

fn check_sets(a: &Mat<f64>, b: &Mat<f64>) -> Result<()> {
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::Invalid("each sample set needs at least two points".into()));
    }
    if a.cols() != b.cols() {
        return Err(Error::Shape("sample sets have different dimensions".into()));
    }
    Ok(())
}

/// Unbiased squared MMD with a Gaussian kernel
/// `exp(-|x - y|^2 / (2 h^2))`; `h` defaults to the median heuristic.
pub fn rbf_mmd(a: &Mat<f64>, b: &Mat<f64>, bandwidth: Option<f64>) -> Result<f64> {
    check_sets(a, b)?;
    let h = bandwidth.unwrap_or_else(|| median_bandwidth(a, b));
    let kern = Kernel::new(a, b, h);
    let idx: Vec<usize> = (0..kern.n).collect();
    Ok(kern.mmd2(&idx, a.rows()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdTest {
    pub mmd2: f64,
    pub p_value: f64,
    /// 95th percentile of the permutation null.
    pub null_q95: f64,
    pub bandwidth: f64,
}

/// [`rbf_mmd`] with a permutation test of equal distributions.
pub fn mmd_permutation_test(a: &Mat<f64>, b: &Mat<f64>, permutations: usize, rng: &mut ChaCha8Rng) -> Result<MmdTest> {
    check_sets(a, b)?;
    let h = median_bandwidth(a, b);
    let kern = Kernel::new(a, b, h);
    let mut idx: Vec<usize> = (0..kern.n).collect();
    let stat = kern.mmd2(&idx, a.rows());
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        idx.shuffle(rng);
        null.push(kern.mmd2(&idx, a.rows()));
    }
    let exceed = null.iter().filter(|&&v| v >= stat).count();
    null.sort_by(f64::total_cmp);
    let q95 = null.get(((null.len() as f64 * 0.95) as usize).min(null.len().saturating_sub(1))).copied().unwrap_or(f64::NAN);
    Ok(MmdTest {
        mmd2: stat,
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
        null_q95: q95,
        bandwidth: h,
    })
}

pub fn mean_and_cov(x: &Mat<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = x.shape();
    let mut mu = vec![0.0; d];
    for r in 0..n {
        for (m, &v) in mu.iter_mut().zip(x.row(r)) {
            *m += v / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for r in 0..n {
        let c: Vec<f64> = x.row(r).iter().zip(&mu).map(|(v, m)| v - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    (mu, cov / (n.max(2) - 1) as f64)
}

fn psd_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clamped = eig.eigenvalues.iter().any(|&l| l < -1e-12 * eig.eigenvalues.amax().max(1e-300));
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    (q * DMatrix::from_diagonal(&roots) * q.transpose(), clamped)
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
pub fn frechet_from_moments(mu_a: &[f64], cov_a: &DMatrix<f64>, mu_b: &[f64], cov_b: &DMatrix<f64>) -> f64 {
    let mean_term: f64 = mu_a.iter().zip(mu_b).map(|(a, b)| (a - b) * (a - b)).sum();
    // tr((S_a S_b)^(1/2)) = tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)), symmetric.
    let (ra, c1) = psd_sqrt(cov_a);
    let (mid, c2) = psd_sqrt(&(&ra * cov_b * &ra));
    if c1 || c2 {
        log::warn!("covariance was not positive semidefinite; negative eigenvalues clamped to zero");
    }
    (mean_term + cov_a.trace() + cov_b.trace() - 2.0 * mid.trace()).max(0.0)
}

pub fn frechet_gaussian(a: &Mat<f64>, b: &Mat<f64>) -> Result<f64> {
    check_sets(a, b)?;
    let (ma, ca) = mean_and_cov(a);
    let (mb, cb) = mean_and_cov(b);
    Ok(frechet_from_moments(&ma, &ca, &mb, &cb))
}

/// Dominant period in samples: autocorrelation maximum over lags in
/// `[2, n/2]` with parabolic refinement.
pub fn period_estimate(signal: &[f64]) -> Result<f64> {
    let n = signal.len();
    if n < 8 {
        return Err(Error::Invalid(format!("a period estimate needs at least 8 samples, got {n}")));
    }
    let mean = signal.iter().sum::<f64>() / n as f64;
    let x: Vec<f64> = signal.iter().map(|v| v - mean).collect();
    let energy: f64 = x.iter().map(|v| v * v).sum();
    if energy <= 1e-300 * n as f64 || !energy.is_finite() {
        return Err(Error::Invalid("the signal is flat; its period is undefined".into()));
    }
    let acf = |lag: usize| x[..n - lag].iter().zip(&x[lag..]).map(|(a, b)| a * b).sum::<f64>();
    let max_lag = n / 2;
    let vals: Vec<f64> = (0..=max_lag + 1).map(|l| if l < n { acf(l) } else { 0.0 }).collect();
    let best = (2..=max_lag).max_by(|&a, &b| vals[a].total_cmp(&vals[b])).expect("lag range is non-empty");
    let (l, c, r) = (vals[best - 1], vals[best], vals[best + 1]);
    let denom = l - 2.0 * c + r;
    let shift = if denom.abs() > 1e-300 { (0.5 * (l - r) / denom).clamp(-0.5, 0.5) } else { 0.0 };
    if (best as f64) > n as f64 / 4.0 {
        log::warn!("estimated period {best} spans fewer than four cycles of the {n}-sample signal");
    }
    Ok(best as f64 + shift)
}

/// Innovations `x_i - beta x_{i-1}` (with `x_0 = 0`) of raw latents.
pub fn innovations(raw: &Mat<f64>, beta: f64) -> Mat<f64> {
    let mut out = raw.clone();
    for i in (1..raw.rows()).rev() {
        for (o, &p) in out.row_mut(i).iter_mut().zip(raw.row(i - 1)) {
            *o -= beta * p;
        }
    }
    out
}

/// Per-frame response of `raw` latents to emitter `e` of `track`: the
/// innovation projected onto the emitter's pattern, in pattern units.
pub fn pattern_response(raw: &Mat<f64>, track: &EventTrack, e: usize, toy: &ToyProcess) -> Vec<f64> {
    let g = toy.pattern(track.patterns[e], track.positions[e]);
    let norm2: f64 = g.iter().map(|v| v * v).sum();
    let inn = innovations(raw, toy.beta);
    (0..inn.rows())
        .map(|i| inn.row(i).iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() / norm2.max(1e-300))
        .collect()
}

/// Cross-correlation accumulated over `(response, indicator)` pairs.
fn xcorr_lag(pairs: &[(Vec<f64>, Vec<f64>)], max_lag: usize) -> i64 {
    let lag_range = -(max_lag as i64)..=(max_lag as i64);
    let score = |lag: i64| -> f64 {
        let mut acc = 0.0;
        for (s, e) in pairs {
            let n = s.len() as i64;
            let ms = s.iter().sum::<f64>() / n as f64;
            let me = e.iter().sum::<f64>() / n as f64;
            for i in 0..n {
                let j = i + lag;
                if (0..n).contains(&j) {
                    acc += (s[j as usize] - ms) * (e[i as usize] - me);
                }
            }
        }
        acc
    };
    lag_range.max_by(|&a, &b| score(a).total_cmp(&score(b)).then(b.abs().cmp(&a.abs()))).unwrap_or(0)
}

/// Lag (in frames) at which generated audio best matches the true event
/// train, accumulated over clips and emitters. Positive means late.
pub fn event_lag(clips: &[(&Mat<f64>, &EventTrack)], toy: &ToyProcess, max_lag: usize) -> Result<i64> {
    let mut pairs = Vec::new();
    let mut events = 0;
    for (raw, track) in clips {
        if raw.rows() != track.events.len() {
            return Err(Error::Shape("latents and event track differ in length".into()));
        }
        for e in 0..track.patterns.len() {
            let ind: Vec<f64> = track.events.iter().map(|f| if f[e] { 1.0 } else { 0.0 }).collect();
            events += ind.iter().filter(|&&v| v > 0.0).count();
            pairs.push((pattern_response(raw, track, e, toy), ind));
        }
    }
    if events == 0 {
        return Err(Error::Invalid("no events to align against".into()));
    }
    if events < 5 {
        log::warn!("event lag from only {events} events");
    }
    Ok(xcorr_lag(&pairs, max_lag))
}

/// Left/right energy of the base pattern in the innovations at event
/// frames, summed over emitters.
pub fn pan_energies(raw: &Mat<f64>, track: &EventTrack, toy: &ToyProcess) -> (f64, f64) {
    let inn = innovations(raw, toy.beta);
    let half = toy.hop;
    let (mut el, mut er) = (0.0, 0.0);
    for e in 0..track.patterns.len() {
        let h = toy.base_pattern(track.patterns[e]);
        let hn: f64 = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (i, f) in track.events.iter().enumerate() {
            if f[e] {
                let row = inn.row(i);
                let l: f64 = row[..half].iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() / hn;
                let r: f64 = row[half..].iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() / hn;
                el += l * l;
                er += r * r;
            }
        }
    }
    (el, er)
}

/// `(E_L - E_R) / (E_L + E_R)`.
pub fn pan_asymmetry(el: f64, er: f64) -> f64 {
    (el - er) / (el + er).max(1e-300)
}

/// Agreement between sampled latents and known conditional Gaussians
/// `N(mean_c, sigma^2 I)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMatch {
    /// RMS over contexts and dimensions of the sample-mean error, in
    /// units of `sigma`.
    pub mean_err: f64,
    /// Largest per-context, per-dimension mean error, in units of `sigma`.
    pub max_mean_err: f64,
    /// `|S - sigma^2 I|_F / |sigma^2 I|_F` for the pooled within-context
    /// covariance `S`.
    pub cov_err: f64,
}

/// `samples[c]` holds draws for context `c`, whose true mean is `means[c]`.
pub fn conditional_match(samples: &[Mat<f64>], means: &[Vec<f64>], sigma: f64) -> Result<ConditionalMatch> {
    if samples.is_empty() || samples.len() != means.len() {
        return Err(Error::Shape("one mean per context is required".into()));
    }
    let d = means[0].len();
    let mut sq = 0.0;
    let mut max_err: f64 = 0.0;
    let mut pooled = DMatrix::<f64>::zeros(d, d);
    let mut dof = 0usize;
    for (s, m) in samples.iter().zip(means) {
        if s.cols() != d || s.rows() < 2 {
            return Err(Error::Shape("every context needs at least two samples of the right width".into()));
        }
        let (mu, cov) = mean_and_cov(s);
        for (a, b) in mu.iter().zip(m) {
            let e = (a - b) / sigma;
            sq += e * e;
            max_err = max_err.max(e.abs());
        }
        pooled += cov * (s.rows() - 1) as f64;
        dof += s.rows() - 1;
    }
    pooled /= dof as f64;
    let target = DMatrix::<f64>::identity(d, d) * (sigma * sigma);
    Ok(ConditionalMatch {
        mean_err: (sq / (samples.len() * d) as f64).sqrt(),
        max_mean_err: max_err,
        cov_err: (&pooled - &target).norm() / target.norm(),
    })
}

/// Line-delimited record of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_hash: String,
    pub split: String,
    pub mode: String,
    pub clips: usize,
    pub mmd2: f64,
    pub mmd_p_value: f64,
    pub frechet: f64,
    /// Mean negative log density per frame of the generated latents under
    /// the true conditional law.
    pub oracle_nll: f64,
    pub event_lag: i64,
    pub period_error: Option<f64>,
}
