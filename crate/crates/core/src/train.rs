//! Stage-1 denoising pretraining and Stage-2 consistency tuning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::diffusion::edm_weight;
use crate::error::{Error, Result};
use crate::model::{Arch, TrainClip};
use crate::nn::Dropout;
use crate::params::ParamStore;
use crate::rope::RopeConfig;
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// splitmix64 of `seed` combined with `salt`: independent streams per
/// (run, iteration) so that resumed runs replay identical draws.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `ln t ~ N(p_mean, p_std^2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSampler {
    pub p_mean: f64,
    pub p_std: f64,
}

impl NoiseSampler {
    pub const STAGE1: Self = Self { p_mean: -0.4, p_std: 1.0 };
    pub const STAGE2: Self = Self { p_mean: -0.8, p_std: 1.6 };

    pub fn from_normal(&self, g: f64) -> f64 {
        (self.p_mean + self.p_std * g).exp()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        self.from_normal(StandardNormal.sample(rng))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EctPreset {
    Cf,
    In,
}

impl std::str::FromStr for EctPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cf" => Ok(EctPreset::Cf),
            "in" => Ok(EctPreset::In),
            o => Err(Error::Config(format!("unknown ECT preset {o:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EctMapCfg {
    pub q: f64,
    pub s: u64,
    pub k: f64,
    pub b: f64,
}

impl EctMapCfg {
    pub fn preset(p: EctPreset, total_iters: u64) -> Self {
        let (q, div) = match p {
            EctPreset::Cf => (2.0, 8),
            EctPreset::In => (4.0, 4),
        };
        Self {
            q,
            s: (total_iters / div).max(1),
            k: 8.0,
            b: 1.0,
        }
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `r = max(0, (1 - q^(-ceil(iters / s)) k sigmoid(-b t)) t)`.
pub fn ect_map(t: f64, iters: u64, cfg: &EctMapCfg) -> f64 {
    (t - ect_gap(t, iters, cfg)).max(0.0)
}

/// `t - r`, evaluated directly so that gaps far below the rounding unit of
/// `t` stay representable.
pub fn ect_gap(t: f64, iters: u64, cfg: &EctMapCfg) -> f64 {
    let stage = iters.div_ceil(cfg.s);
    let shrink = cfg.q.powf(-(stage as f64));
    t * (shrink * cfg.k * logistic(-cfg.b * t)).min(1.0)
}

/// `sqrt(|a - b|^2 + nu^2) - nu` from the squared distance.
pub fn pseudo_huber(sq_dist: f64, nu: f64) -> f64 {
    (sq_dist + nu * nu).sqrt() - nu
}

/// `w(t) = 1/t^2 + 1/sigma^2`.
pub fn ect_weight(t: f64, sigma_data: f64) -> f64 {
    1.0 / (t * t) + 1.0 / (sigma_data * sigma_data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Cfg {
    pub noise: NoiseSampler,
    pub t_draws: usize,
    pub cfg_dropout: f64,
    pub dropout: f64,
}

impl Default for Stage1Cfg {
    fn default() -> Self {
        Self {
            noise: NoiseSampler::STAGE1,
            t_draws: 4,
            cfg_dropout: 0.1,
            dropout: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Cfg {
    pub noise: NoiseSampler,
    pub t_draws: usize,
    pub cfg_dropout: f64,
    pub dropout: f64,
    pub nu: f64,
    pub map: EctMapCfg,
    pub head_only: bool,
}

impl Stage2Cfg {
    pub fn new(preset: EctPreset, total_iters: u64) -> Self {
        Self {
            noise: NoiseSampler::STAGE2,
            t_draws: 4,
            cfg_dropout: 0.1,
            dropout: 0.2,
            nu: 0.06,
            map: EctMapCfg::preset(preset, total_iters),
            head_only: false,
        }
    }
}

/// Per-row bookkeeping returned with a loss node.
pub struct LossParts {
    pub loss: Var,
    /// Per-row contribution (`rows x 1`), before the final sum.
    pub rows: Var,
    pub ts: Vec<f64>,
    pub dts: Vec<f64>,
    /// Tokens per replication, to map rows back to token indices.
    pub tokens: usize,
}

impl LossParts {
    pub fn mean_dt(&self) -> f64 {
        if self.dts.is_empty() {
            0.0
        } else {
            self.dts.iter().sum::<f64>() / self.dts.len() as f64
        }
    }

    fn check_finite<T: Scalar>(&self, g: &Graph<'_, T>, iter: u64) -> Result<()> {
        if g.value(self.loss).get(0, 0).is_finite() {
            return Ok(());
        }
        let rows = g.value(self.rows);
        let bad = (0..rows.rows()).find(|&r| !rows.get(r, 0).is_finite()).unwrap_or(0);
        Err(Error::NonFiniteLoss {
            iter,
            t: self.ts.get(bad).copied().unwrap_or(f64::NAN),
            token: bad % self.tokens.max(1),
        })
    }
}

struct Draws<T> {
    null_clip: Vec<bool>,
    ts: Vec<f64>,
    x0: Mat<T>,
    eps: Mat<T>,
}

fn draw<T: Scalar>(clips: &[TrainClip], t_draws: usize, cfg_dropout: f64, noise: &NoiseSampler, rng: &mut ChaCha8Rng) -> Draws<T> {
    let null_clip: Vec<bool> = clips.iter().map(|_| rng.random::<f64>() < cfg_dropout).collect();
    let c_x = clips[0].latents.cols();
    let tokens: usize = clips.iter().map(TrainClip::len).sum();
    let rows = tokens * t_draws;
    let ts: Vec<f64> = (0..rows).map(|_| noise.sample(rng)).collect();
    let eps = Mat::from_fn(rows, c_x, |_, _| T::of(StandardNormal.sample(rng)));
    let mut x0 = Mat::zeros(rows, c_x);
    for d in 0..t_draws {
        let mut r = d * tokens;
        for c in clips {
            for i in 0..c.len() {
                for (o, &v) in x0.row_mut(r).iter_mut().zip(c.latents.row(i)) {
                    *o = T::of(v);
                }
                r += 1;
            }
        }
    }
    Draws { null_clip, ts, x0, eps }
}

fn replicate<T: Scalar>(g: &mut Graph<'_, T>, z: Var, draws: usize) -> Var {
    let tokens = g.value(z).rows();
    g.gather_rows(&[z], (0..tokens * draws).map(|r| (0u32, (r % tokens) as u32)).collect())
}

fn noisy<T: Scalar>(x0: &Mat<T>, eps: &Mat<T>, ts: &[f64]) -> Mat<T> {
    let mut out = x0.clone();
    for (r, &t) in ts.iter().enumerate() {
        let tt = T::of(t);
        for (o, &e) in out.row_mut(r).iter_mut().zip(eps.row(r)) {
            *o += tt * e;
        }
    }
    out
}

/// Stage-1 objective: `lambda(t) e^{-u(t)} |x0 - D(x0 + t eps, t, z)|^2 + u(t)`
/// per token and draw, summed over tokens, averaged over draws and clips.
pub fn stage1_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    arch: &Arch,
    clips: &[TrainClip],
    cfg: &Stage1Cfg,
    rope: &RopeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossParts> {
    let dr = draw::<T>(clips, cfg.t_draws, cfg.cfg_dropout, &cfg.noise, rng);
    let mut dropout = (cfg.dropout > 0.0).then(|| Dropout { rate: cfg.dropout, rng });
    let z = arch.conditions(g, clips, &dr.null_clip, rope, &mut dropout)?;
    let tokens = g.value(z).rows();
    let zr = replicate(g, z, cfg.t_draws);
    let xt = g.input(noisy(&dr.x0, &dr.eps, &dr.ts));
    let out = arch.head.forward(g, xt, &dr.ts, zr, &mut dropout)?;
    let x0 = g.input(dr.x0);
    let diff = g.sub(x0, out.denoised);
    let sq = g.row_sq_norm(diff);
    let neg_u = g.scale(out.uncertainty, -T::one());
    let eu = g.exp(neg_u);
    let weighted = g.mul(sq, eu);
    let sigma = arch.cfg.sigma_data;
    let weighted = g.scale_rows(weighted, dr.ts.iter().map(|&t| T::of(edm_weight(t, sigma))).collect());
    let rows = g.add(weighted, out.uncertainty);
    let total = g.sum(rows);
    let loss = g.scale(total, T::of(1.0 / (cfg.t_draws * clips.len()) as f64));
    Ok(LossParts {
        loss,
        rows,
        ts: dr.ts,
        dts: Vec::new(),
        tokens,
    })
}

/// Stage-2 objective: `w(t) d(G(x0 + t eps, t), sg G(x0 + r eps, r))` with
/// the pseudo-Huber distance `d`; the target is `x0` itself when `r = 0`.
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    arch: &Arch,
    teacher: &ParamStore<T>,
    clips: &[TrainClip],
    cfg: &Stage2Cfg,
    iters: u64,
    rope: &RopeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossParts> {
    let dr = draw::<T>(clips, cfg.t_draws, cfg.cfg_dropout, &cfg.noise, rng);
    let rs: Vec<f64> = dr.ts.iter().map(|&t| ect_map(t, iters, &cfg.map)).collect();

    // Teacher target, evaluated without dropout and outside the graph.
    let target = {
        let mut tg = Graph::new(teacher);
        let z = arch.conditions(&mut tg, clips, &dr.null_clip, rope, &mut None)?;
        let z = tg.value(z).clone();
        let tokens = z.rows();
        let live: Vec<usize> = (0..rs.len()).filter(|&r| rs[r] > 0.0).collect();
        let mut target = dr.x0.clone();
        if !live.is_empty() {
            let zl = z.select_rows(&live.iter().map(|&r| r % tokens).collect::<Vec<_>>());
            let x0l = dr.x0.select_rows(&live);
            let el = dr.eps.select_rows(&live);
            let rl: Vec<f64> = live.iter().map(|&r| rs[r]).collect();
            let xr = noisy(&x0l, &el, &rl);
            let out = arch.head.denoise(teacher, &xr, &rl, &zl)?;
            for (k, &r) in live.iter().enumerate() {
                target.row_mut(r).copy_from_slice(out.row(k));
            }
        }
        target
    };

    let mut dropout = (cfg.dropout > 0.0).then(|| Dropout { rate: cfg.dropout, rng });
    let z = if cfg.head_only {
        let mut vg = Graph::new(g_store(g)?);
        let z = arch.conditions(&mut vg, clips, &dr.null_clip, rope, &mut None)?;
        let zv = vg.value(z).clone();
        g.input(zv)
    } else {
        arch.conditions(g, clips, &dr.null_clip, rope, &mut dropout)?
    };
    let tokens = g.value(z).rows();
    let zr = replicate(g, z, cfg.t_draws);
    let xt = g.input(noisy(&dr.x0, &dr.eps, &dr.ts));
    let out = arch.head.forward(g, xt, &dr.ts, zr, &mut dropout)?;
    let tgt = g.input(target);
    let diff = g.sub(out.denoised, tgt);
    let ph = g.row_pseudo_huber(diff, T::of(cfg.nu));
    let sigma = arch.cfg.sigma_data;
    let rows = g.scale_rows(ph, dr.ts.iter().map(|&t| T::of(ect_weight(t, sigma))).collect());
    let total = g.sum(rows);
    let loss = g.scale(total, T::of(1.0 / (cfg.t_draws * clips.len()) as f64));
    let dts = dr.ts.iter().map(|&t| ect_gap(t, iters, &cfg.map)).collect();
    Ok(LossParts {
        loss,
        rows,
        ts: dr.ts,
        dts,
        tokens,
    })
}

fn g_store<'p, T: Scalar>(g: &Graph<'p, T>) -> Result<&'p ParamStore<T>> {
    g.params().ok_or_else(|| Error::Invalid("the student graph has no parameters".into()))
}

/// Decoupled weight decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Mat<T>>,
    pub v: Vec<Mat<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| Mat::zeros(t.rows(), t.cols())).collect();
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Mat<T>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (ob1, ob2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let decay = T::of(1.0 - lr * self.weight_decay);
        let step = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.eps);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let ps = p.as_mut_slice();
            let (ms, vs) = (m.as_mut_slice(), v.as_mut_slice());
            for (i, &gi) in g.as_slice().iter().enumerate() {
                ms[i] = b1 * ms[i] + ob1 * gi;
                vs[i] = b2 * vs[i] + ob2 * gi * gi;
                ps[i] = ps[i] * decay - step * ms[i] / ((vs[i] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Scales `grads` so their global norm is at most `max`; returns the norm
/// before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Mat<T>], max: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm().as_f64()).sum::<f64>().sqrt();
    if max > 0.0 && norm > max {
        let s = T::of(max / norm);
        grads.iter_mut().for_each(|g| g.scale_in_place(s));
    }
    norm
}

/// `target <- mu target + (1 - mu) source`.
pub fn ema_update<T: Scalar>(target: &mut ParamStore<T>, source: &ParamStore<T>, mu: f64) {
    let (a, b) = (T::of(mu), T::of(1.0 - mu));
    for (t, s) in target.tensors_mut().iter_mut().zip(source.tensors()) {
        for (x, &y) in t.as_mut_slice().iter_mut().zip(s.as_slice()) {
            *x = a * *x + b * y;
        }
    }
}

/// Supplies training batches deterministically by iteration.
pub trait ClipSource {
    fn batch(&mut self, iter: u64, size: usize) -> Result<Vec<TrainClip>>;
}

/// A fixed corpus, sampled with replacement per iteration.
pub struct CorpusSource {
    pub clips: Vec<TrainClip>,
    pub seed: u64,
}

impl ClipSource for CorpusSource {
    fn batch(&mut self, iter: u64, size: usize) -> Result<Vec<TrainClip>> {
        if self.clips.is_empty() {
            return Err(Error::Data("empty training corpus".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, iter));
        Ok((0..size).map(|_| self.clips[rng.random_range(0..self.clips.len())].clone()).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub batch: usize,
    pub lr: f64,
    pub lr_warmup: u64,
    /// Final fraction of the run over which the rate decays linearly to
    /// a tenth; 0 keeps it constant.
    pub lr_decay_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub ema_rate: f64,
    pub teacher_rate: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            batch: 8,
            lr: 1e-3,
            lr_warmup: 100,
            lr_decay_frac: 0.3,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.02,
            grad_clip: 1.0,
            ema_rate: 0.999,
            teacher_rate: 0.0,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, iter: u64, total: u64) -> f64 {
        let warm = if self.lr_warmup > 0 {
            ((iter + 1) as f64 / self.lr_warmup as f64).min(1.0)
        } else {
            1.0
        };
        let decay_start = (total as f64 * (1.0 - self.lr_decay_frac)) as u64;
        let decay = if self.lr_decay_frac > 0.0 && iter >= decay_start && total > decay_start {
            let f = (iter - decay_start) as f64 / (total - decay_start) as f64;
            1.0 - 0.9 * f
        } else {
            1.0
        };
        self.lr * warm * decay
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar> {
    pub student: ParamStore<T>,
    pub ema: ParamStore<T>,
    pub teacher: ParamStore<T>,
    pub opt: AdamW<T>,
    pub iter: u64,
    /// 1 or 2.
    pub stage: u8,
}

impl<T: Scalar> TrainState<T> {
    pub fn fresh(params: ParamStore<T>, opt: &OptimConfig) -> Self {
        Self {
            ema: params.clone(),
            teacher: params.clone(),
            opt: AdamW::new(&params, opt.lr, (opt.beta1, opt.beta2), opt.weight_decay),
            student: params,
            iter: 0,
            stage: 1,
        }
    }

    /// Stage-2 start: student, teacher and EMA all begin at the Stage-1
    /// weights (the sampling EMA of Stage 1); optimizer moments reset.
    pub fn from_stage1(stage1: &TrainState<T>, opt: &OptimConfig) -> Self {
        let init = stage1.ema.clone();
        Self {
            stage: 2,
            ..Self::fresh(init, opt)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iter: u64,
    pub loss: f64,
    pub grad_norm: f64,
    #[serde(rename = "Δt_mean")]
    pub dt_mean: f64,
}

pub enum Objective {
    Stage1(Stage1Cfg),
    Stage2(Stage2Cfg),
}

/// Loss and parameter gradients of one objective evaluation.
pub fn loss_and_grads<T: Scalar>(
    arch: &Arch,
    student: &ParamStore<T>,
    teacher: &ParamStore<T>,
    clips: &[TrainClip],
    objective: &Objective,
    iter: u64,
    rope: &RopeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, Vec<Mat<T>>)> {
    let mut g = Graph::new(student);
    let parts = match objective {
        Objective::Stage1(c) => stage1_loss(&mut g, arch, clips, c, rope, rng)?,
        Objective::Stage2(c) => stage2_loss(&mut g, arch, teacher, clips, c, iter, rope, rng)?,
    };
    parts.check_finite(&g, iter)?;
    let loss = g.value(parts.loss).get(0, 0).as_f64();
    let grads = g.backward(parts.loss).into_param_grads(student);
    Ok((loss, parts.mean_dt(), grads))
}

/// One optimizer step at `state.iter`.
pub fn train_step<T: Scalar>(
    arch: &Arch,
    state: &mut TrainState<T>,
    source: &mut dyn ClipSource,
    objective: &Objective,
    opt: &OptimConfig,
    total_iters: u64,
    rope: &RopeConfig,
) -> Result<StepLog> {
    let iter = state.iter;
    let clips = source.batch(iter, opt.batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opt.seed, iter));
    let (loss, dt_mean, mut grads) =
        loss_and_grads(arch, &state.student, &state.teacher, &clips, objective, iter, rope, &mut rng)?;
    let grad_norm = clip_grad_norm(&mut grads, opt.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::Numerical(format!("non-finite gradient norm at iteration {iter}")));
    }
    state.opt.update(&mut state.student, &grads, opt.lr_at(iter, total_iters));
    let warm = ((1 + iter) as f64 / (10 + iter) as f64).min(opt.ema_rate);
    ema_update(&mut state.ema, &state.student, warm);
    if state.stage == 2 {
        ema_update(&mut state.teacher, &state.student, opt.teacher_rate);
    }
    state.iter += 1;
    Ok(StepLog {
        iter,
        loss,
        grad_norm,
        dt_mean,
    })
}

/// Runs `state` forward until `total_iters`, reporting every step.
pub fn train<T: Scalar>(
    arch: &Arch,
    state: &mut TrainState<T>,
    source: &mut dyn ClipSource,
    objective: &Objective,
    opt: &OptimConfig,
    total_iters: u64,
    rope: &RopeConfig,
    mut on_step: impl FnMut(&StepLog, &TrainState<T>) -> Result<()>,
) -> Result<()> {
    while state.iter < total_iters {
        let log = train_step(arch, state, source, objective, opt, total_iters, rope)?;
        on_step(&log, state)?;
    }
    Ok(())
}
