//! Small layer building blocks shared by the backbone, head and aggregator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    /// Uniform in `+-gain * sqrt(3 / fan_in)`.
    FanIn(f64),
    Zero,
}

pub fn init_mat<T: Scalar>(rows: usize, cols: usize, init: Init, rng: &mut ChaCha8Rng) -> Mat<T> {
    let bound = match init {
        Init::Xavier => (6.0 / (rows + cols) as f64).sqrt(),
        Init::FanIn(gain) => gain * (3.0 / rows as f64).sqrt(),
        Init::Zero => return Mat::zeros(rows, cols),
    };
    Mat::from_fn(rows, cols, |_, _| T::of(rng.random_range(-bound..bound)))
}

/// `y = x W + b`, with `W` stored `in x out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), init_mat(fan_in, fan_out, init, rng))?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Mat::zeros(1, fan_out))?)
        } else {
            None
        };
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    /// Single-row evaluation without a graph.
    pub fn apply_row<T: Scalar>(&self, store: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let w = store.get(self.w);
        let mut out = match self.b {
            Some(b) => store.get(b).as_slice().to_vec(),
            None => vec![T::zero(); self.fan_out],
        };
        for (i, &xi) in x.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            for (o, &wv) in out.iter_mut().zip(w.row(i)) {
                *o += xi * wv;
            }
        }
        out
    }
}

/// Inverted dropout with an explicit random stream; `None` disables it.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    pub fn apply<T: Scalar>(&mut self, g: &mut Graph<'_, T>, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        let (r, c) = g.value(x).shape();
        let keep = T::of(1.0 / (1.0 - self.rate));
        let rate = self.rate;
        let rng = &mut *self.rng;
        let mask = Mat::from_fn(r, c, |_, _| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        });
        let m = g.input(mask);
        g.mul(x, m)
    }
}

pub fn maybe_dropout<T: Scalar>(g: &mut Graph<'_, T>, x: Var, d: &mut Option<Dropout<'_>>) -> Var {
    match d {
        Some(d) => d.apply(g, x),
        None => x,
    }
}

/// Root-mean-square normalization of a single row with gain.
pub fn rms_norm_row<T: Scalar>(x: &[T], gain: &[T], eps: T) -> Vec<T> {
    let d = T::of(x.len() as f64);
    let ms = x.iter().map(|&v| v * v).sum::<T>() / d;
    let inv = T::one() / (ms + eps).sqrt();
    x.iter().zip(gain).map(|(&v, &g)| v * inv * g).collect()
}
