use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RopeMode {
    None,
    Pi,
    Ntk,
}

impl std::str::FromStr for RopeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(RopeMode::None),
            "pi" => Ok(RopeMode::Pi),
            "ntk" => Ok(RopeMode::Ntk),
            other => Err(Error::Config(format!("unknown rope mode {other:?}"))),
        }
    }
}

/// Rotary position settings. `n_train` and `n_target` count frames; the
/// token budget of a sequence of `n` frames is `2n + 1` positions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub base: f64,
    pub mode: RopeMode,
    pub n_train: usize,
    pub n_target: usize,
    pub swa_window: Option<usize>,
}

impl RopeConfig {
    pub fn plain(n_train: usize) -> Self {
        Self {
            base: 10_000.0,
            mode: RopeMode::None,
            n_train,
            n_target: n_train,
            swa_window: None,
        }
    }

    pub fn validate(&self, head_dim: usize) -> Result<()> {
        if head_dim % 2 != 0 || head_dim < 4 && self.mode == RopeMode::Ntk {
            return Err(Error::Config(format!("rotary head dim {head_dim} must be even (and > 2 for NTK)")));
        }
        if !(self.base > 1.0) {
            return Err(Error::Config("rope base must exceed 1".into()));
        }
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be positive".into()));
        }
        if self.n_target < self.n_train {
            return Err(Error::Config(format!(
                "n_target {} is below n_train {}",
                self.n_target, self.n_train
            )));
        }
        if self.swa_window == Some(0) {
            return Err(Error::Config("swa window must be positive".into()));
        }
        Ok(())
    }

    /// Context extension factor `n_target / n_train`.
    pub fn ratio(&self) -> f64 {
        self.n_target as f64 / self.n_train as f64
    }

    /// Base after NTK rescaling; the plain base otherwise.
    pub fn effective_base(&self, head_dim: usize) -> f64 {
        match self.mode {
            RopeMode::Ntk => {
                let d = head_dim as f64;
                self.base * self.ratio().powf(d / (d - 2.0))
            }
            _ => self.base,
        }
    }

    /// Multiplier applied to position indices (PI); 1 otherwise.
    pub fn position_scale(&self) -> f64 {
        match self.mode {
            RopeMode::Pi => self.n_train as f64 / self.n_target as f64,
            _ => 1.0,
        }
    }

    /// `phi_l = base^(-2l / d_h)` for `l = 0..d_h/2`.
    pub fn frequencies(&self, head_dim: usize) -> Vec<f64> {
        let base = self.effective_base(head_dim);
        (0..head_dim / 2)
            .map(|l| base.powf(-2.0 * l as f64 / head_dim as f64))
            .collect()
    }

    /// Largest admissible token position (1-based).
    pub fn max_positions(&self) -> usize {
        if self.mode == RopeMode::None && self.swa_window.is_none() {
            2 * self.n_train + 1
        } else {
            2 * self.n_target + 1
        }
    }

    pub fn check_positions(&self, positions: usize) -> Result<()> {
        let limit = self.max_positions();
        if positions > limit {
            let hint = if self.mode == RopeMode::None && self.swa_window.is_none() {
                "enable rope_mode=pi|ntk or a swa_window with a larger n_target"
            } else {
                "raise n_target"
            };
            return Err(Error::ContextOverflow { positions, limit, hint });
        }
        Ok(())
    }

    /// Cosines and sines for each position, `positions.len() x d_h/2`,
    /// row-major, evaluated in f64.
    pub fn tables<T: Scalar>(&self, positions: &[usize], head_dim: usize) -> (Vec<T>, Vec<T>) {
        let freqs = self.frequencies(head_dim);
        let scale = self.position_scale();
        let mut cos = Vec::with_capacity(positions.len() * freqs.len());
        let mut sin = Vec::with_capacity(positions.len() * freqs.len());
        for &p in positions {
            let pos = p as f64 * scale;
            for &f in &freqs {
                let a = pos * f;
                cos.push(T::of(a.cos()));
                sin.push(T::of(a.sin()));
            }
        }
        (cos, sin)
    }
}

/// Rotates one head vector to `position` under `cfg`.
pub fn rope_rotate<T: Scalar>(v: &[T], position: usize, cfg: &RopeConfig) -> Vec<T> {
    let dh = v.len();
    let (cos, sin) = cfg.tables::<T>(&[position], dh);
    let mut out = v.to_vec();
    for l in 0..dh / 2 {
        let (a, b) = (v[2 * l], v[2 * l + 1]);
        out[2 * l] = a * cos[l] - b * sin[l];
        out[2 * l + 1] = a * sin[l] + b * cos[l];
    }
    out
}
