//! Causal transformer over interleaved `[BOS, v_1, x_1, v_2, x_2, ...]`
//! tokens: RMSNorm pre-normalization, SwiGLU MLP, rotary positions and an
//! append-only key/value cache for one-token-at-a-time decoding.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{attend_head, rotate_pairs, AttnMask, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{init_mat, maybe_dropout, rms_norm_row, Dropout, Init, Linear};
use crate::params::{ParamId, ParamStore};
use crate::rope::RopeConfig;
use crate::scalar::Scalar;
use crate::tensor::Mat;

pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub c_x: usize,
    pub c_v: usize,
}

impl BackboneConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// `8/3 d_model` rounded to a multiple of 8.
    pub fn mlp_hidden(&self) -> usize {
        let raw = 8.0 * self.d_model as f64 / 3.0;
        ((raw / 8.0).round() as usize).max(1) * 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 || self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "d_model {} with {} heads needs an even per-head width",
                self.d_model, self.heads
            )));
        }
        if self.c_x == 0 || self.c_v == 0 {
            return Err(Error::Config("token widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layer {
    norm1: ParamId,
    qkv: Linear,
    attn_out: Linear,
    norm2: ParamId,
    w_gate: Linear,
    w_up: Linear,
    w_down: Linear,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    audio_in: Linear,
    vision_in: Linear,
    bos: ParamId,
    null: ParamId,
    layers: Vec<Layer>,
}

/// Which vision inputs a stream sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NullMode {
    /// Vision tokens pass through unchanged.
    None,
    /// Every vision token is replaced by the learnable null embedding.
    All,
}

/// Replaces vision tokens (rows of `v`) by `null` under `NullMode::All`.
pub fn substitute_null<T: Scalar>(v: &Mat<T>, null: &[T], mode: NullMode) -> Mat<T> {
    match mode {
        NullMode::None => v.clone(),
        NullMode::All => Mat::from_fn(v.rows(), v.cols(), |_, c| null[c]),
    }
}

/// Per-layer key/value history of one stream.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    keys: Vec<Mat<T>>,
    values: Vec<Mat<T>>,
    len: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(depth: usize, d_model: usize) -> Self {
        Self {
            keys: (0..depth).map(|_| Mat::zeros(0, d_model)).collect(),
            values: (0..depth).map(|_| Mat::zeros(0, d_model)).collect(),
            len: 0,
        }
    }

    /// Positions consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl Backbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let f = cfg.mlp_hidden();
        // Residual outputs are scaled down with depth.
        let resid = Init::FanIn(1.0 / (2.0 * cfg.depth.max(1) as f64).sqrt());
        let mut layers = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let p = format!("bb.{l}");
            layers.push(Layer {
                norm1: store.add(format!("{p}.norm1"), Mat::filled(1, d, T::one()))?,
                qkv: Linear::new(store, &format!("{p}.qkv"), d, 3 * d, false, Init::Xavier, rng)?,
                attn_out: Linear::new(store, &format!("{p}.attn_out"), d, d, false, resid, rng)?,
                norm2: store.add(format!("{p}.norm2"), Mat::filled(1, d, T::one()))?,
                w_gate: Linear::new(store, &format!("{p}.w_gate"), d, f, false, Init::Xavier, rng)?,
                w_up: Linear::new(store, &format!("{p}.w_up"), d, f, false, Init::Xavier, rng)?,
                w_down: Linear::new(store, &format!("{p}.w_down"), f, d, false, resid, rng)?,
            });
        }
        Ok(Self {
            audio_in: Linear::new(store, "bb.audio_in", cfg.c_x, d, true, Init::Xavier, rng)?,
            vision_in: Linear::new(store, "bb.vision_in", cfg.c_v, d, true, Init::Xavier, rng)?,
            bos: store.add("bb.bos", init_mat(1, d, Init::FanIn(1.0), rng))?,
            null: store.add("bb.null", init_mat(1, cfg.c_v, Init::FanIn(1.0), rng))?,
            layers,
            cfg,
        })
    }

    pub fn null_id(&self) -> ParamId {
        self.null
    }

    pub fn bos_id(&self) -> ParamId {
        self.bos
    }

    pub fn embed_audio<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        self.audio_in.forward(g, x)
    }

    pub fn embed_vision<T: Scalar>(&self, g: &mut Graph<'_, T>, v: Var) -> Var {
        self.vision_in.forward(g, v)
    }

    pub fn embed_audio_row<T: Scalar>(&self, store: &ParamStore<T>, x: &[T]) -> Vec<T> {
        self.audio_in.apply_row(store, x)
    }

    pub fn embed_vision_row<T: Scalar>(&self, store: &ParamStore<T>, v: &[T]) -> Vec<T> {
        self.vision_in.apply_row(store, v)
    }

    pub fn bos_row<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<T> {
        store.get(self.bos).as_slice().to_vec()
    }

    pub fn null_row<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<T> {
        store.get(self.null).as_slice().to_vec()
    }

    /// Transformer over already-embedded tokens. Row `r` sits at 1-based
    /// position `positions[r]`; independent sequences of `segment` rows may
    /// be stacked.
    pub fn forward_full<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        positions: &[usize],
        segment: Option<usize>,
        rope: &RopeConfig,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        let rows = g.value(x).rows();
        if positions.len() != rows {
            return Err(Error::Shape(format!("{} positions for {rows} tokens", positions.len())));
        }
        if let Some(&max) = positions.iter().max() {
            rope.check_positions(max)?;
        }
        let d = self.cfg.d_model;
        let heads = self.cfg.heads;
        let (cos, sin) = rope.tables::<T>(positions, self.cfg.head_dim());
        let mask = AttnMask::Causal {
            window: rope.swa_window,
            segment,
        };
        let eps = T::of(NORM_EPS);
        let mut h = x;
        for layer in &self.layers {
            let n1 = g.param(layer.norm1);
            let a = g.rms_norm(h, n1, eps);
            let qkv = layer.qkv.forward(g, a);
            let q = g.slice_cols(qkv, 0, d);
            let k = g.slice_cols(qkv, d, d);
            let v = g.slice_cols(qkv, 2 * d, d);
            let q = g.rope(q, cos.clone(), sin.clone(), heads);
            let k = g.rope(k, cos.clone(), sin.clone(), heads);
            let att = g.attention(q, k, v, heads, mask);
            let att = layer.attn_out.forward(g, att);
            let att = maybe_dropout(g, att, dropout);
            h = g.add(h, att);

            let n2 = g.param(layer.norm2);
            let b = g.rms_norm(h, n2, eps);
            let gate = layer.w_gate.forward(g, b);
            let gate = g.silu(gate);
            let up = layer.w_up.forward(g, b);
            let m = g.mul(gate, up);
            let m = layer.w_down.forward(g, m);
            let m = maybe_dropout(g, m, dropout);
            h = g.add(h, m);
        }
        Ok(h)
    }

    /// Consumes one embedded token at the next position of `cache` and
    /// returns the output there.
    pub fn forward_step<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        token: &[T],
        cache: &mut KvCache<T>,
        rope: &RopeConfig,
    ) -> Result<Vec<T>> {
        let pos = cache.len + 1;
        rope.check_positions(pos)?;
        if token.len() != self.cfg.d_model || cache.keys.len() != self.layers.len() {
            return Err(Error::Shape("token or cache does not match the backbone".into()));
        }
        let d = self.cfg.d_model;
        let heads = self.cfg.heads;
        let dh = self.cfg.head_dim();
        let (cos, sin) = rope.tables::<T>(&[pos], dh);
        let eps = T::of(NORM_EPS);
        let mut h = token.to_vec();
        let mut probs = vec![T::zero(); pos];
        for (l, layer) in self.layers.iter().enumerate() {
            let a = rms_norm_row(&h, store.get(layer.norm1).as_slice(), eps);
            let qkv = layer.qkv.apply_row(store, &a);
            let mut q = Mat::row_vector(qkv[..d].to_vec());
            let mut k = Mat::row_vector(qkv[d..2 * d].to_vec());
            rotate_pairs(&mut q, &cos, &sin, heads, false);
            rotate_pairs(&mut k, &cos, &sin, heads, false);
            cache.keys[l].push_row(k.as_slice())?;
            cache.values[l].push_row(&qkv[2 * d..])?;
            let hi = pos;
            let lo = rope.swa_window.map_or(0, |w| hi.saturating_sub(w));
            let mut att = vec![T::zero(); d];
            for head in 0..heads {
                let o = attend_head(
                    q.as_slice(),
                    &cache.keys[l],
                    &cache.values[l],
                    lo,
                    hi,
                    head,
                    dh,
                    &mut probs[..hi - lo],
                );
                att[head * dh..(head + 1) * dh].copy_from_slice(&o);
            }
            let att = layer.attn_out.apply_row(store, &att);
            h.iter_mut().zip(&att).for_each(|(x, a)| *x += *a);

            let b = rms_norm_row(&h, store.get(layer.norm2).as_slice(), eps);
            let gate = layer.w_gate.apply_row(store, &b);
            let up = layer.w_up.apply_row(store, &b);
            let m: Vec<T> = gate
                .iter()
                .zip(&up)
                .map(|(&gv, &u)| gv * crate::autograd::sigmoid(gv) * u)
                .collect();
            let m = layer.w_down.apply_row(store, &m);
            h.iter_mut().zip(&m).for_each(|(x, a)| *x += *a);
        }
        cache.len += 1;
        Ok(h)
    }

    pub fn new_cache<T: Scalar>(&self) -> KvCache<T> {
        KvCache::new(self.layers.len(), self.cfg.d_model)
    }

    /// Embeds `[BOS, v_1, x_1, ..., v_n, (x_n)]` for a single clip into a
    /// graph; `audio` holds the audio tokens actually present.
    pub fn embed_interleaved<T: Scalar>(&self, g: &mut Graph<'_, T>, audio: Var, vision: Var) -> Result<(Var, Vec<usize>)> {
        let na = g.value(audio).rows();
        let nv = g.value(vision).rows();
        if na + 1 < nv || na > nv {
            return Err(Error::Shape(format!("{na} audio tokens cannot interleave with {nv} vision tokens")));
        }
        let a = self.embed_audio(g, audio);
        let v = self.embed_vision(g, vision);
        let bos = g.param(self.bos);
        let mut idx = vec![(2u32, 0u32)];
        for i in 0..nv {
            idx.push((1, i as u32));
            if i < na {
                idx.push((0, i as u32));
            }
        }
        let n = idx.len();
        Ok((g.gather_rows(&[a, v, bos], idx), (1..=n).collect()))
    }
}
