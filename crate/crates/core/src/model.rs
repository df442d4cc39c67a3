//! The assembled network: vision aggregator, interleaved backbone and
//! diffusion head, plus the fixed preprocessing (codec statistics and PCA)
//! that travels with a checkpoint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::codec::{CodecConfig, CodecStats};
use crate::error::{Error, Result};
use crate::head::{DiffusionHead, HeadConfig};
use crate::nn::Dropout;
use crate::params::ParamStore;
use crate::rope::RopeConfig;
use crate::scalar::Scalar;
use crate::tensor::Mat;
use crate::vision::{Aggregator, AggregatorConfig, PcaProjector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub codec: CodecConfig,
    pub frame_height: usize,
    pub frame_width: usize,
    pub patch: usize,
    pub pca_cev: f64,
    pub agg_width: usize,
    pub agg_heads: usize,
    pub c_v: usize,
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub head_blocks: usize,
    pub head_width: usize,
    pub sigma_data: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            codec: CodecConfig::default(),
            frame_height: 32,
            frame_width: 32,
            patch: 8,
            pca_cev: 0.7,
            agg_width: 32,
            agg_heads: 2,
            c_v: 32,
            depth: 2,
            d_model: 64,
            heads: 4,
            head_blocks: 3,
            head_width: 128,
            sigma_data: 0.5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn grid_rows(&self) -> usize {
        self.frame_height / self.patch
    }

    pub fn grid_cols(&self) -> usize {
        self.frame_width / self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.frame_height % self.patch != 0 || self.frame_width % self.patch != 0 {
            return Err(Error::Config("frame size must be a multiple of the patch size".into()));
        }
        if self.grid_rows() % 2 != 0 || self.grid_cols() % 2 != 0 {
            return Err(Error::Config("the patch grid must have even sides for 2x2 merging".into()));
        }
        Ok(())
    }
}

/// Parameter-free structure; the same `Arch` indexes student, EMA and
/// teacher parameter stores.
#[derive(Clone, Debug)]
pub struct Arch {
    pub cfg: ModelConfig,
    pub aggregator: Aggregator,
    pub backbone: Backbone,
    pub head: DiffusionHead,
}

impl Arch {
    /// Builds the structure and freshly initialized parameters; `pca_dim`
    /// is the number of retained principal directions.
    pub fn init<T: Scalar>(cfg: &ModelConfig, pca_dim: usize) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let aggregator = Aggregator::new(
            &mut store,
            AggregatorConfig {
                grid_rows: cfg.grid_rows(),
                grid_cols: cfg.grid_cols(),
                in_channels: 2 * pca_dim,
                width: cfg.agg_width,
                heads: cfg.agg_heads,
                out_dim: cfg.c_v,
            },
            &mut rng,
        )?;
        let backbone = Backbone::new(
            &mut store,
            BackboneConfig {
                depth: cfg.depth,
                d_model: cfg.d_model,
                heads: cfg.heads,
                c_x: cfg.codec.latent_dim(),
                c_v: cfg.c_v,
            },
            &mut rng,
        )?;
        let head = DiffusionHead::new(
            &mut store,
            HeadConfig {
                blocks: cfg.head_blocks,
                width: cfg.head_width,
                c_x: cfg.codec.latent_dim(),
                z_dim: 2 * cfg.d_model,
                sigma_data: cfg.sigma_data,
            },
            &mut rng,
        )?;
        Ok((
            Self {
                cfg: cfg.clone(),
                aggregator,
                backbone,
                head,
            },
            store,
        ))
    }

    pub fn c_x(&self) -> usize {
        self.cfg.codec.latent_dim()
    }

    pub fn z_dim(&self) -> usize {
        2 * self.cfg.d_model
    }

    /// Teacher-forced conditions `z_i` for a batch of equal-length clips.
    /// `null_clip[b]` replaces every vision token of clip `b` by the null
    /// embedding. Returns a `(clips * n) x z_dim` node, clip-major.
    pub fn conditions<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        clips: &[TrainClip],
        null_clip: &[bool],
        rope: &RopeConfig,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        let b = clips.len();
        let n = clips.first().map_or(0, |c| c.len());
        if b == 0 || n == 0 || clips.iter().any(|c| c.len() != n) || null_clip.len() != b {
            return Err(Error::Shape("a batch needs non-empty clips of equal length".into()));
        }
        let cells = clips[0].features[0].rows();
        let fch = clips[0].features[0].cols();
        let mut feat = Vec::with_capacity(b * n * cells * fch);
        for c in clips {
            for f in &c.features {
                feat.extend(f.as_slice().iter().map(|&v| T::of(v)));
            }
        }
        let feats = g.input(Mat::from_vec(b * n * cells, fch, feat)?);
        let vis = self.aggregator.forward(g, feats, b * n);
        let null = g.param(self.backbone.null_id());
        let vis_idx = (0..b * n)
            .map(|r| if null_clip[r / n] { (1u32, 0u32) } else { (0u32, r as u32) })
            .collect();
        let vis = g.gather_rows(&[vis, null], vis_idx);
        let vis = self.backbone.embed_vision(g, vis);

        // Audio tokens x_1..x_{n-1} of every clip; x_n is never an input.
        let c_x = self.c_x();
        let mut aud = Vec::with_capacity(b * (n - 1) * c_x);
        for c in clips {
            for i in 0..n - 1 {
                aud.extend(c.latents.row(i).iter().map(|&v| T::of(v)));
            }
        }
        let aud = g.input(Mat::from_vec(b * (n - 1), c_x, aud)?);
        let aud = self.backbone.embed_audio(g, aud);
        let bos = g.param(self.backbone.bos_id());

        let len = 2 * n;
        let mut idx = Vec::with_capacity(b * len);
        for c in 0..b {
            idx.push((2u32, 0u32));
            for i in 0..n {
                idx.push((1, (c * n + i) as u32));
                if i + 1 < n {
                    idx.push((0, (c * (n - 1) + i) as u32));
                }
            }
        }
        let seq = g.gather_rows(&[aud, vis, bos], idx);
        let positions: Vec<usize> = (0..b * len).map(|r| r % len + 1).collect();
        let h = self.backbone.forward_full(g, seq, &positions, Some(len), rope, dropout)?;
        // z_i = [out at x_{i-1} (or BOS), out at v_i].
        let left = (0..b * n).map(|r| (0u32, ((r / n) * len + 2 * (r % n)) as u32)).collect();
        let right = (0..b * n).map(|r| (0u32, ((r / n) * len + 2 * (r % n) + 1) as u32)).collect();
        let l = g.gather_rows(&[h], left);
        let r = g.gather_rows(&[h], right);
        Ok(g.concat_cols(&[l, r]))
    }
}

/// One training clip: conditioned vision features and standardized
/// latents, frame-aligned.
#[derive(Clone, Debug)]
pub struct TrainClip {
    pub features: Vec<Mat<f64>>,
    pub latents: Mat<f64>,
}

impl TrainClip {
    pub fn len(&self) -> usize {
        self.latents.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.rows() == 0
    }
}

/// A trained (or freshly initialized) model ready for sampling.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub arch: Arch,
    pub params: ParamStore<T>,
    pub stats: CodecStats,
    pub pca: PcaProjector,
}

impl<T: Scalar> Model<T> {
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            params: self.params.cast(),
            stats: self.stats.clone(),
            pca: self.pca.clone(),
        }
    }
}
