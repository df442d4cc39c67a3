//! Seed-regenerable toy datasets: manifests, preprocessing fits and
//! training-clip sources.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Preprocess;
use crate::codec::fit_stats_raw;
use crate::config::short_hash;
use crate::error::{Error, Result};
use crate::model::TrainClip;
use crate::tensor::Mat;
use crate::toy::ToyProcess;
use crate::train::{derive_seed, ClipSource};
use crate::vision::{clip_features, extract_grid, fit_pca, render, EventTrack, Firing, RenderedClip, SceneFamily, SceneSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub id: usize,
    pub split: Split,
    /// Stratum used to keep split ratios per scene family.
    pub family: String,
    pub spec: SceneSpec,
    pub events: EventTrack,
    /// Raw oracle latents, one row per frame.
    pub latents: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub clips: Vec<ClipRecord>,
}

/// Scene stratum: emitter count and whether any emitter is periodic.
pub fn family_of(spec: &SceneSpec) -> String {
    let periodic = spec.emitters.iter().any(|e| matches!(e.firing, Firing::Periodic { .. }));
    format!("{}{}", spec.emitters.len(), if periodic { "p" } else { "r" })
}

impl DatasetManifest {
    /// Renders `clips` scenes; every `1/test_fraction`-th clip of each
    /// stratum goes to the test split.
    pub fn generate(
        family: &SceneFamily,
        toy: &ToyProcess,
        clips: usize,
        frames: usize,
        seed: u64,
        test_fraction: f64,
    ) -> Result<Self> {
        if clips == 0 {
            return Err(Error::Config("a dataset needs at least one clip".into()));
        }
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let stride = if test_fraction > 0.0 { (1.0 / test_fraction).round() as usize } else { usize::MAX };
        let mut per_family: BTreeMap<String, usize> = BTreeMap::new();
        let mut out = Vec::with_capacity(clips);
        for id in 0..clips {
            let spec = family.sample(derive_seed(seed, id as u64), frames);
            let fam = family_of(&spec);
            let k = per_family.entry(fam.clone()).or_insert(0);
            let split = if *k % stride == stride - 1 { Split::Test } else { Split::Train };
            *k += 1;
            let r = render(&spec, toy)?;
            out.push(ClipRecord {
                id,
                split,
                family: fam,
                events: r.track,
                latents: (0..r.latents.rows()).map(|i| r.latents.row(i).to_vec()).collect(),
                spec,
            });
        }
        Ok(Self { clips: out })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for c in &self.clips {
            s.push_str(&serde_json::to_string(c)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(short_hash(self.to_jsonl()?.as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::Data(format!("cannot write manifest {}: {e}", path.display())))?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut clips = Vec::new();
        for (no, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            clips.push(
                serde_json::from_str(&line).map_err(|e| Error::Data(format!("manifest line {}: {e}", no + 1)))?,
            );
        }
        Ok(Self { clips })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.clips.iter().filter(move |c| c.split == split)
    }
}

impl ClipRecord {
    pub fn latents(&self) -> Result<Mat<f64>> {
        Mat::from_rows(&self.latents)
    }
}

/// Fits the PCA on grid cells and the latent statistics on rendered clips.
pub fn fit_preprocess(family: &SceneFamily, toy: &ToyProcess, clips: usize, frames: usize, seed: u64, patch: usize, cev: f64) -> Result<Preprocess> {
    if clips == 0 {
        return Err(Error::Config("preprocessing needs at least one clip".into()));
    }
    let mut cells: Vec<Vec<f64>> = Vec::new();
    let mut raws = Vec::with_capacity(clips);
    for k in 0..clips {
        let r = render(&family.sample(derive_seed(seed ^ 0xF17, k as u64), frames), toy)?;
        for f in &r.frames {
            let g = extract_grid(f, patch)?;
            cells.extend((0..g.cells.rows()).map(|i| g.cells.row(i).to_vec()));
        }
        raws.push(r.latents);
    }
    let pca = fit_pca(&Mat::from_rows(&cells)?, cev)?;
    let stats = fit_stats_raw(&raws.iter().collect::<Vec<_>>())?;
    Ok(Preprocess { stats, pca })
}

impl Preprocess {
    pub fn train_clip(&self, r: &RenderedClip, patch: usize) -> Result<TrainClip> {
        let features = clip_features(&r.frames, patch, &self.pca)?;
        let mut latents = Mat::zeros(r.latents.rows(), r.latents.cols());
        for i in 0..r.latents.rows() {
            latents.row_mut(i).copy_from_slice(&self.stats.standardize(r.latents.row(i)));
        }
        Ok(TrainClip { features, latents })
    }
}

/// Fresh scenes every iteration, seeded by `(seed, iter, slot)`.
pub struct FamilySource {
    pub family: SceneFamily,
    pub toy: ToyProcess,
    pub pre: Preprocess,
    pub frames: usize,
    pub patch: usize,
    pub seed: u64,
}

impl ClipSource for FamilySource {
    fn batch(&mut self, iter: u64, size: usize) -> Result<Vec<TrainClip>> {
        (0..size)
            .map(|b| {
                let s = derive_seed(derive_seed(self.seed, iter), b as u64);
                let r = render(&self.family.sample(s, self.frames), &self.toy)?;
                self.pre.train_clip(&r, self.patch)
            })
            .collect()
    }
}
