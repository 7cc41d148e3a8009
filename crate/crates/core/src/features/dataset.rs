//! Image/feature datasets collected from behaviour-policy rollouts.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::surrogate::{downsample, POOL};
use super::{io_err, json_err, read_json, write_json, FeatureError, FeatureSpec, FrameExtractor, Result};
use crate::env::{CartPole, RenderConfig};
use crate::segment::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n: usize,
    pub seed: u64,
    /// Train and validation fractions; the rest is test.
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 2],
    #[serde(default)]
    pub render: RenderConfig,
}

fn default_fractions() -> [f64; 2] {
    [0.7, 0.2]
}

impl DatasetConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        DatasetConfig {
            n,
            seed,
            fractions: default_fractions(),
            render: RenderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub frame: String,
    pub state: [f64; 4],
    pub values: Vec<Option<f64>>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    /// Single-frame features labelled in every sample.
    pub spec: FeatureSpec,
    pub samples: Vec<Sample>,
    /// Downsampled surrogate inputs, aligned with `samples`.
    pub inputs: Vec<Vec<f32>>,
    pub input_width: usize,
    pub input_height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub spec: FeatureSpec,
}

impl FeatureDataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    pub fn manifest(&self, seed: u64) -> Manifest {
        Manifest {
            n: self.samples.len(),
            train: self.indices(Split::Train).len(),
            val: self.indices(Split::Val).len(),
            test: self.indices(Split::Test).len(),
            seed,
            spec: self.spec.clone(),
        }
    }

    /// Writes `labels.jsonl` and `manifest.json`; frames are written by
    /// [`build_dataset`] when it is given an output directory.
    pub fn save_labels(&self, dir: &Path, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("labels.jsonl");
        let mut w = BufWriter::new(std::fs::File::create(&path).map_err(io_err(&path))?);
        for s in &self.samples {
            serde_json::to_writer(&mut w, s).map_err(json_err(&path))?;
            w.write_all(b"\n").map_err(io_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
        write_json(&dir.join("manifest.json"), &self.manifest(seed))
    }

    /// Loads a dataset directory, re-reading every frame.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        let path = dir.join("labels.jsonl");
        let file = std::fs::File::open(&path).map_err(io_err(&path))?;
        let mut samples = Vec::with_capacity(manifest.n);
        let mut inputs = Vec::with_capacity(manifest.n);
        let mut dims = (0, 0);
        for line in BufReader::new(file).lines() {
            let line = line.map_err(io_err(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            let s: Sample = serde_json::from_str(&line).map_err(json_err(&path))?;
            if s.values.len() != manifest.spec.len() {
                return Err(FeatureError::InvalidInput(format!(
                    "sample {} has {} values",
                    s.frame,
                    s.values.len()
                )));
            }
            let img = Image::load(&dir.join(&s.frame))?;
            dims = (img.width / POOL, img.height / POOL);
            inputs.push(downsample(&img));
            samples.push(s);
        }
        Ok(FeatureDataset {
            spec: manifest.spec,
            samples,
            inputs,
            input_width: dims.0,
            input_height: dims.1,
        })
    }
}

/// Rolls out a uniform-random behaviour policy, labels every frame with
/// `extractor` and assigns shuffled 70/20/10 splits. Frames are written as
/// PNG under `out_dir/frames` when a directory is given.
pub fn build_dataset(
    cfg: &DatasetConfig,
    spec: &FeatureSpec,
    extractor: &mut dyn FrameExtractor,
    out_dir: Option<&Path>,
) -> Result<FeatureDataset> {
    if cfg.n < 100 {
        return Err(FeatureError::Config(format!("dataset needs at least 100 frames, got {}", cfg.n)));
    }
    let single = spec.single_frame();
    if extractor.feature_names() != single.names() {
        return Err(FeatureError::Config(format!(
            "extractor features {:?} do not match spec {:?}",
            extractor.feature_names(),
            single.names()
        )));
    }
    if let Some(dir) = out_dir {
        let frames = dir.join("frames");
        std::fs::create_dir_all(&frames).map_err(io_err(&frames))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut env = CartPole::new(rng.gen(), cfg.render);
    let mut samples = Vec::with_capacity(cfg.n);
    let mut inputs = Vec::with_capacity(cfg.n);
    while samples.len() < cfg.n {
        let frame = env.render();
        let values = extractor.extract(&frame)?;
        let name = format!("frames/{:06}.png", samples.len());
        if let Some(dir) = out_dir {
            frame.save(&dir.join(&name))?;
        }
        inputs.push(downsample(&frame));
        samples.push(Sample {
            frame: name,
            state: env.state.vector(),
            values,
            split: Split::Train,
        });
        let (_, _, done) = env
            .step(rng.gen_range(0..2))
            .map_err(|e| FeatureError::InvalidInput(e.to_string()))?;
        if done {
            env.reset_next();
        }
    }

    let mut order: Vec<usize> = (0..cfg.n).collect();
    order.shuffle(&mut rng);
    let n_train = (cfg.n as f64 * cfg.fractions[0]).round() as usize;
    let n_val = (cfg.n as f64 * cfg.fractions[1]).round() as usize;
    for (rank, &i) in order.iter().enumerate() {
        samples[i].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let ds = FeatureDataset {
        spec: single,
        samples,
        inputs,
        input_width: cfg.render.width / POOL,
        input_height: cfg.render.height / POOL,
    };
    if let Some(dir) = out_dir {
        ds.save_labels(dir, cfg.seed)?;
    }
    Ok(ds)
}
