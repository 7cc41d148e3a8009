//! Probe frames that candidate extractors are compared on.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{io_err, Result, VlmError};
use crate::env::{CartPole, RenderConfig};
use crate::segment::{find_color_objects, ColorObject, Image};

#[derive(Clone, Debug)]
pub struct ProbeFrame {
    pub path: PathBuf,
    pub image: Image,
    pub objects: Vec<ColorObject>,
}

impl ProbeFrame {
    pub fn new(path: PathBuf, image: Image) -> Result<Self> {
        let objects = find_color_objects(&image)?;
        Ok(ProbeFrame { path, image, objects })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(path.to_path_buf(), Image::load(path)?)
    }

    /// Single-frame wire payload.
    pub fn payload(&self) -> Value {
        json!({
            "image_path": self.path.display().to_string(),
            "image_width": self.image.width,
            "image_height": self.image.height,
            "objects": self.objects,
        })
    }
}

/// Index file of a probe directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeIndex {
    #[serde(default)]
    pub seed: Option<u64>,
    pub frames: Vec<String>,
    /// Consecutive frame pairs for multi-frame candidates.
    #[serde(default)]
    pub pairs: Vec<[usize; 2]>,
}

#[derive(Clone, Debug)]
pub struct ProbeSet {
    pub seed: Option<u64>,
    pub frames: Vec<ProbeFrame>,
    pub pairs: Vec<[usize; 2]>,
}

pub const PROBE_INDEX: &str = "probes.json";

impl ProbeSet {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(PROBE_INDEX);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let index: ProbeIndex = serde_json::from_str(&text)
            .map_err(|e| VlmError::Config(format!("{}: {e}", path.display())))?;
        let frames = index
            .frames
            .iter()
            .map(|f| ProbeFrame::load(&dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        for p in &index.pairs {
            if p[0] >= frames.len() || p[1] >= frames.len() {
                return Err(VlmError::Config(format!("probe pair {p:?} out of range")));
            }
        }
        Ok(ProbeSet {
            seed: index.seed,
            frames,
            pairs: index.pairs,
        })
    }

    /// Writes frames and the index under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut names = Vec::with_capacity(self.frames.len());
        for f in &self.frames {
            let name = f
                .path
                .file_name()
                .ok_or_else(|| VlmError::Config(format!("probe path {} has no file name", f.path.display())))?
                .to_string_lossy()
                .to_string();
            f.image.save(&dir.join(&name))?;
            names.push(name);
        }
        let index = ProbeIndex {
            seed: self.seed,
            frames: names,
            pairs: self.pairs.clone(),
        };
        let path = dir.join(PROBE_INDEX);
        let text = serde_json::to_string_pretty(&index).expect("index serializes");
        std::fs::write(&path, text + "\n").map_err(io_err(&path))
    }

    /// Uniform-random-policy cart-pole rollouts until `n` frames and `n`
    /// within-episode consecutive pairs exist. Frames are written to `dir`.
    pub fn cart_pole(seed: u64, n: usize, render: RenderConfig, dir: &Path) -> Result<Self> {
        if n == 0 {
            return Err(VlmError::Config("probe count must be positive".into()));
        }
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut env = CartPole::new(rng.gen(), render);
        let mut frames = Vec::new();
        let mut pairs = Vec::new();
        let mut fresh = true;
        while frames.len() < n || pairs.len() < n {
            let path = dir.join(format!("probe_{:04}.png", frames.len()));
            let image = env.render();
            image.save(&path)?;
            if !fresh && pairs.len() < n {
                pairs.push([frames.len() - 1, frames.len()]);
            }
            frames.push(ProbeFrame::new(path, image)?);
            fresh = false;
            let (_, _, done) = env
                .step(rng.gen_range(0..2))
                .map_err(|e| VlmError::Config(e.to_string()))?;
            if done {
                env.reset_next();
                fresh = true;
            }
        }
        let set = ProbeSet {
            seed: Some(seed),
            frames,
            pairs,
        };
        set.save(dir)?;
        Ok(set)
    }
}
