//! Learned single-frame feature regressor over downsampled grayscale frames.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{FeatureDataset, Split};
use super::{read_json, write_json, FeatureError, FeatureKind, FeatureSpec, Result};
use crate::diff::{backward, Tape};
use crate::nn::{Adam, Mlp, MlpF32};
use crate::segment::Image;

/// Block size of the grayscale average pooling.
pub const POOL: usize = 4;

/// `POOL x POOL` block means of the luminance, row-major.
pub fn downsample(img: &Image) -> Vec<f32> {
    let (w, h) = (img.width / POOL, img.height / POOL);
    let mut sums = vec![0u32; w * h];
    for y in 0..h * POOL {
        let row = &img.pixels[y * img.width..y * img.width + w * POOL];
        let out = &mut sums[(y / POOL) * w..(y / POOL + 1) * w];
        for (bx, block) in row.chunks_exact(POOL).enumerate() {
            let mut s = 0u32;
            for p in block {
                s += p[0] as u32 + p[1] as u32 + p[2] as u32;
            }
            out[bx] += s;
        }
    }
    let scale = 1.0 / (765.0 * (POOL * POOL) as f32);
    sums.into_iter().map(|s| s as f32 * scale).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateHyper {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for SurrogateHyper {
    fn default() -> Self {
        SurrogateHyper {
            hidden: vec![128, 128],
            lr: 1e-3,
            batch: 64,
            max_epochs: 150,
            patience: 15,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Surrogate {
    pub spec: FeatureSpec,
    pub input_width: usize,
    pub input_height: usize,
    pub input_mean: Vec<f32>,
    pub input_scale: f32,
    pub net: Mlp,
    #[serde(skip)]
    fast: Option<MlpF32>,
}

impl PartialEq for Surrogate {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.input_mean == other.input_mean
            && self.input_scale == other.input_scale
            && self.net == other.net
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_error: f64,
}

impl Surrogate {
    fn fast(&self) -> &MlpF32 {
        self.fast.as_ref().expect("surrogate constructed through a loader")
    }

    fn with_fast(mut self) -> Self {
        self.fast = Some(self.net.to_f32());
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Surrogate = read_json(path)?;
        if s.net.output_dim() != s.spec.len() || s.net.input_dim() != s.input_mean.len() {
            return Err(FeatureError::Config("surrogate checkpoint shapes do not match".into()));
        }
        Ok(s.with_fast())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    fn normalize_into(&self, input: &[f32], out: &mut Vec<f32>) {
        out.extend(
            input
                .iter()
                .zip(&self.input_mean)
                .map(|(x, m)| (x - m) * self.input_scale),
        );
    }

    fn finish(&self, raw: &[f32]) -> Vec<f64> {
        raw.iter()
            .zip(&self.spec.features)
            .map(|(&z, f)| match f.kind {
                FeatureKind::Continuous => (z as f64).clamp(0.0, 1.0),
                FeatureKind::Boolean => (z > 0.0) as u8 as f64,
            })
            .collect()
    }

    /// Predictions for already-downsampled inputs, one row per input.
    pub fn predict_inputs(&self, inputs: &[&[f32]]) -> Vec<Vec<f64>> {
        let mut x = Vec::with_capacity(inputs.len() * self.input_mean.len());
        for i in inputs {
            self.normalize_into(i, &mut x);
        }
        let raw = self.fast().forward_batch(&x, inputs.len());
        raw.chunks_exact(self.spec.len().max(1))
            .map(|r| self.finish(r))
            .collect()
    }

    /// One pass over the whole batch; row `i` equals the prediction for
    /// `frames[i]` alone.
    pub fn predict_batch(&self, frames: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let mut inputs = Vec::with_capacity(frames.len());
        for f in frames {
            if f.width / POOL != self.input_width || f.height / POOL != self.input_height {
                return Err(FeatureError::InvalidInput(format!(
                    "frame {}x{} does not match surrogate input",
                    f.width, f.height
                )));
            }
            inputs.push(downsample(f));
        }
        let refs: Vec<&[f32]> = inputs.iter().map(Vec::as_slice).collect();
        Ok(self.predict_inputs(&refs))
    }
}

/// Trains the regressor with masked MSE (continuous heads) and logistic
/// cross-entropy (boolean heads), early-stopping on validation error.
pub fn train_surrogate(
    ds: &FeatureDataset,
    hyper: &SurrogateHyper,
    mut log: impl FnMut(&EpochLog),
) -> Result<Surrogate> {
    let train = ds.indices(Split::Train);
    if train.is_empty() {
        return Err(FeatureError::Config("empty training split".into()));
    }
    let nf = ds.spec.len();
    for (j, f) in ds.spec.features.iter().enumerate() {
        if train.iter().all(|&i| ds.samples[i].values[j].is_none()) {
            return Err(FeatureError::Config(format!(
                "feature {} is absent in every training sample",
                f.name
            )));
        }
    }
    let dim = ds.inputs[0].len();
    let mut mean = vec![0f64; dim];
    for &i in &train {
        for (m, &x) in mean.iter_mut().zip(&ds.inputs[i]) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let mut var = 0f64;
    for &i in &train {
        for (m, &x) in mean.iter().zip(&ds.inputs[i]) {
            var += (x as f64 - m).powi(2);
        }
    }
    let std = (var / (train.len() * dim) as f64).sqrt().max(1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut sizes = vec![dim];
    sizes.extend(&hyper.hidden);
    sizes.push(nf);
    let mut model = Surrogate {
        spec: ds.spec.clone(),
        input_width: ds.input_width,
        input_height: ds.input_height,
        input_mean: mean.iter().map(|&m| m as f32).collect(),
        input_scale: (1.0 / std) as f32,
        net: Mlp::new(&sizes, 1.0, &mut rng),
        fast: None,
    };

    let boolean: Vec<bool> = ds
        .spec
        .features
        .iter()
        .map(|f| f.kind == FeatureKind::Boolean)
        .collect();
    let mut opt = Adam::new(model.net.param_count(), hyper.lr);
    let mut best = (f64::INFINITY, model.net.params.clone());
    let mut since_best = 0;
    let val = ds.indices(Split::Val);
    let mut order = train.clone();
    let mut xbuf = Vec::new();
    for epoch in 0..hyper.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(hyper.batch.max(1)) {
            let b = chunk.len();
            xbuf.clear();
            for &i in chunk {
                for (x, m) in ds.inputs[i].iter().zip(&model.input_mean) {
                    xbuf.push(((x - m) * model.input_scale) as f64);
                }
            }
            let mut target = vec![0.0; b * nf];
            let mut weight = vec![0.0; b * nf];
            let mut is_bool = vec![0.0; b * nf];
            for j in 0..nf {
                let valid = chunk.iter().filter(|&&i| ds.samples[i].values[j].is_some()).count();
                for (r, &i) in chunk.iter().enumerate() {
                    if let Some(v) = ds.samples[i].values[j] {
                        target[r * nf + j] = v;
                        weight[r * nf + j] = 1.0 / (valid as f64 * nf as f64);
                    }
                    is_bool[r * nf + j] = boolean[j] as u8 as f64;
                }
            }
            let mut tape = Tape::with_capacity(64, 4 * model.net.param_count());
            let p = tape.row(&model.net.params);
            let x = tape.input(&xbuf, b, dim);
            let z = model.net.record(&mut tape, p, x);
            let t = tape.input(&target, b, nf);
            let diff = tape.sub(z, t);
            let sq = tape.square(diff);
            let sp = tape.softplus(z);
            let tz = tape.mul(t, z);
            let ce = tape.sub(sp, tz);
            let bm = tape.input(&is_bool, b, nf);
            let cm: Vec<f64> = is_bool.iter().map(|v| 1.0 - v).collect();
            let cm = tape.input(&cm, b, nf);
            let a = tape.mul(sq, cm);
            let c = tape.mul(ce, bm);
            let terms = tape.add(a, c);
            let w = tape.input(&weight, b, nf);
            let wt = tape.mul(terms, w);
            let loss = tape.sum(wt);
            let lv = tape.scalar(loss);
            if !lv.is_finite() {
                return Err(FeatureError::Numeric(format!("surrogate loss {lv} at epoch {epoch}")));
            }
            let g = backward(&tape, loss).map_err(|e| FeatureError::Numeric(e.to_string()))?;
            let grad = g.get(p).to_vec();
            opt.step(&mut model.net.params, &grad);
            total += lv;
            batches += 1;
        }
        model = model.with_fast();
        let val_error = if val.is_empty() {
            total / batches as f64
        } else {
            evaluate_indices(&model, ds, &val).mean_error()
        };
        log(&EpochLog {
            epoch,
            train_loss: total / batches as f64,
            val_error,
        });
        if val_error < best.0 {
            best = (val_error, model.net.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hyper.patience {
                break;
            }
        }
    }
    model.net.params = best.1;
    Ok(model.with_fast())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub name: String,
    pub kind: FeatureKind,
    pub n: usize,
    /// Mean squared error on the normalized scale (continuous features).
    pub mse: Option<f64>,
    /// Fraction correct (boolean features).
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub rows: Vec<ErrorRow>,
}

impl ErrorTable {
    /// Mean of continuous MSEs and boolean error rates.
    pub fn mean_error(&self) -> f64 {
        let errs: Vec<f64> = self
            .rows
            .iter()
            .filter_map(|r| r.mse.or(r.accuracy.map(|a| 1.0 - a)))
            .collect();
        errs.iter().sum::<f64>() / errs.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,kind,n,mse_x1e-3,accuracy\n");
        for r in &self.rows {
            let kind = match r.kind {
                FeatureKind::Continuous => "continuous",
                FeatureKind::Boolean => "boolean",
            };
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.name,
                kind,
                r.n,
                r.mse.map(|m| format!("{:.3}", m * 1e3)).unwrap_or_default(),
                r.accuracy.map(|a| format!("{a:.3}")).unwrap_or_default()
            ));
        }
        out
    }
}

impl fmt::Display for ErrorTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>8} {:>14} {:>10}", "feature", "n", "MSE (x1e-3)", "accuracy")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<28} {:>8} {:>14} {:>10}",
                r.name,
                r.n,
                r.mse.map(|m| format!("{:.3}", m * 1e3)).unwrap_or_else(|| "-".into()),
                r.accuracy.map(|a| format!("{a:.3}")).unwrap_or_else(|| "-".into())
            )?;
        }
        Ok(())
    }
}

fn evaluate_indices(model: &Surrogate, ds: &FeatureDataset, idx: &[usize]) -> ErrorTable {
    let mut preds = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(256) {
        let refs: Vec<&[f32]> = chunk.iter().map(|&i| ds.inputs[i].as_slice()).collect();
        preds.extend(model.predict_inputs(&refs));
    }
    let predict = |k: usize, j: usize| preds[k][j];
    error_table(&ds.spec, ds, idx, predict)
}

/// Error table of an arbitrary predictor `(position in idx, feature) -> value`.
pub fn error_table(
    spec: &FeatureSpec,
    ds: &FeatureDataset,
    idx: &[usize],
    predict: impl Fn(usize, usize) -> f64,
) -> ErrorTable {
    let rows = spec
        .features
        .iter()
        .enumerate()
        .map(|(j, f)| {
            let mut n = 0;
            let mut acc = 0.0;
            for (k, &i) in idx.iter().enumerate() {
                if let Some(t) = ds.samples[i].values[j] {
                    n += 1;
                    let p = predict(k, j);
                    acc += match f.kind {
                        FeatureKind::Continuous => (p - t).powi(2),
                        FeatureKind::Boolean => ((p > 0.5) == (t > 0.5)) as u8 as f64,
                    };
                }
            }
            let value = if n > 0 { Some(acc / n as f64) } else { None };
            ErrorRow {
                name: f.name.clone(),
                kind: f.kind,
                n,
                mse: if f.kind == FeatureKind::Continuous { value } else { None },
                accuracy: if f.kind == FeatureKind::Boolean { value } else { None },
            }
        })
        .collect();
    ErrorTable { rows }
}

/// Per-feature errors of the surrogate on one split.
pub fn evaluate_surrogate(model: &Surrogate, ds: &FeatureDataset, split: Split) -> Result<ErrorTable> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(FeatureError::InvalidInput(format!("split {split:?} is empty")));
    }
    if model.spec.names() != ds.spec.names() {
        return Err(FeatureError::Config("surrogate and dataset features differ".into()));
    }
    Ok(evaluate_indices(model, ds, &idx))
}
