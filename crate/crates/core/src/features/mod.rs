//! Semantic features: typed specs, the reference extractor over segmented
//! objects, temporal differencing, datasets and the learned surrogate.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segment::{segment_image, ColorObject, ColorPalette, Image, SegmentError};

pub mod bench;
pub mod dataset;
pub mod surrogate;

pub use bench::{benchmark_extractors, SpeedReport, SpeedRow};
pub use dataset::{build_dataset, DatasetConfig, FeatureDataset, Split};
pub use surrogate::{evaluate_surrogate, train_surrogate, ErrorTable, Surrogate, SurrogateHyper};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("extractor failed: {0}")]
    Extractor(String),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

pub(crate) fn io_err(path: &Path) -> impl Fn(std::io::Error) -> FeatureError + '_ {
    move |source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn json_err(path: &Path) -> impl Fn(serde_json::Error) -> FeatureError + '_ {
    move |source| FeatureError::Json {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(json_err(path))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(json_err(path))?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    Boolean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SingleFrame,
    MultiFrame,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Select {
    Largest,
    Smallest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    /// Centroid column as a fraction of the image width.
    CentroidX,
    /// Centroid row as a fraction of the image height.
    CentroidY,
    /// Angle from vertical of the anchor-to-object vector, radians,
    /// positive to the right.
    AngleFromAnchor,
    /// 1 when the object is found, 0 otherwise.
    Present,
    /// Object area over image area.
    AreaRatio,
}

/// How a single-frame feature is read off the segmented objects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectBinding {
    pub label: String,
    #[serde(default = "default_select")]
    pub select: Select,
    pub quantity: Quantity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<String>,
}

fn default_select() -> Select {
    Select::Largest
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDef {
    pub name: String,
    pub kind: FeatureKind,
    pub provenance: Provenance,
    /// Raw-value interval mapped linearly onto [0, 1].
    pub range: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_binding: Option<ObjectBinding>,
    /// Single-frame feature differenced by a multi-frame entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lag: Option<usize>,
}

impl FeatureDef {
    pub fn normalize(&self, raw: f64) -> f64 {
        let [lo, hi] = self.range;
        ((raw - lo) / (hi - lo)).clamp(0.0, 1.0)
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        let [lo, hi] = self.range;
        lo + v * (hi - lo)
    }
}

pub const DEFAULT_VELOCITY_RANGE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub features: Vec<FeatureDef>,
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for f in &self.features {
            if !seen.insert(f.name.as_str()) {
                return Err(FeatureError::Config(format!("duplicate feature name {}", f.name)));
            }
            if !(f.range[1] > f.range[0]) {
                return Err(FeatureError::Config(format!("empty range for {}", f.name)));
            }
        }
        for f in &self.features {
            if f.provenance == Provenance::MultiFrame {
                let base = f.base.as_deref().ok_or_else(|| {
                    FeatureError::Config(format!("multi-frame feature {} has no base", f.name))
                })?;
                let ok = self
                    .features
                    .iter()
                    .any(|b| b.name == base && b.provenance == Provenance::SingleFrame);
                if !ok {
                    return Err(FeatureError::Config(format!(
                        "{} references unknown single-frame base {base}",
                        f.name
                    )));
                }
                if f.lag.unwrap_or(1) == 0 {
                    return Err(FeatureError::Config(format!("{} has lag 0", f.name)));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: FeatureSpec = read_json(path)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn single_frame(&self) -> FeatureSpec {
        FeatureSpec {
            features: self
                .features
                .iter()
                .filter(|f| f.provenance == Provenance::SingleFrame)
                .cloned()
                .collect(),
        }
    }

    pub fn multi_frame_names(&self) -> Vec<String> {
        self.features
            .iter()
            .filter(|f| f.provenance == Provenance::MultiFrame)
            .map(|f| f.name.clone())
            .collect()
    }

    /// Largest frame lag among multi-frame entries (0 when there are none).
    pub fn max_lag(&self) -> usize {
        self.features
            .iter()
            .filter(|f| f.provenance == Provenance::MultiFrame)
            .map(|f| f.lag.unwrap_or(1))
            .max()
            .unwrap_or(0)
    }

    /// Bundled cart-pole spec bound to the rasterizer's palette.
    pub fn cart_pole() -> Self {
        let single = |name: &str, binding: ObjectBinding, range: [f64; 2]| FeatureDef {
            name: name.into(),
            kind: FeatureKind::Continuous,
            provenance: Provenance::SingleFrame,
            range,
            object_binding: Some(binding),
            base: None,
            lag: None,
        };
        let multi = |name: &str, base: &str, r: f64| FeatureDef {
            name: name.into(),
            kind: FeatureKind::Continuous,
            provenance: Provenance::MultiFrame,
            range: [-r, r],
            object_binding: None,
            base: Some(base.into()),
            lag: Some(1),
        };
        let theta = crate::env::THETA_LIMIT;
        FeatureSpec {
            features: vec![
                single(
                    "cart_position",
                    ObjectBinding {
                        label: "black".into(),
                        select: Select::Largest,
                        quantity: Quantity::CentroidX,
                        anchor: None,
                    },
                    [0.0, 1.0],
                ),
                multi("cart_velocity", "cart_position", 0.01),
                single(
                    "pole_angle",
                    ObjectBinding {
                        label: "tan".into(),
                        select: Select::Largest,
                        quantity: Quantity::AngleFromAnchor,
                        anchor: Some("gray".into()),
                    },
                    [-theta, theta],
                ),
                multi("pole_angular_velocity", "pole_angle", 0.05),
            ],
        }
    }
}

/// Feature values aligned with a spec; `None` marks an absent object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<Option<f64>>,
}

impl FeatureVector {
    /// Policy input: absent entries become the midpoint 0.5.
    pub fn to_input(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.unwrap_or(0.5)).collect()
    }
}

/// Anything that labels a single frame with single-frame feature values.
pub trait FrameExtractor {
    fn feature_names(&self) -> Vec<String>;
    fn extract(&mut self, frame: &Image) -> Result<Vec<Option<f64>>>;
}

/// Native reference extractor driven by the feature spec's object bindings.
#[derive(Clone, Debug)]
pub struct ReferenceExtractor {
    pub spec: FeatureSpec,
    pub palette: ColorPalette,
}

impl ReferenceExtractor {
    /// Keeps the single-frame entries of `spec`; each must carry a binding
    /// whose labels exist in the palette.
    pub fn new(spec: &FeatureSpec, palette: ColorPalette) -> Result<Self> {
        spec.validate()?;
        let single = spec.single_frame();
        for f in &single.features {
            let b = f.object_binding.as_ref().ok_or_else(|| {
                FeatureError::Config(format!("feature {} has no object binding", f.name))
            })?;
            for label in std::iter::once(&b.label).chain(b.anchor.as_ref()) {
                if !palette.contains(label) {
                    return Err(FeatureError::Config(format!(
                        "feature {} references unknown palette label {label}",
                        f.name
                    )));
                }
            }
            if b.quantity == Quantity::AngleFromAnchor && b.anchor.is_none() {
                return Err(FeatureError::Config(format!("feature {} needs an anchor", f.name)));
            }
        }
        Ok(ReferenceExtractor {
            spec: single,
            palette,
        })
    }

    pub fn extract_objects(&self, objects: &[ColorObject], width: usize, height: usize) -> Vec<Option<f64>> {
        self.spec
            .features
            .iter()
            .map(|f| {
                let b = f.object_binding.as_ref().expect("validated binding");
                let obj = pick(objects, &b.label, b.select);
                let raw = match b.quantity {
                    Quantity::Present => Some(obj.is_some() as u8 as f64),
                    Quantity::CentroidX => obj.map(|o| (o.centroid[0] + 0.5) / width as f64),
                    Quantity::CentroidY => obj.map(|o| (o.centroid[1] + 0.5) / height as f64),
                    Quantity::AreaRatio => obj.map(|o| o.area as f64 / (width * height) as f64),
                    Quantity::AngleFromAnchor => {
                        let anchor = pick(objects, b.anchor.as_deref().unwrap_or_default(), Select::Largest);
                        match (obj, anchor) {
                            (Some(o), Some(a)) => Some(
                                (o.centroid[0] - a.centroid[0]).atan2(a.centroid[1] - o.centroid[1]),
                            ),
                            _ => None,
                        }
                    }
                };
                raw.map(|r| match f.kind {
                    FeatureKind::Boolean => (r > 0.5) as u8 as f64,
                    FeatureKind::Continuous => f.normalize(r),
                })
            })
            .collect()
    }
}

fn pick<'a>(objects: &'a [ColorObject], label: &str, select: Select) -> Option<&'a ColorObject> {
    let mut best: Option<&ColorObject> = None;
    for o in objects.iter().filter(|o| o.color_label == label) {
        best = match best {
            None => Some(o),
            Some(b) => {
                let better = match select {
                    Select::Largest => o.area > b.area,
                    Select::Smallest => o.area < b.area,
                };
                Some(if better { o } else { b })
            }
        };
    }
    best
}

impl FrameExtractor for ReferenceExtractor {
    fn feature_names(&self) -> Vec<String> {
        self.spec.names()
    }

    fn extract(&mut self, frame: &Image) -> Result<Vec<Option<f64>>> {
        extract_single(frame, self)
    }
}

/// Segments `frame` and reads every single-frame feature.
pub fn extract_single(frame: &Image, extractor: &ReferenceExtractor) -> Result<Vec<Option<f64>>> {
    let seg = segment_image(frame, &extractor.palette)?;
    Ok(extractor.extract_objects(&seg.objects, frame.width, frame.height))
}

/// Assembles the full feature vector in spec order from single-frame values
/// at time `t` and `t - lag`. Single-frame entries come from the later frame;
/// each multi-frame entry is `(base_t - base_{t-lag}) / lag` normalized over
/// its range.
pub fn compose_temporal(
    spec: &FeatureSpec,
    earlier: &[Option<f64>],
    later: &[Option<f64>],
) -> Result<FeatureVector> {
    let single = spec.single_frame();
    if earlier.len() != single.len() || later.len() != single.len() {
        return Err(FeatureError::InvalidInput(format!(
            "expected {} single-frame values",
            single.len()
        )));
    }
    let index = |name: &str| single.features.iter().position(|f| f.name == name);
    let mut values = Vec::with_capacity(spec.len());
    for f in &spec.features {
        values.push(match f.provenance {
            Provenance::SingleFrame => later[index(&f.name).expect("single entry")],
            Provenance::MultiFrame => {
                let i = index(f.base.as_deref().unwrap_or_default()).ok_or_else(|| {
                    FeatureError::Config(format!("{} has no single-frame base", f.name))
                })?;
                let lag = f.lag.unwrap_or(1) as f64;
                match (earlier[i], later[i]) {
                    (Some(a), Some(b)) => Some(f.normalize((b - a) / lag)),
                    _ => None,
                }
            }
        });
    }
    Ok(FeatureVector { values })
}

/// Reference temporal extraction over a frame pair one lag apart.
pub fn extract_temporal(
    earlier: &Image,
    later: &Image,
    spec: &FeatureSpec,
    extractor: &ReferenceExtractor,
) -> Result<FeatureVector> {
    if earlier.width != later.width || earlier.height != later.height {
        return Err(FeatureError::InvalidInput("frame size mismatch".into()));
    }
    let a = extract_single(earlier, extractor)?;
    let b = extract_single(later, extractor)?;
    compose_temporal(spec, &a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{render, CartPoleState, RenderConfig};

    fn extractor() -> ReferenceExtractor {
        ReferenceExtractor::new(&FeatureSpec::cart_pole(), ColorPalette::default()).unwrap()
    }

    #[test]
    fn spec_validation() {
        let spec = FeatureSpec::cart_pole();
        spec.validate().unwrap();
        assert_eq!(spec.multi_frame_names(), vec!["cart_velocity", "pole_angular_velocity"]);
        let mut dup = spec.clone();
        dup.features[1].name = "cart_position".into();
        assert!(dup.validate().is_err());
        let mut orphan = spec.clone();
        orphan.features[1].base = Some("nope".into());
        assert!(orphan.validate().is_err());
        let mut bad_label = spec.clone();
        bad_label.features[0].object_binding.as_mut().unwrap().label = "chartreuse".into();
        assert!(matches!(
            ReferenceExtractor::new(&bad_label, ColorPalette::default()),
            Err(FeatureError::Config(_))
        ));
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<FeatureSpec>(&text).unwrap(), spec);
    }

    #[test]
    fn centred_upright_frame() {
        let frame = render(&CartPoleState::zero(), &RenderConfig::default());
        let v = extract_single(&frame, &extractor()).unwrap();
        assert_eq!(v[0], Some(0.5));
        assert!((v[1].unwrap() - 0.5).abs() < 1e-12);
        let blank = Image::new(160, 120, [255, 255, 255]);
        assert_eq!(extract_single(&blank, &extractor()).unwrap(), vec![None, None]);
    }

    #[test]
    fn temporal_composition() {
        let spec = FeatureSpec::cart_pole();
        let ex = extractor();
        let frame = render(&CartPoleState::zero(), &RenderConfig::default());
        let v = extract_temporal(&frame, &frame, &spec, &ex).unwrap();
        let single = extract_single(&frame, &ex).unwrap();
        assert_eq!(v.values, vec![single[0], Some(0.5), single[1], Some(0.5)]);

        let v = compose_temporal(&spec, &[Some(0.5), Some(0.5)], &[Some(0.505), Some(0.5)]).unwrap();
        assert!((v.values[1].unwrap() - 0.75).abs() < 1e-9);
        let v = compose_temporal(&spec, &[None, Some(0.5)], &[Some(0.5), Some(0.5)]).unwrap();
        assert_eq!(v.values[1], None);
        let small = Image::new(10, 10, [255, 255, 255]);
        assert!(extract_temporal(&small, &frame, &spec, &ex).is_err());
    }
}
