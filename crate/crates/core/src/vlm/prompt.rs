//! Prompt templates and request assembly.

use serde::{Deserialize, Serialize};

use super::{Result, VlmError};
use crate::features::FeatureSpec;
use crate::segment::{ColorObject, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Step1Features,
    JudgeMultiFrame,
    Step2Single,
    Step2Multi,
}

impl TemplateId {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::Step1Features => "step1_features",
            TemplateId::JudgeMultiFrame => "judge_multi_frame",
            TemplateId::Step2Single => "step2_single",
            TemplateId::Step2Multi => "step2_multi",
        }
    }
}

/// One chat request. `sample` numbers repeated identical queries so each
/// repetition has its own recorded answer.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptRequest {
    pub template: TemplateId,
    pub domain: String,
    pub text: String,
    pub images: Vec<Image>,
    /// Segmentation JSON, one per image for step-2 templates.
    pub segmentations: Vec<String>,
    pub temperature: f64,
    pub model: String,
    pub sample: usize,
}

impl PromptRequest {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VlmError::Config(m));
        match self.template {
            TemplateId::Step1Features if self.images.len() != 1 => {
                bad(format!("step1 prompt needs exactly one image, got {}", self.images.len()))
            }
            TemplateId::Step2Single | TemplateId::Step2Multi
                if self.images.is_empty() || self.images.len() != self.segmentations.len() =>
            {
                bad(format!(
                    "step2 prompt needs image/segmentation pairs, got {} images and {} segmentations",
                    self.images.len(),
                    self.segmentations.len()
                ))
            }
            _ if !(0.0..=2.0).contains(&self.temperature) => bad(format!("temperature {}", self.temperature)),
            _ => Ok(()),
        }
    }
}

const STEP1: &str = "\
You will see one frame from a control task. Later you will receive sequences of such frames, \
so features that depend on motion between frames are allowed.

Decide which quantities an agent needs to choose its next action. Prefer positions of the \
objects that matter and quantities derived from them. Leave out anything that cannot be read \
from frames or that does not change the next decision.

Task description:
{domain}

Answer with the list only, one line per feature, in the form
State element 1: ...
State element 2: ...
Do not explain. Use brackets only for units or discrete categories.";

const JUDGE: &str = "\
Below are the features chosen for a control task. A single-frame feature can be read from one \
image. A multi-frame feature needs two or more frames, for example a velocity.

Task description:
{domain}

Features:
{features}

Which features are multi-frame? Answer with their numbers separated by commas, or with the \
word none.";

const SEGMENTS: &str = "\
Every frame comes with a list of ColorObject records produced by a segmentation routine:
  color: [r, g, b]
  area: pixel count
  bbox: [x, y, w, h]
  centroid: [x, y] (mean pixel position)
  color_label: nearest named color
  contour: boundary pixels [[x, y], ...]
The list contains every flat-colored region, including decoration such as scores and borders.";

const STEP2_SINGLE: &str = "\
Write a Python 3 program that reads one JSON object from standard input:
  {\"image_path\": str, \"image_width\": int, \"image_height\": int, \"objects\": [ColorObject, ...]}
and prints one JSON object to standard output:
  {\"features\": {name: number or null}}

{segments}

Task description:
{domain}

Features to extract (single frame):
{features}

Describe positions as fractions of the image width and height. Angles are in radians. Return null \
for a feature whose object is missing. First look at the example images and decide which objects \
are decoration, then select the relevant objects by traits that generalize to other frames. Use \
only the Python standard library.

Examples follow, one image and its objects each.";

const STEP2_MULTI: &str = "\
Write a Python 3 program that reads one JSON object from standard input:
  {\"frames\": [frame1, frame2], \"single\": [features1, features2]}
where each frame has the single-frame layout {\"image_path\", \"image_width\", \"image_height\", \
\"objects\"} and each features entry is the output of the single-frame extractor below on that \
frame. Print {\"features\": {name: number or null}} with only the multi-frame features.

{segments}

Task description:
{domain}

Multi-frame features to extract:
{features}

The frames are consecutive. Compute motion as the change from frame1 to frame2 of the \
corresponding single-frame value. Return null when either value is null. If the single-frame \
extractor already covers every feature, answer None.

Single-frame extractor:
{helper}";

fn feature_list(spec: &FeatureSpec, names: &[String]) -> String {
    names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let kind = spec
                .features
                .iter()
                .find(|f| &f.name == n)
                .map(|f| format!("{:?}", f.kind).to_lowercase())
                .unwrap_or_default();
            format!("{}. {n} ({kind})", i + 1)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn objects_json(objects: &[ColorObject]) -> String {
    serde_json::to_string(objects).expect("objects serialize")
}

pub fn step1(domain: &str, image: Image, model: &str, sample: usize) -> PromptRequest {
    PromptRequest {
        template: TemplateId::Step1Features,
        domain: domain.to_string(),
        text: STEP1.replace("{domain}", domain.trim()),
        images: vec![image],
        segmentations: Vec::new(),
        temperature: 1.0,
        model: model.to_string(),
        sample,
    }
}

pub fn judge(domain: &str, spec: &FeatureSpec, model: &str, sample: usize) -> PromptRequest {
    PromptRequest {
        template: TemplateId::JudgeMultiFrame,
        domain: domain.to_string(),
        text: JUDGE
            .replace("{domain}", domain.trim())
            .replace("{features}", &feature_list(spec, &spec.names())),
        images: Vec::new(),
        segmentations: Vec::new(),
        temperature: 1.0,
        model: model.to_string(),
        sample,
    }
}

pub fn step2_single(
    domain: &str,
    spec: &FeatureSpec,
    names: &[String],
    examples: &[(Image, Vec<ColorObject>)],
    model: &str,
    sample: usize,
) -> PromptRequest {
    PromptRequest {
        template: TemplateId::Step2Single,
        domain: domain.to_string(),
        text: STEP2_SINGLE
            .replace("{segments}", SEGMENTS)
            .replace("{domain}", domain.trim())
            .replace("{features}", &feature_list(spec, names)),
        images: examples.iter().map(|e| e.0.clone()).collect(),
        segmentations: examples.iter().map(|e| objects_json(&e.1)).collect(),
        temperature: 0.0,
        model: model.to_string(),
        sample,
    }
}

#[allow(clippy::too_many_arguments)]
pub fn step2_multi(
    domain: &str,
    spec: &FeatureSpec,
    names: &[String],
    examples: &[(Image, Vec<ColorObject>)],
    helper: &str,
    model: &str,
    sample: usize,
) -> PromptRequest {
    PromptRequest {
        template: TemplateId::Step2Multi,
        domain: domain.to_string(),
        text: STEP2_MULTI
            .replace("{segments}", SEGMENTS)
            .replace("{domain}", domain.trim())
            .replace("{features}", &feature_list(spec, names))
            .replace("{helper}", helper.trim()),
        images: examples.iter().map(|e| e.0.clone()).collect(),
        segmentations: examples.iter().map(|e| objects_json(&e.1)).collect(),
        temperature: 0.0,
        model: model.to_string(),
        sample,
    }
}

/// First fenced code block of an answer, or the whole answer when it has
/// none.
pub fn extract_code(answer: &str) -> String {
    let Some(open) = answer.find("```") else {
        return answer.trim().to_string();
    };
    let rest = &answer[open + 3..];
    let body = match rest.find('\n') {
        Some(nl) => &rest[nl + 1..],
        None => rest,
    };
    match body.find("```") {
        Some(close) => body[..close].to_string(),
        None => body.to_string(),
    }
}
