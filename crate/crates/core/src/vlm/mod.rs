//! Vision-language-model orchestration: prompt assembly, feature proposal
//! voting, multi-frame judging, extractor code generation and candidate
//! selection over a probe set.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureDef, FeatureError, FeatureKind, FeatureSpec, Provenance, DEFAULT_VELOCITY_RANGE};
use crate::segment::SegmentError;

pub mod bundle;
pub mod candidate;
pub mod pipeline;
pub mod probe;
pub mod prompt;
pub mod transport;

pub use bundle::{run_walkthrough, Bundle, Selection, Walkthrough};
pub use candidate::{
    run_candidate, run_candidate_multi, select_candidate, CandidateProgram, CandidateStatus, RunFailure, Runner,
    Stage,
};
pub use pipeline::{
    generate_candidates, judge_multiframe, propose_features, FinalExtractor, Generation, JudgeOutcome,
    ProgramExtractor, ProposalOutcome, QueryConfig,
};
pub use probe::{ProbeFrame, ProbeSet};
pub use prompt::{PromptRequest, TemplateId};
pub use transport::{request_hash, LiveTransport, RecordingTransport, ReplayTransport, ScriptedTransport, Transport};

#[derive(Debug, Error)]
pub enum VlmError {
    #[error("model unavailable: {0}")]
    Unavailable(String),
    #[error("could not parse model answer: {message}\n--- raw answer ---\n{raw}")]
    Parse { message: String, raw: String },
    #[error("no recorded response for request {hash}")]
    FixtureMiss { hash: String },
    #[error("network error: {0}")]
    Network(String),
    #[error("authentication error: {0}")]
    Auth(String),
    #[error("every candidate was eliminated: {report}")]
    NoWinner { report: Box<VoteReport> },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
}

impl VlmError {
    /// Transport-level problems; replay misses are never swallowed.
    pub fn is_transport(&self) -> bool {
        matches!(self, VlmError::Unavailable(_) | VlmError::Network(_) | VlmError::Auth(_))
    }
}

pub type Result<T> = std::result::Result<T, VlmError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl Fn(std::io::Error) -> VlmError + '_ {
    move |source| VlmError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Lowercase, drop punctuation, collapse whitespace.
pub fn canonical(text: &str) -> String {
    let kept: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One parsed step-1 answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureProposal {
    pub phrases: Vec<String>,
    /// Voting key: canonical phrases in answer order. Answers without
    /// enumerated elements key on their whole canonical text.
    pub canonical: Vec<String>,
    pub raw: String,
}

impl FeatureProposal {
    pub fn parse(raw: &str) -> Self {
        let phrases = split_state_elements(raw);
        let canonical = if phrases.is_empty() {
            vec![canonical(raw)]
        } else {
            phrases.iter().map(|p| canonical(p)).collect()
        };
        FeatureProposal {
            phrases,
            canonical,
            raw: raw.to_string(),
        }
    }

    pub fn is_parsed(&self) -> bool {
        !self.phrases.is_empty()
    }
}

/// Splits `State element N: phrase` enumerations, tolerant of bullets and
/// line breaks.
fn split_state_elements(raw: &str) -> Vec<String> {
    const MARKER: &str = "state element";
    let lower = raw.to_lowercase();
    // Lowercasing may change byte offsets for non-ASCII text; fall back to
    // a byte-stable lowercase in that case.
    let lower = if lower.len() == raw.len() {
        lower
    } else {
        raw.to_ascii_lowercase()
    };
    let mut starts = Vec::new();
    let mut from = 0;
    while let Some(pos) = lower[from..].find(MARKER) {
        let at = from + pos;
        let mut i = at + MARKER.len();
        let bytes = lower.as_bytes();
        while i < bytes.len() && bytes[i] == b' ' {
            i += 1;
        }
        let digits = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        while i < bytes.len() && bytes[i] == b' ' {
            i += 1;
        }
        if i > digits && i < bytes.len() && bytes[i] == b':' {
            starts.push((at, i + 1));
        }
        from = at + MARKER.len();
    }
    let mut out = Vec::with_capacity(starts.len());
    for (k, &(_, body)) in starts.iter().enumerate() {
        let end = starts.get(k + 1).map(|s| s.0).unwrap_or(raw.len());
        let phrase = raw[body..end]
            .trim()
            .trim_end_matches(['-', '*', '•'])
            .trim();
        if !phrase.is_empty() {
            out.push(phrase.to_string());
        }
    }
    out
}

/// Angle features default to half a turn centred on zero.
pub const DEFAULT_ANGLE_RANGE: f64 = std::f64::consts::FRAC_PI_2;

const ARTICLES: [&str; 3] = ["the", "a", "an"];
const BOOLEAN_CUES: [&str; 3] = ["or not", "whether", "yes or no"];
const MOTION_WORDS: [&str; 4] = ["velocity", "speed", "movement", "motion"];
const KNOWN_WORDS: [&str; 12] = [
    "position",
    "location",
    "distance",
    "angle",
    "orientation",
    "direction",
    "proximity",
    "velocity",
    "speed",
    "size",
    "width",
    "height",
];

fn snake(words: &str) -> String {
    canonical(words)
        .split(' ')
        .filter(|w| !w.is_empty() && !ARTICLES.contains(w))
        .collect::<Vec<_>>()
        .join("_")
}

/// Keyword rules turning feature phrases into a typed spec, all single-frame.
/// Returns the feature spec and the phrases no rule recognized.
pub fn phrases_to_spec(phrases: &[String]) -> Result<(FeatureSpec, Vec<String>)> {
    let mut features: Vec<FeatureDef> = Vec::new();
    let mut review = Vec::new();
    for phrase in phrases {
        let (main, qualifier) = match phrase.find('(') {
            Some(i) => (&phrase[..i], phrase[i..].trim_matches(|c| c == '(' || c == ')' || c == ' ')),
            None => (phrase.as_str(), ""),
        };
        let base = snake(main);
        if base.is_empty() {
            continue;
        }
        let main_c = canonical(main);
        let qual_c = canonical(qualifier);
        let all = format!("{main_c} {qual_c}");
        let words: Vec<&str> = all.split(' ').collect();
        let has = |w: &str| words.contains(&w);
        let def = |name: String, kind: FeatureKind, range: [f64; 2]| FeatureDef {
            name,
            kind,
            provenance: Provenance::SingleFrame,
            range,
            object_binding: None,
            base: None,
            lag: None,
        };
        if BOOLEAN_CUES.iter().any(|c| all.contains(c)) {
            features.push(def(base, FeatureKind::Boolean, [0.0, 1.0]));
        } else if MOTION_WORDS.iter().any(|w| has(w)) {
            let r = DEFAULT_VELOCITY_RANGE;
            features.push(def(base, FeatureKind::Continuous, [-r, r]));
        } else if has("angle") || has("orientation") {
            let r = DEFAULT_ANGLE_RANGE;
            features.push(def(base, FeatureKind::Continuous, [-r, r]));
        } else if (has("position") || has("location")) && has("x") && has("y") {
            for axis in ["x", "y"] {
                features.push(def(format!("{base}_{axis}"), FeatureKind::Continuous, [0.0, 1.0]));
            }
        } else {
            if !KNOWN_WORDS.iter().any(|w| has(w)) {
                review.push(phrase.clone());
            }
            features.push(def(base, FeatureKind::Continuous, [0.0, 1.0]));
        }
    }
    let mut seen = std::collections::HashMap::new();
    for f in &mut features {
        let count = seen.entry(f.name.clone()).or_insert(0usize);
        *count += 1;
        if *count > 1 {
            f.name = format!("{}_{}", f.name, count);
        }
    }
    let spec = FeatureSpec { features };
    spec.validate()?;
    Ok((spec, review))
}

/// Words that name the measured quantity rather than the object.
const QUANTITY_WORDS: [&str; 12] = [
    "velocity", "speed", "angular", "horizontal", "vertical", "movement", "motion", "rate", "change", "of", "in",
    "x",
];

/// Picks the single-frame feature a motion feature differentiates: it must
/// share an object word; angular motion prefers angles, horizontal motion
/// prefers x components, otherwise positions.
pub fn infer_base(spec: &FeatureSpec, motion: &str) -> Option<String> {
    let words: Vec<&str> = motion.split('_').collect();
    let subject: Vec<&str> = words
        .iter()
        .copied()
        .filter(|w| !QUANTITY_WORDS.contains(w) && !ARTICLES.contains(w))
        .collect();
    let angular = words.contains(&"angular");
    let vertical = words.contains(&"vertical");
    let mut best: Option<(i32, &str)> = None;
    for f in &spec.features {
        if f.provenance != Provenance::SingleFrame || f.kind != FeatureKind::Continuous || f.name == motion {
            continue;
        }
        let fw: Vec<&str> = f.name.split('_').collect();
        if !subject.iter().any(|s| fw.contains(s)) {
            continue;
        }
        let is_angle = fw.contains(&"angle") || fw.contains(&"orientation");
        let is_pos = fw.contains(&"position") || fw.contains(&"location");
        let mut score = 0;
        if angular && is_angle {
            score += 4;
        }
        if !angular && is_pos {
            score += 3;
        }
        if !angular && is_angle {
            score -= 2;
        }
        match fw.last() {
            Some(&"x") if !vertical => score += 1,
            Some(&"y") if vertical => score += 1,
            Some(&"y") => score -= 1,
            _ => {}
        }
        if best.map_or(true, |(s, _)| score > s) {
            best = Some((score, f.name.as_str()));
        }
    }
    best.map(|(_, n)| n.to_string())
}

/// Outcome counts of one voting round. Percentages use all `n` entries as
/// the denominator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteReport {
    pub stage: String,
    pub n: usize,
    pub failures: usize,
    pub constants: usize,
    /// Cluster sizes in first-observed order.
    pub clusters: Vec<usize>,
    pub winner_cluster: Option<usize>,
    pub failure_rate: f64,
    pub constant_rate: f64,
    pub coverage: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_seed: Option<u64>,
}

impl VoteReport {
    pub fn new(stage: &str, n: usize, failures: usize, constants: usize, clusters: Vec<usize>) -> Self {
        let mut winner = None;
        for (i, &c) in clusters.iter().enumerate() {
            if winner.map_or(true, |w: usize| c > clusters[w]) {
                winner = Some(i);
            }
        }
        let pct = |k: usize| if n == 0 { 0.0 } else { 100.0 * k as f64 / n as f64 };
        VoteReport {
            stage: stage.to_string(),
            n,
            failures,
            constants,
            failure_rate: pct(failures),
            constant_rate: pct(constants),
            coverage: pct(winner.map_or(0, |w| clusters[w])),
            winner_cluster: winner,
            clusters,
            probe_seed: None,
        }
    }

    /// Table-row triple `failure,constant,coverage` in percent.
    pub fn row(&self) -> String {
        format!(
            "{},{},{}",
            format_pct(self.failure_rate),
            format_pct(self.constant_rate),
            format_pct(self.coverage)
        )
    }

    pub fn to_csv(&self) -> String {
        format!("code_failure_pct,excluded_constant_pct,majority_coverage_pct\n{}\n", self.row())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for VoteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: n={} failed {}% constant {}% coverage {}% clusters {:?}",
            self.stage,
            self.n,
            format_pct(self.failure_rate),
            format_pct(self.constant_rate),
            format_pct(self.coverage),
            self.clusters
        )
    }
}

/// Integers print bare, everything else with two decimals.
pub fn format_pct(x: f64) -> String {
    if (x - x.round()).abs() < 1e-9 {
        format!("{}", x.round() as i64)
    } else {
        format!("{x:.2}")
    }
}

/// Table-shaped CSV over several rounds; `None` marks a skipped stage.
pub fn table_csv(rows: &[(&str, &str, Option<&VoteReport>)]) -> String {
    let mut out = String::from("environment,type,code_failure_pct,excluded_constant_pct,majority_coverage_pct\n");
    for (env, kind, report) in rows {
        match report {
            Some(r) => out.push_str(&format!("{env},{kind},{}\n", r.row())),
            None => out.push_str(&format!("{env},{kind},-,-,-\n")),
        }
    }
    out
}
