//! Query rounds: feature proposal, multi-frame judging and code generation,
//! plus extractors assembled from selected programs.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::candidate::{feature_map, run_candidate, run_candidate_multi, CandidateProgram, Runner, Stage};
use super::probe::ProbeFrame;
use super::prompt::{self, extract_code};
use super::transport::Transport;
use super::{canonical, infer_base, phrases_to_spec, FeatureProposal, Result, VlmError, VoteReport};
use crate::features::{
    FeatureError, FeatureKind, FeatureSpec, FrameExtractor, Provenance, DEFAULT_VELOCITY_RANGE,
};
use crate::segment::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryConfig {
    pub model: String,
    pub domain: String,
    pub n: usize,
}

/// Sends `n` numbered copies of a request; transport failures are counted,
/// anything else (including replay misses) aborts.
fn ask_n(
    n: usize,
    transport: &mut dyn Transport,
    make: impl Fn(usize) -> prompt::PromptRequest,
) -> Result<(Vec<Option<String>>, usize, Option<VlmError>)> {
    let mut out = Vec::with_capacity(n);
    let mut failures = 0;
    let mut last = None;
    for s in 0..n {
        match transport.send(&make(s)) {
            Ok(a) => out.push(Some(a)),
            Err(e) if e.is_transport() => {
                failures += 1;
                out.push(None);
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((out, failures, last))
}

fn cluster<K: PartialEq + Clone>(keys: impl Iterator<Item = (usize, K)>) -> Vec<(K, Vec<usize>)> {
    let mut clusters: Vec<(K, Vec<usize>)> = Vec::new();
    for (i, k) in keys {
        match clusters.iter_mut().find(|c| c.0 == k) {
            Some(c) => c.1.push(i),
            None => clusters.push((k, vec![i])),
        }
    }
    clusters
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalOutcome {
    pub spec: FeatureSpec,
    pub report: VoteReport,
    pub winner: FeatureProposal,
    /// Phrases no keyword rule recognized.
    pub review: Vec<String>,
    pub answers: Vec<FeatureProposal>,
}

/// Asks for the decision-relevant features `n` times and keeps the most
/// frequent canonical answer.
pub fn propose_features(q: &QueryConfig, image: &Image, transport: &mut dyn Transport) -> Result<ProposalOutcome> {
    if q.n == 0 {
        return Err(VlmError::Config("n must be at least 1".into()));
    }
    let (raw, failures, last) = ask_n(q.n, transport, |s| prompt::step1(&q.domain, image.clone(), &q.model, s))?;
    let answers: Vec<FeatureProposal> = raw.iter().flatten().map(|a| FeatureProposal::parse(a)).collect();
    if answers.is_empty() {
        return Err(VlmError::Unavailable(format!(
            "all {} queries failed; last error: {}",
            q.n,
            last.map(|e| e.to_string()).unwrap_or_default()
        )));
    }
    let clusters = cluster(answers.iter().enumerate().map(|(i, a)| (i, a.canonical.clone())));
    let report = VoteReport::new("propose", q.n, failures, 0, clusters.iter().map(|c| c.1.len()).collect());
    let w = report.winner_cluster.expect("at least one answer");
    let winner = answers[clusters[w].1[0]].clone();
    if !winner.is_parsed() {
        return Err(VlmError::Parse {
            message: "winning answer has no enumerated state elements".into(),
            raw: winner.raw,
        });
    }
    let (spec, review) = phrases_to_spec(&winner.phrases)?;
    Ok(ProposalOutcome {
        spec,
        report,
        winner,
        review,
        answers,
    })
}

/// Indices (0-based, sorted) named by a judgment, `None` if unreadable.
pub fn parse_judgment(answer: &str, spec: &FeatureSpec) -> Option<Vec<usize>> {
    let spaced: String = answer
        .chars()
        .map(|ch| if ch.is_alphanumeric() { ch } else { ' ' })
        .collect();
    let c = canonical(&spaced);
    let words: Vec<&str> = c.split(' ').collect();
    let mut idx: Vec<usize> = words
        .iter()
        .filter_map(|w| w.parse::<usize>().ok())
        .filter(|&k| k >= 1 && k <= spec.len())
        .map(|k| k - 1)
        .collect();
    if idx.is_empty() {
        if words.contains(&"none") {
            return Some(Vec::new());
        }
        for (i, f) in spec.features.iter().enumerate() {
            if c.contains(&f.name.replace('_', " ")) {
                idx.push(i);
            }
        }
        if idx.is_empty() {
            return None;
        }
    }
    idx.sort_unstable();
    idx.dedup();
    Some(idx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeOutcome {
    pub spec: FeatureSpec,
    pub multi: Vec<String>,
    /// `None` when no query was needed.
    pub report: Option<VoteReport>,
}

/// Majority vote over which features need more than one frame. Chosen
/// features become differences of an inferred single-frame base.
pub fn judge_multiframe(q: &QueryConfig, spec: &FeatureSpec, transport: &mut dyn Transport) -> Result<JudgeOutcome> {
    if spec.is_empty() {
        return Ok(JudgeOutcome {
            spec: spec.clone(),
            multi: Vec::new(),
            report: None,
        });
    }
    if q.n == 0 {
        return Err(VlmError::Config("n must be at least 1".into()));
    }
    let (raw, mut failures, last) = ask_n(q.n, transport, |s| prompt::judge(&q.domain, spec, &q.model, s))?;
    let parsed: Vec<Option<Vec<usize>>> = raw.iter().flatten().map(|a| parse_judgment(a, spec)).collect();
    if parsed.is_empty() {
        return Err(VlmError::Unavailable(format!(
            "all {} queries failed; last error: {}",
            q.n,
            last.map(|e| e.to_string()).unwrap_or_default()
        )));
    }
    failures += parsed.iter().filter(|p| p.is_none()).count();
    let clusters = cluster(parsed.iter().enumerate().filter_map(|(i, p)| p.clone().map(|k| (i, k))));
    let report = VoteReport::new("judge", q.n, failures, 0, clusters.iter().map(|c| c.1.len()).collect());
    let Some(w) = report.winner_cluster else {
        return Err(VlmError::Parse {
            message: "no judgment named features or none".into(),
            raw: raw.iter().flatten().next().cloned().unwrap_or_default(),
        });
    };
    let chosen = clusters[w].0.clone();
    let mut out = spec.clone();
    for &i in &chosen {
        let name = out.features[i].name.clone();
        let mut rest = out.clone();
        for &j in &chosen {
            rest.features[j].provenance = Provenance::MultiFrame;
        }
        let base = infer_base(&rest, &name).ok_or_else(|| VlmError::Parse {
            message: format!("cannot tell which single-frame feature {name} differentiates"),
            raw: out.names().join(", "),
        })?;
        let f = &mut out.features[i];
        f.provenance = Provenance::MultiFrame;
        f.kind = FeatureKind::Continuous;
        f.range = [-DEFAULT_VELOCITY_RANGE, DEFAULT_VELOCITY_RANGE];
        f.base = Some(base);
        f.lag = Some(1);
    }
    out.validate()?;
    Ok(JudgeOutcome {
        multi: chosen.iter().map(|&i| out.features[i].name.clone()).collect(),
        spec: out,
        report: Some(report),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub stage: Stage,
    pub candidates: Vec<CandidateProgram>,
    /// Queries lost to transport errors.
    pub failures: usize,
}

/// Requests `n` extractor programs. The multi stage needs the selected
/// single-frame program and issues no query when no feature is multi-frame.
pub fn generate_candidates(
    q: &QueryConfig,
    spec: &FeatureSpec,
    examples: &[ProbeFrame],
    stage: Stage,
    single_winner: Option<&CandidateProgram>,
    runner: &Runner,
    transport: &mut dyn Transport,
) -> Result<Generation> {
    let names = match stage {
        Stage::Single => spec.single_frame().names(),
        Stage::Multi => spec.multi_frame_names(),
    };
    if names.is_empty() {
        if stage == Stage::Single {
            return Err(VlmError::Config("spec has no single-frame features".into()));
        }
        return Ok(Generation {
            stage,
            candidates: Vec::new(),
            failures: 0,
        });
    }
    if examples.is_empty() {
        return Err(VlmError::Config("code generation needs at least one example frame".into()));
    }
    let pairs: Vec<_> = examples.iter().map(|e| (e.image.clone(), e.objects.clone())).collect();
    let (raw, failures, _) = match stage {
        Stage::Single => ask_n(q.n, transport, |s| {
            prompt::step2_single(&q.domain, spec, &names, &pairs, &q.model, s)
        })?,
        Stage::Multi => {
            let helper = single_winner
                .ok_or_else(|| VlmError::Config("multi-frame generation needs the single-frame winner".into()))?;
            ask_n(q.n, transport, |s| {
                prompt::step2_multi(&q.domain, spec, &names, &pairs, &helper.source, &q.model, s)
            })?
        }
    };
    let candidates = raw
        .into_iter()
        .enumerate()
        .filter_map(|(i, a)| a.map(|a| CandidateProgram::new(i, stage, extract_code(&a), names.clone(), runner.clone())))
        .collect();
    Ok(Generation {
        stage,
        candidates,
        failures,
    })
}

fn extractor_err(e: impl std::fmt::Display) -> FeatureError {
    FeatureError::Extractor(e.to_string())
}

/// Selected programs composed into the final extractor: the single-frame
/// program alone when no feature is multi-frame, otherwise the multi-frame
/// program applied over the single-frame outputs of both frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalExtractor {
    pub spec: FeatureSpec,
    pub single: CandidateProgram,
    pub multi: Option<CandidateProgram>,
}

impl FinalExtractor {
    pub fn new(spec: FeatureSpec, single: CandidateProgram, multi: Option<CandidateProgram>) -> Result<Self> {
        let needs_multi = !spec.multi_frame_names().is_empty();
        if needs_multi != multi.is_some() {
            return Err(VlmError::Config(format!(
                "spec has {} multi-frame features but a multi-frame program was {}given",
                spec.multi_frame_names().len(),
                if multi.is_some() { "" } else { "not " }
            )));
        }
        if single.features != spec.single_frame().names() {
            return Err(VlmError::Config("single-frame program features do not match the feature spec".into()));
        }
        Ok(FinalExtractor { spec, single, multi })
    }

    /// Raw values in spec order for `current`, with `previous` feeding the
    /// multi-frame program.
    pub fn extract(&self, previous: &ProbeFrame, current: &ProbeFrame) -> Result<Vec<Option<f64>>> {
        let run = |c: &CandidateProgram, f: &ProbeFrame| {
            run_candidate(c, f)?.map_err(|e| VlmError::Config(format!("extractor failed: {e}")))
        };
        let now = run(&self.single, current)?;
        let motion = match &self.multi {
            None => Vec::new(),
            Some(m) => {
                let before = run(&self.single, previous)?;
                let a = feature_map(&self.single.features, &before);
                let b = feature_map(&self.single.features, &now);
                run_candidate_multi(m, [previous, current], [&a, &b])?
                    .map_err(|e| VlmError::Config(format!("multi-frame extractor failed: {e}")))?
            }
        };
        Ok(self
            .spec
            .features
            .iter()
            .map(|f| {
                let (names, vals) = match f.provenance {
                    Provenance::SingleFrame => (&self.single.features, &now),
                    Provenance::MultiFrame => (&self.multi.as_ref().expect("checked").features, &motion),
                };
                names.iter().position(|n| n == &f.name).and_then(|i| vals[i])
            })
            .collect())
    }
}

/// Labels frames by running the selected single-frame program out of
/// process, normalizing raw outputs with the feature spec ranges.
pub struct ProgramExtractor {
    pub spec: FeatureSpec,
    pub program: CandidateProgram,
    scratch: PathBuf,
}

impl ProgramExtractor {
    pub fn new(spec: &FeatureSpec, program: CandidateProgram, scratch: PathBuf) -> Result<Self> {
        let single = spec.single_frame();
        if program.features != single.names() {
            return Err(VlmError::Config(format!(
                "program features {:?} do not match spec {:?}",
                program.features,
                single.names()
            )));
        }
        std::fs::create_dir_all(&scratch).map_err(super::io_err(&scratch))?;
        Ok(ProgramExtractor {
            spec: single,
            program,
            scratch,
        })
    }
}

impl FrameExtractor for ProgramExtractor {
    fn feature_names(&self) -> Vec<String> {
        self.spec.names()
    }

    fn extract(&mut self, frame: &Image) -> crate::features::Result<Vec<Option<f64>>> {
        let path = self.scratch.join("frame.png");
        frame.save(&path)?;
        let probe = ProbeFrame::new(path, frame.clone()).map_err(extractor_err)?;
        let raw = run_candidate(&self.program, &probe)
            .map_err(extractor_err)?
            .map_err(extractor_err)?;
        Ok(self
            .spec
            .features
            .iter()
            .zip(raw)
            .map(|(f, v)| {
                v.map(|x| match f.kind {
                    FeatureKind::Boolean => (x > 0.5) as u8 as f64,
                    FeatureKind::Continuous => f.normalize(x),
                })
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn judgment_parsing() {
        let (spec, _) = phrases_to_spec(&["Cart position".into(), "Cart velocity".into(), "Pole angle".into()]).unwrap();
        assert_eq!(parse_judgment("2", &spec), Some(vec![1]));
        assert_eq!(parse_judgment("2,3", &spec), Some(vec![1, 2]));
        assert_eq!(parse_judgment("Features 2, 3 and 2.", &spec), Some(vec![1, 2]));
        assert_eq!(parse_judgment("None.", &spec), Some(vec![]));
        assert_eq!(parse_judgment("cart velocity needs two", &spec), Some(vec![1]));
        assert_eq!(parse_judgment("hmm", &spec), None);
    }
}
