//! Layout of a fixture corpus and the full query walkthrough over it.
//!
//! ```text
//! <root>/domain/<env>.txt      task description
//! <root>/scenes/<env>.png      frame shown for feature proposal
//! <root>/probes/<env>/         probe frames + probes.json (not for cartpole)
//! <root>/replay/<hash>.txt     recorded answers
//! ```
//! Cart-pole probes are rendered on demand from a fixed seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::candidate::{select_candidate, CandidateProgram, Runner, Stage};
use super::pipeline::{
    generate_candidates, judge_multiframe, propose_features, FinalExtractor, Generation, JudgeOutcome,
    ProposalOutcome, QueryConfig,
};
use super::probe::{ProbeFrame, ProbeSet};
use super::transport::{ReplayTransport, Transport};
use super::{io_err, table_csv, Result, VlmError, VoteReport};
use crate::env::RenderConfig;
use crate::segment::Image;

pub const DEFAULT_MODEL: &str = "default";
pub const DEFAULT_QUERIES: usize = 50;
pub const PROBE_COUNT: usize = 100;
pub const CART_POLE_PROBE_SEED: u64 = 7;
pub const CART_POLE: &str = "cartpole";
pub const ENVIRONMENTS: [&str; 3] = [CART_POLE, "skiing", "boxing"];

#[derive(Clone, Debug)]
pub struct Bundle {
    pub root: PathBuf,
}

impl Bundle {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Bundle { root: root.into() }
    }

    /// The corpus shipped with the repository.
    pub fn bundled() -> Self {
        Bundle::new(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/vlm"))
    }

    pub fn domain_path(&self, env: &str) -> PathBuf {
        self.root.join("domain").join(format!("{env}.txt"))
    }

    pub fn scene_path(&self, env: &str) -> PathBuf {
        self.root.join("scenes").join(format!("{env}.png"))
    }

    pub fn probe_dir(&self, env: &str) -> PathBuf {
        self.root.join("probes").join(env)
    }

    pub fn replay_dir(&self) -> PathBuf {
        self.root.join("replay")
    }

    pub fn replay(&self) -> ReplayTransport {
        ReplayTransport::new(self.replay_dir())
    }

    pub fn query(&self, env: &str, n: usize) -> Result<QueryConfig> {
        let path = self.domain_path(env);
        let domain = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(QueryConfig {
            model: DEFAULT_MODEL.to_string(),
            domain,
            n,
        })
    }

    pub fn scene(&self, env: &str) -> Result<Image> {
        Ok(Image::load(&self.scene_path(env))?)
    }

    /// Stored probes, or for cart-pole a fresh render under `scratch`.
    pub fn probes(&self, env: &str, scratch: &Path) -> Result<ProbeSet> {
        if env == CART_POLE {
            ProbeSet::cart_pole(
                CART_POLE_PROBE_SEED,
                PROBE_COUNT,
                RenderConfig::default(),
                &scratch.join("probes").join(CART_POLE),
            )
        } else {
            ProbeSet::load(&self.probe_dir(env))
        }
    }
}

impl ProbeSet {
    /// Frames shown to the code generator: the first consecutive pair, or
    /// the first frame when there are no pairs.
    pub fn examples(&self) -> Vec<ProbeFrame> {
        match self.pairs.first() {
            Some(p) => vec![self.frames[p[0]].clone(), self.frames[p[1]].clone()],
            None => self.frames.iter().take(1).cloned().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub generation: Generation,
    pub winner: usize,
    pub report: VoteReport,
}

impl Selection {
    pub fn program(&self) -> &CandidateProgram {
        &self.generation.candidates[self.winner]
    }
}

/// Proposal, judging and both code-generation stages for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Walkthrough {
    pub proposal: ProposalOutcome,
    pub judge: JudgeOutcome,
    pub single: Selection,
    /// `None` when no feature needs more than one frame.
    pub multi: Option<Selection>,
}

impl Walkthrough {
    pub fn extractor(&self) -> Result<FinalExtractor> {
        FinalExtractor::new(
            self.judge.spec.clone(),
            self.single.program().clone(),
            self.multi.as_ref().map(|m| m.program().clone()),
        )
    }

    /// Two table rows: single-frame and multi-frame code selection.
    pub fn table_rows(&self, env: &str) -> String {
        let rows = [
            (env, "single", Some(&self.single.report)),
            (env, "multi", self.multi.as_ref().map(|m| &m.report)),
        ];
        let csv = table_csv(&rows);
        csv.lines().skip(1).map(|l| format!("{l}\n")).collect()
    }
}

/// Selects among freshly generated candidates.
pub fn generate_and_select(
    q: &QueryConfig,
    spec: &crate::features::FeatureSpec,
    probes: &ProbeSet,
    stage: Stage,
    single_winner: Option<&CandidateProgram>,
    runner: &Runner,
    transport: &mut dyn Transport,
) -> Result<Option<Selection>> {
    let mut generation = generate_candidates(q, spec, &probes.examples(), stage, single_winner, runner, transport)?;
    if generation.candidates.is_empty() {
        if stage == Stage::Multi && spec.multi_frame_names().is_empty() {
            return Ok(None);
        }
        return Err(VlmError::Unavailable(format!(
            "all {} code-generation queries failed",
            generation.failures
        )));
    }
    let (winner, report) = select_candidate(&mut generation.candidates, probes, PROBE_COUNT, single_winner)?;
    Ok(Some(Selection {
        generation,
        winner,
        report,
    }))
}

pub fn run_walkthrough(
    q: &QueryConfig,
    scene: &Image,
    probes: &ProbeSet,
    runner: &Runner,
    transport: &mut dyn Transport,
) -> Result<Walkthrough> {
    let proposal = propose_features(q, scene, transport)?;
    let judge = judge_multiframe(q, &proposal.spec, transport)?;
    let single = generate_and_select(q, &judge.spec, probes, Stage::Single, None, runner, transport)?
        .expect("single stage always yields a selection");
    let multi = generate_and_select(
        q,
        &judge.spec,
        probes,
        Stage::Multi,
        Some(single.program()),
        runner,
        transport,
    )?;
    Ok(Walkthrough {
        proposal,
        judge,
        single,
        multi,
    })
}
