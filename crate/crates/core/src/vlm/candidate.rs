//! Out-of-process candidate extractors: the stdin/stdout wire protocol,
//! probe runs, and selection by failure, constancy and output clusters.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use wait_timeout::ChildExt;

use super::probe::{ProbeFrame, ProbeSet};
use super::{io_err, Result, VlmError, VoteReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Single,
    Multi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Untested,
    Failed,
    Constant,
    Clustered,
}

/// Command template; `{program}` is replaced by the source file path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Runner {
    pub command: Vec<String>,
    pub extension: String,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    /// Where program files are written.
    #[serde(default)]
    pub work_dir: Option<PathBuf>,
}

fn default_timeout() -> f64 {
    10.0
}

impl Default for Runner {
    fn default() -> Self {
        Runner::python()
    }
}

impl Runner {
    pub fn python() -> Self {
        Runner {
            command: vec!["python3".into(), "-I".into(), "-S".into(), "{program}".into()],
            extension: "py".into(),
            timeout_s: default_timeout(),
            work_dir: None,
        }
    }

    fn work_dir(&self) -> PathBuf {
        self.work_dir
            .clone()
            .unwrap_or_else(|| std::env::temp_dir().join("vistree-candidates"))
    }

    /// Writes `source` under a content-addressed name and returns the path.
    pub fn materialize(&self, source: &str) -> Result<PathBuf> {
        let dir = self.work_dir();
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let digest = hex::encode(Sha256::digest(source.as_bytes()));
        let path = dir.join(format!("cand_{}.{}", &digest[..16], self.extension));
        if !path.exists() {
            let tmp = dir.join(format!(".cand_{}.{}.tmp", &digest[..16], std::process::id()));
            std::fs::write(&tmp, source).map_err(io_err(&tmp))?;
            std::fs::rename(&tmp, &path).map_err(io_err(&path))?;
        }
        Ok(path)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub reason: String,
    pub stderr: String,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.reason)?;
        if !self.stderr.trim().is_empty() {
            let tail: Vec<&str> = self.stderr.trim().lines().rev().take(3).collect();
            let tail: Vec<&str> = tail.into_iter().rev().collect();
            write!(f, " ({})", tail.join(" | "))?;
        }
        Ok(())
    }
}

fn fail(reason: impl Into<String>, stderr: impl Into<String>) -> RunFailure {
    RunFailure {
        reason: reason.into(),
        stderr: stderr.into(),
    }
}

/// Runs `program` once with `payload` on stdin and reads
/// `{"features": {name: number|null}}` for every name in `features`.
pub fn run_program(
    runner: &Runner,
    program: &Path,
    features: &[String],
    payload: &Value,
) -> std::result::Result<Vec<Option<f64>>, RunFailure> {
    let Some((exe, args)) = runner.command.split_first() else {
        return Err(fail("empty runner command", ""));
    };
    let prog = program.display().to_string();
    let mut child = Command::new(exe)
        .args(args.iter().map(|a| a.replace("{program}", &prog)))
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| fail(format!("spawn {exe}: {e}"), ""))?;
    let input = payload.to_string();
    let mut stdin = child.stdin.take().expect("piped stdin");
    let writer = std::thread::spawn(move || {
        // A program that exits without reading closes the pipe; that is
        // not a protocol failure by itself.
        let _ = stdin.write_all(input.as_bytes());
    });
    let mut out_pipe = child.stdout.take().expect("piped stdout");
    let mut err_pipe = child.stderr.take().expect("piped stderr");
    let reader = std::thread::spawn(move || {
        let mut s = Vec::new();
        let _ = out_pipe.read_to_end(&mut s);
        s
    });
    let err_reader = std::thread::spawn(move || {
        let mut s = Vec::new();
        let _ = err_pipe.read_to_end(&mut s);
        s
    });
    let status = match child.wait_timeout(Duration::from_secs_f64(runner.timeout_s)) {
        Ok(Some(s)) => s,
        Ok(None) => {
            let _ = child.kill();
            let _ = child.wait();
            let _ = writer.join();
            let err = err_reader.join().unwrap_or_default();
            return Err(fail(
                format!("timed out after {}s", runner.timeout_s),
                String::from_utf8_lossy(&err),
            ));
        }
        Err(e) => return Err(fail(format!("wait: {e}"), "")),
    };
    let _ = writer.join();
    let out = reader.join().unwrap_or_default();
    let err = String::from_utf8_lossy(&err_reader.join().unwrap_or_default()).to_string();
    if !status.success() {
        return Err(fail(format!("exit status {status}"), err));
    }
    let text = String::from_utf8_lossy(&out);
    let v: Value = serde_json::from_str(text.trim()).map_err(|e| fail(format!("malformed output: {e}"), err.clone()))?;
    let map = v
        .get("features")
        .and_then(Value::as_object)
        .ok_or_else(|| fail("malformed output: no features object", err.clone()))?;
    features
        .iter()
        .map(|name| match map.get(name) {
            Some(Value::Null) => Ok(None),
            Some(Value::Number(n)) => n
                .as_f64()
                .filter(|x| x.is_finite())
                .map(Some)
                .ok_or_else(|| fail(format!("malformed output: {name} is not finite"), err.clone())),
            Some(Value::Bool(b)) => Ok(Some(*b as u8 as f64)),
            Some(other) => Err(fail(format!("malformed output: {name} = {other}"), err.clone())),
            None => Err(fail(format!("malformed output: missing {name}"), err.clone())),
        })
        .collect()
}

/// One generated extractor and what selection made of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateProgram {
    pub id: usize,
    pub stage: Stage,
    pub source: String,
    pub features: Vec<String>,
    pub runner: Runner,
    pub status: CandidateStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<Vec<Vec<Option<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<String>,
}

impl CandidateProgram {
    pub fn new(id: usize, stage: Stage, source: String, features: Vec<String>, runner: Runner) -> Self {
        CandidateProgram {
            id,
            stage,
            source,
            features,
            runner,
            status: CandidateStatus::Untested,
            outputs: None,
            diagnostics: None,
        }
    }

    /// Status moves only out of `Untested`.
    pub fn advance(&mut self, to: CandidateStatus) -> Result<()> {
        if self.status != CandidateStatus::Untested || to == CandidateStatus::Untested {
            return Err(VlmError::Config(format!(
                "candidate {} cannot move from {:?} to {:?}",
                self.id, self.status, to
            )));
        }
        self.status = to;
        Ok(())
    }
}

/// Single-frame run on one probe frame.
pub fn run_candidate(
    candidate: &CandidateProgram,
    frame: &ProbeFrame,
) -> Result<std::result::Result<Vec<Option<f64>>, RunFailure>> {
    let program = candidate.runner.materialize(&candidate.source)?;
    Ok(run_program(&candidate.runner, &program, &candidate.features, &frame.payload()))
}

/// Multi-frame run on a frame pair with the single-stage values of both.
pub fn run_candidate_multi(
    candidate: &CandidateProgram,
    frames: [&ProbeFrame; 2],
    single: [&Map<String, Value>; 2],
) -> Result<std::result::Result<Vec<Option<f64>>, RunFailure>> {
    let program = candidate.runner.materialize(&candidate.source)?;
    let payload = json!({
        "frames": [frames[0].payload(), frames[1].payload()],
        "single": [single[0], single[1]],
    });
    Ok(run_program(&candidate.runner, &program, &candidate.features, &payload))
}

pub(crate) fn feature_map(names: &[String], values: &[Option<f64>]) -> Map<String, Value> {
    names
        .iter()
        .zip(values)
        .map(|(n, v)| (n.clone(), v.map_or(Value::Null, |x| json!(x))))
        .collect()
}

type Matrix = Vec<Vec<Option<f64>>>;

/// Runs a candidate over the probe inputs, stopping at the first failure.
fn probe_matrix(
    candidate: &CandidateProgram,
    probes: &ProbeSet,
    count: usize,
    single: Option<&(CandidateProgram, Matrix)>,
) -> Result<std::result::Result<Matrix, RunFailure>> {
    let mut rows = Vec::with_capacity(count);
    match candidate.stage {
        Stage::Single => {
            for frame in &probes.frames[..count] {
                match run_candidate(candidate, frame)? {
                    Ok(r) => rows.push(r),
                    Err(f) => return Ok(Err(f)),
                }
            }
        }
        Stage::Multi => {
            let (winner, outputs) = single.expect("checked by caller");
            for pair in &probes.pairs[..count] {
                let a = feature_map(&winner.features, &outputs[pair[0]]);
                let b = feature_map(&winner.features, &outputs[pair[1]]);
                let frames = [&probes.frames[pair[0]], &probes.frames[pair[1]]];
                match run_candidate_multi(candidate, frames, [&a, &b])? {
                    Ok(r) => rows.push(r),
                    Err(f) => return Ok(Err(f)),
                }
            }
        }
    }
    Ok(Ok(rows))
}

fn rounded(m: &Matrix) -> Vec<Vec<Option<i64>>> {
    m.iter()
        .map(|r| r.iter().map(|v| v.map(|x| (x * 1e6).round() as i64)).collect())
        .collect()
}

/// Outputs of the selected single-stage program on every probe frame that
/// a multi-stage run needs.
pub fn single_outputs(winner: &CandidateProgram, probes: &ProbeSet, count: usize) -> Result<Matrix> {
    let mut needed = vec![false; probes.frames.len()];
    for p in probes.pairs.iter().take(count) {
        needed[p[0]] = true;
        needed[p[1]] = true;
    }
    let mut out = vec![vec![None; winner.features.len()]; probes.frames.len()];
    for (i, frame) in probes.frames.iter().enumerate() {
        if !needed[i] {
            continue;
        }
        out[i] = run_candidate(winner, frame)?.map_err(|f| {
            VlmError::Config(format!("selected single-frame extractor failed on {}: {f}", frame.path.display()))
        })?;
    }
    Ok(out)
}

/// Filters and clusters candidates over exactly `count` probes and returns
/// the index of the winner (first member of the largest cluster; ties go to
/// the cluster seen first). Identical sources are run once.
pub fn select_candidate(
    candidates: &mut [CandidateProgram],
    probes: &ProbeSet,
    count: usize,
    single_winner: Option<&CandidateProgram>,
) -> Result<(usize, VoteReport)> {
    let Some(first) = candidates.first() else {
        return Err(VlmError::Config("no candidates to select from".into()));
    };
    let stage = first.stage;
    if candidates.iter().any(|c| c.stage != stage) {
        return Err(VlmError::Config("candidates from different stages".into()));
    }
    let available = match stage {
        Stage::Single => probes.frames.len(),
        Stage::Multi => probes.pairs.len(),
    };
    if count == 0 || available < count {
        return Err(VlmError::Config(format!("need {count} probes, the probe set has {available}")));
    }
    let single = match (stage, single_winner) {
        (Stage::Multi, Some(w)) => Some((w.clone(), single_outputs(w, probes, count)?)),
        (Stage::Multi, None) => {
            return Err(VlmError::Config("multi-frame selection needs the single-frame winner".into()))
        }
        _ => None,
    };

    let mut memo: HashMap<(String, Vec<String>), std::result::Result<Matrix, RunFailure>> = HashMap::new();
    let mut clusters: Vec<(Vec<Vec<Option<i64>>>, Vec<usize>)> = Vec::new();
    let (mut failures, mut constants) = (0, 0);
    for (i, cand) in candidates.iter_mut().enumerate() {
        let key = (cand.source.clone(), cand.features.clone());
        let result = match memo.get(&key) {
            Some(r) => r.clone(),
            None => {
                let r = probe_matrix(cand, probes, count, single.as_ref())?;
                memo.insert(key, r.clone());
                r
            }
        };
        match result {
            Err(f) => {
                failures += 1;
                cand.diagnostics = Some(f.to_string());
                cand.advance(CandidateStatus::Failed)?;
            }
            Ok(m) => {
                let r = rounded(&m);
                cand.outputs = Some(m);
                if r.windows(2).all(|w| w[0] == w[1]) {
                    constants += 1;
                    cand.advance(CandidateStatus::Constant)?;
                } else {
                    cand.advance(CandidateStatus::Clustered)?;
                    match clusters.iter_mut().find(|c| c.0 == r) {
                        Some(c) => c.1.push(i),
                        None => clusters.push((r, vec![i])),
                    }
                }
            }
        }
    }
    let label = match stage {
        Stage::Single => "single",
        Stage::Multi => "multi",
    };
    let mut report = VoteReport::new(
        label,
        candidates.len(),
        failures,
        constants,
        clusters.iter().map(|c| c.1.len()).collect(),
    );
    report.probe_seed = probes.seed;
    match report.winner_cluster {
        Some(w) => Ok((clusters[w].1[0], report)),
        None => Err(VlmError::NoWinner { report: Box::new(report) }),
    }
}
