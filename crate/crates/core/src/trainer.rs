//! Clipped-surrogate policy gradient over extracted features, with MLP and
//! random baselines.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{backward, Tape, Var};
use crate::env::{ground_truth_features, CartPole, RenderConfig, STATE_NAMES};
use crate::features::{
    compose_temporal, extract_single, FeatureError, FeatureSpec, ReferenceExtractor, Surrogate,
};
use crate::nn::{Adam, Mlp};
use crate::tree::{
    sample_action, Action, ActionDistribution, ActionSpace, ControlTree, Relaxation, TreeError,
    TreeInit,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite {what} at update {update}: {detail}")]
    Numeric {
        what: String,
        update: usize,
        detail: String,
    },
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Ict,
    Mlp,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorChoice {
    GroundTruth,
    Reference,
    Surrogate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub rollout_len: usize,
    pub minibatch: usize,
    pub epochs: usize,
    pub clip: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Policy learning rate for the MLP baseline.
    pub lr_policy: f64,
    /// Policy learning rate for the tree. Feature selection only turns
    /// crisp once the selector weight margins reach a few units.
    pub lr_tree: f64,
    pub lr_critic: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
    pub policy: PolicyKind,
    pub extractor: ExtractorChoice,
    pub frame_lag: usize,
    pub depth: usize,
    pub sparsity_k: usize,
    pub mlp_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    pub render: RenderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 300_000,
            rollout_len: 2048,
            minibatch: 64,
            epochs: 4,
            clip: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            lr_policy: 3e-4,
            lr_tree: 1e-2,
            lr_critic: 1e-3,
            entropy_coef: 0.01,
            max_grad_norm: 0.5,
            seed: 0,
            policy: PolicyKind::Ict,
            extractor: ExtractorChoice::GroundTruth,
            frame_lag: 1,
            depth: 3,
            sparsity_k: 1,
            mlp_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            eval_every: 10_240,
            eval_episodes: 10,
            eval_seed: 1_000_000,
            render: RenderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad("gamma and lambda must lie in (0, 1]");
        }
        if self.rollout_len == 0 || self.minibatch == 0 || self.epochs == 0 {
            return bad("rollout_len, minibatch and epochs must be positive");
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be positive");
        }
        if self.frame_lag == 0 {
            return bad("frame_lag must be positive");
        }
        Ok(())
    }
}

/// Turns environment observations into policy inputs.
#[derive(Clone, Debug)]
pub enum FeatureSource {
    /// Normalized simulator state.
    GroundTruth,
    /// Segmentation-based extraction of rendered frames.
    Reference {
        spec: FeatureSpec,
        extractor: ReferenceExtractor,
    },
    /// Learned single-frame regressor, differenced for temporal features.
    Surrogate { spec: FeatureSpec, model: Box<Surrogate> },
}

impl FeatureSource {
    pub fn names(&self) -> Vec<String> {
        match self {
            FeatureSource::GroundTruth => STATE_NAMES.iter().map(|s| s.to_string()).collect(),
            FeatureSource::Reference { spec, .. } | FeatureSource::Surrogate { spec, .. } => spec.names(),
        }
    }

    pub fn dim(&self) -> usize {
        self.names().len()
    }

    pub fn choice(&self) -> ExtractorChoice {
        match self {
            FeatureSource::GroundTruth => ExtractorChoice::GroundTruth,
            FeatureSource::Reference { .. } => ExtractorChoice::Reference,
            FeatureSource::Surrogate { .. } => ExtractorChoice::Surrogate,
        }
    }

    /// Single-frame values for a batch of environments.
    fn single_batch(&self, envs: &[&CartPole]) -> Result<Vec<Vec<Option<f64>>>> {
        Ok(match self {
            FeatureSource::GroundTruth => envs
                .iter()
                .map(|e| ground_truth_features(&e.state).iter().map(|&v| Some(v)).collect())
                .collect(),
            FeatureSource::Reference { extractor, .. } => {
                let mut out = Vec::with_capacity(envs.len());
                for e in envs {
                    out.push(extract_single(&e.render(), extractor)?);
                }
                out
            }
            FeatureSource::Surrogate { model, .. } => {
                let frames: Vec<_> = envs.iter().map(|e| e.render()).collect();
                let refs: Vec<_> = frames.iter().collect();
                model
                    .predict_batch(&refs)?
                    .into_iter()
                    .map(|r| r.into_iter().map(Some).collect())
                    .collect()
            }
        })
    }
}

/// Per-environment history of single-frame values for temporal features.
#[derive(Clone, Debug, Default)]
struct History {
    frames: Vec<Vec<Option<f64>>>,
}

impl History {
    fn features(&mut self, source: &FeatureSource, single: Vec<Option<f64>>, lag: usize) -> Result<Vec<f64>> {
        let out = match source {
            FeatureSource::GroundTruth => single.iter().map(|v| v.unwrap_or(0.5)).collect(),
            FeatureSource::Reference { spec, .. } | FeatureSource::Surrogate { spec, .. } => {
                // Episode start: no earlier frame yet, difference against itself.
                let earlier = if self.frames.len() >= lag {
                    &self.frames[self.frames.len() - lag]
                } else {
                    self.frames.first().unwrap_or(&single)
                };
                compose_temporal(spec, earlier, &single)?.to_input()
            }
        };
        self.frames.push(single);
        if self.frames.len() > lag {
            self.frames.remove(0);
        }
        Ok(out)
    }

    fn clear(&mut self) {
        self.frames.clear();
    }
}

/// Policy under training or evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    Ict { tree: ControlTree },
    Mlp { net: Mlp },
    Random { actions: usize },
}

pub struct Decision {
    pub action: usize,
    pub log_prob: f64,
    pub noise: Option<Vec<f64>>,
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(
        kind: PolicyKind,
        features: &[String],
        actions: &[String],
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let f = features.len();
        let m = actions.len();
        Ok(match kind {
            PolicyKind::Ict => {
                let init = TreeInit {
                    sparsity_k: cfg.sparsity_k,
                    ..TreeInit::default()
                };
                let tree = ControlTree::new(cfg.depth, f, ActionSpace::Discrete(m), &init, rng)?
                    .with_names(features.to_vec(), actions.to_vec())?;
                Policy::Ict { tree }
            }
            PolicyKind::Mlp => {
                let mut sizes = vec![f];
                sizes.extend(&cfg.mlp_hidden);
                sizes.push(m);
                Policy::Mlp {
                    net: Mlp::new(&sizes, 0.01, rng),
                }
            }
            PolicyKind::Random => Policy::Random { actions: m },
        })
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            Policy::Ict { .. } => PolicyKind::Ict,
            Policy::Mlp { .. } => PolicyKind::Mlp,
            Policy::Random { .. } => PolicyKind::Random,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Policy::Ict { tree } => tree.params(),
            Policy::Mlp { net } => net.params.clone(),
            Policy::Random { .. } => Vec::new(),
        }
    }

    pub fn set_params(&mut self, p: &[f64]) {
        match self {
            Policy::Ict { tree } => {
                tree.set_params(p);
                tree.enforce_invariants();
            }
            Policy::Mlp { net } => net.params.copy_from_slice(p),
            Policy::Random { .. } => {}
        }
    }

    /// Action distribution at `x`; `noise` is the tree's selection noise.
    pub fn distribution(&self, x: &[f64], noise: Option<&[f64]>) -> Result<ActionDistribution> {
        Ok(match self {
            Policy::Ict { tree } => tree.forward_with_noise(x, noise)?.dist,
            Policy::Mlp { net } => {
                let logits = net.forward(x);
                let mut probs = vec![0.0; logits.len()];
                crate::diff::softmax_into(&logits, &mut probs);
                ActionDistribution::Discrete { probs }
            }
            Policy::Random { actions } => ActionDistribution::Discrete {
                probs: vec![1.0 / *actions as f64; *actions],
            },
        })
    }

    /// Stochastic action for training (`greedy == false`) or the crisp
    /// argmax action for evaluation.
    pub fn act<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R, greedy: bool) -> Result<Decision> {
        if let Policy::Random { actions } = self {
            let a = rng.gen_range(0..*actions);
            return Ok(Decision {
                action: a,
                log_prob: -(*actions as f64).ln(),
                noise: None,
            });
        }
        let noise = match (self, greedy) {
            (Policy::Ict { tree }, false) => Some(tree.sample_noise(rng)),
            _ => None,
        };
        let dist = self.distribution(x, noise.as_deref())?;
        if greedy {
            let a = dist.greedy();
            let lp = dist.log_prob(&a)?;
            return Ok(Decision {
                action: a.as_discrete().unwrap_or(0),
                log_prob: lp,
                noise,
            });
        }
        let (a, lp) = sample_action(&dist, rng)?;
        Ok(Decision {
            action: a.as_discrete().unwrap_or(0),
            log_prob: lp,
            noise,
        })
    }

    /// Records log-probabilities (one per transition) and the mean entropy.
    fn record(&self, tape: &mut Tape, params: Var, batch: &[&Transition]) -> (Var, Var) {
        match self {
            Policy::Ict { tree } => {
                let bound = tree.bind(tape, params);
                let mut lps = Vec::with_capacity(batch.len());
                let mut ents = Vec::with_capacity(batch.len());
                for t in batch {
                    let rec = bound.record(tree, tape, &t.features, Relaxation::StraightThrough, t.noise.as_deref());
                    lps.push(rec.log_prob(tape, &Action::Discrete(t.action)));
                    ents.push(rec.entropy(tape));
                }
                let lp = tape.stack(&lps);
                let e = tape.stack(&ents);
                let e = tape.mean(e);
                (lp, e)
            }
            Policy::Mlp { net } => {
                let b = batch.len();
                let f = net.input_dim();
                let m = net.output_dim();
                let xs: Vec<f64> = batch.iter().flat_map(|t| t.features.iter().copied()).collect();
                let x = tape.input(&xs, b, f);
                let logits = net.record(tape, params, x);
                let logp = tape.log_softmax(logits);
                let mut onehot = vec![0.0; b * m];
                for (r, t) in batch.iter().enumerate() {
                    onehot[r * m + t.action] = 1.0;
                }
                let oh = tape.input(&onehot, b, m);
                let picked = tape.mul(logp, oh);
                let ones = tape.input(&vec![1.0; m], m, 1);
                let lp = tape.matmul(picked, ones);
                let p = tape.softmax(logits);
                let plp = tape.mul(p, logp);
                let s = tape.sum(plp);
                let e = tape.scale(s, -1.0 / b as f64);
                (lp, e)
            }
            Policy::Random { .. } => unreachable!("random policy has no parameters"),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("policy serializes");
        std::fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let p: Policy = serde_json::from_str(&text)
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        if let Policy::Ict { tree } = &p {
            tree.validate()?;
        }
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub features: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub reward: f64,
    /// Episode ended in failure: no bootstrap.
    pub terminal: bool,
    /// Trajectory cut without failure (time limit or rollout end); the
    /// value of the next observation is bootstrapped.
    pub truncated: bool,
    pub value: f64,
    pub next_value: f64,
    pub advantage: f64,
    pub ret: f64,
    pub noise: Option<Vec<f64>>,
}

/// Generalized advantage estimates over consecutive transitions of one
/// environment. Fills `advantage` and `ret`.
pub fn compute_gae(buf: &mut [Transition], gamma: f64, lambda: f64) {
    let mut next_adv = 0.0;
    for i in (0..buf.len()).rev() {
        let t = &buf[i];
        let cut = t.terminal || t.truncated || i + 1 == buf.len();
        let next_v = if t.terminal {
            0.0
        } else if cut {
            t.next_value
        } else {
            buf[i + 1].value
        };
        let delta = t.reward + gamma * next_v - t.value;
        let adv = delta + if cut { 0.0 } else { gamma * lambda * next_adv };
        let v = t.value;
        buf[i].advantage = adv;
        buf[i].ret = adv + v;
        next_adv = adv;
    }
}

/// Rescales advantages to zero mean and unit (population) variance.
pub fn normalize_advantages(buf: &mut [Transition]) {
    let n = buf.len() as f64;
    if buf.is_empty() {
        return;
    }
    let mean = buf.iter().map(|t| t.advantage).sum::<f64>() / n;
    let var = buf.iter().map(|t| (t.advantage - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for t in buf.iter_mut() {
        t.advantage = if std > 1e-12 { (t.advantage - mean) / std } else { 0.0 };
    }
}

/// Value network over features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    pub net: Mlp,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![input];
        sizes.extend(hidden);
        sizes.push(1);
        Critic {
            net: Mlp::new(&sizes, 1.0, rng),
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.net.forward(x)[0]
    }
}

/// Parallel environments plus their feature histories.
pub struct Rollout {
    envs: Vec<CartPole>,
    history: Vec<History>,
    obs: Vec<Vec<f64>>,
    lag: usize,
    episode_returns: Vec<f64>,
    pub finished_returns: Vec<f64>,
}

impl Rollout {
    pub fn new<R: Rng + ?Sized>(n_envs: usize, render: RenderConfig, source: &FeatureSource, lag: usize, rng: &mut R) -> Result<Self> {
        let envs: Vec<CartPole> = (0..n_envs).map(|_| CartPole::new(rng.gen(), render)).collect();
        let mut r = Rollout {
            history: vec![History::default(); n_envs],
            obs: vec![Vec::new(); n_envs],
            envs,
            lag,
            episode_returns: vec![0.0; n_envs],
            finished_returns: Vec::new(),
        };
        r.observe(source, &(0..n_envs).collect::<Vec<_>>())?;
        Ok(r)
    }

    fn observe(&mut self, source: &FeatureSource, which: &[usize]) -> Result<()> {
        let envs: Vec<&CartPole> = which.iter().map(|&i| &self.envs[i]).collect();
        let singles = source.single_batch(&envs)?;
        for (&i, s) in which.iter().zip(singles) {
            self.obs[i] = self.history[i].features(source, s, self.lag)?;
        }
        Ok(())
    }

    pub fn observation(&self, i: usize) -> &[f64] {
        &self.obs[i]
    }

    /// Collects `len` steps per environment; returns one buffer per env.
    pub fn collect<R: Rng + ?Sized>(
        &mut self,
        policy: &Policy,
        critic: &Critic,
        source: &FeatureSource,
        len: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<Transition>>> {
        let n = self.envs.len();
        let mut bufs: Vec<Vec<Transition>> = vec![Vec::with_capacity(len); n];
        let all: Vec<usize> = (0..n).collect();
        for _ in 0..len {
            for i in 0..n {
                let x = self.obs[i].clone();
                let d = policy.act(&x, rng, false)?;
                let (state, reward, done) = self.envs[i]
                    .step(d.action)
                    .map_err(|e| TrainError::Config(e.to_string()))?;
                self.episode_returns[i] += reward;
                let value = critic.value(&x);
                bufs[i].push(Transition {
                    features: x,
                    action: d.action,
                    log_prob: d.log_prob,
                    reward,
                    terminal: state.failed(),
                    truncated: done && !state.failed(),
                    value,
                    next_value: 0.0,
                    advantage: 0.0,
                    ret: 0.0,
                    noise: d.noise,
                });
            }
            self.observe(source, &all)?;
            for i in 0..n {
                let last = bufs[i].last_mut().expect("pushed above");
                if last.truncated {
                    last.next_value = critic.value(&self.obs[i]);
                }
                if last.terminal || last.truncated {
                    self.finished_returns.push(self.episode_returns[i]);
                    self.episode_returns[i] = 0.0;
                    self.envs[i].reset_next();
                    self.history[i].clear();
                }
            }
            let reset: Vec<usize> = (0..n)
                .filter(|&i| {
                    let t = bufs[i].last().expect("pushed above");
                    t.terminal || t.truncated
                })
                .collect();
            if !reset.is_empty() {
                self.observe(source, &reset)?;
            }
        }
        for i in 0..n {
            if let Some(last) = bufs[i].last_mut() {
                if !last.terminal && !last.truncated {
                    last.next_value = critic.value(&self.obs[i]);
                }
            }
        }
        Ok(bufs)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Clipped-surrogate loss `-mean(min(r A, clip(r) A)) - c H` recorded on a
/// tape, plus the ratio node.
fn record_ppo_loss(
    tape: &mut Tape,
    logp: Var,
    batch: &[&Transition],
    clip: f64,
    entropy: Var,
    entropy_coef: f64,
) -> (Var, Var) {
    let shape = tape.shape(logp);
    let old: Vec<f64> = batch.iter().map(|t| t.log_prob).collect();
    let adv: Vec<f64> = batch.iter().map(|t| t.advantage).collect();
    let old = tape.input(&old, shape.rows, shape.cols);
    let adv = tape.input(&adv, shape.rows, shape.cols);
    let d = tape.sub(logp, old);
    let ratio = tape.exp(d);
    let s1 = tape.mul(ratio, adv);
    let clipped = tape.clamp(ratio, 1.0 - clip, 1.0 + clip);
    let s2 = tape.mul(clipped, adv);
    let surr = tape.min(s1, s2);
    let m = tape.mean(surr);
    let pg = tape.neg(m);
    let loss = if entropy_coef != 0.0 {
        let e = tape.scale(entropy, entropy_coef);
        tape.sub(pg, e)
    } else {
        pg
    };
    (loss, ratio)
}

/// Policy loss and its gradient for one minibatch.
pub fn policy_loss_and_grad(
    policy: &Policy,
    params: &[f64],
    batch: &[&Transition],
    clip: f64,
    entropy_coef: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>, f64)> {
    let mut tape = Tape::new();
    let p = tape.row(params);
    let (logp, ent) = policy.record(&mut tape, p, batch);
    let (loss, ratio) = record_ppo_loss(&mut tape, logp, batch, clip, ent, entropy_coef);
    let g = backward(&tape, loss).map_err(|e| TrainError::Numeric {
        what: "policy gradient".into(),
        update: 0,
        detail: e.to_string(),
    })?;
    Ok((
        tape.scalar(loss),
        g.get(p).to_vec(),
        tape.value(ratio).to_vec(),
        tape.scalar(ent),
    ))
}

/// Policy loss at `params` without gradients (finite-difference oracle use).
pub fn policy_loss(policy: &Policy, params: &[f64], batch: &[&Transition], clip: f64, entropy_coef: f64) -> f64 {
    let mut tape = Tape::new();
    let p = tape.row(params);
    let (logp, ent) = policy.record(&mut tape, p, batch);
    let (loss, _) = record_ppo_loss(&mut tape, logp, batch, clip, ent, entropy_coef);
    tape.scalar(loss)
}

pub struct Learner {
    pub policy: Policy,
    pub critic: Critic,
    policy_opt: Adam,
    critic_opt: Adam,
}

impl Learner {
    pub fn new(policy: Policy, critic: Critic, cfg: &TrainConfig) -> Self {
        let np = policy.params().len();
        let nc = critic.net.param_count();
        let lr = match policy.kind() {
            PolicyKind::Ict => cfg.lr_tree,
            _ => cfg.lr_policy,
        };
        Learner {
            policy_opt: Adam::new(np, lr).with_clip(cfg.max_grad_norm),
            critic_opt: Adam::new(nc, cfg.lr_critic).with_clip(cfg.max_grad_norm),
            policy,
            critic,
        }
    }

    /// Several epochs of minibatch updates over a normalized buffer.
    pub fn ppo_update<R: Rng + ?Sized>(
        &mut self,
        buf: &[Transition],
        cfg: &TrainConfig,
        update: usize,
        rng: &mut R,
    ) -> Result<UpdateMetrics> {
        let mut metrics = UpdateMetrics::default();
        let mut count = 0.0;
        let mut order: Vec<usize> = (0..buf.len()).collect();
        let trainable = !matches!(self.policy, Policy::Random { .. });
        let numeric = |what: &str, detail: String| TrainError::Numeric {
            what: what.into(),
            update,
            detail,
        };
        for _ in 0..cfg.epochs {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
            for chunk in order.chunks(cfg.minibatch) {
                let batch: Vec<&Transition> = chunk.iter().map(|&i| &buf[i]).collect();
                if trainable {
                    let mut params = self.policy.params();
                    let (loss, grad, ratio, ent) =
                        policy_loss_and_grad(&self.policy, &params, &batch, cfg.clip, cfg.entropy_coef)?;
                    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                        return Err(numeric("policy loss", format!("loss {loss}")));
                    }
                    self.policy_opt.step(&mut params, &grad);
                    self.policy.set_params(&params);
                    metrics.policy_loss += loss;
                    metrics.entropy += ent;
                    let n = ratio.len() as f64;
                    metrics.approx_kl += ratio.iter().map(|r| (r - 1.0) - r.ln()).sum::<f64>() / n;
                    metrics.clip_fraction +=
                        ratio.iter().filter(|r| (**r - 1.0).abs() > cfg.clip).count() as f64 / n;
                }
                let (vloss, vgrad) = self.value_loss_and_grad(&batch)?;
                if !vloss.is_finite() {
                    return Err(numeric("value loss", format!("loss {vloss}")));
                }
                let mut cp = self.critic.net.params.clone();
                self.critic_opt.step(&mut cp, &vgrad);
                self.critic.net.params = cp;
                metrics.value_loss += vloss;
                count += 1.0;
            }
        }
        if count > 0.0 {
            metrics.policy_loss /= count;
            metrics.value_loss /= count;
            metrics.entropy /= count;
            metrics.approx_kl /= count;
            metrics.clip_fraction /= count;
        }
        Ok(metrics)
    }

    fn value_loss_and_grad(&self, batch: &[&Transition]) -> Result<(f64, Vec<f64>)> {
        let net = &self.critic.net;
        let b = batch.len();
        let mut tape = Tape::new();
        let p = tape.row(&net.params);
        let xs: Vec<f64> = batch.iter().flat_map(|t| t.features.iter().copied()).collect();
        let x = tape.input(&xs, b, net.input_dim());
        let v = net.record(&mut tape, p, x);
        let rets: Vec<f64> = batch.iter().map(|t| t.ret).collect();
        let r = tape.input(&rets, b, 1);
        let d = tape.sub(v, r);
        let sq = tape.square(d);
        let m = tape.mean(sq);
        let loss = tape.scale(m, 0.5);
        let g = backward(&tape, loss).map_err(|e| TrainError::Numeric {
            what: "value gradient".into(),
            update: 0,
            detail: e.to_string(),
        })?;
        Ok((tape.scalar(loss), g.get(p).to_vec()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

/// Greedy crisp-mode evaluation; episode `i` starts from seed `seed + i`.
pub fn evaluate_policy(
    policy: &Policy,
    source: &FeatureSource,
    render: RenderConfig,
    lag: usize,
    episodes: usize,
    seed: u64,
) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(TrainError::Config("episodes must be at least 1".into()));
    }
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(ep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut env = CartPole::new(seed.wrapping_add(ep as u64), render);
        let mut hist = History::default();
        let mut total = 0.0;
        loop {
            let single = source.single_batch(&[&env])?.pop().expect("one env");
            let x = hist.features(source, single, lag)?;
            let d = policy.act(&x, &mut rng, true)?;
            let (_, r, done) = env.step(d.action).map_err(|e| TrainError::Config(e.to_string()))?;
            total += r;
            if done {
                break;
            }
        }
        returns.push(total);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(EvalResult { mean, std, returns })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean_return: f64,
    pub train_return: Option<f64>,
    pub losses: Option<UpdateMetrics>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Policy,
    pub best_return: f64,
    pub final_policy: Policy,
    pub critic: Critic,
    pub curve: Vec<CurvePoint>,
}

pub const CART_POLE_ACTIONS: [&str; 2] = ["push_left", "push_right"];

/// Full training loop: collect, update, periodically evaluate, keep the best
/// policy. Writes checkpoints and `curve.jsonl` when `out_dir` is given.
pub fn train(
    cfg: &TrainConfig,
    source: &FeatureSource,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&CurvePoint),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.choice() != cfg.extractor {
        return Err(TrainError::Config(format!(
            "config asks for {:?} features but the source provides {:?}",
            cfg.extractor,
            source.choice()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names = source.names();
    let actions: Vec<String> = CART_POLE_ACTIONS.iter().map(|s| s.to_string()).collect();
    let policy = Policy::new(cfg.policy, &names, &actions, cfg, &mut rng)?;
    let critic = Critic::new(names.len(), &cfg.critic_hidden, &mut rng);
    let mut learner = Learner::new(policy, critic, cfg);
    let mut rollout = Rollout::new(1, cfg.render, source, cfg.frame_lag, &mut rng)?;

    let mut curve_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let p = dir.join("curve.jsonl");
            Some((std::fs::File::create(&p).map_err(io_err(&p))?, p))
        }
        None => None,
    };
    let mut curve = Vec::new();
    let eval = |p: &Policy| evaluate_policy(p, source, cfg.render, cfg.frame_lag, cfg.eval_episodes, cfg.eval_seed);
    let first = eval(&learner.policy)?;
    let mut best = (first.mean, learner.policy.clone());
    let mut record = |pt: CurvePoint, curve: &mut Vec<CurvePoint>| -> Result<()> {
        if let Some((f, p)) = curve_file.as_mut() {
            let line = serde_json::to_string(&pt).expect("curve point serializes");
            writeln!(f, "{line}").map_err(io_err(p))?;
        }
        progress(&pt);
        curve.push(pt);
        Ok(())
    };
    record(
        CurvePoint {
            step: 0,
            mean_return: first.mean,
            train_return: None,
            losses: None,
        },
        &mut curve,
    )?;

    let mut steps = 0;
    let mut update = 0;
    let mut next_eval = cfg.eval_every;
    while steps < cfg.total_steps {
        let len = cfg.rollout_len.min(cfg.total_steps - steps);
        let mut bufs = rollout.collect(&learner.policy, &learner.critic, source, len, &mut rng)?;
        steps += len;
        let mut buf = Vec::with_capacity(len);
        for b in bufs.iter_mut() {
            compute_gae(b, cfg.gamma, cfg.lambda);
            buf.append(b);
        }
        normalize_advantages(&mut buf);
        let metrics = learner.ppo_update(&buf, cfg, update, &mut rng)?;
        update += 1;
        if steps >= next_eval || steps >= cfg.total_steps {
            next_eval += cfg.eval_every;
            let res = eval(&learner.policy)?;
            if res.mean > best.0 {
                best = (res.mean, learner.policy.clone());
                if let Some(dir) = out_dir {
                    best.1.save(&dir.join("best_policy.json"))?;
                }
            }
            let recent = &rollout.finished_returns;
            let tail = &recent[recent.len().saturating_sub(20)..];
            record(
                CurvePoint {
                    step: steps,
                    mean_return: res.mean,
                    train_return: (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64),
                    losses: Some(metrics),
                },
                &mut curve,
            )?;
        }
    }
    if let Some(dir) = out_dir {
        learner.policy.save(&dir.join("final_policy.json"))?;
        best.1.save(&dir.join("best_policy.json"))?;
        if let Policy::Ict { tree } = &best.1 {
            let p = dir.join("tree.json");
            let text = serde_json::to_string_pretty(tree).expect("tree serializes");
            std::fs::write(&p, text + "\n").map_err(io_err(&p))?;
        }
        let p = dir.join("critic.json");
        let text = serde_json::to_string_pretty(&learner.critic).expect("critic serializes");
        std::fs::write(&p, text + "\n").map_err(io_err(&p))?;
    }
    Ok(TrainOutcome {
        best: best.1,
        best_return: best.0,
        final_policy: learner.policy,
        critic: learner.critic,
        curve,
    })
}

/// Curve as CSV for plotting.
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step,mean_return,train_return,policy_loss,value_loss,entropy,approx_kl\n");
    for p in curve {
        let l = p.losses.clone().unwrap_or_default();
        out.push_str(&format!(
            "{},{:.3},{},{:.6},{:.6},{:.6},{:.6}\n",
            p.step,
            p.mean_return,
            p.train_return.map(|r| format!("{r:.3}")).unwrap_or_default(),
            l.policy_loss,
            l.value_loss,
            l.entropy,
            l.approx_kl
        ));
    }
    out
}
