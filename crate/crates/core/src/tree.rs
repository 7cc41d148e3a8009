//! Interpretable control tree: a complete binary tree whose decision nodes each
//! threshold a single input feature and whose leaves hold sparse linear action
//! heads.
//!
//! Routing is always crisp. Training-time gradients reach the discrete parts
//! through straight-through surrogates recorded on a [`Tape`]:
//!
//! * node decisions use `sigmoid(alpha * (w_k * x_k - b))`,
//! * per-node feature selection uses a Gumbel-softmax over `|w|`,
//! * per-head leaf feature masks use `softmax(|theta|)`.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{softmax_into, Tape, Var};

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
}

pub type Result<T> = std::result::Result<T, TreeError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

impl ActionSpace {
    pub fn dim(&self) -> usize {
        match *self {
            ActionSpace::Discrete(m) | ActionSpace::Continuous(m) => m,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Infer,
    Train,
}

/// How the discrete parts of the tree appear on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relaxation {
    /// Crisp forward, discrete choices recorded as constants (no gradient).
    Hard,
    /// Crisp forward, gradients of the soft surrogates.
    StraightThrough,
    /// Soft surrogates in the forward pass as well.
    Soft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionNode {
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Result of picking the feature a node tests.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureChoice {
    pub index: usize,
    /// Softmax of the (perturbed) selection logits; kept for the backward pass.
    pub soft: Vec<f64>,
    /// Gumbel noise used, if any.
    pub noise: Option<Vec<f64>>,
}

fn check_finite(x: &[f64], what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TreeError::Numeric(format!("{what} contains non-finite values")))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Gap between the largest and second-largest value.
fn top_gap(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return f64::INFINITY;
    }
    let k = argmax(values);
    let second = values
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != k)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    values[k] - second
}

/// Standard Gumbel draw `-ln(-ln u)`, `u` uniform in (0, 1).
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let mut u: f64 = rng.gen();
    while u <= 0.0 {
        u = rng.gen();
    }
    -(-u.ln()).ln()
}

fn selection_logits(weights: &[f64], noise: Option<&[f64]>, tau: f64) -> Vec<f64> {
    match noise {
        Some(g) => weights
            .iter()
            .zip(g)
            .map(|(w, g)| (w.abs() + g) / tau)
            .collect(),
        None => weights.iter().map(|w| w.abs() / tau).collect(),
    }
}

#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl DecisionNode {
    /// Picks the tested feature: `argmax |w|` when inferring, a hard
    /// Gumbel-softmax sample at temperature `tau` when training.
    pub fn select_feature<R: Rng + ?Sized>(
        &self,
        mode: Mode,
        tau: f64,
        rng: &mut R,
    ) -> Result<FeatureChoice> {
        if self.weights.is_empty() {
            return Err(TreeError::InvalidModel("empty weight vector".into()));
        }
        let noise = match mode {
            Mode::Infer => None,
            Mode::Train => Some((0..self.weights.len()).map(|_| gumbel(rng)).collect::<Vec<_>>()),
        };
        self.select_with_noise(noise.as_deref(), tau)
    }

    pub fn select_with_noise(&self, noise: Option<&[f64]>, tau: f64) -> Result<FeatureChoice> {
        if self.weights.is_empty() {
            return Err(TreeError::InvalidModel("empty weight vector".into()));
        }
        let logits = selection_logits(&self.weights, noise, tau);
        let mut soft = vec![0.0; logits.len()];
        softmax_into(&logits, &mut soft);
        Ok(FeatureChoice {
            index: argmax(&logits),
            soft,
            noise: noise.map(<[f64]>::to_vec),
        })
    }

    fn pre_activation(&self, alpha: f64, x: &[f64], k: usize) -> Result<f64> {
        if k >= self.weights.len() || k >= x.len() {
            return Err(TreeError::InvalidInput(format!(
                "feature index {k} out of range"
            )));
        }
        let z = alpha * (self.weights[k] * x[k] - self.bias);
        if !z.is_finite() {
            return Err(TreeError::Numeric(format!("decision pre-activation {z}")));
        }
        Ok(z)
    }

    /// Fuzzy decision `sigmoid(alpha * (w_k * x_k - b))`.
    pub fn decide_soft(&self, alpha: f64, x: &[f64], k: usize) -> Result<f64> {
        Ok(logistic(self.pre_activation(alpha, x, k)?))
    }

    /// Crisp decision `alpha * (w_k * x_k - b) > 0`; the boundary maps to `false`.
    pub fn decide_crisp(&self, alpha: f64, x: &[f64], k: usize) -> Result<bool> {
        Ok(self.pre_activation(alpha, x, k)? > 0.0)
    }
}

/// Top-`k` mask over `|theta|`; ties go to the lower index.
pub fn k_hot(theta: &[f64], k: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..theta.len()).collect();
    order.sort_by(|&a, &b| {
        theta[b]
            .abs()
            .partial_cmp(&theta[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut mask = vec![0.0; theta.len()];
    for &i in order.iter().take(k) {
        mask[i] = 1.0;
    }
    mask
}

/// Gap in `|theta|` between the k-th and (k+1)-th largest entries.
fn k_hot_gap(theta: &[f64], k: usize) -> f64 {
    if k == 0 || k >= theta.len() {
        return f64::INFINITY;
    }
    let mut mags: Vec<f64> = theta.iter().map(|t| t.abs()).collect();
    mags.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    mags[k - 1] - mags[k]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafController {
    /// Feature-selector weights, one row per action head.
    pub theta: Vec<Vec<f64>>,
    /// Linear head weights, one row per action head.
    pub beta: Vec<Vec<f64>>,
    /// Scalar bias per head.
    pub phi: Vec<f64>,
    /// State-independent log standard deviation per action dimension
    /// (continuous action spaces only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_std: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionDistribution {
    Discrete { probs: Vec<f64> },
    Continuous { mean: Vec<f64>, std: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn as_discrete(&self) -> Option<usize> {
        match self {
            Action::Discrete(a) => Some(*a),
            Action::Continuous(_) => None,
        }
    }
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

impl ActionDistribution {
    pub fn log_prob(&self, action: &Action) -> Result<f64> {
        match (self, action) {
            (ActionDistribution::Discrete { probs }, Action::Discrete(a)) => probs
                .get(*a)
                .map(|p| p.ln())
                .ok_or_else(|| TreeError::InvalidInput(format!("action {a} out of range"))),
            (ActionDistribution::Continuous { mean, std }, Action::Continuous(v)) => {
                if v.len() != mean.len() {
                    return Err(TreeError::InvalidInput("action dimension mismatch".into()));
                }
                Ok(mean
                    .iter()
                    .zip(std)
                    .zip(v)
                    .map(|((m, s), v)| {
                        let z = (v - m) / s;
                        -0.5 * z * z - s.ln() - LN_SQRT_2PI
                    })
                    .sum())
            }
            _ => Err(TreeError::InvalidInput("action kind does not match distribution".into())),
        }
    }

    /// Most likely action: PMF argmax or the Gaussian means.
    pub fn greedy(&self) -> Action {
        match self {
            ActionDistribution::Discrete { probs } => Action::Discrete(argmax(probs)),
            ActionDistribution::Continuous { mean, .. } => Action::Continuous(mean.clone()),
        }
    }

    pub fn entropy(&self) -> f64 {
        match self {
            ActionDistribution::Discrete { probs } => probs
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|p| -p * p.ln())
                .sum(),
            ActionDistribution::Continuous { std, .. } => {
                std.iter().map(|s| s.ln() + LN_SQRT_2PI + 0.5).sum()
            }
        }
    }
}

/// Draws an action and returns it with its exact log-probability (or log-density).
pub fn sample_action<R: Rng + ?Sized>(
    dist: &ActionDistribution,
    rng: &mut R,
) -> Result<(Action, f64)> {
    match dist {
        ActionDistribution::Discrete { probs } => {
            let total: f64 = probs.iter().sum();
            if probs.is_empty()
                || !total.is_finite()
                || total <= 0.0
                || probs.iter().any(|&p| p < 0.0 || !p.is_finite())
            {
                return Err(TreeError::InvalidDistribution(format!("degenerate PMF {probs:?}")));
            }
            let u: f64 = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if p > 0.0 && u < acc {
                    chosen = Some(i);
                    break;
                }
            }
            // Rounding can leave u == acc at the very end; fall back to the last
            // action with mass.
            let a = chosen.unwrap_or_else(|| probs.iter().rposition(|&p| p > 0.0).unwrap_or(0));
            Ok((Action::Discrete(a), (probs[a] / total).ln()))
        }
        ActionDistribution::Continuous { mean, std } => {
            if std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
                return Err(TreeError::InvalidDistribution(format!("bad std {std:?}")));
            }
            let v: Vec<f64> = mean
                .iter()
                .zip(std)
                .map(|(m, s)| m + s * standard_normal(rng))
                .collect();
            let action = Action::Continuous(v);
            let lp = dist.log_prob(&action)?;
            Ok((action, lp))
        }
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller; u1 in (0, 1].
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl LeafController {
    pub fn heads(&self) -> usize {
        self.phi.len()
    }

    fn masks(&self, k: usize) -> Vec<Vec<f64>> {
        self.theta.iter().map(|t| k_hot(t, k)).collect()
    }

    /// Head outputs `(u ∘ beta)·(u ∘ x) + phi` with hard k-hot masks.
    pub fn head_outputs(&self, x: &[f64], k: usize) -> Vec<f64> {
        self.masks(k)
            .iter()
            .zip(&self.beta)
            .zip(&self.phi)
            .map(|((u, beta), phi)| {
                let mut s = 0.0;
                for j in 0..x.len() {
                    s += (u[j] * beta[j]) * (u[j] * x[j]);
                }
                s + phi
            })
            .collect()
    }

    /// Indices of the features a head reads, in index order.
    pub fn active_features(&self, head: usize, k: usize) -> Vec<usize> {
        k_hot(&self.theta[head], k)
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// One routing decision taken on the way to a leaf.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteStep {
    pub node: usize,
    pub feature: usize,
    pub bit: bool,
    pub soft: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeOutput {
    pub dist: ActionDistribution,
    pub leaf: usize,
    pub trace: Vec<RouteStep>,
    /// Gumbel noise drawn for every node (train mode), flattened node-major.
    pub noise: Option<Vec<f64>>,
}

/// Initialization ranges. Defaults: weights uniform in [-0.1, 0.1], biases 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeInit {
    pub weight_range: f64,
    pub alpha: f64,
    pub tau: f64,
    pub sparsity_k: usize,
    pub log_std: f64,
}

impl Default for TreeInit {
    fn default() -> Self {
        TreeInit {
            weight_range: 0.1,
            alpha: 1.0,
            tau: 1.0,
            sparsity_k: 1,
            log_std: 0.0,
        }
    }
}

/// Complete binary tree in array layout: node `i` has children `2i+1`
/// (decision false) and `2i+2` (decision true); leaves follow the
/// `2^depth - 1` internal nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlTree {
    pub depth: usize,
    pub feature_dim: usize,
    pub action_space: ActionSpace,
    pub alpha: f64,
    pub tau: f64,
    pub sparsity_k: usize,
    pub nodes: Vec<DecisionNode>,
    pub leaves: Vec<LeafController>,
    #[serde(default)]
    pub feature_names: Vec<String>,
    #[serde(default)]
    pub action_names: Vec<String>,
}

impl ControlTree {
    pub fn new<R: Rng + ?Sized>(
        depth: usize,
        feature_dim: usize,
        action_space: ActionSpace,
        init: &TreeInit,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 || feature_dim == 0 || action_space.dim() == 0 {
            return Err(TreeError::InvalidModel(
                "depth, feature_dim and action dimension must be positive".into(),
            ));
        }
        let r = init.weight_range;
        let mut uniform = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 })
                .collect()
        };
        let n_nodes = (1 << depth) - 1;
        let nodes = (0..n_nodes)
            .map(|_| DecisionNode {
                weights: uniform(feature_dim),
                bias: 0.0,
            })
            .collect();
        let m = action_space.dim();
        let leaves = (0..1usize << depth)
            .map(|_| LeafController {
                theta: (0..m).map(|_| uniform(feature_dim)).collect(),
                beta: (0..m).map(|_| uniform(feature_dim)).collect(),
                phi: vec![0.0; m],
                log_std: match action_space {
                    ActionSpace::Continuous(_) => Some(vec![init.log_std; m]),
                    ActionSpace::Discrete(_) => None,
                },
            })
            .collect();
        let tree = ControlTree {
            depth,
            feature_dim,
            action_space,
            alpha: init.alpha,
            tau: init.tau,
            sparsity_k: init.sparsity_k,
            nodes,
            leaves,
            feature_names: (0..feature_dim).map(|i| format!("x{i}")).collect(),
            action_names: (0..m).map(|i| format!("a{i}")).collect(),
        };
        tree.validate()?;
        Ok(tree)
    }

    pub fn with_names(mut self, features: Vec<String>, actions: Vec<String>) -> Result<Self> {
        if features.len() != self.feature_dim || actions.len() != self.action_space.dim() {
            return Err(TreeError::InvalidInput("name lists do not match dimensions".into()));
        }
        self.feature_names = features;
        self.action_names = actions;
        Ok(self)
    }

    pub fn n_nodes(&self) -> usize {
        (1 << self.depth) - 1
    }

    pub fn n_leaves(&self) -> usize {
        1 << self.depth
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TreeError::InvalidModel(m));
        if self.depth == 0 {
            return bad("depth must be positive".into());
        }
        if self.nodes.len() != self.n_nodes() || self.leaves.len() != self.n_leaves() {
            return bad(format!(
                "depth {} needs {} nodes and {} leaves, got {} and {}",
                self.depth,
                self.n_nodes(),
                self.n_leaves(),
                self.nodes.len(),
                self.leaves.len()
            ));
        }
        if !(self.alpha > 0.0) || !(self.tau > 0.0) {
            return bad(format!("alpha {} and tau {} must be positive", self.alpha, self.tau));
        }
        if self.sparsity_k == 0 || self.sparsity_k > self.feature_dim {
            return bad(format!(
                "sparsity_k {} must lie in 1..={}",
                self.sparsity_k, self.feature_dim
            ));
        }
        let m = self.action_space.dim();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.weights.len() != self.feature_dim {
                return bad(format!("node {i} has {} weights", n.weights.len()));
            }
        }
        for (i, l) in self.leaves.iter().enumerate() {
            let rows_ok = |rows: &Vec<Vec<f64>>| {
                rows.len() == m && rows.iter().all(|r| r.len() == self.feature_dim)
            };
            if !rows_ok(&l.theta) || !rows_ok(&l.beta) || l.phi.len() != m {
                return bad(format!("leaf {i} head shapes do not match"));
            }
            match (self.action_space, &l.log_std) {
                (ActionSpace::Continuous(_), Some(s)) if s.len() == m => {}
                (ActionSpace::Discrete(_), None) => {}
                _ => return bad(format!("leaf {i} log_std does not match action space")),
            }
        }
        if !self.feature_names.is_empty() && self.feature_names.len() != self.feature_dim {
            return bad("feature_names length mismatch".into());
        }
        if !self.action_names.is_empty() && self.action_names.len() != m {
            return bad("action_names length mismatch".into());
        }
        Ok(())
    }

    /// Computes a leaf's action distribution for input `x`.
    pub fn leaf_distribution(&self, leaf: usize, x: &[f64]) -> Result<ActionDistribution> {
        let l = self
            .leaves
            .get(leaf)
            .ok_or_else(|| TreeError::InvalidInput(format!("no leaf {leaf}")))?;
        leaf_distribution(l, x, self.sparsity_k, self.action_space)
    }

    /// Draws one Gumbel vector per node, flattened node-major.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.n_nodes() * self.feature_dim)
            .map(|_| gumbel(rng))
            .collect()
    }

    /// Crisp root-to-leaf evaluation. Train mode draws Gumbel noise for
    /// feature selection from `rng`; infer mode selects by `argmax |w|`.
    pub fn forward<R: Rng + ?Sized>(&self, x: &[f64], mode: Mode, rng: &mut R) -> Result<TreeOutput> {
        let noise = match mode {
            Mode::Infer => None,
            Mode::Train => Some(self.sample_noise(rng)),
        };
        let mut out = self.forward_with_noise(x, noise.as_deref())?;
        out.noise = noise;
        Ok(out)
    }

    /// Deterministic evaluation with explicit selection noise.
    pub fn forward_with_noise(&self, x: &[f64], noise: Option<&[f64]>) -> Result<TreeOutput> {
        if x.len() != self.feature_dim {
            return Err(TreeError::InvalidInput(format!(
                "expected {} features, got {}",
                self.feature_dim,
                x.len()
            )));
        }
        check_finite(x, "input")?;
        if let Some(g) = noise {
            if g.len() != self.n_nodes() * self.feature_dim {
                return Err(TreeError::InvalidInput("noise length mismatch".into()));
            }
        }
        let f = self.feature_dim;
        let mut i = 0usize;
        let mut trace = Vec::with_capacity(self.depth);
        for _ in 0..self.depth {
            let node = &self.nodes[i];
            let g = noise.map(|g| &g[i * f..(i + 1) * f]);
            let k = argmax(&selection_logits(&node.weights, g, self.tau));
            let z = node.pre_activation(self.alpha, x, k)?;
            let bit = z > 0.0;
            trace.push(RouteStep {
                node: i,
                feature: k,
                bit,
                soft: logistic(z),
            });
            i = 2 * i + 1 + bit as usize;
        }
        let leaf = i - self.n_nodes();
        Ok(TreeOutput {
            dist: self.leaf_distribution(leaf, x)?,
            leaf,
            trace,
            noise: noise.map(<[f64]>::to_vec),
        })
    }

    pub fn param_count(&self) -> usize {
        let f = self.feature_dim;
        let m = self.action_space.dim();
        let per_leaf = 2 * m * f
            + m
            + match self.action_space {
                ActionSpace::Continuous(_) => m,
                ActionSpace::Discrete(_) => 0,
            };
        self.n_nodes() * (f + 1) + 1 + self.n_leaves() * per_leaf
    }

    /// Flat parameter vector: node weights and bias, alpha, then per leaf
    /// theta rows, beta rows, phi and (continuous) log_std.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for n in &self.nodes {
            p.extend_from_slice(&n.weights);
            p.push(n.bias);
        }
        p.push(self.alpha);
        for l in &self.leaves {
            l.theta.iter().for_each(|r| p.extend_from_slice(r));
            l.beta.iter().for_each(|r| p.extend_from_slice(r));
            p.extend_from_slice(&l.phi);
            if let Some(s) = &l.log_std {
                p.extend_from_slice(s);
            }
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.param_count(), "parameter vector length");
        let f = self.feature_dim;
        let mut it = p.iter().copied();
        let mut take = |dst: &mut [f64]| dst.iter_mut().for_each(|d| *d = it.next().unwrap());
        for n in &mut self.nodes {
            take(&mut n.weights);
            let mut b = [0.0];
            take(&mut b);
            n.bias = b[0];
        }
        let mut a = [0.0];
        take(&mut a);
        self.alpha = a[0];
        for l in &mut self.leaves {
            l.theta.iter_mut().for_each(|r| take(r));
            l.beta.iter_mut().for_each(|r| take(r));
            take(&mut l.phi);
            if let Some(s) = &mut l.log_std {
                take(s);
            }
        }
        debug_assert!(self.nodes.iter().all(|n| n.weights.len() == f));
    }

    /// Keeps alpha strictly positive after a gradient step.
    pub fn enforce_invariants(&mut self) {
        if !(self.alpha >= 1e-3) {
            self.alpha = 1e-3;
        }
    }

    /// Registers slices of a flat parameter row (see [`ControlTree::params`]).
    pub fn bind(&self, tape: &mut Tape, params: Var) -> BoundTree {
        let f = self.feature_dim;
        let m = self.action_space.dim();
        let mut at = 0usize;
        let mut next = |tape: &mut Tape, len: usize| {
            let v = tape.slice(params, at, 1, len);
            at += len;
            v
        };
        let mut node_w = Vec::with_capacity(self.n_nodes());
        let mut node_b = Vec::with_capacity(self.n_nodes());
        for _ in 0..self.n_nodes() {
            node_w.push(next(tape, f));
            node_b.push(next(tape, 1));
        }
        let alpha = next(tape, 1);
        let continuous = matches!(self.action_space, ActionSpace::Continuous(_));
        let leaves = (0..self.n_leaves())
            .map(|_| BoundLeaf {
                theta: (0..m).map(|_| next(tape, f)).collect(),
                beta: (0..m).map(|_| next(tape, f)).collect(),
                phi: next(tape, m),
                log_std: continuous.then(|| next(tape, m)),
            })
            .collect();
        BoundTree {
            node_w,
            node_b,
            alpha,
            leaves,
        }
    }

    /// Plain-text rule listing: nested predicates with sparse leaf rules.
    pub fn export_text(&self) -> Result<String> {
        self.check_names()?;
        let mut out = String::new();
        self.write_text(&mut out, 0, 0);
        Ok(out)
    }

    fn write_text(&self, out: &mut String, i: usize, indent: usize) {
        let pad = "  ".repeat(indent);
        if i >= self.n_nodes() {
            let leaf = i - self.n_nodes();
            let _ = writeln!(out, "{pad}leaf {leaf}:");
            for line in self.leaf_rules(leaf) {
                let _ = writeln!(out, "{pad}  {line}");
            }
            return;
        }
        let _ = writeln!(out, "{pad}if {}:", self.predicate(i));
        self.write_text(out, 2 * i + 2, indent + 1);
        let _ = writeln!(out, "{pad}else:");
        self.write_text(out, 2 * i + 1, indent + 1);
    }

    /// Graphviz digraph; edges are labelled with the predicate outcome.
    pub fn export_dot(&self) -> Result<String> {
        self.check_names()?;
        let mut out = String::from("digraph ict {\n  node [shape=box, fontname=\"Helvetica\"];\n");
        for i in 0..self.n_nodes() {
            let _ = writeln!(out, "  n{i} [label=\"{}\"];", dot_escape(&self.predicate(i)));
        }
        for leaf in 0..self.n_leaves() {
            let mut label = format!("leaf {leaf}");
            for r in self.leaf_rules(leaf) {
                label.push('\n');
                label.push_str(&r);
            }
            let _ = writeln!(
                out,
                "  n{} [label=\"{}\", shape=ellipse];",
                self.n_nodes() + leaf,
                dot_escape(&label)
            );
        }
        for i in 0..self.n_nodes() {
            let _ = writeln!(out, "  n{i} -> n{} [label=\"false\"];", 2 * i + 1);
            let _ = writeln!(out, "  n{i} -> n{} [label=\"true\"];", 2 * i + 2);
        }
        out.push_str("}\n");
        Ok(out)
    }

    fn check_names(&self) -> Result<()> {
        if self.feature_names.len() != self.feature_dim
            || self.action_names.len() != self.action_space.dim()
        {
            return Err(TreeError::InvalidInput("name lists do not match dimensions".into()));
        }
        Ok(())
    }

    /// `"w·feature > b"` for the feature a node tests at inference time.
    pub fn predicate(&self, node: usize) -> String {
        let n = &self.nodes[node];
        let k = argmax(&selection_logits(&n.weights, None, self.tau));
        format!("{:.2}·{} > {:.2}", n.weights[k], self.feature_names[k], n.bias)
    }

    /// One rule per head naming only the active features.
    pub fn leaf_rules(&self, leaf: usize) -> Vec<String> {
        let l = &self.leaves[leaf];
        let mut rules = Vec::with_capacity(l.heads());
        for h in 0..l.heads() {
            let terms: Vec<String> = l
                .active_features(h, self.sparsity_k)
                .into_iter()
                .map(|j| format!("{:.2}·{}", l.beta[h][j], self.feature_names[j]))
                .collect();
            let rhs = format!("{} {} {:.2}", terms.join(" + "), if l.phi[h] < 0.0 { "-" } else { "+" }, l.phi[h].abs());
            let rule = match self.action_space {
                ActionSpace::Discrete(_) => format!("logit({}) = {rhs}", self.action_names[h]),
                ActionSpace::Continuous(_) => {
                    let s = l.log_std.as_ref().map(|s| s[h].exp()).unwrap_or(1.0);
                    format!("{} ~ N({rhs}, {s:.2}²)", self.action_names[h])
                }
            };
            rules.push(rule);
        }
        rules
    }
}

fn dot_escape(s: &str) -> String {
    let mut o = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => o.push_str("\\\""),
            '\\' => o.push_str("\\\\"),
            '\n' => o.push_str("\\n"),
            c => o.push(c),
        }
    }
    o
}

/// Distribution of a single leaf controller.
pub fn leaf_distribution(
    leaf: &LeafController,
    x: &[f64],
    sparsity_k: usize,
    space: ActionSpace,
) -> Result<ActionDistribution> {
    if sparsity_k == 0 || sparsity_k > x.len() {
        return Err(TreeError::InvalidModel(format!(
            "sparsity_k {sparsity_k} exceeds feature dimension {}",
            x.len()
        )));
    }
    if leaf.theta.iter().any(|t| t.len() != x.len()) {
        return Err(TreeError::InvalidInput("feature dimension mismatch".into()));
    }
    let z = leaf.head_outputs(x, sparsity_k);
    check_finite(&z, "leaf head outputs")?;
    Ok(match space {
        ActionSpace::Discrete(_) => {
            let mut probs = vec![0.0; z.len()];
            softmax_into(&z, &mut probs);
            ActionDistribution::Discrete { probs }
        }
        ActionSpace::Continuous(_) => {
            let log_std = leaf
                .log_std
                .as_ref()
                .ok_or_else(|| TreeError::InvalidModel("continuous leaf without log_std".into()))?;
            ActionDistribution::Continuous {
                mean: z,
                std: log_std.iter().map(|s| s.exp()).collect(),
            }
        }
    })
}

#[derive(Clone, Debug)]
pub struct BoundLeaf {
    pub theta: Vec<Var>,
    pub beta: Vec<Var>,
    pub phi: Var,
    pub log_std: Option<Var>,
}

/// Tree parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundTree {
    pub node_w: Vec<Var>,
    pub node_b: Vec<Var>,
    pub alpha: Var,
    pub leaves: Vec<BoundLeaf>,
}

/// A policy evaluation recorded on a tape.
#[derive(Clone, Debug)]
pub enum RecordedPolicy {
    /// Path-weighted mixture PMF (`1 x m`).
    Discrete { probs: Var },
    /// Per-leaf (path weight, mean, log_std) components.
    Continuous { components: Vec<(Var, Var, Var)> },
}

impl RecordedPolicy {
    pub fn log_prob(&self, tape: &mut Tape, action: &Action) -> Var {
        match (self, action) {
            (RecordedPolicy::Discrete { probs }, Action::Discrete(a)) => {
                let p = tape.index(*probs, *a);
                tape.ln(p)
            }
            (RecordedPolicy::Continuous { components }, Action::Continuous(v)) => {
                let av = tape.row(v);
                let mut density: Option<Var> = None;
                for &(w, mean, log_std) in components {
                    let d = tape.sub(av, mean);
                    let std = tape.exp(log_std);
                    let z = tape.div(d, std);
                    let z2 = tape.square(z);
                    let half = tape.scale(z2, -0.5);
                    let t = tape.sub(half, log_std);
                    let lp = tape.offset(t, -LN_SQRT_2PI);
                    let lp = tape.sum(lp);
                    let dens = tape.exp(lp);
                    let c = tape.mul(w, dens);
                    density = Some(match density {
                        Some(acc) => tape.add(acc, c),
                        None => c,
                    });
                }
                let d = density.expect("at least one component");
                tape.ln(d)
            }
            _ => panic!("action kind does not match recorded policy"),
        }
    }

    pub fn entropy(&self, tape: &mut Tape) -> Var {
        match self {
            RecordedPolicy::Discrete { probs } => {
                let lp = tape.ln(*probs);
                let plp = tape.mul(*probs, lp);
                let s = tape.sum(plp);
                tape.neg(s)
            }
            RecordedPolicy::Continuous { components } => {
                let mut acc: Option<Var> = None;
                for &(w, _, log_std) in components {
                    let h = tape.offset(log_std, LN_SQRT_2PI + 0.5);
                    let h = tape.sum(h);
                    let c = tape.mul(w, h);
                    acc = Some(match acc {
                        Some(a) => tape.add(a, c),
                        None => c,
                    });
                }
                acc.expect("at least one component")
            }
        }
    }
}

impl BoundTree {
    /// Records the policy at `x` under the given relaxation. `noise` is the
    /// node-major Gumbel noise used for feature selection (none = argmax |w|).
    pub fn record(
        &self,
        tree: &ControlTree,
        tape: &mut Tape,
        x: &[f64],
        relax: Relaxation,
        noise: Option<&[f64]>,
    ) -> RecordedPolicy {
        let f = tree.feature_dim;
        let xv = tape.row(x);
        let n_nodes = tree.n_nodes();

        // Decision values per node (hard bit or soft probability of "true").
        let mut y: Vec<Var> = Vec::with_capacity(n_nodes);
        let mut bits: Vec<bool> = Vec::with_capacity(n_nodes);
        for i in 0..n_nodes {
            let node = &tree.nodes[i];
            let g = noise.map(|g| &g[i * f..(i + 1) * f]);
            let logits = selection_logits(&node.weights, g, tree.tau);
            let k = argmax(&logits);
            tape.note_margin(top_gap(&logits) * tree.tau);
            let w = self.node_w[i];
            let selected = match relax {
                Relaxation::Hard => {
                    let wk = tape.index(w, k);
                    let xk = tape.constant(x[k]);
                    tape.mul(wk, xk)
                }
                Relaxation::StraightThrough | Relaxation::Soft => {
                    let abs = tape.abs(w);
                    let shifted = match g {
                        Some(g) => {
                            let gv = tape.row(g);
                            tape.add(abs, gv)
                        }
                        None => abs,
                    };
                    let scaled = tape.scale(shifted, 1.0 / tree.tau);
                    let soft = tape.softmax(scaled);
                    let s = if relax == Relaxation::Soft {
                        soft
                    } else {
                        let mut onehot = vec![0.0; f];
                        onehot[k] = 1.0;
                        tape.straight_through(&onehot, soft)
                    };
                    let sw = tape.mul(s, w);
                    let swx = tape.mul(sw, xv);
                    tape.sum(swx)
                }
            };
            let centered = tape.sub(selected, self.node_b[i]);
            let pre = tape.mul(self.alpha, centered);
            let z = tape.scalar(pre);
            let bit = z > 0.0;
            bits.push(bit);
            let yi = match relax {
                Relaxation::Hard => {
                    tape.note_margin(z);
                    tape.constant(bit as u8 as f64)
                }
                Relaxation::StraightThrough => {
                    tape.note_margin(z);
                    let soft = tape.logistic(pre);
                    tape.straight_through(&[bit as u8 as f64], soft)
                }
                Relaxation::Soft => tape.logistic(pre),
            };
            y.push(yi);
        }

        // Path weights, breadth-first over the implicit layout.
        let one = tape.constant(1.0);
        let mut weight: Vec<Var> = vec![one; n_nodes + tree.n_leaves()];
        for i in 0..n_nodes {
            let right = tape.mul(weight[i], y[i]);
            let not_y = tape.sub(one, y[i]);
            let left = tape.mul(weight[i], not_y);
            weight[2 * i + 1] = left;
            weight[2 * i + 2] = right;
        }

        let chosen = {
            let mut i = 0;
            while i < n_nodes {
                i = 2 * i + 1 + bits[i] as usize;
            }
            i - n_nodes
        };
        let leaves: Vec<usize> = match relax {
            Relaxation::Hard => vec![chosen],
            _ => (0..tree.n_leaves()).collect(),
        };

        let mut mixture: Option<Var> = None;
        let mut components = Vec::new();
        for leaf in leaves {
            let bl = &self.leaves[leaf];
            let tl = &tree.leaves[leaf];
            let mut heads = Vec::with_capacity(bl.beta.len());
            for h in 0..bl.beta.len() {
                let mask = k_hot(&tl.theta[h], tree.sparsity_k);
                tape.note_margin(k_hot_gap(&tl.theta[h], tree.sparsity_k));
                let u = match relax {
                    Relaxation::Hard => tape.row(&mask),
                    _ => {
                        let abs = tape.abs(bl.theta[h]);
                        let soft = tape.softmax(abs);
                        if relax == Relaxation::Soft {
                            soft
                        } else {
                            tape.straight_through(&mask, soft)
                        }
                    }
                };
                let ub = tape.mul(u, bl.beta[h]);
                let ux = tape.mul(u, xv);
                let prod = tape.mul(ub, ux);
                let dot = tape.sum(prod);
                let phi = tape.index(bl.phi, h);
                heads.push(tape.add(dot, phi));
            }
            let z = tape.stack(&heads);
            let w = weight[n_nodes + leaf];
            match tree.action_space {
                ActionSpace::Discrete(_) => {
                    let pmf = tape.softmax(z);
                    let term = if relax == Relaxation::Hard {
                        pmf
                    } else {
                        tape.mul(w, pmf)
                    };
                    mixture = Some(match mixture {
                        Some(acc) => tape.add(acc, term),
                        None => term,
                    });
                }
                ActionSpace::Continuous(_) => {
                    let w = if relax == Relaxation::Hard { one } else { w };
                    components.push((w, z, bl.log_std.expect("continuous leaf")));
                }
            }
        }
        match tree.action_space {
            ActionSpace::Discrete(_) => RecordedPolicy::Discrete {
                probs: mixture.expect("at least one leaf"),
            },
            ActionSpace::Continuous(_) => RecordedPolicy::Continuous { components },
        }
    }
}
