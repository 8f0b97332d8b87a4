//! Training rows from plans, a C4.5-style threshold tree, and the tree-driven policy.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::battery_model::{evolve, BatteryParams, BatteryState};
use crate::load_profiles::{seeded_rng, LoadProfile, ProfileError, BOUNDARY_EPS};
use crate::planner::{Action, Plan};
use crate::policies::{decide_builtin, BuiltinPolicy, Decision, Observation, Policy, PolicyError};
use crate::validator::validate;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LearnError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("expected {expected} features, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("label {label} outside 1..={classes}")]
    BadLabel { label: u32, classes: usize },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("{rows} rows cannot be split into {folds} folds")]
    TooFewRows { rows: usize, folds: usize },
    #[error("invalid learner setting: {0}")]
    InvalidConfig(String),
    #[error("tree text, token {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

/// How an observation is flattened into features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLayout {
    pub batteries: usize,
    /// Encode the previously active battery as N indicator columns instead of one index.
    pub one_hot_active: bool,
}

impl FeatureLayout {
    pub fn new(batteries: usize) -> Self {
        Self { batteries, one_hot_active: false }
    }

    pub fn arity(&self) -> usize {
        2 * self.batteries + if self.one_hot_active { self.batteries } else { 1 } + 1
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.arity());
        for k in 1..=self.batteries {
            names.push(format!("b{k}sigma"));
            names.push(format!("b{k}gamma"));
        }
        if self.one_hot_active {
            names.extend((1..=self.batteries).map(|k| format!("active{k}")));
        } else {
            names.push("active".into());
        }
        names.push("load".into());
        names
    }

    /// Features (σ1, γ1, …, σN, γN, B, L) with B 1-based and 0 for none.
    pub fn encode_parts(&self, sigma: &[f64], gamma: &[f64], active: Option<usize>, load: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.arity());
        for (s, g) in sigma.iter().zip(gamma) {
            out.push(*s);
            out.push(*g);
        }
        if self.one_hot_active {
            out.extend((0..self.batteries).map(|k| if active == Some(k) { 1.0 } else { 0.0 }));
        } else {
            out.push(active.map_or(0.0, |b| (b + 1) as f64));
        }
        out.push(load);
        out
    }

    pub fn encode(&self, obs: &Observation) -> Vec<f64> {
        self.encode_parts(&obs.sigma, &obs.gamma, obs.active, obs.load)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub layout: FeatureLayout,
    features: Vec<f64>,
    labels: Vec<u32>,
}

impl TrainingSet {
    pub fn new(layout: FeatureLayout) -> Self {
        Self { layout, features: Vec::new(), labels: Vec::new() }
    }

    /// Builds a set from raw rows; labels are 1-based battery numbers.
    pub fn from_rows(layout: FeatureLayout, rows: &[(Vec<f64>, u32)]) -> Result<Self, LearnError> {
        let mut set = Self::new(layout);
        for (x, y) in rows {
            set.push(x, *y)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, features: &[f64], label: u32) -> Result<(), LearnError> {
        let arity = self.layout.arity();
        if features.len() != arity {
            return Err(LearnError::ArityMismatch { expected: arity, got: features.len() });
        }
        if label == 0 || label as usize > self.layout.batteries {
            return Err(LearnError::BadLabel { label, classes: self.layout.batteries });
        }
        self.features.extend_from_slice(features);
        self.labels.push(label);
        Ok(())
    }

    pub fn extend(&mut self, other: &TrainingSet) -> Result<(), LearnError> {
        if other.layout != self.layout {
            return Err(LearnError::ArityMismatch { expected: self.layout.arity(), got: other.layout.arity() });
        }
        self.features.extend_from_slice(&other.features);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let a = self.layout.arity();
        &self.features[i * a..(i + 1) * a]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    fn subset(&self, idx: &[usize]) -> TrainingSet {
        let mut out = TrainingSet::new(self.layout);
        for &i in idx {
            out.features.extend_from_slice(self.row(i));
            out.labels.push(self.labels[i]);
        }
        out
    }

    /// CSV with the feature names and a trailing `battery` column.
    pub fn to_csv(&self) -> String {
        let mut out = self.layout.names().join(",");
        out.push_str(",battery\n");
        for i in 0..self.len() {
            for v in self.row(i) {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{}", self.labels[i]);
        }
        out
    }
}

/// Samples a valid plan every `increment` minutes while load is present.
/// Each row holds the exact charges at the tick, the battery active at the previous
/// tick (0 if none) and the load, labelled with the battery in use at the tick.
pub fn extract_training(
    plans: &[(Plan, LoadProfile)],
    params: &[BatteryParams],
    increment: f64,
    layout: FeatureLayout,
) -> Result<TrainingSet, LearnError> {
    if !(increment.is_finite() && increment > 0.0) {
        return Err(LearnError::InvalidConfig(format!("increment {increment}")));
    }
    if layout.batteries != params.len() {
        return Err(LearnError::ArityMismatch { expected: layout.batteries, got: params.len() });
    }
    let mut set = TrainingSet::new(layout);
    for (plan, profile) in plans {
        let report = validate(plan, profile, params).map_err(|e| LearnError::InvalidPlan(e.to_string()))?;
        if let Some(v) = report.violations.first() {
            return Err(LearnError::InvalidPlan(format!("{:?} at {}", v.kind, v.time)));
        }
        let mut intervals = Vec::new();
        for step in &plan.steps {
            let active = match step.action {
                Action::Use(b) => Some(b),
                Action::Wait => None,
            };
            for (a, b, load) in profile.pieces(step.start, step.end())? {
                intervals.push((a, b, active, load));
            }
        }
        let mut states: Vec<BatteryState> = params.iter().map(|p| p.fresh_state()).collect();
        let mut k: u64 = 0;
        let mut prev_active: Option<usize> = None;
        for (a, b, active, load) in intervals {
            loop {
                let tk = k as f64 * increment;
                if tk >= b - BOUNDARY_EPS {
                    break;
                }
                k += 1;
                if tk < a - BOUNDARY_EPS {
                    continue;
                }
                let dt = (tk - a).max(0.0);
                let now: Vec<BatteryState> = states
                    .iter()
                    .enumerate()
                    .map(|(i, s)| evolve(s, &params[i], if active == Some(i) { load } else { 0.0 }, dt))
                    .collect();
                if load > 0.0 {
                    let Some(on) = active else {
                        return Err(LearnError::InvalidPlan(format!("load unserviced at {tk}")));
                    };
                    let sigma: Vec<f64> = now.iter().zip(params).map(|(s, p)| s.available(p)).collect();
                    let gamma: Vec<f64> = now.iter().map(|s| s.gamma).collect();
                    set.push(&layout.encode_parts(&sigma, &gamma, prev_active, load), (on + 1) as u32)?;
                    prev_active = Some(on);
                } else {
                    prev_active = None;
                }
            }
            for (i, s) in states.iter_mut().enumerate() {
                *s = evolve(s, &params[i], if active == Some(i) { load } else { 0.0 }, b - a);
            }
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeConfig {
    pub min_leaf: usize,
    pub max_depth: usize,
    pub use_gain_ratio: bool,
    /// Pessimistic error-based pruning.
    pub prune: bool,
    /// Confidence level for pruning.
    pub confidence: f64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self { min_leaf: 2, max_depth: 64, use_gain_ratio: true, prune: false, confidence: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Leaf { class: u32 },
    Split { feature: usize, threshold: f64, left: Box<TreeNode>, right: Box<TreeNode> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    pub layout: FeatureLayout,
    pub root: TreeNode,
}

impl DecisionTree {
    /// Longest root-to-leaf path in edges.
    pub fn depth(&self) -> usize {
        fn go(n: &TreeNode) -> usize {
            match n {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + go(left).max(go(right)),
            }
        }
        go(&self.root)
    }

    pub fn node_count(&self) -> usize {
        fn go(n: &TreeNode) -> usize {
            match n {
                TreeNode::Leaf { .. } => 1,
                TreeNode::Split { left, right, .. } => 1 + go(left) + go(right),
            }
        }
        go(&self.root)
    }

    /// Class (1-based battery) for `features`; values equal to a threshold go left.
    pub fn predict(&self, features: &[f64]) -> Result<u32, LearnError> {
        let arity = self.layout.arity();
        if features.len() != arity {
            return Err(LearnError::ArityMismatch { expected: arity, got: features.len() });
        }
        let mut node = &self.root;
        loop {
            match node {
                TreeNode::Leaf { class } => return Ok(*class),
                TreeNode::Split { feature, threshold, left, right } => {
                    node = if features[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn accuracy(&self, data: &TrainingSet) -> Result<f64, LearnError> {
        if data.is_empty() {
            return Err(LearnError::EmptyDataset);
        }
        let mut hits = 0usize;
        for i in 0..data.len() {
            hits += usize::from(self.predict(data.row(i))? == data.label(i));
        }
        Ok(hits as f64 / data.len() as f64)
    }

    /// Nested `if (name<=thr) { … }` / `if (name>thr) { … }` / `return k;` text.
    pub fn render(&self) -> String {
        fn go(n: &TreeNode, names: &[String], depth: usize, out: &mut String) {
            let pad = "  ".repeat(depth);
            match n {
                TreeNode::Leaf { class } => {
                    let _ = writeln!(out, "{pad}return {class};");
                }
                TreeNode::Split { feature, threshold, left, right } => {
                    let name = &names[*feature];
                    let _ = writeln!(out, "{pad}if ({name}<={threshold:?}) {{");
                    go(left, names, depth + 1, out);
                    let _ = writeln!(out, "{pad}}}");
                    let _ = writeln!(out, "{pad}if ({name}>{threshold:?}) {{");
                    go(right, names, depth + 1, out);
                    let _ = writeln!(out, "{pad}}}");
                }
            }
        }
        let mut out = String::new();
        go(&self.root, &self.layout.names(), 0, &mut out);
        out
    }

    pub fn parse(text: &str, layout: FeatureLayout) -> Result<Self, LearnError> {
        let tokens = tokenize(text)?;
        let names = layout.names();
        let mut p = Parser { tokens, pos: 0, names: &names, classes: layout.batteries };
        let root = p.node()?;
        if p.pos != p.tokens.len() {
            return Err(p.err("trailing input"));
        }
        Ok(Self { layout, root })
    }
}

fn tokenize(text: &str) -> Result<Vec<String>, LearnError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if "(){};>".contains(c) {
            out.push(c.to_string());
            i += 1;
        } else if c == '<' && chars.get(i + 1) == Some(&'=') {
            out.push("<=".into());
            i += 2;
        } else if c.is_ascii_alphanumeric() || "._-+".contains(c) {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || "._-+".contains(chars[i])) {
                i += 1;
            }
            out.push(chars[start..i].iter().collect());
        } else {
            return Err(LearnError::Parse { pos: out.len(), msg: format!("unexpected character '{c}'") });
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<String>,
    pos: usize,
    names: &'a [String],
    classes: usize,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> LearnError {
        LearnError::Parse { pos: self.pos, msg: msg.to_string() }
    }

    fn next(&mut self) -> Result<String, LearnError> {
        let t = self.tokens.get(self.pos).cloned().ok_or_else(|| self.err("unexpected end of input"))?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, want: &str) -> Result<(), LearnError> {
        let got = self.next()?;
        if got == want {
            Ok(())
        } else {
            self.pos -= 1;
            Err(self.err(&format!("expected '{want}', found '{got}'")))
        }
    }

    fn condition(&mut self, op: &str) -> Result<(usize, f64), LearnError> {
        self.expect("if")?;
        self.expect("(")?;
        let name = self.next()?;
        let feature = self.names.iter().position(|n| *n == name).ok_or_else(|| self.err(&format!("unknown feature '{name}'")))?;
        self.expect(op)?;
        let thr = self.next()?;
        let threshold: f64 = thr.parse().map_err(|_| self.err(&format!("bad threshold '{thr}'")))?;
        self.expect(")")?;
        Ok((feature, threshold))
    }

    fn block(&mut self) -> Result<TreeNode, LearnError> {
        self.expect("{")?;
        let n = self.node()?;
        self.expect("}")?;
        Ok(n)
    }

    fn node(&mut self) -> Result<TreeNode, LearnError> {
        if self.tokens.get(self.pos).map(String::as_str) == Some("return") {
            self.pos += 1;
            let v = self.next()?;
            let class: u32 = v.parse().map_err(|_| self.err(&format!("bad class '{v}'")))?;
            if class == 0 || class as usize > self.classes {
                return Err(self.err(&format!("class {class} outside 1..={}", self.classes)));
            }
            self.expect(";")?;
            return Ok(TreeNode::Leaf { class });
        }
        let (feature, threshold) = self.condition("<=")?;
        let left = self.block()?;
        let (f2, t2) = self.condition(">")?;
        if f2 != feature || t2.to_bits() != threshold.to_bits() {
            return Err(self.err("'>' branch must repeat the '<=' condition"));
        }
        let right = self.block()?;
        Ok(TreeNode::Split { feature, threshold, left: Box::new(left), right: Box::new(right) })
    }
}

fn entropy(counts: &[usize], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Upper confidence bound on the extra errors at a leaf (pessimistic pruning).
fn added_errors(n: f64, e: f64, cf: f64) -> f64 {
    if e < 1.0 {
        let base = n * (1.0 - cf.powf(1.0 / n));
        if e == 0.0 {
            return base;
        }
        return base + e * (added_errors(n, 1.0, cf) - base);
    }
    if e + 0.5 >= n {
        return (n - e).max(0.0);
    }
    let z = normal_quantile(1.0 - cf);
    let f = (e + 0.5) / n;
    let r = (f + z * z / (2.0 * n) + z * (f / n - f * f / n + z * z / (4.0 * n * n)).sqrt()) / (1.0 + z * z / n);
    r * n - e
}

/// Inverse standard normal CDF (Acklam's rational approximation).
fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [-3.969683028665376e1, 2.209460984245205e2, -2.759285104469687e2, 1.38357751867269e2, -3.066479806614716e1, 2.506628277459239];
    const B: [f64; 5] = [-5.447609879822406e1, 1.615858368580409e2, -1.556989798598866e2, 6.680131188771972e1, -1.328068155288572e1];
    const C: [f64; 6] = [-7.784894002430293e-3, -3.223964580411365e-1, -2.400758277161838, -2.549732539343734, 4.374664141464968, 2.938163982698783];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5]) / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < 0.02425 {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - 0.02425 {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

struct Builder<'a> {
    data: &'a TrainingSet,
    classes: usize,
    config: TreeConfig,
    arity: usize,
    goes_left: Vec<bool>,
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    gain: f64,
    ratio: f64,
}

impl Builder<'_> {
    fn value(&self, row: u32, f: usize) -> f64 {
        self.data.features[row as usize * self.arity + f]
    }

    fn class(&self, row: u32) -> usize {
        self.data.labels[row as usize] as usize - 1
    }

    fn counts(&self, rows: &[u32]) -> Vec<usize> {
        let mut c = vec![0usize; self.classes];
        for &r in rows {
            c[self.class(r)] += 1;
        }
        c
    }

    /// Best midpoint split on one feature by information gain, lowest threshold on ties.
    fn best_on_feature(&self, sorted: &[u32], f: usize, parent_h: f64, totals: &[usize]) -> Option<SplitChoice> {
        let n = sorted.len();
        let min_leaf = self.config.min_leaf.max(1);
        let mut left = vec![0usize; self.classes];
        let mut right = totals.to_vec();
        let mut best: Option<SplitChoice> = None;
        for i in 0..n - 1 {
            let c = self.class(sorted[i]);
            left[c] += 1;
            right[c] -= 1;
            let nl = i + 1;
            let nr = n - nl;
            if nl < min_leaf || nr < min_leaf {
                continue;
            }
            let (v, w) = (self.value(sorted[i], f), self.value(sorted[i + 1], f));
            if v >= w {
                continue;
            }
            let (pl, pr) = (nl as f64 / n as f64, nr as f64 / n as f64);
            let gain = parent_h - pl * entropy(&left, nl) - pr * entropy(&right, nr);
            if best.as_ref().is_none_or(|b| gain > b.gain) {
                let split_info = -pl * pl.log2() - pr * pr.log2();
                let mid = 0.5 * (v + w);
                let threshold = if mid >= w || mid < v { v } else { mid };
                best = Some(SplitChoice { feature: f, threshold, gain, ratio: gain / split_info });
            }
        }
        best
    }

    fn majority(counts: &[usize]) -> u32 {
        let mut best = 0;
        for (i, &c) in counts.iter().enumerate() {
            if c > counts[best] {
                best = i;
            }
        }
        best as u32 + 1
    }

    /// Returns the subtree and its (pessimistic) error estimate.
    fn build(&mut self, sorted: Vec<Vec<u32>>, depth: usize) -> (TreeNode, f64) {
        let rows = &sorted[0];
        let n = rows.len();
        let totals = self.counts(rows);
        let class = Self::majority(&totals);
        let errors = (n - totals[class as usize - 1]) as f64;
        let leaf_estimate = errors + added_errors(n as f64, errors, self.config.confidence);
        let leaf = TreeNode::Leaf { class };
        let pure = totals.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= self.config.max_depth || n < 2 * self.config.min_leaf.max(1) {
            return (leaf, leaf_estimate);
        }
        let parent_h = entropy(&totals, n);
        let mut candidates: Vec<SplitChoice> =
            (0..self.arity).filter_map(|f| self.best_on_feature(&sorted[f], f, parent_h, &totals)).collect();
        // Zero-gain splits are kept only when nothing better exists (XOR-like nodes),
        // so consistent data is always fitted exactly.
        if candidates.iter().any(|c| c.gain > 1e-12) {
            candidates.retain(|c| c.gain > 1e-12);
        }
        if candidates.is_empty() {
            return (leaf, leaf_estimate);
        }
        let chosen = if self.config.use_gain_ratio {
            // Ratio only among splits with at least average gain, as C4.5 does.
            let avg = candidates.iter().map(|c| c.gain).sum::<f64>() / candidates.len() as f64;
            candidates
                .iter()
                .filter(|c| c.gain >= avg - 1e-12)
                .fold(None::<&SplitChoice>, |b, c| match b {
                    Some(b) if c.ratio <= b.ratio => Some(b),
                    _ => Some(c),
                })
        } else {
            candidates.iter().fold(None::<&SplitChoice>, |b, c| match b {
                Some(b) if c.gain <= b.gain => Some(b),
                _ => Some(c),
            })
        }
        .expect("candidates nonempty");
        let (feature, threshold) = (chosen.feature, chosen.threshold);

        for &r in rows {
            self.goes_left[r as usize] = self.value(r, feature) <= threshold;
        }
        let mut left_sorted = Vec::with_capacity(self.arity);
        let mut right_sorted = Vec::with_capacity(self.arity);
        for list in sorted {
            let (l, r): (Vec<u32>, Vec<u32>) = list.into_iter().partition(|&x| self.goes_left[x as usize]);
            left_sorted.push(l);
            right_sorted.push(r);
        }
        let (left, le) = self.build(left_sorted, depth + 1);
        let (right, re) = self.build(right_sorted, depth + 1);
        let subtree_estimate = le + re;
        if self.config.prune && leaf_estimate <= subtree_estimate + 0.1 {
            return (leaf, leaf_estimate);
        }
        (TreeNode::Split { feature, threshold, left: Box::new(left), right: Box::new(right) }, subtree_estimate)
    }
}

/// Grows a tree top-down; deterministic for a given row order and configuration.
pub fn train(data: &TrainingSet, config: &TreeConfig) -> Result<DecisionTree, LearnError> {
    if data.is_empty() {
        return Err(LearnError::EmptyDataset);
    }
    if config.min_leaf == 0 || !(config.confidence > 0.0 && config.confidence < 1.0) {
        return Err(LearnError::InvalidConfig(format!("{config:?}")));
    }
    let arity = data.layout.arity();
    let n = data.len();
    let sorted: Vec<Vec<u32>> = (0..arity)
        .map(|f| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| {
                data.features[a as usize * arity + f].total_cmp(&data.features[b as usize * arity + f]).then(a.cmp(&b))
            });
            idx
        })
        .collect();
    let mut b = Builder { data, classes: data.layout.batteries, config: *config, arity, goes_left: vec![false; n] };
    let (root, _) = b.build(sorted, 0);
    Ok(DecisionTree { layout: data.layout, root })
}

/// Stratified k-fold accuracy, averaged over folds. Folds are dealt per class after a
/// seeded shuffle and evaluated in parallel.
pub fn cross_validate(data: &TrainingSet, k: usize, config: &TreeConfig, seed: u64) -> Result<f64, LearnError> {
    if k < 2 {
        return Err(LearnError::InvalidConfig(format!("{k} folds")));
    }
    if data.len() < k {
        return Err(LearnError::TooFewRows { rows: data.len(), folds: k });
    }
    let mut rng = seeded_rng(seed, 1);
    let mut fold_of = vec![0usize; data.len()];
    let mut next = 0usize;
    for class in 1..=data.layout.batteries as u32 {
        let mut members: Vec<usize> = (0..data.len()).filter(|&i| data.label(i) == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            fold_of[i] = next % k;
            next += 1;
        }
    }
    let accuracies: Result<Vec<f64>, LearnError> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let train_idx: Vec<usize> = (0..data.len()).filter(|&i| fold_of[i] != fold).collect();
            let test_idx: Vec<usize> = (0..data.len()).filter(|&i| fold_of[i] == fold).collect();
            let tree = train(&data.subset(&train_idx), config)?;
            tree.accuracy(&data.subset(&test_idx))
        })
        .collect();
    let accuracies = accuracies?;
    Ok(accuracies.iter().sum::<f64>() / k as f64)
}

/// Minimum available charge the tree's pick must hold before it is trusted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    /// load · period / c: what one decision period drains from the available well.
    ChargePerPeriod { period: f64 },
    Fixed(f64),
}

/// Tree-driven policy that defers to a built-in rule when the pick is unsafe.
#[derive(Debug, Clone)]
pub struct PlanBasedPolicy {
    pub tree: DecisionTree,
    pub threshold: Threshold,
    pub fallback: BuiltinPolicy,
    fractions: Vec<f64>,
}

impl PlanBasedPolicy {
    pub fn new(tree: DecisionTree, params: &[BatteryParams], threshold: Threshold) -> Result<Self, LearnError> {
        if tree.layout.batteries != params.len() {
            return Err(LearnError::ArityMismatch { expected: tree.layout.batteries, got: params.len() });
        }
        Ok(Self { tree, threshold, fallback: BuiltinPolicy::Vmax, fractions: params.iter().map(|p| p.fraction_c()).collect() })
    }

    pub fn epsilon(&self, obs: &Observation, battery: usize) -> f64 {
        match self.threshold {
            Threshold::ChargePerPeriod { period } => obs.load * period / self.fractions[battery],
            Threshold::Fixed(v) => v,
        }
    }
}

impl Policy for PlanBasedPolicy {
    fn decide(&mut self, obs: &Observation) -> Result<Decision, PolicyError> {
        let features = self.tree.layout.encode(obs);
        let predicted = self
            .tree
            .predict(&features)
            .map_err(|_| PolicyError::ArityMismatch { expected: self.tree.layout.arity(), got: features.len() })?;
        let b = predicted as usize - 1;
        if obs.usable(b) && obs.sigma[b] >= self.epsilon(obs, b) {
            return Ok(Decision { battery: b, fallback: false });
        }
        Ok(Decision { battery: decide_builtin(self.fallback, obs)?, fallback: true })
    }

    fn name(&self) -> String {
        "plan-based".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::PlanStep;

    fn one_d(points: &[(f64, u32)]) -> TrainingSet {
        // Two-battery layout with all but the first feature constant.
        let layout = FeatureLayout::new(2);
        let rows: Vec<(Vec<f64>, u32)> =
            points.iter().map(|&(x, y)| (vec![x, 1.0, 1.0, 1.0, 0.0, 0.25], y)).collect();
        TrainingSet::from_rows(layout, &rows).unwrap()
    }

    #[test]
    fn single_class_is_a_leaf() {
        let t = train(&one_d(&[(0.1, 2), (0.5, 2), (0.9, 2)]), &TreeConfig::default()).unwrap();
        assert_eq!(t.root, TreeNode::Leaf { class: 2 });
    }

    #[test]
    fn midpoint_split() {
        let t = train(&one_d(&[(0.1, 1), (0.2, 1), (0.8, 2), (0.9, 2)]), &TreeConfig::default()).unwrap();
        match &t.root {
            TreeNode::Split { feature, threshold, left, right } => {
                assert_eq!(*feature, 0);
                assert!((threshold - 0.5).abs() < 1e-12);
                assert_eq!(**left, TreeNode::Leaf { class: 1 });
                assert_eq!(**right, TreeNode::Leaf { class: 2 });
            }
            other => panic!("expected a split, got {other:?}"),
        }
        assert_eq!(t.predict(&[0.5, 1.0, 1.0, 1.0, 0.0, 0.25]).unwrap(), 1);
        assert!(matches!(t.predict(&[0.5]), Err(LearnError::ArityMismatch { .. })));
    }

    #[test]
    fn hand_written_fragment_prediction() {
        let text = "if (b2gamma<=0.297404) {\n  if (b2gamma<=0.277404) {\n    return 1;\n  }\n  if (b2gamma>0.277404) {\n    return 2;\n  }\n}\nif (b2gamma>0.297404) {\n  return 2;\n}\n";
        let t = DecisionTree::parse(text, FeatureLayout::new(2)).unwrap();
        assert_eq!(t.render(), text);
        assert_eq!(t.predict(&[0.0, 0.0, 0.0, 0.27, 0.0, 0.0]).unwrap(), 1);
        assert_eq!(t.predict(&[0.0, 0.0, 0.0, 0.277404, 0.0, 0.0]).unwrap(), 1);
        assert_eq!(t.predict(&[0.0, 0.0, 0.0, 0.28, 0.0, 0.0]).unwrap(), 2);
        assert_eq!(t.depth(), 2);
        assert_eq!(t.node_count(), 5);
    }

    #[test]
    fn malformed_tree_text() {
        let l = FeatureLayout::new(2);
        assert!(DecisionTree::parse("return 3;", l).is_err());
        assert!(DecisionTree::parse("if (b9sigma<=1) { return 1; } if (b9sigma>1) { return 2; }", l).is_err());
        assert!(DecisionTree::parse("if (load<=1) { return 1; } if (load>2) { return 2; }", l).is_err());
    }

    #[test]
    fn one_minute_plan_gives_hundred_rows() {
        let p = [BatteryParams::b1()];
        let prof = LoadProfile::constant(0.25).unwrap();
        let plan = Plan { steps: vec![PlanStep { start: 0.0, action: Action::Use(0), duration: 1.0 }] };
        let set = extract_training(&[(plan.clone(), prof.clone())], &p, 0.01, FeatureLayout::new(1)).unwrap();
        assert_eq!(set.len(), 100);
        assert!((0..set.len()).all(|i| set.label(i) == 1));
        assert_eq!(set.row(0)[2], 0.0);
        assert_eq!(set.row(1)[2], 1.0);
        let coarse = extract_training(&[(plan, prof)], &p, 5.0, FeatureLayout::new(1)).unwrap();
        assert_eq!(coarse.len(), 1);
    }

    #[test]
    fn invalid_plans_are_refused() {
        let p = [BatteryParams::b1()];
        let prof = LoadProfile::constant(0.25).unwrap();
        let plan = Plan { steps: vec![PlanStep { start: 0.0, action: Action::Use(0), duration: 6.0 }] };
        assert!(matches!(
            extract_training(&[(plan, prof)], &p, 0.01, FeatureLayout::new(1)),
            Err(LearnError::InvalidPlan(_))
        ));
    }

    #[test]
    fn default_threshold_value() {
        let tree = DecisionTree { layout: FeatureLayout::new(2), root: TreeNode::Leaf { class: 1 } };
        let p = [BatteryParams::b1(), BatteryParams::b1()];
        let pol = PlanBasedPolicy::new(tree, &p, Threshold::ChargePerPeriod { period: 0.01 }).unwrap();
        let obs = Observation::from_states(&[p[0].fresh_state(), p[1].fresh_state()], &p, None, 0.25);
        assert!((pol.epsilon(&obs, 0) - 0.0150602).abs() < 1e-6);
    }

    #[test]
    fn fallback_when_pick_is_empty() {
        let tree = DecisionTree { layout: FeatureLayout::new(2), root: TreeNode::Leaf { class: 1 } };
        let p = [BatteryParams::b1(), BatteryParams::b1()];
        let mut pol = PlanBasedPolicy::new(tree, &p, Threshold::ChargePerPeriod { period: 0.01 }).unwrap();
        let mut obs = Observation::from_states(&[p[0].fresh_state(), p[1].fresh_state()], &p, None, 0.25);
        assert_eq!(pol.decide(&obs).unwrap(), Decision { battery: 0, fallback: false });
        obs.sigma[0] = 0.0;
        assert_eq!(pol.decide(&obs).unwrap(), Decision { battery: 1, fallback: true });
    }

    #[test]
    fn one_hot_layout() {
        let l = FeatureLayout { batteries: 2, one_hot_active: true };
        assert_eq!(l.arity(), 7);
        assert_eq!(l.names()[4..6], ["active1".to_string(), "active2".to_string()]);
        assert_eq!(l.encode_parts(&[1.0, 2.0], &[3.0, 4.0], Some(1), 0.5), vec![1.0, 3.0, 2.0, 4.0, 0.0, 1.0, 0.5]);
    }

    #[test]
    fn pruning_collapses_noise() {
        // Class 1 everywhere except isolated flips; pruning should fold them away.
        let pts: Vec<(f64, u32)> = (0..60).map(|i| (i as f64, if i % 20 == 7 { 2 } else { 1 })).collect();
        let data = one_d(&pts);
        let full = train(&data, &TreeConfig { min_leaf: 1, ..Default::default() }).unwrap();
        let pruned = train(&data, &TreeConfig { min_leaf: 1, prune: true, ..Default::default() }).unwrap();
        assert!(pruned.node_count() < full.node_count());
        assert_eq!(full.accuracy(&data).unwrap(), 1.0);
    }

    #[test]
    fn quantile_sanity() {
        assert!((normal_quantile(0.75) - 0.6744897).abs() < 1e-6);
        assert!(normal_quantile(0.5).abs() < 1e-12);
    }

    #[test]
    fn xor_is_fitted_despite_zero_root_gain() {
        let layout = FeatureLayout::new(2);
        let rows: Vec<(Vec<f64>, u32)> = [(0.0, 0.0, 1), (0.0, 1.0, 2), (1.0, 0.0, 2), (1.0, 1.0, 1)]
            .iter()
            .map(|&(a, b, y)| (vec![a, b, 1.0, 1.0, 0.0, 0.25], y))
            .collect();
        let data = TrainingSet::from_rows(layout, &rows).unwrap();
        let tree = train(&data, &TreeConfig { min_leaf: 1, ..TreeConfig::default() }).unwrap();
        assert_eq!(tree.accuracy(&data).unwrap(), 1.0);
        assert_eq!(tree.depth(), 2);
    }
}
