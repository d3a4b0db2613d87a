//! Synthetic referring environment and a linear include/exclude policy.
//!
//! Each task is a scene of colored, sized candidates on a 1000x1000 canvas
//! and an expression built from up to two predicates (color, size, leftmost
//! or rightmost). The policy makes one include/exclude decision per hint, in
//! hint order; each decision is one "token" for the optimizer. Rollouts go
//! through the real output grammar and reward path.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::grammar::{
    parse_response, serialize_response, Action, Answer, BoxHint, LabeledBox, ReferringTask, SubsetTag, ThinkTrace,
    Verdict,
};
use crate::metrics::{default_grid, evaluate, EvalReport, PredictionRecord};
use crate::reward::{reward_response, RewardBreakdown, RewardConfig};
use crate::rng;

pub const CANVAS: f64 = 1000.0;
const GRID: usize = 4;
const CELL: i64 = 250;
/// Features that do not depend on the color vocabulary.
const BASE_FEATURES: usize = 13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_tasks: usize,
    pub min_candidates: usize,
    pub max_candidates: usize,
    pub colors: Vec<String>,
    /// Size levels, smallest first.
    pub sizes: Vec<String>,
    pub positions: bool,
    pub max_arity: usize,
    pub rejection_fraction: f64,
    pub category: String,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_tasks: 200,
            min_candidates: 2,
            max_candidates: 6,
            colors: ["red", "blue", "green", "yellow", "black", "white"]
                .map(String::from)
                .to_vec(),
            sizes: ["small", "medium", "large"].map(String::from).to_vec(),
            positions: true,
            max_arity: 2,
            rejection_fraction: 0.1,
            category: "person".into(),
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..1.0).contains(&self.rejection_fraction) {
            return bad(format!(
                "rejection fraction must be in [0, 1), got {}",
                self.rejection_fraction
            ));
        }
        if self.min_candidates == 0 || self.min_candidates > self.max_candidates {
            return bad(format!(
                "candidate range {}..={} is empty",
                self.min_candidates, self.max_candidates
            ));
        }
        if self.max_candidates > GRID * GRID {
            return bad(format!(
                "at most {} candidates fit on the canvas, asked for {}",
                GRID * GRID,
                self.max_candidates
            ));
        }
        if self.colors.is_empty() || self.sizes.is_empty() {
            return bad("color and size vocabularies must be nonempty".into());
        }
        if self.max_arity == 0 || self.max_arity > 2 {
            return bad(format!("expression arity must be 1 or 2, got {}", self.max_arity));
        }
        if self.rejection_fraction > 0.0 && self.colors.len() < 2 && self.sizes.len() < 2 {
            return bad("rejection tasks need at least two colors or two sizes".into());
        }
        if self.category.trim().is_empty() || self.category.contains(':') {
            return bad(format!("invalid category {:?}", self.category));
        }
        Ok(())
    }

    /// Policy feature dimension for tasks generated from this spec.
    pub fn feature_dim(&self) -> usize {
        BASE_FEATURES + self.colors.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Leftmost,
    Rightmost,
}

impl Side {
    fn as_str(self) -> &'static str {
        match self {
            Side::Leftmost => "leftmost",
            Side::Rightmost => "rightmost",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub color: usize,
    pub size: usize,
}

/// Conjunction of up to one predicate per kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Predicates {
    pub color: Option<usize>,
    pub size: Option<usize>,
    pub position: Option<Side>,
}

impl Predicates {
    pub fn arity(&self) -> usize {
        usize::from(self.color.is_some()) + usize::from(self.size.is_some()) + usize::from(self.position.is_some())
    }
}

/// A referring task together with the scene it was rendered from.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub task: ReferringTask,
    pub candidates: Vec<Candidate>,
    pub predicates: Predicates,
    pub n_colors: usize,
    pub n_sizes: usize,
}

impl ToyTask {
    fn attributes_hold(&self, k: usize) -> bool {
        let c = &self.candidates[k];
        self.predicates.color.is_none_or(|v| c.color == v) && self.predicates.size.is_none_or(|v| c.size == v)
    }

    /// Hint indices ordered left to right by box center (ties by index).
    fn left_to_right(&self, among: impl Iterator<Item = usize>) -> Vec<usize> {
        let mut idx: Vec<usize> = among.collect();
        let hints = &self.task.hints;
        idx.sort_by(|&a, &b| {
            hints[a]
                .bbox
                .center_x()
                .total_cmp(&hints[b].bbox.center_x())
                .then(a.cmp(&b))
        });
        idx
    }

    fn extreme(order: &[usize], side: Side) -> Option<usize> {
        match side {
            Side::Leftmost => order.first().copied(),
            Side::Rightmost => order.last().copied(),
        }
    }

    fn position_holds(&self, k: usize) -> bool {
        match self.predicates.position {
            None => true,
            Some(side) => {
                let order = self.left_to_right((0..self.candidates.len()).filter(|&i| self.attributes_hold(i)));
                Self::extreme(&order, side) == Some(k)
            }
        }
    }

    /// Whether hint index `k` (0-based) satisfies every predicate.
    pub fn satisfies(&self, k: usize) -> bool {
        self.attributes_hold(k) && self.position_holds(k)
    }

    pub fn feature_dim(&self) -> usize {
        BASE_FEATURES + self.n_colors
    }
}

fn expression_text(p: &Predicates, spec: &SyntheticSpec) -> String {
    let mut words = vec!["the".to_string()];
    if let Some(side) = p.position {
        words.push(side.as_str().into());
    }
    if let Some(s) = p.size {
        words.push(spec.sizes[s].clone());
    }
    if let Some(c) = p.color {
        words.push(spec.colors[c].clone());
    }
    words.push(spec.category.clone());
    words.join(" ")
}

fn sample_scene(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<Candidate>, Vec<BBox>)> {
    let n = rng.gen_range(spec.min_candidates..=spec.max_candidates);
    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    cells.shuffle(rng);
    let levels = spec.sizes.len();
    let mut candidates = Vec::with_capacity(n);
    let mut boxes = Vec::with_capacity(n);
    for &cell in &cells[..n] {
        let size = rng.gen_range(0..levels);
        let color = rng.gen_range(0..spec.colors.len());
        let width = if levels == 1 {
            120
        } else {
            40 + (160 * size as i64) / (levels as i64 - 1)
        };
        let height = (2 * width).min(CELL - 10);
        let (cx, cy) = ((cell % GRID) as i64, (cell / GRID) as i64);
        let x0 = cx * CELL + rng.gen_range(0..=CELL - width - 1);
        let y0 = cy * CELL + rng.gen_range(0..=CELL - height - 1);
        boxes.push(BBox::new(
            x0 as f64,
            y0 as f64,
            (x0 + width) as f64,
            (y0 + height) as f64,
        )?);
        candidates.push(Candidate { color, size });
    }
    Ok((candidates, boxes))
}

fn sample_predicates(spec: &SyntheticSpec, target: Candidate, rng: &mut ChaCha8Rng) -> Predicates {
    let mut kinds = vec![0u8, 1];
    if spec.positions {
        kinds.push(2);
    }
    kinds.shuffle(rng);
    let arity = rng.gen_range(1..=spec.max_arity.min(kinds.len()));
    let mut p = Predicates::default();
    for kind in &kinds[..arity] {
        match kind {
            0 => p.color = Some(target.color),
            1 => p.size = Some(target.size),
            _ => {
                p.position = Some(if rng.gen_bool(0.5) {
                    Side::Leftmost
                } else {
                    Side::Rightmost
                })
            }
        }
    }
    p
}

fn build_task(
    spec: &SyntheticSpec,
    index: usize,
    candidates: Vec<Candidate>,
    boxes: Vec<BBox>,
    predicates: Predicates,
) -> ToyTask {
    let hints = boxes
        .into_iter()
        .enumerate()
        .map(|(i, b)| BoxHint::new(format!("{} {}", spec.category, i + 1), b))
        .collect();
    let mut toy = ToyTask {
        task: ReferringTask {
            task_id: format!("syn-{}-{index:05}", spec.seed),
            image_ref: format!("synthetic://{}/{index}", spec.seed),
            subset: SubsetTag::Attribute,
            category: spec.category.clone(),
            expression: expression_text(&predicates, spec),
            hints,
            gt: Vec::new(),
        },
        candidates,
        predicates,
        n_colors: spec.colors.len(),
        n_sizes: spec.sizes.len(),
    };
    toy.task.gt = (0..toy.candidates.len())
        .filter(|&k| toy.satisfies(k))
        .map(|k| k + 1)
        .collect();
    toy.task.subset = if toy.task.gt.is_empty() {
        SubsetTag::Rejection
    } else if predicates.position.is_some() {
        SubsetTag::Position
    } else {
        SubsetTag::Attribute
    };
    toy
}

const MAX_ATTEMPTS: usize = 1000;

fn generate_one(spec: &SyntheticSpec, index: usize) -> Result<ToyTask> {
    let mut rng = rng::stream(spec.seed, "task", &[index as u64]);
    let rejection = rng.gen_bool(spec.rejection_fraction);
    for _ in 0..MAX_ATTEMPTS {
        let (candidates, boxes) = sample_scene(spec, &mut rng)?;
        if rejection {
            // Draw predicates from a random attribute combination and keep
            // the first one nothing in the scene satisfies.
            for _ in 0..MAX_ATTEMPTS / 10 {
                let phantom = Candidate {
                    color: rng.gen_range(0..spec.colors.len()),
                    size: rng.gen_range(0..spec.sizes.len()),
                };
                let p = sample_predicates(spec, phantom, &mut rng);
                let toy = build_task(spec, index, candidates.clone(), boxes.clone(), p);
                if toy.task.gt.is_empty() {
                    return Ok(toy);
                }
            }
        } else {
            let target = candidates[rng.gen_range(0..candidates.len())];
            let p = sample_predicates(spec, target, &mut rng);
            return Ok(build_task(spec, index, candidates, boxes, p));
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not build an unsatisfiable expression for task {index} with this vocabulary"
    )))
}

/// Deterministic task list for `spec`.
pub fn generate_tasks(spec: &SyntheticSpec) -> Result<Vec<ToyTask>> {
    spec.validate()?;
    (0..spec.n_tasks).map(|i| generate_one(spec, i)).collect()
}

/// Features for hint index `k` (0-based):
///
/// | index | meaning |
/// |-------|---------|
/// | 0 | bias |
/// | 1, 2 | expression names a color; candidate has it |
/// | 3, 4 | expression names a size; candidate has it |
/// | 5, 6 | expression names a side; candidate is the extreme one among attribute matches |
/// | 7 | number of predicates |
/// | 8 | number of satisfied predicates |
/// | 9 | rank distance from the named side, in [0, 1] |
/// | 10 | size level in [0, 1] |
/// | 11 | left-to-right rank in [0, 1] |
/// | 12 | number of candidates / 10 |
/// | 13.. | one-hot candidate color |
pub fn featurize(toy: &ToyTask, k: usize) -> Vec<f64> {
    let n = toy.candidates.len();
    let c = toy.candidates[k];
    let p = &toy.predicates;
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    let color_match = p.color.map_or(0.0, |v| ind(c.color == v));
    let size_match = p.size.map_or(0.0, |v| ind(c.size == v));
    let pos_match = if p.position.is_some() {
        ind(toy.attributes_hold(k) && toy.position_holds(k))
    } else {
        0.0
    };

    let order = toy.left_to_right(0..n);
    let rank = order.iter().position(|&i| i == k).expect("candidate in order");
    let span = (n.max(2) - 1) as f64;
    let rank_delta = match p.position {
        Some(Side::Leftmost) => rank as f64 / span,
        Some(Side::Rightmost) => (n - 1 - rank) as f64 / span,
        None => 0.0,
    };
    let size_level = if toy.n_sizes > 1 {
        c.size as f64 / (toy.n_sizes - 1) as f64
    } else {
        0.0
    };

    let mut f = Vec::with_capacity(toy.feature_dim());
    f.extend_from_slice(&[
        1.0,
        ind(p.color.is_some()),
        color_match,
        ind(p.size.is_some()),
        size_match,
        ind(p.position.is_some()),
        pos_match,
        p.arity() as f64,
        color_match + size_match + pos_match,
        rank_delta,
        size_level,
        rank as f64 / span,
        n as f64 / 10.0,
    ]);
    f.extend((0..toy.n_colors).map(|i| ind(i == c.color)));
    f
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicyParams {
    pub weights: Vec<f64>,
}

impl ToyPolicyParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn logit(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.len(),
                actual: features.len(),
            });
        }
        Ok(self.weights.iter().zip(features).map(|(w, x)| w * x).sum())
    }
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-probability of one decision given the tempered logit.
pub fn decision_logprob(scaled_logit: f64, include: bool) -> f64 {
    if include {
        -softplus(-scaled_logit)
    } else {
        -softplus(scaled_logit)
    }
}

/// Decision features of every hint, in hint order.
pub fn task_features(toy: &ToyTask) -> Vec<Vec<f64>> {
    (0..toy.candidates.len()).map(|k| featurize(toy, k)).collect()
}

/// Per-token log-probabilities of `selection` under the policy.
pub fn policy_logprob(
    params: &ToyPolicyParams,
    toy: &ToyTask,
    selection: &[bool],
    temperature: f64,
) -> Result<Vec<f64>> {
    logprobs_from_features(params, &task_features(toy), selection, temperature)
}

pub fn logprobs_from_features(
    params: &ToyPolicyParams,
    features: &[Vec<f64>],
    selection: &[bool],
    temperature: f64,
) -> Result<Vec<f64>> {
    if selection.len() != features.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            actual: selection.len(),
        });
    }
    features
        .iter()
        .zip(selection)
        .map(|(phi, &y)| Ok(decision_logprob(params.logit(phi)? / temperature, y)))
        .collect()
}

/// Gradient of each token's log-probability: `(y - p) * phi / temperature`.
pub fn logprob_grads_from_features(
    params: &ToyPolicyParams,
    features: &[Vec<f64>],
    selection: &[bool],
    temperature: f64,
) -> Result<Vec<Vec<f64>>> {
    if selection.len() != features.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            actual: selection.len(),
        });
    }
    features
        .iter()
        .zip(selection)
        .map(|(phi, &y)| {
            let p = sigmoid(params.logit(phi)? / temperature);
            let coef = (if y { 1.0 } else { 0.0 } - p) / temperature;
            Ok(phi.iter().map(|x| coef * x).collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub raw: String,
    pub selection: Vec<bool>,
    pub logprobs: Vec<f64>,
    pub reward: RewardBreakdown,
}

fn describe(toy: &ToyTask, spec_colors: &[String], spec_sizes: &[String]) -> String {
    let p = &toy.predicates;
    let mut parts = Vec::new();
    if let Some(c) = p.color {
        parts.push(format!("color {}", spec_colors[c]));
    }
    if let Some(s) = p.size {
        parts.push(format!("size {}", spec_sizes[s]));
    }
    if let Some(side) = p.position {
        parts.push(format!("{} position", side.as_str()));
    }
    format!("Check each {} for {}", toy.task.category, parts.join(" and "))
}

/// Render a selection as response text: one plan line, one action per hint
/// and the selected hints copied verbatim into the answer.
pub fn render_selection(toy: &ToyTask, spec: &SyntheticSpec, selection: &[bool]) -> Result<String> {
    let task = &toy.task;
    let actions = selection
        .iter()
        .enumerate()
        .map(|(i, &on)| Action {
            ordinal: i + 1,
            verdict: if on { Verdict::Match } else { Verdict::NoMatch },
            rationale: if on {
                "fits the description".into()
            } else {
                "does not fit the description".into()
            },
        })
        .collect();
    let chosen: Vec<LabeledBox> = task
        .hints
        .iter()
        .zip(selection)
        .filter(|(_, &on)| on)
        .map(|(h, _)| LabeledBox::from(h))
        .collect();
    let summary = if chosen.is_empty() {
        format!("No {} matches the description", task.category)
    } else {
        let labels: Vec<&str> = chosen.iter().map(|b| b.label.as_str()).collect();
        format!("Selected {}", labels.join(", "))
    };
    let trace = ThinkTrace {
        plan: vec![describe(toy, &spec.colors, &spec.sizes)],
        actions,
        summary,
    };
    let answer = if chosen.is_empty() {
        Answer::Rejection
    } else {
        Answer::Boxes(chosen)
    };
    serialize_response(&trace, &answer, Some(task))
}

/// Recover the include decisions from response text.
pub fn selection_from_text(toy: &ToyTask, raw: &str) -> Vec<bool> {
    let boxes = parse_response(raw).answer.boxes();
    toy.task.hints.iter().map(|h| boxes.contains(&h.bbox)).collect()
}

pub fn sample_selection(
    params: &ToyPolicyParams,
    features: &[Vec<f64>],
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<bool>> {
    features
        .iter()
        .map(|phi| {
            let p = sigmoid(params.logit(phi)? / temperature);
            Ok(rng.gen::<f64>() < p)
        })
        .collect()
}

/// Include exactly the hints with probability above one half.
pub fn greedy_selection(params: &ToyPolicyParams, toy: &ToyTask) -> Result<Vec<bool>> {
    task_features(toy)
        .iter()
        .map(|phi| Ok(params.logit(phi)? > 0.0))
        .collect()
}

pub fn rollout(
    params: &ToyPolicyParams,
    toy: &ToyTask,
    spec: &SyntheticSpec,
    temperature: f64,
    reward_cfg: &RewardConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Rollout> {
    let features = task_features(toy);
    let selection = sample_selection(params, &features, temperature, rng)?;
    rollout_with_selection(params, toy, spec, temperature, reward_cfg, selection)
}

/// Score a fixed selection; the reward only sees the rendered text.
pub fn rollout_with_selection(
    params: &ToyPolicyParams,
    toy: &ToyTask,
    spec: &SyntheticSpec,
    temperature: f64,
    reward_cfg: &RewardConfig,
    selection: Vec<bool>,
) -> Result<Rollout> {
    let logprobs = policy_logprob(params, toy, &selection, temperature)?;
    let raw = render_selection(toy, spec, &selection)?;
    let reward = reward_response(&toy.task, &raw, reward_cfg);
    Ok(Rollout {
        raw,
        selection,
        logprobs,
        reward,
    })
}

/// Greedy decode every task through the output grammar.
pub fn greedy_predictions(
    params: &ToyPolicyParams,
    tasks: &[ToyTask],
    spec: &SyntheticSpec,
) -> Result<Vec<PredictionRecord>> {
    tasks
        .iter()
        .map(|toy| {
            let selection = greedy_selection(params, toy)?;
            let raw = render_selection(toy, spec, &selection)?;
            Ok(PredictionRecord::from_raw(toy.task.task_id.clone(), raw))
        })
        .collect()
}

/// Evaluate greedy decoding on `tasks` with the default threshold grid.
pub fn greedy_report(params: &ToyPolicyParams, tasks: &[ToyTask], spec: &SyntheticSpec) -> Result<EvalReport> {
    let preds = greedy_predictions(params, tasks, spec)?;
    let plain: Vec<ReferringTask> = tasks.iter().map(|t| t.task.clone()).collect();
    evaluate(&plain, &preds, &default_grid())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::reward_predictions;

    fn small_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_tasks: 60,
            seed,
            rejection_fraction: 0.2,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec(3);
        let a = generate_tasks(&spec).unwrap();
        let b = generate_tasks(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_tasks(&small_spec(4)).unwrap();
        assert_ne!(a[0].task, c[0].task);
    }

    #[test]
    fn generated_tasks_are_valid_and_consistent() {
        let spec = small_spec(11);
        let tasks = generate_tasks(&spec).unwrap();
        assert!(tasks.iter().any(|t| t.task.subset == SubsetTag::Rejection));
        assert!(tasks.iter().any(|t| t.task.subset == SubsetTag::Position));
        assert!(tasks.iter().any(|t| t.task.subset == SubsetTag::Attribute));
        for t in &tasks {
            t.task.validate().unwrap();
            let n = t.candidates.len();
            assert!((spec.min_candidates..=spec.max_candidates).contains(&n));
            // Hints never overlap.
            for i in 0..n {
                for j in i + 1..n {
                    assert_eq!(crate::geometry::iou(&t.task.hints[i].bbox, &t.task.hints[j].bbox), 0.0);
                }
                let b = t.task.hints[i].bbox;
                assert!(b.x0() >= 0.0 && b.y0() >= 0.0 && b.x1() <= CANVAS && b.y1() <= CANVAS);
            }
            assert_eq!(t.task.is_rejection(), t.task.subset == SubsetTag::Rejection);
            assert!(t.predicates.arity() >= 1 && t.predicates.arity() <= spec.max_arity);
        }
    }

    /// Independent re-evaluation of the rendered expression against the scene.
    #[test]
    fn ground_truth_matches_expression_oracle() {
        let spec = small_spec(5);
        for t in generate_tasks(&spec).unwrap() {
            let words: Vec<&str> = t.task.expression.split(' ').collect();
            let color = spec.colors.iter().position(|c| words.contains(&c.as_str()));
            let size = spec.sizes.iter().position(|s| words.contains(&s.as_str()));
            let side = if words.contains(&"leftmost") {
                Some(true)
            } else if words.contains(&"rightmost") {
                Some(false)
            } else {
                None
            };
            let attr_ok: Vec<usize> = (0..t.candidates.len())
                .filter(|&k| color.is_none_or(|c| t.candidates[k].color == c))
                .filter(|&k| size.is_none_or(|s| t.candidates[k].size == s))
                .collect();
            let expected: Vec<usize> = match side {
                None => attr_ok.iter().map(|k| k + 1).collect(),
                Some(left) => {
                    let cx = |k: usize| t.task.hints[k].bbox.center_x();
                    let pick = attr_ok.iter().copied().reduce(|a, b| {
                        let better = if left { cx(b) < cx(a) } else { cx(b) > cx(a) };
                        if better {
                            b
                        } else {
                            a
                        }
                    });
                    pick.map(|k| vec![k + 1]).unwrap_or_default()
                }
            };
            assert_eq!(t.task.gt, expected, "{}", t.task.expression);
        }
    }

    #[test]
    fn zero_rejection_fraction_gives_nonempty_ground_truth() {
        let spec = SyntheticSpec {
            n_tasks: 100,
            rejection_fraction: 0.0,
            ..Default::default()
        };
        assert!(generate_tasks(&spec).unwrap().iter().all(|t| !t.task.gt.is_empty()));
    }

    #[test]
    fn impossible_specs_are_rejected() {
        let spec = SyntheticSpec {
            max_candidates: 17,
            ..Default::default()
        };
        assert!(generate_tasks(&spec).is_err());
        let spec = SyntheticSpec {
            rejection_fraction: 1.0,
            ..Default::default()
        };
        assert!(generate_tasks(&spec).is_err());
        let spec = SyntheticSpec {
            min_candidates: 4,
            max_candidates: 3,
            ..Default::default()
        };
        assert!(generate_tasks(&spec).is_err());
        let spec = SyntheticSpec {
            colors: vec!["red".into()],
            sizes: vec!["big".into()],
            ..Default::default()
        };
        assert!(generate_tasks(&spec).is_err());
    }

    #[test]
    fn features_follow_the_documented_layout() {
        let spec = SyntheticSpec::default();
        assert_eq!(spec.feature_dim(), 19);
        for t in generate_tasks(&small_spec(9)).unwrap() {
            for k in 0..t.candidates.len() {
                let f = featurize(&t, k);
                assert_eq!(f.len(), 19);
                assert_eq!(f[0], 1.0);
                if t.satisfies(k) {
                    assert_eq!(f[8], f[7], "all predicates satisfied");
                    for (has, hit) in [(1, 2), (3, 4), (5, 6)] {
                        assert_eq!(f[has], f[hit]);
                    }
                } else {
                    assert!(f[8] < f[7]);
                }
            }
        }
    }

    #[test]
    fn identical_candidates_share_features() {
        let spec = SyntheticSpec::default();
        let boxes = vec![
            BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            BBox::new(500.0, 0.0, 510.0, 10.0).unwrap(),
            BBox::new(900.0, 0.0, 910.0, 10.0).unwrap(),
        ];
        let cands = vec![
            Candidate { color: 0, size: 1 },
            Candidate { color: 0, size: 1 },
            Candidate { color: 1, size: 1 },
        ];
        let t = build_task(
            &spec,
            0,
            cands,
            boxes,
            Predicates {
                color: Some(0),
                ..Default::default()
            },
        );
        let (a, b) = (featurize(&t, 0), featurize(&t, 1));
        // Only the left-to-right rank differs.
        for i in (0..a.len()).filter(|&i| i != 11) {
            assert_eq!(a[i], b[i], "feature {i}");
        }
    }

    #[test]
    fn logprob_examples() {
        let t = &generate_tasks(&small_spec(1)).unwrap()[0];
        let n = t.candidates.len();
        let zero = ToyPolicyParams::zeros(t.feature_dim());
        let sel: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        for lp in policy_logprob(&zero, t, &sel, 1.0).unwrap() {
            assert!((lp - 0.5f64.ln()).abs() < 1e-15);
        }
        let mut big = zero.clone();
        big.weights[0] = 1e4;
        let all = vec![true; n];
        for lp in policy_logprob(&big, t, &all, 1.0).unwrap() {
            assert!(lp <= 0.0 && lp > -1e-12);
        }
        for lp in policy_logprob(&big, t, &vec![false; n], 1.0).unwrap() {
            assert!(lp.is_finite() && lp < -1e3);
        }
        assert!(policy_logprob(&ToyPolicyParams::zeros(3), t, &sel, 1.0).is_err());
        assert!(policy_logprob(&zero, t, &sel[..n - 1], 1.0).is_err());
    }

    #[test]
    fn logprob_gradient_matches_finite_differences() {
        let tasks = generate_tasks(&small_spec(2)).unwrap();
        let mut rng = rng::stream(99, "test", &[]);
        for t in tasks.iter().take(10) {
            let d = t.feature_dim();
            let params = ToyPolicyParams {
                weights: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            };
            let sel: Vec<bool> = (0..t.candidates.len()).map(|_| rng.gen_bool(0.5)).collect();
            let temperature = 0.7;
            let feats = task_features(t);
            let grads = logprob_grads_from_features(&params, &feats, &sel, temperature).unwrap();
            let total = |p: &ToyPolicyParams| -> f64 {
                logprobs_from_features(p, &feats, &sel, temperature)
                    .unwrap()
                    .iter()
                    .sum()
            };
            let h = 1e-6;
            for j in 0..d {
                let analytic: f64 = grads.iter().map(|g| g[j]).sum();
                let mut plus = params.clone();
                plus.weights[j] += h;
                let mut minus = params.clone();
                minus.weights[j] -= h;
                let numeric = (total(&plus) - total(&minus)) / (2.0 * h);
                let scale = analytic.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    (analytic - numeric).abs() / scale <= 1e-6,
                    "component {j}: {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn forced_selections() {
        let spec = small_spec(8);
        let cfg = RewardConfig::default();
        let tasks = generate_tasks(&spec).unwrap();
        let params = ToyPolicyParams::zeros(spec.feature_dim());
        for t in &tasks {
            let gt_sel: Vec<bool> = (1..=t.candidates.len()).map(|o| t.task.gt.contains(&o)).collect();
            let r = rollout_with_selection(&params, t, &spec, 1.0, &cfg, gt_sel).unwrap();
            assert_eq!(r.reward.total, 1.0, "{}", r.raw);
        }
    }

    #[test]
    fn rollouts_round_trip_and_match_direct_reward() {
        let spec = small_spec(21);
        let cfg = RewardConfig::default();
        let tasks = generate_tasks(&spec).unwrap();
        let mut wrng = rng::stream(1, "w", &[]);
        let params = ToyPolicyParams {
            weights: (0..spec.feature_dim()).map(|_| wrng.gen_range(-2.0..2.0)).collect(),
        };
        for (i, t) in tasks.iter().enumerate() {
            let mut r1 = rng::stream(5, "rollout", &[i as u64]);
            let mut r2 = rng::stream(5, "rollout", &[i as u64]);
            let a = rollout(&params, t, &spec, 1.0, &cfg, &mut r1).unwrap();
            let b = rollout(&params, t, &spec, 1.0, &cfg, &mut r2).unwrap();
            assert_eq!(a, b);
            assert_eq!(selection_from_text(t, &a.raw), a.selection);
            let parsed = parse_response(&a.raw);
            assert!(parsed.format_ok);
            let trace = parsed.trace.unwrap();
            assert_eq!(trace.actions.len(), t.candidates.len());
            let chosen: Vec<BBox> = t
                .task
                .hints
                .iter()
                .zip(&a.selection)
                .filter(|(_, &s)| s)
                .map(|(h, _)| h.bbox)
                .collect();
            assert_eq!(a.reward, reward_predictions(&t.task, &chosen, true, &cfg));
        }
    }
}
