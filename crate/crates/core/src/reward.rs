//! Exact-match F1 accuracy reward, binary format reward and their weighted
//! combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{exact_match_set, BBox, DEFAULT_MATCH_TOL};
use crate::grammar::{parse_response, validate_format, ReferringTask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Weight of the F1 term; the format term gets `1 - lambda`.
    pub lambda: f64,
    pub match_tol: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda: 0.9,
            match_tol: DEFAULT_MATCH_TOL,
        }
    }
}

impl RewardConfig {
    pub fn new(lambda: f64, match_tol: f64) -> Result<Self> {
        let cfg = Self { lambda, match_tol };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.match_tol >= 0.0 && self.match_tol.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "match tolerance must be finite and >= 0, got {}",
                self.match_tol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fmt: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrecisionRecall {
    /// Precision/recall/F1 from match counts.
    ///
    /// Both sets empty scores 1 (a correct abstention); exactly one empty
    /// set scores 0.
    pub fn from_counts(matched: usize, n_preds: usize, n_gts: usize) -> Self {
        match (n_preds, n_gts) {
            (0, 0) => Self {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            },
            (0, _) | (_, 0) => Self {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
            },
            _ => {
                let precision = matched as f64 / n_preds as f64;
                let recall = matched as f64 / n_gts as f64;
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                Self { precision, recall, f1 }
            }
        }
    }
}

pub fn f1_reward(preds: &[BBox], gts: &[BBox], tol: f64) -> PrecisionRecall {
    let matched = exact_match_set(preds, gts, tol).len();
    PrecisionRecall::from_counts(matched, preds.len(), gts.len())
}

pub fn format_reward(raw: &str) -> f64 {
    if validate_format(raw) {
        1.0
    } else {
        0.0
    }
}

pub fn total_reward(f1: f64, fmt: f64, cfg: &RewardConfig) -> f64 {
    cfg.lambda * f1 + (1.0 - cfg.lambda) * fmt
}

/// Score a raw response against a task. Never fails: malformed answers are
/// an empty prediction set.
pub fn reward_response(task: &ReferringTask, raw: &str, cfg: &RewardConfig) -> RewardBreakdown {
    let response = parse_response(raw);
    let preds = response.answer.boxes();
    reward_predictions(task, &preds, response.format_ok, cfg)
}

/// Reward for an already-extracted prediction set.
pub fn reward_predictions(
    task: &ReferringTask,
    preds: &[BBox],
    format_ok: bool,
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let pr = f1_reward(preds, &task.gt_boxes(), cfg.match_tol);
    let fmt = if format_ok { 1.0 } else { 0.0 };
    RewardBreakdown {
        precision: pr.precision,
        recall: pr.recall,
        f1: pr.f1,
        fmt,
        total: total_reward(pr.f1, fmt, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{serialize_response, Answer, BoxHint, LabeledBox, SubsetTag, ThinkTrace};
    use proptest::prelude::*;

    fn bx(x0: f64, x1: f64) -> BBox {
        BBox::new(x0, 0.0, x1, 10.0).unwrap()
    }

    fn task(gt: Vec<usize>) -> ReferringTask {
        ReferringTask {
            task_id: "t".into(),
            image_ref: "i".into(),
            subset: if gt.is_empty() {
                SubsetTag::Rejection
            } else {
                SubsetTag::Attribute
            },
            category: "person".into(),
            expression: "the red person".into(),
            hints: (0..3)
                .map(|i| BoxHint::new(format!("person {}", i + 1), bx(20.0 * i as f64, 20.0 * i as f64 + 10.0)))
                .collect(),
            gt,
        }
    }

    #[test]
    fn f1_examples() {
        let (g1, g2) = (bx(0.0, 10.0), bx(20.0, 30.0));
        let r = f1_reward(&[g1, g2], &[g1, g2], 1e-6);
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));

        // |M| = 1, |B^| = 1, |B*| = 2 -> P = 1, R = 1/2, F1 = 2 * 1 * 0.5 / 1.5
        let r = f1_reward(&[g1], &[g1, g2], 1e-6);
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 0.5);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);

        let r = f1_reward(&[bx(50.0, 60.0)], &[], 1e-6);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));

        let r = f1_reward(&[], &[], 1e-6);
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));

        let r = f1_reward(&[bx(50.0, 60.0)], &[g1], 1e-6);
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn duplicates_depress_precision() {
        let g = bx(0.0, 10.0);
        let r = f1_reward(&[g, g], &[g], 1e-6);
        assert_eq!(r.precision, 0.5);
        assert_eq!(r.recall, 1.0);
    }

    #[test]
    fn format_examples() {
        let raw = serialize_response(&ThinkTrace::default(), &Answer::Rejection, None).unwrap();
        assert_eq!(format_reward(&raw), 1.0);
        assert_eq!(format_reward("<think>x</think><answer>[]"), 0.0);
        assert_eq!(format_reward("<answer>[]</answer><think>x</think>"), 0.0);
    }

    #[test]
    fn total_examples() {
        let cfg = RewardConfig::default();
        assert!((total_reward(1.0, 1.0, &cfg) - 1.0).abs() < 1e-12);
        assert!((total_reward(0.0, 1.0, &cfg) - 0.1).abs() < 1e-12);
        assert!((total_reward(0.5, 1.0, &cfg) - 0.55).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(RewardConfig::new(1.5, 1e-6).is_err());
        assert!(RewardConfig::new(0.5, -1.0).is_err());
        assert!(RewardConfig::new(0.0, 0.0).is_ok());
    }

    #[test]
    fn response_examples() {
        let cfg = RewardConfig::default();
        let t = task(vec![1, 3]);
        let answer = Answer::Boxes(vec![LabeledBox::from(&t.hints[0]), LabeledBox::from(&t.hints[2])]);
        let raw = serialize_response(&ThinkTrace::default(), &answer, Some(&t)).unwrap();
        assert_eq!(reward_response(&t, &raw, &cfg).total, 1.0);

        let rej = task(vec![]);
        let r = reward_response(&rej, "<think>nothing here</think><answer>[]</answer>", &cfg);
        assert_eq!((r.f1, r.fmt, r.total), (1.0, 1.0, 1.0));

        let r = reward_response(&t, "I think it's person 1", &cfg);
        assert_eq!((r.f1, r.fmt, r.total), (0.0, 0.0, 0.0));
    }

    #[test]
    fn answer_without_valid_tags_still_earns_accuracy() {
        let cfg = RewardConfig::default();
        let t = task(vec![1]);
        let raw = "<answer>[{\"person 1\": [0, 0, 10, 10]}]</answer>";
        let r = reward_response(&t, raw, &cfg);
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.fmt, 0.0);
        assert!((r.total - 0.9).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn total_is_monotone(lambda in 0.0..=1.0f64, f1a in 0.0..=1.0f64, f1b in 0.0..=1.0f64) {
            let cfg = RewardConfig { lambda, match_tol: 1e-6 };
            let (lo, hi) = if f1a <= f1b { (f1a, f1b) } else { (f1b, f1a) };
            prop_assert!(total_reward(lo, 1.0, &cfg) <= total_reward(hi, 1.0, &cfg));
            prop_assert!(total_reward(lo, 0.0, &cfg) <= total_reward(lo, 1.0, &cfg));
        }

        #[test]
        fn verbatim_hits_score_one_and_perturbations_lose_recall(
            gt in proptest::sample::subsequence(vec![1usize, 2, 3], 1..=3),
            which in 0usize..4,
            delta in prop_oneof![1e-5..1.0f64, -1.0..-1e-5f64],
        ) {
            let t = task(gt);
            let cfg = RewardConfig::default();
            let exact = t.gt_boxes();
            prop_assert_eq!(f1_reward(&exact, &exact, cfg.match_tol).f1, 1.0);

            let mut perturbed = exact.clone();
            let mut c = perturbed[0].to_array();
            c[which] += delta;
            if let Ok(b) = BBox::from_array(c) {
                perturbed[0] = b;
                prop_assert!(f1_reward(&perturbed, &exact, cfg.match_tol).recall < 1.0);
            }
        }

        #[test]
        fn prediction_order_is_irrelevant(
            preds in proptest::collection::vec(0usize..4, 0..6),
            gts in proptest::collection::vec(0usize..3, 0..4),
            seed in any::<u64>(),
        ) {
            let vocab = [bx(0.0, 10.0), bx(20.0, 30.0), bx(40.0, 50.0), bx(60.0, 70.0)];
            let p: Vec<BBox> = preds.iter().map(|&i| vocab[i]).collect();
            let g: Vec<BBox> = gts.iter().map(|&i| vocab[i]).collect();
            let mut shuffled = p.clone();
            // deterministic Fisher-Yates driven by the seed
            let mut s = seed;
            for i in (1..shuffled.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(f1_reward(&p, &g, 1e-6), f1_reward(&shuffled, &g, 1e-6));
        }
    }
}
