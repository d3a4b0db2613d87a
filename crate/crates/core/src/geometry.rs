//! Axis-aligned boxes and the matching primitives shared by the reward model
//! and the evaluator.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Default coordinate tolerance for exact matching.
pub const DEFAULT_MATCH_TOL: f64 = 1e-6;

/// Axis-aligned rectangle in pixel coordinates, origin top-left.
///
/// Always finite with strictly positive width and height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let reason = if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            Some("coordinates must be finite")
        } else if x1 <= x0 || y1 <= y0 {
            Some("box must have positive width and height")
        } else {
            None
        };
        match reason {
            Some(reason) => Err(Error::InvalidBox { x0, y0, x1, y1, reason }),
            None => Ok(Self { x0, y0, x1, y1 }),
        }
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn y0(&self) -> f64 {
        self.y0
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center_x(&self) -> f64 {
        0.5 * (self.x0 + self.x1)
    }

    /// Shift the box by `(dx, dy)`.
    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let c = <[f64; 4]>::deserialize(deserializer)?;
        BBox::from_array(c).map_err(serde::de::Error::custom)
    }
}

/// Intersection over union. Zero for disjoint or edge-touching boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Coordinate-wise equality within `tol`.
pub fn exact_match(a: &BBox, b: &BBox, tol: f64) -> bool {
    a.to_array()
        .iter()
        .zip(b.to_array().iter())
        .all(|(p, q)| (p - q).abs() <= tol)
}

/// One-to-one assignment between predictions and ground truths.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Matching {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

impl Matching {
    fn from_pairs(pairs: Vec<(usize, usize)>, n_preds: usize, n_gts: usize) -> Self {
        let mut pred_used = vec![false; n_preds];
        let mut gt_used = vec![false; n_gts];
        for &(p, g) in &pairs {
            pred_used[p] = true;
            gt_used[g] = true;
        }
        let free = |used: Vec<bool>| {
            used.into_iter()
                .enumerate()
                .filter_map(|(i, u)| (!u).then_some(i))
                .collect()
        };
        Self {
            pairs,
            unmatched_preds: free(pred_used),
            unmatched_gts: free(gt_used),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Greedy descending-IoU matching.
///
/// Every pair with IoU >= `threshold` is a candidate; candidates are visited
/// by descending IoU (ties: lower prediction index, then lower ground-truth
/// index) and accepted when both endpoints are still free.
pub fn greedy_match(preds: &[BBox], gts: &[BBox], threshold: f64) -> Matching {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (p, pb) in preds.iter().enumerate() {
        for (g, gb) in gts.iter().enumerate() {
            let v = iou(pb, gb);
            if v >= threshold {
                candidates.push((v, p, g));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for (_, p, g) in candidates {
        if !pred_used[p] && !gt_used[g] {
            pred_used[p] = true;
            gt_used[g] = true;
            pairs.push((p, g));
        }
    }
    Matching::from_pairs(pairs, preds.len(), gts.len())
}

/// Exact-match assignment: each prediction, in index order, takes the first
/// free ground truth it matches within `tol`.
pub fn exact_match_set(preds: &[BBox], gts: &[BBox], tol: f64) -> Matching {
    let mut gt_used = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for (p, pb) in preds.iter().enumerate() {
        if let Some(g) = (0..gts.len()).find(|&g| !gt_used[g] && exact_match(pb, &gts[g], tol)) {
            gt_used[g] = true;
            pairs.push((p, g));
        }
    }
    Matching::from_pairs(pairs, preds.len(), gts.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn rejects_degenerate_and_non_finite() {
        assert!(BBox::new(0.0, 0.0, 0.0, 10.0).is_err());
        assert!(BBox::new(0.0, 5.0, 10.0, 1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 1.0).is_err());
        assert!(serde_json::from_str::<BBox>("[0, 0, 0, 1]").is_err());
        assert_eq!(
            serde_json::from_str::<BBox>("[0, 0, 2, 1]").unwrap(),
            b(0.0, 0.0, 2.0, 1.0)
        );
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(10.0, 10.0, 20.0, 20.0)), 0.0);
        // intersection 5x10 = 50, union 100 + 100 - 50 = 150
        let expected = 50.0 / 150.0;
        assert!((iou(&a, &b(5.0, 0.0, 15.0, 10.0)) - expected).abs() < 1e-15);
    }

    #[test]
    fn exact_match_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert!(exact_match(&a, &a, 0.0));
        assert!(!exact_match(&a, &b(0.0, 0.0, 10.0, 11.0), 1e-6));
        // |10 + 5e-7 - 10| = 5e-7 <= 1e-6
        assert!(exact_match(&a, &b(0.0, 0.0, 10.0, 10.0 + 5e-7), 1e-6));
    }

    #[test]
    fn greedy_match_examples() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let m = greedy_match(&[], &[g], 0.5);
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_gts, vec![0]);

        let m = greedy_match(&[g], &[g], 0.5);
        assert_eq!(m.pairs, vec![(0, 0)]);
    }

    #[test]
    fn greedy_prefers_highest_iou_pair() {
        let g0 = b(0.0, 0.0, 10.0, 10.0);
        let g1 = b(0.0, 0.0, 10.0, 15.0);
        let p0 = b(0.0, 0.0, 10.0, 9.0); // 0.9 to g0, 0.6 to g1
        let p1 = b(0.0, 0.0, 10.0, 8.0); // 0.8 to g0, 80/150 to g1
        assert!((iou(&p0, &g0) - 0.9).abs() < 1e-12);
        assert!((iou(&p0, &g1) - 0.6).abs() < 1e-12);
        assert!((iou(&p1, &g0) - 0.8).abs() < 1e-12);

        let m = greedy_match(&[p0, p1], &[g0, g1], 0.5);
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m, brute_force_greedy(&[p0, p1], &[g0, g1], 0.5));

        // Raising the threshold above 80/150 leaves p1 without a partner.
        let m = greedy_match(&[p0, p1], &[g0, g1], 0.55);
        assert_eq!(m.pairs, vec![(0, 0)]);
        assert_eq!(m.unmatched_preds, vec![1]);
        assert_eq!(m, brute_force_greedy(&[p0, p1], &[g0, g1], 0.55));
    }

    #[test]
    fn exact_match_set_examples() {
        let b1 = b(0.0, 0.0, 10.0, 10.0);
        let b2 = b(20.0, 0.0, 30.0, 10.0);
        let b3 = b(40.0, 0.0, 50.0, 10.0);
        assert_eq!(exact_match_set(&[b1, b2], &[b1, b2], 1e-6).len(), 2);

        let m = exact_match_set(&[b1, b1], &[b1], 1e-6);
        assert_eq!(m.pairs, vec![(0, 0)]);
        assert_eq!(m.unmatched_preds, vec![1]);
        assert_eq!(brute_force_max_exact(&[b1, b1], &[b1], 1e-6), 1);

        assert!(exact_match_set(&[b3], &[b1], 1e-6).is_empty());
    }

    /// Enumerates every one-to-one matching over admissible pairs and keeps
    /// the one whose pairs, ordered by (IoU desc, pred, gt), are
    /// lexicographically best (a longer list wins over its own prefix).
    fn brute_force_greedy(preds: &[BBox], gts: &[BBox], threshold: f64) -> Matching {
        fn rec(
            p: usize,
            preds: &[BBox],
            gts: &[BBox],
            threshold: f64,
            used: &mut Vec<bool>,
            cur: &mut Vec<(usize, usize)>,
            all: &mut Vec<Vec<(usize, usize)>>,
        ) {
            if p == preds.len() {
                all.push(cur.clone());
                return;
            }
            rec(p + 1, preds, gts, threshold, used, cur, all);
            for g in 0..gts.len() {
                if !used[g] && iou(&preds[p], &gts[g]) >= threshold {
                    used[g] = true;
                    cur.push((p, g));
                    rec(p + 1, preds, gts, threshold, used, cur, all);
                    cur.pop();
                    used[g] = false;
                }
            }
        }
        let mut all = Vec::new();
        rec(
            0,
            preds,
            gts,
            threshold,
            &mut vec![false; gts.len()],
            &mut Vec::new(),
            &mut all,
        );

        let key = |m: &Vec<(usize, usize)>| {
            let mut k: Vec<(f64, usize, usize)> = m.iter().map(|&(p, g)| (iou(&preds[p], &gts[g]), p, g)).collect();
            k.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            k
        };
        let better = |a: &[(f64, usize, usize)], b: &[(f64, usize, usize)]| -> bool {
            for (x, y) in a.iter().zip(b) {
                let ord = y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2));
                if ord != std::cmp::Ordering::Equal {
                    return ord == std::cmp::Ordering::Less;
                }
            }
            a.len() > b.len()
        };
        let mut best = all[0].clone();
        for m in &all[1..] {
            if better(&key(m), &key(&best)) {
                best = m.clone();
            }
        }
        let best_sorted: Vec<(usize, usize)> = key(&best).into_iter().map(|(_, p, g)| (p, g)).collect();
        Matching::from_pairs(best_sorted, preds.len(), gts.len())
    }

    fn brute_force_max_exact(preds: &[BBox], gts: &[BBox], tol: f64) -> usize {
        fn rec(p: usize, preds: &[BBox], gts: &[BBox], tol: f64, used: &mut Vec<bool>) -> usize {
            if p == preds.len() {
                return 0;
            }
            let mut best = rec(p + 1, preds, gts, tol, used);
            for g in 0..gts.len() {
                if !used[g] && exact_match(&preds[p], &gts[g], tol) {
                    used[g] = true;
                    best = best.max(1 + rec(p + 1, preds, gts, tol, used));
                    used[g] = false;
                }
            }
            best
        }
        rec(0, preds, gts, tol, &mut vec![false; gts.len()])
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.5..60.0f64, 0.5..60.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    // Small integer grid so ties and exact overlaps actually happen.
    fn arb_grid_box() -> impl Strategy<Value = BBox> {
        (0u8..4, 0u8..4, 1u8..4, 1u8..4).prop_map(|(x, y, w, h)| {
            let (x, y) = (f64::from(x), f64::from(y));
            BBox::new(x, y, x + f64::from(w), y + f64::from(h)).unwrap()
        })
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert_eq!(v, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn iou_is_translation_invariant(a in arb_box(), c in arb_box(), dx in -500.0..500.0f64, dy in -500.0..500.0f64) {
            let moved = iou(&a.translate(dx, dy).unwrap(), &c.translate(dx, dy).unwrap());
            prop_assert!((moved - iou(&a, &c)).abs() <= 1e-12);
        }

        #[test]
        fn greedy_agrees_with_exhaustive_oracle(
            preds in proptest::collection::vec(arb_grid_box(), 0..=3),
            gts in proptest::collection::vec(arb_grid_box(), 0..=3),
            threshold in prop_oneof![Just(0.5), Just(0.25), Just(0.75), Just(1.0), 0.05..1.0f64],
        ) {
            let m = greedy_match(&preds, &gts, threshold);
            prop_assert!(m.len() <= preds.len().min(gts.len()));
            prop_assert_eq!(m, brute_force_greedy(&preds, &gts, threshold));
        }

        #[test]
        fn matchings_are_one_to_one(
            preds in proptest::collection::vec(arb_grid_box(), 0..=5),
            gts in proptest::collection::vec(arb_grid_box(), 0..=5),
        ) {
            for m in [greedy_match(&preds, &gts, 0.3), exact_match_set(&preds, &gts, 1e-6)] {
                let mut seen_p: Vec<usize> = m.pairs.iter().map(|x| x.0).chain(m.unmatched_preds.iter().copied()).collect();
                let mut seen_g: Vec<usize> = m.pairs.iter().map(|x| x.1).chain(m.unmatched_gts.iter().copied()).collect();
                seen_p.sort_unstable();
                seen_g.sort_unstable();
                prop_assert_eq!(seen_p, (0..preds.len()).collect::<Vec<_>>());
                prop_assert_eq!(seen_g, (0..gts.len()).collect::<Vec<_>>());
            }
        }

        #[test]
        fn exact_pairs_have_unit_iou(
            preds in proptest::collection::vec(arb_grid_box(), 0..=5),
            gts in proptest::collection::vec(arb_grid_box(), 0..=5),
        ) {
            let m = exact_match_set(&preds, &gts, 1e-6);
            for (p, g) in &m.pairs {
                prop_assert!((iou(&preds[*p], &gts[*g]) - 1.0).abs() < 1e-9);
            }
            prop_assert_eq!(m.len(), brute_force_max_exact(&preds, &gts, 1e-6));
        }
    }
}
