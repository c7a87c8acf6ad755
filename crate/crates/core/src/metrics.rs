//! Measurements over masks and masked models: overlap metrics, per-layer
//! sharing breakdowns, the all-groups accuracy rule, behavior
//! classification, and confusion-matrix deltas.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::ArithOp;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

/// kept/intersection/union counts and the derived ratios for one scope
/// (a layer, or the whole mask pair).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OverlapStats {
    pub kept_a: usize,
    pub kept_b: usize,
    pub intersection: usize,
    pub union: usize,
    pub total: usize,
    pub iou: f64,
    pub iomin: f64,
    /// The per-layer "shared fraction" plotted in reports; defined as IoU
    /// (intersection / union). Raw counts are retained so other readings
    /// (e.g. intersection / min) can be recomputed.
    pub shared_fraction: f64,
}

impl OverlapStats {
    fn from_counts(kept_a: usize, kept_b: usize, intersection: usize, total: usize) -> Self {
        let union = kept_a + kept_b - intersection;
        // Empty-mask convention: 0/0 counts as zero overlap.
        let iou = if union == 0 { 0.0 } else { intersection as f64 / union as f64 };
        let iomin = if kept_a.min(kept_b) == 0 {
            0.0
        } else {
            intersection as f64 / kept_a.min(kept_b) as f64
        };
        OverlapStats {
            kept_a,
            kept_b,
            intersection,
            union,
            total,
            iou,
            iomin,
            shared_fraction: iou,
        }
    }
}

/// Per-layer and total overlap between two aligned masks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SharingReport {
    pub name: String,
    pub per_layer: BTreeMap<usize, OverlapStats>,
    pub totals: OverlapStats,
}

fn check_aligned(m1: &BinaryMask, m2: &BinaryMask) -> Result<()> {
    let a: Vec<(&str, usize)> = m1.entries().map(|(n, _, b)| (n, b.len())).collect();
    let b: Vec<(&str, usize)> = m2.entries().map(|(n, _, b)| (n, b.len())).collect();
    if a != b {
        return Err(Error::Mask(format!(
            "masks are not aligned: {:?} vs {:?}",
            a.iter().map(|(n, _)| n).collect::<Vec<_>>(),
            b.iter().map(|(n, _)| n).collect::<Vec<_>>()
        )));
    }
    Ok(())
}

/// Intersection over union of two aligned masks; 0 when either is empty.
pub fn iou(m1: &BinaryMask, m2: &BinaryMask) -> Result<f64> {
    Ok(per_layer_sharing(m1, m2, "iou")?.totals.iou)
}

/// Intersection over the smaller mask; 1 when one kept-set contains the
/// other, 0 when either is empty.
pub fn iomin(m1: &BinaryMask, m2: &BinaryMask) -> Result<f64> {
    Ok(per_layer_sharing(m1, m2, "iomin")?.totals.iomin)
}

pub fn per_layer_sharing(m1: &BinaryMask, m2: &BinaryMask, name: &str) -> Result<SharingReport> {
    check_aligned(m1, m2)?;
    let mut per_layer: BTreeMap<usize, (usize, usize, usize, usize)> = BTreeMap::new();
    for ((_, layer, b1), (_, _, b2)) in m1.entries().zip(m2.entries()) {
        let slot = per_layer.entry(layer).or_insert((0, 0, 0, 0));
        for (&x, &y) in b1.iter().zip(b2) {
            slot.0 += x as usize;
            slot.1 += y as usize;
            slot.2 += (x && y) as usize;
            slot.3 += 1;
        }
    }
    let mut totals = (0, 0, 0, 0);
    let per_layer: BTreeMap<usize, OverlapStats> = per_layer
        .into_iter()
        .map(|(layer, (ka, kb, i, t))| {
            totals.0 += ka;
            totals.1 += kb;
            totals.2 += i;
            totals.3 += t;
            (layer, OverlapStats::from_counts(ka, kb, i, t))
        })
        .collect();
    Ok(SharingReport {
        name: name.to_string(),
        per_layer,
        totals: OverlapStats::from_counts(totals.0, totals.1, totals.2, totals.3),
    })
}

/// Fraction of `current`'s kept weights that already appear in `reference`
/// (per layer and overall). This is the "shared with previous tasks"
/// measure used by the transfer pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapWithReference {
    pub per_layer: BTreeMap<usize, f64>,
    pub per_layer_kept: BTreeMap<usize, usize>,
    pub total: f64,
}

pub fn overlap_with_reference(
    current: &BinaryMask,
    reference: &BinaryMask,
) -> Result<OverlapWithReference> {
    check_aligned(current, reference)?;
    let mut per_layer: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for ((_, layer, cur), (_, _, reference)) in current.entries().zip(reference.entries()) {
        let slot = per_layer.entry(layer).or_insert((0, 0));
        for (&c, &r) in cur.iter().zip(reference) {
            slot.0 += (c && r) as usize;
            slot.1 += c as usize;
        }
    }
    let mut shared_total = 0;
    let mut kept_total = 0;
    let mut per_layer_frac = BTreeMap::new();
    let mut per_layer_kept = BTreeMap::new();
    for (layer, (shared, kept)) in per_layer {
        shared_total += shared;
        kept_total += kept;
        per_layer_frac.insert(layer, if kept == 0 { 0.0 } else { shared as f64 / kept as f64 });
        per_layer_kept.insert(layer, kept);
    }
    Ok(OverlapWithReference {
        per_layer: per_layer_frac,
        per_layer_kept,
        total: if kept_total == 0 {
            0.0
        } else {
            shared_total as f64 / kept_total as f64
        },
    })
}

/// Union of kept positions of two aligned masks.
pub fn union_mask(m1: &BinaryMask, m2: &BinaryMask, stage: &str) -> Result<BinaryMask> {
    check_aligned(m1, m2)?;
    let entries = m1
        .entries()
        .zip(m2.entries())
        .map(|((n, layer, b1), (_, _, b2))| {
            (n.to_string(), layer, b1.iter().zip(b2).map(|(&x, &y)| x || y).collect())
        })
        .collect();
    Ok(BinaryMask::new(entries, stage))
}

// ---- predictions and accuracy ----

/// Argmax class per output group. `groups[g]` gives `(start, len)` of the
/// group's columns in the logits.
pub fn argmax_groups<E: Element>(logits: &Tensor<E>, groups: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let (rows, cols) = logits.dims2().expect("logits are rank 2");
    groups
        .iter()
        .map(|&(start, len)| {
            debug_assert!(start + len <= cols);
            (0..rows)
                .map(|r| {
                    let row = &logits.data()[r * cols + start..r * cols + start + len];
                    let mut best = 0;
                    for (i, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = i;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect()
}

/// A prediction counts as correct only when every active output group
/// matches its target.
pub fn all_groups_accuracy(
    predictions: &[Vec<usize>],
    targets: &[Vec<usize>],
    active_groups: &[usize],
) -> f64 {
    let n = predictions.first().map_or(0, |g| g.len());
    if n == 0 {
        return 0.0;
    }
    let mut correct = 0;
    for i in 0..n {
        if active_groups.iter().all(|&g| predictions[g][i] == targets[g][i]) {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

/// Which arithmetic function a prediction actually performed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Behavior {
    Add,
    Mul,
    None,
}

/// Classifies a decoded prediction in [0, 100). When `(a+b) % 100` equals
/// `(a*b) % 100` the label follows the commanded operation (the tie is
/// rare and flagged by callers via [`behavior_tie`]).
pub fn classify_behavior(a: usize, b: usize, commanded: ArithOp, prediction: usize) -> Behavior {
    let add = (a + b) % 100;
    let mul = (a * b) % 100;
    match (prediction == add, prediction == mul) {
        (true, true) => match commanded {
            ArithOp::Add => Behavior::Add,
            ArithOp::Mul => Behavior::Mul,
        },
        (true, false) => Behavior::Add,
        (false, true) => Behavior::Mul,
        (false, false) => Behavior::None,
    }
}

/// True when addition and multiplication coincide for these operands.
pub fn behavior_tie(a: usize, b: usize) -> bool {
    (a + b) % 100 == (a * b) % 100
}

// ---- confusion matrices ----

/// Row-normalized confusion matrix (`rows[i][j]` = fraction of class-`i`
/// samples predicted as `j`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub rows: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(labels: &[usize], predictions: &[usize], classes: usize) -> Result<Self> {
        let mut counts = vec![vec![0usize; classes]; classes];
        for (&l, &p) in labels.iter().zip(predictions) {
            counts[l][p] += 1;
        }
        let mut rows = Vec::with_capacity(classes);
        for (c, row) in counts.iter().enumerate() {
            let n: usize = row.iter().sum();
            if n == 0 {
                return Err(Error::Data(format!(
                    "class {c} has no samples in the evaluation set"
                )));
            }
            rows.push(row.iter().map(|&x| x as f64 / n as f64).collect());
        }
        Ok(ConfusionMatrix { classes, rows })
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.classes).map(|i| self.rows[i][i]).collect()
    }
}

/// treated - baseline, with the class whose data was withheld.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfusionDelta {
    pub removed_class: usize,
    pub baseline: ConfusionMatrix,
    pub treated: ConfusionMatrix,
    pub delta: Vec<Vec<f64>>,
}

impl ConfusionDelta {
    pub fn new(
        baseline: ConfusionMatrix,
        treated: ConfusionMatrix,
        removed_class: usize,
    ) -> Result<Self> {
        if baseline.classes != treated.classes {
            return Err(Error::Data("confusion matrices of different sizes".into()));
        }
        let delta = baseline
            .rows
            .iter()
            .zip(&treated.rows)
            .map(|(b, t)| t.iter().zip(b).map(|(&tv, &bv)| tv - bv).collect())
            .collect();
        Ok(ConfusionDelta {
            removed_class,
            baseline,
            treated,
            delta,
            })
    }

    /// Index (row, col) and value of the most negative delta entry.
    pub fn most_negative_entry(&self) -> (usize, usize, f64) {
        let mut best = (0, 0, f64::INFINITY);
        for (i, row) in self.delta.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v < best.2 {
                    best = (i, j, v);
                }
            }
        }
        best
    }
}

// ---- half-mask and hybrid masks ----

/// Layer index `split` such that layers `< split` ("early") hold a fraction
/// of maskable parameters as close to one half as the layer boundaries
/// allow. Returns `(split, early_fraction)`.
pub fn choose_half_split(mask: &BinaryMask) -> (usize, f64) {
    let census = mask.layer_census();
    let mut layers: Vec<usize> = census.keys().copied().collect();
    layers.sort_unstable();
    let total: usize = census.values().map(|&(_, t)| t).sum();
    let mut best = (layers[0], f64::INFINITY, 0.0);
    let mut early = 0usize;
    for (idx, &layer) in layers.iter().enumerate() {
        early += census[&layer].1;
        if idx + 1 == layers.len() {
            break; // a split after the last layer leaves nothing late
        }
        let frac = early as f64 / total as f64;
        let dist = (frac - 0.5).abs();
        if dist < best.1 {
            best = (layers[idx + 1], dist, frac);
        }
    }
    (best.0, best.2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HalfSide {
    /// Mask layers before the split; later layers run unmasked.
    MaskEarly,
    /// Mask the split layer and everything after; earlier layers unmasked.
    MaskLate,
}

/// Mask applied to one side of the network only: the chosen side keeps the
/// stage mask's bits, the other side is all ones (unmasked).
pub fn half_mask(stage: &BinaryMask, split_layer: usize, side: HalfSide) -> BinaryMask {
    let entries = stage
        .entries()
        .map(|(name, layer, bits)| {
            let masked_side = match side {
                HalfSide::MaskEarly => layer < split_layer,
                HalfSide::MaskLate => layer >= split_layer,
            };
            let bits = if masked_side {
                bits.to_vec()
            } else {
                vec![true; bits.len()]
            };
            (name.to_string(), layer, bits)
        })
        .collect();
    BinaryMask::new(
        entries,
        format!(
            "{}-{}",
            stage.stage,
            match side {
                HalfSide::MaskEarly => "mask-early",
                HalfSide::MaskLate => "mask-late",
            }
        ),
    )
}

/// Inverted bits on hidden layers, the full-task mask's bits on the first
/// and last layers.
pub fn hybrid_mask(stage: &BinaryMask, full: &BinaryMask) -> Result<BinaryMask> {
    check_aligned(stage, full)?;
    let layers: Vec<usize> = {
        let mut l: Vec<usize> = stage.entries().map(|(_, layer, _)| layer).collect();
        l.sort_unstable();
        l.dedup();
        l
    };
    let (first, last) = (*layers.first().unwrap(), *layers.last().unwrap());
    let entries = stage
        .entries()
        .zip(full.entries())
        .map(|((name, layer, bits), (_, _, full_bits))| {
            let out = if layer == first || layer == last {
                full_bits.to_vec()
            } else {
                bits.iter().map(|&b| !b).collect()
            };
            (name.to_string(), layer, out)
        })
        .collect();
    Ok(BinaryMask::new(entries, format!("hybrid-not-{}", stage.stage)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_of(stage: &str, layers: &[(usize, Vec<bool>)]) -> BinaryMask {
        BinaryMask::new(
            layers
                .iter()
                .enumerate()
                .map(|(i, (layer, bits))| (format!("p{i}"), *layer, bits.clone()))
                .collect(),
            stage,
        )
    }

    #[test]
    fn disjoint_identical_and_subset_cases() {
        let a = mask_of("a", &[(0, vec![true, true, false, false])]);
        let b = mask_of("b", &[(0, vec![false, false, true, true])]);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        assert_eq!(iomin(&a, &b).unwrap(), 0.0);

        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iomin(&a, &a).unwrap(), 1.0);

        // |M1| = 2 subset of |M2| = 4: IoMin = 1, IoU = 0.5
        let m1 = mask_of("m1", &[(0, vec![true, true, false, false])]);
        let m2 = mask_of("m2", &[(0, vec![true, true, true, true])]);
        assert_eq!(iou(&m1, &m2).unwrap(), 0.5);
        assert_eq!(iomin(&m1, &m2).unwrap(), 1.0);
    }

    #[test]
    fn empty_masks_use_zero_convention() {
        let empty = mask_of("e", &[(0, vec![false, false])]);
        let other = mask_of("o", &[(0, vec![true, false])]);
        assert_eq!(iou(&empty, &other).unwrap(), 0.0);
        assert_eq!(iomin(&empty, &other).unwrap(), 0.0);
        assert_eq!(iou(&empty, &empty).unwrap(), 0.0);
    }

    #[test]
    fn misaligned_masks_error() {
        let a = mask_of("a", &[(0, vec![true, true])]);
        let b = mask_of("b", &[(0, vec![true, true, true])]);
        assert!(iou(&a, &b).is_err());
    }

    #[test]
    fn per_layer_report_and_identity() {
        let a = mask_of("a", &[(0, vec![true, true]), (1, vec![true, false])]);
        let rep = per_layer_sharing(&a, &a, "self").unwrap();
        assert_eq!(rep.per_layer[&0].shared_fraction, 1.0);
        assert_eq!(rep.per_layer[&1].shared_fraction, 1.0);
        assert_eq!(rep.totals.kept_a, 3);
        assert_eq!(rep.totals.total, 4);
    }

    #[test]
    fn overlap_with_reference_counts_current_side() {
        let current = mask_of("c", &[(0, vec![true, true, false, false])]);
        let reference = mask_of("r", &[(0, vec![true, false, true, false])]);
        let o = overlap_with_reference(&current, &reference).unwrap();
        assert_eq!(o.total, 0.5); // one of current's two kept bits is in the reference
        assert_eq!(o.per_layer[&0], 0.5);
    }

    #[test]
    fn union_covers_both() {
        let a = mask_of("a", &[(0, vec![true, false, false])]);
        let b = mask_of("b", &[(0, vec![false, true, false])]);
        let u = union_mask(&a, &b, "u").unwrap();
        assert_eq!(u.bits("p0").unwrap(), &[true, true, false]);
    }

    #[test]
    fn accuracy_requires_every_group() {
        let predictions = vec![vec![3, 1], vec![2, 9]];
        let targets = vec![vec![3, 5], vec![2, 9]];
        // sample 0 correct in both groups; sample 1 wrong in group 0
        assert_eq!(all_groups_accuracy(&predictions, &targets, &[0, 1]), 0.5);
        // only group-1 active: both correct
        assert_eq!(all_groups_accuracy(&predictions, &targets, &[1]), 1.0);
    }

    #[test]
    fn argmax_groups_decodes_blocks() {
        let logits = Tensor::new(vec![1, 4], vec![0.1f64, 0.9, 0.3, 0.2]).unwrap();
        let groups = argmax_groups(&logits, &[(0, 2), (2, 2)]);
        assert_eq!(groups, vec![vec![1], vec![0]]);
    }

    #[test]
    fn behavior_classification_cases() {
        assert_eq!(classify_behavior(3, 4, ArithOp::Add, 12), Behavior::Mul);
        assert_eq!(classify_behavior(3, 4, ArithOp::Add, 7), Behavior::Add);
        assert_eq!(classify_behavior(3, 4, ArithOp::Add, 9), Behavior::None);
        // tie: 2 + 2 == 2 * 2 -> commanded op wins
        assert!(behavior_tie(2, 2));
        assert_eq!(classify_behavior(2, 2, ArithOp::Mul, 4), Behavior::Mul);
        assert_eq!(classify_behavior(2, 2, ArithOp::Add, 4), Behavior::Add);
    }

    #[test]
    fn confusion_rows_are_stochastic_and_delta_rows_sum_to_zero() {
        let labels = vec![0, 0, 1, 1, 2, 2];
        let base = ConfusionMatrix::from_predictions(&labels, &[0, 0, 1, 1, 2, 2], 3).unwrap();
        let treated = ConfusionMatrix::from_predictions(&labels, &[0, 1, 1, 1, 0, 2], 3).unwrap();
        for rows in [&base.rows, &treated.rows] {
            for row in rows {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let delta = ConfusionDelta::new(base.clone(), treated, 0).unwrap();
        for row in &delta.delta {
            assert!(row.iter().sum::<f64>().abs() < 1e-9);
        }
        let identity = ConfusionDelta::new(base.clone(), base, 0).unwrap();
        assert!(identity.delta.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn confusion_rejects_missing_class() {
        let labels = vec![0, 0, 1];
        assert!(ConfusionMatrix::from_predictions(&labels, &[0, 0, 1], 3).is_err());
    }

    #[test]
    fn half_split_picks_most_balanced_boundary() {
        let m = mask_of(
            "m",
            &[
                (0, vec![true; 10]),
                (1, vec![true; 60]),
                (2, vec![true; 20]),
                (3, vec![true; 10]),
            ],
        );
        let (split, frac) = choose_half_split(&m);
        // early = layers {0,1} with 70% is the closest boundary to 50%
        assert_eq!(split, 2);
        assert!((frac - 0.7).abs() < 1e-9);
    }

    #[test]
    fn half_mask_leaves_other_side_unmasked() {
        let stage = mask_of("s", &[(0, vec![false, false]), (1, vec![false, false])]);
        let early = half_mask(&stage, 1, HalfSide::MaskEarly);
        assert_eq!(early.bits("p0").unwrap(), &[false, false]);
        assert_eq!(early.bits("p1").unwrap(), &[true, true]);
        let late = half_mask(&stage, 1, HalfSide::MaskLate);
        assert_eq!(late.bits("p0").unwrap(), &[true, true]);
        assert_eq!(late.bits("p1").unwrap(), &[false, false]);
    }

    #[test]
    fn hybrid_mask_inverts_hidden_only() {
        let stage = mask_of(
            "s",
            &[(0, vec![true, false]), (1, vec![true, false]), (2, vec![true, false])],
        );
        let full = mask_of(
            "f",
            &[(0, vec![true, true]), (1, vec![true, true]), (2, vec![true, true])],
        );
        let h = hybrid_mask(&stage, &full).unwrap();
        assert_eq!(h.bits("p0").unwrap(), &[true, true]); // first layer from full
        assert_eq!(h.bits("p1").unwrap(), &[false, true]); // hidden inverted
        assert_eq!(h.bits("p2").unwrap(), &[true, true]); // last layer from full
    }

    #[test]
    fn random_mask_property_sweep() {
        use crate::rng::{SeedPool, StreamKind};
        let pool = SeedPool::new(99);
        let mut rng = pool.stream(StreamKind::MaskSample, 7);
        for _ in 0..500 {
            let n = 1 + rng.below(40);
            let a = mask_of("a", &[(0, (0..n).map(|_| rng.below(2) == 1).collect())]);
            let b = mask_of("b", &[(0, (0..n).map(|_| rng.below(2) == 1).collect())]);
            let (i_ab, m_ab) = (iou(&a, &b).unwrap(), iomin(&a, &b).unwrap());
            let (i_ba, m_ba) = (iou(&b, &a).unwrap(), iomin(&b, &a).unwrap());
            assert_eq!(i_ab, i_ba);
            assert_eq!(m_ab, m_ba);
            assert!((0.0..=1.0).contains(&i_ab));
            assert!(i_ab <= m_ab + 1e-12);
            // census: kept(M) + kept(!M) == total
            assert_eq!(a.kept() + a.invert().kept(), a.total());
            // IoU meets IoMin exactly when the kept sets are identical or disjoint
            let identical = a
                .entries()
                .zip(b.entries())
                .all(|((_, _, x), (_, _, y))| x == y);
            let disjoint = m_ab == 0.0;
            if identical && a.kept() > 0 {
                assert_eq!((i_ab, m_ab), (1.0, 1.0));
            } else if !disjoint && !identical {
                assert!(i_ab < m_ab || (a.kept() == 0 || b.kept() == 0));
            }
        }
    }
}
