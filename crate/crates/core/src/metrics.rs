//! Evaluation metrics: SMAPE over Cobb triples, mean absolute error,
//! per-slot L1, per-class IoU/mIoU and Dice over segmentation masks, and the
//! report structure that serializes them.

use crate::geometry::{CobbTriple, SegMask, LABEL_BACKGROUND, LABEL_BONE, LABEL_GAP};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction and ground-truth lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("cannot evaluate an empty prediction list")]
    Empty,
    #[error("image {index} ({id}) has an all-zero angle sum; SMAPE is undefined for it")]
    DegenerateDenominator { index: usize, id: String },
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    MaskShapeMismatch((usize, usize), (usize, usize)),
}

fn check_lists(preds: &[CobbTriple], gts: &[CobbTriple]) -> Result<(), MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    if preds.len() != gts.len() {
        return Err(MetricsError::LengthMismatch(preds.len(), gts.len()));
    }
    Ok(())
}

/// Symmetric mean absolute percentage error over angle triples:
/// mean_i [ sum_k |X_ik - Y_ik| / sum_k (X_ik + Y_ik) ] * 100, the inner
/// sums running over the three angle slots of one image. An image whose
/// angles are all zero on both sides has an undefined ratio and is reported
/// as an error with its position; `ids`, when provided, names it.
pub fn smape_named(
    preds: &[CobbTriple],
    gts: &[CobbTriple],
    ids: Option<&[String]>,
) -> Result<f64, MetricsError> {
    check_lists(preds, gts)?;
    let mut total = 0.0;
    for (index, (p, g)) in preds.iter().zip(gts).enumerate() {
        let mut abs_diff = 0.0;
        let mut sum = 0.0;
        for (a, b) in p.slots().iter().zip(g.slots()) {
            abs_diff += (a - b).abs();
            sum += a + b;
        }
        if sum == 0.0 {
            let id = ids
                .and_then(|ids| ids.get(index).cloned())
                .unwrap_or_else(|| "unnamed".to_string());
            return Err(MetricsError::DegenerateDenominator { index, id });
        }
        total += abs_diff / sum;
    }
    Ok(total / preds.len() as f64 * 100.0)
}

pub fn smape(preds: &[CobbTriple], gts: &[CobbTriple]) -> Result<f64, MetricsError> {
    smape_named(preds, gts, None)
}

/// Mean absolute error in degrees over every slot of every image.
pub fn mae(preds: &[CobbTriple], gts: &[CobbTriple]) -> Result<f64, MetricsError> {
    check_lists(preds, gts)?;
    let total: f64 = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            p.slots()
                .iter()
                .zip(g.slots())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        })
        .sum();
    Ok(total / (3 * preds.len()) as f64)
}

/// Mean absolute error per angle slot (pt, mt, tl).
pub fn per_angle_l1(preds: &[CobbTriple], gts: &[CobbTriple]) -> Result<[f64; 3], MetricsError> {
    check_lists(preds, gts)?;
    let mut acc = [0.0f64; 3];
    for (p, g) in preds.iter().zip(gts) {
        for (slot, (a, b)) in acc.iter_mut().zip(p.slots().iter().zip(g.slots())) {
            *slot += (a - b).abs();
        }
    }
    let n = preds.len() as f64;
    Ok([acc[0] / n, acc[1] / n, acc[2] / n])
}

/// Per-class scores over the three mask classes; a class absent from both
/// masks has no defined score and is `None`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ClassScores {
    pub bg: Option<f64>,
    pub bone: Option<f64>,
    pub gap: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct IouReport {
    pub bg: Option<f64>,
    pub bone: Option<f64>,
    pub gap: Option<f64>,
    /// Mean over the classes present in at least one mask.
    pub miou: f64,
}

const CLASSES: [u8; 3] = [LABEL_BACKGROUND, LABEL_BONE, LABEL_GAP];

fn class_counts(pred: &SegMask, gt: &SegMask) -> Result<[(usize, usize, usize); 3], MetricsError> {
    if pred.shape() != gt.shape() {
        return Err(MetricsError::MaskShapeMismatch(
            (pred.shape().height, pred.shape().width),
            (gt.shape().height, gt.shape().width),
        ));
    }
    // (intersection, pred count, gt count) per class
    let mut counts = [(0usize, 0usize, 0usize); 3];
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        for (ci, &class) in CLASSES.iter().enumerate() {
            let in_p = p == class;
            let in_g = g == class;
            if in_p && in_g {
                counts[ci].0 += 1;
            }
            if in_p {
                counts[ci].1 += 1;
            }
            if in_g {
                counts[ci].2 += 1;
            }
        }
    }
    Ok(counts)
}

/// Intersection-over-union per class plus the mean over present classes.
pub fn iou(pred: &SegMask, gt: &SegMask) -> Result<IouReport, MetricsError> {
    let counts = class_counts(pred, gt)?;
    let mut scores = [None; 3];
    let mut sum = 0.0;
    let mut present = 0usize;
    for (ci, &(inter, np, ng)) in counts.iter().enumerate() {
        let union = np + ng - inter;
        if union > 0 {
            let score = inter as f64 / union as f64;
            scores[ci] = Some(score);
            sum += score;
            present += 1;
        }
    }
    let miou = if present > 0 {
        sum / present as f64
    } else {
        1.0
    };
    Ok(IouReport {
        bg: scores[0],
        bone: scores[1],
        gap: scores[2],
        miou,
    })
}

/// Dice coefficient 2|A n B| / (|A| + |B|) per class; classes empty in both
/// masks are excluded.
pub fn dice_score(pred: &SegMask, gt: &SegMask) -> Result<ClassScores, MetricsError> {
    let counts = class_counts(pred, gt)?;
    let mut scores = [None; 3];
    for (ci, &(inter, np, ng)) in counts.iter().enumerate() {
        if np + ng > 0 {
            scores[ci] = Some(2.0 * inter as f64 / (np + ng) as f64);
        }
    }
    Ok(ClassScores {
        bg: scores[0],
        bone: scores[1],
        gap: scores[2],
    })
}

/// Aggregate evaluation result. Fields are declared in alphabetical order so
/// the JSON form is canonical (sorted keys); angles are rounded to 4
/// decimals at serialization time.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EvalReport {
    pub angle_l1: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<ClassScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<IouReport>,
    pub mae: f64,
    pub n: usize,
    pub smape: f64,
}

fn round4(v: f64) -> f64 {
    (v * 10_000.0).round() / 10_000.0
}

impl EvalReport {
    pub fn from_triples(preds: &[CobbTriple], gts: &[CobbTriple]) -> Result<Self, MetricsError> {
        Ok(EvalReport {
            angle_l1: per_angle_l1(preds, gts)?,
            dice: None,
            iou: None,
            mae: mae(preds, gts)?,
            n: preds.len(),
            smape: smape(preds, gts)?,
        })
    }

    /// Extend the report with segmentation overlap scores for a mask pair.
    pub fn with_masks(mut self, pred: &SegMask, gt: &SegMask) -> Result<Self, MetricsError> {
        self.iou = Some(iou(pred, gt)?);
        self.dice = Some(dice_score(pred, gt)?);
        Ok(self)
    }

    /// Canonical JSON: sorted keys, 4-decimal fixed angles.
    pub fn to_json(&self) -> String {
        let rounded = EvalReport {
            angle_l1: [
                round4(self.angle_l1[0]),
                round4(self.angle_l1[1]),
                round4(self.angle_l1[2]),
            ],
            dice: self.dice.map(|d| ClassScores {
                bg: d.bg.map(round4),
                bone: d.bone.map(round4),
                gap: d.gap.map(round4),
            }),
            iou: self.iou.map(|i| IouReport {
                bg: i.bg.map(round4),
                bone: i.bone.map(round4),
                gap: i.gap.map(round4),
                miou: round4(i.miou),
            }),
            mae: round4(self.mae),
            n: self.n,
            smape: round4(self.smape),
        };
        serde_json::to_string(&rounded).expect("report serializes")
    }

    /// Human-readable two-column table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<12} {}\n", "n", self.n));
        out.push_str(&format!("{:<12} {:.4}\n", "smape", self.smape));
        out.push_str(&format!("{:<12} {:.4}\n", "mae", self.mae));
        out.push_str(&format!(
            "{:<12} {:.4} {:.4} {:.4}\n",
            "angle_l1", self.angle_l1[0], self.angle_l1[1], self.angle_l1[2]
        ));
        if let Some(iou) = &self.iou {
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            out.push_str(&format!(
                "{:<12} bg {} bone {} gap {} miou {:.4}\n",
                "iou",
                fmt(iou.bg),
                fmt(iou.bone),
                fmt(iou.gap),
                iou.miou
            ));
        }
        if let Some(dice) = &self.dice {
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            out.push_str(&format!(
                "{:<12} bg {} bone {} gap {}\n",
                "dice",
                fmt(dice.bg),
                fmt(dice.bone),
                fmt(dice.gap)
            ));
        }
        out
    }
}
