//! Segmentation evaluation: pixel confusion counts, the derived metric
//! report, and the per-instance IoU protocol over dilated bounding boxes.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel tallies of a binary prediction against a binary ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub true_neg: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.true_neg += other.true_neg;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
    }
}

/// Validate a `{0, 1}` integer mask into a boolean mask.
pub fn binary_mask_from_u8(a: &Array2<u8>) -> Result<Array2<bool>> {
    if let Some(bad) = a.iter().find(|&&v| v > 1) {
        return Err(Error::Argument(format!(
            "mask is not binary: found value {bad}"
        )));
    }
    Ok(a.mapv(|v| v == 1))
}

pub fn confusion_counts(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<ConfusionCounts> {
    if pred.dim() != gt.dim() {
        return Err(Error::Argument(format!(
            "prediction {:?} and ground truth {:?} shapes disagree",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p, g) {
            (true, true) => c.true_pos += 1,
            (false, false) => c.true_neg += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
        }
    }
    Ok(c)
}

/// The seven derived metrics. Degenerate denominators yield 0 and the metric
/// name is listed in `degenerate` instead of producing a NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub dice: f64,
    pub mean_dice: f64,
    pub iou: f64,
    pub f1: f64,
    pub degenerate: Vec<String>,
}

pub fn metrics_report(c: &ConfusionCounts) -> Result<MetricsReport> {
    if c.total() == 0 {
        return Err(Error::Argument("empty confusion counts".into()));
    }
    let tp = c.true_pos as f64;
    let tn = c.true_neg as f64;
    let fp = c.false_pos as f64;
    let fnn = c.false_neg as f64;

    let mut degenerate = Vec::new();
    let mut ratio = |name: &str, num: f64, den: f64| -> f64 {
        if den == 0.0 {
            degenerate.push(name.to_string());
            0.0
        } else {
            num / den
        }
    };

    let accuracy = (tp + tn) / c.total() as f64;
    let precision = ratio("precision", tp, tp + fp);
    let recall = ratio("recall", tp, tp + fnn);
    let dice = ratio("dice", 2.0 * tp, 2.0 * tp + fp + fnn);
    let dice_bg = ratio("dice_background", 2.0 * tn, 2.0 * tn + fp + fnn);
    let mean_dice = 0.5 * (dice + dice_bg);
    let iou = ratio("iou", tp, tp + fp + fnn);
    let f1 = ratio("f1", 2.0 * precision * recall, precision + recall);

    Ok(MetricsReport {
        accuracy,
        precision,
        recall,
        dice,
        mean_dice,
        iou,
        f1,
        degenerate,
    })
}

/// 8-connected component labeling of a binary mask. Labels start at 1;
/// background is 0. Returns the label image and the component count.
pub fn label_connected(mask: &Array2<bool>) -> (Array2<u32>, u32) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut next = 0u32;
    let mut stack = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if !mask[(sy, sx)] || labels[(sy, sx)] != 0 {
                continue;
            }
            next += 1;
            labels[(sy, sx)] = next;
            stack.push((sy, sx));
            while let Some((y, x)) = stack.pop() {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let ny = y as i64 + dy;
                        let nx = x as i64 + dx;
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[(ny, nx)] && labels[(ny, nx)] == 0 {
                            labels[(ny, nx)] = next;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
        }
    }
    (labels, next)
}

/// Per-instance IoU: each ground-truth instance is compared with the
/// prediction inside its bounding box dilated by `margin` pixels. Returns
/// `(instance_area, iou)` per instance, ordered by instance label.
pub fn per_instance_iou(
    pred: &Array2<bool>,
    gt_instances: &Array2<u32>,
    margin: usize,
) -> Result<Vec<(usize, f64)>> {
    if pred.dim() != gt_instances.dim() {
        return Err(Error::Argument(format!(
            "prediction {:?} and instance map {:?} shapes disagree",
            pred.dim(),
            gt_instances.dim()
        )));
    }
    let (h, w) = pred.dim();
    let max_label = *gt_instances.iter().max().unwrap_or(&0);
    let mut out = Vec::new();
    for id in 1..=max_label {
        let mut area = 0usize;
        let (mut y0, mut x0, mut y1, mut x1) = (h, w, 0usize, 0usize);
        for ((y, x), &v) in gt_instances.indexed_iter() {
            if v == id {
                area += 1;
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y);
                x1 = x1.max(x);
            }
        }
        if area == 0 {
            continue; // labels need not be dense
        }
        let y0 = y0.saturating_sub(margin);
        let x0 = x0.saturating_sub(margin);
        let y1 = (y1.saturating_add(margin)).min(h - 1);
        let x1 = (x1.saturating_add(margin)).min(w - 1);
        let mut inter = 0usize;
        let mut union = 0usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = pred[(y, x)];
                let g = gt_instances[(y, x)] == id;
                if p && g {
                    inter += 1;
                }
                if p || g {
                    union += 1;
                }
            }
        }
        let iou = if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        };
        out.push((area, iou));
    }
    Ok(out)
}

/// One row of the per-area-range IoU table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaBin {
    pub min_area: usize,
    pub max_area: Option<usize>,
    pub count: usize,
    pub mean_iou: f64,
}

/// Default area-range edges for the per-instance IoU table (pixels).
pub const DEFAULT_AREA_EDGES: [usize; 7] = [0, 128, 256, 512, 1024, 2048, 4096];

/// Group `(area, iou)` pairs into ranges `[e_i, e_{i+1})` with a trailing
/// open-ended range.
pub fn bin_instance_ious(items: &[(usize, f64)], edges: &[usize]) -> Vec<AreaBin> {
    let mut bins: Vec<AreaBin> = edges
        .iter()
        .enumerate()
        .map(|(i, &lo)| AreaBin {
            min_area: lo,
            max_area: edges.get(i + 1).copied(),
            count: 0,
            mean_iou: 0.0,
        })
        .collect();
    for &(area, iou) in items {
        let idx = match edges.iter().rposition(|&e| area >= e) {
            Some(i) => i,
            None => continue, // below the first edge
        };
        bins[idx].count += 1;
        bins[idx].mean_iou += iou;
    }
    for b in &mut bins {
        if b.count > 0 {
            b.mean_iou /= b.count as f64;
        }
    }
    bins
}
