//! Brute-force COCO AP over the full area range, written independently of
//! the library evaluator. Assumes distinct scores within each image.

use motionseg::eval::{GroundTruth, Prediction};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Mask,
    Box,
}

fn box_iou(a: &Prediction, b: &GroundTruth) -> f64 {
    let (ax0, ay0, ax1, ay1) = (a.bbox.x0, a.bbox.y0, a.bbox.x1, a.bbox.y1);
    let (bx0, by0, bx1, by1) = (b.bbox.x0, b.bbox.y0, b.bbox.x1, b.bbox.y1);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn mask_iou(a: &Prediction, b: &GroundTruth) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.mask.data.iter().zip(&b.mask.data) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// AP at one IoU threshold.
pub fn ap_at(kind: Kind, gts: &[Vec<GroundTruth>], dts: &[Vec<Prediction>], thr: f64) -> f64 {
    let total_gt: usize = gts.iter().map(Vec::len).sum();
    // (score, image, is_tp)
    let mut flat: Vec<(f64, usize, bool)> = Vec::new();
    for (img, (g, d)) in gts.iter().zip(dts).enumerate() {
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.sort_by(|&a, &b| d[b].score.partial_cmp(&d[a].score).unwrap());
        order.truncate(100);
        let mut used = vec![false; g.len()];
        for &k in &order {
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in g.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let v = if kind == Kind::Mask { mask_iou(&d[k], gt) } else { box_iou(&d[k], gt) };
                if v >= thr.min(1.0 - 1e-10) && best.map_or(true, |(_, b)| v >= b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
            }
            flat.push((d[k].score, img, best.is_some()));
        }
    }
    flat.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut points = Vec::new();
    let mut tp = 0.0;
    for (i, f) in flat.iter().enumerate() {
        if f.2 {
            tp += 1.0;
        }
        points.push((tp / total_gt as f64, tp / (i as f64 + 1.0)));
    }
    let mut sum = 0.0;
    for i in 0..101 {
        let r = i as f64 * 0.01;
        sum += points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
    }
    sum / 101.0
}

pub fn thresholds() -> Vec<f64> {
    let step = (0.95 - 0.5) / 9.0;
    (0..10).map(|i| i as f64 * step + 0.5).collect()
}

/// `(AP, AP50, AP75)`.
pub fn reference_ap(kind: Kind, gts: &[Vec<GroundTruth>], dts: &[Vec<Prediction>]) -> (f64, f64, f64) {
    let per: Vec<f64> = thresholds().iter().map(|&t| ap_at(kind, gts, dts, t)).collect();
    (per.iter().sum::<f64>() / per.len() as f64, per[0], per[5])
}
