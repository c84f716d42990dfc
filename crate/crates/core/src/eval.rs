//! COCO-style mask and box AP.
//!
//! Matching follows the COCO reference: per image and category,
//! detections in descending score order greedily take the highest-IoU
//! unmatched ground truth at or above each IoU threshold; precision is
//! interpolated at 101 recall points. Detections with equal scores are
//! ordered by a canonical key (box, then mask) so results do not depend on
//! input order; across images, ties resolve by image index.

use std::cmp::Ordering;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError};
use crate::geometry::{BinaryMask, PixelBox};
use crate::model::{input_tensors, Model, ModelError};

/// Reference image area for the COCO small/medium thresholds (640 x 480).
pub const COCO_IMAGE_AREA: f64 = 640.0 * 480.0;
pub const COCO_SMALL: f64 = 32.0 * 32.0;
pub const COCO_MEDIUM: f64 = 96.0 * 96.0;
const AREA_MAX: f64 = 1e10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate: the dataset has no images")]
    Empty,
    #[error("dataset has no ground-truth instances")]
    NoGroundTruth,
    #[error("{0} prediction lists for {1} images")]
    Count(usize, usize),
    #[error("mask extents differ from the image extents in image {0}")]
    Extents(usize),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouType {
    Mask,
    Box,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub category_id: u32,
    pub bbox: PixelBox,
    pub mask: BinaryMask,
    /// Mask area in pixels; used for both tasks as in COCO.
    pub area: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub category_id: u32,
    pub bbox: PixelBox,
    pub mask: BinaryMask,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalParams {
    pub iou_thresholds: Vec<f64>,
    pub recall_thresholds: Vec<f64>,
    pub max_dets: usize,
    pub area_small: f64,
    pub area_medium: f64,
}

impl EvalParams {
    /// COCO settings with area thresholds scaled to `width x height`.
    pub fn for_image(width: usize, height: usize) -> Self {
        let scale = (width * height) as f64 / COCO_IMAGE_AREA;
        let iou_step = (0.95 - 0.5) / 9.0;
        Self {
            iou_thresholds: (0..10).map(|i| i as f64 * iou_step + 0.5).collect(),
            recall_thresholds: (0..101).map(|i| i as f64 * 0.01).collect(),
            max_dets: 100,
            area_small: COCO_SMALL * scale,
            area_medium: COCO_MEDIUM * scale,
        }
    }

    fn area_ranges(&self) -> [(f64, f64); 4] {
        [(0.0, AREA_MAX), (0.0, self.area_small), (self.area_small, self.area_medium), (self.area_medium, AREA_MAX)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mask: TaskMetrics,
    #[serde(rename = "box")]
    pub bbox: TaskMetrics,
    pub images: usize,
    pub instances: usize,
    pub detections: usize,
}

impl EvalResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v))
}

impl fmt::Display for EvalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}", "task", "AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L")?;
        for (name, m) in [("mask", &self.mask), ("box", &self.bbox)] {
            writeln!(
                f,
                "{:<6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
                name,
                pct(Some(m.ap)),
                pct(Some(m.ap50)),
                pct(Some(m.ap75)),
                pct(m.ap_small),
                pct(m.ap_medium),
                pct(m.ap_large)
            )?;
        }
        write!(f, "{} images, {} instances, {} detections", self.images, self.instances, self.detections)
    }
}

fn canonical_order(a: &Prediction, b: &Prediction) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| {
            let ka = [a.bbox.x0, a.bbox.y0, a.bbox.x1, a.bbox.y1];
            let kb = [b.bbox.x0, b.bbox.y0, b.bbox.x1, b.bbox.y1];
            ka.iter().zip(&kb).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
        })
        .then_with(|| a.mask.data.cmp(&b.mask.data))
        .then_with(|| a.category_id.cmp(&b.category_id))
}

fn iou(kind: IouType, d: &Prediction, g: &GroundTruth) -> f64 {
    match kind {
        IouType::Box => d.bbox.iou(&g.bbox),
        IouType::Mask => d.mask.iou(&g.mask).unwrap_or(0.0),
    }
}

fn det_area(kind: IouType, d: &Prediction) -> f64 {
    match kind {
        IouType::Box => d.bbox.area(),
        IouType::Mask => d.mask.area() as f64,
    }
}

/// Per-image outcome of matching at every IoU threshold for one area range.
struct ImageMatch {
    scores: Vec<f64>,
    /// `[threshold][detection]`
    matched: Vec<Vec<bool>>,
    ignored: Vec<Vec<bool>>,
    gt_count: usize,
}

fn match_image(kind: IouType, gts: &[&GroundTruth], dts: &[&Prediction], params: &EvalParams, range: (f64, f64)) -> ImageMatch {
    let out_of_range = |a: f64| a < range.0 || a > range.1;
    // non-ignored ground truth first, stable
    let mut g_order: Vec<usize> = (0..gts.len()).collect();
    g_order.sort_by_key(|&i| out_of_range(gts[i].area));
    let g_ignored: Vec<bool> = g_order.iter().map(|&i| out_of_range(gts[i].area)).collect();
    let ious: Vec<Vec<f64>> = dts.iter().map(|d| g_order.iter().map(|&i| iou(kind, d, gts[i])).collect()).collect();
    let nt = params.iou_thresholds.len();
    let mut matched = vec![vec![false; dts.len()]; nt];
    let mut ignored = vec![vec![false; dts.len()]; nt];
    for (ti, &t) in params.iou_thresholds.iter().enumerate() {
        let mut taken = vec![false; gts.len()];
        for (di, d) in dts.iter().enumerate() {
            let mut best = t.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for gi in 0..gts.len() {
                if taken[gi] {
                    continue;
                }
                if let Some(mi) = m {
                    if !g_ignored[mi] && g_ignored[gi] {
                        break;
                    }
                }
                if ious[di][gi] < best {
                    continue;
                }
                best = ious[di][gi];
                m = Some(gi);
            }
            match m {
                Some(gi) => {
                    taken[gi] = true;
                    matched[ti][di] = true;
                    ignored[ti][di] = g_ignored[gi];
                }
                None => ignored[ti][di] = out_of_range(det_area(kind, d)),
            }
        }
    }
    ImageMatch {
        scores: dts.iter().map(|d| d.score).collect(),
        matched,
        ignored,
        gt_count: g_ignored.iter().filter(|&&i| !i).count(),
    }
}

/// Interpolated precision at each recall threshold for one IoU threshold,
/// given detections already in global score order.
fn precision_curve(tp: &[bool], fp: &[bool], npig: usize, recall_thresholds: &[f64]) -> Vec<f64> {
    let mut rc = Vec::with_capacity(tp.len());
    let mut pr = Vec::with_capacity(tp.len());
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for (&t, &f) in tp.iter().zip(fp) {
        ctp += usize::from(t);
        cfp += usize::from(f);
        if t || f {
            rc.push(ctp as f64 / npig as f64);
            pr.push(ctp as f64 / (ctp + cfp) as f64);
        }
    }
    for i in (1..pr.len()).rev() {
        if pr[i] > pr[i - 1] {
            pr[i - 1] = pr[i];
        }
    }
    recall_thresholds
        .iter()
        .map(|&r| {
            let idx = rc.partition_point(|&x| x < r);
            pr.get(idx).copied().unwrap_or(0.0)
        })
        .collect()
}

/// `[threshold][recall]` precision for one area range, or `None` when no
/// ground truth falls inside the range.
fn accumulate(kind: IouType, gts: &[Vec<GroundTruth>], dts: &[Vec<Prediction>], params: &EvalParams, range: (f64, f64)) -> Option<Vec<Vec<f64>>> {
    let mut categories: Vec<u32> = gts.iter().flatten().map(|g| g.category_id).chain(dts.iter().flatten().map(|d| d.category_id)).collect();
    categories.sort_unstable();
    categories.dedup();
    let nt = params.iou_thresholds.len();
    let mut curves: Vec<Vec<Vec<f64>>> = Vec::new();
    for &cat in &categories {
        let matches: Vec<ImageMatch> = gts
            .iter()
            .zip(dts)
            .map(|(g, d)| {
                let g: Vec<&GroundTruth> = g.iter().filter(|x| x.category_id == cat).collect();
                let mut d: Vec<&Prediction> = d.iter().filter(|x| x.category_id == cat).collect();
                d.sort_by(|a, b| canonical_order(a, b));
                d.truncate(params.max_dets);
                match_image(kind, &g, &d, params, range)
            })
            .collect();
        let npig: usize = matches.iter().map(|m| m.gt_count).sum();
        if npig == 0 {
            continue;
        }
        // global order: score descending, then image index, then rank
        let mut order: Vec<(usize, usize)> = matches.iter().enumerate().flat_map(|(i, m)| (0..m.scores.len()).map(move |k| (i, k))).collect();
        order.sort_by(|a, b| matches[b.0].scores[b.1].total_cmp(&matches[a.0].scores[a.1]).then(a.cmp(b)));
        let per_threshold = (0..nt)
            .map(|ti| {
                let tp: Vec<bool> = order.iter().map(|&(i, k)| matches[i].matched[ti][k] && !matches[i].ignored[ti][k]).collect();
                let fp: Vec<bool> = order.iter().map(|&(i, k)| !matches[i].matched[ti][k] && !matches[i].ignored[ti][k]).collect();
                precision_curve(&tp, &fp, npig, &params.recall_thresholds)
            })
            .collect();
        curves.push(per_threshold);
    }
    if curves.is_empty() {
        return None;
    }
    let nr = params.recall_thresholds.len();
    let k = curves.len() as f64;
    Some(
        (0..nt)
            .map(|t| (0..nr).map(|r| curves.iter().map(|c| c[t][r]).sum::<f64>() / k).collect())
            .collect(),
    )
}

fn mean(rows: &[Vec<f64>]) -> f64 {
    let n = rows.iter().map(Vec::len).sum::<usize>();
    rows.iter().flatten().sum::<f64>() / n as f64
}

pub fn evaluate_task(kind: IouType, gts: &[Vec<GroundTruth>], dts: &[Vec<Prediction>], params: &EvalParams) -> Result<TaskMetrics, EvalError> {
    if gts.is_empty() {
        return Err(EvalError::Empty);
    }
    if gts.len() != dts.len() {
        return Err(EvalError::Count(dts.len(), gts.len()));
    }
    let [all, small, medium, large] = params.area_ranges().map(|r| accumulate(kind, gts, dts, params, r));
    let all = all.ok_or(EvalError::NoGroundTruth)?;
    let at = |iou: f64| {
        params
            .iou_thresholds
            .iter()
            .position(|&t| (t - iou).abs() < 1e-9)
            .map_or(f64::NAN, |i| all[i].iter().sum::<f64>() / all[i].len() as f64)
    };
    Ok(TaskMetrics {
        ap: mean(&all),
        ap50: at(0.5),
        ap75: at(0.75),
        ap_small: small.map(|p| mean(&p)),
        ap_medium: medium.map(|p| mean(&p)),
        ap_large: large.map(|p| mean(&p)),
    })
}

pub fn evaluate_predictions(gts: &[Vec<GroundTruth>], dts: &[Vec<Prediction>], params: &EvalParams) -> Result<EvalResult, EvalError> {
    for (i, (g, d)) in gts.iter().zip(dts).enumerate() {
        let mut extents = g.iter().map(|x| (x.mask.width, x.mask.height)).chain(d.iter().map(|x| (x.mask.width, x.mask.height)));
        if let Some(first) = extents.next() {
            if extents.any(|e| e != first) {
                return Err(EvalError::Extents(i));
            }
        }
    }
    Ok(EvalResult {
        mask: evaluate_task(IouType::Mask, gts, dts, params)?,
        bbox: evaluate_task(IouType::Box, gts, dts, params)?,
        images: gts.len(),
        instances: gts.iter().map(Vec::len).sum(),
        detections: dts.iter().map(Vec::len).sum(),
    })
}

/// Ground truth of every image in `dataset`.
pub fn ground_truth(dataset: &Dataset) -> Result<Vec<Vec<GroundTruth>>, EvalError> {
    (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let s = dataset.load(i)?;
            Ok(s.instances
                .into_iter()
                .map(|inst| GroundTruth {
                    category_id: inst.category_id,
                    bbox: inst.bbox,
                    area: inst.mask.area() as f64,
                    mask: inst.mask,
                })
                .collect())
        })
        .collect()
}

/// Runs `model` on every image of `dataset`.
pub fn predict_dataset(model: &Model, dataset: &Dataset) -> Result<Vec<Vec<Prediction>>, EvalError> {
    (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let s = dataset.load(i)?;
            let (image, flow) = input_tensors(&s.frame_t, &s.flow, model.config.flow_input);
            Ok(model
                .predict(&image, &flow)?
                .into_iter()
                .map(|d| Prediction {
                    category_id: crate::synth::SHAPE_CATEGORY,
                    bbox: d.bbox,
                    mask: d.mask,
                    score: d.score,
                })
                .collect())
        })
        .collect()
}

pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<EvalResult, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::Empty);
    }
    let gts = ground_truth(dataset)?;
    let dts = predict_dataset(model, dataset)?;
    let first = &dataset.annotations.images[0];
    evaluate_predictions(&gts, &dts, &EvalParams::for_image(first.width, first.height))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        let mut m = BinaryMask::empty(w, h);
        for r in y0..y1 {
            for c in x0..x1 {
                m.set(r, c, true);
            }
        }
        m
    }

    fn gt(m: BinaryMask) -> GroundTruth {
        GroundTruth {
            category_id: 1,
            bbox: m.tight_box().unwrap(),
            area: m.area() as f64,
            mask: m,
        }
    }

    fn pred(m: BinaryMask, score: f64) -> Prediction {
        Prediction {
            category_id: 1,
            bbox: m.tight_box().unwrap(),
            mask: m,
            score,
        }
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gts = vec![vec![gt(rect(32, 32, 2, 2, 12, 12)), gt(rect(32, 32, 15, 15, 30, 28))]];
        let params = EvalParams::for_image(32, 32);
        let perfect: Vec<Vec<Prediction>> = gts.iter().map(|g| g.iter().map(|x| pred(x.mask.clone(), 1.0)).collect()).collect();
        let r = evaluate_predictions(&gts, &perfect, &params).unwrap();
        for m in [r.mask, r.bbox] {
            assert_eq!((m.ap, m.ap50, m.ap75), (1.0, 1.0, 1.0));
        }
        let r = evaluate_predictions(&gts, &[vec![]], &params).unwrap();
        assert_eq!((r.mask.ap, r.mask.ap50), (0.0, 0.0));
    }

    #[test]
    fn precision_envelope_and_recall_lookup() {
        // tp fp tp with two ground truths
        let q = precision_curve(&[true, false, true], &[false, true, false], 2, &[0.0, 0.5, 0.51, 1.0]);
        assert_eq!(q, vec![1.0, 1.0, 2.0 / 3.0, 2.0 / 3.0]);
    }

    #[test]
    fn tie_order_does_not_depend_on_input_order() {
        let gts = vec![vec![gt(rect(20, 20, 2, 2, 10, 10))]];
        let a = pred(rect(20, 20, 2, 2, 10, 10), 0.5);
        let b = pred(rect(20, 20, 3, 3, 11, 9), 0.5);
        let params = EvalParams::for_image(20, 20);
        let r1 = evaluate_predictions(&gts, &[vec![a.clone(), b.clone()]], &params).unwrap();
        let r2 = evaluate_predictions(&gts, &[vec![b, a]], &params).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn area_thresholds_scale_with_the_image() {
        let p = EvalParams::for_image(64, 64);
        assert!((p.area_small - 1024.0 * 4096.0 / 307200.0).abs() < 1e-12);
        assert!((p.area_medium - 9216.0 * 4096.0 / 307200.0).abs() < 1e-12);
        assert_eq!(p.recall_thresholds.len(), 101);
        assert!((p.iou_thresholds[5] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn missing_ground_truth_or_images_are_errors() {
        let p = EvalParams::for_image(8, 8);
        assert!(matches!(evaluate_predictions(&[], &[], &p), Err(EvalError::Empty)));
        assert!(matches!(evaluate_predictions(&[vec![]], &[vec![]], &p), Err(EvalError::NoGroundTruth)));
        assert!(matches!(evaluate_predictions(&[vec![]], &[], &p), Err(EvalError::Count(0, 1))));
    }
}
