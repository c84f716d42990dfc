//! Training objectives: pairwise affinity, box projection, detection, and
//! their weighted sum.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{CustomBackward, Graph, Tensor, TensorError, Var};
use crate::geometry::{GridBox, PixelBox};
use crate::pairwise::{PairSet, PixelPair};

/// Lower clamp on pair probabilities before taking the log.
pub const PROB_EPS: f64 = 1e-8;
/// Dice denominator guard.
pub const DICE_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("pair set is empty")]
    EmptyPairs,
    #[error("box {0:?} is degenerate or outside a {1}x{2} map")]
    DegenerateBox(GridBox, usize, usize),
    #[error("score map must be 1xHxW, got {0:?}")]
    MapShape(Vec<usize>),
    #[error("target grid {0}x{1} does not match prediction {2:?}")]
    TargetShape(usize, usize, Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Probability that both endpoints share a label under independent
/// per-pixel foreground probabilities.
pub fn pair_probability(m_a: f64, m_b: f64) -> f64 {
    m_a * m_b + (1.0 - m_a) * (1.0 - m_b)
}

fn map_extents(g: &Graph, m: Var) -> Result<(usize, usize), LossError> {
    match *g.value(m).shape() {
        [1, h, w] => Ok((h, w)),
        ref s => Err(LossError::MapShape(s.to_vec())),
    }
}

struct PairwiseBackward {
    flat: Vec<(usize, usize)>,
    n: f64,
}

impl CustomBackward for PairwiseBackward {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &[f64]) -> Vec<Option<Vec<f64>>> {
        let m = inputs[0].data();
        let mut grad = vec![0.0; m.len()];
        let scale = -grad_output[0] / self.n;
        for &(a, b) in &self.flat {
            let p = pair_probability(m[a], m[b]);
            if p < PROB_EPS {
                continue;
            }
            grad[a] += scale * (2.0 * m[b] - 1.0) / p;
            grad[b] += scale * (2.0 * m[a] - 1.0) / p;
        }
        vec![Some(grad)]
    }
}

/// `-(1/N) * sum over positive pairs of log P(same label)`, with `N` the
/// total number of pairs. `m` is a `1xHxW` probability map.
pub fn pairwise_loss(g: &mut Graph, m: Var, pairs: &PairSet) -> Result<Var, LossError> {
    if pairs.is_empty() {
        return Err(LossError::EmptyPairs);
    }
    let (h, w) = map_extents(g, m)?;
    let idx = |(r, c): (usize, usize)| r * w + c;
    let mut flat = Vec::with_capacity(pairs.positives());
    for (&PixelPair { first, second }, &y) in pairs.pairs.iter().zip(&pairs.labels) {
        if first.0 >= h || second.0 >= h || first.1 >= w || second.1 >= w {
            return Err(TensorError::Range {
                start: idx(first).max(idx(second)),
                len: 1,
                extent: h * w,
            }
            .into());
        }
        if y == 1 {
            flat.push((idx(first), idx(second)));
        }
    }
    let n = pairs.len() as f64;
    let values = g.value(m).data();
    let total: f64 = flat
        .iter()
        .map(|&(a, b)| -pair_probability(values[a], values[b]).max(PROB_EPS).ln())
        .sum();
    Ok(g.custom(&[m], Tensor::scalar(total / n), Box::new(PairwiseBackward { flat, n })))
}

fn dice_and_grad(p: &[f64], q: &[f64]) -> (f64, Vec<f64>) {
    let num: f64 = 2.0 * p.iter().zip(q).map(|(a, b)| a * b).sum::<f64>();
    let den: f64 = p.iter().map(|a| a * a).sum::<f64>() + q.iter().map(|b| b * b).sum::<f64>() + DICE_EPS;
    let grad = p
        .iter()
        .zip(q)
        .map(|(&pj, &qj)| (2.0 * qj * den - 2.0 * pj * num) / (den * den))
        .collect();
    (num / den, grad)
}

struct ProjectionBackward {
    col_arg: Vec<usize>,
    row_arg: Vec<usize>,
    col_grad: Vec<f64>,
    row_grad: Vec<f64>,
}

impl CustomBackward for ProjectionBackward {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut grad = vec![0.0; inputs[0].numel()];
        for (&i, &d) in self.col_arg.iter().zip(&self.col_grad) {
            grad[i] -= grad_output[0] * d;
        }
        for (&i, &d) in self.row_arg.iter().zip(&self.row_grad) {
            grad[i] -= grad_output[0] * d;
        }
        vec![Some(grad)]
    }
}

/// Axis max-projections of a `1xHxW` map with the flat index of each
/// maximum (first occurrence on ties).
pub fn max_projections(data: &[f64], h: usize, w: usize) -> ((Vec<f64>, Vec<usize>), (Vec<f64>, Vec<usize>)) {
    let mut cols = (vec![f64::NEG_INFINITY; w], vec![0; w]);
    let mut rows = (vec![f64::NEG_INFINITY; h], vec![0; h]);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if data[i] > cols.0[c] {
                cols.0[c] = data[i];
                cols.1[c] = i;
            }
            if data[i] > rows.0[r] {
                rows.0[r] = data[i];
                rows.1[r] = i;
            }
        }
    }
    (cols, rows)
}

/// `(1 - dice_x) + (1 - dice_y)` between the map's column/row max
/// projections and the box's column/row indicators.
pub fn projection_loss(g: &mut Graph, m: Var, bx: GridBox) -> Result<Var, LossError> {
    let (h, w) = map_extents(g, m)?;
    if !bx.fits(h, w) {
        return Err(LossError::DegenerateBox(bx, h, w));
    }
    let ((px, col_arg), (py, row_arg)) = max_projections(g.value(m).data(), h, w);
    let qx: Vec<f64> = (0..w).map(|c| f64::from(u8::from((bx.col0..bx.col1).contains(&c)))).collect();
    let qy: Vec<f64> = (0..h).map(|r| f64::from(u8::from((bx.row0..bx.row1).contains(&r)))).collect();
    let (dx, col_grad) = dice_and_grad(&px, &qx);
    let (dy, row_grad) = dice_and_grad(&py, &qy);
    let value = Tensor::scalar((1.0 - dx) + (1.0 - dy));
    Ok(g.custom(
        &[m],
        value,
        Box::new(ProjectionBackward {
            col_arg,
            row_arg,
            col_grad,
            row_grad,
        }),
    ))
}

/// Per-location detection targets on a `grid_h x grid_w` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTargets {
    pub grid_h: usize,
    pub grid_w: usize,
    pub stride: usize,
    /// Matched ground-truth index at each location, `None` for background.
    pub assigned: Vec<Option<usize>>,
    /// Left, top, right, bottom distances in grid units; zero at background.
    pub ltrb: Vec<[f64; 4]>,
}

impl DetectionTargets {
    /// Locations whose centre lies inside a box and within `radius` strides
    /// of its centre are positive; overlaps go to the smallest box, and
    /// every box keeps at least the location nearest its centre.
    pub fn assign(gt: &[PixelBox], grid_h: usize, grid_w: usize, stride: usize, radius: f64) -> Self {
        let s = stride as f64;
        let n = grid_h * grid_w;
        let mut assigned: Vec<Option<usize>> = vec![None; n];
        let centre = |i: usize| (((i % grid_w) as f64 + 0.5) * s, ((i / grid_w) as f64 + 0.5) * s);
        let better = |cand: usize, cur: Option<usize>| match cur {
            None => true,
            Some(k) => gt[cand].area() < gt[k].area(),
        };
        for (k, b) in gt.iter().enumerate() {
            let (bx, by) = b.center();
            for (i, slot) in assigned.iter_mut().enumerate() {
                let (x, y) = centre(i);
                let near = (x - bx).abs() <= radius * s && (y - by).abs() <= radius * s;
                if b.contains(x, y) && near && better(k, *slot) {
                    *slot = Some(k);
                }
            }
        }
        for (k, b) in gt.iter().enumerate() {
            if assigned.contains(&Some(k)) {
                continue;
            }
            let (bx, by) = b.center();
            let nearest = (0..n)
                .min_by(|&i, &j| {
                    let d = |i: usize| {
                        let (x, y) = centre(i);
                        (x - bx).powi(2) + (y - by).powi(2)
                    };
                    d(i).total_cmp(&d(j))
                })
                .expect("non-empty grid");
            assigned[nearest] = Some(k);
        }
        let ltrb = assigned
            .iter()
            .enumerate()
            .map(|(i, a)| match a {
                Some(k) => {
                    let (x, y) = centre(i);
                    let b = gt[*k];
                    [(x - b.x0) / s, (y - b.y0) / s, (b.x1 - x) / s, (b.y1 - y) / s]
                }
                None => [0.0; 4],
            })
            .collect();
        Self {
            grid_h,
            grid_w,
            stride,
            assigned,
            ltrb,
        }
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.assigned.iter().enumerate().filter_map(|(i, a)| a.map(|k| (i, k)))
    }

    pub fn num_positives(&self) -> usize {
        self.assigned.iter().filter(|a| a.is_some()).count()
    }
}

/// Numerically stable binary cross-entropy on a logit.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Smooth-L1 with transition point 1.
pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

struct DetectionBackward {
    targets: DetectionTargets,
}

impl DetectionBackward {
    fn norms(&self) -> (f64, f64) {
        let npos = self.targets.num_positives();
        (npos.max(1) as f64, (4 * npos).max(1) as f64)
    }
}

impl CustomBackward for DetectionBackward {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (cls_norm, reg_norm) = self.norms();
        let plane = self.targets.grid_h * self.targets.grid_w;
        let logits = inputs[0].data();
        let g0 = grad_output[0];
        let cls_grad = logits
            .iter()
            .zip(&self.targets.assigned)
            .map(|(&z, a)| g0 * (crate::autodiff::sigmoid(z) - f64::from(u8::from(a.is_some()))) / cls_norm)
            .collect();
        let reg = inputs[1].data();
        let mut reg_grad = vec![0.0; reg.len()];
        for (i, _) in self.targets.positives() {
            for k in 0..4 {
                let d = reg[k * plane + i] - self.targets.ltrb[i][k];
                reg_grad[k * plane + i] = g0 * smooth_l1_grad(d) / reg_norm;
            }
        }
        vec![Some(cls_grad), Some(reg_grad)]
    }
}

/// BCE objectness summed over all locations and divided by the positive
/// count, plus smooth-L1 on the four distances averaged over positives.
/// `logits` is `1xHxW`, `ltrb` is `4xHxW` in grid units.
pub fn detection_loss(g: &mut Graph, logits: Var, ltrb: Var, targets: &DetectionTargets) -> Result<Var, LossError> {
    let (h, w) = (targets.grid_h, targets.grid_w);
    if g.value(logits).shape() != [1, h, w] {
        return Err(LossError::TargetShape(h, w, g.value(logits).shape().to_vec()));
    }
    if g.value(ltrb).shape() != [4, h, w] {
        return Err(LossError::TargetShape(h, w, g.value(ltrb).shape().to_vec()));
    }
    let back = DetectionBackward {
        targets: targets.clone(),
    };
    let (cls_norm, reg_norm) = back.norms();
    let z = g.value(logits).data();
    let cls: f64 = z
        .iter()
        .zip(&targets.assigned)
        .map(|(&z, a)| bce_with_logit(z, f64::from(u8::from(a.is_some()))))
        .sum::<f64>()
        / cls_norm;
    let r = g.value(ltrb).data();
    let plane = h * w;
    let reg: f64 = targets
        .positives()
        .flat_map(|(i, _)| (0..4).map(move |k| (i, k)))
        .map(|(i, k)| smooth_l1(r[k * plane + i] - targets.ltrb[i][k]))
        .sum::<f64>()
        / reg_norm;
    Ok(g.custom(&[logits, ltrb], Tensor::scalar(cls + reg), Box::new(back)))
}

/// Loss weights and pairwise warmup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_proj: f64,
    pub lambda_pair: f64,
    /// Warmup length as a fraction of total iterations.
    pub warmup_fraction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_proj: 1.0,
            lambda_pair: 1.0,
            warmup_fraction: 0.1,
        }
    }
}

/// Linear ramp from 0 at step 0 to 1 at `warmup_steps`.
pub fn warmup_factor(step: usize, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 {
        1.0
    } else {
        (step as f64 / warmup_steps as f64).min(1.0)
    }
}

/// `detection + lambda_proj * projection + w(step) * lambda_pair * pairwise`.
pub fn total_loss(
    g: &mut Graph,
    parts: [Var; 3],
    step: usize,
    warmup_steps: usize,
    weights: &LossWeights,
) -> Result<Var, LossError> {
    let [det, proj, pair] = parts;
    let proj = g.scale(proj, weights.lambda_proj)?;
    let pair = g.scale(pair, warmup_factor(step, warmup_steps) * weights.lambda_pair)?;
    let sum = g.add(det, proj)?;
    Ok(g.add(sum, pair)?)
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub pairwise: f64,
    pub projection: f64,
    pub detection: f64,
    pub total: f64,
    pub n_pairs: usize,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.pairwise, self.projection, self.detection, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}
