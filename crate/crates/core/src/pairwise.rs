//! Local pixel-pair construction and pseudo label-identities.
//!
//! A pair is labelled as sharing one label when both its colour similarity
//! (Lab distance) and its flow similarity (distance between colour-wheel
//! encoded flow vectors) reach their thresholds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::GridBox;
use crate::imaging::{FlowColorImage, FlowField, Lab, LabImage};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PairError {
    #[error("box {0:?} is empty or outside a {1}x{2} grid")]
    BadBox(GridBox, usize, usize),
    #[error("similarity arrays differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid supervision parameter: {0}")]
    Params(String),
}

/// Undirected pair of grid cells, stored with the lexicographically smaller
/// `(row, col)` first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PixelPair {
    pub first: (usize, usize),
    pub second: (usize, usize),
}

impl PixelPair {
    pub fn new(a: (usize, usize), b: (usize, usize)) -> Self {
        if a <= b {
            Self { first: a, second: b }
        } else {
            Self { first: b, second: a }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FlowSpace {
    /// Distance between colour-wheel encodings, in `[0, sqrt(3)]`.
    #[default]
    Rgb,
    /// Distance between raw displacement vectors, in pixels.
    Uv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisionParams {
    pub theta_color: f64,
    pub theta_flow: f64,
    pub tau_color: f64,
    pub tau_flow: f64,
    pub kernel_size: usize,
    pub dilation: usize,
    pub flow_similarity_space: FlowSpace,
}

impl Default for SupervisionParams {
    fn default() -> Self {
        Self {
            theta_color: 2.0,
            theta_flow: 0.5,
            tau_color: 0.3,
            tau_flow: 0.6,
            kernel_size: 3,
            dilation: 2,
            flow_similarity_space: FlowSpace::Rgb,
        }
    }
}

impl SupervisionParams {
    /// Colour-only rule: the flow test always passes.
    pub fn color_only(&self) -> Self {
        Self {
            tau_flow: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), PairError> {
        let bad = |m: &str| Err(PairError::Params(m.to_string()));
        if !(self.theta_color > 0.0) || !(self.theta_flow > 0.0) {
            return bad("theta_color and theta_flow must be positive");
        }
        // tau_flow = 0 is allowed: it disables the flow test.
        if !(0.0..1.0).contains(&self.tau_color) || !(0.0..1.0).contains(&self.tau_flow) {
            return bad("tau_color and tau_flow must lie in [0, 1)");
        }
        if self.kernel_size < 3 || self.kernel_size % 2 == 0 {
            return bad("kernel_size must be odd and at least 3");
        }
        if self.dilation == 0 {
            return bad("dilation must be at least 1");
        }
        Ok(())
    }
}

/// Every pair `(p, q)` with `p` inside `bx` and `q` in the dilated `k x k`
/// neighbourhood of `p` (centre excluded, clipped to the grid), each
/// undirected pair listed once in sorted order.
pub fn enumerate_pairs(
    bx: GridBox,
    (height, width): (usize, usize),
    kernel_size: usize,
    dilation: usize,
) -> Result<Vec<PixelPair>, PairError> {
    if !bx.fits(height, width) {
        return Err(PairError::BadBox(bx, height, width));
    }
    let r = (kernel_size / 2) as isize;
    let d = dilation as isize;
    let mut pairs = Vec::with_capacity(bx.cells().count() * (kernel_size * kernel_size - 1));
    for (row, col) in bx.cells() {
        for dy in -r..=r {
            for dx in -r..=r {
                if dy == 0 && dx == 0 {
                    continue;
                }
                let (qr, qc) = (row as isize + dy * d, col as isize + dx * d);
                if qr < 0 || qc < 0 || qr >= height as isize || qc >= width as isize {
                    continue;
                }
                pairs.push(PixelPair::new((row, col), (qr as usize, qc as usize)));
            }
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    Ok(pairs)
}

fn kernel(distance: f64, theta: f64) -> f64 {
    (-distance / theta).exp()
}

fn lab_distance(a: Lab, b: Lab) -> f64 {
    a.delta_e(b)
}

pub fn color_similarity(lab: &LabImage, pair: PixelPair, theta_color: f64) -> f64 {
    let a = lab.at(pair.first.0, pair.first.1);
    let b = lab.at(pair.second.0, pair.second.1);
    kernel(lab_distance(a, b), theta_color)
}

pub fn flow_similarity(flow_rgb: &FlowColorImage, pair: PixelPair, theta_flow: f64) -> f64 {
    let a = flow_rgb.at(pair.first.0, pair.first.1);
    let b = flow_rgb.at(pair.second.0, pair.second.1);
    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    kernel(d, theta_flow)
}

pub fn flow_similarity_uv(flow: &FlowField, pair: PixelPair, theta_flow: f64) -> f64 {
    let a = flow.at(pair.first.0, pair.first.1);
    let b = flow.at(pair.second.0, pair.second.1);
    let d = f64::from(a[0] - b[0]).hypot(f64::from(a[1] - b[1]));
    kernel(d, theta_flow)
}

/// `1` where both similarities reach their thresholds (inclusive), else `0`.
pub fn pseudo_labels(s_color: &[f64], s_flow: &[f64], params: &SupervisionParams) -> Result<Vec<u8>, PairError> {
    if s_color.len() != s_flow.len() {
        return Err(PairError::LengthMismatch(s_color.len(), s_flow.len()));
    }
    Ok(s_color
        .iter()
        .zip(s_flow)
        .map(|(&c, &f)| u8::from(c >= params.tau_color && f >= params.tau_flow))
        .collect())
}

/// Appearance and motion cues sampled on the score-map grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionGrid {
    pub lab: LabImage,
    pub flow_rgb: FlowColorImage,
    pub flow: FlowField,
}

impl SupervisionGrid {
    pub fn height(&self) -> usize {
        self.lab.height
    }

    pub fn width(&self) -> usize {
        self.lab.width
    }

    /// Nearest-neighbour resampling of full-resolution cues onto a
    /// `grid_h x grid_w` grid.
    pub fn resample(lab: &LabImage, flow_rgb: &FlowColorImage, flow: &FlowField, grid_h: usize, grid_w: usize) -> Self {
        let src = |r: usize, c: usize| {
            let sr = ((r as f64 + 0.5) * lab.height as f64 / grid_h as f64) as usize;
            let sc = ((c as f64 + 0.5) * lab.width as f64 / grid_w as f64) as usize;
            (sr.min(lab.height - 1), sc.min(lab.width - 1))
        };
        let cells: Vec<(usize, usize)> = (0..grid_h).flat_map(|r| (0..grid_w).map(move |c| (r, c))).collect();
        Self {
            lab: LabImage {
                width: grid_w,
                height: grid_h,
                pixels: cells.iter().map(|&(r, c)| {
                    let (sr, sc) = src(r, c);
                    lab.at(sr, sc)
                }).collect(),
            },
            flow_rgb: FlowColorImage {
                width: grid_w,
                height: grid_h,
                pixels: cells.iter().map(|&(r, c)| {
                    let (sr, sc) = src(r, c);
                    flow_rgb.at(sr, sc)
                }).collect(),
            },
            flow: FlowField {
                width: grid_w,
                height: grid_h,
                uv: cells.iter().map(|&(r, c)| {
                    let (sr, sc) = src(r, c);
                    flow.at(sr, sc)
                }).collect(),
            },
        }
    }
}

/// The pair set of one box with per-pair similarities and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<PixelPair>,
    pub labels: Vec<u8>,
    pub s_color: Vec<f64>,
    pub s_flow: Vec<f64>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    pub fn build(bx: GridBox, grid: &SupervisionGrid, params: &SupervisionParams) -> Result<Self, PairError> {
        params.validate()?;
        let pairs = enumerate_pairs(bx, (grid.height(), grid.width()), params.kernel_size, params.dilation)?;
        let s_color: Vec<f64> = pairs.iter().map(|&p| color_similarity(&grid.lab, p, params.theta_color)).collect();
        let s_flow: Vec<f64> = pairs
            .iter()
            .map(|&p| match params.flow_similarity_space {
                FlowSpace::Rgb => flow_similarity(&grid.flow_rgb, p, params.theta_flow),
                FlowSpace::Uv => flow_similarity_uv(&grid.flow, p, params.theta_flow),
            })
            .collect();
        let labels = pseudo_labels(&s_color, &s_flow, params)?;
        Ok(Self {
            pairs,
            labels,
            s_color,
            s_flow,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn brute_force(bx: GridBox, h: usize, w: usize, k: usize, d: usize) -> BTreeSet<PixelPair> {
        let r = (k / 2) as isize;
        let mut out = BTreeSet::new();
        let cells: Vec<(usize, usize)> = (0..h).flat_map(|a| (0..w).map(move |b| (a, b))).collect();
        for &p in &cells {
            for &q in &cells {
                if p >= q {
                    continue;
                }
                let dy = q.0 as isize - p.0 as isize;
                let dx = q.1 as isize - p.1 as isize;
                let d = d as isize;
                let neighbour = dy % d == 0 && dx % d == 0 && (dy / d).abs() <= r && (dx / d).abs() <= r;
                if neighbour && (bx.contains(p.0, p.1) || bx.contains(q.0, q.1)) {
                    out.insert(PixelPair { first: p, second: q });
                }
            }
        }
        out
    }

    #[test]
    fn pair_counts_from_brute_force() {
        assert_eq!(enumerate_pairs(GridBox::new(2, 2, 3, 3), (5, 5), 3, 1).unwrap().len(), 8);
        assert_eq!(enumerate_pairs(GridBox::new(0, 0, 1, 1), (5, 5), 3, 1).unwrap().len(), 3);
        assert_eq!(enumerate_pairs(GridBox::new(2, 1, 3, 3), (5, 5), 3, 1).unwrap().len(), 15);
        assert_eq!(brute_force(GridBox::new(2, 1, 3, 3), 5, 5, 3, 1).len(), 15);
    }

    #[test]
    fn bad_boxes_rejected() {
        assert!(enumerate_pairs(GridBox::new(2, 2, 2, 3), (5, 5), 3, 1).is_err());
        assert!(enumerate_pairs(GridBox::new(2, 2, 6, 3), (5, 5), 3, 1).is_err());
    }

    #[test]
    fn similarity_values() {
        let lab = LabImage {
            width: 3,
            height: 1,
            pixels: vec![
                Lab { l: 50.0, a: 0.0, b: 0.0 },
                Lab { l: 52.0, a: 0.0, b: 0.0 },
                Lab { l: 54.0, a: 0.0, b: 0.0 },
            ],
        };
        let p01 = PixelPair::new((0, 0), (0, 1));
        let p02 = PixelPair::new((0, 0), (0, 2));
        assert_eq!(color_similarity(&lab, PixelPair::new((0, 1), (0, 1)), 2.0), 1.0);
        assert!((color_similarity(&lab, p01, 2.0) - 0.36787944117144233).abs() < 1e-15);
        assert!((color_similarity(&lab, p02, 2.0) - 0.1353352832366127).abs() < 1e-15);

        let rgb = FlowColorImage {
            width: 3,
            height: 1,
            pixels: vec![[1.0, 1.0, 1.0], [1.0, 0.5, 1.0], [1.0, 1.0, 1.0]],
        };
        assert!((flow_similarity(&rgb, p01, 0.5) - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(flow_similarity(&rgb, p02, 0.5), 1.0);
    }

    #[test]
    fn threshold_rule() {
        let p = SupervisionParams::default();
        assert_eq!(p.tau_flow, 0.6);
        assert_eq!(p.theta_flow, 0.5);
        assert_eq!(pseudo_labels(&[0.9], &[0.7], &p).unwrap(), vec![1]);
        assert_eq!(pseudo_labels(&[0.9], &[0.59], &p).unwrap(), vec![0]);
        assert_eq!(pseudo_labels(&[0.3], &[0.6], &p).unwrap(), vec![1]);
        assert!(pseudo_labels(&[0.3], &[], &p).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(SupervisionParams::default().validate().is_ok());
        assert!(SupervisionParams::default().color_only().validate().is_ok());
        let mut p = SupervisionParams::default();
        p.kernel_size = 4;
        assert!(p.validate().is_err());
        p = SupervisionParams::default();
        p.theta_flow = 0.0;
        assert!(p.validate().is_err());
        p = SupervisionParams::default();
        p.tau_color = 1.0;
        assert!(p.validate().is_err());
    }

    proptest! {
        #[test]
        fn enumeration_matches_brute_force(
            h in 1usize..=12, w in 1usize..=12,
            r0 in 0usize..12, c0 in 0usize..12, bh in 1usize..12, bw in 1usize..12,
            k in prop::sample::select(vec![3usize, 5]), d in 1usize..=2,
        ) {
            let r0 = r0 % h;
            let c0 = c0 % w;
            let bx = GridBox::new(r0, c0, (r0 + bh).min(h), (c0 + bw).min(w));
            let fast: BTreeSet<_> = enumerate_pairs(bx, (h, w), k, d).unwrap().into_iter().collect();
            prop_assert_eq!(fast, brute_force(bx, h, w, k, d));
        }

        #[test]
        fn labels_monotone_in_similarity(c in 0.0f64..1.0, f in 0.0f64..1.0, dc in 0.0f64..0.5, df in 0.0f64..0.5) {
            let p = SupervisionParams::default();
            let before = pseudo_labels(&[c], &[f], &p).unwrap()[0];
            let after = pseudo_labels(&[(c + dc).min(1.0)], &[(f + df).min(1.0)], &p).unwrap()[0];
            prop_assert!(after >= before);
        }

        #[test]
        fn zero_flow_threshold_recovers_color_only(c in prop::collection::vec(0.0f64..1.0, 1..20), seed in 0u64..1000) {
            let p = SupervisionParams::default();
            let f: Vec<f64> = c.iter().enumerate().map(|(i, _)| ((i as u64 * 7919 + seed) % 1000) as f64 / 1000.0).collect();
            let no_flow = pseudo_labels(&c, &f, &p.color_only()).unwrap();
            let ones = vec![1.0; c.len()];
            prop_assert_eq!(no_flow, pseudo_labels(&c, &ones, &p).unwrap());
        }

        #[test]
        fn similarity_symmetric_and_bounded(l1 in 0.0f64..100.0, l2 in 0.0f64..100.0, a in -50.0f64..50.0) {
            let lab = LabImage { width: 2, height: 1, pixels: vec![Lab { l: l1, a, b: 0.0 }, Lab { l: l2, a: 0.0, b: a }] };
            let s = color_similarity(&lab, PixelPair { first: (0, 0), second: (0, 1) }, 2.0);
            let t = color_similarity(&lab, PixelPair { first: (0, 1), second: (0, 0) }, 2.0);
            prop_assert_eq!(s, t);
            prop_assert!(s > 0.0 && s <= 1.0);
        }
    }
}
