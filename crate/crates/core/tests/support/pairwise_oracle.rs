//! From-scratch pair enumeration, similarity and pairwise loss by double
//! loop over every cell pair of the grid.

use std::collections::BTreeSet;

pub type Cell = (usize, usize);

/// Whether `q - p` is a non-zero multiple of `dilation` with each step
/// count at most `k / 2`.
pub fn in_kernel(p: Cell, q: Cell, k: usize, dilation: usize) -> bool {
    let dy = q.0 as isize - p.0 as isize;
    let dx = q.1 as isize - p.1 as isize;
    let d = dilation as isize;
    let r = (k / 2) as isize;
    (dy, dx) != (0, 0) && dy % d == 0 && dx % d == 0 && (dy / d).abs() <= r && (dx / d).abs() <= r
}

/// `[row0, row1) x [col0, col1)`
pub fn in_box(c: Cell, bx: (usize, usize, usize, usize)) -> bool {
    c.0 >= bx.0 && c.0 < bx.1 && c.1 >= bx.2 && c.1 < bx.3
}

pub fn brute_pairs(bx: (usize, usize, usize, usize), h: usize, w: usize, k: usize, dilation: usize) -> BTreeSet<(Cell, Cell)> {
    let cells: Vec<Cell> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
    let mut out = BTreeSet::new();
    for &p in &cells {
        for &q in &cells {
            if p < q && in_kernel(p, q, k, dilation) && (in_box(p, bx) || in_box(q, bx)) {
                out.insert((p, q));
            }
        }
    }
    out
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub struct Instance {
    pub h: usize,
    pub w: usize,
    pub bx: (usize, usize, usize, usize),
    pub lab: Vec<[f64; 3]>,
    pub flow_rgb: Vec<[f64; 3]>,
    pub probs: Vec<f64>,
    pub k: usize,
    pub dilation: usize,
}

pub struct OracleLoss {
    pub loss: f64,
    pub pairs: usize,
    pub positives: usize,
    pub flow_at_threshold: usize,
    pub color_at_threshold: usize,
}

/// `-(1/N) sum_{y=1} ln max(P, 1e-8)` with `y = [S_color >= tau_color] and
/// [S_flow >= tau_flow]`.
pub fn brute_pairwise_loss(x: &Instance, theta_color: f64, tau_color: f64, theta_flow: f64, tau_flow: f64) -> OracleLoss {
    let mut out = OracleLoss {
        loss: 0.0,
        pairs: 0,
        positives: 0,
        flow_at_threshold: 0,
        color_at_threshold: 0,
    };
    let mut sum = 0.0;
    for i in 0..x.h * x.w {
        for j in i + 1..x.h * x.w {
            let (p, q) = ((i / x.w, i % x.w), (j / x.w, j % x.w));
            if !in_kernel(p, q, x.k, x.dilation) || !(in_box(p, x.bx) || in_box(q, x.bx)) {
                continue;
            }
            out.pairs += 1;
            let sc = (-dist(x.lab[i], x.lab[j]) / theta_color).exp();
            let sf = (-dist(x.flow_rgb[i], x.flow_rgb[j]) / theta_flow).exp();
            out.color_at_threshold += usize::from(sc == tau_color);
            out.flow_at_threshold += usize::from(sf == tau_flow);
            if sc >= tau_color && sf >= tau_flow {
                out.positives += 1;
                let (a, b) = (x.probs[i], x.probs[j]);
                let prob = a * b + (1.0 - a) * (1.0 - b);
                sum += -(if prob > 1e-8 { prob } else { 1e-8 }).ln();
            }
        }
    }
    out.loss = sum / out.pairs as f64;
    out
}

/// A distance `d` near `-theta ln tau` for which `exp(-d / theta) == tau`
/// holds exactly in double precision.
pub fn exact_threshold_distance(theta: f64, tau: f64) -> Option<f64> {
    let d0 = -theta * tau.ln();
    let mut up = d0;
    let mut down = d0;
    for _ in 0..4096 {
        for d in [up, down] {
            if (-d / theta).exp() == tau {
                return Some(d);
            }
        }
        up = f64::from_bits(up.to_bits() + 1);
        down = f64::from_bits(down.to_bits() - 1);
    }
    None
}
