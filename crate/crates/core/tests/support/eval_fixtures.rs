//! Evaluation fixtures shared by the evaluation and acceptance tests.

use motionseg::eval::{GroundTruth, Prediction};
use motionseg::geometry::BinaryMask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIDE: usize = 32;

pub fn from_cells(cells: impl IntoIterator<Item = (usize, usize)>) -> BinaryMask {
    let mut m = BinaryMask::empty(SIDE, SIDE);
    for (r, c) in cells {
        m.set(r, c, true);
    }
    m
}

pub fn rect(r0: usize, c0: usize, r1: usize, c1: usize) -> BinaryMask {
    from_cells((r0..r1).flat_map(|r| (c0..c1).map(move |c| (r, c))))
}

pub fn gt(mask: BinaryMask) -> GroundTruth {
    GroundTruth {
        category_id: 1,
        bbox: mask.tight_box().expect("non-empty"),
        area: mask.area() as f64,
        mask,
    }
}

pub fn pred(mask: BinaryMask, score: f64) -> Prediction {
    Prediction {
        category_id: 1,
        bbox: mask.tight_box().expect("non-empty"),
        mask,
        score,
    }
}

/// One image: a detection at mask IoU 0.9, one at mask IoU 0.55 and one
/// false positive scored between them.
pub fn three_detection_fixture() -> (Vec<Vec<GroundTruth>>, Vec<Vec<Prediction>>) {
    let a = rect(2, 2, 12, 12);
    let b = rect(16, 16, 26, 26);
    let near_a = rect(2, 2, 11, 12);
    let part_b = from_cells(b.data.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| (i / SIDE, i % SIDE)).take(55));
    let fp = rect(2, 20, 8, 30);
    assert_eq!(near_a.iou(&a), Some(0.9));
    assert_eq!(part_b.iou(&b), Some(0.55));
    (vec![vec![gt(a), gt(b)]], vec![vec![pred(near_a, 0.9), pred(fp, 0.8), pred(part_b, 0.7)]])
}

fn jitter(m: &BinaryMask, rng: &mut ChaCha8Rng, flips: usize) -> BinaryMask {
    let mut out = m.clone();
    let cells: Vec<usize> = (0..m.data.len()).filter(|&i| m.data[i]).collect();
    for _ in 0..flips {
        let i = cells[rng.random_range(0..cells.len())];
        let (r, c) = (i / SIDE, i % SIDE);
        let (dr, dc) = (rng.random_range(0..3usize), rng.random_range(0..3usize));
        let (rr, cc) = ((r + dr).saturating_sub(1).min(SIDE - 1), (c + dc).saturating_sub(1).min(SIDE - 1));
        out.set(rr, cc, !out.at(rr, cc));
    }
    if out.area() == 0 {
        m.clone()
    } else {
        out
    }
}

fn random_rect(rng: &mut ChaCha8Rng) -> BinaryMask {
    let (h, w) = (rng.random_range(3..14), rng.random_range(3..14));
    let (r0, c0) = (rng.random_range(0..SIDE - h), rng.random_range(0..SIDE - w));
    rect(r0, c0, r0 + h, c0 + w)
}

/// Randomized multi-image fixture with distinct scores.
pub fn random_fixture(seed: u64) -> (Vec<Vec<GroundTruth>>, Vec<Vec<Prediction>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = rng.random_range(1..5);
    let mut scores: Vec<f64> = Vec::new();
    let mut next_score = |rng: &mut ChaCha8Rng| loop {
        let s: f64 = rng.random_range(0.01..1.0);
        if !scores.contains(&s) {
            scores.push(s);
            return s;
        }
    };
    let mut gts = Vec::new();
    let mut dts = Vec::new();
    for _ in 0..images {
        let g: Vec<BinaryMask> = (0..rng.random_range(1..5)).map(|_| random_rect(&mut rng)).collect();
        let mut d = Vec::new();
        for m in &g {
            if rng.random_bool(0.8) {
                let flips = rng.random_range(0..40);
                d.push(pred(jitter(m, &mut rng, flips), next_score(&mut rng)));
            }
        }
        for _ in 0..rng.random_range(0..4) {
            d.push(pred(random_rect(&mut rng), next_score(&mut rng)));
        }
        gts.push(g.into_iter().map(gt).collect());
        dts.push(d);
    }
    (gts, dts)
}
