//! Axis-aligned boxes in pixel and grid coordinates.

use serde::{Deserialize, Serialize};

/// Box in continuous pixel coordinates, half-open `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PixelBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn from_xywh([x, y, w, h]: [f64; 4]) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x0, self.y0, self.width(), self.height()]
    }

    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        let iw = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let ih = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clamp_to(&self, width: usize, height: usize) -> Self {
        let (w, h) = (width as f64, height as f64);
        Self::new(self.x0.clamp(0.0, w), self.y0.clamp(0.0, h), self.x1.clamp(0.0, w), self.y1.clamp(0.0, h))
    }
}

/// Box of whole grid cells, rows `row0..row1`, columns `col0..col1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl GridBox {
    pub fn new(row0: usize, col0: usize, row1: usize, col1: usize) -> Self {
        Self { row0, col0, row1, col1 }
    }

    pub fn is_empty(&self) -> bool {
        self.row1 <= self.row0 || self.col1 <= self.col0
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        !self.is_empty() && self.row1 <= height && self.col1 <= width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row0 && row < self.row1 && col >= self.col0 && col < self.col1
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.row0..self.row1).flat_map(move |r| (self.col0..self.col1).map(move |c| (r, c)))
    }

    /// Cells of a grid with the given stride whose centres fall inside
    /// `b`. Never empty: a box narrower than one cell keeps the cell
    /// holding its centre.
    pub fn from_pixel_box(b: &PixelBox, stride: usize, grid_h: usize, grid_w: usize) -> Self {
        let s = stride as f64;
        let axis = |lo: f64, hi: f64, n: usize| {
            // centre of cell i is (i + 0.5) * s
            let first = ((lo / s - 0.5).ceil().max(0.0) as usize).min(n);
            let last = (((hi / s - 0.5).ceil()).max(0.0) as usize).min(n);
            if last > first {
                (first, last)
            } else {
                let c = (((lo + hi) * 0.5 / s).floor().max(0.0) as usize).min(n - 1);
                (c, c + 1)
            }
        };
        let (r0, r1) = axis(b.y0, b.y1, grid_h);
        let (c0, c1) = axis(b.x0, b.x1, grid_w);
        Self::new(r0, c0, r1, c1)
    }
}

/// Binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Tight half-open bounds of the set pixels, `None` when empty.
    pub fn tight_box(&self) -> Option<PixelBox> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.at(r, c) {
                    b = Some(match b {
                        None => (c, r, c + 1, r + 1),
                        Some((x0, y0, x1, y1)) => (x0.min(c), y0.min(r), x1.max(c + 1), y1.max(r + 1)),
                    });
                }
            }
        }
        b.map(|(x0, y0, x1, y1)| PixelBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
    }

    /// Intersection over union; two empty masks have IoU 1. `None` when
    /// extents differ.
    pub fn iou(&self, other: &BinaryMask) -> Option<f64> {
        if (self.width, self.height) != (other.width, other.height) {
            return None;
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        Some(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }
}
