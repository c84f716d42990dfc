//! Optical-flow fields, their colour-wheel encoding, and the Middlebury
//! `.flo` file format.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use super::{ImagingError, RgbImage};

pub const FLO_TAG: &[u8; 4] = b"PIEH";

/// Per-pixel `(u, v)` displacement from frame t to t+1, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub uv: Vec<[f32; 2]>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            uv: vec![[0.0; 2]; width * height],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> [f32; 2] {
        self.uv[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, uv: [f32; 2]) {
        self.uv[row * self.width + col] = uv;
    }

    pub fn magnitudes(&self) -> impl Iterator<Item = f64> + '_ {
        self.uv.iter().map(|[u, v]| f64::from(*u).hypot(f64::from(*v)))
    }

    /// 99th-percentile magnitude (nearest rank), floored at `1e-6`.
    pub fn robust_max_magnitude(&self) -> f64 {
        let mut m: Vec<f64> = self.magnitudes().collect();
        if m.is_empty() {
            return 1e-6;
        }
        m.sort_by(f64::total_cmp);
        let rank = ((0.99 * m.len() as f64).ceil() as usize).clamp(1, m.len());
        m[rank - 1].max(1e-6)
    }

    pub fn write_flo(&self, path: &Path) -> Result<(), ImagingError> {
        fs::write(path, self.to_flo_bytes())?;
        Ok(())
    }

    pub fn to_flo_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.uv.len() * 8);
        out.extend_from_slice(FLO_TAG);
        out.extend_from_slice(&(self.width as i32).to_le_bytes());
        out.extend_from_slice(&(self.height as i32).to_le_bytes());
        for [u, v] in &self.uv {
            out.extend_from_slice(&u.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn read_flo(path: &Path) -> Result<Self, ImagingError> {
        Self::from_flo_bytes(&fs::read(path)?)
    }

    pub fn from_flo_bytes(bytes: &[u8]) -> Result<Self, ImagingError> {
        if bytes.len() < 4 || &bytes[..4] != FLO_TAG {
            let mut tag = [0u8; 4];
            let n = bytes.len().min(4);
            tag[..n].copy_from_slice(&bytes[..n]);
            return Err(ImagingError::BadMagic {
                expected: "PIEH",
                found: tag,
            });
        }
        if bytes.len() < 12 {
            return Err(ImagingError::Truncated { expected: 12, found: bytes.len() });
        }
        let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if w <= 0 || h <= 0 {
            return Err(ImagingError::Extents { width: w as i64, height: h as i64 });
        }
        let (w, h) = (w as usize, h as usize);
        let expected = 12 + w * h * 8;
        if bytes.len() < expected {
            return Err(ImagingError::Truncated { expected, found: bytes.len() });
        }
        let uv = bytes[12..expected]
            .chunks_exact(8)
            .map(|c| {
                [
                    f32::from_le_bytes(c[..4].try_into().unwrap()),
                    f32::from_le_bytes(c[4..].try_into().unwrap()),
                ]
            })
            .collect();
        Ok(Self { width: w, height: h, uv })
    }
}

/// Colour-wheel encoding of a flow field, RGB in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowColorImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl FlowColorImage {
    /// Uniform colour, e.g. the white produced by a motionless scene.
    pub fn neutral(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![[1.0; 3]; width * height],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> [f64; 3] {
        self.pixels[row * self.width + col]
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let data = self
            .pixels
            .iter()
            .flat_map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        RgbImage::new(self.width, self.height, data).expect("extents")
    }
}

/// Fully saturated colour for a direction, hue = `atan2(v, u)`.
pub fn wheel_hue(u: f64, v: f64) -> [f64; 3] {
    let angle = v.atan2(u).rem_euclid(2.0 * PI);
    let h = angle / (PI / 3.0);
    let sector = (h.floor() as usize).min(5);
    let f = h - sector as f64;
    match sector {
        0 => [1.0, f, 0.0],
        1 => [1.0 - f, 1.0, 0.0],
        2 => [0.0, 1.0, f],
        3 => [0.0, 1.0 - f, 1.0],
        4 => [f, 0.0, 1.0],
        _ => [1.0, 0.0, 1.0 - f],
    }
}

/// Encodes a single vector: hue from direction, saturation from
/// `|(u, v)| / max_magnitude` clamped to 1, zero motion is white.
pub fn encode_vector(u: f64, v: f64, max_magnitude: f64) -> [f64; 3] {
    let sat = (u.hypot(v) / max_magnitude).min(1.0);
    if sat == 0.0 {
        return [1.0; 3];
    }
    wheel_hue(u, v).map(|c| 1.0 - sat * (1.0 - c))
}

/// Colour-wheel image of `flow`. Without an explicit maximum the field's
/// robust (99th-percentile) magnitude normalises saturation.
pub fn flow_to_rgb(flow: &FlowField, max_magnitude: Option<f64>) -> FlowColorImage {
    let max = max_magnitude.unwrap_or_else(|| flow.robust_max_magnitude()).max(1e-6);
    FlowColorImage {
        width: flow.width,
        height: flow.height,
        pixels: flow
            .uv
            .iter()
            .map(|[u, v]| encode_vector(f64::from(*u), f64::from(*v), max))
            .collect(),
    }
}

/// HSV saturation and hue (degrees) of an encoded colour.
pub fn saturation_and_hue(rgb: [f64; 3]) -> (f64, f64) {
    let max = rgb.iter().cloned().fold(f64::MIN, f64::max);
    let min = rgb.iter().cloned().fold(f64::MAX, f64::min);
    let chroma = max - min;
    let sat = if max > 0.0 { chroma / max } else { 0.0 };
    if chroma == 0.0 {
        return (sat, 0.0);
    }
    let [r, g, b] = rgb;
    let h = if max == r {
        ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        (b - r) / chroma + 2.0
    } else {
        (r - g) / chroma + 4.0
    };
    (sat, h * 60.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field(vectors: &[[f32; 2]]) -> FlowField {
        FlowField {
            width: vectors.len(),
            height: 1,
            uv: vectors.to_vec(),
        }
    }

    #[test]
    fn zero_flow_is_white() {
        let img = flow_to_rgb(&FlowField::zeros(4, 3), None);
        assert!(img.pixels.iter().all(|p| *p == [1.0; 3]));
    }

    #[test]
    fn opposite_vectors_have_complementary_hue() {
        for angle in [0.0f64, 0.4, 1.3, 2.9, 4.0, 5.5] {
            let (u, v) = (2.0 * angle.cos(), 2.0 * angle.sin());
            let a = encode_vector(u, v, 4.0);
            let b = encode_vector(-u, -v, 4.0);
            let (sa, ha) = saturation_and_hue(a);
            let (sb, hb) = saturation_and_hue(b);
            assert!((sa - sb).abs() < 1e-12);
            assert!((sa - 0.5).abs() < 1e-12);
            let diff = (ha - hb).rem_euclid(360.0);
            assert!((diff - 180.0).abs() < 1e-9, "angle {angle}: {ha} vs {hb}");
        }
    }

    #[test]
    fn full_turn_rotation_is_invisible() {
        let f = field(&[[3.0, -2.0], [0.5, 0.25], [-1.0, 4.0], [0.0, 0.0]]);
        let rotated = FlowField {
            uv: f
                .uv
                .iter()
                .map(|[u, v]| {
                    let (s, c) = (2.0 * PI).sin_cos();
                    let (u, v) = (f64::from(*u), f64::from(*v));
                    [(c * u - s * v) as f32, (s * u + c * v) as f32]
                })
                .collect(),
            ..f.clone()
        };
        let a = flow_to_rgb(&f, Some(4.0));
        let b = flow_to_rgb(&rotated, Some(4.0));
        for (p, q) in a.pixels.iter().zip(&b.pixels) {
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn robust_max_ignores_top_percent() {
        let mut uv = vec![[1.0f32, 0.0]; 199];
        uv.push([100.0, 0.0]);
        let f = FlowField { width: 200, height: 1, uv };
        assert_eq!(f.robust_max_magnitude(), 1.0);
        assert_eq!(FlowField::zeros(3, 3).robust_max_magnitude(), 1e-6);
    }

    #[test]
    fn flo_header_and_errors() {
        let f = field(&[[1.5, -2.0]]);
        let bytes = f.to_flo_bytes();
        assert_eq!(&bytes[..4], b"PIEH");
        assert_eq!(FlowField::from_flo_bytes(&bytes).unwrap(), f);
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(FlowField::from_flo_bytes(&bad), Err(ImagingError::BadMagic { .. })));
        assert!(matches!(
            FlowField::from_flo_bytes(&bytes[..bytes.len() - 1]),
            Err(ImagingError::Truncated { .. })
        ));
        let mut zero = bytes.clone();
        zero[4..8].copy_from_slice(&0i32.to_le_bytes());
        assert!(matches!(FlowField::from_flo_bytes(&zero), Err(ImagingError::Extents { .. })));
    }

    proptest! {
        #[test]
        fn flo_round_trip_is_bit_exact(w in 1usize..6, h in 1usize..6, seed in any::<u32>()) {
            let uv = (0..w * h)
                .map(|i| {
                    let x = (seed as f32 + i as f32 * 1.37).sin() * 1e3;
                    [x, -x * 0.5 + f32::from_bits(seed % 1000)]
                })
                .collect();
            let f = FlowField { width: w, height: h, uv };
            let back = FlowField::from_flo_bytes(&f.to_flo_bytes()).unwrap();
            for (a, b) in f.uv.iter().zip(&back.uv) {
                prop_assert_eq!(a[0].to_bits(), b[0].to_bits());
                prop_assert_eq!(a[1].to_bits(), b[1].to_bits());
            }
        }

        #[test]
        fn saturation_monotone_in_magnitude(angle in 0.0f64..6.283, m1 in 0.0f64..6.0, m2 in 0.0f64..6.0) {
            let (lo, hi) = if m1 <= m2 { (m1, m2) } else { (m2, m1) };
            let (s_lo, _) = saturation_and_hue(encode_vector(lo * angle.cos(), lo * angle.sin(), 4.0));
            let (s_hi, _) = saturation_and_hue(encode_vector(hi * angle.cos(), hi * angle.sin(), 4.0));
            prop_assert!(s_lo <= s_hi + 1e-12);
            prop_assert!(s_hi <= 1.0 + 1e-12);
        }
    }
}
