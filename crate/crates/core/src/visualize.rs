//! Diagnostic images for one sample.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::{Graph, Tensor, Var};
use crate::geometry::BinaryMask;
use crate::imaging::{flow_to_rgb, ImagingError, RgbImage};
use crate::model::{input_tensors, Model, ModelError};
use crate::pairwise::SupervisionParams;
use crate::synth::SceneSample;
use crate::train::{grid_extent, prepare_sample, TrainError};

/// File stems written per sample, in order.
pub const OUTPUTS: [&str; 6] = ["input", "flow", "heat_image", "heat_flow", "masks", "pairs"];

const PALETTE: [[u8; 3]; 6] = [[230, 25, 75], [60, 180, 75], [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240]];

#[derive(Debug, Error)]
pub enum VisualizeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Imaging { path: PathBuf, source: ImagingError },
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Channel mean of a `[C, H, W]` map, min-max normalized to `[0, 1]`; a
/// constant map becomes all zeros.
pub fn normalized_channel_mean(t: &Tensor) -> Vec<f64> {
    let s = t.shape();
    let (c, plane) = (s[0], s[1] * s[2]);
    let d = t.data();
    let mean: Vec<f64> = (0..plane).map(|i| (0..c).map(|k| d[k * plane + i]).sum::<f64>() / c as f64).collect();
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > 1e-12 {
        mean.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; plane]
    }
}

/// `|fg - bg| / (fg + bg)` of mean heat inside and outside `fg` cells.
pub fn contrast(heat: &[f64], fg: &[bool]) -> f64 {
    let mean = |want: bool| {
        let v: Vec<f64> = heat.iter().zip(fg).filter(|(_, &f)| f == want).map(|(h, _)| *h).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let (f, b) = (mean(true), mean(false));
    if f + b > 0.0 {
        (f - b).abs() / (f + b)
    } else {
        0.0
    }
}

/// Blue-to-yellow ramp for values in `[0, 1]`.
pub fn colorize(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let stops = [[0.05, 0.03, 0.35], [0.55, 0.1, 0.55], [0.95, 0.45, 0.1], [1.0, 0.95, 0.3]];
    let x = v * (stops.len() - 1) as f64;
    let i = (x.floor() as usize).min(stops.len() - 2);
    let t = x - i as f64;
    let mut out = [0u8; 3];
    for k in 0..3 {
        out[k] = (255.0 * (stops[i][k] * (1.0 - t) + stops[i + 1][k] * t)).round() as u8;
    }
    out
}

fn heat_image(heat: &[f64], gh: usize, gw: usize, w: usize, h: usize) -> RgbImage {
    let mut img = RgbImage::filled(w, h, [0, 0, 0]);
    for r in 0..h {
        for c in 0..w {
            img.set(r, c, colorize(heat[(r * gh / h) * gw + c * gw / w]));
        }
    }
    img
}

/// Mask-branch activations of both streams at score-map resolution.
pub struct Activations {
    pub grid: (usize, usize),
    pub image: Vec<f64>,
    pub flow: Vec<f64>,
}

pub fn activations(model: &Model, sample: &SceneSample) -> Result<Activations, ModelError> {
    let (image, flow) = input_tensors(&sample.frame_t, &sample.flow, model.config.flow_input);
    let mut g = Graph::new();
    let leaves: Vec<Var> = model.params.iter().map(|(_, t)| g.constant(t.clone())).collect();
    let f = model.forward(&mut g, &leaves, &image, &flow)?;
    let img = g.value(f.mask_img);
    let (gh, gw) = (img.shape()[1], img.shape()[2]);
    let flow_heat = match f.mask_flow {
        Some(v) => normalized_channel_mean(g.value(v)),
        None => vec![0.0; gh * gw],
    };
    Ok(Activations {
        grid: (gh, gw),
        image: normalized_channel_mean(img),
        flow: flow_heat,
    })
}

/// Union of instance masks sampled at grid-cell centres.
pub fn foreground_cells(sample: &SceneSample, gh: usize, gw: usize) -> Vec<bool> {
    let (h, w) = (sample.frame_t.height, sample.frame_t.width);
    let mut fg = vec![false; gh * gw];
    for r in 0..gh {
        for c in 0..gw {
            let (pr, pc) = (((r * h) as f64 / gh as f64 + 0.5 * h as f64 / gh as f64) as usize, ((c * w) as f64 / gw as f64 + 0.5 * w as f64 / gw as f64) as usize);
            fg[r * gw + c] = sample.instances.iter().any(|i| i.mask.at(pr.min(h - 1), pc.min(w - 1)));
        }
    }
    fg
}

fn blend(a: [u8; 3], b: [u8; 3], t: f64) -> [u8; 3] {
    [0, 1, 2].map(|k| (f64::from(a[k]) * (1.0 - t) + f64::from(b[k]) * t).round() as u8)
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
            img.set(y as usize, x as usize, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn draw_rect(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
    let (a, b) = ((x0.round() as i64), (y0.round() as i64));
    let (c, d) = ((x1.round() as i64 - 1), (y1.round() as i64 - 1));
    for (p, q) in [((a, b), (c, b)), ((c, b), (c, d)), ((c, d), (a, d)), ((a, d), (a, b))] {
        draw_line(img, p, q, color);
    }
}

fn overlay_masks(frame: &RgbImage, masks: &[(&BinaryMask, crate::geometry::PixelBox)]) -> RgbImage {
    let mut img = frame.clone();
    for (k, (m, b)) in masks.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for r in 0..img.height {
            for c in 0..img.width {
                if m.at(r, c) {
                    let p = img.at(r, c);
                    img.set(r, c, blend(p, color, 0.55));
                }
            }
        }
        draw_rect(&mut img, b.x0, b.y0, b.x1, b.y1, color);
    }
    img
}

/// Writes the six diagnostic PNGs for `sample` into `out` and returns their
/// paths in [`OUTPUTS`] order.
pub fn visualize(model: &Model, sample: &SceneSample, params: &SupervisionParams, out: &Path) -> Result<Vec<PathBuf>, VisualizeError> {
    fs::create_dir_all(out).map_err(|source| VisualizeError::Io { path: out.to_path_buf(), source })?;
    let (w, h) = (sample.frame_t.width, sample.frame_t.height);
    let acts = activations(model, sample)?;
    let (gh, gw) = acts.grid;

    let (image, flow) = input_tensors(&sample.frame_t, &sample.flow, model.config.flow_input);
    let detections = model.predict(&image, &flow)?;
    let masks: Vec<_> = detections.iter().map(|d| (&d.mask, d.bbox)).collect();

    let prepared = prepare_sample(sample, &model.config, params)?;
    let (ph, pw) = grid_extent(&model.config, h, w);
    let (sy, sx) = (h as f64 / ph as f64, w as f64 / pw as f64);
    let mut pairs = RgbImage::new(w, h, sample.frame_t.data.iter().map(|&v| (f64::from(v) * 0.6) as u8).collect()).expect("same extents");
    for (k, set) in prepared.supervision.pair_sets.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for (p, &y) in set.pairs.iter().zip(&set.labels) {
            if y == 1 {
                let at = |(r, c): (usize, usize)| (((c as f64 + 0.5) * sx) as i64, ((r as f64 + 0.5) * sy) as i64);
                draw_line(&mut pairs, at(p.first), at(p.second), color);
            }
        }
        let b = &prepared.supervision.boxes[k];
        draw_rect(&mut pairs, b.x0, b.y0, b.x1, b.y1, [255, 255, 255]);
    }

    let images = [
        sample.frame_t.clone(),
        flow_to_rgb(&sample.flow, None).to_rgb8(),
        heat_image(&acts.image, gh, gw, w, h),
        heat_image(&acts.flow, gh, gw, w, h),
        overlay_masks(&sample.frame_t, &masks),
        pairs,
    ];
    let mut paths = Vec::new();
    for (stem, img) in OUTPUTS.iter().zip(images) {
        let p = out.join(format!("{:05}_{stem}.png", sample.index));
        img.write_png(&p).map_err(|source| VisualizeError::Imaging { path: p.clone(), source })?;
        paths.push(p);
    }
    Ok(paths)
}
