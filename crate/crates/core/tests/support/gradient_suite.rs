//! Finite-difference checks of every differentiable operator, the custom
//! losses and the full per-image objective.

#![allow(dead_code)]

use motionseg::autodiff::{grad_check, grad_check_sampled, Elementwise, GradCheckReport, Graph, Tensor, TensorError, Var};
use motionseg::geometry::{GridBox, PixelBox};
use motionseg::losses::{detection_loss, pairwise_loss, projection_loss, DetectionTargets, LossWeights};
use motionseg::model::{Model, ModelConfig, Supervision};
use motionseg::pairwise::{enumerate_pairs, PairSet};

pub const EPS: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-4;
pub const PIPELINE_TOL: f64 = 1e-3;

pub struct Case {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl Case {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_relative_error < self.tolerance
    }
}

pub fn wave(shape: &[usize], phase: f64) -> Tensor {
    Tensor::from_fn(shape, |i| ((i as f64) * 0.61 + phase).sin() * 0.9 + 0.05)
}

fn positive(shape: &[usize], phase: f64) -> Tensor {
    Tensor::from_fn(shape, |i| 0.5 + ((i as f64) * 0.43 + phase).sin().abs())
}

fn probabilities(shape: &[usize], phase: f64) -> Tensor {
    Tensor::from_fn(shape, |i| 0.5 + 0.45 * ((i as f64) * 0.77 + phase).sin())
}

/// Weighted sum so every output coordinate has a distinct sensitivity.
fn reduce(g: &mut Graph, v: Var) -> Result<Var, TensorError> {
    let w = g.constant(Tensor::from_fn(g.value(v).shape(), |i| 0.3 + (i as f64 * 0.17).cos()));
    let p = g.mul(v, w)?;
    g.sum(p)
}

fn case<F>(out: &mut Vec<Case>, name: impl Into<String>, f: F, inputs: &[Tensor])
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    out.push(Case {
        name: name.into(),
        report: grad_check(f, inputs, EPS).expect("objective evaluates"),
        tolerance: OP_TOL,
    });
}

pub fn elementwise_cases() -> Vec<Case> {
    let mut out = Vec::new();
    let a = wave(&[2, 3, 3], 0.0);
    let b = wave(&[2, 3, 3], 1.1);
    for op in [Elementwise::Add, Elementwise::Sub, Elementwise::Mul] {
        case(
            &mut out,
            format!("{op:?}"),
            |g, v| {
                let y = g.elementwise(op, v[0], Some(v[1]))?;
                reduce(g, y)
            },
            &[a.clone(), b.clone()],
        );
    }
    for op in [Elementwise::Neg, Elementwise::Relu, Elementwise::Sigmoid, Elementwise::Exp] {
        case(
            &mut out,
            format!("{op:?}"),
            |g, v| {
                let y = g.elementwise(op, v[0], None)?;
                reduce(g, y)
            },
            &[a.clone()],
        );
    }
    case(
        &mut out,
        "Log",
        |g, v| {
            let y = g.log(v[0])?;
            reduce(g, y)
        },
        &[positive(&[2, 3, 3], 0.2)],
    );
    out
}

pub fn structural_cases() -> Vec<Case> {
    let mut out = Vec::new();
    let a = wave(&[2, 3, 4], 0.0);
    let b = wave(&[3, 3, 4], 2.0);
    case(
        &mut out,
        "channel_sum",
        |g, v| {
            let y = g.channel_sum(v[0], v[1])?;
            reduce(g, y)
        },
        &[a.clone(), wave(&[2, 3, 4], 0.7)],
    );
    case(
        &mut out,
        "channel_max",
        |g, v| {
            let y = g.channel_max(v[0], v[1])?;
            reduce(g, y)
        },
        &[a.clone(), wave(&[2, 3, 4], 0.7)],
    );
    case(
        &mut out,
        "scale",
        |g, v| {
            let y = g.scale(v[0], -2.5)?;
            reduce(g, y)
        },
        &[a.clone()],
    );
    case(
        &mut out,
        "sum",
        |g, v| {
            let y = g.sigmoid(v[0])?;
            g.sum(y)
        },
        &[a.clone()],
    );
    case(
        &mut out,
        "concat_channels + slice_channels",
        |g, v| {
            let y = g.concat_channels(v[0], v[1])?;
            let y = g.slice_channels(y, 1, 3)?;
            reduce(g, y)
        },
        &[a.clone(), b],
    );
    case(
        &mut out,
        "reshape + slice",
        |g, v| {
            let y = g.reshape(v[0], &[24])?;
            let y = g.slice(y, 5, 12)?;
            let y = g.reshape(y, &[3, 4])?;
            reduce(g, y)
        },
        &[a.clone()],
    );
    case(
        &mut out,
        "gather_location",
        |g, v| {
            let y = g.gather_location(v[0], 2, 1)?;
            reduce(g, y)
        },
        &[a],
    );
    out
}

pub fn convolution_cases() -> Vec<Case> {
    let mut out = Vec::new();
    for (k, stride, padding, h, w) in [
        (3, 1, 1, 7, 6),
        (3, 2, 1, 7, 6),
        (1, 1, 0, 7, 6),
        (3, 1, 0, 7, 6),
        (5, 2, 2, 7, 6),
        (3, 3, 1, 7, 6),
        (3, 2, 1, 8, 8),
        (3, 1, 1, 16, 16),
        (3, 2, 1, 16, 16),
    ] {
        let x = wave(&[3, h, w], 0.3);
        let wt = wave(&[4, 3, k, k], 1.7);
        let b = wave(&[4], 0.9);
        case(
            &mut out,
            format!("conv2d k{k} s{stride} p{padding} {h}x{w}"),
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], stride, padding)?;
                reduce(g, y)
            },
            &[x, wt, b],
        );
    }
    let x1 = wave(&[3, 8, 8], 0.0);
    let x2 = wave(&[3, 8, 8], 0.5);
    case(
        &mut out,
        "two streams sharing conv weights",
        |g, v| {
            let mut outs = Vec::new();
            for &x in &v[..2] {
                let h = g.conv2d(x, v[2], v[3], 1, 1)?;
                let h = g.relu(h)?;
                let h = g.conv2d(h, v[4], v[5], 2, 1)?;
                outs.push(g.sigmoid(h)?);
            }
            let y = g.channel_sum(outs[0], outs[1])?;
            reduce(g, y)
        },
        &[x1, x2, wave(&[4, 3, 3, 3], 1.0), wave(&[4], 0.1), wave(&[4, 4, 3, 3], 2.0), wave(&[4], 0.2)],
    );
    out
}

fn loss_err(op: &'static str) -> impl Fn(motionseg::losses::LossError) -> TensorError {
    move |_| TensorError::Arity { op }
}

pub fn loss_cases() -> Vec<Case> {
    let mut out = Vec::new();
    let m = probabilities(&[1, 6, 6], 0.4);
    let pairs = enumerate_pairs(GridBox::new(1, 1, 4, 5), (6, 6), 3, 2).expect("box fits");
    let n = pairs.len();
    let set = PairSet {
        labels: (0..n).map(|i| u8::from(i % 3 != 0)).collect(),
        pairs,
        s_color: vec![1.0; n],
        s_flow: vec![1.0; n],
    };
    case(&mut out, "pairwise loss", |g, v| pairwise_loss(g, v[0], &set).map_err(loss_err("pairwise")), &[m.clone()]);
    case(
        &mut out,
        "projection loss",
        |g, v| projection_loss(g, v[0], GridBox::new(1, 2, 5, 4)).map_err(loss_err("projection")),
        &[m],
    );
    let t = DetectionTargets::assign(&[PixelBox::new(2.0, 3.0, 13.0, 10.0), PixelBox::new(8.0, 1.0, 15.0, 15.0)], 4, 4, 4, 1.5);
    case(
        &mut out,
        "detection loss",
        |g, v| detection_loss(g, v[0], v[1], &t).map_err(loss_err("detection")),
        &[Tensor::from_fn(&[1, 4, 4], |i| (i as f64 * 0.7).sin()), Tensor::from_fn(&[4, 4, 4], |i| (i as f64 * 0.31).cos() * 2.0)],
    );
    out
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        widths: vec![3, 4, 4],
        mask_branch_channels: 4,
        mask_branch_layers: 2,
        c_mask: 3,
        tower_channels: 4,
        tower_layers: 1,
        dynamic_hidden: 4,
        ..ModelConfig::default()
    }
}

/// The whole per-image objective of a small model on a 16x16 input, at a
/// jittered parameter point.
pub fn pipeline_case() -> Case {
    let m = Model::new(tiny_model(), 11).expect("valid config");
    let image = Tensor::from_fn(&[3, 16, 16], |i| ((i as f64) * 0.37).sin() * 0.5);
    let flow = Tensor::from_fn(&[3, 16, 16], |i| ((i as f64) * 0.37 + 1.3).sin() * 0.5);
    let boxes = vec![PixelBox::new(2.0, 3.0, 11.0, 12.0)];
    let grid_boxes = vec![GridBox::from_pixel_box(&boxes[0], 4, 4, 4)];
    let pairs = enumerate_pairs(grid_boxes[0], (4, 4), 3, 1).expect("box fits");
    let n = pairs.len();
    let sup = Supervision {
        targets: DetectionTargets::assign(&boxes, 4, 4, 4, 1.5),
        boxes,
        grid_boxes,
        pair_sets: vec![PairSet {
            labels: (0..n).map(|i| u8::from(i % 2 == 0)).collect(),
            pairs,
            s_color: vec![1.0; n],
            s_flow: vec![1.0; n],
        }],
    };
    let params: Vec<Tensor> = m
        .params
        .iter()
        .enumerate()
        .map(|(k, (_, t))| {
            let mut t = t.clone();
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.05 * ((i * 31 + k * 7) as f64 * 0.37).sin();
            }
            t
        })
        .collect();
    let report = grad_check_sampled(
        |g, vars| {
            let l = m
                .sample_loss(g, vars, &image, &flow, &sup, 5, 10, &LossWeights::default())
                .map_err(|_| TensorError::Arity { op: "sample_loss" })?;
            Ok(l.total)
        },
        &params,
        EPS,
        6,
    )
    .expect("objective evaluates");
    Case {
        name: "full pipeline 16x16".into(),
        report,
        tolerance: PIPELINE_TOL,
    }
}

pub fn all_cases() -> Vec<Case> {
    let mut out = elementwise_cases();
    out.extend(structural_cases());
    out.extend(convolution_cases());
    out.extend(loss_cases());
    out.push(pipeline_case());
    out
}
