//! Two-stream encoder with a shared backbone, per-stream mask branches, a
//! single-level anchor-free detection head and an instance-conditioned
//! dynamic mask head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Checkpoint, Graph, ParamId, ParamStore, Tensor, TensorError, Var};
use crate::geometry::{BinaryMask, GridBox, PixelBox};
use crate::imaging::{flow_to_rgb, FlowColorImage, FlowField, RgbImage};
use crate::losses::{self, DetectionTargets, LossError, LossWeights};
use crate::pairwise::PairSet;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("image is {image:?} but flow is {flow:?}")]
    Extents { image: Vec<usize>, flow: Vec<usize> },
    #[error("controller has {found} entries, head needs {expected}")]
    ControllerLength { expected: usize, found: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionFusion {
    Sum,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskFusion {
    Concat,
    Sum,
    Max,
}

/// Encoding fed to the flow stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowInput {
    /// Colour-wheel rendering of the flow field.
    Wheel,
    /// Constant zero-motion encoding; removes motion from the input.
    Neutral,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSpec {
    pub detection: DetectionFusion,
    pub mask: MaskFusion,
}

impl Default for FusionSpec {
    fn default() -> Self {
        Self {
            detection: DetectionFusion::Sum,
            mask: MaskFusion::Concat,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Backbone widths; stage `i` runs at stride `2^i`.
    pub widths: Vec<usize>,
    pub mask_branch_channels: usize,
    pub mask_branch_layers: usize,
    pub c_mask: usize,
    pub tower_channels: usize,
    pub tower_layers: usize,
    pub dynamic_hidden: usize,
    pub fusion: FusionSpec,
    /// Fuse flow-stream features into the detection head.
    pub detection_motion: bool,
    /// Feed the flow-stream mask branch to the dynamic head.
    pub mask_motion: bool,
    pub flow_input: FlowInput,
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Positive-location radius around box centres, in strides.
    pub center_radius: f64,
    /// Most instances receiving mask losses per image.
    pub max_instances: usize,
    pub max_detections: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 32],
            mask_branch_channels: 16,
            mask_branch_layers: 2,
            c_mask: 8,
            tower_channels: 32,
            tower_layers: 1,
            dynamic_hidden: 8,
            fusion: FusionSpec::default(),
            detection_motion: true,
            mask_motion: true,
            flow_input: FlowInput::Wheel,
            score_threshold: 0.3,
            nms_iou: 0.6,
            center_radius: 1.5,
            max_instances: 32,
            max_detections: 100,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return bad("widths needs at least two positive stages");
        }
        if [self.mask_branch_channels, self.c_mask, self.tower_channels, self.dynamic_hidden].contains(&0) {
            return bad("channel counts must be positive");
        }
        if self.mask_branch_layers == 0 {
            return bad("mask_branch_layers must be positive");
        }
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("score_threshold and nms_iou must lie in [0, 1]");
        }
        if !(self.center_radius > 0.0) || self.max_instances == 0 {
            return bad("center_radius and max_instances must be positive");
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        1 << (self.widths.len() - 1)
    }

    /// Channels entering the dynamic head, before the two coordinates.
    pub fn mask_in_channels(&self) -> usize {
        if self.mask_motion && self.fusion.mask == MaskFusion::Concat {
            2 * self.c_mask
        } else {
            self.c_mask
        }
    }

    pub fn controller_len(&self) -> usize {
        dynamic_param_count(self.mask_in_channels(), self.dynamic_hidden)
    }

    fn uses_flow_stream(&self) -> bool {
        self.detection_motion || self.mask_motion
    }
}

/// Image and flow-stream input tensors for a frame pair.
pub fn input_tensors(frame: &RgbImage, flow: &FlowField, mode: FlowInput) -> (Tensor, Tensor) {
    let (w, h) = (frame.width, frame.height);
    let image = rgb_to_tensor(w, h, |r, c| frame.at(r, c).map(|v| f64::from(v) / 255.0));
    let encoded = match mode {
        FlowInput::Wheel => flow_to_rgb(flow, None),
        FlowInput::Neutral => FlowColorImage::neutral(w, h),
    };
    (image, rgb_to_tensor(w, h, |r, c| encoded.at(r, c)))
}

/// Parameters of the three 1x1 layers `(in + 2) -> hidden -> hidden -> 1`.
pub fn dynamic_param_count(in_channels: usize, hidden: usize) -> usize {
    (in_channels + 2) * hidden + hidden + hidden * hidden + hidden + hidden + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Image,
    Flow,
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
}

impl ConvLayer {
    fn apply(&self, g: &mut Graph, leaves: &[Var], x: Var) -> Result<Var, TensorError> {
        g.conv2d(x, leaves[self.weight.0], leaves[self.bias.0], self.stride, self.padding)
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Features {
    pub det: Var,
    pub mask_img: Var,
    pub mask_flow: Option<Var>,
    pub mask: Var,
    pub logits: Var,
    pub ltrb: Var,
    pub controllers: Var,
}

/// Training inputs for one image at score-map resolution.
#[derive(Clone, Debug)]
pub struct Supervision {
    pub boxes: Vec<PixelBox>,
    pub grid_boxes: Vec<GridBox>,
    pub pair_sets: Vec<PairSet>,
    pub targets: DetectionTargets,
}

/// Scalar handles and values of one image's objective.
#[derive(Clone, Debug)]
pub struct SampleLoss {
    pub total: Var,
    pub detection: f64,
    pub projection: f64,
    pub pairwise: f64,
    pub n_pairs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: PixelBox,
    pub score: f64,
    pub location: (usize, usize),
    pub mask: BinaryMask,
    /// Score-map probabilities on the detection grid.
    pub soft_mask: Vec<f64>,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    backbone: Vec<ConvLayer>,
    mask_img: Vec<ConvLayer>,
    mask_flow: Vec<ConvLayer>,
    tower: Vec<ConvLayer>,
    cls: ConvLayer,
    reg: ConvLayer,
    ctrl: ConvLayer,
}

struct Init {
    rng: ChaCha8Rng,
    params: ParamStore,
}

impl Init {
    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        let d = Normal::new(0.0, std).expect("positive std");
        (0..n).map(|_| d.sample(&mut self.rng)).collect()
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, std: Option<f64>, bias: Vec<f64>) -> Result<ConvLayer, TensorError> {
        let std = std.unwrap_or_else(|| (2.0 / (cin * k * k) as f64).sqrt());
        let w = Tensor::new(vec![cout, cin, k, k], self.normal(cout * cin * k * k, std))?;
        let weight = self.params.add(format!("{name}.weight"), w)?;
        let bias = self.params.add(format!("{name}.bias"), Tensor::new(vec![cout], bias)?)?;
        Ok(ConvLayer {
            weight,
            bias,
            stride,
            padding: k / 2,
        })
    }

    fn conv3(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Result<ConvLayer, TensorError> {
        self.conv(name, cin, cout, 3, stride, None, vec![0.0; cout])
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: ParamStore::new(),
        };
        let mut backbone = Vec::new();
        let mut cin = 3;
        for (s, &w) in config.widths.iter().enumerate() {
            let stride = if s == 0 { 1 } else { 2 };
            backbone.push(init.conv3(&format!("backbone.s{s}.c0"), cin, w, stride)?);
            backbone.push(init.conv3(&format!("backbone.s{s}.c1"), w, w, 1)?);
            cin = w;
        }
        let top = cin;
        let branch = |init: &mut Init, name: &str| -> Result<Vec<ConvLayer>, TensorError> {
            let mut layers = Vec::new();
            let mut c = top;
            for l in 0..config.mask_branch_layers {
                layers.push(init.conv3(&format!("{name}.l{l}"), c, config.mask_branch_channels, 1)?);
                c = config.mask_branch_channels;
            }
            layers.push(init.conv3(&format!("{name}.out"), c, config.c_mask, 1)?);
            Ok(layers)
        };
        let mask_img = branch(&mut init, "mask_img")?;
        let mask_flow = if config.mask_motion { branch(&mut init, "mask_flow")? } else { Vec::new() };
        let mut tower = Vec::new();
        let mut c = top;
        for l in 0..config.tower_layers {
            tower.push(init.conv3(&format!("det.tower{l}"), c, config.tower_channels, 1)?);
            c = config.tower_channels;
        }
        let prior = -(99f64).ln();
        let cls = init.conv("det.cls", c, 1, 1, 1, Some(0.01), vec![prior])?;
        let reg = init.conv("det.box", c, 4, 1, 1, Some(0.01), vec![2.0; 4])?;
        let ctrl_bias = dynamic_head_init(&mut init, config.mask_in_channels(), config.dynamic_hidden);
        let ctrl = init.conv("det.controller", c, ctrl_bias.len(), 1, 1, Some(0.01), ctrl_bias)?;
        Ok(Self {
            config,
            params: init.params,
            backbone,
            mask_img,
            mask_flow,
            tower,
            cls,
            reg,
            ctrl,
        })
    }

    /// Backbone parameters used by `stream`. Both streams resolve to the
    /// same storage.
    pub fn backbone_params(&self, _stream: Stream) -> Vec<ParamId> {
        self.backbone.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    pub fn leaves(&self, g: &mut Graph) -> Vec<Var> {
        self.params.leaves(g)
    }

    fn run_backbone(&self, g: &mut Graph, leaves: &[Var], mut x: Var) -> Result<Var, TensorError> {
        for layer in &self.backbone {
            x = layer.apply(g, leaves, x)?;
            x = g.relu(x)?;
        }
        Ok(x)
    }

    fn run_branch(layers: &[ConvLayer], g: &mut Graph, leaves: &[Var], mut x: Var) -> Result<Var, TensorError> {
        let last = layers.len() - 1;
        for (i, layer) in layers.iter().enumerate() {
            x = layer.apply(g, leaves, x)?;
            if i < last {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    /// Backbone output of one stream.
    pub fn encode(&self, g: &mut Graph, leaves: &[Var], input: Var) -> Result<Var, TensorError> {
        self.run_backbone(g, leaves, input)
    }

    pub fn forward(&self, g: &mut Graph, leaves: &[Var], image: &Tensor, flow_rgb: &Tensor) -> Result<Features, ModelError> {
        if image.shape() != flow_rgb.shape() {
            return Err(ModelError::Extents {
                image: image.shape().to_vec(),
                flow: flow_rgb.shape().to_vec(),
            });
        }
        let x_img = g.constant(image.clone());
        let f_img = self.run_backbone(g, leaves, x_img)?;
        let f_flow = if self.config.uses_flow_stream() {
            let x_flow = g.constant(flow_rgb.clone());
            Some(self.run_backbone(g, leaves, x_flow)?)
        } else {
            None
        };
        let det = match (self.config.detection_motion, f_flow) {
            (true, Some(ff)) => fuse_detection(g, f_img, ff, self.config.fusion.detection)?,
            _ => f_img,
        };
        let mask_img = Self::run_branch(&self.mask_img, g, leaves, f_img)?;
        let mask_flow = match (self.config.mask_motion, f_flow) {
            (true, Some(ff)) => Some(Self::run_branch(&self.mask_flow, g, leaves, ff)?),
            _ => None,
        };
        let mask = match mask_flow {
            Some(mf) => fuse_mask(g, mask_img, mf, self.config.fusion.mask)?,
            None => mask_img,
        };
        let mut t = det;
        for layer in &self.tower {
            t = layer.apply(g, leaves, t)?;
            t = g.relu(t)?;
        }
        let logits = self.cls.apply(g, leaves, t)?;
        let ltrb = self.reg.apply(g, leaves, t)?;
        let controllers = self.ctrl.apply(g, leaves, t)?;
        Ok(Features {
            det,
            mask_img,
            mask_flow,
            mask,
            logits,
            ltrb,
            controllers,
        })
    }

    /// Pixel-space centre of grid cell `(row, col)`.
    pub fn cell_centre(&self, row: usize, col: usize) -> (f64, f64) {
        let s = self.config.stride() as f64;
        ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }

    /// Score map for the instance detected at `location`.
    pub fn instance_mask(&self, g: &mut Graph, features: &Features, location: (usize, usize), image_hw: (usize, usize)) -> Result<Var, ModelError> {
        let controller = g.gather_location(features.controllers, location.0, location.1)?;
        let centre = self.cell_centre(location.0, location.1);
        dynamic_mask_head(g, features.mask, controller, centre, self.config.stride(), image_hw, self.config.dynamic_hidden)
    }

    /// Full objective for one image.
    pub fn sample_loss(
        &self,
        g: &mut Graph,
        leaves: &[Var],
        image: &Tensor,
        flow_rgb: &Tensor,
        sup: &Supervision,
        step: usize,
        warmup_steps: usize,
        weights: &LossWeights,
    ) -> Result<SampleLoss, ModelError> {
        let (_, h, w) = image.chw()?;
        let f = self.forward(g, leaves, image, flow_rgb)?;
        let det = losses::detection_loss(g, f.logits, f.ltrb, &sup.targets)?;
        let instances = self.select_instances(&sup.targets, &sup.boxes);
        let mut proj_terms = Vec::with_capacity(instances.len());
        let mut pair_terms = Vec::with_capacity(instances.len());
        let mut n_pairs = 0;
        for &(loc, k) in &instances {
            let m = self.instance_mask(g, &f, loc, (h, w))?;
            proj_terms.push(losses::projection_loss(g, m, sup.grid_boxes[k])?);
            if !sup.pair_sets[k].is_empty() {
                pair_terms.push(losses::pairwise_loss(g, m, &sup.pair_sets[k])?);
                n_pairs += sup.pair_sets[k].len();
            }
        }
        let proj = mean_of(g, &proj_terms)?;
        let pair = mean_of(g, &pair_terms)?;
        let (dv, pv, qv) = (scalar(g, det), scalar(g, proj), scalar(g, pair));
        let total = losses::total_loss(g, [det, proj, pair], step, warmup_steps, weights)?;
        Ok(SampleLoss {
            total,
            detection: dv,
            projection: pv,
            pairwise: qv,
            n_pairs,
        })
    }

    /// Positive locations that receive mask losses, nearest to their box
    /// centre first, capped at `max_instances`.
    pub fn select_instances(&self, targets: &DetectionTargets, boxes: &[PixelBox]) -> Vec<((usize, usize), usize)> {
        let mut pos: Vec<(f64, usize, usize)> = targets
            .positives()
            .map(|(i, k)| {
                let (x, y) = self.cell_centre(i / targets.grid_w, i % targets.grid_w);
                let (cx, cy) = boxes[k].center();
                ((x - cx).powi(2) + (y - cy).powi(2), i, k)
            })
            .collect();
        pos.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        pos.truncate(self.config.max_instances);
        pos.sort_by_key(|p| p.1);
        pos.into_iter().map(|(_, i, k)| ((i / targets.grid_w, i % targets.grid_w), k)).collect()
    }

    /// Thresholded, non-maximum-suppressed detections with full-resolution
    /// masks.
    pub fn predict(&self, image: &Tensor, flow_rgb: &Tensor) -> Result<Vec<Detection>, ModelError> {
        let (_, h, w) = image.chw()?;
        let mut g = Graph::new();
        let leaves: Vec<Var> = self.params.iter().map(|(_, t)| g.constant(t.clone())).collect();
        let f = self.forward(&mut g, &leaves, image, flow_rgb)?;
        let (_, gh, gw) = g.value(f.logits).chw()?;
        let candidates = decode_boxes(
            g.value(f.logits).data(),
            g.value(f.ltrb).data(),
            (gh, gw),
            self.config.stride(),
            self.config.score_threshold,
        );
        let mut candidates: Vec<_> = candidates
            .into_iter()
            .map(|(loc, b, s)| (loc, b.clamp_to(w, h), s))
            .collect();
        candidates.truncate(self.config.max_detections.max(1) * 4);
        let keep = nms(&candidates.iter().map(|c| (c.1, c.2)).collect::<Vec<_>>(), self.config.nms_iou);
        let mut out = Vec::new();
        for i in keep.into_iter().take(self.config.max_detections) {
            let (loc, bbox, score) = candidates[i];
            let m = self.instance_mask(&mut g, &f, loc, (h, w))?;
            let soft = g.value(m).data().to_vec();
            let up = upsample_bilinear(&soft, gh, gw, h, w);
            let mask = BinaryMask {
                width: w,
                height: h,
                data: up.iter().map(|&p| p >= 0.5).collect(),
            };
            out.push(Detection {
                bbox,
                score,
                location: loc,
                mask,
                soft_mask: soft,
            });
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (name, t) in self.params.iter() {
            ck.push(name, t.clone());
        }
        ck
    }

    /// Loads every parameter by name; extra records are ignored.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<(), ModelError> {
        self.params.load_from(ck.records.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(())
    }
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).item().unwrap_or(f64::NAN)
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var, TensorError> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(g.constant(Tensor::scalar(0.0)));
    };
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// Initial dynamic-head parameters: He-scaled weights, zero biases.
fn dynamic_head_init(init: &mut Init, in_channels: usize, hidden: usize) -> Vec<f64> {
    let c0 = in_channels + 2;
    let mut v = init.normal(c0 * hidden, (2.0 / c0 as f64).sqrt());
    v.extend(vec![0.0; hidden]);
    v.extend(init.normal(hidden * hidden, (2.0 / hidden as f64).sqrt()));
    v.extend(vec![0.0; hidden]);
    v.extend(init.normal(hidden, (1.0 / hidden as f64).sqrt()));
    v.push(0.0);
    v
}

pub fn fuse_detection(g: &mut Graph, img: Var, flow: Var, mode: DetectionFusion) -> Result<Var, TensorError> {
    match mode {
        DetectionFusion::Sum => g.channel_sum(img, flow),
        DetectionFusion::Max => g.channel_max(img, flow),
    }
}

pub fn fuse_mask(g: &mut Graph, img: Var, flow: Var, mode: MaskFusion) -> Result<Var, TensorError> {
    match mode {
        MaskFusion::Concat => g.concat_channels(img, flow),
        MaskFusion::Sum => g.channel_sum(img, flow),
        MaskFusion::Max => g.channel_max(img, flow),
    }
}

/// Relative coordinates `((x - cx) / scale, (y - cy) / scale)` of every
/// cell centre, with `scale` half the image diagonal.
pub fn relative_coords(grid: (usize, usize), stride: usize, centre: (f64, f64), image_hw: (usize, usize)) -> Tensor {
    let (gh, gw) = grid;
    let scale = 0.5 * (image_hw.0 as f64).hypot(image_hw.1 as f64);
    let s = stride as f64;
    Tensor::from_fn(&[2, gh, gw], |i| {
        let (ch, r, c) = (i / (gh * gw), i / gw % gh, i % gw);
        if ch == 0 {
            ((c as f64 + 0.5) * s - centre.0) / scale
        } else {
            ((r as f64 + 0.5) * s - centre.1) / scale
        }
    })
}

/// Three 1x1 layers whose weights are read from `controller`, applied to
/// `f_mask` with two relative-coordinate channels appended. Returns the
/// sigmoid score map `1xHxW`.
pub fn dynamic_mask_head(
    g: &mut Graph,
    f_mask: Var,
    controller: Var,
    centre: (f64, f64),
    stride: usize,
    image_hw: (usize, usize),
    hidden: usize,
) -> Result<Var, ModelError> {
    let (cin, gh, gw) = g.value(f_mask).chw()?;
    let expected = dynamic_param_count(cin, hidden);
    let found = g.value(controller).numel();
    if found != expected {
        return Err(ModelError::ControllerLength { expected, found });
    }
    let coords = g.constant(relative_coords((gh, gw), stride, centre, image_hw));
    let mut x = g.concat_channels(f_mask, coords)?;
    let dims = [(cin + 2, hidden), (hidden, hidden), (hidden, 1)];
    let mut offset = 0;
    for (i, &(c, o)) in dims.iter().enumerate() {
        let w = g.slice(controller, offset, c * o)?;
        let w = g.reshape(w, &[o, c, 1, 1])?;
        offset += c * o;
        let b = g.slice(controller, offset, o)?;
        offset += o;
        x = g.conv2d(x, w, b, 1, 0)?;
        if i + 1 < dims.len() {
            x = g.relu(x)?;
        }
    }
    Ok(g.sigmoid(x)?)
}

/// Locations with objectness above `threshold`, as `(location, box,
/// score)` sorted by descending score with ties broken by location index.
pub fn decode_boxes(logits: &[f64], ltrb: &[f64], grid: (usize, usize), stride: usize, threshold: f64) -> Vec<((usize, usize), PixelBox, f64)> {
    let (gh, gw) = grid;
    let plane = gh * gw;
    let s = stride as f64;
    let mut out: Vec<_> = (0..plane)
        .filter_map(|i| {
            let score = crate::autodiff::sigmoid(logits[i]);
            if score <= threshold {
                return None;
            }
            let (r, c) = (i / gw, i % gw);
            let (x, y) = ((c as f64 + 0.5) * s, (r as f64 + 0.5) * s);
            let d = |k: usize| ltrb[k * plane + i].max(0.0) * s;
            Some(((r, c), PixelBox::new(x - d(0), y - d(1), x + d(2), y + d(3)), score))
        })
        .collect();
    out.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0).cmp(&b.0)));
    out
}

/// Greedy suppression over boxes already sorted by descending score.
/// Returns kept indices in order.
pub fn nms(boxes: &[(PixelBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for (i, (b, _)) in boxes.iter().enumerate() {
        if keep.iter().all(|&k| boxes[k].0.iou(b) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

/// Bilinear resampling of a `gh x gw` map to `h x w` with cell-centre
/// alignment and edge clamping.
pub fn upsample_bilinear(map: &[f64], gh: usize, gw: usize, h: usize, w: usize) -> Vec<f64> {
    let axis = |i: usize, n_out: usize, n_in: usize| {
        let pos = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let (r0, r1, fr) = axis(r, h, gh);
        for c in 0..w {
            let (c0, c1, fc) = axis(c, w, gw);
            let top = map[r0 * gw + c0] * (1.0 - fc) + map[r0 * gw + c1] * fc;
            let bottom = map[r1 * gw + c0] * (1.0 - fc) + map[r1 * gw + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

/// Maps an 8-bit RGB triple image to a centred `3xHxW` tensor in
/// `[-0.5, 0.5]`.
pub fn rgb_to_tensor(width: usize, height: usize, pixel: impl Fn(usize, usize) -> [f64; 3]) -> Tensor {
    let plane = width * height;
    Tensor::from_fn(&[3, height, width], |i| {
        let (ch, r, c) = (i / plane, i / width % height, i % width);
        pixel(r, c)[ch] - 0.5
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_sampled;

    fn tiny() -> ModelConfig {
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

    fn input(h: usize, w: usize, phase: f64) -> Tensor {
        Tensor::from_fn(&[3, h, w], |i| ((i as f64) * 0.37 + phase).sin() * 0.5)
    }

    #[test]
    fn controller_lengths() {
        assert_eq!(dynamic_param_count(8, 8), 169);
        assert_eq!(dynamic_param_count(16, 8), 233);
        let cfg = ModelConfig::default();
        assert_eq!(cfg.mask_in_channels(), 16);
        assert_eq!(cfg.controller_len(), 233);
        let sum = ModelConfig {
            fusion: FusionSpec {
                mask: MaskFusion::Sum,
                ..FusionSpec::default()
            },
            ..ModelConfig::default()
        };
        assert_eq!(sum.controller_len(), 169);
    }

    #[test]
    fn sharing_keeps_parameter_count_of_one_stream() {
        let full = Model::new(ModelConfig::default(), 1).unwrap();
        let single = Model::new(
            ModelConfig {
                detection_motion: false,
                mask_motion: false,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap();
        let count = |m: &Model| -> usize { m.backbone_params(Stream::Image).iter().map(|&id| m.params.get(id).numel()).sum() };
        assert_eq!(count(&full), count(&single));
        assert_eq!(full.backbone_params(Stream::Image), full.backbone_params(Stream::Flow));
    }

    #[test]
    fn identical_inputs_give_identical_stream_features() {
        let m = Model::new(tiny(), 3).unwrap();
        let mut g = Graph::new();
        let leaves = m.leaves(&mut g);
        let x = input(8, 8, 0.0);
        let a = g.constant(x.clone());
        let b = g.constant(x);
        let fa = m.encode(&mut g, &leaves, a).unwrap();
        let fb = m.encode(&mut g, &leaves, b).unwrap();
        assert_eq!(g.value(fa), g.value(fb));
    }

    #[test]
    fn sum_fusion_is_commutative() {
        let m = Model::new(tiny(), 4).unwrap();
        let (x, y) = (input(8, 8, 0.0), input(8, 8, 1.0));
        let mut g = Graph::new();
        let leaves = m.leaves(&mut g);
        let f1 = m.forward(&mut g, &leaves, &x, &y).unwrap();
        let f2 = m.forward(&mut g, &leaves, &y, &x).unwrap();
        assert_eq!(g.value(f1.det), g.value(f2.det));
        assert_ne!(g.value(f1.mask), g.value(f2.mask));
    }

    #[test]
    fn max_fusion_identity() {
        let mut g = Graph::new();
        let zero = g.constant(Tensor::zeros(&[2, 2, 2]));
        let f = g.constant(Tensor::from_fn(&[2, 2, 2], |i| i as f64));
        let fused = fuse_detection(&mut g, zero, f, DetectionFusion::Max).unwrap();
        assert_eq!(g.value(fused), g.value(f));
        let sum = fuse_mask(&mut g, zero, f, MaskFusion::Sum).unwrap();
        assert_eq!(g.value(sum), g.value(f));
        let cat = fuse_mask(&mut g, zero, f, MaskFusion::Concat).unwrap();
        assert_eq!(g.value(cat).shape(), &[4, 2, 2]);
    }

    #[test]
    fn mask_branch_shapes() {
        let m = Model::new(tiny(), 5).unwrap();
        let mut g = Graph::new();
        let leaves = m.leaves(&mut g);
        let f = m.forward(&mut g, &leaves, &input(16, 16, 0.0), &input(16, 16, 2.0)).unwrap();
        assert_eq!(g.value(f.mask_img).shape(), &[3, 4, 4]);
        assert_eq!(g.value(f.mask).shape(), &[6, 4, 4]);
        assert_eq!(g.value(f.controllers).shape(), &[m.config.controller_len(), 4, 4]);
        let mut g = Graph::new();
        let leaves = m.leaves(&mut g);
        let x = input(16, 16, 0.0);
        assert!(matches!(m.forward(&mut g, &leaves, &x, &input(8, 8, 0.0)), Err(ModelError::Extents { .. })));
    }

    #[test]
    fn mask_branch_is_linear_at_zero() {
        let mut m = Model::new(tiny(), 6).unwrap();
        for id in m.params.ids().collect::<Vec<_>>() {
            if m.params.name(id).ends_with(".bias") {
                m.params.get_mut(id).data_mut().fill(0.0);
            }
        }
        let mut g = Graph::new();
        let leaves = m.leaves(&mut g);
        let f = m.forward(&mut g, &leaves, &Tensor::zeros(&[3, 8, 8]), &Tensor::zeros(&[3, 8, 8])).unwrap();
        assert!(g.value(f.mask).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_controller_gives_half() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::from_fn(&[8, 4, 4], |i| i as f64 * 0.1));
        let c = g.constant(Tensor::zeros(&[169]));
        let m = dynamic_mask_head(&mut g, f, c, (8.0, 8.0), 4, (16, 16), 8).unwrap();
        assert!(g.value(m).data().iter().all(|&v| v == 0.5));
        let short = g.constant(Tensor::zeros(&[168]));
        assert!(matches!(
            dynamic_mask_head(&mut g, f, short, (8.0, 8.0), 4, (16, 16), 8),
            Err(ModelError::ControllerLength { expected: 169, found: 168 })
        ));
    }

    #[test]
    fn centre_translation_shifts_coordinates() {
        let a = relative_coords((6, 6), 4, (10.0, 10.0), (24, 24));
        let b = relative_coords((6, 6), 4, (14.0, 18.0), (24, 24));
        // shifting the centre by one cell right and two down
        for r in 0..4 {
            for c in 0..5 {
                for ch in 0..2 {
                    assert!((a.at3(ch, r, c) - b.at3(ch, r + 2, c + 1)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn distinct_controllers_distinct_maps() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::from_fn(&[8, 4, 4], |i| (i as f64 * 0.7).sin()));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = Normal::new(0.0, 0.5).unwrap();
        let c1 = g.constant(Tensor::from_fn(&[169], |_| d.sample(&mut rng)));
        let c2 = g.constant(Tensor::from_fn(&[169], |_| d.sample(&mut rng)));
        let m1 = dynamic_mask_head(&mut g, f, c1, (8.0, 8.0), 4, (16, 16), 8).unwrap();
        let m2 = dynamic_mask_head(&mut g, f, c2, (8.0, 8.0), 4, (16, 16), 8).unwrap();
        assert_ne!(g.value(m1), g.value(m2));
    }

    #[test]
    fn nms_and_threshold() {
        let b = PixelBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[(b, 0.9), (b, 0.8)], 0.6), vec![0]);
        assert_eq!(nms(&[(b, 0.9), (PixelBox::new(20.0, 20.0, 30.0, 30.0), 0.8)], 0.6), vec![0, 1]);
        let logits = vec![-5.0; 4];
        assert!(decode_boxes(&logits, &[1.0; 16], (2, 2), 4, 0.3).is_empty());
        let dets = decode_boxes(&[3.0, -5.0, -5.0, 0.0], &[1.0; 16], (2, 2), 4, 0.3);
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].1, PixelBox::new(-2.0, -2.0, 6.0, 6.0));
    }

    #[test]
    fn bilinear_upsampling() {
        let up = upsample_bilinear(&[0.0, 1.0], 1, 2, 1, 4);
        assert_eq!(up, vec![0.0, 0.25, 0.75, 1.0]);
        assert_eq!(upsample_bilinear(&[0.3; 4], 2, 2, 8, 8), vec![0.3; 64]);
    }

    #[test]
    fn end_to_end_gradient_check() {
        let m = Model::new(tiny(), 11).unwrap();
        let image = input(16, 16, 0.0);
        let flow = input(16, 16, 1.3);
        let boxes = vec![PixelBox::new(2.0, 3.0, 11.0, 12.0)];
        let grid_boxes = vec![GridBox::from_pixel_box(&boxes[0], 4, 4, 4)];
        let pairs = crate::pairwise::enumerate_pairs(grid_boxes[0], (4, 4), 3, 1).unwrap();
        let labels = (0..pairs.len()).map(|i| u8::from(i % 2 == 0)).collect();
        let n = pairs.len();
        let sup = Supervision {
            targets: DetectionTargets::assign(&boxes, 4, 4, 4, 1.5),
            boxes,
            grid_boxes,
            pair_sets: vec![PairSet {
                pairs,
                labels,
                s_color: vec![1.0; n],
                s_flow: vec![1.0; n],
            }],
        };
        // jittered off the initialisation
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
            1e-5,
            6,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-3, "{report:?}");
        assert!(report.checked > 50);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::new(tiny(), 12).unwrap();
        let mut other = Model::new(tiny(), 13).unwrap();
        other.load_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(
            m.params.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>(),
            other.params.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>()
        );
    }
}
