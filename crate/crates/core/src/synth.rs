//! Deterministic moving-shapes scenes with exact flow, boxes and masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BinaryMask, PixelBox};
use crate::imaging::{lab_to_srgb, srgb8_to_lab, srgb_to_lab, FlowField, Lab, RgbImage};

/// Category id of every generated instance.
pub const SHAPE_CATEGORY: u32 = 1;
/// Attempts before a scene is declared unsatisfiable.
pub const MAX_ATTEMPTS: usize = 100;
/// Width of the background ring used for measured contrast.
pub const RING_WIDTH: usize = 3;
/// Camouflage bound on the measured instance/background contrast.
pub const CAMOUFLAGE_DELTA_E: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("no valid scene for index {index} after {attempts} attempts")]
    Unsatisfiable { index: u64, attempts: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundMode {
    Flat,
    Textured,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub shapes: Vec<ShapeKind>,
    pub min_size: usize,
    pub max_size: usize,
    /// Bounds on `|velocity|` in pixels per frame; components are integers.
    pub min_speed: f64,
    pub max_speed: f64,
    pub background: BackgroundMode,
    /// Per-channel standard deviation of the texture, in 8-bit units.
    pub noise_sigma: f64,
    /// Texture correlation length in pixels.
    pub noise_scale: f64,
    pub camouflage: bool,
    pub occlusion: bool,
    /// Global background translation per frame.
    pub camera_pan: [i32; 2],
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            min_instances: 1,
            max_instances: 3,
            shapes: vec![ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Triangle],
            min_size: 14,
            max_size: 26,
            min_speed: 2.0,
            max_speed: 4.0,
            background: BackgroundMode::Textured,
            noise_sigma: 8.0,
            noise_scale: 32.0,
            camouflage: true,
            occlusion: false,
            camera_pan: [0, 0],
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.width < 32 || self.height < 32 {
            return bad("image extents must be at least 32");
        }
        if self.min_instances > self.max_instances || self.max_instances == 0 {
            return bad("instance range is empty");
        }
        if self.shapes.is_empty() {
            return bad("shape set is empty");
        }
        if self.min_size < 4 || self.min_size > self.max_size {
            return bad("size range is invalid");
        }
        if !(self.min_speed >= 0.0) || self.min_speed > self.max_speed {
            return bad("speed range is invalid");
        }
        // Keeping every shape whole in both frames is stricter than half-visible.
        let reach = self.max_size as f64 + self.max_speed.ceil() + self.camera_pan[0].unsigned_abs().max(self.camera_pan[1].unsigned_abs()) as f64;
        if reach >= self.width.min(self.height) as f64 {
            return bad("shapes and speeds do not fit inside the frame");
        }
        if !(self.noise_sigma >= 0.0) || !(self.noise_scale > 0.0) {
            return bad("noise parameters must be non-negative");
        }
        Ok(())
    }
}

/// One annotated instance of a generated scene.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceAnn {
    /// Visible mask in frame t.
    pub mask: BinaryMask,
    pub bbox: PixelBox,
    pub category_id: u32,
    pub shape: ShapeKind,
    pub velocity: [i32; 2],
    /// Measured Lab contrast against the surrounding background ring.
    pub delta_e: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub index: u64,
    pub frame_t: RgbImage,
    pub frame_t1: RgbImage,
    pub flow: FlowField,
    pub instances: Vec<InstanceAnn>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Smooth lattice value noise with unit per-pixel variance on average.
#[derive(Clone, Copy, Debug)]
struct ValueNoise {
    seed: u64,
    scale: f64,
    norm: f64,
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

impl ValueNoise {
    fn new(seed: u64, scale: f64) -> Self {
        // Interpolating iid lattice values shrinks the variance; undo it.
        let n = 64;
        let mean_sq: f64 = (0..n)
            .map(|i| {
                let s = smoothstep((i as f64 + 0.5) / n as f64);
                (1.0 - s).powi(2) + s * s
            })
            .sum::<f64>()
            / n as f64;
        Self {
            seed,
            scale,
            norm: 1.0 / mean_sq,
        }
    }

    fn lattice(&self, ix: i64, iy: i64, channel: u64) -> f64 {
        let h = splitmix(self.seed ^ splitmix((ix as u64) ^ splitmix((iy as u64).wrapping_add(channel << 40))));
        // uniform on [-sqrt(3), sqrt(3)] has unit variance
        ((h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) * 3f64.sqrt()
    }

    fn at(&self, x: f64, y: f64, channel: u64) -> f64 {
        let (fx, fy) = (x / self.scale, y / self.scale);
        let (x0, y0) = (fx.floor(), fy.floor());
        let (sx, sy) = (smoothstep(fx - x0), smoothstep(fy - y0));
        let (ix, iy) = (x0 as i64, y0 as i64);
        let v = |dx: i64, dy: i64| self.lattice(ix + dx, iy + dy, channel);
        let top = v(0, 0) * (1.0 - sx) + v(1, 0) * sx;
        let bottom = v(0, 1) * (1.0 - sx) + v(1, 1) * sx;
        (top * (1.0 - sy) + bottom * sy) * self.norm
    }
}

/// A textured colour field: base colour plus optional noise sampled at
/// `origin + (x, y)`.
#[derive(Clone, Copy, Debug)]
struct Texture {
    base: [f64; 3],
    noise: Option<ValueNoise>,
    sigma: f64,
    origin: [f64; 2],
}

impl Texture {
    fn colour(&self, x: f64, y: f64) -> [u8; 3] {
        let (x, y) = (x + self.origin[0], y + self.origin[1]);
        let mut out = [0u8; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            let n = self.noise.map_or(0.0, |nz| nz.at(x, y, ch as u64) * self.sigma);
            *o = (self.base[ch] * 255.0 + n).round().clamp(0.0, 255.0) as u8;
        }
        out
    }
}

#[derive(Clone, Debug)]
struct Shape {
    kind: ShapeKind,
    /// Extents in local coordinates, origin at the top-left corner.
    w: f64,
    h: f64,
    /// Triangle vertices in local coordinates.
    tri: [(f64, f64); 3],
}

impl Shape {
    fn contains(&self, lx: f64, ly: f64) -> bool {
        if lx < 0.0 || ly < 0.0 || lx >= self.w || ly >= self.h {
            return false;
        }
        match self.kind {
            ShapeKind::Rectangle => true,
            ShapeKind::Ellipse => {
                let (dx, dy) = ((lx - self.w / 2.0) / (self.w / 2.0), (ly - self.h / 2.0) / (self.h / 2.0));
                dx * dx + dy * dy <= 1.0
            }
            ShapeKind::Triangle => {
                let [a, b, c] = self.tri;
                let cross = |p: (f64, f64), q: (f64, f64)| (q.0 - p.0) * (ly - p.1) - (q.1 - p.1) * (lx - p.0);
                let (d1, d2, d3) = (cross(a, b), cross(b, c), cross(c, a));
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Object {
    shape: Shape,
    /// Integer top-left position in frame t.
    pos: [i64; 2],
    velocity: [i32; 2],
    texture: Texture,
}

impl Object {
    fn covers(&self, x: usize, y: usize, frame: i64) -> Option<(f64, f64)> {
        let lx = x as f64 + 0.5 - (self.pos[0] + frame * i64::from(self.velocity[0])) as f64;
        let ly = y as f64 + 0.5 - (self.pos[1] + frame * i64::from(self.velocity[1])) as f64;
        self.shape.contains(lx, ly).then_some((lx, ly))
    }

    fn bounds(&self, frame: i64) -> PixelBox {
        let x = (self.pos[0] + frame * i64::from(self.velocity[0])) as f64;
        let y = (self.pos[1] + frame * i64::from(self.velocity[1])) as f64;
        PixelBox::new(x, y, x + self.shape.w, y + self.shape.h)
    }
}

fn random_colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.25..0.75), rng.random_range(0.25..0.75), rng.random_range(0.25..0.75)]
}

/// A colour within `max_delta_e` of `reference` (in Lab) that stays in the
/// sRGB gamut, or a contrasting one when `camouflage` is false.
fn fill_colour(rng: &mut ChaCha8Rng, reference: [f64; 3], camouflage: bool) -> [f64; 3] {
    let lab = srgb_to_lab(reference);
    loop {
        if camouflage {
            let r = rng.random_range(0.0..3.0);
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let phi = rng.random_range(-1.0f64..1.0).acos();
            let candidate = Lab {
                l: lab.l + r * phi.cos(),
                a: lab.a + r * phi.sin() * theta.cos(),
                b: lab.b + r * phi.sin() * theta.sin(),
            };
            let rgb = lab_to_srgb(candidate);
            if rgb.iter().all(|c| (0.0..=1.0).contains(c)) {
                return rgb;
            }
        } else {
            let c = random_colour(rng);
            if srgb_to_lab(c).delta_e(lab) > 25.0 {
                return c;
            }
        }
    }
}

fn random_velocity(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> [i32; 2] {
    let m = cfg.max_speed.floor() as i32;
    loop {
        let v = [rng.random_range(-m..=m), rng.random_range(-m..=m)];
        let speed = f64::from(v[0]).hypot(f64::from(v[1]));
        if speed >= cfg.min_speed && speed <= cfg.max_speed {
            return v;
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Shape {
    let kind = cfg.shapes[rng.random_range(0..cfg.shapes.len())];
    let w = rng.random_range(cfg.min_size..=cfg.max_size) as f64;
    let h = rng.random_range(cfg.min_size..=cfg.max_size) as f64;
    let apex = rng.random_range(0.0..w);
    let tri = match rng.random_range(0..4) {
        0 => [(apex, 0.0), (w, h), (0.0, h)],
        1 => [(0.0, 0.0), (w, 0.0), (apex, h)],
        2 => [(0.0, apex * h / w), (w, 0.0), (w, h)],
        _ => [(0.0, 0.0), (w, apex * h / w), (0.0, h)],
    };
    Shape { kind, w, h, tri }
}

/// Mean Lab over the pixels where `select` holds.
fn mean_lab(frame: &RgbImage, select: impl Fn(usize, usize) -> bool) -> Option<Lab> {
    let (mut sum, mut n) = ([0.0; 3], 0usize);
    for r in 0..frame.height {
        for c in 0..frame.width {
            if select(r, c) {
                let lab = srgb8_to_lab(frame.at(r, c)).to_array();
                for k in 0..3 {
                    sum[k] += lab[k];
                }
                n += 1;
            }
        }
    }
    (n > 0).then(|| Lab {
        l: sum[0] / n as f64,
        a: sum[1] / n as f64,
        b: sum[2] / n as f64,
    })
}

/// Lab distance between an instance's mean colour and the mean colour of
/// background pixels within `ring` pixels of it (Chebyshev distance).
pub fn measure_delta_e(frame: &RgbImage, mask: &BinaryMask, occupied: &BinaryMask, ring: usize) -> Option<f64> {
    let inner = mean_lab(frame, |r, c| mask.at(r, c))?;
    let near = |r: usize, c: usize| {
        let (r0, r1) = (r.saturating_sub(ring), (r + ring).min(frame.height - 1));
        let (c0, c1) = (c.saturating_sub(ring), (c + ring).min(frame.width - 1));
        (r0..=r1).any(|rr| (c0..=c1).any(|cc| mask.at(rr, cc)))
    };
    let outer = mean_lab(frame, |r, c| !occupied.at(r, c) && near(r, c))?;
    Some(inner.delta_e(outer))
}

struct Scene {
    background: Texture,
    objects: Vec<Object>,
    pan: [i32; 2],
}

impl Scene {
    /// Index of the front-most object covering `(x, y)` in `frame`.
    fn top(&self, x: usize, y: usize, frame: i64) -> Option<(usize, (f64, f64))> {
        self.objects.iter().enumerate().rev().find_map(|(k, o)| o.covers(x, y, frame).map(|l| (k, l)))
    }

    fn render(&self, w: usize, h: usize, frame: i64) -> RgbImage {
        let mut img = RgbImage::filled(w, h, [0; 3]);
        for y in 0..h {
            for x in 0..w {
                let colour = match self.top(x, y, frame) {
                    Some((k, (lx, ly))) => self.objects[k].texture.colour(lx, ly),
                    None => {
                        let bx = x as f64 + 0.5 - (frame * i64::from(self.pan[0])) as f64;
                        let by = y as f64 + 0.5 - (frame * i64::from(self.pan[1])) as f64;
                        self.background.colour(bx, by)
                    }
                };
                img.set(y, x, colour);
            }
        }
        img
    }
}

fn attempt(rng: &mut ChaCha8Rng, cfg: &SceneConfig, index: u64) -> Option<SceneSample> {
    let (w, h) = (cfg.width, cfg.height);
    let sigma = if cfg.background == BackgroundMode::Textured { cfg.noise_sigma } else { 0.0 };
    let make_noise = |rng: &mut ChaCha8Rng| (sigma > 0.0).then(|| ValueNoise::new(rng.random(), cfg.noise_scale));
    let background = Texture {
        base: random_colour(rng),
        noise: make_noise(rng),
        sigma,
        origin: [0.0; 2],
    };
    let count = rng.random_range(cfg.min_instances..=cfg.max_instances);
    let mut objects: Vec<Object> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let shape = random_shape(rng, cfg);
            let velocity = random_velocity(rng, cfg);
            let lo = |v: i32| (-v).max(0) as i64;
            let hi = |v: i32, extent: usize, size: f64| extent as i64 - size as i64 - v.max(0) as i64;
            let (xr, yr) = ((lo(velocity[0]), hi(velocity[0], w, shape.w)), (lo(velocity[1]), hi(velocity[1], h, shape.h)));
            if xr.0 > xr.1 || yr.0 > yr.1 {
                continue;
            }
            let pos = [rng.random_range(xr.0..=xr.1), rng.random_range(yr.0..=yr.1)];
            let base = fill_colour(rng, background.base, cfg.camouflage);
            // A camouflaged object carries the background pattern it covers
            // in frame t; otherwise it gets its own pattern.
            let texture = if cfg.camouflage {
                Texture {
                    base,
                    origin: [pos[0] as f64, pos[1] as f64],
                    ..background
                }
            } else {
                Texture {
                    base,
                    noise: make_noise(rng),
                    sigma,
                    origin: [0.0; 2],
                }
            };
            let obj = Object {
                pos,
                velocity,
                texture,
                shape,
            };
            let clash = objects
                .iter()
                .any(|o| (0..2).any(|f| o.bounds(f).iou(&obj.bounds(f)) > 0.0) || o.bounds(0).iou(&obj.bounds(1)) > 0.0 || o.bounds(1).iou(&obj.bounds(0)) > 0.0);
            if cfg.occlusion || !clash {
                placed = Some(obj);
                break;
            }
        }
        objects.push(placed?);
    }
    let scene = Scene {
        background,
        objects,
        pan: cfg.camera_pan,
    };
    let frame_t = scene.render(w, h, 0);
    let frame_t1 = scene.render(w, h, 1);
    let mut flow = FlowField::zeros(w, h);
    let mut masks = vec![BinaryMask::empty(w, h); scene.objects.len()];
    let mut occupied = BinaryMask::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            match scene.top(x, y, 0) {
                Some((k, _)) => {
                    let v = scene.objects[k].velocity;
                    flow.set(y, x, [v[0] as f32, v[1] as f32]);
                    masks[k].set(y, x, true);
                    occupied.set(y, x, true);
                }
                None => flow.set(y, x, [cfg.camera_pan[0] as f32, cfg.camera_pan[1] as f32]),
            }
        }
    }
    let mut instances = Vec::with_capacity(masks.len());
    for (k, mask) in masks.into_iter().enumerate() {
        let full = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).filter(|&(x, y)| scene.objects[k].covers(x, y, 0).is_some()).count();
        // heavily occluded or degenerate instances make the scene invalid
        if mask.area() < 16 || (mask.area() as f64) < 0.5 * full as f64 {
            return None;
        }
        let delta_e = measure_delta_e(&frame_t, &mask, &occupied, RING_WIDTH)?;
        if cfg.camouflage && delta_e >= CAMOUFLAGE_DELTA_E {
            return None;
        }
        instances.push(InstanceAnn {
            bbox: mask.tight_box()?,
            mask,
            category_id: SHAPE_CATEGORY,
            shape: scene.objects[k].shape.kind,
            velocity: scene.objects[k].velocity,
            delta_e,
        });
    }
    Some(SceneSample {
        index,
        frame_t,
        frame_t1,
        flow,
        instances,
    })
}

/// Deterministic function of `(config.seed, stream, index)`. Distinct
/// streams give independent splits from one seed.
pub fn generate_sample_in_stream(cfg: &SceneConfig, stream: u64, index: u64) -> Result<SceneSample, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream.wrapping_shl(32) ^ index);
    for _ in 0..MAX_ATTEMPTS {
        if let Some(s) = attempt(&mut rng, cfg, index) {
            return Ok(s);
        }
    }
    Err(SynthError::Unsatisfiable {
        index,
        attempts: MAX_ATTEMPTS,
    })
}

pub fn generate_sample(cfg: &SceneConfig, index: u64) -> Result<SceneSample, SynthError> {
    generate_sample_in_stream(cfg, 0, index)
}

/// Fraction of positive-labelled pairs among pairs whose endpoints lie on
/// different sides of an instance boundary, under the given rule.
pub fn boundary_positive_rate(sample: &SceneSample, params: &crate::pairwise::SupervisionParams) -> Option<f64> {
    use crate::imaging::{flow_to_rgb, LabImage};
    use crate::pairwise::{enumerate_pairs, PairSet, SupervisionGrid};
    let lab = LabImage::from_rgb(&sample.frame_t);
    let flow_rgb = flow_to_rgb(&sample.flow, None);
    let (w, h) = (sample.frame_t.width, sample.frame_t.height);
    let grid = SupervisionGrid::resample(&lab, &flow_rgb, &sample.flow, h, w);
    let (mut crossing, mut positive) = (0usize, 0usize);
    for inst in &sample.instances {
        let gb = crate::geometry::GridBox::from_pixel_box(&inst.bbox, 1, h, w);
        let set = PairSet::build(gb, &grid, params).ok()?;
        debug_assert_eq!(set.pairs, enumerate_pairs(gb, (h, w), params.kernel_size, params.dilation).ok()?);
        for (p, &y) in set.pairs.iter().zip(&set.labels) {
            if inst.mask.at(p.first.0, p.first.1) != inst.mask.at(p.second.0, p.second.1) {
                crossing += 1;
                positive += usize::from(y);
            }
        }
    }
    (crossing > 0).then(|| positive as f64 / crossing as f64)
}
