//! Procedural video/text grounding samples with exact groundtruth.
//!
//! Every sample renders `n_objects` coloured shapes on a black canvas. One of
//! them is the target: it exists only inside the groundtruth span and follows
//! a kinematic program (move, grow, shrink, stay). Distractors are visible on
//! every frame and differ from the target in at least one of colour, shape or
//! action. The query is always `"the <color> <shape> that <action>"`.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use alloc::{borrow::ToOwned, format};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Kinematic program followed by an object while it is visible.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    MoveRight,
    MoveLeft,
    MoveUp,
    MoveDown,
    Grow,
    Shrink,
    Stay,
}

impl Action {
    pub const ALL: [Action; 7] = [
        Action::MoveRight,
        Action::MoveLeft,
        Action::MoveUp,
        Action::MoveDown,
        Action::Grow,
        Action::Shrink,
        Action::Stay,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            Action::MoveRight => "moves right",
            Action::MoveLeft => "moves left",
            Action::MoveUp => "moves up",
            Action::MoveDown => "moves down",
            Action::Grow => "grows",
            Action::Shrink => "shrinks",
            Action::Stay => "stays",
        }
    }

    /// The word that carries the motion attribute ("right" for "moves right").
    pub fn attribute_word(self) -> &'static str {
        self.phrase().rsplit(' ').next().unwrap()
    }

    pub fn from_phrase(s: &str) -> Option<Action> {
        Self::ALL.iter().copied().find(|a| a.phrase() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Diamond,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Square,
        ShapeKind::Circle,
        ShapeKind::Triangle,
        ShapeKind::Diamond,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Diamond => "diamond",
        }
    }

    pub fn from_name(s: &str) -> Option<ShapeKind> {
        Self::ALL.iter().copied().find(|k| k.name() == s)
    }

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of half-size `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
            // apex at the top, base on the bottom edge of the bounding square
            ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= 0.5 * (dy + r),
        }
    }
}

/// RGB for the supported colour words. All components are exact in `f32`.
pub fn color_rgb(name: &str) -> Option<[f64; 3]> {
    Some(match name {
        "red" => [1.0, 0.0, 0.0],
        "green" => [0.0, 1.0, 0.0],
        "blue" => [0.0, 0.0, 1.0],
        "yellow" => [1.0, 1.0, 0.0],
        "magenta" => [1.0, 0.0, 1.0],
        "cyan" => [0.0, 1.0, 1.0],
        "white" => [1.0, 1.0, 1.0],
        "orange" => [1.0, 0.5, 0.0],
        "purple" => [0.5, 0.0, 1.0],
        "gray" => [0.5, 0.5, 0.5],
        _ => return None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub frame_count: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub n_objects: usize,
    pub colors: Vec<String>,
    pub shapes: Vec<String>,
    /// Action phrases, e.g. `"moves right"`.
    pub actions: Vec<String>,
    pub target_span_ratio: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frame_count: 8,
            frame_height: 32,
            frame_width: 32,
            n_objects: 2,
            colors: ["red", "green", "blue", "yellow"].iter().map(|s| s.to_string()).collect(),
            shapes: ["square", "circle", "triangle"].iter().map(|s| s.to_string()).collect(),
            actions: ["moves right", "moves left", "grows", "shrinks"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            target_span_ratio: 0.5,
            seed: 0,
        }
    }
}

/// Parsed, validated scene pools.
struct Pools {
    colors: Vec<String>,
    shapes: Vec<ShapeKind>,
    actions: Vec<Action>,
}

impl SceneConfig {
    pub fn span_len(&self) -> usize {
        libm::round(self.target_span_ratio * self.frame_count as f64) as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.pools().map(|_| ())
    }

    fn pools(&self) -> Result<Pools> {
        if self.frame_count < 4 {
            return Err(Error::Config(format!("frame_count {} < 4", self.frame_count)));
        }
        if self.frame_height < 8 || self.frame_width < 8 {
            return Err(Error::Config("frames must be at least 8x8".into()));
        }
        if self.n_objects == 0 {
            return Err(Error::Config("n_objects must be >= 1".into()));
        }
        if !(self.target_span_ratio > 0.0 && self.target_span_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "target_span_ratio {} outside (0, 1]",
                self.target_span_ratio
            )));
        }
        if self.span_len() == 0 {
            return Err(Error::Config("target span rounds to zero frames".into()));
        }
        if self.colors.is_empty() || self.shapes.is_empty() || self.actions.is_empty() {
            return Err(Error::Config("attribute pools must be nonempty".into()));
        }
        for c in &self.colors {
            if color_rgb(c).is_none() {
                return Err(Error::Config(format!("unknown color {:?}", c)));
            }
        }
        let shapes = self
            .shapes
            .iter()
            .map(|s| ShapeKind::from_name(s).ok_or_else(|| Error::Config(format!("unknown shape {:?}", s))))
            .collect::<Result<Vec<_>>>()?;
        let actions = self
            .actions
            .iter()
            .map(|s| Action::from_phrase(s).ok_or_else(|| Error::Config(format!("unknown action {:?}", s))))
            .collect::<Result<Vec<_>>>()?;
        if has_duplicates(&self.colors) || has_duplicates(&shapes) || has_duplicates(&actions) {
            return Err(Error::Config("attribute pools contain duplicates".into()));
        }
        if self.n_objects > 1 && self.colors.len() == 1 && shapes.len() == 1 && actions.len() == 1 {
            return Err(Error::Config(
                "attribute pools too small: no distractor can differ from the target".into(),
            ));
        }
        Ok(Pools {
            colors: self.colors.clone(),
            shapes,
            actions,
        })
    }

    /// Sorted appearance vocabulary implied by the colour pool.
    pub fn appearance_words(&self) -> Vec<String> {
        let mut w = self.colors.clone();
        w.sort();
        w
    }

    /// Sorted motion vocabulary implied by the action pool.
    pub fn motion_words(&self) -> Vec<String> {
        let mut w: Vec<String> = self
            .actions
            .iter()
            .filter_map(|a| Action::from_phrase(a))
            .map(|a| a.attribute_word().to_string())
            .collect();
        w.sort();
        w.dedup();
        w
    }

    fn geometry(&self) -> Geometry {
        let side = self.frame_height.min(self.frame_width) as f64;
        let min_r = (side * 0.08).max(1.5);
        let max_r = side * 0.2;
        let steps = (self.frame_count - 1) as f64;
        Geometry {
            min_r,
            max_r,
            grow_rate: 0.8 * (max_r - min_r) / steps,
            speed: 0.8 * (side - 2.0 * max_r) / steps,
        }
    }
}

fn has_duplicates<T: PartialEq>(v: &[T]) -> bool {
    v.iter().enumerate().any(|(i, x)| v[..i].contains(x))
}

struct Geometry {
    min_r: f64,
    max_r: f64,
    grow_rate: f64,
    speed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub color: String,
    pub shape: ShapeKind,
    pub action: Action,
    pub is_target: bool,
    /// Inclusive visible frame range.
    pub first_frame: usize,
    pub last_frame: usize,
    /// Per visible frame: (cx, cy, half-size) in pixels.
    pub track: Vec<(f64, f64, f64)>,
}

impl SceneObject {
    pub fn attributes(&self) -> (&str, ShapeKind, Action) {
        (&self.color, self.shape, self.action)
    }

    pub fn visible_at(&self, frame: usize) -> Option<(f64, f64, f64)> {
        if frame < self.first_frame || frame > self.last_frame {
            return None;
        }
        Some(self.track[frame - self.first_frame])
    }
}

/// Normalised `(cx, cy, w, h)` box.
pub type BoxCxCyWh = [f64; 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoSample {
    /// `[N_v, H_px, W_px, 3]` in `[0, 1]`.
    pub frames: Tensor,
    pub text: String,
    /// One box per frame of `gt_span`, in frame order.
    pub gt_boxes: Vec<BoxCxCyWh>,
    /// Inclusive frame indices.
    pub gt_span: (usize, usize),
    /// Multi-hot over [`SceneConfig::appearance_words`].
    pub appearance_label: Vec<f64>,
    /// Multi-hot over [`SceneConfig::motion_words`].
    pub motion_label: Vec<f64>,
    /// Token index range of the subject noun.
    pub subject_token_span: (usize, usize),
    pub objects: Vec<SceneObject>,
}

impl VideoSample {
    pub fn frame_count(&self) -> usize {
        self.frames.dim(0)
    }

    /// Groundtruth box at `frame`, if the frame is inside the span.
    pub fn gt_box(&self, frame: usize) -> Option<BoxCxCyWh> {
        let (s, e) = self.gt_span;
        (frame >= s && frame <= e).then(|| self.gt_boxes[frame - s])
    }

    pub fn target(&self) -> &SceneObject {
        self.objects.iter().find(|o| o.is_target).expect("sample without target")
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-sample seed used by [`generate_corpus`].
pub fn derived_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5EED)))
}

fn trajectory(
    rng: &mut ChaCha8Rng,
    geo: &Geometry,
    action: Action,
    frames: usize,
    width: f64,
    height: f64,
) -> Vec<(f64, f64, f64)> {
    let steps = (frames - 1) as f64;
    let (r0, dr) = match action {
        Action::Grow => (
            rng.random_range(geo.min_r..=geo.max_r - geo.grow_rate * steps),
            geo.grow_rate,
        ),
        Action::Shrink => (
            rng.random_range(geo.min_r + geo.grow_rate * steps..=geo.max_r),
            -geo.grow_rate,
        ),
        _ => (rng.random_range(geo.min_r..=geo.min_r + 0.5 * (geo.max_r - geo.min_r)), 0.0),
    };
    let r_max = r0.max(r0 + dr * steps);
    let (vx, vy) = match action {
        Action::MoveRight => (geo.speed, 0.0),
        Action::MoveLeft => (-geo.speed, 0.0),
        Action::MoveDown => (0.0, geo.speed),
        Action::MoveUp => (0.0, -geo.speed),
        _ => (0.0, 0.0),
    };
    // start positions keeping the whole trajectory on the canvas
    let span = |v: f64, extent: f64| {
        let travel = v * steps;
        let lo = r_max + (-travel).max(0.0);
        let hi = extent - r_max - travel.max(0.0);
        (lo, hi.max(lo))
    };
    let (xlo, xhi) = span(vx, width);
    let (ylo, yhi) = span(vy, height);
    let x0 = rng.random_range(xlo..=xhi);
    let y0 = rng.random_range(ylo..=yhi);
    (0..frames)
        .map(|t| {
            let t = t as f64;
            (x0 + vx * t, y0 + vy * t, r0 + dr * t)
        })
        .collect()
}

fn render(objects: &[SceneObject], n: usize, h: usize, w: usize) -> Tensor {
    let mut frames = Tensor::zeros(&[n, h, w, 3]);
    let data = frames.data_mut();
    for f in 0..n {
        // distractors first so the target is never occluded
        for obj in objects.iter().filter(|o| !o.is_target).chain(objects.iter().filter(|o| o.is_target)) {
            let Some((cx, cy, r)) = obj.visible_at(f) else { continue };
            let rgb = color_rgb(&obj.color).unwrap();
            let y0 = libm::floor(cy - r).max(0.0) as usize;
            let y1 = (libm::ceil(cy + r) as usize).min(h);
            let x0 = libm::floor(cx - r).max(0.0) as usize;
            let x1 = (libm::ceil(cx + r) as usize).min(w);
            for y in y0..y1 {
                for x in x0..x1 {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if obj.shape.contains(dx, dy, r) {
                        let o = ((f * h + y) * w + x) * 3;
                        data[o..o + 3].copy_from_slice(&rgb);
                    }
                }
            }
        }
    }
    frames
}

pub fn render_text(color: &str, shape: ShapeKind, action: Action) -> String {
    format!("the {} {} that {}", color, shape.name(), action.phrase())
}

fn multi_hot(words: &[String], active: &str) -> Vec<f64> {
    words.iter().map(|w| if w == active { 1.0 } else { 0.0 }).collect()
}

pub fn generate_sample(cfg: &SceneConfig, sample_seed: u64) -> Result<VideoSample> {
    let pools = cfg.pools()?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed) ^ sample_seed);
    let n = cfg.frame_count;
    let (h, w) = (cfg.frame_height, cfg.frame_width);
    let geo = cfg.geometry();
    let span_len = cfg.span_len();
    let start = rng.random_range(0..=n - span_len);
    let end = start + span_len - 1;

    let color = pools.colors.choose(&mut rng).unwrap().clone();
    let shape = *pools.shapes.choose(&mut rng).unwrap();
    let action = *pools.actions.choose(&mut rng).unwrap();

    let mut objects = Vec::with_capacity(cfg.n_objects);
    // Mutable attribute axes; a distractor changes a random nonempty subset of them.
    let axes: Vec<usize> = [pools.colors.len(), pools.shapes.len(), pools.actions.len()]
        .iter()
        .enumerate()
        .filter(|(_, &len)| len > 1)
        .map(|(i, _)| i)
        .collect();
    for _ in 1..cfg.n_objects {
        let (mut dc, mut ds, mut da) = (color.clone(), shape, action);
        let mask = loop {
            let m: u8 = rng.random_range(1..8);
            if axes.iter().any(|&a| m & (1 << a) != 0) {
                break m;
            }
        };
        if mask & 1 != 0 && pools.colors.len() > 1 {
            while dc == color {
                dc = pools.colors.choose(&mut rng).unwrap().clone();
            }
        }
        if mask & 2 != 0 && pools.shapes.len() > 1 {
            while ds == shape {
                ds = *pools.shapes.choose(&mut rng).unwrap();
            }
        }
        if mask & 4 != 0 && pools.actions.len() > 1 {
            while da == action {
                da = *pools.actions.choose(&mut rng).unwrap();
            }
        }
        let track = trajectory(&mut rng, &geo, da, n, w as f64, h as f64);
        objects.push(SceneObject {
            color: dc,
            shape: ds,
            action: da,
            is_target: false,
            first_frame: 0,
            last_frame: n - 1,
            track,
        });
    }
    let track = trajectory(&mut rng, &geo, action, span_len, w as f64, h as f64);
    let gt_boxes = track
        .iter()
        .map(|&(cx, cy, r)| {
            [
                cx / w as f64,
                cy / h as f64,
                2.0 * r / w as f64,
                2.0 * r / h as f64,
            ]
        })
        .collect();
    objects.push(SceneObject {
        color: color.clone(),
        shape,
        action,
        is_target: true,
        first_frame: start,
        last_frame: end,
        track,
    });

    let frames = render(&objects, n, h, w);
    Ok(VideoSample {
        frames,
        text: render_text(&color, shape, action),
        gt_boxes,
        gt_span: (start, end),
        appearance_label: multi_hot(&cfg.appearance_words(), &color),
        motion_label: multi_hot(&cfg.motion_words(), action.attribute_word()),
        subject_token_span: (2, 2),
        objects,
    })
}

pub fn generate_corpus(cfg: &SceneConfig, n: usize, seed: u64) -> Result<Vec<VideoSample>> {
    if n == 0 {
        return Err(Error::Empty("corpus size must be >= 1"));
    }
    (0..n as u64)
        .map(|i| generate_sample(cfg, derived_seed(seed, i)))
        .collect()
}

/// Pixel mask `[H, W]` of an object's rendered footprint at `frame`.
pub fn object_mask(obj: &SceneObject, frame: usize, h: usize, w: usize) -> Vec<bool> {
    let mut m = vec![false; h * w];
    if let Some((cx, cy, r)) = obj.visible_at(frame) {
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                m[y * w + x] = obj.shape.contains(dx, dy, r);
            }
        }
    }
    m
}

/// Pixels whose centres fall inside a normalised box.
pub fn box_pixel_mask(b: BoxCxCyWh, h: usize, w: usize) -> Vec<bool> {
    let (x0, x1) = ((b[0] - b[2] / 2.0) * w as f64, (b[0] + b[2] / 2.0) * w as f64);
    let (y0, y1) = ((b[1] - b[3] / 2.0) * h as f64, (b[1] + b[3] / 2.0) * h as f64);
    let mut m = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            m[y * w + x] = px >= x0 && px <= x1 && py >= y0 && py <= y1;
        }
    }
    m
}

impl SceneConfig {
    pub fn with_pools(colors: &[&str], shapes: &[&str], actions: &[&str]) -> Self {
        Self {
            colors: colors.iter().map(|&s| s.to_owned()).collect(),
            shapes: shapes.iter().map(|&s| s.to_owned()).collect(),
            actions: actions.iter().map(|&s| s.to_owned()).collect(),
            ..Self::default()
        }
    }
}
