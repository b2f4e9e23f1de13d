//! Deterministic synthetic datasets for the three segmentation tasks.
//!
//! Three procedural scene families stand in for real inspection imagery:
//! thin dark cracks over textured surfaces (binary, heavily imbalanced),
//! irregular damage blobs over noisy backgrounds (binary), and layered
//! bridge scenes with six component classes, two of them deliberately rare.
//! Masks are exact by construction and everything is a pure function of the
//! scene seed.

use rayon::prelude::*;

use crate::rng::{domain, CounterRng};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Integer class mask with image geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::dim(format!(
                "mask data length {} does not match {height}x{width}",
                labels.len()
            )));
        }
        Ok(Mask {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Mask {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Pixel count per class; errors on out-of-range labels.
    pub fn class_counts(&self, num_classes: usize) -> Result<Vec<u64>> {
        let mut counts = vec![0u64; num_classes];
        for (i, &label) in self.labels.iter().enumerate() {
            let class = label as usize;
            if class >= num_classes {
                return Err(Error::Label(format!(
                    "label {label} at pixel ({}, {}) outside [0, {num_classes})",
                    i / self.width,
                    i % self.width
                )));
            }
            counts[class] += 1;
        }
        Ok(counts)
    }

    pub fn fraction(&self, label: u8) -> f64 {
        let hits = self.labels.iter().filter(|&&l| l == label).count();
        hits as f64 / self.labels.len() as f64
    }
}

/// An image tensor paired with its ground-truth mask.
#[derive(Debug, Clone)]
pub struct LabeledImage<S: Scalar> {
    pub image: Tensor<S>,
    pub mask: Mask,
}

/// Which of the three case-study analogues to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Thin cracks on road-like texture; RGB, 2 classes, crack < 2.5%.
    Crack,
    /// Blobby local damage on cluttered backgrounds; RGB, 2 classes.
    Damage,
    /// Layered bridge scenes; grayscale, 6 classes, two rare ones.
    Component,
}

impl Task {
    pub fn num_classes(self) -> usize {
        match self {
            Task::Crack | Task::Damage => 2,
            Task::Component => 6,
        }
    }

    pub fn input_channels(self) -> usize {
        match self {
            Task::Crack | Task::Damage => 3,
            Task::Component => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Crack => "crack",
            Task::Damage => "damage",
            Task::Component => "component",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "crack" => Ok(Task::Crack),
            "damage" => Ok(Task::Damage),
            "component" => Ok(Task::Component),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected crack, damage, or component)"
            ))),
        }
    }
}

/// Component-task class labels.
pub mod component_class {
    pub const BACKGROUND: u8 = 0;
    pub const DECK: u8 = 1;
    pub const COLUMN: u8 = 2;
    pub const CAP_BEAM: u8 = 3;
    pub const ABUTMENT: u8 = 4;
    pub const FOUNDATION: u8 = 5;

    pub const NAMES: [&str; 6] = [
        "background",
        "deck",
        "column",
        "cap_beam",
        "abutment",
        "foundation",
    ];
}

/// Per-class display names for a task's label indices.
pub fn class_names(task: Task) -> Vec<&'static str> {
    match task {
        Task::Crack => vec!["background", "crack"],
        Task::Damage => vec!["background", "damage"],
        Task::Component => component_class::NAMES.to_vec(),
    }
}

/// Crack-pixel fraction band enforced per generated crack image.
pub const CRACK_FRACTION_BAND: (f64, f64) = (0.005, 0.025);
/// Dataset-level ceiling for each rare component class.
pub const RARE_CLASS_CEILING: f64 = 0.03;

/// Declarative description of one synthetic dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneSpec {
    pub task: Task,
    pub width: usize,
    pub height: usize,
    pub count: usize,
    pub seed: u64,
}

impl SceneSpec {
    /// Desk-scale default: 64x96 scenes, matching the aspect ratio of a
    /// 320x480 capture at one fifth scale.
    pub fn default_for(task: Task) -> Self {
        SceneSpec {
            task,
            width: 96,
            height: 64,
            count: 60,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::Param(format!(
                "scene dimensions {}x{} too small (min 16x16)",
                self.height, self.width
            )));
        }
        if !self.width.is_multiple_of(4) || !self.height.is_multiple_of(4) {
            return Err(Error::Param(format!(
                "scene dimensions {}x{} must be divisible by 4",
                self.height, self.width
            )));
        }
        if self.count == 0 {
            return Err(Error::Param("scene count must be positive".into()));
        }
        Ok(())
    }

    pub fn to_manifest_line(&self) -> String {
        format!(
            "scene task={} width={} height={} count={} seed={}",
            self.task.name(),
            self.width,
            self.height,
            self.count,
            self.seed
        )
    }

    pub fn from_manifest_line(line: &str) -> Result<Self> {
        let mut task = None;
        let mut fields = [0usize; 3];
        let mut seed = 0u64;
        let body = line
            .strip_prefix("scene ")
            .ok_or_else(|| Error::format("manifest", "scene line must start with 'scene '"))?;
        for part in body.split_whitespace() {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::format("manifest", format!("bad scene field {part:?}")))?;
            match key {
                "task" => task = Some(Task::parse(value)?),
                "width" => {
                    fields[0] = value
                        .parse()
                        .map_err(|_| Error::format("manifest", "bad width"))?
                }
                "height" => {
                    fields[1] = value
                        .parse()
                        .map_err(|_| Error::format("manifest", "bad height"))?
                }
                "count" => {
                    fields[2] = value
                        .parse()
                        .map_err(|_| Error::format("manifest", "bad count"))?
                }
                "seed" => {
                    seed = value
                        .parse()
                        .map_err(|_| Error::format("manifest", "bad seed"))?
                }
                other => {
                    return Err(Error::format(
                        "manifest",
                        format!("unknown scene field {other}"),
                    ))
                }
            }
        }
        Ok(SceneSpec {
            task: task.ok_or_else(|| Error::format("manifest", "missing task"))?,
            width: fields[0],
            height: fields[1],
            count: fields[2],
            seed,
        })
    }
}

/// Generate the whole dataset; image `i` depends only on `(seed, i)`.
pub fn generate(spec: &SceneSpec) -> Result<Vec<LabeledImage<f32>>> {
    spec.validate()?;
    (0..spec.count)
        .into_par_iter()
        .map(|index| generate_one(spec, index))
        .collect()
}

fn generate_one(spec: &SceneSpec, index: usize) -> Result<LabeledImage<f32>> {
    let mut rng = CounterRng::from_parts(spec.seed, domain::SCENE, index as u64);
    match spec.task {
        Task::Crack => crack_scene(spec, &mut rng, index),
        Task::Damage => Ok(damage_scene(spec, &mut rng)),
        Task::Component => Ok(component_scene(spec, &mut rng)),
    }
}

/// Smoothed lattice noise in [0, 1].
struct ValueNoise {
    cell: f64,
    grid_w: usize,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut CounterRng, h: usize, w: usize, cell: f64) -> Self {
        let grid_w = (w as f64 / cell).ceil() as usize + 2;
        let grid_h = (h as f64 / cell).ceil() as usize + 2;
        let values = (0..grid_w * grid_h).map(|_| rng.next_f64()).collect();
        ValueNoise {
            cell,
            grid_w,
            values,
        }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        let fy = y as f64 / self.cell;
        let fx = x as f64 / self.cell;
        let (gy, gx) = (fy.floor() as usize, fx.floor() as usize);
        let (ty, tx) = (fy - fy.floor(), fx - fx.floor());
        let (sy, sx) = (ty * ty * (3.0 - 2.0 * ty), tx * tx * (3.0 - 2.0 * tx));
        let v = |yy: usize, xx: usize| self.values[yy * self.grid_w + xx];
        let top = v(gy, gx) * (1.0 - sx) + v(gy, gx + 1) * sx;
        let bot = v(gy + 1, gx) * (1.0 - sx) + v(gy + 1, gx + 1) * sx;
        top * (1.0 - sy) + bot * sy
    }
}

fn crack_scene(spec: &SceneSpec, rng: &mut CounterRng, index: usize) -> Result<LabeledImage<f32>> {
    let (h, w) = (spec.height, spec.width);
    // Bounded retries with derived seeds until the crack fraction lands
    // inside the accepted band.
    for attempt in 0..16u64 {
        let mut sub = CounterRng::from_parts(rng.next_u64(), attempt, index as u64);
        let coarse = ValueNoise::new(&mut sub, h, w, 11.0);
        let fine = ValueNoise::new(&mut sub, h, w, 3.0);
        let base = sub.range_f64(0.45, 0.62);
        let tint = [
            sub.range_f64(-0.03, 0.03),
            sub.range_f64(-0.03, 0.03),
            sub.range_f64(-0.03, 0.03),
        ];

        let mut gray = vec![0.0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                gray[y * w + x] =
                    base + 0.18 * (coarse.at(y, x) - 0.5) + 0.10 * (fine.at(y, x) - 0.5);
            }
        }

        let mut mask = Mask::filled(h, w, 0);
        let lo = (CRACK_FRACTION_BAND.0 * (h * w) as f64).ceil() as usize;
        let hi = (CRACK_FRACTION_BAND.1 * (h * w) as f64).floor() as usize;
        let target = lo + sub.below(hi.saturating_sub(lo).max(1));
        let mut marked = 0usize;
        let n_cracks = 1 + sub.below(2);
        let mut depth = vec![0.0f64; h * w];
        for _ in 0..n_cracks {
            let mut py = sub.range_f64(2.0, (h - 2) as f64);
            let mut px = sub.range_f64(2.0, (w - 2) as f64);
            let mut angle = sub.range_f64(0.0, std::f64::consts::TAU);
            let wide = sub.next_f64() < 0.4;
            let mut steps = 0usize;
            while marked < target && steps < 4 * target {
                steps += 1;
                angle += sub.range_f64(-0.45, 0.45);
                py += angle.sin();
                px += angle.cos();
                if py < 1.0 || px < 1.0 || py >= (h - 1) as f64 || px >= (w - 1) as f64 {
                    break;
                }
                let (iy, ix) = (py as usize, px as usize);
                let mut plot = vec![(iy, ix)];
                if wide {
                    // widen perpendicular to the travel direction
                    let ny = (py - angle.cos()) as usize;
                    let nx = (px + angle.sin()) as usize;
                    if ny < h && nx < w {
                        plot.push((ny, nx));
                    }
                }
                for (y, x) in plot {
                    if mask.get(y, x) == 0 {
                        mask.set(y, x, 1);
                        marked += 1;
                    }
                    depth[y * w + x] = sub.range_f64(0.55, 0.75);
                    // soft halo around the crack, unlabeled
                    for (dy, dx) in [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)] {
                        let (hy, hx) = (y as i64 + dy, x as i64 + dx);
                        if hy >= 0 && hx >= 0 && (hy as usize) < h && (hx as usize) < w {
                            let at = hy as usize * w + hx as usize;
                            depth[at] = depth[at].max(sub.range_f64(0.12, 0.28));
                        }
                    }
                }
            }
        }
        let fraction = marked as f64 / (h * w) as f64;
        if !(CRACK_FRACTION_BAND.0..=CRACK_FRACTION_BAND.1).contains(&fraction) {
            continue;
        }

        let image = Tensor::from_fn(vec![h, w, 3], |i| {
            let (px, c) = (i / 3, i % 3);
            let v = gray[px] * (1.0 - depth[px]) + tint[c];
            v.clamp(0.0, 1.0) as f32
        });
        return Ok(LabeledImage { image, mask });
    }
    Err(Error::Generation(format!(
        "could not reach crack fraction band {CRACK_FRACTION_BAND:?} for image {index}"
    )))
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    rot: f64,
    severity: f64,
}

impl Ellipse {
    fn contains(&self, y: usize, x: usize) -> bool {
        let (dy, dx) = (y as f64 - self.cy, x as f64 - self.cx);
        let (c, s) = (self.rot.cos(), self.rot.sin());
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

fn ellipse_cluster(
    rng: &mut CounterRng,
    h: usize,
    w: usize,
    members: usize,
    severity: (f64, f64),
    scale: f64,
    out: &mut Vec<Ellipse>,
) {
    let cy = rng.range_f64(0.2 * h as f64, 0.8 * h as f64);
    let cx = rng.range_f64(0.2 * w as f64, 0.8 * w as f64);
    let cluster_severity = rng.range_f64(severity.0, severity.1);
    for _ in 0..members {
        out.push(Ellipse {
            cy: cy + rng.range_f64(-6.0, 6.0),
            cx: cx + rng.range_f64(-8.0, 8.0),
            ry: rng.range_f64(3.0, 9.0) * scale,
            rx: rng.range_f64(4.0, 13.0) * scale,
            rot: rng.range_f64(0.0, std::f64::consts::PI),
            severity: cluster_severity,
        });
    }
}

fn damage_scene(spec: &SceneSpec, rng: &mut CounterRng) -> LabeledImage<f32> {
    let (h, w) = (spec.height, spec.width);
    let coarse = ValueNoise::new(rng, h, w, 13.0);
    let fine = ValueNoise::new(rng, h, w, 4.0);
    let mottle = ValueNoise::new(rng, h, w, 5.0);
    let base = rng.range_f64(0.4, 0.6);
    let grad = rng.range_f64(-0.15, 0.15);

    // True damage blobs, plus weaker stain distractors that share the
    // damage texture at lower severity but stay labeled background.
    let mut damage = Vec::new();
    for _ in 0..1 + rng.below(3) {
        let members = 2 + rng.below(4);
        ellipse_cluster(rng, h, w, members, (0.65, 1.0), 1.0, &mut damage);
    }
    let mut stains = Vec::new();
    for _ in 0..1 + rng.below(3) {
        let members = 1 + rng.below(3);
        ellipse_cluster(rng, h, w, members, (0.3, 0.5), 0.8, &mut stains);
    }

    let mut mask = Mask::filled(h, w, 0);
    let mut strength = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0f64;
            for e in &damage {
                if e.contains(y, x) {
                    mask.set(y, x, 1);
                    s = s.max(e.severity);
                }
            }
            for e in &stains {
                if e.contains(y, x) {
                    s = s.max(e.severity);
                }
            }
            strength[y * w + x] = s;
        }
    }

    let rr = rng.range_f64(0.02, 0.1);
    let image = Tensor::from_fn(vec![h, w, 3], |i| {
        let (px, c) = (i / 3, i % 3);
        let (y, x) = (px / w, px % w);
        let mut v = base
            + grad * (y as f64 / h as f64 - 0.5)
            + 0.16 * (coarse.at(y, x) - 0.5)
            + 0.08 * (fine.at(y, x) - 0.5);
        let s = strength[px];
        if s > 0.0 {
            // spalled texture: darker and mottled, slightly reddish,
            // scaled by how severe the patch is
            v = v * (1.0 - 0.5 * s) + 0.24 * s * (mottle.at(y, x) - 0.5);
            if c == 0 {
                v += rr * s;
            }
        }
        v.clamp(0.0, 1.0) as f32
    });
    LabeledImage { image, mask }
}

fn component_scene(spec: &SceneSpec, rng: &mut CounterRng) -> LabeledImage<f32> {
    use component_class as cc;
    let (h, w) = (spec.height, spec.width);
    let hf = h as f64;
    let wf = w as f64;
    let noise = ValueNoise::new(rng, h, w, 6.0);

    let horizon = (rng.range_f64(0.62, 0.78) * hf) as usize;
    let deck_top = (rng.range_f64(0.12, 0.26) * hf) as usize;
    let deck_h = (rng.range_f64(0.10, 0.16) * hf).max(3.0) as usize;
    let cap_h = (rng.range_f64(0.028, 0.05) * hf).max(2.0) as usize;
    let deck_bot = deck_top + deck_h;
    let cap_bot = deck_bot + cap_h;

    let n_columns = 1 + rng.below(3);
    let mut columns = Vec::new();
    for i in 0..n_columns {
        let lane = (i as f64 + 0.5) / n_columns as f64;
        let cx = ((lane + rng.range_f64(-0.08, 0.08)) * wf).clamp(4.0, wf - 5.0);
        let cw = (rng.range_f64(0.055, 0.095) * wf).max(3.0);
        columns.push((cx - cw / 2.0, cx + cw / 2.0));
    }

    let mut mask = Mask::filled(h, w, cc::BACKGROUND);
    let mut shade = vec![0.0f64; h * w];

    for y in 0..h {
        for x in 0..w {
            // sky above the ground line
            let v = if y < horizon {
                0.78 - 0.12 * (y as f64 / horizon as f64) + 0.08 * (noise.at(y, x) - 0.5)
            } else {
                0.44 + 0.14 * (noise.at(y, x) - 0.5)
            };
            shade[y * w + x] = v;
        }
    }

    let fill_rect = |mask: &mut Mask,
                     shade: &mut Vec<f64>,
                     y0: usize,
                     y1: usize,
                     x0: usize,
                     x1: usize,
                     label: u8,
                     level: f64,
                     amp: f64| {
        for y in y0..y1.min(h) {
            for x in x0..x1.min(w) {
                mask.set(y, x, label);
                shade[y * w + x] = level + amp * (noise.at(y, x) - 0.5);
            }
        }
    };

    // Foundations: small exposed quads at the column bases.
    let exposed = (rng.range_f64(0.018, 0.032) * hf).max(2.0) as usize;
    for &(x0, x1) in &columns {
        let pad = rng.range_f64(1.0, 3.0);
        let fx0 = (x0 - pad).max(0.0) as usize;
        let fx1 = (x1 + pad).min(wf - 1.0) as usize;
        fill_rect(
            &mut mask,
            &mut shade,
            horizon.saturating_sub(exposed),
            horizon + 1,
            fx0,
            fx1,
            cc::FOUNDATION,
            rng.range_f64(0.3, 0.42),
            0.1,
        );
    }

    // Columns from the cap beam down to the foundation line.
    for &(x0, x1) in &columns {
        fill_rect(
            &mut mask,
            &mut shade,
            cap_bot,
            horizon.saturating_sub(exposed),
            x0 as usize,
            x1 as usize,
            cc::COLUMN,
            rng.range_f64(0.5, 0.62),
            0.12,
        );
    }

    // Cap beam spanning the columns, slightly overhanging.
    let span_x0 = columns.iter().map(|c| c.0).fold(wf, f64::min);
    let span_x1 = columns.iter().map(|c| c.1).fold(0.0, f64::max);
    fill_rect(
        &mut mask,
        &mut shade,
        deck_bot,
        cap_bot,
        (span_x0 - 2.0).max(0.0) as usize,
        (span_x1 + 2.0).min(wf) as usize,
        cc::CAP_BEAM,
        rng.range_f64(0.56, 0.68),
        0.1,
    );

    // Deck across the full width.
    fill_rect(
        &mut mask,
        &mut shade,
        deck_top,
        deck_bot,
        0,
        w,
        cc::DECK,
        rng.range_f64(0.6, 0.72),
        0.1,
    );

    // Abutment: a small wedge at one image edge near the ground line.
    let ab_h = (rng.range_f64(0.05, 0.085) * hf).max(3.0) as usize;
    let ab_w = (rng.range_f64(0.05, 0.09) * wf).max(3.0) as usize;
    let on_left = rng.next_f64() < 0.5;
    let ab_level = rng.range_f64(0.46, 0.58);
    for dy in 0..ab_h {
        let y = horizon.saturating_sub(ab_h) + dy;
        if y >= h {
            break;
        }
        // wedge narrows toward the top
        let row_w = ab_w * (dy + 1) / ab_h;
        let (x0, x1) = if on_left { (0, row_w) } else { (w - row_w, w) };
        for x in x0..x1 {
            mask.set(y, x, cc::ABUTMENT);
            shade[y * w + x] = ab_level + 0.1 * (noise.at(y, x) - 0.5);
        }
    }

    let image = Tensor::from_fn(vec![h, w, 1], |i| shade[i].clamp(0.0, 1.0) as f32);
    LabeledImage { image, mask }
}
