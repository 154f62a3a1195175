//! Synthetic scenes: a textured background with one contrasting target,
//! its ground-truth mask and the tightest box around it.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmetrics::LabelMask;
use crate::numerics::Rng;
use crate::pipeline::DEFAULT_PATCH_SIZE;
use crate::roi::BoxPrompt;
use crate::tokenizer::ImageTensor;

pub const DEFAULT_SCENE_SIZE: usize = 256;
pub const MIN_TARGET_FRACTION: f64 = 0.02;
pub const MAX_TARGET_FRACTION: f64 = 0.4;

const BACKGROUND_LEVEL: f64 = 0.2;
const BACKGROUND_SWING: f64 = 0.15;
const TARGET_LEVEL: f64 = 0.75;
const GRAIN: f64 = 0.05;
/// Coarse noise lattice spacing, in pixels.
const TEXTURE_CELL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Ellipse,
    Rectangle,
    Blob,
}

impl TargetKind {
    pub const ALL: [TargetKind; 3] = [TargetKind::Ellipse, TargetKind::Rectangle, TargetKind::Blob];

    pub fn name(&self) -> &'static str {
        match self {
            TargetKind::Ellipse => "ellipse",
            TargetKind::Rectangle => "rectangle",
            TargetKind::Blob => "blob",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: ImageTensor,
    /// Binary labels: 1 marks target pixels.
    pub truth: LabelMask,
    pub tight_box: BoxPrompt,
    pub target_kind: TargetKind,
    pub seed: u64,
}

/// Square single-channel scene.
pub fn generate_scene(kind: TargetKind, size: usize, seed: u64) -> Result<Scene> {
    generate_scene_with(kind, size, 1, seed)
}

pub fn generate_scene_with(kind: TargetKind, size: usize, channels: usize, seed: u64) -> Result<Scene> {
    if size == 0 || size % DEFAULT_PATCH_SIZE != 0 {
        return Err(Error::Config(format!(
            "scene size {size} must be a positive multiple of {DEFAULT_PATCH_SIZE}"
        )));
    }
    if channels == 0 {
        return Err(Error::Config("scene needs at least one channel".into()));
    }
    let mut rng = Rng::new(seed);
    let inside = target_shape(kind, size, &mut rng);
    let truth = LabelMask::new(size, size, 2, inside.iter().map(|&b| usize::from(b)).collect())?;

    let mut data = Vec::with_capacity(channels * size * size);
    for _ in 0..channels {
        let texture = value_noise(size, &mut rng);
        for (i, &t) in texture.iter().enumerate() {
            let grain = GRAIN * (2.0 * rng.uniform() - 1.0);
            let v = if inside[i] {
                TARGET_LEVEL + grain
            } else {
                BACKGROUND_LEVEL + BACKGROUND_SWING * t + grain
            };
            data.push(v.clamp(0.0, 1.0));
        }
    }
    let image = ImageTensor::new(channels, size, size, data)?;
    let tight_box = tight_box(&truth)?;
    Ok(Scene {
        image,
        truth,
        tight_box,
        target_kind: kind,
        seed,
    })
}

/// Smooth noise in `[-1, 1]`: bilinear upsampling of a coarse random lattice.
fn value_noise(size: usize, rng: &mut Rng) -> Vec<f64> {
    let cells = size / TEXTURE_CELL + 2;
    let lattice: Vec<f64> = (0..cells * cells).map(|_| 2.0 * rng.uniform() - 1.0).collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = y as f64 / TEXTURE_CELL as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..size {
            let fx = x as f64 / TEXTURE_CELL as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let at = |r: usize, c: usize| lattice[r * cells + c];
            let top = at(y0, x0) + tx * (at(y0, x0 + 1) - at(y0, x0));
            let bottom = at(y0 + 1, x0) + tx * (at(y0 + 1, x0 + 1) - at(y0 + 1, x0));
            out.push(top + ty * (bottom - top));
        }
    }
    out
}

/// Row-major target membership; the shape lies strictly inside the image.
fn target_shape(kind: TargetKind, size: usize, rng: &mut Rng) -> Vec<bool> {
    let s = size as f64;
    let mut inside = vec![false; size * size];
    let mut paint = |test: &dyn Fn(f64, f64) -> bool| {
        for y in 0..size {
            for x in 0..size {
                if test(x as f64 + 0.5, y as f64 + 0.5) {
                    inside[y * size + x] = true;
                }
            }
        }
    };
    match kind {
        TargetKind::Ellipse => {
            let a = rng.uniform_range(0.1, 0.3) * s;
            let b = rng.uniform_range(0.1, 0.3) * s;
            let cx = rng.uniform_range(a + 1.0, s - a - 1.0);
            let cy = rng.uniform_range(b + 1.0, s - b - 1.0);
            paint(&|x, y| ((x - cx) / a).powi(2) + ((y - cy) / b).powi(2) <= 1.0);
        }
        TargetKind::Rectangle => {
            let w = (rng.uniform_range(0.15, 0.55) * s).round();
            let h = (rng.uniform_range(0.15, 0.55) * s).round();
            let x0 = rng.uniform_range(1.0, s - w - 1.0).floor();
            let y0 = rng.uniform_range(1.0, s - h - 1.0).floor();
            paint(&|x, y| x >= x0 && x < x0 + w && y >= y0 && y < y0 + h);
        }
        TargetKind::Blob => {
            let parts = 3 + rng.below(3);
            let spread = 0.12 * s;
            let max_r = 0.15 * s;
            let margin = spread + max_r + 1.0;
            let cx = rng.uniform_range(margin, s - margin);
            let cy = rng.uniform_range(margin, s - margin);
            let discs: Vec<(f64, f64, f64)> = (0..parts)
                .map(|_| {
                    (
                        cx + rng.uniform_range(-spread, spread),
                        cy + rng.uniform_range(-spread, spread),
                        rng.uniform_range(0.09, 0.15) * s,
                    )
                })
                .collect();
            paint(&|x, y| {
                discs
                    .iter()
                    .any(|&(dx, dy, r)| (x - dx).powi(2) + (y - dy).powi(2) <= r * r)
            });
        }
    }
    inside
}

/// Tightest normalized box around all non-background pixels, using pixel
/// edges: `x1 = col_min / W`, `x2 = (col_max + 1) / W`.
pub fn tight_box(truth: &LabelMask) -> Result<BoxPrompt> {
    let (h, w) = (truth.height(), truth.width());
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for y in 0..h {
        for x in 0..w {
            if truth.get(y, x) != 0 {
                bounds = Some(match bounds {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    let (x0, y0, x1, y1) =
        bounds.ok_or_else(|| Error::Validation("truth mask has no foreground pixel".into()))?;
    BoxPrompt::new(
        x0 as f64 / w as f64,
        y0 as f64 / h as f64,
        (x1 + 1) as f64 / w as f64,
        (y1 + 1) as f64 / h as f64,
    )
}

/// Files written for one scene by [`Scene::save`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenePaths {
    pub image: PathBuf,
    pub truth: PathBuf,
    pub prompt: PathBuf,
}

impl ScenePaths {
    pub fn new(dir: &Path, stem: &str) -> Self {
        Self {
            image: dir.join(format!("{stem}.prti")),
            truth: dir.join(format!("{stem}.truth.csv")),
            prompt: dir.join(format!("{stem}.box.json")),
        }
    }
}

impl Scene {
    pub fn target_fraction(&self) -> f64 {
        self.truth.count(1) as f64 / self.truth.num_pixels() as f64
    }

    /// Writes the image (`.prti`), truth labels (`.truth.csv`) and tight box (`.box.json`).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<ScenePaths> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = ScenePaths::new(dir, stem);
        self.image.save(&paths.image)?;
        write_label_csv(&self.truth, &paths.truth)?;
        let json = serde_json::to_vec(&self.tight_box)?;
        std::fs::write(&paths.prompt, json).map_err(|e| Error::io(&paths.prompt, e))?;
        Ok(paths)
    }
}

pub fn write_label_csv(mask: &LabelMask, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(file));
    for y in 0..mask.height() {
        w.write_record((0..mask.width()).map(|x| mask.get(y, x).to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_label_csv(path: &Path, classes: usize) -> Result<LabelMask> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(BufReader::new(file));
    let mut data = Vec::new();
    let mut width = None;
    let mut height = 0;
    for rec in r.records() {
        let rec = rec?;
        if *width.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::format(path, "ragged label rows"));
        }
        for field in rec.iter() {
            data.push(
                field
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| Error::format(path, e.to_string()))?,
            );
        }
        height += 1;
    }
    LabelMask::new(height, width.unwrap_or(0), classes, data)
}
