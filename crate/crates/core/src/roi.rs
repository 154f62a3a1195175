//! Box prompts and RoIAlign over the token grid.
//!
//! Grid coordinates are continuous and measured in tokens; cell `(i, j)`
//! covers `[j, j+1) x [i, i+1)` and its feature sits at the center
//! `(j + 0.5, i + 0.5)`. Sample points outside the outermost centers clamp to
//! the border cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::tokenizer::TokenGrid;

pub const DEFAULT_ROI_K: usize = 5;
pub const DEFAULT_SAMPLING_RATIO: usize = 2;

const DEGENERATE_EXTENT: f64 = 1e-9;
const BOUNDS_SLACK: f64 = 1e-9;

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxPrompt {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn full() -> Self {
        Self {
            x1: 0.0,
            y1: 0.0,
            x2: 1.0,
            y2: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x1, self.y1, self.x2, self.y2];
        if coords.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!(
                "box coordinates must lie in [0, 1]: {self:?}"
            )));
        }
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(Error::Validation(format!(
                "box needs x1 < x2 and y1 < y2: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BoxPrompt) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BoxPrompt) -> f64 {
        let inter = self.intersection_area(other);
        inter / (self.area() + other.area() - inter)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let b: BoxPrompt = serde_json::from_str(s)?;
        b.validate()?;
        Ok(b)
    }
}

/// Box in continuous token-grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl GridBox {
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    /// Area of overlap between this box and grid cell `(row, col)`.
    pub fn cell_overlap(&self, row: usize, col: usize) -> f64 {
        let (c0, r0) = (col as f64, row as f64);
        let w = (self.x2.min(c0 + 1.0) - self.x1.max(c0)).max(0.0);
        let h = (self.y2.min(r0 + 1.0) - self.y1.max(r0)).max(0.0);
        w * h
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    fn check_within(&self, grid_h: usize, grid_w: usize) -> Result<()> {
        let (w, h) = (grid_w as f64, grid_h as f64);
        let ok = self.x1 >= -BOUNDS_SLACK
            && self.y1 >= -BOUNDS_SLACK
            && self.x2 <= w + BOUNDS_SLACK
            && self.y2 <= h + BOUNDS_SLACK
            && self.x1 < self.x2
            && self.y1 < self.y2;
        if ok {
            Ok(())
        } else {
            Err(Error::Range(format!(
                "box {self:?} outside {grid_h}x{grid_w} grid"
            )))
        }
    }
}

/// `k x k` pooled features stored as a `k^2 x C'` matrix, bins in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeature {
    pub k: usize,
    pub features: Matrix,
    pub source_box: GridBox,
}

impl RegionFeature {
    /// Number of region vectors, `k^2`.
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

/// Scales a normalized box onto a `grid_h x grid_w` grid without rounding.
pub fn map_box_to_grid(b: &BoxPrompt, grid_h: usize, grid_w: usize) -> Result<GridBox> {
    b.validate()?;
    let (w, h) = (grid_w as f64, grid_h as f64);
    let gb = GridBox {
        x1: b.x1 * w,
        y1: b.y1 * h,
        x2: b.x2 * w,
        y2: b.y2 * h,
    };
    if gb.width() < DEGENERATE_EXTENT || gb.height() < DEGENERATE_EXTENT {
        return Err(Error::DegeneratePrompt(format!(
            "box {b:?} collapses to {:.3e}x{:.3e} tokens",
            gb.width(),
            gb.height()
        )));
    }
    Ok(gb)
}

/// Lower neighbour, upper neighbour and fraction for one axis.
fn axis_taps(coord: f64, cells: usize) -> (usize, usize, f64) {
    let u = (coord - 0.5).clamp(0.0, (cells - 1) as f64);
    let lo = u.floor() as usize;
    let hi = (lo + 1).min(cells - 1);
    (lo, hi, u - lo as f64)
}

/// Bilinear sample of every channel at continuous point `(x, y)`, written
/// into `out`. Uses lerp form so a constant field stays bit-exact.
pub fn bilinear_sample(grid: &TokenGrid, x: f64, y: f64, out: &mut [f64]) {
    let (x0, x1, fx) = axis_taps(x, grid.grid_w());
    let (y0, y1, fy) = axis_taps(y, grid.grid_h());
    let (a, b) = (grid.at(y0, x0), grid.at(y0, x1));
    let (c, d) = (grid.at(y1, x0), grid.at(y1, x1));
    for ch in 0..out.len() {
        let top = a[ch] + fx * (b[ch] - a[ch]);
        let bottom = c[ch] + fx * (d[ch] - c[ch]);
        out[ch] = top + fy * (bottom - top);
    }
}

/// Sample positions along one axis of bin `bin`: `sampling_ratio` evenly
/// spaced points at the centers of equal sub-intervals.
pub fn sample_offsets(start: f64, bin_size: f64, bin: usize, sampling_ratio: usize) -> Vec<f64> {
    let step = bin_size / sampling_ratio as f64;
    (0..sampling_ratio)
        .map(|s| start + bin as f64 * bin_size + (s as f64 + 0.5) * step)
        .collect()
}

/// Pools the box into `k x k` bins, each the mean of `sampling_ratio^2`
/// bilinear samples.
pub fn roi_align(
    grid: &TokenGrid,
    boxed: &GridBox,
    k: usize,
    sampling_ratio: usize,
) -> Result<RegionFeature> {
    if k == 0 {
        return Err(Error::Config("RoI size k must be at least 1".into()));
    }
    if sampling_ratio == 0 {
        return Err(Error::Config("sampling ratio must be at least 1".into()));
    }
    boxed.check_within(grid.grid_h(), grid.grid_w())?;
    let c = grid.embed_dim();
    let bin_w = boxed.width() / k as f64;
    let bin_h = boxed.height() / k as f64;
    let mut features = Matrix::zeros(k * k, c);
    let mut sample = vec![0.0; c];
    for by in 0..k {
        let ys = sample_offsets(boxed.y1, bin_h, by, sampling_ratio);
        for bx in 0..k {
            let xs = sample_offsets(boxed.x1, bin_w, bx, sampling_ratio);
            let out = features.row_mut(by * k + bx);
            let mut n = 0.0;
            for &y in &ys {
                for &x in &xs {
                    bilinear_sample(grid, x, y, &mut sample);
                    n += 1.0;
                    // Running mean: a constant field stays exactly constant.
                    for (o, s) in out.iter_mut().zip(&sample) {
                        *o += (s - *o) / n;
                    }
                }
            }
        }
    }
    Ok(RegionFeature {
        k,
        features,
        source_box: *boxed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::tokenizer::GridShape;

    fn grid_from(gh: usize, gw: usize, c: usize, f: impl Fn(usize, usize, usize) -> f64) -> TokenGrid {
        let tokens = Matrix::from_fn(gh * gw, c, |t, ch| f(t / gw, t % gw, ch));
        TokenGrid::new(
            tokens,
            GridShape {
                grid_h: gh,
                grid_w: gw,
                patch_size: 1,
            },
        )
        .unwrap()
    }

    #[test]
    fn box_mapping_examples() {
        let b = map_box_to_grid(&BoxPrompt::full(), 16, 16).unwrap();
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (0.0, 0.0, 16.0, 16.0));
        let b = map_box_to_grid(&BoxPrompt::new(0.25, 0.25, 0.75, 0.75).unwrap(), 16, 16).unwrap();
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (4.0, 4.0, 12.0, 12.0));
        let b = map_box_to_grid(&BoxPrompt::new(0.1, 0.2, 0.3, 0.4).unwrap(), 10, 10).unwrap();
        for (got, want) in [(b.x1, 1.0), (b.y1, 2.0), (b.x2, 3.0), (b.y2, 4.0)] {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_and_degenerate_boxes() {
        assert!(BoxPrompt::new(0.5, 0.1, 0.4, 0.9).is_err());
        assert!(BoxPrompt::new(-0.1, 0.1, 0.4, 0.9).is_err());
        let tiny = BoxPrompt {
            x1: 0.5,
            y1: 0.5,
            x2: 0.5 + 1e-12,
            y2: 0.9,
        };
        assert!(matches!(
            map_box_to_grid(&tiny, 16, 16),
            Err(Error::DegeneratePrompt(_))
        ));
    }

    #[test]
    fn constant_field_is_exact() {
        let grid = grid_from(6, 7, 3, |_, _, _| 0.3711);
        let b = GridBox {
            x1: 0.2,
            y1: 1.1,
            x2: 6.9,
            y2: 5.3,
        };
        for k in 1..6 {
            let f = roi_align(&grid, &b, k, 2).unwrap();
            assert_eq!(f.features.shape(), (k * k, 3));
            assert!(f.features.data().iter().all(|&v| v == 0.3711));
        }
    }

    #[test]
    fn linear_field_reproduces_sample_means() {
        let grid = grid_from(8, 8, 1, |_, col, _| col as f64 + 0.5);
        let b = GridBox {
            x1: 1.0,
            y1: 1.0,
            x2: 6.0,
            y2: 7.0,
        };
        let k = 5;
        let f = roi_align(&grid, &b, k, 2).unwrap();
        for by in 0..k {
            for bx in 0..k {
                let xs = sample_offsets(b.x1, 1.0, bx, 2);
                let mean = xs.iter().sum::<f64>() / 2.0;
                assert!((f.features.get(by * k + bx, 0) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn errors() {
        let grid = grid_from(4, 4, 2, |_, _, _| 0.0);
        let b = GridBox {
            x1: 0.0,
            y1: 0.0,
            x2: 2.0,
            y2: 2.0,
        };
        assert!(matches!(roi_align(&grid, &b, 0, 2), Err(Error::Config(_))));
        assert!(matches!(roi_align(&grid, &b, 2, 0), Err(Error::Config(_))));
        let outside = GridBox { x2: 4.5, ..b };
        assert!(matches!(roi_align(&grid, &outside, 2, 2), Err(Error::Range(_))));
    }

    #[test]
    fn cell_overlap_sums_to_box_area() {
        let mut rng = Rng::new(8);
        for _ in 0..20 {
            let x1 = rng.uniform_range(0.0, 5.0);
            let y1 = rng.uniform_range(0.0, 5.0);
            let b = GridBox {
                x1,
                y1,
                x2: x1 + rng.uniform_range(0.1, 3.0),
                y2: y1 + rng.uniform_range(0.1, 3.0),
            };
            let mut total = 0.0;
            for r in 0..8 {
                for c in 0..8 {
                    total += b.cell_overlap(r, c);
                }
            }
            assert!((total - b.width() * b.height()).abs() < 1e-12);
        }
    }

    #[test]
    fn prompt_json() {
        let b = BoxPrompt::from_json(r#"{"x1":0.1,"y1":0.2,"x2":0.3,"y2":0.4}"#).unwrap();
        assert_eq!(b, BoxPrompt::new(0.1, 0.2, 0.3, 0.4).unwrap());
        assert!(BoxPrompt::from_json(r#"{"x1":0.5,"y1":0.2,"x2":0.3,"y2":0.4}"#).is_err());
    }
}
