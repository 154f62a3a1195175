//! Segmentation losses (Dice, cross-entropy, their sum and its gradient) and
//! the DSC / IoU / HD95 quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DICE_EPS: f64 = 1e-5;
const CE_FLOOR: f64 = 1e-12;
const PROB_SUM_TOLERANCE: f64 = 1e-9;

/// Per-pixel class indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<usize>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<usize>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} mask needs {} labels, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&c| c >= classes) {
            return Err(Error::Validation(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        classes: usize,
        mut f: impl FnMut(usize, usize) -> usize,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, classes, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.data[y * self.width + x]
    }

    pub fn num_pixels(&self) -> usize {
        self.data.len()
    }

    pub fn count(&self, class: usize) -> usize {
        self.data.iter().filter(|&&c| c == class).count()
    }

    /// `(row, col)` of every pixel labelled `class`.
    pub fn pixels_of(&self, class: usize) -> Vec<(usize, usize)> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == class)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }
}

/// Per-pixel class probabilities, stored pixel-major (`data[i * N + class]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        let p = Self::new_unchecked(height, width, classes, data)?;
        for (i, px) in p.data.chunks_exact(classes.max(1)).enumerate() {
            let sum: f64 = px.iter().sum();
            if px.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
                return Err(Error::Validation(format!(
                    "pixel {i} is not a probability vector (sum {sum})"
                )));
            }
        }
        Ok(p)
    }

    /// Shape checks only; entries need not sum to one. Used for finite
    /// differences, where single entries are nudged off the simplex.
    pub fn new_unchecked(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("probability map needs at least one class".into()));
        }
        if data.len() != height * width * classes {
            return Err(Error::Shape(format!(
                "{height}x{width}x{classes} map needs {} values, got {}",
                height * width * classes,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            data,
        })
    }

    /// Hard one-hot map of a label mask.
    pub fn one_hot(truth: &LabelMask) -> Self {
        let n = truth.classes;
        let mut data = vec![0.0; truth.num_pixels() * n];
        for (i, &c) in truth.data.iter().enumerate() {
            data[i * n + c] = 1.0;
        }
        Self {
            height: truth.height,
            width: truth.width,
            classes: n,
            data,
        }
    }

    pub fn uniform(height: usize, width: usize, classes: usize) -> Self {
        Self {
            height,
            width,
            classes,
            data: vec![1.0 / classes as f64; height * width * classes],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, pixel: usize, class: usize) -> f64 {
        self.data[pixel * self.classes + class]
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Per-pixel argmax (lowest class on ties).
    pub fn argmax(&self) -> LabelMask {
        let data = self
            .data
            .chunks_exact(self.classes)
            .map(|px| {
                let mut best = 0;
                for (c, &v) in px.iter().enumerate() {
                    if v > px[best] {
                        best = c;
                    }
                }
                best
            })
            .collect();
        LabelMask {
            height: self.height,
            width: self.width,
            classes: self.classes,
            data,
        }
    }
}

fn check_pair(pred: &ProbMap, truth: &LabelMask) -> Result<()> {
    if (pred.height, pred.width, pred.classes) != (truth.height, truth.width, truth.classes) {
        return Err(Error::Shape(format!(
            "prediction {}x{}x{} vs truth {}x{}x{}",
            pred.height, pred.width, pred.classes, truth.height, truth.width, truth.classes
        )));
    }
    Ok(())
}

fn check_masks(a: &LabelMask, b: &LabelMask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape(format!(
            "masks {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// `(intersection, union-sum)` = `(sum pred*truth, sum (pred + truth))` per class.
fn dice_sums(pred: &ProbMap, truth: &LabelMask) -> Vec<(f64, f64)> {
    let n = pred.classes;
    let mut sums = vec![(0.0, 0.0); n];
    for (i, &label) in truth.data.iter().enumerate() {
        for (c, s) in sums.iter_mut().enumerate() {
            let p = pred.data[i * n + c];
            let y = if c == label { 1.0 } else { 0.0 };
            s.0 += p * y;
            s.1 += p + y;
        }
    }
    sums
}

/// `N - sum_c (2 I_c + eps) / (U_c + eps)`; lies in `[0, N]`.
pub fn dice_loss(pred: &ProbMap, truth: &LabelMask, eps: f64) -> Result<f64> {
    check_pair(pred, truth)?;
    if !(eps > 0.0) {
        return Err(Error::Config(format!("dice eps must be > 0, got {eps}")));
    }
    let n = pred.classes as f64;
    let score: f64 = dice_sums(pred, truth)
        .iter()
        .map(|&(i, u)| (2.0 * i + eps) / (u + eps))
        .sum();
    Ok(n - score)
}

/// Mean negative log-probability of the true class (natural log), with
/// predictions floored at `1e-12`.
pub fn ce_loss(pred: &ProbMap, truth: &LabelMask) -> Result<f64> {
    check_pair(pred, truth)?;
    let n = pred.classes;
    let total: f64 = truth
        .data
        .iter()
        .enumerate()
        .map(|(i, &c)| -pred.data[i * n + c].clamp(CE_FLOOR, 1.0).ln())
        .sum();
    Ok(total / truth.num_pixels() as f64)
}

pub fn combo_loss(pred: &ProbMap, truth: &LabelMask) -> Result<f64> {
    Ok(dice_loss(pred, truth, DEFAULT_DICE_EPS)? + ce_loss(pred, truth)?)
}

/// `d combo_loss / d pred[pixel][class]`, laid out like [`ProbMap`] data.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub dice: Vec<f64>,
    pub ce: Vec<f64>,
}

impl GradientField {
    pub fn get(&self, pixel: usize, class: usize) -> f64 {
        let i = pixel * self.classes + class;
        self.dice[i] + self.ce[i]
    }

    pub fn total(&self) -> Vec<f64> {
        self.dice.iter().zip(&self.ce).map(|(a, b)| a + b).collect()
    }
}

/// Analytic gradient of [`combo_loss`], each entry treated independently.
pub fn loss_gradient(pred: &ProbMap, truth: &LabelMask) -> Result<GradientField> {
    check_pair(pred, truth)?;
    if let Some(bad) = pred.data.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::Validation(format!(
            "gradient needs probabilities strictly inside (0, 1), found {bad}"
        )));
    }
    let n = pred.classes;
    let v = truth.num_pixels() as f64;
    let eps = DEFAULT_DICE_EPS;
    let sums = dice_sums(pred, truth);
    let mut dice = vec![0.0; pred.data.len()];
    let mut ce = vec![0.0; pred.data.len()];
    for (i, &label) in truth.data.iter().enumerate() {
        for c in 0..n {
            let idx = i * n + c;
            let y = if c == label { 1.0 } else { 0.0 };
            let (inter, union) = sums[c];
            let denom = union + eps;
            // d/dp of -(2I + eps)/(U + eps)
            dice[idx] = -(2.0 * y * denom - (2.0 * inter + eps)) / (denom * denom);
            ce[idx] = -y / (pred.data[idx] * v);
        }
    }
    Ok(GradientField {
        height: pred.height,
        width: pred.width,
        classes: n,
        dice,
        ce,
    })
}

/// True positives, false positives, false negatives for one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn confusion(pred: &LabelMask, truth: &LabelMask, class: usize) -> Result<Confusion> {
    check_masks(pred, truth)?;
    let mut c = Confusion { tp: 0, fp: 0, fn_: 0 };
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        match (p == class, t == class) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

/// `2TP / (2TP + FP + FN)`; 1.0 when the class is absent from both masks.
pub fn dsc_metric(pred: &LabelMask, truth: &LabelMask, class: usize) -> Result<f64> {
    let c = confusion(pred, truth, class)?;
    let denom = 2 * c.tp + c.fp + c.fn_;
    Ok(if denom == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    })
}

/// `TP / (TP + FP + FN)`; 1.0 when the class is absent from both masks.
pub fn iou_metric(pred: &LabelMask, truth: &LabelMask, class: usize) -> Result<f64> {
    let c = confusion(pred, truth, class)?;
    let denom = c.tp + c.fp + c.fn_;
    Ok(if denom == 0 {
        1.0
    } else {
        c.tp as f64 / denom as f64
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HausdorffMode {
    /// 95th percentile of the pooled directed distances.
    #[default]
    Percentile95,
    /// Classic symmetric Hausdorff: the maximum directed distance.
    Max,
}

const EDT_FAR: f64 = 1e20;

/// Squared distance from every pixel to the nearest pixel where `inside` is
/// true (exact Euclidean distance transform, separable lower-envelope method).
pub fn squared_distance_transform(inside: &[bool], height: usize, width: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = inside.iter().map(|&b| if b { 0.0 } else { EDT_FAR }).collect();
    let mut buf = Vec::new();
    for x in 0..width {
        buf.clear();
        buf.extend((0..height).map(|y| grid[y * width + x]));
        let out = envelope_1d(&buf);
        for y in 0..height {
            grid[y * width + x] = out[y];
        }
    }
    for y in 0..height {
        let row = &mut grid[y * width..(y + 1) * width];
        let out = envelope_1d(row);
        row.copy_from_slice(&out);
    }
    grid
}

/// `d[q] = min_p (q - p)^2 + f[p]` via the lower envelope of parabolas.
fn envelope_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    if n == 0 {
        return d;
    }
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf)
    };
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let diff = q as f64 - v[k] as f64;
        *out = diff * diff + f[v[k]];
    }
    d
}

/// Linear-interpolation percentile of already sorted values.
fn sorted_percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn hd95_metric(pred: &LabelMask, truth: &LabelMask, class: usize) -> Result<f64> {
    hausdorff(pred, truth, class, HausdorffMode::Percentile95)
}

/// Pooled directed point-to-set distances between the `class` pixels of the
/// two masks, reduced by `mode`.
pub fn hausdorff(pred: &LabelMask, truth: &LabelMask, class: usize, mode: HausdorffMode) -> Result<f64> {
    check_masks(pred, truth)?;
    let in_pred: Vec<bool> = pred.data.iter().map(|&c| c == class).collect();
    let in_truth: Vec<bool> = truth.data.iter().map(|&c| c == class).collect();
    if !in_pred.iter().any(|&b| b) || !in_truth.iter().any(|&b| b) {
        return Err(Error::UndefinedMetric(format!(
            "class {class} is empty in prediction or truth"
        )));
    }
    let (h, w) = (pred.height, pred.width);
    let to_truth = squared_distance_transform(&in_truth, h, w);
    let to_pred = squared_distance_transform(&in_pred, h, w);
    let mut pooled: Vec<f64> = Vec::new();
    for i in 0..in_pred.len() {
        if in_pred[i] {
            pooled.push(to_truth[i].sqrt());
        }
        if in_truth[i] {
            pooled.push(to_pred[i].sqrt());
        }
    }
    pooled.sort_by(f64::total_cmp);
    Ok(match mode {
        HausdorffMode::Percentile95 => sorted_percentile(&pooled, 95.0),
        HausdorffMode::Max => *pooled.last().expect("non-empty"),
    })
}

/// One line of the per-image metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub class: usize,
    pub dsc: f64,
    pub iou: f64,
    pub hd95: Option<f64>,
}

pub fn evaluate(pred: &LabelMask, truth: &LabelMask, classes: &[usize]) -> Result<Vec<MetricsRecord>> {
    classes
        .iter()
        .map(|&class| {
            let hd95 = match hd95_metric(pred, truth, class) {
                Ok(v) => Some(v),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(MetricsRecord {
                class,
                dsc: dsc_metric(pred, truth, class)?,
                iou: iou_metric(pred, truth, class)?,
                hd95,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    #[serde(rename = "mDSC")]
    pub mean_dsc: Option<f64>,
    #[serde(rename = "mIoU")]
    pub mean_iou: Option<f64>,
    #[serde(rename = "mHD95")]
    pub mean_hd95: Option<f64>,
}

/// Means over non-null entries.
pub fn summarize(records: &[MetricsRecord]) -> MetricsSummary {
    fn mean(vals: impl Iterator<Item = f64>) -> Option<f64> {
        let (sum, n) = vals.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
    MetricsSummary {
        mean_dsc: mean(records.iter().map(|r| r.dsc)),
        mean_iou: mean(records.iter().map(|r| r.iou)),
        mean_hd95: mean(records.iter().filter_map(|r| r.hd95)),
    }
}
