//! Losses and segmentation metrics against counting, summation and
//! finite-difference oracles.

use prato_core::evalmetrics::{
    ce_loss, combo_loss, dice_loss, dsc_metric, evaluate, hausdorff, hd95_metric, iou_metric, loss_gradient,
    summarize, HausdorffMode, LabelMask, ProbMap, DEFAULT_DICE_EPS,
};
use prato_core::{Error, Rng};
use proptest::prelude::*;

fn random_mask(rng: &mut Rng, h: usize, w: usize, classes: usize) -> LabelMask {
    LabelMask::from_fn(h, w, classes, |_, _| rng.below(classes)).unwrap()
}

fn random_probs(rng: &mut Rng, h: usize, w: usize, n: usize) -> ProbMap {
    let mut data = Vec::with_capacity(h * w * n);
    for _ in 0..h * w {
        let raw: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.05, 1.0)).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    ProbMap::new(h, w, n, data).unwrap()
}

fn dice_oracle(pred: &ProbMap, truth: &LabelMask, eps: f64) -> f64 {
    let n = pred.classes();
    let mut total = n as f64;
    for a in 0..n {
        let (mut inter, mut union) = (0.0, 0.0);
        for i in 0..pred.num_pixels() {
            let y = if truth.data()[i] == a { 1.0 } else { 0.0 };
            inter += pred.get(i, a) * y;
            union += pred.get(i, a) + y;
        }
        total -= (2.0 * inter + eps) / (union + eps);
    }
    total
}

fn ce_oracle(pred: &ProbMap, truth: &LabelMask) -> f64 {
    let mut acc = 0.0;
    for i in 0..pred.num_pixels() {
        for a in 0..pred.classes() {
            if truth.data()[i] == a {
                acc -= pred.get(i, a).clamp(1e-12, 1.0).ln();
            }
        }
    }
    acc / pred.num_pixels() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_match_summation_oracles(seed: u64, h in 1usize..10, w in 1usize..10, n in 2usize..5) {
        let mut rng = Rng::new(seed);
        let truth = random_mask(&mut rng, h, w, n);
        let pred = random_probs(&mut rng, h, w, n);
        let d = dice_loss(&pred, &truth, DEFAULT_DICE_EPS).unwrap();
        let c = ce_loss(&pred, &truth).unwrap();
        prop_assert!((d - dice_oracle(&pred, &truth, DEFAULT_DICE_EPS)).abs() < 1e-12);
        prop_assert!((c - ce_oracle(&pred, &truth)).abs() < 1e-12);
        prop_assert!((combo_loss(&pred, &truth).unwrap() - (d + c)).abs() < 1e-12);
        prop_assert!(d >= 0.0 && d <= n as f64 && c >= 0.0);
    }

    #[test]
    fn dice_iou_identity_and_symmetry(seed: u64, h in 1usize..16, w in 1usize..16) {
        let mut rng = Rng::new(seed);
        let a = random_mask(&mut rng, h, w, 2);
        let b = random_mask(&mut rng, h, w, 2);
        let dsc = dsc_metric(&a, &b, 1).unwrap();
        let iou = iou_metric(&a, &b, 1).unwrap();
        prop_assert!((dsc - 2.0 * iou / (1.0 + iou)).abs() <= 1e-12);
        prop_assert_eq!(dsc, dsc_metric(&b, &a, 1).unwrap());
        prop_assert_eq!(iou, iou_metric(&b, &a, 1).unwrap());
    }

    #[test]
    fn hd95_is_symmetric(seed: u64) {
        let mut rng = Rng::new(seed);
        let a = random_mask(&mut rng, 12, 12, 2);
        let b = random_mask(&mut rng, 12, 12, 2);
        if a.count(1) > 0 && b.count(1) > 0 {
            prop_assert_eq!(hd95_metric(&a, &b, 1).unwrap(), hd95_metric(&b, &a, 1).unwrap());
            let max = hausdorff(&a, &b, 1, HausdorffMode::Max).unwrap();
            prop_assert!(hd95_metric(&a, &b, 1).unwrap() <= max);
        }
    }
}

#[test]
fn hd95_matches_all_pairs_on_sparse_masks() {
    let mut rng = Rng::new(3);
    for _ in 0..100 {
        let density = rng.uniform_range(0.01, 0.2);
        let mut make = || LabelMask::from_fn(32, 32, 2, |_, _| usize::from(rng.uniform() < density)).unwrap();
        let (a, b) = (make(), make());
        let (pa, pb) = (a.pixels_of(1), b.pixels_of(1));
        if pa.is_empty() || pb.is_empty() {
            continue;
        }
        let nearest = |p: &(usize, usize), set: &[(usize, usize)]| {
            set.iter()
                .map(|q| ((p.0 as f64 - q.0 as f64).powi(2) + (p.1 as f64 - q.1 as f64).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        };
        let mut d: Vec<f64> = pa.iter().map(|p| nearest(p, &pb)).collect();
        d.extend(pb.iter().map(|p| nearest(p, &pa)));
        d.sort_by(f64::total_cmp);
        let pos = 0.95 * (d.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let want = d[lo] + (pos - lo as f64) * (d[pos.ceil() as usize] - d[lo]);
        assert!((hd95_metric(&a, &b, 1).unwrap() - want).abs() < 1e-9);
        let max = hausdorff(&a, &b, 1, HausdorffMode::Max).unwrap();
        assert!((max - d[d.len() - 1]).abs() < 1e-9);
    }
}

#[test]
fn hd95_examples() {
    let single = |y, x| LabelMask::from_fn(10, 10, 2, move |r, c| usize::from(r == y && c == x)).unwrap();
    assert_eq!(hd95_metric(&single(1, 1), &single(4, 5), 1).unwrap(), 5.0);
    assert_eq!(hd95_metric(&single(2, 2), &single(2, 2), 1).unwrap(), 0.0);
    let empty = LabelMask::from_fn(10, 10, 2, |_, _| 0).unwrap();
    assert!(matches!(hd95_metric(&empty, &single(0, 0), 1), Err(Error::UndefinedMetric(_))));
}

#[test]
fn overlap_examples() {
    let truth = LabelMask::from_fn(4, 4, 2, |_, x| usize::from(x < 2)).unwrap();
    let half = LabelMask::from_fn(4, 4, 2, |_, x| usize::from(x == 0)).unwrap();
    assert_eq!(dsc_metric(&half, &truth, 1).unwrap(), 2.0 / 3.0);
    assert_eq!(iou_metric(&half, &truth, 1).unwrap(), 0.5);
    let flipped = LabelMask::from_fn(4, 4, 2, |_, x| usize::from(x >= 2)).unwrap();
    assert_eq!(dsc_metric(&flipped, &truth, 1).unwrap(), 0.0);
    assert_eq!(dsc_metric(&truth, &truth, 1).unwrap(), 1.0);
    let none = LabelMask::from_fn(4, 4, 3, |_, _| 0).unwrap();
    assert_eq!(dsc_metric(&none, &none, 2).unwrap(), 1.0);
    assert_eq!(iou_metric(&none, &none, 2).unwrap(), 1.0);
}

#[test]
fn loss_examples() {
    let truth = LabelMask::from_fn(10, 10, 2, |y, _| usize::from(y < 5)).unwrap();
    assert!(dice_loss(&ProbMap::one_hot(&truth), &truth, DEFAULT_DICE_EPS).unwrap() < 1e-4);
    let uniform = ProbMap::uniform(10, 10, 3);
    let truth3 = LabelMask::from_fn(10, 10, 3, |y, x| (y + x) % 3).unwrap();
    assert!((ce_loss(&uniform, &truth3).unwrap() - 3f64.ln()).abs() < 1e-12);
    let disjoint = ProbMap::one_hot(&LabelMask::from_fn(10, 10, 2, |y, _| usize::from(y >= 5)).unwrap());
    assert!((dice_loss(&disjoint, &truth, DEFAULT_DICE_EPS).unwrap() - 2.0).abs() < 1e-6);
    let bad = LabelMask::from_fn(9, 10, 2, |_, _| 0).unwrap();
    assert!(matches!(dice_loss(&uniform, &bad, DEFAULT_DICE_EPS), Err(Error::Shape(_))));
}

#[test]
fn gradients_match_finite_differences() {
    let (h, w, n) = (8, 8, 3);
    let mut rng = Rng::new(8);
    for _ in 0..50 {
        let truth = random_mask(&mut rng, h, w, n);
        let pred = random_probs(&mut rng, h, w, n);
        let g = loss_gradient(&pred, &truth).unwrap();
        let total = g.total();
        for idx in (0..h * w * n).step_by(7) {
            let at = |delta: f64| {
                let mut d = pred.data().to_vec();
                d[idx] += delta;
                combo_loss(&ProbMap::new_unchecked(h, w, n, d).unwrap(), &truth).unwrap()
            };
            let fd = (at(1e-6) - at(-1e-6)) / 2e-6;
            let rel = (fd - total[idx]).abs() / fd.abs().max(total[idx].abs()).max(1e-8);
            assert!(rel < 1e-4, "entry {idx}: analytic {} vs fd {fd}", total[idx]);
        }
    }
}

#[test]
fn ce_gradient_at_uniform_prediction() {
    let (h, w, n) = (4, 5, 3);
    let truth = LabelMask::from_fn(h, w, n, |y, x| (y * w + x) % n).unwrap();
    let dense = vec![1.0 / n as f64; h * w * n];
    let g = loss_gradient(&ProbMap::new(h, w, n, dense).unwrap(), &truth).unwrap();
    let v = (h * w) as f64;
    for i in 0..h * w {
        for a in 0..n {
            let y = if truth.data()[i] == a { 1.0 } else { 0.0 };
            assert!((g.ce[i * n + a] + y * n as f64 / v).abs() < 1e-12);
        }
    }
}

#[test]
fn boundary_probabilities_rejected_for_gradients() {
    let truth = LabelMask::from_fn(2, 2, 2, |_, _| 1).unwrap();
    assert!(matches!(loss_gradient(&ProbMap::one_hot(&truth), &truth), Err(Error::Validation(_))));
}

#[test]
fn report_records_and_means() {
    let truth = LabelMask::from_fn(8, 8, 3, |y, _| if y < 3 { 1 } else { 0 }).unwrap();
    let pred = LabelMask::from_fn(8, 8, 3, |y, _| if y < 4 { 1 } else { 0 }).unwrap();
    let records = evaluate(&pred, &truth, &[1, 2]).unwrap();
    assert_eq!(records.len(), 2);
    assert!(records[1].hd95.is_none());
    let json = serde_json::to_value(&records[1]).unwrap();
    assert!(json["hd95"].is_null());
    let s = summarize(&records);
    let v = serde_json::to_value(&s).unwrap();
    assert!(v.get("mDSC").is_some() && v.get("mHD95").is_some());
}
