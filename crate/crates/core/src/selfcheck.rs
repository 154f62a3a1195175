//! Quick oracle and property checks behind `prato check`.
//!
//! Each check compares a library routine against a small brute-force
//! reimplementation on seeded random inputs. They are sized to finish in
//! a few seconds in total.

use serde::Serialize;

use crate::evalmetrics::{combo_loss, dsc_metric, hd95_metric, iou_metric, loss_gradient, LabelMask, ProbMap};
use crate::numerics::{matmul, Matrix, Rng};
use crate::pipeline::{estimate_flops, run_pipeline, BlockFlops, PipelineConfig};
use crate::prune::{
    build_mask, compute_entropy, inverse_entropy_weights, retention_target, PruneConfig, ThresholdPolicy,
};
use crate::roi::{roi_align, GridBox};
use crate::synth::{generate_scene, TargetKind};
use crate::tokenizer::{GridShape, TokenGrid};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(&mut Rng) -> Result<String, String>;

const CHECKS: &[(&str, Check)] = &[
    ("matmul_oracle", check_matmul),
    ("entropy_oracle", check_entropy),
    ("rank_grid", check_rank_grid),
    ("retention_count", check_retention),
    ("roi_constant_field", check_roi_constant),
    ("dice_iou_identity", check_dice_iou),
    ("hd95_oracle", check_hd95),
    ("loss_gradient", check_gradient),
    ("flops_recount", check_flops),
    ("pipeline_determinism", check_determinism),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check from `seed`; a panic inside a check counts as failure.
pub fn run_checks(seed: u64) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let mut rng = Rng::new(seed.wrapping_add(i as u64));
            let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(&mut rng)))
                .unwrap_or_else(|_| Err("panicked".into()));
            match result {
                Ok(detail) => CheckOutcome { name, passed: true, detail },
                Err(detail) => CheckOutcome { name, passed: false, detail },
            }
        })
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn check_matmul(rng: &mut Rng) -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (n, k, m) = (1 + rng.below(12), 1 + rng.below(12), 1 + rng.below(12));
        let a = Matrix::gaussian(n, k, 1.0, rng);
        let b = Matrix::gaussian(k, m, 1.0, rng);
        let c = matmul(&a, &b).map_err(|e| e.to_string())?;
        for i in 0..n {
            for j in 0..m {
                let want: f64 = (0..k).map(|t| a.get(i, t) * b.get(t, j)).sum();
                worst = worst.max((c.get(i, j) - want).abs());
            }
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:e}"))
}

fn check_entropy(rng: &mut Rng) -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let z = 2 + rng.below(60);
        let raw: Vec<f64> = (0..z).map(|_| rng.uniform()).collect();
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let h = compute_entropy(&p).map_err(|e| e.to_string())?;
        let direct: f64 = -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.log2()).sum::<f64>();
        worst = worst.max((h - direct).abs());
    }
    let uniform = compute_entropy(&[0.0625; 16]).map_err(|e| e.to_string())?;
    let one_hot = compute_entropy(&[0.0, 1.0, 0.0]).map_err(|e| e.to_string())?;
    ensure(worst <= 1e-9 && uniform == 4.0 && one_hot == 0.0, || {
        format!("deviation {worst:e}, uniform {uniform}, one-hot {one_hot}")
    })?;
    Ok(format!("max deviation {worst:e}"))
}

fn check_rank_grid(rng: &mut Rng) -> Result<String, String> {
    let m = 25;
    for _ in 0..100 {
        let h: Vec<f64> = (0..m).map(|_| rng.uniform()).collect();
        let (_, mut w) = inverse_entropy_weights(&h).map_err(|e| e.to_string())?;
        w.sort_by(f64::total_cmp);
        let grid: Vec<f64> = (0..m).map(|j| j as f64 / (m - 1) as f64).collect();
        ensure(w == grid, || "sorted weights left the uniform grid".into())?;
    }
    Ok("100 vectors on the grid".into())
}

fn check_retention(rng: &mut Rng) -> Result<String, String> {
    let mut cases = 0;
    for &q in &[25.0, 35.0, 50.0, 55.0, 75.0] {
        for _ in 0..20 {
            let z = 4 + rng.below(1021);
            // Few distinct values to force ties.
            let r: Vec<f64> = (0..z).map(|_| rng.below(5) as f64).collect();
            let (mask, _) = build_mask(&r, ThresholdPolicy::Percentile(q)).map_err(|e| e.to_string())?;
            let kept = mask.iter().filter(|&&b| b).count();
            let want = (z * (100 - q as usize)).div_ceil(100);
            ensure(kept == want && retention_target(z, q) == want, || {
                format!("Z={z} q={q}: kept {kept}, expected {want}")
            })?;
            cases += 1;
        }
    }
    Ok(format!("{cases} cases"))
}

fn check_roi_constant(rng: &mut Rng) -> Result<String, String> {
    let shape = GridShape { grid_h: 7, grid_w: 9, patch_size: 1 };
    let value = rng.gaussian();
    let grid = TokenGrid::new(Matrix::from_fn(63, 3, |_, _| value), shape).map_err(|e| e.to_string())?;
    for _ in 0..50 {
        let x1 = rng.uniform_range(0.0, 8.0);
        let y1 = rng.uniform_range(0.0, 6.0);
        let b = GridBox {
            x1,
            y1,
            x2: rng.uniform_range(x1 + 0.01, 9.0),
            y2: rng.uniform_range(y1 + 0.01, 7.0),
        };
        let k = 1 + rng.below(6);
        let f = roi_align(&grid, &b, k, 1 + rng.below(3)).map_err(|e| e.to_string())?;
        ensure(f.features.data().iter().all(|&v| v == value), || format!("box {b:?} broke constancy"))?;
    }
    Ok("50 boxes".into())
}

fn random_mask(rng: &mut Rng, h: usize, w: usize, density: f64) -> LabelMask {
    LabelMask::from_fn(h, w, 2, |_, _| usize::from(rng.uniform() < density)).expect("binary labels")
}

fn check_dice_iou(rng: &mut Rng) -> Result<String, String> {
    for _ in 0..200 {
        let a = random_mask(rng, 12, 12, 0.4);
        let b = random_mask(rng, 12, 12, 0.4);
        let dsc = dsc_metric(&a, &b, 1).map_err(|e| e.to_string())?;
        let iou = iou_metric(&a, &b, 1).map_err(|e| e.to_string())?;
        ensure((dsc - 2.0 * iou / (1.0 + iou)).abs() <= 1e-12, || format!("dsc {dsc} iou {iou}"))?;
    }
    Ok("200 pairs".into())
}

fn check_hd95(rng: &mut Rng) -> Result<String, String> {
    for _ in 0..20 {
        let a = random_mask(rng, 16, 16, 0.1);
        let b = random_mask(rng, 16, 16, 0.1);
        let (pa, pb) = (a.pixels_of(1), b.pixels_of(1));
        if pa.is_empty() || pb.is_empty() {
            continue;
        }
        let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> Vec<f64> {
            from.iter()
                .map(|&(y, x)| {
                    to.iter()
                        .map(|&(v, u)| ((y as f64 - v as f64).powi(2) + (x as f64 - u as f64).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .collect()
        };
        let mut d = directed(&pa, &pb);
        d.extend(directed(&pb, &pa));
        d.sort_by(f64::total_cmp);
        let pos = 0.95 * (d.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let want = d[lo] + (pos - lo as f64) * (d[pos.ceil() as usize] - d[lo]);
        let got = hd95_metric(&a, &b, 1).map_err(|e| e.to_string())?;
        ensure((got - want).abs() <= 1e-9, || format!("hd95 {got} vs oracle {want}"))?;
    }
    Ok("20 pairs".into())
}

fn check_gradient(rng: &mut Rng) -> Result<String, String> {
    let (h, w, n) = (4, 4, 3);
    let truth = LabelMask::from_fn(h, w, n, |_, _| rng.below(n)).expect("labels in range");
    let mut data = Vec::with_capacity(h * w * n);
    for _ in 0..h * w {
        let raw: Vec<f64> = (0..n).map(|_| 0.1 + rng.uniform()).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    let pred = ProbMap::new(h, w, n, data.clone()).map_err(|e| e.to_string())?;
    let grad = loss_gradient(&pred, &truth).map_err(|e| e.to_string())?.total();
    let step = 1e-6;
    let mut worst: f64 = 0.0;
    for idx in 0..data.len() {
        let eval = |delta: f64| {
            let mut d = data.clone();
            d[idx] += delta;
            combo_loss(&ProbMap::new_unchecked(h, w, n, d).expect("shape"), &truth).expect("loss")
        };
        let fd = (eval(step) - eval(-step)) / (2.0 * step);
        worst = worst.max((fd - grad[idx]).abs() / grad[idx].abs().max(fd.abs()).max(1e-8));
    }
    ensure(worst < 1e-4, || format!("max relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:e}"))
}

fn check_flops(_: &mut Rng) -> Result<String, String> {
    let (z, c) = (256u64, 64u64);
    let live = [256usize, 128, 128, 128];
    let block = |n: u64| 6 * n * c * c + 4 * n * n * c + 2 * n * c * c + 16 * n * c * c;
    let want_full = 4 * block(z);
    let want_pruned: u64 = live.iter().map(|&n| block(n as u64)).sum();
    let (full, pruned) = estimate_flops(256, 64, 4, &live);
    let quarter = BlockFlops::new(128, 64).attention * 4 == BlockFlops::new(256, 64).attention;
    ensure(full == want_full && pruned == want_pruned && quarter, || {
        format!("got ({full}, {pruned}), expected ({want_full}, {want_pruned})")
    })?;
    Ok(format!("full {full}, pruned {pruned}"))
}

fn check_determinism(rng: &mut Rng) -> Result<String, String> {
    let scene = generate_scene(TargetKind::Ellipse, 64, rng.below(1000) as u64).map_err(|e| e.to_string())?;
    let cfg = PipelineConfig {
        embed_dim: 16,
        depth: 2,
        stage_indices: vec![0],
        prune: PruneConfig { d_v: 16, ..PruneConfig::default() },
        ..PipelineConfig::default()
    };
    let a = run_pipeline(&scene.image, &scene.tight_box, &cfg).map_err(|e| e.to_string())?;
    let b = run_pipeline(&scene.image, &scene.tight_box, &cfg).map_err(|e| e.to_string())?;
    ensure(a == b, || "two runs differ".into())?;
    Ok(format!("sparsity {}", a.cost.token_sparsity))
}
