//! Grid sweeps over threshold policies, RoI sizes and prompt perturbations.
//!
//! Every cell runs the full pipeline on a seeded synthetic scene and records
//! one CSV row. A failing cell is written with `status = error` and the sweep
//! moves on. Output bytes depend only on the spec.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::pipeline::{image_seed, perturb_prompt, Model, PipelineConfig, PipelineOutput, PromptPerturbation};
use crate::prune::{retention_target, RelevanceBundle, ThresholdPolicy};
use crate::roi::{map_box_to_grid, BoxPrompt, GridBox};
use crate::synth::{generate_scene_with, Scene, TargetKind, DEFAULT_SCENE_SIZE};

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const AUDIT_DIR: &str = "audits";

/// Default partial and oversized magnitude.
pub const DEFAULT_PERTURBATION_MAGNITUDE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    /// Scene `s` uses `kinds[s % kinds.len()]`.
    pub kinds: Vec<TargetKind>,
    pub size: usize,
    pub channels: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            kinds: TargetKind::ALL.to_vec(),
            size: DEFAULT_SCENE_SIZE,
            channels: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub policies: Vec<ThresholdPolicy>,
    pub k_values: Vec<usize>,
    pub perturbations: Vec<PromptPerturbation>,
    /// Number of scenes; scene `s` is generated from `image_seed(pipeline.seed, s)`.
    pub seeds: usize,
    pub scene: SceneSpec,
    /// Base configuration; each cell overrides its policy and `k`.
    pub pipeline: PipelineConfig,
    pub write_audits: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        use crate::pipeline::PerturbationKind::*;
        let m = DEFAULT_PERTURBATION_MAGNITUDE;
        Self {
            policies: vec![ThresholdPolicy::default()],
            k_values: vec![crate::roi::DEFAULT_ROI_K],
            perturbations: vec![
                PromptPerturbation::TIGHT,
                PromptPerturbation { kind: Oversized, magnitude: m },
                PromptPerturbation { kind: Partial, magnitude: m },
                PromptPerturbation { kind: Misleading, magnitude: 0.0 },
            ],
            seeds: 10,
            scene: SceneSpec::default(),
            pipeline: PipelineConfig::default(),
            write_audits: false,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() || self.k_values.is_empty() || self.perturbations.is_empty() {
            return Err(Error::Config("policies, k_values and perturbations must be non-empty".into()));
        }
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be at least 1".into()));
        }
        if self.scene.kinds.is_empty() {
            return Err(Error::Config("scene.kinds must be non-empty".into()));
        }
        for p in &self.policies {
            p.validate()?;
        }
        for p in &self.perturbations {
            p.validate()?;
        }
        for &k in &self.k_values {
            let mut cfg = self.pipeline.clone();
            cfg.prune.k = k;
            cfg.validate()?;
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.policies.len() * self.k_values.len() * self.perturbations.len() * self.seeds
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellRecord {
    pub policy_mode: String,
    pub policy_value: f64,
    pub k: usize,
    pub perturbation: String,
    pub magnitude: f64,
    pub seed: usize,
    pub scene_seed: u64,
    pub scene_kind: String,
    pub status: String,
    #[serde(rename = "Z")]
    pub z: Option<usize>,
    pub retained: Option<usize>,
    pub token_sparsity: Option<f64>,
    pub flops_full: Option<u64>,
    pub flops_pruned: Option<u64>,
    pub flops_reduction: Option<f64>,
    /// Overlap-weighted share of tokens kept under the prompt actually given.
    pub prompt_density: Option<f64>,
    /// Same share under the scene's tight box.
    pub target_density: Option<f64>,
    /// First-stage relevance, overlap-weighted over tokens touching the prompt.
    pub mean_r_in: Option<f64>,
    /// First-stage relevance over tokens not touching the prompt.
    pub mean_r_out: Option<f64>,
    pub audit_ok: Option<bool>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub policy_mode: String,
    pub policy_value: f64,
    pub k: usize,
    pub perturbation: String,
    pub magnitude: f64,
    pub cells: usize,
    pub failures: usize,
    pub mean_token_sparsity: Option<f64>,
    pub mean_flops_reduction: Option<f64>,
    pub mean_prompt_density: Option<f64>,
    pub mean_target_density: Option<f64>,
    pub mean_r_in: Option<f64>,
    pub mean_r_out: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub cells: usize,
    pub failures: usize,
    pub groups: Vec<GroupSummary>,
    pub csv: PathBuf,
}

/// Runs every cell of `spec`, writing `sweep.csv`, `summary.json` and
/// optionally per-stage audits under `out_dir`.
pub fn run_sweep(spec: &SweepSpec, out_dir: &Path) -> Result<SweepSummary> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let records = sweep_records(spec, out_dir)?;

    let csv_path = out_dir.join(SWEEP_CSV);
    let file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for r in &records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let summary = summarize(&records, csv_path);
    let json_path = out_dir.join(SUMMARY_JSON);
    fs::write(&json_path, serde_json::to_vec_pretty(&summary)?).map_err(|e| Error::io(&json_path, e))?;
    Ok(summary)
}

/// Cell records in `(policy, k, perturbation, seed)` order without writing
/// the CSV. Audits are still written when the spec asks for them.
pub fn sweep_records(spec: &SweepSpec, out_dir: &Path) -> Result<Vec<CellRecord>> {
    spec.validate()?;
    let scenes: Vec<Result<Scene>> = (0..spec.seeds)
        .map(|s| {
            let kind = spec.scene.kinds[s % spec.scene.kinds.len()];
            let seed = image_seed(spec.pipeline.seed, s);
            generate_scene_with(kind, spec.scene.size, spec.scene.channels, seed)
        })
        .collect();

    let mut records = Vec::with_capacity(spec.num_cells());
    for policy in &spec.policies {
        for &k in &spec.k_values {
            let mut cfg = spec.pipeline.clone();
            cfg.prune.policy = *policy;
            cfg.prune.k = k;
            let model = Model::new(&cfg, spec.scene.channels, spec.scene.size, spec.scene.size);
            for perturbation in &spec.perturbations {
                for (s, scene) in scenes.iter().enumerate() {
                    let mut rec = CellRecord::blank(policy, k, perturbation, s, image_seed(cfg.seed, s));
                    let outcome = match (&model, scene) {
                        (Ok(model), Ok(scene)) => {
                            rec.scene_kind = scene.target_kind.name().to_string();
                            run_cell(model, scene, perturbation, s, spec, out_dir, &mut rec)
                        }
                        (Err(e), _) | (_, Err(e)) => Err(e.to_string()),
                    };
                    if let Err(msg) = outcome {
                        rec.status = "error".into();
                        rec.error = msg;
                    }
                    records.push(rec);
                }
            }
        }
    }
    Ok(records)
}

impl CellRecord {
    fn blank(policy: &ThresholdPolicy, k: usize, p: &PromptPerturbation, seed: usize, scene_seed: u64) -> Self {
        Self {
            policy_mode: policy.mode_name().to_string(),
            policy_value: policy.value(),
            k,
            perturbation: p.kind.name().to_string(),
            magnitude: p.magnitude,
            seed,
            scene_seed,
            scene_kind: String::new(),
            status: "ok".into(),
            z: None,
            retained: None,
            token_sparsity: None,
            flops_full: None,
            flops_pruned: None,
            flops_reduction: None,
            prompt_density: None,
            target_density: None,
            mean_r_in: None,
            mean_r_out: None,
            audit_ok: None,
            error: String::new(),
        }
    }
}

/// Fills `rec` from one pipeline run. I/O failures while writing audits
/// abort the cell like any other error.
fn run_cell(
    model: &Model,
    scene: &Scene,
    perturbation: &PromptPerturbation,
    seed: usize,
    spec: &SweepSpec,
    out_dir: &Path,
    rec: &mut CellRecord,
) -> std::result::Result<(), String> {
    let prompt = cell_prompt(scene, perturbation, model.config.seed, seed);
    let out = model.run(&scene.image, &prompt).map_err(|e| e.to_string())?;
    let cost = &out.cost;
    rec.z = Some(cost.tokens_full);
    rec.retained = Some(cost.final_retained());
    rec.token_sparsity = Some(cost.token_sparsity);
    rec.flops_full = Some(cost.flops_full);
    rec.flops_pruned = Some(cost.flops_pruned);
    rec.flops_reduction = Some(cost.flops_reduction);

    let (gh, gw) = (model.shape.grid_h, model.shape.grid_w);
    let prompt_grid = map_box_to_grid(&prompt, gh, gw).map_err(|e| e.to_string())?;
    let target_grid = map_box_to_grid(&scene.tight_box, gh, gw).map_err(|e| e.to_string())?;
    rec.prompt_density = retention_density(&out, &prompt_grid, gw);
    rec.target_density = retention_density(&out, &target_grid, gw);
    if let Some(stage) = out.stages.first() {
        let (r_in, r_out) = relevance_split(&stage.bundle, &stage.coords, &prompt_grid);
        rec.mean_r_in = r_in;
        rec.mean_r_out = r_out;
    }
    rec.audit_ok = Some(out.stages.iter().all(|s| audit_bundle(&s.bundle)));

    if spec.write_audits {
        let dir = out_dir.join(AUDIT_DIR);
        for st in &out.stages {
            let stem = format!(
                "{}{}_k{}_{}{}_s{}_b{}",
                rec.policy_mode, rec.policy_value, rec.k, rec.perturbation, rec.magnitude, seed, st.block
            );
            st.bundle.write_audit(&dir, &stem).map_err(|e| e.to_string())?;
        }
    }
    Ok(())
}

/// Overlap-weighted fraction of grid tokens under `region` that survive.
pub fn retention_density(out: &PipelineOutput, region: &GridBox, grid_w: usize) -> Option<f64> {
    let mut kept = 0.0;
    let mut total = 0.0;
    for (i, &alive) in out.pruned.retained.iter().enumerate() {
        let w = region.cell_overlap(i / grid_w, i % grid_w);
        total += w;
        if alive {
            kept += w;
        }
    }
    (total > 0.0).then(|| kept / total)
}

/// Mean relevance inside the region (overlap-weighted) and outside it.
pub fn relevance_split(
    bundle: &RelevanceBundle,
    coords: &[crate::tokenizer::GridCoord],
    region: &GridBox,
) -> (Option<f64>, Option<f64>) {
    let (mut wsum, mut win) = (0.0, 0.0);
    let (mut nout, mut sout) = (0usize, 0.0);
    for (c, &r) in coords.iter().zip(&bundle.relevance) {
        let w = region.cell_overlap(c.row, c.col);
        if w > 0.0 {
            wsum += w;
            win += w * r;
        } else {
            nout += 1;
            sout += r;
        }
    }
    ((wsum > 0.0).then(|| win / wsum), (nout > 0).then(|| sout / nout as f64))
}

/// Structural checks on a stage bundle: normalized rho rows, entropy range,
/// `weights = 1 - ranks`, and the retention count for percentile policies.
pub fn audit_bundle(b: &RelevanceBundle) -> bool {
    let z = b.num_tokens();
    let max_h = (z as f64).log2() + 1e-9;
    let rows_ok = b.rho.row_iter().all(|row| (row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    let entropy_ok = b.entropy.iter().all(|&h| (0.0..=max_h).contains(&h));
    let weights_ok = b
        .ranks
        .iter()
        .zip(&b.weights)
        .all(|(&r, &w)| (w - (1.0 - r)).abs() <= f64::EPSILON);
    let count_ok = match b.policy {
        ThresholdPolicy::Percentile(q) => b.retained() == retention_target(z, q),
        ThresholdPolicy::Fixed(_) => true,
    };
    rows_ok && entropy_ok && weights_ok && count_ok
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut n, mut s) = (0usize, 0.0);
    for v in values.flatten() {
        n += 1;
        s += v;
    }
    (n > 0).then(|| s / n as f64)
}

fn summarize(records: &[CellRecord], csv: PathBuf) -> SweepSummary {
    // Keyed by first appearance so group order follows the sweep order.
    let mut order: Vec<&CellRecord> = Vec::new();
    let mut groups: BTreeMap<usize, Vec<&CellRecord>> = BTreeMap::new();
    for r in records {
        let idx = order
            .iter()
            .position(|o| {
                o.policy_mode == r.policy_mode
                    && o.policy_value == r.policy_value
                    && o.k == r.k
                    && o.perturbation == r.perturbation
                    && o.magnitude == r.magnitude
            })
            .unwrap_or_else(|| {
                order.push(r);
                order.len() - 1
            });
        groups.entry(idx).or_default().push(r);
    }
    let groups = groups
        .into_iter()
        .map(|(idx, rs)| {
            let head = order[idx];
            GroupSummary {
                policy_mode: head.policy_mode.clone(),
                policy_value: head.policy_value,
                k: head.k,
                perturbation: head.perturbation.clone(),
                magnitude: head.magnitude,
                cells: rs.len(),
                failures: rs.iter().filter(|r| r.status != "ok").count(),
                mean_token_sparsity: mean(rs.iter().map(|r| r.token_sparsity)),
                mean_flops_reduction: mean(rs.iter().map(|r| r.flops_reduction)),
                mean_prompt_density: mean(rs.iter().map(|r| r.prompt_density)),
                mean_target_density: mean(rs.iter().map(|r| r.target_density)),
                mean_r_in: mean(rs.iter().map(|r| r.mean_r_in)),
                mean_r_out: mean(rs.iter().map(|r| r.mean_r_out)),
            }
        })
        .collect();
    SweepSummary {
        cells: records.len(),
        failures: records.iter().filter(|r| r.status != "ok").count(),
        groups,
        csv,
    }
}

/// Box used by [`run_cell`] for seed `s`; exposed so callers can reproduce a cell.
pub fn cell_prompt(scene: &Scene, p: &PromptPerturbation, base_seed: u64, s: usize) -> BoxPrompt {
    let mut rng = Rng::new(image_seed(base_seed, s));
    perturb_prompt(&scene.tight_box, p, &mut rng)
}
