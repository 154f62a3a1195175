//! Tokenizer, encoder stack and pruning stages wired together, plus the
//! FLOPs model and prompt perturbations used by the robustness sweeps.

use serde::{Deserialize, Serialize};

use crate::encoder::{forward, BlockWeights, ResidualMode};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::prune::{prato_score_tokens, MaskMode, Projections, PruneConfig, PrunedTokens, RelevanceBundle};
use crate::roi::BoxPrompt;
use crate::tokenizer::{
    embed_tokens, patchify, standardize_patches, EmbedderWeights, GridCoord, GridShape, ImageTensor, InputNorm,
    PositionalMode,
};

pub const DEFAULT_PATCH_SIZE: usize = 16;
pub const DEFAULT_EMBED_DIM: usize = 64;
pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_DEPTH: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    /// Blocks after which a pruning stage runs.
    pub stage_indices: Vec<usize>,
    pub prune: PruneConfig,
    pub mask_mode: MaskMode,
    pub residual: ResidualMode,
    pub positional: PositionalMode,
    pub input_norm: InputNorm,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            embed_dim: DEFAULT_EMBED_DIM,
            num_heads: DEFAULT_HEADS,
            depth: DEFAULT_DEPTH,
            stage_indices: vec![DEFAULT_DEPTH / 2 - 1],
            prune: PruneConfig::default(),
            mask_mode: MaskMode::default(),
            residual: ResidualMode::default(),
            positional: PositionalMode::default(),
            input_norm: InputNorm::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.patch_size == 0 || self.embed_dim == 0 {
            return Err(Error::Config("patch size and embedding width must be positive".into()));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide embedding width {}",
                self.num_heads, self.embed_dim
            )));
        }
        if let Some(&bad) = self.stage_indices.iter().find(|&&s| s >= self.depth) {
            return Err(Error::Config(format!(
                "stage index {bad} outside [0, {})",
                self.depth
            )));
        }
        self.prune.validate()
    }
}

/// Seeded weights for one image geometry.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: PipelineConfig,
    pub channels: usize,
    pub shape: GridShape,
    pub embedder: EmbedderWeights,
    pub blocks: Vec<BlockWeights>,
    pub projections: Projections,
}

impl Model {
    /// Draws embedder, blocks and projections, in that order, from `config.seed`.
    pub fn new(config: &PipelineConfig, channels: usize, height: usize, width: usize) -> Result<Self> {
        config.validate()?;
        let shape = GridShape::for_image(height, width, config.patch_size)?;
        let mut rng = Rng::new(config.seed);
        let embedder = EmbedderWeights::init(channels, shape, config.embed_dim, config.positional, &mut rng);
        let blocks = (0..config.depth)
            .map(|_| BlockWeights::init(config.embed_dim, config.num_heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let projections = Projections::init(
            config.embed_dim,
            config.prune.d_v,
            config.prune.projection_init,
            &mut rng,
        );
        Ok(Self {
            config: config.clone(),
            channels,
            shape,
            embedder,
            blocks,
            projections,
        })
    }

    pub fn for_image(config: &PipelineConfig, img: &ImageTensor) -> Result<Self> {
        Self::new(config, img.channels(), img.height(), img.width())
    }

    pub fn run(&self, img: &ImageTensor, prompt: &BoxPrompt) -> Result<PipelineOutput> {
        let shape = GridShape::for_image(img.height(), img.width(), self.config.patch_size)?;
        if shape != self.shape || img.channels() != self.channels {
            return Err(Error::Shape(format!(
                "model built for {} channels on a {}x{} grid, image gives {} channels on {}x{}",
                self.channels,
                self.shape.grid_h,
                self.shape.grid_w,
                img.channels(),
                shape.grid_h,
                shape.grid_w
            )));
        }
        prompt.validate()?;
        let cfg = &self.config;
        let mut patches = patchify(img, cfg.patch_size)?;
        if cfg.input_norm == InputNorm::Standardize {
            patches = standardize_patches(&patches, self.channels)?;
        }
        let grid = embed_tokens(&patches, &self.embedder, shape)?;
        let mut state = PrunedTokens::from_grid(&grid, cfg.mask_mode);
        let mut live_per_block = Vec::with_capacity(cfg.depth);
        let mut stages = Vec::new();

        for (b, block) in self.blocks.iter().enumerate() {
            live_per_block.push(state.num_retained());
            let live = state.live_rows();
            let key_mask = live.iter().any(|&l| !l).then_some(live.as_slice());
            let out = forward(&state.tokens, block, cfg.residual, key_mask)?;
            state = with_block_output(&state, out, &live);

            if !cfg.stage_indices.contains(&b) {
                continue;
            }
            let live_rows: Vec<usize> = (0..live.len()).filter(|&i| live[i]).collect();
            let live_tokens = state.tokens.select_rows(&live_rows);
            let feature_map = state.scatter();
            let bundle = prato_score_tokens(&feature_map, &live_tokens, prompt, &self.projections, &cfg.prune)?;
            let mut keep = vec![false; state.tokens.rows()];
            for (&row, &bit) in live_rows.iter().zip(&bundle.mask) {
                keep[row] = bit;
            }
            let coords = live_rows.iter().map(|&r| state.index_map[r]).collect();
            state = state.prune_rows(&keep)?;
            if state.is_empty() {
                return Err(Error::EmptyRetention { stage: b });
            }
            stages.push(StageRecord {
                block: b,
                coords,
                bundle,
            });
        }

        let z = shape.num_tokens();
        let retained: Vec<usize> = stages.iter().map(|s| s.bundle.retained()).collect();
        let cost = CostReport::new(z, cfg.embed_dim, &live_per_block, retained);
        Ok(PipelineOutput {
            pruned: state,
            stages,
            cost,
        })
    }
}

/// New token matrix for the current state; pruned rows stay zero in zero mode.
fn with_block_output(state: &PrunedTokens, mut tokens: crate::numerics::Matrix, live: &[bool]) -> PrunedTokens {
    if state.mode == MaskMode::Zero {
        for (row, &l) in live.iter().enumerate() {
            if !l {
                tokens.row_mut(row).fill(0.0);
            }
        }
    }
    PrunedTokens {
        tokens,
        ..state.clone()
    }
}

/// Scores of one pruning stage. `coords[j]` is the grid position of the
/// token behind `bundle.relevance[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub block: usize,
    pub coords: Vec<GridCoord>,
    pub bundle: RelevanceBundle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub pruned: PrunedTokens,
    pub stages: Vec<StageRecord>,
    pub cost: CostReport,
}

pub fn run_pipeline(img: &ImageTensor, prompt: &BoxPrompt, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    Model::for_image(cfg, img)?.run(img, prompt)
}

/// Seed of the `index`-th image in a batch.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

pub const FLOPS_FORMULA: &str = "per block with n live tokens and width C: qkv 6nC^2 + attention 4n^2C + output 2nC^2 + ffn 16nC^2 (one multiply-accumulate = 2 FLOPs)";

/// FLOPs of one encoder block, by term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockFlops {
    pub qkv: u64,
    pub attention: u64,
    pub output: u64,
    pub ffn: u64,
}

impl BlockFlops {
    pub fn new(n: usize, c: usize) -> Self {
        let (n, c) = (n as u64, c as u64);
        Self {
            qkv: 3 * 2 * n * c * c,
            attention: 2 * 2 * n * n * c,
            output: 2 * n * c * c,
            ffn: 2 * (2 * n * c * 4 * c),
        }
    }

    pub fn total(&self) -> u64 {
        self.qkv + self.attention + self.output + self.ffn
    }
}

/// Per-block breakdown for the given live counts.
pub fn flops_breakdown(c: usize, live_per_block: &[usize]) -> Vec<BlockFlops> {
    live_per_block.iter().map(|&n| BlockFlops::new(n, c)).collect()
}

/// `(flops_full, flops_pruned)` for `depth` blocks. `live_per_block[b]` is the
/// number of tokens entering block `b`; missing trailing entries repeat the
/// last count (or `z` if empty), and counts above `z` are clamped.
pub fn estimate_flops(z: usize, c: usize, depth: usize, live_per_block: &[usize]) -> (u64, u64) {
    let full = depth as u64 * BlockFlops::new(z, c).total();
    let mut last = z;
    let mut pruned = 0;
    for b in 0..depth {
        if let Some(&n) = live_per_block.get(b) {
            last = n.min(z);
        }
        pruned += BlockFlops::new(last, c).total();
    }
    (full, pruned)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    #[serde(rename = "Z")]
    pub tokens_full: usize,
    /// Tokens kept by each pruning stage.
    pub retained: Vec<usize>,
    pub token_sparsity: f64,
    pub flops_full: u64,
    pub flops_pruned: u64,
    pub flops_reduction: f64,
    pub live_per_block: Vec<usize>,
    pub flops_formula: String,
}

impl CostReport {
    pub fn new(z: usize, c: usize, live_per_block: &[usize], retained: Vec<usize>) -> Self {
        let depth = live_per_block.len();
        let (flops_full, flops_pruned) = estimate_flops(z, c, depth, live_per_block);
        let final_count = retained.last().copied().unwrap_or(z);
        let flops_reduction = if flops_full == 0 {
            0.0
        } else {
            1.0 - flops_pruned as f64 / flops_full as f64
        };
        Self {
            tokens_full: z,
            retained,
            token_sparsity: 1.0 - final_count as f64 / z as f64,
            flops_full,
            flops_pruned,
            flops_reduction,
            live_per_block: live_per_block.to_vec(),
            flops_formula: FLOPS_FORMULA.to_string(),
        }
    }

    pub fn final_retained(&self) -> usize {
        self.retained.last().copied().unwrap_or(self.tokens_full)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    Tight,
    Oversized,
    Partial,
    Misleading,
}

impl PerturbationKind {
    pub fn name(&self) -> &'static str {
        match self {
            PerturbationKind::Tight => "tight",
            PerturbationKind::Oversized => "oversized",
            PerturbationKind::Partial => "partial",
            PerturbationKind::Misleading => "misleading",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptPerturbation {
    pub kind: PerturbationKind,
    #[serde(default)]
    pub magnitude: f64,
}

impl PromptPerturbation {
    pub const TIGHT: Self = Self {
        kind: PerturbationKind::Tight,
        magnitude: 0.0,
    };

    pub fn new(kind: PerturbationKind, magnitude: f64) -> Result<Self> {
        let p = Self { kind, magnitude };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.magnitude >= 0.0) || !self.magnitude.is_finite() {
            return Err(Error::Config(format!(
                "perturbation magnitude must be >= 0, got {}",
                self.magnitude
            )));
        }
        if self.kind == PerturbationKind::Tight && self.magnitude != 0.0 {
            return Err(Error::Config("tight prompts carry magnitude 0".into()));
        }
        Ok(())
    }
}

/// Smallest partial-box area fraction; keeps the result non-degenerate.
const MIN_PARTIAL_FRACTION: f64 = 1e-4;

pub fn perturb_prompt(prompt: &BoxPrompt, p: &PromptPerturbation, rng: &mut Rng) -> BoxPrompt {
    let (w, h) = (prompt.width(), prompt.height());
    match p.kind {
        PerturbationKind::Tight => *prompt,
        PerturbationKind::Oversized => {
            let (dx, dy) = (p.magnitude * w, p.magnitude * h);
            BoxPrompt {
                x1: (prompt.x1 - dx).max(0.0),
                y1: (prompt.y1 - dy).max(0.0),
                x2: (prompt.x2 + dx).min(1.0),
                y2: (prompt.y2 + dy).min(1.0),
            }
        }
        PerturbationKind::Partial => {
            let frac = p.magnitude.clamp(MIN_PARTIAL_FRACTION, 1.0);
            let scale = frac.sqrt();
            let (nw, nh) = (w * scale, h * scale);
            let (left, top) = (rng.coin(), rng.coin());
            let (x1, x2) = if left {
                (prompt.x1, prompt.x1 + nw)
            } else {
                (prompt.x2 - nw, prompt.x2)
            };
            let (y1, y2) = if top {
                (prompt.y1, prompt.y1 + nh)
            } else {
                (prompt.y2 - nh, prompt.y2)
            };
            BoxPrompt { x1, y1, x2, y2 }
        }
        PerturbationKind::Misleading => misleading_box(prompt, rng),
    }
}

/// Same-size box placed where it does not overlap the original, or at the
/// feasible corner farthest from it when no such place exists.
fn misleading_box(prompt: &BoxPrompt, rng: &mut Rng) -> BoxPrompt {
    let (w, h) = (prompt.width(), prompt.height());
    let (max_x, max_y) = (1.0 - w, 1.0 - h);
    let place = |x1: f64, y1: f64| BoxPrompt {
        x1,
        y1,
        x2: (x1 + w).min(1.0),
        y2: (y1 + h).min(1.0),
    };
    // Each option fixes one axis to a disjoint interval; the other axis is free.
    let mut options: Vec<(bool, f64, f64)> = Vec::new();
    if prompt.x1 - w >= 0.0 {
        options.push((true, 0.0, prompt.x1 - w));
    }
    if max_x >= prompt.x2 {
        options.push((true, prompt.x2, max_x));
    }
    if prompt.y1 - h >= 0.0 {
        options.push((false, 0.0, prompt.y1 - h));
    }
    if max_y >= prompt.y2 {
        options.push((false, prompt.y2, max_y));
    }
    if options.is_empty() {
        let (cx, cy) = ((prompt.x1 + prompt.x2) / 2.0, (prompt.y1 + prompt.y2) / 2.0);
        let corners = [(0.0, 0.0), (max_x, 0.0), (0.0, max_y), (max_x, max_y)];
        let (x1, y1) = corners
            .into_iter()
            .max_by(|a, b| {
                let da = (a.0 + w / 2.0 - cx).powi(2) + (a.1 + h / 2.0 - cy).powi(2);
                let db = (b.0 + w / 2.0 - cx).powi(2) + (b.1 + h / 2.0 - cy).powi(2);
                da.total_cmp(&db)
            })
            .expect("four corners");
        return place(x1, y1);
    }
    let (horizontal, lo, hi) = options[rng.below(options.len())];
    let along = rng.uniform_range(lo, hi);
    if horizontal {
        place(along, rng.uniform_range(0.0, max_y))
    } else {
        place(rng.uniform_range(0.0, max_x), along)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prune::ThresholdPolicy;

    fn small_config(q: f64) -> PipelineConfig {
        PipelineConfig {
            patch_size: 4,
            embed_dim: 16,
            num_heads: 2,
            depth: 2,
            stage_indices: vec![0],
            prune: PruneConfig {
                policy: ThresholdPolicy::Percentile(q),
                d_v: 8,
                ..PruneConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    fn image(size: usize, seed: u64) -> ImageTensor {
        let mut rng = Rng::new(seed);
        ImageTensor::from_fn(1, size, size, |_, _, _| rng.uniform()).unwrap()
    }

    #[test]
    fn flops_examples() {
        assert_eq!(estimate_flops(256, 64, 4, &[256; 4]), estimate_flops(256, 64, 4, &[]));
        let (full, pruned) = estimate_flops(256, 64, 4, &[256; 4]);
        assert_eq!(full, pruned);
        let a = BlockFlops::new(128, 64);
        let b = BlockFlops::new(256, 64);
        assert_eq!(a.attention * 4, b.attention);
        assert_eq!(a.qkv * 2, b.qkv);
        assert_eq!(a.output * 2, b.output);
        assert_eq!(a.ffn * 2, b.ffn);
    }

    #[test]
    fn flops_monotone_in_retention() {
        let mut prev = u64::MAX;
        for n in (0..=64).rev() {
            let (_, p) = estimate_flops(64, 32, 3, &[64, n, n]);
            assert!(p <= prev);
            prev = p;
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = PipelineConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.stage_indices = vec![4];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = PipelineConfig {
            num_heads: 3,
            ..PipelineConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"depth": 6, "stage_indices": [2, 4]}"#).unwrap();
        assert_eq!(cfg.depth, 6);
        assert_eq!(cfg.patch_size, DEFAULT_PATCH_SIZE);
        assert_eq!(cfg.prune.k, 5);
    }

    #[test]
    fn half_retention_sparsity() {
        let img = image(32, 1);
        let out = run_pipeline(&img, &BoxPrompt::new(0.2, 0.2, 0.6, 0.7).unwrap(), &small_config(50.0)).unwrap();
        assert_eq!(out.cost.tokens_full, 64);
        assert_eq!(out.cost.retained, vec![32]);
        assert!((out.cost.token_sparsity - 0.5).abs() <= 1.0 / 64.0);
        assert_eq!(out.pruned.tokens.rows(), 32);
        assert_eq!(out.cost.live_per_block, vec![64, 32]);
        assert!(out.cost.flops_pruned < out.cost.flops_full);
    }

    #[test]
    fn stage_indices_empty_means_no_pruning() {
        let img = image(32, 2);
        let cfg = PipelineConfig {
            stage_indices: vec![],
            ..small_config(50.0)
        };
        let out = run_pipeline(&img, &BoxPrompt::full(), &cfg).unwrap();
        assert_eq!(out.cost.token_sparsity, 0.0);
        assert_eq!(out.cost.flops_full, out.cost.flops_pruned);
    }

    #[test]
    fn empty_retention_reports_stage() {
        let img = image(32, 3);
        let mut cfg = small_config(50.0);
        cfg.prune.policy = ThresholdPolicy::Fixed(0.999_999);
        match run_pipeline(&img, &BoxPrompt::full(), &cfg) {
            Err(Error::EmptyRetention { stage }) => assert_eq!(stage, 0),
            other => panic!("expected empty retention, got {other:?}"),
        }
    }

    #[test]
    fn perturbation_identities() {
        let b = BoxPrompt::new(0.3, 0.2, 0.5, 0.6).unwrap();
        let mut rng = Rng::new(0);
        assert_eq!(perturb_prompt(&b, &PromptPerturbation::TIGHT, &mut rng), b);
        let over0 = PromptPerturbation::new(PerturbationKind::Oversized, 0.0).unwrap();
        assert_eq!(perturb_prompt(&b, &over0, &mut rng), b);
        assert!(PromptPerturbation::new(PerturbationKind::Tight, 0.5).is_err());
        assert!(PromptPerturbation::new(PerturbationKind::Partial, -0.1).is_err());
    }

    #[test]
    fn oversized_dilates_and_clamps() {
        let b = BoxPrompt::new(0.1, 0.4, 0.5, 0.6).unwrap();
        let p = PromptPerturbation::new(PerturbationKind::Oversized, 0.5).unwrap();
        let o = perturb_prompt(&b, &p, &mut Rng::new(0));
        assert_eq!(o.x1, 0.0);
        assert!((o.x2 - 0.7).abs() < 1e-12);
        assert!((o.y1 - 0.3).abs() < 1e-12 && (o.y2 - 0.7).abs() < 1e-12);
    }

    #[test]
    fn partial_covers_area_fraction_inside_box() {
        let b = BoxPrompt::new(0.2, 0.2, 0.8, 0.6).unwrap();
        let p = PromptPerturbation::new(PerturbationKind::Partial, 0.5).unwrap();
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let s = perturb_prompt(&b, &p, &mut rng);
            assert!(s.validate().is_ok());
            assert!((s.area() - 0.5 * b.area()).abs() < 1e-12);
            assert!((b.intersection_area(&s) - s.area()).abs() < 1e-12);
        }
    }

    #[test]
    fn misleading_does_not_overlap() {
        let mut rng = Rng::new(9);
        let p = PromptPerturbation::new(PerturbationKind::Misleading, 0.0).unwrap();
        for _ in 0..100 {
            let x = rng.uniform_range(0.0, 0.8);
            let y = rng.uniform_range(0.0, 0.8);
            let b = BoxPrompt::new(x, y, x + 0.15, y + 0.1).unwrap();
            let m = perturb_prompt(&b, &p, &mut rng);
            assert!(m.validate().is_ok());
            assert_eq!(b.iou(&m), 0.0);
            assert!((m.width() - b.width()).abs() < 1e-12);
        }
        // No room anywhere: falls back to the farthest corner.
        let big = BoxPrompt::new(0.2, 0.2, 0.9, 0.9).unwrap();
        let m = perturb_prompt(&big, &p, &mut rng);
        assert!(m.validate().is_ok());
        assert!((m.x1 - 0.0).abs() < 1e-12 && (m.y1 - 0.0).abs() < 1e-12);
    }
}
