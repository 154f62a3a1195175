//! Prompt-driven token scoring and masking.
//!
//! Region features pooled from the prompt box are projected next to the
//! tokens, compared by scaled dot product, and turned into one probability
//! distribution over tokens per region vector. Region vectors whose
//! distribution is sharp (low entropy) get large weights; each token's
//! relevance is the mean weighted similarity over region vectors, and a
//! threshold on relevance yields the per-token keep bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{logistic, matmul, matmul_transposed, softmax_rows, Matrix, Rng};
use crate::roi::{map_box_to_grid, roi_align, BoxPrompt, RegionFeature, DEFAULT_ROI_K, DEFAULT_SAMPLING_RATIO};
use crate::tokenizer::{GridCoord, GridShape, TokenGrid};

pub const DEFAULT_PROJECTION_DIM: usize = 64;
pub const DEFAULT_PERCENTILE: f64 = 25.0;

/// Only a normalized probability vector may be scored.
const ENTROPY_SUM_TOLERANCE: f64 = 1e-9;

/// How `f1` and `f2` are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionInit {
    /// One Gaussian draw shared by both maps, so `S` approximates a scaled
    /// token dot product.
    #[default]
    Tied,
    /// Two independent Gaussian draws.
    Independent,
}

/// `f1` projects region features, `f2` projects tokens; both `C' x d_V`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    pub f1: Matrix,
    pub f2: Matrix,
}

impl Projections {
    pub fn new(f1: Matrix, f2: Matrix) -> Result<Self> {
        if f1.shape() != f2.shape() {
            return Err(Error::Shape(format!(
                "f1 is {}x{} but f2 is {}x{}",
                f1.rows(),
                f1.cols(),
                f2.rows(),
                f2.cols()
            )));
        }
        Ok(Self { f1, f2 })
    }

    /// Frozen `N(0, 1/C')` projections.
    pub fn init(embed_dim: usize, d_v: usize, mode: ProjectionInit, rng: &mut Rng) -> Self {
        let std = 1.0 / (embed_dim as f64).sqrt();
        let f1 = Matrix::gaussian(embed_dim, d_v, std, rng);
        let f2 = match mode {
            ProjectionInit::Tied => f1.clone(),
            ProjectionInit::Independent => Matrix::gaussian(embed_dim, d_v, std, rng),
        };
        Self { f1, f2 }
    }

    pub fn d_v(&self) -> usize {
        self.f1.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.f1.rows()
    }
}

/// Fixed: keep iff `logistic(r) > tau`. Percentile: keep the tokens above the
/// `q`-th percentile of `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "lowercase")]
pub enum ThresholdPolicy {
    Fixed(f64),
    Percentile(f64),
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Percentile(DEFAULT_PERCENTILE)
    }
}

impl ThresholdPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdPolicy::Fixed(t) if t > 0.0 && t < 1.0 => Ok(()),
            ThresholdPolicy::Percentile(q) if q > 0.0 && q < 100.0 => Ok(()),
            ThresholdPolicy::Fixed(t) => Err(Error::Config(format!(
                "fixed threshold must lie in (0, 1), got {t}"
            ))),
            ThresholdPolicy::Percentile(q) => Err(Error::Config(format!(
                "percentile must lie in (0, 100), got {q}"
            ))),
        }
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            ThresholdPolicy::Fixed(_) => "fixed",
            ThresholdPolicy::Percentile(_) => "percentile",
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            ThresholdPolicy::Fixed(v) | ThresholdPolicy::Percentile(v) => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub k: usize,
    pub sampling_ratio: usize,
    pub d_v: usize,
    pub policy: ThresholdPolicy,
    pub projection_init: ProjectionInit,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_ROI_K,
            sampling_ratio: DEFAULT_SAMPLING_RATIO,
            d_v: DEFAULT_PROJECTION_DIM,
            policy: ThresholdPolicy::default(),
            projection_init: ProjectionInit::default(),
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("RoI size k must be at least 1".into()));
        }
        if self.sampling_ratio == 0 {
            return Err(Error::Config("sampling ratio must be at least 1".into()));
        }
        if self.d_v == 0 {
            return Err(Error::Config("projection width d_V must be at least 1".into()));
        }
        self.policy.validate()
    }
}

/// Everything computed for one pruning decision.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceBundle {
    /// `M x Z` scaled similarities.
    pub similarity: Matrix,
    /// Row-wise softmax of `similarity`.
    pub rho: Matrix,
    /// Shannon entropy of each `rho` row, in bits.
    pub entropy: Vec<f64>,
    pub ranks: Vec<f64>,
    pub weights: Vec<f64>,
    pub weighted_similarity: Matrix,
    pub relevance: Vec<f64>,
    pub mask: Vec<bool>,
    pub tau_effective: f64,
    pub policy: ThresholdPolicy,
}

impl RelevanceBundle {
    pub fn num_tokens(&self) -> usize {
        self.relevance.len()
    }

    pub fn num_region_vectors(&self) -> usize {
        self.entropy.len()
    }

    pub fn retained(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Writes the three matrices as `<stem>.<name>.prtm` and a JSON record
    /// with every vector inline. Returns the JSON path.
    pub fn write_audit(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let file = |name: &str| format!("{stem}.{name}.prtm");
        let refs = AuditMatrices {
            similarity: file("similarity"),
            rho: file("rho"),
            weighted_similarity: file("weighted_similarity"),
        };
        self.similarity.save(&dir.join(&refs.similarity))?;
        self.rho.save(&dir.join(&refs.rho))?;
        self.weighted_similarity
            .save(&dir.join(&refs.weighted_similarity))?;
        let record = AuditRecord {
            z: self.num_tokens(),
            m: self.num_region_vectors(),
            policy: self.policy,
            tau_effective: self.tau_effective,
            retained: self.retained(),
            entropy: self.entropy.clone(),
            ranks: self.ranks.clone(),
            weights: self.weights.clone(),
            relevance: self.relevance.clone(),
            mask: self.mask.iter().map(|&b| u8::from(b)).collect(),
            matrices: refs,
        };
        let path = dir.join(format!("{stem}.json"));
        fs::write(&path, serde_json::to_vec_pretty(&record)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// JSON form of a [`RelevanceBundle`]; matrices are referenced by file name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    #[serde(rename = "Z")]
    pub z: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub policy: ThresholdPolicy,
    pub tau_effective: f64,
    pub retained: usize,
    pub entropy: Vec<f64>,
    pub ranks: Vec<f64>,
    pub weights: Vec<f64>,
    pub relevance: Vec<f64>,
    pub mask: Vec<u8>,
    pub matrices: AuditMatrices,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditMatrices {
    pub similarity: String,
    pub rho: String,
    pub weighted_similarity: String,
}

/// `S = (F f1)(Y f2)^T / sqrt(d_V)`, shape `M x Z`.
pub fn compute_similarity(f: &RegionFeature, tokens: &Matrix, p: &Projections) -> Result<Matrix> {
    if f.features.cols() != p.embed_dim() || tokens.cols() != p.embed_dim() {
        return Err(Error::Shape(format!(
            "region width {}, token width {}, projection input {}",
            f.features.cols(),
            tokens.cols(),
            p.embed_dim()
        )));
    }
    let v1 = matmul(&f.features, &p.f1)?;
    let v2 = matmul(tokens, &p.f2)?;
    Ok(matmul_transposed(&v1, &v2)?.scale(1.0 / (p.d_v() as f64).sqrt()))
}

/// Shannon entropy in bits, with `0 log 0 = 0`.
pub fn compute_entropy(rho_row: &[f64]) -> Result<f64> {
    if let Some(bad) = rho_row.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
        return Err(Error::Validation(format!("probability {bad} is not a finite non-negative value")));
    }
    let total: f64 = rho_row.iter().sum();
    if (total - 1.0).abs() > ENTROPY_SUM_TOLERANCE {
        return Err(Error::Validation(format!(
            "probabilities sum to {total}, not 1"
        )));
    }
    let h = rho_row
        .iter()
        .filter(|&&p| p > 0.0)
        .fold(0.0, |acc, &p| acc - p * p.log2());
    // A one-hot row yields -0.0.
    Ok(h.max(0.0))
}

/// Ascending entropy ranks (ties broken by index) scaled to `[0, 1]`, and
/// the inverse weights. Both vectors land exactly on the grid
/// `{0, 1/(M-1), ..., 1}`; `weights[i] = 1 - ranks[i]` up to one rounding.
pub fn inverse_entropy_weights(entropy: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = entropy.len();
    if m == 0 {
        return Err(Error::Validation("entropy vector is empty".into()));
    }
    if m == 1 {
        return Ok((vec![0.0], vec![1.0]));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| entropy[a].total_cmp(&entropy[b]).then(a.cmp(&b)));
    let denom = (m - 1) as f64;
    let mut ranks = vec![0.0; m];
    let mut weights = vec![0.0; m];
    for (rank, &i) in order.iter().enumerate() {
        ranks[i] = rank as f64 / denom;
        weights[i] = (m - 1 - rank) as f64 / denom;
    }
    Ok((ranks, weights))
}

/// `S~[i][j] = weights[i] * S[i][j]`.
pub fn weighted_similarity(s: &Matrix, weights: &[f64]) -> Result<Matrix> {
    if weights.len() != s.rows() {
        return Err(Error::Shape(format!(
            "{} weights for {} region vectors",
            weights.len(),
            s.rows()
        )));
    }
    let mut out = s.clone();
    for (i, &w) in weights.iter().enumerate() {
        for v in out.row_mut(i) {
            *v *= w;
        }
    }
    Ok(out)
}

/// Per-token relevance: column mean of the weighted similarity map.
pub fn relevance_scores(s: &Matrix, weights: &[f64]) -> Result<Vec<f64>> {
    Ok(column_means(&weighted_similarity(s, weights)?))
}

fn column_means(m: &Matrix) -> Vec<f64> {
    let mut sums = vec![0.0; m.cols()];
    for row in m.row_iter() {
        for (acc, v) in sums.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let n = m.rows() as f64;
    sums.into_iter().map(|s| s / n).collect()
}

/// `q`-th percentile with linear interpolation between order statistics
/// (position `q/100 * (n-1)` in the sorted values).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (q / 100.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Number of tokens a `q`-th percentile policy keeps: `ceil(Z * (100 - q) / 100)`.
pub fn retention_target(z: usize, q: f64) -> usize {
    let exact = z as f64 * (100.0 - q) / 100.0;
    // Absorb representation error in values such as 64 * 0.55.
    ((exact - 1e-9).ceil().max(0.0) as usize).min(z)
}

/// Keep bits and the effective threshold. In percentile mode the retained set
/// is the `retention_target` highest scores, lower index first among ties;
/// it depends only on the ordering of `r`.
pub fn build_mask(r: &[f64], policy: ThresholdPolicy) -> Result<(Vec<bool>, f64)> {
    policy.validate()?;
    if r.is_empty() {
        return Err(Error::Config("cannot threshold an empty score vector".into()));
    }
    match policy {
        ThresholdPolicy::Fixed(tau) => Ok((r.iter().map(|&v| logistic(v) > tau).collect(), tau)),
        ThresholdPolicy::Percentile(q) => {
            let tau = percentile(r, q);
            let target = retention_target(r.len(), q);
            let mut order: Vec<usize> = (0..r.len()).collect();
            order.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
            let mut mask = vec![false; r.len()];
            for &i in &order[..target] {
                mask[i] = true;
            }
            Ok((mask, tau))
        }
    }
}

/// Scores a precomputed `M x Z` similarity map: softmax, entropy, inverse
/// entropy weights, relevance, mask.
pub fn score_similarity_map(similarity: Matrix, policy: ThresholdPolicy) -> Result<RelevanceBundle> {
    if similarity.rows() == 0 || similarity.cols() == 0 {
        return Err(Error::Shape("similarity map must be non-empty".into()));
    }
    if !similarity.is_finite() {
        return Err(Error::Validation("similarity map has non-finite entries".into()));
    }
    let rho = softmax_rows(&similarity);
    let entropy = rho.row_iter().map(compute_entropy).collect::<Result<Vec<_>>>()?;
    let (ranks, weights) = inverse_entropy_weights(&entropy)?;
    let weighted = weighted_similarity(&similarity, &weights)?;
    let relevance = column_means(&weighted);
    let (mask, tau_effective) = build_mask(&relevance, policy)?;
    Ok(RelevanceBundle {
        similarity,
        rho,
        entropy,
        ranks,
        weights,
        weighted_similarity: weighted,
        relevance,
        mask,
        tau_effective,
        policy,
    })
}

/// Scores an arbitrary token subset against region features pooled from
/// `feature_map`. Used after compaction, when live tokens no longer fill the grid.
pub fn prato_score_tokens(
    feature_map: &TokenGrid,
    live_tokens: &Matrix,
    prompt: &BoxPrompt,
    proj: &Projections,
    cfg: &PruneConfig,
) -> Result<RelevanceBundle> {
    cfg.validate()?;
    let gb = map_box_to_grid(prompt, feature_map.grid_h(), feature_map.grid_w())?;
    let region = roi_align(feature_map, &gb, cfg.k, cfg.sampling_ratio)?;
    let s = compute_similarity(&region, live_tokens, proj)?;
    score_similarity_map(s, cfg.policy)
}

/// Full scoring of a token grid against a box prompt.
pub fn prato_score(
    grid: &TokenGrid,
    prompt: &BoxPrompt,
    proj: &Projections,
    cfg: &PruneConfig,
) -> Result<RelevanceBundle> {
    prato_score_tokens(grid, grid.tokens(), prompt, proj, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Keep the grid and zero pruned rows.
    Zero,
    /// Gather retained rows and carry their coordinates.
    #[default]
    Compact,
}

/// Tokens after masking, with the grid coordinate of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedTokens {
    pub mode: MaskMode,
    pub tokens: Matrix,
    pub index_map: Vec<GridCoord>,
    pub shape: GridShape,
    /// Keep bit per full-grid position.
    pub retained: Vec<bool>,
}

impl PrunedTokens {
    /// Wraps an unpruned grid.
    pub fn from_grid(grid: &TokenGrid, mode: MaskMode) -> Self {
        Self {
            mode,
            tokens: grid.tokens().clone(),
            index_map: grid.index_map(),
            shape: grid.shape(),
            retained: vec![true; grid.num_tokens()],
        }
    }

    pub fn num_retained(&self) -> usize {
        self.retained.iter().filter(|&&b| b).count()
    }

    /// True when no token survived, the empty-retention condition.
    pub fn is_empty(&self) -> bool {
        self.num_retained() == 0
    }

    /// Full-grid tokens, zero at pruned positions.
    pub fn scatter(&self) -> TokenGrid {
        let mut full = Matrix::zeros(self.shape.num_tokens(), self.tokens.cols());
        for (row, &c) in self.index_map.iter().enumerate() {
            let idx = self.shape.index(c);
            if self.retained[idx] {
                full.row_mut(idx).copy_from_slice(self.tokens.row(row));
            }
        }
        TokenGrid::new(full, self.shape).expect("scatter shape")
    }

    /// Applies a keep mask over the current rows (length = rows of `tokens`).
    pub fn prune_rows(&self, keep: &[bool]) -> Result<PrunedTokens> {
        if keep.len() != self.tokens.rows() {
            return Err(Error::Shape(format!(
                "mask length {} for {} tokens",
                keep.len(),
                self.tokens.rows()
            )));
        }
        let mut retained = self.retained.clone();
        for (row, &c) in self.index_map.iter().enumerate() {
            if !keep[row] {
                retained[self.shape.index(c)] = false;
            }
        }
        Ok(match self.mode {
            MaskMode::Zero => {
                let mut tokens = self.tokens.clone();
                for (row, &k) in keep.iter().enumerate() {
                    if !k {
                        tokens.row_mut(row).fill(0.0);
                    }
                }
                PrunedTokens {
                    mode: MaskMode::Zero,
                    tokens,
                    index_map: self.index_map.clone(),
                    shape: self.shape,
                    retained,
                }
            }
            MaskMode::Compact => {
                let rows: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
                PrunedTokens {
                    mode: MaskMode::Compact,
                    tokens: self.tokens.select_rows(&rows),
                    index_map: rows.iter().map(|&i| self.index_map[i]).collect(),
                    shape: self.shape,
                    retained,
                }
            }
        })
    }

    /// Live-row flags for the current token matrix.
    pub fn live_rows(&self) -> Vec<bool> {
        self.index_map
            .iter()
            .map(|&c| self.retained[self.shape.index(c)])
            .collect()
    }
}

/// `Y' = beta (.) Y`, either zeroing pruned rows or compacting.
/// An all-zero mask in compact mode yields an empty selection (see
/// [`PrunedTokens::is_empty`]).
pub fn apply_mask(grid: &TokenGrid, beta: &[bool], mode: MaskMode) -> Result<PrunedTokens> {
    if beta.len() != grid.num_tokens() {
        return Err(Error::Shape(format!(
            "mask length {} for {} tokens",
            beta.len(),
            grid.num_tokens()
        )));
    }
    PrunedTokens::from_grid(grid, mode).prune_rows(beta)
}
