//! One transformer encoder block: multi-head self-attention `mu`, a GELU
//! feed-forward network `phi`, two layer norms.
//!
//! [`ResidualMode::Literal`] evaluates `Y = phi(LN(mu(LN(P0)))) + P0`, a single
//! residual spanning both sublayers. [`ResidualMode::Standard`] is the usual
//! pre-norm ViT block with one residual per sublayer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gelu, layer_norm, matmul, matmul_transposed, softmax_in_place, Matrix, Rng};
use crate::tokenizer::TokenGrid;

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
pub const FFN_EXPANSION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualMode {
    #[default]
    Literal,
    Standard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    fn apply(&self, m: &Matrix) -> Result<Matrix> {
        layer_norm(m, &self.gamma, &self.beta, LN_EPS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub heads: Vec<HeadWeights>,
    /// `C' x C'` projection applied to the concatenated heads.
    pub output: Matrix,
    pub ffn_in: Matrix,
    pub ffn_out: Matrix,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
}

impl BlockWeights {
    /// Seeded `N(0, 0.02^2)` weights, identity layer-norm affine.
    pub fn init(embed_dim: usize, num_heads: usize, rng: &mut Rng) -> Result<Self> {
        Self::build(embed_dim, num_heads, |r, c| Matrix::gaussian(r, c, INIT_STD, rng))
    }

    /// All projections zero, identity layer-norm affine.
    pub fn zeros(embed_dim: usize, num_heads: usize) -> Result<Self> {
        Self::build(embed_dim, num_heads, Matrix::zeros)
    }

    fn build(
        embed_dim: usize,
        num_heads: usize,
        mut make: impl FnMut(usize, usize) -> Matrix,
    ) -> Result<Self> {
        if num_heads == 0 || embed_dim % num_heads != 0 {
            return Err(Error::Config(format!(
                "{num_heads} heads do not divide embedding width {embed_dim}"
            )));
        }
        let dh = embed_dim / num_heads;
        let heads = (0..num_heads)
            .map(|_| HeadWeights {
                query: make(embed_dim, dh),
                key: make(embed_dim, dh),
                value: make(embed_dim, dh),
            })
            .collect();
        let hidden = FFN_EXPANSION * embed_dim;
        Ok(Self {
            heads,
            output: make(embed_dim, embed_dim),
            ffn_in: make(embed_dim, hidden),
            ffn_out: make(hidden, embed_dim),
            ln1: LayerNormParams::identity(embed_dim),
            ln2: LayerNormParams::identity(embed_dim),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.output.rows()
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head_dim(&self) -> usize {
        self.heads.first().map_or(0, |h| h.query.cols())
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.embed_dim();
        let dh = self.head_dim();
        if self.heads.is_empty() || dh * self.heads.len() != c {
            return Err(Error::Shape(format!(
                "{} heads of width {dh} do not cover C'={c}",
                self.heads.len()
            )));
        }
        let mut expect = vec![("output", &self.output, (c, c))];
        for h in &self.heads {
            expect.push(("query", &h.query, (c, dh)));
            expect.push(("key", &h.key, (c, dh)));
            expect.push(("value", &h.value, (c, dh)));
        }
        let hidden = self.ffn_in.cols();
        expect.push(("ffn_in", &self.ffn_in, (c, hidden)));
        expect.push(("ffn_out", &self.ffn_out, (hidden, c)));
        for (name, m, shape) in expect {
            if m.shape() != shape {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    shape.0,
                    shape.1
                )));
            }
        }
        for ln in [&self.ln1, &self.ln2] {
            if ln.gamma.len() != c || ln.beta.len() != c {
                return Err(Error::Shape("layer-norm parameters must have length C'".into()));
            }
        }
        Ok(())
    }

    fn named_entries(&self) -> Vec<(String, Matrix)> {
        let row = |v: &[f64]| Matrix::new(1, v.len(), v.to_vec()).expect("row vector");
        let mut out = Vec::new();
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("head{i}.query"), h.query.clone()));
            out.push((format!("head{i}.key"), h.key.clone()));
            out.push((format!("head{i}.value"), h.value.clone()));
        }
        out.push(("output".into(), self.output.clone()));
        out.push(("ffn_in".into(), self.ffn_in.clone()));
        out.push(("ffn_out".into(), self.ffn_out.clone()));
        out.push(("ln1.gamma".into(), row(&self.ln1.gamma)));
        out.push(("ln1.beta".into(), row(&self.ln1.beta)));
        out.push(("ln2.gamma".into(), row(&self.ln2.gamma)));
        out.push(("ln2.beta".into(), row(&self.ln2.beta)));
        out
    }

    /// Writes one `.prtm` file per parameter plus `manifest.json`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for (name, m) in self.named_entries() {
            let file = format!("{name}.prtm");
            m.save(&dir.join(&file))?;
            entries.push(ManifestEntry {
                name,
                rows: m.rows(),
                cols: m.cols(),
                file,
            });
        }
        let manifest = Manifest {
            embed_dim: self.embed_dim(),
            num_heads: self.num_heads(),
            entries,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)?;
        let mut table = BTreeMap::new();
        for e in &manifest.entries {
            let m = Matrix::load(&dir.join(&e.file))?;
            if m.shape() != (e.rows, e.cols) {
                return Err(Error::format(
                    dir.join(&e.file),
                    format!("manifest says {}x{}", e.rows, e.cols),
                ));
            }
            table.insert(e.name.clone(), m);
        }
        let mut take = |name: &str| {
            table
                .remove(name)
                .ok_or_else(|| Error::format(&path, format!("missing entry {name}")))
        };
        let mut heads = Vec::with_capacity(manifest.num_heads);
        for i in 0..manifest.num_heads {
            heads.push(HeadWeights {
                query: take(&format!("head{i}.query"))?,
                key: take(&format!("head{i}.key"))?,
                value: take(&format!("head{i}.value"))?,
            });
        }
        let w = Self {
            heads,
            output: take("output")?,
            ffn_in: take("ffn_in")?,
            ffn_out: take("ffn_out")?,
            ln1: LayerNormParams {
                gamma: take("ln1.gamma")?.into_data(),
                beta: take("ln1.beta")?.into_data(),
            },
            ln2: LayerNormParams {
                gamma: take("ln2.gamma")?.into_data(),
                beta: take("ln2.beta")?.into_data(),
            },
        };
        w.validate()?;
        Ok(w)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    embed_dim: usize,
    num_heads: usize,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
    file: String,
}

/// Row-stochastic attention weights of one head on already-normalized input.
/// Keys with `live[j] == false` receive zero weight.
fn head_attention(x: &Matrix, head: &HeadWeights, live: Option<&[bool]>) -> Result<Matrix> {
    let q = matmul(x, &head.query)?;
    let k = matmul(x, &head.key)?;
    let scale = 1.0 / (head.query.cols() as f64).sqrt();
    let mut scores = matmul_transposed(&q, &k)?.scale(scale);
    for i in 0..scores.rows() {
        let row = scores.row_mut(i);
        if let Some(live) = live {
            for (s, &keep) in row.iter_mut().zip(live) {
                if !keep {
                    *s = f64::NEG_INFINITY;
                }
            }
        }
        softmax_in_place(row);
    }
    Ok(scores)
}

fn self_attention(x: &Matrix, w: &BlockWeights, live: Option<&[bool]>) -> Result<Matrix> {
    let n = x.rows();
    let c = w.embed_dim();
    let dh = w.head_dim();
    let mut concat = Matrix::zeros(n, c);
    for (h, head) in w.heads.iter().enumerate() {
        let attn = head_attention(x, head, live)?;
        let v = matmul(x, &head.value)?;
        let out = matmul(&attn, &v)?;
        for i in 0..n {
            concat.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(out.row(i));
        }
    }
    matmul(&concat, &w.output)
}

fn feed_forward(x: &Matrix, w: &BlockWeights) -> Result<Matrix> {
    let hidden = matmul(x, &w.ffn_in)?.map(gelu);
    matmul(&hidden, &w.ffn_out)
}

/// Runs one block over an arbitrary token matrix (full grid or a compacted
/// subset). `live` optionally restricts which rows may be attended to.
pub fn forward(
    tokens: &Matrix,
    w: &BlockWeights,
    mode: ResidualMode,
    live: Option<&[bool]>,
) -> Result<Matrix> {
    if tokens.cols() != w.embed_dim() {
        return Err(Error::Shape(format!(
            "tokens have width {}, block expects {}",
            tokens.cols(),
            w.embed_dim()
        )));
    }
    if let Some(live) = live {
        if live.len() != tokens.rows() {
            return Err(Error::Shape(format!(
                "live mask length {} for {} tokens",
                live.len(),
                tokens.rows()
            )));
        }
    }
    match mode {
        ResidualMode::Literal => {
            let attended = self_attention(&w.ln1.apply(tokens)?, w, live)?;
            let branch = feed_forward(&w.ln2.apply(&attended)?, w)?;
            branch.add(tokens)
        }
        ResidualMode::Standard => {
            let attended = self_attention(&w.ln1.apply(tokens)?, w, live)?;
            let mid = tokens.add(&attended)?;
            let branch = feed_forward(&w.ln2.apply(&mid)?, w)?;
            mid.add(&branch)
        }
    }
}

pub fn encode_block(p0: &TokenGrid, w: &BlockWeights) -> Result<TokenGrid> {
    encode_block_with(p0, w, ResidualMode::Literal)
}

pub fn encode_block_with(p0: &TokenGrid, w: &BlockWeights, mode: ResidualMode) -> Result<TokenGrid> {
    let out = forward(p0.tokens(), w, mode, None)?;
    p0.with_tokens(out)
}

/// `Z x Z` attention weights of `head`, computed on `LN(P0)`.
pub fn attention_map(p0: &TokenGrid, w: &BlockWeights, head: usize) -> Result<Matrix> {
    let h = w.heads.get(head).ok_or(Error::Index {
        index: head,
        len: w.heads.len(),
    })?;
    if p0.embed_dim() != w.embed_dim() {
        return Err(Error::Shape(format!(
            "tokens have width {}, block expects {}",
            p0.embed_dim(),
            w.embed_dim()
        )));
    }
    head_attention(&w.ln1.apply(p0.tokens())?, h, None)
}
