//! Raster to token sequence: non-overlapping patches, linear projection,
//! positional embedding.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, matmul, Matrix, Rng};

pub const IMAGE_MAGIC: &[u8; 4] = b"PRTI";

/// `C x H x W` image stored channel-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "image dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// One channel as an `H x W` matrix.
    pub fn plane(&self, c: usize) -> Matrix {
        let n = self.height * self.width;
        Matrix::new(self.height, self.width, self.data[c * n..(c + 1) * n].to_vec())
            .expect("plane shape")
    }

    /// Stacks equally sized planes into one image.
    pub fn from_planes(planes: &[Matrix]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::Config("image needs at least one plane".into()))?;
        let (h, w) = first.shape();
        let mut data = Vec::with_capacity(planes.len() * h * w);
        for (i, p) in planes.iter().enumerate() {
            if p.shape() != (h, w) {
                return Err(Error::Shape(format!(
                    "plane {i} is {}x{}, expected {h}x{w}",
                    p.rows(),
                    p.cols()
                )));
            }
            data.extend_from_slice(p.data());
        }
        Self::new(planes.len(), h, w, data)
    }

    /// `PRTI` magic, u32 C, H, W (little-endian), then `C*H*W` little-endian f64.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(IMAGE_MAGIC)?;
        for d in [self.channels, self.height, self.width] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_binary<R: Read>(mut r: R) -> std::io::Result<(usize, usize, usize, Vec<f64>)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != IMAGE_MAGIC {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "missing PRTI magic",
            ));
        }
        let c = numerics::read_u32(&mut r)? as usize;
        let h = numerics::read_u32(&mut r)? as usize;
        let w = numerics::read_u32(&mut r)? as usize;
        let data = numerics::read_f64s(&mut r, c * h * w)?;
        Ok((c, h, w, data))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_binary(BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let (c, h, w, data) =
            Self::read_binary(BufReader::new(file)).map_err(|e| Error::format(path, e.to_string()))?;
        Self::new(c, h, w, data)
    }

    /// Loads one image from per-channel CSV planes.
    pub fn load_csv_planes(paths: &[impl AsRef<Path>]) -> Result<Self> {
        let planes = paths
            .iter()
            .map(|p| {
                let p = p.as_ref();
                let file = File::open(p).map_err(|e| Error::io(p, e))?;
                Matrix::read_csv(BufReader::new(file))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_planes(&planes)
    }
}

/// Row/column of a token on the patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridCoord {
    pub row: usize,
    pub col: usize,
}

/// Geometry of a token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
}

impl GridShape {
    pub fn for_image(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        if height % patch_size != 0 || width % patch_size != 0 {
            return Err(Error::Config(format!(
                "image {height}x{width} is not divisible by patch size {patch_size}"
            )));
        }
        Ok(Self {
            grid_h: height / patch_size,
            grid_w: width / patch_size,
            patch_size,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn coord(&self, index: usize) -> GridCoord {
        GridCoord {
            row: index / self.grid_w,
            col: index % self.grid_w,
        }
    }

    pub fn index(&self, c: GridCoord) -> usize {
        c.row * self.grid_w + c.col
    }

    /// Row-major list of every grid coordinate.
    pub fn index_map(&self) -> Vec<GridCoord> {
        (0..self.num_tokens()).map(|i| self.coord(i)).collect()
    }
}

/// Full `Z x C'` token sequence laid out on its `H' x W'` grid in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    tokens: Matrix,
    shape: GridShape,
}

impl TokenGrid {
    pub fn new(tokens: Matrix, shape: GridShape) -> Result<Self> {
        if tokens.rows() != shape.num_tokens() {
            return Err(Error::Shape(format!(
                "{} tokens for a {}x{} grid",
                tokens.rows(),
                shape.grid_h,
                shape.grid_w
            )));
        }
        Ok(Self { tokens, shape })
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn into_tokens(self) -> Matrix {
        self.tokens
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn grid_h(&self) -> usize {
        self.shape.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.shape.grid_w
    }

    pub fn patch_size(&self) -> usize {
        self.shape.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn index_map(&self) -> Vec<GridCoord> {
        self.shape.index_map()
    }

    /// Feature vector of the token at `(row, col)`.
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        self.tokens.row(row * self.shape.grid_w + col)
    }

    pub fn with_tokens(&self, tokens: Matrix) -> Result<Self> {
        Self::new(tokens, self.shape)
    }
}

/// Splits the image into `p x p` patches. Row `i` of the result is the patch
/// at grid position `i` (row-major); within a row, values are ordered by
/// channel, then pixel row, then pixel column.
pub fn patchify(img: &ImageTensor, p: usize) -> Result<Matrix> {
    let shape = GridShape::for_image(img.height, img.width, p)?;
    let width = img.channels * p * p;
    let mut data = Vec::with_capacity(shape.num_tokens() * width);
    for gy in 0..shape.grid_h {
        for gx in 0..shape.grid_w {
            for c in 0..img.channels {
                for dy in 0..p {
                    for dx in 0..p {
                        data.push(img.get(c, gy * p + dy, gx * p + dx));
                    }
                }
            }
        }
    }
    Matrix::new(shape.num_tokens(), width, data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &Matrix,
    channels: usize,
    height: usize,
    width: usize,
    p: usize,
) -> Result<ImageTensor> {
    let shape = GridShape::for_image(height, width, p)?;
    if patches.shape() != (shape.num_tokens(), channels * p * p) {
        return Err(Error::Shape(format!(
            "patch matrix {}x{} does not match {channels}x{height}x{width} with p={p}",
            patches.rows(),
            patches.cols()
        )));
    }
    let mut data = vec![0.0; channels * height * width];
    for t in 0..shape.num_tokens() {
        let GridCoord { row: gy, col: gx } = shape.coord(t);
        let patch = patches.row(t);
        for c in 0..channels {
            for dy in 0..p {
                for dx in 0..p {
                    let y = gy * p + dy;
                    let x = gx * p + dx;
                    data[(c * height + y) * width + x] = patch[(c * p + dy) * p + dx];
                }
            }
        }
    }
    ImageTensor::new(channels, height, width, data)
}

/// Pixel preprocessing applied to patches before projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputNorm {
    /// Raw intensities in `[0, 1]`.
    None,
    /// Per-image, per-channel shift to zero mean and scale to unit variance.
    #[default]
    Standardize,
}

/// Relative spread below which a channel counts as constant. Absorbs the
/// rounding left in the mean of identical values.
const FLAT_CHANNEL_TOLERANCE: f64 = 1e-12;

/// Standardizes each channel's block of patch columns over the whole image.
/// A constant channel maps to zeros.
pub fn standardize_patches(patches: &Matrix, channels: usize) -> Result<Matrix> {
    if channels == 0 || patches.cols() % channels != 0 {
        return Err(Error::Shape(format!(
            "patch width {} is not a multiple of {channels} channels",
            patches.cols()
        )));
    }
    let block = patches.cols() / channels;
    let count = (patches.rows() * block) as f64;
    let mut stats = Vec::with_capacity(channels);
    for c in 0..channels {
        let values = || patches.row_iter().flat_map(|r| r[c * block..(c + 1) * block].iter());
        let mean = values().sum::<f64>() / count;
        let var = values().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
        stats.push((mean, var.sqrt()));
    }
    Ok(Matrix::from_fn(patches.rows(), patches.cols(), |i, j| {
        let (mean, std) = stats[j / block];
        if std > FLAT_CHANNEL_TOLERANCE * mean.abs().max(1.0) {
            (patches.get(i, j) - mean) / std
        } else {
            0.0
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalMode {
    /// Fixed 1-D sinusoidal table indexed by row-major token position.
    #[default]
    Sinusoidal,
    /// Table drawn from a seeded Gaussian (std 0.02), as a learned table would start.
    Learned,
}

/// Patch projection `(C*p^2) x C'` and positional table `Z x C'`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderWeights {
    pub projection: Matrix,
    pub positional: Matrix,
}

impl EmbedderWeights {
    /// Projection entries are `N(0, 1/(C*p^2))` so that a token's content part
    /// has roughly unit scale, comparable to the positional table.
    pub fn init(
        channels: usize,
        shape: GridShape,
        embed_dim: usize,
        mode: PositionalMode,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = channels * shape.patch_size * shape.patch_size;
        let projection = Matrix::gaussian(fan_in, embed_dim, 1.0 / (fan_in as f64).sqrt(), rng);
        let positional = match mode {
            PositionalMode::Sinusoidal => sinusoidal_table(shape.num_tokens(), embed_dim),
            PositionalMode::Learned => Matrix::gaussian(shape.num_tokens(), embed_dim, 0.02, rng),
        };
        Self {
            projection,
            positional,
        }
    }
}

/// `PE[pos][2i] = sin(pos / 10000^(2i/d))`, `PE[pos][2i+1] = cos(...)`.
pub fn sinusoidal_table(positions: usize, dim: usize) -> Matrix {
    Matrix::from_fn(positions, dim, |pos, j| {
        let pair = (j / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// `tokens = patches * projection + positional`.
pub fn embed_tokens(patches: &Matrix, w: &EmbedderWeights, shape: GridShape) -> Result<TokenGrid> {
    if patches.cols() != w.projection.rows() {
        return Err(Error::Shape(format!(
            "patch width {} vs projection input {}",
            patches.cols(),
            w.projection.rows()
        )));
    }
    let projected = matmul(patches, &w.projection)?;
    let tokens = projected.add(&w.positional)?;
    TokenGrid::new(tokens, shape)
}
