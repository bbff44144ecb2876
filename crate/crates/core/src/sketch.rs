//! Sketch-matrix parameterizations, initialization, masking and sampling.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Variance of the reparameterization noise `Z`.
pub const DEFAULT_NOISE_VAR: f64 = 0.25;

/// A seeded, splittable random stream. Identical `(seed, stream)` pairs
/// reproduce identical draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream }
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// First output of the stream, for seeding independent runs.
    pub fn next_seed(&self) -> u64 {
        self.rng().next_u64()
    }

    /// Child stream for a named purpose; same seed, mixed stream id.
    pub fn derive(&self, purpose: u64) -> RngStream {
        RngStream {
            seed: self.seed,
            stream: splitmix64(self.stream ^ splitmix64(purpose.wrapping_add(0x5851_f42d_4c95_7f2d))),
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SketchKind {
    Plain,
    Masked,
    Stochastic,
    StochasticMasked,
}

impl SketchKind {
    fn code(self) -> u8 {
        match self {
            SketchKind::Plain => 0,
            SketchKind::Masked => 1,
            SketchKind::Stochastic => 2,
            SketchKind::StochasticMasked => 3,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => SketchKind::Plain,
            1 => SketchKind::Masked,
            2 => SketchKind::Stochastic,
            3 => SketchKind::StochasticMasked,
            other => return Err(Error::Format(format!("unknown sketch kind {other}"))),
        })
    }

    pub fn is_stochastic(self) -> bool {
        matches!(self, SketchKind::Stochastic | SketchKind::StochasticMasked)
    }
}

/// A sketch matrix in one of four parameterizations.
///
/// Stochastic variants carry the variance of the noise `Z` they were trained
/// with. Their entries are drawn from `N(μ, noise_var · Σ_var)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum SketchSpec {
    Plain {
        s_base: Matrix,
    },
    Masked {
        s_base: Matrix,
        mask_d: Matrix,
    },
    Stochastic {
        mu: Matrix,
        sigma_var: Matrix,
        noise_var: f64,
    },
    StochasticMasked {
        mu: Matrix,
        sigma_var: Matrix,
        mask_d: Matrix,
        noise_var: f64,
    },
}

impl SketchSpec {
    pub fn kind(&self) -> SketchKind {
        match self {
            SketchSpec::Plain { .. } => SketchKind::Plain,
            SketchSpec::Masked { .. } => SketchKind::Masked,
            SketchSpec::Stochastic { .. } => SketchKind::Stochastic,
            SketchSpec::StochasticMasked { .. } => SketchKind::StochasticMasked,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            SketchSpec::Plain { s_base } | SketchSpec::Masked { s_base, .. } => s_base.shape(),
            SketchSpec::Stochastic { mu, .. } | SketchSpec::StochasticMasked { mu, .. } => mu.shape(),
        }
    }

    pub fn mask(&self) -> Option<&Matrix> {
        match self {
            SketchSpec::Masked { mask_d, .. } | SketchSpec::StochasticMasked { mask_d, .. } => Some(mask_d),
            _ => None,
        }
    }

    pub fn noise_var(&self) -> Option<f64> {
        match self {
            SketchSpec::Stochastic { noise_var, .. } | SketchSpec::StochasticMasked { noise_var, .. } => {
                Some(*noise_var)
            }
            _ => None,
        }
    }

    /// Checks shapes and sign constraints.
    pub fn validate(&self) -> Result<()> {
        let shape = self.shape();
        let tensors = self.tensors();
        for t in &tensors {
            if t.shape() != shape {
                return Err(Error::mismatch("sketch spec", shape, t.shape()));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite("sketch spec"));
            }
        }
        if let Some(d) = self.mask() {
            if d.as_slice().iter().any(|&x| x < 0.0) {
                return Err(Error::InvalidArgument("mask entries must be >= 0".into()));
            }
        }
        match self {
            SketchSpec::Stochastic { sigma_var, noise_var, .. }
            | SketchSpec::StochasticMasked { sigma_var, noise_var, .. } => {
                if sigma_var.as_slice().iter().any(|&x| x < 0.0) {
                    return Err(Error::InvalidArgument("variance entries must be >= 0".into()));
                }
                if !(noise_var.is_finite() && *noise_var >= 0.0) {
                    return Err(Error::InvalidArgument(format!("noise variance {noise_var} must be >= 0")));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// The stored matrices in container order.
    fn tensors(&self) -> Vec<&Matrix> {
        match self {
            SketchSpec::Plain { s_base } => vec![s_base],
            SketchSpec::Masked { s_base, mask_d } => vec![s_base, mask_d],
            SketchSpec::Stochastic { mu, sigma_var, .. } => vec![mu, sigma_var],
            SketchSpec::StochasticMasked {
                mu, sigma_var, mask_d, ..
            } => vec![mu, sigma_var, mask_d],
        }
    }

    /// The concrete sketch. `z` must be given exactly for stochastic kinds.
    pub fn materialize(&self, z: Option<&Matrix>) -> Result<Matrix> {
        match (self, z) {
            (SketchSpec::Plain { s_base }, None) => Ok(s_base.clone()),
            (SketchSpec::Masked { s_base, mask_d }, None) => mask_d.hadamard(s_base),
            (SketchSpec::Stochastic { mu, sigma_var, .. }, Some(z)) => reparameterize(mu, sigma_var, z),
            (
                SketchSpec::StochasticMasked {
                    mu, sigma_var, mask_d, ..
                },
                Some(z),
            ) => mask_d.hadamard(&reparameterize(mu, sigma_var, z)?),
            (spec, z) => Err(Error::InvalidArgument(format!(
                "{:?} sketch {} a noise matrix",
                spec.kind(),
                if z.is_some() { "does not take" } else { "requires" }
            ))),
        }
    }

    /// The sketch with the noise set to zero (`S = μ`, masked if applicable).
    pub fn mean_sketch(&self) -> Result<Matrix> {
        let (m, n) = self.shape();
        match self.kind() {
            k if k.is_stochastic() => self.materialize(Some(&Matrix::zeros(m, n))),
            _ => self.materialize(None),
        }
    }

    /// `n_samples` fresh materializations for stochastic kinds (noise drawn
    /// sequentially from `rng`), or the single deterministic sketch.
    pub fn sample_sketches(&self, n_samples: usize, rng: &RngStream) -> Result<Vec<Matrix>> {
        let Some(noise_var) = self.noise_var() else {
            return Ok(vec![self.materialize(None)?]);
        };
        if n_samples == 0 {
            return Err(Error::InvalidArgument("stochastic sketch needs n_samples >= 1".into()));
        }
        let (m, n) = self.shape();
        let mut gen = rng.rng();
        (0..n_samples)
            .map(|_| self.materialize(Some(&sample_noise_with(m, n, noise_var, &mut gen))))
            .collect()
    }

    /// Number of positions where the materialized sketch can be nonzero.
    pub fn support_nnz(&self) -> usize {
        let (m, n) = self.shape();
        let live = |i: usize, j: usize| -> bool {
            match self {
                SketchSpec::Plain { s_base } => s_base[(i, j)] != 0.0,
                SketchSpec::Masked { s_base, mask_d } => mask_d[(i, j)] != 0.0 && s_base[(i, j)] != 0.0,
                SketchSpec::Stochastic { mu, sigma_var, .. } => mu[(i, j)] != 0.0 || sigma_var[(i, j)] > 0.0,
                SketchSpec::StochasticMasked {
                    mu, sigma_var, mask_d, ..
                } => mask_d[(i, j)] != 0.0 && (mu[(i, j)] != 0.0 || sigma_var[(i, j)] > 0.0),
            }
        };
        (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, j)| live(i, j)).count()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SketchSpec = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Binary container: magic `SKSP`, version u16, kind u8, reserved u8,
    /// rows u32, cols u32, noise variance f64, then each stored matrix as
    /// rows×cols little-endian f64 (s_base | s_base,mask | mu,var | mu,var,mask).
    pub fn to_bytes(&self) -> Vec<u8> {
        let (m, n) = self.shape();
        let tensors = self.tensors();
        let mut out = Vec::with_capacity(24 + tensors.len() * m * n * 8);
        out.extend_from_slice(SKETCH_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.push(self.kind().code());
        out.push(0);
        out.extend_from_slice(&(m as u32).to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&self.noise_var().unwrap_or(0.0).to_le_bytes());
        for t in tensors {
            for x in t.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != SKETCH_MAGIC {
            return Err(Error::Format("bad sketch magic".into()));
        }
        let version = r.u16()?;
        if version != CONTAINER_VERSION {
            return Err(Error::Format(format!("unsupported sketch container version {version}")));
        }
        let kind = SketchKind::from_code(r.take(1)?[0])?;
        r.take(1)?;
        let m = r.u32()? as usize;
        let n = r.u32()? as usize;
        let noise_var = r.f64()?;
        let mut read = || r.matrix(m, n);
        let spec = match kind {
            SketchKind::Plain => SketchSpec::Plain { s_base: read()? },
            SketchKind::Masked => SketchSpec::Masked {
                s_base: read()?,
                mask_d: read()?,
            },
            SketchKind::Stochastic => SketchSpec::Stochastic {
                mu: read()?,
                sigma_var: read()?,
                noise_var,
            },
            SketchKind::StochasticMasked => SketchSpec::StochasticMasked {
                mu: read()?,
                sigma_var: read()?,
                mask_d: read()?,
                noise_var,
            },
        };
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after sketch".into()));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = if path.extension().is_some_and(|e| e == "json") {
            self.to_json()?.into_bytes()
        } else {
            self.to_bytes()
        };
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Loads either container form, detected by the magic bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let parsed = if bytes.starts_with(SKETCH_MAGIC) {
            SketchSpec::from_bytes(&bytes)
        } else {
            std::str::from_utf8(&bytes)
                .map_err(|e| Error::Format(e.to_string()))
                .and_then(SketchSpec::from_json)
        };
        parsed.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

const SKETCH_MAGIC: &[u8; 4] = b"SKSP";
const CONTAINER_VERSION: u16 = 1;

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of container".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let len = rows
            .checked_mul(cols)
            .and_then(|l| l.checked_mul(8))
            .ok_or_else(|| Error::Format("matrix size overflows".into()))?;
        let raw = self.take(len)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::new(rows, cols, data)
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn reparameterize(mu: &Matrix, sigma_var: &Matrix, z: &Matrix) -> Result<Matrix> {
    if z.shape() != mu.shape() {
        return Err(Error::mismatch("materialize", mu.shape(), z.shape()));
    }
    let mut s = z.hadamard(&sigma_var.map(f64::sqrt))?;
    s.axpy(1.0, mu)?;
    Ok(s)
}

/// CountSketch-style sparse sketch: every column has exactly `density`
/// nonzero rows, drawn without replacement, each holding ±1.
pub fn init_countsketch(m: usize, n: usize, density: usize, rng: &RngStream) -> Result<SketchSpec> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!("sketch shape {m}x{n} must be nonempty")));
    }
    if density == 0 || density > m {
        return Err(Error::InvalidArgument(format!(
            "density {density} must lie in 1..={m}"
        )));
    }
    let mut gen = rng.rng();
    let mut s = Matrix::zeros(m, n);
    for j in 0..n {
        for i in index::sample(&mut gen, m, density) {
            s[(i, j)] = if gen.gen::<bool>() { 1.0 } else { -1.0 };
        }
    }
    Ok(SketchSpec::Plain { s_base: s })
}

/// Dense Gaussian sketch with i.i.d. `N(0, 1/m)` entries.
pub fn init_gaussian(m: usize, n: usize, rng: &RngStream) -> Result<SketchSpec> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!("sketch shape {m}x{n} must be nonempty")));
    }
    let mut gen = rng.rng();
    Ok(SketchSpec::Plain {
        s_base: sample_noise_with(m, n, 1.0 / m as f64, &mut gen),
    })
}

/// I.i.d. `N(0, 1/4)` noise drawn from the start of `rng`.
pub fn sample_noise(m: usize, n: usize, rng: &RngStream) -> Matrix {
    sample_noise_with(m, n, DEFAULT_NOISE_VAR, &mut rng.rng())
}

/// I.i.d. `N(0, variance)` noise drawn from an in-progress generator.
pub fn sample_noise_with<R: Rng + ?Sized>(m: usize, n: usize, variance: f64, rng: &mut R) -> Matrix {
    let std = variance.max(0.0).sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let data = (0..m * n).map(|_| std * normal.sample(rng)).collect();
    Matrix::new(m, n, data).expect("length matches")
}

/// Zeroes entries strictly below `epsilon`. Returns the new mask and how many
/// previously nonzero entries were pruned.
pub fn threshold_mask(mask_d: &Matrix, epsilon: f64) -> (Matrix, usize) {
    let pruned = mask_d
        .as_slice()
        .iter()
        .filter(|&&x| x != 0.0 && x < epsilon)
        .count();
    (mask_d.map(|x| if x < epsilon { 0.0 } else { x }), pruned)
}

/// Count of entries that are not exactly zero.
pub fn nnz(mask_d: &Matrix) -> usize {
    mask_d.as_slice().iter().filter(|&&x| x != 0.0).count()
}

/// Average number of nonzero positions per column of the sketch support.
pub fn density_of(spec: &SketchSpec) -> f64 {
    let (_, n) = spec.shape();
    spec.support_nnz() as f64 / n as f64
}
