//! Matrix datasets: synthetic families, on-disk ingestion, and splits.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::RwLock;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scw::optimal_error_sq;
use crate::sketch::{sample_noise_with, ByteReader, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Train,
    Test,
    Ood,
}

/// A nonempty list of equally shaped matrices.
pub struct MatrixDataset {
    matrices: Vec<Matrix>,
    role: Role,
    provenance: String,
    optimal_cache: RwLock<BTreeMap<usize, Vec<f64>>>,
}

impl MatrixDataset {
    pub fn new(matrices: Vec<Matrix>, role: Role, provenance: impl Into<String>) -> Result<Self> {
        let first = matrices.first().ok_or(Error::EmptyDataset)?;
        let shape = first.shape();
        if let Some(bad) = matrices.iter().find(|m| m.shape() != shape) {
            return Err(Error::mismatch("dataset", shape, bad.shape()));
        }
        Ok(MatrixDataset {
            matrices,
            role,
            provenance: provenance.into(),
            optimal_cache: RwLock::new(BTreeMap::new()),
        })
    }

    pub fn matrices(&self) -> &[Matrix] {
        &self.matrices
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    /// `(n, d)` shared by every matrix.
    pub fn shape(&self) -> (usize, usize) {
        self.matrices[0].shape()
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// Divides each matrix by its Frobenius norm (zero matrices are kept).
    pub fn normalize_frobenius(mut self) -> Self {
        for m in &mut self.matrices {
            let norm = m.frobenius_norm();
            if norm > 0.0 {
                *m = m.scale(1.0 / norm);
            }
        }
        self.optimal_cache = RwLock::new(BTreeMap::new());
        self.provenance.push_str(" +normalize=fro");
        self
    }

    /// `‖A_i − (A_i)_k‖_F²` for every matrix, computed once per `k`.
    pub fn optimal_errors(&self, k: usize) -> Result<Vec<f64>> {
        if let Some(v) = self.optimal_cache.read().expect("cache lock").get(&k) {
            return Ok(v.clone());
        }
        let values: Vec<f64> = self
            .matrices
            .par_iter()
            .map(|a| optimal_error_sq(a, k))
            .collect::<Result<_>>()?;
        self.optimal_cache
            .write()
            .expect("cache lock")
            .insert(k, values.clone());
        Ok(values)
    }

    pub fn save_dir(&self, dir: &Path, format: MatrixFormat) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let width = self.len().to_string().len().max(3);
        for (i, m) in self.matrices.iter().enumerate() {
            let path = dir.join(format!("{i:0width$}.{}", format.extension()));
            write_matrix(&path, m, format)?;
        }
        Ok(())
    }
}

impl Clone for MatrixDataset {
    fn clone(&self) -> Self {
        MatrixDataset {
            matrices: self.matrices.clone(),
            role: self.role,
            provenance: self.provenance.clone(),
            optimal_cache: RwLock::new(self.optimal_cache.read().expect("cache lock").clone()),
        }
    }
}

impl fmt::Debug for MatrixDataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (n, d) = self.shape();
        f.debug_struct("MatrixDataset")
            .field("count", &self.len())
            .field("shape", &(n, d))
            .field("role", &self.role)
            .field("provenance", &self.provenance)
            .finish()
    }
}

/// Parameters of a synthetic family whose members share a column subspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFamilySpec {
    pub n: usize,
    pub d: usize,
    pub shared_rank: usize,
    pub noise_level: f64,
    pub family_seed: u64,
    pub count: usize,
    /// Column `j` of the shared basis is scaled by `decay^j`, giving the
    /// family a stable dominant subspace.
    pub decay: f64,
}

impl SyntheticFamilySpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.count == 0 {
            return Err(Error::InvalidArgument(format!(
                "synthetic family needs positive n, d, count (got {}, {}, {})",
                self.n, self.d, self.count
            )));
        }
        if self.shared_rank > self.n.min(self.d) {
            return Err(Error::InvalidArgument(format!(
                "shared rank {} exceeds min({}, {})",
                self.shared_rank, self.n, self.d
            )));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::InvalidArgument("noise level must be >= 0".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidArgument("decay must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// The family's shared basis `B` (n×r), fixed by `family_seed` alone.
    pub fn basis(&self) -> Matrix {
        let mut rng = RngStream::new(self.family_seed, BASIS_STREAM).rng();
        let b = sample_noise_with(self.n, self.shared_rank, 1.0, &mut rng);
        let scales: Vec<f64> = (0..self.shared_rank).map(|j| self.decay.powi(j as i32)).collect();
        b.scale_columns(&scales)
    }
}

const BASIS_STREAM: u64 = 0xba5e;

pub const DEFAULT_DECAY: f64 = 0.8;

/// Draws `count` matrices `A_i = B·C_i + noise·G_i` with `B` from
/// `spec.family_seed` and `C_i`, `G_i` standard Gaussian from `rng`.
pub fn generate_shared_subspace(spec: &SyntheticFamilySpec, rng: &RngStream) -> Result<MatrixDataset> {
    spec.validate()?;
    let b = spec.basis();
    let mut gen = rng.rng();
    let matrices = (0..spec.count)
        .map(|_| {
            let c = sample_noise_with(spec.shared_rank, spec.d, 1.0, &mut gen);
            let g = sample_noise_with(spec.n, spec.d, 1.0, &mut gen);
            let mut a = b.matmul(&c)?;
            a.axpy(spec.noise_level, &g)?;
            Ok(a)
        })
        .collect::<Result<Vec<_>>>()?;
    MatrixDataset::new(
        matrices,
        Role::Train,
        format!(
            "synthetic n={} d={} r={} noise={} decay={} family_seed={} seed={} stream={}",
            spec.n, spec.d, spec.shared_rank, spec.noise_level, spec.decay, spec.family_seed, rng.seed, rng.stream
        ),
    )
}

/// Randomly partitions `dataset` into disjoint train and test subsets.
pub fn split(
    dataset: &MatrixDataset,
    train_count: usize,
    test_count: usize,
    rng: &RngStream,
) -> Result<(MatrixDataset, MatrixDataset)> {
    let (train_idx, test_idx) = split_indices(dataset.len(), train_count, test_count, rng)?;
    let pick = |idx: &[usize], role| {
        MatrixDataset::new(
            idx.iter().map(|&i| dataset.matrices[i].clone()).collect(),
            role,
            format!("{} [split {:?}]", dataset.provenance, role),
        )
    };
    Ok((pick(&train_idx, Role::Train)?, pick(&test_idx, Role::Test)?))
}

/// Index sets used by [`split`].
pub fn split_indices(
    len: usize,
    train_count: usize,
    test_count: usize,
    rng: &RngStream,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if train_count == 0 || test_count == 0 || train_count + test_count > len {
        return Err(Error::InvalidArgument(format!(
            "cannot split {len} matrices into {train_count} train + {test_count} test"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng.rng());
    let test = order[train_count..train_count + test_count].to_vec();
    order.truncate(train_count);
    Ok((order, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixFormat {
    Pgm,
    Csv,
    RawBin,
}

impl MatrixFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MatrixFormat::Pgm => "pgm",
            MatrixFormat::Csv => "csv",
            MatrixFormat::RawBin => "bin",
        }
    }
}

impl FromStr for MatrixFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgm" => Ok(MatrixFormat::Pgm),
            "csv" => Ok(MatrixFormat::Csv),
            "rawbin" | "bin" => Ok(MatrixFormat::RawBin),
            other => Err(Error::InvalidArgument(format!("unknown matrix format `{other}`"))),
        }
    }
}

/// Loads every `*.pgm` / `*.csv` / `*.bin` file (by `format`) in `dir`, in
/// file-name order, as one dataset.
pub fn load_matrix_dir(dir: &Path, format: MatrixFormat) -> Result<MatrixDataset> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == format.extension()) {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Parse {
            path: dir.to_path_buf(),
            msg: format!("no .{} files found", format.extension()),
        });
    }
    let matrices = paths
        .par_iter()
        .map(|p| match format {
            MatrixFormat::Pgm => read_pgm(p),
            MatrixFormat::Csv => read_csv(p),
            MatrixFormat::RawBin => read_rawbin(p),
        })
        .collect::<Result<Vec<_>>>()?;
    let shape = matrices[0].shape();
    if let Some((path, bad)) = paths.iter().zip(&matrices).find(|(_, m)| m.shape() != shape) {
        return Err(Error::Parse {
            path: path.clone(),
            msg: format!(
                "shape {}x{} differs from {}x{} of {}",
                bad.rows(),
                bad.cols(),
                shape.0,
                shape.1,
                paths[0].display()
            ),
        });
    }
    MatrixDataset::new(matrices, Role::Train, dir.display().to_string())
}

const MATRIX_MAGIC: &[u8; 4] = b"SKLB";
const MATRIX_VERSION: u16 = 1;

/// rawbin container: `SKLB`, version u16, rows u32, cols u32, then
/// rows×cols little-endian f64.
pub fn write_matrix(path: &Path, m: &Matrix, format: MatrixFormat) -> Result<()> {
    match format {
        MatrixFormat::Csv => write_csv(path, m),
        MatrixFormat::RawBin => write_rawbin(path, m),
        MatrixFormat::Pgm => write_pgm(path, m),
    }
}

pub fn matrix_to_rawbin(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + m.len() * 8);
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for x in m.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn matrix_from_rawbin(bytes: &[u8]) -> Result<Matrix> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MATRIX_MAGIC {
        return Err(Error::Format("bad matrix magic".into()));
    }
    let version = r.u16()?;
    if version != MATRIX_VERSION {
        return Err(Error::Format(format!("unsupported matrix container version {version}")));
    }
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let m = r.matrix(rows, cols)?;
    if !r.is_done() {
        return Err(Error::Format("trailing bytes after matrix".into()));
    }
    Matrix::new_checked(rows, cols, m.into_vec())
}

pub fn read_rawbin(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    matrix_from_rawbin(&bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn write_rawbin(path: &Path, m: &Matrix) -> Result<()> {
    fs::write(path, matrix_to_rawbin(m)).map_err(|e| Error::io(path, e))
}

pub fn parse_csv(text: &str) -> std::result::Result<Matrix, String> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|field| {
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| format!("line {}: `{}`: {e}", lineno + 1, field.trim()))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(format!(
                    "line {}: {} fields, expected {}",
                    lineno + 1,
                    row.len(),
                    first.len()
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err("no rows".into());
    }
    let cols = rows[0].len();
    Matrix::new_checked(rows.len(), cols, rows.concat()).map_err(|e| e.to_string())
}

pub fn read_csv(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text).map_err(|msg| Error::Parse {
        path: path.to_path_buf(),
        msg,
    })
}

/// One row per line, 17 significant digits per entry.
pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|x| format!("{x:.16e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv(path: &Path, m: &Matrix) -> Result<()> {
    fs::write(path, matrix_to_csv(m)).map_err(|e| Error::io(path, e))
}

/// Parses a plain (P2) or binary (P5) PGM; gray levels are scaled by maxval
/// into `[0, 1]`.
pub fn parse_pgm(bytes: &[u8]) -> std::result::Result<Matrix, String> {
    let mut pos = 0usize;
    let mut header = Vec::with_capacity(4);
    while header.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let magic = header[0].as_str();
    let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad PGM {what} `{s}`"));
    let width = parse(&header[1], "width")?;
    let height = parse(&header[2], "height")?;
    let maxval = parse(&header[3], "maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(format!("invalid PGM header {width}x{height} maxval {maxval}"));
    }
    let count = width * height;
    let scale = maxval as f64;
    let values: Vec<f64> = match magic {
        "P2" => {
            let text = String::from_utf8_lossy(&bytes[pos..]);
            let vals: Vec<f64> = text
                .split_ascii_whitespace()
                .take(count)
                .map(|t| t.parse::<u32>().map(|v| v as f64 / scale).map_err(|_| format!("bad pixel `{t}`")))
                .collect::<std::result::Result<_, _>>()?;
            vals
        }
        "P5" => {
            // exactly one whitespace byte separates the header from raster data
            let data = &bytes[(pos + 1).min(bytes.len())..];
            if maxval < 256 {
                data.iter().take(count).map(|&b| b as f64 / scale).collect()
            } else {
                data.chunks_exact(2)
                    .take(count)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
                    .collect()
            }
        }
        other => return Err(format!("unsupported PGM magic `{other}`")),
    };
    if values.len() != count {
        return Err(format!("expected {count} pixels, found {}", values.len()));
    }
    if values.iter().any(|&v| v > 1.0) {
        return Err("pixel exceeds maxval".into());
    }
    Matrix::new_checked(height, width, values).map_err(|e| e.to_string())
}

pub fn read_pgm(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|msg| Error::Parse {
        path: path.to_path_buf(),
        msg,
    })
}

/// Writes a binary 8-bit PGM, clamping entries to `[0, 1]`.
pub fn write_pgm(path: &Path, m: &Matrix) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", m.cols(), m.rows()).into_bytes();
    out.extend(m.as_slice().iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn family() -> SyntheticFamilySpec {
        SyntheticFamilySpec {
            n: 12,
            d: 9,
            shared_rank: 3,
            noise_level: 0.0,
            family_seed: 11,
            count: 10,
            decay: DEFAULT_DECAY,
        }
    }

    #[test]
    fn csv_parse() {
        let m = parse_csv("1,2\n3,4\n").unwrap();
        assert_eq!(m, Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        assert!(parse_csv("1,2\n3\n").is_err());
        assert!(parse_csv("1,x\n").is_err());
        assert!(parse_csv("").is_err());
    }

    #[test]
    fn pgm_scaling() {
        let m = parse_pgm(b"P2\n# comment\n2 1\n255\n255 0\n").unwrap();
        assert_eq!(m.as_slice(), &[1.0, 0.0]);
        let mut p5 = b"P5 1 2 255\n".to_vec();
        p5.extend_from_slice(&[51, 255]);
        let m = parse_pgm(&p5).unwrap();
        assert_eq!(m.shape(), (2, 1));
        assert_eq!(m.as_slice(), &[0.2, 1.0]);
        assert!(parse_pgm(b"P2 2 2 255 1 2 3").is_err());
        assert!(parse_pgm(b"P3 1 1 255 1").is_err());
    }

    #[test]
    fn split_sizes_and_errors() {
        let ds = generate_shared_subspace(&family(), &RngStream::new(1, 0)).unwrap();
        let (tr, te) = split(&ds, 7, 3, &RngStream::new(2, 0)).unwrap();
        assert_eq!((tr.len(), te.len()), (7, 3));
        assert_eq!(tr.role(), Role::Train);
        assert_eq!(te.role(), Role::Test);
        assert!(split(&ds, 8, 3, &RngStream::new(2, 0)).is_err());
    }

    #[test]
    fn family_validation() {
        let mut bad = family();
        bad.shared_rank = 20;
        assert!(generate_shared_subspace(&bad, &RngStream::new(1, 0)).is_err());
        let mut bad = family();
        bad.noise_level = -1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dataset_rejects_mixed_shapes() {
        assert!(MatrixDataset::new(vec![], Role::Train, "").is_err());
        let err = MatrixDataset::new(vec![Matrix::zeros(2, 2), Matrix::zeros(2, 3)], Role::Train, "");
        assert!(err.is_err());
    }
}
