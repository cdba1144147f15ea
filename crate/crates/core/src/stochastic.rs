//! Generation of historical data: Gaussian random fields via
//! Karhunen-Loeve/Cholesky, task families, snapshot assembly, noise
//! injection, and sliding-window extraction for spatio-temporal series.

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::seeded_rng;

/// Variable block tag shared by snapshots, generators, and observations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarTag {
    /// Solution / state variable.
    U,
    /// Source term.
    F,
    /// Boundary values.
    B,
    /// Log hydraulic conductivity.
    KLog,
    /// Hydraulic head.
    H,
    /// Fractional order (scalar).
    Alpha,
    /// Reaction-rate field.
    Kr,
}

impl VarTag {
    pub fn as_str(self) -> &'static str {
        match self {
            VarTag::U => "u",
            VarTag::F => "f",
            VarTag::B => "b",
            VarTag::KLog => "k_log",
            VarTag::H => "h",
            VarTag::Alpha => "alpha",
            VarTag::Kr => "k_r",
        }
    }

    pub fn parse(s: &str) -> Option<VarTag> {
        Some(match s {
            "u" => VarTag::U,
            "f" => VarTag::F,
            "b" => VarTag::B,
            "k_log" => VarTag::KLog,
            "h" => VarTag::H,
            "alpha" => VarTag::Alpha,
            "k_r" => VarTag::Kr,
            _ => return None,
        })
    }
}

#[derive(thiserror::Error, Debug)]
pub enum StochasticError {
    #[error("Cholesky failed even with jitter {max_jitter}")]
    CholeskyFailed { max_jitter: f64 },
    #[error("requested {terms} KL terms but grid has only {grid} points")]
    TooManyTerms { terms: usize, grid: usize },
    #[error("realization counts differ across blocks: {0:?}")]
    MismatchedRealizations(Vec<usize>),
    #[error("window of {span} does not fit in a series of length {len}")]
    WindowTooLong { span: f64, len: f64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed snapshot file: {0}")]
    Malformed(String),
}

/// Squared-exponential covariance with per-axis length scales.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Kernel {
    pub length_scales: Vec<f64>,
    pub variance: f64,
}

impl Kernel {
    pub fn squared_exponential(l: f64) -> Self {
        Kernel {
            length_scales: vec![l],
            variance: 1.0,
        }
    }

    /// 2-D squared-exponential. The printed form of the reference kernel has
    /// an unsquared first exponent, which is not a valid covariance; both
    /// axes are treated as squared here.
    pub fn squared_exponential_2d(l1: f64, l2: f64) -> Self {
        Kernel {
            length_scales: vec![l1, l2],
            variance: 1.0,
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut e = 0.0;
        for d in 0..self.length_scales.len() {
            let diff = x[d] - y[d];
            e += diff * diff / (2.0 * self.length_scales[d] * self.length_scales[d]);
        }
        self.variance * (-e).exp()
    }

    /// Gram matrix over points (rows are coordinates).
    pub fn gram(&self, points: &Array2<f64>) -> DMatrix<f64> {
        let n = points.nrows();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = self.eval(
                    points.row(i).as_slice().unwrap(),
                    points.row(j).as_slice().unwrap(),
                );
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }
}

/// Cholesky factor of `gram + jitter I`, escalating the jitter from 1e-10 by
/// decades up to 1e-6 before giving up.
pub fn cholesky_with_jitter(
    gram: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, f64), StochasticError> {
    let mut jitter = 1e-10;
    while jitter <= 1e-6 {
        let mut k = gram.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += jitter;
        }
        if let Some(chol) = k.cholesky() {
            return Ok((chol.unpack(), jitter));
        }
        jitter *= 10.0;
    }
    Err(StochasticError::CholeskyFailed { max_jitter: 1e-6 })
}

/// Draw `n` i.i.d. mean-zero Gaussian-process sample paths at `points`;
/// one realization per row.
pub fn sample_gp(
    kernel: &Kernel,
    points: &Array2<f64>,
    n: usize,
    seed: u64,
) -> Result<Array2<f64>, StochasticError> {
    let (l, _) = cholesky_with_jitter(&kernel.gram(points))?;
    let m = points.nrows();
    let mut rng = seeded_rng(seed, "sample-gp");
    let mut out = Array2::zeros((n, m));
    let mut z = vec![0.0f64; m];
    for r in 0..n {
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += l[(i, j)] * z[j];
            }
            out[(r, i)] = acc;
        }
    }
    Ok(out)
}

/// Discrete Karhunen-Loeve expansion: eigenpairs of the Gram matrix on a
/// fixed grid, eigenvalues in non-increasing order.
#[derive(Clone, Debug)]
pub struct KlExpansion {
    pub grid: Array2<f64>,
    pub eigenvalues: Vec<f64>,
    /// `eigenvectors[(i, k)]` is the k-th basis function at grid point i.
    pub eigenvectors: Array2<f64>,
}

pub fn kl_expansion(
    kernel: &Kernel,
    grid: &Array2<f64>,
    terms: usize,
) -> Result<KlExpansion, StochasticError> {
    let n = grid.nrows();
    if terms > n {
        return Err(StochasticError::TooManyTerms { terms, grid: n });
    }
    let gram = kernel.gram(grid);
    let eig = nalgebra::SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
    });
    let mut eigenvalues = Vec::with_capacity(terms);
    let mut eigenvectors = Array2::zeros((n, terms));
    for (k, &idx) in order.iter().take(terms).enumerate() {
        eigenvalues.push(eig.eigenvalues[idx].max(0.0));
        for i in 0..n {
            eigenvectors[(i, k)] = eig.eigenvectors[(i, idx)];
        }
    }
    Ok(KlExpansion {
        grid: grid.clone(),
        eigenvalues,
        eigenvectors,
    })
}

impl KlExpansion {
    pub fn terms(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Sample `n` field realizations `F = sum_k sqrt(lambda_k) z_k phi_k`,
    /// one per row.
    pub fn sample(&self, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = seeded_rng(seed, "sample-kl");
        let g = self.grid.nrows();
        let t = self.terms();
        let sqrt_l: Vec<f64> = self.eigenvalues.iter().map(|l| l.sqrt()).collect();
        let mut out = Array2::zeros((n, g));
        for r in 0..n {
            let z: Vec<f64> = (0..t).map(|_| StandardNormal.sample(&mut rng)).collect();
            for i in 0..g {
                let mut acc = 0.0;
                for k in 0..t {
                    acc += sqrt_l[k] * z[k] * self.eigenvectors[(i, k)];
                }
                out[(r, i)] = acc;
            }
        }
        out
    }
}

/// `n` equidistant points spanning `[lo, hi]` inclusive.
pub fn equidistant(n: usize, lo: f64, hi: f64) -> Array2<f64> {
    assert!(n >= 2);
    let mut out = Array2::zeros((n, 1));
    for i in 0..n {
        out[(i, 0)] = lo + (hi - lo) * i as f64 / (n - 1) as f64;
    }
    out
}

/// Row-major uniform grid over `[lo1, hi1] x [lo2, hi2]`.
pub fn grid_2d(n1: usize, n2: usize, lo: (f64, f64), hi: (f64, f64)) -> Array2<f64> {
    let mut out = Array2::zeros((n1 * n2, 2));
    for i in 0..n1 {
        for j in 0..n2 {
            out[(i * n2 + j, 0)] = lo.0 + (hi.0 - lo.0) * i as f64 / (n1 - 1) as f64;
            out[(i * n2 + j, 1)] = lo.1 + (hi.1 - lo.1) * j as f64 / (n2 - 1) as f64;
        }
    }
    out
}

/// One realization of the sine task family `u = A sin(w x)`.
#[derive(Clone, Debug)]
pub struct TaskSample {
    pub amplitude: f64,
    pub frequency: f64,
    pub values: Vec<f64>,
}

/// Sample sine tasks with `A ~ U[1,3]`, `w ~ U[2,12]`, resolved at the given
/// sensor coordinates.
pub fn sample_sine_tasks(n: usize, sensors: &Array2<f64>, seed: u64) -> Vec<TaskSample> {
    let mut rng = seeded_rng(seed, "sine-tasks");
    (0..n)
        .map(|_| {
            let amplitude = rng.gen_range(1.0..3.0);
            let frequency = rng.gen_range(2.0..12.0);
            let values = sensors
                .rows()
                .into_iter()
                .map(|x| amplitude * (frequency * x[0]).sin())
                .collect();
            TaskSample {
                amplitude,
                frequency,
                values,
            }
        })
        .collect()
}

/// Sensor layout and data matrix of one snapshot family: each row is one
/// realization's readings across all variable blocks in order.
#[derive(Clone, Debug)]
pub struct SnapshotSet {
    pub blocks: Vec<SnapshotBlock>,
    /// realizations x total sensors
    pub data: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct SnapshotBlock {
    pub var: VarTag,
    /// sensors x coordinate-dimension
    pub coords: Array2<f64>,
    /// Per-entry Gaussian noise std that was added to this block (0 = clean).
    pub noise_std: f64,
}

impl SnapshotSet {
    pub fn n_realizations(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_columns(&self) -> usize {
        self.data.ncols()
    }

    /// Column range occupied by a block.
    pub fn block_range(&self, idx: usize) -> std::ops::Range<usize> {
        let start: usize = self.blocks[..idx].iter().map(|b| b.coords.nrows()).sum();
        start..start + self.blocks[idx].coords.nrows()
    }

    pub fn block_index(&self, var: VarTag) -> Option<usize> {
        self.blocks.iter().position(|b| b.var == var)
    }
}

/// Assemble per-variable realizations into snapshot rows, adding independent
/// Gaussian noise of each block's configured std.
pub fn assemble_snapshots(
    blocks: Vec<(VarTag, Array2<f64>, Array2<f64>)>,
    noise_std: &[f64],
    seed: u64,
) -> Result<SnapshotSet, StochasticError> {
    assert_eq!(blocks.len(), noise_std.len());
    let counts: Vec<usize> = blocks.iter().map(|(_, _, r)| r.nrows()).collect();
    if counts.windows(2).any(|w| w[0] != w[1]) {
        return Err(StochasticError::MismatchedRealizations(counts));
    }
    let n = counts.first().copied().unwrap_or(0);
    let total: usize = blocks.iter().map(|(_, c, _)| c.nrows()).sum();
    let mut data = Array2::zeros((n, total));
    let mut rng = seeded_rng(seed, "snapshot-noise");
    let mut layout = Vec::new();
    let mut at = 0usize;
    for ((var, coords, reals), &std) in blocks.into_iter().zip(noise_std.iter()) {
        assert_eq!(
            coords.nrows(),
            reals.ncols(),
            "sensor count vs realization width for {var:?}"
        );
        let w = coords.nrows();
        for r in 0..n {
            for c in 0..w {
                let noise: f64 = if std > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    std * z
                } else {
                    0.0
                };
                data[(r, at + c)] = reals[(r, c)] + noise;
            }
        }
        layout.push(SnapshotBlock {
            var,
            coords,
            noise_std: std,
        });
        at += w;
    }
    Ok(SnapshotSet {
        blocks: layout,
        data,
    })
}

/// Spatio-temporal sensor series: periodic reads of fixed sensors.
#[derive(Clone, Debug)]
pub struct SensorSeries {
    pub sensor_x: Vec<f64>,
    pub t0: f64,
    pub dt: f64,
    /// sensors x time-steps
    pub values: Array2<f64>,
}

impl SensorSeries {
    pub fn n_steps(&self) -> usize {
        self.values.ncols()
    }

    pub fn duration(&self) -> f64 {
        (self.n_steps() - 1) as f64 * self.dt
    }

    /// Contiguous sub-series starting at `t_start` (snapped to the grid).
    pub fn slice_time(&self, t_start: f64, t_end: f64) -> SensorSeries {
        let s = (((t_start - self.t0) / self.dt).round() as usize).min(self.n_steps() - 1);
        let e = (((t_end - self.t0) / self.dt).round() as usize).min(self.n_steps() - 1);
        SensorSeries {
            sensor_x: self.sensor_x.clone(),
            t0: self.t0 + s as f64 * self.dt,
            dt: self.dt,
            values: self.values.slice(ndarray::s![.., s..=e]).to_owned(),
        }
    }
}

/// Extract sliding-window snapshots from a sensor series.
///
/// Each window spans `window_span` seconds and advances by `stride`;
/// `reads_per_window` time slices are selected equidistantly inside the
/// window. Snapshot columns are ordered time-major (all sensors of the first
/// selected read, then the next read), and the coordinate attached to each
/// column is `(x_sensor, t_local)` with window-local time starting at 0.
pub fn sliding_windows(
    series: &SensorSeries,
    window_span: f64,
    stride: f64,
    reads_per_window: usize,
) -> Result<SnapshotSet, StochasticError> {
    let span_steps = (window_span / series.dt).round() as usize;
    let stride_steps = ((stride / series.dt).round() as usize).max(1);
    let n_steps = series.n_steps();
    if span_steps + 1 > n_steps {
        return Err(StochasticError::WindowTooLong {
            span: window_span,
            len: series.duration(),
        });
    }
    let n_windows = (n_steps - 1 - span_steps) / stride_steps + 1;
    let n_sensors = series.sensor_x.len();
    let reads_avail = span_steps + 1;
    let sel: Vec<usize> = if reads_per_window == 1 {
        vec![0]
    } else {
        (0..reads_per_window)
            .map(|j| {
                ((j as f64) * (reads_avail - 1) as f64 / (reads_per_window - 1) as f64).round()
                    as usize
            })
            .collect()
    };

    let cols = n_sensors * reads_per_window;
    let mut coords = Array2::zeros((cols, 2));
    for (jj, &j) in sel.iter().enumerate() {
        for i in 0..n_sensors {
            coords[(jj * n_sensors + i, 0)] = series.sensor_x[i];
            coords[(jj * n_sensors + i, 1)] = j as f64 * series.dt;
        }
    }
    let mut data = Array2::zeros((n_windows, cols));
    for w in 0..n_windows {
        let start = w * stride_steps;
        for (jj, &j) in sel.iter().enumerate() {
            for i in 0..n_sensors {
                data[(w, jj * n_sensors + i)] = series.values[(i, start + j)];
            }
        }
    }
    Ok(SnapshotSet {
        blocks: vec![SnapshotBlock {
            var: VarTag::U,
            coords,
            noise_std: 0.0,
        }],
        data,
    })
}

/// Synthetic stand-in for a measured displacement field: a fixed sum of
/// three standing waves,
/// `u(x,t) = sum_k a_k sin(k pi x) cos(2 pi f_k t + phi_k)` with
/// `a = (1.0, 0.6, 0.3)`, `f = (1.25, 2.05, 3.35)` Hz,
/// `phi = (0.0, 0.7, 1.9)`, sensors equidistant on `[0, 1]`.
pub fn synthetic_displacement_series(
    n_sensors: usize,
    dt: f64,
    total_time: f64,
) -> SensorSeries {
    const A: [f64; 3] = [1.0, 0.6, 0.3];
    const FREQ: [f64; 3] = [1.25, 2.05, 3.35];
    const PHI: [f64; 3] = [0.0, 0.7, 1.9];
    let n_steps = (total_time / dt).round() as usize + 1;
    let sensor_x: Vec<f64> = (0..n_sensors)
        .map(|i| i as f64 / (n_sensors - 1) as f64)
        .collect();
    let mut values = Array2::zeros((n_sensors, n_steps));
    for (i, &x) in sensor_x.iter().enumerate() {
        for s in 0..n_steps {
            let t = s as f64 * dt;
            let mut u = 0.0;
            for k in 0..3 {
                u += A[k]
                    * ((k + 1) as f64 * std::f64::consts::PI * x).sin()
                    * (2.0 * std::f64::consts::PI * FREQ[k] * t + PHI[k]).cos();
            }
            values[(i, s)] = u;
        }
    }
    SensorSeries {
        sensor_x,
        t0: 0.0,
        dt,
        values,
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotFileHeader {
    version: u32,
    blocks: Vec<SnapshotFileBlock>,
    rows: usize,
}

#[derive(Serialize, Deserialize)]
struct SnapshotFileBlock {
    var: String,
    coord_dim: usize,
    coords: Vec<f64>,
    noise_std: f64,
}

fn file_header(set: &SnapshotSet) -> SnapshotFileHeader {
    SnapshotFileHeader {
        version: 1,
        blocks: set
            .blocks
            .iter()
            .map(|b| SnapshotFileBlock {
                var: b.var.as_str().to_string(),
                coord_dim: b.coords.ncols(),
                coords: b.coords.iter().copied().collect(),
                noise_std: b.noise_std,
            })
            .collect(),
        rows: set.n_realizations(),
    }
}

fn set_from_header(
    header: SnapshotFileHeader,
    data: Array2<f64>,
) -> Result<SnapshotSet, StochasticError> {
    let mut blocks = Vec::new();
    for b in header.blocks {
        let var = VarTag::parse(&b.var)
            .ok_or_else(|| StochasticError::Malformed(format!("unknown block `{}`", b.var)))?;
        let n = b.coords.len() / b.coord_dim.max(1);
        let coords = Array2::from_shape_vec((n, b.coord_dim), b.coords)
            .map_err(|e| StochasticError::Malformed(e.to_string()))?;
        blocks.push(SnapshotBlock {
            var,
            coords,
            noise_std: b.noise_std,
        });
    }
    let total: usize = blocks.iter().map(|b| b.coords.nrows()).sum();
    if total != data.ncols() {
        return Err(StochasticError::Malformed(format!(
            "layout has {total} columns, data has {}",
            data.ncols()
        )));
    }
    Ok(SnapshotSet { blocks, data })
}

impl SnapshotSet {
    /// CSV form: a `#`-prefixed JSON header line describing blocks and
    /// sensor coordinates, a column-name row, then one row per realization.
    /// Values use shortest round-trip formatting, so read-back is bit-exact.
    pub fn write_csv(&self, path: &Path) -> Result<(), StochasticError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header = serde_json::to_string(&file_header(self)).expect("header json");
        writeln!(f, "# {header}")?;
        let mut names = Vec::new();
        for b in &self.blocks {
            for i in 0..b.coords.nrows() {
                names.push(format!("{}_{i}", b.var.as_str()));
            }
        }
        writeln!(f, "{}", names.join(","))?;
        for row in self.data.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(f, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<SnapshotSet, StochasticError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let head = lines
            .next()
            .ok_or_else(|| StochasticError::Malformed("empty file".into()))??;
        let json = head
            .strip_prefix("# ")
            .ok_or_else(|| StochasticError::Malformed("missing header".into()))?;
        let header: SnapshotFileHeader = serde_json::from_str(json)
            .map_err(|e| StochasticError::Malformed(e.to_string()))?;
        let _names = lines
            .next()
            .ok_or_else(|| StochasticError::Malformed("missing column row".into()))??;
        let mut values = Vec::new();
        let mut rows = 0usize;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            for tok in line.split(',') {
                values.push(
                    tok.parse::<f64>()
                        .map_err(|e| StochasticError::Malformed(e.to_string()))?,
                );
            }
            rows += 1;
        }
        let cols = if rows > 0 { values.len() / rows } else { 0 };
        let data = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| StochasticError::Malformed(e.to_string()))?;
        set_from_header(header, data)
    }

    /// Companion binary format (magic `PGSN`, version, JSON header, rows of
    /// little-endian f64) for large sets.
    pub fn write_binary(&self, path: &Path) -> Result<(), StochasticError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(b"PGSN")?;
        f.write_all(&1u32.to_le_bytes())?;
        let header = serde_json::to_vec(&file_header(self)).expect("header json");
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        for v in self.data.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<SnapshotSet, StochasticError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != b"PGSN" {
            return Err(StochasticError::Malformed("bad magic".into()));
        }
        let mut u4 = [0u8; 4];
        f.read_exact(&mut u4)?;
        if u32::from_le_bytes(u4) != 1 {
            return Err(StochasticError::Malformed("unsupported version".into()));
        }
        let mut u8_ = [0u8; 8];
        f.read_exact(&mut u8_)?;
        let hlen = u64::from_le_bytes(u8_) as usize;
        let mut hbytes = vec![0u8; hlen];
        f.read_exact(&mut hbytes)?;
        let header: SnapshotFileHeader = serde_json::from_slice(&hbytes)
            .map_err(|e| StochasticError::Malformed(e.to_string()))?;
        let cols: usize = header
            .blocks
            .iter()
            .map(|b| b.coords.len() / b.coord_dim.max(1))
            .sum();
        let mut buf = vec![0u8; header.rows * cols * 8];
        f.read_exact(&mut buf)?;
        let values: Vec<f64> = buf
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let data = Array2::from_shape_vec((header.rows, cols), values)
            .map_err(|e| StochasticError::Malformed(e.to_string()))?;
        set_from_header(header, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_value_matches_formula() {
        let k = Kernel::squared_exponential(0.2);
        let v = k.eval(&[0.0], &[0.2]);
        assert!((v - (-0.5f64).exp()).abs() < 1e-12);
        assert!((v - 0.606531).abs() < 1e-6);
    }

    #[test]
    fn kernel_diagonal_is_variance() {
        let k = Kernel::squared_exponential_2d(0.25, 0.25);
        assert_eq!(k.eval(&[0.3, 0.7], &[0.3, 0.7]), 1.0);
    }

    #[test]
    fn single_point_gp_variance() {
        let k = Kernel::squared_exponential(0.2);
        let pts = Array2::from_shape_vec((1, 1), vec![0.3]).unwrap();
        let n = 100_000;
        let draws = sample_gp(&k, &pts, n, 11).unwrap();
        let mean = draws.sum() / n as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        // var of the sample variance ~ 2/n for a unit-variance normal
        let se = (2.0 / n as f64).sqrt();
        assert!((var - 1.0).abs() < 3.0 * se, "var {var}");
    }

    #[test]
    fn empirical_covariance_matches_gram() {
        let k = Kernel::squared_exponential(0.2);
        let pts = equidistant(30, -1.0, 1.0);
        let gram = k.gram(&pts);
        let n = 100_000;
        let draws = sample_gp(&k, &pts, n, 5).unwrap();
        let mut mean = vec![0.0; 30];
        for r in draws.rows() {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut worst: f64 = 0.0;
        for i in 0..30 {
            for j in 0..30 {
                let mut c = 0.0;
                for r in 0..n {
                    c += (draws[(r, i)] - mean[i]) * (draws[(r, j)] - mean[j]);
                }
                c /= (n - 1) as f64;
                // MC standard error of a covariance entry
                let se = ((1.0 + gram[(i, j)] * gram[(i, j)]) / n as f64).sqrt();
                worst = worst.max((c - gram[(i, j)]).abs() / se);
            }
        }
        assert!(worst < 5.0, "worst normalized deviation {worst}");
    }

    #[test]
    fn kl_two_point_eigenvalues_by_hand() {
        // Gram [[1, 0.5], [0.5, 1]] has eigenvalues 1.5 and 0.5; pick the
        // point separation so the kernel value is exactly 0.5.
        let kernel = Kernel::squared_exponential(0.2);
        let d = 0.2 * (2.0f64 * (2.0f64).ln()).sqrt();
        let grid = Array2::from_shape_vec((2, 1), vec![0.0, d]).unwrap();
        assert!((kernel.eval(&[0.0], &[d]) - 0.5).abs() < 1e-12);
        let kl = kl_expansion(&kernel, &grid, 2).unwrap();
        assert!((kl.eigenvalues[0] - 1.5).abs() < 1e-9, "{:?}", kl.eigenvalues);
        assert!((kl.eigenvalues[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn kl_eigenvalues_sum_to_trace() {
        let k = Kernel::squared_exponential(0.2);
        let grid = equidistant(25, -1.0, 1.0);
        let kl = kl_expansion(&k, &grid, 25).unwrap();
        let total: f64 = kl.eigenvalues.iter().sum();
        assert!((total - 25.0).abs() / 25.0 < 1e-8, "trace {total}");
        for w in kl.eigenvalues.windows(2) {
            assert!(w[0] >= w[1] - 1e-12, "ordering {:?}", w);
        }
    }

    #[test]
    fn kl_rejects_too_many_terms() {
        let k = Kernel::squared_exponential(0.2);
        let grid = equidistant(5, -1.0, 1.0);
        assert!(matches!(
            kl_expansion(&k, &grid, 6),
            Err(StochasticError::TooManyTerms { .. })
        ));
    }

    #[test]
    fn kl_full_basis_reproduces_gram() {
        let k = Kernel::squared_exponential(0.3);
        let grid = equidistant(12, -1.0, 1.0);
        let kl = kl_expansion(&k, &grid, 12).unwrap();
        let n = 60_000;
        let draws = kl.sample(n, 3);
        let gram = k.gram(&grid);
        let mut worst: f64 = 0.0;
        for i in 0..12 {
            for j in 0..12 {
                let mut c = 0.0;
                for r in 0..n {
                    c += draws[(r, i)] * draws[(r, j)];
                }
                c /= n as f64;
                let se = ((1.0 + gram[(i, j)] * gram[(i, j)]) / n as f64).sqrt();
                worst = worst.max((c - gram[(i, j)]).abs() / se);
            }
        }
        assert!(worst < 5.0, "worst normalized deviation {worst}");
    }

    #[test]
    fn exp_field_is_positive() {
        let k = Kernel::squared_exponential_2d(0.25, 0.25);
        let grid = grid_2d(8, 8, (0.0, 0.0), (1.0, 1.0));
        let kl = kl_expansion(&k, &grid, 30).unwrap();
        let f = kl.sample(50, 9);
        assert!(f.iter().all(|v| v.exp() > 0.0));
    }

    #[test]
    fn sine_task_values() {
        let sensors = equidistant(30, -1.0, 1.0);
        let tasks = sample_sine_tasks(200, &sensors, 1);
        for t in &tasks {
            assert!((1.0..=3.0).contains(&t.amplitude));
            assert!((2.0..=12.0).contains(&t.frequency));
            for (i, v) in t.values.iter().enumerate() {
                let x = sensors[(i, 0)];
                assert!((v - t.amplitude * (t.frequency * x).sin()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sine_direct_evaluations() {
        // A sin(w x) at x = 0 is 0; A = 2, w = 2 at pi/4 gives 2
        assert_eq!(1.0 * (10.0f64 * 0.0).sin(), 0.0);
        let v = 2.0 * (2.0 * std::f64::consts::FRAC_PI_4).sin();
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn amplitude_mean_matches_uniform() {
        let sensors = equidistant(2, -1.0, 1.0);
        let tasks = sample_sine_tasks(100_000, &sensors, 7);
        let mean: f64 = tasks.iter().map(|t| t.amplitude).sum::<f64>() / tasks.len() as f64;
        // U[1,3]: mean 2, var 1/3
        let se = (1.0 / 3.0 / tasks.len() as f64).sqrt();
        assert!((mean - 2.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn assembly_identity_with_zero_noise() {
        let coords = equidistant(3, 0.0, 1.0);
        let reals = Array2::from_shape_vec((2, 3), vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let set = assemble_snapshots(vec![(VarTag::U, coords, reals.clone())], &[0.0], 0).unwrap();
        assert_eq!(set.data, reals);
    }

    #[test]
    fn assembly_noise_std_matches() {
        let coords = equidistant(2, 0.0, 1.0);
        let n = 100_000;
        let reals = Array2::zeros((n, 2));
        let set = assemble_snapshots(vec![(VarTag::U, coords, reals)], &[0.1], 3).unwrap();
        let var = set.data.iter().map(|v| v * v).sum::<f64>() / (2 * n) as f64;
        let se = 0.01 * (2.0 / (2 * n) as f64).sqrt();
        assert!((var - 0.01).abs() < 3.0 * se, "noise var {var}");
    }

    #[test]
    fn assembly_rejects_mismatched_counts() {
        let c1 = equidistant(2, 0.0, 1.0);
        let c2 = equidistant(2, 0.0, 1.0);
        let r1 = Array2::zeros((3, 2));
        let r2 = Array2::zeros((4, 2));
        let err = assemble_snapshots(
            vec![(VarTag::U, c1, r1), (VarTag::F, c2, r2)],
            &[0.0, 0.0],
            0,
        );
        assert!(matches!(
            err,
            Err(StochasticError::MismatchedRealizations(_))
        ));
    }

    #[test]
    fn window_count_arithmetic() {
        // 10 s series at 100 Hz, 2.4 s window, 0.01 s stride -> 761 windows
        let series = synthetic_displacement_series(16, 0.01, 10.0);
        let set = sliding_windows(&series, 2.4, 0.01, 16).unwrap();
        assert_eq!(set.n_realizations(), 761);
        assert_eq!(set.n_columns(), 256);
    }

    #[test]
    fn window_selects_equidistant_reads() {
        let series = synthetic_displacement_series(16, 0.01, 5.0);
        let set = sliding_windows(&series, 2.4, 5.0, 16).unwrap();
        assert_eq!(set.n_realizations(), 1);
        // first selected read is the window start, local time 0
        assert_eq!(set.blocks[0].coords[(0, 1)], 0.0);
        // last selected read sits at the window end
        let last = set.blocks[0].coords[(255, 1)];
        assert!((last - 2.4).abs() < 1e-12);
    }

    #[test]
    fn degenerate_stride_gives_one_window() {
        let series = synthetic_displacement_series(4, 0.01, 3.0);
        let set = sliding_windows(&series, 2.4, 3.0, 4).unwrap();
        assert_eq!(set.n_realizations(), 1);
    }

    #[test]
    fn window_longer_than_series_errors() {
        let series = synthetic_displacement_series(4, 0.01, 1.0);
        let err = sliding_windows(&series, 2.4, 0.01, 4);
        assert!(matches!(err, Err(StochasticError::WindowTooLong { .. })));
    }

    #[test]
    fn snapshot_files_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let k = Kernel::squared_exponential(0.2);
        let pts = equidistant(7, -1.0, 1.0);
        let draws = sample_gp(&k, &pts, 13, 21).unwrap();
        let set = assemble_snapshots(vec![(VarTag::F, pts, draws)], &[0.05], 2).unwrap();

        let csv = dir.path().join("snap.csv");
        set.write_csv(&csv).unwrap();
        let back = SnapshotSet::read_csv(&csv).unwrap();
        assert_eq!(set.data, back.data);
        assert_eq!(set.blocks[0].coords, back.blocks[0].coords);

        let bin = dir.path().join("snap.bin");
        set.write_binary(&bin).unwrap();
        let back = SnapshotSet::read_binary(&bin).unwrap();
        assert_eq!(set.data, back.data);
        assert_eq!(back.blocks[0].var, VarTag::F);
        assert_eq!(back.blocks[0].noise_std, 0.05);
    }
}
