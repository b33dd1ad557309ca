//! Exact sampling of bifBm on a fixed grid by Cholesky factorization.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{covariance_unchecked, variogram_unchecked};
use crate::error::{Error, Result};
use crate::params::{HurstParams, MultiParams};
use crate::stats::{compensated_sum, MeanEstimate};

/// Jitter levels tried by [`factorize`], as multiples of the largest diagonal entry.
pub const JITTER_LEVELS: [f64; 8] = [0.0, 1e-14, 1e-13, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8];

/// Strictly increasing evaluation times starting at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::domain("a grid needs the origin and at least one positive time"));
        }
        if times[0] != 0.0 {
            return Err(Error::domain(format!("grid must start at 0, got {}", times[0])));
        }
        for w in times.windows(2) {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(Error::domain(format!("grid times must increase strictly: {} then {}", w[0], w[1])));
            }
        }
        Ok(Self { times })
    }

    /// `t_j = j t / n` for `j = 0..=n`.
    pub fn uniform(t: f64, n: usize) -> Result<Self> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::domain(format!("horizon {t} must be positive")));
        }
        if n == 0 {
            return Err(Error::domain("a uniform grid needs n >= 1"));
        }
        let times = (0..=n).map(|j| if j == n { t } else { j as f64 * t / n as f64 }).collect();
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Number of points, the origin included.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of increments.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn positive_times(&self) -> &[f64] {
        &self.times[1..]
    }

    /// Every `stride`-th point; the last point must be kept.
    pub fn subsample(&self, stride: usize) -> Result<Self> {
        if stride == 0 || self.steps() % stride != 0 {
            return Err(Error::domain(format!("stride {stride} does not divide {} steps", self.steps())));
        }
        Ok(Self { times: self.times.iter().step_by(stride).copied().collect() })
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::domain(format!("scale {c} must be positive")));
        }
        Self::new(self.times.iter().map(|t| c * t).collect())
    }
}

/// Dense symmetric matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = f(i, j);
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
        }
        Self { n, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn max_diagonal(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).fold(0.0, f64::max)
    }
}

/// Covariance matrix over the positive grid times; the origin row is dropped.
pub fn covariance_matrix(p: &HurstParams, grid: &TimeGrid) -> SymMatrix {
    let t = grid.positive_times();
    SymMatrix::from_fn(t.len(), |i, j| covariance_unchecked(p, t[i], t[j]))
}

/// Lower-triangular Cholesky factor in packed row storage.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    n: usize,
    packed: Vec<f64>,
    jitter: f64,
}

#[inline]
fn row_start(i: usize) -> usize {
    i * (i + 1) / 2
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let k = 4 * c;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut tail = 0.0;
    for k in 4 * chunks..n {
        tail += a[k] * b[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Absolute diagonal jitter that was needed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.packed[row_start(i)..row_start(i) + i + 1]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.packed[row_start(i) + j]
        }
    }

    /// `out = L z`.
    pub fn apply(&self, z: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate().take(self.n) {
            *o = dot(self.row(i), &z[..=i]);
        }
    }

    /// `max |L L^T - A|` relative to the largest diagonal entry of `A`.
    pub fn reconstruction_error(&self, a: &SymMatrix) -> f64 {
        let scale = a.max_diagonal().max(f64::MIN_POSITIVE);
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for j in 0..=i {
                let v = dot(self.row(i), self.row(j));
                worst = worst.max((v - a.get(i, j)).abs());
            }
        }
        worst / scale
    }
}

fn try_cholesky(a: &SymMatrix, jitter: f64) -> std::result::Result<Vec<f64>, usize> {
    let n = a.dim();
    let mut packed = vec![0.0; row_start(n)];
    for i in 0..n {
        let ri = row_start(i);
        for j in 0..i {
            let rj = row_start(j);
            let s = dot(&packed[ri..ri + j], &packed[rj..rj + j]);
            packed[ri + j] = (a.get(i, j) - s) / packed[rj + j];
        }
        let s = dot(&packed[ri..ri + i], &packed[ri..ri + i]);
        let d = a.get(i, i) + jitter - s;
        if !(d > 0.0) {
            return Err(i);
        }
        packed[ri + i] = d.sqrt();
    }
    Ok(packed)
}

/// Cholesky factorization with escalating diagonal jitter.
pub fn factorize(a: &SymMatrix) -> Result<CholeskyFactor> {
    let scale = a.max_diagonal();
    let mut last_pivot = 0;
    for level in JITTER_LEVELS {
        let jitter = level * scale;
        match try_cholesky(a, jitter) {
            Ok(packed) => return Ok(CholeskyFactor { n: a.dim(), packed, jitter }),
            Err(pivot) => last_pivot = pivot,
        }
    }
    Err(Error::NotPositiveSemidefinite { pivot: last_pivot, jitter: JITTER_LEVELS[JITTER_LEVELS.len() - 1] * scale })
}

/// Stream id of a (dimension, path) pair.
fn stream_id(dim: usize, path: usize) -> u64 {
    ((dim as u64) << 40) | path as u64
}

/// Reusable sampler holding one factor per dimension.
///
/// Paths are produced on demand, so Monte-Carlo loops need not materialize
/// the whole ensemble.
#[derive(Debug, Clone)]
pub struct PathSampler {
    params: MultiParams,
    grid: TimeGrid,
    factors: Vec<CholeskyFactor>,
    seed: u64,
}

impl PathSampler {
    pub fn new(mp: &MultiParams, grid: &TimeGrid, seed: u64) -> Result<Self> {
        let mut factors: Vec<CholeskyFactor> = Vec::with_capacity(mp.dims());
        for (i, p) in mp.params().iter().enumerate() {
            let reuse = mp.params()[..i].iter().position(|q| q == p);
            let factor = match reuse {
                Some(j) => factors[j].clone(),
                None => factorize(&covariance_matrix(p, grid))?,
            };
            factors.push(factor);
        }
        Ok(Self { params: mp.clone(), grid: grid.clone(), factors, seed })
    }

    pub fn params(&self) -> &MultiParams {
        &self.params
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn factor(&self, dim: usize) -> &CholeskyFactor {
        &self.factors[dim]
    }

    /// Values of path `path` in dimension `dim` on the full grid, origin included.
    pub fn fill_path(&self, dim: usize, path: usize, out: &mut [f64], noise: &mut Vec<f64>) {
        let n = self.grid.steps();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream_id(dim, path));
        noise.clear();
        noise.extend((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        out[0] = 0.0;
        self.factors[dim].apply(noise, &mut out[1..=n]);
    }

    /// All dimensions of one path.
    pub fn path(&self, path: usize) -> Vec<Vec<f64>> {
        let mut noise = Vec::new();
        (0..self.params.dims())
            .map(|d| {
                let mut v = vec![0.0; self.grid.len()];
                self.fill_path(d, path, &mut v, &mut noise);
                v
            })
            .collect()
    }

    /// Evaluate `f` on paths `0..n_paths` in parallel; results keep path order.
    pub fn map_paths<T, F>(&self, n_paths: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize, &[Vec<f64>]) -> T + Sync,
    {
        (0..n_paths)
            .into_par_iter()
            .map_init(
                || (vec![vec![0.0; self.grid.len()]; self.params.dims()], Vec::new()),
                |(buf, noise), path| {
                    for (d, b) in buf.iter_mut().enumerate() {
                        self.fill_path(d, path, b, noise);
                    }
                    f(path, buf)
                },
            )
            .collect()
    }
}

/// Anything that can hand out paths of a `d`-dimensional bifBm on a grid.
///
/// `f` receives the path index and one slice per dimension, origin included.
pub trait PathSource: Sync {
    fn params(&self) -> &MultiParams;
    fn grid(&self) -> &TimeGrid;
    fn n_paths(&self) -> usize;
    fn map_paths<T, F>(&self, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize, &[&[f64]]) -> T + Sync;
}

/// Paths generated on demand from a sampler; nothing is stored.
#[derive(Debug, Clone)]
pub struct StreamedEnsemble {
    sampler: PathSampler,
    n_paths: usize,
}

impl StreamedEnsemble {
    pub fn new(mp: &MultiParams, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<Self> {
        if n_paths == 0 {
            return Err(Error::domain("n_paths must be at least 1"));
        }
        Ok(Self { sampler: PathSampler::new(mp, grid, seed)?, n_paths })
    }

    pub fn sampler(&self) -> &PathSampler {
        &self.sampler
    }
}

impl PathSource for StreamedEnsemble {
    fn params(&self) -> &MultiParams {
        &self.sampler.params
    }

    fn grid(&self) -> &TimeGrid {
        &self.sampler.grid
    }

    fn n_paths(&self) -> usize {
        self.n_paths
    }

    fn map_paths<T, F>(&self, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize, &[&[f64]]) -> T + Sync,
    {
        self.sampler.map_paths(self.n_paths, |i, paths| {
            let views: Vec<&[f64]> = paths.iter().map(Vec::as_slice).collect();
            f(i, &views)
        })
    }
}

impl PathSource for PathEnsemble {
    fn params(&self) -> &MultiParams {
        &self.params
    }

    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn n_paths(&self) -> usize {
        self.n_paths
    }

    fn map_paths<T, F>(&self, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize, &[&[f64]]) -> T + Sync,
    {
        (0..self.n_paths)
            .into_par_iter()
            .map(|p| {
                let views: Vec<&[f64]> = (0..self.dims()).map(|d| self.path(d, p)).collect();
                f(p, &views)
            })
            .collect()
    }
}

/// Sampled values indexed by (dimension, path, time).
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    params: MultiParams,
    grid: TimeGrid,
    seed: u64,
    n_paths: usize,
    values: Vec<f64>,
}

/// Metadata written next to dumped ensembles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSidecar {
    pub params: MultiParams,
    pub seed: u64,
    pub n_paths: usize,
    pub times: Vec<f64>,
    pub files: Vec<String>,
}

/// Exact samples of a `d`-dimensional bifBm with independent components.
pub fn sample_paths(mp: &MultiParams, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(Error::domain("n_paths must be at least 1"));
    }
    let sampler = PathSampler::new(mp, grid, seed)?;
    Ok(PathEnsemble::from_sampler(&sampler, n_paths))
}

impl PathEnsemble {
    pub fn from_sampler(sampler: &PathSampler, n_paths: usize) -> Self {
        let d = sampler.params.dims();
        let m = sampler.grid.len();
        let mut values = vec![0.0; d * n_paths * m];
        for dim in 0..d {
            values[dim * n_paths * m..(dim + 1) * n_paths * m]
                .par_chunks_mut(m)
                .enumerate()
                .for_each_init(Vec::new, |noise, (path, row)| sampler.fill_path(dim, path, row, noise));
        }
        Self { params: sampler.params.clone(), grid: sampler.grid.clone(), seed: sampler.seed, n_paths, values }
    }

    pub fn params(&self) -> &MultiParams {
        &self.params
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dims(&self) -> usize {
        self.params.dims()
    }

    pub fn path(&self, dim: usize, path: usize) -> &[f64] {
        let m = self.grid.len();
        let start = (dim * self.n_paths + path) * m;
        &self.values[start..start + m]
    }

    /// `B_{t_j}` across paths for one dimension.
    pub fn column(&self, dim: usize, j: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.path(dim, p)[j]).collect()
    }

    /// Same paths observed on every `stride`-th grid point.
    pub fn subsample(&self, stride: usize) -> Result<Self> {
        let grid = self.grid.subsample(stride)?;
        let mut values = Vec::with_capacity(self.dims() * self.n_paths * grid.len());
        for dim in 0..self.dims() {
            for p in 0..self.n_paths {
                values.extend(self.path(dim, p).iter().step_by(stride));
            }
        }
        Ok(Self { params: self.params.clone(), grid, seed: self.seed, n_paths: self.n_paths, values })
    }

    /// Writes `<stem>_dim<i>.csv` per dimension and `<stem>.json`.
    pub fn write_csv(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut names = Vec::new();
        for dim in 0..self.dims() {
            let name = format!("{stem}_dim{dim}.csv");
            let path = dir.join(&name);
            let mut w = BufWriter::new(fs::File::create(&path)?);
            write!(w, "path")?;
            for j in 0..self.grid.len() {
                write!(w, ",t{j}")?;
            }
            writeln!(w)?;
            for p in 0..self.n_paths {
                write!(w, "{p}")?;
                for v in self.path(dim, p) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
            w.flush()?;
            written.push(path);
            names.push(name);
        }
        let sidecar = EnsembleSidecar {
            params: self.params.clone(),
            seed: self.seed,
            n_paths: self.n_paths,
            times: self.grid.times().to_vec(),
            files: names,
        };
        let json_path = dir.join(format!("{stem}.json"));
        fs::write(&json_path, serde_json::to_string_pretty(&sidecar)?)?;
        written.push(json_path);
        Ok(written)
    }
}

/// Outcome of [`self_similarity_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfSimilarityReport {
    pub c: f64,
    /// `c^{2HK}`.
    pub expected_ratio: f64,
    /// `Var B_{c t_j} / Var B_{t_j}` from the samples.
    pub variance_ratios: Vec<f64>,
    /// Largest `|mean(B_{ct}^2 - c^{2HK} B_t^2)|` in standard errors, same noise for both grids.
    pub max_paired_discrepancy: f64,
    /// Largest `|mean(B_{ct}^2) - (ct)^{2HK}|` in standard errors.
    pub max_standardized_discrepancy: f64,
}

/// Compares second moments on the grids `{c t_j}` and `{t_j}`.
///
/// Both ensembles are drawn from the same seed, so the paired column reports
/// how closely the sampler reproduces the scaling path by path.
pub fn self_similarity_check(
    p: &HurstParams,
    c: f64,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<SelfSimilarityReport> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::domain(format!("scale c = {c} must be positive")));
    }
    if n_paths < 2 {
        return Err(Error::domain("self-similarity check needs at least 2 paths"));
    }
    let mp = MultiParams::from(*p);
    let base = sample_paths(&mp, grid, n_paths, seed)?;
    let scaled_grid = grid.scaled(c)?;
    let scaled = sample_paths(&mp, &scaled_grid, n_paths, seed)?;
    let expected_ratio = c.powf(p.two_hk());
    let mut ratios = Vec::new();
    let mut paired = 0.0f64;
    let mut standardized = 0.0f64;
    for j in 1..grid.len() {
        let b = base.column(0, j);
        let s = scaled.column(0, j);
        let sq_b: Vec<f64> = b.iter().map(|x| x * x).collect();
        let sq_s: Vec<f64> = s.iter().map(|x| x * x).collect();
        let mb = compensated_sum(sq_b.iter().copied()) / n_paths as f64;
        let ms = compensated_sum(sq_s.iter().copied()) / n_paths as f64;
        ratios.push(ms / mb);
        let diffs: Vec<f64> = sq_s.iter().zip(&sq_b).map(|(s, b)| s - expected_ratio * b).collect();
        paired = paired.max(z_or_zero(&MeanEstimate::from_samples(&diffs), 0.0));
        let target = (c * grid.times()[j]).powf(p.two_hk());
        standardized = standardized.max(z_or_zero(&MeanEstimate::from_samples(&sq_s), target));
    }
    Ok(SelfSimilarityReport {
        c,
        expected_ratio,
        variance_ratios: ratios,
        max_paired_discrepancy: paired,
        max_standardized_discrepancy: standardized,
    })
}

fn z_or_zero(est: &MeanEstimate, target: f64) -> f64 {
    if est.mean == target {
        0.0
    } else {
        est.z_score(target)
    }
}

/// `Var(B_{t+delta} - B_t)` from the closed form, for non-stationarity studies.
pub fn increment_variance(p: &HurstParams, t: f64, delta: f64) -> Result<f64> {
    if !(t >= 0.0 && delta >= 0.0) {
        return Err(Error::domain("times must be nonnegative"));
    }
    Ok(variogram_unchecked(p, t + delta, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(h: f64, k: f64) -> HurstParams {
        HurstParams::new(h, k).unwrap()
    }

    #[test]
    fn grid_construction() {
        let g = TimeGrid::uniform(2.0, 4).unwrap();
        assert_eq!(g.times(), &[0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(g.steps(), 4);
        assert!(TimeGrid::new(vec![0.1, 1.0]).is_err());
        assert!(TimeGrid::new(vec![0.0, 1.0, 1.0]).is_err());
        assert_eq!(g.subsample(2).unwrap().times(), &[0.0, 1.0, 2.0]);
        assert!(g.subsample(3).is_err());
    }

    #[test]
    fn brownian_matrix() {
        let g = TimeGrid::new(vec![0.0, 1.0, 2.0]).unwrap();
        let m = covariance_matrix(&HurstParams::brownian(), &g);
        for (i, j, v) in [(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 2.0)] {
            assert!((m.get(i, j) - v).abs() < 1e-15);
        }
        let b = covariance_matrix(&hp(0.6, 0.8), &g);
        assert!((b.get(0, 1) - 0.917_458_932_131_201_5).abs() < 1e-14);
        assert!((b.get(1, 1) - 2f64.powf(0.96)).abs() < 1e-14);
    }

    #[test]
    fn identity_factor() {
        let f = factorize(&SymMatrix::identity(5)).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(f.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(f.jitter(), 0.0);
    }

    #[test]
    fn brownian_reconstruction() {
        let g = TimeGrid::uniform(1.0, 64).unwrap();
        let a = covariance_matrix(&HurstParams::brownian(), &g);
        let f = factorize(&a).unwrap();
        assert!(f.reconstruction_error(&a) < 1e-12);
    }

    #[test]
    fn critical_256_grid() {
        let g = TimeGrid::uniform(1.0, 256).unwrap();
        let a = covariance_matrix(&hp(0.8, 0.625), &g);
        let f = factorize(&a).unwrap();
        assert!(f.jitter() <= 1e-10 * a.max_diagonal());
        assert!(f.reconstruction_error(&a) < 1e-10);
    }

    #[test]
    fn indefinite_matrix_reports_pivot() {
        let a = SymMatrix::from_fn(3, |i, j| match (i, j) {
            (0, 0) => 1.0,
            (1, 1) => 1.0,
            (2, 2) => -1.0,
            _ => 0.0,
        });
        match factorize(&a) {
            Err(Error::NotPositiveSemidefinite { pivot, .. }) => assert_eq!(pivot, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn paths_start_at_zero_and_replay() {
        let mp = MultiParams::from_vectors(&[0.6, 0.7], &[0.9, 0.8]).unwrap();
        let g = TimeGrid::uniform(1.0, 8).unwrap();
        let a = sample_paths(&mp, &g, 10, 42).unwrap();
        let b = sample_paths(&mp, &g, 10, 42).unwrap();
        let c = sample_paths(&mp, &g, 10, 43).unwrap();
        for d in 0..2 {
            for p in 0..10 {
                assert_eq!(a.path(d, p)[0], 0.0);
                assert_eq!(a.path(d, p), b.path(d, p));
                assert_ne!(a.path(d, p), c.path(d, p));
            }
        }
        assert_ne!(a.path(0, 3), a.path(1, 3));
    }

    #[test]
    fn sampler_streams_match_ensemble() {
        let mp = MultiParams::from(hp(0.7, 0.9));
        let g = TimeGrid::uniform(1.0, 16).unwrap();
        let sampler = PathSampler::new(&mp, &g, 9).unwrap();
        let ens = PathEnsemble::from_sampler(&sampler, 5);
        let via_map = sampler.map_paths(5, |_, paths| paths[0].clone());
        for (p, v) in via_map.iter().enumerate() {
            assert_eq!(ens.path(0, p), v.as_slice());
        }
    }

    #[test]
    fn brownian_increments_have_grid_variance() {
        let mp = MultiParams::from(HurstParams::brownian());
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        let ens = sample_paths(&mp, &g, 20_000, 5).unwrap();
        for j in 1..=4 {
            let inc: Vec<f64> = (0..ens.n_paths()).map(|p| ens.path(0, p)[j] - ens.path(0, p)[j - 1]).collect();
            let sq: Vec<f64> = inc.iter().map(|x| x * x).collect();
            let est = MeanEstimate::from_samples(&sq);
            assert!(est.z_score(0.25) < 4.0, "j={j}: {est:?}");
        }
    }

    #[test]
    fn streamed_and_stored_agree() {
        let mp = MultiParams::from_vectors(&[0.6, 0.8], &[0.9, 0.7]).unwrap();
        let g = TimeGrid::uniform(1.0, 8).unwrap();
        let stored = sample_paths(&mp, &g, 6, 21).unwrap();
        let streamed = StreamedEnsemble::new(&mp, &g, 6, 21).unwrap();
        let a = PathSource::map_paths(&stored, |_, v| v[1].to_vec());
        let b = streamed.map_paths(|_, v| v[1].to_vec());
        assert_eq!(a, b);
    }

    #[test]
    fn subsample_keeps_values() {
        let mp = MultiParams::from(hp(0.6, 0.9));
        let g = TimeGrid::uniform(1.0, 8).unwrap();
        let ens = sample_paths(&mp, &g, 3, 1).unwrap();
        let sub = ens.subsample(4).unwrap();
        assert_eq!(sub.grid().times(), &[0.0, 0.5, 1.0]);
        assert_eq!(sub.path(0, 2), &[0.0, ens.path(0, 2)[4], ens.path(0, 2)[8]]);
    }

    #[test]
    fn csv_dump_round_trips() {
        let mp = MultiParams::from(hp(0.6, 0.9));
        let g = TimeGrid::uniform(1.0, 3).unwrap();
        let ens = sample_paths(&mp, &g, 2, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = ens.write_csv(dir.path(), "ens").unwrap();
        assert_eq!(files.len(), 2);
        let csv = fs::read_to_string(&files[0]).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "path,t0,t1,t2,t3");
        let row: Vec<f64> = lines.next().unwrap().split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        assert_eq!(row.as_slice(), ens.path(0, 0));
        let side: EnsembleSidecar = serde_json::from_str(&fs::read_to_string(&files[1]).unwrap()).unwrap();
        assert_eq!(side.seed, 11);
        assert_eq!(side.times, g.times());
    }

    #[test]
    fn self_similarity_unit_scale() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        let r = self_similarity_check(&hp(0.6, 0.8), 1.0, &g, 200, 3).unwrap();
        assert_eq!(r.max_paired_discrepancy, 0.0);
        assert!(r.variance_ratios.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn self_similarity_scaled() {
        let p = hp(0.6, 0.8);
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        let r = self_similarity_check(&p, 4.0, &g, 4000, 3).unwrap();
        assert!((r.expected_ratio - 4f64.powf(0.96)).abs() < 1e-12);
        for v in &r.variance_ratios {
            assert!((v / r.expected_ratio - 1.0).abs() < 1e-10);
        }
        assert!(r.max_standardized_discrepancy < 4.0);
        let bm = self_similarity_check(&HurstParams::brownian(), 2.5, &g, 100, 1).unwrap();
        assert!((bm.expected_ratio - 2.5).abs() < 1e-15);
    }

    #[test]
    fn increments_not_stationary_for_k_below_one() {
        let bif = hp(0.6, 0.8);
        let a = increment_variance(&bif, 0.1, 0.1).unwrap();
        let b = increment_variance(&bif, 2.0, 0.1).unwrap();
        assert!((a - b).abs() > 1e-3);
        let fbm = hp(0.6, 1.0);
        let a = increment_variance(&fbm, 0.1, 0.1).unwrap();
        let b = increment_variance(&fbm, 2.0, 0.1).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
