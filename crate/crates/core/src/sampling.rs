//! Operating-region sampling: truncated multivariate normal fits, Sobol
//! marginals with Iman–Conover rank reordering, and measurement-noise pools.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::column::{ColumnParams, FeedConditions, NoiseClass, NoiseSpec, MIN_HOLDUP};
use crate::error::SamplingError;
use crate::sobol::sobol_points;

/// Truncation half-width in standard deviations.
pub const TRUNCATION: f64 = 3.0;
const RIDGE: f64 = 1e-10;
const MAX_RESAMPLES: usize = 100;

/// Seeded generator for an independent stream of `seed`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Inverse CDF of `N(0, σ²)` truncated to `[−bound, bound]`, at probability `p`.
pub fn truncated_normal_quantile(p: f64, sigma: f64, bound: f64) -> f64 {
    if sigma <= 0.0 || bound <= 0.0 {
        return 0.0;
    }
    let n = std_normal();
    let lo = n.cdf(-bound / sigma);
    let hi = n.cdf(bound / sigma);
    let q = lo + p * (hi - lo);
    (sigma * n.inverse_cdf(q)).clamp(-bound, bound)
}

/// One pseudo-random draw per measurement slot.
pub fn draw_noise<R: Rng>(spec: &NoiseSpec, n_stages: usize, rng: &mut R) -> Vec<f64> {
    spec.classes(n_stages)
        .iter()
        .map(|c| truncated_normal_quantile(rng.gen::<f64>(), c.sigma, c.bound))
        .collect()
}

/// Every slot at `±bound` with independent fair-coin signs.
pub fn extreme_noise<R: Rng>(spec: &NoiseSpec, n_stages: usize, rng: &mut R) -> Vec<f64> {
    spec.classes(n_stages).iter().map(|c| if rng.gen::<bool>() { c.bound } else { -c.bound }).collect()
}

/// A normal distribution truncated per coordinate at `mean ± 3σ`.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedMvn {
    pub mean: DVector<f64>,
    /// Sample covariance, ridge-regularised if it was not positive definite.
    pub cov: DMatrix<f64>,
    /// Marginal standard deviations of the unregularised covariance.
    pub std: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl TruncatedMvn {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Correlation matrix; degenerate coordinates are uncorrelated with everything.
    pub fn correlation(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                1.0
            } else if self.std[i] > 0.0 && self.std[j] > 0.0 {
                (self.cov[(i, j)] / (self.std[i] * self.std[j])).clamp(-1.0, 1.0)
            } else {
                0.0
            }
        })
    }

    /// Marginal quantile of coordinate `j` at probability `p`.
    pub fn marginal_quantile(&self, j: usize, p: f64) -> f64 {
        let s = self.std[j];
        self.mean[j] + truncated_normal_quantile(p, s, TRUNCATION * s)
    }
}

/// Fits mean and covariance to the rows of `data` (`n_obs × d`).
pub fn fit_truncated_mvn(data: &DMatrix<f64>) -> Result<TruncatedMvn, SamplingError> {
    let (n, d) = data.shape();
    if n <= d {
        return Err(SamplingError::InsufficientData { n_obs: n, dim: d });
    }
    let mean = DVector::from_fn(d, |j, _| data.column(j).sum() / n as f64);
    let centred = DMatrix::from_fn(n, d, |i, j| data[(i, j)] - mean[j]);
    let mut cov = centred.transpose() * &centred / (n - 1) as f64;
    cov = (&cov + cov.transpose()) * 0.5;
    let std = DVector::from_fn(d, |j, _| cov[(j, j)].max(0.0).sqrt());
    if cov.clone().cholesky().is_none() {
        for j in 0..d {
            cov[(j, j)] += RIDGE;
        }
    }
    let lower = DVector::from_fn(d, |j, _| mean[j] - TRUNCATION * std[j]);
    let upper = DVector::from_fn(d, |j, _| mean[j] + TRUNCATION * std[j]);
    Ok(TruncatedMvn { mean, cov, std, lower, upper })
}

/// Lower Cholesky factor of a positive semi-definite matrix. Columns with a
/// (numerically) zero pivot are left zero.
pub fn psd_cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>, SamplingError> {
    let d = a.nrows();
    let mut l = DMatrix::<f64>::zeros(d, d);
    let tol = 1e-12 * (0..d).fold(1.0f64, |m, i| m.max(a[(i, i)].abs()));
    for j in 0..d {
        let mut pivot = a[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if pivot < -tol {
            return Err(SamplingError::NotPsd { pivot: j, value: pivot });
        }
        if pivot <= tol {
            continue;
        }
        let ljj = pivot.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..d {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Zero-based ranks (ties broken by position).
pub fn ranks(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut r = vec![0; values.len()];
    for (rank, i) in idx.into_iter().enumerate() {
        r[i] = rank;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman rank correlation of two equally long samples.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ra: Vec<f64> = ranks(a).into_iter().map(|r| r as f64).collect();
    let rb: Vec<f64> = ranks(b).into_iter().map(|r| r as f64).collect();
    pearson(&ra, &rb)
}

/// Reorders each column of `samples` (`n × d`) so that the rank correlation
/// approaches `target`. Every output column is a permutation of its input column.
pub fn iman_conover(samples: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<DMatrix<f64>, SamplingError> {
    let (n, d) = samples.shape();
    if target.shape() != (d, d) {
        return Err(SamplingError::Shape(format!("target is {:?}, samples have {d} columns", target.shape())));
    }
    if n <= d {
        return Err(SamplingError::InsufficientData { n_obs: n, dim: d });
    }
    let p = psd_cholesky(target)?;
    let normal = std_normal();
    let scores: Vec<f64> = (1..=n).map(|i| normal.inverse_cdf(i as f64 / (n + 1) as f64)).collect();
    // Van der Waerden scores arranged in the input's own rank order.
    let mut r = DMatrix::<f64>::zeros(n, d);
    let columns: Vec<Vec<f64>> = (0..d).map(|j| samples.column(j).iter().copied().collect()).collect();
    for (j, col) in columns.iter().enumerate() {
        for (i, rank) in ranks(col).into_iter().enumerate() {
            r[(i, j)] = scores[rank];
        }
    }
    let e = DMatrix::from_fn(d, d, |a, b| {
        let ca: Vec<f64> = r.column(a).iter().copied().collect();
        let cb: Vec<f64> = r.column(b).iter().copied().collect();
        pearson(&ca, &cb)
    });
    let f = psd_cholesky(&e)?;
    let f_inv = f.clone().try_inverse().ok_or(SamplingError::NotPsd { pivot: 0, value: 0.0 })?;
    let t = &r * f_inv.transpose() * p.transpose();
    let mut out = DMatrix::<f64>::zeros(n, d);
    for (j, col) in columns.iter().enumerate() {
        let mut sorted = col.clone();
        sorted.sort_by(f64::total_cmp);
        let tj: Vec<f64> = t.column(j).iter().copied().collect();
        for (i, rank) in ranks(&tj).into_iter().enumerate() {
            out[(i, j)] = sorted[rank];
        }
    }
    Ok(out)
}

/// MPC closed-loop log on a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionData {
    pub time: Vec<f64>,
    /// One row of stage temperatures per time.
    pub temperatures: Vec<Vec<f64>>,
    pub holdups: Vec<Vec<f64>>,
    pub feed: Vec<FeedConditions<f64>>,
}

impl RegionData {
    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

/// Initial conditions with the feed conditions they are trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialConditionPool {
    /// Flat states `[M_1..M_N, x_1..x_N]`.
    pub states: Vec<Vec<f64>>,
    pub feeds: Vec<FeedConditions<f64>>,
    pub seed: u64,
    /// Digest of the region data the pool was drawn from.
    pub source: String,
}

impl InitialConditionPool {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisePool {
    pub samples: Vec<Vec<f64>>,
    pub seed: u64,
}

impl NoisePool {
    pub fn zeros(n: usize, width: usize) -> Self {
        Self { samples: vec![vec![0.0; width]; n], seed: 0 }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Random digital shift of Sobol coordinates (keeps their net structure).
fn digital_shift(points: &mut [Vec<f64>], rng: &mut ChaCha8Rng) {
    let d = points.first().map_or(0, Vec::len);
    let shifts: Vec<u32> = (0..d).map(|_| rng.gen()).collect();
    let scale = (1u64 << 32) as f64;
    for row in points.iter_mut() {
        for (v, s) in row.iter_mut().zip(&shifts) {
            let bits = (*v * scale) as u64 as u32 ^ s;
            // Keep the point strictly inside (0, 1).
            *v = (bits as f64 + 0.5) / scale;
        }
    }
}

/// Draws `n` initial states from the region data: temperatures and holdups
/// each follow their own truncated normal fit, with Sobol marginals and
/// Iman–Conover correlation. Each state gets the feed logged at a uniformly
/// drawn region time.
pub fn build_initial_pool(
    region: &RegionData,
    n: usize,
    seed: u64,
    params: &ColumnParams<f64>,
    source: &str,
) -> Result<InitialConditionPool, SamplingError> {
    let stages = params.n_stages;
    if region.temperatures.iter().chain(&region.holdups).any(|r| r.len() != stages) {
        return Err(SamplingError::Shape(format!("region rows must have {stages} entries")));
    }
    let temps = fit_truncated_mvn(&to_matrix(&region.temperatures))?;
    let holdups = fit_truncated_mvn(&to_matrix(&region.holdups))?;
    let mut rng = rng_for(seed, 0);
    let mut u = sobol_points(n, 2 * stages)?;
    digital_shift(&mut u, &mut rng);

    let marginals = |mvn: &TruncatedMvn, offset: usize| {
        DMatrix::from_fn(n, stages, |i, j| mvn.marginal_quantile(j, u[i][offset + j]))
    };
    let t = iman_conover(&marginals(&temps, 0), &temps.correlation())?;
    let m = iman_conover(&marginals(&holdups, stages), &holdups.correlation())?;

    let span = params.boiling_span();
    let mut states = Vec::with_capacity(n);
    let mut feeds = Vec::with_capacity(n);
    for i in 0..n {
        let mut z = vec![0.0; 2 * stages];
        for j in 0..stages {
            let mut hold = m[(i, j)];
            let mut attempts = 0;
            while hold <= MIN_HOLDUP {
                attempts += 1;
                if attempts > MAX_RESAMPLES {
                    return Err(SamplingError::Resample { coordinate: j, attempts });
                }
                hold = holdups.marginal_quantile(j, rng.gen());
            }
            z[j] = hold;
            let mut x = (params.t_boil_heavy - t[(i, j)]) / span;
            let mut attempts = 0;
            while !(0.0..=1.0).contains(&x) {
                attempts += 1;
                if attempts > MAX_RESAMPLES {
                    return Err(SamplingError::Resample { coordinate: stages + j, attempts });
                }
                x = (params.t_boil_heavy - temps.marginal_quantile(j, rng.gen())) / span;
            }
            z[stages + j] = x;
        }
        states.push(z);
        let row = rng.gen_range(0..region.len().max(1));
        feeds.push(region.feed.get(row).copied().unwrap_or_else(|| params.nominal_feed()));
    }
    Ok(InitialConditionPool { states, feeds, seed, source: source.to_string() })
}

/// `n` noise vectors from Sobol marginals mapped through each slot's truncated normal.
pub fn build_noise_pool(spec: &NoiseSpec, n_stages: usize, n: usize, seed: u64) -> Result<NoisePool, SamplingError> {
    let classes: Vec<NoiseClass> = spec.classes(n_stages);
    let mut u = sobol_points(n, classes.len())?;
    digital_shift(&mut u, &mut rng_for(seed, 1));
    let samples = u
        .iter()
        .map(|row| row.iter().zip(&classes).map(|(p, c)| truncated_normal_quantile(*p, c.sigma, c.bound)).collect())
        .collect();
    Ok(NoisePool { samples, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_mean_and_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let normal = std_normal();
        let rho: f64 = 0.9;
        let data = DMatrix::from_fn(n, 2, |_, _| 0.0);
        let mut data = data;
        for i in 0..n {
            let a = normal.inverse_cdf(rng.gen_range(1e-12..1.0));
            let b = normal.inverse_cdf(rng.gen_range(1e-12..1.0));
            data[(i, 0)] = 2.0 + a;
            data[(i, 1)] = -1.0 + 3.0 * (rho * a + (1.0 - rho * rho).sqrt() * b);
        }
        let fit = fit_truncated_mvn(&data).unwrap();
        let mean0 = data.column(0).sum() / n as f64;
        assert!((fit.mean[0] - mean0).abs() < 1e-12);
        assert!((fit.correlation()[(0, 1)] - rho).abs() < 0.05);
        assert!((fit.upper[0] - fit.mean[0] - 3.0 * fit.std[0]).abs() < 1e-12);
    }

    #[test]
    fn constant_column_samples_constant() {
        let data = DMatrix::from_fn(10, 2, |i, j| if j == 0 { 4.0 } else { i as f64 });
        let fit = fit_truncated_mvn(&data).unwrap();
        assert_eq!(fit.std[0], 0.0);
        assert!(fit.cov.clone().cholesky().is_some());
        assert_eq!(fit.marginal_quantile(0, 0.3), 4.0);
        assert!(matches!(
            fit_truncated_mvn(&DMatrix::zeros(2, 2)),
            Err(SamplingError::InsufficientData { .. })
        ));
    }

    #[test]
    fn psd_cholesky_handles_singular_targets() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = psd_cholesky(&a).unwrap();
        assert!((&l * l.transpose() - &a).abs().max() < 1e-14);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(psd_cholesky(&bad), Err(SamplingError::NotPsd { .. })));
    }

    fn sobol_matrix(n: usize, d: usize) -> DMatrix<f64> {
        let p = sobol_points(n, d).unwrap();
        DMatrix::from_fn(n, d, |i, j| p[i][j])
    }

    #[test]
    fn iman_conover_identity_and_perfect_dependence() {
        let x = sobol_matrix(1000, 2);
        let ident = iman_conover(&x, &DMatrix::identity(2, 2)).unwrap();
        let c0: Vec<f64> = ident.column(0).iter().copied().collect();
        let c1: Vec<f64> = ident.column(1).iter().copied().collect();
        assert!(spearman(&c0, &c1).abs() < 0.1);

        let ones = DMatrix::from_element(2, 2, 1.0);
        let y = iman_conover(&x, &ones).unwrap();
        let r0 = ranks(&y.column(0).iter().copied().collect::<Vec<_>>());
        let r1 = ranks(&y.column(1).iter().copied().collect::<Vec<_>>());
        assert_eq!(r0, r1);
        for j in 0..2 {
            let mut a: Vec<f64> = x.column(j).iter().copied().collect();
            let mut b: Vec<f64> = y.column(j).iter().copied().collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn quantile_mapping_stays_in_bounds() {
        assert_eq!(truncated_normal_quantile(0.5, 0.2325, 0.775), 0.0);
        assert!(truncated_normal_quantile(1.0, 0.03, 0.1) <= 0.1);
        assert!(truncated_normal_quantile(0.0, 0.03, 0.1) >= -0.1);
    }

    #[test]
    fn noise_pool_statistics() {
        let spec = NoiseSpec::default();
        let pool = build_noise_pool(&spec, 25, 1000, 3).unwrap();
        assert_eq!(pool.len(), 1000);
        spec.check(&pool.samples[17], 25).unwrap();
        assert!(pool.samples.iter().all(|s| spec.check(s, 25).is_ok()));
        for j in [0, 12, 24, 26] {
            let col: Vec<f64> = pool.samples.iter().map(|s| s[j]).collect();
            let m = col.iter().sum::<f64>() / 1000.0;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 999.0).sqrt();
            assert!((sd - 0.2325).abs() < 0.15 * 0.2325, "slot {j}: {sd}");
        }
        assert_eq!(pool, build_noise_pool(&spec, 25, 1000, 3).unwrap());
        assert_ne!(pool, build_noise_pool(&spec, 25, 1000, 4).unwrap());
    }
}
