//! Chain diagnostics: integrated autocorrelation times, effective sample
//! sizes, variance decompositions of level differences and cross-level
//! covariance ratios.

use nalgebra::DMatrix;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::Serialize;

use crate::error::{Error, Result};

pub const MIN_SERIES_LEN: usize = 100;
pub const MIN_BATCHES: usize = 20;

/// Windowing constant: the window is the smallest `W` with `W >= C tau(W)`.
const WINDOW_FACTOR: f64 = 5.0;

#[derive(Debug, Clone, Serialize)]
pub struct AutocorrResult {
    /// Never below one.
    pub tau: f64,
    pub window: usize,
    /// Normalised autocorrelations for lags `0..=window`.
    pub rho: Vec<f64>,
    /// Set when the series has zero variance.
    pub degenerate: bool,
}

impl AutocorrResult {
    pub fn ess(&self, n: usize) -> f64 {
        n as f64 / self.tau
    }
}

/// Normalised autocorrelation for all lags, via zero-padded FFT.
pub fn autocorrelation(series: &[f64]) -> Vec<f64> {
    let n = series.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = series
        .iter()
        .map(|x| Complex::new(x - mean, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    let c0 = buf[0].re;
    if !(c0 > 0.0) {
        return vec![0.0; n];
    }
    buf[..n].iter().map(|c| c.re / c0).collect()
}

/// Windowed IACT estimate `1 + 2 sum_{k<=W} rho(k)`.
pub fn iact(series: &[f64]) -> Result<AutocorrResult> {
    let n = series.len();
    if n < MIN_SERIES_LEN {
        return Err(Error::Usage(format!(
            "IACT needs at least {MIN_SERIES_LEN} values, got {n}"
        )));
    }
    let first = series[0];
    if series.iter().all(|x| *x == first) {
        return Ok(AutocorrResult {
            tau: 1.0,
            window: 0,
            rho: vec![1.0],
            degenerate: true,
        });
    }
    let rho = autocorrelation(series);
    let mut tau = 1.0;
    let mut window = n - 1;
    for (w, r) in rho.iter().enumerate().skip(1) {
        tau += 2.0 * r;
        if w as f64 >= WINDOW_FACTOR * tau {
            window = w;
            break;
        }
    }
    if window == n - 1 {
        log::warn!("IACT window reached the series length {n}; estimate is unreliable");
    }
    Ok(AutocorrResult {
        tau: tau.max(1.0),
        window,
        rho: rho[..=window].to_vec(),
        degenerate: false,
    })
}

pub fn ess(series: &[f64]) -> Result<f64> {
    Ok(iact(series)?.ess(series.len()))
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample covariance.
pub fn sample_covariance(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let (mx, my) = (mean(x), mean(y));
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1) as f64
}

pub fn sample_variance(x: &[f64]) -> f64 {
    sample_covariance(x, x)
}

/// Sample variance of `D = Q_fine - Q_coarse` with its decomposition.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DifferenceVariance {
    pub var_d: f64,
    pub var_fine: f64,
    pub var_coarse: f64,
    pub covariance: f64,
}

impl DifferenceVariance {
    /// `Var(Q_fine) + Var(Q_coarse) - 2 Cov`.
    pub fn recomposed(&self) -> f64 {
        self.var_fine + self.var_coarse - 2.0 * self.covariance
    }
    pub fn correlation(&self) -> f64 {
        self.covariance / (self.var_fine * self.var_coarse).sqrt()
    }
}

pub fn variance_of_difference(fine: &[f64], coarse: &[f64]) -> Result<DifferenceVariance> {
    if fine.len() != coarse.len() {
        return Err(Error::Dimension {
            context: "paired quantity traces",
            expected: fine.len(),
            got: coarse.len(),
        });
    }
    let d: Vec<f64> = fine.iter().zip(coarse).map(|(a, b)| a - b).collect();
    Ok(DifferenceVariance {
        var_d: sample_variance(&d),
        var_fine: sample_variance(fine),
        var_coarse: sample_variance(coarse),
        covariance: sample_covariance(fine, coarse),
    })
}

/// Means of `batches` contiguous equal-length segments; a remainder is
/// dropped from the front so the latest states are kept.
pub fn batch_means(series: &[f64], batches: usize) -> Result<Vec<f64>> {
    if batches == 0 || series.len() < batches {
        return Err(Error::Usage(format!(
            "cannot split {} values into {batches} batches",
            series.len()
        )));
    }
    let len = series.len() / batches;
    let skip = series.len() - len * batches;
    Ok(series[skip..].chunks(len).map(mean).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossLevelCovariance {
    pub covariance: Vec<Vec<f64>>,
    /// `|Cov(Y_l, Y_k)| / max(Var(Y_l), Var(Y_k))`.
    pub ratio: Vec<Vec<f64>>,
    pub max_ratio: f64,
}

impl CrossLevelCovariance {
    /// The multilevel variance bound applies only when this holds.
    pub fn bound_applies(&self) -> bool {
        self.max_ratio < 1.0
    }
}

/// Covariances between per-level batch-mean series of equal length.
pub fn cross_level_ratio(batched: &[Vec<f64>]) -> Result<CrossLevelCovariance> {
    let levels = batched.len();
    let nb = batched.first().map_or(0, Vec::len);
    if batched.iter().any(|b| b.len() != nb) {
        return Err(Error::Usage("batch series must have equal length".into()));
    }
    if nb < MIN_BATCHES {
        return Err(Error::Usage(format!(
            "cross-level covariance needs at least {MIN_BATCHES} batches, got {nb}"
        )));
    }
    let cov = DMatrix::from_fn(levels, levels, |i, j| sample_covariance(&batched[i], &batched[j]));
    let mut ratio = vec![vec![0.0; levels]; levels];
    let mut max_ratio: f64 = 0.0;
    for i in 0..levels {
        for j in 0..levels {
            let scale = cov[(i, i)].max(cov[(j, j)]);
            ratio[i][j] = if scale > 0.0 { cov[(i, j)].abs() / scale } else { 0.0 };
            if i != j {
                max_ratio = max_ratio.max(ratio[i][j]);
            }
        }
    }
    Ok(CrossLevelCovariance {
        covariance: (0..levels).map(|i| cov.row(i).iter().copied().collect()).collect(),
        ratio,
        max_ratio,
    })
}

/// Writes `lag,rho` rows followed by a summary comment row.
pub fn write_autocorr_csv(path: &std::path::Path, result: &AutocorrResult) -> Result<()> {
    use std::fmt::Write;
    let mut s = String::from("lag,rho\n");
    for (k, r) in result.rho.iter().enumerate() {
        let _ = writeln!(s, "{k},{r:.12e}");
    }
    let _ = writeln!(s, "# tau={:.6},window={},degenerate={}", result.tau, result.window, result.degenerate);
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn ar1(rho: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, 0);
        let s = (1.0 - rho * rho).sqrt();
        let mut x = rng::std_normal(&mut r);
        (0..n)
            .map(|_| {
                x = rho * x + s * rng::std_normal(&mut r);
                x
            })
            .collect()
    }

    #[test]
    fn autocorrelation_matches_direct_sum() {
        let x = ar1(0.5, 300, 1);
        let rho = autocorrelation(&x);
        let m = mean(&x);
        let c0: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
        for k in [0usize, 1, 7, 50] {
            let ck: f64 = (0..x.len() - k).map(|i| (x[i] - m) * (x[i + k] - m)).sum();
            assert!((rho[k] - ck / c0).abs() < 1e-12);
        }
    }

    #[test]
    fn iid_series_has_unit_iact() {
        let mut r = rng::stream(2, 0);
        let x: Vec<f64> = (0..100_000).map(|_| rng::std_normal(&mut r)).collect();
        let res = iact(&x).unwrap();
        assert!((res.tau - 1.0).abs() < 0.05, "{}", res.tau);
    }

    #[test]
    fn ar1_iact_within_ten_percent() {
        let x = ar1(0.9, 200_000, 3);
        let tau = iact(&x).unwrap().tau;
        assert!((tau - 19.0).abs() < 1.9, "{tau}");
    }

    #[test]
    fn short_and_constant_series() {
        assert!(iact(&[0.0; 99]).is_err());
        let res = iact(&[2.5; 150]).unwrap();
        assert!(res.degenerate);
        assert_eq!(res.tau, 1.0);
    }

    #[test]
    fn difference_variance_decomposes() {
        let a = ar1(0.3, 500, 4);
        let b: Vec<f64> = ar1(0.6, 500, 5).iter().zip(&a).map(|(x, y)| x + 0.5 * y).collect();
        let d = variance_of_difference(&a, &b).unwrap();
        assert!((d.var_d - d.recomposed()).abs() < 1e-12);
        let c = vec![1.0; 10];
        let e: Vec<f64> = c.iter().map(|x| x - 3.0).collect();
        assert_eq!(variance_of_difference(&c, &e).unwrap().var_d, 0.0);
    }

    #[test]
    fn independent_difference_variance_adds() {
        let n = 20_000;
        let a = ar1(0.0, n, 6);
        let b: Vec<f64> = ar1(0.0, n, 7).iter().map(|x| 2.0 * x).collect();
        let d = variance_of_difference(&a, &b).unwrap();
        // Var of a sample variance of N(0, 5) data is about 2 * 25 / n.
        assert!((d.var_d - 5.0).abs() < 5.0 * (50.0 / n as f64).sqrt());
    }

    #[test]
    fn cross_level_ratios() {
        let a = ar1(0.0, 40, 8);
        let dup = cross_level_ratio(&[a.clone(), a.clone()]).unwrap();
        assert!((dup.max_ratio - 1.0).abs() < 1e-12);
        assert!(cross_level_ratio(&[a[..19].to_vec()]).is_err());
        let b = ar1(0.0, 40, 9);
        let ind = cross_level_ratio(&[a, b]).unwrap();
        assert!(ind.max_ratio < 5.0 / (40f64).sqrt());
    }

    #[test]
    fn batch_means_keep_latest() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(batch_means(&x, 3).unwrap(), vec![2.0, 5.0, 8.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn iact_is_affine_invariant(a in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0], b in -10.0f64..10.0, seed in 0u64..1000) {
            let x = ar1(0.7, 400, seed);
            let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let (tx, ty) = (iact(&x).unwrap(), iact(&y).unwrap());
            prop_assert!((tx.tau - ty.tau).abs() < 1e-10);
            prop_assert!(tx.ess(x.len()) <= x.len() as f64);
        }
    }
}
