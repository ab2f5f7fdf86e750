//! Point sensors, synthetic data and the persisted data record.

use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interior grid of 9 x 8 sensors at `(i / 10, j / 9)` with the one nearest
/// the domain centre removed. Among equidistant candidates the first one in
/// enumeration order is removed.
pub fn default_sensor_layout() -> Vec<[f64; 2]> {
    let mut pts = Vec::with_capacity(72);
    for i in 1..=9 {
        for j in 1..=8 {
            pts.push([i as f64 / 10.0, j as f64 / 9.0]);
        }
    }
    let dist = |p: &[f64; 2]| ((p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2)).sqrt();
    let mut drop = 0;
    for (k, p) in pts.iter().enumerate() {
        if dist(p) < dist(&pts[drop]) - 1e-12 {
            drop = k;
        }
    }
    pts.remove(drop);
    pts
}

/// Bilinear interpolation of nodal values at fixed points.
#[derive(Debug, Clone)]
pub struct PointObservation {
    stencils: Vec<[(usize, f64); 4]>,
    num_nodes: usize,
}

impl PointObservation {
    pub fn new(cells: usize, points: &[[f64; 2]]) -> Result<Self> {
        let side = cells + 1;
        let mut stencils = Vec::with_capacity(points.len());
        for p in points {
            if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                return Err(Error::Usage(format!("sensor {p:?} lies outside the unit square")));
            }
            let locate = |x: f64| {
                let s = x * cells as f64;
                let i = (s.floor() as usize).min(cells - 1);
                (i, s - i as f64)
            };
            let (i, s) = locate(p[0]);
            let (j, t) = locate(p[1]);
            let n0 = i + side * j;
            stencils.push([
                (n0, (1.0 - s) * (1.0 - t)),
                (n0 + 1, s * (1.0 - t)),
                (n0 + 1 + side, s * t),
                (n0 + side, (1.0 - s) * t),
            ]);
        }
        Ok(PointObservation {
            stencils,
            num_nodes: side * side,
        })
    }

    pub fn len(&self) -> usize {
        self.stencils.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stencils.is_empty()
    }

    pub fn apply(&self, nodal: &[f64]) -> Vec<f64> {
        self.stencils
            .iter()
            .map(|st| st.iter().map(|&(n, w)| w * nodal[n]).sum())
            .collect()
    }

    pub fn apply_transpose(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_nodes];
        for (st, wk) in self.stencils.iter().zip(w) {
            for &(n, c) in st {
                out[n] += c * wk;
            }
        }
        out
    }
}

/// Observed data and the provenance needed to regenerate it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DataRecord {
    pub level: usize,
    pub sensors: Vec<[f64; 2]>,
    pub sigma: f64,
    pub y: Vec<f64>,
    pub truth_seed: u64,
    pub noise_seed: u64,
    pub snr_convention: String,
}

impl DataRecord {
    /// Noise level and noisy data for clean observations `clean`.
    pub fn synthesize(
        level: usize,
        sensors: Vec<[f64; 2]>,
        clean: &[f64],
        snr: f64,
        truth_seed: u64,
        noise_seed: u64,
    ) -> Result<Self> {
        if !(snr > 0.0 && snr.is_finite()) {
            return Err(Error::Config(vec![format!("data.snr must be positive, got {snr}")]));
        }
        let peak = clean.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let sigma = peak / snr;
        if !(sigma > 0.0) {
            return Err(Error::Numerical("clean observations are identically zero".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let y = clean
            .iter()
            .map(|f| f + sigma * crate::rng::std_normal(&mut rng))
            .collect();
        Ok(DataRecord {
            level,
            sensors,
            sigma,
            y,
            truth_seed,
            noise_seed,
            snr_convention: "max_abs".into(),
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rec: DataRecord = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if rec.y.len() != rec.sensors.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("{} sensors but {} data values", rec.sensors.len(), rec.y.len()),
            });
        }
        Ok(rec)
    }
}

/// Whitened truth coefficients drawn from the prior.
pub fn draw_truth(dim: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    crate::rng::normal_vector(dim, &mut rng)
}

/// Little-endian f64 values with no header.
pub fn write_f64_file(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f64_file(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "length is not a multiple of 8".into(),
        });
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_has_71_interior_sensors() {
        let s = default_sensor_layout();
        assert_eq!(s.len(), 71);
        assert!(s.iter().all(|p| p[0] > 0.0 && p[0] < 1.0 && p[1] > 0.0 && p[1] < 1.0));
        let centre_gap = s
            .iter()
            .map(|p| ((p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        assert!((centre_gap - 0.5 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn interpolation_reproduces_bilinear_functions() {
        let cells = 5;
        let side = cells + 1;
        let f = |x: f64, y: f64| 1.0 + 2.0 * x - 3.0 * y + 0.5 * x * y;
        let nodal: Vec<f64> = (0..side * side)
            .map(|n| f((n % side) as f64 / 5.0, (n / side) as f64 / 5.0))
            .collect();
        let pts = vec![[0.13, 0.77], [1.0, 1.0], [0.0, 0.5], [0.4, 0.4]];
        let obs = PointObservation::new(cells, &pts).unwrap();
        for (v, p) in obs.apply(&nodal).iter().zip(&pts) {
            assert!((v - f(p[0], p[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        let obs = PointObservation::new(4, &default_sensor_layout()).unwrap();
        let x: Vec<f64> = (0..25).map(|i| (i as f64).sin()).collect();
        let w: Vec<f64> = (0..71).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = obs.apply(&x).iter().zip(&w).map(|(a, b)| a * b).sum();
        let rhs: f64 = obs.apply_transpose(&w).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn noise_level_follows_peak_over_snr() {
        let clean = vec![0.2, -0.9, 0.5];
        let rec = DataRecord::synthesize(0, vec![[0.1, 0.1]; 3], &clean, 50.0, 1, 2).unwrap();
        assert!((rec.sigma - 0.9 / 50.0).abs() < 1e-15);
        let again = DataRecord::synthesize(0, vec![[0.1, 0.1]; 3], &clean, 50.0, 1, 2).unwrap();
        assert_eq!(rec, again);
    }
}
