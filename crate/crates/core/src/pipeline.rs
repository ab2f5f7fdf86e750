//! End-to-end workflow behind the command-line tool: data synthesis,
//! subspace construction, sampling runs and cost summaries.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::diagnostics;
use crate::error::{Error, Result};
use crate::forward::fem::FemSpace;
use crate::forward::observation::{
    default_sensor_layout, draw_truth, read_f64_file, write_f64_file, DataRecord, PointObservation,
};
use crate::forward::EllipticModel;
use crate::hierarchy::LevelHierarchy;
use crate::laplace::{find_map, LaplaceApproximation, MapOptions};
use crate::linalg::lanczos::{LanczosOptions, SymmetricOperator};
use crate::lis::{build_base_lis, cost_model, enrich, AveragedGnh, CostInputs, CostReport, HierarchicalBasis, LisOptions};
use crate::mcmc::{BaseKernel, CoupledKernel};
use crate::model::LevelModel;
use crate::multilevel::{fit_power_law, run_multilevel, Mode, MultilevelProblem, MultilevelReport, MultilevelRun, RunSettings};
use crate::prior::{kl_decompose, KlBasis, KlOptions};
use crate::proposal::DiliOperatorSet;

/// File layout under the configured output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data.json")
    }

    pub fn truth(&self) -> PathBuf {
        self.root.join("truth.bin")
    }

    pub fn lis(&self) -> PathBuf {
        self.root.join("lis.bin")
    }

    pub fn lis_summary(&self) -> PathBuf {
        self.root.join("lis_summary.json")
    }

    pub fn kl_cache(&self, key: &str) -> PathBuf {
        self.root.join(format!("kl_{key}.bin"))
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn run_dir(&self, mode: Mode, eps: Option<f64>, seed: u64) -> PathBuf {
        let tag = match eps {
            Some(e) => format!("eps{e:e}"),
            None => "fixed".into(),
        };
        self.runs().join(format!("{}_{tag}_seed{seed}", mode.name()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn missing(path: PathBuf, hint: &str) -> Error {
    Error::MissingArtefact {
        path,
        hint: hint.into(),
    }
}

/// Discretisations of every level and the prior basis they share.
pub struct Experiment {
    pub config: RunConfig,
    pub hierarchy: LevelHierarchy,
    pub layout: Layout,
    spaces: Vec<Arc<FemSpace>>,
    modes: Vec<Arc<DMatrix<f64>>>,
    sensors: Vec<[f64; 2]>,
    observations: Vec<Arc<PointObservation>>,
}

impl Experiment {
    /// Computes the prior basis on the finest grid, reusing a cached copy
    /// keyed by the kernel and hierarchy when one exists.
    pub fn prepare(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let hierarchy = LevelHierarchy::new(&config.hierarchy)?;
        let layout = Layout::new(&config.output_dir);
        create_dir(&layout.root)?;
        let finest = *hierarchy.level(hierarchy.finest())?;
        let key = {
            let text = serde_json::to_string(&(&config.kernel, &config.hierarchy, config.lis.kl_block_size))?;
            sha256_hex(text.as_bytes())[..16].to_string()
        };
        let cache = layout.kl_cache(&key);
        let kl = match KlBasis::read_binary(&cache) {
            Ok((_, kl)) if kl.cells() == finest.cells_per_side && kl.num_modes() == finest.param_dim => kl,
            _ => {
                let t = Instant::now();
                let opts = KlOptions {
                    block_size: config.lis.kl_block_size,
                    ..KlOptions::default()
                };
                let kl = kl_decompose(finest.cells_per_side, &config.kernel, finest.param_dim, &opts)?;
                log::info!(
                    "prior basis: {} modes on {} cells per side in {:.1} s",
                    finest.param_dim,
                    finest.cells_per_side,
                    t.elapsed().as_secs_f64()
                );
                if let Err(e) = kl.write_binary(&cache, finest.level) {
                    log::warn!("could not cache prior basis: {e}");
                }
                kl
            }
        };
        let sensors = config.data.sensors.clone().unwrap_or_else(default_sensor_layout);
        let mut spaces = Vec::new();
        let mut modes = Vec::new();
        let mut observations = Vec::new();
        for spec in hierarchy.levels() {
            let level_kl = kl.restrict(spec.cells_per_side, spec.param_dim)?;
            spaces.push(Arc::new(FemSpace::new(spec.cells_per_side)?));
            modes.push(level_kl.scaled_modes().clone());
            observations.push(Arc::new(PointObservation::new(spec.cells_per_side, &sensors)?));
        }
        Ok(Experiment {
            config: config.clone(),
            hierarchy,
            layout,
            spaces,
            modes,
            sensors,
            observations,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.spaces.len()
    }

    pub fn sensors(&self) -> &[[f64; 2]] {
        &self.sensors
    }

    pub fn model(&self, level: usize, data: &DataRecord) -> Result<EllipticModel> {
        if level >= self.num_levels() {
            return Err(Error::Usage(format!("level {level} is beyond the hierarchy")));
        }
        EllipticModel::new(
            self.spaces[level].clone(),
            self.modes[level].clone(),
            self.observations[level].clone(),
            Arc::new(data.y.clone()),
            data.sigma,
        )
    }

    pub fn models(&self, data: &DataRecord, levels: std::ops::Range<usize>) -> Result<Vec<EllipticModel>> {
        levels.map(|l| self.model(l, data)).collect()
    }

    pub fn forward_dofs(&self, level: usize) -> f64 {
        self.spaces[level].num_dofs() as f64
    }

    pub fn read_data(&self) -> Result<DataRecord> {
        let path = self.layout.data();
        if !path.exists() {
            return Err(missing(path, "run generate-data first"));
        }
        let data = DataRecord::read_json(&path)?;
        if data.sensors.len() != self.sensors.len() {
            return Err(Error::Config(vec![format!(
                "data file has {} sensors but the configuration has {}",
                data.sensors.len(),
                self.sensors.len()
            )]));
        }
        Ok(data)
    }
}

/// Synthesises data from a prior draw on the data level and writes the data
/// record and the truth coefficients.
pub fn generate_data(config: &RunConfig, force: bool) -> Result<DataRecord> {
    config.validate()?;
    let layout = Layout::new(&config.output_dir);
    let targets = [layout.data(), layout.truth()];
    if !force {
        if let Some(p) = targets.iter().find(|p| p.exists()) {
            return Err(Error::Usage(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    let exp = Experiment::prepare(config)?;
    let level = config.data_level();
    let truth = draw_truth(exp.hierarchy.param_dim(level), config.data.truth_seed);
    let placeholder = DataRecord {
        level,
        sensors: exp.sensors.clone(),
        sigma: 1.0,
        y: vec![0.0; exp.sensors.len()],
        truth_seed: config.data.truth_seed,
        noise_seed: config.data.noise_seed,
        snr_convention: "max_abs".into(),
    };
    let (clean, _) = exp.model(level, &placeholder)?.observe(&truth)?;
    let data = DataRecord::synthesize(
        level,
        exp.sensors.clone(),
        &clean,
        config.data.snr,
        config.data.truth_seed,
        config.data.noise_seed,
    )?;
    data.write_json(&targets[0])?;
    write_f64_file(&targets[1], truth.as_slice())?;
    log::info!("data: {} observations, noise sigma {:.4e}", data.y.len(), data.sigma);
    Ok(data)
}

pub fn read_truth(layout: &Layout) -> Result<DVector<f64>> {
    Ok(DVector::from_vec(read_f64_file(&layout.truth())?))
}

/// Per-level products of the subspace construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LisLevel {
    pub map: DVector<f64>,
    pub laplace_values: Vec<f64>,
    pub laplace_vectors: DMatrix<f64>,
    /// Covariance of posterior coordinates in the level's cumulative basis.
    pub sigma_r: DMatrix<f64>,
    pub reference_samples: usize,
}

/// Hierarchical subspace with the data needed to build proposals.
///
/// Binary layout, little-endian: `u64` level count, `f64` threshold, then
/// per level `u64` values `(R, s, K, k)` for parameter dimension, added
/// directions, reference samples and Laplace rank. Each level's payload
/// follows in order: `s` eigenvalues, the `R x s` new directions in
/// column-major order, the `R` MAP coefficients, `k` Laplace eigenvalues,
/// the `R x k` Laplace vectors, and the `r x r` subspace covariance where
/// `r` is the cumulative rank.
#[derive(Debug, Clone, PartialEq)]
pub struct LisArtefact {
    pub threshold: f64,
    pub basis: HierarchicalBasis,
    pub levels: Vec<LisLevel>,
}

impl LisArtefact {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        let word = |v: usize, b: &mut Vec<u8>| b.extend_from_slice(&(v as u64).to_le_bytes());
        let n = self.basis.num_levels();
        word(n, &mut buf);
        buf.extend_from_slice(&self.threshold.to_le_bytes());
        for (l, lvl) in self.levels.iter().enumerate() {
            word(self.basis.param_dim(l), &mut buf);
            word(self.basis.block(l).rank(), &mut buf);
            word(lvl.reference_samples, &mut buf);
            word(lvl.laplace_values.len(), &mut buf);
        }
        let floats = |xs: &[f64], b: &mut Vec<u8>| {
            for x in xs {
                b.extend_from_slice(&x.to_le_bytes());
            }
        };
        for (l, lvl) in self.levels.iter().enumerate() {
            let block = self.basis.block(l);
            floats(&block.eigenvalues, &mut buf);
            let full = full_block(block);
            floats(full.as_slice(), &mut buf);
            floats(lvl.map.as_slice(), &mut buf);
            floats(&lvl.laplace_values, &mut buf);
            floats(lvl.laplace_vectors.as_slice(), &mut buf);
            floats(lvl.sigma_r.as_slice(), &mut buf);
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(missing(path.to_path_buf(), "run build-lis first"));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut pos = 0usize;
        let mut take = |count: usize| -> Result<&[u8]> {
            let end = pos + 8 * count;
            if end > bytes.len() {
                return Err(bad("truncated".into()));
            }
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        let as_u64 = |s: &[u8]| u64::from_le_bytes(s.try_into().unwrap()) as usize;
        let as_f64s = |s: &[u8]| -> Vec<f64> {
            s.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        };
        let n = as_u64(take(1)?);
        if n == 0 || n > 64 {
            return Err(bad(format!("implausible level count {n}")));
        }
        let threshold = as_f64s(take(1)?)[0];
        let mut headers = Vec::with_capacity(n);
        for _ in 0..n {
            let h = take(4)?;
            headers.push([as_u64(&h[..8]), as_u64(&h[8..16]), as_u64(&h[16..24]), as_u64(&h[24..])]);
        }
        let mut basis = HierarchicalBasis::new();
        let mut levels = Vec::with_capacity(n);
        let mut rank = 0usize;
        for [dim, s, k_ref, k_lap] in headers {
            if dim > 1 << 24 || s > dim || k_lap > dim {
                return Err(bad(format!("implausible level header ({dim}, {s}, {k_lap})")));
            }
            let values = as_f64s(take(s)?);
            let vectors = DMatrix::from_vec(dim, s, as_f64s(take(dim * s)?));
            basis.push_level(dim, &vectors, values)?;
            rank += s;
            let map = DVector::from_vec(as_f64s(take(dim)?));
            let laplace_values = as_f64s(take(k_lap)?);
            let laplace_vectors = DMatrix::from_vec(dim, k_lap, as_f64s(take(dim * k_lap)?));
            let sigma_r = DMatrix::from_vec(rank, rank, as_f64s(take(rank * rank)?));
            levels.push(LisLevel {
                map,
                laplace_values,
                laplace_vectors,
                sigma_r,
                reference_samples: k_ref,
            });
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(LisArtefact {
            threshold,
            basis,
            levels,
        })
    }
}

fn full_block(block: &crate::lis::LisBlock) -> DMatrix<f64> {
    let (rc, rf, s) = (block.coarse.nrows(), block.fine.nrows(), block.rank());
    let mut full = DMatrix::zeros(rc + rf, s);
    full.rows_mut(0, rc).copy_from(&block.coarse);
    full.rows_mut(rc, rf).copy_from(&block.fine);
    full
}

/// One row of the subspace summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LisLevelSummary {
    pub level: usize,
    pub param_dim: usize,
    pub added: usize,
    pub cumulative_rank: usize,
    pub single_level_rank: Option<usize>,
    pub map_iterations: usize,
    pub map_converged: bool,
    pub laplace_rank: usize,
    pub lanczos_matvecs: usize,
    pub build_seconds: f64,
    /// Seconds per averaged Hessian product with and without factor reuse.
    pub matvec_seconds_reuse: f64,
    pub matvec_seconds_fresh: f64,
    pub forward_solve_seconds: f64,
    pub forward_dofs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LisSummary {
    pub threshold: f64,
    pub levels: Vec<LisLevelSummary>,
    /// Cost comparison against a single-level basis for each finest level
    /// `1..`, when single-level ranks are available.
    pub cost: Vec<CostReport>,
    pub solve_exponent: f64,
    pub total_seconds: f64,
    /// Total Hessian-product time of the construction with and without reuse.
    pub hessian_seconds_reuse: f64,
    pub hessian_seconds_fresh: f64,
}

impl LisSummary {
    pub fn table(&self) -> String {
        let mut s = String::from("level  R_l   s_l  r_l  r_single  storage_ratio  build_ratio\n");
        for (i, l) in self.levels.iter().enumerate() {
            let ratios = if i == 0 { None } else { self.cost.get(i - 1) };
            let single = l.single_level_rank.map_or("-".into(), |r| r.to_string());
            let (sr, br) = ratios.map_or(("-".into(), "-".into()), |c| {
                (format!("{:.3}", c.storage_ratio), format!("{:.3}", c.build_ratio))
            });
            s.push_str(&format!(
                "{:>5} {:>5} {:>5} {:>4} {:>9} {:>14} {:>12}\n",
                l.level, l.param_dim, l.added, l.cumulative_rank, single, sr, br
            ));
        }
        s
    }
}

fn lanczos_options(config: &RunConfig, level: usize) -> LanczosOptions {
    LanczosOptions {
        block_size: config.lis.block_size,
        rel_tol: config.lis.eigen_rel_tol,
        max_subspace: config.lis.max_subspace,
        seed: config.lis.seed ^ ((level as u64 + 1) << 32),
    }
}

fn time_matvecs<L: crate::model::Linearization>(op: &AveragedGnh<L>, count: usize, seed: u64) -> f64 {
    if count == 0 {
        return 0.0;
    }
    let mut r = crate::rng::stream(seed, 7);
    let x = crate::rng::normal_vector(op.dim(), &mut r);
    let t = Instant::now();
    for _ in 0..count {
        std::hint::black_box(op.apply_vec(&x));
    }
    t.elapsed().as_secs_f64() / count as f64
}

fn subspace_covariance(basis: &HierarchicalBasis, level: usize, draws: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let r = basis.rank(level);
    let coords: Vec<DVector<f64>> = draws
        .iter()
        .map(|v| basis.apply_transpose(level, v))
        .collect::<Result<_>>()?;
    let m = coords.len() as f64;
    let mut mean = DVector::zeros(r);
    for c in &coords {
        mean += c;
    }
    mean /= m;
    let mut cov = DMatrix::zeros(r, r);
    for c in &coords {
        let d = c - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    Ok(cov / (m - 1.0).max(1.0))
}

/// MAP, Laplace approximation and subspace enrichment level by level,
/// followed by a single-level comparison and the cost model.
pub fn build_lis(config: &RunConfig) -> Result<(LisArtefact, LisSummary)> {
    let exp = Experiment::prepare(config)?;
    let data = exp.read_data()?;
    let start = Instant::now();
    let obs = exp.sensors.len();
    let cfg = &config.lis;
    let mut basis = HierarchicalBasis::new();
    let mut levels = Vec::new();
    let mut rows = Vec::new();
    let mut prev_map: Option<DVector<f64>> = None;
    let (mut hess_reuse, mut hess_fresh) = (0.0, 0.0);
    for l in 0..exp.num_levels() {
        let t = Instant::now();
        let model = exp.model(l, &data)?;
        let dim = model.param_dim();
        let mut init = DVector::zeros(dim);
        if let Some(p) = &prev_map {
            init.rows_mut(0, p.len()).copy_from(p);
        }
        let map = find_map(
            &model,
            &init,
            &MapOptions {
                max_iterations: cfg.map_max_iterations,
                gradient_tol: cfg.map_gradient_tol,
                ..MapOptions::default()
            },
        )?;
        if !map.converged {
            log::warn!("level {l}: MAP search stopped at gradient norm {:.3e}", map.gradient_norm);
        }
        let cap = dim.min(2 * obs);
        let lanczos = lanczos_options(config, l);
        let laplace = LaplaceApproximation::at_point(&model, map.point.clone(), cfg.threshold, cap, &lanczos)?;
        let refs = laplace.samples(cfg.seed.wrapping_add(1000 + l as u64), cfg.reference_samples);
        let lins = refs.par_iter().map(|v| model.linearize(v)).collect::<Result<Vec<_>>>()?;
        let avg = AveragedGnh::new(lins)?;
        let opts = LisOptions {
            threshold: cfg.threshold,
            max_rank: cap,
            lanczos: lanczos.clone(),
        };
        let pairs = enrich(&basis, &avg, &opts)?;
        let matvecs = pairs.matvecs;
        basis.push_level(dim, &pairs.vectors, pairs.values)?;
        let build_seconds = t.elapsed().as_secs_f64();

        let single_level_rank = if cfg.single_level_comparison {
            Some(build_base_lis(&avg, &opts)?.len())
        } else {
            None
        };
        let m = cfg.covariance_samples.unwrap_or_else(|| 1000.max(10 * basis.rank(l)));
        let draws = laplace.samples(cfg.seed.wrapping_add(2000 + l as u64), m);
        let sigma_r = subspace_covariance(&basis, l, &draws)?;

        let reuse = time_matvecs(&avg, cfg.timing_matvecs, cfg.seed);
        let fresh = if cfg.timing_matvecs > 0 {
            let cold = model.clone().with_factor_reuse(false);
            let lins = refs.iter().map(|v| cold.linearize(v)).collect::<Result<Vec<_>>>()?;
            time_matvecs(&AveragedGnh::new(lins)?, cfg.timing_matvecs, cfg.seed)
        } else {
            0.0
        };
        hess_reuse += reuse * matvecs as f64;
        hess_fresh += fresh * matvecs as f64;
        let solve = {
            let reps = 3;
            let t = Instant::now();
            for _ in 0..reps {
                model.evaluate(&map.point)?;
            }
            t.elapsed().as_secs_f64() / reps as f64
        };
        log::info!(
            "level {l}: R={dim} added {} (cumulative {}), {matvecs} Hessian products, {build_seconds:.1} s",
            basis.block(l).rank(),
            basis.rank(l)
        );
        rows.push(LisLevelSummary {
            level: l,
            param_dim: dim,
            added: basis.block(l).rank(),
            cumulative_rank: basis.rank(l),
            single_level_rank,
            map_iterations: map.iterations,
            map_converged: map.converged,
            laplace_rank: laplace.eigenvalues.len(),
            lanczos_matvecs: matvecs,
            build_seconds,
            matvec_seconds_reuse: reuse,
            matvec_seconds_fresh: fresh,
            forward_solve_seconds: solve,
            forward_dofs: exp.spaces[l].num_dofs(),
        });
        levels.push(LisLevel {
            map: map.point.clone(),
            laplace_values: laplace.eigenvalues.clone(),
            laplace_vectors: laplace.eigenvectors.clone(),
            sigma_r,
            reference_samples: cfg.reference_samples,
        });
        prev_map = Some(map.point);
    }
    let solve_exponent = if rows.len() >= 2 {
        let dofs: Vec<f64> = rows.iter().map(|r| r.forward_dofs as f64).collect();
        let secs: Vec<f64> = rows.iter().map(|r| r.forward_solve_seconds.max(1e-9)).collect();
        fit_power_law(&dofs, &secs).map(|f| -f.exponent).unwrap_or(1.0)
    } else {
        1.0
    };
    let mut cost = Vec::new();
    if rows.iter().all(|r| r.single_level_rank.is_some()) {
        for top in 1..rows.len() {
            let part = &rows[..=top];
            cost.push(cost_model(&CostInputs {
                param_dims: part.iter().map(|r| r.param_dim as f64).collect(),
                block_ranks: part.iter().map(|r| r.added as f64).collect(),
                single_rank: part[top].single_level_rank.unwrap() as f64,
                forward_dofs: part.iter().map(|r| r.forward_dofs as f64).collect(),
                solve_exponent,
            })?);
        }
    }
    let artefact = LisArtefact {
        threshold: cfg.threshold,
        basis,
        levels,
    };
    let summary = LisSummary {
        threshold: cfg.threshold,
        levels: rows,
        cost,
        solve_exponent,
        total_seconds: start.elapsed().as_secs_f64(),
        hessian_seconds_reuse: hess_reuse,
        hessian_seconds_fresh: hess_fresh,
    };
    artefact.write(&exp.layout.lis())?;
    let text = serde_json::to_string_pretty(&summary)?;
    let p = exp.layout.lis_summary();
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok((artefact, summary))
}

/// Command-line adjustments applied on top of the configuration.
#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub mode: Option<Mode>,
    pub eps: Option<f64>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

impl RunOverrides {
    pub fn apply(&self, config: &RunConfig) -> Result<RunConfig> {
        let mut c = config.clone();
        if let Some(m) = self.mode {
            c.run.mode = m;
        }
        if let Some(e) = self.eps {
            c.run.eps = Some(e);
            c.run.samples = None;
        }
        if let Some(s) = self.seed {
            c.run.seed = s;
        }
        if let Some(w) = self.workers {
            c.run.workers = Some(w);
        }
        c.validate()?;
        Ok(c)
    }
}

/// Kernels, models and starting points for the configured mode.
pub fn assemble_problem(
    exp: &Experiment,
    data: &DataRecord,
    lis: Option<&LisArtefact>,
) -> Result<MultilevelProblem<EllipticModel>> {
    let cfg = &exp.config;
    let mode = cfg.run.mode;
    let top = cfg.run_level();
    let range = if mode.is_multilevel() { 0..top + 1 } else { top..top + 1 };
    let models = exp.models(data, range.clone())?;
    let p = &cfg.proposal;
    if mode.needs_lis() && lis.is_none() {
        return Err(missing(exp.layout.lis(), "run build-lis first"));
    }
    if let Some(a) = lis {
        if a.basis.num_levels() <= top {
            return Err(Error::Config(vec![format!(
                "subspace file has {} levels; the run needs {}",
                a.basis.num_levels(),
                top + 1
            )]));
        }
        if a.basis.param_dims()[..=top] != exp.hierarchy.param_dims()[..=top] {
            return Err(Error::Config(vec!["subspace file does not match the hierarchy".into()]));
        }
    }
    let basis = lis.map(|a| Arc::new(a.basis.truncated(top + 1)));
    let dili = |level: usize| -> Result<DiliOperatorSet> {
        let a = lis.expect("checked above");
        DiliOperatorSet::build(basis.clone().unwrap(), level, &a.levels[level].sigma_r, p.dt, p.dt_perp)
    };
    let base_kernel = match mode {
        Mode::Pcn | Mode::MlPcn => BaseKernel::Pcn { a: p.pcn_a },
        Mode::Dili => BaseKernel::Dili(Arc::new(dili(top)?)),
        Mode::MlDili | Mode::MlMixed => BaseKernel::Dili(Arc::new(dili(0)?)),
    };
    let dims = exp.hierarchy.param_dims();
    let mut coupled = Vec::new();
    if mode.is_multilevel() {
        for l in 1..=top {
            coupled.push(match mode {
                Mode::MlDili => CoupledKernel::new(dili(l)?, p.exact_coupled_acceptance)?,
                _ => CoupledKernel::pcn(&dims, l, p.pcn_a)?,
            });
        }
    }
    let inits = range
        .clone()
        .map(|l| match lis {
            Some(a) => a.levels[l].map.clone(),
            None => DVector::zeros(dims[l]),
        })
        .collect();
    Ok(MultilevelProblem {
        models,
        base_kernel,
        coupled,
        inits,
        dofs: range.clone().map(|l| exp.forward_dofs(l)).collect(),
        first_level: range.start,
    })
}

pub fn settings_from(config: &RunConfig) -> RunSettings {
    let r = &config.run;
    RunSettings {
        mode: r.mode,
        eps: r.eps,
        samples: r.samples.clone(),
        pilot_steps: r.pilot_steps,
        burn_in_fraction: r.burn_in_fraction,
        thin: r.thin,
        pool_stride: r.pool_stride,
        chains_per_level: r.chains_per_level,
        r_cross: r.r_cross,
        batches: r.batches,
        seed: r.seed,
        adaptation: config.proposal.adaptation.clone(),
        step_costs: None,
    }
}

/// Contents of `report.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunDocument<'a> {
    pub config: &'a RunConfig,
    pub data_sha256: String,
    pub lis_sha256: Option<String>,
    pub wall_seconds: f64,
    pub report: &'a MultilevelReport,
    pub iact: &'a [IactRow],
}

/// Integrated autocorrelation times of one level's first chain.
#[derive(Debug, Clone, Serialize)]
pub struct IactRow {
    pub level: usize,
    /// Coordinates introduced on this level; all coordinates on the first.
    pub refined_coordinates: usize,
    pub tau_params_mean: f64,
    pub tau_params_max: f64,
    /// QoI on the first level, the level difference above.
    pub tau_target: f64,
}

fn series_tau(series: &[f64]) -> Option<f64> {
    if series.len() < diagnostics::MIN_SERIES_LEN {
        return None;
    }
    diagnostics::iact(series).ok().map(|a| a.tau)
}

/// Parameter and target IACTs per level, from stored post-burn-in states.
pub fn iact_table(run: &MultilevelRun, dims: &[usize]) -> Vec<IactRow> {
    let first = run.report.first_level;
    let mut rows = Vec::new();
    let mut push = |level: usize, states: &[DVector<f64>], target: &[f64]| {
        let lo = if level == first { 0 } else { dims[level - 1] };
        let hi = dims[level];
        let taus: Vec<f64> = (lo..hi)
            .filter_map(|k| series_tau(&states.iter().map(|v| v[k]).collect::<Vec<_>>()))
            .collect();
        let (mean, max) = if taus.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (taus.iter().sum::<f64>() / taus.len() as f64, taus.iter().cloned().fold(0.0, f64::max))
        };
        rows.push(IactRow {
            level,
            refined_coordinates: hi - lo,
            tau_params_mean: mean,
            tau_params_max: max,
            tau_target: series_tau(target).unwrap_or(f64::NAN),
        });
    };
    if let Some(rec) = run.base.first() {
        push(first, &rec.states, rec.kept_qois());
    }
    for (i, recs) in run.coupled.iter().enumerate() {
        if let Some(rec) = recs.first() {
            push(first + i + 1, &rec.states, &rec.kept_differences());
        }
    }
    rows
}

fn write_iact_table(path: &Path, rows: &[IactRow]) -> Result<()> {
    let mut s = String::from("level,refined_coordinates,tau_params_mean,tau_params_max,tau_target\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4}\n",
            r.level, r.refined_coordinates, r.tau_params_mean, r.tau_params_max, r.tau_target
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Fields of `report.json` read back by [`summarize_runs`].
#[derive(Debug, Clone, Deserialize)]
struct RunDigest {
    report: ReportDigest,
    wall_seconds: f64,
}

#[derive(Debug, Clone, Deserialize)]
struct ReportDigest {
    mode: Mode,
    seed: u64,
    eps: Option<f64>,
    estimate: f64,
    variance: f64,
    pilot_seconds: f64,
    sampling_seconds: f64,
    allocation: Vec<usize>,
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub run: MultilevelRun,
}

/// Executes a sampling run and writes its report, per-level table, traces
/// and autocorrelation files.
pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    config.require_run_target()?;
    let start = Instant::now();
    let exp = Experiment::prepare(config)?;
    let data = exp.read_data()?;
    let lis_path = exp.layout.lis();
    let lis = if config.run.mode.needs_lis() || lis_path.exists() {
        Some(LisArtefact::read(&lis_path)?)
    } else {
        None
    };
    let problem = assemble_problem(&exp, &data, lis.as_ref())?;
    let settings = settings_from(config);
    let result = match config.run.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::Usage(format!("cannot start {w} workers: {e}")))?
            .install(|| run_multilevel(&problem, &settings)),
        None => run_multilevel(&problem, &settings),
    }?;
    let dir = exp.layout.run_dir(config.run.mode, config.run.eps, config.run.seed);
    create_dir(&dir)?;
    let iact = iact_table(&result, &exp.hierarchy.param_dims());
    write_iact_table(&dir.join("iact.csv"), &iact)?;
    let doc = RunDocument {
        config,
        data_sha256: file_hash(&exp.layout.data())?,
        lis_sha256: if lis.is_some() { Some(file_hash(&lis_path)?) } else { None },
        wall_seconds: start.elapsed().as_secs_f64(),
        report: &result.report,
        iact: &iact,
    };
    let p = dir.join("report.json");
    std::fs::write(&p, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(&p, e))?;
    write_levels_csv(&dir.join("levels.csv"), &result.report, &problem.dofs)?;
    if config.run.write_traces {
        write_traces(&dir, &result)?;
    }
    log::info!(
        "{}: estimate {:.6e} +/- {:.2e} in {:.1} s",
        config.run.mode,
        result.report.estimate,
        result.report.std_error(),
        doc.wall_seconds
    );
    Ok(RunOutcome { dir, run: result })
}

fn write_levels_csv(path: &Path, report: &MultilevelReport, dofs: &[f64]) -> Result<()> {
    let mut s = String::from("level,dofs,samples,mean,variance,bias_proxy,tau,ess,cost_per_step,acceptance\n");
    for (i, l) in report.levels.iter().enumerate() {
        let bias = if i == 0 { f64::NAN } else { l.y.abs() };
        s.push_str(&format!(
            "{},{},{},{:.10e},{:.10e},{:.10e},{:.6},{:.3},{:.6e},{:.4}\n",
            report.first_level + i,
            dofs[i],
            l.samples,
            l.y,
            l.var_d,
            bias,
            l.tau,
            l.ess,
            l.cost,
            l.acceptance_rate
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn write_traces(dir: &Path, run: &MultilevelRun) -> Result<()> {
    let first = run.report.first_level;
    if let Some(rec) = run.base.first() {
        rec.write_trace_csv(&dir.join(format!("trace_level{first}.csv")))?;
        write_iact(dir, first, rec.kept_qois())?;
    }
    for (i, recs) in run.coupled.iter().enumerate() {
        if let Some(rec) = recs.first() {
            let level = first + i + 1;
            rec.write_trace_csv(&dir.join(format!("trace_level{level}.csv")))?;
            write_iact(dir, level, &rec.kept_differences())?;
        }
    }
    Ok(())
}

fn write_iact(dir: &Path, level: usize, series: &[f64]) -> Result<()> {
    if series.len() < diagnostics::MIN_SERIES_LEN {
        log::warn!("level {level}: series too short for an autocorrelation file");
        return Ok(());
    }
    let ac = diagnostics::iact(series)?;
    diagnostics::write_autocorr_csv(&dir.join(format!("iact_level{level}.csv")), &ac)
}

/// Collects `report.json` files from the given files or directories
/// (searched two levels deep) into a CSV of cost against tolerance. A
/// subspace summary, when given, adds its Hessian-product cost with and
/// without factor reuse as two extra rows.
pub fn summarize_runs(inputs: &[PathBuf], lis_summary: Option<&Path>) -> Result<String> {
    let mut files = Vec::new();
    for input in inputs {
        collect_reports(input, 2, &mut files)?;
    }
    if files.is_empty() {
        return Err(Error::Usage("no report.json files found".into()));
    }
    files.sort();
    let mut rows = Vec::new();
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
        let d: RunDigest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: f.clone(),
            reason: e.to_string(),
        })?;
        rows.push(d);
    }
    rows.sort_by(|a, b| {
        (a.report.mode.name(), a.report.eps.unwrap_or(f64::INFINITY))
            .partial_cmp(&(b.report.mode.name(), b.report.eps.unwrap_or(f64::INFINITY)))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut s = String::from("method,eps,seed,cpu_seconds,wall_seconds,estimate,std_error,total_samples\n");
    for d in rows {
        let r = &d.report;
        s.push_str(&format!(
            "{},{},{},{:.4},{:.4},{:.10e},{:.4e},{}\n",
            r.mode.name(),
            r.eps.map_or(String::new(), |e| format!("{e:e}")),
            r.seed,
            r.pilot_seconds + r.sampling_seconds,
            d.wall_seconds,
            r.estimate,
            r.variance.sqrt(),
            r.allocation.iter().sum::<usize>()
        ));
    }
    if let Some(p) = lis_summary.filter(|p| p.is_file()) {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let lis: LisSummary = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: p.to_path_buf(),
            reason: e.to_string(),
        })?;
        for (name, secs) in [("LIS-reuse", lis.hessian_seconds_reuse), ("LIS-fresh", lis.hessian_seconds_fresh)] {
            s.push_str(&format!("{name},,,{secs:.4},{:.4},,,\n", lis.total_seconds));
        }
    }
    Ok(s)
}

fn collect_reports(path: &Path, depth: usize, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    if !path.is_dir() {
        return Err(missing(path.to_path_buf(), "no such report or directory"));
    }
    let candidate = path.join("report.json");
    if candidate.is_file() {
        out.push(candidate);
        return Ok(());
    }
    if depth == 0 {
        return Ok(());
    }
    for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let p = entry.map_err(|e| Error::io(path, e))?.path();
        if p.is_dir() {
            collect_reports(&p, depth - 1, out)?;
        }
    }
    Ok(())
}
