//! Run configuration. Every field has a default so an empty JSON object
//! describes the reference elliptic experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{HierarchyConfig, LevelHierarchy};
use crate::mcmc::AdaptationConfig;
use crate::multilevel::Mode;
use crate::prior::KernelSpec;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub snr: f64,
    pub truth_seed: u64,
    pub noise_seed: u64,
    /// Level used to synthesise the data; the finest level when absent.
    pub level: Option<usize>,
    /// Sensor coordinates; the built-in 71-point layout when absent.
    pub sensors: Option<Vec<[f64; 2]>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            snr: 50.0,
            truth_seed: 1,
            noise_seed: 2,
            level: None,
            sensors: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LisConfig {
    /// Eigenvalue truncation threshold.
    pub threshold: f64,
    /// Reference samples per level for the averaged Hessian.
    pub reference_samples: usize,
    /// Laplace draws used to estimate the subspace covariance; when absent,
    /// `max(1000, 10 r)`.
    pub covariance_samples: Option<usize>,
    pub eigen_rel_tol: f64,
    pub block_size: usize,
    pub max_subspace: Option<usize>,
    pub map_max_iterations: usize,
    pub map_gradient_tol: Option<f64>,
    /// Also build a non-recursive basis per level for comparison.
    pub single_level_comparison: bool,
    /// Averaged-Hessian products timed per level when comparing factor reuse.
    pub timing_matvecs: usize,
    pub kl_block_size: usize,
    pub seed: u64,
}

impl Default for LisConfig {
    fn default() -> Self {
        LisConfig {
            threshold: 1e-2,
            reference_samples: 20,
            covariance_samples: None,
            eigen_rel_tol: 1e-8,
            block_size: 1,
            max_subspace: None,
            map_max_iterations: 60,
            map_gradient_tol: None,
            single_level_comparison: true,
            timing_matvecs: 4,
            kl_block_size: 4,
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    pub dt: f64,
    pub dt_perp: f64,
    pub pcn_a: f64,
    pub adaptation: AdaptationConfig,
    /// Include the coarse-marginal proposal density ratio in the coupled
    /// acceptance probability.
    pub exact_coupled_acceptance: bool,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            dt: 0.02,
            dt_perp: 0.1,
            pcn_a: 0.99,
            adaptation: AdaptationConfig {
                enabled: true,
                ..AdaptationConfig::default()
            },
            exact_coupled_acceptance: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub mode: Mode,
    pub eps: Option<f64>,
    /// Post-burn-in samples per level; overrides `eps`.
    pub samples: Option<Vec<usize>>,
    /// Finest level used by the sampler; the hierarchy's finest when absent.
    pub max_level: Option<usize>,
    pub pilot_steps: usize,
    pub burn_in_fraction: f64,
    pub thin: usize,
    pub pool_stride: usize,
    pub chains_per_level: usize,
    pub workers: Option<usize>,
    pub r_cross: f64,
    pub batches: usize,
    pub seed: u64,
    pub write_traces: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            mode: Mode::MlDili,
            eps: None,
            samples: None,
            max_level: None,
            pilot_steps: 2000,
            burn_in_fraction: 0.2,
            thin: 1,
            pool_stride: 1,
            chains_per_level: 1,
            workers: None,
            r_cross: 0.1,
            batches: 20,
            seed: 4,
            write_traces: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub hierarchy: HierarchyConfig,
    pub kernel: KernelSpec,
    pub data: DataConfig,
    pub lis: LisConfig,
    pub proposal: ProposalConfig,
    pub run: RunSection,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            hierarchy: HierarchyConfig::default(),
            kernel: KernelSpec::default(),
            data: DataConfig::default(),
            lis: LisConfig::default(),
            proposal: ProposalConfig::default(),
            run: RunSection::default(),
            output_dir: PathBuf::from("mldili-out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("invalid configuration: {e}")]))
    }

    /// Reads and validates; relative output directories resolve against the
    /// configuration file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if cfg.output_dir.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.output_dir = dir.join(&cfg.output_dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn finest_level(&self) -> usize {
        self.hierarchy.max_level
    }

    pub fn run_level(&self) -> usize {
        self.run.max_level.unwrap_or(self.hierarchy.max_level)
    }

    pub fn data_level(&self) -> usize {
        self.data.level.unwrap_or(self.hierarchy.max_level)
    }

    /// Sampling runs need a tolerance or one sample count per sampled level.
    pub fn require_run_target(&self) -> Result<()> {
        if self.run.eps.is_none() && self.run.samples.is_none() {
            return Err(Error::Config(vec!["one of run.eps or run.samples is required".into()]));
        }
        if let Some(s) = &self.run.samples {
            let expected = if self.run.mode.is_multilevel() { self.run_level() + 1 } else { 1 };
            if s.len() != expected {
                return Err(Error::Config(vec![format!(
                    "run.samples has {} entries, mode {} needs {expected}",
                    s.len(),
                    self.run.mode
                )]));
            }
        }
        Ok(())
    }

    /// All problems at once as a config error; advisory issues are returned
    /// as warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut errs = Vec::new();
        let mut warnings = Vec::new();
        if let Err(e) = LevelHierarchy::new(&self.hierarchy) {
            match e {
                Error::Config(v) => errs.extend(v),
                other => errs.push(other.to_string()),
            }
        }
        errs.extend(self.kernel.validate());
        let d = &self.data;
        if !(d.snr > 0.0 && d.snr.is_finite()) {
            errs.push(format!("data.snr must be positive, got {}", d.snr));
        }
        if self.data_level() > self.hierarchy.max_level {
            errs.push(format!("data.level {} exceeds hierarchy.max_level", self.data_level()));
        }
        if let Some(s) = &d.sensors {
            if s.is_empty() {
                errs.push("data.sensors must not be empty".into());
            }
            if s.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
                errs.push("data.sensors must lie in the unit square".into());
            }
        }
        let l = &self.lis;
        if !(l.threshold > 0.0 && l.threshold.is_finite()) {
            errs.push(format!("lis.threshold must be positive, got {}", l.threshold));
        } else if l.threshold >= 1.0 {
            warnings.push(format!(
                "lis.threshold {} is not below one; directions where the data barely dominate the prior are dropped",
                l.threshold
            ));
        }
        if l.reference_samples == 0 {
            errs.push("lis.reference_samples must be positive".into());
        }
        if !(l.eigen_rel_tol > 0.0 && l.eigen_rel_tol < 1.0) {
            errs.push(format!("lis.eigen_rel_tol must lie in (0, 1), got {}", l.eigen_rel_tol));
        }
        if l.block_size == 0 || l.kl_block_size == 0 {
            errs.push("eigensolver block sizes must be positive".into());
        }
        if l.covariance_samples == Some(0) {
            errs.push("lis.covariance_samples must be positive".into());
        }
        let p = &self.proposal;
        if !(p.dt > 0.0 && p.dt.is_finite()) {
            errs.push(format!("proposal.dt must be positive, got {}", p.dt));
        }
        if !(p.dt_perp > 0.0 && p.dt_perp.is_finite()) {
            errs.push(format!("proposal.dt_perp must be positive, got {}", p.dt_perp));
        }
        if !(p.pcn_a.abs() < 1.0) {
            errs.push(format!("proposal.pcn_a must lie in (-1, 1), got {}", p.pcn_a));
        }
        if p.adaptation.every_accepted == 0 {
            errs.push("proposal.adaptation.every_accepted must be positive".into());
        }
        if !(p.adaptation.prior_weight >= 0.0) {
            errs.push("proposal.adaptation.prior_weight must be non-negative".into());
        }
        let r = &self.run;
        if let Some(eps) = r.eps {
            if !(eps > 0.0 && eps.is_finite()) {
                errs.push(format!("run.eps must be positive, got {eps}"));
            }
        }
        if self.run_level() > self.hierarchy.max_level {
            errs.push(format!("run.max_level {} exceeds hierarchy.max_level", self.run_level()));
        }
        if let Some(s) = &r.samples {
            if s.contains(&0) {
                errs.push("run.samples entries must be positive".into());
            }
        }
        if r.pilot_steps < 2 {
            errs.push("run.pilot_steps must be at least 2".into());
        }
        if !(0.0..1.0).contains(&r.burn_in_fraction) {
            errs.push(format!("run.burn_in_fraction must lie in [0, 1), got {}", r.burn_in_fraction));
        }
        if r.thin == 0 || r.pool_stride == 0 || r.chains_per_level == 0 {
            errs.push("run.thin, run.pool_stride and run.chains_per_level must be positive".into());
        }
        if r.workers == Some(0) {
            errs.push("run.workers must be positive".into());
        }
        if !(0.0..1.0).contains(&r.r_cross) {
            errs.push(format!("run.r_cross must lie in [0, 1), got {}", r.r_cross));
        }
        if r.batches < crate::diagnostics::MIN_BATCHES {
            errs.push(format!("run.batches must be at least {}", crate::diagnostics::MIN_BATCHES));
        }
        if errs.is_empty() {
            for w in &warnings {
                log::warn!("{w}");
            }
            Ok(warnings)
        } else {
            Err(Error::Config(errs))
        }
    }
}
