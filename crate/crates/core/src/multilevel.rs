//! Telescoping multilevel estimator, sample allocation and rate fitting.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{self, CrossLevelCovariance, DifferenceVariance, MIN_BATCHES, MIN_SERIES_LEN};
use crate::error::{Error, Result};
use crate::mcmc::{
    run_base_chain, run_coupled_chain, AdaptationConfig, BaseKernel, ChainOptions, ChainRecord, CoarsePool,
    CoupledChainRecord, CoupledKernel,
};
use crate::model::LevelModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "pCN")]
    Pcn,
    #[serde(rename = "DILI")]
    Dili,
    #[serde(rename = "MLpCN")]
    MlPcn,
    #[serde(rename = "MLDILI")]
    MlDili,
    #[serde(rename = "MLmixed")]
    MlMixed,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Pcn, Mode::Dili, Mode::MlPcn, Mode::MlDili, Mode::MlMixed];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Pcn => "pCN",
            Mode::Dili => "DILI",
            Mode::MlPcn => "MLpCN",
            Mode::MlDili => "MLDILI",
            Mode::MlMixed => "MLmixed",
        }
    }

    pub fn is_multilevel(self) -> bool {
        matches!(self, Mode::MlPcn | Mode::MlDili | Mode::MlMixed)
    }

    /// Whether any level uses a likelihood-informed subspace.
    pub fn needs_lis(self) -> bool {
        matches!(self, Mode::Dili | Mode::MlDili | Mode::MlMixed)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(vec![format!("unknown mode '{s}'; expected one of pCN, DILI, MLpCN, MLDILI, MLmixed")]))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelStats {
    pub level: usize,
    /// Mean of `Q_0` on the base level, of `D_l` above.
    pub y: f64,
    pub var_d: f64,
    /// At least one.
    pub tau: f64,
    pub samples: usize,
    /// Seconds per chain step.
    pub cost: f64,
    pub ess: f64,
    pub acceptance_rate: f64,
    /// `tau var_d / samples`.
    pub var_y: f64,
    pub decomposition: Option<DifferenceVariance>,
}

fn stats_from_series(level: usize, series: &[f64], cost: f64, acceptance_rate: f64) -> Result<LevelStats> {
    if series.is_empty() {
        return Err(Error::Usage(format!("level {level} produced no samples")));
    }
    let n = series.len();
    let y = series.iter().sum::<f64>() / n as f64;
    let var_d = diagnostics::sample_variance(series);
    let tau = if n >= MIN_SERIES_LEN {
        diagnostics::iact(series)?.tau
    } else {
        log::warn!("level {level}: {n} samples are too few for an IACT estimate; using 1");
        1.0
    };
    Ok(LevelStats {
        level,
        y,
        var_d,
        tau,
        samples: n,
        cost,
        ess: n as f64 / tau,
        acceptance_rate,
        var_y: tau * var_d / n as f64,
        decomposition: None,
    })
}

/// `Y_0 + sum_{l >= 1} Y_l`; levels must be `0..=L` in order.
pub fn telescope(stats: &[LevelStats]) -> Result<f64> {
    if stats.is_empty() {
        return Err(Error::Usage("no levels to combine".into()));
    }
    for (i, s) in stats.iter().enumerate() {
        if s.level != i {
            return Err(Error::Usage(format!("level {i} missing from the estimator")));
        }
    }
    Ok(stats.iter().map(|s| s.y).sum())
}

fn validate_allocation(tau: &[f64], var_d: &[f64], cost: &[f64], eps: f64, r_cross: f64) -> Result<()> {
    let mut p = Vec::new();
    if !(eps > 0.0 && eps.is_finite()) {
        p.push(format!("tolerance must be positive, got {eps}"));
    }
    if !(0.0..1.0).contains(&r_cross) {
        p.push(format!("cross-level ratio must lie in [0, 1), got {r_cross}"));
    }
    if tau.len() != var_d.len() || tau.len() != cost.len() || tau.is_empty() {
        p.push("allocation inputs need one entry per level".into());
    }
    if tau.iter().chain(var_d).chain(cost).any(|x| !(*x >= 0.0 && x.is_finite())) {
        p.push("allocation inputs must be finite and non-negative".into());
    }
    if cost.iter().any(|c| *c <= 0.0) {
        p.push("costs must be positive".into());
    }
    if p.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(p))
    }
}

/// Continuous minimiser of `sum N_l C_l` subject to
/// `(1 + r)/(1 - r) sum tau_l V_l / N_l = eps^2 / 2`.
pub fn continuous_allocation(tau: &[f64], var_d: &[f64], cost: &[f64], eps: f64, r_cross: f64) -> Result<Vec<f64>> {
    validate_allocation(tau, var_d, cost, eps, r_cross)?;
    let inflation = (1.0 + r_cross) / (1.0 - r_cross);
    let s: f64 = tau.iter().zip(var_d).zip(cost).map(|((t, v), c)| (t * v * c).sqrt()).sum();
    let mu = 2.0 * inflation * s / (eps * eps);
    Ok(tau
        .iter()
        .zip(var_d)
        .zip(cost)
        .map(|((t, v), c)| mu * (t * v / c).sqrt())
        .collect())
}

pub const MIN_LEVEL_SAMPLES: usize = 100;

/// Rounded-up optimal allocation with a floor of [`MIN_LEVEL_SAMPLES`].
pub fn allocate_samples(tau: &[f64], var_d: &[f64], cost: &[f64], eps: f64, r_cross: f64) -> Result<Vec<usize>> {
    Ok(continuous_allocation(tau, var_d, cost, eps, r_cross)?
        .into_iter()
        .map(|n| (n.ceil() as usize).max(MIN_LEVEL_SAMPLES))
        .collect())
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PowerFit {
    /// `theta` in `y ~ c M^{-theta}`.
    pub exponent: f64,
    pub std_error: f64,
}

/// Least-squares fit of `log y = log c - theta log M`.
pub fn fit_power_law(m: &[f64], y: &[f64]) -> Result<PowerFit> {
    if m.len() != y.len() || m.len() < 2 {
        return Err(Error::Usage("power-law fit needs at least two matched points".into()));
    }
    if m.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::Numerical("power-law fit needs positive values".into()));
    }
    let x: Vec<f64> = m.iter().map(|v| v.ln()).collect();
    let z: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = x.len() as f64;
    let (mx, mz) = (x.iter().sum::<f64>() / n, z.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxz: f64 = x.iter().zip(&z).map(|(a, b)| (a - mx) * (b - mz)).sum();
    let slope = sxz / sxx;
    let std_error = if x.len() > 2 {
        let rss: f64 = x.iter().zip(&z).map(|(a, b)| (b - mz - slope * (a - mx)).powi(2)).sum();
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(PowerFit {
        exponent: -slope,
        std_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CostRegime {
    /// Variance decays faster than cost grows: cost `eps^-2`.
    VarianceDominated,
    /// Equal rates: cost `eps^-2 log(eps)^2`.
    Balanced,
    /// Cost grows faster: cost `eps^{-2 - (theta_c - theta_v) / theta_b}`.
    CostDominated,
}

#[derive(Debug, Clone, Serialize)]
pub struct Rates {
    pub theta_b: PowerFit,
    pub theta_v: PowerFit,
    pub theta_c: PowerFit,
    pub regime: CostRegime,
    /// Exponent `p` in a total cost of order `eps^-p` (log factors dropped).
    pub predicted_cost_exponent: f64,
}

/// Regime and cost exponent for given rates; equal rates within `1e-9`
/// count as balanced.
pub fn cost_exponent(theta_b: f64, theta_v: f64, theta_c: f64) -> (CostRegime, f64) {
    let gap = theta_c - theta_v;
    if gap.abs() <= 1e-9 {
        (CostRegime::Balanced, 2.0)
    } else if gap < 0.0 {
        (CostRegime::VarianceDominated, 2.0)
    } else {
        (CostRegime::CostDominated, 2.0 + gap / theta_b)
    }
}

/// Fits bias and variance rates on levels `1..` and the cost rate on all
/// levels. Returns `None` with fewer than three levels.
pub fn estimate_rates(dofs: &[f64], bias_proxy: &[f64], var_d: &[f64], cost: &[f64]) -> Result<Option<Rates>> {
    if dofs.len() < 3 {
        return Ok(None);
    }
    let theta_b = fit_power_law(&dofs[1..], &bias_proxy[1..])?;
    let theta_v = fit_power_law(&dofs[1..], &var_d[1..])?;
    let growth = fit_power_law(dofs, cost)?;
    let theta_c = PowerFit {
        exponent: -growth.exponent,
        std_error: growth.std_error,
    };
    let (regime, p) = cost_exponent(theta_b.exponent, theta_v.exponent, theta_c.exponent);
    Ok(Some(Rates {
        theta_b,
        theta_v,
        theta_c,
        regime,
        predicted_cost_exponent: p,
    }))
}

/// Everything the driver needs for levels `0..models.len()`.
pub struct MultilevelProblem<M: LevelModel> {
    pub models: Vec<M>,
    pub base_kernel: BaseKernel,
    /// Kernel for level `l` at index `l - 1`.
    pub coupled: Vec<CoupledKernel>,
    pub inits: Vec<DVector<f64>>,
    /// Forward degrees of freedom per level, for rate fits.
    pub dofs: Vec<f64>,
    /// Grid level of index 0; non-zero for single-level runs on a fine grid.
    pub first_level: usize,
}

#[derive(Debug, Clone)]
pub struct RunSettings {
    pub mode: Mode,
    pub eps: Option<f64>,
    pub samples: Option<Vec<usize>>,
    pub pilot_steps: usize,
    pub burn_in_fraction: f64,
    pub thin: usize,
    pub pool_stride: usize,
    pub chains_per_level: usize,
    pub r_cross: f64,
    pub batches: usize,
    pub seed: u64,
    pub adaptation: AdaptationConfig,
    /// Per-step costs for the allocation in place of measured pilot timings,
    /// which makes tolerance-driven runs reproducible from the seed.
    pub step_costs: Option<Vec<f64>>,
}

impl RunSettings {
    pub fn new(mode: Mode, seed: u64) -> Self {
        RunSettings {
            mode,
            eps: None,
            samples: None,
            pilot_steps: 2000,
            burn_in_fraction: 0.2,
            thin: 1,
            pool_stride: 1,
            chains_per_level: 1,
            r_cross: 0.1,
            batches: MIN_BATCHES,
            seed,
            adaptation: AdaptationConfig::default(),
            step_costs: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MultilevelReport {
    pub mode: Mode,
    pub seed: u64,
    pub eps: Option<f64>,
    pub first_level: usize,
    pub allocation: Vec<usize>,
    pub levels: Vec<LevelStats>,
    pub estimate: f64,
    /// `sum Var(Y_l)`.
    pub variance: f64,
    /// `(1 + r)/(1 - r) sum Var(Y_l)` with the assumed ratio.
    pub variance_bound: f64,
    pub r_cross_assumed: f64,
    pub cross_level: Option<CrossLevelCovariance>,
    /// `|Y_L|` extrapolated with the fitted bias rate when available.
    pub bias_estimate: Option<f64>,
    pub rates: Option<Rates>,
    pub pilot_seconds: f64,
    pub sampling_seconds: f64,
}

impl MultilevelReport {
    pub fn std_error(&self) -> f64 {
        self.variance.sqrt()
    }
}

pub struct MultilevelRun {
    pub report: MultilevelReport,
    pub base: Vec<ChainRecord>,
    pub coupled: Vec<Vec<CoupledChainRecord>>,
}

fn chain_seed(seed: u64, phase: u64, level: usize, chain: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (phase << 56)
        ^ ((level as u64) << 40)
        ^ chain as u64
}

fn steps_for(kept: usize, burn: f64) -> usize {
    let mut steps = ((kept as f64) / (1.0 - burn)).ceil() as usize;
    while steps - ((burn * steps as f64).floor() as usize) < kept {
        steps += 1;
    }
    steps.max(1)
}

struct LevelOutcome {
    base: Vec<ChainRecord>,
    coupled: Vec<CoupledChainRecord>,
    stats: LevelStats,
    series: Vec<f64>,
}

fn concat_pool_base(recs: &[ChainRecord], stride: usize) -> Result<CoarsePool> {
    let mut pools = recs.iter().map(|r| CoarsePool::from_base(r, stride));
    let first = pools.next().expect("at least one chain")?;
    merge_pools(first, pools)
}

fn concat_pool_coupled(recs: &[CoupledChainRecord], stride: usize) -> Result<CoarsePool> {
    let mut pools = recs.iter().map(|r| CoarsePool::from_coupled(r, stride));
    let first = pools.next().expect("at least one chain")?;
    merge_pools(first, pools)
}

fn merge_pools(first: CoarsePool, rest: impl Iterator<Item = Result<CoarsePool>>) -> Result<CoarsePool> {
    let mut states = Vec::new();
    let mut misfits = Vec::new();
    let mut qois = Vec::new();
    let level = first.level;
    for p in std::iter::once(Ok(first)).chain(rest) {
        let p = p?;
        for i in 0..p.len() {
            states.push(p.state(i).clone());
            misfits.push(p.misfit(i));
            qois.push(p.qoi(i));
        }
    }
    CoarsePool::new(level, states, misfits, qois)
}

/// Runs every level once with `kept[l]` post-burn-in samples split across chains.
fn sample_levels<M: LevelModel>(
    problem: &MultilevelProblem<M>,
    settings: &RunSettings,
    kept: &[usize],
    inits: &[DVector<f64>],
    phase: u64,
) -> Result<Vec<LevelOutcome>> {
    let chains = settings.chains_per_level.max(1);
    let options = |n: usize| {
        let per_chain = n.div_ceil(chains);
        let mut o = ChainOptions::new(steps_for(per_chain, settings.burn_in_fraction));
        o.burn_in_fraction = settings.burn_in_fraction;
        o.thin = settings.thin;
        o.adaptation = settings.adaptation.clone();
        o
    };
    let mut out: Vec<LevelOutcome> = Vec::with_capacity(kept.len());
    let opts0 = options(kept[0]);
    let base: Vec<ChainRecord> = (0..chains)
        .into_par_iter()
        .map(|c| {
            run_base_chain(
                &problem.models[0],
                &problem.base_kernel,
                &inits[0],
                &opts0,
                chain_seed(settings.seed, phase, 0, c),
            )
        })
        .collect::<Result<_>>()?;
    let series: Vec<f64> = base.iter().flat_map(|r| r.kept_qois().iter().copied()).collect();
    let cost = base.iter().map(ChainRecord::seconds_per_step).sum::<f64>() / chains as f64;
    let acc = base.iter().map(ChainRecord::acceptance_rate).sum::<f64>() / chains as f64;
    let stats = combine_chain_stats(0, base.iter().map(|r| r.kept_qois().to_vec()).collect(), cost, acc)?;
    let mut pool = concat_pool_base(&base, settings.pool_stride)?;
    out.push(LevelOutcome {
        base,
        coupled: Vec::new(),
        stats,
        series,
    });
    for l in 1..kept.len() {
        let opts = options(kept[l]);
        let fine = &problem.models[l];
        let coarse = &problem.models[l - 1];
        let kernel = &problem.coupled[l - 1];
        let recs: Vec<CoupledChainRecord> = (0..chains)
            .into_par_iter()
            .map(|c| {
                run_coupled_chain(fine, coarse, &pool, kernel, &inits[l], &opts, chain_seed(settings.seed, phase, l, c))
            })
            .collect::<Result<_>>()?;
        let per_chain: Vec<Vec<f64>> = recs.iter().map(CoupledChainRecord::kept_differences).collect();
        let series: Vec<f64> = per_chain.iter().flatten().copied().collect();
        let cost = recs.iter().map(CoupledChainRecord::seconds_per_step).sum::<f64>() / chains as f64;
        let acc = recs.iter().map(CoupledChainRecord::acceptance_rate).sum::<f64>() / chains as f64;
        let mut stats = combine_chain_stats(l, per_chain, cost, acc)?;
        let qf: Vec<f64> = recs.iter().flat_map(|r| r.q_fine[r.burn_in..].iter().copied()).collect();
        let qc: Vec<f64> = recs.iter().flat_map(|r| r.q_coarse[r.burn_in..].iter().copied()).collect();
        stats.decomposition = Some(diagnostics::variance_of_difference(&qf, &qc)?);
        if l + 1 < kept.len() {
            pool = concat_pool_coupled(&recs, settings.pool_stride)?;
        }
        out.push(LevelOutcome {
            base: Vec::new(),
            coupled: recs,
            stats,
            series,
        });
    }
    Ok(out)
}

/// Averages per-chain estimates; `Var(Y)` is the mean of per-chain
/// variances divided by the number of chains.
fn combine_chain_stats(level: usize, per_chain: Vec<Vec<f64>>, cost: f64, acc: f64) -> Result<LevelStats> {
    let stats: Vec<LevelStats> = per_chain
        .iter()
        .map(|s| stats_from_series(level, s, cost, acc))
        .collect::<Result<_>>()?;
    let c = stats.len() as f64;
    if stats.len() == 1 {
        return Ok(stats.into_iter().next().unwrap());
    }
    let all: Vec<f64> = per_chain.concat();
    let samples = all.len();
    let var_y = stats.iter().map(|s| s.var_y).sum::<f64>() / (c * c);
    let var_d = diagnostics::sample_variance(&all);
    let tau = (var_y * samples as f64 / var_d).max(1.0);
    Ok(LevelStats {
        level,
        y: stats.iter().map(|s| s.y).sum::<f64>() / c,
        var_d,
        tau,
        samples,
        cost,
        ess: samples as f64 / tau,
        acceptance_rate: acc,
        var_y,
        decomposition: None,
    })
}

fn last_states<M: LevelModel>(problem: &MultilevelProblem<M>, outcome: &[LevelOutcome]) -> Vec<DVector<f64>> {
    outcome
        .iter()
        .enumerate()
        .map(|(l, o)| {
            let last = if l == 0 {
                o.base.first().and_then(|r| r.states.last())
            } else {
                o.coupled.first().and_then(|r| r.states.last())
            };
            last.cloned().unwrap_or_else(|| problem.inits[l].clone())
        })
        .collect()
}

/// Pilot run (when a tolerance is given), allocation, then production.
pub fn run_multilevel<M: LevelModel>(problem: &MultilevelProblem<M>, settings: &RunSettings) -> Result<MultilevelRun> {
    let levels = problem.models.len();
    if levels == 0 || problem.coupled.len() + 1 != levels || problem.inits.len() != levels || problem.dofs.len() != levels {
        return Err(Error::Usage("multilevel problem has inconsistent level counts".into()));
    }
    let mut pilot_seconds = 0.0;
    let mut inits = problem.inits.clone();
    let allocation = match (&settings.samples, settings.eps) {
        (Some(n), _) => {
            if n.len() != levels {
                return Err(Error::Config(vec![format!(
                    "{} sample counts given for {levels} levels",
                    n.len()
                )]));
            }
            n.clone()
        }
        (None, Some(eps)) => {
            let t = Instant::now();
            let kept = settings.pilot_steps - (settings.burn_in_fraction * settings.pilot_steps as f64) as usize;
            let pilot = sample_levels(problem, settings, &vec![kept.max(1); levels], &inits, 1)?;
            pilot_seconds = t.elapsed().as_secs_f64();
            inits = last_states(problem, &pilot);
            let tau: Vec<f64> = pilot.iter().map(|o| o.stats.tau).collect();
            let var: Vec<f64> = pilot.iter().map(|o| o.stats.var_d).collect();
            let cost: Vec<f64> = match &settings.step_costs {
                Some(c) if c.len() == levels => c.clone(),
                Some(c) => {
                    return Err(Error::Config(vec![format!("{} step costs given for {levels} levels", c.len())]));
                }
                None => pilot.iter().map(|o| o.stats.cost.max(1e-9)).collect(),
            };
            allocate_samples(&tau, &var, &cost, eps, settings.r_cross)?
        }
        (None, None) => {
            return Err(Error::Config(vec!["either a tolerance or per-level sample counts is required".into()]));
        }
    };
    let t = Instant::now();
    let outcome = sample_levels(problem, settings, &allocation, &inits, 2)?;
    let sampling_seconds = t.elapsed().as_secs_f64();
    let stats: Vec<LevelStats> = outcome.iter().map(|o| o.stats.clone()).collect();
    let estimate = telescope(&stats)?;
    let variance: f64 = stats.iter().map(|s| s.var_y).sum();
    let inflation = (1.0 + settings.r_cross) / (1.0 - settings.r_cross);
    let cross_level = if levels > 1 {
        let nb = settings.batches.max(MIN_BATCHES);
        let min_len = outcome.iter().map(|o| o.series.len()).min().unwrap_or(0);
        if min_len >= nb {
            let batched: Vec<Vec<f64>> = outcome
                .iter()
                .map(|o| diagnostics::batch_means(&o.series, nb))
                .collect::<Result<_>>()?;
            Some(diagnostics::cross_level_ratio(&batched)?)
        } else {
            None
        }
    } else {
        None
    };
    if let Some(c) = &cross_level {
        if !c.bound_applies() {
            log::warn!("measured cross-level ratio {} is not below one; variance bound does not apply", c.max_ratio);
        }
    }
    let abs_y: Vec<f64> = stats.iter().map(|s| s.y.abs().max(f64::MIN_POSITIVE)).collect();
    let var_d: Vec<f64> = stats.iter().map(|s| s.var_d.max(f64::MIN_POSITIVE)).collect();
    let cost: Vec<f64> = stats.iter().map(|s| s.cost.max(1e-12)).collect();
    let rates = estimate_rates(&problem.dofs, &abs_y, &var_d, &cost).unwrap_or_else(|e| {
        log::warn!("rate fit failed: {e}");
        None
    });
    let bias_estimate = if levels > 1 {
        let last = stats[levels - 1].y.abs();
        let ratio = problem.dofs[levels - 1] / problem.dofs[levels - 2];
        Some(match &rates {
            Some(r) if r.theta_b.exponent > 0.0 => last / (ratio.powf(r.theta_b.exponent) - 1.0),
            _ => last,
        })
    } else {
        None
    };
    let (base, coupled) = outcome.into_iter().fold((Vec::new(), Vec::new()), |(mut b, mut c), o| {
        b.extend(o.base);
        if !o.coupled.is_empty() {
            c.push(o.coupled);
        }
        (b, c)
    });
    Ok(MultilevelRun {
        report: MultilevelReport {
            mode: settings.mode,
            seed: settings.seed,
            eps: settings.eps,
            first_level: problem.first_level,
            allocation,
            levels: stats,
            estimate,
            variance,
            variance_bound: inflation * variance,
            r_cross_assumed: settings.r_cross,
            cross_level,
            bias_estimate,
            rates,
            pilot_seconds,
            sampling_seconds,
        },
        base,
        coupled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn stat(level: usize, y: f64) -> LevelStats {
        LevelStats {
            level,
            y,
            var_d: 1.0,
            tau: 1.0,
            samples: 100,
            cost: 1.0,
            ess: 100.0,
            acceptance_rate: 1.0,
            var_y: 0.01,
            decomposition: None,
        }
    }

    #[test]
    fn telescoping_sum() {
        assert_eq!(telescope(&[stat(0, 2.5)]).unwrap(), 2.5);
        assert_eq!(telescope(&[stat(0, 2.5), stat(1, 0.0), stat(2, 0.0)]).unwrap(), 2.5);
        assert_eq!(telescope(&[stat(0, 1.0), stat(1, 0.25), stat(2, -0.125)]).unwrap(), 1.125);
        assert!(telescope(&[stat(0, 1.0), stat(2, 0.5)]).is_err());
    }

    #[test]
    fn single_level_allocation_collapses() {
        let (tau, v, eps, r) = (3.0, 2.0, 0.05, 0.1);
        let n = allocate_samples(&[tau], &[v], &[0.7], eps, r).unwrap();
        let expect = (2.0 * (1.0 + r) / (1.0 - r) * tau * v / (eps * eps)).ceil() as usize;
        assert_eq!(n, vec![expect]);
    }

    #[test]
    fn symmetric_levels_get_equal_samples() {
        let n = allocate_samples(&[2.0, 1.0], &[1.0, 4.0], &[1.0, 2.0], 0.01, 0.1).unwrap();
        assert_eq!(n[0], n[1]);
    }

    #[test]
    fn allocation_floor_and_errors() {
        assert_eq!(allocate_samples(&[1.0], &[1e-9], &[1.0], 10.0, 0.1).unwrap(), vec![100]);
        assert!(allocate_samples(&[1.0], &[1.0], &[1.0], 0.0, 0.1).unwrap_err().is_config());
        assert!(allocate_samples(&[1.0], &[1.0], &[1.0], 0.1, 1.0).is_err());
    }

    #[test]
    fn allocation_beats_random_feasible_allocations() {
        let mut r = rng::stream(3, 0);
        let tau = [4.0, 2.0, 1.5];
        let v = [1.0, 0.1, 0.02];
        let c = [1.0, 3.0, 9.0];
        let (eps, rc) = (0.01, 0.1);
        let n = continuous_allocation(&tau, &v, &c, eps, rc).unwrap();
        let inflation = (1.0 + rc) / (1.0 - rc);
        let budget = eps * eps / 2.0;
        let var_of = |n: &[f64]| inflation * (0..3).map(|i| tau[i] * v[i] / n[i]).sum::<f64>();
        assert!((var_of(&n) - budget).abs() < 1e-9 * budget);
        let opt_cost: f64 = n.iter().zip(&c).map(|(a, b)| a * b).sum();
        for _ in 0..10_000 {
            let w: Vec<f64> = (0..3).map(|_| r.random_range(0.05..1.0)).collect();
            let scale = var_of(&w) / budget;
            let m: Vec<f64> = w.iter().map(|x| x * scale).collect();
            let cost: f64 = m.iter().zip(&c).map(|(a, b)| a * b).sum();
            assert!(cost >= opt_cost * (1.0 - 1e-12));
        }
    }

    #[test]
    fn exact_power_law_fit() {
        let m: Vec<f64> = [441.0, 1681.0, 6561.0, 25921.0].to_vec();
        let v: Vec<f64> = m.iter().map(|x: &f64| x.powf(-0.5)).collect();
        let fit = fit_power_law(&m, &v).unwrap();
        assert!((fit.exponent - 0.5).abs() < 1e-10);
    }

    #[test]
    fn cost_dominated_regime_exponent() {
        let (regime, p) = cost_exponent(0.5, 0.5, 1.2);
        assert_eq!(regime, CostRegime::CostDominated);
        assert!((p - 3.4).abs() < 1e-12);
        assert_eq!(cost_exponent(0.5, 1.5, 1.2).1, 2.0);
    }

    #[test]
    fn rates_need_three_levels() {
        assert!(estimate_rates(&[1.0, 2.0], &[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]).unwrap().is_none());
    }

    #[test]
    fn noisy_rate_fits_cover_truth() {
        let m: Vec<f64> = (0..6).map(|l| 441.0 * 4f64.powi(l)).collect();
        let mut covered = 0;
        let reps = 200;
        for rep in 0..reps {
            let mut r = rng::stream(17, rep);
            let y: Vec<f64> = m.iter().map(|x| 3.0 * x.powf(-0.7) * (0.1 * rng::std_normal(&mut r)).exp()).collect();
            let fit = fit_power_law(&m, &y).unwrap();
            if (fit.exponent - 0.7).abs() <= 2.0 * fit.std_error {
                covered += 1;
            }
        }
        // Student-t with 4 degrees of freedom puts about 88% inside 2 SE.
        assert!(covered as f64 / reps as f64 > 0.8, "{covered}");
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
            let js = serde_json::to_string(&m).unwrap();
            assert_eq!(js, format!("\"{}\"", m.name()));
        }
        assert!("MLfoo".parse::<Mode>().unwrap_err().is_config());
    }

    proptest! {
        #[test]
        fn steps_cover_requested_samples(kept in 1usize..5000, burn in 0.0f64..0.9) {
            let s = steps_for(kept, burn);
            prop_assert!(s - (burn * s as f64).floor() as usize >= kept);
        }
    }
}
