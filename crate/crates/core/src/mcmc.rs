//! Metropolis-Hastings drivers: the base-level chain, the coupled chain that
//! pools coarse posterior samples, and the pools themselves.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::lis::HierarchicalBasis;
use crate::model::LevelModel;
use crate::proposal::{
    accept_base, accept_coupled_corrected, coupled_propose, pcn_propose, CoarseMarginal, ConditionalFactors,
    DiliOperatorSet,
};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub enabled: bool,
    /// Rebuild the operators after this many acceptances.
    pub every_accepted: usize,
    /// Pseudo-sample weight of the initial subspace covariance.
    pub prior_weight: f64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            enabled: false,
            every_accepted: 100,
            prior_weight: 100.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChainOptions {
    pub steps: usize,
    pub burn_in_fraction: f64,
    /// Stride for stored states; scalar traces are always complete.
    pub thin: usize,
    pub keep_states: bool,
    pub adaptation: AdaptationConfig,
}

impl ChainOptions {
    pub fn new(steps: usize) -> Self {
        ChainOptions {
            steps,
            burn_in_fraction: 0.2,
            thin: 1,
            keep_states: true,
            adaptation: AdaptationConfig::default(),
        }
    }

    pub fn burn_in(&self) -> usize {
        (self.burn_in_fraction * self.steps as f64).floor() as usize
    }

    fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.steps == 0 {
            p.push("chain length must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            p.push(format!("burn-in fraction must lie in [0, 1), got {}", self.burn_in_fraction));
        }
        if self.thin == 0 {
            p.push("thinning stride must be positive".to_string());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    fn stores(&self, step: usize) -> bool {
        self.keep_states && step >= self.burn_in() && (step - self.burn_in()) % self.thin == 0
    }
}

/// Base-level transition kernel.
#[derive(Debug, Clone)]
pub enum BaseKernel {
    Pcn { a: f64 },
    Dili(Arc<DiliOperatorSet>),
}

/// Single-level chain. Scalar traces cover every step including burn-in;
/// `states[i]` is the state after step `burn_in + i * thin`.
#[derive(Debug, Clone, Serialize)]
pub struct ChainRecord {
    pub level: usize,
    pub burn_in: usize,
    pub thin: usize,
    #[serde(skip)]
    pub states: Vec<DVector<f64>>,
    pub misfits: Vec<f64>,
    pub qois: Vec<f64>,
    pub accepted: Vec<bool>,
    pub acceptances: usize,
    pub failures: usize,
    pub seconds: f64,
}

impl ChainRecord {
    pub fn steps(&self) -> usize {
        self.qois.len()
    }
    pub fn acceptance_rate(&self) -> f64 {
        self.acceptances as f64 / self.steps().max(1) as f64
    }
    pub fn seconds_per_step(&self) -> f64 {
        self.seconds / self.steps().max(1) as f64
    }
    pub fn kept_qois(&self) -> &[f64] {
        &self.qois[self.burn_in..]
    }
    pub fn kept_misfits(&self) -> &[f64] {
        &self.misfits[self.burn_in..]
    }

    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("step,accepted,eta_fine,eta_coarse,Q_fine,Q_coarse,D\n");
        for k in 0..self.steps() {
            let _ = writeln!(
                s,
                "{k},{},{:.12e},,{:.12e},,{:.12e}",
                self.accepted[k] as u8, self.misfits[k], self.qois[k], self.qois[k]
            );
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// Running covariance of subspace coordinates during burn-in.
struct Adapter {
    cfg: AdaptationConfig,
    base: DMatrix<f64>,
    sum: DVector<f64>,
    outer: DMatrix<f64>,
    count: f64,
}

impl Adapter {
    fn new(cfg: &AdaptationConfig, ops: &DiliOperatorSet) -> Option<Self> {
        if !cfg.enabled || ops.rank() == 0 {
            return None;
        }
        let r = ops.rank();
        Some(Adapter {
            cfg: cfg.clone(),
            base: ops.sigma_r().clone(),
            sum: DVector::zeros(r),
            outer: DMatrix::zeros(r, r),
            count: 0.0,
        })
    }

    fn observe(&mut self, ops: &DiliOperatorSet, v: &DVector<f64>) {
        let c = ops.basis().apply_transpose(ops.level(), v).expect("state length checked");
        self.outer += &c * c.transpose();
        self.sum += c;
        self.count += 1.0;
    }

    fn due(&self, acceptances: usize) -> bool {
        acceptances > 0 && acceptances % self.cfg.every_accepted == 0 && self.count >= 2.0
    }

    fn rebuild(&self, ops: &DiliOperatorSet) -> Result<DiliOperatorSet> {
        let mean = &self.sum / self.count;
        let emp = (&self.outer - &mean * mean.transpose() * self.count) / (self.count - 1.0);
        let w = self.cfg.prior_weight;
        let sigma = (&self.base * w + emp * self.count) / (w + self.count);
        let (dt, dt_perp) = ops.jump_sizes();
        DiliOperatorSet::build(ops.basis().clone(), ops.level(), &sigma, dt, dt_perp)
    }
}

fn evaluate_logged<M: LevelModel>(model: &M, v: &DVector<f64>, failures: &mut usize) -> Option<(f64, f64)> {
    match model.evaluate(v) {
        Ok(e) if e.misfit.is_finite() && e.qoi.is_finite() => Some((e.misfit, e.qoi)),
        Ok(_) => {
            *failures += 1;
            log::debug!("non-finite evaluation treated as rejection");
            None
        }
        Err(err) => {
            *failures += 1;
            log::debug!("forward failure treated as rejection: {err}");
            None
        }
    }
}

/// Base-level Metropolis-Hastings chain.
pub fn run_base_chain<M: LevelModel>(
    model: &M,
    kernel: &BaseKernel,
    init: &DVector<f64>,
    opts: &ChainOptions,
    seed: u64,
) -> Result<ChainRecord> {
    opts.validate()?;
    check_dim("initial state", model.param_dim(), init.len())?;
    let level = match kernel {
        BaseKernel::Dili(ops) => {
            check_dim("operator dimension", model.param_dim(), ops.dim())?;
            ops.level()
        }
        BaseKernel::Pcn { .. } => 0,
    };
    let mut r = rng::stream(seed, 0);
    let start = Instant::now();
    let first = model.evaluate(init)?;
    let (mut eta, mut q) = (first.misfit, first.qoi);
    let mut v = init.clone();
    let mut ops = match kernel {
        BaseKernel::Dili(o) => Some(o.clone()),
        BaseKernel::Pcn { .. } => None,
    };
    let mut adapter = ops.as_deref().and_then(|o| Adapter::new(&opts.adaptation, o));
    let mut rec = ChainRecord {
        level,
        burn_in: opts.burn_in(),
        thin: opts.thin,
        states: Vec::new(),
        misfits: Vec::with_capacity(opts.steps),
        qois: Vec::with_capacity(opts.steps),
        accepted: Vec::with_capacity(opts.steps),
        acceptances: 0,
        failures: 0,
        seconds: 0.0,
    };
    for step in 0..opts.steps {
        let cand = match (kernel, &ops) {
            (BaseKernel::Pcn { a }, _) => pcn_propose(&v, *a, &mut r)?,
            (_, Some(o)) => o.propose(&v, &mut r)?,
            _ => unreachable!("DILI kernel always has operators"),
        };
        let u: f64 = r.random();
        let mut took = false;
        if let Some((eta_c, q_c)) = evaluate_logged(model, &cand, &mut rec.failures) {
            if u < accept_base(eta, eta_c) {
                v = cand;
                eta = eta_c;
                q = q_c;
                took = true;
                rec.acceptances += 1;
            }
        }
        if step < rec.burn_in {
            if let (Some(ad), Some(o)) = (adapter.as_mut(), ops.as_ref()) {
                ad.observe(o, &v);
                if took && ad.due(rec.acceptances) {
                    ops = Some(Arc::new(ad.rebuild(o)?));
                }
            }
        } else {
            adapter = None;
        }
        rec.misfits.push(eta);
        rec.qois.push(q);
        rec.accepted.push(took);
        if opts.stores(step) {
            rec.states.push(v.clone());
        }
    }
    rec.seconds = start.elapsed().as_secs_f64();
    Ok(rec)
}

/// Post-burn-in coarse states with their cached misfits and QoIs.
#[derive(Debug, Clone)]
pub struct CoarsePool {
    pub level: usize,
    states: Vec<DVector<f64>>,
    misfits: Vec<f64>,
    qois: Vec<f64>,
}

impl CoarsePool {
    pub fn new(level: usize, states: Vec<DVector<f64>>, misfits: Vec<f64>, qois: Vec<f64>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::Usage(format!("pool for level {level} is empty")));
        }
        check_dim("pool misfits", states.len(), misfits.len())?;
        check_dim("pool quantities", states.len(), qois.len())?;
        Ok(CoarsePool {
            level,
            states,
            misfits,
            qois,
        })
    }

    /// Stored states of a base chain, keeping every `stride`-th one.
    pub fn from_base(rec: &ChainRecord, stride: usize) -> Result<Self> {
        Self::from_states(rec.level, &rec.states, rec.kept_misfits(), rec.kept_qois(), rec.thin, stride)
    }

    /// Fine states of a coupled chain, which are level-`l` posterior samples.
    pub fn from_coupled(rec: &CoupledChainRecord, stride: usize) -> Result<Self> {
        Self::from_states(
            rec.level,
            &rec.states,
            &rec.eta_fine[rec.burn_in..],
            &rec.q_fine[rec.burn_in..],
            rec.thin,
            stride,
        )
    }

    fn from_states(
        level: usize,
        states: &[DVector<f64>],
        misfits: &[f64],
        qois: &[f64],
        thin: usize,
        stride: usize,
    ) -> Result<Self> {
        let stride = stride.max(1);
        let mut s = Vec::new();
        let mut m = Vec::new();
        let mut q = Vec::new();
        for (i, st) in states.iter().enumerate().step_by(stride) {
            s.push(st.clone());
            m.push(misfits[i * thin]);
            q.push(qois[i * thin]);
        }
        Self::new(level, s, m, q)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }
    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
    pub fn state(&self, i: usize) -> &DVector<f64> {
        &self.states[i]
    }
    pub fn misfit(&self, i: usize) -> f64 {
        self.misfits[i]
    }
    pub fn qoi(&self, i: usize) -> f64 {
        self.qois[i]
    }

    /// Uniform draw with replacement.
    pub fn draw(&self, rng: &mut StreamRng) -> usize {
        rng.random_range(0..self.states.len())
    }
}

/// Operators for a coupled level.
#[derive(Debug, Clone)]
pub struct CoupledKernel {
    pub ops: Arc<DiliOperatorSet>,
    pub factors: Arc<ConditionalFactors>,
    /// Present when the proposal-density term is included in the ratio.
    pub marginal: Option<Arc<CoarseMarginal>>,
}

impl CoupledKernel {
    pub fn new(ops: DiliOperatorSet, exact_acceptance: bool) -> Result<Self> {
        let factors = ConditionalFactors::precompute(&ops)?;
        let marginal = if exact_acceptance {
            Some(Arc::new(CoarseMarginal::new(&ops)?))
        } else {
            None
        };
        Ok(CoupledKernel {
            ops: Arc::new(ops),
            factors: Arc::new(factors),
            marginal,
        })
    }

    /// Zero-rank basis at every level with coefficient `a` on the fine block.
    pub fn pcn(dims: &[usize], level: usize, a: f64) -> Result<Self> {
        let basis = Arc::new(HierarchicalBasis::empty(&dims[..=level]));
        Self::new(DiliOperatorSet::pcn(basis, level, a)?, false)
    }
}

/// Paired traces of a coupled chain. The fine member is the chain state;
/// the coarse member is the pooled draw of the step, which advances even
/// when the fine candidate is rejected.
#[derive(Debug, Clone, Serialize)]
pub struct CoupledChainRecord {
    pub level: usize,
    pub burn_in: usize,
    pub thin: usize,
    #[serde(skip)]
    pub states: Vec<DVector<f64>>,
    pub eta_fine: Vec<f64>,
    pub eta_coarse: Vec<f64>,
    pub q_fine: Vec<f64>,
    pub q_coarse: Vec<f64>,
    pub accepted: Vec<bool>,
    /// Pool index recorded at each step.
    pub pool_index: Vec<usize>,
    pub acceptances: usize,
    pub failures: usize,
    pub seconds: f64,
}

impl CoupledChainRecord {
    pub fn steps(&self) -> usize {
        self.q_fine.len()
    }
    pub fn acceptance_rate(&self) -> f64 {
        self.acceptances as f64 / self.steps().max(1) as f64
    }
    pub fn seconds_per_step(&self) -> f64 {
        self.seconds / self.steps().max(1) as f64
    }
    pub fn differences(&self) -> Vec<f64> {
        self.q_fine.iter().zip(&self.q_coarse).map(|(f, c)| f - c).collect()
    }
    pub fn kept_differences(&self) -> Vec<f64> {
        self.differences()[self.burn_in..].to_vec()
    }

    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("step,accepted,eta_fine,eta_coarse,Q_fine,Q_coarse,D\n");
        for k in 0..self.steps() {
            let _ = writeln!(
                s,
                "{k},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
                self.accepted[k] as u8,
                self.eta_fine[k],
                self.eta_coarse[k],
                self.q_fine[k],
                self.q_coarse[k],
                self.q_fine[k] - self.q_coarse[k]
            );
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// Coupled level-`l` chain. `coarse` is evaluated only once, at the coarse
/// component of `init`; afterwards coarse misfits come from the pool.
pub fn run_coupled_chain<F: LevelModel, C: LevelModel>(
    fine: &F,
    coarse: &C,
    pool: &CoarsePool,
    kernel: &CoupledKernel,
    init: &DVector<f64>,
    opts: &ChainOptions,
    seed: u64,
) -> Result<CoupledChainRecord> {
    opts.validate()?;
    if pool.is_empty() {
        return Err(Error::Usage("coupled chain needs a non-empty pool".into()));
    }
    let n = fine.param_dim();
    let k = coarse.param_dim();
    check_dim("initial state", n, init.len())?;
    check_dim("operator dimension", n, kernel.ops.dim())?;
    check_dim("pooled state", k, pool.state(0).len())?;
    let level = kernel.ops.level();
    let mut r = rng::stream(seed, 0);
    let start = Instant::now();
    let e0 = fine.evaluate(init)?;
    let (mut eta, mut q) = (e0.misfit, e0.qoi);
    let mut eta_coarse_here = coarse.evaluate(&init.rows(0, k).clone_owned())?.misfit;
    let mut v = init.clone();
    let mut kern = kernel.clone();
    let mut adapter = Adapter::new(&opts.adaptation, &kern.ops);
    let exact = kernel.marginal.is_some();
    let mut rec = CoupledChainRecord {
        level,
        burn_in: opts.burn_in(),
        thin: opts.thin,
        states: Vec::new(),
        eta_fine: Vec::with_capacity(opts.steps),
        eta_coarse: Vec::with_capacity(opts.steps),
        q_fine: Vec::with_capacity(opts.steps),
        q_coarse: Vec::with_capacity(opts.steps),
        accepted: Vec::with_capacity(opts.steps),
        pool_index: Vec::with_capacity(opts.steps),
        acceptances: 0,
        failures: 0,
        seconds: 0.0,
    };
    for step in 0..opts.steps {
        let idx = pool.draw(&mut r);
        let cand = coupled_propose(&v, pool.state(idx), &kern.ops, &kern.factors, &mut r)?;
        let u: f64 = r.random();
        let mut took = false;
        if let Some((eta_c, q_c)) = evaluate_logged(fine, &cand, &mut rec.failures) {
            let correction = match &kern.marginal {
                Some(m) => {
                    let av = kern.ops.apply_a(&v)?;
                    let ac = kern.ops.apply_a(&cand)?;
                    m.log_correction(&v, &av, &cand, &ac)
                }
                None => 0.0,
            };
            let alpha = accept_coupled_corrected(eta, eta_coarse_here, eta_c, pool.misfit(idx), correction);
            if u < alpha {
                v = cand;
                eta = eta_c;
                q = q_c;
                eta_coarse_here = pool.misfit(idx);
                took = true;
                rec.acceptances += 1;
            }
        }
        if step < rec.burn_in {
            if let Some(ad) = adapter.as_mut() {
                ad.observe(&kern.ops, &v);
                if took && ad.due(rec.acceptances) {
                    kern = CoupledKernel::new(ad.rebuild(&kern.ops)?, exact)?;
                }
            }
        } else {
            adapter = None;
        }
        rec.eta_fine.push(eta);
        rec.q_fine.push(q);
        rec.eta_coarse.push(pool.misfit(idx));
        rec.q_coarse.push(pool.qoi(idx));
        rec.accepted.push(took);
        rec.pool_index.push(idx);
        if opts.stores(step) {
            rec.states.push(v.clone());
        }
    }
    rec.seconds = start.elapsed().as_secs_f64();
    Ok(rec)
}
