//! Nested discretisation levels and the split of whitened coefficients into
//! the part shared with the next-coarser level and the part that is new.

use std::ops::Range;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Geometric growth parameters for the level sequence.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchyConfig {
    /// Index of the finest level; levels run from 0 to `max_level`.
    pub max_level: usize,
    /// Cells per side on level 0; each level halves the mesh width.
    pub coarse_cells: usize,
    /// Parameter dimension is `base_dim + dim_scale * 2^level`.
    pub base_dim: usize,
    pub dim_scale: usize,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig {
            max_level: 3,
            coarse_cells: 20,
            base_dim: 50,
            dim_scale: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub level: usize,
    pub cells_per_side: usize,
    pub mesh_width: f64,
    pub param_dim: usize,
}

/// An ordered list of levels with strictly increasing parameter dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelHierarchy {
    levels: Vec<LevelSpec>,
}

impl LevelHierarchy {
    pub fn new(cfg: &HierarchyConfig) -> Result<Self> {
        let mut problems = Vec::new();
        if cfg.coarse_cells == 0 {
            problems.push("hierarchy.coarse_cells must be positive".to_string());
        }
        if cfg.dim_scale == 0 {
            problems.push("hierarchy.dim_scale must be positive".to_string());
        }
        if cfg.max_level > 12 {
            problems.push(format!("hierarchy.max_level {} is unreasonably deep", cfg.max_level));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let levels = (0..=cfg.max_level)
            .map(|l| {
                let cells = cfg.coarse_cells << l;
                LevelSpec {
                    level: l,
                    cells_per_side: cells,
                    mesh_width: 1.0 / cells as f64,
                    param_dim: cfg.base_dim + (cfg.dim_scale << l),
                }
            })
            .collect();
        Ok(LevelHierarchy { levels })
    }

    /// Hierarchy with explicit parameter dimensions, used for synthetic models.
    pub fn from_dims(dims: &[usize], coarse_cells: usize) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Usage("at least one level is required".into()));
        }
        if dims.windows(2).any(|w| w[1] <= w[0]) || dims[0] == 0 {
            return Err(Error::Usage(format!(
                "parameter dimensions must be positive and strictly increasing, got {dims:?}"
            )));
        }
        let levels = dims
            .iter()
            .enumerate()
            .map(|(l, &d)| LevelSpec {
                level: l,
                cells_per_side: coarse_cells << l,
                mesh_width: 1.0 / (coarse_cells << l) as f64,
                param_dim: d,
            })
            .collect();
        Ok(LevelHierarchy { levels })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn finest(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, level: usize) -> Result<&LevelSpec> {
        self.levels.get(level).ok_or_else(|| {
            Error::Usage(format!(
                "level {level} out of range for a hierarchy with {} levels",
                self.levels.len()
            ))
        })
    }

    pub fn levels(&self) -> &[LevelSpec] {
        &self.levels
    }

    pub fn param_dim(&self, level: usize) -> usize {
        self.levels[level].param_dim
    }

    pub fn param_dims(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.param_dim).collect()
    }

    /// Indices of level `level` coefficients shared with level `level - 1`.
    pub fn coarse_range(&self, level: usize) -> Result<Range<usize>> {
        self.require_refined(level)?;
        Ok(0..self.levels[level - 1].param_dim)
    }

    /// Indices of coefficients introduced at `level`.
    pub fn fine_range(&self, level: usize) -> Result<Range<usize>> {
        self.require_refined(level)?;
        Ok(self.levels[level - 1].param_dim..self.levels[level].param_dim)
    }

    pub fn split(&self, level: usize, v: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let coarse = self.coarse_range(level)?;
        let fine = self.fine_range(level)?;
        check_dim("split", self.levels[level].param_dim, v.len())?;
        Ok((
            v.rows_range(coarse).clone_owned(),
            v.rows_range(fine).clone_owned(),
        ))
    }

    pub fn join(&self, level: usize, coarse: &DVector<f64>, fine: &DVector<f64>) -> Result<DVector<f64>> {
        let c = self.coarse_range(level)?;
        let f = self.fine_range(level)?;
        check_dim("join (coarse part)", c.len(), coarse.len())?;
        check_dim("join (fine part)", f.len(), fine.len())?;
        let mut v = DVector::zeros(self.levels[level].param_dim);
        v.rows_range_mut(c).copy_from(coarse);
        v.rows_range_mut(f).copy_from(fine);
        Ok(v)
    }

    /// Embeds a level `level - 1` vector into level `level` with zero padding.
    pub fn lift(&self, level: usize, coarse: &DVector<f64>) -> Result<DVector<f64>> {
        let f = self.fine_range(level)?;
        self.join(level, coarse, &DVector::zeros(f.len()))
    }

    fn require_refined(&self, level: usize) -> Result<()> {
        if level == 0 || level >= self.levels.len() {
            return Err(Error::Usage(format!(
                "coarse/fine split needs 1 <= level < {}, got {level}",
                self.levels.len()
            )));
        }
        Ok(())
    }
}
