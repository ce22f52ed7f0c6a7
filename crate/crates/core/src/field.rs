//! Uniform 1-D grids and nodal fields living on them.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Equispaced nodes on `[x_lo, x_hi]`, endpoints included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub m: usize,
    pub x_lo: f64,
    pub x_hi: f64,
}

impl Grid {
    pub fn new(m: usize, x_lo: f64, x_hi: f64) -> Result<Self> {
        let grid = Grid { m, x_lo, x_hi };
        grid.validate()?;
        Ok(grid)
    }

    /// The 51-node grid on the unit interval.
    pub fn unit(m: usize) -> Result<Self> {
        Self::new(m, 0.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 3 {
            return Err(Error::invalid(format!("grid needs at least 3 nodes, got {}", self.m)));
        }
        if !(self.x_lo.is_finite() && self.x_hi.is_finite()) || self.x_hi <= self.x_lo {
            return Err(Error::invalid(format!("grid interval [{}, {}] is empty or non-finite", self.x_lo, self.x_hi)));
        }
        Ok(())
    }

    pub fn h(&self) -> f64 {
        (self.x_hi - self.x_lo) / (self.m - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.m {
            self.x_hi
        } else {
            self.x_lo + i as f64 * self.h()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.m).map(|i| self.node(i)).collect()
    }

    /// Index of the node closest to `x`.
    pub fn nearest(&self, x: f64) -> usize {
        let t = ((x - self.x_lo) / self.h()).round();
        t.clamp(0.0, (self.m - 1) as f64) as usize
    }

    pub(crate) fn check_len(&self, len: usize, context: &'static str) -> Result<()> {
        if len != self.m {
            return Err(Error::DimensionMismatch { context, expected: self.m, found: len });
        }
        Ok(())
    }
}

/// A real function sampled at the nodes of a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid,
    values: DVector<f64>,
}

impl Field {
    pub fn new(grid: Grid, values: DVector<f64>) -> Result<Self> {
        grid.check_len(values.len(), "field values")?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field values".into()));
        }
        Ok(Field { grid, values })
    }

    pub fn from_slice(grid: Grid, values: &[f64]) -> Result<Self> {
        Self::new(grid, DVector::from_column_slice(values))
    }

    pub fn zeros(grid: Grid) -> Self {
        Field { grid, values: DVector::zeros(grid.m) }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(grid, DVector::from_iterator(grid.m, grid.nodes().into_iter().map(f)))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn into_values(self) -> DVector<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Both boundary values are exactly zero.
    pub fn is_dirichlet_zero(&self) -> bool {
        self.values[0] == 0.0 && self.values[self.grid.m - 1] == 0.0
    }

    pub fn clamp_boundary(&mut self) {
        let last = self.grid.m - 1;
        self.values[0] = 0.0;
        self.values[last] = 0.0;
    }

    pub fn norm_l2(&self) -> f64 {
        self.values.norm()
    }

    pub fn norm_inf(&self) -> f64 {
        self.values.amax()
    }

    pub(crate) fn same_grid(&self, other: &Grid) -> Result<()> {
        if &self.grid != other {
            return Err(Error::GridMismatch(format!("{:?} vs {:?}", self.grid, other)));
        }
        Ok(())
    }

    /// Two-column `x,u` CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,u\n");
        for (x, u) in self.grid.nodes().iter().zip(self.values.iter()) {
            out.push_str(&crate::io::fmt_f64(*x));
            out.push(',');
            out.push_str(&crate::io::fmt_f64(*u));
            out.push('\n');
        }
        out
    }
}
