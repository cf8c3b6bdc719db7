//! Block-tridiagonal direct solver for systems whose unknowns are grouped by
//! queue length: block `n` couples only to blocks `n - 1` and `n + 1`.

use nalgebra::{DMatrix, DVector, LU};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct BlockTridiagonal {
    /// `diag[n]` is square of size `s_n`.
    pub diag: Vec<DMatrix<f64>>,
    /// `upper[n]` couples block `n` to block `n + 1` (`s_n x s_{n+1}`).
    pub upper: Vec<DMatrix<f64>>,
    /// `lower[n]` couples block `n` to block `n - 1` (`s_n x s_{n-1}`); `lower[0]` is empty.
    pub lower: Vec<DMatrix<f64>>,
}

impl BlockTridiagonal {
    pub fn block_count(&self) -> usize {
        self.diag.len()
    }

    pub fn transpose(&self) -> Self {
        let blocks = self.block_count();
        let diag = self.diag.iter().map(|d| d.transpose()).collect();
        let upper = (0..blocks.saturating_sub(1))
            .map(|n| self.lower[n + 1].transpose())
            .collect();
        let lower = (0..blocks)
            .map(|n| {
                if n == 0 {
                    DMatrix::zeros(self.diag[0].nrows(), 0)
                } else {
                    self.upper[n - 1].transpose()
                }
            })
            .collect();
        BlockTridiagonal { diag, upper, lower }
    }

    #[cfg(test)]
    pub fn mul(&self, x: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let blocks = self.block_count();
        (0..blocks)
            .map(|n| {
                let mut y = &self.diag[n] * &x[n];
                if n + 1 < blocks {
                    y += &self.upper[n] * &x[n + 1];
                }
                if n > 0 {
                    y += &self.lower[n] * &x[n - 1];
                }
                y
            })
            .collect()
    }

    /// Block forward elimination; each Schur complement is LU-factored with partial pivoting.
    pub fn factor(&self) -> Result<BlockFactor> {
        let blocks = self.block_count();
        let mut schur: Vec<LU<f64, nalgebra::Dyn, nalgebra::Dyn>> = Vec::with_capacity(blocks);
        for n in 0..blocks {
            let mut c = self.diag[n].clone();
            if n > 0 {
                let coupling = schur[n - 1]
                    .solve(&self.upper[n - 1])
                    .ok_or(Error::Singular(n - 1))?;
                c -= &self.lower[n] * coupling;
            }
            let lu = c.lu();
            if !lu.is_invertible() {
                return Err(Error::Singular(n));
            }
            schur.push(lu);
        }
        Ok(BlockFactor {
            schur,
            upper: self.upper.clone(),
            lower: self.lower.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockFactor {
    schur: Vec<LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    upper: Vec<DMatrix<f64>>,
    lower: Vec<DMatrix<f64>>,
}

impl BlockFactor {
    pub fn solve(&self, rhs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let blocks = self.schur.len();
        let mut y: Vec<DVector<f64>> = Vec::with_capacity(blocks);
        for n in 0..blocks {
            let mut v = rhs[n].clone();
            if n > 0 {
                let prev = self.schur[n - 1]
                    .solve(&y[n - 1])
                    .ok_or(Error::Singular(n - 1))?;
                v -= &self.lower[n] * prev;
            }
            y.push(v);
        }
        let mut x: Vec<DVector<f64>> = vec![DVector::zeros(0); blocks];
        for n in (0..blocks).rev() {
            let mut v = y[n].clone();
            if n + 1 < blocks {
                v -= &self.upper[n] * &x[n + 1];
            }
            x[n] = self.schur[n].solve(&v).ok_or(Error::Singular(n))?;
        }
        Ok(x)
    }
}
