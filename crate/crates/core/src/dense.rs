//! Small dense 64-bit matrices for the oracle and stability diagnostics.

use crate::error::{Result, SpnError};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(SpnError::Shape("ragged rows".into()));
        }
        Ok(DenseMatrix {
            rows: r,
            cols: c,
            data: rows.iter().flat_map(|row| row.iter().copied()).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(SpnError::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(SpnError::Shape(format!(
                "matvec {}x{} by vector of {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(SpnError::Shape("sub of mismatched matrices".into()));
        }
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Copies the `size × size` block at block coordinates (`bi`, `bj`).
    pub fn block(&self, bi: usize, bj: usize, size: usize) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(size, size);
        for r in 0..size {
            for c in 0..size {
                out.set(r, c, self.get(bi * size + r, bj * size + c));
            }
        }
        out
    }

    pub fn set_block(&mut self, bi: usize, bj: usize, block: &DenseMatrix) {
        let size = block.rows;
        for r in 0..size {
            for c in 0..block.cols {
                self.set(bi * size + r, bj * size + c, block.get(r, c));
            }
        }
    }

    /// True when every entry above the diagonal is exactly zero.
    pub fn is_lower_triangular(&self) -> bool {
        (0..self.rows).all(|r| ((r + 1)..self.cols).all(|c| self.get(r, c) == 0.0))
    }

    /// Spectral radius estimate from the average per-step growth rate of a
    /// power iteration. Converges for complex dominant pairs too, just slowly.
    pub fn spectral_radius_estimate(&self, iters: usize) -> Result<f64> {
        if !self.is_square() {
            return Err(SpnError::Shape(
                "spectral radius of a non-square matrix".into(),
            ));
        }
        let n = self.rows;
        if n == 0 {
            return Ok(0.0);
        }
        // fixed, non-degenerate start vector
        let mut v: Vec<f64> = (0..n)
            .map(|i| 1.0 + 0.1 * ((i * 7 + 3) % 11) as f64)
            .collect();
        let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let n0 = norm(&v);
        v.iter_mut().for_each(|a| *a /= n0);
        let burn_in = iters / 2;
        let mut log_growth = 0.0;
        let mut counted = 0usize;
        for k in 0..iters {
            let next = self.matvec(&v)?;
            let nn = norm(&next);
            if nn == 0.0 {
                return Ok(0.0);
            }
            if k >= burn_in {
                log_growth += nn.ln();
                counted += 1;
            }
            v = next.into_iter().map(|a| a / nn).collect();
        }
        Ok((log_growth / counted.max(1) as f64).exp())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn spectral_radius_of_diagonal() {
        let a = DenseMatrix::from_rows(&[&[0.5, 0.0], &[0.0, -0.8]]).unwrap();
        let rho = a.spectral_radius_estimate(400).unwrap();
        assert!((rho - 0.8).abs() < 1e-6, "{rho}");
    }

    #[test]
    fn spectral_radius_of_rotation() {
        // eigenvalues ±0.9i
        let a = DenseMatrix::from_rows(&[&[0.0, -0.9], &[0.9, 0.0]]).unwrap();
        let rho = a.spectral_radius_estimate(400).unwrap();
        assert!((rho - 0.9).abs() < 1e-6, "{rho}");
    }
}
