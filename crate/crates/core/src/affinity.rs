//! Dense materialization of the global propagation matrix.
//!
//! For one direction and channel, a full scan is a linear map `H_v = G X_v`
//! on the vectorized map. Vectors are formed by concatenating scan lines in
//! scan order (columns for horizontal scans, rows for vertical ones), which
//! makes `G` block lower-triangular. Block `(t, k)` is
//!
//! ```text
//! G_tt = λ_t = I - d_t           (λ_1 = I)
//! G_tk = w_t w_{t-1} ... w_{k+1} λ_k   for k < t
//! ```
//!
//! with `d_t` the diagonal of full row sums of `w_t`. Everything here is
//! brute force and 64-bit; it exists to check the scan.

use std::fmt::Write as _;

use crate::dense::DenseMatrix;
use crate::error::{Result, SpnError};
use crate::propagation::{propagate_direction, ConnectionKind, Direction, GateTensor};
use crate::stability::step_matrix;
use crate::tensor::{Map, Scalar};

/// Largest N = H×W the oracle will materialize.
pub const ORACLE_MAX_PIXELS: usize = 400;

/// Row-sum tolerance used by [`laplacian_decompose`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-10;

/// Magnitudes at or below this count as zero in support and sparsity checks.
pub const SUPPORT_THRESHOLD: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct DenseAffinity {
    pub direction: Direction,
    pub kind: ConnectionKind,
    pub height: usize,
    pub width: usize,
    /// G, indexed in scan-order vectorization.
    pub g: DenseMatrix,
}

impl DenseAffinity {
    pub fn n(&self) -> usize {
        self.height * self.width
    }

    /// (number of scan lines, line length).
    pub fn extent(&self) -> (usize, usize) {
        self.direction.scan_extent(self.height, self.width)
    }

    /// Position of pixel (row, col) in the scan-order vector.
    pub fn vector_index(&self, row: usize, col: usize) -> usize {
        let (_, line) = self.extent();
        let (step, pos) = self.direction.step_pos(row, col, self.height, self.width);
        step * line + pos
    }

    /// Off-diagonal part of G.
    pub fn affinity(&self) -> DenseMatrix {
        let mut a = self.g.clone();
        for i in 0..a.rows() {
            a.set(i, i, 0.0);
        }
        a
    }

    /// Reindexes a scan-order matrix into row-major pixel order so that
    /// matrices from different directions can be compared or combined.
    pub fn to_pixel_order(&self, m: &DenseMatrix) -> DenseMatrix {
        let n = self.n();
        let mut perm = vec![0usize; n];
        for r in 0..self.height {
            for c in 0..self.width {
                perm[r * self.width + c] = self.vector_index(r, c);
            }
        }
        let mut out = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out.set(i, j, m.get(perm[i], perm[j]));
            }
        }
        out
    }

    /// Scan-order vector of one single-channel map.
    pub fn vectorize(&self, x: &Map<f64>) -> Result<Vec<f64>> {
        if x.height() != self.height || x.width() != self.width || x.channels() != 1 {
            return Err(SpnError::Shape(format!(
                "oracle is {}x{}x1, map is {:?}",
                self.height,
                self.width,
                x.shape()
            )));
        }
        let mut v = vec![0.0; self.n()];
        for r in 0..self.height {
            for c in 0..self.width {
                v[self.vector_index(r, c)] = x.at(r, c, 0);
            }
        }
        Ok(v)
    }

    pub fn unvectorize(&self, v: &[f64]) -> Result<Map<f64>> {
        let mut m = Map::zeros(self.height, self.width, 1)?;
        for r in 0..self.height {
            for c in 0..self.width {
                m.set(r, c, 0, v[self.vector_index(r, c)]);
            }
        }
        Ok(m)
    }
}

/// Builds G for one direction and channel by explicit block products.
pub fn build_dense_g<T: Scalar>(
    gates: &GateTensor<T>,
    dir: Direction,
    channel: usize,
) -> Result<DenseAffinity> {
    let (h, w) = (gates.height(), gates.width());
    if h * w > ORACLE_MAX_PIXELS {
        return Err(SpnError::Dimension(format!(
            "oracle capped at {ORACLE_MAX_PIXELS} pixels, got {h}x{w}"
        )));
    }
    if channel >= gates.channels() {
        return Err(SpnError::Dimension(format!(
            "channel {channel} of {}",
            gates.channels()
        )));
    }
    gates.validate_boundary()?;
    let (steps, line) = dir.scan_extent(h, w);

    // w_t for t >= 1 (0-based; step 0 has no predecessor)
    let mut ws: Vec<DenseMatrix> = vec![DenseMatrix::zeros(line, line)];
    for t in 1..steps {
        ws.push(step_matrix(gates, dir, channel, t)?);
    }
    let lambdas: Vec<DenseMatrix> = ws
        .iter()
        .enumerate()
        .map(|(t, wt)| {
            let mut lam = DenseMatrix::identity(line);
            if t > 0 {
                for (i, s) in wt.row_sums().into_iter().enumerate() {
                    lam.set(i, i, 1.0 - s);
                }
            }
            lam
        })
        .collect();

    let n = h * w;
    let mut g = DenseMatrix::zeros(n, n);
    for t in 0..steps {
        g.set_block(t, t, &lambdas[t]);
        // running product w_t w_{t-1} ... w_{k+1}
        let mut prod = DenseMatrix::identity(line);
        for k in (0..t).rev() {
            prod = prod.matmul(&ws[k + 1])?;
            g.set_block(t, k, &prod.matmul(&lambdas[k])?);
        }
    }
    Ok(DenseAffinity {
        direction: dir,
        kind: gates.kind(),
        height: h,
        width: w,
        g,
    })
}

/// `reshape(G · vec(x))` for a single-channel map.
pub fn oracle_propagate(ga: &DenseAffinity, x: &Map<f64>) -> Result<Map<f64>> {
    let v = ga.vectorize(x)?;
    ga.unvectorize(&ga.g.matvec(&v)?)
}

/// `G = I - D + A` split into degree, affinity and Laplacian parts.
#[derive(Clone, Debug)]
pub struct Laplacian {
    pub d: DenseMatrix,
    pub a: DenseMatrix,
    pub l: DenseMatrix,
}

impl Laplacian {
    /// One discrete diffusion step `(I - L) u`.
    pub fn diffuse(&self, u: &[f64]) -> Result<Vec<f64>> {
        let lu = self.l.matvec(u)?;
        Ok(u.iter().zip(lu).map(|(a, b)| a - b).collect())
    }
}

/// Errors if a row of G does not sum to one, which indicates a broken gate
/// assembly.
pub fn laplacian_decompose(ga: &DenseAffinity) -> Result<Laplacian> {
    let n = ga.n();
    for (i, s) in ga.g.row_sums().into_iter().enumerate() {
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(SpnError::Contract(format!(
                "row {i} of G sums to {s}, expected 1"
            )));
        }
    }
    let a = ga.affinity();
    let mut d = DenseMatrix::zeros(n, n);
    for i in 0..n {
        d.set(i, i, 1.0 - ga.g.get(i, i));
    }
    let l = d.sub(&a)?;
    Ok(Laplacian { d, a, l })
}

/// Binary support (1.0 / 0.0) of the scan response to a unit impulse at
/// (`row`, `col`).
pub fn impulse_response<T: Scalar>(
    gates: &GateTensor<T>,
    dir: Direction,
    row: usize,
    col: usize,
) -> Result<Map<f64>> {
    let (h, w) = (gates.height(), gates.width());
    if row >= h || col >= w {
        return Err(SpnError::Dimension(format!(
            "impulse ({row},{col}) outside {h}x{w}"
        )));
    }
    let gates = gates.cast::<f64>();
    let mut support = Map::zeros(h, w, 1)?;
    for ch in 0..gates.channels() {
        let mut x = Map::zeros(h, w, gates.channels())?;
        x.set(row, col, ch, 1.0);
        let y = propagate_direction(&x, &gates, dir)?;
        for r in 0..h {
            for c in 0..w {
                if y.at(r, c, ch).abs() > SUPPORT_THRESHOLD {
                    support.set(r, c, 0, 1.0);
                }
            }
        }
    }
    Ok(support)
}

/// Union of the four directional impulse supports.
pub fn impulse_response_all<T: Scalar>(
    gates: &GateTensor<T>,
    row: usize,
    col: usize,
) -> Result<Map<f64>> {
    let mut union = Map::zeros(gates.height(), gates.width(), 1)?;
    for dir in Direction::ALL {
        let s = impulse_response(gates, dir, row, col)?;
        for (u, v) in union.data_mut().iter_mut().zip(s.data()) {
            if *v > 0.0 {
                *u = 1.0;
            }
        }
    }
    Ok(union)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityStats {
    pub n: usize,
    pub nonzeros: usize,
    pub nonzero_fraction: f64,
    /// Largest |i - j| over nonzero entries.
    pub bandwidth: usize,
    pub block_size: usize,
    /// Nonzero fraction of each block, row-major over block coordinates.
    pub block_density: Vec<f64>,
    /// True when every block's off-diagonal entries are zero.
    pub blocks_diagonal: bool,
}

impl SparsityStats {
    pub fn csv_header() -> &'static str {
        "label,n,nonzeros,nonzero_fraction,bandwidth,block_size,blocks_diagonal"
    }

    pub fn csv_row(&self, label: &str) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{label},{},{},{:.9},{},{},{}",
            self.n,
            self.nonzeros,
            self.nonzero_fraction,
            self.bandwidth,
            self.block_size,
            self.blocks_diagonal
        );
        s
    }
}

/// Sparsity of a square matrix viewed as `block_size`-sized blocks.
pub fn sparsity_stats(m: &DenseMatrix, block_size: usize) -> Result<SparsityStats> {
    if !m.is_square() || block_size == 0 || !m.rows().is_multiple_of(block_size) {
        return Err(SpnError::Shape(format!(
            "{}x{} matrix with block size {block_size}",
            m.rows(),
            m.cols()
        )));
    }
    let n = m.rows();
    let nb = n / block_size;
    let mut nonzeros = 0;
    let mut bandwidth = 0;
    let mut block_counts = vec![0usize; nb * nb];
    let mut blocks_diagonal = true;
    for i in 0..n {
        for j in 0..n {
            if m.get(i, j).abs() > SUPPORT_THRESHOLD {
                nonzeros += 1;
                bandwidth = bandwidth.max(i.abs_diff(j));
                block_counts[(i / block_size) * nb + j / block_size] += 1;
                if i % block_size != j % block_size {
                    blocks_diagonal = false;
                }
            }
        }
    }
    let per_block = (block_size * block_size) as f64;
    Ok(SparsityStats {
        n,
        nonzeros,
        nonzero_fraction: nonzeros as f64 / (n * n) as f64,
        bandwidth,
        block_size,
        block_density: block_counts.iter().map(|&c| c as f64 / per_block).collect(),
        blocks_diagonal,
    })
}

/// Sum of the four directional affinity matrices in pixel order.
pub fn combined_affinity<T: Scalar>(gates: &GateTensor<T>, channel: usize) -> Result<DenseMatrix> {
    let n = gates.height() * gates.width();
    let mut total = DenseMatrix::zeros(n, n);
    for dir in Direction::ALL {
        let ga = build_dense_g(gates, dir, channel)?;
        let a = ga.to_pixel_order(&ga.affinity());
        for i in 0..n {
            for j in 0..n {
                total.set(i, j, total.get(i, j) + a.get(i, j));
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stability::project_gates;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_by_two_gates() -> GateTensor<f64> {
        let mut g = GateTensor::zeros(2, 2, 1, ConnectionKind::ThreeWay).unwrap();
        let d = Direction::LeftToRight;
        g.set(0, 1, 0, d, 1, 0.2);
        g.set(0, 1, 0, d, 2, 0.3);
        g.set(1, 1, 0, d, 0, 0.1);
        g.set(1, 1, 0, d, 1, 0.4);
        g
    }

    #[test]
    fn two_by_two_blocks() {
        let ga = build_dense_g(&two_by_two_gates(), Direction::LeftToRight, 0).unwrap();
        let want = DenseMatrix::from_rows(&[
            &[1.0, 0.0, 0.0, 0.0],
            &[0.0, 1.0, 0.0, 0.0],
            &[0.2, 0.3, 0.5, 0.0],
            &[0.1, 0.4, 0.0, 0.5],
        ])
        .unwrap();
        assert!(ga.g.max_abs_diff(&want) < 1e-15);
        for s in ga.g.row_sums() {
            assert!((s - 1.0).abs() < 1e-15);
        }
        let lap = laplacian_decompose(&ga).unwrap();
        for s in lap.l.row_sums() {
            assert!(s.abs() < 1e-15);
        }
    }

    #[test]
    fn oracle_matches_hand_example() {
        let ga = build_dense_g(&two_by_two_gates(), Direction::LeftToRight, 0).unwrap();
        let x = Map::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = oracle_propagate(&ga, &x).unwrap();
        assert!((y.at(0, 0, 0) - 1.0).abs() < 1e-15);
        assert!((y.at(1, 0, 0) - 3.0).abs() < 1e-15);
        assert!((y.at(0, 1, 0) - 2.1).abs() < 1e-12);
        assert!((y.at(1, 1, 0) - 3.3).abs() < 1e-12);
    }

    #[test]
    fn zero_gates_give_identity() {
        let g = GateTensor::<f64>::zeros(3, 4, 1, ConnectionKind::ThreeWay).unwrap();
        for dir in Direction::ALL {
            let ga = build_dense_g(&g, dir, 0).unwrap();
            assert_eq!(ga.g, DenseMatrix::identity(12));
            let lap = laplacian_decompose(&ga).unwrap();
            assert!(lap.l.data().iter().all(|&v| v == 0.0));
            let x = Map::from_vec(3, 4, 1, (0..12).map(|i| i as f64).collect()).unwrap();
            assert_eq!(oracle_propagate(&ga, &x).unwrap(), x);
            let stats = sparsity_stats(&ga.affinity(), ga.extent().1).unwrap();
            assert_eq!(stats.nonzeros, 0);
            assert_eq!(stats.nonzero_fraction, 0.0);
        }
    }

    #[test]
    fn random_three_way_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let raw = GateTensor::<f64>::random(6, 6, 1, ConnectionKind::ThreeWay, -1.0, 1.0, &mut rng)
            .unwrap();
        let g = project_gates(&raw).unwrap();
        for dir in Direction::ALL {
            let ga = build_dense_g(&g, dir, 0).unwrap();
            assert!(ga.g.is_lower_triangular());
            for s in ga.g.row_sums() {
                assert!((s - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn over_cap_rejected() {
        let g = GateTensor::<f64>::zeros(21, 20, 1, ConnectionKind::OneWay).unwrap();
        assert!(matches!(
            build_dense_g(&g, Direction::LeftToRight, 0),
            Err(SpnError::Dimension(_))
        ));
    }

    #[test]
    fn broken_row_sum_is_a_contract_error() {
        let mut ga = build_dense_g(&two_by_two_gates(), Direction::LeftToRight, 0).unwrap();
        ga.g.set(2, 2, 0.6);
        assert!(matches!(
            laplacian_decompose(&ga),
            Err(SpnError::Contract(_))
        ));
    }

    #[test]
    fn one_way_impulse_stays_on_its_row() {
        let g = GateTensor::<f64>::constant(5, 5, 1, ConnectionKind::OneWay, 0.5).unwrap();
        let s = impulse_response(&g, Direction::LeftToRight, 2, 1).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                let want = if r == 2 && c >= 1 { 1.0 } else { 0.0 };
                assert_eq!(s.at(r, c, 0), want, "({r},{c})");
            }
        }
    }

    #[test]
    fn one_way_blocks_are_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g =
            GateTensor::<f64>::random(5, 4, 1, ConnectionKind::OneWay, 0.1, 0.9, &mut rng).unwrap();
        for dir in Direction::ALL {
            let ga = build_dense_g(&g, dir, 0).unwrap();
            let (steps, line) = ga.extent();
            let stats = sparsity_stats(&ga.affinity(), line).unwrap();
            assert!(stats.blocks_diagonal);
            // each row of A touches at most one pixel per earlier scan line
            let a = ga.affinity();
            for i in 0..a.rows() {
                let nnz = a
                    .row(i)
                    .iter()
                    .filter(|v| v.abs() > SUPPORT_THRESHOLD)
                    .count();
                assert!(nnz < steps);
            }
        }
    }

    #[test]
    fn pixel_order_permutation_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = GateTensor::<f64>::random(3, 4, 1, ConnectionKind::ThreeWay, 0.0, 0.3, &mut rng)
            .unwrap();
        let x = Map::from_vec(3, 4, 1, (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
        for dir in Direction::ALL {
            let ga = build_dense_g(&g, dir, 0).unwrap();
            let gp = ga.to_pixel_order(&ga.g);
            let y = gp.matvec(x.data()).unwrap();
            let want = oracle_propagate(&ga, &x).unwrap();
            for (a, b) in y.iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }
}
