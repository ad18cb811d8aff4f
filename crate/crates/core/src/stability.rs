//! Gate projection and stability diagnostics.
//!
//! A scan is stable when every step matrix `w_t` has spectral radius at most
//! one. By Gershgorin's disc theorem that holds whenever each row's absolute
//! sum is at most one, and a row of `w_t` is exactly the gate set of one
//! pixel. Projection rescales each gate set onto that bound.

use std::fmt::Write as _;

use crate::dense::DenseMatrix;
use crate::error::{Result, SpnError};
use crate::propagation::{Direction, GateTensor};
use crate::tensor::Scalar;

/// Tolerance on the absolute row sum for a passing report.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Sums within a few ulps of one count as inside the bound, which keeps
/// projection idempotent after division rounding.
fn projection_threshold<T: Scalar>() -> T {
    T::one() + T::lit(4.0) * T::epsilon()
}

/// Rescales each (pixel, channel, direction) gate set so its absolute sum is
/// at most one. Sets already inside the bound are left untouched.
pub fn project_gates<T: Scalar>(raw: &GateTensor<T>) -> Result<GateTensor<T>> {
    if !raw.is_finite() {
        return Err(SpnError::NonFinite("raw gates".into()));
    }
    let m = raw.kind().multiplicity();
    let limit = projection_threshold::<T>();
    let mut out = raw.clone();
    for set in out.data_mut().chunks_mut(m) {
        let s: T = set.iter().map(|v| v.abs()).sum();
        if s > limit {
            set.iter_mut().for_each(|v| *v = *v / s);
        }
    }
    Ok(out)
}

/// Reverse pass of [`project_gates`]. At `s == 1` the identity branch is used.
pub fn project_gates_backward<T: Scalar>(
    raw: &GateTensor<T>,
    d_projected: &GateTensor<T>,
) -> Result<GateTensor<T>> {
    if raw.len() != d_projected.len() || raw.kind() != d_projected.kind() {
        return Err(SpnError::Shape("projection gradient shape".into()));
    }
    let m = raw.kind().multiplicity();
    let limit = projection_threshold::<T>();
    let mut out = d_projected.clone();
    for (r, g) in raw.data().chunks(m).zip(out.data_mut().chunks_mut(m)) {
        let s: T = r.iter().map(|v| v.abs()).sum();
        if s > limit {
            // p_k = r_k / s  =>  dL/dr_j = g_j / s - sign(r_j) * (Σ_k g_k r_k) / s^2
            let dot: T = r.iter().zip(g.iter()).map(|(&a, &b)| a * b).sum();
            for (gj, &rj) in g.iter_mut().zip(r) {
                let sign = if rj > T::zero() {
                    T::one()
                } else if rj < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                *gj = *gj / s - sign * dot / (s * s);
            }
        }
    }
    Ok(out)
}

/// Gershgorin bound on the spectral radius: the largest absolute row sum.
pub fn gershgorin_bound(w: &DenseMatrix) -> Result<f64> {
    if !w.is_square() {
        return Err(SpnError::Shape(format!(
            "Gershgorin bound needs a square matrix, got {}x{}",
            w.rows(),
            w.cols()
        )));
    }
    Ok((0..w.rows())
        .map(|r| w.row(r).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max))
}

/// The transformation matrix `w_t` of scan step `step` (≥ 1) for one channel:
/// row `k` holds the gates of the pixel at line position `k`.
pub fn step_matrix<T: Scalar>(
    gates: &GateTensor<T>,
    dir: Direction,
    channel: usize,
    step: usize,
) -> Result<DenseMatrix> {
    let (h, w) = (gates.height(), gates.width());
    let (steps, line) = dir.scan_extent(h, w);
    if step == 0 || step >= steps || channel >= gates.channels() {
        return Err(SpnError::Dimension(format!(
            "step {step} / channel {channel} outside {steps} steps, {} channels",
            gates.channels()
        )));
    }
    let offsets = gates.kind().offsets();
    let mut m = DenseMatrix::zeros(line, line);
    for pos in 0..line {
        let (r, c) = dir.pixel_at(step, pos, h, w);
        for (k, &off) in offsets.iter().enumerate() {
            let q = pos as isize + off;
            if q >= 0 && (q as usize) < line {
                m.set(pos, q as usize, gates.get(r, c, channel, dir, k).as_f64());
            }
        }
    }
    Ok(m)
}

/// Diagnostics for one (direction, scan step), maximized over channels.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStability {
    pub direction: Direction,
    pub step: usize,
    /// Largest per-pixel Σ|p|, read directly from the gate tensor.
    pub row_sum_max: f64,
    /// [`gershgorin_bound`] of the assembled `w_t`.
    pub gershgorin: f64,
    /// Power-iteration estimate, only for short scan lines.
    pub spectral_radius: Option<f64>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    pub steps: Vec<StepStability>,
    pub pass: bool,
}

impl StabilityReport {
    pub fn failures(&self) -> impl Iterator<Item = &StepStability> {
        self.steps.iter().filter(|s| !s.pass)
    }

    pub fn max_row_sum(&self) -> f64 {
        self.steps.iter().map(|s| s.row_sum_max).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("direction,step,row_sum_max,gershgorin,spectral_radius,pass\n");
        for s in &self.steps {
            let rho = s
                .spectral_radius
                .map(|r| format!("{r:.9}"))
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{:.9},{:.9},{},{}",
                s.direction, s.step, s.row_sum_max, s.gershgorin, rho, s.pass
            );
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StabilityOptions {
    /// Spectral radii are estimated when the scan line is at most this long.
    pub spectral_max_line: usize,
    pub power_iterations: usize,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        StabilityOptions {
            spectral_max_line: 16,
            power_iterations: 1000,
        }
    }
}

pub fn verify_stability<T: Scalar>(gates: &GateTensor<T>) -> StabilityReport {
    verify_stability_with(gates, StabilityOptions::default())
}

pub fn verify_stability_with<T: Scalar>(
    gates: &GateTensor<T>,
    opts: StabilityOptions,
) -> StabilityReport {
    let (h, w) = (gates.height(), gates.width());
    let mut steps = Vec::new();
    for dir in Direction::ALL {
        let (n_steps, line) = dir.scan_extent(h, w);
        for step in 1..n_steps {
            let mut row_sum_max = 0.0f64;
            let mut gershgorin = 0.0f64;
            let mut rho: Option<f64> = None;
            for ch in 0..gates.channels() {
                for pos in 0..line {
                    let (r, c) = dir.pixel_at(step, pos, h, w);
                    let s: f64 = gates
                        .pixel_gates(r, c, ch, dir)
                        .iter()
                        .map(|v| v.as_f64().abs())
                        .sum();
                    row_sum_max = row_sum_max.max(s);
                }
                let wt = step_matrix(gates, dir, ch, step).expect("step within range");
                gershgorin = gershgorin.max(gershgorin_bound(&wt).expect("square"));
                if line <= opts.spectral_max_line {
                    let est = wt
                        .spectral_radius_estimate(opts.power_iterations)
                        .expect("square");
                    rho = Some(rho.map_or(est, |r: f64| r.max(est)));
                }
            }
            steps.push(StepStability {
                direction: dir,
                step,
                row_sum_max,
                gershgorin,
                spectral_radius: rho,
                pass: row_sum_max <= 1.0 + ROW_SUM_TOLERANCE,
            });
        }
    }
    let pass = steps.iter().all(|s| s.pass);
    StabilityReport { steps, pass }
}

/// Cheap per-gate check: largest Σ|p| over every gate set.
pub fn max_abs_gate_sum<T: Scalar>(gates: &GateTensor<T>) -> f64 {
    gates
        .data()
        .chunks(gates.kind().multiplicity())
        .map(|set| set.iter().map(|v| v.as_f64().abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagation::ConnectionKind;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_set(values: [f64; 3]) -> GateTensor<f64> {
        // one interior pixel of a 3x3 map, left-to-right
        let mut g = GateTensor::zeros(3, 3, 1, ConnectionKind::ThreeWay).unwrap();
        for (k, v) in values.iter().enumerate() {
            g.set(1, 1, 0, Direction::LeftToRight, k, *v);
        }
        g
    }

    #[test]
    fn projection_examples() {
        let p = project_gates(&single_set([0.5, 0.4, 0.3])).unwrap();
        let got = p.pixel_gates(1, 1, 0, Direction::LeftToRight);
        let want = [0.5 / 1.2, 0.4 / 1.2, 0.3 / 1.2];
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((got[0] - 0.416_666_666_666_666_7).abs() < 1e-12);
        assert!((got[2] - 0.25).abs() < 1e-15);

        let raw = single_set([0.2, -0.3, 0.4]);
        assert_eq!(project_gates(&raw).unwrap(), raw);

        let raw = single_set([0.0, 0.0, 0.0]);
        assert_eq!(project_gates(&raw).unwrap(), raw);
    }

    #[test]
    fn projection_rejects_nan() {
        let raw = single_set([f64::NAN, 0.0, 0.0]);
        assert!(matches!(project_gates(&raw), Err(SpnError::NonFinite(_))));
    }

    #[test]
    fn gershgorin_examples() {
        let w = DenseMatrix::from_rows(&[&[0.5, 0.3], &[0.2, 0.6]]).unwrap();
        assert!((gershgorin_bound(&w).unwrap() - 0.8).abs() < 1e-15);
        // characteristic polynomial λ² - tr λ + det = 0, computed independently
        let (tr, det) = (0.5 + 0.6, 0.5 * 0.6 - 0.3 * 0.2);
        let disc: f64 = tr * tr - 4.0 * det;
        let rho = if disc >= 0.0 {
            ((tr + disc.sqrt()) / 2.0)
                .abs()
                .max(((tr - disc.sqrt()) / 2.0).abs())
        } else {
            det.sqrt()
        };
        assert!(rho <= 0.8 + 1e-15, "{rho}");
        assert!((w.spectral_radius_estimate(300).unwrap() - rho).abs() < 1e-9);

        assert_eq!(gershgorin_bound(&DenseMatrix::identity(4)).unwrap(), 1.0);
        assert_eq!(gershgorin_bound(&DenseMatrix::zeros(3, 3)).unwrap(), 0.0);
        assert!(gershgorin_bound(&DenseMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn report_flags_unprojected_step() {
        let g = single_set([0.5, 0.5, 0.5]);
        let report = verify_stability(&g);
        assert!(!report.pass);
        let bad: Vec<_> = report.failures().collect();
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].direction, Direction::LeftToRight);
        assert_eq!(bad[0].step, 1);
        assert!((bad[0].row_sum_max - 1.5).abs() < 1e-12);

        let projected = project_gates(&g).unwrap();
        assert!(verify_stability(&projected).pass);
    }

    #[test]
    fn report_csv_has_all_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = GateTensor::<f64>::random(4, 5, 1, ConnectionKind::OneWay, -1.0, 1.0, &mut rng)
            .unwrap();
        let report = verify_stability(&project_gates(&g).unwrap());
        // (5-1) + (5-1) + (4-1) + (4-1)
        assert_eq!(report.steps.len(), 14);
        assert_eq!(report.to_csv().lines().count(), 15);
        assert!(report
            .steps
            .iter()
            .all(|s| s.spectral_radius.unwrap() <= s.gershgorin + 1e-9));
    }

    #[test]
    fn projection_backward_matches_difference_quotient() {
        let raw = [0.9, -0.6, 0.5];
        let up = [0.3, -1.1, 0.7];
        let g = single_set(raw);
        let mut dp = g.zeros_like();
        for (k, v) in up.iter().enumerate() {
            dp.set(1, 1, 0, Direction::LeftToRight, k, *v);
        }
        let dr = project_gates_backward(&g, &dp).unwrap();
        let loss = |r: [f64; 3]| {
            let p = project_gates(&single_set(r)).unwrap();
            let p = p.pixel_gates(1, 1, 0, Direction::LeftToRight);
            p.iter().zip(up).map(|(a, b)| a * b).sum::<f64>()
        };
        for j in 0..3 {
            let eps = 1e-6;
            let mut a = raw;
            let mut b = raw;
            a[j] += eps;
            b[j] -= eps;
            let fd = (loss(a) - loss(b)) / (2.0 * eps);
            let an = dr.get(1, 1, 0, Direction::LeftToRight, j);
            assert!((fd - an).abs() < 1e-8, "{j}: {fd} vs {an}");
        }
    }

    proptest! {
        #[test]
        fn projection_bound_idempotent_and_ratio_preserving(
            a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0,
        ) {
            let g = single_set([a, b, c]);
            let p = project_gates(&g).unwrap();
            let set = p.pixel_gates(1, 1, 0, Direction::LeftToRight).to_vec();
            let s: f64 = set.iter().map(|v| v.abs()).sum();
            prop_assert!(s <= 1.0 + 1e-14);
            prop_assert_eq!(&project_gates(&p).unwrap(), &p);
            let raw = [a, b, c];
            let raw_sum: f64 = raw.iter().map(|v| v.abs()).sum();
            for k in 0..3 {
                prop_assert!(set[k] == 0.0 || set[k].signum() == raw[k].signum());
                if raw_sum > 1.0 {
                    prop_assert!((set[k] * raw_sum - raw[k]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn projected_steps_have_bounded_gershgorin(seed in any::<u64>(), one_way in any::<bool>()) {
            let kind = if one_way { ConnectionKind::OneWay } else { ConnectionKind::ThreeWay };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = GateTensor::<f64>::random(5, 6, 2, kind, -2.0, 2.0, &mut rng).unwrap();
            let report = verify_stability(&project_gates(&g).unwrap());
            prop_assert!(report.pass);
            for s in &report.steps {
                prop_assert!(s.gershgorin <= 1.0 + ROW_SUM_TOLERANCE);
                prop_assert!(s.spectral_radius.unwrap() <= s.gershgorin + 1e-3);
            }
        }
    }
}
