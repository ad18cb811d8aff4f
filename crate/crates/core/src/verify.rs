//! Executable property suites over randomized instances: row sums and the
//! Laplacian split of the dense propagation matrix, scan/oracle agreement,
//! stability after projection, impulse connectivity and the SPN reverse pass.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::affinity::{
    build_dense_g, impulse_response, laplacian_decompose, sparsity_stats, ORACLE_MAX_PIXELS,
};
use crate::dense::DenseMatrix;
use crate::error::{Result, SpnError};
use crate::gradcheck;
use crate::propagation::{propagate_direction, ConnectionKind, Direction, GateTensor};
use crate::stability::{project_gates, verify_stability};
use crate::tensor::Map;

/// Deliberate defects for checking that the suites can fail.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// A nonzero gate on a structurally empty connection.
    BoundaryGate,
    /// Gates used without stability projection.
    SkipProjection,
    /// Degree matrix off by 1e-3 in one entry.
    CorruptDegree,
    /// Analytic gradients scaled by 1.01.
    PerturbBackward,
}

impl Fault {
    pub const ALL: [Fault; 4] = [
        Fault::BoundaryGate,
        Fault::SkipProjection,
        Fault::CorruptDegree,
        Fault::PerturbBackward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Fault::None => "none",
            Fault::BoundaryGate => "boundary-gate",
            Fault::SkipProjection => "skip-projection",
            Fault::CorruptDegree => "corrupt-degree",
            Fault::PerturbBackward => "perturb-backward",
        }
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Fault {
    type Err = SpnError;
    fn from_str(s: &str) -> Result<Self> {
        [Fault::None]
            .into_iter()
            .chain(Fault::ALL)
            .find(|f| f.name() == s)
            .ok_or_else(|| SpnError::Config(format!("unknown fault '{s}'")))
    }
}

pub const ROW_SUM_TOL: f64 = 1e-10;
pub const ORACLE_TOL_F64: f64 = 1e-10;
pub const ORACLE_TOL_F32: f64 = 1e-5;
pub const GERSHGORIN_TOL: f64 = 1e-6;
pub const REPEATED_PROPAGATIONS: usize = 100;

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    /// Largest instance side; instances are drawn from 2..=size.
    pub size: usize,
    pub trials: usize,
    pub seed: u64,
    /// `None` alternates one-way and three-way.
    pub kind: Option<ConnectionKind>,
    pub fault: Fault,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            size: 8,
            trials: 20,
            seed: 0,
            kind: None,
            fault: Fault::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub message: String,
}

impl SuiteResult {
    fn from_outcome(name: &'static str, tolerance: f64, r: Result<(usize, f64, String)>) -> Self {
        match r {
            Ok((cases, max_error, note)) => {
                let pass = max_error <= tolerance;
                let message = if pass {
                    note
                } else {
                    format!("{name} violated: max error {max_error:e} > {tolerance:e}. {note}")
                        .trim_end()
                        .to_string()
                };
                SuiteResult {
                    name,
                    cases,
                    max_error,
                    tolerance,
                    pass,
                    message,
                }
            }
            Err(e) => SuiteResult {
                name,
                cases: 0,
                max_error: f64::NAN,
                tolerance,
                pass: false,
                message: format!("{name} violated: {e}"),
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn pass(&self) -> bool {
        self.suites.iter().all(|s| s.pass)
    }

    pub fn to_csv(&self) -> String {
        let mut s = "suite,cases,max_error,tolerance,pass,message\n".to_string();
        for r in &self.suites {
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{},\"{}\"",
                r.name,
                r.cases,
                r.max_error,
                r.tolerance,
                r.pass,
                r.message.replace('"', "'")
            );
        }
        s
    }
}

/// One randomized instance: projected signed gates and an input in [-1, 1].
pub struct Instance {
    pub gates: GateTensor<f64>,
    pub x: Map<f64>,
}

pub fn random_instance(
    rng: &mut ChaCha8Rng,
    max_side: usize,
    kind: ConnectionKind,
    fault: Fault,
) -> Result<Instance> {
    let h = rng.gen_range(2..=max_side);
    let w = rng.gen_range(2..=max_side);
    let channels = 2;
    let raw = GateTensor::random(h, w, channels, kind, -1.0, 1.0, rng)?;
    let mut gates = if fault == Fault::SkipProjection {
        raw
    } else {
        project_gates(&raw)?
    };
    if fault == Fault::BoundaryGate {
        // first scan line of the left-to-right pass has no predecessor
        gates.set(0, 0, 0, Direction::LeftToRight, 0, 0.25);
    }
    let x = Map::from_vec(
        h,
        w,
        channels,
        (0..h * w * channels)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )?;
    Ok(Instance { gates, x })
}

fn instances(opts: &VerifyOptions, stream: u64) -> Result<Vec<Instance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(stream);
    (0..opts.trials)
        .map(|t| {
            let kind = opts.kind.unwrap_or(if t % 2 == 0 {
                ConnectionKind::OneWay
            } else {
                ConnectionKind::ThreeWay
            });
            random_instance(&mut rng, opts.size, kind, opts.fault)
        })
        .collect()
}

/// Every row of G sums to one.
fn suite_row_sums(insts: &[Instance]) -> Result<(usize, f64, String)> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for inst in insts {
        for dir in Direction::ALL {
            for ch in 0..inst.gates.channels() {
                let ga = build_dense_g(&inst.gates, dir, ch)?;
                for s in ga.g.row_sums() {
                    worst = worst.max((s - 1.0).abs());
                }
                cases += 1;
            }
        }
    }
    Ok((cases, worst, String::new()))
}

fn corrupt(lap: &mut crate::affinity::Laplacian) -> Result<()> {
    let v = lap.d.get(0, 0);
    lap.d.set(0, 0, v + 1e-3);
    lap.l = lap.d.sub(&lap.a)?;
    Ok(())
}

/// `G = I - L` with `L = D - A`, and every row of `L` sums to zero.
fn suite_laplacian(insts: &[Instance], fault: Fault) -> Result<(usize, f64, String)> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for inst in insts {
        for dir in Direction::ALL {
            for ch in 0..inst.gates.channels() {
                let ga = build_dense_g(&inst.gates, dir, ch)?;
                let mut lap = laplacian_decompose(&ga)?;
                if fault == Fault::CorruptDegree {
                    corrupt(&mut lap)?;
                }
                let i_minus_l = DenseMatrix::identity(ga.n()).sub(&lap.l)?;
                worst = worst.max(i_minus_l.max_abs_diff(&ga.g));
                for s in lap.l.row_sums() {
                    worst = worst.max(s.abs());
                }
                cases += 1;
            }
        }
    }
    Ok((cases, worst, String::new()))
}

/// Scan output against the diffusion step `(I - L) vec(x)`, in 64-bit and
/// 32-bit arithmetic. Returns the worst errors relative to each tolerance.
fn suite_scan_oracle(insts: &[Instance], fault: Fault) -> Result<(usize, f64, String)> {
    let mut worst64 = 0.0f64;
    let mut worst32 = 0.0f64;
    let mut cases = 0;
    for inst in insts {
        let gates32 = inst.gates.cast::<f32>();
        let x32 = inst.x.cast::<f32>();
        for dir in Direction::ALL {
            let h64 = propagate_direction(&inst.x, &inst.gates, dir)?;
            let h32 = propagate_direction(&x32, &gates32, dir)?;
            for ch in 0..inst.gates.channels() {
                let ga = build_dense_g(&inst.gates, dir, ch)?;
                let mut lap = laplacian_decompose(&ga)?;
                if fault == Fault::CorruptDegree {
                    corrupt(&mut lap)?;
                }
                let xv = ga.vectorize(&inst.x.channel(ch)?)?;
                let want = ga.unvectorize(&lap.diffuse(&xv)?)?;
                for r in 0..inst.x.height() {
                    for c in 0..inst.x.width() {
                        let o = want.at(r, c, 0);
                        worst64 = worst64.max((h64.at(r, c, ch) - o).abs());
                        worst32 = worst32.max((h32.at(r, c, ch) as f64 - o).abs());
                    }
                }
                cases += 1;
            }
        }
    }
    // report on the 64-bit scale: a 32-bit miss maps above the tolerance
    let scaled32 = worst32 / ORACLE_TOL_F32 * ORACLE_TOL_F64;
    Ok((
        cases,
        worst64.max(scaled32),
        format!("64-bit max {worst64:e}; 32-bit max {worst32:e}"),
    ))
}

/// Gershgorin bound of every step matrix after projection, and repeated
/// propagation of bounded inputs with nonnegative gates.
fn suite_stability(insts: &[Instance]) -> Result<(usize, f64, String)> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    let mut overshoot = 0.0f64;
    for inst in insts {
        let report = verify_stability(&inst.gates);
        for s in &report.steps {
            worst = worst.max(s.gershgorin - 1.0);
            cases += 1;
        }
        let mut nonneg = inst.gates.clone();
        nonneg.data_mut().iter_mut().for_each(|v| *v = v.abs());
        for dir in Direction::ALL {
            let mut h = inst.x.clone();
            for _ in 0..REPEATED_PROPAGATIONS {
                h = propagate_direction(&h, &nonneg, dir)?;
            }
            let m = h.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            overshoot = overshoot.max(m - 1.0);
        }
    }
    Ok((
        cases,
        worst.max(overshoot),
        format!("max Gershgorin excess {worst:e}; max |h| - 1 after {REPEATED_PROPAGATIONS} passes {overshoot:e}"),
    ))
}

/// Cells of the clipped fan reachable from an impulse at (`row`, `col`).
pub fn predicted_support(
    kind: ConnectionKind,
    dir: Direction,
    height: usize,
    width: usize,
    row: usize,
    col: usize,
) -> Vec<bool> {
    let (s0, p0) = dir.step_pos(row, col, height, width);
    let mut out = vec![false; height * width];
    for r in 0..height {
        for c in 0..width {
            let (s, p) = dir.step_pos(r, c, height, width);
            out[r * width + c] = s >= s0
                && match kind {
                    ConnectionKind::OneWay => p == p0,
                    ConnectionKind::ThreeWay => p.abs_diff(p0) <= s - s0,
                };
        }
    }
    out
}

/// Impulse supports match the predicted line/fan shapes, and three-way
/// affinity is denser than one-way at equal gate magnitude.
fn suite_connectivity(seed: u64, fault: Fault) -> Result<(usize, f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let (h, w) = (9, 11);
    let mut mismatches = 0usize;
    let mut cases = 0;
    for kind in [ConnectionKind::OneWay, ConnectionKind::ThreeWay] {
        // Σp < 1 keeps the impulse's own pixel alive
        let scale = 0.9 / kind.multiplicity() as f64;
        let mut gates = GateTensor::random(h, w, 1, kind, 0.05 * scale, scale, &mut rng)?;
        if fault == Fault::BoundaryGate {
            gates.set(0, 0, 0, Direction::LeftToRight, 0, 0.25);
        }
        for dir in Direction::ALL {
            for _ in 0..3 {
                let (r, c) = (rng.gen_range(0..h), rng.gen_range(0..w));
                let got = impulse_response(&gates, dir, r, c)?;
                let want = predicted_support(kind, dir, h, w, r, c);
                mismatches += got
                    .data()
                    .iter()
                    .zip(&want)
                    .filter(|(g, w)| (**g > 0.0) != **w)
                    .count();
                cases += 1;
            }
        }
    }
    let mut density = [0.0f64; 2];
    for (i, kind) in [ConnectionKind::OneWay, ConnectionKind::ThreeWay]
        .into_iter()
        .enumerate()
    {
        let gates = GateTensor::<f64>::constant(h, w, 1, kind, 0.3 / kind.multiplicity() as f64)?;
        let a = build_dense_g(&gates, Direction::LeftToRight, 0)?.affinity();
        density[i] = sparsity_stats(&a, w.max(h))?.nonzero_fraction;
    }
    let denser = density[1] > density[0];
    let err = mismatches as f64 + if denser { 0.0 } else { 1.0 };
    Ok((
        cases,
        err,
        format!(
            "support mismatches {mismatches}; nonzero fraction one-way {:.4}, three-way {:.4}",
            density[0], density[1]
        ),
    ))
}

pub fn run_verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    if opts.size < 2 || opts.size * opts.size > ORACLE_MAX_PIXELS {
        return Err(SpnError::Dimension(format!(
            "size {} outside 2..={}",
            opts.size,
            (ORACLE_MAX_PIXELS as f64).sqrt() as usize
        )));
    }
    if opts.trials == 0 {
        return Err(SpnError::Config("trials must be positive".into()));
    }
    let insts = instances(opts, 1);
    let insts = match insts {
        Ok(v) => v,
        Err(e) => {
            return Ok(VerifyReport {
                suites: vec![SuiteResult::from_outcome("instances", 0.0, Err(e))],
            })
        }
    };
    let grad = gradcheck::check_spn(opts.seed, 40, opts.fault);
    let suites = vec![
        SuiteResult::from_outcome("row-sum", ROW_SUM_TOL, suite_row_sums(&insts)),
        SuiteResult::from_outcome(
            "laplacian",
            ROW_SUM_TOL,
            suite_laplacian(&insts, opts.fault),
        ),
        SuiteResult::from_outcome(
            "scan-oracle",
            ORACLE_TOL_F64,
            suite_scan_oracle(&insts, opts.fault),
        ),
        SuiteResult::from_outcome("stability", GERSHGORIN_TOL, suite_stability(&insts)),
        SuiteResult::from_outcome(
            "connectivity",
            0.0,
            suite_connectivity(opts.seed, opts.fault),
        ),
        SuiteResult::from_outcome(
            "spn-backward",
            gradcheck::SPN_TOLERANCE,
            grad.map(|r| (r.checked, r.max_rel_error, r.summary())),
        ),
    ];
    Ok(VerifyReport { suites })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_names_roundtrip() {
        for f in Fault::ALL {
            assert_eq!(f.name().parse::<Fault>().unwrap(), f);
        }
        assert!("melt".parse::<Fault>().is_err());
    }

    #[test]
    fn fan_prediction_small() {
        // impulse at (1, 1) of a 3×4 map, scanning left to right
        let s = predicted_support(ConnectionKind::ThreeWay, Direction::LeftToRight, 3, 4, 1, 1);
        let want = [
            false, false, true, true, //
            false, true, true, true, //
            false, false, true, true,
        ];
        assert_eq!(s, want);
        let s = predicted_support(ConnectionKind::ThreeWay, Direction::BottomToTop, 4, 5, 3, 0);
        let rows: Vec<Vec<bool>> = s.chunks(5).map(|r| r.to_vec()).collect();
        assert_eq!(rows[3], vec![true, false, false, false, false]);
        assert_eq!(rows[2], vec![true, true, false, false, false]);
        assert_eq!(rows[0], vec![true, true, true, true, false]);
    }

    #[test]
    fn clean_run_passes() {
        let r = run_verify(&VerifyOptions {
            size: 6,
            trials: 6,
            ..VerifyOptions::default()
        })
        .unwrap();
        assert!(r.pass(), "{}", r.to_csv());
    }

    #[test]
    fn oversize_rejected() {
        let opts = VerifyOptions {
            size: 21,
            ..VerifyOptions::default()
        };
        assert!(matches!(run_verify(&opts), Err(SpnError::Dimension(_))));
    }
}
