//! Central finite-difference checks of the hand-written reverse passes.
//!
//! Each check draws random coordinates, perturbs them by ±ε in 64-bit
//! arithmetic and compares `(L(θ+ε) − L(θ−ε)) / 2ε` with the analytic
//! derivative. Probes whose ±ε evaluations land on different branches of a
//! piecewise operation (ReLU, max-pool winner, projection) are skipped and
//! counted; drawing continues until the requested number is checked.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Result, SpnError};
use crate::guidance::{net_backward, net_forward, GuidanceArch, GuidanceParams};
use crate::propagation::{spn_backward, spn_forward, ConnectionKind, GateTensor, SpnConfig};
use crate::stability::project_gates;
use crate::tensor::{LabelMap, Map};
use crate::training::{make_coarse, model_backward, model_forward, softmax_xent, Model};
use crate::verify::Fault;

pub const SPN_TOLERANCE: f64 = 1e-4;
pub const NET_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
pub const EPS: f64 = 1e-4;
/// Denominator floor of the relative error, so coordinates whose true
/// derivative vanishes are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: &'static str,
    pub requested: usize,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst: String,
    pub tolerance: f64,
}

impl GradCheckReport {
    fn new(name: &'static str, requested: usize, tolerance: f64) -> Self {
        GradCheckReport {
            name,
            requested,
            checked: 0,
            skipped_kinks: 0,
            max_rel_error: 0.0,
            worst: String::new(),
            tolerance,
        }
    }

    pub fn pass(&self) -> bool {
        self.checked >= self.requested && self.max_rel_error < self.tolerance
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {} coordinates ({} skipped at kinks), max relative error {:.3e} (tolerance {:e}){}",
            self.name,
            self.checked,
            self.skipped_kinks,
            self.max_rel_error,
            self.tolerance,
            if self.worst.is_empty() {
                String::new()
            } else {
                format!(", worst at {}", self.worst)
            }
        )
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        if e > self.max_rel_error || self.checked == 0 {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = format!(
                "{} (analytic {analytic:.6e}, numeric {numeric:.6e})",
                label()
            );
        }
        self.checked += 1;
    }
}

/// Central difference of `eval` along one coordinate. `eval(delta)` returns
/// the loss with the coordinate shifted by `delta` and a branch signature;
/// `None` when the two sides disagree with `base`.
fn probe<S: PartialEq>(
    base: &S,
    mut eval: impl FnMut(f64) -> Result<(f64, S)>,
) -> Result<Option<f64>> {
    let (lp, sp) = eval(EPS)?;
    let (lm, sm) = eval(-EPS)?;
    if &sp != base || &sm != base {
        return Ok(None);
    }
    Ok(Some((lp - lm) / (2.0 * EPS)))
}

fn random_map(
    h: usize,
    w: usize,
    c: usize,
    lo: f64,
    hi: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Map<f64>> {
    Map::from_vec(
        h,
        w,
        c,
        (0..h * w * c).map(|_| rng.gen_range(lo..hi)).collect(),
    )
}

/// Uniform draw over the concatenation of tensors with the given sizes;
/// returns (tensor, index).
fn draw_coordinate(sizes: &[usize], rng: &mut ChaCha8Rng) -> (usize, usize) {
    let mut i = rng.gen_range(0..sizes.iter().sum::<usize>());
    let mut t = 0;
    while i >= sizes[t] {
        i -= sizes[t];
        t += 1;
    }
    (t, i)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn perturb_factor(fault: Fault) -> f64 {
    if fault == Fault::PerturbBackward {
        1.01
    } else {
        1.0
    }
}

/// SPN reverse pass against differences of `Σ r ⊙ spn(x)`, on a two-unit
/// three-way 8×8×2 instance and a one-unit one-way 8×8×1 instance.
pub fn check_spn(seed: u64, coords: usize, fault: Fault) -> Result<GradCheckReport> {
    if coords == 0 {
        return Err(SpnError::Config("need at least one coordinate".into()));
    }
    let mut report = GradCheckReport::new("spn-backward", coords, SPN_TOLERANCE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(11);
    let cases = [
        (
            ConnectionKind::ThreeWay,
            2usize,
            2usize,
            coords - coords / 2,
        ),
        (ConnectionKind::OneWay, 1, 1, coords / 2),
    ];
    for (kind, units, channels, want) in cases {
        if want == 0 {
            continue;
        }
        let cfg = SpnConfig {
            units,
            connection: kind,
            hidden_channels: channels,
            propagation_scale: 1,
        };
        let (h, w) = (8, 8);
        let x = random_map(h, w, channels, -1.0, 1.0, &mut rng)?;
        let gates: Vec<GateTensor<f64>> = (0..units)
            .map(|_| {
                GateTensor::random(h, w, channels, kind, -0.6, 0.6, &mut rng)
                    .and_then(|g| project_gates(&g))
            })
            .collect::<Result<_>>()?;
        let r = random_map(h, w, channels, -1.0, 1.0, &mut rng)?;
        let (_, cache) = spn_forward(&x, &gates, &cfg)?;
        let (dx, dgates) = spn_backward(&r, &cache)?;
        let base: Vec<_> = cache.units.iter().flat_map(|u| u.winners.clone()).collect();

        let eval = |x: &Map<f64>, g: &[GateTensor<f64>]| -> Result<(f64, Vec<_>)> {
            let (out, c) = spn_forward(x, g, &cfg)?;
            Ok((
                dot(out.data(), r.data()),
                c.units.iter().flat_map(|u| u.winners.clone()).collect(),
            ))
        };

        let per_unit = gates[0].len();
        let total = x.len() + units * per_unit;
        let mut done = 0;
        let mut attempts = 0;
        while done < want && attempts < 20 * want {
            attempts += 1;
            let i = rng.gen_range(0..total);
            let (analytic, numeric, label) = if i < x.len() {
                let n = probe(&base, |d| {
                    let mut xp = x.clone();
                    xp.data_mut()[i] += d;
                    eval(&xp, &gates)
                })?;
                (dx.data()[i], n, format!("{kind} x[{i}]"))
            } else {
                let u = (i - x.len()) / per_unit;
                let j = (i - x.len()) % per_unit;
                // structural zeros must stay zero
                let mut trial = gates[u].clone();
                trial.data_mut()[j] = 1.0;
                if trial.validate_boundary().is_err() {
                    continue;
                }
                let n = probe(&base, |d| {
                    let mut gs = gates.clone();
                    gs[u].data_mut()[j] += d;
                    eval(&x, &gs)
                })?;
                (dgates[u].data()[j], n, format!("{kind} unit {u} gate[{j}]"))
            };
            match numeric {
                Some(n) => {
                    report.record(|| label, analytic * perturb_factor(fault), n);
                    done += 1;
                }
                None => report.skipped_kinks += 1,
            }
        }
    }
    Ok(report)
}

/// Guidance-network reverse pass against differences of `Σ r ⊙ gates`.
pub fn check_net(seed: u64, coords: usize, fault: Fault) -> Result<GradCheckReport> {
    if coords == 0 {
        return Err(SpnError::Config("need at least one coordinate".into()));
    }
    let mut report = GradCheckReport::new("net-backward", coords, NET_TOLERANCE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(12);
    let arch = GuidanceArch {
        in_channels: 3,
        encoder: vec![4, 8, 8],
        hidden_channels: 2,
        connection: ConnectionKind::ThreeWay,
        propagation_scale: 2,
    };
    let mut params = GuidanceParams::<f64>::init(&arch, seed)?;
    for conv in params.layers_mut() {
        conv.bias
            .iter_mut()
            .for_each(|b| *b = rng.gen_range(-0.1..0.1));
    }
    let image = random_map(16, 16, 3, 0.0, 1.0, &mut rng)?;
    let (gates, cache) = net_forward(&image, &params)?;
    let r = random_map(1, 1, gates.len(), -1.0, 1.0, &mut rng)?;
    let mut d_gates = gates.zeros_like();
    d_gates.data_mut().copy_from_slice(r.data());
    let grads = net_backward(&d_gates, &cache, &params)?;
    let base = cache.activation_pattern();

    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let names = params.tensor_names();
    let analytic = grads.tensors();
    let mut attempts = 0;
    while report.checked < coords && attempts < 20 * coords {
        attempts += 1;
        let (t, i) = draw_coordinate(&sizes, &mut rng);
        let n = probe(&base, |d| {
            let mut p = params.clone();
            p.tensors_mut()[t][i] += d;
            let (g, c) = net_forward(&image, &p)?;
            Ok((dot(g.data(), r.data()), c.activation_pattern()))
        })?;
        match n {
            Some(n) => report.record(
                || format!("{}[{i}]", names[t]),
                analytic[t][i] * perturb_factor(fault),
                n,
            ),
            None => report.skipped_kinks += 1,
        }
    }
    Ok(report)
}

/// Full chain, softmax loss through post-conv, propagation, pre-conv,
/// projection and the guidance network, on a 16×16 instance. Head weights
/// are enlarged so some gate sets exercise the projection branch.
/// ReLU pattern, max-pool winners and active projection branches.
type Branches = (Vec<bool>, Vec<crate::Direction>, Vec<bool>);

pub fn check_end_to_end(seed: u64, coords: usize, fault: Fault) -> Result<GradCheckReport> {
    if coords == 0 {
        return Err(SpnError::Config("need at least one coordinate".into()));
    }
    let mut report = GradCheckReport::new("end-to-end", coords, END_TO_END_TOLERANCE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(13);
    let cfg = TrainConfig {
        image_size: 16,
        coarse_factor: 4,
        arch: "4,8".into(),
        hidden_channels: 3,
        units: 2,
        seed,
        ..TrainConfig::default()
    };
    let mut model = Model::<f64>::init(&cfg)?;
    model
        .guidance
        .head
        .weight
        .iter_mut()
        .for_each(|w| *w *= 20.0);
    for conv in model.layers_mut() {
        conv.bias
            .iter_mut()
            .for_each(|b| *b = rng.gen_range(-0.1..0.1));
    }
    let image = random_map(16, 16, 3, 0.0, 1.0, &mut rng)?;
    let labels: Vec<u8> = (0..256)
        .map(|i| {
            let (r, c) = ((i / 16) as f64, (i % 16) as f64);
            u8::from((r - 7.5).powi(2) + (c - 6.0).powi(2) < 30.0)
        })
        .collect();
    let gt = LabelMap::new(16, 16, labels)?;
    let coarse = make_coarse::<f64>(&gt, 2, 4, 0)?;
    let npix = 256.0;

    let signature = |m: &Model<f64>| -> Result<(f64, Branches)> {
        let (logits, cache) = model_forward(&image, &coarse, m)?;
        let (loss, _) = softmax_xent(&logits, &gt)?;
        let projected: Vec<bool> = cache
            .raw_gates
            .data()
            .chunks(cache.raw_gates.kind().multiplicity())
            .map(|s| s.iter().map(|v| v.abs()).sum::<f64>() > 1.0)
            .collect();
        Ok((
            loss * npix,
            (cache.net.activation_pattern(), cache.winners(), projected),
        ))
    };
    let (logits, cache) = model_forward(&image, &coarse, &model)?;
    let (_, mut d_logits) = softmax_xent(&logits, &gt)?;
    d_logits.data_mut().iter_mut().for_each(|v| *v *= npix);
    let grads = model_backward(&d_logits, &cache, &model)?;
    let (_, base) = signature(&model)?;
    if !base.2.iter().any(|&p| p) {
        return Err(SpnError::Contract(
            "end-to-end instance never exercises projection".into(),
        ));
    }

    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let names: Vec<String> = model
        .layers()
        .into_iter()
        .flat_map(|(n, _)| [format!("{n}.weight"), format!("{n}.bias")])
        .collect();
    let mut attempts = 0;
    while report.checked < coords && attempts < 20 * coords {
        attempts += 1;
        let (t, i) = draw_coordinate(&sizes, &mut rng);
        let n = probe(&base, |d| {
            let mut m = model.clone();
            m.tensors_mut()[t][i] += d;
            signature(&m)
        })?;
        match n {
            Some(n) => report.record(
                || format!("{}[{i}]", names[t]),
                grads.tensors()[t][i] * perturb_factor(fault),
                n,
            ),
            None => report.skipped_kinks += 1,
        }
    }
    Ok(report)
}

pub fn run_all(seed: u64, coords: usize, fault: Fault) -> Result<Vec<GradCheckReport>> {
    Ok(vec![
        check_spn(seed, coords, fault)?,
        check_net(seed, coords, fault)?,
        check_end_to_end(seed, coords, fault)?,
    ])
}
