//! Toy segmentation refinement: loss, optimizer, IoU, the training loop and
//! inference.

pub mod checkpoint;
pub mod data;
pub mod model;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::TrainConfig;
use crate::error::{Result, SpnError};
use crate::stability::{max_abs_gate_sum, ROW_SUM_TOLERANCE};
use crate::tensor::{LabelMap, Map, Scalar};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{gen_toy_dataset, load_dataset, make_coarse, sample_patch, Dataset, ToySample};
pub use model::{model_backward, model_forward, Model, ModelCache};

/// Mean cross-entropy over pixels and its gradient with respect to the
/// logits, `(softmax - onehot) / pixels`.
pub fn softmax_xent<T: Scalar>(logits: &Map<T>, labels: &LabelMap) -> Result<(f64, Map<T>)> {
    let (h, w, classes) = logits.shape();
    if labels.height() != h || labels.width() != w {
        return Err(SpnError::Shape(format!(
            "logits {h}x{w}, labels {}x{}",
            labels.height(),
            labels.width()
        )));
    }
    if labels.max_label() as usize >= classes {
        return Err(SpnError::Dimension(format!(
            "label {} out of range for {classes} classes",
            labels.max_label()
        )));
    }
    let n = T::lit((h * w) as f64);
    let mut grad = logits.zeros_like();
    let mut loss = 0.0f64;
    for ((px, g), &l) in logits
        .data()
        .chunks(classes)
        .zip(grad.data_mut().chunks_mut(classes))
        .zip(labels.labels())
    {
        let m = px.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (gi, &v) in g.iter_mut().zip(px) {
            *gi = (v - m).exp();
            z += *gi;
        }
        loss += (z.ln() + m - px[l as usize]).as_f64();
        for gi in g.iter_mut() {
            *gi = *gi / z / n;
        }
        g[l as usize] -= T::one() / n;
    }
    Ok((loss / (h * w) as f64, grad))
}

/// Momentum SGD on one tensor: `v ← μ·v − lr·g`, `p ← p + v`.
pub fn sgd_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    lr: T,
    momentum: T,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(SpnError::Shape(format!(
            "sgd: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

/// [`sgd_step`] over every tensor of a model.
pub fn sgd_step_model<T: Scalar>(
    params: &mut Model<T>,
    grads: &Model<T>,
    velocity: &mut Model<T>,
    lr: T,
    momentum: T,
) -> Result<()> {
    let gs = grads.tensors();
    let vs = velocity.tensors_mut();
    let ps = params.tensors_mut();
    if ps.len() != gs.len() || ps.len() != vs.len() {
        return Err(SpnError::Shape("sgd: model structures differ".into()));
    }
    for ((p, g), v) in ps.into_iter().zip(gs).zip(vs) {
        sgd_step(p, g, v, lr, momentum)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Intersection and union counts accumulated over many images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IouAccumulator {
    intersection: Vec<u64>,
    union: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(classes: usize) -> Self {
        IouAccumulator {
            intersection: vec![0; classes],
            union: vec![0; classes],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(SpnError::Shape(
                "prediction and ground truth differ in size".into(),
            ));
        }
        let classes = self.intersection.len();
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            let (p, g) = (p as usize, g as usize);
            if p >= classes || g >= classes {
                return Err(SpnError::Dimension(format!(
                    "label out of range for {classes} classes"
                )));
            }
            if p == g {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> IouReport {
        let per_class: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            1.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        IouReport { per_class, mean }
    }
}

pub fn eval_iou(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<IouReport> {
    let mut acc = IouAccumulator::new(classes);
    acc.add(pred, gt)?;
    Ok(acc.report())
}

/// Argmax restricted to the classes that win somewhere in `coarse`.
pub fn restricted_argmax<T: Scalar>(probs: &Map<T>, coarse: &Map<T>) -> Result<LabelMap> {
    probs.require_same_shape(coarse, "restricted argmax")?;
    let classes = probs.channels();
    let mut allowed = vec![false; classes];
    for &l in coarse.argmax_channels().labels() {
        allowed[l as usize] = true;
    }
    let labels = probs
        .data()
        .chunks(classes)
        .map(|px| {
            let mut best: Option<usize> = None;
            for (k, &v) in px.iter().enumerate() {
                if allowed[k] && best.is_none_or(|b| v > px[b]) {
                    best = Some(k);
                }
            }
            best.unwrap_or(0) as u8
        })
        .collect();
    LabelMap::new(probs.height(), probs.width(), labels)
}

fn softmax_channels<T: Scalar>(logits: &Map<T>) -> Map<T> {
    let mut out = logits.clone();
    for px in out.data_mut().chunks_mut(logits.channels()) {
        let m = px.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in px.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        px.iter_mut().for_each(|v| *v = *v / z);
    }
    out
}

/// Refined class probabilities and labels; classes that never win in the
/// coarse input are suppressed.
pub fn refine<T: Scalar>(
    image: &Map<T>,
    coarse: &Map<T>,
    model: &Model<T>,
) -> Result<(Map<T>, LabelMap)> {
    let (logits, _) = model_forward(image, coarse, model)?;
    let probs = softmax_channels(&logits);
    let labels = restricted_argmax(&probs, coarse)?;
    Ok((probs, labels))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: IouReport,
    pub max_gate_sum: f64,
    pub seconds: f64,
}

impl EpochMetrics {
    pub fn csv_header(classes: usize) -> String {
        let mut s = "epoch,loss".to_string();
        for c in 0..classes {
            let _ = write!(s, ",iou_{c}");
        }
        s.push_str(",mean_iou,seconds");
        s
    }

    fn iou_fields(&self) -> String {
        let mut s = String::new();
        for v in &self.val.per_class {
            match v {
                Some(x) => {
                    let _ = write!(s, ",{x:.6}");
                }
                None => s.push_str(",nan"),
            }
        }
        s
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8}{},{:.6},{:.2}",
            self.epoch,
            self.train_loss,
            self.iou_fields(),
            self.val.mean,
            self.seconds
        )
    }

    /// Everything except wall time, full precision, for reproducibility
    /// comparisons.
    pub fn deterministic_key(&self) -> String {
        format!(
            "{}|{:?}|{:?}|{:?}|{:?}",
            self.epoch,
            self.train_loss.to_bits(),
            self.val
                .per_class
                .iter()
                .map(|v| v.map(f64::to_bits))
                .collect::<Vec<_>>(),
            self.val.mean.to_bits(),
            self.max_gate_sum.to_bits()
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub coarse: IouReport,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_mean_iou: f64,
    pub seconds: f64,
}

/// Evaluates `model` on samples, returning the refined IoU and the largest
/// projected gate sum seen. Samples run in parallel; results are reduced in
/// input order.
pub fn evaluate(
    model: &Model<f32>,
    samples: &[ToySample],
    classes: usize,
) -> Result<(IouReport, f64)> {
    let outputs: Vec<Result<(LabelMap, f64)>> = samples
        .par_iter()
        .map(|s| {
            let (logits, cache) = model_forward(&s.image, &s.coarse, model)?;
            let labels = restricted_argmax(&logits, &s.coarse)?;
            Ok((labels, max_abs_gate_sum(&cache.gates)))
        })
        .collect();
    let mut acc = IouAccumulator::new(classes);
    let mut gate_max = 0.0f64;
    for (s, out) in samples.iter().zip(outputs) {
        let (labels, g) = out?;
        acc.add(&labels, &s.gt)?;
        gate_max = gate_max.max(g);
    }
    Ok((acc.report(), gate_max))
}

/// IoU of the coarse inputs' argmax.
pub fn coarse_iou(samples: &[ToySample], classes: usize) -> Result<IouReport> {
    let mut acc = IouAccumulator::new(classes);
    for s in samples {
        acc.add(&s.coarse.argmax_channels(), &s.gt)?;
    }
    Ok(acc.report())
}

fn gate_stats_dump<T: Scalar>(cache: &ModelCache<T>) -> String {
    let raw = cache.raw_gates.data();
    let finite = raw.iter().filter(|v| v.is_finite()).count();
    let (mut lo, mut hi, mut abs_sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for v in raw.iter().filter(|v| v.is_finite()) {
        let v = v.as_f64();
        lo = lo.min(v);
        hi = hi.max(v);
        abs_sum += v.abs();
    }
    format!(
        "raw gates: {} values, {} non-finite\nmin {lo}\nmax {hi}\nmean |g| {}\nmax projected set sum {}\n",
        raw.len(),
        raw.len() - finite,
        abs_sum / finite.max(1) as f64,
        max_abs_gate_sum(&cache.gates)
    )
}

/// Loss and gradients of one sample.
fn sample_step(model: &Model<f32>, s: &ToySample) -> Result<(f64, Model<f32>, ModelCache<f32>)> {
    let (logits, cache) = model_forward(&s.image, &s.coarse, model)?;
    let (loss, d_logits) = softmax_xent(&logits, &s.gt)?;
    let grads = model_backward(&d_logits, &cache, model)?;
    Ok((loss, grads, cache))
}

/// Trains on the dataset in `cfg.data_dir`, writing `config.txt`,
/// `metrics.csv`, `summary.txt` and the best checkpoint under `cfg.out_dir`.
/// Single-threaded training is bit-reproducible for a fixed configuration.
pub fn train(cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let ds = load_dataset(&cfg.data_dir)?;
    if ds.classes != cfg.classes || ds.image_size != cfg.image_size {
        return Err(SpnError::Config(format!(
            "dataset has {} classes at {}px, config wants {} at {}px",
            ds.classes, ds.image_size, cfg.classes, cfg.image_size
        )));
    }
    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(SpnError::Config("dataset has an empty split".into()));
    }
    train_on(cfg, &ds)
}

/// [`train`] on an already loaded dataset.
pub fn train_on(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainReport> {
    let started = Instant::now();
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    cfg.save(out.join("config.txt"))?;
    let metrics_path = out.join("metrics.csv");
    fs::write(
        &metrics_path,
        format!("{}\n", EpochMetrics::csv_header(cfg.classes)),
    )?;

    let mut model = Model::<f32>::init(cfg)?;
    let mut velocity = model.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x5eed);
    let lr = cfg.lr as f32;
    let momentum = cfg.momentum as f32;
    let crop = cfg.crop_size();

    let coarse = coarse_iou(&ds.val, cfg.classes)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut order: Vec<usize> = (0..ds.train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.zeros_like();
            let mut used = 0usize;
            for &i in batch {
                let sample = &ds.train[i];
                let Some((r, c)) = sample_patch(&sample.gt, crop, &mut rng) else {
                    continue;
                };
                let patch = sample.crop(r, c, crop)?;
                let (loss, g, cache) = sample_step(&model, &patch)?;
                if !loss.is_finite() || !g.is_finite() {
                    let dump = gate_stats_dump(&cache);
                    fs::write(out.join("gate_stats.txt"), &dump)?;
                    return Err(SpnError::Diverged(format!(
                        "epoch {epoch}, sample {i}: loss {loss}\n{dump}"
                    )));
                }
                grads.add_scaled(&g, 1.0);
                loss_sum += loss;
                seen += 1;
                used += 1;
            }
            if used == 0 {
                continue;
            }
            grads.scale(1.0 / used as f32);
            sgd_step_model(&mut model, &grads, &mut velocity, lr, momentum)?;
        }
        let (val, gate_max) = evaluate(&model, &ds.val, cfg.classes)?;
        if gate_max > 1.0 + ROW_SUM_TOLERANCE {
            return Err(SpnError::Contract(format!(
                "epoch {epoch}: projected gate set sums to {gate_max}"
            )));
        }
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            val,
            max_gate_sum: gate_max,
            seconds: t0.elapsed().as_secs_f64(),
        };
        let mut f = fs::OpenOptions::new().append(true).open(&metrics_path)?;
        writeln!(f, "{}", m.csv_row())?;
        if m.val.mean > best.1 {
            best = (epoch, m.val.mean);
            save_checkpoint(out.join("checkpoint"), &model)?;
        }
        epochs.push(m);
    }
    let report = TrainReport {
        coarse,
        epochs,
        best_epoch: best.0,
        best_mean_iou: best.1,
        seconds: started.elapsed().as_secs_f64(),
    };
    write_summary(out, &report)?;
    Ok(report)
}

fn write_summary(out: &Path, r: &TrainReport) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "coarse_mean_iou {:.6}", r.coarse.mean);
    let _ = writeln!(s, "best_epoch {}", r.best_epoch);
    let _ = writeln!(s, "best_mean_iou {:.6}", r.best_mean_iou);
    if let Some(last) = r.epochs.last() {
        let _ = writeln!(s, "final_mean_iou {:.6}", last.val.mean);
    }
    let _ = writeln!(s, "seconds {:.1}", r.seconds);
    fs::write(out.join("summary.txt"), s)?;
    Ok(())
}
