//! The refinement pipeline: guidance net → projection → pre-conv → cascaded
//! propagation units → post-conv → logits.
//!
//! The coarse probabilities are resampled to the propagation plane, refined
//! there, and the logits are resampled back to image resolution. All units
//! share one projected gate tensor.

use crate::config::TrainConfig;
use crate::error::{Result, SpnError};
use crate::guidance::{net_backward, net_forward, Conv2d, GuidanceParams, NetCache, PrePostParams};
use crate::propagation::{spn_backward, spn_forward, Direction, GateTensor, ScanCache, SpnConfig};
use crate::stability::{project_gates, project_gates_backward};
use crate::tensor::{bilinear_resize, bilinear_resize_backward, Map, Scalar};

/// Relative noise on the identity-initialized pre/post convolutions. Without
/// it hidden channels beyond the class count would never receive gradient.
pub const PREPOST_INIT_NOISE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub classes: usize,
    pub spn: SpnConfig,
    pub guidance: GuidanceParams<T>,
    pub prepost: PrePostParams<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let spn = cfg.spn();
        Ok(Model {
            classes: cfg.classes,
            guidance: GuidanceParams::init(&cfg.guidance_arch()?, cfg.seed)?,
            prepost: PrePostParams::init(
                cfg.classes,
                spn.hidden_channels,
                PREPOST_INIT_NOISE,
                cfg.seed.wrapping_add(1),
            )?,
            spn,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Model {
            classes: self.classes,
            spn: self.spn.clone(),
            guidance: self.guidance.zeros_like(),
            prepost: self.prepost.zeros_like(),
        }
    }

    /// All layers with their checkpoint names.
    pub fn layers(&self) -> Vec<(String, &Conv2d<T>)> {
        let mut out = self.guidance.layers();
        out.push(("pre".to_string(), &self.prepost.pre));
        out.push(("post".to_string(), &self.prepost.post));
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Conv2d<T>> {
        let mut out = self.guidance.layers_mut();
        out.push(&mut self.prepost.pre);
        out.push(&mut self.prepost.post);
        out
    }

    /// Parameter tensors in a fixed order (weight then bias per layer).
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers()
            .into_iter()
            .flat_map(|(_, c)| [c.weight.as_slice(), c.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers_mut()
            .into_iter()
            .flat_map(|c| [c.weight.as_mut_slice(), c.bias.as_mut_slice()])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn add_scaled(&mut self, other: &Model<T>, scale: T) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let cv = |c: &Conv2d<T>| Conv2d {
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            stride: c.stride,
            weight: c.weight.iter().map(|v| U::lit(v.as_f64())).collect(),
            bias: c.bias.iter().map(|v| U::lit(v.as_f64())).collect(),
        };
        Model {
            classes: self.classes,
            spn: self.spn.clone(),
            guidance: self.guidance.cast(),
            prepost: PrePostParams {
                pre: cv(&self.prepost.pre),
                post: cv(&self.prepost.post),
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelCache<T> {
    pub net: NetCache<T>,
    pub raw_gates: GateTensor<T>,
    pub gates: GateTensor<T>,
    plane_in: Map<T>,
    scan: ScanCache<T>,
    spn_out: Map<T>,
    image_dims: (usize, usize),
}

impl<T: Scalar> ModelCache<T> {
    /// Max-pool winners of every unit, in unit order.
    pub fn winners(&self) -> Vec<Direction> {
        self.scan
            .units
            .iter()
            .flat_map(|u| u.winners.iter().copied())
            .collect()
    }
}

pub fn model_forward<T: Scalar>(
    image: &Map<T>,
    coarse: &Map<T>,
    model: &Model<T>,
) -> Result<(Map<T>, ModelCache<T>)> {
    if coarse.channels() != model.classes
        || coarse.height() != image.height()
        || coarse.width() != image.width()
    {
        return Err(SpnError::Shape(format!(
            "coarse {:?} for image {:?} and {} classes",
            coarse.shape(),
            image.shape(),
            model.classes
        )));
    }
    let (raw_gates, net) = net_forward(image, &model.guidance)?;
    let gates = project_gates(&raw_gates)?;
    let (ph, pw) = (gates.height(), gates.width());
    let plane_in = bilinear_resize(coarse, ph, pw)?;
    let hidden = model.prepost.pre.forward(&plane_in)?;
    let shared = vec![gates.clone(); model.spn.units];
    let (spn_out, scan) = spn_forward(&hidden, &shared, &model.spn)?;
    let plane_logits = model.prepost.post.forward(&spn_out)?;
    let logits = bilinear_resize(&plane_logits, image.height(), image.width())?;
    Ok((
        logits,
        ModelCache {
            net,
            raw_gates,
            gates,
            plane_in,
            scan,
            spn_out,
            image_dims: (image.height(), image.width()),
        },
    ))
}

/// Parameter gradients for an upstream gradient on the logits.
pub fn model_backward<T: Scalar>(
    d_logits: &Map<T>,
    cache: &ModelCache<T>,
    model: &Model<T>,
) -> Result<Model<T>> {
    if (d_logits.height(), d_logits.width()) != cache.image_dims
        || d_logits.channels() != model.classes
    {
        return Err(SpnError::Contract(
            "logit gradient does not match cache".into(),
        ));
    }
    let mut grads = model.zeros_like();
    let (ph, pw) = (cache.gates.height(), cache.gates.width());
    let d_plane_logits = bilinear_resize_backward(d_logits, ph, pw)?;
    let d_spn_out =
        model
            .prepost
            .post
            .backward(&cache.spn_out, &d_plane_logits, &mut grads.prepost.post)?;
    let (d_hidden, unit_gate_grads) = spn_backward(&d_spn_out, &cache.scan)?;
    model
        .prepost
        .pre
        .backward(&cache.plane_in, &d_hidden, &mut grads.prepost.pre)?;
    let mut d_gates = cache.gates.zeros_like();
    for g in &unit_gate_grads {
        d_gates.add_assign(g)?;
    }
    let d_raw = project_gates_backward(&cache.raw_gates, &d_gates)?;
    grads.guidance = net_backward(&d_raw, &cache.net, &model.guidance)?;
    Ok(grads)
}
