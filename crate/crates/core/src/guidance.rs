//! Guidance CNN that maps an image to raw gate tensors, plus the feature
//! convolutions placed before and after the propagation units.
//!
//! The network is an encoder of stride-2 3×3 convolutions with ReLU, followed
//! by a decoder of bilinear 2× upsampling + 3×3 convolution + ReLU, with
//! skip links summing encoder and decoder features of equal resolution. The
//! decoder stops at the propagation plane, where a linear 3×3 head emits
//! `hidden_channels × connections × 4` channels. Forward and reverse passes
//! are written out by hand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SpnError};
use crate::propagation::{ConnectionKind, GateTensor};
use crate::tensor::{bilinear_resize, bilinear_resize_backward, Map, Scalar};

/// Scale applied to the head's initial weights so starting gates are small.
pub const HEAD_INIT_SCALE: f64 = 0.1;

/// 3×3 convolution with zero padding 1. Weights are stored
/// `[ky][kx][in][out]`, output channel fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Conv2d {
            in_channels,
            out_channels,
            stride,
            weight: vec![T::zero(); 9 * in_channels * out_channels],
            bias: vec![T::zero(); out_channels],
        }
    }

    /// Zero-mean uniform fan-in initialization, bound `sqrt(3 / fan_in)`,
    /// multiplied by `scale`; zero bias.
    pub fn init<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, stride);
        let bound = (3.0 / (9 * in_channels) as f64).sqrt() * scale;
        if bound <= 0.0 {
            return conv;
        }
        for w in conv.weight.iter_mut() {
            *w = T::lit(rng.gen_range(-bound..bound));
        }
        conv
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_channels, self.out_channels, self.stride)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    #[inline]
    fn w_index(&self, ky: usize, kx: usize, ci: usize) -> usize {
        ((ky * 3 + kx) * self.in_channels + ci) * self.out_channels
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    pub fn forward(&self, x: &Map<T>) -> Result<Map<T>> {
        if x.channels() != self.in_channels {
            return Err(SpnError::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        let (h, w) = (x.height(), x.width());
        let (oh, ow) = self.output_dims(h, w);
        let co = self.out_channels;
        let mut out = Map::zeros(oh, ow, co)?;
        let xd = x.data();
        let od = out.data_mut();
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (oy * ow + ox) * co;
                let acc = &mut od[o..o + co];
                acc.copy_from_slice(&self.bias);
                for ky in 0..3 {
                    let iy = (oy * self.stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * self.stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xi = (iy as usize * w + ix as usize) * self.in_channels;
                        for ci in 0..self.in_channels {
                            let v = xd[xi + ci];
                            if v == T::zero() {
                                continue;
                            }
                            let wi = self.w_index(ky, kx, ci);
                            for (a, &wv) in acc.iter_mut().zip(&self.weight[wi..wi + co]) {
                                *a += v * wv;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Accumulates weight and bias gradients into `grad`; returns `dL/dx`.
    pub fn backward(&self, x: &Map<T>, d_out: &Map<T>, grad: &mut Conv2d<T>) -> Result<Map<T>> {
        let (h, w) = (x.height(), x.width());
        let (oh, ow) = self.output_dims(h, w);
        if d_out.shape() != (oh, ow, self.out_channels) || x.channels() != self.in_channels {
            return Err(SpnError::Shape(format!(
                "conv backward: input {:?}, gradient {:?}",
                x.shape(),
                d_out.shape()
            )));
        }
        let co = self.out_channels;
        let mut dx = x.zeros_like();
        let xd = x.data();
        let gd = d_out.data();
        let dxd = dx.data_mut();
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (oy * ow + ox) * co;
                let g = &gd[o..o + co];
                for (b, &gv) in grad.bias.iter_mut().zip(g) {
                    *b += gv;
                }
                for ky in 0..3 {
                    let iy = (oy * self.stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * self.stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xi = (iy as usize * w + ix as usize) * self.in_channels;
                        for ci in 0..self.in_channels {
                            let wi = self.w_index(ky, kx, ci);
                            let wrow = &self.weight[wi..wi + co];
                            let mut s = T::zero();
                            for (&wv, &gv) in wrow.iter().zip(g) {
                                s += wv * gv;
                            }
                            dxd[xi + ci] += s;
                            let v = xd[xi + ci];
                            if v != T::zero() {
                                for (dw, &gv) in grad.weight[wi..wi + co].iter_mut().zip(g) {
                                    *dw += v * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(dx)
    }
}

fn relu<T: Scalar>(mut m: Map<T>) -> Map<T> {
    m.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
    m
}

/// Zeroes `grad` where the ReLU output was not positive.
fn relu_backward<T: Scalar>(activated: &Map<T>, grad: &mut Map<T>) {
    for (g, &a) in grad.data_mut().iter_mut().zip(activated.data()) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

fn add_in_place<T: Scalar>(a: &mut Map<T>, b: &Map<T>) {
    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

/// Shape of the guidance network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GuidanceArch {
    pub in_channels: usize,
    /// Output channels of the stride-2 encoder convolutions.
    pub encoder: Vec<usize>,
    pub hidden_channels: usize,
    pub connection: ConnectionKind,
    /// Power of two, at most `2^encoder.len()`.
    pub propagation_scale: usize,
}

impl GuidanceArch {
    /// Parses an encoder channel list such as `"8,16,32"`.
    pub fn parse_encoder(s: &str) -> Result<Vec<usize>> {
        let chans = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&c| c > 0)
                    .ok_or_else(|| SpnError::Config(format!("bad encoder channel '{t}' in '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        if chans.is_empty() {
            return Err(SpnError::Config("empty encoder".into()));
        }
        Ok(chans)
    }

    pub fn encoder_string(&self) -> String {
        self.encoder
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn depth(&self) -> usize {
        self.encoder.len()
    }

    /// log2 of the propagation scale.
    pub fn plane_level(&self) -> usize {
        self.propagation_scale.trailing_zeros() as usize
    }

    pub fn head_channels(&self) -> usize {
        self.hidden_channels * self.connection.multiplicity() * 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.hidden_channels == 0 || self.encoder.contains(&0) {
            return Err(SpnError::Config("channel counts must be positive".into()));
        }
        if self.encoder.is_empty() {
            return Err(SpnError::Config("encoder needs at least one layer".into()));
        }
        if !self.propagation_scale.is_power_of_two() || self.plane_level() > self.depth() {
            return Err(SpnError::Config(format!(
                "propagation scale {} must be a power of two no larger than 2^{}",
                self.propagation_scale,
                self.depth()
            )));
        }
        Ok(())
    }

    /// Feature channels at resolution level `l` of the decoder.
    fn level_channels(&self, l: usize) -> usize {
        if l == 0 {
            self.encoder[0]
        } else {
            self.encoder[l - 1]
        }
    }

    /// Required divisor of image height and width.
    pub fn input_multiple(&self) -> usize {
        1 << self.depth()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceParams<T> {
    pub arch: GuidanceArch,
    pub encoder: Vec<Conv2d<T>>,
    /// Ordered from the coarsest level up to the propagation plane.
    pub decoder: Vec<Conv2d<T>>,
    pub head: Conv2d<T>,
}

impl<T: Scalar> GuidanceParams<T> {
    pub fn init(arch: &GuidanceArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::new();
        let mut cin = arch.in_channels;
        for &c in &arch.encoder {
            encoder.push(Conv2d::init(cin, c, 2, 1.0, &mut rng));
            cin = c;
        }
        let mut decoder = Vec::new();
        for l in (arch.plane_level()..arch.depth()).rev() {
            let cout = arch.level_channels(l);
            decoder.push(Conv2d::init(cin, cout, 1, 1.0, &mut rng));
            cin = cout;
        }
        let head = Conv2d::init(cin, arch.head_channels(), 1, HEAD_INIT_SCALE, &mut rng);
        Ok(GuidanceParams {
            arch: arch.clone(),
            encoder,
            decoder,
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        GuidanceParams {
            arch: self.arch.clone(),
            encoder: self.encoder.iter().map(Conv2d::zeros_like).collect(),
            decoder: self.decoder.iter().map(Conv2d::zeros_like).collect(),
            head: self.head.zeros_like(),
        }
    }

    /// Layers in checkpoint order with stable names.
    pub fn layers(&self) -> Vec<(String, &Conv2d<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.encoder.iter().enumerate() {
            out.push((format!("guidance.enc{i}"), c));
        }
        for (i, c) in self.decoder.iter().enumerate() {
            out.push((format!("guidance.dec{i}"), c));
        }
        out.push(("guidance.head".to_string(), &self.head));
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Conv2d<T>> {
        let mut out: Vec<&mut Conv2d<T>> = self.encoder.iter_mut().collect();
        out.extend(self.decoder.iter_mut());
        out.push(&mut self.head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(_, c)| c.param_count()).sum()
    }

    /// Parameter tensors, weight then bias per layer.
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

    pub fn tensor_names(&self) -> Vec<String> {
        self.layers()
            .into_iter()
            .flat_map(|(n, _)| [format!("{n}.weight"), format!("{n}.bias")])
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> GuidanceParams<U> {
        let cv = |c: &Conv2d<T>| Conv2d {
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            stride: c.stride,
            weight: c.weight.iter().map(|v| U::lit(v.as_f64())).collect(),
            bias: c.bias.iter().map(|v| U::lit(v.as_f64())).collect(),
        };
        GuidanceParams {
            arch: self.arch.clone(),
            encoder: self.encoder.iter().map(cv).collect(),
            decoder: self.decoder.iter().map(cv).collect(),
            head: cv(&self.head),
        }
    }
}

/// Activations retained by [`net_forward`].
#[derive(Clone, Debug)]
pub struct NetCache<T> {
    image: Map<T>,
    /// Post-ReLU encoder outputs, level 1..=depth.
    enc_out: Vec<Map<T>>,
    /// Upsampled inputs of each decoder convolution.
    dec_in: Vec<Map<T>>,
    /// Post-ReLU decoder activations, before the skip sum.
    dec_act: Vec<Map<T>>,
    head_in: Map<T>,
}

impl<T: Scalar> NetCache<T> {
    /// One bit per ReLU unit: whether it was active. Used to detect finite
    /// difference probes that straddle a kink.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.enc_out
            .iter()
            .chain(&self.dec_act)
            .flat_map(|m| m.data().iter().map(|&v| v > T::zero()))
            .collect()
    }
}

/// Image → raw (unprojected) gates on the propagation plane. Structurally
/// out-of-bounds gate positions are zeroed.
pub fn net_forward<T: Scalar>(
    image: &Map<T>,
    params: &GuidanceParams<T>,
) -> Result<(GateTensor<T>, NetCache<T>)> {
    let arch = &params.arch;
    let m = arch.input_multiple();
    if !image.height().is_multiple_of(m) || !image.width().is_multiple_of(m) {
        return Err(SpnError::Dimension(format!(
            "image {}x{} must be divisible by {m}",
            image.height(),
            image.width()
        )));
    }
    if image.channels() != arch.in_channels {
        return Err(SpnError::Shape(format!(
            "guidance expects {} channels, image has {}",
            arch.in_channels,
            image.channels()
        )));
    }
    let mut enc_out = Vec::with_capacity(arch.depth());
    let mut cur = image.clone();
    for conv in &params.encoder {
        cur = relu(conv.forward(&cur)?);
        enc_out.push(cur.clone());
    }
    let mut dec_in = Vec::new();
    let mut dec_act = Vec::new();
    for (conv, l) in params
        .decoder
        .iter()
        .zip((arch.plane_level()..arch.depth()).rev())
    {
        let (th, tw) = (image.height() >> l, image.width() >> l);
        let up = bilinear_resize(&cur, th, tw)?;
        let act = relu(conv.forward(&up)?);
        dec_in.push(up);
        let mut next = act.clone();
        if l >= 1 {
            add_in_place(&mut next, &enc_out[l - 1]);
        }
        dec_act.push(act);
        cur = next;
    }
    let head_out = params.head.forward(&cur)?;
    let mut gates = GateTensor::from_map(head_out, arch.connection)?;
    gates.zero_boundary();
    Ok((
        gates,
        NetCache {
            image: image.clone(),
            enc_out,
            dec_in,
            dec_act,
            head_in: cur,
        },
    ))
}

/// Exact parameter gradients for an upstream gradient on the raw gates.
pub fn net_backward<T: Scalar>(
    d_gates: &GateTensor<T>,
    cache: &NetCache<T>,
    params: &GuidanceParams<T>,
) -> Result<GuidanceParams<T>> {
    let arch = &params.arch;
    let (ph, pw) = (
        cache.image.height() / arch.propagation_scale,
        cache.image.width() / arch.propagation_scale,
    );
    if d_gates.height() != ph
        || d_gates.width() != pw
        || d_gates.channels() != arch.hidden_channels
        || d_gates.kind() != arch.connection
        || cache.enc_out.len() != params.encoder.len()
        || cache.dec_in.len() != params.decoder.len()
    {
        return Err(SpnError::Contract(
            "guidance cache does not match gradient".into(),
        ));
    }
    let mut grads = params.zeros_like();
    let mut masked = d_gates.clone();
    masked.zero_boundary();
    let d_head_out = masked.into_map();
    let mut d_cur = params
        .head
        .backward(&cache.head_in, &d_head_out, &mut grads.head)?;

    // skip-link gradients for encoder levels, indexed by level - 1
    let mut d_enc: Vec<Option<Map<T>>> = vec![None; params.encoder.len()];
    let levels: Vec<usize> = (arch.plane_level()..arch.depth()).rev().collect();
    for (i, &l) in levels.iter().enumerate().rev() {
        if l >= 1 {
            d_enc[l - 1] = Some(d_cur.clone());
        }
        let mut d_act = d_cur;
        relu_backward(&cache.dec_act[i], &mut d_act);
        let d_up = params.decoder[i].backward(&cache.dec_in[i], &d_act, &mut grads.decoder[i])?;
        let (sh, sw) = (
            cache.image.height() >> (l + 1),
            cache.image.width() >> (l + 1),
        );
        d_cur = bilinear_resize_backward(&d_up, sh, sw)?;
    }
    // d_cur now belongs to the deepest encoder output, whether or not a
    // decoder ran
    let depth = params.encoder.len();
    let mut d_level = d_cur;
    for i in (0..depth).rev() {
        if let Some(skip) = d_enc[i].take() {
            add_in_place(&mut d_level, &skip);
        }
        let mut d_act = d_level;
        relu_backward(&cache.enc_out[i], &mut d_act);
        let input = if i == 0 {
            &cache.image
        } else {
            &cache.enc_out[i - 1]
        };
        d_level = params.encoder[i].backward(input, &d_act, &mut grads.encoder[i])?;
    }
    Ok(grads)
}

/// Feature convolutions around the propagation units.
#[derive(Clone, Debug, PartialEq)]
pub struct PrePostParams<T> {
    /// classes → hidden channels.
    pub pre: Conv2d<T>,
    /// hidden channels → classes.
    pub post: Conv2d<T>,
}

impl<T: Scalar> PrePostParams<T> {
    /// Identity-like initialization (hidden channel `i` carries class `i`)
    /// plus uniform noise of relative amplitude `noise`.
    pub fn init(classes: usize, hidden: usize, noise: f64, seed: u64) -> Result<Self> {
        if classes == 0 || hidden == 0 {
            return Err(SpnError::Config(
                "pre/post channels must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pre = Conv2d::init(classes, hidden, 1, noise, &mut rng);
        let mut post = Conv2d::init(hidden, classes, 1, noise, &mut rng);
        for i in 0..classes.min(hidden) {
            let wi = pre.w_index(1, 1, i) + i;
            pre.weight[wi] += T::one();
            let wi = post.w_index(1, 1, i) + i;
            post.weight[wi] += T::one();
        }
        Ok(PrePostParams { pre, post })
    }

    pub fn zeros_like(&self) -> Self {
        PrePostParams {
            pre: self.pre.zeros_like(),
            post: self.post.zeros_like(),
        }
    }
}
