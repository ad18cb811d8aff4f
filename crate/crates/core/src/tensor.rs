//! Dense H×W×C grids and bilinear resampling.
//!
//! Storage is row-major `(row, column, channel)` with the channel index
//! fastest. Every grid in the crate (images, feature maps, hidden states,
//! probability maps) uses this layout.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Result, SpnError};

/// Element type of a file payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type: `f32` for normal runs, `f64` for oracle
/// verification and gradient checks.
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    const DTYPE: DType;

    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn put_le(self, out: &mut Vec<u8>);
    fn get_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

pub(crate) fn checked_len(dims: &[usize]) -> Result<usize> {
    let mut n: usize = 1;
    for &d in dims {
        if d == 0 {
            return Err(SpnError::Dimension(format!("zero dimension in {dims:?}")));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| SpnError::Dimension(format!("dimensions {dims:?} overflow")))?;
    }
    Ok(n)
}

/// An H×W×C grid of scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct Map<T = f32> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> Map<T> {
    /// A map with every entry equal to `fill`.
    pub fn new(height: usize, width: usize, channels: usize, fill: T) -> Result<Self> {
        let len = checked_len(&[height, width, channels])?;
        if !fill.is_finite() {
            return Err(SpnError::NonFinite(format!("fill value {fill}")));
        }
        Ok(Map {
            height,
            width,
            channels,
            data: vec![fill; len],
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(height, width, channels, T::zero())
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        let len = checked_len(&[height, width, channels])?;
        if data.len() != len {
            return Err(SpnError::Shape(format!(
                "{height}x{width}x{channels} map needs {len} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(SpnError::NonFinite(format!("entry {i}")));
        }
        Ok(Map {
            height,
            width,
            channels,
            data,
        })
    }

    /// Same shape as `self`, all zeros.
    pub fn zeros_like(&self) -> Self {
        Map {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        debug_assert!(row < self.height && col < self.width && ch < self.channels);
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, ch: usize) -> T {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: T) {
        let i = self.index(row, col, ch);
        self.data[i] = v;
    }

    /// The channels of one pixel.
    pub fn pixel(&self, row: usize, col: usize) -> &[T] {
        let i = self.index(row, col, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape<U>(&self, other: &Map<U>) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub(crate) fn require_same_shape<U>(&self, other: &Map<U>, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(SpnError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                (other.height, other.width, other.channels)
            )))
        }
    }

    /// Extracts one channel as a single-channel map.
    pub fn channel(&self, ch: usize) -> Result<Map<T>> {
        if ch >= self.channels {
            return Err(SpnError::Dimension(format!(
                "channel {ch} out of range for {} channels",
                self.channels
            )));
        }
        let data = self
            .data
            .iter()
            .skip(ch)
            .step_by(self.channels)
            .copied()
            .collect();
        Ok(Map {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn cast<U: Scalar>(&self) -> Map<U> {
        Map {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Mirror left/right.
    pub fn flip_horizontal(&self) -> Map<T> {
        let mut out = self.zeros_like();
        for r in 0..self.height {
            for c in 0..self.width {
                let src = self.index(r, self.width - 1 - c, 0);
                let dst = self.index(r, c, 0);
                out.data[dst..dst + self.channels]
                    .copy_from_slice(&self.data[src..src + self.channels]);
            }
        }
        out
    }

    /// Mirror top/bottom.
    pub fn flip_vertical(&self) -> Map<T> {
        let mut out = self.zeros_like();
        let row_len = self.width * self.channels;
        for r in 0..self.height {
            let src = (self.height - 1 - r) * row_len;
            out.data[r * row_len..(r + 1) * row_len]
                .copy_from_slice(&self.data[src..src + row_len]);
        }
        out
    }

    /// Copies the `size_h × size_w` window starting at (`row`, `col`).
    pub fn crop(&self, row: usize, col: usize, size_h: usize, size_w: usize) -> Result<Map<T>> {
        if size_h == 0 || size_w == 0 || row + size_h > self.height || col + size_w > self.width {
            return Err(SpnError::Dimension(format!(
                "crop {size_h}x{size_w} at ({row},{col}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(size_h * size_w * self.channels);
        for r in row..row + size_h {
            let start = self.index(r, col, 0);
            data.extend_from_slice(&self.data[start..start + size_w * self.channels]);
        }
        Ok(Map {
            height: size_h,
            width: size_w,
            channels: self.channels,
            data,
        })
    }

    /// Per-pixel argmax over channels; ties go to the lowest channel.
    pub fn argmax_channels(&self) -> LabelMap {
        let labels = self
            .data
            .chunks(self.channels)
            .map(|px| {
                let mut best = 0;
                for (k, &v) in px.iter().enumerate() {
                    if v > px[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap {
            height: self.height,
            width: self.width,
            labels,
        }
    }
}

/// Integer class labels, one per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        let len = checked_len(&[height, width])?;
        if labels.len() != len {
            return Err(SpnError::Shape(format!(
                "{height}x{width} label map needs {len} labels, got {}",
                labels.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Result<Self> {
        let len = checked_len(&[height, width])?;
        Ok(LabelMap {
            height,
            width,
            labels: vec![label; len],
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }
    #[inline]
    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }
    #[inline]
    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        self.labels[row * self.width + col] = label;
    }

    pub fn crop(&self, row: usize, col: usize, size_h: usize, size_w: usize) -> Result<LabelMap> {
        if size_h == 0 || size_w == 0 || row + size_h > self.height || col + size_w > self.width {
            return Err(SpnError::Dimension(format!(
                "crop {size_h}x{size_w} at ({row},{col}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut labels = Vec::with_capacity(size_h * size_w);
        for r in row..row + size_h {
            labels.extend_from_slice(
                &self.labels[r * self.width + col..r * self.width + col + size_w],
            );
        }
        Ok(LabelMap {
            height: size_h,
            width: size_w,
            labels,
        })
    }

    /// Number of distinct labels present.
    pub fn distinct(&self) -> usize {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        seen.iter().filter(|&&s| s).count()
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// One-hot encoding with `classes` channels.
    pub fn one_hot<T: Scalar>(&self, classes: usize) -> Result<Map<T>> {
        if classes == 0 || self.max_label() as usize >= classes {
            return Err(SpnError::Dimension(format!(
                "label {} out of range for {classes} classes",
                self.max_label()
            )));
        }
        let mut out = Map::zeros(self.height, self.width, classes)?;
        for (i, &l) in self.labels.iter().enumerate() {
            out.data_mut()[i * classes + l as usize] = T::one();
        }
        Ok(out)
    }
}

/// Source taps for one output coordinate of a corner-aligned resize.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(input: usize, output: usize) -> Vec<Tap> {
    (0..output)
        .map(|i| {
            let src = if output > 1 {
                (i * (input - 1)) as f64 / (output - 1) as f64
            } else {
                0.0
            };
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Corner-aligned bilinear resize: output corners sample input corners
/// exactly, so constant maps stay constant and same-size resizes are exact.
pub fn bilinear_resize<T: Scalar>(m: &Map<T>, out_h: usize, out_w: usize) -> Result<Map<T>> {
    checked_len(&[out_h, out_w, m.channels])?;
    if out_h == m.height && out_w == m.width {
        return Ok(m.clone());
    }
    let rows = axis_taps(m.height, out_h);
    let cols = axis_taps(m.width, out_w);
    let ch = m.channels;
    let mut out = Map::zeros(out_h, out_w, ch)?;
    for (r, ry) in rows.iter().enumerate() {
        let fy = T::lit(ry.frac);
        for (c, cx) in cols.iter().enumerate() {
            let fx = T::lit(cx.frac);
            let w00 = (T::one() - fy) * (T::one() - fx);
            let w01 = (T::one() - fy) * fx;
            let w10 = fy * (T::one() - fx);
            let w11 = fy * fx;
            let i00 = m.index(ry.lo, cx.lo, 0);
            let i01 = m.index(ry.lo, cx.hi, 0);
            let i10 = m.index(ry.hi, cx.lo, 0);
            let i11 = m.index(ry.hi, cx.hi, 0);
            let o = out.index(r, c, 0);
            for k in 0..ch {
                out.data[o + k] = w00 * m.data[i00 + k]
                    + w01 * m.data[i01 + k]
                    + w10 * m.data[i10 + k]
                    + w11 * m.data[i11 + k];
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_resize`]: scatters an output-space gradient back to
/// an `in_h × in_w` input.
pub fn bilinear_resize_backward<T: Scalar>(
    grad_out: &Map<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Map<T>> {
    checked_len(&[in_h, in_w, grad_out.channels])?;
    if grad_out.height == in_h && grad_out.width == in_w {
        return Ok(grad_out.clone());
    }
    let rows = axis_taps(in_h, grad_out.height);
    let cols = axis_taps(in_w, grad_out.width);
    let ch = grad_out.channels;
    let mut grad_in = Map::zeros(in_h, in_w, ch)?;
    for (r, ry) in rows.iter().enumerate() {
        let fy = T::lit(ry.frac);
        for (c, cx) in cols.iter().enumerate() {
            let fx = T::lit(cx.frac);
            let w00 = (T::one() - fy) * (T::one() - fx);
            let w01 = (T::one() - fy) * fx;
            let w10 = fy * (T::one() - fx);
            let w11 = fy * fx;
            let i00 = grad_in.index(ry.lo, cx.lo, 0);
            let i01 = grad_in.index(ry.lo, cx.hi, 0);
            let i10 = grad_in.index(ry.hi, cx.lo, 0);
            let i11 = grad_in.index(ry.hi, cx.hi, 0);
            let o = grad_out.index(r, c, 0);
            for k in 0..ch {
                let g = grad_out.data[o + k];
                grad_in.data[i00 + k] += w00 * g;
                grad_in.data[i01 + k] += w01 * g;
                grad_in.data[i10 + k] += w10 * g;
                grad_in.data[i11 + k] += w11 * g;
            }
        }
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn map_new_fills() {
        let m = Map::<f32>::new(2, 2, 1, 0.0).unwrap();
        assert_eq!(m.len(), 4);
        assert!(m.data().iter().all(|&v| v == 0.0));

        let m = Map::<f32>::new(1, 3, 2, 1.5).unwrap();
        assert_eq!(m.len(), 6);
        assert!(m.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn map_new_rejects_bad_dims() {
        assert!(matches!(
            Map::<f32>::new(0, 2, 1, 0.0),
            Err(SpnError::Dimension(_))
        ));
        assert!(matches!(
            Map::<f32>::new(usize::MAX, 2, 2, 0.0),
            Err(SpnError::Dimension(_))
        ));
        assert!(matches!(
            Map::<f32>::new(1, 1, 1, f32::NAN),
            Err(SpnError::NonFinite(_))
        ));
    }

    #[test]
    fn resize_constant_stays_constant() {
        let m = Map::<f32>::new(5, 7, 2, 3.0).unwrap();
        for (h, w) in [(1, 1), (3, 3), (10, 14), (5, 7), (13, 2)] {
            let r = bilinear_resize(&m, h, w).unwrap();
            assert!(r.data().iter().all(|&v| (v - 3.0).abs() < 1e-6), "{h}x{w}");
        }
    }

    #[test]
    fn resize_midpoint() {
        let m = Map::<f64>::from_vec(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = bilinear_resize(&m, 3, 3).unwrap();
        assert_eq!(r.at(1, 1, 0), 1.5);
        assert_eq!(r.at(0, 0, 0), 0.0);
        assert_eq!(r.at(2, 2, 0), 3.0);
        assert_eq!(r.at(0, 1, 0), 0.5);
    }

    #[test]
    fn resize_identity() {
        let m = Map::<f32>::from_vec(2, 3, 1, vec![1.0, -2.0, 3.5, 0.25, 9.0, 7.0]).unwrap();
        assert_eq!(bilinear_resize(&m, 2, 3).unwrap(), m);
    }

    #[test]
    fn resize_backward_is_adjoint() {
        // <R x, y> == <x, R^T y>
        let x = Map::<f64>::from_vec(3, 4, 2, (0..24).map(|i| (i as f64 * 0.37).sin()).collect())
            .unwrap();
        let y = Map::<f64>::from_vec(5, 7, 2, (0..70).map(|i| (i as f64 * 0.11).cos()).collect())
            .unwrap();
        let rx = bilinear_resize(&x, 5, 7).unwrap();
        let rty = bilinear_resize_backward(&y, 3, 4).unwrap();
        let lhs: f64 = rx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(rty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn crop_and_flip() {
        let m = Map::<f32>::from_vec(2, 3, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.flip_horizontal().data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        assert_eq!(m.flip_vertical().data(), &[4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);
        assert_eq!(m.crop(1, 1, 1, 2).unwrap().data(), &[5.0, 6.0]);
        assert!(m.crop(1, 1, 2, 2).is_err());
    }

    proptest! {
        #[test]
        fn resize_within_input_range(
            h in 1usize..8, w in 1usize..8, oh in 1usize..12, ow in 1usize..12,
            seed in any::<u64>(),
        ) {
            let data: Vec<f64> = (0..h * w)
                .map(|i| ((seed.wrapping_add(i as u64 * 7919) % 1000) as f64) / 100.0 - 5.0)
                .collect();
            let m = Map::from_vec(h, w, 1, data).unwrap();
            let r = bilinear_resize(&m, oh, ow).unwrap();
            prop_assert!(r.min() >= m.min() - 1e-12);
            prop_assert!(r.max() <= m.max() + 1e-12);
        }
    }
}
