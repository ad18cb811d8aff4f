//! Linear row/column propagation.
//!
//! A map is scanned line by line in one of four directions. Each pixel of
//! scan line `t` mixes its own input value with hidden values of the previous
//! line:
//!
//! ```text
//! h[k,t] = (1 - Σ_j p_j) * x[k,t] + Σ_j p_j * h[j,t-1]
//! ```
//!
//! where `j` ranges over `{k}` (one-way) or `{k-1, k, k+1}` clipped to the
//! line (three-way). The first line is copied through. Four directional
//! scans are integrated by a per-node maximum, and units can be cascaded.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Result, SpnError};
use crate::tensor::{checked_len, Map, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    LeftToRight,
    RightToLeft,
    TopToBottom,
    BottomToTop,
}

impl Direction {
    /// Fixed order; also the max-pool tie-break order.
    pub const ALL: [Direction; 4] = [
        Direction::LeftToRight,
        Direction::RightToLeft,
        Direction::TopToBottom,
        Direction::BottomToTop,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Direction> {
        Self::ALL.get(i).copied()
    }

    /// Horizontal scans walk along the width; each scan line is a column.
    pub fn is_horizontal(self) -> bool {
        matches!(self, Direction::LeftToRight | Direction::RightToLeft)
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::LeftToRight => "left-to-right",
            Direction::RightToLeft => "right-to-left",
            Direction::TopToBottom => "top-to-bottom",
            Direction::BottomToTop => "bottom-to-top",
        }
    }

    /// Number of scan lines and the length of each line for an H×W map.
    pub fn scan_extent(self, height: usize, width: usize) -> (usize, usize) {
        if self.is_horizontal() {
            (width, height)
        } else {
            (height, width)
        }
    }

    /// Maps a pixel to its (scan step, position along the line).
    pub fn step_pos(self, row: usize, col: usize, height: usize, width: usize) -> (usize, usize) {
        match self {
            Direction::LeftToRight => (col, row),
            Direction::RightToLeft => (width - 1 - col, row),
            Direction::TopToBottom => (row, col),
            Direction::BottomToTop => (height - 1 - row, col),
        }
    }

    /// Inverse of [`Direction::step_pos`].
    pub fn pixel_at(self, step: usize, pos: usize, height: usize, width: usize) -> (usize, usize) {
        match self {
            Direction::LeftToRight => (pos, step),
            Direction::RightToLeft => (pos, width - 1 - step),
            Direction::TopToBottom => (step, pos),
            Direction::BottomToTop => (height - 1 - step, pos),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = SpnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left-to-right" | "ltr" => Ok(Direction::LeftToRight),
            "right-to-left" | "rtl" => Ok(Direction::RightToLeft),
            "top-to-bottom" | "ttb" => Ok(Direction::TopToBottom),
            "bottom-to-top" | "btt" => Ok(Direction::BottomToTop),
            _ => Err(SpnError::Config(format!("unknown direction '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConnectionKind {
    OneWay,
    ThreeWay,
}

impl ConnectionKind {
    /// Gates per pixel, channel and direction.
    pub fn multiplicity(self) -> usize {
        match self {
            ConnectionKind::OneWay => 1,
            ConnectionKind::ThreeWay => 3,
        }
    }

    /// Offsets along the previous scan line, in summation order.
    pub fn offsets(self) -> &'static [isize] {
        match self {
            ConnectionKind::OneWay => &[0],
            ConnectionKind::ThreeWay => &[-1, 0, 1],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ConnectionKind::OneWay => "one-way",
            ConnectionKind::ThreeWay => "three-way",
        }
    }
}

impl fmt::Display for ConnectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConnectionKind {
    type Err = SpnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-way" | "one" | "1" => Ok(ConnectionKind::OneWay),
            "three-way" | "three" | "3" => Ok(ConnectionKind::ThreeWay),
            _ => Err(SpnError::Config(format!("unknown connection kind '{s}'"))),
        }
    }
}

/// Propagation weights indexed `(row, col, channel, direction, connection)`,
/// connection fastest.
///
/// For a fixed direction and scan step, the gates of all pixels on that scan
/// line are the nonzero entries of the step's transformation matrix: the
/// diagonal for one-way, the three central diagonals for three-way (in
/// connection order previous / same / next position).
#[derive(Clone, Debug, PartialEq)]
pub struct GateTensor<T = f32> {
    height: usize,
    width: usize,
    channels: usize,
    kind: ConnectionKind,
    data: Vec<T>,
}

impl<T: Scalar> GateTensor<T> {
    pub fn zeros(
        height: usize,
        width: usize,
        channels: usize,
        kind: ConnectionKind,
    ) -> Result<Self> {
        let len = checked_len(&[height, width, channels, 4, kind.multiplicity()])?;
        Ok(GateTensor {
            height,
            width,
            channels,
            kind,
            data: vec![T::zero(); len],
        })
    }

    pub fn from_vec(
        height: usize,
        width: usize,
        channels: usize,
        kind: ConnectionKind,
        data: Vec<T>,
    ) -> Result<Self> {
        let len = checked_len(&[height, width, channels, 4, kind.multiplicity()])?;
        if data.len() != len {
            return Err(SpnError::Shape(format!(
                "gate tensor {height}x{width}x{channels}x4x{} needs {len} values, got {}",
                kind.multiplicity(),
                data.len()
            )));
        }
        Ok(GateTensor {
            height,
            width,
            channels,
            kind,
            data,
        })
    }

    /// Reinterprets a map with `channels * 4 * multiplicity` channels; the
    /// flat layouts coincide.
    pub fn from_map(m: Map<T>, kind: ConnectionKind) -> Result<Self> {
        let per = 4 * kind.multiplicity();
        if !m.channels().is_multiple_of(per) {
            return Err(SpnError::Shape(format!(
                "{} channels is not a multiple of {per}",
                m.channels()
            )));
        }
        let (h, w, c) = m.shape();
        GateTensor::from_vec(h, w, c / per, kind, m.into_vec())
    }

    pub fn into_map(self) -> Map<T> {
        let c = self.channels * 4 * self.kind.multiplicity();
        Map::from_vec(self.height, self.width, c, self.data)
            .expect("gate layout matches map layout")
    }

    /// Uniform random gates in `[lo, hi)` with structural zeros in place.
    pub fn random<R: Rng>(
        height: usize,
        width: usize,
        channels: usize,
        kind: ConnectionKind,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut g = Self::zeros(height, width, channels, kind)?;
        for v in g.data.iter_mut() {
            *v = T::lit(rng.gen_range(lo..hi));
        }
        g.zero_boundary();
        Ok(g)
    }

    /// Every gate set to `value`, structural zeros in place.
    pub fn constant(
        height: usize,
        width: usize,
        channels: usize,
        kind: ConnectionKind,
        value: T,
    ) -> Result<Self> {
        let mut g = Self::zeros(height, width, channels, kind)?;
        g.data.iter_mut().for_each(|v| *v = value);
        g.zero_boundary();
        Ok(g)
    }

    pub fn zeros_like(&self) -> Self {
        GateTensor {
            data: vec![T::zero(); self.data.len()],
            ..self.clone()
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
    pub fn kind(&self) -> ConnectionKind {
        self.kind
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> GateTensor<U> {
        GateTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            kind: self.kind,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize, dir: Direction, k: usize) -> usize {
        let m = self.kind.multiplicity();
        ((((row * self.width + col) * self.channels + ch) * 4) + dir.index()) * m + k
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize, dir: Direction, k: usize) -> T {
        self.data[self.index(row, col, ch, dir, k)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, dir: Direction, k: usize, v: T) {
        let i = self.index(row, col, ch, dir, k);
        self.data[i] = v;
    }

    /// The connection gates of one pixel, channel and direction.
    pub fn pixel_gates(&self, row: usize, col: usize, ch: usize, dir: Direction) -> &[T] {
        let i = self.index(row, col, ch, dir, 0);
        &self.data[i..i + self.kind.multiplicity()]
    }

    /// True for gates that reference a neighbor outside the map: the whole
    /// first scan line, and the off-center connections at line ends.
    pub fn is_structural_zero(&self, row: usize, col: usize, dir: Direction, k: usize) -> bool {
        let (step, pos) = dir.step_pos(row, col, self.height, self.width);
        if step == 0 {
            return true;
        }
        let (_, line) = dir.scan_extent(self.height, self.width);
        let q = pos as isize + self.kind.offsets()[k];
        q < 0 || q >= line as isize
    }

    pub fn zero_boundary(&mut self) {
        let m = self.kind.multiplicity();
        for r in 0..self.height {
            for c in 0..self.width {
                for dir in Direction::ALL {
                    for k in 0..m {
                        if self.is_structural_zero(r, c, dir, k) {
                            for ch in 0..self.channels {
                                let i = self.index(r, c, ch, dir, k);
                                self.data[i] = T::zero();
                            }
                        }
                    }
                }
            }
        }
    }

    /// Errors if any out-of-bounds gate is nonzero.
    pub fn validate_boundary(&self) -> Result<()> {
        let m = self.kind.multiplicity();
        for r in 0..self.height {
            for c in 0..self.width {
                for dir in Direction::ALL {
                    for k in 0..m {
                        if !self.is_structural_zero(r, c, dir, k) {
                            continue;
                        }
                        for ch in 0..self.channels {
                            let v = self.get(r, c, ch, dir, k);
                            if v != T::zero() {
                                return Err(SpnError::Contract(format!(
                                    "boundary gates must be zero: gate ({r},{c},ch {ch},{dir},conn {k}) = {v}"
                                )));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn require_map_shape(&self, x: &Map<T>) -> Result<()> {
        if x.shape() != (self.height, self.width, self.channels) {
            return Err(SpnError::Shape(format!(
                "map {:?} vs gates {:?}",
                x.shape(),
                (self.height, self.width, self.channels)
            )));
        }
        Ok(())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &GateTensor<T>) -> Result<()> {
        if self.data.len() != other.data.len() || self.kind != other.kind {
            return Err(SpnError::Shape("adding mismatched gate tensors".into()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

/// Configuration of the propagation stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpnConfig {
    /// Cascaded propagation units.
    pub units: usize,
    pub connection: ConnectionKind,
    /// Channels of the propagated map.
    pub hidden_channels: usize,
    /// Downsample factor from image to propagation plane.
    pub propagation_scale: usize,
}

impl Default for SpnConfig {
    fn default() -> Self {
        SpnConfig {
            units: 1,
            connection: ConnectionKind::ThreeWay,
            hidden_channels: 8,
            propagation_scale: 2,
        }
    }
}

impl SpnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.units == 0 {
            return Err(SpnError::Config("units must be >= 1".into()));
        }
        if self.hidden_channels == 0 {
            return Err(SpnError::Config("hidden_channels must be >= 1".into()));
        }
        if self.propagation_scale == 0 {
            return Err(SpnError::Config("propagation_scale must be >= 1".into()));
        }
        Ok(())
    }
}

/// Flat-index arithmetic for one direction over an H×W grid.
#[derive(Clone, Copy)]
struct Geometry {
    steps: usize,
    line: usize,
    start: isize,
    step_stride: isize,
    pos_stride: isize,
}

impl Geometry {
    fn new(dir: Direction, height: usize, width: usize) -> Self {
        let (h, w) = (height as isize, width as isize);
        let (steps, line) = dir.scan_extent(height, width);
        let (start, step_stride, pos_stride) = match dir {
            Direction::LeftToRight => (0, 1, w),
            Direction::RightToLeft => (w - 1, -1, w),
            Direction::TopToBottom => (0, w, 1),
            Direction::BottomToTop => ((h - 1) * w, -w, 1),
        };
        Geometry {
            steps,
            line,
            start,
            step_stride,
            pos_stride,
        }
    }

    #[inline]
    fn pixel(&self, step: usize, pos: usize) -> usize {
        (self.start + step as isize * self.step_stride + pos as isize * self.pos_stride) as usize
    }
}

fn scan_forward<T: Scalar>(x: &Map<T>, gates: &GateTensor<T>, dir: Direction) -> Map<T> {
    let geo = Geometry::new(dir, x.height(), x.width());
    let ch = x.channels();
    let m = gates.kind.multiplicity();
    let offsets = gates.kind.offsets();
    let xd = x.data();
    let gd = gates.data();
    let mut h = x.zeros_like();
    let hd = h.data_mut();
    for pos in 0..geo.line {
        let p = geo.pixel(0, pos) * ch;
        hd[p..p + ch].copy_from_slice(&xd[p..p + ch]);
    }
    for step in 1..geo.steps {
        for pos in 0..geo.line {
            let p = geo.pixel(step, pos);
            for c in 0..ch {
                let gbase = ((p * ch + c) * 4 + dir.index()) * m;
                let mut sum = T::zero();
                let mut acc = T::zero();
                for (k, &off) in offsets.iter().enumerate() {
                    let q = pos as isize + off;
                    if q < 0 || q >= geo.line as isize {
                        continue;
                    }
                    let g = gd[gbase + k];
                    sum += g;
                    acc += g * hd[geo.pixel(step - 1, q as usize) * ch + c];
                }
                let i = p * ch + c;
                hd[i] = (T::one() - sum) * xd[i] + acc;
            }
        }
    }
    h
}

/// Reverse pass of one directional scan. `dh` is consumed as scratch;
/// `dx` and `dgates` are accumulated into.
fn scan_backward<T: Scalar>(
    x: &Map<T>,
    h: &Map<T>,
    gates: &GateTensor<T>,
    dir: Direction,
    mut dh: Vec<T>,
    dx: &mut [T],
    dgates: &mut [T],
) {
    let geo = Geometry::new(dir, x.height(), x.width());
    let ch = x.channels();
    let m = gates.kind.multiplicity();
    let offsets = gates.kind.offsets();
    let xd = x.data();
    let hd = h.data();
    let gd = gates.data();
    for step in (1..geo.steps).rev() {
        for pos in 0..geo.line {
            let p = geo.pixel(step, pos);
            for c in 0..ch {
                let i = p * ch + c;
                let up = dh[i];
                let gbase = ((p * ch + c) * 4 + dir.index()) * m;
                let mut sum = T::zero();
                for (k, &off) in offsets.iter().enumerate() {
                    let q = pos as isize + off;
                    if q < 0 || q >= geo.line as isize {
                        continue;
                    }
                    let g = gd[gbase + k];
                    sum += g;
                    let j = geo.pixel(step - 1, q as usize) * ch + c;
                    dgates[gbase + k] += (hd[j] - xd[i]) * up;
                    dh[j] += g * up;
                }
                dx[i] += (T::one() - sum) * up;
            }
        }
    }
    for pos in 0..geo.line {
        let p = geo.pixel(0, pos) * ch;
        for c in 0..ch {
            dx[p + c] += dh[p + c];
        }
    }
}

/// One directional scan.
///
/// Errors on shape mismatch or nonzero out-of-bounds gates.
pub fn propagate_direction<T: Scalar>(
    x: &Map<T>,
    gates: &GateTensor<T>,
    dir: Direction,
) -> Result<Map<T>> {
    gates.require_map_shape(x)?;
    gates.validate_boundary()?;
    Ok(scan_forward(x, gates, dir))
}

/// Reverse pass of [`propagate_direction`] for a given upstream gradient.
/// Returns `dL/dx` and a gate gradient that is nonzero only in `dir`'s slots.
pub fn propagate_direction_backward<T: Scalar>(
    x: &Map<T>,
    h: &Map<T>,
    gates: &GateTensor<T>,
    dir: Direction,
    dh: &Map<T>,
) -> Result<(Map<T>, GateTensor<T>)> {
    gates.require_map_shape(x)?;
    x.require_same_shape(h, "hidden map")?;
    x.require_same_shape(dh, "upstream gradient")?;
    let mut dx = x.zeros_like();
    let mut dg = gates.zeros_like();
    scan_backward(
        x,
        h,
        gates,
        dir,
        dh.data().to_vec(),
        dx.data_mut(),
        dg.data_mut(),
    );
    Ok((dx, dg))
}

/// Per-node maximum over the four directional hidden maps. Ties resolve to
/// the earliest direction in [`Direction::ALL`].
pub fn integrate_maxpool<T: Scalar>(
    ltr: &Map<T>,
    rtl: &Map<T>,
    ttb: &Map<T>,
    btt: &Map<T>,
) -> Result<(Map<T>, Vec<Direction>)> {
    let maps = [ltr, rtl, ttb, btt];
    for m in &maps[1..] {
        ltr.require_same_shape(m, "max-pool inputs")?;
    }
    let mut out = ltr.clone();
    let mut winners = vec![Direction::LeftToRight; ltr.len()];
    for (d, m) in maps.iter().enumerate().skip(1) {
        for ((o, w), &v) in out
            .data_mut()
            .iter_mut()
            .zip(winners.iter_mut())
            .zip(m.data())
        {
            if v > *o {
                *o = v;
                *w = Direction::ALL[d];
            }
        }
    }
    Ok((out, winners))
}

/// Cached state of one propagation unit.
#[derive(Clone, Debug)]
pub struct UnitCache<T> {
    pub input: Map<T>,
    pub gates: GateTensor<T>,
    /// Hidden maps in [`Direction::ALL`] order.
    pub hidden: Vec<Map<T>>,
    pub winners: Vec<Direction>,
    pub output: Map<T>,
}

/// Everything the reverse pass needs from [`spn_forward`].
#[derive(Clone, Debug)]
pub struct ScanCache<T> {
    pub units: Vec<UnitCache<T>>,
}

fn run_unit<T: Scalar>(x: &Map<T>, gates: &GateTensor<T>) -> Result<UnitCache<T>> {
    gates.require_map_shape(x)?;
    gates.validate_boundary()?;
    let hidden: Vec<Map<T>> = Direction::ALL
        .iter()
        .map(|&d| scan_forward(x, gates, d))
        .collect();
    let (output, winners) = integrate_maxpool(&hidden[0], &hidden[1], &hidden[2], &hidden[3])?;
    Ok(UnitCache {
        input: x.clone(),
        gates: gates.clone(),
        hidden,
        winners,
        output,
    })
}

/// Cascaded propagation: unit `i` consumes the integrated output of unit
/// `i - 1`. One gate tensor per unit.
pub fn spn_forward<T: Scalar>(
    x: &Map<T>,
    gates: &[GateTensor<T>],
    cfg: &SpnConfig,
) -> Result<(Map<T>, ScanCache<T>)> {
    cfg.validate()?;
    if gates.len() != cfg.units {
        return Err(SpnError::Shape(format!(
            "{} gate tensors for {} units",
            gates.len(),
            cfg.units
        )));
    }
    if x.channels() != cfg.hidden_channels {
        return Err(SpnError::Shape(format!(
            "map has {} channels, config expects {}",
            x.channels(),
            cfg.hidden_channels
        )));
    }
    if let Some(g) = gates.iter().find(|g| g.kind() != cfg.connection) {
        return Err(SpnError::Shape(format!(
            "{} gates for a {} configuration",
            g.kind(),
            cfg.connection
        )));
    }
    let mut units = Vec::with_capacity(gates.len());
    let mut current = x.clone();
    for g in gates {
        let unit = run_unit(&current, g)?;
        current = unit.output.clone();
        units.push(unit);
    }
    Ok((current, ScanCache { units }))
}

/// Exact reverse pass of [`spn_forward`]: returns `dL/dx` and one gate
/// gradient per unit.
pub fn spn_backward<T: Scalar>(
    d_out: &Map<T>,
    cache: &ScanCache<T>,
) -> Result<(Map<T>, Vec<GateTensor<T>>)> {
    let last = cache
        .units
        .last()
        .ok_or_else(|| SpnError::Contract("empty scan cache".into()))?;
    last.output.require_same_shape(d_out, "stale cache")?;
    let mut grad = d_out.clone();
    let mut gate_grads = Vec::with_capacity(cache.units.len());
    for unit in cache.units.iter().rev() {
        if unit.winners.len() != grad.len() || !unit.output.same_shape(&grad) {
            return Err(SpnError::Contract(
                "scan cache does not match gradient".into(),
            ));
        }
        let mut dx = unit.input.zeros_like();
        let mut dg = unit.gates.zeros_like();
        for (d, dir) in Direction::ALL.iter().enumerate() {
            // route the gradient only to nodes this direction won
            let dh: Vec<T> = grad
                .data()
                .iter()
                .zip(&unit.winners)
                .map(|(&g, &w)| if w == *dir { g } else { T::zero() })
                .collect();
            scan_backward(
                &unit.input,
                &unit.hidden[d],
                &unit.gates,
                *dir,
                dh,
                dx.data_mut(),
                dg.data_mut(),
            );
        }
        gate_grads.push(dg);
        grad = dx;
    }
    gate_grads.reverse();
    Ok((grad, gate_grads))
}
