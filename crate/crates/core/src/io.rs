//! SPNT tensor files and binary PGM/PPM images.
//!
//! SPNT layout (all integers little-endian):
//!
//! ```text
//! offset  size        field
//! 0       4           magic "SPNT"
//! 4       1           version (1)
//! 5       1           dtype (1 = f32, 2 = f64)
//! 6       1           rank
//! 7       4 * rank    dims, u32 each
//! ...     prod(dims) * width   payload, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Result, SpnError};
use crate::tensor::{checked_len, DType, LabelMap, Map, Scalar};

pub const MAGIC: &[u8; 4] = b"SPNT";
pub const VERSION: u8 = 1;
const HEADER_FIXED: usize = 7;

/// Decoded payload of an SPNT file.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Converts to `T`. Same-type conversion is exact.
    pub fn to_vec<T: Scalar>(&self) -> Vec<T> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
        }
    }

    pub fn from_slice<T: Scalar>(values: &[T]) -> Self {
        match T::DTYPE {
            DType::F32 => TensorData::F32(values.iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => TensorData::F64(values.iter().map(|v| v.as_f64()).collect()),
        }
    }
}

/// An arbitrary-rank tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn new<T: Scalar>(dims: &[usize], values: &[T]) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(SpnError::Dimension(format!(
                "rank {} too large",
                dims.len()
            )));
        }
        let n = checked_len(dims)?;
        if n != values.len() {
            return Err(SpnError::Shape(format!(
                "dims {dims:?} need {n} values, got {}",
                values.len()
            )));
        }
        let dims = dims
            .iter()
            .map(|&d| {
                u32::try_from(d).map_err(|_| SpnError::Dimension(format!("dim {d} exceeds u32")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TensorFile {
            dims,
            data: TensorData::from_slice(values),
        })
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let width = self.data.dtype().width();
        let mut out =
            Vec::with_capacity(HEADER_FIXED + 4 * self.dims.len() + width * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.data.dtype().code());
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_FIXED {
            return Err(SpnError::format(
                bytes.len(),
                format!(
                    "header truncated: need {HEADER_FIXED} bytes, have {}",
                    bytes.len()
                ),
            ));
        }
        if &bytes[0..4] != MAGIC {
            return Err(SpnError::format(0, format!("bad magic {:?}", &bytes[0..4])));
        }
        if bytes[4] != VERSION {
            return Err(SpnError::format(
                4,
                format!("unsupported version {}", bytes[4]),
            ));
        }
        let dtype = DType::from_code(bytes[5])
            .ok_or_else(|| SpnError::format(5, format!("unknown dtype {}", bytes[5])))?;
        let rank = bytes[6] as usize;
        let dims_end = HEADER_FIXED + 4 * rank;
        if bytes.len() < dims_end {
            return Err(SpnError::format(
                bytes.len(),
                format!(
                    "dims truncated: need {dims_end} bytes, have {}",
                    bytes.len()
                ),
            ));
        }
        let dims: Vec<u32> = bytes[HEADER_FIXED..dims_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| SpnError::format(HEADER_FIXED, "dims product overflows"))?;
        let expected = count
            .checked_mul(dtype.width())
            .ok_or_else(|| SpnError::format(HEADER_FIXED, "payload size overflows"))?;
        let actual = bytes.len() - dims_end;
        if actual != expected {
            return Err(SpnError::format(
                dims_end,
                format!("payload size mismatch: expected {expected} bytes, found {actual}"),
            ));
        }
        let payload = &bytes[dims_end..];
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(TensorFile { dims, data })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }
}

/// Writes a map as a rank-3 (H, W, C) tensor in `T`'s dtype.
pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, m: &Map<T>) -> Result<()> {
    let (h, w, c) = m.shape();
    TensorFile::new(&[h, w, c], m.data())?.write(path)
}

/// Reads a rank-2 (H, W) or rank-3 (H, W, C) tensor as a map.
pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Map<T>> {
    map_from_tensor(&TensorFile::read(path)?)
}

pub fn map_from_tensor<T: Scalar>(tf: &TensorFile) -> Result<Map<T>> {
    let dims = tf.dims_usize();
    let (h, w, c) = match dims.as_slice() {
        [h, w] => (*h, *w, 1),
        [h, w, c] => (*h, *w, *c),
        _ => {
            return Err(SpnError::format(
                6,
                format!("expected rank 2 or 3 for a map, got rank {}", dims.len()),
            ))
        }
    };
    Map::from_vec(h, w, c, tf.data.to_vec())
}

struct PnmHeader {
    magic: [u8; 2],
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_pnm_header(bytes: &[u8]) -> Result<PnmHeader> {
    if bytes.len() < 2 {
        return Err(SpnError::format(0, "missing PNM magic"));
    }
    let magic = [bytes[0], bytes[1]];
    if &magic != b"P5" && &magic != b"P6" {
        return Err(SpnError::format(
            0,
            format!(
                "unsupported magic {:?}; only P5/P6",
                String::from_utf8_lossy(&magic)
            ),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(SpnError::format(pos, "header truncated")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(SpnError::format(pos, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| SpnError::format(start, "header field out of range"))?;
    }
    // exactly one whitespace byte separates maxval from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(SpnError::format(pos, "missing whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(SpnError::format(
            pos,
            format!("unsupported maxval {maxval}; only 255"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(SpnError::format(pos, "zero image dimension"));
    }
    Ok(PnmHeader {
        magic,
        width,
        height,
        data_offset: pos,
    })
}

fn pnm_raster(path: &Path) -> Result<(PnmHeader, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let header = parse_pnm_header(&bytes)?;
    let channels = if &header.magic == b"P5" { 1 } else { 3 };
    let expected = header.width * header.height * channels;
    let actual = bytes.len() - header.data_offset;
    if actual < expected {
        return Err(SpnError::format(
            header.data_offset,
            format!("raster truncated: expected {expected} bytes, found {actual}"),
        ));
    }
    let raster = bytes[header.data_offset..header.data_offset + expected].to_vec();
    Ok((header, raster))
}

/// Reads a P5 (1-channel) or P6 (3-channel) image scaled to [0, 1].
pub fn read_image_pnm<T: Scalar>(path: impl AsRef<Path>) -> Result<Map<T>> {
    let (header, raster) = pnm_raster(path.as_ref())?;
    let channels = if &header.magic == b"P5" { 1 } else { 3 };
    let data = raster.iter().map(|&b| T::lit(b as f64 / 255.0)).collect();
    Map::from_vec(header.height, header.width, channels, data)
}

#[inline]
fn quantize<T: Scalar>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1-channel map as P5 or a 3-channel map as P6, clamping to [0, 1]
/// and quantizing to 8 bits.
pub fn write_image_pnm<T: Scalar>(path: impl AsRef<Path>, m: &Map<T>) -> Result<()> {
    let magic = match m.channels() {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(SpnError::Dimension(format!(
                "PNM needs 1 or 3 channels, map has {c}"
            )))
        }
    };
    let mut out = format!("{magic}\n{} {}\n255\n", m.width(), m.height()).into_bytes();
    out.extend(m.data().iter().map(|&v| quantize(v)));
    fs::write(path, out)?;
    Ok(())
}

/// Writes labels as raw P5 byte values (label `k` is stored as byte `k`).
pub fn write_label_pgm(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.extend_from_slice(labels.labels());
    fs::write(path, out)?;
    Ok(())
}

/// Reads a P5 file whose byte values are class labels.
pub fn read_label_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    let (header, raster) = pnm_raster(path.as_ref())?;
    if &header.magic != b"P5" {
        return Err(SpnError::format(0, "label maps must be P5"));
    }
    LabelMap::new(header.height, header.width, raster)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tensor_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.spnt");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..48).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let m = Map::from_vec(4, 4, 3, data).unwrap();
        write_tensor(&path, &m).unwrap();
        let back: Map<f32> = read_tensor(&path).unwrap();
        assert_eq!(
            back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back.shape(), (4, 4, 3));
    }

    #[test]
    fn tensor_bad_magic() {
        let mut bytes = TensorFile::new(&[1, 1], &[1.0f32]).unwrap().encode();
        bytes[0..4].copy_from_slice(b"XXXX");
        match TensorFile::decode(&bytes) {
            Err(SpnError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tensor_bad_dtype() {
        let mut bytes = TensorFile::new(&[1], &[1.0f32]).unwrap().encode();
        bytes[5] = 9;
        assert!(matches!(
            TensorFile::decode(&bytes),
            Err(SpnError::Format { offset: 5, .. })
        ));
    }

    #[test]
    fn tensor_truncated_names_sizes() {
        let bytes = TensorFile::new(&[2, 3], &[0.5f64; 6]).unwrap().encode();
        let cut = &bytes[..bytes.len() - 5];
        let err = TensorFile::decode(cut).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("expected 48"), "{text}");
        assert!(text.contains("found 43"), "{text}");
        assert!(matches!(err, SpnError::Format { offset: 15, .. }));
    }

    #[test]
    fn pgm_scaling() {
        let dir = tempfile::tempdir().unwrap();
        for (byte, want) in [(255u8, 1.0f64), (0, 0.0)] {
            let path = dir.path().join("p.pgm");
            let mut bytes = b"P5\n1 1\n255\n".to_vec();
            bytes.push(byte);
            fs::write(&path, bytes).unwrap();
            let m: Map<f64> = read_image_pnm(&path).unwrap();
            assert_eq!(m.shape(), (1, 1, 1));
            assert_eq!(m.at(0, 0, 0), want);
        }
    }

    #[test]
    fn pnm_header_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# a comment\n2 1 # trailing\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 51]);
        fs::write(&path, bytes).unwrap();
        let m: Map<f32> = read_image_pnm(&path).unwrap();
        assert_eq!(m.shape(), (1, 2, 1));
        assert!((m.at(0, 1, 0) - 0.2).abs() < 1e-7);
    }

    #[test]
    fn pnm_rejects_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pnm");
        fs::write(&path, b"P3\n1 1\n255\n0 0 0\n").unwrap();
        assert!(matches!(
            read_image_pnm::<f32>(&path),
            Err(SpnError::Format { .. })
        ));
        fs::write(&path, b"P5\n1 1\n65535\n\0\0").unwrap();
        assert!(matches!(
            read_image_pnm::<f32>(&path),
            Err(SpnError::Format { .. })
        ));
        fs::write(&path, b"P6\n2 2\n255\n\0\0\0").unwrap();
        assert!(matches!(
            read_image_pnm::<f32>(&path),
            Err(SpnError::Format { .. })
        ));
    }

    #[test]
    fn ppm_requantization_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Map::<f32>::from_vec(5, 4, 3, (0..60).map(|_| rng.gen_range(-0.2..1.2)).collect())
            .unwrap();
        let a = dir.path().join("a.ppm");
        let b = dir.path().join("b.ppm");
        write_image_pnm(&a, &m).unwrap();
        let first: Map<f32> = read_image_pnm(&a).unwrap();
        write_image_pnm(&b, &first).unwrap();
        let second: Map<f32> = read_image_pnm(&b).unwrap();
        assert_eq!(first, second);
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn label_pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.pgm");
        let l = LabelMap::new(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        write_label_pgm(&path, &l).unwrap();
        assert_eq!(read_label_pgm(&path).unwrap(), l);
    }

    proptest! {
        #[test]
        fn tensor_encode_decode_identity(
            dims in proptest::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
            wide in any::<bool>(),
        ) {
            let n: usize = dims.iter().product();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tf = if wide {
                let v: Vec<f64> = (0..n).map(|_| f64::from_bits(rng.gen::<u64>() >> 2)).collect();
                TensorFile::new(&dims, &v).unwrap()
            } else {
                let v: Vec<f32> = (0..n).map(|_| rng.gen_range(-1e6f32..1e6)).collect();
                TensorFile::new(&dims, &v).unwrap()
            };
            let bytes = tf.encode();
            let back = TensorFile::decode(&bytes).unwrap();
            prop_assert_eq!(back.encode(), bytes);
        }
    }
}
