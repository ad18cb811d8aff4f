//! Synthetic segmentation data: shapes on textured backgrounds, their masks,
//! and blurry coarse class probabilities standing in for a low-resolution
//! segmentation network.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Result, SpnError};
use crate::io::{
    read_image_pnm, read_label_pgm, read_tensor, write_image_pnm, write_label_pgm, write_tensor,
};
use crate::tensor::{LabelMap, Map, Scalar};

const MANIFEST_HEADER: &str = "spn-toy-dataset 1";
const SUPERSAMPLE: usize = 4;

/// Foreground palette; class `c` uses entry `c - 1`, wrapping.
const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.25, 0.20],
    [0.20, 0.45, 0.85],
    [0.25, 0.75, 0.30],
    [0.90, 0.80, 0.20],
    [0.65, 0.30, 0.75],
    [0.15, 0.80, 0.80],
];

#[derive(Clone, Debug)]
pub struct ToySample {
    pub image: Map<f32>,
    pub gt: LabelMap,
    pub coarse: Map<f32>,
}

impl ToySample {
    pub fn crop(&self, row: usize, col: usize, size: usize) -> Result<ToySample> {
        Ok(ToySample {
            image: self.image.crop(row, col, size, size)?,
            gt: self.gt.crop(row, col, size, size)?,
            coarse: self.coarse.crop(row, col, size, size)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub classes: usize,
    pub image_size: usize,
    pub train: Vec<ToySample>,
    pub val: Vec<ToySample>,
}

enum Shape {
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        angle: f64,
    },
    /// Convex polygon, vertices counter-clockwise.
    Polygon(Vec<(f64, f64)>),
}

impl Shape {
    fn random<R: Rng>(size: f64, rng: &mut R) -> Shape {
        let cy = rng.gen_range(0.3..0.7) * size;
        let cx = rng.gen_range(0.3..0.7) * size;
        let r = rng.gen_range(0.12..0.28) * size;
        if rng.gen_bool(0.5) {
            Shape::Ellipse {
                cy,
                cx,
                ry: r,
                rx: r * rng.gen_range(0.5..1.0),
                angle: rng.gen_range(0.0..std::f64::consts::PI),
            }
        } else {
            let n = rng.gen_range(3..=6);
            let start = rng.gen_range(0.0..std::f64::consts::TAU);
            let mut verts = Vec::with_capacity(n);
            for k in 0..n {
                let jitter = rng.gen_range(-0.3..0.3);
                let a = start + (k as f64 + jitter) * std::f64::consts::TAU / n as f64;
                let rad = r * rng.gen_range(0.75..1.15);
                verts.push((cy + rad * a.sin(), cx + rad * a.cos()));
            }
            Shape::Polygon(verts)
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Shape::Ellipse {
                cy,
                cx,
                ry,
                rx,
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                let dy = y - cy;
                let dx = x - cx;
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon(verts) => {
                // point on the inner side of every edge
                let n = verts.len();
                let mut sign = 0.0f64;
                for i in 0..n {
                    let (y0, x0) = verts[i];
                    let (y1, x1) = verts[(i + 1) % n];
                    let cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
                    if cross != 0.0 {
                        if sign == 0.0 {
                            sign = cross.signum();
                        } else if cross.signum() != sign {
                            return false;
                        }
                    }
                }
                true
            }
        }
    }

    /// Fraction of the pixel's area inside the shape.
    fn coverage(&self, row: usize, col: usize) -> f64 {
        let mut hits = 0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let y = row as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                let x = col as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                if self.contains(y, x) {
                    hits += 1;
                }
            }
        }
        hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
    }
}

/// One image and its labels. Pixel colors are already quantized to 8 bits
/// so that the in-memory sample equals what a PPM round trip yields.
pub fn gen_toy_sample<R: Rng>(
    size: usize,
    classes: usize,
    rng: &mut R,
) -> Result<(Map<f32>, LabelMap)> {
    if classes < 2 {
        return Err(SpnError::Config("need at least 2 classes".into()));
    }
    let mut img = vec![[0.0f64; 3]; size * size];
    // textured background: base tone, soft stripes, pixel noise
    let base = [
        rng.gen_range(0.35..0.6),
        rng.gen_range(0.35..0.6),
        rng.gen_range(0.35..0.6),
    ];
    let freq = rng.gen_range(0.1..0.35);
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let amp = rng.gen_range(0.03..0.08);
    for r in 0..size {
        for c in 0..size {
            let t = (freq * (r as f64 * theta.sin() + c as f64 * theta.cos())).sin();
            let px = &mut img[r * size + c];
            for k in 0..3 {
                px[k] = base[k] + amp * t + rng.gen_range(-0.04..0.04);
            }
        }
    }
    let mut labels = vec![0u8; size * size];
    let count = rng.gen_range(1..=3);
    for _ in 0..count {
        let class = rng.gen_range(1..classes);
        let shape = Shape::random(size as f64, rng);
        let tone = PALETTE[(class - 1) % PALETTE.len()];
        let color = [
            (tone[0] + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0),
            (tone[1] + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0),
            (tone[2] + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0),
        ];
        for r in 0..size {
            for c in 0..size {
                let a = shape.coverage(r, c);
                if a == 0.0 {
                    continue;
                }
                let px = &mut img[r * size + c];
                for k in 0..3 {
                    px[k] = a * (color[k] + rng.gen_range(-0.03..0.03)) + (1.0 - a) * px[k];
                }
                if a >= 0.5 {
                    labels[r * size + c] = class as u8;
                }
            }
        }
    }
    let data = img
        .iter()
        .flat_map(|px| {
            px.iter()
                .map(|&v| ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32)
        })
        .collect();
    Ok((
        Map::from_vec(size, size, 3, data)?,
        LabelMap::new(size, size, labels)?,
    ))
}

/// Center-aligned bilinear upsample by an integer factor with edge clamping.
fn upsample_centered<T: Scalar>(m: &Map<T>, factor: usize) -> Result<Map<T>> {
    let (h, w, ch) = m.shape();
    let mut out = Map::zeros(h * factor, w * factor, ch)?;
    let tap = |o: usize, n: usize| {
        let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, T::lit(src - lo as f64))
    };
    for r in 0..h * factor {
        let (r0, r1, fy) = tap(r, h);
        for c in 0..w * factor {
            let (c0, c1, fx) = tap(c, w);
            for k in 0..ch {
                let top = m.at(r0, c0, k) * (T::one() - fx) + m.at(r0, c1, k) * fx;
                let bot = m.at(r1, c0, k) * (T::one() - fx) + m.at(r1, c1, k) * fx;
                out.set(r, c, k, top * (T::one() - fy) + bot * fy);
            }
        }
    }
    Ok(out)
}

/// 3×3 box blur with clamped borders.
fn box_blur<T: Scalar>(m: &Map<T>) -> Map<T> {
    let (h, w, ch) = m.shape();
    let mut out = m.zeros_like();
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                let mut s = T::zero();
                let mut n = 0;
                for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        let rr = r as isize + dr;
                        let cc = c as isize + dc;
                        if rr >= 0 && rr < h as isize && cc >= 0 && cc < w as isize {
                            s += m.at(rr as usize, cc as usize, k);
                            n += 1;
                        }
                    }
                }
                out.set(r, c, k, s / T::lit(n as f64));
            }
        }
    }
    out
}

/// One-hot labels → box downsample by `factor` → `blur_passes` 3×3 blurs →
/// bilinear upsample → per-pixel renormalization.
pub fn make_coarse<T: Scalar>(
    gt: &LabelMap,
    classes: usize,
    factor: usize,
    blur_passes: usize,
) -> Result<Map<T>> {
    let (h, w) = (gt.height(), gt.width());
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(SpnError::Dimension(format!(
            "coarse factor {factor} does not divide {h}x{w}"
        )));
    }
    let one_hot = gt.one_hot::<T>(classes)?;
    let (lh, lw) = (h / factor, w / factor);
    let mut low = Map::zeros(lh, lw, classes)?;
    let area = T::lit((factor * factor) as f64);
    for r in 0..h {
        for c in 0..w {
            for k in 0..classes {
                let v = low.at(r / factor, c / factor, k) + one_hot.at(r, c, k);
                low.set(r / factor, c / factor, k, v);
            }
        }
    }
    low.data_mut().iter_mut().for_each(|v| *v = *v / area);
    for _ in 0..blur_passes {
        low = box_blur(&low);
    }
    let mut up = upsample_centered(&low, factor)?;
    for px in up.data_mut().chunks_mut(classes) {
        let s: T = px.iter().copied().sum();
        px.iter_mut().for_each(|v| *v = *v / s);
    }
    Ok(up)
}

/// Top-left corner of a `size × size` crop containing at least two labels,
/// or `None` when no such crop exists. Tries random positions first, then
/// scans in raster order.
pub fn sample_patch<R: Rng>(gt: &LabelMap, size: usize, rng: &mut R) -> Option<(usize, usize)> {
    let (h, w) = (gt.height(), gt.width());
    if size > h || size > w {
        return None;
    }
    let multi = |r: usize, c: usize| {
        let first = gt.at(r, c);
        (r..r + size).any(|y| (c..c + size).any(|x| gt.at(y, x) != first))
    };
    for _ in 0..32 {
        let r = rng.gen_range(0..=h - size);
        let c = rng.gen_range(0..=w - size);
        if multi(r, c) {
            return Some((r, c));
        }
    }
    (0..=h - size)
        .flat_map(|r| (0..=w - size).map(move |c| (r, c)))
        .find(|&(r, c)| multi(r, c))
}

fn sample_paths(index: usize) -> [String; 3] {
    [
        format!("images/{index:04}.ppm"),
        format!("masks/{index:04}.pgm"),
        format!("coarse/{index:04}.spnt"),
    ]
}

/// Writes the dataset described by `cfg` into `cfg.data_dir` and returns
/// the manifest path. Sample `i` draws from its own seeded stream, so the
/// output depends only on the configuration.
pub fn gen_toy_dataset(cfg: &TrainConfig) -> Result<PathBuf> {
    if cfg.classes < 2 || cfg.image_size == 0 {
        return Err(SpnError::Config(
            "dataset needs >= 2 classes and a positive size".into(),
        ));
    }
    let root = &cfg.data_dir;
    for sub in ["images", "masks", "coarse"] {
        fs::create_dir_all(root.join(sub))?;
    }
    let mut manifest = String::new();
    let _ = writeln!(manifest, "{MANIFEST_HEADER}");
    let _ = writeln!(manifest, "classes {}", cfg.classes);
    let _ = writeln!(manifest, "image_size {}", cfg.image_size);
    let _ = writeln!(manifest, "coarse_factor {}", cfg.coarse_factor);
    let _ = writeln!(manifest, "coarse_blur {}", cfg.coarse_blur);
    let _ = writeln!(manifest, "seed {}", cfg.seed);
    for i in 0..cfg.train_size + cfg.val_size {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64 + 1);
        let (image, gt) = gen_toy_sample(cfg.image_size, cfg.classes, &mut rng)?;
        let coarse = make_coarse::<f32>(&gt, cfg.classes, cfg.coarse_factor, cfg.coarse_blur)?;
        let paths = sample_paths(i);
        write_image_pnm(root.join(&paths[0]), &image)?;
        write_label_pgm(root.join(&paths[1]), &gt)?;
        write_tensor(root.join(&paths[2]), &coarse)?;
        let mut hasher = Sha256::new();
        for p in &paths {
            hasher.update(fs::read(root.join(p))?);
        }
        let split = if i < cfg.train_size { "train" } else { "val" };
        let _ = writeln!(
            manifest,
            "{split} {} {} {} {:x}",
            paths[0],
            paths[1],
            paths[2],
            hasher.finalize()
        );
    }
    let path = root.join("manifest.txt");
    fs::write(&path, manifest)?;
    Ok(path)
}

/// Hex SHA-256 of a file.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    Ok(format!("{:x}", Sha256::digest(fs::read(path)?)))
}

fn manifest_value(line: Option<&str>, key: &str) -> Result<usize> {
    line.and_then(|l| l.strip_prefix(key))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| SpnError::Config(format!("manifest: missing '{key}'")))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|e| SpnError::Config(format!("no dataset manifest in {}: {e}", dir.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(SpnError::Config("not a dataset manifest".into()));
    }
    let classes = manifest_value(lines.next(), "classes ")?;
    let image_size = manifest_value(lines.next(), "image_size ")?;
    let mut ds = Dataset {
        classes,
        image_size,
        train: Vec::new(),
        val: Vec::new(),
    };
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let target = match parts.first() {
            Some(&"train") => &mut ds.train,
            Some(&"val") => &mut ds.val,
            _ => continue,
        };
        if parts.len() < 4 {
            return Err(SpnError::Config(format!("bad manifest line '{line}'")));
        }
        let sample = ToySample {
            image: read_image_pnm(dir.join(parts[1]))?,
            gt: read_label_pgm(dir.join(parts[2]))?,
            coarse: read_tensor(dir.join(parts[3]))?,
        };
        if sample.image.shape() != (image_size, image_size, 3)
            || sample.coarse.shape() != (image_size, image_size, classes)
            || sample.gt.max_label() as usize >= classes
        {
            return Err(SpnError::Config(format!(
                "sample '{}' does not match manifest",
                parts[1]
            )));
        }
        target.push(sample);
    }
    Ok(ds)
}
