//! Segmentation samples: a synthetic ellipse generator and a netpbm
//! directory format (`<id>.ppm`, `<id>.mask.pgm`, `splits.txt`).

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::netpbm::Pnm;
use crate::parallel::Execution;
use crate::tensor::Tensor;

pub const SPLITS_FILE: &str = "splits.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub split: Split,
    /// `[3×H×W]`, values in [0, 1].
    pub image: Tensor,
    /// Row-major class indices.
    pub mask: Vec<usize>,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn validate(&self, classes: usize) -> std::result::Result<(), String> {
        let s = self.image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(format!("{}: image must be 3×H×W, got {s:?}", self.id));
        }
        if self.mask.len() != s[1] * s[2] {
            return Err(format!("{}: mask has {} pixels, image {}×{}", self.id, self.mask.len(), s[1], s[2]));
        }
        if let Some(&bad) = self.mask.iter().find(|&&c| c >= classes) {
            return Err(format!("{}: mask value {bad} is not below {classes} classes", self.id));
        }
        Ok(())
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&c| c != 0).count() as f64 / self.mask.len() as f64
    }
}

pub fn select(samples: &[SegSample], split: Split) -> Vec<SegSample> {
    samples.iter().filter(|s| s.split == split).cloned().collect()
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub size: usize,
    pub classes: usize,
    /// Upper bound on the foreground pixel fraction of every mask, in (0, 1].
    pub imbalance: f64,
    pub seed: u64,
    pub train_frac: f64,
    pub val_frac: f64,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 200,
            size: 32,
            classes: 2,
            imbalance: 0.1,
            seed: 0,
            train_frac: 0.7,
            val_frac: 0.1,
            noise: 0.08,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.imbalance > 0.0 && self.imbalance <= 1.0) {
            return Err(format!("imbalance must lie in (0, 1], got {}", self.imbalance));
        }
        if self.classes < 2 || self.classes > 256 {
            return Err(format!("synthetic data needs 2..=256 classes, got {}", self.classes));
        }
        if self.size == 0 || self.n == 0 {
            return Err("synthetic set must have a positive size and count".into());
        }
        if self.train_frac < 0.0 || self.val_frac < 0.0 || self.train_frac + self.val_frac > 1.0 + 1e-12 {
            return Err(format!("bad split fractions {} / {}", self.train_frac, self.val_frac));
        }
        if !(self.noise >= 0.0) {
            return Err(format!("noise must be non-negative, got {}", self.noise));
        }
        Ok(())
    }

    pub fn split_of(&self, index: usize) -> Split {
        let n_train = (self.n as f64 * self.train_frac).round() as usize;
        let n_val = (self.n as f64 * self.val_frac).round() as usize;
        if index < n_train {
            Split::Train
        } else if index < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// A filled, rotated ellipse in pixel coordinates (pixel centers at `i + 0.5`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub class: usize,
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (dy, dx) = (row as f64 + 0.5 - self.cy, col as f64 + 0.5 - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// Paints ellipses in order onto a background mask; later ones win.
pub fn rasterize(size: usize, ellipses: &[Ellipse]) -> Vec<usize> {
    let mut mask = vec![0; size * size];
    for e in ellipses {
        for row in 0..size {
            for col in 0..size {
                if e.contains(row, col) {
                    mask[row * size + col] = e.class;
                }
            }
        }
    }
    mask
}

const SHRINK: f64 = 0.85;

/// One synthetic sample with the ellipses its mask was painted from.
pub fn synthesize(spec: &SyntheticSpec, index: usize) -> (SegSample, Vec<Ellipse>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let size = spec.size as f64;
    let budget = spec.imbalance * (spec.size * spec.size) as f64;

    let counts: Vec<usize> = (1..spec.classes).map(|_| rng.random_range(1..=3)).collect();
    let total: usize = counts.iter().sum();
    let r_max = (budget / total as f64 / std::f64::consts::PI).sqrt().max(1.0);
    let mut ellipses = Vec::with_capacity(total);
    for (k, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            ellipses.push(Ellipse {
                class: k + 1,
                cy: rng.random_range(0.1 * size..0.9 * size),
                cx: rng.random_range(0.1 * size..0.9 * size),
                ry: rng.random_range(0.5 * r_max..=r_max),
                rx: rng.random_range(0.5 * r_max..=r_max),
                theta: rng.random_range(0.0..std::f64::consts::PI),
            });
        }
    }
    let mut mask = rasterize(spec.size, &ellipses);
    while mask.iter().filter(|&&c| c != 0).count() as f64 > budget {
        for e in &mut ellipses {
            e.ry *= SHRINK;
            e.rx *= SHRINK;
        }
        mask = rasterize(spec.size, &ellipses);
    }

    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.45));
    let tilt = rng.random_range(-0.1..0.1);
    let colors: Vec<[f64; 3]> = (0..spec.classes)
        .map(|c| {
            std::array::from_fn(|ch| {
                if c == 0 {
                    bg[ch]
                } else {
                    let lift = if ch == (c - 1) % 3 { 0.3 } else { -0.1 } + 0.05 * ((c - 1) / 3) as f64;
                    bg[ch] + lift + rng.random_range(-0.05..0.05)
                }
            })
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise).expect("noise std is validated");
    let n = spec.size * spec.size;
    let mut image = vec![0.0; 3 * n];
    for ch in 0..3 {
        for p in 0..n {
            let col = (p % spec.size) as f64 / size;
            let v = colors[mask[p]][ch] + tilt * (col - 0.5) + noise.sample(&mut rng);
            image[ch * n + p] = quantize(v);
        }
    }
    let sample = SegSample {
        id: format!("syn{index:05}"),
        split: spec.split_of(index),
        image: Tensor::new(&[3, spec.size, spec.size], image).expect("synthetic image shape"),
        mask,
    };
    (sample, ellipses)
}

/// Clamps to [0, 1] and rounds to the 8-bit grid, so images survive a netpbm round trip.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

pub fn gen_synthetic(spec: &SyntheticSpec, exec: Execution) -> Result<Vec<SegSample>> {
    spec.validate().map_err(Error::Config)?;
    Ok(exec.map(spec.n, |i| synthesize(spec, i).0))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_dataset(dir: &Path, samples: &[SegSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut splits = String::new();
    for s in samples {
        let (h, w) = (s.height(), s.width());
        let n = h * w;
        let img = s.image.data();
        let rgb = Pnm {
            width: w,
            height: h,
            channels: 3,
            pixels: (0..n).flat_map(|p| (0..3).map(move |ch| to_u8(img[ch * n + p]))).collect(),
        };
        let mask = Pnm {
            width: w,
            height: h,
            channels: 1,
            pixels: s
                .mask
                .iter()
                .map(|&c| u8::try_from(c).map_err(|_| Error::Format(format!("{}: class {c} does not fit a byte", s.id))))
                .collect::<Result<_>>()?,
        };
        for (path, pnm) in [
            (dir.join(format!("{}.ppm", s.id)), rgb),
            (dir.join(format!("{}.mask.pgm", s.id)), mask),
        ] {
            fs::write(&path, pnm.encode()).map_err(|e| Error::io(&path, e))?;
        }
        splits.push_str(&format!("{} {}\n", s.id, s.split));
    }
    let path = dir.join(SPLITS_FILE);
    fs::write(&path, splits).map_err(|e| Error::io(&path, e))
}

/// Reads every sample listed in `splits.txt`, in file order.
pub fn load_dataset(dir: &Path, classes: usize) -> Result<Vec<SegSample>> {
    let split_path = dir.join(SPLITS_FILE);
    let listing = fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in listing.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, split] = fields[..] else {
            return Err(Error::load(&split_path, format!("line {}: expected `<id> <split>`", lineno + 1)));
        };
        let split: Split = split
            .parse()
            .map_err(|e| Error::load(&split_path, format!("line {}: {e}", lineno + 1)))?;
        if !seen.insert(id.to_string()) {
            return Err(Error::load(&split_path, format!("duplicate id {id}")));
        }
        samples.push(load_pair(dir, id, split, classes)?);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let stem = name.strip_suffix(".mask.pgm").or_else(|| name.strip_suffix(".ppm"));
        if let Some(stem) = stem {
            if !seen.contains(stem) {
                return Err(Error::load(&path, format!("{stem} is not listed in {SPLITS_FILE}")));
            }
        }
    }
    Ok(samples)
}

fn load_pair(dir: &Path, id: &str, split: Split, classes: usize) -> Result<SegSample> {
    let read = |path: &Path| -> Result<Pnm> {
        let bytes = fs::read(path).map_err(|e| Error::load(path, format!("{id}: {e}")))?;
        Pnm::decode(&bytes).map_err(|e| Error::load(path, format!("{id}: {e}")))
    };
    let img_path = dir.join(format!("{id}.ppm"));
    let mask_path = dir.join(format!("{id}.mask.pgm"));
    let img = read(&img_path)?;
    let mask = read(&mask_path)?;
    if img.channels != 3 {
        return Err(Error::load(&img_path, format!("{id}: image must be P6")));
    }
    if mask.channels != 1 {
        return Err(Error::load(&mask_path, format!("{id}: mask must be P5")));
    }
    if (img.width, img.height) != (mask.width, mask.height) {
        return Err(Error::load(
            &mask_path,
            format!("{id}: mask is {}×{}, image {}×{}", mask.width, mask.height, img.width, img.height),
        ));
    }
    let n = img.width * img.height;
    let mut data = vec![0.0; 3 * n];
    for p in 0..n {
        for ch in 0..3 {
            data[ch * n + p] = img.pixels[3 * p + ch] as f64 / 255.0;
        }
    }
    let sample = SegSample {
        id: id.to_string(),
        split,
        image: Tensor::new(&[3, img.height, img.width], data)?,
        mask: mask.pixels.iter().map(|&c| c as usize).collect(),
    };
    sample.validate(classes).map_err(|msg| Error::load(&mask_path, msg))?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ellipse_membership() {
        let e = Ellipse {
            class: 1,
            cy: 4.0,
            cx: 4.0,
            ry: 1.0,
            rx: 3.0,
            theta: 0.0,
        };
        assert!(e.contains(3, 1));
        assert!(!e.contains(1, 3));
        let turned = Ellipse {
            theta: std::f64::consts::FRAC_PI_2,
            ..e
        };
        assert!(turned.contains(1, 3));
        assert!(!turned.contains(3, 1));
    }

    #[test]
    fn split_assignment() {
        let spec = SyntheticSpec {
            n: 10,
            ..SyntheticSpec::default()
        };
        let splits: Vec<Split> = (0..10).map(|i| spec.split_of(i)).collect();
        assert_eq!(splits.iter().filter(|&&s| s == Split::Train).count(), 7);
        assert_eq!(splits[7], Split::Val);
        assert_eq!(splits[9], Split::Test);
    }

    #[test]
    fn bad_specs_are_rejected() {
        for spec in [
            SyntheticSpec { imbalance: 0.0, ..Default::default() },
            SyntheticSpec { imbalance: 1.5, ..Default::default() },
            SyntheticSpec { classes: 1, ..Default::default() },
            SyntheticSpec { train_frac: 0.8, val_frac: 0.3, ..Default::default() },
        ] {
            assert!(spec.validate().is_err(), "{spec:?}");
        }
    }
}
