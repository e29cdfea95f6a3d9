//! Synthetic piecewise-smooth phantoms and PGM directory loading.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_pgm;
use crate::rng::SeededRng;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DatasetKind {
    SyntheticPhantom,
    ImageDirectory { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub kind: DatasetKind,
    pub count: usize,
    /// Square image side length.
    pub size: usize,
    /// `[train, val, test]`, summing to 1.
    pub split: [f64; 3],
    pub seed: u64,
}

impl DatasetSpec {
    pub fn phantoms(count: usize, size: usize, seed: u64) -> Self {
        DatasetSpec {
            kind: DatasetKind::SyntheticPhantom,
            count,
            size,
            split: [0.8, 0.1, 0.1],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.split.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.split.iter().any(|f| *f < 0.0) {
            return Err(Error::invalid(format!("split fractions {:?} must be >= 0 and sum to 1", self.split)));
        }
        if self.size < 16 {
            return Err(Error::invalid(format!("image size must be >= 16, got {}", self.size)));
        }
        Ok(())
    }
}

/// Train/validation/test partition of a generated or loaded set.
#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<Tensor>,
    pub val: Vec<Tensor>,
    pub test: Vec<Tensor>,
}

/// Deterministic split in generation order: the first `round(f_train * n)`
/// images train, the next `round(f_val * n)` validate, the rest test.
pub fn split(images: Vec<Tensor>, fractions: [f64; 3]) -> Splits {
    let n = images.len();
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let mut it = images.into_iter();
    Splits {
        train: it.by_ref().take(n_train).collect(),
        val: it.by_ref().take(n_val).collect(),
        test: it.collect(),
    }
}

pub fn load(spec: &DatasetSpec) -> Result<Splits> {
    spec.validate()?;
    let images = match &spec.kind {
        DatasetKind::SyntheticPhantom => generate_phantoms(spec)?,
        DatasetKind::ImageDirectory { path } => load_pgm_directory(path, spec.size, spec.count)?,
    };
    Ok(split(images, spec.split))
}

/// Random scenes of 3-8 overlapping ellipses and rectangles with
/// intensities in `[0, 1]`, optionally over a smooth linear background,
/// rescaled to span `[0, 1]`.
pub fn generate_phantoms(spec: &DatasetSpec) -> Result<Vec<Tensor>> {
    if spec.size < 16 {
        return Err(Error::invalid(format!("phantom size must be >= 16, got {}", spec.size)));
    }
    let mut rng = SeededRng::new(spec.seed);
    (0..spec.count).map(|_| phantom(spec.size, &mut rng)).collect()
}

fn phantom(size: usize, rng: &mut SeededRng) -> Result<Tensor> {
    let n = size as f64;
    let mut img = vec![0.0; size * size];
    if rng.uniform() < 0.5 {
        let (a, gx, gy) = (rng.uniform_range(0.0, 0.3), rng.uniform_range(-0.3, 0.3), rng.uniform_range(-0.3, 0.3));
        for y in 0..size {
            for x in 0..size {
                img[y * size + x] = a + gx * x as f64 / n + gy * y as f64 / n;
            }
        }
    }
    let shapes = rng.index(3, 9);
    for _ in 0..shapes {
        let intensity = rng.uniform();
        let (cx, cy) = (rng.uniform_range(0.1, 0.9) * n, rng.uniform_range(0.1, 0.9) * n);
        let (rx, ry) = (rng.uniform_range(0.08, 0.35) * n, rng.uniform_range(0.08, 0.35) * n);
        let theta = rng.uniform_range(0.0, std::f64::consts::PI);
        let (cos, sin) = (theta.cos(), theta.sin());
        let ellipse = rng.uniform() < 0.6;
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let u = (cos * dx + sin * dy) / rx;
                let v = (-sin * dx + cos * dy) / ry;
                let inside = if ellipse { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
                if inside {
                    img[y * size + x] = intensity;
                }
            }
        }
    }
    let (lo, hi) = img.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if hi > lo {
        img.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    } else {
        img.iter_mut().for_each(|v| *v = 0.0);
    }
    Tensor::new(Shape::new(1, size, size), img)
}

/// Gives a magnitude image a smooth random phase (a tilted plane of at
/// most +/- pi/4), returning a two-channel complex image whose modulus is
/// the input.
pub fn to_complex(img: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
    let s = img.shape();
    if s.channels != 1 {
        return Err(Error::invalid("to_complex expects a single-channel image"));
    }
    let quarter = std::f64::consts::FRAC_PI_4;
    let (p0, px, py) = (
        rng.uniform_range(-quarter, quarter) / 2.0,
        rng.uniform_range(-quarter, quarter) / 4.0,
        rng.uniform_range(-quarter, quarter) / 4.0,
    );
    let phase = |y: usize, x: usize| {
        p0 + px * (2.0 * x as f64 / s.width as f64 - 1.0) + py * (2.0 * y as f64 / s.height as f64 - 1.0)
    };
    Tensor::from_fn(s.with_channels(2), |c, y, x| {
        let m = img.get(0, y, x);
        if c == 0 {
            m * phase(y, x).cos()
        } else {
            m * phase(y, x).sin()
        }
    })
}

/// Loads up to `count` `*.pgm` files in name order, center-cropped to
/// `size x size`.
pub fn load_pgm_directory(dir: &std::path::Path, size: usize, count: usize) -> Result<Vec<Tensor>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .take(count)
        .map(|p| {
            let img = read_pgm(&p)?;
            let s = img.shape();
            if s.height < size || s.width < size {
                return Err(Error::invalid(format!("{} is smaller than {size}x{size}", p.display())));
            }
            let (oy, ox) = ((s.height - size) / 2, (s.width - size) / 2);
            Tensor::from_fn(Shape::new(1, size, size), |_, y, x| img.get(0, y + oy, x + ox))
        })
        .collect()
}
