//! Forward measurement operators `A` with exact adjoints.

mod cg;
mod fourier;
mod spectral;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use cg::{solve_regularized_normal, CgReport};
pub use fourier::FourierMask;
pub use spectral::{spectral_bounds, SpectralBounds, SpectralMethod};

use crate::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::io::{read_tensor, DType};
use crate::rng::SeededRng;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorKind {
    Blur,
    GaussianCs,
    SubsampledFourier,
    DenseMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Adjoint,
}

#[derive(Debug, Clone)]
enum Repr {
    /// Per-channel correlation with a square kernel.
    Blur { kernel: Vec<f64>, size: usize },
    /// Row-major `rows x cols` matrix acting on the flattened domain.
    Dense { rows: usize, cols: usize, matrix: Vec<f64> },
    Fourier(FourierMask),
}

#[derive(Debug, Clone)]
pub struct LinearOperator {
    kind: OperatorKind,
    domain: Shape,
    range: Shape,
    repr: Repr,
}

impl LinearOperator {
    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn domain(&self) -> Shape {
        self.domain
    }

    pub fn range(&self) -> Shape {
        self.range
    }

    /// True when `A` has a nontrivial nullspace by construction (fewer
    /// measurements than unknowns).
    pub fn is_undersampled(&self) -> bool {
        match &self.repr {
            Repr::Blur { .. } => false,
            Repr::Dense { rows, cols, .. } => rows < cols,
            Repr::Fourier(mask) => mask.kept().len() < mask.width(),
        }
    }

    /// General matrix `A` with explicit domain and range shapes.
    pub fn dense(matrix: Vec<f64>, domain: Shape, range: Shape) -> Result<Self> {
        let (rows, cols) = (range.len(), domain.len());
        if matrix.len() != rows * cols {
            return Err(Error::LengthMismatch { expected: rows * cols, got: matrix.len() });
        }
        if let Some(index) = matrix.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(LinearOperator {
            kind: OperatorKind::DenseMatrix,
            domain,
            range,
            repr: Repr::Dense { rows, cols, matrix },
        })
    }

    pub fn identity(shape: Shape) -> Self {
        let n = shape.len();
        let mut m = vec![0.0; n * n];
        (0..n).for_each(|i| m[i * n + i] = 1.0);
        LinearOperator::dense(m, shape, shape).expect("identity is well formed")
    }

    pub fn blur_with_kernel(kernel: Vec<f64>, size: usize, shape: Shape) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::invalid(format!("blur kernel size must be odd, got {size}")));
        }
        if kernel.len() != size * size {
            return Err(Error::LengthMismatch { expected: size * size, got: kernel.len() });
        }
        Ok(LinearOperator {
            kind: OperatorKind::Blur,
            domain: shape,
            range: shape,
            repr: Repr::Blur { kernel, size },
        })
    }

    pub fn blur_kernel(&self) -> Option<&[f64]> {
        match &self.repr {
            Repr::Blur { kernel, .. } => Some(kernel),
            _ => None,
        }
    }

    pub fn fourier_mask(&self) -> Option<&FourierMask> {
        match &self.repr {
            Repr::Fourier(m) => Some(m),
            _ => None,
        }
    }

    /// The dense matrix as a `1 x rows x cols` tensor (dense kinds only).
    pub fn matrix_tensor(&self) -> Option<Tensor> {
        match &self.repr {
            Repr::Dense { rows, cols, matrix } => {
                Some(Tensor::from_vec_unchecked(Shape::new(1, *rows, *cols), matrix.clone()))
            }
            _ => None,
        }
    }

    pub fn apply(&self, v: &Tensor, direction: Direction) -> Result<Tensor> {
        match direction {
            Direction::Forward => self.forward(v),
            Direction::Adjoint => self.adjoint(v),
        }
    }

    pub fn forward(&self, v: &Tensor) -> Result<Tensor> {
        v.expect_shape(self.domain)?;
        let out = match &self.repr {
            Repr::Blur { kernel, size } => blur_channels(kernel, *size, v, false),
            Repr::Dense { rows, cols, matrix } => {
                let x = v.data();
                (0..*rows)
                    .map(|r| crate::tensor::dot(&matrix[r * cols..(r + 1) * cols], x))
                    .collect()
            }
            Repr::Fourier(mask) => mask.forward(v.data()),
        };
        Ok(Tensor::from_vec_unchecked(self.range, out))
    }

    pub fn adjoint(&self, w: &Tensor) -> Result<Tensor> {
        w.expect_shape(self.range)?;
        let out = match &self.repr {
            Repr::Blur { kernel, size } => blur_channels(kernel, *size, w, true),
            Repr::Dense { rows, cols, matrix } => {
                let mut out = vec![0.0; *cols];
                for (r, &wr) in w.data().iter().enumerate().take(*rows) {
                    crate::tensor::vec_axpy(&mut out, wr, &matrix[r * cols..(r + 1) * cols]);
                }
                out
            }
            Repr::Fourier(mask) => mask.adjoint(w.data()),
        };
        Ok(Tensor::from_vec_unchecked(self.domain, out))
    }

    /// `A^T A v`
    pub fn normal(&self, v: &Tensor) -> Result<Tensor> {
        self.adjoint(&self.forward(v)?)
    }

    /// Materializes `A` column by column through `forward`. Test and
    /// diagnostics use only; cost is `domain.len()` operator calls.
    pub fn materialize(&self) -> Result<Vec<Vec<f64>>> {
        let n = self.domain.len();
        let mut cols = Vec::with_capacity(n);
        for j in 0..n {
            let mut e = Tensor::zeros(self.domain);
            e.data_mut()[j] = 1.0;
            cols.push(self.forward(&e)?.into_vec());
        }
        let m = self.range.len();
        Ok((0..m).map(|i| cols.iter().map(|c| c[i]).collect()).collect())
    }
}

fn blur_channels(kernel: &[f64], size: usize, v: &Tensor, adjoint: bool) -> Vec<f64> {
    let s = v.shape();
    let g = ConvGeom { c_in: 1, c_out: 1, k: size, h: s.height, w: s.width };
    let mut out = Vec::with_capacity(s.len());
    for c in 0..s.channels {
        let plane = v.channel(c);
        if adjoint {
            out.extend(conv::adjoint(kernel, plane, &g));
        } else {
            out.extend(conv::forward(kernel, None, plane, &g));
        }
    }
    out
}

/// Normalized isotropic Gaussian kernel sampled at integer offsets.
pub fn gaussian_kernel(size: usize, variance: f64) -> Result<Vec<f64>> {
    if size % 2 == 0 || size == 0 {
        return Err(Error::invalid(format!("blur kernel size must be odd and >= 1, got {size}")));
    }
    if variance <= 0.0 {
        return Err(Error::invalid(format!("blur variance must be > 0, got {variance}")));
    }
    let r = (size / 2) as f64;
    let mut k = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (dy, dx) = (i as f64 - r, j as f64 - r);
            k.push((-(dx * dx + dy * dy) / (2.0 * variance)).exp());
        }
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Ok(k)
}

/// Gaussian blur over images of `shape` (9x9, variance 5 by default in
/// the problem presets).
pub fn make_blur(size: usize, variance: f64, shape: Shape) -> Result<LinearOperator> {
    LinearOperator::blur_with_kernel(gaussian_kernel(size, variance)?, size, shape)
}

/// Dense `m x n` Gaussian sensing matrix with i.i.d. `N(0, 1/m)` entries,
/// `m = floor(n / undersampling)`.
pub fn make_gaussian_cs(domain: Shape, undersampling: usize, seed: u64) -> Result<LinearOperator> {
    if undersampling < 1 {
        return Err(Error::invalid("undersampling must be >= 1"));
    }
    let n = domain.len();
    let m = n / undersampling;
    if m == 0 {
        return Err(Error::invalid(format!("undersampling {undersampling} leaves no rows for n = {n}")));
    }
    let mut rng = SeededRng::new(seed);
    let matrix = rng.gaussian_vec(m * n, 1.0 / (m as f64).sqrt());
    let mut op = LinearOperator::dense(matrix, domain, Shape::new(1, 1, m))?;
    op.kind = OperatorKind::GaussianCs;
    Ok(op)
}

/// Cartesian-mask single-coil MRI: unitary 2-D DFT of a two-channel
/// complex image followed by column selection.
pub fn make_mri_mask(
    height: usize,
    width: usize,
    acceleration: f64,
    center_fraction: f64,
    seed: u64,
) -> Result<LinearOperator> {
    let mask = FourierMask::sample(height, width, acceleration, center_fraction, seed)?;
    Ok(LinearOperator {
        kind: OperatorKind::SubsampledFourier,
        domain: Shape::new(2, height, width),
        range: Shape::new(2, height, mask.kept().len()),
        repr: Repr::Fourier(mask),
    })
}

/// Serializable operator description used by configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OperatorSpec {
    Blur {
        size: usize,
        variance: f64,
        image_size: usize,
    },
    GaussianCs {
        image_size: usize,
        undersampling: usize,
        seed: u64,
    },
    SubsampledFourier {
        image_size: usize,
        acceleration: f64,
        #[serde(default = "default_center_fraction")]
        center_fraction: f64,
        seed: u64,
    },
    /// Matrix stored as a `1 x rows x cols` tensor file; the domain is a
    /// single-channel square image.
    DenseMatrix {
        path: PathBuf,
        image_size: usize,
    },
}

fn default_center_fraction() -> f64 {
    0.04
}

impl OperatorSpec {
    pub fn build(&self) -> Result<LinearOperator> {
        match self {
            OperatorSpec::Blur { size, variance, image_size } => {
                make_blur(*size, *variance, Shape::new(1, *image_size, *image_size))
            }
            OperatorSpec::GaussianCs { image_size, undersampling, seed } => {
                make_gaussian_cs(Shape::new(1, *image_size, *image_size), *undersampling, *seed)
            }
            OperatorSpec::SubsampledFourier { image_size, acceleration, center_fraction, seed } => {
                make_mri_mask(*image_size, *image_size, *acceleration, *center_fraction, *seed)
            }
            OperatorSpec::DenseMatrix { path, image_size } => {
                let t = read_tensor(path)?;
                let s = t.shape();
                let domain = Shape::new(1, *image_size, *image_size);
                if s.channels != 1 || s.width != domain.len() {
                    return Err(Error::Format(format!(
                        "matrix tensor {s} does not act on {image_size}x{image_size} images"
                    )));
                }
                LinearOperator::dense(t.into_vec(), domain, Shape::new(1, 1, s.height))
            }
        }
    }

    /// Image (domain) shape without building the operator.
    pub fn domain(&self) -> Shape {
        match self {
            OperatorSpec::SubsampledFourier { image_size, .. } => Shape::new(2, *image_size, *image_size),
            OperatorSpec::Blur { image_size, .. }
            | OperatorSpec::GaussianCs { image_size, .. }
            | OperatorSpec::DenseMatrix { image_size, .. } => Shape::new(1, *image_size, *image_size),
        }
    }
}

/// Dtype used when persisting sensing matrices.
pub const MATRIX_DTYPE: DType = DType::F64;
