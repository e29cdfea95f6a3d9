//! Unitary 2-D DFT with Cartesian column subsampling.

use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone)]
pub struct FourierMask {
    height: usize,
    width: usize,
    /// Kept k-space columns in increasing (unshifted) index order.
    kept: Vec<usize>,
    center: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for FourierMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FourierMask")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("kept", &self.kept)
            .field("center", &self.center)
            .finish()
    }
}

/// Signed frequency of unshifted DFT index `j` of an `n`-point transform.
fn signed_freq(j: usize, n: usize) -> isize {
    if j < n.div_ceil(2) {
        j as isize
    } else {
        j as isize - n as isize
    }
}

impl FourierMask {
    /// `ceil(center_fraction * width)` lowest-frequency columns are always
    /// kept; the rest are drawn without replacement with probability
    /// proportional to `exp(-f^2 / 2)`, `f` the frequency normalized to
    /// `[-1, 1]`, until `round(width / acceleration)` columns are kept.
    pub fn sample(height: usize, width: usize, acceleration: f64, center_fraction: f64, seed: u64) -> Result<Self> {
        if width < 8 || height < 1 {
            return Err(Error::invalid(format!("MRI mask needs width >= 8, got {width}")));
        }
        if !(acceleration >= 1.0) {
            return Err(Error::invalid(format!("acceleration must be >= 1, got {acceleration}")));
        }
        let center = (center_fraction * width as f64).ceil() as usize;
        let total = (width as f64 / acceleration + 0.5).floor() as usize;
        if total < center {
            return Err(Error::invalid(format!(
                "round({width}/{acceleration}) = {total} kept columns is fewer than the {center} center columns"
            )));
        }
        let mut order: Vec<usize> = (0..width).collect();
        // Lowest |f| first; ties go to the non-negative frequency.
        order.sort_by_key(|&j| {
            let f = signed_freq(j, width);
            (f.unsigned_abs(), f < 0)
        });
        let mut kept: Vec<usize> = order[..center].to_vec();
        let mut pool: Vec<(usize, f64)> = order[center..]
            .iter()
            .map(|&j| {
                let f = signed_freq(j, width) as f64 / (width as f64 / 2.0);
                (j, (-f * f / 2.0).exp())
            })
            .collect();
        let mut rng = SeededRng::new(seed);
        while kept.len() < total {
            let mass: f64 = pool.iter().map(|p| p.1).sum();
            let mut target = rng.uniform() * mass;
            let mut pick = pool.len() - 1;
            for (i, &(_, w)) in pool.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            kept.push(pool.swap_remove(pick).0);
        }
        kept.sort_unstable();

        let mut planner = FftPlanner::new();
        Ok(FourierMask {
            height,
            width,
            kept,
            center,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        })
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn center_count(&self) -> usize {
        self.center
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.height, self.width);
        let (row, col) = if inverse { (&self.row_inv, &self.col_inv) } else { (&self.row_fwd, &self.col_fwd) };
        for r in buf.chunks_exact_mut(w) {
            row.process(r);
        }
        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = buf[y * w + x];
            }
            col.process(&mut column);
            for y in 0..h {
                buf[y * w + x] = column[y];
            }
        }
        let scale = 1.0 / ((h * w) as f64).sqrt();
        buf.iter_mut().for_each(|v| *v *= scale);
    }

    /// Two-channel image `(re, im)` to masked k-space `(re, im)` of size
    /// `height x kept`.
    pub(crate) fn forward(&self, image: &[f64]) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut buf: Vec<Complex64> = (0..plane).map(|i| Complex64::new(image[i], image[plane + i])).collect();
        self.transform(&mut buf, false);
        let k = self.kept.len();
        let mut out = vec![0.0; 2 * self.height * k];
        for y in 0..self.height {
            for (c, &x) in self.kept.iter().enumerate() {
                let v = buf[y * self.width + x];
                out[y * k + c] = v.re;
                out[self.height * k + y * k + c] = v.im;
            }
        }
        out
    }

    /// Zero-fill the masked k-space, then the inverse unitary DFT.
    pub(crate) fn adjoint(&self, kspace: &[f64]) -> Vec<f64> {
        let plane = self.height * self.width;
        let k = self.kept.len();
        let mut buf = vec![Complex64::new(0.0, 0.0); plane];
        for y in 0..self.height {
            for (c, &x) in self.kept.iter().enumerate() {
                buf[y * self.width + x] = Complex64::new(kspace[y * k + c], kspace[self.height * k + y * k + c]);
            }
        }
        self.transform(&mut buf, true);
        let mut out = vec![0.0; 2 * plane];
        for (i, v) in buf.iter().enumerate() {
            out[i] = v.re;
            out[plane + i] = v.im;
        }
        out
    }
}
