//! Same-size 2-D cross-correlation with half-sample symmetric boundary
//! extension (`d c b a | a b c d | d c b a`), plus its adjoint and the
//! weight gradient.
//!
//! Weights are laid out `[c_out][c_in][k][k]`.

/// Maps a padded coordinate back into `0..n` under symmetric extension.
/// Works for any offset, so kernels wider than the image are fine.
pub fn reflect(p: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = p.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn radius(&self) -> usize {
        self.k / 2
    }

    fn padded_dims(&self) -> (usize, usize) {
        let r = self.radius();
        (self.h + 2 * r, self.w + 2 * r)
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.h * self.w
    }
}

/// Symmetric-extends each of `channels` planes by the kernel radius.
pub fn pad(input: &[f64], channels: usize, g: &ConvGeom) -> Vec<f64> {
    let r = g.radius() as isize;
    let (ph, pw) = g.padded_dims();
    let mut out = vec![0.0; channels * ph * pw];
    for c in 0..channels {
        let src = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        let dst = &mut out[c * ph * pw..(c + 1) * ph * pw];
        for py in 0..ph {
            let sy = reflect(py as isize - r, g.h);
            let row = &src[sy * g.w..(sy + 1) * g.w];
            let drow = &mut dst[py * pw..(py + 1) * pw];
            drow[r as usize..r as usize + g.w].copy_from_slice(row);
            for px in 0..r as usize {
                drow[px] = row[reflect(px as isize - r, g.w)];
            }
            for px in r as usize + g.w..pw {
                drow[px] = row[reflect(px as isize - r, g.w)];
            }
        }
    }
    out
}

/// Adjoint of [`pad`]: accumulates every padded sample onto its source.
fn fold(padded: &[f64], channels: usize, g: &ConvGeom) -> Vec<f64> {
    let r = g.radius() as isize;
    let (ph, pw) = g.padded_dims();
    let mut out = vec![0.0; channels * g.h * g.w];
    for c in 0..channels {
        let src = &padded[c * ph * pw..(c + 1) * ph * pw];
        let dst = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for py in 0..ph {
            let sy = reflect(py as isize - r, g.h);
            let drow = &mut dst[sy * g.w..(sy + 1) * g.w];
            let srow = &src[py * pw..(py + 1) * pw];
            for (px, v) in srow.iter().enumerate() {
                drow[reflect(px as isize - r, g.w)] += v;
            }
        }
    }
    out
}

/// `out[co] = bias[co] + sum_ci w[co,ci] * in[ci]` (correlation).
pub fn forward(weight: &[f64], bias: Option<&[f64]>, input: &[f64], g: &ConvGeom) -> Vec<f64> {
    debug_assert_eq!(weight.len(), g.weight_len());
    debug_assert_eq!(input.len(), g.in_len());
    let padded = pad(input, g.c_in, g);
    forward_padded(weight, bias, &padded, g)
}

/// Length of a plane laid out with the padded row stride, up to the last
/// valid output sample.
fn wide_len(g: &ConvGeom) -> usize {
    let (_, pw) = g.padded_dims();
    (g.h - 1) * pw + g.w
}

/// Copies `h x w` planes into the padded row stride, zeros elsewhere.
fn widen(planes: &[f64], channels: usize, g: &ConvGeom) -> Vec<f64> {
    let (_, pw) = g.padded_dims();
    let wl = wide_len(g);
    let mut out = vec![0.0; channels * wl];
    for c in 0..channels {
        for y in 0..g.h {
            let src = &planes[(c * g.h + y) * g.w..(c * g.h + y + 1) * g.w];
            out[c * wl + y * pw..c * wl + y * pw + g.w].copy_from_slice(src);
        }
    }
    out
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

// The kernels below work with the padded row stride so that every tap is
// one contiguous pass; the columns past `w` in each row are junk on the
// output side and zero on the input side.

pub fn forward_padded(weight: &[f64], bias: Option<&[f64]>, padded: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ph, pw) = g.padded_dims();
    let plane = g.h * g.w;
    let kk = g.k * g.k;
    let wl = wide_len(g);
    let mut wide = vec![0.0; wl];
    let mut out = vec![0.0; g.out_len()];
    for co in 0..g.c_out {
        wide.iter_mut().for_each(|v| *v = 0.0);
        for ci in 0..g.c_in {
            let pplane = &padded[ci * ph * pw..(ci + 1) * ph * pw];
            let wk = &weight[(co * g.c_in + ci) * kk..(co * g.c_in + ci + 1) * kk];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let off = ky * pw + kx;
                    axpy(&mut wide, wk[ky * g.k + kx], &pplane[off..off + wl]);
                }
            }
        }
        let b = bias.map_or(0.0, |b| b[co]);
        let oplane = &mut out[co * plane..(co + 1) * plane];
        for y in 0..g.h {
            for (o, v) in oplane[y * g.w..(y + 1) * g.w].iter_mut().zip(&wide[y * pw..y * pw + g.w]) {
                *o = b + v;
            }
        }
    }
    out
}

/// Adjoint of the (bias-free) correlation with respect to its input.
pub fn adjoint(weight: &[f64], grad_out: &[f64], g: &ConvGeom) -> Vec<f64> {
    debug_assert_eq!(grad_out.len(), g.out_len());
    let (ph, pw) = g.padded_dims();
    let kk = g.k * g.k;
    let wl = wide_len(g);
    let gwide = widen(grad_out, g.c_out, g);
    let mut gpad = vec![0.0; g.c_in * ph * pw];
    for co in 0..g.c_out {
        let gplane = &gwide[co * wl..(co + 1) * wl];
        for ci in 0..g.c_in {
            let dst = &mut gpad[ci * ph * pw..(ci + 1) * ph * pw];
            let wk = &weight[(co * g.c_in + ci) * kk..(co * g.c_in + ci + 1) * kk];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let off = ky * pw + kx;
                    axpy(&mut dst[off..off + wl], wk[ky * g.k + kx], gplane);
                }
            }
        }
    }
    fold(&gpad, g.c_in, g)
}

/// Gradient of `<grad_out, conv(weight, input)>` with respect to the
/// weights, given the padded input.
pub fn weight_grad(padded: &[f64], grad_out: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ph, pw) = g.padded_dims();
    let kk = g.k * g.k;
    let wl = wide_len(g);
    let gwide = widen(grad_out, g.c_out, g);
    let mut gw = vec![0.0; g.weight_len()];
    for co in 0..g.c_out {
        let gplane = &gwide[co * wl..(co + 1) * wl];
        for ci in 0..g.c_in {
            let pplane = &padded[ci * ph * pw..(ci + 1) * ph * pw];
            let dst = &mut gw[(co * g.c_in + ci) * kk..(co * g.c_in + ci + 1) * kk];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let off = ky * pw + kx;
                    dst[ky * g.k + kx] = crate::tensor::dot(gplane, &pplane[off..off + wl]);
                }
            }
        }
    }
    gw
}

pub fn bias_grad(grad_out: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.h * g.w;
    (0..g.c_out).map(|co| grad_out[co * plane..(co + 1) * plane].iter().sum()).collect()
}
