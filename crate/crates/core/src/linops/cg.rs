use super::LinearOperator;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Iterations without a new best residual before CG gives up.
const STAGNATION_WINDOW: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Solves `(I + alpha A^T A) v = b` by conjugate gradients using only
/// operator applications.
pub fn solve_regularized_normal(
    op: &LinearOperator,
    alpha: f64,
    b: &Tensor,
    tol: f64,
    max_iter: usize,
) -> Result<(Tensor, CgReport)> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be > 0, got {alpha}")));
    }
    b.expect_shape(op.domain())?;
    let apply = |v: &Tensor| -> Result<Tensor> {
        let mut out = op.normal(v)?.scale(alpha);
        out.axpy(1.0, v)?;
        Ok(out)
    };
    let b_norm = b.norm();
    let mut x = Tensor::zeros(b.shape());
    if b_norm == 0.0 {
        return Ok((x, CgReport { iterations: 0, relative_residual: 0.0 }));
    }
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.dot(&r)?;
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    for it in 1..=max_iter {
        let ap = apply(&p)?;
        let step = rr / p.dot(&ap)?;
        x.axpy(step, &p)?;
        r.axpy(-step, &ap)?;
        let rr_new = r.dot(&r)?;
        let rel = rr_new.sqrt() / b_norm;
        if !rel.is_finite() {
            return Err(Error::Diverged { engine: "cg", iteration: it, last_residual: best });
        }
        if rel <= tol {
            return Ok((x, CgReport { iterations: it, relative_residual: rel }));
        }
        if rel < best {
            best = rel;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= STAGNATION_WINDOW {
                return Err(Error::NotConverged { method: "cg (stagnated)", iterations: it, residual: rel });
            }
        }
        let beta = rr_new / rr;
        rr = rr_new;
        let mut next = r.clone();
        next.axpy(beta, &p)?;
        p = next;
    }
    Err(Error::NotConverged { method: "cg", iterations: max_iter, residual: best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::make_blur;
    use crate::rng::SeededRng;
    use crate::tensor::Shape;

    #[test]
    fn identity_operator_halves() {
        let s = Shape::new(1, 3, 3);
        let mut rng = SeededRng::new(1);
        let b = Tensor::new(s, rng.gaussian_vec(9, 1.0)).unwrap();
        let (v, _) = solve_regularized_normal(&LinearOperator::identity(s), 1.0, &b, 1e-12, 100).unwrap();
        assert!(v.sub(&b.scale(0.5)).unwrap().norm() < 1e-10);
    }

    #[test]
    fn alpha_zero_rejected() {
        let s = Shape::new(1, 2, 2);
        let err = solve_regularized_normal(&LinearOperator::identity(s), 0.0, &Tensor::zeros(s), 1e-8, 10);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn blur_matches_dense_direct_solve() {
        let s = Shape::new(1, 16, 16);
        let op = make_blur(9, 5.0, s).unwrap();
        let mut rng = SeededRng::new(2);
        let b = Tensor::new(s, rng.gaussian_vec(256, 1.0)).unwrap();
        let (v, report) = solve_regularized_normal(&op, 0.5, &b, 1e-8, 500).unwrap();
        assert!(report.relative_residual <= 1e-8);

        let a = op.materialize().unwrap();
        let n = 256;
        let am = nalgebra::DMatrix::from_fn(n, n, |i, j| a[i][j]);
        let m = nalgebra::DMatrix::identity(n, n) + am.transpose() * &am * 0.5;
        let direct = m.lu().solve(&nalgebra::DVector::from_column_slice(b.data())).unwrap();
        let diff = v.data().iter().zip(direct.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-6, "max diff {diff}");

        let mut resid = op.normal(&v).unwrap().scale(0.5);
        resid.axpy(1.0, &v).unwrap();
        assert!(resid.sub(&b).unwrap().norm() <= 1e-8 * b.norm());
    }
}
