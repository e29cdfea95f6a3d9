//! Deep-equilibrium iteration maps and their linearizations.
//!
//! * DE-Grad: `f(x) = x + eta A^T (y - A x) - eta R(x)`
//! * DE-Prox: `f(x) = R(x + eta A^T (y - A x))`
//! * DE-ADMM on the joint state `(x, u)`:
//!   `z = R(x - u)`, `x' = (I + alpha A^T A)^{-1} (alpha A^T y + z + u)`,
//!   `u' = u + z - x'`.
//!
//! States are flat vectors: the image for DE-Grad/DE-Prox, the image
//! followed by `u` for DE-ADMM.

mod certify;
mod recon;

use serde::{Deserialize, Serialize};

pub use certify::{certify_contraction, empirical_contraction, ContractionCertificate, ContractionRate, Theorem};
pub use recon::{reconstruct, reconstruct_observed, InitPolicy, Reconstruction, ReconstructionMetrics};

use crate::error::{Error, Result};
use crate::linops::{solve_regularized_normal, LinearOperator};
use crate::regnet::{ParamVector, RegNet, Tape};
use crate::tensor::{Shape, Tensor};

/// Relative tolerance and iteration cap for the CG solves inside DE-ADMM.
pub const ADMM_CG_TOL: f64 = 1e-10;
pub const ADMM_CG_MAX_ITER: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapKind {
    DeGrad,
    DeProx,
    DeAdmm,
}

impl MapKind {
    pub fn name(self) -> &'static str {
        match self {
            MapKind::DeGrad => "de-grad",
            MapKind::DeProx => "de-prox",
            MapKind::DeAdmm => "de-admm",
        }
    }

    /// State vectors hold this many images.
    pub fn arity(self) -> usize {
        match self {
            MapKind::DeAdmm => 2,
            _ => 1,
        }
    }
}

impl std::str::FromStr for MapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "de-grad" | "grad" => Ok(MapKind::DeGrad),
            "de-prox" | "prox" => Ok(MapKind::DeProx),
            "de-admm" | "admm" => Ok(MapKind::DeAdmm),
            other => Err(Error::invalid(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IterationMap {
    kind: MapKind,
    op: LinearOperator,
    net: RegNet,
    /// `eta` for DE-Grad/DE-Prox, `alpha` for DE-ADMM.
    step: f64,
}

impl IterationMap {
    pub fn new(kind: MapKind, op: LinearOperator, net: RegNet, step: f64) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::invalid(format!("{} step must be > 0, got {step}", kind.name())));
        }
        if net.channels() != op.domain().channels {
            return Err(Error::invalid(format!(
                "network has {} channels but the operator domain is {}",
                net.channels(),
                op.domain()
            )));
        }
        Ok(IterationMap { kind, op, net, step })
    }

    /// Skips the step-size check; used to probe degenerate maps.
    #[cfg(test)]
    pub(crate) fn new_unchecked(kind: MapKind, op: LinearOperator, net: RegNet, step: f64) -> Self {
        IterationMap { kind, op, net, step }
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn operator(&self) -> &LinearOperator {
        &self.op
    }

    pub fn net(&self) -> &RegNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut RegNet {
        &mut self.net
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn set_step(&mut self, step: f64) -> Result<()> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::invalid(format!("step must be > 0, got {step}")));
        }
        self.step = step;
        Ok(())
    }

    pub fn image_shape(&self) -> Shape {
        self.op.domain()
    }

    pub fn state_len(&self) -> usize {
        self.kind.arity() * self.op.domain().len()
    }

    /// State for a starting image: `x0`, or `(x0, 0)` for DE-ADMM.
    pub fn initial_state(&self, x0: &Tensor) -> Result<Vec<f64>> {
        x0.expect_shape(self.op.domain())?;
        let mut s = x0.data().to_vec();
        s.resize(self.state_len(), 0.0);
        Ok(s)
    }

    /// The image part of a state.
    pub fn image_of(&self, state: &[f64]) -> Result<Tensor> {
        if state.len() != self.state_len() {
            return Err(Error::LengthMismatch { expected: self.state_len(), got: state.len() });
        }
        Tensor::new(self.op.domain(), state[..self.op.domain().len()].to_vec())
    }

    /// Precomputes the measurement-dependent term `A^T y`.
    pub fn bind(&self, y: &Tensor) -> Result<BoundMap<'_>> {
        let aty = self.op.adjoint(y)?;
        Ok(BoundMap { map: self, aty })
    }
}

/// An iteration map with its measurement fixed.
#[derive(Debug, Clone)]
pub struct BoundMap<'a> {
    map: &'a IterationMap,
    aty: Tensor,
}

/// What the VJPs at one state need: the network tape at the point where
/// `R` was evaluated.
#[derive(Debug, Clone)]
pub struct Linearization<'a> {
    map: &'a IterationMap,
    tape: Tape,
}

impl<'a> BoundMap<'a> {
    pub fn map(&self) -> &'a IterationMap {
        self.map
    }

    fn split<'s>(&self, state: &'s [f64]) -> Result<(Tensor, Option<Tensor>)> {
        let shape = self.map.op.domain();
        let n = shape.len();
        if state.len() != self.map.state_len() {
            return Err(Error::LengthMismatch { expected: self.map.state_len(), got: state.len() });
        }
        let x = Tensor::new(shape, state[..n].to_vec())?;
        let u = if self.map.kind == MapKind::DeAdmm { Some(Tensor::new(shape, state[n..].to_vec())?) } else { None };
        Ok((x, u))
    }

    /// `x + eta A^T (y - A x)`
    fn gradient_step(&self, x: &Tensor) -> Result<Tensor> {
        let eta = self.map.step;
        let mut w = self.map.op.normal(x)?.scale(-eta);
        w.axpy(eta, &self.aty)?;
        w.axpy(1.0, x)?;
        Ok(w)
    }

    /// The point where `R` is evaluated.
    fn net_input(&self, x: &Tensor, u: Option<&Tensor>) -> Result<Tensor> {
        match self.map.kind {
            MapKind::DeGrad => Ok(x.clone()),
            MapKind::DeProx => self.gradient_step(x),
            MapKind::DeAdmm => x.sub(u.expect("admm state has u")),
        }
    }

    fn finish(&self, x: &Tensor, u: Option<&Tensor>, r: Tensor) -> Result<Vec<f64>> {
        let map = self.map;
        match map.kind {
            MapKind::DeGrad => {
                let mut out = self.gradient_step(x)?;
                out.axpy(-map.step, &r)?;
                Ok(out.into_vec())
            }
            MapKind::DeProx => Ok(r.into_vec()),
            MapKind::DeAdmm => {
                let u = u.expect("admm state has u");
                let mut b = self.aty.scale(map.step);
                b.axpy(1.0, &r)?;
                b.axpy(1.0, u)?;
                let (x_next, _) = solve_regularized_normal(&map.op, map.step, &b, ADMM_CG_TOL, ADMM_CG_MAX_ITER)?;
                let mut u_next = u.add(&r)?;
                u_next.axpy(-1.0, &x_next)?;
                let mut out = x_next.into_vec();
                out.extend_from_slice(u_next.data());
                Ok(out)
            }
        }
    }

    /// `f(state)`.
    pub fn apply(&self, state: &[f64]) -> Result<Vec<f64>> {
        let (x, u) = self.split(state)?;
        let w = self.net_input(&x, u.as_ref())?;
        let r = self.map.net.forward(&w)?;
        self.finish(&x, u.as_ref(), r)
    }

    /// `f(state)` and the linearization at `state`.
    pub fn apply_linearized(&self, state: &[f64]) -> Result<(Vec<f64>, Linearization<'a>)> {
        let (x, u) = self.split(state)?;
        let w = self.net_input(&x, u.as_ref())?;
        let (r, tape) = self.map.net.forward_tape(&w)?;
        let out = self.finish(&x, u.as_ref(), r)?;
        Ok((out, Linearization { map: self.map, tape }))
    }

    pub fn linearize(&self, state: &[f64]) -> Result<Linearization<'a>> {
        let (x, u) = self.split(state)?;
        let w = self.net_input(&x, u.as_ref())?;
        let (_, tape) = self.map.net.forward_tape(&w)?;
        Ok(Linearization { map: self.map, tape })
    }
}

impl Linearization<'_> {
    /// Number of `f64` values held, for memory accounting.
    pub fn stored_values(&self) -> usize {
        self.tape.stored_values()
    }

    fn backward(&self, g: &[f64], want_params: bool) -> Result<(Vec<f64>, Option<ParamVector>)> {
        let map = self.map;
        let shape = map.op.domain();
        let n = shape.len();
        if g.len() != map.state_len() {
            return Err(Error::LengthMismatch { expected: map.state_len(), got: g.len() });
        }
        let net = &map.net;
        let eta = map.step;
        match map.kind {
            MapKind::DeGrad => {
                // J^T g = g - eta A^T A g - eta J_R^T g
                let g = Tensor::new(shape, g.to_vec())?;
                let (jr, p) = if want_params {
                    let (jr, mut p) = net.vjp(&self.tape, &g)?;
                    p.scale(-eta);
                    (jr, Some(p))
                } else {
                    (net.vjp_input(&self.tape, &g)?, None)
                };
                let mut out = map.op.normal(&g)?.scale(-eta);
                out.axpy(1.0, &g)?;
                out.axpy(-eta, &jr)?;
                Ok((out.into_vec(), p))
            }
            MapKind::DeProx => {
                // J^T g = (I - eta A^T A) J_R^T g
                let g = Tensor::new(shape, g.to_vec())?;
                let (h, p) = if want_params {
                    let (h, p) = net.vjp(&self.tape, &g)?;
                    (h, Some(p))
                } else {
                    (net.vjp_input(&self.tape, &g)?, None)
                };
                let mut out = map.op.normal(&h)?.scale(-eta);
                out.axpy(1.0, &h)?;
                Ok((out.into_vec(), p))
            }
            MapKind::DeAdmm => {
                let gx = Tensor::new(shape, g[..n].to_vec())?;
                let gu = Tensor::new(shape, g[n..].to_vec())?;
                // x' = M^{-1} b with M symmetric; u' = u + z - x'.
                let (gb, _) =
                    solve_regularized_normal(&map.op, eta, &gx.sub(&gu)?, ADMM_CG_TOL, ADMM_CG_MAX_ITER)?;
                let gz = gb.add(&gu)?;
                let (gw, p) = if want_params {
                    let (gw, p) = net.vjp(&self.tape, &gz)?;
                    (gw, Some(p))
                } else {
                    (net.vjp_input(&self.tape, &gz)?, None)
                };
                let gu_out = gz.sub(&gw)?;
                let mut out = gw.into_vec();
                out.extend_from_slice(gu_out.data());
                Ok((out, p))
            }
        }
    }

    /// `(df/dstate)^T g`.
    pub fn vjp_state(&self, g: &[f64]) -> Result<Vec<f64>> {
        Ok(self.backward(g, false)?.0)
    }

    /// `(df/dtheta)^T g`.
    pub fn vjp_params(&self, g: &[f64]) -> Result<ParamVector> {
        Ok(self.backward(g, true)?.1.expect("requested"))
    }

    pub fn vjp(&self, g: &[f64]) -> Result<(Vec<f64>, ParamVector)> {
        let (s, p) = self.backward(g, true)?;
        Ok((s, p.expect("requested")))
    }
}

/// One DE-Grad step from `x`.
pub fn de_grad_step(map: &IterationMap, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    expect_kind(map, MapKind::DeGrad)?;
    let next = map.bind(y)?.apply(x.data())?;
    Tensor::new(x.shape(), next)
}

/// One DE-Prox step from `x`.
pub fn de_prox_step(map: &IterationMap, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    expect_kind(map, MapKind::DeProx)?;
    let next = map.bind(y)?.apply(x.data())?;
    Tensor::new(x.shape(), next)
}

/// One DE-ADMM step from `(x, u)`.
pub fn de_admm_step(map: &IterationMap, x: &Tensor, u: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
    expect_kind(map, MapKind::DeAdmm)?;
    let mut state = x.data().to_vec();
    state.extend_from_slice(u.data());
    let next = map.bind(y)?.apply(&state)?;
    let n = x.len();
    Ok((Tensor::new(x.shape(), next[..n].to_vec())?, Tensor::new(x.shape(), next[n..].to_vec())?))
}

fn expect_kind(map: &IterationMap, kind: MapKind) -> Result<()> {
    if map.kind != kind {
        return Err(Error::invalid(format!("expected a {} map, got {}", kind.name(), map.kind.name())));
    }
    Ok(())
}
