//! The learned regularizer: a small convolutional network `N` used either
//! as `R = I + N` (denoiser / proximal role) or as `R = N` (gradient role).
//!
//! Every layer is a same-size convolution with symmetric padding; hidden
//! layers use leaky-ReLU with slope 0.1 and the last layer is linear.
//! Forward, input-VJP, parameter-VJP and JVP are written out by hand.

mod checkpoint;
mod lipschitz;
mod pretrain;
mod spectral;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use lipschitz::{lipschitz_estimate, lipschitz_estimate_at, LipschitzEstimate};
pub use pretrain::{pretrain_denoiser, PretrainConfig, PretrainedDenoiser};
pub use spectral::{check_layer_norms, SPECTRAL_TOLERANCE};

use crate::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Shape, Tensor};

pub const LEAKY_SLOPE: f64 = 0.1;

/// Power iterations used to seed the persistent spectral vectors at
/// construction.
const INIT_POWER_ITERS: usize = 50;

#[inline]
fn leaky(z: f64) -> f64 {
    if z >= 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

/// Derivative of leaky-ReLU read from its *output*; the kink takes the
/// positive-side slope.
#[inline]
fn leaky_slope_from_output(a: f64) -> f64 {
    if a >= 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Architecture description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    /// Image channels (1 real, 2 complex).
    pub channels: usize,
    pub hidden: usize,
    /// Number of convolution layers.
    pub depth: usize,
    pub kernel: usize,
    /// `R = I + N` when true.
    pub residual: bool,
    /// Side length of the images the spectral estimates refer to.
    pub spectral_size: usize,
}

impl NetSpec {
    /// Desk-scale default: depth 6, 3x3 kernels, 32 hidden channels.
    pub fn desk(channels: usize, spectral_size: usize) -> Self {
        NetSpec { channels, hidden: 32, depth: 6, kernel: 3, residual: true, spectral_size }
    }

    fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.channels == 0 || (self.depth > 1 && self.hidden == 0) {
            return Err(Error::invalid(format!("degenerate network spec {self:?}")));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid(format!("kernel size must be odd, got {}", self.kernel)));
        }
        Ok(())
    }

    fn layer_channels(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|l| {
                let c_in = if l == 0 { self.channels } else { self.hidden };
                let c_out = if l + 1 == self.depth { self.channels } else { self.hidden };
                (c_in, c_out)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    /// `[c_out][c_in][k][k]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// Persistent power-iteration vectors at the spectral image size.
    pub(crate) u: Vec<f64>,
    pub(crate) v: Vec<f64>,
}

impl ConvLayer {
    fn geom(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom { c_in: self.c_in, c_out: self.c_out, k: self.k, h, w }
    }

    /// Layer from explicit weights. Spectral vectors are filled in by
    /// [`RegNet::from_layers`].
    pub fn new(c_in: usize, c_out: usize, k: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != c_out * c_in * k * k {
            return Err(Error::LengthMismatch { expected: c_out * c_in * k * k, got: weight.len() });
        }
        if bias.len() != c_out {
            return Err(Error::LengthMismatch { expected: c_out, got: bias.len() });
        }
        if k % 2 == 0 {
            return Err(Error::invalid(format!("kernel size must be odd, got {k}")));
        }
        Ok(ConvLayer { c_in, c_out, k, weight, bias, u: Vec::new(), v: Vec::new() })
    }
}

/// Position of one layer's tensors inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlot {
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

/// All weights and biases, flattened layer by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub data: Vec<f64>,
    pub layout: Vec<LayerSlot>,
}

impl ParamVector {
    pub fn zeros_like(other: &ParamVector) -> Self {
        ParamVector { data: vec![0.0; other.data.len()], layout: other.layout.clone() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn norm(&self) -> f64 {
        crate::tensor::norm(&self.data)
    }

    pub fn add_scaled(&mut self, a: f64, other: &ParamVector) {
        crate::tensor::vec_axpy(&mut self.data, a, &other.data);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Activations recorded by [`RegNet::forward_tape`]: the input of every
/// layer. Hidden-layer activation masks are recovered from the sign of
/// the next layer's input.
#[derive(Debug, Clone)]
pub struct Tape {
    shape: Shape,
    inputs: Vec<Vec<f64>>,
}

impl Tape {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// Number of stored `f64` values.
    pub fn stored_values(&self) -> usize {
        self.inputs.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegNet {
    layers: Vec<ConvLayer>,
    residual: bool,
    channels: usize,
    spectral_size: usize,
}

impl RegNet {
    /// He-initialized network followed by one spectral projection, so
    /// every layer starts with operator norm at most 1.
    pub fn new(spec: NetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeededRng::new(seed);
        let layers = spec
            .layer_channels()
            .into_iter()
            .map(|(c_in, c_out)| {
                let fan_in = (c_in * spec.kernel * spec.kernel) as f64;
                let weight = rng.gaussian_vec(c_out * c_in * spec.kernel * spec.kernel, (2.0 / fan_in).sqrt());
                ConvLayer::new(c_in, c_out, spec.kernel, weight, vec![0.0; c_out])
            })
            .collect::<Result<Vec<_>>>()?;
        let mut net = RegNet::from_layers(layers, spec.residual, spec.spectral_size, crate::rng::sub_seed(seed, "spectral"))?;
        net.spectral_project(INIT_POWER_ITERS);
        Ok(net)
    }

    /// Like [`RegNet::new`] but with the last layer zeroed, so `N = 0` at
    /// initialization while gradients still reach every layer.
    pub fn new_zero_output(spec: NetSpec, seed: u64) -> Result<Self> {
        let mut net = RegNet::new(spec, seed)?;
        let last = net.layers.last_mut().expect("depth >= 1");
        last.weight.iter_mut().for_each(|w| *w = 0.0);
        last.bias.iter_mut().for_each(|b| *b = 0.0);
        Ok(net)
    }

    /// All weights and biases zero.
    pub fn zeros(spec: NetSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_channels()
            .into_iter()
            .map(|(c_in, c_out)| {
                ConvLayer::new(c_in, c_out, spec.kernel, vec![0.0; c_out * c_in * spec.kernel * spec.kernel], vec![0.0; c_out])
            })
            .collect::<Result<Vec<_>>>()?;
        RegNet::from_layers(layers, spec.residual, spec.spectral_size, 0)
    }

    /// Assembles a network from explicit layers, checking that channel
    /// counts chain and that input and output channels agree.
    pub fn from_layers(mut layers: Vec<ConvLayer>, residual: bool, spectral_size: usize, seed: u64) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::invalid("network needs at least one layer"))?;
        let channels = first.c_in;
        for pair in layers.windows(2) {
            if pair[0].c_out != pair[1].c_in {
                return Err(Error::invalid(format!(
                    "layer output {} does not feed layer input {}",
                    pair[0].c_out, pair[1].c_in
                )));
            }
        }
        if layers.last().map(|l| l.c_out) != Some(channels) {
            return Err(Error::invalid("last layer must output the image channel count"));
        }
        if spectral_size == 0 {
            return Err(Error::invalid("spectral_size must be >= 1"));
        }
        let mut rng = SeededRng::new(seed);
        let plane = spectral_size * spectral_size;
        for layer in &mut layers {
            if layer.u.len() != layer.c_in * plane {
                let u = rng.gaussian_vec(layer.c_in * plane, 1.0);
                let n = crate::tensor::norm(&u);
                layer.u = u.into_iter().map(|x| x / n).collect();
            }
            if layer.v.len() != layer.c_out * plane {
                layer.v = vec![0.0; layer.c_out * plane];
            }
        }
        Ok(RegNet { layers, residual, channels, spectral_size })
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn residual(&self) -> bool {
        self.residual
    }

    pub fn set_residual(&mut self, residual: bool) {
        self.residual = residual;
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spectral_size(&self) -> usize {
        self.spectral_size
    }

    pub fn spec(&self) -> NetSpec {
        NetSpec {
            channels: self.channels,
            hidden: if self.layers.len() > 1 { self.layers[0].c_out } else { 0 },
            depth: self.layers.len(),
            kernel: self.layers[0].k,
            residual: self.residual,
            spectral_size: self.spectral_size,
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().channels != self.channels {
            return Err(Error::ShapeMismatch {
                expected: x.shape().with_channels(self.channels),
                got: x.shape(),
            });
        }
        Ok(())
    }

    pub fn param_layout(&self) -> Vec<LayerSlot> {
        let mut at = 0;
        self.layers
            .iter()
            .map(|l| {
                let weight = at..at + l.weight.len();
                at = weight.end;
                let bias = at..at + l.bias.len();
                at = bias.end;
                LayerSlot { weight, bias }
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> ParamVector {
        let mut data = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            data.extend_from_slice(&l.weight);
            data.extend_from_slice(&l.bias);
        }
        ParamVector { data, layout: self.param_layout() }
    }

    pub fn set_params(&mut self, p: &ParamVector) -> Result<()> {
        if p.data.len() != self.num_params() || p.layout != self.param_layout() {
            return Err(Error::LengthMismatch { expected: self.num_params(), got: p.data.len() });
        }
        for (l, slot) in self.layers.iter_mut().zip(&p.layout) {
            l.weight.copy_from_slice(&p.data[slot.weight.clone()]);
            l.bias.copy_from_slice(&p.data[slot.bias.clone()]);
        }
        Ok(())
    }

    /// `R(x)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let s = x.shape();
        let last = self.layers.len() - 1;
        let mut a = x.data().to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = conv::forward(&layer.weight, Some(&layer.bias), &a, &layer.geom(s.height, s.width));
            if i < last {
                z.iter_mut().for_each(|v| *v = leaky(*v));
            }
            a = z;
        }
        if self.residual {
            crate::tensor::vec_axpy(&mut a, 1.0, x.data());
        }
        Ok(Tensor::from_vec_unchecked(s, a))
    }

    /// `R(x)` together with the activations needed for VJPs and JVPs.
    pub fn forward_tape(&self, x: &Tensor) -> Result<(Tensor, Tape)> {
        self.check_input(x)?;
        let s = x.shape();
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x.data().to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = conv::forward(&layer.weight, Some(&layer.bias), &a, &layer.geom(s.height, s.width));
            if i < last {
                z.iter_mut().for_each(|v| *v = leaky(*v));
            }
            inputs.push(std::mem::replace(&mut a, z));
        }
        if self.residual {
            crate::tensor::vec_axpy(&mut a, 1.0, x.data());
        }
        Ok((Tensor::from_vec_unchecked(s, a), Tape { shape: s, inputs }))
    }

    fn check_tape(&self, tape: &Tape, t: &Tensor) -> Result<()> {
        t.expect_shape(tape.shape)?;
        if tape.inputs.len() != self.layers.len() {
            return Err(Error::invalid("tape was recorded by a different network"));
        }
        Ok(())
    }

    /// Backpropagates `cotangent` through the layers; optionally collects
    /// the parameter gradient.
    fn backward(&self, tape: &Tape, cotangent: &Tensor, want_params: bool) -> (Vec<f64>, Option<Vec<f64>>) {
        let s = tape.shape;
        let last = self.layers.len() - 1;
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        let mut g = cotangent.data().to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let geom = layer.geom(s.height, s.width);
            if i < last {
                let next_input = &tape.inputs[i + 1];
                for (gv, a) in g.iter_mut().zip(next_input) {
                    *gv *= leaky_slope_from_output(*a);
                }
            }
            if want_params {
                let padded = conv::pad(&tape.inputs[i], layer.c_in, &geom);
                grads.push((conv::weight_grad(&padded, &g, &geom), conv::bias_grad(&g, &geom)));
            }
            g = conv::adjoint(&layer.weight, &g, &geom);
        }
        if self.residual {
            crate::tensor::vec_axpy(&mut g, 1.0, cotangent.data());
        }
        let params = want_params.then(|| {
            let mut flat = Vec::with_capacity(self.num_params());
            for (w, b) in grads.into_iter().rev() {
                flat.extend(w);
                flat.extend(b);
            }
            flat
        });
        (g, params)
    }

    /// `(dR/dx)^T cotangent` at the taped point.
    pub fn vjp_input(&self, tape: &Tape, cotangent: &Tensor) -> Result<Tensor> {
        self.check_tape(tape, cotangent)?;
        Ok(Tensor::from_vec_unchecked(tape.shape, self.backward(tape, cotangent, false).0))
    }

    /// `(dR/dtheta)^T cotangent` at the taped point.
    pub fn vjp_params(&self, tape: &Tape, cotangent: &Tensor) -> Result<ParamVector> {
        self.check_tape(tape, cotangent)?;
        let (_, p) = self.backward(tape, cotangent, true);
        Ok(ParamVector { data: p.expect("requested"), layout: self.param_layout() })
    }

    /// Both VJPs in one backward sweep.
    pub fn vjp(&self, tape: &Tape, cotangent: &Tensor) -> Result<(Tensor, ParamVector)> {
        self.check_tape(tape, cotangent)?;
        let (gx, p) = self.backward(tape, cotangent, true);
        Ok((
            Tensor::from_vec_unchecked(tape.shape, gx),
            ParamVector { data: p.expect("requested"), layout: self.param_layout() },
        ))
    }

    /// `(dR/dx) tangent` at the taped point (forward mode).
    pub fn jvp(&self, tape: &Tape, tangent: &Tensor) -> Result<Tensor> {
        self.check_tape(tape, tangent)?;
        let s = tape.shape;
        let last = self.layers.len() - 1;
        let mut t = tangent.data().to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            t = conv::forward(&layer.weight, None, &t, &layer.geom(s.height, s.width));
            if i < last {
                for (tv, a) in t.iter_mut().zip(&tape.inputs[i + 1]) {
                    *tv *= leaky_slope_from_output(*a);
                }
            }
        }
        if self.residual {
            crate::tensor::vec_axpy(&mut t, 1.0, tangent.data());
        }
        Ok(Tensor::from_vec_unchecked(s, t))
    }
}

/// Convenience wrappers matching the functional operation names.
pub fn regnet_forward(net: &RegNet, x: &Tensor) -> Result<Tensor> {
    net.forward(x)
}

pub fn regnet_vjp_input(net: &RegNet, x: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
    let (_, tape) = net.forward_tape(x)?;
    net.vjp_input(&tape, cotangent)
}

pub fn regnet_vjp_params(net: &RegNet, x: &Tensor, cotangent: &Tensor) -> Result<ParamVector> {
    let (_, tape) = net.forward_tape(x)?;
    net.vjp_params(&tape, cotangent)
}
