//! Learnable SVF predictor with channel dropout and hand-written backprop.
//!
//! The fixed and moving images are stacked as two channels, block-averaged by
//! the downsample factor and passed through a stack of 3x3x3 convolutions
//! (zero padding) with leaky-ReLU and channel dropout after every hidden
//! layer. A zero-initialized head produces a 3-channel velocity field on the
//! coarse grid, which is trilinearly upsampled back to the image grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{average_pool, upsample_field, upsample_field_adjoint, Geometry, ScalarVolume, VectorField};
use crate::rng::{derive_seed, label, rng_from_seed};

const KERNEL: usize = 27;

/// Network shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Output channels of each hidden convolution.
    pub hidden: Vec<usize>,
    /// Integer block-averaging factor applied to the inputs.
    pub downsample: usize,
    pub leaky_slope: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: vec![16, 16],
            downsample: 4,
            leaky_slope: 0.2,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.downsample == 0 {
            return Err(Error::InvalidArgument("downsample factor must be >= 1".into()));
        }
        if self.hidden.iter().any(|&c| c == 0) {
            return Err(Error::InvalidArgument("hidden layers need >= 1 channel".into()));
        }
        if !(self.leaky_slope.is_finite() && (0.0..1.0).contains(&self.leaky_slope)) {
            return Err(Error::InvalidArgument(format!(
                "leaky slope {} outside [0, 1)",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// `(in, out)` channel counts of every convolution, head last.
    pub fn layer_channels(&self) -> Vec<(usize, usize)> {
        let mut chans = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = 2;
        for &h in &self.hidden {
            chans.push((prev, h));
            prev = h;
        }
        chans.push((prev, 3));
        chans
    }
}

/// One 3x3x3 convolution. Kernel layout is `[out][in][kz][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            weight: vec![0.0; out_ch * in_ch * KERNEL],
            bias: vec![0.0; out_ch],
        }
    }
}

/// Learnable parameters plus the architecture and dropout rate they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams {
    arch: Architecture,
    dropout: f64,
    layers: Vec<ConvLayer>,
    lineage: Vec<u64>,
}

/// Gradient blocks in the same order as [`PredictorParams::blocks`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn is_zero(&self) -> bool {
        self.blocks.iter().flatten().all(|&g| g == 0.0)
    }
}

fn check_dropout(p: f64) -> Result<()> {
    if !(p.is_finite() && (0.0..1.0).contains(&p)) {
        return Err(Error::InvalidArgument(format!("dropout rate {p} outside [0, 1)")));
    }
    Ok(())
}

impl PredictorParams {
    /// He-uniform kernels (bound `sqrt(6 / fan_in)`), zero biases and an
    /// all-zero head so the fresh network predicts the identity transform.
    pub fn init(arch: Architecture, dropout: f64, seed: u64) -> Result<Self> {
        arch.validate()?;
        check_dropout(dropout)?;
        let mut rng = rng_from_seed(derive_seed(seed, label::INIT));
        let chans = arch.layer_channels();
        let last = chans.len() - 1;
        let layers = chans
            .into_iter()
            .enumerate()
            .map(|(l, (i, o))| {
                let mut layer = ConvLayer::zeros(i, o);
                if l != last {
                    let bound = (6.0 / (i * KERNEL) as f64).sqrt();
                    layer.weight.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
                }
                layer
            })
            .collect();
        Ok(Self {
            arch,
            dropout,
            layers,
            lineage: vec![seed],
        })
    }

    /// Rebuild from raw blocks (checkpoint loading).
    pub fn from_blocks(
        arch: Architecture,
        dropout: f64,
        lineage: Vec<u64>,
        blocks: Vec<Vec<f64>>,
    ) -> Result<Self> {
        arch.validate()?;
        check_dropout(dropout)?;
        let chans = arch.layer_channels();
        if blocks.len() != 2 * chans.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter blocks, got {}",
                2 * chans.len(),
                blocks.len()
            )));
        }
        let mut it = blocks.into_iter();
        let mut layers = Vec::with_capacity(chans.len());
        for (i, o) in chans {
            let weight = it.next().expect("counted");
            let bias = it.next().expect("counted");
            if weight.len() != o * i * KERNEL || bias.len() != o {
                return Err(Error::InvalidArgument(format!(
                    "block shapes do not match a {i}->{o} convolution"
                )));
            }
            if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("parameters"));
            }
            layers.push(ConvLayer {
                in_ch: i,
                out_ch: o,
                weight,
                bias,
            });
        }
        Ok(Self {
            arch,
            dropout,
            layers,
            lineage,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    /// Returns a copy with a different dropout rate (shapes are unaffected).
    pub fn with_dropout(&self, p: f64) -> Result<Self> {
        check_dropout(p)?;
        Ok(Self {
            dropout: p,
            ..self.clone()
        })
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    /// Seeds of every stochastic process that shaped these parameters.
    pub fn lineage(&self) -> &[u64] {
        &self.lineage
    }

    pub(crate) fn push_lineage(&mut self, seed: u64) {
        self.lineage.push(seed);
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub(crate) fn blocks_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Names and shapes of the parameter blocks, in block order.
    pub fn block_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("conv{i}.weight"), vec![l.out_ch, l.in_ch, 3, 3, 3]),
                    (format!("conv{i}.bias"), vec![l.out_ch]),
                ]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            blocks: self.blocks().iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Per-hidden-layer channel keep masks (entries are 0 or 1).
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub layers: Vec<Vec<f64>>,
    pub seed: u64,
}

impl DropoutMask {
    pub fn kept_fraction(&self) -> f64 {
        let (kept, total) = self
            .layers
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(k, t), &m| (k + m, t + 1));
        kept / total.max(1) as f64
    }
}

/// Keep each hidden channel independently with probability `1 - p`.
pub fn sample_dropout_mask(params: &PredictorParams, seed: u64) -> DropoutMask {
    let mut rng = rng_from_seed(seed);
    let keep = 1.0 - params.dropout;
    let layers = params
        .arch
        .hidden
        .iter()
        .map(|&c| {
            (0..c)
                .map(|_| if rng.random::<f64>() < keep { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    DropoutMask { layers, seed }
}

/// Activations cached by [`forward`] for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardTape {
    full: Geometry,
    coarse: Geometry,
    /// Input of every convolution (pooled images first).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
    /// Per-hidden-layer channel multipliers (mask times inverse keep rate).
    dropout_scale: Option<Vec<Vec<f64>>>,
    coarse_svf: VectorField,
}

impl ForwardTape {
    /// The velocity field on the coarse grid, before upsampling.
    pub fn coarse_svf(&self) -> &VectorField {
        &self.coarse_svf
    }

    pub fn full_geometry(&self) -> &Geometry {
        &self.full
    }
}

/// Zero-padded 3x3x3 convolution, accumulating into `out` (which must hold
/// the bias already).
fn conv_forward(input: &[f64], dims: &[usize; 3], layer: &ConvLayer, out: &mut [f64]) {
    let n = dims[0] * dims[1] * dims[2];
    let [nx, ny, nz] = *dims;
    for oc in 0..layer.out_ch {
        let o = &mut out[oc * n..(oc + 1) * n];
        for ic in 0..layer.in_ch {
            let inp = &input[ic * n..(ic + 1) * n];
            let w = &layer.weight[(oc * layer.in_ch + ic) * KERNEL..][..KERNEL];
            for (k, &wk) in w.iter().enumerate() {
                if wk == 0.0 {
                    continue;
                }
                let (dx, dy, dz) = (k % 3, (k / 3) % 3, k / 9);
                let (x0, x1) = (1usize.saturating_sub(dx), (nx + 1 - dx).min(nx));
                let (y0, y1) = (1usize.saturating_sub(dy), (ny + 1 - dy).min(ny));
                let (z0, z1) = (1usize.saturating_sub(dz), (nz + 1 - dz).min(nz));
                for z in z0..z1 {
                    let sz = z + dz - 1;
                    for y in y0..y1 {
                        let sy = y + dy - 1;
                        let ob = x0 + nx * (y + ny * z);
                        let ib = x0 + dx - 1 + nx * (sy + ny * sz);
                        let len = x1 - x0;
                        for (ov, iv) in o[ob..ob + len].iter_mut().zip(&inp[ib..ib + len]) {
                            *ov += wk * iv;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution: returns `(dW, db)` and, when requested,
/// accumulates the input gradient into `d_input`.
fn conv_backward(
    input: &[f64],
    dims: &[usize; 3],
    layer: &ConvLayer,
    d_out: &[f64],
    mut d_input: Option<&mut [f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let n = dims[0] * dims[1] * dims[2];
    let [nx, ny, nz] = *dims;
    let mut dw = vec![0.0; layer.weight.len()];
    let db = (0..layer.out_ch)
        .map(|oc| crate::grid::sum(&d_out[oc * n..(oc + 1) * n]))
        .collect();
    for oc in 0..layer.out_ch {
        let g = &d_out[oc * n..(oc + 1) * n];
        for ic in 0..layer.in_ch {
            let inp = &input[ic * n..(ic + 1) * n];
            let wbase = (oc * layer.in_ch + ic) * KERNEL;
            for k in 0..KERNEL {
                let (dx, dy, dz) = (k % 3, (k / 3) % 3, k / 9);
                let (x0, x1) = (1usize.saturating_sub(dx), (nx + 1 - dx).min(nx));
                let (y0, y1) = (1usize.saturating_sub(dy), (ny + 1 - dy).min(ny));
                let (z0, z1) = (1usize.saturating_sub(dz), (nz + 1 - dz).min(nz));
                let len = x1 - x0;
                let wk = layer.weight[wbase + k];
                let mut acc = 0.0;
                for z in z0..z1 {
                    let sz = z + dz - 1;
                    for y in y0..y1 {
                        let sy = y + dy - 1;
                        let ob = x0 + nx * (y + ny * z);
                        let ib = x0 + dx - 1 + nx * (sy + ny * sz);
                        let gr = &g[ob..ob + len];
                        acc += gr.iter().zip(&inp[ib..ib + len]).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(di) = d_input.as_deref_mut() {
                            let dst = &mut di[ic * n + ib..ic * n + ib + len];
                            for (d, gv) in dst.iter_mut().zip(gr) {
                                *d += wk * gv;
                            }
                        }
                    }
                }
                dw[wbase + k] = acc;
            }
        }
    }
    (dw, db)
}

fn coarse_geometry(params: &PredictorParams, fixed: &ScalarVolume) -> Result<Geometry> {
    let f = params.arch.downsample;
    let dims = fixed.dims();
    if dims.iter().any(|&n| n % f != 0 || n / f < 2) {
        return Err(Error::InvalidDims(format!(
            "image dims {dims:?} must be multiples of {f} with >= 2 coarse voxels"
        )));
    }
    Geometry::new(dims.map(|n| n / f), fixed.spacing().map(|s| s * f as f64))
}

fn check_inputs(fixed: &ScalarVolume, moving: &ScalarVolume) -> Result<()> {
    fixed.geometry().check_same(moving.geometry())?;
    let out_of_range = fixed
        .data()
        .iter()
        .chain(moving.data())
        .any(|v| !(-1.0..=1.0).contains(v));
    if out_of_range {
        log::warn!("predictor inputs fall outside [-1, 1]; were they preprocessed?");
    }
    Ok(())
}

/// Run the network and return the coarse velocity field plus the tape.
///
/// `mask = None` is the deterministic pass; with a mask, kept channels are
/// scaled by `1 / (1 - p)` (inverted dropout).
pub fn forward_coarse(
    params: &PredictorParams,
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    mask: Option<&DropoutMask>,
) -> Result<ForwardTape> {
    check_inputs(fixed, moving)?;
    let coarse = coarse_geometry(params, fixed)?;
    let n = coarse.len();
    let hidden = &params.arch.hidden;
    let dropout_scale: Option<Vec<Vec<f64>>> = match mask {
        None => None,
        Some(m) => {
            if m.layers.len() != hidden.len()
                || m.layers.iter().zip(hidden).any(|(l, &c)| l.len() != c)
            {
                return Err(Error::InvalidArgument(
                    "dropout mask does not match the architecture".into(),
                ));
            }
            let s = 1.0 / (1.0 - params.dropout);
            Some(m.layers.iter().map(|l| l.iter().map(|&k| k * s).collect()).collect())
        }
    };

    let f = params.arch.downsample;
    let mut x = average_pool(fixed, f)?.into_data();
    x.extend(average_pool(moving, f)?.into_data());

    let slope = params.arch.leaky_slope;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(hidden.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let mut out: Vec<f64> = layer
            .bias
            .iter()
            .flat_map(|&b| std::iter::repeat_n(b, n))
            .collect();
        conv_forward(&x, &coarse.dims, layer, &mut out);
        inputs.push(x);
        if l < hidden.len() {
            let mut act: Vec<f64> = out.iter().map(|&z| if z > 0.0 { z } else { slope * z }).collect();
            if let Some(scales) = &dropout_scale {
                for (c, &s) in scales[l].iter().enumerate() {
                    act[c * n..(c + 1) * n].iter_mut().for_each(|v| *v *= s);
                }
            }
            pre.push(out);
            x = act;
        } else {
            x = out;
        }
    }
    let coarse_svf = VectorField::new(coarse, x)?;
    if !coarse_svf.is_finite() {
        return Err(Error::NonFinite("predicted velocity"));
    }
    Ok(ForwardTape {
        full: *fixed.geometry(),
        coarse,
        inputs,
        pre,
        dropout_scale,
        coarse_svf,
    })
}

/// Predict the full-resolution velocity field `v = G(fixed, moving)`.
pub fn forward(
    params: &PredictorParams,
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    mask: Option<&DropoutMask>,
) -> Result<(VectorField, ForwardTape)> {
    let tape = forward_coarse(params, fixed, moving, mask)?;
    let mut v = upsample_field(&tape.coarse_svf, tape.full.dims)?;
    // keep the caller's spacing exactly
    v = VectorField::new(tape.full, v.into_data())?;
    Ok((v, tape))
}

/// Reverse-mode gradients of [`forward`] for every parameter block.
pub fn backward(params: &PredictorParams, tape: &ForwardTape, dl_dv: &VectorField) -> Result<Gradients> {
    tape.full.check_same(dl_dv.geometry())?;
    if tape.inputs.len() != params.layers.len() || tape.pre.len() != params.arch.hidden.len() {
        return Err(Error::TapeMismatch("layer count".into()));
    }
    let up = VectorField::new(
        Geometry::new(dl_dv.dims(), [1.0; 3])?,
        dl_dv.data().to_vec(),
    )?;
    let coarse_unit = Geometry::new(tape.coarse.dims, [1.0; 3])?;
    let g_coarse = upsample_field_adjoint(&up, &coarse_unit)?;
    backward_coarse(params, tape, g_coarse.data())
}

/// Backprop from a gradient on the coarse velocity field.
pub fn backward_coarse(params: &PredictorParams, tape: &ForwardTape, dl_dcoarse: &[f64]) -> Result<Gradients> {
    let n = tape.coarse.len();
    if dl_dcoarse.len() != 3 * n {
        return Err(Error::TapeMismatch("coarse gradient length".into()));
    }
    let slope = params.arch.leaky_slope;
    let nl = params.layers.len();
    let mut blocks = vec![Vec::new(); 2 * nl];
    let mut g = dl_dcoarse.to_vec();
    for l in (0..nl).rev() {
        let layer = &params.layers[l];
        if tape.inputs[l].len() != layer.in_ch * n {
            return Err(Error::TapeMismatch(format!("layer {l} input size")));
        }
        let mut d_in = if l > 0 { Some(vec![0.0; layer.in_ch * n]) } else { None };
        let (dw, db) = conv_backward(&tape.inputs[l], &tape.coarse.dims, layer, &g, d_in.as_deref_mut());
        blocks[2 * l] = dw;
        blocks[2 * l + 1] = db;
        if let Some(mut d) = d_in {
            let h = l - 1;
            if let Some(scales) = &tape.dropout_scale {
                for (c, &s) in scales[h].iter().enumerate() {
                    d[c * n..(c + 1) * n].iter_mut().for_each(|v| *v *= s);
                }
            }
            for (dv, &z) in d.iter_mut().zip(&tape.pre[h]) {
                if z <= 0.0 {
                    *dv *= slope;
                }
            }
            g = d;
        }
    }
    Ok(Gradients { blocks })
}
