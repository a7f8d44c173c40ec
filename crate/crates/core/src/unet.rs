//! Patch-local grading regressor: a compact two-level 3D U-Net with a tanh
//! head, written with explicit forward/backward passes so gradients can be
//! verified against finite differences layer by layer.
//!
//! Feature maps are stored channel-major: channel c occupies a contiguous
//! x-fastest block of nx*ny*nz values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Architecture description. Only depth 2 with 3x3x3 kernels is implemented;
/// the fields stay explicit so checkpoints are self-describing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnetArch {
    pub depth: usize,
    pub base_channels: usize,
    pub kernel: usize,
}

impl Default for UnetArch {
    fn default() -> Self {
        UnetArch {
            depth: 2,
            base_channels: 8,
            kernel: 3,
        }
    }
}

/// One convolution layer (kernel 3 with zero padding 1, or pointwise 1).
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub out_c: usize,
    pub in_c: usize,
    pub kernel: usize,
    pub w: Vec<f32>,
    pub b: Vec<f32>,
}

impl ConvLayer {
    fn init(out_c: usize, in_c: usize, kernel: usize, rng: &mut Rng) -> Self {
        let fan_in = (in_c * kernel * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = (0..out_c * in_c * kernel * kernel * kernel)
            .map(|_| (rng.normal() * std) as f32)
            .collect();
        ConvLayer {
            out_c,
            in_c,
            kernel,
            w,
            b: vec![0.0; out_c],
        }
    }

    fn zeros_like(&self) -> ConvLayer {
        ConvLayer {
            out_c: self.out_c,
            in_c: self.in_c,
            kernel: self.kernel,
            w: vec![0.0; self.w.len()],
            b: vec![0.0; self.b.len()],
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

pub const LAYER_NAMES: [&str; 7] = ["enc1a", "enc1b", "enc2a", "enc2b", "dec1a", "dec1b", "head"];

/// Gradients mirroring the seven convolution layers.
pub type UnetGrads = Vec<ConvLayer>;

/// The grading model: weights plus the geometry they were built for.
#[derive(Clone, Debug)]
pub struct GradingModel {
    pub arch: UnetArch,
    pub patch_dims: (usize, usize, usize),
    pub seed: u64,
    pub layers: Vec<ConvLayer>,
}

fn check_patch_dims(dims: (usize, usize, usize)) -> Result<()> {
    for d in [dims.0, dims.1, dims.2] {
        if d < 2 || d % 2 != 0 {
            return Err(Error::config(format!(
                "patch dims {dims:?} must be even and >= 2 for the two-level model"
            )));
        }
    }
    Ok(())
}

impl GradingModel {
    pub fn init(arch: UnetArch, patch_dims: (usize, usize, usize), seed: u64) -> Result<Self> {
        if arch.depth != 2 || arch.kernel != 3 {
            return Err(Error::config(format!(
                "unsupported architecture {arch:?}: depth must be 2 and kernel 3"
            )));
        }
        if arch.base_channels == 0 {
            return Err(Error::config("base_channels must be positive"));
        }
        check_patch_dims(patch_dims)?;
        let c = arch.base_channels;
        let mut rng = Rng::seed_from_u64(seed);
        let layers = vec![
            ConvLayer::init(c, 1, 3, &mut rng),
            ConvLayer::init(c, c, 3, &mut rng),
            ConvLayer::init(2 * c, c, 3, &mut rng),
            ConvLayer::init(2 * c, 2 * c, 3, &mut rng),
            ConvLayer::init(c, 3 * c, 3, &mut rng),
            ConvLayer::init(c, c, 3, &mut rng),
            ConvLayer::init(1, c, 1, &mut rng),
        ];
        Ok(GradingModel {
            arch,
            patch_dims,
            seed,
            layers,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn zero_grads(&self) -> UnetGrads {
        self.layers.iter().map(|l| l.zeros_like()).collect()
    }

    pub fn voxels(&self) -> usize {
        self.patch_dims.0 * self.patch_dims.1 * self.patch_dims.2
    }

    /// FNV hash over all weight bytes; used for determinism checks.
    pub fn weight_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for l in &self.layers {
            for &w in l.w.iter().chain(l.b.iter()) {
                bytes.extend_from_slice(&w.to_le_bytes());
            }
        }
        crate::rng::fnv1a64(&bytes)
    }

    /// Grade one intensity patch; output has the same voxel count with every
    /// value in [-1, 1].
    pub fn forward(&self, patch: &[f32]) -> Result<Vec<f32>> {
        Ok(self.forward_cached(patch)?.output)
    }

    pub fn forward_cached(&self, patch: &[f32]) -> Result<ForwardCache> {
        if patch.len() != self.voxels() {
            return Err(Error::config(format!(
                "input patch has {} voxels, model expects {:?}",
                patch.len(),
                self.patch_dims
            )));
        }
        let dims = self.patch_dims;
        let half = (dims.0 / 2, dims.1 / 2, dims.2 / 2);
        let c = self.arch.base_channels;

        let mut a1 = conv3_forward(&self.layers[0], patch, dims);
        relu_inplace(&mut a1);
        let mut a2 = conv3_forward(&self.layers[1], &a1, dims);
        relu_inplace(&mut a2);
        let (pooled, argmax) = maxpool2_forward(&a2, c, dims);
        let mut a3 = conv3_forward(&self.layers[2], &pooled, half);
        relu_inplace(&mut a3);
        let mut a4 = conv3_forward(&self.layers[3], &a3, half);
        relu_inplace(&mut a4);
        let up = upsample2_forward(&a4, 2 * c, half);
        let mut cat = Vec::with_capacity(3 * c * volume(dims));
        cat.extend_from_slice(&a2);
        cat.extend_from_slice(&up);
        let mut a5 = conv3_forward(&self.layers[4], &cat, dims);
        relu_inplace(&mut a5);
        let mut a6 = conv3_forward(&self.layers[5], &a5, dims);
        relu_inplace(&mut a6);
        let mut out = conv1_forward(&self.layers[6], &a6, dims);
        for v in &mut out {
            *v = v.tanh();
        }
        Ok(ForwardCache {
            a1,
            a2,
            pooled,
            argmax,
            a3,
            a4,
            cat,
            a5,
            a6,
            output: out,
        })
    }

    /// Backpropagate a loss gradient w.r.t. the output; returns parameter
    /// gradients and the gradient w.r.t. the input patch.
    pub fn backward(
        &self,
        patch: &[f32],
        cache: &ForwardCache,
        d_output: &[f32],
    ) -> (UnetGrads, Vec<f32>) {
        let dims = self.patch_dims;
        let half = (dims.0 / 2, dims.1 / 2, dims.2 / 2);
        let c = self.arch.base_channels;
        let n = volume(dims);
        let mut grads = self.zero_grads();

        // tanh head
        let d_pre: Vec<f32> = d_output
            .iter()
            .zip(&cache.output)
            .map(|(&g, &o)| g * (1.0 - o * o))
            .collect();
        let mut d_a6 = conv1_backward(&self.layers[6], &cache.a6, dims, &d_pre, &mut grads[6]);
        relu_backward_inplace(&mut d_a6, &cache.a6);
        let mut d_a5 = conv3_backward(&self.layers[5], &cache.a5, dims, &d_a6, &mut grads[5]);
        relu_backward_inplace(&mut d_a5, &cache.a5);
        let d_cat = conv3_backward(&self.layers[4], &cache.cat, dims, &d_a5, &mut grads[4]);

        // split concat gradient: first c channels -> skip (a2), rest -> upsample
        let mut d_a2: Vec<f32> = d_cat[..c * n].to_vec();
        let d_up = &d_cat[c * n..];
        let mut d_a4 = upsample2_backward(d_up, 2 * c, half, dims);
        relu_backward_inplace(&mut d_a4, &cache.a4);
        let mut d_a3 = conv3_backward(&self.layers[3], &cache.a3, half, &d_a4, &mut grads[3]);
        relu_backward_inplace(&mut d_a3, &cache.a3);
        let d_pooled = conv3_backward(&self.layers[2], &cache.pooled, half, &d_a3, &mut grads[2]);

        // pooling gradient joins the skip gradient on a2
        maxpool2_backward(&d_pooled, &cache.argmax, c, &mut d_a2);
        relu_backward_inplace(&mut d_a2, &cache.a2);
        let mut d_a1 = conv3_backward(&self.layers[1], &cache.a1, dims, &d_a2, &mut grads[1]);
        relu_backward_inplace(&mut d_a1, &cache.a1);
        let d_input = conv3_backward(&self.layers[0], patch, dims, &d_a1, &mut grads[0]);
        (grads, d_input)
    }
}

/// Intermediate activations cached for the backward pass.
pub struct ForwardCache {
    a1: Vec<f32>,
    a2: Vec<f32>,
    pooled: Vec<f32>,
    argmax: Vec<u32>,
    a3: Vec<f32>,
    a4: Vec<f32>,
    cat: Vec<f32>,
    a5: Vec<f32>,
    a6: Vec<f32>,
    pub output: Vec<f32>,
}

#[inline]
fn volume(dims: (usize, usize, usize)) -> usize {
    dims.0 * dims.1 * dims.2
}

fn relu_inplace(xs: &mut [f32]) {
    for x in xs {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// ReLU gradient using the stored post-activation (positive iff pre > 0).
fn relu_backward_inplace(grad: &mut [f32], activated: &[f32]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 3x3x3 convolution with zero padding 1; output dims equal input dims.
pub fn conv3_forward(layer: &ConvLayer, input: &[f32], dims: (usize, usize, usize)) -> Vec<f32> {
    debug_assert_eq!(layer.kernel, 3);
    let (nx, ny, nz) = dims;
    let n = nx * ny * nz;
    debug_assert_eq!(input.len(), layer.in_c * n);
    let mut out = vec![0.0f32; layer.out_c * n];
    for oc in 0..layer.out_c {
        let out_ch = &mut out[oc * n..(oc + 1) * n];
        let bias = layer.b[oc];
        for v in out_ch.iter_mut() {
            *v = bias;
        }
        for ic in 0..layer.in_c {
            let in_ch = &input[ic * n..(ic + 1) * n];
            let wbase = ((oc * layer.in_c) + ic) * 27;
            for kz in 0..3usize {
                let (z0, z1) = tap_range(kz, nz);
                for ky in 0..3usize {
                    let (y0, y1) = tap_range(ky, ny);
                    for kx in 0..3usize {
                        let w = layer.w[wbase + (kz * 3 + ky) * 3 + kx];
                        if w == 0.0 {
                            continue;
                        }
                        let (x0, x1) = tap_range(kx, nx);
                        let dx = kx as isize - 1;
                        for z in z0..z1 {
                            let sz = (z as isize + kz as isize - 1) as usize;
                            for y in y0..y1 {
                                let sy = (y as isize + ky as isize - 1) as usize;
                                let orow = z * ny * nx + y * nx;
                                let irow = (sz * ny * nx + sy * nx) as isize + dx;
                                let dst = &mut out_ch[orow + x0..orow + x1];
                                let src = &in_ch[(irow + x0 as isize) as usize..(irow + x1 as isize) as usize];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += w * s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output index range along one axis for kernel tap k in {0,1,2}.
#[inline]
fn tap_range(k: usize, n: usize) -> (usize, usize) {
    match k {
        0 => (1, n),
        1 => (0, n),
        _ => (0, n - 1),
    }
}

/// Gradient of [`conv3_forward`]: accumulates dW/dB into `grad` and returns
/// the gradient w.r.t. the input.
pub fn conv3_backward(
    layer: &ConvLayer,
    input: &[f32],
    dims: (usize, usize, usize),
    d_out: &[f32],
    grad: &mut ConvLayer,
) -> Vec<f32> {
    let (nx, ny, nz) = dims;
    let n = nx * ny * nz;
    let mut d_in = vec![0.0f32; layer.in_c * n];
    for oc in 0..layer.out_c {
        let dout_ch = &d_out[oc * n..(oc + 1) * n];
        grad.b[oc] += dout_ch.iter().sum::<f32>();
        for ic in 0..layer.in_c {
            let in_ch = &input[ic * n..(ic + 1) * n];
            let din_ch = &mut d_in[ic * n..(ic + 1) * n];
            let wbase = ((oc * layer.in_c) + ic) * 27;
            for kz in 0..3usize {
                let (z0, z1) = tap_range(kz, nz);
                for ky in 0..3usize {
                    let (y0, y1) = tap_range(ky, ny);
                    for kx in 0..3usize {
                        let (x0, x1) = tap_range(kx, nx);
                        let widx = wbase + (kz * 3 + ky) * 3 + kx;
                        let w = layer.w[widx];
                        let dx = kx as isize - 1;
                        let mut wg = 0.0f32;
                        for z in z0..z1 {
                            let sz = (z as isize + kz as isize - 1) as usize;
                            for y in y0..y1 {
                                let sy = (y as isize + ky as isize - 1) as usize;
                                let orow = z * ny * nx + y * nx;
                                let irow = (sz * ny * nx + sy * nx) as isize + dx;
                                let go = &dout_ch[orow + x0..orow + x1];
                                let si = (irow + x0 as isize) as usize;
                                let ei = (irow + x1 as isize) as usize;
                                let src = &in_ch[si..ei];
                                let dst = &mut din_ch[si..ei];
                                for i in 0..go.len() {
                                    wg += go[i] * src[i];
                                    dst[i] += w * go[i];
                                }
                            }
                        }
                        grad.w[widx] += wg;
                    }
                }
            }
        }
    }
    d_in
}

/// Pointwise (1x1x1) convolution.
pub fn conv1_forward(layer: &ConvLayer, input: &[f32], dims: (usize, usize, usize)) -> Vec<f32> {
    debug_assert_eq!(layer.kernel, 1);
    let n = volume(dims);
    let mut out = vec![0.0f32; layer.out_c * n];
    for oc in 0..layer.out_c {
        let out_ch = &mut out[oc * n..(oc + 1) * n];
        for v in out_ch.iter_mut() {
            *v = layer.b[oc];
        }
        for ic in 0..layer.in_c {
            let w = layer.w[oc * layer.in_c + ic];
            let in_ch = &input[ic * n..(ic + 1) * n];
            for (d, s) in out_ch.iter_mut().zip(in_ch) {
                *d += w * s;
            }
        }
    }
    out
}

pub fn conv1_backward(
    layer: &ConvLayer,
    input: &[f32],
    dims: (usize, usize, usize),
    d_out: &[f32],
    grad: &mut ConvLayer,
) -> Vec<f32> {
    let n = volume(dims);
    let mut d_in = vec![0.0f32; layer.in_c * n];
    for oc in 0..layer.out_c {
        let dout_ch = &d_out[oc * n..(oc + 1) * n];
        grad.b[oc] += dout_ch.iter().sum::<f32>();
        for ic in 0..layer.in_c {
            let w = layer.w[oc * layer.in_c + ic];
            let in_ch = &input[ic * n..(ic + 1) * n];
            let din_ch = &mut d_in[ic * n..(ic + 1) * n];
            let mut wg = 0.0f32;
            for i in 0..n {
                wg += dout_ch[i] * in_ch[i];
                din_ch[i] += w * dout_ch[i];
            }
            grad.w[oc * layer.in_c + ic] += wg;
        }
    }
    d_in
}

/// 2x2x2 max pooling; requires even dims. Returns pooled values and the flat
/// argmax index per output voxel (first maximum in scan order on ties).
pub fn maxpool2_forward(
    input: &[f32],
    channels: usize,
    dims: (usize, usize, usize),
) -> (Vec<f32>, Vec<u32>) {
    let (nx, ny, nz) = dims;
    let (hx, hy, hz) = (nx / 2, ny / 2, nz / 2);
    let n = nx * ny * nz;
    let hn = hx * hy * hz;
    let mut out = vec![0.0f32; channels * hn];
    let mut arg = vec![0u32; channels * hn];
    for c in 0..channels {
        let in_ch = &input[c * n..(c + 1) * n];
        for z in 0..hz {
            for y in 0..hy {
                for x in 0..hx {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = (2 * x + dx) + nx * ((2 * y + dy) + ny * (2 * z + dz));
                                if in_ch[i] > best {
                                    best = in_ch[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    let o = x + hx * (y + hy * z);
                    out[c * hn + o] = best;
                    arg[c * hn + o] = best_i as u32;
                }
            }
        }
    }
    (out, arg)
}

/// Routes pooled gradients back to the argmax voxels, accumulating into
/// `d_input` (which already carries the skip-connection gradient).
/// Argmax entries are flat indices into one input channel block.
pub fn maxpool2_backward(d_pooled: &[f32], argmax: &[u32], channels: usize, d_input: &mut [f32]) {
    debug_assert_eq!(d_pooled.len(), argmax.len());
    debug_assert_eq!(d_input.len(), 8 * d_pooled.len());
    let n_ch = d_input.len() / channels;
    let hn_ch = d_pooled.len() / channels;
    for c in 0..channels {
        for o in 0..hn_ch {
            let src = d_pooled[c * hn_ch + o];
            let dst = argmax[c * hn_ch + o] as usize;
            d_input[c * n_ch + dst] += src;
        }
    }
}

fn upsample_axis_map(src: usize) -> Vec<(usize, f32)> {
    let dst = 2 * src;
    (0..dst)
        .map(|i| {
            if src == 1 {
                return (0, 0.0);
            }
            let c = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (c.floor() as usize).min(src - 2);
            (lo, (c - lo as f64) as f32)
        })
        .collect()
}

/// Corner-aligned trilinear 2x upsampling of a channel-major feature map.
pub fn upsample2_forward(input: &[f32], channels: usize, dims: (usize, usize, usize)) -> Vec<f32> {
    let (nx, ny, nz) = dims;
    let n = nx * ny * nz;
    let (ox, oy, oz) = (2 * nx, 2 * ny, 2 * nz);
    let on = ox * oy * oz;
    let mx = upsample_axis_map(nx);
    let my = upsample_axis_map(ny);
    let mz = upsample_axis_map(nz);
    let mut out = vec![0.0f32; channels * on];
    for c in 0..channels {
        let in_ch = &input[c * n..(c + 1) * n];
        let out_ch = &mut out[c * on..(c + 1) * on];
        for (zi, &(z0, fz)) in mz.iter().enumerate() {
            let z1 = if nz == 1 { z0 } else { z0 + 1 };
            for (yi, &(y0, fy)) in my.iter().enumerate() {
                let y1 = if ny == 1 { y0 } else { y0 + 1 };
                for (xi, &(x0, fx)) in mx.iter().enumerate() {
                    let x1 = if nx == 1 { x0 } else { x0 + 1 };
                    let at = |x: usize, y: usize, z: usize| in_ch[x + nx * (y + ny * z)];
                    let c00 = at(x0, y0, z0) + (at(x1, y0, z0) - at(x0, y0, z0)) * fx;
                    let c10 = at(x0, y1, z0) + (at(x1, y1, z0) - at(x0, y1, z0)) * fx;
                    let c01 = at(x0, y0, z1) + (at(x1, y0, z1) - at(x0, y0, z1)) * fx;
                    let c11 = at(x0, y1, z1) + (at(x1, y1, z1) - at(x0, y1, z1)) * fx;
                    let c0 = c00 + (c10 - c00) * fy;
                    let c1 = c01 + (c11 - c01) * fy;
                    out_ch[xi + ox * (yi + oy * zi)] = c0 + (c1 - c0) * fz;
                }
            }
        }
    }
    out
}

/// Transpose of [`upsample2_forward`]: scatters output gradients onto the
/// eight interpolation corners.
pub fn upsample2_backward(
    d_out: &[f32],
    channels: usize,
    src_dims: (usize, usize, usize),
    dst_dims: (usize, usize, usize),
) -> Vec<f32> {
    let (nx, ny, nz) = src_dims;
    let (ox, oy, oz) = dst_dims;
    debug_assert_eq!((2 * nx, 2 * ny, 2 * nz), dst_dims);
    let n = nx * ny * nz;
    let on = ox * oy * oz;
    let mx = upsample_axis_map(nx);
    let my = upsample_axis_map(ny);
    let mz = upsample_axis_map(nz);
    let mut d_in = vec![0.0f32; channels * n];
    for c in 0..channels {
        let dout_ch = &d_out[c * on..(c + 1) * on];
        let din_ch = &mut d_in[c * n..(c + 1) * n];
        for (zi, &(z0, fz)) in mz.iter().enumerate() {
            let z1 = if nz == 1 { z0 } else { z0 + 1 };
            for (yi, &(y0, fy)) in my.iter().enumerate() {
                let y1 = if ny == 1 { y0 } else { y0 + 1 };
                for (xi, &(x0, fx)) in mx.iter().enumerate() {
                    let x1 = if nx == 1 { x0 } else { x0 + 1 };
                    let g = dout_ch[xi + ox * (yi + oy * zi)];
                    if g == 0.0 {
                        continue;
                    }
                    let mut add = |x: usize, y: usize, z: usize, w: f32| {
                        din_ch[x + nx * (y + ny * z)] += g * w;
                    };
                    let (gx0, gx1) = (1.0 - fx, fx);
                    let (gy0, gy1) = (1.0 - fy, fy);
                    let (gz0, gz1) = (1.0 - fz, fz);
                    add(x0, y0, z0, gx0 * gy0 * gz0);
                    add(x1, y0, z0, gx1 * gy0 * gz0);
                    add(x0, y1, z0, gx0 * gy1 * gz0);
                    add(x1, y1, z0, gx1 * gy1 * gz0);
                    add(x0, y0, z1, gx0 * gy0 * gz1);
                    add(x1, y0, z1, gx1 * gy0 * gz1);
                    add(x0, y1, z1, gx0 * gy1 * gz1);
                    add(x1, y1, z1, gx1 * gy1 * gz1);
                }
            }
        }
    }
    d_in
}
