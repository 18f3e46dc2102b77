//! Layer kinds with exact forward and backward passes on single samples.
//!
//! Images are rank-3 `(C, H, W)` tensors. Every forward returns a
//! [`LayerCache`] holding whatever the matching backward needs; attention
//! layers also keep their gate maps there so callers can inspect them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    FullyConnected {
        input: usize,
        output: usize,
    },
    Relu,
    Sigmoid,
    Tanh,
    NearestUpsample {
        factor: usize,
    },
    /// Per-channel gate from average- and max-pooled descriptors through a
    /// shared two-layer bottleneck.
    ChannelAttention {
        channels: usize,
        reduction: usize,
    },
    /// Per-position gate from channel-pooled average/max maps through a
    /// `kernel x kernel` convolution with edge-replicated borders.
    SpatialAttention {
        kernel: usize,
    },
    Softmax,
    Reshape {
        shape: Vec<usize>,
    },
}

impl LayerSpec {
    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        }
    }

    pub fn fc(input: usize, output: usize) -> Self {
        Self::FullyConnected { input, output }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            } => *in_ch > 0 && *out_ch > 0 && *kernel > 0 && *stride > 0,
            LayerSpec::FullyConnected { input, output } => *input > 0 && *output > 0,
            LayerSpec::NearestUpsample { factor } => *factor > 0,
            LayerSpec::ChannelAttention {
                channels,
                reduction,
            } => *channels > 0 && *reduction > 0,
            LayerSpec::SpatialAttention { kernel } => *kernel % 2 == 1,
            LayerSpec::Reshape { shape } => shape.iter().all(|&d| d > 0),
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid layer {self:?}")))
        }
    }

    pub fn is_attention(&self) -> bool {
        matches!(
            self,
            LayerSpec::ChannelAttention { .. } | LayerSpec::SpatialAttention { .. }
        )
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![vec![out_ch, in_ch, kernel, kernel], vec![out_ch]],
            LayerSpec::FullyConnected { input, output } => vec![vec![output, input], vec![output]],
            LayerSpec::ChannelAttention {
                channels,
                reduction,
            } => {
                let hidden = bottleneck(channels, reduction);
                vec![
                    vec![hidden, channels],
                    vec![hidden],
                    vec![channels, hidden],
                    vec![channels],
                ]
            }
            LayerSpec::SpatialAttention { kernel } => vec![vec![1, 2, kernel, kernel], vec![1]],
            _ => Vec::new(),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<Tensor> {
        self.param_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(&shape);
                }
                let (fan_in, fan_out) = match shape[..] {
                    [o, i] => (i, o),
                    [o, i, kh, kw] => (i * kh * kw, o * kh * kw),
                    _ => unreachable!(),
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
                Tensor::new(shape, data).expect("shape matches data")
            })
            .collect()
    }

    /// Output shape for `input`, or a shape error.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = input[..] else {
                    return Err(shape_err(format!("[{in_ch}, H, W]"), input));
                };
                if c != in_ch || h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(shape_err(format!("[{in_ch}, H>={kernel}-2p, W]"), input));
                }
                Ok(vec![
                    out_ch,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::FullyConnected { input: n, output } => {
                if input.iter().product::<usize>() != n {
                    return Err(shape_err(format!("{n} inputs"), input));
                }
                Ok(vec![output])
            }
            LayerSpec::NearestUpsample { factor } => {
                let [c, h, w] = input[..] else {
                    return Err(shape_err("[C, H, W]", input));
                };
                Ok(vec![c, h * factor, w * factor])
            }
            LayerSpec::ChannelAttention { channels, .. } => match input[..] {
                [c, _, _] if c == channels => Ok(input.to_vec()),
                _ => Err(shape_err(format!("[{channels}, H, W]"), input)),
            },
            LayerSpec::SpatialAttention { .. } => match input[..] {
                [_, _, _] => Ok(input.to_vec()),
                _ => Err(shape_err("[C, H, W]", input)),
            },
            LayerSpec::Reshape { ref shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(shape_err(shape, input));
                }
                Ok(shape.clone())
            }
            LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Tanh | LayerSpec::Softmax => {
                Ok(input.to_vec())
            }
        }
    }
}

fn bottleneck(channels: usize, reduction: usize) -> usize {
    (channels / reduction).max(1)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Aux {
    None,
    Channel {
        avg: Vec<f64>,
        max_idx: Vec<usize>,
        pre_avg: Vec<f64>,
        pre_max: Vec<f64>,
        gate: Tensor,
    },
    Spatial {
        padded: Vec<f64>,
        max_ch: Vec<usize>,
        gate: Tensor,
    },
}

/// State saved by [`forward`] for [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    spec: LayerSpec,
    input: Tensor,
    output: Tensor,
    aux: Aux,
}

impl LayerCache {
    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn output(&self) -> &Tensor {
        &self.output
    }

    /// Gate map of an attention layer: `[C]` for channel attention,
    /// `[1, H, W]` for spatial attention.
    pub fn attention_weights(&self) -> Option<&Tensor> {
        match &self.aux {
            Aux::Channel { gate, .. } | Aux::Spatial { gate, .. } => Some(gate),
            Aux::None => None,
        }
    }
}

fn check_params(spec: &LayerSpec, params: &[Tensor]) -> Result<()> {
    let want = spec.param_shapes();
    if want.len() != params.len() || want.iter().zip(params).any(|(s, p)| s[..] != *p.shape()) {
        return Err(Error::Shape {
            expected: format!("parameters {want:?} for {spec:?}"),
            actual: format!("{:?}", params.iter().map(|p| p.shape()).collect::<Vec<_>>()),
        });
    }
    Ok(())
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// Output columns whose input column `ox*s + kx - p` is in bounds.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if self.p > kx {
            (self.p - kx).div_ceil(self.s)
        } else {
            0
        };
        let hi = if self.w + self.p > kx {
            ((self.w - 1 + self.p - kx) / self.s + 1).min(self.wo)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.s + ky) as isize - self.p as isize;
        (iy >= 0 && iy < self.h as isize).then_some(iy as usize)
    }
}

fn conv_forward(x: &[f64], weight: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.ho * g.wo;
    let mut out = vec![0.0; g.o * plane];
    for o in 0..g.o {
        out[o * plane..(o + 1) * plane].fill(bias[o]);
        for ci in 0..g.c {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = weight[((o * g.c + ci) * g.k + ky) * g.k + kx];
                    let (lo, hi) = g.col_range(kx);
                    for oy in 0..g.ho {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let row_in = &xin[iy * g.w..(iy + 1) * g.w];
                        let row_out = &mut out[o * plane + oy * g.wo..o * plane + (oy + 1) * g.wo];
                        if g.s == 1 {
                            let off = lo + kx - g.p;
                            for (r, xi) in row_out[lo..hi].iter_mut().zip(&row_in[off..]) {
                                *r += wv * xi;
                            }
                        } else {
                            for ox in lo..hi {
                                row_out[ox] += wv * row_in[ox * g.s + kx - g.p];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
fn conv_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane = g.ho * g.wo;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; g.o];
    for o in 0..g.o {
        gb[o] = grad_out[o * plane..(o + 1) * plane].iter().sum();
        for ci in 0..g.c {
            let base = ci * g.h * g.w;
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let widx = ((o * g.c + ci) * g.k + ky) * g.k + kx;
                    let wv = weight[widx];
                    let (lo, hi) = g.col_range(kx);
                    let mut acc = 0.0;
                    for oy in 0..g.ho {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let row_g = &grad_out[o * plane + oy * g.wo..o * plane + (oy + 1) * g.wo];
                        let row_off = base + iy * g.w;
                        if g.s == 1 {
                            let off = row_off + lo + kx - g.p;
                            let xs = &x[off..off + (hi - lo)];
                            let gxs = &mut gx[off..off + (hi - lo)];
                            for ((gv, xi), gxi) in row_g[lo..hi].iter().zip(xs).zip(gxs) {
                                acc += gv * xi;
                                *gxi += wv * gv;
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = row_off + ox * g.s + kx - g.p;
                                acc += row_g[ox] * x[ix];
                                gx[ix] += wv * row_g[ox];
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

/// `y = W v + b` for a row-major `(out, in)` matrix.
pub(crate) fn matvec(w: &[f64], b: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    b.iter()
        .enumerate()
        .map(|(o, &bias)| {
            let row = &w[o * n..(o + 1) * n];
            bias + row.iter().zip(v).map(|(a, x)| a * x).sum::<f64>()
        })
        .collect()
}

/// Accumulates `gw += g ⊗ v` and returns `W^T g`.
pub(crate) fn matvec_backward(w: &[f64], v: &[f64], g: &[f64], gw: &mut [f64]) -> Vec<f64> {
    let n = v.len();
    let mut gv = vec![0.0; n];
    for (o, &go) in g.iter().enumerate() {
        if go == 0.0 {
            continue;
        }
        let row = &w[o * n..(o + 1) * n];
        let grow = &mut gw[o * n..(o + 1) * n];
        for i in 0..n {
            grow[i] += go * v[i];
            gv[i] += go * row[i];
        }
    }
    gv
}

fn plain(spec: &LayerSpec, input: &Tensor, output: Tensor) -> LayerCache {
    LayerCache {
        spec: spec.clone(),
        input: input.clone(),
        output,
        aux: Aux::None,
    }
}

pub fn forward(spec: &LayerSpec, params: &[Tensor], input: &Tensor) -> Result<(Tensor, LayerCache)> {
    check_params(spec, params)?;
    let out_shape = spec.output_shape(input.shape())?;
    let x = input.data();
    let cache = match *spec {
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        } => {
            let (_, h, w) = input.chw()?;
            let g = ConvGeom {
                c: in_ch,
                h,
                w,
                o: out_ch,
                k: kernel,
                s: stride,
                p: padding,
                ho: out_shape[1],
                wo: out_shape[2],
            };
            let out = conv_forward(x, params[0].data(), params[1].data(), &g);
            plain(spec, input, Tensor::new(out_shape, out)?)
        }
        LayerSpec::FullyConnected { .. } => {
            let out = matvec(params[0].data(), params[1].data(), x);
            plain(spec, input, Tensor::vector(out))
        }
        LayerSpec::Relu => {
            let out = x.iter().map(|&v| v.max(0.0)).collect();
            plain(spec, input, Tensor::new(out_shape, out)?)
        }
        LayerSpec::Sigmoid => {
            let out = x.iter().map(|&v| sigmoid(v)).collect();
            plain(spec, input, Tensor::new(out_shape, out)?)
        }
        LayerSpec::Tanh => {
            let out = x.iter().map(|&v| v.tanh()).collect();
            plain(spec, input, Tensor::new(out_shape, out)?)
        }
        LayerSpec::Softmax => {
            let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            plain(spec, input, Tensor::new(out_shape, e.iter().map(|v| v / z).collect())?)
        }
        LayerSpec::Reshape { .. } => plain(spec, input, input.clone().reshape(&out_shape)?),
        LayerSpec::NearestUpsample { factor } => {
            let (c, h, w) = input.chw()?;
            let (oh, ow) = (h * factor, w * factor);
            let mut out = vec![0.0; c * oh * ow];
            for ch in 0..c {
                for y in 0..oh {
                    for xo in 0..ow {
                        out[(ch * oh + y) * ow + xo] = x[(ch * h + y / factor) * w + xo / factor];
                    }
                }
            }
            plain(spec, input, Tensor::new(out_shape, out)?)
        }
        LayerSpec::ChannelAttention { channels, .. } => {
            let (c, h, w) = input.chw()?;
            let hw = h * w;
            let mut avg = vec![0.0; c];
            let mut mx = vec![0.0; c];
            let mut max_idx = vec![0; c];
            for ch in 0..c {
                let plane = &x[ch * hw..(ch + 1) * hw];
                avg[ch] = plane.iter().sum::<f64>() / hw as f64;
                let mut best = 0;
                for (i, &v) in plane.iter().enumerate() {
                    if v > plane[best] {
                        best = i;
                    }
                }
                max_idx[ch] = best;
                mx[ch] = plane[best];
            }
            let (w1, b1, w2, b2) = (params[0].data(), params[1].data(), params[2].data(), params[3].data());
            let pre_avg = matvec(w1, b1, &avg);
            let pre_max = matvec(w1, b1, &mx);
            let relu = |v: &[f64]| v.iter().map(|&a| a.max(0.0)).collect::<Vec<_>>();
            let zero_b = vec![0.0; channels];
            let m_avg = matvec(w2, &zero_b, &relu(&pre_avg));
            let m_max = matvec(w2, &zero_b, &relu(&pre_max));
            let gate: Vec<f64> = (0..c).map(|ch| sigmoid(m_avg[ch] + m_max[ch] + 2.0 * b2[ch])).collect();
            let mut out = x.to_vec();
            for ch in 0..c {
                for v in &mut out[ch * hw..(ch + 1) * hw] {
                    *v *= gate[ch];
                }
            }
            LayerCache {
                spec: spec.clone(),
                input: input.clone(),
                output: Tensor::new(out_shape, out)?,
                aux: Aux::Channel {
                    avg,
                    max_idx,
                    pre_avg,
                    pre_max,
                    gate: Tensor::vector(gate),
                },
            }
        }
        LayerSpec::SpatialAttention { kernel } => {
            let (c, h, w) = input.chw()?;
            let hw = h * w;
            let mut pooled = vec![0.0; 2 * hw];
            let mut max_ch = vec![0; hw];
            for p in 0..hw {
                let mut sum = 0.0;
                let mut best = 0;
                for ch in 0..c {
                    let v = x[ch * hw + p];
                    sum += v;
                    if v > x[best * hw + p] {
                        best = ch;
                    }
                }
                pooled[p] = sum / c as f64;
                pooled[hw + p] = x[best * hw + p];
                max_ch[p] = best;
            }
            let padded = pad_replicate(&pooled, 2, h, w, kernel / 2);
            let g = spatial_geom(kernel, h, w);
            let logits = conv_forward(&padded, params[0].data(), params[1].data(), &g);
            let gate: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
            let mut out = x.to_vec();
            for ch in 0..c {
                for (v, a) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(&gate) {
                    *v *= a;
                }
            }
            LayerCache {
                spec: spec.clone(),
                input: input.clone(),
                output: Tensor::new(out_shape, out)?,
                aux: Aux::Spatial {
                    padded,
                    max_ch,
                    gate: Tensor::new(vec![1, h, w], gate)?,
                },
            }
        }
    };
    Ok((cache.output.clone(), cache))
}

/// Valid convolution over the edge-replicated pooled maps.
fn spatial_geom(kernel: usize, h: usize, w: usize) -> ConvGeom {
    let p = kernel / 2;
    ConvGeom {
        c: 2,
        h: h + 2 * p,
        w: w + 2 * p,
        o: 1,
        k: kernel,
        s: 1,
        p: 0,
        ho: h,
        wo: w,
    }
}

fn pad_replicate(x: &[f64], c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for y in 0..ph {
            let sy = y.saturating_sub(p).min(h - 1);
            for xo in 0..pw {
                let sx = xo.saturating_sub(p).min(w - 1);
                out[(ch * ph + y) * pw + xo] = x[(ch * h + sy) * w + sx];
            }
        }
    }
    out
}

/// Adjoint of [`pad_replicate`].
fn unpad_replicate(g: &[f64], c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..ph {
            let sy = y.saturating_sub(p).min(h - 1);
            for xo in 0..pw {
                let sx = xo.saturating_sub(p).min(w - 1);
                out[(ch * h + sy) * w + sx] += g[(ch * ph + y) * pw + xo];
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_params)` for the forward that produced `cache`.
pub fn backward(
    spec: &LayerSpec,
    params: &[Tensor],
    cache: &LayerCache,
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    if cache.spec != *spec {
        return Err(Error::Shape {
            expected: format!("cache for {spec:?}"),
            actual: format!("cache for {:?}", cache.spec),
        });
    }
    check_params(spec, params)?;
    if grad_out.shape() != cache.output.shape() {
        return Err(shape_err(cache.output.shape(), grad_out.shape()));
    }
    let x = cache.input.data();
    let g = grad_out.data();
    let in_shape = cache.input.shape().to_vec();
    let like_input = |data: Vec<f64>| Tensor::new(in_shape.clone(), data);
    match (spec, &cache.aux) {
        (
            &LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            },
            _,
        ) => {
            let (_, h, w) = cache.input.chw()?;
            let (_, ho, wo) = cache.output.chw()?;
            let geom = ConvGeom {
                c: in_ch,
                h,
                w,
                o: out_ch,
                k: kernel,
                s: stride,
                p: padding,
                ho,
                wo,
            };
            let (gx, gw, gb) = conv_backward(x, params[0].data(), g, &geom);
            Ok((
                like_input(gx)?,
                vec![
                    Tensor::new(params[0].shape().to_vec(), gw)?,
                    Tensor::vector(gb),
                ],
            ))
        }
        (LayerSpec::FullyConnected { .. }, _) => {
            let mut gw = vec![0.0; params[0].len()];
            let gx = matvec_backward(params[0].data(), x, g, &mut gw);
            Ok((
                like_input(gx)?,
                vec![
                    Tensor::new(params[0].shape().to_vec(), gw)?,
                    Tensor::vector(g.to_vec()),
                ],
            ))
        }
        (LayerSpec::Relu, _) => {
            let gx = x.iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
            Ok((like_input(gx)?, Vec::new()))
        }
        (LayerSpec::Sigmoid, _) => {
            let y = cache.output.data();
            let gx = y.iter().zip(g).map(|(&s, &gv)| gv * s * (1.0 - s)).collect();
            Ok((like_input(gx)?, Vec::new()))
        }
        (LayerSpec::Tanh, _) => {
            let y = cache.output.data();
            let gx = y.iter().zip(g).map(|(&t, &gv)| gv * (1.0 - t * t)).collect();
            Ok((like_input(gx)?, Vec::new()))
        }
        (LayerSpec::Softmax, _) => {
            let y = cache.output.data();
            let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
            let gx = y.iter().zip(g).map(|(&s, &gv)| s * (gv - dot)).collect();
            Ok((like_input(gx)?, Vec::new()))
        }
        (LayerSpec::Reshape { .. }, _) => Ok((like_input(g.to_vec())?, Vec::new())),
        (&LayerSpec::NearestUpsample { factor }, _) => {
            let (c, h, w) = cache.input.chw()?;
            let (oh, ow) = (h * factor, w * factor);
            let mut gx = vec![0.0; x.len()];
            for ch in 0..c {
                for y in 0..oh {
                    for xo in 0..ow {
                        gx[(ch * h + y / factor) * w + xo / factor] += g[(ch * oh + y) * ow + xo];
                    }
                }
            }
            Ok((like_input(gx)?, Vec::new()))
        }
        (
            LayerSpec::ChannelAttention { .. },
            Aux::Channel {
                avg,
                max_idx,
                pre_avg,
                pre_max,
                gate,
            },
        ) => {
            let (c, h, w) = cache.input.chw()?;
            let hw = h * w;
            let gate = gate.data();
            let mut gx = vec![0.0; x.len()];
            let mut dlogit = vec![0.0; c];
            for ch in 0..c {
                let mut da = 0.0;
                for i in ch * hw..(ch + 1) * hw {
                    da += g[i] * x[i];
                    gx[i] = g[i] * gate[ch];
                }
                dlogit[ch] = da * gate[ch] * (1.0 - gate[ch]);
            }
            let (w1, w2) = (params[0].data(), params[2].data());
            let mut gw1 = vec![0.0; params[0].len()];
            let mut gb1 = vec![0.0; params[1].len()];
            let mut gw2 = vec![0.0; params[2].len()];
            let gb2: Vec<f64> = dlogit.iter().map(|d| 2.0 * d).collect();
            let mx: Vec<f64> = (0..c).map(|ch| x[ch * hw + max_idx[ch]]).collect();
            let mut branch = |pre: &[f64], v: &[f64]| -> Vec<f64> {
                let hidden: Vec<f64> = pre.iter().map(|&a| a.max(0.0)).collect();
                let dh = matvec_backward(w2, &hidden, &dlogit, &mut gw2);
                let dpre: Vec<f64> = dh
                    .iter()
                    .zip(pre)
                    .map(|(&d, &p)| if p > 0.0 { d } else { 0.0 })
                    .collect();
                for (b, d) in gb1.iter_mut().zip(&dpre) {
                    *b += d;
                }
                matvec_backward(w1, v, &dpre, &mut gw1)
            };
            let dv_avg = branch(pre_avg, avg);
            let dv_max = branch(pre_max, &mx);
            for ch in 0..c {
                let d = dv_avg[ch] / hw as f64;
                for v in &mut gx[ch * hw..(ch + 1) * hw] {
                    *v += d;
                }
                gx[ch * hw + max_idx[ch]] += dv_max[ch];
            }
            Ok((
                like_input(gx)?,
                vec![
                    Tensor::new(params[0].shape().to_vec(), gw1)?,
                    Tensor::vector(gb1),
                    Tensor::new(params[2].shape().to_vec(), gw2)?,
                    Tensor::vector(gb2),
                ],
            ))
        }
        (&LayerSpec::SpatialAttention { kernel }, Aux::Spatial { padded, max_ch, gate }) => {
            let (c, h, w) = cache.input.chw()?;
            let hw = h * w;
            let gate = gate.data();
            let mut gx = vec![0.0; x.len()];
            let mut dlogit = vec![0.0; hw];
            for p in 0..hw {
                let mut da = 0.0;
                for ch in 0..c {
                    let i = ch * hw + p;
                    da += g[i] * x[i];
                    gx[i] = g[i] * gate[p];
                }
                dlogit[p] = da * gate[p] * (1.0 - gate[p]);
            }
            let geom = spatial_geom(kernel, h, w);
            let (gpad, gw, gb) = conv_backward(padded, params[0].data(), &dlogit, &geom);
            let gpool = unpad_replicate(&gpad, 2, h, w, kernel / 2);
            for p in 0..hw {
                let d = gpool[p] / c as f64;
                for ch in 0..c {
                    gx[ch * hw + p] += d;
                }
                gx[max_ch[p] * hw + p] += gpool[hw + p];
            }
            Ok((
                like_input(gx)?,
                vec![Tensor::new(params[0].shape().to_vec(), gw)?, Tensor::vector(gb)],
            ))
        }
        _ => Err(Error::Shape {
            expected: format!("attention cache for {spec:?}"),
            actual: "cache without attention state".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "layer-test", 0);
        let n = shape.iter().product();
        t(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn identity_conv() {
        let spec = LayerSpec::conv(1, 1, 1, 1, 0);
        let params = vec![t(&[1, 1, 1, 1], vec![1.0]), t(&[1], vec![0.0])];
        let x = random(&[1, 5, 4], 1);
        let (y, cache) = forward(&spec, &params, &x).unwrap();
        assert_eq!(y, x);
        let gout = random(&[1, 5, 4], 2);
        let (gx, _) = backward(&spec, &params, &cache, &gout).unwrap();
        assert_eq!(gx, gout);
    }

    #[test]
    fn fully_connected_dot_product() {
        let spec = LayerSpec::fc(2, 1);
        let params = vec![t(&[1, 2], vec![1.0, 1.0]), t(&[1], vec![0.0])];
        let (y, _) = forward(&spec, &params, &Tensor::vector(vec![3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn relu_blocks_negative_gradient() {
        let x = Tensor::vector(vec![-2.0, 3.0]);
        let (_, cache) = forward(&LayerSpec::Relu, &[], &x).unwrap();
        let (gx, _) = backward(&LayerSpec::Relu, &[], &cache, &Tensor::vector(vec![5.0, 5.0])).unwrap();
        assert_eq!(gx.data(), &[0.0, 5.0]);
    }

    #[test]
    fn spatial_attention_uniform_on_constant_input() {
        let spec = LayerSpec::SpatialAttention { kernel: 7 };
        let params = spec.init_params(&mut rng::stream(3, "init", 0));
        let x = Tensor::filled(&[3, 9, 9], 0.7);
        let (_, cache) = forward(&spec, &params, &x).unwrap();
        let gate = cache.attention_weights().unwrap().data();
        assert!(gate.iter().all(|&a| a == gate[0]));
        assert!(gate[0] > 0.0 && gate[0] < 1.0);
    }

    #[test]
    fn softmax_sums_to_one() {
        let x = random(&[10], 4);
        let (y, _) = forward(&LayerSpec::Softmax, &[], &x).unwrap();
        assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(y.data().iter().all(|&v| v > 0.0));
        let (y, _) = forward(&LayerSpec::Softmax, &[], &Tensor::vector(vec![1000.0, -1000.0])).unwrap();
        assert!(y.all_finite());
    }

    #[test]
    fn shape_errors_name_both_sides() {
        let spec = LayerSpec::conv(2, 1, 3, 1, 1);
        let params = spec.init_params(&mut rng::stream(0, "init", 0));
        let err = forward(&spec, &params, &Tensor::zeros(&[3, 4, 4])).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
        let err = forward(&LayerSpec::fc(3, 1), &LayerSpec::fc(3, 1).init_params(&mut rng::stream(0, "i", 0)), &Tensor::zeros(&[4])).unwrap_err();
        assert!(err.to_string().contains("3 inputs"));
    }

    #[test]
    fn stale_cache_rejected() {
        let (_, cache) = forward(&LayerSpec::Relu, &[], &Tensor::zeros(&[2])).unwrap();
        assert!(backward(&LayerSpec::Tanh, &[], &cache, &Tensor::zeros(&[2])).is_err());
        assert!(backward(&LayerSpec::Relu, &[], &cache, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn strided_conv_shapes() {
        let spec = LayerSpec::conv(1, 2, 3, 2, 1);
        assert_eq!(spec.output_shape(&[1, 64, 64]).unwrap(), vec![2, 32, 32]);
        assert_eq!(spec.output_shape(&[1, 5, 5]).unwrap(), vec![2, 3, 3]);
    }

    #[test]
    fn translation_compatibility_on_interior() {
        let spec = LayerSpec::conv(2, 3, 3, 1, 1);
        let params = spec.init_params(&mut rng::stream(9, "init", 0));
        let (h, w) = (12, 12);
        let mut base = vec![0.0; 2 * h * w];
        let mut r = rng::stream(9, "x", 0);
        // content confined to the middle so that shifting keeps it inside
        for c in 0..2 {
            for y in 3..8 {
                for x in 3..8 {
                    base[(c * h + y) * w + x] = r.gen_range(-1.0..1.0);
                }
            }
        }
        let (dy, dx) = (2, 3);
        let mut shifted = vec![0.0; base.len()];
        for c in 0..2 {
            for y in 0..h - dy {
                for x in 0..w - dx {
                    shifted[(c * h + y + dy) * w + x + dx] = base[(c * h + y) * w + x];
                }
            }
        }
        let (a, _) = forward(&spec, &params, &t(&[2, h, w], base)).unwrap();
        let (b, _) = forward(&spec, &params, &t(&[2, h, w], shifted)).unwrap();
        for o in 0..3 {
            for y in 1..h - 1 - dy {
                for x in 1..w - 1 - dx {
                    let va = a.data()[(o * h + y) * w + x];
                    let vb = b.data()[(o * h + y + dy) * w + x + dx];
                    assert!((va - vb).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_gates_in_unit_interval() {
        let x = random(&[4, 6, 6], 12);
        for spec in [
            LayerSpec::ChannelAttention {
                channels: 4,
                reduction: 2,
            },
            LayerSpec::SpatialAttention { kernel: 3 },
        ] {
            let params = spec.init_params(&mut rng::stream(1, "init", 0));
            let (_, cache) = forward(&spec, &params, &x).unwrap();
            assert!(cache
                .attention_weights()
                .unwrap()
                .data()
                .iter()
                .all(|&a| a > 0.0 && a < 1.0));
        }
    }
}
