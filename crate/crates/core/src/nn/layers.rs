use rand::Rng;

use super::{LayerParam, Mode, Module, Precision, Role, Tensor};
use crate::error::{Result, SlpError};
use crate::quant::{self, packed_matmul, packed_matvec, QuantTensor};

fn not_cached(layer: &str) -> SlpError {
    SlpError::State(format!("{layer}: backward called before forward"))
}

fn check_grad_shape(grad: &Tensor, shape: &[usize], layer: &str) -> Result<()> {
    if grad.shape() != shape {
        return Err(SlpError::Dimension(format!(
            "{layer}: upstream gradient {:?} does not match output {shape:?}",
            grad.shape()
        )));
    }
    Ok(())
}

fn uniform_values<R: Rng + ?Sized>(n: usize, bound: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Weight actually used in the forward pass: latent weight or its
/// quantized counterpart.
fn effective_weight(weight: &LayerParam) -> Result<Vec<f64>> {
    match weight.precision().quant_kind() {
        None => Ok(weight.values.clone()),
        Some(kind) => Ok(quant::quantize(kind, &weight.values, weight.shape())?.dequantize()),
    }
}

fn accumulate_weight_grad(weight: &mut LayerParam, grad_eff: &[f64]) {
    let grad = match weight.precision() {
        Precision::Fp32 => grad_eff.to_vec(),
        _ => quant::ste_backward(grad_eff, &weight.values),
    };
    weight.grad.iter_mut().zip(grad).for_each(|(g, d)| *g += d);
}

fn packed_for(weight: &LayerParam) -> Result<Option<QuantTensor>> {
    weight
        .precision()
        .quant_kind()
        .map(|kind| quant::quantize(kind, &weight.values, weight.shape()))
        .transpose()
}

/// `ln(1 + e^x)`, switching to `x + e^-x` above 30.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

/// 2-D cross-correlation with stride 1.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub weight: LayerParam,
    pub bias: Option<LayerParam>,
    packed: Option<QuantTensor>,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    input: (usize, usize, usize, usize),
    cols: Vec<f64>,
    weight: Vec<f64>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        padding: (usize, usize),
        dilation: (usize, usize),
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel.0 == 0 || kernel.1 == 0 {
            return Err(SlpError::Dimension("conv2d needs non-zero channels and kernel".into()));
        }
        if dilation.0 == 0 || dilation.1 == 0 {
            return Err(SlpError::Parameter("conv2d dilation must be at least 1".into()));
        }
        let fan_in = in_channels * kernel.0 * kernel.1;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let shape = vec![out_channels, in_channels, kernel.0, kernel.1];
        let weight = LayerParam::new(
            format!("{name}.weight"),
            Role::Weight,
            shape,
            uniform_values(out_channels * fan_in, bound, rng),
        )?;
        let bias = bias
            .then(|| {
                LayerParam::new(
                    format!("{name}.bias"),
                    Role::Bias,
                    vec![out_channels],
                    uniform_values(out_channels, bound, rng),
                )
            })
            .transpose()?;
        Ok(Self { in_channels, out_channels, kernel, padding, dilation, weight, bias, packed: None, cache: None })
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span_h = self.dilation.0 * (self.kernel.0 - 1);
        let span_w = self.dilation.1 * (self.kernel.1 - 1);
        let (ph, pw) = (h + 2 * self.padding.0, w + 2 * self.padding.1);
        if ph <= span_h || pw <= span_w {
            return Err(SlpError::Dimension(format!("conv2d kernel does not fit a {h}x{w} input")));
        }
        Ok((ph - span_h, pw - span_w))
    }

    pub fn set_precision(&mut self, precision: Precision) -> Result<()> {
        self.packed = None;
        self.weight.set_precision(precision)
    }

    pub fn freeze(&mut self) -> Result<()> {
        self.packed = packed_for(&self.weight)?;
        Ok(())
    }

    /// Install an externally quantized weight (used when loading packed checkpoints).
    pub fn install_packed(&mut self, q: QuantTensor) -> Result<()> {
        if q.shape != self.weight.shape() {
            return Err(SlpError::Dimension("packed weight shape mismatch".into()));
        }
        self.weight.values = q.dequantize();
        self.packed = Some(q);
        Ok(())
    }

    pub fn packed(&self) -> Option<&QuantTensor> {
        self.packed.as_ref()
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let dims = x.dims4()?;
        if dims.1 != self.in_channels {
            return Err(SlpError::Dimension(format!(
                "conv2d expects {} input channels, got {}",
                self.in_channels, dims.1
            )));
        }
        Ok(dims)
    }

    /// Padded positions of `cols` are never written, so the buffer must
    /// start zeroed; it can then be reused for inputs of the same shape.
    fn im2col(&self, x: &[f64], c: usize, h: usize, w: usize, ho: usize, wo: usize, cols: &mut [f64]) {
        let (kh, kw) = self.kernel;
        let p = ho * wo;
        for ch in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (ch * kh + ky) * kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    // valid ox satisfy 0 <= ox + shift < w
                    let shift = (kx * self.dilation.1) as isize - self.padding.1 as isize;
                    let lo = (-shift).clamp(0, wo as isize) as usize;
                    let hi = (w as isize - shift).clamp(lo as isize, wo as isize) as usize;
                    for oy in 0..ho {
                        let iy = (oy + ky * self.dilation.0) as isize - self.padding.0 as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let src = ((ch * h + iy as usize) * w) as isize + shift;
                        for ox in lo..hi {
                            dst[oy * wo + ox] = x[(src + ox as isize) as usize];
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], c: usize, h: usize, w: usize, ho: usize, wo: usize, dx: &mut [f64]) {
        let (kh, kw) = self.kernel;
        let p = ho * wo;
        for ch in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (ch * kh + ky) * kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy + ky * self.dilation.0) as isize - self.padding.0 as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox + kx * self.dilation.1) as isize - self.padding.1 as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dx[(ch * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn add_bias(&self, y: &mut [f64], p: usize) {
        if let Some(bias) = &self.bias {
            for (o, &b) in bias.values.iter().enumerate() {
                y[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += b);
            }
        }
    }

    fn run(&self, x: &Tensor, weight: &[f64], keep_cols: bool) -> Result<(Tensor, Vec<f64>)> {
        let (b, c, h, w) = self.check_input(x)?;
        let (ho, wo) = self.output_hw(h, w)?;
        let (p, n, o) = (ho * wo, c * self.kernel.0 * self.kernel.1, self.out_channels);
        let mut out = vec![0.0; b * o * p];
        let mut all_cols = if keep_cols { vec![0.0; b * n * p] } else { Vec::new() };
        let mut scratch = vec![0.0; n * p];
        for s in 0..b {
            let cols = if keep_cols { &mut all_cols[s * n * p..(s + 1) * n * p] } else { &mut scratch[..] };
            self.im2col(&x.data()[s * c * h * w..(s + 1) * c * h * w], c, h, w, ho, wo, cols);
            let y = &mut out[s * o * p..(s + 1) * o * p];
            for oc in 0..o {
                let yr = &mut y[oc * p..(oc + 1) * p];
                for i in 0..n {
                    let wv = weight[oc * n + i];
                    if wv != 0.0 {
                        for (a, &v) in yr.iter_mut().zip(&cols[i * p..(i + 1) * p]) {
                            *a += wv * v;
                        }
                    }
                }
            }
            self.add_bias(y, p);
        }
        Ok((Tensor::new(vec![b, o, ho, wo], out)?, all_cols))
    }
}

impl Module for Conv2d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Train {
            self.packed = None;
        }
        let weight = effective_weight(&self.weight)?;
        let (y, cols) = self.run(x, &weight, true)?;
        self.cache = Some(ConvCache { input: x.dims4()?, cols, weight });
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self.cache.as_ref().ok_or_else(|| not_cached("conv2d"))?;
        let (b, c, h, w) = cache.input;
        let (ho, wo) = self.output_hw(h, w)?;
        check_grad_shape(grad, &[b, self.out_channels, ho, wo], "conv2d")?;
        let (p, n, o) = (ho * wo, c * self.kernel.0 * self.kernel.1, self.out_channels);
        let mut dw = vec![0.0; o * n];
        let mut dx = vec![0.0; b * c * h * w];
        let mut dcols = vec![0.0; n * p];
        for s in 0..b {
            let cols = &cache.cols[s * n * p..(s + 1) * n * p];
            let dy = &grad.data()[s * o * p..(s + 1) * o * p];
            dcols.iter_mut().for_each(|v| *v = 0.0);
            for oc in 0..o {
                let dyr = &dy[oc * p..(oc + 1) * p];
                for i in 0..n {
                    let col = &cols[i * p..(i + 1) * p];
                    dw[oc * n + i] += dyr.iter().zip(col).map(|(a, b)| a * b).sum::<f64>();
                    let wv = cache.weight[oc * n + i];
                    for (d, &g) in dcols[i * p..(i + 1) * p].iter_mut().zip(dyr) {
                        *d += wv * g;
                    }
                }
            }
            self.col2im(&dcols, c, h, w, ho, wo, &mut dx[s * c * h * w..(s + 1) * c * h * w]);
            if let Some(bias) = &mut self.bias {
                for (oc, g) in bias.grad.iter_mut().enumerate() {
                    *g += dy[oc * p..(oc + 1) * p].iter().sum::<f64>();
                }
            }
        }
        accumulate_weight_grad(&mut self.weight, &dw);
        Tensor::new(vec![b, c, h, w], dx)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let Some(q) = &self.packed else {
            return Ok(self.run(x, &effective_weight(&self.weight)?, false)?.0);
        };
        let (b, c, h, w) = self.check_input(x)?;
        let (ho, wo) = self.output_hw(h, w)?;
        let (p, n, o) = (ho * wo, c * self.kernel.0 * self.kernel.1, self.out_channels);
        let mut cols = vec![0.0; n * p];
        let mut out = Vec::with_capacity(b * o * p);
        for s in 0..b {
            self.im2col(&x.data()[s * c * h * w..(s + 1) * c * h * w], c, h, w, ho, wo, &mut cols);
            let mut y = packed_matmul(q, &cols, p)?;
            self.add_bias(&mut y, p);
            out.extend(y);
        }
        Tensor::new(vec![b, o, ho, wo], out)
    }

    fn params(&self) -> Vec<&LayerParam> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParam> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Fully-connected layer on `(B, F)` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: LayerParam,
    pub bias: Option<LayerParam>,
    packed: Option<QuantTensor>,
    cache: Option<(Tensor, Vec<f64>)>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(SlpError::Dimension("linear layer needs non-zero sizes".into()));
        }
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = LayerParam::new(
            format!("{name}.weight"),
            Role::Weight,
            vec![out_features, in_features],
            uniform_values(out_features * in_features, bound, rng),
        )?;
        let bias = bias
            .then(|| {
                LayerParam::new(
                    format!("{name}.bias"),
                    Role::Bias,
                    vec![out_features],
                    uniform_values(out_features, bound, rng),
                )
            })
            .transpose()?;
        Ok(Self { in_features, out_features, weight, bias, packed: None, cache: None })
    }

    pub fn set_precision(&mut self, precision: Precision) -> Result<()> {
        self.packed = None;
        self.weight.set_precision(precision)
    }

    pub fn freeze(&mut self) -> Result<()> {
        self.packed = packed_for(&self.weight)?;
        Ok(())
    }

    pub fn install_packed(&mut self, q: QuantTensor) -> Result<()> {
        if q.shape != self.weight.shape() {
            return Err(SlpError::Dimension("packed weight shape mismatch".into()));
        }
        self.weight.values = q.dequantize();
        self.packed = Some(q);
        Ok(())
    }

    pub fn packed(&self) -> Option<&QuantTensor> {
        self.packed.as_ref()
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let (b, f) = x.dims2()?;
        if f != self.in_features {
            return Err(SlpError::Dimension(format!("linear expects {} features, got {f}", self.in_features)));
        }
        Ok(b)
    }

    fn bias_at(&self, o: usize) -> f64 {
        self.bias.as_ref().map_or(0.0, |b| b.values[o])
    }

    fn run(&self, x: &Tensor, weight: &[f64]) -> Result<Tensor> {
        let b = self.check_input(x)?;
        let (fi, fo) = (self.in_features, self.out_features);
        let mut out = Vec::with_capacity(b * fo);
        for s in 0..b {
            let xs = &x.data()[s * fi..(s + 1) * fi];
            for o in 0..fo {
                let row = &weight[o * fi..(o + 1) * fi];
                out.push(row.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>() + self.bias_at(o));
            }
        }
        Tensor::new(vec![b, fo], out)
    }
}

impl Module for Linear {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Train {
            self.packed = None;
        }
        let weight = effective_weight(&self.weight)?;
        let y = self.run(x, &weight)?;
        self.cache = Some((x.clone(), weight));
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (x, weight) = self.cache.as_ref().ok_or_else(|| not_cached("linear"))?;
        let b = x.batch();
        let (fi, fo) = (self.in_features, self.out_features);
        check_grad_shape(grad, &[b, fo], "linear")?;
        let mut dw = vec![0.0; fo * fi];
        let mut dx = vec![0.0; b * fi];
        for s in 0..b {
            let xs = &x.data()[s * fi..(s + 1) * fi];
            for o in 0..fo {
                let g = grad.data()[s * fo + o];
                for i in 0..fi {
                    dw[o * fi + i] += g * xs[i];
                    dx[s * fi + i] += g * weight[o * fi + i];
                }
                if let Some(bias) = &mut self.bias {
                    bias.grad[o] += g;
                }
            }
        }
        accumulate_weight_grad(&mut self.weight, &dw);
        Tensor::new(vec![b, fi], dx)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let Some(q) = &self.packed else {
            return self.run(x, &effective_weight(&self.weight)?);
        };
        let b = self.check_input(x)?;
        let fi = self.in_features;
        let mut out = Vec::with_capacity(b * self.out_features);
        for s in 0..b {
            let y = packed_matvec(q, &x.data()[s * fi..(s + 1) * fi])?;
            out.extend(y.into_iter().enumerate().map(|(o, v)| v + self.bias_at(o)));
        }
        Tensor::new(vec![b, self.out_features], out)
    }

    fn params(&self) -> Vec<&LayerParam> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParam> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Per-channel batch normalization of NCHW tensors.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub scale: LayerParam,
    pub shift: LayerParam,
    pub running_mean: LayerParam,
    pub running_var: LayerParam,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    shape: Vec<usize>,
    xhat: Vec<f64>,
    invstd: Vec<f64>,
    train: bool,
}

impl BatchNorm2d {
    pub const EPS: f64 = 1e-6;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(name: &str, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(SlpError::Dimension("batchnorm needs at least one channel".into()));
        }
        let p = |suffix: &str, role, v: f64| LayerParam::new(format!("{name}.{suffix}"), role, vec![channels], vec![v; channels]);
        Ok(Self {
            channels,
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
            scale: p("scale", Role::BnScale, 1.0)?,
            shift: p("shift", Role::BnShift, 0.0)?,
            running_mean: p("running_mean", Role::RunningMean, 0.0)?,
            running_var: p("running_var", Role::RunningVar, 1.0)?,
            cache: None,
        })
    }

    pub fn state(&self) -> Vec<&LayerParam> {
        vec![&self.scale, &self.shift, &self.running_mean, &self.running_var]
    }

    pub fn state_mut(&mut self) -> Vec<&mut LayerParam> {
        vec![&mut self.scale, &mut self.shift, &mut self.running_mean, &mut self.running_var]
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(SlpError::Dimension(format!("batchnorm expects {} channels, got {c}", self.channels)));
        }
        Ok((b, c, h * w))
    }

    /// Normalize with per-channel statistics; returns `(y, xhat, invstd)`.
    fn normalize(&self, x: &Tensor, mean: &[f64], var: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (b, c, hw) = (x.batch(), self.channels, x.len() / x.batch().max(1) / self.channels);
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for s in 0..b {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (x.data()[i] - mean[ch]) * invstd[ch];
                    y[i] = self.scale.values[ch] * xhat[i] + self.shift.values[ch];
                }
            }
        }
        (y, xhat, invstd)
    }

    fn batch_stats(&self, x: &Tensor) -> Result<(Vec<f64>, Vec<f64>, usize)> {
        let (b, c, hw) = self.check_input(x)?;
        let n = b * hw;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let vals = (0..b).flat_map(|s| x.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter());
            mean[ch] = vals.clone().sum::<f64>() / n as f64;
            var[ch] = vals.map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / n as f64;
        }
        Ok((mean, var, n))
    }
}

impl Module for BatchNorm2d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(x)?;
        let (y, xhat, invstd) = match mode {
            Mode::Train => {
                let (mean, var, n) = self.batch_stats(x)?;
                let out = self.normalize(x, &mean, &var);
                let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
                let m = self.momentum;
                for ch in 0..self.channels {
                    let rm = &mut self.running_mean.values[ch];
                    *rm = (1.0 - m) * *rm + m * mean[ch];
                    let rv = &mut self.running_var.values[ch];
                    *rv = (1.0 - m) * *rv + m * var[ch] * unbias;
                }
                out
            }
            Mode::Eval => self.normalize(x, &self.running_mean.values, &self.running_var.values),
        };
        self.cache = Some(BnCache { shape: x.shape().to_vec(), xhat, invstd, train: mode == Mode::Train });
        Tensor::new(x.shape().to_vec(), y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self.cache.as_ref().ok_or_else(|| not_cached("batchnorm2d"))?;
        check_grad_shape(grad, &cache.shape, "batchnorm2d")?;
        let (b, c) = (cache.shape[0], self.channels);
        let hw = grad.len() / (b * c);
        let n = (b * hw) as f64;
        let mut dx = vec![0.0; grad.len()];
        for ch in 0..c {
            let idx = || (0..b).flat_map(move |s| (s * c + ch) * hw..(s * c + ch + 1) * hw);
            let dy = grad.data();
            let sum_dy: f64 = idx().map(|i| dy[i]).sum();
            let sum_dy_xhat: f64 = idx().map(|i| dy[i] * cache.xhat[i]).sum();
            self.scale.grad[ch] += sum_dy_xhat;
            self.shift.grad[ch] += sum_dy;
            let g = self.scale.values[ch];
            let inv = cache.invstd[ch];
            for i in idx() {
                dx[i] = if cache.train {
                    g * inv / n * (n * dy[i] - sum_dy - cache.xhat[i] * sum_dy_xhat)
                } else {
                    g * inv * dy[i]
                };
            }
        }
        Tensor::new(cache.shape.clone(), dx)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let (y, _, _) = self.normalize(x, &self.running_mean.values, &self.running_var.values);
        Tensor::new(x.shape().to_vec(), y)
    }

    fn params(&self) -> Vec<&LayerParam> {
        vec![&self.scale, &self.shift]
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParam> {
        vec![&mut self.scale, &mut self.shift]
    }
}

/// Parametric ReLU with one shared slope.
#[derive(Debug, Clone)]
pub struct PRelu {
    pub slope: LayerParam,
    cache: Option<Tensor>,
}

impl PRelu {
    pub fn new(name: &str, slope: f64) -> Result<Self> {
        Ok(Self { slope: LayerParam::new(format!("{name}.slope"), Role::PreluSlope, vec![1], vec![slope])?, cache: None })
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let a = self.slope.values[0];
        x.map(|v| if v >= 0.0 { v } else { a * v })
    }
}

impl Module for PRelu {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        self.cache = Some(x.clone());
        Ok(self.apply(x))
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or_else(|| not_cached("prelu"))?;
        check_grad_shape(grad, x.shape(), "prelu")?;
        let a = self.slope.values[0];
        let mut da = 0.0;
        let dx = x
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&v, &g)| {
                if v >= 0.0 {
                    g
                } else {
                    da += g * v;
                    a * g
                }
            })
            .collect();
        self.slope.grad[0] += da;
        Tensor::new(x.shape().to_vec(), dx)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.apply(x))
    }

    fn params(&self) -> Vec<&LayerParam> {
        vec![&self.slope]
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParam> {
        vec![&mut self.slope]
    }
}

#[derive(Debug, Clone, Default)]
pub struct Softplus {
    cache: Option<Tensor>,
}

impl Softplus {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Module for Softplus {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        self.cache = Some(x.clone());
        Ok(x.map(softplus))
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or_else(|| not_cached("softplus"))?;
        check_grad_shape(grad, x.shape(), "softplus")?;
        let dx = x.data().iter().zip(grad.data()).map(|(&v, &g)| g * sigmoid(v)).collect();
        Tensor::new(x.shape().to_vec(), dx)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.map(softplus))
    }
}

/// Sign activation with a clipped straight-through gradient.
#[derive(Debug, Clone, Default)]
pub struct SignAct {
    cache: Option<Tensor>,
}

impl SignAct {
    pub fn new() -> Self {
        Self::default()
    }
}

fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

impl Module for SignAct {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        self.cache = Some(x.clone());
        Ok(x.map(sign))
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or_else(|| not_cached("sign"))?;
        check_grad_shape(grad, x.shape(), "sign")?;
        Tensor::new(x.shape().to_vec(), quant::ste_backward(grad.data(), x.data()))
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.map(sign))
    }
}

/// Average pooling without padding.
#[derive(Debug, Clone)]
pub struct AvgPool2d {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    cache: Option<Vec<usize>>,
}

impl AvgPool2d {
    pub fn new(kernel: (usize, usize), stride: (usize, usize)) -> Result<Self> {
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(SlpError::Parameter("pooling kernel and stride must be positive".into()));
        }
        Ok(Self { kernel, stride, cache: None })
    }

    fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h < self.kernel.0 || w < self.kernel.1 {
            return Err(SlpError::Dimension(format!("pooling window does not fit a {h}x{w} input")));
        }
        Ok(((h - self.kernel.0) / self.stride.0 + 1, (w - self.kernel.1) / self.stride.1 + 1))
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (ho, wo) = self.output_hw(h, w)?;
        let area = (self.kernel.0 * self.kernel.1) as f64;
        let mut out = Vec::with_capacity(b * c * ho * wo);
        for plane in x.data().chunks(h * w) {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ky in 0..self.kernel.0 {
                        for kx in 0..self.kernel.1 {
                            acc += plane[(oy * self.stride.0 + ky) * w + ox * self.stride.1 + kx];
                        }
                    }
                    out.push(acc / area);
                }
            }
        }
        Tensor::new(vec![b, c, ho, wo], out)
    }
}

impl Module for AvgPool2d {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let y = self.apply(x)?;
        self.cache = Some(x.shape().to_vec());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let shape = self.cache.as_ref().ok_or_else(|| not_cached("avgpool2d"))?;
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (ho, wo) = self.output_hw(h, w)?;
        check_grad_shape(grad, &[b, c, ho, wo], "avgpool2d")?;
        let area = (self.kernel.0 * self.kernel.1) as f64;
        let mut dx = vec![0.0; b * c * h * w];
        for (plane, g) in dx.chunks_mut(h * w).zip(grad.data().chunks(ho * wo)) {
            for oy in 0..ho {
                for ox in 0..wo {
                    let share = g[oy * wo + ox] / area;
                    for ky in 0..self.kernel.0 {
                        for kx in 0..self.kernel.1 {
                            plane[(oy * self.stride.0 + ky) * w + ox * self.stride.1 + kx] += share;
                        }
                    }
                }
            }
        }
        Tensor::new(shape.clone(), dx)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x)
    }
}

/// `(B, ...)` to `(B, F)`.
#[derive(Debug, Clone, Default)]
pub struct Flatten {
    cache: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Module for Flatten {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        self.cache = Some(x.shape().to_vec());
        self.infer(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let shape = self.cache.as_ref().ok_or_else(|| not_cached("flatten"))?;
        grad.clone().reshaped(shape.clone())
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let b = x.batch();
        if b == 0 {
            return Err(SlpError::Dimension("cannot flatten an empty batch".into()));
        }
        x.clone().reshaped(vec![b, x.len() / b])
    }
}

/// Row-major reshape of each sample to `target`.
#[derive(Debug, Clone)]
pub struct Reshape {
    pub target: Vec<usize>,
    cache: Option<Vec<usize>>,
}

impl Reshape {
    pub fn new(target: Vec<usize>) -> Self {
        Self { target, cache: None }
    }
}

impl Module for Reshape {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        self.cache = Some(x.shape().to_vec());
        self.infer(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let shape = self.cache.as_ref().ok_or_else(|| not_cached("reshape"))?;
        grad.clone().reshaped(shape.clone())
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut shape = vec![x.batch()];
        shape.extend(&self.target);
        x.clone().reshaped(shape)
    }
}

/// `(B, C, H, W)` to `(B, C, W H, 1)`, column by column: entry `(h, w)`
/// moves to position `w H + h`.
#[derive(Debug, Clone, Default)]
pub struct ColumnStack {
    cache: Option<Vec<usize>>,
}

impl ColumnStack {
    pub fn new() -> Self {
        Self::default()
    }
}

fn column_stack(x: &Tensor, inverse: bool, hw: (usize, usize)) -> Result<Tensor> {
    let (h, w) = hw;
    let plane = h * w;
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.data().chunks(plane).zip(out.chunks_mut(plane)) {
        for r in 0..h {
            for c in 0..w {
                if inverse {
                    dst[r * w + c] = src[c * h + r];
                } else {
                    dst[c * h + r] = src[r * w + c];
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

impl Module for ColumnStack {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let y = self.infer(x)?;
        self.cache = Some(x.shape().to_vec());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let shape = self.cache.as_ref().ok_or_else(|| not_cached("column stack"))?;
        let (h, w) = (shape[2], shape[3]);
        column_stack(&grad.clone().reshaped(shape.clone())?, true, (h, w))
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        column_stack(x, false, (h, w))?.reshaped(vec![b, c, w * h, 1])
    }
}
