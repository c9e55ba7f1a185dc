//! Small layer kit with reverse-mode gradients and Adam.

mod layers;

pub use layers::{sigmoid, softplus, softplus_inverse, AvgPool2d, BatchNorm2d, ColumnStack, Conv2d, Flatten, Linear, PRelu, Reshape, SignAct, Softplus};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SlpError};
use crate::quant::QuantKind;

/// Dense row-major tensor of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(SlpError::Dimension(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// `(B, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(SlpError::Dimension(format!("expected NCHW tensor, got {:?}", self.shape))),
        }
    }

    /// `(B, F)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [b, f] => Ok((b, f)),
            _ => Err(SlpError::Dimension(format!("expected (B, F) tensor, got {:?}", self.shape))),
        }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(SlpError::Dimension(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Fp32,
    Binary,
    Ternary,
}

impl Precision {
    pub fn quant_kind(self) -> Option<QuantKind> {
        match self {
            Precision::Fp32 => None,
            Precision::Binary => Some(QuantKind::Binary),
            Precision::Ternary => Some(QuantKind::Ternary),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Fp32 => "fp32",
            Precision::Binary => "binary",
            Precision::Ternary => "ternary",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = SlpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp32" => Ok(Precision::Fp32),
            "binary" => Ok(Precision::Binary),
            "ternary" => Ok(Precision::Ternary),
            other => Err(SlpError::Parameter(format!("unknown precision {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Weight,
    Bias,
    BnScale,
    BnShift,
    PreluSlope,
    /// Non-trainable running statistics of batch normalization.
    RunningMean,
    RunningVar,
    /// Scalar step parameters of the unfolded blocks.
    Scalar,
}

impl Role {
    pub fn trainable(self) -> bool {
        !matches!(self, Role::RunningMean | Role::RunningVar)
    }
}

/// Trainable tensor with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParam {
    pub name: String,
    pub role: Role,
    precision: Precision,
    shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl LayerParam {
    pub fn new(name: impl Into<String>, role: Role, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(SlpError::Dimension(format!("parameter shape {shape:?} vs {} values", values.len())));
        }
        Ok(Self {
            name: name.into(),
            role,
            precision: Precision::Fp32,
            shape,
            grad: vec![0.0; n],
            values,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Only weights may carry a quantized precision tag.
    pub fn set_precision(&mut self, precision: Precision) -> Result<()> {
        if precision != Precision::Fp32 && self.role != Role::Weight {
            return Err(SlpError::Parameter(format!(
                "{} has role {:?}; only weights can be quantized",
                self.name, self.role
            )));
        }
        self.precision = precision;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Common interface of every layer.
pub trait Module {
    /// Forward pass that caches what `backward` needs.
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor>;
    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, grad: &Tensor) -> Result<Tensor>;
    /// Stateless evaluation-mode pass.
    fn infer(&self, x: &Tensor) -> Result<Tensor>;
    fn params(&self) -> Vec<&LayerParam> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut LayerParam> {
        Vec::new()
    }
}

/// Any layer of the kit.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(Conv2d),
    BatchNorm2d(BatchNorm2d),
    PRelu(PRelu),
    Softplus(Softplus),
    AvgPool2d(AvgPool2d),
    Linear(Linear),
    Flatten(Flatten),
    Reshape(Reshape),
    ColumnStack(ColumnStack),
    SignAct(SignAct),
}

macro_rules! dispatch {
    ($self:expr, $l:ident => $body:expr) => {
        match $self {
            Layer::Conv2d($l) => $body,
            Layer::BatchNorm2d($l) => $body,
            Layer::PRelu($l) => $body,
            Layer::Softplus($l) => $body,
            Layer::AvgPool2d($l) => $body,
            Layer::Linear($l) => $body,
            Layer::Flatten($l) => $body,
            Layer::Reshape($l) => $body,
            Layer::ColumnStack($l) => $body,
            Layer::SignAct($l) => $body,
        }
    };
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm2d(_) => "batchnorm2d",
            Layer::PRelu(_) => "prelu",
            Layer::Softplus(_) => "softplus",
            Layer::AvgPool2d(_) => "avgpool2d",
            Layer::Linear(_) => "linear",
            Layer::Flatten(_) => "flatten",
            Layer::Reshape(_) => "reshape",
            Layer::ColumnStack(_) => "column_stack",
            Layer::SignAct(_) => "sign",
        }
    }

    /// Set the precision of the layer's weight, if it has one.
    pub fn set_precision(&mut self, precision: Precision) -> Result<()> {
        match self {
            Layer::Conv2d(c) => c.set_precision(precision),
            Layer::Linear(l) => l.set_precision(precision),
            _ => Ok(()),
        }
    }

    /// Quantize weights and cache packed kernels for inference.
    pub fn freeze(&mut self) -> Result<()> {
        match self {
            Layer::Conv2d(c) => c.freeze(),
            Layer::Linear(l) => l.freeze(),
            _ => Ok(()),
        }
    }

    /// Every stored tensor, including non-trainable buffers.
    pub fn state(&self) -> Vec<&LayerParam> {
        match self {
            Layer::BatchNorm2d(bn) => bn.state(),
            other => other.params(),
        }
    }

    pub fn state_mut(&mut self) -> Vec<&mut LayerParam> {
        match self {
            Layer::BatchNorm2d(bn) => bn.state_mut(),
            other => other.params_mut(),
        }
    }
}

impl Module for Layer {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        dispatch!(self, l => l.forward(x, mode))
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        dispatch!(self, l => l.backward(grad))
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        dispatch!(self, l => l.infer(x))
    }

    fn params(&self) -> Vec<&LayerParam> {
        dispatch!(self, l => l.params())
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParam> {
        dispatch!(self, l => l.params_mut())
    }
}

/// Layers applied in order.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn set_precision(&mut self, precision: Precision) -> Result<()> {
        self.layers.iter_mut().try_for_each(|l| l.set_precision(precision))
    }

    pub fn freeze(&mut self) -> Result<()> {
        self.layers.iter_mut().try_for_each(Layer::freeze)
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(LayerParam::zero_grad);
    }
}

impl Module for Sequential {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, mode)?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut g = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    fn params(&self) -> Vec<&LayerParam> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParam> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(SlpError::Parameter(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() })
    }

    /// Multiply the learning rate by `factor`.
    pub fn decay(&mut self, factor: f64) {
        self.lr *= factor;
    }

    pub fn step(&mut self, params: &mut [&mut LayerParam]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(SlpError::State("Adam moments do not match the parameter list".into()));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.values.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p.values[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn param(values: Vec<f64>) -> LayerParam {
        let n = values.len();
        LayerParam::new("p", Role::Weight, vec![n], values).unwrap()
    }

    #[test]
    fn tensor_shape_checks() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.dims4().unwrap(), (1, 2, 2, 1));
        assert!(t.dims2().is_err());
        assert!(t.clone().reshaped(vec![3]).is_err());
        assert_eq!(t.reshaped(vec![4, 1]).unwrap().dims2().unwrap(), (4, 1));
    }

    #[test]
    fn precision_only_on_weights() {
        let mut p = LayerParam::new("b", Role::Bias, vec![1], vec![0.0]).unwrap();
        assert!(p.set_precision(Precision::Binary).is_err());
        assert!(p.set_precision(Precision::Fp32).is_ok());
        let mut w = param(vec![1.0]);
        w.set_precision(Precision::Ternary).unwrap();
        assert_eq!(w.precision(), Precision::Ternary);
        assert!(LayerParam::new("x", Role::Weight, vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut p = param(vec![0.5, -1.5]);
        let mut adam = AdamState::new(1e-3).unwrap();
        adam.step(&mut [&mut p]).unwrap();
        assert_eq!(p.values, vec![0.5, -1.5]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let lr = 1e-3;
        let mut p = param(vec![0.0, 0.0]);
        p.grad = vec![3.0, -0.2];
        let mut adam = AdamState::new(lr).unwrap();
        adam.step(&mut [&mut p]).unwrap();
        // mhat = g, vhat = g^2 after bias correction
        assert_relative_eq!(p.values[0], -lr * 3.0 / (3.0 + 1e-8), epsilon = 1e-15);
        assert_relative_eq!(p.values[1], lr * 0.2 / (0.2 + 1e-8), epsilon = 1e-15);
    }

    #[test]
    fn adam_decay_and_validation() {
        assert!(AdamState::new(0.0).is_err());
        let mut adam = AdamState::new(1e-3).unwrap();
        adam.decay(0.65);
        adam.decay(0.65);
        assert_relative_eq!(adam.lr, 1e-3 * 0.65 * 0.65);
        let mut a = param(vec![1.0]);
        let mut b = param(vec![1.0, 2.0]);
        adam.step(&mut [&mut a]).unwrap();
        assert!(matches!(adam.step(&mut [&mut b]), Err(SlpError::State(_))));
    }
}
