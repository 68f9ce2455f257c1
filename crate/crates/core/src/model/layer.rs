use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, conv_output_dim, gemm, numel, SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv2d,
    Linear,
    Relu,
    MaxPool,
    Flatten,
    BatchNorm,
}

impl LayerKind {
    /// Only the MAC-bearing layers are fault targets.
    pub fn injectable(self) -> bool {
        matches!(self, LayerKind::Conv2d | LayerKind::Linear)
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::Linear => "linear",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Flatten => "flatten",
            LayerKind::BatchNorm => "batchnorm",
        }
    }
}

/// One layer with its parameters. Linear weights are stored `out x in`,
/// convolution weights `Cout x Cin x kh x kw`.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        pad: usize,
    },
    Linear {
        weight: Tensor,
        bias: Tensor,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    Flatten,
    /// Batch normalisation folded to a per-channel affine map.
    BatchNorm {
        scale: Tensor,
        shift: Tensor,
    },
}

/// Serializable description of a layer without its parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pad: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    /// Shapes of the parameter tensors in storage order.
    #[serde(default)]
    pub params: Vec<Vec<usize>>,
    pub injectable: bool,
}

impl Layer {
    pub fn linear(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [out, _] = *weight.shape() else {
            return Err(Error::Dimension(format!(
                "linear weight must be out x in, got {:?}",
                weight.shape()
            )));
        };
        if bias.shape() != [out] {
            return Err(Error::Dimension(format!(
                "linear bias shape {:?} does not match {out} outputs",
                bias.shape()
            )));
        }
        Ok(Layer::Linear { weight, bias })
    }

    pub fn conv2d(weight: Tensor, bias: Tensor, stride: usize, pad: usize) -> Result<Self> {
        let [cout, _, _, _] = *weight.shape() else {
            return Err(Error::Dimension(format!(
                "conv2d weight must be Cout x Cin x kh x kw, got {:?}",
                weight.shape()
            )));
        };
        if bias.shape() != [cout] {
            return Err(Error::Dimension(format!(
                "conv2d bias shape {:?} does not match {cout} channels",
                bias.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("stride must be at least 1".into()));
        }
        Ok(Layer::Conv2d {
            weight,
            bias,
            stride,
            pad,
        })
    }

    /// Batch norm from running statistics, folded to `scale`/`shift`.
    pub fn batch_norm(gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32], eps: f32) -> Result<Self> {
        let c = gamma.len();
        if beta.len() != c || mean.len() != c || var.len() != c {
            return Err(Error::Dimension("batch norm statistics differ in length".into()));
        }
        let scale: Vec<f32> = gamma
            .iter()
            .zip(var)
            .map(|(g, v)| g / (v + eps).sqrt())
            .collect();
        let shift: Vec<f32> = beta
            .iter()
            .zip(mean)
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        Ok(Layer::BatchNorm {
            scale: Tensor::new(vec![c], scale)?,
            shift: Tensor::new(vec![c], shift)?,
        })
    }

    /// Kaiming-uniform weights with `a = sqrt(5)`, i.e. `bound = 1 / sqrt(fan_in)`
    /// (the usual framework default), and zero bias.
    pub fn linear_init(inputs: usize, outputs: usize, rng: &mut SeededRng) -> Self {
        let bound = init_bound(inputs);
        Layer::Linear {
            weight: Tensor::from_fn(&[outputs, inputs], |_| rng.uniform(-bound, bound)),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn conv2d_init(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let bound = init_bound(cin * kernel * kernel);
        Layer::Conv2d {
            weight: Tensor::from_fn(&[cout, cin, kernel, kernel], |_| rng.uniform(-bound, bound)),
            bias: Tensor::zeros(&[cout]),
            stride,
            pad,
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d { .. } => LayerKind::Conv2d,
            Layer::Linear { .. } => LayerKind::Linear,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool { .. } => LayerKind::MaxPool,
            Layer::Flatten => LayerKind::Flatten,
            Layer::BatchNorm { .. } => LayerKind::BatchNorm,
        }
    }

    pub fn injectable(&self) -> bool {
        self.kind().injectable()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Linear { weight, bias } => vec![weight, bias],
            Layer::BatchNorm { scale, shift } => vec![scale, shift],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Linear { weight, bias } => vec![weight, bias],
            Layer::BatchNorm { scale, shift } => vec![scale, shift],
            _ => Vec::new(),
        }
    }

    pub fn spec(&self) -> LayerSpec {
        let (stride, pad, size) = match self {
            Layer::Conv2d { stride, pad, .. } => (Some(*stride), Some(*pad), None),
            Layer::MaxPool { size } => (None, None, Some(*size)),
            _ => (None, None, None),
        };
        LayerSpec {
            kind: self.kind(),
            stride,
            pad,
            size,
            params: self.params().iter().map(|t| t.shape().to_vec()).collect(),
            injectable: self.injectable(),
        }
    }

    /// Rebuilds a layer from its spec and parameter tensors.
    pub fn from_spec(spec: &LayerSpec, mut params: Vec<Tensor>) -> Result<Self> {
        let want = match spec.kind {
            LayerKind::Conv2d | LayerKind::Linear | LayerKind::BatchNorm => 2,
            _ => 0,
        };
        if params.len() != want {
            return Err(Error::Format(format!(
                "{} layer needs {want} parameter tensors, found {}",
                spec.kind.name(),
                params.len()
            )));
        }
        let missing = |what: &str| Error::Format(format!("{} layer lacks `{what}`", spec.kind.name()));
        let layer = match spec.kind {
            LayerKind::Conv2d => {
                let bias = params.pop().expect("checked");
                let weight = params.pop().expect("checked");
                Layer::conv2d(
                    weight,
                    bias,
                    spec.stride.ok_or_else(|| missing("stride"))?,
                    spec.pad.ok_or_else(|| missing("pad"))?,
                )?
            }
            LayerKind::Linear => {
                let bias = params.pop().expect("checked");
                let weight = params.pop().expect("checked");
                Layer::linear(weight, bias)?
            }
            LayerKind::BatchNorm => {
                let shift = params.pop().expect("checked");
                let scale = params.pop().expect("checked");
                Layer::BatchNorm { scale, shift }
            }
            LayerKind::Relu => Layer::Relu,
            LayerKind::Flatten => Layer::Flatten,
            LayerKind::MaxPool => Layer::MaxPool {
                size: spec.size.ok_or_else(|| missing("size"))?,
            },
        };
        Ok(layer)
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d {
                weight,
                stride,
                pad,
                ..
            } => {
                let [cin, h, w] = *input else {
                    return Err(Error::Dimension(format!(
                        "conv2d expects C x H x W input, got {input:?}"
                    )));
                };
                let s = weight.shape();
                if s[1] != cin {
                    return Err(Error::Dimension(format!(
                        "conv2d expects {} channels, got {cin}",
                        s[1]
                    )));
                }
                Ok(vec![
                    s[0],
                    conv_output_dim(h, s[2], *stride, *pad)?,
                    conv_output_dim(w, s[3], *stride, *pad)?,
                ])
            }
            Layer::Linear { weight, .. } => {
                let s = weight.shape();
                if input != [s[1]] {
                    return Err(Error::Dimension(format!(
                        "linear expects [{}] input, got {input:?}",
                        s[1]
                    )));
                }
                Ok(vec![s[0]])
            }
            Layer::MaxPool { size } => {
                let [c, h, w] = *input else {
                    return Err(Error::Dimension(format!(
                        "maxpool expects C x H x W input, got {input:?}"
                    )));
                };
                Ok(vec![
                    c,
                    conv_output_dim(h, *size, *size, 0)?,
                    conv_output_dim(w, *size, *size, 0)?,
                ])
            }
            Layer::Flatten => Ok(vec![numel(input)]),
            Layer::Relu => Ok(input.to_vec()),
            Layer::BatchNorm { scale, .. } => match input.first() {
                Some(&c) if c == scale.len() => Ok(input.to_vec()),
                _ => Err(Error::Dimension(format!(
                    "batch norm over {} channels got input {input:?}",
                    scale.len()
                ))),
            },
        }
    }

    /// Batched forward pass. For conv/linear layers the result is the affine
    /// output, the point where faults are injected.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv2d {
                weight,
                bias,
                stride,
                pad,
            } => tensor::conv2d(x, weight, bias, *stride, *pad),
            Layer::Linear { weight, bias } => linear_forward(x, weight, bias),
            Layer::Relu => Ok(tensor::relu(x)),
            Layer::MaxPool { size } => tensor::max_pool2d(x, *size),
            Layer::Flatten => {
                let b = *x
                    .shape()
                    .first()
                    .ok_or_else(|| Error::Dimension("flatten needs a batch axis".into()))?;
                let rest = x.len().checked_div(b).unwrap_or(0);
                x.clone().reshape(&[b, rest])
            }
            Layer::BatchNorm { scale, shift } => tensor::batch_norm_affine(x, scale, shift),
        }
    }

    /// Multiply-accumulate count for one sample with the given input shape.
    pub fn macs(&self, input: &[usize]) -> Result<u64> {
        Ok(match self {
            Layer::Conv2d { weight, .. } => {
                let out = self.output_shape(input)?;
                (numel(&out) * numel(&weight.shape()[1..])) as u64
            }
            Layer::Linear { weight, .. } => weight.len() as u64,
            _ => 0,
        })
    }
}

/// `y = x * W^T + b`, with the sum over inputs in ascending order and the
/// bias added last.
pub(crate) fn init_bound(fan_in: usize) -> f32 {
    1.0 / (fan_in as f32).sqrt()
}

pub(crate) fn linear_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [out, inputs] = *weight.shape() else {
        return Err(Error::Dimension("linear weight must be 2-D".into()));
    };
    let [b, xin] = *x.shape() else {
        return Err(Error::Dimension(format!(
            "linear input must be B x {inputs}, got {:?}",
            x.shape()
        )));
    };
    if xin != inputs {
        return Err(Error::Dimension(format!(
            "linear expects {inputs} inputs, got {xin}"
        )));
    }
    let wt = tensor::transpose2d(weight)?;
    let mut y = vec![0.0; b * out];
    gemm(b, inputs, out, x.data(), wt.data(), &mut y);
    if out > 0 {
        for row in y.chunks_exact_mut(out) {
            for (v, bv) in row.iter_mut().zip(bias.data()) {
                *v += bv;
            }
        }
    }
    Tensor::new(vec![b, out], y)
}
