//! Convolutional layers and image operators used by the U-Net builders.

mod ops;

pub use ops::{
    concat_channels, conv2d, depthwise_conv2d, log_softmax_channels, maxpool2x2, softmax_channels,
    upsample_nearest2x,
};

use rand::Rng;

use crate::tensor::{Graph, Result, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Fan-in scaled uniform init: `U(-√(6/fan_in), √(6/fan_in))`.
pub fn he_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect();
    Tensor::new(shape, data).expect("init shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `[out_ch, in_ch, kh, kw]`
    pub weight: Tensor,
    /// `[out_ch]`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: Padding,
}

/// Graph handles for a bound [`Conv2d`].
#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, padding: Padding, rng: &mut impl Rng) -> Self {
        Self {
            weight: he_uniform(vec![out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, rng),
            bias: Tensor::zeros(vec![out_ch]),
            stride: 1,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn bind(&self, g: &mut Graph) -> ConvVars {
        ConvVars { weight: g.param(&self.weight), bias: g.param(&self.bias) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, vars: &ConvVars) -> Result<Var> {
        conv2d(g, x, vars.weight, Some(vars.bias), self.stride, self.padding)
    }
}

/// Depthwise (per-channel) convolution followed by a 1×1 pointwise mix.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableConv2d {
    /// `[in_ch, 1, kh, kw]`
    pub depthwise: Tensor,
    /// `[out_ch, in_ch, 1, 1]`
    pub pointwise: Tensor,
    /// `[out_ch]`
    pub bias: Tensor,
    pub padding: Padding,
}

#[derive(Debug, Clone, Copy)]
pub struct SeparableVars {
    pub depthwise: Var,
    pub pointwise: Var,
    pub bias: Var,
}

impl SeparableConv2d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, padding: Padding, rng: &mut impl Rng) -> Self {
        Self {
            depthwise: he_uniform(vec![in_ch, 1, kernel, kernel], kernel * kernel, rng),
            pointwise: he_uniform(vec![out_ch, in_ch, 1, 1], in_ch, rng),
            bias: Tensor::zeros(vec![out_ch]),
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.depthwise.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.pointwise.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.depthwise.numel() + self.pointwise.numel() + self.bias.numel()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.depthwise, &self.pointwise, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.depthwise, &mut self.pointwise, &mut self.bias]
    }

    pub fn bind(&self, g: &mut Graph) -> SeparableVars {
        SeparableVars {
            depthwise: g.param(&self.depthwise),
            pointwise: g.param(&self.pointwise),
            bias: g.param(&self.bias),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, vars: &SeparableVars) -> Result<Var> {
        let d = depthwise_conv2d(g, x, vars.depthwise, 1, self.padding)?;
        conv2d(g, d, vars.pointwise, Some(vars.bias), 1, Padding::Same)
    }
}
