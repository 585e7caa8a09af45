//! Shared convolutional backbones: 3x3 conv + ReLU stacks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init, Conv2d, ConvGeometry, Layer, ParamSet, Sequential, Tensor, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub layers: Vec<ConvSpec>,
}

fn stride2_count(stride: usize) -> Result<usize> {
    if stride == 0 || !stride.is_power_of_two() {
        return Err(Error::InvalidConfig(format!("stride {stride} must be a power of two")));
    }
    Ok(stride.trailing_zeros() as usize)
}

impl BackboneSpec {
    /// Lightweight detector trunk whose channel count scales with `width`.
    pub fn detector(width: usize, stride: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::InvalidConfig("detector width must be positive".into()));
        }
        let downs = stride2_count(stride)?;
        let mut layers = Vec::new();
        let mut ch = 4 * width;
        for _ in 0..downs {
            layers.push(ConvSpec { out_channels: ch, stride: 2 });
            ch = 8 * width;
        }
        for _ in 0..2 {
            layers.push(ConvSpec { out_channels: 8 * width, stride: 1 });
        }
        Ok(Self { in_channels: 3, layers })
    }

    /// Feature encoder with `feature_dim` output channels.
    pub fn encoder(feature_dim: usize, stride: usize) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::InvalidConfig("feature_dim must be positive".into()));
        }
        let downs = stride2_count(stride)?;
        let mut layers = Vec::new();
        for k in 0..downs {
            let ch = if k + 1 == downs { feature_dim } else { (feature_dim / 2).max(1) };
            layers.push(ConvSpec { out_channels: ch, stride: 2 });
        }
        layers.push(ConvSpec { out_channels: feature_dim, stride: 1 });
        Ok(Self { in_channels: 3, layers })
    }

    pub fn stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(self.in_channels, |l| l.out_channels)
    }
}

/// A conv stack together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub net: Sequential,
    pub params: ParamSet,
}

/// Adds a conv layer's weight and bias to `params` under `prefix`.
pub(crate) fn make_conv<R: Rng + ?Sized>(
    params: &mut ParamSet,
    prefix: &str,
    geometry: ConvGeometry,
    weight_std: Option<f64>,
    bias: f64,
    rng: &mut R,
) -> Result<Conv2d> {
    let shape = [
        geometry.out_channels,
        geometry.in_channels,
        geometry.kernel,
        geometry.kernel,
    ];
    let fan_in = geometry.in_channels * geometry.kernel * geometry.kernel;
    let w = match weight_std {
        Some(std) => init::normal(&shape, std, rng),
        None => init::he_normal(&shape, fan_in, rng),
    };
    let b = Tensor::from_fn(&[geometry.out_channels], |_| bias);
    Ok(Conv2d {
        geometry,
        weight: params.add(format!("{prefix}.weight"), w)?,
        bias: params.add(format!("{prefix}.bias"), b)?,
    })
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(spec: BackboneSpec, prefix: &str, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut layers = Vec::new();
        let mut ch = spec.in_channels;
        for (k, l) in spec.layers.iter().enumerate() {
            let geometry = ConvGeometry {
                in_channels: ch,
                out_channels: l.out_channels,
                kernel: 3,
                stride: l.stride,
                pad: 1,
            };
            let conv = make_conv(&mut params, &format!("{prefix}.{k}"), geometry, None, 0.0, rng)?;
            layers.push(Layer::Conv2d(conv));
            layers.push(Layer::Relu);
            ch = l.out_channels;
        }
        Ok(Self {
            spec,
            net: Sequential::new(layers),
            params,
        })
    }

    pub fn stride(&self) -> usize {
        self.spec.stride()
    }

    pub fn out_channels(&self) -> usize {
        self.spec.out_channels()
    }

    /// Maps `[0, 1]` pixel values to `[-1, 1]`.
    pub fn normalize(image: &Tensor) -> Tensor {
        image.map(|v| 2.0 * v - 1.0)
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let (c, h, w) = image.dims3()?;
        let s = self.stride();
        if c != self.spec.in_channels || h % s != 0 || w % s != 0 {
            return Err(Error::InvalidShape(format!(
                "backbone expects [{}, H, W] with H, W divisible by {s}, got {:?}",
                self.spec.in_channels,
                image.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, image: &Tensor) -> Result<(Tensor, Trace)> {
        self.check_input(image)?;
        self.net.forward(&self.params, &Self::normalize(image))
    }

    pub fn infer(&self, image: &Tensor) -> Result<Tensor> {
        self.check_input(image)?;
        self.net.infer(&self.params, &Self::normalize(image))
    }

    /// Accumulates parameter gradients for `upstream` at the backbone output.
    pub fn backward(&mut self, trace: &Trace, upstream: &Tensor) -> Result<()> {
        self.net.backward(&mut self.params, trace, upstream).map(|_| ())
    }
}
