use super::gemm::{gemm, MatRef};
use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Output spatial size, `floor((n + 2 pad - k) / stride) + 1`.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel.is_multiple_of(2) || self.stride == 0 {
            return Err(Error::InvalidShape(format!(
                "kernel must be odd and stride positive (k={}, stride={})",
                self.kernel, self.stride
            )));
        }
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if ph < self.kernel || pw < self.kernel {
            return Err(Error::InvalidShape(format!(
                "input {h}x{w} smaller than kernel {}",
                self.kernel
            )));
        }
        Ok((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }
}

fn im2col(input: &[f64], h: usize, w: usize, g: &ConvGeometry, oh: usize, ow: usize) -> Vec<f64> {
    let k = g.kernel;
    let plane = oh * ow;
    let mut cols = vec![0.0; g.in_channels * k * k * plane];
    for c in 0..g.in_channels {
        let src = &input[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oi in 0..oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src_row = &src[ii as usize * w..(ii as usize + 1) * w];
                    for oj in 0..ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[oi * ow + oj] = src_row[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], h: usize, w: usize, g: &ConvGeometry, oh: usize, ow: usize) -> Vec<f64> {
    let k = g.kernel;
    let plane = oh * ow;
    let mut out = vec![0.0; g.in_channels * h * w];
    for c in 0..g.in_channels {
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oi in 0..oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[ii as usize * w + jj as usize] += src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_forward_cols(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    g: &ConvGeometry,
) -> Result<(Tensor, Vec<f64>)> {
    let (c, h, w) = input.dims3()?;
    if c != g.in_channels {
        return Err(Error::InvalidShape(format!(
            "conv expects {} input channels, got {c}",
            g.in_channels
        )));
    }
    weight.expect_shape(&[g.out_channels, g.in_channels, g.kernel, g.kernel])?;
    bias.expect_shape(&[g.out_channels])?;
    let (oh, ow) = g.output_size(h, w)?;
    let cols = im2col(input.data(), h, w, g, oh, ow);
    let plane = oh * ow;
    let kk = g.in_channels * g.kernel * g.kernel;
    let mut out = Vec::with_capacity(g.out_channels * plane);
    for &b in bias.data() {
        out.extend(std::iter::repeat_n(b, plane));
    }
    gemm(
        1.0,
        MatRef::row_major(weight.data(), g.out_channels, kk),
        MatRef::row_major(&cols, kk, plane),
        1.0,
        &mut out,
    );
    Ok((Tensor::new(vec![g.out_channels, oh, ow], out)?, cols))
}

/// Direct 2-D convolution (cross-correlation) of a `[C_in, H, W]` input.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let ws = weight.shape();
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(Error::InvalidShape(format!(
            "conv weight must be [C_out, C_in, k, k], got {ws:?}"
        )));
    }
    let g = ConvGeometry {
        in_channels: ws[1],
        out_channels: ws[0],
        kernel: ws[2],
        stride,
        pad,
    };
    conv_forward_cols(input, weight, bias, &g).map(|(out, _)| out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub geometry: ConvGeometry,
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// The fixed set of differentiable layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv2d(Conv2d),
    /// Affine map on `[in]` or `[N, in]` inputs with weight `[out, in]`.
    Linear(Linear),
    Relu,
}

/// Saved forward state needed by [`Layer::backward`].
#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv {
        input_shape: Vec<usize>,
        cols: Vec<f64>,
    },
    Linear {
        input: Tensor,
    },
    Relu {
        input: Tensor,
    },
}

impl Layer {
    pub fn forward(&self, params: &ParamSet, input: &Tensor) -> Result<(Tensor, LayerCache)> {
        match self {
            Layer::Conv2d(conv) => {
                let (out, cols) = conv_forward_cols(
                    input,
                    params.value(conv.weight),
                    params.value(conv.bias),
                    &conv.geometry,
                )?;
                Ok((
                    out,
                    LayerCache::Conv {
                        input_shape: input.shape().to_vec(),
                        cols,
                    },
                ))
            }
            Layer::Linear(lin) => {
                let out = linear_forward(lin, params, input)?;
                Ok((
                    out,
                    LayerCache::Linear {
                        input: input.clone(),
                    },
                ))
            }
            Layer::Relu => Ok((
                input.map(|v| v.max(0.0)),
                LayerCache::Relu {
                    input: input.clone(),
                },
            )),
        }
    }

    /// Forward pass without keeping any state for backpropagation.
    pub fn infer(&self, params: &ParamSet, input: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv2d(conv) => conv2d_layer(conv, params, input),
            Layer::Linear(lin) => linear_forward(lin, params, input),
            Layer::Relu => Ok(input.map(|v| v.max(0.0))),
        }
    }

    /// Backpropagates `upstream` through the layer.
    ///
    /// Parameter gradients are accumulated into `params`; the gradient with
    /// respect to the layer input is returned.
    pub fn backward(
        &self,
        params: &mut ParamSet,
        cache: Option<&LayerCache>,
        upstream: &Tensor,
    ) -> Result<Tensor> {
        let cache = cache.ok_or_else(|| {
            Error::Usage("backward called without a cached forward pass".into())
        })?;
        match (self, cache) {
            (Layer::Conv2d(conv), LayerCache::Conv { input_shape, cols }) => {
                conv_backward(conv, params, input_shape, cols, upstream)
            }
            (Layer::Linear(lin), LayerCache::Linear { input }) => {
                linear_backward(lin, params, input, upstream)
            }
            (Layer::Relu, LayerCache::Relu { input }) => {
                upstream.expect_shape(input.shape())?;
                let data = input
                    .data()
                    .iter()
                    .zip(upstream.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                Tensor::new(input.shape().to_vec(), data)
            }
            _ => Err(Error::Usage("cache does not belong to this layer kind".into())),
        }
    }
}

fn conv2d_layer(conv: &Conv2d, params: &ParamSet, input: &Tensor) -> Result<Tensor> {
    conv_forward_cols(
        input,
        params.value(conv.weight),
        params.value(conv.bias),
        &conv.geometry,
    )
    .map(|(out, _)| out)
}

fn conv_backward(
    conv: &Conv2d,
    params: &mut ParamSet,
    input_shape: &[usize],
    cols: &[f64],
    upstream: &Tensor,
) -> Result<Tensor> {
    let g = conv.geometry;
    let (h, w) = (input_shape[1], input_shape[2]);
    let (oh, ow) = g.output_size(h, w)?;
    upstream.expect_shape(&[g.out_channels, oh, ow])?;
    let plane = oh * ow;
    let kk = g.in_channels * g.kernel * g.kernel;
    let dout = MatRef::row_major(upstream.data(), g.out_channels, plane);

    {
        let bias = params.get_mut(conv.bias);
        for (o, gb) in bias.grad.data_mut().iter_mut().enumerate() {
            *gb += upstream.data()[o * plane..(o + 1) * plane].iter().sum::<f64>();
        }
    }
    {
        let weight = params.get_mut(conv.weight);
        gemm(
            1.0,
            dout,
            MatRef::row_major(cols, kk, plane).t(),
            1.0,
            weight.grad.data_mut(),
        );
    }
    let mut dcols = vec![0.0; kk * plane];
    gemm(
        1.0,
        MatRef::row_major(params.value(conv.weight).data(), g.out_channels, kk).t(),
        dout,
        0.0,
        &mut dcols,
    );
    Tensor::new(input_shape.to_vec(), col2im(&dcols, h, w, &g, oh, ow))
}

fn linear_rows(lin: &Linear, input: &Tensor) -> Result<usize> {
    match *input.shape() {
        [n] if n == lin.in_features => Ok(1),
        [rows, n] if n == lin.in_features => Ok(rows),
        _ => Err(Error::InvalidShape(format!(
            "linear layer expects [{}] or [N, {}], got {:?}",
            lin.in_features,
            lin.in_features,
            input.shape()
        ))),
    }
}

fn linear_forward(lin: &Linear, params: &ParamSet, input: &Tensor) -> Result<Tensor> {
    let rows = linear_rows(lin, input)?;
    let weight = params.value(lin.weight);
    let bias = params.value(lin.bias);
    weight.expect_shape(&[lin.out_features, lin.in_features])?;
    let mut out = Vec::with_capacity(rows * lin.out_features);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    gemm(
        1.0,
        MatRef::row_major(input.data(), rows, lin.in_features),
        MatRef::row_major(weight.data(), lin.out_features, lin.in_features).t(),
        1.0,
        &mut out,
    );
    let shape = if input.ndim() == 1 {
        vec![lin.out_features]
    } else {
        vec![rows, lin.out_features]
    };
    Tensor::new(shape, out)
}

fn linear_backward(
    lin: &Linear,
    params: &mut ParamSet,
    input: &Tensor,
    upstream: &Tensor,
) -> Result<Tensor> {
    let rows = linear_rows(lin, input)?;
    if upstream.len() != rows * lin.out_features {
        return Err(Error::InvalidShape(format!(
            "upstream gradient has {} values, expected {}",
            upstream.len(),
            rows * lin.out_features
        )));
    }
    let dout = MatRef::row_major(upstream.data(), rows, lin.out_features);
    {
        let bias = params.get_mut(lin.bias);
        for r in 0..rows {
            for (gb, &g) in bias
                .grad
                .data_mut()
                .iter_mut()
                .zip(&upstream.data()[r * lin.out_features..(r + 1) * lin.out_features])
            {
                *gb += g;
            }
        }
    }
    {
        let weight = params.get_mut(lin.weight);
        gemm(
            1.0,
            dout.t(),
            MatRef::row_major(input.data(), rows, lin.in_features),
            1.0,
            weight.grad.data_mut(),
        );
    }
    let mut dinput = vec![0.0; rows * lin.in_features];
    gemm(
        1.0,
        dout,
        MatRef::row_major(params.value(lin.weight).data(), lin.out_features, lin.in_features),
        0.0,
        &mut dinput,
    );
    Tensor::new(input.shape().to_vec(), dinput)
}

/// Layers applied in order, with the caches of one training forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

/// Forward caches of a [`Sequential`], one per layer.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    caches: Vec<LayerCache>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, params: &ParamSet, input: &Tensor) -> Result<(Tensor, Trace)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let (y, cache) = layer.forward(params, &x)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, Trace { caches }))
    }

    pub fn infer(&self, params: &ParamSet, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.infer(params, &x)?;
        }
        Ok(x)
    }

    pub fn backward(&self, params: &mut ParamSet, trace: &Trace, upstream: &Tensor) -> Result<Tensor> {
        if trace.caches.len() != self.layers.len() {
            return Err(Error::Usage(format!(
                "trace holds {} caches for {} layers",
                trace.caches.len(),
                self.layers.len()
            )));
        }
        let mut grad = upstream.clone();
        for (layer, cache) in self.layers.iter().zip(&trace.caches).rev() {
            grad = layer.backward(params, Some(cache), &grad)?;
        }
        Ok(grad)
    }
}
