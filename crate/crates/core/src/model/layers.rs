//! Small differentiable building blocks composed from tensor primitives.

use candle_core::{DType, Device, Tensor, D};

use super::params::{Init, ParamStore};
use super::unfold::unfold_patches;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), &[output, input], Init::Uniform(bound))?,
            bias: store.param(&format!("{name}.bias"), &[output], Init::Zeros)?,
        })
    }

    /// Applies to the last axis of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = (input * kernel * kernel) as f64;
        Self::with_init(
            store,
            name,
            (input, output, kernel, stride, padding, bias),
            Init::Normal((2.0 / fan_in).sqrt()),
        )
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        (input, output, kernel, stride, padding, bias): (usize, usize, usize, usize, usize, bool),
        init: Init,
    ) -> Result<Self> {
        let weight = store.param(&format!("{name}.weight"), &[output, input, kernel, kernel], init)?;
        let bias = if bias {
            Some(store.param(&format!("{name}.bias"), &[output], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.dim(3).unwrap_or(1)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_cols(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }

    /// Convolution using only input channels `[start, start + len)` of the kernel.
    pub fn forward_channels(&self, x: &Tensor, start: usize, len: usize, with_bias: bool) -> Result<Tensor> {
        let w = self.weight.narrow(1, start, len)?;
        conv2d_cols(x, &w, if with_bias { self.bias.as_ref() } else { None }, self.stride, self.padding)
    }

    /// Convolution of a spatially constant `(N, len)` input over an `h x w`
    /// grid through kernel channels `[start, start + len)`, without bias.
    /// Only the zero padding makes the result vary across the grid, so each
    /// output cell sums the kernel taps that land inside the image.
    pub fn forward_constant(&self, values: &Tensor, start: usize, len: usize, (h, w): (usize, usize)) -> Result<Tensor> {
        let (n, _) = values.dims2()?;
        let (o, _, k, _) = self.weight.dims4()?;
        let (oh, ow) = (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        );
        let mut mask = vec![0f64; k * k * oh * ow];
        for ky in 0..k {
            for kx in 0..k {
                for i in 0..oh {
                    let y = (i * self.stride + ky) as isize - self.padding as isize;
                    for j in 0..ow {
                        let x = (j * self.stride + kx) as isize - self.padding as isize;
                        if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
                            mask[(ky * k + kx) * oh * ow + i * ow + j] = 1.0;
                        }
                    }
                }
            }
        }
        let mask = Tensor::from_vec(mask, (k * k, oh * ow), values.device())?.to_dtype(values.dtype())?;
        // (len, O * k * k)
        let wk = self
            .weight
            .narrow(1, start, len)?
            .transpose(0, 1)?
            .contiguous()?
            .reshape((len, o * k * k))?;
        let taps = values.matmul(&wk)?.reshape((n * o, k * k))?;
        Ok(taps.matmul(&mask)?.reshape((n, o, oh, ow))?)
    }
}

/// Cross-correlation of `x (B, C, H, W)` with `weight (O, C, k, k)` as a
/// single matrix product over unfolded patches.
pub fn conv2d_cols(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    let (b, c, _, _) = x.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 {
        return Err(crate::Error::Shape(format!(
            "conv weight {:?} does not fit input {:?}",
            weight.dims(),
            x.dims()
        )));
    }
    let (cols, g) = unfold_patches(x, k, stride, padding)?;
    let (oh, ow) = (g.out_height(), g.out_width());
    let y = weight.reshape((o, c * k * k))?.matmul(&cols)?;
    let y = match bias {
        Some(bias) => y.broadcast_add(&bias.reshape((o, 1))?)?,
        None => y,
    };
    Ok(y.reshape((o, b, oh, ow))?.transpose(0, 1)?.contiguous()?)
}

fn add_channel_bias(y: Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    match bias {
        Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
        None => Ok(y),
    }
}

/// Stride-2 transposed convolution, kernel 4, padding 1: doubles the spatial size.
///
/// Evaluated as a 3x3 convolution producing the four output phases, followed
/// by a pixel shuffle. Output pixel `(2m + a, 2n + b)` reads inputs
/// `(m + dy, n + dx)` with `dy, dx` in `-1..=1` through kernel tap
/// `(a + 1 - 2dy, b + 1 - 2dx)` when it lies in `0..4`.
#[derive(Debug, Clone)]
pub struct Deconv2d {
    weight: Tensor,
    bias: Tensor,
    gather: Tensor,
}

impl Deconv2d {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let fan_in = (input * 4) as f64;
        let weight = store.param(&format!("{name}.weight"), &[input, output, 4, 4], Init::Normal((2.0 / fan_in).sqrt()))?;
        let bias = store.param(&format!("{name}.bias"), &[output], Init::Zeros)?;
        let zero = (input * output * 16) as u32;
        let mut gather = Vec::with_capacity(output * 4 * input * 9);
        for o in 0..output {
            for a in 0..2 {
                for b in 0..2 {
                    for i in 0..input {
                        for dy in -1i32..=1 {
                            for dx in -1i32..=1 {
                                let ky = a + 1 - 2 * dy;
                                let kx = b + 1 - 2 * dx;
                                gather.push(if (0..4).contains(&ky) && (0..4).contains(&kx) {
                                    (((i * output + o) * 4 + ky as usize) * 4 + kx as usize) as u32
                                } else {
                                    zero
                                });
                            }
                        }
                    }
                }
            }
        }
        let n = gather.len();
        Ok(Self {
            weight,
            bias,
            gather: Tensor::from_vec(gather, n, store.device())?,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, input, h, w) = x.dims4()?;
        let output = self.bias.dim(0)?;
        let flat = Tensor::cat(&[&self.weight.flatten_all()?, &self.weight.flatten_all()?.narrow(0, 0, 1)?.zeros_like()?], 0)?;
        let phases = flat.index_select(&self.gather, 0)?.reshape((output * 4, input, 3, 3))?;
        let y = conv2d_cols(x, &phases, None, 1, 1)?;
        let y = y
            .reshape((b, output, 2, 2, h, w))?
            .permute((0, 1, 4, 2, 5, 3))?
            .reshape((b, output, 2 * h, 2 * w))?;
        add_channel_bias(y, Some(&self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.param(&format!("{name}.weight"), &[dim], Init::Ones)?,
            beta: store.param(&format!("{name}.bias"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.param(&format!("{name}.weight"), &[channels], Init::Ones)?,
            beta: store.param(&format!("{name}.bias"), &[channels], Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    /// `x` is `(N, C, H, W)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let g = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?.reshape((n, c, h, w))?;
        let gamma = self.gamma.reshape((1, c, 1, 1))?;
        let beta = self.beta.reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

/// Per-channel scale and shift; a normalization with no batch statistics,
/// so every output stays a function of its receptive field only.
#[derive(Debug, Clone)]
pub struct ChannelAffine {
    scale: Tensor,
    shift: Tensor,
}

impl ChannelAffine {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            scale: store.param(&format!("{name}.weight"), &[channels], Init::Ones)?,
            shift: store.param(&format!("{name}.bias"), &[channels], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.scale.dim(0)?;
        Ok(x
            .broadcast_mul(&self.scale.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.shift.reshape((1, c, 1, 1))?)?)
    }
}

/// Numerically stable softmax over the last axis; `-inf` entries get weight 0.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn scalar(value: f64, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::new(value, device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_masks_neg_inf() {
        let x = Tensor::new(&[[1.0f64, f64::NEG_INFINITY, 1.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(s[0], vec![0.5, 0.0, 0.5]);
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut store = ParamStore::new(DType::F64, seed);
        store.param("x", shape, Init::Normal(1.0)).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn unfolded_conv_matches_direct_conv() {
        for (k, stride, pad, h) in [(3, 1, 1, 7), (3, 2, 1, 8), (3, 2, 1, 9), (1, 1, 0, 5), (7, 2, 3, 12), (1, 2, 0, 6)] {
            let x = randn(&[2, 3, h, h], 1);
            let w = randn(&[4, 3, k, k], 2);
            let bias = randn(&[4], 3);
            let ours = conv2d_cols(&x, &w, Some(&bias), stride, pad).unwrap();
            let direct = x
                .conv2d(&w, pad, stride, 1, 1)
                .unwrap()
                .broadcast_add(&bias.reshape((1, 4, 1, 1)).unwrap())
                .unwrap();
            assert_eq!(ours.dims(), direct.dims());
            assert!(max_abs_diff(&ours, &direct) < 1e-12, "k{k} s{stride} p{pad} h{h}");
        }
    }

    #[test]
    fn constant_input_conv_matches_tiled_conv() {
        let mut store = ParamStore::new(DType::F64, 4);
        let conv = Conv2d::new(&mut store, "c", 5, 3, 3, 1, 1, true).unwrap();
        let v = randn(&[4, 2], 5);
        let tiled = v.reshape((4, 2, 1, 1)).unwrap().broadcast_as((4, 2, 6, 5)).unwrap().contiguous().unwrap();
        let a = conv.forward_constant(&v, 1, 2, (6, 5)).unwrap();
        let b = conv.forward_channels(&tiled, 1, 2, false).unwrap();
        assert!(max_abs_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn phase_deconv_matches_transposed_conv() {
        let mut store = ParamStore::new(DType::F64, 6);
        let d = Deconv2d::new(&mut store, "d", 3, 5).unwrap();
        let x = randn(&[2, 3, 4, 6], 7);
        let ours = d.forward(&x).unwrap();
        let direct = x.conv_transpose2d(d.weight(), 1, 0, 2, 1).unwrap();
        assert_eq!(ours.dims(), &[2, 5, 8, 12]);
        assert!(max_abs_diff(&ours, &direct) < 1e-12);
    }

    #[test]
    fn deconv_doubles_resolution() {
        let mut store = ParamStore::new(DType::F32, 0);
        let d = Deconv2d::new(&mut store, "d", 3, 5).unwrap();
        let x = Tensor::zeros((2, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(d.forward(&x).unwrap().dims(), &[2, 5, 16, 16]);
    }

    #[test]
    fn layer_norm_normalizes() {
        let mut store = ParamStore::new(DType::F64, 0);
        let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 6.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-4);
    }
}
