//! Patch unfolding for convolutions, with its adjoint as the backward pass.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PatchGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn image_shape(&self) -> Shape {
        Shape::from((self.batch, self.channels, self.height, self.width))
    }

    fn cols_shape(&self) -> Shape {
        Shape::from((
            self.channels * self.kernel * self.kernel,
            self.batch * self.out_height() * self.out_width(),
        ))
    }

    /// Calls `f(col_index, image_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let (oh, ow) = (self.out_height(), self.out_width());
        let cols = self.batch * oh * ow;
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * cols;
                    for b in 0..self.batch {
                        let plane = (b * self.channels + c) * self.height * self.width;
                        for i in 0..oh {
                            let y = (i * s + ky) as isize - p;
                            if y < 0 || y >= self.height as isize {
                                continue;
                            }
                            let base = row + (b * oh + i) * ow;
                            let img_row = plane + y as usize * self.width;
                            for j in 0..ow {
                                let x = (j * s + kx) as isize - p;
                                if x >= 0 && x < self.width as isize {
                                    f(base + j, img_row + x as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `(B, C, H, W)` to `(C * k * k, B * OH * OW)`; out-of-image taps are zero.
struct Unfold(PatchGeometry);

/// Adjoint of [`Unfold`]: sums every column entry back into its pixel.
struct Fold(PatchGeometry);

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("patch ops need contiguous input"),
    }
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold-patches"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out_shape = g.cols_shape();
        let n = out_shape.elem_count();
        let storage = match storage {
            CpuStorage::F32(v) => {
                let src = contiguous(v, layout)?;
                let mut dst = vec![0f32; n];
                g.for_each_tap(|d, s| dst[d] = src[s]);
                CpuStorage::F32(dst)
            }
            CpuStorage::F64(v) => {
                let src = contiguous(v, layout)?;
                let mut dst = vec![0f64; n];
                g.for_each_tap(|d, s| dst[d] = src[s]);
                CpuStorage::F64(dst)
            }
            _ => candle_core::bail!("unfold: only f32 and f64 are supported"),
        };
        Ok((storage, out_shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Fold(self.0))?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold-patches"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out_shape = g.image_shape();
        let n = out_shape.elem_count();
        let storage = match storage {
            CpuStorage::F32(v) => {
                let src = contiguous(v, layout)?;
                let mut dst = vec![0f32; n];
                g.for_each_tap(|c, i| dst[i] += src[c]);
                CpuStorage::F32(dst)
            }
            CpuStorage::F64(v) => {
                let src = contiguous(v, layout)?;
                let mut dst = vec![0f64; n];
                g.for_each_tap(|c, i| dst[i] += src[c]);
                CpuStorage::F64(dst)
            }
            _ => candle_core::bail!("fold: only f32 and f64 are supported"),
        };
        Ok((storage, out_shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Unfold(self.0))?))
    }
}

/// Unfolds `x (B, C, H, W)` into `(C * k * k, B * OH * OW)` patch columns,
/// rows ordered channel-major then kernel row then kernel column.
pub fn unfold_patches(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<(Tensor, PatchGeometry)> {
    let (batch, channels, height, width) = x.dims4()?;
    let g = PatchGeometry {
        batch,
        channels,
        height,
        width,
        kernel,
        stride,
        padding,
    };
    Ok((x.contiguous()?.apply_op1(Unfold(g))?, g))
}
