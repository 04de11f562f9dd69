//! 2-D convolution through im2col and GEMM.

use crate::graph::Var;
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Source index of column entry `(row, col)`, or `None` inside the padding.
    #[inline]
    fn source(&self, c: usize, ki: usize, kj: usize, oy: usize, ox: usize) -> Option<usize> {
        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
        let ix = (ox * self.stride + kj) as isize - self.padding as isize;
        if iy < 0 || ix < 0 || iy >= self.height as isize || ix >= self.width as isize {
            None
        } else {
            Some((c * self.height + iy as usize) * self.width + ix as usize)
        }
    }

    fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let mut r = 0;
        for c in 0..self.channels {
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let row = &mut cols[r * oh * ow..(r + 1) * oh * ow];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            row[oy * ow + ox] = match self.source(c, ki, kj, oy, ox) {
                                Some(i) => image[i],
                                None => T::zero(),
                            };
                        }
                    }
                    r += 1;
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let mut r = 0;
        for c in 0..self.channels {
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let row = &cols[r * oh * ow..(r + 1) * oh * ow];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            if let Some(i) = self.source(c, ki, kj, oy, ox) {
                                image[i] += row[oy * ow + ox];
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// `input [B,C,H,W]`, `weight [O,C,K,K]`, `bias [O]` → `[B,O,H',W']`.
pub fn conv2d<'g, T: Scalar>(
    input: Var<'g, T>,
    weight: Var<'g, T>,
    bias: Var<'g, T>,
    stride: usize,
    padding: usize,
) -> Var<'g, T> {
    let x = input.value();
    let w = weight.value();
    let xs = x.shape().to_vec();
    let ws = w.shape().to_vec();
    assert_eq!(xs.len(), 4, "conv2d input must be [B,C,H,W], got {xs:?}");
    assert_eq!(ws.len(), 4, "conv2d weight must be [O,C,K,K], got {ws:?}");
    assert_eq!(xs[1], ws[1], "conv2d channel mismatch: input {xs:?} weight {ws:?}");
    assert_eq!(ws[2], ws[3], "conv2d expects square kernels");
    assert_eq!(bias.value().len(), ws[0], "conv2d bias length");
    let geo = ConvGeometry {
        channels: xs[1],
        height: xs[2],
        width: xs[3],
        kernel: ws[2],
        stride,
        padding,
    };
    assert!(xs[2] + 2 * padding >= ws[2] && xs[3] + 2 * padding >= ws[2], "conv2d kernel larger than input");
    let (batch, out_ch) = (xs[0], ws[0]);
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let plane = oh * ow;
    let patch = geo.patch_len();
    let in_len = geo.channels * geo.height * geo.width;

    let b = bias.value();
    let mut out = Tensor::zeros([batch, out_ch, oh, ow]);
    let mut cols = vec![T::zero(); patch * plane];
    for n in 0..batch {
        geo.im2col(&x.data()[n * in_len..(n + 1) * in_len], &mut cols);
        let dst = &mut out.data_mut()[n * out_ch * plane..(n + 1) * out_ch * plane];
        for (o, chunk) in dst.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b.data()[o]);
        }
        gemm(out_ch, patch, plane, w.data(), false, &cols, false, dst, true);
    }

    let (xi, wi, bi) = (input.id(), weight.id(), bias.id());
    input.graph().custom(&[input, weight, bias], out, move |_, g, vals, grads| {
        let x = vals[xi].clone();
        let w = vals[wi].clone();
        let mut cols = vec![T::zero(); patch * plane];
        let mut dcols = vec![T::zero(); patch * plane];
        for n in 0..batch {
            let gn = &g.data()[n * out_ch * plane..(n + 1) * out_ch * plane];
            if grads.wants(bi) {
                let slot = grads.slot(bi, vals);
                for (o, chunk) in gn.chunks(plane).enumerate() {
                    slot[o] += chunk.iter().copied().sum();
                }
            }
            if grads.wants(wi) {
                geo.im2col(&x.data()[n * in_len..(n + 1) * in_len], &mut cols);
                gemm(out_ch, plane, patch, gn, false, &cols, true, grads.slot(wi, vals), true);
            }
            if grads.wants(xi) {
                gemm(patch, out_ch, plane, w.data(), true, gn, false, &mut dcols, false);
                let slot = grads.slot(xi, vals);
                geo.col2im(&dcols, &mut slot[n * in_len..(n + 1) * in_len]);
            }
        }
    })
}
