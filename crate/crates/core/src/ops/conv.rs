use crate::error::{Result, TensorError};
use crate::ops::linalg::{gemm, Layout};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Position in the input for output `(oy, ox)` and kernel tap `(ky, kx)`,
    /// or `None` when it lands in the zero padding.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            None
        } else {
            Some(iy as usize * self.w + ix as usize)
        }
    }
}

fn im2col<T: Real>(x: &[T], g: &Geometry) -> Vec<T> {
    let mut cols = vec![T::zero(); g.k() * g.p()];
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * g.p()..(row + 1) * g.p()];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        if let Some(i) = g.src(oy, ox, ky, kx) {
                            dst[oy * g.wo + ox] = plane[i];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &Geometry) -> Vec<T> {
    let mut x = vec![T::zero(); g.cin * g.h * g.w];
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * g.p()..(row + 1) * g.p()];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        if let Some(i) = g.src(oy, ox, ky, kx) {
                            plane[i] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2-D cross-correlation of a `[C_in, H, W]` input with `[C_out, C_in, kH, kW]` weights.
///
/// Kernels must have odd extents and the output size must be integral.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let (&[cin, h, wd], &[cout, cin2, kh, kw]) = (x.shape(), w.shape()) else {
        return Err(TensorError::dim("conv2d", "expected [C,H,W] input and [O,C,kH,kW] weight", x.shape(), w.shape()));
    };
    if cin != cin2 {
        return Err(TensorError::dim("conv2d", "input channels disagree", x.shape(), w.shape()));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(TensorError::dim("conv2d", "kernel extents must be odd", x.shape(), w.shape()));
    }
    if stride == 0 {
        return Err(TensorError::dim("conv2d", "stride must be positive", x.shape(), w.shape()));
    }
    let span_h = (h + 2 * padding).checked_sub(kh);
    let span_w = (wd + 2 * padding).checked_sub(kw);
    let (Some(span_h), Some(span_w)) = (span_h, span_w) else {
        return Err(TensorError::dim("conv2d", "kernel larger than padded input", x.shape(), w.shape()));
    };
    if span_h % stride != 0 || span_w % stride != 0 {
        return Err(TensorError::dim(
            "conv2d",
            format!("non-integral output size for stride {stride}, padding {padding}"),
            x.shape(),
            w.shape(),
        ));
    }
    let g = Geometry {
        cin,
        h,
        w: wd,
        kh,
        kw,
        stride,
        pad: padding,
        ho: span_h / stride + 1,
        wo: span_w / stride + 1,
    };
    let cols = im2col(&x.data(), &g);
    let mut out = vec![T::zero(); cout * g.p()];
    gemm(cout, g.k(), g.p(), &w.data(), Layout::Normal, &cols, Layout::Normal, &mut out, false);
    let need_w = w.requires_grad();
    let saved_cols = need_w.then_some(cols);
    Tensor::from_op(
        "conv2d",
        vec![cout, g.ho, g.wo],
        out,
        vec![x.clone(), w.clone()],
        Box::new(move |grad, p| {
            let gx = p[0].requires_grad().then(|| {
                let mut gcols = vec![T::zero(); g.k() * g.p()];
                gemm(g.k(), cout, g.p(), &p[1].data(), Layout::Transposed, grad, Layout::Normal, &mut gcols, false);
                col2im(&gcols, &g)
            });
            let gw = match (&saved_cols, p[1].requires_grad()) {
                (Some(cols), true) => {
                    let mut gw = vec![T::zero(); cout * g.k()];
                    gemm(cout, g.p(), g.k(), grad, Layout::Normal, cols, Layout::Transposed, &mut gw, false);
                    Some(gw)
                }
                _ => None,
            };
            vec![gx, gw]
        }),
    )
}

impl<T: Real> Tensor<T> {
    pub fn conv2d(&self, w: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
        conv2d(self, w, stride, padding)
    }

    /// Nearest-neighbour 2x upsampling of a `[C, H, W]` tensor.
    pub fn upsample2x(&self) -> Result<Tensor<T>> {
        let &[c, h, w] = self.shape() else {
            return Err(TensorError::dim("upsample2x", "expected [C,H,W]", self.shape(), &[]));
        };
        let (h2, w2) = (2 * h, 2 * w);
        let x = self.data();
        let mut out = vec![T::zero(); c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(ch * h2 + y) * w2 + xx] = x[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        drop(x);
        Tensor::from_op(
            "upsample2x",
            vec![c, h2, w2],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            gx[(ch * h + y / 2) * w + xx / 2] += g[(ch * h2 + y) * w2 + xx];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// 2x2 average pooling of a `[C, H, W]` tensor with even `H`, `W`.
    pub fn avg_pool2x(&self) -> Result<Tensor<T>> {
        let &[c, h, w] = self.shape() else {
            return Err(TensorError::dim("avg_pool2x", "expected [C,H,W]", self.shape(), &[]));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::dim("avg_pool2x", "spatial dims must be even", self.shape(), &[]));
        }
        let (h2, w2) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let x = self.data();
        let mut out = vec![T::zero(); c * h2 * w2];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[(ch * h2 + y / 2) * w2 + xx / 2] += x[(ch * h + y) * w + xx] * quarter;
                }
            }
        }
        drop(x);
        Tensor::from_op(
            "avg_pool2x",
            vec![c, h2, w2],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[(ch * h + y) * w + xx] = g[(ch * h2 + y / 2) * w2 + xx / 2] * quarter;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::<f32>::new(vec![1, 3, 3], (0..9).map(|v| v as f32).collect()).unwrap();
        let k = Tensor::<f32>::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn box_sum_counts_neighbours() {
        let x = Tensor::<f32>::full(vec![1, 4, 4], 1.0);
        let k = Tensor::<f32>::full(vec![1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 1, 1).unwrap().to_vec();
        assert_eq!(y[0], 4.0);
        assert_eq!(y[5], 9.0);
        assert_eq!(y[1], 6.0);
    }

    #[test]
    fn non_integral_output_rejected() {
        let x = Tensor::<f32>::zeros(vec![1, 4, 4]);
        let k = Tensor::<f32>::zeros(vec![1, 1, 3, 3]);
        assert!(matches!(conv2d(&x, &k, 2, 1), Err(TensorError::Dimension { .. })));
        let even = Tensor::<f32>::zeros(vec![1, 1, 2, 2]);
        assert!(conv2d(&x, &even, 1, 0).is_err());
    }

    #[test]
    fn pool_then_upsample_shapes() {
        let x = Tensor::<f32>::full(vec![2, 4, 6], 3.0);
        let p = x.avg_pool2x().unwrap();
        assert_eq!(p.shape(), &[2, 2, 3]);
        assert!(p.to_vec().iter().all(|&v| v == 3.0));
        assert_eq!(p.upsample2x().unwrap().shape(), &[2, 4, 6]);
    }
}
