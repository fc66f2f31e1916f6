//! Convolution and pooling over `(batch, channels, height, width)` tensors.
//!
//! Convolution is cross-correlation lowered per example to a GEMM over an
//! im2col buffer. Kernel gradients are accumulated example by example in
//! batch order, so results are bit-reproducible.

use super::gemm::{gemm, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (batch, in_ch, h, w) = dims4(input)?;
        let (out_ch, k_in, kh, kw) = dims4(kernel)?;
        if k_in != in_ch {
            return Err(Error::ChannelMismatch {
                op: "conv2d",
                input: in_ch,
                kernel: k_in,
            });
        }
        if stride == 0 {
            return Err(Error::InvalidShape {
                shape: kernel.to_vec(),
                reason: "stride must be >= 1".into(),
            });
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::OutputTooSmall { op: "conv2d" });
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            batch,
            in_ch,
            h,
            w,
            out_ch,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn in_size(&self) -> usize {
        self.in_ch * self.h * self.w
    }

    /// 1x1, stride 1, no padding: the input plane already is the im2col matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn dims4(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        &[a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "expected rank 4".into(),
        }),
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `(B, C, H, W)` input with `(K, C, kh, kw)` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, pad)?;
    let plane = g.out_plane();
    let mut out = vec![0.0; g.batch * g.out_ch * plane];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.patch() * plane]
    };
    let kmat = MatRef::row_major(kernel.data(), g.out_ch, g.patch());
    for b in 0..g.batch {
        let x = &input.data()[b * g.in_size()..(b + 1) * g.in_size()];
        let cols = if g.is_pointwise() {
            x
        } else {
            im2col(x, &g, &mut col);
            &col
        };
        gemm(
            1.0,
            kmat,
            MatRef::row_major(cols, g.patch(), plane),
            0.0,
            &mut out[b * g.out_ch * plane..(b + 1) * g.out_ch * plane],
        );
    }
    Tensor::new(&[g.batch, g.out_ch, g.oh, g.ow], out)
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_backward_input(
    grad_out: &Tensor,
    input_shape: &[usize],
    kernel: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(input_shape, kernel.shape(), stride, pad)?;
    let plane = g.out_plane();
    let mut dx = vec![0.0; g.batch * g.in_size()];
    let mut dcol = vec![0.0; g.patch() * plane];
    let kt = MatRef::row_major(kernel.data(), g.out_ch, g.patch()).t();
    for b in 0..g.batch {
        let go = &grad_out.data()[b * g.out_ch * plane..(b + 1) * g.out_ch * plane];
        let dxb = &mut dx[b * g.in_size()..(b + 1) * g.in_size()];
        if g.is_pointwise() {
            gemm(1.0, kt, MatRef::row_major(go, g.out_ch, plane), 0.0, dxb);
        } else {
            gemm(
                1.0,
                kt,
                MatRef::row_major(go, g.out_ch, plane),
                0.0,
                &mut dcol,
            );
            col2im_add(&dcol, &g, dxb);
        }
    }
    Tensor::new(input_shape, dx)
}

/// Gradient of `conv2d` with respect to its kernel.
pub fn conv2d_backward_kernel(
    grad_out: &Tensor,
    input: &Tensor,
    kernel_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernel_shape, stride, pad)?;
    let plane = g.out_plane();
    let mut dk = vec![0.0; g.out_ch * g.patch()];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.patch() * plane]
    };
    for b in 0..g.batch {
        let x = &input.data()[b * g.in_size()..(b + 1) * g.in_size()];
        let cols = if g.is_pointwise() {
            x
        } else {
            im2col(x, &g, &mut col);
            &col
        };
        let go = &grad_out.data()[b * g.out_ch * plane..(b + 1) * g.out_ch * plane];
        gemm(
            1.0,
            MatRef::row_major(go, g.out_ch, plane),
            MatRef::row_major(cols, g.patch(), plane).t(),
            1.0,
            &mut dk,
        );
    }
    Tensor::new(kernel_shape, dk)
}

fn pool_geom(
    shape: &[usize],
    k: usize,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (b, c, h, w) = dims4(shape)?;
    if k == 0 || stride == 0 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "pool window and stride must be >= 1".into(),
        });
    }
    if k > h || k > w {
        return Err(Error::WindowExceedsInput {
            op: "avg_pool2d",
            window: k,
            extent: h.min(w),
        });
    }
    Ok((b, c, h, w, (h - k) / stride + 1, (w - k) / stride + 1))
}

/// Mean over each `k x k` window.
pub fn avg_pool2d(input: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let (b, c, h, w, oh, ow) = pool_geom(input.shape(), k, stride)?;
    let norm = 1.0 / (k * k) as f64;
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for bc in 0..b * c {
        let src = &x[bc * h * w..(bc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for i in 0..k {
                    let row = &src[(oy * stride + i) * w + ox * stride..][..k];
                    acc += row.iter().sum::<f64>();
                }
                out.push(acc * norm);
            }
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}

pub fn avg_pool2d_backward(
    grad_out: &Tensor,
    input_shape: &[usize],
    k: usize,
    stride: usize,
) -> Result<Tensor> {
    let (b, c, h, w, oh, ow) = pool_geom(input_shape, k, stride)?;
    if grad_out.shape() != [b, c, oh, ow] {
        return Err(Error::ShapeMismatch {
            op: "avg_pool2d_backward",
            left: grad_out.shape().to_vec(),
            right: vec![b, c, oh, ow],
        });
    }
    let norm = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; b * c * h * w];
    let go = grad_out.data();
    for bc in 0..b * c {
        let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = go[(bc * oh + oy) * ow + ox] * norm;
                for i in 0..k {
                    for d in &mut dst[(oy * stride + i) * w + ox * stride..][..k] {
                        *d += v;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape, dx)
}

/// `(B, C, H, W) -> (B, C)` spatial mean.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    let plane = h * w;
    let out = input
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::new(&[b, c], out)
}

pub fn global_avg_pool_backward(grad_out: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let (b, c, h, w) = dims4(input_shape)?;
    if grad_out.shape() != [b, c] {
        return Err(Error::ShapeMismatch {
            op: "global_avg_pool_backward",
            left: grad_out.shape().to_vec(),
            right: vec![b, c],
        });
    }
    let plane = h * w;
    let mut dx = Vec::with_capacity(b * c * plane);
    for &g in grad_out.data() {
        dx.extend(std::iter::repeat_n(g / plane as f64, plane));
    }
    Tensor::new(input_shape, dx)
}

/// Zero padding of `pad` pixels on every spatial side.
pub fn pad2d(input: &Tensor, pad: usize) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; b * c * ph * pw];
    for bc in 0..b * c {
        for y in 0..h {
            let src = &input.data()[(bc * h + y) * w..][..w];
            out[(bc * ph + y + pad) * pw + pad..][..w].copy_from_slice(src);
        }
    }
    Tensor::new(&[b, c, ph, pw], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp16() -> Tensor {
        Tensor::new(&[1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap()
    }

    /// Direct six-loop cross-correlation, kept separate from the GEMM path.
    fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (b, c, h, w) = x.dims4().unwrap();
        let (ko, _, kh, kw) = k.dims4().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[b, ko, oh, ow]);
        for n in 0..b {
            for o in 0..ko {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * stride + i) as isize - pad as isize;
                                    let ix = (ox * stride + j) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                                    {
                                        acc += x.data()
                                            [((n * c + ci) * h + iy as usize) * w + ix as usize]
                                            * k.data()[((o * c + ci) * kh + i) * kw + j];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((n * ko + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_sum_of_ones() {
        let out = conv2d(
            &Tensor::ones(&[1, 1, 3, 3]),
            &Tensor::ones(&[1, 1, 3, 3]),
            1,
            0,
        )
        .unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn conv_channel_selection() {
        let x = Tensor::new(&[1, 3, 2, 2], (0..12).map(f64::from).collect()).unwrap();
        let k = Tensor::new(&[1, 3, 1, 1], vec![0.0, 1.0, 0.0]).unwrap();
        let out = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(out.data(), &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn conv_strided_diagonal_kernel() {
        let k = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = conv2d(&ramp16(), &k, 2, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[5.0, 9.0, 21.0, 25.0]);
    }

    #[test]
    fn conv_single_channel_ones_1x1_is_identity() {
        let x = Tensor::new(
            &[2, 1, 3, 3],
            (0..18).map(|v| v as f64 * 0.5 - 3.0).collect(),
        )
        .unwrap();
        assert_eq!(conv2d(&x, &Tensor::ones(&[1, 1, 1, 1]), 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(matches!(
            conv2d(&x, &Tensor::zeros(&[1, 3, 1, 1]), 1, 0),
            Err(Error::ChannelMismatch { .. })
        ));
        assert!(matches!(
            conv2d(&x, &Tensor::zeros(&[1, 2, 5, 5]), 1, 0),
            Err(Error::OutputTooSmall { .. })
        ));
    }

    #[test]
    fn conv_matches_naive_with_padding_and_stride() {
        let x = Tensor::new(
            &[2, 3, 5, 4],
            (0..120).map(|v| ((v * 37) % 11) as f64 - 5.0).collect(),
        )
        .unwrap();
        let k = Tensor::new(
            &[4, 3, 3, 3],
            (0..108).map(|v| ((v * 13) % 7) as f64 - 3.0).collect(),
        )
        .unwrap();
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 2)] {
            assert_eq!(
                conv2d(&x, &k, stride, pad).unwrap(),
                naive_conv(&x, &k, stride, pad)
            );
        }
    }

    #[test]
    fn avg_pool_examples() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool2d(&x, 2, 2).unwrap().data(), &[2.5]);

        let c = Tensor::full(&[2, 3, 4, 4], 1.75);
        let pooled = avg_pool2d(&c, 2, 2).unwrap();
        assert_eq!(pooled.shape(), &[2, 3, 2, 2]);
        assert!(pooled.data().iter().all(|&v| v == 1.75));

        assert_eq!(
            avg_pool2d(&ramp16(), 2, 2).unwrap().data(),
            &[2.5, 4.5, 10.5, 12.5]
        );
        assert!(matches!(
            avg_pool2d(&x, 3, 1),
            Err(Error::WindowExceedsInput { .. })
        ));
    }

    #[test]
    fn global_pool_examples() {
        assert_eq!(
            global_avg_pool(&Tensor::full(&[1, 2, 3, 3], 4.0))
                .unwrap()
                .data(),
            &[4.0, 4.0]
        );
        let mut one_hot = Tensor::zeros(&[1, 1, 4, 4]);
        one_hot.data_mut()[5] = 1.0;
        assert_eq!(global_avg_pool(&one_hot).unwrap().data(), &[1.0 / 16.0]);
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
    }

    #[test]
    fn pad_adds_zero_border() {
        let x = Tensor::ones(&[1, 1, 2, 2]);
        let p = pad2d(&x, 1).unwrap();
        assert_eq!(p.shape(), &[1, 1, 4, 4]);
        assert_eq!(p.sum(), 4.0);
        assert_eq!(p.data()[0], 0.0);
        assert_eq!(p.data()[5], 1.0);
    }

    proptest! {
        #[test]
        fn conv_shape_is_pure_function_of_shapes(
            b in 1usize..3, c in 1usize..4, h in 3usize..8, w in 3usize..8,
            k in 1usize..4, ks in 1usize..4, stride in 1usize..3, pad in 0usize..2,
        ) {
            let x = Tensor::ones(&[b, c, h, w]);
            let kern = Tensor::ones(&[k, c, ks, ks]);
            let out = conv2d(&x, &kern, stride, pad).unwrap();
            prop_assert_eq!(
                out.shape().to_vec(),
                vec![b, k, (h + 2 * pad - ks) / stride + 1, (w + 2 * pad - ks) / stride + 1]
            );
            let pooled = avg_pool2d(&x, 2, 2).unwrap();
            prop_assert_eq!(
                pooled.shape().to_vec(), vec![b, c, (h - 2) / 2 + 1, (w - 2) / 2 + 1]);
            prop_assert_eq!(
                global_avg_pool(&x).unwrap().shape().to_vec(), vec![b, c]);
            prop_assert_eq!(
                pad2d(&x, pad).unwrap().shape().to_vec(), vec![b, c, h + 2 * pad, w + 2 * pad]);
        }
    }
}
