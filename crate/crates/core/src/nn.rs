//! Convolution and resampling primitives.
//!
//! Each output element is reduced in a fixed order (input channel outer,
//! kernel row, kernel column inner; frames outermost for 3D), and parallelism
//! is only ever spread across output channels. Results are therefore
//! bit-identical regardless of the rayon pool size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// 2D convolution parameters. Kernel layout `[out_ch, in_ch, kh, kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dWeights<T = f32> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub dilation: usize,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2dWeights<T> {
    pub fn new(
        kernel: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self> {
        if kernel.rank() != 4 {
            return shape_err(format!(
                "conv2d kernel must be rank 4, got {:?}",
                kernel.dims()
            ));
        }
        let (kh, kw) = (kernel.dims()[2], kernel.dims()[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return shape_err(format!("conv2d kernel {kh}x{kw} must have odd sides"));
        }
        if bias.dims() != [kernel.dims()[0]] {
            return shape_err(format!(
                "bias {:?} does not match {} output channels",
                bias.dims(),
                kernel.dims()[0]
            ));
        }
        if dilation == 0 || stride == 0 {
            return Err(Error::Invalid("stride and dilation must be >= 1".into()));
        }
        Ok(Self {
            kernel,
            bias,
            dilation,
            stride,
            padding,
        })
    }

    /// Stride 1 with padding that preserves spatial size.
    pub fn same(kernel: Tensor<T>, bias: Tensor<T>, dilation: usize) -> Result<Self> {
        let kh = kernel.dims().get(2).copied().unwrap_or(1);
        let pad = (kh.saturating_sub(1) / 2) * dilation.max(1);
        Self::new(kernel, bias, 1, pad, dilation)
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.dims()[1]
    }

    pub fn kernel_hw(&self) -> (usize, usize) {
        (self.kernel.dims()[2], self.kernel.dims()[3])
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel_hw();
        let side = |n: usize, k: usize| -> Result<usize> {
            let reach = self.dilation * (k - 1) + 1;
            let padded = n + 2 * self.padding;
            if padded < reach {
                return shape_err(format!(
                    "input extent {n} (+2*{}) is smaller than kernel reach {reach}",
                    self.padding
                ));
            }
            Ok((padded - reach) / self.stride + 1)
        };
        Ok((side(h, kh)?, side(w, kw)?))
    }
}

/// 3D convolution over a 3-frame window. Kernel layout `[out_ch, in_ch, 3, kh, kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3dWeights<T = f32> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv3dWeights<T> {
    pub fn new(kernel: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let d = kernel.dims();
        if d.len() != 5 {
            return shape_err(format!("conv3d kernel must be rank 5, got {d:?}"));
        }
        if d[2] != 3 {
            return shape_err(format!("conv3d temporal extent must be 3, got {}", d[2]));
        }
        if d[3].is_multiple_of(2) || d[4].is_multiple_of(2) {
            return shape_err(format!(
                "conv3d spatial kernel {}x{} must have odd sides",
                d[3], d[4]
            ));
        }
        if bias.dims() != [d[0]] {
            return shape_err(format!(
                "bias {:?} does not match {} output channels",
                bias.dims(),
                d[0]
            ));
        }
        Ok(Self { kernel, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.dims()[1]
    }

    pub fn kernel_hw(&self) -> (usize, usize) {
        (self.kernel.dims()[3], self.kernel.dims()[4])
    }
}

/// Geometry of a single-plane correlation.
#[derive(Clone, Copy)]
pub(crate) struct PlaneGeom {
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
}

/// `out += kernel ⋆ input` for one input plane, iterating kernel row, then column.
pub(crate) fn accumulate_plane<T: Scalar>(out: &mut [T], input: &[T], kernel: &[T], g: PlaneGeom) {
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let wv = kernel[ky * g.kw + kx];
            let off_y = (ky * g.dil) as isize - g.pad as isize;
            let off_x = (kx * g.dil) as isize - g.pad as isize;
            for oy in 0..g.oh {
                let iy = (oy * g.stride) as isize + off_y;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let row_in = &input[iy as usize * g.w..(iy as usize + 1) * g.w];
                let row_out = &mut out[oy * g.ow..(oy + 1) * g.ow];
                if g.stride == 1 {
                    let lo = (-off_x).max(0) as usize;
                    let hi = (g.w as isize - off_x).clamp(0, g.ow as isize) as usize;
                    if lo >= hi {
                        continue;
                    }
                    let src =
                        &row_in[(lo as isize + off_x) as usize..(hi as isize + off_x) as usize];
                    for (o, &x) in row_out[lo..hi].iter_mut().zip(src) {
                        *o = *o + wv * x;
                    }
                } else {
                    for (ox, o) in row_out.iter_mut().enumerate() {
                        let ix = (ox * g.stride) as isize + off_x;
                        if ix >= 0 && ix < g.w as isize {
                            *o = *o + wv * row_in[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x: [C, H, W]` with zero spatial padding.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Conv2dWeights<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return shape_err(format!("conv2d input must be [C,H,W], got {:?}", x.dims()));
    }
    let (c, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    if c != w.in_channels() {
        return shape_err(format!(
            "conv2d channel mismatch: input has {c}, kernel expects {}",
            w.in_channels()
        ));
    }
    let (oh, ow) = w.output_hw(h, wd)?;
    let (kh, kw) = w.kernel_hw();
    let geom = PlaneGeom {
        h,
        w: wd,
        oh,
        ow,
        kh,
        kw,
        stride: w.stride,
        pad: w.padding,
        dil: w.dilation,
    };
    let o_ch = w.out_channels();
    let plane = h * wd;
    let kplane = kh * kw;
    let mut out = vec![T::zero(); o_ch * oh * ow];
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(o, dst)| {
            for ci in 0..c {
                let kernel = &w.kernel.data()[(o * c + ci) * kplane..(o * c + ci + 1) * kplane];
                accumulate_plane(dst, &x.data()[ci * plane..(ci + 1) * plane], kernel, geom);
            }
            let b = w.bias.data()[o];
            for v in dst.iter_mut() {
                *v = *v + b;
            }
        });
    Tensor::new(vec![o_ch, oh, ow], out)
}

/// 3D convolution of a 3-frame window given as raw `[C, H, W]` planes.
///
/// Frames are reduced outermost, then channels, then kernel rows/columns.
/// Spatial size is preserved (stride 1, same padding).
pub(crate) fn conv3d_window_raw<T: Scalar>(
    frames: [&[T]; 3],
    c: usize,
    h: usize,
    wd: usize,
    w: &Conv3dWeights<T>,
) -> Vec<T> {
    let (kh, kw) = w.kernel_hw();
    let geom = PlaneGeom {
        h,
        w: wd,
        oh: h,
        ow: wd,
        kh,
        kw,
        stride: 1,
        pad: (kh - 1) / 2,
        dil: 1,
    };
    debug_assert_eq!(kh, kw, "conv3d kernels are square");
    let o_ch = w.out_channels();
    let plane = h * wd;
    let kplane = kh * kw;
    let kdata = w.kernel.data();
    let mut out = vec![T::zero(); o_ch * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(o, dst)| {
        for (t, frame) in frames.iter().enumerate() {
            for ci in 0..c {
                let k0 = ((o * c + ci) * 3 + t) * kplane;
                accumulate_plane(
                    dst,
                    &frame[ci * plane..(ci + 1) * plane],
                    &kdata[k0..k0 + kplane],
                    geom,
                );
            }
        }
        let b = w.bias.data()[o];
        for v in dst.iter_mut() {
            *v = *v + b;
        }
    });
    out
}

/// `Σ_t Σ_c kernel[:, c, t] ⋆ frames[t][c] + bias` over a window of three frames.
pub fn conv3d_window<T: Scalar>(
    frames: [&Tensor<T>; 3],
    w: &Conv3dWeights<T>,
) -> Result<Tensor<T>> {
    let dims = frames[0].dims();
    if dims.len() != 3 {
        return shape_err(format!("conv3d frames must be [C,H,W], got {dims:?}"));
    }
    if frames.iter().any(|f| f.dims() != dims) {
        return shape_err("conv3d window frames disagree on shape");
    }
    if dims[0] != w.in_channels() {
        return shape_err(format!(
            "conv3d channel mismatch: frames have {}, kernel expects {}",
            dims[0],
            w.in_channels()
        ));
    }
    let (kh, kw) = w.kernel_hw();
    if kh != kw {
        return shape_err(format!(
            "conv3d spatial kernel must be square, got {kh}x{kw}"
        ));
    }
    let out = conv3d_window_raw(
        [frames[0].data(), frames[1].data(), frames[2].data()],
        dims[0],
        dims[1],
        dims[2],
        w,
    );
    Tensor::new(vec![w.out_channels(), dims[1], dims[2]], out)
}

/// 2x2 non-overlapping max pooling.
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return shape_err(format!(
            "maxpool2 input must be [C,H,W], got {:?}",
            x.dims()
        ));
    }
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("maxpool2 needs even spatial size, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let p = &src[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            let r0 = &p[2 * oy * w..(2 * oy + 1) * w];
            let r1 = &p[(2 * oy + 1) * w..(2 * oy + 2) * w];
            for ox in 0..ow {
                let m = r0[2 * ox]
                    .max(r0[2 * ox + 1])
                    .max(r1[2 * ox].max(r1[2 * ox + 1]));
                out.push(m);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Interpolation used when growing feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    #[default]
    Bilinear,
    Nearest,
}

/// Half-pixel source coordinate, clamped to the valid range.
#[inline]
pub(crate) fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    let s = (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
    s.clamp(0.0, (src - 1) as f64)
}

fn interp_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let s = source_coord(i, src, dst);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling in either direction (align-corners false, no antialiasing).
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return shape_err(format!("resize input must be [C,H,W], got {:?}", x.dims()));
    }
    if out_h == 0 || out_w == 0 {
        return shape_err("resize target must be non-empty");
    }
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let ys = interp_table(h, out_h);
    let xs = interp_table(w, out_w);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ci in 0..c {
        let p = &x.data()[ci * h * w..(ci + 1) * h * w];
        for &(y0, y1, ly) in &ys {
            let ly = T::lit(ly);
            for &(x0, x1, lx) in &xs {
                let lx = T::lit(lx);
                let top = p[y0 * w + x0] * (T::one() - lx) + p[y0 * w + x1] * lx;
                let bot = p[y1 * w + x0] * (T::one() - lx) + p[y1 * w + x1] * lx;
                out.push(top * (T::one() - ly) + bot * ly);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

fn check_upscale(x: &Tensor<impl Scalar>, out_h: usize, out_w: usize) -> Result<()> {
    if x.rank() != 3 {
        return shape_err(format!(
            "upsample input must be [C,H,W], got {:?}",
            x.dims()
        ));
    }
    if out_h < x.dims()[1] || out_w < x.dims()[2] {
        return shape_err(format!(
            "upsample cannot shrink {}x{} to {out_h}x{out_w}",
            x.dims()[1],
            x.dims()[2]
        ));
    }
    Ok(())
}

/// Bilinear upsampling; rejects any shrinking axis.
pub fn upsample_bilinear<T: Scalar>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    check_upscale(x, out_h, out_w)?;
    resize_bilinear(x, out_h, out_w)
}

/// Nearest-neighbour upsampling (`src = floor(i * H / out_h)`).
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    check_upscale(x, out_h, out_w)?;
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ci in 0..c {
        let p = &x.data()[ci * h * w..(ci + 1) * h * w];
        for oy in 0..out_h {
            let sy = oy * h / out_h;
            for ox in 0..out_w {
                out.push(p[sy * w + ox * w / out_w]);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

pub fn upsample<T: Scalar>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    mode: UpsampleMode,
) -> Result<Tensor<T>> {
    match mode {
        UpsampleMode::Bilinear => upsample_bilinear(x, out_h, out_w),
        UpsampleMode::Nearest => upsample_nearest(x, out_h, out_w),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use crate::rng::SeededRng;
    use crate::tensor::max_rel_err;

    fn conv2(
        o: usize,
        c: usize,
        k: usize,
        pad: usize,
        dil: usize,
        rng: &mut SeededRng,
    ) -> Conv2dWeights {
        Conv2dWeights::new(
            rng.uniform_tensor(&[o, c, k, k], 1.0),
            rng.uniform_tensor(&[o], 1.0),
            1,
            pad,
            dil,
        )
        .unwrap()
    }

    #[test]
    fn identity_1x1_kernel() {
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f32).unwrap();
        let w = Conv2dWeights::new(
            Tensor::full(&[1, 1, 1, 1], 1.0).unwrap(),
            Tensor::zeros(&[1]).unwrap(),
            1,
            0,
            1,
        )
        .unwrap();
        assert_eq!(conv2d(&x, &w).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_constant_input() {
        let x = Tensor::full(&[1, 5, 5], 2.0f32).unwrap();
        let w = Conv2dWeights::same(
            Tensor::full(&[1, 1, 3, 3], 1.0).unwrap(),
            Tensor::zeros(&[1]).unwrap(),
            1,
        )
        .unwrap();
        let y = conv2d(&x, &w).unwrap();
        for r in 1..4 {
            for c in 1..4 {
                assert_eq!(y.data()[r * 5 + c], 18.0);
            }
        }
        assert_eq!(y.data()[0], 8.0);
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        let mut rng = SeededRng::new(11);
        let x = rng.uniform_tensor(&[2, 5, 5], 1.0);
        let w = conv2(3, 2, 3, 1, 1, &mut rng);
        let y = conv2d(&x, &w).unwrap();
        let r = reference::conv2d_loops(&x, &w);
        assert!(max_rel_err(y.data(), r.data()) <= 1e-6);
    }

    #[test]
    fn conv2d_oracle_sweep_including_stride_and_dilation() {
        let mut rng = SeededRng::new(12);
        for c in 1..=4 {
            for hw in [1usize, 3, 5, 8] {
                for (k, pad, dil, stride) in [
                    (1, 0, 1, 1),
                    (3, 1, 1, 1),
                    (3, 2, 2, 1),
                    (3, 1, 1, 2),
                    (5, 0, 1, 1),
                ] {
                    let x = rng.uniform_tensor(&[c, hw, hw], 1.0);
                    let mut w = conv2(2, c, k, pad, dil, &mut rng);
                    w.stride = stride;
                    match w.output_hw(hw, hw) {
                        Ok(_) => {
                            let y = conv2d(&x, &w).unwrap();
                            let r = reference::conv2d_loops(&x, &w);
                            assert_eq!(y.dims(), r.dims());
                            assert!(
                                max_rel_err(y.data(), r.data()) <= 1e-6,
                                "c={c} hw={hw} k={k}"
                            );
                        }
                        Err(_) => assert!(conv2d(&x, &w).is_err()),
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_errors() {
        let mut rng = SeededRng::new(3);
        let w = conv2(2, 3, 3, 0, 1, &mut rng);
        assert!(conv2d(&Tensor::zeros(&[2, 5, 5]).unwrap(), &w).is_err());
        assert!(conv2d(&Tensor::zeros(&[3, 2, 2]).unwrap(), &w).is_err());
        assert!(Conv2dWeights::<f32>::new(
            Tensor::zeros(&[1, 1, 2, 2]).unwrap(),
            Tensor::zeros(&[1]).unwrap(),
            1,
            0,
            1
        )
        .is_err());
    }

    #[test]
    fn conv3d_temporal_identity_returns_middle_frame() {
        let mut rng = SeededRng::new(5);
        let f: Vec<Tensor> = (0..3)
            .map(|_| rng.uniform_tensor(&[2, 4, 4], 1.0))
            .collect();
        let mut k = Tensor::zeros(&[2, 2, 3, 3, 3]).unwrap();
        for o in 0..2 {
            k.data_mut()[(((o * 2 + o) * 3 + 1) * 3 + 1) * 3 + 1] = 1.0;
        }
        let w = Conv3dWeights::new(k, Tensor::zeros(&[2]).unwrap()).unwrap();
        assert_eq!(conv3d_window([&f[0], &f[1], &f[2]], &w).unwrap(), f[1]);
    }

    #[test]
    fn conv3d_scalar_sum() {
        let f: Vec<Tensor> = (1..=3)
            .map(|v| Tensor::full(&[1, 1, 1], v as f32).unwrap())
            .collect();
        let w = Conv3dWeights::new(
            Tensor::full(&[1, 1, 3, 1, 1], 1.0).unwrap(),
            Tensor::zeros(&[1]).unwrap(),
        )
        .unwrap();
        let y = conv3d_window([&f[0], &f[1], &f[2]], &w).unwrap();
        assert_eq!(
            y.data(),
            reference::conv3d_loops([&f[0], &f[1], &f[2]], &w).data()
        );
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn conv3d_matches_loop_oracle_up_to_c4_h8() {
        let mut rng = SeededRng::new(21);
        for c in 1..=4 {
            for hw in 1..=8 {
                let f: Vec<Tensor> = (0..3)
                    .map(|_| rng.uniform_tensor(&[c, hw, hw], 1.0))
                    .collect();
                let w = Conv3dWeights::new(
                    rng.uniform_tensor(&[3, c, 3, 3, 3], 1.0),
                    rng.uniform_tensor(&[3], 1.0),
                )
                .unwrap();
                let y = conv3d_window([&f[0], &f[1], &f[2]], &w).unwrap();
                let r = reference::conv3d_loops([&f[0], &f[1], &f[2]], &w);
                assert!(max_rel_err(y.data(), r.data()) <= 1e-6);
            }
        }
    }

    #[test]
    fn conv3d_shape_errors() {
        let w = Conv3dWeights::new(
            Tensor::<f32>::zeros(&[1, 2, 3, 3, 3]).unwrap(),
            Tensor::zeros(&[1]).unwrap(),
        )
        .unwrap();
        let a = Tensor::zeros(&[2, 4, 4]).unwrap();
        let b = Tensor::zeros(&[2, 4, 5]).unwrap();
        assert!(conv3d_window([&a, &a, &b], &w).is_err());
        let c = Tensor::zeros(&[3, 4, 4]).unwrap();
        assert!(conv3d_window([&c, &c, &c], &w).is_err());
        assert!(Conv3dWeights::<f32>::new(
            Tensor::zeros(&[1, 2, 2, 3, 3]).unwrap(),
            Tensor::zeros(&[1]).unwrap()
        )
        .is_err());
    }

    #[test]
    fn convs_are_linear() {
        let mut rng = SeededRng::new(8);
        let mut w2 = conv2(3, 2, 3, 1, 1, &mut rng);
        w2.bias = Tensor::zeros(&[3]).unwrap();
        let w3 = Conv3dWeights::new(
            rng.uniform_tensor(&[2, 2, 3, 3, 3], 1.0),
            Tensor::zeros(&[2]).unwrap(),
        )
        .unwrap();
        let (alpha, beta) = (0.7f32, -1.3f32);
        let x = rng.uniform_tensor(&[2, 6, 6], 1.0);
        let y = rng.uniform_tensor(&[2, 6, 6], 1.0);
        let mix = x.scale(alpha).add(&y.scale(beta)).unwrap();
        let lhs = conv2d(&mix, &w2).unwrap();
        let rhs = conv2d(&x, &w2)
            .unwrap()
            .scale(alpha)
            .add(&conv2d(&y, &w2).unwrap().scale(beta))
            .unwrap();
        assert!(max_rel_err(lhs.data(), rhs.data()) <= 1e-5);

        let x2 = rng.uniform_tensor(&[2, 6, 6], 1.0);
        let y2 = rng.uniform_tensor(&[2, 6, 6], 1.0);
        let mix2 = x2.scale(alpha).add(&y2.scale(beta)).unwrap();
        let lhs3 = conv3d_window([&mix, &mix2, &mix], &w3).unwrap();
        let fx = conv3d_window([&x, &x2, &x], &w3).unwrap();
        let fy = conv3d_window([&y, &y2, &y], &w3).unwrap();
        let rhs3 = fx.scale(alpha).add(&fy.scale(beta)).unwrap();
        assert!(max_rel_err(lhs3.data(), rhs3.data()) <= 1e-5);
    }

    #[test]
    fn maxpool_basics() {
        let x = Tensor::new(vec![1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(maxpool2(&x).unwrap().data(), &[4.0]);
        let c = Tensor::full(&[2, 4, 6], 3.5f32).unwrap();
        let p = maxpool2(&c).unwrap();
        assert_eq!(p.dims(), &[2, 2, 3]);
        assert!(p.data().iter().all(|&v| v == 3.5));
        assert!(maxpool2(&Tensor::<f32>::zeros(&[1, 3, 3]).unwrap()).is_err());
    }

    #[test]
    fn upsample_constants_and_singletons() {
        let c = Tensor::full(&[2, 3, 5], 0.25f32).unwrap();
        let u = upsample_bilinear(&c, 7, 11).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.25));
        let one = Tensor::full(&[1, 1, 1], 4.0f32).unwrap();
        assert!(upsample_bilinear(&one, 5, 3)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 4.0));
        assert!(upsample_bilinear(&c, 2, 5).is_err());
    }

    #[test]
    fn upsample_2x2_to_4x4_formula() {
        let x = Tensor::new(vec![1, 2, 2], vec![0.0f32, 1.0, 2.0, 3.0]).unwrap();
        let u = upsample_bilinear(&x, 4, 4).unwrap();
        let r = reference::bilinear_formula(&x, 4, 4);
        assert_eq!(u.data(), r.data());
        // half-pixel centres: row 0 is clamped to source row 0
        assert_eq!(&u.data()[0..4], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn upsample_respects_bounds() {
        let mut rng = SeededRng::new(4);
        let x = rng.uniform_tensor(&[3, 5, 4], 2.0);
        let (lo, hi) = x
            .data()
            .iter()
            .fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        for mode in [UpsampleMode::Bilinear, UpsampleMode::Nearest] {
            let u = upsample(&x, 13, 9, mode).unwrap();
            assert!(u.data().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
        }
    }

    #[test]
    fn nearest_doubles_pixels() {
        let x = Tensor::new(vec![1, 1, 2], vec![1.0f32, 2.0]).unwrap();
        assert_eq!(
            upsample_nearest(&x, 2, 4).unwrap().data(),
            &[1., 1., 2., 2., 1., 1., 2., 2.]
        );
    }
}
