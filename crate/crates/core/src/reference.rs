//! Naive reference implementations.
//!
//! These are deliberately plain loops with no shared code from the fast
//! paths. They serve as equivalence oracles in tests, in `selftest`, and as
//! the slow side of the benchmarks.

use crate::error::{shape_err, Result};
use crate::nn::{Conv2dWeights, Conv3dWeights};
use crate::temporal::{PaddingPolicy, TemporalBlock, TemporalConfig, TemporalModuleWeights};
use crate::tensor::{Scalar, Tensor};

/// Direct quadruple-loop 2D cross-correlation.
pub fn conv2d_loops<T: Scalar>(x: &Tensor<T>, w: &Conv2dWeights<T>) -> Tensor<T> {
    let (c, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let kd = w.kernel.dims();
    let (o_ch, kh, kw) = (kd[0], kd[2], kd[3]);
    let (s, p, d) = (w.stride as isize, w.padding as isize, w.dilation as isize);
    let oh = ((h as isize + 2 * p - d * (kh as isize - 1) - 1) / s + 1) as usize;
    let ow = ((wd as isize + 2 * p - d * (kw as isize - 1) - 1) / s + 1) as usize;
    let mut out = Vec::with_capacity(o_ch * oh * ow);
    for o in 0..o_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ci in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = oy as isize * s - p + ky as isize * d;
                            let ix = ox as isize * s - p + kx as isize * d;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let xv = x.data()[(ci * h + iy as usize) * wd + ix as usize];
                            let kv = w.kernel.data()[((o * c + ci) * kh + ky) * kw + kx];
                            acc = acc + kv * xv;
                        }
                    }
                }
                out.push(acc + w.bias.data()[o]);
            }
        }
    }
    Tensor::new(vec![o_ch, oh, ow], out).expect("oracle dims")
}

/// 3D convolution of a window stored in the conventional `[C, 3, H, W]`
/// layout (channels, time, rows, columns), same spatial padding.
pub fn conv3d_ncdhw_loops<T: Scalar>(window: &Tensor<T>, w: &Conv3dWeights<T>) -> Tensor<T> {
    let (c, h, wd) = (window.dims()[0], window.dims()[2], window.dims()[3]);
    let kd = w.kernel.dims();
    let (o_ch, kh, kw) = (kd[0], kd[3], kd[4]);
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = Vec::with_capacity(o_ch * h * wd);
    for o in 0..o_ch {
        for y in 0..h {
            for x in 0..wd {
                let mut acc = T::zero();
                for t in 0..3 {
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = y as isize + ky as isize - ph;
                                let ix = x as isize + kx as isize - pw;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let v = window.data()
                                    [((ci * 3 + t) * h + iy as usize) * wd + ix as usize];
                                let k =
                                    w.kernel.data()[(((o * c + ci) * 3 + t) * kh + ky) * kw + kx];
                                acc = acc + k * v;
                            }
                        }
                    }
                }
                out.push(acc + w.bias.data()[o]);
            }
        }
    }
    Tensor::new(vec![o_ch, h, wd], out).expect("oracle dims")
}

/// Loop oracle for a window given as three `[C, H, W]` frames.
pub fn conv3d_loops<T: Scalar>(frames: [&Tensor<T>; 3], w: &Conv3dWeights<T>) -> Tensor<T> {
    let (c, h, wd) = (
        frames[0].dims()[0],
        frames[0].dims()[1],
        frames[0].dims()[2],
    );
    let mut window = vec![T::zero(); c * 3 * h * wd];
    for (t, f) in frames.iter().enumerate() {
        for ci in 0..c {
            for i in 0..h * wd {
                window[(ci * 3 + t) * h * wd + i] = f.data()[ci * h * wd + i];
            }
        }
    }
    let window = Tensor::new(vec![c, 3, h, wd], window).expect("window dims");
    conv3d_ncdhw_loops(&window, w)
}

/// Frame index feeding temporal tap `t` of output frame `i`, or `None` for a zero frame.
fn padded_source(policy: PaddingPolicy, layer_index: usize, i: usize, t: usize) -> Option<usize> {
    let pos = i as isize + t as isize - 1;
    match policy {
        PaddingPolicy::ZeroPad => (0..3).contains(&pos).then_some(pos as usize),
        PaddingPolicy::Eq6Literal if layer_index == 2 => Some(pos.clamp(0, 2) as usize),
        _ => Some(pos.rem_euclid(3) as usize),
    }
}

/// Conventional reorganization: gathers each output frame's padded window
/// element by element into a `[C, 3, H, W]` tensor.
pub fn reorganize_windows<T: Scalar>(
    block: &TemporalBlock<T>,
    policy: PaddingPolicy,
    layer_index: usize,
) -> [Tensor<T>; 3] {
    let [c, h, w] = block.frame_dims();
    let src = block.stacked().data();
    let n = c * 3 * h * w;
    [0usize, 1, 2].map(|i| {
        let mut out = vec![T::zero(); n];
        for (idx, slot) in out.iter_mut().enumerate() {
            let x = idx % w;
            let y = (idx / w) % h;
            let t = (idx / (w * h)) % 3;
            let ci = idx / (w * h * 3);
            if let Some(f) = padded_source(policy, layer_index, i, t) {
                *slot = src[((f * c + ci) * h + y) * w + x];
            }
        }
        Tensor::new(vec![c, 3, h, w], out).expect("window dims")
    })
}

/// Slow counterpart of [`crate::temporal::tm_conv3d_layer`]: explicit window
/// reorganization followed by loop convolution.
pub fn naive_cyclic_conv3d<T: Scalar>(
    block: &TemporalBlock<T>,
    w: &Conv3dWeights<T>,
    policy: PaddingPolicy,
    layer_index: usize,
) -> Result<TemporalBlock<T>> {
    if w.kernel.dims()[1] != block.channels() {
        return shape_err("naive conv3d channel mismatch");
    }
    let windows = reorganize_windows(block, policy, layer_index);
    let outs = windows.map(|win| conv3d_ncdhw_loops(&win, w));
    TemporalBlock::new(outs)
}

/// Slot-by-slot shuffle: `out[i*C + j] = in[3j + i]`.
pub fn naive_shuffle<T: Scalar>(block: &TemporalBlock<T>) -> TemporalBlock<T> {
    let [c, h, w] = block.frame_dims();
    let plane = h * w;
    let src = block.stacked().data();
    let mut out = vec![T::zero(); src.len()];
    for i in 0..3 {
        for j in 0..c {
            for p in 0..plane {
                out[(i * c + j) * plane + p] = src[(3 * j + i) * plane + p];
            }
        }
    }
    TemporalBlock::from_stacked(
        Tensor::new(block.stacked().dims().to_vec(), out).expect("same dims"),
    )
    .expect("stacked")
}

/// Step-by-step composition of the naive ops into a temporal module.
pub fn temporal_module_oracle<T: Scalar>(
    block: &TemporalBlock<T>,
    w: &TemporalModuleWeights<T>,
    cfg: &TemporalConfig,
) -> Result<TemporalBlock<T>> {
    let mut x = block.clone();
    for l in 0..cfg.num_layers {
        let mut st = naive_cyclic_conv3d(&x, &w.conv3d[l], cfg.policy, l + 1)?;
        if l < cfg.num_residuals() {
            let fixed: Vec<Tensor<T>> = (0..3)
                .map(|i| {
                    let corr = conv2d_loops(&x.frame(i), &w.res2d[l]);
                    st.frame(i).add(&corr)
                })
                .collect::<Result<_>>()?;
            let [a, b, c]: [Tensor<T>; 3] = fixed.try_into().expect("three frames");
            st = TemporalBlock::new([a, b, c])?;
        }
        if cfg.shuffle && l + 1 < cfg.num_layers {
            st = naive_shuffle(&st);
        }
        x = st;
    }
    Ok(x)
}

/// Bilinear interpolation evaluated per output pixel straight from the
/// half-pixel formula.
pub fn bilinear_formula<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ci in 0..c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let sy = ((oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5)
                    .max(0.0)
                    .min((h - 1) as f64);
                let sx = ((ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5)
                    .max(0.0)
                    .min((w - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (ly, lx) = (T::lit(sy - y0 as f64), T::lit(sx - x0 as f64));
                let at = |yy: usize, xx: usize| x.data()[(ci * h + yy) * w + xx];
                let top = at(y0, x0) * (T::one() - lx) + at(y0, x1) * lx;
                let bot = at(y1, x0) * (T::one() - lx) + at(y1, x1) * lx;
                out.push(top * (T::one() - ly) + bot * ly);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out).expect("dims")
}
