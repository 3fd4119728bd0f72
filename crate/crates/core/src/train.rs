//! Reverse-mode gradients for the temporal-module op set, finite-difference
//! checking, SGD with momentum, and a teacher-student overfit demo.
//!
//! The tape is define-by-run: every op evaluates eagerly and records its
//! inputs. A temporal block lives on the tape as one `[3C, H, W]` tensor
//! (frame-major channel slots), which is exactly the layout the shuffle
//! permutes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::nn::{conv2d, conv3d_window, Conv2dWeights, Conv3dWeights};
use crate::rng::SeededRng;
use crate::store::WeightStore;
use crate::temporal::{
    temporal_shuffle, temporal_shuffle_inverse, window_sources, FrameRef, TemporalBlock,
    TemporalConfig, TemporalModuleWeights,
};
use crate::tensor::{Scalar, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(0);

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(String),
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        dilation: usize,
    },
    Conv3d {
        frames: [Var; 3],
        k: Var,
        b: Var,
    },
    Shuffle {
        x: Var,
    },
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    Concat {
        parts: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op,
    value: Tensor<T>,
}

/// Recorded forward computation.
#[derive(Debug)]
pub struct GradTape<T = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

/// Result of [`GradTape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T = f32> {
    vars: Vec<Option<Tensor<T>>>,
    /// Gradient of every registered parameter, zero where unreached.
    pub params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.vars.get(v.idx).and_then(Option::as_ref)
    }
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Invalid(format!(
                "variable {} was not recorded on this tape",
                v.idx
            )));
        }
        Ok(&self.nodes[v.idx])
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.node(v)?.value)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Input, t)
    }

    pub fn param(&mut self, name: impl Into<String>, t: Tensor<T>) -> Var {
        self.push(Op::Param(name.into()), t)
    }

    /// Same-padded stride-1 2D convolution of `x` `[C,H,W]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, dilation: usize) -> Result<Var> {
        let w = Conv2dWeights::same(self.value(k)?.clone(), self.value(b)?.clone(), dilation)?;
        let out = conv2d(self.value(x)?, &w)?;
        Ok(self.push(Op::Conv2d { x, k, b, dilation }, out))
    }

    /// 3D convolution of one window of three `[C,H,W]` frames.
    pub fn conv3d_window(&mut self, frames: [Var; 3], k: Var, b: Var) -> Result<Var> {
        let w = Conv3dWeights::new(self.value(k)?.clone(), self.value(b)?.clone())?;
        let out = conv3d_window(
            [
                self.value(frames[0])?,
                self.value(frames[1])?,
                self.value(frames[2])?,
            ],
            &w,
        )?;
        Ok(self.push(Op::Conv3d { frames, k, b }, out))
    }

    /// Temporal shuffle of a `[3C,H,W]` block.
    pub fn shuffle(&mut self, x: Var) -> Result<Var> {
        let out = stacked_apply(self.value(x)?, temporal_shuffle)?;
        Ok(self.push(Op::Shuffle { x }, out))
    }

    /// Channels `start..start+len` of `x`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x)?.slice_axis(0, start, len)?;
        Ok(self.push(Op::Slice { x, start, len }, out))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals = parts
            .iter()
            .map(|&p| self.value(p))
            .collect::<Result<Vec<_>>>()?;
        let out = Tensor::concat(&vals, 0)?;
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
            },
            out,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a)?.add(self.value(b)?)?;
        Ok(self.push(Op::Add { a, b }, out))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x)?.relu();
        Ok(self.push(Op::Relu { x }, out))
    }

    /// Propagates `upstream` (the gradient of some scalar with respect to
    /// `out`) back through every op recorded before `out`.
    pub fn backward(&self, out: Var, upstream: &Tensor<T>) -> Result<Gradients<T>> {
        let node = self.node(out)?;
        if node.value.dims() != upstream.dims() {
            return shape_err(format!(
                "upstream {:?} does not match output {:?}",
                upstream.dims(),
                node.value.dims()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; out.idx + 1];
        grads[out.idx] = Some(upstream.clone());
        for idx in (0..=out.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::Conv2d { x, k, b, dilation } => {
                    let kv = &self.nodes[k.idx].value;
                    accumulate(&mut grads, *x, conv2d_input_grad(&g, kv, *dilation)?)?;
                    let xv = &self.nodes[x.idx].value;
                    let (kh, kw) = (kv.dims()[2], kv.dims()[3]);
                    accumulate(
                        &mut grads,
                        *k,
                        conv2d_kernel_grad(&g, xv, kh, kw, *dilation)?,
                    )?;
                    accumulate(&mut grads, *b, bias_grad(&g)?)?;
                }
                Op::Conv3d { frames, k, b } => {
                    let kv = &self.nodes[k.idx].value;
                    let kd = kv.dims().to_vec();
                    let (o, c, kh, kw) = (kd[0], kd[1], kd[3], kd[4]);
                    let mut kgrad = vec![T::zero(); kv.len()];
                    for (t, f) in frames.iter().enumerate() {
                        let kt = kernel_tap(kv, t)?;
                        accumulate(&mut grads, *f, conv2d_input_grad(&g, &kt, 1)?)?;
                        let gt = conv2d_kernel_grad(&g, &self.nodes[f.idx].value, kh, kw, 1)?;
                        let tap = kh * kw;
                        for oc in 0..o * c {
                            let dst = (oc * 3 + t) * tap;
                            kgrad[dst..dst + tap]
                                .copy_from_slice(&gt.data()[oc * tap..(oc + 1) * tap]);
                        }
                    }
                    accumulate(&mut grads, *k, Tensor::new(kd, kgrad)?)?;
                    accumulate(&mut grads, *b, bias_grad(&g)?)?;
                }
                Op::Shuffle { x } => {
                    accumulate(&mut grads, *x, stacked_apply(&g, temporal_shuffle_inverse)?)?;
                }
                Op::Slice { x, start, len } => {
                    let xv = &self.nodes[x.idx].value;
                    let inner: usize = xv.dims()[1..].iter().product();
                    let mut full = vec![T::zero(); xv.len()];
                    full[start * inner..(start + len) * inner].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, Tensor::new(xv.dims().to_vec(), full)?)?;
                }
                Op::Concat { parts } => {
                    let mut at = 0;
                    for p in parts {
                        let n = self.nodes[p.idx].value.dims()[0];
                        accumulate(&mut grads, *p, g.slice_axis(0, at, n)?)?;
                        at += n;
                    }
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.clone())?;
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[x.idx].value;
                    let masked =
                        g.zip_map(xv, |gv, xv| if xv > T::zero() { gv } else { T::zero() })?;
                    accumulate(&mut grads, *x, masked)?;
                }
            }
            grads[idx] = Some(g);
        }
        let mut params = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = match grads.get(idx).and_then(Option::as_ref) {
                    Some(g) => g.clone(),
                    None => Tensor::zeros(node.value.dims())?,
                };
                match params.get_mut(name) {
                    None => {
                        params.insert(name.clone(), g);
                    }
                    Some(acc) => *acc = Tensor::add(acc, &g)?,
                }
            }
        }
        Ok(Gradients {
            vars: grads,
            params,
        })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    let slot = &mut grads[v.idx];
    *slot = Some(match slot.take() {
        None => g,
        Some(acc) => acc.add(&g)?,
    });
    Ok(())
}

fn stacked_apply<T: Scalar>(
    x: &Tensor<T>,
    f: fn(&TemporalBlock<T>) -> TemporalBlock<T>,
) -> Result<Tensor<T>> {
    let d = x.dims();
    if d.len() != 3 || !d[0].is_multiple_of(3) {
        return shape_err(format!("shuffle expects [3C, H, W], got {d:?}"));
    }
    let block = TemporalBlock::from_stacked(x.reshape(&[3, d[0] / 3, d[1], d[2]])?)?;
    f(&block).into_stacked().reshape(d)
}

/// `[O,C,kh,kw]` slice of a `[O,C,3,kh,kw]` kernel at temporal tap `t`.
fn kernel_tap<T: Scalar>(k: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    let d = k.dims();
    let (o, c, kh, kw) = (d[0], d[1], d[3], d[4]);
    let tap = kh * kw;
    let mut out = Vec::with_capacity(o * c * tap);
    for oc in 0..o * c {
        let src = (oc * 3 + t) * tap;
        out.extend_from_slice(&k.data()[src..src + tap]);
    }
    Tensor::new(vec![o, c, kh, kw], out)
}

/// Adjoint of a same-padded stride-1 convolution with respect to its input:
/// correlation with the spatially flipped, channel-transposed kernel.
fn conv2d_input_grad<T: Scalar>(
    g: &Tensor<T>,
    k: &Tensor<T>,
    dilation: usize,
) -> Result<Tensor<T>> {
    let d = k.dims();
    let (o, c, kh, kw) = (d[0], d[1], d[2], d[3]);
    let flipped = Tensor::from_fn(&[c, o, kh, kw], |idx| {
        let kx = idx % kw;
        let ky = (idx / kw) % kh;
        let oi = (idx / (kw * kh)) % o;
        let ci = idx / (kw * kh * o);
        k.data()[((oi * c + ci) * kh + (kh - 1 - ky)) * kw + (kw - 1 - kx)]
    })?;
    let w = Conv2dWeights::same(flipped, Tensor::zeros(&[c])?, dilation)?;
    conv2d(g, &w)
}

fn conv2d_kernel_grad<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    kh: usize,
    kw: usize,
    dilation: usize,
) -> Result<Tensor<T>> {
    let (o, h, w) = (g.dims()[0], g.dims()[1], g.dims()[2]);
    let c = x.dims()[0];
    let (ph, pw) = (dilation * (kh / 2), dilation * (kw / 2));
    let mut out = vec![T::zero(); o * c * kh * kw];
    for oi in 0..o {
        let gp = &g.data()[oi * h * w..(oi + 1) * h * w];
        for ci in 0..c {
            let xp = &x.data()[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let dy = (ky * dilation) as isize - ph as isize;
                    let dx = (kx * dilation) as isize - pw as isize;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        for xx in x0..x1 {
                            let ix = (xx as isize + dx) as usize;
                            acc = acc + gp[y * w + xx] * xp[iy * w + ix];
                        }
                    }
                    out[((oi * c + ci) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![o, c, kh, kw], out)
}

fn bias_grad<T: Scalar>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let o = g.dims()[0];
    let plane = g.len() / o;
    Tensor::new(
        vec![o],
        g.data()
            .chunks_exact(plane)
            .map(|p| p.iter().copied().sum())
            .collect(),
    )
}

/// Tape handles of a temporal module's parameters.
#[derive(Debug, Clone)]
pub struct TapeTemporalParams {
    pub conv3d: Vec<(Var, Var)>,
    pub res2d: Vec<(Var, Var)>,
}

/// Registers `{prefix}.conv3d_{n}` / `{prefix}.res2d_{n}` weights from `store`.
pub fn register_temporal_params(
    tape: &mut GradTape<f32>,
    store: &WeightStore,
    prefix: &str,
    cfg: &TemporalConfig,
) -> Result<TapeTemporalParams> {
    let mut reg = |name: String| -> Result<Var> {
        let t = store.require(&name)?.clone();
        Ok(tape.param(name, t))
    };
    let mut conv3d = Vec::new();
    for n in 1..=cfg.num_layers {
        conv3d.push((
            reg(format!("{prefix}.conv3d_{n}.kernel"))?,
            reg(format!("{prefix}.conv3d_{n}.bias"))?,
        ));
    }
    let mut res2d = Vec::new();
    for n in 1..=cfg.num_residuals() {
        res2d.push((
            reg(format!("{prefix}.res2d_{n}.kernel"))?,
            reg(format!("{prefix}.res2d_{n}.bias"))?,
        ));
    }
    Ok(TapeTemporalParams { conv3d, res2d })
}

/// Temporal module forward on the tape; `x` is a `[3C, H, W]` block.
pub fn tape_temporal_module<T: Scalar>(
    tape: &mut GradTape<T>,
    x: Var,
    p: &TapeTemporalParams,
    cfg: &TemporalConfig,
) -> Result<Var> {
    if p.conv3d.len() != cfg.num_layers || p.res2d.len() != cfg.num_residuals() {
        return Err(Error::Config(
            "temporal parameter count does not match the configuration".into(),
        ));
    }
    let c = tape.value(x)?.dims()[0] / 3;
    let mut cur = x;
    for l in 0..cfg.num_layers {
        let mut frames = [cur; 3];
        for (i, f) in frames.iter_mut().enumerate() {
            *f = tape.slice(cur, i * c, c)?;
        }
        let plane = tape.value(frames[0])?.dims().to_vec();
        let mut zero = None;
        let mut outs = Vec::with_capacity(3);
        for i in 0..3 {
            let mut src = [cur; 3];
            for (slot, r) in src.iter_mut().zip(window_sources(cfg.policy, l + 1, i)) {
                *slot = match r {
                    FrameRef::Frame(f) => frames[f],
                    FrameRef::Zero => match zero {
                        Some(z) => z,
                        None => {
                            let z = tape.input(Tensor::zeros(&plane)?);
                            zero = Some(z);
                            z
                        }
                    },
                };
            }
            let (k, bias) = p.conv3d[l];
            let mut y = tape.conv3d_window(src, k, bias)?;
            if let Some(&(rk, rb)) = p.res2d.get(l) {
                let r = tape.conv2d(frames[i], rk, rb, 1)?;
                y = tape.add(y, r)?;
            }
            outs.push(y);
        }
        cur = tape.concat(&outs)?;
        if cfg.shuffle && l + 1 < cfg.num_layers {
            cur = tape.shuffle(cur)?;
        }
    }
    Ok(cur)
}

/// Mean binary cross-entropy and its gradient with respect to `pred`.
///
/// `pred` is clamped to `[1e-7, 1 - 1e-7]`; the gradient is zero where the
/// clamp is active.
pub fn bce_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if pred.dims() != target.dims() {
        return shape_err(format!(
            "bce: pred {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        ));
    }
    let (lo, hi) = (1e-7, 1.0 - 1e-7);
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let (p, t) = (p.as_f64(), t.as_f64());
        let pc = p.clamp(lo, hi);
        loss -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        let g = if p < lo || p > hi {
            0.0
        } else {
            (pc - t) / (pc * (1.0 - pc))
        };
        grad.push(T::lit(g / n));
    }
    Ok((loss / n, Tensor::new(pred.dims().to_vec(), grad)?))
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if pred.dims() != target.dims() {
        return shape_err(format!(
            "mse: pred {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        ));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred.zip_map(target, |p, t| T::lit(2.0 * (p - t).as_f64() / n))?;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = (p - t).as_f64();
        loss += d * d;
    }
    Ok((loss / n, grad))
}

/// Momentum SGD with coupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub velocity: BTreeMap<String, Tensor>,
}

impl Default for SgdState {
    fn default() -> Self {
        Self::new(5e-3, 0.9, 5e-4).expect("valid defaults")
    }
}

impl SgdState {
    pub fn new(learning_rate: f32, momentum: f32, weight_decay: f32) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        })
    }
}

/// `v ← m·v + g + wd·p`, `p ← p − lr·v` for every parameter.
///
/// `grads` must name exactly the parameters in `params`, with equal dims.
pub fn sgd_step(
    state: &mut SgdState,
    params: &mut WeightStore,
    grads: &BTreeMap<String, Tensor>,
) -> Result<()> {
    if grads.len() != params.len() || grads.keys().any(|k| params.get(k).is_none()) {
        let missing: Vec<&str> = params.names().filter(|n| !grads.contains_key(*n)).collect();
        let extra: Vec<&str> = grads
            .keys()
            .map(String::as_str)
            .filter(|n| params.get(n).is_none())
            .collect();
        return Err(Error::Invalid(format!(
            "gradient names do not match parameters (missing {missing:?}, unknown {extra:?})"
        )));
    }
    for (name, g) in grads {
        let p = params.get(name).expect("checked");
        if p.dims() != g.dims() {
            return shape_err(format!(
                "gradient of `{name}` is {:?}, parameter is {:?}",
                g.dims(),
                p.dims()
            ));
        }
    }
    let (lr, m, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked");
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.dims()).expect("non-empty dims"));
        for ((vi, &gi), pi) in v
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(p.data_mut().iter_mut())
        {
            *vi = m * *vi + gi + wd * *pi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub seed: u64,
    /// Largest normwise relative error over the checked gradient tensors.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coordinates: usize,
    pub pass: bool,
}

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_REL_TOL: f64 = 1e-3;
pub const GRAD_ABS_TOL: f64 = 1e-6;

/// Ops accepted by [`fd_gradcheck`].
pub const GRADCHECK_OPS: [&str; 9] = [
    "conv2d",
    "conv3d_window",
    "shuffle",
    "add",
    "relu",
    "concat",
    "slice",
    "bce",
    "temporal_module",
];

type Builder = dyn Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>;

/// Central differences on every coordinate of every checked tensor of a small
/// random instance of `op`, in f64 with step `h = 1e-4`.
///
/// The check contracts an FD Jacobian column `(out(x+h) − out(x−h)) / Δ`,
/// where `Δ = (x+h) − (x−h)` is the realized step, against the same random
/// upstream used by the analytic pass. A tensor passes when its normwise
/// relative error is ≤ 1e-3 or its max absolute error is ≤ 1e-6.
pub fn fd_gradcheck(op: &str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = SeededRng::new(seed);
    if op == "bce" {
        return bce_gradcheck(&mut rng, seed);
    }
    let (inputs, build): (Vec<Tensor<f64>>, Box<Builder>) = match op {
        "conv2d" => {
            let dil = rng.range(1, 2);
            (
                vec![
                    rng.uniform_tensor(&[2, 5, 5], 1.0),
                    rng.uniform_tensor(&[3, 2, 3, 3], 1.0),
                    rng.uniform_tensor(&[3], 1.0),
                ],
                Box::new(move |t, v| t.conv2d(v[0], v[1], v[2], dil)),
            )
        }
        "conv3d_window" => (
            vec![
                rng.uniform_tensor(&[2, 4, 5], 1.0),
                rng.uniform_tensor(&[2, 4, 5], 1.0),
                rng.uniform_tensor(&[2, 4, 5], 1.0),
                rng.uniform_tensor(&[3, 2, 3, 3, 3], 1.0),
                rng.uniform_tensor(&[3], 1.0),
            ],
            Box::new(|t, v| t.conv3d_window([v[0], v[1], v[2]], v[3], v[4])),
        ),
        "shuffle" => {
            let c = rng.range(1, 4);
            (
                vec![rng.uniform_tensor(&[3 * c, 3, 4], 1.0)],
                Box::new(|t, v| t.shuffle(v[0])),
            )
        }
        "add" => (
            vec![
                rng.uniform_tensor(&[2, 3, 3], 1.0),
                rng.uniform_tensor(&[2, 3, 3], 1.0),
            ],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        "relu" => {
            // keep every input at least 0.1 away from the kink
            let x = Tensor::from_fn(&[2, 4, 4], |_| {
                let m = 0.1 + 0.9 * rng.unit();
                if rng.unit() < 0.5 {
                    -m
                } else {
                    m
                }
            })?;
            (vec![x], Box::new(|t, v| t.relu(v[0])))
        }
        "concat" => (
            vec![
                rng.uniform_tensor(&[2, 3, 3], 1.0),
                rng.uniform_tensor(&[1, 3, 3], 1.0),
            ],
            Box::new(|t, v| t.concat(&[v[0], v[1], v[0]])),
        ),
        "slice" => (
            vec![rng.uniform_tensor(&[5, 2, 3], 1.0)],
            Box::new(|t, v| t.slice(v[0], 1, 3)),
        ),
        "temporal_module" => {
            let cfg = TemporalConfig::default();
            let c = 2;
            let mut v = vec![rng.uniform_tensor(&[3 * c, 4, 4], 1.0)];
            for _ in 0..cfg.num_layers {
                v.push(rng.uniform_tensor(&[c, c, 3, 3, 3], 0.4));
                v.push(rng.uniform_tensor(&[c], 0.4));
            }
            for _ in 0..cfg.num_residuals() {
                v.push(rng.uniform_tensor(&[c, c, 3, 3], 0.4));
                v.push(rng.uniform_tensor(&[c], 0.4));
            }
            (
                v,
                Box::new(move |t, v| {
                    let n = cfg.num_layers;
                    let p = TapeTemporalParams {
                        conv3d: (0..n).map(|l| (v[1 + 2 * l], v[2 + 2 * l])).collect(),
                        res2d: (0..cfg.num_residuals())
                            .map(|l| (v[1 + 2 * n + 2 * l], v[2 + 2 * n + 2 * l]))
                            .collect(),
                    };
                    tape_temporal_module(t, v[0], &p, &cfg)
                }),
            )
        }
        other => return Err(Error::Unsupported(other.to_string())),
    };

    let run = |vals: &[Tensor<f64>]| -> Result<(GradTape<f64>, Vec<Var>, Var)> {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.input(v.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = run(&inputs)?;
    let out_dims = tape.value(out)?.dims().to_vec();
    let upstream: Tensor<f64> = rng.uniform_tensor(&out_dims, 1.0);
    let grads = tape.backward(out, &upstream)?;

    let mut report = GradCheckReport {
        op: op.to_string(),
        seed,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        coordinates: 0,
        pass: true,
    };
    let mut perturbed = inputs.clone();
    for (k, v) in vars.iter().enumerate() {
        let analytic = match grads.wrt(*v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(inputs[k].dims())?,
        };
        let mut numeric = vec![0.0; inputs[k].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x = inputs[k].data()[j];
            let (xp, xm) = (x + FD_STEP, x - FD_STEP);
            perturbed[k].data_mut()[j] = xp;
            let (tp, _, op_) = run(&perturbed)?;
            perturbed[k].data_mut()[j] = xm;
            let (tm, _, om) = run(&perturbed)?;
            perturbed[k].data_mut()[j] = x;
            let delta = xp - xm;
            let (yp, ym) = (tp.value(op_)?, tm.value(om)?);
            let mut acc = 0.0;
            for ((&a, &b), &u) in yp.data().iter().zip(ym.data()).zip(upstream.data()) {
                let col = (a - b) / delta;
                if col != 0.0 {
                    acc += col * u;
                }
            }
            *slot = acc;
        }
        record(&mut report, analytic.data(), &numeric);
    }
    Ok(report)
}

fn record(report: &mut GradCheckReport, analytic: &[f64], numeric: &[f64]) {
    let abs = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let rel = if abs == 0.0 {
        0.0
    } else {
        abs / scale.max(f64::MIN_POSITIVE)
    };
    report.max_abs_err = report.max_abs_err.max(abs);
    report.max_rel_err = report.max_rel_err.max(rel);
    report.coordinates += analytic.len();
    report.pass &= rel <= GRAD_REL_TOL || abs <= GRAD_ABS_TOL;
}

fn bce_gradcheck(rng: &mut SeededRng, seed: u64) -> Result<GradCheckReport> {
    let pred: Tensor<f64> = rng.interval_tensor(&[1, 4, 4], 0.05, 0.95);
    let target = Tensor::from_fn(&[1, 4, 4], |_| if rng.unit() < 0.5 { 0.0 } else { 1.0 })?;
    let (_, analytic) = bce_loss(&pred, &target)?;
    let mut numeric = vec![0.0; pred.len()];
    let mut p = pred.clone();
    for (j, slot) in numeric.iter_mut().enumerate() {
        let x = pred.data()[j];
        let (xp, xm) = (x + FD_STEP, x - FD_STEP);
        p.data_mut()[j] = xp;
        let lp = bce_loss(&p, &target)?.0;
        p.data_mut()[j] = xm;
        let lm = bce_loss(&p, &target)?.0;
        p.data_mut()[j] = x;
        *slot = (lp - lm) / (xp - xm);
    }
    let mut report = GradCheckReport {
        op: "bce".into(),
        seed,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        coordinates: 0,
        pass: true,
    };
    record(&mut report, analytic.data(), &numeric);
    Ok(report)
}

/// Settings of [`tm_overfit_demo_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct OverfitConfig {
    pub seed: u64,
    pub steps: usize,
    pub channels: usize,
    pub size: usize,
    /// Fixed training clips the student sees every step.
    pub clips: usize,
    pub temporal: TemporalConfig,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl OverfitConfig {
    pub fn new(seed: u64, steps: usize) -> Self {
        Self {
            seed,
            steps,
            channels: 8,
            size: 16,
            clips: 2,
            temporal: TemporalConfig::default(),
            learning_rate: 5e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Kaiming-uniform temporal-module weights under `{prefix}.conv3d_{n}` / `{prefix}.res2d_{n}`.
pub fn init_temporal_weights(
    rng: &mut SeededRng,
    prefix: &str,
    c: usize,
    cfg: &TemporalConfig,
) -> Result<WeightStore> {
    let mut store = WeightStore::new();
    let b3 = (6.0 / (c * 27) as f64).sqrt();
    let b2 = (6.0 / (c * 9) as f64).sqrt();
    for n in 1..=cfg.num_layers {
        store.insert(
            format!("{prefix}.conv3d_{n}.kernel"),
            rng.uniform_tensor(&[c, c, 3, 3, 3], b3),
        )?;
        store.insert(format!("{prefix}.conv3d_{n}.bias"), Tensor::zeros(&[c])?)?;
    }
    for n in 1..=cfg.num_residuals() {
        store.insert(
            format!("{prefix}.res2d_{n}.kernel"),
            rng.uniform_tensor(&[c, c, 3, 3], b2),
        )?;
        store.insert(format!("{prefix}.res2d_{n}.bias"), Tensor::zeros(&[c])?)?;
    }
    Ok(store)
}

/// Typed temporal weights from a store written by [`init_temporal_weights`].
pub fn temporal_weights_from_store(
    store: &WeightStore,
    prefix: &str,
    cfg: &TemporalConfig,
) -> Result<TemporalModuleWeights> {
    let get = |n: String| store.require(&n).cloned();
    Ok(TemporalModuleWeights {
        conv3d: (1..=cfg.num_layers)
            .map(|n| {
                Conv3dWeights::new(
                    get(format!("{prefix}.conv3d_{n}.kernel"))?,
                    get(format!("{prefix}.conv3d_{n}.bias"))?,
                )
            })
            .collect::<Result<_>>()?,
        res2d: (1..=cfg.num_residuals())
            .map(|n| {
                Conv2dWeights::same(
                    get(format!("{prefix}.res2d_{n}.kernel"))?,
                    get(format!("{prefix}.res2d_{n}.bias"))?,
                    1,
                )
            })
            .collect::<Result<_>>()?,
    })
}

/// Teacher-student fit of a temporal module; returns the loss before each step.
pub fn tm_overfit_demo(seed: u64, steps: usize) -> Result<Vec<f64>> {
    tm_overfit_demo_with(&OverfitConfig::new(seed, steps))
}

pub fn tm_overfit_demo_with(cfg: &OverfitConfig) -> Result<Vec<f64>> {
    let (c, s) = (cfg.channels, cfg.size);
    let mut rng = SeededRng::new(cfg.seed);
    let teacher_store = init_temporal_weights(&mut rng, "tm", c, &cfg.temporal)?;
    let teacher = temporal_weights_from_store(&teacher_store, "tm", &cfg.temporal)?;
    let mut student = init_temporal_weights(&mut rng, "tm", c, &cfg.temporal)?;
    let mut data = Vec::with_capacity(cfg.clips);
    for _ in 0..cfg.clips {
        let x: Tensor = rng.uniform_tensor(&[3 * c, s, s], 1.0);
        let block = TemporalBlock::from_stacked(x.reshape(&[3, c, s, s])?)?;
        let y = crate::temporal::temporal_module_forward(&block, &teacher, &cfg.temporal)?
            .into_stacked()
            .reshape(&[3 * c, s, s])?;
        data.push((x, y));
    }
    let mut sgd = SgdState::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay)?;
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut total = 0.0;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for (x, y) in &data {
            let mut tape = GradTape::new();
            let params = register_temporal_params(&mut tape, &student, "tm", &cfg.temporal)?;
            let xv = tape.input(x.clone());
            let out = tape_temporal_module(&mut tape, xv, &params, &cfg.temporal)?;
            let (loss, g) = mse_loss(tape.value(out)?, y)?;
            total += loss / data.len() as f64;
            let gs = tape.backward(out, &g.scale(1.0 / data.len() as f32))?;
            for (name, g) in gs.params {
                match grads.get_mut(&name) {
                    Some(acc) => *acc = acc.add(&g)?,
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::Diverged { step, loss: total });
        }
        curve.push(total);
        sgd_step(&mut sgd, &mut student, &grads)?;
    }
    Ok(curve)
}

/// Writes `step,loss` rows.
pub fn write_curve_csv(path: impl AsRef<Path>, curve: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss")?;
    for (i, l) in curve.iter().enumerate() {
        writeln!(f, "{i},{l:e}")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::temporal::temporal_module_forward;
    use crate::tensor::max_rel_err;

    #[test]
    fn shuffle_gradient_is_inverse_permutation() {
        let mut rng = SeededRng::new(1);
        let mut tape = GradTape::<f32>::new();
        let x = tape.input(rng.uniform_tensor(&[12, 3, 3], 1.0));
        let y = tape.shuffle(x).unwrap();
        let up: Tensor = rng.uniform_tensor(&[12, 3, 3], 1.0);
        let g = tape.backward(y, &up).unwrap();
        let want = temporal_shuffle_inverse(
            &TemporalBlock::from_stacked(up.reshape(&[3, 4, 3, 3]).unwrap()).unwrap(),
        );
        assert_eq!(g.wrt(x).unwrap().data(), want.stacked().data());
    }

    #[test]
    fn add_gradient_is_upstream() {
        let mut tape = GradTape::<f64>::new();
        let a = tape.input(Tensor::full(&[2, 2], 1.0).unwrap());
        let b = tape.input(Tensor::full(&[2, 2], 3.0).unwrap());
        let s = tape.add(a, b).unwrap();
        let up = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 4.0]).unwrap();
        let g = tape.backward(s, &up).unwrap();
        assert_eq!(g.wrt(a).unwrap(), &up);
        assert_eq!(g.wrt(b).unwrap(), &up);
    }

    #[test]
    fn foreign_variable_is_rejected() {
        let mut t1 = GradTape::<f32>::new();
        let mut t2 = GradTape::<f32>::new();
        let v = t1.input(Tensor::scalar(1.0));
        t2.input(Tensor::scalar(1.0));
        assert!(t2.relu(v).is_err());
        assert!(t2.backward(v, &Tensor::scalar(1.0)).is_err());
        let w = t1.relu(v).unwrap();
        assert!(t1.backward(w, &Tensor::zeros(&[2]).unwrap()).is_err());
    }

    #[test]
    fn every_op_passes_gradcheck() {
        for op in GRADCHECK_OPS {
            for seed in 0..5 {
                let r = fd_gradcheck(op, seed).unwrap();
                assert!(r.pass, "{r:?}");
                assert!(r.coordinates > 0);
            }
        }
        for seed in 0..5 {
            assert_eq!(fd_gradcheck("shuffle", seed).unwrap().max_abs_err, 0.0);
        }
        assert!(matches!(
            fd_gradcheck("softmax", 0),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn conv2d_gradcheck_fixture() {
        let r = fd_gradcheck("conv2d", 11).unwrap();
        assert!(r.max_rel_err <= 1e-3);
    }

    #[test]
    fn tape_temporal_module_matches_forward() {
        let cfg = TemporalConfig::default();
        let mut rng = SeededRng::new(4);
        let store = init_temporal_weights(&mut rng, "tm", 4, &cfg).unwrap();
        let w = temporal_weights_from_store(&store, "tm", &cfg).unwrap();
        for policy in [
            crate::temporal::PaddingPolicy::Eq6Literal,
            crate::temporal::PaddingPolicy::CyclicAll,
            crate::temporal::PaddingPolicy::ZeroPad,
        ] {
            let cfg = TemporalConfig { policy, ..cfg };
            let x: Tensor = rng.uniform_tensor(&[12, 6, 6], 1.0);
            let block = TemporalBlock::from_stacked(x.reshape(&[3, 4, 6, 6]).unwrap()).unwrap();
            let want = temporal_module_forward(&block, &w, &cfg).unwrap();
            let mut tape = GradTape::new();
            let p = register_temporal_params(&mut tape, &store, "tm", &cfg).unwrap();
            let xv = tape.input(x);
            let out = tape_temporal_module(&mut tape, xv, &p, &cfg).unwrap();
            assert!(max_rel_err(tape.value(out).unwrap().data(), want.stacked().data()) <= 1e-6);
            let g = tape
                .backward(out, &Tensor::full(&[12, 6, 6], 1.0).unwrap())
                .unwrap();
            for (name, t) in store.iter() {
                assert_eq!(g.params[name].dims(), t.dims());
            }
        }
    }

    #[test]
    fn bce_fixtures() {
        let t = Tensor::new(vec![4], vec![0.0f64, 1.0, 1.0, 0.0]).unwrap();
        assert!(bce_loss(&t, &t).unwrap().0 <= 1e-6);
        let half = Tensor::full(&[4], 0.5f64).unwrap();
        assert!((bce_loss(&half, &t).unwrap().0 - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(&half, &Tensor::zeros(&[3]).unwrap()).is_err());
    }

    #[test]
    fn sgd_fixtures() {
        let mut p = WeightStore::new();
        p.insert("w", Tensor::scalar(1.5)).unwrap();
        let zero: BTreeMap<String, Tensor> = [("w".to_string(), Tensor::scalar(0.0))].into();
        let mut s = SgdState::new(0.1, 0.9, 0.0).unwrap();
        sgd_step(&mut s, &mut p, &zero).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.5]);

        let two: BTreeMap<String, Tensor> = [("w".to_string(), Tensor::scalar(2.0))].into();
        let mut s = SgdState::new(1.0, 0.0, 0.0).unwrap();
        sgd_step(&mut s, &mut p, &two).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[-0.5]);

        // v1 = g, p1 = p0 - lr g; v2 = m g + g, p2 = p1 - lr (1 + m) g
        let mut p = WeightStore::new();
        p.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut s = SgdState::new(0.1, 0.9, 0.0).unwrap();
        sgd_step(&mut s, &mut p, &two).unwrap();
        sgd_step(&mut s, &mut p, &two).unwrap();
        let want = 1.0f32 - 0.1 * 2.0 - 0.1 * (0.9 * 2.0 + 2.0);
        assert!((p.get("w").unwrap().data()[0] - want).abs() < 1e-6);

        let mut s = SgdState::new(0.0, 0.9, 5e-4).unwrap();
        let before = p.clone();
        sgd_step(&mut s, &mut p, &two).unwrap();
        assert_eq!(p, before);

        let wrong: BTreeMap<String, Tensor> = [("v".to_string(), Tensor::scalar(2.0))].into();
        assert!(sgd_step(&mut s, &mut p, &wrong).is_err());
        assert!(SgdState::new(0.1, 1.0, 0.0).is_err());
    }

    #[test]
    fn overfit_demo_basics() {
        assert!(tm_overfit_demo(3, 0).unwrap().is_empty());
        let a = tm_overfit_demo(3, 5).unwrap();
        assert_eq!(a, tm_overfit_demo(3, 5).unwrap());
        assert!(a.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn curve_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        write_curve_csv(&p, &[1.0, 0.5]).unwrap();
        let s = std::fs::read_to_string(p).unwrap();
        assert_eq!(s.lines().next(), Some("step,loss"));
        assert_eq!(s.lines().count(), 3);
    }
}
