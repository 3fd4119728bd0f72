//! The temporal module: sequential 3D convolutions over a 3-frame block with
//! repeat-based cyclic padding, 2D residual corrections, and the temporal
//! channel shuffle.
//!
//! A [`TemporalBlock`] keeps its three frames in one contiguous
//! `[3, C, H, W]` buffer. Viewed as `[3C, H, W]` that buffer is exactly the
//! frame-major slot layout the shuffle permutes, and the repeat used for
//! cyclic padding is a plain tiling of it.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{conv2d, conv3d_window_raw, Conv2dWeights, Conv3dWeights};
use crate::tensor::{Scalar, Tensor};
use crate::trace::{OpKind, Tracer};

/// Per-frame features of three consecutive frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalBlock<T = f32> {
    stacked: Tensor<T>,
}

impl<T: Scalar> TemporalBlock<T> {
    /// Builds a block from three `[C, H, W]` frames with identical dims.
    pub fn new(frames: [Tensor<T>; 3]) -> Result<Self> {
        let dims = frames[0].dims().to_vec();
        if dims.len() != 3 {
            return shape_err(format!("block frames must be [C,H,W], got {dims:?}"));
        }
        if frames.iter().any(|f| f.dims() != dims.as_slice()) {
            return shape_err("block frames disagree on shape");
        }
        let [a, b, c] = frames;
        let mut data = a.into_data();
        data.extend_from_slice(b.data());
        data.extend_from_slice(c.data());
        Ok(Self {
            stacked: Tensor::new(vec![3, dims[0], dims[1], dims[2]], data)?,
        })
    }

    /// Wraps an already stacked `[3, C, H, W]` tensor.
    pub fn from_stacked(stacked: Tensor<T>) -> Result<Self> {
        if stacked.rank() != 4 || stacked.dims()[0] != 3 {
            return shape_err(format!(
                "stacked block must be [3,C,H,W], got {:?}",
                stacked.dims()
            ));
        }
        Ok(Self { stacked })
    }

    pub fn stacked(&self) -> &Tensor<T> {
        &self.stacked
    }

    pub fn into_stacked(self) -> Tensor<T> {
        self.stacked
    }

    pub fn channels(&self) -> usize {
        self.stacked.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.stacked.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.stacked.dims()[3]
    }

    /// `[C, H, W]`
    pub fn frame_dims(&self) -> [usize; 3] {
        [self.channels(), self.height(), self.width()]
    }

    fn frame_len(&self) -> usize {
        self.channels() * self.height() * self.width()
    }

    pub fn frame_data(&self, i: usize) -> &[T] {
        let n = self.frame_len();
        &self.stacked.data()[i * n..(i + 1) * n]
    }

    /// Materialized copy of frame `i` (0-based).
    pub fn frame(&self, i: usize) -> Tensor<T> {
        Tensor::new(self.frame_dims().to_vec(), self.frame_data(i).to_vec()).expect("valid frame")
    }

    pub fn frames(&self) -> [Tensor<T>; 3] {
        [self.frame(0), self.frame(1), self.frame(2)]
    }

    /// Frames in order `(i, i+1, i+2) mod 3`.
    pub fn rotate(&self, by: usize) -> Self {
        let f = self.frames();
        Self::new([
            f[by % 3].clone(),
            f[(by + 1) % 3].clone(),
            f[(by + 2) % 3].clone(),
        ])
        .expect("same dims")
    }

    pub fn map_frames(
        &self,
        mut f: impl FnMut(usize, Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        let [a, b, c] = self.frames();
        Self::new([f(0, a)?, f(1, b)?, f(2, c)?])
    }
}

/// How frames outside the 3-frame window are supplied to the 3D convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PaddingPolicy {
    /// Cyclic padding on every layer except the second, which replicates the
    /// edge frames (`pad3 = ST¹_1`, `pad4 = ST¹_3`).
    #[default]
    Eq6Literal,
    /// Cyclic padding on every layer.
    CyclicAll,
    /// Zero frames outside the window.
    ZeroPad,
}

/// Source of one frame in a padded window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameRef {
    Frame(usize),
    Zero,
}

/// Left and right neighbours of output frame `i` under `policy` at the given
/// 1-based layer index.
pub fn window_sources(policy: PaddingPolicy, layer_index: usize, i: usize) -> [FrameRef; 3] {
    use FrameRef::*;
    let cyclic = [Frame((i + 2) % 3), Frame(i), Frame((i + 1) % 3)];
    match policy {
        PaddingPolicy::CyclicAll => cyclic,
        PaddingPolicy::Eq6Literal if layer_index == 2 => {
            [Frame(i.saturating_sub(1)), Frame(i), Frame((i + 1).min(2))]
        }
        PaddingPolicy::Eq6Literal => cyclic,
        PaddingPolicy::ZeroPad => [
            if i == 0 { Zero } else { Frame(i - 1) },
            Frame(i),
            if i == 2 { Zero } else { Frame(i + 1) },
        ],
    }
}

/// Repeats the block three times along the frame axis:
/// `[T1,T2,T3,T1,T2,T3,T1,T2,T3]` as a `[9, C, H, W]` tensor.
pub fn cyclic_expand<T: Scalar>(block: &TemporalBlock<T>) -> Tensor<T> {
    block.stacked.repeat_axis(0, 3).expect("axis 0 exists")
}

/// Offsets into the expanded sequence whose 3-wide windows give the cyclic
/// neighbourhoods `(T3,T1,T2)`, `(T1,T2,T3)`, `(T2,T3,T1)`.
pub const CYCLIC_WINDOW_STARTS: [usize; 3] = [2, 3, 4];

/// The three sliding windows over a `[9, C, H, W]` cyclic expansion, as raw frame slices.
pub fn cyclic_windows<T: Scalar>(expanded: &Tensor<T>) -> [[&[T]; 3]; 3] {
    let n: usize = expanded.dims()[1..].iter().product();
    let frame = |k: usize| &expanded.data()[k * n..(k + 1) * n];
    CYCLIC_WINDOW_STARTS.map(|s| [frame(s), frame(s + 1), frame(s + 2)])
}

/// One 3D convolution layer over a block. Output frame `i` is the
/// convolution of its padded window.
pub fn tm_conv3d_layer<T: Scalar>(
    block: &TemporalBlock<T>,
    w: &Conv3dWeights<T>,
    policy: PaddingPolicy,
    layer_index: usize,
) -> Result<TemporalBlock<T>> {
    let [c, h, wd] = block.frame_dims();
    if w.in_channels() != c {
        return shape_err(format!(
            "temporal conv3d expects {} channels, block has {c}",
            w.in_channels()
        ));
    }
    let (kh, kw) = w.kernel_hw();
    if kh != kw {
        return shape_err("temporal conv3d spatial kernel must be square");
    }
    let cyclic = matches!(policy, PaddingPolicy::CyclicAll)
        || (matches!(policy, PaddingPolicy::Eq6Literal) && layer_index != 2);

    let outputs: Vec<Vec<T>> = if cyclic {
        let expanded = cyclic_expand(block);
        cyclic_windows(&expanded)
            .into_iter()
            .map(|win| conv3d_window_raw(win, c, h, wd, w))
            .collect()
    } else {
        // padded sequence [pad_left, T1, T2, T3, pad_right]; window i starts at i
        let zeros = vec![T::zero(); block.frame_len()];
        let seq: [&[T]; 5] = match policy {
            PaddingPolicy::ZeroPad => [
                &zeros,
                block.frame_data(0),
                block.frame_data(1),
                block.frame_data(2),
                &zeros,
            ],
            _ => [
                block.frame_data(0),
                block.frame_data(0),
                block.frame_data(1),
                block.frame_data(2),
                block.frame_data(2),
            ],
        };
        (0..3)
            .map(|i| conv3d_window_raw([seq[i], seq[i + 1], seq[i + 2]], c, h, wd, w))
            .collect()
    };
    let o = w.out_channels();
    let mut data = Vec::with_capacity(3 * o * h * wd);
    for out in outputs {
        data.extend(out);
    }
    TemporalBlock::from_stacked(Tensor::new(vec![3, o, h, wd], data)?)
}

/// `st[i] + conv2d(src[i])` for every frame.
pub fn residual_fix<T: Scalar>(
    st: &TemporalBlock<T>,
    src: &TemporalBlock<T>,
    w: &Conv2dWeights<T>,
) -> Result<TemporalBlock<T>> {
    st.map_frames(|i, frame| {
        let correction = conv2d(&src.frame(i), w)?;
        frame.add(&correction)
    })
}

/// Source slot of output slot `out_slot` for a `3C`-slot shuffle.
#[inline]
pub fn shuffle_source_slot(out_slot: usize, c: usize) -> usize {
    let (i, j) = (out_slot / c, out_slot % c);
    3 * j + i
}

fn permute_slots<T: Scalar>(
    block: &TemporalBlock<T>,
    source_of: impl Fn(usize) -> usize,
) -> TemporalBlock<T> {
    let [c, h, w] = block.frame_dims();
    let plane = h * w;
    let src = block.stacked.data();
    let mut data = Vec::with_capacity(src.len());
    for out_slot in 0..3 * c {
        let s = source_of(out_slot);
        data.extend_from_slice(&src[s * plane..(s + 1) * plane]);
    }
    TemporalBlock {
        stacked: Tensor::new(block.stacked.dims().to_vec(), data).expect("same size"),
    }
}

/// Temporal shuffle: the `3C` frame-major channel slots are reshaped to
/// `(C, 3)`, transposed to `(3, C)` and flattened, so output slot `i*C + j`
/// takes input slot `3j + i`. Spatial maps move intact.
pub fn temporal_shuffle<T: Scalar>(block: &TemporalBlock<T>) -> TemporalBlock<T> {
    let c = block.channels();
    permute_slots(block, |s| shuffle_source_slot(s, c))
}

/// Inverse of [`temporal_shuffle`]: output slot `3j + i` takes input slot `i*C + j`.
pub fn temporal_shuffle_inverse<T: Scalar>(block: &TemporalBlock<T>) -> TemporalBlock<T> {
    let c = block.channels();
    permute_slots(block, |s| (s % 3) * c + s / 3)
}

/// Weights of one temporal module.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalModuleWeights<T = f32> {
    pub conv3d: Vec<Conv3dWeights<T>>,
    /// One residual conv per 3D layer; may omit the last one.
    pub res2d: Vec<Conv2dWeights<T>>,
}

/// Structural switches of the temporal module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalConfig {
    pub policy: PaddingPolicy,
    pub num_layers: usize,
    pub shuffle: bool,
    /// Apply a residual 2D correction after the final 3D conv too.
    pub residual_last: bool,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            policy: PaddingPolicy::Eq6Literal,
            num_layers: 3,
            shuffle: true,
            residual_last: true,
        }
    }
}

impl TemporalConfig {
    pub fn num_residuals(&self) -> usize {
        if self.residual_last {
            self.num_layers
        } else {
            self.num_layers.saturating_sub(1)
        }
    }
}

fn check_weights<T: Scalar>(
    w: &TemporalModuleWeights<T>,
    cfg: &TemporalConfig,
    c: usize,
) -> Result<()> {
    if !matches!(cfg.num_layers, 1 | 3 | 5) {
        return Err(Error::Config(format!(
            "temporal module supports 1, 3 or 5 conv layers, got {}",
            cfg.num_layers
        )));
    }
    if w.conv3d.len() != cfg.num_layers || w.res2d.len() != cfg.num_residuals() {
        return Err(Error::Config(format!(
            "temporal weights hold {} conv3d / {} res2d, config needs {} / {}",
            w.conv3d.len(),
            w.res2d.len(),
            cfg.num_layers,
            cfg.num_residuals()
        )));
    }
    for cw in &w.conv3d {
        if cw.in_channels() != c || cw.out_channels() != c {
            return shape_err(format!(
                "temporal conv3d must map {c} -> {c} channels, got {} -> {}",
                cw.in_channels(),
                cw.out_channels()
            ));
        }
    }
    for rw in &w.res2d {
        if rw.in_channels() != c || rw.out_channels() != c {
            return shape_err(format!("residual conv must map {c} -> {c} channels"));
        }
    }
    Ok(())
}

/// Full temporal module: `Conv3D → (+res) → S → Conv3D → (+res) → S → Conv3D → (+res)`.
///
/// The shuffle follows every layer but the last.
pub fn temporal_module_forward<T: Scalar>(
    block: &TemporalBlock<T>,
    w: &TemporalModuleWeights<T>,
    cfg: &TemporalConfig,
) -> Result<TemporalBlock<T>> {
    temporal_module_forward_traced(block, w, cfg, &Tracer::disabled(), "tm")
}

pub fn temporal_module_forward_traced<T: Scalar>(
    block: &TemporalBlock<T>,
    w: &TemporalModuleWeights<T>,
    cfg: &TemporalConfig,
    tracer: &Tracer,
    scope: &str,
) -> Result<TemporalBlock<T>> {
    check_weights(w, cfg, block.channels())?;
    let mut x = block.clone();
    for (l, cw) in w.conv3d.iter().enumerate() {
        let mut st = tm_conv3d_layer(&x, cw, cfg.policy, l + 1)?;
        tracer.record(scope, OpKind::Conv3d);
        if let Some(rw) = w.res2d.get(l) {
            st = residual_fix(&st, &x, rw)?;
            tracer.record_n(scope, OpKind::Conv2d, 3);
            tracer.record_n(scope, OpKind::Add, 3);
        }
        if cfg.shuffle && l + 1 < cfg.num_layers {
            st = temporal_shuffle(&st);
            tracer.record(scope, OpKind::Shuffle);
        }
        x = st;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use crate::rng::SeededRng;
    use crate::tensor::max_rel_err;

    fn scalar_block(vals: [f32; 3]) -> TemporalBlock {
        TemporalBlock::new(vals.map(|v| Tensor::full(&[1, 1, 1], v).unwrap())).unwrap()
    }

    fn random_block(rng: &mut SeededRng, c: usize, h: usize, w: usize) -> TemporalBlock {
        TemporalBlock::new([(); 3].map(|_| rng.uniform_tensor(&[c, h, w], 1.0))).unwrap()
    }

    fn identity3d(c: usize) -> Conv3dWeights {
        let mut k = Tensor::zeros(&[c, c, 3, 3, 3]).unwrap();
        for o in 0..c {
            k.data_mut()[(((o * c + o) * 3 + 1) * 3 + 1) * 3 + 1] = 1.0;
        }
        Conv3dWeights::new(k, Tensor::zeros(&[c]).unwrap()).unwrap()
    }

    fn zero2d(c: usize) -> Conv2dWeights {
        Conv2dWeights::same(
            Tensor::zeros(&[c, c, 3, 3]).unwrap(),
            Tensor::zeros(&[c]).unwrap(),
            1,
        )
        .unwrap()
    }

    fn random_tm(rng: &mut SeededRng, c: usize, cfg: &TemporalConfig) -> TemporalModuleWeights {
        TemporalModuleWeights {
            conv3d: (0..cfg.num_layers)
                .map(|_| {
                    Conv3dWeights::new(
                        rng.uniform_tensor(&[c, c, 3, 3, 3], 0.2),
                        rng.uniform_tensor(&[c], 0.2),
                    )
                    .unwrap()
                })
                .collect(),
            res2d: (0..cfg.num_residuals())
                .map(|_| {
                    Conv2dWeights::same(
                        rng.uniform_tensor(&[c, c, 3, 3], 0.2),
                        rng.uniform_tensor(&[c], 0.2),
                        1,
                    )
                    .unwrap()
                })
                .collect(),
        }
    }

    fn frame_values(b: &TemporalBlock) -> Vec<f32> {
        (0..3).map(|i| b.frame_data(i)[0]).collect()
    }

    #[test]
    fn cyclic_expand_windows() {
        let b = scalar_block([1.0, 2.0, 3.0]);
        let e = cyclic_expand(&b);
        assert_eq!(e.data(), &[1., 2., 3., 1., 2., 3., 1., 2., 3.]);
        let w: Vec<Vec<f32>> = cyclic_windows(&e)
            .iter()
            .map(|win| win.iter().map(|f| f[0]).collect())
            .collect();
        assert_eq!(
            w,
            vec![vec![3., 1., 2.], vec![1., 2., 3.], vec![2., 3., 1.]]
        );
    }

    #[test]
    fn cyclic_windows_match_modular_indices() {
        let mut rng = SeededRng::new(2);
        let b = random_block(&mut rng, 2, 3, 3);
        let e = cyclic_expand(&b);
        for (i, win) in cyclic_windows(&e).iter().enumerate() {
            for (k, src) in [(i + 2) % 3, i, (i + 1) % 3].into_iter().enumerate() {
                assert_eq!(win[k], b.frame_data(src));
            }
        }
        let same = scalar_block([4.0; 3]);
        let e = cyclic_expand(&same);
        let wins = cyclic_windows(&e);
        assert!(wins.iter().all(|w| w == &wins[0]));
    }

    #[test]
    fn identity_kernel_is_identity_under_every_policy() {
        let mut rng = SeededRng::new(3);
        let b = random_block(&mut rng, 3, 5, 4);
        for policy in [
            PaddingPolicy::Eq6Literal,
            PaddingPolicy::CyclicAll,
            PaddingPolicy::ZeroPad,
        ] {
            for layer in 1..=3 {
                assert_eq!(
                    tm_conv3d_layer(&b, &identity3d(3), policy, layer).unwrap(),
                    b
                );
            }
        }
    }

    #[test]
    fn scalar_sums_per_policy() {
        let b = scalar_block([1.0, 2.0, 3.0]);
        let ones = Conv3dWeights::new(
            Tensor::full(&[1, 1, 3, 1, 1], 1.0).unwrap(),
            Tensor::zeros(&[1]).unwrap(),
        )
        .unwrap();
        let run = |p, l| frame_values(&tm_conv3d_layer(&b, &ones, p, l).unwrap());
        assert_eq!(run(PaddingPolicy::CyclicAll, 1), vec![6., 6., 6.]);
        assert_eq!(run(PaddingPolicy::ZeroPad, 1), vec![3., 6., 5.]);
        // second layer of the literal policy replicates the edge frames
        assert_eq!(run(PaddingPolicy::Eq6Literal, 2), vec![4., 6., 8.]);
        assert_eq!(run(PaddingPolicy::Eq6Literal, 1), vec![6., 6., 6.]);
        assert_eq!(run(PaddingPolicy::Eq6Literal, 3), vec![6., 6., 6.]);
    }

    #[test]
    fn fast_layer_matches_reorganization_oracle() {
        let mut rng = SeededRng::new(4);
        for policy in [
            PaddingPolicy::Eq6Literal,
            PaddingPolicy::CyclicAll,
            PaddingPolicy::ZeroPad,
        ] {
            for layer in 1..=3 {
                let b = random_block(&mut rng, 3, 6, 5);
                let w = Conv3dWeights::new(
                    rng.uniform_tensor(&[2, 3, 3, 3, 3], 1.0),
                    rng.uniform_tensor(&[2], 1.0),
                )
                .unwrap();
                let fast = tm_conv3d_layer(&b, &w, policy, layer).unwrap();
                let slow = reference::naive_cyclic_conv3d(&b, &w, policy, layer).unwrap();
                assert!(max_rel_err(fast.stacked().data(), slow.stacked().data()) <= 1e-6);
            }
        }
    }

    #[test]
    fn residual_fix_cases() {
        let mut rng = SeededRng::new(5);
        let st = random_block(&mut rng, 2, 4, 4);
        let src = random_block(&mut rng, 2, 4, 4);
        assert_eq!(residual_fix(&st, &src, &zero2d(2)).unwrap(), st);

        let mut k = Tensor::zeros(&[2, 2, 1, 1]).unwrap();
        k.data_mut()[0] = 1.0;
        k.data_mut()[3] = 1.0;
        let id = Conv2dWeights::new(k, Tensor::zeros(&[2]).unwrap(), 1, 0, 1).unwrap();
        let sum = residual_fix(&st, &src, &id).unwrap();
        assert_eq!(sum.stacked(), &st.stacked().add(src.stacked()).unwrap());

        let w = Conv2dWeights::same(
            rng.uniform_tensor(&[2, 2, 3, 3], 1.0),
            rng.uniform_tensor(&[2], 1.0),
            1,
        )
        .unwrap();
        let got = residual_fix(&st, &src, &w).unwrap();
        for i in 0..3 {
            let conv = reference::conv2d_loops(&src.frame(i), &w);
            let want: Vec<f32> = st
                .frame_data(i)
                .iter()
                .zip(conv.data())
                .map(|(a, b)| a + b)
                .collect();
            assert!(max_rel_err(got.frame_data(i), &want) <= 1e-6);
        }
        let other = random_block(&mut rng, 2, 4, 5);
        assert!(residual_fix(&st, &other, &w).is_err());
    }

    fn labelled_block(c: usize) -> TemporalBlock {
        // slot s carries value s
        TemporalBlock::from_stacked(Tensor::from_fn(&[3, c, 1, 1], |s| s as f32).unwrap()).unwrap()
    }

    #[test]
    fn shuffle_two_channel_fixture() {
        // slots [a0,a1,b0,b1,c0,c1] = [0,1,2,3,4,5]
        let s = temporal_shuffle(&labelled_block(2));
        assert_eq!(s.stacked().data(), &[0., 3., 1., 4., 2., 5.]);
        let back = temporal_shuffle_inverse(&s);
        assert_eq!(back.stacked().data(), &[0., 1., 2., 3., 4., 5.]);
    }

    #[test]
    fn shuffle_matches_reshape_transpose_flatten() {
        for c in [1, 2, 5, 64] {
            let b = labelled_block(c);
            let slots = b.stacked().reshape(&[3 * c]).unwrap();
            let via_tensor = slots
                .reshape(&[c, 3])
                .unwrap()
                .transpose2(0, 1)
                .unwrap()
                .flatten();
            assert_eq!(temporal_shuffle(&b).stacked().data(), via_tensor.data());
        }
    }

    #[test]
    fn shuffle_c64_source_counts() {
        let s = temporal_shuffle(&labelled_block(64));
        let mut counts = [0usize; 3];
        for &v in s.frame_data(0) {
            counts[v as usize / 64] += 1;
        }
        assert_eq!(counts, [22, 21, 21]);
    }

    #[test]
    fn shuffle_of_uniform_block_is_identity() {
        let b = TemporalBlock::from_stacked(Tensor::full(&[3, 4, 2, 2], 1.5f32).unwrap()).unwrap();
        assert_eq!(temporal_shuffle(&b), b);
    }

    #[test]
    fn shuffle_moves_planes_intact() {
        let mut rng = SeededRng::new(6);
        let b = random_block(&mut rng, 5, 3, 4);
        let s = temporal_shuffle(&b);
        let plane = 12;
        for out in 0..15 {
            let src = shuffle_source_slot(out, 5);
            assert_eq!(
                &s.stacked().data()[out * plane..(out + 1) * plane],
                &b.stacked().data()[src * plane..(src + 1) * plane]
            );
        }
        assert_eq!(temporal_shuffle(&temporal_shuffle_inverse(&b)), b);
    }

    #[test]
    fn forward_identity_kernels_without_shuffle() {
        let mut rng = SeededRng::new(7);
        let b = random_block(&mut rng, 3, 4, 4);
        let cfg = TemporalConfig {
            shuffle: false,
            ..Default::default()
        };
        let w = TemporalModuleWeights {
            conv3d: vec![identity3d(3); 3],
            res2d: vec![zero2d(3); 3],
        };
        assert_eq!(temporal_module_forward(&b, &w, &cfg).unwrap(), b);

        let cfg = TemporalConfig::default();
        let out = temporal_module_forward(&b, &w, &cfg).unwrap();
        assert_eq!(out, temporal_shuffle(&temporal_shuffle(&b)));
    }

    #[test]
    fn forward_matches_step_by_step_oracle() {
        let mut rng = SeededRng::new(8);
        for policy in [
            PaddingPolicy::Eq6Literal,
            PaddingPolicy::CyclicAll,
            PaddingPolicy::ZeroPad,
        ] {
            for num_layers in [1, 3, 5] {
                let cfg = TemporalConfig {
                    policy,
                    num_layers,
                    ..Default::default()
                };
                let b = random_block(&mut rng, 4, 5, 5);
                let w = random_tm(&mut rng, 4, &cfg);
                let got = temporal_module_forward(&b, &w, &cfg).unwrap();
                let want = reference::temporal_module_oracle(&b, &w, &cfg).unwrap();
                assert!(max_rel_err(got.stacked().data(), want.stacked().data()) <= 1e-5);
            }
        }
    }

    #[test]
    fn forward_rejects_bad_weights() {
        let mut rng = SeededRng::new(9);
        let b = random_block(&mut rng, 2, 3, 3);
        let cfg = TemporalConfig::default();
        let w = random_tm(
            &mut rng,
            2,
            &TemporalConfig {
                num_layers: 1,
                ..cfg
            },
        );
        assert!(matches!(
            temporal_module_forward(&b, &w, &cfg),
            Err(Error::Config(_))
        ));
        let w = random_tm(&mut rng, 3, &cfg);
        assert!(temporal_module_forward(&b, &w, &cfg).is_err());
        let w = random_tm(
            &mut rng,
            2,
            &TemporalConfig {
                num_layers: 5,
                ..cfg
            },
        );
        assert!(temporal_module_forward(
            &b,
            &w,
            &TemporalConfig {
                num_layers: 4,
                ..cfg
            }
        )
        .is_err());
    }

    #[test]
    fn residual_last_toggle() {
        let mut rng = SeededRng::new(10);
        let cfg = TemporalConfig {
            residual_last: false,
            ..Default::default()
        };
        let b = random_block(&mut rng, 2, 4, 4);
        let w = random_tm(&mut rng, 2, &cfg);
        assert_eq!(w.res2d.len(), 2);
        let got = temporal_module_forward(&b, &w, &cfg).unwrap();
        let want = reference::temporal_module_oracle(&b, &w, &cfg).unwrap();
        assert!(max_rel_err(got.stacked().data(), want.stacked().data()) <= 1e-5);
    }

    #[test]
    fn cyclic_equivariance() {
        let mut rng = SeededRng::new(11);
        let cfg = TemporalConfig {
            policy: PaddingPolicy::CyclicAll,
            shuffle: false,
            ..Default::default()
        };
        for _ in 0..5 {
            let b = random_block(&mut rng, 3, 4, 4);
            let w = random_tm(&mut rng, 3, &cfg);
            let rotated_out = temporal_module_forward(&b.rotate(1), &w, &cfg).unwrap();
            let out_rotated = temporal_module_forward(&b, &w, &cfg).unwrap().rotate(1);
            assert!(
                max_rel_err(rotated_out.stacked().data(), out_rotated.stacked().data()) <= 1e-6
            );
        }
    }
}
