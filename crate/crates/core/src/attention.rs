//! Multi-scale dilated attention over the deepest encoder features.

use crate::error::{shape_err, Result};
use crate::nn::{conv2d, upsample, Conv2dWeights, UpsampleMode};
use crate::tensor::{Scalar, Tensor};
use crate::trace::{OpKind, Tracer};

/// Dilation of each attention branch. A nominal dilation of 0 is read as a
/// plain convolution, i.e. dilation 1.
pub const ATTENTION_DILATIONS: [usize; 4] = [1, 2, 4, 6];

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T = f32> {
    /// One 3x3 same-padded conv per entry of [`ATTENTION_DILATIONS`].
    pub branches: Vec<Conv2dWeights<T>>,
    /// 1x1 conv from the concatenated branch outputs to the attention channels.
    pub fuse: Conv2dWeights<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn out_channels(&self) -> usize {
        self.fuse.out_channels()
    }
}

/// `A = relu(fuse(concat_d(branch_d(f5))))`.
pub fn attention_forward<T: Scalar>(f5: &Tensor<T>, w: &AttentionWeights<T>) -> Result<Tensor<T>> {
    attention_forward_traced(f5, w, &Tracer::disabled(), "attention")
}

pub fn attention_forward_traced<T: Scalar>(
    f5: &Tensor<T>,
    w: &AttentionWeights<T>,
    tracer: &Tracer,
    scope: &str,
) -> Result<Tensor<T>> {
    if w.branches.len() != ATTENTION_DILATIONS.len() {
        return shape_err(format!(
            "attention needs 4 branches, got {}",
            w.branches.len()
        ));
    }
    let outs: Vec<Tensor<T>> = w
        .branches
        .iter()
        .map(|b| conv2d(f5, b))
        .collect::<Result<_>>()?;
    tracer.record_n(scope, OpKind::Conv2d, outs.len());
    if outs.iter().any(|o| o.dims()[1..] != f5.dims()[1..]) {
        return shape_err("attention branch changed the spatial size");
    }
    let refs: Vec<&Tensor<T>> = outs.iter().collect();
    let cat = Tensor::concat(&refs, 0)?;
    tracer.record(scope, OpKind::Concat);
    let fused = conv2d(&cat, &w.fuse)?;
    tracer.record(scope, OpKind::Conv2d);
    tracer.record(scope, OpKind::Relu);
    Ok(fused.relu())
}

/// `feat ⊗ U(a)`: bilinear-upsample the attention map to the feature size and
/// append it after the feature channels.
pub fn attention_inject<T: Scalar>(feat: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    attention_inject_with(feat, a, UpsampleMode::Bilinear)
}

pub fn attention_inject_with<T: Scalar>(
    feat: &Tensor<T>,
    a: &Tensor<T>,
    mode: UpsampleMode,
) -> Result<Tensor<T>> {
    if feat.rank() != 3 || a.rank() != 3 {
        return shape_err("attention_inject expects [C,H,W] tensors");
    }
    let (h, w) = (feat.dims()[1], feat.dims()[2]);
    if a.dims()[1] > h || a.dims()[2] > w {
        return shape_err(format!(
            "attention map {:?} is larger than the target features {:?}",
            a.dims(),
            feat.dims()
        ));
    }
    let up = if a.dims()[1] == h && a.dims()[2] == w {
        a.clone()
    } else {
        upsample(a, h, w, mode)?
    };
    Tensor::concat(&[feat, &up], 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::upsample_bilinear;
    use crate::reference::conv2d_loops;
    use crate::rng::SeededRng;
    use crate::tensor::max_rel_err;

    fn random_weights(
        rng: &mut SeededRng,
        c5: usize,
        branch: usize,
        ca: usize,
    ) -> AttentionWeights {
        AttentionWeights {
            branches: ATTENTION_DILATIONS
                .iter()
                .map(|&d| {
                    Conv2dWeights::same(
                        rng.uniform_tensor(&[branch, c5, 3, 3], 0.5),
                        rng.uniform_tensor(&[branch], 0.5),
                        d,
                    )
                    .unwrap()
                })
                .collect(),
            fuse: Conv2dWeights::same(
                rng.uniform_tensor(&[ca, 4 * branch, 1, 1], 0.5),
                rng.uniform_tensor(&[ca], 0.5),
                1,
            )
            .unwrap(),
        }
    }

    #[test]
    fn zero_input_gives_bias_constant() {
        let mut rng = SeededRng::new(1);
        let w = random_weights(&mut rng, 3, 2, 4);
        let a = attention_forward(&Tensor::zeros(&[3, 5, 5]).unwrap(), &w).unwrap();
        for ch in 0..4 {
            let p = &a.data()[ch * 25..(ch + 1) * 25];
            assert!(p.iter().all(|&v| v == p[0]));
        }
    }

    #[test]
    fn zero_branches_identity_fuse() {
        let c = 2;
        let branches = ATTENTION_DILATIONS
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                Conv2dWeights::same(
                    Tensor::zeros(&[c, 3, 3, 3]).unwrap(),
                    Tensor::full(&[c], 0.1 * (i + 1) as f32).unwrap(),
                    d,
                )
                .unwrap()
            })
            .collect();
        // fuse picks branch-0 channels
        let mut k = Tensor::zeros(&[c, 4 * c, 1, 1]).unwrap();
        for o in 0..c {
            k.data_mut()[o * 4 * c + o] = 1.0;
        }
        let w = AttentionWeights {
            branches,
            fuse: Conv2dWeights::same(k, Tensor::zeros(&[c]).unwrap(), 1).unwrap(),
        };
        let mut rng = SeededRng::new(2);
        let a = attention_forward(&rng.uniform_tensor(&[3, 4, 4], 1.0), &w).unwrap();
        assert!(a.data().iter().all(|&v| (v - 0.1).abs() < 1e-7));
    }

    #[test]
    fn matches_composed_oracle_and_keeps_spatial_size() {
        let mut rng = SeededRng::new(3);
        for hw in [1, 4, 7, 16] {
            let w = random_weights(&mut rng, 4, 3, 5);
            let x = rng.uniform_tensor(&[4, hw, hw], 1.0);
            let a = attention_forward(&x, &w).unwrap();
            assert_eq!(a.dims(), &[5, hw, hw]);
            let parts: Vec<Tensor> = w.branches.iter().map(|b| conv2d_loops(&x, b)).collect();
            let refs: Vec<&Tensor> = parts.iter().collect();
            let want = conv2d_loops(&Tensor::concat(&refs, 0).unwrap(), &w.fuse).relu();
            assert!(max_rel_err(a.data(), want.data()) <= 1e-5);
        }
    }

    #[test]
    fn channel_mismatch_is_error() {
        let mut rng = SeededRng::new(4);
        let w = random_weights(&mut rng, 4, 3, 5);
        assert!(attention_forward(&Tensor::zeros(&[3, 4, 4]).unwrap(), &w).is_err());
    }

    #[test]
    fn inject_cases() {
        let mut rng = SeededRng::new(5);
        let feat = rng.uniform_tensor(&[3, 16, 16], 1.0);
        let a = Tensor::full(&[2, 8, 8], 0.75f32).unwrap();
        let out = attention_inject(&feat, &a).unwrap();
        assert_eq!(out.dims(), &[5, 16, 16]);
        assert_eq!(&out.data()[..3 * 256], feat.data());
        assert!(out.data()[3 * 256..].iter().all(|&v| v == 0.75));

        let a = rng.uniform_tensor(&[2, 8, 8], 1.0);
        let out = attention_inject(&feat, &a).unwrap();
        let want = Tensor::concat(&[&feat, &upsample_bilinear(&a, 16, 16).unwrap()], 0).unwrap();
        assert_eq!(out, want);

        let same = rng.uniform_tensor(&[1, 16, 16], 1.0);
        assert_eq!(
            attention_inject(&feat, &same).unwrap(),
            Tensor::concat(&[&feat, &same], 0).unwrap()
        );
        assert!(attention_inject(&Tensor::<f32>::zeros(&[1, 4, 4]).unwrap(), &a).is_err());
    }
}
