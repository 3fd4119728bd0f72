//! Oracle-equivalence suites runnable from a release build.

use rayon::prelude::*;

use crate::error::Result;
use crate::nn::{conv2d, resize_bilinear, Conv2dWeights, Conv3dWeights};
use crate::reference::{
    bilinear_formula, conv2d_loops, naive_cyclic_conv3d, naive_shuffle, temporal_module_oracle,
};
use crate::rng::SeededRng;
use crate::store::WeightStore;
use crate::temporal::{
    temporal_module_forward, temporal_shuffle, temporal_shuffle_inverse, tm_conv3d_layer,
    PaddingPolicy, TemporalBlock, TemporalConfig, TemporalModuleWeights,
};
use crate::tensor::{max_abs_diff, max_rel_err, Tensor};
use crate::train::{fd_gradcheck, GRADCHECK_OPS};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    /// Worst error observed, with the unit implied by the check.
    pub worst: f64,
    pub detail: String,
}

const POLICIES: [PaddingPolicy; 3] = [
    PaddingPolicy::Eq6Literal,
    PaddingPolicy::CyclicAll,
    PaddingPolicy::ZeroPad,
];

fn block(rng: &mut SeededRng, c: usize, h: usize, w: usize) -> TemporalBlock {
    TemporalBlock::from_stacked(rng.uniform_tensor(&[3, c, h, w], 1.0)).expect("dims")
}

fn conv2d_suite() -> Result<CheckResult> {
    let mut rng = SeededRng::new(10);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let (c, o, h, w) = (
            rng.range(1, 6),
            rng.range(1, 6),
            rng.range(1, 12),
            rng.range(1, 12),
        );
        let k = [1, 3, 5][trial % 3];
        let dil = rng.range(1, 3);
        let wts = Conv2dWeights::same(
            rng.uniform_tensor(&[o, c, k, k], 1.0),
            rng.uniform_tensor(&[o], 1.0),
            dil,
        )?;
        let x: Tensor = rng.uniform_tensor(&[c, h, w], 1.0);
        worst = worst.max(max_rel_err(
            conv2d(&x, &wts)?.data(),
            conv2d_loops(&x, &wts).data(),
        ));
    }
    Ok(CheckResult {
        name: "conv2d vs loops".into(),
        pass: worst <= 1e-5,
        worst,
        detail: "20 random shapes, kernels 1/3/5, dilation 1-3".into(),
    })
}

fn conv3d_suite() -> Result<CheckResult> {
    let mut rng = SeededRng::new(11);
    let mut worst = 0.0f64;
    for trial in 0..15 {
        let (c, h) = (rng.range(1, 8), rng.range(1, 12));
        let w = Conv3dWeights::new(
            rng.uniform_tensor(&[c, c, 3, 3, 3], 0.5),
            rng.uniform_tensor(&[c], 0.5),
        )?;
        let b = block(&mut rng, c, h, h);
        let policy = POLICIES[trial % 3];
        for layer in 1..=3 {
            let fast = tm_conv3d_layer(&b, &w, policy, layer)?;
            let naive = naive_cyclic_conv3d(&b, &w, policy, layer)?;
            worst = worst.max(max_rel_err(fast.stacked().data(), naive.stacked().data()));
        }
    }
    Ok(CheckResult {
        name: "temporal conv3d vs reorganization".into(),
        pass: worst <= 1e-6,
        worst,
        detail: "15 blocks x 3 layers over all padding policies".into(),
    })
}

fn shuffle_suite() -> Result<CheckResult> {
    let mut rng = SeededRng::new(12);
    let mut worst = 0.0f64;
    for _ in 0..30 {
        let (c, h, w) = (rng.range(1, 16), rng.range(1, 8), rng.range(1, 8));
        let b = block(&mut rng, c, h, w);
        let s = temporal_shuffle(&b);
        worst = worst.max(max_abs_diff(
            s.stacked().data(),
            naive_shuffle(&b).stacked().data(),
        ));
        worst = worst.max(max_abs_diff(
            temporal_shuffle_inverse(&s).stacked().data(),
            b.stacked().data(),
        ));
    }
    Ok(CheckResult {
        name: "shuffle vs enumeration".into(),
        pass: worst == 0.0,
        worst,
        detail: "30 blocks; shuffle and inverse round trip, bit-exact".into(),
    })
}

fn module_suite() -> Result<CheckResult> {
    let mut rng = SeededRng::new(13);
    let mut worst = 0.0f64;
    for (k, layers) in [1, 3, 5].into_iter().enumerate() {
        for policy in POLICIES {
            let c = 3;
            let cfg = TemporalConfig {
                policy,
                num_layers: layers,
                shuffle: true,
                residual_last: k != 1,
            };
            let w = TemporalModuleWeights {
                conv3d: (0..layers)
                    .map(|_| {
                        Conv3dWeights::new(
                            rng.uniform_tensor(&[c, c, 3, 3, 3], 0.3),
                            rng.uniform_tensor(&[c], 0.3),
                        )
                    })
                    .collect::<Result<_>>()?,
                res2d: (0..cfg.num_residuals())
                    .map(|_| {
                        Conv2dWeights::same(
                            rng.uniform_tensor(&[c, c, 3, 3], 0.3),
                            rng.uniform_tensor(&[c], 0.3),
                            1,
                        )
                    })
                    .collect::<Result<_>>()?,
            };
            let b = block(&mut rng, c, 6, 5);
            let fast = temporal_module_forward(&b, &w, &cfg)?;
            let slow = temporal_module_oracle(&b, &w, &cfg)?;
            worst = worst.max(max_rel_err(fast.stacked().data(), slow.stacked().data()));
        }
    }
    Ok(CheckResult {
        name: "temporal module vs step-by-step oracle".into(),
        pass: worst <= 1e-5,
        worst,
        detail: "1/3/5 layers x 3 padding policies".into(),
    })
}

fn bilinear_suite() -> Result<CheckResult> {
    let mut rng = SeededRng::new(14);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (h, w) = (rng.range(1, 16), rng.range(1, 16));
        let (oh, ow) = (rng.range(1, 32), rng.range(1, 32));
        let x: Tensor<f64> = rng.uniform_tensor(&[2, h, w], 1.0);
        worst = worst.max(max_abs_diff(
            resize_bilinear(&x, oh, ow)?.data(),
            bilinear_formula(&x, oh, ow).data(),
        ));
    }
    Ok(CheckResult {
        name: "bilinear resize vs formula".into(),
        pass: worst <= 1e-12,
        worst,
        detail: "10 random up/down resizes in f64".into(),
    })
}

fn gradient_suite() -> Result<CheckResult> {
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for op in GRADCHECK_OPS {
        for seed in 0..5 {
            let r = fd_gradcheck(op, seed)?;
            worst = worst.max(r.max_rel_err);
            if !r.pass {
                failed.push(format!("{op}/{seed}"));
            }
        }
    }
    Ok(CheckResult {
        name: "analytic gradients vs central differences".into(),
        pass: failed.is_empty(),
        worst,
        detail: if failed.is_empty() {
            format!("{} ops x 5 seeds", GRADCHECK_OPS.len())
        } else {
            format!("failed: {}", failed.join(", "))
        },
    })
}

fn store_suite() -> Result<CheckResult> {
    let mut rng = SeededRng::new(15);
    let mut s = WeightStore::new();
    for i in 0..20 {
        let n = rng.range(1, 3);
        let dims: Vec<usize> = (0..n).map(|_| rng.range(1, 5)).collect();
        s.insert(format!("t{i:02}"), rng.uniform_tensor(&dims, 1.0))?;
    }
    let back = WeightStore::from_bytes(&s.to_bytes())?;
    let mut bad = s.to_bytes();
    bad[0] = b'x';
    let rejected = WeightStore::from_bytes(&bad).is_err();
    let pass = back == s && rejected;
    Ok(CheckResult {
        name: "weight file round trip".into(),
        pass,
        worst: if pass { 0.0 } else { 1.0 },
        detail: "20 tensors; corrupted magic rejected".into(),
    })
}

type Suite = fn() -> Result<CheckResult>;

const SUITES: [(&str, Suite); 7] = [
    ("conv2d", conv2d_suite),
    ("conv3d", conv3d_suite),
    ("shuffle", shuffle_suite),
    ("temporal-module", module_suite),
    ("bilinear", bilinear_suite),
    ("gradients", gradient_suite),
    ("store", store_suite),
];

/// Runs every suite (in parallel) and returns the results in a fixed order.
pub fn run_selftest() -> Vec<CheckResult> {
    SUITES
        .par_iter()
        .map(|(name, suite)| {
            suite().unwrap_or_else(|e| CheckResult {
                name: name.to_string(),
                pass: false,
                worst: f64::INFINITY,
                detail: format!("error: {e}"),
            })
        })
        .collect()
}
