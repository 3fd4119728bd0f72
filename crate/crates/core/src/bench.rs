//! Median-of-trials timing of fast paths against their naive counterparts.
//!
//! Every bench first checks that both sides produce the same result on the
//! same input, then times them on a single-threaded pool: 5 untimed warmup
//! runs, then `trials` timed runs, reporting the median.

use std::hint::black_box;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::media::FrameClip;
use crate::network::{init_weights, Network, NetworkConfig};
use crate::nn::Conv3dWeights;
use crate::reference::{naive_cyclic_conv3d, naive_shuffle, reorganize_windows};
use crate::rng::SeededRng;
use crate::temporal::{
    cyclic_expand, cyclic_windows, temporal_shuffle, tm_conv3d_layer, PaddingPolicy, TemporalBlock,
};
use crate::tensor::{max_abs_diff, max_rel_err};

pub const WARMUP: usize = 5;
pub const MIN_TRIALS: usize = 30;
/// Speedup the desk-scale acceptance requires of cyclic padding.
pub const PADDING_SPEEDUP_TARGET: f64 = 2.0;
/// Speedup reported by the original GPU measurement, for reference only.
pub const PADDING_SPEEDUP_REFERENCE: f64 = 5.0;
/// Largest allowed shuffle cost relative to a plain copy.
pub const SHUFFLE_COPY_LIMIT: f64 = 3.0;
/// Throughput reported by the original GPU measurement, for reference only.
pub const FORWARD_FPS_REFERENCE: f64 = 50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub op: String,
    pub shape: Vec<usize>,
    pub trials: usize,
    pub fast_median_ns: u64,
    /// What the fast path is compared with.
    pub baseline: String,
    pub baseline_median_ns: u64,
    /// Relative error between the two sides on the benchmark input.
    pub equivalence_err: f64,
    pub equivalent: bool,
}

impl BenchReport {
    /// `baseline / fast`; above 1 means the fast path wins.
    pub fn speedup(&self) -> f64 {
        self.baseline_median_ns as f64 / self.fast_median_ns.max(1) as f64
    }

    /// Runs per second of the fast path.
    pub fn fast_per_second(&self) -> f64 {
        1e9 / self.fast_median_ns.max(1) as f64
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "op": self.op,
            "shape": self.shape,
            "trials": self.trials,
            "fast_median_ns": self.fast_median_ns,
            "baseline": self.baseline,
            "baseline_median_ns": self.baseline_median_ns,
            "speedup": self.speedup(),
            "equivalence_err": self.equivalence_err,
            "equivalent": self.equivalent,
        })
    }
}

/// Median wall time of `f` in nanoseconds after [`WARMUP`] untimed runs.
pub fn median_ns<R>(trials: usize, mut f: impl FnMut() -> R) -> u64 {
    for _ in 0..WARMUP {
        black_box(f());
    }
    let mut times: Vec<u64> = (0..trials)
        .map(|_| {
            let t = Instant::now();
            black_box(f());
            t.elapsed().as_nanos() as u64
        })
        .collect();
    times.sort_unstable();
    let n = times.len();
    if n == 0 {
        0
    } else if n % 2 == 1 {
        times[n / 2]
    } else {
        (times[n / 2 - 1] + times[n / 2]) / 2
    }
}

fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn check_trials(trials: usize) -> Result<()> {
    if trials < MIN_TRIALS {
        return Err(Error::Invalid(format!(
            "at least {MIN_TRIALS} trials are required, got {trials}"
        )));
    }
    Ok(())
}

fn random_block(seed: u64, c: usize, h: usize, w: usize) -> TemporalBlock {
    let mut rng = SeededRng::new(seed);
    TemporalBlock::from_stacked(rng.uniform_tensor(&[3, c, h, w], 1.0)).expect("valid dims")
}

/// Cyclic window assembly (repeat + three slices) against the element-wise
/// window reorganization.
pub fn bench_padding(c: usize, h: usize, w: usize, trials: usize) -> Result<BenchReport> {
    check_trials(trials)?;
    let block = random_block(1, c, h, w);
    let policy = PaddingPolicy::CyclicAll;

    let expanded = cyclic_expand(&block);
    let fast = cyclic_windows(&expanded);
    let naive = reorganize_windows(&block, policy, 1);
    let plane = h * w;
    let mut err = 0.0f64;
    for (i, win) in naive.iter().enumerate() {
        for (t, frame) in fast[i].iter().enumerate() {
            for ci in 0..c {
                let a = &frame[ci * plane..(ci + 1) * plane];
                let b = &win.data()[(ci * 3 + t) * plane..(ci * 3 + t + 1) * plane];
                err = err.max(max_abs_diff(a, b));
            }
        }
    }

    let (fast_ns, naive_ns) = single_threaded(|| {
        let f = median_ns(trials, || {
            let e = cyclic_expand(&block);
            let windows = cyclic_windows(&e);
            black_box(windows[2][2].len());
            e
        });
        let n = median_ns(trials, || reorganize_windows(&block, policy, 1));
        (f, n)
    })?;
    Ok(BenchReport {
        op: "cyclic-pad".into(),
        shape: vec![c, h, w],
        trials,
        fast_median_ns: fast_ns,
        baseline: "naive-reorganization".into(),
        baseline_median_ns: naive_ns,
        equivalence_err: err,
        equivalent: err == 0.0,
    })
}

/// Temporal shuffle against a plain copy of the same data. Equivalence is
/// checked against the slot-by-slot enumeration.
pub fn bench_shuffle(c: usize, h: usize, w: usize, trials: usize) -> Result<BenchReport> {
    check_trials(trials)?;
    let block = random_block(2, c, h, w);
    let a = temporal_shuffle(&block);
    let b = naive_shuffle(&block);
    let err = max_abs_diff(a.stacked().data(), b.stacked().data());
    let (fast_ns, copy_ns) = single_threaded(|| {
        let f = median_ns(trials, || temporal_shuffle(&block));
        let p = median_ns(trials, || block.stacked().data().to_vec());
        (f, p)
    })?;
    Ok(BenchReport {
        op: "shuffle".into(),
        shape: vec![c, h, w],
        trials,
        fast_median_ns: fast_ns,
        baseline: "plain-copy".into(),
        baseline_median_ns: copy_ns,
        equivalence_err: err,
        equivalent: err == 0.0,
    })
}

/// One cyclic temporal conv layer against reorganization plus loop convolution.
pub fn bench_conv3d(c: usize, h: usize, w: usize, trials: usize) -> Result<BenchReport> {
    check_trials(trials)?;
    let block = random_block(3, c, h, w);
    let mut rng = SeededRng::new(4);
    let bound = (6.0 / (27 * c) as f64).sqrt();
    let weights = Conv3dWeights::new(
        rng.uniform_tensor(&[c, c, 3, 3, 3], bound),
        rng.uniform_tensor(&[c], 0.1),
    )?;
    let policy = PaddingPolicy::CyclicAll;
    let fast = tm_conv3d_layer(&block, &weights, policy, 1)?;
    let naive = naive_cyclic_conv3d(&block, &weights, policy, 1)?;
    let err = max_rel_err(fast.stacked().data(), naive.stacked().data());
    let (fast_ns, naive_ns) = single_threaded(|| {
        let f = median_ns(trials, || tm_conv3d_layer(&block, &weights, policy, 1));
        let n = median_ns(trials, || naive_cyclic_conv3d(&block, &weights, policy, 1));
        (f, n)
    })?;
    Ok(BenchReport {
        op: "conv3d".into(),
        shape: vec![c, h, w],
        trials,
        fast_median_ns: fast_ns,
        baseline: "naive-reorganization+loops".into(),
        baseline_median_ns: naive_ns,
        equivalence_err: err,
        equivalent: err <= 1e-6,
    })
}

/// Full forward pass of `cfg` on one random clip. The baseline is the same
/// pass on the default multi-threaded pool; equivalence is bit-identity of
/// the two outputs. In sliding-window inference each clip yields one output
/// frame, so [`BenchReport::fast_per_second`] reads as frames per second.
pub fn bench_forward(cfg: &NetworkConfig, trials: usize) -> Result<BenchReport> {
    check_trials(trials)?;
    let store = init_weights(cfg, 5)?;
    let net = Network::from_store(&store, cfg)?;
    let mut rng = SeededRng::new(6);
    let s = cfg.input_size;
    let clip = FrameClip::from_frames([(); 3].map(|_| rng.interval_tensor(&[3, s, s], 0.0, 1.0)))?;
    let single = single_threaded(|| net.forward(&clip))??;
    let multi = net.forward(&clip)?;
    let mut err = 0.0f64;
    for (a, b) in single.stages.iter().zip(&multi.stages) {
        for (x, y) in a.iter().zip(b) {
            err = err.max(max_abs_diff(x.data(), y.data()));
        }
    }
    let fast_ns = single_threaded(|| median_ns(trials, || net.forward(&clip)))?;
    let multi_ns = median_ns(trials, || net.forward(&clip));
    Ok(BenchReport {
        op: "forward".into(),
        shape: vec![3, s, s],
        trials,
        fast_median_ns: fast_ns,
        baseline: "forward-multithreaded".into(),
        baseline_median_ns: multi_ns,
        equivalence_err: err,
        equivalent: err == 0.0,
    })
}

/// Parses `CxHxW` (also accepts `,` separators).
pub fn parse_shape(spec: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = spec.split(['x', 'X', ',']).collect();
    if parts.len() != 3 {
        return Err(Error::Invalid(format!(
            "shape `{spec}` must look like CxHxW"
        )));
    }
    let mut out = [0usize; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .trim()
            .parse()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::Invalid(format!("bad dimension `{p}` in shape `{spec}`")))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_shape_parsing() {
        assert_eq!(parse_shape("64x32x16").unwrap(), [64, 32, 16]);
        assert_eq!(parse_shape("1,2,3").unwrap(), [1, 2, 3]);
        assert!(parse_shape("0x2x2").is_err());
        assert!(parse_shape("2x2").is_err());
        let mut k = 0;
        median_ns(31, || {
            k += 1;
        });
        assert_eq!(k, 36);
    }

    #[test]
    fn reports_are_equivalent_on_small_shapes() {
        assert!(bench_padding(4, 8, 8, 5).is_err());
        for r in [
            bench_padding(4, 8, 8, 30).unwrap(),
            bench_shuffle(4, 8, 8, 30).unwrap(),
            bench_conv3d(2, 6, 6, 30).unwrap(),
            bench_forward(&NetworkConfig::toy(32), 30).unwrap(),
        ] {
            assert!(r.equivalent, "{r:?}");
            assert!(r.fast_median_ns > 0);
            assert_eq!(r.to_json()["trials"], 30);
        }
    }
}
