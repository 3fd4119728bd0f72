use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use stvs_core::bench::{
    bench_conv3d, bench_forward, bench_padding, bench_shuffle, parse_shape, FORWARD_FPS_REFERENCE,
    MIN_TRIALS, PADDING_SPEEDUP_REFERENCE, PADDING_SPEEDUP_TARGET, SHUFFLE_COPY_LIMIT,
};
use stvs_core::media::{list_images, resize_to};
use stvs_core::selftest::run_selftest;
use stvs_core::train::{write_curve_csv, GRADCHECK_OPS};
use stvs_core::{
    clip_iter, evaluate_dataset, fd_gradcheck, init_weights, load_weights, save_weights,
    tm_overfit_demo, write_gray, BenchReport, Error, Network, NetworkConfig,
};

#[derive(Parser)]
#[command(name = "stvs", version, about = "Spatiotemporal video saliency engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Predict saliency maps for every 3-frame clip in a frame directory.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        /// Network config as JSON.
        #[arg(long)]
        config: PathBuf,
        /// Directory of .ppm/.pgm frames, or of one such directory per sequence.
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Frames skipped between clip neighbours, 0..=6.
        #[arg(long, default_value_t = 0, value_parser = clap::builder::RangedU64ValueParser::<usize>::new().range(0..=6))]
        interval: usize,
        /// Also write every decoder side output under `stage{d}/`.
        #[arg(long)]
        all_stages: bool,
    },
    /// Score predictions against ground-truth masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// CSV report path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Time a fast path against its baseline.
    Bench {
        #[arg(long, value_enum)]
        op: BenchOp,
        /// `CxHxW`; for `forward` only H is used, as the toy network's input size.
        #[arg(long, default_value = "64x64x64")]
        shape: String,
        #[arg(long, default_value_t = MIN_TRIALS)]
        trials: usize,
        /// Network config for `forward`; defaults to the toy network.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// Op name, or `all`.
        #[arg(long)]
        op: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every oracle-equivalence suite.
    Selftest,
    /// Overfit a temporal module on a fixed toy batch.
    TrainToy {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write seeded initial weights for a config.
    Init {
        #[arg(long)]
        out: PathBuf,
        /// Network config as JSON.
        #[arg(long, conflicts_with = "toy")]
        config: Option<PathBuf>,
        /// Use the toy network at this input size.
        #[arg(long)]
        toy: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the config used.
        #[arg(long)]
        write_config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchOp {
    CyclicPad,
    Shuffle,
    Conv3d,
    Forward,
}

enum Failure {
    Usage(String),
    Check(String),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Infer {
            weights,
            config,
            frames,
            out,
            interval,
            all_stages,
        } => infer(&weights, &config, &frames, &out, interval, all_stages),
        Command::Eval { pred, gt, out } => eval(&pred, &gt, &out),
        Command::Bench {
            op,
            shape,
            trials,
            config,
        } => bench(op, &shape, trials, config.as_deref()),
        Command::Gradcheck { op, seed } => gradcheck(&op, seed),
        Command::Selftest => selftest(),
        Command::TrainToy { seed, steps, out } => train_toy(seed, steps, &out),
        Command::Init {
            out,
            config,
            toy,
            seed,
            write_config,
        } => init(&out, config.as_deref(), toy, seed, write_config.as_deref()),
    }
}

fn read_config(path: &Path) -> Result<NetworkConfig, Failure> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    NetworkConfig::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

/// Frame directories to process, paired with their output subdirectory.
fn sequences(frames: &Path) -> anyhow::Result<Vec<(PathBuf, PathBuf)>> {
    if !list_images(frames)?.is_empty() {
        return Ok(vec![(frames.to_path_buf(), PathBuf::new())]);
    }
    let mut seqs = Vec::new();
    for entry in
        std::fs::read_dir(frames).with_context(|| format!("reading {}", frames.display()))?
    {
        let path = entry?.path();
        if path.is_dir() && !list_images(&path)?.is_empty() {
            let name = PathBuf::from(path.file_name().expect("directory entry"));
            seqs.push((path, name));
        }
    }
    seqs.sort();
    if seqs.is_empty() {
        bail!("no .ppm/.pgm frames under {}", frames.display());
    }
    Ok(seqs)
}

fn infer(
    weights: &Path,
    config: &Path,
    frames: &Path,
    out: &Path,
    interval: usize,
    all_stages: bool,
) -> Outcome {
    let cfg = read_config(config)?;
    let store = load_weights(weights).with_context(|| format!("loading {}", weights.display()))?;
    let net = Network::from_store(&store, &cfg)?;
    let s = cfg.input_size;
    let mut written = 0usize;
    for (dir, sub) in sequences(frames)? {
        let target = out.join(&sub);
        std::fs::create_dir_all(&target)?;
        for clip in clip_iter(&dir, interval)? {
            let clip = clip?;
            let (h, w) = (clip.height(), clip.width());
            let stem = clip
                .middle_stem()
                .unwrap_or_else(|| format!("{:05}", clip.indices[1]));
            let result = net.forward(&clip.resized(s, s)?)?;
            write_gray(
                target.join(format!("{stem}.pgm")),
                &resize_to(result.prediction(), h, w)?,
            )?;
            if all_stages {
                for d in 1..=result.stages.len() {
                    let stage_dir = target.join(format!("stage{d}"));
                    std::fs::create_dir_all(&stage_dir)?;
                    write_gray(
                        stage_dir.join(format!("{stem}.pgm")),
                        &resize_to(&result.stage(d)[1], h, w)?,
                    )?;
                }
            }
            written += 1;
        }
    }
    println!("wrote {written} saliency maps to {}", out.display());
    Ok(())
}

fn eval(pred: &Path, gt: &Path, out: &Path) -> Outcome {
    let report = evaluate_dataset(pred, gt)?;
    std::fs::write(out, report.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    print!("{}", report.to_table());
    for m in &report.missing {
        eprintln!("missing {:?} for {}/{}", m.missing, m.sequence, m.stem);
    }
    Ok(())
}

fn bench(op: BenchOp, shape: &str, trials: usize, config: Option<&Path>) -> Outcome {
    let [c, h, w] = parse_shape(shape).map_err(|e| Failure::Usage(e.to_string()))?;
    if trials < MIN_TRIALS {
        return Err(Failure::Usage(format!(
            "--trials must be at least {MIN_TRIALS}"
        )));
    }
    let report: BenchReport = match op {
        BenchOp::CyclicPad => bench_padding(c, h, w, trials)?,
        BenchOp::Shuffle => bench_shuffle(c, h, w, trials)?,
        BenchOp::Conv3d => bench_conv3d(c, h, w, trials)?,
        BenchOp::Forward => {
            let cfg = match config {
                Some(p) => read_config(p)?,
                None => NetworkConfig::toy(h),
            };
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            bench_forward(&cfg, trials)?
        }
    };
    let mut json = report.to_json();
    match op {
        BenchOp::CyclicPad => {
            json["target_speedup"] = PADDING_SPEEDUP_TARGET.into();
            json["reference_speedup"] = PADDING_SPEEDUP_REFERENCE.into();
        }
        BenchOp::Shuffle => {
            json["copy_ratio"] = (1.0 / report.speedup()).into();
            json["copy_ratio_limit"] = SHUFFLE_COPY_LIMIT.into();
        }
        BenchOp::Forward => {
            json["frames_per_second"] = report.fast_per_second().into();
            json["reference_fps"] = FORWARD_FPS_REFERENCE.into();
        }
        BenchOp::Conv3d => {}
    }
    println!("{}", serde_json::to_string_pretty(&json).expect("json"));
    if !report.equivalent {
        return Err(Failure::Check(format!(
            "{} disagrees with its baseline (err {:e})",
            report.op, report.equivalence_err
        )));
    }
    Ok(())
}

fn gradcheck(op: &str, seed: u64) -> Outcome {
    let ops: Vec<&str> = if op == "all" {
        GRADCHECK_OPS.to_vec()
    } else {
        vec![op]
    };
    let mut failed = Vec::new();
    for op in ops {
        let r = match fd_gradcheck(op, seed) {
            Ok(r) => r,
            Err(Error::Unsupported(name)) => {
                return Err(Failure::Usage(format!(
                    "unknown op `{name}`; expected one of {} or all",
                    GRADCHECK_OPS.join(", ")
                )))
            }
            Err(e) => return Err(e.into()),
        };
        println!(
            "{:<16} seed {:<4} rel {:.3e} abs {:.3e} over {} coordinates  {}",
            r.op,
            r.seed,
            r.max_rel_err,
            r.max_abs_err,
            r.coordinates,
            if r.pass { "ok" } else { "FAIL" }
        );
        if !r.pass {
            failed.push(r.op);
        }
    }
    if !failed.is_empty() {
        return Err(Failure::Check(format!(
            "gradient mismatch in {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

fn selftest() -> Outcome {
    let results = run_selftest();
    for r in &results {
        println!(
            "[{}] {:<44} worst {:.2e}  {}",
            if r.pass { "ok" } else { "FAIL" },
            r.name,
            r.worst,
            r.detail
        );
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(Failure::Check(format!(
            "{failed} of {} suites failed",
            results.len()
        )));
    }
    Ok(())
}

fn train_toy(seed: u64, steps: usize, out: &Path) -> Outcome {
    if steps == 0 {
        return Err(Failure::Usage("--steps must be positive".into()));
    }
    let curve = tm_overfit_demo(seed, steps)?;
    write_curve_csv(out, &curve)?;
    let (first, last) = (curve[0], curve[curve.len() - 1]);
    println!(
        "steps {steps}  initial loss {first:.6e}  final loss {last:.6e}  ratio {:.4}",
        last / first
    );
    Ok(())
}

fn init(
    out: &Path,
    config: Option<&Path>,
    toy: Option<usize>,
    seed: u64,
    write_config: Option<&Path>,
) -> Outcome {
    let cfg = match (config, toy) {
        (Some(p), _) => read_config(p)?,
        (None, Some(s)) => NetworkConfig::toy(s),
        (None, None) => {
            return Err(Failure::Usage(
                "one of --config or --toy is required".into(),
            ))
        }
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let store = init_weights(&cfg, seed)?;
    save_weights(&store, out)?;
    if let Some(p) = write_config {
        std::fs::write(p, cfg.to_json()).with_context(|| format!("writing {}", p.display()))?;
    }
    println!(
        "{} tensors, {} parameters -> {}",
        store.len(),
        store.num_parameters(),
        out.display()
    );
    Ok(())
}
