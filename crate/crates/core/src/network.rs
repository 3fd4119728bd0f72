//! Network assembly: a shared-weight UNet encoder per frame, multi-scale
//! attention from the deepest features, and a coarse-to-fine decoder with one
//! temporal module per stage and recurrent features passed to the next finer
//! stage.
//!
//! Stage numbering follows resolution: stage 1 is the finest (full input
//! resolution) and stage 5 the coarsest (1/16). Decoding runs 5 → 1, and the
//! recurrent input of stage `d` comes from stage `d + 1`.
//!
//! Weight names are dotted paths:
//!
//! ```text
//! encoder.s{k}.conv{1,2}.{kernel,bias}            k = 1..5
//! attention.branch_d{1,2,4,6}.{kernel,bias}
//! attention.fuse.{kernel,bias}
//! decoder.s{d}.conv_a.{kernel,bias}              d = 1..5
//! decoder.s{d}.conv_b.{kernel,bias}
//! decoder.s{d}.tm.conv3d_{n}.{kernel,bias}       n = 1..num_tm_convs
//! decoder.s{d}.tm.res2d_{n}.{kernel,bias}
//! decoder.s{d}.side.{kernel,bias}
//! ```

use serde::{Deserialize, Serialize};

use crate::attention::{attention_forward_traced, AttentionWeights, ATTENTION_DILATIONS};
use crate::error::{shape_err, Error, Result};
use crate::media::FrameClip;
use crate::nn::{conv2d, maxpool2, upsample, Conv2dWeights, Conv3dWeights, UpsampleMode};
use crate::rng::SeededRng;
use crate::store::WeightStore;
use crate::temporal::{
    temporal_module_forward_traced, PaddingPolicy, TemporalBlock, TemporalConfig,
    TemporalModuleWeights,
};
use crate::tensor::Tensor;
use crate::trace::{OpKind, Tracer};

pub const NUM_STAGES: usize = 5;

fn yes() -> bool {
    true
}

/// Architecture and ablation switches. Serialized as JSON with these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub encoder_channels: Vec<usize>,
    pub tm_channels: usize,
    pub attention_channels: usize,
    pub padding_policy: PaddingPolicy,
    pub num_tm_convs: usize,
    pub shuffle_enabled: bool,
    pub attention_enabled: bool,
    pub upsample_mode: UpsampleMode,
    /// `false` removes the temporal module entirely (the 2D-only baseline).
    #[serde(default = "yes")]
    pub temporal_enabled: bool,
    /// Residual 2D correction after the last 3D conv of each temporal module.
    #[serde(default = "yes")]
    pub tm_residual_last: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl NetworkConfig {
    /// 256x256 input, UNet-width encoder, 64-channel temporal modules.
    pub fn full_scale() -> Self {
        Self {
            input_size: 256,
            encoder_channels: vec![64, 128, 256, 512, 1024],
            tm_channels: 64,
            attention_channels: 64,
            padding_policy: PaddingPolicy::Eq6Literal,
            num_tm_convs: 3,
            shuffle_enabled: true,
            attention_enabled: true,
            upsample_mode: UpsampleMode::Bilinear,
            temporal_enabled: true,
            tm_residual_last: true,
        }
    }

    /// Desk-scale configuration for tests and demos.
    pub fn toy(input_size: usize) -> Self {
        Self {
            input_size,
            encoder_channels: vec![8, 16, 32, 64, 64],
            tm_channels: 16,
            attention_channels: 16,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "input_size must be a positive multiple of 16, got {}",
                self.input_size
            )));
        }
        if self.encoder_channels.len() != NUM_STAGES || self.encoder_channels.contains(&0) {
            return Err(Error::Config(format!(
                "encoder_channels must hold 5 positive widths, got {:?}",
                self.encoder_channels
            )));
        }
        if self.tm_channels == 0 || self.attention_channels == 0 {
            return Err(Error::Config(
                "tm_channels and attention_channels must be positive".into(),
            ));
        }
        if !matches!(self.num_tm_convs, 1 | 3 | 5) {
            return Err(Error::Config(format!(
                "num_tm_convs must be 1, 3 or 5, got {}",
                self.num_tm_convs
            )));
        }
        Ok(())
    }

    pub fn temporal_config(&self) -> TemporalConfig {
        TemporalConfig {
            policy: self.padding_policy,
            num_layers: self.num_tm_convs,
            shuffle: self.shuffle_enabled,
            residual_last: self.tm_residual_last,
        }
    }

    /// Spatial side length of stage `d` (1-based, 1 = finest).
    pub fn stage_size(&self, d: usize) -> usize {
        self.input_size >> (d - 1)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Shape and initialization scale of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSpec {
    pub name: String,
    pub dims: Vec<usize>,
    /// Fan-in for kernels; `None` for biases.
    pub fan_in: Option<usize>,
}

fn conv_specs(out: &mut Vec<WeightSpec>, prefix: &str, kernel: Vec<usize>) {
    let fan_in = kernel[1..].iter().product();
    let o = kernel[0];
    out.push(WeightSpec {
        name: format!("{prefix}.kernel"),
        dims: kernel,
        fan_in: Some(fan_in),
    });
    out.push(WeightSpec {
        name: format!("{prefix}.bias"),
        dims: vec![o],
        fan_in: None,
    });
}

fn decoder_in_channels(cfg: &NetworkConfig, d: usize) -> (usize, usize) {
    let recurrent = if d < NUM_STAGES { cfg.tm_channels } else { 0 };
    let attention = if cfg.attention_enabled {
        cfg.attention_channels
    } else {
        0
    };
    (
        cfg.encoder_channels[d - 1] + recurrent,
        cfg.tm_channels + attention,
    )
}

/// Every parameter the configuration needs, in canonical order.
///
/// This order is also the draw order of [`init_weights`].
pub fn weight_specs(cfg: &NetworkConfig) -> Vec<WeightSpec> {
    let mut v = Vec::new();
    let ch = &cfg.encoder_channels;
    for k in 1..=NUM_STAGES {
        let cin = if k == 1 { 3 } else { ch[k - 2] };
        conv_specs(
            &mut v,
            &format!("encoder.s{k}.conv1"),
            vec![ch[k - 1], cin, 3, 3],
        );
        conv_specs(
            &mut v,
            &format!("encoder.s{k}.conv2"),
            vec![ch[k - 1], ch[k - 1], 3, 3],
        );
    }
    if cfg.attention_enabled {
        let ca = cfg.attention_channels;
        for d in ATTENTION_DILATIONS {
            conv_specs(
                &mut v,
                &format!("attention.branch_d{d}"),
                vec![ca, ch[4], 3, 3],
            );
        }
        conv_specs(&mut v, "attention.fuse", vec![ca, 4 * ca, 1, 1]);
    }
    let tm = cfg.tm_channels;
    let tcfg = cfg.temporal_config();
    for d in (1..=NUM_STAGES).rev() {
        let (a_in, b_in) = decoder_in_channels(cfg, d);
        conv_specs(
            &mut v,
            &format!("decoder.s{d}.conv_a"),
            vec![tm, a_in, 3, 3],
        );
        conv_specs(
            &mut v,
            &format!("decoder.s{d}.conv_b"),
            vec![tm, b_in, 3, 3],
        );
        if cfg.temporal_enabled {
            for n in 1..=tcfg.num_layers {
                conv_specs(
                    &mut v,
                    &format!("decoder.s{d}.tm.conv3d_{n}"),
                    vec![tm, tm, 3, 3, 3],
                );
            }
            for n in 1..=tcfg.num_residuals() {
                conv_specs(
                    &mut v,
                    &format!("decoder.s{d}.tm.res2d_{n}"),
                    vec![tm, tm, 3, 3],
                );
            }
        }
        conv_specs(&mut v, &format!("decoder.s{d}.side"), vec![1, tm, 1, 1]);
    }
    v
}

/// Kaiming-uniform kernels (`U(-b, b)`, `b = sqrt(6 / fan_in)`) and zero biases.
///
/// Draws come from one [`SeededRng`] stream, consumed tensor by tensor in
/// [`weight_specs`] order and row-major within each kernel; biases consume no draws.
pub fn init_weights(cfg: &NetworkConfig, seed: u64) -> Result<WeightStore> {
    cfg.validate()?;
    let mut rng = SeededRng::new(seed);
    let mut store = WeightStore::new();
    for spec in weight_specs(cfg) {
        let t = match spec.fan_in {
            Some(fan_in) => rng.uniform_tensor(&spec.dims, init_bound(fan_in)),
            None => Tensor::zeros(&spec.dims)?,
        };
        store.insert(spec.name, t)?;
    }
    Ok(store)
}

/// Half-width of the uniform init for a given fan-in.
pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn load_conv2d(store: &WeightStore, prefix: &str, dilation: usize) -> Result<Conv2dWeights> {
    let k = store.require(&format!("{prefix}.kernel"))?.clone();
    let b = store.require(&format!("{prefix}.bias"))?.clone();
    Conv2dWeights::same(k, b, dilation)
}

fn load_conv3d(store: &WeightStore, prefix: &str) -> Result<Conv3dWeights> {
    let k = store.require(&format!("{prefix}.kernel"))?.clone();
    let b = store.require(&format!("{prefix}.bias"))?.clone();
    Conv3dWeights::new(k, b)
}

#[derive(Debug, Clone)]
pub struct EncoderStageWeights {
    pub conv1: Conv2dWeights,
    pub conv2: Conv2dWeights,
}

#[derive(Debug, Clone)]
pub struct DecoderStageWeights {
    pub conv_a: Conv2dWeights,
    pub conv_b: Conv2dWeights,
    pub tm: Option<TemporalModuleWeights>,
    pub side: Conv2dWeights,
}

/// Typed view of a [`WeightStore`] for a given configuration.
#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub encoder: Vec<EncoderStageWeights>,
    pub attention: Option<AttentionWeights>,
    /// Index `d - 1` holds stage `d`.
    pub decoder: Vec<DecoderStageWeights>,
}

fn expect_dims(w: &Conv2dWeights, name: &str, out: usize, inp: usize) -> Result<()> {
    if w.out_channels() != out || w.in_channels() != inp {
        return shape_err(format!(
            "`{name}` maps {} -> {} channels, configuration needs {inp} -> {out}",
            w.in_channels(),
            w.out_channels()
        ));
    }
    Ok(())
}

impl Network {
    pub fn from_store(store: &WeightStore, cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.encoder_channels;
        let mut encoder = Vec::with_capacity(NUM_STAGES);
        for k in 1..=NUM_STAGES {
            let cin = if k == 1 { 3 } else { ch[k - 2] };
            let conv1 = load_conv2d(store, &format!("encoder.s{k}.conv1"), 1)?;
            let conv2 = load_conv2d(store, &format!("encoder.s{k}.conv2"), 1)?;
            expect_dims(&conv1, &format!("encoder.s{k}.conv1"), ch[k - 1], cin)?;
            expect_dims(&conv2, &format!("encoder.s{k}.conv2"), ch[k - 1], ch[k - 1])?;
            encoder.push(EncoderStageWeights { conv1, conv2 });
        }
        let attention = if cfg.attention_enabled {
            let branches = ATTENTION_DILATIONS
                .iter()
                .map(|&d| {
                    let name = format!("attention.branch_d{d}");
                    let w = load_conv2d(store, &name, d)?;
                    expect_dims(&w, &name, cfg.attention_channels, ch[4])?;
                    Ok(w)
                })
                .collect::<Result<Vec<_>>>()?;
            let fuse = load_conv2d(store, "attention.fuse", 1)?;
            expect_dims(
                &fuse,
                "attention.fuse",
                cfg.attention_channels,
                4 * cfg.attention_channels,
            )?;
            Some(AttentionWeights { branches, fuse })
        } else {
            None
        };
        let tcfg = cfg.temporal_config();
        let mut decoder = Vec::with_capacity(NUM_STAGES);
        for d in 1..=NUM_STAGES {
            let (a_in, b_in) = decoder_in_channels(cfg, d);
            let conv_a = load_conv2d(store, &format!("decoder.s{d}.conv_a"), 1)?;
            let conv_b = load_conv2d(store, &format!("decoder.s{d}.conv_b"), 1)?;
            expect_dims(
                &conv_a,
                &format!("decoder.s{d}.conv_a"),
                cfg.tm_channels,
                a_in,
            )?;
            expect_dims(
                &conv_b,
                &format!("decoder.s{d}.conv_b"),
                cfg.tm_channels,
                b_in,
            )?;
            let tm = if cfg.temporal_enabled {
                Some(TemporalModuleWeights {
                    conv3d: (1..=tcfg.num_layers)
                        .map(|n| load_conv3d(store, &format!("decoder.s{d}.tm.conv3d_{n}")))
                        .collect::<Result<_>>()?,
                    res2d: (1..=tcfg.num_residuals())
                        .map(|n| load_conv2d(store, &format!("decoder.s{d}.tm.res2d_{n}"), 1))
                        .collect::<Result<_>>()?,
                })
            } else {
                None
            };
            let side = load_conv2d(store, &format!("decoder.s{d}.side"), 1)?;
            expect_dims(&side, &format!("decoder.s{d}.side"), 1, cfg.tm_channels)?;
            decoder.push(DecoderStageWeights {
                conv_a,
                conv_b,
                tm,
                side,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            attention,
            decoder,
        })
    }

    pub fn forward(&self, clip: &FrameClip) -> Result<SaliencyResult> {
        self.forward_traced(clip, &Tracer::disabled())
    }

    pub fn forward_traced(&self, clip: &FrameClip, tracer: &Tracer) -> Result<SaliencyResult> {
        let pyramids: Vec<Vec<Tensor>> = clip
            .frames
            .iter()
            .map(|f| encoder_forward_traced(f, &self.encoder, self.cfg.input_size, tracer))
            .collect::<Result<_>>()?;

        let attention: Option<[Tensor; 3]> = match &self.attention {
            Some(aw) => {
                let maps = pyramids
                    .iter()
                    .map(|p| attention_forward_traced(&p[4], aw, tracer, "attention"))
                    .collect::<Result<Vec<_>>>()?;
                Some(maps.try_into().expect("three frames"))
            }
            None => None,
        };

        let mut stages: Vec<Option<[Tensor; 3]>> = vec![None, None, None, None, None];
        let mut recurrent: Option<[Tensor; 3]> = None;
        for d in (1..=NUM_STAGES).rev() {
            let feats: [Tensor; 3] = [0, 1, 2].map(|i| pyramids[i][d - 1].clone());
            let out = decoder_stage_traced(
                &feats,
                recurrent.as_ref(),
                attention.as_ref(),
                &self.decoder[d - 1],
                &self.cfg,
                d > 1,
                tracer,
                &format!("decoder.s{d}"),
            )?;
            stages[d - 1] = Some(out.side);
            recurrent = out.recurrent;
        }
        Ok(SaliencyResult {
            stages: stages
                .into_iter()
                .map(|s| s.expect("every stage ran"))
                .collect(),
        })
    }
}

/// Two 3x3 conv+ReLU per stage, 2x2 max-pool between stages. Returns the five
/// pre-pool feature maps at resolutions `S, S/2, S/4, S/8, S/16`.
pub fn encoder_forward(
    frame: &Tensor,
    weights: &[EncoderStageWeights],
    input_size: usize,
) -> Result<Vec<Tensor>> {
    encoder_forward_traced(frame, weights, input_size, &Tracer::disabled())
}

fn encoder_forward_traced(
    frame: &Tensor,
    weights: &[EncoderStageWeights],
    input_size: usize,
    tracer: &Tracer,
) -> Result<Vec<Tensor>> {
    if frame.dims() != [3, input_size, input_size] {
        return shape_err(format!(
            "encoder expects [3, {input_size}, {input_size}], got {:?}",
            frame.dims()
        ));
    }
    if weights.len() != NUM_STAGES {
        return shape_err(format!(
            "encoder needs 5 stages of weights, got {}",
            weights.len()
        ));
    }
    let mut feats = Vec::with_capacity(NUM_STAGES);
    let mut x = frame.clone();
    for (k, w) in weights.iter().enumerate() {
        if k > 0 {
            x = maxpool2(feats.last().expect("previous stage"))?;
            tracer.record("encoder", OpKind::MaxPool);
        }
        x = conv2d(&x, &w.conv1)?.relu();
        x = conv2d(&x, &w.conv2)?.relu();
        tracer.record_n("encoder", OpKind::Conv2d, 2);
        tracer.record_n("encoder", OpKind::Relu, 2);
        feats.push(x.clone());
    }
    Ok(feats)
}

/// Outputs of one decoder stage.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub st: TemporalBlock,
    /// `U_2x(ST + X)` per frame; `None` when not requested (finest stage).
    pub recurrent: Option<[Tensor; 3]>,
    /// `sigmoid(conv1x1(ST))` per frame, `[1, H, W]`.
    pub side: [Tensor; 3],
}

/// `X = relu(conv_b(relu(conv_a(F ⊗ R_prev)) ⊗ U(A)))`, `ST = TM(X)`,
/// `R = U_2x(ST + X)`, `side = sigmoid(conv1x1(ST))`.
///
/// `r_prev` must already be at the resolution of `feats` (it is produced
/// upsampled by the next coarser stage). With `r_prev = None` the inner
/// concatenation is skipped; with `attention = None` the outer one is.
pub fn decoder_stage(
    feats: &[Tensor; 3],
    r_prev: Option<&[Tensor; 3]>,
    attention: Option<&[Tensor; 3]>,
    w: &DecoderStageWeights,
    cfg: &NetworkConfig,
    emit_recurrent: bool,
) -> Result<DecoderOutput> {
    decoder_stage_traced(
        feats,
        r_prev,
        attention,
        w,
        cfg,
        emit_recurrent,
        &Tracer::disabled(),
        "decoder",
    )
}

#[allow(clippy::too_many_arguments)]
fn decoder_stage_traced(
    feats: &[Tensor; 3],
    r_prev: Option<&[Tensor; 3]>,
    attention: Option<&[Tensor; 3]>,
    w: &DecoderStageWeights,
    cfg: &NetworkConfig,
    emit_recurrent: bool,
    tracer: &Tracer,
    scope: &str,
) -> Result<DecoderOutput> {
    let mut xs = Vec::with_capacity(3);
    for i in 0..3 {
        let f = &feats[i];
        let inner = match r_prev {
            Some(r) => {
                if r[i].dims()[1..] != f.dims()[1..] {
                    return shape_err(format!(
                        "recurrent features {:?} do not match skip features {:?}",
                        r[i].dims(),
                        f.dims()
                    ));
                }
                tracer.record(scope, OpKind::Concat);
                Tensor::concat(&[f, &r[i]], 0)?
            }
            None => f.clone(),
        };
        let y = conv2d(&inner, &w.conv_a)?.relu();
        let outer = match attention {
            Some(a) => {
                let (h, wd) = (y.dims()[1], y.dims()[2]);
                if a[i].dims()[1] > h || a[i].dims()[2] > wd {
                    return shape_err("attention map is larger than the decoder features");
                }
                let up = if a[i].dims()[1..] == y.dims()[1..] {
                    a[i].clone()
                } else {
                    tracer.record(scope, OpKind::Upsample);
                    upsample(&a[i], h, wd, cfg.upsample_mode)?
                };
                tracer.record(scope, OpKind::Concat);
                Tensor::concat(&[&y, &up], 0)?
            }
            None => y,
        };
        let x = conv2d(&outer, &w.conv_b)?.relu();
        tracer.record_n(scope, OpKind::Conv2d, 2);
        tracer.record_n(scope, OpKind::Relu, 2);
        xs.push(x);
    }
    let x_block = TemporalBlock::new(xs.try_into().expect("three frames"))?;
    let st = match &w.tm {
        Some(tm) => temporal_module_forward_traced(
            &x_block,
            tm,
            &cfg.temporal_config(),
            tracer,
            &format!("{scope}.tm"),
        )?,
        None => x_block.clone(),
    };

    let recurrent = if emit_recurrent {
        let sum = TemporalBlock::from_stacked(st.stacked().add(x_block.stacked())?)?;
        tracer.record_n(scope, OpKind::Add, 3);
        let (h, wd) = (st.height(), st.width());
        let up = sum
            .frames()
            .map(|f| upsample(&f, 2 * h, 2 * wd, cfg.upsample_mode));
        tracer.record_n(scope, OpKind::Upsample, 3);
        let [a, b, c] = up;
        Some([a?, b?, c?])
    } else {
        None
    };

    let side = st
        .frames()
        .map(|f| conv2d(&f, &w.side).map(|s| s.sigmoid()));
    tracer.record_n(scope, OpKind::Conv2d, 3);
    tracer.record_n(scope, OpKind::Sigmoid, 3);
    let [a, b, c] = side;
    Ok(DecoderOutput {
        st,
        recurrent,
        side: [a?, b?, c?],
    })
}

/// Side saliency maps of every decoder stage for every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyResult {
    /// `stages[d - 1][i]` is stage `d`, frame `i`, shaped `[1, H_d, W_d]`.
    pub stages: Vec<[Tensor; 3]>,
}

impl SaliencyResult {
    /// Stage `d` (1 = finest), all three frames.
    pub fn stage(&self, d: usize) -> &[Tensor; 3] {
        &self.stages[d - 1]
    }

    /// Middle frame at the finest stage.
    pub fn prediction(&self) -> &Tensor {
        &self.stages[0][1]
    }
}

/// Runs the whole network on one clip.
pub fn network_forward(
    clip: &FrameClip,
    weights: &WeightStore,
    cfg: &NetworkConfig,
) -> Result<SaliencyResult> {
    Network::from_store(weights, cfg)?.forward(clip)
}

/// [`network_forward`] with op counting.
pub fn network_forward_traced(
    clip: &FrameClip,
    weights: &WeightStore,
    cfg: &NetworkConfig,
    tracer: &Tracer,
) -> Result<SaliencyResult> {
    Network::from_store(weights, cfg)?.forward_traced(clip, tracer)
}
