//! The complete image → BEV network: presets, parameter initialization and
//! the forward pass with every intermediate stage exposed.

use std::fmt;
use std::str::FromStr;

use crate::decoder::{
    self, assemble_bev, collapse_expand_polar, polar_to_cartesian, segmentation_head, BevGridSpec,
    CameraIntrinsics, DecoderConfig, DepthPartition,
};
use crate::encoder::{self, encode_with_hooks, EncoderConfig, HOOK_COUNT};
use crate::error::{Error, Result};
use crate::reassembly::{self, reassemble, ReassemblyConfig};
use crate::tensor::{ParameterSet, SeededRng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    VitB16,
    VitL16,
    VitDesk,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::VitB16, Preset::VitL16, Preset::VitDesk];

    pub fn name(self) -> &'static str {
        match self {
            Preset::VitB16 => "vit-b16",
            Preset::VitL16 => "vit-l16",
            Preset::VitDesk => "vit-desk",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config(format!("unknown preset {s:?} (expected vit-b16, vit-l16 or vit-desk)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub preset: Preset,
    pub encoder: EncoderConfig,
    pub reassembly: ReassemblyConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn new(preset: Preset, classes: usize, spec: BevGridSpec) -> Self {
        let (encoder, reassembly) = match preset {
            Preset::VitB16 => (EncoderConfig::vit_b16(), ReassemblyConfig::paper()),
            Preset::VitL16 => (EncoderConfig::vit_l16(), ReassemblyConfig::paper()),
            Preset::VitDesk => (EncoderConfig::vit_desk(), ReassemblyConfig::desk()),
        };
        let dh = reassembly.projected_dim;
        let intrinsics = CameraIntrinsics::desk().scaled_to(encoder.width, encoder.height);
        ModelConfig {
            preset,
            encoder,
            reassembly,
            decoder: DecoderConfig {
                spec,
                intrinsics,
                bottleneck: 2 * dh,
                head_hidden: dh,
                classes,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.reassembly.validate(&self.encoder)?;
        self.decoder.spec.validate()?;
        self.decoder.intrinsics.validate()?;
        if self.decoder.intrinsics.width != self.encoder.width || self.decoder.intrinsics.height != self.encoder.height {
            return Err(Error::config("camera intrinsics do not match the input extent"));
        }
        if self.decoder.classes == 0 || self.decoder.bottleneck == 0 || self.decoder.head_hidden == 0 {
            return Err(Error::config("classes, bottleneck and head width must be positive"));
        }
        DepthPartition::halving(&self.decoder.spec)?;
        Ok(())
    }

    pub fn partition(&self) -> Result<DepthPartition> {
        DepthPartition::halving(&self.decoder.spec)
    }

    pub fn level_heights(&self) -> Vec<usize> {
        (0..HOOK_COUNT)
            .map(|i| self.reassembly.level_extent(&self.encoder, i).0)
            .collect()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.encoder.channels, self.encoder.height, self.encoder.width]
    }
}

/// Fresh parameters for every stage, drawn from one seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let root = SeededRng::new(seed);
    let mut params = ParameterSet::new();
    encoder::init_params(&cfg.encoder, &mut root.fork(1), &mut params)?;
    reassembly::init_params(&cfg.encoder, &cfg.reassembly, &mut root.fork(2), &mut params)?;
    decoder::init_params(
        &cfg.decoder,
        cfg.reassembly.projected_dim,
        &cfg.level_heights(),
        &mut root.fork(3),
        &mut params,
    )?;
    Ok(params)
}

/// Handles to every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub hooks: Vec<Var>,
    pub levels: Vec<Var>,
    pub fused: Vec<Var>,
    pub polar: Vec<Var>,
    pub slices: Vec<Var>,
    pub bev: Var,
    pub probs: Var,
}

impl ForwardTrace {
    /// `(stage, shape)` for every recorded intermediate, in pipeline order.
    pub fn shapes(&self, tape: &Tape, cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (k, v) in cfg.encoder.hooks.iter().zip(&self.hooks) {
            out.push((format!("hook.block{k}"), tape.shape(*v).to_vec()));
        }
        for (name, vars) in [("reassembled", &self.levels), ("fused", &self.fused), ("polar", &self.polar), ("bev_slice", &self.slices)] {
            for (i, v) in vars.iter().enumerate() {
                out.push((format!("{name}.{i}"), tape.shape(*v).to_vec()));
            }
        }
        out.push(("bev".to_string(), tape.shape(self.bev).to_vec()));
        out.push(("probs".to_string(), tape.shape(self.probs).to_vec()));
        out
    }
}

/// Image `[C×H×W]` (normalized to `[−1, 1]`) → per-class BEV probabilities.
pub fn forward(tape: &mut Tape, params: &ParameterSet, cfg: &ModelConfig, image: &Tensor) -> Result<ForwardTrace> {
    if image.shape() != cfg.input_shape() {
        return Err(Error::Dimension {
            op: "forward",
            lhs: image.shape().to_vec(),
            rhs: cfg.input_shape().to_vec(),
        });
    }
    let hooks = encode_with_hooks(tape, params, &cfg.encoder, image)?;
    let (levels, pyramid) = reassemble(tape, params, &cfg.encoder, &cfg.reassembly, &hooks)?;
    let partition = cfg.partition()?;
    let dec = &cfg.decoder;
    let mut polar = Vec::with_capacity(HOOK_COUNT);
    let mut slices = Vec::with_capacity(HOOK_COUNT);
    for (i, &feature) in pyramid.levels.iter().enumerate() {
        let interval = partition.for_level(i);
        let p = collapse_expand_polar(tape, params, &format!("decoder.{i}"), feature, interval.rows)?;
        slices.push(polar_to_cartesian(tape, p, &dec.intrinsics, &dec.spec, &interval)?);
        polar.push(p);
    }
    let bev = assemble_bev(tape, &slices, &partition, &dec.spec)?;
    let probs = segmentation_head(tape, params, bev)?;
    Ok(ForwardTrace {
        hooks,
        levels,
        fused: pyramid.levels,
        polar,
        slices,
        bev,
        probs,
    })
}

/// Inference on a throwaway tape.
pub fn predict(params: &ParameterSet, cfg: &ModelConfig, image: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let trace = forward(&mut tape, params, cfg, image)?;
    Ok(tape.value(trace.probs).clone())
}

/// Stage shapes derived from the configuration alone, in the same order and
/// naming as [`ForwardTrace::shapes`].
pub fn symbolic_shapes(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    cfg.validate()?;
    let enc = &cfg.encoder;
    let re = &cfg.reassembly;
    let dec = &cfg.decoder;
    let partition = cfg.partition()?;
    let dh = re.projected_dim;
    let x_bins = dec.spec.lateral_bins();
    let mut out = Vec::new();
    for k in &enc.hooks {
        out.push((format!("hook.block{k}"), enc.token_shape().to_vec()));
    }
    for name in ["reassembled", "fused"] {
        for i in 0..HOOK_COUNT {
            out.push((format!("{name}.{i}"), re.level_shape(enc, i).to_vec()));
        }
    }
    for i in 0..HOOK_COUNT {
        let (_, w) = re.level_extent(enc, i);
        out.push((format!("polar.{i}"), vec![dh, partition.for_level(i).rows, w]));
    }
    for i in 0..HOOK_COUNT {
        out.push((format!("bev_slice.{i}"), vec![dh, partition.for_level(i).rows, x_bins]));
    }
    out.push(("bev".to_string(), vec![dh, dec.spec.depth_bins(), x_bins]));
    out.push(("probs".to_string(), vec![dec.classes, dec.spec.depth_bins(), x_bins]));
    Ok(out)
}
