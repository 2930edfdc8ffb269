use std::fmt::Write as _;

use crate::error::Result;
use crate::model::{symbolic_shapes, ModelConfig, Preset};
use crate::decoder::BevGridSpec;
use crate::scene::ClassPalette;

pub fn format_shape(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("×")
}

/// Dry-run stage shapes for a preset, one `stage  shape` line each, after a
/// header describing the encoder.
pub fn shapes_report(preset: Preset) -> Result<String> {
    let cfg = ModelConfig::new(preset, ClassPalette::default().len(), BevGridSpec::default());
    let stages = symbolic_shapes(&cfg)?;
    let enc = &cfg.encoder;
    let (gh, gw) = enc.grid();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "preset {preset}: input {}, patch {}, grid {gh}×{gw}, tokens {}, D {}, K {}, heads {}, hooks {:?}",
        format_shape(&cfg.input_shape()),
        enc.patch,
        enc.num_patches() + 1,
        enc.embed_dim,
        enc.blocks,
        enc.heads,
        enc.hooks
    );
    let fractions: Vec<String> = cfg.reassembly.divisors.iter().map(|d| format!("1/{d}")).collect();
    let _ = writeln!(
        out,
        "pyramid D̂ {}, fractions {}, bottleneck {}",
        cfg.reassembly.projected_dim,
        fractions.join(" "),
        cfg.decoder.bottleneck
    );
    for (name, shape) in stages {
        let _ = writeln!(out, "{name:<16} {}", format_shape(&shape));
    }
    Ok(out)
}
