//! Turns hooked token sequences into a five-level feature pyramid.
//!
//! Each hooked sequence is read out (class token folded into every patch
//! token), unflattened to the patch grid, projected to `D̂` channels and
//! resized to its level: learned transposed convolution upward, a chain of
//! stride-2 3×3 convolutions downward. The levels are then fused top-down by
//! bilinear ×2 upsampling and addition.

use crate::encoder::{EncoderConfig, HOOK_COUNT};
use crate::error::{Error, Result};
use crate::layers;
use crate::tensor::{ConvGeometry, Padding, ParameterSet, SeededRng, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReassemblyConfig {
    /// Level resolution as a divisor of the input extent (`l_i = 1/divisor`), finest first.
    pub divisors: Vec<usize>,
    pub projected_dim: usize,
}

impl ReassemblyConfig {
    pub fn paper() -> Self {
        ReassemblyConfig {
            divisors: vec![4, 8, 16, 32, 64],
            projected_dim: 256,
        }
    }

    pub fn desk() -> Self {
        ReassemblyConfig {
            divisors: vec![2, 4, 8, 16, 32],
            projected_dim: 32,
        }
    }

    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        if self.divisors.len() != HOOK_COUNT {
            return Err(Error::config(format!(
                "exactly {HOOK_COUNT} pyramid levels required, got {}",
                self.divisors.len()
            )));
        }
        if self.divisors.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("level fractions must be strictly decreasing"));
        }
        if self.projected_dim == 0 {
            return Err(Error::config("projected dim must be positive"));
        }
        for &d in &self.divisors {
            if d == 0 || enc.height % d != 0 || enc.width % d != 0 {
                return Err(Error::config(format!(
                    "level 1/{d} is not integral for a {}x{} input",
                    enc.height, enc.width
                )));
            }
            Resize::between(enc.patch, d)?;
        }
        Ok(())
    }

    /// Spatial extents `(h, w)` of level `i`.
    pub fn level_extent(&self, enc: &EncoderConfig, i: usize) -> (usize, usize) {
        (enc.height / self.divisors[i], enc.width / self.divisors[i])
    }

    pub fn level_shape(&self, enc: &EncoderConfig, i: usize) -> [usize; 3] {
        let (h, w) = self.level_extent(enc, i);
        [self.projected_dim, h, w]
    }
}

/// Resolution change from the patch grid to a level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resize {
    Up(usize),
    Identity,
    /// Number of stride-2 halvings.
    Down(usize),
}

impl Resize {
    /// Patch grid cell = `patch` pixels, level cell = `divisor` pixels.
    pub fn between(patch: usize, divisor: usize) -> Result<Resize> {
        let not_pow2 = || {
            Error::config(format!(
                "patch size {patch} and level divisor {divisor} differ by a non power-of-two ratio"
            ))
        };
        if patch == divisor {
            Ok(Resize::Identity)
        } else if patch > divisor {
            if patch % divisor != 0 || !(patch / divisor).is_power_of_two() {
                return Err(not_pow2());
            }
            Ok(Resize::Up(patch / divisor))
        } else {
            if divisor % patch != 0 || !(divisor / patch).is_power_of_two() {
                return Err(not_pow2());
            }
            Ok(Resize::Down((divisor / patch).trailing_zeros() as usize))
        }
    }
}

pub fn init_params(
    enc: &EncoderConfig,
    cfg: &ReassemblyConfig,
    rng: &mut SeededRng,
    params: &mut ParameterSet,
) -> Result<()> {
    cfg.validate(enc)?;
    let d = enc.embed_dim;
    let dh = cfg.projected_dim;
    for (i, &div) in cfg.divisors.iter().enumerate() {
        let p = format!("reassemble.{i}");
        layers::init_linear_fan_in(params, &format!("{p}.readout"), 2 * d, d, rng)?;
        layers::init_conv(params, &format!("{p}.project"), d, dh, 1, rng)?;
        match Resize::between(enc.patch, div)? {
            Resize::Up(f) => {
                // Non-overlapping taps: each output sees `dh` inputs.
                let std = 1.0 / (dh as f64).sqrt();
                params.init_normal(format!("{p}.up.weight"), &[dh, dh, f, f], std, rng)?;
                params.init_zeros(format!("{p}.up.bias"), &[dh])?;
            }
            Resize::Identity => {}
            Resize::Down(n) => {
                for j in 0..n {
                    layers::init_conv(params, &format!("{p}.down.{j}"), dh, dh, 3, rng)?;
                }
            }
        }
    }
    Ok(())
}

/// Concatenates the class token onto every patch token (`2D` wide) and
/// projects back to `D`; the class row itself is dropped.
pub fn readout_project(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    tokens: Var,
) -> Result<Var> {
    let n = tape.shape(tokens)[0];
    if n < 2 {
        return Err(Error::config("token sequence has no patch tokens"));
    }
    let cls = tape.narrow(tokens, 0, 0, 1)?;
    let patches = tape.narrow(tokens, 0, 1, n - 1)?;
    let cls_rows = tape.repeat_rows(cls, n - 1)?;
    let joined = tape.concat(&[patches, cls_rows], 1)?;
    layers::linear(tape, params, prefix, joined)
}

/// Row-major unflatten of `[N_p × D]` patch tokens into a `[D × h × w]` map.
pub fn tokens_to_grid(tape: &mut Tape, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 2 || s[0] != h * w {
        return Err(Error::config(format!(
            "{} tokens cannot fill a {h}x{w} grid",
            s.first().copied().unwrap_or(0)
        )));
    }
    let t = tape.transpose(tokens)?;
    tape.reshape(t, &[s[1], h, w])
}

/// Inverse of [`tokens_to_grid`].
pub fn grid_to_tokens(tape: &mut Tape, grid: Var) -> Result<Var> {
    let s = tape.shape(grid).to_vec();
    if s.len() != 3 {
        return Err(Error::config(format!("expected a C×H×W map, got {s:?}")));
    }
    let flat = tape.reshape(grid, &[s[0], s[1] * s[2]])?;
    tape.transpose(flat)
}

/// 1×1 projection to `D̂` followed by the level's resolution change.
pub fn rescale_to_level(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    grid: Var,
    resize: Resize,
) -> Result<Var> {
    let x = layers::conv(tape, params, &format!("{prefix}.project"), grid, ConvGeometry::new(1, 0))?;
    match resize {
        Resize::Identity => Ok(x),
        Resize::Up(f) => {
            let w = tape.param(params, &format!("{prefix}.up.weight"))?;
            let b = tape.param(params, &format!("{prefix}.up.bias"))?;
            tape.conv_transpose2d(x, w, Some(b), ConvGeometry::new(f, 0))
        }
        Resize::Down(n) => {
            let geom = ConvGeometry {
                stride: 2,
                padding: Padding::same(3, 2),
            };
            let mut x = x;
            for j in 0..n {
                x = layers::conv(tape, params, &format!("{prefix}.down.{j}"), x, geom)?;
            }
            Ok(x)
        }
    }
}

/// Sampling coordinates for a ×2 bilinear upsample of an `h×w` map:
/// half-pixel centers clamped to the source grid, so constants are preserved.
pub fn upsample2x_coords(h: usize, w: usize) -> Tensor {
    let src = |i: usize, n: usize| ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
    let (oh, ow) = (2 * h, 2 * w);
    let mut data = Vec::with_capacity(oh * ow * 2);
    for i in 0..oh {
        for j in 0..ow {
            data.push(src(i, h));
            data.push(src(j, w));
        }
    }
    Tensor::from_parts(vec![oh, ow, 2], data)
}

/// Top-down fusion: `fused₅ = level₅`, `fusedᵢ = levelᵢ + up×2(fusedᵢ₊₁)`.
/// Returns all fused maps, finest first.
pub fn fuse_pyramid(tape: &mut Tape, levels: &[Var]) -> Result<Vec<Var>> {
    if levels.len() != HOOK_COUNT {
        return Err(Error::config(format!(
            "fusion expects {HOOK_COUNT} levels, got {}",
            levels.len()
        )));
    }
    let mut fused = vec![levels[HOOK_COUNT - 1]];
    for i in (0..HOOK_COUNT - 1).rev() {
        let coarse = *fused.last().expect("nonempty");
        let cs = tape.shape(coarse).to_vec();
        let fs = tape.shape(levels[i]).to_vec();
        if fs.len() != 3 || cs.len() != 3 || fs != [cs[0], 2 * cs[1], 2 * cs[2]] {
            return Err(Error::config(format!(
                "pyramid level {i} {fs:?} is not twice level {} {cs:?}",
                i + 1
            )));
        }
        let up = tape.resample_bilinear(coarse, &upsample2x_coords(cs[1], cs[2]))?;
        fused.push(tape.add(levels[i], up)?);
    }
    fused.reverse();
    Ok(fused)
}

/// Image-shaped multi-resolution features, finest level first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

/// Full reassembly of the hooked sequences into the fused pyramid. Also
/// returns the pre-fusion level maps.
pub fn reassemble(
    tape: &mut Tape,
    params: &ParameterSet,
    enc: &EncoderConfig,
    cfg: &ReassemblyConfig,
    hooks: &[Var],
) -> Result<(Vec<Var>, FeaturePyramid)> {
    cfg.validate(enc)?;
    if hooks.len() != HOOK_COUNT {
        return Err(Error::config(format!("expected {HOOK_COUNT} hooked sequences")));
    }
    let (gh, gw) = enc.grid();
    let mut levels = Vec::with_capacity(HOOK_COUNT);
    for (i, &seq) in hooks.iter().enumerate() {
        let p = format!("reassemble.{i}");
        let tokens = readout_project(tape, params, &format!("{p}.readout"), seq)?;
        let grid = tokens_to_grid(tape, tokens, gh, gw)?;
        let resize = Resize::between(enc.patch, cfg.divisors[i])?;
        levels.push(rescale_to_level(tape, params, &p, grid, resize)?);
    }
    let fused = fuse_pyramid(tape, &levels)?;
    Ok((levels, FeaturePyramid { levels: fused }))
}
