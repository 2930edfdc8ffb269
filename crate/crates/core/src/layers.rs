//! Small parameterized building blocks shared by the network stages.

use crate::error::Result;
use crate::tensor::{ConvGeometry, ParameterSet, SeededRng, Tape, Var};

/// Standard deviation of the truncated-normal init for projections.
pub const INIT_STD: f64 = 0.02;

pub const LN_EPS: f64 = 1e-6;

/// `x[n×in] · weight[in×out] + bias[out]`.
pub fn linear(tape: &mut Tape, params: &ParameterSet, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(params, &format!("{prefix}.weight"))?;
    let b = tape.param(params, &format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row_bias(y, b)
}

pub fn init_linear(
    params: &mut ParameterSet,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut SeededRng,
) -> Result<()> {
    params.init_normal(format!("{prefix}.weight"), &[fan_in, fan_out], INIT_STD, rng)?;
    params.init_zeros(format!("{prefix}.bias"), &[fan_out])
}

/// Variance-preserving variant of [`init_linear`]: std `1/sqrt(fan_in)`.
pub fn init_linear_fan_in(
    params: &mut ParameterSet,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut SeededRng,
) -> Result<()> {
    let std = 1.0 / (fan_in as f64).sqrt();
    params.init_normal(format!("{prefix}.weight"), &[fan_in, fan_out], std, rng)?;
    params.init_zeros(format!("{prefix}.bias"), &[fan_out])
}

pub fn layer_norm(tape: &mut Tape, params: &ParameterSet, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param(params, &format!("{prefix}.gain"))?;
    let b = tape.param(params, &format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

pub fn init_layer_norm(params: &mut ParameterSet, prefix: &str, dim: usize) -> Result<()> {
    params.init_ones(format!("{prefix}.gain"), &[dim])?;
    params.init_zeros(format!("{prefix}.bias"), &[dim])
}

pub fn conv(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    x: Var,
    geom: ConvGeometry,
) -> Result<Var> {
    let w = tape.param(params, &format!("{prefix}.weight"))?;
    let b = tape.param(params, &format!("{prefix}.bias"))?;
    tape.conv2d(x, w, Some(b), geom)
}

/// Gain for layers feeding a GELU, which roughly halves the variance.
pub const GELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Convolution kernel `[out×in×k×k]` drawn with std `1/sqrt(fan_in)`.
pub fn init_conv(
    params: &mut ParameterSet,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut SeededRng,
) -> Result<()> {
    init_conv_gain(params, prefix, cin, cout, k, 1.0, rng)
}

/// [`init_conv`] with std `gain/sqrt(fan_in)`.
pub fn init_conv_gain(
    params: &mut ParameterSet,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    gain: f64,
    rng: &mut SeededRng,
) -> Result<()> {
    let std = gain / ((cin * k * k) as f64).sqrt();
    params.init_normal(format!("{prefix}.weight"), &[cout, cin, k, k], std, rng)?;
    params.init_zeros(format!("{prefix}.bias"), &[cout])
}
