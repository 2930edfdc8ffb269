//! Patch embedding and the transformer stack with hooked intermediate outputs.
//!
//! Tokens are stored as an `(N_p + 1) × D` matrix. Row 0 is the class token;
//! row `j > 0` holds patch `(⌊(j−1)/gw⌋, (j−1) mod gw)` of the `gh × gw`
//! patch grid.

use crate::error::{Error, Result};
use crate::layers::{self, INIT_STD};
use crate::tensor::{ParameterSet, SeededRng, Tape, Tensor, Var};

pub const HOOK_COUNT: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// 1-based block indices whose outputs are captured.
    pub hooks: Vec<usize>,
}

impl EncoderConfig {
    pub fn vit_b16() -> Self {
        EncoderConfig {
            channels: 3,
            height: 384,
            width: 384,
            patch: 16,
            embed_dim: 768,
            blocks: 12,
            heads: 12,
            mlp_ratio: 4,
            hooks: vec![3, 5, 7, 9, 12],
        }
    }

    pub fn vit_l16() -> Self {
        EncoderConfig {
            embed_dim: 1024,
            blocks: 24,
            heads: 16,
            hooks: vec![5, 10, 15, 20, 24],
            ..Self::vit_b16()
        }
    }

    pub fn vit_desk() -> Self {
        EncoderConfig {
            channels: 3,
            height: 128,
            width: 128,
            patch: 8,
            embed_dim: 64,
            blocks: 6,
            heads: 4,
            mlp_ratio: 4,
            hooks: vec![1, 2, 3, 4, 6],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::config(format!(
                "image {}x{} not divisible by patch size {}",
                self.height, self.width, self.patch
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.hooks.len() != HOOK_COUNT {
            return Err(Error::config(format!(
                "exactly {HOOK_COUNT} hook blocks required, got {}",
                self.hooks.len()
            )));
        }
        if self.hooks[0] == 0 || self.hooks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "hook blocks must be strictly increasing and 1-based, got {:?}",
                self.hooks
            )));
        }
        if self.hooks[HOOK_COUNT - 1] > self.blocks {
            return Err(Error::config(format!(
                "hook block {} exceeds block count {}",
                self.hooks[HOOK_COUNT - 1],
                self.blocks
            )));
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("channels and mlp ratio must be positive"));
        }
        Ok(())
    }

    /// Patch grid extents `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Shape of every token sequence: `[N_p + 1, D]`.
    pub fn token_shape(&self) -> [usize; 2] {
        [self.num_patches() + 1, self.embed_dim]
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

pub fn init_params(cfg: &EncoderConfig, rng: &mut SeededRng, params: &mut ParameterSet) -> Result<()> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let patch_dim = cfg.channels * cfg.patch * cfg.patch;
    layers::init_linear_fan_in(params, "encoder.patch_embed", patch_dim, d, rng)?;
    params.init_normal("encoder.cls_token", &[1, d], INIT_STD, rng)?;
    params.init_normal("encoder.pos_embed", &cfg.token_shape(), INIT_STD, rng)?;
    for k in 0..cfg.blocks {
        let p = format!("encoder.blocks.{k}");
        layers::init_layer_norm(params, &format!("{p}.ln1"), d)?;
        for proj in ["q", "k", "v", "out"] {
            layers::init_linear(params, &format!("{p}.attn.{proj}"), d, d, rng)?;
        }
        layers::init_layer_norm(params, &format!("{p}.ln2"), d)?;
        layers::init_linear(params, &format!("{p}.mlp.fc1"), d, d * cfg.mlp_ratio, rng)?;
        layers::init_linear(params, &format!("{p}.mlp.fc2"), d * cfg.mlp_ratio, d, rng)?;
    }
    Ok(())
}

/// Flattens `image[C×H×W]` into `[N_p × C·P·P]`, one row per patch in
/// row-major patch order, each row ordered `(channel, dy, dx)`.
pub fn patchify(image: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    let expected = [cfg.channels, cfg.height, cfg.width];
    if image.shape() != expected {
        return Err(Error::config(format!(
            "image shape {:?} does not match encoder input {expected:?}",
            image.shape()
        )));
    }
    let (gh, gw) = cfg.grid();
    let p = cfg.patch;
    let row_len = cfg.channels * p * p;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * row_len);
    for py in 0..gh {
        for px in 0..gw {
            for c in 0..cfg.channels {
                for dy in 0..p {
                    let base = (c * cfg.height + py * p + dy) * cfg.width + px * p;
                    out.extend_from_slice(&src[base..base + p]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, row_len], out)
}

/// Linear patch projection, class token prepended, positional embedding added.
pub fn patch_embed(
    tape: &mut Tape,
    params: &ParameterSet,
    cfg: &EncoderConfig,
    image: &Tensor,
) -> Result<Var> {
    let patches = tape.constant(patchify(image, cfg)?);
    let tokens = layers::linear(tape, params, "encoder.patch_embed", patches)?;
    let cls = tape.param(params, "encoder.cls_token")?;
    let seq = tape.concat(&[cls, tokens], 0)?;
    let pos = tape.param(params, "encoder.pos_embed")?;
    tape.add(seq, pos)
}

/// Output of multi-head self-attention together with each head's
/// `n × n` attention matrix.
pub struct Attention {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// `softmax(Q Kᵀ / √d_k) V` per head, heads concatenated, then output projection.
pub fn mhsa(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Attention> {
    let d = tape.shape(x)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("embed dim {d} not divisible by {heads} heads")));
    }
    let dk = d / heads;
    let q = layers::linear(tape, params, &format!("{prefix}.q"), x)?;
    let k = layers::linear(tape, params, &format!("{prefix}.k"), x)?;
    let v = layers::linear(tape, params, &format!("{prefix}.v"), x)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.narrow(q, 1, h * dk, dk)?;
        let kh = tape.narrow(k, 1, h * dk, dk)?;
        let vh = tape.narrow(v, 1, h * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores, 1)?;
        outs.push(tape.matmul(attn, vh)?);
        weights.push(attn);
    }
    let merged = tape.concat(&outs, 1)?;
    let output = layers::linear(tape, params, &format!("{prefix}.out"), merged)?;
    Ok(Attention { output, weights })
}

/// Pre-norm block: `t' = t + MHSA(LN(t))`, `out = t' + MLP(LN(t'))`.
pub fn transformer_block(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Var> {
    let normed = layers::layer_norm(tape, params, &format!("{prefix}.ln1"), x)?;
    let attn = mhsa(tape, params, &format!("{prefix}.attn"), normed, heads)?;
    let x = tape.add(x, attn.output)?;
    let normed = layers::layer_norm(tape, params, &format!("{prefix}.ln2"), x)?;
    let hidden = layers::linear(tape, params, &format!("{prefix}.mlp.fc1"), normed)?;
    let hidden = tape.gelu(hidden);
    let mlp = layers::linear(tape, params, &format!("{prefix}.mlp.fc2"), hidden)?;
    tape.add(x, mlp)
}

/// Runs all blocks and returns the token sequence after each hook block, in
/// ascending hook order.
pub fn encode_with_hooks(
    tape: &mut Tape,
    params: &ParameterSet,
    cfg: &EncoderConfig,
    image: &Tensor,
) -> Result<Vec<Var>> {
    cfg.validate()?;
    let mut x = patch_embed(tape, params, cfg, image)?;
    let mut hooked = Vec::with_capacity(HOOK_COUNT);
    for k in 1..=cfg.hooks[HOOK_COUNT - 1] {
        x = transformer_block(tape, params, &format!("encoder.blocks.{}", k - 1), x, cfg.heads)?;
        if cfg.hooks.contains(&k) {
            hooked.push(x);
        }
    }
    Ok(hooked)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            channels: 2,
            height: 8,
            width: 12,
            patch: 4,
            embed_dim: 8,
            blocks: 5,
            heads: 2,
            mlp_ratio: 2,
            hooks: vec![1, 2, 3, 4, 5],
        }
    }

    #[test]
    fn presets_validate() {
        for cfg in [EncoderConfig::vit_b16(), EncoderConfig::vit_l16(), EncoderConfig::vit_desk()] {
            cfg.validate().unwrap();
        }
        let b = EncoderConfig::vit_b16();
        assert_eq!(b.num_patches(), 576);
        assert_eq!(b.token_shape(), [577, 768]);
        assert_eq!(EncoderConfig::vit_l16().token_shape(), [577, 1024]);
    }

    #[test]
    fn hooks_must_increase() {
        let cfg = EncoderConfig {
            hooks: vec![6, 6, 6, 6, 6],
            ..EncoderConfig::vit_desk()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = EncoderConfig {
            hooks: vec![1, 2, 3, 4],
            ..EncoderConfig::vit_desk()
        };
        assert!(cfg.validate().is_err());
        let cfg = EncoderConfig {
            hooks: vec![1, 2, 3, 4, 7],
            ..EncoderConfig::vit_desk()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_image_tokens_equal_projection_bias() {
        let cfg = tiny();
        let mut rng = SeededRng::new(2);
        let mut params = ParameterSet::new();
        init_params(&cfg, &mut rng, &mut params).unwrap();
        let bias = Tensor::from_fn(&[cfg.embed_dim], |i| i as f64 * 0.1 - 0.3);
        *params.get_mut("encoder.patch_embed.bias").unwrap() = bias.clone();
        *params.get_mut("encoder.pos_embed").unwrap() = Tensor::zeros(&cfg.token_shape());
        let image = Tensor::zeros(&[2, 8, 12]);
        let mut tape = Tape::new();
        let z = patch_embed(&mut tape, &params, &cfg, &image).unwrap();
        let z = tape.value(z);
        assert_eq!(z.shape(), &[7, 8]);
        for j in 1..7 {
            assert_eq!(&z.data()[j * 8..(j + 1) * 8], bias.data());
        }
    }

    #[test]
    fn patch_order_is_row_major() {
        let cfg = tiny();
        let image = Tensor::from_fn(&[2, 8, 12], |i| i as f64);
        let p = patchify(&image, &cfg).unwrap();
        // patch index 4 = grid row 1, col 1 → pixel (4, 4) of channel 0
        assert_eq!(p.at(&[4, 0]), image.at(&[0, 4, 4]));
        assert_eq!(p.at(&[4, 16]), image.at(&[1, 4, 4]));
        assert_eq!(p.at(&[2, 5]), image.at(&[0, 1, 9]));
    }

    #[test]
    fn single_token_attention_is_out_projection_of_value() {
        let mut rng = SeededRng::new(4);
        let mut params = ParameterSet::new();
        for proj in ["q", "k", "v", "out"] {
            params.insert(format!("a.{proj}.weight"), Tensor::randn(&[4, 4], 0.5, &mut rng)).unwrap();
            params.insert(format!("a.{proj}.bias"), Tensor::randn(&[4], 0.5, &mut rng)).unwrap();
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[1, 4], 1.0, &mut rng));
        let attn = mhsa(&mut tape, &params, "a", x, 2).unwrap();
        for w in &attn.weights {
            assert_eq!(tape.value(*w).data(), &[1.0]);
        }
        let v = layers::linear(&mut tape, &params, "a.v", x).unwrap();
        let expect = layers::linear(&mut tape, &params, "a.out", v).unwrap();
        assert_eq!(tape.value(attn.output), tape.value(expect));
    }
}
