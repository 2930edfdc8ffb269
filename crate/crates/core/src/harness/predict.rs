use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::predict;
use crate::scene::{load_scene, ClassPalette, Sample};
use crate::tensor::{ParameterSet, Tensor};

use super::config::RunConfig;
use super::eval::load_params;

/// 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pixmap {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Pixmap {
    /// Binary PPM (`P6`, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

fn byte(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// `[3 × H × W]` image in `[0, 1]` as a pixmap.
pub fn image_pixmap(image: &Tensor) -> Pixmap {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut rgb = Vec::with_capacity(3 * plane);
    for k in 0..plane {
        for c in 0..3 {
            rgb.push(byte(image.data()[c * plane + k]));
        }
    }
    Pixmap { width: w, height: h, rgb }
}

/// BEV cell `(r, c)` lands on pixmap row `Z − 1 − r`: far depth at the top.
fn bev_index(z: usize, x: usize, k: usize) -> (usize, usize) {
    (z - 1 - k / x, k % x)
}

/// Grayscale `round(255·p)` of one class channel of `probs[c × Z × X]`.
pub fn heatmap(probs: &Tensor, class: usize) -> Pixmap {
    let (z, x) = (probs.shape()[1], probs.shape()[2]);
    let cells = z * x;
    let mut rgb = vec![0; 3 * cells];
    for k in 0..cells {
        let (row, col) = bev_index(z, x, k);
        let v = byte(probs.data()[class * cells + k]);
        rgb[3 * (row * x + col)..3 * (row * x + col) + 3].copy_from_slice(&[v; 3]);
    }
    Pixmap { width: x, height: z, rgb }
}

/// Each cell takes the palette color of its most probable class among those
/// above `threshold` (ties go to the later class); black when none is.
pub fn composite(probs: &Tensor, palette: &ClassPalette, threshold: f64) -> Pixmap {
    let (c, z, x) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let cells = z * x;
    let mut rgb = vec![0; 3 * cells];
    for k in 0..cells {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..c {
            let p = probs.data()[i * cells + k];
            if p > threshold && best.is_none_or(|(_, b)| p >= b) {
                best = Some((i, p));
            }
        }
        if let Some((i, _)) = best {
            let (row, col) = bev_index(z, x, k);
            rgb[3 * (row * x + col)..3 * (row * x + col) + 3].copy_from_slice(&palette.get(i).color);
        }
    }
    Pixmap { width: x, height: z, rgb }
}

fn write_all(dir: &Path, id: &str, layers: Vec<(String, Pixmap)>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    layers
        .into_iter()
        .map(|(layer, pix)| {
            let path = dir.join(format!("{id}_{layer}.ppm"));
            fs::write(&path, pix.to_ppm()).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

/// Input render, one heatmap per class and the composite for a prediction.
pub fn prediction_layers(sample: &Sample, probs: &Tensor, palette: &ClassPalette, threshold: f64) -> Vec<(String, Pixmap)> {
    let mut layers = vec![("input".to_string(), image_pixmap(&sample.image))];
    for (i, class) in palette.iter().enumerate() {
        layers.push((class.name.to_string(), heatmap(probs, i)));
    }
    layers.push(("composite".to_string(), composite(probs, palette, threshold)));
    layers
}

pub fn predict_render(
    params: &ParameterSet,
    cfg: &RunConfig,
    sample: &Sample,
    palette: &ClassPalette,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let model = cfg.model(palette);
    let probs = predict(params, &model, &sample.input())?;
    write_all(out, &sample.scene.id, prediction_layers(sample, &probs, palette, cfg.threshold))
}

/// `predict`: loads a checkpoint and a scene file, writes pixmaps to `cfg.out_dir`.
pub fn predict_command(cfg: &RunConfig, checkpoint: &Path, scene_path: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let palette = ClassPalette::default();
    let model = cfg.model(&palette);
    let scene = load_scene(scene_path)?;
    scene.validate(palette.len())?;
    let params = load_params(checkpoint, &model)?;
    let sample = Sample::build(scene, &palette, &cfg.grid, model.encoder.width, model.encoder.height);
    predict_render(&params, cfg, &sample, &palette, &cfg.out_dir)
}

/// `render`: the scene's front view and its ground-truth composite.
pub fn render_command(cfg: &RunConfig, scene_path: &Path) -> Result<Vec<PathBuf>> {
    let palette = ClassPalette::default();
    let model = cfg.model(&palette);
    let scene = load_scene(scene_path)?;
    scene.validate(palette.len())?;
    let sample = Sample::build(scene, &palette, &cfg.grid, model.encoder.width, model.encoder.height);
    let layers = vec![
        ("input".to_string(), image_pixmap(&sample.image)),
        ("truth".to_string(), composite(&sample.label.masks, &palette, 0.5)),
        ("occluded".to_string(), heatmap(&sample.occluded.clone().reshape(&[1, cfg.grid.depth_bins(), cfg.grid.lateral_bins()])?, 0)),
    ];
    write_all(&cfg.out_dir, &sample.scene.id, layers)
}
