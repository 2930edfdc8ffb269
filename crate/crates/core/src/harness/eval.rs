use std::path::Path;

use crate::decoder::{ipm_baseline, BevGridSpec};
use crate::error::{Error, Result};
use crate::loss::{format_kv, format_table, iou_scores, ConfusionAccumulator, IouReport};
use crate::model::{init_params, predict, ModelConfig};
use crate::scene::{ClassPalette, Dataset, Rgb, Sample, Split, GROUND_COLOR, SKY_COLOR};
use crate::tensor::{ParameterSet, Tensor};

use super::checkpoint;
use super::config::RunConfig;
use super::train::prepare_samples;

/// Source of the per-class probability grids being scored.
pub enum Predictor<'a> {
    Model {
        params: &'a ParameterSet,
        model: &'a ModelConfig,
    },
    /// Scores the labels against themselves (debugging aid).
    GroundTruth,
    /// Inverse-perspective warp of the input, each cell assigned the palette
    /// class of nearest color.
    IpmNearestClass,
}

impl Predictor<'_> {
    pub fn predict(&self, sample: &Sample, palette: &ClassPalette, spec: &BevGridSpec) -> Result<Tensor> {
        match self {
            Predictor::Model { params, model } => predict(params, model, &sample.input()),
            Predictor::GroundTruth => Ok(sample.label.masks.clone()),
            Predictor::IpmNearestClass => ipm_nearest_class(sample, palette, spec),
        }
    }
}

fn dist2(a: [f64; 3], b: Rgb) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - f64::from(y) / 255.0).powi(2))
        .sum()
}

/// Binary class grid from the IPM warp of the rendered image. Cells outside
/// the image (warped to zero) and cells nearest to the sky or bare-ground
/// colors get no class.
pub fn ipm_nearest_class(sample: &Sample, palette: &ClassPalette, spec: &BevGridSpec) -> Result<Tensor> {
    let scene = &sample.scene;
    let intr = scene.intrinsics.scaled_to(sample.image.shape()[2], sample.image.shape()[1]);
    let warped = ipm_baseline(&sample.image, &intr, spec, scene.cam_height)?;
    let cells = spec.depth_bins() * spec.lateral_bins();
    let mut out = vec![0.0; palette.len() * cells];
    for k in 0..cells {
        let rgb = [0, 1, 2].map(|c| warped.data()[c * cells + k]);
        if rgb == [0.0; 3] {
            continue;
        }
        let mut best = (dist2(rgb, SKY_COLOR).min(dist2(rgb, GROUND_COLOR)), None);
        for (i, class) in palette.iter().enumerate() {
            let d = dist2(rgb, class.color);
            if d < best.0 {
                best = (d, Some(i));
            }
        }
        if let Some(i) = best.1 {
            out[i * cells + k] = 1.0;
        }
    }
    Tensor::new(vec![palette.len(), spec.depth_bins(), spec.lateral_bins()], out)
}

pub fn evaluate(
    samples: &[Sample],
    palette: &ClassPalette,
    spec: &BevGridSpec,
    threshold: f64,
    predictor: &Predictor<'_>,
) -> Result<ConfusionAccumulator> {
    let mut acc = ConfusionAccumulator::new(palette.len());
    for s in samples {
        let probs = predictor.predict(s, palette, spec)?;
        acc.update(&probs, &s.label.masks, threshold)?;
    }
    Ok(acc)
}

pub fn report(label: &str, acc: &ConfusionAccumulator, palette: &ClassPalette) -> (IouReport, String) {
    let r = iou_scores(acc, &palette.subset());
    let text = format!(
        "{}\n{}",
        format_table(label, &r, &palette.columns()),
        format_kv(&r, &palette.names())
    );
    (r, text)
}

/// Parameters from `path`, checked against the model built from `cfg`.
pub fn load_params(path: &Path, model: &ModelConfig) -> Result<ParameterSet> {
    let ck = checkpoint::load(path)?;
    let expected = init_params(model, 0)?;
    checkpoint::check_compatible(&ck.params, &expected)?;
    Ok(ck.params)
}

/// Scores a checkpoint (or the labels themselves) on the validation split.
pub fn eval_command(cfg: &RunConfig, checkpoint: Option<&Path>, truth_as_prediction: bool) -> Result<(IouReport, String)> {
    cfg.validate()?;
    let palette = ClassPalette::default();
    let model = cfg.model(&palette);
    let dataset = Dataset::open(&cfg.data_dir)?;
    let samples = prepare_samples(dataset.load(Split::Val, palette.len())?, &palette, &model);
    if samples.is_empty() {
        return Err(Error::data("validation split is empty"));
    }
    let (acc, label) = if truth_as_prediction {
        (evaluate(&samples, &palette, &cfg.grid, cfg.threshold, &Predictor::GroundTruth)?, "ground-truth")
    } else {
        let path = checkpoint.ok_or_else(|| Error::usage("eval needs --checkpoint or --truth"))?;
        let params = load_params(path, &model)?;
        let predictor = Predictor::Model {
            params: &params,
            model: &model,
        };
        (evaluate(&samples, &palette, &cfg.grid, cfg.threshold, &predictor)?, cfg.preset.name())
    };
    Ok(report(label, &acc, &palette))
}
