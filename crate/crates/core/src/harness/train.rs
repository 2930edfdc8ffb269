use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::{bev_loss, LossConfig};
use crate::model::{forward, init_params, ModelConfig};
use crate::scene::{ClassPalette, Dataset, Sample, Scene, Split};
use crate::tensor::{sgd_step, ParameterSet, SeededRng, Tape, Tensor};

use super::checkpoint;
use super::config::RunConfig;

pub const LOG_HEADER: &str = "step,epoch,loss";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub params: ParameterSet,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> Option<f64> {
        self.log.first().map(|r| r.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|r| r.loss)
    }
}

pub fn format_log(rows: &[LogRow]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.step, r.epoch, r.loss);
    }
    out
}

/// Renders and rasterizes scenes at the model's input extent.
pub fn prepare_samples(scenes: Vec<Scene>, palette: &ClassPalette, model: &ModelConfig) -> Vec<Sample> {
    scenes
        .into_iter()
        .map(|s| Sample::build(s, palette, &model.decoder.spec, model.encoder.width, model.encoder.height))
        .collect()
}

/// Forward pass and loss for one sample on a fresh tape.
pub fn sample_loss(
    tape: &mut Tape,
    params: &ParameterSet,
    model: &ModelConfig,
    loss: &LossConfig,
    sample: &Sample,
) -> Result<crate::tensor::Var> {
    let trace = forward(tape, params, model, &sample.input())?;
    let mask = (loss.lambda != 0.0).then_some(&sample.occluded);
    bev_loss(tape, trace.probs, &sample.label.masks, loss, mask)
}

/// Where training artifacts go; `None` keeps everything in memory.
pub struct RunDir<'a> {
    pub path: &'a Path,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Seeded-shuffle minibatch SGD. Each step averages per-sample gradients
/// over the batch; the logged loss is the batch mean before the update.
pub fn train(
    cfg: &RunConfig,
    samples: &[Sample],
    palette: &ClassPalette,
    out: Option<RunDir<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::data("no training scenes"));
    }
    let model = cfg.model(palette);
    let labels: Vec<Tensor> = samples.iter().map(|s| s.label.masks.clone()).collect();
    let loss_cfg = cfg.loss(palette.len(), &labels)?;
    let mut params = init_params(&model, cfg.seed)?;
    params.zero_grads();
    let echo = cfg.to_text();

    if let Some(dir) = &out {
        fs::create_dir_all(dir.path).map_err(|e| Error::io(dir.path, e))?;
        write(&dir.path.join("config.txt"), &echo)?;
        checkpoint::save(&dir.path.join("init.ckpt"), &echo, &params)?;
    }

    let root = SeededRng::new(cfg.seed);
    let mut log = Vec::new();
    let mut step = 0;
    'epochs: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        root.fork(1_000 + epoch as u64).shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let scale = 1.0 / batch.len() as f64;
            let mut total = 0.0;
            for &i in batch {
                let mut tape = Tape::new();
                let l = sample_loss(&mut tape, &params, &model, &loss_cfg, &samples[i])?;
                total += tape.value(l).data()[0];
                tape.backward(l)?;
                tape.accumulate_param_grads(&mut params, scale)?;
            }
            let loss = total * scale;
            if !loss.is_finite() {
                return Err(Error::Verification(format!(
                    "non-finite loss {loss} at step {step} (epoch {epoch})"
                )));
            }
            log.push(LogRow { step, epoch, loss });
            sgd_step(&mut params, cfg.lr, cfg.weight_decay)?;
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'epochs;
            }
        }
        if let Some(dir) = &out {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                checkpoint::save(&dir.path.join(format!("epoch_{epoch:04}.ckpt")), &echo, &params)?;
            }
        }
    }
    if let Some(dir) = &out {
        write(&dir.path.join("loss.csv"), format_log(&log))?;
        checkpoint::save(&dir.path.join("final.ckpt"), &echo, &params)?;
    }
    params.clear_grads();
    Ok(TrainOutcome { log, params })
}

/// Loads the training split from `cfg.data_dir` and trains into `cfg.out_dir`.
pub fn train_command(cfg: &RunConfig) -> Result<TrainOutcome> {
    let palette = ClassPalette::default();
    let dataset = Dataset::open(&cfg.data_dir)?;
    let scenes = dataset.load(Split::Train, palette.len())?;
    if scenes.is_empty() {
        return Err(Error::data(format!(
            "dataset {} has no training scenes",
            cfg.data_dir.display()
        )));
    }
    let samples = prepare_samples(scenes, &palette, &cfg.model(&palette));
    train(cfg, &samples, &palette, Some(RunDir { path: &cfg.out_dir }))
}
