use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::decoder::BevGridSpec;
use crate::error::{Error, Result};
use crate::loss::{LossConfig, DEFAULT_EPS};
use crate::model::{ModelConfig, Preset};
use crate::scene::ClassPalette;
use crate::tensor::LossForm;

/// How positive-class loss weights are chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum ClassWeights {
    /// The same weight for every class.
    Uniform(f64),
    /// `1 − frequency` on the training labels, clamped to `[0.5, 0.99]`.
    Frequency,
    List(Vec<f64>),
}

impl fmt::Display for ClassWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassWeights::Uniform(w) => write!(f, "uniform:{w}"),
            ClassWeights::Frequency => f.write_str("frequency"),
            ClassWeights::List(ws) => {
                let parts: Vec<String> = ws.iter().map(f64::to_string).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for ClassWeights {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "frequency" {
            return Ok(ClassWeights::Frequency);
        }
        if let Some(w) = s.strip_prefix("uniform:") {
            return Ok(ClassWeights::Uniform(parse_num(w, "class_weights")?));
        }
        s.split(',')
            .map(|p| parse_num(p.trim(), "class_weights"))
            .collect::<Result<Vec<f64>>>()
            .map(ClassWeights::List)
    }
}

fn parse_num<T: FromStr>(value: &str, key: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for `{key}`")))
}

fn form_name(form: LossForm) -> &'static str {
    match form {
        LossForm::Printed => "printed",
        LossForm::EntropyBonus => "entropy-bonus",
    }
}

/// Every setting of a run. The text form is flat `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub grid: BevGridSpec,
    pub class_weights: ClassWeights,
    pub lambda: f64,
    pub loss_form: LossForm,
    pub eps: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub threshold: f64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: Preset::VitDesk,
            grid: BevGridSpec::default(),
            class_weights: ClassWeights::Uniform(0.5),
            lambda: 0.0,
            loss_form: LossForm::Printed,
            eps: DEFAULT_EPS,
            lr: 0.05,
            weight_decay: 0.001,
            batch_size: 4,
            epochs: 50,
            max_steps: 0,
            checkpoint_every: 1,
            seed: 0,
            threshold: 0.5,
            train_scenes: 8,
            val_scenes: 64,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Input images are mapped from `[0, 1]` to `[−1, 1]`; recorded in the echo.
pub const INPUT_NORM: &str = "symmetric";

impl RunConfig {
    pub const KEYS: [&'static str; 22] = [
        "preset",
        "grid.z_min",
        "grid.z_max",
        "grid.x_max",
        "grid.cell",
        "loss.class_weights",
        "loss.lambda",
        "loss.form",
        "loss.eps",
        "lr",
        "weight_decay",
        "batch_size",
        "epochs",
        "max_steps",
        "checkpoint_every",
        "seed",
        "threshold",
        "data.train_scenes",
        "data.val_scenes",
        "data_dir",
        "out_dir",
        "input_norm",
    ];

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => self.preset = value.parse()?,
            "grid.z_min" => self.grid.z_min = parse_num(value, key)?,
            "grid.z_max" => self.grid.z_max = parse_num(value, key)?,
            "grid.x_max" => self.grid.x_max = parse_num(value, key)?,
            "grid.cell" => self.grid.cell = parse_num(value, key)?,
            "loss.class_weights" => self.class_weights = value.parse()?,
            "loss.lambda" => self.lambda = parse_num(value, key)?,
            "loss.form" => {
                self.loss_form = match value {
                    "printed" => LossForm::Printed,
                    "entropy-bonus" => LossForm::EntropyBonus,
                    _ => return Err(Error::config(format!("unknown loss form {value:?}"))),
                }
            }
            "loss.eps" => self.eps = parse_num(value, key)?,
            "lr" => self.lr = parse_num(value, key)?,
            "weight_decay" => self.weight_decay = parse_num(value, key)?,
            "batch_size" => self.batch_size = parse_num(value, key)?,
            "epochs" => self.epochs = parse_num(value, key)?,
            "max_steps" => self.max_steps = parse_num(value, key)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(value, key)?,
            "seed" => self.seed = parse_num(value, key)?,
            "threshold" => self.threshold = parse_num(value, key)?,
            "data.train_scenes" => self.train_scenes = parse_num(value, key)?,
            "data.val_scenes" => self.val_scenes = parse_num(value, key)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "input_norm" => {
                if value != INPUT_NORM {
                    return Err(Error::config(format!("only input_norm = {INPUT_NORM} is supported")));
                }
            }
            _ => return Err(Error::config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                column: 1,
                message: format!("expected `key = value`, found {line:?}"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                column: 1,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let values: [String; 22] = [
            self.preset.to_string(),
            self.grid.z_min.to_string(),
            self.grid.z_max.to_string(),
            self.grid.x_max.to_string(),
            self.grid.cell.to_string(),
            self.class_weights.to_string(),
            self.lambda.to_string(),
            form_name(self.loss_form).to_string(),
            self.eps.to_string(),
            self.lr.to_string(),
            self.weight_decay.to_string(),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            self.max_steps.to_string(),
            self.checkpoint_every.to_string(),
            self.seed.to_string(),
            self.threshold.to_string(),
            self.train_scenes.to_string(),
            self.val_scenes.to_string(),
            self.data_dir.display().to_string(),
            self.out_dir.display().to_string(),
            INPUT_NORM.to_string(),
        ];
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be finite and non-negative"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold must lie in (0, 1)"));
        }
        self.grid.validate()?;
        self.model(&ClassPalette::default()).validate()
    }

    pub fn model(&self, palette: &ClassPalette) -> ModelConfig {
        ModelConfig::new(self.preset, palette.len(), self.grid)
    }

    /// Loss settings; frequency weights need the training labels.
    pub fn loss(&self, classes: usize, labels: &[crate::tensor::Tensor]) -> Result<LossConfig> {
        let class_weights = match &self.class_weights {
            ClassWeights::Uniform(w) => vec![*w; classes],
            ClassWeights::Frequency => crate::loss::frequency_weights(labels)?,
            ClassWeights::List(ws) => ws.clone(),
        };
        let cfg = LossConfig {
            class_weights,
            lambda: self.lambda,
            eps: self.eps,
            form: self.loss_form,
        };
        cfg.validate(classes)?;
        Ok(cfg)
    }
}
