//! Weighted binary cross-entropy with an uncertainty term, and class-wise
//! IoU bookkeeping with a tabular report.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::tape::CustomOp;
use crate::tensor::{LossForm, OpKind, Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Positive-class weight `wⁱ ∈ (0, 1)`; negatives get `1 − wⁱ`.
    pub class_weights: Vec<f64>,
    pub lambda: f64,
    pub eps: f64,
    pub form: LossForm,
}

impl LossConfig {
    /// `wⁱ = 0.5`, `λ = 0`: plain BCE scaled by one half.
    pub fn uniform(classes: usize) -> Self {
        LossConfig {
            class_weights: vec![0.5; classes],
            lambda: 0.0,
            eps: DEFAULT_EPS,
            form: LossForm::Printed,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.class_weights.len() != classes {
            return Err(Error::config(format!(
                "{} class weights for {classes} classes",
                self.class_weights.len()
            )));
        }
        if self.class_weights.iter().any(|w| !(*w > 0.0 && *w < 1.0)) {
            return Err(Error::config("class weights must lie in (0, 1)"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("uncertainty coefficient must be non-negative"));
        }
        if !(self.eps > 0.0 && self.eps <= 1e-3) {
            return Err(Error::config("probability clamp must lie in (0, 1e-3]"));
        }
        Ok(())
    }
}

/// Positive-class weights `1 − freqᵢ` clamped to `[0.5, 0.99]`, from binary
/// label tensors `[c × Z × X]`.
pub fn frequency_weights(labels: &[Tensor]) -> Result<Vec<f64>> {
    let first = labels.first().ok_or_else(|| Error::data("no labels to count"))?;
    let c = first.shape()[0];
    let mut positive = vec![0.0; c];
    let mut total = 0.0;
    for l in labels {
        if l.shape() != first.shape() {
            return Err(Error::data("label shapes differ"));
        }
        let cells = l.numel() / c;
        for (i, chunk) in l.data().chunks(cells).enumerate() {
            positive[i] += chunk.iter().sum::<f64>();
        }
        total += cells as f64;
    }
    Ok(positive.iter().map(|p| (1.0 - p / total).clamp(0.5, 0.99)).collect())
}

struct BevLossOp {
    target: Vec<f64>,
    weights: Vec<f64>,
    mask: Option<Vec<f64>>,
    lambda: f64,
    eps: f64,
    form: LossForm,
    cells: usize,
}

impl BevLossOp {
    fn clamp(&self, p: f64) -> f64 {
        p.clamp(self.eps, 1.0 - self.eps)
    }

    fn ambiguity(&self, cell: usize) -> f64 {
        self.mask.as_ref().map_or(1.0, |m| m[cell])
    }

    fn uncertainty(&self, p: f64) -> f64 {
        match self.form {
            LossForm::Printed => 1.0 - p * p.log2(),
            LossForm::EntropyBonus => p * p.log2() + (1.0 - p) * (1.0 - p).log2(),
        }
    }

    fn uncertainty_slope(&self, p: f64) -> f64 {
        let inv_ln2 = std::f64::consts::LOG2_E;
        match self.form {
            LossForm::Printed => -(p.log2() + inv_ln2),
            LossForm::EntropyBonus => p.log2() - (1.0 - p).log2(),
        }
    }

    fn forward(&self, probs: &[f64]) -> f64 {
        let mut total = 0.0;
        for (k, (&raw, &y)) in probs.iter().zip(&self.target).enumerate() {
            let w = self.weights[k / self.cells];
            let p = self.clamp(raw);
            let mut term = -(w * y * p.ln() + (1.0 - w) * (1.0 - y) * (1.0 - p).ln());
            if self.lambda != 0.0 {
                term += self.lambda * self.ambiguity(k % self.cells) * self.uncertainty(p);
            }
            total += term;
        }
        total / probs.len() as f64
    }
}

impl CustomOp for BevLossOp {
    fn kind(&self) -> OpKind {
        OpKind::BevLoss
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>> {
        let probs = inputs[0].data();
        let scale = grad_out[0] / probs.len() as f64;
        let grad = probs
            .iter()
            .zip(&self.target)
            .enumerate()
            .map(|(k, (&p, &y))| {
                if p < self.eps || p > 1.0 - self.eps {
                    return 0.0;
                }
                let w = self.weights[k / self.cells];
                let mut d = -(w * y / p) + (1.0 - w) * (1.0 - y) / (1.0 - p);
                if self.lambda != 0.0 {
                    d += self.lambda * self.ambiguity(k % self.cells) * self.uncertainty_slope(p);
                }
                d * scale
            })
            .collect();
        vec![grad]
    }
}

/// Mean over classes and cells of
/// `−[wⁱ·p̂·ln p + (1−wⁱ)(1−p̂)·ln(1−p)] + λ·m·U(p)`, with `p` clamped to
/// `[ε, 1−ε]`, `m` the ambiguity mask (all ones when absent) and `U` the
/// configured uncertainty term.
pub fn bev_loss(
    tape: &mut Tape,
    probs: Var,
    gt: &Tensor,
    cfg: &LossConfig,
    visibility: Option<&Tensor>,
) -> Result<Var> {
    let s = tape.shape(probs).to_vec();
    if s.len() != 3 || gt.shape() != s.as_slice() {
        return Err(Error::data(format!(
            "prediction {s:?} and ground truth {:?} disagree",
            gt.shape()
        )));
    }
    if gt.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::data("ground truth must be binary"));
    }
    cfg.validate(s[0])?;
    let cells = s[1] * s[2];
    let mask = match visibility {
        Some(m) if m.shape() != [s[1], s[2]] => {
            return Err(Error::data(format!(
                "visibility mask {:?} does not match grid {:?}",
                m.shape(),
                &s[1..]
            )))
        }
        Some(m) => Some(m.data().to_vec()),
        None => None,
    };
    let op = BevLossOp {
        target: gt.data().to_vec(),
        weights: cfg.class_weights.clone(),
        mask,
        lambda: cfg.lambda,
        eps: cfg.eps,
        form: cfg.form,
        cells,
    };
    let value = op.forward(tape.value(probs).data());
    Ok(tape.custom(&[probs], Tensor::scalar(value), Box::new(op)))
}

/// Per-class intersection and union cell counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    intersection: Vec<u64>,
    union: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(classes: usize) -> Self {
        ConfusionAccumulator {
            intersection: vec![0; classes],
            union: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.intersection.len()
    }

    pub fn intersection(&self) -> &[u64] {
        &self.intersection
    }

    pub fn union(&self) -> &[u64] {
        &self.union
    }

    /// Binarizes `probs` at `p > threshold` and counts against binary `gt`.
    pub fn update(&mut self, probs: &Tensor, gt: &Tensor, threshold: f64) -> Result<()> {
        if probs.shape() != gt.shape() || probs.rank() != 3 || probs.shape()[0] != self.classes() {
            return Err(Error::data(format!(
                "prediction {:?} and ground truth {:?} disagree for {} classes",
                probs.shape(),
                gt.shape(),
                self.classes()
            )));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::config("threshold must lie in (0, 1)"));
        }
        let cells = probs.numel() / self.classes();
        for c in 0..self.classes() {
            let p = &probs.data()[c * cells..(c + 1) * cells];
            let g = &gt.data()[c * cells..(c + 1) * cells];
            for (pv, gv) in p.iter().zip(g) {
                let pred = *pv > threshold;
                let truth = *gv > 0.5;
                self.intersection[c] += u64::from(pred && truth);
                self.union[c] += u64::from(pred || truth);
            }
        }
        Ok(())
    }

    /// Elementwise sum with another worker's counts.
    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::data("cannot merge accumulators of different class counts"));
        }
        for c in 0..self.classes() {
            self.intersection[c] += other.intersection[c];
            self.union[c] += other.union[c];
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    /// `None` where the class has empty union.
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub subset_mean: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Class-wise IoU, the mean over defined classes and the mean over `subset`.
pub fn iou_scores(acc: &ConfusionAccumulator, subset: &[usize]) -> IouReport {
    let per_class: Vec<Option<f64>> = acc
        .intersection
        .iter()
        .zip(&acc.union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let mean = mean_of(per_class.iter().copied());
    let subset_mean = mean_of(subset.iter().filter_map(|&i| per_class.get(i).copied()));
    IouReport {
        per_class,
        mean,
        subset_mean,
    }
}

/// Column headings of the reference results layout.
pub const REPORT_COLUMNS: [&str; 14] = [
    "Drivable", "PC", "WW", "CP", "Car", "Truck", "Bus", "Trailer", "CV", "Ped", "2W", "Cycle",
    "TC", "TB",
];

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.1}", 100.0 * x))
}

/// Text table with one column per reference class (IoU %), then Mean and
/// subset Mean. `columns[i]` names the reference column of class `i`;
/// reference columns with no class print `n/a`.
pub fn format_table(label: &str, report: &IouReport, columns: &[&str]) -> String {
    let mut header = format!("{:<16}", "Model");
    let mut row = format!("{label:<16}");
    for col in REPORT_COLUMNS {
        let value = columns
            .iter()
            .position(|c| *c == col)
            .and_then(|i| report.per_class.get(i).copied().flatten());
        let width = col.len().max(8);
        let _ = write!(header, " {col:>width$}");
        let _ = write!(row, " {:>width$}", pct(value));
    }
    let _ = write!(header, " {:>8} {:>8}", "Mean", "CS Mean");
    let _ = write!(row, " {:>8} {:>8}", pct(report.mean), pct(report.subset_mean));
    format!("{header}\n{row}\n")
}

/// Flat `key=value` dump; undefined scores print `n/a`.
pub fn format_kv(report: &IouReport, names: &[&str]) -> String {
    let raw = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| x.to_string());
    let mut out = String::new();
    for (name, v) in names.iter().zip(&report.per_class) {
        let _ = writeln!(out, "iou.{name}={}", raw(*v));
    }
    let _ = writeln!(out, "iou.mean={}", raw(report.mean));
    let _ = writeln!(out, "iou.subset_mean={}", raw(report.subset_mean));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(c: usize, data: Vec<f64>) -> Tensor {
        let cells = data.len() / c;
        Tensor::new(vec![c, 1, cells], data).unwrap()
    }

    #[test]
    fn certain_correct_prediction_costs_little() {
        let mut tape = Tape::new();
        let p = tape.constant(grid(1, vec![1.0, 0.0]));
        let gt = grid(1, vec![1.0, 0.0]);
        let l = bev_loss(&mut tape, p, &gt, &LossConfig::uniform(1), None).unwrap();
        let v = tape.value(l).data()[0];
        assert!(v >= 0.0 && v < 1e-6, "{v}");
    }

    #[test]
    fn non_binary_truth_is_a_data_error() {
        let mut tape = Tape::new();
        let p = tape.constant(grid(1, vec![0.3, 0.4]));
        let gt = grid(1, vec![1.0, 0.5]);
        let err = bev_loss(&mut tape, p, &gt, &LossConfig::uniform(1), None).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn loss_config_bounds() {
        let mut cfg = LossConfig::uniform(2);
        cfg.validate(2).unwrap();
        assert!(cfg.validate(3).is_err());
        cfg.class_weights[0] = 1.0;
        assert!(cfg.validate(2).is_err());
        let mut cfg = LossConfig::uniform(2);
        cfg.eps = 1e-2;
        assert!(cfg.validate(2).is_err());
    }

    #[test]
    fn iou_identity_and_half_cover() {
        let gt = grid(2, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let mut acc = ConfusionAccumulator::new(2);
        acc.update(&gt, &gt, 0.5).unwrap();
        let r = iou_scores(&acc, &[0]);
        assert_eq!(r.per_class, vec![Some(1.0), None]);
        assert_eq!(r.mean, Some(1.0));

        let pred = grid(2, vec![0.9, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let mut acc = ConfusionAccumulator::new(2);
        acc.update(&pred, &gt, 0.5).unwrap();
        assert_eq!(iou_scores(&acc, &[]).per_class[0], Some(0.5));
    }

    #[test]
    fn empty_update_leaves_counts() {
        let z = Tensor::zeros(&[3, 4, 4]);
        let mut acc = ConfusionAccumulator::new(3);
        acc.update(&z, &z, 0.5).unwrap();
        assert_eq!(acc, ConfusionAccumulator::new(3));
        assert!(acc.update(&z, &Tensor::zeros(&[3, 4, 5]), 0.5).is_err());
    }

    #[test]
    fn frequency_weights_clamp() {
        let l = Tensor::new(vec![2, 1, 4], vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let w = frequency_weights(&[l]).unwrap();
        assert_eq!(w, vec![0.5, 0.99]);
    }

    #[test]
    fn table_marks_absent_columns() {
        let report = IouReport {
            per_class: vec![Some(0.8), None],
            mean: Some(0.8),
            subset_mean: Some(0.8),
        };
        let t = format_table("desk", &report, &["Drivable", "Car"]);
        let lines: Vec<_> = t.lines().collect();
        assert!(lines[0].contains("Drivable") && lines[0].contains("CS Mean"));
        assert!(lines[1].contains("80.0"));
        assert_eq!(lines[1].matches("n/a").count(), 13);
        let kv = format_kv(&report, &["drivable", "car"]);
        assert!(kv.contains("iou.drivable=0.8\n") && kv.contains("iou.car=n/a\n"));
    }
}
