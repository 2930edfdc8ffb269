//! Finite-difference verification of every differentiable op and of the
//! full image → loss path.

use std::fmt::Write as _;

use crate::decoder::BevGridSpec;
use crate::error::{Error, Result};
use crate::loss::{bev_loss, LossConfig};
use crate::model::{forward, init_params, ModelConfig, Preset};
use crate::scene::{generate_scenes, ClassPalette, Sample, SceneSampler};
use crate::tensor::{
    finite_diff_check, finite_diff_check_params, ConvGeometry, LossForm, OpKind, Padding, SeededRng,
    Tape, Tensor, Var,
};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub worst: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// One entry per registered op kind, in registry order.
    pub ops: Vec<CheckResult>,
    pub end_to_end: Option<CheckResult>,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<&str> {
        self.ops
            .iter()
            .chain(&self.end_to_end)
            .filter(|c| !c.passed())
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in self.ops.iter().chain(&self.end_to_end) {
            let verdict = if c.passed() { "pass" } else { "FAIL" };
            let _ = writeln!(out, "{:<20} {:>12.3e}  {verdict}", c.name, c.worst);
        }
        let _ = writeln!(
            out,
            "{} checks, {} failed (tolerance {TOLERANCE:e}, step {STEP:e})",
            self.ops.len() + usize::from(self.end_to_end.is_some()),
            self.failures().len()
        );
        out
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::Verification(format!(
                "gradient check failed for {}",
                self.failures().join(", ")
            )))
        }
    }
}

/// Contracts any tensor to a scalar with fixed pseudo-random weights so that
/// every output element influences the result differently.
fn contract(tape: &mut Tape, y: Var) -> Result<Var> {
    let n: usize = tape.shape(y).iter().product();
    let mut rng = SeededRng::new(n as u64);
    let weights = Tensor::uniform(&[n, 1], -1.0, 1.0, &mut rng);
    let flat = tape.reshape(y, &[1, n])?;
    let w = tape.constant(weights);
    let s = tape.matmul(flat, w)?;
    Ok(tape.sum(s))
}

type Case = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut SeededRng::new(seed))
}

/// `(input, function)` pairs exercising `kind`.
fn cases(kind: OpKind) -> Vec<(Tensor, Case)> {
    let c = |t: Tensor| move |tape: &mut Tape| tape.constant(t.clone());
    match kind {
        OpKind::MatMul => {
            let b = c(rand(&[4, 5], 1));
            let a = c(rand(&[3, 4], 2));
            vec![
                (rand(&[3, 4], 3), Box::new(move |t, x| {
                    let w = b(t);
                    let y = t.matmul(x, w)?;
                    contract(t, y)
                })),
                (rand(&[4, 5], 4), Box::new(move |t, x| {
                    let l = a(t);
                    let y = t.matmul(l, x)?;
                    contract(t, y)
                })),
            ]
        }
        OpKind::Add => {
            let k = c(rand(&[2, 3, 4], 5));
            vec![
                (rand(&[2, 3, 4], 6), Box::new(move |t, x| {
                    let o = k(t);
                    let y = t.add(x, o)?;
                    contract(t, y)
                })),
                (rand(&[3, 3], 7), Box::new(|t, x| {
                    let y = t.add(x, x)?;
                    contract(t, y)
                })),
            ]
        }
        OpKind::Scale => vec![(rand(&[5], 8), Box::new(|t, x| {
            let y = t.scale(x, -2.5);
            contract(t, y)
        }))],
        OpKind::AddRowBias => {
            let m = c(rand(&[4, 3], 9));
            let b = c(rand(&[3], 10));
            vec![
                (rand(&[3], 11), Box::new(move |t, x| {
                    let mv = m(t);
                    let y = t.add_row_bias(mv, x)?;
                    contract(t, y)
                })),
                (rand(&[4, 3], 12), Box::new(move |t, x| {
                    let bv = b(t);
                    let y = t.add_row_bias(x, bv)?;
                    contract(t, y)
                })),
            ]
        }
        OpKind::Transpose => vec![(rand(&[3, 5], 13), Box::new(|t, x| {
            let y = t.transpose(x)?;
            contract(t, y)
        }))],
        OpKind::Reshape => vec![(rand(&[2, 6], 14), Box::new(|t, x| {
            let y = t.reshape(x, &[3, 2, 2])?;
            contract(t, y)
        }))],
        OpKind::Concat => {
            let k = c(rand(&[2, 2, 3], 15));
            vec![
                (rand(&[2, 3, 3], 16), Box::new(move |t, x| {
                    let o = k(t);
                    let y = t.concat(&[o, x, x], 1)?;
                    contract(t, y)
                })),
            ]
        }
        OpKind::Narrow => vec![(rand(&[3, 6, 2], 17), Box::new(|t, x| {
            let y = t.narrow(x, 1, 2, 3)?;
            contract(t, y)
        }))],
        OpKind::RepeatRows => vec![(rand(&[1, 4], 18), Box::new(|t, x| {
            let y = t.repeat_rows(x, 3)?;
            contract(t, y)
        }))],
        OpKind::Softmax => vec![
            (rand(&[3, 5], 19), Box::new(|t, x| {
                let y = t.softmax(x, 1)?;
                contract(t, y)
            })),
            (rand(&[4, 3, 2], 20), Box::new(|t, x| {
                let y = t.softmax(x, 0)?;
                contract(t, y)
            })),
        ],
        OpKind::LayerNorm => {
            let g = c(rand(&[6], 21));
            let b = c(rand(&[6], 22));
            let m = c(rand(&[3, 6], 23));
            let b1 = b.clone();
            vec![
                (rand(&[3, 6], 24), Box::new(move |t, x| {
                    let (gv, bv) = (g(t), b1(t));
                    let y = t.layer_norm(x, gv, bv, 1e-6)?;
                    contract(t, y)
                })),
                (rand(&[6], 25), Box::new(move |t, x| {
                    let (mv, bv) = (m(t), b(t));
                    let y = t.layer_norm(mv, x, bv, 1e-6)?;
                    contract(t, y)
                })),
            ]
        }
        OpKind::Gelu => vec![(Tensor::from_fn(&[9], |i| i as f64 * 0.7 - 2.9), Box::new(|t, x| {
            let y = t.gelu(x);
            contract(t, y)
        }))],
        OpKind::Sigmoid => vec![(Tensor::from_fn(&[7], |i| i as f64 * 1.3 - 4.1), Box::new(|t, x| {
            let y = t.sigmoid(x);
            contract(t, y)
        }))],
        OpKind::Conv2d => {
            let k = c(rand(&[3, 2, 3, 3], 26));
            let b = c(rand(&[3], 27));
            let img = c(rand(&[2, 6, 6], 28));
            let same = ConvGeometry {
                stride: 2,
                padding: Padding::same(3, 2),
            };
            vec![
                (rand(&[2, 6, 6], 29), Box::new(move |t, x| {
                    let (kv, bv) = (k(t), b(t));
                    let y = t.conv2d(x, kv, Some(bv), ConvGeometry::new(1, 1))?;
                    contract(t, y)
                })),
                (rand(&[3, 2, 3, 3], 30), Box::new(move |t, x| {
                    let iv = img(t);
                    let y = t.conv2d(iv, x, None, same)?;
                    contract(t, y)
                })),
            ]
        }
        OpKind::ConvTranspose2d => {
            let k = c(rand(&[2, 3, 2, 2], 31));
            let img = c(rand(&[2, 3, 3], 32));
            let (k1, img1) = (k.clone(), img.clone());
            vec![
                (rand(&[2, 3, 3], 33), Box::new(move |t, x| {
                    let kv = k1(t);
                    let y = t.conv_transpose2d(x, kv, None, ConvGeometry::new(2, 0))?;
                    contract(t, y)
                })),
                (rand(&[2, 3, 2, 2], 34), Box::new(move |t, x| {
                    let iv = img1(t);
                    let y = t.conv_transpose2d(iv, x, None, ConvGeometry::new(2, 0))?;
                    contract(t, y)
                })),
                (rand(&[3], 35), Box::new(move |t, x| {
                    let (iv, kv) = (img(t), k(t));
                    let y = t.conv_transpose2d(iv, kv, Some(x), ConvGeometry::new(2, 0))?;
                    contract(t, y)
                })),
            ]
        }
        OpKind::ResampleBilinear => {
            let coords = Tensor::uniform(&[3, 4, 2], -1.3, 5.3, &mut SeededRng::new(36));
            vec![(rand(&[2, 4, 5], 37), Box::new(move |t, x| {
                let y = t.resample_bilinear(x, &coords)?;
                contract(t, y)
            }))]
        }
        OpKind::Sum => vec![(rand(&[2, 3], 38), Box::new(|t, x| {
            let y = t.sum(x);
            let y = t.scale(y, 0.5);
            Ok(t.sum(y))
        }))],
        OpKind::Mean => vec![(rand(&[4, 2], 39), Box::new(|t, x| Ok(t.mean(x))))],
        OpKind::BevLoss => {
            let mut out: Vec<(Tensor, Case)> = Vec::new();
            for (form, lambda) in [(LossForm::Printed, 0.0), (LossForm::Printed, 0.3), (LossForm::EntropyBonus, 0.3)] {
                let gt = Tensor::from_fn(&[2, 3, 4], |i| f64::from((i * 7 % 5) < 2));
                let mask = Tensor::from_fn(&[3, 4], |i| f64::from(i % 3 == 0));
                let cfg = LossConfig {
                    class_weights: vec![0.3, 0.8],
                    lambda,
                    eps: 1e-7,
                    form,
                };
                let probs = Tensor::uniform(&[2, 3, 4], 0.05, 0.95, &mut SeededRng::new(40));
                out.push((probs, Box::new(move |t, x| bev_loss(t, x, &gt, &cfg, Some(&mask)))));
            }
            out
        }
    }
}

/// Worst relative error over the cases registered for `kind`.
pub fn check_op(kind: OpKind, fault: Option<OpKind>) -> Result<f64> {
    let make = || fault.map_or_else(Tape::new, Tape::with_fault);
    let mut worst: f64 = 0.0;
    for (input, f) in cases(kind) {
        worst = worst.max(finite_diff_check(make, |t, x| f(t, x), &input, STEP)?);
    }
    Ok(worst)
}

/// End-to-end check on `preset`: probes one entry of every parameter tensor
/// outside the middle encoder blocks, through the full forward and loss.
pub fn check_end_to_end(preset: Preset, fault: Option<OpKind>) -> Result<f64> {
    let palette = ClassPalette::default();
    let spec = BevGridSpec::default();
    let model = ModelConfig::new(preset, palette.len(), spec);
    let params = init_params(&model, 7)?;
    let sampler = SceneSampler::default();
    let scene = generate_scenes(7, 1, &sampler).remove(0);
    let sample = Sample::build(scene, &palette, &spec, model.encoder.width, model.encoder.height);
    let loss = LossConfig {
        class_weights: vec![0.6; palette.len()],
        lambda: 0.1,
        ..LossConfig::uniform(palette.len())
    };
    let last = model.encoder.blocks - 1;
    let mut rng = SeededRng::new(11);
    let probes: Vec<(String, usize)> = params
        .iter()
        .filter(|(name, _)| {
            !name.starts_with("encoder.blocks.") || name.starts_with("encoder.blocks.0.") || name.starts_with(&format!("encoder.blocks.{last}."))
        })
        .map(|(name, t)| (name.to_string(), rng.index(t.numel())))
        .collect();
    let input = sample.input();
    let make = || fault.map_or_else(Tape::new, Tape::with_fault);
    finite_diff_check_params(
        make,
        |tape, p| {
            let trace = forward(tape, p, &model, &input)?;
            bev_loss(tape, trace.probs, &sample.label.masks, &loss, Some(&sample.occluded))
        },
        &params,
        &probes,
        STEP,
    )
}

/// Every registered op, then (optionally) the end-to-end path.
pub fn run_suite(preset: Option<Preset>, fault: Option<OpKind>) -> Result<GradcheckReport> {
    let ops = OpKind::ALL
        .iter()
        .map(|&k| {
            Ok(CheckResult {
                name: k.name().to_string(),
                worst: check_op(k, fault)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let end_to_end = preset
        .map(|p| {
            Ok::<_, Error>(CheckResult {
                name: format!("end_to_end:{p}"),
                worst: check_end_to_end(p, fault)?,
            })
        })
        .transpose()?;
    Ok(GradcheckReport { ops, end_to_end })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_has_cases() {
        for k in OpKind::ALL {
            assert!(!cases(k).is_empty(), "{k}");
        }
    }

    #[test]
    fn op_suite_passes() {
        let report = run_suite(None, None).unwrap();
        assert_eq!(report.ops.len(), OpKind::ALL.len());
        assert!(report.passed(), "{}", report.to_text());
    }

    #[test]
    fn layer_norm_fault_is_named() {
        let report = run_suite(None, Some(OpKind::LayerNorm)).unwrap();
        assert_eq!(report.failures(), vec!["layer_norm"]);
    }
}
