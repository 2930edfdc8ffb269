use super::ParameterSet;
use crate::error::{Error, Result};

/// Plain SGD with L2 weight decay: `θ ← θ − lr·(∇θ + weight_decay·θ)`, then
/// gradients are zeroed. Every parameter must carry a gradient.
pub fn sgd_step(params: &mut ParameterSet, lr: f64, weight_decay: f64) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
        return Err(Error::usage(format!("parameter `{name}` has no gradient")));
    }
    for (_, t) in params.iter_mut() {
        let grad = t.grad().expect("checked above").to_vec();
        for (theta, g) in t.data_mut().iter_mut().zip(&grad) {
            *theta -= lr * (g + weight_decay * *theta);
        }
        t.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(theta: f64, grad: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        let mut t = Tensor::scalar(theta);
        t.accumulate_grad(&[grad], 1.0);
        p.insert("w", t).unwrap();
        p
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = single(1.25, 3.0);
        sgd_step(&mut p, 0.0, 0.001).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.25]);
    }

    #[test]
    fn plain_step() {
        let mut p = single(1.0, 1.0);
        sgd_step(&mut p, 0.1, 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.9]);
        assert_eq!(p.get("w").unwrap().grad().unwrap(), &[0.0]);
    }

    #[test]
    fn weight_decay_only() {
        let mut p = single(1.0, 0.0);
        sgd_step(&mut p, 0.05, 0.001).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.99995).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut p = ParameterSet::new();
        p.init_zeros("decoder.head.bias", &[2]).unwrap();
        let err = sgd_step(&mut p, 0.1, 0.0).unwrap_err();
        assert!(err.to_string().contains("decoder.head.bias"));
    }
}
