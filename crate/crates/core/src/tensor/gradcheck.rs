use super::{ParameterSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::usage(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// Compares the tape gradient of scalar `f` at `input` against central
/// differences with step `h`; returns the worst [`relative_error`].
///
/// `make_tape` builds the tape used for the analytic pass, so a faulty
/// backward rule can be injected with [`Tape::with_fault`].
pub fn finite_diff_check<F>(
    make_tape: impl Fn() -> Tape,
    f: F,
    input: &Tensor,
    h: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::usage("finite-difference step must be positive"));
    }
    let mut tape = make_tape();
    let x = tape.leaf(input.clone().with_requires_grad(true));
    let y = f(&mut tape, x)?;
    scalar_of(&tape, y)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; input.numel()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(t.with_requires_grad(true));
        let y = f(&mut tape, x)?;
        scalar_of(&tape, y)
    };
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = input.clone();
        plus.data_mut()[i] += h;
        let mut minus = input.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

/// Finite-difference check over selected scalar entries `(name, flat index)`
/// of a parameter set; `f` builds the scalar loss from bound parameters.
pub fn finite_diff_check_params<F>(
    make_tape: impl Fn() -> Tape,
    f: F,
    params: &ParameterSet,
    probes: &[(String, usize)],
    h: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParameterSet) -> Result<Var>,
{
    let mut tape = make_tape();
    let y = f(&mut tape, params)?;
    scalar_of(&tape, y)?;
    tape.backward(y)?;
    let mut with_grads = params.clone();
    with_grads.clear_grads();
    tape.accumulate_param_grads(&mut with_grads, 1.0)?;

    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut tape = Tape::new();
        let y = f(&mut tape, p)?;
        scalar_of(&tape, y)
    };
    let mut worst: f64 = 0.0;
    let mut probe_params = params.clone();
    for (name, idx) in probes {
        let a = with_grads
            .get(name)?
            .grad()
            .map(|g| g[*idx])
            .ok_or_else(|| Error::usage(format!("parameter `{name}` was not used")))?;
        let orig = params.get(name)?.data()[*idx];
        probe_params.get_mut(name)?.data_mut()[*idx] = orig + h;
        let fp = eval(&probe_params)?;
        probe_params.get_mut(name)?.data_mut()[*idx] = orig - h;
        let fm = eval(&probe_params)?;
        probe_params.get_mut(name)?.data_mut()[*idx] = orig;
        worst = worst.max(relative_error(a, (fp - fm) / (2.0 * h)));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let f = |t: &mut Tape, x: Var| {
            let x2 = t.reshape(x, &[1, 2])?;
            let xt = t.transpose(x2)?;
            t.matmul(x2, xt)
        };
        let err = finite_diff_check(Tape::new, f, &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");

        let mut tape = Tape::new();
        let v = tape.leaf(x.clone().with_requires_grad(true));
        let y = f(&mut tape, v).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn rejects_non_scalar_function() {
        let x = Tensor::zeros(&[3]);
        let r = finite_diff_check(Tape::new, |_, x| Ok(x), &x, 1e-5);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn relative_error_uses_unit_floor() {
        assert_eq!(relative_error(1e-8, 2e-8), 1e-8);
        assert_eq!(relative_error(100.0, 101.0), 1.0 / 101.0);
    }
}
