use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Fixed weight used to project a tensor-valued function output onto a
/// scalar. Weights stay in `[0.5, 1.5]` so no output coordinate is ignored.
pub fn projection_weight(k: usize) -> f64 {
    1.0 + 0.5 * (1.3 * k as f64 + 0.7).sin()
}

fn projected<F>(f: &F, inputs: &[Tensor], grad: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if grad { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let y = f(&mut tape, &vars)?;
    let shape = tape.shape(y).to_vec();
    let weights = Tensor::from_fn(&shape, projection_weight);
    let w = tape.constant(weights);
    let prod = tape.hadamard(y, w)?;
    let s = tape.sum(prod);
    Ok((tape, vars, s))
}

/// Gradients smaller than this sit near the resolution of a central
/// difference in `f64`, so they are compared on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

/// Central finite-difference check of `f` with respect to every coordinate
/// of every input. Tensor-valued outputs are projected onto a scalar with
/// [`projection_weight`]. Returns the max over coordinates of
/// `|analytic - numeric| / max(REL_FLOOR, |numeric|)`.
pub fn finite_diff_check_multi<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step {eps} must be positive")));
    }
    let (tape, vars, s) = projected(&f, inputs, true)?;
    let grads = tape.backward(s)?;
    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient").data().to_vec();
        for k in 0..inputs[which].numel() {
            let orig = inputs[which].data()[k];
            probe[which].data_mut()[k] = orig + eps;
            let (t_plus, _, s_plus) = projected(&f, &probe, false)?;
            probe[which].data_mut()[k] = orig - eps;
            let (t_minus, _, s_minus) = projected(&f, &probe, false)?;
            probe[which].data_mut()[k] = orig;
            let (fp, fm) = (t_plus.value(s_plus).item(), t_minus.value(s_minus).item());
            if !(fp.is_finite() && fm.is_finite() && analytic[k].is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite value while checking input {which} coordinate {k}"
                )));
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let rel = (analytic[k] - numeric).abs() / numeric.abs().max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Single-input form of [`finite_diff_check_multi`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_has_zero_error() {
        let x = Tensor::from_fn(&[3, 4], |k| k as f64 * 0.3 - 1.0);
        let err = finite_diff_check(|_, v| Ok(v), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn tanh_on_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn(&[5, 3], |_| rng.random_range(-1.0..1.0));
        let err = finite_diff_check(|t, v| Ok(t.tanh(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // x * stop_grad(x): the tape sees half the true derivative.
        let x = Tensor::from_fn(&[4], |k| k as f64 * 0.1 + 0.5);
        let err = finite_diff_check(
            |t, v| {
                let c = t.constant(t.value(v).clone());
                t.hadamard(v, c)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!((err - 0.5).abs() < 1e-6, "{err}");
        // Tiny gradients are judged on absolute error.
        let small = Tensor::from_fn(&[3], |_| 1e-9);
        let err = finite_diff_check(|t, v| Ok(t.scale(v, 1e-3)), &small, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_is_an_error() {
        let x = Tensor::from_fn(&[2], |_| -1.0);
        assert!(matches!(finite_diff_check(|t, v| Ok(t.ln(v)), &x, 1e-5), Err(Error::Numeric(_))));
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::zeros(&[1]);
        assert!(finite_diff_check(|_, v| Ok(v), &x, 0.0).is_err());
    }
}
