use super::{Tape, Tensor, Var};
use crate::error::{CarError, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Largest relative error between the tape gradient of the scalar `f` and
/// central differences, over every element of every input.
///
/// The relative error of a pair `(a, b)` is `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let probes: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
        .collect();
    grad_check_at(f, inputs, &probes)
}

/// Like [`grad_check`] but only probes the listed `(input, element)` pairs.
pub fn grad_check_at<F>(f: F, inputs: &[Tensor], probes: &[(usize, usize)]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.rank() != 0 {
            return Err(CarError::shape("grad_check", "function must be scalar-valued"));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_finite() {
        return Err(CarError::NonFinite("grad_check forward value".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut worst = 0.0_f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for &(i, e) in probes {
        let orig = inputs[i].data()[e];
        work[i].data_mut()[e] = orig + FD_STEP;
        let plus = eval(&work)?;
        work[i].data_mut()[e] = orig - FD_STEP;
        let minus = eval(&work)?;
        work[i].data_mut()[e] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[i].data()[e];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(CarError::NonFinite(format!(
                "gradient of input {} element {}",
                i, e
            )));
        }
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![3], vec![0.4, -1.0, 1.7]).unwrap();
        let err = grad_check(
            |t, v| {
                let y = t.scale(v[0], 2.5);
                Ok(t.sum(y))
            },
            &[x],
        )
        .unwrap();
        assert!(err < 1e-10, "{}", err);
    }

    #[test]
    fn leaky_relu_away_from_kink() {
        let x = Tensor::new(vec![4], vec![-2.5, -0.7, 0.3, 1.9]).unwrap();
        let err = grad_check(
            |t, v| {
                let y = t.leaky_relu(v[0], 0.2)?;
                let y = t.square(y);
                Ok(t.sum(y))
            },
            &[x],
        )
        .unwrap();
        assert!(err < 1e-6, "{}", err);
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::new(vec![1], vec![f64::INFINITY]).unwrap();
        let r = grad_check(|t, v| Ok(t.sum(v[0])), &[x]);
        assert!(matches!(r, Err(CarError::NonFinite(_))));
    }
}
