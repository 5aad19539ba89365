//! Finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::tape::{GradTape, NodeId};

/// Relative error between an analytic and a numeric derivative, guarded
/// against division by ~0.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Checks the tape gradient of a scalar-valued function against central
/// differences, element by element, over every entry of every input.
///
/// `f` receives a fresh tape and one leaf node per input tensor and must
/// return the scalar output node. Returns the maximum relative error
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// Before differencing, `f` is evaluated twice on identical inputs; if the two
/// results are not bitwise equal the function is rejected as
/// non-deterministic, since finite differences would be meaningless.
pub fn gradient_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut GradTape, &[NodeId]) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "gradient_check eps must be positive, got {eps}"
        )));
    }

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = GradTape::new();
        let mut ids = Vec::with_capacity(tensors.len());
        for t in tensors {
            ids.push(tape.leaf(t.clone())?);
        }
        let out = f(&mut tape, &ids)?;
        tape.value(out).item()
    };

    let base1 = eval(inputs)?;
    let base2 = eval(inputs)?;
    if base1.to_bits() != base2.to_bits() {
        return Err(Error::NonDeterministic);
    }

    // Analytic gradients from one reverse pass.
    let mut tape = GradTape::new();
    let mut ids = Vec::with_capacity(inputs.len());
    for t in inputs {
        ids.push(tape.leaf(t.clone())?);
    }
    let out = f(&mut tape, &ids)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::NonScalarBackward(tape.value(out).shape().to_vec()));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .zip(ids.iter())
        .map(|(t, id)| {
            tape.grad(*id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    // Central differences, one element at a time.
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_err = 0.0f64;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let f_plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let f_minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let err = relative_error(analytic[i][j], numeric);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_for_central_differences() {
        // f(x) = sum(x^2): analytic [2, 4]; central difference is exact for
        // quadratics up to rounding.
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let err = gradient_check(
            |tape, ids| {
                let sq = tape.mul(ids[0], ids[0])?;
                tape.sum_all(sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err} too large");
    }

    #[test]
    fn rejects_nondeterministic_function() {
        use std::cell::Cell;
        let calls = Cell::new(0.0f64);
        let x = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        let res = gradient_check(
            |tape, ids| {
                calls.set(calls.get() + 1.0);
                let jitter = tape.leaf(Tensor::from_vec(vec![1], vec![calls.get()]).unwrap())?;
                let y = tape.add(ids[0], jitter)?;
                tape.sum_all(y)
            },
            &[x],
            1e-5,
        );
        assert!(matches!(res, Err(Error::NonDeterministic)));
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        let res = gradient_check(|tape, ids| tape.sum_all(ids[0]), &[x], 0.0);
        assert!(res.is_err());
    }
}
