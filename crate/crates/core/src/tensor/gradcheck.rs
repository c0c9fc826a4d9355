//! Gradient verification against central finite differences.
//!
//! The checker is fully independent of the backward rules it verifies: it
//! only calls the forward path on perturbed inputs, so a broken backward
//! rule cannot corrupt its reference values.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// One named input to the function under test.
#[derive(Clone, Debug)]
pub struct CheckInput {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl CheckInput {
    pub fn new(name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Self {
        CheckInput {
            name: name.into(),
            shape: shape.to_vec(),
            values,
        }
    }
}

/// Per-input relative-error summary.
#[derive(Clone, Debug)]
pub struct InputReport {
    pub name: String,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub elements: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }
}

/// Relative error `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of a scalar-valued tensor function
/// against central finite differences `(f(x+eps) - f(x-eps)) / (2 eps)`.
///
/// `f` must be deterministic; this is verified by evaluating it twice and
/// requiring bitwise-identical results.
pub fn grad_check<F>(f: F, inputs: &[CheckInput], eps: f64, _tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!("grad_check eps must be > 0, got {eps}")));
    }
    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let tape = Tape::eval();
        let leaves: Vec<Tensor> = inputs
            .iter()
            .zip(values)
            .map(|(inp, v)| tape.leaf(v.clone(), &inp.shape))
            .collect::<Result<_>>()?;
        let out = f(&tape, &leaves)?;
        if out.numel() != 1 {
            return Err(Error::shape(
                "grad_check",
                format!("function must return a scalar, got {:?}", out.shape()),
            ));
        }
        out.item()
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|i| i.values.clone()).collect();
    let y0 = eval(&base)?;
    let y1 = eval(&base)?;
    if y0.to_bits() != y1.to_bits() {
        return Err(Error::Numeric(
            "grad_check: function is not deterministic (two forward evaluations differ)".into(),
        ));
    }

    // analytic gradients
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|inp| tape.leaf(inp.values.clone(), &inp.shape))
        .collect::<Result<_>>()?;
    let out = f(&tape, &leaves)?;
    tape.backward(&out)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let mut report = GradCheckReport::default();
    for (ii, inp) in inputs.iter().enumerate() {
        let mut max_err = 0.0f64;
        let mut sum_err = 0.0f64;
        let n = inp.values.len();
        for k in 0..n {
            let mut plus = base.clone();
            plus[ii][k] += eps;
            let mut minus = base.clone();
            minus[ii][k] -= eps;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let err = rel_err(analytic[ii][k], fd);
            max_err = max_err.max(err);
            sum_err += err;
        }
        report.inputs.push(InputReport {
            name: inp.name.clone(),
            max_rel_err: max_err,
            mean_rel_err: if n > 0 { sum_err / n as f64 } else { 0.0 },
            elements: n,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn matmul_then_sum_matches_fd() {
        let f = |_t: &Tape, xs: &[Tensor]| {
            let p = ops::matmul(&xs[0], &xs[1])?;
            ops::sum_all(&p)
        };
        let inputs = vec![
            CheckInput::new("a", &[2, 2], vec![0.3, -0.7, 1.2, 0.5]),
            CheckInput::new("b", &[2, 2], vec![-0.2, 0.9, 0.4, -1.1]),
        ];
        let report = grad_check(f, &inputs, 1e-5, 1e-6).unwrap();
        assert!(report.max_rel_err() < 1e-6, "max {}", report.max_rel_err());
    }

    #[test]
    fn softmax_sum_is_constant_so_gradient_vanishes() {
        // sum(softmax(x)) == 1 for any x, so the true gradient is 0.
        // The analytic gradient is ~machine epsilon and the finite
        // difference is pure cancellation noise, so the relative error is
        // judged against the 1e-8 floor of the error formula.
        let f = |_t: &Tape, xs: &[Tensor]| {
            let s = ops::softmax(&xs[0], 0)?;
            ops::sum_all(&s)
        };
        let inputs = vec![CheckInput::new("x", &[4], vec![0.1, -0.4, 0.7, 0.0])];
        let report = grad_check(f, &inputs, 1e-5, 1e-2).unwrap();
        assert!(report.max_rel_err() < 1e-2, "max {}", report.max_rel_err());

        let tape = Tape::new();
        let x = tape.leaf(vec![0.1, -0.4, 0.7, 0.0], &[4]).unwrap();
        let loss = ops::sum_all(&ops::softmax(&x, 0).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        for g in x.grad().unwrap() {
            assert!(g.abs() < 1e-12, "analytic gradient should vanish, got {g}");
        }
    }

    #[test]
    fn layer_norm_sum_of_squares_matches_fd() {
        // Non-trivial gamma/beta so the composition is not a constant.
        let f = |t: &Tape, xs: &[Tensor]| {
            let gamma = t.leaf(vec![0.5, 1.5, -0.8, 1.1, 0.3, 2.0, -1.2, 0.7], &[8])?;
            let beta = t.leaf(vec![0.1, -0.2, 0.3, 0.0, -0.5, 0.4, 0.2, -0.1], &[8])?;
            let y = ops::layer_norm(&xs[0], &gamma, &beta, 1e-5)?;
            let sq = ops::mul(&y, &y)?;
            ops::sum_all(&sq)
        };
        let vals = vec![0.5, -1.2, 0.3, 2.1, -0.7, 0.0, 1.4, -0.9];
        let inputs = vec![CheckInput::new("x", &[8], vals)];
        let report = grad_check(f, &inputs, 1e-5, 1e-5).unwrap();
        assert!(report.max_rel_err() < 1e-5, "max {}", report.max_rel_err());
    }

    #[test]
    fn non_deterministic_function_rejected() {
        use std::cell::Cell;
        let counter = Cell::new(0.0f64);
        let f = move |t: &Tape, xs: &[Tensor]| {
            counter.set(counter.get() + 1.0);
            let noise = t.scalar(counter.get());
            let x = ops::sum_all(&xs[0])?;
            ops::mul(&x, &noise)
        };
        let inputs = vec![CheckInput::new("x", &[2], vec![1.0, 2.0])];
        let err = grad_check(f, &inputs, 1e-5, 1e-6).unwrap_err().to_string();
        assert!(err.contains("deterministic"), "{err}");
    }

    #[test]
    fn corrupted_backward_rule_is_detected_by_name() {
        // negative control: forward y = 2x, backward deliberately claims 3
        let f = |t: &Tape, xs: &[Tensor]| {
            let y = ops::test_support::scale_with_wrong_backward(&xs[0])?;
            let _ = t;
            ops::sum_all(&y)
        };
        let inputs = vec![CheckInput::new("wrong_scale_input", &[3], vec![1.0, -2.0, 0.5])];
        let report = grad_check(f, &inputs, 1e-5, 1e-4).unwrap();
        assert!(!report.passes(1e-4));
        let bad = &report.inputs[0];
        assert_eq!(bad.name, "wrong_scale_input");
        assert!(bad.max_rel_err > 0.3, "expected gross error, got {}", bad.max_rel_err);
    }
}
