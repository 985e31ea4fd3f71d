//! Central finite-difference gradient verification.
//!
//! The op under test is rebuilt on a fresh tape for every perturbation.
//! Non-scalar outputs are reduced with a fixed random projection. Elements
//! where the left and right one-sided slopes disagree are treated as kinks
//! and excluded.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const PROJECTION_SEED: u64 = 0x5eed_9a7d;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Checks at most this many elements per input, evenly strided.
    pub max_elements: Option<usize>,
    /// Relative one-sided slope disagreement above which an element is a kink.
    pub kink_threshold: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { tolerance: 1e-4, max_elements: None, kink_threshold: 1e-3 }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Flat indices skipped as non-differentiable points.
    pub kinks: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(op: &F, values: &[Tensor<f64>], projection: &mut Option<Tensor<f64>>) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
    let out = op(&mut tape, &vars)?;
    if tape.is_stochastic() {
        return Err(Error::NonDeterministic(
            "the op drew random values during forward; fix the draw (disable stochastic mode) before checking".into(),
        ));
    }
    let loss = if tape.value(out).len() == 1 {
        out
    } else {
        let proj = projection.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
            Tensor::from_fn(tape.shape(out), |_| rng.random_range(-1.0..1.0))
        });
        let p = tape.constant(proj.clone());
        let prod = tape.mul(out, p)?;
        tape.sum_all(prod)?
    };
    Ok((tape, vars, loss))
}

/// Compares tape gradients of `op` against central differences.
pub fn grad_check<F>(inputs: &[(&str, Tensor<f64>)], op: F, options: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if inputs.iter().any(|(_, t)| !t.all_finite()) {
        return Err(invalid("grad_check", "inputs must be finite"));
    }
    let base: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut projection = None;
    let (tape, vars, loss) = evaluate(&op, &base, &mut projection)?;
    let f0 = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let scalar = |values: &[Tensor<f64>], proj: &mut Option<Tensor<f64>>| -> Result<f64> {
        let (tape, _, loss) = evaluate(&op, values, proj)?;
        Ok(tape.value(loss).item())
    };

    let mut reports = Vec::with_capacity(inputs.len());
    for (which, (name, value)) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[which]).cloned().unwrap_or_else(|| Tensor::zeros(value.shape()));
        let n = value.len();
        let stride = options.max_elements.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        let mut report = InputReport { name: name.to_string(), max_rel_error: 0.0, checked: 0, kinks: Vec::new() };
        let mut values = base.clone();
        for idx in (0..n).step_by(stride) {
            let x = base[which].data()[idx];
            let h = 1e-5 * x.abs().max(1.0);
            values[which].data_mut()[idx] = x + h;
            let fp = scalar(&values, &mut projection)?;
            values[which].data_mut()[idx] = x - h;
            let fm = scalar(&values, &mut projection)?;
            values[which].data_mut()[idx] = x;
            let right = (fp - f0) / h;
            let left = (f0 - fm) / h;
            if (right - left).abs() > options.kink_threshold * (right.abs() + left.abs()).max(1.0) {
                report.kinks.push(idx);
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(analytic.data()[idx], numeric);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
        reports.push(report);
    }
    Ok(GradCheckReport { inputs: reports, tolerance: options.tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_at_zero_is_excluded() {
        let x = Tensor::from_vec(&[4], vec![0.0, 0.5, -0.7, 0.0]);
        let report = grad_check(&[("x", x)], |t, v| t.relu(v[0]), &GradCheckOptions::default()).unwrap();
        assert_eq!(report.inputs[0].kinks, vec![0, 3]);
        assert!(report.passed());
    }

    #[test]
    fn stochastic_ops_are_refused() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]);
        let err = grad_check(
            &[("x", x)],
            |t, v| {
                t.mark_stochastic();
                t.sum_all(v[0])
            },
            &GradCheckOptions::default(),
        );
        assert!(matches!(err, Err(Error::NonDeterministic(_))));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::from_vec(&[3], vec![0.3, -1.2, 2.0]);
        let report = grad_check(
            &[("x", x)],
            |t, v| {
                let doubled = t.value(v[0]).scale(2.0);
                // backward claims a factor of 3
                let y = t.push("bad_scale", doubled, vec![v[0]], Box::new(|a| Ok(vec![Some(a.grad.scale(3.0))])));
                t.sum_all(y)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert!((report.max_rel_error() - 0.2).abs() < 1e-6);
    }
}
