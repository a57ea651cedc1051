use super::{Bindings, Graph};
use crate::error::{Error, Result};

/// Largest discrepancy found for one trainable input.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterCheck {
    pub name: String,
    pub elements: usize,
    pub max_relative_error: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub parameters: Vec<ParameterCheck>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradientCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.parameters
            .iter()
            .map(|p| p.max_relative_error)
            .fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients with central differences of step `step`.
///
/// The error of element `i` is `|a_i - n_i| / max(|a_i|, |n_i|, 1e-3 · max_j |n_j|)`
/// where `a` is the analytic and `n` the numeric gradient of one parameter;
/// the floor keeps entries that are negligible next to the parameter's
/// dominant gradient from reporting pure round-off.
pub fn finite_difference_check(
    graph: &Graph,
    bindings: &Bindings,
    step: f64,
    tol: f64,
) -> Result<GradientCheck> {
    if !(step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let output = graph.output().ok_or(Error::NoOutput)?;
    let run = graph.gradient(bindings)?;
    let mut probe = bindings.clone();
    let eval_at = |probe: &Bindings| -> Result<f64> { Ok(graph.evaluate(probe)?.value(output).data()[0]) };

    let mut names: Vec<&str> = graph.inputs().filter(|i| i.2).map(|i| i.0).collect();
    names.sort_unstable();
    let mut parameters = Vec::with_capacity(names.len());
    for name in names {
        let analytic = run.grad(name).expect("every trainable input has a gradient");
        let n = analytic.len();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let original = probe[name].data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = original + step;
            let plus = eval_at(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = original - step;
            let minus = eval_at(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = original;
            *slot = (plus - minus) / (2.0 * step);
        }
        let scale = numeric.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let mut worst = (0.0, 0);
        for (i, (&a, &num)) in analytic.data().iter().zip(&numeric).enumerate() {
            let denom = a.abs().max(num.abs()).max(1e-3 * scale);
            let err = if denom == 0.0 { 0.0 } else { (a - num).abs() / denom };
            if err > worst.0 {
                worst = (err, i);
            }
        }
        parameters.push(ParameterCheck {
            name: name.to_string(),
            elements: n,
            max_relative_error: worst.0,
            worst_index: worst.1,
        });
    }
    let passed = parameters.iter().all(|p| p.max_relative_error <= tol);
    Ok(GradientCheck {
        parameters,
        tolerance: tol,
        passed,
    })
}
