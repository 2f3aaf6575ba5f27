//! Central finite-difference gradient checking in double precision.

use super::{AutodiffError, Graph, Tensor, Var};

/// Norms below this are treated as this value when forming a relative error,
/// so gradients that are exactly zero compare by absolute error instead.
pub const NORM_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Relative error per input tensor.
    pub per_input: Vec<f64>,
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// `|a - n|_2 / max(|a|_2, |n|_2, NORM_FLOOR)`.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(n)).max(NORM_FLOOR)
}

/// Compares reverse-mode gradients of `analytic` against central differences
/// of `numeric` with step `h`.
///
/// Both closures receive one variable per input tensor and must return a
/// scalar. `analytic` sees trainable leaves, `numeric` sees constants. They
/// are usually the same function; they differ when the analytic loss
/// contains a stop-gradient and `numeric` evaluates the matching surrogate.
pub fn gradient_check<A, N>(inputs: &[Tensor<f64>], h: f64, analytic: A, numeric: N) -> Result<GradCheck, AutodiffError>
where
    A: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>,
    N: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = analytic(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic_grads: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();

    let eval = |values: &[Tensor<f64>]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = numeric(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut work = inputs.to_vec();
    let mut numeric_grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut gi = vec![0.0; inputs[i].numel()];
        for (j, slot) in gi.iter_mut().enumerate() {
            let base = inputs[i].data()[j];
            work[i].data_mut()[j] = base + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = base - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = base;
            *slot = (up - down) / (2.0 * h);
        }
        numeric_grads.push(Tensor::new(inputs[i].shape().to_vec(), gi)?);
    }

    let per_input = analytic_grads
        .iter()
        .zip(&numeric_grads)
        .map(|(a, n)| relative_error(a.data(), n.data()))
        .collect();
    Ok(GradCheck {
        per_input,
        analytic: analytic_grads,
        numeric: numeric_grads,
    })
}
