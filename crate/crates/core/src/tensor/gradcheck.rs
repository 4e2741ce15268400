//! Central-difference gradient verification in `f64`.

use super::array::NdArray;
use super::graph::{Graph, Tensor};
use crate::error::{Error, Result};

/// Relative error floor used in the denominator.
pub const REL_FLOOR: f64 = 1e-8;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` gradients against central differences of `value` at `inputs`.
///
/// `coords` restricts the comparison to `(input, flat index)` pairs; `None` checks
/// every coordinate. Returns the maximum relative error.
pub fn compare_gradients(
    value: impl Fn(&[NdArray<f64>]) -> Result<f64>,
    analytic: &[NdArray<f64>],
    inputs: &[NdArray<f64>],
    eps: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<f64> {
    if analytic.len() != inputs.len() {
        return Err(Error::Misuse(format!(
            "{} analytic gradients for {} inputs",
            analytic.len(),
            inputs.len()
        )));
    }
    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, a)| (0..a.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };
    let mut perturbed = inputs.to_vec();
    let mut worst = 0.0f64;
    for &(i, j) in coords {
        let orig = inputs[i].data()[j];
        perturbed[i].data_mut()[j] = orig + eps;
        let plus = value(&perturbed)?;
        perturbed[i].data_mut()[j] = orig - eps;
        let minus = value(&perturbed)?;
        perturbed[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i].data()[j];
        if !(numeric.is_finite() && a.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient at input {i}[{j}]: analytic {a}, numeric {numeric}"
            )));
        }
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

fn eval_graph<F>(f: &F, inputs: &[NdArray<f64>], with_grad: bool) -> Result<(f64, Vec<NdArray<f64>>)>
where
    F: Fn(&mut Graph<f64>, &[Tensor]) -> Result<Tensor>,
{
    let mut g = Graph::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|a| g.leaf(a.clone(), with_grad)).collect();
    let out = f(&mut g, &leaves)?;
    let v = g.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("function value {v}")));
    }
    if !with_grad {
        return Ok((v, Vec::new()));
    }
    g.backward(out)?;
    let grads = leaves
        .iter()
        .zip(inputs)
        .map(|(&t, a)| g.grad(t).cloned().unwrap_or_else(|| NdArray::zeros(a.shape().to_vec())))
        .collect();
    Ok((v, grads))
}

/// Reverse-mode gradients of the scalar built by `f`, for every input.
pub fn graph_gradients<F>(f: &F, inputs: &[NdArray<f64>]) -> Result<Vec<NdArray<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Tensor]) -> Result<Tensor>,
{
    Ok(eval_graph(f, inputs, true)?.1)
}

/// Checks the graph-built scalar `f` over every input coordinate.
pub fn finite_diff_check<F>(f: F, inputs: &[NdArray<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Tensor]) -> Result<Tensor>,
{
    let analytic = graph_gradients(&f, inputs)?;
    compare_gradients(|x| Ok(eval_graph(&f, x, false)?.0), &analytic, inputs, eps, None)
}

/// As [`finite_diff_check`] but only at the listed `(input, flat index)` coordinates.
pub fn finite_diff_check_at<F>(f: F, inputs: &[NdArray<f64>], eps: f64, coords: &[(usize, usize)]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Tensor]) -> Result<Tensor>,
{
    let analytic = graph_gradients(&f, inputs)?;
    compare_gradients(|x| Ok(eval_graph(&f, x, false)?.0), &analytic, inputs, eps, Some(coords))
}
