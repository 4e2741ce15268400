//! Finite-difference audit of a whole network's backward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::plan::{self, GraphEval, PatternEval};
use super::Network;
use crate::error::{Error, Result};
use crate::tensor::{relative_error, Graph, NdArray, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGradReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_error: f64,
    /// Parameter name and flat index of that coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric gradient at that coordinate.
    pub worst_values: (f64, f64),
    pub checked: usize,
    /// Coordinates whose `+-eps` perturbation flips an activation sign or a pooling
    /// argmax; the central difference there straddles a kink and is not a derivative.
    pub kink_skipped: usize,
    /// Biases feeding instance norm, whose analytic gradient must be zero.
    pub norm_fed_bias: usize,
    pub max_norm_fed_bias_grad: f64,
    pub max_norm_fed_bias_numeric: f64,
}

/// Loss: every head's logits weighted by fixed coefficients in `[0.5, 1.5]`, summed.
struct Probe<'a> {
    net: &'a Network<f64>,
    x: &'a NdArray<f64>,
    weights: Vec<NdArray<f64>>,
}

impl Probe<'_> {
    fn loss(&self, g: &mut Graph<f64>, outs: Vec<Tensor>) -> Result<Tensor> {
        let mut total = None;
        for (o, w) in outs.into_iter().zip(&self.weights) {
            let w = g.constant(w.clone());
            let m = g.mul(o, w)?;
            let s = g.sum(m)?;
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
        total.ok_or_else(|| Error::Misuse("network produced no outputs".into()))
    }

    fn value(&self, params: &[NdArray<f64>]) -> Result<(f64, Vec<u32>)> {
        let mut g = Graph::new();
        let leaves: Vec<Tensor> = params.iter().map(|p| g.constant(p.clone())).collect();
        let input = g.constant(self.x.clone());
        let mut e = PatternEval {
            inner: GraphEval { g: &mut g, params: &leaves },
            pattern: Vec::new(),
        };
        let outs = plan::run(&mut e, &self.net.program, input)?.outputs;
        let pattern = std::mem::take(&mut e.pattern);
        let loss = self.loss(&mut g, outs)?;
        Ok((g.value(loss).item()?, pattern))
    }

    fn analytic(&self) -> Result<Vec<NdArray<f64>>> {
        let mut g = Graph::new();
        let leaves = self.net.bind(&mut g, true);
        let input = g.constant(self.x.clone());
        let outs = self.net.forward_bound(&mut g, &leaves, input)?;
        let loss = self.loss(&mut g, outs)?;
        g.backward(loss)?;
        Ok(leaves
            .iter()
            .zip(self.net.params.values())
            .map(|(&t, p)| g.grad(t).cloned().unwrap_or_else(|| NdArray::zeros(p.shape().to_vec())))
            .collect())
    }
}

/// Compares reverse-mode parameter gradients of `net` against central differences
/// with step `eps`.
///
/// With `per_tensor = Some(k)` every parameter tensor contributes `k` coordinates
/// drawn from `seed`; `None` visits every scalar.
pub fn check_network_gradients(
    net: &Network<f64>,
    x: &NdArray<f64>,
    eps: f64,
    seed: u64,
    per_tensor: Option<usize>,
) -> Result<NetworkGradReport> {
    let shape: [usize; 5] = x
        .shape()
        .try_into()
        .map_err(|_| Error::Shape(format!("network input must be 5-D, got {:?}", x.shape())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = net
        .shape_walk(shape)?
        .outputs
        .iter()
        .map(|s| NdArray::uniform(s.to_vec(), 0.5, 1.5, &mut rng))
        .collect();
    let probe = Probe { net, x, weights };
    let analytic = probe.analytic()?;
    let (_, base) = probe.value(net.params.values())?;
    let zero_biases = net.program.norm_fed_biases();

    let mut report = NetworkGradReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        checked: 0,
        kink_skipped: 0,
        norm_fed_bias: 0,
        max_norm_fed_bias_grad: 0.0,
        max_norm_fed_bias_numeric: 0.0,
    };
    let mut params = net.params.values().to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        let coords = match per_tensor {
            Some(k) => rand::seq::index::sample(&mut rng, grad.len(), k.min(grad.len())).into_vec(),
            None => (0..grad.len()).collect(),
        };
        for j in coords {
            let orig = params[i].data()[j];
            params[i].data_mut()[j] = orig + eps;
            let (plus, p_plus) = probe.value(&params)?;
            params[i].data_mut()[j] = orig - eps;
            let (minus, p_minus) = probe.value(&params)?;
            params[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[j];
            if !(numeric.is_finite() && a.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at {}[{j}]: analytic {a}, numeric {numeric}",
                    net.params.names()[i]
                )));
            }
            if zero_biases.contains(&i) {
                report.norm_fed_bias += 1;
                report.max_norm_fed_bias_grad = report.max_norm_fed_bias_grad.max(a.abs());
                report.max_norm_fed_bias_numeric = report.max_norm_fed_bias_numeric.max(numeric.abs());
                continue;
            }
            if p_plus != base || p_minus != base {
                report.kink_skipped += 1;
                continue;
            }
            report.checked += 1;
            let e = relative_error(a, numeric);
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(e);
                report.worst = Some((net.params.names()[i].clone(), j));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}
