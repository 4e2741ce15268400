use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Element, Graph, NdArray, Tensor};
use crate::volcore::{Dims, LabelMask};

/// Integer class labels for a batch, laid out `(n, z, y, x)` with x fastest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Target {
    n: usize,
    dims: Dims,
    labels: Vec<u8>,
}

impl Target {
    pub fn new(n: usize, dims: Dims, labels: Vec<u8>) -> Result<Self> {
        let expected = n * dims.iter().product::<usize>();
        if labels.len() != expected {
            return Err(Error::Shape(format!(
                "{} labels for batch {n} of {dims:?}",
                labels.len()
            )));
        }
        Ok(Self { n, dims, labels })
    }

    pub fn from_masks(masks: &[LabelMask]) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| Error::Misuse("empty target batch".into()))?;
        let dims = first.dims();
        let mut labels = Vec::with_capacity(masks.len() * first.labels().len());
        for m in masks {
            if m.dims() != dims {
                return Err(Error::Shape(format!("target dims {:?} vs {dims:?}", m.dims())));
            }
            labels.extend_from_slice(m.labels());
        }
        Ok(Self {
            n: masks.len(),
            dims,
            labels,
        })
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Checks `(n, c, z, y, x)` against this target and that every label is below `c`.
    fn check(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() != 5 || shape[0] != self.n || shape[2..] != self.dims {
            return Err(Error::Shape(format!(
                "prediction {shape:?} does not match target batch {} of {:?}",
                self.n, self.dims
            )));
        }
        let c = shape[1];
        if let Some(&bad) = self.labels.iter().find(|&&l| usize::from(l) >= c) {
            return Err(Error::Misuse(format!("target label {bad} with only {c} classes")));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_smooth")]
    pub dice_smooth: f64,
    /// Finest first. Empty means the default halving schedule for however many heads exist.
    #[serde(default)]
    pub ds_weights: Vec<f64>,
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
}

fn default_smooth() -> f64 {
    1e-5
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            dice_smooth: default_smooth(),
            ds_weights: Vec::new(),
            class_weights: None,
        }
    }
}

/// Weights proportional to `2^-l`, normalized to sum 1.
pub fn default_ds_weights(levels: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..levels).map(|l| 0.5f64.powi(l as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dice_smooth > 0.0 && self.dice_smooth.is_finite()) {
            return Err(Error::Config(format!("dice_smooth must be > 0, got {}", self.dice_smooth)));
        }
        if !self.ds_weights.is_empty() {
            if self.ds_weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
                return Err(Error::Config(format!("ds_weights must be >= 0: {:?}", self.ds_weights)));
            }
            let sum: f64 = self.ds_weights.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("ds_weights sum to {sum}, expected 1")));
            }
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(Error::Config(format!("class_weights must be >= 0: {w:?}")));
            }
        }
        Ok(())
    }

    /// The supervision weights for `heads` outputs.
    pub fn ds_weights_for(&self, heads: usize) -> Result<Vec<f64>> {
        if self.ds_weights.is_empty() {
            return Ok(default_ds_weights(heads));
        }
        if self.ds_weights.len() != heads {
            return Err(Error::Config(format!(
                "{} ds_weights for {heads} outputs",
                self.ds_weights.len()
            )));
        }
        Ok(self.ds_weights.clone())
    }
}

struct CrossEntropy {
    labels: Vec<u8>,
    weights: Vec<f64>,
}

/// Per-voxel softmax of a `(c)`-strided column, in f64.
fn softmax_at<T: Element>(data: &[T], base: usize, c: usize, spatial: usize, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for k in 0..c {
        max = max.max(data[base + k * spatial].as_f64());
    }
    let mut sum = 0.0;
    for k in 0..c {
        out[k] = (data[base + k * spatial].as_f64() - max).exp();
        sum += out[k];
    }
    for v in out.iter_mut().take(c) {
        *v /= sum;
    }
}

impl<T: Element> CustomOp<T> for CrossEntropy {
    fn name(&self) -> &str {
        "cross_entropy"
    }

    fn backward(&self, inputs: &[&NdArray<T>], _: &NdArray<T>, grad_out: &NdArray<T>) -> Result<Vec<Option<NdArray<T>>>> {
        let logits = inputs[0];
        let (n, c, spatial) = nc_spatial(logits.shape());
        let upstream = grad_out.item()?.as_f64();
        let scale = upstream / (n * spatial) as f64;
        let data = logits.data();
        let mut grad = vec![T::zero(); data.len()];
        let mut p = vec![0.0; c];
        for b in 0..n {
            for s in 0..spatial {
                let base = b * c * spatial + s;
                softmax_at(data, base, c, spatial, &mut p);
                let t = usize::from(self.labels[b * spatial + s]);
                let w = self.weights[t] * scale;
                for k in 0..c {
                    let onehot = if k == t { 1.0 } else { 0.0 };
                    grad[base + k * spatial] = T::from_f64_lossy(w * (p[k] - onehot));
                }
            }
        }
        Ok(vec![Some(NdArray::from_vec(logits.shape().to_vec(), grad)?)])
    }
}

fn nc_spatial(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

fn class_weights(cfg: &LossConfig, c: usize) -> Result<Vec<f64>> {
    match &cfg.class_weights {
        None => Ok(vec![1.0; c]),
        Some(w) if w.len() == c => Ok(w.clone()),
        Some(w) => Err(Error::Config(format!("{} class_weights for {c} classes", w.len()))),
    }
}

/// Mean over voxels of `-w_t log softmax(logits)_t`, stabilized by log-sum-exp.
pub fn cross_entropy_loss<T: Element>(
    g: &mut Graph<T>,
    logits: Tensor,
    target: &Target,
    cfg: &LossConfig,
) -> Result<Tensor> {
    let shape = g.shape(logits).to_vec();
    let c = target.check(&shape)?;
    let weights = class_weights(cfg, c)?;
    let (n, _, spatial) = nc_spatial(&shape);
    let data = g.value(logits).data();
    let mut total = 0.0;
    for b in 0..n {
        for s in 0..spatial {
            let base = b * c * spatial + s;
            let mut max = f64::NEG_INFINITY;
            for k in 0..c {
                max = max.max(data[base + k * spatial].as_f64());
            }
            let lse = max + (0..c).map(|k| (data[base + k * spatial].as_f64() - max).exp()).sum::<f64>().ln();
            let t = usize::from(target.labels[b * spatial + s]);
            total += weights[t] * (lse - data[base + t * spatial].as_f64());
        }
    }
    let value = NdArray::scalar(T::from_f64_lossy(total / (n * spatial) as f64));
    g.custom(
        &[logits],
        value,
        Box::new(CrossEntropy {
            labels: target.labels.clone(),
            weights,
        }),
    )
}

struct SoftDice {
    labels: Vec<u8>,
    smooth: f64,
}

/// Per foreground class: (intersection, sum of probs, sum of one-hot).
fn dice_sums<T: Element>(probs: &NdArray<T>, labels: &[u8]) -> Vec<(f64, f64, f64)> {
    let (n, c, spatial) = nc_spatial(probs.shape());
    let data = probs.data();
    let mut sums = vec![(0.0, 0.0, 0.0); c];
    for b in 0..n {
        for k in 1..c {
            let row = &data[(b * c + k) * spatial..(b * c + k + 1) * spatial];
            let lab = &labels[b * spatial..(b + 1) * spatial];
            let entry = &mut sums[k];
            for (p, &l) in row.iter().zip(lab) {
                let p = p.as_f64();
                entry.1 += p;
                if usize::from(l) == k {
                    entry.0 += p;
                    entry.2 += 1.0;
                }
            }
        }
    }
    sums
}

impl<T: Element> CustomOp<T> for SoftDice {
    fn name(&self) -> &str {
        "soft_dice"
    }

    fn backward(&self, inputs: &[&NdArray<T>], _: &NdArray<T>, grad_out: &NdArray<T>) -> Result<Vec<Option<NdArray<T>>>> {
        let probs = inputs[0];
        let (n, c, spatial) = nc_spatial(probs.shape());
        let upstream = grad_out.item()?.as_f64();
        let sums = dice_sums(probs, &self.labels);
        let fg = (c - 1) as f64;
        let mut grad = vec![T::zero(); probs.len()];
        for k in 1..c {
            let (inter, sp, sg) = sums[k];
            let num = 2.0 * inter + self.smooth;
            let den = sp + sg + self.smooth;
            // dD/dp = (2g·den - num) / den^2, loss = 1 - mean D.
            let on = -upstream / fg * (2.0 * den - num) / (den * den);
            let off = -upstream / fg * (-num) / (den * den);
            for b in 0..n {
                let lab = &self.labels[b * spatial..(b + 1) * spatial];
                let row = &mut grad[(b * c + k) * spatial..(b * c + k + 1) * spatial];
                for (gv, &l) in row.iter_mut().zip(lab) {
                    *gv = T::from_f64_lossy(if usize::from(l) == k { on } else { off });
                }
            }
        }
        Ok(vec![Some(NdArray::from_vec(probs.shape().to_vec(), grad)?)])
    }
}

/// `1 - mean_c D_c` over foreground classes, with soft Dice summed over batch and voxels.
pub fn dice_loss<T: Element>(g: &mut Graph<T>, probs: Tensor, target: &Target, cfg: &LossConfig) -> Result<Tensor> {
    let shape = g.shape(probs).to_vec();
    let c = target.check(&shape)?;
    if c < 2 {
        return Err(Error::Shape(format!("dice needs at least 2 classes, got {c}")));
    }
    let p = g.value(probs);
    if let Some(bad) = p.data().iter().map(|v| v.as_f64()).find(|v| !(-1e-6..=1.0 + 1e-6).contains(v)) {
        return Err(Error::Misuse(format!("dice_loss expects probabilities, found {bad}")));
    }
    let s = cfg.dice_smooth;
    let sums = dice_sums(p, target.labels());
    let mean_dice = sums[1..]
        .iter()
        .map(|&(inter, sp, sg)| (2.0 * inter + s) / (sp + sg + s))
        .sum::<f64>()
        / (c - 1) as f64;
    let value = NdArray::scalar(T::from_f64_lossy(1.0 - mean_dice));
    g.custom(
        &[probs],
        value,
        Box::new(SoftDice {
            labels: target.labels.clone(),
            smooth: s,
        }),
    )
}

/// Cross-entropy on logits plus Dice on their softmax, unweighted.
pub fn combined_loss<T: Element>(g: &mut Graph<T>, logits: Tensor, target: &Target, cfg: &LossConfig) -> Result<Tensor> {
    let ce = cross_entropy_loss(g, logits, target, cfg)?;
    let probs = g.softmax_channels(logits)?;
    let dice = dice_loss(g, probs, target, cfg)?;
    g.add(ce, dice)
}

/// `sum_l w_l * combined_loss(outputs[l])`, outputs finest first.
pub fn deep_supervision_loss<T: Element>(
    g: &mut Graph<T>,
    outputs: &[Tensor],
    target: &Target,
    cfg: &LossConfig,
) -> Result<Tensor> {
    let weights = cfg.ds_weights_for(outputs.len())?;
    let mut total: Option<Tensor> = None;
    for (&o, &w) in outputs.iter().zip(&weights) {
        let l = combined_loss(g, o, target, cfg)?;
        let l = if w == 1.0 { l } else { g.scale(l, w)? };
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    total.ok_or_else(|| Error::Config("deep supervision needs at least one output".into()))
}
