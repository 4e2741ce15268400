//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every value produced during one forward pass. Nodes are appended
//! in evaluation order, so the tape is topologically sorted by construction and
//! [`Graph::backward`] simply walks it in reverse.

use super::array::NdArray;
use super::element::Element;
use super::kernels::conv::{self, Triple};
use super::kernels::{norm, pointwise, pool};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tensor(usize);

impl Tensor {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// `backward` receives the input values, the forward output and the upstream
/// gradient, and returns one optional gradient per input.
pub trait CustomOp<T: Element> {
    fn name(&self) -> &str;

    fn backward(
        &self,
        inputs: &[&NdArray<T>],
        output: &NdArray<T>,
        grad_out: &NdArray<T>,
    ) -> Result<Vec<Option<NdArray<T>>>>;
}

enum Op<T: Element> {
    Leaf,
    Add(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Sum(Tensor),
    Conv3d {
        x: Tensor,
        w: Tensor,
        b: Option<Tensor>,
        stride: Triple,
    },
    ConvTranspose3d {
        x: Tensor,
        w: Tensor,
        stride: Triple,
    },
    MaxPool3d {
        x: Tensor,
        argmax: Vec<usize>,
    },
    UpsampleNearest {
        x: Tensor,
        factor: Triple,
    },
    InstanceNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        cache: norm::NormCache<T>,
    },
    LeakyRelu {
        x: Tensor,
        slope: f64,
    },
    Softmax(Tensor),
    Concat(Vec<Tensor>),
    Custom {
        inputs: Vec<Tensor>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Element> Op<T> {
    fn inputs(&self) -> Vec<Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Softmax(a) => vec![*a],
            Op::Conv3d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::ConvTranspose3d { x, w, .. } => vec![*x, *w],
            Op::MaxPool3d { x, .. } | Op::UpsampleNearest { x, .. } | Op::LeakyRelu { x, .. } => {
                vec![*x]
            }
            Op::InstanceNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat(xs) => xs.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Element> {
    value: NdArray<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// One forward/backward computation. Single writer; build a new graph per step.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<NdArray<T>>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: NdArray<T>, op: Op<T>) -> Tensor {
        let requires_grad = op.inputs().iter().any(|t| self.nodes[t.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: NdArray<T>, op: Op<T>, requires_grad: bool) -> Tensor {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Tensor(self.nodes.len() - 1)
    }

    fn check(&self, t: Tensor) -> Result<()> {
        if t.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Misuse(format!("tensor {} is not part of this graph", t.0)))
        }
    }

    /// Adds a leaf holding `value`.
    pub fn leaf(&mut self, value: NdArray<T>, requires_grad: bool) -> Tensor {
        self.push_with(value, Op::Leaf, requires_grad)
    }

    /// Shorthand for a leaf that needs gradients.
    pub fn param(&mut self, value: NdArray<T>) -> Tensor {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: NdArray<T>) -> Tensor {
        self.leaf(value, false)
    }

    pub fn value(&self, t: Tensor) -> &NdArray<T> {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        self.nodes[t.0].value.shape()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Accumulated gradient of the last [`Graph::backward`] calls, if any.
    pub fn grad(&self, t: Tensor) -> Option<&NdArray<T>> {
        self.grads[t.0].as_ref()
    }

    pub fn take_grad(&mut self, t: Tensor) -> Option<NdArray<T>> {
        self.grads[t.0].take()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "add shape mismatch {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = NdArray::from_vec(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "mul shape mismatch {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = NdArray::from_vec(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Tensor, factor: f64) -> Result<Tensor> {
        self.check(a)?;
        let f = T::from_f64_lossy(factor);
        let out = self.value(a).map(|v| v * f);
        Ok(self.push(out, Op::Scale(a, factor)))
    }

    /// Sum of all elements as a scalar (shape `[]`).
    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        self.check(a)?;
        let total = T::from_f64_lossy(self.value(a).sum_f64());
        Ok(self.push(NdArray::scalar(total), Op::Sum(a)))
    }

    /// "Same"-padded 3-D convolution; weight `(out_ch, in_ch, kz, ky, kx)` with odd kernel.
    pub fn conv3d(&mut self, x: Tensor, w: Tensor, b: Option<Tensor>, stride: Triple) -> Result<Tensor> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = b {
            self.check(b)?;
        }
        let out = conv::conv3d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride)?;
        Ok(self.push(out, Op::Conv3d { x, w, b, stride }))
    }

    /// Transposed convolution with kernel == stride; weight `(in_ch, out_ch, sz, sy, sx)`.
    pub fn conv_transpose3d(&mut self, x: Tensor, w: Tensor, stride: Triple) -> Result<Tensor> {
        self.check(x)?;
        self.check(w)?;
        let out = conv::conv_transpose3d_forward(self.value(x), self.value(w), stride)?;
        Ok(self.push(out, Op::ConvTranspose3d { x, w, stride }))
    }

    pub fn max_pool3d(&mut self, x: Tensor, kernel: Triple) -> Result<Tensor> {
        self.check(x)?;
        let (out, argmax) = pool::max_pool3d_forward(self.value(x), kernel)?;
        Ok(self.push(out, Op::MaxPool3d { x, argmax }))
    }

    pub fn upsample_nearest(&mut self, x: Tensor, factor: Triple) -> Result<Tensor> {
        self.check(x)?;
        if factor == [1, 1, 1] {
            return Ok(x);
        }
        let out = pool::upsample_nearest_forward(self.value(x), factor)?;
        Ok(self.push(out, Op::UpsampleNearest { x, factor }))
    }

    pub fn instance_norm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor, eps: f64) -> Result<Tensor> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let (out, cache) =
            norm::instance_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                cache,
            },
        ))
    }

    /// `slope = 0` gives a plain ReLU.
    pub fn leaky_relu(&mut self, x: Tensor, slope: f64) -> Result<Tensor> {
        self.check(x)?;
        let out = pointwise::leaky_relu_forward(self.value(x), slope);
        Ok(self.push(out, Op::LeakyRelu { x, slope }))
    }

    pub fn softmax_channels(&mut self, x: Tensor) -> Result<Tensor> {
        self.check(x)?;
        let out = pointwise::softmax_channels_forward(self.value(x))?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn concat_channels(&mut self, xs: &[Tensor]) -> Result<Tensor> {
        for &x in xs {
            self.check(x)?;
        }
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        let values: Vec<&NdArray<T>> = xs.iter().map(|&x| self.value(x)).collect();
        let out = pointwise::concat_channels_forward(&values)?;
        Ok(self.push(out, Op::Concat(xs.to_vec())))
    }

    /// Records an externally computed node whose gradient is supplied by `op`.
    pub fn custom(&mut self, inputs: &[Tensor], output: NdArray<T>, op: Box<dyn CustomOp<T>>) -> Result<Tensor> {
        for &x in inputs {
            self.check(x)?;
        }
        Ok(self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        ))
    }

    /// Populates `d(loss)/d(node)` for every node that requires gradients.
    /// Repeated calls accumulate into the stored gradients.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::Misuse(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut pending: Vec<Option<NdArray<T>>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(NdArray::full(self.shape(loss).to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.input_grads(i, &g)?;
            for (t, dg) in contributions {
                if !self.nodes[t.0].requires_grad {
                    continue;
                }
                match &mut pending[t.0] {
                    Some(acc) => acc.add_assign(&dg),
                    slot @ None => *slot = Some(dg),
                }
            }
            match &mut self.grads[i] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &NdArray<T>) -> Result<Vec<(Tensor, NdArray<T>)>> {
        let node = &self.nodes[i];
        let need = |t: Tensor| self.nodes[t.0].requires_grad;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da: Vec<T> = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                let db: Vec<T> = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                vec![
                    (*a, NdArray::from_vec(va.shape().to_vec(), da)?),
                    (*b, NdArray::from_vec(vb.shape().to_vec(), db)?),
                ]
            }
            Op::Scale(a, f) => {
                let f = T::from_f64_lossy(*f);
                vec![(*a, g.map(|v| v * f))]
            }
            Op::Sum(a) => {
                let gv = g.item()?;
                vec![(*a, NdArray::full(self.shape(*a).to_vec(), gv))]
            }
            Op::Conv3d { x, w, b, stride } => {
                let grads = conv::conv3d_backward(
                    self.value(*x),
                    self.value(*w),
                    b.is_some(),
                    *stride,
                    g,
                    [need(*x), need(*w), b.is_some_and(need)],
                )?;
                let mut v = Vec::new();
                if let Some(dx) = grads.dx {
                    v.push((*x, dx));
                }
                if let Some(dw) = grads.dw {
                    v.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, grads.db) {
                    v.push((*b, db));
                }
                v
            }
            Op::ConvTranspose3d { x, w, stride } => {
                let (dx, dw) = conv::conv_transpose3d_backward(
                    self.value(*x),
                    self.value(*w),
                    *stride,
                    g,
                    [need(*x), need(*w)],
                )?;
                dx.map(|d| (*x, d)).into_iter().chain(dw.map(|d| (*w, d))).collect()
            }
            Op::MaxPool3d { x, argmax } => {
                vec![(*x, pool::max_pool3d_backward(self.shape(*x), argmax, g)?)]
            }
            Op::UpsampleNearest { x, factor } => {
                vec![(*x, pool::upsample_nearest_backward(self.shape(*x), *factor, g)?)]
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dgamma, dbeta) =
                    norm::instance_norm_backward(self.shape(*x), self.value(*gamma), cache, g)?;
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::LeakyRelu { x, slope } => {
                vec![(*x, pointwise::leaky_relu_backward(self.value(*x), *slope, g)?)]
            }
            Op::Softmax(x) => vec![(*x, pointwise::softmax_channels_backward(&node.value, g)?)],
            Op::Concat(xs) => {
                let mut from = 0;
                let mut v = Vec::with_capacity(xs.len());
                for &x in xs {
                    let c = self.shape(x)[1];
                    v.push((x, g.channel_slice(from, from + c)?));
                    from += c;
                }
                v
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&NdArray<T>> = inputs.iter().map(|&t| self.value(t)).collect();
                let grads = op.backward(&values, &node.value, g)?;
                if grads.len() != inputs.len() {
                    return Err(Error::Misuse(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                let mut v = Vec::new();
                for (&t, dg) in inputs.iter().zip(grads) {
                    if let Some(dg) = dg {
                        if dg.shape() != self.shape(t) {
                            return Err(Error::Shape(format!(
                                "custom op {} gradient shape {:?} for input {:?}",
                                op.name(),
                                dg.shape(),
                                self.shape(t)
                            )));
                        }
                        v.push((t, dg));
                    }
                }
                v
            }
        };
        Ok(out)
    }
}
