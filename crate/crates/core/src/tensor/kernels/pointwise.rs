use super::super::array::{spatial_len, NdArray};
use super::super::element::Element;
use crate::error::{Error, Result};

pub fn leaky_relu_forward<T: Element>(x: &NdArray<T>, slope: f64) -> NdArray<T> {
    let s = T::from_f64_lossy(slope);
    x.map(|v| if v >= T::zero() { v } else { s * v })
}

/// Derivative factor is 1 at `x >= 0` (including the kink) and `slope` below.
pub fn leaky_relu_backward<T: Element>(x: &NdArray<T>, slope: f64, dy: &NdArray<T>) -> Result<NdArray<T>> {
    let s = T::from_f64_lossy(slope);
    let d = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v >= T::zero() { g } else { s * g })
        .collect();
    NdArray::from_vec(x.shape().to_vec(), d)
}

/// Per-voxel softmax over the channel axis, max-subtracted.
pub fn softmax_channels_forward<T: Element>(x: &NdArray<T>) -> Result<NdArray<T>> {
    let (n, c, sp) = x.dims5()?;
    if c < 2 {
        return Err(Error::Shape(format!("softmax needs >= 2 channels, got {c}")));
    }
    let m = spatial_len(sp);
    let mut out = vec![T::zero(); x.len()];
    let mut buf = vec![0.0f64; c];
    for s in 0..n {
        let base = s * c * m;
        for i in 0..m {
            let mut max = f64::NEG_INFINITY;
            for (ch, b) in buf.iter_mut().enumerate() {
                *b = x.data()[base + ch * m + i].as_f64();
                max = max.max(*b);
            }
            let mut total = 0.0;
            for b in buf.iter_mut() {
                *b = (*b - max).exp();
                total += *b;
            }
            for (ch, b) in buf.iter().enumerate() {
                out[base + ch * m + i] = T::from_f64_lossy(b / total);
            }
        }
    }
    NdArray::from_vec(x.shape().to_vec(), out)
}

pub fn softmax_channels_backward<T: Element>(y: &NdArray<T>, dy: &NdArray<T>) -> Result<NdArray<T>> {
    let (n, c, sp) = y.dims5()?;
    let m = spatial_len(sp);
    let mut dx = vec![T::zero(); y.len()];
    for s in 0..n {
        let base = s * c * m;
        for i in 0..m {
            let dot: f64 = (0..c)
                .map(|ch| y.data()[base + ch * m + i].as_f64() * dy.data()[base + ch * m + i].as_f64())
                .sum();
            for ch in 0..c {
                let k = base + ch * m + i;
                dx[k] = T::from_f64_lossy(y.data()[k].as_f64() * (dy.data()[k].as_f64() - dot));
            }
        }
    }
    NdArray::from_vec(y.shape().to_vec(), dx)
}

pub fn concat_channels_forward<T: Element>(xs: &[&NdArray<T>]) -> Result<NdArray<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let (n, _, sp) = first.dims5()?;
    let mut total_c = 0;
    for x in xs {
        let (xn, xc, xsp) = x.dims5()?;
        if xn != n || xsp != sp {
            return Err(Error::Shape(format!(
                "concat shape mismatch: {:?} vs {:?}",
                first.shape(),
                x.shape()
            )));
        }
        total_c += xc;
    }
    let m = spatial_len(sp);
    let mut out = Vec::with_capacity(n * total_c * m);
    for s in 0..n {
        for x in xs {
            let c = x.shape()[1];
            out.extend_from_slice(&x.data()[s * c * m..(s + 1) * c * m]);
        }
    }
    NdArray::from_vec(vec![n, total_c, sp[0], sp[1], sp[2]], out)
}
