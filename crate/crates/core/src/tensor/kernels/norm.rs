use super::super::array::{spatial_len, NdArray};
use super::super::element::Element;
use crate::error::{Error, Result};

/// Saved statistics of an instance-norm forward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    /// `1 / sqrt(var + eps)` per (sample, channel).
    pub inv_std: Vec<f64>,
}

pub fn instance_norm_forward<T: Element>(
    x: &NdArray<T>,
    gamma: &NdArray<T>,
    beta: &NdArray<T>,
    eps: f64,
) -> Result<(NdArray<T>, NormCache<T>)> {
    let (n, c, sp) = x.dims5()?;
    if !(eps > 0.0) {
        return Err(Error::Misuse(format!("instance norm eps must be > 0, got {eps}")));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "gamma/beta shapes {:?}/{:?}, expected [{c}]",
            gamma.shape(),
            beta.shape()
        )));
    }
    let m = spatial_len(sp);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(n * c);
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * m;
            let xs = &x.data()[base..base + m];
            let mean = xs.iter().map(|v| v.as_f64()).sum::<f64>() / m as f64;
            let var = xs.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / m as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std.push(istd);
            let (g, b) = (gamma.data()[ch].as_f64(), beta.data()[ch].as_f64());
            for i in 0..m {
                let h = (xs[i].as_f64() - mean) * istd;
                xhat[base + i] = T::from_f64_lossy(h);
                out[base + i] = T::from_f64_lossy(g * h + b);
            }
        }
    }
    Ok((NdArray::from_vec(x.shape().to_vec(), out)?, NormCache { xhat, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn instance_norm_backward<T: Element>(
    shape: &[usize],
    gamma: &NdArray<T>,
    cache: &NormCache<T>,
    dy: &NdArray<T>,
) -> Result<(NdArray<T>, NdArray<T>, NdArray<T>)> {
    let (n, c, sp) = dy.dims5()?;
    let m = spatial_len(sp);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * m;
            let g = &dy.data()[base..base + m];
            let h = &cache.xhat[base..base + m];
            let (mut sum_g, mut sum_gh) = (0.0f64, 0.0f64);
            for i in 0..m {
                sum_g += g[i].as_f64();
                sum_gh += g[i].as_f64() * h[i].as_f64();
            }
            dgamma[ch] += sum_gh;
            dbeta[ch] += sum_g;
            let gam = gamma.data()[ch].as_f64();
            let scale = gam * cache.inv_std[s * c + ch] / m as f64;
            for i in 0..m {
                let v = m as f64 * g[i].as_f64() - sum_g - h[i].as_f64() * sum_gh;
                dx[base + i] = T::from_f64_lossy(scale * v);
            }
        }
    }
    let to = |v: Vec<f64>| NdArray::from_vec(vec![c], v.into_iter().map(T::from_f64_lossy).collect());
    Ok((NdArray::from_vec(shape.to_vec(), dx)?, to(dgamma)?, to(dbeta)?))
}
