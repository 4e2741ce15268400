use super::super::array::{spatial_len, NdArray};
use super::super::element::Element;
use super::conv::Triple;
use crate::error::{Error, Result};

/// Max pooling with stride equal to the kernel. Returns the output and, per output
/// element, the flat input index of the first maximum in scan order.
pub fn max_pool3d_forward<T: Element>(x: &NdArray<T>, kernel: Triple) -> Result<(NdArray<T>, Vec<usize>)> {
    let (n, c, input) = x.dims5()?;
    if kernel.iter().any(|&k| k != 1 && k != 2) {
        return Err(Error::Unsupported(format!(
            "pooling kernel components must be 1 or 2, got {kernel:?}"
        )));
    }
    if (0..3).any(|a| input[a] % kernel[a] != 0) {
        return Err(Error::Shape(format!(
            "spatial dims {input:?} not divisible by pooling kernel {kernel:?}"
        )));
    }
    let output: Triple = std::array::from_fn(|a| input[a] / kernel[a]);
    let p_in = spatial_len(input);
    let p_out = spatial_len(output);
    let mut out = Vec::with_capacity(n * c * p_out);
    let mut argmax = Vec::with_capacity(n * c * p_out);
    for plane in 0..n * c {
        let base = plane * p_in;
        let xp = &x.data()[base..base + p_in];
        for z in 0..output[0] {
            for y in 0..output[1] {
                for xo in 0..output[2] {
                    let mut best = usize::MAX;
                    let mut best_v = T::neg_infinity();
                    for dz in 0..kernel[0] {
                        for dy in 0..kernel[1] {
                            for dx in 0..kernel[2] {
                                let i = ((z * kernel[0] + dz) * input[1] + y * kernel[1] + dy) * input[2]
                                    + xo * kernel[2]
                                    + dx;
                                // strict comparison keeps the first maximum
                                if best == usize::MAX || xp[i] > best_v {
                                    best = i;
                                    best_v = xp[i];
                                }
                            }
                        }
                    }
                    out.push(best_v);
                    argmax.push(base + best);
                }
            }
        }
    }
    Ok((
        NdArray::from_vec(vec![n, c, output[0], output[1], output[2]], out)?,
        argmax,
    ))
}

pub fn max_pool3d_backward<T: Element>(input_shape: &[usize], argmax: &[usize], dy: &NdArray<T>) -> Result<NdArray<T>> {
    let mut dx = NdArray::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        d[i] += g;
    }
    Ok(dx)
}

/// Nearest-neighbour upsampling by integer factors.
pub fn upsample_nearest_forward<T: Element>(x: &NdArray<T>, factor: Triple) -> Result<NdArray<T>> {
    let (n, c, input) = x.dims5()?;
    if factor.contains(&0) {
        return Err(Error::Shape(format!("upsample factor {factor:?} must be >= 1")));
    }
    let output: Triple = std::array::from_fn(|a| input[a] * factor[a]);
    let p_in = spatial_len(input);
    let mut out = Vec::with_capacity(n * c * spatial_len(output));
    for plane in 0..n * c {
        let xp = &x.data()[plane * p_in..(plane + 1) * p_in];
        for z in 0..output[0] {
            for y in 0..output[1] {
                let row = &xp[((z / factor[0]) * input[1] + y / factor[1]) * input[2]..][..input[2]];
                for xo in 0..output[2] {
                    out.push(row[xo / factor[2]]);
                }
            }
        }
    }
    NdArray::from_vec(vec![n, c, output[0], output[1], output[2]], out)
}

pub fn upsample_nearest_backward<T: Element>(input_shape: &[usize], factor: Triple, dy: &NdArray<T>) -> Result<NdArray<T>> {
    let mut dx = NdArray::<T>::zeros(input_shape.to_vec());
    let (n, c, output) = dy.dims5()?;
    let input: Triple = std::array::from_fn(|a| output[a] / factor[a]);
    let p_in = spatial_len(input);
    let p_out = spatial_len(output);
    let d = dx.data_mut();
    for plane in 0..n * c {
        let g = &dy.data()[plane * p_out..(plane + 1) * p_out];
        let dp = &mut d[plane * p_in..(plane + 1) * p_in];
        let mut q = 0;
        for z in 0..output[0] {
            for y in 0..output[1] {
                let row = ((z / factor[0]) * input[1] + y / factor[1]) * input[2];
                for xo in 0..output[2] {
                    dp[row + xo / factor[2]] += g[q];
                    q += 1;
                }
            }
        }
    }
    Ok(dx)
}
