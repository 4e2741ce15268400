//! 3-D convolution via im2col + GEMM, and kernel-equals-stride transposed convolution.

use super::super::array::{spatial_len, NdArray};
use std::ops::Range;

use super::super::element::{gemm, gemm_view, Element, Mat, View};
use crate::error::{Error, Result};

pub type Triple = [usize; 3];

/// Output extent of a "same"-padded strided convolution: `ceil(n / stride)`.
pub fn conv_out_dims(input: Triple, stride: Triple) -> Triple {
    std::array::from_fn(|a| input[a].div_ceil(stride[a]))
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    in_ch: usize,
    input: Triple,
    kernel: Triple,
    stride: Triple,
    pad: Triple,
    output: Triple,
}

impl Geometry {
    fn kernel_len(&self) -> usize {
        spatial_len(self.kernel)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1]
    }
}

fn check_conv(x: &NdArray<impl Element>, w: &NdArray<impl Element>, stride: Triple) -> Result<(usize, Geometry, usize)> {
    let (n, c, input) = x.dims5()?;
    let (out_ch, in_ch, kernel) = match w.shape() {
        &[o, i, kz, ky, kx] => (o, i, [kz, ky, kx]),
        s => return Err(Error::Shape(format!("conv weight must be 5-D, got {s:?}"))),
    };
    if in_ch != c {
        return Err(Error::Shape(format!(
            "conv weight expects {in_ch} input channels, input has {c}"
        )));
    }
    if kernel.iter().any(|k| k % 2 == 0) {
        return Err(Error::Unsupported(format!("even kernel {kernel:?}")));
    }
    if stride.contains(&0) {
        return Err(Error::Shape(format!("stride {stride:?} must be >= 1")));
    }
    let geo = Geometry {
        in_ch,
        input,
        kernel,
        stride,
        pad: kernel.map(|k| (k - 1) / 2),
        output: conv_out_dims(input, stride),
    };
    Ok((n, geo, out_ch))
}

/// Unfolds output rows `rows` (flattened `(z, y)` pairs) of one sample
/// `(in_ch, z, y, x)` into an `(in_ch * K, rows.len() * ox)` column block.
fn im2col<T: Element>(x: &[T], g: &Geometry, rows: Range<usize>, col: &mut [T]) {
    let [iz, iy, ix] = g.input;
    let [_, oy, ox] = g.output;
    let [kz, ky, kx] = g.kernel;
    let [sz, sy, sx] = g.stride;
    let [pz, py, px] = g.pad;
    let p_out = rows.len() * ox;
    let mut row = 0;
    for c in 0..g.in_ch {
        let xc = &x[c * iz * iy * ix..(c + 1) * iz * iy * ix];
        for dz in 0..kz {
            for dy in 0..ky {
                for dx in 0..kx {
                    let dst = &mut col[row * p_out..(row + 1) * p_out];
                    row += 1;
                    // valid ox range: 0 <= ox*sx + dx - px < ix
                    let ox_lo = (px.saturating_sub(dx)).div_ceil(sx);
                    let ox_hi = if ix + px > dx {
                        ((ix + px - dx - 1) / sx + 1).min(ox)
                    } else {
                        0
                    };
                    for (r, d) in rows.clone().zip(dst.chunks_exact_mut(ox)) {
                        let (z, y) = (r / oy, r % oy);
                        let zi = (z * sz + dz) as isize - pz as isize;
                        {
                            let yi = (y * sy + dy) as isize - py as isize;
                            if zi < 0 || zi >= iz as isize || yi < 0 || yi >= iy as isize || ox_lo >= ox_hi {
                                d.fill(T::zero());
                                continue;
                            }
                            let src = &xc[(zi as usize * iy + yi as usize) * ix..][..ix];
                            d[..ox_lo].fill(T::zero());
                            d[ox_hi..].fill(T::zero());
                            if sx == 1 {
                                let s0 = ox_lo + dx - px;
                                d[ox_lo..ox_hi].copy_from_slice(&src[s0..s0 + (ox_hi - ox_lo)]);
                            } else {
                                for (o, v) in d[ox_lo..ox_hi].iter_mut().enumerate() {
                                    *v = src[(ox_lo + o) * sx + dx - px];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column block for output rows `rows` back into one sample's input gradient.
fn col2im<T: Element>(col: &[T], g: &Geometry, rows: Range<usize>, dx_out: &mut [T]) {
    let [iz, iy, ix] = g.input;
    let [_, oy, ox] = g.output;
    let [kz, ky, kx] = g.kernel;
    let [sz, sy, sx] = g.stride;
    let [pz, py, px] = g.pad;
    let p_out = rows.len() * ox;
    let mut row = 0;
    for c in 0..g.in_ch {
        let xc = &mut dx_out[c * iz * iy * ix..(c + 1) * iz * iy * ix];
        for dz in 0..kz {
            for dy in 0..ky {
                for dx in 0..kx {
                    let src = &col[row * p_out..(row + 1) * p_out];
                    row += 1;
                    let ox_lo = (px.saturating_sub(dx)).div_ceil(sx);
                    let ox_hi = if ix + px > dx {
                        ((ix + px - dx - 1) / sx + 1).min(ox)
                    } else {
                        0
                    };
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for (r, s) in rows.clone().zip(src.chunks_exact(ox)) {
                        let (z, y) = (r / oy, r % oy);
                        let zi = (z * sz + dz) as isize - pz as isize;
                        if zi < 0 || zi >= iz as isize {
                            continue;
                        }
                        {
                            let yi = (y * sy + dy) as isize - py as isize;
                            if yi < 0 || yi >= iy as isize {
                                continue;
                            }
                            let d = &mut xc[(zi as usize * iy + yi as usize) * ix..][..ix];
                            for o in ox_lo..ox_hi {
                                d[o * sx + dx - px] += s[o];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Column-block budget in elements; keeps each im2col block cache resident.
const COL_BLOCK: usize = 1 << 16;

/// Output rows per im2col block.
fn row_block(g: &Geometry) -> usize {
    let ox = g.output[2].max(1);
    (COL_BLOCK / (g.in_ch * g.kernel_len() * ox)).max(1)
}

fn row_chunks(g: &Geometry) -> impl Iterator<Item = Range<usize>> {
    let total = g.output[0] * g.output[1];
    let step = row_block(g);
    (0..total).step_by(step).map(move |r| r..(r + step).min(total))
}

pub fn conv3d_forward<T: Element>(
    x: &NdArray<T>,
    w: &NdArray<T>,
    b: Option<&NdArray<T>>,
    stride: Triple,
) -> Result<NdArray<T>> {
    let (n, g, out_ch) = check_conv(x, w, stride)?;
    if let Some(b) = b {
        if b.shape() != [out_ch] {
            return Err(Error::Shape(format!(
                "bias shape {:?}, expected [{out_ch}]",
                b.shape()
            )));
        }
    }
    let p_in = spatial_len(g.input);
    let p_out = spatial_len(g.output);
    let rows = g.in_ch * g.kernel_len();
    let ox = g.output[2];
    let mut out = vec![T::zero(); n * out_ch * p_out];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * row_block(&g) * ox]
    };
    let beta = if b.is_some() { T::one() } else { T::zero() };
    let wv = View::dense(w.data(), out_ch, rows);
    for s in 0..n {
        let xs = &x.data()[s * g.in_ch * p_in..(s + 1) * g.in_ch * p_in];
        let os = &mut out[s * out_ch * p_out..(s + 1) * out_ch * p_out];
        if let Some(b) = b {
            for (o, &bv) in b.data().iter().enumerate() {
                os[o * p_out..(o + 1) * p_out].fill(bv);
            }
        }
        if g.is_pointwise() {
            gemm_view(wv, View::dense(xs, rows, p_out), beta, os, p_out);
            continue;
        }
        for r in row_chunks(&g) {
            let width = r.len() * ox;
            let block = &mut col[..rows * width];
            im2col(xs, &g, r.clone(), block);
            let p0 = r.start * ox;
            gemm_view(wv, View::dense(block, rows, width), beta, &mut os[p0..], p_out);
        }
    }
    NdArray::from_vec(vec![n, out_ch, g.output[0], g.output[1], g.output[2]], out)
}

pub struct Conv3dGrads<T> {
    pub dx: Option<NdArray<T>>,
    pub dw: Option<NdArray<T>>,
    pub db: Option<NdArray<T>>,
}

pub fn conv3d_backward<T: Element>(
    x: &NdArray<T>,
    w: &NdArray<T>,
    has_bias: bool,
    stride: Triple,
    dy: &NdArray<T>,
    need: [bool; 3],
) -> Result<Conv3dGrads<T>> {
    let (n, g, out_ch) = check_conv(x, w, stride)?;
    let p_in = spatial_len(g.input);
    let p_out = spatial_len(g.output);
    let rows = g.in_ch * g.kernel_len();
    let ox = g.output[2];
    let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut dw = need[1].then(|| vec![T::zero(); w.len()]);
    let block_len = if g.is_pointwise() { 0 } else { rows * row_block(&g) * ox };
    let mut col = vec![T::zero(); block_len];
    let wv = View::dense(w.data(), out_ch, rows);
    for s in 0..n {
        let dys = &dy.data()[s * out_ch * p_out..(s + 1) * out_ch * p_out];
        let xs = &x.data()[s * g.in_ch * p_in..(s + 1) * g.in_ch * p_in];
        if g.is_pointwise() {
            if let Some(dw) = dw.as_mut() {
                gemm_view(View::dense(dys, out_ch, p_out), View::dense(xs, rows, p_out).t(), T::one(), dw, rows);
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[s * g.in_ch * p_in..(s + 1) * g.in_ch * p_in];
                gemm_view(wv.t(), View::dense(dys, out_ch, p_out), T::one(), dxs, p_out);
            }
            continue;
        }
        for r in row_chunks(&g) {
            let width = r.len() * ox;
            let p0 = r.start * ox;
            let dy_block = View {
                data: &dys[p0..],
                rows: out_ch,
                cols: width,
                rs: p_out,
                cs: 1,
            };
            let block = &mut col[..rows * width];
            if let Some(dw) = dw.as_mut() {
                im2col(xs, &g, r.clone(), block);
                gemm_view(dy_block, View::dense(block, rows, width).t(), T::one(), dw, rows);
            }
            if let Some(dx) = dx.as_mut() {
                gemm_view(wv.t(), dy_block, T::zero(), block, width);
                col2im(block, &g, r, &mut dx[s * g.in_ch * p_in..(s + 1) * g.in_ch * p_in]);
            }
        }
    }
    let db = (need[2] && has_bias).then(|| {
        let mut acc = vec![0.0f64; out_ch];
        for s in 0..n {
            for (o, a) in acc.iter_mut().enumerate() {
                let base = (s * out_ch + o) * p_out;
                *a += dy.data()[base..base + p_out].iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        acc.into_iter().map(T::from_f64_lossy).collect::<Vec<_>>()
    });
    Ok(Conv3dGrads {
        dx: dx.map(|d| NdArray::from_vec(x.shape().to_vec(), d)).transpose()?,
        dw: dw.map(|d| NdArray::from_vec(w.shape().to_vec(), d)).transpose()?,
        db: db.map(|d| NdArray::from_vec(vec![out_ch], d)).transpose()?,
    })
}

/// Shapes for a transposed convolution with weight `(in_ch, out_ch, kz, ky, kx)`.
fn check_transpose(x: &NdArray<impl Element>, w: &NdArray<impl Element>, stride: Triple) -> Result<(usize, usize, Triple, usize)> {
    let (n, c, input) = x.dims5()?;
    let (in_ch, out_ch, kernel) = match w.shape() {
        &[i, o, kz, ky, kx] => (i, o, [kz, ky, kx]),
        s => return Err(Error::Shape(format!("transposed-conv weight must be 5-D, got {s:?}"))),
    };
    if in_ch != c {
        return Err(Error::Shape(format!(
            "transposed-conv weight expects {in_ch} input channels, input has {c}"
        )));
    }
    if stride.contains(&0) {
        return Err(Error::Shape(format!("stride {stride:?} must be >= 1")));
    }
    if kernel != stride {
        return Err(Error::Unsupported(format!(
            "transposed conv requires kernel == stride, got kernel {kernel:?} stride {stride:?}"
        )));
    }
    Ok((n, out_ch, input, in_ch))
}

/// Position of block element `(a, b, c)` for input voxel `(z, y, x)` in the upsampled grid.
#[inline]
fn up_index(out: Triple, stride: Triple, p: Triple, k: Triple) -> usize {
    ((p[0] * stride[0] + k[0]) * out[1] + p[1] * stride[1] + k[1]) * out[2] + p[2] * stride[2] + k[2]
}

fn for_each_block(input: Triple, stride: Triple, mut f: impl FnMut(usize, usize, usize)) {
    // f(kernel_offset, input_position, output_position)
    let out: Triple = std::array::from_fn(|a| input[a] * stride[a]);
    let mut kidx = 0;
    for a in 0..stride[0] {
        for b in 0..stride[1] {
            for c in 0..stride[2] {
                let mut p = 0;
                for z in 0..input[0] {
                    for y in 0..input[1] {
                        for x in 0..input[2] {
                            f(kidx, p, up_index(out, stride, [z, y, x], [a, b, c]));
                            p += 1;
                        }
                    }
                }
                kidx += 1;
            }
        }
    }
}

pub fn conv_transpose3d_forward<T: Element>(
    x: &NdArray<T>,
    w: &NdArray<T>,
    stride: Triple,
) -> Result<NdArray<T>> {
    let (n, out_ch, input, in_ch) = check_transpose(x, w, stride)?;
    let k = spatial_len(stride);
    let p_in = spatial_len(input);
    let output: Triple = std::array::from_fn(|a| input[a] * stride[a]);
    let p_out = spatial_len(output);
    let mut out = vec![T::zero(); n * out_ch * p_out];
    let mut ycol = vec![T::zero(); out_ch * k * p_in];
    for s in 0..n {
        let xs = &x.data()[s * in_ch * p_in..(s + 1) * in_ch * p_in];
        gemm(Mat::new(w.data(), in_ch, out_ch * k).t(), Mat::new(xs, in_ch, p_in), T::zero(), &mut ycol);
        let os = &mut out[s * out_ch * p_out..(s + 1) * out_ch * p_out];
        for o in 0..out_ch {
            let oc = &mut os[o * p_out..(o + 1) * p_out];
            let yc = &ycol[o * k * p_in..(o + 1) * k * p_in];
            for_each_block(input, stride, |kk, p, q| oc[q] = yc[kk * p_in + p]);
        }
    }
    NdArray::from_vec(vec![n, out_ch, output[0], output[1], output[2]], out)
}

pub fn conv_transpose3d_backward<T: Element>(
    x: &NdArray<T>,
    w: &NdArray<T>,
    stride: Triple,
    dy: &NdArray<T>,
    need: [bool; 2],
) -> Result<(Option<NdArray<T>>, Option<NdArray<T>>)> {
    let (n, out_ch, input, in_ch) = check_transpose(x, w, stride)?;
    let k = spatial_len(stride);
    let p_in = spatial_len(input);
    let p_out = p_in * k;
    let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut dw = need[1].then(|| vec![T::zero(); w.len()]);
    let mut dycol = vec![T::zero(); out_ch * k * p_in];
    for s in 0..n {
        let dys = &dy.data()[s * out_ch * p_out..(s + 1) * out_ch * p_out];
        for o in 0..out_ch {
            let dc = &mut dycol[o * k * p_in..(o + 1) * k * p_in];
            let src = &dys[o * p_out..(o + 1) * p_out];
            for_each_block(input, stride, |kk, p, q| dc[kk * p_in + p] = src[q]);
        }
        let xs = &x.data()[s * in_ch * p_in..(s + 1) * in_ch * p_in];
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_ch * p_in..(s + 1) * in_ch * p_in];
            gemm(Mat::new(w.data(), in_ch, out_ch * k), Mat::new(&dycol, out_ch * k, p_in), T::zero(), dxs);
        }
        if let Some(dw) = dw.as_mut() {
            gemm(Mat::new(xs, in_ch, p_in), Mat::new(&dycol, out_ch * k, p_in).t(), T::one(), dw);
        }
    }
    Ok((
        dx.map(|d| NdArray::from_vec(x.shape().to_vec(), d)).transpose()?,
        dw.map(|d| NdArray::from_vec(w.shape().to_vec(), d)).transpose()?,
    ))
}
