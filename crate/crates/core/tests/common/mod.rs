//! Independent reference implementations and shared suites for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxcascade::cascade::{connected_components, percentile};
use voxcascade::lossmetrics::{combined_loss, cross_entropy_loss, deep_supervision_loss, dice_loss, LossConfig, Target};
use voxcascade::tensor::{finite_diff_check, raw, Graph, NdArray, Tensor};
use voxcascade::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dims5(a: &NdArray<f64>) -> [usize; 5] {
    a.shape().try_into().unwrap()
}

/// Direct six-loop convolution with `(k - 1) / 2` zero padding and output `ceil(n / s)`.
pub fn naive_conv3d(x: &NdArray<f64>, w: &NdArray<f64>, b: Option<&NdArray<f64>>, s: [usize; 3]) -> NdArray<f64> {
    let [n, ci, iz, iy, ix] = dims5(x);
    let [co, _, kz, ky, kx] = dims5(w);
    let (oz, oy, ox) = (iz.div_ceil(s[0]), iy.div_ceil(s[1]), ix.div_ceil(s[2]));
    let (pz, py, px) = ((kz - 1) / 2, (ky - 1) / 2, (kx - 1) / 2);
    let xv = |b: usize, c: usize, z: isize, y: isize, xx: isize| -> f64 {
        if z < 0 || y < 0 || xx < 0 || z >= iz as isize || y >= iy as isize || xx >= ix as isize {
            0.0
        } else {
            x.data()[(((b * ci + c) * iz + z as usize) * iy + y as usize) * ix + xx as usize]
        }
    };
    let mut out = vec![0.0; n * co * oz * oy * ox];
    let mut i = 0;
    for bi in 0..n {
        for o in 0..co {
            for z in 0..oz {
                for y in 0..oy {
                    for xx in 0..ox {
                        let mut acc = b.map_or(0.0, |b| b.data()[o]);
                        for c in 0..ci {
                            for dz in 0..kz {
                                for dy in 0..ky {
                                    for dx in 0..kx {
                                        let wv = w.data()[(((o * ci + c) * kz + dz) * ky + dy) * kx + dx];
                                        acc += wv
                                            * xv(
                                                bi,
                                                c,
                                                (z * s[0] + dz) as isize - pz as isize,
                                                (y * s[1] + dy) as isize - py as isize,
                                                (xx * s[2] + dx) as isize - px as isize,
                                            );
                                    }
                                }
                            }
                        }
                        out[i] = acc;
                        i += 1;
                    }
                }
            }
        }
    }
    NdArray::from_vec(vec![n, co, oz, oy, ox], out).unwrap()
}

/// Transposed convolution with kernel equal to stride, weights `(in, out, k)`.
pub fn naive_conv_transpose3d(x: &NdArray<f64>, w: &NdArray<f64>, s: [usize; 3]) -> NdArray<f64> {
    let [n, ci, iz, iy, ix] = dims5(x);
    let co = w.shape()[1];
    let (oz, oy, ox) = (iz * s[0], iy * s[1], ix * s[2]);
    let mut out = vec![0.0; n * co * oz * oy * ox];
    for bi in 0..n {
        for o in 0..co {
            for z in 0..oz {
                for y in 0..oy {
                    for xx in 0..ox {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            let xi = x.data()[(((bi * ci + c) * iz + z / s[0]) * iy + y / s[1]) * ix + xx / s[2]];
                            let wi = w.data()[(((c * co + o) * s[0] + z % s[0]) * s[1] + y % s[1]) * s[2] + xx % s[2]];
                            acc += xi * wi;
                        }
                        out[(((bi * co + o) * oz + z) * oy + y) * ox + xx] = acc;
                    }
                }
            }
        }
    }
    NdArray::from_vec(vec![n, co, oz, oy, ox], out).unwrap()
}

pub fn naive_max_pool3d(x: &NdArray<f64>, k: [usize; 3]) -> NdArray<f64> {
    let [n, c, iz, iy, ix] = dims5(x);
    let (oz, oy, ox) = (iz / k[0], iy / k[1], ix / k[2]);
    let mut out = Vec::new();
    for plane in 0..n * c {
        for z in 0..oz {
            for y in 0..oy {
                for xx in 0..ox {
                    let mut m = f64::NEG_INFINITY;
                    for dz in 0..k[0] {
                        for dy in 0..k[1] {
                            for dx in 0..k[2] {
                                let i = ((plane * iz + z * k[0] + dz) * iy + y * k[1] + dy) * ix + xx * k[2] + dx;
                                m = m.max(x.data()[i]);
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    NdArray::from_vec(vec![n, c, oz, oy, ox], out).unwrap()
}

/// Recursive 6-neighbour flood fill; labels in discovery order starting at 1.
pub fn flood_fill(fg: &[bool], dims: [usize; 3]) -> Vec<u32> {
    fn visit(fg: &[bool], dims: [usize; 3], lab: &mut [u32], p: [usize; 3], id: u32) {
        let i = (p[0] * dims[1] + p[1]) * dims[2] + p[2];
        if !fg[i] || lab[i] != 0 {
            return;
        }
        lab[i] = id;
        for a in 0..3 {
            if p[a] > 0 {
                let mut q = p;
                q[a] -= 1;
                visit(fg, dims, lab, q, id);
            }
            if p[a] + 1 < dims[a] {
                let mut q = p;
                q[a] += 1;
                visit(fg, dims, lab, q, id);
            }
        }
    }
    let mut lab = vec![0u32; fg.len()];
    let mut next = 0;
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let i = (z * dims[1] + y) * dims[2] + x;
                if fg[i] && lab[i] == 0 {
                    next += 1;
                    visit(fg, dims, &mut lab, [z, y, x], next);
                }
            }
        }
    }
    lab
}

/// True when two labelings induce the same partition of the foreground.
pub fn same_partition(a: &[u32], b: &[u32]) -> bool {
    use std::collections::HashMap;
    let mut ab: HashMap<u32, u32> = HashMap::new();
    let mut ba: HashMap<u32, u32> = HashMap::new();
    a.iter().zip(b).all(|(&x, &y)| {
        if (x == 0) != (y == 0) {
            return false;
        }
        x == 0 || (*ab.entry(x).or_insert(y) == y && *ba.entry(y).or_insert(x) == x)
    })
}

/// Percentile by full sort and linear interpolation between neighbours.
pub fn sort_percentile(values: &[f32], p: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|&x| f64::from(x)).collect();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (rank - lo as f64) * (v[hi] - v[lo])
}

/// Outcome of one named check.
pub struct Check {
    pub name: String,
    pub value: f64,
    pub ok: bool,
}

fn random_spatial(r: &mut ChaCha8Rng, max: usize) -> [usize; 3] {
    std::array::from_fn(|_| r.gen_range(1..=max))
}

/// conv3d, conv_transpose3d and max_pool3d against the loop oracles on `cases`
/// random shapes each; returns the worst absolute difference per op.
pub fn kernel_oracle_suite(cases: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let (mut conv, mut convt, mut pool) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let n = r.gen_range(1..=2);
        let ci = r.gen_range(1..=3);
        let co = r.gen_range(1..=3);
        let sp = random_spatial(&mut r, 6);
        let k: [usize; 3] = std::array::from_fn(|_| [1, 3, 5][r.gen_range(0..3)]);
        let s: [usize; 3] = std::array::from_fn(|_| r.gen_range(1..=2));
        let x = NdArray::<f64>::randn(vec![n, ci, sp[0], sp[1], sp[2]], 1.0, &mut r);
        let w = NdArray::<f64>::randn(vec![co, ci, k[0], k[1], k[2]], 1.0, &mut r);
        let b = NdArray::<f64>::randn(vec![co], 1.0, &mut r);
        let bias = r.gen_bool(0.5).then_some(&b);
        let fast = raw::conv3d_forward(&x, &w, bias, s).unwrap();
        conv = conv.max(fast.max_abs_diff(&naive_conv3d(&x, &w, bias, s)));

        let st: [usize; 3] = std::array::from_fn(|_| r.gen_range(1..=2));
        let xt = NdArray::<f64>::randn(vec![n, ci, sp[0], sp[1], sp[2]], 1.0, &mut r);
        let wt = NdArray::<f64>::randn(vec![ci, co, st[0], st[1], st[2]], 1.0, &mut r);
        let fast = raw::conv_transpose3d_forward(&xt, &wt, st).unwrap();
        convt = convt.max(fast.max_abs_diff(&naive_conv_transpose3d(&xt, &wt, st)));

        let pk: [usize; 3] = std::array::from_fn(|_| r.gen_range(1..=2));
        let psp: [usize; 3] = std::array::from_fn(|a| pk[a] * r.gen_range(1..=6 / pk[a]));
        let xp = NdArray::<f64>::randn(vec![n, ci, psp[0], psp[1], psp[2]], 1.0, &mut r);
        let (fast, _) = raw::max_pool3d_forward(&xp, pk).unwrap();
        pool = pool.max(fast.max_abs_diff(&naive_max_pool3d(&xp, pk)));
    }
    vec![("conv3d", conv), ("conv_transpose3d", convt), ("max_pool3d", pool)]
}

/// Number of random 16^3 masks whose component partition differs from flood fill.
pub fn component_oracle_suite(cases: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let dims = [16, 16, 16];
    (0..cases)
        .filter(|_| {
            let density = r.gen_range(0.05..0.6);
            let fg: Vec<bool> = (0..4096).map(|_| r.gen_bool(density)).collect();
            let fast = connected_components(&fg, dims).unwrap();
            let sizes_sorted = fast.components.windows(2).all(|w| w[0].voxel_count >= w[1].voxel_count);
            !(sizes_sorted && same_partition(&fast.labels, &flood_fill(&fg, dims)))
        })
        .count()
}

/// Number of random arrays whose clip bounds differ from the sort oracle.
pub fn percentile_oracle_suite(cases: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    (0..cases)
        .filter(|_| {
            let n = r.gen_range(1..3000);
            let v: Vec<f32> = (0..n).map(|_| r.gen_range(-1000.0f32..1000.0)).collect();
            [0.05, 99.5, r.gen_range(0.0..100.0)]
                .iter()
                .any(|&p| percentile(&v, p).unwrap() != sort_percentile(&v, p))
        })
        .count()
}

/// `sum(y * r)` for fixed random `r`.
pub fn weighted_sum(g: &mut Graph<f64>, y: Tensor, seed: u64) -> Result<Tensor> {
    let r = NdArray::uniform(g.shape(y).to_vec(), 0.5, 1.5, &mut rng(seed));
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    g.sum(p)
}

/// Values with magnitude in `[0.1, 1.5]`, away from the activation kink.
fn off_kink(shape: Vec<usize>, r: &mut ChaCha8Rng) -> NdArray<f64> {
    let n: usize = shape.iter().product();
    let d = (0..n)
        .map(|_| {
            let m = r.gen_range(0.1..1.5);
            if r.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    NdArray::from_vec(shape, d).unwrap()
}

/// Distinct values spaced 0.05 apart in random order, so no pooling window has a near tie.
fn tie_free(shape: Vec<usize>, r: &mut ChaCha8Rng) -> NdArray<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut d: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    d.shuffle(r);
    NdArray::from_vec(shape, d).unwrap()
}

fn target(n: usize, dims: [usize; 3], classes: u8, r: &mut ChaCha8Rng) -> Target {
    let len = n * dims.iter().product::<usize>();
    Target::new(n, dims, (0..len).map(|_| r.gen_range(0..classes)).collect()).unwrap()
}

/// Maximum relative finite-difference error of every differentiable op, `f64`, eps 1e-4.
pub fn op_gradient_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let eps = 1e-4;
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut check = |name: &'static str, f: &dyn Fn(&mut Graph<f64>, &[Tensor]) -> Result<Tensor>, inputs: Vec<NdArray<f64>>| {
        let e = finite_diff_check(f, &inputs, eps).unwrap();
        out.push((name, e));
    };

    let x = NdArray::randn(vec![2, 2, 3, 4, 5], 1.0, &mut r);
    let w = NdArray::randn(vec![3, 2, 3, 3, 3], 0.5, &mut r);
    let b = NdArray::randn(vec![3], 0.5, &mut r);
    check("conv3d", &|g, t| {
        let y = g.conv3d(t[0], t[1], Some(t[2]), [1, 1, 1])?;
        weighted_sum(g, y, 1)
    }, vec![x.clone(), w.clone(), b.clone()]);
    let w2 = NdArray::randn(vec![3, 2, 3, 1, 3], 0.5, &mut r);
    check("conv3d_strided", &|g, t| {
        let y = g.conv3d(t[0], t[1], Some(t[2]), [2, 1, 2])?;
        weighted_sum(g, y, 2)
    }, vec![x.clone(), w2, b]);
    let wt = NdArray::randn(vec![2, 3, 2, 1, 2], 0.5, &mut r);
    check("conv_transpose3d", &|g, t| {
        let y = g.conv_transpose3d(t[0], t[1], [2, 1, 2])?;
        weighted_sum(g, y, 3)
    }, vec![x.clone(), wt]);
    check("max_pool3d", &|g, t| {
        let y = g.max_pool3d(t[0], [2, 2, 1])?;
        weighted_sum(g, y, 4)
    }, vec![tie_free(vec![1, 2, 4, 4, 3], &mut r)]);
    check("upsample_nearest", &|g, t| {
        let y = g.upsample_nearest(t[0], [2, 1, 3])?;
        weighted_sum(g, y, 5)
    }, vec![x.clone()]);
    let gamma = NdArray::uniform(vec![2], 0.5, 1.5, &mut r);
    let beta = NdArray::randn(vec![2], 0.5, &mut r);
    check("instance_norm", &|g, t| {
        let y = g.instance_norm(t[0], t[1], t[2], 1e-5)?;
        weighted_sum(g, y, 6)
    }, vec![x.clone(), gamma, beta]);
    check("leaky_relu", &|g, t| {
        let y = g.leaky_relu(t[0], 0.01)?;
        weighted_sum(g, y, 7)
    }, vec![off_kink(vec![1, 2, 3, 3, 3], &mut r)]);
    check("relu", &|g, t| {
        let y = g.leaky_relu(t[0], 0.0)?;
        weighted_sum(g, y, 8)
    }, vec![off_kink(vec![1, 2, 3, 3, 3], &mut r)]);
    check("softmax_channels", &|g, t| {
        let y = g.softmax_channels(t[0])?;
        weighted_sum(g, y, 9)
    }, vec![x.clone()]);
    let x2 = NdArray::randn(vec![2, 1, 3, 4, 5], 1.0, &mut r);
    check("concat_channels", &|g, t| {
        let y = g.concat_channels(&[t[0], t[1]])?;
        weighted_sum(g, y, 10)
    }, vec![x.clone(), x2]);
    let xb = NdArray::randn(vec![2, 2, 3, 4, 5], 1.0, &mut r);
    check("add", &|g, t| {
        let y = g.add(t[0], t[1])?;
        weighted_sum(g, y, 11)
    }, vec![x.clone(), xb.clone()]);
    check("mul", &|g, t| {
        let y = g.mul(t[0], t[1])?;
        weighted_sum(g, y, 12)
    }, vec![x.clone(), xb]);
    check("scale_sum", &|g, t| {
        let s = g.sum(t[0])?;
        g.scale(s, -1.7)
    }, vec![x.clone()]);

    let logits = NdArray::randn(vec![2, 3, 2, 3, 4], 1.0, &mut r);
    let tg = target(2, [2, 3, 4], 3, &mut r);
    let cfg = LossConfig::default();
    check("cross_entropy_loss", &|g, t| cross_entropy_loss(g, t[0], &tg, &cfg), vec![logits.clone()]);
    let probs = NdArray::uniform(vec![2, 3, 2, 3, 4], 0.05, 0.95, &mut r);
    check("dice_loss", &|g, t| dice_loss(g, t[0], &tg, &cfg), vec![probs]);
    check("combined_loss", &|g, t| combined_loss(g, t[0], &tg, &cfg), vec![logits.clone()]);
    let coarse = NdArray::randn(vec![2, 3, 2, 3, 4], 1.0, &mut r);
    check("deep_supervision_loss", &|g, t| deep_supervision_loss(g, &[t[0], t[1]], &tg, &cfg), vec![logits, coarse]);
    out
}
