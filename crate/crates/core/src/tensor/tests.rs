use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn arr(shape: &[usize], data: Vec<f64>) -> NdArray<f64> {
    NdArray::from_vec(shape.to_vec(), data).unwrap()
}

/// Scalar `sum(y * r)` for a fixed random `r`, so every output element matters.
fn weighted_sum(g: &mut Graph<f64>, y: Tensor, seed: u64) -> crate::Result<Tensor> {
    let r = NdArray::uniform(g.shape(y).to_vec(), 0.5, 1.5, &mut rng(seed));
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    g.sum(p)
}

#[test]
fn pointwise_conv_with_unit_weight_is_identity() {
    let x = NdArray::<f64>::randn([1, 1, 3, 4, 5], 1.0, &mut rng(1));
    let mut g = Graph::new();
    let xt = g.constant(x.clone());
    let w = g.constant(NdArray::ones([1, 1, 1, 1, 1]));
    let b = g.constant(NdArray::zeros([1]));
    let y = g.conv3d(xt, w, Some(b), [1, 1, 1]).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn delta_kernel_is_identity() {
    for shape in [[1, 2, 3, 3, 3], [2, 1, 1, 5, 2], [1, 1, 6, 1, 4]] {
        let x = NdArray::<f64>::randn(shape, 1.0, &mut rng(2));
        let c = shape[1];
        let mut w = NdArray::zeros([c, c, 3, 3, 3]);
        for i in 0..c {
            w.data_mut()[(i * c + i) * 27 + 13] = 1.0;
        }
        let y = raw::conv3d_forward(&x, &w, None, [1, 1, 1]).unwrap();
        assert_eq!(y, x);
    }
}

#[test]
fn conv_shape_errors() {
    let x = NdArray::<f64>::zeros([1, 2, 4, 4, 4]);
    let w = NdArray::<f64>::zeros([3, 1, 3, 3, 3]);
    assert!(matches!(raw::conv3d_forward(&x, &w, None, [1, 1, 1]), Err(Error::Shape(_))));
    let even = NdArray::<f64>::zeros([3, 2, 2, 3, 3]);
    assert!(matches!(raw::conv3d_forward(&x, &even, None, [1, 1, 1]), Err(Error::Unsupported(_))));
}

#[test]
fn strided_conv_output_is_ceil() {
    let x = NdArray::<f64>::zeros([1, 1, 5, 8, 7]);
    let w = NdArray::<f64>::zeros([1, 1, 3, 3, 3]);
    let y = raw::conv3d_forward(&x, &w, None, [2, 2, 2]).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 4, 4]);
    assert_eq!(conv_out_dims([40, 128, 128], [1, 2, 2]), [40, 64, 64]);
}

#[test]
fn transposed_conv_examples() {
    let x = NdArray::<f64>::randn([1, 1, 2, 3, 2], 1.0, &mut rng(3));
    let id = raw::conv_transpose3d_forward(&x, &NdArray::ones([1, 1, 1, 1, 1]), [1, 1, 1]).unwrap();
    assert_eq!(id, x);

    let x = arr(&[1, 1, 2, 2, 2], (1..=8).map(f64::from).collect());
    let y = raw::conv_transpose3d_forward(&x, &NdArray::ones([1, 1, 2, 2, 2]), [2, 2, 2]).unwrap();
    assert_eq!(y.shape(), &[1, 1, 4, 4, 4]);
    for z in 0..4 {
        for yy in 0..4 {
            for xx in 0..4 {
                let src = x.data()[((z / 2) * 2 + yy / 2) * 2 + xx / 2];
                assert_eq!(y.data()[(z * 4 + yy) * 4 + xx], src);
            }
        }
    }

    let big = NdArray::<f32>::zeros([1, 1, 40, 128, 128]);
    let w = NdArray::<f32>::zeros([1, 1, 2, 2, 2]);
    let up = raw::conv_transpose3d_forward(&big, &w, [2, 2, 2]).unwrap();
    assert_eq!(&up.shape()[2..], &[80, 256, 256]);

    let bad = NdArray::<f64>::zeros([1, 1, 3, 3, 3]);
    assert!(matches!(
        raw::conv_transpose3d_forward(&x, &bad, [2, 2, 2]),
        Err(Error::Unsupported(_))
    ));
}

#[test]
fn max_pool_examples() {
    let x = NdArray::<f32>::zeros([1, 1, 80, 160, 160]);
    let (y, _) = raw::max_pool3d_forward(&x, [1, 2, 2]).unwrap();
    assert_eq!(y.shape(), &[1, 1, 80, 80, 80]);

    let c = NdArray::<f64>::full([1, 2, 2, 4, 4], 3.5);
    let (y, argmax) = raw::max_pool3d_forward(&c, [2, 2, 2]).unwrap();
    assert!(y.data().iter().all(|&v| v == 3.5));
    // ties resolve to the first voxel of each window
    assert_eq!(argmax[0], 0);
    assert_eq!(argmax[1], 2);

    let odd = NdArray::<f64>::zeros([1, 1, 3, 4, 4]);
    assert!(matches!(raw::max_pool3d_forward(&odd, [2, 2, 2]), Err(Error::Shape(_))));
}

#[test]
fn pool_then_upsample_restores_shape() {
    let x = NdArray::<f64>::randn([1, 2, 4, 6, 2], 1.0, &mut rng(4));
    for k in [[1, 2, 2], [2, 2, 2], [2, 1, 2]] {
        let (p, _) = raw::max_pool3d_forward(&x, k).unwrap();
        let w = NdArray::ones([2, 2, k[0], k[1], k[2]]);
        let up = raw::conv_transpose3d_forward(&p, &w, k).unwrap();
        assert_eq!(up.shape(), x.shape());
    }
}

#[test]
fn instance_norm_examples() {
    let ones = NdArray::<f64>::ones([2]);
    let zeros = NdArray::<f64>::zeros([2]);
    let c = NdArray::<f64>::full([1, 2, 2, 3, 3], 7.0);
    let (y, _) = raw::instance_norm_forward(&c, &ones, &zeros, 1e-5).unwrap();
    assert!(y.data().iter().all(|v| v.abs() <= 1e-6));

    let x = NdArray::<f64>::randn([2, 2, 3, 4, 5], 3.0, &mut rng(5));
    let (y, _) = raw::instance_norm_forward(&x, &ones, &zeros, 1e-5).unwrap();
    for plane in y.data().chunks(60) {
        let mean = plane.iter().sum::<f64>() / 60.0;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 60.0;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-3);
    }

    let (y2, _) = raw::instance_norm_forward(&y, &NdArray::full([2], 2.0), &NdArray::full([2], 3.0), 1e-5).unwrap();
    for plane in y2.data().chunks(60) {
        let mean = plane.iter().sum::<f64>() / 60.0;
        let std = (plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 60.0).sqrt();
        assert!((mean - 3.0).abs() < 1e-3 && (std - 2.0).abs() < 1e-3, "{mean} {std}");
    }

    // a single voxel per instance stays finite thanks to eps
    let single = NdArray::<f64>::full([1, 2, 1, 1, 1], 4.0);
    let (y, _) = raw::instance_norm_forward(&single, &ones, &zeros, 1e-5).unwrap();
    assert!(y.all_finite());
}

#[test]
fn leaky_relu_values() {
    let x = arr(&[3], vec![-2.0, -5.0, 1.5]);
    assert_eq!(raw::leaky_relu_forward(&x, 0.01).data(), &[-0.02, -0.05, 1.5]);
    assert_eq!(raw::leaky_relu_forward(&x, 0.0).data(), &[-0.0, -0.0, 1.5]);
}

#[test]
fn leaky_relu_gradient_at_kink_is_one() {
    let mut g = Graph::new();
    let x = g.param(arr(&[2], vec![0.0, -1.0]));
    let y = g.leaky_relu(x, 0.1).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.1]);
}

#[test]
fn softmax_examples() {
    let x = arr(&[1, 2, 1, 1, 2], vec![0.0, 1.0, 0.0, 3f64.ln()]);
    let y = raw::softmax_channels_forward(&x).unwrap();
    // voxel 0: equal logits; voxel 1: logits (1, ln 3)
    assert!((y.data()[0] - 0.5).abs() < 1e-12 && (y.data()[2] - 0.5).abs() < 1e-12);
    let e = 1f64.exp();
    assert!((y.data()[1] - e / (e + 3.0)).abs() < 1e-12);

    let z = arr(&[1, 2, 1, 1, 1], vec![0.0, 3f64.ln()]);
    let p = raw::softmax_channels_forward(&z).unwrap();
    assert!((p.data()[0] - 0.25).abs() < 1e-12 && (p.data()[1] - 0.75).abs() < 1e-12);

    let r = NdArray::<f64>::randn([2, 3, 2, 2, 2], 5.0, &mut rng(6));
    let shifted = r.map(|v| v + 1000.0);
    let (a, b) = (
        raw::softmax_channels_forward(&r).unwrap(),
        raw::softmax_channels_forward(&shifted).unwrap(),
    );
    assert!(a.max_abs_diff(&b) < 1e-6);
    for s in 0..2 {
        for i in 0..8 {
            let total: f64 = (0..3).map(|c| a.data()[(s * 3 + c) * 8 + i]).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }
    let huge = arr(&[1, 2, 1, 1, 1], vec![1e30, -1e30]);
    assert!(raw::softmax_channels_forward(&huge).unwrap().all_finite());
}

#[test]
fn concat_examples() {
    let img = NdArray::<f64>::randn([1, 1, 2, 3, 4], 1.0, &mut rng(7));
    let prior = NdArray::<f64>::randn([1, 1, 2, 3, 4], 1.0, &mut rng(8));
    let y = raw::concat_channels_forward(&[&img, &prior]).unwrap();
    assert_eq!(y.shape(), &[1, 2, 2, 3, 4]);
    assert_eq!(y.channel_slice(0, 1).unwrap(), img);
    assert_eq!(y.channel_slice(1, 2).unwrap(), prior);
    assert_eq!(raw::concat_channels_forward(&[&img]).unwrap(), img);
    let other = NdArray::<f64>::zeros([1, 1, 2, 3, 5]);
    assert!(matches!(raw::concat_channels_forward(&[&img, &other]), Err(Error::Shape(_))));
}

#[test]
fn add_examples() {
    let mut g = Graph::new();
    let xa = NdArray::<f64>::randn([1, 2, 2, 2, 2], 1.0, &mut rng(9));
    let ya = NdArray::<f64>::randn([1, 2, 2, 2, 2], 1.0, &mut rng(10));
    let x = g.param(xa.clone());
    let y = g.param(ya.clone());
    let zero = g.constant(NdArray::zeros([1, 2, 2, 2, 2]));
    let same = g.add(x, zero).unwrap();
    assert_eq!(g.value(same), &xa);
    let s = g.add(x, y).unwrap();
    for i in 0..16 {
        assert_eq!(g.value(s).data()[i], xa.data()[i] + ya.data()[i]);
    }
    let total = g.sum(s).unwrap();
    g.backward(total).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    let bad = g.constant(NdArray::zeros([1, 2, 2, 2, 1]));
    assert!(matches!(g.add(x, bad), Err(Error::Shape(_))));
}

#[test]
fn backward_examples() {
    let xa = NdArray::<f64>::randn([2, 3], 1.0, &mut rng(11));
    let mut g = Graph::new();
    let x = g.param(xa.clone());
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    // repeated backward accumulates
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 2.0));

    let mut g = Graph::new();
    let x = g.param(xa.clone());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let half = g.scale(s, 0.5).unwrap();
    g.backward(half).unwrap();
    assert!(g.grad(x).unwrap().max_abs_diff(&xa) < 1e-15);

    assert!(matches!(g.backward(sq), Err(Error::Misuse(_))));
}

#[test]
fn constants_get_no_gradient() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(NdArray::ones([2]));
    let p = g.param(NdArray::ones([2]));
    let y = g.mul(c, p).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert!(g.grad(p).is_some());
}

#[test]
fn finite_diff_linear_is_exact() {
    let x = NdArray::<f64>::randn([4, 3], 1.0, &mut rng(12));
    let err = finite_diff_check(|g, xs| weighted_sum(g, xs[0], 99), &[x], 1e-4).unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn finite_diff_conv_norm_lrelu_composite() {
    let mut r = rng(13);
    let x = NdArray::<f64>::randn([1, 2, 2, 2, 2], 1.0, &mut r);
    let w = NdArray::<f64>::randn([3, 2, 3, 3, 3], 0.3, &mut r);
    let b = NdArray::<f64>::randn([3], 0.1, &mut r);
    let gamma = NdArray::<f64>::uniform([3], 0.5, 1.5, &mut r);
    let beta = NdArray::<f64>::randn([3], 0.1, &mut r);
    let f = |g: &mut Graph<f64>, t: &[Tensor]| {
        let y = g.conv3d(t[0], t[1], Some(t[2]), [1, 1, 1])?;
        let y = g.instance_norm(y, t[3], t[4], 1e-5)?;
        let y = g.leaky_relu(y, 0.01)?;
        weighted_sum(g, y, 77)
    };
    let inputs = [x, w, b, gamma, beta];
    // the bias is cancelled by the mean subtraction, so its gradient is exactly zero
    let analytic = gradcheck::graph_gradients(&f, &inputs).unwrap();
    assert!(analytic[2].data().iter().all(|v| v.abs() < 1e-12));
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != 2)
        .flat_map(|(i, a)| (0..a.len()).map(move |j| (i, j)))
        .collect();
    let err = finite_diff_check_at(f, &inputs, 1e-4, &coords).unwrap();
    assert!(err < 1e-5, "{err}");
}

struct FlippedSquare;

impl CustomOp<f64> for FlippedSquare {
    fn name(&self) -> &str {
        "flipped-square"
    }

    fn backward(&self, inputs: &[&NdArray<f64>], _: &NdArray<f64>, g: &NdArray<f64>) -> crate::Result<Vec<Option<NdArray<f64>>>> {
        // deliberately wrong: -2x instead of 2x
        let d = inputs[0].data().iter().zip(g.data()).map(|(x, g)| -2.0 * x * g).collect();
        Ok(vec![Some(NdArray::from_vec(inputs[0].shape().to_vec(), d)?)])
    }
}

#[test]
fn finite_diff_detects_sign_flip() {
    let x = NdArray::<f64>::uniform([5], 0.5, 2.0, &mut rng(14));
    let err = finite_diff_check(
        |g, t| {
            let v = g.value(t[0]).map(|v| v * v);
            let y = g.custom(&[t[0]], v, Box::new(FlippedSquare))?;
            g.sum(y)
        },
        &[x],
        1e-4,
    )
    .unwrap();
    assert!((err - 2.0).abs() < 1e-6, "{err}");
}

#[test]
fn non_finite_value_is_numeric_error() {
    let x = arr(&[1], vec![f64::INFINITY]);
    let res = finite_diff_check(|g, t| g.sum(t[0]), &[x], 1e-4);
    assert!(matches!(res, Err(Error::Numeric(_))));
}
