mod common;

use catunet::autodiff::{kernels, Conv2dParams, Graph};
use catunet::rng::{Rng, Stream};
use catunet::Tensor;
use common::*;
use proptest::prelude::*;

#[test]
fn conv2d_matches_nested_loops() {
    let e = conv2d_oracle_error(0, ORACLE_CASES);
    assert!(e <= ORACLE_TOLERANCE, "max abs error {e}");
}

#[test]
fn maxpool_matches_nested_loops() {
    assert_eq!(maxpool_oracle_error(0, ORACLE_CASES), 0.0);
}

#[test]
fn upsample_matches_nested_loops() {
    assert_eq!(upsample_oracle_error(0, ORACLE_CASES), 0.0);
}

fn tensor(shape: [usize; 4], bound: f32) -> impl Strategy<Value = Tensor> {
    let len = shape.iter().product::<usize>();
    prop::collection::vec(-bound..bound, len)
        .prop_map(move |v| Tensor::new(shape.to_vec(), v).unwrap())
}

prop_compose! {
    fn conv_case()(k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..3,
                   n in 1usize..3, cin in 1usize..4, cout in 1usize..4,
                   dh in 0usize..5, dw in 0usize..5, pad_pick in 0usize..3)
        -> (usize, Conv2dParams, [usize; 4], [usize; 4]) {
        let p = Conv2dParams { stride, padding: pad_pick.min(k / 2) };
        (k, p, [n, cin, k + dh, k + dw], [cout, cin, k, k])
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_output_shape_follows_geometry((k, p, xs, ws) in conv_case()) {
        let x = Tensor::zeros(&xs);
        let w = Tensor::zeros(&ws);
        let out = kernels::conv2d(&x, &w, &Tensor::zeros(&[ws[0]]), p).unwrap();
        let oh = (xs[2] + 2 * p.padding - k) / p.stride + 1;
        let ow = (xs[3] + 2 * p.padding - k) / p.stride + 1;
        prop_assert_eq!(out.shape(), &[xs[0], ws[0], oh, ow][..]);
    }

    #[test]
    fn pool_and_upsample_shapes(n in 1usize..3, c in 1usize..4, h in 2usize..12, w in 2usize..12,
                                f in 1usize..4) {
        let x = Tensor::zeros(&[n, c, h, w]);
        let pooled = kernels::maxpool2d(&x, 2, 2).unwrap().output;
        prop_assert_eq!(pooled.shape(), &[n, c, h / 2, w / 2][..]);
        let up = kernels::upsample_nearest(&x, f).unwrap();
        prop_assert_eq!(up.shape(), &[n, c, h * f, w * f][..]);
        let cat = kernels::concat_channels(&x, &up.clone().reshape([n, c * f * f, h, w]).unwrap()).unwrap();
        prop_assert_eq!(cat.shape(), &[n, c + c * f * f, h, w][..]);
    }

    #[test]
    fn conv_is_linear_without_bias(x in tensor([1, 2, 5, 5], 1.0), y in tensor([1, 2, 5, 5], 1.0),
                                   w in tensor([3, 2, 3, 3], 1.0),
                                   a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let p = Conv2dParams { stride: 1, padding: 1 };
        let zero = Tensor::zeros(&[3]);
        let mix = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(u, v)| a * u + b * v).collect(),
        ).unwrap();
        let lhs = kernels::conv2d(&mix, &w, &zero, p).unwrap();
        let cx = kernels::conv2d(&x, &w, &zero, p).unwrap();
        let cy = kernels::conv2d(&y, &w, &zero, p).unwrap();
        for ((l, u), v) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
            prop_assert!((l - (a * u + b * v)).abs() < 1e-5, "{} vs {}", l, a * u + b * v);
        }
    }

    #[test]
    fn bounded_inputs_stay_finite(x in tensor([2, 2, 4, 4], 10.0), w in tensor([2, 2, 3, 3], 10.0),
                                  b in prop::collection::vec(-10.0f32..10.0, 2)) {
        let mut g = Graph::new();
        let xi = g.param(x);
        let wi = g.param(w);
        let bi = g.param(Tensor::new([2], b).unwrap());
        let c = g.conv2d(xi, wi, bi, Conv2dParams { stride: 1, padding: 1 }).unwrap();
        let r = g.relu(c);
        let pooled = g.maxpool2d(r, 2, 2).unwrap();
        let up = g.upsample_nearest(pooled, 2).unwrap();
        let cat = g.concat_channels(up, r).unwrap();
        let mut rng = Rng::new(0, Stream::Dropout);
        let d = g.dropout(cat, 0.5, true, &mut rng).unwrap();
        let target = g.input(Tensor::zeros(&[2, 4, 4, 4]));
        let loss = g.mse(d, target).unwrap();
        g.backward(loss).unwrap();
        prop_assert!(g.scalar(loss).is_finite());
        for id in [xi, wi, bi] {
            prop_assert!(g.grad(id).unwrap().all_finite());
        }
    }
}

#[test]
fn forward_and_gradients_repeat_bit_exactly() {
    let run = || {
        let mut rng = Rng::new(9, Stream::Custom(1));
        let x = Tensor::from_fn(&[2, 3, 6, 6], |_| rng.normal());
        let w = Tensor::from_fn(&[4, 3, 3, 3], |_| rng.normal());
        let mut g = Graph::new();
        let xi = g.input(x);
        let wi = g.param(w);
        let bi = g.param(Tensor::zeros(&[4]));
        let c = g
            .conv2d(
                xi,
                wi,
                bi,
                Conv2dParams {
                    stride: 1,
                    padding: 1,
                },
            )
            .unwrap();
        let mut drop = Rng::new(9, Stream::Dropout);
        let d = g.dropout(c, 0.5, true, &mut drop).unwrap();
        let s = g.sum_squares(d);
        g.backward(s).unwrap();
        (g.value(d).clone(), g.grad(wi).unwrap().clone())
    };
    assert_eq!(run(), run());
}
