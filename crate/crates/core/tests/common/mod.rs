//! Nested-loop reference implementations of the convolution kernels and
//! the randomized cases they are compared on.

#![allow(dead_code)]

use catunet::autodiff::kernels;
use catunet::autodiff::Conv2dParams;
use catunet::rng::{Rng, Stream};
use catunet::Tensor;

pub const ORACLE_CASES: usize = 50;
pub const ORACLE_TOLERANCE: f32 = 1e-6;

fn at(t: &Tensor, idx: [usize; 4]) -> f32 {
    let s = t.shape();
    t.data()[((idx[0] * s[1] + idx[1]) * s[2] + idx[2]) * s[3] + idx[3]]
}

pub fn conv2d_oracle(x: &Tensor, w: &Tensor, b: &Tensor, p: Conv2dParams) -> Tensor {
    let [n, cin, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [cout, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * p.padding - kh) / p.stride + 1;
    let ow = (wd + 2 * p.padding - kw) / p.stride + 1;
    let mut out = Vec::with_capacity(n * cout * oh * ow);
    for ni in 0..n {
        for co in 0..cout {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = f64::from(b.data()[co]);
                    for ci in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * p.stride + i) as isize - p.padding as isize;
                                let ix = (xo * p.stride + j) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += f64::from(at(w, [co, ci, i, j]))
                                    * f64::from(at(x, [ni, ci, iy as usize, ix as usize]));
                            }
                        }
                    }
                    out.push(acc as f32);
                }
            }
        }
    }
    Tensor::new([n, cout, oh, ow], out).unwrap()
}

pub fn maxpool_oracle(x: &Tensor, size: usize, stride: usize) -> Tensor {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (oh, ow) = ((h - size) / stride + 1, (w - size) / stride + 1);
    let mut out = Vec::new();
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut m = f32::NEG_INFINITY;
                    for i in 0..size {
                        for j in 0..size {
                            m = m.max(at(x, [ni, ci, y * stride + i, xo * stride + j]));
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Tensor::new([n, c, oh, ow], out).unwrap()
}

pub fn upsample_oracle(x: &Tensor, f: usize) -> Tensor {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let mut out = Vec::new();
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h * f {
                for xo in 0..w * f {
                    out.push(at(x, [ni, ci, y / f, xo / f]));
                }
            }
        }
    }
    Tensor::new([n, c, h * f, w * f], out).unwrap()
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

/// Worst absolute deviation of [`kernels::conv2d`] from the oracle over
/// randomized geometries.
pub fn conv2d_oracle_error(seed: u64, cases: usize) -> f32 {
    let mut rng = Rng::new(seed, Stream::Custom(7));
    let mut worst = 0.0f32;
    for _ in 0..cases {
        let k = 1 + 2 * rng.below(3);
        let p = Conv2dParams {
            stride: 1 + rng.below(2),
            padding: rng.below(k / 2 + 1),
        };
        let (n, cin, cout) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3));
        let h = k + rng.below(6);
        let w = k + rng.below(6);
        let x = random(&[n, cin, h, w], &mut rng);
        let wt = random(&[cout, cin, k, k], &mut rng);
        let b = random(&[cout], &mut rng);
        let got = kernels::conv2d(&x, &wt, &b, p).unwrap();
        worst = worst.max(max_abs_diff(&got, &conv2d_oracle(&x, &wt, &b, p)));
    }
    worst
}

pub fn maxpool_oracle_error(seed: u64, cases: usize) -> f32 {
    let mut rng = Rng::new(seed, Stream::Custom(8));
    let mut worst = 0.0f32;
    for _ in 0..cases {
        let size = 1 + rng.below(3);
        let stride = 1 + rng.below(3);
        let shape = [
            1 + rng.below(2),
            1 + rng.below(3),
            size + rng.below(7),
            size + rng.below(7),
        ];
        let x = random(&shape, &mut rng);
        let got = kernels::maxpool2d(&x, size, stride).unwrap().output;
        worst = worst.max(max_abs_diff(&got, &maxpool_oracle(&x, size, stride)));
    }
    worst
}

pub fn upsample_oracle_error(seed: u64, cases: usize) -> f32 {
    let mut rng = Rng::new(seed, Stream::Custom(9));
    let mut worst = 0.0f32;
    for _ in 0..cases {
        let f = 1 + rng.below(3);
        let shape = [
            1 + rng.below(2),
            1 + rng.below(3),
            1 + rng.below(5),
            1 + rng.below(5),
        ];
        let x = random(&shape, &mut rng);
        let got = kernels::upsample_nearest(&x, f).unwrap();
        worst = worst.max(max_abs_diff(&got, &upsample_oracle(&x, f)));
    }
    worst
}
