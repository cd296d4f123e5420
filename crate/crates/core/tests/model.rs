use catunet::checkpoint;
use catunet::rng::{Rng, Stream};
use catunet::training::{l2_penalty, loss};
use catunet::{CatUNetConfig, CatUNetModel, Tensor};
use proptest::prelude::*;

/// Weights plus biases of a `k x k` convolution.
fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cout * (cin * k * k + 1)
}

#[test]
fn default_model_has_the_hand_counted_parameter_total() {
    let c = CatUNetConfig::default();
    let (k, w) = (3, [16, 32, 64, 128]);
    let encoder = conv(1, w[0], k)
        + conv(w[0], w[0], k)
        + conv(w[0], w[1], k)
        + conv(w[1], w[1], k)
        + conv(w[1], w[2], k)
        + conv(w[2], w[2], k);
    let bottleneck = conv(w[2], w[3], k);
    let decoder =
        conv(w[3] + w[2], w[2], k) + conv(w[2] + w[1], w[1], k) + conv(w[1] + w[0], w[0], k);
    let head = conv(w[0], 1, 1);
    let total = encoder + bottleneck + decoder + head;
    assert_eq!(total, 290_929);
    assert_eq!(c.param_count(), total);
    let model = CatUNetModel::build(CatUNetConfig { input_size: 8, ..c }, 0).unwrap();
    assert_eq!(
        model.params().values().map(Tensor::len).sum::<usize>(),
        total
    );
}

fn small_config() -> impl Strategy<Value = CatUNetConfig> {
    (
        1usize..3,
        1usize..4,
        1usize..3,
        1usize..3,
        1usize..3,
        prop::sample::select(vec![1usize, 3]),
    )
        .prop_map(
            |(depth, base, growth, channels, mult, kernel)| CatUNetConfig {
                input_channels: channels,
                output_channels: channels,
                input_size: mult << depth,
                depth,
                base_channels: base,
                channel_growth: growth,
                kernel_size: kernel,
                dropout_rate: 0.25,
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn output_shape_equals_input_shape(config in small_config(), n in 1usize..3, seed in any::<u64>()) {
        let model = CatUNetModel::build(config.clone(), seed).unwrap();
        let s = config.input_size;
        let x = Tensor::full(&[n, config.input_channels, s, s], 0.5);
        let out = model.forward(&x, true, &mut Rng::new(seed, Stream::Dropout)).unwrap();
        prop_assert_eq!(out.shape(), x.shape());
        let recon = model.reconstruct(&x).unwrap();
        prop_assert_eq!(recon.shape(), x.shape());
    }

    #[test]
    fn checkpoint_roundtrip_is_the_identity(config in small_config(), seed in any::<u64>()) {
        let model = CatUNetModel::build(config, seed).unwrap();
        let back = checkpoint::from_bytes(&checkpoint::to_bytes(&model).unwrap()).unwrap();
        prop_assert_eq!(&back, &model);
    }
}

#[test]
fn reloaded_model_reproduces_forward_outputs() {
    let config = CatUNetConfig {
        input_size: 16,
        depth: 2,
        base_channels: 4,
        ..CatUNetConfig::default()
    };
    let model = CatUNetModel::build(config, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.catu");
    checkpoint::save(&model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    for (name, p) in model.params() {
        let q = &back.params()[name];
        assert!(
            p.data()
                .iter()
                .zip(q.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            "{name}"
        );
    }
    let mut rng = Rng::new(1, Stream::Custom(5));
    let x = Tensor::from_fn(&[2, 1, 16, 16], |_| rng.uniform());
    let (a, b) = (
        model.reconstruct(&x).unwrap(),
        back.reconstruct(&x).unwrap(),
    );
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(u, v)| u.to_bits() == v.to_bits()));
}

#[test]
fn loss_is_reconstruction_mse_plus_weighted_penalty() {
    let config = CatUNetConfig {
        input_size: 8,
        depth: 1,
        base_channels: 2,
        ..CatUNetConfig::default()
    };
    let model = CatUNetModel::build(config, 3).unwrap();
    let mut rng = Rng::new(2, Stream::Custom(6));
    let x = Tensor::from_fn(&[2, 1, 8, 8], |_| rng.uniform());
    let recon = model.reconstruct(&x).unwrap();
    let mse: f64 = x
        .data()
        .iter()
        .zip(recon.data())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    let penalty: f64 = model
        .params()
        .values()
        .flat_map(|t| t.data().iter())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum();
    assert!((l2_penalty(model.params().values()) - penalty).abs() <= 1e-9 * penalty);
    for lambda in [0.0, 1e-3, 0.5] {
        let got = loss(&model, &x, lambda).unwrap();
        let want = mse + lambda * penalty;
        assert!(
            (got - want).abs() <= 1e-6 * want.max(1e-12),
            "lambda {lambda}: {got} vs {want}"
        );
    }
}

#[test]
fn feature_norms_match_the_concatenated_parts() {
    // Depth 1: the concat joins upsample(bottleneck) with the encoder output,
    // so its squared norm is 4 |bottleneck|^2 + |encoder|^2 (nearest
    // upsampling by 2 repeats every value four times).
    let config = CatUNetConfig {
        input_size: 8,
        depth: 1,
        base_channels: 2,
        ..CatUNetConfig::default()
    };
    let model = CatUNetModel::build(config.clone(), 11).unwrap();
    let mut rng = Rng::new(4, Stream::Custom(7));
    let x = Tensor::from_fn(&[1, 1, 8, 8], |_| rng.uniform());

    use catunet::autodiff::{kernels, Conv2dParams};
    let same = Conv2dParams {
        stride: 1,
        padding: 1,
    };
    let p = |name: &str| model.param(name).unwrap();
    let relu_conv = |x: &Tensor, layer: &str| {
        kernels::relu(
            &kernels::conv2d(
                x,
                p(&format!("{layer}.weight")),
                p(&format!("{layer}.bias")),
                same,
            )
            .unwrap(),
        )
    };
    let e = relu_conv(&relu_conv(&x, "enc1.conv1"), "enc1.conv2");
    let pooled = kernels::maxpool2d(&e, 2, 2).unwrap().output;
    let b = relu_conv(&pooled, "bottleneck.conv");
    let want = (4.0 * b.sum_squares() + e.sum_squares()).sqrt();
    let got = model.feature_norms(&x).unwrap();
    assert_eq!(got.len(), 1);
    assert!((got[0] - want).abs() <= 1e-9 * want, "{} vs {want}", got[0]);
}
