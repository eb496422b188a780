mod common;

use common::*;
use gramstyle::network::{ConvParams, Provenance};
use gramstyle::tensor::{conv2d, relu, Kernel, Padding, PoolMode, Shape3, Tensor3};
use gramstyle::{Error, FeatureMode, LayerKind, LayerSpec, Network, NetworkConfig, WeightStore};
use rand::Rng;

fn manual(layers: Vec<ConvParams>) -> WeightStore {
    WeightStore { layers, provenance: Provenance::Manual }
}

fn params(r: &mut rand_chacha::ChaCha8Rng, name: &str, o: usize, i: usize, k: usize) -> ConvParams {
    ConvParams {
        name: name.into(),
        kernel: rand_kernel(r, o, i, k, k),
        bias: (0..o).map(|_| r.random_range(-0.5..0.5)).collect(),
    }
}

#[test]
fn identity_conv_reproduces_image() {
    let config = NetworkConfig::new(3, vec![LayerSpec::conv("c", 3, 1)]).unwrap().with_features(FeatureMode::Pre);
    let mut k = Kernel::zeros(3, 3, 1, 1);
    for c in 0..3 {
        k.data_mut()[c * 3 + c] = 1.0;
    }
    let net =
        Network::new(config, manual(vec![ConvParams { name: "c".into(), kernel: k, bias: vec![0.0; 3] }])).unwrap();
    let mut r = rng(50);
    let img = rand_tensor(&mut r, Shape3::new(3, 5, 4), 10.0);
    let cache = net.forward(&img, &["c"]).unwrap();
    assert_eq!(cache.feature("c").unwrap(), &img);
    let g = rand_tensor(&mut r, img.shape(), 1.0);
    assert_eq!(net.backward(&cache, &[("c", g.clone())]).unwrap(), g);
}

#[test]
fn zero_weights_give_zero_features() {
    let config = NetworkConfig::tinyvgg();
    let net = Network::new(config.clone(), WeightStore::zeros(&config)).unwrap();
    let mut r = rng(51);
    let img = rand_tensor(&mut r, Shape3::new(3, 16, 16), 100.0);
    let names = ["conv1-1", "conv2-1", "conv3-1"];
    let cache = net.forward(&img, &names).unwrap();
    for n in names {
        assert!(cache.feature(n).unwrap().data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn forward_matches_composed_oracles() {
    let mut r = rng(52);
    let layers = vec![
        LayerSpec::conv("a", 4, 3),
        LayerSpec::relu("ra"),
        LayerSpec::pool("p", PoolMode::Max),
        LayerSpec {
            name: "b".into(),
            kind: LayerKind::Conv { out_channels: 2, kernel_size: 3, stride: 1, padding: Padding::Valid },
        },
    ];
    let config = NetworkConfig::new(3, layers).unwrap().with_features(FeatureMode::Pre);
    let pa = params(&mut r, "a", 4, 3, 3);
    let pb = params(&mut r, "b", 2, 4, 3);
    let img = rand_tensor(&mut r, Shape3::new(3, 16, 16), 1.0);
    let net = Network::new(config, manual(vec![pa.clone(), pb.clone()])).unwrap();
    let cache = net.forward(&img, &["a", "b"]).unwrap();

    let a = conv_oracle(&img, &pa.kernel, &pa.bias, 1, 1);
    let pooled = pool_oracle(&relu(&a), PoolMode::Max, 2, 2);
    let b = conv_oracle(&pooled, &pb.kernel, &pb.bias, 1, 0);
    assert!(max_abs_diff(cache.feature("a").unwrap().data(), a.data()) < 1e-12);
    assert!(max_abs_diff(cache.feature("b").unwrap().data(), b.data()) < 1e-12);
    assert_eq!(cache.feature("b").unwrap().shape(), Shape3::new(2, 6, 6));
}

#[test]
fn post_mode_reports_relu_output() {
    let config = NetworkConfig::tinyvgg();
    let net = Network::seeded(config, 3);
    let mut r = rng(53);
    let img = rand_tensor(&mut r, Shape3::new(3, 8, 8), 50.0);
    let cache = net.forward(&img, &["conv1-1", "relu1-1"]).unwrap();
    assert_eq!(cache.feature("conv1-1").unwrap(), cache.feature("relu1-1").unwrap());
    let w = &net.weights().layers[0];
    let raw = conv2d(&img, &w.kernel, &w.bias, 1, Padding::Same).unwrap();
    assert_eq!(cache.feature("conv1-1").unwrap(), &relu(&raw));

    let pre = Network::seeded(NetworkConfig::tinyvgg().with_features(FeatureMode::Pre), 3);
    assert_eq!(pre.forward(&img, &["conv1-1"]).unwrap().feature("conv1-1").unwrap(), &raw);
}

#[test]
fn backward_matches_finite_differences() {
    let mut r = rng(54);
    let layers = vec![
        LayerSpec::conv("c1", 3, 3),
        LayerSpec::relu("r1"),
        LayerSpec::pool("p1", PoolMode::Average),
        LayerSpec::conv("c2", 4, 3),
        LayerSpec::relu("r2"),
        LayerSpec::conv("c3", 2, 3),
    ];
    let config = NetworkConfig::new(3, layers).unwrap().with_features(FeatureMode::Pre);
    let net = Network::new(
        config,
        manual(vec![params(&mut r, "c1", 3, 3, 3), params(&mut r, "c2", 4, 3, 3), params(&mut r, "c3", 2, 4, 3)]),
    )
    .unwrap();
    let img = rand_tensor(&mut r, Shape3::new(3, 8, 8), 1.0);
    let cache = net.forward(&img, &["c1", "c2", "c3"]).unwrap();
    let grads: Vec<(&str, Tensor3)> =
        ["c1", "c2", "c3"].iter().map(|&n| (n, rand_tensor(&mut r, cache.feature(n).unwrap().shape(), 1.0))).collect();
    let analytic = net.backward(&cache, &grads).unwrap();
    let before = cache.activation_signature(net.config());
    let err = fd_max_rel_error(&img, &analytic, 1e-6, |x| {
        let c = net.forward(x, &["c1", "c2", "c3"]).unwrap();
        grads.iter().map(|(n, g)| c.feature(n).unwrap().dot(g).unwrap()).sum()
    });
    // the probes must stay on one linear piece for the comparison to be exact
    for k in 0..img.data().len() {
        for s in [1e-6, -1e-6] {
            let mut p = img.clone();
            p.data_mut()[k] += s;
            assert_eq!(net.forward(&p, &["c3"]).unwrap().activation_signature(net.config()), before);
        }
    }
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_trivial_cases() {
    let net = Network::seeded(NetworkConfig::tinyvgg(), 4);
    let mut r = rng(55);
    let img = rand_tensor(&mut r, Shape3::new(3, 8, 8), 1.0);
    let cache = net.forward(&img, &["conv2-1"]).unwrap();
    let zero = Tensor3::zeros(cache.feature("conv2-1").unwrap().shape());
    let back = net.backward(&cache, &[("conv2-1", zero)]).unwrap();
    assert!(back.data().iter().all(|&v| v == 0.0));
    let stray = Tensor3::zeros(Shape3::new(32, 2, 2));
    assert!(matches!(net.backward(&cache, &[("conv3-1", stray)]), Err(Error::UnknownLayer(_))));
    let wrong = Tensor3::zeros(Shape3::new(16, 3, 3));
    assert!(net.backward(&cache, &[("conv2-1", wrong)]).is_err());
}

#[test]
fn forward_is_lazy() {
    let net = Network::seeded(NetworkConfig::tinyvgg(), 5);
    let img = Tensor3::filled(Shape3::new(3, 8, 8), 1.0);
    assert_eq!(net.forward(&img, &["conv1-1"]).unwrap().executed_layers(), 2);
    assert_eq!(net.forward(&img, &["pool1"]).unwrap().executed_layers(), 5);
    assert_eq!(net.forward(&img, &["conv1-1", "conv3-1"]).unwrap().executed_layers(), 12);
    let cache = net.forward(&img, &["conv1-1"]).unwrap();
    assert!(cache.feature("conv2-1").is_err());
}

#[test]
fn forward_errors() {
    let net = Network::seeded(NetworkConfig::tinyvgg(), 6);
    let img = Tensor3::zeros(Shape3::new(3, 8, 8));
    assert!(matches!(net.forward(&img, &["conv9-9"]), Err(Error::UnknownLayer(_))));
    assert!(net.forward(&Tensor3::zeros(Shape3::new(1, 8, 8)), &["conv1-1"]).is_err());
    // two 2x2 pools cannot shrink a 3x3 image
    assert!(net.forward(&Tensor3::zeros(Shape3::new(3, 3, 3)), &["conv3-1"]).is_err());
}

#[test]
fn config_validation() {
    assert!(NetworkConfig::new(3, vec![LayerSpec::relu("r")]).is_err());
    assert!(NetworkConfig::new(3, vec![LayerSpec::conv("c", 2, 3), LayerSpec::conv("c", 2, 3)]).is_err());
    assert!(NetworkConfig::new(0, vec![LayerSpec::conv("c", 2, 3)]).is_err());
    assert!(NetworkConfig::preset("tinyvgg").is_some());
    assert!(NetworkConfig::preset("vgg19").is_some());
    assert!(NetworkConfig::preset("resnet").is_none());
    let vgg = NetworkConfig::vgg19();
    assert_eq!(vgg.conv_shapes().len(), 16);
    assert_eq!(vgg.feature_channels("conv5-1").unwrap(), 512);
    assert_eq!(NetworkConfig::tinyvgg().feature_channels("conv2-1").unwrap(), 16);
}

#[test]
fn random_init_is_seeded() {
    let config = NetworkConfig::tinyvgg();
    let a = WeightStore::random_init(&config, 9);
    assert_eq!(a, WeightStore::random_init(&config, 9));
    assert_ne!(a.layers, WeightStore::random_init(&config, 10).layers);
    assert!(a.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
}

#[test]
fn fan_in_scaling_preserves_variance() {
    let layers = vec![LayerSpec {
        name: "c".into(),
        kind: LayerKind::Conv { out_channels: 64, kernel_size: 3, stride: 1, padding: Padding::Valid },
    }];
    let config = NetworkConfig { input_channels: 64, mean: vec![0.0; 64], layers, features: FeatureMode::Post };
    config.validate().unwrap();
    let mut r = rng(56);
    for seed in 0..10 {
        let store = WeightStore::random_init(&config, seed);
        let input = Tensor3::from_fn(Shape3::new(64, 10, 10), |_, _, _| {
            // uniform on [-sqrt(3), sqrt(3)] has unit variance
            r.random_range(-3f64.sqrt()..3f64.sqrt())
        });
        let p = &store.layers[0];
        let out = conv2d(&input, &p.kernel, &p.bias, 1, Padding::Valid).unwrap();
        let n = out.data().len() as f64;
        let mean = out.data().iter().sum::<f64>() / n;
        let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((0.5..=2.0).contains(&var), "seed {seed}: variance {var}");
    }
}

#[test]
fn weights_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.gfw");
    let config = NetworkConfig::tinyvgg();
    let store = WeightStore::random_init(&config, 12);
    store.save(&path).unwrap();
    let back = WeightStore::load(&config, &path).unwrap();
    assert_eq!(back.layers, store.layers);
    assert_eq!(back.provenance, Provenance::File(path.clone()));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(WeightStore::load(&config, &path).is_err());

    let other = NetworkConfig::new(3, vec![LayerSpec::conv("conv1-1", 4, 3)]).unwrap();
    WeightStore::random_init(&other, 1).save(&path).unwrap();
    let err = WeightStore::load(&config, &path).unwrap_err().to_string();
    assert!(err.contains("conv1-1") || err.contains("conv1-2"), "{err}");
    let single = NetworkConfig::new(3, vec![LayerSpec::conv("conv1-1", 8, 3)]).unwrap();
    let err = WeightStore::load(&single, &path).unwrap_err().to_string();
    assert!(err.contains("conv1-1"), "{err}");
}

#[test]
fn forward_and_backward_are_deterministic() {
    let net = Network::seeded(NetworkConfig::tinyvgg(), 7);
    let mut r = rng(57);
    let img = rand_tensor(&mut r, Shape3::new(3, 16, 16), 30.0);
    let a = net.forward(&img, &["conv3-1"]).unwrap();
    let b = net.forward(&img, &["conv3-1"]).unwrap();
    assert_eq!(a.feature("conv3-1").unwrap().data(), b.feature("conv3-1").unwrap().data());
    let g = rand_tensor(&mut r, a.feature("conv3-1").unwrap().shape(), 1.0);
    assert_eq!(
        net.backward(&a, &[("conv3-1", g.clone())]).unwrap().data(),
        net.backward(&b, &[("conv3-1", g)]).unwrap().data()
    );
}
