use bift::conditioning::{build_scheme, Scheme, SchemeConfig};
use bift::models::{DiscriminatorSpec, GeneratorBase, GeneratorSpec, ModelGraph, OutputHead};
use bift::nn::Params;
use bift::{Graph, Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn inputs(n: usize, h: usize, w: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::from_fn(Shape::new(n, 1, h, w), |_| rng.gen_range(-1.0..1.0));
    let b = Tensor::from_fn(Shape::new(n, 3, h, w), |_| rng.gen_range(-1.0..1.0));
    (a, b)
}

#[test]
fn unet_skips_carry_input_when_bottleneck_is_dead() {
    let spec = GeneratorSpec { depth: 3, base_width: 4, residual_input: false, ..GeneratorSpec::default() };
    let mut m: ModelGraph<f64> =
        build_scheme(&SchemeConfig::with_scheme(Scheme::InputConcat), &spec, &DiscriminatorSpec::default(), 3).unwrap();
    let last = m.generator.encoder.input_encoder.last().unwrap().conv.weight_name();
    m.gen_params.get_mut(&last).unwrap().data_mut().fill(0.0);
    let (a, gd) = inputs(1, 16, 16, 1);
    let (b, _) = inputs(1, 16, 16, 2);
    let ya = m.predict(&a, &gd).unwrap();
    let yb = m.predict(&b, &gd).unwrap();
    let diff = ya.zip_map(&yb, "diff", |p, q| p - q).unwrap().max_abs();
    assert!(diff > 1e-6, "output ignored the input, diff {diff}");
}

#[test]
fn default_generator_keeps_resolution() {
    let m: ModelGraph<f32> =
        build_scheme(&SchemeConfig::default(), &GeneratorSpec::default(), &DiscriminatorSpec::default(), 0).unwrap();
    let i = Tensor::<f32>::zeros(Shape::new(1, 1, 64, 64));
    let g = Tensor::<f32>::zeros(Shape::new(1, 3, 64, 64));
    assert_eq!(m.predict(&i, &g).unwrap().shape(), Shape::new(1, 1, 64, 64));
}

#[test]
fn zero_discriminator_emits_half_probability_everywhere() {
    let mut m: ModelGraph<f64> = build_scheme(
        &SchemeConfig::with_scheme(Scheme::InputConcat),
        &GeneratorSpec::default(),
        &DiscriminatorSpec { layers: 3, base_width: 8 },
        0,
    )
    .unwrap();
    for (_, t) in m.disc_params.iter_mut() {
        t.data_mut().fill(0.0);
    }
    let (a, gd) = inputs(2, 64, 64, 4);
    let (c, _) = inputs(2, 64, 64, 5);
    let mut g = Graph::new();
    let (x, y, z) = (g.input(a), g.input(gd), g.input(c));
    let d = m.discriminator.forward(&mut g, Params::frozen(&m.disc_params), x, y, z).unwrap();
    assert_eq!(g.shape(d), Shape::new(2, 1, 8, 8));
    assert!(g.value(d).data().iter().all(|&v| v == 0.0));
    let s = g.sigmoid(d).unwrap();
    assert!(g.value(s).data().iter().all(|&v| v == 0.5));
}

#[test]
fn discriminator_reaches_candidate_and_its_weights() {
    let m: ModelGraph<f64> =
        build_scheme(&SchemeConfig::with_scheme(Scheme::InputConcat), &GeneratorSpec::default(), &DiscriminatorSpec { layers: 2, base_width: 4 }, 1)
            .unwrap();
    let (a, gd) = inputs(1, 16, 16, 6);
    let (c, _) = inputs(1, 16, 16, 7);
    let mut g = Graph::new();
    let (x, y) = (g.input(a), g.input(gd));
    let z = g.param("candidate", &c);
    let d = m.discriminator.forward(&mut g, Params::trainable(&m.disc_params), x, y, z).unwrap();
    let loss = g.bce_with_logits(d, 1.0).unwrap();
    g.backward(loss).unwrap();
    assert!(g.param_grad("candidate").unwrap().max_abs() > 0.0);
    assert!(g.param_grad("disc.0.weight").unwrap().max_abs() > 0.0);
}

#[test]
fn tanh_head_bounds_output() {
    let spec = GeneratorSpec { depth: 2, base_width: 4, head: OutputHead::Tanh, ..GeneratorSpec::default() };
    let mut m: ModelGraph<f64> = build_scheme(&SchemeConfig::with_scheme(Scheme::FeatureConcat), &spec, &DiscriminatorSpec::default(), 2).unwrap();
    let head = m.generator.head().weight_name();
    m.gen_params.get_mut(&head).unwrap().data_mut().iter_mut().for_each(|v| *v *= 1e3);
    let (a, gd) = inputs(1, 8, 8, 8);
    let y = m.predict(&a, &gd).unwrap();
    assert!(y.data().iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn registry_covers_every_tensor_the_forward_pass_reads() {
    for scheme in Scheme::ALL {
        let cfg = SchemeConfig { scheme, ft_layer_count: 2, ..SchemeConfig::default() };
        let spec = GeneratorSpec { depth: 2, base_width: 4, ..GeneratorSpec::default() };
        let m: ModelGraph<f64> = build_scheme(&cfg, &spec, &DiscriminatorSpec { layers: 2, base_width: 4 }, 0).unwrap();
        let (a, gd) = inputs(1, 8, 8, 0);
        let mut g = Graph::new();
        let (x, y) = (g.input(a), g.input(gd));
        m.generator.forward(&mut g, Params::trainable(&m.gen_params), x, y).unwrap();
        let read: Vec<&str> = g.param_names().collect();
        let stored: Vec<&str> = m.gen_params.names().collect();
        assert_eq!(read, stored, "{scheme}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generator_output_matches_input_dims(
        scheme in prop::sample::select(Scheme::ALL.to_vec()),
        resnet in any::<bool>(),
        depth in 1usize..=3,
        hk in 1usize..=3,
        wk in 1usize..=3,
        residual in any::<bool>(),
    ) {
        let base = if resnet { GeneratorBase::ResNet } else { GeneratorBase::UNet };
        let spec = GeneratorSpec { base, depth, base_width: 2, residual_input: residual, ..GeneratorSpec::default() };
        let cfg = SchemeConfig { scheme, ft_layer_count: 1, ..SchemeConfig::default() };
        let m: ModelGraph<f32> = build_scheme(&cfg, &spec, &DiscriminatorSpec { layers: 1, base_width: 2 }, 0).unwrap();
        let d = spec.divisor();
        let (h, w) = (hk * d, wk * d);
        let i = Tensor::<f32>::full(Shape::new(1, 1, h, w), 0.3);
        let g = Tensor::<f32>::full(Shape::new(1, 3, h, w), -0.2);
        prop_assert_eq!(m.predict(&i, &g).unwrap().shape(), Shape::new(1, 1, h, w));
    }
}
