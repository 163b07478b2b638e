use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repap_core::make_cosine_schedule;
use repap_nn::attenuation::ToyNet;
use repap_nn::backbone::{BackboneConfig, TapPosition};
use repap_nn::train::sample;
use repap_nn::{discard_heads, AlignmentConfig, Model};

fn input(seed: u64, d: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attenuation_bounds_hold(net_seed in any::<u64>(), x_seed in any::<u64>(), sigma2 in 0.01f64..2.0) {
        let net = ToyNet::new(6, 10, 8, false, net_seed);
        let row = net.check(&input(x_seed, 6), sigma2, x_seed);
        prop_assert!(row.holds(), "{:?}", row);
    }

    #[test]
    fn mid_bound_ignores_downstream_rescaling(net_seed in any::<u64>(), x_seed in any::<u64>(), s in 0.05f64..50.0) {
        let net = ToyNet::new(6, 10, 8, false, net_seed);
        let x = input(x_seed, 6);
        let mut scaled = net.clone();
        scaled.layers[1].rescale(s);
        scaled.layers[2].rescale(s);
        let a = net.check(&x, 0.5, 3);
        let b = scaled.check(&x, 0.5, 3);
        prop_assert_eq!(a.bound_mid, b.bound_mid);
        prop_assert_eq!(a.lhs_mid, b.lhs_mid);
    }

    #[test]
    fn output_chain_norm_scales_with_last_layer(net_seed in any::<u64>(), x_seed in any::<u64>(), s in 0.05f64..50.0) {
        let net = ToyNet::new(6, 10, 8, false, net_seed);
        let x = input(x_seed, 6);
        let mut scaled = net.clone();
        scaled.layers[2].rescale(s);
        let a = net.check(&x, 0.5, 3);
        let b = scaled.check(&x, 0.5, 3);
        prop_assert!((b.chain_norm / a.chain_norm / s - 1.0).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn sampling_is_independent_of_heads(model_seed in any::<u64>(), sample_seed in any::<u64>(), c_mid in 0.0f64..1.0) {
        let align = AlignmentConfig {
            positions: vec![TapPosition::Bottleneck, TapPosition::Decoder(1)],
            c_mid,
            c_out: 0.0,
            head_hidden: 4,
        };
        let model = Model::<f64>::new(BackboneConfig::desk_unet(1, 1, 8, 8), align, 1, model_seed).unwrap();
        let sched = make_cosine_schedule(4).unwrap();
        let with = sample(&model, &sched, 1, None, None, sample_seed).unwrap();
        let without = sample(&discard_heads(&model), &sched, 1, None, None, sample_seed).unwrap();
        prop_assert_eq!(with, without);
    }
}
