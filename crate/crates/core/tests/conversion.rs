use otters_core::converter::{convert_model, verify_equivalence, ConversionConfig, OttersBlock, OttersModel, VerifyConfig};
use otters_core::decay::DecayModel;
use otters_core::engine::{run_model, EngineMode, SamplingMode};
use otters_core::qnn::{ActQuantizer, QnnBlock, QnnModel};
use otters_core::rng::rng_from_seed;
use otters_core::synth::{random_codes, random_linear, random_mlp};
use proptest::prelude::*;
use rand::Rng as _;

fn random_layer_model(seed: u64) -> QnnModel {
    let mut rng = rng_from_seed(seed);
    let inputs = rng.random_range(1..=64);
    let outputs = rng.random_range(1..=64);
    let iq = ActQuantizer::new(rng.random_range(0.01..1.0), 4).unwrap();
    let oq = ActQuantizer::new(rng.random_range(0.01..1.0), 4).unwrap();
    let clip = rng.random_range(0..=outputs.min(4));
    let l = random_linear(&mut rng, inputs, outputs, iq, oq, clip).unwrap();
    QnnModel::new(iq, vec![QnnBlock::Linear(l)]).unwrap()
}

#[test]
fn ideal_mode_matches_qnn_on_random_layers() {
    let mut checked = 0;
    let mut clipped_low = 0;
    let mut clipped_high = 0;
    for seed in 0..300 {
        let m = random_layer_model(seed);
        let o = convert_model(&m, &ConversionConfig::new(4), &DecayModel::DEVICE).unwrap();
        let r = verify_equivalence(&m, &o, &VerifyConfig::new(3, seed)).unwrap();
        assert_eq!(r.mismatch_count(), 0, "seed {seed}: {:?}", r.mismatches.first());
        assert!(r.max_membrane_error <= 1e-9, "seed {seed}: {}", r.max_membrane_error);
        checked += r.neurons_checked;

        let QnnBlock::Linear(l) = &m.layers[0] else { unreachable!() };
        let x = random_codes(&mut rng_from_seed(seed + 1_000), 1, l.inputs(), &l.in_quant);
        for a in l.pre_activations(&x[0]).unwrap() {
            clipped_low += (a < 0.0) as usize;
            clipped_high += (a / l.out_quant.alpha >= 16.0) as usize;
        }
    }
    assert!(checked > 10_000);
    assert!(clipped_low > 0 && clipped_high > 0);
}

#[test]
fn physical_mode_only_boundary_mismatches() {
    let mut cfg = VerifyConfig::new(3, 11);
    cfg.mode = SamplingMode::Physical;
    let mut flagged = 0;
    let mut total = 0;
    for seed in 0..200 {
        let m = random_layer_model(seed);
        let o = convert_model(&m, &ConversionConfig::new(4), &DecayModel::DEVICE).unwrap();
        let r = verify_equivalence(&m, &o, &cfg).unwrap();
        assert_eq!(r.unexplained(), 0, "seed {seed}: {:?}", r.mismatches);
        flagged += r.boundary_flagged;
        total += r.neurons_checked;
    }
    assert!((flagged as f64) < 1e-3 * total as f64);
}

#[test]
fn three_layer_model_end_to_end() {
    let mut rng = rng_from_seed(5);
    let m = random_mlp(&mut rng, &[12, 20, 16, 6], 4).unwrap();
    let o = convert_model(&m, &ConversionConfig::new(4), &DecayModel::DEVICE).unwrap();
    assert_eq!(o.window, 15);
    let r = verify_equivalence(&m, &o, &VerifyConfig::new(200, 2)).unwrap();
    assert_eq!(r.mismatch_count(), 0);

    for _ in 0..1000 {
        let x = random_codes(&mut rng, 1, 12, &m.input_quant);
        let q = m.forward(&x).unwrap();
        let s = run_model(&o, &x, &EngineMode::ideal()).unwrap();
        for (l, (qb, sc)) in q.iter().zip(&s.block_codes).enumerate() {
            assert_eq!(&qb.codes, sc, "layer {l}");
        }
        for (qb, mem) in q.iter().zip(&s.block_membranes) {
            for (a, v) in qb.pre[0].iter().zip(&mem[0]) {
                assert!((a - v).abs() <= 1e-9);
            }
        }
        // At most one spike per neuron per layer, consumed in layer order.
        let mut seen = std::collections::HashSet::new();
        let mut last_layer = 0;
        for e in &s.trace {
            assert!(seen.insert((e.layer, e.neuron)));
            assert!(e.layer >= last_layer);
            assert!(e.k < 15);
            last_layer = e.layer;
        }
        for st in &s.stats {
            assert!(st.spike_rate <= 1.0 / 15.0 + 1e-15);
            assert_eq!(st.late_drops, 0);
        }
        assert_eq!(s.tables_built, 1);
    }
}

#[test]
fn one_bit_model_has_single_step() {
    let mut rng = rng_from_seed(8);
    let m = random_mlp(&mut rng, &[5, 4, 3], 1).unwrap();
    let o = convert_model(&m, &ConversionConfig::new(1), &DecayModel::DEVICE).unwrap();
    assert_eq!(o.window, 1);
    let r = verify_equivalence(&m, &o, &VerifyConfig::new(100, 1)).unwrap();
    assert_eq!(r.mismatch_count(), 0);
}

#[test]
fn silent_input_zero_bias_is_silent() {
    let mut rng = rng_from_seed(9);
    let mut m = random_mlp(&mut rng, &[6, 5, 4], 4).unwrap();
    for b in &mut m.layers {
        if let QnnBlock::Linear(l) = b {
            l.bias.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let o = convert_model(&m, &ConversionConfig::new(4), &DecayModel::DEVICE).unwrap();
    let s = run_model(&o, &[vec![0; 6]], &EngineMode::ideal()).unwrap();
    assert_eq!(s.outputs, vec![vec![0; 4]]);
    assert!(s.trace.is_empty());
    assert!(s.stats.iter().all(|st| st.spike_rate == 0.0));
}

#[test]
fn otters_model_json_round_trip() {
    let mut rng = rng_from_seed(10);
    let m = random_mlp(&mut rng, &[4, 3, 2], 4).unwrap();
    let o = convert_model(&m, &ConversionConfig::new(4), &DecayModel::DEVICE).unwrap();
    let text = otters_core::io::to_json_string(&o).unwrap();
    let back: OttersModel = serde_json::from_str(&text).unwrap();
    assert_eq!(back, o);
    back.validate().unwrap();
    assert!(text.contains("\"T\": 15"));
    assert!(matches!(back.layers[0], OttersBlock::Linear(_)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn raising_an_excitatory_input_never_delays_the_spike(seed in 0u64..10_000, pick in 0usize..64) {
        let m = random_layer_model(seed);
        let QnnBlock::Linear(l) = &m.layers[0] else { unreachable!() };
        let o = convert_model(&m, &ConversionConfig::new(4), &DecayModel::DEVICE).unwrap();
        let mut rng = rng_from_seed(seed ^ 0xabc);
        let x = random_codes(&mut rng, 1, l.inputs(), &l.in_quant);
        let i = pick % l.inputs();
        prop_assume!(x[0][i] < 15);
        let mut y = x.clone();
        y[0][i] += 1;
        let a = run_model(&o, &x, &EngineMode::ideal()).unwrap();
        let b = run_model(&o, &y, &EngineMode::ideal()).unwrap();
        for j in 0..l.outputs() {
            if l.weights.get(j, i) >= 0.0 {
                prop_assert!(b.outputs[0][j] >= a.outputs[0][j]);
            }
        }
    }
}
