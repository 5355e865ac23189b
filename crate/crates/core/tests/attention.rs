#![allow(clippy::needless_range_loop)]

use otters_core::attention::{binarize_activations, run_attention_block, spike_steps, spiking_score, OpCounter};
use otters_core::converter::{convert_model, ConversionConfig, OttersBlock};
use otters_core::decay::{build_spike_time_table, DecayModel};
use otters_core::engine::{SamplingMode, Sampler};
use otters_core::qnn::{ActQuantizer, QnnAttention, QnnBlock, QnnModel};
use otters_core::rng::rng_from_seed;
use otters_core::synth::{random_attention, random_codes};
use otters_core::Matrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

fn ideal() -> Sampler {
    let table = build_spike_time_table(&DecayModel::DEVICE, 15).unwrap();
    Sampler::from_parts(&table, &DecayModel::DEVICE, SamplingMode::Ideal)
}

#[test]
fn score_kernel_matches_dense_oracle() {
    let sampler = ideal();
    for seed in 0..100 {
        let mut rng = rng_from_seed(seed);
        let s = rng.random_range(1..=16);
        let d = rng.random_range(1..=16);
        let alpha = rng.random_range(0.01..1.0);
        let q = ActQuantizer::new(alpha, 4).unwrap();
        let codes = random_codes(&mut rng, s, d, &q);
        let k = Matrix::from_fn(s, d, |_, _| StandardNormal.sample(&mut rng));
        let kb = binarize_activations(&k).unwrap();
        let mut ops = OpCounter::default();
        let got = spiking_score(&spike_steps(&codes, 15), alpha, &kb, &sampler, &mut ops).unwrap();
        for s1 in 0..s {
            for s2 in 0..s {
                let mut want = 0.0;
                for c in 0..d {
                    let ks = if k.get(s2, c) < 0.0 { -kb.scale } else { kb.scale };
                    want += alpha * codes[s1][c] as f64 * ks;
                }
                assert!((got[s1][s2] - want).abs() <= 1e-9, "seed {seed}");
            }
        }
        assert_eq!(ops.multiplications, 0);
    }
}

fn block(seed: u64, seq_dim: usize, heads: usize, d_k: usize, kv_bits: u32) -> QnnModel {
    let mut rng = rng_from_seed(seed);
    let input = ActQuantizer::new(rng.random_range(0.05..0.5), 4).unwrap();
    let a = random_attention(&mut rng, seq_dim, heads, d_k, kv_bits, input).unwrap();
    QnnModel::new(input, vec![QnnBlock::Attention(a)]).unwrap()
}

fn with_kv_bits(m: &QnnModel, kv_bits: u32) -> QnnModel {
    let QnnBlock::Attention(a) = &m.layers[0] else { unreachable!() };
    let a = QnnAttention { kv_bits, ..a.clone() };
    QnnModel::new(m.input_quant, vec![QnnBlock::Attention(a)]).unwrap()
}

fn spiking(m: &QnnModel, x: &[Vec<u32>]) -> otters_core::attention::AttentionRun {
    let o = convert_model(m, &ConversionConfig::new(4), &DecayModel::DEVICE).unwrap();
    let OttersBlock::Attention(a) = &o.layers[0] else { unreachable!() };
    run_attention_block(a, x, 15, &ideal(), None).unwrap()
}

#[test]
fn single_head_block_matches_reference() {
    for seed in 0..20 {
        let m = block(seed, 4, 1, 4, 4);
        let x = random_codes(&mut rng_from_seed(seed + 100), 4, 4, &m.input_quant);
        let QnnBlock::Attention(a) = &m.layers[0] else { unreachable!() };
        let want = a.forward(&x).unwrap();
        let got = spiking(&m, &x);
        assert_eq!(got.q_codes, want.q_codes);
        assert_eq!(got.prob_codes, want.prob_codes);
        assert_eq!(got.out_codes, want.out_codes, "seed {seed}");
        for h in &got.probs {
            for row in h {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn one_bit_and_four_bit_each_match_their_reference() {
    let mut differ = 0;
    for seed in 0..20 {
        let m4 = block(seed, 8, 2, 4, 4);
        let m1 = with_kv_bits(&m4, 1);
        let x = random_codes(&mut rng_from_seed(seed + 200), 6, 8, &m4.input_quant);
        for m in [&m4, &m1] {
            let QnnBlock::Attention(a) = &m.layers[0] else { unreachable!() };
            let want = a.forward(&x).unwrap();
            let got = spiking(m, &x);
            assert_eq!(got.out_codes, want.out_codes, "seed {seed} kv_bits {}", a.kv_bits);
            if a.kv_bits == 1 {
                assert_eq!(got.ops.multiplications, 0);
            }
        }
        let QnnBlock::Attention(a4) = &m4.layers[0] else { unreachable!() };
        let QnnBlock::Attention(a1) = &m1.layers[0] else { unreachable!() };
        if a4.forward(&x).unwrap().mixed != a1.forward(&x).unwrap().mixed {
            differ += 1;
        }
    }
    assert!(differ > 0);
}

#[test]
fn random_blocks_exercise_interior_codes() {
    let (mut nz, mut tot, mut pnz) = (0, 0, 0);
    for seed in 0..20 {
        let m = block(seed, 8, 2, 4, if seed % 2 == 0 { 1 } else { 4 });
        let x = random_codes(&mut rng_from_seed(seed + 200), 6, 8, &m.input_quant);
        let r = spiking(&m, &x);
        nz += r.out_codes.iter().flatten().filter(|&&c| c > 0 && c < 15).count();
        pnz += r.mixed_codes.iter().flatten().filter(|&&c| c > 0 && c < 15).count();
        tot += r.out_codes.iter().flatten().count();
    }
    assert!(2 * nz > tot, "{nz}/{tot}");
    assert!(pnz > 100, "{pnz}");
}
