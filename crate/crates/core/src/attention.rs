//! Spiking attention with 1-bit (or 4-bit) keys and values.
//!
//! Query and probability spikes index a per-step lookup table; each arrival
//! is added or subtracted according to the key/value sign, and the tensor
//! scale is applied once per output element after the spike loop.

use serde::{Deserialize, Serialize};

use crate::converter::OttersAttention;
use crate::engine::{run_linear_block, Sampler};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::qnn::{binarize_weights, softmax, ActQuantizer, BinaryMatrix, KvTensor, NoiseSource};

/// Operations performed inside the spike loops of the attention kernels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounter {
    pub additions: u64,
    pub subtractions: u64,
    pub lookups: u64,
    /// Multiplications inside the spike loop.
    pub multiplications: u64,
    /// Scale applications after the loop, one per output element.
    pub scale_ops: u64,
    /// Analog noise factors applied to sampled values.
    pub noise_draws: u64,
}

impl OpCounter {
    pub fn merge(&mut self, o: &OpCounter) {
        self.additions += o.additions;
        self.subtractions += o.subtractions;
        self.lookups += o.lookups;
        self.multiplications += o.multiplications;
        self.scale_ops += o.scale_ops;
        self.noise_draws += o.noise_draws;
    }
}

/// Sign binarization of an activation tensor (same scheme as weights).
pub fn binarize_activations(m: &Matrix) -> Result<BinaryMatrix> {
    binarize_weights(m)
}

/// Spike step of every code: `T - q`, or `None` for silence.
pub fn spike_steps(codes: &[Vec<u32>], window: usize) -> Vec<Vec<Option<usize>>> {
    codes
        .iter()
        .map(|r| r.iter().map(|&q| (q > 0).then(|| window - q as usize)).collect())
        .collect()
}

#[inline]
fn sample(lut: &[f64], k: usize, noise: &mut Option<&mut NoiseSource>, ops: &mut OpCounter) -> f64 {
    ops.lookups += 1;
    match noise {
        None => lut[k],
        Some(src) => {
            ops.noise_draws += 1;
            lut[k] * src.factor()
        }
    }
}

/// `out[a][b] = scale * sum_c (+/-) lut[steps[a][c]]` with the sign `sign(b, c)`.
fn binary_kernel(
    steps: &[Vec<Option<usize>>],
    lut: &[f64],
    outputs: usize,
    sign: impl Fn(usize, usize) -> i8,
    scale: f64,
    mut noise: Option<&mut NoiseSource>,
    ops: &mut OpCounter,
) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; outputs]; steps.len()];
    for (a, row) in steps.iter().enumerate() {
        for b in 0..outputs {
            let mut acc = 0.0;
            for (c, k) in row.iter().enumerate() {
                let Some(k) = *k else { continue };
                let v = sample(lut, k, &mut noise, ops);
                if sign(b, c) > 0 {
                    acc += v;
                    ops.additions += 1;
                } else {
                    acc -= v;
                    ops.subtractions += 1;
                }
            }
            out[a][b] = scale * acc;
            ops.scale_ops += 1;
        }
    }
    out
}

/// `out[a][b] = sum_c lut[steps[a][c]] * value(b, c)` for multi-bit operands.
fn dense_kernel(
    steps: &[Vec<Option<usize>>],
    lut: &[f64],
    outputs: usize,
    value: impl Fn(usize, usize) -> f64,
    mut noise: Option<&mut NoiseSource>,
    ops: &mut OpCounter,
) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; outputs]; steps.len()];
    for (a, row) in steps.iter().enumerate() {
        for b in 0..outputs {
            let mut acc = 0.0;
            for (c, k) in row.iter().enumerate() {
                let Some(k) = *k else { continue };
                acc += sample(lut, k, &mut noise, ops) * value(b, c);
                ops.multiplications += 1;
                ops.additions += 1;
            }
            out[a][b] = acc;
        }
    }
    out
}

/// Scores `Q K^T` from query spikes and binary keys.
///
/// `q_steps` is `[S1][d]`, `kb` is `[S2][d]`, and the query quantizer has
/// scale `alpha_q`.
pub fn spiking_score(
    q_steps: &[Vec<Option<usize>>],
    alpha_q: f64,
    kb: &BinaryMatrix,
    sampler: &Sampler,
    ops: &mut OpCounter,
) -> Result<Vec<Vec<f64>>> {
    if let Some(r) = q_steps.iter().find(|r| r.len() != kb.cols()) {
        return Err(Error::Shape(format!(
            "query rows have {} channels, keys have {}",
            r.len(),
            kb.cols()
        )));
    }
    if q_steps.iter().flatten().flatten().any(|&k| k >= sampler.window()) {
        return Err(Error::Protocol("query spike outside the window".into()));
    }
    let lut = sampler.lut(alpha_q);
    Ok(binary_kernel(q_steps, &lut, kb.rows(), |b, c| kb.sign(b, c), kb.scale, None, ops))
}

/// Intermediate tensors of one spiking attention pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRun {
    pub q_codes: Vec<Vec<u32>>,
    pub k_codes: Vec<Vec<u32>>,
    pub v_codes: Vec<Vec<u32>>,
    pub k: KvTensor,
    pub v: KvTensor,
    /// Raw scores `[h][S][S]` before `1/sqrt(d_k)`.
    pub scores: Vec<Vec<Vec<f64>>>,
    pub probs: Vec<Vec<Vec<f64>>>,
    pub prob_codes: Vec<Vec<Vec<u32>>>,
    pub mixed: Vec<Vec<f64>>,
    pub mixed_codes: Vec<Vec<u32>>,
    pub out_membranes: Vec<Vec<f64>>,
    pub out_codes: Vec<Vec<u32>>,
    pub ops: OpCounter,
}

fn bits_of(window: usize) -> u32 {
    (window + 1).trailing_zeros()
}

fn kv_tensor(kv_bits: u32, membranes: &[Vec<f64>], codes: &[Vec<u32>], alpha: f64, bits: u32) -> Result<KvTensor> {
    if kv_bits == 1 {
        Ok(KvTensor::Binary(binarize_activations(&Matrix::from_rows(membranes.to_vec())?)?))
    } else {
        Ok(KvTensor::Codes {
            codes: codes.to_vec(),
            quant: ActQuantizer::new(alpha, bits)?,
        })
    }
}

/// `out[a][b] = sum_c steps[a][c] (x) kv(b, c)` through the matching kernel.
#[allow(clippy::too_many_arguments)]
fn kv_product(
    steps: &[Vec<Option<usize>>],
    lut: &[f64],
    outputs: usize,
    kv: &KvTensor,
    index: impl Fn(usize, usize) -> (usize, usize),
    noise: Option<&mut NoiseSource>,
    ops: &mut OpCounter,
) -> Vec<Vec<f64>> {
    match kv {
        KvTensor::Binary(b) => binary_kernel(
            steps,
            lut,
            outputs,
            |o, c| {
                let (r, col) = index(o, c);
                b.sign(r, col)
            },
            b.scale,
            noise,
            ops,
        ),
        KvTensor::Codes { .. } => dense_kernel(
            steps,
            lut,
            outputs,
            |o, c| {
                let (r, col) = index(o, c);
                kv.value(r, col)
            },
            noise,
            ops,
        ),
    }
}

/// Full spiking attention block over a token sequence.
pub fn run_attention_block(
    block: &OttersAttention,
    x: &[Vec<u32>],
    window: usize,
    sampler: &Sampler,
    mut noise: Option<&mut NoiseSource>,
) -> Result<AttentionRun> {
    let seq = x.len();
    if seq == 0 {
        return Err(Error::Shape("attention needs at least one token".into()));
    }
    let bits = bits_of(window);
    let q = run_linear_block(&block.wq, x, window, sampler, noise.as_deref_mut())?;
    let k = run_linear_block(&block.wk, x, window, sampler, noise.as_deref_mut())?;
    let v = run_linear_block(&block.wv, x, window, sampler, noise.as_deref_mut())?;
    let kt = kv_tensor(block.kv_bits, &k.membranes, &k.codes, block.wk.alpha_out, bits)?;
    let vt = kv_tensor(block.kv_bits, &v.membranes, &v.codes, block.wv.alpha_out, bits)?;

    let pq = ActQuantizer::unit(bits)?;
    let lut_q = sampler.lut(block.wq.alpha_out);
    let lut_p = sampler.lut(pq.alpha);
    let inv_sqrt = 1.0 / (block.d_k as f64).sqrt();
    let q_steps = spike_steps(&q.codes, window);
    let mut ops = OpCounter::default();
    let mut scores = Vec::with_capacity(block.heads);
    let mut probs = Vec::with_capacity(block.heads);
    let mut prob_codes = Vec::with_capacity(block.heads);
    let mut mixed = vec![vec![0.0; block.model_dim()]; seq];
    for h in 0..block.heads {
        let base = h * block.d_k;
        let qh: Vec<Vec<Option<usize>>> = q_steps.iter().map(|r| r[base..base + block.d_k].to_vec()).collect();
        let sc = kv_product(&qh, &lut_q, seq, &kt, |s2, d| (s2, base + d), noise.as_deref_mut(), &mut ops);
        let pr: Vec<Vec<f64>> = sc
            .iter()
            .map(|row| softmax(&row.iter().map(|v| v * inv_sqrt).collect::<Vec<_>>()))
            .collect();
        let pc: Vec<Vec<u32>> = pr.iter().map(|r| r.iter().map(|&p| pq.code(p)).collect()).collect();
        let p_steps = spike_steps(&pc, window);
        let mh = kv_product(&p_steps, &lut_p, block.d_k, &vt, |d, s2| (s2, base + d), noise.as_deref_mut(), &mut ops);
        for (s, row) in mh.into_iter().enumerate() {
            mixed[s][base..base + block.d_k].copy_from_slice(&row);
        }
        scores.push(sc);
        probs.push(pr);
        prob_codes.push(pc);
    }
    let mq = ActQuantizer::new(block.wo.alpha_in, bits)?;
    let mixed_codes: Vec<Vec<u32>> = mixed.iter().map(|r| r.iter().map(|&a| mq.code(a)).collect()).collect();
    let o = run_linear_block(&block.wo, &mixed_codes, window, sampler, noise)?;
    Ok(AttentionRun {
        q_codes: q.codes,
        k_codes: k.codes,
        v_codes: v.codes,
        k: kt,
        v: vt,
        scores,
        probs,
        prob_codes,
        mixed,
        mixed_codes,
        out_membranes: o.membranes,
        out_codes: o.codes,
        ops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decay::{build_spike_time_table, DecayModel};
    use crate::engine::SamplingMode;

    fn ideal() -> Sampler {
        let table = build_spike_time_table(&DecayModel::DEVICE, 15).unwrap();
        Sampler::from_parts(&table, &DecayModel::DEVICE, SamplingMode::Ideal)
    }

    fn binary(rows: Vec<Vec<f64>>) -> BinaryMatrix {
        binarize_activations(&Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn all_positive_keys_sum_query_rows() {
        let kb = binary(vec![vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 1.0]]);
        assert_eq!(kb.scale, 1.0);
        let codes = vec![vec![3, 0, 7], vec![15, 1, 2]];
        let mut ops = OpCounter::default();
        let s = spiking_score(&spike_steps(&codes, 15), 0.1, &kb, &ideal(), &mut ops).unwrap();
        for (r, row) in codes.iter().enumerate() {
            let want: f64 = row.iter().map(|&q| 0.1 * q as f64).sum();
            for &v in &s[r] {
                assert!((v - want).abs() < 1e-12);
            }
        }
        assert_eq!(ops.multiplications, 0);
    }

    #[test]
    fn two_by_two_matches_dense() {
        let kb = binary(vec![vec![0.4, -1.2], vec![-0.3, 0.9]]);
        let codes = vec![vec![5, 9], vec![0, 12]];
        let mut ops = OpCounter::default();
        let s = spiking_score(&spike_steps(&codes, 15), 0.05, &kb, &ideal(), &mut ops).unwrap();
        let kd = kb.reconstruct();
        for s1 in 0..2 {
            for s2 in 0..2 {
                let want: f64 = (0..2).map(|d| 0.05 * codes[s1][d] as f64 * kd.get(s2, d)).sum();
                assert!((s[s1][s2] - want).abs() <= 1e-12);
            }
        }
        assert_eq!(ops.multiplications, 0);
        assert_eq!(ops.scale_ops, 4);
    }

    #[test]
    fn silent_query_row_scores_zero() {
        let kb = binary(vec![vec![0.4, -1.2], vec![-0.3, 0.9]]);
        let mut ops = OpCounter::default();
        let s = spiking_score(&spike_steps(&[vec![0, 0]], 15), 0.05, &kb, &ideal(), &mut ops).unwrap();
        assert_eq!(s, vec![vec![0.0, 0.0]]);
        assert_eq!(ops.lookups, 0);
    }

    #[test]
    fn uniform_probabilities_average_values() {
        // Three tokens with equal scores: each probability is 1/3, code 5 of 15.
        let vb = binary(vec![vec![0.5, -2.0], vec![-1.0, 1.0], vec![1.5, 2.0]]);
        let pq = ActQuantizer::unit(4).unwrap();
        let pc = vec![vec![pq.code(1.0 / 3.0); 3]];
        assert_eq!(pc[0][0], 5);
        let lut = ideal().lut(pq.alpha);
        let mut ops = OpCounter::default();
        let out = kv_product(&spike_steps(&pc, 15), &lut, 2, &KvTensor::Binary(vb.clone()), |d, s2| (s2, d), None, &mut ops);
        let vd = vb.reconstruct();
        for d in 0..2 {
            let mean = (0..3).map(|s| vd.get(s, d)).sum::<f64>() / 3.0;
            // Probability 5/15 equals 1/3, so the mix is the mean of the rows.
            assert!((out[0][d] - mean).abs() < 1e-12, "{} vs {mean}", out[0][d]);
        }
        assert_eq!(ops.multiplications, 0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let kb = binary(vec![vec![1.0, 1.0]]);
        let mut ops = OpCounter::default();
        assert!(spiking_score(&[vec![Some(1)]], 0.1, &kb, &ideal(), &mut ops).is_err());
    }
}
