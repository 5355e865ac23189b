#!/usr/bin/env python3
"""Independent transcription of the energy formulas, used to generate
crates/core/tests/fixtures/energy_oracle.json.

Run from the repository root: python3 tools/energy_oracle.py
"""
import json
import math
import random

DEFAULTS = {
    "e_mac_fp32": 4.6, "e_clamp": 0.9, "e_mac_4_4_16": 0.0848, "e_mac_1_4_16": 0.0663,
    "e_acc_4_16_16": 0.0502, "e_acc_2_16_16": 0.0477, "e_acc_1_16_16": 0.0429,
    "e_acc_4_4_4": 0.0163, "e_cmp": 0.0502, "e_sub": 0.0502, "e_analog_read": 0.0246,
    "e_leakage_per_cycle": 0.002, "e_weight_access_per_bit": 0.0985, "e_move_per_bit": 0.18,
    "reuse_factor": 1.0, "threshold_bits": 16.0, "binarykv_bits": 1.0, "fp32_bits": 32.0,
    "qbert_weight_bits": 1.0, "snn_weight_bits": 1.0, "snn_kv_bits": 4.0, "ttfs_weight_bits": 1.0,
}


def formulas(w, c):
    B, S, Ci, Co, h, dk, T, sr = (w[k] for k in ("B", "S", "C_i", "C_o", "h", "d_k", "T", "s_r"))
    g = c["reuse_factor"]
    wb = c["e_weight_access_per_bit"]
    mv = c["e_move_per_bit"]
    lk = c["e_leakage_per_cycle"]
    thr = c["threshold_bits"] * wb
    kv = c["binarykv_bits"] * wb
    fc = B * S * Co
    sc = B * h * S * S
    q = math.log2(T + 1)
    pj = {
        "otters_fc": fc * (Ci * T * (sr * (c["e_acc_4_16_16"] + c["e_analog_read"] + mv) + lk)
                           + T * (c["e_cmp"] + thr) + kv),
        "otters_score": sc * (dk * T * (sr * (c["e_acc_4_16_16"] + c["e_analog_read"] + mv + kv) + lk)
                              + T * (c["e_cmp"] + thr)),
        "fp32_fc": fc * (g * Ci * (c["e_mac_fp32"] + c["fp32_bits"] * wb + c["fp32_bits"] * mv)
                         + Ci * lk + 2 * c["e_clamp"] + c["fp32_bits"] * wb),
        "fp32_score": sc * (g * dk * (c["fp32_bits"] * wb + c["e_mac_fp32"] + c["fp32_bits"] * mv)
                            + dk * lk + 2 * c["e_clamp"]),
        "qbert_fc": fc * (g * Ci * (c["e_mac_1_4_16"] + c["qbert_weight_bits"] * wb + q * mv)
                          + Ci * lk + 2 * c["e_clamp"] + kv),
        "qbert_score": sc * (g * dk * (kv + c["e_mac_1_4_16"] + q * mv) + dk * lk + 2 * c["e_clamp"]),
        "snn_fc": fc * (Ci * sr * T * (c["e_acc_1_16_16"] + c["snn_weight_bits"] * wb + mv)
                        + Ci * T * lk + T * (c["e_cmp"] + sr * c["e_sub"]) + kv),
        "snn_score": sc * (dk * sr * T * (c["snn_kv_bits"] * wb + c["e_acc_1_16_16"] + mv)
                           + dk * T * lk + T * (c["e_cmp"] + sr * c["e_sub"])),
        "ttfs_fc": fc * (Ci * T * (sr * (c["e_acc_4_4_4"] + c["e_mac_1_4_16"] + c["ttfs_weight_bits"] * wb + mv) + lk)
                         + T * (c["e_cmp"] + thr) + kv),
        "ttfs_score": sc * (dk * T * (sr * (c["e_acc_4_4_4"] + c["e_mac_1_4_16"] + kv + mv) + lk)
                            + T * (c["e_cmp"] + thr)),
    }
    return {k: v * 1e-9 for k, v in pj.items()}


def main():
    rng = random.Random(20240611)
    cases = []
    for i in range(20):
        T = rng.choice([1, 3, 7, 15])
        n = int(math.log2(T + 1))
        w = {
            "B": rng.randint(1, 4), "S": rng.randint(1, 5), "C_i": rng.randint(1, 6),
            "C_o": rng.randint(1, 6), "h": rng.randint(1, 3), "d_k": rng.randint(1, 4),
            "T": T, "n": n, "s_r": round(rng.uniform(0, 1.0 / T), 6),
        }
        c = dict(DEFAULTS) if i < 5 else {k: round(v * rng.uniform(0.25, 4.0), 6) for k, v in DEFAULTS.items()}
        cases.append({"workload": w, "costs": c, "expected_mj": formulas(w, c)})
    with open("crates/core/tests/fixtures/energy_oracle.json", "w") as f:
        json.dump({"cases": cases}, f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    main()
