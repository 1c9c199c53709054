#!/usr/bin/env python3
"""Regenerates toy-fixture weights from a seed without touching the C++ code.

Mirrors the documented SplitMix64 draw order and prints the requested row of
a tensor as float32 hex bit patterns and decimal values.
"""
import argparse
import math
import struct

MASK = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed):
        self.state = seed & MASK

    def next(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        return z ^ (z >> 31)

    def unit(self):
        return (self.next() >> 40) * (1.0 / 16777216.0)


def f32(x):
    return struct.unpack("<f", struct.pack("<f", x))[0]


def generate(seed, n_layers=4, n_heads=2, d_model=16, vocab=64):
    d_ff = 4 * d_model
    rng = SplitMix64(seed)

    def matrix(rows, cols, scale):
        return [f32((2.0 * rng.unit() - 1.0) * scale) for _ in range(rows * cols)]

    def norm(n):
        return [f32(1.0 + 0.1 * (2.0 * rng.unit() - 1.0)) for _ in range(n)]

    sd = 1.0 / math.sqrt(d_model)
    out = {"embed": matrix(vocab, d_model, 1.0)}
    for l in range(n_layers):
        out[f"layers.{l}.attn_norm"] = norm(d_model)
        out[f"layers.{l}.wq"] = matrix(d_model, d_model, sd)
        out[f"layers.{l}.wk"] = matrix(d_model, d_model, sd)
        out[f"layers.{l}.wv"] = matrix(d_model, d_model, sd)
        out[f"layers.{l}.wo"] = matrix(d_model, d_model, 1.0 / math.sqrt(d_model))
        out[f"layers.{l}.mlp_norm"] = norm(d_model)
        out[f"layers.{l}.w_gate"] = matrix(d_ff, d_model, sd)
        out[f"layers.{l}.w_up"] = matrix(d_ff, d_model, sd)
        out[f"layers.{l}.w_down"] = matrix(d_model, d_ff, 1.0 / math.sqrt(d_ff))
    out["final_norm"] = norm(d_model)
    out["unembed"] = matrix(vocab, d_model, 1.0)
    return out


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--tensor", default="unembed")
    ap.add_argument("--row", type=int, default=0)
    args = ap.parse_args()
    w = generate(args.seed)
    row = w[args.tensor][args.row * 16:(args.row + 1) * 16]
    print(", ".join("0x%08x" % struct.unpack("<I", struct.pack("<f", v))[0] for v in row))
    print(", ".join(repr(v) for v in row))
