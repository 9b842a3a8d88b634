#!/usr/bin/env python3
"""Generate the deterministic toy fixtures under fixtures/toy.

The toy world is a 2-layer GPT-2 (d_model 32, 4 heads) with hand-planted
structure and a 321-token byte-level BPE vocabulary:

  * every "important" token gets its own orthonormal embedding direction,
    orthogonal to the all-ones vector (which layer norm removes);
  * all other tokens share a negative "background" direction, which the
    final layer-norm bias turns into a low prior;
  * one layer-0 MLP unit per important token reads that token's direction and
    writes the residual that makes the final layer norm emit a planted
    next-token logit vector (a bigram model); a spare "pad" direction fixes
    the residual norm so the planted logits are exact;
  * layer-0 attention has near-uniform weights, near-zero values and a
    scaled-identity output projection, so unsteered context barely matters but a
    change of cached values moves the residual directly; the projection is
    stronger along the relation-benchmark word directions;
  * layer 1 is small random noise.

Scene "images" are text files; the toy scorer embeds their bytes.

Usage: make_toy_fixtures.py [--out fixtures/toy]
"""

import argparse
import json
import math
import struct
from pathlib import Path

import numpy as np

D_MODEL = 32
N_HEADS = 4
N_LAYERS = 2
MAX_POS = 64
SEED = 20240601


def bytes_to_unicode():
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return bs, [chr(c) for c in cs]


WORDS = [
    "Image", " of", " a", " the", " and", " on",
    " man", " dog", " cat", " zeb",
    " cuba", " peru", " chad", " mali", " togo", " fiji",
    " oslo", " lima", " rome", " ibm", " sony",
]
# "ra" completes " zeb" + "ra" = " zebra"; it is deliberately not a prefix chain.
# "  " (double space) is the GPT-2-style whitespace-run merge.
EXTRA_MERGES = [("r", "a"), (" ", " ")]

CONTENT = ["man", "dog", "cat", "zeb"]
VR_WORDS = ["cuba", "peru", "chad", "mali", "togo", "fiji", "oslo", "lima", "rome", "ibm", "sony"]


def build_vocab():
    order, chars = bytes_to_unicode()
    tokens = [bytes([b]) for b in order]
    merges = []
    have = set(tokens)

    def add(a, b):
        t = a + b
        if t not in have:
            merges.append((a, b))
            tokens.append(t)
            have.add(t)

    for a, b in EXTRA_MERGES:
        add(a.encode(), b.encode())
    for w in WORDS:
        wb = w.encode()
        cur = wb[:1]
        for i in range(1, len(wb)):
            add(cur, wb[i:i + 1])
            cur = wb[:i + 1]
    tokens.append(b"<|endoftext|>")
    return tokens, merges, dict(zip(order, chars))


def mapped(tok, table):
    return "".join(table[b] for b in tok)


def write_vocab(out, tokens, merges, table):
    enc = {}
    for i, t in enumerate(tokens):
        key = t.decode() if t == b"<|endoftext|>" else mapped(t, table)
        enc[key] = i
    (out / "vocab.json").write_text(json.dumps(enc, ensure_ascii=False))
    lines = ["#version: 0.2"] + [f"{mapped(a, table)} {mapped(b, table)}" for a, b in merges]
    (out / "merges.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def fnv1a(data):
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def write_model(path, config, tensors):
    payload = bytearray()
    meta = {}
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        meta[name] = {"dtype": "F32", "shape": list(arr.shape), "offset": len(payload)}
        payload += arr.tobytes()
    header = {
        "format": "cachesteer-tensors",
        "version": 1,
        "config": config,
        "tensors": meta,
        "checksum": f"{fnv1a(payload):016x}",
    }
    hb = json.dumps(header, separators=(",", ":")).encode()
    path.write_bytes(struct.pack("<Q", len(hb)) + hb + bytes(payload))


def gelu(x):
    return 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def planted_logits(p):
    """Next-token logits (relative to 0 for unlisted important tokens)."""
    content = {f" {w}": p.content_logit[w] for w in CONTENT}
    content.update({f" {w}": p.vr_logit for w in VR_WORDS})
    after_word = {"<|endoftext|>": p.eot_after_word, " and": p.and_after_word, " on": p.on_after_word}
    after_word.update({f" {w}": p.word_after_word for w in CONTENT + VR_WORDS})
    table = {
        "Image": {" of": 8.0},
        " of": {" a": 8.0, " the": 5.0},
        " a": content,
        " the": content,
        " and": {" a": 5.0, " the": 3.5},
        " on": {" a": 5.0, " the": 4.0},
        " zeb": {"ra": p.ra_after_zeb},
        "ra": after_word,
        "<|endoftext|>": {"Image": 6.0},
    }
    for w in CONTENT + VR_WORDS:
        if w != "zeb":
            table[f" {w}"] = after_word
    return table


def build_model(tokens, p):
    rng = np.random.default_rng(SEED)
    d = D_MODEL
    basis, _ = np.linalg.qr(np.column_stack([np.ones(d), rng.standard_normal((d, d - 1))]))
    basis = basis[:, 1:] * np.sign(basis[0, 1:])  # orthonormal, orthogonal to ones
    important = ["Image", " of", " a", " the", " and", " on"] + [f" {w}" for w in CONTENT + VR_WORDS] + ["ra", "<|endoftext|>"]
    tok_id = {t.decode("latin-1"): i for i, t in enumerate(tokens)}
    u = basis[:, 0]
    pad = basis[:, 1]
    dirs = {name: basis[:, 2 + k] for k, name in enumerate(important)}
    noise = basis[:, 2 + len(important):]
    assert noise.shape[1] >= 3

    V = len(tokens)
    wte = np.zeros((V, d))
    for i, t in enumerate(tokens):
        name = t.decode("latin-1")
        if name in dirs and tok_id.get(name) == i:
            wte[i] = dirs[name]
        else:
            wte[i] = -p.bg_in * u + p.bg_noise * noise @ rng.standard_normal(noise.shape[1])
    wpe = p.pos_noise * (rng.standard_normal((MAX_POS, noise.shape[1])) @ noise.T)

    G = p.gain
    lnf_g = np.full(d, G / math.sqrt(d))
    lnf_b = p.bg_bias * u  # background wte has -bg_in along u

    t = {}
    ones, zeros = np.ones(d), np.zeros(d)

    # layer 0: uniform-ish attention, tiny values, scaled-identity output projection
    wq = p.qk_scale * rng.standard_normal((d, d)) / math.sqrt(d)
    wk = p.qk_scale * rng.standard_normal((d, d)) / math.sqrt(d)
    wv = p.v_scale * rng.standard_normal((d, d)) / math.sqrt(d)
    t["h.0.attn.c_attn.weight"] = np.concatenate([wq, wk, wv], axis=1)
    t["h.0.attn.c_attn.bias"] = np.zeros(3 * d)
    # steering moves the residual through this projection; it is stronger along
    # the relation-benchmark word directions than elsewhere
    vr_dirs = np.column_stack([dirs[f" {w}"] for w in VR_WORDS])
    t["h.0.attn.c_proj.weight"] = p.attn_gain * np.eye(d) + (p.attn_gain_vr - p.attn_gain) * vr_dirs @ vr_dirs.T
    t["h.0.attn.c_proj.bias"] = zeros
    t["h.0.ln_1.weight"], t["h.0.ln_1.bias"] = ones, zeros
    t["h.0.ln_2.weight"], t["h.0.ln_2.bias"] = ones, zeros

    # layer-0 MLP: planted bigrams. Each source token drives a pair of units
    # whose difference gelu(s*r - s*lo) - gelu(s*r - s*hi) is a ramp that
    # saturates at s*(hi - lo) once the token's layer-norm reading r exceeds
    # hi, so the planted output does not depend on what attention adds.
    ff = 4 * d
    fc_w = np.zeros((d, ff))
    fc_b = np.zeros(ff)
    mp_w = np.zeros((ff, d))
    s, lo, hi = p.unit_slope, p.unit_lo, p.unit_hi
    sat = s * (hi - lo)
    unit = 0

    def plant(read_dir, out):
        nonlocal unit
        fc_w[:, unit], fc_b[unit] = s * read_dir, -s * lo
        fc_w[:, unit + 1], fc_b[unit + 1] = s * read_dir, -s * hi
        mp_w[unit], mp_w[unit + 1] = out / sat, -out / sat
        unit += 2

    def residual(L):
        norm = np.linalg.norm(L)
        assert norm < G, (norm, G)
        return L / G + math.sqrt(1 - (norm / G) ** 2) * pad

    for src, nxt in planted_logits(p).items():
        L = np.zeros(d)
        for name, logit in nxt.items():
            L += logit * dirs[name]
        plant(dirs[src], residual(L) - dirs[src])
    # background tokens: cancel the -u input and predict end-of-text
    plant(-u / p.bg_in, residual(p.bg_next_eot * dirs["<|endoftext|>"]) + p.bg_in * u)
    assert unit <= ff
    t["h.0.mlp.c_fc.weight"], t["h.0.mlp.c_fc.bias"] = fc_w, fc_b
    t["h.0.mlp.c_proj.weight"], t["h.0.mlp.c_proj.bias"] = mp_w, zeros

    # layer 1: small random block
    s = p.l1_scale / math.sqrt(d)
    t["h.1.ln_1.weight"], t["h.1.ln_1.bias"] = ones, zeros
    t["h.1.ln_2.weight"], t["h.1.ln_2.bias"] = ones, zeros
    t["h.1.attn.c_attn.weight"] = s * rng.standard_normal((d, 3 * d))
    t["h.1.attn.c_attn.bias"] = 0.1 * s * rng.standard_normal(3 * d)
    t["h.1.attn.c_proj.weight"] = p.l1_proj * rng.standard_normal((d, d)) / math.sqrt(d)
    t["h.1.attn.c_proj.bias"] = zeros
    t["h.1.mlp.c_fc.weight"] = s * rng.standard_normal((d, ff))
    t["h.1.mlp.c_fc.bias"] = 0.1 * s * rng.standard_normal(ff)
    t["h.1.mlp.c_proj.weight"] = p.l1_proj * rng.standard_normal((ff, d)) / math.sqrt(ff)
    t["h.1.mlp.c_proj.bias"] = zeros

    t["wte"], t["wpe"] = wte, wpe
    t["ln_f.weight"], t["ln_f.bias"] = lnf_g, lnf_b
    config = {"n_layers": N_LAYERS, "n_heads": N_HEADS, "d_model": d, "vocab_size": V, "max_positions": MAX_POS}
    return config, t


# A toy image is described by its ideal caption, prompt included, so the
# finished caption is the best match and repeating a word is not rewarded.
SCENES = {
    "cat": "Image of a cat",
    "zebra": "Image of a zebra",
    "dog": "Image of a dog",
}

# (template, minuend tag, subtrahend/query tag, items). Both tags have four
# letters so "{src} {anchor}" and "{src} {tag}" have equal norms under the toy
# scorer and the source word cancels in minuend - subtrahend.
VR_PAIRS = [
    ("building->country", "land", "hall", ["cuba", "peru"]),
    ("country->capital", "city", "land", ["oslo", "lima"]),
    ("food->country", "land", "dish", ["chad", "mali"]),
    ("leader->country", "land", "king", ["togo", "fiji"]),
    ("ceo->company", "firm", "boss", ["ibm", "sony"]),
]


def write_scenes(out):
    sd = out / "scenes"
    sd.mkdir(parents=True, exist_ok=True)
    for name, text in SCENES.items():
        (sd / f"{name}.img").write_text(text)


def write_vr(out):
    vd = out / "vr"
    (vd / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for template, anchor, tag, (a, b) in VR_PAIRS:
        for w in (a, b):
            (vd / "images" / f"{w}_{anchor}.img").write_text(f"{w} {anchor}")
            (vd / "images" / f"{w}_{tag}.img").write_text(f"{w} {tag}")
        # the (anchor - tag) direction of one item applied to the other item's tag image
        for src, dst in ((a, b), (b, a)):
            rows.append({
                "template": template,
                "minuend": f"img(images/{src}_{anchor}.img)",
                "subtrahend": f"img(images/{src}_{tag}.img)",
                "query": f"img(images/{dst}_{tag}.img)",
                "ground_truth": dst,
            })
    (vd / "manifest.json").write_text(json.dumps(rows, indent=2) + "\n")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parent.parent / "fixtures" / "toy")
    ap.add_argument("--gain", type=float, default=20.0)
    ap.add_argument("--attn-gain", type=float, default=0.18)
    ap.add_argument("--attn-gain-vr", type=float, default=6.0)
    ap.add_argument("--v-scale", type=float, default=0.003)
    ap.add_argument("--qk-scale", type=float, default=0.3)
    ap.add_argument("--unit-slope", type=float, default=4.0)
    ap.add_argument("--unit-lo", type=float, default=2.0)
    ap.add_argument("--unit-hi", type=float, default=3.0)
    ap.add_argument("--bg-in", type=float, default=1.0)
    ap.add_argument("--bg-noise", type=float, default=0.2)
    ap.add_argument("--bg-bias", type=float, default=4.0)
    ap.add_argument("--bg-next-eot", type=float, default=4.0)
    ap.add_argument("--pos-noise", type=float, default=0.05)
    ap.add_argument("--l1-scale", type=float, default=0.3)
    ap.add_argument("--l1-proj", type=float, default=0.01)
    ap.add_argument("--man", type=float, default=5.0)
    ap.add_argument("--dog", type=float, default=4.3)
    ap.add_argument("--cat", type=float, default=3.8)
    ap.add_argument("--zeb", type=float, default=2.0)
    ap.add_argument("--vr-logit", type=float, default=3.5)
    ap.add_argument("--ra-after-zeb", type=float, default=9.0)
    ap.add_argument("--eot-after-word", type=float, default=5.0)
    ap.add_argument("--and-after-word", type=float, default=2.5)
    ap.add_argument("--on-after-word", type=float, default=2.5)
    ap.add_argument("--word-after-word", type=float, default=-3.0)
    p = ap.parse_args()
    p.content_logit = {"man": p.man, "dog": p.dog, "cat": p.cat, "zeb": p.zeb}

    out = p.out
    out.mkdir(parents=True, exist_ok=True)
    tokens, merges, table = build_vocab()
    write_vocab(out, tokens, merges, table)
    config, tensors = build_model(tokens, p)
    write_model(out / "model.bin", config, tensors)
    write_scenes(out)
    write_vr(out)
    print(f"wrote {out}: vocab {len(tokens)}, merges {len(merges)}")


if __name__ == "__main__":
    main()
