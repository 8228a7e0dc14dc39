#!/usr/bin/env python3
"""Regenerates the committed test fixtures under tests/data/.

Outputs:
  - a small byte-level BPE vocabulary (vocab.json / merges.txt) covering the
    task pools, plus reference encodings (bpe_cases.json) computed with the
    `tokenizers` library;
  - a seeded 2-layer GPT-2 checkpoint (toy/) with reference logits computed
    by `transformers` (toy/logits_cases.json);
  - a seeded 4-layer attention-only checkpoint (attn4/);
  - a synthetic paired-facts dataset sized for the fixture vocabulary.

The outputs are committed; rerunning this script must be byte-stable.
"""

import json
import os
import sys

import numpy as np
import torch
from safetensors.torch import save_file as save_torch
from safetensors.numpy import save_file as save_numpy
from tokenizers import Tokenizer
from tokenizers.models import BPE
from tokenizers.pre_tokenizers import ByteLevel
from tokenizers.decoders import ByteLevel as ByteLevelDecoder
from transformers import GPT2Config, GPT2LMHeadModel

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DATA = os.path.join(ROOT, "data")
OUT = os.path.join(ROOT, "tests", "data")


def bytes_to_unicode():
    bs = list(range(33, 127)) + list(range(161, 173)) + list(range(174, 256))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, [chr(c) for c in cs]))


BYTE_ENC = bytes_to_unicode()


def load_pool(name):
    with open(os.path.join(DATA, name)) as f:
        return [line.strip() for line in f if line.strip()]


class VocabBuilder:
    def __init__(self):
        self.vocab = {}
        for b in range(256):
            self.vocab[BYTE_ENC[b]] = len(self.vocab)
        self.merges = []

    def add(self, raw):
        syms = [BYTE_ENC[b] for b in raw.encode("utf-8")]
        cur = syms[0]
        for nxt in syms[1:]:
            merged = cur + nxt
            if merged not in self.vocab:
                self.merges.append((cur, nxt))
                self.vocab[merged] = len(self.vocab)
            cur = merged


def build_vocab():
    names = load_pool("names.txt")
    nouns = load_pool("nouns.txt")
    words = load_pool("words.txt")

    landmarks_a = ["Eiffel", "Grand", "Crystal", "Golden", "Marble", "Silver", "Ivory",
                   "Emerald", "Granite", "Amber", "Coral", "Copper", "Sacred", "Royal", "Ancient"]
    landmarks_b = ["Tower", "Canyon", "Palace", "Gate", "Arch", "Lake", "Temple", "Bridge",
                   "Castle", "Fort", "Garden", "Harbor", "Square", "Cathedral", "Monument"]
    cities = ["Paris", "Kyoto", "Rome", "Cairo", "Oslo", "Madrid", "Berlin", "Vienna", "Prague",
              "Athens", "Dublin", "Lisbon", "Moscow", "Tokyo", "Seoul", "Delhi", "Lima",
              "Havana", "Geneva", "Zurich"]

    b = VocabBuilder()
    # Century tokens first so " 17xx" builds " 17" before bare "17" can win.
    for xx in range(10, 20):
        b.add(" " + str(xx))
    for yy in range(100):
        b.add(f"{yy:02d}")
    for pool in (names, nouns, words, landmarks_a, landmarks_b, cities):
        for entry in pool:
            b.add(" " + entry)

    meta = {
        "landmarks_a": landmarks_a,
        "landmarks_b": landmarks_b,
        "cities": cities,
    }
    return b, meta


def make_tokenizer(builder):
    tok = Tokenizer(BPE(builder.vocab, builder.merges))
    tok.pre_tokenizer = ByteLevel(add_prefix_space=False, use_regex=True)
    tok.decoder = ByteLevelDecoder()
    return tok


def check_single_tokens(tok, builder):
    names = load_pool("names.txt") + load_pool("nouns.txt") + load_pool("words.txt")
    for entry in names:
        ids = tok.encode(" " + entry).ids
        assert len(ids) == 1, f"' {entry}' -> {ids}"
    for yy in range(100):
        ids = tok.encode(f"{yy:02d}").ids
        # bare two-digit check only holds inside number pretokens; encode the
        # continuation context instead
        ids = tok.encode(f" 17{yy:02d}").ids
        assert len(ids) == 2, f"' 17{yy:02d}' -> {ids}"


BPE_CASES = [
    "",
    "hello world",
    "The Eiffel Tower is in",
    "When Mary and John went to the store, John gave a drink to Mary",
    "I've said he's 1970's best, don't you'll?",
    "café naïve ☕\U0001F680",
    "a  b\n\tc  ",
    "The war lasted from the year 1745 to the year 17",
    "12+34=46\n25+17=42\n19+23=",
    'def load(self, files):\n    """doc\n\n    :param',
    "   leading spaces",
    "trailing spaces   ",
    "ΑΒΓ αβγ Ω",
    "日本語テスト",
    "'s 't 're 'll",
    "007 42 1999",
    " Mary",
    "x",
]


def dump_bpe_cases(tok):
    cases = []
    for text in BPE_CASES:
        enc = tok.encode(text)
        cases.append({"text": text, "ids": enc.ids})
    with open(os.path.join(OUT, "bpe_cases.json"), "w") as f:
        json.dump(cases, f, indent=1, ensure_ascii=False)


def write_vocab_files(builder):
    with open(os.path.join(OUT, "vocab.json"), "w") as f:
        json.dump(builder.vocab, f, ensure_ascii=False)
    with open(os.path.join(OUT, "merges.txt"), "w") as f:
        f.write("#version: 0.2\n")
        for left, right in builder.merges:
            f.write(f"{left} {right}\n")


def make_gpt2(vocab_size, n_layer, n_head, n_embd, n_inner, seed):
    cfg = GPT2Config(
        vocab_size=vocab_size,
        n_positions=128,
        n_embd=n_embd,
        n_layer=n_layer,
        n_head=n_head,
        n_inner=n_inner,
        activation_function="gelu_new",
        resid_pdrop=0.0,
        embd_pdrop=0.0,
        attn_pdrop=0.0,
        layer_norm_epsilon=1e-5,
        bos_token_id=None,
        eos_token_id=None,
    )
    torch.manual_seed(seed)
    return GPT2LMHeadModel(cfg)


def export_checkpoint(model, out_dir, config):
    keep = {}
    for k, v in model.state_dict().items():
        k2 = k.replace("transformer.", "")
        parts = k2.split(".")
        # Drop the tied lm_head and the causal-mask buffers ("h.N.attn.bias",
        # "h.N.attn.masked_bias"), not the projection biases.
        if k2 == "lm_head.weight":
            continue
        if len(parts) >= 2 and parts[-2] == "attn" and parts[-1] in ("bias", "masked_bias"):
            continue
        keep[k2] = v.contiguous().float()
    os.makedirs(out_dir, exist_ok=True)
    save_torch(keep, os.path.join(out_dir, "model.safetensors"))
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(config, f, indent=1)


def build_toy_model(vocab_size, tok):
    model = make_gpt2(vocab_size, n_layer=2, n_head=2, n_embd=16, n_inner=64, seed=1234)
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.add_(torch.randn_like(p) * 0.02)
    model.eval()

    export_checkpoint(
        model,
        os.path.join(OUT, "toy"),
        {
            "n_layers": 2,
            "n_heads": 2,
            "d_model": 16,
            "d_mlp": 64,
            "vocab_size": vocab_size,
            "max_positions": 128,
            "attn_only": False,
            "layernorm_eps": 1e-5,
        },
    )

    case_texts = [
        "x",
        "hello world",
        "When Mary and John went to the store, John gave a drink to",
    ]
    cases = []
    for text in case_texts:
        ids = tok.encode(text).ids
        with torch.no_grad():
            logits = model(torch.tensor([ids])).logits[0].float().numpy()
        full = len(ids) <= 6
        cases.append(
            {
                "text": text,
                "ids": ids,
                "rows": "all" if full else "last",
                "logits": logits.tolist() if full else [logits[-1].tolist()],
            }
        )
    with open(os.path.join(OUT, "toy", "logits_cases.json"), "w") as f:
        json.dump(cases, f)


def build_deep_toy_model(vocab_size):
    # 12 layers at tiny width: lets sliding windows of 1/3/5/10 run with the
    # same geometry as a 12-layer model while staying desk-fast.
    model = make_gpt2(vocab_size, n_layer=12, n_head=2, n_embd=16, n_inner=32, seed=777)
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.add_(torch.randn_like(p) * 0.02)
    model.eval()
    export_checkpoint(
        model,
        os.path.join(OUT, "toy12"),
        {
            "n_layers": 12,
            "n_heads": 2,
            "d_model": 16,
            "d_mlp": 32,
            "vocab_size": vocab_size,
            "max_positions": 128,
            "attn_only": False,
            "layernorm_eps": 1e-5,
        },
    )


def build_attn_only_model(vocab_size):
    rng = np.random.default_rng(99)
    d, heads, layers, npos = 32, 4, 4, 128

    def normal(shape, scale):
        return rng.normal(0.0, scale, size=shape).astype(np.float32)

    tensors = {
        "wte.weight": normal((vocab_size, d), 0.05),
        "wpe.weight": normal((npos, d), 0.03),
        "ln_f.weight": (1.0 + normal((d,), 0.02)),
        "ln_f.bias": normal((d,), 0.02),
    }
    for l in range(layers):
        tensors[f"h.{l}.ln_1.weight"] = 1.0 + normal((d,), 0.02)
        tensors[f"h.{l}.ln_1.bias"] = normal((d,), 0.02)
        tensors[f"h.{l}.attn.c_attn.weight"] = normal((d, 3 * d), 0.06)
        tensors[f"h.{l}.attn.c_attn.bias"] = normal((3 * d,), 0.02)
        tensors[f"h.{l}.attn.c_proj.weight"] = normal((d, d), 0.06)
        tensors[f"h.{l}.attn.c_proj.bias"] = normal((d,), 0.02)

    os.makedirs(os.path.join(OUT, "attn4"), exist_ok=True)
    save_numpy(tensors, os.path.join(OUT, "attn4", "model.safetensors"))
    with open(os.path.join(OUT, "attn4", "config.json"), "w") as f:
        json.dump(
            {
                "n_layers": layers,
                "n_heads": heads,
                "d_model": d,
                "d_mlp": 0,
                "vocab_size": vocab_size,
                "max_positions": npos,
                "attn_only": True,
                "layernorm_eps": 1e-5,
            },
            f,
            indent=1,
        )


def build_paired_facts(tok, meta):
    rng = np.random.default_rng(7)
    a_pool, b_pool, cities = meta["landmarks_a"], meta["landmarks_b"], meta["cities"]
    records = []
    used = set()
    while len(records) < 60:
        a1, a2 = rng.choice(a_pool), rng.choice(b_pool)
        b1, b2 = rng.choice(a_pool), rng.choice(b_pool)
        c1, c2 = rng.choice(cities, size=2, replace=False)
        s1 = f"The {a1} {a2} is in the city of"
        s2 = f"The {b1} {b2} is in the city of"
        if s1 == s2 or (s1, s2) in used:
            continue
        used.add((s1, s2))
        l1, l2 = len(tok.encode(s1).ids), len(tok.encode(s2).ids)
        assert l1 == l2
        records.append(
            {
                "pair": [s1, s2],
                "answer": [" " + str(c1), " " + str(c2)],
                "length": l1,
                "category": "city_landmarks",
            }
        )
    with open(os.path.join(OUT, "paired_facts_fixture.json"), "w") as f:
        json.dump(records, f, indent=1)


def main():
    os.makedirs(OUT, exist_ok=True)
    builder, meta = build_vocab()
    tok = make_tokenizer(builder)
    check_single_tokens(tok, builder)
    write_vocab_files(builder)
    dump_bpe_cases(tok)
    build_toy_model(len(builder.vocab), tok)
    build_deep_toy_model(len(builder.vocab))
    build_attn_only_model(len(builder.vocab))
    build_paired_facts(tok, meta)
    print(f"vocab size: {len(builder.vocab)}, merges: {len(builder.merges)}")
    print("fixtures written to", OUT)


if __name__ == "__main__":
    sys.exit(main())
