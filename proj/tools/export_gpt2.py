#!/usr/bin/env python3
"""Exports a Hugging Face GPT-2-family checkpoint into the layout this
project loads: model.safetensors (GPT-2 tensor names, float32), config.json,
vocab.json and merges.txt.

Usage:
    python3 tools/export_gpt2.py gpt2 models/gpt2-small
    python3 tools/export_gpt2.py gpt2-xl models/gpt2-xl

Needs `transformers` and a working model cache or network access; run it on a
machine that has one, then copy the output directory next to this repo.
"""

import json
import os
import sys

import torch
from safetensors.torch import save_file
from transformers import GPT2LMHeadModel, GPT2TokenizerFast


def main():
    if len(sys.argv) != 3:
        print(__doc__)
        return 2
    name, out_dir = sys.argv[1], sys.argv[2]
    os.makedirs(out_dir, exist_ok=True)

    model = GPT2LMHeadModel.from_pretrained(name)
    model.eval()
    cfg = model.config

    keep = {}
    for k, v in model.state_dict().items():
        k2 = k.replace("transformer.", "")
        parts = k2.split(".")
        if k2 == "lm_head.weight":  # tied to wte
            continue
        if len(parts) >= 2 and parts[-2] == "attn" and parts[-1] in ("bias", "masked_bias"):
            continue  # causal-mask buffers
        keep[k2] = v.to(torch.float32).contiguous()
    save_file(keep, os.path.join(out_dir, "model.safetensors"))

    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(
            {
                "n_layers": cfg.n_layer,
                "n_heads": cfg.n_head,
                "d_model": cfg.n_embd,
                "d_mlp": cfg.n_inner if cfg.n_inner else 4 * cfg.n_embd,
                "vocab_size": cfg.vocab_size,
                "max_positions": cfg.n_positions,
                "attn_only": False,
                "layernorm_eps": cfg.layer_norm_epsilon,
            },
            f,
            indent=1,
        )

    tok = GPT2TokenizerFast.from_pretrained(name)
    tok.save_vocabulary(out_dir)
    print(f"wrote {out_dir}: {len(keep)} tensors, vocab {cfg.vocab_size}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
