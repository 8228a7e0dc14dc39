#!/usr/bin/env python3
"""Exports the TransformerLens `attn-only-4l` checkpoint (or any attn-only
TransformerLens model) into this project's layout.

Usage:
    python3 tools/export_attn_only.py attn-only-4l models/attn-only-4l

TransformerLens stores per-head weight stacks (W_Q[head, d, d_head], ...);
this script fuses them back into GPT-2-style c_attn / c_proj tensors. The
model's tokenizer files are saved alongside. Needs `transformer_lens` and a
model cache or network access.
"""

import json
import os
import sys

import torch
from safetensors.torch import save_file


def main():
    if len(sys.argv) != 3:
        print(__doc__)
        return 2
    name, out_dir = sys.argv[1], sys.argv[2]
    os.makedirs(out_dir, exist_ok=True)

    from transformer_lens import HookedTransformer

    model = HookedTransformer.from_pretrained_no_processing(name)
    cfg = model.cfg
    if cfg.attn_only is not True:
        print(f"{name} is not attention-only")
        return 1

    d, heads, d_head = cfg.d_model, cfg.n_heads, cfg.d_head
    sd = model.state_dict()

    # Models exported with folded layer norms ("LNPre") have no learnable
    # norm parameters; identity parameters reproduce the same computation.
    def norm_params(prefix):
        w = sd.get(prefix + ".w")
        b = sd.get(prefix + ".b")
        if w is None:
            w = torch.ones(d)
        if b is None:
            b = torch.zeros(d)
        return w.float().contiguous(), b.float().contiguous()

    lnf_w, lnf_b = norm_params("ln_final")
    tensors = {
        "wte.weight": sd["embed.W_E"].float().contiguous(),
        "wpe.weight": sd["pos_embed.W_pos"].float().contiguous(),
        "ln_f.weight": lnf_w,
        "ln_f.bias": lnf_b,
    }
    for l in range(cfg.n_layers):
        p = f"blocks.{l}."
        ln1_w, ln1_b = norm_params(p + "ln1")
        tensors[f"h.{l}.ln_1.weight"] = ln1_w
        tensors[f"h.{l}.ln_1.bias"] = ln1_b

        # [head, d, d_head] -> [d, head*d_head], fused [Q|K|V].
        wq = sd[p + "attn.W_Q"].permute(1, 0, 2).reshape(d, heads * d_head)
        wk = sd[p + "attn.W_K"].permute(1, 0, 2).reshape(d, heads * d_head)
        wv = sd[p + "attn.W_V"].permute(1, 0, 2).reshape(d, heads * d_head)
        tensors[f"h.{l}.attn.c_attn.weight"] = (
            torch.cat([wq, wk, wv], dim=1).float().contiguous()
        )
        bq = sd[p + "attn.b_Q"].reshape(heads * d_head)
        bk = sd[p + "attn.b_K"].reshape(heads * d_head)
        bv = sd[p + "attn.b_V"].reshape(heads * d_head)
        tensors[f"h.{l}.attn.c_attn.bias"] = torch.cat([bq, bk, bv]).float().contiguous()

        # [head, d_head, d] -> [head*d_head, d].
        wo = sd[p + "attn.W_O"].reshape(heads * d_head, d)
        tensors[f"h.{l}.attn.c_proj.weight"] = wo.float().contiguous()
        tensors[f"h.{l}.attn.c_proj.bias"] = sd[p + "attn.b_O"].float().contiguous()

    save_file(tensors, os.path.join(out_dir, "model.safetensors"))
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(
            {
                "n_layers": cfg.n_layers,
                "n_heads": cfg.n_heads,
                "d_model": cfg.d_model,
                "d_mlp": 0,
                "vocab_size": cfg.d_vocab,
                "max_positions": cfg.n_ctx,
                "attn_only": True,
                "layernorm_eps": cfg.eps,
            },
            f,
            indent=1,
        )
    model.tokenizer.save_vocabulary(out_dir)
    print(f"wrote {out_dir}: {len(tensors)} tensors")
    return 0


if __name__ == "__main__":
    sys.exit(main())
