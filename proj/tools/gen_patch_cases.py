#!/usr/bin/env python3
"""Freezes reference logits for patched runs.

Loads the committed toy checkpoint into TransformerLens, performs the same
activation patches through its hook system (clean run cached, corrupted run
patched), and records the final-position logits per case into
tests/data/toy/patch_cases.json. The C++ engine must reproduce each row.

Run after gen_fixtures.py whenever the toy checkpoint changes.
"""

import json
import os
import sys

import torch
from safetensors.torch import load_file
from transformers import GPT2Config, GPT2LMHeadModel

from transformer_lens import HookedTransformer, HookedTransformerConfig
import transformer_lens.loading_from_pretrained as tl_loading

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
OUT = os.path.join(ROOT, "tests", "data")


def load_committed_toy():
    sd = load_file(os.path.join(OUT, "toy", "model.safetensors"))
    with open(os.path.join(OUT, "toy", "config.json")) as f:
        cfg = json.load(f)
    hf_cfg = GPT2Config(
        vocab_size=cfg["vocab_size"],
        n_positions=cfg["max_positions"],
        n_embd=cfg["d_model"],
        n_layer=cfg["n_layers"],
        n_head=cfg["n_heads"],
        n_inner=cfg["d_mlp"],
        activation_function="gelu_new",
        resid_pdrop=0.0,
        embd_pdrop=0.0,
        attn_pdrop=0.0,
        layer_norm_epsilon=cfg["layernorm_eps"],
        bos_token_id=None,
        eos_token_id=None,
    )
    model = GPT2LMHeadModel(hf_cfg)
    hf_sd = {"transformer." + k: v for k, v in sd.items()}
    hf_sd["lm_head.weight"] = sd["wte.weight"]
    missing, unexpected = model.load_state_dict(hf_sd, strict=False)
    # Only non-persistent mask buffers may be missing.
    assert not unexpected, unexpected
    for k in missing:
        assert k.endswith("attn.bias") or k.endswith("attn.masked_bias"), k
    model.eval()
    return model, cfg


def to_hooked(model, cfg):
    tl_cfg = HookedTransformerConfig(
        n_layers=cfg["n_layers"],
        d_model=cfg["d_model"],
        n_ctx=cfg["max_positions"],
        d_head=cfg["d_model"] // cfg["n_heads"],
        n_heads=cfg["n_heads"],
        d_mlp=cfg["d_mlp"],
        d_vocab=cfg["vocab_size"],
        act_fn="gelu_new",
        normalization_type="LN",
        eps=cfg["layernorm_eps"],
    )
    state = tl_loading.convert_gpt2_weights(model, tl_cfg)
    hooked = HookedTransformer(tl_cfg)
    hooked.load_and_process_state_dict(
        state,
        fold_ln=False,
        center_writing_weights=False,
        center_unembed=False,
        fold_value_biases=False,
        refactor_factored_attn_matrices=False,
    )
    hooked.eval()
    return hooked


def encode_fixture(text):
    from tokenizers import Tokenizer
    from tokenizers.models import BPE
    from tokenizers.pre_tokenizers import ByteLevel

    with open(os.path.join(OUT, "vocab.json")) as f:
        vocab = json.load(f)
    merges = []
    with open(os.path.join(OUT, "merges.txt")) as f:
        for line in f:
            line = line.rstrip("\n")
            if line.startswith("#") or not line:
                continue
            left, right = line.split(" ")
            merges.append((left, right))
    tok = Tokenizer(BPE(vocab, merges))
    tok.pre_tokenizer = ByteLevel(add_prefix_space=False, use_regex=True)
    return tok.encode(text).ids


# (site kind, hook name template, layer, head, positions or None for all)
CASES = [
    ("head_out", "blocks.{l}.attn.hook_z", 1, 0, None),
    ("head_out", "blocks.{l}.attn.hook_z", 0, 1, [2, 5]),
    ("attn_value", "blocks.{l}.attn.hook_v", 0, 0, None),
    ("attn_pattern", "blocks.{l}.attn.hook_pattern", 1, 1, None),
    ("mlp_out", "blocks.{l}.hook_mlp_out", 1, -1, [12]),
    ("resid_post", "blocks.{l}.hook_resid_post", 0, -1, None),
    ("attn_sublayer_out", "blocks.{l}.hook_resid_mid", 1, -1, [0, 3]),
    ("embed_out", "blocks.0.hook_resid_pre", 0, -1, [4]),
]


def main():
    model, cfg = load_committed_toy()
    hooked = to_hooked(model, cfg)

    clean_text = "When Mary and John went to the store, John gave a drink to"
    corrupt_text = "When Mary and John went to the store, Mary gave a drink to"
    clean_ids = encode_fixture(clean_text)
    corrupt_ids = encode_fixture(corrupt_text)
    assert len(clean_ids) == len(corrupt_ids)

    clean_t = torch.tensor([clean_ids])
    corrupt_t = torch.tensor([corrupt_ids])

    with torch.no_grad():
        clean_logits, clean_cache = hooked.run_with_cache(clean_t)
        # Sanity: TransformerLens agrees with the HF forward on this model.
        hf_logits = model(clean_t).logits
        assert (clean_logits - hf_logits).abs().max().item() < 2e-4

    cases_out = []
    for kind, template, layer, head, positions in CASES:
        name = template.format(l=layer)
        cached = clean_cache[name]

        def patch(value, hook, cached=cached, head=head, positions=positions):
            v = value.clone()
            if "pattern" in hook.name:
                # [batch, head, q, k]
                if positions is None:
                    v[:, head] = cached[:, head]
                else:
                    v[:, head, positions] = cached[:, head, positions]
            elif v.dim() == 4:
                # [batch, pos, head, d_head]
                if positions is None:
                    v[:, :, head] = cached[:, :, head]
                else:
                    for p in positions:
                        v[:, p, head] = cached[:, p, head]
            else:
                # [batch, pos, d]
                if positions is None:
                    v[:] = cached
                else:
                    for p in positions:
                        v[:, p] = cached[:, p]
            return v

        with torch.no_grad():
            patched = hooked.run_with_hooks(corrupt_t, fwd_hooks=[(name, patch)])
        cases_out.append(
            {
                "kind": kind,
                "layer": layer,
                "head": head,
                "positions": positions if positions is not None else [],
                "final_logits": patched[0, -1].float().tolist(),
            }
        )

    with open(os.path.join(OUT, "toy", "patch_cases.json"), "w") as f:
        json.dump(
            {"clean_ids": clean_ids, "corrupt_ids": corrupt_ids, "cases": cases_out}, f
        )
    print(f"wrote {len(cases_out)} patched-run reference cases")


if __name__ == "__main__":
    sys.exit(main())
