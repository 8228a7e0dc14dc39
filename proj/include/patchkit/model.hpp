#pragma once

#include "patchkit/hooks.hpp"
#include "patchkit/kernels.hpp"

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace patchkit {

struct ModelConfig {
    int n_layers = 0;
    int n_heads = 0;
    int d_model = 0;
    int d_mlp = 0;
    int vocab_size = 0;
    int max_positions = 0;
    bool attn_only = false;
    float layernorm_eps = 1e-5f;

    int head_dim() const { return d_model / n_heads; }
    void validate() const;
    static ModelConfig load(const std::string& path);
};

// One transformer block. QKV stays fused as stored in GPT-2 checkpoints
// ([d, 3d], x @ W layout); per-head slices are column ranges of w_qkv and row
// ranges of w_o.
struct LayerWeights {
    std::vector<float> ln1_gamma, ln1_beta;
    Matrix w_qkv;              // d x 3d
    std::vector<float> b_qkv;  // 3d
    Matrix w_o;                // d x d
    std::vector<float> b_o;    // d
    std::vector<float> ln2_gamma, ln2_beta; // empty when attn_only
    Matrix w_fc;               // d x d_mlp
    std::vector<float> b_fc;   // d_mlp
    Matrix w_proj;             // d_mlp x d
    std::vector<float> b_proj; // d
};

struct Weights {
    Matrix token_embedding;    // V x d
    Matrix position_embedding; // N_max x d
    std::vector<LayerWeights> layers;
    std::vector<float> lnf_gamma, lnf_beta;
    Matrix unembedding; // V x d; tied to token_embedding unless the file has lm_head
    bool tied = true;
};

struct Model {
    ModelConfig config;
    Weights weights;
};

// Reads a JSON model config and a safetensors checkpoint in the GPT-2 tensor
// naming scheme (with or without the "transformer." prefix). All shapes are
// validated against the config.
Model load_model(const std::string& config_path, const std::string& weights_path);

// Output of one forward pass. `cache` holds whatever sites were captured.
// With ForwardOptions::logits_final_only the logits matrix has one row (the
// final position); seq_len() still reports the input length.
struct ForwardRecord {
    Matrix logits; // N x V, or 1 x V under logits_final_only
    std::shared_ptr<const ActivationCache> cache;
    int n_positions = 0;

    int seq_len() const { return n_positions; }
    std::span<const float> final_logits() const { return logits.row(logits.rows - 1); }
};

struct ForwardOptions {
    const CaptureSet* capture = nullptr;
    const PatchSpec* patches = nullptr;
    const EmbeddingOverride* embed_override = nullptr;
    // Unembed only the final position (patching final_logits then becomes
    // invalid). Sweeps use this; metrics only read the final row.
    bool logits_final_only = false;
    // Resume from a cached residual stream instead of the embedding:
    // `initial_resid` must hold the stream entering `start_layer` (the
    // resid_post of start_layer - 1 from an identical-input run). Patches
    // below start_layer are invalid. The sweep engine uses this to skip the
    // layers a patch cannot affect.
    int start_layer = 0;
    const Matrix* initial_resid = nullptr;
};

// Runs the model on `ids`. Patched sites are overwritten from the cache
// before any downstream consumption; captured sites record post-replacement
// values. With no patches, no capture and no override this is a plain
// deterministic forward pass.
ForwardRecord forward(const Model& model, std::span<const int> ids,
                      const ForwardOptions& options = {});

// Computes the row the embedding stage produces at (token, position); shared
// with Gaussian-noise corruption so overrides match bit-for-bit.
void embed_row(const Model& model, int token_id, int position, std::span<float> out);

// z = A V rows of one head, from a record that captured HeadOut there.
const Matrix& head_contribution(const ForwardRecord& record, int layer, int head);

// Maps a head's z rows through its W_O block: the head's additive
// contribution to the residual stream (bias excluded).
Matrix head_residual_delta(const Model& model, const Matrix& z, int layer, int head);

// Capture sets for sweep construction.
CaptureSet all_head_out_sites(const ModelConfig& config);
CaptureSet all_sites(const ModelConfig& config);

} // namespace patchkit
