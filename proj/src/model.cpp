#include "patchkit/model.hpp"

#include "patchkit/errors.hpp"
#include "patchkit/safetensors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

namespace patchkit {

using nlohmann::json;

void ModelConfig::validate() const {
    if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || vocab_size <= 0 || max_positions <= 0)
        throw ConfigError("model config has non-positive dimensions");
    if (d_model % n_heads != 0)
        throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                          std::to_string(n_heads));
    if (!attn_only && d_mlp <= 0) throw ConfigError("d_mlp must be positive unless attn_only");
}

ModelConfig ModelConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open model config: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw LoadError("bad model config JSON in " + path + ": " + e.what());
    }
    if (j.contains("parallel_sublayers") && j["parallel_sublayers"].get<bool>())
        throw ConfigError("parallel attention/MLP sublayers are not supported");

    ModelConfig cfg;
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.attn_only = j.value("attn_only", false);
    cfg.d_mlp = cfg.attn_only ? j.value("d_mlp", 0) : j.at("d_mlp").get<int>();
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.max_positions = j.at("max_positions").get<int>();
    cfg.layernorm_eps = j.value("layernorm_eps", 1e-5f);
    cfg.validate();
    return cfg;
}

namespace {

void check_shape(const std::string& name, const Matrix& m, int rows, int cols) {
    if (m.rows != rows || m.cols != cols)
        throw LoadError("tensor '" + name + "' has shape " + std::to_string(m.rows) + "x" +
                        std::to_string(m.cols) + ", expected " + std::to_string(rows) + "x" +
                        std::to_string(cols));
}

void check_len(const std::string& name, const std::vector<float>& v, size_t len) {
    if (v.size() != len)
        throw LoadError("tensor '" + name + "' has length " + std::to_string(v.size()) +
                        ", expected " + std::to_string(len));
}

} // namespace

Model load_model(const std::string& config_path, const std::string& weights_path) {
    Model model;
    model.config = ModelConfig::load(config_path);
    const ModelConfig& cfg = model.config;

    SafetensorsFile f(weights_path);
    const std::string prefix = f.has("wte.weight") ? "" : "transformer.";
    const auto name = [&](const std::string& suffix) { return prefix + suffix; };

    Weights& w = model.weights;
    w.token_embedding = f.tensor_2d(name("wte.weight"));
    check_shape(name("wte.weight"), w.token_embedding, cfg.vocab_size, cfg.d_model);
    w.position_embedding = f.tensor_2d(name("wpe.weight"));
    check_shape(name("wpe.weight"), w.position_embedding, cfg.max_positions, cfg.d_model);

    w.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string h = name("h." + std::to_string(l) + ".");
        LayerWeights& lw = w.layers[static_cast<size_t>(l)];

        lw.ln1_gamma = f.tensor_1d(h + "ln_1.weight");
        lw.ln1_beta = f.tensor_1d(h + "ln_1.bias");
        check_len(h + "ln_1.weight", lw.ln1_gamma, static_cast<size_t>(cfg.d_model));
        check_len(h + "ln_1.bias", lw.ln1_beta, static_cast<size_t>(cfg.d_model));

        lw.w_qkv = f.tensor_2d(h + "attn.c_attn.weight");
        check_shape(h + "attn.c_attn.weight", lw.w_qkv, cfg.d_model, 3 * cfg.d_model);
        lw.b_qkv = f.tensor_1d(h + "attn.c_attn.bias");
        check_len(h + "attn.c_attn.bias", lw.b_qkv, static_cast<size_t>(3 * cfg.d_model));

        lw.w_o = f.tensor_2d(h + "attn.c_proj.weight");
        check_shape(h + "attn.c_proj.weight", lw.w_o, cfg.d_model, cfg.d_model);
        lw.b_o = f.tensor_1d(h + "attn.c_proj.bias");
        check_len(h + "attn.c_proj.bias", lw.b_o, static_cast<size_t>(cfg.d_model));

        if (cfg.attn_only) {
            if (f.has(h + "mlp.c_fc.weight"))
                throw LoadError("config says attn_only but checkpoint has '" + h +
                                "mlp.c_fc.weight'");
            continue;
        }
        lw.ln2_gamma = f.tensor_1d(h + "ln_2.weight");
        lw.ln2_beta = f.tensor_1d(h + "ln_2.bias");
        check_len(h + "ln_2.weight", lw.ln2_gamma, static_cast<size_t>(cfg.d_model));
        check_len(h + "ln_2.bias", lw.ln2_beta, static_cast<size_t>(cfg.d_model));

        lw.w_fc = f.tensor_2d(h + "mlp.c_fc.weight");
        check_shape(h + "mlp.c_fc.weight", lw.w_fc, cfg.d_model, cfg.d_mlp);
        lw.b_fc = f.tensor_1d(h + "mlp.c_fc.bias");
        check_len(h + "mlp.c_fc.bias", lw.b_fc, static_cast<size_t>(cfg.d_mlp));

        lw.w_proj = f.tensor_2d(h + "mlp.c_proj.weight");
        check_shape(h + "mlp.c_proj.weight", lw.w_proj, cfg.d_mlp, cfg.d_model);
        lw.b_proj = f.tensor_1d(h + "mlp.c_proj.bias");
        check_len(h + "mlp.c_proj.bias", lw.b_proj, static_cast<size_t>(cfg.d_model));
    }

    w.lnf_gamma = f.tensor_1d(name("ln_f.weight"));
    w.lnf_beta = f.tensor_1d(name("ln_f.bias"));
    check_len(name("ln_f.weight"), w.lnf_gamma, static_cast<size_t>(cfg.d_model));
    check_len(name("ln_f.bias"), w.lnf_beta, static_cast<size_t>(cfg.d_model));

    if (f.has("lm_head.weight")) {
        w.unembedding = f.tensor_2d("lm_head.weight");
        check_shape("lm_head.weight", w.unembedding, cfg.vocab_size, cfg.d_model);
        w.tied = false;
    } else {
        w.tied = true;
    }
    return model;
}

void embed_row(const Model& model, int token_id, int position, std::span<float> out) {
    const Weights& w = model.weights;
    if (token_id < 0 || token_id >= model.config.vocab_size)
        throw VocabError("token id " + std::to_string(token_id) + " out of range");
    const auto te = w.token_embedding.row(token_id);
    const auto pe = w.position_embedding.row(position);
    for (int c = 0; c < model.config.d_model; ++c) out[c] = te[c] + pe[c];
}

namespace {

Matrix slice_cols(const Matrix& m, int col0, int ncols) {
    Matrix out(m.rows, ncols);
    for (int r = 0; r < m.rows; ++r) {
        const float* src = m.data.data() + static_cast<size_t>(r) * m.cols + col0;
        float* dst = out.data.data() + static_cast<size_t>(r) * ncols;
        std::copy(src, src + ncols, dst);
    }
    return out;
}

void paste_cols(Matrix& dst, const Matrix& src, int col0) {
    for (int r = 0; r < src.rows; ++r) {
        const float* s = src.data.data() + static_cast<size_t>(r) * src.cols;
        float* d = dst.data.data() + static_cast<size_t>(r) * dst.cols + col0;
        std::copy(s, s + src.cols, d);
    }
}

void add_rows(Matrix& x, const Matrix& delta) {
    for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += delta.data[i];
}

// Applies a patch (if one targets this site) and then captures the
// post-replacement value.
class HookDispatch {
public:
    HookDispatch(const ForwardOptions& opt, ActivationCache& cache) : cache_(cache) {
        capture_ = opt.capture;
        if (opt.patches != nullptr) {
            for (const HookSite& s : opt.patches->sites) by_key_[s.key()] = &s;
            source_ = opt.patches->source;
        }
    }

    bool any_patch() const { return !by_key_.empty(); }

    void operator()(SiteKind kind, int layer, int head, Matrix& value) {
        const SiteKey key{kind, static_cast<int16_t>(layer), static_cast<int16_t>(head)};
        const auto it = by_key_.find(key);
        if (it != by_key_.end()) {
            const Matrix& cached = source_->at(key);
            if (!cached.same_shape(value))
                throw PatchError("cached tensor for " + to_string(key) + " has shape " +
                                 std::to_string(cached.rows) + "x" + std::to_string(cached.cols) +
                                 ", run produces " + std::to_string(value.rows) + "x" +
                                 std::to_string(value.cols));
            const auto& positions = it->second->positions;
            if (positions.empty()) {
                value = cached;
            } else {
                for (const int p : positions)
                    std::copy(cached.row(p).begin(), cached.row(p).end(), value.row(p).begin());
            }
        }
        if (capture_ != nullptr && capture_->contains(key)) cache_.entries[key] = value;
    }

private:
    std::map<SiteKey, const HookSite*> by_key_;
    const ActivationCache* source_ = nullptr;
    const CaptureSet* capture_ = nullptr;
    ActivationCache& cache_;
};

} // namespace

ForwardRecord forward(const Model& model, std::span<const int> ids, const ForwardOptions& opt) {
    const ModelConfig& cfg = model.config;
    const Weights& w = model.weights;
    const int n = static_cast<int>(ids.size());
    const int d = cfg.d_model;
    const int dh = cfg.head_dim();

    if (n == 0) throw ConfigError("forward pass on an empty sequence");
    if (n > cfg.max_positions)
        throw ConfigError("sequence length " + std::to_string(n) + " exceeds max_positions " +
                          std::to_string(cfg.max_positions));
    if (opt.patches != nullptr) opt.patches->validate(n, cfg.n_layers, cfg.n_heads);
    if (opt.start_layer < 0 || opt.start_layer > cfg.n_layers)
        throw PatchError("start_layer out of range");
    if (opt.start_layer > 0) {
        if (opt.initial_resid == nullptr)
            throw PatchError("resuming needs the residual stream entering start_layer");
        if (opt.initial_resid->rows != n || opt.initial_resid->cols != d)
            throw PatchError("resume residual shape does not match the input");
        if (opt.patches != nullptr) {
            for (const HookSite& s : opt.patches->sites) {
                if (s.kind == SiteKind::EmbedOut || (s.kind != SiteKind::FinalLogits &&
                                                     s.layer < opt.start_layer))
                    throw PatchError("patch site " + to_string(s.key()) +
                                     " lies below the resume layer");
            }
        }
    }

    auto cache = std::make_shared<ActivationCache>();
    cache->seq_len = n;
    HookDispatch hook(opt, *cache);

    Matrix x;
    if (opt.start_layer > 0) {
        x = *opt.initial_resid;
    } else {
        x = Matrix(n, d);
        for (int t = 0; t < n; ++t) embed_row(model, ids[t], t, x.row(t));
        if (opt.embed_override != nullptr) {
            const EmbeddingOverride& ov = *opt.embed_override;
            if (ov.rows.cols != d || ov.rows.rows != static_cast<int>(ov.positions.size()))
                throw PatchError("embedding override shape does not match the model");
            for (size_t k = 0; k < ov.positions.size(); ++k) {
                const int p = ov.positions[k];
                if (p < 0 || p >= n)
                    throw PatchError("embedding override position " + std::to_string(p) +
                                     " exceeds sequence length " + std::to_string(n));
                std::copy(ov.rows.row(static_cast<int>(k)).begin(),
                          ov.rows.row(static_cast<int>(k)).end(), x.row(p).begin());
            }
        }
        hook(SiteKind::EmbedOut, 0, -1, x);
    }

    const float attn_scale = 1.0f / std::sqrt(static_cast<float>(dh));
    Matrix qkv, scores, pattern, z, z_concat(n, d), attn_out, mlp_hidden, mlp_out;

    for (int l = opt.start_layer; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = w.layers[static_cast<size_t>(l)];

        Matrix a_in = layernorm(x, lw.ln1_gamma, lw.ln1_beta, cfg.layernorm_eps);
        matmul_into(a_in, lw.w_qkv, qkv);
        add_bias_rows(qkv, lw.b_qkv);

        for (int j = 0; j < cfg.n_heads; ++j) {
            Matrix q = slice_cols(qkv, j * dh, dh);
            Matrix k = slice_cols(qkv, d + j * dh, dh);
            Matrix v = slice_cols(qkv, 2 * d + j * dh, dh);
            hook(SiteKind::AttnValue, l, j, v);

            matmul_nt_into(q, k, scores);
            for (float& s : scores.data) s *= attn_scale;
            pattern = softmax_rows(scores, /*causal_mask=*/true);
            hook(SiteKind::AttnPattern, l, j, pattern);

            matmul_into(pattern, v, z);
            hook(SiteKind::HeadOut, l, j, z);
            paste_cols(z_concat, z, j * dh);
        }

        matmul_into(z_concat, lw.w_o, attn_out);
        add_bias_rows(attn_out, lw.b_o);
        add_rows(x, attn_out);
        hook(SiteKind::AttnSublayerOut, l, -1, x);

        if (!cfg.attn_only) {
            Matrix m_in = layernorm(x, lw.ln2_gamma, lw.ln2_beta, cfg.layernorm_eps);
            matmul_into(m_in, lw.w_fc, mlp_hidden);
            add_bias_rows(mlp_hidden, lw.b_fc);
            gelu_inplace({mlp_hidden.data.data(), mlp_hidden.data.size()});
            matmul_into(mlp_hidden, lw.w_proj, mlp_out);
            add_bias_rows(mlp_out, lw.b_proj);
            hook(SiteKind::MlpOut, l, -1, mlp_out);
            add_rows(x, mlp_out);
        }
        hook(SiteKind::ResidPost, l, -1, x);
    }

    ForwardRecord rec;
    rec.n_positions = n;
    if (opt.logits_final_only) {
        Matrix last(1, d);
        layernorm_row(x.row(n - 1), w.lnf_gamma, w.lnf_beta, cfg.layernorm_eps, last.row(0));
        rec.logits = matmul_nt(last, w.tied ? w.token_embedding : w.unembedding);
    } else {
        const Matrix xf = layernorm(x, w.lnf_gamma, w.lnf_beta, cfg.layernorm_eps);
        rec.logits = matmul_nt(xf, w.tied ? w.token_embedding : w.unembedding);
    }
    hook(SiteKind::FinalLogits, 0, -1, rec.logits);
    rec.cache = std::move(cache);
    return rec;
}

const Matrix& head_contribution(const ForwardRecord& record, int layer, int head) {
    return record.cache->at(
        {SiteKind::HeadOut, static_cast<int16_t>(layer), static_cast<int16_t>(head)});
}

Matrix head_residual_delta(const Model& model, const Matrix& z, int layer, int head) {
    const int d = model.config.d_model;
    const int dh = model.config.head_dim();
    const Matrix& w_o = model.weights.layers[static_cast<size_t>(layer)].w_o;
    Matrix block(dh, d);
    std::copy(w_o.data.begin() + static_cast<size_t>(head) * dh * d,
              w_o.data.begin() + static_cast<size_t>(head + 1) * dh * d, block.data.begin());
    return matmul(z, block);
}

CaptureSet all_head_out_sites(const ModelConfig& cfg) {
    CaptureSet s;
    for (int l = 0; l < cfg.n_layers; ++l)
        for (int h = 0; h < cfg.n_heads; ++h) s.add(SiteKind::HeadOut, l, h);
    return s;
}

CaptureSet all_sites(const ModelConfig& cfg) {
    CaptureSet s;
    s.add(SiteKind::EmbedOut);
    for (int l = 0; l < cfg.n_layers; ++l) {
        for (int h = 0; h < cfg.n_heads; ++h) {
            s.add(SiteKind::AttnPattern, l, h);
            s.add(SiteKind::AttnValue, l, h);
            s.add(SiteKind::HeadOut, l, h);
        }
        s.add(SiteKind::AttnSublayerOut, l);
        if (!cfg.attn_only) s.add(SiteKind::MlpOut, l);
        s.add(SiteKind::ResidPost, l);
    }
    s.add(SiteKind::FinalLogits);
    return s;
}

} // namespace patchkit
