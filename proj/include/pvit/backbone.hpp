#pragma once

// Joint space-time transformer over non-overlapping per-frame patches:
// token sequence [CLS | patch tokens | task prompts], pre-norm blocks with
// full self-attention, and tapped patch-token maps for the dense heads.
// Prompts carry no position embedding and sit after the patches in a fixed
// canonical task order.

#include <map>
#include <string>
#include <vector>

#include "pvit/rng.hpp"
#include "pvit/tasks.hpp"
#include "pvit/tensor.hpp"

namespace pvit {

struct BackboneConfig {
    long frames = 4;
    long height = 32, width = 32;
    long patch_h = 8, patch_w = 8;
    long embed_dim = 64;
    long layers = 8;
    long heads = 4;
    long prompt_count = 5;
    std::vector<int> tap_layers = {1, 6, 8};
    long classes = 8;
    double init_std = 0.1;
    double pe_init_scale = 5.0;  // position embeddings start at init_std * this
    double ln_eps = 1e-5;

    long grid_h() const { return height / patch_h; }
    long grid_w() const { return width / patch_w; }
    long patches() const { return frames * grid_h() * grid_w(); }
    long patch_dim() const { return 3 * patch_h * patch_w; }
    long seq_len() const { return 1 + patches() + prompt_count; }

    void validate() const {
        if (height % patch_h != 0 || width % patch_w != 0) throw ShapeMismatch("config: image dims not divisible by patch dims");
        if (embed_dim % heads != 0) throw ShapeMismatch("config: embed_dim not divisible by heads");
        if (prompt_count < 0) throw ShapeMismatch("config: negative prompt count");
        int prev = 0;
        for (int t : tap_layers) {
            if (t <= prev || t > layers) throw ShapeMismatch("config: tap_layers must be strictly increasing within [1, layers]");
            prev = t;
        }
    }
};

struct BlockParams {
    TensorPtr wq, wk, wv, wo;      // [d,d]
    TensorPtr ln1_gain, ln1_bias;  // [d]
    TensorPtr ln2_gain, ln2_bias;
    TensorPtr ffn_w1;  // [d,4d]
    TensorPtr ffn_w2;  // [4d,d]
};

enum class ParamGroup { embedder, blocks, cls_token, prompts, heads };

inline const char* group_name(ParamGroup g) {
    switch (g) {
        case ParamGroup::embedder: return "embedder";
        case ParamGroup::blocks: return "blocks";
        case ParamGroup::cls_token: return "cls_token";
        case ParamGroup::prompts: return "prompts";
        case ParamGroup::heads: return "heads";
    }
    return "?";
}

struct ParamEntry {
    ParamGroup group;
    std::string name;
    TensorPtr tensor;
};

struct ModelParams {
    TensorPtr patch_proj;  // [3*h*w, d]
    TensorPtr pos_embed;   // [N, d]
    TensorPtr cls_token;   // [1, d]
    TensorPtr prompts;     // [n, d] leaf, canonical task order; null when n == 0
    // One-prompt variant: the single token is produced by a widened private
    // projection instead of a direct [1,d] row.
    TensorPtr prompt_wide;  // [1, wide]
    TensorPtr prompt_proj;  // [wide, d]
    std::vector<BlockParams> blocks;
    TensorPtr final_gain, final_bias;  // closing layer norm over all tokens

    static ModelParams init(const BackboneConfig& cfg, Rng& rng, bool one_prompt_wide = false, long wide_dim = 0) {
        cfg.validate();
        ModelParams p;
        const long d = cfg.embed_dim;
        p.patch_proj = randn({cfg.patch_dim(), d}, rng, cfg.init_std, true);
        p.pos_embed = randn({cfg.patches(), d}, rng, cfg.init_std * cfg.pe_init_scale, true);
        p.cls_token = randn({1, d}, rng, cfg.init_std, true);
        if (one_prompt_wide) {
            if (cfg.prompt_count != 1) throw ShapeMismatch("one-prompt params need prompt_count == 1");
            p.prompt_wide = randn({1, wide_dim}, rng, cfg.init_std, true);
            p.prompt_proj = randn({wide_dim, d}, rng, cfg.init_std, true);
        } else if (cfg.prompt_count > 0) {
            p.prompts = randn({cfg.prompt_count, d}, rng, cfg.init_std, true);
        }
        p.blocks.resize(cfg.layers);
        for (auto& b : p.blocks) {
            b.wq = randn({d, d}, rng, cfg.init_std, true);
            b.wk = randn({d, d}, rng, cfg.init_std, true);
            b.wv = randn({d, d}, rng, cfg.init_std, true);
            b.wo = randn({d, d}, rng, cfg.init_std, true);
            b.ln1_gain = full({d}, 1.0, true);
            b.ln1_bias = zeros({d}, true);
            b.ln2_gain = full({d}, 1.0, true);
            b.ln2_bias = zeros({d}, true);
            b.ffn_w1 = randn({d, 4 * d}, rng, cfg.init_std, true);
            b.ffn_w2 = randn({4 * d, d}, rng, cfg.init_std, true);
        }
        p.final_gain = full({d}, 1.0, true);
        p.final_bias = zeros({d}, true);
        return p;
    }

    // The [n,d] prompt token rows (graph output for the one-prompt variant).
    TensorPtr prompt_tokens() const {
        if (prompt_wide) return matmul(prompt_wide, prompt_proj);
        return prompts;
    }

    // Deterministic registry order; serialization and the optimizer iterate it.
    std::vector<ParamEntry> entries() const {
        std::vector<ParamEntry> out;
        out.push_back({ParamGroup::embedder, "patch_proj", patch_proj});
        out.push_back({ParamGroup::embedder, "pos_embed", pos_embed});
        out.push_back({ParamGroup::cls_token, "cls_token", cls_token});
        if (prompts) out.push_back({ParamGroup::prompts, "prompts", prompts});
        if (prompt_wide) {
            out.push_back({ParamGroup::prompts, "prompt_wide", prompt_wide});
            out.push_back({ParamGroup::prompts, "prompt_proj", prompt_proj});
        }
        for (size_t i = 0; i < blocks.size(); ++i) {
            const auto& b = blocks[i];
            const std::string prefix = "block" + std::to_string(i) + ".";
            out.push_back({ParamGroup::blocks, prefix + "wq", b.wq});
            out.push_back({ParamGroup::blocks, prefix + "wk", b.wk});
            out.push_back({ParamGroup::blocks, prefix + "wv", b.wv});
            out.push_back({ParamGroup::blocks, prefix + "wo", b.wo});
            out.push_back({ParamGroup::blocks, prefix + "ln1_gain", b.ln1_gain});
            out.push_back({ParamGroup::blocks, prefix + "ln1_bias", b.ln1_bias});
            out.push_back({ParamGroup::blocks, prefix + "ln2_gain", b.ln2_gain});
            out.push_back({ParamGroup::blocks, prefix + "ln2_bias", b.ln2_bias});
            out.push_back({ParamGroup::blocks, prefix + "ffn_w1", b.ffn_w1});
            out.push_back({ParamGroup::blocks, prefix + "ffn_w2", b.ffn_w2});
        }
        out.push_back({ParamGroup::blocks, "final_gain", final_gain});
        out.push_back({ParamGroup::blocks, "final_bias", final_bias});
        return out;
    }

    // Backbone freezing: embedder, CLS and block parameters stop receiving
    // gradient; prompts (and heads, owned elsewhere) keep training.
    void set_backbone_trainable(bool trainable) const {
        for (const auto& e : entries()) {
            if (e.group == ParamGroup::embedder || e.group == ParamGroup::blocks || e.group == ParamGroup::cls_token) {
                e.tensor->requires_grad = trainable;
            }
        }
    }
};

struct TokenSequence {
    TensorPtr rows;  // [1+N+n, d]
    long cls_index = 0;
    std::pair<long, long> patch_range;   // [1, N]
    std::pair<long, long> prompt_range;  // [N+1, N+n]; {0,0} when n == 0
};

struct ForwardOutputs {
    TensorPtr f_cls;          // [1, d]
    TensorPtr f_prompts;      // [n, d], canonical task order; null when n == 0
    TensorPtr f_patch_final;  // [N, d]
    std::map<int, TensorPtr> tapped_patches;  // tap layer index -> [N, d]
};

// ---------------------------------------------------------------------------

// Row i is E . flatten(patch_i) + PE_i. Patches are ordered frame-major,
// then row-major inside the frame; flattening is channel-major.
inline TensorPtr patch_embed(const std::vector<double>& pixels, const BackboneConfig& cfg, const ModelParams& params) {
    const long T = cfg.frames, H = cfg.height, W = cfg.width, ph = cfg.patch_h, pw = cfg.patch_w;
    if (static_cast<long>(pixels.size()) != T * 3 * H * W) {
        throw ShapeMismatch("patch_embed: video has " + std::to_string(pixels.size()) + " voxels, expected " +
                            std::to_string(T * 3 * H * W));
    }
    const long gh = cfg.grid_h(), gw = cfg.grid_w(), N = cfg.patches(), pd = cfg.patch_dim();
    std::vector<double> mat(static_cast<size_t>(N * pd));
    for (long t = 0; t < T; ++t) {
        for (long cy = 0; cy < gh; ++cy) {
            for (long cx = 0; cx < gw; ++cx) {
                const long row = t * gh * gw + cy * gw + cx;
                long k = 0;
                for (long c = 0; c < 3; ++c) {
                    for (long y = cy * ph; y < (cy + 1) * ph; ++y) {
                        for (long x = cx * pw; x < (cx + 1) * pw; ++x) {
                            mat[row * pd + k++] = pixels[((t * 3 + c) * H + y) * W + x];
                        }
                    }
                }
            }
        }
    }
    auto patch_matrix = new_tensor({N, pd}, std::move(mat));
    return add(matmul(patch_matrix, params.patch_proj), params.pos_embed);
}

inline TokenSequence assemble_tokens(const TensorPtr& patches, const BackboneConfig& cfg, const ModelParams& params) {
    const long N = cfg.patches(), n = cfg.prompt_count;
    if (patches->shape != Shape{N, cfg.embed_dim}) {
        throw ShapeMismatch("assemble_tokens: patches shape " + shape_str(patches->shape));
    }
    TokenSequence seq;
    if (n > 0) {
        seq.rows = concat({params.cls_token, patches, params.prompt_tokens()}, 0);
        seq.prompt_range = {N + 1, N + n};
    } else {
        seq.rows = concat({params.cls_token, patches}, 0);
        seq.prompt_range = {0, 0};
    }
    seq.cls_index = 0;
    seq.patch_range = {1, N};
    return seq;
}

// Pre-norm residual block: x + MHSA(LN(x)), then + FFN(LN(.)). Every token
// attends to every other. When attn_out is non-null the per-head softmax
// matrices are appended to it.
inline TensorPtr transformer_block(const TensorPtr& tokens, const BlockParams& block, long heads, double ln_eps,
                                   std::vector<TensorPtr>* attn_out = nullptr) {
    const long S = tokens->shape[0], d = tokens->shape[1];
    const long dh = d / heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    auto h1 = layer_norm(tokens, block.ln1_gain, block.ln1_bias, ln_eps);
    auto q = matmul(h1, block.wq);
    auto k = matmul(h1, block.wk);
    auto v = matmul(h1, block.wv);
    std::vector<TensorPtr> head_outputs;
    head_outputs.reserve(heads);
    for (long h = 0; h < heads; ++h) {
        auto qh = slice(q, 1, h * dh, dh);
        auto kh = slice(k, 1, h * dh, dh);
        auto vh = slice(v, 1, h * dh, dh);
        auto scores = scale(matmul(qh, transpose(kh)), att_scale);  // [S,S]
        auto attn = softmax(scores, 1);
        if (attn_out) attn_out->push_back(attn);
        head_outputs.push_back(matmul(attn, vh));
    }
    auto mhsa = matmul(heads == 1 ? head_outputs[0] : concat(head_outputs, 1), block.wo);
    auto x = add(tokens, mhsa);

    auto h2 = layer_norm(x, block.ln2_gain, block.ln2_bias, ln_eps);
    auto ffn = matmul(gelu(matmul(h2, block.ffn_w1)), block.ffn_w2);
    (void)S;
    return add(x, ffn);
}

// Embedder plus all blocks, with the requires_grad state taken as-is.
// Thread-safe for concurrent calls over shared read-only parameters.
inline ForwardOutputs forward_prepared(const std::vector<double>& pixels, const BackboneConfig& cfg,
                                       const ModelParams& params) {
    const long N = cfg.patches(), n = cfg.prompt_count;
    auto patches = patch_embed(pixels, cfg, params);
    auto seq = assemble_tokens(patches, cfg, params);
    TensorPtr x = seq.rows;
    ForwardOutputs out;
    size_t next_tap = 0;
    for (long layer = 1; layer <= cfg.layers; ++layer) {
        x = transformer_block(x, params.blocks[layer - 1], cfg.heads, cfg.ln_eps);
        if (next_tap < cfg.tap_layers.size() && cfg.tap_layers[next_tap] == layer) {
            out.tapped_patches[static_cast<int>(layer)] = slice(x, 0, 1, N);
            ++next_tap;
        }
    }
    x = layer_norm(x, params.final_gain, params.final_bias, cfg.ln_eps);
    out.f_cls = slice(x, 0, 0, 1);
    out.f_patch_final = slice(x, 0, 1, N);
    out.f_prompts = n > 0 ? slice(x, 0, N + 1, n) : nullptr;
    return out;
}

// Runs the full stack. freeze_backbone is sticky: it toggles requires_grad
// on the backbone-owned parameter groups, so a later backward leaves them
// without gradient while prompts and heads still train. Not for concurrent
// use on shared parameters; batched training sets the flag once and calls
// forward_prepared.
inline ForwardOutputs forward(const std::vector<double>& pixels, const BackboneConfig& cfg, const ModelParams& params,
                              bool freeze_backbone = false) {
    params.set_backbone_trainable(!freeze_backbone);
    return forward_prepared(pixels, cfg, params);
}

// Scalar census per parameter group; heads are appended by the model layer.
inline std::map<std::string, long> param_census(const std::vector<ParamEntry>& entries) {
    std::map<std::string, long> census;
    for (const auto& e : entries) census[group_name(e.group)] += e.tensor->numel();
    return census;
}

}  // namespace pvit
