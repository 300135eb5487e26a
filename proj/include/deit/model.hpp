#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "deit/ops.hpp"
#include "deit/rng.hpp"
#include "deit/tensor.hpp"

namespace deit::model {

// Architecture hyper-parameters. Head dim stays embed_dim/num_heads; the
// named presets keep it at 64 except the desk-scale micro variant.
struct DeiTConfig {
    i64 embed_dim = 192;
    i64 num_heads = 3;
    i64 num_layers = 12;
    i64 patch_size = 16;
    i64 image_size = 224;
    i64 num_classes = 1000;
    double drop_path_rate = 0.0;
    double dropout_rate = 0.0;  // excluded from the default recipe, kept for ablations
    bool use_distill_token = false;
    double init_std = 0.02;

    i64 head_dim() const { return embed_dim / num_heads; }
    i64 grid_side() const { return image_size / patch_size; }
    i64 num_patches() const { return grid_side() * grid_side(); }
    i64 seq_len() const { return num_patches() + 1 + (use_distill_token ? 1 : 0); }

    void validate() const;
};

// deit-ti / deit-s / deit-b / deit-micro
DeiTConfig preset(std::string_view name);

// Exact scalar parameter count for a config (closed form).
i64 param_count(const DeiTConfig& cfg);

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T> tensor;  // shares storage with the model
};

template <typename T>
struct LinearT {
    Tensor<T> weight;  // [in, out]
    Tensor<T> bias;    // [out]
};

template <typename T>
struct LayerNormParamsT {
    Tensor<T> weight;
    Tensor<T> bias;
};

template <typename T>
struct BlockT {
    LayerNormParamsT<T> norm1;
    LinearT<T> qkv;   // [D, 3D]
    LinearT<T> proj;  // [D, D]
    LayerNormParamsT<T> norm2;
    LinearT<T> fc1;  // [D, 4D]
    LinearT<T> fc2;  // [4D, D]
};

struct ForwardOptions {
    bool training = false;
    Rng* rng = nullptr;  // required when training with stochastic depth/dropout
    bool collect_block_tokens = false;
};

template <typename T>
struct ForwardResult {
    Tensor<T> class_logits;    // [B, C]
    Tensor<T> distill_logits;  // [B, C]; undefined when the model has no distillation token
    Tensor<T> tokens_out;      // [B, S, D] after the final layer norm
    std::vector<Tensor<T>> block_tokens;  // per-block outputs when requested
};

// Non-overlapping patch extraction + shared linear projection:
// [B,3,r,r] -> [B,N,D], patches in row-major scan order.
template <typename T>
Tensor<T> patch_embed(const DeiTConfig& cfg, const LinearT<T>& proj, const Tensor<T>& images,
                      Tape<T>* tape);

// Scaled dot-product attention: softmax(Q K^T / sqrt(d)) V for 2-D operands.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, Tape<T>* tape);

// MSA over [S,D] or [B,S,D]: per-head attention across all tokens, heads
// concatenated and reprojected.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& x, const LinearT<T>& qkv, const LinearT<T>& proj,
                               i64 num_heads, Tape<T>* tape);

template <typename T>
struct DeiTModelT {
    DeiTConfig config;
    LinearT<T> patch_embed;  // [3 p^2, D]
    Tensor<T> cls_token;     // [1, D]
    Tensor<T> dist_token;    // [1, D], undefined when unused
    Tensor<T> pos_embed;     // [N, D], patch positions only
    std::vector<BlockT<T>> blocks;
    LayerNormParamsT<T> norm;
    LinearT<T> head;
    LinearT<T> head_dist;  // undefined when unused

    static DeiTModelT init(const DeiTConfig& cfg, Rng& rng);

    ForwardResult<T> forward(const Tensor<T>& images, const ForwardOptions& opts = {},
                             Tape<T>* tape = nullptr) const;

    std::vector<NamedParam<T>> named_parameters() const;
    void set_requires_grad(bool flag);
    i64 num_params() const;

    DeiTModelT clone() const;
};

using DeiTModel = DeiTModelT<float>;

}  // namespace deit::model
