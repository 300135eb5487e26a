#include "deit/model.hpp"

#include <cmath>

namespace deit::model {

void DeiTConfig::validate() const {
    if (embed_dim < 1 || num_heads < 1 || num_layers < 1 || num_classes < 1) {
        throw ParamError("config: dimensions must be positive");
    }
    if (embed_dim % num_heads != 0) {
        throw ParamError("config: embed_dim " + std::to_string(embed_dim) +
                         " not divisible by num_heads " + std::to_string(num_heads));
    }
    if (image_size % patch_size != 0) {
        throw ParamError("config: image_size " + std::to_string(image_size) +
                         " not divisible by patch_size " + std::to_string(patch_size));
    }
    if (drop_path_rate < 0.0 || drop_path_rate >= 1.0) throw ParamError("config: drop_path_rate outside [0,1)");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ParamError("config: dropout_rate outside [0,1)");
    if (!(init_std > 0.0)) throw ParamError("config: init_std must be > 0");
}

DeiTConfig preset(std::string_view name) {
    DeiTConfig cfg;
    if (name == "deit-ti") {
        cfg.embed_dim = 192;
        cfg.num_heads = 3;
        cfg.num_layers = 12;
    } else if (name == "deit-s") {
        cfg.embed_dim = 384;
        cfg.num_heads = 6;
        cfg.num_layers = 12;
    } else if (name == "deit-b") {
        cfg.embed_dim = 768;
        cfg.num_heads = 12;
        cfg.num_layers = 12;
    } else if (name == "deit-micro") {
        cfg.embed_dim = 64;
        cfg.num_heads = 4;
        cfg.num_layers = 2;
        cfg.patch_size = 4;
        cfg.image_size = 32;
        cfg.num_classes = 10;
    } else {
        throw ParamError("unknown preset '" + std::string(name) +
                         "' (expected deit-ti, deit-s, deit-b or deit-micro)");
    }
    return cfg;
}

i64 param_count(const DeiTConfig& cfg) {
    cfg.validate();
    const i64 d = cfg.embed_dim;
    const i64 n = cfg.num_patches();
    const i64 c = cfg.num_classes;
    const i64 p = cfg.patch_size;
    const i64 heads = cfg.use_distill_token ? 2 : 1;

    const i64 patch = 3 * p * p * d + d;
    const i64 tokens = heads * d;  // class token (+ distillation token)
    const i64 pos = n * d;
    const i64 per_block = (2 * d)                // norm1
                          + (d * 3 * d + 3 * d)  // qkv
                          + (d * d + d)          // proj
                          + (2 * d)              // norm2
                          + (d * 4 * d + 4 * d)  // fc1
                          + (4 * d * d + d);     // fc2
    const i64 final_norm = 2 * d;
    const i64 cls_heads = heads * (d * c + c);
    return patch + tokens + pos + cfg.num_layers * per_block + final_norm + cls_heads;
}

namespace {

constexpr double kInitCutoffSigmas = 2.0;

template <typename T>
LinearT<T> init_linear(i64 in, i64 out, double std_dev, Rng& rng) {
    LinearT<T> l;
    l.weight = init_truncated_normal<T>({in, out}, std_dev, kInitCutoffSigmas, rng);
    l.bias = Tensor<T>::zeros({out});
    return l;
}

template <typename T>
LayerNormParamsT<T> init_layernorm(i64 dim) {
    return {Tensor<T>::full({dim}, T(1)), Tensor<T>::zeros({dim})};
}

template <typename T>
Tensor<T> linear_apply(const Tensor<T>& x, const LinearT<T>& l, Tape<T>* tape) {
    return ops::linear(x, l.weight, l.bias, tape);
}

// Per-sample stochastic depth: zero the residual branch with probability p
// and rescale survivors by 1/(1-p). Identity outside training.
template <typename T>
Tensor<T> drop_path(const Tensor<T>& h, double p, const ForwardOptions& opts, Tape<T>* tape) {
    if (!opts.training || p <= 0.0) return h;
    if (opts.rng == nullptr) throw ContractError("training forward with stochastic depth needs an rng");
    const i64 b = h.dim(0);
    Tensor<T> mask({b, 1, 1});
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    for (i64 i = 0; i < b; ++i) mask[i] = opts.rng->bernoulli(p) ? T(0) : keep_scale;
    return ops::mul(h, mask, tape);
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, const ForwardOptions& opts, Tape<T>* tape) {
    if (!opts.training || rate <= 0.0) return x;
    if (opts.rng == nullptr) throw ContractError("training forward with dropout needs an rng");
    Tensor<T> mask(x.shape());
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    for (i64 i = 0; i < x.numel(); ++i) mask[i] = opts.rng->bernoulli(rate) ? T(0) : keep_scale;
    return ops::mul(x, mask, tape);
}

}  // namespace

template <typename T>
Tensor<T> patch_embed(const DeiTConfig& cfg, const LinearT<T>& proj, const Tensor<T>& images,
                      Tape<T>* tape) {
    const i64 r = cfg.image_size;
    if (images.ndim() != 4 || images.dim(1) != 3 || images.dim(2) != r || images.dim(3) != r) {
        throw ShapeError("patch_embed: images " + shape_str(images.shape()) +
                         " do not match model resolution [" + std::to_string(r) + "x" + std::to_string(r) +
                         "]; resolution changes go through the finetune path");
    }
    auto cols = ops::im2col(images, cfg.patch_size, cfg.patch_size, 0, tape);
    return linear_apply(cols, proj, tape);
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, Tape<T>* tape) {
    if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2) {
        throw ShapeError("attention: expected 2-D Q/K/V");
    }
    const i64 d = q.dim(1);
    if (k.dim(1) != d) {
        throw ShapeError("attention: Q " + shape_str(q.shape()) + " and K " + shape_str(k.shape()) +
                         " inner dims differ");
    }
    if (v.dim(0) != k.dim(0)) {
        throw ShapeError("attention: K " + shape_str(k.shape()) + " and V " + shape_str(v.shape()) +
                         " row counts differ");
    }
    auto scores = ops::scale(ops::matmul(q, ops::transpose(k, 0, 1, tape), tape),
                             static_cast<T>(1.0 / std::sqrt(double(d))), tape);
    return ops::matmul(ops::softmax_rows(scores, tape), v, tape);
}

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& x, const LinearT<T>& qkv, const LinearT<T>& proj,
                               i64 num_heads, Tape<T>* tape) {
    const bool batched = x.ndim() == 3;
    if (!batched && x.ndim() != 2) throw ShapeError("multi_head_attention: expected [S,D] or [B,S,D]");
    Tensor<T> xin = batched ? x : ops::reshape(x, {1, x.dim(0), x.dim(1)}, tape);
    const i64 b = xin.dim(0), s = xin.dim(1), d_model = xin.dim(2);
    if (d_model % num_heads != 0) throw ShapeError("multi_head_attention: D not divisible by heads");
    const i64 hd = d_model / num_heads;

    auto fused = linear_apply(xin, qkv, tape);  // [B,S,3D]
    auto split_heads = [&](Tensor<T> t) {
        t = ops::reshape(t, {b, s, num_heads, hd}, tape);
        t = ops::transpose(t, 1, 2, tape);  // [B,h,S,hd]
        return ops::reshape(t, {b * num_heads, s, hd}, tape);
    };
    auto q = split_heads(ops::slice(fused, 2, 0, d_model, tape));
    auto k = split_heads(ops::slice(fused, 2, d_model, d_model, tape));
    auto v = split_heads(ops::slice(fused, 2, 2 * d_model, d_model, tape));

    // scaling Q first touches [B*h,S,d] instead of the [B*h,S,S] scores
    q = ops::scale(q, static_cast<T>(1.0 / std::sqrt(double(hd))), tape);
    auto scores = ops::matmul(q, ops::transpose(k, 1, 2, tape), tape);
    auto ctx = ops::matmul(ops::softmax_rows(scores, tape), v, tape);  // [B*h,S,hd]
    ctx = ops::reshape(ctx, {b, num_heads, s, hd}, tape);
    ctx = ops::transpose(ctx, 1, 2, tape);
    ctx = ops::reshape(ctx, {b, s, d_model}, tape);
    auto out = linear_apply(ctx, proj, tape);
    return batched ? out : ops::reshape(out, {s, d_model}, tape);
}

template <typename T>
DeiTModelT<T> DeiTModelT<T>::init(const DeiTConfig& cfg, Rng& rng) {
    cfg.validate();
    DeiTModelT<T> m;
    m.config = cfg;
    const i64 d = cfg.embed_dim;
    const double std_dev = cfg.init_std;

    m.patch_embed = init_linear<T>(3 * cfg.patch_size * cfg.patch_size, d, std_dev, rng);
    m.cls_token = init_truncated_normal<T>({1, d}, std_dev, kInitCutoffSigmas, rng);
    if (cfg.use_distill_token) {
        m.dist_token = init_truncated_normal<T>({1, d}, std_dev, kInitCutoffSigmas, rng);
    }
    m.pos_embed = init_truncated_normal<T>({cfg.num_patches(), d}, std_dev, kInitCutoffSigmas, rng);
    m.blocks.resize(static_cast<std::size_t>(cfg.num_layers));
    for (auto& blk : m.blocks) {
        blk.norm1 = init_layernorm<T>(d);
        blk.qkv = init_linear<T>(d, 3 * d, std_dev, rng);
        blk.proj = init_linear<T>(d, d, std_dev, rng);
        blk.norm2 = init_layernorm<T>(d);
        blk.fc1 = init_linear<T>(d, 4 * d, std_dev, rng);
        blk.fc2 = init_linear<T>(4 * d, d, std_dev, rng);
    }
    m.norm = init_layernorm<T>(d);
    m.head = init_linear<T>(d, cfg.num_classes, std_dev, rng);
    if (cfg.use_distill_token) {
        m.head_dist = init_linear<T>(d, cfg.num_classes, std_dev, rng);
    }
    return m;
}

template <typename T>
ForwardResult<T> DeiTModelT<T>::forward(const Tensor<T>& images, const ForwardOptions& opts,
                                        Tape<T>* tape) const {
    const i64 r = config.image_size;
    if (images.ndim() != 4 || images.dim(1) != 3 || images.dim(2) != r || images.dim(3) != r) {
        throw ShapeError("forward: images " + shape_str(images.shape()) + " do not match model resolution [" +
                         std::to_string(r) + "x" + std::to_string(r) +
                         "]; resolution changes go through the finetune path");
    }
    const i64 b = images.dim(0);
    const i64 d = config.embed_dim;

    auto patches = model::patch_embed(config, patch_embed, images, tape);
    patches = ops::add(patches, pos_embed, tape);  // positions attach to patch tokens only

    std::vector<Tensor<T>> parts;
    parts.push_back(ops::broadcast_to(ops::reshape(cls_token, {1, 1, d}, tape), {b, 1, d}, tape));
    if (config.use_distill_token) {
        parts.push_back(ops::broadcast_to(ops::reshape(dist_token, {1, 1, d}, tape), {b, 1, d}, tape));
    }
    parts.push_back(patches);
    auto x = ops::concat(parts, 1, tape);  // [B,S,D]
    x = dropout(x, config.dropout_rate, opts, tape);

    ForwardResult<T> result;
    for (const auto& blk : blocks) {
        auto attn_in = ops::layernorm(x, blk.norm1.weight, blk.norm1.bias, tape);
        auto attn_out = multi_head_attention(attn_in, blk.qkv, blk.proj, config.num_heads, tape);
        x = ops::add(x, drop_path(attn_out, config.drop_path_rate, opts, tape), tape);

        auto ffn_in = ops::layernorm(x, blk.norm2.weight, blk.norm2.bias, tape);
        auto hidden = ops::gelu(linear_apply(ffn_in, blk.fc1, tape), tape);
        hidden = dropout(hidden, config.dropout_rate, opts, tape);
        auto ffn_out = linear_apply(hidden, blk.fc2, tape);
        x = ops::add(x, drop_path(ffn_out, config.drop_path_rate, opts, tape), tape);

        if (opts.collect_block_tokens) result.block_tokens.push_back(x);
    }

    x = ops::layernorm(x, norm.weight, norm.bias, tape);
    result.tokens_out = x;

    auto read_token = [&](i64 position) {
        return ops::reshape(ops::slice(x, 1, position, 1, tape), {b, d}, tape);
    };
    result.class_logits = linear_apply(read_token(0), head, tape);
    if (config.use_distill_token) {
        result.distill_logits = linear_apply(read_token(1), head_dist, tape);
    }
    return result;
}

template <typename T>
std::vector<NamedParam<T>> DeiTModelT<T>::named_parameters() const {
    std::vector<NamedParam<T>> out;
    auto push = [&](const std::string& name, const Tensor<T>& t) { out.push_back({name, t}); };
    push("patch_embed.weight", patch_embed.weight);
    push("patch_embed.bias", patch_embed.bias);
    push("cls_token", cls_token);
    if (config.use_distill_token) push("dist_token", dist_token);
    push("pos_embed", pos_embed);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string pre = "blocks." + std::to_string(i) + ".";
        push(pre + "norm1.weight", blocks[i].norm1.weight);
        push(pre + "norm1.bias", blocks[i].norm1.bias);
        push(pre + "attn.qkv.weight", blocks[i].qkv.weight);
        push(pre + "attn.qkv.bias", blocks[i].qkv.bias);
        push(pre + "attn.proj.weight", blocks[i].proj.weight);
        push(pre + "attn.proj.bias", blocks[i].proj.bias);
        push(pre + "norm2.weight", blocks[i].norm2.weight);
        push(pre + "norm2.bias", blocks[i].norm2.bias);
        push(pre + "mlp.fc1.weight", blocks[i].fc1.weight);
        push(pre + "mlp.fc1.bias", blocks[i].fc1.bias);
        push(pre + "mlp.fc2.weight", blocks[i].fc2.weight);
        push(pre + "mlp.fc2.bias", blocks[i].fc2.bias);
    }
    push("norm.weight", norm.weight);
    push("norm.bias", norm.bias);
    push("head.weight", head.weight);
    push("head.bias", head.bias);
    if (config.use_distill_token) {
        push("head_dist.weight", head_dist.weight);
        push("head_dist.bias", head_dist.bias);
    }
    return out;
}

template <typename T>
void DeiTModelT<T>::set_requires_grad(bool flag) {
    for (auto& p : named_parameters()) p.tensor.set_requires_grad(flag);
}

template <typename T>
i64 DeiTModelT<T>::num_params() const {
    i64 n = 0;
    for (const auto& p : named_parameters()) n += p.tensor.numel();
    return n;
}

template <typename T>
DeiTModelT<T> DeiTModelT<T>::clone() const {
    DeiTModelT<T> m;
    m.config = config;
    m.patch_embed = {patch_embed.weight.clone(), patch_embed.bias.clone()};
    m.cls_token = cls_token.clone();
    if (config.use_distill_token) m.dist_token = dist_token.clone();
    m.pos_embed = pos_embed.clone();
    m.blocks.reserve(blocks.size());
    for (const auto& b : blocks) {
        m.blocks.push_back({{b.norm1.weight.clone(), b.norm1.bias.clone()},
                            {b.qkv.weight.clone(), b.qkv.bias.clone()},
                            {b.proj.weight.clone(), b.proj.bias.clone()},
                            {b.norm2.weight.clone(), b.norm2.bias.clone()},
                            {b.fc1.weight.clone(), b.fc1.bias.clone()},
                            {b.fc2.weight.clone(), b.fc2.bias.clone()}});
    }
    m.norm = {norm.weight.clone(), norm.bias.clone()};
    m.head = {head.weight.clone(), head.bias.clone()};
    if (config.use_distill_token) m.head_dist = {head_dist.weight.clone(), head_dist.bias.clone()};
    return m;
}

#define DEIT_INSTANTIATE_MODEL(T)                                                                    \
    template Tensor<T> patch_embed<T>(const DeiTConfig&, const LinearT<T>&, const Tensor<T>&, Tape<T>*); \
    template Tensor<T> attention<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tape<T>*); \
    template Tensor<T> multi_head_attention<T>(const Tensor<T>&, const LinearT<T>&, const LinearT<T>&, \
                                               i64, Tape<T>*);                                       \
    template struct DeiTModelT<T>;

DEIT_INSTANTIATE_MODEL(float)
DEIT_INSTANTIATE_MODEL(double)

#undef DEIT_INSTANTIATE_MODEL

}  // namespace deit::model
