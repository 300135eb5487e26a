#include "deit/teacher.hpp"

#include "deit/ops.hpp"

namespace deit::teacher {

TeacherKind teacher_kind_from_string(std::string_view s) {
    if (s == "convnet") return TeacherKind::Convnet;
    if (s == "transformer") return TeacherKind::Transformer;
    throw ParamError("unknown teacher kind '" + std::string(s) + "' (convnet|transformer)");
}

TinyConvNet TinyConvNet::init(i64 num_classes, i64 resolution, Rng& rng) {
    if (resolution < 8) throw ParamError("TinyConvNet needs resolution >= 8");
    TinyConvNet net;
    net.resolution = resolution;
    net.num_classes = num_classes;
    const i64 chans[4] = {3, 16, 32, 64};
    const i64 strides[3] = {1, 2, 2};
    for (int s = 0; s < 3; ++s) {
        ConvStage stage;
        stage.in_ch = chans[s];
        stage.out_ch = chans[s + 1];
        stage.stride = strides[s];
        stage.weight = init_truncated_normal<float>({stage.in_ch * 9, stage.out_ch}, 0.05, 2.0, rng);
        stage.bias = Tensor<float>::zeros({stage.out_ch});
        net.stages.push_back(std::move(stage));
    }
    net.head.weight = init_truncated_normal<float>({chans[3], num_classes}, 0.05, 2.0, rng);
    net.head.bias = Tensor<float>::zeros({num_classes});
    return net;
}

Tensor<float> TinyConvNet::forward(const Tensor<float>& images, Tape<float>* tape) const {
    if (images.ndim() != 4 || images.dim(1) != 3) {
        throw ShapeError("TinyConvNet: expected [B,3,H,W], got " + shape_str(images.shape()));
    }
    const i64 b = images.dim(0);
    Tensor<float> x = images;
    i64 h = images.dim(2), w = images.dim(3);
    for (const auto& stage : stages) {
        // conv as im2col + matmul, 3x3 kernel, pad 1
        auto cols = ops::im2col(x, 3, stage.stride, 1, tape);          // [B,L,in*9]
        auto lin = ops::linear(cols, stage.weight, stage.bias, tape);  // [B,L,out]
        h = (h + 2 - 3) / stage.stride + 1;
        w = (w + 2 - 3) / stage.stride + 1;
        auto maps = ops::transpose(lin, 1, 2, tape);                   // [B,out,L]
        x = ops::gelu(ops::reshape(maps, {b, stage.out_ch, h, w}, tape), tape);
    }
    // global average pool via a constant averaging vector
    const i64 c_out = stages.back().out_ch;
    auto flat = ops::reshape(x, {b * c_out, h * w}, tape);
    Tensor<float> avg = Tensor<float>::full({h * w, 1}, 1.0f / static_cast<float>(h * w));
    auto pooled = ops::reshape(ops::matmul(flat, avg, tape), {b, c_out}, tape);
    return ops::linear(pooled, head.weight, head.bias, tape);
}

std::vector<model::NamedParam<float>> TinyConvNet::named_parameters() const {
    std::vector<model::NamedParam<float>> out;
    for (std::size_t i = 0; i < stages.size(); ++i) {
        out.push_back({"conv" + std::to_string(i) + ".weight", stages[i].weight});
        out.push_back({"conv" + std::to_string(i) + ".bias", stages[i].bias});
    }
    out.push_back({"head.weight", head.weight});
    out.push_back({"head.bias", head.bias});
    return out;
}

void TinyConvNet::set_requires_grad(bool flag) {
    for (auto& p : named_parameters()) p.tensor.set_requires_grad(flag);
}

TinyConvNet TinyConvNet::with_resolution(i64 new_resolution) const {
    if (new_resolution < 8) throw ParamError("TinyConvNet needs resolution >= 8");
    TinyConvNet net = *this;
    net.resolution = new_resolution;
    return net;
}

TinyConvNet TinyConvNet::clone() const {
    TinyConvNet net = *this;
    for (std::size_t i = 0; i < stages.size(); ++i) {
        net.stages[i].weight = stages[i].weight.clone();
        net.stages[i].bias = stages[i].bias.clone();
    }
    net.head.weight = head.weight.clone();
    net.head.bias = head.bias.clone();
    return net;
}

}  // namespace deit::teacher
