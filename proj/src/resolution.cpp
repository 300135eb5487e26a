#include "deit/resolution.hpp"

#include <algorithm>
#include <cmath>

namespace deit::resolution {

namespace {

// Cubic convolution kernel, a = -0.5 (Catmull-Rom).
double cubic_weight(double x) {
    constexpr double a = -0.5;
    x = std::abs(x);
    if (x <= 1.0) return (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0;
    if (x < 2.0) return a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a;
    return 0.0;
}

template <typename T>
void validate_grid(const Tensor<T>& pos, i64 new_side) {
    if (pos.ndim() != 2) throw ShapeError("interpolate: expected [g^2, D], got " + shape_str(pos.shape()));
    const i64 n = pos.dim(0);
    const i64 g = static_cast<i64>(std::llround(std::sqrt(double(n))));
    if (g * g != n) throw ShapeError("interpolate: " + std::to_string(n) + " rows is not a square grid");
    if (g < 2) throw ParamError("interpolate: source grid side must be >= 2, got " + std::to_string(g));
    if (new_side < 1) throw ParamError("interpolate: target side must be >= 1");
}

// Shared driver: `taps` is the kernel support radius (2 for bicubic, 1 for
// bilinear), `weight` maps a source-space distance to its coefficient.
template <typename T, typename WeightFn>
Tensor<T> resample_grid(const Tensor<T>& pos, i64 new_side, int taps, WeightFn weight) {
    validate_grid(pos, new_side);
    const i64 g = static_cast<i64>(std::llround(std::sqrt(double(pos.dim(0)))));
    const i64 big_g = new_side;
    const i64 d = pos.dim(1);
    const double scale = double(g) / double(big_g);

    Tensor<T> out({big_g * big_g, d});
    std::vector<double> wy(static_cast<std::size_t>(2 * taps)), wx(static_cast<std::size_t>(2 * taps));
    for (i64 oy = 0; oy < big_g; ++oy) {
        const double sy = (double(oy) + 0.5) * scale - 0.5;
        const i64 y0 = static_cast<i64>(std::floor(sy));
        for (int t = 0; t < 2 * taps; ++t) {
            wy[static_cast<std::size_t>(t)] = weight(sy - double(y0 - taps + 1 + t));
        }
        for (i64 ox = 0; ox < big_g; ++ox) {
            const double sx = (double(ox) + 0.5) * scale - 0.5;
            const i64 x0 = static_cast<i64>(std::floor(sx));
            for (int t = 0; t < 2 * taps; ++t) {
                wx[static_cast<std::size_t>(t)] = weight(sx - double(x0 - taps + 1 + t));
            }
            T* dst = out.data() + (oy * big_g + ox) * d;
            for (int ty = 0; ty < 2 * taps; ++ty) {
                const i64 yc = std::clamp<i64>(y0 - taps + 1 + ty, 0, g - 1);
                for (int tx = 0; tx < 2 * taps; ++tx) {
                    const i64 xc = std::clamp<i64>(x0 - taps + 1 + tx, 0, g - 1);
                    const double w = wy[static_cast<std::size_t>(ty)] * wx[static_cast<std::size_t>(tx)];
                    if (w == 0.0) continue;
                    const T* src = pos.data() + (yc * g + xc) * d;
                    for (i64 c = 0; c < d; ++c) {
                        dst[c] = static_cast<T>(double(dst[c]) + w * double(src[c]));
                    }
                }
            }
        }
    }
    return out;
}

}  // namespace

template <typename T>
Tensor<T> interpolate_pos_embed(const Tensor<T>& pos, i64 new_side) {
    return resample_grid(pos, new_side, 2, cubic_weight);
}

template <typename T>
Tensor<T> interpolate_pos_embed_bilinear(const Tensor<T>& pos, i64 new_side) {
    return resample_grid(pos, new_side, 1, [](double x) {
        x = std::abs(x);
        return x < 1.0 ? 1.0 - x : 0.0;
    });
}

template <typename T>
void adapt_to_resolution(model::DeiTModelT<T>& m, i64 new_resolution) {
    if (new_resolution < 1 || new_resolution % m.config.patch_size != 0) {
        throw ParamError("resolution " + std::to_string(new_resolution) + " is not divisible by patch size " +
                         std::to_string(m.config.patch_size));
    }
    if (new_resolution == m.config.image_size) return;
    const i64 new_side = new_resolution / m.config.patch_size;
    const bool was_grad = m.pos_embed.requires_grad();
    Tensor<T> interpolated = interpolate_pos_embed(m.pos_embed, new_side);
    interpolated.set_requires_grad(was_grad);
    m.pos_embed = interpolated;
    m.config.image_size = new_resolution;
}

#define DEIT_INSTANTIATE_RESOLUTION(T)                                      \
    template Tensor<T> interpolate_pos_embed<T>(const Tensor<T>&, i64);     \
    template Tensor<T> interpolate_pos_embed_bilinear<T>(const Tensor<T>&, i64); \
    template void adapt_to_resolution<T>(model::DeiTModelT<T>&, i64);

DEIT_INSTANTIATE_RESOLUTION(float)
DEIT_INSTANTIATE_RESOLUTION(double)

#undef DEIT_INSTANTIATE_RESOLUTION

}  // namespace deit::resolution
