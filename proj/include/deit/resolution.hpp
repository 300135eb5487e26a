#pragma once

#include "deit/model.hpp"
#include "deit/tensor.hpp"

namespace deit::resolution {

// Resamples a row-major g x g grid of D-dim positional embeddings to a
// G x G grid, one channel at a time. Bicubic uses the Catmull-Rom kernel
// (a = -0.5) with edge clamping; it approximately preserves vector norms,
// which plain bilinear does not.
template <typename T>
Tensor<T> interpolate_pos_embed(const Tensor<T>& pos, i64 new_side);

// Bilinear counterpart, kept as the comparison route for the norm property.
template <typename T>
Tensor<T> interpolate_pos_embed_bilinear(const Tensor<T>& pos, i64 new_side);

// Interpolates the positional embeddings and rebinds the model to the new
// image size. Class/distillation tokens carry no positional embedding and are
// untouched; every other parameter is carried over unchanged.
template <typename T>
void adapt_to_resolution(model::DeiTModelT<T>& m, i64 new_resolution);

}  // namespace deit::resolution
