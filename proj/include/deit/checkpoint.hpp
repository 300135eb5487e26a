#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "deit/model.hpp"
#include "deit/tensor.hpp"

namespace deit::checkpoint {

// On-disk layout (all integers little-endian):
//   "DEIT" magic, u32 format version,
//   u32 config length + UTF-8 JSON,
//   u32 model tensor count + tensors,
//   u8 has_optimizer [u64 step, u32 count + tensors],
//   u8 has_ema       [u32 count + tensors],
//   u32 CRC32 (zlib polynomial) over every preceding byte.
// Tensor record: u32 name length, name bytes, u32 ndim, u64 dims,
//   u8 dtype tag (0 = f32, 1 = f64), raw little-endian payload.
inline constexpr std::uint32_t kFormatVersion = 1;

struct Checkpoint {
    nlohmann::json config;
    std::vector<model::NamedParam<float>> tensors;
    bool has_optimizer = false;
    i64 optimizer_step = 0;
    std::vector<model::NamedParam<float>> optimizer_tensors;
    bool has_ema = false;
    std::vector<model::NamedParam<float>> ema_tensors;
};

// Atomic write: temp file in the same directory, then rename.
void save(const std::string& path, const Checkpoint& ckpt);

// Verifies the CRC before parsing. CRC mismatch -> CorruptionError; version
// ahead of this reader -> VersionError; framing problems -> FormatError.
Checkpoint load(const std::string& path);

// Copies loaded tensors into same-named destination parameters. Shape
// mismatches name the first offending tensor; missing or surplus names fail.
void load_into(std::vector<model::NamedParam<float>>& params,
               const std::vector<model::NamedParam<float>>& loaded);

}  // namespace deit::checkpoint
