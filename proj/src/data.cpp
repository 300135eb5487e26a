#include "deit/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>

#include "deit/error.hpp"

namespace deit::data {

namespace fs = std::filesystem;

Dataset Dataset::take(i64 n) const {
    if (n < 1 || n > count) throw ParamError("take: n outside [1,count]");
    Dataset out = *this;
    out.count = n;
    out.images.resize(static_cast<std::size_t>(n * image_numel()));
    out.labels.resize(static_cast<std::size_t>(n));
    return out;
}

Dataset Dataset::slice(i64 start, i64 n) const {
    if (start < 0 || n < 1 || start + n > count) throw ParamError("slice: range outside the dataset");
    Dataset out;
    out.count = n;
    out.resolution = resolution;
    out.num_classes = num_classes;
    out.channel_mean = channel_mean;
    out.channel_std = channel_std;
    out.images.assign(images.begin() + static_cast<std::ptrdiff_t>(start * image_numel()),
                      images.begin() + static_cast<std::ptrdiff_t>((start + n) * image_numel()));
    out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(start),
                      labels.begin() + static_cast<std::ptrdiff_t>(start + n));
    return out;
}

void Dataset::use_stats_of(const Dataset& other) {
    channel_mean = other.channel_mean;
    channel_std = other.channel_std;
}

void compute_channel_stats(Dataset& ds) {
    const i64 plane = ds.resolution * ds.resolution;
    for (int c = 0; c < 3; ++c) {
        double sum = 0.0, sq = 0.0;
        for (i64 i = 0; i < ds.count; ++i) {
            const float* p = ds.image(i) + c * plane;
            for (i64 j = 0; j < plane; ++j) {
                sum += p[j];
                sq += double(p[j]) * double(p[j]);
            }
        }
        const double n = double(ds.count * plane);
        const double mean = sum / n;
        const double var = std::max(sq / n - mean * mean, 1e-12);
        ds.channel_mean[c] = static_cast<float>(mean);
        ds.channel_std[c] = static_cast<float>(std::sqrt(var));
    }
}

void normalize_image(float* img, i64 resolution, const std::array<float, 3>& mean,
                     const std::array<float, 3>& stddev) {
    const i64 plane = resolution * resolution;
    for (int c = 0; c < 3; ++c) {
        const float m = mean[c], inv = 1.0f / stddev[c];
        for (i64 j = 0; j < plane; ++j) img[c * plane + j] = (img[c * plane + j] - m) * inv;
    }
}

void denormalize_image(float* img, i64 resolution, const std::array<float, 3>& mean,
                       const std::array<float, 3>& stddev) {
    const i64 plane = resolution * resolution;
    for (int c = 0; c < 3; ++c) {
        const float m = mean[c], s = stddev[c];
        for (i64 j = 0; j < plane; ++j) img[c * plane + j] = img[c * plane + j] * s + m;
    }
}

namespace {

constexpr i64 kCifarRecordBytes = 3073;  // label + 3*32*32
constexpr i64 kCifarPixels = 3072;
constexpr i64 kCifarClasses = 10;

void load_cifar_file_into(const std::string& path, Dataset& ds) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    in.seekg(0, std::ios::end);
    const i64 size = static_cast<i64>(in.tellg());
    in.seekg(0);
    if (size % kCifarRecordBytes != 0) {
        const i64 offset = (size / kCifarRecordBytes) * kCifarRecordBytes;
        throw FormatError("'" + path + "': truncated record at byte offset " + std::to_string(offset) +
                          " (file size " + std::to_string(size) + " is not a multiple of 3073)");
    }
    const i64 records = size / kCifarRecordBytes;
    std::array<unsigned char, kCifarRecordBytes> record;
    ds.images.reserve(ds.images.size() + static_cast<std::size_t>(records * kCifarPixels));
    ds.labels.reserve(ds.labels.size() + static_cast<std::size_t>(records));
    for (i64 r = 0; r < records; ++r) {
        if (!in.read(reinterpret_cast<char*>(record.data()), kCifarRecordBytes)) {
            throw FormatError("'" + path + "': read failed at byte offset " +
                              std::to_string(r * kCifarRecordBytes));
        }
        const i64 label = record[0];
        if (label >= kCifarClasses) {
            throw FormatError("'" + path + "': label byte " + std::to_string(label) + " at offset " +
                              std::to_string(r * kCifarRecordBytes) + " is >= 10");
        }
        ds.labels.push_back(label);
        for (i64 j = 0; j < kCifarPixels; ++j) {
            ds.images.push_back(static_cast<float>(record[1 + j]) / 255.0f);
        }
    }
    ds.count += records;
}

}  // namespace

Dataset load_cifar10(const std::string& path) {
    Dataset ds;
    ds.resolution = 32;
    ds.num_classes = kCifarClasses;

    if (fs::is_directory(path)) {
        std::vector<std::string> files;
        for (const auto& e : fs::directory_iterator(path)) {
            const std::string name = e.path().filename().string();
            if (name.rfind("data_batch_", 0) == 0 && name.ends_with(".bin")) {
                files.push_back(e.path().string());
            }
        }
        if (files.empty()) throw IoError("no data_batch_*.bin files under '" + path + "'");
        std::sort(files.begin(), files.end());
        for (const auto& f : files) load_cifar_file_into(f, ds);
    } else if (fs::exists(path)) {
        load_cifar_file_into(path, ds);
    } else {
        throw IoError("dataset path '" + path + "' does not exist");
    }
    compute_channel_stats(ds);
    return ds;
}

SynthKind synth_kind_from_string(std::string_view s) {
    if (s == "blobs" || s == "gaussian-blobs") return SynthKind::GaussianBlobs;
    if (s == "stripes" || s == "striped-patterns") return SynthKind::StripedPatterns;
    throw ParamError("unknown synthetic dataset kind '" + std::string(s) + "' (blobs|stripes)");
}

Dataset synth_dataset(SynthKind kind, i64 n, i64 num_classes, i64 resolution, std::uint64_t seed) {
    if (num_classes < 2) throw ParamError("synth_dataset: need at least 2 classes");
    if (n < num_classes) throw ParamError("synth_dataset: n must be >= num_classes");
    if (resolution < 4) throw ParamError("synth_dataset: resolution must be >= 4");

    Dataset ds;
    ds.count = n;
    ds.resolution = resolution;
    ds.num_classes = num_classes;
    const i64 numel = ds.image_numel();
    ds.images.resize(static_cast<std::size_t>(n * numel));
    ds.labels.resize(static_cast<std::size_t>(n));

    Rng rng(seed);

    if (kind == SynthKind::GaussianBlobs) {
        // Per-class centers are constant color fields: geometric transforms
        // (flip/translate/rotate) leave them intact and photometric jitter
        // only scales them, so the task survives the full augmentation
        // pipeline. Sigma comes from the realized minimum pairwise distance
        // so classes stay >= 6 sigma apart in pixel space.
        std::vector<std::array<double, 3>> colors(static_cast<std::size_t>(num_classes));
        for (auto& c : colors) {
            for (auto& v : c) v = rng.uniform(0.25, 0.75);
        }
        const i64 plane = resolution * resolution;
        double min_dist = 1e30;
        for (i64 a = 0; a < num_classes; ++a) {
            for (i64 b = a + 1; b < num_classes; ++b) {
                double d2 = 0.0;
                for (int ch = 0; ch < 3; ++ch) {
                    const double d = colors[static_cast<std::size_t>(a)][static_cast<std::size_t>(ch)] -
                                     colors[static_cast<std::size_t>(b)][static_cast<std::size_t>(ch)];
                    d2 += d * d * double(plane);
                }
                min_dist = std::min(min_dist, std::sqrt(d2));
            }
        }
        const double sigma = std::min(min_dist / 6.0, 0.08);
        for (i64 i = 0; i < n; ++i) {
            const i64 label = i % num_classes;
            ds.labels[static_cast<std::size_t>(i)] = label;
            float* img = ds.image(i);
            const auto& c = colors[static_cast<std::size_t>(label)];
            for (int ch = 0; ch < 3; ++ch) {
                for (i64 j = 0; j < plane; ++j) {
                    img[ch * plane + j] = static_cast<float>(
                        std::clamp(c[static_cast<std::size_t>(ch)] + sigma * rng.normal(), 0.0, 1.0));
                }
            }
        }
    } else {
        // Striped patterns: orientation and frequency identify the class,
        // phase and noise vary per sample.
        const i64 plane = resolution * resolution;
        for (i64 i = 0; i < n; ++i) {
            const i64 label = i % num_classes;
            ds.labels[static_cast<std::size_t>(i)] = label;
            const double theta = M_PI * double(label) / double(num_classes);
            const double freq = 2.0 + double(label % 4);
            const double phase = rng.uniform(0.0, 2.0 * M_PI);
            const double ct = std::cos(theta), st = std::sin(theta);
            float* img = ds.image(i);
            for (i64 y = 0; y < resolution; ++y) {
                for (i64 x = 0; x < resolution; ++x) {
                    const double u = (double(x) * ct + double(y) * st) / double(resolution);
                    const double base = 0.5 + 0.35 * std::sin(2.0 * M_PI * freq * u + phase);
                    for (int c = 0; c < 3; ++c) {
                        const double chan = base * (1.0 + 0.08 * c) + 0.08 * rng.normal();
                        img[c * plane + y * resolution + x] =
                            static_cast<float>(std::clamp(chan, 0.0, 1.0));
                    }
                }
            }
        }
    }

    // Shuffle sample order so labels are not grouped.
    std::vector<i64> order(static_cast<std::size_t>(n));
    for (i64 i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    rng.shuffle(order);
    Dataset shuffled = ds;
    for (i64 i = 0; i < n; ++i) {
        const i64 src = order[static_cast<std::size_t>(i)];
        shuffled.labels[static_cast<std::size_t>(i)] = ds.labels[static_cast<std::size_t>(src)];
        std::copy(ds.image(src), ds.image(src) + numel, shuffled.image(i));
    }
    compute_channel_stats(shuffled);
    return shuffled;
}

void export_cifar_format(const Dataset& ds, const std::string& path) {
    if (ds.resolution != 32) throw ParamError("export_cifar_format: record layout requires resolution 32");
    if (ds.num_classes > 256) throw ParamError("export_cifar_format: labels must fit one byte");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");
    std::vector<unsigned char> record(kCifarRecordBytes);
    for (i64 i = 0; i < ds.count; ++i) {
        record[0] = static_cast<unsigned char>(ds.labels[static_cast<std::size_t>(i)]);
        const float* img = ds.image(i);
        for (i64 j = 0; j < kCifarPixels; ++j) {
            const float v = std::clamp(img[j], 0.0f, 1.0f);
            record[static_cast<std::size_t>(1 + j)] =
                static_cast<unsigned char>(std::lround(v * 255.0f));
        }
        out.write(reinterpret_cast<const char*>(record.data()), kCifarRecordBytes);
    }
    if (!out) throw IoError("short write to '" + path + "'");
}

namespace {

void resize_plane_bilinear(const float* src, i64 r0, float* dst, i64 r1) {
    const double scale = double(r0) / double(r1);
    for (i64 y = 0; y < r1; ++y) {
        const double sy = (double(y) + 0.5) * scale - 0.5;
        const i64 y0 = static_cast<i64>(std::floor(sy));
        const double fy = sy - double(y0);
        const i64 ya = std::clamp<i64>(y0, 0, r0 - 1);
        const i64 yb = std::clamp<i64>(y0 + 1, 0, r0 - 1);
        for (i64 x = 0; x < r1; ++x) {
            const double sx = (double(x) + 0.5) * scale - 0.5;
            const i64 x0 = static_cast<i64>(std::floor(sx));
            const double fx = sx - double(x0);
            const i64 xa = std::clamp<i64>(x0, 0, r0 - 1);
            const i64 xb = std::clamp<i64>(x0 + 1, 0, r0 - 1);
            const double top = (1.0 - fx) * src[ya * r0 + xa] + fx * src[ya * r0 + xb];
            const double bot = (1.0 - fx) * src[yb * r0 + xa] + fx * src[yb * r0 + xb];
            dst[y * r1 + x] = static_cast<float>((1.0 - fy) * top + fy * bot);
        }
    }
}

}  // namespace

void rescale_dataset(Dataset& ds, i64 new_resolution) {
    if (new_resolution < 4) throw ParamError("rescale: resolution must be >= 4");
    if (new_resolution == ds.resolution) return;
    const i64 r0 = ds.resolution, r1 = new_resolution;
    std::vector<float> out(static_cast<std::size_t>(ds.count * 3 * r1 * r1));
    for (i64 i = 0; i < ds.count; ++i) {
        for (int c = 0; c < 3; ++c) {
            resize_plane_bilinear(ds.image(i) + c * r0 * r0, r0,
                                  out.data() + (i * 3 + c) * r1 * r1, r1);
        }
    }
    ds.images = std::move(out);
    ds.resolution = r1;
    compute_channel_stats(ds);
}

}  // namespace deit::data
