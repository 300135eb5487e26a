#include "deit/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include <zlib.h>

#include "deit/error.hpp"

namespace deit::checkpoint {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) {
            throw FormatError("checkpoint truncated at byte " + std::to_string(pos));
        }
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<unsigned char>(buf[pos++]);
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

void write_tensor(std::string& out, const model::NamedParam<float>& p) {
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.append(p.name);
    put_u32(out, static_cast<std::uint32_t>(p.tensor.ndim()));
    for (i64 d : p.tensor.shape()) put_u64(out, static_cast<std::uint64_t>(d));
    out.push_back(0);  // dtype: f32
    const std::size_t bytes = static_cast<std::size_t>(p.tensor.numel()) * sizeof(float);
    const std::size_t off = out.size();
    out.resize(off + bytes);
    std::memcpy(out.data() + off, p.tensor.data(), bytes);
}

model::NamedParam<float> read_tensor(Reader& r) {
    const std::uint32_t name_len = r.u32();
    std::string name = r.bytes(name_len);
    const std::uint32_t ndim = r.u32();
    if (ndim > 8) throw FormatError("tensor '" + name + "' has implausible rank " + std::to_string(ndim));
    std::vector<i64> shape(ndim);
    for (auto& d : shape) d = static_cast<i64>(r.u64());
    const std::uint8_t dtype = r.u8();
    if (dtype != 0) {
        throw FormatError("tensor '" + name + "' has unsupported dtype tag " + std::to_string(dtype));
    }
    Tensor<float> t(shape);
    const std::size_t bytes = static_cast<std::size_t>(t.numel()) * sizeof(float);
    r.need(bytes);
    std::memcpy(t.data(), r.buf.data() + r.pos, bytes);
    r.pos += bytes;
    return {std::move(name), std::move(t)};
}

}  // namespace

void save(const std::string& path, const Checkpoint& ckpt) {
    std::string out;
    out.reserve(1 << 20);
    out.append("DEIT");
    put_u32(out, kFormatVersion);

    const std::string cfg = ckpt.config.dump();
    put_u32(out, static_cast<std::uint32_t>(cfg.size()));
    out.append(cfg);

    put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& t : ckpt.tensors) write_tensor(out, t);

    out.push_back(ckpt.has_optimizer ? 1 : 0);
    if (ckpt.has_optimizer) {
        put_u64(out, static_cast<std::uint64_t>(ckpt.optimizer_step));
        put_u32(out, static_cast<std::uint32_t>(ckpt.optimizer_tensors.size()));
        for (const auto& t : ckpt.optimizer_tensors) write_tensor(out, t);
    }
    out.push_back(ckpt.has_ema ? 1 : 0);
    if (ckpt.has_ema) {
        put_u32(out, static_cast<std::uint32_t>(ckpt.ema_tensors.size()));
        for (const auto& t : ckpt.ema_tensors) write_tensor(out, t);
    }

    const std::uint32_t crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(out.data()), static_cast<uInt>(out.size())));
    put_u32(out, crc);

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write '" + tmp + "'");
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw IoError("short write to '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (buf.size() < 12) throw FormatError("checkpoint too small (" + std::to_string(buf.size()) + " bytes)");
    const std::size_t body = buf.size() - 4;
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) stored |= std::uint32_t(static_cast<unsigned char>(buf[body + i])) << (8 * i);
    const std::uint32_t actual = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(body)));
    if (stored != actual) {
        throw CorruptionError("checkpoint CRC mismatch: stored " + std::to_string(stored) + ", computed " +
                              std::to_string(actual));
    }

    Reader r{buf};
    if (r.bytes(4) != "DEIT") throw FormatError("bad magic: not a DEIT checkpoint");
    const std::uint32_t version = r.u32();
    if (version > kFormatVersion) {
        throw VersionError("checkpoint format v" + std::to_string(version) + " is newer than reader v" +
                           std::to_string(kFormatVersion));
    }

    Checkpoint ckpt;
    const std::uint32_t cfg_len = r.u32();
    const std::string cfg = r.bytes(cfg_len);
    try {
        ckpt.config = nlohmann::json::parse(cfg);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint config JSON invalid: ") + e.what());
    }

    const std::uint32_t count = r.u32();
    ckpt.tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) ckpt.tensors.push_back(read_tensor(r));

    ckpt.has_optimizer = r.u8() != 0;
    if (ckpt.has_optimizer) {
        ckpt.optimizer_step = static_cast<i64>(r.u64());
        const std::uint32_t n = r.u32();
        for (std::uint32_t i = 0; i < n; ++i) ckpt.optimizer_tensors.push_back(read_tensor(r));
    }
    ckpt.has_ema = r.u8() != 0;
    if (ckpt.has_ema) {
        const std::uint32_t n = r.u32();
        for (std::uint32_t i = 0; i < n; ++i) ckpt.ema_tensors.push_back(read_tensor(r));
    }
    if (r.pos != body) {
        throw FormatError("checkpoint has " + std::to_string(body - r.pos) + " trailing bytes");
    }
    return ckpt;
}

void load_into(std::vector<model::NamedParam<float>>& params,
               const std::vector<model::NamedParam<float>>& loaded) {
    std::map<std::string, const model::NamedParam<float>*> by_name;
    for (const auto& t : loaded) by_name[t.name] = &t;
    for (auto& p : params) {
        auto it = by_name.find(p.name);
        if (it == by_name.end()) {
            throw FormatError("checkpoint is missing tensor '" + p.name + "'");
        }
        const auto& src = it->second->tensor;
        if (src.shape() != p.tensor.shape()) {
            throw ShapeError("checkpoint tensor '" + p.name + "' has shape " + shape_str(src.shape()) +
                             " but the model expects " + shape_str(p.tensor.shape()));
        }
        std::copy(src.data(), src.data() + src.numel(), p.tensor.data());
        by_name.erase(it);
    }
    if (!by_name.empty()) {
        throw FormatError("checkpoint has unexpected tensor '" + by_name.begin()->first + "'");
    }
}

}  // namespace deit::checkpoint
