#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "model.hpp"

namespace sgdrop {

// Checkpoint container, bit-exact:
//   magic "SGDCKPT1" (8 bytes), u32 LE version=1, u32 LE tensor count;
//   per tensor: u16 LE name length, UTF-8 name, u8 dtype (0 = f32), u8 rank,
//   rank x u32 LE extents, raw little-endian f32 payload.

struct NamedTensor {
    std::string name;
    Tensor<float> tensor;
};

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
public:
    ByteReader(const char* data, std::size_t size) : p_(data), end_(data + size) {}

    void bytes(void* dst, std::size_t n, const char* what) {
        if (static_cast<std::size_t>(end_ - p_) < n)
            throw std::runtime_error(std::string("checkpoint: truncated file while reading ") +
                                     what);
        std::memcpy(dst, p_, n);
        p_ += n;
    }
    std::uint8_t u8(const char* what) {
        std::uint8_t v;
        bytes(&v, 1, what);
        return v;
    }
    std::uint16_t u16(const char* what) {
        std::uint8_t b[2];
        bytes(b, 2, what);
        return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
    }
    std::uint32_t u32(const char* what) {
        std::uint8_t b[4];
        bytes(b, 4, what);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }
    bool done() const { return p_ == end_; }

private:
    const char* p_;
    const char* end_;
};

} // namespace detail

inline constexpr char kCheckpointMagic[8] = {'S', 'G', 'D', 'C', 'K', 'P', 'T', '1'};

inline void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
    std::string out;
    out.append(kCheckpointMagic, 8);
    detail::put_u32(out, 1u);
    detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        if (t.name.size() > 0xffff)
            throw std::runtime_error("checkpoint: tensor name too long: " + t.name);
        detail::put_u16(out, static_cast<std::uint16_t>(t.name.size()));
        out.append(t.name);
        out.push_back(0); // dtype f32
        out.push_back(static_cast<char>(t.tensor.rank()));
        for (std::size_t i = 0; i < t.tensor.rank(); ++i)
            detail::put_u32(out, static_cast<std::uint32_t>(t.tensor.extent(i)));
        static_assert(sizeof(float) == 4);
        for (std::size_t i = 0; i < t.tensor.numel(); ++i) {
            std::uint32_t bits;
            std::memcpy(&bits, &t.tensor[i], 4);
            detail::put_u32(out, bits);
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

inline std::vector<NamedTensor> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
    std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    detail::ByteReader r(blob.data(), blob.size());

    char magic[8];
    r.bytes(magic, 8, "magic");
    if (std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    const std::uint32_t version = r.u32("version");
    if (version != 1)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const std::uint32_t count = r.u32("tensor count");

    std::vector<NamedTensor> tensors;
    tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = r.u16("name length");
        std::string name(name_len, '\0');
        r.bytes(name.data(), name_len, "name");
        const std::uint8_t dtype = r.u8("dtype");
        if (dtype != 0)
            throw std::runtime_error("checkpoint: unsupported dtype " + std::to_string(dtype) +
                                     " for tensor " + name);
        const std::uint8_t rank = r.u8("rank");
        if (rank == 0) throw std::runtime_error("checkpoint: rank-0 tensor " + name);
        Shape shape(rank);
        for (std::uint8_t d = 0; d < rank; ++d) shape[d] = r.u32("extent");
        Tensor<float> t(shape);
        for (std::size_t k = 0; k < t.numel(); ++k) {
            const std::uint32_t bits = r.u32("payload");
            std::memcpy(&t[k], &bits, 4);
        }
        tensors.push_back(NamedTensor{std::move(name), std::move(t)});
    }
    if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes in " + path);
    return tensors;
}

/// Snapshot every model parameter (frozen ones included) as f32.
template <typename T>
std::vector<NamedTensor> named_state(Model<T>& model) {
    std::vector<NamedTensor> out;
    for (auto& p : model.parameters()) {
        if constexpr (std::is_same_v<T, float>)
            out.push_back(NamedTensor{p.name, p.tensor().deep_copy()});
        else
            out.push_back(NamedTensor{p.name, p.tensor().template cast<float>()});
    }
    return out;
}

/// Restore parameters by name; names and shapes must match exactly.
template <typename T>
void load_state(Model<T>& model, const std::vector<NamedTensor>& entries) {
    auto params = model.parameters();
    if (entries.size() != params.size())
        throw std::runtime_error("checkpoint: " + std::to_string(entries.size()) +
                                 " tensors for a model with " + std::to_string(params.size()) +
                                 " parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const NamedTensor* found = nullptr;
        for (const auto& e : entries)
            if (e.name == params[i].name) {
                found = &e;
                break;
            }
        if (!found) throw std::runtime_error("checkpoint: missing tensor " + params[i].name);
        Tensor<T>& dst = params[i].tensor();
        if (!same_shape(found->tensor.shape(), dst.shape()))
            throw std::runtime_error("checkpoint: shape " + shape_str(found->tensor.shape()) +
                                     " for " + params[i].name + " does not match model " +
                                     shape_str(dst.shape()));
        for (std::size_t k = 0; k < dst.numel(); ++k)
            dst[k] = static_cast<T>(found->tensor[k]);
    }
}

} // namespace sgdrop
