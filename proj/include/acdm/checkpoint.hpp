#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "acdm/tensor.hpp"

namespace acdm {

/// Weight checkpoint format:
///   magic "ACWT", version u32, count u32, then per tensor:
///   name-length u16, name bytes, rank u8, extents u32[], f64 LE payload.
namespace ckpt {

constexpr char kMagic[4] = {'A', 'C', 'W', 'T'};
constexpr uint32_t kVersion = 1;

namespace detail {
template <class T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated payload");
    return v;
}
}  // namespace detail

template <class Real>
void save(const std::string& path, const std::vector<TensorPtr<Real>>& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    os.write(kMagic, 4);
    detail::write_pod<uint32_t>(os, kVersion);
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        if (t->name.empty()) throw std::runtime_error("checkpoint: tensor without a name");
        if (t->name.size() > 0xffff) throw std::runtime_error("checkpoint: tensor name too long");
        detail::write_pod<uint16_t>(os, static_cast<uint16_t>(t->name.size()));
        os.write(t->name.data(), static_cast<std::streamsize>(t->name.size()));
        detail::write_pod<uint8_t>(os, static_cast<uint8_t>(t->shape.size()));
        for (int e : t->shape) detail::write_pod<uint32_t>(os, static_cast<uint32_t>(e));
        for (Real v : t->data) detail::write_pod<double>(os, static_cast<double>(v));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

/// Loads all tensors from a checkpoint as fresh (named, trainable) leaves.
template <class Real>
std::vector<TensorPtr<Real>> load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
    uint32_t version = detail::read_pod<uint32_t>(is);
    if (version != kVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    uint32_t count = detail::read_pod<uint32_t>(is);
    std::vector<TensorPtr<Real>> out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t nlen = detail::read_pod<uint16_t>(is);
        std::string name(nlen, '\0');
        is.read(name.data(), nlen);
        if (!is) throw std::runtime_error("checkpoint: truncated payload");
        uint8_t rank = detail::read_pod<uint8_t>(is);
        std::vector<int> shape(rank);
        for (auto& e : shape) e = static_cast<int>(detail::read_pod<uint32_t>(is));
        auto t = leaf<Real>(shape, name);
        for (auto& v : t->data) v = static_cast<Real>(detail::read_pod<double>(is));
        out.push_back(std::move(t));
    }
    return out;
}

/// Copies checkpointed values into an existing named parameter set.
/// Every parameter must be present with a matching shape.
template <class Real>
void load_into(const std::string& path, const std::vector<TensorPtr<Real>>& params) {
    auto loaded = load<Real>(path);
    for (const auto& p : params) {
        bool found = false;
        for (const auto& l : loaded) {
            if (l->name != p->name) continue;
            if (l->shape != p->shape)
                throw std::runtime_error("checkpoint: shape mismatch for '" + p->name + "': file " +
                                         shape_str(l->shape) + " vs model " + shape_str(p->shape));
            p->data = l->data;
            found = true;
            break;
        }
        if (!found) throw std::runtime_error("checkpoint: missing tensor '" + p->name + "'");
    }
}

}  // namespace ckpt
}  // namespace acdm
