#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "driftar/numerics/tensor.hpp"

// "DAR1" container: a little-endian, count-prefixed table of named f64 tensors.
//
//   magic      4 bytes  "DAR1"
//   version    u32      kFormatVersion
//   count      u64
//   count x {
//     name_len u32, name bytes (UTF-8)
//     rank     u32, dims u64[rank]
//     payload  f64[prod(dims)]
//   }

namespace driftar::format {

inline constexpr char kMagic[4] = {'D', 'A', 'R', '1'};
inline constexpr std::uint32_t kFormatVersion = 1;

using NamedTensor = std::pair<std::string, Tensor>;

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
void put(std::string& buf, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(bytes, bytes + sizeof(T));
    }
    buf.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

class Reader {
public:
    Reader(std::string data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

    template <class T>
    T get(const char* what) {
        need(sizeof(T), what);
        unsigned char bytes[sizeof(T)];
        std::memcpy(bytes, data_.data() + pos_, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) {
            std::reverse(bytes, bytes + sizeof(T));
        }
        pos_ += sizeof(T);
        T v;
        std::memcpy(&v, bytes, sizeof(T));
        return v;
    }

    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool at_end() const noexcept { return pos_ == data_.size(); }
    std::size_t remaining() const noexcept { return data_.size() - pos_; }

private:
    void need(std::size_t n, const char* what) const {
        if (data_.size() - pos_ < n) {
            throw FormatError(path_ + ": truncated while reading " + what);
        }
    }

    std::string data_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode(const std::vector<NamedTensor>& entries) {
    std::string buf(kMagic, 4);
    detail::put<std::uint32_t>(buf, kFormatVersion);
    detail::put<std::uint64_t>(buf, entries.size());
    for (const auto& [name, t] : entries) {
        detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
        buf.append(name);
        detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) {
            detail::put<std::uint64_t>(buf, d);
        }
        for (double v : t.data()) {
            detail::put<double>(buf, v);
        }
    }
    return buf;
}

inline std::vector<NamedTensor> decode(std::string data, const std::string& origin = "<memory>") {
    detail::Reader in(std::move(data), origin);
    const std::string magic = in.bytes(4, "magic");
    if (magic != std::string(kMagic, 4)) {
        throw FormatError(origin + ": bad magic (not a DAR1 file)");
    }
    const auto version = in.get<std::uint32_t>("version");
    if (version != kFormatVersion) {
        throw FormatError(origin + ": unsupported format version " + std::to_string(version));
    }
    const auto count = in.get<std::uint64_t>("entry count");
    std::vector<NamedTensor> out;
    for (std::uint64_t e = 0; e < count; ++e) {
        const auto name_len = in.get<std::uint32_t>("name length");
        std::string name = in.bytes(name_len, "name");
        const auto rank = in.get<std::uint32_t>("rank");
        Shape shape(rank);
        for (auto& d : shape) {
            d = static_cast<std::size_t>(in.get<std::uint64_t>("dimension"));
        }
        const std::size_t n = shape_numel(shape);
        if (n > in.remaining() / sizeof(double)) {
            throw FormatError(origin + ": truncated payload for '" + name + "'");
        }
        std::vector<double> values(n);
        for (auto& v : values) {
            v = in.get<double>("payload");
        }
        out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
    }
    if (!in.at_end()) {
        throw FormatError(origin + ": trailing bytes after last entry");
    }
    return out;
}

inline void write_file(const std::string& path, const std::vector<NamedTensor>& entries) {
    const std::string buf = encode(entries);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path + "' for writing");
    }
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) {
        throw IoError("write to '" + path + "' failed");
    }
}

inline std::vector<NamedTensor> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path + "' for reading");
    }
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode(std::move(data), path);
}

}  // namespace driftar::format
