#pragma once

// File formats. Everything is little-endian regardless of host.
//
// TensorFile:      "MDTF" u16 version u8 rank u32[rank] extents f32[numel] payload
// CheckpointFile:  "MDCK" u16 version u16 kind_len kind u32 count
//                  { u16 name_len name TensorFile }* u32 crc32(all prior bytes)

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <string_view>
#include <unistd.h>
#include <utility>
#include <vector>

#include "maskdime/error.hpp"
#include "maskdime/tensor.hpp"

namespace maskdime::persist {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::uint16_t kTensorVersion = 1;
inline constexpr std::uint16_t kCheckpointVersion = 1;

class Writer {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v) { put(v, 2); }
    void u32(std::uint32_t v) { put(v, 4); }
    void f32(float v) { put(std::bit_cast<std::uint32_t>(v), 4); }
    void raw(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
    void raw(const Bytes& b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
    Bytes& bytes() { return buf_; }

private:
    void put(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    Bytes buf_;
};

class Reader {
public:
    Reader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}

    std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
    std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(p_ + pos_), n);
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return n_ - pos_; }

private:
    void need(std::size_t n) const {
        if (n_ - pos_ < n) throw FormatError("truncated", "file ends before expected data");
    }
    std::uint64_t get(int n) {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(p_[pos_ + i]) << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }
    const std::uint8_t* p_;
    std::size_t n_;
    std::size_t pos_ = 0;
};

inline void encode_tensor(Writer& w, const Tensor& t) {
    if (t.rank() > 255) throw ArgumentError("tensor rank too large for container");
    w.raw("MDTF");
    w.u16(kTensorVersion);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (int e : t.shape()) w.u32(static_cast<std::uint32_t>(e));
    for (float v : t.vec()) w.f32(v);
}

inline Tensor decode_tensor(Reader& r) {
    if (r.str(4) != "MDTF") throw FormatError("bad_magic", "not a tensor file");
    const std::uint16_t version = r.u16();
    if (version > kTensorVersion)
        throw FormatError("unsupported_version", "tensor format version " + std::to_string(version) + " is not supported");
    const int rank = r.u8();
    Shape shape(static_cast<std::size_t>(rank));
    std::uint64_t numel = 1;
    for (int& e : shape) {
        const std::uint32_t v = r.u32();
        if (v == 0 || v > 0x7fffffffu) throw FormatError("bad_shape", "invalid tensor extent");
        e = static_cast<int>(v);
        numel *= v;
    }
    if (numel * 4 > r.remaining()) throw FormatError("truncated", "tensor payload shorter than its shape");
    std::vector<float> data(numel);
    for (float& v : data) v = r.f32();
    return Tensor(std::move(shape), std::move(data));
}

inline Bytes tensor_bytes(const Tensor& t) {
    Writer w;
    encode_tensor(w, t);
    return std::move(w.bytes());
}

inline Tensor tensor_from_bytes(const Bytes& b) {
    Reader r(b.data(), b.size());
    Tensor t = decode_tensor(r);
    if (r.remaining()) throw FormatError("trailing_bytes", "unexpected data after tensor payload");
    return t;
}

struct Checkpoint {
    std::string kind;
    std::vector<std::pair<std::string, Tensor>> params;

    const Tensor& at(const std::string& name) const {
        for (const auto& [n, t] : params)
            if (n == name) return t;
        throw FormatError("missing_parameter", "checkpoint has no parameter '" + name + "'");
    }
};

inline std::uint32_t crc32_of(const std::uint8_t* p, std::size_t n) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    while (n) {
        const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        crc = ::crc32(crc, p, chunk);
        p += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

inline Bytes checkpoint_bytes(const Checkpoint& ck) {
    std::set<std::string> seen;
    Writer w;
    w.raw("MDCK");
    w.u16(kCheckpointVersion);
    w.u16(static_cast<std::uint16_t>(ck.kind.size()));
    w.raw(ck.kind);
    w.u32(static_cast<std::uint32_t>(ck.params.size()));
    for (const auto& [name, t] : ck.params) {
        if (!seen.insert(name).second) throw ArgumentError("duplicate parameter name '" + name + "'");
        w.u16(static_cast<std::uint16_t>(name.size()));
        w.raw(name);
        encode_tensor(w, t);
    }
    w.u32(crc32_of(w.bytes().data(), w.bytes().size()));
    return std::move(w.bytes());
}

inline Checkpoint checkpoint_from_bytes(const Bytes& b) {
    if (b.size() < 4 + 2) throw FormatError("truncated", "checkpoint too short");
    if (std::memcmp(b.data(), "MDCK", 4) != 0) throw FormatError("bad_magic", "not a checkpoint file");
    Reader head(b.data() + 4, 2);
    const std::uint16_t version = head.u16();
    if (version > kCheckpointVersion)
        throw FormatError("unsupported_version",
                          "checkpoint format version " + std::to_string(version) + " is not supported");
    if (b.size() < 4 + 2 + 4) throw FormatError("truncated", "checkpoint too short");
    const std::size_t body = b.size() - 4;
    Reader tail(b.data() + body, 4);
    if (tail.u32() != crc32_of(b.data(), body)) throw FormatError("crc_mismatch", "checkpoint CRC does not verify");

    Reader r(b.data(), body);
    r.str(4);
    r.u16();
    Checkpoint ck;
    ck.kind = r.str(r.u16());
    const std::uint32_t count = r.u32();
    std::set<std::string> seen;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.str(r.u16());
        if (!seen.insert(name).second) throw FormatError("duplicate_parameter", "parameter '" + name + "' repeats");
        ck.params.emplace_back(std::move(name), decode_tensor(r));
    }
    if (r.remaining()) throw FormatError("trailing_bytes", "unexpected data before checkpoint CRC");
    return ck;
}

// --- files -------------------------------------------------------------------

inline Bytes read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("missing_file", "cannot open " + path.string());
    Bytes b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return b;
}

/// Writes to a sibling temp file and renames it over the target, so readers
/// see either the old or the new content.
inline void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t n) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp" + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("io", "cannot write " + tmp.string());
        out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
        out.flush();
        if (!out) throw FormatError("io", "short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline void write_file_atomic(const std::filesystem::path& path, const Bytes& b) {
    write_file_atomic(path, b.data(), b.size());
}

inline void write_text_atomic(const std::filesystem::path& path, std::string_view s) {
    write_file_atomic(path, s.data(), s.size());
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) { write_file_atomic(path, tensor_bytes(t)); }
inline Tensor load_tensor(const std::filesystem::path& path) { return tensor_from_bytes(read_file(path)); }

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    write_file_atomic(path, checkpoint_bytes(ck));
}
inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return checkpoint_from_bytes(read_file(path)); }

// --- image export ------------------------------------------------------------

inline std::uint8_t to_byte(float v) {
    const double c = std::clamp(static_cast<double>(v), -1.0, 1.0);
    return static_cast<std::uint8_t>(std::lround((c + 1.0) * 127.5));
}

/// 8-bit binary PGM of the last two axes; [-1, 1] maps to [0, 255].
inline Bytes pgm_bytes(const Tensor& img) {
    if (img.rank() < 2) throw ShapeError("pgm export needs at least two axes");
    const int h = img.dim(-2), w = img.dim(-1);
    const std::string head = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    Bytes b(head.begin(), head.end());
    for (int i = 0; i < h * w; ++i) b.push_back(to_byte(img[static_cast<std::size_t>(i)]));
    return b;
}

/// 1-bit PBM (P4), nonzero pixels are black (bit set).
inline Bytes pbm_bytes(const Tensor& mask) {
    if (mask.rank() < 2) throw ShapeError("pbm export needs at least two axes");
    const int h = mask.dim(-2), w = mask.dim(-1);
    const std::string head = "P4\n" + std::to_string(w) + " " + std::to_string(h) + "\n";
    Bytes b(head.begin(), head.end());
    const int row_bytes = (w + 7) / 8;
    for (int y = 0; y < h; ++y) {
        for (int xb = 0; xb < row_bytes; ++xb) {
            std::uint8_t byte = 0;
            for (int bit = 0; bit < 8; ++bit) {
                const int x = xb * 8 + bit;
                if (x < w && mask[static_cast<std::size_t>(y * w + x)] != 0.0f) byte |= static_cast<std::uint8_t>(0x80 >> bit);
            }
            b.push_back(byte);
        }
    }
    return b;
}

inline void save_pgm(const std::filesystem::path& path, const Tensor& img) { write_file_atomic(path, pgm_bytes(img)); }
inline void save_pbm(const std::filesystem::path& path, const Tensor& mask) { write_file_atomic(path, pbm_bytes(mask)); }

}  // namespace maskdime::persist
