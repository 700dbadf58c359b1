// SPDX-License-Identifier: Apache-2.0
//
// Little-endian binary streams, SHA-256 digests and atomic file replacement.

#pragma once

#include "avlink/common.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace avlink {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

using Digest = std::array<std::uint8_t, 32>;

Digest sha256(const void* data, std::size_t size);
inline Digest sha256(const std::string& s) { return sha256(s.data(), s.size()); }
std::string to_hex(const Digest& d);
Digest digest_from_hex(const std::string& hex);

// Incremental SHA-256.
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;
    void update(const void* data, std::size_t size);
    Digest finish();

private:
    void* ctx_;
};

class BinaryWriter {
public:
    explicit BinaryWriter(std::ostream& os) : os_(os) {}

    void bytes(const void* p, std::size_t n) { os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
    template <typename T>
    void put(T v) {
        bytes(&v, sizeof(T));
    }
    void u32(std::uint32_t v) { put(v); }
    void u64(std::uint64_t v) { put(v); }
    void i32(std::int32_t v) { put(v); }
    void f64(double v) { put(v); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    // Values narrowed to float32.
    void f32_array(const Real* p, std::size_t n);

private:
    std::ostream& os_;
};

// Reads with bounds checking; every failure is a FormatError naming the field.
class BinaryReader {
public:
    BinaryReader(std::istream& is, std::string source) : is_(is), source_(std::move(source)) {}

    void bytes(void* p, std::size_t n, const char* field);
    template <typename T>
    T get(const char* field) {
        T v;
        bytes(&v, sizeof(T), field);
        return v;
    }
    std::uint32_t u32(const char* field) { return get<std::uint32_t>(field); }
    std::uint64_t u64(const char* field) { return get<std::uint64_t>(field); }
    std::int32_t i32(const char* field) { return get<std::int32_t>(field); }
    double f64(const char* field) { return get<double>(field); }
    std::string str(const char* field, std::size_t max_len);
    void f32_array(Real* p, std::size_t n, const char* field);
    [[noreturn]] void fail(const std::string& what) const;
    const std::string& source() const { return source_; }

private:
    std::istream& is_;
    std::string source_;
};

// Writes path via a temporary sibling and rename, so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path, const char* module);

}  // namespace avlink
