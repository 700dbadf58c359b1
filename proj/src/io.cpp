// SPDX-License-Identifier: Apache-2.0
#include "avlink/io.hpp"

#include <openssl/evp.h>

#include <sstream>

namespace avlink {

namespace {
constexpr const char* kMod = "io";
}

Sha256::Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(static_cast<EVP_MD_CTX*>(ctx_), EVP_sha256(), nullptr) != 1)
        throw Error(kMod, "sha256 init failed");
}

Sha256::~Sha256() { EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_)); }

void Sha256::update(const void* data, std::size_t size) {
    EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), data, size);
}

Digest Sha256::finish() {
    Digest d{};
    unsigned int n = 0;
    EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), d.data(), &n);
    return d;
}

Digest sha256(const void* data, std::size_t size) {
    Sha256 h;
    h.update(data, size);
    return h.finish();
}

std::string to_hex(const Digest& d) {
    static const char* hex = "0123456789abcdef";
    std::string s;
    for (std::uint8_t b : d) {
        s += hex[b >> 4];
        s += hex[b & 15];
    }
    return s;
}

Digest digest_from_hex(const std::string& hex) {
    if (hex.size() != 64) throw FormatError(kMod, "digest must be 64 hex characters");
    Digest d{};
    for (std::size_t i = 0; i < 32; ++i) d[i] = static_cast<std::uint8_t>(std::stoul(hex.substr(2 * i, 2), nullptr, 16));
    return d;
}

void BinaryWriter::f32_array(const Real* p, std::size_t n) {
    std::vector<float> buf(n);
    for (std::size_t i = 0; i < n; ++i) buf[i] = static_cast<float>(p[i]);
    bytes(buf.data(), n * sizeof(float));
}

void BinaryReader::bytes(void* p, std::size_t n, const char* field) {
    is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) fail(std::string("truncated while reading ") + field);
}

std::string BinaryReader::str(const char* field, std::size_t max_len) {
    const std::uint32_t n = u32(field);
    if (n > max_len) fail(std::string(field) + " length " + std::to_string(n) + " exceeds limit " + std::to_string(max_len));
    std::string s(n, '\0');
    bytes(s.data(), n, field);
    return s;
}

void BinaryReader::f32_array(Real* p, std::size_t n, const char* field) {
    std::vector<float> buf(n);
    bytes(buf.data(), n * sizeof(float), field);
    for (std::size_t i = 0; i < n; ++i) p[i] = buf[i];
}

void BinaryReader::fail(const std::string& what) const { throw FormatError(kMod, source_ + ": " + what); }

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw Error(kMod, "cannot open " + tmp.string() + " for writing");
        os.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!os) throw Error(kMod, "write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path, const char* module) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(module, "cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace avlink
