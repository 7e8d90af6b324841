#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <string_view>

namespace dtseg {

// Incremental SHA-256 (OpenSSL EVP backend).
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(const void* data, size_t size);
    void update(std::string_view s) { update(s.data(), s.size()); }
    // Finalizes; the object must not be updated afterwards.
    std::string digest();
    std::string hex();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

std::string sha256_hex(std::string_view bytes);
std::string to_hex(std::string_view bytes);

}  // namespace dtseg
