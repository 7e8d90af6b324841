#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dtseg/collab.hpp"
#include "dtseg/diffusion.hpp"
#include "dtseg/latentcodec.hpp"
#include "dtseg/segdecoder.hpp"

// Versioned, hashed weight container.
//
//   "DTSGCKPT"            8-byte magic
//   u32  format version
//   str  kind             (u32 length + bytes)
//   u64  creation seed
//   str  config echo      (compact JSON, keys sorted)
//   u32  tensor count
//   per tensor: str name, i32 n, c, h, w, n·c·h·w little-endian doubles
//   32 bytes SHA-256 of everything above
namespace dtseg::checkpoint {

inline constexpr uint32_t kFormatVersion = 1;

enum class Kind { codec, denoiser, decoder, baseline, collab };

std::string to_string(Kind kind);
Kind kind_from_string(const std::string& text);

struct Checkpoint {
    uint32_t version = kFormatVersion;
    Kind kind = Kind::codec;
    uint64_t seed = 0;
    nlohmann::json config;
    std::vector<std::pair<std::string, Tensor>> tensors;

    // Hex SHA-256 of the serialized payload.
    std::string hash() const;
};

std::string serialize(const Checkpoint& ckpt);
// IntegrityError on truncation or hash mismatch, VersionError on an unknown format.
Checkpoint deserialize(const std::string& bytes);

void save(const Checkpoint& ckpt, const std::string& path);
Checkpoint load(const std::string& path);
// Also throws KindMismatchError when the stored kind differs.
Checkpoint load(const std::string& path, Kind expected);
// Writes <dir>/<stem>-<first 16 hex of hash>.ckpt and returns the path.
std::string save_hashed(const Checkpoint& ckpt, const std::string& dir, const std::string& stem);

ParamSet to_params(const Checkpoint& ckpt);

Checkpoint pack(const latentcodec::CodecParams& codec, uint64_t seed);
Checkpoint pack(const diffusion::DenoiserParams& denoiser, const diffusion::NoiseSchedule& schedule, uint64_t seed);
Checkpoint pack(const segdecoder::DecoderParams& decoder, uint64_t seed);
Checkpoint pack(const collab::BaselineParams& baseline, uint64_t seed);
Checkpoint pack(const collab::CollabParams& collab, const std::vector<std::string>& participants, uint64_t seed);

latentcodec::CodecParams unpack_codec(const Checkpoint& ckpt);
std::pair<diffusion::DenoiserParams, diffusion::NoiseSchedule> unpack_denoiser(const Checkpoint& ckpt);
segdecoder::DecoderParams unpack_decoder(const Checkpoint& ckpt);
collab::BaselineParams unpack_baseline(const Checkpoint& ckpt);
collab::CollabParams unpack_collab(const Checkpoint& ckpt);

}  // namespace dtseg::checkpoint
