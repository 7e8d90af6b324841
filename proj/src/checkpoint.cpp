#include "dtseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dtseg/errors.hpp"
#include "dtseg/hashing.hpp"

namespace dtseg::checkpoint {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'D', 'T', 'S', 'G', 'C', 'K', 'P', 'T'};
constexpr size_t kDigestBytes = 32;

template <class T>
void put(std::string& out, T v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_str(std::string& out, const std::string& s) {
    put<uint32_t>(out, uint32_t(s.size()));
    out += s;
}

class Reader {
public:
    Reader(const std::string& bytes, size_t end) : bytes_(bytes), end_(end) {}

    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof v);
        pos_ += sizeof v;
        return v;
    }

    std::string get_str() {
        auto n = get<uint32_t>();
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    void get_doubles(double* dst, size_t count) {
        need(count * sizeof(double));
        std::memcpy(dst, bytes_.data() + pos_, count * sizeof(double));
        pos_ += count * sizeof(double);
    }

    bool done() const { return pos_ == end_; }

private:
    void need(size_t n) const {
        if (n > end_ - pos_) throw IntegrityError("checkpoint: payload ends mid-record");
    }

    const std::string& bytes_;
    size_t end_;
    size_t pos_ = 0;
};

void expect_version(const nlohmann::json& config, const char* key, int supported) {
    int v = config.value(key, -1);
    if (v != supported)
        throw VersionError("checkpoint: " + std::string(key) + " " + std::to_string(v) + " unsupported (expected " +
                           std::to_string(supported) + ")");
}

void expect_kind(const Checkpoint& ckpt, Kind kind) {
    if (ckpt.kind != kind)
        throw KindMismatchError("checkpoint holds a " + to_string(ckpt.kind) + ", expected a " + to_string(kind));
}

std::string sha256_raw(std::string_view bytes) {
    Sha256 h;
    h.update(bytes);
    return h.digest();
}

Checkpoint from_paramset(Kind kind, const ParamSet& ps, nlohmann::json config, uint64_t seed) {
    Checkpoint c;
    c.kind = kind;
    c.seed = seed;
    c.config = std::move(config);
    c.tensors.reserve(ps.size());
    for (size_t i = 0; i < ps.size(); ++i) c.tensors.emplace_back(ps.name(i), ps[i]->value);
    return c;
}

}  // namespace

std::string to_string(Kind kind) {
    switch (kind) {
        case Kind::codec: return "codec";
        case Kind::denoiser: return "denoiser";
        case Kind::decoder: return "decoder";
        case Kind::baseline: return "baseline";
        case Kind::collab: return "collab";
    }
    return "?";
}

Kind kind_from_string(const std::string& text) {
    for (Kind k : {Kind::codec, Kind::denoiser, Kind::decoder, Kind::baseline, Kind::collab})
        if (to_string(k) == text) return k;
    throw ArgumentError("unknown checkpoint kind '" + text + "'");
}

std::string serialize(const Checkpoint& ckpt) {
    std::string out(kMagic, sizeof kMagic);
    put<uint32_t>(out, ckpt.version);
    put_str(out, to_string(ckpt.kind));
    put<uint64_t>(out, ckpt.seed);
    put_str(out, ckpt.config.dump());
    put<uint32_t>(out, uint32_t(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        put_str(out, name);
        for (int d : {t.n(), t.c(), t.h(), t.w()}) put<int32_t>(out, d);
        out.append(reinterpret_cast<const char*>(t.data()), t.numel() * sizeof(double));
    }
    out += sha256_raw(out);
    return out;
}

std::string Checkpoint::hash() const {
    std::string bytes = serialize(*this);
    return to_hex(bytes.substr(bytes.size() - kDigestBytes));
}

Checkpoint deserialize(const std::string& bytes) {
    if (bytes.size() < sizeof kMagic + kDigestBytes) throw IntegrityError("checkpoint: file truncated");
    size_t body = bytes.size() - kDigestBytes;
    if (sha256_raw(std::string_view(bytes).substr(0, body)) != bytes.substr(body))
        throw IntegrityError("checkpoint: SHA-256 mismatch (corrupt or truncated)");
    if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) throw IntegrityError("checkpoint: bad magic");

    Reader r(bytes, body);
    for (size_t i = 0; i < sizeof kMagic; ++i) r.get<char>();
    Checkpoint c;
    c.version = r.get<uint32_t>();
    if (c.version != kFormatVersion)
        throw VersionError("checkpoint: format version " + std::to_string(c.version) + " unsupported (expected " +
                           std::to_string(kFormatVersion) + ")");
    c.kind = kind_from_string(r.get_str());
    c.seed = r.get<uint64_t>();
    try {
        c.config = nlohmann::json::parse(r.get_str());
    } catch (const nlohmann::json::parse_error& e) {
        throw IntegrityError(std::string("checkpoint: config echo is not JSON: ") + e.what());
    }
    auto count = r.get<uint32_t>();
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = r.get_str();
        Shape s;
        s.n = r.get<int32_t>();
        s.c = r.get<int32_t>();
        s.h = r.get<int32_t>();
        s.w = r.get<int32_t>();
        if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0) throw IntegrityError("checkpoint: negative tensor dimension");
        Tensor t(s);
        r.get_doubles(t.data(), t.numel());
        c.tensors.emplace_back(std::move(name), std::move(t));
    }
    if (!r.done()) throw IntegrityError("checkpoint: trailing bytes before digest");
    return c;
}

void save(const Checkpoint& ckpt, const std::string& path) {
    auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::string bytes = serialize(ckpt);
    // Write-then-rename so a crash never leaves a half-written checkpoint under the final name.
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot write " + tmp);
        f.write(bytes.data(), std::streamsize(bytes.size()));
        if (!f) throw std::runtime_error("write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DependencyError("checkpoint not found: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    try {
        return deserialize(ss.str());
    } catch (const IntegrityError& e) {
        throw IntegrityError(path + ": " + e.what());
    }
}

Checkpoint load(const std::string& path, Kind expected) {
    Checkpoint c = load(path);
    expect_kind(c, expected);
    return c;
}

std::string save_hashed(const Checkpoint& ckpt, const std::string& dir, const std::string& stem) {
    auto path = std::filesystem::path(dir) / (stem + "-" + ckpt.hash().substr(0, 16) + ".ckpt");
    save(ckpt, path.string());
    return path.string();
}

ParamSet to_params(const Checkpoint& ckpt) {
    ParamSet ps;
    for (const auto& [name, t] : ckpt.tensors) ps.add(name, t);
    return ps;
}

Checkpoint pack(const latentcodec::CodecParams& codec, uint64_t seed) {
    nlohmann::json cfg{{"codec", codec.config.to_json()}, {"component_version", codec.version}};
    return from_paramset(Kind::codec, codec.params, std::move(cfg), seed);
}

Checkpoint pack(const diffusion::DenoiserParams& denoiser, const diffusion::NoiseSchedule& schedule, uint64_t seed) {
    nlohmann::json cfg{{"denoiser", denoiser.config.to_json()},
                       {"schedule", schedule.to_json()},
                       {"component_version", denoiser.version}};
    return from_paramset(Kind::denoiser, denoiser.params, std::move(cfg), seed);
}

Checkpoint pack(const segdecoder::DecoderParams& decoder, uint64_t seed) {
    nlohmann::json cfg{{"decoder", decoder.config.to_json()},
                       {"block_channels", decoder.block_channels},
                       {"num_classes", decoder.num_classes},
                       {"component_version", decoder.version}};
    return from_paramset(Kind::decoder, decoder.params, std::move(cfg), seed);
}

Checkpoint pack(const collab::BaselineParams& baseline, uint64_t seed) {
    nlohmann::json cfg{{"baseline", baseline.config.to_json()},
                       {"num_classes", baseline.num_classes},
                       {"component_version", baseline.version}};
    return from_paramset(Kind::baseline, baseline.params, std::move(cfg), seed);
}

Checkpoint pack(const collab::CollabParams& collab, const std::vector<std::string>& participants, uint64_t seed) {
    nlohmann::json cfg{{"collab", collab.config.to_json()},
                       {"participant_channels", collab.participant_channels},
                       {"participants", participants},
                       {"num_classes", collab.num_classes},
                       {"component_version", collab.version}};
    return from_paramset(Kind::collab, collab.params, std::move(cfg), seed);
}

latentcodec::CodecParams unpack_codec(const Checkpoint& ckpt) {
    expect_kind(ckpt, Kind::codec);
    expect_version(ckpt.config, "component_version", latentcodec::CodecParams::kVersion);
    auto cfg = latentcodec::CodecConfig::from_json(ckpt.config.at("codec"));
    return latentcodec::CodecParams::from_params(cfg, to_params(ckpt));
}

std::pair<diffusion::DenoiserParams, diffusion::NoiseSchedule> unpack_denoiser(const Checkpoint& ckpt) {
    expect_kind(ckpt, Kind::denoiser);
    expect_version(ckpt.config, "component_version", diffusion::DenoiserParams::kVersion);
    auto cfg = diffusion::DenoiserConfig::from_json(ckpt.config.at("denoiser"));
    auto schedule = diffusion::NoiseSchedule::from_json(ckpt.config.at("schedule"));
    return {diffusion::DenoiserParams::from_params(cfg, to_params(ckpt)), std::move(schedule)};
}

segdecoder::DecoderParams unpack_decoder(const Checkpoint& ckpt) {
    expect_kind(ckpt, Kind::decoder);
    expect_version(ckpt.config, "component_version", segdecoder::DecoderParams::kVersion);
    auto cfg = segdecoder::DecoderConfig::from_json(ckpt.config.at("decoder"));
    return segdecoder::DecoderParams::from_params(cfg, ckpt.config.at("block_channels").get<std::vector<int>>(),
                                                  ckpt.config.at("num_classes").get<int>(), to_params(ckpt));
}

collab::BaselineParams unpack_baseline(const Checkpoint& ckpt) {
    expect_kind(ckpt, Kind::baseline);
    expect_version(ckpt.config, "component_version", collab::BaselineParams::kVersion);
    auto cfg = collab::BaselineConfig::from_json(ckpt.config.at("baseline"));
    return collab::BaselineParams::from_params(cfg, ckpt.config.at("num_classes").get<int>(), to_params(ckpt));
}

collab::CollabParams unpack_collab(const Checkpoint& ckpt) {
    expect_kind(ckpt, Kind::collab);
    expect_version(ckpt.config, "component_version", collab::CollabParams::kVersion);
    auto cfg = collab::CollabConfig::from_json(ckpt.config.at("collab"));
    auto ch = ckpt.config.at("participant_channels").get<std::vector<int>>();
    if (ch.size() != 2) throw IntegrityError("checkpoint: collab head needs exactly two participant widths");
    return collab::CollabParams::from_params(cfg, ch[0], ch[1], ckpt.config.at("num_classes").get<int>(),
                                             to_params(ckpt));
}

}  // namespace dtseg::checkpoint
