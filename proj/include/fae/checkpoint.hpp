#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "fae/array.hpp"
#include "fae/model.hpp"

// Checkpoint container: magic "FAE1", u16 format version, a JSON config
// block, then named little-endian f64 arrays, closed by a CRC32 of every
// preceding byte. Round-trips are bit-exact.

namespace fae::ckpt {

inline constexpr char kMagic[4] = {'F', 'A', 'E', '1'};
inline constexpr std::uint16_t kVersion = 1;

inline std::uint32_t crc32(const void* data, std::size_t len, std::uint32_t seed = 0) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t crc = seed ^ 0xFFFFFFFFu;
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ p[i]) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

namespace detail {

inline void put_bytes(std::string& out, const void* data, std::size_t len) {
    out.append(static_cast<const char*>(data), len);
}

template <typename T>
void put_le(std::string& out, T value) {
    static_assert(std::is_unsigned_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        out.push_back(static_cast<char>((value >> (8 * i)) & 0xFFu));
    }
}

inline void put_f64(std::string& out, double value) {
    put_le(out, std::bit_cast<std::uint64_t>(value));
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw std::runtime_error("corrupt checkpoint: truncated");
    }

    template <typename T>
    T get_le() {
        static_assert(std::is_unsigned_v<T>);
        need(sizeof(T));
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            v |= static_cast<T>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        }
        pos += sizeof(T);
        return v;
    }

    double get_f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }

    std::string get_str(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

inline nlohmann::json config_json(const Model& m) {
    return {
        {"loss", loss_kind_name(m.kind)},
        {"feature_dim", m.feature_dim},
        {"latent_dim", m.cfg.latent_dim},
        {"hidden_dim", m.cfg.hidden_dim},
        {"components", m.cfg.components},
        {"mc_samples", m.cfg.mc_samples},
        {"k_stability", m.cfg.k_stability},
        {"batch_size", m.cfg.batch_size},
        {"epochs", m.cfg.epochs},
        {"learning_rate", m.cfg.learning_rate},
        {"seed", m.cfg.seed},
        {"prior_jitter", m.cfg.prior_jitter},
        {"prior_random_weights", m.cfg.prior_random_weights},
        {"early_stop", m.cfg.early_stop},
        {"grad_clip", m.cfg.grad_clip},
    };
}

inline void config_from_json(const nlohmann::json& j, Model& m) {
    m.kind = parse_loss_kind(j.at("loss").get<std::string>());
    m.feature_dim = j.at("feature_dim").get<std::size_t>();
    m.cfg.latent_dim = j.at("latent_dim").get<std::size_t>();
    m.cfg.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    m.cfg.components = j.at("components").get<std::size_t>();
    m.cfg.mc_samples = j.at("mc_samples").get<std::size_t>();
    m.cfg.k_stability = j.at("k_stability").get<double>();
    m.cfg.batch_size = j.at("batch_size").get<std::size_t>();
    m.cfg.epochs = j.at("epochs").get<std::size_t>();
    m.cfg.learning_rate = j.at("learning_rate").get<double>();
    m.cfg.seed = j.at("seed").get<std::uint64_t>();
    m.cfg.prior_jitter = j.at("prior_jitter").get<bool>();
    m.cfg.prior_random_weights = j.at("prior_random_weights").get<bool>();
    m.cfg.early_stop = j.at("early_stop").get<bool>();
    m.cfg.grad_clip = j.at("grad_clip").get<double>();
}

}  // namespace detail

inline std::string serialize_checkpoint(const Model& m) {
    ParameterSet arrays = to_params(m);
    arrays.emplace("norm.mean", m.stats.mean);
    arrays.emplace("norm.divisor", m.stats.divisor);
    if (!m.calib_errors.empty()) {
        arrays.emplace("calib.errors", Array(Shape{m.calib_errors.size()}, m.calib_errors));
    }

    std::string out;
    detail::put_bytes(out, kMagic, 4);
    detail::put_le<std::uint16_t>(out, kVersion);
    const std::string cfg = detail::config_json(m).dump();
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
    detail::put_bytes(out, cfg.data(), cfg.size());
    detail::put_le<std::uint64_t>(out, arrays.size());
    for (const auto& [name, a] : arrays) {
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        detail::put_bytes(out, name.data(), name.size());
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.rank()));
        for (std::size_t d : a.shape()) detail::put_le<std::uint64_t>(out, d);
        for (double v : a) detail::put_f64(out, v);
    }
    detail::put_le<std::uint32_t>(out, crc32(out.data(), out.size()));
    return out;
}

inline Model deserialize_checkpoint(const std::string& buf) {
    if (buf.size() < 4 + 2 + 4 + 8 + 4) throw std::runtime_error("corrupt checkpoint: truncated");
    if (std::memcmp(buf.data(), kMagic, 4) != 0) {
        throw std::runtime_error("corrupt checkpoint: bad magic bytes");
    }
    detail::Reader r{buf};
    const std::uint32_t stored_crc =
        detail::Reader{buf, buf.size() - 4}.get_le<std::uint32_t>();
    if (crc32(buf.data(), buf.size() - 4) != stored_crc) {
        throw std::runtime_error("corrupt checkpoint: checksum mismatch");
    }
    r.pos = 4;
    const std::uint16_t version = r.get_le<std::uint16_t>();
    if (version != kVersion) {
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint32_t cfg_len = r.get_le<std::uint32_t>();
    nlohmann::json cfg_json;
    try {
        cfg_json = nlohmann::json::parse(r.get_str(cfg_len));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("corrupt checkpoint: config block: ") + e.what());
    }

    Model m;
    detail::config_from_json(cfg_json, m);

    const std::uint64_t count = r.get_le<std::uint64_t>();
    ParameterSet arrays;
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = r.get_le<std::uint32_t>();
        const std::string name = r.get_str(name_len);
        const std::uint32_t ndim = r.get_le<std::uint32_t>();
        Shape shape;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            shape.push_back(static_cast<std::size_t>(r.get_le<std::uint64_t>()));
        }
        Array a(shape);
        for (double& v : a) v = r.get_f64();
        arrays.emplace(name, std::move(a));
    }

    auto take = [&arrays](const std::string& name) {
        auto it = arrays.find(name);
        if (it == arrays.end()) {
            throw std::runtime_error("corrupt checkpoint: missing array '" + name + "'");
        }
        Array a = std::move(it->second);
        arrays.erase(it);
        return a;
    };
    m.stats.mean = take("norm.mean");
    m.stats.divisor = take("norm.divisor");
    if (auto it = arrays.find("calib.errors"); it != arrays.end()) {
        m.calib_errors.assign(it->second.begin(), it->second.end());
        arrays.erase(it);
    }

    Model fresh = make_model(m.feature_dim, m.cfg, m.kind);
    fresh.stats = m.stats;
    fresh.calib_errors = std::move(m.calib_errors);
    try {
        apply_params(fresh, arrays);
    } catch (const std::invalid_argument& e) {
        throw std::runtime_error(std::string("corrupt checkpoint: ") + e.what());
    }
    return fresh;
}

inline void save_checkpoint(const Model& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    const std::string buf = serialize_checkpoint(m);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("write failed for checkpoint: " + path);
}

inline Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(buf);
}

}  // namespace fae::ckpt
