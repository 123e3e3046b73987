#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "taalm/tensor.hpp"

namespace taalm {

enum class HeadKind { LM, TA };

struct TransformerConfig {
    int vocab_size = 512;
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int d_ff = 256;
    int max_seq_len = 128;
    HeadKind head_kind = HeadKind::LM;

    void validate() const {
        if (vocab_size < 2 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 ||
            max_seq_len < 2) {
            throw ConfigError("model config: all dimensions must be positive, max_seq_len >= 2");
        }
        if (d_model % n_heads != 0) {
            throw ConfigError("model config: d_model must be divisible by n_heads");
        }
    }

    bool operator==(const TransformerConfig&) const = default;
};

// Named parameter collection with a fixed order. Flatten/unflatten round-trips
// exactly; save/load round-trips bitwise.
template <typename T>
struct ParamSet {
    std::vector<std::pair<std::string, Tensor<T>>> entries;

    Tensor<T>& operator[](const std::string& name) {
        for (auto& [n, t] : entries) {
            if (n == name) {
                return t;
            }
        }
        throw ConfigError("param set: no tensor named " + name);
    }
    const Tensor<T>& at(const std::string& name) const {
        for (const auto& [n, t] : entries) {
            if (n == name) {
                return t;
            }
        }
        throw ConfigError("param set: no tensor named " + name);
    }
    bool has(const std::string& name) const {
        for (const auto& [n, t] : entries) {
            if (n == name) {
                return true;
            }
        }
        return false;
    }

    void add(std::string name, Tensor<T> t) {
        if (has(name)) {
            throw ConfigError("param set: duplicate tensor name " + name);
        }
        entries.emplace_back(std::move(name), std::move(t));
    }

    std::size_t total_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : entries) {
            n += t.size();
        }
        return n;
    }

    std::vector<T> flatten() const {
        std::vector<T> flat;
        flat.reserve(total_count());
        for (const auto& [name, t] : entries) {
            flat.insert(flat.end(), t.data.begin(), t.data.end());
        }
        return flat;
    }

    void unflatten(const std::vector<T>& flat) {
        if (flat.size() != total_count()) {
            throw ConfigError("param set: flat vector length mismatch");
        }
        std::size_t k = 0;
        for (auto& [name, t] : entries) {
            std::memcpy(t.data.data(), flat.data() + k, t.size() * sizeof(T));
            k += t.size();
        }
    }

    bool bitwise_equal(const ParamSet& o) const {
        if (entries.size() != o.entries.size()) {
            return false;
        }
        for (std::size_t i = 0; i < entries.size(); ++i) {
            if (entries[i].first != o.entries[i].first ||
                entries[i].second.shape != o.entries[i].second.shape ||
                std::memcmp(entries[i].second.data.data(), o.entries[i].second.data.data(),
                            entries[i].second.size() * sizeof(T)) != 0) {
                return false;
            }
        }
        return true;
    }
};

// --- checkpoint container -------------------------------------------------
//
//   magic "TAALMCK1" | u32 version | u32x7 config (vocab, d_model, n_layers,
//   n_heads, d_ff, max_seq_len, head_kind) | u32 tensor count | records
//   record: u32 name length | name bytes | u8 precision tag ('d'|'f') |
//           u32 rank | u32 dims... | raw little-endian IEEE-754 payload

namespace detail {

inline void write_u32(std::ofstream& f, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    f.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::ifstream& f) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

inline constexpr char kCheckpointMagic[9] = "TAALMCK1";

template <typename T>
void save_checkpoint(const std::string& path, const ParamSet<T>& params,
                     const TransformerConfig& cfg) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw ConfigError("cannot open checkpoint for writing: " + path);
    }
    f.write(kCheckpointMagic, 8);
    detail::write_u32(f, 1);
    detail::write_u32(f, static_cast<std::uint32_t>(cfg.vocab_size));
    detail::write_u32(f, static_cast<std::uint32_t>(cfg.d_model));
    detail::write_u32(f, static_cast<std::uint32_t>(cfg.n_layers));
    detail::write_u32(f, static_cast<std::uint32_t>(cfg.n_heads));
    detail::write_u32(f, static_cast<std::uint32_t>(cfg.d_ff));
    detail::write_u32(f, static_cast<std::uint32_t>(cfg.max_seq_len));
    detail::write_u32(f, cfg.head_kind == HeadKind::TA ? 1u : 0u);
    detail::write_u32(f, static_cast<std::uint32_t>(params.entries.size()));
    for (const auto& [name, t] : params.entries) {
        detail::write_u32(f, static_cast<std::uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        const char tag = sizeof(T) == 8 ? 'd' : 'f';
        f.write(&tag, 1);
        detail::write_u32(f, static_cast<std::uint32_t>(t.shape.size()));
        for (int d : t.shape) {
            detail::write_u32(f, static_cast<std::uint32_t>(d));
        }
        f.write(reinterpret_cast<const char*>(t.data.data()),
                static_cast<std::streamsize>(t.size() * sizeof(T)));
    }
    if (!f) {
        throw ConfigError("failed writing checkpoint: " + path);
    }
}

template <typename T>
std::pair<ParamSet<T>, TransformerConfig> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw ConfigError("cannot open checkpoint: " + path);
    }
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
        throw ConfigError("not a checkpoint file: " + path);
    }
    if (detail::read_u32(f) != 1) {
        throw ConfigError("unsupported checkpoint version: " + path);
    }
    TransformerConfig cfg;
    cfg.vocab_size = static_cast<int>(detail::read_u32(f));
    cfg.d_model = static_cast<int>(detail::read_u32(f));
    cfg.n_layers = static_cast<int>(detail::read_u32(f));
    cfg.n_heads = static_cast<int>(detail::read_u32(f));
    cfg.d_ff = static_cast<int>(detail::read_u32(f));
    cfg.max_seq_len = static_cast<int>(detail::read_u32(f));
    cfg.head_kind = detail::read_u32(f) == 1u ? HeadKind::TA : HeadKind::LM;
    const std::uint32_t n_tensors = detail::read_u32(f);
    ParamSet<T> params;
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        const std::uint32_t name_len = detail::read_u32(f);
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        char tag;
        f.read(&tag, 1);
        if ((tag == 'd') != (sizeof(T) == 8)) {
            throw ConfigError("checkpoint precision does not match requested precision: " + path);
        }
        const std::uint32_t rank = detail::read_u32(f);
        std::vector<int> shape(rank);
        for (auto& d : shape) {
            d = static_cast<int>(detail::read_u32(f));
        }
        Tensor<T> t(shape);
        f.read(reinterpret_cast<char*>(t.data.data()),
               static_cast<std::streamsize>(t.size() * sizeof(T)));
        if (!f) {
            throw ConfigError("truncated checkpoint: " + path);
        }
        params.add(std::move(name), std::move(t));
    }
    return {std::move(params), cfg};
}

}  // namespace taalm
