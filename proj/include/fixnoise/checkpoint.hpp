#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fixnoise/hash.hpp"
#include "fixnoise/parameters.hpp"

namespace fixnoise {

inline constexpr char kCheckpointMagic[4] = {'F', 'X', 'N', 'Z'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 1;

/// Rounds every value to the nearest float32. Training applies this after
/// each update, so checkpoint storage in f32 loses nothing.
inline void quantize_f32(ParameterStore& store) {
    for (auto& [_, t] : store) {
        for (auto& v : t.mutable_data()) v = static_cast<double>(static_cast<float>(v));
    }
}

inline bool is_f32_exact(const ParameterStore& store) {
    for (const auto& [_, t] : store) {
        for (double v : t.data()) {
            if (static_cast<double>(static_cast<float>(v)) != v && !std::isnan(v)) return false;
        }
    }
    return true;
}

/// Metadata document plus named parameter sections (G, G_ema, D, optimizer
/// moments). Section order is the record order on disk.
struct Checkpoint {
    nlohmann::json metadata = nlohmann::json::object();
    std::vector<std::pair<std::string, ParameterStore>> sections;

    bool has_section(const std::string& name) const {
        for (const auto& [n, _] : sections) {
            if (n == name) return true;
        }
        return false;
    }

    const ParameterStore& section(const std::string& name) const {
        for (const auto& [n, s] : sections) {
            if (n == name) return s;
        }
        throw FormatError("checkpoint has no section '" + name + "'");
    }

    ParameterStore& section(const std::string& name) {
        return const_cast<ParameterStore&>(std::as_const(*this).section(name));
    }

    void set_section(const std::string& name, ParameterStore store) {
        for (auto& [n, s] : sections) {
            if (n == name) {
                s = std::move(store);
                return;
            }
        }
        sections.emplace_back(name, std::move(store));
    }
};

namespace detail {

template <class T>
void put_le(std::string& out, T value) {
    static_assert(std::is_unsigned_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

class ByteReader {
public:
    explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

    template <class T>
    T get_le(const char* what) {
        need(sizeof(T), what);
        T value = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            value |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += sizeof(T);
        return value;
    }

    std::string_view take(std::size_t n, const char* what) {
        need(n, what);
        auto out = bytes_.substr(pos_, n);
        pos_ += n;
        return out;
    }

    bool at_end() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) {
            throw CorruptionError(std::string("checkpoint truncated while reading ") + what + " at byte " + std::to_string(pos_));
        }
    }

    std::string_view bytes_;
    std::size_t pos_ = 0;
};

}  // namespace detail

/// Layout (little-endian): "FXNZ", u32 version, u64 metadata length, UTF-8
/// JSON metadata, u64 record count, then per record: u32 name length, name
/// ("<section>/<parameter>"), u8 dtype (1 = f32), u32 rank, u64 extents,
/// f32 payload.
inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
    std::string out(kCheckpointMagic, 4);
    detail::put_le<std::uint32_t>(out, kCheckpointVersion);
    const std::string meta = ckpt.metadata.dump();
    detail::put_le<std::uint64_t>(out, meta.size());
    out += meta;
    std::uint64_t records = 0;
    for (const auto& [_, store] : ckpt.sections) records += store.size();
    detail::put_le<std::uint64_t>(out, records);
    for (const auto& [section, store] : ckpt.sections) {
        for (const auto& [name, t] : store) {
            const std::string full = section + "/" + name;
            detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(full.size()));
            out += full;
            out.push_back(static_cast<char>(kDtypeF32));
            detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
            for (std::size_t d : t.shape()) detail::put_le<std::uint64_t>(out, d);
            for (double v : t.data()) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        }
    }
    return out;
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
    detail::ByteReader in(bytes);
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
        throw FormatError("not a checkpoint: bad magic");
    }
    in.take(4, "magic");
    const auto version = in.get_le<std::uint32_t>("version");
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint ckpt;
    const auto meta_len = in.get_le<std::uint64_t>("metadata length");
    const auto meta = in.take(meta_len, "metadata");
    try {
        ckpt.metadata = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
    }
    const auto records = in.get_le<std::uint64_t>("record count");
    for (std::uint64_t r = 0; r < records; ++r) {
        const auto name_len = in.get_le<std::uint32_t>("record name length");
        const std::string full(in.take(name_len, "record name"));
        const auto slash = full.find('/');
        if (slash == std::string::npos) throw CorruptionError("record name without section: " + full);
        const auto dtype = static_cast<std::uint8_t>(in.take(1, "dtype")[0]);
        if (dtype != kDtypeF32) throw FormatError("unsupported dtype code " + std::to_string(dtype) + " in " + full);
        const auto rank = in.get_le<std::uint32_t>("rank");
        if (rank > 8) throw CorruptionError("implausible rank " + std::to_string(rank) + " in " + full);
        Shape shape(rank);
        std::uint64_t numel = 1;
        for (auto& d : shape) {
            d = static_cast<std::size_t>(in.get_le<std::uint64_t>("extent"));
            numel *= d;
        }
        if (numel > (bytes.size() / 4)) throw CorruptionError("record " + full + " larger than the file");
        std::vector<double> data(numel);
        for (auto& v : data) v = static_cast<double>(std::bit_cast<float>(in.get_le<std::uint32_t>("payload")));
        const std::string section = full.substr(0, slash);
        if (!ckpt.has_section(section)) ckpt.sections.emplace_back(section, ParameterStore{});
        ckpt.section(section).add(full.substr(slash + 1), Tensor::from_data(std::move(shape), std::move(data)));
    }
    if (!in.at_end()) throw CorruptionError("trailing bytes after the last checkpoint record");
    return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    write_file_bytes(path, serialize_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file_bytes(path)); }

}  // namespace fixnoise
