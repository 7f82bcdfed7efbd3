#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "fixnoise/errors.hpp"
#include "fixnoise/hash.hpp"
#include "fixnoise/parallel.hpp"
#include "fixnoise/png.hpp"
#include "fixnoise/rng.hpp"

namespace fixnoise {

enum class ShapeFamily { disc, ring, striped_disc };
enum class Background { flat, gradient };
/// single: one shape; field: 3..5 scattered shapes; grid: 2x2 jittered lattice.
enum class Layout { single, field, grid };

using Rgb = std::array<int, 3>;

/// Fractions are relative to the image side.
struct ContentRange {
    double center_lo = 0.3;
    double center_hi = 0.7;
    double radius_lo = 0.18;
    double radius_hi = 0.3;

    bool operator==(const ContentRange&) const = default;
};

struct Texture {
    double grain = 0.0;         // per-pixel N(0, grain) in [0,1] intensity units
    double stripe_period = 0.0;  // pixels; used by striped_disc

    bool operator==(const Texture&) const = default;
};

struct DomainSpec {
    std::string name;
    std::size_t resolution = 16;
    ShapeFamily family = ShapeFamily::disc;
    Layout layout = Layout::single;
    std::vector<Rgb> palette;
    Background background = Background::flat;
    Rgb background_top{0, 0, 0};
    Rgb background_bottom{0, 0, 0};
    ContentRange content;
    Texture texture;

    void validate() const {
        if (palette.empty()) throw ConfigError("domain '" + name + "': palette is empty");
        for (const auto& c : palette)
            for (int v : c)
                if (v < 0 || v > 255) throw ConfigError("domain '" + name + "': palette value out of [0,255]");
        if (resolution < 4) throw ConfigError("domain '" + name + "': resolution must be >= 4");
        const auto& r = content;
        if (!(r.radius_lo > 0.0 && r.radius_lo <= r.radius_hi && r.radius_hi <= 0.5)) {
            throw ConfigError("domain '" + name + "': radius range must satisfy 0 < lo <= hi <= 0.5");
        }
        if (!(r.center_lo >= 0.0 && r.center_lo <= r.center_hi && r.center_hi <= 1.0)) {
            throw ConfigError("domain '" + name + "': center range must lie in [0,1]");
        }
        if (texture.grain < 0.0 || texture.stripe_period < 0.0) throw ConfigError("domain '" + name + "': negative texture");
        if (family == ShapeFamily::striped_disc && texture.stripe_period < 2.0) {
            throw ConfigError("domain '" + name + "': striped_disc needs stripe_period >= 2");
        }
    }

    bool operator==(const DomainSpec&) const = default;
};

NLOHMANN_JSON_SERIALIZE_ENUM(ShapeFamily, {{ShapeFamily::disc, "disc"},
                                           {ShapeFamily::ring, "ring"},
                                           {ShapeFamily::striped_disc, "striped-disc"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Background, {{Background::flat, "flat"}, {Background::gradient, "gradient"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Layout, {{Layout::single, "single"}, {Layout::field, "field"}, {Layout::grid, "grid"}})
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ContentRange, center_lo, center_hi, radius_lo, radius_hi)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(Texture, grain, stripe_period)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(DomainSpec, name, resolution, family, layout, palette, background, background_top,
                                   background_bottom, content, texture)

inline const std::vector<std::string>& domain_preset_names() {
    static const std::vector<std::string> names{"similar-source", "similar-target", "distant-source", "distant-target"};
    return names;
}

/// The similar pair shares layout and content ranges and differs in palette,
/// background, shape family and grain. The distant pair also changes layout.
inline DomainSpec domain_preset(const std::string& name, std::size_t resolution = 16) {
    DomainSpec s;
    s.name = name;
    s.resolution = resolution;
    const std::vector<Rgb> warm{{{235, 120, 60}}, {{225, 190, 70}}, {{205, 70, 95}}};
    const std::vector<Rgb> cool{{{70, 175, 215}}, {{95, 215, 140}}, {{160, 115, 225}}};
    if (name == "similar-source") {
        s.family = ShapeFamily::disc;
        s.palette = warm;
        s.background_top = s.background_bottom = {30, 30, 55};
        s.texture.grain = 0.03;
    } else if (name == "similar-target") {
        s.family = ShapeFamily::ring;
        s.palette = cool;
        s.background = Background::gradient;
        s.background_top = {15, 45, 40};
        s.background_bottom = {70, 85, 60};
        s.texture.grain = 0.09;
    } else if (name == "distant-source") {
        s.family = ShapeFamily::disc;
        s.layout = Layout::field;
        s.palette = warm;
        s.background_top = s.background_bottom = {30, 30, 55};
        s.content = {0.15, 0.85, 0.08, 0.16};
        s.texture.grain = 0.03;
    } else if (name == "distant-target") {
        s.family = ShapeFamily::striped_disc;
        s.layout = Layout::grid;
        s.palette = cool;
        s.background = Background::gradient;
        s.background_top = {20, 20, 20};
        s.background_bottom = {90, 90, 90};
        s.content = {0.2, 0.3, 0.12, 0.2};
        s.texture = {0.06, 3.0};
    } else {
        std::string known;
        for (const auto& n : domain_preset_names()) known += (known.empty() ? "" : ", ") + n;
        throw UsageError("unknown dataset preset '" + name + "' (known: " + known + ")");
    }
    s.validate();
    return s;
}

/// Pixel-unit geometry of one shape.
struct Blob {
    double cx = 0, cy = 0, radius = 0;
    bool operator==(const Blob&) const = default;
};

struct ContentRecord {
    std::vector<Blob> blobs;
    std::size_t palette_index = 0;
    bool operator==(const ContentRecord&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(Blob, cx, cy, radius)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ContentRecord, blobs, palette_index)

/// Content depends only on (layout, content range, palette size, seed, index),
/// so two specs that agree on those produce equal records.
inline ContentRecord sample_content(const DomainSpec& spec, std::uint64_t seed, std::size_t index) {
    Rng rng(derive_seed(seed, "content", index));
    const double side = static_cast<double>(spec.resolution);
    const auto& c = spec.content;
    ContentRecord rec;
    auto blob_at = [&](double fx, double fy) {
        return Blob{fx * side, fy * side, rng.uniform(c.radius_lo, c.radius_hi) * side};
    };
    switch (spec.layout) {
        case Layout::single: {
            const double fx = rng.uniform(c.center_lo, c.center_hi);
            const double fy = rng.uniform(c.center_lo, c.center_hi);
            rec.blobs.push_back(blob_at(fx, fy));
            break;
        }
        case Layout::field: {
            const std::size_t count = 3 + rng.below(3);
            for (std::size_t k = 0; k < count; ++k) {
                const double fx = rng.uniform(c.center_lo, c.center_hi);
                const double fy = rng.uniform(c.center_lo, c.center_hi);
                rec.blobs.push_back(blob_at(fx, fy));
            }
            break;
        }
        case Layout::grid: {
            // center_lo/hi bound the offset of the first lattice point; pitch is half the side.
            const double ox = rng.uniform(c.center_lo, c.center_hi);
            const double oy = rng.uniform(c.center_lo, c.center_hi);
            for (int gy = 0; gy < 2; ++gy)
                for (int gx = 0; gx < 2; ++gx) rec.blobs.push_back(blob_at(ox + 0.5 * gx, oy + 0.5 * gy));
            break;
        }
    }
    rec.palette_index = static_cast<std::size_t>(rng.below(spec.palette.size()));
    return rec;
}

namespace detail {

inline double shape_mask(ShapeFamily family, const Blob& b, double x, double y, double stripe_period, double phase) {
    const double d = std::hypot(x - b.cx, y - b.cy);
    if (d > b.radius) return 0.0;
    switch (family) {
        case ShapeFamily::disc: return 1.0;
        case ShapeFamily::ring: return d >= 0.55 * b.radius ? 1.0 : 0.0;
        case ShapeFamily::striped_disc: return std::fmod(x + y + phase, stripe_period) < 0.5 * stripe_period ? 1.0 : 0.5;
    }
    return 0.0;
}

}  // namespace detail

/// 4x4 supersampled rasterization plus per-pixel grain from the image's own
/// texture stream.
inline Image8 render_domain_image(const DomainSpec& spec, const ContentRecord& rec, std::uint64_t seed, std::size_t index) {
    Rng tex(derive_seed(seed, "texture", index));
    const double phase = spec.texture.stripe_period > 0 ? tex.uniform(0.0, spec.texture.stripe_period) : 0.0;
    const std::size_t n = spec.resolution;
    const Rgb& fg = spec.palette.at(rec.palette_index);
    constexpr int kSub = 4;
    Image8 img = Image8::blank(n, n);
    for (std::size_t py = 0; py < n; ++py) {
        const double t = n > 1 ? static_cast<double>(py) / static_cast<double>(n - 1) : 0.0;
        std::array<double, 3> bg{};
        for (int c = 0; c < 3; ++c) {
            bg[c] = spec.background == Background::flat
                        ? spec.background_top[c]
                        : (1.0 - t) * spec.background_top[c] + t * spec.background_bottom[c];
            bg[c] /= 255.0;
        }
        for (std::size_t px = 0; px < n; ++px) {
            double cover = 0.0, shade = 0.0;
            for (int sy = 0; sy < kSub; ++sy)
                for (int sx = 0; sx < kSub; ++sx) {
                    const double x = static_cast<double>(px) + (sx + 0.5) / kSub;
                    const double y = static_cast<double>(py) + (sy + 0.5) / kSub;
                    double m = 0.0;
                    for (const Blob& b : rec.blobs) {
                        const double v = detail::shape_mask(spec.family, b, x, y, spec.texture.stripe_period, phase);
                        if (v > 0.0) m = v;
                    }
                    if (m > 0.0) {
                        cover += 1.0;
                        shade += m;
                    }
                }
            cover /= kSub * kSub;
            const double brightness = cover > 0.0 ? shade / (cover * kSub * kSub) : 1.0;
            std::uint8_t* out = img.at(px, py);
            for (int c = 0; c < 3; ++c) {
                double v = (1.0 - cover) * bg[c] + cover * brightness * fg[c] / 255.0;
                if (spec.texture.grain > 0.0) v += spec.texture.grain * tex.normal();
                out[c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            }
        }
    }
    return img;
}

struct ManifestEntry {
    std::string file;
    std::string sha256;
    ContentRecord content;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ManifestEntry, file, sha256, content)

struct DatasetManifest {
    DomainSpec spec;
    std::uint64_t seed = 0;
    std::size_t count = 0;
    std::vector<ManifestEntry> entries;
};

inline void to_json(nlohmann::json& j, const DatasetManifest& m) {
    j = {{"spec", m.spec}, {"seed", m.seed}, {"count", m.count}, {"images", m.entries}};
}

inline void from_json(const nlohmann::json& j, DatasetManifest& m) {
    j.at("spec").get_to(m.spec);
    j.at("seed").get_to(m.seed);
    j.at("count").get_to(m.count);
    j.at("images").get_to(m.entries);
    if (m.entries.size() != m.count) {
        throw CorruptionError("manifest lists " + std::to_string(m.entries.size()) + " files but count is " +
                              std::to_string(m.count));
    }
}

struct RenderedDomain {
    std::vector<Image8> images;
    std::vector<ContentRecord> content;
};

inline RenderedDomain render_domain(const DomainSpec& spec, std::uint64_t seed, std::size_t n) {
    spec.validate();
    if (n == 0) throw UsageError("dataset size must be >= 1");
    RenderedDomain out;
    out.images.resize(n);
    out.content.resize(n);
    parallel_for(n, [&](std::size_t i) {
        out.content[i] = sample_content(spec, seed, i);
        out.images[i] = render_domain_image(spec, out.content[i], seed, i);
    });
    return out;
}

inline constexpr const char* kManifestName = "manifest.json";

/// Writes img_NNNNN.png files and manifest.json into out_dir; returns the manifest.
inline DatasetManifest generate_domain_dataset(const DomainSpec& spec, std::uint64_t seed, std::size_t n,
                                               const std::string& out_dir) {
    const RenderedDomain rendered = render_domain(spec, seed, n);
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create dataset directory " + out_dir + ": " + ec.message());
    DatasetManifest m{spec, seed, n, std::vector<ManifestEntry>(n)};
    parallel_for(n, [&](std::size_t i) {
        char name[32];
        std::snprintf(name, sizeof(name), "img_%05zu.png", i);
        const std::string bytes = png_encode(rendered.images[i]);
        write_file_bytes((std::filesystem::path(out_dir) / name).string(), bytes);
        m.entries[i] = {name, sha256_hex(bytes), rendered.content[i]};
    });
    write_file_bytes((std::filesystem::path(out_dir) / kManifestName).string(), nlohmann::json(m).dump(1));
    return m;
}

inline DatasetManifest read_manifest(const std::string& manifest_path) {
    try {
        return nlohmann::json::parse(read_file_bytes(manifest_path)).get<DatasetManifest>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed manifest " + manifest_path + ": " + e.what());
    }
}

struct LoadedDataset {
    DatasetManifest manifest;
    std::vector<Tensor> images;  // [3 x R x R] each, manifest order
};

/// Accepts a manifest path or the directory containing manifest.json. Every
/// file is hash-checked before decoding.
inline LoadedDataset load_dataset(const std::string& path) {
    std::filesystem::path manifest_path(path);
    if (std::filesystem::is_directory(manifest_path)) manifest_path /= kManifestName;
    LoadedDataset out{read_manifest(manifest_path.string()), {}};
    const auto dir = manifest_path.parent_path();
    out.images.resize(out.manifest.count);
    parallel_for(out.manifest.count, [&](std::size_t i) {
        const auto& e = out.manifest.entries[i];
        const std::string file = (dir / e.file).string();
        const std::string bytes = read_file_bytes(file);
        if (sha256_hex(bytes) != e.sha256) throw CorruptionError("hash mismatch for dataset file " + file);
        const Image8 img = png_decode(bytes);
        if (img.width != out.manifest.spec.resolution || img.height != out.manifest.spec.resolution) {
            throw CorruptionError("dataset file " + file + " has the wrong extent");
        }
        out.images[i] = image_to_tensor(img);
    });
    return out;
}

/// Stacks [3 x H x W] images into one [N x 3 x H x W] batch.
inline Tensor stack_images(const std::vector<Tensor>& images) {
    if (images.empty()) return Tensor::zeros({0, 3, 1, 1});
    const Shape& s = images.front().shape();
    std::vector<double> data;
    data.reserve(images.size() * images.front().numel());
    for (const Tensor& t : images) {
        if (t.shape() != s) throw DimensionError("stack_images: mixed extents " + shape_str(t.shape()) + " vs " + shape_str(s));
        data.insert(data.end(), t.data().begin(), t.data().end());
    }
    return Tensor::from_data({images.size(), s[0], s[1], s[2]}, std::move(data));
}

inline Tensor images_to_batch(const std::vector<Image8>& images) {
    std::vector<Tensor> ts;
    ts.reserve(images.size());
    for (const auto& im : images) ts.push_back(image_to_tensor(im));
    return stack_images(ts);
}

/// Normalized intensity histogram over every channel of every pixel.
inline std::vector<double> pixel_histogram(const std::vector<Image8>& images, std::size_t bins = 32) {
    std::vector<double> h(bins, 0.0);
    double total = 0.0;
    for (const auto& im : images)
        for (std::uint8_t v : im.rgb) {
            h[static_cast<std::size_t>(v) * bins / 256] += 1.0;
            total += 1.0;
        }
    if (total > 0.0)
        for (auto& v : h) v /= total;
    return h;
}

/// Symmetric chi-square distance, sum (a-b)^2 / (a+b) over nonempty bins.
inline double chi_square_distance(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw DimensionError("histograms differ in bin count");
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] + b[i] > 0.0) d += (a[i] - b[i]) * (a[i] - b[i]) / (a[i] + b[i]);
    return d;
}

}  // namespace fixnoise
