#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "fixnoise/parameters.hpp"
#include "fixnoise/rng.hpp"
#include "fixnoise/tensor.hpp"

namespace fixnoise {

inline constexpr double kLreluGain = 1.4142135623730951;  // sqrt(2)
inline constexpr double kLreluSlope = 0.2;

// ---------------------------------------------------------------------------
// Configuration

struct GeneratorConfig {
    int z_dim = 64;
    int w_dim = 64;
    int base_resolution = 4;
    int final_resolution = 32;
    int mapping_layers = 2;
    /// Resolution -> channel count. Missing entries fall back to 64 at the
    /// base resolution, halving per doubling.
    std::map<int, int> channels;
    double mapping_lr_multiplier = 0.01;
    double noise_strength_init = 0.0;

    int channels_at(int resolution) const {
        if (auto it = channels.find(resolution); it != channels.end()) return it->second;
        int c = 64;
        for (int r = base_resolution; r < resolution; r *= 2) c = std::max(1, c / 2);
        return c;
    }

    int resolution_steps() const {
        int steps = 0;
        for (int r = base_resolution; r < final_resolution; r *= 2) ++steps;
        return steps;
    }

    /// L, the number of feature convolution layers: one at the base
    /// resolution plus two per doubling.
    int num_feature_layers() const { return 1 + 2 * resolution_steps(); }

    std::vector<int> resolutions() const {
        std::vector<int> out;
        for (int r = base_resolution; r <= final_resolution; r *= 2) out.push_back(r);
        return out;
    }

    void validate() const {
        auto pow2 = [](int v) { return v > 0 && (v & (v - 1)) == 0; };
        if (z_dim < 1 || w_dim < 1) throw ConfigError("z_dim and w_dim must be positive");
        if (mapping_layers < 1) throw ConfigError("mapping_layers must be >= 1");
        if (!pow2(base_resolution) || !pow2(final_resolution) || final_resolution < base_resolution) {
            throw ConfigError("final_resolution must be a power of two >= base_resolution (got " +
                              std::to_string(final_resolution) + ")");
        }
        for (int r : resolutions()) {
            if (channels_at(r) < 1) throw ConfigError("channel count must be positive at resolution " + std::to_string(r));
        }
        if (!(mapping_lr_multiplier > 0.0)) throw ConfigError("mapping_lr_multiplier must be positive");
    }

    bool operator==(const GeneratorConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const GeneratorConfig& c) {
    nlohmann::json ch = nlohmann::json::object();
    for (int r : c.resolutions()) ch[std::to_string(r)] = c.channels_at(r);
    j = {{"z_dim", c.z_dim},
         {"w_dim", c.w_dim},
         {"base_resolution", c.base_resolution},
         {"final_resolution", c.final_resolution},
         {"mapping_layers", c.mapping_layers},
         {"channels", ch},
         {"mapping_lr_multiplier", c.mapping_lr_multiplier},
         {"noise_strength_init", c.noise_strength_init}};
}

inline void from_json(const nlohmann::json& j, GeneratorConfig& c) {
    static const std::vector<std::string> known = {"z_dim", "w_dim", "base_resolution", "final_resolution",
                                                   "mapping_layers", "channels", "mapping_lr_multiplier",
                                                   "noise_strength_init"};
    for (const auto& [key, _] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw ConfigError("unknown generator config key '" + key + "'");
        }
    }
    c.z_dim = j.value("z_dim", c.z_dim);
    c.w_dim = j.value("w_dim", c.w_dim);
    c.base_resolution = j.value("base_resolution", c.base_resolution);
    c.final_resolution = j.value("final_resolution", c.final_resolution);
    c.mapping_layers = j.value("mapping_layers", c.mapping_layers);
    c.mapping_lr_multiplier = j.value("mapping_lr_multiplier", c.mapping_lr_multiplier);
    c.noise_strength_init = j.value("noise_strength_init", c.noise_strength_init);
    if (j.contains("channels")) {
        c.channels.clear();
        for (const auto& [key, value] : j.at("channels").items()) c.channels[std::stoi(key)] = value.get<int>();
    }
    c.validate();
}

// ---------------------------------------------------------------------------
// Layer ladder

enum class LayerKind { conv, to_rgb };

/// One synthesis layer in forward order. Feature convolutions and tRGB
/// layers are interleaved; this ordering is also the unified index used by
/// Freeze G and Layer-swap.
struct LadderLayer {
    std::string prefix;
    LayerKind kind = LayerKind::conv;
    int resolution = 4;
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 3;
    bool upsample = false;
    int feature_index = -1;  // position in the FeatureStack, conv layers only
    int rgb_index = -1;      // position among tRGB outputs
};

inline std::vector<LadderLayer> synthesis_ladder(const GeneratorConfig& cfg) {
    std::vector<LadderLayer> out;
    int feature = 0;
    int rgb = 0;
    for (int r : cfg.resolutions()) {
        const std::string block = "synthesis.b" + std::to_string(r);
        const int c = cfg.channels_at(r);
        if (r == cfg.base_resolution) {
            out.push_back({block + ".conv1", LayerKind::conv, r, c, c, 3, false, feature++, -1});
        } else {
            const int prev = cfg.channels_at(r / 2);
            out.push_back({block + ".conv0", LayerKind::conv, r, prev, c, 3, true, feature++, -1});
            out.push_back({block + ".conv1", LayerKind::conv, r, c, c, 3, false, feature++, -1});
        }
        out.push_back({block + ".torgb", LayerKind::to_rgb, r, c, 3, 1, false, -1, rgb++});
    }
    return out;
}

/// Parameter names owned by ladder layer `index` (the learned constant input
/// belongs to the first layer).
inline std::vector<std::string> ladder_parameter_names(const GeneratorConfig& cfg, std::size_t index) {
    const auto ladder = synthesis_ladder(cfg);
    const auto& layer = ladder.at(index);
    std::vector<std::string> names;
    if (index == 0) names.push_back("synthesis.input");
    for (const char* leaf : {".affine.weight", ".affine.bias", ".weight", ".bias"}) names.push_back(layer.prefix + leaf);
    if (layer.kind == LayerKind::conv) names.push_back(layer.prefix + ".noise_strength");
    return names;
}

inline std::vector<std::string> mapping_parameter_names(const GeneratorConfig& cfg) {
    std::vector<std::string> names;
    for (int i = 0; i < cfg.mapping_layers; ++i) {
        names.push_back("mapping.fc" + std::to_string(i) + ".weight");
        names.push_back("mapping.fc" + std::to_string(i) + ".bias");
    }
    return names;
}

// ---------------------------------------------------------------------------
// Generator model

struct GeneratorModel {
    GeneratorConfig config;
    ParameterStore params;
    std::uint64_t anchor_seed = 0;
    bool anchor_zero = false;

    /// Equalized learning rate: weights are stored N(0, 1) (mapping weights
    /// N(0, 1/lr_mul^2)) and scaled by 1/sqrt(fan_in) at runtime.
    static GeneratorModel create(const GeneratorConfig& cfg, std::uint64_t init_seed, std::uint64_t anchor_seed) {
        cfg.validate();
        GeneratorModel m;
        m.config = cfg;
        m.anchor_seed = anchor_seed;
        Rng rng(init_seed);
        auto randn = [&](Shape s, double scale_by_value) {
            Tensor t = Tensor::zeros(std::move(s));
            for (auto& v : t.mutable_data()) v = rng.normal() * scale_by_value;
            return t;
        };
        const auto w_dim = static_cast<std::size_t>(cfg.w_dim);
        for (int i = 0; i < cfg.mapping_layers; ++i) {
            const auto in = static_cast<std::size_t>(i == 0 ? cfg.z_dim : cfg.w_dim);
            m.params.add("mapping.fc" + std::to_string(i) + ".weight", randn({w_dim, in}, 1.0 / cfg.mapping_lr_multiplier));
            m.params.add("mapping.fc" + std::to_string(i) + ".bias", Tensor::zeros({w_dim}));
        }
        const auto c0 = static_cast<std::size_t>(cfg.channels_at(cfg.base_resolution));
        const auto b = static_cast<std::size_t>(cfg.base_resolution);
        m.params.add("synthesis.input", randn({c0, b, b}, 1.0));
        for (const auto& layer : synthesis_ladder(cfg)) {
            const auto in = static_cast<std::size_t>(layer.in_channels);
            const auto out = static_cast<std::size_t>(layer.out_channels);
            const auto k = static_cast<std::size_t>(layer.kernel);
            m.params.add(layer.prefix + ".affine.weight", randn({in, w_dim}, 1.0));
            m.params.add(layer.prefix + ".affine.bias", Tensor::full({in}, 1.0));
            m.params.add(layer.prefix + ".weight", randn({out, in, k, k}, 1.0));
            m.params.add(layer.prefix + ".bias", Tensor::zeros({out}));
            if (layer.kind == LayerKind::conv) {
                m.params.add(layer.prefix + ".noise_strength", Tensor::full({1}, cfg.noise_strength_init));
            }
        }
        return m;
    }

    GeneratorModel clone() const {
        GeneratorModel m;
        m.config = config;
        m.params = params.clone();
        m.anchor_seed = anchor_seed;
        m.anchor_zero = anchor_zero;
        return m;
    }

    int num_feature_layers() const { return config.num_feature_layers(); }
};

/// Latent codes as an [N x z_dim] tensor (a single [z_dim] vector is
/// treated as N = 1).
inline Tensor as_batch(const Tensor& z) {
    if (z.rank() == 1) return reshape(z, {1, z.dim(0)});
    if (z.rank() != 2) throw DimensionError("latent batch must be [N x dim], got " + shape_str(z.shape()));
    return z;
}

/// z -> w. Each row of z is rescaled to unit RMS, then passes through the
/// mapping MLP (leaky ReLU between layers, linear output layer).
inline Tensor map_latent(const Tensor& z_in, const GeneratorModel& model) {
    const Tensor z = as_batch(z_in);
    const auto& cfg = model.config;
    if (static_cast<int>(z.dim(1)) != cfg.z_dim) {
        throw DimensionError("latent width " + std::to_string(z.dim(1)) + " does not match z_dim " + std::to_string(cfg.z_dim));
    }
    if (!all_finite(z.data())) throw DegenerateInputError("latent code contains non-finite values");
    const std::size_t n = z.dim(0), d = z.dim(1);
    std::vector<double> normed(z.data().begin(), z.data().end());
    for (std::size_t i = 0; i < n; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < d; ++j) ss += normed[i * d + j] * normed[i * d + j];
        if (ss == 0.0) throw DegenerateInputError("zero latent vector cannot be RMS-normalized");
        const double rms = std::sqrt(ss / static_cast<double>(d));
        for (std::size_t j = 0; j < d; ++j) normed[i * d + j] /= rms;
    }
    Tensor x = Tensor::from_data({n, d}, std::move(normed));
    const double lr_mul = cfg.mapping_lr_multiplier;
    for (int i = 0; i < cfg.mapping_layers; ++i) {
        const std::string p = "mapping.fc" + std::to_string(i);
        const Tensor& w = model.params.at(p + ".weight");
        const double gain = lr_mul / std::sqrt(static_cast<double>(w.dim(1)));
        x = add_bias(matmul(x, transpose(scale(w, gain))), scale(model.params.at(p + ".bias"), lr_mul));
        if (i + 1 < cfg.mapping_layers) x = scale(leaky_relu(x, kLreluSlope), kLreluGain);
    }
    return x;
}

// ---------------------------------------------------------------------------
// Noise

enum class NoiseMode { random, anchored, interpolated };

struct NoiseSpec {
    NoiseMode mode = NoiseMode::random;
    double alpha = 0.0;

    static NoiseSpec random() { return {NoiseMode::random, 0.0}; }
    static NoiseSpec anchored() { return {NoiseMode::anchored, 1.0}; }
    static NoiseSpec interpolated(double alpha) {
        if (!(alpha >= 0.0 && alpha <= 1.0)) {
            throw UsageError("interpolation weight must lie in [0, 1], got " + std::to_string(alpha));
        }
        return {NoiseMode::interpolated, alpha};
    }
};

/// Per-layer single-channel noise fields, one [N x 1 x H x W] tensor per
/// feature convolution layer.
struct NoiseBundle {
    NoiseSpec spec;
    std::vector<Tensor> fields;

    std::size_t batch() const { return fields.empty() ? 0 : fields.front().dim(0); }
};

inline std::vector<int> noise_extents(const GeneratorConfig& cfg) {
    std::vector<int> out;
    for (const auto& layer : synthesis_ladder(cfg)) {
        if (layer.kind == LayerKind::conv) out.push_back(layer.resolution);
    }
    return out;
}

/// The anchor point: fields regenerated from the model's anchor seed (or
/// zeros with anchor_zero), identical for every sample in the batch.
inline NoiseBundle anchored_noise(const GeneratorModel& model, std::size_t batch) {
    NoiseBundle out{NoiseSpec::anchored(), {}};
    Rng rng(model.anchor_seed);
    for (int r : noise_extents(model.config)) {
        const auto hw = static_cast<std::size_t>(r) * static_cast<std::size_t>(r);
        std::vector<double> one = model.anchor_zero ? std::vector<double>(hw, 0.0) : rng.normals(hw);
        std::vector<double> data;
        data.reserve(batch * hw);
        for (std::size_t n = 0; n < batch; ++n) data.insert(data.end(), one.begin(), one.end());
        out.fields.push_back(Tensor::from_data({batch, 1, static_cast<std::size_t>(r), static_cast<std::size_t>(r)}, std::move(data)));
    }
    return out;
}

inline NoiseBundle random_noise(Rng& rng, const GeneratorModel& model, std::size_t batch) {
    NoiseBundle out{NoiseSpec::random(), {}};
    for (int r : noise_extents(model.config)) {
        const auto e = static_cast<std::size_t>(r);
        out.fields.push_back(Tensor::from_data({batch, 1, e, e}, rng.normals(batch * e * e)));
    }
    return out;
}

/// alpha * p_anch + (1 - alpha) * p_rand, elementwise.
inline NoiseBundle interpolate_noise(const NoiseBundle& anchored, const NoiseBundle& random, double alpha) {
    NoiseBundle out{NoiseSpec::interpolated(alpha), {}};
    if (anchored.fields.size() != random.fields.size()) throw DimensionError("noise bundles have different layer counts");
    for (std::size_t l = 0; l < anchored.fields.size(); ++l) {
        const auto& a = anchored.fields[l];
        const auto& r = random.fields[l];
        if (a.shape() != r.shape()) throw DimensionError("noise field shapes differ at layer " + std::to_string(l));
        std::vector<double> data(a.numel());
        for (std::size_t i = 0; i < data.size(); ++i) data[i] = alpha * a[i] + (1.0 - alpha) * r[i];
        out.fields.push_back(Tensor::from_data(a.shape(), std::move(data)));
    }
    return out;
}

/// Random and Interpolated draw from `rng`; Anchored ignores it.
inline NoiseBundle sample_noise(Rng& rng, const GeneratorModel& model, NoiseSpec spec, std::size_t batch) {
    switch (spec.mode) {
        case NoiseMode::random:
            return random_noise(rng, model, batch);
        case NoiseMode::anchored:
            return anchored_noise(model, batch);
        case NoiseMode::interpolated: {
            const auto alpha = NoiseSpec::interpolated(spec.alpha).alpha;
            return interpolate_noise(anchored_noise(model, batch), random_noise(rng, model, batch), alpha);
        }
    }
    throw UsageError("unknown noise mode");
}

// ---------------------------------------------------------------------------
// Style space

/// Per-layer affine outputs s_l = A_l(w), one [N x in_channels] tensor per
/// ladder layer (feature convolutions and tRGB layers alike).
struct StyleSpaceVector {
    std::vector<Tensor> styles;

    std::size_t layers() const { return styles.size(); }
    std::size_t width(std::size_t layer) const { return styles.at(layer).dim(1); }
};

inline StyleSpaceVector style_vectors(const Tensor& w, const GeneratorModel& model) {
    StyleSpaceVector out;
    const double gain = 1.0 / std::sqrt(static_cast<double>(model.config.w_dim));
    for (const auto& layer : synthesis_ladder(model.config)) {
        const Tensor& a = model.params.at(layer.prefix + ".affine.weight");
        out.styles.push_back(add_bias(matmul(w, transpose(scale(a, gain))), model.params.at(layer.prefix + ".affine.bias")));
    }
    return out;
}

/// Copy of `s` with `delta` added to one (layer, channel) coordinate of
/// every sample.
inline StyleSpaceVector modulate_style(const StyleSpaceVector& s, std::size_t layer, std::size_t channel, double delta) {
    if (layer >= s.layers()) throw IndexError("style layer " + std::to_string(layer) + " out of range");
    if (channel >= s.width(layer)) throw IndexError("style channel " + std::to_string(channel) + " out of range");
    StyleSpaceVector out = s;
    const Tensor& src = s.styles[layer];
    std::vector<double> offset(src.numel(), 0.0);
    for (std::size_t n = 0; n < src.dim(0); ++n) offset[n * src.dim(1) + channel] = delta;
    out.styles[layer] = add(src, Tensor::from_data(src.shape(), std::move(offset)));
    return out;
}

// ---------------------------------------------------------------------------
// Synthesis

struct SynthesisResult {
    Tensor image;                  // [N x 3 x R x R], nominal range [-1, 1]
    std::vector<Tensor> features;  // F_1..F_L when requested
    std::vector<Tensor> rgb;       // per-resolution tRGB outputs before skip summation
};

namespace detail {

/// Modulated convolution. Modulating the input channels by s and rescaling
/// output channels by the demodulation factor is algebraically identical to
/// convolving with per-sample weights w * s / ||w * s||.
inline Tensor modulated_conv(const Tensor& x, const Tensor& style, const Tensor& weight, bool demodulate) {
    const std::size_t out_c = weight.dim(0), in_c = weight.dim(1), k = weight.dim(2);
    const double gain = 1.0 / std::sqrt(static_cast<double>(in_c * k * k));
    const Tensor w = scale(weight, gain);
    Tensor y = conv2d(mul_channel(x, style), w);
    if (!demodulate) return y;
    const Tensor per_tap = reshape(square(w), {out_c * in_c, k * k});
    const Tensor wsq = reshape(matmul(per_tap, Tensor::full({k * k, 1}, 1.0)), {out_c, in_c});
    const Tensor d = rsqrt(add_scalar(matmul(square(style), transpose(wsq)), 1e-8));
    return mul_channel(y, d);
}

}  // namespace detail

inline void check_noise(const GeneratorModel& model, const NoiseBundle& noise, std::size_t batch) {
    const auto extents = noise_extents(model.config);
    if (noise.fields.size() != extents.size()) {
        throw DimensionError("noise bundle has " + std::to_string(noise.fields.size()) + " fields, model needs " +
                             std::to_string(extents.size()));
    }
    for (std::size_t l = 0; l < extents.size(); ++l) {
        const auto e = static_cast<std::size_t>(extents[l]);
        const Shape want{batch, 1, e, e};
        if (noise.fields[l].shape() != want) {
            throw DimensionError("noise field " + std::to_string(l) + " has shape " + shape_str(noise.fields[l].shape()) +
                                 ", expected " + shape_str(want));
        }
    }
}

inline SynthesisResult synthesize_styles(const GeneratorModel& model, const StyleSpaceVector& styles,
                                         const NoiseBundle& noise, bool want_features = false) {
    const auto ladder = synthesis_ladder(model.config);
    if (styles.layers() != ladder.size()) throw DimensionError("style vector has wrong layer count");
    const std::size_t batch = styles.styles.front().dim(0);
    check_noise(model, noise, batch);

    const Tensor& input = model.params.at("synthesis.input");
    Tensor x = expand_batch(reshape(input, {1, input.dim(0), input.dim(1), input.dim(2)}), batch);
    Tensor image;
    SynthesisResult out;
    for (std::size_t i = 0; i < ladder.size(); ++i) {
        const auto& layer = ladder[i];
        const auto& p = model.params;
        if (layer.kind == LayerKind::conv) {
            if (layer.upsample) x = up2x(x);
            x = detail::modulated_conv(x, styles.styles[i], p.at(layer.prefix + ".weight"), true);
            const Tensor& field = noise.fields[static_cast<std::size_t>(layer.feature_index)];
            x = add(x, broadcast_channels(scale_by(field, p.at(layer.prefix + ".noise_strength")), x.dim(1)));
            x = scale(leaky_relu(add_bias(x, p.at(layer.prefix + ".bias")), kLreluSlope), kLreluGain);
            if (want_features) out.features.push_back(x);
        } else {
            Tensor rgb = add_bias(detail::modulated_conv(x, styles.styles[i], p.at(layer.prefix + ".weight"), false),
                                  p.at(layer.prefix + ".bias"));
            out.rgb.push_back(rgb);
            image = image.defined() ? add(up2x(image), rgb) : rgb;
        }
    }
    out.image = image;
    return out;
}

inline SynthesisResult synthesize(const GeneratorModel& model, const Tensor& w, const NoiseBundle& noise,
                                  bool want_features = false) {
    if (w.rank() != 2 || static_cast<int>(w.dim(1)) != model.config.w_dim) {
        throw DimensionError("style input must be [N x w_dim], got " + shape_str(w.shape()));
    }
    return synthesize_styles(model, style_vectors(w, model), noise, want_features);
}

inline SynthesisResult generate(const GeneratorModel& model, const Tensor& z, const NoiseBundle& noise,
                                bool want_features = false) {
    return synthesize(model, map_latent(z, model), noise, want_features);
}

/// Standard-normal latent batch [N x z_dim].
inline Tensor sample_latents(Rng& rng, const GeneratorConfig& cfg, std::size_t n) {
    return Tensor::from_data({n, static_cast<std::size_t>(cfg.z_dim)}, rng.normals(n * static_cast<std::size_t>(cfg.z_dim)));
}

/// Values outside [-1, 1] clipped; used only when images leave the model
/// (PNG export, metric extraction).
inline Tensor clamp_image(const Tensor& image) {
    std::vector<double> data(image.data().begin(), image.data().end());
    for (auto& v : data) v = std::clamp(v, -1.0, 1.0);
    return Tensor::from_data(image.shape(), std::move(data));
}

// ---------------------------------------------------------------------------
// Discriminator

/// Residual convolutional critic mirroring the generator's channel ladder.
struct DiscriminatorModel {
    GeneratorConfig config;
    ParameterStore params;

    static DiscriminatorModel create(const GeneratorConfig& cfg, std::uint64_t init_seed) {
        cfg.validate();
        DiscriminatorModel d;
        d.config = cfg;
        Rng rng(init_seed);
        auto randn = [&](Shape s) {
            Tensor t = Tensor::zeros(std::move(s));
            for (auto& v : t.mutable_data()) v = rng.normal();
            return t;
        };
        auto ch = [&](int r) { return static_cast<std::size_t>(cfg.channels_at(r)); };
        const int top = cfg.final_resolution;
        const std::string t = "disc.b" + std::to_string(top);
        d.params.add(t + ".fromrgb.weight", randn({ch(top), 3, 1, 1}));
        d.params.add(t + ".fromrgb.bias", Tensor::zeros({ch(top)}));
        for (int r = top; r > cfg.base_resolution; r /= 2) {
            const std::string b = "disc.b" + std::to_string(r);
            d.params.add(b + ".conv0.weight", randn({ch(r), ch(r), 3, 3}));
            d.params.add(b + ".conv0.bias", Tensor::zeros({ch(r)}));
            d.params.add(b + ".conv1.weight", randn({ch(r / 2), ch(r), 3, 3}));
            d.params.add(b + ".conv1.bias", Tensor::zeros({ch(r / 2)}));
            d.params.add(b + ".skip.weight", randn({ch(r / 2), ch(r), 1, 1}));
        }
        const int base = cfg.base_resolution;
        const std::string e = "disc.b" + std::to_string(base);
        const std::size_t flat = ch(base) * static_cast<std::size_t>(base * base);
        d.params.add(e + ".conv.weight", randn({ch(base), ch(base), 3, 3}));
        d.params.add(e + ".conv.bias", Tensor::zeros({ch(base)}));
        d.params.add(e + ".fc.weight", randn({ch(base), flat}));
        d.params.add(e + ".fc.bias", Tensor::zeros({ch(base)}));
        d.params.add(e + ".out.weight", randn({1, ch(base)}));
        d.params.add(e + ".out.bias", Tensor::zeros({1}));
        return d;
    }

    DiscriminatorModel clone() const {
        DiscriminatorModel d;
        d.config = config;
        d.params = params.clone();
        return d;
    }
};

namespace detail {

inline Tensor eq_conv(const Tensor& x, const Tensor& w) {
    const double gain = 1.0 / std::sqrt(static_cast<double>(w.dim(1) * w.dim(2) * w.dim(3)));
    return conv2d(x, scale(w, gain));
}

inline Tensor eq_dense(const Tensor& x, const Tensor& w) {
    const double gain = 1.0 / std::sqrt(static_cast<double>(w.dim(1)));
    return matmul(x, transpose(scale(w, gain)));
}

inline Tensor act(const Tensor& x) { return scale(leaky_relu(x, kLreluSlope), kLreluGain); }

}  // namespace detail

/// One unbounded logit per image, shape [N].
inline Tensor discriminate(const DiscriminatorModel& d, const Tensor& images) {
    const auto& cfg = d.config;
    const auto res = static_cast<std::size_t>(cfg.final_resolution);
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != res || images.dim(3) != res) {
        throw DimensionError("discriminator expects [N x 3 x " + std::to_string(res) + " x " + std::to_string(res) +
                             "], got " + shape_str(images.shape()));
    }
    const auto& p = d.params;
    const std::string t = "disc.b" + std::to_string(cfg.final_resolution);
    Tensor x = detail::act(add_bias(detail::eq_conv(images, p.at(t + ".fromrgb.weight")), p.at(t + ".fromrgb.bias")));
    const double inv_sqrt2 = 1.0 / kLreluGain;
    for (int r = cfg.final_resolution; r > cfg.base_resolution; r /= 2) {
        const std::string b = "disc.b" + std::to_string(r);
        const Tensor skip = down2x(detail::eq_conv(x, p.at(b + ".skip.weight")));
        Tensor h = detail::act(add_bias(detail::eq_conv(x, p.at(b + ".conv0.weight")), p.at(b + ".conv0.bias")));
        h = detail::act(add_bias(detail::eq_conv(h, p.at(b + ".conv1.weight")), p.at(b + ".conv1.bias")));
        x = scale(add(down2x(h), skip), inv_sqrt2);
    }
    const std::string e = "disc.b" + std::to_string(cfg.base_resolution);
    x = detail::act(add_bias(detail::eq_conv(x, p.at(e + ".conv.weight")), p.at(e + ".conv.bias")));
    const std::size_t n = x.dim(0);
    x = reshape(x, {n, x.numel() / n});
    x = detail::act(add_bias(detail::eq_dense(x, p.at(e + ".fc.weight")), p.at(e + ".fc.bias")));
    x = add_bias(detail::eq_dense(x, p.at(e + ".out.weight")), p.at(e + ".out.bias"));
    return reshape(x, {n});
}

}  // namespace fixnoise
