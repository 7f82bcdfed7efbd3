#pragma once

#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "fixnoise/nets.hpp"
#include "fixnoise/png.hpp"
#include "fixnoise/trainer.hpp"

namespace fixnoise {

inline std::string format_alpha(double a) {
    std::ostringstream s;
    s << std::setprecision(6) << a;
    return s.str();
}

/// One row per latent, one column per alpha; with `source` the first column
/// is the source generator's anchored output for the same latent.
struct GridResult {
    std::vector<Image8> cells;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::string> column_labels;
};

inline GridResult interpolation_grid(const GeneratorModel& g, const std::vector<double>& alphas, std::size_t n, std::uint64_t seed,
                                     const GeneratorModel* source = nullptr) {
    if (n == 0) throw UsageError("--n must be >= 1");
    if (alphas.empty()) throw UsageError("--alphas is empty");
    for (double a : alphas) (void)NoiseSpec::interpolated(a);
    if (source != nullptr && !(source->config == g.config)) throw ConfigError("source and target generator configs differ");
    NoGradGuard ng;
    Rng latent_rng(derive_seed(seed, "generate_latents"));
    Rng noise_rng(derive_seed(seed, "generate_noise"));
    const Tensor z = sample_latents(latent_rng, g.config, n);
    const NoiseBundle random = random_noise(noise_rng, g, n);
    const NoiseBundle anchored = anchored_noise(g, n);

    std::vector<Tensor> columns;
    GridResult out;
    if (source != nullptr) {
        columns.push_back(clamp_image(generate(*source, z, anchored_noise(*source, n)).image));
        out.column_labels.push_back("source");
    }
    for (double a : alphas) {
        columns.push_back(clamp_image(generate(g, z, interpolate_noise(anchored, random, a)).image));
        out.column_labels.push_back("alpha=" + format_alpha(a));
    }
    out.rows = n;
    out.cols = columns.size();
    for (std::size_t r = 0; r < n; ++r)
        for (const auto& col : columns) out.cells.push_back(tensor_to_image(detail::gather_rows(col, {r})));
    return out;
}

}  // namespace fixnoise
