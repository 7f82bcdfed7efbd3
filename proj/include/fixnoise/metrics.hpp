#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fixnoise/nets.hpp"
#include "fixnoise/ops.hpp"
#include "fixnoise/rng.hpp"

namespace fixnoise {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Feature extractor

/// Fixed random conv ladder. Stage k runs conv3x3 + bias + leaky ReLU at
/// resolution R / 2^k; stages stop at 4x4 or after three. Channel widths end
/// at `dim`. The embedding is the global average of the last stage.
struct FeatureExtractor {
    std::uint64_t seed = 0;
    std::size_t dim = 64;
    std::size_t resolution = 16;
    std::vector<Tensor> weights;  // [out x in x 3 x 3]
    std::vector<Tensor> biases;   // [out]

    static FeatureExtractor create(std::uint64_t seed, std::size_t resolution, std::size_t dim = 64) {
        if (dim < 4) throw ConfigError("extractor dimension must be >= 4");
        if (resolution < 4 || (resolution & (resolution - 1)) != 0) {
            throw ConfigError("extractor resolution must be a power of two >= 4");
        }
        std::size_t stages = 1;
        for (std::size_t r = resolution; r > 4 && stages < 3; r /= 2) ++stages;
        FeatureExtractor fx{seed, dim, resolution, {}, {}};
        Rng rng(derive_seed(seed, "extractor"));
        std::size_t in = 3;
        for (std::size_t k = 0; k < stages; ++k) {
            const std::size_t out = std::max<std::size_t>(dim >> (stages - 1 - k), 4);
            const double gain = std::sqrt(2.0 / static_cast<double>(in * 9));
            std::vector<double> w = rng.normals(out * in * 9);
            for (auto& v : w) v *= gain;
            std::vector<double> b = rng.normals(out);
            for (auto& v : b) v *= 0.1;
            fx.weights.push_back(Tensor::from_data({out, in, 3, 3}, std::move(w)));
            fx.biases.push_back(Tensor::from_data({out}, std::move(b)));
            in = out;
        }
        return fx;
    }

    /// Stage outputs for an [N x 3 x R x R] batch.
    std::vector<Tensor> taps(const Tensor& images) const {
        if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != resolution || images.dim(3) != resolution) {
            throw DimensionError("extractor expects [N x 3 x " + std::to_string(resolution) + " x " +
                                 std::to_string(resolution) + "], got " + shape_str(images.shape()));
        }
        NoGradGuard no_grad;
        std::vector<Tensor> out;
        Tensor x = images.detach();
        for (std::size_t k = 0; k < weights.size(); ++k) {
            if (k > 0) x = down2x(x);
            x = leaky_relu(add_bias(conv2d(x, weights[k]), biases[k]));
            out.push_back(x);
        }
        return out;
    }
};

/// [n x d] embeddings, one row per image, in input order.
inline Matrix extract_features(const Tensor& images, const FeatureExtractor& fx) {
    const Tensor last = fx.taps(images).back();
    const std::size_t n = last.dim(0), c = last.dim(1), hw = last.dim(2) * last.dim(3);
    Matrix f(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (std::size_t p = 0; p < hw; ++p) s += last[(i * c + ch) * hw + p];
            f(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(ch)) = s / static_cast<double>(hw);
        }
    return f;
}

/// Per-image distances between two equally shaped batches: mean over taps of
/// the mean squared difference of channel-unit-normalized activations.
inline std::vector<double> perceptual_distances(const Tensor& a, const Tensor& b, const FeatureExtractor& fx) {
    if (a.shape() != b.shape()) throw DimensionError("perceptual_distance: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const auto ta = fx.taps(a), tb = fx.taps(b);
    const std::size_t n = a.dim(0);
    std::vector<double> out(n, 0.0);
    // Both sides are normalized into buffers first so the difference is an
    // exact negation under operand swap.
    auto normalized = [](const Tensor& t) {
        const std::size_t n = t.dim(0), c = t.dim(1), hw = t.dim(2) * t.dim(3);
        std::vector<double> out(t.data().begin(), t.data().end());
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < hw; ++p) {
                double norm = 0.0;
                for (std::size_t ch = 0; ch < c; ++ch) norm += out[(i * c + ch) * hw + p] * out[(i * c + ch) * hw + p];
                const double inv = 1.0 / (std::sqrt(norm) + 1e-10);
                for (std::size_t ch = 0; ch < c; ++ch) out[(i * c + ch) * hw + p] *= inv;
            }
        return out;
    };
    for (std::size_t l = 0; l < ta.size(); ++l) {
        const std::size_t per = ta[l].numel() / n;
        const std::vector<double> na = normalized(ta[l]), nb = normalized(tb[l]);
        for (std::size_t i = 0; i < n; ++i) {
            double acc = 0.0;
            for (std::size_t k = i * per; k < (i + 1) * per; ++k) {
                const double d = na[k] - nb[k];
                acc += d * d;
            }
            out[i] += acc / static_cast<double>(per);
        }
    }
    for (auto& v : out) v /= static_cast<double>(ta.size());
    return out;
}

inline double perceptual_distance(const Tensor& a, const Tensor& b, const FeatureExtractor& fx) {
    const auto d = perceptual_distances(a, b, fx);
    double s = 0.0;
    for (double v : d) s += v;
    return s / static_cast<double>(d.size());
}

// ---------------------------------------------------------------------------
// Moments

namespace detail {

/// Pairwise (tree) sum of rows [lo, hi) of f into out.
inline void pairwise_row_sum(const Matrix& f, Eigen::Index lo, Eigen::Index hi, Vector& out) {
    if (hi - lo <= 8) {
        out.setZero(f.cols());
        for (Eigen::Index i = lo; i < hi; ++i) out += f.row(i).transpose();
        return;
    }
    const Eigen::Index mid = lo + (hi - lo) / 2;
    Vector right;
    pairwise_row_sum(f, lo, mid, out);
    pairwise_row_sum(f, mid, hi, right);
    out += right;
}

inline void pairwise_outer_sum(const Matrix& c, Eigen::Index lo, Eigen::Index hi, Matrix& out) {
    if (hi - lo <= 64) {
        const auto block = c.middleRows(lo, hi - lo);
        out.noalias() = block.transpose() * block;
        return;
    }
    const Eigen::Index mid = lo + (hi - lo) / 2;
    Matrix right;
    pairwise_outer_sum(c, lo, mid, out);
    pairwise_outer_sum(c, mid, hi, right);
    out += right;
}

inline void require_finite(const Matrix& f, const char* what) {
    if (!f.allFinite()) throw NumericError(std::string(what) + ": non-finite features");
}

}  // namespace detail

struct Moments {
    Vector mean;
    Matrix cov;  // unbiased, divisor n - 1
    std::size_t count = 0;
};

inline Moments feature_moments(const Matrix& f) {
    detail::require_finite(f, "feature_moments");
    const Eigen::Index n = f.rows();
    if (n < 2) throw ContractError("feature_moments needs at least 2 samples");
    Moments m;
    m.count = static_cast<std::size_t>(n);
    detail::pairwise_row_sum(f, 0, n, m.mean);
    m.mean /= static_cast<double>(n);
    const Matrix centered = f.rowwise() - m.mean.transpose();
    detail::pairwise_outer_sum(centered, 0, n, m.cov);
    m.cov /= static_cast<double>(n - 1);
    m.cov = 0.5 * (m.cov + m.cov.transpose());
    return m;
}

// ---------------------------------------------------------------------------
// Symmetric eigensolver and FID

struct SymmetricEigen {
    Vector values;
    Matrix vectors;  // columns
};

/// Cyclic Jacobi rotations until the off-diagonal Frobenius norm is below
/// 1e-12 relative to the full norm (absolute 1e-300 floor).
inline SymmetricEigen jacobi_eigen(Matrix a) {
    const Eigen::Index n = a.rows();
    if (a.cols() != n) throw DimensionError("jacobi_eigen needs a square matrix");
    if (!a.allFinite()) throw NumericError("jacobi_eigen: non-finite input");
    Matrix v = Matrix::Identity(n, n);
    const double scale = std::max(a.norm(), 1e-300);
    auto off_norm = [&] {
        double s = 0.0;
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < n; ++j)
                if (i != j) s += a(i, j) * a(i, j);
        return std::sqrt(s);
    };
    for (int sweep = 0; sweep < 100 && off_norm() > 1e-12 * scale; ++sweep) {
        for (Eigen::Index p = 0; p < n - 1; ++p)
            for (Eigen::Index q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (Eigen::Index k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (Eigen::Index k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (Eigen::Index k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
    }
    if (off_norm() > 1e-12 * scale) throw NumericError("jacobi_eigen did not converge");
    return {a.diagonal(), v};
}

namespace detail {

inline double checked_root(double lambda, const char* what) {
    if (lambda < -1e-8) throw NumericError(std::string(what) + ": eigenvalue " + std::to_string(lambda) + " below -1e-8");
    return std::sqrt(std::max(lambda, 0.0));
}

}  // namespace detail

/// Principal square root of a symmetric PSD matrix.
inline Matrix symmetric_sqrt(const Matrix& s) {
    const auto e = jacobi_eigen(0.5 * (s + s.transpose()));
    Vector roots(e.values.size());
    for (Eigen::Index i = 0; i < roots.size(); ++i) roots(i) = detail::checked_root(e.values(i), "symmetric_sqrt");
    return e.vectors * roots.asDiagonal() * e.vectors.transpose();
}

/// Tr((Sa Sb)^{1/2}) through the symmetric similar matrix Sa^{1/2} Sb Sa^{1/2}.
inline double trace_sqrt_product(const Matrix& sa, const Matrix& sb) {
    const Matrix r = symmetric_sqrt(sa);
    Matrix m = r * sb * r;
    m = 0.5 * (m + m.transpose());
    const auto e = jacobi_eigen(m);
    double t = 0.0;
    for (Eigen::Index i = 0; i < e.values.size(); ++i) t += detail::checked_root(e.values(i), "trace_sqrt_product");
    return t;
}

inline double fid_from_moments(const Moments& a, const Moments& b) {
    if (a.mean.size() != b.mean.size()) throw DimensionError("fid: feature dimensions differ");
    const double mean_term = (a.mean - b.mean).squaredNorm();
    const double value = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * trace_sqrt_product(a.cov, b.cov);
    return std::max(value, 0.0);
}

inline void require_rank_guard(const Matrix& f, const char* side) {
    const auto need = f.cols() + 1;
    if (f.rows() < need) {
        throw ContractError(std::string("fid: ") + side + " has " + std::to_string(f.rows()) + " samples; needs n >= " +
                            std::to_string(need) + " for a full-rank covariance");
    }
}

/// |mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}).
inline double fid(const Matrix& a, const Matrix& b) {
    detail::require_finite(a, "fid");
    detail::require_finite(b, "fid");
    if (a.cols() != b.cols()) throw DimensionError("fid: feature dimensions differ");
    require_rank_guard(a, "first set");
    require_rank_guard(b, "second set");
    return fid_from_moments(feature_moments(a), feature_moments(b));
}

// ---------------------------------------------------------------------------
// KID

struct KidEstimate {
    double mean = 0.0;
    double std_error = 0.0;  // over blocks
    std::size_t blocks = 0;
    std::size_t block_size = 0;
};

inline double kid_kernel(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& y) {
    const double k = x.dot(y) / static_cast<double>(x.size()) + 1.0;
    return k * k * k;
}

/// Unbiased MMD^2 between two equal-size blocks with the cubic kernel.
inline double mmd2_unbiased(const Matrix& x, const Matrix& y) {
    const Eigen::Index m = x.rows();
    const double d = static_cast<double>(x.cols());
    auto cube = [d](Matrix k) { return k.unaryExpr([d](double v) { const double u = v / d + 1.0; return u * u * u; }).eval(); };
    const Matrix kxx = cube(x * x.transpose()), kyy = cube(y * y.transpose()), kxy = cube(x * y.transpose());
    const double md = static_cast<double>(m);
    const double sxx = kxx.sum() - kxx.trace(), syy = kyy.sum() - kyy.trace();
    return (sxx + syy) / (md * (md - 1.0)) - 2.0 * kxy.sum() / (md * md);
}

/// Blocks are contiguous, disjoint slices of size m = max(2, min(500, n/10)),
/// at most 10 of them, where n is the smaller sample count.
inline KidEstimate kid(const Matrix& a, const Matrix& b) {
    detail::require_finite(a, "kid");
    detail::require_finite(b, "kid");
    if (a.cols() != b.cols()) throw DimensionError("kid: feature dimensions differ");
    const auto n = static_cast<std::size_t>(std::min(a.rows(), b.rows()));
    if (n < 2) throw ContractError("kid needs at least 2 samples per side");
    KidEstimate est;
    est.block_size = std::max<std::size_t>(2, std::min<std::size_t>(500, n / 10));
    est.blocks = std::min<std::size_t>(10, n / est.block_size);
    std::vector<double> values;
    for (std::size_t k = 0; k < est.blocks; ++k) {
        const auto lo = static_cast<Eigen::Index>(k * est.block_size), m = static_cast<Eigen::Index>(est.block_size);
        values.push_back(mmd2_unbiased(a.middleRows(lo, m), b.middleRows(lo, m)));
    }
    for (double v : values) est.mean += v;
    est.mean /= static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - est.mean) * (v - est.mean);
        est.std_error = std::sqrt(ss / static_cast<double>(values.size() - 1) / static_cast<double>(values.size()));
    }
    return est;
}

// ---------------------------------------------------------------------------
// Evaluation protocol

struct EvalConfig {
    std::vector<double> alphas{1.0, 0.75, 0.5, 0.25, 0.0};
    std::size_t n = 2000;
    std::uint64_t seed = 0;
    std::uint64_t extractor_seed = 1234;
    std::size_t feature_dim = 64;
    std::size_t chunk = 100;

    void validate() const {
        if (n == 0) throw UsageError("evaluation sample count must be >= 1");
        if (alphas.empty()) throw UsageError("alpha grid is empty");
        for (double a : alphas)
            if (!(a >= 0.0 && a <= 1.0)) throw UsageError("alpha " + std::to_string(a) + " outside [0, 1]");
        if (chunk == 0) throw UsageError("chunk must be >= 1");
    }

    bool operator==(const EvalConfig&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalConfig, alphas, n, seed, extractor_seed, feature_dim, chunk)

struct MetricEntry {
    double alpha = 0.0;
    double fid = 0.0;
    double kid_x1e3 = 0.0;
    double kid_std_error_x1e3 = 0.0;
    double perceptual = 0.0;
    std::size_t n_samples = 0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(MetricEntry, alpha, fid, kid_x1e3, kid_std_error_x1e3, perceptual, n_samples)

struct MetricReport {
    EvalConfig config;
    std::size_t target_count = 0;
    double source_fid = 0.0;  // G_s anchored generations vs target
    std::vector<MetricEntry> entries;  // descending alpha

    const MetricEntry& at_alpha(double alpha) const {
        for (const auto& e : entries)
            if (e.alpha == alpha) return e;
        throw IndexError("no report entry for alpha " + std::to_string(alpha));
    }

    std::string to_csv() const {
        std::ostringstream out;
        out << "alpha,fid,perceptual,kid_x1e3\n" << std::setprecision(10);
        for (const auto& e : entries) out << e.alpha << ',' << e.fid << ',' << e.perceptual << ',' << e.kid_x1e3 << '\n';
        return out.str();
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(MetricReport, config, target_count, source_fid, entries)

/// For each alpha, n images from G_t under Interpolated(alpha) noise. The
/// latent list and the random noise draw are shared by every alpha; the
/// perceptual reference is G_s with anchored noise on the same latents.
inline MetricReport eval_protocol(const GeneratorModel& source, const GeneratorModel& target, const Tensor& target_images,
                                  const EvalConfig& cfg) {
    cfg.validate();
    if (source.anchor_seed != target.anchor_seed || source.anchor_zero != target.anchor_zero) {
        throw ConfigError("eval_protocol: source and target anchors differ");
    }
    if (!(source.config == target.config)) throw ConfigError("eval_protocol: generator configs differ");
    const auto res = static_cast<std::size_t>(target.config.final_resolution);
    const FeatureExtractor fx = FeatureExtractor::create(cfg.extractor_seed, res, cfg.feature_dim);
    const Matrix target_feats = extract_features(target_images, fx);
    if (target_feats.rows() < target_feats.cols() + 1) require_rank_guard(target_feats, "target dataset");

    std::vector<double> alphas = cfg.alphas;
    std::sort(alphas.begin(), alphas.end(), std::greater<>());
    if (std::adjacent_find(alphas.begin(), alphas.end()) != alphas.end()) throw UsageError("alpha grid has duplicates");

    const auto dim = static_cast<Eigen::Index>(fx.dim);
    std::vector<Matrix> feats(alphas.size(), Matrix(static_cast<Eigen::Index>(cfg.n), dim));
    Matrix source_feats(static_cast<Eigen::Index>(cfg.n), dim);
    std::vector<double> perceptual(alphas.size(), 0.0);
    Rng z_rng(derive_seed(cfg.seed, "eval_latents"));
    NoGradGuard no_grad;
    for (std::size_t lo = 0, chunk = 0; lo < cfg.n; lo += cfg.chunk, ++chunk) {
        const std::size_t m = std::min(cfg.chunk, cfg.n - lo);
        const Tensor z = sample_latents(z_rng, target.config, m);
        Rng noise_rng(derive_seed(cfg.seed, "eval_noise", chunk));
        const NoiseBundle anchor = anchored_noise(target, m);
        const NoiseBundle rand = random_noise(noise_rng, target, m);
        const Tensor ref = clamp_image(generate(source, z, anchor).image);
        source_feats.middleRows(static_cast<Eigen::Index>(lo), static_cast<Eigen::Index>(m)) = extract_features(ref, fx);
        for (std::size_t k = 0; k < alphas.size(); ++k) {
            const Tensor img = clamp_image(generate(target, z, interpolate_noise(anchor, rand, alphas[k])).image);
            feats[k].middleRows(static_cast<Eigen::Index>(lo), static_cast<Eigen::Index>(m)) = extract_features(img, fx);
            for (double d : perceptual_distances(img, ref, fx)) perceptual[k] += d;
        }
    }

    MetricReport report;
    report.config = cfg;
    report.config.alphas = alphas;
    report.target_count = static_cast<std::size_t>(target_feats.rows());
    const Moments target_m = feature_moments(target_feats);
    const bool fid_ok = static_cast<Eigen::Index>(cfg.n) >= dim + 1;
    if (fid_ok) report.source_fid = fid_from_moments(feature_moments(source_feats), target_m);
    for (std::size_t k = 0; k < alphas.size(); ++k) {
        MetricEntry e;
        e.alpha = alphas[k];
        if (!fid_ok) require_rank_guard(feats[k], "generated set");
        e.fid = fid_from_moments(feature_moments(feats[k]), target_m);
        const KidEstimate kd = kid(feats[k], target_feats);
        e.kid_x1e3 = kd.mean * 1e3;
        e.kid_std_error_x1e3 = kd.std_error * 1e3;
        e.perceptual = perceptual[k] / static_cast<double>(cfg.n);
        e.n_samples = cfg.n;
        if (!std::isfinite(e.fid) || !std::isfinite(e.kid_x1e3) || !std::isfinite(e.perceptual)) {
            throw NumericError("eval_protocol: non-finite metric at alpha " + std::to_string(e.alpha));
        }
        report.entries.push_back(e);
    }
    return report;
}

}  // namespace fixnoise
