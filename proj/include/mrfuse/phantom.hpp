#ifndef MRFUSE_PHANTOM_HPP
#define MRFUSE_PHANTOM_HPP

#include <cmath>
#include <string>
#include <vector>

#include "mrfuse/common.hpp"
#include "mrfuse/keyval_config.hpp"
#include "mrfuse/random_fields.hpp"
#include "mrfuse/rng.hpp"
#include "mrfuse/tensor.hpp"

// Synthetic volumes standing in for real acquisitions: per-class Gaussian
// blob score fields define the label geometry, class-conditional intensities
// plus a multiplicative bias field and additive noise define the image.
//
// The two regimes share every geometry parameter; out_dist only remaps the
// intensity side (rotated/compressed class contrast, doubled noise and bias),
// mimicking a scanner/protocol change between sites.

namespace mrfuse {

enum class Regime { in_dist, out_dist };

inline std::string regime_name(Regime r) { return r == Regime::in_dist ? "in_dist" : "out_dist"; }

inline Regime parse_regime(const std::string& s) {
    if (s == "in_dist") return Regime::in_dist;
    if (s == "out_dist") return Regime::out_dist;
    fail("unknown regime '" + s + "' (expected in_dist|out_dist)");
}

struct RegimeParams {
    double contrast_shift = 0.0;     // 0 keeps class means, 1 fully rotates them
    double contrast_compress = 1.0;  // scales mean deviations from their center
    double noise_sigma = 0.03;
    double bias_amp = 0.04;
};

struct PhantomSpec {
    std::vector<int64_t> dims{32, 32, 32};  // D,H,W
    int64_t K = 4;                          // class 0 fills space between blobs
    std::vector<int64_t> blobs{0, 3, 3, 2};
    std::vector<double> blob_sigma{3.0, 3.0, 3.0, 3.0};
    double background_score = 0.3;
    std::vector<double> means{0.10, 0.45, 0.75, 0.25};
    std::vector<double> stds{0.05, 0.06, 0.06, 0.05};
    Regime regime = Regime::in_dist;
    RegimeParams in_params{0.0, 1.0, 0.03, 0.04};
    RegimeParams out_params{0.5, 0.7, 0.06, 0.08};

    void validate() const {
        require(dims.size() == 3 && dims[0] >= 1 && dims[1] >= 1 && dims[2] >= 1,
                "phantom: dims must be three positive values");
        require(K >= 2, "phantom: need at least 2 classes");
        require(int64_t(blobs.size()) == K && int64_t(blob_sigma.size()) == K &&
                    int64_t(means.size()) == K && int64_t(stds.size()) == K,
                "phantom: per-class fields must all have K=" + std::to_string(K) + " entries");
        int64_t total_blobs = 0;
        for (int64_t b : blobs) {
            require(b >= 0, "phantom: negative blob count");
            total_blobs += b;
        }
        require(total_blobs >= 1, "phantom: at least one blob required");
        const int64_t voxels = dims[0] * dims[1] * dims[2];
        require(voxels >= 200 * total_blobs,
                "phantom: grid of " + std::to_string(voxels) + " voxels is too small for " +
                    std::to_string(total_blobs) + " blobs (need >= " +
                    std::to_string(200 * total_blobs) + ")");
        for (double s : blob_sigma) require(s > 0, "phantom: blob_sigma must be positive");
        for (double s : stds) require(s >= 0, "phantom: stds must be non-negative");
    }

    const RegimeParams& active_params() const {
        return regime == Regime::in_dist ? in_params : out_params;
    }

    // Class means after the regime's contrast remap: deviations from the
    // center of the configured means are blended with a cyclic shift of
    // themselves and compressed.
    std::vector<double> effective_means() const {
        const RegimeParams& p = active_params();
        if (p.contrast_shift == 0.0 && p.contrast_compress == 1.0) return means;
        double center = 0.0;
        for (double m : means) center += m;
        center /= double(means.size());
        std::vector<double> out(means.size());
        for (size_t k = 0; k < means.size(); ++k) {
            const double own = means[k] - center;
            const double rot = means[(k + 1) % means.size()] - center;
            out[k] = center + p.contrast_compress *
                                  ((1.0 - p.contrast_shift) * own + p.contrast_shift * rot);
        }
        return out;
    }

    static PhantomSpec from_config(const KeyValConfig& cfg) {
        PhantomSpec s;
        if (cfg.has("dims")) {
            auto v = cfg.get_doubles("dims", {});
            require(v.size() == 3, "phantom config: dims must have 3 entries");
            s.dims = {int64_t(v[0]), int64_t(v[1]), int64_t(v[2])};
        }
        s.K = cfg.get_int("k", s.K);
        if (cfg.has("blobs")) {
            s.blobs.clear();
            for (double v : cfg.get_doubles("blobs", {})) s.blobs.push_back(int64_t(v));
        }
        if (cfg.has("blob_sigma")) s.blob_sigma = cfg.get_doubles("blob_sigma", {});
        s.background_score = cfg.get_double("background_score", s.background_score);
        if (cfg.has("means")) s.means = cfg.get_doubles("means", {});
        if (cfg.has("stds")) s.stds = cfg.get_doubles("stds", {});
        if (cfg.has("regime")) s.regime = parse_regime(cfg.get_string("regime", ""));
        auto load_params = [&](const std::string& prefix, RegimeParams& p) {
            p.contrast_shift = cfg.get_double(prefix + "contrast_shift", p.contrast_shift);
            p.contrast_compress = cfg.get_double(prefix + "contrast_compress", p.contrast_compress);
            p.noise_sigma = cfg.get_double(prefix + "noise_sigma", p.noise_sigma);
            p.bias_amp = cfg.get_double(prefix + "bias_amp", p.bias_amp);
        };
        load_params("in_", s.in_params);
        load_params("out_", s.out_params);
        s.validate();
        return s;
    }
};

namespace detail {

// Label geometry for one attempt. Regime never enters here; the stream is
// keyed only on (seed, attempt).
template <typename T>
Tensor<T> phantom_labels_attempt(const PhantomSpec& spec, uint64_t seed, uint64_t attempt) {
    Rng rng = Rng::stream(seed, 1, attempt);
    const int64_t D = spec.dims[0], H = spec.dims[1], W = spec.dims[2];
    const int64_t spatial = D * H * W;

    std::vector<std::vector<double>> score(static_cast<size_t>(spec.K),
                                           std::vector<double>(static_cast<size_t>(spatial), 0.0));
    score[0].assign(static_cast<size_t>(spatial), spec.background_score);

    for (int64_t k = 0; k < spec.K; ++k) {
        for (int64_t b = 0; b < spec.blobs[static_cast<size_t>(k)]; ++b) {
            const double cz = rng.uniform(0.0, double(D - 1));
            const double cy = rng.uniform(0.0, double(H - 1));
            const double cx = rng.uniform(0.0, double(W - 1));
            const double sg = spec.blob_sigma[static_cast<size_t>(k)] * rng.uniform(0.7, 1.3);
            const double inv2s2 = 1.0 / (2.0 * sg * sg);
            auto& sk = score[static_cast<size_t>(k)];
            for (int64_t z = 0; z < D; ++z)
                for (int64_t y = 0; y < H; ++y)
                    for (int64_t x = 0; x < W; ++x) {
                        const double d2 = (z - cz) * (z - cz) + (y - cy) * (y - cy) +
                                          (x - cx) * (x - cx);
                        sk[static_cast<size_t>((z * H + y) * W + x)] += std::exp(-d2 * inv2s2);
                    }
        }
    }

    Tensor<T> labels({1, D, H, W});
    for (int64_t i = 0; i < spatial; ++i) {
        int64_t best = 0;
        double best_v = score[0][static_cast<size_t>(i)];
        for (int64_t k = 1; k < spec.K; ++k) {
            const double v = score[static_cast<size_t>(k)][static_cast<size_t>(i)];
            if (v > best_v) {
                best_v = v;
                best = k;
            }
        }
        labels[i] = static_cast<T>(best);
    }
    return labels;
}

} // namespace detail

// Deterministic in (spec, seed); every class is guaranteed >= 1% of voxels
// (geometry is redrawn up to a bounded number of attempts to enforce it).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> generate_phantom(const PhantomSpec& spec, uint64_t seed) {
    spec.validate();
    const int64_t D = spec.dims[0], H = spec.dims[1], W = spec.dims[2];
    const int64_t spatial = D * H * W;
    const int64_t min_share = (spatial + 99) / 100;  // ceil(1%)

    Tensor<T> labels;
    bool ok = false;
    constexpr uint64_t max_attempts = 50;
    for (uint64_t attempt = 0; attempt < max_attempts && !ok; ++attempt) {
        labels = detail::phantom_labels_attempt<T>(spec, seed, attempt);
        std::vector<int64_t> hist(static_cast<size_t>(spec.K), 0);
        for (int64_t i = 0; i < spatial; ++i) ++hist[static_cast<size_t>(double(labels[i]))];
        ok = true;
        for (int64_t c : hist) ok = ok && c >= min_share;
    }
    require(ok, "phantom: could not reach 1% per-class share in " + std::to_string(max_attempts) +
                    " attempts; spec geometry is too skewed");

    const std::vector<double> means = spec.effective_means();
    const RegimeParams& rp = spec.active_params();

    Rng intensity_rng = Rng::stream(seed, 2);
    Tensor<T> image({1, D, H, W});
    for (int64_t i = 0; i < spatial; ++i) {
        const auto k = static_cast<size_t>(double(labels[i]));
        image[i] = static_cast<T>(means[k] + spec.stds[k] * intensity_rng.normal());
    }

    if (rp.bias_amp > 0.0) {
        Rng bias_rng = Rng::stream(seed, 3);
        Tensor<T> field = smooth_noise_field<T>({D, H, W}, 6.0, bias_rng);
        for (int64_t i = 0; i < spatial; ++i)
            image[i] = static_cast<T>(double(image[i]) * std::exp(rp.bias_amp * double(field[i])));
    }
    if (rp.noise_sigma > 0.0) {
        Rng noise_rng = Rng::stream(seed, 4);
        for (int64_t i = 0; i < spatial; ++i)
            image[i] = static_cast<T>(double(image[i]) + rp.noise_sigma * noise_rng.normal());
    }
    return {std::move(image), std::move(labels)};
}

} // namespace mrfuse

#endif
