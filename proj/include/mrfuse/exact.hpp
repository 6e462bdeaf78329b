#ifndef MRFUSE_EXACT_HPP
#define MRFUSE_EXACT_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "mrfuse/common.hpp"
#include "mrfuse/mrf.hpp"
#include "mrfuse/tensor.hpp"

// Brute-force ground truth on tiny grids: the normalized product distribution
//   p(Z) propto exp( sum_i U_log,i . z_i
//                    + 1/2 sum_i sum_delta sum_kl z_ik ln w_{kl,delta} z_{i+delta,l} )
// enumerated over all K^I label configurations. Double precision throughout;
// everything downstream is validated against this.

namespace mrfuse {

struct ExactDistribution {
    std::vector<int64_t> dims;  // D,H,W
    int64_t K = 0;
    std::vector<double> log_probs;  // normalized, mixed-radix indexed
    double log_Z = 0.0;

    int64_t voxels() const { return dims[0] * dims[1] * dims[2]; }
    int64_t configs() const { return int64_t(log_probs.size()); }

    // mixed radix, voxel 0 least significant
    void decode(int64_t config, std::vector<int64_t>& labels) const {
        labels.resize(static_cast<size_t>(voxels()));
        for (int64_t i = 0; i < voxels(); ++i) {
            labels[static_cast<size_t>(i)] = config % K;
            config /= K;
        }
    }
};

namespace detail {

inline int64_t checked_config_count(int64_t K, int64_t I) {
    constexpr int64_t budget = int64_t(1) << 20;
    int64_t n = 1;
    for (int64_t i = 0; i < I; ++i) {
        n *= K;
        require(n <= budget, "exact oracle: K^I = " + std::to_string(K) + "^" + std::to_string(I) +
                                 " exceeds the enumeration budget of 2^20 configurations");
    }
    return n;
}

} // namespace detail

inline ExactDistribution enumerate_product(const Tensor<double>& U_log,
                                           const MrfKernel<double>& kernel) {
    require(U_log.rank() == 4, "exact oracle: logits must be [K,D,H,W]");
    const int64_t K = U_log.dim(0);
    require(K == kernel.K(), "exact oracle: K mismatch between logits and kernel");
    const int64_t D = U_log.dim(1), H = U_log.dim(2), W = U_log.dim(3);
    const int64_t I = D * H * W;
    const int64_t n_cfg = detail::checked_config_count(K, I);

    ExactDistribution dist;
    dist.dims = {D, H, W};
    dist.K = K;
    dist.log_probs.resize(static_cast<size_t>(n_cfg));

    std::vector<int64_t> z(static_cast<size_t>(I));
    double max_lp = -std::numeric_limits<double>::infinity();
    for (int64_t c = 0; c < n_cfg; ++c) {
        int64_t rem = c;
        for (int64_t i = 0; i < I; ++i) {
            z[static_cast<size_t>(i)] = rem % K;
            rem /= K;
        }
        double e = 0.0;
        for (int64_t zz = 0; zz < D; ++zz)
            for (int64_t yy = 0; yy < H; ++yy)
                for (int64_t xx = 0; xx < W; ++xx) {
                    const int64_t i = (zz * H + yy) * W + xx;
                    const int64_t zi = z[static_cast<size_t>(i)];
                    e += U_log[zi * I + i];
                    for (int64_t dz = -1; dz <= 1; ++dz)
                        for (int64_t dy = -1; dy <= 1; ++dy)
                            for (int64_t dx = -1; dx <= 1; ++dx) {
                                if (dz == 0 && dy == 0 && dx == 0) continue;
                                const int64_t nz = zz + dz, ny = yy + dy, nx = xx + dx;
                                if (nz < 0 || nz >= D || ny < 0 || ny >= H || nx < 0 || nx >= W)
                                    continue;
                                const int64_t jn = (nz * H + ny) * W + nx;
                                // each unordered pair contributes once overall
                                e += 0.5 * kernel.log_weights.at5(zi, z[static_cast<size_t>(jn)],
                                                                  dz + 1, dy + 1, dx + 1);
                            }
                }
        dist.log_probs[static_cast<size_t>(c)] = e;
        max_lp = std::max(max_lp, e);
    }

    double s = 0.0;
    for (double lp : dist.log_probs) s += std::exp(lp - max_lp);
    dist.log_Z = max_lp + std::log(s);
    for (double& lp : dist.log_probs) lp -= dist.log_Z;
    return dist;
}

inline Tensor<double> exact_marginals(const ExactDistribution& dist) {
    const int64_t I = dist.voxels();
    Tensor<double> marg({dist.K, dist.dims[0], dist.dims[1], dist.dims[2]});
    std::vector<int64_t> z;
    for (int64_t c = 0; c < dist.configs(); ++c) {
        const double p = std::exp(dist.log_probs[static_cast<size_t>(c)]);
        dist.decode(c, z);
        for (int64_t i = 0; i < I; ++i) marg[z[static_cast<size_t>(i)] * I + i] += p;
    }
    return marg;
}

// KL(q || p) for the factorized q(Z) = prod_i r_{i, z_i}, by enumeration.
inline double exact_kl(const Tensor<double>& R, const ExactDistribution& dist) {
    require(R.dim(0) == dist.K && R.dim(1) == dist.dims[0] && R.dim(2) == dist.dims[1] &&
                R.dim(3) == dist.dims[2],
            "exact_kl: shape mismatch between R " + shape_str(R.dims()) + " and distribution");
    const int64_t I = dist.voxels();
    std::vector<int64_t> z;
    double kl = 0.0;
    for (int64_t c = 0; c < dist.configs(); ++c) {
        dist.decode(c, z);
        double q = 1.0;
        for (int64_t i = 0; i < I; ++i) q *= R[z[static_cast<size_t>(i)] * I + i];
        if (q <= 0.0) continue;  // 0 * log 0 -> 0
        kl += q * (std::log(q) - dist.log_probs[static_cast<size_t>(c)]);
    }
    return kl;
}

} // namespace mrfuse

#endif
