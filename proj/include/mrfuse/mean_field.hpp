#ifndef MRFUSE_MEAN_FIELD_HPP
#define MRFUSE_MEAN_FIELD_HPP

#include <cmath>
#include <string>

#include "mrfuse/common.hpp"
#include "mrfuse/mrf.hpp"
#include "mrfuse/ops.hpp"
#include "mrfuse/rng.hpp"
#include "mrfuse/tensor.hpp"

// Recurrent mean-field fusion of the two experts. Each iteration replaces
// every voxel's responsibility vector with softmax(U_log + message(R)).
//
// Two schedules:
//   parallel     - all voxels simultaneously; differentiable, used for
//                  training and inference.
//   checkerboard - two half-grid updates per sweep by parity of (z+y+x);
//                  each half is an exact coordinate-wise variational update
//                  when the kernel couples only face neighbors, which gives
//                  the free-energy descent guarantee the tests lean on. Not
//                  differentiable (in-place half-updates), so it refuses to
//                  run while gradients are being recorded.

namespace mrfuse {

enum class Schedule { parallel, checkerboard };

inline Schedule parse_schedule(const std::string& s) {
    if (s == "parallel") return Schedule::parallel;
    if (s == "checkerboard") return Schedule::checkerboard;
    fail("unknown schedule '" + s + "' (expected parallel|checkerboard)");
}

struct FusionConfig {
    int n_iter_test = 10;
    int n_iter_train_lo = 5;
    int n_iter_train_hi = 15;
    Schedule schedule = Schedule::parallel;
    double convergence_tol = 0.0;  // 0 = always run the fixed iteration count

    void validate() const {
        require(n_iter_test >= 0, "fusion: n_iter_test must be >= 0");
        require(n_iter_train_lo >= 0 && n_iter_train_hi >= n_iter_train_lo,
                "fusion: train iteration range is empty");
        require(convergence_tol >= 0, "fusion: convergence_tol must be >= 0");
    }
};

enum class FuseMode { train, test };

// Algorithm step 1: U_log = U - log-sum-exp(U) per voxel.
template <typename T>
Tensor<T> normalize_logits(const Tensor<T>& U) {
    require(U.all_finite(), "normalize_logits: non-finite logits");
    return log_softmax_channels(U);
}

// One parallel sweep; differentiable through both arguments.
template <typename T>
Tensor<T> mean_field_sweep(const Tensor<T>& U_log, const Tensor<T>& R,
                           const MessageProvider<T>& mrf) {
    check_simplex(R);
    return softmax_channels(add(U_log, mrf.message(R)));
}

// One checkerboard sweep: even-parity voxels first from the current R, then
// odd-parity voxels from the half-updated field.
template <typename T>
Tensor<T> mean_field_sweep_checkerboard(const Tensor<T>& U_log, const Tensor<T>& R,
                                        const MessageProvider<T>& mrf) {
    require(Tape<T>::active() == nullptr,
            "checkerboard sweep is not differentiable; use the parallel schedule for training");
    check_simplex(R);
    const int64_t K = U_log.dim(0), D = U_log.dim(1), H = U_log.dim(2), W = U_log.dim(3);
    const int64_t spatial = D * H * W;
    Tensor<T> cur = R.clone();
    std::vector<T> logits(static_cast<size_t>(K));
    for (int parity = 0; parity < 2; ++parity) {
        Tensor<T> m = mrf.message(cur);
        for (int64_t z = 0; z < D; ++z)
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x) {
                    if (((z + y + x) & 1) != parity) continue;
                    const int64_t i = (z * H + y) * W + x;
                    T mx = U_log[i] + m[i];
                    for (int64_t k = 0; k < K; ++k) {
                        logits[size_t(k)] = U_log[k * spatial + i] + m[k * spatial + i];
                        mx = std::max(mx, logits[size_t(k)]);
                    }
                    T s = 0;
                    for (int64_t k = 0; k < K; ++k) {
                        logits[size_t(k)] = std::exp(logits[size_t(k)] - mx);
                        s += logits[size_t(k)];
                    }
                    for (int64_t k = 0; k < K; ++k) cur[k * spatial + i] = logits[size_t(k)] / s;
                }
    }
    return cur;
}

template <typename T>
struct FuseResult {
    Tensor<T> R;      // responsibilities, exp(log_R)
    Tensor<T> log_R;  // stable log of the final update, for the loss
    int n_iter_used = 0;
};

// Full forward pass on precomputed logits: normalize, R <- 1/K, run n sweeps.
// Train mode draws n uniformly from {lo..hi} (recorded in the result) and
// keeps every sweep on the tape.
template <typename T>
FuseResult<T> fuse_forward(const Tensor<T>& U, const MessageProvider<T>& mrf,
                           const FusionConfig& cfg, FuseMode mode, Rng* rng = nullptr) {
    cfg.validate();
    require(U.rank() == 4, "fuse_forward: logits must be [K,D,H,W], got " + shape_str(U.dims()));
    int n;
    if (mode == FuseMode::train) {
        require(rng != nullptr, "fuse_forward: train mode needs an iteration-count rng");
        n = rng->uniform_int(cfg.n_iter_train_lo, cfg.n_iter_train_hi);
    } else {
        n = cfg.n_iter_test;
    }

    FuseResult<T> out;
    out.n_iter_used = n;
    Tensor<T> U_log = normalize_logits(U);
    out.log_R = U_log;
    out.R = exp_elem(U_log);
    const int64_t K = U.dim(0);
    Tensor<T> R = Tensor<T>::full(U.dims(), static_cast<T>(1.0 / double(K)));

    if (cfg.schedule == Schedule::checkerboard) {
        for (int t = 0; t < n; ++t) {
            Tensor<T> next = mean_field_sweep_checkerboard(U_log, R, mrf);
            if (cfg.convergence_tol > 0) {
                double delta = 0.0;
                for (int64_t i = 0; i < R.size(); ++i)
                    delta = std::max(delta, std::fabs(double(next[i]) - double(R[i])));
                R = next;
                out.n_iter_used = t + 1;
                if (delta < cfg.convergence_tol) break;
            } else {
                R = next;
            }
        }
        if (n > 0) {
            out.R = R;
            // log of the consistency condition at the reached point
            out.log_R = log_softmax_channels(add(U_log, mrf.message(R)));
        }
        return out;
    }

    for (int t = 0; t < n; ++t) {
        Tensor<T> prev = R;
        Tensor<T> a = add(U_log, mrf.message(R));
        out.log_R = log_softmax_channels(a);
        out.R = exp_elem(out.log_R);
        R = out.R;
        if (mode == FuseMode::test && cfg.convergence_tol > 0) {
            double delta = 0.0;
            for (int64_t i = 0; i < R.size(); ++i)
                delta = std::max(delta, std::fabs(double(R[i]) - double(prev[i])));
            out.n_iter_used = t + 1;
            if (delta < cfg.convergence_tol) break;
        }
    }
    return out;
}

// Variational free energy of the factorized q given the linear kernel:
//   F(q) = sum_i sum_k r_ik (ln r_ik - U_log,ik) - 1/2 <R, message(R)>.
// Defined only for the linear expert; F = KL(q||p) - ln Z, so differences of
// F are differences of KL.
template <typename T>
double free_energy(const Tensor<T>& U_log, const Tensor<T>& R, const MessageProvider<T>& mrf) {
    const MrfKernel<T>* kernel = mrf.as_linear();
    require(kernel != nullptr,
            "free_energy: objective is defined for the linear kernel only, not the MRF net");
    check_simplex(R);
    Tensor<T> m = kernel->message(R);
    double F = 0.0;
    for (int64_t i = 0; i < R.size(); ++i) {
        const double r = double(R[i]);
        const double r_safe = r < 1e-12 ? 1e-12 : r;
        F += r * (std::log(r_safe) - double(U_log[i]));
        F -= 0.5 * r * double(m[i]);
    }
    return F;
}

} // namespace mrfuse

#endif
