#ifndef MRFUSE_MRF_HPP
#define MRFUSE_MRF_HPP

#include <cmath>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "mrfuse/common.hpp"
#include "mrfuse/ops.hpp"
#include "mrfuse/rng.hpp"
#include "mrfuse/tensor.hpp"

// The MRF expert in two interchangeable forms, both producing the additive
// per-class message for the mean-field update:
//   - MrfKernel: the stationary log-weight kernel ln w_{kl,delta} over the
//     3x3x3 neighborhood (center structurally zero). Linear in R; this is the
//     form the variational objective and the exact oracle are defined for.
//   - MrfNet: the trained two-layer network (zero-center 3^3 conv K -> K^2,
//     leaky ReLU, 1x1x1 conv K^2 -> K). Nonlinear; no free energy exists.

namespace mrfuse {

template <typename T>
void check_simplex(const Tensor<T>& R, double tol = 1e-5) {
    require(R.rank() == 4, "simplex check: expected [K,D,H,W], got " + shape_str(R.dims()));
    const int64_t K = R.dim(0);
    const int64_t spatial = R.size() / K;
    for (int64_t i = 0; i < spatial; ++i) {
        double s = 0.0;
        for (int64_t k = 0; k < K; ++k) {
            const double v = double(R[k * spatial + i]);
            require(v >= -tol && v <= 1.0 + tol,
                    "simplex check: entry " + std::to_string(v) + " outside [0,1] at voxel " +
                        std::to_string(i));
            s += v;
        }
        require(std::fabs(s - 1.0) <= tol, "simplex check: voxel " + std::to_string(i) +
                                               " sums to " + std::to_string(s));
    }
}

template <typename T>
class MrfKernel;

// Runtime-polymorphic message interface so the fusion engine and CLI can hold
// either expert; as_linear() exposes the kernel when the variational
// objective needs it.
template <typename T>
struct MessageProvider {
    virtual ~MessageProvider() = default;
    virtual Tensor<T> message(const Tensor<T>& R) const = 0;
    virtual const MrfKernel<T>* as_linear() const { return nullptr; }
};

template <typename T>
class MrfKernel : public MessageProvider<T> {
public:
    // log_weights[k,l,dz,dy,dx] = ln w_{kl,delta} with delta = (dz,dy,dx)-1;
    // the center tap [k,l,1,1,1] is structurally zero.
    Tensor<T> log_weights;

    MrfKernel() = default;

    explicit MrfKernel(Tensor<T> lw) : log_weights(std::move(lw)) {
        require(log_weights.rank() == 5 && log_weights.dim(0) == log_weights.dim(1) &&
                    log_weights.dim(2) == 3 && log_weights.dim(3) == 3 && log_weights.dim(4) == 3,
                "MrfKernel: expected [K,K,3,3,3], got " + shape_str(log_weights.dims()));
        project_zero_center();
    }

    static MrfKernel zeros(int64_t K) { return MrfKernel(Tensor<T>::zeros({K, K, 3, 3, 3})); }

    int64_t K() const { return log_weights.dim(0); }

    void project_zero_center() {
        const int64_t k = K();
        for (int64_t a = 0; a < k; ++a)
            for (int64_t b = 0; b < k; ++b) log_weights.at5(a, b, 1, 1, 1) = T(0);
    }

    bool center_is_zero() const {
        const int64_t k = K();
        for (int64_t a = 0; a < k; ++a)
            for (int64_t b = 0; b < k; ++b)
                if (log_weights.at5(a, b, 1, 1, 1) != T(0)) return false;
        return true;
    }

    // message_ik = sum_delta sum_l ln w_{kl,delta} r_{i+delta,l}; exactly the
    // padded cross-correlation of R with the kernel.
    Tensor<T> message(const Tensor<T>& R) const override {
        require(R.dim(0) == K(), "MrfKernel: R has " + std::to_string(R.dim(0)) +
                                     " classes, kernel has " + std::to_string(K()));
        require(center_is_zero(), "MrfKernel: center taps are non-zero; projection was skipped");
        check_simplex(R);
        return conv3d(R, log_weights, 1);
    }

    const MrfKernel<T>* as_linear() const override { return this; }
};

// Random symmetric kernel supported on face neighbors only: w[:,:,+axis] = A,
// w[:,:,-axis] = A^T per axis. Symmetry keeps the pairwise energy
// well-defined, and face-only support keeps the two checkerboard parity sets
// conditionally independent, which is what makes each half-sweep an exact
// variational update (and the free energy monotone under that schedule).
template <typename T>
MrfKernel<T> random_symmetric_face_kernel(int64_t K, double scale, Rng& rng) {
    Tensor<T> w({K, K, 3, 3, 3});
    const int64_t plus[3][3] = {{2, 1, 1}, {1, 2, 1}, {1, 1, 2}};
    const int64_t minus[3][3] = {{0, 1, 1}, {1, 0, 1}, {1, 1, 0}};
    for (int axis = 0; axis < 3; ++axis)
        for (int64_t k = 0; k < K; ++k)
            for (int64_t l = 0; l < K; ++l) {
                const T v = static_cast<T>(rng.uniform(-scale, scale));
                w.at5(k, l, plus[axis][0], plus[axis][1], plus[axis][2]) = v;
                w.at5(l, k, minus[axis][0], minus[axis][1], minus[axis][2]) = v;
            }
    return MrfKernel<T>(std::move(w));
}

template <typename T>
class MrfNet : public MessageProvider<T> {
public:
    Tensor<T> w1, b1;  // [K^2, K, 3,3,3] zero-center, [K^2]
    Tensor<T> w2, b2;  // [K, K^2, 1,1,1], [K]
    double alpha = 0.2;

    MrfNet() = default;

    static MrfNet build(int64_t K, uint64_t seed, double init_scale = 0.1) {
        require(K >= 2, "MrfNet: K must be >= 2");
        MrfNet net;
        const int64_t K2 = K * K;
        Rng r1 = Rng::stream(seed, 4, 1);
        Rng r2 = Rng::stream(seed, 4, 2);
        const T bound1 = static_cast<T>(init_scale * std::sqrt(6.0 / double(K * 27)));
        const T bound2 = static_cast<T>(init_scale * std::sqrt(6.0 / double(K2)));
        net.w1 = Tensor<T>::uniform({K2, K, 3, 3, 3}, bound1, r1);
        net.b1 = Tensor<T>::zeros({K2});
        net.w2 = Tensor<T>::uniform({K, K2, 1, 1, 1}, bound2, r2);
        net.b2 = Tensor<T>::zeros({K});
        net.project_zero_center();
        return net;
    }

    int64_t K() const { return w2.dim(0); }

    void project_zero_center() {
        const int64_t f = w1.dim(0), c = w1.dim(1);
        for (int64_t a = 0; a < f; ++a)
            for (int64_t b = 0; b < c; ++b) w1.at5(a, b, 1, 1, 1) = T(0);
    }

    bool center_is_zero() const {
        const int64_t f = w1.dim(0), c = w1.dim(1);
        for (int64_t a = 0; a < f; ++a)
            for (int64_t b = 0; b < c; ++b)
                if (w1.at5(a, b, 1, 1, 1) != T(0)) return false;
        return true;
    }

    Tensor<T> message(const Tensor<T>& R) const override {
        require(R.dim(0) == K(), "MrfNet: R has " + std::to_string(R.dim(0)) +
                                     " classes, net has " + std::to_string(K()));
        check_simplex(R);
        auto h = leaky_relu(add_channel_bias(conv3d(R, w1, 1), b1), static_cast<T>(alpha));
        return add_channel_bias(conv3d(h, w2, 1), b2);
    }

    std::vector<Tensor<T>> parameters() { return {w1, b1, w2, b2}; }

    void set_requires_grad(bool v) {
        for (auto& t : parameters()) t.set_requires_grad(v);
    }

    int64_t param_count(bool include_centers = false) const {
        int64_t n = w1.size() + b1.size() + w2.size() + b2.size();
        if (!include_centers) n -= w1.dim(0) * w1.dim(1);  // structurally-zero taps
        return n;
    }
};

// Count implied by K alone (centers excluded unless asked): layer1 K^2
// filters of K*27 taps minus the K^2*K zero centers plus bias, layer2 K
// filters of K^2 taps plus bias.
inline int64_t mrf_net_param_count(int64_t K, bool include_centers = false) {
    const int64_t K2 = K * K;
    int64_t layer1 = K2 * K * 27 + K2;
    if (!include_centers) layer1 -= K2 * K;
    const int64_t layer2 = K * K2 + K;
    return layer1 + layer2;
}

// Relative cost of adding the MRF expert to a UNet of the given config.
inline double mrf_overhead_ratio(int64_t K, int64_t unet_params, bool include_centers = false) {
    require(unet_params > 0, "overhead ratio: UNet parameter count must be positive");
    return double(mrf_net_param_count(K, include_centers)) / double(unet_params);
}

// K x K table of log-weights for each neighborhood offset, for CLI
// inspection of what the prior learned.
template <typename T>
std::string kernel_table(const MrfKernel<T>& kernel) {
    std::ostringstream os;
    const int64_t K = kernel.K();
    os << std::fixed << std::setprecision(4);
    for (int64_t dz = 0; dz < 3; ++dz)
        for (int64_t dy = 0; dy < 3; ++dy)
            for (int64_t dx = 0; dx < 3; ++dx) {
                if (dz == 1 && dy == 1 && dx == 1) continue;  // center: all zeros
                os << "delta=(" << dz - 1 << "," << dy - 1 << "," << dx - 1 << ")\n";
                for (int64_t k = 0; k < K; ++k) {
                    for (int64_t l = 0; l < K; ++l)
                        os << std::setw(10) << double(kernel.log_weights.at5(k, l, dz, dy, dx));
                    os << "\n";
                }
            }
    return os.str();
}

} // namespace mrfuse

#endif
