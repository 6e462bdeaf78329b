#ifndef MRFUSE_RANDOM_FIELDS_HPP
#define MRFUSE_RANDOM_FIELDS_HPP

#include <cmath>
#include <vector>

#include "mrfuse/rng.hpp"
#include "mrfuse/tensor.hpp"

// Smooth scalar random fields on a voxel grid: white noise blurred with a
// separable Gaussian and rescaled to unit RMS, so `amplitude * field` has RMS
// exactly `amplitude`. Shared by the phantom bias fields and the
// augmentation displacement/bias fields.

namespace mrfuse {

// In-place separable Gaussian blur along one axis of a [1,D,H,W] tensor.
// The truncated kernel is renormalized per position, so edges keep their
// local mean instead of fading toward zero.
template <typename T>
void gaussian_blur_axis(Tensor<T>& f, int axis, double sigma) {
    if (sigma <= 0.0) return;
    const int64_t D = f.dim(1), H = f.dim(2), W = f.dim(3);
    const int64_t len = axis == 0 ? D : axis == 1 ? H : W;
    const int64_t half = static_cast<int64_t>(std::ceil(3.0 * sigma));
    std::vector<double> w(static_cast<size_t>(2 * half + 1));
    for (int64_t i = -half; i <= half; ++i)
        w[static_cast<size_t>(i + half)] = std::exp(-0.5 * double(i * i) / (sigma * sigma));

    std::vector<double> line(static_cast<size_t>(len));
    auto index = [&](int64_t z, int64_t y, int64_t x) { return (z * H + y) * W + x; };
    const int64_t n_outer = axis == 0 ? H * W : axis == 1 ? D * W : D * H;
    for (int64_t o = 0; o < n_outer; ++o) {
        for (int64_t i = 0; i < len; ++i) {
            int64_t z, y, x;
            if (axis == 0) { z = i; y = o / W; x = o % W; }
            else if (axis == 1) { z = o / W; y = i; x = o % W; }
            else { z = o / H; y = o % H; x = i; }
            line[static_cast<size_t>(i)] = double(f[index(z, y, x)]);
        }
        for (int64_t i = 0; i < len; ++i) {
            double acc = 0.0, wsum = 0.0;
            const int64_t lo = std::max<int64_t>(0, i - half);
            const int64_t hi = std::min<int64_t>(len - 1, i + half);
            for (int64_t j = lo; j <= hi; ++j) {
                const double wij = w[static_cast<size_t>(j - i + half)];
                acc += wij * line[static_cast<size_t>(j)];
                wsum += wij;
            }
            int64_t z, y, x;
            if (axis == 0) { z = i; y = o / W; x = o % W; }
            else if (axis == 1) { z = o / W; y = i; x = o % W; }
            else { z = o / H; y = o % H; x = i; }
            f[index(z, y, x)] = static_cast<T>(acc / wsum);
        }
    }
}

// White noise -> Gaussian blur (scale voxels) -> exactly zero mean and unit
// RMS, so `amplitude * field` perturbs with RMS `amplitude` and no net offset.
template <typename T>
Tensor<T> smooth_noise_field(const std::vector<int64_t>& dhw, double scale, Rng& rng) {
    require(dhw.size() == 3, "smooth_noise_field: dims must be [D,H,W]");
    Tensor<T> f({1, dhw[0], dhw[1], dhw[2]});
    for (int64_t i = 0; i < f.size(); ++i) f[i] = static_cast<T>(rng.normal());
    for (int axis = 0; axis < 3; ++axis) gaussian_blur_axis(f, axis, scale);
    double mean = 0.0;
    for (int64_t i = 0; i < f.size(); ++i) mean += double(f[i]);
    mean /= double(f.size());
    double ms = 0.0;
    for (int64_t i = 0; i < f.size(); ++i) {
        f[i] = static_cast<T>(double(f[i]) - mean);
        ms += double(f[i]) * double(f[i]);
    }
    const double rms = std::sqrt(ms / double(f.size()));
    if (rms > 1e-12) {
        const T inv = static_cast<T>(1.0 / rms);
        for (int64_t i = 0; i < f.size(); ++i) f[i] *= inv;
    }
    return f;
}

} // namespace mrfuse

#endif
