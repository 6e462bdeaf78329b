#ifndef MRFUSE_AUGMENT_HPP
#define MRFUSE_AUGMENT_HPP

#include <cmath>
#include <utility>

#include "mrfuse/common.hpp"
#include "mrfuse/random_fields.hpp"
#include "mrfuse/rng.hpp"
#include "mrfuse/tensor.hpp"

// Training-time augmentation: a smoothed random displacement field warps
// image and labels identically (trilinear vs nearest-neighbor resampling),
// then a multiplicative exp bias field and additive Gaussian noise touch the
// image only. Zero amplitudes short-circuit, so the all-zero configuration is
// the identity map bit-for-bit.

namespace mrfuse {

struct AugmentationParams {
    double deform_amplitude = 0.0;  // RMS displacement per axis, in voxels
    double deform_scale = 4.0;      // smoothing sigma of the displacement field
    double bias_amplitude = 0.0;    // RMS of the log bias field
    double bias_scale = 8.0;
    double noise_sigma = 0.0;
    uint64_t seed = 0;              // per-sample stream
};

namespace detail {

template <typename T>
T sample_trilinear(const Tensor<T>& img, double z, double y, double x) {
    const int64_t D = img.dim(1), H = img.dim(2), W = img.dim(3);
    const auto clampd = [](double v, double hi) { return v < 0.0 ? 0.0 : (v > hi ? hi : v); };
    z = clampd(z, double(D - 1));
    y = clampd(y, double(H - 1));
    x = clampd(x, double(W - 1));
    const int64_t z0 = static_cast<int64_t>(z), y0 = static_cast<int64_t>(y),
                  x0 = static_cast<int64_t>(x);
    const int64_t z1 = std::min(z0 + 1, D - 1), y1 = std::min(y0 + 1, H - 1),
                  x1 = std::min(x0 + 1, W - 1);
    const double fz = z - double(z0), fy = y - double(y0), fx = x - double(x0);
    auto v = [&](int64_t zz, int64_t yy, int64_t xx) { return double(img.at(0, zz, yy, xx)); };
    const double c00 = v(z0, y0, x0) * (1 - fx) + v(z0, y0, x1) * fx;
    const double c01 = v(z0, y1, x0) * (1 - fx) + v(z0, y1, x1) * fx;
    const double c10 = v(z1, y0, x0) * (1 - fx) + v(z1, y0, x1) * fx;
    const double c11 = v(z1, y1, x0) * (1 - fx) + v(z1, y1, x1) * fx;
    const double c0 = c00 * (1 - fy) + c01 * fy;
    const double c1 = c10 * (1 - fy) + c11 * fy;
    return static_cast<T>(c0 * (1 - fz) + c1 * fz);
}

template <typename T>
T sample_nearest(const Tensor<T>& img, double z, double y, double x) {
    const int64_t D = img.dim(1), H = img.dim(2), W = img.dim(3);
    auto nearest = [](double v, int64_t hi) {
        int64_t i = static_cast<int64_t>(std::floor(v + 0.5));
        return i < 0 ? int64_t(0) : (i > hi ? hi : i);
    };
    return img.at(0, nearest(z, D - 1), nearest(y, H - 1), nearest(x, W - 1));
}

} // namespace detail

template <typename T>
std::pair<Tensor<T>, Tensor<T>> augment(const Tensor<T>& image, const Tensor<T>& labels,
                                        const AugmentationParams& p) {
    require(image.rank() == 4 && image.dim(0) == 1, "augment: image must be [1,D,H,W]");
    require(labels.rank() == 4 && labels.dim(0) == 1, "augment: labels must be [1,D,H,W]");
    for (size_t i = 1; i < 4; ++i)
        require(image.dim(i) == labels.dim(i), "augment: image/label spatial dims differ: " +
                                                   shape_str(image.dims()) + " vs " +
                                                   shape_str(labels.dims()));
    require(p.deform_amplitude >= 0 && p.bias_amplitude >= 0 && p.noise_sigma >= 0,
            "augment: amplitudes must be non-negative");

    const int64_t D = image.dim(1), H = image.dim(2), W = image.dim(3);
    Tensor<T> img_out = image;
    Tensor<T> lab_out = labels;

    if (p.deform_amplitude > 0.0) {
        // one field per axis; the same displacement drives both resamplings
        Rng rz = Rng::stream(p.seed, 11);
        Rng ry = Rng::stream(p.seed, 12);
        Rng rx = Rng::stream(p.seed, 13);
        Tensor<T> uz = smooth_noise_field<T>({D, H, W}, p.deform_scale, rz);
        Tensor<T> uy = smooth_noise_field<T>({D, H, W}, p.deform_scale, ry);
        Tensor<T> ux = smooth_noise_field<T>({D, H, W}, p.deform_scale, rx);
        Tensor<T> wi({1, D, H, W});
        Tensor<T> wl({1, D, H, W});
        for (int64_t z = 0; z < D; ++z)
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x) {
                    const double sz = double(z) + p.deform_amplitude * double(uz.at(0, z, y, x));
                    const double sy = double(y) + p.deform_amplitude * double(uy.at(0, z, y, x));
                    const double sx = double(x) + p.deform_amplitude * double(ux.at(0, z, y, x));
                    wi.at(0, z, y, x) = detail::sample_trilinear(image, sz, sy, sx);
                    wl.at(0, z, y, x) = detail::sample_nearest(labels, sz, sy, sx);
                }
        img_out = std::move(wi);
        lab_out = std::move(wl);
    }

    if (p.bias_amplitude > 0.0) {
        Rng rb = Rng::stream(p.seed, 14);
        Tensor<T> field = smooth_noise_field<T>({D, H, W}, p.bias_scale, rb);
        Tensor<T> biased = img_out.clone();
        for (int64_t i = 0; i < biased.size(); ++i)
            biased[i] = static_cast<T>(double(biased[i]) *
                                       std::exp(p.bias_amplitude * double(field[i])));
        img_out = std::move(biased);
    }

    if (p.noise_sigma > 0.0) {
        Rng rn = Rng::stream(p.seed, 15);
        Tensor<T> noisy = img_out.clone();
        for (int64_t i = 0; i < noisy.size(); ++i)
            noisy[i] = static_cast<T>(double(noisy[i]) + p.noise_sigma * rn.normal());
        img_out = std::move(noisy);
    }

    return {std::move(img_out), std::move(lab_out)};
}

} // namespace mrfuse

#endif
