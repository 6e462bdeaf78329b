#ifndef MRFUSE_OPS_HPP
#define MRFUSE_OPS_HPP

#include <cmath>
#include <cstdint>

#include "mrfuse/tensor.hpp"

// Differentiable operations. Every op computes its result eagerly and, when a
// tape is active and some input participates in gradients, records a backward
// closure that accumulates into the inputs' grad buffers. All loops are
// single-threaded with a fixed order, so results are bit-reproducible.

namespace mrfuse {

namespace detail {

template <typename T, typename F>
void track(Tensor<T>& out, std::initializer_list<const Tensor<T>*> inputs, F&& backward_fn) {
    auto* tape = Tape<T>::active();
    if (!tape) return;
    bool need = false;
    for (const auto* t : inputs) need = need || t->requires_grad();
    if (!need) return;
    out.set_requires_grad(true);
    tape->record(std::forward<F>(backward_fn));
}

} // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.same_shape(b), "add: shape mismatch " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
    Tensor<T> out(a.dims());
    const T* av = a.data();
    const T* bv = b.data();
    T* ov = out.data();
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
    detail::track(out, {&a, &b}, [a, b, out]() mutable {
        const auto& g = out.grad();
        if (a.requires_grad()) {
            auto& ga = const_cast<Tensor<T>&>(a).grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto& gb = const_cast<Tensor<T>&>(b).grad();
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    Tensor<T> out(x.dims());
    const T* xv = x.data();
    T* ov = out.data();
    const int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) ov[i] = factor * xv[i];
    detail::track(out, {&x}, [x, out, factor]() mutable {
        const auto& g = out.grad();
        auto& gx = const_cast<Tensor<T>&>(x).grad();
        for (size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
    });
    return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = 0;
    const T* xv = x.data();
    const int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) acc += xv[i];
    Tensor<T> out = Tensor<T>::scalar(acc);
    detail::track(out, {&x}, [x, out]() mutable {
        const T g = out.grad()[0];
        auto& gx = const_cast<Tensor<T>&>(x).grad();
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
    return out;
}

// Per-channel bias on a [C,D,H,W] tensor; the one broadcast the core supports.
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    require(x.rank() == 4, "add_channel_bias: expected [C,D,H,W], got " + shape_str(x.dims()));
    require(bias.rank() == 1 && bias.dim(0) == x.dim(0),
            "add_channel_bias: bias shape " + shape_str(bias.dims()) + " does not match channels of " +
                shape_str(x.dims()));
    Tensor<T> out(x.dims());
    const int64_t C = x.dim(0);
    const int64_t spatial = x.size() / C;
    const T* xv = x.data();
    const T* bv = bias.data();
    T* ov = out.data();
    for (int64_t c = 0; c < C; ++c) {
        const T b = bv[c];
        for (int64_t i = 0; i < spatial; ++i) ov[c * spatial + i] = xv[c * spatial + i] + b;
    }
    detail::track(out, {&x, &bias}, [x, bias, out, C, spatial]() mutable {
        const auto& g = out.grad();
        if (x.requires_grad()) {
            auto& gx = const_cast<Tensor<T>&>(x).grad();
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (bias.requires_grad()) {
            auto& gb = const_cast<Tensor<T>&>(bias).grad();
            for (int64_t c = 0; c < C; ++c) {
                T acc = 0;
                for (int64_t i = 0; i < spatial; ++i) acc += g[static_cast<size_t>(c * spatial + i)];
                gb[static_cast<size_t>(c)] += acc;
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T alpha) {
    require(alpha > T(0) && alpha < T(1), "leaky_relu: alpha must be in (0,1)");
    Tensor<T> out(x.dims());
    const T* xv = x.data();
    T* ov = out.data();
    const int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) ov[i] = xv[i] > T(0) ? xv[i] : alpha * xv[i];
    detail::track(out, {&x}, [x, out, alpha]() mutable {
        const auto& g = out.grad();
        auto& gx = const_cast<Tensor<T>&>(x).grad();
        const T* xvv = x.data();
        // slope at exactly 0 is alpha
        for (size_t i = 0; i < g.size(); ++i) gx[i] += (xvv[i] > T(0) ? T(1) : alpha) * g[i];
    });
    return out;
}

namespace detail {

template <typename T>
void check_conv_args(const Tensor<T>& x, const Tensor<T>& kernel, int stride) {
    require(x.rank() == 4, "conv3d: input must be [Cin,D,H,W], got " + shape_str(x.dims()));
    require(kernel.rank() == 5, "conv3d: kernel must be [Cout,Cin,k,k,k], got " + shape_str(kernel.dims()));
    const int64_t k = kernel.dim(2);
    require(kernel.dim(3) == k && kernel.dim(4) == k && (k == 1 || k == 3),
            "conv3d: kernel spatial size must be cubic 1 or 3, got " + shape_str(kernel.dims()));
    require(stride == 1 || stride == 2, "conv3d: stride must be 1 or 2");
    require(kernel.dim(1) == x.dim(0), "conv3d: input channels " + shape_str(x.dims()) +
                                           " do not match kernel " + shape_str(kernel.dims()));
}

} // namespace detail

// Cross-correlation with zero padding (k-1)/2 and stride 1 or 2. Output
// spatial dims are ceil(D/stride).
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& kernel, int stride) {
    detail::check_conv_args(x, kernel, stride);
    const int64_t Cin = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Cout = kernel.dim(0), K = kernel.dim(2);
    const int64_t pad = (K - 1) / 2;
    const int64_t Do = ceil_div(D, stride), Ho = ceil_div(H, stride), Wo = ceil_div(W, stride);

    Tensor<T> out({Cout, Do, Ho, Wo});
    const T* xv = x.data();
    const T* kv = kernel.data();
    T* ov = out.data();

    for (int64_t co = 0; co < Cout; ++co)
        for (int64_t zo = 0; zo < Do; ++zo)
            for (int64_t yo = 0; yo < Ho; ++yo)
                for (int64_t xo = 0; xo < Wo; ++xo) {
                    T acc = 0;
                    for (int64_t ci = 0; ci < Cin; ++ci)
                        for (int64_t dz = 0; dz < K; ++dz) {
                            const int64_t zi = zo * stride - pad + dz;
                            if (zi < 0 || zi >= D) continue;
                            for (int64_t dy = 0; dy < K; ++dy) {
                                const int64_t yi = yo * stride - pad + dy;
                                if (yi < 0 || yi >= H) continue;
                                const T* xrow = xv + ((ci * D + zi) * H + yi) * W;
                                const T* krow = kv + (((co * Cin + ci) * K + dz) * K + dy) * K;
                                for (int64_t dx = 0; dx < K; ++dx) {
                                    const int64_t xi = xo * stride - pad + dx;
                                    if (xi < 0 || xi >= W) continue;
                                    acc += krow[dx] * xrow[xi];
                                }
                            }
                        }
                    ov[((co * Do + zo) * Ho + yo) * Wo + xo] = acc;
                }

    detail::track(out, {&x, &kernel}, [x, kernel, out, stride]() mutable {
        const int64_t Cin = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
        const int64_t Cout = kernel.dim(0), K = kernel.dim(2);
        const int64_t pad = (K - 1) / 2;
        const int64_t Do = out.dim(1), Ho = out.dim(2), Wo = out.dim(3);
        const auto& g = out.grad();
        const bool need_dx = x.requires_grad();
        const bool need_dk = kernel.requires_grad();
        T* gx = need_dx ? const_cast<Tensor<T>&>(x).grad().data() : nullptr;
        T* gk = need_dk ? const_cast<Tensor<T>&>(kernel).grad().data() : nullptr;
        const T* xv = x.data();
        const T* kv = kernel.data();
        for (int64_t co = 0; co < Cout; ++co)
            for (int64_t zo = 0; zo < Do; ++zo)
                for (int64_t yo = 0; yo < Ho; ++yo)
                    for (int64_t xo = 0; xo < Wo; ++xo) {
                        const T go = g[static_cast<size_t>(((co * Do + zo) * Ho + yo) * Wo + xo)];
                        if (go == T(0)) continue;
                        for (int64_t ci = 0; ci < Cin; ++ci)
                            for (int64_t dz = 0; dz < K; ++dz) {
                                const int64_t zi = zo * stride - pad + dz;
                                if (zi < 0 || zi >= D) continue;
                                for (int64_t dy = 0; dy < K; ++dy) {
                                    const int64_t yi = yo * stride - pad + dy;
                                    if (yi < 0 || yi >= H) continue;
                                    for (int64_t dx = 0; dx < K; ++dx) {
                                        const int64_t xi = xo * stride - pad + dx;
                                        if (xi < 0 || xi >= W) continue;
                                        const int64_t xoff = ((ci * D + zi) * H + yi) * W + xi;
                                        const int64_t koff = ((((co * Cin + ci) * K + dz) * K + dy) * K + dx);
                                        if (need_dx) gx[xoff] += kv[koff] * go;
                                        if (need_dk) gk[koff] += xv[xoff] * go;
                                    }
                                }
                            }
                    }
    });
    return out;
}

// Adjoint of conv3d(., kernel, stride=2) as a linear map: maps a tensor on
// the conv-output grid back to the conv-input grid given by target spatial
// dims. The kernel is shared with the paired conv direction, i.e. shaped
// [C_in_here, C_out_here, k, k, k].
template <typename T>
Tensor<T> transposed_conv3d(const Tensor<T>& y, const Tensor<T>& kernel,
                            const std::vector<int64_t>& target_spatial) {
    require(y.rank() == 4, "transposed_conv3d: input must be [C,D,H,W], got " + shape_str(y.dims()));
    require(kernel.rank() == 5, "transposed_conv3d: kernel must be rank 5, got " + shape_str(kernel.dims()));
    const int64_t K = kernel.dim(2);
    require(kernel.dim(3) == K && kernel.dim(4) == K && (K == 1 || K == 3),
            "transposed_conv3d: kernel spatial size must be cubic 1 or 3");
    require(kernel.dim(0) == y.dim(0), "transposed_conv3d: input channels " + shape_str(y.dims()) +
                                           " do not match kernel " + shape_str(kernel.dims()));
    require(target_spatial.size() == 3, "transposed_conv3d: target dims must be [D,H,W]");
    for (size_t a = 0; a < 3; ++a)
        require(ceil_div(target_spatial[a], 2) == y.dim(a + 1),
                "transposed_conv3d: target shape " + shape_str(target_spatial) +
                    " is not the paired conv input of " + shape_str(y.dims()));

    const int64_t Cy = y.dim(0), Dy = y.dim(1), Hy = y.dim(2), Wy = y.dim(3);
    const int64_t Cx = kernel.dim(1);
    const int64_t D = target_spatial[0], H = target_spatial[1], W = target_spatial[2];
    const int64_t pad = (K - 1) / 2;
    const int stride = 2;

    Tensor<T> out({Cx, D, H, W});
    const T* yv = y.data();
    const T* kv = kernel.data();
    T* ov = out.data();

    for (int64_t co = 0; co < Cy; ++co)
        for (int64_t zo = 0; zo < Dy; ++zo)
            for (int64_t yo = 0; yo < Hy; ++yo)
                for (int64_t xo = 0; xo < Wy; ++xo) {
                    const T v = yv[((co * Dy + zo) * Hy + yo) * Wy + xo];
                    if (v == T(0)) continue;
                    for (int64_t ci = 0; ci < Cx; ++ci)
                        for (int64_t dz = 0; dz < K; ++dz) {
                            const int64_t zi = zo * stride - pad + dz;
                            if (zi < 0 || zi >= D) continue;
                            for (int64_t dy = 0; dy < K; ++dy) {
                                const int64_t yi = yo * stride - pad + dy;
                                if (yi < 0 || yi >= H) continue;
                                for (int64_t dx = 0; dx < K; ++dx) {
                                    const int64_t xi = xo * stride - pad + dx;
                                    if (xi < 0 || xi >= W) continue;
                                    ov[((ci * D + zi) * H + yi) * W + xi] +=
                                        kv[(((co * Cx + ci) * K + dz) * K + dy) * K + dx] * v;
                                }
                            }
                        }
                }

    detail::track(out, {&y, &kernel}, [y, kernel, out]() mutable {
        const int64_t Cy = y.dim(0), Dy = y.dim(1), Hy = y.dim(2), Wy = y.dim(3);
        const int64_t Cx = kernel.dim(1), K = kernel.dim(2);
        const int64_t D = out.dim(1), H = out.dim(2), W = out.dim(3);
        const int64_t pad = (K - 1) / 2;
        const int stride = 2;
        const auto& g = out.grad();
        const bool need_dy = y.requires_grad();
        const bool need_dk = kernel.requires_grad();
        T* gy = need_dy ? const_cast<Tensor<T>&>(y).grad().data() : nullptr;
        T* gk = need_dk ? const_cast<Tensor<T>&>(kernel).grad().data() : nullptr;
        const T* yv = y.data();
        const T* kv = kernel.data();
        for (int64_t co = 0; co < Cy; ++co)
            for (int64_t zo = 0; zo < Dy; ++zo)
                for (int64_t yo = 0; yo < Hy; ++yo)
                    for (int64_t xo = 0; xo < Wy; ++xo) {
                        const int64_t yoff = ((co * Dy + zo) * Hy + yo) * Wy + xo;
                        for (int64_t ci = 0; ci < Cx; ++ci)
                            for (int64_t dz = 0; dz < K; ++dz) {
                                const int64_t zi = zo * stride - pad + dz;
                                if (zi < 0 || zi >= D) continue;
                                for (int64_t dy = 0; dy < K; ++dy) {
                                    const int64_t yi = yo * stride - pad + dy;
                                    if (yi < 0 || yi >= H) continue;
                                    for (int64_t dx = 0; dx < K; ++dx) {
                                        const int64_t xi = xo * stride - pad + dx;
                                        if (xi < 0 || xi >= W) continue;
                                        const T go = g[static_cast<size_t>(((ci * D + zi) * H + yi) * W + xi)];
                                        const int64_t koff = (((co * Cx + ci) * K + dz) * K + dy) * K + dx;
                                        if (need_dy) gy[yoff] += kv[koff] * go;
                                        if (need_dk) gk[koff] += yv[yoff] * go;
                                    }
                                }
                            }
                    }
    });
    return out;
}

// Per-voxel log-softmax over the channel axis of [K,D,H,W], evaluated with
// the max-shift so finite inputs can never overflow.
template <typename T>
Tensor<T> log_softmax_channels(const Tensor<T>& x) {
    require(x.rank() == 4 && x.dim(0) >= 1, "log_softmax_channels: expected [K,D,H,W], got " + shape_str(x.dims()));
    const int64_t K = x.dim(0);
    const int64_t spatial = x.size() / K;
    Tensor<T> out(x.dims());
    const T* xv = x.data();
    T* ov = out.data();
    for (int64_t i = 0; i < spatial; ++i) {
        T m = xv[i];
        for (int64_t k = 1; k < K; ++k) m = std::max(m, xv[k * spatial + i]);
        T s = 0;
        for (int64_t k = 0; k < K; ++k) s += std::exp(xv[k * spatial + i] - m);
        const T lse = m + std::log(s);
        for (int64_t k = 0; k < K; ++k) ov[k * spatial + i] = xv[k * spatial + i] - lse;
    }
    detail::track(out, {&x}, [x, out, K, spatial]() mutable {
        const auto& g = out.grad();
        auto& gx = const_cast<Tensor<T>&>(x).grad();
        const T* ovv = out.data();
        for (int64_t i = 0; i < spatial; ++i) {
            T gsum = 0;
            for (int64_t k = 0; k < K; ++k) gsum += g[static_cast<size_t>(k * spatial + i)];
            for (int64_t k = 0; k < K; ++k) {
                const size_t off = static_cast<size_t>(k * spatial + i);
                gx[off] += g[off] - std::exp(ovv[off]) * gsum;
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
    require(x.rank() == 4 && x.dim(0) >= 1, "softmax_channels: expected [K,D,H,W], got " + shape_str(x.dims()));
    const int64_t K = x.dim(0);
    const int64_t spatial = x.size() / K;
    Tensor<T> out(x.dims());
    const T* xv = x.data();
    T* ov = out.data();
    for (int64_t i = 0; i < spatial; ++i) {
        T m = xv[i];
        for (int64_t k = 1; k < K; ++k) m = std::max(m, xv[k * spatial + i]);
        T s = 0;
        for (int64_t k = 0; k < K; ++k) {
            const T e = std::exp(xv[k * spatial + i] - m);
            ov[k * spatial + i] = e;
            s += e;
        }
        const T inv = T(1) / s;
        for (int64_t k = 0; k < K; ++k) ov[k * spatial + i] *= inv;
    }
    detail::track(out, {&x}, [x, out, K, spatial]() mutable {
        const auto& g = out.grad();
        auto& gx = const_cast<Tensor<T>&>(x).grad();
        const T* p = out.data();
        for (int64_t i = 0; i < spatial; ++i) {
            T dot = 0;
            for (int64_t k = 0; k < K; ++k) {
                const size_t off = static_cast<size_t>(k * spatial + i);
                dot += p[off] * g[off];
            }
            for (int64_t k = 0; k < K; ++k) {
                const size_t off = static_cast<size_t>(k * spatial + i);
                gx[off] += p[off] * (g[off] - dot);
            }
        }
    });
    return out;
}

// Mean over voxels of -sum_k z_ik * log p_ik. Targets must be one-hot; rows
// whose sum strays more than 1e-6 from 1 are rejected.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& log_probs, const Tensor<T>& target_onehot) {
    require(log_probs.same_shape(target_onehot), "cross_entropy: shape mismatch " + shape_str(log_probs.dims()) +
                                                     " vs " + shape_str(target_onehot.dims()));
    require(log_probs.rank() == 4, "cross_entropy: expected [K,D,H,W]");
    const int64_t K = log_probs.dim(0);
    const int64_t spatial = log_probs.size() / K;
    const T* lp = log_probs.data();
    const T* z = target_onehot.data();
    double acc = 0;
    for (int64_t i = 0; i < spatial; ++i) {
        T rowsum = 0;
        for (int64_t k = 0; k < K; ++k) rowsum += z[k * spatial + i];
        require(std::abs(double(rowsum) - 1.0) <= 1e-6,
                "cross_entropy: target row " + std::to_string(i) + " is not one-hot (sum=" +
                    std::to_string(double(rowsum)) + ")");
        for (int64_t k = 0; k < K; ++k) {
            const T zk = z[k * spatial + i];
            if (zk != T(0)) acc += double(zk) * double(lp[k * spatial + i]);
        }
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(-acc / double(spatial)));
    detail::track(out, {&log_probs}, [log_probs, target_onehot, out, K, spatial]() mutable {
        const T g = out.grad()[0];
        auto& gl = const_cast<Tensor<T>&>(log_probs).grad();
        const T* z = target_onehot.data();
        const T scale = -g / static_cast<T>(spatial);
        for (size_t i = 0; i < gl.size(); ++i) gl[i] += scale * z[i];
    });
    return out;
}

// Concatenate along the channel axis.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.rank() == 4 && b.rank() == 4, "concat_channels: expected [C,D,H,W] inputs");
    for (size_t i = 1; i < 4; ++i)
        require(a.dim(i) == b.dim(i), "concat_channels: spatial mismatch " + shape_str(a.dims()) + " vs " +
                                          shape_str(b.dims()));
    const int64_t Ca = a.dim(0), Cb = b.dim(0);
    Tensor<T> out({Ca + Cb, a.dim(1), a.dim(2), a.dim(3)});
    const int64_t na = a.size(), nb = b.size();
    std::copy(a.data(), a.data() + na, out.data());
    std::copy(b.data(), b.data() + nb, out.data() + na);
    detail::track(out, {&a, &b}, [a, b, out]() mutable {
        const auto& g = out.grad();
        const size_t na = static_cast<size_t>(a.size());
        if (a.requires_grad()) {
            auto& ga = const_cast<Tensor<T>&>(a).grad();
            for (size_t i = 0; i < na; ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto& gb = const_cast<Tensor<T>&>(b).grad();
            for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
        }
    });
    return out;
}

template <typename T>
Tensor<T> exp_elem(const Tensor<T>& x) {
    Tensor<T> out(x.dims());
    const T* xv = x.data();
    T* ov = out.data();
    const int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) ov[i] = std::exp(xv[i]);
    detail::track(out, {&x}, [x, out]() mutable {
        const auto& g = out.grad();
        auto& gx = const_cast<Tensor<T>&>(x).grad();
        const T* ovv = out.data();
        for (size_t i = 0; i < g.size(); ++i) gx[i] += ovv[i] * g[i];
    });
    return out;
}

template <typename T>
T dot_flat(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.size() == b.size(), "dot_flat: size mismatch");
    T acc = 0;
    const T* av = a.data();
    const T* bv = b.data();
    for (int64_t i = 0; i < a.size(); ++i) acc += av[i] * bv[i];
    return acc;
}

} // namespace mrfuse

#endif
