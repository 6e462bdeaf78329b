#ifndef MRFUSE_UNET_HPP
#define MRFUSE_UNET_HPP

#include <cmath>
#include <string>
#include <vector>

#include "mrfuse/common.hpp"
#include "mrfuse/ops.hpp"
#include "mrfuse/rng.hpp"
#include "mrfuse/tensor.hpp"

// Five-level encoder/decoder segmentation net. Each encoder level is one
// stride-2 conv (2^j .. 2^(j+4) filters); the decoder mirrors it with five
// stride-2 transposed convs (2^(j+4) .. 2^j filters), concatenating the
// encoder feature of matching resolution after each upsample. A final 1x1x1
// conv maps to K logit channels with no activation.

namespace mrfuse {

struct UNetConfig {
    int j = 1;                // filter exponent
    int64_t K = 4;            // output classes
    int64_t in_channels = 1;  // C
    double alpha = 0.2;       // leaky-ReLU slope

    void validate() const {
        require(j >= 1 && j <= 6, "unet: j must be in {1..6}, got " + std::to_string(j));
        require(K >= 2, "unet: K must be >= 2");
        require(in_channels >= 1, "unet: in_channels must be >= 1");
        require(alpha > 0 && alpha < 1, "unet: alpha must be in (0,1)");
    }

    int64_t enc_filters(int level) const { return int64_t(1) << (j + level); }  // level 0..4
    int64_t dec_filters(int step) const { return int64_t(1) << (j + 4 - step); }  // step 0..4
};

template <typename T>
struct UNet {
    UNetConfig cfg;
    std::vector<Tensor<T>> enc_w, enc_b;  // 5 stride-2 convs
    std::vector<Tensor<T>> dec_w, dec_b;  // 5 stride-2 transposed convs
    Tensor<T> final_w, final_b;           // 1x1x1 conv to K channels

    static UNet build(const UNetConfig& cfg, uint64_t seed) {
        cfg.validate();
        UNet net;
        net.cfg = cfg;
        auto init = [](std::vector<int64_t> kdims, int64_t fan_in, Rng& rng) {
            const T bound = static_cast<T>(std::sqrt(6.0 / double(fan_in)));
            return Tensor<T>::uniform(std::move(kdims), bound, rng);
        };
        int64_t cin = cfg.in_channels;
        for (int l = 0; l < 5; ++l) {
            const int64_t cout = cfg.enc_filters(l);
            Rng rng = Rng::stream(seed, 1, uint64_t(l));
            net.enc_w.push_back(init({cout, cin, 3, 3, 3}, cin * 27, rng));
            net.enc_b.push_back(Tensor<T>::zeros({cout}));
            cin = cout;
        }
        for (int s = 0; s < 5; ++s) {
            const int64_t cout = cfg.dec_filters(s);
            Rng rng = Rng::stream(seed, 2, uint64_t(s));
            // transposed kernel: [channels entering, channels produced, k,k,k]
            net.dec_w.push_back(init({cin, cout, 3, 3, 3}, cin * 27, rng));
            net.dec_b.push_back(Tensor<T>::zeros({cout}));
            // the next step sees this output concatenated with the skip
            cin = cout + (s < 4 ? cfg.enc_filters(3 - s) : 0);
        }
        Rng rng = Rng::stream(seed, 3, 0);
        net.final_w = init({cfg.K, cin, 1, 1, 1}, cin, rng);
        net.final_b = Tensor<T>::zeros({cfg.K});
        return net;
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        require(x.rank() == 4, "unet: input must be [C,D,H,W], got " + shape_str(x.dims()));
        require(x.dim(0) == cfg.in_channels,
                "unet: input has " + std::to_string(x.dim(0)) + " channels, config says " +
                    std::to_string(cfg.in_channels));

        // spatial dims at each depth; level l maps scale[l] -> scale[l+1]
        std::vector<std::vector<int64_t>> scale(6);
        scale[0] = {x.dim(1), x.dim(2), x.dim(3)};
        for (int l = 1; l <= 5; ++l)
            scale[l] = {ceil_div(scale[l - 1][0], 2), ceil_div(scale[l - 1][1], 2),
                        ceil_div(scale[l - 1][2], 2)};

        const T alpha = static_cast<T>(cfg.alpha);
        std::vector<Tensor<T>> enc_out;
        Tensor<T> h = x;
        for (int l = 0; l < 5; ++l) {
            h = leaky_relu(add_channel_bias(conv3d(h, enc_w[size_t(l)], 2), enc_b[size_t(l)]), alpha);
            enc_out.push_back(h);
        }
        for (int s = 0; s < 5; ++s) {
            h = transposed_conv3d(h, dec_w[size_t(s)], scale[size_t(4 - s)]);
            h = leaky_relu(add_channel_bias(h, dec_b[size_t(s)]), alpha);
            if (s < 4) h = concat_channels(h, enc_out[size_t(3 - s)]);
        }
        return add_channel_bias(conv3d(h, final_w, 1), final_b);  // logits, no activation
    }

    std::vector<Tensor<T>> parameters() {
        std::vector<Tensor<T>> ps;
        for (auto& t : enc_w) ps.push_back(t);
        for (auto& t : enc_b) ps.push_back(t);
        for (auto& t : dec_w) ps.push_back(t);
        for (auto& t : dec_b) ps.push_back(t);
        ps.push_back(final_w);
        ps.push_back(final_b);
        return ps;
    }

    void set_requires_grad(bool v) {
        for (auto& t : parameters()) t.set_requires_grad(v);
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& t : enc_w) n += t.size();
        for (const auto& t : enc_b) n += t.size();
        for (const auto& t : dec_w) n += t.size();
        for (const auto& t : dec_b) n += t.size();
        return n + final_w.size() + final_b.size();
    }
};

// Closed-form scalar count implied by the config alone.
inline int64_t unet_param_count(const UNetConfig& cfg) {
    cfg.validate();
    int64_t n = 0;
    int64_t cin = cfg.in_channels;
    for (int l = 0; l < 5; ++l) {
        const int64_t cout = cfg.enc_filters(l);
        n += cout * cin * 27 + cout;
        cin = cout;
    }
    for (int s = 0; s < 5; ++s) {
        const int64_t cout = cfg.dec_filters(s);
        n += cin * cout * 27 + cout;
        cin = cout + (s < 4 ? cfg.enc_filters(3 - s) : 0);
    }
    return n + cfg.K * cin + cfg.K;
}

} // namespace mrfuse

#endif
