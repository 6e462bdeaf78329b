#ifndef MRFUSE_TRAIN_HPP
#define MRFUSE_TRAIN_HPP

// Joint optimization of the UNet expert and the MRF prior by backpropagation
// through the mean-field recurrence. One sample per step: augment, fuse with
// a randomly drawn iteration count, cross-entropy on the final-iteration log
// responsibilities, Adam, then re-projection of the structurally-zero kernel
// centers. Also: the Dice metric, dataset loading, the binary checkpoint
// format, and the per-epoch metrics CSV.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mrfuse/augment.hpp"
#include "mrfuse/csv.hpp"
#include "mrfuse/keyval_config.hpp"
#include "mrfuse/mean_field.hpp"
#include "mrfuse/mrf.hpp"
#include "mrfuse/ops.hpp"
#include "mrfuse/rng.hpp"
#include "mrfuse/tensor.hpp"
#include "mrfuse/unet.hpp"
#include "mrfuse/volume.hpp"

namespace mrfuse {

// ---------------------------------------------------------------- dice

// Overlap of class k between two integer label volumes, 2|P∩R| / (|P|+|R|).
// Convention: a class absent from both volumes scores 1 (perfect agreement
// on absence), so per-class means are defined even for rare classes.
template <typename T>
double dice(const Tensor<T>& pred, const Tensor<T>& ref, int64_t k) {
    require(pred.same_shape(ref), "dice: shape mismatch " + shape_str(pred.dims()) + " vs " +
                                      shape_str(ref.dims()));
    int64_t np = 0, nr = 0, both = 0;
    for (int64_t i = 0; i < pred.size(); ++i) {
        const bool p = int64_t(std::llround(double(pred[i]))) == k;
        const bool r = int64_t(std::llround(double(ref[i]))) == k;
        np += p;
        nr += r;
        both += p && r;
    }
    if (np + nr == 0) return 1.0;
    return 2.0 * double(both) / double(np + nr);
}

template <typename T>
std::vector<double> dice_per_class(const Tensor<T>& pred, const Tensor<T>& ref, int64_t K) {
    std::vector<double> out(static_cast<size_t>(K));
    for (int64_t k = 0; k < K; ++k) out[size_t(k)] = dice(pred, ref, k);
    return out;
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / double(v.size());
}

// ---------------------------------------------------------------- adam

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Moments are kept in double regardless of the parameter precision so the
// schedule of updates is the same shape at f32 and f64.
template <typename T>
class Adam {
public:
    explicit Adam(std::vector<Tensor<T>> params, AdamConfig cfg = {})
        : params_(std::move(params)), cfg_(cfg) {
        for (auto& p : params_) {
            m_.emplace_back(size_t(p.size()), 0.0);
            v_.emplace_back(size_t(p.size()), 0.0);
        }
    }

    // One update from the gradients accumulated on the parameters; gradients
    // are consumed (zeroed) whether or not the step is applied. A non-finite
    // gradient anywhere rejects the whole step so a single bad sample cannot
    // poison the moment estimates.
    bool step(double lr) {
        require(lr >= 0, "adam: lr must be non-negative");
        bool finite = true;
        for (auto& p : params_) {
            for (T g : p.grad())
                if (!std::isfinite(double(g))) {
                    finite = false;
                    break;
                }
            if (!finite) break;
        }
        if (!finite) {
            for (auto& p : params_) p.zero_grad();
            ++rejected_;
            return false;
        }
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            auto& g = p.grad();
            for (size_t e = 0; e < g.size(); ++e) {
                const double gd = double(g[e]);
                m_[i][e] = cfg_.beta1 * m_[i][e] + (1.0 - cfg_.beta1) * gd;
                v_[i][e] = cfg_.beta2 * v_[i][e] + (1.0 - cfg_.beta2) * gd * gd;
                const double delta = lr * (m_[i][e] / c1) / (std::sqrt(v_[i][e] / c2) + cfg_.eps);
                p[int64_t(e)] = static_cast<T>(double(p[int64_t(e)]) - delta);
            }
            p.zero_grad();
        }
        return true;
    }

    int64_t steps() const { return t_; }
    int64_t rejected() const { return rejected_; }

private:
    std::vector<Tensor<T>> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    int64_t t_ = 0;
    int64_t rejected_ = 0;
};

// ---------------------------------------------------------------- model

// UNet plus (optionally) the trained MRF prior. Without the prior the model
// is the plain-softmax baseline; it behaves exactly like fusion with zero
// iterations, so the two variants share every downstream code path.
template <typename T>
struct Model {
    UNet<T> unet;
    std::optional<MrfNet<T>> mrf;
    FusionConfig fusion;

    static Model build(const UNetConfig& cfg, const FusionConfig& fusion, bool with_mrf,
                       uint64_t seed) {
        Model m;
        m.unet = UNet<T>::build(cfg, seed);
        if (with_mrf) m.mrf = MrfNet<T>::build(cfg.K, seed);
        m.fusion = fusion;
        return m;
    }

    bool has_mrf() const { return mrf.has_value(); }
    int64_t K() const { return unet.cfg.K; }

    // Responsibilities for one volume. n_override >= 0 forces test mode with
    // that iteration count; the baseline ignores it (its head has no
    // recurrence to iterate).
    FuseResult<T> forward(const Tensor<T>& image, FuseMode mode, Rng* rng = nullptr,
                          int n_override = -1) const {
        Tensor<T> U = unet.forward(image);
        if (!mrf) {
            FuseResult<T> out;
            out.log_R = normalize_logits(U);
            out.R = exp_elem(out.log_R);
            out.n_iter_used = 0;
            return out;
        }
        FusionConfig c = fusion;
        if (n_override >= 0) {
            c.n_iter_test = n_override;
            mode = FuseMode::test;
        }
        return fuse_forward(U, *mrf, c, mode, rng);
    }

    std::vector<Tensor<T>> parameters() {
        auto ps = unet.parameters();
        if (mrf) {
            ps.push_back(mrf->w1);
            ps.push_back(mrf->b1);
            ps.push_back(mrf->w2);
            ps.push_back(mrf->b2);
        }
        return ps;
    }

    void set_requires_grad(bool v) {
        for (auto& p : parameters()) p.set_requires_grad(v);
    }

    void project_zero_center() {
        if (mrf) mrf->project_zero_center();
    }
};

// ---------------------------------------------------------------- dataset

template <typename T>
struct Sample {
    std::string id;
    Tensor<T> image;   // [C,D,H,W]
    Tensor<T> labels;  // [1,D,H,W] integral values in [0,K)
};

// Pairs <id>_image.vol with <id>_labels.vol, sorted by id so the sample
// order (and hence the per-sample RNG streams) is directory-listing
// independent.
template <typename T>
std::vector<Sample<T>> load_dataset(const std::string& dir, int64_t K) {
    namespace fs = std::filesystem;
    require(fs::is_directory(dir), "load_dataset: not a directory: " + dir);
    std::vector<std::string> names;
    const std::string img_suffix = "_image.vol";
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (name.size() > img_suffix.size() && name.ends_with(img_suffix))
            names.push_back(name.substr(0, name.size() - img_suffix.size()));
    }
    std::sort(names.begin(), names.end());
    require(!names.empty(), "load_dataset: no *_image.vol files in " + dir);

    std::vector<Sample<T>> out;
    for (const auto& id : names) {
        const std::string img_path = dir + "/" + id + "_image.vol";
        const std::string lab_path = dir + "/" + id + "_labels.vol";
        auto [img, h] = read_volume<T>(img_path);
        require(h.role == VolumeRole::intensity, "load_dataset: " + img_path + " has role " +
                                                     role_name(h.role) + ", expected intensity");
        Tensor<T> lab = read_labels<T>(lab_path, K);
        require(img.dim(1) == lab.dim(1) && img.dim(2) == lab.dim(2) && img.dim(3) == lab.dim(3),
                "load_dataset: " + id + " image/labels shape mismatch");
        out.push_back({id, std::move(img), std::move(lab)});
    }
    return out;
}

template <typename T>
void save_sample(const std::string& dir, const std::string& id, const Tensor<T>& image,
                 const Tensor<T>& labels) {
    VolumeHeader hi;
    hi.dims = {image.dim(1), image.dim(2), image.dim(3)};
    hi.channels = image.dim(0);
    hi.dtype = VolumeDtype::f32;
    hi.role = VolumeRole::intensity;
    write_volume(dir + "/" + id + "_image.vol", image, hi);

    VolumeHeader hl;
    hl.dims = {labels.dim(1), labels.dim(2), labels.dim(3)};
    hl.channels = 1;
    hl.dtype = VolumeDtype::u8;
    hl.role = VolumeRole::labels;
    write_volume(dir + "/" + id + "_labels.vol", labels, hl);
}

// ---------------------------------------------------------------- checkpoint

// Binary checkpoint layout (all integers little-endian):
//   magic "MRFU", version u32
//   n_sections u32, then per section:
//     name_len u32, name bytes, payload_len u64, payload bytes
// Sections:
//   "config"  key=value text echoing architecture + fusion settings
//   "unet"    named weight arrays (below)
//   "mrf"     named weight arrays; absent for the baseline
//   "state"   epoch u32, best_val_loss f64, lr f64, then the RNG state
//             (x u64, cached_normal f64, has_cached u8)
// Array encoding: name_len u32 + name, dtype u8 (0 = f32, 1 = f64),
// rank u32, dims u64 each, then the elements. Arrays are stored at the
// model's native width so a save/load round trip is bit-identical.

struct TrainState {
    uint32_t epoch = 0;  // epochs completed
    double best_val_loss = std::numeric_limits<double>::infinity();
    double lr = 1e-3;
    Rng::State rng{};
};

namespace detail {

inline void put_bytes(std::ostream& f, const void* p, size_t n) {
    f.write(reinterpret_cast<const char*>(p), std::streamsize(n));
}
inline void put_u32(std::ostream& f, uint32_t v) { put_bytes(f, &v, 4); }
inline void put_u64(std::ostream& f, uint64_t v) { put_bytes(f, &v, 8); }
inline void put_f64(std::ostream& f, double v) { put_bytes(f, &v, 8); }
inline void put_str(std::ostream& f, const std::string& s) {
    put_u32(f, uint32_t(s.size()));
    put_bytes(f, s.data(), s.size());
}

inline void get_bytes(std::istream& f, void* p, size_t n, const std::string& what) {
    f.read(reinterpret_cast<char*>(p), std::streamsize(n));
    require(size_t(f.gcount()) == n, "checkpoint: truncated while reading " + what);
}
inline uint32_t get_u32(std::istream& f, const std::string& what) {
    uint32_t v;
    get_bytes(f, &v, 4, what);
    return v;
}
inline uint64_t get_u64(std::istream& f, const std::string& what) {
    uint64_t v;
    get_bytes(f, &v, 8, what);
    return v;
}
inline double get_f64(std::istream& f, const std::string& what) {
    double v;
    get_bytes(f, &v, 8, what);
    return v;
}
inline std::string get_str(std::istream& f, const std::string& what) {
    uint32_t n = get_u32(f, what);
    std::string s(n, '\0');
    if (n) get_bytes(f, s.data(), n, what);
    return s;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> named_arrays(Model<T>& model) {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (int l = 0; l < 5; ++l) {
        out.emplace_back("unet/enc_w" + std::to_string(l), model.unet.enc_w[size_t(l)]);
        out.emplace_back("unet/enc_b" + std::to_string(l), model.unet.enc_b[size_t(l)]);
    }
    for (int s = 0; s < 5; ++s) {
        out.emplace_back("unet/dec_w" + std::to_string(s), model.unet.dec_w[size_t(s)]);
        out.emplace_back("unet/dec_b" + std::to_string(s), model.unet.dec_b[size_t(s)]);
    }
    out.emplace_back("unet/final_w", model.unet.final_w);
    out.emplace_back("unet/final_b", model.unet.final_b);
    if (model.mrf) {
        out.emplace_back("mrf/w1", model.mrf->w1);
        out.emplace_back("mrf/b1", model.mrf->b1);
        out.emplace_back("mrf/w2", model.mrf->w2);
        out.emplace_back("mrf/b2", model.mrf->b2);
    }
    return out;
}

template <typename T>
void encode_arrays(std::ostream& f, const std::vector<std::pair<std::string, Tensor<T>>>& arrays,
                   const std::string& prefix) {
    uint32_t n = 0;
    for (const auto& [name, t] : arrays) n += name.starts_with(prefix);
    put_u32(f, n);
    for (const auto& [name, t] : arrays) {
        if (!name.starts_with(prefix)) continue;
        put_str(f, name);
        f.put(char(sizeof(T) == 4 ? 0 : 1));
        put_u32(f, uint32_t(t.rank()));
        for (size_t i = 0; i < t.rank(); ++i) put_u64(f, uint64_t(t.dim(i)));
        put_bytes(f, t.data(), size_t(t.size()) * sizeof(T));
    }
}

template <typename T>
void decode_arrays(std::istream& f, std::map<std::string, Tensor<T>*>& targets,
                   const std::string& section) {
    const uint32_t n = get_u32(f, section + " array count");
    for (uint32_t a = 0; a < n; ++a) {
        const std::string name = get_str(f, section + " array name");
        char dtype_c;
        get_bytes(f, &dtype_c, 1, name + " dtype");
        require(dtype_c == 0 || dtype_c == 1, "checkpoint: unknown dtype for " + name);
        const uint32_t rank = get_u32(f, name + " rank");
        std::vector<int64_t> dims(rank);
        for (auto& d : dims) d = int64_t(get_u64(f, name + " dims"));

        auto it = targets.find(name);
        require(it != targets.end(), "checkpoint: unexpected array " + name);
        Tensor<T>& t = *it->second;
        require(std::vector<int64_t>(t.dims().begin(), t.dims().end()) == dims,
                "checkpoint: " + name + " has shape " + shape_str(dims) + ", model expects " +
                    shape_str(t.dims()));
        const int64_t count = t.size();
        if (dtype_c == 0) {
            std::vector<float> buf(static_cast<size_t>(count));
            get_bytes(f, buf.data(), size_t(count) * 4, name + " payload");
            for (int64_t i = 0; i < count; ++i) t[i] = static_cast<T>(buf[size_t(i)]);
        } else {
            std::vector<double> buf(static_cast<size_t>(count));
            get_bytes(f, buf.data(), size_t(count) * 8, name + " payload");
            for (int64_t i = 0; i < count; ++i) t[i] = static_cast<T>(buf[size_t(i)]);
        }
        targets.erase(it);
    }
    require(targets.empty(), "checkpoint: section " + section + " is missing " +
                                 (targets.empty() ? "" : targets.begin()->first));
}

} // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, Model<T>& model, const TrainState& state) {
    detail::check_little_endian();
    KeyValConfig cfg;
    cfg.set("j", std::to_string(model.unet.cfg.j));
    cfg.set("k", std::to_string(model.unet.cfg.K));
    cfg.set("in_channels", std::to_string(model.unet.cfg.in_channels));
    cfg.set("alpha", CsvWriter::format_double(model.unet.cfg.alpha));
    cfg.set("with_mrf", model.has_mrf() ? "1" : "0");
    cfg.set("schedule", model.fusion.schedule == Schedule::parallel ? "parallel" : "checkerboard");
    cfg.set("n_iter_test", std::to_string(model.fusion.n_iter_test));
    cfg.set("n_iter_train_lo", std::to_string(model.fusion.n_iter_train_lo));
    cfg.set("n_iter_train_hi", std::to_string(model.fusion.n_iter_train_hi));
    cfg.set("precision", sizeof(T) == 4 ? "f32" : "f64");

    auto arrays = detail::named_arrays(model);
    auto encode_section = [&](const std::string& prefix) {
        std::ostringstream s;
        detail::encode_arrays<T>(s, arrays, prefix + "/");
        return s.str();
    };

    std::ostringstream state_s;
    detail::put_u32(state_s, state.epoch);
    detail::put_f64(state_s, state.best_val_loss);
    detail::put_f64(state_s, state.lr);
    detail::put_u64(state_s, state.rng.x);
    detail::put_f64(state_s, state.rng.cached_normal);
    state_s.put(char(state.rng.has_cached_normal));

    std::vector<std::pair<std::string, std::string>> sections;
    sections.emplace_back("config", cfg.serialize());
    sections.emplace_back("unet", encode_section("unet"));
    if (model.has_mrf()) sections.emplace_back("mrf", encode_section("mrf"));
    sections.emplace_back("state", state_s.str());

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(bool(f), "checkpoint: cannot open " + path);
    detail::put_bytes(f, "MRFU", 4);
    detail::put_u32(f, 1);  // version
    detail::put_u32(f, uint32_t(sections.size()));
    for (const auto& [name, payload] : sections) {
        detail::put_str(f, name);
        detail::put_u64(f, payload.size());
        detail::put_bytes(f, payload.data(), payload.size());
    }
    require(bool(f), "checkpoint: write failed for " + path);
}

template <typename T>
struct LoadedCheckpoint {
    Model<T> model;
    TrainState state;
    KeyValConfig config;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
    detail::check_little_endian();
    std::ifstream f(path, std::ios::binary);
    require(bool(f), "checkpoint: cannot open " + path);
    char magic[4];
    detail::get_bytes(f, magic, 4, "magic");
    require(std::string(magic, 4) == "MRFU", "checkpoint: bad magic in " + path);
    const uint32_t version = detail::get_u32(f, "version");
    require(version == 1, "checkpoint: unsupported version " + std::to_string(version));

    std::map<std::string, std::string> sections;
    const uint32_t n_sections = detail::get_u32(f, "section count");
    for (uint32_t i = 0; i < n_sections; ++i) {
        const std::string name = detail::get_str(f, "section name");
        const uint64_t len = detail::get_u64(f, name + " length");
        std::string payload(size_t(len), '\0');
        if (len) detail::get_bytes(f, payload.data(), size_t(len), name + " payload");
        sections[name] = std::move(payload);
    }
    for (const char* need : {"config", "unet", "state"})
        require(sections.count(need), std::string("checkpoint: missing section ") + need);

    LoadedCheckpoint<T> out;
    out.config = KeyValConfig::parse(sections["config"], path + ":config");
    UNetConfig ucfg;
    ucfg.j = int(out.config.get_int("j", 1));
    ucfg.K = out.config.get_int("k", 4);
    ucfg.in_channels = out.config.get_int("in_channels", 1);
    ucfg.alpha = out.config.get_double("alpha", 0.2);
    FusionConfig fusion;
    fusion.schedule = parse_schedule(out.config.get_string("schedule", "parallel"));
    fusion.n_iter_test = int(out.config.get_int("n_iter_test", 10));
    fusion.n_iter_train_lo = int(out.config.get_int("n_iter_train_lo", 5));
    fusion.n_iter_train_hi = int(out.config.get_int("n_iter_train_hi", 15));
    const bool with_mrf = out.config.get_int("with_mrf", 1) != 0;
    require(!with_mrf || sections.count("mrf"), "checkpoint: with_mrf=1 but no mrf section");

    out.model = Model<T>::build(ucfg, fusion, with_mrf, 0);
    auto arrays = detail::named_arrays(out.model);
    auto decode_section = [&](const std::string& prefix) {
        std::map<std::string, Tensor<T>*> targets;
        for (auto& [name, t] : arrays)
            if (name.starts_with(prefix + "/")) targets[name] = &t;
        std::istringstream s(sections[prefix]);
        detail::decode_arrays<T>(s, targets, prefix);
    };
    decode_section("unet");
    if (with_mrf) decode_section("mrf");

    std::istringstream ss(sections["state"]);
    out.state.epoch = detail::get_u32(ss, "state epoch");
    out.state.best_val_loss = detail::get_f64(ss, "state best_val_loss");
    out.state.lr = detail::get_f64(ss, "state lr");
    out.state.rng.x = detail::get_u64(ss, "state rng");
    out.state.rng.cached_normal = detail::get_f64(ss, "state rng cache");
    char hc;
    detail::get_bytes(ss, &hc, 1, "state rng cache flag");
    out.state.rng.has_cached_normal = uint8_t(hc);
    return out;
}

// ---------------------------------------------------------------- training

struct TrainConfig {
    double lr = 1e-3;
    int epochs = 50;
    AdamConfig adam;
    double plateau_factor = 0.5;
    int plateau_patience = 5;       // consecutive epochs without improvement
    double plateau_min_delta = 1e-4;
    double min_lr = 1e-6;
    uint64_t seed = 0;
    AugmentationParams augment;     // per-sample seed filled in by the loop

    void validate() const {
        // lr = 0 is allowed: it turns a run into a pure diagnostics pass that
        // must leave the parameters bit-identical.
        require(lr >= 0, "train: lr must be non-negative");
        require(epochs >= 1, "train: epochs must be >= 1");
        require(plateau_factor > 0 && plateau_factor < 1, "train: plateau factor must be in (0,1)");
        require(plateau_patience >= 1, "train: plateau patience must be >= 1");
        require(min_lr > 0, "train: min_lr must be positive");
    }
};

inline std::vector<std::string> metrics_columns(int64_t K) {
    std::vector<std::string> c{"epoch", "split", "loss"};
    for (int64_t k = 0; k < K; ++k) c.push_back("dice_" + std::to_string(k));
    c.push_back("dice_mean");
    c.push_back("lr");
    c.push_back("n_iter");
    return c;
}

struct TrainResult {
    std::string metrics_csv;
    double best_val_loss = std::numeric_limits<double>::infinity();
    int best_epoch = -1;
    double final_train_loss = 0;
    double final_val_loss = 0;
    std::vector<double> final_train_dice;
    std::vector<double> final_val_dice;
    int64_t steps_rejected = 0;
};

// Batch-size-one loop. Per sample: derive the (seed, epoch, index) stream,
// augment, fuse in train mode (which draws the iteration count from the same
// stream), cross-entropy on the final-iteration log responsibilities,
// backward, Adam, zero-center re-projection. Epoch end: validation at the
// test-mode iteration count, metrics rows, best-checkpoint save, plateau
// schedule. Fully deterministic given the seed.
template <typename T>
TrainResult train(Model<T>& model, const std::vector<Sample<T>>& train_set,
                  const std::vector<Sample<T>>& val_set, const TrainConfig& cfg,
                  const std::string& checkpoint_path = "", std::ostream* log = nullptr) {
    cfg.validate();
    require(!train_set.empty(), "train: empty training set");
    require(!val_set.empty(), "train: empty validation set");
    const int64_t K = model.K();

    Adam<T> adam(model.parameters(), cfg.adam);
    model.set_requires_grad(true);

    CsvWriter csv(metrics_columns(K));
    TrainResult res;
    double lr = cfg.lr;
    double plateau_best = std::numeric_limits<double>::infinity();
    int plateau_wait = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double loss_sum = 0, n_iter_sum = 0;
        std::vector<double> dice_sum(size_t(K), 0.0);
        for (size_t s = 0; s < train_set.size(); ++s) {
            Rng sample_rng = Rng::stream(cfg.seed, uint64_t(epoch), uint64_t(s));
            AugmentationParams ap = cfg.augment;
            ap.seed = sample_rng.next_u64();
            auto [img, lab] = augment(train_set[s].image, train_set[s].labels, ap);
            Tensor<T> target = one_hot(lab, K);

            double loss_val;
            Tensor<T> R_final;
            int n_used;
            Tape<T> tape;
            {
                TapeScope<T> scope(tape);
                auto fr = model.forward(img, FuseMode::train, &sample_rng);
                Tensor<T> loss = cross_entropy(fr.log_R, target);
                loss_val = double(loss[0]);
                require(std::isfinite(loss_val),
                        "train: non-finite loss at epoch " + std::to_string(epoch) + ", sample " +
                            std::to_string(s) + " (" + train_set[s].id + ")");
                tape.backward(loss);
                R_final = fr.R;
                n_used = fr.n_iter_used;
            }
            if (adam.step(lr)) {
                model.project_zero_center();
            } else if (log) {
                *log << "adam: step rejected (non-finite gradient) at epoch " << epoch
                     << ", sample " << train_set[s].id << "\n";
            }
            loss_sum += loss_val;
            n_iter_sum += n_used;
            auto d = dice_per_class(argmax_labels(R_final), lab, K);
            for (size_t k = 0; k < d.size(); ++k) dice_sum[k] += d[k];
        }
        const double n_train = double(train_set.size());
        res.final_train_loss = loss_sum / n_train;
        res.final_train_dice.assign(dice_sum.begin(), dice_sum.end());
        for (auto& d : res.final_train_dice) d /= n_train;

        csv.begin_row().cell(epoch).cell(std::string("train")).cell(res.final_train_loss);
        for (double d : res.final_train_dice) csv.cell(d);
        csv.cell(mean_of(res.final_train_dice)).cell(lr).cell(n_iter_sum / n_train);

        // validation: test-mode fusion, no tape
        double vloss = 0;
        int val_n_iter = 0;
        std::vector<double> vdice(size_t(K), 0.0);
        for (const auto& smp : val_set) {
            auto fr = model.forward(smp.image, FuseMode::test);
            vloss += double(cross_entropy(fr.log_R, one_hot(smp.labels, K))[0]);
            val_n_iter = fr.n_iter_used;
            auto d = dice_per_class(argmax_labels(fr.R), smp.labels, K);
            for (size_t k = 0; k < d.size(); ++k) vdice[k] += d[k];
        }
        vloss /= double(val_set.size());
        for (auto& d : vdice) d /= double(val_set.size());
        res.final_val_loss = vloss;
        res.final_val_dice = vdice;

        csv.begin_row().cell(epoch).cell(std::string("val")).cell(vloss);
        for (double d : vdice) csv.cell(d);
        csv.cell(mean_of(vdice)).cell(lr).cell(double(val_n_iter));

        if (vloss < res.best_val_loss) {
            res.best_val_loss = vloss;
            res.best_epoch = epoch;
            if (!checkpoint_path.empty()) {
                TrainState st;
                st.epoch = uint32_t(epoch + 1);
                st.best_val_loss = vloss;
                st.lr = lr;
                st.rng.x = cfg.seed;
                save_checkpoint(checkpoint_path, model, st);
            }
        }

        // plateau: halve once validation has not improved by min_delta for
        // `patience` consecutive epochs
        if (vloss < plateau_best - cfg.plateau_min_delta) {
            plateau_best = vloss;
            plateau_wait = 0;
        } else if (++plateau_wait >= cfg.plateau_patience) {
            plateau_wait = 0;
            if (lr > cfg.min_lr) {  // the floor caps reduction, never raises lr
                lr = std::max(lr * cfg.plateau_factor, cfg.min_lr);
                if (log) *log << "plateau: lr reduced to " << lr << " after epoch " << epoch << "\n";
            }
        }
    }
    res.steps_rejected = adam.rejected();
    res.metrics_csv = csv.str();
    return res;
}

// ---------------------------------------------------------------- evaluation

struct EvalRow {
    std::string id;
    std::vector<double> dice;
    double dice_mean = 0;
};

template <typename T>
std::vector<EvalRow> evaluate(const Model<T>& model, const std::vector<Sample<T>>& data,
                              int n_iter) {
    require(n_iter >= 0, "evaluate: n_iter must be >= 0");
    const int64_t K = model.unet.cfg.K;
    std::vector<EvalRow> rows;
    for (const auto& smp : data) {
        auto fr = model.forward(smp.image, FuseMode::test, nullptr, n_iter);
        EvalRow row;
        row.id = smp.id;
        row.dice = dice_per_class(argmax_labels(fr.R), smp.labels, K);
        row.dice_mean = mean_of(row.dice);
        rows.push_back(std::move(row));
    }
    return rows;
}

template <typename T>
double mean_dice(const Model<T>& model, const std::vector<Sample<T>>& data, int n_iter) {
    auto rows = evaluate(model, data, n_iter);
    double s = 0;
    for (const auto& r : rows) s += r.dice_mean;
    return s / double(rows.size());
}

} // namespace mrfuse

#endif
