// Batch front door: phantom generation, training, evaluation, the two
// study commands (convergence, capacity), and the exact-oracle self-check.
// Every run writes a manifest (command line, resolved config, output hashes)
// next to its outputs, first as a stub and again once the outputs exist.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mrfuse/csv.hpp"
#include "mrfuse/exact.hpp"
#include "mrfuse/keyval_config.hpp"
#include "mrfuse/manifest.hpp"
#include "mrfuse/mean_field.hpp"
#include "mrfuse/phantom.hpp"
#include "mrfuse/train.hpp"

using namespace mrfuse;
namespace fs = std::filesystem;

namespace {

// ------------------------------------------------------------- plumbing

std::string precision_name() {
    const char* p = std::getenv("MRFUSE_PRECISION");
    if (!p || *p == '\0') return "f32";
    const std::string s(p);
    require(s == "f32" || s == "f64", "MRFUSE_PRECISION must be f32 or f64, got '" + s + "'");
    return s;
}

std::vector<std::string> collect_argv(int argc, char** argv) {
    return std::vector<std::string>(argv, argv + argc);
}

std::string sample_id(int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "s%04d", i);
    return buf;
}

// Single content hash over a dataset directory: order-independent by sorting
// names, sensitive to both names and bytes.
std::string hash_dir(const std::string& dir) {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file()) names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& n : names) {
        h = fnv1a(n.data(), n.size(), h);
        const uint64_t fh = hash_file(dir + "/" + n);
        h = fnv1a(&fh, sizeof fh, h);
    }
    return hash_hex(h);
}

// defaults < config file < explicit flags; config keys are the flag names
// with dashes turned into underscores.
class FlagMerge {
public:
    explicit FlagMerge(const std::string& config_path) {
        if (!config_path.empty()) file_ = KeyValConfig::load(config_path);
    }

    template <typename V>
    void num(CLI::Option* opt, V& v, const std::string& key) {
        if (!opt->count() && file_.has(key)) v = static_cast<V>(file_.get_double(key, double(v)));
    }
    void str(CLI::Option* opt, std::string& v, const std::string& key) {
        if (!opt->count() && file_.has(key)) v = file_.get_string(key, v);
    }
    void flag(CLI::Option* opt, bool& v, const std::string& key) {
        if (!opt->count() && file_.has(key)) v = file_.get_int(key, v ? 1 : 0) != 0;
    }

private:
    KeyValConfig file_;
};

std::vector<int> parse_int_list(const std::string& s, const std::string& what) {
    std::vector<int> out;
    for (const auto& part : split(s, ','))
        if (!part.empty()) out.push_back(std::stoi(part));
    require(!out.empty(), what + ": empty list");
    return out;
}

std::vector<int64_t> parse_grid(const std::string& s) {
    auto parts = split(s, 'x');
    require(parts.size() == 3, "grid must look like DxHxW, got '" + s + "'");
    return {std::stoll(parts[0]), std::stoll(parts[1]), std::stoll(parts[2])};
}

struct Timer {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

// ------------------------------------------------------------- phantom

template <typename T>
int run_phantom(const std::vector<std::string>& argv, const std::string& out_dir, int count,
                uint64_t seed, const std::string& spec_path, const std::string& regime,
                bool regime_given) {
    PhantomSpec spec =
        spec_path.empty() ? PhantomSpec{} : PhantomSpec::from_config(KeyValConfig::load(spec_path));
    if (regime_given) spec.regime = parse_regime(regime);
    spec.validate();
    fs::create_directories(out_dir);

    Timer timer;
    RunManifest man("phantom", argv);
    man.set_config({{"out_dir", out_dir},
                    {"count", std::to_string(count)},
                    {"seed", std::to_string(seed)},
                    {"spec", spec_path},
                    {"regime", regime_name(spec.regime)},
                    {"precision", precision_name()}});
    const std::string man_path = out_dir + "/manifest.json";
    man.save(man_path);

    for (int i = 0; i < count; ++i) {
        const std::string id = sample_id(i);
        auto [img, lab] = generate_phantom<T>(spec, seed + uint64_t(i));
        save_sample(out_dir, id, img, lab);
        for (const char* suffix : {"_image.vol", "_image.volh", "_labels.vol", "_labels.volh"})
            man.add_output(out_dir + "/" + id + suffix);
    }
    man.add_note("wall_seconds", CsvWriter::format_double(timer.seconds()));
    man.save(man_path);
    std::cout << "phantom: wrote " << count << " sample pairs to " << out_dir << "\n";
    return 0;
}

// ------------------------------------------------------------- train

struct TrainFlags {
    std::string data_dir, val_dir, out, metrics, config;
    int j = 1;
    int64_t k = 4;
    bool no_mrf = false;
    int epochs = 50;
    double lr = 1e-3;
    uint64_t seed = 0;
    double deform_amplitude = 0, bias_amplitude = 0, noise_sigma = 0;
    int n_iter_test = 10, n_iter_lo = 5, n_iter_hi = 15;
    std::string schedule = "parallel";
};

template <typename T>
int run_train(const std::vector<std::string>& argv, const TrainFlags& fl) {
    require(!fl.out.empty(), "train: --out is required");
    const std::string metrics_path = fl.metrics.empty() ? fl.out + ".metrics.csv" : fl.metrics;

    UNetConfig ucfg;
    ucfg.j = fl.j;
    ucfg.K = fl.k;
    FusionConfig fusion;
    fusion.n_iter_test = fl.n_iter_test;
    fusion.n_iter_train_lo = fl.n_iter_lo;
    fusion.n_iter_train_hi = fl.n_iter_hi;
    fusion.schedule = parse_schedule(fl.schedule);

    TrainConfig tc;
    tc.lr = fl.lr;
    tc.epochs = fl.epochs;
    tc.seed = fl.seed;
    tc.augment.deform_amplitude = fl.deform_amplitude;
    tc.augment.bias_amplitude = fl.bias_amplitude;
    tc.augment.noise_sigma = fl.noise_sigma;

    Timer timer;
    RunManifest man("train", argv);
    man.set_config({{"data_dir", fl.data_dir},
                    {"val_dir", fl.val_dir},
                    {"out", fl.out},
                    {"metrics", metrics_path},
                    {"j", std::to_string(fl.j)},
                    {"k", std::to_string(fl.k)},
                    {"no_mrf", fl.no_mrf ? "1" : "0"},
                    {"epochs", std::to_string(fl.epochs)},
                    {"lr", CsvWriter::format_double(fl.lr)},
                    {"seed", std::to_string(fl.seed)},
                    {"deform_amplitude", CsvWriter::format_double(fl.deform_amplitude)},
                    {"bias_amplitude", CsvWriter::format_double(fl.bias_amplitude)},
                    {"noise_sigma", CsvWriter::format_double(fl.noise_sigma)},
                    {"n_iter_test", std::to_string(fl.n_iter_test)},
                    {"n_iter_lo", std::to_string(fl.n_iter_lo)},
                    {"n_iter_hi", std::to_string(fl.n_iter_hi)},
                    {"schedule", fl.schedule},
                    {"precision", precision_name()}});
    const std::string man_path = fl.out + ".manifest.json";
    man.save(man_path);

    auto train_set = load_dataset<T>(fl.data_dir, ucfg.K);
    auto val_set = load_dataset<T>(fl.val_dir, ucfg.K);
    man.add_note("train_inputs_hash", hash_dir(fl.data_dir));
    man.add_note("val_inputs_hash", hash_dir(fl.val_dir));

    auto model = Model<T>::build(ucfg, fusion, !fl.no_mrf, fl.seed);
    const int64_t unet_params = unet_param_count(ucfg);
    const int64_t mrf_params = fl.no_mrf ? 0 : mrf_net_param_count(ucfg.K, false);
    std::cout << "train: unet parameters " << unet_params << ", mrf parameters " << mrf_params;
    if (!fl.no_mrf)
        std::cout << " (overhead ratio "
                  << CsvWriter::format_double(mrf_overhead_ratio(ucfg.K, unet_params)) << ")";
    std::cout << "\n";

    auto res = train(model, train_set, val_set, tc, fl.out, &std::cout);
    std::ofstream mf(metrics_path);
    require(bool(mf), "train: cannot open " + metrics_path);
    mf << res.metrics_csv;
    mf.close();

    man.add_output(fl.out);
    man.add_output(metrics_path);
    man.add_note("best_val_loss", CsvWriter::format_double(res.best_val_loss));
    man.add_note("best_epoch", std::to_string(res.best_epoch));
    man.add_note("steps_rejected", std::to_string(res.steps_rejected));
    man.add_note("unet_param_count", std::to_string(unet_params));
    man.add_note("mrf_param_count", std::to_string(mrf_params));
    man.add_note("wall_seconds", CsvWriter::format_double(timer.seconds()));
    man.save(man_path);
    std::cout << "train: best val loss " << res.best_val_loss << " at epoch " << res.best_epoch
              << "; checkpoint " << fl.out << "\n";
    return 0;
}

// ------------------------------------------------------------- eval

template <typename T>
int run_eval(const std::vector<std::string>& argv, const std::string& ckpt_path,
             const std::string& data_dir, int n_iter, const std::string& out_csv) {
    Timer timer;
    auto loaded = load_checkpoint<T>(ckpt_path);
    const int64_t K = loaded.model.K();
    const int n = n_iter >= 0 ? n_iter : loaded.model.fusion.n_iter_test;

    RunManifest man("eval", argv);
    man.set_config({{"checkpoint", ckpt_path},
                    {"data_dir", data_dir},
                    {"n_iter", std::to_string(n)},
                    {"out_csv", out_csv},
                    {"precision", precision_name()}});
    const std::string man_path = out_csv + ".manifest.json";
    man.save(man_path);

    auto data = load_dataset<T>(data_dir, K);
    man.add_note("inputs_hash", hash_dir(data_dir));

    std::vector<std::string> cols{"sample"};
    for (int64_t k = 0; k < K; ++k) cols.push_back("dice_" + std::to_string(k));
    cols.push_back("dice_mean");
    CsvWriter csv(cols);
    double total = 0;
    for (const auto& row : evaluate(loaded.model, data, n)) {
        csv.begin_row().cell(row.id);
        for (double d : row.dice) csv.cell(d);
        csv.cell(row.dice_mean);
        total += row.dice_mean;
    }
    csv.save(out_csv);

    man.add_output(out_csv);
    man.add_note("mean_dice", CsvWriter::format_double(total / double(data.size())));
    man.add_note("wall_seconds", CsvWriter::format_double(timer.seconds()));
    man.save(man_path);
    std::cout << "eval: mean dice " << total / double(data.size()) << " over " << data.size()
              << " samples at n_iter=" << n << "\n";
    return 0;
}

// ------------------------------------------------------------- convergence

template <typename T>
int run_convergence(const std::vector<std::string>& argv, const std::string& ckpt_path,
                    const std::vector<std::string>& dir_specs, int max_iter,
                    const std::string& out_csv) {
    require(max_iter >= 0, "convergence: --max-iter must be >= 0");
    Timer timer;
    auto loaded = load_checkpoint<T>(ckpt_path);
    const int64_t K = loaded.model.K();

    RunManifest man("convergence", argv);
    std::map<std::string, std::string> cfg{{"checkpoint", ckpt_path},
                                           {"max_iter", std::to_string(max_iter)},
                                           {"out_csv", out_csv},
                                           {"precision", precision_name()}};
    for (size_t i = 0; i < dir_specs.size(); ++i) cfg["data_dir_" + std::to_string(i)] = dir_specs[i];
    man.set_config(cfg);
    const std::string man_path = out_csv + ".manifest.json";
    man.save(man_path);

    std::vector<std::string> cols{"split", "n_iter"};
    for (int64_t k = 0; k < K; ++k) cols.push_back("dice_" + std::to_string(k));
    cols.push_back("dice_mean");
    CsvWriter csv(cols);

    for (const auto& spec : dir_specs) {
        std::string name = spec, dir = spec;
        if (auto eq = spec.find('='); eq != std::string::npos) {
            name = spec.substr(0, eq);
            dir = spec.substr(eq + 1);
        } else {
            name = fs::path(spec).filename().string();
        }
        auto data = load_dataset<T>(dir, K);
        for (int n = 0; n <= max_iter; ++n) {
            auto rows = evaluate(loaded.model, data, n);
            std::vector<double> cls(size_t(K), 0.0);
            for (const auto& r : rows)
                for (size_t k = 0; k < cls.size(); ++k) cls[k] += r.dice[k];
            csv.begin_row().cell(name).cell(n);
            double mean = 0;
            for (double& c : cls) {
                c /= double(rows.size());
                mean += c;
                csv.cell(c);
            }
            csv.cell(mean / double(K));
        }
    }
    csv.save(out_csv);
    man.add_output(out_csv);
    man.add_note("wall_seconds", CsvWriter::format_double(timer.seconds()));
    man.save(man_path);
    std::cout << "convergence: wrote " << (max_iter + 1) * int(dir_specs.size()) << " rows to "
              << out_csv << "\n";
    return 0;
}

// ------------------------------------------------------------- capacity

struct CapacityFlags {
    std::string train_dir, val_dir, test_in_dir, test_out_dir, out_csv, config;
    std::string j_list = "1,2";
    std::string seeds = "0,1,2";
    int64_t k = 4;
    int epochs = 15;
    double lr = 1e-3;
    double deform_amplitude = 0, bias_amplitude = 0, noise_sigma = 0;
    int n_iter_test = 10;
};

template <typename T>
int run_capacity(const std::vector<std::string>& argv, const CapacityFlags& fl) {
    Timer timer;
    const auto js = parse_int_list(fl.j_list, "--j-list");
    const auto seeds = parse_int_list(fl.seeds, "--seeds");

    RunManifest man("capacity", argv);
    man.set_config({{"train_dir", fl.train_dir},
                    {"val_dir", fl.val_dir},
                    {"test_in_dir", fl.test_in_dir},
                    {"test_out_dir", fl.test_out_dir},
                    {"out_csv", fl.out_csv},
                    {"j_list", fl.j_list},
                    {"seeds", fl.seeds},
                    {"k", std::to_string(fl.k)},
                    {"epochs", std::to_string(fl.epochs)},
                    {"lr", CsvWriter::format_double(fl.lr)},
                    {"n_iter_test", std::to_string(fl.n_iter_test)},
                    {"precision", precision_name()}});
    const std::string man_path = fl.out_csv + ".manifest.json";
    man.save(man_path);

    auto train_set = load_dataset<T>(fl.train_dir, fl.k);
    auto val_set = load_dataset<T>(fl.val_dir, fl.k);
    auto test_in = load_dataset<T>(fl.test_in_dir, fl.k);
    auto test_out = load_dataset<T>(fl.test_out_dir, fl.k);

    CsvWriter csv({"model", "j", "seed", "unet_params", "mrf_params", "overhead_ratio",
                   "best_val_loss", "dice_in", "dice_out"});
    for (int j : js) {
        for (int seed : seeds) {
            for (bool with_mrf : {false, true}) {
                UNetConfig ucfg;
                ucfg.j = j;
                ucfg.K = fl.k;
                FusionConfig fusion;
                fusion.n_iter_test = fl.n_iter_test;

                TrainConfig tc;
                tc.lr = fl.lr;
                tc.epochs = fl.epochs;
                tc.seed = uint64_t(seed);
                tc.augment.deform_amplitude = fl.deform_amplitude;
                tc.augment.bias_amplitude = fl.bias_amplitude;
                tc.augment.noise_sigma = fl.noise_sigma;

                const std::string tag = std::string(with_mrf ? "mrf_unet" : "unet") + "_j" +
                                        std::to_string(j) + "_s" + std::to_string(seed);
                const std::string ckpt = fl.out_csv + "." + tag + ".ckpt";
                auto model = Model<T>::build(ucfg, fusion, with_mrf, uint64_t(seed));
                auto res = train(model, train_set, val_set, tc, ckpt);
                auto best = load_checkpoint<T>(ckpt);

                csv.begin_row()
                    .cell(std::string(with_mrf ? "mrf_unet" : "unet"))
                    .cell(j)
                    .cell(seed)
                    .cell(unet_param_count(ucfg))
                    .cell(with_mrf ? mrf_net_param_count(ucfg.K, false) : 0)
                    .cell(with_mrf ? mrf_overhead_ratio(ucfg.K, unet_param_count(ucfg)) : 0.0)
                    .cell(res.best_val_loss)
                    .cell(mean_dice(best.model, test_in, fl.n_iter_test))
                    .cell(mean_dice(best.model, test_out, fl.n_iter_test));
                man.add_output(ckpt);
                std::cout << "capacity: finished " << tag << "\n";
            }
        }
    }
    csv.save(fl.out_csv);
    man.add_output(fl.out_csv);
    man.add_note("wall_seconds", CsvWriter::format_double(timer.seconds()));
    man.save(man_path);
    return 0;
}

// ------------------------------------------------------------- oracle-check

// Exact-enumeration self-check on a tiny grid; always 64-bit.
int run_oracle_check(const std::vector<std::string>& argv, const std::string& grid_s, int64_t K,
                     int trials, uint64_t seed, const std::string& man_path) {
    const auto dims3 = parse_grid(grid_s);
    const std::vector<int64_t> dims{K, dims3[0], dims3[1], dims3[2]};
    detail::checked_config_count(K, dims3[0] * dims3[1] * dims3[2]);  // reject over-budget grids up front

    Timer timer;
    RunManifest man("oracle-check", argv);
    man.set_config({{"grid", grid_s},
                    {"k", std::to_string(K)},
                    {"trials", std::to_string(trials)},
                    {"seed", std::to_string(seed)}});
    man.save(man_path);

    Rng rng(seed);
    bool ok = true;
    auto report = [&](const std::string& name, double value, double tol, bool pass) {
        std::printf("%-24s %12.3e  (tol %.1e)  %s\n", name.c_str(), value, tol,
                    pass ? "PASS" : "FAIL");
        man.add_note(name, CsvWriter::format_double(value));
        ok = ok && pass;
    };

    // factorized case: zero kernel, one parallel sweep must equal the exact
    // marginals of the independent model
    double worst_marginal = 0;
    for (int t = 0; t < trials; ++t) {
        auto U = Tensor<double>::uniform(dims, 3.0, rng);
        MrfKernel<double> zero(Tensor<double>::zeros({K, K, 3, 3, 3}));
        FusionConfig fc;
        fc.n_iter_test = 1;
        auto fused = fuse_forward(U, zero, fc, FuseMode::test);
        auto exact = exact_marginals(enumerate_product(U, zero));
        for (int64_t i = 0; i < fused.R.size(); ++i)
            worst_marginal = std::max(worst_marginal, std::fabs(fused.R[i] - exact[i]));
    }
    report("factorized-marginals", worst_marginal, 1e-8, worst_marginal < 1e-8);

    // KL(q||p) - F(q) must not depend on q
    double worst_spread = 0;
    for (int t = 0; t < trials / 10 + 1; ++t) {
        auto U = Tensor<double>::uniform(dims, 2.0, rng);
        auto kernel = random_symmetric_face_kernel<double>(K, 1.0, rng);
        auto dist = enumerate_product(U, kernel);
        auto U_log = normalize_logits(U);
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (int q = 0; q < 20; ++q) {
            Tensor<double> R(dims);
            const int64_t spatial = R.size() / K;
            for (int64_t i = 0; i < spatial; ++i) {
                double s = 0;
                for (int64_t k = 0; k < K; ++k) {
                    const double e = -std::log(1.0 - rng.uniform());
                    R[k * spatial + i] = e;
                    s += e;
                }
                for (int64_t k = 0; k < K; ++k) R[k * spatial + i] /= s;
            }
            const double off = exact_kl(R, dist) - free_energy(U_log, R, kernel);
            lo = std::min(lo, off);
            hi = std::max(hi, off);
        }
        worst_spread = std::max(worst_spread, hi - lo);
    }
    report("offset-constancy", worst_spread, 1e-8, worst_spread < 1e-8);

    // converged responsibilities must reproduce themselves
    double worst_fp = 0;
    for (int t = 0; t < trials / 10 + 1; ++t) {
        auto U = Tensor<double>::uniform(dims, 2.0, rng);
        auto kernel = random_symmetric_face_kernel<double>(K, 1.0, rng);
        FusionConfig fc;
        fc.n_iter_test = 400;
        fc.schedule = Schedule::checkerboard;
        fc.convergence_tol = 1e-13;
        auto converged = fuse_forward(U, kernel, fc, FuseMode::test);
        auto U_log = normalize_logits(U);
        auto next = softmax_channels(add(U_log, kernel.message(converged.R)));
        for (int64_t i = 0; i < next.size(); ++i)
            worst_fp = std::max(worst_fp, std::fabs(next[i] - converged.R[i]));
    }
    report("fixed-point", worst_fp, 1e-8, worst_fp < 1e-8);

    // checkerboard sweeps must never raise the free energy
    int violations = 0;
    double worst_rise = 0;
    for (int t = 0; t < trials; ++t) {
        auto U = Tensor<double>::uniform(dims, 2.0, rng);
        auto kernel = random_symmetric_face_kernel<double>(K, 1.5, rng);
        auto U_log = normalize_logits(U);
        Tensor<double> R = Tensor<double>::full(dims, 1.0 / double(K));
        double prev = free_energy(U_log, R, kernel);
        for (int sweep = 0; sweep < 20; ++sweep) {
            R = mean_field_sweep_checkerboard(U_log, R, kernel);
            const double cur = free_energy(U_log, R, kernel);
            if (cur > prev + 1e-10) {
                ++violations;
                worst_rise = std::max(worst_rise, cur - prev);
            }
            prev = cur;
        }
    }
    report("monotonicity-violations", double(violations), 0.0, violations == 0);
    if (violations > 0) std::printf("  worst free-energy rise: %.3e\n", worst_rise);

    man.add_note("wall_seconds", CsvWriter::format_double(timer.seconds()));
    man.add_note("status", ok ? "pass" : "fail");
    man.save(man_path);
    return ok ? 0 : 1;
}

// ------------------------------------------------------------- dispatch

template <typename T>
int dispatch(int argc, char** argv) {
    const auto argv_v = collect_argv(argc, argv);
    CLI::App app{"MRF-UNet product-of-experts: phantoms, training, evaluation, studies"};
    app.require_subcommand(1);

    // phantom
    auto* ph = app.add_subcommand("phantom", "generate synthetic labelled volumes");
    std::string ph_out, ph_spec, ph_regime = "in_dist";
    int ph_count = 1;
    uint64_t ph_seed = 0;
    ph->add_option("--out-dir", ph_out, "output directory")->required();
    ph->add_option("--count", ph_count, "number of (image, labels) pairs");
    ph->add_option("--seed", ph_seed, "base seed; sample i uses seed+i");
    ph->add_option("--spec", ph_spec, "phantom spec file (key=value)");
    auto* ph_regime_opt = ph->add_option("--regime", ph_regime, "in_dist|out_dist (overrides spec)");

    // train
    auto* tr = app.add_subcommand("train", "train a UNet or MRF-UNet");
    TrainFlags tf;
    auto* tr_data = tr->add_option("--data-dir", tf.data_dir, "training samples")->required();
    auto* tr_val = tr->add_option("--val-dir", tf.val_dir, "validation samples")->required();
    tr->add_option("--out", tf.out, "checkpoint path")->required();
    auto* tr_metrics = tr->add_option("--metrics", tf.metrics, "metrics CSV (default <out>.metrics.csv)");
    auto* tr_j = tr->add_option("--j", tf.j, "filter exponent 1..6");
    auto* tr_k = tr->add_option("--k", tf.k, "classes");
    auto* tr_nomrf = tr->add_flag("--no-mrf", tf.no_mrf, "train the plain-softmax baseline");
    auto* tr_epochs = tr->add_option("--epochs", tf.epochs, "training epochs");
    auto* tr_lr = tr->add_option("--lr", tf.lr, "initial learning rate");
    auto* tr_seed = tr->add_option("--seed", tf.seed, "run seed");
    auto* tr_def = tr->add_option("--deform-amplitude", tf.deform_amplitude, "augmentation warp RMS voxels");
    auto* tr_bias = tr->add_option("--bias-amplitude", tf.bias_amplitude, "augmentation log-bias RMS");
    auto* tr_noise = tr->add_option("--noise-sigma", tf.noise_sigma, "augmentation noise sigma");
    auto* tr_nit = tr->add_option("--n-iter-test", tf.n_iter_test, "mean-field iterations at test time");
    auto* tr_nlo = tr->add_option("--n-iter-lo", tf.n_iter_lo, "training draw lower bound");
    auto* tr_nhi = tr->add_option("--n-iter-hi", tf.n_iter_hi, "training draw upper bound");
    auto* tr_sched = tr->add_option("--schedule", tf.schedule, "parallel|checkerboard");
    tr->add_option("--config", tf.config, "key=value config file; flags override");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string ev_ckpt, ev_data, ev_out;
    int ev_niter = -1;
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint path")->required();
    ev->add_option("--data-dir", ev_data, "evaluation samples")->required();
    ev->add_option("--n-iter", ev_niter, "mean-field iterations (default: checkpoint setting)");
    ev->add_option("--out-csv", ev_out, "per-sample dice CSV")->required();

    // convergence
    auto* cv = app.add_subcommand("convergence", "dice as a function of mean-field iterations");
    std::string cv_ckpt, cv_out;
    std::vector<std::string> cv_dirs;
    int cv_max = 20;
    cv->add_option("--checkpoint", cv_ckpt, "checkpoint path")->required();
    cv->add_option("--data-dir", cv_dirs, "split directory, optionally name=path; repeatable")
        ->required();
    cv->add_option("--max-iter", cv_max, "largest iteration count");
    cv->add_option("--out-csv", cv_out, "output CSV")->required();

    // capacity
    auto* cp = app.add_subcommand("capacity", "paired UNet vs MRF-UNet study over j and seeds");
    CapacityFlags cf;
    auto* cp_train = cp->add_option("--train-dir", cf.train_dir, "training samples")->required();
    auto* cp_val = cp->add_option("--val-dir", cf.val_dir, "validation samples")->required();
    auto* cp_in = cp->add_option("--test-in-dir", cf.test_in_dir, "in-distribution test samples")->required();
    auto* cp_out_d = cp->add_option("--test-out-dir", cf.test_out_dir, "out-of-distribution test samples")->required();
    cp->add_option("--out-csv", cf.out_csv, "paired results CSV")->required();
    auto* cp_j = cp->add_option("--j-list", cf.j_list, "comma-separated j values");
    auto* cp_seeds = cp->add_option("--seeds", cf.seeds, "comma-separated seeds");
    auto* cp_k = cp->add_option("--k", cf.k, "classes");
    auto* cp_epochs = cp->add_option("--epochs", cf.epochs, "epochs per cell");
    auto* cp_lr = cp->add_option("--lr", cf.lr, "initial learning rate");
    auto* cp_def = cp->add_option("--deform-amplitude", cf.deform_amplitude, "augmentation warp RMS voxels");
    auto* cp_bias = cp->add_option("--bias-amplitude", cf.bias_amplitude, "augmentation log-bias RMS");
    auto* cp_noise = cp->add_option("--noise-sigma", cf.noise_sigma, "augmentation noise sigma");
    auto* cp_nit = cp->add_option("--n-iter-test", cf.n_iter_test, "mean-field iterations at test time");
    cp->add_option("--config", cf.config, "key=value config file; flags override");

    // oracle-check
    auto* oc = app.add_subcommand("oracle-check", "exact-enumeration invariant suite (64-bit)");
    std::string oc_grid = "2x2x1", oc_man = "oracle-check.manifest.json";
    int64_t oc_k = 2;
    int oc_trials = 100;
    uint64_t oc_seed = 0;
    oc->add_option("--grid", oc_grid, "grid DxHxW (enumeration budget applies)");
    oc->add_option("--k", oc_k, "classes");
    oc->add_option("--trials", oc_trials, "random instances per check");
    oc->add_option("--seed", oc_seed, "rng seed");
    oc->add_option("--manifest", oc_man, "manifest path");

    CLI11_PARSE(app, argc, argv);

    if (ph->parsed())
        return run_phantom<T>(argv_v, ph_out, ph_count, ph_seed, ph_spec, ph_regime,
                              ph_regime_opt->count() > 0);
    if (tr->parsed()) {
        FlagMerge fm(tf.config);
        fm.str(tr_data, tf.data_dir, "data_dir");
        fm.str(tr_val, tf.val_dir, "val_dir");
        fm.str(tr_metrics, tf.metrics, "metrics");
        fm.num(tr_j, tf.j, "j");
        fm.num(tr_k, tf.k, "k");
        fm.flag(tr_nomrf, tf.no_mrf, "no_mrf");
        fm.num(tr_epochs, tf.epochs, "epochs");
        fm.num(tr_lr, tf.lr, "lr");
        fm.num(tr_seed, tf.seed, "seed");
        fm.num(tr_def, tf.deform_amplitude, "deform_amplitude");
        fm.num(tr_bias, tf.bias_amplitude, "bias_amplitude");
        fm.num(tr_noise, tf.noise_sigma, "noise_sigma");
        fm.num(tr_nit, tf.n_iter_test, "n_iter_test");
        fm.num(tr_nlo, tf.n_iter_lo, "n_iter_lo");
        fm.num(tr_nhi, tf.n_iter_hi, "n_iter_hi");
        fm.str(tr_sched, tf.schedule, "schedule");
        return run_train<T>(argv_v, tf);
    }
    if (ev->parsed()) return run_eval<T>(argv_v, ev_ckpt, ev_data, ev_niter, ev_out);
    if (cv->parsed()) return run_convergence<T>(argv_v, cv_ckpt, cv_dirs, cv_max, cv_out);
    if (cp->parsed()) {
        FlagMerge fm(cf.config);
        fm.str(cp_train, cf.train_dir, "train_dir");
        fm.str(cp_val, cf.val_dir, "val_dir");
        fm.str(cp_in, cf.test_in_dir, "test_in_dir");
        fm.str(cp_out_d, cf.test_out_dir, "test_out_dir");
        fm.str(cp_j, cf.j_list, "j_list");
        fm.str(cp_seeds, cf.seeds, "seeds");
        fm.num(cp_k, cf.k, "k");
        fm.num(cp_epochs, cf.epochs, "epochs");
        fm.num(cp_lr, cf.lr, "lr");
        fm.num(cp_def, cf.deform_amplitude, "deform_amplitude");
        fm.num(cp_bias, cf.bias_amplitude, "bias_amplitude");
        fm.num(cp_noise, cf.noise_sigma, "noise_sigma");
        fm.num(cp_nit, cf.n_iter_test, "n_iter_test");
        return run_capacity<T>(argv_v, cf);
    }
    if (oc->parsed()) return run_oracle_check(argv_v, oc_grid, oc_k, oc_trials, oc_seed, oc_man);
    return 1;  // unreachable: require_subcommand
}

} // namespace

int main(int argc, char** argv) {
    try {
        return precision_name() == "f64" ? dispatch<double>(argc, argv)
                                         : dispatch<float>(argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
