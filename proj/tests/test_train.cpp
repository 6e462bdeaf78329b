#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "mrfuse/phantom.hpp"
#include "mrfuse/train.hpp"
#include "testutil.hpp"

using namespace mrfuse;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("mrfuse_train_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

PhantomSpec two_class_spec(int64_t side) {
    PhantomSpec s;
    s.dims = {side, side, side};
    s.K = 2;
    s.blobs = {0, side >= 12 ? 3 : 2};  // stay above the voxels-per-blob floor
    s.blob_sigma = {3.0, 3.0};
    s.means = {0.10, 0.75};
    s.stds = {0.05, 0.06};
    return s;
}

template <typename T>
std::vector<Sample<T>> make_dataset(const PhantomSpec& spec, uint64_t seed0, int count) {
    std::vector<Sample<T>> out;
    for (int i = 0; i < count; ++i) {
        auto [img, lab] = generate_phantom<T>(spec, seed0 + uint64_t(i));
        out.push_back({"p" + std::to_string(i), img, lab});
    }
    return out;
}

// Deliberately independent scalar transcription of the update equations.
struct ScalarAdam {
    double m = 0, v = 0;
    int t = 0;
    double step(double x, double g, double lr, double b1, double b2, double eps) {
        ++t;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mh = m / (1 - std::pow(b1, t));
        const double vh = v / (1 - std::pow(b2, t));
        return x - lr * mh / (std::sqrt(vh) + eps);
    }
};

template <typename T>
double grad_block_norm(std::vector<Tensor<T>> params, size_t lo, size_t hi) {
    double s = 0;
    for (size_t i = lo; i < hi; ++i)
        for (T g : params[i].grad()) s += double(g) * double(g);
    return std::sqrt(s);
}

} // namespace

TEST_CASE("dice follows the stated conventions") {
    Tensor<double> a({1, 2, 2, 2}), b({1, 2, 2, 2});
    for (int64_t i = 0; i < 8; ++i) a[i] = b[i] = double(i % 2);

    SUBCASE("identical volumes score 1 for every class") {
        CHECK(dice(a, b, 0) == 1.0);
        CHECK(dice(a, b, 1) == 1.0);
    }
    SUBCASE("disjoint equal-size masks score 0") {
        for (int64_t i = 0; i < 8; ++i) b[i] = double((i + 1) % 2);
        CHECK(dice(a, b, 0) == 0.0);
        CHECK(dice(a, b, 1) == 0.0);
    }
    SUBCASE("half overlap scores 0.5") {
        // |P|=|R|=4, overlap 2 -> 2*2/8
        b[1] = 0.0;
        b[3] = 0.0;
        b[0] = 1.0;
        b[2] = 1.0;
        CHECK(dice(a, b, 1) == 0.5);
    }
    SUBCASE("a class absent from both scores 1") {
        CHECK(dice(a, b, 7) == 1.0);
    }
    SUBCASE("shape mismatch is rejected") {
        Tensor<double> c({1, 2, 2, 1});
        CHECK_THROWS_AS(dice(a, c, 0), Error);
    }
}

TEST_CASE("adam: zero gradients leave parameters untouched") {
    Rng rng(11);
    auto p = Tensor<double>::uniform({3, 2}, 1.0, rng);
    std::vector<double> before(p.values_vec());
    Adam<double> opt({p});
    CHECK(opt.step(1e-3));
    CHECK(opt.step(1e-3));
    for (int64_t i = 0; i < p.size(); ++i) CHECK(p[i] == before[size_t(i)]);
}

TEST_CASE("adam: first step on a unit gradient moves by about -lr") {
    Tensor<double> p({1});
    p[0] = 0.7;
    Adam<double> opt({p});
    p.grad()[0] = 1.0;
    CHECK(opt.step(1e-3));
    // bias-corrected m̂ = 1, v̂ = 1, so Δ = lr/(1 + eps)
    CHECK(std::fabs(p[0] - (0.7 - 1e-3 / (1.0 + 1e-8))) < 1e-15);
    // gradients are consumed by the step
    CHECK(p.grad()[0] == 0.0);
}

TEST_CASE("adam tracks an independent scalar reference on a quadratic") {
    Tensor<double> p({1});
    p[0] = 2.95;
    Adam<double> opt({p});
    ScalarAdam ref;
    double x = 2.95;
    for (int t = 0; t < 100; ++t) {
        const double g = 2.0 * (x - 3.0);
        x = ref.step(x, g, 0.02, 0.9, 0.999, 1e-8);
        p.grad()[0] = 2.0 * (p[0] - 3.0);
        CHECK(opt.step(0.02));
        CHECK(std::fabs(p[0] - x) < 1e-12);
    }
    CHECK(std::fabs(p[0] - 3.0) < 1e-3);
}

TEST_CASE("adam rejects a step containing a non-finite gradient") {
    Rng rng(12);
    auto p = Tensor<double>::uniform({4}, 1.0, rng);
    auto q = Tensor<double>::uniform({4}, 1.0, rng);
    std::vector<double> before_p(p.values_vec()), before_q(q.values_vec());
    Adam<double> opt({p, q});
    for (int64_t i = 0; i < 4; ++i) p.grad()[size_t(i)] = 1.0;
    q.grad()[2] = std::numeric_limits<double>::quiet_NaN();
    CHECK_FALSE(opt.step(1e-3));
    CHECK(opt.rejected() == 1);
    CHECK(opt.steps() == 0);
    // nothing moved, and the poisoned gradients were discarded
    for (int64_t i = 0; i < 4; ++i) {
        CHECK(p[i] == before_p[size_t(i)]);
        CHECK(q[i] == before_q[size_t(i)]);
        CHECK(p.grad()[size_t(i)] == 0.0);
        CHECK(q.grad()[size_t(i)] == 0.0);
    }
    // a clean step afterwards is accepted
    p.grad()[0] = 1.0;
    CHECK(opt.step(1e-3));
}

TEST_CASE("lr=0 training is the identity on parameters") {
    auto spec = two_class_spec(8);
    auto train_set = make_dataset<float>(spec, 100, 2);
    auto val_set = make_dataset<float>(spec, 200, 1);

    UNetConfig ucfg;
    ucfg.K = 2;
    auto model = Model<float>::build(ucfg, FusionConfig{}, true, 7);
    std::vector<std::vector<float>> before;
    for (auto& p : model.parameters()) before.push_back(p.values_vec());

    TrainConfig tc;
    tc.lr = 0.0;
    tc.epochs = 7;  // long enough for the plateau rule to trigger
    tc.plateau_patience = 2;
    tc.seed = 3;
    tc.augment.deform_amplitude = 0.5;
    tc.augment.noise_sigma = 0.02;
    train(model, train_set, val_set, tc);

    auto params = model.parameters();
    for (size_t i = 0; i < params.size(); ++i)
        for (int64_t e = 0; e < params[i].size(); ++e)
            CHECK(params[i][e] == before[i][size_t(e)]);
}

TEST_CASE("identically seeded runs emit identical metrics logs") {
    auto spec = two_class_spec(8);
    auto train_set = make_dataset<float>(spec, 300, 3);
    auto val_set = make_dataset<float>(spec, 400, 2);

    UNetConfig ucfg;
    ucfg.K = 2;
    TrainConfig tc;
    tc.epochs = 3;
    tc.seed = 5;
    tc.augment.deform_amplitude = 0.5;
    tc.augment.bias_amplitude = 0.02;
    tc.augment.noise_sigma = 0.02;

    auto run = [&] {
        auto model = Model<float>::build(ucfg, FusionConfig{}, true, 7);
        return train(model, train_set, val_set, tc).metrics_csv;
    };
    const std::string a = run(), b = run();
    CHECK(a == b);
    CHECK(a.substr(0, a.find('\n')) ==
          "epoch,split,loss,dice_0,dice_1,dice_mean,lr,n_iter");
    // two rows per epoch plus the header
    CHECK(std::count(a.begin(), a.end(), '\n') == 1 + 2 * tc.epochs);
}

TEST_CASE("zero-center taps survive a full training run") {
    auto spec = two_class_spec(8);
    auto train_set = make_dataset<float>(spec, 500, 3);
    auto val_set = make_dataset<float>(spec, 600, 1);

    UNetConfig ucfg;
    ucfg.K = 2;
    auto model = Model<float>::build(ucfg, FusionConfig{}, true, 9);
    TrainConfig tc;
    tc.epochs = 3;
    tc.seed = 4;
    train(model, train_set, val_set, tc);
    CHECK(model.mrf->center_is_zero());
}

TEST_CASE("one backward pass reaches both parameter blocks") {
    auto spec = two_class_spec(8);
    auto [img, lab] = generate_phantom<double>(spec, 42);

    UNetConfig ucfg;
    ucfg.K = 2;
    auto model = Model<double>::build(ucfg, FusionConfig{}, true, 13);
    model.set_requires_grad(true);
    auto target = one_hot(lab, 2);

    Tape<double> tape;
    {
        TapeScope<double> scope(tape);
        Rng rng(1);
        auto fr = model.forward(img, FuseMode::train, &rng);
        Tensor<double> loss = cross_entropy(fr.log_R, target);
        tape.backward(loss);
    }
    auto params = model.parameters();
    const size_t n_unet = params.size() - 4;
    CHECK(grad_block_norm(params, 0, n_unet) > 0.0);
    CHECK(grad_block_norm(params, n_unet, params.size()) > 0.0);
}

TEST_CASE("checkpoint round-trip reproduces forward outputs bit-exactly") {
    TempDir tmp;
    auto spec = two_class_spec(8);
    auto [img, lab] = generate_phantom<float>(spec, 77);

    UNetConfig ucfg;
    ucfg.K = 2;
    auto model = Model<float>::build(ucfg, FusionConfig{}, true, 21);
    // non-trivial trained-looking state
    TrainState st;
    st.epoch = 17;
    st.best_val_loss = 0.125;
    st.lr = 2.5e-4;
    st.rng.x = 99;

    const std::string path = tmp.file("model.ckpt");
    save_checkpoint(path, model, st);
    auto loaded = load_checkpoint<float>(path);

    CHECK(loaded.state.epoch == 17);
    CHECK(loaded.state.best_val_loss == 0.125);
    CHECK(loaded.state.lr == 2.5e-4);
    CHECK(loaded.state.rng.x == 99);
    CHECK(loaded.model.has_mrf());
    CHECK(loaded.model.mrf->center_is_zero());

    auto a = model.forward(img, FuseMode::test);
    auto b = loaded.model.forward(img, FuseMode::test);
    for (int64_t i = 0; i < a.R.size(); ++i) CHECK(a.R[i] == b.R[i]);

    SUBCASE("f64 round trip is also exact at its own width") {
        auto m64 = Model<double>::build(ucfg, FusionConfig{}, true, 22);
        const std::string p64 = tmp.file("model64.ckpt");
        save_checkpoint(p64, m64, st);
        auto l64 = load_checkpoint<double>(p64);
        auto [img64, lab64] = generate_phantom<double>(spec, 77);
        auto a64 = m64.forward(img64, FuseMode::test);
        auto b64 = l64.model.forward(img64, FuseMode::test);
        for (int64_t i = 0; i < a64.R.size(); ++i) CHECK(a64.R[i] == b64.R[i]);
    }

    SUBCASE("baseline checkpoints carry no mrf section") {
        auto base = Model<float>::build(ucfg, FusionConfig{}, false, 21);
        const std::string bp = tmp.file("baseline.ckpt");
        save_checkpoint(bp, base, st);
        // the section table on disk must not name an mrf payload
        std::ifstream f(bp, std::ios::binary);
        std::stringstream buf;
        buf << f.rdbuf();
        CHECK(buf.str().find("mrf/w1") == std::string::npos);
        auto lb = load_checkpoint<float>(bp);
        CHECK_FALSE(lb.model.has_mrf());
    }

    SUBCASE("bad magic is rejected") {
        const std::string bad = tmp.file("bad.ckpt");
        std::ofstream f(bad, std::ios::binary);
        f << "NOPE" << std::string(64, '\0');
        f.close();
        CHECK_THROWS_AS(load_checkpoint<float>(bad), Error);
    }

    SUBCASE("truncated file is rejected") {
        std::ifstream f(path, std::ios::binary);
        std::stringstream buf;
        buf << f.rdbuf();
        const std::string whole = buf.str();
        const std::string cut = tmp.file("cut.ckpt");
        std::ofstream g(cut, std::ios::binary);
        g << whole.substr(0, whole.size() / 2);
        g.close();
        CHECK_THROWS_AS(load_checkpoint<float>(cut), Error);
    }
}

TEST_CASE("dataset save/load round trip and pairing rules") {
    TempDir tmp;
    auto spec = two_class_spec(8);
    auto [img, lab] = generate_phantom<float>(spec, 31);
    save_sample(tmp.path.string(), "s0000", img, lab);
    save_sample(tmp.path.string(), "s0001", img, lab);

    auto ds = load_dataset<float>(tmp.path.string(), 2);
    REQUIRE(ds.size() == 2);
    CHECK(ds[0].id == "s0000");
    CHECK(ds[1].id == "s0001");
    for (int64_t i = 0; i < img.size(); ++i) CHECK(ds[0].image[i] == img[i]);
    for (int64_t i = 0; i < lab.size(); ++i) CHECK(ds[0].labels[i] == lab[i]);

    SUBCASE("K mismatch is rejected via label range validation") {
        CHECK_THROWS_AS(load_dataset<float>(tmp.path.string(), 1), Error);
    }
    SUBCASE("empty directory is rejected") {
        fs::create_directories(tmp.path / "empty");
        CHECK_THROWS_AS(load_dataset<float>((tmp.path / "empty").string(), 2), Error);
    }
}

TEST_CASE("smoke run: loss falls and train dice clears 0.8") {
    auto spec = two_class_spec(16);
    auto train_set = make_dataset<float>(spec, 1000, 16);
    auto val_set = make_dataset<float>(spec, 2000, 4);

    UNetConfig ucfg;  // j=1
    ucfg.K = 2;
    auto model = Model<float>::build(ucfg, FusionConfig{}, true, 1);
    TrainConfig tc;
    tc.epochs = 10;
    tc.seed = 2;
    auto res = train(model, train_set, val_set, tc);

    // initial train loss sits in the first data row of the metrics log
    std::istringstream csv(res.metrics_csv);
    std::string header, first_row;
    std::getline(csv, header);
    std::getline(csv, first_row);
    const auto cells = split(first_row, ',');
    REQUIRE(cells.size() == 8);  // epoch,split,loss,dice_0,dice_1,dice_mean,lr,n_iter
    const double initial_loss = std::stod(cells[2]);

    CHECK(res.final_train_loss < initial_loss);
    CHECK(mean_of(res.final_train_dice) > 0.8);
}

TEST_CASE("evaluate: n_iter=0 equals the plain softmax head") {
    auto spec = two_class_spec(8);
    auto data = make_dataset<float>(spec, 3000, 2);

    UNetConfig ucfg;
    ucfg.K = 2;
    auto mrf_model = Model<float>::build(ucfg, FusionConfig{}, true, 33);
    auto baseline = Model<float>::build(ucfg, FusionConfig{}, false, 33);  // same unet seed

    for (const auto& smp : data) {
        auto a = mrf_model.forward(smp.image, FuseMode::test, nullptr, 0);
        auto b = baseline.forward(smp.image, FuseMode::test);
        CHECK(a.n_iter_used == 0);
        for (int64_t i = 0; i < a.R.size(); ++i)
            CHECK(std::fabs(double(a.R[i]) - double(b.R[i])) < 1e-6);
    }
}

TEST_CASE("a model scored against its own argmax decode gets dice 1") {
    auto spec = two_class_spec(8);
    auto data = make_dataset<float>(spec, 4000, 1);

    UNetConfig ucfg;
    ucfg.K = 2;
    auto model = Model<float>::build(ucfg, FusionConfig{}, true, 44);
    auto fr = model.forward(data[0].image, FuseMode::test);
    auto self = data[0];
    self.labels = argmax_labels(fr.R);
    auto rows = evaluate(model, {self}, model.fusion.n_iter_test);
    REQUIRE(rows.size() == 1);
    for (double d : rows[0].dice) CHECK(d == 1.0);
    CHECK(rows[0].dice_mean == 1.0);
}
