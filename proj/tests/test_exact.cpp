#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mrfuse/exact.hpp"
#include "mrfuse/mean_field.hpp"
#include "testutil.hpp"

using namespace mrfuse;
using testutil::rel_err;

TEST_CASE("zero kernel factorizes: table sums to one, marginals are softmax(U)") {
    Rng rng(1);
    auto U = Tensor<double>::uniform({3, 2, 2, 1}, 2.0, rng);
    auto Ul = normalize_logits(U);
    auto kernel = MrfKernel<double>::zeros(3);
    auto dist = enumerate_product(Ul, kernel);

    double total = 0.0;
    for (double lp : dist.log_probs) total += std::exp(lp);
    CHECK(std::fabs(total - 1.0) < 1e-10);

    auto marg = exact_marginals(dist);
    auto soft = exp_elem(Ul);
    for (int64_t i = 0; i < marg.size(); ++i) CHECK(std::fabs(marg[i] - soft[i]) < 1e-12);
}

TEST_CASE("single voxel: any kernel, distribution is softmax(U)") {
    Rng rng(2);
    auto U = Tensor<double>::uniform({4, 1, 1, 1}, 3.0, rng);
    auto Ul = normalize_logits(U);
    auto kernel = testutil::random_symmetric_face_kernel(4, 2.0, rng);
    auto dist = enumerate_product(Ul, kernel);
    auto marg = exact_marginals(dist);
    for (int64_t k = 0; k < 4; ++k) CHECK(std::fabs(marg[k] - std::exp(Ul[k])) < 1e-12);
}

TEST_CASE("two-voxel agreement instance: full table against closed forms") {
    // U_log uniform, agreement kernel beta=1 on the one neighbor pair:
    // p(agree)/p(disagree) = e^{2 beta} per configuration.
    auto Ul = Tensor<double>::from_values(
        {2, 1, 1, 2}, {std::log(0.5), std::log(0.5), std::log(0.5), std::log(0.5)});
    auto kernel = testutil::agreement_kernel(2, 1.0);
    auto dist = enumerate_product(Ul, kernel);
    REQUIRE(dist.configs() == 4);
    // mixed radix, voxel 0 least significant: index = z0 + 2*z1
    const double p00 = std::exp(dist.log_probs[0]);
    const double p10 = std::exp(dist.log_probs[1]);
    const double p01 = std::exp(dist.log_probs[2]);
    const double p11 = std::exp(dist.log_probs[3]);
    CHECK(std::fabs(p00 + p01 + p10 + p11 - 1.0) < 1e-12);
    CHECK(rel_err(p00 / p01, std::exp(2.0), 1e-12) < 1e-12);
    CHECK(rel_err(p11 / p10, std::exp(2.0), 1e-12) < 1e-12);
    const double e = std::exp(1.0);
    const double Z = 0.5 * (e + 1.0 / e);
    CHECK(p00 == doctest::Approx(0.25 * e / Z).epsilon(1e-13));
    // ln Z on top of normalized U_log
    CHECK(dist.log_Z == doctest::Approx(std::log(Z)).epsilon(1e-13));
}

TEST_CASE("asymmetric two-voxel regression constants") {
    // voxel 1 = ln[0.9, 0.1], voxel 2 uniform, agreement beta=1. Frozen from
    // scalar arithmetic: Z = 0.5(e + 1/e) = cosh(1); the uniform neighbor
    // exerts no net pull, so voxel 1 keeps marginal 0.9 exactly.
    auto Ul = Tensor<double>::from_values(
        {2, 1, 1, 2}, {std::log(0.9), std::log(0.5), std::log(0.1), std::log(0.5)});
    auto kernel = testutil::agreement_kernel(2, 1.0);
    auto dist = enumerate_product(Ul, kernel);
    CHECK(dist.log_Z == doctest::Approx(std::log(1.543080634815244)).epsilon(1e-13));
    auto marg = exact_marginals(dist);
    CHECK(marg.at(0, 0, 0, 0) == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(marg.at(0, 0, 0, 1) == doctest::Approx(0.804637662382306).epsilon(1e-12));
}

TEST_CASE("budget rejection names the limit") {
    auto Ul = normalize_logits(Tensor<double>::zeros({4, 3, 2, 2}));  // 4^12 = 2^24
    auto kernel = MrfKernel<double>::zeros(4);
    try {
        enumerate_product(Ul, kernel);
        FAIL("expected budget rejection");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("2^20") != std::string::npos);
    }
}

TEST_CASE("exact_kl: zero at the factorized optimum, non-negative everywhere") {
    Rng rng(3);
    auto Ul = normalize_logits(Tensor<double>::uniform({2, 2, 2, 1}, 2.0, rng));
    auto zero = MrfKernel<double>::zeros(2);
    auto dist = enumerate_product(Ul, zero);
    CHECK(std::fabs(exact_kl(exact_marginals(dist), dist)) < 1e-10);

    int checked = 0;
    for (int t = 0; t < 1000; ++t) {
        auto U = normalize_logits(Tensor<double>::uniform({2, 2, 2, 1}, 2.0, rng));
        auto kernel = testutil::random_symmetric_face_kernel(2, 1.0, rng);
        auto d = enumerate_product(U, kernel);
        auto q = testutil::random_simplex({2, 2, 2, 1}, rng);
        CHECK(exact_kl(q, d) >= 0.0);
        ++checked;
    }
    CHECK(checked == 1000);
}

TEST_CASE("KL minus free energy is constant in q (equals -ln Z)") {
    Rng rng(4);
    auto Ul = normalize_logits(Tensor<double>::uniform({2, 2, 2, 1}, 2.0, rng));
    auto kernel = testutil::random_symmetric_face_kernel(2, 1.2, rng);
    auto dist = enumerate_product(Ul, kernel);

    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (int t = 0; t < 100; ++t) {
        auto q = testutil::random_simplex({2, 2, 2, 1}, rng);
        const double off = exact_kl(q, dist) - free_energy(Ul, q, kernel);
        lo = std::min(lo, off);
        hi = std::max(hi, off);
    }
    CHECK(hi - lo < 1e-8);
    // F = KL - ln Z, so the constant offset is +ln Z
    CHECK(std::fabs(0.5 * (hi + lo) - dist.log_Z) < 1e-8);
}

TEST_CASE("checkerboard sweeps never increase the free energy (face kernels)") {
    Rng rng(5);
    int instances = 0, violations = 0;
    for (int t = 0; t < 30; ++t) {
        const int64_t K = 2 + (t % 2);
        auto Ul = normalize_logits(Tensor<double>::uniform({K, 2, 2, 2}, 2.0, rng));
        auto kernel = testutil::random_symmetric_face_kernel(K, 1.5, rng);
        auto R = testutil::random_simplex({K, 2, 2, 2}, rng);
        double prev = free_energy(Ul, R, kernel);
        for (int sweep = 0; sweep < 20; ++sweep) {
            R = mean_field_sweep_checkerboard(Ul, R, kernel);
            const double cur = free_energy(Ul, R, kernel);
            if (cur > prev + 1e-10) ++violations;
            prev = cur;
        }
        ++instances;
    }
    CHECK(instances == 30);
    CHECK(violations == 0);
}

TEST_CASE("converged point satisfies the fixed-point equation") {
    Rng rng(6);
    for (int t = 0; t < 10; ++t) {
        auto Ul = normalize_logits(Tensor<double>::uniform({2, 2, 2, 2}, 1.5, rng));
        auto kernel = testutil::random_symmetric_face_kernel(2, 1.0, rng);
        auto R = Tensor<double>::full({2, 2, 2, 2}, 0.5);
        double delta = 1.0;
        for (int sweep = 0; sweep < 500 && delta >= 1e-12; ++sweep) {
            auto next = mean_field_sweep_checkerboard(Ul, R, kernel);
            delta = 0.0;
            for (int64_t i = 0; i < R.size(); ++i)
                delta = std::max(delta, std::fabs(next[i] - R[i]));
            R = next;
        }
        REQUIRE(delta < 1e-12);
        auto rhs = mean_field_sweep(Ul, R, kernel);  // softmax(U_log + message(R))
        for (int64_t i = 0; i < R.size(); ++i) CHECK(std::fabs(rhs[i] - R[i]) < 1e-8);
    }
}

TEST_CASE("converged checkerboard point is a local KL minimum") {
    Rng rng(7);
    auto Ul = normalize_logits(Tensor<double>::uniform({2, 2, 2, 1}, 1.5, rng));
    auto kernel = testutil::random_symmetric_face_kernel(2, 1.0, rng);
    auto dist = enumerate_product(Ul, kernel);

    auto R = Tensor<double>::full({2, 2, 2, 1}, 0.5);
    for (int sweep = 0; sweep < 500; ++sweep) R = mean_field_sweep_checkerboard(Ul, R, kernel);
    const double kl_star = exact_kl(R, dist);

    const int64_t spatial = 4;
    int worse = 0;
    for (int t = 0; t < 1000; ++t) {
        auto q = R.clone();
        for (int64_t i = 0; i < spatial; ++i) {
            const double eps = rng.uniform(-0.02, 0.02);
            double a = std::min(1.0, std::max(0.0, q[i] + eps));
            q[i] = a;
            q[spatial + i] = 1.0 - a;
        }
        if (exact_kl(q, dist) >= kl_star - 1e-12) ++worse;
    }
    CHECK(worse == 1000);
}

TEST_CASE("one parallel sweep equals exact marginals when the kernel is zero") {
    Rng rng(8);
    for (int t = 0; t < 25; ++t) {
        const int64_t K = 2 + (t % 2);
        auto Ul = normalize_logits(Tensor<double>::uniform({K, 2, 2, 2}, 2.0, rng));
        auto kernel = MrfKernel<double>::zeros(K);
        auto R = testutil::random_simplex({K, 2, 2, 2}, rng);
        auto S = mean_field_sweep(Ul, R, kernel);
        auto marg = exact_marginals(enumerate_product(Ul, kernel));
        for (int64_t i = 0; i < S.size(); ++i) CHECK(std::fabs(S[i] - marg[i]) < 1e-8);
    }
}
