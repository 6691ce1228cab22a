// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dskd/guidance.hpp"

using namespace dskd;

namespace {

template <class Real>
auto zero_predictor() {
    return [](const TensorT<Real>& x, auto&&) { return TensorT<Real>::zeros(x.shape()); };
}

TeacherClassifier identity_classifier() {
    TeacherClassifier tc;
    tc.weight = Tensor::from({2, 2}, {1, 0, 0, 1});
    tc.bias = Tensor::zeros({2});
    return tc;
}

}  // namespace

TEST_CASE("classifier logits with identity weights read off the pooled feature") {
    auto tc = identity_classifier();
    // constant 2x2 map with channel values (3, -1)
    auto x = Tensor::from({1, 2, 2, 2}, {3, -1, 3, -1, 3, -1, 3, -1});
    auto l = tc.logits(x);
    CHECK(l.data()[0] == doctest::Approx(3.0));
    CHECK(l.data()[1] == doctest::Approx(-1.0));
}

TEST_CASE("logits are invariant under spatial tiling") {
    RngStream rng(2, 1);
    TeacherClassifier tc;
    tc.weight = Tensor::randn({3, 4}, rng);
    tc.bias = Tensor::randn({4}, rng);
    auto small = Tensor::randn({1, 2, 2, 3}, rng);
    // tile 2x2 -> 4x4
    std::vector<float> big(4 * 4 * 3);
    for (int h = 0; h < 4; ++h)
        for (int w = 0; w < 4; ++w)
            for (int c = 0; c < 3; ++c)
                big[(h * 4 + w) * 3 + c] = small.data()[((h % 2) * 2 + (w % 2)) * 3 + c];
    auto tiled = Tensor::from({1, 4, 4, 3}, std::move(big));
    auto l1 = tc.logits(small);
    auto l2 = tc.logits(tiled);
    for (int c = 0; c < 4; ++c) CHECK(l1.data()[c] == doctest::Approx(l2.data()[c]).epsilon(1e-6));
}

TEST_CASE("zero features give bias logits; depth mismatch is an error") {
    auto tc = identity_classifier();
    tc.bias = Tensor::from({2}, {0.3f, -0.7f});
    auto l = tc.logits(Tensor::zeros({1, 4, 4, 2}));
    CHECK(l.data()[0] == doctest::Approx(0.3));
    CHECK(l.data()[1] == doctest::Approx(-0.7));
    CHECK_THROWS_AS(tc.logits(Tensor::zeros({1, 4, 4, 3})), ShapeError);
}

TEST_CASE("classifier gradient closed form at uniform probabilities") {
    RngStream rng(5, 2);
    TeacherClassifier tc;
    tc.weight = Tensor::randn({3, 4}, rng);
    tc.bias = Tensor::zeros({4});
    auto x = Tensor::zeros({1, 2, 2, 3});  // zero features => equal logits => uniform p
    auto g = tc.log_prob_grad(x, {1});
    for (int d = 0; d < 3; ++d) {
        double meanw = 0;
        for (int c = 0; c < 4; ++c) meanw += tc.weight.data()[d * 4 + c];
        meanw /= 4;
        double expect = (tc.weight.data()[d * 4 + 1] - meanw) / 4.0;  // H*W = 4
        for (int o = 0; o < 4; ++o) CHECK(g.data()[o * 3 + d] == doctest::Approx(expect).epsilon(1e-6));
    }
}

TEST_CASE("single-class classifier has zero guidance gradient") {
    RngStream rng(6, 3);
    TeacherClassifier tc;
    tc.weight = Tensor::randn({3, 1}, rng);
    tc.bias = Tensor::zeros({1});
    auto x = Tensor::randn({2, 2, 2, 3}, rng);
    auto g = tc.log_prob_grad(x, {0, 0});
    for (float v : g.data()) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("classifier gradient rejects invalid labels") {
    auto tc = identity_classifier();
    auto x = Tensor::zeros({1, 2, 2, 2});
    CHECK_THROWS_AS(tc.log_prob_grad(x, {2}), std::out_of_range);
    CHECK_THROWS_AS(tc.log_prob_grad(x, {-1}), std::out_of_range);
}

TEST_CASE("classifier gradient matches central differences on random instances") {
    RngStream rng(7, 4);
    for (int trial = 0; trial < 25; ++trial) {
        TeacherClassifierT<double> tc;
        tc.weight = TensorT<double>::randn({3, 4}, rng);
        tc.bias = TensorT<double>::randn({4}, rng, 0.3);
        auto x0 = TensorT<double>::randn({1, 2, 2, 3}, rng);
        int y = rng.uniform_int(4);

        auto analytic = tc.log_prob_grad(x0, {y});
        double h = 1e-5;
        double max_rel = 0;
        for (int64_t i = 0; i < x0.numel(); ++i) {
            auto xp = x0.clone();
            auto xm = x0.clone();
            xp.mutable_data()[i] += h;
            xm.mutable_data()[i] -= h;
            auto lp = [&](const TensorT<double>& xx) {
                return log_softmax(tc.logits(xx)).data()[static_cast<size_t>(y)];
            };
            double cd = (lp(xp) - lp(xm)) / (2 * h);
            double rel = std::abs(analytic.data()[i] - cd) / std::max(1.0, std::abs(cd));
            max_rel = std::max(max_rel, rel);
        }
        CHECK(max_rel < 1e-5);
    }
}

TEST_CASE("guided step with k=0 is bit-identical to the unguided step") {
    auto sched = make_schedule(3, 0.1, 0.3);
    auto tc = identity_classifier();
    RngStream rng(9, 1);
    auto x_t = Tensor::randn({1, 2, 2, 2}, rng);

    RngStream r1(42, 2), r2(42, 2);
    auto a = guided_step(zero_predictor<float>(), tc, x_t, 2, {0}, 0.0, sched, r1);
    auto b = unguided_step(zero_predictor<float>(), x_t, 2, sched, r2);
    CHECK(a.data() == b.data());
}

TEST_CASE("guided step at t=1 is the deterministic mean regardless of k") {
    auto sched = make_schedule(3, 0.1, 0.3);
    auto tc = identity_classifier();
    RngStream rng(10, 1);
    auto x_t = Tensor::randn({1, 2, 2, 2}, rng);
    RngStream r1(1, 1), r2(1, 1);
    auto with_k = guided_step(zero_predictor<float>(), tc, x_t, 1, {0}, 5.0, sched, r1);
    auto without = unguided_step(zero_predictor<float>(), x_t, 1, sched, r2);
    for (size_t i = 0; i < with_k.data().size(); ++i)
        CHECK(with_k.data()[i] == doctest::Approx(without.data()[i]));
}

TEST_CASE("guided step empirical mean matches mu + k sigma^2 g") {
    // sigma = 0.05 at t=2: beta / (2 - beta) = 0.0025
    double b = 0.005 / 1.0025;
    auto sched = make_schedule(2, b, b);
    double sigma2 = compute_sigma2(2, sched);
    CHECK(std::sqrt(sigma2) == doctest::Approx(0.05).epsilon(1e-10));

    TeacherClassifier tc;
    tc.weight = Tensor::from({2, 2}, {1.2f, -0.7f, -0.5f, 0.9f});
    tc.bias = Tensor::from({2}, {0.1f, -0.2f});
    auto x_t = Tensor::from({1, 1, 1, 2}, {0.3f, -0.2f});
    double k = 2.0;

    auto g = tc.log_prob_grad(x_t, {0});
    auto [mu, s2] = posterior_params(zero_predictor<float>(), x_t, 2, sched);
    double target0 = mu.data()[0] + k * s2 * g.data()[0];
    double target1 = mu.data()[1] + k * s2 * g.data()[1];

    RngStream rng(31337, 8);
    const int n = 1000000;
    double acc0 = 0, acc1 = 0;
    for (int i = 0; i < n; ++i) {
        auto y = guided_step(zero_predictor<float>(), tc, x_t, 2, {0}, k, sched, rng);
        acc0 += y.data()[0];
        acc1 += y.data()[1];
    }
    double se = 0.05 / std::sqrt(static_cast<double>(n));
    CHECK(std::abs(acc0 / n - target0) < 3 * se);
    CHECK(std::abs(acc1 / n - target1) < 3 * se);
}

TEST_CASE("guidance-direction logit margin is nondecreasing in k") {
    auto sched = make_schedule(3, 0.1, 0.3);
    RngStream rng(12, 5);
    TeacherClassifier tc;
    tc.weight = Tensor::randn({2, 3}, rng);
    tc.bias = Tensor::randn({3}, rng, 0.2);
    auto x_t = Tensor::randn({1, 2, 2, 2}, rng);
    int y = 1;

    // direction u = W[:,y] - sum_c p_c W[:,c] at the gradient evaluation point
    auto p = softmax(tc.logits(x_t));
    std::vector<double> u(2);
    for (int d = 0; d < 2; ++d) {
        u[d] = tc.weight.data()[d * 3 + y];
        for (int c = 0; c < 3; ++c) u[d] -= p.data()[c] * tc.weight.data()[d * 3 + c];
    }

    double prev = -1e30;
    for (double k : {0.0, 0.5, 1.0, 2.0, 4.0}) {
        RngStream step_rng(777, 3);  // same stream state for every k
        auto out = guided_step(zero_predictor<float>(), tc, x_t, 2, {y}, k, sched, step_rng);
        auto v = gap(out);
        double margin = u[0] * v.data()[0] + u[1] * v.data()[1];
        CHECK(margin >= prev - 1e-6);
        prev = margin;
    }
}

TEST_CASE("adapter blend endpoints and midpoint") {
    RngStream rng(13, 6);
    auto adapter = NoiseAdapter::init(2, rng);
    auto f = Tensor::randn({2, 2, 2, 2}, rng);

    // force kappa -> 1
    std::fill(adapter.fc_w.mutable_data().begin(), adapter.fc_w.mutable_data().end(), 0.f);
    adapter.fc_b.mutable_data()[0] = 40.f;
    RngStream r1(1, 2);
    auto [x_hi, kap_hi] = adapter_init(adapter, f, r1);
    CHECK(kap_hi.data()[0] == doctest::Approx(1.0));
    for (size_t i = 0; i < f.data().size(); ++i)
        CHECK(x_hi.data()[i] == doctest::Approx(f.data()[i]).epsilon(1e-6));

    // force kappa -> 0
    adapter.fc_b.mutable_data()[0] = -40.f;
    RngStream r2(1, 2);
    auto [x_lo, kap_lo] = adapter_init(adapter, f, r2);
    CHECK(kap_lo.data()[0] == doctest::Approx(0.0).epsilon(1e-6));
    RngStream r3(1, 2);
    auto eps = normal_like(f, r3);
    for (size_t i = 0; i < f.data().size(); ++i)
        CHECK(x_lo.data()[i] == doctest::Approx(eps.data()[i]).epsilon(1e-5));

    // midpoint blend checked on the primitive directly
    auto mid = blend(Tensor::from({1, 1, 1, 1}, {2.f}), Tensor::zeros({1, 1, 1, 1}),
                     Tensor::from({1}, {0.5f}));
    CHECK(mid.data()[0] == doctest::Approx(1.0));
}

TEST_CASE("kappa stays strictly inside (0,1)") {
    RngStream rng(14, 7);
    auto adapter = NoiseAdapter::init(3, rng);
    for (int i = 0; i < 10; ++i) {
        auto f = Tensor::randn({1, 4, 4, 3}, rng, 3.0);
        auto k = adapter.kappa(f);
        CHECK(k.data()[0] > 0.f);
        CHECK(k.data()[0] < 1.f);
    }
}

TEST_CASE("single-step denoising with exact stub equals the posterior reconstruction") {
    auto sched = make_schedule(1, 0.1, 0.3);
    GuidanceConfig cfg{0.0, 1};
    RngStream rng(15, 8);
    auto tc = identity_classifier();
    auto adapter = NoiseAdapter::init(2, rng);
    std::fill(adapter.fc_w.mutable_data().begin(), adapter.fc_w.mutable_data().end(), 0.f);
    adapter.fc_b.mutable_data()[0] = 40.f;  // kappa = 1, x_T = f

    auto f = Tensor::randn({1, 2, 2, 2}, rng);
    auto e0 = Tensor::randn({1, 2, 2, 2}, rng);
    auto stub = [&](const Tensor&, auto&&) { return e0; };

    RngStream chain_rng(5, 5);
    auto out = denoise_student(stub, tc, adapter, f, {0}, cfg, sched, chain_rng);

    double beta1 = sched.beta_at(1), ab1 = sched.alpha_bar_at(1), a1 = sched.alpha_at(1);
    for (size_t i = 0; i < f.data().size(); ++i) {
        double expect = (f.data()[i] - beta1 / std::sqrt(1 - ab1) * e0.data()[i]) / std::sqrt(a1);
        CHECK(out.features.data()[i] == doctest::Approx(expect).epsilon(1e-5));
    }
}

TEST_CASE("k=0 denoising chain is stream-for-stream identical to the unguided chain") {
    auto sched = make_schedule(3, 0.1, 0.3);
    GuidanceConfig cfg{0.0, 3};
    RngStream rng(16, 9);
    auto tc = identity_classifier();
    auto adapter = NoiseAdapter::init(2, rng);
    auto f = Tensor::randn({2, 2, 2, 2}, rng);

    RngStream ra(99, 4);
    auto guided = denoise_student(zero_predictor<float>(), tc, adapter, f, {0, 1}, cfg, sched, ra);

    RngStream rb(99, 4);
    auto [x, kap] = adapter_init(adapter, f.detach(), rb);
    for (int t = 3; t >= 1; --t) x = unguided_step(zero_predictor<float>(), x, t, sched, rb);
    CHECK(guided.features.data() == x.data());
}

TEST_CASE("denoise_student leaves the input untouched and checks T") {
    auto sched = make_schedule(2, 0.1, 0.3);
    RngStream rng(17, 10);
    auto tc = identity_classifier();
    auto adapter = NoiseAdapter::init(2, rng);
    auto f = Tensor::randn({1, 2, 2, 2}, rng);
    auto before = f.data();

    GuidanceConfig bad{1.0, 3};
    RngStream r(1, 1);
    CHECK_THROWS_AS(denoise_student(zero_predictor<float>(), tc, adapter, f, {0}, bad, sched, r),
                    ConfigError);

    GuidanceConfig good{1.0, 2};
    auto out = denoise_student(zero_predictor<float>(), tc, adapter, f, {0}, good, sched, r);
    CHECK(out.features.shape() == f.shape());
    CHECK(f.data() == before);
}

TEST_CASE("gradient routing: chain reaches only the adapter") {
    auto sched = make_schedule(2, 0.1, 0.3);
    GuidanceConfig cfg{1.0, 2};
    RngStream rng(18, 11);

    NoisePredictor model = NoisePredictor::init(2, rng);
    model.set_requires_grad(true);
    auto tc = identity_classifier();
    auto adapter = NoiseAdapter::init(2, rng);
    adapter.set_requires_grad(true);

    auto f = Tensor::randn({1, 2, 2, 2}, rng);
    f.set_requires_grad(true);

    RngStream r(3, 3);
    auto out = denoise_student(model.detached_view(), tc, adapter, f, {1}, cfg, sched, r);
    auto loss = mean(square(sub(out.features.requires_grad() ? out.features : out.features, f)));
    loss.backward();

    CHECK(adapter.fc_w.has_grad());            // KD objective drives the adapter
    CHECK_FALSE(model.mid_w[0].has_grad());    // predictor enters as a constant
    CHECK(f.has_grad());                       // local loss still reaches the student side

    // frozen mode: nothing reaches the adapter either
    for (auto& [n, t] : adapter.params()) t.clear_grad();
    f.clear_grad();
    RngStream r2(3, 3);
    auto frozen = denoise_student(model.detached_view(), tc, adapter, f, {1}, cfg, sched, r2,
                                  AdapterGrad::frozen);
    auto loss2 = mean(square(sub(frozen.features, f)));
    loss2.backward();
    CHECK_FALSE(adapter.fc_w.has_grad());
}
