// SPDX-License-Identifier: Apache-2.0
//
// Teacher-classifier guidance for the reverse chain. Each step shifts the
// reconstructed Gaussian mean by k * sigma^2 * g, where g is the gradient of
// the teacher's class log-probability with respect to the features. For a
// GAP + linear classifier g has a closed form, so no graph machinery is
// involved; the gradient is evaluated at x_t before the posterior mean is
// formed.

#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dskd/diffusion.hpp"
#include "dskd/tensor.hpp"

namespace dskd {

// Frozen GAP + linear head: logits = W^T GAP(x) + b.
template <class Real>
struct TeacherClassifierT {
    TensorT<Real> weight;  // [D, C]
    TensorT<Real> bias;    // [C]

    int feature_depth() const { return weight.dim(0); }
    int class_count() const { return weight.dim(1); }

    TensorT<Real> logits(const TensorT<Real>& x) const {
        if (x.rank() != 4 || x.dim(3) != feature_depth())
            throw ShapeError("classifier_logits: features " + shape_str(x.shape()) +
                             " do not match depth " + std::to_string(feature_depth()));
        return add(matmul(gap(x), weight), bias);
    }

    // d log p(y | x) / dx in closed form:
    //   g[h,w,d] = (1 / (H*W)) * (W[d,y] - sum_c p_c W[d,c]),  p = softmax(logits)
    TensorT<Real> log_prob_grad(const TensorT<Real>& x, const std::vector<int>& y) const {
        int B = x.dim(0), H = x.dim(1), W = x.dim(2), D = x.dim(3);
        int C = class_count();
        for (int label : y)
            if (label < 0 || label >= C)
                throw std::out_of_range("classifier_grad: label " + std::to_string(label) +
                                        " outside 0.." + std::to_string(C - 1));
        if (static_cast<int>(y.size()) != B)
            throw ShapeError("classifier_grad: " + std::to_string(y.size()) + " labels for batch " +
                             std::to_string(B));
        auto p = softmax(logits(x.detach()));
        const auto& wv = weight.data();
        double inv_hw = 1.0 / (H * W);
        std::vector<Real> g(x.data().size());
        std::vector<Real> dir(static_cast<size_t>(D));
        for (int b = 0; b < B; ++b) {
            for (int d = 0; d < D; ++d) {
                double acc = wv[static_cast<size_t>(d) * C + y[static_cast<size_t>(b)]];
                for (int c = 0; c < C; ++c)
                    acc -= static_cast<double>(p.data()[static_cast<size_t>(b) * C + c]) *
                           wv[static_cast<size_t>(d) * C + c];
                dir[static_cast<size_t>(d)] = static_cast<Real>(acc * inv_hw);
            }
            for (int o = 0; o < H * W; ++o)
                for (int d = 0; d < D; ++d)
                    g[(static_cast<size_t>(b) * H * W + o) * D + d] = dir[static_cast<size_t>(d)];
        }
        return TensorT<Real>::from(x.shape(), std::move(g));
    }

    // mean over the batch of log p(y_b | x_b)
    double mean_log_prob(const TensorT<Real>& x, const std::vector<int>& y) const {
        auto lp = log_softmax(logits(x.detach()));
        double acc = 0;
        int C = class_count();
        for (size_t b = 0; b < y.size(); ++b) acc += lp.data()[b * static_cast<size_t>(C) + static_cast<size_t>(y[b])];
        return acc / static_cast<double>(y.size());
    }
};

using TeacherClassifier = TeacherClassifierT<float>;

struct GuidanceConfig {
    double k = 1.0;  // gradient scale; 0 disables guidance
    int steps = 2;   // denoising steps T, must equal the schedule length

    void validate() const {
        if (k < 0) throw ConfigError("guidance: k must be nonnegative");
        if (steps < 1) throw ConfigError("guidance: need at least one denoising step");
    }
};

// One guided reverse step: (mu + k sigma^2 g) + sigma z with g evaluated at
// x_t. With k = 0 this is structurally the unguided step, so the two are
// bit-identical stream for stream.
template <class Real, class Pred>
TensorT<Real> guided_step(Pred&& model, const TeacherClassifierT<Real>& teacher,
                          const TensorT<Real>& x_t, int t, const std::vector<int>& y, double k,
                          const NoiseSchedule& sched, RngStream& rng) {
    if (k < 0) throw ConfigError("guided_step: k must be nonnegative");
    if (k == 0.0) return unguided_step(model, x_t, t, sched, rng);
    auto g = teacher.log_prob_grad(x_t, y);
    auto [mu, sigma2] = posterior_params(model, x_t, t, sched);
    if (sigma2 == 0.0) return mu;
    auto shifted = add(mu, scale(g, k * sigma2));
    return add(shifted, scale(normal_like(shifted, rng), std::sqrt(sigma2)));
}

// Lightweight conv block regressing the per-sample mixing coefficient kappa:
// 3x3 conv -> relu -> GAP -> linear -> sigmoid, output strictly inside (0,1).
template <class Real>
struct NoiseAdapterT {
    static constexpr int kHidden = 8;

    TensorT<Real> conv_w, conv_b;  // [3,3,D,kHidden], [kHidden]
    TensorT<Real> fc_w, fc_b;      // [kHidden,1], [1]

    static NoiseAdapterT init(int depth, RngStream& rng) {
        NoiseAdapterT a;
        a.conv_w = TensorT<Real>::randn({3, 3, depth, kHidden}, rng, std::sqrt(2.0 / (9.0 * depth)));
        a.conv_b = TensorT<Real>::zeros({kHidden});
        a.fc_w = TensorT<Real>::randn({kHidden, 1}, rng, std::sqrt(1.0 / kHidden));
        a.fc_b = TensorT<Real>::zeros({1});
        return a;
    }

    // kappa per sample, shape [B, 1]
    TensorT<Real> kappa(const TensorT<Real>& f) const {
        auto h = gap(relu(conv2d(f, conv_w, conv_b, 1)));
        return sigmoid(add(matmul(h, fc_w), fc_b));
    }

    std::vector<std::pair<std::string, TensorT<Real>>> params() {
        return {{"adapter/conv/w", conv_w},
                {"adapter/conv/b", conv_b},
                {"adapter/fc/w", fc_w},
                {"adapter/fc/b", fc_b}};
    }

    void set_requires_grad(bool rg) {
        for (auto& [name, t] : params()) t.set_requires_grad(rg);
    }
};

using NoiseAdapter = NoiseAdapterT<float>;

// How the adapter is trained: `through_blend` routes the KD gradient through
// the blended chain into the adapter; `frozen` detaches everything.
enum class AdapterGrad { through_blend, frozen };

// x_T = kappa f + (1 - kappa) eps, with kappa from the adapter's forward pass.
template <class Real>
std::pair<TensorT<Real>, TensorT<Real>> adapter_init(const NoiseAdapterT<Real>& adapter,
                                                     const TensorT<Real>& f_stu, RngStream& rng) {
    auto kap = adapter.kappa(f_stu);
    auto eps = normal_like(f_stu, rng);
    return {blend(f_stu, eps, kap), kap};
}

template <class Real>
struct DenoiseResult {
    TensorT<Real> features;  // denoised f-hat, shape of f_stu
    double mean_kappa = 0;
};

// Full teacher-guided denoising chain: adapter blend at t = T, then guided
// steps down to t = 1. The returned features carry gradient only to the
// adapter parameters (mode permitting); the student features and the noise
// predictor enter as constants.
template <class Real, class Pred>
DenoiseResult<Real> denoise_student(Pred&& model, const TeacherClassifierT<Real>& teacher,
                                    const NoiseAdapterT<Real>& adapter, const TensorT<Real>& f_stu,
                                    const std::vector<int>& y, const GuidanceConfig& cfg,
                                    const NoiseSchedule& sched, RngStream& rng,
                                    AdapterGrad mode = AdapterGrad::through_blend) {
    cfg.validate();
    if (cfg.steps != sched.steps)
        throw ConfigError("denoise_student: cfg.T " + std::to_string(cfg.steps) +
                          " != schedule length " + std::to_string(sched.steps));
    auto f_const = f_stu.detach();
    auto [x, kap] = adapter_init(adapter, f_const, rng);
    if (mode == AdapterGrad::frozen) x = x.detach();
    for (int t = sched.steps; t >= 1; --t) x = guided_step(model, teacher, x, t, y, cfg.k, sched, rng);
    double mk = 0;
    for (Real v : kap.data()) mk += static_cast<double>(v);
    return {x, mk / static_cast<double>(kap.numel())};
}

}  // namespace dskd
