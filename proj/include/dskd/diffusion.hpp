// SPDX-License-Identifier: Apache-2.0
//
// Diffusion chain: noise schedule, closed-form forward corruption, the
// noise-prediction training loss, and the unguided reverse step. The reverse
// mean is reconstructed from the epsilon prediction with the standard
// posterior formula; the variance is the fixed beta-tilde of the chain, so
// the final step (t = 1) is deterministic.

#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dskd/rng.hpp"
#include "dskd/tensor.hpp"

namespace dskd {

struct NoiseSchedule {
    int steps = 0;                  // chain length, equals the denoising step count T
    std::vector<double> beta;       // beta[t-1] for t = 1..T, nondecreasing in (0,1)
    std::vector<double> alpha;      // 1 - beta
    std::vector<double> alpha_bar;  // running products of alpha

    double beta_at(int t) const { return beta[check(t)]; }
    double alpha_at(int t) const { return alpha[check(t)]; }
    double alpha_bar_at(int t) const { return alpha_bar[check(t)]; }

private:
    size_t check(int t) const {
        if (t < 1 || t > steps)
            throw std::out_of_range("NoiseSchedule: step " + std::to_string(t) +
                                    " outside 1.." + std::to_string(steps));
        return static_cast<size_t>(t - 1);
    }
};

inline NoiseSchedule make_schedule(int steps, double beta_min, double beta_max) {
    if (steps < 1) throw ConfigError("make_schedule: need at least one step");
    if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0))
        throw ConfigError("make_schedule: betas must satisfy 0 < beta_min <= beta_max < 1");
    NoiseSchedule s;
    s.steps = steps;
    s.beta.resize(static_cast<size_t>(steps));
    s.alpha.resize(static_cast<size_t>(steps));
    s.alpha_bar.resize(static_cast<size_t>(steps));
    double run = 1.0;
    for (int i = 0; i < steps; ++i) {
        double b = steps == 1 ? beta_min
                              : beta_min + (beta_max - beta_min) * i / (steps - 1);
        s.beta[static_cast<size_t>(i)] = b;
        s.alpha[static_cast<size_t>(i)] = 1.0 - b;
        run *= 1.0 - b;
        s.alpha_bar[static_cast<size_t>(i)] = run;
    }
    return s;
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <class Real>
TensorT<Real> q_sample(const TensorT<Real>& x0, int t, const TensorT<Real>& eps,
                       const NoiseSchedule& sched) {
    if (x0.shape() != eps.shape())
        throw ShapeError("q_sample: x0 " + shape_str(x0.shape()) + " vs eps " +
                         shape_str(eps.shape()));
    double ab = sched.alpha_bar_at(t);
    return add(scale(x0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
}

// Transition variance: beta-tilde_t = ((1 - abar_{t-1}) / (1 - abar_t)) * beta_t,
// zero at t = 1 so the last reverse step is deterministic.
inline double compute_sigma2(int t, const NoiseSchedule& sched) {
    if (t == 1) {
        (void)sched.alpha_bar_at(1);
        return 0.0;
    }
    double ab_prev = sched.alpha_bar_at(t - 1);
    double ab = sched.alpha_bar_at(t);
    return (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev);
}

// Reverse-step mean reconstructed from the epsilon prediction:
//   mu = (x_t - (beta_t / sqrt(1 - abar_t)) eps_hat) / sqrt(alpha_t)
template <class Real, class Pred>
std::pair<TensorT<Real>, double> posterior_params(Pred&& model, const TensorT<Real>& x_t, int t,
                                                  const NoiseSchedule& sched) {
    double b = sched.beta_at(t);
    double ab = sched.alpha_bar_at(t);
    double a = sched.alpha_at(t);
    TensorT<Real> eps_hat = model(x_t, t);
    if (eps_hat.shape() != x_t.shape())
        throw ShapeError("posterior_params: prediction " + shape_str(eps_hat.shape()) +
                         " vs input " + shape_str(x_t.shape()));
    auto mu = scale(sub(x_t, scale(eps_hat, b / std::sqrt(1.0 - ab))), 1.0 / std::sqrt(a));
    return {mu, compute_sigma2(t, sched)};
}

// Fills a tensor-shaped buffer with standard normal draws.
template <class Real>
TensorT<Real> normal_like(const TensorT<Real>& ref, RngStream& rng) {
    std::vector<Real> v(ref.data().size());
    for (auto& x : v) x = static_cast<Real>(rng.normal());
    return TensorT<Real>::from(ref.shape(), std::move(v));
}

// One unguided reverse step: mu + sigma * z, deterministic at t = 1.
template <class Real, class Pred>
TensorT<Real> unguided_step(Pred&& model, const TensorT<Real>& x_t, int t,
                            const NoiseSchedule& sched, RngStream& rng) {
    auto [mu, sigma2] = posterior_params(model, x_t, t, sched);
    if (sigma2 == 0.0) return mu;
    return add(mu, scale(normal_like(mu, rng), std::sqrt(sigma2)));
}

// A drawn diffusion training batch: per-sample timestep, noise, and the
// corrupted input. Kept separate from the loss so tests can plug oracle
// predictions directly.
template <class Real>
struct DiffusionBatch {
    std::vector<int> ts;    // timestep per sample, uniform in 1..T
    TensorT<Real> eps;      // injected noise
    TensorT<Real> x_t;      // corrupted input
};

template <class Real>
DiffusionBatch<Real> make_diffusion_batch(const TensorT<Real>& x0, const NoiseSchedule& sched,
                                          RngStream& rng) {
    if (x0.rank() < 1 || x0.dim(0) < 1) throw std::logic_error("make_diffusion_batch: empty batch");
    int B = x0.dim(0);
    std::vector<int> ts(static_cast<size_t>(B));
    for (auto& t : ts) t = 1 + rng.uniform_int(sched.steps);
    TensorT<Real> eps = normal_like(x0, rng);

    // per-sample mixing of the closed form, since t varies within the batch
    int64_t per = x0.numel() / B;
    std::vector<Real> xt(x0.data().size());
    for (int b = 0; b < B; ++b) {
        double ab = sched.alpha_bar_at(ts[static_cast<size_t>(b)]);
        double s0 = std::sqrt(ab), s1 = std::sqrt(1.0 - ab);
        for (int64_t o = 0; o < per; ++o) {
            size_t i = static_cast<size_t>(b) * per + o;
            xt[i] = static_cast<Real>(s0 * x0.data()[i] + s1 * eps.data()[i]);
        }
    }
    return {std::move(ts), std::move(eps), TensorT<Real>::from(x0.shape(), std::move(xt))};
}

// Per-element mean of ||eps - eps_hat||^2 given a prediction for the batch.
template <class Real>
TensorT<Real> diffusion_loss_on(const DiffusionBatch<Real>& batch, const TensorT<Real>& eps_hat) {
    if (eps_hat.shape() != batch.eps.shape())
        throw ShapeError("diffusion_loss: prediction " + shape_str(eps_hat.shape()) + " vs noise " +
                         shape_str(batch.eps.shape()));
    return mean(square(sub(eps_hat, batch.eps)));
}

// Draws (t, eps), corrupts x0, runs the predictor, returns the scalar loss.
// The model is any callable (x_t, ts) -> eps_hat.
template <class Real, class Pred>
TensorT<Real> diffusion_loss(Pred&& model, const TensorT<Real>& x0, const NoiseSchedule& sched,
                             RngStream& rng) {
    auto batch = make_diffusion_batch(x0, sched, rng);
    TensorT<Real> eps_hat = model(batch.x_t, batch.ts);
    return diffusion_loss_on(batch, eps_hat);
}

// ---------------------------------------------------------------------------
// Noise predictor backbone: stride-2 conv down, two residual middle blocks
// with timestep-conditioned scale/shift on the normalization and a gated
// residual branch, stride-2 deconv up, and a residual output head so the
// prediction is x_t + delta.

template <class Real>
struct LinearT {
    TensorT<Real> w;  // [in, out]
    TensorT<Real> b;  // [out]

    TensorT<Real> operator()(const TensorT<Real>& x) const { return add(matmul(x, w), b); }
};

template <class Real>
struct NoisePredictorT {
    static constexpr int kEmbedDim = 32;

    int depth = 0;        // feature channels D; backbone width equals D
    int cond_hidden = 0;

    LinearT<Real> trunk;                      // embedding -> hidden
    // per middle block: scale / shift for the normalization, gate for the branch
    std::array<LinearT<Real>, 2> scale_head;
    std::array<LinearT<Real>, 2> shift_head;
    std::array<LinearT<Real>, 2> gate_head;
    std::array<TensorT<Real>, 2> mid_w;       // 3x3 conv per middle block
    std::array<TensorT<Real>, 2> mid_b;
    TensorT<Real> down_w, down_b;             // 3x3 stride-2 conv
    TensorT<Real> up_w, up_b;                 // 3x3 stride-2 deconv
    TensorT<Real> head_w, head_b;             // 3x3 conv producing delta

    static NoisePredictorT init(int depth, RngStream& rng) {
        NoisePredictorT m;
        m.depth = depth;
        m.cond_hidden = 2 * kEmbedDim;
        auto lin = [&](int in, int out, double bias_init) {
            LinearT<Real> l;
            l.w = TensorT<Real>::randn({in, out}, rng, std::sqrt(2.0 / in));
            l.b = TensorT<Real>::filled({out}, static_cast<Real>(bias_init));
            return l;
        };
        m.trunk = lin(kEmbedDim, m.cond_hidden, 0.0);
        for (int i = 0; i < 2; ++i) {
            m.scale_head[static_cast<size_t>(i)] = lin(m.cond_hidden, depth, 1.0);
            m.shift_head[static_cast<size_t>(i)] = lin(m.cond_hidden, depth, 0.0);
            m.gate_head[static_cast<size_t>(i)] = lin(m.cond_hidden, depth, 0.0);
            m.mid_w[static_cast<size_t>(i)] =
                TensorT<Real>::randn({3, 3, depth, depth}, rng, std::sqrt(2.0 / (9.0 * depth)));
            m.mid_b[static_cast<size_t>(i)] = TensorT<Real>::zeros({depth});
        }
        m.down_w = TensorT<Real>::randn({3, 3, depth, depth}, rng, std::sqrt(2.0 / (9.0 * depth)));
        m.down_b = TensorT<Real>::zeros({depth});
        m.up_w = TensorT<Real>::randn({3, 3, depth, depth}, rng, std::sqrt(2.0 / (9.0 * depth)));
        m.up_b = TensorT<Real>::zeros({depth});
        m.head_w = TensorT<Real>::randn({3, 3, depth, depth}, rng, std::sqrt(1.0 / (9.0 * depth)));
        m.head_b = TensorT<Real>::zeros({depth});
        return m;
    }

    // 1-based integer step index through the sinusoidal map; chains are short
    // so no normalization of t is applied.
    static TensorT<Real> embed(const std::vector<int>& ts) {
        int B = static_cast<int>(ts.size());
        std::vector<Real> e(static_cast<size_t>(B) * kEmbedDim);
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < kEmbedDim / 2; ++i) {
                double freq = std::pow(10000.0, -2.0 * i / kEmbedDim);
                double arg = ts[static_cast<size_t>(b)] * freq;
                e[static_cast<size_t>(b) * kEmbedDim + 2 * i] = static_cast<Real>(std::sin(arg));
                e[static_cast<size_t>(b) * kEmbedDim + 2 * i + 1] = static_cast<Real>(std::cos(arg));
            }
        return TensorT<Real>::from({B, kEmbedDim}, std::move(e));
    }

    TensorT<Real> forward(const TensorT<Real>& x, const std::vector<int>& ts) const {
        if (x.rank() != 4 || x.dim(3) != depth)
            throw ShapeError("NoisePredictor: input must be [B,H,W," + std::to_string(depth) +
                             "], got " + shape_str(x.shape()));
        if (x.dim(1) % 2 != 0 || x.dim(2) % 2 != 0)
            throw ShapeError("NoisePredictor: spatial dims must be even for the down/up pair, got " +
                             shape_str(x.shape()));
        auto cond = relu(trunk(embed(ts)));
        auto h = relu(conv2d(x, down_w, down_b, 2));
        for (size_t i = 0; i < 2; ++i) {
            auto s = scale_head[i](cond);
            auto sh = shift_head[i](cond);
            auto g = gate_head[i](cond);
            auto branch = conv2d(relu(channel_norm(h, s, sh)), mid_w[i], mid_b[i], 1);
            h = add(h, mul(branch, g));
        }
        h = relu(deconv2d(h, up_w, up_b));
        auto delta = conv2d(h, head_w, head_b, 1);
        return add(x, delta);
    }

    TensorT<Real> operator()(const TensorT<Real>& x, const std::vector<int>& ts) const {
        return forward(x, ts);
    }
    TensorT<Real> operator()(const TensorT<Real>& x, int t) const {
        return forward(x, std::vector<int>(static_cast<size_t>(x.dim(0)), t));
    }

    // named pointers to the parameter members of this instance
    std::vector<std::pair<std::string, TensorT<Real>*>> param_refs() {
        std::vector<std::pair<std::string, TensorT<Real>*>> p;
        p.emplace_back("predictor/trunk/w", &trunk.w);
        p.emplace_back("predictor/trunk/b", &trunk.b);
        for (size_t i = 0; i < 2; ++i) {
            auto tag = std::to_string(i);
            p.emplace_back("predictor/scale" + tag + "/w", &scale_head[i].w);
            p.emplace_back("predictor/scale" + tag + "/b", &scale_head[i].b);
            p.emplace_back("predictor/shift" + tag + "/w", &shift_head[i].w);
            p.emplace_back("predictor/shift" + tag + "/b", &shift_head[i].b);
            p.emplace_back("predictor/gate" + tag + "/w", &gate_head[i].w);
            p.emplace_back("predictor/gate" + tag + "/b", &gate_head[i].b);
            p.emplace_back("predictor/mid" + tag + "/w", &mid_w[i]);
            p.emplace_back("predictor/mid" + tag + "/b", &mid_b[i]);
        }
        p.emplace_back("predictor/down/w", &down_w);
        p.emplace_back("predictor/down/b", &down_b);
        p.emplace_back("predictor/up/w", &up_w);
        p.emplace_back("predictor/up/b", &up_b);
        p.emplace_back("predictor/head/w", &head_w);
        p.emplace_back("predictor/head/b", &head_b);
        return p;
    }

    std::vector<std::pair<std::string, TensorT<Real>>> params() {
        std::vector<std::pair<std::string, TensorT<Real>>> p;
        for (auto& [name, t] : param_refs()) p.emplace_back(name, *t);
        return p;
    }

    void set_requires_grad(bool rg) {
        for (auto& [name, t] : param_refs()) t->set_requires_grad(rg);
    }

    // Same weights viewed as constants; used when sampling must not route
    // gradients into the predictor.
    NoisePredictorT detached_view() const {
        NoisePredictorT m = *this;
        for (auto& [name, t] : m.param_refs()) *t = t->detach();
        return m;
    }
};

using NoisePredictor = NoisePredictorT<float>;

}  // namespace dskd
