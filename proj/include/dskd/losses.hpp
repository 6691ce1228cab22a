// SPDX-License-Identifier: Apache-2.0
//
// Distillation losses. Local alignment is a per-element MSE over the full
// feature maps. Global alignment hashes the pooled embeddings with a frozen
// random projection: the denoised feature yields binary target codes, the
// original feature yields sigmoid soft codes, and the two are matched with a
// binary cross-entropy. Codes carry no gradient, so the global loss trains
// the original-feature side only.

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dskd/rng.hpp"
#include "dskd/tensor.hpp"

namespace dskd {

enum class LshBias { gaussian, zero };

inline LshBias lsh_bias_from_string(const std::string& s) {
    if (s == "gaussian") return LshBias::gaussian;
    if (s == "zero") return LshBias::zero;
    throw ConfigError("bias_mode must be 'gaussian' or 'zero', got '" + s + "'");
}

// M random hyperplanes, frozen at construction. Reconstruction from
// (seed, D, M, bias_mode) is bit-identical, so checkpoints only record the
// seed.
template <class Real>
struct LshHeadT {
    int hash_count = 0;
    uint64_t seed = 0;
    LshBias bias_mode = LshBias::gaussian;
    TensorT<Real> projection;  // [D, M]
    TensorT<Real> bias;        // [M]

    static LshHeadT make(int depth, int hash_count, uint64_t seed, LshBias bias_mode) {
        if (depth < 1 || hash_count < 1)
            throw ConfigError("LshHead: depth and hash count must be positive");
        LshHeadT h;
        h.hash_count = hash_count;
        h.seed = seed;
        h.bias_mode = bias_mode;
        RngStream rng(seed, stream_tag::lsh);
        h.projection = TensorT<Real>::randn({depth, hash_count}, rng);
        h.bias = bias_mode == LshBias::gaussian
                     ? TensorT<Real>::randn({hash_count}, rng)
                     : TensorT<Real>::zeros({hash_count});
        return h;
    }

    int depth() const { return projection.dim(0); }

    TensorT<Real> preactivation(const TensorT<Real>& v) const {
        if (v.rank() != 2 || v.dim(1) != depth())
            throw ShapeError("LshHead: embeddings must be [B," + std::to_string(depth()) +
                             "], got " + shape_str(v.shape()));
        return add(matmul(v, projection), bias);
    }
};

using LshHead = LshHeadT<float>;

// rho = sigmoid(W^T v + b), in (0,1) elementwise; differentiable in v.
template <class Real>
TensorT<Real> soft_codes(const TensorT<Real>& v, const LshHeadT<Real>& head) {
    return sigmoid(head.preactivation(v));
}

// delta = [W^T v + b > 0] as {0,1}; a tie maps to 0 and nothing propagates
// gradient through the codes.
template <class Real>
TensorT<Real> hash_codes(const TensorT<Real>& v_hat, const LshHeadT<Real>& head) {
    auto pre = head.preactivation(v_hat.detach());
    std::vector<Real> bits(pre.data().size());
    for (size_t i = 0; i < bits.size(); ++i) bits[i] = pre.data()[i] > Real(0) ? Real(1) : Real(0);
    return TensorT<Real>::from(pre.shape(), std::move(bits));
}

// Per-element mean of the squared difference; the caller controls which side
// carries gradient.
template <class Real>
TensorT<Real> local_loss(const TensorT<Real>& f, const TensorT<Real>& f_hat) {
    if (f.shape() != f_hat.shape())
        throw ShapeError("local_loss: shapes differ, " + shape_str(f.shape()) + " vs " +
                         shape_str(f_hat.shape()));
    return mean(square(sub(f, f_hat)));
}

inline constexpr double kProbClamp = 1e-7;

// Binary cross-entropy between target codes from v_hat and soft codes from v,
// averaged over hashes and batch. Probabilities are clamped to
// [1e-7, 1 - 1e-7] before the logs, so the loss is always finite.
template <class Real>
TensorT<Real> global_loss(const TensorT<Real>& v, const TensorT<Real>& v_hat,
                          const LshHeadT<Real>& head) {
    auto delta = hash_codes(v_hat, head);
    auto rho = clamp(soft_codes(v, head), kProbClamp, 1.0 - kProbClamp);
    auto one_minus_delta = sub(TensorT<Real>::filled(delta.shape(), Real(1)), delta);
    auto one_minus_rho = sub(TensorT<Real>::filled(rho.shape(), Real(1)), rho);
    auto per_hash = add(mul(delta, log_op(rho)), mul(one_minus_delta, log_op(one_minus_rho)));
    return scale(mean(per_hash), -1.0);
}

// L_DSKD = L_Local + gamma * L_Global, with the global term computed on the
// pooled embeddings of both maps.
template <class Real>
TensorT<Real> dskd_loss(const TensorT<Real>& f, const TensorT<Real>& f_hat,
                        const LshHeadT<Real>& head, double gamma,
                        TensorT<Real>* local_out = nullptr, TensorT<Real>* global_out = nullptr) {
    auto local = local_loss(f, f_hat);
    auto global = global_loss(gap(f), gap(f_hat), head);
    if (local_out) *local_out = local;
    if (global_out) *global_out = global;
    return add(local, scale(global, gamma));
}

// Hinton KD: tau^2 * KL(softmax(teacher/tau) || softmax(student/tau)),
// averaged over the batch. The teacher side is a constant.
template <class Real>
TensorT<Real> kd_loss(const TensorT<Real>& student_logits, const TensorT<Real>& teacher_logits,
                      double tau) {
    if (tau <= 0) throw ConfigError("kd_loss: tau must be positive");
    if (student_logits.shape() != teacher_logits.shape())
        throw ShapeError("kd_loss: logit shapes differ, " + shape_str(student_logits.shape()) +
                         " vs " + shape_str(teacher_logits.shape()));
    auto p = softmax(scale(teacher_logits.detach(), 1.0 / tau));
    auto log_p = log_softmax(scale(teacher_logits.detach(), 1.0 / tau));
    auto log_q = log_softmax(scale(student_logits, 1.0 / tau));
    auto kl_rows = sum_rows(mul(sub(log_p, log_q), p));
    return scale(mean(kl_rows), tau * tau);
}

// Cross-entropy against integer labels, averaged over the batch.
template <class Real>
TensorT<Real> task_loss(const TensorT<Real>& student_logits, const std::vector<int>& labels) {
    return scale(mean(pick(log_softmax(student_logits), labels)), -1.0);
}

// L_Train = L_Task + alpha * L_DSKD + L_Diff + L_KD. Exact summation order is
// part of the contract; the trainer reports components straight from the same
// scalars.
template <class Real>
TensorT<Real> total_loss(const TensorT<Real>& task, const TensorT<Real>& dskd,
                         const TensorT<Real>& diff, const TensorT<Real>& kd, double alpha) {
    return add(add(add(task, scale(dskd, alpha)), diff), kd);
}

struct LossWeights {
    double alpha = 1.0;  // DSKD weight
    double gamma = 1.0;  // global-term weight inside DSKD
    double tau = 4.0;    // KD temperature

    void validate() const {
        if (alpha < 0) throw ConfigError("losses: alpha must be nonnegative");
        if (gamma < 0) throw ConfigError("losses: gamma must be nonnegative");
        if (tau <= 0) throw ConfigError("losses: tau must be positive");
    }
};

}  // namespace dskd
