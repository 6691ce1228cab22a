// SPDX-License-Identifier: Apache-2.0
//
// Toy feature extractors sized for CPU runs: a stack of stride-2 3x3 conv +
// relu stages, a GAP + linear classifier on top, and a per-position linear
// projector that lifts student features to the teacher depth. The
// distillation tap is the final feature map before pooling.

#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dskd/guidance.hpp"
#include "dskd/tensor.hpp"

namespace dskd {

// Parameter-free per-sample, per-channel standardization. The extractors end
// with this at the tap (and the projector output is passed through it) so the
// features entering the diffusion chain are O(1)-scale, matching the
// batch-normalized feature maps the chain's math assumes.
template <class Real>
TensorT<Real> standardize(const TensorT<Real>& x) {
    return channel_norm(x, TensorT<Real>::filled({x.dim(0), x.dim(3)}, Real(1)),
                        TensorT<Real>::zeros({x.dim(0), x.dim(3)}));
}

struct ConvNetSpec {
    int input_h = 16;
    int input_w = 16;
    int input_c = 1;
    std::vector<int> widths;  // one stride-2 stage per entry; last is the tap depth D
    int classes = 4;

    int feature_depth() const { return widths.back(); }

    int tap_h() const {
        int h = input_h;
        for (size_t i = 0; i < widths.size(); ++i) h = (h - 1) / 2 + 1;
        return h;
    }
    int tap_w() const {
        int w = input_w;
        for (size_t i = 0; i < widths.size(); ++i) w = (w - 1) / 2 + 1;
        return w;
    }

    void validate() const {
        if (widths.empty()) throw ConfigError("ConvNetSpec: needs at least one stage");
        if (classes < 2) throw ConfigError("ConvNetSpec: needs at least two classes");
        if (input_h < 1 || input_w < 1 || input_c < 1)
            throw ConfigError("ConvNetSpec: invalid input shape");
        for (int w : widths)
            if (w < 1) throw ConfigError("ConvNetSpec: stage widths must be positive");
        if (tap_h() < 2 || tap_w() < 2)
            throw ConfigError("ConvNetSpec: tap must keep spatial extent >= 2 for the diffusion "
                              "backbone, got " + std::to_string(tap_h()) + "x" + std::to_string(tap_w()));
    }
};

template <class Real>
struct ModelBundleT {
    ConvNetSpec spec;
    std::vector<TensorT<Real>> stage_w;  // [3,3,Cin,Cout] per stage
    std::vector<TensorT<Real>> stage_b;
    TensorT<Real> cls_w;  // [D, C]
    TensorT<Real> cls_b;  // [C]

    // deterministic fan-in-scaled normal init, zero biases
    static ModelBundleT build(const ConvNetSpec& spec, uint64_t seed) {
        spec.validate();
        ModelBundleT m;
        m.spec = spec;
        RngStream rng(seed, stream_tag::init);
        int cin = spec.input_c;
        for (int w : spec.widths) {
            m.stage_w.push_back(
                TensorT<Real>::randn({3, 3, cin, w}, rng, std::sqrt(2.0 / (9.0 * cin))));
            m.stage_b.push_back(TensorT<Real>::zeros({w}));
            cin = w;
        }
        int d = spec.feature_depth();
        m.cls_w = TensorT<Real>::randn({d, spec.classes}, rng, std::sqrt(1.0 / d));
        m.cls_b = TensorT<Real>::zeros({spec.classes});
        return m;
    }

    // tap features [B, tap_h, tap_w, D]; the last stage is conv-norm-relu so
    // the tap is standardized before the nonlinearity
    TensorT<Real> features(const TensorT<Real>& batch) const {
        if (batch.rank() != 4 || batch.dim(1) != spec.input_h || batch.dim(2) != spec.input_w ||
            batch.dim(3) != spec.input_c)
            throw ShapeError("extract_features: batch " + shape_str(batch.shape()) +
                             " does not match input " + std::to_string(spec.input_h) + "x" +
                             std::to_string(spec.input_w) + "x" + std::to_string(spec.input_c));
        TensorT<Real> h = batch;
        for (size_t i = 0; i < stage_w.size(); ++i) {
            h = conv2d(h, stage_w[i], stage_b[i], 2);
            if (i + 1 == stage_w.size()) h = standardize(h);
            h = relu(h);
        }
        return h;
    }

    TensorT<Real> logits_from_features(const TensorT<Real>& f) const {
        return add(matmul(gap(f), cls_w), cls_b);
    }

    TensorT<Real> logits(const TensorT<Real>& batch) const {
        return logits_from_features(features(batch));
    }

    TeacherClassifierT<Real> classifier_head() const { return {cls_w, cls_b}; }

    std::vector<std::pair<std::string, TensorT<Real>>> params(const std::string& prefix) {
        std::vector<std::pair<std::string, TensorT<Real>>> p;
        for (size_t i = 0; i < stage_w.size(); ++i) {
            p.emplace_back(prefix + "/stage" + std::to_string(i) + "/w", stage_w[i]);
            p.emplace_back(prefix + "/stage" + std::to_string(i) + "/b", stage_b[i]);
        }
        p.emplace_back(prefix + "/cls/w", cls_w);
        p.emplace_back(prefix + "/cls/b", cls_b);
        return p;
    }

    void set_requires_grad(bool rg) {
        for (auto& t : stage_w) t.set_requires_grad(rg);
        for (auto& t : stage_b) t.set_requires_grad(rg);
        cls_w.set_requires_grad(rg);
        cls_b.set_requires_grad(rg);
    }
};

using ModelBundle = ModelBundleT<float>;

// Per-position linear map from student depth to teacher depth, applied at
// every spatial site. Identity-initialized when the depths already match.
template <class Real>
struct ProjectorT {
    TensorT<Real> w;  // [D_stu, D_tea]
    TensorT<Real> b;  // [D_tea]

    static ProjectorT init(int d_stu, int d_tea, uint64_t seed) {
        ProjectorT p;
        if (d_stu == d_tea) {
            std::vector<Real> eye(static_cast<size_t>(d_stu) * d_tea, Real(0));
            for (int i = 0; i < d_stu; ++i) eye[static_cast<size_t>(i) * d_tea + i] = Real(1);
            p.w = TensorT<Real>::from({d_stu, d_tea}, std::move(eye));
        } else {
            RngStream rng(seed, stream_tag::init + 0x100);
            p.w = TensorT<Real>::randn({d_stu, d_tea}, rng, std::sqrt(1.0 / d_stu));
        }
        p.b = TensorT<Real>::zeros({d_tea});
        return p;
    }

    TensorT<Real> operator()(const TensorT<Real>& f) const {
        if (f.rank() != 4 || f.dim(3) != w.dim(0))
            throw ShapeError("projector: features " + shape_str(f.shape()) +
                             " do not match input depth " + std::to_string(w.dim(0)));
        int B = f.dim(0), H = f.dim(1), W = f.dim(2);
        // every spatial site is a row of the linear map
        auto rows = reshape(f, {B * H * W, w.dim(0)});
        auto mapped = add(matmul(rows, w), b);
        return reshape(mapped, {B, H, W, w.dim(1)});
    }

    std::vector<std::pair<std::string, TensorT<Real>>> params() {
        return {{"projector/w", w}, {"projector/b", b}};
    }

    void set_requires_grad(bool rg) {
        w.set_requires_grad(rg);
        b.set_requires_grad(rg);
    }
};

using Projector = ProjectorT<float>;

}  // namespace dskd
