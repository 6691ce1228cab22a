// SPDX-License-Identifier: Apache-2.0
//
// Training orchestration: teacher pretraining, the joint distillation step
// (diffusion loss on teacher features, teacher-guided denoising of student
// features, local + global + task + KD losses, one SGD step on the combined
// objective), evaluation, checkpointing, metrics, and the ablation harness.
//
// Determinism contract: given a config and its seeds, every metric value and
// parameter byte is reproducible. All randomness flows through four named
// streams (init, data order, diffusion noise, guidance sampling) whose states
// are serialized into checkpoints, so a resumed run continues the exact
// trajectory of the uninterrupted one.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "dskd/config.hpp"
#include "dskd/data.hpp"
#include "dskd/diffusion.hpp"
#include "dskd/guidance.hpp"
#include "dskd/losses.hpp"
#include "dskd/networks.hpp"

namespace dskd {

// ---------------------------------------------------------------------------
// optimizer

template <class Real>
struct SgdMomentum {
    double lr = 0.05;
    double momentum = 0.9;
    // Global gradient-norm clip. The denoising chain of a young predictor can
    // emit occasional large targets; one unclipped MSE spike is enough to kill
    // the student, so updates are bounded. 0 disables.
    double clip_norm = 5.0;
    std::vector<TensorT<Real>> params;
    std::vector<std::vector<Real>> velocity;

    void attach(const std::vector<std::pair<std::string, TensorT<Real>>>& registry) {
        params.clear();
        velocity.clear();
        for (const auto& [name, t] : registry) {
            params.push_back(t);
            velocity.emplace_back(t.data().size(), Real(0));
        }
    }

    void zero_grad() {
        for (auto& p : params) p.clear_grad();
    }

    void step() {
        double rescale = 1.0;
        if (clip_norm > 0) {
            double sq = 0;
            for (auto& p : params)
                if (p.has_grad())
                    for (Real g : p.grad()) sq += static_cast<double>(g) * g;
            double norm = std::sqrt(sq);
            if (norm > clip_norm) rescale = clip_norm / norm;
        }
        for (size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i].mutable_data();
            auto& v = velocity[i];
            const bool has_g = params[i].has_grad();
            for (size_t j = 0; j < p.size(); ++j) {
                Real g = has_g ? static_cast<Real>(rescale * params[i].grad()[j]) : Real(0);
                v[j] = static_cast<Real>(momentum * v[j] + g);
                p[j] -= static_cast<Real>(lr * v[j]);
            }
        }
    }
};

// ---------------------------------------------------------------------------
// metrics

struct MetricsRecord {
    int epoch = 0;
    double task_loss = 0;
    double kd_loss = 0;
    double dskd_local = 0;
    double dskd_global = 0;
    double diff_loss = 0;
    double total_loss = 0;
    double train_acc = 0;
    double test_acc = 0;
    double mean_kappa = 0;
    double wall_seconds = 0;

    ordered_json to_json() const {
        return ordered_json{{"epoch", epoch},
                            {"task_loss", task_loss},
                            {"kd_loss", kd_loss},
                            {"dskd_local", dskd_local},
                            {"dskd_global", dskd_global},
                            {"diff_loss", diff_loss},
                            {"total_loss", total_loss},
                            {"train_acc", train_acc},
                            {"test_acc", test_acc},
                            {"mean_kappa", mean_kappa},
                            {"wall_seconds", wall_seconds}};
    }

    static MetricsRecord from_json(const ordered_json& j) {
        MetricsRecord r;
        r.epoch = j.at("epoch").get<int>();
        r.task_loss = j.at("task_loss").get<double>();
        r.kd_loss = j.at("kd_loss").get<double>();
        r.dskd_local = j.at("dskd_local").get<double>();
        r.dskd_global = j.at("dskd_global").get<double>();
        r.diff_loss = j.at("diff_loss").get<double>();
        r.total_loss = j.at("total_loss").get<double>();
        r.train_acc = j.at("train_acc").get<double>();
        r.test_acc = j.at("test_acc").get<double>();
        r.mean_kappa = j.at("mean_kappa").get<double>();
        r.wall_seconds = j.at("wall_seconds").get<double>();
        return r;
    }
};

inline std::vector<MetricsRecord> read_metrics(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("metrics: cannot open '" + path + "'");
    std::vector<MetricsRecord> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        out.push_back(MetricsRecord::from_json(ordered_json::parse(line)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// evaluation

inline std::pair<Tensor, std::vector<int>> take_batch(const Dataset& ds,
                                                      const std::vector<int>& order, int begin,
                                                      int end) {
    int h = ds.images.dim(1), w = ds.images.dim(2), c = ds.images.dim(3);
    int count = end - begin;
    int64_t per = static_cast<int64_t>(h) * w * c;
    std::vector<float> imgs(static_cast<size_t>(count) * per);
    std::vector<int> labels(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        int src = order[static_cast<size_t>(begin + i)];
        std::memcpy(imgs.data() + static_cast<size_t>(i) * per,
                    ds.images.data().data() + static_cast<size_t>(src) * per,
                    sizeof(float) * static_cast<size_t>(per));
        labels[static_cast<size_t>(i)] = ds.labels[static_cast<size_t>(src)];
    }
    return {Tensor::from({count, h, w, c}, std::move(imgs)), std::move(labels)};
}

// top-1 accuracy of the bundle's own classifier over the dataset
template <class Real>
double evaluate(const ModelBundleT<Real>& bundle, const Dataset& ds, int batch = 64) {
    if (ds.size() == 0) throw ConfigError("evaluate: dataset is empty");
    ds.validate();
    std::vector<int> order(static_cast<size_t>(ds.size()));
    for (int i = 0; i < ds.size(); ++i) order[static_cast<size_t>(i)] = i;
    int correct = 0;
    for (int begin = 0; begin < ds.size(); begin += batch) {
        int end = std::min(ds.size(), begin + batch);
        auto [images, labels] = take_batch(ds, order, begin, end);
        auto logits = bundle.logits(images.template cast<Real>());
        int C = logits.dim(1);
        for (int b = 0; b < end - begin; ++b) {
            int best = 0;
            for (int c = 1; c < C; ++c)
                if (logits.data()[static_cast<size_t>(b * C + c)] >
                    logits.data()[static_cast<size_t>(b * C + best)])
                    best = c;
            if (best == labels[static_cast<size_t>(b)]) ++correct;
        }
    }
    return static_cast<double>(correct) / ds.size();
}

// ---------------------------------------------------------------------------
// checkpoint helpers

namespace detail {

// u64 -> two f32 slots, raw bits; the container IO never does float
// arithmetic so the payload survives exactly
inline void push_u64_bits(std::vector<float>& out, uint64_t v) {
    uint32_t lo = static_cast<uint32_t>(v & 0xffffffffu);
    uint32_t hi = static_cast<uint32_t>(v >> 32);
    float a, b;
    std::memcpy(&a, &lo, 4);
    std::memcpy(&b, &hi, 4);
    out.push_back(a);
    out.push_back(b);
}

inline uint64_t pull_u64_bits(const std::vector<float>& in, size_t at) {
    uint32_t lo, hi;
    std::memcpy(&lo, &in[at], 4);
    std::memcpy(&hi, &in[at + 1], 4);
    return (static_cast<uint64_t>(hi) << 32) | lo;
}

inline Tensor rng_state_tensor(const RngStream& s) {
    std::vector<float> v;
    auto st = s.save_state();
    push_u64_bits(v, st[0]);
    push_u64_bits(v, st[1]);
    return Tensor::from({4}, std::move(v));
}

inline void restore_rng_state(RngStream& s, const Tensor& t) {
    if (t.numel() != 4) throw IoError("checkpoint: malformed rng state");
    s.restore_state({pull_u64_bits(t.data(), 0), pull_u64_bits(t.data(), 2)});
}

}  // namespace detail

// ---------------------------------------------------------------------------
// teacher pretraining

struct TeacherResult {
    ModelBundle bundle;
    double test_acc = 0;
};

inline std::string teacher_ckpt_path(const RunConfig& cfg) {
    return cfg.teacher_checkpoint.empty()
               ? (std::filesystem::path(cfg.output_dir) / "teacher.dskd").string()
               : cfg.teacher_checkpoint;
}

inline Dataset full_train_set(const RunConfig& cfg) {
    return gen_blobs(cfg.dataset.classes, cfg.dataset.per_class_train, cfg.dataset.image_size,
                     cfg.dataset.image_size, cfg.dataset.noise_sd, cfg.seeds.data, "train");
}

inline Dataset test_set(const RunConfig& cfg) {
    return gen_blobs(cfg.dataset.classes, cfg.dataset.per_class_test, cfg.dataset.image_size,
                     cfg.dataset.image_size, cfg.dataset.noise_sd, cfg.seeds.data + 0x5eed,
                     "test");
}

inline void save_teacher(const std::string& path, ModelBundle& teacher, double acc) {
    NamedTensors named;
    for (auto& [name, t] : teacher.params("teacher")) named.emplace_back("param/" + name, t);
    named.emplace_back("meta/test_acc", Tensor::scalar(static_cast<float>(acc)));
    std::vector<float> widths(teacher.spec.widths.begin(), teacher.spec.widths.end());
    named.emplace_back("meta/widths", Tensor::from({static_cast<int>(widths.size())}, widths));
    write_container(path, named);
}

inline ModelBundle load_teacher(const std::string& path, const ConvNetSpec& spec) {
    auto named = read_container(path);
    auto teacher = ModelBundle::build(spec, 0);
    for (auto& [want, dst] : teacher.params("teacher")) {
        bool found = false;
        for (auto& [name, t] : named)
            if (name == "param/" + want) {
                if (t.shape() != dst.shape())
                    throw IoError("teacher checkpoint '" + path + "': shape mismatch for " + want);
                dst.mutable_data() = t.data();
                found = true;
            }
        if (!found) throw IoError("teacher checkpoint '" + path + "': missing tensor " + want);
    }
    return teacher;
}

// Task-loss-only training of the teacher bundle; persisted as a checkpoint.
inline TeacherResult pretrain_teacher(const RunConfig& cfg, bool quiet = true) {
    cfg.validate();
    auto train_ds = full_train_set(cfg);
    auto test_ds = test_set(cfg);

    auto teacher = ModelBundle::build(cfg.teacher_spec(), cfg.seeds.model);
    teacher.set_requires_grad(true);
    SgdMomentum<float> opt;
    opt.lr = cfg.optimizer.learning_rate;
    opt.momentum = cfg.optimizer.momentum;
    opt.attach(teacher.params("teacher"));

    RngStream order_rng(cfg.seeds.data, stream_tag::data_order + 0x7e4);
    std::vector<int> order(static_cast<size_t>(train_ds.size()));
    for (int i = 0; i < train_ds.size(); ++i) order[static_cast<size_t>(i)] = i;

    for (int epoch = 1; epoch <= cfg.teacher_epochs(); ++epoch) {
        for (size_t i = order.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(order_rng.uniform_int(static_cast<int>(i)));
            std::swap(order[i - 1], order[j]);
        }
        for (int begin = 0; begin < train_ds.size(); begin += cfg.optimizer.batch_size) {
            int end = std::min(train_ds.size(), begin + cfg.optimizer.batch_size);
            auto [images, labels] = take_batch(train_ds, order, begin, end);
            opt.zero_grad();
            auto loss = task_loss(teacher.logits(images), labels);
            loss.backward();
            opt.step();
        }
        if (!quiet) {
            std::fprintf(stderr, "teacher epoch %d/%d\n", epoch, cfg.teacher_epochs());
        }
    }
    teacher.set_requires_grad(false);
    double acc = evaluate(teacher, test_ds);
    return {std::move(teacher), acc};
}

// ---------------------------------------------------------------------------
// train state and the joint distillation step

struct StepLosses {
    float task = 0, kd = 0, local = 0, global = 0, dskd = 0, diff = 0, total = 0;
    double mean_kappa = 0;
};

struct TrainState {
    RunConfig cfg;
    NoiseSchedule sched;
    GuidanceConfig guidance;

    ModelBundle teacher;
    TeacherClassifier teacher_head;
    ModelBundle student;
    Projector projector;
    NoiseAdapter adapter;
    NoisePredictor predictor;
    LshHead head;

    SgdMomentum<float> opt;
    RngStream data_rng, diff_rng, samp_rng;
    int epochs_done = 0;

    std::vector<std::pair<std::string, Tensor>> registry;

    static TrainState create(const RunConfig& cfg, ModelBundle teacher) {
        cfg.validate();
        TrainState s;
        s.cfg = cfg;
        s.sched = make_schedule(cfg.schedule.T, cfg.schedule.beta_min, cfg.schedule.beta_max);
        s.guidance = GuidanceConfig{cfg.guidance_k, cfg.schedule.T};
        s.teacher = std::move(teacher);
        s.teacher.set_requires_grad(false);
        s.teacher_head = s.teacher.classifier_head();

        int d_tea = s.teacher.spec.feature_depth();
        s.student = ModelBundle::build(cfg.student_spec(), cfg.seeds.model + 1);
        RngStream pred_rng(cfg.seeds.model + 2, stream_tag::init);
        s.predictor = NoisePredictor::init(d_tea, pred_rng);
        RngStream adapter_rng(cfg.seeds.model + 3, stream_tag::init);
        s.adapter = NoiseAdapter::init(d_tea, adapter_rng);
        s.projector = Projector::init(cfg.student_spec().feature_depth(), d_tea, cfg.seeds.model + 4);
        s.head = LshHead::make(d_tea, cfg.losses.M, cfg.seeds.lsh,
                               lsh_bias_from_string(cfg.losses.bias_mode));

        s.student.set_requires_grad(true);
        s.projector.set_requires_grad(true);
        s.adapter.set_requires_grad(true);
        s.predictor.set_requires_grad(true);

        for (auto& p : s.student.params("student")) s.registry.push_back(p);
        for (auto& p : s.projector.params()) s.registry.push_back(p);
        for (auto& p : s.adapter.params()) s.registry.push_back(p);
        for (auto& p : s.predictor.params()) s.registry.push_back(p);

        s.opt.lr = cfg.optimizer.learning_rate;
        s.opt.momentum = cfg.optimizer.momentum;
        s.opt.attach(s.registry);

        s.data_rng = RngStream(cfg.seeds.data, stream_tag::data_order);
        s.diff_rng = RngStream(cfg.seeds.sampling, stream_tag::diffusion_noise);
        s.samp_rng = RngStream(cfg.seeds.sampling, stream_tag::guidance_sampling);
        return s;
    }
};

namespace detail {
template <class F>
auto loss_term(const char* term, F&& fn) {
    try {
        return fn();
    } catch (const NumericError& e) {
        throw NumericError("train_step: non-finite " + std::string(term) + ": " + e.what());
    }
}
}  // namespace detail

// The projected student features entering the chain and the distillation
// losses: the projector output passes through the same norm-relu shaping as
// an extractor tap, so its scale matches the teacher feature distribution.
inline Tensor projected_student_features(const TrainState& s, const Tensor& raw_tap) {
    return relu(standardize(s.projector(raw_tap)));
}

// One joint update: diffusion training on this batch's teacher
// features, teacher-guided denoising of the (projected) student features,
// all four loss terms, and a single SGD step on the sum.
inline StepLosses train_step(TrainState& s, const Tensor& images, const std::vector<int>& labels) {
    // (1) features; the teacher is frozen and builds no graph
    auto f_tea = s.teacher.features(images);
    auto raw_stu = s.student.features(images);
    auto f_stu = projected_student_features(s, raw_stu);

    // (2) diffusion training on teacher features
    auto diff = detail::loss_term("diff_loss", [&] {
        return diffusion_loss(s.predictor, f_tea, s.sched, s.diff_rng);
    });

    // (3) teacher-guided denoising; predictor enters as a constant, only the
    // adapter can receive gradient through the blend
    auto denoised = denoise_student(s.predictor.detached_view(), s.teacher_head, s.adapter, f_stu,
                                    labels, s.guidance, s.sched, s.samp_rng,
                                    s.cfg.adapter_grad_mode());

    // (4) distillation and task losses
    Tensor local, global;
    auto dskd = detail::loss_term("dskd_loss", [&] {
        return dskd_loss(f_stu, denoised.features, s.head, s.cfg.losses.gamma, &local, &global);
    });
    auto stu_logits = s.student.logits_from_features(raw_stu);
    auto tea_logits = s.teacher.logits_from_features(f_tea);
    auto task = detail::loss_term("task_loss", [&] { return task_loss(stu_logits, labels); });
    auto kd = detail::loss_term("kd_loss", [&] {
        return kd_loss(stu_logits, tea_logits, s.cfg.losses.tau);
    });

    // (5) combined objective, one optimizer step
    auto total = total_loss(task, dskd, diff, kd, s.cfg.losses.alpha);
    s.opt.zero_grad();
    total.backward();
    s.opt.step();

    StepLosses out;
    out.task = task.item();
    out.kd = kd.item();
    out.local = local.item();
    out.global = global.item();
    out.dskd = dskd.item();
    out.diff = diff.item();
    out.total = total.item();
    out.mean_kappa = denoised.mean_kappa;
    return out;
}

// ---------------------------------------------------------------------------
// checkpointing

inline void save_checkpoint(const std::string& path, TrainState& s) {
    NamedTensors named;
    for (auto& [name, t] : s.registry) named.emplace_back("param/" + name, t);
    for (size_t i = 0; i < s.registry.size(); ++i)
        named.emplace_back("opt/" + s.registry[i].first,
                           Tensor::from({static_cast<int>(s.opt.velocity[i].size())},
                                        s.opt.velocity[i]));
    named.emplace_back("meta/epoch", Tensor::scalar(static_cast<float>(s.epochs_done)));
    named.emplace_back("meta/rng/data", detail::rng_state_tensor(s.data_rng));
    named.emplace_back("meta/rng/diffusion", detail::rng_state_tensor(s.diff_rng));
    named.emplace_back("meta/rng/sampling", detail::rng_state_tensor(s.samp_rng));
    std::vector<float> sw(s.cfg.student_widths.begin(), s.cfg.student_widths.end());
    named.emplace_back("meta/arch/student_widths", Tensor::from({static_cast<int>(sw.size())}, sw));
    named.emplace_back("meta/arch/input",
                       Tensor::from({3}, {static_cast<float>(s.cfg.dataset.image_size),
                                          static_cast<float>(s.cfg.dataset.image_size), 1.f}));
    named.emplace_back("meta/arch/classes", Tensor::scalar(static_cast<float>(s.cfg.dataset.classes)));
    write_container(path, named);
}

inline void load_checkpoint(const std::string& path, TrainState& s) {
    auto named = read_container(path);
    auto find = [&](const std::string& name) -> const Tensor& {
        for (auto& [n, t] : named)
            if (n == name) return t;
        throw IoError("checkpoint '" + path + "': missing tensor '" + name + "'");
    };
    for (auto& [name, t] : s.registry) {
        const auto& src = find("param/" + name);
        if (src.shape() != t.shape())
            throw IoError("checkpoint '" + path + "': shape mismatch for '" + name + "'");
        t.mutable_data() = src.data();
    }
    for (size_t i = 0; i < s.registry.size(); ++i) {
        const auto& src = find("opt/" + s.registry[i].first);
        if (src.data().size() != s.opt.velocity[i].size())
            throw IoError("checkpoint '" + path + "': optimizer state mismatch");
        s.opt.velocity[i] = src.data();
    }
    s.epochs_done = static_cast<int>(find("meta/epoch").item());
    detail::restore_rng_state(s.data_rng, find("meta/rng/data"));
    detail::restore_rng_state(s.diff_rng, find("meta/rng/diffusion"));
    detail::restore_rng_state(s.samp_rng, find("meta/rng/sampling"));
}

// ---------------------------------------------------------------------------
// full training run

struct TrainResult {
    double final_test_acc = 0;
    double teacher_acc = 0;
    std::string metrics_path;
    std::string checkpoint_path;
    MetricsRecord last;
};

inline constexpr double kTeacherAccFloor = 0.95;

// Distillation train set: class-balanced split first, then label corruption.
inline Dataset distill_train_set(const RunConfig& cfg) {
    auto ds = full_train_set(cfg);
    if (cfg.dataset.few_shot_fraction < 1.0)
        ds = few_shot_split(ds, cfg.dataset.few_shot_fraction, cfg.seeds.data + 0xf5);
    if (cfg.dataset.label_noise_ratio > 0.0)
        ds = corrupt_labels(ds, cfg.dataset.label_noise_ratio, cfg.seeds.data + 0x17);
    return ds;
}

inline TrainResult train(const RunConfig& cfg, const std::string& resume = "",
                         bool quiet = true) {
    cfg.validate();
    std::filesystem::create_directories(cfg.output_dir);
    {
        std::ofstream echo(std::filesystem::path(cfg.output_dir) / "config.json");
        echo << cfg.to_json().dump(2) << "\n";
    }

    // teacher: load if present, otherwise pretrain and persist
    auto tpath = teacher_ckpt_path(cfg);
    ModelBundle teacher;
    double teacher_acc = 0;
    if (std::filesystem::exists(tpath)) {
        teacher = load_teacher(tpath, cfg.teacher_spec());
        teacher_acc = evaluate(teacher, test_set(cfg));
    } else {
        auto r = pretrain_teacher(cfg, quiet);
        teacher = std::move(r.bundle);
        teacher_acc = r.test_acc;
        save_teacher(tpath, teacher, teacher_acc);
    }
    if (teacher_acc < kTeacherAccFloor)
        throw ConfigError("train: teacher test accuracy " + std::to_string(teacher_acc) +
                          " is below the " + std::to_string(kTeacherAccFloor) +
                          " precondition; adjust teacher_epochs or the dataset");

    auto train_ds = distill_train_set(cfg);
    auto test_ds = test_set(cfg);
    write_dataset((std::filesystem::path(cfg.output_dir) / "train_set.dskd").string(), train_ds);
    write_dataset((std::filesystem::path(cfg.output_dir) / "test_set.dskd").string(), test_ds);

    auto state = TrainState::create(cfg, std::move(teacher));
    auto metrics_path = (std::filesystem::path(cfg.output_dir) / "metrics.jsonl").string();
    if (!resume.empty()) {
        load_checkpoint(resume, state);
    } else {
        std::ofstream truncate(metrics_path, std::ios::trunc);
    }

    // optional diffusion warmup: L_Diff alone on teacher features
    if (resume.empty() && cfg.diffusion_warmup_epochs > 0) {
        std::vector<int> order(static_cast<size_t>(train_ds.size()));
        for (int i = 0; i < train_ds.size(); ++i) order[static_cast<size_t>(i)] = i;
        for (int epoch = 0; epoch < cfg.diffusion_warmup_epochs; ++epoch) {
            for (int begin = 0; begin < train_ds.size(); begin += cfg.optimizer.batch_size) {
                int end = std::min(train_ds.size(), begin + cfg.optimizer.batch_size);
                auto [images, labels] = take_batch(train_ds, order, begin, end);
                auto f_tea = state.teacher.features(images);
                state.opt.zero_grad();
                auto loss = diffusion_loss(state.predictor, f_tea, state.sched, state.diff_rng);
                loss.backward();
                state.opt.step();
            }
        }
    }

    std::vector<int> order(static_cast<size_t>(train_ds.size()));
    TrainResult result;
    result.teacher_acc = teacher_acc;
    result.metrics_path = metrics_path;

    std::ofstream metrics(metrics_path, std::ios::app);
    if (!metrics) throw IoError("train: cannot open metrics file '" + metrics_path + "'");

    for (int epoch = state.epochs_done + 1; epoch <= cfg.optimizer.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        for (int i = 0; i < train_ds.size(); ++i) order[static_cast<size_t>(i)] = i;
        for (size_t i = order.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(state.data_rng.uniform_int(static_cast<int>(i)));
            std::swap(order[i - 1], order[j]);
        }

        MetricsRecord rec;
        rec.epoch = epoch;
        int steps = 0;
        for (int begin = 0; begin < train_ds.size(); begin += cfg.optimizer.batch_size) {
            int end = std::min(train_ds.size(), begin + cfg.optimizer.batch_size);
            auto [images, labels] = take_batch(train_ds, order, begin, end);
            auto losses = train_step(state, images, labels);
            rec.task_loss += losses.task;
            rec.kd_loss += losses.kd;
            rec.dskd_local += losses.local;
            rec.dskd_global += losses.global;
            rec.diff_loss += losses.diff;
            rec.total_loss += losses.total;
            rec.mean_kappa += losses.mean_kappa;
            ++steps;
        }
        rec.task_loss /= steps;
        rec.kd_loss /= steps;
        rec.dskd_local /= steps;
        rec.dskd_global /= steps;
        rec.diff_loss /= steps;
        rec.total_loss /= steps;
        rec.mean_kappa /= steps;
        rec.train_acc = evaluate(state.student, train_ds);
        rec.test_acc = evaluate(state.student, test_ds);
        rec.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        state.epochs_done = epoch;
        metrics << rec.to_json().dump() << "\n";
        metrics.flush();
        if (!quiet)
            std::fprintf(stderr, "epoch %d: total %.4f test_acc %.4f\n", epoch, rec.total_loss,
                         rec.test_acc);

        if (epoch % cfg.checkpoint_every == 0 && epoch != cfg.optimizer.epochs) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "checkpoint_%04d.dskd", epoch);
            save_checkpoint((std::filesystem::path(cfg.output_dir) / buf).string(), state);
        }
        result.last = rec;
    }

    if (result.last.epoch == 0) {
        // resumed past the configured horizon: no epochs ran, report as-is
        result.last.epoch = state.epochs_done;
        result.last.train_acc = evaluate(state.student, train_ds);
        result.last.test_acc = evaluate(state.student, test_ds);
    }
    result.final_test_acc = result.last.test_acc;
    result.checkpoint_path =
        (std::filesystem::path(cfg.output_dir) / "checkpoint_final.dskd").string();
    save_checkpoint(result.checkpoint_path, state);
    return result;
}

// student bundle reconstruction for `eval --ckpt`
inline ModelBundle load_student_from_checkpoint(const std::string& path) {
    auto named = read_container(path);
    auto find = [&](const std::string& name) -> const Tensor& {
        for (auto& [n, t] : named)
            if (n == name) return t;
        throw IoError("checkpoint '" + path + "': missing tensor '" + name + "'");
    };
    const auto& widths_t = find("meta/arch/student_widths");
    const auto& input_t = find("meta/arch/input");
    ConvNetSpec spec;
    spec.input_h = static_cast<int>(input_t.data()[0]);
    spec.input_w = static_cast<int>(input_t.data()[1]);
    spec.input_c = static_cast<int>(input_t.data()[2]);
    spec.widths.clear();
    for (float w : widths_t.data()) spec.widths.push_back(static_cast<int>(w));
    spec.classes = static_cast<int>(find("meta/arch/classes").item());
    auto student = ModelBundle::build(spec, 0);
    for (auto& [name, t] : student.params("student")) {
        const auto& src = find("param/" + name);
        if (src.shape() != t.shape())
            throw IoError("checkpoint '" + path + "': shape mismatch for '" + name + "'");
        t.mutable_data() = src.data();
    }
    return student;
}

// ---------------------------------------------------------------------------
// ablation harness

// One full train + evaluate per value, all non-axis seeds shared; teacher is
// pretrained once on the full train split and reused by every row.
inline std::string run_ablation(const RunConfig& base, const std::string& axis,
                                const std::vector<double>& values, bool quiet = true) {
    base.validate();
    if (values.empty()) throw ConfigError("ablate: no values given");
    std::filesystem::create_directories(base.output_dir);

    auto teacher_path = (std::filesystem::path(base.output_dir) / "teacher.dskd").string();
    if (!std::filesystem::exists(teacher_path)) {
        auto r = pretrain_teacher(base, quiet);
        save_teacher(teacher_path, r.bundle, r.test_acc);
    }

    auto apply = [&](RunConfig cfg, double v) {
        if (axis == "T")
            cfg.schedule.T = static_cast<int>(v);
        else if (axis == "k")
            cfg.guidance_k = v;
        else if (axis == "M")
            cfg.losses.M = static_cast<int>(v);
        else if (axis == "alpha")
            cfg.losses.alpha = v;
        else if (axis == "fraction")
            cfg.dataset.few_shot_fraction = v;
        else if (axis == "noise_ratio")
            cfg.dataset.label_noise_ratio = v;
        else
            throw ConfigError("ablate: unknown axis '" + axis +
                              "' (expected T, k, M, alpha, fraction, or noise_ratio)");
        return cfg;
    };

    auto csv_path = (std::filesystem::path(base.output_dir) / ("ablation_" + axis + ".csv")).string();
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw IoError("ablate: cannot open '" + csv_path + "'");
    csv << "axis,value,test_acc,train_acc,task_loss,kd_loss,dskd_local,dskd_global,diff_loss,"
           "total_loss,mean_kappa\n";

    for (double v : values) {
        char vbuf[32];
        std::snprintf(vbuf, sizeof vbuf, "%g", v);
        auto cfg = apply(base, v);
        cfg.output_dir =
            (std::filesystem::path(base.output_dir) / (axis + std::string("_") + vbuf)).string();
        cfg.teacher_checkpoint = teacher_path;
        auto r = train(cfg, "", quiet);
        csv << axis << ',' << vbuf << ',' << r.last.test_acc << ',' << r.last.train_acc << ','
            << r.last.task_loss << ',' << r.last.kd_loss << ',' << r.last.dskd_local << ','
            << r.last.dskd_global << ',' << r.last.diff_loss << ',' << r.last.total_loss << ','
            << r.last.mean_kappa << "\n";
    }
    return csv_path;
}

}  // namespace dskd
