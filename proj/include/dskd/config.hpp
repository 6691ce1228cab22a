// SPDX-License-Identifier: Apache-2.0
//
// Run configuration. The on-disk form is JSON with nested keys matching the
// field names exactly; unknown keys anywhere are hard errors, and the fully
// resolved config is echoed into the run directory before any work starts.

#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dskd/guidance.hpp"
#include "dskd/losses.hpp"
#include "dskd/networks.hpp"

namespace dskd {

using ordered_json = nlohmann::ordered_json;

struct DatasetConfig {
    int classes = 4;
    int per_class_train = 250;
    int per_class_test = 250;
    int image_size = 16;
    double noise_sd = 0.1;
    double few_shot_fraction = 1.0;   // class-balanced subsample of the train split
    double label_noise_ratio = 0.0;   // fraction of train labels rewritten
};

struct ScheduleConfig {
    int T = 2;
    double beta_min = 0.1;
    double beta_max = 0.3;
};

struct LossConfig {
    double alpha = 1.0;
    double gamma = 1.0;
    double tau = 4.0;
    std::string bias_mode = "gaussian";
    int M = 256;
};

struct OptimizerConfig {
    double learning_rate = 0.05;
    double momentum = 0.9;
    int epochs = 40;
    int batch_size = 32;
    int teacher_epochs = 0;  // 0: use `epochs` for teacher pretraining too
};

struct SeedConfig {
    uint64_t model = 1;
    uint64_t data = 2;
    uint64_t lsh = 3;
    uint64_t sampling = 4;
};

struct RunConfig {
    DatasetConfig dataset;
    std::vector<int> teacher_widths{16, 32};
    std::vector<int> student_widths{8, 16};
    ScheduleConfig schedule;
    double guidance_k = 1.0;
    LossConfig losses;
    OptimizerConfig optimizer;
    SeedConfig seeds;
    std::string adapter_grad = "through_blend";
    std::string output_dir = "runs/default";
    std::string teacher_checkpoint;  // empty: <output_dir>/teacher.dskd
    int checkpoint_every = 10;
    int diffusion_warmup_epochs = 0;

    ConvNetSpec teacher_spec() const {
        return {dataset.image_size, dataset.image_size, 1, teacher_widths, dataset.classes};
    }
    ConvNetSpec student_spec() const {
        return {dataset.image_size, dataset.image_size, 1, student_widths, dataset.classes};
    }

    AdapterGrad adapter_grad_mode() const {
        if (adapter_grad == "through_blend") return AdapterGrad::through_blend;
        if (adapter_grad == "frozen") return AdapterGrad::frozen;
        throw ConfigError("adapter_grad must be 'through_blend' or 'frozen', got '" +
                          adapter_grad + "'");
    }

    int teacher_epochs() const {
        return optimizer.teacher_epochs > 0 ? optimizer.teacher_epochs : optimizer.epochs;
    }

    void validate() const {
        teacher_spec().validate();
        student_spec().validate();
        if (dataset.per_class_train < 1 || dataset.per_class_test < 1)
            throw ConfigError("dataset: per-class counts must be positive");
        if (dataset.noise_sd < 0) throw ConfigError("dataset: noise_sd must be nonnegative");
        if (!(dataset.few_shot_fraction > 0) || dataset.few_shot_fraction > 1)
            throw ConfigError("dataset: few_shot_fraction must be in (0, 1]");
        if (dataset.label_noise_ratio < 0 || dataset.label_noise_ratio >= 1)
            throw ConfigError("dataset: label_noise_ratio must be in [0, 1)");
        if (schedule.T < 1) throw ConfigError("schedule: T must be at least 1");
        if (!(schedule.beta_min > 0) || !(schedule.beta_min <= schedule.beta_max) ||
            !(schedule.beta_max < 1))
            throw ConfigError("schedule: need 0 < beta_min <= beta_max < 1");
        if (guidance_k < 0) throw ConfigError("guidance: k must be nonnegative");
        LossWeights{losses.alpha, losses.gamma, losses.tau}.validate();
        lsh_bias_from_string(losses.bias_mode);
        if (losses.M < 1) throw ConfigError("losses: M must be positive");
        if (optimizer.learning_rate < 0) throw ConfigError("optimizer: learning_rate must be nonnegative");
        if (optimizer.momentum < 0 || optimizer.momentum >= 1)
            throw ConfigError("optimizer: momentum must be in [0, 1)");
        if (optimizer.epochs < 1) throw ConfigError("optimizer: epochs must be positive");
        if (optimizer.batch_size < 1) throw ConfigError("optimizer: batch_size must be positive");
        if (optimizer.teacher_epochs < 0) throw ConfigError("optimizer: teacher_epochs must be nonnegative");
        if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be positive");
        if (diffusion_warmup_epochs < 0) throw ConfigError("diffusion_warmup_epochs must be nonnegative");
        adapter_grad_mode();
        if (output_dir.empty()) throw ConfigError("output_dir must be set");
    }

    ordered_json to_json() const {
        ordered_json j;
        j["dataset"] = {{"classes", dataset.classes},
                        {"per_class_train", dataset.per_class_train},
                        {"per_class_test", dataset.per_class_test},
                        {"image_size", dataset.image_size},
                        {"noise_sd", dataset.noise_sd},
                        {"few_shot_fraction", dataset.few_shot_fraction},
                        {"label_noise_ratio", dataset.label_noise_ratio}};
        j["teacher"] = {{"widths", teacher_widths}};
        j["student"] = {{"widths", student_widths}};
        j["schedule"] = {{"T", schedule.T}, {"beta_min", schedule.beta_min}, {"beta_max", schedule.beta_max}};
        j["guidance"] = {{"k", guidance_k}};
        j["losses"] = {{"alpha", losses.alpha},
                       {"gamma", losses.gamma},
                       {"tau", losses.tau},
                       {"bias_mode", losses.bias_mode},
                       {"M", losses.M}};
        j["optimizer"] = {{"learning_rate", optimizer.learning_rate},
                          {"momentum", optimizer.momentum},
                          {"epochs", optimizer.epochs},
                          {"batch_size", optimizer.batch_size},
                          {"teacher_epochs", optimizer.teacher_epochs}};
        j["seeds"] = {{"model", seeds.model}, {"data", seeds.data}, {"lsh", seeds.lsh}, {"sampling", seeds.sampling}};
        j["adapter_grad"] = adapter_grad;
        j["output_dir"] = output_dir;
        j["teacher_checkpoint"] = teacher_checkpoint;
        j["checkpoint_every"] = checkpoint_every;
        j["diffusion_warmup_epochs"] = diffusion_warmup_epochs;
        return j;
    }
};

namespace detail {

inline void reject_unknown_keys(const ordered_json& obj, const std::string& where,
                                std::initializer_list<const char*> known) {
    for (const auto& [key, value] : obj.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok) throw ConfigError("config: unknown key '" + key + "' in " + where);
    }
}

template <class T>
void read_field(const ordered_json& obj, const char* key, T& out) {
    if (obj.contains(key)) obj.at(key).get_to(out);
}

}  // namespace detail

inline RunConfig parse_config(const ordered_json& j) {
    RunConfig cfg;
    detail::reject_unknown_keys(
        j, "the top level",
        {"dataset", "teacher", "student", "schedule", "guidance", "losses", "optimizer", "seeds",
         "adapter_grad", "output_dir", "teacher_checkpoint", "checkpoint_every",
         "diffusion_warmup_epochs"});
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        detail::reject_unknown_keys(d, "dataset",
                                    {"classes", "per_class_train", "per_class_test", "image_size",
                                     "noise_sd", "few_shot_fraction", "label_noise_ratio"});
        detail::read_field(d, "classes", cfg.dataset.classes);
        detail::read_field(d, "per_class_train", cfg.dataset.per_class_train);
        detail::read_field(d, "per_class_test", cfg.dataset.per_class_test);
        detail::read_field(d, "image_size", cfg.dataset.image_size);
        detail::read_field(d, "noise_sd", cfg.dataset.noise_sd);
        detail::read_field(d, "few_shot_fraction", cfg.dataset.few_shot_fraction);
        detail::read_field(d, "label_noise_ratio", cfg.dataset.label_noise_ratio);
    }
    if (j.contains("teacher")) {
        detail::reject_unknown_keys(j.at("teacher"), "teacher", {"widths"});
        detail::read_field(j.at("teacher"), "widths", cfg.teacher_widths);
    }
    if (j.contains("student")) {
        detail::reject_unknown_keys(j.at("student"), "student", {"widths"});
        detail::read_field(j.at("student"), "widths", cfg.student_widths);
    }
    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        detail::reject_unknown_keys(s, "schedule", {"T", "beta_min", "beta_max"});
        detail::read_field(s, "T", cfg.schedule.T);
        detail::read_field(s, "beta_min", cfg.schedule.beta_min);
        detail::read_field(s, "beta_max", cfg.schedule.beta_max);
    }
    if (j.contains("guidance")) {
        detail::reject_unknown_keys(j.at("guidance"), "guidance", {"k"});
        detail::read_field(j.at("guidance"), "k", cfg.guidance_k);
    }
    if (j.contains("losses")) {
        const auto& l = j.at("losses");
        detail::reject_unknown_keys(l, "losses", {"alpha", "gamma", "tau", "bias_mode", "M"});
        detail::read_field(l, "alpha", cfg.losses.alpha);
        detail::read_field(l, "gamma", cfg.losses.gamma);
        detail::read_field(l, "tau", cfg.losses.tau);
        detail::read_field(l, "bias_mode", cfg.losses.bias_mode);
        detail::read_field(l, "M", cfg.losses.M);
    }
    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        detail::reject_unknown_keys(
            o, "optimizer", {"learning_rate", "momentum", "epochs", "batch_size", "teacher_epochs"});
        detail::read_field(o, "learning_rate", cfg.optimizer.learning_rate);
        detail::read_field(o, "momentum", cfg.optimizer.momentum);
        detail::read_field(o, "epochs", cfg.optimizer.epochs);
        detail::read_field(o, "batch_size", cfg.optimizer.batch_size);
        detail::read_field(o, "teacher_epochs", cfg.optimizer.teacher_epochs);
    }
    if (j.contains("seeds")) {
        const auto& s = j.at("seeds");
        detail::reject_unknown_keys(s, "seeds", {"model", "data", "lsh", "sampling"});
        detail::read_field(s, "model", cfg.seeds.model);
        detail::read_field(s, "data", cfg.seeds.data);
        detail::read_field(s, "lsh", cfg.seeds.lsh);
        detail::read_field(s, "sampling", cfg.seeds.sampling);
    }
    detail::read_field(j, "adapter_grad", cfg.adapter_grad);
    detail::read_field(j, "output_dir", cfg.output_dir);
    detail::read_field(j, "teacher_checkpoint", cfg.teacher_checkpoint);
    detail::read_field(j, "checkpoint_every", cfg.checkpoint_every);
    detail::read_field(j, "diffusion_warmup_epochs", cfg.diffusion_warmup_epochs);
    cfg.validate();
    return cfg;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot open '" + path + "'");
    ordered_json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw ConfigError("config '" + path + "': " + e.what());
    }
    return parse_config(j);
}

}  // namespace dskd
