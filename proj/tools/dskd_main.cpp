// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: teacher pretraining, distillation training with
// checkpoint resume, checkpoint evaluation, ablation sweeps, and the
// verification oracle suites.

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dskd/verify.hpp"

namespace {

std::vector<double> parse_values_csv(const std::string& csv) {
    std::vector<double> out;
    size_t pos = 0;
    while (pos < csv.size()) {
        size_t comma = csv.find(',', pos);
        if (comma == std::string::npos) comma = csv.size();
        auto item = csv.substr(pos, comma - pos);
        if (!item.empty()) {
            size_t used = 0;
            double v = std::stod(item, &used);
            if (used != item.size())
                throw dskd::ConfigError("ablate: cannot parse value '" + item + "'");
            out.push_back(v);
        }
        pos = comma + 1;
    }
    if (out.empty()) throw dskd::ConfigError("ablate: --values is empty");
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"teacher-guided diffusion self-distillation at desk scale"};
    app.require_subcommand(1);

    std::string config_path, resume_path, ckpt_path, data_path, axis, values_csv;
    std::string suite = "all", report_path = "verify_report.jsonl", work_dir = "verify_runs";
    uint64_t verify_seed = 2024;
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "print per-epoch progress");

    auto* pre = app.add_subcommand("pretrain-teacher", "train and persist the frozen teacher");
    pre->add_option("--config", config_path, "run config JSON")->required();

    auto* tr = app.add_subcommand("train", "run the distillation training loop");
    tr->add_option("--config", config_path, "run config JSON")->required();
    tr->add_option("--resume", resume_path, "checkpoint to continue from");

    auto* ev = app.add_subcommand("eval", "evaluate a student checkpoint on a dataset file");
    ev->add_option("--ckpt", ckpt_path, "checkpoint container")->required();
    ev->add_option("--data", data_path, "dataset container")->required();

    auto* ab = app.add_subcommand("ablate", "train once per value along one axis");
    ab->add_option("--config", config_path, "run config JSON")->required();
    ab->add_option("--axis", axis, "one of T, k, M, alpha, fraction, noise_ratio")->required();
    ab->add_option("--values", values_csv, "comma-separated values")->required();

    auto* ve = app.add_subcommand("verify", "run the numerical oracle suites");
    ve->add_option("--suite", suite, "all | grad | diffusion | guidance | lsh");
    ve->add_option("--seed", verify_seed, "oracle seed");
    ve->add_option("--report", report_path, "JSON-lines report path");
    ve->add_option("--work-dir", work_dir, "scratch directory for e2e runs");

    CLI11_PARSE(app, argc, argv);

    try {
        if (pre->parsed()) {
            auto cfg = dskd::load_config(config_path);
            std::filesystem::create_directories(cfg.output_dir);
            auto r = dskd::pretrain_teacher(cfg, !verbose);
            auto path = dskd::teacher_ckpt_path(cfg);
            dskd::save_teacher(path, r.bundle, r.test_acc);
            std::printf("teacher test accuracy %.4f, checkpoint %s\n", r.test_acc, path.c_str());
            return 0;
        }
        if (tr->parsed()) {
            auto cfg = dskd::load_config(config_path);
            auto r = dskd::train(cfg, resume_path, !verbose);
            std::printf("teacher accuracy %.4f\n", r.teacher_acc);
            std::printf("final student test accuracy %.4f\n", r.final_test_acc);
            std::printf("metrics %s\n", r.metrics_path.c_str());
            std::printf("checkpoint %s\n", r.checkpoint_path.c_str());
            return 0;
        }
        if (ev->parsed()) {
            auto student = dskd::load_student_from_checkpoint(ckpt_path);
            auto ds = dskd::read_dataset(data_path);
            std::printf("accuracy %.4f over %d items\n", dskd::evaluate(student, ds), ds.size());
            return 0;
        }
        if (ab->parsed()) {
            auto cfg = dskd::load_config(config_path);
            auto csv = dskd::run_ablation(cfg, axis, parse_values_csv(values_csv), !verbose);
            std::printf("results table %s\n", csv.c_str());
            return 0;
        }
        if (ve->parsed()) {
            dskd::VerifyOptions opt;
            opt.suite = suite;
            opt.seed = verify_seed;
            opt.report_path = report_path;
            opt.work_dir = work_dir;
            opt.quiet = !verbose;
            auto reports = dskd::run_verify(opt);
            int failures = dskd::print_verify_table(reports);
            std::printf("report %s\n", report_path.c_str());
            return failures == 0 ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
