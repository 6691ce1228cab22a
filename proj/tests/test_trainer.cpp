// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "dskd/verify.hpp"

using namespace dskd;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "dskd_test_trainer" / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

RunConfig tiny_config(const std::string& name) {
    RunConfig cfg;
    cfg.dataset.per_class_train = 40;
    cfg.dataset.per_class_test = 40;
    cfg.optimizer.epochs = 2;
    cfg.optimizer.teacher_epochs = 10;
    cfg.optimizer.batch_size = 16;
    cfg.losses.M = 32;
    cfg.checkpoint_every = 1;
    cfg.output_dir = fresh_dir(name).string();
    return cfg;
}

std::string file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

// metrics lines with the wall-clock field zeroed; timing is the one record
// field that is not a function of (cfg, seeds)
std::string metrics_without_wall(const std::string& path) {
    std::ifstream f(path);
    REQUIRE(f.good());
    std::string out, line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto j = ordered_json::parse(line);
        j["wall_seconds"] = 0.0;
        out += j.dump();
        out += '\n';
    }
    return out;
}

uint32_t float_bits(float v) {
    uint32_t b;
    std::memcpy(&b, &v, 4);
    return b;
}

bool within_one_ulp(float a, float b) {
    if (a == b) return true;
    uint32_t ba = float_bits(a), bb = float_bits(b);
    return (ba > bb ? ba - bb : bb - ba) <= 1;
}

}  // namespace

TEST_CASE("config: defaults, round-trip, unknown keys, bad values") {
    auto cfg = parse_config(ordered_json::object());
    CHECK(cfg.losses.M == 256);
    CHECK(cfg.schedule.T == 2);
    CHECK(cfg.guidance_k == 1.0);

    RunConfig full = tiny_config("cfg_roundtrip");
    auto back = parse_config(full.to_json());
    CHECK(back.to_json().dump() == full.to_json().dump());

    auto bad_top = ordered_json{{"optimiser", ordered_json::object()}};
    CHECK_THROWS_AS(parse_config(bad_top), ConfigError);
    auto bad_nested = ordered_json{{"losses", {{"alpha", 1.0}, {"beta", 2.0}}}};
    CHECK_THROWS_AS(parse_config(bad_nested), ConfigError);

    auto bad_value = ordered_json{{"optimizer", {{"epochs", 0}}}};
    CHECK_THROWS_AS(parse_config(bad_value), ConfigError);
    auto bad_T = ordered_json{{"schedule", {{"T", 0}}}};
    CHECK_THROWS_AS(parse_config(bad_T), ConfigError);

    CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("evaluate: exact accuracy, label-independent baseline, empty set") {
    auto cfg = tiny_config("eval");
    auto model = ModelBundle::build(cfg.teacher_spec(), 3);
    auto ds = gen_blobs(4, 25, 16, 16, 0.1, 9);

    // dataset labeled by the model's own argmax: accuracy is exactly 1
    Dataset self = ds;
    {
        std::vector<int> order(static_cast<size_t>(ds.size()));
        for (int i = 0; i < ds.size(); ++i) order[static_cast<size_t>(i)] = i;
        auto [images, labels] = take_batch(ds, order, 0, ds.size());
        auto logits = model.logits(images);
        for (int b = 0; b < ds.size(); ++b) {
            int best = 0;
            for (int c = 1; c < 4; ++c)
                if (logits.data()[static_cast<size_t>(b * 4 + c)] >
                    logits.data()[static_cast<size_t>(b * 4 + best)])
                    best = c;
            self.labels[static_cast<size_t>(b)] = best;
        }
    }
    CHECK(evaluate(model, self) == doctest::Approx(1.0));

    // labels drawn independently of the images: binomial around 1/C
    auto big = gen_blobs(4, 2500, 16, 16, 0.1, 10);
    RngStream label_rng(77, 1);
    for (auto& l : big.labels) l = label_rng.uniform_int(4);
    double acc = evaluate(model, big);
    CHECK(acc == doctest::Approx(0.25).epsilon(0.08));  // 0.25 +- 0.02 absolute
    CHECK(std::abs(acc - 0.25) < 0.02);

    Dataset empty;
    empty.classes = 4;
    CHECK_THROWS_AS(evaluate(model, empty), ConfigError);
}

TEST_CASE("train_step with zero learning rate changes nothing, still reports losses") {
    auto cfg = tiny_config("lr0");
    cfg.optimizer.learning_rate = 0.0;
    auto teacher = pretrain_teacher(cfg);
    auto state = TrainState::create(cfg, std::move(teacher.bundle));

    std::vector<std::vector<float>> before;
    for (auto& [n, t] : state.registry) before.push_back(t.data());
    std::vector<std::vector<float>> teacher_before;
    for (auto& [n, t] : state.teacher.params("teacher")) teacher_before.push_back(t.data());

    auto ds = distill_train_set(cfg);
    std::vector<int> order(static_cast<size_t>(ds.size()));
    for (int i = 0; i < ds.size(); ++i) order[static_cast<size_t>(i)] = i;
    auto [images, labels] = take_batch(ds, order, 0, 16);
    auto losses = train_step(state, images, labels);

    CHECK(std::isfinite(losses.total));
    CHECK(losses.total > 0);
    size_t i = 0;
    for (auto& [n, t] : state.registry) CHECK(t.data() == before[i++]);
    i = 0;
    for (auto& [n, t] : state.teacher.params("teacher")) CHECK(t.data() == teacher_before[i++]);
}

TEST_CASE("teacher parameters are bit-unchanged across real steps") {
    auto cfg = tiny_config("frozen_teacher");
    auto teacher = pretrain_teacher(cfg);
    auto state = TrainState::create(cfg, std::move(teacher.bundle));
    std::vector<std::vector<float>> teacher_before;
    for (auto& [n, t] : state.teacher.params("teacher")) teacher_before.push_back(t.data());

    auto ds = distill_train_set(cfg);
    std::vector<int> order(static_cast<size_t>(ds.size()));
    for (int i = 0; i < ds.size(); ++i) order[static_cast<size_t>(i)] = i;
    for (int step = 0; step < 3; ++step) {
        auto [images, labels] = take_batch(ds, order, step * 16, (step + 1) * 16);
        train_step(state, images, labels);
    }
    size_t i = 0;
    for (auto& [n, t] : state.teacher.params("teacher")) CHECK(t.data() == teacher_before[i++]);
}

TEST_CASE("reported losses satisfy the composition identities to one ulp") {
    auto cfg = tiny_config("identity");
    cfg.losses.alpha = 0.7;
    cfg.losses.gamma = 0.5;
    auto teacher = pretrain_teacher(cfg);
    auto state = TrainState::create(cfg, std::move(teacher.bundle));

    auto ds = distill_train_set(cfg);
    std::vector<int> order(static_cast<size_t>(ds.size()));
    for (int i = 0; i < ds.size(); ++i) order[static_cast<size_t>(i)] = i;
    for (int step = 0; step < 4; ++step) {
        auto [images, labels] = take_batch(ds, order, step * 16, (step + 1) * 16);
        auto l = train_step(state, images, labels);
        float dskd = l.local + static_cast<float>(cfg.losses.gamma * l.global);
        CHECK(within_one_ulp(l.dskd, dskd));
        float total = ((l.task + static_cast<float>(cfg.losses.alpha * l.dskd)) + l.diff) + l.kd;
        CHECK(within_one_ulp(l.total, total));
    }
}

TEST_CASE("alpha=0 total is exactly task + diff + kd") {
    auto cfg = tiny_config("alpha0");
    cfg.losses.alpha = 0.0;
    auto teacher = pretrain_teacher(cfg);
    auto state = TrainState::create(cfg, std::move(teacher.bundle));
    auto ds = distill_train_set(cfg);
    std::vector<int> order(static_cast<size_t>(ds.size()));
    for (int i = 0; i < ds.size(); ++i) order[static_cast<size_t>(i)] = i;
    auto [images, labels] = take_batch(ds, order, 0, 16);
    auto l = train_step(state, images, labels);
    CHECK(l.total == ((l.task + 0.0f) + l.diff) + l.kd);
}

TEST_CASE("two identical runs produce identical metrics and checkpoints") {
    auto cfg_a = tiny_config("det_a");
    auto cfg_b = tiny_config("det_b");
    auto ra = train(cfg_a);
    auto rb = train(cfg_b);
    CHECK(metrics_without_wall(ra.metrics_path) == metrics_without_wall(rb.metrics_path));
    CHECK(file_bytes(ra.checkpoint_path) == file_bytes(rb.checkpoint_path));
    CHECK(ra.final_test_acc == rb.final_test_acc);
}

TEST_CASE("checkpoint resume reproduces the uninterrupted run") {
    auto cfg_full = tiny_config("resume_full");
    cfg_full.optimizer.epochs = 3;
    auto full = train(cfg_full);
    auto full_metrics = read_metrics(full.metrics_path);
    REQUIRE(full_metrics.size() == 3);

    auto cfg_part = tiny_config("resume_part");
    cfg_part.optimizer.epochs = 2;
    auto part = train(cfg_part);
    auto ckpt = (std::filesystem::path(cfg_part.output_dir) / "checkpoint_final.dskd").string();

    auto cfg_more = cfg_part;
    cfg_more.optimizer.epochs = 3;
    auto resumed = train(cfg_more, ckpt);
    auto resumed_metrics = read_metrics(resumed.metrics_path);
    REQUIRE(!resumed_metrics.empty());
    auto& r3 = resumed_metrics.back();
    auto& f3 = full_metrics.back();
    CHECK(r3.epoch == 3);
    CHECK(r3.task_loss == f3.task_loss);
    CHECK(r3.kd_loss == f3.kd_loss);
    CHECK(r3.dskd_local == f3.dskd_local);
    CHECK(r3.dskd_global == f3.dskd_global);
    CHECK(r3.diff_loss == f3.diff_loss);
    CHECK(r3.total_loss == f3.total_loss);
    CHECK(r3.train_acc == f3.train_acc);
    CHECK(r3.test_acc == f3.test_acc);
    CHECK(r3.mean_kappa == f3.mean_kappa);
}

TEST_CASE("checkpoint save -> load -> save is byte-identical; loaded forward matches") {
    auto cfg = tiny_config("ckpt_roundtrip");
    auto r = train(cfg);

    auto teacher = load_teacher(teacher_ckpt_path(cfg), cfg.teacher_spec());
    auto state = TrainState::create(cfg, std::move(teacher));
    load_checkpoint(r.checkpoint_path, state);
    auto resaved = (std::filesystem::path(cfg.output_dir) / "resaved.dskd").string();
    save_checkpoint(resaved, state);
    CHECK(file_bytes(r.checkpoint_path) == file_bytes(resaved));

    // eval-path reconstruction reproduces the in-memory student bit for bit
    auto student = load_student_from_checkpoint(r.checkpoint_path);
    auto ds = read_dataset((std::filesystem::path(cfg.output_dir) / "test_set.dskd").string());
    std::vector<int> order(static_cast<size_t>(ds.size()));
    for (int i = 0; i < ds.size(); ++i) order[static_cast<size_t>(i)] = i;
    auto [images, labels] = take_batch(ds, order, 0, 8);
    CHECK(student.logits(images).data() == state.student.logits(images).data());
}

TEST_CASE("zero learning rate leaves the teacher at its random-init baseline") {
    auto cfg = tiny_config("teacher_lr0");
    cfg.optimizer.learning_rate = 0.0;
    auto r = pretrain_teacher(cfg);
    auto fresh = ModelBundle::build(cfg.teacher_spec(), cfg.seeds.model);
    for (size_t i = 0; i < fresh.stage_w.size(); ++i)
        CHECK(r.bundle.stage_w[i].data() == fresh.stage_w[i].data());
    CHECK(r.test_acc == evaluate(fresh, test_set(cfg)));
}

TEST_CASE("loading a checkpoint into a mismatched architecture is rejected") {
    auto cfg = tiny_config("ckpt_mismatch");
    auto r = train(cfg);

    auto other = cfg;
    other.student_widths = {6, 12};
    auto teacher = load_teacher(teacher_ckpt_path(cfg), cfg.teacher_spec());
    auto state = TrainState::create(other, std::move(teacher));
    CHECK_THROWS_AS(load_checkpoint(r.checkpoint_path, state), IoError);
}

TEST_CASE("an untrainable teacher fails the precondition loudly") {
    auto cfg = tiny_config("bad_teacher");
    cfg.optimizer.learning_rate = 0.0;  // teacher stays at init
    try {
        train(cfg);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("precondition") != std::string::npos);
    }
}

TEST_CASE("distill set composition is pinned: split first, then corrupt") {
    auto cfg = tiny_config("composition");
    cfg.dataset.few_shot_fraction = 0.5;
    cfg.dataset.label_noise_ratio = 0.3;
    auto got = distill_train_set(cfg);

    auto manual = corrupt_labels(
        few_shot_split(full_train_set(cfg), 0.5, cfg.seeds.data + 0xf5), 0.3,
        cfg.seeds.data + 0x17);
    CHECK(got.images.data() == manual.images.data());
    CHECK(got.labels == manual.labels);
}

TEST_CASE("frozen adapter mode keeps the adapter at its initialization") {
    auto cfg = tiny_config("frozen_adapter");
    cfg.adapter_grad = "frozen";
    auto teacher = pretrain_teacher(cfg);
    auto state = TrainState::create(cfg, std::move(teacher.bundle));
    std::vector<std::vector<float>> before;
    for (auto& [n, t] : state.adapter.params()) before.push_back(t.data());

    auto ds = distill_train_set(cfg);
    std::vector<int> order(static_cast<size_t>(ds.size()));
    for (int i = 0; i < ds.size(); ++i) order[static_cast<size_t>(i)] = i;
    for (int step = 0; step < 3; ++step) {
        auto [images, labels] = take_batch(ds, order, step * 16, (step + 1) * 16);
        train_step(state, images, labels);
    }
    size_t i = 0;
    for (auto& [n, t] : state.adapter.params()) CHECK(t.data() == before[i++]);
    // the student still moves
    CHECK(state.student.cls_w.has_grad());
}

TEST_CASE("pretrain_teacher is deterministic in its seeds") {
    auto cfg = tiny_config("pretrain_det");
    auto a = pretrain_teacher(cfg);
    auto b = pretrain_teacher(cfg);
    CHECK(a.test_acc == b.test_acc);
    for (size_t i = 0; i < a.bundle.stage_w.size(); ++i)
        CHECK(a.bundle.stage_w[i].data() == b.bundle.stage_w[i].data());
    CHECK(a.bundle.cls_w.data() == b.bundle.cls_w.data());
}

TEST_CASE("the alpha=0 ablation row equals a direct baseline run bit for bit") {
    auto cfg = tiny_config("alpha_row");
    cfg.optimizer.epochs = 2;
    run_ablation(cfg, "alpha", {0.0});

    auto baseline = cfg;
    baseline.losses.alpha = 0.0;
    baseline.output_dir = fresh_dir("alpha_baseline").string();
    baseline.teacher_checkpoint = (std::filesystem::path(cfg.output_dir) / "teacher.dskd").string();
    auto rb = train(baseline);

    auto row_metrics = (std::filesystem::path(cfg.output_dir) / "alpha_0" / "metrics.jsonl").string();
    CHECK(metrics_without_wall(row_metrics) == metrics_without_wall(rb.metrics_path));
    CHECK(file_bytes((std::filesystem::path(cfg.output_dir) / "alpha_0" / "checkpoint_final.dskd").string()) ==
          file_bytes(rb.checkpoint_path));
}

TEST_CASE("ablation harness emits a well-formed CSV keyed by value") {
    auto cfg = tiny_config("ablate");
    cfg.optimizer.epochs = 1;
    auto csv_path = run_ablation(cfg, "k", {0.0, 1.0});
    std::ifstream csv(csv_path);
    REQUIRE(csv.good());
    std::string header;
    std::getline(csv, header);
    CHECK(header ==
          "axis,value,test_acc,train_acc,task_loss,kd_loss,dskd_local,dskd_global,diff_loss,"
          "total_loss,mean_kappa");
    int rows = 0;
    std::string line;
    while (std::getline(csv, line))
        if (!line.empty()) {
            CHECK(line.rfind("k,", 0) == 0);
            ++rows;
        }
    CHECK(rows == 2);
    CHECK_THROWS_AS(run_ablation(cfg, "bogus", {1.0}), ConfigError);
}

TEST_CASE("verify runner rejects unknown suites and is deterministic under its seed") {
    VerifyOptions opt;
    opt.suite = "everything";
    CHECK_THROWS_AS(run_verify(opt), ConfigError);

    VerifyOptions lsh;
    lsh.suite = "lsh";
    lsh.report_path.clear();
    auto a = run_verify(lsh);
    auto b = run_verify(lsh);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].to_json().dump() == b[i].to_json().dump());
}
