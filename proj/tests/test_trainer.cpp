#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "mtlse/errors.hpp"
#include "mtlse/trainer.hpp"
#include "oracles.hpp"

using namespace mtlse::trainer;
using mtlse::mtl::Framework;
using mtlse::mtl::MTLModel;
using mtlse::ndgrad::Graph;
using mtlse::ndgrad::Tensor;
using mtlse::ndgrad::Var;
namespace textdata = mtlse::textdata;
namespace fs = std::filesystem;

namespace {

fs::path write_tmp(const std::string& name, const std::string& content) {
    fs::path p = fs::temp_directory_path() / ("mtlse_trainer_" + name);
    std::ofstream out(p);
    out << content;
    return p;
}

// two synthetic tasks, small enough for unit-test budgets
TrainConfig small_config(Framework fw, std::size_t train_size = 300, std::size_t d = 16) {
    TrainConfig cfg;
    cfg.framework = fw;
    cfg.seed = 7;
    cfg.d = d;
    cfg.d_w = 16;
    cfg.h_mlp = 32;
    cfg.batch_size = 64;
    cfg.max_epochs = 10;

    textdata::TaskSpec t1;
    t1.name = "overlap_a";
    t1.synthetic = textdata::SynthSpec{};
    t1.train_size = train_size;
    t1.dev_size = 100;
    t1.test_size = 50;

    textdata::TaskSpec t2 = t1;
    t2.name = "overlap_b";
    cfg.tasks = {t1, t2};
    return cfg;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("sgd_step arithmetic") {
    Tensor p = Tensor::vec({1.0, 2.0});
    p.grad = {2.0, -1.0};
    std::vector<std::pair<std::string, Tensor*>> params{{"p", &p}};

    SUBCASE("zero learning rate is a no-op") {
        sgd_step(params, 0.0);
        CHECK(p.data == std::vector<double>{1.0, 2.0});
    }
    SUBCASE("single step") {
        sgd_step(params, 0.1);
        CHECK(p.data[0] == doctest::Approx(0.8).epsilon(1e-15));
        CHECK(p.data[1] == doctest::Approx(2.1).epsilon(1e-15));
    }
    SUBCASE("two half steps equal one full step") {
        Tensor q = p;
        sgd_step(params, 0.1);
        std::vector<std::pair<std::string, Tensor*>> qparams{{"q", &q}};
        sgd_step(qparams, 0.05);
        sgd_step(qparams, 0.05);
        CHECK(p.data == q.data);
    }
    SUBCASE("NaN gradient aborts naming the parameter") {
        p.grad[1] = std::nan("");
        CHECK_THROWS_WITH_AS(sgd_step(params, 0.1), doctest::Contains("parameter p"),
                             mtlse::numeric_error);
    }
}

TEST_CASE("lr_update schedule") {
    TrainConfig cfg;
    TrainState st;
    st.lr = 0.1;
    SUBCASE("improvement only decays") {
        st.prev_mean_dev = 0.5;
        lr_update(st, 0.6, cfg);
        CHECK(st.lr == 0.1 * 0.99);
        CHECK(!st.stop);
    }
    SUBCASE("a drop decays and divides") {
        st.prev_mean_dev = 0.5;
        lr_update(st, 0.4, cfg);
        CHECK(st.lr == 0.1 * 0.99 / 5.0);
    }
    SUBCASE("first epoch never counts as a drop") {
        lr_update(st, 0.1, cfg);
        CHECK(st.lr == 0.1 * 0.99);
    }
    SUBCASE("stop threshold") {
        st.lr = 9e-6 / 0.99;
        st.prev_mean_dev = 0.5;
        lr_update(st, 0.6, cfg);
        CHECK(st.stop);
    }
    SUBCASE("E drop-free epochs give exactly lr * decay^E") {
        double expect = 0.1;
        for (int e = 0; e < 12; ++e) {
            lr_update(st, 0.9, cfg);  // non-decreasing dev accuracy
            expect *= 0.99;
        }
        CHECK(st.lr == expect);
    }
}

TEST_CASE("config parsing") {
    write_tmp("task.manifest",
              "name = overlap\n"
              "type = synthetic\n"
              "kind = SHARED-OVERLAP\n");
    SUBCASE("defaults and overrides") {
        auto p = write_tmp("ok.conf", "framework = ASP\n"
                                      "seed = 5\n"
                                      "beta = 0.1\n"
                                      "gamma = 0.01\n"
                                      "task = mtlse_trainer_task.manifest\n"
                                      "task = mtlse_trainer_task.manifest\n");
        TrainConfig cfg = parse_config(p.string());
        CHECK(cfg.framework == Framework::ASP);
        CHECK(cfg.initial_lr == 0.1);
        CHECK(cfg.lr_decay == 0.99);
        CHECK(cfg.lr_drop_div == 5.0);
        CHECK(cfg.lr_stop == 1e-5);
        CHECK(cfg.batch_size == 128);
        CHECK(cfg.tasks.size() == 2);
        CHECK(cfg.tasks[0].name == "overlap");
    }
    SUBCASE("unknown keys are rejected") {
        auto p = write_tmp("bad.conf", "framework = FS\nlearning_rate = 0.1\n");
        CHECK_THROWS_WITH_AS(parse_config(p.string()), doctest::Contains("unknown key"),
                             mtlse::config_error);
    }
    SUBCASE("missing file and missing tasks") {
        CHECK_THROWS_AS(parse_config("/nonexistent/x.conf"), mtlse::config_error);
        auto p = write_tmp("empty.conf", "framework = FS\n");
        CHECK_THROWS_AS(parse_config(p.string()), mtlse::config_error);
    }
}

TEST_CASE("training reduces the loss and is deterministic") {
    TrainConfig cfg = small_config(Framework::FS);
    cfg.max_epochs = 6;
    TrainResult r1 = train_multitask(cfg);

    REQUIRE(!r1.metrics.empty());
    // append-only, strictly increasing epochs per task
    std::size_t last_epoch = 0;
    for (std::size_t i = 0; i < r1.metrics.size(); i += cfg.tasks.size()) {
        CHECK(r1.metrics[i].epoch == last_epoch + 1);
        last_epoch = r1.metrics[i].epoch;
    }
    double first = r1.metrics.front().train_loss;
    double last = r1.metrics[r1.metrics.size() - 2].train_loss;
    CHECK(last < first);
    CHECK(r1.best_mean_dev > 0.5);

    // byte-identical artifacts across identical runs
    TrainResult r2 = train_multitask(cfg);
    fs::path d1 = fs::temp_directory_path() / "mtlse_run1";
    fs::path d2 = fs::temp_directory_path() / "mtlse_run2";
    write_training_artifacts(r1, d1.string());
    write_training_artifacts(r2, d2.string());
    CHECK(slurp(d1 / "checkpoint.bin") == slurp(d2 / "checkpoint.bin"));
    CHECK(slurp(d1 / "metrics.csv") == slurp(d2 / "metrics.csv"));
    CHECK(!slurp(d1 / "metrics.csv").empty());

    // metrics header is pinned
    std::istringstream csv(slurp(d1 / "metrics.csv"));
    std::string header;
    std::getline(csv, header);
    CHECK(header == "epoch,lr,task,train_loss,dev_acc,adv_loss,diff_loss");
}

TEST_CASE("ASP with zero weights reproduces the SP trajectory") {
    TrainConfig sp = small_config(Framework::SP, 200);
    sp.max_epochs = 3;
    TrainConfig asp = sp;
    asp.framework = Framework::ASP;
    asp.beta = 0.0;
    asp.gamma = 0.0;

    TrainResult rs = train_multitask(sp);
    TrainResult ra = train_multitask(asp);

    auto ps = rs.best_model.named_params();
    auto pa = ra.best_model.named_params();
    for (auto& [name, t] : ps) {
        if (name.rfind("disc.", 0) == 0) continue;
        bool found = false;
        for (auto& [name2, t2] : pa)
            if (name2 == name) {
                found = true;
                CHECK(t->data == t2->data);
            }
        CHECK(found);
    }
    // loss trajectories equal step for step
    REQUIRE(rs.metrics.size() == ra.metrics.size());
    for (std::size_t i = 0; i < rs.metrics.size(); ++i) {
        CHECK(rs.metrics[i].train_loss == ra.metrics[i].train_loss);
        CHECK(rs.metrics[i].dev_acc == ra.metrics[i].dev_acc);
    }
}

TEST_CASE("forced dev drop produces the exact lr sequence") {
    TrainConfig cfg = small_config(Framework::FS, 100);
    cfg.max_epochs = 4;
    cfg.force_dev_drop = {2};
    TrainResult r = train_multitask(cfg);

    std::vector<double> lr_by_epoch;
    for (const MetricsRow& row : r.metrics)
        if (row.task == cfg.tasks[0].name) lr_by_epoch.push_back(row.lr);
    REQUIRE(lr_by_epoch.size() == 4);
    CHECK(lr_by_epoch[0] == 0.1);
    CHECK(lr_by_epoch[1] == 0.1 * 0.99);
    CHECK(lr_by_epoch[2] == 0.1 * 0.99 * 0.99 / 5.0);
    CHECK(lr_by_epoch[3] == 0.1 * 0.99 * 0.99 / 5.0 * 0.99);
}

TEST_CASE("alternating adversarial mode runs and trains the discriminator") {
    TrainConfig cfg = small_config(Framework::ASP, 150);
    cfg.beta = 0.05;
    cfg.gamma = 0.01;
    cfg.adv_mode = AdvMode::Alternating;
    cfg.max_epochs = 2;
    TrainResult r = train_multitask(cfg);
    CHECK(r.metrics.size() == 4);

    mtlse::mtl::ModelShape s;
    s.framework = Framework::ASP;
    s.d = cfg.d;
    s.d_w = cfg.d_w;
    s.h_mlp = cfg.h_mlp;
    s.beta = cfg.beta;
    s.gamma = cfg.gamma;
    s.task_names = {"overlap_a", "overlap_b"};
    s.task_classes = {2, 2};
    MTLModel fresh = mtlse::mtl::init_model(s, cfg.seed);
    // discriminator moved away from its seeded init
    CHECK(r.best_model.disc->W.data != fresh.disc->W.data);
}

TEST_CASE("grad_check on a small ASP model") {
    TrainConfig cfg = small_config(Framework::ASP, 50, 4);
    cfg.beta = 0.01;
    cfg.gamma = 0.05;
    cfg.d = 4;
    cfg.d_w = 4;
    cfg.h_mlp = 6;
    LoadedTasks data = load_all_tasks(cfg);

    mtlse::mtl::ModelShape shape;
    shape.framework = Framework::ASP;
    shape.d = 4;
    shape.d_w = 4;
    shape.h_mlp = 6;
    shape.beta = 0.01;
    shape.gamma = 0.05;
    shape.task_names = {"overlap_a", "overlap_b"};
    shape.task_classes = {2, 2};
    MTLModel model = mtlse::mtl::init_model(shape, 3);

    std::vector<textdata::Example> batch{data.tasks[0].train.examples[0],
                                         data.tasks[1].train.examples[0]};
    GradCheckReport report = grad_check(model, batch, data.table);
    CHECK(report.max_rel_err < 1e-4);
    CHECK(report.per_group.size() == model.named_params().size());

    SUBCASE("a one-percent corruption of one analytic gradient is detected") {
        // recompute analytic grads the same way grad_check does, corrupt one,
        // and verify the comparison metric flags it
        model.set_requires_grad(true);
        model.zero_grads();
        mtlse::mtl::ForwardOptions opts;
        opts.reverse = false;
        Graph g;
        Var loss = mtlse::mtl::example_forward(g, batch[0], data.table, model, opts).total;
        g.backward(loss);
        Tensor& W = model.shared_enc.fw_W;
        // pick a healthy coordinate
        std::size_t pick = 0;
        for (std::size_t i = 0; i < W.size(); ++i)
            if (std::abs(W.grad[i]) > std::abs(W.grad[pick])) pick = i;
        double corrupted = W.grad[pick] * 1.01;
        long double up = g.replay_shifted(loss, &W, pick, 1e-5);
        long double down = g.replay_shifted(loss, &W, pick, -1e-5);
        double numeric = static_cast<double>((up - down) / 2e-5L);
        double err = std::abs(corrupted - numeric) /
                     std::max({std::abs(corrupted), std::abs(numeric), 1e-8});
        CHECK(err > 1e-3);
    }
}

TEST_CASE("grad_check on a pure linear softmax model is near exact") {
    std::mt19937_64 rng(5);
    Tensor W = oracle::random_tensor({3, 6}, rng);
    Tensor b = oracle::random_tensor({3}, rng);
    Tensor x = oracle::random_tensor({6}, rng);
    W.requires_grad = b.requires_grad = true;
    W.zero_grad();
    b.zero_grad();

    Graph g;
    Var loss = g.cross_entropy(g.linear(g.leaf(W), g.constant(x), g.leaf(b)), 2);
    g.backward(loss);
    std::vector<Tensor*> params{&W, &b};
    auto numeric = oracle::finite_diff_replay(g, loss, params, 1e-5);
    CHECK(oracle::max_grad_rel_err(params, numeric) < 1e-7);
}
