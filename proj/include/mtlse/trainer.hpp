#pragma once

#include <set>
#include <string>
#include <vector>

#include "mtlse/mtl.hpp"
#include "mtlse/textdata.hpp"

namespace mtlse::trainer {

using mtl::Framework;
using mtl::MTLModel;
using ndgrad::Tensor;
using textdata::Dataset;
using textdata::EmbeddingTable;
using textdata::TaskSpec;
using textdata::Vocabulary;

enum class AdvMode { Reversal, Alternating };
enum class EmbSource { Random, Glove };

struct TrainConfig {
    Framework framework = Framework::FS;
    std::uint64_t seed = 0;

    double initial_lr = 0.1;
    double lr_decay = 0.99;     // per-epoch multiplier
    double lr_drop_div = 5.0;   // divisor on a dev-accuracy drop
    double lr_stop = 1e-5;      // halt when lr falls below this
    std::size_t batch_size = 128;
    std::size_t max_epochs = 50;

    double beta = 0.0, gamma = 0.0, lambda = 1.0;
    AdvMode adv_mode = AdvMode::Reversal;
    bool normalize_diff = true;
    bool biatt_pooling = false;

    std::size_t d = 64, d_w = 64, h_mlp = 512;

    EmbSource emb_source = EmbSource::Random;
    double emb_range = 8.0;  // synthetic-table scale, uniform [-range, range]
    std::string glove_path;
    textdata::OovPolicy oov = textdata::OovPolicy::Zeros;
    std::size_t min_count = 1;

    std::vector<TaskSpec> tasks;

    // Testing hook: epochs whose end is treated as a dev-accuracy drop.
    std::set<std::size_t> force_dev_drop;
};

// `key = value` file; unknown keys are an error. Task manifests referenced
// with `task = path` are loaded relative to the config file's directory.
TrainConfig parse_config(const std::string& path);

struct TrainState {
    std::size_t epoch = 0;
    double lr = 0.1;
    double prev_mean_dev = -1.0;  // <0 until the first epoch completes
    double best_mean_dev = -1.0;
    bool stop = false;
};

// End-of-epoch schedule: lr *= decay, additionally lr /= drop_div when the
// mean dev accuracy decreased; stop once lr < lr_stop.
void lr_update(TrainState& state, double mean_dev_acc, const TrainConfig& cfg);

// p <- p - lr * grad for every named parameter. A non-finite gradient aborts
// with a diagnostic naming the parameter.
void sgd_step(const std::vector<std::pair<std::string, Tensor*>>& params, double lr);

struct MetricsRow {
    std::size_t epoch = 0;
    double lr = 0.0;
    std::string task;
    double train_loss = 0.0, dev_acc = 0.0, adv_loss = 0.0, diff_loss = 0.0;
};

// CSV with header `epoch,lr,task,train_loss,dev_acc,adv_loss,diff_loss`.
void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

struct TaskData {
    TaskSpec spec;
    Dataset train, dev, test;
};

struct LoadedTasks {
    Vocabulary vocab;
    EmbeddingTable table;
    std::vector<TaskData> tasks;
};

// Generates or loads every task's splits, builds the joint vocabulary from
// the training corpora, and materializes the frozen embedding table.
LoadedTasks load_all_tasks(const TrainConfig& cfg);

double dev_accuracy(const Dataset& data, MTLModel& model, const EmbeddingTable& table);

struct TrainResult {
    MTLModel best_model;
    double best_mean_dev = 0.0;
    std::size_t best_epoch = 0;
    std::vector<MetricsRow> metrics;
    LoadedTasks data;
};

// Round-robin multi-task training with one optimizer step per cycle and the
// dev-driven schedule above. Deterministic for a fixed config and seed.
TrainResult train_multitask(const TrainConfig& cfg);

// Writes checkpoint.bin and metrics.csv under out_dir.
void write_training_artifacts(const TrainResult& result, const std::string& out_dir);

struct GradCheckReport {
    std::vector<std::pair<std::string, double>> per_group;  // worst error per group
    double max_rel_err = 0.0;
};

// Central finite differences (extended-precision tape replay) of the total
// loss against the analytic gradients; worst |a-n|/max(|a|,|n|,1e-8) per
// parameter group. The reversal boundary is disabled so the compared
// objective is an actual scalar function.
GradCheckReport grad_check(MTLModel& model, const std::vector<textdata::Example>& batch,
                           const EmbeddingTable& table, double eps = 1e-5,
                           double lambda = 1.0, bool normalize_diff = true);

}  // namespace mtlse::trainer
