#include "mtlse/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mtlse/errors.hpp"
#include "mtlse/graph.hpp"
#include "mtlse/rng.hpp"

namespace mtlse::trainer {

using ndgrad::Graph;
using ndgrad::Var;
using textdata::Example;

namespace {

namespace fs = std::filesystem;

double parse_double(const std::string& s, const std::string& where) {
    double v;
    const char* b = s.data();
    auto [ptr, ec] = std::from_chars(b, b + s.size(), v);
    if (ec != std::errc() || ptr != b + s.size())
        throw config_error(where + ": expected a number, got '" + s + "'");
    return v;
}

std::size_t parse_size(const std::string& s, const std::string& where) {
    long v;
    const char* b = s.data();
    auto [ptr, ec] = std::from_chars(b, b + s.size(), v);
    if (ec != std::errc() || ptr != b + s.size() || v < 0)
        throw config_error(where + ": expected a non-negative integer, got '" + s + "'");
    return static_cast<std::size_t>(v);
}

bool parse_bool(const std::string& s, const std::string& where) {
    if (s == "true") return true;
    if (s == "false") return false;
    throw config_error(where + ": expected true or false, got '" + s + "'");
}

// round-trip-exact float formatting for the metrics log
std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

TrainConfig parse_config(const std::string& path) {
    TrainConfig cfg;
    const fs::path base = fs::path(path).parent_path();
    auto resolve = [&](const std::string& p) {
        return fs::path(p).is_relative() ? (base / p).string() : p;
    };
    for (const textdata::KvEntry& e : textdata::parse_kv_file(path)) {
        const std::string where = path + " line " + std::to_string(e.line);
        if (e.key == "framework") {
            cfg.framework = mtl::framework_from(e.value);
        } else if (e.key == "seed") {
            cfg.seed = parse_size(e.value, where);
        } else if (e.key == "lr") {
            cfg.initial_lr = parse_double(e.value, where);
        } else if (e.key == "lr_decay") {
            cfg.lr_decay = parse_double(e.value, where);
        } else if (e.key == "lr_drop_div") {
            cfg.lr_drop_div = parse_double(e.value, where);
        } else if (e.key == "lr_stop") {
            cfg.lr_stop = parse_double(e.value, where);
        } else if (e.key == "batch_size") {
            cfg.batch_size = parse_size(e.value, where);
        } else if (e.key == "max_epochs") {
            cfg.max_epochs = parse_size(e.value, where);
        } else if (e.key == "beta") {
            cfg.beta = parse_double(e.value, where);
        } else if (e.key == "gamma") {
            cfg.gamma = parse_double(e.value, where);
        } else if (e.key == "lambda") {
            cfg.lambda = parse_double(e.value, where);
        } else if (e.key == "adversarial") {
            if (e.value == "reversal")
                cfg.adv_mode = AdvMode::Reversal;
            else if (e.value == "alternating")
                cfg.adv_mode = AdvMode::Alternating;
            else
                throw config_error(where + ": adversarial must be reversal or alternating");
        } else if (e.key == "diff_normalize") {
            cfg.normalize_diff = parse_bool(e.value, where);
        } else if (e.key == "pooling") {
            if (e.value == "max")
                cfg.biatt_pooling = false;
            else if (e.value == "biatt")
                cfg.biatt_pooling = true;
            else
                throw config_error(where + ": pooling must be max or biatt");
        } else if (e.key == "d") {
            cfg.d = parse_size(e.value, where);
        } else if (e.key == "d_w") {
            cfg.d_w = parse_size(e.value, where);
        } else if (e.key == "h_mlp") {
            cfg.h_mlp = parse_size(e.value, where);
        } else if (e.key == "embeddings") {
            if (e.value == "random")
                cfg.emb_source = EmbSource::Random;
            else if (e.value == "glove")
                cfg.emb_source = EmbSource::Glove;
            else
                throw config_error(where + ": embeddings must be random or glove");
        } else if (e.key == "emb_range") {
            cfg.emb_range = parse_double(e.value, where);
            if (cfg.emb_range <= 0) throw config_error(where + ": emb_range must be positive");
        } else if (e.key == "glove_path") {
            cfg.glove_path = resolve(e.value);
        } else if (e.key == "oov") {
            if (e.value == "zeros")
                cfg.oov = textdata::OovPolicy::Zeros;
            else if (e.value == "uniform")
                cfg.oov = textdata::OovPolicy::SeededUniform;
            else
                throw config_error(where + ": oov must be zeros or uniform");
        } else if (e.key == "min_count") {
            cfg.min_count = parse_size(e.value, where);
            if (cfg.min_count < 1) throw config_error(where + ": min_count must be >= 1");
        } else if (e.key == "task") {
            cfg.tasks.push_back(textdata::load_task_manifest(resolve(e.value)));
        } else if (e.key == "force_dev_drop") {
            std::stringstream ss(e.value);
            std::string item;
            while (std::getline(ss, item, ','))
                if (!item.empty()) cfg.force_dev_drop.insert(parse_size(item, where));
        } else {
            throw config_error(where + ": unknown key '" + e.key + "'");
        }
    }
    if (cfg.tasks.empty()) throw config_error(path + ": no tasks declared");
    if (cfg.initial_lr <= 0 || cfg.lr_decay <= 0 || cfg.lr_stop <= 0)
        throw config_error(path + ": learning rates must be positive");
    if (cfg.lr_drop_div <= 1) throw config_error(path + ": lr_drop_div must exceed 1");
    if (cfg.batch_size < 1) throw config_error(path + ": batch_size must be >= 1");
    if (cfg.emb_source == EmbSource::Glove && cfg.glove_path.empty())
        throw config_error(path + ": glove embeddings need glove_path");
    return cfg;
}

void lr_update(TrainState& state, double mean_dev_acc, const TrainConfig& cfg) {
    double next = state.lr * cfg.lr_decay;
    const bool forced = cfg.force_dev_drop.count(state.epoch) > 0;
    if (forced || (state.prev_mean_dev >= 0.0 && mean_dev_acc < state.prev_mean_dev))
        next /= cfg.lr_drop_div;
    state.lr = next;
    state.prev_mean_dev = mean_dev_acc;
    if (state.lr < cfg.lr_stop) state.stop = true;
}

void sgd_step(const std::vector<std::pair<std::string, Tensor*>>& params, double lr) {
    if (lr < 0) throw std::invalid_argument("sgd_step: negative learning rate");
    for (const auto& [name, t] : params) {
        if (t->grad.empty()) continue;  // unreached parameter, gradient is zero
        for (std::size_t i = 0; i < t->size(); ++i) {
            if (!std::isfinite(t->grad[i]))
                throw numeric_error("sgd_step: non-finite gradient in parameter " + name);
            t->data[i] -= lr * t->grad[i];
        }
    }
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream out(path, std::ios::binary);  // LF endings everywhere
    if (!out) throw data_error("write_metrics_csv: cannot open " + path);
    out << "epoch,lr,task,train_loss,dev_acc,adv_loss,diff_loss\n";
    for (const MetricsRow& r : rows)
        out << r.epoch << ',' << fmt_double(r.lr) << ',' << r.task << ','
            << fmt_double(r.train_loss) << ',' << fmt_double(r.dev_acc) << ','
            << fmt_double(r.adv_loss) << ',' << fmt_double(r.diff_loss) << '\n';
}

LoadedTasks load_all_tasks(const TrainConfig& cfg) {
    struct RawTask {
        TaskSpec spec;
        textdata::RawDataset train, dev, test;
    };
    std::vector<RawTask> raw;
    for (const TaskSpec& spec : cfg.tasks) {
        RawTask rt;
        rt.spec = spec;
        if (spec.synthetic) {
            auto gen = [&](const char* split, std::size_t n) {
                textdata::SynthSpec s = *spec.synthetic;
                s.size = n;
                s.seed = cfg.seed ^ hash_name("data:" + spec.name + ":" + split);
                return textdata::synth_generate(s);
            };
            rt.train = gen("train", spec.train_size);
            rt.dev = gen("dev", spec.dev_size);
            rt.test = gen("test", spec.test_size);
        } else {
            rt.train = textdata::load_pair_raw(spec.train_path, spec);
            rt.dev = textdata::load_pair_raw(spec.dev_path, spec);
            if (!spec.test_path.empty()) rt.test = textdata::load_pair_raw(spec.test_path, spec);
        }
        if (rt.train.empty() || rt.dev.empty())
            throw data_error("task " + spec.name + ": empty train or dev split");
        raw.push_back(std::move(rt));
    }

    std::vector<std::vector<std::string>> corpus;
    for (const RawTask& rt : raw)
        for (const textdata::RawExample& e : rt.train) {
            corpus.push_back(e.s1);
            corpus.push_back(e.s2);
        }

    LoadedTasks out;
    out.vocab = textdata::build_vocab(corpus, cfg.min_count);
    if (cfg.emb_source == EmbSource::Random) {
        out.table = textdata::random_embeddings(out.vocab, cfg.d_w,
                                                cfg.seed ^ hash_name("emb"), cfg.emb_range);
    } else {
        out.table = textdata::load_embeddings(cfg.glove_path, out.vocab, cfg.oov,
                                              cfg.seed ^ hash_name("emb"));
    }
    for (RawTask& rt : raw) {
        TaskData td;
        td.spec = rt.spec;
        const std::size_t C = rt.spec.class_count();
        td.train = textdata::map_raw(rt.train, rt.spec.name, C, out.vocab);
        td.dev = textdata::map_raw(rt.dev, rt.spec.name, C, out.vocab);
        if (!rt.test.empty()) td.test = textdata::map_raw(rt.test, rt.spec.name, C, out.vocab);
        out.tasks.push_back(std::move(td));
    }
    return out;
}

double dev_accuracy(const Dataset& data, MTLModel& model, const EmbeddingTable& table) {
    if (data.examples.empty()) throw std::invalid_argument("dev_accuracy: empty dataset");
    mtl::ForwardOptions opts;
    opts.build_adv = false;
    opts.build_diff = false;
    std::size_t correct = 0;
    for (const Example& ex : data.examples) {
        Graph g;
        const Tensor& logits = g.value(mtl::example_forward(g, ex, table, model, opts).logits);
        std::size_t best = 0;
        for (std::size_t j = 1; j < logits.size(); ++j)
            if (logits.data[j] > logits.data[best]) best = j;
        if (static_cast<int>(best) == ex.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.examples.size());
}

namespace {

struct EpochStats {
    double ce = 0, adv = 0, diff = 0;
    std::size_t examples = 0;
};

Example batch_example(const Dataset& data, const textdata::Batch& batch, std::size_t i) {
    return data.examples[batch.ids[i]];
}

}  // namespace

TrainResult train_multitask(const TrainConfig& cfg) {
    LoadedTasks data = load_all_tasks(cfg);

    mtl::ModelShape shape;
    shape.framework = cfg.framework;
    shape.d = cfg.d;
    shape.d_w = data.table.dim();
    shape.h_mlp = cfg.h_mlp;
    shape.beta = cfg.beta;
    shape.gamma = cfg.gamma;
    shape.biatt = cfg.biatt_pooling;
    for (const TaskData& td : data.tasks) {
        shape.task_names.push_back(td.spec.name);
        shape.task_classes.push_back(td.spec.class_count());
    }
    MTLModel model = mtl::init_model(shape, cfg.seed);
    model.set_requires_grad(true);

    const bool adversarial = cfg.framework == Framework::ASP && cfg.beta > 0.0;
    mtl::ForwardOptions opts;
    opts.lambda = cfg.lambda;
    opts.build_adv = adversarial;
    opts.build_diff = model.has_private() && cfg.gamma > 0.0;
    opts.normalize_diff = cfg.normalize_diff;

    auto params = model.named_params();
    std::vector<std::pair<std::string, Tensor*>> disc_params, main_params;
    for (auto& [name, t] : params)
        (name.rfind("disc.", 0) == 0 ? disc_params : main_params).emplace_back(name, t);

    TrainResult result;
    TrainState state;
    state.lr = cfg.initial_lr;

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs && !state.stop; ++epoch) {
        state.epoch = epoch;
        std::vector<std::vector<textdata::Batch>> batches;
        std::size_t cycles = 0;
        for (const TaskData& td : data.tasks) {
            batches.push_back(textdata::batch_iter(
                td.train, cfg.batch_size,
                cfg.seed ^ hash_name("shuffle:" + td.spec.name + ":" + std::to_string(epoch))));
            cycles = std::max(cycles, batches.back().size());
        }

        std::vector<EpochStats> stats(data.tasks.size());
        for (std::size_t c = 0; c < cycles; ++c) {
            if (adversarial && cfg.adv_mode == AdvMode::Alternating) {
                // discriminator phase: unscaled adversarial loss, no reversal
                model.zero_grads();
                mtl::ForwardOptions dopts = opts;
                dopts.reverse = false;
                dopts.build_diff = false;
                for (std::size_t k = 0; k < data.tasks.size(); ++k) {
                    if (c >= batches[k].size()) continue;
                    const textdata::Batch& b = batches[k][c];
                    for (std::size_t i = 0; i < b.size(); ++i) {
                        Graph g;
                        auto terms = mtl::example_forward(
                            g, batch_example(data.tasks[k].train, b, i), data.table, model,
                            dopts);
                        g.backward(*terms.adv_ce, 1.0 / static_cast<double>(b.size()));
                    }
                }
                sgd_step(disc_params, state.lr);
            }

            model.zero_grads();
            for (std::size_t k = 0; k < data.tasks.size(); ++k) {
                if (c >= batches[k].size()) continue;
                const textdata::Batch& b = batches[k][c];
                for (std::size_t i = 0; i < b.size(); ++i) {
                    Graph g;
                    auto terms = mtl::example_forward(
                        g, batch_example(data.tasks[k].train, b, i), data.table, model, opts);
                    g.backward(terms.total, 1.0 / static_cast<double>(b.size()));
                    stats[k].ce += g.value(terms.task_ce).item();
                    if (terms.adv_ce) stats[k].adv += g.value(*terms.adv_ce).item();
                    if (terms.diff) stats[k].diff += g.value(*terms.diff).item();
                    ++stats[k].examples;
                }
            }
            // one optimizer step per round-robin cycle on the summed gradients
            if (adversarial && cfg.adv_mode == AdvMode::Alternating)
                sgd_step(main_params, state.lr);
            else
                sgd_step(params, state.lr);
        }

        double mean_dev = 0.0;
        std::vector<double> dev_accs(data.tasks.size());
        for (std::size_t k = 0; k < data.tasks.size(); ++k) {
            dev_accs[k] = dev_accuracy(data.tasks[k].dev, model, data.table);
            mean_dev += dev_accs[k];
        }
        mean_dev /= static_cast<double>(data.tasks.size());

        for (std::size_t k = 0; k < data.tasks.size(); ++k) {
            MetricsRow row;
            row.epoch = epoch;
            row.lr = state.lr;
            row.task = data.tasks[k].spec.name;
            double n = static_cast<double>(std::max<std::size_t>(stats[k].examples, 1));
            row.train_loss = stats[k].ce / n;
            row.dev_acc = dev_accs[k];
            row.adv_loss = stats[k].adv / n;
            row.diff_loss = stats[k].diff / n;
            result.metrics.push_back(row);
        }

        if (mean_dev > result.best_mean_dev) {
            result.best_mean_dev = mean_dev;
            result.best_epoch = epoch;
            result.best_model = model;
        }
        lr_update(state, mean_dev, cfg);
    }

    result.best_model.set_requires_grad(false);
    result.data = std::move(data);
    return result;
}

void write_training_artifacts(const TrainResult& result, const std::string& out_dir) {
    fs::create_directories(out_dir);
    mtl::save_checkpoint(result.best_model, (fs::path(out_dir) / "checkpoint.bin").string());
    write_metrics_csv((fs::path(out_dir) / "metrics.csv").string(), result.metrics);
}

GradCheckReport grad_check(MTLModel& model, const std::vector<Example>& batch,
                           const EmbeddingTable& table, double eps, double lambda,
                           bool normalize_diff) {
    if (batch.empty()) throw std::invalid_argument("grad_check: empty batch");
    model.set_requires_grad(true);
    model.zero_grads();

    mtl::ForwardOptions opts;
    opts.lambda = lambda;
    opts.reverse = false;  // compare against the loss as a scalar function
    opts.build_adv = model.framework == Framework::ASP;
    opts.build_diff = model.has_private();
    opts.normalize_diff = normalize_diff;

    const double inv = 1.0 / static_cast<double>(batch.size());
    std::vector<Graph> graphs(batch.size());
    std::vector<Var> losses(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        losses[i] = mtl::example_forward(graphs[i], batch[i], table, model, opts).total;
        graphs[i].backward(losses[i], inv);
    }

    GradCheckReport report;
    for (auto& [name, t] : model.named_params()) {
        double worst = 0.0;
        for (std::size_t i = 0; i < t->size(); ++i) {
            long double up = 0, down = 0;
            for (std::size_t e = 0; e < batch.size(); ++e) {
                up += graphs[e].replay_shifted(losses[e], t, i, eps);
                down += graphs[e].replay_shifted(losses[e], t, i, -eps);
            }
            double numeric = static_cast<double>((up - down) / (2.0L * eps)) * inv;
            double analytic = t->grad.empty() ? 0.0 : t->grad[i];
            double err = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            worst = std::max(worst, err);
        }
        report.per_group.emplace_back(name, worst);
        report.max_rel_err = std::max(report.max_rel_err, worst);
    }
    return report;
}

}  // namespace mtlse::trainer
