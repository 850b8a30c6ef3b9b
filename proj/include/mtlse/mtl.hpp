#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mtlse/encoder.hpp"
#include "mtlse/graph.hpp"
#include "mtlse/textdata.hpp"

namespace mtlse::mtl {

using encoder::EncoderParams;
using ndgrad::Graph;
using ndgrad::Tensor;
using ndgrad::Var;
using textdata::EmbeddingTable;
using textdata::Example;

enum class Framework { FS, SP, ASP };

std::string framework_name(Framework f);
Framework framework_from(const std::string& name);

// Two-layer feed-forward head: softmax(W2 sigmoid(W1 v + b1) + b2).
struct ClassifierHead {
    Tensor W1, b1;  // (h_mlp x in), h_mlp
    Tensor W2, b2;  // (C x h_mlp), C

    std::size_t in_dim() const { return W1.cols(); }
    std::size_t num_classes() const { return W2.rows(); }
    std::vector<std::pair<std::string, Tensor*>> named_params(const std::string& prefix);
    void set_requires_grad(bool on);
};

// Linear task classifier on shared sentence vectors: softmax(W s + b).
struct DiscriminatorParams {
    Tensor W, b;  // (K x d_s), K

    std::vector<std::pair<std::string, Tensor*>> named_params(const std::string& prefix);
    void set_requires_grad(bool on);
};

// Scoring vectors for the self-attentive pool of the biattentive classifier;
// zero-initialized so attention starts uniform. Operations live in biatt.
struct BiattentiveParams {
    Tensor w1, w2;  // 3 * d'' each

    std::vector<std::pair<std::string, Tensor*>> named_params(const std::string& prefix);
    void set_requires_grad(bool on);
};

ClassifierHead init_head(std::size_t in_dim, std::size_t h_mlp, std::size_t classes,
                         std::mt19937_64& rng);
DiscriminatorParams init_discriminator(std::size_t d_s, std::size_t tasks, std::mt19937_64& rng);

struct ModelShape {
    Framework framework = Framework::FS;
    std::size_t d = 64, d_w = 64, h_mlp = 512;
    double beta = 0.0, gamma = 0.0;
    std::vector<std::string> task_names;
    std::vector<std::size_t> task_classes;
    bool biatt = false;  // biattentive pooling instead of max pooling (SP/ASP)
};

struct MTLModel {
    Framework framework = Framework::FS;
    double beta = 0.0, gamma = 0.0;
    std::size_t d = 0, d_w = 0, h_mlp = 0;

    EncoderParams shared_enc;
    std::vector<std::string> task_names;             // order fixes discriminator labels
    std::vector<EncoderParams> private_enc;          // SP/ASP only, parallel to task_names
    std::vector<ClassifierHead> heads;               // parallel to task_names
    std::optional<DiscriminatorParams> disc;         // ASP only
    std::optional<BiattentiveParams> biatt_pool;     // biattentive pooling mode

    std::size_t num_tasks() const { return task_names.size(); }
    int task_index(const std::string& name) const;   // -1 when unknown
    bool has_private() const { return framework != Framework::FS; }
    // dimension of one sentence's representation (2d shared, +2d private)
    std::size_t sent_dim() const { return has_private() ? 4 * d : 2 * d; }

    std::vector<std::pair<std::string, Tensor*>> named_params();
    void set_requires_grad(bool on);
    void zero_grads();
};

// Per-stream seeded init; adding or dropping the discriminator never shifts
// the draws of the other components.
MTLModel init_model(const ModelShape& shape, std::uint64_t seed);

// ----------------------------------------------------------- graph builders

Var head_logits(Graph& g, ClassifierHead& head, Var features);

struct EncodedSentence {
    Var H_shared;              // T x 2d
    Var s_shared;              // 2d
    std::optional<Var> H_private;
    Var s;                     // full representation (2d or 4d)
};

// Padding ids are stripped before the recurrences.
EncodedSentence encode_for_task(Graph& g, const std::vector<int>& tokens,
                                const EmbeddingTable& table, MTLModel& model,
                                std::size_t task_idx);

struct ForwardOptions {
    double lambda = 1.0;        // gradient-reversal strength
    bool build_adv = true;      // trainer disables when beta == 0
    bool build_diff = true;     // trainer disables when gamma == 0
    bool normalize_diff = true; // L2-normalize hidden rows inside L_diff
    bool reverse = true;        // false: no reversal boundary (alternating mode)
};

struct ExampleTerms {
    Var logits;
    Var task_ce;
    std::optional<Var> adv_ce;  // mean over the two sentences
    std::optional<Var> diff;    // mean over the two sentences
    Var total;                  // task_ce + beta * adv + gamma * diff
};

ExampleTerms example_forward(Graph& g, const Example& ex, const EmbeddingTable& table,
                             MTLModel& model, const ForwardOptions& opts = {});

// D(s) = softmax(W s + b) on a shared sentence vector.
Var discriminator_graph(Graph& g, DiscriminatorParams& disc, Var s_shared);

// ||Hs^T Hp||_F^2 (rows optionally L2-normalized first).
Var diff_loss_graph(Graph& g, Var H_s, Var H_p, bool normalize = true);

// ------------------------------------------------------- tensor-level ops

struct BatchForward {
    Tensor logits;    // B x C
    double task_loss; // mean cross-entropy
    // per sentence of each example: hidden matrices for L_diff inspection
    std::vector<Tensor> H_shared, H_private;
};

BatchForward fs_forward(const std::vector<Example>& batch, MTLModel& model,
                        const EmbeddingTable& table);
BatchForward sp_forward(const std::vector<Example>& batch, MTLModel& model,
                        const EmbeddingTable& table);

Tensor discriminator_forward(const Tensor& s_shared, const DiscriminatorParams& disc);

// Mean discriminator cross-entropy over shared sentence vectors (ASP only).
double adv_loss(const std::vector<Tensor>& shared_vecs, const std::vector<int>& task_ids,
                const DiscriminatorParams& disc, Framework framework);

double diff_loss(const encoder::HiddenStates& H_s, const encoder::HiddenStates& H_p,
                 bool normalize = true);
double diff_loss(const Tensor& H_s, const Tensor& H_p, bool normalize = true);

struct LossBreakdown {
    std::vector<std::pair<std::string, double>> task_losses;
    double adv = 0.0;
    double diff = 0.0;
    double total = 0.0;
};

// L = sum_k L_task^k + beta * L_adv + gamma * L_diff.
LossBreakdown total_loss(const std::vector<std::pair<std::string, double>>& task_losses,
                         double adv, double diff, double beta, double gamma);

// Adversarial weights that worked best at full scale: (0.01, 0.05) for
// two-task runs, (0.005, 0.001) for three or more.
std::pair<double, double> recommended_adversarial_weights(std::size_t num_tasks);

// ----------------------------------------------------------- checkpointing

// `MTLSE1 <framework> <K> <d> <d_w> <h_mlp>` header line, then named records
// `name length` followed by length raw little-endian float64 values.
void save_checkpoint(const MTLModel& model, const std::string& path);
MTLModel load_checkpoint(const std::string& path);

}  // namespace mtlse::mtl
