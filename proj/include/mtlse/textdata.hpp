#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "mtlse/tensor.hpp"

namespace mtlse::textdata {

using ndgrad::Tensor;

// ------------------------------------------------------------------ vocab

// Index 0 is padding, 1 unknown. Real tokens are assigned indices in order
// of first occurrence so rebuilding from the same corpus is reproducible.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;

    Vocabulary();

    int add(const std::string& token);            // returns existing id if present
    int index(const std::string& token) const;    // kUnk when absent
    bool contains(const std::string& token) const;
    const std::string& token(int id) const;
    std::size_t size() const { return tokens_.size(); }

private:
    std::unordered_map<std::string, int> ids_;
    std::vector<std::string> tokens_;
};

// Lowercase + whitespace split. The single tokenization point for the
// whole artifact.
std::vector<std::string> tokenize(const std::string& line);

Vocabulary build_vocab(const std::vector<std::vector<std::string>>& corpus,
                       std::size_t min_count);

// -------------------------------------------------------------- embeddings

enum class OovPolicy { Zeros, SeededUniform };

struct EmbeddingTable {
    Tensor weights;  // |V| x d_w, row 0 all zeros
    bool frozen = true;

    std::size_t dim() const { return weights.cols(); }
    const double* row(int id) const { return weights.data.data() + id * weights.cols(); }
};

// GloVe text convention: `token v1 v2 ... v_dw`, dimension inferred from the
// first line. Rows for vocab tokens missing from the file follow the OOV
// policy; the padding row is always zero.
EmbeddingTable load_embeddings(const std::string& path, const Vocabulary& vocab,
                               OovPolicy policy = OovPolicy::Zeros, std::uint64_t seed = 0);

// Frozen random table, uniform in [-range, range], padding row zero.
EmbeddingTable random_embeddings(const Vocabulary& vocab, std::size_t d_w, std::uint64_t seed,
                                 double range = 0.5);

// ----------------------------------------------------------------- datasets

struct Example {
    std::string task;
    std::vector<int> tokens1, tokens2;
    int label = 0;
};

struct RawExample {
    int label = 0;
    std::vector<std::string> s1, s2;
};

using RawDataset = std::vector<RawExample>;

enum class SynthKind { SharedOverlap, PrivateMarker };

struct SynthSpec {
    SynthKind kind = SynthKind::SharedOverlap;
    std::uint64_t seed = 0;
    std::size_t size = 2000;
    // Common token universe shared by all generators in a run.
    std::size_t filler_count = 12;
    std::size_t content_count = 4;
    std::size_t min_len = 3, max_len = 5;
    std::string marker = "mk0";      // PrivateMarker only
    std::size_t max_marker_pos = 5;  // cap on the planted marker position
};

// Task description, either file-backed or synthetic. Line-oriented
// `key = value` manifest on disk.
struct TaskSpec {
    std::string name;
    std::vector<std::string> labels;  // file tasks; synthetic tasks are binary
    std::string train_path, dev_path, test_path;
    std::optional<SynthSpec> synthetic;
    std::size_t train_size = 2000, dev_size = 500, test_size = 500;

    std::size_t class_count() const { return synthetic ? 2 : labels.size(); }
};

TaskSpec load_task_manifest(const std::string& path);

struct Dataset {
    std::string task;
    std::size_t num_classes = 2;
    std::vector<Example> examples;

    std::size_t size() const { return examples.size(); }
};

// One example per line: `label<TAB>sentence1<TAB>sentence2`. Labels may be
// class indices or names from the task's label list.
RawDataset load_pair_raw(const std::string& path, const TaskSpec& task);
Dataset load_pair_dataset(const std::string& path, const TaskSpec& task, const Vocabulary& vocab);
void save_pair_dataset(const std::string& path, const RawDataset& data);

Dataset map_raw(const RawDataset& raw, const std::string& task_name, std::size_t num_classes,
                const Vocabulary& vocab);

// --------------------------------------------------------------- synthetic

// Labeling functions are the source of truth the generators must agree with.
int shared_overlap_label(const std::vector<std::string>& s1, const std::vector<std::string>& s2,
                         const std::unordered_set<std::string>& content);
int marker_parity_label(const std::vector<std::string>& s1, const std::string& marker);

RawDataset synth_generate(const SynthSpec& spec);

// The content-token set used by SharedOverlap for a given spec.
std::unordered_set<std::string> synth_content_set(const SynthSpec& spec);
// Single sentences drawn from the same token universe, one per requested
// length. Used by the probing harness.
std::vector<std::vector<std::string>> synth_sentences(const SynthSpec& spec,
                                                      const std::vector<std::size_t>& lengths,
                                                      std::uint64_t seed);

// ----------------------------------------------------------------- batching

struct Batch {
    std::vector<std::size_t> ids;          // indices into the source dataset
    std::vector<std::vector<int>> s1, s2;  // padded to the batch max length
    std::vector<std::size_t> len1, len2;   // true lengths for masking
    std::vector<int> labels;

    std::size_t size() const { return ids.size(); }
};

// One epoch: every example exactly once, final partial batch included.
// Order is shuffled when a seed is given, dataset order otherwise.
std::vector<Batch> batch_iter(const Dataset& data, std::size_t batch_size = 128,
                              std::optional<std::uint64_t> shuffle_seed = std::nullopt);

// ------------------------------------------------------------ kv text files

struct KvEntry {
    std::string key, value;
    std::size_t line = 0;
};

// Line-oriented `key = value` with '#' comments and blank lines ignored.
std::vector<KvEntry> parse_kv_file(const std::string& path);

}  // namespace mtlse::textdata
