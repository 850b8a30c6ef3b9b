#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mtlse/mtl.hpp"
#include "mtlse/textdata.hpp"

namespace mtlse::probes {

using mtl::MTLModel;
using ndgrad::Tensor;
using textdata::Dataset;
using textdata::EmbeddingTable;
using textdata::Vocabulary;

// ------------------------------------------------------------- extraction

enum class EncoderTag { Shared, Private, Concat };

struct TagSpec {
    EncoderTag tag = EncoderTag::Shared;
    std::string task;  // Private/Concat need a task on multi-private models
};

// "shared" | "private:<task>" | "concat" | "concat:<task>"
TagSpec parse_tag(const std::string& text);
std::string tag_name(const TagSpec& tag);

struct FeatureMatrix {
    Tensor X;  // N x D
    std::vector<std::size_t> ids;
    std::string tag;

    std::size_t dim() const { return X.cols(); }
};

// Frozen forward passes only. Pair datasets yield pair features of the
// tagged representation; single sentences yield the tagged sentence vector.
FeatureMatrix extract_pair_features(const Dataset& data, MTLModel& model,
                                    const EmbeddingTable& table, const TagSpec& tag);
FeatureMatrix extract_sentence_vectors(const std::vector<std::vector<int>>& sentences,
                                       MTLModel& model, const EmbeddingTable& table,
                                       const TagSpec& tag);
// Position-blind mean of token embeddings (baseline representation).
FeatureMatrix bag_of_embeddings(const std::vector<std::vector<int>>& sentences,
                                const EmbeddingTable& table);

// CSV: header row carries the encoder tag and D, then `id,v1,...,vD` rows.
void write_feature_csv(const std::string& path, const FeatureMatrix& fm);

// ----------------------------------------------------------------- probes

enum class ProbeType { Logistic, Mlp512 };

struct ProbeConfig {
    ProbeType type = ProbeType::Logistic;
    std::size_t epochs = 30;
    double lr = 0.5;
    std::uint64_t seed = 0;
    std::size_t hidden = 512;      // mlp-512 hidden width
    double test_fraction = 0.2;    // held-out share
    std::size_t batch_size = 128;
};

struct ProbeResult {
    double accuracy = 0.0;   // held-out split
    std::size_t train_n = 0, test_n = 0;
};

// Trains only the probe; the features (and therefore the encoder) stay
// frozen. Deterministic under cfg.seed.
ProbeResult train_probe(const FeatureMatrix& features, const std::vector<int>& labels,
                        const ProbeConfig& cfg);

// ---------------------------------------------------------- auxiliary tasks

// Fixed boundaries {5,8,12,16,20,25,30}: <=5 -> 0, 6-8 -> 1, ..., >30 -> 7.
int length_bin(std::size_t len);

double aux_length(const std::vector<std::vector<int>>& sentences, MTLModel& model,
                  const EmbeddingTable& table, const TagSpec& tag, const ProbeConfig& cfg);

// [sentence vector ; word embedding], positive = word from the sentence,
// negative = absent word from the same corpus-frequency decile.
double aux_word_content(const std::vector<std::vector<int>>& sentences, MTLModel& model,
                        const EmbeddingTable& table, const TagSpec& tag,
                        const ProbeConfig& cfg);

// [sentence vector ; emb(a) ; emb(b)], label 1 iff a's first occurrence
// precedes b's; balanced by swapping.
double aux_word_order(const std::vector<std::vector<int>>& sentences, MTLModel& model,
                      const EmbeddingTable& table, const TagSpec& tag, const ProbeConfig& cfg);
// Same probe on position-blind bag-of-embeddings features.
double aux_word_order_bag_baseline(const std::vector<std::vector<int>>& sentences,
                                   const EmbeddingTable& table, const ProbeConfig& cfg);

// ------------------------------------------------------- similarity scoring

struct ScoredPair {
    std::vector<int> tokens1, tokens2;
    double gold = 0.0;
};

// `score<TAB>sentence1<TAB>sentence2` per line.
std::vector<ScoredPair> load_scored_pairs(const std::string& path, const Vocabulary& vocab);

double cosine(const Tensor& a, const Tensor& b);
// Average-rank ties on both sides.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

double cosine_eval(const std::vector<ScoredPair>& pairs, MTLModel& model,
                   const EmbeddingTable& table, const TagSpec& tag);

// Probe report rows: `probe,encoder_tag,metric,value,seed`.
struct ProbeReportRow {
    std::string probe, encoder_tag, metric;
    double value = 0.0;
    std::uint64_t seed = 0;
};
void write_probe_report(const std::string& path, const std::vector<ProbeReportRow>& rows);
std::string probe_report_csv(const std::vector<ProbeReportRow>& rows);

}  // namespace mtlse::probes
