#pragma once

#include <random>
#include <string>
#include <vector>

#include "mtlse/graph.hpp"
#include "mtlse/textdata.hpp"

namespace mtlse::encoder {

using ndgrad::Graph;
using ndgrad::Tensor;
using ndgrad::Var;
using textdata::EmbeddingTable;
using textdata::Vocabulary;

// One bidirectional LSTM. Gate matrices are (4d x (d_w + d)) acting on
// [x_t ; h_{t-1}], gates packed in i,f,g,o order; biases are 4d.
struct EncoderParams {
    Tensor fw_W, fw_b;
    Tensor bw_W, bw_b;
    std::size_t input_dim = 0;   // d_w
    std::size_t hidden_dim = 0;  // d per direction

    std::size_t output_dim() const { return 2 * hidden_dim; }
    std::vector<std::pair<std::string, Tensor*>> named_params(const std::string& prefix);
    void set_requires_grad(bool on);
};

// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)], forget-gate bias +1.
EncoderParams init_encoder(std::size_t d_w, std::size_t d, std::mt19937_64& rng);

// Hidden-state matrix H (T x 2d, row t = [fwd_t ; bwd_t]) plus a token mask.
// Masked rows are zero and excluded from the recurrences and pooling.
struct HiddenStates {
    Tensor H;
    std::vector<bool> mask;
};

// ------------------------------------------------------------ graph builders

// Embedding rows for a token sequence (frozen table, so plain tensors).
std::vector<Tensor> embed_rows(const std::vector<int>& tokens, const EmbeddingTable& table);

// Runs both directions over the given (real, unpadded) rows and returns the
// T x 2d hidden matrix. The backward direction consumes the rows reversed.
Var bilstm_hidden(Graph& g, const std::vector<Tensor>& x_rows, EncoderParams& params);

// Per-dimension max over rows; with a mask, only unmasked rows take part.
Var max_pool(Graph& g, Var H);
Var max_pool(Graph& g, Var H, const std::vector<bool>& mask);

// [s1 ; s2 ; s1 - s2 ; s1 (*) s2]
Var pair_features(Graph& g, Var s1, Var s2);

// Lookup -> BiLSTM -> max pool for one sentence.
Var encode_sentence_graph(Graph& g, const std::vector<int>& tokens, const EmbeddingTable& table,
                          EncoderParams& params);

// --------------------------------------------------------- tensor interfaces

// The same operations on plain tensors (each builds a throwaway graph).
HiddenStates bilstm_forward(const Tensor& embedded, const std::vector<bool>& mask,
                            EncoderParams& params);
Tensor max_pool(const HiddenStates& h);
Tensor pair_features(const Tensor& s1, const Tensor& s2);
Tensor encode_sentence(const std::vector<int>& tokens, const EmbeddingTable& table,
                       EncoderParams& params);
Tensor encode_sentence(const std::vector<std::string>& tokens, const Vocabulary& vocab,
                       const EmbeddingTable& table, EncoderParams& params);

}  // namespace mtlse::encoder
