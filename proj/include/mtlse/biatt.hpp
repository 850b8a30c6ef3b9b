#pragma once

#include "mtlse/mtl.hpp"

namespace mtlse::biatt {

using mtl::BiattentiveParams;
using mtl::ClassifierHead;
using ndgrad::Graph;
using ndgrad::Tensor;
using ndgrad::Var;

// Biattentive pooling over a sentence pair. X and Y are T x d'' matrices of
// contextualized token vectors (shared and task-specific BiLSTM outputs
// concatenated per token); rows must be real tokens.

// A[i,j] = <X[i], Y[j]>
Var affinity(Graph& g, Var X, Var Y);

// A_x normalizes each column of A over the X positions; A_y does the same
// for A^T over the Y positions. Downstream products C_x = A_x^T X and
// C_y = A_y^T Y are then well-typed.
std::pair<Var, Var> attention_weights(Graph& g, Var A);

std::pair<Var, Var> context_summaries(Graph& g, Var X, Var Y, Var A_x, Var A_y);

// X_{|y} = [X ; X - C_y ; X (*) C_y], row-wise.
Var augment(Graph& g, Var X, Var C_y);

// [max ; mean ; min ; self-attentive] pooling over rows; w scores each row.
Var pool_multi(Graph& g, Var X_aug, Var w);

Var biatt_logits(Graph& g, Var X, Var Y, BiattentiveParams& params, ClassifierHead& head);

// Tensor-level pipeline; masked rows are dropped before attention.
Tensor biatt_classify(const Tensor& X, const Tensor& Y, BiattentiveParams& params,
                      ClassifierHead& head);
Tensor biatt_classify(const Tensor& X, const std::vector<bool>& mask_x, const Tensor& Y,
                      const std::vector<bool>& mask_y, BiattentiveParams& params,
                      ClassifierHead& head);

}  // namespace mtlse::biatt
