#pragma once

#include <cstddef>
#include <vector>

#include "hts/rng.hpp"
#include "hts/tape.hpp"

// Differentiable operations on a Tape. Activations are matrices: a batch of
// token sequences is stored as [(batch * tokens) x features] with the tokens
// of sample b in rows [b * tokens, (b + 1) * tokens).
namespace hts::ad {

enum class Mode { train, infer };

template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b);

/// x[m x k] * kernel[k x n] + bias[n].
template <typename T>
Var linear(Tape<T>& tape, Var x, Var kernel, Var bias);

template <typename T>
Var add(Tape<T>& tape, Var a, Var b);

/// x + y where y is repeated down the rows of x. y has the same column count
/// and a row count dividing x's (a bias vector, or one sample's positional
/// table added to every sample).
template <typename T>
Var add_tiled(Tape<T>& tape, Var x, Var y);

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b);

template <typename T>
Var scale(Tape<T>& tape, Var x, T factor);

/// Gaussian-error linear unit, erf form.
template <typename T>
Var gelu(Tape<T>& tape, Var x);

template <typename T>
Var sigmoid(Tape<T>& tape, Var x);

template <typename T>
Var tanh(Tape<T>& tape, Var x);

/// Softmax over the last axis.
template <typename T>
Var softmax_rows(Tape<T>& tape, Var x);

/// Per-row normalization with population variance, then gamma * x + beta.
template <typename T>
Var layer_norm(Tape<T>& tape, Var x, Var gamma, Var beta, T eps);

/// Moving statistics owned by the caller. Empty tensors mean "never
/// populated"; inference then fails with StateError.
template <typename T>
struct BatchNormState {
  Tensor<T>* mean = nullptr;
  Tensor<T>* variance = nullptr;
};

/// Normalizes each column over all rows (batch and token axes jointly).
/// Train mode uses batch statistics and updates the moving ones as
/// moving = momentum * moving + (1 - momentum) * batch; infer mode uses the
/// moving statistics.
template <typename T>
Var batch_norm(Tape<T>& tape, Var x, Var gamma, Var beta, Mode mode, BatchNormState<T> state,
               T momentum, T eps);

template <typename T>
Var concat_cols(Tape<T>& tape, const std::vector<Var>& parts);

template <typename T>
Var concat_rows(Tape<T>& tape, const std::vector<Var>& parts);

template <typename T>
Var gather_rows(Tape<T>& tape, Var x, std::vector<std::size_t> rows);

/// Mean over consecutive row groups: [(groups * n) x f] -> [groups x f].
template <typename T>
Var group_mean_rows(Tape<T>& tape, Var x, std::size_t groups);

/// Scaled dot-product attention per sample and head on projected q, k, v.
/// Head j owns columns [j * d/heads, (j + 1) * d/heads). When `probs` is not
/// null the attention matrices are appended to it, sample-major.
template <typename T>
Var multi_head_attention(Tape<T>& tape, Var q, Var k, Var v, std::size_t batch, std::size_t tokens,
                         std::size_t heads, std::vector<Tensor<T>>* probs = nullptr);

/// One LSTM direction over each sample's token sequence. Gate blocks in the
/// kernel, recurrent kernel and bias are ordered input, forget, cell, output.
/// With `reverse` the sequence is consumed last token first and the outputs
/// are written back at their original positions.
template <typename T>
Var lstm(Tape<T>& tape, Var x, Var kernel, Var recurrent, Var bias, std::size_t batch,
         std::size_t steps, bool reverse);

/// Inverted dropout. A zero rate returns x unchanged.
template <typename T>
Var dropout(Tape<T>& tape, Var x, T rate, Rng& rng);

template <typename T>
Var sum(Tape<T>& tape, Var x);

/// Sum of x * weights with fixed weights.
template <typename T>
Var weighted_sum(Tape<T>& tape, Var x, const Tensor<T>& weights);

}  // namespace hts::ad
