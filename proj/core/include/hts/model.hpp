#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "hts/autodiff.hpp"
#include "hts/rng.hpp"
#include "hts/tape.hpp"

namespace hts::model {

enum class Task { age8, gender2 };

std::string_view task_name(Task task);
Task parse_task(std::string_view name);

struct PatchConfig {
  std::size_t height = 224;
  std::size_t width = 224;
  std::size_t channels = 3;
  std::size_t patch = 32;
  std::size_t dim = 768;

  std::size_t num_patches() const { return (height / patch) * (width / patch); }
  std::size_t patch_length() const { return patch * patch * channels; }
  void validate() const;

  friend bool operator==(const PatchConfig&, const PatchConfig&) = default;
};

struct EncoderConfig {
  std::size_t layers = 12;
  std::size_t heads = 12;
  std::size_t dim = 768;
  std::size_t mlp_dim = 3072;
  bool include_class_token = true;
  double dropout_rate = 0.0;

  void validate() const;

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct SequencerConfig {
  std::size_t units1 = 128;
  std::size_t units2 = 64;
  double epsilon_bn = 1e-5;
  double momentum = 0.99;

  void validate() const;

  friend bool operator==(const SequencerConfig&, const SequencerConfig&) = default;
};

struct ModelSpec {
  Task task = Task::age8;
  PatchConfig patch;
  EncoderConfig encoder;
  SequencerConfig sequencer;
  std::size_t head_classes = 8;

  /// "vitb32" or "toy".
  static ModelSpec preset(std::string_view name, Task task);

  std::size_t tokens() const { return patch.num_patches() + (encoder.include_class_token ? 1 : 0); }
  /// Width of the pooled sequencer output: D + 2 * units1 + 2 * units2.
  std::size_t feature_width() const;
  void validate() const;

  /// Canonical `key=value` lines; from_text(to_text()) == *this.
  std::string to_text() const;
  static ModelSpec from_text(std::string_view text);

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

std::size_t head_classes_for(Task task);

enum class Init { zeros, ones, truncated_normal, lstm_kernel, lstm_bias };

struct ParamSpec {
  std::string name;
  Shape shape;
  bool trainable = true;
  Init init = Init::zeros;
};

/// Every tensor the model owns, in lexicographic name order. Batch-norm
/// moving statistics are listed as non-trainable entries.
std::vector<ParamSpec> parameter_schema(const ModelSpec& spec);

std::size_t trainable_parameter_count(const ModelSpec& spec);

/// Named tensors keyed by schema path; std::map keeps names sorted.
template <typename T>
using Parameters = std::map<std::string, Tensor<T>>;

template <typename T>
Parameters<T> init_parameters(const ModelSpec& spec, Rng& rng);

/// Throws SchemaError on a missing, extra or misshapen tensor.
template <typename T>
void check_schema(const ModelSpec& spec, const Parameters<T>& params);

/// Trainable tensors bound to tape leaves, plus access to the backing store
/// for moving statistics.
template <typename T>
struct BoundParameters {
  std::map<std::string, Var> vars;
  Parameters<T>* store = nullptr;

  Var operator[](const std::string& name) const;
};

template <typename T>
BoundParameters<T> bind(Tape<T>& tape, Parameters<T>& params);

/// Gradients of every bound tensor after tape.backward().
template <typename T>
Parameters<T> gradients(const Tape<T>& tape, const BoundParameters<T>& bound);

template <typename T>
struct ForwardOptions {
  ad::Mode mode = ad::Mode::infer;
  Rng* dropout_rng = nullptr;
  /// Receives each layer's attention matrices when set.
  std::vector<Tensor<T>>* attention = nullptr;
};

/// [B x H x W x C] images -> [(B * N) x P*P*C] rows, patches in row-major
/// grid order, each flattened as (row, col, channel).
template <typename T>
Tensor<T> patchify(const Tensor<T>& images, const PatchConfig& cfg);

/// Projected patches with positional embedding and optional class token:
/// [(B * tokens) x D].
template <typename T>
Var embed_patches(Tape<T>& tape, const BoundParameters<T>& p, const ModelSpec& spec,
                  const Tensor<T>& images);

/// Multi-head self-attention with q/k/v and output projections under
/// `prefix` (e.g. "encoder/layer00/attn").
template <typename T>
Var self_attention(Tape<T>& tape, const BoundParameters<T>& p, const std::string& prefix, Var x,
                   std::size_t batch, std::size_t tokens, std::size_t heads,
                   std::vector<Tensor<T>>* probs = nullptr);

/// Pre-norm block: x' = x + MSA(LN(x)); out = x' + MLP(LN(x')).
template <typename T>
Var encoder_block(Tape<T>& tape, const BoundParameters<T>& p, const std::string& prefix, Var x,
                  std::size_t batch, std::size_t tokens, const EncoderConfig& cfg,
                  const ForwardOptions<T>& opts);

/// All encoder layers followed by the final layer norm.
template <typename T>
Var encoder(Tape<T>& tape, const BoundParameters<T>& p, const ModelSpec& spec, Var x,
            std::size_t batch, const ForwardOptions<T>& opts);

/// Forward and backward LSTMs concatenated per position: [rows x 2U].
template <typename T>
Var bilstm(Tape<T>& tape, const BoundParameters<T>& p, const std::string& prefix, Var x,
           std::size_t batch, std::size_t steps);

/// BN1 -> BiLSTM1 -> [x, h1] -> BN2 -> BiLSTM2 -> [x, h1, h2] -> token mean.
/// Returns [B x feature_width].
template <typename T>
Var hybrid_sequencer(Tape<T>& tape, const BoundParameters<T>& p, const ModelSpec& spec, Var tokens,
                     std::size_t batch, std::size_t steps, ad::Mode mode);

/// Dense layer then softmax (age8) or sigmoid (gender2).
template <typename T>
Var prediction_head(Tape<T>& tape, const BoundParameters<T>& p, Task task, Var features);

/// Full classifier: [B x classes] probabilities.
template <typename T>
Var forward(Tape<T>& tape, const BoundParameters<T>& p, const ModelSpec& spec,
            const Tensor<T>& images, const ForwardOptions<T>& opts);

/// Predicted class per row of head output (argmax, or p > 0.5 for gender2).
template <typename T>
std::vector<int> predicted_classes(const Tensor<T>& probs, Task task);

}  // namespace hts::model
