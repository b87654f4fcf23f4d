#include "hts/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace hts::model {

std::string_view task_name(Task task) { return task == Task::age8 ? "age8" : "gender2"; }

Task parse_task(std::string_view name) {
  if (name == "age8") return Task::age8;
  if (name == "gender2") return Task::gender2;
  throw ConfigError("unknown task '" + std::string(name) + "' (expected age8 or gender2)");
}

std::size_t head_classes_for(Task task) { return task == Task::age8 ? 8 : 1; }

void PatchConfig::validate() const {
  if (height == 0 || width == 0 || channels == 0 || patch == 0 || dim == 0) {
    throw ConfigError("patch configuration extents must be positive");
  }
  if (height % patch != 0 || width % patch != 0) {
    throw ConfigError("patch size " + std::to_string(patch) + " does not divide image " +
                      std::to_string(height) + "x" + std::to_string(width));
  }
}

void EncoderConfig::validate() const {
  if (layers < 1) throw ConfigError("encoder needs at least one layer");
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("attention heads (" + std::to_string(heads) + ") must divide width " +
                      std::to_string(dim));
  }
  if (mlp_dim == 0) throw ConfigError("encoder MLP width must be positive");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout rate must be in [0, 1)");
}

void SequencerConfig::validate() const {
  if (units1 < 1 || units2 < 1) throw ConfigError("BiLSTM widths must be at least 1");
  if (!(epsilon_bn > 0.0)) throw ConfigError("batch-norm epsilon must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("batch-norm momentum must be in [0, 1)");
}

std::size_t ModelSpec::feature_width() const {
  return encoder.dim + 2 * sequencer.units1 + 2 * sequencer.units2;
}

void ModelSpec::validate() const {
  patch.validate();
  encoder.validate();
  sequencer.validate();
  if (patch.dim != encoder.dim) {
    throw ConfigError("patch embedding width " + std::to_string(patch.dim) +
                      " differs from encoder width " + std::to_string(encoder.dim));
  }
  if (head_classes != head_classes_for(task)) {
    throw ConfigError("task " + std::string(task_name(task)) + " needs " +
                      std::to_string(head_classes_for(task)) + " head outputs, got " +
                      std::to_string(head_classes));
  }
}

ModelSpec ModelSpec::preset(std::string_view name, Task task) {
  ModelSpec s;
  s.task = task;
  s.head_classes = head_classes_for(task);
  if (name == "vitb32") {
    s.patch = {224, 224, 3, 32, 768};
    s.encoder = {12, 12, 768, 3072, true, 0.0};
    s.sequencer = {128, 64, 1e-5, 0.99};
  } else if (name == "toy") {
    s.patch = {32, 32, 3, 8, 16};
    s.encoder = {2, 2, 16, 32, true, 0.0};
    s.sequencer = {16, 8, 1e-5, 0.99};
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "' (expected toy or vitb32)");
  }
  return s;
}

namespace {

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string layer_name(std::size_t l) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "layer%02zu", l);
  return buf;
}

}  // namespace

std::string ModelSpec::to_text() const {
  std::ostringstream os;
  os << "task=" << task_name(task) << '\n'
     << "patch.height=" << patch.height << '\n'
     << "patch.width=" << patch.width << '\n'
     << "patch.channels=" << patch.channels << '\n'
     << "patch.size=" << patch.patch << '\n'
     << "patch.dim=" << patch.dim << '\n'
     << "encoder.layers=" << encoder.layers << '\n'
     << "encoder.heads=" << encoder.heads << '\n'
     << "encoder.dim=" << encoder.dim << '\n'
     << "encoder.mlp_dim=" << encoder.mlp_dim << '\n'
     << "encoder.class_token=" << (encoder.include_class_token ? 1 : 0) << '\n'
     << "encoder.dropout=" << format_double(encoder.dropout_rate) << '\n'
     << "sequencer.units1=" << sequencer.units1 << '\n'
     << "sequencer.units2=" << sequencer.units2 << '\n'
     << "sequencer.epsilon=" << format_double(sequencer.epsilon_bn) << '\n'
     << "sequencer.momentum=" << format_double(sequencer.momentum) << '\n'
     << "head_classes=" << head_classes << '\n';
  return os.str();
}

ModelSpec ModelSpec::from_text(std::string_view text) {
  std::map<std::string, std::string> kv;
  std::istringstream is{std::string(text)};
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("model spec line without '=': " + line);
    if (!kv.emplace(line.substr(0, eq), line.substr(eq + 1)).second) {
      throw FormatError("duplicate model spec key " + line.substr(0, eq));
    }
  }
  auto take = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("model spec missing key " + key);
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  auto as_size = [&](const std::string& key) {
    const std::string v = take(key);
    std::size_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
      throw FormatError("model spec key " + key + " is not an integer: " + v);
    }
    return out;
  };
  auto as_double = [&](const std::string& key) {
    const std::string v = take(key);
    char* end = nullptr;
    const double d = std::strtod(v.c_str(), &end);
    if (end != v.c_str() + v.size()) throw FormatError("model spec key " + key + " is not a number: " + v);
    return d;
  };

  ModelSpec s;
  try {
    s.task = parse_task(take("task"));
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
  s.patch.height = as_size("patch.height");
  s.patch.width = as_size("patch.width");
  s.patch.channels = as_size("patch.channels");
  s.patch.patch = as_size("patch.size");
  s.patch.dim = as_size("patch.dim");
  s.encoder.layers = as_size("encoder.layers");
  s.encoder.heads = as_size("encoder.heads");
  s.encoder.dim = as_size("encoder.dim");
  s.encoder.mlp_dim = as_size("encoder.mlp_dim");
  s.encoder.include_class_token = as_size("encoder.class_token") != 0;
  s.encoder.dropout_rate = as_double("encoder.dropout");
  s.sequencer.units1 = as_size("sequencer.units1");
  s.sequencer.units2 = as_size("sequencer.units2");
  s.sequencer.epsilon_bn = as_double("sequencer.epsilon");
  s.sequencer.momentum = as_double("sequencer.momentum");
  s.head_classes = as_size("head_classes");
  if (!kv.empty()) throw FormatError("unknown model spec key " + kv.begin()->first);
  try {
    s.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid model spec: ") + e.what());
  }
  return s;
}

std::vector<ParamSpec> parameter_schema(const ModelSpec& spec) {
  spec.validate();
  const std::size_t d = spec.encoder.dim;
  const std::size_t u1 = spec.sequencer.units1, u2 = spec.sequencer.units2;
  std::vector<ParamSpec> out;
  auto add = [&out](std::string name, Shape shape, Init init, bool trainable = true) {
    out.push_back(ParamSpec{std::move(name), std::move(shape), trainable, init});
  };

  add("embedding/kernel", {spec.patch.patch_length(), d}, Init::truncated_normal);
  add("embedding/bias", {d}, Init::zeros);
  if (spec.encoder.include_class_token) add("class_token", {1, d}, Init::truncated_normal);
  add("pos_embedding", {spec.tokens(), d}, Init::truncated_normal);

  for (std::size_t l = 0; l < spec.encoder.layers; ++l) {
    const std::string p = "encoder/" + layer_name(l) + "/";
    add(p + "ln1/gamma", {d}, Init::ones);
    add(p + "ln1/beta", {d}, Init::zeros);
    for (const char* proj : {"query", "key", "value", "out"}) {
      add(p + "attn/" + proj + "/kernel", {d, d}, Init::truncated_normal);
      add(p + "attn/" + proj + "/bias", {d}, Init::zeros);
    }
    add(p + "ln2/gamma", {d}, Init::ones);
    add(p + "ln2/beta", {d}, Init::zeros);
    add(p + "mlp/dense1/kernel", {d, spec.encoder.mlp_dim}, Init::truncated_normal);
    add(p + "mlp/dense1/bias", {spec.encoder.mlp_dim}, Init::zeros);
    add(p + "mlp/dense2/kernel", {spec.encoder.mlp_dim, d}, Init::truncated_normal);
    add(p + "mlp/dense2/bias", {d}, Init::zeros);
  }
  add("encoder/final_ln/gamma", {d}, Init::ones);
  add("encoder/final_ln/beta", {d}, Init::zeros);

  auto batch_norm = [&](const std::string& p, std::size_t width) {
    add(p + "/gamma", {width}, Init::ones);
    add(p + "/beta", {width}, Init::zeros);
    add(p + "/moving_mean", {width}, Init::zeros, false);
    add(p + "/moving_variance", {width}, Init::ones, false);
  };
  auto lstm_pair = [&](const std::string& p, std::size_t in, std::size_t units) {
    for (const char* dir : {"forward", "backward"}) {
      add(p + "/" + dir + "/kernel", {in, 4 * units}, Init::lstm_kernel);
      add(p + "/" + dir + "/recurrent_kernel", {units, 4 * units}, Init::lstm_kernel);
      add(p + "/" + dir + "/bias", {4 * units}, Init::lstm_bias);
    }
  };
  batch_norm("sequencer/bn1", d);
  lstm_pair("sequencer/bilstm1", d, u1);
  batch_norm("sequencer/bn2", d + 2 * u1);
  lstm_pair("sequencer/bilstm2", d + 2 * u1, u2);

  add("head/kernel", {spec.feature_width(), spec.head_classes}, Init::truncated_normal);
  add("head/bias", {spec.head_classes}, Init::zeros);

  std::sort(out.begin(), out.end(), [](const ParamSpec& a, const ParamSpec& b) { return a.name < b.name; });
  return out;
}

std::size_t trainable_parameter_count(const ModelSpec& spec) {
  std::size_t n = 0;
  for (const auto& p : parameter_schema(spec))
    if (p.trainable) n += shape_size(p.shape);
  return n;
}

template <typename T>
Parameters<T> init_parameters(const ModelSpec& spec, Rng& rng) {
  Parameters<T> params;
  for (const auto& ps : parameter_schema(spec)) {
    Tensor<T> t(ps.shape);
    switch (ps.init) {
      case Init::zeros:
        break;
      case Init::ones:
        t.fill(T(1));
        break;
      case Init::truncated_normal:
        for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(0.02));
        break;
      case Init::lstm_kernel: {
        const double limit = 1.0 / std::sqrt(static_cast<double>(ps.shape[0]));
        for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-limit, limit));
        break;
      }
      case Init::lstm_bias: {
        // Gate blocks [i f g o]; forget gate starts open.
        const std::size_t units = ps.shape[0] / 4;
        for (std::size_t u = 0; u < units; ++u) t[units + u] = T(1);
        break;
      }
    }
    params.emplace(ps.name, std::move(t));
  }
  return params;
}

template <typename T>
void check_schema(const ModelSpec& spec, const Parameters<T>& params) {
  const auto schema = parameter_schema(spec);
  for (const auto& ps : schema) {
    auto it = params.find(ps.name);
    if (it == params.end()) throw SchemaError("missing parameter " + ps.name);
    if (it->second.shape() != ps.shape) {
      throw SchemaError("parameter " + ps.name + " has shape " + shape_string(it->second.shape()) +
                        ", schema expects " + shape_string(ps.shape));
    }
  }
  if (params.size() != schema.size()) {
    for (const auto& [name, _] : params) {
      const bool known = std::any_of(schema.begin(), schema.end(), [&](const ParamSpec& ps) { return ps.name == name; });
      if (!known) throw SchemaError("unexpected parameter " + name);
    }
  }
}

template <typename T>
Var BoundParameters<T>::operator[](const std::string& name) const {
  auto it = vars.find(name);
  if (it == vars.end()) throw SchemaError("parameter " + name + " is not bound");
  return it->second;
}

template <typename T>
BoundParameters<T> bind(Tape<T>& tape, Parameters<T>& params) {
  BoundParameters<T> bound;
  bound.store = &params;
  for (auto& [name, tensor] : params) {
    if (name.ends_with("/moving_mean") || name.ends_with("/moving_variance")) continue;
    bound.vars.emplace(name, tape.leaf(tensor));
  }
  return bound;
}

template <typename T>
Parameters<T> gradients(const Tape<T>& tape, const BoundParameters<T>& bound) {
  Parameters<T> grads;
  for (const auto& [name, var] : bound.vars) grads.emplace(name, tape.grad(var));
  return grads;
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& images, const PatchConfig& cfg) {
  cfg.validate();
  if (images.rank() != 4 || images.dim(1) != cfg.height || images.dim(2) != cfg.width ||
      images.dim(3) != cfg.channels) {
    throw DimensionError("images " + shape_string(images.shape()) + " do not match [B x " +
                         std::to_string(cfg.height) + " x " + std::to_string(cfg.width) + " x " +
                         std::to_string(cfg.channels) + "]");
  }
  const std::size_t batch = images.dim(0), p = cfg.patch, c = cfg.channels;
  const std::size_t grid_w = cfg.width / p, n = cfg.num_patches(), len = cfg.patch_length();
  Tensor<T> out(Shape{batch * n, len});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t py = (k / grid_w) * p, px = (k % grid_w) * p;
      T* dst = &out[(b * n + k) * len];
      for (std::size_t y = 0; y < p; ++y) {
        const T* src = &images[((b * cfg.height + py + y) * cfg.width + px) * c];
        std::copy_n(src, p * c, dst + y * p * c);
      }
    }
  return out;
}

template <typename T>
Var embed_patches(Tape<T>& tape, const BoundParameters<T>& p, const ModelSpec& spec,
                  const Tensor<T>& images) {
  const Tensor<T> patches = patchify(images, spec.patch);
  const std::size_t batch = images.dim(0), n = spec.patch.num_patches();
  Var x = ad::linear(tape, tape.constant(patches), p["embedding/kernel"], p["embedding/bias"]);
  if (spec.encoder.include_class_token) {
    // Row 0 of the stacked matrix is the class token; interleave it ahead of
    // each sample's patches.
    const Var stacked = ad::concat_rows(tape, {p["class_token"], x});
    std::vector<std::size_t> order;
    order.reserve(batch * (n + 1));
    for (std::size_t b = 0; b < batch; ++b) {
      order.push_back(0);
      for (std::size_t k = 0; k < n; ++k) order.push_back(1 + b * n + k);
    }
    x = ad::gather_rows(tape, stacked, std::move(order));
  }
  return ad::add_tiled(tape, x, p["pos_embedding"]);
}

template <typename T>
Var self_attention(Tape<T>& tape, const BoundParameters<T>& p, const std::string& prefix, Var x,
                   std::size_t batch, std::size_t tokens, std::size_t heads,
                   std::vector<Tensor<T>>* probs) {
  const Var q = ad::linear(tape, x, p[prefix + "/query/kernel"], p[prefix + "/query/bias"]);
  const Var k = ad::linear(tape, x, p[prefix + "/key/kernel"], p[prefix + "/key/bias"]);
  const Var v = ad::linear(tape, x, p[prefix + "/value/kernel"], p[prefix + "/value/bias"]);
  const Var a = ad::multi_head_attention(tape, q, k, v, batch, tokens, heads, probs);
  return ad::linear(tape, a, p[prefix + "/out/kernel"], p[prefix + "/out/bias"]);
}

namespace {

constexpr double kLayerNormEps = 1e-6;

template <typename T>
Var maybe_dropout(Tape<T>& tape, Var x, double rate, const ForwardOptions<T>& opts) {
  if (rate <= 0.0 || opts.mode != ad::Mode::train || opts.dropout_rng == nullptr) return x;
  return ad::dropout(tape, x, static_cast<T>(rate), *opts.dropout_rng);
}

}  // namespace

template <typename T>
Var encoder_block(Tape<T>& tape, const BoundParameters<T>& p, const std::string& prefix, Var x,
                  std::size_t batch, std::size_t tokens, const EncoderConfig& cfg,
                  const ForwardOptions<T>& opts) {
  const T eps = static_cast<T>(kLayerNormEps);
  Var y = ad::layer_norm(tape, x, p[prefix + "/ln1/gamma"], p[prefix + "/ln1/beta"], eps);
  y = self_attention(tape, p, prefix + "/attn", y, batch, tokens, cfg.heads, opts.attention);
  y = maybe_dropout(tape, y, cfg.dropout_rate, opts);
  const Var mid = ad::add(tape, x, y);

  Var h = ad::layer_norm(tape, mid, p[prefix + "/ln2/gamma"], p[prefix + "/ln2/beta"], eps);
  h = ad::gelu(tape, ad::linear(tape, h, p[prefix + "/mlp/dense1/kernel"], p[prefix + "/mlp/dense1/bias"]));
  h = ad::linear(tape, h, p[prefix + "/mlp/dense2/kernel"], p[prefix + "/mlp/dense2/bias"]);
  h = maybe_dropout(tape, h, cfg.dropout_rate, opts);
  return ad::add(tape, mid, h);
}

template <typename T>
Var encoder(Tape<T>& tape, const BoundParameters<T>& p, const ModelSpec& spec, Var x,
            std::size_t batch, const ForwardOptions<T>& opts) {
  for (std::size_t l = 0; l < spec.encoder.layers; ++l) {
    x = encoder_block(tape, p, "encoder/" + layer_name(l), x, batch, spec.tokens(), spec.encoder, opts);
  }
  return ad::layer_norm(tape, x, p["encoder/final_ln/gamma"], p["encoder/final_ln/beta"],
                        static_cast<T>(kLayerNormEps));
}

template <typename T>
Var bilstm(Tape<T>& tape, const BoundParameters<T>& p, const std::string& prefix, Var x,
           std::size_t batch, std::size_t steps) {
  const Var fwd = ad::lstm(tape, x, p[prefix + "/forward/kernel"], p[prefix + "/forward/recurrent_kernel"],
                           p[prefix + "/forward/bias"], batch, steps, false);
  const Var bwd = ad::lstm(tape, x, p[prefix + "/backward/kernel"], p[prefix + "/backward/recurrent_kernel"],
                           p[prefix + "/backward/bias"], batch, steps, true);
  return ad::concat_cols(tape, {fwd, bwd});
}

template <typename T>
Var hybrid_sequencer(Tape<T>& tape, const BoundParameters<T>& p, const ModelSpec& spec, Var tokens,
                     std::size_t batch, std::size_t steps, ad::Mode mode) {
  const T eps = static_cast<T>(spec.sequencer.epsilon_bn);
  const T momentum = static_cast<T>(spec.sequencer.momentum);
  auto bn = [&](const std::string& name, Var in) {
    ad::BatchNormState<T> state{&p.store->at(name + "/moving_mean"), &p.store->at(name + "/moving_variance")};
    return ad::batch_norm(tape, in, p[name + "/gamma"], p[name + "/beta"], mode, state, momentum, eps);
  };
  const Var h1 = bilstm(tape, p, "sequencer/bilstm1", bn("sequencer/bn1", tokens), batch, steps);
  const Var level1 = ad::concat_cols(tape, {tokens, h1});
  const Var h2 = bilstm(tape, p, "sequencer/bilstm2", bn("sequencer/bn2", level1), batch, steps);
  const Var level2 = ad::concat_cols(tape, {tokens, h1, h2});
  return ad::group_mean_rows(tape, level2, batch);
}

template <typename T>
Var prediction_head(Tape<T>& tape, const BoundParameters<T>& p, Task task, Var features) {
  const Var logits = ad::linear(tape, features, p["head/kernel"], p["head/bias"]);
  return task == Task::age8 ? ad::softmax_rows(tape, logits) : ad::sigmoid(tape, logits);
}

template <typename T>
Var forward(Tape<T>& tape, const BoundParameters<T>& p, const ModelSpec& spec,
            const Tensor<T>& images, const ForwardOptions<T>& opts) {
  const std::size_t batch = images.rank() == 4 ? images.dim(0) : 0;
  Var x = embed_patches(tape, p, spec, images);
  x = maybe_dropout(tape, x, spec.encoder.dropout_rate, opts);
  x = encoder(tape, p, spec, x, batch, opts);

  const std::size_t n = spec.patch.num_patches();
  if (spec.encoder.include_class_token) {
    std::vector<std::size_t> patch_rows;
    patch_rows.reserve(batch * n);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t k = 0; k < n; ++k) patch_rows.push_back(b * (n + 1) + 1 + k);
    x = ad::gather_rows(tape, x, std::move(patch_rows));
  }
  const Var features = hybrid_sequencer(tape, p, spec, x, batch, n, opts.mode);
  return prediction_head(tape, p, spec.task, features);
}

template <typename T>
std::vector<int> predicted_classes(const Tensor<T>& probs, Task task) {
  std::vector<int> out(probs.rows());
  const std::size_t cols = probs.cols();
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    if (task == Task::gender2) {
      out[r] = probs[r * cols] > T(0.5) ? 1 : 0;
    } else {
      const T* row = &probs[r * cols];
      out[r] = static_cast<int>(std::max_element(row, row + cols) - row);
    }
  }
  return out;
}

#define HTS_INSTANTIATE(T)                                                                              \
  template Parameters<T> init_parameters<T>(const ModelSpec&, Rng&);                                   \
  template void check_schema<T>(const ModelSpec&, const Parameters<T>&);                               \
  template struct BoundParameters<T>;                                                                  \
  template BoundParameters<T> bind<T>(Tape<T>&, Parameters<T>&);                                       \
  template Parameters<T> gradients<T>(const Tape<T>&, const BoundParameters<T>&);                      \
  template Tensor<T> patchify<T>(const Tensor<T>&, const PatchConfig&);                                \
  template Var embed_patches<T>(Tape<T>&, const BoundParameters<T>&, const ModelSpec&, const Tensor<T>&); \
  template Var self_attention<T>(Tape<T>&, const BoundParameters<T>&, const std::string&, Var,         \
                                 std::size_t, std::size_t, std::size_t, std::vector<Tensor<T>>*);      \
  template Var encoder_block<T>(Tape<T>&, const BoundParameters<T>&, const std::string&, Var,          \
                                std::size_t, std::size_t, const EncoderConfig&, const ForwardOptions<T>&); \
  template Var encoder<T>(Tape<T>&, const BoundParameters<T>&, const ModelSpec&, Var, std::size_t,     \
                          const ForwardOptions<T>&);                                                   \
  template Var bilstm<T>(Tape<T>&, const BoundParameters<T>&, const std::string&, Var, std::size_t,    \
                         std::size_t);                                                                 \
  template Var hybrid_sequencer<T>(Tape<T>&, const BoundParameters<T>&, const ModelSpec&, Var,         \
                                   std::size_t, std::size_t, ad::Mode);                                \
  template Var prediction_head<T>(Tape<T>&, const BoundParameters<T>&, Task, Var);                     \
  template Var forward<T>(Tape<T>&, const BoundParameters<T>&, const ModelSpec&, const Tensor<T>&,     \
                          const ForwardOptions<T>&);                                                   \
  template std::vector<int> predicted_classes<T>(const Tensor<T>&, Task);

HTS_INSTANTIATE(float)
HTS_INSTANTIATE(double)
HTS_INSTANTIATE(long double)
#undef HTS_INSTANTIATE

}  // namespace hts::model
