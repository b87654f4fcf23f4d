#include "hts/blockcheck.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

#include "hts/gradcheck.hpp"

namespace hts::model {

std::vector<std::string> BlockCheck::failing(double tolerance) const {
  std::vector<std::string> out;
  for (const auto& t : tensors)
    if (!(t.max_relative_error <= tolerance)) out.push_back(t.name);
  return out;
}

namespace {

using TapeD = Tape<double>;
using Wide = long double;

TensorD random_normal(Shape shape, Rng& rng) {
  TensorD t(std::move(shape));
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

std::vector<std::size_t> sample_coordinates(std::size_t size, std::size_t cap, Rng& rng) {
  std::vector<std::size_t> idx(size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (size <= cap) return idx;
  rng.shuffle(std::span<std::size_t>(idx));
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
  return idx;
}

Parameters<Wide> widen(const Parameters<double>& params) {
  Parameters<Wide> out;
  for (const auto& [name, t] : params) out.emplace(name, t.cast<Wide>());
  return out;
}

// Analytic gradients come from a double tape. The perturbed losses are
// evaluated in extended precision and reported relative to the unperturbed
// loss, so rounding in the forward pass does not swamp small gradients.
class BlockChecker {
 public:
  BlockChecker(const Parameters<double>& params, const BlockCheckOptions& opts, Rng& rng)
      : params_(params), wide_(widen(params)), opts_(opts), rng_(rng) {}

  // `build(tape, bound, input)` must be callable for double and long double
  // tapes. `input` may be empty for blocks that read images directly.
  template <typename Build>
  BlockCheck run(const std::string& block, const std::vector<std::string>& names, const TensorD& input,
                 const Build& build) {
    const TensorD weights = output_weights(input, build);
    const Tensor<Wide> wide_weights = weights.cast<Wide>();
    auto wide_loss = [&](Parameters<Wide> params, const Tensor<Wide>& in) {
      Tape<Wide> tape;
      const auto bound = bind(tape, params);
      const Var x = in.empty() ? Var{} : tape.leaf(in);
      return tape.value(ad::weighted_sum(tape, build(tape, bound, x), wide_weights)).item();
    };
    const Tensor<Wide> wide_input = input.empty() ? Tensor<Wide>{} : input.cast<Wide>();
    const Wide base = wide_loss(wide_, wide_input);

    Parameters<double> params = params_;
    TapeD tape;
    const auto bound = bind(tape, params);
    const Var x = input.empty() ? Var{} : tape.leaf(input);
    tape.backward(ad::weighted_sum(tape, build(tape, bound, x), weights));

    BlockCheck report;
    report.block = block;
    auto check = [&](const std::string& name, const TensorD& theta, const TensorD& analytic,
                     const std::function<double(const TensorD&)>& f) {
      const auto coords = sample_coordinates(theta.size(), opts_.max_coordinates, rng_);
      const auto r = finite_difference_check(f, theta, analytic, opts_.step, coords);
      report.tensors.push_back({name, r.max_relative_error, r.coordinates_checked, r.worst_numeric, r.worst_analytic});
      report.max_relative_error = std::max(report.max_relative_error, r.max_relative_error);
    };
    if (!input.empty()) {
      check("input", input, tape.grad(x), [&](const TensorD& theta) {
        return static_cast<double>(wide_loss(wide_, theta.cast<Wide>()) - base);
      });
    }
    for (const auto& name : names) {
      check(name, params_.at(name), tape.grad(bound[name]), [&](const TensorD& theta) {
        Parameters<Wide> p = wide_;
        p.at(name) = theta.cast<Wide>();
        return static_cast<double>(wide_loss(std::move(p), wide_input) - base);
      });
    }
    report.passed = report.failing(opts_.tolerance).empty();
    return report;
  }

 private:
  template <typename Build>
  TensorD output_weights(const TensorD& input, const Build& build) {
    Parameters<double> params = params_;
    TapeD tape;
    const auto bound = bind(tape, params);
    const Var x = input.empty() ? Var{} : tape.leaf(input);
    return random_normal(tape.value(build(tape, bound, x)).shape(), rng_);
  }

  const Parameters<double>& params_;
  const Parameters<Wide> wide_;
  const BlockCheckOptions& opts_;
  Rng& rng_;
};

template <typename TapeRef>
using scalar_of = typename std::remove_cvref_t<TapeRef>::value_type;

template <typename TapeRef>
ForwardOptions<scalar_of<TapeRef>> train_options() {
  return {ad::Mode::train, nullptr, nullptr};
}

std::vector<std::string> trainable_with_prefix(const ModelSpec& spec, const std::string& prefix) {
  std::vector<std::string> out;
  for (const auto& ps : parameter_schema(spec))
    if (ps.trainable && ps.name.starts_with(prefix)) out.push_back(ps.name);
  return out;
}

}  // namespace

std::vector<BlockCheck> check_blocks(const ModelSpec& spec, const BlockCheckOptions& opts) {
  spec.validate();
  Rng rng(opts.seed);
  Rng init_rng = rng.fork(1);
  const Parameters<double> params = init_parameters<double>(spec, init_rng);
  BlockChecker checker(params, opts, rng);

  const std::size_t b = opts.batch;
  const std::size_t tokens = spec.tokens(), steps = spec.patch.num_patches();
  const std::size_t d = spec.encoder.dim;
  std::vector<BlockCheck> out;

  const std::string attn = "encoder/layer00/attn";
  out.push_back(checker.run("attention", trainable_with_prefix(spec, attn + "/"), random_normal({b * tokens, d}, rng),
                            [&](auto& t, const auto& p, Var x) {
                              return self_attention(t, p, attn, x, b, tokens, spec.encoder.heads);
                            }));

  out.push_back(checker.run("encoder", trainable_with_prefix(spec, "encoder/"), random_normal({b * tokens, d}, rng),
                            [&](auto& t, const auto& p, Var x) {
                              return encoder(t, p, spec, x, b, train_options<decltype(t)>());
                            }));

  out.push_back(checker.run("batch_norm", trainable_with_prefix(spec, "sequencer/bn1/"),
                            random_normal({b * steps, d}, rng),
                            [&](auto& t, const auto& p, Var x) {
                              using S = scalar_of<decltype(t)>;
                              ad::BatchNormState<S> state{&p.store->at("sequencer/bn1/moving_mean"),
                                                          &p.store->at("sequencer/bn1/moving_variance")};
                              return ad::batch_norm(t, x, p["sequencer/bn1/gamma"], p["sequencer/bn1/beta"],
                                                    ad::Mode::train, state, static_cast<S>(spec.sequencer.momentum),
                                                    static_cast<S>(spec.sequencer.epsilon_bn));
                            }));

  out.push_back(checker.run("bilstm", trainable_with_prefix(spec, "sequencer/bilstm1/"),
                            random_normal({b * steps, d}, rng),
                            [&](auto& t, const auto& p, Var x) {
                              return bilstm(t, p, "sequencer/bilstm1", x, b, steps);
                            }));

  out.push_back(checker.run("sequencer", trainable_with_prefix(spec, "sequencer/"), random_normal({b * steps, d}, rng),
                            [&](auto& t, const auto& p, Var x) {
                              return hybrid_sequencer(t, p, spec, x, b, steps, ad::Mode::train);
                            }));

  for (Task task : {Task::age8, Task::gender2}) {
    ModelSpec head_spec = spec;
    head_spec.task = task;
    head_spec.head_classes = head_classes_for(task);
    Rng head_rng = rng.fork(2 + static_cast<std::uint64_t>(task));
    const auto head_params = init_parameters<double>(head_spec, head_rng);
    BlockChecker head_checker(head_params, opts, rng);
    out.push_back(head_checker.run("head_" + std::string(task_name(task)), trainable_with_prefix(head_spec, "head/"),
                                   random_normal({b, spec.feature_width()}, rng),
                                   [&, task](auto& t, const auto& p, Var x) {
                                     return prediction_head(t, p, task, x);
                                   }));
  }

  TensorD images(Shape{b, spec.patch.height, spec.patch.width, spec.patch.channels});
  for (auto& v : images.data()) v = rng.normal();
  out.push_back(checker.run("model", trainable_with_prefix(spec, ""), TensorD{},
                            [&](auto& t, const auto& p, Var) {
                              return forward(t, p, spec, images.cast<scalar_of<decltype(t)>>(), train_options<decltype(t)>());
                            }));
  return out;
}

}  // namespace hts::model
