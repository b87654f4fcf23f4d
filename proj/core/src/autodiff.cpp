#include "hts/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>
#include <numbers>

#include "hts/ops.hpp"

namespace hts {

namespace {

std::mutex& fault_mutex() {
  static std::mutex m;
  return m;
}

std::optional<std::pair<std::string, double>>& fault_storage() {
  static std::optional<std::pair<std::string, double>> f;
  return f;
}

}  // namespace

void set_backward_fault(std::optional<std::string> op, double factor) {
  std::lock_guard lock(fault_mutex());
  if (op) fault_storage() = std::make_pair(*op, factor);
  else fault_storage().reset();
}

std::optional<std::pair<std::string, double>> backward_fault() {
  std::lock_guard lock(fault_mutex());
  return fault_storage();
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(Var v) {
  Node& n = nodes_.at(v.id);
  if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
void Tape<T>::accumulate(Var v, const Tensor<T>& g) {
  Node& n = nodes_.at(v.id);
  if (!n.requires_grad) return;
  if (g.size() != n.value.size()) {
    throw DimensionError("gradient " + shape_string(g.shape()) + " does not match value " +
                         shape_string(n.value.shape()) + " of node '" + n.op + "'");
  }
  Tensor<T>& buf = grad_buffer(v);
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

template <typename T>
void Tape<T>::backward(Var loss) {
  const Node& root = nodes_.at(loss.id);
  if (root.value.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        shape_string(root.value.shape()));
  }
  for (Node& n : nodes_) n.grad = Tensor<T>();
  grad_buffer(loss).fill(T(1));

  const auto fault = backward_fault();
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    if (fault && fault->first == n.op) {
      Tensor<T> g = n.grad;
      for (auto& x : g.data()) x *= static_cast<T>(fault->second);
      n.backward(*this, g);
    } else {
      // Copy: the rule may grow nodes_' grads but never this node's.
      const Tensor<T> g = n.grad;
      n.backward(*this, g);
    }
  }
}

template class Tape<float>;
template class Tape<double>;
template class Tape<long double>;

namespace ad {

namespace {

template <typename T>
void require_rank2(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got " + shape_string(t.shape()));
  }
}

template <typename T>
Tensor<T> map(const Tensor<T>& x, auto fn) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fn(x[i]);
  return out;
}

}  // namespace

template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  Tensor<T> out = hts::matmul(av, bv);
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  return tape.record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(a)) {
      gemm_accumulate(false, true, m, k, n, g.data().data(), t.value(b).data().data(),
                      t.grad_buffer(a).data().data());
    }
    if (t.requires_grad(b)) {
      gemm_accumulate(true, false, k, n, m, t.value(a).data().data(), g.data().data(),
                      t.grad_buffer(b).data().data());
    }
  });
}

template <typename T>
Var linear(Tape<T>& tape, Var x, Var kernel, Var bias) {
  const Tensor<T>& xv = tape.value(x);
  const Tensor<T>& wv = tape.value(kernel);
  const Tensor<T>& bv = tape.value(bias);
  require_rank2(xv, "linear");
  require_rank2(wv, "linear");
  if (xv.dim(1) != wv.dim(0) || bv.size() != wv.dim(1)) {
    throw DimensionError("linear shape mismatch: x " + shape_string(xv.shape()) + ", kernel " +
                         shape_string(wv.shape()) + ", bias " + shape_string(bv.shape()));
  }
  const std::size_t m = xv.dim(0), k = xv.dim(1), n = wv.dim(1);
  Tensor<T> out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = bv[j];
  gemm_accumulate(false, false, m, n, k, xv.data().data(), wv.data().data(), out.data().data());
  return tape.record("linear", std::move(out), {x, kernel, bias},
                     [x, kernel, bias, m, k, n](Tape<T>& t, const Tensor<T>& g) {
                       if (t.requires_grad(x)) {
                         gemm_accumulate(false, true, m, k, n, g.data().data(),
                                         t.value(kernel).data().data(),
                                         t.grad_buffer(x).data().data());
                       }
                       if (t.requires_grad(kernel)) {
                         gemm_accumulate(true, false, k, n, m, t.value(x).data().data(),
                                         g.data().data(), t.grad_buffer(kernel).data().data());
                       }
                       if (t.requires_grad(bias)) {
                         Tensor<T>& gb = t.grad_buffer(bias);
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                       }
                     });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  if (av.shape() != bv.shape()) {
    throw DimensionError("add shape mismatch: " + shape_string(av.shape()) + " + " +
                         shape_string(bv.shape()));
  }
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return tape.record("add", std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <typename T>
Var add_tiled(Tape<T>& tape, Var x, Var y) {
  const Tensor<T>& xv = tape.value(x);
  const Tensor<T>& yv = tape.value(y);
  if (yv.cols() != xv.cols() || xv.size() % yv.size() != 0) {
    throw DimensionError("add_tiled cannot tile " + shape_string(yv.shape()) + " over " +
                         shape_string(xv.shape()));
  }
  Tensor<T> out = xv;
  const std::size_t period = yv.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += yv[i % period];
  return tape.record("add_tiled", std::move(out), {x, y}, [x, y, period](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(x, g);
    if (t.requires_grad(y)) {
      Tensor<T>& gy = t.grad_buffer(y);
      for (std::size_t i = 0; i < g.size(); ++i) gy[i % period] += g[i];
    }
  });
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  if (av.shape() != bv.shape()) {
    throw DimensionError("mul shape mismatch: " + shape_string(av.shape()) + " * " +
                         shape_string(bv.shape()));
  }
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return tape.record("mul", std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(a)) {
      Tensor<T>& ga = t.grad_buffer(a);
      const Tensor<T>& bv = t.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      Tensor<T>& gb = t.grad_buffer(b);
      const Tensor<T>& av = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var scale(Tape<T>& tape, Var x, T factor) {
  Tensor<T> out = map(tape.value(x), [factor](T v) { return v * factor; });
  return tape.record("scale", std::move(out), {x}, [x, factor](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
  });
}

template <typename T>
Var gelu(Tape<T>& tape, Var x) {
  const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
  Tensor<T> out = map(tape.value(x), [inv_sqrt2](T v) {
    return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  });
  return tape.record("gelu", std::move(out), {x}, [x, inv_sqrt2](Tape<T>& t, const Tensor<T>& g) {
    const T inv_sqrt_2pi = static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    const Tensor<T>& xv = t.value(x);
    Tensor<T>& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = xv[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

namespace {

template <typename T>
T sigmoid_scalar(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

}  // namespace

template <typename T>
Var sigmoid(Tape<T>& tape, Var x) {
  Tensor<T> out = map(tape.value(x), [](T v) { return sigmoid_scalar(v); });
  Var y{};
  y = tape.record("sigmoid", out, {x}, [x, out](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * out[i] * (T(1) - out[i]);
  });
  return y;
}

template <typename T>
Var tanh(Tape<T>& tape, Var x) {
  Tensor<T> out = map(tape.value(x), [](T v) { return std::tanh(v); });
  return tape.record("tanh", out, {x}, [x, out](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (T(1) - out[i] * out[i]);
  });
}

template <typename T>
Var softmax_rows(Tape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.value(x);
  if (xv.rank() == 0) throw DimensionError("softmax_rows on a scalar");
  Tensor<T> out = hts::softmax(xv, xv.rank() - 1);
  return tape.record("softmax", out, {x}, [x, out](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_buffer(x);
    const std::size_t rows = out.rows(), cols = out.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = T(0);
      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * out[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = r * cols + c;
        gx[i] += out[i] * (g[i] - dot);
      }
    }
  });
}

namespace {

// Shared backward for row/column normalization given normalized values xhat,
// inverse std per group and the upstream gradient of xhat.
template <typename T>
void normalize_backward(std::size_t groups, std::size_t count, auto index, const Tensor<T>& xhat,
                        const std::vector<T>& inv_std, const Tensor<T>& dxhat, Tensor<T>& gx) {
  for (std::size_t gi = 0; gi < groups; ++gi) {
    T mean_d = T(0), mean_dx = T(0);
    for (std::size_t j = 0; j < count; ++j) {
      const std::size_t i = index(gi, j);
      mean_d += dxhat[i];
      mean_dx += dxhat[i] * xhat[i];
    }
    mean_d /= static_cast<T>(count);
    mean_dx /= static_cast<T>(count);
    for (std::size_t j = 0; j < count; ++j) {
      const std::size_t i = index(gi, j);
      gx[i] += inv_std[gi] * (dxhat[i] - mean_d - xhat[i] * mean_dx);
    }
  }
}

}  // namespace

template <typename T>
Var layer_norm(Tape<T>& tape, Var x, Var gamma, Var beta, T eps) {
  const Tensor<T>& xv = tape.value(x);
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (tape.value(gamma).size() != cols || tape.value(beta).size() != cols) {
    throw DimensionError("layer_norm scale/shift must have " + std::to_string(cols) + " elements");
  }
  Tensor<T> xhat(xv.shape());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T mean = T(0);
    for (std::size_t c = 0; c < cols; ++c) mean += xv[r * cols + c];
    mean /= static_cast<T>(cols);
    T var = T(0);
    for (std::size_t c = 0; c < cols; ++c) {
      const T d = xv[r * cols + c] - mean;
      var += d * d;
    }
    var /= static_cast<T>(cols);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) xhat[r * cols + c] = (xv[r * cols + c] - mean) * inv_std[r];
  }
  const Tensor<T>& gv = tape.value(gamma);
  const Tensor<T>& bv = tape.value(beta);
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = gv[c] * xhat[r * cols + c] + bv[c];

  return tape.record(
      "layer_norm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, cols](
          Tape<T>& t, const Tensor<T>& g) {
        const Tensor<T>& gv = t.value(gamma);
        if (t.requires_grad(gamma) || t.requires_grad(beta)) {
          Tensor<T> dg(gv.shape()), db(gv.shape());
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
              dg[c] += g[r * cols + c] * xhat[r * cols + c];
              db[c] += g[r * cols + c];
            }
          t.accumulate(gamma, dg);
          t.accumulate(beta, db);
        }
        if (t.requires_grad(x)) {
          Tensor<T> dxhat(g.shape());
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) dxhat[r * cols + c] = g[r * cols + c] * gv[c];
          normalize_backward<T>(rows, cols, [cols](std::size_t r, std::size_t c) { return r * cols + c; },
                                xhat, inv_std, dxhat, t.grad_buffer(x));
        }
      });
}

template <typename T>
Var batch_norm(Tape<T>& tape, Var x, Var gamma, Var beta, Mode mode, BatchNormState<T> state,
               T momentum, T eps) {
  const Tensor<T>& xv = tape.value(x);
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (tape.value(gamma).size() != cols || tape.value(beta).size() != cols) {
    throw DimensionError("batch_norm scale/shift must have " + std::to_string(cols) + " elements");
  }
  const Tensor<T>& gv = tape.value(gamma);
  const Tensor<T>& bv = tape.value(beta);
  Tensor<T> out(xv.shape());

  if (mode == Mode::infer) {
    if (state.mean == nullptr || state.variance == nullptr || state.mean->empty() ||
        state.variance->empty()) {
      throw StateError("batch_norm inference requires populated moving statistics");
    }
    if (state.mean->size() != cols || state.variance->size() != cols) {
      throw DimensionError("batch_norm moving statistics must have " + std::to_string(cols) +
                           " elements");
    }
    std::vector<T> mean(state.mean->data().begin(), state.mean->data().end());
    std::vector<T> inv_std(cols);
    for (std::size_t c = 0; c < cols; ++c) inv_std[c] = T(1) / std::sqrt((*state.variance)[c] + eps);
    Tensor<T> xhat(xv.shape());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = r * cols + c;
        xhat[i] = (xv[i] - mean[c]) * inv_std[c];
        out[i] = gv[c] * xhat[i] + bv[c];
      }
    return tape.record("batch_norm", std::move(out), {x, gamma, beta},
                       [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
                        cols](Tape<T>& t, const Tensor<T>& g) {
                         const Tensor<T>& gv = t.value(gamma);
                         Tensor<T> dg(gv.shape()), db(gv.shape());
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t c = 0; c < cols; ++c) {
                             dg[c] += g[r * cols + c] * xhat[r * cols + c];
                             db[c] += g[r * cols + c];
                           }
                         t.accumulate(gamma, dg);
                         t.accumulate(beta, db);
                         if (t.requires_grad(x)) {
                           Tensor<T>& gx = t.grad_buffer(x);
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t c = 0; c < cols; ++c)
                               gx[r * cols + c] += g[r * cols + c] * gv[c] * inv_std[c];
                         }
                       });
  }

  std::vector<T> mean(cols, T(0)), var(cols, T(0)), inv_std(cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) mean[c] += xv[r * cols + c];
  for (auto& m : mean) m /= static_cast<T>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const T d = xv[r * cols + c] - mean[c];
      var[c] += d * d;
    }
  for (auto& v : var) v /= static_cast<T>(rows);
  for (std::size_t c = 0; c < cols; ++c) inv_std[c] = T(1) / std::sqrt(var[c] + eps);

  Tensor<T> xhat(xv.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      xhat[i] = (xv[i] - mean[c]) * inv_std[c];
      out[i] = gv[c] * xhat[i] + bv[c];
    }

  if (state.mean != nullptr && state.variance != nullptr) {
    if (state.mean->empty()) *state.mean = Tensor<T>(Shape{cols}, T(0));
    if (state.variance->empty()) *state.variance = Tensor<T>(Shape{cols}, T(1));
    for (std::size_t c = 0; c < cols; ++c) {
      (*state.mean)[c] = momentum * (*state.mean)[c] + (T(1) - momentum) * mean[c];
      (*state.variance)[c] = momentum * (*state.variance)[c] + (T(1) - momentum) * var[c];
    }
  }

  return tape.record(
      "batch_norm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, cols](
          Tape<T>& t, const Tensor<T>& g) {
        const Tensor<T>& gv = t.value(gamma);
        Tensor<T> dg(gv.shape()), db(gv.shape());
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) {
            dg[c] += g[r * cols + c] * xhat[r * cols + c];
            db[c] += g[r * cols + c];
          }
        t.accumulate(gamma, dg);
        t.accumulate(beta, db);
        if (t.requires_grad(x)) {
          Tensor<T> dxhat(g.shape());
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) dxhat[r * cols + c] = g[r * cols + c] * gv[c];
          normalize_backward<T>(cols, rows, [cols](std::size_t c, std::size_t r) { return r * cols + c; },
                                xhat, inv_std, dxhat, t.grad_buffer(x));
        }
      });
}

template <typename T>
Var concat_cols(Tape<T>& tape, const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols needs at least one input");
  const std::size_t rows = tape.value(parts[0]).rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (Var p : parts) {
    const Tensor<T>& v = tape.value(p);
    require_rank2(v, "concat_cols");
    if (v.rows() != rows) {
      throw DimensionError("concat_cols row mismatch: " + std::to_string(v.rows()) + " vs " +
                           std::to_string(rows));
    }
    widths.push_back(v.cols());
    total += v.cols();
  }
  Tensor<T> out(Shape{rows, total});
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor<T>& v = tape.value(parts[p]);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(&v[r * widths[p]], widths[p], &out[r * total + offset]);
    offset += widths[p];
  }
  return tape.record("concat_cols", std::move(out), parts,
                     [parts, widths, rows, total](Tape<T>& t, const Tensor<T>& g) {
                       std::size_t offset = 0;
                       for (std::size_t p = 0; p < parts.size(); ++p) {
                         if (t.requires_grad(parts[p])) {
                           Tensor<T>& gp = t.grad_buffer(parts[p]);
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t c = 0; c < widths[p]; ++c)
                               gp[r * widths[p] + c] += g[r * total + offset + c];
                         }
                         offset += widths[p];
                       }
                     });
}

template <typename T>
Var concat_rows(Tape<T>& tape, const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_rows needs at least one input");
  const std::size_t cols = tape.value(parts[0]).cols();
  std::vector<std::size_t> sizes;
  std::vector<T> data;
  for (Var p : parts) {
    const Tensor<T>& v = tape.value(p);
    if (v.cols() != cols) {
      throw DimensionError("concat_rows column mismatch: " + std::to_string(v.cols()) + " vs " +
                           std::to_string(cols));
    }
    sizes.push_back(v.size());
    data.insert(data.end(), v.data().begin(), v.data().end());
  }
  const std::size_t rows = data.size() / cols;
  return tape.record("concat_rows", Tensor<T>(Shape{rows, cols}, std::move(data)), parts,
                     [parts, sizes](Tape<T>& t, const Tensor<T>& g) {
                       std::size_t offset = 0;
                       for (std::size_t p = 0; p < parts.size(); ++p) {
                         if (t.requires_grad(parts[p])) {
                           Tensor<T>& gp = t.grad_buffer(parts[p]);
                           for (std::size_t i = 0; i < sizes[p]; ++i) gp[i] += g[offset + i];
                         }
                         offset += sizes[p];
                       }
                     });
}

template <typename T>
Var gather_rows(Tape<T>& tape, Var x, std::vector<std::size_t> rows) {
  const Tensor<T>& xv = tape.value(x);
  const std::size_t cols = xv.cols();
  if (rows.empty()) throw ContractError("gather_rows needs at least one row");
  Tensor<T> out(Shape{rows.size(), cols});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= xv.rows()) {
      throw DimensionError("gather_rows index " + std::to_string(rows[i]) + " out of range for " +
                           shape_string(xv.shape()));
    }
    std::copy_n(&xv[rows[i] * cols], cols, &out[i * cols]);
  }
  return tape.record("gather_rows", std::move(out), {x},
                     [x, rows = std::move(rows), cols](Tape<T>& t, const Tensor<T>& g) {
                       Tensor<T>& gx = t.grad_buffer(x);
                       for (std::size_t i = 0; i < rows.size(); ++i)
                         for (std::size_t c = 0; c < cols; ++c) gx[rows[i] * cols + c] += g[i * cols + c];
                     });
}

template <typename T>
Var group_mean_rows(Tape<T>& tape, Var x, std::size_t groups) {
  const Tensor<T>& xv = tape.value(x);
  if (groups == 0 || xv.rows() % groups != 0) {
    throw DimensionError("group_mean_rows: " + std::to_string(xv.rows()) +
                         " rows do not split into " + std::to_string(groups) + " groups");
  }
  const std::size_t per = xv.rows() / groups, cols = xv.cols();
  Tensor<T> out(Shape{groups, cols});
  for (std::size_t gi = 0; gi < groups; ++gi) {
    for (std::size_t r = 0; r < per; ++r)
      for (std::size_t c = 0; c < cols; ++c) out[gi * cols + c] += xv[(gi * per + r) * cols + c];
    for (std::size_t c = 0; c < cols; ++c) out[gi * cols + c] /= static_cast<T>(per);
  }
  return tape.record("group_mean", std::move(out), {x}, [x, groups, per, cols](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_buffer(x);
    const T inv = T(1) / static_cast<T>(per);
    for (std::size_t gi = 0; gi < groups; ++gi)
      for (std::size_t r = 0; r < per; ++r)
        for (std::size_t c = 0; c < cols; ++c) gx[(gi * per + r) * cols + c] += g[gi * cols + c] * inv;
  });
}

template <typename T>
Var multi_head_attention(Tape<T>& tape, Var q, Var k, Var v, std::size_t batch, std::size_t tokens,
                         std::size_t heads, std::vector<Tensor<T>>* probs) {
  const Tensor<T>& qv = tape.value(q);
  const Tensor<T>& kv = tape.value(k);
  const Tensor<T>& vv = tape.value(v);
  const std::size_t width = qv.cols();
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("attention heads (" + std::to_string(heads) + ") must divide width " +
                      std::to_string(width));
  }
  if (qv.rows() != batch * tokens || kv.shape() != qv.shape() || vv.shape() != qv.shape()) {
    throw DimensionError("attention expects q, k, v of shape [" + std::to_string(batch * tokens) +
                         "x" + std::to_string(width) + "]");
  }
  const std::size_t hd = width / heads;
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(hd));

  // Attention weights per (sample, head), each [tokens x tokens].
  std::vector<Tensor<T>> weights;
  weights.reserve(batch * heads);
  Tensor<T> out(qv.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor<T> a(Shape{tokens, tokens});
      for (std::size_t i = 0; i < tokens; ++i) {
        const T* qi = &qv[(b * tokens + i) * width + h * hd];
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < tokens; ++j) {
          const T* kj = &kv[(b * tokens + j) * width + h * hd];
          T s = T(0);
          for (std::size_t d = 0; d < hd; ++d) s += qi[d] * kj[d];
          s *= inv_scale;
          a.at(i, j) = s;
          mx = std::max(mx, s);
        }
        T total = T(0);
        for (std::size_t j = 0; j < tokens; ++j) {
          a.at(i, j) = std::exp(a.at(i, j) - mx);
          total += a.at(i, j);
        }
        for (std::size_t j = 0; j < tokens; ++j) a.at(i, j) /= total;
        T* oi = &out[(b * tokens + i) * width + h * hd];
        for (std::size_t j = 0; j < tokens; ++j) {
          const T w = a.at(i, j);
          const T* vj = &vv[(b * tokens + j) * width + h * hd];
          for (std::size_t d = 0; d < hd; ++d) oi[d] += w * vj[d];
        }
      }
      if (probs != nullptr) probs->push_back(a);
      weights.push_back(std::move(a));
    }
  }

  return tape.record(
      "attention", std::move(out), {q, k, v},
      [q, k, v, batch, tokens, heads, hd, width, inv_scale, weights = std::move(weights)](
          Tape<T>& t, const Tensor<T>& g) {
        const Tensor<T>& qv = t.value(q);
        const Tensor<T>& kv = t.value(k);
        const Tensor<T>& vv = t.value(v);
        Tensor<T> dq(qv.shape()), dk(kv.shape()), dv(vv.shape());
        std::vector<T> da(tokens);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const Tensor<T>& a = weights[b * heads + h];
            for (std::size_t i = 0; i < tokens; ++i) {
              const T* gi = &g[(b * tokens + i) * width + h * hd];
              // dA[i, j] = dO[i] . V[j];  dV[j] += A[i, j] dO[i]
              T dot = T(0);
              for (std::size_t j = 0; j < tokens; ++j) {
                const std::size_t rj = (b * tokens + j) * width + h * hd;
                T s = T(0);
                for (std::size_t d = 0; d < hd; ++d) {
                  s += gi[d] * vv[rj + d];
                  dv[rj + d] += a.at(i, j) * gi[d];
                }
                da[j] = s;
                dot += s * a.at(i, j);
              }
              const std::size_t ri = (b * tokens + i) * width + h * hd;
              for (std::size_t j = 0; j < tokens; ++j) {
                const T ds = a.at(i, j) * (da[j] - dot) * inv_scale;
                if (ds == T(0)) continue;
                const std::size_t rj = (b * tokens + j) * width + h * hd;
                for (std::size_t d = 0; d < hd; ++d) {
                  dq[ri + d] += ds * kv[rj + d];
                  dk[rj + d] += ds * qv[ri + d];
                }
              }
            }
          }
        }
        t.accumulate(q, dq);
        t.accumulate(k, dk);
        t.accumulate(v, dv);
      });
}

template <typename T>
Var lstm(Tape<T>& tape, Var x, Var kernel, Var recurrent, Var bias, std::size_t batch,
         std::size_t steps, bool reverse) {
  const Tensor<T>& xv = tape.value(x);
  const Tensor<T>& wx = tape.value(kernel);
  const Tensor<T>& wh = tape.value(recurrent);
  const Tensor<T>& bv = tape.value(bias);
  require_rank2(xv, "lstm");
  const std::size_t features = xv.cols();
  const std::size_t units = wh.dim(0);
  const std::size_t g4 = 4 * units;
  if (steps == 0 || xv.rows() != batch * steps) {
    throw DimensionError("lstm input " + shape_string(xv.shape()) + " is not [batch*steps x f] for batch " +
                         std::to_string(batch) + ", steps " + std::to_string(steps));
  }
  if (wx.shape() != Shape{features, g4} || wh.shape() != Shape{units, g4} || bv.size() != g4) {
    throw DimensionError("lstm parameter shapes: kernel " + shape_string(wx.shape()) +
                         ", recurrent " + shape_string(wh.shape()) + ", bias " +
                         shape_string(bv.shape()) + " for " + std::to_string(features) +
                         " features");
  }
  const std::size_t rows = batch * steps;

  // Pre-activations from the input for every row at once.
  Tensor<T> z(Shape{rows, g4});
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(bv.data().data(), g4, &z[r * g4]);
  gemm_accumulate(false, false, rows, g4, features, xv.data().data(), wx.data().data(), z.data().data());

  // Saved per row: activated gates [i f g o], cell state, tanh(cell).
  Tensor<T> gates(Shape{rows, g4});
  Tensor<T> cell(Shape{rows, units});
  Tensor<T> cell_tanh(Shape{rows, units});
  Tensor<T> out(Shape{rows, units});

  std::vector<T> h_prev(batch * units, T(0)), c_prev(batch * units, T(0));
  std::vector<T> zstep(batch * g4);
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t time = reverse ? steps - 1 - s : s;
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(&z[(b * steps + time) * g4], g4, &zstep[b * g4]);
    gemm_accumulate(false, false, batch, g4, units, h_prev.data(), wh.data().data(), zstep.data());
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t row = b * steps + time;
      T* gr = &gates[row * g4];
      const T* zr = &zstep[b * g4];
      for (std::size_t u = 0; u < units; ++u) {
        const T ig = sigmoid_scalar(zr[u]);
        const T fg = sigmoid_scalar(zr[units + u]);
        const T cg = std::tanh(zr[2 * units + u]);
        const T og = sigmoid_scalar(zr[3 * units + u]);
        gr[u] = ig;
        gr[units + u] = fg;
        gr[2 * units + u] = cg;
        gr[3 * units + u] = og;
        const T c = fg * c_prev[b * units + u] + ig * cg;
        const T tc = std::tanh(c);
        cell[row * units + u] = c;
        cell_tanh[row * units + u] = tc;
        out[row * units + u] = og * tc;
        c_prev[b * units + u] = c;
        h_prev[b * units + u] = og * tc;
      }
    }
  }

  return tape.record(
      "lstm", out, {x, kernel, recurrent, bias},
      [x, kernel, recurrent, bias, batch, steps, reverse, features, units, g4, rows,
       gates = std::move(gates), cell = std::move(cell), cell_tanh = std::move(cell_tanh),
       out](Tape<T>& t, const Tensor<T>& g) {
        const Tensor<T>& wh = t.value(recurrent);
        Tensor<T> dz(Shape{rows, g4});
        Tensor<T> dwh(wh.shape());
        std::vector<T> dh_next(batch * units, T(0)), dc_next(batch * units, T(0));
        std::vector<T> dzstep(batch * g4), hprev(batch * units);
        for (std::size_t s = steps; s-- > 0;) {
          const std::size_t time = reverse ? steps - 1 - s : s;
          const bool first = s == 0;
          const std::size_t prev_time = reverse ? time + 1 : time - 1;
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t row = b * steps + time;
            const T* gr = &gates[row * g4];
            for (std::size_t u = 0; u < units; ++u) {
              const std::size_t bu = b * units + u;
              const T ig = gr[u], fg = gr[units + u], cg = gr[2 * units + u], og = gr[3 * units + u];
              const T tc = cell_tanh[row * units + u];
              const T c_before = first ? T(0) : cell[(b * steps + prev_time) * units + u];
              const T dh = g[row * units + u] + dh_next[bu];
              const T dc = dh * og * (T(1) - tc * tc) + dc_next[bu];
              T* dzr = &dzstep[b * g4];
              dzr[u] = dc * cg * ig * (T(1) - ig);
              dzr[units + u] = dc * c_before * fg * (T(1) - fg);
              dzr[2 * units + u] = dc * ig * (T(1) - cg * cg);
              dzr[3 * units + u] = dh * tc * og * (T(1) - og);
              dc_next[bu] = dc * fg;
              hprev[bu] = first ? T(0) : out[(b * steps + prev_time) * units + u];
            }
            std::copy_n(&dzstep[b * g4], g4, &dz[row * g4]);
          }
          // dh_{t-1} = dz Wh^T ; dWh += h_{t-1}^T dz
          std::fill(dh_next.begin(), dh_next.end(), T(0));
          gemm_accumulate(false, true, batch, units, g4, dzstep.data(), wh.data().data(), dh_next.data());
          if (!first) {
            gemm_accumulate(true, false, units, g4, batch, hprev.data(), dzstep.data(), dwh.data().data());
          }
        }
        if (t.requires_grad(recurrent)) t.accumulate(recurrent, dwh);
        if (t.requires_grad(x)) {
          gemm_accumulate(false, true, rows, features, g4, dz.data().data(),
                          t.value(kernel).data().data(), t.grad_buffer(x).data().data());
        }
        if (t.requires_grad(kernel)) {
          gemm_accumulate(true, false, features, g4, rows, t.value(x).data().data(), dz.data().data(),
                          t.grad_buffer(kernel).data().data());
        }
        if (t.requires_grad(bias)) {
          Tensor<T>& gb = t.grad_buffer(bias);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < g4; ++j) gb[j] += dz[r * g4 + j];
        }
      });
}

template <typename T>
Var dropout(Tape<T>& tape, Var x, T rate, Rng& rng) {
  if (rate <= T(0)) return x;
  if (rate >= T(1)) throw ConfigError("dropout rate must be below 1");
  const Tensor<T>& xv = tape.value(x);
  Tensor<T> mask(xv.shape());
  const T keep = T(1) / (T(1) - rate);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = rng.uniform() < rate ? T(0) : keep;
  Tensor<T> out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return tape.record("dropout", std::move(out), {x}, [x, mask = std::move(mask)](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
}

template <typename T>
Var sum(Tape<T>& tape, Var x) {
  T total = T(0);
  for (T v : tape.value(x).data()) total += v;
  return tape.record("sum", Tensor<T>::scalar(total), {x}, [x](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_buffer(x);
    for (auto& v : gx.data()) v += g[0];
  });
}

template <typename T>
Var weighted_sum(Tape<T>& tape, Var x, const Tensor<T>& weights) {
  const Tensor<T>& xv = tape.value(x);
  if (weights.size() != xv.size()) {
    throw DimensionError("weighted_sum weights " + shape_string(weights.shape()) +
                         " do not match " + shape_string(xv.shape()));
  }
  T total = T(0);
  for (std::size_t i = 0; i < xv.size(); ++i) total += xv[i] * weights[i];
  return tape.record("weighted_sum", Tensor<T>::scalar(total), {x}, [x, weights](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < weights.size(); ++i) gx[i] += g[0] * weights[i];
  });
}

#define HTS_INSTANTIATE(T)                                                                          \
  template Var matmul<T>(Tape<T>&, Var, Var);                                                      \
  template Var linear<T>(Tape<T>&, Var, Var, Var);                                                 \
  template Var add<T>(Tape<T>&, Var, Var);                                                         \
  template Var add_tiled<T>(Tape<T>&, Var, Var);                                                   \
  template Var mul<T>(Tape<T>&, Var, Var);                                                         \
  template Var scale<T>(Tape<T>&, Var, T);                                                         \
  template Var gelu<T>(Tape<T>&, Var);                                                             \
  template Var sigmoid<T>(Tape<T>&, Var);                                                          \
  template Var tanh<T>(Tape<T>&, Var);                                                             \
  template Var softmax_rows<T>(Tape<T>&, Var);                                                     \
  template Var layer_norm<T>(Tape<T>&, Var, Var, Var, T);                                          \
  template Var batch_norm<T>(Tape<T>&, Var, Var, Var, Mode, BatchNormState<T>, T, T);              \
  template Var concat_cols<T>(Tape<T>&, const std::vector<Var>&);                                  \
  template Var concat_rows<T>(Tape<T>&, const std::vector<Var>&);                                  \
  template Var gather_rows<T>(Tape<T>&, Var, std::vector<std::size_t>);                            \
  template Var group_mean_rows<T>(Tape<T>&, Var, std::size_t);                                     \
  template Var multi_head_attention<T>(Tape<T>&, Var, Var, Var, std::size_t, std::size_t,          \
                                       std::size_t, std::vector<Tensor<T>>*);                      \
  template Var lstm<T>(Tape<T>&, Var, Var, Var, Var, std::size_t, std::size_t, bool);              \
  template Var dropout<T>(Tape<T>&, Var, T, Rng&);                                                 \
  template Var sum<T>(Tape<T>&, Var);                                                              \
  template Var weighted_sum<T>(Tape<T>&, Var, const Tensor<T>&);

HTS_INSTANTIATE(float)
HTS_INSTANTIATE(double)
HTS_INSTANTIATE(long double)
#undef HTS_INSTANTIATE

}  // namespace ad
}  // namespace hts
