#include <algorithm>
#include <cstdlib>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include "hts/ops.hpp"
#include "hts/tensor.hpp"

namespace hts {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

template <typename T>
void validate_finite(const Tensor<T>& t, const std::string& what) {
  const auto data = t.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(data[i])) {
      throw NumericError("non-finite value in " + what + " at element " + std::to_string(i));
    }
  }
}

template void validate_finite(const Tensor<float>&, const std::string&);
template void validate_finite(const Tensor<double>&, const std::string&);

namespace {

std::size_t& thread_limit_storage() {
  static std::size_t limit = [] {
    const char* env = std::getenv("HTS_THREADS");
    if (env == nullptr) return std::size_t{1};
    const long v = std::strtol(env, nullptr, 10);
    return v > 0 ? static_cast<std::size_t>(v) : std::size_t{1};
  }();
  return limit;
}

}  // namespace

std::size_t thread_limit() { return thread_limit_storage(); }

void set_thread_limit(std::size_t n) { thread_limit_storage() = std::max<std::size_t>(1, n); }

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body,
                  std::size_t min_chunk) {
  const std::size_t workers =
      std::min(thread_limit(), std::max<std::size_t>(1, n / std::max<std::size_t>(1, min_chunk)));
  if (workers <= 1) {
    if (n > 0) body(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&body, begin, end] { body(begin, end); });
  }
  body(0, std::min(n, chunk));
  for (auto& t : pool) t.join();
}

template <typename T>
void gemm_accumulate(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                     const T* a, const T* b, T* c) {
  // a is m x k (or k x m when transposed), b is k x n (or n x k).
  auto rows = [&](std::size_t r0, std::size_t r1) {
    if (!trans_b) {
      for (std::size_t i = r0; i < r1; ++i) {
        T* crow = c + i * n;
        for (std::size_t r = 0; r < k; ++r) {
          const T av = trans_a ? a[r * m + i] : a[i * k + r];
          if (av == T(0)) continue;
          const T* brow = b + r * n;
          for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      }
    } else {
      for (std::size_t i = r0; i < r1; ++i) {
        T* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
          const T* brow = b + j * k;
          T acc = T(0);
          if (!trans_a) {
            const T* arow = a + i * k;
            for (std::size_t r = 0; r < k; ++r) acc += arow[r] * brow[r];
          } else {
            for (std::size_t r = 0; r < k; ++r) acc += a[r * m + i] * brow[r];
          }
          crow[j] += acc;
        }
      }
    }
  };
  if (m * n * k < (1u << 18)) {
    rows(0, m);
  } else {
    parallel_for(m, rows, 4);
  }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul shape mismatch: " + shape_string(a.shape()) + " * " +
                         shape_string(b.shape()));
  }
  Tensor<T> c(Shape{a.dim(0), b.dim(1)});
  gemm_accumulate(false, false, a.dim(0), b.dim(1), a.dim(1), a.data().data(), b.data().data(),
                  c.data().data());
  return c;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects rank 2, got " + shape_string(a.shape()));
  Tensor<T> out(Shape{a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) out.at(j, i) = a.at(i, j);
  return out;
}

namespace {

// Views x as [outer, extent, inner] around `axis`.
struct AxisView {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisView split_axis(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i < axis) v.outer *= shape[i];
    else if (i == axis) v.extent = shape[i];
    else v.inner *= shape[i];
  }
  return v;
}

}  // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax axis " + std::to_string(axis) + " out of range for " +
                         shape_string(x.shape()));
  }
  const AxisView v = split_axis(x.shape(), axis);
  Tensor<T> out(x.shape());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.extent * v.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < v.extent; ++e) mx = std::max(mx, x[base + e * v.inner]);
      T total = T(0);
      for (std::size_t e = 0; e < v.extent; ++e) {
        const T ex = std::exp(x[base + e * v.inner] - mx);
        out[base + e * v.inner] = ex;
        total += ex;
      }
      for (std::size_t e = 0; e < v.extent; ++e) out[base + e * v.inner] /= total;
    }
  }
  return out;
}

template <typename T>
Tensor<T> reduce(const Tensor<T>& x, const std::vector<std::size_t>& axes, Reduction kind) {
  std::vector<bool> reduced(x.rank(), false);
  for (std::size_t a : axes) {
    if (a >= x.rank()) {
      throw DimensionError("reduce axis " + std::to_string(a) + " out of range for " +
                           shape_string(x.shape()));
    }
    reduced[a] = true;
  }
  if (axes.empty()) throw DomainError("reduce called with no axes");
  if (x.empty()) throw DomainError("reduction over an empty tensor");

  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (reduced[i]) count *= x.dim(i);
    else out_shape.push_back(x.dim(i));
  }

  // Map every input element to its output slot.
  std::vector<std::size_t> slot(x.size());
  {
    std::vector<std::size_t> index(x.rank(), 0);
    for (std::size_t flat = 0; flat < x.size(); ++flat) {
      std::size_t s = 0;
      for (std::size_t i = 0; i < x.rank(); ++i) {
        if (!reduced[i]) s = s * x.dim(i) + index[i];
      }
      slot[flat] = s;
      for (std::size_t i = x.rank(); i-- > 0;) {
        if (++index[i] < x.dim(i)) break;
        index[i] = 0;
      }
    }
  }

  Tensor<T> sums(out_shape);
  for (std::size_t flat = 0; flat < x.size(); ++flat) sums[slot[flat]] += x[flat];
  if (kind == Reduction::sum) return sums;

  Tensor<T> mean = sums;
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] /= static_cast<T>(count);
  if (kind == Reduction::mean) return mean;

  Tensor<T> var(out_shape);
  for (std::size_t flat = 0; flat < x.size(); ++flat) {
    const T d = x[flat] - mean[slot[flat]];
    var[slot[flat]] += d * d;
  }
  for (std::size_t i = 0; i < var.size(); ++i) var[i] /= static_cast<T>(count);
  return var;
}

#define HTS_INSTANTIATE(T)                                                                       \
  template void gemm_accumulate<T>(bool, bool, std::size_t, std::size_t, std::size_t, const T*, \
                                   const T*, T*);                                               \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                            \
  template Tensor<T> softmax<T>(const Tensor<T>&, std::size_t);                                 \
  template Tensor<T> reduce<T>(const Tensor<T>&, const std::vector<std::size_t>&, Reduction);

HTS_INSTANTIATE(float)
HTS_INSTANTIATE(double)
HTS_INSTANTIATE(long double)
#undef HTS_INSTANTIATE

}  // namespace hts
