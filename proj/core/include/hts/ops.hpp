#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "hts/tensor.hpp"

namespace hts {

/// Thread cap for intra-op parallelism, read once from HTS_THREADS (default 1).
std::size_t thread_limit();
void set_thread_limit(std::size_t n);

/// Splits [0, n) into contiguous chunks over at most thread_limit() threads.
/// Each index is handled by exactly one invocation so results do not depend
/// on the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body,
                  std::size_t min_chunk = 16);

/// c = a * b for rank-2 a[m x k], b[k x n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// c += op(a) * op(b) on raw row-major buffers; used by the backward rules.
/// trans_a / trans_b select the transposed operand.
template <typename T>
void gemm_accumulate(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                     const T* a, const T* b, T* c);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

/// Softmax along `axis` with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

enum class Reduction { mean, variance, sum };

/// Reduces over `axes` (dropped from the result). Variance divides by n.
template <typename T>
Tensor<T> reduce(const Tensor<T>& x, const std::vector<std::size_t>& axes, Reduction kind);

}  // namespace hts
