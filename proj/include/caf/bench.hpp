#pragma once

// Timing sweep over the block's kernels, with analytic arithmetic counts comparing
// channel (c x c) attention against spatial (hw x hw) attention.

#include "caf/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace caf {

/// Multiply-adds x 2 for the two products of c x c attention: (Q K^T) and (A V).
std::uint64_t channel_attention_flops(Index c, Index hw);
/// Same for spatial attention: (Q^T K) is hw x hw, then V A^T.
std::uint64_t spatial_attention_flops(Index c, Index hw);

/// Reference spatial self-attention on (n, c, h, w) with Q = K = V = x:
/// out[:, p] = sum_q softmax_q(x[:, p] . x[:, q] / alpha) x[:, q].
template <typename Scalar>
Tensor4<Scalar> spatial_attention_naive(const Tensor4<Scalar>& x, Scalar alpha);

/// Channel attention with Q = K = V = x: A = softmax(X X^T / alpha) (c x c), out = A X.
template <typename Scalar>
Tensor4<Scalar> channel_attention(const Tensor4<Scalar>& x, Scalar alpha);

struct BenchOptions {
  std::vector<Index> channels = {8, 16, 32};
  std::vector<Index> sides = {8, 16, 32};  // square inputs of side x side
  Index batch = 1;
  Index repeats = 7;
  std::uint64_t seed = 1;
};

struct BenchRow {
  std::string op;
  Shape4 shape;
  std::uint64_t flops = 0;  // analytic, 0 when not modelled
  double median_ms = 0.0;
  double min_ms = 0.0;
  double max_ms = 0.0;
  double stddev_ms = 0.0;
  double elements_per_s = 0.0;  // input elements processed per second at the median
  Index repeats = 0;
};

std::vector<BenchRow> run_bench(const BenchOptions& opts);

std::string bench_csv_header();
std::string bench_csv_row(const BenchRow& row);

}  // namespace caf
