#include "caf/bench.hpp"

#include "caf/blocks.hpp"
#include "caf/kernels.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace caf {

std::uint64_t channel_attention_flops(Index c, Index hw) {
  const auto cc = static_cast<std::uint64_t>(c);
  return 2 * (2 * cc * cc * static_cast<std::uint64_t>(hw));
}

std::uint64_t spatial_attention_flops(Index c, Index hw) {
  const auto p = static_cast<std::uint64_t>(hw);
  return 2 * (2 * p * p * static_cast<std::uint64_t>(c));
}

template <typename S>
Tensor4<S> spatial_attention_naive(const Tensor4<S>& x, S alpha) {
  const Index c = x.c();
  const Index hw = x.h() * x.w();
  Tensor4<S> out(x.shape());
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  for (Index n = 0; n < x.n(); ++n) {
    Eigen::Map<const Mat> X(x.data() + n * c * hw, c, hw);
    Mat logits = (X.transpose() * X) / alpha;  // hw x hw
    for (Index p = 0; p < hw; ++p) {
      const S m = logits.row(p).maxCoeff();
      logits.row(p) = (logits.row(p).array() - m).exp();
      logits.row(p) /= logits.row(p).sum();
    }
    Eigen::Map<Mat>(out.data() + n * c * hw, c, hw) = X * logits.transpose();
  }
  return out;
}

template <typename S>
Tensor4<S> channel_attention(const Tensor4<S>& x, S alpha) {
  const Shape4 s = x.shape();
  const Shape4 mat{s.n, 1, s.c, s.h * s.w};
  const Tensor4<S> X = x.reshaped(mat);
  Tensor4<S> logits = matmul(X, transpose_last2(X));
  logits.array() /= alpha;
  return matmul(softmax_lastdim(logits), X).reshaped(s);
}

template Tensor4<float> spatial_attention_naive<float>(const Tensor4<float>&, float);
template Tensor4<double> spatial_attention_naive<double>(const Tensor4<double>&, double);
template Tensor4<float> channel_attention<float>(const Tensor4<float>&, float);
template Tensor4<double> channel_attention<double>(const Tensor4<double>&, double);

namespace {

template <typename Fn>
BenchRow time_op(std::string op, const Shape4& shape, std::uint64_t flops, Index repeats, Fn&& fn) {
  using Clock = std::chrono::steady_clock;
  fn();  // warm-up
  std::vector<double> ms;
  for (Index r = 0; r < repeats; ++r) {
    const auto t0 = Clock::now();
    fn();
    ms.push_back(std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
  }
  std::vector<double> sorted = ms;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t k = sorted.size();
  BenchRow row;
  row.op = std::move(op);
  row.shape = shape;
  row.flops = flops;
  row.median_ms = k % 2 ? sorted[k / 2] : 0.5 * (sorted[k / 2 - 1] + sorted[k / 2]);
  row.min_ms = sorted.front();
  row.max_ms = sorted.back();
  const double mean = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(k);
  double var = 0.0;
  for (double v : ms) var += (v - mean) * (v - mean);
  row.stddev_ms = k > 1 ? std::sqrt(var / static_cast<double>(k - 1)) : 0.0;
  row.elements_per_s = row.median_ms > 0.0 ? static_cast<double>(shape.count()) / (row.median_ms * 1e-3) : 0.0;
  row.repeats = repeats;
  return row;
}

}  // namespace

std::vector<BenchRow> run_bench(const BenchOptions& opts) {
  if (opts.repeats < 1 || opts.batch < 1) throw std::invalid_argument("bench: repeats and batch must be >= 1");
  std::mt19937_64 rng(opts.seed);
  std::vector<BenchRow> rows;
  for (Index c : opts.channels) {
    for (Index side : opts.sides) {
      const Shape4 s{opts.batch, c, side, side};
      const Index hw = side * side;
      const auto x = Tensor4<float>::uniform(s, -1.0f, 1.0f, rng);
      const float alpha = std::sqrt(static_cast<float>(c));
      rows.push_back(time_op("channel_attention", s, channel_attention_flops(c, hw) * static_cast<std::uint64_t>(s.n),
                             opts.repeats, [&] { return channel_attention(x, alpha); }));
      rows.push_back(time_op("spatial_attention_naive", s,
                             spatial_attention_flops(c, hw) * static_cast<std::uint64_t>(s.n), opts.repeats,
                             [&] { return spatial_attention_naive(x, alpha); }));
      const ConvSpec<float> conv = make_conv<float>(c, c, 3, 3, {{1, 1}, {1, 1}, {1, 1}, 1}, rng);
      const auto conv_flops = static_cast<std::uint64_t>(2 * c * c * 9 * hw * s.n);
      rows.push_back(time_op("conv2d_3x3", s, conv_flops, opts.repeats, [&] { return conv2d(x, conv); }));
      CafBlockConfig cfg;
      cfg.width = c;
      const CafBlockParams<float> block = init_caf_block<float>(cfg, rng);
      rows.push_back(time_op("caf_block_forward", s, 0, opts.repeats, [&] { return caf_block_forward(x, block); }));
    }
  }
  return rows;
}

std::string bench_csv_header() {
  return "op,n,c,h,w,flops,median_ms,min_ms,max_ms,stddev_ms,elements_per_s,repeats";
}

std::string bench_csv_row(const BenchRow& r) {
  std::ostringstream os;
  os << r.op << ',' << r.shape.n << ',' << r.shape.c << ',' << r.shape.h << ',' << r.shape.w << ',' << r.flops << ','
     << r.median_ms << ',' << r.min_ms << ',' << r.max_ms << ',' << r.stddev_ms << ',' << r.elements_per_s << ','
     << r.repeats;
  return os.str();
}

}  // namespace caf
