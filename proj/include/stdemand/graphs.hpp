#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <vector>

#include "stdemand/common.hpp"

namespace stdemand {

struct GraphSpec {
  MatD adjacency;  // symmetric, zero diagonal, entries in [0, 1]
  MatD shift;      // D^{-1/2} (I + A) D^{-1/2}
  std::optional<MatD> functional_edges;
  int neighbor_order = 1;

  std::size_t n_nodes() const { return static_cast<std::size_t>(adjacency.rows()); }
  GraphSpec induced(const std::vector<std::size_t>& nodes) const;
};

/// Thresholded Gaussian kernel over haversine distances between (lat, lon) centers.
MatD build_adjacency(const MatD& centers, double sigma_km = 5.0, double epsilon = 0.1);

MatD build_shift(const MatD& adjacency);

GraphSpec make_graph(const MatD& centers, double sigma_km = 5.0, double epsilon = 0.1);

/// Row-normalized adjacency; rows that sum to zero stay zero.
template <typename Scalar>
Mat<Scalar> row_normalize(const Mat<Scalar>& adjacency) {
  Mat<Scalar> out = adjacency;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    Scalar s(0);
    for (Eigen::Index j = 0; j < out.cols(); ++j) {
      if (out(i, j) != Scalar(0)) s += out(i, j);
    }
    if (s != Scalar(0)) out.row(i) /= s;
  }
  return out;
}

/// Sorted neighbor lists of each node within `order` hops (self excluded).
std::vector<std::vector<int>> k_hop_neighbors(const MatD& adjacency, int order);

/// Gram matrix of encoding rows, computed once per unordered pair so the result is exactly symmetric.
template <typename Scalar>
Mat<Scalar> functional_edges(const Mat<Scalar>& vg) {
  const auto n = vg.rows();
  Mat<Scalar> e(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i; j < n; ++j) {
      const Scalar v = vg.row(i).dot(vg.row(j));
      e(i, j) = v;
      e(j, i) = v;
    }
  }
  return e;
}

/// For every row keep the `k` largest off-diagonal entries; an edge survives if either endpoint kept it.
/// Returns the selection as a symmetric boolean pattern (diagonal false).
std::vector<std::vector<int>> top_k_pattern(const MatD& weights, int k);

/// Top-k sparsified functional edges: dropped entries are zeroed, the result is re-symmetrized by max.
template <typename Scalar>
Mat<Scalar> sparsify_top_k(const Mat<Scalar>& e, int k) {
  const auto pattern = top_k_pattern(e.template cast<double>(), k);
  Mat<Scalar> out = Mat<Scalar>::Zero(e.rows(), e.cols());
  for (Eigen::Index i = 0; i < e.rows(); ++i) {
    out(i, i) = e(i, i);
    for (int j : pattern[static_cast<std::size_t>(i)]) out(i, j) = std::max(e(i, j), e(j, i));
  }
  return out;
}

struct MaskPlan {
  std::vector<int> masked_node_ids;  // sorted
  IndexRange window;
};

enum class MaskMode { fixed_count, bernoulli };

/// Uniformly random subset of exactly `n_mask` of the first `n_observed` nodes.
MaskPlan sample_mask(std::size_t n_observed, std::size_t n_mask, IndexRange window, std::mt19937_64& rng);
MaskPlan sample_mask(std::size_t n_observed, std::size_t n_mask, IndexRange window, std::uint64_t seed);

/// Each node masked independently with probability `beta`; at least one node stays visible.
MaskPlan sample_mask_bernoulli(std::size_t n_observed, double beta, IndexRange window, std::mt19937_64& rng);

void write_graph(const GraphSpec& graph, std::ostream& out);
GraphSpec read_graph(std::istream& in);
void write_graph(const GraphSpec& graph, const std::filesystem::path& path);
GraphSpec read_graph(const std::filesystem::path& path);

}  // namespace stdemand
