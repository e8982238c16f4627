#include "stdemand/graphs.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "stdemand/binary_io.hpp"
#include "stdemand/geo.hpp"

namespace stdemand {

MatD build_adjacency(const MatD& centers, double sigma_km, double epsilon) {
  if (centers.rows() == 0) throw ConfigError("cannot build a graph over zero nodes");
  if (centers.cols() != 2) throw ConfigError("centers must be N x 2 (lat, lon)");
  if (!(sigma_km > 0.0)) throw ConfigError("sigma_km must be positive");
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw ConfigError("epsilon must lie in [0, 1)");
  const auto n = centers.rows();
  MatD a = MatD::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double d = geo::haversine_km(centers(i, 0), centers(i, 1), centers(j, 0), centers(j, 1));
      const double w = std::exp(-(d * d) / (sigma_km * sigma_km));
      if (w >= epsilon) {
        a(i, j) = w;
        a(j, i) = w;
      }
    }
  }
  return a;
}

MatD build_shift(const MatD& adjacency) {
  if (adjacency.rows() != adjacency.cols()) throw ConfigError("adjacency must be square");
  const auto n = adjacency.rows();
  MatD m = adjacency + MatD::Identity(n, n);
  VecD inv_sqrt = m.rowwise().sum().cwiseSqrt().cwiseInverse();
  MatD s(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i; j < n; ++j) {
      const double v = inv_sqrt(i) * m(i, j) * inv_sqrt(j);
      s(i, j) = v;
      s(j, i) = v;
    }
  }
  return s;
}

GraphSpec make_graph(const MatD& centers, double sigma_km, double epsilon) {
  GraphSpec g;
  g.adjacency = build_adjacency(centers, sigma_km, epsilon);
  g.shift = build_shift(g.adjacency);
  return g;
}

GraphSpec GraphSpec::induced(const std::vector<std::size_t>& nodes) const {
  GraphSpec g;
  const auto n = static_cast<Eigen::Index>(nodes.size());
  g.adjacency.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      g.adjacency(i, j) = adjacency(static_cast<Eigen::Index>(nodes[static_cast<std::size_t>(i)]),
                                    static_cast<Eigen::Index>(nodes[static_cast<std::size_t>(j)]));
    }
  }
  g.shift = build_shift(g.adjacency);
  g.neighbor_order = neighbor_order;
  return g;
}

std::vector<std::vector<int>> k_hop_neighbors(const MatD& adjacency, int order) {
  if (order < 1) throw ConfigError("neighbor order must be >= 1");
  const auto n = static_cast<int>(adjacency.rows());
  std::vector<std::vector<int>> out(static_cast<std::size_t>(n));
  std::vector<int> dist(static_cast<std::size_t>(n));
  std::vector<int> frontier;
  for (int s = 0; s < n; ++s) {
    std::fill(dist.begin(), dist.end(), -1);
    dist[static_cast<std::size_t>(s)] = 0;
    frontier.assign(1, s);
    for (int hop = 1; hop <= order && !frontier.empty(); ++hop) {
      std::vector<int> next;
      for (int u : frontier) {
        for (int v = 0; v < n; ++v) {
          if (adjacency(u, v) > 0.0 && dist[static_cast<std::size_t>(v)] < 0) {
            dist[static_cast<std::size_t>(v)] = hop;
            next.push_back(v);
          }
        }
      }
      frontier = std::move(next);
    }
    for (int v = 0; v < n; ++v) {
      if (v != s && dist[static_cast<std::size_t>(v)] > 0) out[static_cast<std::size_t>(s)].push_back(v);
    }
  }
  return out;
}

std::vector<std::vector<int>> top_k_pattern(const MatD& weights, int k) {
  if (k < 1) throw ConfigError("top-k must be >= 1");
  const auto n = static_cast<int>(weights.rows());
  std::vector<std::vector<char>> keep(static_cast<std::size_t>(n), std::vector<char>(static_cast<std::size_t>(n), 0));
  std::vector<int> idx;
  for (int i = 0; i < n; ++i) {
    idx.clear();
    for (int j = 0; j < n; ++j) {
      if (j != i) idx.push_back(j);
    }
    const auto kk = std::min<std::size_t>(static_cast<std::size_t>(k), idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(kk), idx.end(), [&](int a, int b) {
      if (weights(i, a) != weights(i, b)) return weights(i, a) > weights(i, b);
      return a < b;
    });
    for (std::size_t q = 0; q < kk; ++q) {
      keep[static_cast<std::size_t>(i)][static_cast<std::size_t>(idx[q])] = 1;
      keep[static_cast<std::size_t>(idx[q])][static_cast<std::size_t>(i)] = 1;
    }
  }
  std::vector<std::vector<int>> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (keep[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]) out[static_cast<std::size_t>(i)].push_back(j);
    }
  }
  return out;
}

MaskPlan sample_mask(std::size_t n_observed, std::size_t n_mask, IndexRange window, std::mt19937_64& rng) {
  if (n_mask >= n_observed) throw ConfigError("mask count must be smaller than the number of observed nodes");
  if (window.end <= window.begin) throw ConfigError("mask window must be non-empty");
  std::vector<int> all(n_observed);
  std::iota(all.begin(), all.end(), 0);
  MaskPlan plan;
  plan.window = window;
  std::sample(all.begin(), all.end(), std::back_inserter(plan.masked_node_ids), static_cast<std::ptrdiff_t>(n_mask),
              rng);
  return plan;
}

MaskPlan sample_mask(std::size_t n_observed, std::size_t n_mask, IndexRange window, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_mask(n_observed, n_mask, window, rng);
}

MaskPlan sample_mask_bernoulli(std::size_t n_observed, double beta, IndexRange window, std::mt19937_64& rng) {
  if (!(beta >= 0.0 && beta < 1.0)) throw ConfigError("bernoulli mask rate must lie in [0, 1)");
  if (n_observed == 0) throw ConfigError("no observed nodes to mask");
  if (window.end <= window.begin) throw ConfigError("mask window must be non-empty");
  std::bernoulli_distribution coin(beta);
  MaskPlan plan;
  plan.window = window;
  for (std::size_t i = 0; i < n_observed; ++i) {
    if (coin(rng)) plan.masked_node_ids.push_back(static_cast<int>(i));
  }
  if (plan.masked_node_ids.size() == n_observed) {
    std::uniform_int_distribution<std::size_t> pick(0, n_observed - 1);
    plan.masked_node_ids.erase(plan.masked_node_ids.begin() + static_cast<std::ptrdiff_t>(pick(rng)));
  }
  return plan;
}

void write_graph(const GraphSpec& graph, std::ostream& out) {
  io::BinaryWriter w(out);
  const auto n = graph.adjacency.rows();
  if (graph.shift.rows() != n || graph.shift.cols() != n || graph.adjacency.cols() != n) {
    throw DataError("graph matrices have inconsistent shapes");
  }
  w.magic("IGR1");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(n));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) w.put<float>(static_cast<float>(graph.adjacency(i, j)));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) w.put<float>(static_cast<float>(graph.shift(i, j)));
  if (!w.ok()) throw DataError("failed writing graph");
}

GraphSpec read_graph(std::istream& in) {
  io::BinaryReader r(in);
  r.expect_magic("IGR1");
  const auto n = static_cast<Eigen::Index>(r.get<std::uint32_t>());
  GraphSpec g;
  g.adjacency.resize(n, n);
  g.shift.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) g.adjacency(i, j) = r.get<float>();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) g.shift(i, j) = r.get<float>();
  r.expect_eof();
  return g;
}

void write_graph(const GraphSpec& graph, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  write_graph(graph, out);
}

GraphSpec read_graph(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return read_graph(in);
}

}  // namespace stdemand
