#pragma once

#include <filesystem>
#include <vector>

#include "stdemand/common.hpp"
#include "stdemand/encodings.hpp"
#include "stdemand/graphs.hpp"
#include "stdemand/ingest.hpp"
#include "stdemand/model.hpp"

namespace stdemand {

/// Everything known about one city: regions, their demand, proximity graph and encodings (rows aligned).
struct Dataset {
  RegionSet regions;
  DemandTensor demand;
  GraphSpec graph;
  EncodingTable encodings;

  std::size_t n_nodes() const { return regions.size(); }
  void validate() const;
  std::vector<std::size_t> indices_of(const std::vector<std::string>& ids) const;

  /// Reads demand.idt, regions.csv, graph.igr and encodings.iemb from a directory.
  static Dataset load(const std::filesystem::path& dir, double radius_km = 1.0);
  void save(const std::filesystem::path& dir) const;
};

/// Affine value scaling fitted on observed training entries. The network sees (x - offset) / scale.
struct Scaler {
  double offset = 0.0;
  double scale = 1.0;

  static Scaler fit(const DemandTensor& demand, const std::vector<std::size_t>& nodes, IndexRange steps);
  double forward(double x) const { return (x - offset) / scale; }
  double inverse(double y) const { return y * scale + offset; }
};

/// One window: model input plus scaled targets and 0/1 observation weights.
template <typename Scalar>
struct WindowData {
  ModelInput<Scalar> input;
  Mat<Scalar> history_target;    // N x (W * d_x), unmasked truth
  Mat<Scalar> history_observed;  // N x (W * d_x)
  Mat<Scalar> future_target;     // N x (H * d_x)
  Mat<Scalar> future_observed;   // N x (H * d_x)
  std::size_t forecast_start = 0;
};

/// Slices windows out of a node subset of a city. Node order follows `nodes`.
template <typename Scalar>
class WindowSource {
 public:
  WindowSource(const Dataset& data, std::vector<std::size_t> nodes, const Scaler& scaler, std::size_t window,
               std::size_t horizon);

  /// Window whose forecast starts at step `t` (history covers [t - W, t)). `hidden` are local node
  /// indices whose history is zero-filled.
  WindowData<Scalar> make(std::size_t t, const std::vector<int>& hidden) const;

  /// Valid forecast starts whose history and horizon both lie in [begin, end).
  std::vector<std::size_t> starts_within(IndexRange range) const;
  /// Valid forecast starts whose horizon lies in `range`; history may reach back before it.
  std::vector<std::size_t> starts_forecasting(IndexRange range) const;

  std::size_t n_nodes() const { return nodes_.size(); }
  const std::vector<std::size_t>& nodes() const { return nodes_; }
  const GraphContext<Scalar>& graph_context(int neighbor_order) const;

 private:
  std::vector<std::size_t> nodes_;
  std::size_t window_;
  std::size_t horizon_;
  std::size_t n_features_;
  std::size_t n_steps_;
  Mat<Scalar> values_;    // N x (d_x * T), scaled, zero where unobserved
  Mat<Scalar> observed_;  // N x T
  Mat<Scalar> covariates_;  // T x d_u
  Mat<Scalar> encodings_;
  MatD adjacency_;
  mutable std::vector<std::pair<int, GraphContext<Scalar>>> contexts_;
};

}  // namespace stdemand
