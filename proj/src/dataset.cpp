#include "stdemand/dataset.hpp"

#include <cmath>
#include <unordered_map>

namespace stdemand {

void Dataset::validate() const {
  regions.validate();
  demand.validate();
  encodings.validate();
  if (demand.n_nodes != regions.size()) throw DataError("demand tensor and region set disagree on node count");
  if (graph.n_nodes() != regions.size()) throw DataError("graph and region set disagree on node count");
  if (encodings.size() != regions.size()) throw DataError("encodings and region set disagree on node count");
  for (std::size_t i = 0; i < regions.size(); ++i) {
    if (encodings.region_ids[i] != regions.region_ids[i]) throw DataError("encoding rows are not aligned with regions");
  }
}

std::vector<std::size_t> Dataset::indices_of(const std::vector<std::string>& ids) const {
  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < regions.size(); ++i) pos.emplace(regions.region_ids[i], i);
  std::vector<std::size_t> out;
  for (const auto& id : ids) {
    auto it = pos.find(id);
    if (it == pos.end()) throw DataError("unknown region id " + id);
    out.push_back(it->second);
  }
  return out;
}

Dataset Dataset::load(const std::filesystem::path& dir, double radius_km) {
  Dataset d;
  d.regions = read_regions_csv(dir / "regions.csv", radius_km);
  d.demand = read_demand(dir / "demand.idt");
  d.graph = read_graph(dir / "graph.igr");
  d.encodings = read_encodings(dir / "encodings.iemb").reorder(d.regions.region_ids);
  d.validate();
  return d;
}

void Dataset::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  write_regions_csv(regions, dir / "regions.csv");
  write_demand(demand, dir / "demand.idt");
  write_graph(graph, dir / "graph.igr");
  write_encodings(encodings, dir / "encodings.iemb");
}

Scaler Scaler::fit(const DemandTensor& demand, const std::vector<std::size_t>& nodes, IndexRange steps) {
  double sum = 0.0;
  double sq = 0.0;
  std::size_t count = 0;
  for (auto n : nodes) {
    for (std::size_t t = steps.begin; t < steps.end; ++t) {
      if (!demand.observed(n, t)) continue;
      for (std::size_t d = 0; d < demand.n_features; ++d) {
        const double v = demand.at(n, d, t);
        sum += v;
        sq += v * v;
        ++count;
      }
    }
  }
  if (count == 0) throw DataError("no observed training entries to fit the value scaler");
  Scaler s;
  s.offset = sum / static_cast<double>(count);
  const double var = sq / static_cast<double>(count) - s.offset * s.offset;
  s.scale = var > 1e-12 ? std::sqrt(var) : 1.0;
  return s;
}

template <typename Scalar>
WindowSource<Scalar>::WindowSource(const Dataset& data, std::vector<std::size_t> nodes, const Scaler& scaler,
                                   std::size_t window, std::size_t horizon)
    : nodes_(std::move(nodes)),
      window_(window),
      horizon_(horizon),
      n_features_(data.demand.n_features),
      n_steps_(data.demand.n_steps) {
  const auto n = static_cast<Eigen::Index>(nodes_.size());
  const auto t_total = static_cast<Eigen::Index>(n_steps_);
  values_ = Mat<Scalar>::Zero(n, static_cast<Eigen::Index>(n_features_) * t_total);
  observed_ = Mat<Scalar>::Zero(n, t_total);
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto node = nodes_[static_cast<std::size_t>(k)];
    for (std::size_t t = 0; t < n_steps_; ++t) {
      if (!data.demand.observed(node, t)) continue;
      observed_(k, static_cast<Eigen::Index>(t)) = Scalar(1);
      for (std::size_t d = 0; d < n_features_; ++d) {
        values_(k, static_cast<Eigen::Index>(d * n_steps_ + t)) =
            static_cast<Scalar>(scaler.forward(data.demand.at(node, d, t)));
      }
    }
  }
  covariates_ = build_covariates(data.demand.t0, n_steps_, data.demand.interval_seconds).cast<Scalar>();
  encodings_ = data.encodings.select(nodes_).values.template cast<Scalar>();
  adjacency_.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      adjacency_(i, j) = data.graph.adjacency(static_cast<Eigen::Index>(nodes_[static_cast<std::size_t>(i)]),
                                              static_cast<Eigen::Index>(nodes_[static_cast<std::size_t>(j)]));
}

template <typename Scalar>
const GraphContext<Scalar>& WindowSource<Scalar>::graph_context(int neighbor_order) const {
  for (const auto& [order, ctx] : contexts_) {
    if (order == neighbor_order) return ctx;
  }
  contexts_.emplace_back(neighbor_order, GraphContext<Scalar>::build(adjacency_, neighbor_order));
  return contexts_.back().second;
}

template <typename Scalar>
WindowData<Scalar> WindowSource<Scalar>::make(std::size_t t, const std::vector<int>& hidden) const {
  if (t < window_ || t + horizon_ > n_steps_) throw ConfigError("window does not fit in the series");
  const auto n = static_cast<Eigen::Index>(nodes_.size());
  const auto w = static_cast<Eigen::Index>(window_);
  const auto h = static_cast<Eigen::Index>(horizon_);
  const auto du = covariates_.cols();
  WindowData<Scalar> out;
  out.forecast_start = t;
  out.history_target.resize(n, static_cast<Eigen::Index>(n_features_) * w);
  out.history_observed.resize(n, static_cast<Eigen::Index>(n_features_) * w);
  out.future_target.resize(n, static_cast<Eigen::Index>(n_features_) * h);
  out.future_observed.resize(n, static_cast<Eigen::Index>(n_features_) * h);
  const auto t0 = static_cast<Eigen::Index>(t);
  for (std::size_t d = 0; d < n_features_; ++d) {
    const auto base = static_cast<Eigen::Index>(d * n_steps_);
    const auto dd = static_cast<Eigen::Index>(d);
    out.history_target.middleCols(dd * w, w) = values_.middleCols(base + t0 - w, w);
    out.history_observed.middleCols(dd * w, w) = observed_.middleCols(t0 - w, w);
    out.future_target.middleCols(dd * h, h) = values_.middleCols(base + t0, h);
    out.future_observed.middleCols(dd * h, h) = observed_.middleCols(t0, h);
  }
  out.input.history = out.history_target;
  for (int i : hidden) out.input.history.row(i).setZero();
  out.input.cov_history.resize(w * du);
  out.input.cov_future.resize(h * du);
  for (Eigen::Index s = 0; s < w; ++s) out.input.cov_history.segment(s * du, du) = covariates_.row(t0 - w + s);
  for (Eigen::Index s = 0; s < h; ++s) out.input.cov_future.segment(s * du, du) = covariates_.row(t0 + s);
  out.input.encodings = encodings_;
  return out;
}

template <typename Scalar>
std::vector<std::size_t> WindowSource<Scalar>::starts_within(IndexRange range) const {
  std::vector<std::size_t> out;
  for (std::size_t t = range.begin + window_; t + horizon_ <= range.end; ++t) out.push_back(t);
  return out;
}

template <typename Scalar>
std::vector<std::size_t> WindowSource<Scalar>::starts_forecasting(IndexRange range) const {
  std::vector<std::size_t> out;
  for (std::size_t t = std::max(range.begin, window_); t + horizon_ <= range.end; ++t) out.push_back(t);
  return out;
}

template class WindowSource<float>;
template class WindowSource<double>;

}  // namespace stdemand
