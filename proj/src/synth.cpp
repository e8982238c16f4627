#include "stdemand/synth.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

#include "stdemand/geo.hpp"
#include "stdemand/training.hpp"

namespace stdemand {

GpvarParams GpvarParams::stabilized() const {
  if (psi.size() == 0) throw ConfigError("GPVAR needs at least one lag and one shift order");
  if (!psi.allFinite() || !gain.allFinite() || !std::isfinite(noise_sigma) || noise_sigma < 0.0) {
    throw ConfigError("GPVAR parameters must be finite with a nonnegative noise level");
  }
  GpvarParams out = *this;
  const double total = psi.cwiseAbs().sum();
  if (total > kPsiBudget) out.psi *= kPsiBudget / total;
  const double budget = out.psi.cwiseAbs().sum();
  // tanh bounds every step by the gain; the identity map needs a contraction
  if (xi == Nonlinearity::identity && gain.size() > 0 && gain.cwiseAbs().maxCoeff() * budget >= 1.0) {
    throw NumericalError("GPVAR parameters are unstable: max|gain| * sum|Psi| >= 1 with identity nonlinearity");
  }
  return out;
}

GpvarParams seasonal_family(std::size_t n_nodes, std::mt19937_64& rng) {
  GpvarParams p;
  p.psi = MatD::Zero(24, 3);
  p.psi.row(23) << -0.15, -0.6, -0.2;
  p.gain.resize(static_cast<Eigen::Index>(n_nodes));
  std::uniform_real_distribution<double> u(0.5, 2.0);
  for (Eigen::Index i = 0; i < p.gain.size(); ++i) p.gain(i) = u(rng);
  p.noise_sigma = 0.1;
  p.xi = Nonlinearity::tanh;
  return p;
}

MatD gpvar_series(const GpvarParams& raw, const MatD& shift, std::size_t n_steps, std::uint64_t seed,
                  const std::optional<MatD>& initial) {
  const GpvarParams params = raw.stabilized();
  const auto n = params.gain.size();
  const auto lags = static_cast<Eigen::Index>(params.lags());
  const auto orders = static_cast<Eigen::Index>(params.orders());
  if (shift.rows() != n || shift.cols() != n) throw ConfigError("shift operator does not match the gain vector");
  if (n_steps <= params.lags()) throw ConfigError("series length must exceed the number of lags");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> standard(0.0, 1.0);
  const auto burn_in = 10 * lags;
  const auto total = lags + burn_in + static_cast<Eigen::Index>(n_steps);
  MatD x(n, total);  // column per step
  if (initial) {
    if (initial->rows() != n || initial->cols() != lags) throw ConfigError("initial history must be N x P");
    x.leftCols(lags) = *initial;
  } else {
    for (Eigen::Index t = 0; t < lags; ++t)
      for (Eigen::Index i = 0; i < n; ++i) x(i, t) = standard(rng);
  }

  std::vector<MatD> powers;
  powers.push_back(MatD::Identity(n, n));
  for (Eigen::Index l = 1; l <= orders; ++l) powers.push_back(powers.back() * shift);

  VecD y(n);
  VecD h(n);
  for (Eigen::Index t = lags; t < total; ++t) {
    h.setZero();
    for (Eigen::Index l = 0; l <= orders; ++l) {
      y.setZero();
      bool any = false;
      for (Eigen::Index p = 1; p <= lags; ++p) {
        const double c = params.psi(p - 1, l);
        if (c == 0.0) continue;
        y += c * x.col(t - p);
        any = true;
      }
      if (any) h += powers[static_cast<std::size_t>(l)] * y;
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      const double act = params.xi == Nonlinearity::tanh ? std::tanh(h(i)) : h(i);
      x(i, t) = params.gain(i) * act;
      if (params.noise_sigma > 0.0) x(i, t) += params.noise_sigma * standard(rng);
    }
  }
  return x.rightCols(static_cast<Eigen::Index>(n_steps));
}

namespace {

DemandTensor to_tensor(const MatD& series) {
  DemandTensor d(static_cast<std::size_t>(series.rows()), 1, static_cast<std::size_t>(series.cols()), 3600,
                 kSynthStart);
  for (Eigen::Index i = 0; i < series.rows(); ++i)
    for (Eigen::Index t = 0; t < series.cols(); ++t)
      d.at(static_cast<std::size_t>(i), 0, static_cast<std::size_t>(t)) = static_cast<float>(series(i, t));
  return d;
}

}  // namespace

DemandTensor gpvar_generate(const GpvarParams& params, const MatD& shift, std::size_t n_steps, std::uint64_t seed) {
  return to_tensor(gpvar_series(params, shift, n_steps, seed));
}

DemandTensor gpvar_generate(const GpvarParams& params, const MatD& shift, std::size_t n_steps, std::uint64_t seed,
                            const MatD& initial) {
  return to_tensor(gpvar_series(params, shift, n_steps, seed, initial));
}

Dataset SyntheticCity::dataset() const { return Dataset{regions, demand, graph, encodings}; }

SyntheticCity make_city(std::size_t n_nodes, std::uint64_t seed, const CityOptions& options) {
  if (n_nodes < 4) throw ConfigError("a synthetic city needs at least 4 regions");
  if (options.encoding_dim < 5) throw ConfigError("synthetic encodings need at least 5 columns");
  std::mt19937_64 rng(seed);
  const auto n = static_cast<Eigen::Index>(n_nodes);

  SyntheticCity city;
  city.params = seasonal_family(n_nodes, rng);
  city.params.noise_sigma = options.noise_sigma;

  constexpr double base_lat = 30.0;
  constexpr double base_lon = 120.0;
  const double km_per_deg_lat = geo::kEarthRadiusKm * std::numbers::pi / 180.0;
  const double km_per_deg_lon = km_per_deg_lat * std::cos(base_lat * std::numbers::pi / 180.0);
  std::uniform_real_distribution<double> box(0.0, options.box_km);
  MatD km(n, 2);
  city.regions.centers.resize(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    km(i, 0) = box(rng);  // north
    km(i, 1) = box(rng);  // east
    city.regions.centers(i, 0) = base_lat + km(i, 0) / km_per_deg_lat;
    city.regions.centers(i, 1) = base_lon + km(i, 1) / km_per_deg_lon;
    char id[32];
    std::snprintf(id, sizeof id, "r%03lld", static_cast<long long>(i));
    city.regions.region_ids.emplace_back(id);
  }
  city.regions.assignment_radius_km = 1.0;
  city.graph = make_graph(city.regions.centers, options.sigma_km, options.epsilon);

  const auto dim = static_cast<Eigen::Index>(options.encoding_dim);
  std::normal_distribution<double> pad(0.0, options.pad_std);
  city.encodings.region_ids = city.regions.region_ids;
  city.encodings.values = MatF::Zero(n, dim);
  const double half = options.box_km / 2.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    city.encodings.values(i, 0) = static_cast<float>(city.params.gain(i));
    const int quadrant = (km(i, 0) >= half ? 2 : 0) + (km(i, 1) >= half ? 1 : 0);
    city.encodings.values(i, 1 + quadrant) = 1.0f;
    for (Eigen::Index c = 5; c < dim; ++c) city.encodings.values(i, c) = static_cast<float>(pad(rng));
  }

  city.demand = gpvar_generate(city.params, city.graph.shift, options.n_steps, derive_seed(seed, 1));
  return city;
}

namespace {

constexpr std::int64_t kDay = 86400;
constexpr std::int64_t kWeek = 7 * kDay;

std::int64_t floor_mod(std::int64_t a, std::int64_t b) {
  const auto r = a % b;
  return r < 0 ? r + b : r;
}

}  // namespace

std::size_t HistoricalAverage::slot_of(std::int64_t timestamp) const {
  if (weekly_) {
    // 1970-01-01 was a Thursday; shift so that slot 0 starts on Monday
    return static_cast<std::size_t>(floor_mod(timestamp + 3 * kDay, kWeek) / interval_) % slots_;
  }
  return static_cast<std::size_t>(floor_mod(timestamp, kDay) / interval_) % slots_;
}

HistoricalAverage HistoricalAverage::fit(const DemandTensor& demand, IndexRange train) {
  if (train.end > demand.n_steps || train.size() == 0) throw DataError("historical average needs a nonempty training span");
  HistoricalAverage ha;
  ha.interval_ = demand.interval_seconds;
  ha.n_features_ = demand.n_features;
  ha.weekly_ = static_cast<std::int64_t>(train.size()) * demand.interval_seconds >= 2 * kWeek;
  const std::int64_t period = ha.weekly_ ? kWeek : kDay;
  ha.slots_ = static_cast<std::size_t>(std::max<std::int64_t>(1, period / demand.interval_seconds));
  const std::size_t n = demand.n_nodes;
  const std::size_t f = demand.n_features;
  std::vector<double> slot_sum(n * f * ha.slots_, 0.0);
  std::vector<std::size_t> slot_count(n * f * ha.slots_, 0);
  std::vector<double> node_sum(n * f, 0.0);
  std::vector<std::size_t> node_count(n * f, 0);
  std::vector<double> all_sum(f, 0.0);
  std::vector<std::size_t> all_count(f, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = train.begin; t < train.end; ++t) {
      if (!demand.observed(i, t)) continue;
      const auto s = ha.slot_of(demand.time_of(t));
      for (std::size_t d = 0; d < f; ++d) {
        const double v = demand.at(i, d, t);
        slot_sum[(i * f + d) * ha.slots_ + s] += v;
        ++slot_count[(i * f + d) * ha.slots_ + s];
        node_sum[i * f + d] += v;
        ++node_count[i * f + d];
        all_sum[d] += v;
        ++all_count[d];
      }
    }
  }
  for (std::size_t d = 0; d < f; ++d) {
    if (all_count[d] == 0) throw DataError("historical average has no observed training data");
  }
  ha.slot_mean_.resize(slot_sum.size());
  ha.slot_seen_.resize(slot_sum.size());
  for (std::size_t k = 0; k < slot_sum.size(); ++k) {
    ha.slot_seen_[k] = slot_count[k] > 0;
    ha.slot_mean_[k] = slot_count[k] ? slot_sum[k] / static_cast<double>(slot_count[k]) : 0.0;
  }
  ha.node_mean_.resize(node_sum.size());
  ha.node_seen_.resize(node_sum.size());
  for (std::size_t k = 0; k < node_sum.size(); ++k) {
    ha.node_seen_[k] = node_count[k] > 0;
    ha.node_mean_[k] = node_count[k] ? node_sum[k] / static_cast<double>(node_count[k]) : 0.0;
  }
  ha.global_mean_.resize(f);
  for (std::size_t d = 0; d < f; ++d) ha.global_mean_[d] = all_sum[d] / static_cast<double>(all_count[d]);
  return ha;
}

double HistoricalAverage::predict(std::size_t node, std::size_t feature, std::int64_t timestamp) const {
  const std::size_t key = node * n_features_ + feature;
  if (key >= node_mean_.size()) throw ConfigError("historical average queried for an unknown node");
  const std::size_t slot = key * slots_ + slot_of(timestamp);
  if (slot_seen_[slot]) return slot_mean_[slot];
  if (node_seen_[key]) return node_mean_[key];
  return global_mean_[feature];
}

}  // namespace stdemand
