#pragma once

#include <cstdint>
#include <optional>
#include <random>

#include "stdemand/common.hpp"
#include "stdemand/dataset.hpp"
#include "stdemand/encodings.hpp"
#include "stdemand/graphs.hpp"
#include "stdemand/ingest.hpp"

namespace stdemand {

enum class Nonlinearity { tanh, identity };

/// X_t = e * xi(sum_l sum_p Psi(p-1, l) S^l X_{t-p}) + noise
struct GpvarParams {
  MatD psi;  // P x (L + 1)
  VecD gain;
  double noise_sigma = 0.1;
  Nonlinearity xi = Nonlinearity::tanh;

  std::size_t lags() const { return static_cast<std::size_t>(psi.rows()); }
  std::size_t orders() const { return psi.cols() > 0 ? static_cast<std::size_t>(psi.cols() - 1) : 0; }

  /// Copy with Psi rescaled so that sum |Psi| <= 0.95. Throws if the result still cannot be guaranteed bounded.
  GpvarParams stabilized() const;
};

inline constexpr double kPsiBudget = 0.95;
inline constexpr std::int64_t kSynthStart = 1704067200;  // 2024-01-01T00:00:00Z, a Monday

/// The family used by the synthetic experiments: 24 lags, shift orders 0..2, coefficients only at the
/// daily lag (negative, so the pattern alternates sign from one day to the next), node gains drawn from U[0.5, 2].
GpvarParams seasonal_family(std::size_t n_nodes, std::mt19937_64& rng);

/// The generated series in double precision, N x n_steps, after a burn-in of 10 P steps.
MatD gpvar_series(const GpvarParams& params, const MatD& shift, std::size_t n_steps, std::uint64_t seed,
                  const std::optional<MatD>& initial = std::nullopt);

/// Hourly series after a burn-in of 10 P steps. Initial P steps are drawn N(0, 1) from the seed.
DemandTensor gpvar_generate(const GpvarParams& params, const MatD& shift, std::size_t n_steps, std::uint64_t seed);
/// Same, starting from `initial` (N x P, oldest step first).
DemandTensor gpvar_generate(const GpvarParams& params, const MatD& shift, std::size_t n_steps, std::uint64_t seed,
                            const MatD& initial);

struct CityOptions {
  std::size_t n_steps = 2000;
  std::size_t encoding_dim = 64;
  double box_km = 20.0;
  double sigma_km = 5.0;
  double epsilon = 0.1;
  double noise_sigma = 0.1;
  double pad_std = 0.05;
};

struct SyntheticCity {
  RegionSet regions;
  GraphSpec graph;
  EncodingTable encodings;
  DemandTensor demand;
  GpvarParams params;

  Dataset dataset() const;
};

SyntheticCity make_city(std::size_t n_nodes, std::uint64_t seed, const CityOptions& options = {});

/// Per-slot mean of observed training values. Slots are hour-of-day, refined by day-of-week when the
/// training span covers at least two weeks.
class HistoricalAverage {
 public:
  static HistoricalAverage fit(const DemandTensor& demand, IndexRange train);

  double predict(std::size_t node, std::size_t feature, std::int64_t timestamp) const;
  bool weekly() const { return weekly_; }

 private:
  std::size_t slot_of(std::int64_t timestamp) const;

  bool weekly_ = false;
  std::size_t slots_ = 0;
  std::size_t n_features_ = 1;
  std::uint32_t interval_ = 3600;
  std::vector<double> slot_mean_;   // (node, feature, slot)
  std::vector<char> slot_seen_;
  std::vector<double> node_mean_;   // (node, feature)
  std::vector<char> node_seen_;
  std::vector<double> global_mean_;  // feature
};

}  // namespace stdemand
