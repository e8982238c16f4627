#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stdemand/common.hpp"

namespace stdemand {

struct OrderRecord {
  std::string order_id;
  std::int64_t pickup_time = 0;  // UTC seconds
  double pickup_lat = 0.0;
  double pickup_lon = 0.0;
};

struct RegionSet {
  std::vector<std::string> region_ids;
  MatD centers;  // N x 2, (lat, lon) in degrees
  double assignment_radius_km = 1.0;

  std::size_t size() const { return region_ids.size(); }
  void validate() const;
};

/// Regional demand series. values are laid out (node, feature, step) with step fastest.
struct DemandTensor {
  std::size_t n_nodes = 0;
  std::size_t n_features = 1;
  std::size_t n_steps = 0;
  std::vector<float> values;
  std::vector<std::uint8_t> mask;  // (node, step); 1 = observed
  std::uint32_t interval_seconds = 3600;
  std::int64_t t0 = 0;

  DemandTensor() = default;
  DemandTensor(std::size_t nodes, std::size_t features, std::size_t steps, std::uint32_t interval,
               std::int64_t start);

  float& at(std::size_t n, std::size_t d, std::size_t t) { return values[(n * n_features + d) * n_steps + t]; }
  float at(std::size_t n, std::size_t d, std::size_t t) const {
    return values[(n * n_features + d) * n_steps + t];
  }
  bool observed(std::size_t n, std::size_t t) const { return mask[n * n_steps + t] != 0; }
  void set_observed(std::size_t n, std::size_t t, bool on) { mask[n * n_steps + t] = on ? 1 : 0; }
  std::int64_t time_of(std::size_t t) const {
    return t0 + static_cast<std::int64_t>(t) * static_cast<std::int64_t>(interval_seconds);
  }

  /// Rows restricted to `nodes`, in that order.
  DemandTensor select_nodes(const std::vector<std::size_t>& nodes) const;

  void validate() const;
  bool operator==(const DemandTensor&) const = default;
};

struct DropReport {
  std::size_t outside_window = 0;
  std::size_t outside_radius = 0;

  std::size_t total() const { return outside_window + outside_radius; }
};

struct AggregateResult {
  DemandTensor demand;
  DropReport dropped;
};

AggregateResult aggregate_orders(const std::vector<OrderRecord>& orders, const RegionSet& regions,
                                 std::uint32_t interval_seconds, std::int64_t t0, std::size_t n_steps);

/// Time covariates, T x 4: sin/cos of hour-of-day, sin/cos of day-of-week (Monday = 0).
MatD build_covariates(std::int64_t t0, std::size_t n_steps, std::uint32_t interval_seconds);

inline constexpr std::size_t kCovariateDim = 4;

struct SplitRatios {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
};

struct ChronologicalSplit {
  IndexRange train;
  IndexRange val;
  IndexRange test;
};

ChronologicalSplit chronological_split(std::size_t n_steps, SplitRatios ratios = {});

// File formats.
std::vector<OrderRecord> read_orders_csv(const std::filesystem::path& path);
RegionSet read_regions_csv(const std::filesystem::path& path, double radius_km);
void write_regions_csv(const RegionSet& regions, const std::filesystem::path& path);

void write_demand(const DemandTensor& demand, std::ostream& out);
DemandTensor read_demand(std::istream& in);
void write_demand(const DemandTensor& demand, const std::filesystem::path& path);
DemandTensor read_demand(const std::filesystem::path& path);

/// Parses "YYYY-MM-DD[T ]HH:MM[:SS[.fff]][Z|+HH:MM|-HH:MM]" to UTC seconds.
std::int64_t parse_iso8601(const std::string& text);

}  // namespace stdemand
