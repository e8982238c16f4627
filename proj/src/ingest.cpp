#include "stdemand/ingest.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>

#include "csv.hpp"
#include "stdemand/binary_io.hpp"
#include "stdemand/geo.hpp"

namespace stdemand {

namespace {

constexpr std::int64_t kSecondsPerDay = 86400;

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

}  // namespace

void RegionSet::validate() const {
  if (region_ids.empty()) throw ConfigError("region set is empty");
  if (static_cast<std::size_t>(centers.rows()) != region_ids.size() || centers.cols() != 2) {
    throw ConfigError("region centers must be an N x 2 matrix matching the id count");
  }
  if (!(assignment_radius_km > 0.0)) throw ConfigError("assignment radius must be positive");
  std::set<std::string> seen;
  for (const auto& id : region_ids) {
    if (!seen.insert(id).second) throw ConfigError("duplicate region id: " + id);
  }
  for (Eigen::Index i = 0; i < centers.rows(); ++i) {
    if (std::abs(centers(i, 0)) > 90.0 || std::abs(centers(i, 1)) > 180.0) {
      throw DataError("region center out of range: " + region_ids[static_cast<std::size_t>(i)]);
    }
  }
}

DemandTensor::DemandTensor(std::size_t nodes, std::size_t features, std::size_t steps, std::uint32_t interval,
                           std::int64_t start)
    : n_nodes(nodes),
      n_features(features),
      n_steps(steps),
      values(nodes * features * steps, 0.0f),
      mask(nodes * steps, 1),
      interval_seconds(interval),
      t0(start) {}

DemandTensor DemandTensor::select_nodes(const std::vector<std::size_t>& nodes) const {
  DemandTensor out(nodes.size(), n_features, n_steps, interval_seconds, t0);
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    const std::size_t n = nodes[k];
    if (n >= n_nodes) throw ConfigError("node index out of range");
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(n * n_features * n_steps), n_features * n_steps,
                out.values.begin() + static_cast<std::ptrdiff_t>(k * n_features * n_steps));
    std::copy_n(mask.begin() + static_cast<std::ptrdiff_t>(n * n_steps), n_steps,
                out.mask.begin() + static_cast<std::ptrdiff_t>(k * n_steps));
  }
  return out;
}

void DemandTensor::validate() const {
  if (interval_seconds == 0) throw DataError("interval_seconds must be positive");
  if (values.size() != n_nodes * n_features * n_steps) throw DataError("demand value count mismatch");
  if (mask.size() != n_nodes * n_steps) throw DataError("demand mask size mismatch");
  for (std::size_t n = 0; n < n_nodes; ++n) {
    for (std::size_t t = 0; t < n_steps; ++t) {
      const auto m = mask[n * n_steps + t];
      if (m > 1) throw DataError("mask entries must be 0 or 1");
      if (m == 0) continue;
      for (std::size_t d = 0; d < n_features; ++d) {
        if (!std::isfinite(at(n, d, t))) throw DataError("non-finite demand value at an observed entry");
      }
    }
  }
}

AggregateResult aggregate_orders(const std::vector<OrderRecord>& orders, const RegionSet& regions,
                                 std::uint32_t interval_seconds, std::int64_t t0, std::size_t n_steps) {
  regions.validate();
  if (interval_seconds == 0) throw ConfigError("interval_seconds must be positive");
  if (n_steps == 0) throw ConfigError("number of steps must be positive");

  AggregateResult result{DemandTensor(regions.size(), 1, n_steps, interval_seconds, t0), {}};
  const auto span = static_cast<std::int64_t>(interval_seconds) * static_cast<std::int64_t>(n_steps);

  for (const auto& order : orders) {
    if (std::abs(order.pickup_lat) > 90.0 || std::abs(order.pickup_lon) > 180.0) {
      throw DataError("order " + order.order_id + " has out-of-range coordinates");
    }
    const std::int64_t offset = order.pickup_time - t0;
    if (offset < 0 || offset >= span) {
      ++result.dropped.outside_window;
      continue;
    }
    std::size_t best = 0;
    double best_km = std::numeric_limits<double>::infinity();
    for (std::size_t n = 0; n < regions.size(); ++n) {
      const auto row = static_cast<Eigen::Index>(n);
      const double km =
          geo::haversine_km(order.pickup_lat, order.pickup_lon, regions.centers(row, 0), regions.centers(row, 1));
      if (km < best_km) {  // first center wins ties
        best_km = km;
        best = n;
      }
    }
    if (best_km > regions.assignment_radius_km) {
      ++result.dropped.outside_radius;
      continue;
    }
    const auto t = static_cast<std::size_t>(offset / interval_seconds);
    result.demand.at(best, 0, t) += 1.0f;
  }
  return result;
}

MatD build_covariates(std::int64_t t0, std::size_t n_steps, std::uint32_t interval_seconds) {
  if (n_steps == 0) throw ConfigError("number of steps must be positive");
  if (interval_seconds == 0) throw ConfigError("interval_seconds must be positive");
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  MatD u(static_cast<Eigen::Index>(n_steps), static_cast<Eigen::Index>(kCovariateDim));
  for (std::size_t t = 0; t < n_steps; ++t) {
    const std::int64_t ts = t0 + static_cast<std::int64_t>(t) * interval_seconds;
    const std::int64_t day = floor_div(ts, kSecondsPerDay);
    const double hour = static_cast<double>(ts - day * kSecondsPerDay) / 3600.0;
    const std::chrono::weekday wd{std::chrono::sys_days{std::chrono::days{day}}};
    const double dow = static_cast<double>(wd.iso_encoding() - 1);  // Monday = 0
    const auto r = static_cast<Eigen::Index>(t);
    u(r, 0) = std::sin(kTwoPi * hour / 24.0);
    u(r, 1) = std::cos(kTwoPi * hour / 24.0);
    u(r, 2) = std::sin(kTwoPi * dow / 7.0);
    u(r, 3) = std::cos(kTwoPi * dow / 7.0);
  }
  return u;
}

ChronologicalSplit chronological_split(std::size_t n_steps, SplitRatios ratios) {
  if (!(ratios.train > 0 && ratios.val > 0 && ratios.test > 0)) throw ConfigError("split ratios must be positive");
  if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
  if (n_steps < 3) throw ConfigError("need at least 3 steps to split");
  const auto n = static_cast<double>(n_steps);
  const auto n_train = static_cast<std::size_t>(std::floor(ratios.train * n));
  const auto n_val = static_cast<std::size_t>(std::floor(ratios.val * n));
  if (n_train == 0 || n_val == 0 || n_train + n_val >= n_steps) throw ConfigError("a split would be empty");
  return {{0, n_train}, {n_train, n_train + n_val}, {n_train + n_val, n_steps}};
}

std::int64_t parse_iso8601(const std::string& text) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0;
  double sec = 0.0;
  char sep = 0;
  int consumed = 0;
  const char* s = text.c_str();
  if (std::sscanf(s, "%d-%d-%d%c%d:%d%n", &y, &mo, &d, &sep, &h, &mi, &consumed) < 6 || (sep != 'T' && sep != ' ')) {
    throw DataError("cannot parse timestamp '" + text + "'");
  }
  std::string rest = text.substr(static_cast<std::size_t>(consumed));
  if (!rest.empty() && rest[0] == ':') {
    std::size_t used = 0;
    sec = std::stod(rest.substr(1), &used);
    rest = rest.substr(1 + used);
  }
  std::int64_t offset = 0;
  if (!rest.empty() && rest != "Z" && rest != "z") {
    int oh = 0, om = 0;
    char sign = rest[0];
    if ((sign != '+' && sign != '-') || std::sscanf(rest.c_str() + 1, "%d:%d", &oh, &om) < 1) {
      throw DataError("cannot parse timezone in '" + text + "'");
    }
    offset = (sign == '-' ? -1 : 1) * (static_cast<std::int64_t>(oh) * 3600 + om * 60);
  }
  const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{static_cast<unsigned>(mo)},
                                        std::chrono::day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h > 23 || mi > 59 || sec >= 61.0) throw DataError("invalid timestamp '" + text + "'");
  const auto days = std::chrono::sys_days{ymd}.time_since_epoch().count();
  return static_cast<std::int64_t>(days) * kSecondsPerDay + h * 3600 + mi * 60 + static_cast<std::int64_t>(sec) -
         offset;
}

std::vector<OrderRecord> read_orders_csv(const std::filesystem::path& path) {
  csv::Reader reader(path.string());
  std::vector<std::string> row;
  if (!reader.next(row)) throw DataError(path.string() + ": empty file");
  csv::expect_header(row, {"order_id", "pickup_time", "lat", "lon"}, path.string());

  std::vector<OrderRecord> orders;
  int epoch_format = -1;  // decided once per file from the first record
  while (reader.next(row)) {
    if (row.size() < 4) throw DataError(path.string() + ": short row at line " + std::to_string(reader.line()));
    if (epoch_format < 0) {
      const auto& ts = row[1];
      epoch_format = !ts.empty() && ts.find_first_not_of("-0123456789") == std::string::npos ? 1 : 0;
    }
    OrderRecord rec;
    rec.order_id = row[0];
    rec.pickup_time = epoch_format == 1 ? csv::to_int(row[1], "pickup_time") : parse_iso8601(row[1]);
    rec.pickup_lat = csv::to_double(row[2], "lat");
    rec.pickup_lon = csv::to_double(row[3], "lon");
    orders.push_back(std::move(rec));
  }
  return orders;
}

RegionSet read_regions_csv(const std::filesystem::path& path, double radius_km) {
  csv::Reader reader(path.string());
  std::vector<std::string> row;
  if (!reader.next(row)) throw DataError(path.string() + ": empty file");
  csv::expect_header(row, {"region_id", "lat", "lon"}, path.string());
  std::vector<std::string> ids;
  std::vector<std::pair<double, double>> coords;
  while (reader.next(row)) {
    if (row.size() < 3) throw DataError(path.string() + ": short row at line " + std::to_string(reader.line()));
    ids.push_back(row[0]);
    coords.emplace_back(csv::to_double(row[1], "lat"), csv::to_double(row[2], "lon"));
  }
  RegionSet regions;
  regions.region_ids = std::move(ids);
  regions.centers.resize(static_cast<Eigen::Index>(coords.size()), 2);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    regions.centers(static_cast<Eigen::Index>(i), 0) = coords[i].first;
    regions.centers(static_cast<Eigen::Index>(i), 1) = coords[i].second;
  }
  regions.assignment_radius_km = radius_km;
  regions.validate();
  return regions;
}

void write_regions_csv(const RegionSet& regions, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "region_id,lat,lon\n";
  out.precision(17);
  for (std::size_t i = 0; i < regions.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out << regions.region_ids[i] << ',' << regions.centers(r, 0) << ',' << regions.centers(r, 1) << '\n';
  }
}

void write_demand(const DemandTensor& demand, std::ostream& out) {
  if (demand.values.size() != demand.n_nodes * demand.n_features * demand.n_steps ||
      demand.mask.size() != demand.n_nodes * demand.n_steps) {
    throw DataError("demand tensor buffers do not match its shape");
  }
  io::BinaryWriter w(out);
  w.magic("IDT1");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(demand.n_nodes));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(demand.n_features));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(demand.n_steps));
  w.put<std::uint64_t>(static_cast<std::uint64_t>(demand.t0));
  w.put<std::uint32_t>(demand.interval_seconds);
  for (float v : demand.values) w.put<float>(v);
  for (std::uint8_t m : demand.mask) w.put<std::uint8_t>(m);
  if (!w.ok()) throw DataError("failed writing demand tensor");
}

DemandTensor read_demand(std::istream& in) {
  io::BinaryReader r(in);
  r.expect_magic("IDT1");
  DemandTensor demand;
  demand.n_nodes = r.get<std::uint32_t>();
  demand.n_features = r.get<std::uint32_t>();
  demand.n_steps = r.get<std::uint32_t>();
  demand.t0 = static_cast<std::int64_t>(r.get<std::uint64_t>());
  demand.interval_seconds = r.get<std::uint32_t>();
  demand.values.resize(demand.n_nodes * demand.n_features * demand.n_steps);
  for (auto& v : demand.values) v = r.get<float>();
  demand.mask.resize(demand.n_nodes * demand.n_steps);
  for (auto& m : demand.mask) m = r.get<std::uint8_t>();
  r.expect_eof();
  demand.validate();
  return demand;
}

void write_demand(const DemandTensor& demand, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  write_demand(demand, out);
}

DemandTensor read_demand(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return read_demand(in);
}

}  // namespace stdemand
