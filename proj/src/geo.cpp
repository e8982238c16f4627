#include "stdemand/geo.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace stdemand::geo {

double haversine_km(double lat1, double lon1, double lat2, double lon2) {
  constexpr double kRad = std::numbers::pi / 180.0;
  const double dlat = (lat2 - lat1) * kRad;
  const double dlon = (lon2 - lon1) * kRad;
  const double s = std::sin(dlat / 2);
  const double t = std::sin(dlon / 2);
  double h = s * s + std::cos(lat1 * kRad) * std::cos(lat2 * kRad) * t * t;
  h = std::clamp(h, 0.0, 1.0);
  return 2.0 * kEarthRadiusKm * std::asin(std::sqrt(h));
}

}  // namespace stdemand::geo
