#pragma once

namespace stdemand::geo {

inline constexpr double kEarthRadiusKm = 6371.0088;

/// Great-circle distance in kilometres between two (lat, lon) points in degrees.
double haversine_km(double lat1, double lon1, double lat2, double lon2);

}  // namespace stdemand::geo
