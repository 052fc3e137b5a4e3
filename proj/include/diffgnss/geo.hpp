#ifndef DIFFGNSS_GEO_HPP
#define DIFFGNSS_GEO_HPP

#include <cmath>

namespace diffgnss {

namespace wgs84 {
constexpr double kSemiMajorM = 6378137.0;
constexpr double kFlattening = 1.0 / 298.257223563;
constexpr double kEcc2 = 2.0 * kFlattening - kFlattening * kFlattening;
}  // namespace wgs84

constexpr double kPi = 3.14159265358979323846;
constexpr double kDeg2Rad = kPi / 180.0;
constexpr double kRad2Deg = 180.0 / kPi;

struct Vec3 {
    double x = 0, y = 0, z = 0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    double norm() const { return std::sqrt(x * x + y * y + z * z); }
};

struct Lla {
    double lat_rad = 0, lon_rad = 0, alt_m = 0;
};

inline Vec3 lla_to_ecef(const Lla& p) {
    double sl = std::sin(p.lat_rad), cl = std::cos(p.lat_rad);
    double so = std::sin(p.lon_rad), co = std::cos(p.lon_rad);
    double n = wgs84::kSemiMajorM / std::sqrt(1.0 - wgs84::kEcc2 * sl * sl);
    return {(n + p.alt_m) * cl * co, (n + p.alt_m) * cl * so,
            (n * (1.0 - wgs84::kEcc2) + p.alt_m) * sl};
}

inline Lla ecef_to_lla(const Vec3& p) {
    double lon = std::atan2(p.y, p.x);
    double r = std::sqrt(p.x * p.x + p.y * p.y);
    double lat = std::atan2(p.z, r * (1.0 - wgs84::kEcc2));
    for (int i = 0; i < 8; ++i) {  // Bowring fixed-point refinement
        double sl = std::sin(lat);
        double n = wgs84::kSemiMajorM / std::sqrt(1.0 - wgs84::kEcc2 * sl * sl);
        lat = std::atan2(p.z + wgs84::kEcc2 * n * sl, r);
    }
    double sl = std::sin(lat);
    double n = wgs84::kSemiMajorM / std::sqrt(1.0 - wgs84::kEcc2 * sl * sl);
    double alt = r / std::cos(lat) - n;
    return {lat, lon, alt};
}

// East/north/up components of (target - anchor) in the tangent frame at anchor.
inline Vec3 ecef_to_enu(const Vec3& target, const Vec3& anchor) {
    Lla a = ecef_to_lla(anchor);
    double sl = std::sin(a.lat_rad), cl = std::cos(a.lat_rad);
    double so = std::sin(a.lon_rad), co = std::cos(a.lon_rad);
    Vec3 d = target - anchor;
    return {-so * d.x + co * d.y,
            -sl * co * d.x - sl * so * d.y + cl * d.z,
            cl * co * d.x + cl * so * d.y + sl * d.z};
}

// Elevation/azimuth (degrees) of a satellite as seen from a receiver.
inline void elevation_azimuth_deg(const Vec3& receiver, const Vec3& satellite, double* elev_deg,
                                  double* az_deg) {
    Vec3 enu = ecef_to_enu(satellite, receiver);
    double horiz = std::sqrt(enu.x * enu.x + enu.y * enu.y);
    double el = std::atan2(enu.z, horiz) * kRad2Deg;
    double az = std::atan2(enu.x, enu.y) * kRad2Deg;
    if (az < 0) az += 360.0;
    if (az >= 360.0) az -= 360.0;
    if (elev_deg) *elev_deg = el;
    if (az_deg) *az_deg = az;
}

// Satellite ECEF position on a shell of given altitude, seen from `receiver`
// at the given elevation/azimuth. Used by the scene generator.
inline Vec3 satellite_from_look_angles(const Vec3& receiver, double elev_deg, double az_deg,
                                       double shell_alt_m = 20200e3) {
    Lla r = ecef_to_lla(receiver);
    double sl = std::sin(r.lat_rad), cl = std::cos(r.lat_rad);
    double so = std::sin(r.lon_rad), co = std::cos(r.lon_rad);
    double el = elev_deg * kDeg2Rad, az = az_deg * kDeg2Rad;
    // Unit line of sight in ENU, then rotated to ECEF.
    Vec3 enu{std::cos(el) * std::sin(az), std::cos(el) * std::cos(az), std::sin(el)};
    Vec3 los{-so * enu.x - sl * co * enu.y + cl * co * enu.z,
             co * enu.x - sl * so * enu.y + cl * so * enu.z,
             cl * enu.y + sl * enu.z};
    // Range to the shell: |r + t*los| = R_earth_center_to_sat.
    double shell_r = wgs84::kSemiMajorM + shell_alt_m;
    double b = receiver.dot(los);
    double c = receiver.dot(receiver) - shell_r * shell_r;
    double t = -b + std::sqrt(b * b - c);
    return receiver + los * t;
}

}  // namespace diffgnss

#endif  // DIFFGNSS_GEO_HPP
