#ifndef DIFFGNSS_TESTUTIL_HPP
#define DIFFGNSS_TESTUTIL_HPP

#include <array>
#include <string>
#include <vector>

#include "diffgnss/geo.hpp"
#include "diffgnss/observations.hpp"

namespace testutil {

using diffgnss::EpochObservation;
using diffgnss::SatObs;
using diffgnss::Vec3;

// Ray-trace oracle: place satellites on the GNSS shell at chosen look angles
// and synthesize exact pseudoranges from a known receiver state. Any injected
// per-satellite error is known ground truth by construction.
inline EpochObservation make_epoch(const Vec3& receiver, double clock_m,
                                   const std::vector<std::array<double, 2>>& elaz,
                                   const std::vector<double>& injected_err,
                                   double time_s = 0.0) {
    EpochObservation ep;
    ep.epoch_time_s = time_s;
    ep.gt_rx_pos = receiver;
    ep.has_gt_rx = true;
    for (std::size_t k = 0; k < elaz.size(); ++k) {
        SatObs s;
        s.sat_id = "G" + std::string(k + 1 < 10 ? "0" : "") + std::to_string(k + 1);
        s.sat_pos = diffgnss::satellite_from_look_angles(receiver, elaz[k][0], elaz[k][1]);
        double range = (s.sat_pos - receiver).norm();
        double err = k < injected_err.size() ? injected_err[k] : 0.0;
        s.pr_corr_m = range + clock_m + err;
        s.gt_err_m = err;
        s.cn0_dbhz = 45.0;
        diffgnss::elevation_azimuth_deg(receiver, s.sat_pos, &s.elev_deg, &s.az_deg);
        ep.sats.push_back(s);
    }
    return ep;
}

inline Vec3 test_receiver() {
    return diffgnss::lla_to_ecef({31.2 * diffgnss::kDeg2Rad, 121.5 * diffgnss::kDeg2Rad, 20.0});
}

// Hemispheric spread of six look directions.
inline std::vector<std::array<double, 2>> six_sat_geometry() {
    return {{75, 10}, {55, 80}, {45, 160}, {35, 230}, {25, 300}, {60, 350}};
}

inline std::vector<std::array<double, 2>> eight_sat_geometry() {
    return {{80, 20}, {65, 70}, {50, 120}, {40, 170}, {35, 220}, {28, 260}, {22, 310}, {55, 355}};
}

// Golden-angle spread over the visible hemisphere; low mutual leverage.
inline std::vector<std::array<double, 2>> spread_geometry(int n) {
    std::vector<std::array<double, 2>> geo;
    for (int i = 0; i < n; ++i) {
        double u = (i + 0.5) / n;
        geo.push_back({15.0 + 70.0 * u, std::fmod(i * 137.50776405, 360.0)});
    }
    return geo;
}

}  // namespace testutil

#endif  // DIFFGNSS_TESTUTIL_HPP
