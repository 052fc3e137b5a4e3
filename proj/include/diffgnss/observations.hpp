#ifndef DIFFGNSS_OBSERVATIONS_HPP
#define DIFFGNSS_OBSERVATIONS_HPP

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "diffgnss/geo.hpp"

namespace diffgnss {

struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

enum class Scene { open_sky, wooded, high_rise, bridge };

inline const char* scene_name(Scene s) {
    switch (s) {
        case Scene::open_sky: return "open_sky";
        case Scene::wooded: return "wooded";
        case Scene::high_rise: return "high_rise";
        case Scene::bridge: return "bridge";
    }
    return "?";
}

inline Scene scene_from_name(std::string_view name) {
    if (name == "open_sky") return Scene::open_sky;
    if (name == "wooded") return Scene::wooded;
    if (name == "high_rise") return Scene::high_rise;
    if (name == "bridge") return Scene::bridge;
    throw IoError("unknown scene label: " + std::string(name));
}

constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

inline bool is_missing(double v) { return std::isnan(v); }

// One satellite's measurements at one epoch. gt_err_m is NaN when unlabeled.
struct SatObs {
    std::string sat_id;
    Vec3 sat_pos;
    double pr_corr_m = 0;
    double cn0_dbhz = 0;
    double elev_deg = 0;
    double az_deg = 0;
    double gt_err_m = kMissing;
};

struct EpochObservation {
    double epoch_time_s = 0;
    Scene scene = Scene::open_sky;
    std::vector<SatObs> sats;
    Vec3 gt_rx_pos;          // valid only when has_gt_rx
    bool has_gt_rx = false;
};

// A contiguous scene segment; windows never cross segment boundaries.
struct Sequence {
    std::string seq_id;
    Scene scene = Scene::open_sky;
    std::vector<EpochObservation> epochs;
};

inline constexpr const char* kObservationHeader =
    "epoch_time_s,seq_id,scene,sat_id,sat_x_m,sat_y_m,sat_z_m,pr_corr_m,cn0_dbhz,"
    "elev_deg,az_deg,gt_err_m,gt_rx_x_m,gt_rx_y_m,gt_rx_z_m";

namespace detail {

inline std::string format_double(double v) {
    if (std::isnan(v)) return "";
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view field, int line_no, const char* column) {
    double v = 0;
    auto res = std::from_chars(field.data(), field.data() + field.size(), v);
    if (res.ec != std::errc() || res.ptr != field.data() + field.size())
        throw IoError("line " + std::to_string(line_no) + ": malformed value '" +
                      std::string(field) + "' in column " + column);
    return v;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
        if (i == line.size() || line[i] == ',') {
            out.push_back(line.substr(start, i - start));
            start = i + 1;
        }
    }
    return out;
}

}  // namespace detail

inline void validate_sat(const SatObs& s, int line_no) {
    if (s.elev_deg < 0.0 || s.elev_deg > 90.0)
        throw IoError("line " + std::to_string(line_no) + ": elevation " +
                      detail::format_double(s.elev_deg) + " deg outside [0,90]");
    if (s.az_deg < 0.0 || s.az_deg >= 360.0)
        throw IoError("line " + std::to_string(line_no) + ": azimuth " +
                      detail::format_double(s.az_deg) + " deg outside [0,360)");
    if (s.cn0_dbhz < 0.0)
        throw IoError("line " + std::to_string(line_no) + ": negative C/N0 " +
                      detail::format_double(s.cn0_dbhz));
}

inline void save_observations(const std::vector<Sequence>& sequences, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << kObservationHeader << "\n";
    using detail::format_double;
    for (const auto& seq : sequences) {
        for (const auto& ep : seq.epochs) {
            for (const auto& s : ep.sats) {
                f << format_double(ep.epoch_time_s) << ',' << seq.seq_id << ','
                  << scene_name(ep.scene) << ',' << s.sat_id << ','
                  << format_double(s.sat_pos.x) << ',' << format_double(s.sat_pos.y) << ','
                  << format_double(s.sat_pos.z) << ',' << format_double(s.pr_corr_m) << ','
                  << format_double(s.cn0_dbhz) << ',' << format_double(s.elev_deg) << ','
                  << format_double(s.az_deg) << ',' << format_double(s.gt_err_m) << ',';
                if (ep.has_gt_rx)
                    f << format_double(ep.gt_rx_pos.x) << ',' << format_double(ep.gt_rx_pos.y)
                      << ',' << format_double(ep.gt_rx_pos.z);
                else
                    f << ",,";
                f << "\n";
            }
        }
    }
    if (!f) throw IoError("write failed: " + path);
}

inline std::vector<Sequence> load_observations(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::string line;
    int line_no = 0;
    std::vector<Sequence> sequences;

    if (!std::getline(f, line)) return sequences;  // empty file -> empty list
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kObservationHeader)
        throw IoError(path + ": unexpected header row (line 1)");

    while (std::getline(f, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto fields = detail::split_csv(line);
        if (fields.size() != 15)
            throw IoError("line " + std::to_string(line_no) + ": expected 15 fields, got " +
                          std::to_string(fields.size()));
        using detail::parse_double;
        double t = parse_double(fields[0], line_no, "epoch_time_s");
        std::string seq_id(fields[1]);
        Scene scene = scene_from_name(fields[2]);
        SatObs s;
        s.sat_id = std::string(fields[3]);
        if (s.sat_id.empty())
            throw IoError("line " + std::to_string(line_no) + ": empty sat_id");
        s.sat_pos = {parse_double(fields[4], line_no, "sat_x_m"),
                     parse_double(fields[5], line_no, "sat_y_m"),
                     parse_double(fields[6], line_no, "sat_z_m")};
        s.pr_corr_m = parse_double(fields[7], line_no, "pr_corr_m");
        s.cn0_dbhz = parse_double(fields[8], line_no, "cn0_dbhz");
        s.elev_deg = parse_double(fields[9], line_no, "elev_deg");
        s.az_deg = parse_double(fields[10], line_no, "az_deg");
        s.gt_err_m = fields[11].empty() ? kMissing : parse_double(fields[11], line_no, "gt_err_m");
        validate_sat(s, line_no);

        bool has_rx = !fields[12].empty() || !fields[13].empty() || !fields[14].empty();
        Vec3 rx;
        if (has_rx) {
            rx = {parse_double(fields[12], line_no, "gt_rx_x_m"),
                  parse_double(fields[13], line_no, "gt_rx_y_m"),
                  parse_double(fields[14], line_no, "gt_rx_z_m")};
        }

        if (sequences.empty() || sequences.back().seq_id != seq_id) {
            sequences.push_back(Sequence{seq_id, scene, {}});
        }
        Sequence& seq = sequences.back();
        if (seq.epochs.empty() || seq.epochs.back().epoch_time_s != t) {
            if (!seq.epochs.empty() && t < seq.epochs.back().epoch_time_s)
                throw IoError("line " + std::to_string(line_no) +
                              ": epoch_time_s not monotone within sequence " + seq_id);
            EpochObservation ep;
            ep.epoch_time_s = t;
            ep.scene = scene;
            seq.epochs.push_back(std::move(ep));
        }
        EpochObservation& ep = seq.epochs.back();
        for (const auto& prev : ep.sats)
            if (prev.sat_id == s.sat_id)
                throw IoError("line " + std::to_string(line_no) + ": duplicate sat_id " +
                              s.sat_id + " within epoch");
        if (has_rx) {
            ep.gt_rx_pos = rx;
            ep.has_gt_rx = true;
        }
        ep.sats.push_back(std::move(s));
    }
    return sequences;
}

}  // namespace diffgnss

#endif  // DIFFGNSS_OBSERVATIONS_HPP
