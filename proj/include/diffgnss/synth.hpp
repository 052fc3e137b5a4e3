#ifndef DIFFGNSS_SYNTH_HPP
#define DIFFGNSS_SYNTH_HPP

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffgnss/geo.hpp"
#include "diffgnss/observations.hpp"
#include "diffgnss/rng.hpp"

namespace diffgnss {

struct SynthError : std::runtime_error {
    explicit SynthError(const std::string& what) : std::runtime_error(what) {}
};

// Urban-GNSS scenario generator. Every pseudorange is exact geometry plus a
// receiver clock plus an injected error that is recorded verbatim as ground
// truth; C/N0 drops track the injected NLOS bias so signal quality carries
// real information about error magnitude.
struct SceneConfig {
    Scene scene = Scene::open_sky;
    int n_sats_min = 7;
    int n_sats_max = 10;
    double duration_s = 240.0;
    double rate_hz = 1.0;

    double los_sigma_m = 0.4;
    double nlos_bias_min_m = 0.0;
    double nlos_bias_max_m = 0.0;
    double nlos_events_per_100s = 0.0;  // per satellite, scaled up at low elevation
    double nlos_dur_min_s = 5.0;
    double nlos_dur_max_s = 15.0;

    double cn0_base_dbhz = 40.0;       // plus elevation gain, minus NLOS drop
    double cn0_elev_gain_db = 8.0;
    double cn0_jitter_db = 0.6;
    double cn0_drop_base_db = 8.0;
    double cn0_drop_per_m = 0.25;

    double receiver_lat_deg = 31.2;
    double receiver_lon_deg = 121.5;
    double receiver_alt_m = 20.0;
    double speed_mps = 8.0;  // constant-velocity ENU walk

    std::uint64_t seed = 1;

    void validate() const {
        if (n_sats_min < 4 || n_sats_max < n_sats_min)
            throw SynthError("satellite count range must satisfy 4 <= min <= max");
        if (duration_s <= 0 || rate_hz <= 0) throw SynthError("duration and rate must be positive");
        if (los_sigma_m < 0) throw SynthError("los_sigma_m must be >= 0");
        if (nlos_bias_max_m < nlos_bias_min_m) throw SynthError("empty NLOS bias range");
        if (nlos_dur_max_s < nlos_dur_min_s) throw SynthError("empty NLOS duration range");
    }
};

inline SceneConfig default_scene_config(Scene scene, std::uint64_t seed) {
    SceneConfig c;
    c.scene = scene;
    c.seed = seed;
    switch (scene) {
        case Scene::open_sky:
            c.los_sigma_m = 0.4;
            break;
        case Scene::wooded:
            c.los_sigma_m = 0.8;
            c.nlos_bias_min_m = 3.0;
            c.nlos_bias_max_m = 12.0;
            c.nlos_events_per_100s = 1.2;
            break;
        case Scene::bridge:
            c.los_sigma_m = 1.0;
            c.nlos_bias_min_m = 5.0;
            c.nlos_bias_max_m = 25.0;
            c.nlos_events_per_100s = 1.5;
            break;
        case Scene::high_rise:
            c.los_sigma_m = 1.2;
            c.nlos_bias_min_m = 10.0;
            c.nlos_bias_max_m = 50.0;
            c.nlos_events_per_100s = 2.4;
            break;
    }
    return c;
}

inline nlohmann::json scene_config_to_json(const SceneConfig& c) {
    return {{"scene", scene_name(c.scene)},
            {"n_sats_min", c.n_sats_min},
            {"n_sats_max", c.n_sats_max},
            {"duration_s", c.duration_s},
            {"rate_hz", c.rate_hz},
            {"los_sigma_m", c.los_sigma_m},
            {"nlos_bias_min_m", c.nlos_bias_min_m},
            {"nlos_bias_max_m", c.nlos_bias_max_m},
            {"nlos_events_per_100s", c.nlos_events_per_100s},
            {"nlos_dur_min_s", c.nlos_dur_min_s},
            {"nlos_dur_max_s", c.nlos_dur_max_s},
            {"cn0_base_dbhz", c.cn0_base_dbhz},
            {"cn0_elev_gain_db", c.cn0_elev_gain_db},
            {"cn0_jitter_db", c.cn0_jitter_db},
            {"cn0_drop_base_db", c.cn0_drop_base_db},
            {"cn0_drop_per_m", c.cn0_drop_per_m},
            {"receiver_lat_deg", c.receiver_lat_deg},
            {"receiver_lon_deg", c.receiver_lon_deg},
            {"receiver_alt_m", c.receiver_alt_m},
            {"speed_mps", c.speed_mps},
            {"seed", c.seed}};
}

inline SceneConfig scene_config_from_json(const nlohmann::json& j) {
    SceneConfig c;
    c.scene = scene_from_name(j.value("scene", std::string("open_sky")));
    c.n_sats_min = j.value("n_sats_min", c.n_sats_min);
    c.n_sats_max = j.value("n_sats_max", c.n_sats_max);
    c.duration_s = j.value("duration_s", c.duration_s);
    c.rate_hz = j.value("rate_hz", c.rate_hz);
    c.los_sigma_m = j.value("los_sigma_m", c.los_sigma_m);
    c.nlos_bias_min_m = j.value("nlos_bias_min_m", c.nlos_bias_min_m);
    c.nlos_bias_max_m = j.value("nlos_bias_max_m", c.nlos_bias_max_m);
    c.nlos_events_per_100s = j.value("nlos_events_per_100s", c.nlos_events_per_100s);
    c.nlos_dur_min_s = j.value("nlos_dur_min_s", c.nlos_dur_min_s);
    c.nlos_dur_max_s = j.value("nlos_dur_max_s", c.nlos_dur_max_s);
    c.cn0_base_dbhz = j.value("cn0_base_dbhz", c.cn0_base_dbhz);
    c.cn0_elev_gain_db = j.value("cn0_elev_gain_db", c.cn0_elev_gain_db);
    c.cn0_jitter_db = j.value("cn0_jitter_db", c.cn0_jitter_db);
    c.cn0_drop_base_db = j.value("cn0_drop_base_db", c.cn0_drop_base_db);
    c.cn0_drop_per_m = j.value("cn0_drop_per_m", c.cn0_drop_per_m);
    c.receiver_lat_deg = j.value("receiver_lat_deg", c.receiver_lat_deg);
    c.receiver_lon_deg = j.value("receiver_lon_deg", c.receiver_lon_deg);
    c.receiver_alt_m = j.value("receiver_alt_m", c.receiver_alt_m);
    c.speed_mps = j.value("speed_mps", c.speed_mps);
    c.seed = j.value("seed", c.seed);
    return c;
}

namespace detail {

struct NlosEvent {
    double start = 0, end = 0, bias_m = 0;
};

struct SynthSat {
    std::string id;
    Vec3 pos;          // frozen for the segment
    double elev0 = 0;  // elevation at segment start, drives event rates
    std::vector<NlosEvent> events;
    double active_bias(double t) const {
        double b = 0;
        for (const auto& e : events)
            if (t >= e.start && t < e.end) b = std::max(b, e.bias_m);
        return b;
    }
};

}  // namespace detail

// Deterministic scene synthesis; identical config (including seed) yields
// byte-identical observation files.
inline Sequence generate_scene(const SceneConfig& cfg, const std::string& seq_id,
                               double t0_s = 0.0) {
    cfg.validate();
    Rng rng(mix_seed(cfg.seed, 0x5ce0e));

    Sequence seq;
    seq.seq_id = seq_id;
    seq.scene = cfg.scene;

    Vec3 origin = lla_to_ecef({cfg.receiver_lat_deg * kDeg2Rad, cfg.receiver_lon_deg * kDeg2Rad,
                               cfg.receiver_alt_m});
    // jitter the start point a few hundred meters and pick a heading
    double jitter_e = rng.uniform(-300, 300);
    double jitter_n = rng.uniform(-300, 300);
    double heading = rng.uniform(0, 2 * kPi);
    double clock0 = rng.uniform(-50, 50);
    double clock_drift = rng.uniform(-0.5, 0.5);

    Lla olla = ecef_to_lla(origin);
    double sl = std::sin(olla.lat_rad), cl = std::cos(olla.lat_rad);
    double so = std::sin(olla.lon_rad), co = std::cos(olla.lon_rad);
    auto enu_to_ecef_dir = [&](double e, double n, double u) {
        return Vec3{-so * e - sl * co * n + cl * co * u,
                    co * e - sl * so * n + cl * so * u,
                    cl * n + sl * u};
    };
    Vec3 start = origin + enu_to_ecef_dir(jitter_e, jitter_n, 0);
    Vec3 vel = enu_to_ecef_dir(cfg.speed_mps * std::sin(heading),
                               cfg.speed_mps * std::cos(heading), 0);

    // satellite set: half GPS, half BDS PRNs, frozen geometry
    int n_sats = rng.uniform_int(cfg.n_sats_min, cfg.n_sats_max);
    std::vector<detail::SynthSat> sats;
    for (int k = 0; k < n_sats; ++k) {
        detail::SynthSat s;
        char cons = k % 2 == 0 ? 'G' : 'C';
        int prn = (k / 2) + 1 + (cons == 'C' ? 10 : 0);
        s.id = std::string(1, cons) + (prn < 10 ? "0" : "") + std::to_string(prn);
        double el = rng.uniform(8.0, 85.0);
        double az = rng.uniform(0.0, 360.0);
        s.pos = satellite_from_look_angles(start, el, az);
        s.elev0 = el;
        // low satellites shadow more often
        double rate = cfg.nlos_events_per_100s * (1.5 - std::sin(el * kDeg2Rad));
        double expected = cfg.duration_s * rate / 100.0;
        int n_events = static_cast<int>(expected);
        if (rng.uniform() < expected - n_events) ++n_events;
        for (int e = 0; e < n_events; ++e) {
            detail::NlosEvent ev;
            ev.start = rng.uniform(0.0, cfg.duration_s);
            ev.end = ev.start + rng.uniform(cfg.nlos_dur_min_s, cfg.nlos_dur_max_s);
            ev.bias_m = rng.uniform(cfg.nlos_bias_min_m, cfg.nlos_bias_max_m);
            s.events.push_back(ev);
        }
        sats.push_back(std::move(s));
    }

    const int n_epochs = static_cast<int>(cfg.duration_s * cfg.rate_hz);
    for (int e = 0; e < n_epochs; ++e) {
        double t = static_cast<double>(e) / cfg.rate_hz;
        EpochObservation ep;
        ep.epoch_time_s = t0_s + t;
        ep.scene = cfg.scene;
        Vec3 rx = start + vel * t;
        ep.gt_rx_pos = rx;
        ep.has_gt_rx = true;
        double clock = clock0 + clock_drift * t;

        for (const auto& s : sats) {
            SatObs o;
            o.sat_id = s.id;
            o.sat_pos = s.pos;
            elevation_azimuth_deg(rx, s.pos, &o.elev_deg, &o.az_deg);
            if (o.elev_deg < 5.0) { rng.gaussian(); rng.gaussian(); continue; }
            double range = (s.pos - rx).norm();
            double sin_el = std::max(0.3, std::sin(o.elev_deg * kDeg2Rad));
            double noise = rng.gaussian(0.0, cfg.los_sigma_m / std::sqrt(sin_el));
            double bias = s.active_bias(t);
            double err = noise + bias;
            o.pr_corr_m = range + clock + err;
            o.gt_err_m = err;
            double cn0 = cfg.cn0_base_dbhz + cfg.cn0_elev_gain_db * std::sin(o.elev_deg * kDeg2Rad) +
                         rng.gaussian(0.0, cfg.cn0_jitter_db);
            if (bias > 0) cn0 -= cfg.cn0_drop_base_db + cfg.cn0_drop_per_m * bias;
            o.cn0_dbhz = std::max(12.0, cn0);
            ep.sats.push_back(std::move(o));
        }
        if (ep.sats.size() >= 4) seq.epochs.push_back(std::move(ep));
    }
    return seq;
}

struct BenchmarkSuite {
    std::vector<Sequence> train, valid, test;
    std::vector<SceneConfig> configs;
};

// Fixed-size benchmark: segments of every scene type, each cut 7:1:2 in time
// into the three splits. Defaults land near 2000 training windows at 1 Hz
// with a window of 3.
inline BenchmarkSuite make_benchmark_suite(std::uint64_t seed, int segments_per_scene = 3,
                                           double segment_duration_s = 240.0) {
    BenchmarkSuite suite;
    const Scene scenes[] = {Scene::open_sky, Scene::wooded, Scene::high_rise, Scene::bridge};
    int seg_index = 0;
    for (Scene sc : scenes) {
        for (int k = 0; k < segments_per_scene; ++k, ++seg_index) {
            SceneConfig cfg = default_scene_config(sc, mix_seed(seed, static_cast<std::uint64_t>(seg_index)));
            cfg.duration_s = segment_duration_s;
            suite.configs.push_back(cfg);
            std::string id = std::string(scene_name(sc)) + "_" + std::to_string(k);
            Sequence full = generate_scene(cfg, id, 10000.0 * seg_index);

            std::size_t n = full.epochs.size();
            std::size_t n_train = n * 7 / 10;
            std::size_t n_valid = n / 10;
            Sequence tr{full.seq_id, full.scene, {}};
            Sequence va{full.seq_id, full.scene, {}};
            Sequence te{full.seq_id, full.scene, {}};
            for (std::size_t i = 0; i < n; ++i) {
                if (i < n_train) tr.epochs.push_back(full.epochs[i]);
                else if (i < n_train + n_valid) va.epochs.push_back(full.epochs[i]);
                else te.epochs.push_back(full.epochs[i]);
            }
            suite.train.push_back(std::move(tr));
            suite.valid.push_back(std::move(va));
            suite.test.push_back(std::move(te));
        }
    }
    return suite;
}

}  // namespace diffgnss

#endif  // DIFFGNSS_SYNTH_HPP
