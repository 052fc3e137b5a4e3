#ifndef DIFFGNSS_CHECKPOINT_HPP
#define DIFFGNSS_CHECKPOINT_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include <json.hpp>

#include "diffgnss/model.hpp"
#include "diffgnss/train.hpp"

namespace diffgnss {

struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& what) : std::runtime_error(what) {}
};

constexpr std::uint32_t kCheckpointVersion = 1;

// Binary layout: "DGNS" magic, u32 version, u32 header length, JSON header
// (parameter names/shapes in store order, normalization stats, model and
// train configs, epoch, metric history), then raw little-endian float32
// payloads in header order.
inline void save_checkpoint(const Model& model, const TrainConfig& tc,
                            const std::vector<EpochMetrics>& history, int epoch,
                            const std::string& path) {
    nlohmann::json header;
    header["version"] = kCheckpointVersion;
    header["model_config"] = model_config_to_json(model.cfg);
    header["train_config"] = train_config_to_json(tc);
    header["epoch"] = epoch;
    header["metric_history"] = history_to_json(history);
    if (model.has_norm) header["norm_stats"] = norm_stats_to_json(model.norm);
    nlohmann::json params = nlohmann::json::array();
    for (std::size_t i = 0; i < model.params.size(); ++i)
        params.push_back({{"name", model.params.names[i]},
                          {"shape", model.params[static_cast<int>(i)].shape}});
    header["params"] = std::move(params);
    std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open for writing: " + path);
    f.write("DGNS", 4);
    std::uint32_t version = kCheckpointVersion;
    std::uint32_t hlen = static_cast<std::uint32_t>(hs.size());
    f.write(reinterpret_cast<const char*>(&version), 4);
    f.write(reinterpret_cast<const char*>(&hlen), 4);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        const auto& p = model.params[static_cast<int>(i)];
        f.write(reinterpret_cast<const char*>(p.data.data()),
                static_cast<std::streamsize>(p.data.size() * sizeof(float)));
    }
    if (!f) throw CheckpointError("write failed: " + path);
}

struct LoadedCheckpoint {
    Model model;
    TrainConfig train_config;
    int epoch = 0;
    nlohmann::json metric_history;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "DGNS", 4) != 0)
        throw CheckpointError(path + ": not a checkpoint (bad magic)");
    std::uint32_t version = 0, hlen = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    f.read(reinterpret_cast<char*>(&hlen), 4);
    if (!f) throw CheckpointError(path + ": truncated file");
    if (version != kCheckpointVersion)
        throw CheckpointError(path + ": unsupported checkpoint version " +
                              std::to_string(version));
    std::string hs(hlen, '\0');
    f.read(hs.data(), hlen);
    if (!f) throw CheckpointError(path + ": truncated header");
    nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
    if (header.is_discarded()) throw CheckpointError(path + ": corrupt header JSON");

    LoadedCheckpoint out{Model::create(model_config_from_json(header.at("model_config")), 0)};
    out.train_config = train_config_from_json(header.at("train_config"));
    out.epoch = header.value("epoch", 0);
    out.metric_history = header.value("metric_history", nlohmann::json::array());
    if (header.contains("norm_stats")) {
        out.model.norm = norm_stats_from_json(header.at("norm_stats"));
        out.model.has_norm = true;
    }

    const auto& plist = header.at("params");
    if (plist.size() != out.model.params.size())
        throw CheckpointError(path + ": checkpoint holds " + std::to_string(plist.size()) +
                              " parameters, model expects " +
                              std::to_string(out.model.params.size()));
    for (std::size_t i = 0; i < plist.size(); ++i) {
        std::string name = plist[i].at("name").get<std::string>();
        Shape shape = plist[i].at("shape").get<Shape>();
        if (name != out.model.params.names[i])
            throw CheckpointError(path + ": parameter order mismatch at " + name +
                                  " (model has " + out.model.params.names[i] + ")");
        auto& p = out.model.params[static_cast<int>(i)];
        if (shape != p.shape)
            throw CheckpointError(path + ": shape mismatch for " + name + ": file " +
                                  shape_str(shape) + " vs model " + shape_str(p.shape));
        f.read(reinterpret_cast<char*>(p.data.data()),
               static_cast<std::streamsize>(p.data.size() * sizeof(float)));
        if (!f) throw CheckpointError(path + ": truncated payload at parameter " + name);
    }
    return out;
}

}  // namespace diffgnss

#endif  // DIFFGNSS_CHECKPOINT_HPP
