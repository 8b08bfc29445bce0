#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"

#include "shapecomp/grid_io.hpp"
#include "shapecomp/synth.hpp"
#include "shapecomp/trainer.hpp"

// On-disk synthetic corpus: <dir>/{train,val,test}/NNNN.vxg plus manifest.json
// holding the data config and the generator parameters of every shape.
namespace shapecomp {

inline std::string shape_file_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04zu.vxg", i);
    return buf;
}

inline void write_dataset_dir(const std::filesystem::path& dir, const DataConfig& cfg) {
    if (cfg.n_train < 1 || cfg.n_val < 0 || cfg.n_test < 0) throw InvalidArgument("invalid split sizes");
    const auto samples = generate_dataset(cfg.n_train + cfg.n_val + cfg.n_test, GridSpec(cfg.c), cfg.seed);
    nlohmann::json shapes = nlohmann::json::array();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const int k = int(i);
        const std::string split = k < cfg.n_train ? "train" : k < cfg.n_train + cfg.n_val ? "val" : "test";
        const std::size_t local = split == "train" ? i : split == "val" ? i - std::size_t(cfg.n_train)
                                                                         : i - std::size_t(cfg.n_train + cfg.n_val);
        const std::filesystem::path rel = std::filesystem::path(split) / shape_file_name(local);
        std::filesystem::create_directories(dir / split);
        io::write_grid(dir / rel, samples[i].grid);
        shapes.push_back({{"split", split}, {"file", rel.generic_string()}, {"params", samples[i].params}});
    }
    std::ofstream out(dir / "manifest.json");
    out << nlohmann::json{{"data", cfg}, {"shapes", shapes}}.dump(2) << '\n';
    if (!out) throw FormatError("cannot write manifest in '" + dir.string() + "'");
}

/// Reads a corpus written by write_dataset_dir; returns the splits and the stored config.
inline std::pair<Dataset, DataConfig> read_dataset_dir(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw FormatError("no manifest.json in '" + dir.string() + "'");
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("manifest.json is not valid JSON: ") + e.what());
    }
    const DataConfig cfg = m.at("data").get<DataConfig>();
    Dataset d;
    for (const auto& s : m.at("shapes")) {
        const std::string split = s.at("split").get<std::string>();
        VoxelGrid g = io::read_voxel_grid(dir / s.at("file").get<std::string>());
        if (g.edge() != cfg.c) throw ConfigMismatch("shape " + s.at("file").get<std::string>() + " has the wrong grid size");
        (split == "train" ? d.train : split == "val" ? d.val : d.test).push_back(std::move(g));
    }
    if (d.train.empty()) throw InvalidArgument("dataset has no training shapes");
    return {std::move(d), cfg};
}

}  // namespace shapecomp
