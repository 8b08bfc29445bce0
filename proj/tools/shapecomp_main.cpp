// shapecomp: command-line front end for data generation, training, completion
// and the evaluation experiments. Exit codes: 0 ok, 1 usage, 2 runtime error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "shapecomp/dataset_io.hpp"
#include "shapecomp/grid_io.hpp"
#include "shapecomp/log.hpp"
#include "shapecomp/mesh.hpp"
#include "shapecomp/nn/checkpoint.hpp"
#include "shapecomp/trainer.hpp"

namespace fs = std::filesystem;
using namespace shapecomp;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Every key in `given` must exist in `known`; catches typos that would otherwise fall back to defaults.
void check_keys(const json& given, const json& known, const std::string& where) {
    if (!given.is_object()) return;
    for (const auto& [k, v] : given.items()) {
        if (!known.contains(k)) throw ConfigMismatch("unknown config key '" + where + k + "'");
        if (known[k].is_object()) check_keys(v, known[k], where + k + ".");
    }
}

ExperimentConfig load_config(const std::string& path) {
    if (path.empty()) return ExperimentConfig{};
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open config '" + path + "'");
    try {
        const json j = json::parse(in);
        check_keys(j, json(ExperimentConfig{}), "");
        return j.get<ExperimentConfig>();
    } catch (const json::exception& e) {
        throw FormatError("bad config '" + path + "': " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw FormatError("cannot write '" + path.string() + "'");
}

std::vector<double> parse_code(const std::string& s) {
    std::vector<double> z;
    std::stringstream ss(s);
    for (std::string tok; std::getline(ss, tok, ',');) {
        try {
            z.push_back(std::stod(tok));
        } catch (const std::exception&) {
            throw UsageError("--z expects comma-separated numbers, got '" + s + "'");
        }
    }
    return z;
}

fs::path sibling(const fs::path& in, const std::string& suffix) {
    return in.parent_path() / (in.stem().string() + suffix);
}

Dataset dataset_for(const std::string& data_dir, ExperimentConfig& cfg) {
    if (data_dir.empty()) return make_dataset(cfg.data);
    auto [d, dc] = read_dataset_dir(data_dir);
    cfg.data.c = dc.c;
    cfg.data.seed = dc.seed;
    cfg.model.c = dc.c;
    return d;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"3D shape completion with voxel-weighted Dice and target-weighted CVAE training"};
    app.require_subcommand(1);
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "Log progress at info level");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic mandible-like corpus");
    std::string gen_out, gen_config;
    DataConfig gen_cfg;
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--config", gen_config, "Experiment config whose data section is used");
    auto* gen_c = gen->add_option("--c", gen_cfg.c, "Grid edge");
    auto* gen_seed = gen->add_option("--seed", gen_cfg.seed, "Generator seed");
    auto* gen_ntrain = gen->add_option("--n-train", gen_cfg.n_train, "Training shapes");
    auto* gen_nval = gen->add_option("--n-val", gen_cfg.n_val, "Validation shapes");
    auto* gen_ntest = gen->add_option("--n-test", gen_cfg.n_test, "Test shapes");

    // voxelize
    auto* vox = app.add_subcommand("voxelize", "Voxelize a closed STL/OBJ mesh to a VXG1 grid");
    std::string vox_in, vox_out;
    double vox_size = 1.0;
    int vox_pad = 0;
    vox->add_option("--in", vox_in, "Mesh file")->required()->check(CLI::ExistingFile);
    vox->add_option("--out", vox_out, "Output grid (.vxg)")->required();
    vox->add_option("--voxel-size", vox_size, "Voxel edge in mesh units")->check(CLI::PositiveNumber);
    vox->add_option("--pad-to", vox_pad, "Zero-pad to this cube edge");

    // dissect
    auto* dis = app.add_subcommand("dissect", "Cut a random cuboid out of a grid");
    std::string dis_in, dis_prefix;
    std::uint64_t dis_seed = 0;
    dis->add_option("--in", dis_in, "Input grid (.vxg)")->required();
    dis->add_option("--seed", dis_seed, "Dissection seed");
    dis->add_option("--prefix", dis_prefix, "Output prefix (default: input path without extension)");

    // train
    auto* trn = app.add_subcommand("train", "Train one model");
    std::string trn_config, trn_data, trn_out, trn_objective;
    std::uint64_t trn_seed = 1;
    int trn_epochs = -1;
    trn->add_option("--config", trn_config, "Experiment config (JSON)");
    trn->add_option("--data", trn_data, "Dataset directory from gen-data (default: generate from config)");
    trn->add_option("--out", trn_out, "Output directory")->required();
    trn->add_option("--objective", trn_objective, "dice_whole|dice_target|vwdice|cvae_basic|cvae_vwdice_tw");
    trn->add_option("--seed", trn_seed, "Training seed");
    trn->add_option("--epochs", trn_epochs, "Override the configured epoch count");

    // complete
    auto* cmp = app.add_subcommand("complete", "Complete a dissected input with a trained model");
    std::string cmp_ckpt, cmp_in, cmp_out, cmp_z;
    cmp->add_option("--checkpoint", cmp_ckpt, "Model checkpoint")->required();
    cmp->add_option("--in", cmp_in, "Input grid X (.vxg)")->required();
    cmp->add_option("--out", cmp_out, "Output prefix; writes <out>.vxf and <out>.vxg")->required();
    cmp->add_option("--z", cmp_z, "Latent code for probabilistic models, comma-separated (default 0)");

    // sample
    auto* smp = app.add_subcommand("sample", "Draw completion variations from a probabilistic model");
    std::string smp_ckpt, smp_in, smp_out;
    int smp_n = 4;
    std::uint64_t smp_seed = 0;
    smp->add_option("--checkpoint", smp_ckpt, "Model checkpoint")->required();
    smp->add_option("--in", smp_in, "Input grid X (.vxg)")->required();
    smp->add_option("--out", smp_out, "Output directory")->required();
    smp->add_option("--n", smp_n, "Number of variations")->check(CLI::PositiveNumber);
    smp->add_option("--seed", smp_seed, "Latent sampling seed");

    // evaluate
    auto* evl = app.add_subcommand("evaluate", "Score a prediction against a target");
    std::string evl_pred, evl_target, evl_region, evl_out;
    double evl_threshold = 0.5;
    bool evl_max_hd = false;
    evl->add_option("--pred", evl_pred, "Prediction (.vxg or .vxf)")->required();
    evl->add_option("--target", evl_target, "Target (.vxg)")->required();
    evl->add_option("--region", evl_region, "Only score the prediction inside this mask (.vxg)");
    evl->add_option("--threshold", evl_threshold, "Binarisation threshold");
    evl->add_flag("--hd95-max", evl_max_hd, "HD95 as the max of both directions instead of the union");
    evl->add_option("--out", evl_out, "Write JSON here (default: stdout); a .csv name writes CSV");

    // experiment
    auto* exp = app.add_subcommand("experiment", "Run table1 or latent deviation experiments");
    std::string exp_kind, exp_config, exp_out, exp_ckpt, exp_data;
    int threads = 1;
    std::uint64_t exp_seed = 0;
    bool exp_save_models = false;
    exp->add_option("kind", exp_kind, "table1 | latent")->required()->check(CLI::IsMember({"table1", "latent"}));
    exp->add_option("--config", exp_config, "Experiment config (JSON)");
    exp->add_option("--data", exp_data, "Dataset directory from gen-data (default: generate from config)");
    exp->add_option("--out", exp_out, "Output directory")->required();
    exp->add_option("--threads", threads, "Parallel training jobs; results do not depend on it")->check(CLI::PositiveNumber);
    auto* exp_seed_opt = exp->add_option("--seed", exp_seed, "latent: training seed (default: first configured seed)");
    exp->add_option("--checkpoint", exp_ckpt, "latent: use this trained model instead of training one");
    exp->add_flag("--save-models", exp_save_models, "table1: write every trained model to <out>/models");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }
    log::set_level(verbose ? log::Level::info : log::Level::warn);

    try {
        if (*gen) {
            DataConfig cfg = gen_config.empty() ? gen_cfg : load_config(gen_config).data;
            if (*gen_c) cfg.c = gen_cfg.c;
            if (*gen_seed) cfg.seed = gen_cfg.seed;
            if (*gen_ntrain) cfg.n_train = gen_cfg.n_train;
            if (*gen_nval) cfg.n_val = gen_cfg.n_val;
            if (*gen_ntest) cfg.n_test = gen_cfg.n_test;
            if (cfg.n_train < 1 || cfg.n_val < 0 || cfg.n_test < 0) throw UsageError("split sizes must be n-train >= 1, others >= 0");
            write_dataset_dir(gen_out, cfg);
            std::cout << "wrote " << cfg.n_train + cfg.n_val + cfg.n_test << " shapes to " << gen_out << "\n";
        } else if (*vox) {
            VoxelizeReport report;
            VoxelGrid g = voxelize(load_mesh(vox_in), vox_size, &report);
            if (vox_pad > 0) g = pad_to_cube(g, vox_pad);
            io::write_grid(vox_out, g);
            std::cout << json{{"edge", g.edge()},
                              {"occupied", g.count()},
                              {"disagreeing_voxels", report.disagreeing_voxels},
                              {"origin", {report.origin[0], report.origin[1], report.origin[2]}}}
                             .dump()
                      << "\n";
        } else if (*dis) {
            const VoxelGrid s = io::read_voxel_grid(dis_in);
            const Dissection d = sample_dissection(s, dis_seed);
            const fs::path prefix = dis_prefix.empty() ? sibling(dis_in, "") : fs::path(dis_prefix);
            const std::string p = prefix.string();
            if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
            io::write_grid(p + ".x.vxg", d.x);
            io::write_grid(p + ".y.vxg", d.y);
            io::write_grid(p + ".mask.vxg", d.mask);
            std::cout << json{{"removed_voxels", d.y.count()}, {"remaining_voxels", d.x.count()}}.dump() << "\n";
        } else if (*trn) {
            ExperimentConfig cfg = load_config(trn_config);
            Dataset d = dataset_for(trn_data, cfg);
            const Objective obj = trn_objective.empty() ? cfg.train.objective : objective_from_string(trn_objective);
            if (trn_epochs >= 0) cfg.train.epochs = trn_epochs;
            TrainResult r = train_arm(d, cfg, obj, trn_seed);
            fs::create_directories(trn_out);
            const json meta{{"objective", obj}, {"seed", trn_seed}, {"best_epoch", r.best_epoch},
                            {"best_val_dsc", r.best_val_dsc}, {"config", cfg}};
            nn::save_checkpoint(fs::path(trn_out) / "model.sckp", r.net, meta);
            std::ostringstream logcsv;
            write_train_log_csv(logcsv, r.log);
            write_text(fs::path(trn_out) / "train_log.csv", logcsv.str());
            std::cout << json{{"best_epoch", r.best_epoch}, {"best_val_dsc", r.best_val_dsc}}.dump() << "\n";
        } else if (*cmp) {
            nn::Checkpoint ck = nn::load_checkpoint(cmp_ckpt);
            const VoxelGrid x = io::read_voxel_grid(cmp_in);
            std::optional<std::vector<double>> z;
            if (!cmp_z.empty()) z = parse_code(cmp_z);
            const ProbGrid p = infer_complete(ck.net, x, z);
            io::write_grid(cmp_out + ".vxf", p);
            io::write_grid(cmp_out + ".vxg", p.binarize(0.5));
        } else if (*smp) {
            nn::Checkpoint ck = nn::load_checkpoint(smp_ckpt);
            const VoxelGrid x = io::read_voxel_grid(smp_in);
            const auto vars = sample_variations(ck.net, x, smp_n, smp_seed);
            fs::create_directories(smp_out);
            json codes = json::array();
            for (std::size_t i = 0; i < vars.size(); ++i) {
                char name[32];
                std::snprintf(name, sizeof name, "variation_%03zu", i);
                io::write_grid(fs::path(smp_out) / (std::string(name) + ".vxf"), vars[i].completion);
                io::write_grid(fs::path(smp_out) / (std::string(name) + ".vxg"), vars[i].completion.binarize(0.5));
                codes.push_back({{"file", std::string(name) + ".vxg"}, {"z", vars[i].z}});
            }
            write_text(fs::path(smp_out) / "codes.json", codes.dump(2) + "\n");
        } else if (*evl) {
            const ProbGrid pred = io::read_prob_grid(evl_pred);
            const VoxelGrid target = io::read_voxel_grid(evl_target);
            EvalOptions opt;
            opt.threshold = evl_threshold;
            if (evl_max_hd) opt.hd95_convention = Hd95Convention::max_of_directions;
            const MetricsReport r = evl_region.empty() ? evaluate(pred, target, opt)
                                                       : evaluate_region(pred, io::read_voxel_grid(evl_region), target, opt);
            std::string text;
            if (fs::path(evl_out).extension() == ".csv") {
                std::ostringstream csv;
                write_metrics_csv(csv, {{"prediction", aggregate({r})}});
                text = csv.str();
            } else {
                text = to_json(r).dump(2) + "\n";
            }
            if (evl_out.empty()) {
                std::cout << text;
            } else {
                write_text(evl_out, text);
            }
        } else if (*exp) {
            ExperimentConfig cfg = load_config(exp_config);
            Dataset d = dataset_for(exp_data, cfg);
            fs::create_directories(exp_out);
            if (exp_kind == "table1") {
                const fs::path models = fs::path(exp_out) / "models";
                auto keep = [&](Objective arm, std::uint64_t seed, TrainResult& r) {
                    if (!exp_save_models) return;
                    fs::create_directories(models);
                    nn::save_checkpoint(models / (to_string(arm) + "_seed" + std::to_string(seed) + ".sckp"), r.net,
                                        json{{"objective", arm}, {"seed", seed}, {"best_epoch", r.best_epoch}});
                };
                const Table1Report rep = table1_experiment(d, cfg, threads, keep);
                std::ostringstream csv;
                write_table1_csv(csv, rep);
                write_text(fs::path(exp_out) / "table1.csv", csv.str());
                write_text(fs::path(exp_out) / "table1.json", to_json(rep).dump(2) + "\n");
                std::cout << csv.str();
            } else {
                const std::uint64_t seed = *exp_seed_opt ? exp_seed : cfg.seeds.at(0);
                auto trained = [&]() {
                    if (!exp_ckpt.empty()) return nn::load_checkpoint(exp_ckpt).net;
                    TrainResult r = train_arm(d, cfg, Objective::cvae_vwdice_tw, seed);
                    nn::save_checkpoint(fs::path(exp_out) / "model.sckp", r.net,
                                        json{{"objective", Objective::cvae_vwdice_tw}, {"seed", seed}});
                    return nn::CompletionNet<float>(r.net);
                };
                nn::CompletionNet<float> net = trained();
                auto cases = frozen_test_cases(d, cfg);
                if (int(cases.size()) > cfg.latent_cases) cases.resize(std::size_t(cfg.latent_cases));
                const auto res = latent_deviation_experiment(net, cases, cfg.latent_k, cfg.latent_step, seed);
                std::ostringstream csv;
                write_latent_csv(csv, res);
                write_text(fs::path(exp_out) / "latent.csv", csv.str());
                const json summary{{"spearman_rho", res.spearman_rho}, {"rows", res.rows.size()}, {"seed", seed}};
                write_text(fs::path(exp_out) / "latent.json", summary.dump(2) + "\n");
                std::cout << summary.dump() << "\n";
            }
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
