#pragma once

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "kspu/data.hpp"
#include "kspu/punet.hpp"
#include "kspu/shape_space.hpp"

// Command-line surface: dataset generation, training, sampling, evaluation
// and latent inspection. Exit codes: 0 success, 1 runtime/I-O failure,
// 2 invalid flags or configuration.
namespace kspu::cli {

namespace detail {

inline int env_threads() {
    const char* raw = std::getenv("KSPU_THREADS");
    if (!raw) return 1;
    const int n = std::atoi(raw);
    return n > 0 ? n : 1;
}

// Known RunConfig file keys: every ModelConfig field plus the path options.
inline void apply_config_file(const std::filesystem::path& file, nlohmann::json& model_json,
                              std::string& dataset, std::string& out) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot open config file " + file.string());
    nlohmann::json parsed = nlohmann::json::parse(in, nullptr, false);
    if (parsed.is_discarded() || !parsed.is_object())
        throw InvalidConfig("config file is not a JSON object: " + file.string());
    for (const auto& [key, value] : parsed.items()) {
        if (key == "data") {
            dataset = value.get<std::string>();
        } else if (key == "out") {
            out = value.get<std::string>();
        } else if (model_json.contains(key)) {
            model_json[key] = value;
        } else {
            throw InvalidConfig("unknown config key '" + key + "' in " + file.string());
        }
    }
}

inline void echo_config(const nlohmann::json& effective, const std::string& out_dir) {
    std::cerr << "config: " << effective.dump() << "\n";
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        std::ofstream out(std::filesystem::path(out_dir) / "effective_config.json",
                          std::ios::trunc);
        if (!out) throw IoError("cannot write effective_config.json in " + out_dir);
        out << effective.dump(2) << "\n";
    }
}

inline std::vector<double> load_input_image(const std::filesystem::path& path, int expect_size) {
    int w = 0, h = 0;
    const std::vector<std::uint8_t> bytes = data::read_pgm(path, w, h);
    if (w != expect_size || h != expect_size)
        throw CheckpointMismatch("input " + path.string() + " is " + std::to_string(w) + "x" +
                                 std::to_string(h) + " but the checkpoint expects " +
                                 std::to_string(expect_size));
    std::vector<double> img(bytes.size());
    for (size_t i = 0; i < bytes.size(); ++i) img[i] = bytes[i] / 255.0;
    return img;
}

inline void write_train_log(const std::vector<punet::EpochStats>& log,
                            const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    for (const auto& e : log) out << e.to_json().dump() << "\n";
}

}  // namespace detail

inline int run(const std::vector<std::string>& args) {
    CLI::App app{"Kendall Shape Probabilistic U-Net"};
    app.require_subcommand(1);

    // ---- gen-data ----------------------------------------------------------
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic multi-annotator dataset");
    std::string gen_out;
    int gen_n = 0, gen_size = 64, gen_annotators = 4;
    std::uint64_t gen_seed = 0;
    gen->add_option("--out", gen_out, "output dataset directory")->required();
    gen->add_option("--n", gen_n, "number of samples")->required();
    gen->add_option("--size", gen_size, "image size (divisible by 8)");
    gen->add_option("--annotators", gen_annotators, "annotator masks per image");
    gen->add_option("--seed", gen_seed, "master seed");

    // ---- train --------------------------------------------------------------
    auto* tr = app.add_subcommand("train", "train a model on a dataset directory");
    std::string tr_data, tr_out, tr_config;
    punet::ModelConfig defaults;
    auto* opt_data = tr->add_option("--data", tr_data, "dataset directory");
    auto* opt_out = tr->add_option("--out", tr_out, "output directory");
    tr->add_option("--config", tr_config, "JSON config file (flags override file values)");
    double tr_beta = defaults.beta, tr_gamma = defaults.gamma, tr_lr = defaults.learning_rate;
    double tr_wd = defaults.weight_decay_scale, tr_kmin = defaults.kappa_min;
    int tr_epochs = defaults.epochs, tr_size = defaults.image_size, tr_depth = defaults.unet_depth;
    int tr_base = defaults.base_channels, tr_k = defaults.k, tr_group = defaults.group_order;
    int tr_mc = defaults.kl_mc_samples;
    std::uint64_t tr_seed = defaults.seed;
    std::string tr_klmode = defaults.kl_mode;
    auto* o_beta = tr->add_option("--beta", tr_beta, "KL weight");
    auto* o_gamma = tr->add_option("--gamma", tr_gamma, "weight-regularization weight");
    auto* o_lr = tr->add_option("--lr", tr_lr, "Adam learning rate");
    auto* o_wd = tr->add_option("--weight-decay-scale", tr_wd, "inner weight penalty scale");
    auto* o_kmin = tr->add_option("--kappa-min", tr_kmin, "concentration floor");
    auto* o_epochs = tr->add_option("--epochs", tr_epochs, "training epochs");
    auto* o_size = tr->add_option("--image-size", tr_size, "expected image size");
    auto* o_depth = tr->add_option("--depth", tr_depth, "U-Net depth");
    auto* o_base = tr->add_option("--base-channels", tr_base, "U-Net base channels");
    auto* o_k = tr->add_option("--k", tr_k, "landmark count");
    auto* o_group = tr->add_option("--group-order", tr_group, "cyclic group order");
    auto* o_seed = tr->add_option("--seed", tr_seed, "training seed");
    auto* o_klmode = tr->add_option("--kl-mode", tr_klmode, "'bound' or 'monte_carlo'");
    auto* o_mc = tr->add_option("--kl-mc-samples", tr_mc, "Monte-Carlo KL draws");

    // ---- sample ---------------------------------------------------------------
    auto* sm = app.add_subcommand("sample", "sample segmentations for input images");
    std::string sm_ckpt, sm_out;
    std::vector<std::string> sm_inputs;
    int sm_n = 5;
    std::uint64_t sm_seed = 0;
    double sm_kappa = 0.0;
    sm->add_option("--checkpoint", sm_ckpt, "trained checkpoint")->required();
    sm->add_option("--input", sm_inputs, "input PGM image(s)")->required();
    sm->add_option("--out", sm_out, "output directory")->required();
    sm->add_option("--n", sm_n, "samples per image");
    sm->add_option("--seed", sm_seed, "sampling seed");
    sm->add_option("--kappa", sm_kappa, "override the prior concentration (diagnostic)");

    // ---- eval -----------------------------------------------------------------
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    std::string ev_ckpt, ev_data, ev_out;
    int ev_n = 5;
    std::uint64_t ev_seed = 0;
    ev->add_option("--checkpoint", ev_ckpt, "trained checkpoint")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--out", ev_out, "metrics file (default: stdout)");
    ev->add_option("--n", ev_n, "samples per image");
    ev->add_option("--seed", ev_seed, "sampling seed");

    // ---- inspect-latent ----------------------------------------------------------
    auto* il = app.add_subcommand("inspect-latent", "dump the prior latent for an image");
    std::string il_ckpt, il_input;
    il->add_option("--checkpoint", il_ckpt, "trained checkpoint")->required();
    il->add_option("--input", il_input, "input PGM image")->required();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) {
            if (gen_n < 1) throw InvalidConfig("--n must be >= 1");
            detail::echo_config(nlohmann::json{{"command", "gen-data"},
                                               {"out", gen_out},
                                               {"n", gen_n},
                                               {"size", gen_size},
                                               {"annotators", gen_annotators},
                                               {"seed", gen_seed}},
                                gen_out);
            const data::Dataset ds = data::generate_synthetic(gen_n, gen_size, gen_annotators,
                                                              gen_seed, detail::env_threads());
            data::save_dataset(ds, gen_out);
            std::cout << "wrote " << ds.samples.size() << " samples (" << gen_size << "x"
                      << gen_size << ", " << gen_annotators << " annotators, seed " << gen_seed
                      << ") to " << gen_out << "\n";
        } else if (tr->parsed()) {
            nlohmann::json model_json = defaults.to_json();
            if (!tr_config.empty()) {
                std::string file_data, file_out;
                detail::apply_config_file(tr_config, model_json, file_data, file_out);
                if (opt_data->count() == 0 && !file_data.empty()) tr_data = file_data;
                if (opt_out->count() == 0 && !file_out.empty()) tr_out = file_out;
            }
            auto override_if = [](CLI::Option* opt, nlohmann::json& j, const char* key,
                                  auto value) {
                if (opt->count() > 0) j[key] = value;
            };
            override_if(o_beta, model_json, "beta", tr_beta);
            override_if(o_gamma, model_json, "gamma", tr_gamma);
            override_if(o_lr, model_json, "learning_rate", tr_lr);
            override_if(o_wd, model_json, "weight_decay_scale", tr_wd);
            override_if(o_kmin, model_json, "kappa_min", tr_kmin);
            override_if(o_epochs, model_json, "epochs", tr_epochs);
            override_if(o_size, model_json, "image_size", tr_size);
            override_if(o_depth, model_json, "unet_depth", tr_depth);
            override_if(o_base, model_json, "base_channels", tr_base);
            override_if(o_k, model_json, "k", tr_k);
            override_if(o_group, model_json, "group_order", tr_group);
            override_if(o_seed, model_json, "seed", tr_seed);
            override_if(o_klmode, model_json, "kl_mode", tr_klmode);
            override_if(o_mc, model_json, "kl_mc_samples", tr_mc);
            if (tr_data.empty())
                throw InvalidConfig("train: --data is required (flag or config file)");
            if (tr_out.empty())
                throw InvalidConfig("train: --out is required (flag or config file)");

            const data::Dataset ds = data::load_dataset(tr_data);
            punet::ModelConfig cfg = punet::ModelConfig::from_json(model_json);
            if (cfg.image_size != ds.image_size)
                throw InvalidConfig("train: image_size " + std::to_string(cfg.image_size) +
                                    " does not match dataset size " +
                                    std::to_string(ds.image_size));
            detail::echo_config(nlohmann::json{{"command", "train"},
                                               {"data", tr_data},
                                               {"out", tr_out},
                                               {"model", cfg.to_json()}},
                                tr_out);
            punet::KendallPUNet<float> model(cfg);
            const auto log = punet::train(model, ds.samples);
            const std::filesystem::path out_dir(tr_out);
            detail::write_train_log(log, out_dir / "train_log.jsonl");
            model.save(out_dir / "checkpoint.kspu");
            std::cout << "trained " << cfg.epochs << " epochs on " << ds.samples.size()
                      << " images; checkpoint at " << (out_dir / "checkpoint.kspu").string()
                      << "\n";
        } else if (sm->parsed()) {
            if (sm_n < 1) throw InvalidConfig("--n must be >= 1");
            detail::echo_config(nlohmann::json{{"command", "sample"},
                                               {"checkpoint", sm_ckpt},
                                               {"input", sm_inputs},
                                               {"out", sm_out},
                                               {"n", sm_n},
                                               {"seed", sm_seed},
                                               {"kappa", sm_kappa}},
                                sm_out);
            auto model = punet::KendallPUNet<float>::load(sm_ckpt);
            Rng rng(sm_seed);
            for (const auto& input : sm_inputs) {
                const std::vector<double> img =
                    detail::load_input_image(input, model.config().image_size);
                const auto masks = model.sample_segmentations(img, sm_n, rng, sm_kappa);
                const std::string stem = std::filesystem::path(input).stem().string();
                for (size_t i = 0; i < masks.size(); ++i) {
                    std::vector<std::uint8_t> bytes(masks[i].size());
                    for (size_t p = 0; p < bytes.size(); ++p) bytes[p] = masks[i][p] ? 255 : 0;
                    data::write_pgm(std::filesystem::path(sm_out) /
                                        (stem + "_sample" + std::to_string(i) + ".pgm"),
                                    model.config().image_size, model.config().image_size, bytes);
                }
            }
            std::cout << "wrote " << sm_n << " samples per input to " << sm_out << "\n";
        } else if (ev->parsed()) {
            if (ev_n < 1) throw InvalidConfig("--n must be >= 1");
            detail::echo_config(nlohmann::json{{"command", "eval"},
                                               {"checkpoint", ev_ckpt},
                                               {"data", ev_data},
                                               {"out", ev_out},
                                               {"n", ev_n},
                                               {"seed", ev_seed}},
                                "");
            auto model = punet::KendallPUNet<float>::load(ev_ckpt);
            const data::Dataset ds = data::load_dataset(ev_data);
            if (ds.image_size != model.config().image_size)
                throw CheckpointMismatch("eval: dataset size does not match the checkpoint");
            Rng rng(ev_seed);
            const punet::EvalReport report = punet::evaluate(model, ds.samples, ev_n, rng);
            std::ofstream file;
            std::ostream* out = &std::cout;
            if (!ev_out.empty()) {
                file.open(ev_out, std::ios::trunc);
                if (!file) throw IoError("cannot write " + ev_out);
                out = &file;
            }
            for (const auto& im : report.per_image) *out << im.to_json().dump() << "\n";
            *out << report.aggregate.to_json().dump() << "\n";
        } else if (il->parsed()) {
            auto model = punet::KendallPUNet<float>::load(il_ckpt);
            const std::vector<double> img =
                detail::load_input_image(il_input, model.config().image_size);
            auto tensor = model.image_tensor(img, model.config().image_size,
                                             model.config().image_size);
            const auto latent = model.latent_distribution(tensor);
            const vmf::VmfParams params = latent.to_vmf();
            const shape::PreShape m0 = shape::psi_inverse(
                shape::SphericalPoint{params.mu}, model.config().k, model.config().m);
            nlohmann::json landmarks = nlohmann::json::array();
            for (int j = 0; j < model.config().k; ++j)
                landmarks.push_back({m0.points(0, j), m0.points(1, j)});
            nlohmann::json dump{{"mu0", std::vector<double>(params.mu.data(),
                                                            params.mu.data() + params.mu.size())},
                                {"kappa", params.kappa},
                                {"angle", latent.angle},
                                {"landmarks", landmarks},
                                {"config", model.config().to_json()}};
            std::cout << dump.dump(2) << "\n";
        }
    } catch (const InvalidConfig& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

inline int run(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args);
}

}  // namespace kspu::cli
