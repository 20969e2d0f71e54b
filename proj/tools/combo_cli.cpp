// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0
//
// combo {gen, train, eval, maskige, gradcheck}

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "combo/combo.hpp"

namespace fs = std::filesystem;

namespace {

// Single line so scripts can split on "kind=" and "message=".
void report_error(const char* kind, const std::string& message) {
    std::string flat = message;
    std::replace(flat.begin(), flat.end(), '\n', ' ');
    std::cerr << "error: kind=" << kind << " message=" << flat << '\n';
}

int cmd_gen(const fs::path& out, const combo::SyntheticOptions& opts) {
    combo::generate_dataset(out, opts);
    std::cout << "wrote " << opts.clips << " clips to " << out.string() << '\n';
    return 0;
}

int cmd_train(const fs::path& data, const fs::path& config, const fs::path& out) {
    const combo::RunConfig cfg = combo::RunConfig::load(config);
    const auto result = combo::train_run(cfg, data, out);
    if (!result.log.empty()) {
        const auto& first = result.log.front();
        const auto& last = result.log.back();
        std::cout << "loss " << first.loss << " -> " << last.loss << " over " << cfg.iterations << " iterations\n";
    }
    std::cout << "checkpoint written to " << out.string() << '\n';
    return 0;
}

int cmd_eval(const fs::path& data, const fs::path& checkpoint, const fs::path& out, const std::string& split,
             double threshold) {
    std::optional<double> tau;
    if (threshold >= 0.0) tau = threshold;
    const auto report = combo::evaluate_run(checkpoint, data, out, split, tau);
    std::cout << std::setprecision(6) << "miou=" << report.miou << " fscore=" << report.fscore << '\n';
    return 0;
}

int cmd_maskige(const fs::path& masks, const fs::path& palette_path, const fs::path& out) {
    if (!fs::is_directory(masks)) throw combo::IoError("mask directory not found: " + masks.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(masks))
        if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw combo::IoError("no .pgm masks in " + masks.string());
    std::vector<combo::GrayImage> planes;
    for (const auto& f : files) planes.push_back(combo::read_pgm(f));
    const combo::MaskStack stack = combo::masks_from_pgms(planes);
    const combo::Palette palette = combo::load_palette(palette_path);
    const combo::Tensor image = combo::make_maskige(stack, palette);
    combo::write_ppm(out, combo::to_rgb(image));
    std::cout << "encoded " << stack.count() << " masks into " << out.string() << '\n';
    return 0;
}

int cmd_gradcheck(const std::string& module, std::uint64_t seed) {
    const auto cases = combo::run_gradcheck(module, seed);
    double worst_elementary = 0.0, worst_composed = 0.0;
    bool ok = true;
    for (const auto& c : cases) {
        std::cout << std::left << std::setw(8) << c.module << ' ' << std::setw(24) << c.name << std::scientific
                  << std::setprecision(3) << " max_rel_error=" << c.report.max_rel_error << " tol=" << c.tolerance
                  << " coords=" << c.report.coordinates << (c.passed() ? " PASS" : " FAIL") << '\n'
                  << std::defaultfloat;
        ok &= c.passed();
        auto& worst = c.tolerance <= combo::kElementaryTolerance ? worst_elementary : worst_composed;
        worst = std::max(worst, c.report.max_rel_error);
    }
    std::cout << std::scientific << std::setprecision(3) << "max relative error: elementary=" << worst_elementary
              << " composed=" << worst_composed << (ok ? " PASS" : " FAIL") << '\n';
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Audio-visual segmentation toolkit"};
    app.require_subcommand(1);

    combo::SyntheticOptions gen_opts;
    fs::path gen_out;
    std::size_t gen_size = 32;
    auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--clips", gen_opts.clips, "Number of clips")->required();
    gen->add_option("--seed", gen_opts.seed, "Seed")->required();
    gen->add_option("--noise", gen_opts.noise, "Audio noise norm bound")->capture_default_str();
    gen->add_option("--perturb", gen_opts.perturb, "Proposal jitter radius (px)")->capture_default_str();
    gen->add_option("--frames", gen_opts.frames, "Frames per clip")->capture_default_str();
    gen->add_option("--size", gen_size, "Frame height and width")->capture_default_str();
    gen->add_option("--classes", gen_opts.num_classes, "Number of classes")->capture_default_str();
    gen->add_option("--audio-dim", gen_opts.audio_dim, "Audio feature size")->capture_default_str();

    fs::path train_data, train_config, train_out;
    auto* train = app.add_subcommand("train", "Train a model");
    train->add_option("--data", train_data, "Dataset directory")->required();
    train->add_option("--config", train_config, "Run configuration (JSON)")->required();
    train->add_option("--out", train_out, "Checkpoint directory")->required();

    fs::path eval_data, eval_ckpt, eval_out;
    std::string eval_split = "val";
    double eval_threshold = -1.0;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    eval->add_option("--data", eval_data, "Dataset directory")->required();
    eval->add_option("--checkpoint", eval_ckpt, "Checkpoint directory")->required();
    eval->add_option("--out", eval_out, "Report path (JSON)")->required();
    eval->add_option("--split", eval_split, "train|val|all")->check(CLI::IsMember({"train", "val", "all"}))->capture_default_str();
    eval->add_option("--threshold", eval_threshold, "Background threshold override");

    fs::path mk_masks, mk_palette, mk_out;
    auto* maskige = app.add_subcommand("maskige", "Encode a directory of PGM masks as a Maskige PPM");
    maskige->add_option("--masks", mk_masks, "Directory of PGM masks")->required();
    maskige->add_option("--palette", mk_palette, "Palette file")->required();
    maskige->add_option("--out", mk_out, "Output PPM")->required();

    std::string gc_module = "all";
    std::uint64_t gc_seed = 0;
    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
    gradcheck->add_option("--module", gc_module, "tensor|bfm|decoder|loss|all")
        ->check(CLI::IsMember({"tensor", "bfm", "decoder", "loss", "all"}))
        ->capture_default_str();
    gradcheck->add_option("--seed", gc_seed, "Seed")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: kind=usage message=" << e.what() << '\n';
        const CLI::App* sub = nullptr;
        for (const auto* s : app.get_subcommands()) sub = s;
        std::cerr << (sub ? sub->help() : app.help());
        return 2;
    }

    try {
        if (*gen) {
            gen_opts.height = gen_opts.width = gen_size;
            return cmd_gen(gen_out, gen_opts);
        }
        if (*train) return cmd_train(train_data, train_config, train_out);
        if (*eval) return cmd_eval(eval_data, eval_ckpt, eval_out, eval_split, eval_threshold);
        if (*maskige) return cmd_maskige(mk_masks, mk_palette, mk_out);
        if (*gradcheck) return cmd_gradcheck(gc_module, gc_seed);
    } catch (const combo::Error& e) {
        report_error(e.kind(), e.what());
        return 1;
    } catch (const std::exception& e) {
        report_error("internal", e.what());
        return 1;
    }
    return 0;
}
