// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic data, config, train/eval runs and the CLI.

#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "combo/combo.hpp"

using namespace combo;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("combo_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

SyntheticOptions tiny_data(std::uint64_t seed = 0) {
    SyntheticOptions o;
    o.clips = 10;
    o.frames = 2;
    o.num_classes = 2;
    o.audio_dim = 4;
    o.seed = seed;
    return o;
}

RunConfig tiny_config() {
    RunConfig c;
    c.frames = 2;
    c.num_classes = 2;
    c.audio_dim = 4;
    c.model_dim = 8;
    c.pixel_dim = 8;
    c.num_queries = 4;
    c.rounds = 1;
    c.stage_channels = {4, 6, 8, 10};
    c.iterations = 3;
    c.batch_size = 2;
    c.log_every = 2;
    return c;
}

struct CliResult {
    int code = -1;
    std::string out, err;
};

CliResult run_cli(const std::string& args, const fs::path& dir) {
    const char* cli = std::getenv("COMBO_CLI");
    REQUIRE(cli != nullptr);
    const fs::path out = dir / "stdout.txt", err = dir / "stderr.txt";
    const std::string cmd = std::string("\"") + cli + "\" " + args + " >\"" + out.string() + "\" 2>\"" + err.string() + "\"";
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
}

}  // namespace

TEST_CASE("clip generation is a pure function of seed and index", "[synthetic]") {
    const SyntheticOptions o = tiny_data(3);
    const Tensor sig = class_signatures(o.num_classes, o.audio_dim, o.seed);
    for (std::size_t i = 0; i < 5; ++i) {
        SyntheticClip a = generate_clip(i, o, sig), b = generate_clip(i, o, sig);
        CHECK(a.frames.values() == b.frames.values());
        CHECK(a.audio.values() == b.audio.values());
        CHECK(a.gt == b.gt);
    }
    SyntheticOptions other = o;
    other.seed = 4;
    CHECK(generate_clip(0, o, sig).frames.values() != generate_clip(0, other, sig).frames.values());
}

TEST_CASE("class signatures are orthonormal", "[synthetic]") {
    const Tensor s = class_signatures(5, 8, 1);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
            double dot = 0.0;
            for (std::size_t d = 0; d < 8; ++d) dot += s[i * 8 + d] * s[j * 8 + d];
            CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) < 1e-12);
        }
    CHECK_THROWS_AS(class_signatures(9, 8, 1), GenerationError);
}

TEST_CASE("synthetic clips satisfy their construction invariants", "[synthetic]") {
    SyntheticOptions o = tiny_data(5);
    o.frames = 4;
    o.num_classes = 5;
    o.audio_dim = 8;
    const Tensor sig = class_signatures(o.num_classes, o.audio_dim, o.seed);
    for (std::size_t i = 0; i < 40; ++i) {
        SyntheticClip c = generate_clip(i, o, sig);
        const std::size_t hw = o.height * o.width;
        bool any = false;
        for (std::size_t t = 0; t < o.frames; ++t) {
            any |= !c.sounding[t].empty();
            // audio minus the sounding signatures is the bounded noise
            double r2 = 0.0;
            for (std::size_t d = 0; d < o.audio_dim; ++d) {
                double v = c.audio[t * o.audio_dim + d];
                for (std::size_t k : c.sounding[t]) v -= sig[k * o.audio_dim + d];
                r2 += v * v;
            }
            CHECK(std::sqrt(r2) <= o.noise + 1e-12);
            // ground truth only labels sounding classes
            for (std::size_t p = 0; p < hw; ++p) {
                const std::size_t l = c.gt.labels[t * hw + p];
                if (l) CHECK(std::find(c.sounding[t].begin(), c.sounding[t].end(), l - 1) != c.sounding[t].end());
            }
            // proposals are disjoint
            std::vector<int> cover(hw, 0);
            for (std::size_t k = 0; k < c.proposals[t].count(); ++k)
                for (std::size_t p = 0; p < hw; ++p) cover[p] += c.proposals[t].at(k, p / o.width, p % o.width);
            for (int v : cover) CHECK(v <= 1);
        }
        CHECK(any);
        // each sounding object sounds over one contiguous run of at least two frames
        for (std::size_t cls : c.object_classes) {
            std::vector<int> on;
            for (std::size_t t = 0; t < o.frames; ++t)
                on.push_back(std::find(c.sounding[t].begin(), c.sounding[t].end(), cls) != c.sounding[t].end());
            const int total = std::accumulate(on.begin(), on.end(), 0);
            if (total == 0) continue;
            CHECK(total >= 2);
            int rises = on[0];
            for (std::size_t t = 1; t < on.size(); ++t) rises += on[t] && !on[t - 1];
            CHECK(rises == 1);
        }
    }
}

TEST_CASE("datasets round-trip through disk", "[synthetic][io]") {
    const fs::path dir = scratch("dataset_rt");
    const SyntheticOptions o = tiny_data(7);
    generate_dataset(dir, o);
    const DatasetInfo info = load_dataset_info(dir);
    CHECK(info.options.to_json() == o.to_json());
    CHECK(info.split("all").size() == 10);
    CHECK(info.split("val") == std::vector<std::string>{"clip_0004", "clip_0009"});
    const Tensor sig = class_signatures(o.num_classes, o.audio_dim, o.seed);
    for (const auto& id : info.split("all")) {
        const std::size_t index = std::stoul(id.substr(5));
        SyntheticClip mem = generate_clip(index, o, sig), disk = read_clip(dir, id, o);
        CHECK(disk.gt == mem.gt);
        CHECK(disk.audio.values() == mem.audio.values());
        CHECK(disk.sounding == mem.sounding);
        for (std::size_t i = 0; i < mem.frames.size(); ++i) CHECK(std::abs(disk.frames[i] - mem.frames[i]) <= 0.5 / 255.0 + 1e-12);
        for (std::size_t t = 0; t < o.frames; ++t) {
            CHECK(disk.proposals[t] == mem.proposals[t]);
            CHECK(disk.instances[t].classes == mem.instances[t].classes);
            CHECK(disk.instances[t].masks == mem.instances[t].masks);
        }
    }
    CHECK_THROWS_AS(load_dataset_info(dir / "missing"), IoError);
    fs::remove_all(dir);
}

TEST_CASE("dataset generation is byte-deterministic", "[synthetic][determinism]") {
    const fs::path a = scratch("dataset_a"), b = scratch("dataset_b");
    generate_dataset(a, tiny_data(11));
    generate_dataset(b, tiny_data(11));
    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(a)) {
        if (!e.is_regular_file()) continue;
        CHECK(slurp(e.path()) == slurp(b / fs::relative(e.path(), a)));
        ++files;
    }
    CHECK(files > 10);
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("run configs reject unknown keys and invalid values", "[config]") {
    const RunConfig def;
    CHECK(RunConfig::from_json(def.to_json()).to_json() == def.to_json());
    CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json{{"learning_rate", 0.1}}), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json{{"lr", "fast"}}), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json{{"height", 48}}), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json{{"fusion", "sideways"}}), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json{{"rounds", 0}}), ConfigError);
}

TEST_CASE("every ablation is reachable from a config file", "[config]") {
    const std::vector<nlohmann::json> variants = {
        {{"siam", false}},          {{"shared_weights", true}},  {{"fusion", "none"}},
        {{"fusion", "visual_only"}}, {{"fusion", "audio_only"}}, {{"query_mode", "all"}},
        {{"lambda_ada", 0.0}},      {{"lambda_ada", 20.0}},      {{"per_frame_attention", true}},
    };
    const SyntheticOptions o = tiny_data(1);
    const Tensor sig = class_signatures(o.num_classes, o.audio_dim, o.seed);
    RunConfig base = tiny_config();
    const PreparedClip clip = prepare_clip(generate_clip(0, o, sig), base, model_palette(base));
    for (const auto& v : variants) {
        nlohmann::json j = base.to_json();
        j.update(v);
        const RunConfig cfg = RunConfig::from_json(j);
        ComboModel model(cfg);
        INFO(v.dump());
        LossBreakdown lb = model.loss(clip.input, clip.targets);
        CHECK(std::isfinite(lb.total.item()));
        Tape::current().clear();
    }
}

TEST_CASE("a zero-iteration checkpoint holds the initial parameters", "[train][checkpoint]") {
    const fs::path data = scratch("ckpt_data"), ck = scratch("ckpt_out");
    generate_dataset(data, tiny_data(2));
    RunConfig cfg = tiny_config();
    cfg.iterations = 0;
    train_run(cfg, data, ck);
    ComboModel loaded = ComboModel::load(ck), fresh(cfg);
    const auto a = loaded.params().items(), b = fresh.params().items();
    REQUIRE(a.size() == b.size());
    auto ib = b.begin();
    for (const auto& [name, t] : a) {
        CHECK(name == ib->first);
        CHECK(t.values() == ib->second.values());
        ++ib;
    }
    fs::remove_all(data);
    fs::remove_all(ck);
}

TEST_CASE("checkpoints must exist and match the dataset", "[train][checkpoint]") {
    const fs::path data = scratch("ckpt_bad_data"), ck = scratch("ckpt_bad");
    CHECK_THROWS_AS(ComboModel::load(ck), CheckpointError);
    generate_dataset(data, tiny_data(2));
    RunConfig cfg = tiny_config();
    cfg.iterations = 0;
    cfg.num_classes = 3;
    CHECK_THROWS_AS(train_run(cfg, data, ck), CheckpointError);
    cfg.num_classes = 2;
    train_run(cfg, data, ck);
    {
        std::ofstream os(ck / "manifest.json");
        os << "{ not json";
    }
    CHECK_THROWS_AS(ComboModel::load(ck), CheckpointError);
    fs::remove_all(data);
    fs::remove_all(ck);
}

TEST_CASE("training logs and decreases the loss on a fixed batch", "[train]") {
    const SyntheticOptions o = tiny_data(3);
    const Tensor sig = class_signatures(o.num_classes, o.audio_dim, o.seed);
    RunConfig cfg = tiny_config();
    cfg.iterations = 30;
    cfg.lr = 1e-3;
    cfg.batch_size = 1;
    cfg.log_every = 10;
    std::vector<PreparedClip> clips{prepare_clip(generate_clip(0, o, sig), cfg, model_palette(cfg))};
    ComboModel model(cfg);
    TrainResult r = train_model(model, clips);
    std::vector<std::size_t> its;
    for (const auto& rec : r.log) its.push_back(rec.iteration);
    CHECK(its == std::vector<std::size_t>{0, 10, 20, 29});
    CHECK(r.log.back().loss < r.log.front().loss);
}

TEST_CASE("scoring the ground truth against itself gives one", "[eval]") {
    const fs::path data = scratch("gt_eval");
    generate_dataset(data, tiny_data(4));
    const DatasetInfo info = load_dataset_info(data);
    std::vector<std::string> ids;
    std::vector<SemanticMap> gts;
    for (const auto& id : info.split("val")) {
        ids.push_back(id);
        gts.push_back(read_clip(data, id, info.options).gt);
    }
    MetricReport r = evaluate_maps(ids, gts, gts);
    CHECK(r.miou == 1.0);
    CHECK(r.fscore == 1.0);
    fs::remove_all(data);
}

TEST_CASE("train and eval reproduce byte-identical outputs", "[train][eval][determinism]") {
    const fs::path data = scratch("det_data"), a = scratch("det_a"), b = scratch("det_b");
    generate_dataset(data, tiny_data(5));
    const RunConfig cfg = tiny_config();
    train_run(cfg, data, a / "ck");
    train_run(cfg, data, b / "ck");
    evaluate_run(a / "ck", data, a / "report.json");
    evaluate_run(b / "ck", data, b / "report.json");
    CHECK(slurp(a / "report.json") == slurp(b / "report.json"));
    CHECK(slurp(a / "ck" / "train_log.jsonl") == slurp(b / "ck" / "train_log.jsonl"));
    for (const auto& e : fs::recursive_directory_iterator(a / "ck"))
        if (e.is_regular_file()) CHECK(slurp(e.path()) == slurp(b / "ck" / fs::relative(e.path(), a / "ck")));
    CHECK(fs::exists(a / "report_predictions" / "clip_0004" / "pred_0.pgm"));
    fs::remove_all(data);
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("the worker count does not change results", "[train][determinism]") {
    const SyntheticOptions o = tiny_data(6);
    const Tensor sig = class_signatures(o.num_classes, o.audio_dim, o.seed);
    RunConfig cfg = tiny_config();
    std::vector<PreparedClip> clips;
    for (std::size_t i = 0; i < 4; ++i) clips.push_back(prepare_clip(generate_clip(i, o, sig), cfg, model_palette(cfg)));
    ComboModel model(cfg);
    std::vector<SemanticMap> serial(clips.size());
    for (std::size_t i = 0; i < clips.size(); ++i) serial[i] = model.predict(clips[i].input);
    std::vector<SemanticMap> parallel(clips.size());
    parallel_for(clips.size(), [&](std::size_t i) { parallel[i] = model.predict(clips[i].input); }, 4);
    CHECK(serial == parallel);
}

TEST_CASE("the CLI reports usage and runtime errors with distinct exit codes", "[cli]") {
    const fs::path dir = scratch("cli_errors");
    CliResult r = run_cli("eval --data x --out y", dir);
    CHECK(r.code == 2);
    CHECK(r.err.find("error: kind=usage") != std::string::npos);
    r = run_cli("gen --out x --clips 1 --seed 0 --bogus", dir);
    CHECK(r.code == 2);
    r = run_cli("eval --data \"" + (dir / "nowhere").string() + "\" --checkpoint \"" + (dir / "none").string() +
                    "\" --out \"" + (dir / "r.json").string() + "\"",
                dir);
    CHECK(r.code == 1);
    CHECK(r.err.find("error: kind=checkpoint") != std::string::npos);
    r = run_cli("gen --out \"" + (dir / "d").string() + "\" --clips 1 --seed 0 --size 40", dir);
    CHECK(r.code == 1);
    CHECK(r.err.find("error: kind=config") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("the CLI runs gen, train and eval end to end", "[cli]") {
    const fs::path dir = scratch("cli_run");
    const std::string d = (dir / "data").string(), ck = (dir / "ck").string();
    CliResult r = run_cli("gen --out \"" + d + "\" --clips 5 --seed 1 --frames 2 --classes 2 --audio-dim 4", dir);
    REQUIRE(r.code == 0);
    {
        std::ofstream os(dir / "cfg.json");
        os << tiny_config().to_json().dump();
    }
    r = run_cli("train --data \"" + d + "\" --config \"" + (dir / "cfg.json").string() + "\" --out \"" + ck + "\"", dir);
    REQUIRE(r.code == 0);
    r = run_cli("eval --data \"" + d + "\" --checkpoint \"" + ck + "\" --out \"" + (dir / "report.json").string() + "\"", dir);
    REQUIRE(r.code == 0);
    const auto report = nlohmann::json::parse(slurp(dir / "report.json"));
    CHECK(report.contains("miou"));
    CHECK(report.contains("fscore"));
    {
        std::ofstream os(dir / "bad.json");
        os << R"({"lr": 0.001, "colour": "red"})";
    }
    r = run_cli("train --data \"" + d + "\" --config \"" + (dir / "bad.json").string() + "\" --out \"" + ck + "\"", dir);
    CHECK(r.code == 1);
    CHECK(r.err.find("kind=config") != std::string::npos);
    CHECK(r.err.find("colour") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("the maskige command encodes a mask directory losslessly", "[cli][maskige]") {
    const fs::path dir = scratch("cli_maskige");
    fs::create_directories(dir / "masks");
    Rng rng(0, "test/cli/maskige");
    const std::size_t H = 6, W = 7;
    std::vector<std::uint8_t> owner(H * W);
    for (auto& v : owner) v = static_cast<std::uint8_t>(rng.integer(0, 3));
    std::vector<std::uint8_t> bits;
    for (std::size_t k = 1; k <= 3; ++k) {
        GrayImage img{H, W, std::vector<std::uint8_t>(H * W)};
        for (std::size_t p = 0; p < H * W; ++p) {
            img.pixels[p] = owner[p] == k ? 255 : 0;
            bits.push_back(owner[p] == k);
        }
        write_pgm(dir / "masks" / ("m" + std::to_string(k) + ".pgm"), img);
    }
    const Palette palette = default_palette();
    save_palette(dir / "palette.txt", palette);
    CliResult r = run_cli("maskige --masks \"" + (dir / "masks").string() + "\" --palette \"" +
                              (dir / "palette.txt").string() + "\" --out \"" + (dir / "m.ppm").string() + "\"",
                          dir);
    REQUIRE(r.code == 0);
    const MaskStack decoded = decode_nearest(from_rgb(read_ppm(dir / "m.ppm")), palette);
    CHECK(decoded == pad_masks(MaskStack(3, H, W, bits), palette.capacity()));
    fs::remove_all(dir);
}

TEST_CASE("the gradcheck command passes", "[cli][gradcheck]") {
    const fs::path dir = scratch("cli_gradcheck");
    CliResult r = run_cli("gradcheck --module bfm --seed 1", dir);
    CHECK(r.code == 0);
    CHECK(r.out.find("FAIL") == std::string::npos);
    fs::remove_all(dir);
}
