// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic audio-visual clips: colored shapes moving on straight lines, a
// per-class audio signature for every sounding object, and jittered
// class-agnostic proposals standing in for a promptable segmenter.
//
// Dataset layout:
//   DIR/manifest.json
//   DIR/<clip>/frame_<t>.ppm        RGB frame
//   DIR/<clip>/gt_<t>.pgm           semantic labels, gray = floor(255 k / K_c)
//   DIR/<clip>/inst_<t>_<g>.pgm     sounding instance masks
//   DIR/<clip>/prop_<t>_<k>.pgm     proposals
//   DIR/<clip>/audio.ctns           [T, D] features
//   DIR/<clip>/meta.json            classes, sounding sets, counts

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "combo/image_io.hpp"
#include "combo/inference.hpp"
#include "combo/maskige.hpp"
#include "combo/parallel.hpp"
#include "combo/rng.hpp"
#include "combo/serialize.hpp"

namespace combo {

struct SyntheticOptions {
    std::size_t clips = 200;
    std::size_t frames = 3;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t num_classes = 3;
    std::size_t audio_dim = 16;
    std::size_t max_objects = 3;
    double noise = 0.05;       // bound on the audio noise norm
    std::size_t perturb = 2;   // proposal jitter radius in pixels
    std::uint64_t seed = 0;
    std::size_t val_every = 5; // every 5th clip is held out

    void validate() const {
        if (clips == 0) throw ConfigError("clip count must be positive");
        if (frames == 0) throw ConfigError("frame count must be positive");
        if (height == 0 || width == 0 || height % 32 || width % 32)
            throw ConfigError("height and width must be positive multiples of 32");
        if (num_classes == 0 || num_classes > 255) throw ConfigError("num_classes must be in 1..255");
        if (num_classes > audio_dim)
            throw GenerationError("orthogonal signatures need audio_dim >= num_classes (" + std::to_string(audio_dim) +
                                  " < " + std::to_string(num_classes) + ")");
        if (max_objects == 0) throw ConfigError("max_objects must be positive");
        if (noise < 0.0) throw ConfigError("noise must be non-negative");
        if (val_every < 2) throw ConfigError("val_every must be at least 2");
    }

    nlohmann::ordered_json to_json() const {
        return {{"clips", clips},       {"frames", frames},           {"height", height},
                {"width", width},       {"num_classes", num_classes}, {"audio_dim", audio_dim},
                {"max_objects", max_objects}, {"noise", noise},       {"perturb", perturb},
                {"seed", seed},         {"val_every", val_every}};
    }

    static SyntheticOptions from_json(const nlohmann::json& j) {
        SyntheticOptions o;
        try {
            o.clips = j.at("clips").get<std::size_t>();
            o.frames = j.at("frames").get<std::size_t>();
            o.height = j.at("height").get<std::size_t>();
            o.width = j.at("width").get<std::size_t>();
            o.num_classes = j.at("num_classes").get<std::size_t>();
            o.audio_dim = j.at("audio_dim").get<std::size_t>();
            o.max_objects = j.at("max_objects").get<std::size_t>();
            o.noise = j.at("noise").get<double>();
            o.perturb = j.at("perturb").get<std::size_t>();
            o.seed = j.at("seed").get<std::uint64_t>();
            o.val_every = j.at("val_every").get<std::size_t>();
        } catch (const nlohmann::json::exception& e) {
            throw IoError(std::string("malformed dataset manifest: ") + e.what());
        }
        return o;
    }
};

enum class ShapeKind { rectangle, disk, triangle };

inline ShapeKind shape_of_class(std::size_t cls) { return static_cast<ShapeKind>(cls % 3); }

// Fixed, well separated colors for the first classes; seeded beyond that.
inline std::array<double, 3> class_color(std::size_t cls) {
    static const std::array<std::array<double, 3>, 8> base{{{0.90, 0.20, 0.15},
                                                            {0.20, 0.80, 0.25},
                                                            {0.20, 0.35, 0.95},
                                                            {0.95, 0.85, 0.15},
                                                            {0.85, 0.25, 0.85},
                                                            {0.15, 0.85, 0.85},
                                                            {0.95, 0.55, 0.10},
                                                            {0.60, 0.60, 0.60}}};
    if (cls < base.size()) return base[cls];
    Rng rng(cls, "class_color");
    return {rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0)};
}

// Orthonormal signatures [K, D] (Gram-Schmidt on Gaussian draws).
inline Tensor class_signatures(std::size_t num_classes, std::size_t dim, std::uint64_t seed) {
    if (num_classes > dim) throw GenerationError("cannot build more orthogonal signatures than audio dimensions");
    Rng rng(seed, "signatures");
    std::vector<double> s(num_classes * dim);
    for (std::size_t k = 0; k < num_classes; ++k) {
        double* row = s.data() + k * dim;
        for (;;) {
            for (std::size_t i = 0; i < dim; ++i) row[i] = rng.normal();
            for (std::size_t j = 0; j < k; ++j) {
                const double* prev = s.data() + j * dim;
                double dot = 0.0;
                for (std::size_t i = 0; i < dim; ++i) dot += row[i] * prev[i];
                for (std::size_t i = 0; i < dim; ++i) row[i] -= dot * prev[i];
            }
            double n = 0.0;
            for (std::size_t i = 0; i < dim; ++i) n += row[i] * row[i];
            n = std::sqrt(n);
            if (n < 1e-6) continue;
            for (std::size_t i = 0; i < dim; ++i) row[i] /= n;
            break;
        }
    }
    return Tensor({num_classes, dim}, std::move(s));
}

struct InstanceSet {
    std::vector<std::size_t> classes;  // 0-based
    MaskStack masks;                   // G x H x W
};

struct SyntheticClip {
    std::string id;
    Tensor frames;                                  // [T, 3, H, W] in [0, 1]
    Tensor audio;                                   // [T, D]
    SemanticMap gt;                                 // T x H x W
    std::vector<InstanceSet> instances;             // per frame, sounding only
    std::vector<MaskStack> proposals;               // per frame
    std::vector<std::vector<std::size_t>> sounding; // per frame, sorted classes
    std::vector<std::size_t> object_classes;        // every object in the clip
};

namespace detail {

struct MovingObject {
    std::size_t cls = 0;
    double radius = 0.0;
    double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
    std::vector<bool> sounding;
};

inline bool inside_shape(ShapeKind kind, double dx, double dy, double r) {
    switch (kind) {
        case ShapeKind::rectangle: return std::abs(dx) <= r && std::abs(dy) <= 0.7 * r;
        case ShapeKind::disk: return dx * dx + dy * dy <= r * r;
        case ShapeKind::triangle: {
            // apex up, base at dy = +r
            if (dy > r || dy < -r) return false;
            const double half = r * (dy + r) / (2.0 * r);
            return std::abs(dx) <= half;
        }
    }
    return false;
}

// Square structuring element of radius r; r > 0 dilates, r < 0 erodes.
inline std::vector<std::uint8_t> morph(const std::vector<std::uint8_t>& m, std::size_t H, std::size_t W, long r) {
    if (r == 0) return m;
    std::vector<std::uint8_t> out(m.size(), 0);
    const long R = std::abs(r);
    for (long y = 0; y < static_cast<long>(H); ++y)
        for (long x = 0; x < static_cast<long>(W); ++x) {
            bool any = false, all = true;
            for (long dy = -R; dy <= R; ++dy)
                for (long dx = -R; dx <= R; ++dx) {
                    const long yy = y + dy, xx = x + dx;
                    const bool v = yy >= 0 && yy < static_cast<long>(H) && xx >= 0 && xx < static_cast<long>(W) &&
                                   m[static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx)];
                    any |= v;
                    all &= v;
                }
            out[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)] = r > 0 ? any : all;
        }
    return out;
}

// Contiguous sounding run of at least two frames (the whole clip when T < 2).
inline std::vector<bool> sounding_run(Rng& rng, std::size_t T) {
    std::vector<bool> s(T, false);
    if (T < 2) {
        s.assign(T, true);
        return s;
    }
    const std::size_t len = static_cast<std::size_t>(rng.integer(2, static_cast<long>(T)));
    const std::size_t start = static_cast<std::size_t>(rng.integer(0, static_cast<long>(T - len)));
    for (std::size_t t = start; t < start + len; ++t) s[t] = true;
    return s;
}

}  // namespace detail

inline std::string clip_id(std::size_t index) {
    std::ostringstream os;
    os << "clip_" << std::setw(4) << std::setfill('0') << index;
    return os.str();
}

inline bool is_validation_clip(std::size_t index, const SyntheticOptions& o) {
    return index % o.val_every == o.val_every - 1;
}

inline SyntheticClip generate_clip(std::size_t index, const SyntheticOptions& o, const Tensor& signatures) {
    const std::size_t T = o.frames, H = o.height, W = o.width, hw = H * W;
    Rng rng(o.seed, "clip/" + std::to_string(index));
    SyntheticClip clip;
    clip.id = clip_id(index);

    // distinct classes, 1..min(max_objects, K_c) objects
    std::vector<std::size_t> classes(o.num_classes);
    std::iota(classes.begin(), classes.end(), 0);
    std::shuffle(classes.begin(), classes.end(), rng.engine());
    const std::size_t n = static_cast<std::size_t>(rng.integer(1, static_cast<long>(std::min(o.max_objects, o.num_classes))));
    classes.resize(n);

    const double side = static_cast<double>(std::min(H, W));
    std::vector<detail::MovingObject> objects(n);
    bool any_sound = false;
    for (std::size_t i = 0; i < n; ++i) {
        auto& ob = objects[i];
        ob.cls = classes[i];
        ob.radius = rng.uniform(side / 8.0, side / 4.5);
        auto coord = [&](double extent) { return rng.uniform(ob.radius, extent - ob.radius); };
        ob.x0 = coord(static_cast<double>(W));
        ob.y0 = coord(static_cast<double>(H));
        ob.x1 = coord(static_cast<double>(W));
        ob.y1 = coord(static_cast<double>(H));
        ob.sounding = rng.bernoulli(0.8) ? detail::sounding_run(rng, T) : std::vector<bool>(T, false);
        for (bool s : ob.sounding) any_sound |= s;
    }
    if (!any_sound) objects[0].sounding = detail::sounding_run(rng, T);
    clip.object_classes = classes;

    const std::array<double, 3> bg{rng.uniform(0.0, 0.25), rng.uniform(0.0, 0.25), rng.uniform(0.0, 0.25)};
    std::vector<double> frames(T * 3 * hw);
    std::vector<double> audio(T * o.audio_dim, 0.0);
    clip.gt = SemanticMap(T, H, W, o.num_classes);
    clip.instances.resize(T);
    clip.proposals.resize(T);
    clip.sounding.resize(T);

    for (std::size_t t = 0; t < T; ++t) {
        const double a = T > 1 ? static_cast<double>(t) / static_cast<double>(T - 1) : 0.0;
        // owner[p] = index of the topmost object covering p, or n
        std::vector<std::size_t> owner(hw, n);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& ob = objects[i];
            const double cx = ob.x0 + a * (ob.x1 - ob.x0), cy = ob.y0 + a * (ob.y1 - ob.y0);
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x)
                    if (detail::inside_shape(shape_of_class(ob.cls), static_cast<double>(x) + 0.5 - cx,
                                             static_cast<double>(y) + 0.5 - cy, ob.radius))
                        owner[y * W + x] = i;
        }
        for (std::size_t p = 0; p < hw; ++p) {
            const auto color = owner[p] < n ? class_color(objects[owner[p]].cls) : bg;
            for (std::size_t c = 0; c < 3; ++c)
                frames[(t * 3 + c) * hw + p] = std::clamp(color[c] + rng.uniform(-0.04, 0.04), 0.0, 1.0);
        }

        std::vector<std::vector<std::uint8_t>> visible(n, std::vector<std::uint8_t>(hw, 0));
        for (std::size_t p = 0; p < hw; ++p)
            if (owner[p] < n) visible[owner[p]][p] = 1;

        std::vector<std::uint8_t> inst_bits;
        for (std::size_t i = 0; i < n; ++i) {
            const auto& ob = objects[i];
            if (!ob.sounding[t]) continue;
            clip.sounding[t].push_back(ob.cls);
            for (std::size_t d = 0; d < o.audio_dim; ++d) audio[t * o.audio_dim + d] += signatures[ob.cls * o.audio_dim + d];
            bool nonempty = false;
            for (std::size_t p = 0; p < hw; ++p)
                if (visible[i][p]) {
                    clip.gt.labels[t * hw + p] = static_cast<std::uint16_t>(ob.cls + 1);
                    nonempty = true;
                }
            if (!nonempty) continue;
            clip.instances[t].classes.push_back(ob.cls);
            inst_bits.insert(inst_bits.end(), visible[i].begin(), visible[i].end());
        }
        std::sort(clip.sounding[t].begin(), clip.sounding[t].end());
        clip.instances[t].masks = MaskStack(clip.instances[t].classes.size(), H, W, std::move(inst_bits));

        // noise with norm bounded by o.noise
        std::vector<double> nu(o.audio_dim);
        double norm = 0.0;
        for (auto& v : nu) {
            v = rng.normal(0.0, o.noise / std::sqrt(static_cast<double>(o.audio_dim)));
            norm += v * v;
        }
        norm = std::sqrt(norm);
        const double shrink = norm > o.noise && norm > 0.0 ? o.noise / norm : 1.0;
        for (std::size_t d = 0; d < o.audio_dim; ++d) audio[t * o.audio_dim + d] += shrink * nu[d];

        // proposals: every visible object, jittered, topmost wins overlaps,
        // presented in random order
        std::vector<std::vector<std::uint8_t>> props;
        for (std::size_t i = 0; i < n; ++i) {
            if (std::find(visible[i].begin(), visible[i].end(), 1) == visible[i].end()) continue;
            const long r = o.perturb ? rng.integer(-static_cast<long>(o.perturb), static_cast<long>(o.perturb)) : 0;
            auto m = detail::morph(visible[i], H, W, r);
            if (std::find(m.begin(), m.end(), 1) == m.end()) m = visible[i];
            props.push_back(std::move(m));
        }
        for (std::size_t p = 0; p < hw; ++p) {
            bool taken = false;
            for (std::size_t k = props.size(); k-- > 0;) {
                if (!props[k][p]) continue;
                if (taken) props[k][p] = 0;
                taken = true;
            }
        }
        std::shuffle(props.begin(), props.end(), rng.engine());
        std::vector<std::uint8_t> prop_bits;
        for (const auto& m : props) prop_bits.insert(prop_bits.end(), m.begin(), m.end());
        clip.proposals[t] = MaskStack(props.size(), H, W, std::move(prop_bits));
    }
    clip.frames = Tensor({T, 3, H, W}, std::move(frames));
    clip.audio = Tensor({T, o.audio_dim}, std::move(audio));
    return clip;
}

namespace detail {

inline std::string indexed(const char* stem, std::size_t t) { return std::string(stem) + std::to_string(t); }

inline RgbImage frame_image(const Tensor& frames, std::size_t t) {
    const std::size_t H = frames.dim(2), W = frames.dim(3), hw = H * W;
    RgbImage img{H, W, std::vector<std::uint8_t>(3 * hw)};
    for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t c = 0; c < 3; ++c) img.pixels[3 * p + c] = to_byte(frames[(t * 3 + c) * hw + p]);
    return img;
}

}  // namespace detail

inline void write_clip(const std::filesystem::path& dir, const SyntheticClip& clip) {
    std::filesystem::create_directories(dir);
    const std::size_t T = clip.frames.dim(0);
    nlohmann::ordered_json meta;
    meta["id"] = clip.id;
    meta["objects"] = clip.object_classes;
    meta["sounding"] = clip.sounding;
    nlohmann::ordered_json inst = nlohmann::ordered_json::array(), props = nlohmann::ordered_json::array();
    for (std::size_t t = 0; t < T; ++t) {
        write_ppm(dir / (detail::indexed("frame_", t) + ".ppm"), detail::frame_image(clip.frames, t));
        write_pgm(dir / (detail::indexed("gt_", t) + ".pgm"), frame_to_pgm(clip.gt, t));
        const auto& is = clip.instances[t];
        for (std::size_t g = 0; g < is.masks.count(); ++g)
            write_pgm(dir / (detail::indexed("inst_", t) + "_" + std::to_string(g) + ".pgm"), mask_plane_to_pgm(is.masks, g));
        for (std::size_t k = 0; k < clip.proposals[t].count(); ++k)
            write_pgm(dir / (detail::indexed("prop_", t) + "_" + std::to_string(k) + ".pgm"),
                      mask_plane_to_pgm(clip.proposals[t], k));
        inst.push_back(is.classes);
        props.push_back(clip.proposals[t].count());
    }
    meta["instances"] = inst;
    meta["proposals"] = props;
    save_tensor(dir / "audio.ctns", clip.audio);
    std::ofstream os(dir / "meta.json");
    if (!os) throw IoError("cannot write " + (dir / "meta.json").string());
    os << meta.dump(2) << '\n';
}

struct DatasetEntry {
    std::string id;
    std::string split;  // "train" | "val"
};

struct DatasetInfo {
    SyntheticOptions options;
    std::vector<DatasetEntry> clips;

    std::vector<std::string> split(const std::string& name) const {
        std::vector<std::string> out;
        for (const auto& c : clips)
            if (name == "all" || c.split == name) out.push_back(c.id);
        return out;
    }
};

inline void generate_dataset(const std::filesystem::path& out, const SyntheticOptions& o) {
    o.validate();
    std::error_code ec;
    std::filesystem::create_directories(out, ec);
    if (ec) throw IoError("cannot create dataset directory " + out.string() + ": " + ec.message());
    const Tensor signatures = class_signatures(o.num_classes, o.audio_dim, o.seed);
    parallel_for(o.clips, [&](std::size_t i) { write_clip(out / clip_id(i), generate_clip(i, o, signatures)); });
    nlohmann::ordered_json m;
    m["format"] = "combo-synthetic";
    m["version"] = 1;
    m["options"] = o.to_json();
    nlohmann::ordered_json clips = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < o.clips; ++i)
        clips.push_back({{"id", clip_id(i)}, {"split", is_validation_clip(i, o) ? "val" : "train"}});
    m["clips"] = clips;
    std::ofstream os(out / "manifest.json");
    if (!os) throw IoError("cannot write " + (out / "manifest.json").string());
    os << m.dump(2) << '\n';
}

inline DatasetInfo load_dataset_info(const std::filesystem::path& dir) {
    const auto path = dir / "manifest.json";
    std::ifstream is(path);
    if (!is) throw IoError("cannot open dataset manifest: " + path.string());
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError("dataset manifest " + path.string() + " is not valid JSON: " + e.what());
    }
    DatasetInfo info;
    if (!m.contains("options") || !m.contains("clips")) throw IoError("dataset manifest " + path.string() + " is incomplete");
    info.options = SyntheticOptions::from_json(m["options"]);
    for (const auto& c : m["clips"]) info.clips.push_back({c.at("id").get<std::string>(), c.at("split").get<std::string>()});
    return info;
}

inline SyntheticClip read_clip(const std::filesystem::path& dataset, const std::string& id, const SyntheticOptions& o) {
    const auto dir = dataset / id;
    std::ifstream is(dir / "meta.json");
    if (!is) throw IoError("cannot open " + (dir / "meta.json").string());
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError((dir / "meta.json").string() + " is not valid JSON: " + e.what());
    }
    const std::size_t T = o.frames, H = o.height, W = o.width, hw = H * W;
    SyntheticClip clip;
    clip.id = id;
    clip.object_classes = meta.at("objects").get<std::vector<std::size_t>>();
    clip.sounding = meta.at("sounding").get<std::vector<std::vector<std::size_t>>>();
    const auto inst = meta.at("instances").get<std::vector<std::vector<std::size_t>>>();
    const auto props = meta.at("proposals").get<std::vector<std::size_t>>();
    if (clip.sounding.size() != T || inst.size() != T || props.size() != T)
        throw IoError("clip " + id + " metadata does not have " + std::to_string(T) + " frames");
    std::vector<double> frames(T * 3 * hw);
    clip.gt = SemanticMap(T, H, W, o.num_classes);
    clip.instances.resize(T);
    clip.proposals.resize(T);
    auto planes = [&](const std::string& stem, std::size_t t, std::size_t count) {
        if (count == 0) return MaskStack(0, H, W);
        std::vector<GrayImage> imgs;
        for (std::size_t k = 0; k < count; ++k)
            imgs.push_back(read_pgm(dir / (detail::indexed(stem.c_str(), t) + "_" + std::to_string(k) + ".pgm")));
        MaskStack s = masks_from_pgms(imgs);
        if (s.height() != H || s.width() != W) throw IoError("clip " + id + " mask size mismatch");
        return s;
    };
    for (std::size_t t = 0; t < T; ++t) {
        const RgbImage img = read_ppm(dir / (detail::indexed("frame_", t) + ".ppm"));
        if (img.height != H || img.width != W) throw IoError("clip " + id + " frame size mismatch");
        for (std::size_t p = 0; p < hw; ++p)
            for (std::size_t c = 0; c < 3; ++c) frames[(t * 3 + c) * hw + p] = img.pixels[3 * p + c] / 255.0;
        frame_from_pgm(clip.gt, t, read_pgm(dir / (detail::indexed("gt_", t) + ".pgm")));
        clip.instances[t].classes = inst[t];
        clip.instances[t].masks = planes("inst_", t, inst[t].size());
        clip.proposals[t] = planes("prop_", t, props[t]);
    }
    clip.frames = Tensor({T, 3, H, W}, std::move(frames));
    clip.audio = load_tensor(dir / "audio.ctns");
    if (clip.audio.shape() != Shape{T, o.audio_dim}) throw IoError("clip " + id + " audio has shape " + shape_str(clip.audio.shape()));
    return clip;
}

}  // namespace combo
