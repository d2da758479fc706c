#include "mmn/skeleton_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mmn/errors.hpp"
#include "mmn/rng.hpp"

namespace mmn {

using nlohmann::json;
using nlohmann::ordered_json;

void LabelTaxonomy::validate() const {
    if (action_names.empty()) throw DataError("taxonomy: no action names");
    if (body_names.empty()) throw DataError("taxonomy: no body names");
    if (body_of_action.size() != action_names.size())
        throw DataError("taxonomy: body_of_action has " + std::to_string(body_of_action.size()) +
                        " entries for " + std::to_string(action_names.size()) + " actions");
    for (std::size_t i = 0; i < body_of_action.size(); ++i)
        if (body_of_action[i] >= body_names.size())
            throw DataError("taxonomy: action " + std::to_string(i) + " maps to body " +
                            std::to_string(body_of_action[i]) + " but only " +
                            std::to_string(body_names.size()) + " bodies exist");
    std::set<std::string> seen(action_names.begin(), action_names.end());
    if (seen.size() != action_names.size())
        throw DataError("taxonomy: duplicate action names");
}

void Dataset::validate() const {
    taxonomy.validate();
    if (V == 0) throw DataError("dataset: V must be positive");
    if (C_in == 0) throw DataError("dataset: C_in must be positive");
    std::set<std::string> ids;
    for (const SkeletonSequence& s : samples) {
        if (s.id.empty()) throw DataError("dataset: sample with empty id");
        if (!ids.insert(s.id).second) throw DataError("dataset: duplicate sample id '" + s.id + "'");
        if (s.label < 0 || static_cast<std::size_t>(s.label) >= taxonomy.num_actions())
            throw DataError("dataset: sample '" + s.id + "' has label " + std::to_string(s.label) +
                            " outside [0," + std::to_string(taxonomy.num_actions()) + ")");
        if (s.frames.T == 0) throw DataError("dataset: sample '" + s.id + "' has no frames");
        if (s.frames.V != V || s.frames.C != C_in)
            throw DataError("dataset: sample '" + s.id + "' is " + std::to_string(s.frames.V) +
                            " joints x " + std::to_string(s.frames.C) + " channels, expected " +
                            std::to_string(V) + " x " + std::to_string(C_in));
        for (double v : s.frames.data)
            if (!std::isfinite(v))
                throw DataError("dataset: sample '" + s.id + "' contains non-finite coordinates");
    }
}

namespace {

[[noreturn]] void parse_fail(const std::string& path, std::size_t line, const std::string& what) {
    throw ParseError(path + ":" + std::to_string(line) + ": " + what);
}

} // namespace

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open dataset file: " + path);

    Dataset ds;
    bool have_header = false;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::parse_error& e) {
            parse_fail(path, lineno, std::string("bad JSON: ") + e.what());
        }
        if (!rec.is_object()) parse_fail(path, lineno, "record is not a JSON object");

        if (!have_header) {
            try {
                if (rec.value("version", 0) != 1)
                    parse_fail(path, lineno, "unsupported or missing header version");
                ds.V = rec.at("V").get<std::size_t>();
                ds.C_in = rec.at("C_in").get<std::size_t>();
                ds.taxonomy.action_names = rec.at("action_names").get<std::vector<std::string>>();
                if (rec.contains("body_names")) {
                    ds.taxonomy.body_names = rec.at("body_names").get<std::vector<std::string>>();
                    ds.taxonomy.body_of_action =
                        rec.at("body_of_action").get<std::vector<std::size_t>>();
                } else {
                    ds.taxonomy.body_names = {"all"};
                    ds.taxonomy.body_of_action.assign(ds.taxonomy.action_names.size(), 0);
                }
                ds.comment = rec.value("comment", std::string());
            } catch (const json::exception& e) {
                parse_fail(path, lineno, std::string("bad header: ") + e.what());
            }
            have_header = true;
            continue;
        }

        SkeletonSequence s;
        try {
            s.id = rec.at("id").get<std::string>();
            s.label = rec.at("label").get<int>();
            const json& frames = rec.at("frames");
            if (!frames.is_array() || frames.empty())
                parse_fail(path, lineno, "frames must be a non-empty array");
            s.frames.T = frames.size();
            s.frames.V = ds.V;
            s.frames.C = ds.C_in;
            s.frames.data.reserve(s.frames.T * ds.V * ds.C_in);
            for (const json& frame : frames) {
                if (!frame.is_array() || frame.size() != ds.V)
                    parse_fail(path, lineno, "frame with " + std::to_string(frame.size()) +
                                                 " joints, expected " + std::to_string(ds.V));
                for (const json& joint : frame) {
                    if (!joint.is_array() || joint.size() != ds.C_in)
                        parse_fail(path, lineno, "joint with " + std::to_string(joint.size()) +
                                                     " channels, expected " +
                                                     std::to_string(ds.C_in));
                    for (const json& coord : joint) s.frames.data.push_back(coord.get<double>());
                }
            }
        } catch (const json::exception& e) {
            parse_fail(path, lineno, std::string("bad sample record: ") + e.what());
        }
        ds.samples.push_back(std::move(s));
    }
    if (!have_header) throw ParseError(path + ": missing dataset header record");
    ds.validate();
    return ds;
}

void save_dataset(const std::string& path, const Dataset& ds) {
    ds.validate();
    std::ofstream out(path);
    if (!out) throw ParseError("cannot open file for writing: " + path);

    ordered_json header;
    header["version"] = 1;
    header["V"] = ds.V;
    header["C_in"] = ds.C_in;
    header["action_names"] = ds.taxonomy.action_names;
    header["body_of_action"] = ds.taxonomy.body_of_action;
    header["body_names"] = ds.taxonomy.body_names;
    if (!ds.comment.empty()) header["comment"] = ds.comment;
    out << header.dump() << "\n";

    for (const SkeletonSequence& s : ds.samples) {
        ordered_json rec;
        rec["id"] = s.id;
        rec["label"] = s.label;
        json frames = json::array();
        for (std::size_t t = 0; t < s.frames.T; ++t) {
            json frame = json::array();
            for (std::size_t v = 0; v < s.frames.V; ++v) {
                json joint = json::array();
                for (std::size_t c = 0; c < s.frames.C; ++c) joint.push_back(s.frames.at(t, v, c));
                frame.push_back(std::move(joint));
            }
            frames.push_back(std::move(frame));
        }
        rec["frames"] = std::move(frames);
        out << rec.dump() << "\n";
    }
    if (!out) throw ParseError("write failed: " + path);
}

FrameArray uniform_sample(const FrameArray& frames, std::size_t T) {
    if (T == 0) throw ConfigError("uniform_sample: T must be positive");
    if (frames.T == 0) throw DataError("uniform_sample: empty sequence");
    FrameArray out = FrameArray::zeros(T, frames.V, frames.C);
    const std::size_t frame_len = frames.V * frames.C;
    for (std::size_t i = 0; i < T; ++i) {
        std::size_t src = static_cast<std::size_t>(
            (static_cast<double>(i) + 0.5) * static_cast<double>(frames.T) /
            static_cast<double>(T));
        if (src >= frames.T) src = frames.T - 1;
        std::copy_n(frames.data.data() + src * frame_len, frame_len,
                    out.data.data() + i * frame_len);
    }
    return out;
}

void AugmentParams::validate() const {
    if (rot_deg < 0.0) throw ConfigError("augment: rot_deg must be >= 0");
    if (scale_lo <= 0.0 || scale_hi < scale_lo)
        throw ConfigError("augment: scale range must satisfy 0 < lo <= hi");
    if (trans_range < 0.0) throw ConfigError("augment: trans_range must be >= 0");
    if (max_jitter < 0) throw ConfigError("augment: max_jitter must be >= 0");
}

FrameArray augment_skeletal(const FrameArray& frames, const AugmentParams& p,
                            std::mt19937_64& rng) {
    p.validate();
    if (frames.C < 2)
        throw DataError("augment_skeletal: needs at least 2 coordinate channels, got " +
                        std::to_string(frames.C));
    FrameArray out = frames;
    if (!p.affine) return out;

    const double deg2rad = M_PI / 180.0;
    std::uniform_real_distribution<double> rot(-p.rot_deg * deg2rad, p.rot_deg * deg2rad);
    std::uniform_real_distribution<double> scale(p.scale_lo, p.scale_hi);
    std::uniform_real_distribution<double> trans(-p.trans_range, p.trans_range);

    double th = 0.0, s = 1.0, ex = 0.0, ey = 0.0;
    auto draw = [&]() {
        th = rot(rng);
        s = scale(rng);
        ex = trans(rng);
        ey = trans(rng);
    };
    if (!p.affine_per_frame) draw();
    for (std::size_t t = 0; t < frames.T; ++t) {
        if (p.affine_per_frame) draw();
        const double ct = std::cos(th), st = std::sin(th);
        for (std::size_t v = 0; v < frames.V; ++v) {
            const double x = frames.at(t, v, 0);
            const double y = frames.at(t, v, 1);
            out.at(t, v, 0) = s * (ct * x - st * y) + ex;
            out.at(t, v, 1) = s * (st * x + ct * y) + ey;
        }
    }
    return out;
}

FrameArray augment_temporal(const FrameArray& frames, const AugmentParams& p,
                            std::mt19937_64& rng) {
    p.validate();
    FrameArray out = frames;
    if (!p.jitter || p.max_jitter == 0) return out;
    std::uniform_int_distribution<int> jit(-p.max_jitter, p.max_jitter);
    const std::size_t frame_len = frames.V * frames.C;
    for (std::size_t t = 0; t < frames.T; ++t) {
        const long src = std::clamp<long>(static_cast<long>(t) + jit(rng), 0,
                                          static_cast<long>(frames.T) - 1);
        std::copy_n(frames.data.data() + static_cast<std::size_t>(src) * frame_len, frame_len,
                    out.data.data() + t * frame_len);
    }
    return out;
}

void SynthSpec::validate() const {
    if (classes == 0) throw ConfigError("synth: classes must be positive");
    if (per_class == 0) throw ConfigError("synth: per_class must be positive");
    if (joints == 0) throw ConfigError("synth: joints must be positive");
    if (raw_len < 2) throw ConfigError("synth: raw_len must be at least 2");
    if (amplitude < 0.0) throw ConfigError("synth: amplitude must be >= 0");
    if (noise_sigma < 0.0) throw ConfigError("synth: noise_sigma must be >= 0");
    if (similarity < 0.0 || similarity > 1.0)
        throw ConfigError("synth: similarity must be in [0,1]");
    if (body_groups > classes || body_groups > joints)
        throw ConfigError("synth: body_groups cannot exceed classes or joints");
}

std::size_t SynthSpec::resolved_groups() const {
    if (body_groups > 0) return body_groups;
    std::size_t g = std::max<std::size_t>(2, classes / 3);
    return std::min({g, classes, joints});
}

Dataset synth_generate(const SynthSpec& spec) {
    spec.validate();
    const std::size_t G = spec.resolved_groups();
    const std::size_t V = spec.joints;
    const std::size_t K = spec.classes;

    Dataset ds;
    ds.V = V;
    ds.C_in = 2;
    for (std::size_t k = 0; k < K; ++k) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "action_%02zu", k);
        ds.taxonomy.action_names.emplace_back(buf);
        ds.taxonomy.body_of_action.push_back(k * G / K);
    }
    for (std::size_t g = 0; g < G; ++g) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "body_%zu", g);
        ds.taxonomy.body_names.emplace_back(buf);
    }
    if (spec.amplitude == 0.0)
        ds.comment = "inseparable: amplitude 0 leaves classes indistinguishable up to noise";

    // Rest pose: joints spread on a circle.
    std::vector<double> rest_x(V), rest_y(V);
    for (std::size_t v = 0; v < V; ++v) {
        const double a = 2.0 * M_PI * (static_cast<double>(v) + 0.5) / static_cast<double>(V);
        rest_x[v] = 0.8 * std::cos(a);
        rest_y[v] = 0.8 * std::sin(a);
    }

    // Class frequencies: within a body group, classes are separated by a
    // gap that the similarity knob shrinks towards (but never to) zero.
    const double gap = 1.2 * (1.0 - spec.similarity) + 0.08 * spec.similarity;
    const double deg2rad = M_PI / 180.0;

    for (std::size_t k = 0; k < K; ++k) {
        const std::size_t g = k * G / K;
        const std::size_t lo = g * V / G;
        const std::size_t hi = (g + 1) * V / G;
        // Rank of this class among those sharing the body group.
        std::size_t rank = 0;
        for (std::size_t j = 0; j < k; ++j)
            if (j * G / K == g) ++rank;
        const double freq = 1.5 + static_cast<double>(rank) * gap;

        for (std::size_t i = 0; i < spec.per_class; ++i) {
            auto rng = make_rng(spec.seed, rng_stream::synth, k, i);
            std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI);
            std::uniform_real_distribution<double> nrot(-15.0 * deg2rad, 15.0 * deg2rad);
            std::uniform_real_distribution<double> nscale(0.9, 1.1);
            std::uniform_real_distribution<double> ntrans(-0.1, 0.1);
            // noise_sigma scales every measurement artefact: coordinates
            // directly, frame timing as a 40-sigma wobble in frame units.
            const double wobble = 40.0 * spec.noise_sigma;
            std::uniform_real_distribution<double> ntime(-wobble, wobble);
            std::normal_distribution<double> noise(0.0, spec.noise_sigma);

            const double psi = phase(rng);
            const double th = nrot(rng);
            const double sc = nscale(rng);
            const double ex = ntrans(rng);
            const double ey = ntrans(rng);
            const double ct = std::cos(th), st = std::sin(th);

            SkeletonSequence s;
            char buf[48];
            std::snprintf(buf, sizeof(buf), "c%02zu_s%04zu", k, i);
            s.id = buf;
            s.label = static_cast<int>(k);
            s.frames = FrameArray::zeros(spec.raw_len, V, 2);
            for (std::size_t t = 0; t < spec.raw_len; ++t) {
                // Frame timing wobbles as if capture intervals were uneven;
                // the oscillation frequency itself is exact.
                const double dt = wobble > 0.0 ? ntime(rng) : 0.0;
                const double tt = (static_cast<double>(t) + dt) /
                                  static_cast<double>(spec.raw_len);
                for (std::size_t v = 0; v < V; ++v) {
                    double x = rest_x[v];
                    double y = rest_y[v];
                    if (v >= lo && v < hi && spec.amplitude > 0.0) {
                        const double swing = spec.amplitude *
                                             std::sin(2.0 * M_PI * freq * tt + psi +
                                                      0.7 * static_cast<double>(v));
                        const double dir = 2.0 * M_PI * static_cast<double>(v) /
                                               static_cast<double>(V) +
                                           M_PI / 4.0;
                        x += swing * std::cos(dir);
                        y += swing * std::sin(dir);
                    }
                    const double nx = spec.noise_sigma > 0.0 ? noise(rng) : 0.0;
                    const double ny = spec.noise_sigma > 0.0 ? noise(rng) : 0.0;
                    const double rx = sc * (ct * x - st * y) + ex + nx;
                    const double ry = sc * (st * x + ct * y) + ey + ny;
                    s.frames.at(t, v, 0) = rx;
                    s.frames.at(t, v, 1) = ry;
                }
            }
            ds.samples.push_back(std::move(s));
        }
    }
    ds.validate();
    return ds;
}

std::vector<int> synth_parents(const SynthSpec& spec) {
    spec.validate();
    const std::size_t G = spec.resolved_groups();
    const std::size_t V = spec.joints;
    std::vector<int> parents(V);
    for (std::size_t g = 0; g < G; ++g) {
        const std::size_t lo = g * V / G;
        const std::size_t hi = (g + 1) * V / G;
        for (std::size_t v = lo; v < hi; ++v)
            parents[v] = static_cast<int>(v == lo ? v : v - 1);
    }
    return parents;
}

SplitResult stratified_split(const Dataset& ds, double train_frac, double val_frac,
                             std::uint64_t seed) {
    if (train_frac <= 0.0 || val_frac < 0.0 || train_frac + val_frac >= 1.0)
        throw ConfigError("split: need train_frac > 0, val_frac >= 0, train+val < 1");
    ds.validate();

    SplitResult r;
    for (Dataset* part : {&r.train, &r.val, &r.test}) {
        part->V = ds.V;
        part->C_in = ds.C_in;
        part->comment = ds.comment;
        part->taxonomy = ds.taxonomy;
    }

    const std::size_t K = ds.num_classes();
    std::vector<std::vector<std::size_t>> by_class(K);
    for (std::size_t i = 0; i < ds.samples.size(); ++i)
        by_class[static_cast<std::size_t>(ds.samples[i].label)].push_back(i);

    for (std::size_t k = 0; k < K; ++k) {
        auto& idx = by_class[k];
        auto rng = make_rng(seed, rng_stream::shuffle, k);
        std::shuffle(idx.begin(), idx.end(), rng);
        const std::size_t n = idx.size();
        const std::size_t n_train = static_cast<std::size_t>(train_frac * static_cast<double>(n));
        const std::size_t n_val =
            static_cast<std::size_t>((train_frac + val_frac) * static_cast<double>(n)) - n_train;
        for (std::size_t j = 0; j < n; ++j) {
            const SkeletonSequence& s = ds.samples[idx[j]];
            if (j < n_train)
                r.train.samples.push_back(s);
            else if (j < n_train + n_val)
                r.val.samples.push_back(s);
            else
                r.test.samples.push_back(s);
        }
    }
    return r;
}

} // namespace mmn
