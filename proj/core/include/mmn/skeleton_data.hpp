#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace mmn {

// Dense [T][V][C] coordinate block for one sequence.
struct FrameArray {
    std::size_t T = 0, V = 0, C = 0;
    std::vector<double> data;

    static FrameArray zeros(std::size_t T, std::size_t V, std::size_t C) {
        FrameArray f;
        f.T = T;
        f.V = V;
        f.C = C;
        f.data.assign(T * V * C, 0.0);
        return f;
    }
    double& at(std::size_t t, std::size_t v, std::size_t c) {
        return data[(t * V + v) * C + c];
    }
    double at(std::size_t t, std::size_t v, std::size_t c) const {
        return data[(t * V + v) * C + c];
    }
};

// Class list plus the coarse body-part grouping used for body-level metrics.
struct LabelTaxonomy {
    std::vector<std::string> action_names;
    std::vector<std::size_t> body_of_action;
    std::vector<std::string> body_names;

    std::size_t num_actions() const { return action_names.size(); }
    std::size_t num_bodies() const { return body_names.size(); }
    void validate() const;
};

struct SkeletonSequence {
    std::string id;
    int label = 0;
    FrameArray frames;
};

struct Dataset {
    std::size_t V = 0;
    std::size_t C_in = 0;
    std::string comment;
    LabelTaxonomy taxonomy;
    std::vector<SkeletonSequence> samples;

    std::size_t num_classes() const { return taxonomy.num_actions(); }
    void validate() const;
};

// JSON-lines round trip: one header record, then one record per sequence.
Dataset load_dataset(const std::string& path);
void save_dataset(const std::string& path, const Dataset& ds);

// Picks T frames at indices floor((i + 0.5) * raw_len / T), clamped.
// Shorter sequences are effectively upsampled by repetition.
FrameArray uniform_sample(const FrameArray& frames, std::size_t T);

struct AugmentParams {
    bool affine = true;       // random rotate/scale/translate
    bool jitter = true;       // random per-frame index jitter
    double rot_deg = 15.0;
    double scale_lo = 0.9;
    double scale_hi = 1.1;
    double trans_range = 0.1;
    int max_jitter = 3;
    bool affine_per_frame = false; // draw a fresh affine per frame

    void validate() const;
};

// Random rotation/scale/translation of the (x, y) channels.  One draw per
// sequence by default.  Channels past the first two pass through unchanged.
FrameArray augment_skeletal(const FrameArray& frames, const AugmentParams& p,
                            std::mt19937_64& rng);

// Replaces frame t with frame clamp(t + delta, 0, T-1), delta drawn
// uniformly from {-max_jitter, ..., +max_jitter} per frame.
FrameArray augment_temporal(const FrameArray& frames, const AugmentParams& p,
                            std::mt19937_64& rng);

struct SynthSpec {
    std::size_t classes = 4;
    std::size_t per_class = 100;
    std::size_t joints = 8;
    std::size_t raw_len = 72;
    std::size_t body_groups = 0; // 0 = pick from class count
    double amplitude = 0.3;
    double noise_sigma = 0.01;
    double similarity = 0.0; // 0 = well separated, 1 = nearly identical classes
    std::uint64_t seed = 0;

    void validate() const;
    std::size_t resolved_groups() const;
};

// Deterministic synthetic micro-action generator.  Each class moves one
// body group of joints with a class-specific oscillation frequency; samples
// differ by phase, a small random affine, and coordinate noise.
Dataset synth_generate(const SynthSpec& spec);

// Kinematic chain for the generated skeleton: joint 0 of each body group
// is a root (parent = itself), later joints attach to their predecessor.
std::vector<int> synth_parents(const SynthSpec& spec);

struct SplitResult {
    Dataset train, val, test;
};

// Per-class shuffle (seeded) followed by a train/val/test cut.  Every class
// contributes to each part in the given proportions.
SplitResult stratified_split(const Dataset& ds, double train_frac, double val_frac,
                             std::uint64_t seed);

} // namespace mmn
