#pragma once

#include <map>
#include <string>
#include <vector>

#include "mmn/model.hpp"
#include "mmn/tensor.hpp"

namespace mmn {

// On-disk training snapshot: a text manifest (config + scalar state)
// followed by named raw-double tensor blocks.
struct Checkpoint {
    std::map<std::string, std::string> config;
    std::map<std::string, std::string> state;

    struct Blob {
        Shape shape;
        std::vector<double> values;
    };
    std::map<std::string, Blob> tensors;

    bool has_state(const std::string& key) const { return state.count(key) > 0; }
    long state_long(const std::string& key, long fallback) const;
    double state_double(const std::string& key, double fallback) const;
};

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

std::map<std::string, std::string> config_to_manifest(const ModelConfig& cfg);
ModelConfig config_from_manifest(const std::map<std::string, std::string>& manifest);

// Parameters, batch-norm buffers, and the config manifest.
void store_model(Checkpoint& ckpt, MmnModel& model);
// Restores weights and buffers into an already-built model of the same
// architecture; every expected tensor must be present with its exact shape.
void load_model(MmnModel& model, const Checkpoint& ckpt);
// Builds the model the checkpoint describes, then loads it.
MmnModel model_from_checkpoint(const Checkpoint& ckpt);

} // namespace mmn
