#pragma once

#include <string>

#include "CLI11.hpp"
#include "mmn/model.hpp"
#include "mmn/skeleton_data.hpp"
#include "mmn/training.hpp"

namespace mmncli {

// Everything a run can be configured with.  Commands read the subset they
// need; the resolved values are written next to each command's outputs.
struct RunConfig {
    mmn::ModelConfig model;
    mmn::TrainConfig train;
    mmn::AugmentParams augment;
    mmn::SynthSpec synth;
    std::string strategy = "modulate";

    std::string preset;
    std::string config_file;
    std::string dataset_dir;
    std::string checkpoint;
    std::string out_dir;
    std::string split = "test";
    std::string resume_from;
    std::string predictions_file;
    std::string ensemble_with;
    std::string bones_file;
    std::string sample_id;
    int inspect_stage = -1; // -1 exports every stage
    int inspect_block = -1; // -1 exports every block
    double ensemble_weight = 0.5;
    double train_frac = 0.70;
    double val_frac = 0.15;
    double stop_train_top1 = 0.0; // 0 disables early stopping
    std::size_t eval_batch = 0;
    std::size_t num_threads = 0;
    std::size_t bench_iters = 100;
    std::size_t bench_warmup = 10;
    bool save_preds = false;
    bool force = false;
    bool quiet = false;
};

// Registers every tunable field on `cmd` and remembers which flags the user
// actually set, so values can be layered: defaults, then config file, then
// preset, then explicit flags.
class ConfigBinder {
  public:
    ConfigBinder(CLI::App* cmd, RunConfig* staged);

    // Applies the layering into `resolved` (which starts as defaults).
    void resolve(RunConfig& resolved) const;

  private:
    struct Field {
        std::string key;                                            // flag name without --
        std::function<void(RunConfig&, const std::string&)> parse;  // config-file path
        std::function<void(RunConfig&, const RunConfig&)> copy;     // staged -> resolved
        CLI::Option* opt = nullptr;
    };

    void apply_file(RunConfig& resolved, const std::string& path) const;
    void apply_preset(RunConfig& resolved, const std::string& preset) const;

    RunConfig* staged_;
    std::vector<Field> fields_;
    CLI::Option* config_opt_ = nullptr;
    CLI::Option* preset_opt_ = nullptr;
};

// Writes the fields of `cfg` as sorted key=value lines.
void write_resolved_config(const std::string& path, const RunConfig& cfg);

} // namespace mmncli
