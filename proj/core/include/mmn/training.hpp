#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mmn/checkpoint.hpp"
#include "mmn/metrics.hpp"
#include "mmn/model.hpp"
#include "mmn/skeleton_data.hpp"

namespace mmn {

struct TrainConfig {
    int epochs = 120;
    std::size_t batch_size = 64;
    double base_lr = 1e-4;
    double min_lr = 1e-6;
    double warmup_start_lr = 1e-7;
    int warmup_epochs = 20;
    int cosine_cycles = 3;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 0.0; // 0 disables clipping
    std::uint64_t seed = 0;

    void validate() const;
};

// Epoch-granular schedule: linear warmup from warmup_start_lr to base_lr,
// then cosine cycles that restart at base_lr and touch min_lr exactly on
// each cycle's last epoch.
double lr_at(const TrainConfig& cfg, int epoch);

// Decoupled weight decay: p -= lr * (mhat / (sqrt(vhat) + eps) + wd * p).
class AdamW {
public:
    AdamW(std::size_t num_params, const TrainConfig& cfg);

    // Applies one update.  Throws NumericError naming the parameter if a
    // gradient or updated value is non-finite.
    void step(std::vector<NamedParam>& params, double lr);

    long step_count() const { return t_; }
    void store(Checkpoint& ckpt, const std::vector<NamedParam>& params) const;
    void load(const Checkpoint& ckpt, const std::vector<NamedParam>& params);

private:
    struct Slot {
        std::vector<double> m, v;
    };
    std::vector<Slot> slots_;
    long t_ = 0;
    double beta1_, beta2_, eps_, wd_;
};

// Scales all gradients so their global L2 norm does not exceed max_norm.
// Returns the pre-clip norm.
double clip_gradients(std::vector<NamedParam>& params, double max_norm);

// Stacks dataset samples into a [B, T, V, C_in] tensor.  Training mode
// applies the augmentations with per-(epoch, sample-id) derived streams, so
// the result is independent of batch composition and thread count.
Tensor assemble_batch(const Dataset& ds, const std::vector<std::size_t>& indices, std::size_t T,
                      bool augment, const AugmentParams& aug, std::uint64_t seed, int epoch,
                      std::size_t num_threads = 1);

// Eval-mode forward over the whole dataset; scores are raw logits.
PredictionSet predict(MmnModel& model, const Dataset& ds, std::size_t batch_size,
                      std::size_t num_threads = 1);

struct EpochLog {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double train_top1 = 0.0;
    double val_top1 = 0.0;
    double val_f1_mean = 0.0;
};

struct TrainOptions {
    std::string out_dir; // receives train_log.jsonl, last.ckpt, best.ckpt
    AugmentParams augment;
    std::size_t eval_batch = 0;  // 0: use batch_size
    std::size_t num_threads = 0; // 0: MMN_NUM_THREADS env var, else 1
    std::string resume_from;     // checkpoint path, empty to start fresh
    std::function<bool(const EpochLog&)> should_stop; // optional early exit
    bool quiet = false;          // suppress per-epoch stderr progress
};

struct TrainResult {
    std::vector<EpochLog> history;
    int best_epoch = -1;
    double best_val_f1_mean = 0.0;
    std::string last_checkpoint;
    std::string best_checkpoint;
};

TrainResult train_model(MmnModel& model, const Dataset& train, const Dataset& val,
                        const TrainConfig& cfg, const TrainOptions& opts);

std::size_t resolve_num_threads(std::size_t requested);

} // namespace mmn
