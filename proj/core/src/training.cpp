#include "mmn/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "json.hpp"
#include "mmn/errors.hpp"
#include "mmn/ops.hpp"
#include "mmn/rng.hpp"

namespace mmn {

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    if (base_lr <= 0.0 || min_lr <= 0.0 || warmup_start_lr <= 0.0)
        throw ConfigError("train: learning rates must be positive");
    if (min_lr > base_lr) throw ConfigError("train: min_lr must not exceed base_lr");
    if (warmup_start_lr > base_lr)
        throw ConfigError("train: warmup_start_lr must not exceed base_lr");
    if (warmup_epochs < 0) throw ConfigError("train: warmup_epochs must be >= 0");
    if (cosine_cycles < 1) throw ConfigError("train: cosine_cycles must be >= 1");
    if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
        throw ConfigError("train: betas must be in [0,1)");
    if (adam_eps <= 0.0) throw ConfigError("train: adam_eps must be positive");
    if (grad_clip < 0.0) throw ConfigError("train: grad_clip must be >= 0");
}

double lr_at(const TrainConfig& cfg, int epoch) {
    cfg.validate();
    if (epoch < 0) throw ConfigError("lr_at: epoch must be >= 0");
    if (epoch < cfg.warmup_epochs)
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) *
                                         static_cast<double>(epoch) /
                                         static_cast<double>(cfg.warmup_epochs);
    const int rest = cfg.epochs - cfg.warmup_epochs;
    if (rest <= 0) return cfg.base_lr;
    int q = std::min(epoch, cfg.epochs - 1) - cfg.warmup_epochs;
    const int cycles = std::min(cfg.cosine_cycles, rest);
    // Earlier cycles absorb the remainder so lengths sum to `rest`.
    for (int c = 0; c < cycles; ++c) {
        const int len = rest / cycles + (c < rest % cycles ? 1 : 0);
        if (q < len) {
            const double p =
                len > 1 ? static_cast<double>(q) / static_cast<double>(len - 1) : 1.0;
            return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + std::cos(M_PI * p));
        }
        q -= len;
    }
    return cfg.min_lr;
}

AdamW::AdamW(std::size_t num_params, const TrainConfig& cfg)
    : slots_(num_params),
      beta1_(cfg.beta1),
      beta2_(cfg.beta2),
      eps_(cfg.adam_eps),
      wd_(cfg.weight_decay) {}

void AdamW::step(std::vector<NamedParam>& params, double lr) {
    if (params.size() != slots_.size())
        throw ConfigError("adamw: optimiser tracks " + std::to_string(slots_.size()) +
                          " parameters, got " + std::to_string(params.size()));
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i].tensor;
        if (!p.has_grad())
            throw NumericError("adamw: no gradient for parameter '" + params[i].name + "'");
        Slot& s = slots_[i];
        if (s.m.size() != p.numel()) {
            s.m.assign(p.numel(), 0.0);
            s.v.assign(p.numel(), 0.0);
        }
        auto& vals = p.values();
        const auto& g = p.grad();
        for (std::size_t j = 0; j < vals.size(); ++j) {
            if (!std::isfinite(g[j]))
                throw NumericError("adamw: non-finite gradient in parameter '" + params[i].name +
                                   "'");
            s.m[j] = beta1_ * s.m[j] + (1.0 - beta1_) * g[j];
            s.v[j] = beta2_ * s.v[j] + (1.0 - beta2_) * g[j] * g[j];
            const double mhat = s.m[j] / bc1;
            const double vhat = s.v[j] / bc2;
            vals[j] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * vals[j]);
            if (!std::isfinite(vals[j]))
                throw NumericError("adamw: non-finite update in parameter '" + params[i].name +
                                   "'");
        }
    }
}

void AdamW::store(Checkpoint& ckpt, const std::vector<NamedParam>& params) const {
    ckpt.state["opt.step"] = std::to_string(t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (slots_[i].m.empty()) continue; // no update applied yet
        const Shape& shape = params[i].tensor.shape();
        ckpt.tensors["opt/" + params[i].name + "/m"] = {shape, slots_[i].m};
        ckpt.tensors["opt/" + params[i].name + "/v"] = {shape, slots_[i].v};
    }
}

void AdamW::load(const Checkpoint& ckpt, const std::vector<NamedParam>& params) {
    if (params.size() != slots_.size())
        throw ConfigError("adamw: parameter count changed between runs");
    t_ = ckpt.state_long("opt.step", 0);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto m = ckpt.tensors.find("opt/" + params[i].name + "/m");
        auto v = ckpt.tensors.find("opt/" + params[i].name + "/v");
        if (m == ckpt.tensors.end() || v == ckpt.tensors.end()) {
            slots_[i].m.clear();
            slots_[i].v.clear();
            continue;
        }
        if (m->second.values.size() != params[i].tensor.numel())
            throw DimensionError("adamw: moment size mismatch for '" + params[i].name + "'");
        slots_[i].m = m->second.values;
        slots_[i].v = v->second.values;
    }
}

double clip_gradients(std::vector<NamedParam>& params, double max_norm) {
    if (max_norm <= 0.0) throw ConfigError("clip_gradients: max_norm must be positive");
    double sq = 0.0;
    for (NamedParam& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (NamedParam& p : params) {
            if (!p.tensor.has_grad()) continue;
            for (double& g : p.tensor.grad()) g *= scale;
        }
    }
    return norm;
}

std::size_t resolve_num_threads(std::size_t requested) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("MMN_NUM_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && v > 0) return static_cast<std::size_t>(v);
    }
    return 1;
}

Tensor assemble_batch(const Dataset& ds, const std::vector<std::size_t>& indices, std::size_t T,
                      bool augment, const AugmentParams& aug, std::uint64_t seed, int epoch,
                      std::size_t num_threads) {
    if (indices.empty()) throw ConfigError("assemble_batch: empty index list");
    const std::size_t B = indices.size();
    Tensor batch = Tensor::zeros({B, T, ds.V, ds.C_in});
    const std::size_t sample_len = T * ds.V * ds.C_in;

    auto fill = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const SkeletonSequence& s = ds.samples.at(indices[i]);
            FrameArray frames;
            if (augment) {
                // Augmentation perturbs the raw recording; sampling comes
                // after, so jitter is in raw-frame units.  Keyed by sample
                // id, not position: reordering or resizing batches cannot
                // change what a sample looks like this epoch.
                auto rng = make_rng(seed, rng_stream::augment,
                                    static_cast<std::uint64_t>(epoch), hash_str(s.id));
                frames = augment_skeletal(s.frames, aug, rng);
                frames = augment_temporal(frames, aug, rng);
                frames = uniform_sample(frames, T);
            } else {
                frames = uniform_sample(s.frames, T);
            }
            std::copy(frames.data.begin(), frames.data.end(),
                      batch.values().begin() + static_cast<std::ptrdiff_t>(i * sample_len));
        }
    };

    const std::size_t workers = std::min(resolve_num_threads(num_threads), B);
    if (workers <= 1) {
        fill(0, B);
    } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (B + workers - 1) / workers;
        for (std::size_t w = 0; w < workers; ++w) {
            const std::size_t lo = w * chunk;
            const std::size_t hi = std::min(B, lo + chunk);
            if (lo >= hi) break;
            pool.emplace_back(fill, lo, hi);
        }
        for (std::thread& t : pool) t.join();
    }
    return batch;
}

PredictionSet predict(MmnModel& model, const Dataset& ds, std::size_t batch_size,
                      std::size_t num_threads) {
    if (batch_size == 0) throw ConfigError("predict: batch_size must be >= 1");
    ds.validate();
    if (ds.num_classes() != model.config().num_classes)
        throw DataError("predict: dataset has " + std::to_string(ds.num_classes()) +
                        " classes, model expects " +
                        std::to_string(model.config().num_classes));
    if (ds.V != model.config().V || ds.C_in != model.config().C_in)
        throw DataError("predict: dataset geometry V=" + std::to_string(ds.V) + ",C_in=" +
                        std::to_string(ds.C_in) + " does not match model");

    PredictionSet ps;
    const std::size_t K = model.config().num_classes;
    AugmentParams no_aug;
    for (std::size_t start = 0; start < ds.samples.size(); start += batch_size) {
        const std::size_t end = std::min(ds.samples.size(), start + batch_size);
        std::vector<std::size_t> idx(end - start);
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
        Tensor x =
            assemble_batch(ds, idx, model.config().T, false, no_aug, 0, 0, num_threads);
        ForwardCtx ctx;
        Tensor logits = model.forward(x, ctx);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const SkeletonSequence& s = ds.samples[idx[i]];
            ps.ids.push_back(s.id);
            ps.labels.push_back(s.label);
            ps.scores.emplace_back(logits.values().begin() + static_cast<std::ptrdiff_t>(i * K),
                                   logits.values().begin() +
                                       static_cast<std::ptrdiff_t>((i + 1) * K));
        }
    }
    ps.validate();
    return ps;
}

namespace {

void append_log_line(std::ofstream& out, const EpochLog& log) {
    nlohmann::ordered_json j;
    j["epoch"] = log.epoch;
    j["lr"] = log.lr;
    j["train_loss"] = log.train_loss;
    j["train_top1"] = log.train_top1;
    j["val_top1"] = log.val_top1;
    j["val_f1_mean"] = log.val_f1_mean;
    out << j.dump() << "\n";
    out.flush();
}

Checkpoint snapshot(MmnModel& model, AdamW& opt, std::vector<NamedParam>& params, int epoch,
                    double best_val, int best_epoch) {
    Checkpoint ckpt;
    store_model(ckpt, model);
    opt.store(ckpt, params);
    ckpt.state["epoch"] = std::to_string(epoch);
    ckpt.state["best_val_f1_mean"] = std::to_string(best_val);
    ckpt.state["best_epoch"] = std::to_string(best_epoch);
    return ckpt;
}

} // namespace

TrainResult train_model(MmnModel& model, const Dataset& train, const Dataset& val,
                        const TrainConfig& cfg, const TrainOptions& opts) {
    cfg.validate();
    opts.augment.validate();
    train.validate();
    val.validate();
    if (train.samples.empty()) throw DataError("train: training set is empty");
    if (val.samples.empty()) throw DataError("train: validation set is empty");
    if (opts.out_dir.empty()) throw ConfigError("train: out_dir is required");
    std::filesystem::create_directories(opts.out_dir);

    std::vector<NamedParam> params = model.named_parameters();
    AdamW opt(params.size(), cfg);
    const std::size_t threads = resolve_num_threads(opts.num_threads);
    const std::size_t eval_batch = opts.eval_batch > 0 ? opts.eval_batch : cfg.batch_size;

    TrainResult result;
    result.last_checkpoint = opts.out_dir + "/last.ckpt";
    result.best_checkpoint = opts.out_dir + "/best.ckpt";
    int start_epoch = 0;
    double best_val = -1.0;
    int best_epoch = -1;

    if (!opts.resume_from.empty()) {
        Checkpoint ckpt = read_checkpoint(opts.resume_from);
        load_model(model, ckpt);
        opt.load(ckpt, params);
        start_epoch = static_cast<int>(ckpt.state_long("epoch", -1)) + 1;
        best_val = ckpt.state_double("best_val_f1_mean", -1.0);
        best_epoch = static_cast<int>(ckpt.state_long("best_epoch", -1));
    }

    std::ofstream log_out(opts.out_dir + "/train_log.jsonl",
                          start_epoch > 0 ? std::ios::app : std::ios::trunc);
    if (!log_out) throw ParseError("cannot open train log in " + opts.out_dir);

    const std::size_t n_train = train.samples.size();
    for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at(cfg, epoch);

        std::vector<std::size_t> order(n_train);
        for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
        auto shuffle_rng = make_rng(cfg.seed, rng_stream::shuffle,
                                    static_cast<std::uint64_t>(epoch), 1);
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double loss_sum = 0.0;
        std::size_t hit = 0;
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < n_train; start += cfg.batch_size, ++batch_index) {
            const std::size_t end = std::min(n_train, start + cfg.batch_size);
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));
            Tensor x = assemble_batch(train, idx, model.config().T, true, opts.augment, cfg.seed,
                                      epoch, threads);
            std::vector<int> labels(idx.size());
            for (std::size_t i = 0; i < idx.size(); ++i) labels[i] = train.samples[idx[i]].label;

            auto dropout_rng = make_rng(cfg.seed, rng_stream::dropout,
                                        static_cast<std::uint64_t>(epoch), batch_index);
            Tape tape;
            {
                TapeGuard guard(tape);
                ForwardCtx ctx;
                ctx.training = true;
                ctx.rng = &dropout_rng;
                Tensor logits = model.forward(x, ctx);
                const std::size_t K = model.config().num_classes;
                for (std::size_t i = 0; i < idx.size(); ++i) {
                    const double* row = logits.data() + i * K;
                    if (static_cast<std::size_t>(labels[i]) ==
                        argmax_score(std::vector<double>(row, row + K)))
                        ++hit;
                }
                Tensor loss = ops::cross_entropy(logits, labels);
                loss_sum += loss.item() * static_cast<double>(idx.size());
                tape.backward(loss);
            }
            if (cfg.grad_clip > 0.0) clip_gradients(params, cfg.grad_clip);
            opt.step(params, lr);
            model.zero_grad();
        }

        EpochLog log;
        log.epoch = epoch;
        log.lr = lr;
        log.train_loss = loss_sum / static_cast<double>(n_train);
        log.train_top1 = static_cast<double>(hit) / static_cast<double>(n_train);

        PredictionSet val_preds = predict(model, val, eval_batch, threads);
        MetricsReport val_rep = compute_metrics(val_preds, val.taxonomy);
        log.val_top1 = val_rep.top1_action;
        log.val_f1_mean = val_rep.f1_mean;
        append_log_line(log_out, log);
        if (!opts.quiet)
            std::cerr << "epoch " << epoch << " lr " << lr << " loss " << log.train_loss
                      << " train_top1 " << log.train_top1 << " val_top1 " << log.val_top1
                      << " val_f1_mean " << log.val_f1_mean << "\n";
        result.history.push_back(log);

        if (log.val_f1_mean > best_val) {
            best_val = log.val_f1_mean;
            best_epoch = epoch;
            Checkpoint best = snapshot(model, opt, params, epoch, best_val, best_epoch);
            write_checkpoint(result.best_checkpoint, best);
        }
        Checkpoint last = snapshot(model, opt, params, epoch, best_val, best_epoch);
        write_checkpoint(result.last_checkpoint, last);

        if (opts.should_stop && opts.should_stop(log)) break;
    }

    result.best_epoch = best_epoch;
    result.best_val_f1_mean = best_val;
    return result;
}

} // namespace mmn
