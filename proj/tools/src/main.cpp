#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <vector>

#include "CLI11.hpp"
#include "cli_config.hpp"
#include "json.hpp"
#include "mmn/checkpoint.hpp"
#include "mmn/errors.hpp"
#include "mmn/gradcheck.hpp"
#include "mmn/metrics.hpp"
#include "mmn/model.hpp"
#include "mmn/rng.hpp"
#include "mmn/skeleton_data.hpp"
#include "mmn/training.hpp"

namespace fs = std::filesystem;
using namespace mmncli;

namespace {

void require_out_dir(RunConfig& cfg) {
    if (cfg.out_dir.empty()) throw mmn::ConfigError("--out is required");
    fs::create_directories(cfg.out_dir);
    write_resolved_config(cfg.out_dir + "/config.resolved", cfg);
}

mmn::Dataset load_split(const RunConfig& cfg, const std::string& split) {
    if (cfg.dataset_dir.empty()) throw mmn::ConfigError("--dataset is required");
    if (split != "train" && split != "val" && split != "test")
        throw mmn::ConfigError("--split must be train, val or test, got '" + split + "'");
    return mmn::load_dataset(cfg.dataset_dir + "/" + split + ".jsonl");
}

int run_synth_gen(RunConfig& cfg) {
    cfg.synth.seed = cfg.train.seed;
    cfg.synth.validate();
    if (cfg.train_frac <= 0.0 || cfg.val_frac < 0.0 || cfg.train_frac + cfg.val_frac >= 1.0)
        throw mmn::ConfigError("split fractions must satisfy 0 < train, 0 <= val, train+val < 1");
    if (cfg.out_dir.empty()) throw mmn::ConfigError("--out is required");
    fs::create_directories(cfg.out_dir);
    for (const char* name : {"train.jsonl", "val.jsonl", "test.jsonl"}) {
        const fs::path p = fs::path(cfg.out_dir) / name;
        if (fs::exists(p) && !cfg.force)
            throw mmn::DataError("refusing to overwrite " + p.string() + " (pass --force)");
    }

    mmn::Dataset ds = mmn::synth_generate(cfg.synth);
    mmn::SplitResult split = mmn::stratified_split(ds, cfg.train_frac, cfg.val_frac,
                                                   cfg.train.seed);
    mmn::save_dataset(cfg.out_dir + "/train.jsonl", split.train);
    mmn::save_dataset(cfg.out_dir + "/val.jsonl", split.val);
    mmn::save_dataset(cfg.out_dir + "/test.jsonl", split.test);
    mmn::save_parents(cfg.out_dir + "/parents.json", mmn::synth_parents(cfg.synth));
    write_resolved_config(cfg.out_dir + "/config.resolved", cfg);
    if (!cfg.quiet)
        std::cout << "wrote " << split.train.samples.size() << "/" << split.val.samples.size()
                  << "/" << split.test.samples.size() << " train/val/test samples to "
                  << cfg.out_dir << "\n";
    return 0;
}

int run_train(RunConfig& cfg) {
    mmn::Dataset train = load_split(cfg, "train");
    mmn::Dataset val = load_split(cfg, "val");
    cfg.model.V = train.V;
    cfg.model.C_in = train.C_in;
    cfg.model.num_classes = train.num_classes();
    require_out_dir(cfg);

    mmn::MmnModel model(cfg.model, cfg.train.seed);
    mmn::TrainOptions opts;
    opts.out_dir = cfg.out_dir;
    opts.augment = cfg.augment;
    opts.eval_batch = cfg.eval_batch;
    opts.num_threads = cfg.num_threads;
    opts.resume_from = cfg.resume_from;
    opts.quiet = cfg.quiet;
    if (cfg.stop_train_top1 > 0.0) {
        const double threshold = cfg.stop_train_top1;
        opts.should_stop = [threshold](const mmn::EpochLog& log) {
            return log.train_top1 >= threshold;
        };
    }
    mmn::TrainResult result = mmn::train_model(model, train, val, cfg.train, opts);
    if (!cfg.quiet)
        std::cout << "trained " << result.history.size() << " epochs; best val f1_mean "
                  << result.best_val_f1_mean << " at epoch " << result.best_epoch << "; wrote "
                  << result.best_checkpoint << "\n";
    return 0;
}

int run_eval(RunConfig& cfg) {
    mmn::Dataset ds = load_split(cfg, cfg.split);
    if (!cfg.bones_file.empty())
        ds = mmn::to_bone(ds, mmn::load_parents(cfg.bones_file));
    require_out_dir(cfg);

    mmn::PredictionSet preds;
    if (!cfg.predictions_file.empty()) {
        preds = mmn::load_predictions(cfg.predictions_file);
        mmn::attach_labels(preds, ds);
    } else {
        if (cfg.checkpoint.empty())
            throw mmn::ConfigError("--checkpoint is required unless --predictions is given");
        mmn::MmnModel model = mmn::model_from_checkpoint(mmn::read_checkpoint(cfg.checkpoint));
        const std::size_t batch = cfg.eval_batch > 0 ? cfg.eval_batch : cfg.train.batch_size;
        preds = mmn::predict(model, ds, batch, cfg.num_threads);
    }
    if (!cfg.ensemble_with.empty()) {
        mmn::PredictionSet other = mmn::load_predictions(cfg.ensemble_with);
        mmn::attach_labels(other, ds);
        preds = mmn::ensemble_scores(preds, other, cfg.ensemble_weight);
    }
    if (cfg.save_preds) mmn::save_predictions(cfg.out_dir + "/predictions.jsonl", preds);

    mmn::MetricsReport report = mmn::compute_metrics(preds, ds.taxonomy);
    mmn::write_report_json(cfg.out_dir + "/report.json", report);
    mmn::write_confusion_csv(cfg.out_dir + "/confusion.csv", mmn::confusion_matrix(preds),
                             ds.taxonomy.action_names);
    if (!cfg.quiet)
        std::cout << "top1 " << report.top1_action << "  top5 " << report.top5_action
                  << "  f1_mean " << report.f1_mean << "  (" << preds.size() << " samples, "
                  << cfg.split << " split)\n";
    return 0;
}

int run_gradcheck(RunConfig& cfg) {
    const auto cases = mmn::gradcheck_suite(cfg.train.seed);
    double worst = 0.0;
    bool all_pass = true;
    std::ostringstream lines;
    for (const auto& c : cases) {
        lines << (c.report.pass ? "pass" : "FAIL") << "  " << c.name << "  max_rel_err "
              << c.report.max_rel_err << "\n";
        if (!c.report.pass) {
            all_pass = false;
            lines << "      " << c.report.summary() << "\n";
        }
        worst = std::max(worst, c.report.max_rel_err);
    }
    lines << (all_pass ? "PASS" : "FAIL") << ", max rel err " << worst
          << (all_pass ? " < 1e-4" : "") << " over " << cases.size() << " cases\n";
    std::cout << lines.str();
    if (!cfg.out_dir.empty()) {
        fs::create_directories(cfg.out_dir);
        std::ofstream out(cfg.out_dir + "/gradcheck.txt");
        out << lines.str();
        write_resolved_config(cfg.out_dir + "/config.resolved", cfg);
    }
    return all_pass ? 0 : 1;
}

int run_bench(RunConfig& cfg) {
    cfg.model.validate();
    mmn::MmnModel model(cfg.model, cfg.train.seed);
    // A freshly built model has never seen a training batch, so mark its
    // batch-norm buffers usable for the timed eval forwards.
    for (auto& bn : model.named_bn_states()) bn.state->initialized = true;
    const mmn::CostEstimate cost = model.cost();
    if (cfg.bench_iters < 1) throw mmn::ConfigError("--iters must be >= 1");

    auto rng = mmn::make_rng(cfg.train.seed, mmn::hash_str("bench-input"));
    mmn::Tensor x =
        mmn::Tensor::uniform({1, cfg.model.T, cfg.model.V, cfg.model.C_in}, rng, -1.0, 1.0);
    mmn::ForwardCtx ctx;
    for (std::size_t i = 0; i < cfg.bench_warmup; ++i) model.forward(x, ctx);
    std::vector<double> ms(cfg.bench_iters);
    for (std::size_t i = 0; i < cfg.bench_iters; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        model.forward(x, ctx);
        ms[i] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count();
    }
    std::sort(ms.begin(), ms.end());
    const double median = ms[ms.size() / 2];
    const double p90 = ms[std::min(ms.size() - 1, (ms.size() * 9) / 10)];
    const double flops = 2.0 * cost.macs;

    std::cout << "params " << cost.params << " (" << cost.params / 1e6 << " M)\n"
              << "flops " << flops << " per forward at batch 1 (" << flops / 1e9 << " G)\n"
              << "latency median " << median << " ms  p90 " << p90 << " ms  over "
              << cfg.bench_iters << " runs after " << cfg.bench_warmup << " warmup\n"
              << "published full-scale reference: 1.23 M params / 1.48 G FLOPs / 7.15 ms\n";

    if (!cfg.out_dir.empty()) {
        fs::create_directories(cfg.out_dir);
        nlohmann::ordered_json j;
        j["params"] = cost.params;
        j["macs"] = cost.macs;
        j["flops"] = flops;
        j["latency_median_ms"] = median;
        j["latency_p90_ms"] = p90;
        j["iters"] = cfg.bench_iters;
        j["warmup"] = cfg.bench_warmup;
        j["reference"] = {{"params", 1.23e6}, {"flops", 1.48e9}, {"latency_ms", 7.15}};
        std::ofstream out(cfg.out_dir + "/bench.json");
        out << j.dump(2) << "\n";
        write_resolved_config(cfg.out_dir + "/config.resolved", cfg);
    }
    return 0;
}

int run_inspect(RunConfig& cfg) {
    mmn::Dataset ds = load_split(cfg, cfg.split);
    if (cfg.checkpoint.empty())
        throw mmn::ConfigError("--checkpoint is required for inspect");
    require_out_dir(cfg);

    std::size_t pick = 0;
    if (!cfg.sample_id.empty()) {
        const auto it = std::find_if(ds.samples.begin(), ds.samples.end(),
                                     [&](const auto& s) { return s.id == cfg.sample_id; });
        if (it == ds.samples.end())
            throw mmn::DataError("sample id '" + cfg.sample_id + "' not in " + cfg.split +
                                 " split");
        pick = static_cast<std::size_t>(it - ds.samples.begin());
    }
    const mmn::SkeletonSequence& sample = ds.samples[pick];

    mmn::MmnModel model = mmn::model_from_checkpoint(mmn::read_checkpoint(cfg.checkpoint));
    if (ds.V != model.config().V || ds.C_in != model.config().C_in)
        throw mmn::DataError("dataset geometry does not match checkpoint");
    if (cfg.inspect_stage >= static_cast<int>(model.config().stages))
        throw mmn::ConfigError("--stage out of range, model has " +
                               std::to_string(model.config().stages) + " stages");
    if (cfg.inspect_block >= static_cast<int>(model.config().blocks_per_stage))
        throw mmn::ConfigError("--block out of range, stages have " +
                               std::to_string(model.config().blocks_per_stage) + " blocks");
    mmn::FrameArray frames = mmn::uniform_sample(sample.frames, model.config().T);
    mmn::Tensor x = mmn::Tensor::from_values({1, frames.T, frames.V, frames.C},
                                             frames.data);
    std::vector<mmn::FeatureMapRecord> maps;
    mmn::ForwardCtx ctx;
    ctx.capture = &maps;
    mmn::Tensor logits = model.forward(x, ctx);

    std::ofstream out(cfg.out_dir + "/feature_maps.jsonl");
    if (!out) throw mmn::ParseError("cannot write feature maps in " + cfg.out_dir);
    std::size_t written = 0;
    for (const auto& rec : maps) {
        if (cfg.inspect_stage >= 0 && rec.stage != static_cast<std::size_t>(cfg.inspect_stage))
            continue;
        if (cfg.inspect_block >= 0 && rec.block != static_cast<std::size_t>(cfg.inspect_block))
            continue;
        // rec.value is the block's aggregated branch tensor [1, T_l, V, C];
        // the export keeps the channel-wise max, one value per (frame, joint).
        const auto& sh = rec.value.shape();
        const std::size_t T_l = sh[sh.size() - 3];
        const std::size_t V = sh[sh.size() - 2];
        const std::size_t C = sh[sh.size() - 1];
        const auto& vals = rec.value.values();
        std::vector<std::vector<double>> cmax(T_l, std::vector<double>(V));
        for (std::size_t t = 0; t < T_l; ++t)
            for (std::size_t v = 0; v < V; ++v) {
                const double* p = vals.data() + (t * V + v) * C;
                double m = p[0];
                for (std::size_t c = 1; c < C; ++c) m = std::max(m, p[c]);
                cmax[t][v] = m;
            }
        nlohmann::ordered_json j;
        j["stage"] = rec.stage;
        j["block"] = rec.block;
        j["frames"] = T_l;
        j["joints"] = V;
        j["channel_max"] = cmax;
        out << j.dump() << "\n";
        ++written;
    }

    nlohmann::ordered_json summary;
    summary["id"] = sample.id;
    summary["label"] = sample.label;
    summary["label_name"] = ds.taxonomy.action_names[static_cast<std::size_t>(sample.label)];
    const std::size_t predicted = mmn::argmax_score(logits.values());
    summary["predicted"] = predicted;
    summary["predicted_name"] = ds.taxonomy.action_names[predicted];
    summary["logits"] = logits.values();
    std::ofstream sum_out(cfg.out_dir + "/inspect.json");
    sum_out << summary.dump(2) << "\n";
    if (!cfg.quiet)
        std::cout << "wrote " << written << " feature maps for sample '" << sample.id
                  << "' (label " << sample.label << ", predicted " << predicted << ") to "
                  << cfg.out_dir << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"skeleton micro-action recognition pipeline"};
    app.require_subcommand(1);

    struct Cmd {
        CLI::App* sub = nullptr;
        RunConfig staged;
        std::unique_ptr<ConfigBinder> binder;
        int (*run)(RunConfig&) = nullptr;
    };
    std::vector<std::unique_ptr<Cmd>> cmds;
    auto add_cmd = [&](const std::string& name, const std::string& desc,
                       int (*run)(RunConfig&)) -> Cmd& {
        auto cmd = std::make_unique<Cmd>();
        cmd->sub = app.add_subcommand(name, desc);
        cmd->binder = std::make_unique<ConfigBinder>(cmd->sub, &cmd->staged);
        cmd->run = run;
        cmds.push_back(std::move(cmd));
        return *cmds.back();
    };

    Cmd& synth = add_cmd("synth-gen", "generate a synthetic dataset with splits",
                         run_synth_gen);
    synth.sub->add_option("--out", synth.staged.out_dir, "output directory");
    synth.sub->add_flag("--force", synth.staged.force, "overwrite existing split files");
    synth.sub->add_flag("--quiet", synth.staged.quiet, "suppress progress output");

    Cmd& train = add_cmd("train", "train a model on a dataset directory", run_train);
    train.sub->add_option("--dataset", train.staged.dataset_dir,
                          "directory with train.jsonl and val.jsonl");
    train.sub->add_option("--out", train.staged.out_dir, "output directory");
    train.sub->add_option("--resume", train.staged.resume_from,
                          "checkpoint to continue from");
    train.sub->add_flag("--quiet", train.staged.quiet, "suppress per-epoch output");

    Cmd& eval = add_cmd("eval", "evaluate a checkpoint or saved predictions", run_eval);
    eval.sub->add_option("--dataset", eval.staged.dataset_dir, "dataset directory");
    eval.sub->add_option("--split", eval.staged.split, "train, val or test");
    eval.sub->add_option("--checkpoint", eval.staged.checkpoint, "model checkpoint");
    eval.sub->add_option("--out", eval.staged.out_dir, "output directory");
    eval.sub->add_option("--predictions", eval.staged.predictions_file,
                         "evaluate this predictions file instead of a checkpoint");
    eval.sub->add_option("--ensemble-with", eval.staged.ensemble_with,
                         "second predictions file to average with");
    eval.sub->add_option("--ensemble-weight", eval.staged.ensemble_weight,
                         "weight of the first stream in [0,1]");
    eval.sub->add_option("--bones", eval.staged.bones_file,
                         "parents file; evaluate on bone vectors instead of joints");
    eval.sub->add_flag("--save-predictions", eval.staged.save_preds,
                       "write predictions.jsonl next to the report");
    eval.sub->add_flag("--quiet", eval.staged.quiet, "suppress summary output");

    Cmd& grad = add_cmd("gradcheck", "finite-difference check of every op and a toy model",
                        run_gradcheck);
    grad.sub->add_option("--out", grad.staged.out_dir, "optional report directory");

    Cmd& bench = add_cmd("bench", "parameter, FLOP and latency report", run_bench);
    bench.sub->add_option("--out", bench.staged.out_dir, "optional report directory");
    bench.sub->add_option("--iters", bench.staged.bench_iters, "timed forward passes");
    bench.sub->add_option("--warmup", bench.staged.bench_warmup, "untimed warmup passes");

    Cmd& inspect = add_cmd("inspect", "export per-block aggregated feature maps",
                           run_inspect);
    inspect.sub->add_option("--dataset", inspect.staged.dataset_dir, "dataset directory");
    inspect.sub->add_option("--split", inspect.staged.split, "train, val or test");
    inspect.sub->add_option("--checkpoint", inspect.staged.checkpoint, "model checkpoint");
    inspect.sub->add_option("--out", inspect.staged.out_dir, "output directory");
    inspect.sub->add_option("--sample-id", inspect.staged.sample_id,
                            "sample to inspect, first in the split if omitted");
    inspect.sub->add_option("--stage", inspect.staged.inspect_stage,
                            "restrict the export to one stage index");
    inspect.sub->add_option("--block", inspect.staged.inspect_block,
                            "restrict the export to one block index");
    inspect.sub->add_flag("--quiet", inspect.staged.quiet, "suppress summary output");

    try {
        app.parse(argc, argv);
        for (auto& cmd : cmds) {
            if (!app.got_subcommand(cmd->sub)) continue;
            RunConfig resolved;
            resolved.out_dir = cmd->staged.out_dir;
            resolved.dataset_dir = cmd->staged.dataset_dir;
            resolved.checkpoint = cmd->staged.checkpoint;
            resolved.split = cmd->staged.split;
            resolved.resume_from = cmd->staged.resume_from;
            resolved.predictions_file = cmd->staged.predictions_file;
            resolved.ensemble_with = cmd->staged.ensemble_with;
            resolved.bones_file = cmd->staged.bones_file;
            resolved.sample_id = cmd->staged.sample_id;
            resolved.inspect_stage = cmd->staged.inspect_stage;
            resolved.inspect_block = cmd->staged.inspect_block;
            resolved.ensemble_weight = cmd->staged.ensemble_weight;
            resolved.bench_iters = cmd->staged.bench_iters;
            resolved.bench_warmup = cmd->staged.bench_warmup;
            resolved.save_preds = cmd->staged.save_preds;
            resolved.force = cmd->staged.force;
            resolved.quiet = cmd->staged.quiet;
            cmd->binder->resolve(resolved);
            return cmd->run(resolved);
        }
        throw mmn::ConfigError("no command given");
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const mmn::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
