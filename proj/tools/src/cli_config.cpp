#include "cli_config.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "mmn/errors.hpp"

namespace mmncli {

namespace {

template <typename T>
T parse_value(const std::string& key, const std::string& raw);

template <>
double parse_value<double>(const std::string& key, const std::string& raw) {
    try {
        std::size_t used = 0;
        double v = std::stod(raw, &used);
        if (used != raw.size()) throw std::invalid_argument(raw);
        return v;
    } catch (const std::exception&) {
        throw mmn::ConfigError("config: bad number for '" + key + "': " + raw);
    }
}

template <>
std::size_t parse_value<std::size_t>(const std::string& key, const std::string& raw) {
    try {
        if (!raw.empty() && raw[0] == '-') throw std::invalid_argument(raw);
        std::size_t used = 0;
        unsigned long long v = std::stoull(raw, &used);
        if (used != raw.size()) throw std::invalid_argument(raw);
        return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw mmn::ConfigError("config: bad count for '" + key + "': " + raw);
    }
}

template <>
int parse_value<int>(const std::string& key, const std::string& raw) {
    try {
        std::size_t used = 0;
        int v = std::stoi(raw, &used);
        if (used != raw.size()) throw std::invalid_argument(raw);
        return v;
    } catch (const std::exception&) {
        throw mmn::ConfigError("config: bad integer for '" + key + "': " + raw);
    }
}

template <>
bool parse_value<bool>(const std::string& key, const std::string& raw) {
    if (raw == "true" || raw == "1" || raw == "yes" || raw == "on") return true;
    if (raw == "false" || raw == "0" || raw == "no" || raw == "off") return false;
    throw mmn::ConfigError("config: bad boolean for '" + key + "': " + raw);
}

template <>
std::string parse_value<std::string>(const std::string&, const std::string& raw) {
    return raw;
}

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

} // namespace

ConfigBinder::ConfigBinder(CLI::App* cmd, RunConfig* staged) : staged_(staged) {
    auto reg = [&](const std::string& name, const std::string& desc, auto get) {
        using T = std::decay_t<decltype(get(*staged_))>;
        CLI::Option* opt = cmd->add_option("--" + name, get(*staged_), desc);
        fields_.push_back(Field{
            name,
            [get, name](RunConfig& c, const std::string& v) {
                get(c) = parse_value<T>(name, v);
            },
            [get](RunConfig& dst, const RunConfig& src) {
                get(dst) = get(const_cast<RunConfig&>(src));
            },
            opt});
    };
    auto reg_flag = [&](const std::string& name, const std::string& desc, auto get) {
        CLI::Option* opt = cmd->add_flag("--" + name + ",!--no-" + name, get(*staged_), desc);
        fields_.push_back(Field{
            name,
            [get, name](RunConfig& c, const std::string& v) {
                get(c) = parse_value<bool>(name, v);
            },
            [get](RunConfig& dst, const RunConfig& src) {
                get(dst) = get(const_cast<RunConfig&>(src));
            },
            opt});
    };

    config_opt_ = cmd->add_option("--config", staged_->config_file,
                                  "key=value file applied before preset and flags");
    preset_opt_ = cmd->add_option(
        "--preset", staged_->preset,
        "named variant: A1-A4 modulation heads, B1-B5 strategies, C1-C4 augmentation");

    reg("frames", "frames per sequence after uniform sampling",
        [](RunConfig& c) -> std::size_t& { return c.model.T; });
    reg("channels", "embedding width, divisible by 4",
        [](RunConfig& c) -> std::size_t& { return c.model.C; });
    reg("blocks", "former blocks per stage",
        [](RunConfig& c) -> std::size_t& { return c.model.blocks_per_stage; });
    reg("stages", "temporal pyramid depth",
        [](RunConfig& c) -> std::size_t& { return c.model.stages; });
    reg("tconv-kernel", "temporal conv kernel size",
        [](RunConfig& c) -> std::size_t& { return c.model.tconv_kernel; });
    reg("mtm-kernel", "temporal modulation head kernel size",
        [](RunConfig& c) -> std::size_t& { return c.model.mtm_kernel; });
    reg("ffn-expansion", "feed-forward width multiplier",
        [](RunConfig& c) -> std::size_t& { return c.model.ffn_expansion; });
    reg("dropout", "feed-forward dropout rate",
        [](RunConfig& c) -> double& { return c.model.dropout; });
    reg("ln-eps", "layer norm epsilon",
        [](RunConfig& c) -> double& { return c.model.ln_eps; });
    reg("bn-eps", "batch norm epsilon",
        [](RunConfig& c) -> double& { return c.model.bn_eps; });
    reg("bn-momentum", "batch norm running-stat momentum",
        [](RunConfig& c) -> double& { return c.model.bn_momentum; });
    reg("mod-eps", "modulation standardisation epsilon",
        [](RunConfig& c) -> double& { return c.model.mod_eps; });
    reg("strategy", "modulate|no_scale|no_shift|add|concat|hadamard",
        [](RunConfig& c) -> std::string& { return c.strategy; });
    reg_flag("msm", "motion-guided skeletal modulation",
             [](RunConfig& c) -> bool& { return c.model.msm_enabled; });
    reg_flag("mtm", "motion-guided temporal modulation",
             [](RunConfig& c) -> bool& { return c.model.mtm_enabled; });
    reg_flag("shared-tconv-mod-source",
             "modulate the temporal-conv branch at both modulation sites",
             [](RunConfig& c) -> bool& { return c.model.shared_tconv_mod_source; });
    reg("model-joints", "joint count (bench only; datasets carry their own)",
        [](RunConfig& c) -> std::size_t& { return c.model.V; });
    reg("model-classes", "class count (bench only; datasets carry their own)",
        [](RunConfig& c) -> std::size_t& { return c.model.num_classes; });

    reg("epochs", "training epochs",
        [](RunConfig& c) -> int& { return c.train.epochs; });
    reg("batch", "training batch size",
        [](RunConfig& c) -> std::size_t& { return c.train.batch_size; });
    reg("base-lr", "peak learning rate",
        [](RunConfig& c) -> double& { return c.train.base_lr; });
    reg("min-lr", "cosine floor learning rate",
        [](RunConfig& c) -> double& { return c.train.min_lr; });
    reg("warmup-start-lr", "learning rate at epoch 0",
        [](RunConfig& c) -> double& { return c.train.warmup_start_lr; });
    reg("warmup-epochs", "linear warmup length",
        [](RunConfig& c) -> int& { return c.train.warmup_epochs; });
    reg("cosine-cycles", "cosine restarts after warmup",
        [](RunConfig& c) -> int& { return c.train.cosine_cycles; });
    reg("weight-decay", "decoupled weight decay",
        [](RunConfig& c) -> double& { return c.train.weight_decay; });
    reg("beta1", "first-moment decay",
        [](RunConfig& c) -> double& { return c.train.beta1; });
    reg("beta2", "second-moment decay",
        [](RunConfig& c) -> double& { return c.train.beta2; });
    reg("adam-eps", "optimiser epsilon",
        [](RunConfig& c) -> double& { return c.train.adam_eps; });
    reg("grad-clip", "max gradient norm, 0 disables",
        [](RunConfig& c) -> double& { return c.train.grad_clip; });
    reg("seed", "run seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; });

    reg_flag("aug-affine", "random rotate/scale/translate during training",
             [](RunConfig& c) -> bool& { return c.augment.affine; });
    reg_flag("aug-jitter", "random frame index jitter during training",
             [](RunConfig& c) -> bool& { return c.augment.jitter; });
    reg("rot-deg", "max augmentation rotation in degrees",
        [](RunConfig& c) -> double& { return c.augment.rot_deg; });
    reg("scale-lo", "augmentation scale lower bound",
        [](RunConfig& c) -> double& { return c.augment.scale_lo; });
    reg("scale-hi", "augmentation scale upper bound",
        [](RunConfig& c) -> double& { return c.augment.scale_hi; });
    reg("trans-range", "max augmentation translation",
        [](RunConfig& c) -> double& { return c.augment.trans_range; });
    reg("max-jitter", "max frame index jitter",
        [](RunConfig& c) -> int& { return c.augment.max_jitter; });
    reg_flag("affine-per-frame", "draw a fresh affine per frame instead of per sequence",
             [](RunConfig& c) -> bool& { return c.augment.affine_per_frame; });

    reg("classes", "synthetic class count",
        [](RunConfig& c) -> std::size_t& { return c.synth.classes; });
    reg("per-class", "synthetic samples per class",
        [](RunConfig& c) -> std::size_t& { return c.synth.per_class; });
    reg("joints", "synthetic joint count",
        [](RunConfig& c) -> std::size_t& { return c.synth.joints; });
    reg("raw-len", "synthetic raw sequence length",
        [](RunConfig& c) -> std::size_t& { return c.synth.raw_len; });
    reg("body-groups", "synthetic body groups, 0 picks from class count",
        [](RunConfig& c) -> std::size_t& { return c.synth.body_groups; });
    reg("amplitude", "synthetic motion amplitude",
        [](RunConfig& c) -> double& { return c.synth.amplitude; });
    reg("noise", "synthetic coordinate noise sigma",
        [](RunConfig& c) -> double& { return c.synth.noise_sigma; });
    reg("similarity", "0 separated classes, 1 nearly identical",
        [](RunConfig& c) -> double& { return c.synth.similarity; });

    reg("train-frac", "train split fraction",
        [](RunConfig& c) -> double& { return c.train_frac; });
    reg("val-frac", "validation split fraction",
        [](RunConfig& c) -> double& { return c.val_frac; });
    reg("stop-train-top1", "stop once train top-1 reaches this, 0 disables",
        [](RunConfig& c) -> double& { return c.stop_train_top1; });
    reg("eval-batch", "evaluation batch size, 0 uses training batch",
        [](RunConfig& c) -> std::size_t& { return c.eval_batch; });
    reg("threads", "batch assembly workers, 0 defers to MMN_NUM_THREADS",
        [](RunConfig& c) -> std::size_t& { return c.num_threads; });
}

void ConfigBinder::apply_file(RunConfig& resolved, const std::string& path) const {
    std::ifstream in(path);
    if (!in) throw mmn::ConfigError("config: cannot open " + path);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos)
            throw mmn::ConfigError("config: " + path + ":" + std::to_string(line_no) +
                                   ": expected key=value");
        const std::string key = trim(stripped.substr(0, eq));
        const std::string value = trim(stripped.substr(eq + 1));
        const auto it = std::find_if(fields_.begin(), fields_.end(),
                                     [&](const Field& f) { return f.key == key; });
        if (it == fields_.end())
            throw mmn::ConfigError("config: " + path + ":" + std::to_string(line_no) +
                                   ": unknown key '" + key + "'");
        it->parse(resolved, value);
    }
}

void ConfigBinder::apply_preset(RunConfig& resolved, const std::string& preset) const {
    auto heads = [&](bool msm, bool mtm) {
        resolved.model.msm_enabled = msm;
        resolved.model.mtm_enabled = mtm;
    };
    auto strat = [&](const std::string& s) {
        resolved.model.msm_enabled = true;
        resolved.model.mtm_enabled = true;
        resolved.strategy = s;
    };
    auto aug = [&](bool affine, bool jitter) {
        resolved.augment.affine = affine;
        resolved.augment.jitter = jitter;
    };
    if (preset == "A1") heads(false, false);
    else if (preset == "A2") heads(true, false);
    else if (preset == "A3") heads(false, true);
    else if (preset == "A4") heads(true, true);
    else if (preset == "B1") strat("no_scale");
    else if (preset == "B2") strat("no_shift");
    else if (preset == "B3") strat("add");
    else if (preset == "B4") strat("concat");
    else if (preset == "B5") strat("hadamard");
    else if (preset == "C1") aug(false, false);
    else if (preset == "C2") aug(true, false);
    else if (preset == "C3") aug(false, true);
    else if (preset == "C4") aug(true, true);
    else
        throw mmn::ConfigError("unknown preset '" + preset +
                               "' (expected A1-A4, B1-B5 or C1-C4)");
}

void ConfigBinder::resolve(RunConfig& resolved) const {
    if (config_opt_->count() > 0) {
        resolved.config_file = staged_->config_file;
        apply_file(resolved, resolved.config_file);
    }
    if (preset_opt_->count() > 0) {
        resolved.preset = staged_->preset;
        apply_preset(resolved, resolved.preset);
    }
    for (const Field& f : fields_)
        if (f.opt->count() > 0) f.copy(resolved, *staged_);
    resolved.model.strategy = mmn::parse_strategy(resolved.strategy);
}

void write_resolved_config(const std::string& path, const RunConfig& cfg) {
    std::map<std::string, std::string> kv;
    auto put = [&](const std::string& k, const auto& v) {
        if constexpr (std::is_same_v<std::decay_t<decltype(v)>, std::string>) {
            kv[k] = v;
        } else if constexpr (std::is_same_v<std::decay_t<decltype(v)>, bool>) {
            kv[k] = v ? "true" : "false";
        } else if constexpr (std::is_floating_point_v<std::decay_t<decltype(v)>>) {
            std::ostringstream ss;
            ss.precision(17);
            ss << v;
            kv[k] = ss.str();
        } else {
            kv[k] = std::to_string(v);
        }
    };
    put("frames", cfg.model.T);
    put("model-joints", cfg.model.V);
    put("in-channels", cfg.model.C_in);
    put("channels", cfg.model.C);
    put("blocks", cfg.model.blocks_per_stage);
    put("stages", cfg.model.stages);
    put("model-classes", cfg.model.num_classes);
    put("tconv-kernel", cfg.model.tconv_kernel);
    put("mtm-kernel", cfg.model.mtm_kernel);
    put("ffn-expansion", cfg.model.ffn_expansion);
    put("dropout", cfg.model.dropout);
    put("ln-eps", cfg.model.ln_eps);
    put("bn-eps", cfg.model.bn_eps);
    put("bn-momentum", cfg.model.bn_momentum);
    put("mod-eps", cfg.model.mod_eps);
    put("strategy", mmn::strategy_name(cfg.model.strategy));
    put("msm", cfg.model.msm_enabled);
    put("mtm", cfg.model.mtm_enabled);
    put("shared-tconv-mod-source", cfg.model.shared_tconv_mod_source);
    put("epochs", cfg.train.epochs);
    put("batch", cfg.train.batch_size);
    put("base-lr", cfg.train.base_lr);
    put("min-lr", cfg.train.min_lr);
    put("warmup-start-lr", cfg.train.warmup_start_lr);
    put("warmup-epochs", cfg.train.warmup_epochs);
    put("cosine-cycles", cfg.train.cosine_cycles);
    put("weight-decay", cfg.train.weight_decay);
    put("beta1", cfg.train.beta1);
    put("beta2", cfg.train.beta2);
    put("adam-eps", cfg.train.adam_eps);
    put("grad-clip", cfg.train.grad_clip);
    put("seed", cfg.train.seed);
    put("aug-affine", cfg.augment.affine);
    put("aug-jitter", cfg.augment.jitter);
    put("rot-deg", cfg.augment.rot_deg);
    put("scale-lo", cfg.augment.scale_lo);
    put("scale-hi", cfg.augment.scale_hi);
    put("trans-range", cfg.augment.trans_range);
    put("max-jitter", cfg.augment.max_jitter);
    put("affine-per-frame", cfg.augment.affine_per_frame);
    put("classes", cfg.synth.classes);
    put("per-class", cfg.synth.per_class);
    put("joints", cfg.synth.joints);
    put("raw-len", cfg.synth.raw_len);
    put("body-groups", cfg.synth.body_groups);
    put("amplitude", cfg.synth.amplitude);
    put("noise", cfg.synth.noise_sigma);
    put("similarity", cfg.synth.similarity);
    put("train-frac", cfg.train_frac);
    put("val-frac", cfg.val_frac);
    put("stop-train-top1", cfg.stop_train_top1);
    put("eval-batch", cfg.eval_batch);
    put("threads", cfg.num_threads);
    if (!cfg.preset.empty()) put("preset", cfg.preset);
    if (!cfg.dataset_dir.empty()) put("dataset", cfg.dataset_dir);
    if (!cfg.checkpoint.empty()) put("checkpoint", cfg.checkpoint);
    if (!cfg.split.empty()) put("split", cfg.split);

    std::ofstream out(path);
    if (!out) throw mmn::ParseError("cannot write resolved config to " + path);
    for (const auto& [k, v] : kv) out << k << "=" << v << "\n";
}

} // namespace mmncli
