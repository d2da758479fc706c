#include "mmn/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "mmn/errors.hpp"

namespace mmn {

namespace {

constexpr const char* kMagic = "MMNCKPT1";

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

[[noreturn]] void bad(const std::string& path, const std::string& what) {
    throw ParseError("checkpoint " + path + ": " + what);
}

void write_kv_section(std::ofstream& out, const char* title,
                      const std::map<std::string, std::string>& kv) {
    out << title << " " << kv.size() << "\n";
    for (const auto& [k, v] : kv) out << k << "=" << v << "\n";
}

std::map<std::string, std::string> read_kv_section(std::istream& in, const std::string& path,
                                                   const char* title) {
    std::string line;
    if (!std::getline(in, line)) bad(path, std::string("missing ") + title + " section");
    std::size_t n = 0;
    {
        std::string head;
        std::istringstream ls(line);
        if (!(ls >> head >> n) || head != title)
            bad(path, std::string("expected '") + title + " <count>', got '" + line + "'");
    }
    std::map<std::string, std::string> kv;
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::getline(in, line)) bad(path, std::string("truncated ") + title + " section");
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) bad(path, "malformed entry '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

} // namespace

long Checkpoint::state_long(const std::string& key, long fallback) const {
    auto it = state.find(key);
    return it == state.end() ? fallback : std::stol(it->second);
}

double Checkpoint::state_double(const std::string& key, double fallback) const {
    auto it = state.find(key);
    return it == state.end() ? fallback : std::stod(it->second);
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParseError("cannot open file for writing: " + path);
    out << kMagic << "\n";
    write_kv_section(out, "CONFIG", ckpt.config);
    write_kv_section(out, "STATE", ckpt.state);
    for (const auto& [name, blob] : ckpt.tensors) {
        if (shape_numel(blob.shape) != blob.values.size())
            throw DimensionError("checkpoint: tensor '" + name + "' shape " +
                                 shape_str(blob.shape) + " does not match " +
                                 std::to_string(blob.values.size()) + " values");
        out << "TENSOR " << name << " " << blob.shape.size();
        for (std::size_t d : blob.shape) out << " " << d;
        out << "\n";
        out.write(reinterpret_cast<const char*>(blob.values.data()),
                  static_cast<std::streamsize>(blob.values.size() * sizeof(double)));
        out << "\n";
    }
    out << "END\n";
    if (!out) throw ParseError("write failed: " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open checkpoint: " + path);
    std::string line;
    if (!std::getline(in, line) || line != kMagic) bad(path, "bad magic");

    Checkpoint ckpt;
    ckpt.config = read_kv_section(in, path, "CONFIG");
    ckpt.state = read_kv_section(in, path, "STATE");

    while (std::getline(in, line)) {
        if (line == "END") return ckpt;
        std::istringstream ls(line);
        std::string tag, name;
        std::size_t rank = 0;
        if (!(ls >> tag >> name >> rank) || tag != "TENSOR")
            bad(path, "expected TENSOR or END, got '" + line + "'");
        Checkpoint::Blob blob;
        blob.shape.resize(rank);
        for (std::size_t i = 0; i < rank; ++i)
            if (!(ls >> blob.shape[i])) bad(path, "bad shape for tensor '" + name + "'");
        blob.values.resize(shape_numel(blob.shape));
        in.read(reinterpret_cast<char*>(blob.values.data()),
                static_cast<std::streamsize>(blob.values.size() * sizeof(double)));
        if (in.gcount() != static_cast<std::streamsize>(blob.values.size() * sizeof(double)))
            bad(path, "truncated data for tensor '" + name + "'");
        if (in.get() != '\n') bad(path, "missing terminator after tensor '" + name + "'");
        if (!ckpt.tensors.emplace(name, std::move(blob)).second)
            bad(path, "duplicate tensor '" + name + "'");
    }
    bad(path, "missing END marker");
}

std::map<std::string, std::string> config_to_manifest(const ModelConfig& cfg) {
    std::map<std::string, std::string> m;
    m["T"] = std::to_string(cfg.T);
    m["V"] = std::to_string(cfg.V);
    m["C_in"] = std::to_string(cfg.C_in);
    m["C"] = std::to_string(cfg.C);
    m["blocks_per_stage"] = std::to_string(cfg.blocks_per_stage);
    m["stages"] = std::to_string(cfg.stages);
    m["num_classes"] = std::to_string(cfg.num_classes);
    m["tconv_kernel"] = std::to_string(cfg.tconv_kernel);
    m["mtm_kernel"] = std::to_string(cfg.mtm_kernel);
    m["ffn_expansion"] = std::to_string(cfg.ffn_expansion);
    m["dropout"] = fmt_double(cfg.dropout);
    m["ln_eps"] = fmt_double(cfg.ln_eps);
    m["bn_eps"] = fmt_double(cfg.bn_eps);
    m["bn_momentum"] = fmt_double(cfg.bn_momentum);
    m["mod_eps"] = fmt_double(cfg.mod_eps);
    m["msm_enabled"] = cfg.msm_enabled ? "1" : "0";
    m["mtm_enabled"] = cfg.mtm_enabled ? "1" : "0";
    m["shared_tconv_mod_source"] = cfg.shared_tconv_mod_source ? "1" : "0";
    m["strategy"] = strategy_name(cfg.strategy);
    return m;
}

ModelConfig config_from_manifest(const std::map<std::string, std::string>& manifest) {
    auto need = [&](const char* key) -> const std::string& {
        auto it = manifest.find(key);
        if (it == manifest.end())
            throw ParseError(std::string("checkpoint config missing key '") + key + "'");
        return it->second;
    };
    ModelConfig cfg;
    try {
        cfg.T = std::stoul(need("T"));
        cfg.V = std::stoul(need("V"));
        cfg.C_in = std::stoul(need("C_in"));
        cfg.C = std::stoul(need("C"));
        cfg.blocks_per_stage = std::stoul(need("blocks_per_stage"));
        cfg.stages = std::stoul(need("stages"));
        cfg.num_classes = std::stoul(need("num_classes"));
        cfg.tconv_kernel = std::stoul(need("tconv_kernel"));
        cfg.mtm_kernel = std::stoul(need("mtm_kernel"));
        cfg.ffn_expansion = std::stoul(need("ffn_expansion"));
        cfg.dropout = std::stod(need("dropout"));
        cfg.ln_eps = std::stod(need("ln_eps"));
        cfg.bn_eps = std::stod(need("bn_eps"));
        cfg.bn_momentum = std::stod(need("bn_momentum"));
        cfg.mod_eps = std::stod(need("mod_eps"));
        cfg.msm_enabled = need("msm_enabled") == "1";
        cfg.mtm_enabled = need("mtm_enabled") == "1";
        cfg.shared_tconv_mod_source = need("shared_tconv_mod_source") == "1";
        cfg.strategy = parse_strategy(need("strategy"));
    } catch (const std::invalid_argument&) {
        throw ParseError("checkpoint config: malformed numeric value");
    }
    cfg.validate();
    return cfg;
}

void store_model(Checkpoint& ckpt, MmnModel& model) {
    ckpt.config = config_to_manifest(model.config());
    for (const NamedParam& p : model.named_parameters())
        ckpt.tensors[p.name] = {p.tensor.shape(), p.tensor.values()};
    for (const NamedBnState& bn : model.named_bn_states()) {
        const std::size_t C = bn.state->running_mean.size();
        ckpt.tensors[bn.name + ".mean"] = {{C}, bn.state->running_mean};
        ckpt.tensors[bn.name + ".var"] = {{C}, bn.state->running_var};
        ckpt.state[bn.name + ".init"] = bn.state->initialized ? "1" : "0";
    }
}

void load_model(MmnModel& model, const Checkpoint& ckpt) {
    const ModelConfig stored = config_from_manifest(ckpt.config);
    if (config_to_manifest(stored) != config_to_manifest(model.config()))
        throw ConfigError("checkpoint: stored architecture does not match the model being loaded");
    for (NamedParam& p : model.named_parameters()) {
        auto it = ckpt.tensors.find(p.name);
        if (it == ckpt.tensors.end())
            throw ParseError("checkpoint: missing tensor '" + p.name + "'");
        if (it->second.shape != p.tensor.shape())
            throw DimensionError("checkpoint: tensor '" + p.name + "' has shape " +
                                 shape_str(it->second.shape) + ", expected " +
                                 shape_str(p.tensor.shape()));
        p.tensor.values() = it->second.values;
    }
    for (NamedBnState& bn : model.named_bn_states()) {
        auto mean = ckpt.tensors.find(bn.name + ".mean");
        auto var = ckpt.tensors.find(bn.name + ".var");
        if (mean == ckpt.tensors.end() || var == ckpt.tensors.end())
            throw ParseError("checkpoint: missing batch-norm buffers for '" + bn.name + "'");
        if (mean->second.values.size() != bn.state->running_mean.size())
            throw DimensionError("checkpoint: batch-norm '" + bn.name + "' tracks " +
                                 std::to_string(mean->second.values.size()) +
                                 " channels, expected " +
                                 std::to_string(bn.state->running_mean.size()));
        bn.state->running_mean = mean->second.values;
        bn.state->running_var = var->second.values;
        auto init = ckpt.state.find(bn.name + ".init");
        bn.state->initialized = init != ckpt.state.end() && init->second == "1";
    }
}

MmnModel model_from_checkpoint(const Checkpoint& ckpt) {
    MmnModel model(config_from_manifest(ckpt.config), 0);
    load_model(model, ckpt);
    return model;
}

} // namespace mmn
