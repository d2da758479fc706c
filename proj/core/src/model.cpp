#include "mmn/model.hpp"

#include <cmath>

#include "mmn/errors.hpp"
#include "mmn/rng.hpp"

namespace mmn {

ModulationStrategy parse_strategy(const std::string& name) {
    if (name == "modulate") return ModulationStrategy::modulate;
    if (name == "no_scale") return ModulationStrategy::no_scale;
    if (name == "no_shift") return ModulationStrategy::no_shift;
    if (name == "add") return ModulationStrategy::add;
    if (name == "concat") return ModulationStrategy::concat;
    if (name == "hadamard") return ModulationStrategy::hadamard;
    throw ConfigError("unknown modulation strategy '" + name +
                      "' (expected modulate|no_scale|no_shift|add|concat|hadamard)");
}

std::string strategy_name(ModulationStrategy s) {
    switch (s) {
        case ModulationStrategy::modulate: return "modulate";
        case ModulationStrategy::no_scale: return "no_scale";
        case ModulationStrategy::no_shift: return "no_shift";
        case ModulationStrategy::add: return "add";
        case ModulationStrategy::concat: return "concat";
        case ModulationStrategy::hadamard: return "hadamard";
    }
    throw ConfigError("unknown modulation strategy value");
}

void ModelConfig::validate() const {
    if (C < 4 || C % 4 != 0)
        throw ConfigError("model: C must be a positive multiple of 4, got " + std::to_string(C));
    if (C_in == 0) throw ConfigError("model: C_in must be positive");
    if (V == 0) throw ConfigError("model: V must be positive");
    if (stages == 0) throw ConfigError("model: need at least one stage");
    if (blocks_per_stage == 0) throw ConfigError("model: need at least one block per stage");
    if (num_classes < 2) throw ConfigError("model: need at least 2 classes");
    const std::size_t div = std::size_t{1} << (stages - 1);
    if (T % div != 0 || T / div < 2)
        throw ConfigError("model: T=" + std::to_string(T) + " must be divisible by 2^(stages-1)=" +
                          std::to_string(div) + " with at least 2 frames left");
    if (tconv_kernel % 2 == 0 || mtm_kernel % 2 == 0)
        throw ConfigError("model: conv kernels must be odd");
    if (ffn_expansion == 0) throw ConfigError("model: ffn_expansion must be positive");
    if (dropout < 0.0 || dropout >= 1.0)
        throw ConfigError("model: dropout must be in [0,1), got " + std::to_string(dropout));
    if (ln_eps <= 0.0 || bn_eps <= 0.0 || mod_eps <= 0.0)
        throw ConfigError("model: eps values must be positive");
    if (bn_momentum <= 0.0 || bn_momentum > 1.0)
        throw ConfigError("model: bn_momentum must be in (0,1]");
}

Tensor MmnModel::time_encoding(std::size_t T, std::size_t C) {
    Tensor te = Tensor::zeros({T, C});
    for (std::size_t t = 0; t < T; ++t) {
        const double pos =
            T > 1 ? -1.0 + 2.0 * static_cast<double>(t) / static_cast<double>(T - 1) : 0.0;
        for (std::size_t k = 0; 2 * k < C; ++k) {
            const double omega =
                std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(C));
            te.at({t, 2 * k}) = std::sin(pos * omega);
            if (2 * k + 1 < C) te.at({t, 2 * k + 1}) = std::cos(pos * omega);
        }
    }
    return te;
}

namespace {

double fan_bound(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

Tensor uniform_param(Shape shape, double bound, std::mt19937_64& rng) {
    return Tensor::uniform(std::move(shape), rng, -bound, bound, true);
}

layers::Linear make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng,
                           bool bias = true) {
    layers::Linear l;
    const double b = fan_bound(in);
    l.W = uniform_param({in, out}, b, rng);
    if (bias) l.b = uniform_param({out}, b, rng);
    return l;
}

layers::Linear make_zero_linear(std::size_t in, std::size_t out) {
    layers::Linear l;
    l.W = Tensor::zeros({in, out}, true);
    l.b = Tensor::zeros({out}, true);
    return l;
}

// Recombination map for the concat strategy: identity on the first `out`
// input lanes (the standardized feature) and zero on the factor lanes, so
// the variant starts out equal to plain standardization.
layers::Linear make_concat_mix(std::size_t out) {
    layers::Linear l;
    l.W = Tensor::zeros({3 * out, out}, true);
    for (std::size_t i = 0; i < out; ++i) l.W.at({i, i}) = 1.0;
    l.b = Tensor::zeros({out}, true);
    return l;
}

layers::LayerNorm make_layer_norm(std::size_t C, double eps) {
    layers::LayerNorm ln;
    ln.gain = Tensor::full({C}, 1.0, true);
    ln.bias = Tensor::zeros({C}, true);
    ln.eps = eps;
    return ln;
}

// Learnable adjacency starts near the identity so early training mixes
// joints gently.
layers::GraphConv make_graph_conv(std::size_t V, std::size_t C_in, std::size_t C_out,
                                  std::mt19937_64& rng) {
    layers::GraphConv g;
    g.A = uniform_param({V, V}, 0.01, rng);
    for (std::size_t v = 0; v < V; ++v) g.A.at({v, v}) += 1.0;
    g.W = uniform_param({C_in, C_out}, fan_bound(C_in), rng);
    return g;
}

} // namespace

namespace layers {

std::pair<Tensor, Tensor> ModulationHead::forward(const Tensor& motion, bool training) {
    Tensor z = spatial ? gconv.forward(motion) : ops::conv2d(motion, conv_w);
    z = ops::batch_norm(z, bn, training, bn_momentum, bn_eps);
    z = ops::tanh(z);
    const std::size_t half = z.shape().back() / 2;
    return {ops::slice_last(z, 0, half), ops::slice_last(z, half, 2 * half)};
}

} // namespace layers

MmnModel::MmnModel(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    auto rng = make_rng(init_seed, rng_stream::init);
    const std::size_t C = cfg_.C;
    const std::size_t V = cfg_.V;
    const std::size_t Cq = C / 4;
    const std::size_t Ch = C / 2;
    const std::size_t H = C * cfg_.ffn_expansion;

    te_ = time_encoding(cfg_.T, C);
    // Unit-centred spread keeps the sinusoidal table visible at start while
    // giving each joint its own profile.
    se_ = Tensor::uniform({V, C}, rng, 0.5, 1.5, true);
    proj_[0] = make_linear(cfg_.C_in, C, rng);
    proj_[1] = make_linear(C, C, rng);
    proj_[2] = make_linear(C, C, rng);

    stages_.resize(cfg_.stages);
    for (std::size_t l = 0; l < cfg_.stages; ++l) {
        stages_[l].resize(cfg_.blocks_per_stage);
        for (std::size_t n = 0; n < cfg_.blocks_per_stage; ++n) {
            MstfBlock& b = stages_[l][n];
            b.ln1 = make_layer_norm(C, cfg_.ln_eps);
            b.in_proj = make_linear(C, C, rng);
            b.gconv = make_graph_conv(V, Cq, Cq, rng);
            b.tconv_w = uniform_param({cfg_.tconv_kernel, Cq, Cq},
                                      fan_bound(cfg_.tconv_kernel * Cq), rng);
            b.tconv_b = uniform_param({Cq}, fan_bound(cfg_.tconv_kernel * Cq), rng);
            if (cfg_.msm_enabled) {
                b.msm.spatial = true;
                b.msm.gconv = make_graph_conv(V, Ch, Ch, rng);
                b.msm.bn.reset(Ch);
                b.msm.bn_eps = cfg_.bn_eps;
                b.msm.bn_momentum = cfg_.bn_momentum;
                if (cfg_.strategy == ModulationStrategy::concat)
                    b.msm_mix = make_concat_mix(Cq);
            }
            if (cfg_.mtm_enabled) {
                b.mtm.spatial = false;
                b.mtm.conv_w = uniform_param({cfg_.mtm_kernel, cfg_.mtm_kernel, Ch, Ch},
                                             fan_bound(cfg_.mtm_kernel * cfg_.mtm_kernel * Ch),
                                             rng);
                b.mtm.bn.reset(Ch);
                b.mtm.bn_eps = cfg_.bn_eps;
                b.mtm.bn_momentum = cfg_.bn_momentum;
                if (cfg_.strategy == ModulationStrategy::concat)
                    b.mtm_mix = make_concat_mix(Cq);
            }
            b.gate = make_zero_linear(C, 3);
            b.out_proj = make_linear(C, C, rng);
            b.ln2 = make_layer_norm(C, cfg_.ln_eps);
            b.ffn_w1 = uniform_param({C, H}, fan_bound(C), rng);
            b.ffn_b1 = uniform_param({H}, fan_bound(C), rng);
            b.ffn_w2 = uniform_param({H, C}, fan_bound(H), rng);
            b.ffn_b2 = uniform_param({C}, fan_bound(H), rng);
        }
    }
    fuse_gate_ = make_zero_linear(cfg_.stages * C, cfg_.stages);
    fuse_proj_ = make_linear(cfg_.stages * C, C, rng);
    head_ln_ = make_layer_norm(C, cfg_.ln_eps);
    head_fc_ = make_linear(C, cfg_.num_classes, rng);
}

Tensor modulate(const Tensor& branch, const Tensor& gamma, const Tensor& beta,
                ModulationStrategy strategy, double eps, const layers::Linear* mix) {
    Tensor x = ops::standardize_tv(branch, eps);
    switch (strategy) {
        case ModulationStrategy::modulate:
            return ops::add(ops::mul(x, ops::add_scalar(gamma, 1.0)), beta);
        case ModulationStrategy::no_scale:
            return ops::add(x, beta);
        case ModulationStrategy::no_shift:
            return ops::mul(x, ops::add_scalar(gamma, 1.0));
        case ModulationStrategy::add:
            return ops::add(ops::add(x, gamma), beta);
        case ModulationStrategy::hadamard:
            return ops::mul(x, gamma);
        case ModulationStrategy::concat:
            if (!mix || !mix->W.defined())
                throw ConfigError("modulate: concat strategy needs a recombination map");
            return mix->forward(ops::concat_last({x, gamma, beta}));
    }
    throw ConfigError("unknown modulation strategy value");
}

Tensor MstfBlock::forward(const Tensor& x, const ModelConfig& cfg, ForwardCtx& ctx,
                          std::size_t stage_idx, std::size_t block_idx) {
    const std::size_t C = cfg.C;
    const std::size_t Cq = C / 4;

    Tensor h = ln1.forward(x);
    Tensor xin = in_proj.forward(h);
    Tensor xs = ops::slice_last(xin, 0, Cq);
    Tensor xm = ops::slice_last(xin, Cq, 3 * Cq);
    Tensor xt = ops::slice_last(xin, 3 * Cq, C);

    Tensor xgc = gconv.forward(xs);
    Tensor dx = ops::pad_time_front(ops::temporal_diff(xm), 1);
    Tensor xtc = ops::conv_temporal(xt, tconv_w, tconv_b);

    Tensor skel, temp;
    if (cfg.msm_enabled) {
        auto [gamma, beta] = msm.forward(dx, ctx.training);
        const Tensor& src = cfg.shared_tconv_mod_source ? xtc : xgc;
        skel = modulate(src, gamma, beta, cfg.strategy, cfg.mod_eps, &msm_mix);
    } else {
        skel = ops::standardize_tv(xgc, cfg.mod_eps);
    }
    if (cfg.mtm_enabled) {
        auto [gamma, beta] = mtm.forward(dx, ctx.training);
        temp = modulate(xtc, gamma, beta, cfg.strategy, cfg.mod_eps, &mtm_mix);
    } else {
        temp = ops::standardize_tv(xtc, cfg.mod_eps);
    }

    Tensor desc = ops::concat_last(
        {ops::mean(skel, {1, 2}), ops::mean(dx, {1, 2}), ops::mean(temp, {1, 2})});
    Tensor gv = ops::sigmoid(gate.forward(desc));
    Tensor agg = ops::concat_last({ops::scale_batch(skel, ops::slice_last(gv, 0, 1)),
                                   ops::scale_batch(dx, ops::slice_last(gv, 1, 2)),
                                   ops::scale_batch(temp, ops::slice_last(gv, 2, 3))});
    if (ctx.capture) ctx.capture->push_back({stage_idx, block_idx, agg});

    Tensor z = ops::add(x, out_proj.forward(agg));
    Tensor y = ops::add(z, ops::ffn_inner(ln2.forward(z), ffn_w1, ffn_b1, ffn_w2, ffn_b2,
                                          cfg.dropout, ctx.training, ctx.rng));
    return y;
}

Tensor MmnModel::forward(const Tensor& x, ForwardCtx& ctx) {
    if (!x.defined() || x.rank() != 4)
        throw DimensionError("model: input must be [B,T,V,C_in]");
    if (x.dim(1) != cfg_.T || x.dim(2) != cfg_.V || x.dim(3) != cfg_.C_in)
        throw DimensionError("model: input " + shape_str(x.shape()) + " does not match [B," +
                             std::to_string(cfg_.T) + "," + std::to_string(cfg_.V) + "," +
                             std::to_string(cfg_.C_in) + "]");
    if (ctx.training && cfg_.dropout > 0.0 && !ctx.rng)
        throw ConfigError("model: training forward with dropout needs an rng");

    Tensor h = proj_[2].forward(ops::gelu(proj_[1].forward(ops::gelu(proj_[0].forward(x)))));
    h = ops::add(h, ops::skate_embed(te_, se_));

    std::vector<Tensor> pooled;
    for (std::size_t l = 0; l < cfg_.stages; ++l) {
        if (l > 0) h = ops::downsample_time(h);
        for (std::size_t n = 0; n < cfg_.blocks_per_stage; ++n)
            h = stages_[l][n].forward(h, cfg_, ctx, l, n);
        Tensor y = h;
        for (std::size_t i = l + 1; i < cfg_.stages; ++i) y = ops::downsample_time(y);
        pooled.push_back(y);
    }

    std::vector<Tensor> descs;
    descs.reserve(pooled.size());
    for (const Tensor& y : pooled) descs.push_back(ops::mean(y, {1, 2}));
    Tensor g = ops::sigmoid(fuse_gate_.forward(ops::concat_last(descs)));
    std::vector<Tensor> scaled;
    scaled.reserve(pooled.size());
    for (std::size_t l = 0; l < pooled.size(); ++l)
        scaled.push_back(ops::scale_batch(pooled[l], ops::slice_last(g, l, l + 1)));
    Tensor fused = fuse_proj_.forward(ops::concat_last(scaled));

    Tensor head = ops::mean(head_ln_.forward(fused), {1, 2});
    return head_fc_.forward(head);
}

namespace {

void add_param(std::vector<NamedParam>& out, const std::string& name, const Tensor& t) {
    if (t.defined()) out.push_back({name, t});
}

} // namespace

std::vector<NamedParam> MmnModel::named_parameters() {
    std::vector<NamedParam> out;
    add_param(out, "embed/se", se_);
    for (std::size_t i = 0; i < 3; ++i) {
        add_param(out, "embed/proj." + std::to_string(i) + ".W", proj_[i].W);
        add_param(out, "embed/proj." + std::to_string(i) + ".b", proj_[i].b);
    }
    for (std::size_t l = 0; l < stages_.size(); ++l) {
        for (std::size_t n = 0; n < stages_[l].size(); ++n) {
            MstfBlock& b = stages_[l][n];
            const std::string p =
                "stage." + std::to_string(l) + "/block." + std::to_string(n) + "/";
            add_param(out, p + "ln1.gain", b.ln1.gain);
            add_param(out, p + "ln1.bias", b.ln1.bias);
            add_param(out, p + "in_proj.W", b.in_proj.W);
            add_param(out, p + "in_proj.b", b.in_proj.b);
            add_param(out, p + "gconv.A", b.gconv.A);
            add_param(out, p + "gconv.W", b.gconv.W);
            add_param(out, p + "tconv.W", b.tconv_w);
            add_param(out, p + "tconv.b", b.tconv_b);
            add_param(out, p + "msm/gconv.A", b.msm.gconv.A);
            add_param(out, p + "msm/gconv.W", b.msm.gconv.W);
            add_param(out, p + "msm_mix.W", b.msm_mix.W);
            add_param(out, p + "msm_mix.b", b.msm_mix.b);
            add_param(out, p + "mtm/conv.W", b.mtm.conv_w);
            add_param(out, p + "mtm_mix.W", b.mtm_mix.W);
            add_param(out, p + "mtm_mix.b", b.mtm_mix.b);
            add_param(out, p + "gate.W", b.gate.W);
            add_param(out, p + "gate.b", b.gate.b);
            add_param(out, p + "out_proj.W", b.out_proj.W);
            add_param(out, p + "out_proj.b", b.out_proj.b);
            add_param(out, p + "ln2.gain", b.ln2.gain);
            add_param(out, p + "ln2.bias", b.ln2.bias);
            add_param(out, p + "ffn.W1", b.ffn_w1);
            add_param(out, p + "ffn.b1", b.ffn_b1);
            add_param(out, p + "ffn.W2", b.ffn_w2);
            add_param(out, p + "ffn.b2", b.ffn_b2);
        }
    }
    add_param(out, "fuse/gate.W", fuse_gate_.W);
    add_param(out, "fuse/gate.b", fuse_gate_.b);
    add_param(out, "fuse/proj.W", fuse_proj_.W);
    add_param(out, "fuse/proj.b", fuse_proj_.b);
    add_param(out, "head/ln.gain", head_ln_.gain);
    add_param(out, "head/ln.bias", head_ln_.bias);
    add_param(out, "head/fc.W", head_fc_.W);
    add_param(out, "head/fc.b", head_fc_.b);
    return out;
}

std::vector<NamedBnState> MmnModel::named_bn_states() {
    std::vector<NamedBnState> out;
    for (std::size_t l = 0; l < stages_.size(); ++l)
        for (std::size_t n = 0; n < stages_[l].size(); ++n) {
            MstfBlock& b = stages_[l][n];
            const std::string p =
                "stage." + std::to_string(l) + "/block." + std::to_string(n) + "/";
            if (cfg_.msm_enabled) out.push_back({p + "msm/bn", &b.msm.bn});
            if (cfg_.mtm_enabled) out.push_back({p + "mtm/bn", &b.mtm.bn});
        }
    return out;
}

void MmnModel::zero_grad() {
    for (NamedParam& p : named_parameters()) p.tensor.zero_grad();
}

CostEstimate MmnModel::cost() const {
    const std::size_t C = cfg_.C;
    const std::size_t V = cfg_.V;
    const std::size_t Cq = C / 4;
    const std::size_t Ch = C / 2;
    const std::size_t H = C * cfg_.ffn_expansion;
    const std::size_t L = cfg_.stages;
    const std::size_t K = cfg_.num_classes;
    const bool cat = cfg_.strategy == ModulationStrategy::concat;

    CostEstimate e;
    e.params += V * C;                       // joint table
    e.params += cfg_.C_in * C + C;           // embed projections
    e.params += 2 * (C * C + C);
    double macs = static_cast<double>(cfg_.T * V) *
                  static_cast<double>(cfg_.C_in * C + 2 * C * C);
    macs += static_cast<double>(cfg_.T * V * C); // joint-time table product

    for (std::size_t l = 0; l < L; ++l) {
        const double TV = static_cast<double>((cfg_.T >> l) * V);
        std::size_t block_params = 0;
        double block_macs = 0.0;
        block_params += 2 * C;          // ln1
        block_params += C * C + C;      // in_proj
        block_macs += TV * static_cast<double>(C * C);
        block_params += V * V + Cq * Cq; // gconv
        block_macs += TV * static_cast<double>(V * Cq + Cq * Cq);
        block_params += cfg_.tconv_kernel * Cq * Cq + Cq;
        block_macs += TV * static_cast<double>(cfg_.tconv_kernel * Cq * Cq);
        if (cfg_.msm_enabled) {
            block_params += V * V + Ch * Ch;
            block_macs += TV * static_cast<double>(V * Ch + Ch * Ch);
            if (cat) block_params += 3 * Cq * Cq + Cq;
            if (cat) block_macs += TV * static_cast<double>(3 * Cq * Cq);
        }
        if (cfg_.mtm_enabled) {
            block_params += cfg_.mtm_kernel * cfg_.mtm_kernel * Ch * Ch;
            block_macs += TV * static_cast<double>(cfg_.mtm_kernel * cfg_.mtm_kernel * Ch * Ch);
            if (cat) block_params += 3 * Cq * Cq + Cq;
            if (cat) block_macs += TV * static_cast<double>(3 * Cq * Cq);
        }
        block_params += C * 3 + 3; // gate
        block_macs += static_cast<double>(C * 3);
        block_params += C * C + C; // out_proj
        block_macs += TV * static_cast<double>(C * C);
        block_params += 2 * C; // ln2
        block_params += C * H + H + H * C + C;
        block_macs += TV * static_cast<double>(2 * C * H);
        e.params += cfg_.blocks_per_stage * block_params;
        macs += static_cast<double>(cfg_.blocks_per_stage) * block_macs;
    }

    e.params += L * C * L + L;     // fusion gate
    e.params += L * C * C + C;     // fusion projection
    macs += static_cast<double>(L * C * L);
    macs += static_cast<double>(cfg_.final_T() * V) * static_cast<double>(L * C * C);
    e.params += 2 * C + C * K + K; // head
    macs += static_cast<double>(C * K);
    e.macs = macs;
    return e;
}

} // namespace mmn
