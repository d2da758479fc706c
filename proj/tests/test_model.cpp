#include "doctest.h"
#include "test_util.hpp"

#include <mmn/checkpoint.hpp>
#include <mmn/errors.hpp>
#include <mmn/model.hpp>
#include <mmn/ops.hpp>
#include <mmn/rng.hpp>
#include <mmn/tensor.hpp>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <set>

using namespace mmn;
using mmntest::fresh_dir;

namespace {

ModelConfig tiny_config() {
    ModelConfig mc;
    mc.T = 16;
    mc.V = 5;
    mc.C_in = 2;
    mc.C = 8;
    mc.blocks_per_stage = 1;
    mc.stages = 2;
    mc.num_classes = 3;
    mc.tconv_kernel = 3;
    mc.mtm_kernel = 3;
    mc.ffn_expansion = 2;
    mc.dropout = 0.0;
    return mc;
}

Tensor rand_t(Shape shape, std::uint64_t key, double lo = -1.0, double hi = 1.0) {
    auto rng = make_rng(42, key);
    return Tensor::uniform(std::move(shape), rng, lo, hi, false);
}

bool same_values(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && a.values() == b.values();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
    return m;
}

// Identity-topped recombination map for the concat strategy: picks the
// standardized branch and ignores the factor lanes.
layers::Linear identity_mix(std::size_t width) {
    layers::Linear mix;
    mix.W = Tensor::zeros({3 * width, width});
    for (std::size_t i = 0; i < width; ++i) mix.W.at({i, i}) = 1.0;
    mix.b = Tensor::zeros({width});
    return mix;
}

} // namespace

TEST_CASE("time encoding spans [-1,1] with sin/cos channel pairs") {
    SUBCASE("single frame sits at position zero") {
        Tensor te = MmnModel::time_encoding(1, 6);
        for (std::size_t c = 0; c < 6; ++c)
            CHECK(te.at({0, c}) == (c % 2 == 0 ? 0.0 : 1.0));
    }
    SUBCASE("first channel pair uses unit frequency at the endpoints") {
        Tensor te = MmnModel::time_encoding(5, 4);
        CHECK(te.at({0, 0}) == doctest::Approx(std::sin(-1.0)).epsilon(1e-12));
        CHECK(te.at({0, 1}) == doctest::Approx(std::cos(-1.0)).epsilon(1e-12));
        CHECK(te.at({2, 0}) == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(te.at({4, 0}) == doctest::Approx(std::sin(1.0)).epsilon(1e-12));
        for (double v : te.values()) {
            CHECK(v >= -1.0);
            CHECK(v <= 1.0);
        }
    }
    SUBCASE("higher channel pairs oscillate slower") {
        Tensor te = MmnModel::time_encoding(9, 8);
        // omega = 10000^(-2k/C) shrinks with k, so the last-frame sine
        // value sin(omega) shrinks too.
        double prev = 2.0;
        for (std::size_t k = 0; k < 4; ++k) {
            const double v = te.at({8, 2 * k});
            CHECK(v > 0.0);
            CHECK(v < prev);
            prev = v;
        }
    }
}

TEST_CASE("skate embedding is a per-channel outer product") {
    Tensor te = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor se = Tensor::from_values({2, 3}, {10, 20, 30, 40, 50, 60});
    Tensor out = ops::skate_embed(te, se);
    REQUIRE(out.shape() == Shape{2, 2, 3});
    for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t v = 0; v < 2; ++v)
            for (std::size_t c = 0; c < 3; ++c)
                CHECK(out.at({t, v, c}) == te.at({t, c}) * se.at({v, c}));

    SUBCASE("unit joint profile reproduces the time table") {
        Tensor ones = Tensor::full({4, 3}, 1.0);
        Tensor tt = MmnModel::time_encoding(6, 3);
        Tensor e = ops::skate_embed(tt, ones);
        for (std::size_t t = 0; t < 6; ++t)
            for (std::size_t v = 0; v < 4; ++v)
                for (std::size_t c = 0; c < 3; ++c) CHECK(e.at({t, v, c}) == tt.at({t, c}));
    }
    SUBCASE("every channel slice has rank one") {
        const std::size_t T = 16, V = 7, C = 4;
        Tensor tt = MmnModel::time_encoding(T, C);
        Tensor sp = rand_t({V, C}, hash_str("skate_se"), 0.5, 1.5);
        Tensor e = ops::skate_embed(tt, sp);
        for (std::size_t c = 0; c < C; ++c) {
            Eigen::MatrixXd slice(T, V);
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t v = 0; v < V; ++v) slice(t, v) = e.at({t, v, c});
            Eigen::JacobiSVD<Eigen::MatrixXd> svd(slice);
            const auto& s = svd.singularValues();
            if (s(0) > 0.0) CHECK(s(1) < 1e-10 * s(0));
        }
    }
    SUBCASE("mismatched channel counts are rejected") {
        CHECK_THROWS_AS(ops::skate_embed(Tensor::zeros({2, 3}), Tensor::zeros({2, 4})),
                        DimensionError);
    }
}

TEST_CASE("graph convolution mixes joints through the adjacency") {
    const std::size_t V = 4, C = 3;
    Tensor x = rand_t({1, 2, V, C}, hash_str("gconv_x"));

    SUBCASE("identity adjacency and weight reduce to GELU") {
        layers::GraphConv g;
        g.A = Tensor::zeros({V, V});
        g.W = Tensor::zeros({C, C});
        for (std::size_t v = 0; v < V; ++v) g.A.at({v, v}) = 1.0;
        for (std::size_t c = 0; c < C; ++c) g.W.at({c, c}) = 1.0;
        CHECK(max_abs_diff(g.forward(x), ops::gelu(x)) == 0.0);
    }
    SUBCASE("uniform rows average the joints") {
        layers::GraphConv g;
        g.A = Tensor::full({V, V}, 1.0 / static_cast<double>(V));
        g.W = Tensor::zeros({C, C});
        for (std::size_t c = 0; c < C; ++c) g.W.at({c, c}) = 1.0;
        Tensor out = g.forward(x);
        for (std::size_t t = 0; t < 2; ++t)
            for (std::size_t c = 0; c < C; ++c) {
                double mean = 0.0;
                for (std::size_t v = 0; v < V; ++v) mean += x.at({0, t, v, c});
                mean /= static_cast<double>(V);
                // GELU of the joint mean, identical across joints.
                const double want = ops::gelu(Tensor::scalar_tensor(mean)).item();
                for (std::size_t v = 0; v < V; ++v)
                    CHECK(out.at({0, t, v, c}) == doctest::Approx(want).epsilon(1e-12));
            }
    }
    SUBCASE("permuting joints and conjugating the adjacency commutes") {
        layers::GraphConv g;
        g.A = rand_t({V, V}, hash_str("gconv_A"));
        g.W = rand_t({C, C}, hash_str("gconv_W"));
        const std::size_t perm[V] = {2, 0, 3, 1};

        layers::GraphConv gp;
        gp.W = g.W;
        gp.A = Tensor::zeros({V, V});
        for (std::size_t v = 0; v < V; ++v)
            for (std::size_t u = 0; u < V; ++u) gp.A.at({v, u}) = g.A.at({perm[v], perm[u]});
        Tensor xp = Tensor::zeros(x.shape());
        for (std::size_t t = 0; t < 2; ++t)
            for (std::size_t v = 0; v < V; ++v)
                for (std::size_t c = 0; c < C; ++c) xp.at({0, t, v, c}) = x.at({0, t, perm[v], c});

        Tensor out = g.forward(x);
        Tensor outp = gp.forward(xp);
        for (std::size_t t = 0; t < 2; ++t)
            for (std::size_t v = 0; v < V; ++v)
                for (std::size_t c = 0; c < C; ++c)
                    CHECK(outp.at({0, t, v, c}) ==
                          doctest::Approx(out.at({0, t, perm[v], c})).epsilon(1e-12));
    }
}

TEST_CASE("per-channel standardization centres and scales over time and joints") {
    Tensor x = rand_t({2, 6, 4, 3}, hash_str("std_x"), -2.0, 5.0);
    Tensor z = ops::standardize_tv(x, 1e-12);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < 3; ++c) {
            double mean = 0.0, sq = 0.0;
            for (std::size_t t = 0; t < 6; ++t)
                for (std::size_t v = 0; v < 4; ++v) {
                    mean += z.at({b, t, v, c});
                    sq += z.at({b, t, v, c}) * z.at({b, t, v, c});
                }
            mean /= 24.0;
            const double var = sq / 24.0 - mean * mean;
            CHECK(std::abs(mean) < 1e-12);
            CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-9);
        }

    SUBCASE("constant channels collapse to zero") {
        Tensor cst = Tensor::full({1, 3, 2, 2}, 7.5);
        Tensor zc = ops::standardize_tv(cst, 1e-5);
        for (double v : zc.values()) CHECK(v == 0.0);
    }
}

TEST_CASE("modulation strategies implement their algebra") {
    const std::size_t W = 3;
    Tensor branch = rand_t({2, 4, 2, W}, hash_str("mod_branch"), -3.0, 3.0);
    Tensor xhat = ops::standardize_tv(branch, 1e-5);
    Tensor gamma = rand_t(branch.shape(), hash_str("mod_gamma"));
    Tensor beta = rand_t(branch.shape(), hash_str("mod_beta"));
    Tensor zeros = Tensor::zeros(branch.shape());

    SUBCASE("zero factors reduce the full form to plain standardization") {
        Tensor out = modulate(branch, zeros, zeros, ModulationStrategy::modulate, 1e-5);
        CHECK(same_values(out, xhat));
    }
    SUBCASE("gamma = -1 erases the branch and returns the shift") {
        Tensor minus = Tensor::full(branch.shape(), -1.0);
        Tensor out = modulate(branch, minus, beta, ModulationStrategy::modulate, 1e-5);
        CHECK(max_abs_diff(out, beta) == 0.0);
    }
    SUBCASE("reduced variants drop the advertised factor") {
        Tensor ns = modulate(branch, gamma, beta, ModulationStrategy::no_scale, 1e-5);
        Tensor nf = modulate(branch, gamma, beta, ModulationStrategy::no_shift, 1e-5);
        Tensor ad = modulate(branch, gamma, beta, ModulationStrategy::add, 1e-5);
        Tensor hd = modulate(branch, gamma, beta, ModulationStrategy::hadamard, 1e-5);
        for (std::size_t i = 0; i < branch.numel(); ++i) {
            const double xv = xhat.values()[i];
            const double gv = gamma.values()[i];
            const double bv = beta.values()[i];
            CHECK(ns.values()[i] == doctest::Approx(xv + bv).epsilon(1e-12));
            CHECK(nf.values()[i] == doctest::Approx(xv * (1.0 + gv)).epsilon(1e-12));
            CHECK(ad.values()[i] == doctest::Approx(xv + gv + bv).epsilon(1e-12));
            CHECK(hd.values()[i] == doctest::Approx(xv * gv).epsilon(1e-12));
        }
    }
    SUBCASE("concat needs a recombination map and starts at identity") {
        CHECK_THROWS_AS(modulate(branch, gamma, beta, ModulationStrategy::concat, 1e-5),
                        ConfigError);
        layers::Linear mix = identity_mix(W);
        Tensor out = modulate(branch, gamma, beta, ModulationStrategy::concat, 1e-5, &mix);
        CHECK(max_abs_diff(out, xhat) < 1e-12);
    }
    SUBCASE("strategy names round trip") {
        for (auto s : {ModulationStrategy::modulate, ModulationStrategy::no_scale,
                       ModulationStrategy::no_shift, ModulationStrategy::add,
                       ModulationStrategy::concat, ModulationStrategy::hadamard})
            CHECK(parse_strategy(strategy_name(s)) == s);
        CHECK_THROWS_AS(parse_strategy("bogus"), ConfigError);
    }
}

TEST_CASE("modulation heads produce bounded factors and vanish on still input") {
    MmnModel model(tiny_config(), 3);
    const std::size_t Ch = tiny_config().C / 2;

    SUBCASE("zero motion yields exactly zero factors in every block") {
        for (auto& stage : model.blocks())
            for (auto& block : stage) {
                for (layers::ModulationHead* head : {&block.msm, &block.mtm}) {
                    head->bn.reset(Ch);
                    head->bn.initialized = true;
                    Tensor still = Tensor::zeros({2, 8, tiny_config().V, Ch});
                    auto [gamma, beta] = head->forward(still, false);
                    for (double v : gamma.values()) CHECK(v == 0.0);
                    for (double v : beta.values()) CHECK(v == 0.0);
                }
            }
    }
    SUBCASE("random motion keeps factors inside (-1, 1)") {
        auto& block = model.blocks()[0][0];
        Tensor motion = rand_t({2, 8, tiny_config().V, Ch}, hash_str("head_motion"), -4.0, 4.0);
        for (layers::ModulationHead* head : {&block.msm, &block.mtm}) {
            head->bn.reset(Ch);
            head->bn.initialized = true;
            auto [gamma, beta] = head->forward(motion, false);
            CHECK(gamma.shape().back() == Ch / 2);
            CHECK(beta.shape().back() == Ch / 2);
            for (double v : gamma.values()) {
                CHECK(v > -1.0);
                CHECK(v < 1.0);
            }
            bool any = false;
            for (double v : gamma.values()) any = any || v != 0.0;
            CHECK(any);
        }
    }
}

TEST_CASE("temporal modulation head commutes with an interior time shift") {
    ModelConfig mc = tiny_config();
    MmnModel model(mc, 5);
    layers::ModulationHead& head = model.blocks()[0][0].mtm;
    const std::size_t Ch = mc.C / 2;
    head.bn.reset(Ch);
    head.bn.initialized = true;

    const std::size_t T = 16;
    Tensor bump = Tensor::zeros({1, T, mc.V, Ch});
    Tensor shifted = Tensor::zeros({1, T, mc.V, Ch});
    auto rng = make_rng(17, hash_str("mtm_bump"));
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    for (std::size_t v = 0; v < mc.V; ++v)
        for (std::size_t c = 0; c < Ch; ++c) {
            const double val = d(rng);
            bump.at({0, 5, v, c}) = val;
            shifted.at({0, 7, v, c}) = val;
        }

    auto [ga, ba] = head.forward(bump, false);
    auto [gb, bb] = head.forward(shifted, false);
    // The 3x3 kernel is zero-padded, so equality holds wherever neither
    // receptive field touches the first or last frame.
    for (std::size_t t = 1; t + 3 < T; ++t)
        for (std::size_t v = 0; v < mc.V; ++v)
            for (std::size_t c = 0; c < Ch / 2; ++c) {
                CHECK(ga.at({0, t, v, c}) ==
                      doctest::Approx(gb.at({0, t + 2, v, c})).epsilon(1e-12));
                CHECK(ba.at({0, t, v, c}) ==
                      doctest::Approx(bb.at({0, t + 2, v, c})).epsilon(1e-12));
            }
}

TEST_CASE("model forward produces logits and halves time between stages") {
    ModelConfig mc = tiny_config();
    MmnModel model(mc, 1);
    for (auto& bn : model.named_bn_states()) bn.state->initialized = true;
    Tensor x = rand_t({2, mc.T, mc.V, mc.C_in}, hash_str("fwd_x"));

    std::vector<FeatureMapRecord> maps;
    ForwardCtx ctx;
    ctx.capture = &maps;
    Tensor logits = model.forward(x, ctx);

    REQUIRE(logits.shape() == Shape{2, mc.num_classes});
    CHECK(logits.all_finite());

    SUBCASE("capture sees one record per block with halving frame counts") {
        REQUIRE(maps.size() == mc.stages * mc.blocks_per_stage);
        std::size_t want_T = mc.T;
        std::size_t i = 0;
        for (std::size_t s = 0; s < mc.stages; ++s) {
            for (std::size_t b = 0; b < mc.blocks_per_stage; ++b, ++i) {
                CHECK(maps[i].stage == s);
                CHECK(maps[i].block == b);
                REQUIRE(maps[i].value.rank() == 4);
                CHECK(maps[i].value.dim(1) == want_T);
                CHECK(maps[i].value.dim(2) == mc.V);
                CHECK(maps[i].value.dim(3) == mc.C);
            }
            want_T /= 2;
        }
        CHECK(mc.final_T() == mc.T / 2);
    }
    SUBCASE("eval forward is deterministic") {
        ForwardCtx c2;
        Tensor again = model.forward(x, c2);
        CHECK(same_values(again, logits));
    }
    SUBCASE("duplicating a sample in the batch leaves its logits unchanged") {
        Tensor dup = Tensor::zeros({4, mc.T, mc.V, mc.C_in});
        const std::size_t n = x.numel() / 2;
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t i = 0; i < n; ++i) {
                dup.values()[b * n + i] = x.values()[b * n + i];
                dup.values()[(b + 2) * n + i] = x.values()[b * n + i];
            }
        ForwardCtx c3;
        Tensor ld = model.forward(dup, c3);
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t k = 0; k < mc.num_classes; ++k) {
                CHECK(ld.at({b, k}) == logits.at({b, k}));
                CHECK(ld.at({b + 2, k}) == logits.at({b, k}));
            }
    }
    SUBCASE("block output keeps the input shape") {
        ForwardCtx c4;
        Tensor h = rand_t({2, 8, mc.V, mc.C}, hash_str("block_x"));
        Tensor out = model.blocks()[1][0].forward(h, mc, c4, 1, 0);
        CHECK(out.shape() == h.shape());
    }
}

TEST_CASE("model forward validates its input") {
    ModelConfig mc = tiny_config();
    MmnModel model(mc, 1);
    ForwardCtx ctx;

    CHECK_THROWS_AS(model.forward(Tensor::zeros({mc.T, mc.V, mc.C_in}), ctx), DimensionError);
    CHECK_THROWS_AS(model.forward(Tensor::zeros({1, mc.T, mc.V + 1, mc.C_in}), ctx),
                    DimensionError);
    CHECK_THROWS_AS(model.forward(Tensor::zeros({1, mc.T + 1, mc.V, mc.C_in}), ctx),
                    DimensionError);

    SUBCASE("training dropout needs an RNG") {
        ModelConfig md = mc;
        md.dropout = 0.2;
        MmnModel m2(md, 1);
        ForwardCtx train_ctx;
        train_ctx.training = true;
        CHECK_THROWS_AS(m2.forward(Tensor::zeros({1, md.T, md.V, md.C_in}), train_ctx),
                        ConfigError);
    }
}

TEST_CASE("model config validation rejects inconsistent geometry") {
    ModelConfig mc = tiny_config();
    CHECK_NOTHROW(mc.validate());

    ModelConfig bad = mc;
    bad.C = 10; // not a multiple of 4
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = mc;
    bad.T = 12;
    bad.stages = 4; // 12 not divisible by 8
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = mc;
    bad.tconv_kernel = 4;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = mc;
    bad.mtm_kernel = 2;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = mc;
    bad.dropout = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = mc;
    bad.stages = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = mc;
    bad.num_classes = 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("parameter inventory is unique, complete, and priced") {
    ModelConfig mc = tiny_config();
    MmnModel model(mc, 1);
    auto params = model.named_parameters();

    std::set<std::string> names;
    std::size_t total = 0;
    for (const auto& p : params) {
        CHECK(names.insert(p.name).second);
        total += p.tensor.numel();
    }
    CHECK(model.cost().params == total);
    CHECK(model.cost().macs > 0.0);

    SUBCASE("the FFN expands by the configured factor") {
        bool found = false;
        for (const auto& p : params)
            if (p.name.find("ffn.W1") != std::string::npos) {
                found = true;
                CHECK(p.tensor.dim(0) == mc.C);
                CHECK(p.tensor.dim(1) == mc.C * mc.ffn_expansion);
            }
        CHECK(found);
    }
    SUBCASE("disabling a modulation head removes its parameters") {
        ModelConfig no_msm = mc;
        no_msm.msm_enabled = false;
        ModelConfig no_mtm = mc;
        no_mtm.mtm_enabled = false;
        CHECK(MmnModel(no_msm, 1).cost().params < total);
        CHECK(MmnModel(no_mtm, 1).cost().params < total);
    }
    SUBCASE("batch norm buffers are tracked separately") {
        auto bns = model.named_bn_states();
        CHECK(bns.size() == 2 * mc.stages * mc.blocks_per_stage);
        std::set<std::string> bn_names;
        for (const auto& s : bns) CHECK(bn_names.insert(s.name).second);
    }
}

TEST_CASE("checkpoint round trip reproduces the logits bit for bit") {
    const std::string dir = fresh_dir("model_ckpt");
    ModelConfig mc = tiny_config();
    MmnModel model(mc, 21);
    Tensor x = rand_t({3, mc.T, mc.V, mc.C_in}, hash_str("ckpt_x"));

    // Mark the untouched batch-norm buffers usable so the eval forward has
    // running statistics to read.
    for (auto& bn : model.named_bn_states()) bn.state->initialized = true;
    ForwardCtx ctx;
    Tensor before = model.forward(x, ctx);

    Checkpoint ckpt;
    store_model(ckpt, model);
    write_checkpoint(dir + "/model.ckpt", ckpt);
    Checkpoint back = read_checkpoint(dir + "/model.ckpt");

    SUBCASE("rebuild from the manifest alone") {
        MmnModel redo = model_from_checkpoint(back);
        ForwardCtx c2;
        Tensor after = redo.forward(x, c2);
        CHECK(same_values(after, before));
    }
    SUBCASE("load into a differently initialized twin") {
        MmnModel twin(mc, 999);
        load_model(twin, back);
        ForwardCtx c2;
        Tensor after = twin.forward(x, c2);
        CHECK(same_values(after, before));
    }
    SUBCASE("architecture mismatches are rejected") {
        ModelConfig other = mc;
        other.C = 12;
        MmnModel wrong(other, 1);
        CHECK_THROWS_AS(load_model(wrong, back), ConfigError);
    }
    SUBCASE("missing tensors are rejected") {
        Checkpoint pruned = back;
        pruned.tensors.erase(pruned.tensors.begin());
        MmnModel twin(mc, 999);
        CHECK_THROWS_AS(load_model(twin, pruned), ParseError);
    }
}
