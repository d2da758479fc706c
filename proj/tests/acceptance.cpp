// Acceptance gate: one test case per release criterion, each printing a
// single PASS/FAIL line so the run log doubles as the sign-off record.
#include "doctest.h"
#include "test_util.hpp"

#include <mmn/checkpoint.hpp>
#include <mmn/errors.hpp>
#include <mmn/gradcheck.hpp>
#include <mmn/metrics.hpp>
#include <mmn/model.hpp>
#include <mmn/ops.hpp>
#include <mmn/rng.hpp>
#include <mmn/skeleton_data.hpp>
#include <mmn/training.hpp>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>
#include <sys/wait.h>

using namespace mmn;
using mmntest::fresh_dir;
using mmntest::read_text;

namespace {

void report(const char* name, bool ok, const std::string& detail) {
    std::printf("%s %s - %s\n", name, ok ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ModelConfig tiny_config() {
    ModelConfig mc;
    mc.T = 8;
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

} // namespace

TEST_CASE("A1 numeric gradient checks pass for every differentiable op") {
    const auto t0 = std::chrono::steady_clock::now();
    const auto cases = gradcheck_suite(7);

    bool all_pass = true;
    double worst = 0.0;
    std::string worst_name = "none";
    for (const auto& c : cases) {
        if (!c.report.pass) all_pass = false;
        if (c.report.max_rel_err > worst) {
            worst = c.report.max_rel_err;
            worst_name = c.name;
        }
    }
    const double secs = seconds_since(t0);

    const bool ok = all_pass && worst < 1e-4 && secs < 60.0 && cases.size() >= 20;
    std::ostringstream detail;
    detail << cases.size() << " cases, worst rel err " << worst << " (" << worst_name << ") in "
           << secs << "s";
    report("A1", ok, detail.str());
    CHECK(ok);
}

namespace {

// Counting-rule oracle, restated independently of the library loops.
std::size_t oracle_rank(const std::vector<double>& s, int label) {
    std::size_t r = 0;
    for (std::size_t j = 0; j < s.size(); ++j) {
        if (s[j] > s[static_cast<std::size_t>(label)]) ++r;
        if (s[j] == s[static_cast<std::size_t>(label)] && j < static_cast<std::size_t>(label))
            ++r;
    }
    return r;
}

struct OracleF1 {
    std::vector<double> per_class;
    double macro = 0.0, micro = 0.0;
};

OracleF1 oracle_f1(const std::vector<int>& truth, const std::vector<int>& pred, std::size_t K) {
    std::vector<long> tp(K, 0), fp(K, 0), fn(K, 0);
    std::set<int> touched;
    long correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        touched.insert(truth[i]);
        touched.insert(pred[i]);
        if (truth[i] == pred[i]) {
            ++tp[static_cast<std::size_t>(truth[i])];
            ++correct;
        } else {
            ++fn[static_cast<std::size_t>(truth[i])];
            ++fp[static_cast<std::size_t>(pred[i])];
        }
    }
    OracleF1 r;
    r.per_class.resize(K);
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        const long denom = 2 * tp[k] + fp[k] + fn[k];
        r.per_class[k] = denom > 0 ? 2.0 * static_cast<double>(tp[k]) /
                                         static_cast<double>(denom)
                                   : 0.0;
        if (touched.count(static_cast<int>(k))) sum += r.per_class[k];
    }
    r.macro = sum / static_cast<double>(touched.size());
    r.micro = static_cast<double>(correct) / static_cast<double>(truth.size());
    return r;
}

} // namespace

TEST_CASE("A2 metrics agree with a counting oracle and render the worked example") {
    auto rng = make_rng(2, hash_str("acceptance_metrics"));
    std::uniform_int_distribution<std::size_t> n_dist(5, 40);
    std::uniform_int_distribution<std::size_t> k_dist(2, 9);
    std::uniform_real_distribution<double> score(0.0, 1.0);
    std::uniform_int_distribution<int> coarse(0, 3);

    std::size_t checked = 0;
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = n_dist(rng);
        const std::size_t K = k_dist(rng);
        const bool ties = trial % 2 == 1;
        std::uniform_int_distribution<int> label(0, static_cast<int>(K) - 1);

        PredictionSet ps;
        for (std::size_t i = 0; i < n; ++i) {
            ps.ids.push_back("s" + std::to_string(i));
            ps.labels.push_back(label(rng));
            std::vector<double> row(K);
            for (double& v : row) v = ties ? 0.25 * coarse(rng) : score(rng);
            ps.scores.push_back(std::move(row));
        }

        for (std::size_t k : {std::size_t{1}, std::size_t{3}, std::size_t{5}}) {
            std::size_t hits = 0;
            for (std::size_t i = 0; i < n; ++i)
                if (oracle_rank(ps.scores[i], ps.labels[i]) < k) ++hits;
            const double want = static_cast<double>(hits) / static_cast<double>(n);
            worst = std::max(worst, std::abs(topk_accuracy(ps, k) - want));
        }

        std::vector<int> pred;
        for (const auto& row : ps.scores) pred.push_back(static_cast<int>(argmax_score(row)));
        const F1Result lib = f1_scores(ps.labels, pred, K);
        const OracleF1 ref = oracle_f1(ps.labels, pred, K);
        worst = std::max(worst, std::abs(lib.macro - ref.macro));
        worst = std::max(worst, std::abs(lib.micro - ref.micro));
        for (std::size_t k = 0; k < K; ++k)
            worst = std::max(worst, std::abs(lib.per_class[k] - ref.per_class[k]));

        const auto counts = confusion_matrix(ps);
        long diag = 0, total = 0;
        for (std::size_t t = 0; t < K; ++t)
            for (std::size_t p = 0; p < K; ++p) {
                total += counts[t][p];
                if (t == p) diag += counts[t][p];
            }
        if (total != static_cast<long>(n)) worst = 1.0;
        worst = std::max(worst, std::abs(static_cast<double>(diag) / static_cast<double>(n) -
                                         lib.micro));
        ++checked;
    }

    // The worked rendering example: four F1 components averaging to
    // 0.647275 must print as the percentage 64.73.
    const std::string dir = fresh_dir("acceptance_a2");
    MetricsReport rep;
    rep.f1_macro_action = 0.7125;
    rep.f1_micro_action = 0.7777;
    rep.f1_macro_body = 0.4856;
    rep.f1_micro_body = 0.6133;
    rep.f1_mean = (0.7125 + 0.7777 + 0.4856 + 0.6133) / 4.0;
    write_report_json(dir + "/report.json", rep);
    const bool rendered =
        read_text(dir + "/report.json").find("\"f1_mean\": 64.73") != std::string::npos;

    const bool ok = checked == 1000 && worst < 1e-12 && rendered;
    std::ostringstream detail;
    detail << checked << " random sets, worst oracle gap " << worst << ", 64.73 rendering "
           << (rendered ? "exact" : "wrong");
    report("A2", ok, detail.str());
    CHECK(ok);
}

TEST_CASE("A3 modulation identities hold through real blocks") {
    ModelConfig mc = tiny_config();
    MmnModel model(mc, 3);
    const std::size_t Cq = mc.C / 4;
    const std::size_t Ch = mc.C / 2;
    bool ok = true;
    std::ostringstream detail;

    // Zero factors reduce to plain standardization: feed a block input
    // with no time variation, so the motion signal is exactly zero and
    // both heads emit zero factors.  The captured aggregate then holds
    // 0.5 * standardized branches around an exactly-zero motion lane.
    {
        Tensor h = Tensor::zeros({1, mc.T, mc.V, mc.C});
        auto hr = make_rng(5, hash_str("a3_base"));
        std::uniform_real_distribution<double> d(-2.0, 2.0);
        for (std::size_t v = 0; v < mc.V; ++v)
            for (std::size_t c = 0; c < mc.C; ++c) {
                const double val = d(hr);
                for (std::size_t t = 0; t < mc.T; ++t) h.at({0, t, v, c}) = val;
            }
        std::vector<FeatureMapRecord> maps;
        ForwardCtx ctx;
        ctx.training = true;
        ctx.capture = &maps;
        model.blocks()[0][0].forward(h, model.config(), ctx, 0, 0);

        const Tensor& agg = maps.at(0).value;
        double motion_max = 0.0;
        for (std::size_t t = 0; t < mc.T; ++t)
            for (std::size_t v = 0; v < mc.V; ++v)
                for (std::size_t c = Cq; c < Cq + Ch; ++c)
                    motion_max = std::max(motion_max, std::abs(agg.at({0, t, v, c})));
        if (motion_max != 0.0) {
            ok = false;
            detail << "motion lane not exactly zero (" << motion_max << "); ";
        }

        // Outer lanes, un-gated: per-channel mean 0 and unit spread.
        double worst_mean = 0.0, worst_std = 0.0;
        for (std::size_t c = 0; c < mc.C; ++c) {
            if (c >= Cq && c < Cq + Ch) continue;
            double mean = 0.0, sq = 0.0;
            const double n = static_cast<double>(mc.T * mc.V);
            for (std::size_t t = 0; t < mc.T; ++t)
                for (std::size_t v = 0; v < mc.V; ++v) {
                    const double val = 2.0 * agg.at({0, t, v, c}); // undo the 0.5 gate
                    mean += val;
                    sq += val * val;
                }
            mean /= n;
            const double sd = std::sqrt(std::max(0.0, sq / n - mean * mean));
            worst_mean = std::max(worst_mean, std::abs(mean));
            worst_std = std::max(worst_std, std::abs(sd - 1.0));
        }
        if (worst_mean > 1e-9 || worst_std > 1e-3) {
            ok = false;
            detail << "standardization off (mean " << worst_mean << ", std dev " << worst_std
                   << "); ";
        }
    }

    // gamma = -1 wipes the scaled branch, leaving exactly the shift.
    {
        auto rng = make_rng(6, hash_str("a3_beta"));
        Tensor branch = Tensor::uniform({2, 4, 3, 5}, rng, -3.0, 3.0);
        Tensor beta = Tensor::uniform(branch.shape(), rng, -1.0, 1.0);
        Tensor minus = Tensor::full(branch.shape(), -1.0);
        Tensor out = modulate(branch, minus, beta, ModulationStrategy::modulate, 1e-5);
        if (out.values() != beta.values()) {
            ok = false;
            detail << "gamma=-1 does not return beta; ";
        }
    }

    // Zero motion through every block's heads gives exactly zero factors.
    {
        double worst = 0.0;
        for (auto& stage : model.blocks())
            for (auto& block : stage)
                for (layers::ModulationHead* head : {&block.msm, &block.mtm}) {
                    head->bn.reset(Ch);
                    head->bn.initialized = true;
                    Tensor still = Tensor::zeros({1, 4, mc.V, Ch});
                    auto [gamma, beta] = head->forward(still, false);
                    for (double v : gamma.values()) worst = std::max(worst, std::abs(v));
                    for (double v : beta.values()) worst = std::max(worst, std::abs(v));
                }
        if (worst != 0.0) {
            ok = false;
            detail << "still input leaks factors (" << worst << "); ";
        }
    }

    // Random motion keeps factors strictly inside (-1, 1): tanh range.
    {
        auto rng = make_rng(7, hash_str("a3_motion"));
        Tensor motion = Tensor::uniform({2, 6, mc.V, Ch}, rng, -5.0, 5.0);
        bool bounded = true, moved = false;
        for (auto& stage : model.blocks())
            for (auto& block : stage)
                for (layers::ModulationHead* head : {&block.msm, &block.mtm}) {
                    auto [gamma, beta] = head->forward(motion, true);
                    for (double v : gamma.values()) {
                        bounded = bounded && v > -1.0 && v < 1.0;
                        moved = moved || v != 0.0;
                    }
                    for (double v : beta.values()) bounded = bounded && v > -1.0 && v < 1.0;
                }
        if (!bounded || !moved) {
            ok = false;
            detail << "factor bounds violated; ";
        }
    }

    if (ok) detail << "zero-motion, standardization, shift, and bound identities all hold";
    report("A3", ok, detail.str());
    CHECK(ok);
}

TEST_CASE("A4 architecture invariants: split, widths, rank, pyramid, equivariance") {
    bool ok = true;
    std::ostringstream detail;

    // Stratified split partitions every class by the requested fractions.
    {
        SynthSpec spec;
        spec.classes = 4;
        spec.per_class = 50;
        spec.joints = 6;
        spec.raw_len = 24;
        spec.seed = 3;
        Dataset ds = synth_generate(spec);
        SplitResult split = stratified_split(ds, 0.7, 0.15, 11);
        std::set<std::string> seen;
        bool disjoint = true;
        for (const Dataset* part : {&split.train, &split.val, &split.test})
            for (const auto& s : part->samples) disjoint = disjoint && seen.insert(s.id).second;
        std::vector<std::size_t> tr(4, 0), va(4, 0), te(4, 0);
        for (const auto& s : split.train.samples) tr[static_cast<std::size_t>(s.label)]++;
        for (const auto& s : split.val.samples) va[static_cast<std::size_t>(s.label)]++;
        for (const auto& s : split.test.samples) te[static_cast<std::size_t>(s.label)]++;
        bool proportional = true;
        for (std::size_t k = 0; k < 4; ++k)
            proportional = proportional && tr[k] == 35 && va[k] == 7 && te[k] == 8;
        if (!disjoint || !proportional || seen.size() != 200) {
            ok = false;
            detail << "split partition broken; ";
        }
    }

    // Skate embedding at full scale: every channel slice is rank one.
    {
        const std::size_t T = 64, V = 44, C = 64;
        Tensor te_tab = MmnModel::time_encoding(T, C);
        auto rng = make_rng(4, hash_str("a4_se"));
        Tensor se = Tensor::uniform({V, C}, rng, 0.5, 1.5);
        Tensor e = ops::skate_embed(te_tab, se);
        double worst_ratio = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            Eigen::MatrixXd slice(T, V);
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t v = 0; v < V; ++v) slice(t, v) = e.at({t, v, c});
            Eigen::JacobiSVD<Eigen::MatrixXd> svd(slice);
            const auto& s = svd.singularValues();
            if (s(0) > 0.0) worst_ratio = std::max(worst_ratio, s(1) / s(0));
        }
        if (worst_ratio > 1e-10) {
            ok = false;
            detail << "embedding slice rank > 1 (ratio " << worst_ratio << "); ";
        }
    }

    // Default temporal pyramid: stage lengths 64/32/16/8 and width C
    // in every captured block aggregate.
    {
        ModelConfig mc; // defaults: T=64, 4 stages, 3 blocks
        mc.V = 6;
        mc.C_in = 2;
        mc.num_classes = 4;
        mc.dropout = 0.0;
        MmnModel model(mc, 1);
        auto rng = make_rng(5, hash_str("a4_x"));
        Tensor x = Tensor::uniform({1, mc.T, mc.V, mc.C_in}, rng, -1.0, 1.0);
        std::vector<FeatureMapRecord> maps;
        ForwardCtx ctx;
        ctx.training = true;
        ctx.capture = &maps;
        model.forward(x, ctx);
        bool pyramid = maps.size() == 12 && mc.final_T() == 8;
        const std::size_t want_T[4] = {64, 32, 16, 8};
        for (const auto& rec : maps) {
            pyramid = pyramid && rec.value.dim(1) == want_T[rec.stage];
            pyramid = pyramid && rec.value.dim(3) == mc.C;
        }
        if (!pyramid) {
            ok = false;
            detail << "temporal pyramid or capture width broken; ";
        }
    }

    // Graph convolution is permutation equivariant at trained precision.
    {
        ModelConfig mc = tiny_config();
        MmnModel model(mc, 9);
        layers::GraphConv& g = model.blocks()[0][0].gconv;
        const std::size_t V = mc.V, Cq = mc.C / 4;
        auto rng = make_rng(6, hash_str("a4_perm"));
        Tensor x = Tensor::uniform({1, 3, V, Cq}, rng, -1.0, 1.0);
        const std::size_t perm[5] = {3, 0, 4, 1, 2};

        layers::GraphConv gp;
        gp.W = g.W;
        gp.A = Tensor::zeros({V, V});
        for (std::size_t v = 0; v < V; ++v)
            for (std::size_t u = 0; u < V; ++u) gp.A.at({v, u}) = g.A.at({perm[v], perm[u]});
        Tensor xp = Tensor::zeros(x.shape());
        for (std::size_t t = 0; t < 3; ++t)
            for (std::size_t v = 0; v < V; ++v)
                for (std::size_t c = 0; c < Cq; ++c) xp.at({0, t, v, c}) = x.at({0, t, perm[v], c});

        Tensor out = g.forward(x);
        Tensor outp = gp.forward(xp);
        double worst = 0.0;
        for (std::size_t t = 0; t < 3; ++t)
            for (std::size_t v = 0; v < V; ++v)
                for (std::size_t c = 0; c < Cq; ++c)
                    worst = std::max(worst, std::abs(outp.at({0, t, v, c}) -
                                                     out.at({0, t, perm[v], c})));
        if (worst > 1e-10) {
            ok = false;
            detail << "graph conv not permutation equivariant (" << worst << "); ";
        }
    }

    if (ok) detail << "split, rank-1 embedding, 64/32/16/8 pyramid, and equivariance verified";
    report("A4", ok, detail.str());
    CHECK(ok);
}

TEST_CASE("A5 default model trains to high accuracy on clean synthetic data") {
    const auto t0 = std::chrono::steady_clock::now();

    SynthSpec spec;
    spec.classes = 4;
    spec.per_class = 100;
    spec.joints = 8;
    spec.raw_len = 72;
    spec.amplitude = 0.3;
    spec.noise_sigma = 0.01;
    spec.seed = 7;
    Dataset ds = synth_generate(spec);
    SplitResult split = stratified_split(ds, 0.7, 0.15, 7);

    ModelConfig mc; // full default architecture, dataset geometry only
    mc.V = ds.V;
    mc.C_in = ds.C_in;
    mc.num_classes = ds.num_classes();
    MmnModel model(mc, 1);

    TrainConfig tc;
    tc.epochs = 60;
    tc.base_lr = 3e-3;
    tc.min_lr = 3e-3 * 0.02;
    tc.warmup_start_lr = 3e-3 * 0.1;
    tc.warmup_epochs = 2;
    tc.cosine_cycles = 1;
    tc.grad_clip = 5.0;
    tc.seed = 7;

    TrainOptions opts;
    opts.out_dir = fresh_dir("acceptance_a5");
    opts.quiet = true;
    opts.augment.affine = false;
    opts.augment.jitter = false;
    opts.should_stop = [](const EpochLog& log) { return log.train_top1 >= 0.97; };

    TrainResult res = train_model(model, split.train, split.val, tc, opts);

    PredictionSet train_preds = predict(model, split.train, 64);
    PredictionSet test_preds = predict(model, split.test, 64);
    const double train_top1 = compute_metrics(train_preds, ds.taxonomy).top1_action;
    const double test_top1 = compute_metrics(test_preds, ds.taxonomy).top1_action;
    const double secs = seconds_since(t0);
    const std::size_t epochs_run = res.history.size();

    const bool ok =
        train_top1 >= 0.95 && test_top1 >= 0.85 && epochs_run <= 60 && secs < 900.0;
    std::ostringstream detail;
    detail << "train top1 " << train_top1 << ", test top1 " << test_top1 << ", " << epochs_run
           << " epochs, " << secs << "s";
    report("A5", ok, detail.str());
    CHECK(ok);
}

namespace {

// One ablation training run; returns the test-set f1_mean of the best
// validation checkpoint.
double a6_run(bool msm, bool mtm, bool aug, std::uint64_t seed, const std::string& tag) {
    SynthSpec spec;
    spec.classes = 4;
    spec.per_class = 12;
    spec.joints = 8;
    spec.raw_len = 72;
    spec.amplitude = 0.3;
    spec.noise_sigma = 0.05;
    spec.similarity = 0.8;
    spec.seed = seed;
    Dataset ds = synth_generate(spec);
    SplitResult split = stratified_split(ds, 0.6, 0.1, seed);

    ModelConfig mc;
    mc.T = 32;
    mc.V = ds.V;
    mc.C_in = ds.C_in;
    mc.C = 16;
    mc.blocks_per_stage = 1;
    mc.stages = 2;
    mc.num_classes = 4;
    mc.dropout = 0.1;
    mc.msm_enabled = msm;
    mc.mtm_enabled = mtm;
    MmnModel model(mc, seed);

    TrainConfig tc;
    tc.epochs = 80;
    tc.batch_size = 16;
    tc.base_lr = 5e-3;
    tc.min_lr = 5e-3 * 0.02;
    tc.warmup_start_lr = 5e-3 * 0.1;
    tc.warmup_epochs = 3;
    tc.cosine_cycles = 1;
    tc.weight_decay = 0.01;
    tc.grad_clip = 5.0;
    tc.seed = seed;

    TrainOptions opts;
    opts.out_dir = fresh_dir("acceptance_a6_" + tag + "_" + std::to_string(seed));
    opts.quiet = true;
    opts.augment.affine = aug;
    opts.augment.jitter = aug;

    TrainResult res = train_model(model, split.train, split.val, tc, opts);
    MmnModel best = model_from_checkpoint(read_checkpoint(res.best_checkpoint));
    PredictionSet preds = predict(best, split.test, 64);
    return compute_metrics(preds, ds.taxonomy).f1_mean;
}

double median5(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[2];
}

} // namespace

TEST_CASE("A6 ablations order as claimed: full model beats no-heads and no-augmentation") {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<double> full, no_heads, no_aug;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        full.push_back(a6_run(true, true, true, seed, "full"));
        no_heads.push_back(a6_run(false, false, true, seed, "noheads"));
        no_aug.push_back(a6_run(true, true, false, seed, "noaug"));
    }
    const double m_full = median5(full);
    const double m_no_heads = median5(no_heads);
    const double m_no_aug = median5(no_aug);
    const double secs = seconds_since(t0);

    const bool ok = m_full > m_no_heads && m_full > m_no_aug;
    std::ostringstream detail;
    detail << "median test f1_mean over 5 seeds: full " << m_full << " vs no-heads "
           << m_no_heads << " vs no-augmentation " << m_no_aug << " (" << secs << "s)";
    report("A6", ok, detail.str());
    CHECK(ok);
}

TEST_CASE("A7 learning-rate schedule landmarks are exact") {
    TrainConfig cfg; // 120 epochs, warmup 20, 3 cycles
    bool ok = true;
    std::ostringstream detail;

    auto expect = [&](int epoch, double want, const char* what) {
        const double got = lr_at(cfg, epoch);
        if (std::abs(got - want) > 1e-12) {
            ok = false;
            detail << what << " epoch " << epoch << " got " << got << " want " << want << "; ";
        }
    };
    expect(0, 1e-7, "warmup start");
    expect(10, 1e-7 + (1e-4 - 1e-7) * 0.5, "warmup midpoint");
    expect(20, 1e-4, "warmup end");
    expect(53, 1e-6, "cycle 1 floor");
    expect(54, 1e-4, "cycle 2 restart");
    expect(70, 5.05e-5, "cycle 2 midpoint");
    expect(86, 1e-6, "cycle 2 floor");
    expect(87, 1e-4, "cycle 3 restart");
    expect(119, 1e-6, "final floor");

    if (ok) detail << "warmup endpoints, three floors, two restarts, and the 5.05e-5 midpoint";
    report("A7", ok, detail.str());
    CHECK(ok);
}

TEST_CASE("A8 bit-level reproducibility: datasets, checkpoints, resume, and seeds") {
    bool ok = true;
    std::ostringstream detail;

    SynthSpec spec;
    spec.classes = 3;
    spec.per_class = 8;
    spec.joints = 5;
    spec.raw_len = 20;
    spec.seed = 11;
    Dataset ds = synth_generate(spec);

    // Dataset file round trip is exact.
    {
        const std::string dir = fresh_dir("acceptance_a8_ds");
        save_dataset(dir + "/ds.jsonl", ds);
        Dataset back = load_dataset(dir + "/ds.jsonl");
        bool same = back.samples.size() == ds.samples.size();
        for (std::size_t i = 0; same && i < ds.samples.size(); ++i)
            same = back.samples[i].id == ds.samples[i].id &&
                   back.samples[i].frames.data == ds.samples[i].frames.data;
        if (!same) {
            ok = false;
            detail << "dataset round trip not exact; ";
        }
    }

    ModelConfig mc = tiny_config();
    mc.num_classes = 3;
    mc.V = 5;

    // Checkpoint round trip reproduces logits bit for bit.
    {
        MmnModel model(mc, 21);
        for (auto& bn : model.named_bn_states()) bn.state->initialized = true;
        auto rng = make_rng(8, hash_str("a8_x"));
        Tensor x = Tensor::uniform({2, mc.T, mc.V, mc.C_in}, rng, -1.0, 1.0);
        ForwardCtx ctx;
        Tensor before = model.forward(x, ctx);

        const std::string dir = fresh_dir("acceptance_a8_ckpt");
        Checkpoint ckpt;
        store_model(ckpt, model);
        write_checkpoint(dir + "/m.ckpt", ckpt);
        MmnModel redo = model_from_checkpoint(read_checkpoint(dir + "/m.ckpt"));
        ForwardCtx ctx2;
        Tensor after = redo.forward(x, ctx2);
        if (before.values() != after.values()) {
            ok = false;
            detail << "checkpoint logits differ; ";
        }
    }

    // A straight 3-epoch run equals 2 epochs + resume, and a fixed seed
    // reproduces itself while a different seed diverges.
    {
        SplitResult split = stratified_split(ds, 0.7, 0.15, 3);
        TrainConfig tc;
        tc.epochs = 2;
        tc.batch_size = 8;
        tc.base_lr = 1e-3;
        tc.min_lr = 1e-5;
        tc.warmup_start_lr = 1e-6;
        tc.warmup_epochs = 1;
        tc.cosine_cycles = 1;
        tc.seed = 9;

        auto run = [&](int epochs, std::uint64_t model_seed, const std::string& name,
                       const std::string& resume_from) {
            TrainConfig t2 = tc;
            t2.epochs = epochs;
            TrainOptions opts;
            opts.out_dir = fresh_dir("acceptance_a8_" + name);
            opts.quiet = true;
            opts.resume_from = resume_from;
            MmnModel model(mc, model_seed);
            return train_model(model, split.train, split.val, t2, opts);
        };

        TrainResult two = run(2, 9, "two", "");
        TrainResult three = run(3, 9, "three", "");
        TrainResult tail = run(3, 9999, "tail", two.last_checkpoint);

        bool resume_ok = tail.history.size() == 1 && tail.history[0].epoch == 2 &&
                         tail.history[0].train_loss == three.history[2].train_loss &&
                         tail.history[0].val_f1_mean == three.history[2].val_f1_mean;
        if (!resume_ok) {
            ok = false;
            detail << "resume diverges from the straight run; ";
        }

        TrainResult again = run(2, 9, "again", "");
        bool seed_ok = again.history.size() == two.history.size();
        for (std::size_t i = 0; seed_ok && i < two.history.size(); ++i)
            seed_ok = again.history[i].train_loss == two.history[i].train_loss &&
                      again.history[i].val_f1_mean == two.history[i].val_f1_mean;
        if (!seed_ok) {
            ok = false;
            detail << "same seed, different trace; ";
        }

        TrainConfig other = tc;
        other.seed = 10;
        TrainOptions opts;
        opts.out_dir = fresh_dir("acceptance_a8_other");
        opts.quiet = true;
        MmnModel m2(mc, 9);
        TrainResult moved = train_model(m2, split.train, split.val, other, opts);
        if (moved.history[0].train_loss == two.history[0].train_loss) {
            ok = false;
            detail << "different seed did not move the trace; ";
        }
    }

    if (ok) detail << "dataset, checkpoint, resume, and seed traces all bit-exact";
    report("A8", ok, detail.str());
    CHECK(ok);
}

TEST_CASE("A9 the bench command reports cost beside the published reference") {
    const std::string out = fresh_dir("acceptance_a9");
    const std::string cmd = std::string(MMN_CLI_PATH) + " bench --iters 20 --warmup 3 --out " +
                            out + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::string text;
    char buf[4096];
    std::size_t n = 0;
    while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) text.append(buf, n);
    const int st = pclose(pipe);
    const int code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;

    bool ok = code == 0;
    std::ostringstream detail;
    double params = 0.0, flops = 0.0, latency = 0.0;
    if (ok) {
        const nlohmann::json j = nlohmann::json::parse(read_text(out + "/bench.json"));
        params = j.at("params").get<double>();
        flops = j.at("flops").get<double>();
        latency = j.at("latency_median_ms").get<double>();
        ok = ok && params > 0.0 && flops > 0.0 && latency > 0.0;
        ok = ok && j.at("iters").get<int>() == 20;
        ok = ok && j.at("reference").at("params").get<double>() == 1.23e6;
        ok = ok && j.at("reference").at("flops").get<double>() == 1.48e9;
        ok = ok && text.find("published full-scale reference: 1.23 M params / 1.48 G FLOPs") !=
                       std::string::npos;
        // Sanity band, not an equality claim: the default geometry must
        // stay within the same order of magnitude as the reference.
        ok = ok && params > 1e5 && params < 1e7 && flops > 1e8 && flops < 1e10;
    } else {
        detail << "bench exited " << code << "; ";
    }
    detail << "measured " << params / 1e6 << " M params / " << flops / 1e9 << " G FLOPs / "
           << latency << " ms vs published 1.23 M / 1.48 G / 7.15 ms";
    report("A9", ok, detail.str());
    CHECK(ok);
}
