#include <cstdint>
#include <vector>

#include "mmn/gradcheck.hpp"
#include "mmn/model.hpp"
#include "mmn/ops.hpp"
#include "mmn/rng.hpp"

namespace mmn {

namespace {

Tensor rand_in(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t = Tensor::zeros(shape);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : t.values()) v = dist(rng);
    return t;
}

using Fn = std::function<Tensor(std::vector<Tensor>&)>;

GradCheckCase run(const std::string& name, const Fn& fn, std::vector<Tensor> inputs,
                  double eps = 1e-5, double tol = 1e-4) {
    return {name, gradcheck(fn, std::move(inputs), eps, tol)};
}

} // namespace

std::vector<GradCheckCase> gradcheck_suite(std::uint64_t seed) {
    auto rng = make_rng(seed, hash_str("gradcheck-suite"));
    std::vector<GradCheckCase> cases;

    cases.push_back(run(
        "add.broadcast",
        [&](std::vector<Tensor>& in) { return ops::sum_all(ops::add(in[0], in[1])); },
        {rand_in({2, 3, 4}, rng), rand_in({4}, rng)}));
    cases.push_back(run(
        "sub.equal",
        [&](std::vector<Tensor>& in) { return ops::sum_all(ops::sub(in[0], in[1])); },
        {rand_in({3, 4}, rng), rand_in({3, 4}, rng)}));
    cases.push_back(run(
        "mul.suffix",
        [&](std::vector<Tensor>& in) { return ops::sum_all(ops::mul(in[0], in[1])); },
        {rand_in({2, 3, 4}, rng), rand_in({3, 4}, rng)}));
    cases.push_back(run(
        "div.scalar",
        [&](std::vector<Tensor>& in) { return ops::sum_all(ops::div(in[0], in[1])); },
        {rand_in({3, 4}, rng), rand_in({1}, rng, 0.5, 1.5)}));
    cases.push_back(run(
        "scale_batch",
        [&](std::vector<Tensor>& in) { return ops::sum_all(ops::scale_batch(in[0], in[1])); },
        {rand_in({3, 2, 4}, rng), rand_in({3}, rng, 0.2, 1.2)}));

    cases.push_back(run(
        "tanh", [&](std::vector<Tensor>& in) { return ops::sum_all(ops::tanh(in[0])); },
        {rand_in({3, 5}, rng)}));
    cases.push_back(run(
        "sigmoid", [&](std::vector<Tensor>& in) { return ops::sum_all(ops::sigmoid(in[0])); },
        {rand_in({3, 5}, rng)}));
    cases.push_back(run(
        "gelu", [&](std::vector<Tensor>& in) { return ops::sum_all(ops::gelu(in[0])); },
        {rand_in({3, 5}, rng, -2.0, 2.0)}));
    cases.push_back(run(
        "exp", [&](std::vector<Tensor>& in) { return ops::sum_all(ops::exp(in[0])); },
        {rand_in({3, 5}, rng)}));
    cases.push_back(run(
        "log", [&](std::vector<Tensor>& in) { return ops::sum_all(ops::log(in[0])); },
        {rand_in({3, 5}, rng, 0.5, 2.0)}));
    cases.push_back(run(
        "sqrt", [&](std::vector<Tensor>& in) { return ops::sum_all(ops::sqrt(in[0])); },
        {rand_in({3, 5}, rng, 0.5, 2.0)}));
    cases.push_back(run(
        "softmax",
        [&](std::vector<Tensor>& in) {
            Tensor s = ops::softmax(in[0]);
            return ops::sum_all(ops::mul(s, s));
        },
        {rand_in({3, 5}, rng)}));

    cases.push_back(run(
        "sum.axes",
        [&](std::vector<Tensor>& in) {
            return ops::sum_all(ops::exp(ops::sum(in[0], {1}, false)));
        },
        {rand_in({2, 3, 4}, rng, -0.5, 0.5)}));
    cases.push_back(run(
        "mean.keepdims",
        [&](std::vector<Tensor>& in) {
            return ops::sum_all(ops::exp(ops::mean(in[0], {0, 2}, true)));
        },
        {rand_in({2, 3, 4}, rng)}));
    cases.push_back(run(
        "mul.reduced_suffix",
        [&](std::vector<Tensor>& in) {
            return ops::sum_all(ops::mul(in[0], ops::mean(in[0], {0}, false)));
        },
        {rand_in({2, 3, 4}, rng)}));
    cases.push_back(run(
        "stddev",
        [&](std::vector<Tensor>& in) { return ops::sum_all(ops::stddev(in[0], {1}, false)); },
        {rand_in({3, 6}, rng)}));
    cases.push_back(run(
        "mean_all",
        [&](std::vector<Tensor>& in) { return ops::mean_all(ops::mul(in[0], in[0])); },
        {rand_in({4, 3}, rng)}));

    cases.push_back(run(
        "matmul",
        [&](std::vector<Tensor>& in) { return ops::sum_all(ops::matmul(in[0], in[1])); },
        {rand_in({3, 4}, rng), rand_in({4, 2}, rng)}));
    cases.push_back(run(
        "linear.bias",
        [&](std::vector<Tensor>& in) {
            return ops::sum_all(ops::linear(in[0], in[1], in[2]));
        },
        {rand_in({2, 3, 4}, rng), rand_in({4, 5}, rng), rand_in({5}, rng)}));
    cases.push_back(run(
        "joint_mix",
        [&](std::vector<Tensor>& in) { return ops::sum_all(ops::joint_mix(in[0], in[1])); },
        {rand_in({2, 3, 4, 5}, rng), rand_in({4, 4}, rng)}));
    cases.push_back(run(
        "conv_temporal",
        [&](std::vector<Tensor>& in) {
            return ops::sum_all(ops::conv_temporal(in[0], in[1], in[2]));
        },
        {rand_in({2, 6, 3, 4}, rng), rand_in({5, 4, 4}, rng), rand_in({4}, rng)}));
    cases.push_back(run(
        "conv2d",
        [&](std::vector<Tensor>& in) {
            return ops::sum_all(ops::conv2d(in[0], in[1], in[2]));
        },
        {rand_in({2, 5, 4, 3}, rng), rand_in({3, 3, 3, 4}, rng), rand_in({4}, rng)}));

    cases.push_back(run(
        "reshape.slice.concat",
        [&](std::vector<Tensor>& in) {
            Tensor r = ops::reshape(in[0], {2, 12});
            Tensor a = ops::slice_last(r, 0, 5);
            Tensor b = ops::slice_last(r, 5, 12);
            return ops::sum_all(ops::concat_last({ops::tanh(a), b}));
        },
        {rand_in({2, 3, 4}, rng)}));
    cases.push_back(run(
        "temporal_diff.pad",
        [&](std::vector<Tensor>& in) {
            Tensor d = ops::temporal_diff(in[0]);
            return ops::sum_all(ops::mul(ops::pad_time_front(d, 1), in[0]));
        },
        {rand_in({2, 4, 3, 2}, rng)}));
    cases.push_back(run(
        "downsample_time",
        [&](std::vector<Tensor>& in) {
            return ops::sum_all(ops::exp(ops::downsample_time(in[0])));
        },
        {rand_in({2, 6, 3, 2}, rng, -0.5, 0.5)}));

    cases.push_back(run(
        "layer_norm",
        [&](std::vector<Tensor>& in) {
            return ops::sum_all(ops::mul(ops::layer_norm(in[0], in[1], in[2]), in[0]));
        },
        {rand_in({2, 3, 6}, rng), rand_in({6}, rng, 0.5, 1.5), rand_in({6}, rng)}));
    cases.push_back(run(
        "standardize_tv",
        [&](std::vector<Tensor>& in) {
            return ops::sum_all(ops::mul(ops::standardize_tv(in[0]), in[0]));
        },
        {rand_in({2, 4, 3, 5}, rng)}));
    cases.push_back(run(
        "batch_norm.train",
        [&](std::vector<Tensor>& in) {
            BatchNormState st;
            st.reset(in[0].dim(3));
            return ops::sum_all(ops::mul(ops::batch_norm(in[0], st, true), in[0]));
        },
        {rand_in({2, 3, 2, 4}, rng)}));
    cases.push_back(run(
        "batch_norm.eval",
        [&](std::vector<Tensor>& in) {
            BatchNormState st;
            st.reset(in[0].dim(3));
            for (std::size_t c = 0; c < st.running_var.size(); ++c) {
                st.running_mean[c] = 0.1 * static_cast<double>(c);
                st.running_var[c] = 1.0 + 0.2 * static_cast<double>(c);
            }
            st.initialized = true;
            return ops::sum_all(ops::mul(ops::batch_norm(in[0], st, false), in[0]));
        },
        {rand_in({2, 3, 2, 4}, rng)}));
    cases.push_back(run(
        "skate_embed",
        [&](std::vector<Tensor>& in) {
            return ops::sum_all(ops::mul(ops::skate_embed(in[0], in[1]), in[2]));
        },
        {rand_in({4, 6}, rng), rand_in({3, 6}, rng), rand_in({4, 3, 6}, rng)}));
    cases.push_back(run(
        "ffn_inner",
        [&](std::vector<Tensor>& in) {
            return ops::sum_all(
                ops::ffn_inner(in[0], in[1], in[2], in[3], in[4], 0.0, false, nullptr));
        },
        {rand_in({2, 3, 4}, rng), rand_in({4, 8}, rng), rand_in({8}, rng), rand_in({8, 4}, rng),
         rand_in({4}, rng)}));
    cases.push_back(run(
        "cross_entropy",
        [&](std::vector<Tensor>& in) {
            return ops::cross_entropy(in[0], std::vector<int>{1, 0, 2});
        },
        {rand_in({3, 4}, rng)}));

    {
        ModelConfig mc;
        mc.T = 8;
        mc.V = 5;
        mc.C_in = 2;
        mc.C = 8;
        mc.blocks_per_stage = 1;
        mc.stages = 2;
        mc.num_classes = 3;
        mc.dropout = 0.0;
        MmnModel model(mc, derive_seed(seed, hash_str("gradcheck-model")));
        std::vector<NamedParam> params = model.named_parameters();
        Tensor x = rand_in({2, mc.T, mc.V, mc.C_in}, rng, -0.5, 0.5);
        const std::vector<int> labels{1, 0};

        std::vector<Tensor> inputs;
        inputs.push_back(x);
        for (NamedParam& p : params) inputs.push_back(p.tensor);

        Fn fn = [&model, labels](std::vector<Tensor>& in) {
            ForwardCtx ctx;
            ctx.training = true;
            return ops::cross_entropy(model.forward(in[0], ctx), labels);
        };
        // Model parameters are the same Tensor handles held inside `model`,
        // so perturbing `inputs` perturbs the model. BN runs in training mode
        // and its running stats do not affect the loss, so repeated forward
        // passes stay deterministic.
        cases.push_back(run("model.end_to_end", fn, inputs, 1e-5, 2e-4));
    }

    return cases;
}

} // namespace mmn
