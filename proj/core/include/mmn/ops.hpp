#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "mmn/tensor.hpp"

namespace mmn {

// Running statistics for batch normalisation, tracked per channel.
// Updated in training mode, read in eval mode.  No learned affine here;
// callers that want one compose it separately.
struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    bool initialized = false;

    void reset(std::size_t channels) {
        running_mean.assign(channels, 0.0);
        running_var.assign(channels, 1.0);
        initialized = false;
    }
};

namespace ops {

// Elementwise binary ops.  Shapes must match exactly, or the smaller
// operand's shape must be a trailing suffix of the larger's (it is then
// tiled across the leading axes), or either side may be a scalar [1].
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);

// out[b, ...] = x[b, ...] * s[b];  s has shape [B] or [B,1].
Tensor scale_batch(const Tensor& x, const Tensor& s);

// Activations.
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x); // exact erf form
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor softmax(const Tensor& x); // last axis

// Reductions over the given axes (sorted, unique).  Variance is biased.
Tensor sum(const Tensor& x, const std::vector<std::size_t>& axes, bool keepdims = false);
Tensor mean(const Tensor& x, const std::vector<std::size_t>& axes, bool keepdims = false);
Tensor stddev(const Tensor& x, const std::vector<std::size_t>& axes, bool keepdims = false);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// x [..., M, K] times w [K, N].  Leading axes are batch axes.
Tensor matmul(const Tensor& x, const Tensor& w);

// x [..., K] -> [..., N] with weight [K, N] and optional bias [N].
Tensor linear(const Tensor& x, const Tensor& w);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// out[..., t, v, c] = sum_u A[v, u] * x[..., t, u, c].  x rank 3 or 4,
// layout [(B,) T, V, C]; A is [V, V].
Tensor joint_mix(const Tensor& x, const Tensor& A);

// 1-D convolution along the time axis of [(B,) T, V, C_in], independent
// per joint.  w is [k, C_in, C_out], k odd, stride 1, same zero padding.
Tensor conv_temporal(const Tensor& x, const Tensor& w);
Tensor conv_temporal(const Tensor& x, const Tensor& w, const Tensor& b);

// 2-D convolution over (time, joint) of [(B,) T, V, C_in].
// w is [kt, kv, C_in, C_out], both kernel dims odd, same zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b);

// Shape ops.
Tensor reshape(const Tensor& x, Shape shape);
Tensor slice_last(const Tensor& x, std::size_t lo, std::size_t hi);
Tensor concat_last(const std::vector<Tensor>& parts);

// Frame-difference along the time axis (axis rank-3): T -> T-1.
Tensor temporal_diff(const Tensor& x);
// Prepends n all-zero frames along the time axis.
Tensor pad_time_front(const Tensor& x, std::size_t n);
// Halves the time axis by averaging adjacent frame pairs; T must be even.
// The global temporal mean is preserved exactly.
Tensor downsample_time(const Tensor& x);

// Layer norm over the last axis; gain/bias have shape [C].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Per-sample, per-channel standardisation over the (T, V) axes of
// [(B,) T, V, C].  The denominator is max(sqrt(var), eps), so constant
// inputs map to exact zeros and unit-variance inputs keep std 1 exactly.
Tensor standardize_tv(const Tensor& x, double eps = 1e-5);

// Batch normalisation over all axes except the channel (last) axis.
// Training mode uses batch statistics (biased variance) and folds them
// into `state` with `running = (1 - momentum) * running + momentum * batch`;
// the first training batch seeds the running values directly.  Eval mode
// normalises with the stored running statistics.
Tensor batch_norm(const Tensor& x, BatchNormState& state, bool training,
                  double momentum = 0.1, double eps = 1e-5);

// Inverted dropout; identity when p == 0 or not training.
Tensor dropout(const Tensor& x, double p, bool training, std::mt19937_64* rng);

// Fused position-wise feed-forward core: linear -> gelu -> dropout -> linear.
// Keeps only the first linear's pre-activation and the dropout mask for
// backward, recomputing the cheap middle activations.
Tensor ffn_inner(const Tensor& x, const Tensor& w1, const Tensor& b1,
                 const Tensor& w2, const Tensor& b2, double p, bool training,
                 std::mt19937_64* rng);

// Mean cross-entropy of logits [B, K] against integer labels, computed
// via max-subtracted log-sum-exp.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// out[t, v, c] = te[t, c] * se[v, c]; te is a fixed [T, C] table,
// se a learnable [V, C] table.
Tensor skate_embed(const Tensor& te, const Tensor& se);

} // namespace ops
} // namespace mmn
