#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mmn/ops.hpp"
#include "mmn/tensor.hpp"

namespace mmn {

// How the two modulation heads combine their factors with the normalised
// branch.  `modulate` is the full scale-and-shift form; the others are
// reduced variants kept for comparison runs.
enum class ModulationStrategy { modulate, no_scale, no_shift, add, concat, hadamard };

ModulationStrategy parse_strategy(const std::string& name);
std::string strategy_name(ModulationStrategy s);

struct ModelConfig {
    std::size_t T = 64;  // frames after uniform sampling
    std::size_t V = 44;  // joints
    std::size_t C_in = 2;
    std::size_t C = 64;  // embedding width, must be divisible by 4
    std::size_t blocks_per_stage = 3;
    std::size_t stages = 4; // time halves between consecutive stages
    std::size_t num_classes = 52;
    std::size_t tconv_kernel = 5;
    std::size_t mtm_kernel = 3; // square (time x joint) kernel
    std::size_t ffn_expansion = 4;
    double dropout = 0.1;
    double ln_eps = 1e-5;
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;
    double mod_eps = 1e-5;
    bool msm_enabled = true;
    bool mtm_enabled = true;
    // Both modulation sites normalise the temporal-conv branch instead of
    // their own branch (an alternative reading of the block wiring).
    bool shared_tconv_mod_source = false;
    ModulationStrategy strategy = ModulationStrategy::modulate;

    std::size_t final_T() const { return T >> (stages - 1); }
    void validate() const;
};

struct NamedParam {
    std::string name;
    Tensor tensor;
};

struct NamedBnState {
    std::string name;
    BatchNormState* state;
};

// Per-forward options.  `rng` drives dropout and must be set when training
// with dropout > 0.  `capture`, when set, receives every block's
// aggregated branch tensor.
struct FeatureMapRecord {
    std::size_t stage = 0;
    std::size_t block = 0;
    Tensor value;
};

struct ForwardCtx {
    bool training = false;
    std::mt19937_64* rng = nullptr;
    std::vector<FeatureMapRecord>* capture = nullptr;
};

struct CostEstimate {
    std::size_t params = 0;
    double macs = 0.0; // dense-kernel multiply-accumulates, batch of one
};

namespace layers {

struct Linear {
    Tensor W, b; // b may stay undefined for bias-free layers
    Tensor forward(const Tensor& x) const {
        return b.defined() ? ops::linear(x, W, b) : ops::linear(x, W);
    }
};

struct LayerNorm {
    Tensor gain, bias;
    double eps = 1e-5;
    Tensor forward(const Tensor& x) const { return ops::layer_norm(x, gain, bias, eps); }
};

// GELU((A x) W), no bias anywhere.
struct GraphConv {
    Tensor A, W;
    Tensor forward(const Tensor& x) const {
        return ops::gelu(ops::linear(ops::joint_mix(x, A), W));
    }
};

// Produces the (scale, shift) factor pair from the motion signal.
// Spatial head: graph conv; temporal head: (time x joint) conv.  Both run
// the result through batch norm and tanh, then split channel halves.
struct ModulationHead {
    bool spatial = true;
    GraphConv gconv;     // spatial head
    Tensor conv_w;       // temporal head weight [k,k,C,C]
    BatchNormState bn;
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;

    std::pair<Tensor, Tensor> forward(const Tensor& motion, bool training);
};

} // namespace layers

// Standardizes the branch per channel over its (T, V) axes, then applies
// the factor pair under the given strategy.  `mix` is read only by the
// concat strategy, which recombines [x || gamma || beta] back to the
// branch width.
Tensor modulate(const Tensor& branch, const Tensor& gamma, const Tensor& beta,
                ModulationStrategy strategy, double eps = 1e-5,
                const layers::Linear* mix = nullptr);

struct MstfBlock {
    layers::LayerNorm ln1;
    layers::Linear in_proj;
    layers::GraphConv gconv;
    Tensor tconv_w, tconv_b;
    layers::ModulationHead msm; // spatial factors
    layers::ModulationHead mtm; // temporal factors
    layers::Linear msm_mix;     // only for the concat strategy
    layers::Linear mtm_mix;
    layers::Linear gate;
    layers::Linear out_proj;
    layers::LayerNorm ln2;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;

    Tensor forward(const Tensor& x, const ModelConfig& cfg, ForwardCtx& ctx,
                   std::size_t stage_idx, std::size_t block_idx);
};

class MmnModel {
public:
    MmnModel() = default;
    MmnModel(const ModelConfig& cfg, std::uint64_t init_seed);

    // x is [B, T, V, C_in]; returns logits [B, num_classes].
    Tensor forward(const Tensor& x, ForwardCtx& ctx);

    std::vector<NamedParam> named_parameters();
    std::vector<NamedBnState> named_bn_states();
    void zero_grad();

    const ModelConfig& config() const { return cfg_; }
    CostEstimate cost() const;

    // Direct access to the stacked blocks, outer index = stage.
    std::vector<std::vector<MstfBlock>>& blocks() { return stages_; }

    // Fixed sinusoidal time table [T, C] over normalised frame positions.
    static Tensor time_encoding(std::size_t T, std::size_t C);

private:
    ModelConfig cfg_;
    Tensor te_;            // fixed [T, C]
    Tensor se_;            // learnable [V, C]
    layers::Linear proj_[3];
    std::vector<std::vector<MstfBlock>> stages_;
    layers::Linear fuse_gate_;
    layers::Linear fuse_proj_;
    layers::LayerNorm head_ln_;
    layers::Linear head_fc_;
};

} // namespace mmn
