#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace mmn {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {

// Storage node shared by tensor handles and tape closures.  Gradients are
// allocated lazily and accumulate additively across all uses of the node.
struct TensorNode {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;

    std::size_t numel() const { return values.size(); }
    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
    void accum_grad(const double* g) {
        ensure_grad();
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
    }
};

} // namespace detail

// Value-semantic handle to a shared tensor node.  Copies alias storage.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar_tensor(double value, bool requires_grad = false);
    static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                          bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;
    std::size_t dim(std::size_t axis) const;

    double* data();
    const double* data() const;
    std::vector<double>& values();
    const std::vector<double>& values() const;

    bool requires_grad() const;
    void set_requires_grad(bool rg);
    bool has_grad() const;
    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    void zero_grad();

    // Scalar access (tensor must hold exactly one element).
    double item() const;

    double at(std::initializer_list<std::size_t> idx) const;
    double& at(std::initializer_list<std::size_t> idx);

    bool all_finite() const;

    detail::TensorNode* node() const { return node_.get(); }
    const std::shared_ptr<detail::TensorNode>& node_ptr() const { return node_; }

private:
    std::shared_ptr<detail::TensorNode> node_;
};

// Reverse-mode tape.  Ops record one entry per call; backward replays the
// entries last-to-first so every output gradient is complete before the
// entry that produced it runs.  Replayed entries are released eagerly,
// which caps peak memory during backward.
class Tape {
public:
    struct Entry {
        const char* op;
        std::shared_ptr<detail::TensorNode> out;
        std::function<void()> fn;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current();

    void record(const char* op, std::shared_ptr<detail::TensorNode> out, std::function<void()> fn);

    // Seeds d(root)/d(root) = 1 and propagates.  root must be scalar.
    void backward(const Tensor& root, bool release_entries = true);

    std::size_t size() const { return entries_.size(); }
    const std::vector<Entry>& entries() const { return entries_; }

    // Name of the first recorded op with a non-finite output, or nullptr.
    const char* first_nonfinite_op() const;

    void clear() { entries_.clear(); }

private:
    friend class TapeGuard;
    std::vector<Entry> entries_;
};

// Installs a tape as the thread's recording target for its scope.
class TapeGuard {
public:
    explicit TapeGuard(Tape& tape);
    ~TapeGuard();
    TapeGuard(const TapeGuard&) = delete;
    TapeGuard& operator=(const TapeGuard&) = delete;

private:
    Tape* prev_;
};

} // namespace mmn
