#include "mmn/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "mmn/errors.hpp"

namespace mmn {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

namespace {

std::shared_ptr<detail::TensorNode> make_node(Shape shape, bool requires_grad) {
    auto node = std::make_shared<detail::TensorNode>();
    node->values.assign(shape_numel(shape), 0.0);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return node;
}

} // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return Tensor(make_node(std::move(shape), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto node = make_node(std::move(shape), requires_grad);
    for (double& v : node->values) v = value;
    return Tensor(std::move(node));
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size())
        throw DimensionError("from_values: " + std::to_string(values.size()) +
                             " values for shape " + shape_str(shape));
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar_tensor(double value, bool requires_grad) {
    return from_values({1}, {value}, requires_grad);
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                       bool requires_grad) {
    auto node = make_node(std::move(shape), requires_grad);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : node->values) v = dist(rng);
    return Tensor(std::move(node));
}

const Shape& Tensor::shape() const {
    if (!node_) throw DimensionError("shape() on undefined tensor");
    return node_->shape;
}

std::size_t Tensor::numel() const { return node_ ? node_->numel() : 0; }

std::size_t Tensor::dim(std::size_t axis) const {
    const Shape& s = shape();
    if (axis >= s.size())
        throw DimensionError("dim(" + std::to_string(axis) + ") on rank-" +
                             std::to_string(s.size()) + " tensor");
    return s[axis];
}

double* Tensor::data() { return node_->values.data(); }
const double* Tensor::data() const { return node_->values.data(); }
std::vector<double>& Tensor::values() { return node_->values; }
const std::vector<double>& Tensor::values() const { return node_->values; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool rg) { node_->requires_grad = rg; }
bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->values.size(); }

std::vector<double>& Tensor::grad() {
    node_->ensure_grad();
    return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_) node_->grad.assign(node_->values.size(), 0.0);
}

double Tensor::item() const {
    if (numel() != 1)
        throw DimensionError("item() on tensor with " + std::to_string(numel()) + " elements");
    return node_->values[0];
}

namespace {

std::size_t flat_index(const Shape& shape, std::initializer_list<std::size_t> idx) {
    if (idx.size() != shape.size())
        throw DimensionError("index rank " + std::to_string(idx.size()) +
                             " does not match tensor rank " + std::to_string(shape.size()));
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
        if (i >= shape[axis])
            throw DimensionError("index " + std::to_string(i) + " out of range for axis " +
                                 std::to_string(axis) + " of " + shape_str(shape));
        flat = flat * shape[axis] + i;
        ++axis;
    }
    return flat;
}

} // namespace

double Tensor::at(std::initializer_list<std::size_t> idx) const {
    return node_->values[flat_index(node_->shape, idx)];
}

double& Tensor::at(std::initializer_list<std::size_t> idx) {
    return node_->values[flat_index(node_->shape, idx)];
}

bool Tensor::all_finite() const {
    if (!node_) return true;
    for (double v : node_->values)
        if (!std::isfinite(v)) return false;
    return true;
}

namespace {
thread_local Tape* g_current_tape = nullptr;
}

Tape* Tape::current() { return g_current_tape; }

void Tape::record(const char* op, std::shared_ptr<detail::TensorNode> out,
                  std::function<void()> fn) {
    entries_.push_back(Entry{op, std::move(out), std::move(fn)});
}

void Tape::backward(const Tensor& root, bool release_entries) {
    if (!root.defined()) throw DimensionError("backward on undefined tensor");
    if (root.numel() != 1)
        throw DimensionError("backward root must be scalar, got " + shape_str(root.shape()));
    root.node()->ensure_grad();
    root.node()->grad[0] = 1.0;
    for (std::size_t i = entries_.size(); i-- > 0;) {
        Entry& e = entries_[i];
        if (e.fn) e.fn();
        if (release_entries) {
            e.fn = nullptr;
            e.out.reset();
        }
    }
    if (release_entries) entries_.clear();
}

const char* Tape::first_nonfinite_op() const {
    for (const Entry& e : entries_) {
        if (!e.out) continue;
        for (double v : e.out->values)
            if (!std::isfinite(v)) return e.op;
    }
    return nullptr;
}

TapeGuard::TapeGuard(Tape& tape) : prev_(g_current_tape) { g_current_tape = &tape; }
TapeGuard::~TapeGuard() { g_current_tape = prev_; }

} // namespace mmn
