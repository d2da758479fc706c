#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mmn/tensor.hpp"

namespace mmn {

struct GradCheckReport {
    bool pass = false;
    double max_rel_err = 0.0;
    double tol = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_element = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t checked_elements = 0;

    std::string summary() const;
};

// Compares tape gradients of a scalar-valued f against central finite
// differences on every element of every input.  Relative error uses
// |a - n| / max(|a|, |n|, 1e-6).  f must be deterministic; stochastic
// pieces (dropout) need a freshly reseeded rng inside f.
// Throws NumericError, naming the op, if the recorded forward contains a
// non-finite intermediate.
GradCheckReport gradcheck(const std::function<Tensor(std::vector<Tensor>&)>& f,
                          std::vector<Tensor> inputs, double eps = 1e-5, double tol = 1e-4);

struct GradCheckCase {
    std::string name;
    GradCheckReport report;
};

// Runs gradcheck over every primitive op plus a small end-to-end model.
std::vector<GradCheckCase> gradcheck_suite(std::uint64_t seed = 0);

} // namespace mmn
