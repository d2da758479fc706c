#include "mmn/gradcheck.hpp"

#include <cmath>
#include <sstream>

#include "mmn/errors.hpp"

namespace mmn {

std::string GradCheckReport::summary() const {
    std::ostringstream os;
    os << (pass ? "pass" : "FAIL") << " max_rel_err=" << max_rel_err << " (tol " << tol << ")";
    if (!pass)
        os << " at input " << worst_input << " element " << worst_element << ": analytic "
           << worst_analytic << " vs numeric " << worst_numeric;
    return os.str();
}

GradCheckReport gradcheck(const std::function<Tensor(std::vector<Tensor>&)>& f,
                          std::vector<Tensor> inputs, double eps, double tol) {
    if (eps <= 0.0) throw ConfigError("gradcheck: eps must be positive");
    if (tol <= 0.0) throw ConfigError("gradcheck: tol must be positive");
    for (Tensor& t : inputs) {
        if (!t.defined()) throw DimensionError("gradcheck: undefined input tensor");
        t.set_requires_grad(true);
        t.zero_grad();
    }

    auto eval = [&]() -> double {
        Tensor out = f(inputs);
        if (!out.defined() || out.numel() != 1)
            throw DimensionError("gradcheck: f must return a scalar tensor");
        return out.item();
    };

    // Determinism guard; stochastic f makes finite differences meaningless.
    const double probe1 = eval();
    const double probe2 = eval();
    if (probe1 != probe2)
        throw ConfigError("gradcheck: f is not deterministic (" + std::to_string(probe1) +
                          " vs " + std::to_string(probe2) + ")");

    // Analytic pass.
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        TapeGuard guard(tape);
        Tensor loss = f(inputs);
        if (!loss.defined() || loss.numel() != 1)
            throw DimensionError("gradcheck: f must return a scalar tensor");
        if (const char* bad = tape.first_nonfinite_op())
            throw NumericError(std::string("gradcheck: non-finite values produced by op '") +
                               bad + "'");
        tape.backward(loss);
        for (Tensor& t : inputs) analytic.push_back(t.grad());
    }

    GradCheckReport rep;
    rep.pass = true;
    rep.tol = tol;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        auto& vals = inputs[i].values();
        for (std::size_t j = 0; j < vals.size(); ++j) {
            const double saved = vals[j];
            vals[j] = saved + eps;
            const double up = eval();
            vals[j] = saved - eps;
            const double down = eval();
            vals[j] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[i][j];
            const double rel =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
            ++rep.checked_elements;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_input = i;
                rep.worst_element = j;
                rep.worst_analytic = a;
                rep.worst_numeric = numeric;
            }
        }
    }
    rep.pass = rep.max_rel_err < tol;
    return rep;
}

} // namespace mmn
