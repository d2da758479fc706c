#include "mmn/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <string>

#include "mmn/errors.hpp"

namespace mmn {
namespace ops {
namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

bool tracing(std::initializer_list<const Tensor*> ins) {
    if (!Tape::current()) return false;
    for (const Tensor* t : ins)
        if (t && t->defined() && t->requires_grad()) return true;
    return false;
}

void rec(const char* op, const Tensor& out, std::function<void()> fn) {
    // An output whose grad is still unallocated at replay time never fed the
    // backward root, so its contribution is exactly zero and the closure can
    // be skipped.  Closures may therefore assume a full-size output grad.
    auto on = out.node_ptr();
    Tape::current()->record(op, on, [on, fn = std::move(fn)]() {
        if (on->grad.empty()) return;
        fn();
    });
}

void check_defined(const char* op, const Tensor& t) {
    if (!t.defined()) throw DimensionError(std::string(op) + ": undefined operand");
}

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
    throw DimensionError(std::string(op) + ": " + detail);
}

// ---- elementwise binary -------------------------------------------------

// mode 0: equal shapes; 1: b tiles into a; 2: a tiles into b.
int broadcast_mode(const char* op, const Shape& a, const Shape& b) {
    if (a == b) return 0;
    auto is_suffix = [](const Shape& big, const Shape& small) {
        if (small.size() == 1 && small[0] == 1) return true;
        if (small.size() > big.size()) return false;
        std::size_t off = big.size() - small.size();
        for (std::size_t i = 0; i < small.size(); ++i)
            if (big[off + i] != small[i]) return false;
        return true;
    };
    if (is_suffix(a, b)) return 1;
    if (is_suffix(b, a)) return 2;
    shape_fail(op, "incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

// dfa/dfb give the local partial wrt a and b at one element pair.
template <class F, class DFA, class DFB>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, F f, DFA dfa, DFB dfb) {
    check_defined(op, a);
    check_defined(op, b);
    int mode = broadcast_mode(op, a.shape(), b.shape());
    const Shape& out_shape = (mode == 2) ? b.shape() : a.shape();
    bool rg = tracing({&a, &b});
    Tensor out = Tensor::zeros(out_shape, rg);

    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    const std::size_t n = ov.size();
    const std::size_t na = av.size();
    const std::size_t nb = bv.size();
    if (mode == 0) {
        for (std::size_t i = 0; i < n; ++i) ov[i] = f(av[i], bv[i]);
    } else if (mode == 1) {
        for (std::size_t i = 0; i < n; ++i) ov[i] = f(av[i], bv[i % nb]);
    } else {
        for (std::size_t i = 0; i < n; ++i) ov[i] = f(av[i % na], bv[i]);
    }

    if (rg) {
        auto an = a.node_ptr();
        auto bn = b.node_ptr();
        auto on = out.node_ptr();
        rec(op, out, [an, bn, on, mode, dfa, dfb]() {
            const auto& g = on->grad;
            const auto& A = an->values;
            const auto& B = bn->values;
            const std::size_t n = g.size();
            const std::size_t na = A.size();
            const std::size_t nb = B.size();
            if (an->requires_grad) {
                an->ensure_grad();
                auto& da = an->grad;
                if (mode == 0)
                    for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * dfa(A[i], B[i]);
                else if (mode == 1)
                    for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * dfa(A[i], B[i % nb]);
                else
                    for (std::size_t i = 0; i < n; ++i) da[i % na] += g[i] * dfa(A[i % na], B[i]);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                auto& db = bn->grad;
                if (mode == 0)
                    for (std::size_t i = 0; i < n; ++i) db[i] += g[i] * dfb(A[i], B[i]);
                else if (mode == 1)
                    for (std::size_t i = 0; i < n; ++i) db[i % nb] += g[i] * dfb(A[i], B[i % nb]);
                else
                    for (std::size_t i = 0; i < n; ++i) db[i] += g[i] * dfb(A[i % na], B[i]);
            }
        });
    }
    return out;
}

// ---- unary --------------------------------------------------------------

// df sees both the input and output value of the element.
template <class F, class DF>
Tensor unary_op(const char* op, const Tensor& x, F f, DF df) {
    check_defined(op, x);
    bool rg = tracing({&x});
    Tensor out = Tensor::zeros(x.shape(), rg);
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = f(xv[i]);
    if (rg) {
        auto xn = x.node_ptr();
        auto on = out.node_ptr();
        rec(op, out, [xn, on, df]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const auto& g = on->grad;
            for (std::size_t i = 0; i < g.size(); ++i)
                xn->grad[i] += g[i] * df(xn->values[i], on->values[i]);
        });
    }
    return out;
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_deriv(double x) {
    const double phi_cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
    const double phi_pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return phi_cdf + x * phi_pdf;
}

// ---- axis reductions ----------------------------------------------------

std::vector<std::size_t> normalize_axes(const char* op, const Shape& shape,
                                        std::vector<std::size_t> axes) {
    std::sort(axes.begin(), axes.end());
    axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
    for (std::size_t a : axes)
        if (a >= shape.size())
            shape_fail(op, "axis " + std::to_string(a) + " out of range for " + shape_str(shape));
    return axes;
}

// Maps an input flat index to the flat index of the reduced output
// (keepdims layout; squeezing later only relabels the same buffer).
struct ReduceMap {
    Shape in_shape;
    std::vector<std::size_t> in_strides;
    std::vector<std::size_t> out_strides; // 0 on reduced axes
    std::size_t out_numel = 1;
    std::size_t group = 1; // elements folded into each output slot

    static ReduceMap make(const Shape& in, const std::vector<std::size_t>& axes) {
        ReduceMap m;
        m.in_shape = in;
        const std::size_t r = in.size();
        m.in_strides.assign(r, 1);
        for (std::size_t i = r; i-- > 1;) m.in_strides[i - 1] = m.in_strides[i] * in[i];
        std::vector<bool> reduced(r, false);
        for (std::size_t a : axes) reduced[a] = true;
        Shape out_kd(r);
        for (std::size_t i = 0; i < r; ++i) out_kd[i] = reduced[i] ? 1 : in[i];
        m.out_strides.assign(r, 1);
        for (std::size_t i = r; i-- > 1;) m.out_strides[i - 1] = m.out_strides[i] * out_kd[i];
        for (std::size_t i = 0; i < r; ++i) {
            if (reduced[i]) {
                m.out_strides[i] = 0;
                m.group *= in[i];
            }
        }
        m.out_numel = shape_numel(out_kd);
        return m;
    }

    std::size_t out_index(std::size_t flat) const {
        std::size_t o = 0;
        for (std::size_t i = 0; i < in_shape.size(); ++i)
            o += ((flat / in_strides[i]) % in_shape[i]) * out_strides[i];
        return o;
    }
};

Shape reduced_shape(const Shape& in, const std::vector<std::size_t>& axes, bool keepdims) {
    std::vector<bool> reduced(in.size(), false);
    for (std::size_t a : axes) reduced[a] = true;
    Shape out;
    for (std::size_t i = 0; i < in.size(); ++i) {
        if (reduced[i]) {
            if (keepdims) out.push_back(1);
        } else {
            out.push_back(in[i]);
        }
    }
    if (out.empty()) out.push_back(1);
    return out;
}

Tensor reduce_op(const char* op, const Tensor& x, const std::vector<std::size_t>& axes_in,
                 bool keepdims, bool take_mean) {
    check_defined(op, x);
    auto axes = normalize_axes(op, x.shape(), axes_in);
    ReduceMap map = ReduceMap::make(x.shape(), axes);
    bool rg = tracing({&x});
    Tensor out = Tensor::zeros(reduced_shape(x.shape(), axes, keepdims), rg);

    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < xv.size(); ++i) ov[map.out_index(i)] += xv[i];
    const double scale = take_mean ? 1.0 / static_cast<double>(map.group) : 1.0;
    if (take_mean)
        for (double& v : ov) v *= scale;

    if (rg) {
        auto xn = x.node_ptr();
        auto on = out.node_ptr();
        rec(op, out, [xn, on, map, scale]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const auto& g = on->grad;
            for (std::size_t i = 0; i < xn->grad.size(); ++i)
                xn->grad[i] += g[map.out_index(i)] * scale;
        });
    }
    return out;
}

// ---- dense kernels ------------------------------------------------------

Tensor linear_impl(const char* op, const Tensor& x, const Tensor& w, const Tensor* b) {
    check_defined(op, x);
    check_defined(op, w);
    if (x.rank() < 1) shape_fail(op, "x must have rank >= 1");
    if (w.rank() != 2)
        shape_fail(op, "weight must be rank 2, got " + shape_str(w.shape()));
    const std::size_t K = x.shape().back();
    if (w.dim(0) != K)
        shape_fail(op, "x last dim " + std::to_string(K) + " != weight rows " +
                           std::to_string(w.dim(0)) + " (x " + shape_str(x.shape()) +
                           ", w " + shape_str(w.shape()) + ")");
    const std::size_t N = w.dim(1);
    if (b) {
        check_defined(op, *b);
        if (b->rank() != 1 || b->dim(0) != N)
            shape_fail(op, "bias must be [" + std::to_string(N) + "], got " +
                               shape_str(b->shape()));
    }
    const std::size_t M = x.numel() / K;
    Shape out_shape = x.shape();
    out_shape.back() = N;

    bool rg = b ? tracing({&x, &w, b}) : tracing({&x, &w});
    Tensor out = Tensor::zeros(std::move(out_shape), rg);

    CMapM X(x.data(), M, K);
    CMapM W(w.data(), K, N);
    MapM O(out.data(), M, N);
    O.noalias() = X * W;
    if (b) {
        Eigen::Map<const Eigen::VectorXd> bias(b->data(), N);
        O.rowwise() += bias.transpose();
    }

    if (rg) {
        auto xn = x.node_ptr();
        auto wn = w.node_ptr();
        auto bnn = b ? b->node_ptr() : nullptr;
        auto on = out.node_ptr();
        rec(op, out, [xn, wn, bnn, on, M, K, N]() {
            CMapM G(on->grad.data(), M, N);
            if (xn->requires_grad) {
                xn->ensure_grad();
                CMapM W(wn->values.data(), K, N);
                MapM GX(xn->grad.data(), M, K);
                GX.noalias() += G * W.transpose();
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                CMapM X(xn->values.data(), M, K);
                MapM GW(wn->grad.data(), K, N);
                GW.noalias() += X.transpose() * G;
            }
            if (bnn && bnn->requires_grad) {
                bnn->ensure_grad();
                Eigen::Map<Eigen::VectorXd> GB(bnn->grad.data(), N);
                GB.noalias() += G.colwise().sum().transpose();
            }
        });
    }
    return out;
}

struct TvLayout {
    std::size_t B, T, V, C;
};

TvLayout tv_layout(const char* op, const Tensor& x) {
    if (x.rank() == 3) return {1, x.dim(0), x.dim(1), x.dim(2)};
    if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
    shape_fail(op, "expected rank 3 or 4 [(B,)T,V,C], got " + shape_str(x.shape()));
}

// Gathers the temporal conv patch matrix [B*T*V, k*Ci].
std::vector<double> im2col_time(const std::vector<double>& xv, const TvLayout& L,
                                std::size_t k, std::size_t pad) {
    std::vector<double> col(L.B * L.T * L.V * k * L.C, 0.0);
    const std::size_t row_len = k * L.C;
    std::size_t row = 0;
    for (std::size_t b = 0; b < L.B; ++b)
        for (std::size_t t = 0; t < L.T; ++t)
            for (std::size_t v = 0; v < L.V; ++v, ++row) {
                double* dst = col.data() + row * row_len;
                for (std::size_t tau = 0; tau < k; ++tau) {
                    const std::ptrdiff_t src_t =
                        static_cast<std::ptrdiff_t>(t + tau) - static_cast<std::ptrdiff_t>(pad);
                    if (src_t < 0 || src_t >= static_cast<std::ptrdiff_t>(L.T)) continue;
                    const double* src =
                        xv.data() + ((b * L.T + src_t) * L.V + v) * L.C;
                    std::memcpy(dst + tau * L.C, src, L.C * sizeof(double));
                }
            }
    return col;
}

// Gathers the (time, joint) conv patch matrix [B*T*V, kt*kv*Ci].
std::vector<double> im2col_tv(const std::vector<double>& xv, const TvLayout& L,
                              std::size_t kt, std::size_t kv, std::size_t pt, std::size_t pv) {
    const std::size_t row_len = kt * kv * L.C;
    std::vector<double> col(L.B * L.T * L.V * row_len, 0.0);
    std::size_t row = 0;
    for (std::size_t b = 0; b < L.B; ++b)
        for (std::size_t t = 0; t < L.T; ++t)
            for (std::size_t v = 0; v < L.V; ++v, ++row) {
                double* dst = col.data() + row * row_len;
                for (std::size_t tau = 0; tau < kt; ++tau) {
                    const std::ptrdiff_t src_t =
                        static_cast<std::ptrdiff_t>(t + tau) - static_cast<std::ptrdiff_t>(pt);
                    if (src_t < 0 || src_t >= static_cast<std::ptrdiff_t>(L.T)) continue;
                    for (std::size_t nu = 0; nu < kv; ++nu) {
                        const std::ptrdiff_t src_v =
                            static_cast<std::ptrdiff_t>(v + nu) - static_cast<std::ptrdiff_t>(pv);
                        if (src_v < 0 || src_v >= static_cast<std::ptrdiff_t>(L.V)) continue;
                        const double* src =
                            xv.data() + ((b * L.T + src_t) * L.V + src_v) * L.C;
                        std::memcpy(dst + (tau * kv + nu) * L.C, src, L.C * sizeof(double));
                    }
                }
            }
    return col;
}

Tensor conv_temporal_impl(const Tensor& x, const Tensor& w, const Tensor* b) {
    const char* op = "conv_temporal";
    check_defined(op, x);
    check_defined(op, w);
    TvLayout L = tv_layout(op, x);
    if (w.rank() != 3)
        shape_fail(op, "weight must be [k,C_in,C_out], got " + shape_str(w.shape()));
    const std::size_t k = w.dim(0);
    if (k % 2 == 0) throw ConfigError("conv_temporal: kernel size must be odd, got " + std::to_string(k));
    if (w.dim(1) != L.C)
        shape_fail(op, "weight C_in " + std::to_string(w.dim(1)) + " != input channels " +
                           std::to_string(L.C));
    const std::size_t Co = w.dim(2);
    const std::size_t pad = k / 2;
    if (b) {
        check_defined(op, *b);
        if (b->rank() != 1 || b->dim(0) != Co)
            shape_fail(op, "bias must be [" + std::to_string(Co) + "], got " + shape_str(b->shape()));
    }

    Shape out_shape = x.shape();
    out_shape.back() = Co;
    bool rg = b ? tracing({&x, &w, b}) : tracing({&x, &w});
    Tensor out = Tensor::zeros(std::move(out_shape), rg);

    const std::size_t rows = L.B * L.T * L.V;
    const std::size_t row_len = k * L.C;
    {
        std::vector<double> col = im2col_time(x.values(), L, k, pad);
        CMapM Col(col.data(), rows, row_len);
        CMapM W(w.data(), row_len, Co);
        MapM O(out.data(), rows, Co);
        O.noalias() = Col * W;
    }
    if (b) {
        MapM O(out.data(), rows, Co);
        Eigen::Map<const Eigen::VectorXd> bias(b->data(), Co);
        O.rowwise() += bias.transpose();
    }

    if (rg) {
        auto xn = x.node_ptr();
        auto wn = w.node_ptr();
        auto bnn = b ? b->node_ptr() : nullptr;
        auto on = out.node_ptr();
        rec(op, out, [xn, wn, bnn, on, L, k, pad, rows, row_len, Co]() {
            CMapM G(on->grad.data(), rows, Co);
            if (wn->requires_grad) {
                wn->ensure_grad();
                std::vector<double> col = im2col_time(xn->values, L, k, pad);
                CMapM Col(col.data(), rows, row_len);
                MapM GW(wn->grad.data(), row_len, Co);
                GW.noalias() += Col.transpose() * G;
            }
            if (bnn && bnn->requires_grad) {
                bnn->ensure_grad();
                Eigen::Map<Eigen::VectorXd> GB(bnn->grad.data(), Co);
                GB.noalias() += G.colwise().sum().transpose();
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                std::vector<double> dcol(rows * row_len);
                MapM DCol(dcol.data(), rows, row_len);
                CMapM W(wn->values.data(), row_len, Co);
                DCol.noalias() = G * W.transpose();
                std::size_t row = 0;
                for (std::size_t b2 = 0; b2 < L.B; ++b2)
                    for (std::size_t t = 0; t < L.T; ++t)
                        for (std::size_t v = 0; v < L.V; ++v, ++row) {
                            const double* src = dcol.data() + row * row_len;
                            for (std::size_t tau = 0; tau < k; ++tau) {
                                const std::ptrdiff_t src_t = static_cast<std::ptrdiff_t>(t + tau) -
                                                             static_cast<std::ptrdiff_t>(pad);
                                if (src_t < 0 || src_t >= static_cast<std::ptrdiff_t>(L.T)) continue;
                                double* dst =
                                    xn->grad.data() + ((b2 * L.T + src_t) * L.V + v) * L.C;
                                const double* s = src + tau * L.C;
                                for (std::size_t c = 0; c < L.C; ++c) dst[c] += s[c];
                            }
                        }
            }
        });
    }
    return out;
}

Tensor conv2d_impl(const Tensor& x, const Tensor& w, const Tensor* b) {
    const char* op = "conv2d";
    check_defined(op, x);
    check_defined(op, w);
    TvLayout L = tv_layout(op, x);
    if (w.rank() != 4)
        shape_fail(op, "weight must be [kt,kv,C_in,C_out], got " + shape_str(w.shape()));
    const std::size_t kt = w.dim(0);
    const std::size_t kv = w.dim(1);
    if (kt % 2 == 0 || kv % 2 == 0)
        throw ConfigError("conv2d: kernel dims must be odd, got " + std::to_string(kt) + "x" +
                          std::to_string(kv));
    if (w.dim(2) != L.C)
        shape_fail(op, "weight C_in " + std::to_string(w.dim(2)) + " != input channels " +
                           std::to_string(L.C));
    const std::size_t Co = w.dim(3);
    const std::size_t pt = kt / 2;
    const std::size_t pv = kv / 2;
    if (b) {
        check_defined(op, *b);
        if (b->rank() != 1 || b->dim(0) != Co)
            shape_fail(op, "bias must be [" + std::to_string(Co) + "], got " + shape_str(b->shape()));
    }

    Shape out_shape = x.shape();
    out_shape.back() = Co;
    bool rg = b ? tracing({&x, &w, b}) : tracing({&x, &w});
    Tensor out = Tensor::zeros(std::move(out_shape), rg);

    const std::size_t rows = L.B * L.T * L.V;
    const std::size_t row_len = kt * kv * L.C;
    {
        std::vector<double> col = im2col_tv(x.values(), L, kt, kv, pt, pv);
        CMapM Col(col.data(), rows, row_len);
        CMapM W(w.data(), row_len, Co);
        MapM O(out.data(), rows, Co);
        O.noalias() = Col * W;
    }
    if (b) {
        MapM O(out.data(), rows, Co);
        Eigen::Map<const Eigen::VectorXd> bias(b->data(), Co);
        O.rowwise() += bias.transpose();
    }

    if (rg) {
        auto xn = x.node_ptr();
        auto wn = w.node_ptr();
        auto bnn = b ? b->node_ptr() : nullptr;
        auto on = out.node_ptr();
        rec(op, out, [xn, wn, bnn, on, L, kt, kv, pt, pv, rows, row_len, Co]() {
            CMapM G(on->grad.data(), rows, Co);
            if (wn->requires_grad) {
                wn->ensure_grad();
                std::vector<double> col = im2col_tv(xn->values, L, kt, kv, pt, pv);
                CMapM Col(col.data(), rows, row_len);
                MapM GW(wn->grad.data(), row_len, Co);
                GW.noalias() += Col.transpose() * G;
            }
            if (bnn && bnn->requires_grad) {
                bnn->ensure_grad();
                Eigen::Map<Eigen::VectorXd> GB(bnn->grad.data(), Co);
                GB.noalias() += G.colwise().sum().transpose();
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                std::vector<double> dcol(rows * row_len);
                MapM DCol(dcol.data(), rows, row_len);
                CMapM W(wn->values.data(), row_len, Co);
                DCol.noalias() = G * W.transpose();
                std::size_t row = 0;
                for (std::size_t b2 = 0; b2 < L.B; ++b2)
                    for (std::size_t t = 0; t < L.T; ++t)
                        for (std::size_t v = 0; v < L.V; ++v, ++row) {
                            const double* src = dcol.data() + row * row_len;
                            for (std::size_t tau = 0; tau < kt; ++tau) {
                                const std::ptrdiff_t src_t = static_cast<std::ptrdiff_t>(t + tau) -
                                                             static_cast<std::ptrdiff_t>(pt);
                                if (src_t < 0 || src_t >= static_cast<std::ptrdiff_t>(L.T)) continue;
                                for (std::size_t nu = 0; nu < kv; ++nu) {
                                    const std::ptrdiff_t src_v =
                                        static_cast<std::ptrdiff_t>(v + nu) -
                                        static_cast<std::ptrdiff_t>(pv);
                                    if (src_v < 0 || src_v >= static_cast<std::ptrdiff_t>(L.V))
                                        continue;
                                    double* dst = xn->grad.data() +
                                                  ((b2 * L.T + src_t) * L.V + src_v) * L.C;
                                    const double* s = src + (tau * kv + nu) * L.C;
                                    for (std::size_t c = 0; c < L.C; ++c) dst[c] += s[c];
                                }
                            }
                        }
            }
        });
    }
    return out;
}

} // namespace

// ---- public ops ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

Tensor add_scalar(const Tensor& x, double c) {
    return unary_op(
        "add_scalar", x, [c](double v) { return v + c; },
        [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double c) {
    return unary_op(
        "mul_scalar", x, [c](double v) { return v * c; },
        [c](double, double) { return c; });
}

Tensor scale_batch(const Tensor& x, const Tensor& s) {
    const char* op = "scale_batch";
    check_defined(op, x);
    check_defined(op, s);
    if (x.rank() < 1) shape_fail(op, "x must have rank >= 1");
    const std::size_t B = x.dim(0);
    if (s.numel() != B || s.rank() > 2)
        shape_fail(op, "scale must be [B] or [B,1] with B=" + std::to_string(B) + ", got " +
                           shape_str(s.shape()));
    bool rg = tracing({&x, &s});
    Tensor out = Tensor::zeros(x.shape(), rg);
    const std::size_t stride = x.numel() / B;
    const auto& xv = x.values();
    const auto& sv = s.values();
    auto& ov = out.values();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < stride; ++i) ov[b * stride + i] = xv[b * stride + i] * sv[b];
    if (rg) {
        auto xn = x.node_ptr();
        auto sn = s.node_ptr();
        auto on = out.node_ptr();
        rec(op, out, [xn, sn, on, B, stride]() {
            const auto& g = on->grad;
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t i = 0; i < stride; ++i)
                        xn->grad[b * stride + i] += g[b * stride + i] * sn->values[b];
            }
            if (sn->requires_grad) {
                sn->ensure_grad();
                for (std::size_t b = 0; b < B; ++b) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < stride; ++i)
                        acc += g[b * stride + i] * xn->values[b * stride + i];
                    sn->grad[b] += acc;
                }
            }
        });
    }
    return out;
}

Tensor tanh(const Tensor& x) {
    return unary_op(
        "tanh", x, [](double v) { return std::tanh(v); },
        [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
    return unary_op(
        "sigmoid", x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& x) {
    return unary_op(
        "gelu", x, [](double v) { return gelu_value(v); },
        [](double v, double) { return gelu_deriv(v); });
}

Tensor exp(const Tensor& x) {
    return unary_op(
        "exp", x, [](double v) { return std::exp(v); },
        [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
    return unary_op(
        "log", x, [](double v) { return std::log(v); },
        [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
    return unary_op(
        "sqrt", x, [](double v) { return std::sqrt(v); },
        [](double, double y) { return 0.5 / y; });
}

Tensor softmax(const Tensor& x) {
    const char* op = "softmax";
    check_defined(op, x);
    if (x.rank() < 1) shape_fail(op, "rank must be >= 1");
    const std::size_t C = x.shape().back();
    const std::size_t rows = x.numel() / C;
    bool rg = tracing({&x});
    Tensor out = Tensor::zeros(x.shape(), rg);
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data() + r * C;
        double* o = ov.data() + r * C;
        double m = in[0];
        for (std::size_t c = 1; c < C; ++c) m = std::max(m, in[c]);
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            o[c] = std::exp(in[c] - m);
            z += o[c];
        }
        for (std::size_t c = 0; c < C; ++c) o[c] /= z;
    }
    if (rg) {
        auto xn = x.node_ptr();
        auto on = out.node_ptr();
        rec(op, out, [xn, on, rows, C]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = on->values.data() + r * C;
                const double* g = on->grad.data() + r * C;
                double dot = 0.0;
                for (std::size_t c = 0; c < C; ++c) dot += g[c] * y[c];
                double* dx = xn->grad.data() + r * C;
                for (std::size_t c = 0; c < C; ++c) dx[c] += y[c] * (g[c] - dot);
            }
        });
    }
    return out;
}

Tensor sum(const Tensor& x, const std::vector<std::size_t>& axes, bool keepdims) {
    return reduce_op("sum", x, axes, keepdims, false);
}

Tensor mean(const Tensor& x, const std::vector<std::size_t>& axes, bool keepdims) {
    return reduce_op("mean", x, axes, keepdims, true);
}

Tensor sum_all(const Tensor& x) {
    std::vector<std::size_t> axes(x.rank());
    for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
    return reduce_op("sum_all", x, axes, false, false);
}

Tensor mean_all(const Tensor& x) {
    std::vector<std::size_t> axes(x.rank());
    for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
    return reduce_op("mean_all", x, axes, false, true);
}

Tensor stddev(const Tensor& x, const std::vector<std::size_t>& axes_in, bool keepdims) {
    const char* op = "stddev";
    check_defined(op, x);
    auto axes = normalize_axes(op, x.shape(), axes_in);
    ReduceMap map = ReduceMap::make(x.shape(), axes);
    bool rg = tracing({&x});
    Tensor out = Tensor::zeros(reduced_shape(x.shape(), axes, keepdims), rg);

    const auto& xv = x.values();
    auto mu = std::make_shared<std::vector<double>>(map.out_numel, 0.0);
    for (std::size_t i = 0; i < xv.size(); ++i) (*mu)[map.out_index(i)] += xv[i];
    const double inv_n = 1.0 / static_cast<double>(map.group);
    for (double& v : *mu) v *= inv_n;
    auto& ov = out.values();
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double d = xv[i] - (*mu)[map.out_index(i)];
        ov[map.out_index(i)] += d * d;
    }
    for (double& v : ov) v = std::sqrt(v * inv_n);

    if (rg) {
        auto xn = x.node_ptr();
        auto on = out.node_ptr();
        rec(op, out, [xn, on, map, mu, inv_n]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < xn->grad.size(); ++i) {
                const std::size_t o = map.out_index(i);
                const double sd = std::max(on->values[o], 1e-12);
                xn->grad[i] += on->grad[o] * (xn->values[i] - (*mu)[o]) * inv_n / sd;
            }
        });
    }
    return out;
}

Tensor matmul(const Tensor& x, const Tensor& w) {
    if (x.defined() && x.rank() < 2)
        throw DimensionError("matmul: x must have rank >= 2, got " + shape_str(x.shape()));
    return linear_impl("matmul", x, w, nullptr);
}

Tensor linear(const Tensor& x, const Tensor& w) { return linear_impl("linear", x, w, nullptr); }

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return linear_impl("linear", x, w, &b);
}

Tensor joint_mix(const Tensor& x, const Tensor& A) {
    const char* op = "joint_mix";
    check_defined(op, x);
    check_defined(op, A);
    TvLayout L = tv_layout(op, x);
    if (A.rank() != 2 || A.dim(0) != A.dim(1) || A.dim(0) != L.V)
        shape_fail(op, "adjacency must be [" + std::to_string(L.V) + "," + std::to_string(L.V) +
                           "], got " + shape_str(A.shape()));
    bool rg = tracing({&x, &A});
    Tensor out = Tensor::zeros(x.shape(), rg);

    CMapM Am(A.data(), L.V, L.V);
    const std::size_t frames = L.B * L.T;
    for (std::size_t f = 0; f < frames; ++f) {
        CMapM X(x.data() + f * L.V * L.C, L.V, L.C);
        MapM O(out.data() + f * L.V * L.C, L.V, L.C);
        O.noalias() = Am * X;
    }

    if (rg) {
        auto xn = x.node_ptr();
        auto an = A.node_ptr();
        auto on = out.node_ptr();
        rec(op, out, [xn, an, on, L, frames]() {
            CMapM Am(an->values.data(), L.V, L.V);
            const bool gx = xn->requires_grad;
            const bool ga = an->requires_grad;
            if (gx) xn->ensure_grad();
            if (ga) an->ensure_grad();
            for (std::size_t f = 0; f < frames; ++f) {
                CMapM G(on->grad.data() + f * L.V * L.C, L.V, L.C);
                if (gx) {
                    MapM GX(xn->grad.data() + f * L.V * L.C, L.V, L.C);
                    GX.noalias() += Am.transpose() * G;
                }
                if (ga) {
                    CMapM X(xn->values.data() + f * L.V * L.C, L.V, L.C);
                    MapM GA(an->grad.data(), L.V, L.V);
                    GA.noalias() += G * X.transpose();
                }
            }
        });
    }
    return out;
}

Tensor conv_temporal(const Tensor& x, const Tensor& w) { return conv_temporal_impl(x, w, nullptr); }
Tensor conv_temporal(const Tensor& x, const Tensor& w, const Tensor& b) {
    return conv_temporal_impl(x, w, &b);
}

Tensor conv2d(const Tensor& x, const Tensor& w) { return conv2d_impl(x, w, nullptr); }
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b) { return conv2d_impl(x, w, &b); }

Tensor reshape(const Tensor& x, Shape shape) {
    const char* op = "reshape";
    check_defined(op, x);
    if (shape_numel(shape) != x.numel())
        shape_fail(op, shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
    bool rg = tracing({&x});
    Tensor out = Tensor::from_values(std::move(shape), x.values(), rg);
    if (rg) {
        auto xn = x.node_ptr();
        auto on = out.node_ptr();
        rec(op, out, [xn, on]() {
            if (!xn->requires_grad) return;
            xn->accum_grad(on->grad.data());
        });
    }
    return out;
}

Tensor slice_last(const Tensor& x, std::size_t lo, std::size_t hi) {
    const char* op = "slice_last";
    check_defined(op, x);
    const std::size_t C = x.shape().back();
    if (lo >= hi || hi > C)
        shape_fail(op, "range [" + std::to_string(lo) + "," + std::to_string(hi) +
                           ") invalid for last dim " + std::to_string(C));
    const std::size_t W = hi - lo;
    Shape out_shape = x.shape();
    out_shape.back() = W;
    bool rg = tracing({&x});
    Tensor out = Tensor::zeros(std::move(out_shape), rg);
    const std::size_t rows = x.numel() / C;
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t r = 0; r < rows; ++r)
        std::memcpy(ov.data() + r * W, xv.data() + r * C + lo, W * sizeof(double));
    if (rg) {
        auto xn = x.node_ptr();
        auto on = out.node_ptr();
        rec(op, out, [xn, on, rows, C, W, lo]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* g = on->grad.data() + r * W;
                double* dx = xn->grad.data() + r * C + lo;
                for (std::size_t c = 0; c < W; ++c) dx[c] += g[c];
            }
        });
    }
    return out;
}

Tensor concat_last(const std::vector<Tensor>& parts) {
    const char* op = "concat_last";
    if (parts.empty()) throw DimensionError("concat_last: no tensors given");
    for (const Tensor& p : parts) check_defined(op, p);
    const Shape& first = parts[0].shape();
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != first.size())
            shape_fail(op, "rank mismatch between parts");
        for (std::size_t i = 0; i + 1 < first.size(); ++i)
            if (p.shape()[i] != first[i])
                shape_fail(op, "leading dims differ: " + shape_str(first) + " vs " +
                                   shape_str(p.shape()));
        total += p.shape().back();
    }
    Shape out_shape = first;
    out_shape.back() = total;

    bool rg = false;
    if (Tape::current())
        for (const Tensor& p : parts)
            if (p.requires_grad()) rg = true;

    Tensor out = Tensor::zeros(std::move(out_shape), rg);
    const std::size_t rows = out.numel() / total;
    auto& ov = out.values();
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        const std::size_t W = p.shape().back();
        const auto& pv = p.values();
        for (std::size_t r = 0; r < rows; ++r)
            std::memcpy(ov.data() + r * total + off, pv.data() + r * W, W * sizeof(double));
        off += W;
    }
    if (rg) {
        std::vector<std::shared_ptr<detail::TensorNode>> nodes;
        std::vector<std::size_t> widths;
        for (const Tensor& p : parts) {
            nodes.push_back(p.node_ptr());
            widths.push_back(p.shape().back());
        }
        auto on = out.node_ptr();
        rec(op, out, [nodes, widths, on, rows, total]() {
            std::size_t off2 = 0;
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                const std::size_t W = widths[k];
                if (nodes[k]->requires_grad) {
                    nodes[k]->ensure_grad();
                    for (std::size_t r = 0; r < rows; ++r) {
                        const double* g = on->grad.data() + r * total + off2;
                        double* dx = nodes[k]->grad.data() + r * W;
                        for (std::size_t c = 0; c < W; ++c) dx[c] += g[c];
                    }
                }
                off2 += W;
            }
        });
    }
    return out;
}

Tensor temporal_diff(const Tensor& x) {
    const char* op = "temporal_diff";
    check_defined(op, x);
    TvLayout L = tv_layout(op, x);
    if (L.T < 2) shape_fail(op, "needs at least 2 frames, got " + std::to_string(L.T));
    Shape out_shape = x.shape();
    out_shape[x.rank() - 3] = L.T - 1;
    bool rg = tracing({&x});
    Tensor out = Tensor::zeros(std::move(out_shape), rg);
    const std::size_t frame = L.V * L.C;
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t b = 0; b < L.B; ++b)
        for (std::size_t t = 0; t + 1 < L.T; ++t) {
            const double* cur = xv.data() + (b * L.T + t) * frame;
            const double* nxt = cur + frame;
            double* o = ov.data() + (b * (L.T - 1) + t) * frame;
            for (std::size_t i = 0; i < frame; ++i) o[i] = nxt[i] - cur[i];
        }
    if (rg) {
        auto xn = x.node_ptr();
        auto on = out.node_ptr();
        rec(op, out, [xn, on, L, frame]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t b = 0; b < L.B; ++b)
                for (std::size_t t = 0; t + 1 < L.T; ++t) {
                    const double* g = on->grad.data() + (b * (L.T - 1) + t) * frame;
                    double* d_cur = xn->grad.data() + (b * L.T + t) * frame;
                    double* d_nxt = d_cur + frame;
                    for (std::size_t i = 0; i < frame; ++i) {
                        d_nxt[i] += g[i];
                        d_cur[i] -= g[i];
                    }
                }
        });
    }
    return out;
}

Tensor pad_time_front(const Tensor& x, std::size_t n) {
    const char* op = "pad_time_front";
    check_defined(op, x);
    TvLayout L = tv_layout(op, x);
    Shape out_shape = x.shape();
    out_shape[x.rank() - 3] = L.T + n;
    bool rg = tracing({&x});
    Tensor out = Tensor::zeros(std::move(out_shape), rg);
    const std::size_t frame = L.V * L.C;
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t b = 0; b < L.B; ++b)
        std::memcpy(ov.data() + (b * (L.T + n) + n) * frame, xv.data() + b * L.T * frame,
                    L.T * frame * sizeof(double));
    if (rg) {
        auto xn = x.node_ptr();
        auto on = out.node_ptr();
        rec(op, out, [xn, on, L, n, frame]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t b = 0; b < L.B; ++b) {
                const double* g = on->grad.data() + (b * (L.T + n) + n) * frame;
                double* dx = xn->grad.data() + b * L.T * frame;
                for (std::size_t i = 0; i < L.T * frame; ++i) dx[i] += g[i];
            }
        });
    }
    return out;
}

Tensor downsample_time(const Tensor& x) {
    const char* op = "downsample_time";
    check_defined(op, x);
    TvLayout L = tv_layout(op, x);
    if (L.T % 2 != 0)
        throw DimensionError("downsample_time: time extent must be even, got " +
                             std::to_string(L.T));
    const std::size_t To = L.T / 2;
    Shape out_shape = x.shape();
    out_shape[x.rank() - 3] = To;
    bool rg = tracing({&x});
    Tensor out = Tensor::zeros(std::move(out_shape), rg);
    const std::size_t frame = L.V * L.C;
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t b = 0; b < L.B; ++b)
        for (std::size_t t = 0; t < To; ++t) {
            const double* a = xv.data() + (b * L.T + 2 * t) * frame;
            double* o = ov.data() + (b * To + t) * frame;
            for (std::size_t i = 0; i < frame; ++i) o[i] = 0.5 * (a[i] + a[frame + i]);
        }
    if (rg) {
        auto xn = x.node_ptr();
        auto on = out.node_ptr();
        rec(op, out, [xn, on, L, To, frame]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t b = 0; b < L.B; ++b)
                for (std::size_t t = 0; t < To; ++t) {
                    const double* g = on->grad.data() + (b * To + t) * frame;
                    double* dx = xn->grad.data() + (b * L.T + 2 * t) * frame;
                    for (std::size_t i = 0; i < frame; ++i) {
                        dx[i] += 0.5 * g[i];
                        dx[frame + i] += 0.5 * g[i];
                    }
                }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const char* op = "layer_norm";
    check_defined(op, x);
    check_defined(op, gain);
    check_defined(op, bias);
    const std::size_t C = x.shape().back();
    if (gain.rank() != 1 || gain.dim(0) != C || bias.rank() != 1 || bias.dim(0) != C)
        shape_fail(op, "gain/bias must be [" + std::to_string(C) + "], got " +
                           shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
    if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive");
    const std::size_t rows = x.numel() / C;
    bool rg = tracing({&x, &gain, &bias});
    Tensor out = Tensor::zeros(x.shape(), rg);

    auto mu = std::make_shared<std::vector<double>>(rows);
    auto inv = std::make_shared<std::vector<double>>(rows);
    const auto& xv = x.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    auto& ov = out.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data() + r * C;
        double m = 0.0;
        for (std::size_t c = 0; c < C; ++c) m += in[c];
        m /= static_cast<double>(C);
        double var = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            const double d = in[c] - m;
            var += d * d;
        }
        var /= static_cast<double>(C);
        const double iv = 1.0 / std::sqrt(var + eps);
        (*mu)[r] = m;
        (*inv)[r] = iv;
        double* o = ov.data() + r * C;
        for (std::size_t c = 0; c < C; ++c) o[c] = (in[c] - m) * iv * gv[c] + bv[c];
    }

    if (rg) {
        auto xn = x.node_ptr();
        auto gn = gain.node_ptr();
        auto bn = bias.node_ptr();
        auto on = out.node_ptr();
        rec(op, out, [xn, gn, bn, on, mu, inv, rows, C]() {
            const auto& g = on->grad;
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            if (xn->requires_grad) xn->ensure_grad();
            std::vector<double> h(C), xhat(C);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* in = xn->values.data() + r * C;
                const double* gr = g.data() + r * C;
                const double m = (*mu)[r];
                const double iv = (*inv)[r];
                for (std::size_t c = 0; c < C; ++c) xhat[c] = (in[c] - m) * iv;
                if (gn->requires_grad)
                    for (std::size_t c = 0; c < C; ++c) gn->grad[c] += gr[c] * xhat[c];
                if (bn->requires_grad)
                    for (std::size_t c = 0; c < C; ++c) bn->grad[c] += gr[c];
                if (xn->requires_grad) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t c = 0; c < C; ++c) {
                        h[c] = gr[c] * gn->values[c];
                        m1 += h[c];
                        m2 += h[c] * xhat[c];
                    }
                    m1 /= static_cast<double>(C);
                    m2 /= static_cast<double>(C);
                    double* dx = xn->grad.data() + r * C;
                    for (std::size_t c = 0; c < C; ++c)
                        dx[c] += iv * (h[c] - m1 - xhat[c] * m2);
                }
            }
        });
    }
    return out;
}

Tensor standardize_tv(const Tensor& x, double eps) {
    const char* op = "standardize_tv";
    check_defined(op, x);
    if (eps <= 0.0) throw ConfigError("standardize_tv: eps must be positive");
    TvLayout L = tv_layout(op, x);
    const std::size_t n = L.T * L.V;
    bool rg = tracing({&x});
    Tensor out = Tensor::zeros(x.shape(), rg);

    // Per (sample, channel) statistics over the T and V axes.
    auto mu = std::make_shared<std::vector<double>>(L.B * L.C, 0.0);
    auto sigma = std::make_shared<std::vector<double>>(L.B * L.C, 0.0);
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t b = 0; b < L.B; ++b) {
        double* m = mu->data() + b * L.C;
        const double* base = xv.data() + b * n * L.C;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < L.C; ++c) m[c] += base[i * L.C + c];
        for (std::size_t c = 0; c < L.C; ++c) m[c] /= static_cast<double>(n);
        double* s = sigma->data() + b * L.C;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < L.C; ++c) {
                const double d = base[i * L.C + c] - m[c];
                s[c] += d * d;
            }
        for (std::size_t c = 0; c < L.C; ++c)
            s[c] = std::max(std::sqrt(s[c] / static_cast<double>(n)), eps);
        double* o = ov.data() + b * n * L.C;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < L.C; ++c)
                o[i * L.C + c] = (base[i * L.C + c] - m[c]) / s[c];
    }

    if (rg) {
        auto xn = x.node_ptr();
        auto on = out.node_ptr();
        rec(op, out, [xn, on, mu, sigma, L, n, eps]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            std::vector<double> g1(L.C), g2(L.C);
            for (std::size_t b = 0; b < L.B; ++b) {
                const double* m = mu->data() + b * L.C;
                const double* s = sigma->data() + b * L.C;
                const double* g = on->grad.data() + b * n * L.C;
                const double* y = on->values.data() + b * n * L.C;
                std::fill(g1.begin(), g1.end(), 0.0);
                std::fill(g2.begin(), g2.end(), 0.0);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t c = 0; c < L.C; ++c) {
                        g1[c] += g[i * L.C + c];
                        g2[c] += g[i * L.C + c] * y[i * L.C + c];
                    }
                for (std::size_t c = 0; c < L.C; ++c) {
                    g1[c] /= static_cast<double>(n);
                    g2[c] /= static_cast<double>(n);
                }
                double* dx = xn->grad.data() + b * n * L.C;
                const double* in = xn->values.data() + b * n * L.C;
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t c = 0; c < L.C; ++c) {
                        const double gi = g[i * L.C + c];
                        if (s[c] > eps) {
                            const double yh = (in[i * L.C + c] - m[c]) / s[c];
                            dx[i * L.C + c] += (gi - g1[c] - yh * g2[c]) / s[c];
                        } else {
                            // sigma clamped to eps: treated as a constant.
                            dx[i * L.C + c] += (gi - g1[c]) / s[c];
                        }
                    }
            }
        });
    }
    return out;
}

Tensor batch_norm(const Tensor& x, BatchNormState& state, bool training, double momentum,
                  double eps) {
    const char* op = "batch_norm";
    check_defined(op, x);
    if (x.rank() < 2) shape_fail(op, "rank must be >= 2, got " + shape_str(x.shape()));
    const std::size_t C = x.shape().back();
    if (state.running_mean.size() != C || state.running_var.size() != C)
        throw ConfigError("batch_norm: state tracks " + std::to_string(state.running_mean.size()) +
                          " channels, input has " + std::to_string(C));
    if (momentum <= 0.0 || momentum > 1.0)
        throw ConfigError("batch_norm: momentum must be in (0,1]");
    if (eps <= 0.0) throw ConfigError("batch_norm: eps must be positive");
    const std::size_t rows = x.numel() / C;
    bool rg = tracing({&x});
    Tensor out = Tensor::zeros(x.shape(), rg);

    auto mu = std::make_shared<std::vector<double>>(C, 0.0);
    auto inv = std::make_shared<std::vector<double>>(C, 0.0);
    const auto& xv = x.values();
    auto& ov = out.values();
    if (training) {
        std::vector<double> var(C, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < C; ++c) (*mu)[c] += xv[r * C + c];
        for (std::size_t c = 0; c < C; ++c) (*mu)[c] /= static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < C; ++c) {
                const double d = xv[r * C + c] - (*mu)[c];
                var[c] += d * d;
            }
        for (std::size_t c = 0; c < C; ++c) {
            var[c] /= static_cast<double>(rows);
            (*inv)[c] = 1.0 / std::sqrt(var[c] + eps);
        }
        if (!state.initialized) {
            state.running_mean = *mu;
            state.running_var = var;
            state.initialized = true;
        } else {
            for (std::size_t c = 0; c < C; ++c) {
                state.running_mean[c] = (1.0 - momentum) * state.running_mean[c] + momentum * (*mu)[c];
                state.running_var[c] = (1.0 - momentum) * state.running_var[c] + momentum * var[c];
            }
        }
    } else {
        if (!state.initialized)
            throw ConfigError("batch_norm: eval mode before any training batch seeded the "
                              "running statistics");
        for (std::size_t c = 0; c < C; ++c) {
            (*mu)[c] = state.running_mean[c];
            (*inv)[c] = 1.0 / std::sqrt(state.running_var[c] + eps);
        }
    }
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < C; ++c)
            ov[r * C + c] = (xv[r * C + c] - (*mu)[c]) * (*inv)[c];

    if (rg) {
        auto xn = x.node_ptr();
        auto on = out.node_ptr();
        rec(op, out, [xn, on, mu, inv, rows, C, training]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const auto& g = on->grad;
            if (!training) {
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < C; ++c)
                        xn->grad[r * C + c] += g[r * C + c] * (*inv)[c];
                return;
            }
            std::vector<double> g1(C, 0.0), g2(C, 0.0);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < C; ++c) {
                    g1[c] += g[r * C + c];
                    g2[c] += g[r * C + c] * on->values[r * C + c];
                }
            for (std::size_t c = 0; c < C; ++c) {
                g1[c] /= static_cast<double>(rows);
                g2[c] /= static_cast<double>(rows);
            }
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < C; ++c) {
                    const double yh = on->values[r * C + c];
                    xn->grad[r * C + c] += (g[r * C + c] - g1[c] - yh * g2[c]) * (*inv)[c];
                }
        });
    }
    return out;
}

Tensor dropout(const Tensor& x, double p, bool training, std::mt19937_64* rng) {
    const char* op = "dropout";
    check_defined(op, x);
    if (p < 0.0 || p >= 1.0)
        throw ConfigError("dropout: p must be in [0,1), got " + std::to_string(p));
    if (!training || p == 0.0) return x;
    if (!rng) throw ConfigError("dropout: rng required in training mode");

    bool rg = tracing({&x});
    Tensor out = Tensor::zeros(x.shape(), rg);
    auto mask = std::make_shared<std::vector<std::uint8_t>>(x.numel());
    const double scale = 1.0 / (1.0 - p);
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const bool keep = dist(*rng) >= p;
        (*mask)[i] = keep;
        ov[i] = keep ? xv[i] * scale : 0.0;
    }
    if (rg) {
        auto xn = x.node_ptr();
        auto on = out.node_ptr();
        rec(op, out, [xn, on, mask, scale]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < xn->grad.size(); ++i)
                if ((*mask)[i]) xn->grad[i] += on->grad[i] * scale;
        });
    }
    return out;
}

Tensor ffn_inner(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                 const Tensor& b2, double p, bool training, std::mt19937_64* rng) {
    const char* op = "ffn_inner";
    check_defined(op, x);
    check_defined(op, w1);
    check_defined(op, b1);
    check_defined(op, w2);
    check_defined(op, b2);
    if (p < 0.0 || p >= 1.0)
        throw ConfigError("ffn_inner: dropout p must be in [0,1), got " + std::to_string(p));
    const std::size_t C = x.shape().back();
    if (w1.rank() != 2 || w1.dim(0) != C)
        shape_fail(op, "w1 must be [" + std::to_string(C) + ",H], got " + shape_str(w1.shape()));
    const std::size_t H = w1.dim(1);
    if (b1.rank() != 1 || b1.dim(0) != H)
        shape_fail(op, "b1 must be [" + std::to_string(H) + "]");
    if (w2.rank() != 2 || w2.dim(0) != H)
        shape_fail(op, "w2 must be [" + std::to_string(H) + ",C_out], got " + shape_str(w2.shape()));
    const std::size_t Co = w2.dim(1);
    if (b2.rank() != 1 || b2.dim(0) != Co)
        shape_fail(op, "b2 must be [" + std::to_string(Co) + "]");
    const bool drop = training && p > 0.0;
    if (drop && !rng) throw ConfigError("ffn_inner: rng required in training mode");

    const std::size_t M = x.numel() / C;
    Shape out_shape = x.shape();
    out_shape.back() = Co;
    bool rg = tracing({&x, &w1, &b1, &w2, &b2});
    Tensor out = Tensor::zeros(std::move(out_shape), rg);

    auto h = std::make_shared<std::vector<double>>(M * H);
    auto mask = std::make_shared<std::vector<std::uint8_t>>();
    const double scale = drop ? 1.0 / (1.0 - p) : 1.0;
    {
        CMapM X(x.data(), M, C);
        CMapM W1(w1.data(), C, H);
        MapM Hm(h->data(), M, H);
        Hm.noalias() = X * W1;
        Eigen::Map<const Eigen::VectorXd> bias1(b1.data(), H);
        Hm.rowwise() += bias1.transpose();

        std::vector<double> d(M * H);
        if (drop) {
            mask->resize(M * H);
            std::uniform_real_distribution<double> dist(0.0, 1.0);
            for (std::size_t i = 0; i < d.size(); ++i) {
                const bool keep = dist(*rng) >= p;
                (*mask)[i] = keep;
                d[i] = keep ? gelu_value((*h)[i]) * scale : 0.0;
            }
        } else {
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = gelu_value((*h)[i]);
        }
        CMapM D(d.data(), M, H);
        CMapM W2(w2.data(), H, Co);
        MapM O(out.data(), M, Co);
        O.noalias() = D * W2;
        Eigen::Map<const Eigen::VectorXd> bias2(b2.data(), Co);
        O.rowwise() += bias2.transpose();
    }

    if (rg) {
        auto xn = x.node_ptr();
        auto w1n = w1.node_ptr();
        auto b1n = b1.node_ptr();
        auto w2n = w2.node_ptr();
        auto b2n = b2.node_ptr();
        auto on = out.node_ptr();
        rec(op, out, [xn, w1n, b1n, w2n, b2n, on, h, mask, drop, scale, M, C, H, Co]() {
            CMapM G(on->grad.data(), M, Co);
            // Recompute the dropped activation from the stored pre-activation.
            std::vector<double> d(M * H);
            if (drop) {
                for (std::size_t i = 0; i < d.size(); ++i)
                    d[i] = (*mask)[i] ? gelu_value((*h)[i]) * scale : 0.0;
            } else {
                for (std::size_t i = 0; i < d.size(); ++i) d[i] = gelu_value((*h)[i]);
            }
            if (w2n->requires_grad) {
                w2n->ensure_grad();
                CMapM D(d.data(), M, H);
                MapM GW2(w2n->grad.data(), H, Co);
                GW2.noalias() += D.transpose() * G;
            }
            if (b2n->requires_grad) {
                b2n->ensure_grad();
                Eigen::Map<Eigen::VectorXd> GB2(b2n->grad.data(), Co);
                GB2.noalias() += G.colwise().sum().transpose();
            }
            // dh = (G W2^T) o mask*scale o gelu'(h), reusing d's buffer.
            {
                MapM DH(d.data(), M, H);
                CMapM W2(w2n->values.data(), H, Co);
                DH.noalias() = G * W2.transpose();
                if (drop) {
                    for (std::size_t i = 0; i < d.size(); ++i)
                        d[i] = (*mask)[i] ? d[i] * scale * gelu_deriv((*h)[i]) : 0.0;
                } else {
                    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= gelu_deriv((*h)[i]);
                }
            }
            CMapM DH(d.data(), M, H);
            if (w1n->requires_grad) {
                w1n->ensure_grad();
                CMapM X(xn->values.data(), M, C);
                MapM GW1(w1n->grad.data(), C, H);
                GW1.noalias() += X.transpose() * DH;
            }
            if (b1n->requires_grad) {
                b1n->ensure_grad();
                Eigen::Map<Eigen::VectorXd> GB1(b1n->grad.data(), H);
                GB1.noalias() += DH.colwise().sum().transpose();
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                CMapM W1(w1n->values.data(), C, H);
                MapM GX(xn->grad.data(), M, C);
                GX.noalias() += DH * W1.transpose();
            }
        });
    }
    return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    const char* op = "cross_entropy";
    check_defined(op, logits);
    if (logits.rank() != 2)
        shape_fail(op, "logits must be [B,K], got " + shape_str(logits.shape()));
    const std::size_t B = logits.dim(0);
    const std::size_t K = logits.dim(1);
    if (labels.size() != B)
        shape_fail(op, std::to_string(labels.size()) + " labels for batch of " + std::to_string(B));
    for (std::size_t b = 0; b < B; ++b)
        if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= K)
            throw DataError("cross_entropy: label " + std::to_string(labels[b]) + " at index " +
                            std::to_string(b) + " outside [0," + std::to_string(K) + ")");

    bool rg = tracing({&logits});
    Tensor out = Tensor::zeros({1}, rg);
    auto probs = std::make_shared<std::vector<double>>(B * K);
    const auto& lv = logits.values();
    double total = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const double* row = lv.data() + b * K;
        double m = row[0];
        for (std::size_t k = 1; k < K; ++k) m = std::max(m, row[k]);
        double z = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            const double e = std::exp(row[k] - m);
            (*probs)[b * K + k] = e;
            z += e;
        }
        for (std::size_t k = 0; k < K; ++k) (*probs)[b * K + k] /= z;
        total += m + std::log(z) - row[labels[b]];
    }
    out.values()[0] = total / static_cast<double>(B);

    if (rg) {
        auto ln = logits.node_ptr();
        auto on = out.node_ptr();
        auto lab = std::make_shared<std::vector<int>>(labels);
        rec(op, out, [ln, on, probs, lab, B, K]() {
            if (!ln->requires_grad) return;
            ln->ensure_grad();
            const double g = on->grad[0] / static_cast<double>(B);
            for (std::size_t b = 0; b < B; ++b) {
                double* dx = ln->grad.data() + b * K;
                const double* pr = probs->data() + b * K;
                for (std::size_t k = 0; k < K; ++k) dx[k] += g * pr[k];
                dx[(*lab)[b]] -= g;
            }
        });
    }
    return out;
}

Tensor skate_embed(const Tensor& te, const Tensor& se) {
    const char* op = "skate_embed";
    check_defined(op, te);
    check_defined(op, se);
    if (te.rank() != 2 || se.rank() != 2 || te.dim(1) != se.dim(1))
        shape_fail(op, "expected te [T,C] and se [V,C] with matching C, got " +
                           shape_str(te.shape()) + " and " + shape_str(se.shape()));
    const std::size_t T = te.dim(0);
    const std::size_t V = se.dim(0);
    const std::size_t C = te.dim(1);
    bool rg = tracing({&te, &se});
    Tensor out = Tensor::zeros({T, V, C}, rg);
    const auto& tv = te.values();
    const auto& sv = se.values();
    auto& ov = out.values();
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t v = 0; v < V; ++v)
            for (std::size_t c = 0; c < C; ++c)
                ov[(t * V + v) * C + c] = tv[t * C + c] * sv[v * C + c];
    if (rg) {
        auto tn = te.node_ptr();
        auto sn = se.node_ptr();
        auto on = out.node_ptr();
        rec(op, out, [tn, sn, on, T, V, C]() {
            const auto& g = on->grad;
            if (sn->requires_grad) {
                sn->ensure_grad();
                for (std::size_t t = 0; t < T; ++t)
                    for (std::size_t v = 0; v < V; ++v)
                        for (std::size_t c = 0; c < C; ++c)
                            sn->grad[v * C + c] += g[(t * V + v) * C + c] * tn->values[t * C + c];
            }
            if (tn->requires_grad) {
                tn->ensure_grad();
                for (std::size_t t = 0; t < T; ++t)
                    for (std::size_t v = 0; v < V; ++v)
                        for (std::size_t c = 0; c < C; ++c)
                            tn->grad[t * C + c] += g[(t * V + v) * C + c] * sn->values[v * C + c];
            }
        });
    }
    return out;
}

} // namespace ops
} // namespace mmn
