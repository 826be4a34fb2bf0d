#include "maskflow/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <memory>

#include "maskflow/errors.hpp"
#include "maskflow/rng.hpp"

namespace maskflow::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

CMap cmap(const Tensor& t) { return CMap(t.storage().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())); }
MMap mmap(Tensor& t) { return MMap(t.storage().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())); }

Graph& graph_of(Var a) {
    if (!a.graph) throw ContractError("operation on a detached Var");
    return *a.graph;
}

Graph& graph_of(Var a, Var b) {
    if (a.graph != b.graph) throw ContractError("operands belong to different graphs");
    return graph_of(a);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

template <class F>
Tensor map_unary(const Tensor& a, F f) {
    Tensor out(a.shape());
    const double* src = a.storage().data();
    double* dst = out.storage().data();
    for (std::size_t i = 0; i < a.size(); ++i) dst[i] = f(src[i]);
    return out;
}

template <class F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
    Tensor out(a.shape());
    const double* pa = a.storage().data();
    const double* pb = b.storage().data();
    double* dst = out.storage().data();
    for (std::size_t i = 0; i < a.size(); ++i) dst[i] = f(pa[i], pb[i]);
    return out;
}

}  // namespace

const Tensor& Var::value() const { return graph->value(*this); }
bool Var::requires_grad() const { return graph->requires_grad(*this); }

Var Graph::constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, false, {}, {}});
    return Var{this, nodes_.size() - 1};
}

Var Graph::variable(Tensor value, std::string name) {
    nodes_.push_back(Node{std::move(value), {}, record_, std::move(name), {}});
    return Var{this, nodes_.size() - 1};
}

Var Graph::parameter(const ParamStore& store, const std::string& name) {
    const bool rg = record_ && store.is_trainable(name);
    nodes_.push_back(Node{store.get(name), {}, rg, name, {}});
    return Var{this, nodes_.size() - 1};
}

Var Graph::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool rg = false;
    if (record_)
        for (Var v : inputs) rg = rg || nodes_[v.id].requires_grad;
    nodes_.push_back(Node{std::move(value), {}, rg, {}, rg ? std::move(fn) : BackwardFn{}});
    return Var{this, nodes_.size() - 1};
}

Var Graph::record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
    bool rg = false;
    if (record_)
        for (Var v : inputs) rg = rg || nodes_[v.id].requires_grad;
    nodes_.push_back(Node{std::move(value), {}, rg, {}, rg ? std::move(fn) : BackwardFn{}});
    return Var{this, nodes_.size() - 1};
}

Tensor& Graph::grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty() && n.value.size() > 0) n.grad = Tensor(n.value.shape());
    return n.grad;
}

GradMap Graph::backward(Var loss) {
    if (loss.graph != this) throw ContractError("backward: loss from another graph");
    if (nodes_[loss.id].value.size() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " + shape_str(nodes_[loss.id].value.shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor();
    if (nodes_[loss.id].requires_grad) {
        grad_slot(loss.id)[0] = 1.0;
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.backward && !n.grad.empty()) n.backward(*this, i);
        }
    }
    GradMap out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        Node& n = nodes_[i];
        if (n.name.empty() || !n.requires_grad) continue;
        Tensor g = n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
        auto [it, inserted] = out.emplace(n.name, g);
        if (!inserted) {
            // same parameter bound twice: accumulate
            for (std::size_t j = 0; j < g.size(); ++j) it->second[j] += g[j];
        }
    }
    return out;
}

AttentionLayout AttentionLayout::uniform_blocks(std::size_t n_blocks, std::size_t q_per_block, std::size_t k_per_block) {
    AttentionLayout l;
    for (std::size_t b = 0; b <= n_blocks; ++b) {
        l.q_offsets.push_back(b * q_per_block);
        l.k_offsets.push_back(b * k_per_block);
    }
    return l;
}

// ---- plain kernels ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
    }
    Tensor out(Shape{a.rows(), b.cols()});
    mmap(out).noalias() = cmap(a) * cmap(b);
    return out;
}

Tensor softmax_rows(const Tensor& scores) {
    Tensor out(scores.shape());
    const std::size_t r = scores.rows(), c = scores.cols();
    for (std::size_t i = 0; i < r; ++i) {
        double m = -INFINITY;
        for (std::size_t j = 0; j < c; ++j) m = std::max(m, scores.at(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += (out.at(i, j) = std::exp(scores.at(i, j) - m));
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) /= z;
    }
    return out;
}

// ---- recorded ops ----------------------------------------------------------

Var matmul(Var a, Var b) {
    Graph& g = graph_of(a, b);
    Tensor out = matmul(a.value(), b.value());
    const std::size_t ia = a.id, ib = b.id;
    return g.record(std::move(out), {a, b}, [ia, ib](Graph& g, std::size_t self) {
        const Tensor& dc = g.grad(self);
        if (g.needs_grad(ia)) mmap(g.grad_slot(ia)).noalias() += cmap(dc) * cmap(g.value_at(ib)).transpose();
        if (g.needs_grad(ib)) mmap(g.grad_slot(ib)).noalias() += cmap(g.value_at(ia)).transpose() * cmap(dc);
    });
}

Var add(Var a, Var b) {
    Graph& g = graph_of(a, b);
    require_same_shape(a.value(), b.value(), "add");
    const std::size_t ia = a.id, ib = b.id;
    return g.record(map_binary(a.value(), b.value(), [](double x, double y) { return x + y; }), {a, b},
                    [ia, ib](Graph& g, std::size_t self) {
                        const Tensor& d = g.grad(self);
                        for (std::size_t id : {ia, ib}) {
                            if (!g.needs_grad(id)) continue;
                            Tensor& s = g.grad_slot(id);
                            for (std::size_t i = 0; i < d.size(); ++i) s[i] += d[i];
                        }
                    });
}

Var sub(Var a, Var b) {
    Graph& g = graph_of(a, b);
    require_same_shape(a.value(), b.value(), "sub");
    const std::size_t ia = a.id, ib = b.id;
    return g.record(map_binary(a.value(), b.value(), [](double x, double y) { return x - y; }), {a, b},
                    [ia, ib](Graph& g, std::size_t self) {
                        const Tensor& d = g.grad(self);
                        if (g.needs_grad(ia)) {
                            Tensor& s = g.grad_slot(ia);
                            for (std::size_t i = 0; i < d.size(); ++i) s[i] += d[i];
                        }
                        if (g.needs_grad(ib)) {
                            Tensor& s = g.grad_slot(ib);
                            for (std::size_t i = 0; i < d.size(); ++i) s[i] -= d[i];
                        }
                    });
}

Var mul(Var a, Var b) {
    Graph& g = graph_of(a, b);
    require_same_shape(a.value(), b.value(), "mul");
    const std::size_t ia = a.id, ib = b.id;
    return g.record(map_binary(a.value(), b.value(), [](double x, double y) { return x * y; }), {a, b},
                    [ia, ib](Graph& g, std::size_t self) {
                        const Tensor& d = g.grad(self);
                        if (g.needs_grad(ia)) {
                            Tensor& s = g.grad_slot(ia);
                            const Tensor& bv = g.value_at(ib);
                            for (std::size_t i = 0; i < d.size(); ++i) s[i] += d[i] * bv[i];
                        }
                        if (g.needs_grad(ib)) {
                            Tensor& s = g.grad_slot(ib);
                            const Tensor& av = g.value_at(ia);
                            for (std::size_t i = 0; i < d.size(); ++i) s[i] += d[i] * av[i];
                        }
                    });
}

Var div(Var a, Var b) {
    Graph& g = graph_of(a, b);
    require_same_shape(a.value(), b.value(), "div");
    const std::size_t ia = a.id, ib = b.id;
    return g.record(map_binary(a.value(), b.value(), [](double x, double y) { return x / y; }), {a, b},
                    [ia, ib](Graph& g, std::size_t self) {
                        const Tensor& d = g.grad(self);
                        const Tensor& av = g.value_at(ia);
                        const Tensor& bv = g.value_at(ib);
                        if (g.needs_grad(ia)) {
                            Tensor& s = g.grad_slot(ia);
                            for (std::size_t i = 0; i < d.size(); ++i) s[i] += d[i] / bv[i];
                        }
                        if (g.needs_grad(ib)) {
                            Tensor& s = g.grad_slot(ib);
                            for (std::size_t i = 0; i < d.size(); ++i) s[i] -= d[i] * av[i] / (bv[i] * bv[i]);
                        }
                    });
}

Var add_row(Var a, Var row) {
    Graph& g = graph_of(a, row);
    const Tensor& av = a.value();
    const Tensor& rv = row.value();
    if (rv.size() != av.cols()) {
        throw DimensionError("add_row: row " + shape_str(rv.shape()) + " does not match " + shape_str(av.shape()));
    }
    Tensor out = av;
    const std::size_t r = av.rows(), c = av.cols();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) += rv[j];
    const std::size_t ia = a.id, ir = row.id;
    return g.record(std::move(out), {a, row}, [ia, ir, r, c](Graph& g, std::size_t self) {
        const Tensor& d = g.grad(self);
        if (g.needs_grad(ia)) {
            Tensor& s = g.grad_slot(ia);
            for (std::size_t i = 0; i < d.size(); ++i) s[i] += d[i];
        }
        if (g.needs_grad(ir)) {
            Tensor& s = g.grad_slot(ir);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) s[j] += d.at(i, j);
        }
    });
}

Var affine(Var a, double scale, double shift) {
    Graph& g = graph_of(a);
    const std::size_t ia = a.id;
    return g.record(map_unary(a.value(), [=](double x) { return scale * x + shift; }), {a},
                    [ia, scale](Graph& g, std::size_t self) {
                        const Tensor& d = g.grad(self);
                        Tensor& s = g.grad_slot(ia);
                        for (std::size_t i = 0; i < d.size(); ++i) s[i] += scale * d[i];
                    });
}

Var exp(Var a) {
    Graph& g = graph_of(a);
    const std::size_t ia = a.id;
    return g.record(map_unary(a.value(), [](double x) { return std::exp(x); }), {a},
                    [ia](Graph& g, std::size_t self) {
                        const Tensor& d = g.grad(self);
                        const Tensor& y = g.value_at(self);
                        Tensor& s = g.grad_slot(ia);
                        for (std::size_t i = 0; i < d.size(); ++i) s[i] += d[i] * y[i];
                    });
}

Var log(Var a) {
    Graph& g = graph_of(a);
    const std::size_t ia = a.id;
    return g.record(map_unary(a.value(), [](double x) { return std::log(x); }), {a},
                    [ia](Graph& g, std::size_t self) {
                        const Tensor& d = g.grad(self);
                        const Tensor& x = g.value_at(ia);
                        Tensor& s = g.grad_slot(ia);
                        for (std::size_t i = 0; i < d.size(); ++i) s[i] += d[i] / x[i];
                    });
}

Var tanh(Var a) {
    Graph& g = graph_of(a);
    const std::size_t ia = a.id;
    return g.record(map_unary(a.value(), [](double x) { return std::tanh(x); }), {a},
                    [ia](Graph& g, std::size_t self) {
                        const Tensor& d = g.grad(self);
                        const Tensor& y = g.value_at(self);
                        Tensor& s = g.grad_slot(ia);
                        for (std::size_t i = 0; i < d.size(); ++i) s[i] += d[i] * (1.0 - y[i] * y[i]);
                    });
}

Var relu(Var a) {
    Graph& g = graph_of(a);
    const std::size_t ia = a.id;
    return g.record(map_unary(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }), {a},
                    [ia](Graph& g, std::size_t self) {
                        const Tensor& d = g.grad(self);
                        const Tensor& x = g.value_at(ia);
                        Tensor& s = g.grad_slot(ia);
                        for (std::size_t i = 0; i < d.size(); ++i)
                            if (x[i] > 0.0) s[i] += d[i];
                    });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
    Graph& g = graph_of(x, gain);
    graph_of(x, bias);
    const Tensor& xv = x.value();
    const std::size_t r = xv.rows(), c = xv.cols();
    if (gain.value().size() != c || bias.value().size() != c) throw DimensionError("layer_norm: gain/bias width");
    auto xhat = std::make_shared<Tensor>(xv.shape());
    auto inv_std = std::make_shared<std::vector<double>>(r);
    Tensor out(xv.shape());
    const Tensor& gv = gain.value();
    const Tensor& bv = bias.value();
    for (std::size_t i = 0; i < r; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += xv.at(i, j);
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (xv.at(i, j) - mu) * (xv.at(i, j) - mu);
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (std::size_t j = 0; j < c; ++j) {
            const double h = (xv.at(i, j) - mu) * is;
            xhat->at(i, j) = h;
            out.at(i, j) = h * gv[j] + bv[j];
        }
    }
    const std::size_t ix = x.id, ig = gain.id, ib = bias.id;
    return g.record(std::move(out), {x, gain, bias}, [=](Graph& g, std::size_t self) {
        const Tensor& d = g.grad(self);
        const Tensor& gv = g.value_at(ig);
        if (g.needs_grad(ig)) {
            Tensor& s = g.grad_slot(ig);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) s[j] += d.at(i, j) * xhat->at(i, j);
        }
        if (g.needs_grad(ib)) {
            Tensor& s = g.grad_slot(ib);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) s[j] += d.at(i, j);
        }
        if (g.needs_grad(ix)) {
            Tensor& s = g.grad_slot(ix);
            std::vector<double> dh(c);
            for (std::size_t i = 0; i < r; ++i) {
                double m1 = 0.0, m2 = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    dh[j] = d.at(i, j) * gv[j];
                    m1 += dh[j];
                    m2 += dh[j] * xhat->at(i, j);
                }
                m1 /= static_cast<double>(c);
                m2 /= static_cast<double>(c);
                const double is = (*inv_std)[i];
                for (std::size_t j = 0; j < c; ++j) s.at(i, j) += is * (dh[j] - m1 - xhat->at(i, j) * m2);
            }
        }
    });
}

Var sum(Var a) {
    Graph& g = graph_of(a);
    double s = 0.0;
    for (double v : a.value().storage()) s += v;
    const std::size_t ia = a.id;
    return g.record(Tensor::scalar(s), {a}, [ia](Graph& g, std::size_t self) {
        const double d = g.grad(self)[0];
        Tensor& s = g.grad_slot(ia);
        for (auto& v : s.storage()) v += d;
    });
}

Var mean(Var a) {
    Graph& g = graph_of(a);
    double s = 0.0;
    for (double v : a.value().storage()) s += v;
    const double n = static_cast<double>(a.value().size());
    const std::size_t ia = a.id;
    return g.record(Tensor::scalar(s / n), {a}, [ia, n](Graph& g, std::size_t self) {
        const double d = g.grad(self)[0] / n;
        Tensor& s = g.grad_slot(ia);
        for (auto& v : s.storage()) v += d;
    });
}

Var mse(Var a, Var b) {
    Graph& g = graph_of(a, b);
    require_same_shape(a.value(), b.value(), "mse");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
    const double n = static_cast<double>(av.size());
    const std::size_t ia = a.id, ib = b.id;
    return g.record(Tensor::scalar(s / n), {a, b}, [ia, ib, n](Graph& g, std::size_t self) {
        const double d = g.grad(self)[0] * 2.0 / n;
        const Tensor& av = g.value_at(ia);
        const Tensor& bv = g.value_at(ib);
        if (g.needs_grad(ia)) {
            Tensor& s = g.grad_slot(ia);
            for (std::size_t i = 0; i < s.size(); ++i) s[i] += d * (av[i] - bv[i]);
        }
        if (g.needs_grad(ib)) {
            Tensor& s = g.grad_slot(ib);
            for (std::size_t i = 0; i < s.size(); ++i) s[i] -= d * (av[i] - bv[i]);
        }
    });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
    Graph& g = graph_of(a);
    Tensor out = a.value().rows_slice(begin, end);
    const std::size_t ia = a.id;
    const std::size_t offset = begin * a.value().cols();
    return g.record(std::move(out), {a}, [ia, offset](Graph& g, std::size_t self) {
        const Tensor& d = g.grad(self);
        Tensor& s = g.grad_slot(ia);
        for (std::size_t i = 0; i < d.size(); ++i) s[offset + i] += d[i];
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ArgumentError("concat_rows: no inputs");
    Graph& g = graph_of(parts.front());
    const std::size_t c = parts.front().value().cols();
    std::size_t total = 0;
    for (Var p : parts) {
        graph_of(parts.front(), p);
        if (p.value().cols() != c) throw DimensionError("concat_rows: column mismatch");
        total += p.value().rows();
    }
    Tensor out(Shape{total, c});
    std::vector<std::size_t> ids, offsets;
    std::size_t off = 0;
    for (Var p : parts) {
        std::copy(p.value().storage().begin(), p.value().storage().end(), out.storage().begin() + static_cast<std::ptrdiff_t>(off));
        ids.push_back(p.id);
        offsets.push_back(off);
        off += p.value().size();
    }
    return g.record(std::move(out), parts, [ids, offsets](Graph& g, std::size_t self) {
        const Tensor& d = g.grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!g.needs_grad(ids[k])) continue;
            Tensor& s = g.grad_slot(ids[k]);
            for (std::size_t i = 0; i < s.size(); ++i) s[i] += d[offsets[k] + i];
        }
    });
}

Var attention(Var q, Var k, Var v, std::size_t n_heads, const AttentionLayout& layout) {
    Graph& g = graph_of(q, k);
    graph_of(q, v);
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    const std::size_t d = qv.cols();
    if (d == 0 || n_heads == 0 || d % n_heads != 0) throw DimensionError("attention: width not divisible by heads");
    if (kv.cols() != d || vv.cols() != d) throw DimensionError("attention: q/k/v widths differ");
    if (kv.rows() != vv.rows()) throw DimensionError("attention: k and v row counts differ");
    if (kv.rows() == 0) throw ArgumentError("attention: empty key context");
    const auto& qo = layout.q_offsets;
    const auto& ko = layout.k_offsets;
    if (qo.size() != ko.size() || qo.size() < 2 || qo.back() != qv.rows() || ko.back() != kv.rows()) {
        throw DimensionError("attention: layout does not cover q/k rows");
    }
    const std::size_t dh = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t n_blocks = qo.size() - 1;
    for (std::size_t b = 0; b < n_blocks; ++b)
        if (ko[b + 1] <= ko[b] && qo[b + 1] > qo[b]) throw ArgumentError("attention: empty key context in block");

    auto probs = std::make_shared<std::vector<RowMat>>(n_blocks * n_heads);
    Tensor out(Shape{qv.rows(), d});
    CMap Q = cmap(qv), K = cmap(kv), V = cmap(vv);
    MMap O = mmap(out);
    for (std::size_t b = 0; b < n_blocks; ++b) {
        const auto qa = static_cast<Eigen::Index>(qo[b]), nq = static_cast<Eigen::Index>(qo[b + 1] - qo[b]);
        const auto ka = static_cast<Eigen::Index>(ko[b]), nk = static_cast<Eigen::Index>(ko[b + 1] - ko[b]);
        if (nq == 0) continue;
        for (std::size_t h = 0; h < n_heads; ++h) {
            const auto ca = static_cast<Eigen::Index>(h * dh), w = static_cast<Eigen::Index>(dh);
            RowMat S = (Q.block(qa, ca, nq, w) * K.block(ka, ca, nk, w).transpose()) * scale;
            for (Eigen::Index i = 0; i < nq; ++i) {
                const double m = S.row(i).maxCoeff();
                S.row(i) = (S.row(i).array() - m).exp();
                S.row(i) /= S.row(i).sum();
            }
            O.block(qa, ca, nq, w).noalias() = S * V.block(ka, ca, nk, w);
            (*probs)[b * n_heads + h] = std::move(S);
        }
    }
    const std::size_t iq = q.id, ik = k.id, iv = v.id;
    return g.record(std::move(out), {q, k, v}, [=](Graph& g, std::size_t self) {
        CMap dO = cmap(g.grad(self));
        CMap Q = cmap(g.value_at(iq)), K = cmap(g.value_at(ik)), V = cmap(g.value_at(iv));
        const bool gq = g.needs_grad(iq), gk = g.needs_grad(ik), gv = g.needs_grad(iv);
        Tensor* dq = gq ? &g.grad_slot(iq) : nullptr;
        Tensor* dk = gk ? &g.grad_slot(ik) : nullptr;
        Tensor* dv = gv ? &g.grad_slot(iv) : nullptr;
        for (std::size_t b = 0; b < n_blocks; ++b) {
            const auto qa = static_cast<Eigen::Index>(qo[b]), nq = static_cast<Eigen::Index>(qo[b + 1] - qo[b]);
            const auto ka = static_cast<Eigen::Index>(ko[b]), nk = static_cast<Eigen::Index>(ko[b + 1] - ko[b]);
            if (nq == 0) continue;
            for (std::size_t h = 0; h < n_heads; ++h) {
                const auto ca = static_cast<Eigen::Index>(h * dh), w = static_cast<Eigen::Index>(dh);
                const RowMat& P = (*probs)[b * n_heads + h];
                auto dOb = dO.block(qa, ca, nq, w);
                if (gv) mmap(*dv).block(ka, ca, nk, w).noalias() += P.transpose() * dOb;
                if (!gq && !gk) continue;
                RowMat dP = dOb * V.block(ka, ca, nk, w).transpose();
                for (Eigen::Index i = 0; i < nq; ++i) {
                    const double dot = dP.row(i).dot(P.row(i));
                    dP.row(i) = P.row(i).array() * (dP.row(i).array() - dot);
                }
                if (gq) mmap(*dq).block(qa, ca, nq, w).noalias() += scale * (dP * K.block(ka, ca, nk, w));
                if (gk) mmap(*dk).block(ka, ca, nk, w).noalias() += scale * (dP.transpose() * Q.block(qa, ca, nq, w));
            }
        }
    });
}

// ---- composites ------------------------------------------------------------

Var linear(Var x, Var weight, Var bias) { return add_row(matmul(x, weight), bias); }

Var gelu(Var x) {
    // 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    const double c = std::sqrt(2.0 / M_PI);
    Var x3 = mul(mul(x, x), x);
    Var inner = add(affine(x, c, 0.0), affine(x3, c * 0.044715, 0.0));
    return mul(affine(x, 0.5, 0.0), affine(tanh(inner), 1.0, 1.0));
}

Var neg_log_sigmoid(Var z) {
    // log(1 + exp(-z))
    return log(affine(exp(affine(z, -1.0, 0.0)), 1.0, 1.0));
}

// ---- grad check ------------------------------------------------------------

GradCheckResult grad_check(const LossFn& f, const ParamStore& point, const GradCheckOptions& opts) {
    GradCheckResult res;
    if (opts.epsilon <= 0.0) return res;
    GradMap analytic;
    {
        Graph g(true);
        Var loss = f(g, point);
        analytic = g.backward(loss);
    }
    std::vector<std::pair<std::string, std::size_t>> coords;
    std::vector<std::string> names;
    std::vector<std::size_t> cumulative;
    std::size_t total = 0;
    for (const auto& name : point.names()) {
        if (!point.is_trainable(name)) continue;
        names.push_back(name);
        total += point.get(name).size();
        cumulative.push_back(total);
    }
    if (total == 0) return res;
    Rng rng(opts.seed, "grad_check");
    ParamStore work = point;
    for (std::size_t n = 0; n < opts.n_coords; ++n) {
        const auto flat = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(total) - 1));
        const auto pos = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), flat) - cumulative.begin());
        const std::size_t idx = flat - (pos ? cumulative[pos - 1] : 0);
        const std::string& name = names[pos];
        Tensor& w = work.mutable_value(name);
        const double orig = w[idx];
        auto eval = [&](double val) {
            w[idx] = val;
            Graph g(false);
            return f(g, work).value().item();
        };
        // Fourth-order central stencil: truncation O(h^4) lets h stay large
        // enough that summation roundoff in the loss does not dominate.
        const double h = opts.epsilon;
        const double f1 = eval(orig + h) - eval(orig - h);
        const double f2 = eval(orig + 2.0 * h) - eval(orig - 2.0 * h);
        w[idx] = orig;
        const double numeric = (8.0 * f1 - f2) / (12.0 * h);
        auto it = analytic.find(name);
        const double a = it == analytic.end() ? 0.0 : it->second[idx];
        const double rel = std::abs(a - numeric) / (std::abs(numeric) + opts.floor);
        if (rel > res.max_rel_error || res.worst_param.empty()) {
            if (rel >= res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_param = name + "[" + std::to_string(idx) + "]";
            }
        }
        ++res.n_checked;
    }
    return res;
}

}  // namespace maskflow::ad
