// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "m2r2/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace m2r2::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

thread_local bool g_grad_enabled = true;

ConstMatMap view(const Node& n) { return ConstMatMap(n.value.data(), n.rows, n.cols); }
MatMap grad_view(Node& n) { return MatMap(n.ensure_grad().data(), n.rows, n.cols); }
ConstMatMap out_grad(const Node& n) { return ConstMatMap(n.grad.data(), n.rows, n.cols); }

void check(bool ok, const char* op, const std::string& what) {
    if (!ok) throw std::invalid_argument(std::string(op) + ": " + what);
}

std::string dims(const Tensor& t) {
    return std::to_string(t.rows()) + "x" + std::to_string(t.cols());
}

// Creates the output node. Parents and the backward closure are kept only
// when gradient recording is on and some parent needs a gradient.
Tensor make(int rows, int cols, std::vector<double> value, std::vector<std::shared_ptr<Node>> parents,
            std::function<void(Node&)> fn) {
    auto node = std::make_shared<Node>();
    node->rows = rows;
    node->cols = cols;
    node->value = std::move(value);
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& p : parents) needs = needs || p->requires_grad;
    }
    if (needs) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(fn);
    }
    return Tensor(std::move(node));
}

std::vector<double> zeros_of(int rows, int cols) {
    return std::vector<double>(static_cast<std::size_t>(rows) * cols, 0.0);
}

}  // namespace

std::vector<double>& Node::ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
}

double Tensor::item() const {
    if (size() != 1) throw std::logic_error("item() on tensor of shape " + dims(*this));
    return node_->value[0];
}

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor constant(int rows, int cols, std::vector<double> values) {
    check(values.size() == static_cast<std::size_t>(rows) * cols, "constant", "value count does not match shape");
    auto node = std::make_shared<Node>();
    node->rows = rows;
    node->cols = cols;
    node->value = std::move(values);
    return Tensor(std::move(node));
}

Tensor zeros(int rows, int cols) { return constant(rows, cols, zeros_of(rows, cols)); }

Tensor parameter(int rows, int cols, std::vector<double> values) {
    Tensor t = constant(rows, cols, std::move(values));
    t.node()->requires_grad = true;
    return t;
}

Tensor detach(const Tensor& x) { return constant(x.rows(), x.cols(), x.node()->value); }

void backward(const Tensor& loss) {
    check(loss.size() == 1, "backward", "loss must be 1x1, got " + dims(loss));
    if (!loss.requires_grad()) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.cols() == b.rows(), "matmul", dims(a) + " * " + dims(b));
    std::vector<double> out = zeros_of(a.rows(), b.cols());
    MatMap(out.data(), a.rows(), b.cols()).noalias() = view(*a.node()) * view(*b.node());
    auto pa = a.node();
    auto pb = b.node();
    return make(a.rows(), b.cols(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
        auto g = out_grad(self);
        if (pa->requires_grad) grad_view(*pa).noalias() += g * view(*pb).transpose();
        if (pb->requires_grad) grad_view(*pb).noalias() += view(*pa).transpose() * g;
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    check(a.rows() == b.rows() && a.cols() == b.cols(), "add", dims(a) + " + " + dims(b));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    auto pa = a.node();
    auto pb = b.node();
    return make(a.rows(), a.cols(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
        for (Node* p : {pa.get(), pb.get()}) {
            if (!p->requires_grad) continue;
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check(a.rows() == b.rows() && a.cols() == b.cols(), "sub", dims(a) + " - " + dims(b));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    auto pa = a.node();
    auto pb = b.node();
    return make(a.rows(), a.cols(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
        if (pa->requires_grad) {
            auto& g = pa->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            auto& g = pb->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check(a.rows() == b.rows() && a.cols() == b.cols(), "mul", dims(a) + " * " + dims(b));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto pa = a.node();
    auto pb = b.node();
    return make(a.rows(), a.cols(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
        if (pa->requires_grad) {
            auto& g = pa->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            auto& g = pb->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
        }
    });
}

Tensor scale(const Tensor& x, double s) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * s;
    auto px = x.node();
    return make(x.rows(), x.cols(), std::move(out), {px}, [px, s](Node& self) {
        auto& g = px->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    });
}

Tensor add_row(const Tensor& x, const Tensor& row) {
    check(row.rows() == 1 && row.cols() == x.cols(), "add_row", dims(x) + " + " + dims(row));
    const int r = x.rows();
    const int c = x.cols();
    std::vector<double> out(x.size());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[i * c + j] = x.data()[i * c + j] + row.data()[j];
    auto px = x.node();
    auto pr = row.node();
    return make(r, c, std::move(out), {px, pr}, [px, pr, r, c](Node& self) {
        if (px->requires_grad) {
            auto& g = px->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pr->requires_grad) {
            auto& g = pr->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
        }
    });
}

Tensor div_scalar(const Tensor& x, const Tensor& s) {
    check(s.size() == 1, "div_scalar", "divisor must be 1x1, got " + dims(s));
    const double d = s.data()[0];
    check(d != 0.0, "div_scalar", "division by zero");
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] / d;
    auto px = x.node();
    auto ps = s.node();
    return make(x.rows(), x.cols(), std::move(out), {px, ps}, [px, ps, d](Node& self) {
        if (px->requires_grad) {
            auto& g = px->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / d;
        }
        if (ps->requires_grad) {
            double acc = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * px->value[i];
            ps->ensure_grad()[0] -= acc / (d * d);
        }
    });
}

Tensor mul_tiled(const Tensor& x, const Tensor& pattern) {
    const int period = pattern.rows();
    check(period > 0 && x.rows() % period == 0 && x.cols() == pattern.cols(), "mul_tiled",
          dims(x) + " tiled by " + dims(pattern));
    const int r = x.rows();
    const int c = x.cols();
    std::vector<double> out(x.size());
    for (int i = 0; i < r; ++i) {
        const int pr = i % period;
        for (int j = 0; j < c; ++j) out[i * c + j] = x.data()[i * c + j] * pattern.data()[pr * c + j];
    }
    auto px = x.node();
    auto pp = pattern.node();
    return make(r, c, std::move(out), {px, pp}, [px, pp, r, c, period](Node& self) {
        if (px->requires_grad) {
            auto& g = px->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) g[i * c + j] += self.grad[i * c + j] * pp->value[(i % period) * c + j];
        }
        if (pp->requires_grad) {
            auto& g = pp->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) g[(i % period) * c + j] += self.grad[i * c + j] * px->value[i * c + j];
        }
    });
}

Tensor group_mean(const Tensor& x, int group) {
    check(group > 0 && x.rows() % group == 0, "group_mean", dims(x) + " by groups of " + std::to_string(group));
    const int n = x.rows() / group;
    const int c = x.cols();
    std::vector<double> out = zeros_of(n, c);
    const double inv = 1.0 / group;
    for (int i = 0; i < x.rows(); ++i)
        for (int j = 0; j < c; ++j) out[(i / group) * c + j] += x.data()[i * c + j] * inv;
    auto px = x.node();
    return make(n, c, std::move(out), {px}, [px, group, c, inv](Node& self) {
        auto& g = px->ensure_grad();
        for (int i = 0; i < px->rows; ++i)
            for (int j = 0; j < c; ++j) g[i * c + j] += self.grad[(i / group) * c + j] * inv;
    });
}

Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    auto px = x.node();
    return make(1, 1, {s}, {px}, [px](Node& self) {
        auto& g = px->ensure_grad();
        for (double& v : g) v += self.grad[0];
    });
}

Tensor mean_all(const Tensor& x) {
    check(x.size() > 0, "mean_all", "empty tensor");
    return scale(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

Tensor reshape(const Tensor& x, int rows, int cols) {
    check(static_cast<std::size_t>(rows) * cols == x.size(), "reshape", dims(x) + " -> " + std::to_string(rows) +
                                                                            "x" + std::to_string(cols));
    auto px = x.node();
    return make(rows, cols, px->value, {px}, [px](Node& self) {
        auto& g = px->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Tensor transpose(const Tensor& x) {
    const int r = x.rows(), c = x.cols();
    std::vector<double> out(x.size());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(j) * r + i] = x.at(i, j);
    auto px = x.node();
    return make(c, r, std::move(out), {px}, [px, r, c](Node& self) {
        auto& g = px->ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) g[static_cast<std::size_t>(i) * c + j] += self.grad[static_cast<std::size_t>(j) * r + i];
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    check(!parts.empty(), "concat_cols", "no inputs");
    const int r = parts.front().rows();
    int c = 0;
    for (const auto& p : parts) {
        check(p.rows() == r, "concat_cols", "row count mismatch");
        c += p.cols();
    }
    std::vector<double> out = zeros_of(r, c);
    std::vector<std::shared_ptr<Node>> nodes;
    std::vector<int> offsets;
    int off = 0;
    for (const auto& p : parts) {
        for (int i = 0; i < r; ++i)
            std::copy_n(p.data().begin() + static_cast<std::ptrdiff_t>(i) * p.cols(), p.cols(),
                        out.begin() + static_cast<std::ptrdiff_t>(i) * c + off);
        nodes.push_back(p.node());
        offsets.push_back(off);
        off += p.cols();
    }
    return make(r, c, std::move(out), nodes, [nodes, offsets, r, c](Node& self) {
        for (std::size_t k = 0; k < nodes.size(); ++k) {
            Node& p = *nodes[k];
            if (!p.requires_grad) continue;
            auto& g = p.ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < p.cols; ++j) g[i * p.cols + j] += self.grad[i * c + offsets[k] + j];
        }
    });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    check(!parts.empty(), "concat_rows", "no inputs");
    const int c = parts.front().cols();
    int r = 0;
    for (const auto& p : parts) {
        check(p.cols() == c, "concat_rows", "column count mismatch");
        r += p.rows();
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(r) * c);
    std::vector<std::shared_ptr<Node>> nodes;
    for (const auto& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
        nodes.push_back(p.node());
    }
    return make(r, c, std::move(out), nodes, [nodes](Node& self) {
        std::size_t off = 0;
        for (const auto& p : nodes) {
            if (p->requires_grad) {
                auto& g = p->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
            }
            off += p->value.size();
        }
    });
}

Tensor interleave_rows(const std::vector<Tensor>& parts) {
    check(!parts.empty(), "interleave_rows", "no inputs");
    const int n = parts.front().rows();
    const int c = parts.front().cols();
    const int k = static_cast<int>(parts.size());
    for (const auto& p : parts) check(p.rows() == n && p.cols() == c, "interleave_rows", "shape mismatch");
    std::vector<double> out = zeros_of(n * k, c);
    std::vector<std::shared_ptr<Node>> nodes;
    for (int j = 0; j < k; ++j) {
        for (int i = 0; i < n; ++i)
            std::copy_n(parts[j].data().begin() + static_cast<std::ptrdiff_t>(i) * c, c,
                        out.begin() + static_cast<std::ptrdiff_t>(i * k + j) * c);
        nodes.push_back(parts[j].node());
    }
    return make(n * k, c, std::move(out), nodes, [nodes, n, c, k](Node& self) {
        for (int j = 0; j < k; ++j) {
            if (!nodes[j]->requires_grad) continue;
            auto& g = nodes[j]->ensure_grad();
            for (int i = 0; i < n; ++i)
                for (int col = 0; col < c; ++col) g[i * c + col] += self.grad[(i * k + j) * c + col];
        }
    });
}

Tensor slice_rows(const Tensor& x, int begin, int count) {
    check(begin >= 0 && count >= 0 && begin + count <= x.rows(), "slice_rows", "range out of bounds for " + dims(x));
    const int c = x.cols();
    std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin) * c,
                            x.data().begin() + static_cast<std::ptrdiff_t>(begin + count) * c);
    auto px = x.node();
    return make(count, c, std::move(out), {px}, [px, begin, c](Node& self) {
        auto& g = px->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[static_cast<std::size_t>(begin) * c + i] += self.grad[i];
    });
}

Tensor shift_rows(const Tensor& x, int offset) {
    const int r = x.rows();
    const int c = x.cols();
    std::vector<double> out = zeros_of(r, c);
    for (int t = 0; t < r; ++t) {
        const int src = t - offset;
        if (src < 0 || src >= r) continue;
        std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(src) * c, c,
                    out.begin() + static_cast<std::ptrdiff_t>(t) * c);
    }
    auto px = x.node();
    return make(r, c, std::move(out), {px}, [px, offset, r, c](Node& self) {
        auto& g = px->ensure_grad();
        for (int t = 0; t < r; ++t) {
            const int src = t - offset;
            if (src < 0 || src >= r) continue;
            for (int j = 0; j < c; ++j) g[src * c + j] += self.grad[t * c + j];
        }
    });
}

Tensor gather_rows(const Tensor& table, std::span<const int> indices) {
    const int c = table.cols();
    const int n = static_cast<int>(indices.size());
    std::vector<double> out = zeros_of(n, c);
    for (int i = 0; i < n; ++i) {
        check(indices[i] >= 0 && indices[i] < table.rows(), "gather_rows", "index out of range");
        std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(indices[i]) * c, c,
                    out.begin() + static_cast<std::ptrdiff_t>(i) * c);
    }
    auto pt = table.node();
    std::vector<int> idx(indices.begin(), indices.end());
    return make(n, c, std::move(out), {pt}, [pt, idx = std::move(idx), c](Node& self) {
        auto& g = pt->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (int j = 0; j < c; ++j) g[idx[i] * c + j] += self.grad[i * c + j];
    });
}

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, x.data()[i]);
    auto px = x.node();
    return make(x.rows(), x.cols(), std::move(out), {px}, [px](Node& self) {
        auto& g = px->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (px->value[i] > 0.0) g[i] += self.grad[i];
    });
}

Tensor gelu(const Tensor& x) {
    // Exact form x * Phi(x).
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x.data()[i];
        out[i] = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
    }
    auto px = x.node();
    return make(x.rows(), x.cols(), std::move(out), {px}, [px](Node& self) {
        auto& g = px->ensure_grad();
        const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = px->value[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            g[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
}

Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x.data()[i];
        out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    auto px = x.node();
    return make(x.rows(), x.cols(), std::move(out), {px}, [px](Node& self) {
        auto& g = px->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double y = self.value[i];
            g[i] += self.grad[i] * y * (1.0 - y);
        }
    });
}

Tensor log_softmax_rows(const Tensor& x) {
    const int r = x.rows();
    const int c = x.cols();
    std::vector<double> out(x.size());
    for (int i = 0; i < r; ++i) {
        const double* row = x.data().data() + static_cast<std::ptrdiff_t>(i) * c;
        const double mx = *std::max_element(row, row + c);
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += std::exp(row[j] - mx);
        const double lse = mx + std::log(s);
        for (int j = 0; j < c; ++j) out[i * c + j] = row[j] - lse;
    }
    auto px = x.node();
    return make(r, c, std::move(out), {px}, [px, r, c](Node& self) {
        auto& g = px->ensure_grad();
        for (int i = 0; i < r; ++i) {
            double gs = 0.0;
            for (int j = 0; j < c; ++j) gs += self.grad[i * c + j];
            for (int j = 0; j < c; ++j) g[i * c + j] += self.grad[i * c + j] - std::exp(self.value[i * c + j]) * gs;
        }
    });
}

Tensor exp(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x.data()[i]);
    auto px = x.node();
    return make(x.rows(), x.cols(), std::move(out), {px}, [px](Node& self) {
        auto& g = px->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
    });
}

Tensor softmax_rows(const Tensor& x) { return exp(log_softmax_rows(x)); }

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const int r = x.rows();
    const int c = x.cols();
    check(gamma.rows() == 1 && gamma.cols() == c && beta.rows() == 1 && beta.cols() == c, "layer_norm",
          "affine parameters must be 1x" + std::to_string(c));
    std::vector<double> out(x.size());
    std::vector<double> xhat(x.size());
    std::vector<double> inv_std(r);
    for (int i = 0; i < r; ++i) {
        const double* row = x.data().data() + static_cast<std::ptrdiff_t>(i) * c;
        double mu = 0.0;
        for (int j = 0; j < c; ++j) mu += row[j];
        mu /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= c;
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < c; ++j) {
            xhat[i * c + j] = (row[j] - mu) * inv_std[i];
            out[i * c + j] = xhat[i * c + j] * gamma.data()[j] + beta.data()[j];
        }
    }
    auto px = x.node();
    auto pg = gamma.node();
    auto pb = beta.node();
    return make(r, c, std::move(out), {px, pg, pb},
                [px, pg, pb, r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                    if (pg->requires_grad || pb->requires_grad) {
                        auto& gg = pg->ensure_grad();
                        auto& gb = pb->ensure_grad();
                        for (int i = 0; i < r; ++i)
                            for (int j = 0; j < c; ++j) {
                                gg[j] += self.grad[i * c + j] * xhat[i * c + j];
                                gb[j] += self.grad[i * c + j];
                            }
                    }
                    if (!px->requires_grad) return;
                    auto& g = px->ensure_grad();
                    std::vector<double> dxhat(c);
                    for (int i = 0; i < r; ++i) {
                        double mean_d = 0.0;
                        double mean_dx = 0.0;
                        for (int j = 0; j < c; ++j) {
                            dxhat[j] = self.grad[i * c + j] * pg->value[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[i * c + j];
                        }
                        mean_d /= c;
                        mean_dx /= c;
                        for (int j = 0; j < c; ++j)
                            g[i * c + j] += inv_std[i] * (dxhat[j] - mean_d - xhat[i * c + j] * mean_dx);
                    }
                });
}

Tensor l2_normalize_rows(const Tensor& x) {
    const int r = x.rows();
    const int c = x.cols();
    std::vector<double> out(x.size());
    std::vector<double> norms(r);
    for (int i = 0; i < r; ++i) {
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += x.data()[i * c + j] * x.data()[i * c + j];
        norms[i] = std::sqrt(s);
        if (!(norms[i] > 1e-12)) throw std::domain_error("l2_normalize_rows: zero-norm row " + std::to_string(i));
        for (int j = 0; j < c; ++j) out[i * c + j] = x.data()[i * c + j] / norms[i];
    }
    auto px = x.node();
    return make(r, c, std::move(out), {px}, [px, r, c, norms = std::move(norms)](Node& self) {
        auto& g = px->ensure_grad();
        for (int i = 0; i < r; ++i) {
            double dot = 0.0;
            for (int j = 0; j < c; ++j) dot += self.value[i * c + j] * self.grad[i * c + j];
            for (int j = 0; j < c; ++j)
                g[i * c + j] += (self.grad[i * c + j] - self.value[i * c + j] * dot) / norms[i];
        }
    });
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, int seq_len, int heads) {
    const int d = q.cols();
    check(k.rows() == q.rows() && v.rows() == q.rows() && k.cols() == d && v.cols() == d, "multi_head_attention",
          "q/k/v shape mismatch");
    check(seq_len > 0 && q.rows() % seq_len == 0, "multi_head_attention", "rows not a multiple of seq_len");
    check(heads > 0 && d % heads == 0, "multi_head_attention", "width not divisible by heads");
    const int n = q.rows() / seq_len;
    const int dh = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<double> out = zeros_of(q.rows(), d);
    // Attention weights per (sequence, head), kept for the backward pass.
    auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * heads * seq_len * seq_len);
    for (int s = 0; s < n; ++s) {
        for (int h = 0; h < heads; ++h) {
            const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(s) * seq_len * d + h * dh;
            ConstStridedMap qs(q.data().data() + off, seq_len, dh, Eigen::OuterStride<>(d));
            ConstStridedMap ks(k.data().data() + off, seq_len, dh, Eigen::OuterStride<>(d));
            ConstStridedMap vs(v.data().data() + off, seq_len, dh, Eigen::OuterStride<>(d));
            MatMap p(probs->data() + (static_cast<std::ptrdiff_t>(s) * heads + h) * seq_len * seq_len, seq_len,
                     seq_len);
            p.noalias() = (qs * ks.transpose()) * sc;
            for (int i = 0; i < seq_len; ++i) {
                const double mx = p.row(i).maxCoeff();
                p.row(i) = (p.row(i).array() - mx).exp();
                p.row(i) /= p.row(i).sum();
            }
            StridedMap os(out.data() + off, seq_len, dh, Eigen::OuterStride<>(d));
            os.noalias() = p * vs;
        }
    }
    auto pq = q.node();
    auto pk = k.node();
    auto pv = v.node();
    return make(q.rows(), d, std::move(out), {pq, pk, pv}, [pq, pk, pv, probs, n, heads, seq_len, d, dh, sc](Node& self) {
        auto& gq = pq->ensure_grad();
        auto& gk = pk->ensure_grad();
        auto& gv = pv->ensure_grad();
        RowMat dp(seq_len, seq_len);
        RowMat ds(seq_len, seq_len);
        for (int s = 0; s < n; ++s) {
            for (int h = 0; h < heads; ++h) {
                const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(s) * seq_len * d + h * dh;
                ConstStridedMap qs(pq->value.data() + off, seq_len, dh, Eigen::OuterStride<>(d));
                ConstStridedMap ks(pk->value.data() + off, seq_len, dh, Eigen::OuterStride<>(d));
                ConstStridedMap vs(pv->value.data() + off, seq_len, dh, Eigen::OuterStride<>(d));
                ConstStridedMap dout(self.grad.data() + off, seq_len, dh, Eigen::OuterStride<>(d));
                ConstMatMap p(probs->data() + (static_cast<std::ptrdiff_t>(s) * heads + h) * seq_len * seq_len,
                              seq_len, seq_len);
                StridedMap dq(gq.data() + off, seq_len, dh, Eigen::OuterStride<>(d));
                StridedMap dk(gk.data() + off, seq_len, dh, Eigen::OuterStride<>(d));
                StridedMap dv(gv.data() + off, seq_len, dh, Eigen::OuterStride<>(d));
                dv.noalias() += p.transpose() * dout;
                dp.noalias() = dout * vs.transpose();
                for (int i = 0; i < seq_len; ++i) {
                    const double dot = dp.row(i).dot(p.row(i));
                    ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
                }
                dq.noalias() += (ds * ks) * sc;
                dk.noalias() += (ds.transpose() * qs) * sc;
            }
        }
    });
}

namespace {

void im2col(const double* img, const Conv2dShape& s, double* col) {
    const int ho = s.out_height();
    const int wo = s.out_width();
    const int k = s.kernel;
    for (int c = 0; c < s.channels; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const int row = (c * k + ky) * k + kx;
                double* dst = col + static_cast<std::ptrdiff_t>(row) * ho * wo;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * s.stride - s.padding + ky;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * s.stride - s.padding + kx;
                        const bool inside = iy >= 0 && iy < s.height && ix >= 0 && ix < s.width;
                        dst[oy * wo + ox] = inside ? img[(c * s.height + iy) * s.width + ix] : 0.0;
                    }
                }
            }
}

void col2im_add(const double* col, const Conv2dShape& s, double* img) {
    const int ho = s.out_height();
    const int wo = s.out_width();
    const int k = s.kernel;
    for (int c = 0; c < s.channels; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const int row = (c * k + ky) * k + kx;
                const double* src = col + static_cast<std::ptrdiff_t>(row) * ho * wo;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * s.stride - s.padding + ky;
                    if (iy < 0 || iy >= s.height) continue;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * s.stride - s.padding + kx;
                        if (ix < 0 || ix >= s.width) continue;
                        img[(c * s.height + iy) * s.width + ix] += src[oy * wo + ox];
                    }
                }
            }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv2dShape& shape) {
    const int in_size = shape.channels * shape.height * shape.width;
    const int patch = shape.channels * shape.kernel * shape.kernel;
    check(x.cols() == in_size, "conv2d", "input width " + std::to_string(x.cols()) + " != C*H*W " +
                                             std::to_string(in_size));
    check(weight.cols() == patch, "conv2d", "weight shape " + dims(weight) + " does not match kernel");
    const int c_out = weight.rows();
    check(bias.rows() == 1 && bias.cols() == c_out, "conv2d", "bias must be 1x" + std::to_string(c_out));
    const int ho = shape.out_height();
    const int wo = shape.out_width();
    check(ho > 0 && wo > 0, "conv2d", "empty output");
    const int n = x.rows();
    const int out_size = c_out * ho * wo;

    std::vector<double> out = zeros_of(n, out_size);
    RowMat col(patch, ho * wo);
    ConstMatMap w = view(*weight.node());
    for (int i = 0; i < n; ++i) {
        im2col(x.data().data() + static_cast<std::ptrdiff_t>(i) * in_size, shape, col.data());
        MatMap o(out.data() + static_cast<std::ptrdiff_t>(i) * out_size, c_out, ho * wo);
        o.noalias() = w * col;
        for (int c = 0; c < c_out; ++c) o.row(c).array() += bias.data()[c];
    }
    auto px = x.node();
    auto pw = weight.node();
    auto pb = bias.node();
    return make(n, out_size, std::move(out), {px, pw, pb}, [px, pw, pb, shape, n, in_size, out_size, patch, c_out, ho, wo](Node& self) {
        RowMat col(patch, ho * wo);
        RowMat dcol(patch, ho * wo);
        ConstMatMap w = view(*pw);
        for (int i = 0; i < n; ++i) {
            ConstMatMap dout(self.grad.data() + static_cast<std::ptrdiff_t>(i) * out_size, c_out, ho * wo);
            if (pb->requires_grad) {
                auto& gb = pb->ensure_grad();
                for (int c = 0; c < c_out; ++c) gb[c] += dout.row(c).sum();
            }
            if (pw->requires_grad) {
                im2col(px->value.data() + static_cast<std::ptrdiff_t>(i) * in_size, shape, col.data());
                grad_view(*pw).noalias() += dout * col.transpose();
            }
            if (px->requires_grad) {
                dcol.noalias() = w.transpose() * dout;
                col2im_add(dcol.data(), shape, px->ensure_grad().data() + static_cast<std::ptrdiff_t>(i) * in_size);
            }
        }
    });
}

Tensor truncated_smoothing(const Tensor& log_probs, double clamp) {
    const int t = log_probs.rows();
    const int c = log_probs.cols();
    if (t < 2) return zeros(1, 1);
    const double count = static_cast<double>(t - 1) * c;
    double acc = 0.0;
    for (int i = 1; i < t; ++i)
        for (int j = 0; j < c; ++j) {
            const double d = log_probs.at(i, j) - log_probs.at(i - 1, j);
            acc += std::min(d * d, clamp);
        }
    auto px = log_probs.node();
    return make(1, 1, {acc / count}, {px}, [px, t, c, clamp, count](Node& self) {
        auto& g = px->ensure_grad();
        for (int i = 1; i < t; ++i)
            for (int j = 0; j < c; ++j) {
                const double d = px->value[i * c + j] - px->value[(i - 1) * c + j];
                if (d * d < clamp) g[i * c + j] += self.grad[0] * 2.0 * d / count;
            }
    });
}

}  // namespace m2r2::ag
