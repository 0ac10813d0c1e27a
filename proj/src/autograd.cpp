#include "tbve/autograd.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "tbve/error.hpp"
#include "tbve/rng.hpp"

namespace tbve::ag {

namespace {

thread_local bool g_grad_enabled = true;

using Fn = std::function<void(Node&)>;

Var make(Matrix value, std::initializer_list<Var> parents, Fn fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (g_grad_enabled) {
        bool any = false;
        for (const auto& p : parents) any = any || p.requires_grad();
        if (any) {
            node->requires_grad = true;
            for (const auto& p : parents) node->parents.push_back(p.node());
            node->backward = std::move(fn);
        }
    }
    return Var(std::move(node));
}

Var make_n(Matrix value, std::span<const Var> parents, Fn fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (g_grad_enabled) {
        bool any = false;
        for (const auto& p : parents) any = any || p.requires_grad();
        if (any) {
            node->requires_grad = true;
            for (const auto& p : parents) node->parents.push_back(p.node());
            node->backward = std::move(fn);
        }
    }
    return Var(std::move(node));
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw InvalidInput(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                           std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                           std::to_string(b.cols()) + ")");
}

}  // namespace

void Node::accumulate(const Matrix& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) grad = g;
    else grad += g;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var constant(Matrix value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    return Var(std::move(node));
}

Var leaf(Matrix value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    return Var(std::move(node));
}

void backward(const Var& root) {
    if (!root.requires_grad()) return;
    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root.node()->accumulate(Matrix::Ones(root.rows(), root.cols()));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && n->grad.size() != 0) n->backward(*n);
    }
}

Var matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) throw InvalidInput("matmul: inner dimension mismatch");
    return make(a.value() * b.value(), {a, b}, [](Node& self) {
        Node& x = parent(self, 0);
        Node& y = parent(self, 1);
        if (x.requires_grad) x.accumulate(self.grad * y.value.transpose());
        if (y.requires_grad) y.accumulate(x.value.transpose() * self.grad);
    });
}

Var matmul_bt(const Var& a, const Var& b) {
    if (a.cols() != b.cols()) throw InvalidInput("matmul_bt: inner dimension mismatch");
    return make(a.value() * b.value().transpose(), {a, b}, [](Node& self) {
        Node& x = parent(self, 0);
        Node& y = parent(self, 1);
        if (x.requires_grad) x.accumulate(self.grad * y.value);
        if (y.requires_grad) y.accumulate(self.grad.transpose() * x.value);
    });
}

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    return make(a.value() + b.value(), {a, b}, [](Node& self) {
        parent(self, 0).accumulate(self.grad);
        parent(self, 1).accumulate(self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    return make(a.value() - b.value(), {a, b}, [](Node& self) {
        parent(self, 0).accumulate(self.grad);
        parent(self, 1).accumulate(-self.grad);
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    return make(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
        Node& x = parent(self, 0);
        Node& y = parent(self, 1);
        if (x.requires_grad) x.accumulate(self.grad.cwiseProduct(y.value));
        if (y.requires_grad) y.accumulate(self.grad.cwiseProduct(x.value));
    });
}

Var add_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw InvalidInput("add_row: bias shape mismatch");
    Matrix out = a.value();
    out.rowwise() += row.value().row(0);
    return make(std::move(out), {a, row}, [](Node& self) {
        parent(self, 0).accumulate(self.grad);
        Node& b = parent(self, 1);
        if (b.requires_grad) b.accumulate(self.grad.colwise().sum());
    });
}

Var scale(const Var& a, double s) {
    return make(a.value() * s, {a}, [s](Node& self) { parent(self, 0).accumulate(self.grad * s); });
}

Var one_minus(const Var& a) {
    return make((1.0 - a.value().array()).matrix(), {a},
                [](Node& self) { parent(self, 0).accumulate(-self.grad); });
}

Var relu(const Var& a) {
    return make(a.value().cwiseMax(0.0), {a}, [](Node& self) {
        Node& x = parent(self, 0);
        x.accumulate((x.value.array() > 0.0).select(self.grad, 0.0));
    });
}

Var tanh(const Var& a) {
    Matrix y = a.value().array().tanh().matrix();
    return make(y, {a}, [y](Node& self) {
        parent(self, 0).accumulate((self.grad.array() * (1.0 - y.array().square())).matrix());
    });
}

Var sigmoid(const Var& a) {
    Matrix y = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
    return make(y, {a}, [y](Node& self) {
        parent(self, 0).accumulate((self.grad.array() * y.array() * (1.0 - y.array())).matrix());
    });
}

Var exp(const Var& a) {
    Matrix y = a.value().array().exp().matrix();
    return make(y, {a}, [y](Node& self) { parent(self, 0).accumulate(self.grad.cwiseProduct(y)); });
}

Var softmax_rows(const Var& a) {
    Matrix y = a.value();
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
        y.row(r).array() -= y.row(r).maxCoeff();
        y.row(r) = y.row(r).array().exp().matrix();
        y.row(r) /= y.row(r).sum();
    }
    return make(y, {a}, [y](Node& self) {
        Matrix gy = self.grad.cwiseProduct(y);
        Eigen::VectorXd dots = gy.rowwise().sum();
        Matrix g = gy;
        for (Eigen::Index r = 0; r < g.rows(); ++r) g.row(r) -= dots(r) * y.row(r);
        parent(self, 0).accumulate(g);
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Eigen::Index rows = x.rows(), cols = x.cols();
    if (gamma.cols() != cols || beta.cols() != cols) throw InvalidInput("layer_norm: shape mismatch");
    Matrix xhat(rows, cols);
    Eigen::VectorXd inv_std(rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const double mu = x.value().row(r).mean();
        const double var = (x.value().row(r).array() - mu).square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (x.value().row(r).array() - mu) * inv_std(r);
    }
    Matrix out = xhat;
    for (Eigen::Index r = 0; r < rows; ++r)
        out.row(r) = xhat.row(r).cwiseProduct(gamma.value().row(0)) + beta.value().row(0);
    return make(std::move(out), {x, gamma, beta}, [xhat, inv_std](Node& self) {
        Node& xn = parent(self, 0);
        Node& g = parent(self, 1);
        Node& b = parent(self, 2);
        if (g.requires_grad) g.accumulate(self.grad.cwiseProduct(xhat).colwise().sum());
        if (b.requires_grad) b.accumulate(self.grad.colwise().sum());
        if (xn.requires_grad) {
            Matrix dxhat = self.grad;
            for (Eigen::Index r = 0; r < dxhat.rows(); ++r) dxhat.row(r) = dxhat.row(r).cwiseProduct(g.value.row(0));
            Matrix dx(dxhat.rows(), dxhat.cols());
            for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                const double m1 = dxhat.row(r).mean();
                const double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
                dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2).matrix();
            }
            xn.accumulate(dx);
        }
    });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Eigen::Index rows = x.rows(), cols = x.cols();
    if (gamma.cols() != cols || beta.cols() != cols) throw InvalidInput("batch_norm: shape mismatch");
    const RowVector mu = x.value().colwise().mean();
    Matrix centered = x.value().rowwise() - mu;
    const RowVector var = centered.array().square().colwise().mean().matrix();
    const RowVector inv_std = (var.array() + eps).rsqrt().matrix();
    Matrix xhat = centered.array().rowwise() * inv_std.array();
    Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
    out.rowwise() += beta.value().row(0);
    return make(std::move(out), {x, gamma, beta}, [xhat, inv_std, rows](Node& self) {
        Node& xn = parent(self, 0);
        Node& g = parent(self, 1);
        Node& b = parent(self, 2);
        if (g.requires_grad) g.accumulate(self.grad.cwiseProduct(xhat).colwise().sum());
        if (b.requires_grad) b.accumulate(self.grad.colwise().sum());
        if (xn.requires_grad) {
            Matrix dxhat = self.grad.array().rowwise() * g.value.row(0).array();
            const RowVector m1 = dxhat.colwise().sum() / static_cast<double>(rows);
            const RowVector m2 = dxhat.cwiseProduct(xhat).colwise().sum() / static_cast<double>(rows);
            Matrix dx = dxhat;
            dx.rowwise() -= m1;
            dx -= (xhat.array().rowwise() * m2.array()).matrix();
            dx = dx.array().rowwise() * inv_std.array();
            xn.accumulate(dx);
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw InvalidInput("concat_cols: nothing to concatenate");
    const Eigen::Index rows = parts[0].rows();
    Eigen::Index cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) throw InvalidInput("concat_cols: row count mismatch");
        cols += p.cols();
    }
    Matrix out(rows, cols);
    std::vector<Eigen::Index> offsets;
    Eigen::Index c = 0;
    for (const auto& p : parts) {
        offsets.push_back(c);
        out.middleCols(c, p.cols()) = p.value();
        c += p.cols();
    }
    return make_n(std::move(out), parts, [offsets](Node& self) {
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
            Node& p = *self.parents[i];
            if (p.requires_grad) p.accumulate(self.grad.middleCols(offsets[i], p.value.cols()));
        }
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw InvalidInput("concat_rows: nothing to concatenate");
    const Eigen::Index cols = parts[0].cols();
    Eigen::Index rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != cols) throw InvalidInput("concat_rows: column count mismatch");
        rows += p.rows();
    }
    Matrix out(rows, cols);
    std::vector<Eigen::Index> offsets;
    Eigen::Index r = 0;
    for (const auto& p : parts) {
        offsets.push_back(r);
        out.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    return make_n(std::move(out), parts, [offsets](Node& self) {
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
            Node& p = *self.parents[i];
            if (p.requires_grad) p.accumulate(self.grad.middleRows(offsets[i], p.value.rows()));
        }
    });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.cols()) throw InvalidInput("slice_cols out of range");
    return make(a.value().middleCols(start, count), {a}, [start](Node& self) {
        Node& p = parent(self, 0);
        Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
        g.middleCols(start, self.grad.cols()) = self.grad;
        p.accumulate(g);
    });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.rows()) throw InvalidInput("slice_rows out of range");
    return make(a.value().middleRows(start, count), {a}, [start](Node& self) {
        Node& p = parent(self, 0);
        Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
        g.middleRows(start, self.grad.rows()) = self.grad;
        p.accumulate(g);
    });
}

Var gather_rows(const Var& a, std::span<const int> index) {
    Matrix out(static_cast<Eigen::Index>(index.size()), a.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0 || index[i] >= a.rows()) throw InvalidInput("gather_rows: index out of range");
        out.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
    }
    std::vector<int> idx(index.begin(), index.end());
    return make(std::move(out), {a}, [idx](Node& self) {
        Node& p = parent(self, 0);
        Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += self.grad.row(static_cast<Eigen::Index>(i));
        p.accumulate(g);
    });
}

Var unfold(const Var& a, int kernel, int stride, int pad) {
    const Eigen::Index len = a.rows(), ch = a.cols();
    const Eigen::Index out_len = conv_output_length(len, kernel, stride, pad);
    if (out_len < 1) throw InvalidInput("unfold: input shorter than the kernel");
    Matrix out = Matrix::Zero(out_len, kernel * ch);
    for (Eigen::Index t = 0; t < out_len; ++t)
        for (int j = 0; j < kernel; ++j) {
            const Eigen::Index src = t * stride - pad + j;
            if (src >= 0 && src < len) out.block(t, j * ch, 1, ch) = a.value().row(src);
        }
    return make(std::move(out), {a}, [kernel, stride, pad, len, ch, out_len](Node& self) {
        Matrix g = Matrix::Zero(len, ch);
        for (Eigen::Index t = 0; t < out_len; ++t)
            for (int j = 0; j < kernel; ++j) {
                const Eigen::Index src = t * stride - pad + j;
                if (src >= 0 && src < len) g.row(src) += self.grad.block(t, j * ch, 1, ch);
            }
        parent(self, 0).accumulate(g);
    });
}

Var dropout(const Var& a, double rate, Rng& rng) {
    if (rate <= 0.0) return a;
    Matrix keep(a.rows(), a.cols());
    const double s = 1.0 / (1.0 - rate);
    for (Eigen::Index i = 0; i < keep.size(); ++i) keep.data()[i] = rng.uniform() < rate ? 0.0 : s;
    return mul(a, constant(std::move(keep)));
}

Var sum(const Var& a) {
    Matrix out(1, 1);
    out(0, 0) = a.value().sum();
    return make(std::move(out), {a}, [](Node& self) {
        Node& p = parent(self, 0);
        p.accumulate(Matrix::Constant(p.value.rows(), p.value.cols(), self.grad(0, 0)));
    });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var mse_rows(const Var& pred, const Matrix& target, std::span<const int> rows) {
    if (target.rows() != pred.rows() || target.cols() != pred.cols())
        throw InvalidInput("mse_rows: target shape mismatch");
    if (rows.empty()) throw InvalidInput("mse_rows: no rows selected");
    const double denom = static_cast<double>(rows.size()) * static_cast<double>(pred.cols());
    double acc = 0.0;
    for (int r : rows) acc += (pred.value().row(r) - target.row(r)).squaredNorm();
    Matrix out(1, 1);
    out(0, 0) = acc / denom;
    std::vector<int> idx(rows.begin(), rows.end());
    return make(std::move(out), {pred}, [idx, target, denom](Node& self) {
        Node& p = parent(self, 0);
        Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
        const double k = 2.0 * self.grad(0, 0) / denom;
        for (int r : idx) g.row(r) = k * (p.value.row(r) - target.row(r));
        p.accumulate(g);
    });
}

Var kl_standard_normal(const Var& mu, const Var& logvar) {
    require_same_shape(mu, logvar, "kl_standard_normal");
    Matrix out(1, 1);
    out(0, 0) = 0.5 * (mu.value().array().square() + logvar.value().array().exp() -
                       logvar.value().array() - 1.0).sum();
    return make(std::move(out), {mu, logvar}, [](Node& self) {
        Node& m = parent(self, 0);
        Node& lv = parent(self, 1);
        const double g = self.grad(0, 0);
        if (m.requires_grad) m.accumulate(g * m.value);
        if (lv.requires_grad) lv.accumulate((0.5 * g * (lv.value.array().exp() - 1.0)).matrix());
    });
}

}  // namespace tbve::ag
