#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every value is a 2-D matrix (rows = time steps, columns =
// channels); scalars are 1x1. Graphs are built eagerly while grad mode is on
// and released when the last Var referencing them goes away.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tbve {
class Rng;
}

namespace tbve::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Node {
    Matrix value;
    Matrix grad;  // empty until something flows into it
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void accumulate(const Matrix& g);
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    const Matrix& value() const { return node_->value; }
    Matrix& mutable_value() { return node_->value; }
    const Matrix& grad() const { return node_->grad; }
    void zero_grad() { node_->grad.resize(0, 0); }
    Eigen::Index rows() const { return node_->value.rows(); }
    Eigen::Index cols() const { return node_->value.cols(); }
    bool requires_grad() const { return node_->requires_grad; }
    bool defined() const { return static_cast<bool>(node_); }
    double item() const { return node_->value(0, 0); }

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

// Thread-local switch; graphs are not recorded while a guard is alive.
bool grad_enabled();
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

Var constant(Matrix value);
Var leaf(Matrix value);  // trainable leaf (requires_grad)

// Seeds d(root)/d(root) = 1 and propagates to every leaf that requires grad.
void backward(const Var& root);

Var matmul(const Var& a, const Var& b);
Var matmul_bt(const Var& a, const Var& b);  // a * b^T
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);          // elementwise
Var add_row(const Var& a, const Var& row);    // broadcast a 1xC row over rows
Var scale(const Var& a, double s);
Var one_minus(const Var& a);
Var relu(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var exp(const Var& a);
Var softmax_rows(const Var& a);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
// Normalizes each column over the rows using the batch statistics.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
// out.row(i) = a.row(index[i]); gradients scatter-add back.
Var gather_rows(const Var& a, std::span<const int> index);
// Convolution patches: out(t, j*C + c) = a(t*stride - pad + j, c), zero outside.
Var unfold(const Var& a, int kernel, int stride, int pad);
Var dropout(const Var& a, double rate, Rng& rng);
Var sum(const Var& a);
Var mean(const Var& a);
// Mean squared error over the listed rows against a constant target.
Var mse_rows(const Var& pred, const Matrix& target, std::span<const int> rows);
// Sum over dims of 0.5 * (mu^2 + exp(logvar) - logvar - 1).
Var kl_standard_normal(const Var& mu, const Var& logvar);

// Output length of one strided convolution along time.
inline Eigen::Index conv_output_length(Eigen::Index length, int kernel, int stride, int pad) {
    return (length + 2 * pad - kernel) / stride + 1;
}

}  // namespace tbve::ag
