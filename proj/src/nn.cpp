#include "tbve/nn.hpp"

#include <cmath>

#include "tbve/error.hpp"

namespace tbve::nn {

namespace {

Matrix xavier(int in, int out, Rng& rng) {
    const double a = std::sqrt(6.0 / (in + out));
    Matrix m(in, out);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-a, a);
    return round_to_float(std::move(m));
}

}  // namespace

Matrix round_to_float(Matrix m) {
    for (Eigen::Index i = 0; i < m.size(); ++i)
        m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
    return m;
}

Var ParameterStore::add(const std::string& name, Matrix init) {
    if (index_.contains(name)) throw InvalidInput("duplicate parameter name " + name);
    Var v = ag::leaf(nn::round_to_float(std::move(init)));
    params_.emplace_back(name, v);
    index_[name] = v;
    return v;
}

Var ParameterStore::add_buffer(const std::string& name, Matrix init) {
    if (index_.contains(name)) throw InvalidInput("duplicate buffer name " + name);
    Var v = ag::constant(nn::round_to_float(std::move(init)));
    buffers_.emplace_back(name, v);
    index_[name] = v;
    return v;
}

Var ParameterStore::find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidInput("unknown parameter " + name);
    return it->second;
}

std::size_t ParameterStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, v] : params_) n += static_cast<std::size_t>(v.value().size());
    return n;
}

void ParameterStore::zero_grad() {
    for (auto& [name, v] : params_) v.zero_grad();
}

void ParameterStore::round_to_float() {
    for (auto& [name, v] : params_) v.mutable_value() = nn::round_to_float(v.value());
    for (auto& [name, v] : buffers_) v.mutable_value() = nn::round_to_float(v.value());
}

Var maybe_dropout(const Var& x, double rate, const Mode& mode) {
    if (!mode.training || rate <= 0.0) return x;
    if (!mode.rng) throw InvalidInput("training mode with dropout needs an rng");
    return ag::dropout(x, rate, *mode.rng);
}

Linear::Linear(ParameterStore& store, const std::string& name, int in, int out, Rng& init, bool bias)
    : in_(in), out_(out) {
    w_ = store.add(name + ".weight", xavier(in, out, init));
    if (bias) b_ = store.add(name + ".bias", Matrix::Zero(1, out));
}

Var Linear::operator()(const Var& x) const {
    if (x.cols() != in_)
        throw InvalidInput("linear layer expects " + std::to_string(in_) + " inputs, got " +
                           std::to_string(x.cols()));
    Var y = ag::matmul(x, w_);
    return b_.defined() ? ag::add_row(y, b_) : y;
}

Conv1d::Conv1d(ParameterStore& store, const std::string& name, int in, int out, int kernel, int stride,
               int pad, Rng& init)
    : proj_(store, name, kernel * in, out, init), kernel_(kernel), stride_(stride), pad_(pad) {}

Var Conv1d::operator()(const Var& x) const {
    if (kernel_ == 1 && stride_ == 1 && pad_ == 0) return proj_(x);
    return proj_(ag::unfold(x, kernel_, stride_, pad_));
}

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, int dim) {
    gamma_ = store.add(name + ".gamma", Matrix::Ones(1, dim));
    beta_ = store.add(name + ".beta", Matrix::Zero(1, dim));
}

Var LayerNorm::operator()(const Var& x) const { return ag::layer_norm(x, gamma_, beta_); }

BatchNorm::BatchNorm(ParameterStore& store, const std::string& name, int dim, double momentum)
    : momentum_(momentum) {
    gamma_ = store.add(name + ".gamma", Matrix::Ones(1, dim));
    beta_ = store.add(name + ".beta", Matrix::Zero(1, dim));
    running_mean_ = store.add_buffer(name + ".running_mean", Matrix::Zero(1, dim));
    running_var_ = store.add_buffer(name + ".running_var", Matrix::Ones(1, dim));
}

Var BatchNorm::operator()(const Var& x, const Mode& mode) {
    if (mode.training) {
        const ag::RowVector mu = x.value().colwise().mean();
        const ag::RowVector var =
            (x.value().rowwise() - mu).array().square().colwise().mean().matrix();
        running_mean_.mutable_value() =
            round_to_float((1.0 - momentum_) * running_mean_.value() + momentum_ * mu);
        running_var_.mutable_value() =
            round_to_float((1.0 - momentum_) * running_var_.value() + momentum_ * var);
        return ag::batch_norm(x, gamma_, beta_, kEps);
    }
    const ag::RowVector scale =
        gamma_.value().row(0).array() / (running_var_.value().row(0).array() + kEps).sqrt();
    const ag::RowVector shift =
        beta_.value().row(0) - running_mean_.value().row(0).cwiseProduct(scale);
    Matrix scale_rows = scale.replicate(x.rows(), 1);
    return ag::add_row(ag::mul(x, ag::constant(std::move(scale_rows))), ag::constant(shift));
}

Embedding::Embedding(ParameterStore& store, const std::string& name, int count, int dim, Rng& init) {
    Matrix m(count, dim);
    const double s = 1.0 / std::sqrt(static_cast<double>(dim));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = s * init.normal();
    table_ = store.add(name + ".table", std::move(m));
}

Var Embedding::operator()(std::span<const int> ids) const { return ag::gather_rows(table_, ids); }

Gru::Gru(ParameterStore& store, const std::string& name, int in, int hidden, Rng& init)
    : input_(store, name + ".input", in, 3 * hidden, init),
      recurrent_(store, name + ".recurrent", hidden, 3 * hidden, init),
      hidden_(hidden) {}

Var Gru::final_state(const Var& sequence, bool reverse) const {
    const Var xs = input_(sequence);
    const Eigen::Index steps = sequence.rows();
    Var h = ag::constant(Matrix::Zero(1, hidden_));
    for (Eigen::Index i = 0; i < steps; ++i) {
        const Eigen::Index t = reverse ? steps - 1 - i : i;
        const Var x = ag::slice_rows(xs, t, 1);
        const Var r_h = recurrent_(h);
        const Var r = ag::sigmoid(ag::add(ag::slice_cols(x, 0, hidden_), ag::slice_cols(r_h, 0, hidden_)));
        const Var z = ag::sigmoid(
            ag::add(ag::slice_cols(x, hidden_, hidden_), ag::slice_cols(r_h, hidden_, hidden_)));
        const Var n = ag::tanh(ag::add(ag::slice_cols(x, 2 * hidden_, hidden_),
                                       ag::mul(r, ag::slice_cols(r_h, 2 * hidden_, hidden_))));
        h = ag::add(ag::mul(ag::one_minus(z), n), ag::mul(z, h));
    }
    return h;
}

MultiHeadAttention::MultiHeadAttention(ParameterStore& store, const std::string& name, int dim,
                                       int heads, Rng& init)
    : q_(store, name + ".q", dim, dim, init),
      k_(store, name + ".k", dim, dim, init),
      v_(store, name + ".v", dim, dim, init),
      o_(store, name + ".o", dim, dim, init),
      heads_(heads) {
    if (heads < 1 || dim % heads != 0) throw InvalidInput("hidden dim must be divisible by heads");
}

Var MultiHeadAttention::operator()(const Var& x) const {
    const Var q = q_(x), k = k_(x), v = v_(x);
    const Eigen::Index head_dim = x.cols() / heads_;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    std::vector<Var> outs;
    outs.reserve(static_cast<std::size_t>(heads_));
    for (int h = 0; h < heads_; ++h) {
        const Var qh = ag::slice_cols(q, h * head_dim, head_dim);
        const Var kh = ag::slice_cols(k, h * head_dim, head_dim);
        const Var vh = ag::slice_cols(v, h * head_dim, head_dim);
        const Var weights = ag::softmax_rows(ag::scale(ag::matmul_bt(qh, kh), scale));
        outs.push_back(ag::matmul(weights, vh));
    }
    return o_(heads_ == 1 ? outs[0] : ag::concat_cols(outs));
}

TransformerBlock::TransformerBlock(ParameterStore& store, const std::string& name, int dim, int heads,
                                   int ffn_dim, int kernel, double dropout, Rng& init)
    : attention_(store, name + ".attn", dim, heads, init),
      norm1_(store, name + ".norm1", dim),
      norm2_(store, name + ".norm2", dim),
      ffn_in_(store, name + ".ffn_in", dim, ffn_dim, kernel, 1, kernel / 2, init),
      ffn_out_(store, name + ".ffn_out", ffn_dim, dim, 1, 1, 0, init),
      dropout_(dropout) {}

Var TransformerBlock::operator()(const Var& x, const Mode& mode) const {
    Var h = norm1_(ag::add(x, maybe_dropout(attention_(x), dropout_, mode)));
    Var f = ffn_out_(ag::relu(ffn_in_(h)));
    return norm2_(ag::add(h, maybe_dropout(f, dropout_, mode)));
}

Matrix positional_encoding(Eigen::Index length, Eigen::Index dim) {
    Matrix pe(length, dim);
    for (Eigen::Index t = 0; t < length; ++t)
        for (Eigen::Index i = 0; i < dim; ++i) {
            const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
            pe(t, i) = (i % 2 == 0) ? std::sin(t * rate) : std::cos(t * rate);
        }
    return pe;
}

}  // namespace tbve::nn
