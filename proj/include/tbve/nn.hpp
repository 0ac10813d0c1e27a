#pragma once

#include <map>
#include <string>
#include <vector>

#include "tbve/autograd.hpp"
#include "tbve/rng.hpp"

namespace tbve::nn {

using ag::Matrix;
using ag::Var;

// Named trainable parameters plus non-trainable buffers (running statistics,
// normalization constants). Insertion order is the serialization order.
class ParameterStore {
public:
    Var add(const std::string& name, Matrix init);
    Var add_buffer(const std::string& name, Matrix init);

    const std::vector<std::pair<std::string, Var>>& parameters() const { return params_; }
    const std::vector<std::pair<std::string, Var>>& buffers() const { return buffers_; }
    Var find(const std::string& name) const;  // parameter or buffer; throws if absent

    std::size_t scalar_count() const;
    void zero_grad();
    // Snaps every parameter and buffer to the nearest float so state
    // round-trips bit-exactly through f32 checkpoints.
    void round_to_float();

private:
    std::vector<std::pair<std::string, Var>> params_;
    std::vector<std::pair<std::string, Var>> buffers_;
    std::map<std::string, Var> index_;
};

// Forward-pass mode. Dropout and batch statistics apply only when training.
struct Mode {
    bool training = false;
    Rng* rng = nullptr;  // required when training with dropout / sampling
};

Matrix round_to_float(Matrix m);

class Linear {
public:
    Linear() = default;
    Linear(ParameterStore& store, const std::string& name, int in, int out, Rng& init, bool bias = true);
    Var operator()(const Var& x) const;
    int in_features() const { return in_; }
    int out_features() const { return out_; }
    Var weight() const { return w_; }

private:
    Var w_, b_;
    int in_ = 0, out_ = 0;
};

class Conv1d {
public:
    Conv1d() = default;
    Conv1d(ParameterStore& store, const std::string& name, int in, int out, int kernel, int stride,
           int pad, Rng& init);
    Var operator()(const Var& x) const;
    Eigen::Index output_length(Eigen::Index length) const {
        return ag::conv_output_length(length, kernel_, stride_, pad_);
    }

private:
    Linear proj_;
    int kernel_ = 1, stride_ = 1, pad_ = 0;
};

class LayerNorm {
public:
    LayerNorm() = default;
    LayerNorm(ParameterStore& store, const std::string& name, int dim);
    Var operator()(const Var& x) const;

private:
    Var gamma_, beta_;
};

// Batch statistics while training (running averages updated in place),
// frozen running statistics at eval.
class BatchNorm {
public:
    BatchNorm() = default;
    BatchNorm(ParameterStore& store, const std::string& name, int dim, double momentum = 0.1);
    Var operator()(const Var& x, const Mode& mode);

private:
    Var gamma_, beta_, running_mean_, running_var_;
    double momentum_ = 0.1;
    static constexpr double kEps = 1e-5;
};

class Embedding {
public:
    Embedding() = default;
    Embedding(ParameterStore& store, const std::string& name, int count, int dim, Rng& init);
    Var operator()(std::span<const int> ids) const;
    int count() const { return static_cast<int>(table_.rows()); }

private:
    Var table_;
};

// Single-layer GRU; returns the final hidden state (1 x hidden).
class Gru {
public:
    Gru() = default;
    Gru(ParameterStore& store, const std::string& name, int in, int hidden, Rng& init);
    Var final_state(const Var& sequence, bool reverse) const;

private:
    Linear input_, recurrent_;
    int hidden_ = 0;
};

class MultiHeadAttention {
public:
    MultiHeadAttention() = default;
    MultiHeadAttention(ParameterStore& store, const std::string& name, int dim, int heads, Rng& init);
    Var operator()(const Var& x) const;

private:
    Linear q_, k_, v_, o_;
    int heads_ = 1;
};

// Feed-forward transformer block: self-attention and a convolutional
// position-wise network, each with residual + layer norm.
class TransformerBlock {
public:
    TransformerBlock() = default;
    TransformerBlock(ParameterStore& store, const std::string& name, int dim, int heads, int ffn_dim,
                     int kernel, double dropout, Rng& init);
    Var operator()(const Var& x, const Mode& mode) const;

private:
    MultiHeadAttention attention_;
    LayerNorm norm1_, norm2_;
    Conv1d ffn_in_, ffn_out_;
    double dropout_ = 0.0;
};

Var maybe_dropout(const Var& x, double rate, const Mode& mode);

// Sinusoidal position table, rows = positions.
Matrix positional_encoding(Eigen::Index length, Eigen::Index dim);

}  // namespace tbve::nn
