#include "tbve/model.hpp"

#include <cmath>

#include "tbve/error.hpp"

namespace tbve {

using ag::Matrix;
using ag::Var;

namespace {

constexpr double kStdFloor = 1e-3;
constexpr float kMinVoicedF0 = 50.0f;

}  // namespace

int ModelConfig::decoder_input_dim() const {
    int d = hidden + 1 + feature_dim;
    if (embedding_mode != EmbeddingMode::none) d += static_cast<int>(kEmbeddingDim);
    if (ref_mode != RefMode::none) d += static_cast<int>(kEmbeddingDim);
    if (decoder_mask_token) d += mask_token_dim;
    return d;
}

void ModelConfig::validate() const {
    if (encoder_blocks < 1 || coarse_blocks < 1 || fine_blocks < 1)
        throw InvalidInput("every network needs at least one transformer block");
    if (hidden < 1 || heads < 1 || hidden % heads != 0)
        throw InvalidInput("model.hidden must be a positive multiple of model.heads");
    if (ffn_dim < 1 || variance_hidden < 1) throw InvalidInput("layer widths must be positive");
    if (ffn_kernel < 1 || ffn_kernel % 2 == 0 || variance_kernel < 1 || variance_kernel % 2 == 0)
        throw InvalidInput("convolution kernels must be odd");
    if (dropout < 0.0 || dropout >= 1.0) throw InvalidInput("model.dropout must be in [0, 1)");
    if (mask_token_dim != 32) throw InvalidInput("model.mask_token_dim must be 32");
    if (feature_dim != static_cast<int>(kFeatureDim)) throw InvalidInput("model.feature_dim must be 19");
    if (phone_inventory.empty()) throw InvalidInput("model needs a phone inventory");
}

nlohmann::json to_json(const ModelConfig& c) {
    return {{"encoder_blocks", c.encoder_blocks},
            {"coarse_blocks", c.coarse_blocks},
            {"fine_blocks", c.fine_blocks},
            {"hidden", c.hidden},
            {"heads", c.heads},
            {"ffn_dim", c.ffn_dim},
            {"ffn_kernel", c.ffn_kernel},
            {"variance_hidden", c.variance_hidden},
            {"variance_kernel", c.variance_kernel},
            {"dropout", c.dropout},
            {"mask_token_dim", c.mask_token_dim},
            {"feature_dim", c.feature_dim},
            {"encoder_mask_token", c.encoder_mask_token},
            {"decoder_mask_token", c.decoder_mask_token},
            {"embedding_mode", to_string(c.embedding_mode)},
            {"ref_mode", to_string(c.ref_mode)},
            {"phone_inventory", c.phone_inventory},
            {"init_seed", c.init_seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "encoder_blocks") c.encoder_blocks = value.get<int>();
            else if (key == "coarse_blocks") c.coarse_blocks = value.get<int>();
            else if (key == "fine_blocks") c.fine_blocks = value.get<int>();
            else if (key == "hidden") c.hidden = value.get<int>();
            else if (key == "heads") c.heads = value.get<int>();
            else if (key == "ffn_dim") c.ffn_dim = value.get<int>();
            else if (key == "ffn_kernel") c.ffn_kernel = value.get<int>();
            else if (key == "variance_hidden") c.variance_hidden = value.get<int>();
            else if (key == "variance_kernel") c.variance_kernel = value.get<int>();
            else if (key == "dropout") c.dropout = value.get<double>();
            else if (key == "mask_token_dim") c.mask_token_dim = value.get<int>();
            else if (key == "feature_dim") c.feature_dim = value.get<int>();
            else if (key == "encoder_mask_token") c.encoder_mask_token = value.get<bool>();
            else if (key == "decoder_mask_token") c.decoder_mask_token = value.get<bool>();
            else if (key == "embedding_mode") c.embedding_mode = parse_embedding_mode(value.get<std::string>());
            else if (key == "ref_mode") c.ref_mode = parse_ref_mode(value.get<std::string>());
            else if (key == "phone_inventory") c.phone_inventory = value.get<std::vector<std::string>>();
            else if (key == "init_seed") c.init_seed = value.get<std::uint64_t>();
            else throw InvalidInput("unknown model config key '" + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("bad model config: ") + e.what());
    }
    return c;
}

std::vector<int> quantize_durations(const Matrix& log_duration, int max_frames) {
    std::vector<int> out(static_cast<std::size_t>(log_duration.rows()));
    for (Eigen::Index p = 0; p < log_duration.rows(); ++p) {
        const double v = std::round(std::exp(std::min(log_duration(p, 0), 20.0)));
        out[static_cast<std::size_t>(p)] = static_cast<int>(std::clamp(v, 0.0, static_cast<double>(max_frames)));
    }
    return out;
}

double duration_target(int frames) {
    if (frames < 0) throw InvalidInput("negative duration");
    return std::log(frames == 0 ? 0.25 : static_cast<double>(frames));
}

std::vector<double> phone_log_f0(const VocoderFeatures& features, std::span<const int> durations) {
    std::vector<double> out;
    out.reserve(durations.size());
    std::size_t t = 0;
    for (int d : durations) {
        double sum = 0.0;
        int voiced = 0;
        for (int k = 0; k < d; ++k, ++t) {
            if (t >= features.frames()) throw InvalidInput("durations exceed feature length");
            if (features.f0(t) > 0.0f) {
                sum += f0_to_log(features.f0(t));
                ++voiced;
            }
        }
        out.push_back(voiced ? sum / voiced : 0.0);
    }
    return out;
}

std::vector<int> frame_to_phone(std::span<const int> durations) {
    std::vector<int> index;
    for (std::size_t p = 0; p < durations.size(); ++p) {
        if (durations[p] < 0) throw InvalidInput("negative duration");
        index.insert(index.end(), static_cast<std::size_t>(durations[p]), static_cast<int>(p));
    }
    return index;
}

Var length_regulate(const Var& per_phone, std::span<const int> durations) {
    if (static_cast<Eigen::Index>(durations.size()) != per_phone.rows())
        throw InvalidInput("length regulator needs one duration per phone");
    const auto index = frame_to_phone(durations);
    if (index.empty()) throw InvalidInput("empty frame sequence");
    return ag::gather_rows(per_phone, index);
}

AcousticModel::AcousticModel(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    Rng init(config_.init_seed);
    const int h = config_.hidden;
    const int token = config_.mask_token_dim;
    phone_embedding_ = nn::Embedding(store_, "encoder.phone_embedding", config_.phone_count(), h, init);
    if (config_.encoder_mask_token) encoder_token_ = nn::Embedding(store_, "encoder.mask_token", 2, token, init);
    encoder_in_ = nn::Linear(store_, "encoder.input", h + (config_.encoder_mask_token ? token : 0), h, init);
    auto blocks = [&](const std::string& prefix, int count) {
        std::vector<nn::TransformerBlock> out;
        for (int i = 0; i < count; ++i)
            out.emplace_back(store_, prefix + ".block" + std::to_string(i), h, config_.heads, config_.ffn_dim,
                             config_.ffn_kernel, config_.dropout, init);
        return out;
    };
    encoder_ = blocks("encoder", config_.encoder_blocks);
    duration_ = make_variance("variance.duration", init);
    f0_ = make_variance("variance.f0", init);
    if (config_.ref_mode != RefMode::none)
        reference_.emplace(store_, "reference", config_.ref_mode, config_.feature_dim, init);
    if (config_.decoder_mask_token) decoder_token_ = nn::Embedding(store_, "decoder.mask_token", 2, token, init);
    const int in = config_.decoder_input_dim();
    coarse_in_ = nn::Linear(store_, "coarse.input", in, h, init);
    coarse_ = blocks("coarse", config_.coarse_blocks);
    coarse_out_ = nn::Linear(store_, "coarse.output", h, config_.feature_dim, init);
    fine_in_ = nn::Linear(store_, "fine.input", in + config_.feature_dim, h, init);
    fine_ = blocks("fine", config_.fine_blocks);
    fine_out_ = nn::Linear(store_, "fine.output", h, config_.feature_dim, init);
    norm_mean_ = store_.add_buffer("normalization.mean", Matrix::Zero(1, config_.feature_dim));
    norm_std_ = store_.add_buffer("normalization.std", Matrix::Ones(1, config_.feature_dim));
}

AcousticModel::VariancePredictor AcousticModel::make_variance(const std::string& name, Rng& init) {
    VariancePredictor v;
    const int k = config_.variance_kernel;
    int in = config_.hidden;
    for (int i = 0; i < 2; ++i) {
        const auto layer = name + ".conv" + std::to_string(i);
        v.convs[static_cast<std::size_t>(i)] =
            nn::Conv1d(store_, layer, in, config_.variance_hidden, k, 1, k / 2, init);
        v.norms[static_cast<std::size_t>(i)] = nn::LayerNorm(store_, layer + ".norm", config_.variance_hidden);
        in = config_.variance_hidden;
    }
    v.out = nn::Linear(store_, name + ".output", in, 1, init);
    v.dropout = config_.dropout;
    return v;
}

Var AcousticModel::VariancePredictor::operator()(const Var& x, const nn::Mode& mode) const {
    Var h = x;
    for (std::size_t i = 0; i < convs.size(); ++i)
        h = nn::maybe_dropout(norms[i](ag::relu(convs[i](h))), dropout, mode);
    return out(h);
}

void AcousticModel::set_normalization(std::span<const VocoderFeatures> corpus) {
    const int d = config_.feature_dim;
    Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(d), sq = Eigen::ArrayXd::Zero(d);
    double n = 0.0;
    for (const auto& f : corpus)
        for (std::size_t t = 0; t < f.frames(); ++t) {
            for (int k = 0; k < d; ++k) {
                const double v = k == static_cast<int>(kF0Col) ? f0_to_log(f.f0(t)) : f.at(t, k);
                sum(k) += v;
                sq(k) += v * v;
            }
            n += 1.0;
        }
    if (n == 0.0) throw InvalidInput("normalization needs at least one frame");
    const Eigen::ArrayXd mean = sum / n;
    const Eigen::ArrayXd var = (sq / n - mean.square()).max(0.0);
    Matrix m(1, d), s(1, d);
    for (int k = 0; k < d; ++k) {
        m(0, k) = mean(k);
        s(0, k) = std::max(std::sqrt(var(k)), kStdFloor);
    }
    norm_mean_.mutable_value() = nn::round_to_float(m);
    norm_std_.mutable_value() = nn::round_to_float(s);
}

Matrix AcousticModel::to_model(const VocoderFeatures& f) const {
    const int d = config_.feature_dim;
    Matrix m(static_cast<Eigen::Index>(f.frames()), d);
    const auto& mean = norm_mean_.value();
    const auto& sd = norm_std_.value();
    for (std::size_t t = 0; t < f.frames(); ++t)
        for (int k = 0; k < d; ++k) {
            const double v = k == static_cast<int>(kF0Col) ? f0_to_log(f.f0(t)) : f.at(t, k);
            m(static_cast<Eigen::Index>(t), k) = (v - mean(0, k)) / sd(0, k);
        }
    return m;
}

VocoderFeatures AcousticModel::from_model(const Matrix& m) const {
    if (m.cols() != config_.feature_dim) throw InvalidInput("model output has the wrong width");
    VocoderFeatures f(static_cast<std::size_t>(m.rows()));
    const auto& mean = norm_mean_.value();
    const auto& sd = norm_std_.value();
    for (Eigen::Index t = 0; t < m.rows(); ++t) {
        auto frame = f.frame(static_cast<std::size_t>(t));
        for (int k = 0; k < config_.feature_dim; ++k) {
            double v = m(t, k) * sd(0, k) + mean(0, k);
            if (!std::isfinite(v)) throw NumericError("non-finite model output");
            if (k == static_cast<int>(kF0Col)) {
                const float hz = log_to_f0(static_cast<float>(std::max(v, 0.0)));
                v = hz < kMinVoicedF0 ? 0.0 : hz;
            } else if (k >= static_cast<int>(kPeriodicityCol)) {
                v = std::clamp(v, 0.0, 1.0);
            }
            frame[static_cast<std::size_t>(k)] = static_cast<float>(v);
        }
    }
    return f;
}

Var AcousticModel::run_blocks(const std::vector<nn::TransformerBlock>& blocks, Var x, const nn::Mode& mode) const {
    x = ag::add(x, ag::constant(nn::positional_encoding(x.rows(), x.cols())));
    x = nn::maybe_dropout(x, config_.dropout, mode);
    for (const auto& b : blocks) x = b(x, mode);
    return x;
}

Var AcousticModel::encode_phones(std::span<const int> phone_ids, const std::vector<bool>& phone_masked,
                                 const nn::Mode& mode) const {
    if (phone_ids.empty()) throw InvalidInput("empty phone sequence");
    for (int id : phone_ids)
        if (id < 0 || id >= config_.phone_count())
            throw InvalidInput("unknown phone id " + std::to_string(id));
    Var x = phone_embedding_(phone_ids);
    if (config_.encoder_mask_token) {
        if (phone_masked.size() != phone_ids.size()) throw InvalidInput("one mask flag per phone required");
        std::vector<int> flags(phone_masked.begin(), phone_masked.end());
        const std::vector<Var> parts{x, encoder_token_(flags)};
        x = ag::concat_cols(parts);
    }
    return run_blocks(encoder_, encoder_in_(x), mode);
}

VarianceHeads AcousticModel::predict_variance(const Var& encodings, const nn::Mode& mode) const {
    if (encodings.rows() < 1) throw InvalidInput("variance adaptor needs at least one phone");
    return {duration_(encodings, mode), f0_(encodings, mode)};
}

AcousticModel::Conditioning AcousticModel::condition(const ConditioningInputs& in, const nn::Mode& mode) {
    Conditioning c;
    c.kl = ag::constant(Matrix::Zero(1, 1));
    if (config_.embedding_mode != EmbeddingMode::none) {
        if (!in.embedding) throw InvalidInput("model expects a " + to_string(config_.embedding_mode) + " embedding");
        // Unit-normalized so the provider's scale does not matter.
        Matrix e(1, kEmbeddingDim);
        for (std::size_t i = 0; i < kEmbeddingDim; ++i) e(0, static_cast<Eigen::Index>(i)) = (*in.embedding)[i];
        const double norm = e.norm();
        if (norm > 0.0) e /= norm;
        c.embedding = ag::constant(std::move(e));
    } else if (in.embedding) {
        throw InvalidInput("model was trained without embeddings");
    }
    if (reference_ && in.reference_encoding) {
        Matrix r(1, kEmbeddingDim);
        for (std::size_t i = 0; i < kEmbeddingDim; ++i) r(0, static_cast<Eigen::Index>(i)) = (*in.reference_encoding)[i];
        c.reference = ag::constant(std::move(r));
    } else if (reference_) {
        if (!in.reference_features) throw InvalidInput("model expects reference features");
        auto out = reference_->forward(ag::constant(*in.reference_features), mode);
        c.reference = out.encoding;
        c.kl = out.kl;
    }
    return c;
}

ReferenceEncoding AcousticModel::reference_encode(const VocoderFeatures& features, bool training, Rng* rng) {
    if (!reference_) throw InvalidInput("model has no reference encoder");
    if (features.frames() < 1) throw InvalidInput("reference encoding needs at least one frame");
    ag::NoGradGuard guard;
    const auto out = reference_->forward(ag::constant(to_model(features)), {.training = training, .rng = rng});
    ReferenceEncoding r;
    for (std::size_t i = 0; i < kEmbeddingDim; ++i)
        r.vector[i] = static_cast<float>(out.encoding.value()(0, static_cast<Eigen::Index>(i)));
    r.kl_term = out.kl.item();
    return r;
}

AcousticModel::Layout AcousticModel::layout() const {
    Layout l{};
    int c = 0;
    l.encodings = c;
    c += config_.hidden;
    l.f0 = c;
    c += 1;
    l.embedding = c;
    if (config_.embedding_mode != EmbeddingMode::none) c += static_cast<int>(kEmbeddingDim);
    l.reference = c;
    if (config_.ref_mode != RefMode::none) c += static_cast<int>(kEmbeddingDim);
    l.context = c;
    c += config_.feature_dim;
    l.mask_token = c;
    if (config_.decoder_mask_token) c += config_.mask_token_dim;
    l.width = c;
    return l;
}

Var AcousticModel::assemble_decoder_input(const Var& upsampled, const Matrix& f0_frames, const Conditioning& cond,
                                          const Matrix& context, const std::vector<bool>& frame_masked) const {
    const Eigen::Index t = upsampled.rows();
    if (f0_frames.rows() != t || context.rows() != t || static_cast<Eigen::Index>(frame_masked.size()) != t)
        throw InvalidInput("decoder inputs disagree on frame count");
    if (f0_frames.cols() != 1 || context.cols() != config_.feature_dim)
        throw InvalidInput("decoder inputs have the wrong width");
    const std::vector<int> broadcast(static_cast<std::size_t>(t), 0);
    std::vector<Var> parts{upsampled, ag::constant(f0_frames)};
    if (config_.embedding_mode != EmbeddingMode::none) {
        if (!cond.embedding.defined()) throw InvalidInput("missing embedding");
        parts.push_back(ag::gather_rows(cond.embedding, broadcast));
    }
    if (config_.ref_mode != RefMode::none) {
        if (!cond.reference.defined()) throw InvalidInput("missing reference encoding");
        parts.push_back(ag::gather_rows(cond.reference, broadcast));
    }
    parts.push_back(ag::constant(context));
    if (config_.decoder_mask_token) {
        std::vector<int> flags(frame_masked.begin(), frame_masked.end());
        parts.push_back(decoder_token_(flags));
    }
    return ag::concat_cols(parts);
}

DecoderOutputs AcousticModel::decode(const Var& input, const nn::Mode& mode) const {
    if (input.rows() < 1) throw InvalidInput("decoder needs at least one frame");
    const Var coarse = coarse_out_(run_blocks(coarse_, coarse_in_(input), mode));
    return {coarse, decode_fine(input, coarse, mode)};
}

Var AcousticModel::decode_fine(const Var& input, const Var& coarse, const nn::Mode& mode) const {
    const std::vector<Var> parts{input, coarse};
    return fine_out_(run_blocks(fine_, fine_in_(ag::concat_cols(parts)), mode));
}

ForwardOutputs AcousticModel::forward(const ForwardInputs& in, const nn::Mode& mode) {
    if (in.durations.size() != in.phone_ids.size() || in.phone_log_f0.size() != in.phone_ids.size())
        throw InvalidInput("durations and f0 must have one entry per phone");
    ForwardOutputs out;
    out.encodings = encode_phones(in.phone_ids, in.phone_masked, mode);
    out.variance = predict_variance(out.encodings, mode);
    const auto cond = condition(in.conditioning, mode);
    out.reference = cond.reference;
    out.kl = cond.kl;
    const Var up = length_regulate(out.encodings, in.durations);
    const auto index = frame_to_phone(in.durations);
    Matrix f0(up.rows(), 1);
    for (Eigen::Index t = 0; t < up.rows(); ++t) f0(t, 0) = in.phone_log_f0[static_cast<std::size_t>(index[t])];
    out.decoder_input = assemble_decoder_input(up, f0, cond, in.context, in.frame_masked);
    out.decoded = decode(out.decoder_input, mode);
    return out;
}

}  // namespace tbve
