#include "tbve/conditioning.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include <sys/wait.h>
#include <unistd.h>

#include "json.hpp"
#include "tbve/error.hpp"
#include "tbve/io.hpp"

namespace tbve {

std::string to_string(EmbeddingMode m) {
    switch (m) {
        case EmbeddingMode::none: return "none";
        case EmbeddingMode::speaker: return "speaker";
        case EmbeddingMode::utterance: return "utterance";
    }
    return "none";
}

std::string to_string(RefMode m) {
    switch (m) {
        case RefMode::none: return "none";
        case RefMode::standard: return "standard";
        case RefMode::variational: return "variational";
    }
    return "none";
}

EmbeddingMode parse_embedding_mode(std::string_view s) {
    for (auto m : kEmbeddingModes)
        if (to_string(m) == s) return m;
    throw InvalidInput("unknown embedding mode '" + std::string(s) + "' (none|speaker|utterance)");
}

RefMode parse_ref_mode(std::string_view s) {
    for (auto m : kRefModes)
        if (to_string(m) == s) return m;
    throw InvalidInput("unknown reference-encoder mode '" + std::string(s) + "' (none|standard|variational)");
}

void ConditioningBundle::validate() const {
    if ((embedding_mode != EmbeddingMode::none) != embedding.has_value())
        throw InvalidInput("embedding must be present exactly when embedding mode is not none");
    if ((ref_mode != RefMode::none) != reference.has_value())
        throw InvalidInput("reference encoding must be present exactly when ref mode is not none");
    if (reference && reference->kl_term < 0.0) throw InvalidInput("negative KL term");
}

StatisticsEmbeddingProvider::StatisticsEmbeddingProvider(std::uint64_t seed) {
    Rng rng(seed);
    Eigen::MatrixXd gaussian(kEmbeddingDim, kStatDim);
    for (Eigen::Index i = 0; i < gaussian.size(); ++i) gaussian.data()[i] = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian);
    projection_ = qr.householderQ() * Eigen::MatrixXd::Identity(kEmbeddingDim, kStatDim);
}

std::array<double, StatisticsEmbeddingProvider::kStatDim> StatisticsEmbeddingProvider::statistics(
    const VocoderFeatures& features) {
    std::array<double, kStatDim> s{};
    const auto frames = static_cast<double>(features.frames());
    for (std::size_t k = 0; k < kMfccDim; ++k) {
        double sum = 0.0, sq = 0.0;
        for (std::size_t t = 0; t < features.frames(); ++t) {
            const double v = features.at(t, kMfccCol + k);
            sum += v;
            sq += v * v;
        }
        const double mean = sum / frames;
        s[k] = mean;
        s[kMfccDim + k] = std::sqrt(std::max(0.0, sq / frames - mean * mean));
    }
    double log_f0 = 0.0, voiced = 0.0, periodicity = 0.0;
    for (std::size_t t = 0; t < features.frames(); ++t) {
        if (features.f0(t) > 0.0f) {
            log_f0 += f0_to_log(features.f0(t));
            voiced += 1.0;
        }
        for (std::size_t b = 0; b < kPeriodicityDim; ++b) periodicity += features.at(t, kPeriodicityCol + b);
    }
    s[2 * kMfccDim] = voiced > 0.0 ? log_f0 / voiced : 0.0;
    s[2 * kMfccDim + 1] = periodicity / (frames * kPeriodicityDim);
    return s;
}

EmbeddingVector StatisticsEmbeddingProvider::embed(const VocoderFeatures& features) const {
    const auto stats = statistics(features);
    const Eigen::VectorXd s = Eigen::Map<const Eigen::VectorXd>(stats.data(), kStatDim);
    const Eigen::VectorXd e = projection_ * s;
    EmbeddingVector out{};
    for (std::size_t i = 0; i < kEmbeddingDim; ++i) out[i] = static_cast<float>(e(static_cast<Eigen::Index>(i)));
    return out;
}

EmbeddingVector SubprocessEmbeddingProvider::embed(const VocoderFeatures& features) const {
    char tmpl[] = "/tmp/tbve-embed-XXXXXX";
    const int fd = ::mkstemp(tmpl);
    if (fd < 0) throw ProviderError("cannot create temporary feature file");
    ::close(fd);
    const std::filesystem::path path(tmpl);
    struct Cleanup {
        std::filesystem::path p;
        ~Cleanup() { std::error_code ec; std::filesystem::remove(p, ec); }
    } cleanup{path};
    io::write_file_atomic(path, encode_tbvf(features));

    const std::string cmd = command_ + " '" + path.string() + "'";
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (!pipe) throw ProviderError("cannot launch embedding provider: " + command_);
    std::array<std::uint8_t, kEmbeddingDim * sizeof(float) + 1> buf{};
    const std::size_t got = std::fread(buf.data(), 1, buf.size(), pipe);
    const int status = ::pclose(pipe);
    if (status != 0 || !WIFEXITED(status) || WEXITSTATUS(status) != 0)
        throw ProviderError("embedding provider exited with status " + std::to_string(status));
    if (got != kEmbeddingDim * sizeof(float))
        throw ProviderError("embedding provider returned " + std::to_string(got) + " bytes, expected 128");
    io::ByteReader r(std::span(buf.data(), got));
    EmbeddingVector out{};
    r.f32s(out);
    return out;
}

UtteranceEmbedding embed_utterance(const VocoderFeatures& features, const EmbeddingProvider& provider) {
    if (features.frames() < 1) throw InvalidInput("cannot embed an empty utterance");
    UtteranceEmbedding e{provider.embed(features)};
    for (float v : e.vector)
        if (!std::isfinite(v)) throw ProviderError(provider.name() + " returned a non-finite embedding");
    return e;
}

SpeakerEmbedding speaker_embedding(std::span<const UtteranceEmbedding> utterances) {
    if (utterances.empty()) throw InvalidInput("speaker embedding needs at least one utterance");
    // Summing in a canonical order makes the mean exactly permutation-invariant.
    std::vector<EmbeddingVector> sorted;
    for (const auto& u : utterances) sorted.push_back(u.vector);
    std::sort(sorted.begin(), sorted.end());
    std::array<double, kEmbeddingDim> acc{};
    for (const auto& v : sorted)
        for (std::size_t i = 0; i < kEmbeddingDim; ++i) acc[i] += v[i];
    SpeakerEmbedding out;
    for (std::size_t i = 0; i < kEmbeddingDim; ++i)
        out.vector[i] = static_cast<float>(acc[i] / static_cast<double>(sorted.size()));
    return out;
}

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) throw InvalidInput("cosine: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0.0 || nb == 0.0) throw InvalidInput("cosine of a zero vector is undefined");
    return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

void write_embedding_cache(const std::filesystem::path& path, const EmbeddingCache& cache) {
    std::string text;
    for (const auto& [id, vec] : cache) {
        nlohmann::json j{{"utterance_id", id}, {"vector", vec}};
        text += j.dump() + "\n";
    }
    io::write_text_atomic(path, text);
}

EmbeddingCache read_embedding_cache(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open embedding cache " + path.string());
    EmbeddingCache cache;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            const auto v = j.at("vector").get<std::vector<float>>();
            if (v.size() != kEmbeddingDim) throw InvalidInput("cached embedding is not 32-dimensional");
            EmbeddingVector e{};
            std::copy(v.begin(), v.end(), e.begin());
            cache[j.at("utterance_id").get<std::string>()] = e;
        } catch (const nlohmann::json::exception& e) {
            throw InvalidInput(std::string("malformed embedding cache line: ") + e.what());
        }
    }
    return cache;
}

ReferenceEncoder::ReferenceEncoder(nn::ParameterStore& store, const std::string& name, RefMode mode,
                                   int input_dim, Rng& init)
    : mode_(mode) {
    if (mode == RefMode::none) throw InvalidInput("reference encoder needs a standard or variational mode");
    int in = input_dim;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
        const auto layer = name + ".conv" + std::to_string(i);
        convs_[i] = nn::Conv1d(store, layer, in, kConvChannels, kKernel, kStride, kPad, init);
        norms_[i] = nn::BatchNorm(store, layer + ".bn", kConvChannels);
        in = kConvChannels;
    }
    forward_gru_ = nn::Gru(store, name + ".gru_fwd", kConvChannels, kGruHidden, init);
    backward_gru_ = nn::Gru(store, name + ".gru_bwd", kConvChannels, kGruHidden, init);
    if (mode == RefMode::variational) {
        mean_head_ = nn::Linear(store, name + ".mean", 2 * kGruHidden, kEmbeddingDim, init);
        logvar_head_ = nn::Linear(store, name + ".logvar", 2 * kGruHidden, kEmbeddingDim, init);
        out_ = nn::Linear(store, name + ".out", kEmbeddingDim, kEmbeddingDim, init);
    } else {
        out_ = nn::Linear(store, name + ".out", 2 * kGruHidden, kEmbeddingDim, init);
    }
}

std::array<Eigen::Index, 3> ReferenceEncoder::internal_lengths(Eigen::Index frames) {
    std::array<Eigen::Index, 3> out{};
    Eigen::Index len = frames;
    for (auto& l : out) l = len = ag::conv_output_length(len, kKernel, kStride, kPad);
    return out;
}

ReferenceEncoder::Output ReferenceEncoder::forward(const ag::Var& features, const nn::Mode& mode) {
    if (features.rows() < 1) throw InvalidInput("reference encoder needs at least one frame");
    ag::Var h = features;
    for (std::size_t i = 0; i < convs_.size(); ++i) h = ag::relu(norms_[i](convs_[i](h), mode));
    const std::vector<ag::Var> states{forward_gru_.final_state(h, false), backward_gru_.final_state(h, true)};
    const ag::Var summary = ag::concat_cols(states);

    Output out;
    if (mode_ == RefMode::standard) {
        out.encoding = out_(summary);
        out.kl = ag::constant(ag::Matrix::Zero(1, 1));
        return out;
    }
    out.mu = mean_head_(summary);
    out.logvar = logvar_head_(summary);
    out.kl = ag::kl_standard_normal(out.mu, out.logvar);
    ag::Var z = out.mu;
    if (mode.training) {
        if (!mode.rng) throw InvalidInput("variational sampling needs an rng");
        ag::Matrix eps(1, kEmbeddingDim);
        for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = mode.rng->normal();
        z = ag::add(out.mu, ag::mul(ag::exp(ag::scale(out.logvar, 0.5)), ag::constant(eps)));
    }
    out.encoding = out_(z);
    return out;
}

}  // namespace tbve
