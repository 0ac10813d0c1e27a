#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tbve/autograd.hpp"
#include "tbve/features.hpp"
#include "tbve/nn.hpp"

namespace tbve {

inline constexpr std::size_t kEmbeddingDim = 32;
using EmbeddingVector = std::array<float, kEmbeddingDim>;

struct UtteranceEmbedding {
    EmbeddingVector vector{};
    bool operator==(const UtteranceEmbedding&) const = default;
};

struct SpeakerEmbedding {
    EmbeddingVector vector{};
    bool operator==(const SpeakerEmbedding&) const = default;
};

struct ReferenceEncoding {
    EmbeddingVector vector{};
    double kl_term = 0.0;  // 0 for the standard encoder
};

enum class EmbeddingMode { none, speaker, utterance };
enum class RefMode { none, standard, variational };

std::string to_string(EmbeddingMode m);
std::string to_string(RefMode m);
EmbeddingMode parse_embedding_mode(std::string_view s);
RefMode parse_ref_mode(std::string_view s);
inline constexpr std::array<EmbeddingMode, 3> kEmbeddingModes{EmbeddingMode::none, EmbeddingMode::speaker,
                                                              EmbeddingMode::utterance};
inline constexpr std::array<RefMode, 3> kRefModes{RefMode::none, RefMode::standard, RefMode::variational};

// Values of the utterance-level conditioning actually used for one forward
// pass (echoed into edit results).
struct ConditioningBundle {
    EmbeddingMode embedding_mode = EmbeddingMode::none;
    RefMode ref_mode = RefMode::none;
    std::optional<EmbeddingVector> embedding;
    std::optional<ReferenceEncoding> reference;

    // Embedding present iff mode != none; reference present iff ref_mode != none.
    void validate() const;
};

// Source of 32-dim utterance embeddings (a pretrained verification model in
// deployment). Implementations must be deterministic and thread-safe.
class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual EmbeddingVector embed(const VocoderFeatures& features) const = 0;
    virtual std::string name() const = 0;
};

// Deterministic fallback: 28 summary statistics (MFCC means and standard
// deviations, mean log-f0 over voiced frames, mean periodicity) mapped to 32
// dims by a fixed seeded matrix with orthonormal columns.
class StatisticsEmbeddingProvider final : public EmbeddingProvider {
public:
    static constexpr std::size_t kStatDim = 28;
    explicit StatisticsEmbeddingProvider(std::uint64_t seed = 0x5EEDu);
    EmbeddingVector embed(const VocoderFeatures& features) const override;
    std::string name() const override { return "statistics"; }

    static std::array<double, kStatDim> statistics(const VocoderFeatures& features);

private:
    Eigen::MatrixXd projection_;  // 32 x 28, orthonormal columns
};

// External provider: runs `command <path-to-TBVF>` and reads 32
// little-endian f32 values from its stdout.
class SubprocessEmbeddingProvider final : public EmbeddingProvider {
public:
    explicit SubprocessEmbeddingProvider(std::string command) : command_(std::move(command)) {}
    EmbeddingVector embed(const VocoderFeatures& features) const override;
    std::string name() const override { return "subprocess:" + command_; }

private:
    std::string command_;
};

UtteranceEmbedding embed_utterance(const VocoderFeatures& features, const EmbeddingProvider& provider);
SpeakerEmbedding speaker_embedding(std::span<const UtteranceEmbedding> utterances);
double cosine_similarity(std::span<const float> a, std::span<const float> b);

// JSONL cache: {"utterance_id": ..., "vector": [32 floats]} per line.
using EmbeddingCache = std::map<std::string, EmbeddingVector>;
void write_embedding_cache(const std::filesystem::path& path, const EmbeddingCache& cache);
EmbeddingCache read_embedding_cache(const std::filesystem::path& path);

// Conv stack (3 x [k3 s2 p1, 128 channels, batch norm, ReLU]) -> bi-GRU
// (64 per direction, final states) -> 32-dim encoding. The variational form
// predicts a mean and log-variance, samples z by reparameterization while
// training (uses the mean at eval) and maps z through an output layer.
class ReferenceEncoder {
public:
    static constexpr int kConvChannels = 128;
    static constexpr int kGruHidden = 64;
    static constexpr int kKernel = 3, kStride = 2, kPad = 1;

    struct Output {
        ag::Var encoding;  // 1 x 32
        ag::Var kl;        // 1 x 1, zero for the standard form
        ag::Var mu, logvar;
    };

    ReferenceEncoder() = default;
    ReferenceEncoder(nn::ParameterStore& store, const std::string& name, RefMode mode, int input_dim,
                     Rng& init);

    // `features` is T x input_dim in model representation, T >= 1.
    Output forward(const ag::Var& features, const nn::Mode& mode);
    RefMode mode() const { return mode_; }

    // Sequence length after each conv layer.
    static std::array<Eigen::Index, 3> internal_lengths(Eigen::Index frames);

private:
    RefMode mode_ = RefMode::none;
    std::array<nn::Conv1d, 3> convs_;
    std::array<nn::BatchNorm, 3> norms_;
    nn::Gru forward_gru_, backward_gru_;
    nn::Linear out_, mean_head_, logvar_head_;
};

}  // namespace tbve
