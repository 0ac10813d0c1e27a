#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tbve/autograd.hpp"
#include "tbve/conditioning.hpp"
#include "tbve/features.hpp"
#include "tbve/nn.hpp"

namespace tbve {

struct ModelConfig {
    int encoder_blocks = 4;
    int coarse_blocks = 4;
    int fine_blocks = 4;
    int hidden = 256;
    int heads = 2;
    int ffn_dim = 1024;
    int ffn_kernel = 3;
    int variance_hidden = 256;
    int variance_kernel = 3;
    double dropout = 0.1;
    int mask_token_dim = 32;
    int feature_dim = static_cast<int>(kFeatureDim);
    bool encoder_mask_token = true;
    bool decoder_mask_token = true;
    EmbeddingMode embedding_mode = EmbeddingMode::none;
    RefMode ref_mode = RefMode::none;
    std::vector<std::string> phone_inventory;  // index = phone id
    std::uint64_t init_seed = 0;

    int phone_count() const { return static_cast<int>(phone_inventory.size()); }
    // Width of the assembled decoder input for this layout.
    int decoder_input_dim() const;
    void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Per-phone variance predictions (raw network outputs).
struct VarianceHeads {
    ag::Var log_duration;  // P x 1
    ag::Var log_f0;        // P x 1, log(1 + f0) scale
};

// Durations used at inference: round(exp(raw)), clamped to [0, max_frames].
std::vector<int> quantize_durations(const ag::Matrix& log_duration, int max_frames = 200);
// Training target for the duration head; zero-frame phones map to log(1/4)
// so round(exp(target)) recovers every integer duration.
double duration_target(int frames);

// Per-phone mean log(1 + f0) over the phone's voiced frames, 0 if none.
std::vector<double> phone_log_f0(const VocoderFeatures& features, std::span<const int> durations);

// Frame-rate upsampling: row t of the output copies the row of the phone
// that covers frame t. Throws if every duration is zero.
ag::Var length_regulate(const ag::Var& per_phone, std::span<const int> durations);
std::vector<int> frame_to_phone(std::span<const int> durations);

// Utterance-level conditioning as graph inputs.
struct ConditioningInputs {
    std::optional<EmbeddingVector> embedding;
    std::optional<ag::Matrix> reference_features;  // T' x 19, model representation
    // Precomputed encoding; takes the place of reference_features (no KL).
    std::optional<EmbeddingVector> reference_encoding;
};

struct DecoderOutputs {
    ag::Var coarse;  // T x 19, model representation
    ag::Var fine;
};

struct ForwardInputs {
    std::vector<int> phone_ids;
    std::vector<bool> phone_masked;
    std::vector<int> durations;        // drive the length regulator
    std::vector<double> phone_log_f0;  // f0 fed to the decoder per phone
    ag::Matrix context;                // T x 19 model representation, zero on masked frames
    std::vector<bool> frame_masked;
    ConditioningInputs conditioning;
};

struct ForwardOutputs {
    ag::Var encodings;
    VarianceHeads variance;
    ag::Var reference;  // 1 x 32 when a reference encoder is configured
    ag::Var kl;         // 1 x 1
    ag::Var decoder_input;
    DecoderOutputs decoded;
};

// Phone encoder, variance adaptor, length regulator and the coarse and fine
// decoders. Features enter and leave in a normalized "model representation"
// (f0 as log(1 + f0), then per-dimension standardization with statistics
// stored as buffers).
class AcousticModel {
public:
    explicit AcousticModel(ModelConfig config);
    AcousticModel(const AcousticModel&) = delete;
    AcousticModel& operator=(const AcousticModel&) = delete;

    const ModelConfig& config() const { return config_; }
    nn::ParameterStore& parameters() { return store_; }
    const nn::ParameterStore& parameters() const { return store_; }

    void set_normalization(std::span<const VocoderFeatures> corpus);
    ag::Matrix to_model(const VocoderFeatures& f) const;
    VocoderFeatures from_model(const ag::Matrix& m) const;

    ag::Var encode_phones(std::span<const int> phone_ids, const std::vector<bool>& phone_masked,
                          const nn::Mode& mode) const;
    VarianceHeads predict_variance(const ag::Var& encodings, const nn::Mode& mode) const;

    struct Conditioning {
        ag::Var embedding;  // 1 x 32 or undefined
        ag::Var reference;  // 1 x 32 or undefined
        ag::Var kl;
    };
    Conditioning condition(const ConditioningInputs& in, const nn::Mode& mode);
    ReferenceEncoding reference_encode(const VocoderFeatures& features, bool training, Rng* rng);

    // [upsampled encodings | f0 | embedding | reference | context | mask token]
    ag::Var assemble_decoder_input(const ag::Var& upsampled, const ag::Matrix& f0_frames,
                                   const Conditioning& cond, const ag::Matrix& context,
                                   const std::vector<bool>& frame_masked) const;
    DecoderOutputs decode(const ag::Var& input, const nn::Mode& mode) const;
    // Fine decoder only, with an explicit coarse input (for ablations).
    ag::Var decode_fine(const ag::Var& input, const ag::Var& coarse, const nn::Mode& mode) const;

    ForwardOutputs forward(const ForwardInputs& in, const nn::Mode& mode);

    int encoder_block_count() const { return static_cast<int>(encoder_.size()); }
    int coarse_block_count() const { return static_cast<int>(coarse_.size()); }
    int fine_block_count() const { return static_cast<int>(fine_.size()); }

    // Column offsets of each decoder-input group.
    struct Layout {
        int encodings, f0, embedding, reference, context, mask_token, width;
    };
    Layout layout() const;

private:
    struct VariancePredictor {
        std::array<nn::Conv1d, 2> convs;
        std::array<nn::LayerNorm, 2> norms;
        nn::Linear out;
        double dropout = 0.0;
        ag::Var operator()(const ag::Var& x, const nn::Mode& mode) const;
    };
    VariancePredictor make_variance(const std::string& name, Rng& init);
    ag::Var run_blocks(const std::vector<nn::TransformerBlock>& blocks, ag::Var x, const nn::Mode& mode) const;

    ModelConfig config_;
    nn::ParameterStore store_;
    nn::Embedding phone_embedding_, encoder_token_, decoder_token_;
    nn::Linear encoder_in_;
    std::vector<nn::TransformerBlock> encoder_, coarse_, fine_;
    VariancePredictor duration_, f0_;
    nn::Linear coarse_in_, coarse_out_, fine_in_, fine_out_;
    std::optional<ReferenceEncoder> reference_;
    ag::Var norm_mean_, norm_std_;
};

}  // namespace tbve
