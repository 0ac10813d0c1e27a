#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tbve/conditioning.hpp"
#include "tbve/model.hpp"

namespace tbve {

struct TrainConfig {
    double coarse_weight = 1.0;
    double fine_weight = 10.0;
    double kl_weight = 0.001;
    double duration_weight = 1.0;
    double f0_weight = 1.0;
    double mask_rate_min = 0.2;
    double mask_rate_max = 1.0;
    double learning_rate = 1e-3;  // peak
    int warmup_steps = 200;
    int batch_size = 4;
    int steps = 1000;
    double grad_clip = 1.0;  // global norm, 0 disables
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.98;
    double adam_eps = 1e-9;
    int checkpoint_every = 0;  // 0: only at the end
    std::uint64_t seed = 0;

    void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Contiguous phone span [start_phone, end_phone) and the frames it covers.
struct MaskSpec {
    double mask_rate = 0.0;
    std::size_t start_phone = 0;
    std::size_t end_phone = 0;
    std::vector<FrameRange> frame_ranges;

    std::size_t span() const { return end_phone - start_phone; }
    std::vector<int> masked_frames() const;
    bool operator==(const MaskSpec&) const = default;
};

// clamp(round(rate * phones), 1, phones)
std::size_t mask_span_length(std::size_t phones, double rate);
MaskSpec make_mask(std::size_t phones, double rate, std::size_t start);
// Rate uniform in [lo, hi], start uniform over the valid positions.
MaskSpec sample_mask(std::size_t phones, Rng& rng, double lo = 0.2, double hi = 1.0);
// Fills frame_ranges from per-phone durations.
void attach_frames(MaskSpec& mask, std::span<const int> durations);

struct LossBreakdown {
    // Weighted terms; total is their sum.
    double coarse = 0.0, fine = 0.0, kl = 0.0, duration = 0.0, f0 = 0.0, total = 0.0;
    double mask_rate_mean = 0.0;
};
nlohmann::json to_json(const LossBreakdown& b);

struct VarianceTargets {
    ag::Matrix log_duration;  // P x 1
    ag::Matrix log_f0;        // P x 1
};

struct Loss {
    ag::Var total;
    LossBreakdown breakdown;
};

// Masked L2 on both decoders (mean over masked frames x 19 dims) plus the
// weighted KL and the per-phone duration / f0 regressions over all phones.
Loss compute_loss(const ag::Var& coarse, const ag::Var& fine, const ag::Matrix& target, const MaskSpec& mask,
                  const ag::Var& kl, const VarianceHeads& predicted, const VarianceTargets& targets,
                  const TrainConfig& cfg);

struct TrainingExample {
    std::string id;
    std::string speaker_id;
    std::vector<int> phone_ids;
    std::vector<int> durations;
    VocoderFeatures features;
    std::optional<EmbeddingVector> utterance_embedding;
};

struct TrainingSet {
    std::vector<TrainingExample> examples;
    std::map<std::string, SpeakerEmbedding> speakers;

    // Mean of the utterance embeddings of each speaker.
    void compute_speaker_embeddings();
    std::optional<EmbeddingVector> embedding_for(const TrainingExample& ex, EmbeddingMode mode) const;
};

struct PreparedExample {
    ForwardInputs inputs;
    ag::Matrix target;
    VarianceTargets variance;
    MaskSpec mask;
};

// Teacher-forced inputs: ground-truth durations and per-phone f0, context =
// target with the masked frames zeroed.
PreparedExample prepare_example(const AcousticModel& model, const TrainingExample& ex, MaskSpec mask,
                                std::optional<EmbeddingVector> embedding);

struct AdamState {
    std::uint64_t step = 0;
    std::vector<ag::Matrix> m, v;  // parameter order
};

class Trainer {
public:
    Trainer(AcousticModel& model, TrainConfig cfg);

    // One optimizer step on `batch`. Utterances are processed in id order so
    // the reduction does not depend on batch order.
    LossBreakdown train_step(std::vector<const TrainingExample*> batch, const TrainingSet& set, Rng& rng);

    // Eval-mode unweighted fine MSE over the mask's frames.
    double masked_fine_mse(const TrainingExample& ex, const MaskSpec& mask, const TrainingSet& set);

    double learning_rate(std::uint64_t step) const;
    const TrainConfig& config() const { return cfg_; }
    AcousticModel& model() { return model_; }
    AdamState& optimizer() { return adam_; }
    const AdamState& optimizer() const { return adam_; }
    std::uint64_t step() const { return adam_.step; }

private:
    AcousticModel& model_;
    TrainConfig cfg_;
    AdamState adam_;
};

struct Checkpoint {
    std::unique_ptr<AcousticModel> model;
    std::optional<AdamState> optimizer;
    std::uint64_t step = 0;
    std::string rng_state;
    nlohmann::json train_config;  // null when absent
};

inline constexpr std::uint32_t kCheckpointSchema = 1;

std::vector<std::uint8_t> encode_checkpoint(const AcousticModel& model, const AdamState* optimizer,
                                            std::uint64_t step, const std::string& rng_state,
                                            const nlohmann::json& train_config);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const AcousticModel& model, const AdamState* optimizer,
                     std::uint64_t step, const std::string& rng_state, const nlohmann::json& train_config);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Full loop: epoch-shuffled batches, one JSONL metrics line per step, atomic
// checkpoints. `on_step` may return false to stop early.
struct TrainRun {
    std::filesystem::path out_dir;
    std::uint64_t start_step = 0;
    std::string rng_state;  // resume state, empty for a fresh run
    std::function<bool(std::uint64_t, const LossBreakdown&)> on_step;
};
void run_training(Trainer& trainer, const TrainingSet& set, const TrainRun& run);

}  // namespace tbve
