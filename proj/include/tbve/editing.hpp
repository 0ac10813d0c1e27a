#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tbve/audio.hpp"
#include "tbve/conditioning.hpp"
#include "tbve/corpus.hpp"
#include "tbve/eval.hpp"
#include "tbve/features.hpp"
#include "tbve/frontend.hpp"
#include "tbve/model.hpp"

namespace tbve {

enum class FadeShape { linear, raised_cosine };
std::string to_string(FadeShape s);
FadeShape parse_fade_shape(std::string_view s);

struct CrossfadeConfig {
    double fade_ms = 10.0;
    FadeShape shape = FadeShape::raised_cosine;

    void validate() const;
    std::size_t fade_samples(int sample_rate) const;
};

// Gain of the incoming signal at sample k of an n-sample fade. The outgoing
// signal gets 1 - gain, so the pair sums to one.
double fade_gain(std::size_t k, std::size_t n, FadeShape shape);

struct EditRequest {
    std::string utterance_id;
    std::string original_transcript;  // checked against the corpus when set
    std::size_t word_begin = 0;       // replace tokens [word_begin, word_end)
    std::size_t word_end = 0;
    std::string replacement_text;
    // Must match the checkpoint when given; absent means "the checkpoint's".
    std::optional<EmbeddingMode> embedding_mode;
    std::optional<RefMode> ref_mode;
    CrossfadeConfig crossfade;
    std::uint64_t seed = 0;
    // Frames per replacement phone instead of the predicted durations.
    std::optional<std::vector<int>> replacement_durations;
    // Fuse into the raw recording instead of the vocoded original.
    bool fuse_raw = false;
    // Reference encoder sees only the frames outside the replaced words.
    bool reference_unedited_only = false;
};

nlohmann::json to_json(const EditRequest& r);
EditRequest edit_request_from_json(const nlohmann::json& j);

struct EditPlan {
    PhoneSequence phones;                 // context phones + replacement phones
    std::vector<int> durations;           // alignment durations; 0 on predicted phones
    std::vector<bool> predicted;          // replacement phones (masked)
    std::size_t replace_begin = 0;        // phone range of the replacement
    std::size_t replace_end = 0;
    std::size_t original_phone_begin = 0;  // phone range replaced in the original
    std::size_t original_phone_end = 0;
    FrameRange original_region;           // original frames of the replaced words
    bool no_op = false;

    std::size_t replacement_phone_count() const { return replace_end - replace_begin; }
};

EditPlan plan_edit(const EditRequest& request, const PhoneSequence& phones, const WordAlignment& alignment,
                   const Lexicon& lexicon);

struct Synthesis {
    VocoderFeatures fine;    // whole edited utterance
    VocoderFeatures coarse;
    FrameRange region;       // replacement frames within `fine`
    std::vector<int> durations;
    ForwardInputs inputs;    // what the decoder was fed
};

// Runs the model over the edited phone sequence. Context phones keep their
// alignment durations and ground-truth f0; replacement phones take predicted
// (or forced) durations and predicted f0. The context is the original with
// the replaced frames removed and an all-zero region of the new length in
// their place.
Synthesis synthesize_edit(const EditPlan& plan, const ConditioningBundle& bundle, AcousticModel& model,
                          const VocoderFeatures& original,
                          const std::optional<std::vector<int>>& forced_durations = std::nullopt);

// Cut points for splice(). original[a, b) is replaced by region[begin, end).
// The region clip must extend at least one fade length past its core on any
// side that has original audio to fade against.
struct SpliceCut {
    std::size_t a = 0, b = 0;
    std::size_t begin = 0, end = 0;
};

// original[0, a - F) | fade original -> region | region core |
// fade region -> original | original[b + F, ...). A side whose original
// segment is empty gets no fade; a segment shorter than the fade is an
// error.
AudioClip splice(const AudioClip& original, const AudioClip& region, const SpliceCut& cut,
                 const CrossfadeConfig& cfg);

struct EditResult {
    std::string utterance_id;
    AudioClip audio;
    std::size_t boundary_begin = 0;  // sample range of the new region in `audio`
    std::size_t boundary_end = 0;
    FrameRange original_region;
    VocoderFeatures region_fine;
    VocoderFeatures region_coarse;
    std::vector<int> durations;  // whole edited utterance
    ConditioningBundle bundle;
    RegionMetrics metrics;
    nlohmann::json config_echo;
};

// JSON sidecar written next to the edited WAV.
nlohmann::json sidecar(const EditResult& r);
void write_edit_result(const std::filesystem::path& wav_path, const EditResult& r);

struct EditContext {
    AcousticModel& model;
    const Corpus& corpus;
    const EmbeddingProvider& provider;
    const Vocoder& vocoder;
    FrameSpec spec;
    std::string checkpoint_id;
};

// Conditioning computed from the original recording only.
// Frames in `reference_exclude` are cut out before reference encoding.
ConditioningBundle condition_on(const EditContext& ctx, const CorpusEntry& entry, FrameRange reference_exclude = {});

// plan -> condition -> synthesize -> vocode -> extract -> splice -> metrics.
// Failures are rethrown as StageError naming the stage.
EditResult edit(const EditRequest& request, const EditContext& ctx);

// Whole-utterance synthesis from text: every phone is masked, durations and
// f0 are predicted and the context is all zeros. Conditioning comes from the
// reference recording.
struct TtsRequest {
    std::string reference_id;
    std::string text;
    std::optional<EmbeddingMode> embedding_mode;
    std::optional<RefMode> ref_mode;
    std::uint64_t seed = 0;
};
nlohmann::json to_json(const TtsRequest& r);
TtsRequest tts_request_from_json(const nlohmann::json& j);

struct TtsResult {
    AudioClip audio;
    PhoneSequence phones;
    std::vector<int> durations;
    ConditioningBundle bundle;
    nlohmann::json config_echo;
};
nlohmann::json sidecar(const TtsResult& r, const Lexicon& lexicon);

TtsResult synthesize_text(const TtsRequest& request, const EditContext& ctx);

}  // namespace tbve
