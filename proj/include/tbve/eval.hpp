#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tbve/audio.hpp"
#include "tbve/conditioning.hpp"
#include "tbve/features.hpp"

namespace tbve {

class Corpus;
struct EditResult;

// Objective continuity proxies for one edit. A field is absent when it is
// not defined for the edit (different region lengths, no both-voiced
// frames, no interior boundary).
struct RegionMetrics {
    std::optional<double> mcd_db;
    std::optional<double> f0_rmse_hz;
    std::optional<double> vuv_error_rate;
    std::optional<double> speaker_cosine;
    std::optional<double> boundary_discontinuity;

    bool operator==(const RegionMetrics&) const = default;
};

nlohmann::json to_json(const RegionMetrics& m);
RegionMetrics region_metrics_from_json(const nlohmann::json& j);

// Mel-cepstral distortion over cepstral dims 1..12 (c0 excluded), in dB,
// averaged over frames. Throws InvalidInput on a frame-count mismatch.
double mcd(const VocoderFeatures& pred, const VocoderFeatures& ref);

struct F0Comparison {
    std::optional<double> rmse_hz;  // over frames voiced in both
    double vuv_error_rate = 0.0;
};
F0Comparison f0_rmse_and_vuv(const VocoderFeatures& pred, const VocoderFeatures& ref);

double speaker_cosine(const VocoderFeatures& edited, const VocoderFeatures& unedited,
                      const EmbeddingProvider& provider);

struct FluxConfig {
    int frame = 256;
    int hop = 64;
    double window_ms = 50.0;  // half-width around each boundary
};

// L2 distance between consecutive Hann-windowed magnitude spectra; entry k
// compares analysis frames k and k+1.
std::vector<double> spectral_flux(const AudioClip& audio, const FluxConfig& cfg = {});

// Max flux within the window around each boundary divided by the median
// flux of the clip; the largest ratio over all boundaries. Throws
// InvalidInput when a window does not fit inside the clip.
double boundary_discontinuity(const AudioClip& audio, std::span<const std::size_t> boundaries,
                              const FluxConfig& cfg = {});
bool boundary_is_interior(const AudioClip& audio, std::size_t boundary, const FluxConfig& cfg = {});

// Metrics for an edit against its source utterance in `corpus`.
RegionMetrics evaluate_edit(const EditResult& result, const Corpus& corpus, const EmbeddingProvider& provider);

// One metrics JSONL row.
nlohmann::json metrics_record(const std::string& edit_id, const RegionMetrics& m);

struct MetricSummary {
    std::size_t edits = 0;
    RegionMetrics mean;  // over the edits where each field is present
};
MetricSummary summarize(std::span<const RegionMetrics> metrics);

// CSV: utterance_id,speaker_id,e0..e31; one row per utterance, ordered by id.
std::string export_embeddings(const Corpus& corpus, const EmbeddingProvider& provider);

}  // namespace tbve
